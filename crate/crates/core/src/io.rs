//! On-disk formats: `REPZ` representation sets, `HEAD` classifier heads,
//! scores CSV and metrics JSON. Binary formats are little-endian.
//!
//! `REPZ` layout (version 1):
//!
//! ```text
//! b"REPZ" | u16 version | u64 N | u32 D | u32 flags (bit 0: labels present)
//! u16 id length | [u8] dataset_id (UTF-8)
//! [f32; N·D] row-major data | [i32; N] labels (if flagged)
//! u64 checksum: first 8 bytes (LE) of SHA-256 over all preceding bytes
//! ```
//!
//! `HEAD` layout: `b"HEAD" | u32 K | u32 D | [f32; K·D] W row-major | [f32; K] b`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score_net::checkpoint::checksum64;
use crate::trainer::predict_condition;

pub const REPZ_MAGIC: &[u8; 4] = b"REPZ";
pub const REPZ_VERSION: u16 = 1;
pub const HEAD_MAGIC: &[u8; 4] = b"HEAD";
pub const MAX_DIM: usize = 65_535;

/// Representation dimensions of known encoders, keyed by lowercase id.
pub const KNOWN_ENCODERS: &[(&str, usize)] = &[
    ("bit", 2048),
    ("bit-s-r101x1", 2048),
    ("repvgg", 2560),
    ("repvgg-b3", 2560),
    ("resnet50d", 2048),
    ("swin", 1024),
    ("swin-b", 1024),
    ("vit", 768),
    ("vit-b16", 768),
    ("deit", 768),
    ("mae", 768),
    ("dino", 768),
    ("dinov2", 768),
    ("pathology-ssl", 384),
    ("uni", 1024),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    pub data: Array2<f32>,
    pub labels: Option<Vec<i32>>,
    pub dataset_id: String,
}

impl RepresentationSet {
    pub fn new(
        data: Array2<f32>,
        labels: Option<Vec<i32>>,
        dataset_id: impl Into<String>,
    ) -> Result<Self> {
        let set = Self {
            data,
            labels,
            dataset_id: dataset_id.into(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn from_f64(
        data: &Array2<f64>,
        labels: Option<Vec<i32>>,
        dataset_id: impl Into<String>,
    ) -> Result<Self> {
        Self::new(data.mapv(|v| v as f32), labels, dataset_id)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || d > MAX_DIM {
            return Err(Error::InvalidInput(format!(
                "dimension {d} outside [1, {MAX_DIM}]"
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.len(),
                    got: l.len(),
                });
            }
            if l.iter().any(|v| *v < 0) {
                return Err(Error::InvalidInput("labels must be nonnegative".into()));
            }
        }
        if self.dataset_id.len() > u16::MAX as usize {
            return Err(Error::InvalidInput("dataset_id too long".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data_f64(&self) -> Array2<f64> {
        self.data.mapv(|v| v as f64)
    }

    pub fn labels_usize(&self) -> Option<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|v| *v as usize).collect())
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m as usize + 1))
    }
}

/// A warning when `dataset_id` names a known encoder whose dimension differs from `dim`.
pub fn dimension_warning(dataset_id: &str, dim: usize) -> Option<String> {
    let key = dataset_id
        .split(['/', ':'])
        .next()
        .unwrap_or("")
        .to_ascii_lowercase();
    KNOWN_ENCODERS
        .iter()
        .find(|(name, _)| *name == key)
        .filter(|(_, expected)| *expected != dim)
        .map(|(name, expected)| {
            format!("dataset {dataset_id:?}: encoder {name} produces {expected}-dim representations, file has {dim}")
        })
}

pub fn encode_reps(set: &RepresentationSet) -> Vec<u8> {
    let (n, d) = set.data.dim();
    let mut buf = Vec::with_capacity(32 + set.dataset_id.len() + 4 * n * (d + 1));
    buf.extend_from_slice(REPZ_MAGIC);
    buf.extend_from_slice(&REPZ_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    let flags: u32 = if set.labels.is_some() { 1 } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    buf.extend_from_slice(&(set.dataset_id.len() as u16).to_le_bytes());
    buf.extend_from_slice(set.dataset_id.as_bytes());
    for v in set.data.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &set.labels {
        for l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    let sum = checksum64(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{what} cut short at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_reps(bytes: &[u8], path: &Path) -> Result<RepresentationSet> {
    let format_err = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if cur.take(4, "magic")? != REPZ_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "REPZ",
        });
    }
    let version = cur.u16("version")?;
    if version != REPZ_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let n = cur.u64("row count")? as usize;
    let d = cur.u32("dimension")? as usize;
    let flags = cur.u32("flags")?;
    if d == 0 || d > MAX_DIM {
        return Err(format_err(format!("dimension {d} outside [1, {MAX_DIM}]")));
    }
    if flags & !1 != 0 {
        return Err(format_err(format!("unknown flags {flags:#x}")));
    }
    let id_len = cur.u16("dataset id length")? as usize;
    let dataset_id = String::from_utf8(cur.take(id_len, "dataset id")?.to_vec())
        .map_err(|_| format_err("dataset id is not UTF-8".into()))?;
    let cells = n
        .checked_mul(d)
        .ok_or_else(|| format_err("N·D overflows".into()))?;
    let payload_len = cells
        .checked_mul(4)
        .ok_or_else(|| format_err("payload overflows".into()))?;
    let data_bytes = cur.take(payload_len, "data payload")?;
    let labels = if flags & 1 == 1 {
        let lb = cur.take(4 * n, "labels")?;
        Some(
            lb.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let body_end = cur.pos;
    let stored = cur.u64("checksum")?;
    if cur.pos != bytes.len() {
        return Err(format_err(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    if checksum64(&bytes[..body_end]) != stored {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
        });
    }
    let values: Vec<f32> = data_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((n, d), values).expect("payload length checked");
    if labels.as_ref().is_some_and(|l| l.iter().any(|v| *v < 0)) {
        return Err(format_err("negative label".into()));
    }
    Ok(RepresentationSet {
        data,
        labels,
        dataset_id,
    })
}

pub fn read_reps(path: &Path) -> Result<RepresentationSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let set = decode_reps(&bytes, path)?;
    if let Some(w) = dimension_warning(&set.dataset_id, set.dim()) {
        log::warn!("{w}");
    }
    Ok(set)
}

pub fn write_reps(set: &RepresentationSet, path: &Path) -> Result<()> {
    set.validate()?;
    fs::write(path, encode_reps(set)).map_err(|e| Error::io(path, e))
}

/// Final linear layer of a supervised encoder, used to pick `c = argmax(W z + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ClassifierHead {
    pub fn num_classes(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn predict(&self, z: ArrayView1<f64>) -> Result<usize> {
        predict_condition(self.w.view(), self.b.view(), z)
    }
}

pub fn write_head(head: &ClassifierHead, path: &Path) -> Result<()> {
    let (k, d) = head.w.dim();
    if head.b.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: head.b.len(),
        });
    }
    let mut buf = Vec::with_capacity(12 + 4 * k * (d + 1));
    buf.extend_from_slice(HEAD_MAGIC);
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in head.w.iter().chain(head.b.iter()) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_head(path: &Path) -> Result<ClassifierHead> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4, "magic")? != HEAD_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "HEAD",
        });
    }
    let k = cur.u32("K")? as usize;
    let d = cur.u32("D")? as usize;
    let floats: Vec<f64> = cur
        .take(4 * k * (d + 1), "weights")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "trailing bytes".into(),
        });
    }
    let w = Array2::from_shape_vec((k, d), floats[..k * d].to_vec()).expect("length checked");
    let b = Array1::from(floats[k * d..].to_vec());
    Ok(ClassifierHead { w, b })
}

/// One row of a scores CSV. For baselines `bpd` and `nfe` are empty and
/// `logp_nats` holds the baseline score (higher means more in-distribution).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub index: usize,
    pub logp_nats: f64,
    pub bpd: Option<f64>,
    pub nfe: Option<usize>,
    pub label: Option<i64>,
}

pub const SCORES_HEADER: &str = "index,logp_nats,bpd,nfe,label";

pub fn write_scores(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    if rows.is_empty() {
        w.write_record(SCORES_HEADER.split(','))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != SCORES_HEADER {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected header {SCORES_HEADER:?}"),
        });
    }
    r.deserialize()
        .collect::<std::result::Result<Vec<ScoreRow>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            detail: format!("{other:?}"),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dataset_id: String,
    pub dataset_ood: String,
    pub method: String,
    pub auroc_pct: f64,
    pub fpr95_pct: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub threshold: f64,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Fails when `path` exists and `force` is not set.
pub fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        Err(Error::OutputExists(PathBuf::from(path)))
    } else {
        Ok(())
    }
}
