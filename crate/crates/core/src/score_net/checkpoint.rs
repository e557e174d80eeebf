//! `RDM1` checkpoint files.
//!
//! ```text
//! b"RDM1"
//! u32        header length in bytes
//! [u8]       JSON header {config, sde, seed, normalizer}
//! u64        parameter count
//! [f32]      parameters in layout order
//! u64        checksum: first 8 bytes (little-endian) of SHA-256 over all preceding bytes
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ScoreModel, ScoreNetConfig};
use crate::error::{Error, Result};
use crate::sde::SdeSpec;
use crate::trainer::Normalizer;

pub const MAGIC: &[u8; 4] = b"RDM1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ScoreNetConfig,
    sde: SdeSpec,
    seed: u64,
    normalizer: Option<Normalizer>,
}

pub fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn encode(model: &ScoreModel, normalizer: Option<&Normalizer>) -> Vec<u8> {
    let header = Header {
        config: model.config().clone(),
        sde: *model.sde(),
        seed: model.seed(),
        normalizer: normalizer.cloned(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(24 + json.len() + 4 * model.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    let sum = checksum64(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(ScoreModel, Option<Normalizer>)> {
    let truncated = |detail: &str| Error::Truncated {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 4 {
        return Err(truncated("missing magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "RDM1",
        });
    }
    if bytes.len() < 8 {
        return Err(truncated("missing header length"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let params_at = 8 + header_len + 8;
    if bytes.len() < params_at {
        return Err(truncated("header cut short"));
    }
    let count = u64::from_le_bytes(bytes[8 + header_len..params_at].try_into().unwrap()) as usize;
    let expected_len = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(params_at + 8))
        .ok_or_else(|| truncated("parameter count overflows"))?;
    if bytes.len() < expected_len {
        return Err(truncated(&format!(
            "expected {expected_len} bytes, found {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected_len {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - expected_len),
        });
    }
    let body = &bytes[..expected_len - 8];
    let stored = u64::from_le_bytes(bytes[expected_len - 8..].try_into().unwrap());
    if checksum64(body) != stored {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
        });
    }
    let header: Header =
        serde_json::from_slice(&bytes[8..8 + header_len]).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("header: {e}"),
        })?;
    let implied = header.config.param_count();
    if implied != count {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("config implies {implied} parameters, file has {count}"),
        });
    }
    let params: Vec<f64> = body[params_at..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let model = ScoreModel::from_parts(header.config, header.sde, header.seed, params)?;
    if let Some(n) = &header.normalizer {
        if n.dim() != model.config().input_dim {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "normalizer dimension does not match model".into(),
            });
        }
    }
    Ok((model, header.normalizer))
}

pub fn save(path: &Path, model: &ScoreModel, normalizer: Option<&Normalizer>) -> Result<u64> {
    let bytes = encode(model, normalizer);
    let sum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sum)
}

pub fn load(path: &Path) -> Result<(ScoreModel, Option<Normalizer>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::SdeSpec;

    fn small_model() -> ScoreModel {
        let mut cfg = ScoreNetConfig::new(3);
        cfg.hidden_dim = 8;
        cfg.num_blocks = 2;
        cfg.time_embed_dim = 4;
        cfg.class_embed_dim = 4;
        cfg.num_classes = Some(3);
        ScoreModel::init(cfg, SdeSpec::subvp(), 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = small_model();
        model.quantize_f32();
        let norm = Normalizer {
            mean: vec![0.1, -0.2, 1.0 / 3.0],
            scale: vec![1.5, 2.0, 0.7],
        };
        let bytes = encode(&model, Some(&norm));
        let (back, back_norm) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_norm.as_ref(), Some(&norm));
        assert_eq!(encode(&back, back_norm.as_ref()), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&small_model(), None);
        let p = Path::new("mem");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p), Err(Error::BadMagic { .. })));

        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(decode(cut, p), Err(Error::Truncated { .. })));

        let mut flipped = bytes.clone();
        let mid = bytes.len() - 20;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode(&flipped, p), Err(Error::Checksum { .. })));
    }
}
