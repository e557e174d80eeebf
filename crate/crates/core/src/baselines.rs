//! Label-free OOD baselines: k-th nearest neighbour distance and the
//! principal-subspace residual norm.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{self, ScoreSet};

pub const DEFAULT_K: usize = 50;

/// Relative eigenvalue cutoff below which a direction counts as degenerate.
pub const DEGENERATE_RTOL: f64 = 1e-10;

fn l2_normalize(mut v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v /= n;
    }
    v
}

#[derive(Debug, Clone)]
pub struct KnnIndex {
    reference: Array2<f64>,
    k: usize,
    normalize: bool,
}

impl KnnIndex {
    pub fn new(reference: ArrayView2<f64>, k: usize, normalize: bool) -> Result<Self> {
        let n = reference.nrows();
        if k == 0 || k > n {
            return Err(Error::InvalidInput(format!("k = {k} must lie in [1, {n}]")));
        }
        if reference.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("knn reference".into()));
        }
        let mut reference = reference.to_owned();
        if normalize {
            for mut row in reference.axis_iter_mut(Axis(0)) {
                let r = l2_normalize(row.to_owned());
                row.assign(&r);
            }
        }
        Ok(Self {
            reference,
            k,
            normalize,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.reference.ncols()
    }

    pub fn normalized(&self) -> bool {
        self.normalize
    }
}

/// Negative Euclidean distance to the k-th nearest reference point.
pub fn knn_score(index: &KnnIndex, query: ArrayView1<f64>) -> Result<f64> {
    if query.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            got: query.len(),
        });
    }
    let q = if index.normalize {
        l2_normalize(query.to_owned())
    } else {
        query.to_owned()
    };
    let mut d2: Vec<f64> = index
        .reference
        .axis_iter(Axis(0))
        .map(|r| r.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let (_, kth, _) = d2.select_nth_unstable_by(index.k - 1, f64::total_cmp);
    Ok(-kth.sqrt())
}

pub fn knn_scores(index: &KnnIndex, queries: ArrayView2<f64>) -> Result<Vec<f64>> {
    (0..queries.nrows())
        .into_par_iter()
        .map(|i| knn_score(index, queries.row(i)))
        .collect()
}

/// Default principal dimension: the last third of directions is residual.
pub fn default_num_principal(d: usize) -> usize {
    d - d.div_ceil(3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualProjector {
    mean: Array1<f64>,
    /// Columns are eigenvectors in descending eigenvalue order.
    eigvecs: Array2<f64>,
    eigvals: Array1<f64>,
    num_principal: usize,
    offset: Array1<f64>,
}

impl ResidualProjector {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn num_principal(&self) -> usize {
        self.num_principal
    }

    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    pub fn eigvecs(&self) -> ArrayView2<'_, f64> {
        self.eigvecs.view()
    }

    pub fn eigvals(&self) -> ArrayView1<'_, f64> {
        self.eigvals.view()
    }

    /// Same eigenbasis with a different split point.
    pub fn with_num_principal(&self, num_principal: usize) -> Result<Self> {
        if num_principal > self.dim() {
            return Err(Error::InvalidInput(format!(
                "num_principal {num_principal} exceeds dimension {}",
                self.dim()
            )));
        }
        Ok(Self {
            num_principal,
            ..self.clone()
        })
    }

    pub fn with_offset(mut self, offset: Array1<f64>) -> Result<Self> {
        if offset.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: offset.len(),
            });
        }
        self.offset = offset;
        Ok(self)
    }

    fn centered(&self, query: ArrayView1<f64>) -> Result<Array1<f64>> {
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        Ok(&query - &self.mean - &self.offset)
    }

    /// Splits `query − mean − offset` into principal and residual parts.
    pub fn decompose(&self, query: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let x = self.centered(query)?;
        let p = self.num_principal;
        let coords = self.eigvecs.t().dot(&x);
        let principal = self
            .eigvecs
            .slice(ndarray::s![.., ..p])
            .dot(&coords.slice(ndarray::s![..p]));
        let residual = self
            .eigvecs
            .slice(ndarray::s![.., p..])
            .dot(&coords.slice(ndarray::s![p..]));
        Ok((principal, residual))
    }
}

pub fn fit_residual(train: ArrayView2<f64>, num_principal: usize) -> Result<ResidualProjector> {
    let (n, d) = train.dim();
    if n < 2 {
        return Err(Error::InvalidInput(
            "residual fit needs at least 2 rows".into(),
        ));
    }
    if num_principal > d {
        return Err(Error::InvalidInput(format!(
            "num_principal {num_principal} exceeds dimension {d}"
        )));
    }
    if train.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("residual training data".into()));
    }
    let mean = train.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &train - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));

    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = DEGENERATE_RTOL * max;
    let vec_of = |j: usize| -> Vec<f64> { eig.eigenvectors.column(j).iter().copied().collect() };
    let dominant_axis = |v: &[f64]| -> usize {
        v.iter()
            .enumerate()
            .fold((0, -1.0), |(bi, bv), (i, x)| {
                if x.abs() > bv {
                    (i, x.abs())
                } else {
                    (bi, bv)
                }
            })
            .0
    };
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        let (la, lb) = (eig.eigenvalues[a], eig.eigenvalues[b]);
        match (la <= cutoff, lb <= cutoff) {
            (false, false) => lb.total_cmp(&la),
            (true, true) => dominant_axis(&vec_of(a)).cmp(&dominant_axis(&vec_of(b))),
            (x, y) => x.cmp(&y),
        }
    });

    let mut eigvecs = Array2::zeros((d, d));
    let mut eigvals = Array1::zeros(d);
    for (col, &j) in order.iter().enumerate() {
        let mut v = vec_of(j);
        // Sign convention: the largest-magnitude entry is positive.
        if v[dominant_axis(&v)] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        eigvecs.column_mut(col).assign(&Array1::from(v));
        eigvals[col] = eig.eigenvalues[j];
    }
    Ok(ResidualProjector {
        mean,
        eigvecs,
        eigvals,
        num_principal,
        offset: Array1::zeros(d),
    })
}

/// Negative norm of the residual-subspace projection.
pub fn residual_score(proj: &ResidualProjector, query: ArrayView1<f64>) -> Result<f64> {
    let x = proj.centered(query)?;
    let tail = proj.eigvecs.slice(ndarray::s![.., proj.num_principal..]);
    let r = tail.t().dot(&x);
    Ok(-r.dot(&r).sqrt())
}

pub fn residual_scores(proj: &ResidualProjector, queries: ArrayView2<f64>) -> Result<Vec<f64>> {
    (0..queries.nrows())
        .into_par_iter()
        .map(|i| residual_score(proj, queries.row(i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub num_principal: usize,
    pub auroc_pct: f64,
    pub fpr95_pct: f64,
}

/// Metrics for `num_principal = 0, stride, 2·stride, …`, always ending at D.
pub fn residual_sweep(
    train: ArrayView2<f64>,
    id_eval: ArrayView2<f64>,
    ood_eval: ArrayView2<f64>,
    stride: usize,
) -> Result<Vec<SweepRow>> {
    if stride == 0 {
        return Err(Error::InvalidInput("sweep stride must be positive".into()));
    }
    let base = fit_residual(train, 0)?;
    let d = base.dim();
    let mut ps: Vec<usize> = (0..=d).step_by(stride).collect();
    if ps.last() != Some(&d) {
        ps.push(d);
    }
    ps.into_iter()
        .map(|p| {
            let proj = base.with_num_principal(p)?;
            let id = ScoreSet::new(residual_scores(&proj, id_eval)?, "id")?;
            let ood = ScoreSet::new(residual_scores(&proj, ood_eval)?, "ood")?;
            Ok(SweepRow {
                num_principal: p,
                auroc_pct: evaluator::auroc(&id, &ood),
                fpr95_pct: evaluator::fpr_at_tpr(&id, &ood, 0.95)?,
            })
        })
        .collect()
}
