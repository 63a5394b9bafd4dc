//! Frechet Gait Distance between sets of walks.
//!
//! Walks are embedded by the frozen tokenizer itself: the quantized latent
//! grid is mean-pooled to one `n_code` vector per walk. Distances computed
//! this way are only comparable between runs of the same model.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaitdata::SkeletonSequence;
use crate::model::GaitModel;
use crate::numerics::{sqrtm_psd, Matrix};
use crate::quantizer::mean_code;

/// Ridge added to every fitted covariance.
pub const COVARIANCE_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub sample_count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Maps a walk to a fixed-length vector with a frozen model.
#[derive(Clone, Copy, Debug)]
pub struct Embedder<'a> {
    model: &'a GaitModel,
}

impl<'a> Embedder<'a> {
    pub fn new(model: &'a GaitModel) -> Self {
        Self { model }
    }

    pub fn dim(&self) -> usize {
        self.model.config().n_code
    }

    /// Mean of the quantized embeddings over all latent positions.
    pub fn embed_sequence(&self, seq: &SkeletonSequence) -> Result<Vec<f64>> {
        let (_, zq) = self.model.tokenize(seq)?;
        Ok(mean_code(&zq))
    }

    pub fn embed_all(&self, seqs: &[&SkeletonSequence]) -> Result<Vec<Vec<f64>>> {
        seqs.par_iter().map(|s| self.embed_sequence(s)).collect()
    }
}

/// Sample mean and unbiased covariance plus [`COVARIANCE_EPSILON`] on the
/// diagonal. A single sample has zero covariance before the ridge.
pub fn fit_gaussian(vectors: &[Vec<f64>]) -> Result<GaussianStats> {
    let Some(first) = vectors.first() else {
        return Err(Error::Parameter("cannot fit a Gaussian to no vectors".into()));
    };
    let d = first.len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Dimension("embedding vectors differ in length".into()));
    }
    let n = vectors.len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = Matrix::zeros(d, d);
    if n > 1 {
        for v in vectors {
            for i in 0..d {
                let di = v[i] - mean[i];
                for j in i..d {
                    cov[(i, j)] += di * (v[j] - mean[j]);
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                let c = cov[(i, j)] / denom;
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
    }
    for i in 0..d {
        cov[(i, i)] += COVARIANCE_EPSILON;
    }
    Ok(GaussianStats {
        mean,
        covariance: cov,
        sample_count: n,
    })
}

/// `|m_p - m_q|^2 + Tr(C_p + C_q - 2 (C_p C_q)^{1/2})`.
///
/// The cross term is evaluated as `Tr((C_p^{1/2} C_q C_p^{1/2})^{1/2})`,
/// which has the same trace and stays symmetric.
pub fn frechet_distance(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    if p.dim() != q.dim() || p.covariance.rows() != p.dim() || q.covariance.rows() != q.dim() {
        return Err(Error::Dimension(format!("Gaussians of dimension {} and {}", p.dim(), q.dim())));
    }
    let mean_term: f64 = p.mean.iter().zip(&q.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let root_p = sqrtm_psd(&p.covariance)?;
    let inner = root_p.matmul(&q.covariance)?.matmul(&root_p)?;
    let cross = sqrtm_psd(&inner)?.trace();
    let d2 = mean_term + p.covariance.trace() + q.covariance.trace() - 2.0 * cross;
    if d2 < 0.0 && d2 > -1e-8 {
        return Ok(0.0);
    }
    Ok(d2)
}

pub fn compute_fgd(embedder: &Embedder<'_>, set_a: &[&SkeletonSequence], set_b: &[&SkeletonSequence]) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Parameter("FGD needs two non-empty sets".into()));
    }
    let a = fit_gaussian(&embedder.embed_all(set_a)?)?;
    let b = fit_gaussian(&embedder.embed_all(set_b)?)?;
    frechet_distance(&a, &b)
}
