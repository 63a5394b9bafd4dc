//! Dense linear algebra and clustering primitives.
//!
//! Everything here operates on small, dense, double-precision data: the
//! matrices that show up in this crate are covariance matrices of a few dozen
//! dimensions and codebook cost matrices of at most a few thousand entries per
//! side. All functions are pure.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute difference between mirrored entries.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
///
/// Column `i` of `eigenvectors` belongs to `eigenvalues[i]`. Each eigenvector
/// is oriented so that its first non-negligible component is positive.
#[derive(Clone, Debug)]
pub struct EigDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigDecomposition {
    /// Rebuilds `V diag(f(λ)) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for (k, &lambda) in self.eigenvalues.iter().enumerate() {
            let w = f(lambda);
            if w == 0.0 {
                continue;
            }
            for i in 0..n {
                let vik = v[(i, k)] * w;
                for j in 0..n {
                    out[(i, j)] += vik * v[(j, k)];
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|l| l)
    }
}

const SYMMETRY_TOL: f64 = 1e-9;
const MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(a: &Matrix) -> Result<EigDecomposition> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let scale = a.max_abs().max(1.0);
    if a.asymmetry() > SYMMETRY_TOL * scale {
        return Err(Error::Dimension(format!(
            "matrix is not symmetric (asymmetry {:e})",
            a.asymmetry()
        )));
    }
    let n = a.rows();
    let mut m = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(n);

    let total = m.frobenius_norm();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                // Rotation angle chosen to annihilate m[p][q].
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]).then(i.cmp(&j)));

    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let lead = (0..n)
            .map(|r| v[(r, src)])
            .find(|x| x.abs() > 1e-12)
            .unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            eigenvectors[(r, dst)] = sign * v[(r, src)];
        }
    }
    Ok(EigDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

const PSD_REJECT: f64 = 1e-6;

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Slightly negative eigenvalues from round-off are treated as zero. Anything
/// below `-1e-6` (relative to the spectral scale when that exceeds one) is
/// rejected.
pub fn sqrtm_psd(a: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    let scale = eig
        .eigenvalues
        .iter()
        .fold(1.0_f64, |m, l| m.max(l.abs()));
    if let Some(&min) = eig.eigenvalues.first() {
        if min < -PSD_REJECT * scale {
            return Err(Error::NotPsd(min));
        }
    }
    Ok(eig.reconstruct_with(|l| if l > 0.0 { l.sqrt() } else { 0.0 }))
}

/// Result of [`kmeans`].
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Inertia after each assignment pass, the first entry being the initial
    /// assignment to the seeded centroids.
    pub inertia_history: Vec<f64>,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    /// Number of points assigned to each centroid.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

pub const KMEANS_DEFAULT_ITERS: usize = 25;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared Euclidean distance; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's k-means with a seeded choice of `k` distinct points as initial
/// centroids. Stops after `iters` refinement passes or once assignments no
/// longer change. A centroid whose cluster empties keeps its position.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    let dim = match points.first() {
        Some(p) => p.len(),
        None => return Err(Error::Parameter("k-means needs at least one point".into())),
    };
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Dimension("k-means points differ in dimension".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }

    let mut seen = HashSet::new();
    let mut distinct = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let key: Vec<u64> = p.iter().map(|v| (v + 0.0).to_bits()).collect();
        if seen.insert(key) {
            distinct.push(i);
        }
    }
    if distinct.len() < k {
        return Err(Error::Infeasible(format!(
            "{k} clusters requested but only {} distinct points",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    distinct.shuffle(&mut rng);
    let mut centroids: Vec<Vec<f64>> = distinct[..k].iter().map(|&i| points[i].clone()).collect();

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut inertia = 0.0;
        let labels = points
            .iter()
            .map(|p| {
                let (idx, d) = nearest(p, centroids);
                inertia += d;
                idx
            })
            .collect();
        (labels, inertia)
    };

    let (mut assignments, inertia) = assign(&centroids);
    let mut inertia_history = vec![inertia];
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
        let (next, inertia) = assign(&centroids);
        inertia_history.push(inertia);
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }

    Ok(KMeans {
        centroids,
        assignments,
        inertia_history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// One minus cosine similarity.
    Cosine,
}

/// Distance matrix with entry `(i, j) = distance(a[i], b[j])`.
pub fn pairwise_distances(a: &[Vec<f64>], b: &[Vec<f64>], metric: Metric) -> Result<Matrix> {
    let dim = a.first().or(b.first()).map_or(0, Vec::len);
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::Dimension("vectors differ in dimension".into()));
    }
    let mut out = Matrix::zeros(a.len(), b.len());
    match metric {
        Metric::Euclidean => {
            for (i, x) in a.iter().enumerate() {
                for (j, y) in b.iter().enumerate() {
                    out[(i, j)] = squared_distance(x, y).sqrt();
                }
            }
        }
        Metric::Cosine => {
            let norms = |vs: &[Vec<f64>]| -> Result<Vec<f64>> {
                vs.iter()
                    .map(|v| {
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if n == 0.0 {
                            Err(Error::DegenerateInput(
                                "zero vector has no cosine distance".into(),
                            ))
                        } else {
                            Ok(n)
                        }
                    })
                    .collect()
            };
            let na = norms(a)?;
            let nb = norms(b)?;
            for (i, x) in a.iter().enumerate() {
                for (j, y) in b.iter().enumerate() {
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    let cos = (dot / (na[i] * nb[j])).clamp(-1.0, 1.0);
                    out[(i, j)] = 1.0 - cos;
                }
            }
        }
    }
    Ok(out)
}
