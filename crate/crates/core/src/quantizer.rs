//! The discrete bottleneck: a codebook searched by cosine similarity and
//! maintained with exponential moving averages.

use std::collections::HashSet;

use ndarray::{Array2, Array3, ArrayView1, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{Decoder, Encoder};
use crate::numerics::{kmeans, KMEANS_DEFAULT_ITERS};

pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EXPIRY_THRESHOLD: f64 = 0.01;
/// Floor on the EMA count when turning sums back into means.
pub const EMA_EPSILON: f64 = 1e-5;

/// Dictionary sizes of the reference sweep.
pub const DICTIONARY_SWEEP: [usize; 7] = [2, 8, 16, 32, 128, 512, 2048];

/// Learnable codebook of `K` vectors of dimension `n_code`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `K x n_code`.
    pub embeddings: Array2<f64>,
    pub ema_counts: Vec<f64>,
    pub ema_sums: Array2<f64>,
    pub decay: f64,
    pub expiry_threshold: f64,
}

/// Code index for every latent position, `T' x J`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    frames: usize,
    joints: usize,
    tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(frames: usize, joints: usize, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != frames * joints {
            return Err(Error::Dimension(format!(
                "{} tokens for a {frames}x{joints} grid",
                tokens.len()
            )));
        }
        Ok(Self {
            frames,
            joints,
            tokens,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Number of latent positions, `T' * J`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens in position order (frame-major).
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn get(&self, frame: usize, joint: usize) -> usize {
        self.tokens[frame * self.joints + joint]
    }

    /// Token at flat position `p = frame * J + joint`.
    pub fn at(&self, position: usize) -> usize {
        self.tokens[position]
    }

    pub fn set(&mut self, position: usize, token: usize) {
        self.tokens[position] = token;
    }
}

fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

impl Codebook {
    pub fn new(embeddings: Array2<f64>) -> Result<Self> {
        let (k, _) = embeddings.dim();
        if k < 2 {
            return Err(Error::Parameter(format!("codebook needs K >= 2, got {k}")));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite codebook entry".into()));
        }
        Ok(Self {
            ema_sums: embeddings.clone(),
            ema_counts: vec![1.0; k],
            embeddings,
            decay: DEFAULT_DECAY,
            expiry_threshold: DEFAULT_EXPIRY_THRESHOLD,
        })
    }

    pub fn size(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Stable 64-bit digest of the embedding table.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.size() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for v in &self.embeddings {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    fn normalized_embeddings(&self) -> Result<Array2<f64>> {
        let mut out = self.embeddings.clone();
        for (k, mut row) in out.outer_iter_mut().enumerate() {
            let n = l2_norm(row.view());
            if n == 0.0 {
                return Err(Error::DegenerateInput(format!("codebook entry {k} has zero norm")));
            }
            row /= n;
        }
        Ok(out)
    }

    pub(crate) fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.size() as u64);
        enc.u64(self.dim() as u64);
        enc.f64(self.decay);
        enc.f64(self.expiry_threshold);
        enc.f64s(self.embeddings.iter().copied());
        enc.f64s(self.ema_counts.iter().copied());
        enc.f64s(self.ema_sums.iter().copied());
    }

    pub(crate) fn decode(dec: &mut Decoder) -> Result<Self> {
        let k = dec.len(8)?;
        let d = dec.len(8)?;
        let decay = dec.f64()?;
        let expiry_threshold = dec.f64()?;
        let embeddings = Array2::from_shape_vec((k, d), dec.f64s(k * d)?)
            .map_err(|e| dec.error(e.to_string()))?;
        let ema_counts = dec.f64s(k)?;
        let ema_sums = Array2::from_shape_vec((k, d), dec.f64s(k * d)?)
            .map_err(|e| dec.error(e.to_string()))?;
        let mut cb = Codebook::new(embeddings).map_err(|e| dec.error(e.to_string()))?;
        cb.ema_counts = ema_counts;
        cb.ema_sums = ema_sums;
        cb.decay = decay;
        cb.expiry_threshold = expiry_threshold;
        Ok(cb)
    }
}

fn flatten_latents<'a>(latents: impl IntoIterator<Item = ArrayView3<'a, f64>>) -> Vec<Vec<f64>> {
    latents
        .into_iter()
        .flat_map(|l| {
            let d = l.dim().2;
            l.to_owned()
                .into_shape_with_order((l.len() / d, d))
                .unwrap()
                .outer_iter()
                .map(|r| r.to_vec())
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Codebook whose entries are k-means centroids of the supplied latent
/// vectors and whose EMA counts are the cluster sizes.
pub fn init_codebook_kmeans(latents: &[Array3<f64>], k: usize, seed: u64) -> Result<Codebook> {
    let points = flatten_latents(latents.iter().map(|l| l.view()));
    if points.is_empty() {
        return Err(Error::Parameter("no latent vectors to initialize from".into()));
    }
    let km = kmeans(&points, k, KMEANS_DEFAULT_ITERS, seed)?;
    let dim = points[0].len();
    let embeddings = Array2::from_shape_vec((k, dim), km.centroids.concat())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let mut cb = Codebook::new(embeddings)?;
    cb.ema_counts = km.cluster_sizes().into_iter().map(|n| n as f64).collect();
    for (kk, &n) in cb.ema_counts.iter().enumerate() {
        let mut row = cb.ema_sums.row_mut(kk);
        row.assign(&cb.embeddings.row(kk));
        row *= n;
    }
    Ok(cb)
}

/// Nearest code by cosine similarity (lowest index on ties) for every latent
/// position. Returns the tokens and the gathered, unnormalized embeddings.
pub fn quantize(codebook: &Codebook, latent: &Array3<f64>) -> Result<(TokenGrid, Array3<f64>)> {
    let (frames, joints, dim) = latent.dim();
    if dim != codebook.dim() {
        return Err(Error::Dimension(format!(
            "latent dimension {dim} vs codebook dimension {}",
            codebook.dim()
        )));
    }
    let normed = codebook.normalized_embeddings()?;
    let mut tokens = Vec::with_capacity(frames * joints);
    let mut zq = Array3::zeros((frames, joints, dim));
    for t in 0..frames {
        for j in 0..joints {
            let v = latent.slice(ndarray::s![t, j, ..]);
            let n = l2_norm(v);
            if !(n > 0.0) {
                return Err(Error::DegenerateInput(format!(
                    "latent vector at ({t}, {j}) has zero norm"
                )));
            }
            let scores = normed.dot(&v);
            let mut best = 0;
            for (k, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = k;
                }
            }
            tokens.push(best);
            zq.slice_mut(ndarray::s![t, j, ..]).assign(&codebook.embeddings.row(best));
        }
    }
    Ok((TokenGrid::new(frames, joints, tokens)?, zq))
}

/// Exponential moving average update from one batch of latents and their
/// assigned tokens.
pub fn ema_update(codebook: &mut Codebook, latents: &[&Array3<f64>], tokens: &[&TokenGrid]) -> Result<()> {
    if latents.len() != tokens.len() {
        return Err(Error::Dimension("latents and token grids differ in count".into()));
    }
    let k = codebook.size();
    let dim = codebook.dim();
    let mut counts = vec![0.0; k];
    let mut sums = Array2::<f64>::zeros((k, dim));
    for (lat, grid) in latents.iter().zip(tokens) {
        let (frames, joints, d) = lat.dim();
        if d != dim || grid.frames() != frames || grid.joints() != joints {
            return Err(Error::Dimension("latent and token grid shapes disagree".into()));
        }
        for t in 0..frames {
            for j in 0..joints {
                let code = grid.get(t, j);
                if code >= k {
                    return Err(Error::Parameter(format!("token {code} out of range")));
                }
                counts[code] += 1.0;
                let mut row = sums.row_mut(code);
                row += &lat.slice(ndarray::s![t, j, ..]);
            }
        }
    }
    let g = codebook.decay;
    for code in 0..k {
        codebook.ema_counts[code] = g * codebook.ema_counts[code] + (1.0 - g) * counts[code];
        if counts[code] == 0.0 {
            continue;
        }
        let mut s = codebook.ema_sums.row_mut(code);
        s *= g;
        s.scaled_add(1.0 - g, &sums.row(code));
        let denom = codebook.ema_counts[code].max(EMA_EPSILON);
        let mean = &codebook.ema_sums.row(code) / denom;
        codebook.embeddings.row_mut(code).assign(&mean);
    }
    Ok(())
}

/// Replaces every code whose EMA count fell below the expiry threshold with
/// a randomly chosen latent vector from the batch. Returns the replaced codes.
pub fn expire_stale(codebook: &mut Codebook, latents: &[&Array3<f64>], seed: u64) -> Result<Vec<usize>> {
    let stale: Vec<usize> = (0..codebook.size())
        .filter(|&k| codebook.ema_counts[k] < codebook.expiry_threshold)
        .collect();
    if stale.is_empty() {
        return Ok(stale);
    }
    let pool = flatten_latents(latents.iter().map(|l| l.view()));
    if pool.is_empty() {
        return Err(Error::Parameter("no latent vectors to replace stale codes".into()));
    }
    if pool[0].len() != codebook.dim() {
        return Err(Error::Dimension("latent dimension differs from codebook".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &k in &stale {
        let v = &pool[rng.random_range(0..pool.len())];
        let v = ArrayView1::from(v.as_slice());
        codebook.embeddings.row_mut(k).assign(&v);
        codebook.ema_sums.row_mut(k).assign(&v);
        codebook.ema_counts[k] = 1.0;
    }
    Ok(stale)
}

/// `||Z Zᵀ - I||²_F / K²` over the row-normalized embeddings.
pub fn ortho_penalty(codebook: &Codebook) -> Result<f64> {
    let z = codebook.normalized_embeddings()?;
    let k = z.nrows();
    let gram = z.dot(&z.t());
    let mut total = 0.0;
    for ((i, j), &g) in gram.indexed_iter() {
        let d = if i == j { g - 1.0 } else { g };
        total += d * d;
    }
    Ok(total / (k * k) as f64)
}

/// Fraction of the `k` codes that occur in at least one grid.
pub fn codebook_usage(grids: &[TokenGrid], k: usize) -> Result<f64> {
    if grids.is_empty() || k == 0 {
        return Err(Error::Parameter("usage needs at least one grid and code".into()));
    }
    let used: HashSet<usize> = grids.iter().flat_map(|g| g.tokens().iter().copied()).collect();
    Ok(used.len() as f64 / k as f64)
}

/// Bits needed to store `num_positions` tokens from a dictionary of `k`.
pub fn compressed_bits(num_positions: u64, k: u64) -> u64 {
    let per_token = if k <= 1 {
        0
    } else {
        u64::from(u64::BITS - (k - 1).leading_zeros())
    };
    num_positions * per_token
}

/// Mean over `axis` helper used by the pooling embedder.
pub(crate) fn mean_code(zq: &Array3<f64>) -> Vec<f64> {
    let (t, j, d) = zq.dim();
    zq.view()
        .into_shape_with_order((t * j, d))
        .unwrap()
        .mean_axis(Axis(0))
        .unwrap()
        .to_vec()
}
