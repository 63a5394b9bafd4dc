//! A trained network together with its codebook, the training driver, and
//! the checkpoint format.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic "GMCK" | version u32
//! T u64 | J u64 | #enc u64 | enc widths u64.. | #dec u64 | dec widths u64..
//! n_latent u64 | n_code u64 | adjacency_scales u64 | seed u64
//! parameter tensors in declaration order, f64 each
//! K u64 | n_code u64 | decay f64 | expiry f64 | embeddings | ema_counts | ema_sums
//! ```

use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_step, Autoencoder, ModelConfig, ModelParams, StepMetrics, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::gaitdata::SkeletonSequence;
use crate::io::{read_file, write_atomic, Decoder, Encoder};
use crate::quantizer::{init_codebook_kmeans, quantize, Codebook, TokenGrid};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encoder, decoder and codebook: the full tokenizer for walks.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitModel {
    pub net: Autoencoder,
    pub codebook: Codebook,
}

impl GaitModel {
    pub fn new(net: Autoencoder, codebook: Codebook) -> Result<Self> {
        if codebook.dim() != net.config().n_code {
            return Err(Error::Dimension(format!(
                "codebook dimension {} vs n_code {}",
                codebook.dim(),
                net.config().n_code
            )));
        }
        Ok(Self { net, codebook })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// `q(E(x))`: tokens and their embeddings.
    pub fn tokenize(&self, seq: &SkeletonSequence) -> Result<(TokenGrid, Array3<f64>)> {
        let latent = self.net.encode(&seq.frames)?;
        quantize(&self.codebook, &latent)
    }

    /// Embedding grid for a token grid.
    pub fn embed_tokens(&self, grid: &TokenGrid) -> Result<Array3<f64>> {
        let cfg = self.config();
        if grid.frames() != cfg.latent_frames() || grid.joints() != cfg.joints {
            return Err(Error::Dimension(format!(
                "token grid {}x{} vs latent grid {}x{}",
                grid.frames(),
                grid.joints(),
                cfg.latent_frames(),
                cfg.joints
            )));
        }
        let k = self.codebook.size();
        let mut z = Array3::zeros((grid.frames(), grid.joints(), cfg.n_code));
        for t in 0..grid.frames() {
            for j in 0..grid.joints() {
                let code = grid.get(t, j);
                if code >= k {
                    return Err(Error::Parameter(format!("token {code} outside codebook of {k}")));
                }
                z.slice_mut(ndarray::s![t, j, ..]).assign(&self.codebook.embeddings.row(code));
            }
        }
        Ok(z)
    }

    /// `G(z)` for a token grid.
    pub fn decode_tokens(&self, grid: &TokenGrid) -> Result<Array3<f64>> {
        self.net.decode(&self.embed_tokens(grid)?)
    }

    /// `G(q(E(x)))`, keeping the input's labels.
    pub fn reconstruct(&self, seq: &SkeletonSequence) -> Result<SkeletonSequence> {
        let (_, zq) = self.tokenize(seq)?;
        let frames = self.net.decode(&zq)?;
        SkeletonSequence::new(frames, seq.subject_id, seq.walk, seq.variation.clone())
    }

    pub fn tokenize_all(&self, seqs: &[&SkeletonSequence]) -> Result<Vec<TokenGrid>> {
        seqs.par_iter()
            .map(|s| self.tokenize(s).map(|(g, _)| g))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config();
        let mut enc = Encoder::default();
        enc.bytes(CHECKPOINT_MAGIC);
        enc.u32(CHECKPOINT_VERSION);
        enc.u64(cfg.frames as u64);
        enc.u64(cfg.joints as u64);
        enc.u64(cfg.enc_channels.len() as u64);
        cfg.enc_channels.iter().for_each(|&c| enc.u64(c as u64));
        enc.u64(cfg.dec_channels.len() as u64);
        cfg.dec_channels.iter().for_each(|&c| enc.u64(c as u64));
        enc.u64(cfg.n_latent as u64);
        enc.u64(cfg.n_code as u64);
        enc.u64(cfg.adjacency_scales as u64);
        enc.u64(cfg.seed);
        for t in self.net.params.tensors() {
            enc.f64s(t.iter().copied());
        }
        self.codebook.encode(&mut enc);
        enc.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes, "checkpoint");
        if dec.take(4)? != CHECKPOINT_MAGIC {
            return Err(dec.error("not a gaitmorph checkpoint"));
        }
        let version = dec.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let frames = dec.u64()? as usize;
        let joints = dec.u64()? as usize;
        let n = dec.len(8)?;
        let enc_channels = (0..n).map(|_| dec.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let n = dec.len(8)?;
        let dec_channels = (0..n).map(|_| dec.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let config = ModelConfig {
            frames,
            joints,
            enc_channels,
            dec_channels,
            n_latent: dec.u64()? as usize,
            n_code: dec.u64()? as usize,
            adjacency_scales: dec.u64()? as usize,
            seed: dec.u64()?,
        };
        config.validate().map_err(|e| dec.error(e.to_string()))?;
        let mut params = ModelParams::init(&config)?;
        for t in params.tensors_mut() {
            let values = dec.f64s(t.len())?;
            t.iter_mut().zip(values).for_each(|(d, v)| *d = v);
        }
        let codebook = Codebook::decode(&mut dec)?;
        dec.finish()?;
        let net = Autoencoder::from_params(config, params)?;
        GaitModel::new(net, codebook).map_err(|e| dec.error(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Training loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Dictionary size `K`.
    pub codebook_size: usize,
    /// Seeds batch order and k-means initialization.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            codebook_size: 32,
            seed: 0,
        }
    }
}

/// Trains a network and codebook from scratch on (normalized) sequences.
///
/// The codebook is initialized by k-means over the untrained encoder's
/// outputs for the whole training set. Batches are drawn epoch by epoch from
/// a seeded shuffle. `on_step` sees every step's metrics.
pub fn train_model(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    fit: &FitConfig,
    data: &[SkeletonSequence],
    mut on_step: impl FnMut(&StepMetrics, &GaitModel),
) -> Result<GaitModel> {
    if data.is_empty() {
        return Err(Error::Parameter("no training sequences".into()));
    }
    if fit.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let net = Autoencoder::new(model_config.clone())?;
    let latents = data
        .par_iter()
        .map(|s| net.encode(&s.frames))
        .collect::<Result<Vec<_>>>()?;
    let codebook = init_codebook_kmeans(&latents, fit.codebook_size, fit.seed)?;
    let mut model = GaitModel::new(net, codebook)?;
    let mut state = TrainState::new(model.net.clone(), train_config.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for _ in 0..fit.steps {
        let mut batch = Vec::with_capacity(fit.batch_size);
        while batch.len() < fit.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let metrics = train_step(&mut state, &mut model.codebook, &batch)?;
        model.net.params.clone_from(&state.model.params);
        on_step(&metrics, &model);
    }
    Ok(model)
}
