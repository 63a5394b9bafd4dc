//! Spatio-temporal graph autoencoder with hand-written gradients.
//!
//! The encoder maps a `T x J x 2` walk to a `T/4 x J x n_code` latent grid;
//! the decoder maps a grid of the same shape back to `T x J x 2`. Each block
//! is a multi-scale graph convolution over the skeleton followed by a kernel
//! 3 temporal convolution, each with a GeLU. The first two encoder blocks
//! halve the frame count; the first two decoder blocks double it.

pub mod layers;
mod train;

pub use train::{
    cyclical_lr, smooth_l1, train_step, AdamW, LossWeights, StepMetrics, TrainConfig, TrainState,
    SMOOTH_L1_BETA,
};

use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaitdata::SkeletonLayout;
use crate::quantizer::{quantize, Codebook, TokenGrid};

use layers::{
    affine, affine_per_joint, bias_grad, bias_grad_per_joint, gelu, gelu_grad, graph_aggregate,
    graph_aggregate_backward, matmul_backward, temporal_col2im, temporal_im2col, Adjacency,
    TemporalMode,
};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "J")]
    pub joints: usize,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    /// Width of the encoder embedding before the down-projection.
    pub n_latent: usize,
    /// Codebook dimension.
    pub n_code: usize,
    pub adjacency_scales: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            joints: 18,
            enc_channels: vec![16, 32],
            dec_channels: vec![16, 8],
            n_latent: 32,
            n_code: 16,
            adjacency_scales: 2,
            seed: 0,
        }
    }
}

/// Number of temporal pooling steps; the latent grid has `T / 4` frames.
pub const TEMPORAL_POOLINGS: usize = 2;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 8 || !self.frames.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "T = {} must be at least 8 and divisible by 4",
                self.frames
            )));
        }
        if self.joints < 2 {
            return Err(Error::Config("J must be at least 2".into()));
        }
        if self.enc_channels.is_empty() || self.dec_channels.is_empty() {
            return Err(Error::Config("channel lists must not be empty".into()));
        }
        if self.enc_channels.iter().chain(&self.dec_channels).any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.n_code == 0 || self.n_code > self.n_latent {
            return Err(Error::Config(format!(
                "need 0 < n_code ({}) <= n_latent ({})",
                self.n_code, self.n_latent
            )));
        }
        if self.adjacency_scales == 0 {
            return Err(Error::Config("need at least one adjacency scale".into()));
        }
        Ok(())
    }

    pub fn latent_frames(&self) -> usize {
        self.frames / 4
    }

    /// Latent positions per sequence, `T/4 * J`.
    pub fn latent_positions(&self) -> usize {
        self.latent_frames() * self.joints
    }

    /// `(in, out, mode)` for each encoder block.
    fn encoder_blocks(&self) -> Vec<(usize, usize, TemporalMode)> {
        stage_plan(&self.enc_channels, 2, TemporalMode::Down)
    }

    fn decoder_blocks(&self) -> Vec<(usize, usize, TemporalMode)> {
        stage_plan(&self.dec_channels, self.dec_channels[0], TemporalMode::Up)
    }
}

fn stage_plan(widths: &[usize], input: usize, resample: TemporalMode) -> Vec<(usize, usize, TemporalMode)> {
    let count = widths.len().max(TEMPORAL_POOLINGS);
    let mut prev = input;
    (0..count)
        .map(|i| {
            let w = widths[i.min(widths.len() - 1)];
            let mode = if i < TEMPORAL_POOLINGS { resample } else { TemporalMode::Same };
            let block = (prev, w, mode);
            prev = w;
            block
        })
        .collect()
}

/// Weights of one spatial-graph + temporal block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// `(S * C_in) x C_out`
    pub spatial_w: Array2<f64>,
    pub spatial_b: Array2<f64>,
    /// `(3 * C_out) x C_out`
    pub temporal_w: Array2<f64>,
    pub temporal_b: Array2<f64>,
}

/// All trainable tensors. Biases are stored as `1 x C` (or `J x C` for the
/// per-joint ones) so every parameter is a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<BlockParams>,
    pub latent_w: Array2<f64>,
    pub latent_b: Array2<f64>,
    /// `n_latent x n_code`
    pub down: Array2<f64>,
    /// `n_code x C_dec`
    pub up: Array2<f64>,
    pub up_joint_b: Array2<f64>,
    pub decoder: Vec<BlockParams>,
    pub head_w: Array2<f64>,
    /// Per-joint output offsets, `J x 2`.
    pub head_joint_b: Array2<f64>,
}

impl ModelParams {
    /// Seeded He-uniform initialization in `±sqrt(6/fan_in)`; biases start at 0.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut weight = |fan_in: usize, fan_out: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
        };
        let scales = config.adjacency_scales;
        let mut block = |cin: usize, cout: usize| BlockParams {
            spatial_w: weight(scales * cin, cout),
            spatial_b: Array2::zeros((1, cout)),
            temporal_w: weight(layers::TEMPORAL_KERNEL * cout, cout),
            temporal_b: Array2::zeros((1, cout)),
        };
        let encoder: Vec<BlockParams> = config
            .encoder_blocks()
            .into_iter()
            .map(|(i, o, _)| block(i, o))
            .collect();
        let decoder: Vec<BlockParams> = config
            .decoder_blocks()
            .into_iter()
            .map(|(i, o, _)| block(i, o))
            .collect();
        let enc_out = encoder.last().unwrap().temporal_w.ncols();
        let dec_in = config.dec_channels[0];
        let dec_out = decoder.last().unwrap().temporal_w.ncols();
        Ok(Self {
            encoder,
            latent_w: weight(enc_out, config.n_latent),
            latent_b: Array2::zeros((1, config.n_latent)),
            down: weight(config.n_latent, config.n_code),
            up: weight(config.n_code, dec_in),
            up_joint_b: Array2::zeros((config.joints, dec_in)),
            decoder,
            head_w: weight(dec_out, 2),
            head_joint_b: Array2::zeros((config.joints, 2)),
        })
    }

    /// Every tensor in declaration order.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for b in &self.encoder {
            out.extend([&b.spatial_w, &b.spatial_b, &b.temporal_w, &b.temporal_b]);
        }
        out.extend([&self.latent_w, &self.latent_b, &self.down, &self.up, &self.up_joint_b]);
        for b in &self.decoder {
            out.extend([&b.spatial_w, &b.spatial_b, &b.temporal_w, &b.temporal_b]);
        }
        out.extend([&self.head_w, &self.head_joint_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for b in &mut self.encoder {
            out.extend([&mut b.spatial_w, &mut b.spatial_b, &mut b.temporal_w, &mut b.temporal_b]);
        }
        out.extend([
            &mut self.latent_w,
            &mut self.latent_b,
            &mut self.down,
            &mut self.up,
            &mut self.up_joint_b,
        ]);
        for b in &mut self.decoder {
            out.extend([&mut b.spatial_w, &mut b.spatial_b, &mut b.temporal_w, &mut b.temporal_b]);
        }
        out.extend([&mut self.head_w, &mut self.head_joint_b]);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, b);
        }
    }
}

struct BlockCache {
    aggregated: Array2<f64>,
    spatial_pre: Array2<f64>,
    window: Array2<f64>,
    temporal_pre: Array2<f64>,
    in_frames: usize,
}

fn gelu_map(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

fn gelu_backward(pre: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    out.zip_mut_with(pre, |g, &x| *g *= gelu_grad(x));
    out
}

/// Encoder and decoder weights with their fixed skeleton graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    config: ModelConfig,
    pub params: ModelParams,
    adjacency: Adjacency,
}

/// Activations kept for the backward pass of a full encode/decode.
pub struct ForwardTrace {
    encoder: Vec<BlockCache>,
    encoder_out: Array2<f64>,
    latent: Array2<f64>,
    decoder_in: Array2<f64>,
    decoder: Vec<BlockCache>,
    decoder_out: Array2<f64>,
}

/// Per-sequence loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub commit: f64,
    pub ortho: f64,
    pub total: f64,
}

/// What the decoder sees in place of the encoder output.
pub enum Bottleneck<'a> {
    /// Nearest-code lookup; gradients pass straight through.
    Codebook(&'a Codebook),
    /// Fixed targets: decoder input is `z_e + offset`, the commitment term is
    /// measured against `target`. With `offset = target - z_e` evaluated at
    /// the current parameters this is the function whose exact gradient the
    /// straight-through estimator computes.
    Frozen { target: &'a Array3<f64>, offset: &'a Array3<f64> },
}

/// Result of [`Autoencoder::loss_and_grad`].
pub struct LossEval {
    pub loss: LossParts,
    pub grads: ModelParams,
    /// Encoder output `z_e`, `T' x J x n_code`.
    pub latent: Array3<f64>,
    /// Decoder input actually used.
    pub quantized: Array3<f64>,
    pub tokens: Option<TokenGrid>,
}

impl Autoencoder {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::init(&ModelConfig { seed: 0, ..config.clone() })?;
        let shapes_match = expected.tensors().len() == params.tensors().len()
            && expected
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.dim() == b.dim());
        if !shapes_match {
            return Err(Error::Dimension("parameter shapes do not match the configuration".into()));
        }
        let adjacency = Adjacency::new(&SkeletonLayout::for_joints(config.joints), config.adjacency_scales);
        Ok(Self {
            config,
            params,
            adjacency,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let want = (self.config.frames, self.config.joints, 2);
        if x.dim() != want {
            return Err(Error::Dimension(format!("input shape {:?}, expected {want:?}", x.dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite input coordinate".into()));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Array3<f64>) -> Result<()> {
        let want = (self.config.latent_frames(), self.config.joints, self.config.n_code);
        if z.dim() != want {
            return Err(Error::Dimension(format!("latent shape {:?}, expected {want:?}", z.dim())));
        }
        Ok(())
    }

    fn block_forward(
        &self,
        p: &BlockParams,
        mode: TemporalMode,
        x: Array2<f64>,
        cache: Option<&mut Vec<BlockCache>>,
    ) -> Array2<f64> {
        let joints = self.config.joints;
        let in_frames = x.nrows() / joints;
        let aggregated = graph_aggregate(&self.adjacency, x.view(), joints);
        let spatial_pre = affine(aggregated.view(), &p.spatial_w, &p.spatial_b);
        let spatial = gelu_map(&spatial_pre);
        let window = temporal_im2col(mode, spatial.view(), joints);
        let temporal_pre = affine(window.view(), &p.temporal_w, &p.temporal_b);
        let out = gelu_map(&temporal_pre);
        if let Some(c) = cache {
            c.push(BlockCache {
                aggregated,
                spatial_pre,
                window,
                temporal_pre,
                in_frames,
            });
        }
        out
    }

    /// Returns the gradient with respect to the block input.
    fn block_backward(
        &self,
        p: &BlockParams,
        g: &mut BlockParams,
        mode: TemporalMode,
        cache: &BlockCache,
        grad_out: &Array2<f64>,
    ) -> Array2<f64> {
        let joints = self.config.joints;
        let d_tpre = gelu_backward(&cache.temporal_pre, grad_out);
        let (d_window, d_tw) = matmul_backward(cache.window.view(), &p.temporal_w, d_tpre.view());
        g.temporal_w += &d_tw;
        g.temporal_b += &bias_grad(d_tpre.view());
        let d_spatial = temporal_col2im(mode, d_window.view(), joints, cache.in_frames);
        let d_spre = gelu_backward(&cache.spatial_pre, &d_spatial);
        let (d_agg, d_sw) = matmul_backward(cache.aggregated.view(), &p.spatial_w, d_spre.view());
        g.spatial_w += &d_sw;
        g.spatial_b += &bias_grad(d_spre.view());
        graph_aggregate_backward(&self.adjacency, d_agg.view(), joints)
    }

    fn encode_rows(&self, x: &Array3<f64>, mut cache: Option<&mut ForwardTrace>) -> Array2<f64> {
        let (t, j, _) = x.dim();
        let mut h = x.to_owned().into_shape_with_order((t * j, 2)).unwrap();
        let plan = self.config.encoder_blocks();
        for (p, &(_, _, mode)) in self.params.encoder.iter().zip(&plan) {
            h = self.block_forward(p, mode, h, cache.as_deref_mut().map(|c| &mut c.encoder));
        }
        let latent = affine(h.view(), &self.params.latent_w, &self.params.latent_b);
        let z = latent.dot(&self.params.down);
        if let Some(c) = cache {
            c.encoder_out = h;
            c.latent = latent;
        }
        z
    }

    fn decode_rows(&self, z: ArrayView2<f64>, mut cache: Option<&mut ForwardTrace>) -> Array2<f64> {
        let mut h = affine_per_joint(z, &self.params.up, &self.params.up_joint_b);
        let plan = self.config.decoder_blocks();
        if let Some(c) = cache.as_deref_mut() {
            c.decoder_in = z.to_owned();
        }
        for (p, &(_, _, mode)) in self.params.decoder.iter().zip(&plan) {
            h = self.block_forward(p, mode, h, cache.as_deref_mut().map(|c| &mut c.decoder));
        }
        let out = affine_per_joint(h.view(), &self.params.head_w, &self.params.head_joint_b);
        if let Some(c) = cache {
            c.decoder_out = h;
        }
        out
    }

    fn rows_to_grid(&self, rows: Array2<f64>, frames: usize) -> Array3<f64> {
        let c = rows.ncols();
        rows.into_shape_with_order((frames, self.config.joints, c)).unwrap()
    }

    fn grid_to_rows(z: &Array3<f64>) -> Array2<f64> {
        let (t, j, c) = z.dim();
        z.to_owned().into_shape_with_order((t * j, c)).unwrap()
    }

    /// Encoder output `z_e`, `T/4 x J x n_code`.
    pub fn encode(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_input(x)?;
        let z = self.encode_rows(x, None);
        Ok(self.rows_to_grid(z, self.config.latent_frames()))
    }

    /// Reconstruction `T x J x 2` from a (quantized) latent grid.
    pub fn decode(&self, z: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_latent(z)?;
        let rows = Self::grid_to_rows(z);
        let out = self.decode_rows(rows.view(), None);
        Ok(self.rows_to_grid(out, self.config.frames))
    }

    /// Loss of one sequence and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        x: &Array3<f64>,
        bottleneck: Bottleneck<'_>,
        weights: &LossWeights,
    ) -> Result<LossEval> {
        self.check_input(x)?;
        let cfg = &self.config;
        let mut trace = ForwardTrace {
            encoder: Vec::new(),
            encoder_out: Array2::zeros((0, 0)),
            latent: Array2::zeros((0, 0)),
            decoder_in: Array2::zeros((0, 0)),
            decoder: Vec::new(),
            decoder_out: Array2::zeros((0, 0)),
        };
        let z_rows = self.encode_rows(x, Some(&mut trace));
        let latent = self.rows_to_grid(z_rows.clone(), cfg.latent_frames());

        let (tokens, target, decoder_in, ortho) = match bottleneck {
            Bottleneck::Codebook(cb) => {
                let (tokens, zq) = quantize(cb, &latent)?;
                let ortho = crate::quantizer::ortho_penalty(cb)?;
                (Some(tokens), zq.clone(), zq, ortho)
            }
            Bottleneck::Frozen { target, offset } => {
                self.check_latent(target)?;
                self.check_latent(offset)?;
                (None, target.clone(), &latent + offset, 0.0)
            }
        };

        let dec_rows = Self::grid_to_rows(&decoder_in);
        let out_rows = self.decode_rows(dec_rows.view(), Some(&mut trace));
        let recon_pred = self.rows_to_grid(out_rows, cfg.frames);
        let (recon, d_pred) = smooth_l1(&recon_pred, x, weights.beta)?;

        let diff = &latent - &target;
        let n = diff.len() as f64;
        let commit = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let total = recon + weights.commit * commit + weights.ortho * ortho;

        let mut grads = self.params.zeros_like();

        // Decoder.
        let d_out = Self::grid_to_rows(&d_pred);
        let (mut d_h, d_head) = matmul_backward(trace.decoder_out.view(), &self.params.head_w, d_out.view());
        grads.head_w += &d_head;
        grads.head_joint_b += &bias_grad_per_joint(d_out.view(), cfg.joints);
        let dec_plan = cfg.decoder_blocks();
        for i in (0..self.params.decoder.len()).rev() {
            d_h = self.block_backward(
                &self.params.decoder[i],
                &mut grads.decoder[i],
                dec_plan[i].2,
                &trace.decoder[i],
                &d_h,
            );
        }
        let (d_zq, d_up) = matmul_backward(trace.decoder_in.view(), &self.params.up, d_h.view());
        grads.up += &d_up;
        grads.up_joint_b += &bias_grad_per_joint(d_h.view(), cfg.joints);

        // Straight-through: the decoder-input gradient lands on z_e unchanged.
        let mut d_z = d_zq;
        d_z.scaled_add(2.0 * weights.commit / n, &Self::grid_to_rows(&diff));

        // Encoder.
        let (d_latent, d_down) = matmul_backward(trace.latent.view(), &self.params.down, d_z.view());
        grads.down += &d_down;
        let (mut d_h, d_lw) = matmul_backward(trace.encoder_out.view(), &self.params.latent_w, d_latent.view());
        grads.latent_w += &d_lw;
        grads.latent_b += &bias_grad(d_latent.view());
        let enc_plan = cfg.encoder_blocks();
        for i in (0..self.params.encoder.len()).rev() {
            d_h = self.block_backward(
                &self.params.encoder[i],
                &mut grads.encoder[i],
                enc_plan[i].2,
                &trace.encoder[i],
                &d_h,
            );
        }

        Ok(LossEval {
            loss: LossParts {
                recon,
                commit,
                ortho,
                total,
            },
            grads,
            latent,
            quantized: decoder_in,
            tokens,
        })
    }

    /// Loss value only; same definition as [`Self::loss_and_grad`].
    pub fn loss(&self, x: &Array3<f64>, bottleneck: Bottleneck<'_>, weights: &LossWeights) -> Result<LossParts> {
        self.check_input(x)?;
        let latent = self.encode(x)?;
        let (target, decoder_in, ortho) = match bottleneck {
            Bottleneck::Codebook(cb) => {
                let (_, zq) = quantize(cb, &latent)?;
                (zq.clone(), zq, crate::quantizer::ortho_penalty(cb)?)
            }
            Bottleneck::Frozen { target, offset } => (target.clone(), &latent + offset, 0.0),
        };
        let recon_pred = self.decode(&decoder_in)?;
        let (recon, _) = smooth_l1(&recon_pred, x, weights.beta)?;
        let diff = &latent - &target;
        let commit = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        Ok(LossParts {
            recon,
            commit,
            ortho,
            total: recon + weights.commit * commit + weights.ortho * ortho,
        })
    }
}
