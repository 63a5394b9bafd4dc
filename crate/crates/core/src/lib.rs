//! Discrete gait tokens and optimal-transport morphing of walks.
//!
//! A skeleton sequence `T x J x 2` is encoded by a graph-temporal network to a
//! `T/4 x J` grid of codebook tokens. Per-position transport maps between the
//! token histograms of two walking variations remap the tokens of a new walk,
//! and the decoder turns them back into a skeleton sequence. Morph quality is
//! scored with a Frechet distance over pooled token embeddings.

pub mod autoencoder;
pub mod error;
pub mod fgd;
pub mod gaitdata;
pub mod io;
pub mod model;
pub mod numerics;
pub mod quantizer;
pub mod transport;

pub use autoencoder::{Autoencoder, ModelConfig, StepMetrics, TrainConfig};
pub use error::{Error, Result};
pub use fgd::{compute_fgd, fit_gaussian, frechet_distance, Embedder, GaussianStats};
pub use gaitdata::{Dataset, SkeletonSequence, Split, VariationKind, VariationLabel};
pub use model::{train_model, FitConfig, GaitModel};
pub use numerics::Matrix;
pub use quantizer::{compressed_bits, Codebook, TokenGrid};
pub use transport::{
    apply_transport_morph, learn_transport_maps, solve_emd, transport_stats, MorphMode, TokenHistogram,
    TransportMap, TransportMapSet, TransportStats,
};
