//! Forward and backward passes of the building blocks.
//!
//! Feature maps are `(T * J) x C` matrices with frame-major rows: row
//! `t * J + j` holds the channels of joint `j` in frame `t`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};

use crate::gaitdata::SkeletonLayout;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-normalized powers `A^0 .. A^{S-1}` of the skeleton adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub scales: Vec<Array2<f64>>,
}

impl Adjacency {
    pub fn new(layout: &SkeletonLayout, num_scales: usize) -> Self {
        let j = layout.joints;
        let mut adj = Array2::<f64>::zeros((j, j));
        for &(a, b) in &layout.edges {
            adj[[a, b]] = 1.0;
            adj[[b, a]] = 1.0;
        }
        let mut power = Array2::<f64>::eye(j);
        let mut scales = Vec::with_capacity(num_scales);
        for _ in 0..num_scales {
            let mut normed = power.clone();
            for mut row in normed.outer_iter_mut() {
                let sum = row.sum();
                if sum > 0.0 {
                    row /= sum;
                }
            }
            scales.push(normed);
            power = power.dot(&adj);
        }
        Self { scales }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }
}

/// Multi-scale graph aggregation: `[A_0 X_t | A_1 X_t | ...]` for every frame.
pub fn graph_aggregate(adj: &Adjacency, x: ArrayView2<f64>, joints: usize) -> Array2<f64> {
    let (rows, c) = x.dim();
    let frames = rows / joints;
    let mut out = Array2::zeros((rows, c * adj.num_scales()));
    for t in 0..frames {
        let r = t * joints..(t + 1) * joints;
        let xt = x.slice(s![r.clone(), ..]);
        for (si, a) in adj.scales.iter().enumerate() {
            let mut dst = out.slice_mut(s![r.clone(), si * c..(si + 1) * c]);
            general_mat_mul(1.0, a, &xt, 0.0, &mut dst);
        }
    }
    out
}

/// Adjoint of [`graph_aggregate`].
pub fn graph_aggregate_backward(adj: &Adjacency, grad: ArrayView2<f64>, joints: usize) -> Array2<f64> {
    let (rows, sc) = grad.dim();
    let c = sc / adj.num_scales();
    let frames = rows / joints;
    let mut out = Array2::zeros((rows, c));
    for t in 0..frames {
        let r = t * joints..(t + 1) * joints;
        for (si, a) in adj.scales.iter().enumerate() {
            let g = grad.slice(s![r.clone(), si * c..(si + 1) * c]);
            let mut dst = out.slice_mut(s![r.clone(), ..]);
            general_mat_mul(1.0, &a.t(), &g, 1.0, &mut dst);
        }
    }
    out
}

/// How a temporal convolution maps input frames to output frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMode {
    Same,
    /// Stride 2, halves the frame count.
    Down,
    /// Zero-insertion upsampling followed by a stride 1 convolution
    /// (a stride 2 transposed convolution), doubles the frame count.
    Up,
}

pub const TEMPORAL_KERNEL: usize = 3;

impl TemporalMode {
    pub fn output_frames(self, frames: usize) -> usize {
        match self {
            TemporalMode::Same => frames,
            TemporalMode::Down => frames / 2,
            TemporalMode::Up => frames * 2,
        }
    }

    /// Input frame read by output frame `t` through kernel tap `k`.
    fn source(self, t: usize, k: usize, in_frames: usize) -> Option<usize> {
        let out_frames = self.output_frames(in_frames);
        match self {
            TemporalMode::Same => (t + k).checked_sub(1).filter(|&s| s < in_frames),
            TemporalMode::Down => (2 * t + k).checked_sub(1).filter(|&s| s < in_frames),
            TemporalMode::Up => (t + k)
                .checked_sub(1)
                .filter(|&u| u < out_frames && u % 2 == 0)
                .map(|u| u / 2),
        }
    }
}

/// Gathers the kernel window of every output position into one row.
pub fn temporal_im2col(mode: TemporalMode, x: ArrayView2<f64>, joints: usize) -> Array2<f64> {
    let (rows, c) = x.dim();
    let in_frames = rows / joints;
    let out_frames = mode.output_frames(in_frames);
    let mut out = Array2::zeros((out_frames * joints, TEMPORAL_KERNEL * c));
    for t in 0..out_frames {
        for k in 0..TEMPORAL_KERNEL {
            if let Some(src) = mode.source(t, k, in_frames) {
                out.slice_mut(s![t * joints..(t + 1) * joints, k * c..(k + 1) * c])
                    .assign(&x.slice(s![src * joints..(src + 1) * joints, ..]));
            }
        }
    }
    out
}

/// Adjoint of [`temporal_im2col`].
pub fn temporal_col2im(mode: TemporalMode, grad: ArrayView2<f64>, joints: usize, in_frames: usize) -> Array2<f64> {
    let c = grad.ncols() / TEMPORAL_KERNEL;
    let out_frames = mode.output_frames(in_frames);
    let mut out = Array2::zeros((in_frames * joints, c));
    for t in 0..out_frames {
        for k in 0..TEMPORAL_KERNEL {
            if let Some(src) = mode.source(t, k, in_frames) {
                let mut dst = out.slice_mut(s![src * joints..(src + 1) * joints, ..]);
                dst += &grad.slice(s![t * joints..(t + 1) * joints, k * c..(k + 1) * c]);
            }
        }
    }
    out
}

/// `x w + b` with `b` a single row broadcast over all rows.
pub fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += &b.row(0);
    y
}

/// `x w + b_j` with one bias row per joint.
pub fn affine_per_joint(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let joints = b.nrows();
    let mut y = x.dot(w);
    for (r, mut row) in y.outer_iter_mut().enumerate() {
        row += &b.row(r % joints);
    }
    y
}

/// Gradients of `x w (+ bias)` given the output gradient: `(dx, dw)`.
pub fn matmul_backward(x: ArrayView2<f64>, w: &Array2<f64>, grad: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    (grad.dot(&w.t()), x.t().dot(&grad))
}

pub fn bias_grad(grad: ArrayView2<f64>) -> Array2<f64> {
    grad.sum_axis(Axis(0)).insert_axis(Axis(0))
}

pub fn bias_grad_per_joint(grad: ArrayView2<f64>, joints: usize) -> Array2<f64> {
    let mut out = Array2::zeros((joints, grad.ncols()));
    for (r, row) in grad.outer_iter().enumerate() {
        let mut dst = out.row_mut(r % joints);
        dst += &row;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gelu_limits() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) / 10.0 - 1.0).abs() < 1e-4);
        assert!(gelu(-10.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn adjacency_rows_sum_to_one() {
        for layout in [SkeletonLayout::coco18(), SkeletonLayout::chain(4)] {
            let adj = Adjacency::new(&layout, 3);
            assert_eq!(adj.scales[0], Array2::<f64>::eye(layout.joints));
            for a in &adj.scales {
                for row in a.outer_iter() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn temporal_shapes() {
        let x = random(8 * 3, 2, 1);
        assert_eq!(temporal_im2col(TemporalMode::Down, x.view(), 3).dim(), (4 * 3, 6));
        assert_eq!(temporal_im2col(TemporalMode::Up, x.view(), 3).dim(), (16 * 3, 6));
        assert_eq!(temporal_im2col(TemporalMode::Same, x.view(), 3).dim(), (8 * 3, 6));
    }

    #[test]
    fn upsampling_interleaves() {
        // Frame t of the input lands at output frame 2t through the centre tap.
        let x = random(4 * 2, 1, 2);
        let g = temporal_im2col(TemporalMode::Up, x.view(), 2);
        for t in 0..4 {
            for j in 0..2 {
                assert_eq!(g[[2 * t * 2 + j, 1]], x[[t * 2 + j, 0]]);
                assert_eq!(g[[(2 * t + 1) * 2 + j, 1]], 0.0);
            }
        }
    }

    /// <op(x), y> == <x, op*(y)> for the linear gathers.
    #[test]
    fn gathers_are_adjoint() {
        let joints = 4;
        let adj = Adjacency::new(&SkeletonLayout::chain(joints), 2);
        let x = random(8 * joints, 3, 3);
        let y = random(8 * joints, 6, 4);
        let lhs = (graph_aggregate(&adj, x.view(), joints) * &y).sum();
        let rhs = (&x * &graph_aggregate_backward(&adj, y.view(), joints)).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        for mode in [TemporalMode::Same, TemporalMode::Down, TemporalMode::Up] {
            let out_frames = mode.output_frames(8);
            let y = random(out_frames * joints, 9, 5);
            let lhs = (temporal_im2col(mode, x.view(), joints) * &y).sum();
            let rhs = (&x * &temporal_col2im(mode, y.view(), joints, 8)).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{mode:?}");
        }
    }
}
