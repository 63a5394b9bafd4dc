//! Skeleton sequences, the synthetic walk generator, normalization,
//! heuristic augmentations and the JSON-lines dataset format.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const DEFAULT_FRAMES: usize = 64;
pub const DEFAULT_JOINTS: usize = 18;

/// Walking condition.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariationKind {
    /// Normal walking.
    Nm,
    /// Walking in a coat.
    Cl,
    /// Walking with a bag.
    Bg,
    Custom(String),
}

impl VariationKind {
    pub fn as_str(&self) -> &str {
        match self {
            VariationKind::Nm => "NM",
            VariationKind::Cl => "CL",
            VariationKind::Bg => "BG",
            VariationKind::Custom(s) => s,
        }
    }

    /// Damping applied to limb oscillation by the generator.
    fn amplitude_factor(&self) -> f64 {
        match self {
            VariationKind::Cl => 0.8,
            VariationKind::Bg => 0.9,
            _ => 1.0,
        }
    }
}

impl FromStr for VariationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "NM" => VariationKind::Nm,
            "CL" => VariationKind::Cl,
            "BG" => VariationKind::Bg,
            "" => return Err(Error::Parameter("empty variation kind".into())),
            other => VariationKind::Custom(other.to_string()),
        })
    }
}

impl fmt::Display for VariationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for VariationKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for VariationKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Walking condition plus camera viewpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationLabel {
    pub kind: VariationKind,
    #[serde(rename = "viewpoint")]
    pub viewpoint_deg: f64,
}

impl VariationLabel {
    /// Builds a label with the viewpoint wrapped into `[0, 360)`.
    pub fn new(kind: VariationKind, viewpoint_deg: f64) -> Self {
        let mut v = viewpoint_deg.rem_euclid(360.0);
        if v >= 360.0 {
            v = 0.0;
        }
        Self {
            kind,
            viewpoint_deg: v,
        }
    }

    pub fn normal(viewpoint_deg: f64) -> Self {
        Self::new(VariationKind::Nm, viewpoint_deg)
    }

    /// Label equality with viewpoints compared after wrapping.
    pub fn matches(&self, other: &VariationLabel) -> bool {
        let a = VariationLabel::new(self.kind.clone(), self.viewpoint_deg);
        let b = VariationLabel::new(other.kind.clone(), other.viewpoint_deg);
        a.kind == b.kind && (a.viewpoint_deg - b.viewpoint_deg).abs() < 1e-9
    }
}

impl fmt::Display for VariationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.kind, self.viewpoint_deg)
    }
}

/// Joint ordering and the few anatomical landmarks the pipeline relies on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkeletonLayout {
    pub joints: usize,
    pub neck: usize,
    pub left_hip: usize,
    pub right_hip: usize,
    /// `mirror_swap[j]` is the joint that takes `j`'s place under mirroring.
    pub mirror_swap: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

impl SkeletonLayout {
    /// COCO-style 18 joint layout:
    ///
    /// ```text
    ///  0 nose       1 neck
    ///  2 r-shoulder 3 r-elbow 4 r-wrist   5 l-shoulder  6 l-elbow 7 l-wrist
    ///  8 r-hip      9 r-knee 10 r-ankle  11 l-hip      12 l-knee 13 l-ankle
    /// 14 r-eye     15 l-eye  16 r-ear    17 l-ear
    /// ```
    pub fn coco18() -> Self {
        let pairs = [(2, 5), (3, 6), (4, 7), (8, 11), (9, 12), (10, 13), (14, 15), (16, 17)];
        let mut mirror_swap: Vec<usize> = (0..18).collect();
        for (r, l) in pairs {
            mirror_swap[r] = l;
            mirror_swap[l] = r;
        }
        Self {
            joints: 18,
            neck: 1,
            left_hip: 11,
            right_hip: 8,
            mirror_swap,
            edges: vec![
                (0, 1),
                (1, 2),
                (2, 3),
                (3, 4),
                (1, 5),
                (5, 6),
                (6, 7),
                (1, 8),
                (8, 9),
                (9, 10),
                (1, 11),
                (11, 12),
                (12, 13),
                (0, 14),
                (0, 15),
                (14, 16),
                (15, 17),
            ],
        }
    }

    /// Simple kinematic chain used for joint counts other than 18: joint 0 is
    /// the neck, joint 1 the hip, the rest hang off the hip as one limb.
    pub fn chain(joints: usize) -> Self {
        Self {
            joints,
            neck: 0,
            left_hip: 1,
            right_hip: 1,
            mirror_swap: (0..joints).collect(),
            edges: (1..joints).map(|j| (j - 1, j)).collect(),
        }
    }

    pub fn for_joints(joints: usize) -> Self {
        if joints == DEFAULT_JOINTS {
            Self::coco18()
        } else {
            Self::chain(joints)
        }
    }
}

/// One walk: `T x J x 2` joint coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub frames: Array3<f64>,
    pub subject_id: u32,
    /// Index of the walk within its subject and variation.
    pub walk: u32,
    pub variation: VariationLabel,
}

impl SkeletonSequence {
    pub fn new(
        frames: Array3<f64>,
        subject_id: u32,
        walk: u32,
        variation: VariationLabel,
    ) -> Result<Self> {
        let seq = Self {
            frames,
            subject_id,
            walk,
            variation,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, j, c) = self.frames.dim();
        if c != 2 {
            return Err(Error::Dimension(format!("expected 2 coordinates per joint, got {c}")));
        }
        if t < 8 || t % 4 != 0 {
            return Err(Error::Dimension(format!(
                "frame count {t} must be at least 8 and divisible by 4"
            )));
        }
        if j < 2 {
            return Err(Error::Dimension(format!("need at least 2 joints, got {j}")));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite coordinate".into()));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn num_joints(&self) -> usize {
        self.frames.dim().1
    }

    fn with_frames(&self, frames: Array3<f64>) -> Self {
        Self {
            frames,
            subject_id: self.subject_id,
            walk: self.walk,
            variation: self.variation.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<SkeletonSequence>,
    pub split: Split,
}

impl Dataset {
    pub fn new(sequences: Vec<SkeletonSequence>, split: Split) -> Result<Self> {
        let ds = Self { sequences, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .sequences
            .first()
            .ok_or_else(|| Error::Parameter("dataset is empty".into()))?;
        let shape = first.frames.dim();
        for s in &self.sequences {
            s.validate()?;
            if s.frames.dim() != shape {
                return Err(Error::Dimension(format!(
                    "sequence shape {:?} differs from {:?}",
                    s.frames.dim(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.sequences[0].num_frames()
    }

    pub fn joints(&self) -> usize {
        self.sequences[0].num_joints()
    }

    /// Sequences carrying the given variation label.
    pub fn filter_variation(&self, label: &VariationLabel) -> Vec<&SkeletonSequence> {
        self.sequences
            .iter()
            .filter(|s| s.variation.matches(label))
            .collect()
    }

    /// Splits off the last `test_walks` walks of every subject and variation
    /// as a held-out set.
    pub fn split_by_walk(self, test_walks: u32) -> Result<(Dataset, Dataset)> {
        let max_walk = self.sequences.iter().map(|s| s.walk).max().unwrap_or(0);
        if test_walks == 0 || test_walks > max_walk {
            return Err(Error::Parameter(format!(
                "cannot hold out {test_walks} of {} walks",
                max_walk + 1
            )));
        }
        let cutoff = max_walk + 1 - test_walks;
        let (test, train): (Vec<_>, Vec<_>) =
            self.sequences.into_iter().partition(|s| s.walk >= cutoff);
        Ok((Dataset::new(train, Split::Train)?, Dataset::new(test, Split::Test)?))
    }
}

/// Settings for [`generate_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub subjects: u32,
    pub walks_per_variation: u32,
    pub variations: Vec<VariationLabel>,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "J")]
    pub joints: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            subjects: 8,
            walks_per_variation: 4,
            variations: vec![VariationLabel::normal(0.0)],
            frames: DEFAULT_FRAMES,
            joints: DEFAULT_JOINTS,
            noise_std: 0.002,
            seed: 0,
        }
    }
}

/// Per-subject gait style.
#[derive(Clone, Debug)]
struct Walker {
    /// Cycles per sequence length.
    frequency: f64,
    /// Distal limb excursion in torso lengths.
    amplitude: f64,
    height: f64,
    shoulder_half_width: f64,
    hip_half_width: f64,
    arm_ratio: f64,
    knee_bend: f64,
    bob: f64,
    lean: f64,
}

impl Walker {
    fn sample(rng: &mut impl Rng) -> Self {
        Self {
            frequency: rng.random_range(0.8..1.2),
            amplitude: rng.random_range(0.2..0.4),
            height: rng.random_range(0.9..1.1),
            shoulder_half_width: rng.random_range(0.16..0.24),
            hip_half_width: rng.random_range(0.08..0.13),
            arm_ratio: rng.random_range(0.5..0.9),
            knee_bend: rng.random_range(0.6..1.4),
            bob: rng.random_range(0.01..0.03),
            lean: rng.random_range(-0.05..0.1),
        }
    }
}

/// One walk of a walker: phase offset and small tempo jitter.
struct WalkInstance {
    phase: f64,
    tempo: f64,
    speed: f64,
}

const TORSO: f64 = 0.5;
const THIGH: f64 = 0.45;
const SHIN: f64 = 0.45;
const UPPER_ARM: f64 = 0.3;
const FOREARM: f64 = 0.27;

/// Body-frame pose: x forward, y up, z to the walker's left.
fn pose_coco18(w: &Walker, amp: f64, phi: f64) -> Vec<[f64; 3]> {
    let h = w.height;
    let pelvis_y = (THIGH + SHIN) * h + w.bob * h * (2.0 * phi).cos();
    let pelvis = [0.0, pelvis_y, 0.02 * h * phi.sin()];
    let torso = TORSO * h;
    let neck = [pelvis[0] + w.lean * torso, pelvis_y + torso, pelvis[2]];

    let leg_reach = (THIGH + SHIN) * h;
    let swing = (amp * torso / leg_reach).min(0.9);
    let limb = |root: [f64; 3], a1: f64, l1: f64, a2: f64, l2: f64| {
        let mid = [root[0] + l1 * a1.sin(), root[1] - l1 * a1.cos(), root[2]];
        let end = [mid[0] + l2 * a2.sin(), mid[1] - l2 * a2.cos(), mid[2]];
        (mid, end)
    };
    let leg = |side: f64, phase: f64| {
        let hip = [pelvis[0], pelvis[1], pelvis[2] + side * w.hip_half_width * h];
        let thigh = swing * phase.sin();
        // Knee flexes mostly during the swing phase.
        let flex = w.knee_bend * swing * (1.0 + (phase + 0.6 * PI).cos()).max(0.0) * 0.5;
        let (knee, ankle) = limb(hip, thigh, THIGH * h, thigh - flex, SHIN * h);
        (hip, knee, ankle)
    };
    let arm = |side: f64, phase: f64| {
        let shoulder = [neck[0], neck[1], neck[2] + side * w.shoulder_half_width * h];
        let upper = -w.arm_ratio * swing * phase.sin();
        let (elbow, wrist) = limb(shoulder, upper, UPPER_ARM * h, upper + 0.25, FOREARM * h);
        (shoulder, elbow, wrist)
    };

    let (l_hip, l_knee, l_ankle) = leg(1.0, phi);
    let (r_hip, r_knee, r_ankle) = leg(-1.0, phi + PI);
    let (l_sh, l_el, l_wr) = arm(1.0, phi);
    let (r_sh, r_el, r_wr) = arm(-1.0, phi + PI);

    let head = [neck[0] + 0.02 * h, neck[1] + 0.18 * h, neck[2]];
    let nose = [head[0] + 0.09 * h, head[1], head[2]];
    let eye = |side: f64| [head[0] + 0.07 * h, head[1] + 0.04 * h, head[2] + side * 0.035 * h];
    let ear = |side: f64| [head[0], head[1] + 0.02 * h, head[2] + side * 0.075 * h];

    vec![
        nose,
        neck,
        r_sh,
        r_el,
        r_wr,
        l_sh,
        l_el,
        l_wr,
        r_hip,
        r_knee,
        r_ankle,
        l_hip,
        l_knee,
        l_ankle,
        eye(-1.0),
        eye(1.0),
        ear(-1.0),
        ear(1.0),
    ]
}

fn pose_chain(w: &Walker, amp: f64, phi: f64, joints: usize) -> Vec<[f64; 3]> {
    let h = w.height;
    let hip_y = (THIGH + SHIN) * h + w.bob * h * (2.0 * phi).cos();
    let mut out = vec![[w.lean * TORSO * h, hip_y + TORSO * h, 0.0], [0.0, hip_y, 0.0]];
    let segments = joints.saturating_sub(2).max(1);
    let seg_len = (THIGH + SHIN) * h / segments as f64;
    let swing = (amp * TORSO / (THIGH + SHIN)).min(0.9);
    let mut p = out[1];
    for k in 2..joints {
        let angle = swing * (phi - 0.5 * (k - 2) as f64).sin();
        p = [
            p[0] + seg_len * angle.sin(),
            p[1] - seg_len * angle.cos(),
            p[2] + 0.05 * h,
        ];
        out.push(p);
    }
    out
}

/// Deterministic synthetic walks.
///
/// Each subject is a 3-D stick figure with sinusoidal limb phases; every walk
/// is rotated about the vertical axis by its viewpoint, orthographically
/// projected onto the image plane and perturbed with Gaussian noise.
/// Sequences are emitted subject by subject, then variation, then walk.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    if config.subjects == 0 {
        return Err(Error::Config("need at least one subject".into()));
    }
    if config.walks_per_variation == 0 || config.variations.is_empty() {
        return Err(Error::Config("need at least one walk and variation".into()));
    }
    if config.frames < 8 || !config.frames.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "T = {} must be at least 8 and divisible by 4",
            config.frames
        )));
    }
    if config.joints < 2 {
        return Err(Error::Config("need at least two joints".into()));
    }
    if !(config.noise_std >= 0.0 && config.noise_std.is_finite()) {
        return Err(Error::Config("noise_std must be finite and non-negative".into()));
    }
    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let walkers: Vec<Walker> = (0..config.subjects).map(|_| Walker::sample(&mut rng)).collect();

    let (t_len, joints) = (config.frames, config.joints);
    let mut sequences = Vec::new();
    for (subject, walker) in walkers.iter().enumerate() {
        for variation in &config.variations {
            let variation = VariationLabel::new(variation.kind.clone(), variation.viewpoint_deg);
            let amp = walker.amplitude * variation.kind.amplitude_factor();
            let theta = variation.viewpoint_deg.to_radians();
            let (sin_t, cos_t) = theta.sin_cos();
            for walk in 0..config.walks_per_variation {
                let inst = WalkInstance {
                    phase: rng.random_range(0.0..TAU),
                    tempo: rng.random_range(0.97..1.03),
                    speed: rng.random_range(0.015..0.025),
                };
                let mut frames = Array3::zeros((t_len, joints, 2));
                for t in 0..t_len {
                    let phi = inst.phase + TAU * walker.frequency * inst.tempo * t as f64 / t_len as f64;
                    let pose = if joints == DEFAULT_JOINTS {
                        pose_coco18(walker, amp, phi)
                    } else {
                        pose_chain(walker, amp, phi, joints)
                    };
                    let advance = inst.speed * t as f64;
                    for (j, p) in pose.iter().enumerate() {
                        let x = p[0] + advance;
                        let z = p[2];
                        frames[[t, j, 0]] = x * cos_t + z * sin_t;
                        frames[[t, j, 1]] = p[1];
                    }
                }
                if config.noise_std > 0.0 {
                    frames.mapv_inplace(|v| v + noise.sample(&mut rng));
                }
                sequences.push(SkeletonSequence::new(
                    frames,
                    subject as u32,
                    walk,
                    variation.clone(),
                )?);
            }
        }
    }
    Dataset::new(sequences, Split::Train)
}

const MIN_TORSO: f64 = 1e-6;

/// Centers every frame on the mid-hip and rescales the whole sequence so the
/// mean neck to mid-hip distance is one.
pub fn normalize(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    let layout = SkeletonLayout::for_joints(seq.num_joints());
    let (t_len, joints, _) = seq.frames.dim();
    let mut out = seq.frames.clone();
    let mut torso_sum = 0.0;
    for t in 0..t_len {
        let hip = [
            0.5 * (seq.frames[[t, layout.left_hip, 0]] + seq.frames[[t, layout.right_hip, 0]]),
            0.5 * (seq.frames[[t, layout.left_hip, 1]] + seq.frames[[t, layout.right_hip, 1]]),
        ];
        let dx = seq.frames[[t, layout.neck, 0]] - hip[0];
        let dy = seq.frames[[t, layout.neck, 1]] - hip[1];
        let torso = dx.hypot(dy);
        if !(torso > MIN_TORSO) {
            return Err(Error::DegeneratePose(format!(
                "torso length {torso:e} in frame {t}"
            )));
        }
        torso_sum += torso;
        for j in 0..joints {
            out[[t, j, 0]] -= hip[0];
            out[[t, j, 1]] -= hip[1];
        }
    }
    let scale = t_len as f64 / torso_sum;
    out.mapv_inplace(|v| v * scale);
    Ok(seq.with_frames(out))
}

/// Time multipliers accepted by [`Augmentation::RandomPace`].
pub const PACE_MULTIPLIERS: [f64; 7] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];
pub const DEFAULT_AUG_NOISE_STD: f64 = 0.001;

/// Heuristic skeleton augmentations.
#[derive(Clone, Debug, PartialEq)]
pub enum Augmentation {
    /// Resample time by the multiplier, or by one drawn from
    /// [`PACE_MULTIPLIERS`] when `None`.
    RandomPace { multiplier: Option<f64> },
    /// One Gaussian offset per joint, shared by all frames.
    JointNoise { std: f64 },
    /// Independent Gaussian offset per frame and joint.
    PointNoise { std: f64 },
    Mirror,
    Reverse,
}

impl Augmentation {
    /// Parses an augmentation name, using default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "random_pace" => Augmentation::RandomPace { multiplier: None },
            "joint_noise" => Augmentation::JointNoise {
                std: DEFAULT_AUG_NOISE_STD,
            },
            "point_noise" => Augmentation::PointNoise {
                std: DEFAULT_AUG_NOISE_STD,
            },
            "mirror" => Augmentation::Mirror,
            "reverse" => Augmentation::Reverse,
            other => return Err(Error::Parameter(format!("unknown augmentation {other:?}"))),
        })
    }
}

pub fn augment(seq: &SkeletonSequence, aug: &Augmentation, seed: u64) -> Result<SkeletonSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, joints, _) = seq.frames.dim();
    let frames = match *aug {
        Augmentation::RandomPace { multiplier } => {
            let m = match multiplier {
                Some(m) if PACE_MULTIPLIERS.contains(&m) => m,
                Some(m) => {
                    return Err(Error::Parameter(format!(
                        "pace multiplier {m} not in {PACE_MULTIPLIERS:?}"
                    )))
                }
                None => PACE_MULTIPLIERS[rng.random_range(0..PACE_MULTIPLIERS.len())],
            };
            resample_pace(&seq.frames, m)
        }
        Augmentation::JointNoise { std } | Augmentation::PointNoise { std } => {
            let normal = Normal::new(0.0, std)
                .map_err(|e| Error::Parameter(format!("noise std {std}: {e}")))?;
            let mut out = seq.frames.clone();
            if matches!(aug, Augmentation::JointNoise { .. }) {
                let offsets: Vec<[f64; 2]> = (0..joints)
                    .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
                    .collect();
                for t in 0..t_len {
                    for (j, off) in offsets.iter().enumerate() {
                        out[[t, j, 0]] += off[0];
                        out[[t, j, 1]] += off[1];
                    }
                }
            } else {
                out.mapv_inplace(|v| v + normal.sample(&mut rng));
            }
            out
        }
        Augmentation::Mirror => {
            let layout = SkeletonLayout::for_joints(joints);
            let mut out = seq.frames.clone();
            for t in 0..t_len {
                for j in 0..joints {
                    let src = layout.mirror_swap[j];
                    out[[t, j, 0]] = -seq.frames[[t, src, 0]];
                    out[[t, j, 1]] = seq.frames[[t, src, 1]];
                }
            }
            out
        }
        Augmentation::Reverse => seq.frames.slice(s![..;-1, .., ..]).to_owned(),
    };
    let out = seq.with_frames(frames);
    out.validate()?;
    Ok(out)
}

/// Linear resampling of the time axis to `multiplier * T` frames, then
/// cropped to the first `T` frames or looped to fill them.
fn resample_pace(frames: &Array3<f64>, multiplier: f64) -> Array3<f64> {
    let (t_len, joints, dims) = frames.dim();
    let new_len = ((multiplier * t_len as f64).round() as usize).max(1);
    let step = if new_len > 1 {
        (t_len - 1) as f64 / (new_len - 1) as f64
    } else {
        0.0
    };
    let source_time = |i: usize| -> (usize, f64) {
        let s = i as f64 * step;
        let lo = (s.floor() as usize).min(t_len - 1);
        (lo, s - lo as f64)
    };
    let mut out = Array3::zeros((t_len, joints, dims));
    for t in 0..t_len {
        let (lo, frac) = source_time(t % new_len);
        for j in 0..joints {
            for c in 0..dims {
                let a = frames[[lo, j, c]];
                out[[t, j, c]] = if frac == 0.0 || lo + 1 >= t_len {
                    a
                } else {
                    a + frac * (frames[[lo + 1, j, c]] - a)
                };
            }
        }
    }
    out
}

pub const DATASET_FORMAT: &str = "gaitmorph-ds";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "J")]
    joints: usize,
    split: Split,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    subject: u32,
    walk: u32,
    kind: VariationKind,
    viewpoint: f64,
    frames: Vec<Vec<[f64; 2]>>,
}

/// Writes a dataset as JSON lines: one header object, then one object per
/// sequence. Coordinates are written in shortest round-trip form so loading
/// reproduces them bit for bit.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut buf = Vec::new();
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        frames: ds.frames(),
        joints: ds.joints(),
        split: ds.split,
        count: ds.sequences.len(),
    };
    serde_json::to_writer(&mut buf, &header).map_err(std::io::Error::from)?;
    buf.push(b'\n');
    for s in &ds.sequences {
        let frames = s
            .frames
            .outer_iter()
            .map(|f| f.outer_iter().map(|p| [p[0], p[1]]).collect())
            .collect();
        let rec = Record {
            subject: s.subject_id,
            walk: s.walk,
            kind: s.variation.kind.clone(),
            viewpoint: s.variation.viewpoint_deg,
            frames,
        };
        serde_json::to_writer(&mut buf, &rec).map_err(std::io::Error::from)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut lines = BufReader::new(file).lines();
    let where_ = |line: usize| format!("{}:{line}", path.display());

    let first = lines
        .next()
        .ok_or_else(|| Error::malformed(where_(1), "missing header"))??;
    let raw: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| Error::malformed(where_(1), e.to_string()))?;
    if raw.get("format").and_then(|f| f.as_str()) != Some(DATASET_FORMAT) {
        return Err(Error::malformed(where_(1), "not a gaitmorph dataset"));
    }
    if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
        if v != DATASET_VERSION as u64 {
            return Err(Error::Version {
                found: v as u32,
                expected: DATASET_VERSION,
            });
        }
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| Error::malformed(where_(1), e.to_string()))?;

    let mut sequences = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let loc = where_(i + 2);
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::malformed(&loc, e.to_string()))?;
        if rec.frames.len() != header.frames || rec.frames.iter().any(|f| f.len() != header.joints)
        {
            return Err(Error::malformed(loc, "frame array does not match header T x J"));
        }
        let flat: Vec<f64> = rec.frames.iter().flatten().flatten().copied().collect();
        let frames = Array3::from_shape_vec((header.frames, header.joints, 2), flat)
            .map_err(|e| Error::malformed(&loc, e.to_string()))?;
        let seq = SkeletonSequence::new(
            frames,
            rec.subject,
            rec.walk,
            VariationLabel::new(rec.kind, rec.viewpoint),
        )
        .map_err(|e| Error::malformed(&loc, e.to_string()))?;
        sequences.push(seq);
    }
    if sequences.len() != header.count {
        return Err(Error::malformed(
            path.display().to_string(),
            format!("header promises {} sequences, found {}", header.count, sequences.len()),
        ));
    }
    Dataset::new(sequences, header.split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            subjects: 2,
            walks_per_variation: 1,
            variations: vec![VariationLabel::normal(0.0)],
            ..Default::default()
        }
    }

    fn random_sequence(seed: u64, frames: usize, joints: usize) -> SkeletonSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((frames, joints, 2), |_| rng.random_range(-2.0..2.0));
        SkeletonSequence::new(data, 0, 0, VariationLabel::normal(0.0)).unwrap()
    }

    #[test]
    fn generator_shape_and_determinism() {
        let cfg = small_config();
        let a = generate_dataset(&cfg).unwrap();
        assert_eq!(a.sequences.len(), 2);
        for s in &a.sequences {
            assert_eq!(s.frames.dim(), (64, 18, 2));
        }
        assert_eq!(a, generate_dataset(&cfg).unwrap());
    }

    #[test]
    fn opposite_viewpoints_mirror_x() {
        let mut cfg = small_config();
        cfg.noise_std = 0.0;
        cfg.variations = vec![VariationLabel::normal(0.0)];
        let front = generate_dataset(&cfg).unwrap();
        cfg.variations = vec![VariationLabel::normal(180.0)];
        let back = generate_dataset(&cfg).unwrap();
        for (a, b) in front.sequences.iter().zip(&back.sequences) {
            for (p, q) in a.frames.outer_iter().zip(b.frames.outer_iter()) {
                for j in 0..18 {
                    assert!((p[[j, 0]] + q[[j, 0]]).abs() < 1e-12);
                    assert_eq!(p[[j, 1]], q[[j, 1]]);
                }
            }
        }
    }

    #[test]
    fn generator_rejects_bad_frame_count() {
        let cfg = GeneratorConfig {
            frames: 30,
            ..small_config()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn coat_and_bag_damp_limbs() {
        let mut cfg = small_config();
        cfg.noise_std = 0.0;
        cfg.subjects = 1;
        let swing = |kind: VariationKind| {
            let mut c = cfg.clone();
            c.variations = vec![VariationLabel::new(kind, 0.0)];
            let s = normalize(&generate_dataset(&c).unwrap().sequences[0]).unwrap();
            let ankle: Vec<f64> = (0..64).map(|t| s.frames[[t, 13, 0]]).collect();
            ankle.iter().cloned().fold(f64::MIN, f64::max) - ankle.iter().cloned().fold(f64::MAX, f64::min)
        };
        let nm = swing(VariationKind::Nm);
        assert!(swing(VariationKind::Cl) < nm);
        assert!(swing(VariationKind::Bg) < nm);
    }

    #[test]
    fn viewpoint_wraps() {
        assert_eq!(VariationLabel::normal(-90.0).viewpoint_deg, 270.0);
        assert_eq!(VariationLabel::normal(720.0).viewpoint_deg, 0.0);
    }

    #[test]
    fn normalization_invariances() {
        let ds = generate_dataset(&small_config()).unwrap();
        let seq = &ds.sequences[0];
        let n = normalize(seq).unwrap();
        let nn = normalize(&n).unwrap();
        assert!((&n.frames - &nn.frames).iter().all(|d| d.abs() < 1e-12));

        let mut moved = seq.clone();
        moved.frames.slice_mut(s![.., .., 0]).mapv_inplace(|v| v + 5.0);
        moved.frames.slice_mut(s![.., .., 1]).mapv_inplace(|v| v - 3.0);
        let nm = normalize(&moved).unwrap();
        assert!((&n.frames - &nm.frames).iter().all(|d| d.abs() < 1e-12));

        let mut scaled = seq.clone();
        scaled.frames.mapv_inplace(|v| v * 2.0);
        let ns = normalize(&scaled).unwrap();
        assert!((&n.frames - &ns.frames).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn normalize_rejects_collapsed_torso() {
        let seq = SkeletonSequence::new(
            Array3::zeros((8, 18, 2)),
            0,
            0,
            VariationLabel::normal(0.0),
        )
        .unwrap();
        assert!(matches!(normalize(&seq), Err(Error::DegeneratePose(_))));
    }

    #[test]
    fn pace_resamples() {
        let seq = random_sequence(3, 16, 4);
        let slow = augment(&seq, &Augmentation::RandomPace { multiplier: Some(2.0) }, 0).unwrap();
        assert_eq!(slow.frames.dim(), seq.frames.dim());
        // 32 samples over 15 intervals: output frame 0 is input frame 0.
        assert_eq!(slow.frames.slice(s![0, .., ..]), seq.frames.slice(s![0, .., ..]));
        let fast = augment(&seq, &Augmentation::RandomPace { multiplier: Some(0.5) }, 0).unwrap();
        // 8 samples, looped.
        assert_eq!(fast.frames.slice(s![8, .., ..]), fast.frames.slice(s![0, .., ..]));
        assert_eq!(fast.frames.slice(s![7, .., ..]), seq.frames.slice(s![15, .., ..]));
        assert!(augment(&seq, &Augmentation::RandomPace { multiplier: Some(3.0) }, 0).is_err());
    }

    #[test]
    fn noise_augmentations() {
        let seq = random_sequence(4, 8, 3);
        let j = augment(&seq, &Augmentation::JointNoise { std: 0.001 }, 9).unwrap();
        let d = &j.frames - &seq.frames;
        for t in 1..8 {
            let gap = &d.slice(s![t, .., ..]) - &d.slice(s![0, .., ..]);
            assert!(gap.iter().all(|v| v.abs() < 1e-12));
        }
        let p = augment(&seq, &Augmentation::PointNoise { std: 0.001 }, 9).unwrap();
        let d = &p.frames - &seq.frames;
        assert_ne!(d.slice(s![1, .., ..]), d.slice(s![0, .., ..]));
        assert!(d.iter().all(|v| v.abs() < 0.01));
        assert_eq!(p, augment(&seq, &Augmentation::PointNoise { std: 0.001 }, 9).unwrap());
    }

    #[test]
    fn mirror_swaps_sides() {
        let seq = random_sequence(5, 8, 18);
        let m = augment(&seq, &Augmentation::Mirror, 0).unwrap();
        assert_eq!(m.frames[[0, 2, 0]], -seq.frames[[0, 5, 0]]);
        assert_eq!(m.frames[[0, 2, 1]], seq.frames[[0, 5, 1]]);
        assert_eq!(m.frames[[0, 1, 0]], -seq.frames[[0, 1, 0]]);
    }

    #[test]
    fn unknown_augmentation_name() {
        assert!(matches!(Augmentation::from_name("shear"), Err(Error::Parameter(_))));
        assert_eq!(Augmentation::from_name("mirror").unwrap(), Augmentation::Mirror);
    }

    #[test]
    fn split_holds_out_last_walks() {
        let cfg = GeneratorConfig {
            subjects: 3,
            walks_per_variation: 4,
            variations: vec![VariationLabel::normal(0.0), VariationLabel::normal(45.0)],
            frames: 8,
            joints: 4,
            ..Default::default()
        };
        let (train, test) = generate_dataset(&cfg).unwrap().split_by_walk(1).unwrap();
        assert_eq!(train.sequences.len(), 18);
        assert_eq!(test.sequences.len(), 6);
        assert!(test.sequences.iter().all(|s| s.walk == 3));
        assert_eq!(test.split, Split::Test);
        assert_eq!(test.filter_variation(&VariationLabel::normal(405.0)).len(), 3);
    }

    #[test]
    fn dataset_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let ds = generate_dataset(&small_config()).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);

        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with(r#"{"format":"gaitmorph-ds","version":1,"T":64,"J":18"#));

        let truncated = dir.path().join("truncated.jsonl");
        std::fs::write(&truncated, &text[..text.len() - 100]).unwrap();
        assert!(matches!(load_dataset(&truncated), Err(Error::MalformedRecord { .. })));

        let short = dir.path().join("short.jsonl");
        std::fs::write(&short, text.lines().take(2).collect::<Vec<_>>().join("\n")).unwrap();
        assert!(matches!(load_dataset(&short), Err(Error::MalformedRecord { .. })));

        let future = dir.path().join("future.jsonl");
        std::fs::write(&future, text.replacen("\"version\":1", "\"version\":7", 1)).unwrap();
        assert!(matches!(
            load_dataset(&future),
            Err(Error::Version { found: 7, .. })
        ));

        assert!(matches!(
            load_dataset(&dir.path().join("absent.jsonl")),
            Err(Error::MissingFile(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn normalize_properties(seed in any::<u64>(), dx in -50.0f64..50.0, dy in -50.0f64..50.0, k in 0.1f64..20.0) {
            let seq = random_sequence(seed, 8, 18);
            let n = normalize(&seq).unwrap();
            let nn = normalize(&n).unwrap();
            prop_assert!((&n.frames - &nn.frames).iter().all(|d| d.abs() < 1e-9));
            let mut moved = seq.clone();
            moved.frames.slice_mut(s![.., .., 0]).mapv_inplace(|v| (v + dx) * k);
            moved.frames.slice_mut(s![.., .., 1]).mapv_inplace(|v| (v + dy) * k);
            let nm = normalize(&moved).unwrap();
            prop_assert!((&n.frames - &nm.frames).iter().all(|d| d.abs() < 1e-9));
        }

        #[test]
        fn generated_sequences_are_valid(seed in any::<u64>(), view in 0.0f64..360.0) {
            let cfg = GeneratorConfig {
                subjects: 1,
                walks_per_variation: 1,
                variations: vec![VariationLabel::new(VariationKind::Bg, view)],
                frames: 16,
                seed,
                ..Default::default()
            };
            let ds = generate_dataset(&cfg).unwrap();
            prop_assert!(ds.sequences.iter().all(|s| s.validate().is_ok()));
            prop_assert!(normalize(&ds.sequences[0]).is_ok());
        }
    }
}
