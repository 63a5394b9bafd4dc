//! Optimal transport between token distributions.
//!
//! For every latent position the token histograms of a source and a target
//! walking variation are coupled by an exact earth mover's distance solve.
//! The resulting per-position couplings remap the tokens of a new walk,
//! which is then decoded: `T* = G(Γ(q(E(T))))`.
//!
//! Map file layout (little-endian):
//!
//! ```text
//! magic "GMTM" | version u32
//! source kind (u32 length + utf8) | source viewpoint f64
//! target kind | target viewpoint f64
//! T' u64 | J u64 | K u64 | codebook fingerprint u64
//! per position: cost f64 | entries u64 | (row f64, col f64, mass f64) * entries
//! ```

use std::collections::BinaryHeap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaitdata::{SkeletonSequence, VariationKind, VariationLabel};
use crate::io::{read_file, write_atomic, Decoder, Encoder};
use crate::model::GaitModel;
use crate::numerics::{pairwise_distances, Matrix, Metric};
use crate::quantizer::{Codebook, TokenGrid};

/// Histogram with rational weights `counts[k] / denominator`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenHistogram {
    counts: Vec<u64>,
    denominator: u64,
}

impl TokenHistogram {
    /// Normalizes raw occurrence counts.
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let denominator: u64 = counts.iter().sum();
        if denominator == 0 {
            return Err(Error::Parameter("histogram has no mass".into()));
        }
        Ok(Self { counts, denominator })
    }

    /// Recovers exact rational weights with denominator at most
    /// `max_denominator`.
    pub fn from_weights(weights: &[f64], max_denominator: u64) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Parameter("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Infeasible(format!("weights sum to {total}, not 1")));
        }
        for d in 1..=max_denominator {
            let df = d as f64;
            let counts: Vec<u64> = weights.iter().map(|w| (w * df).round() as u64).collect();
            let exact = weights
                .iter()
                .zip(&counts)
                .all(|(w, &c)| (w * df - c as f64).abs() < 1e-9 * df.max(1.0));
            if exact && counts.iter().sum::<u64>() == d {
                return Ok(Self {
                    counts,
                    denominator: d,
                });
            }
        }
        Err(Error::Parameter(format!(
            "weights are not rational with denominator <= {max_denominator}"
        )))
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn denominator(&self) -> u64 {
        self.denominator
    }

    pub fn weights(&self) -> Vec<f64> {
        let d = self.denominator as f64;
        self.counts.iter().map(|&c| c as f64 / d).collect()
    }
}

/// Occurrences of each token at one latent position across a set of grids.
pub fn build_position_histograms(grids: &[TokenGrid], position: usize, k: usize) -> Result<TokenHistogram> {
    if grids.is_empty() {
        return Err(Error::Parameter("no token grids".into()));
    }
    let mut counts = vec![0u64; k];
    for g in grids {
        if position >= g.len() {
            return Err(Error::Parameter(format!("position {position} outside grid of {}", g.len())));
        }
        let tok = g.at(position);
        if tok >= k {
            return Err(Error::Parameter(format!("token {tok} outside codebook of {k}")));
        }
        counts[tok] += 1;
    }
    TokenHistogram::from_counts(counts)
}

/// Euclidean distances between codebook embeddings.
pub fn cost_matrix(codebook: &Codebook) -> Matrix {
    let rows: Vec<Vec<f64>> = codebook.embeddings.outer_iter().map(|r| r.to_vec()).collect();
    pairwise_distances(&rows, &rows, Metric::Euclidean).expect("codebook rows share a dimension")
}

/// Optimal coupling between two histograms, stored sparsely.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportMap {
    rows: usize,
    cols: usize,
    /// `(row, col, mass)` sorted by row then column, masses positive.
    entries: Vec<(usize, usize, f64)>,
    pub cost: f64,
}

impl TransportMap {
    pub fn from_entries(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>, cost: f64) -> Result<Self> {
        entries.retain(|e| e.2 != 0.0);
        entries.sort_by_key(|e| (e.0, e.1));
        for &(r, c, m) in &entries {
            if r >= rows || c >= cols || !(m.is_finite() && m > 0.0) {
                return Err(Error::Parameter(format!("invalid coupling entry ({r}, {c}, {m})")));
            }
        }
        if entries.windows(2).any(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::Parameter("duplicate coupling entry".into()));
        }
        Ok(Self {
            rows,
            cols,
            entries,
            cost,
        })
    }

    /// Coupling that keeps every token in place.
    pub fn identity(k: usize) -> Self {
        let m = 1.0 / k as f64;
        Self {
            rows: k,
            cols: k,
            entries: (0..k).map(|i| (i, i, m)).collect(),
            cost: 0.0,
        }
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] = v;
        }
        m
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.rows];
        for &(r, _, v) in &self.entries {
            s[r] += v;
        }
        s
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for &(_, c, v) in &self.entries {
            s[c] += v;
        }
        s
    }

    fn row(&self, r: usize) -> &[(usize, usize, f64)] {
        let lo = self.entries.partition_point(|e| e.0 < r);
        let hi = self.entries.partition_point(|e| e.0 <= r);
        &self.entries[lo..hi]
    }

    /// Column receiving most of row `r`'s mass (lowest column on ties);
    /// `None` when the row is empty.
    pub fn row_argmax(&self, r: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for &(_, c, m) in self.row(r) {
            if best.is_none_or(|(_, bm)| m > bm) {
                best = Some((c, m));
            }
        }
        best.map(|(c, _)| c)
    }

    /// Column drawn in proportion to row `r`'s masses.
    fn row_sample(&self, r: usize, rng: &mut impl Rng) -> Option<usize> {
        let row = self.row(r);
        let total: f64 = row.iter().map(|e| e.2).sum();
        if row.is_empty() {
            return None;
        }
        let mut u = rng.random_range(0.0..total);
        for &(_, c, m) in row {
            if u < m {
                return Some(c);
            }
            u -= m;
        }
        row.last().map(|e| e.1)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Minimum-cost flow by successive shortest augmenting paths with
/// Dijkstra on reduced costs. Nodes are dense indices.
struct FlowNetwork {
    heads: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<u64>,
    cost: Vec<f64>,
}

impl FlowNetwork {
    fn new(nodes: usize) -> Self {
        Self {
            heads: vec![Vec::new(); nodes],
            to: Vec::new(),
            cap: Vec::new(),
            cost: Vec::new(),
        }
    }

    /// Adds an arc and its residual twin; returns the forward arc id.
    fn add_arc(&mut self, from: usize, to: usize, cap: u64, cost: f64) -> usize {
        let id = self.to.len();
        self.heads[from].push(id);
        self.to.push(to);
        self.cap.push(cap);
        self.cost.push(cost);
        self.heads[to].push(id + 1);
        self.to.push(from);
        self.cap.push(0);
        self.cost.push(-cost);
        id
    }

    /// Pushes `amount` units from `source` to `sink` at minimum cost.
    fn min_cost_flow(&mut self, source: usize, sink: usize, amount: u64) -> Result<()> {
        let n = self.heads.len();
        let mut potential = vec![0.0; n];
        let mut sent = 0;
        while sent < amount {
            let mut dist = vec![f64::INFINITY; n];
            let mut via = vec![usize::MAX; n];
            let mut done = vec![false; n];
            dist[source] = 0.0;
            let mut heap = BinaryHeap::new();
            heap.push(Candidate { dist: 0.0, node: source });
            while let Some(Candidate { dist: d, node: u }) = heap.pop() {
                if done[u] {
                    continue;
                }
                done[u] = true;
                for &arc in &self.heads[u] {
                    if self.cap[arc] == 0 {
                        continue;
                    }
                    let v = self.to[arc];
                    let reduced = (self.cost[arc] + potential[u] - potential[v]).max(0.0);
                    let nd = d + reduced;
                    if nd < dist[v] {
                        dist[v] = nd;
                        via[v] = arc;
                        heap.push(Candidate { dist: nd, node: v });
                    }
                }
            }
            if !dist[sink].is_finite() {
                return Err(Error::Infeasible("no augmenting path left".into()));
            }
            for v in 0..n {
                if dist[v].is_finite() {
                    potential[v] += dist[v];
                }
            }
            let mut push = amount - sent;
            let mut v = sink;
            while v != source {
                let arc = via[v];
                push = push.min(self.cap[arc]);
                v = self.to[arc ^ 1];
            }
            let mut v = sink;
            while v != source {
                let arc = via[v];
                self.cap[arc] -= push;
                self.cap[arc ^ 1] += push;
                v = self.to[arc ^ 1];
            }
            sent += push;
        }
        Ok(())
    }
}

/// Heap entry ordered by smallest distance, then smallest node index.
#[derive(PartialEq)]
struct Candidate {
    dist: f64,
    node: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact earth mover's distance between two histograms under `cost`.
///
/// Both histograms are scaled to integer masses over their common
/// denominator and the transportation problem is solved as a minimum-cost
/// flow on the bipartite graph of their supports.
pub fn solve_emd(a: &TokenHistogram, b: &TokenHistogram, cost: &Matrix) -> Result<TransportMap> {
    if cost.rows() != a.len() || cost.cols() != b.len() {
        return Err(Error::Dimension(format!(
            "cost matrix {}x{} for histograms of {} and {} bins",
            cost.rows(),
            cost.cols(),
            a.len(),
            b.len()
        )));
    }
    if cost.data().iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::Parameter("costs must be finite and non-negative".into()));
    }
    let mass_a: f64 = a.weights().iter().sum();
    let mass_b: f64 = b.weights().iter().sum();
    if (mass_a - mass_b).abs() > 1e-9 {
        return Err(Error::Infeasible(format!("masses differ: {mass_a} vs {mass_b}")));
    }

    let g = gcd(a.denominator, b.denominator);
    let total = a.denominator / g * b.denominator;
    let scale_a = total / a.denominator;
    let scale_b = total / b.denominator;
    let supply: Vec<(usize, u64)> = a
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (i, c * scale_a))
        .collect();
    let demand: Vec<(usize, u64)> = b
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(j, &c)| (j, c * scale_b))
        .collect();

    let source = 0;
    let sink = 1 + supply.len() + demand.len();
    let mut net = FlowNetwork::new(sink + 1);
    for (si, &(_, s)) in supply.iter().enumerate() {
        net.add_arc(source, 1 + si, s, 0.0);
    }
    for (di, &(_, d)) in demand.iter().enumerate() {
        net.add_arc(1 + supply.len() + di, sink, d, 0.0);
    }
    let mut arcs = Vec::with_capacity(supply.len() * demand.len());
    for (si, &(i, s)) in supply.iter().enumerate() {
        for (di, &(j, d)) in demand.iter().enumerate() {
            let arc = net.add_arc(1 + si, 1 + supply.len() + di, s.min(d), cost[(i, j)]);
            arcs.push((i, j, arc));
        }
    }
    net.min_cost_flow(source, sink, total)?;

    let denom = total as f64;
    let mut entries = Vec::new();
    let mut total_cost = 0.0;
    for (i, j, arc) in arcs {
        let flow = net.cap[arc ^ 1];
        if flow > 0 {
            let m = flow as f64 / denom;
            total_cost += m * cost[(i, j)];
            entries.push((i, j, m));
        }
    }
    TransportMap::from_entries(a.len(), b.len(), entries, total_cost)
}

/// One coupling per latent position, tied to the codebook it was fitted on.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportMapSet {
    pub source: VariationLabel,
    pub target: VariationLabel,
    pub latent_frames: usize,
    pub joints: usize,
    pub codebook_size: usize,
    pub fingerprint: u64,
    pub maps: Vec<TransportMap>,
}

pub const MAPS_MAGIC: &[u8; 4] = b"GMTM";
pub const MAPS_VERSION: u32 = 1;

impl TransportMapSet {
    /// Maps that leave every token unchanged.
    pub fn identity(model: &GaitModel, label: VariationLabel) -> Self {
        let cfg = model.config();
        let k = model.codebook.size();
        Self {
            source: label.clone(),
            target: label,
            latent_frames: cfg.latent_frames(),
            joints: cfg.joints,
            codebook_size: k,
            fingerprint: model.codebook.fingerprint(),
            maps: (0..cfg.latent_positions()).map(|_| TransportMap::identity(k)).collect(),
        }
    }

    pub fn positions(&self) -> usize {
        self.maps.len()
    }

    pub fn mean_cost(&self) -> f64 {
        self.maps.iter().map(|m| m.cost).sum::<f64>() / self.maps.len().max(1) as f64
    }

    pub fn check_codebook(&self, codebook: &Codebook) -> Result<()> {
        let found = codebook.fingerprint();
        if found != self.fingerprint {
            return Err(Error::StaleMap {
                expected: self.fingerprint,
                found,
            });
        }
        Ok(())
    }

    /// Token each code at `position` is sent to; codes absent from the
    /// source histogram stay put.
    pub fn remap(&self, position: usize, token: usize) -> usize {
        self.maps[position].row_argmax(token).unwrap_or(token)
    }

    pub fn morph_tokens(&self, grid: &TokenGrid, mode: MorphMode) -> Result<TokenGrid> {
        if grid.frames() != self.latent_frames || grid.joints() != self.joints {
            return Err(Error::Dimension(format!(
                "token grid {}x{} vs maps for {}x{}",
                grid.frames(),
                grid.joints(),
                self.latent_frames,
                self.joints
            )));
        }
        let mut out = grid.clone();
        match mode {
            MorphMode::Argmax => {
                for p in 0..grid.len() {
                    out.set(p, self.remap(p, grid.at(p)));
                }
            }
            MorphMode::Sample { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for p in 0..grid.len() {
                    let tok = grid.at(p);
                    out.set(p, self.maps[p].row_sample(tok, &mut rng).unwrap_or(tok));
                }
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::default();
        enc.bytes(MAPS_MAGIC);
        enc.u32(MAPS_VERSION);
        for label in [&self.source, &self.target] {
            enc.str(label.kind.as_str());
            enc.f64(label.viewpoint_deg);
        }
        enc.u64(self.latent_frames as u64);
        enc.u64(self.joints as u64);
        enc.u64(self.codebook_size as u64);
        enc.u64(self.fingerprint);
        for m in &self.maps {
            enc.f64(m.cost);
            enc.u64(m.entries.len() as u64);
            for &(r, c, v) in &m.entries {
                enc.f64(r as f64);
                enc.f64(c as f64);
                enc.f64(v);
            }
        }
        enc.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes, "transport maps");
        if dec.take(4)? != MAPS_MAGIC {
            return Err(dec.error("not a gaitmorph transport map file"));
        }
        let version = dec.u32()?;
        if version != MAPS_VERSION {
            return Err(Error::Version {
                found: version,
                expected: MAPS_VERSION,
            });
        }
        let mut label = || -> Result<VariationLabel> {
            let kind: VariationKind = dec.str()?.parse()?;
            Ok(VariationLabel::new(kind, dec.f64()?))
        };
        let source = label()?;
        let target = label()?;
        let latent_frames = dec.u64()? as usize;
        let joints = dec.u64()? as usize;
        let k = dec.u64()? as usize;
        let fingerprint = dec.u64()?;
        let positions = latent_frames
            .checked_mul(joints)
            .filter(|&p| p <= bytes.len())
            .ok_or_else(|| dec.error("implausible grid size"))?;
        let index = |v: f64| -> Option<usize> {
            (v >= 0.0 && v.fract() == 0.0 && v < k as f64).then_some(v as usize)
        };
        let mut maps = Vec::with_capacity(positions);
        for _ in 0..positions {
            let cost = dec.f64()?;
            let n = dec.len(24)?;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let (r, c, m) = (dec.f64()?, dec.f64()?, dec.f64()?);
                let (r, c) = index(r)
                    .zip(index(c))
                    .ok_or_else(|| dec.error(format!("bad coupling index ({r}, {c})")))?;
                entries.push((r, c, m));
            }
            maps.push(TransportMap::from_entries(k, k, entries, cost).map_err(|e| dec.error(e.to_string()))?);
        }
        dec.finish()?;
        Ok(Self {
            source,
            target,
            latent_frames,
            joints,
            codebook_size: k,
            fingerprint,
            maps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// How a coupling row turns into a replacement token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MorphMode {
    /// Column with the most mass, lowest index on ties.
    #[default]
    Argmax,
    /// Column sampled in proportion to the row's masses.
    Sample { seed: u64 },
}

/// Fits one transport map per latent position from the source variation's
/// token histograms to the target's.
pub fn learn_transport_maps(
    model: &GaitModel,
    source: &[&SkeletonSequence],
    target: &[&SkeletonSequence],
) -> Result<TransportMapSet> {
    let (Some(first_s), Some(first_t)) = (source.first(), target.first()) else {
        return Err(Error::Parameter("source and target sets must be non-empty".into()));
    };
    let k = model.codebook.size();
    let cost = cost_matrix(&model.codebook);
    let source_grids = model.tokenize_all(source)?;
    let target_grids = model.tokenize_all(target)?;
    let cfg = model.config();
    let maps = (0..cfg.latent_positions())
        .into_par_iter()
        .map(|p| {
            let a = build_position_histograms(&source_grids, p, k)?;
            let b = build_position_histograms(&target_grids, p, k)?;
            solve_emd(&a, &b, &cost)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransportMapSet {
        source: first_s.variation.clone(),
        target: first_t.variation.clone(),
        latent_frames: cfg.latent_frames(),
        joints: cfg.joints,
        codebook_size: k,
        fingerprint: model.codebook.fingerprint(),
        maps,
    })
}

/// `G(Γ(q(E(x))))` with the argmax remapping rule.
pub fn apply_transport_morph(model: &GaitModel, maps: &TransportMapSet, seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    apply_transport_morph_with(model, maps, seq, MorphMode::Argmax)
}

pub fn apply_transport_morph_with(
    model: &GaitModel,
    maps: &TransportMapSet,
    seq: &SkeletonSequence,
    mode: MorphMode,
) -> Result<SkeletonSequence> {
    maps.check_codebook(&model.codebook)?;
    let (grid, _) = model.tokenize(seq)?;
    let morphed = maps.morph_tokens(&grid, mode)?;
    let frames = model.decode_tokens(&morphed)?;
    SkeletonSequence::new(frames, seq.subject_id, seq.walk, maps.target.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct TransportStats {
    pub num_changes: u64,
    pub avg_moved_distance: f64,
    /// Number of changes times the average change cost.
    pub total_mass: f64,
}

/// How many tokens the maps change over `grids` and how far they move them.
pub fn transport_stats(maps: &TransportMapSet, cost: &Matrix, grids: &[TokenGrid]) -> Result<TransportStats> {
    let mut changes = 0u64;
    let mut moved = 0.0;
    for g in grids {
        if g.len() != maps.positions() {
            return Err(Error::Dimension("token grid does not match the map set".into()));
        }
        for p in 0..g.len() {
            let from = g.at(p);
            let to = maps.remap(p, from);
            if to != from {
                changes += 1;
                moved += cost[(from, to)];
            }
        }
    }
    let avg = if changes > 0 { moved / changes as f64 } else { 0.0 };
    Ok(TransportStats {
        num_changes: changes,
        avg_moved_distance: avg,
        total_mass: changes as f64 * avg,
    })
}
