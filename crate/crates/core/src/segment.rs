//! Seed-driven binary segmentation by graph-cut energy minimization.
//!
//! The labeling energy is `E(A) = lambda * R(A) + B(A)`. The region term `R`
//! scores each voxel by the negative log-likelihood of its density under the
//! Gaussian mixture fitted to the seeds of the assigned class; the boundary
//! term `B` penalizes cutting between similar neighbors with the kernel
//! `exp(-(d_p - d_q)^2 / (2 sigma_B^2))` over 6-connected pairs. The minimum
//! is found exactly as a minimum s-t cut.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, VoxelGrid};

/// Foreground/background seed voxels, by index triple.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSet {
    pub foreground: Vec<[usize; 3]>,
    pub background: Vec<[usize; 3]>,
}

impl SeedSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref(), e))?;
        let seeds: SeedSet = serde_json::from_str(&text)?;
        Ok(seeds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn validate(&self, grid: &VoxelGrid) -> Result<()> {
        if self.foreground.is_empty() || self.background.is_empty() {
            return Err(Error::Segmentation(
                "both seed sets must be non-empty".into(),
            ));
        }
        for &s in self.foreground.iter().chain(&self.background) {
            if !grid.in_bounds(s) {
                return Err(Error::Segmentation(format!(
                    "seed {s:?} out of bounds {:?}",
                    grid.dims
                )));
            }
        }
        let mut fg: Vec<_> = self.foreground.clone();
        fg.sort_unstable();
        for b in &self.background {
            if fg.binary_search(b).is_ok() {
                return Err(Error::Segmentation(format!(
                    "seed {b:?} is in both classes"
                )));
            }
        }
        Ok(())
    }
}

/// One Gaussian of a mixture, in density units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Gaussian mixture density model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: Vec<GmmComponent>,
}

impl GmmModel {
    /// Log density at `x` (log-sum-exp over components).
    pub fn log_pdf(&self, x: f64) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let l = c.weight.ln()
                    - 0.5 * (std::f64::consts::TAU * c.variance).ln()
                    - (x - c.mean).powi(2) / (2.0 * c.variance);
                max = max.max(l);
                l
            })
            .collect();
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    /// Negative log-likelihood; the region penalty of the energy.
    pub fn nll(&self, x: f64) -> f64 {
        -self.log_pdf(x)
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        samples.iter().map(|&x| self.log_pdf(x)).sum()
    }
}

/// Parameters of the graph-cut segmentation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationParams {
    /// Region weight (lambda >= 0).
    pub lambda: f64,
    /// Contrast sensitivity sigma_B of the boundary kernel.
    pub boundary_scale: f64,
    /// Mixture components per class.
    pub gmm_components: usize,
    /// Terminal capacity pinning seed voxels to their class. Must dominate
    /// `lambda * max NLL + sum of incident boundary capacities`.
    pub hard_seed_weight: f64,
    /// RNG seed for the GMM initialization.
    pub seed: u64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            lambda: 1.0,
            boundary_scale: 10.0,
            gmm_components: 3,
            hard_seed_weight: 1e9,
            seed: 0,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Segmentation("lambda must be >= 0".into()));
        }
        if !(self.boundary_scale > 0.0) {
            return Err(Error::Segmentation("boundary_scale must be > 0".into()));
        }
        if self.gmm_components == 0 {
            return Err(Error::Segmentation("gmm_components must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gaussian mixture fitting
// ---------------------------------------------------------------------------

const EM_TOL: f64 = 1e-6;
const EM_MAX_ITERS: usize = 200;

/// Fit a k-component mixture by EM with k-means++-style seeding.
///
/// `var_floor` bounds variances away from zero so constant sample sets stay
/// well-posed; callers typically pass `1e-6 * data_range^2`. Per-iteration
/// log-likelihood is non-decreasing and the result is deterministic for a
/// fixed seed.
pub fn fit_gmm(samples: &[f64], k: usize, var_floor: f64, seed: u64) -> Result<GmmModel> {
    if k == 0 {
        return Err(Error::Segmentation("component count must be >= 1".into()));
    }
    if samples.len() < k {
        return Err(Error::Segmentation(format!(
            "{} samples cannot support {k} components",
            samples.len()
        )));
    }
    let mut distinct: Vec<f64> = samples.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Segmentation(format!(
            "{} distinct sample values cannot support {k} components",
            distinct.len()
        )));
    }
    let floor = if var_floor > 0.0 { var_floor } else { 1e-12 };

    // k-means++ style seeding over the distinct values.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = vec![*distinct.choose(&mut rng).unwrap()];
    while means.len() < k {
        let d2: Vec<f64> = distinct
            .iter()
            .map(|&x| {
                means
                    .iter()
                    .map(|&m| (x - m).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let mut pick = rng.gen_range(0.0..total.max(f64::MIN_POSITIVE));
        let mut chosen = f64::NAN;
        for (i, &w) in d2.iter().enumerate() {
            if pick < w {
                chosen = distinct[i];
                break;
            }
            pick -= w;
        }
        if chosen.is_nan() || means.iter().any(|&m| m == chosen) {
            chosen = *distinct
                .iter()
                .find(|x| !means.contains(x))
                .expect("distinct count >= k");
        }
        means.push(chosen);
    }

    let n = samples.len() as f64;
    let sample_var = {
        let mean = samples.iter().sum::<f64>() / n;
        (samples.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / n).max(floor)
    };
    let mut model = GmmModel {
        components: means
            .iter()
            .map(|&m| GmmComponent {
                weight: 1.0 / k as f64,
                mean: m,
                variance: sample_var,
            })
            .collect(),
    };

    let mut prev_ll = model.log_likelihood(samples);
    for _ in 0..EM_MAX_ITERS {
        model = em_step(&model, samples, floor);
        let ll = model.log_likelihood(samples);
        if ll - prev_ll < EM_TOL {
            break;
        }
        prev_ll = ll;
    }
    Ok(model)
}

/// One E+M application. Public within the crate so tests can assert the EM
/// monotonicity property directly.
pub(crate) fn em_step(model: &GmmModel, samples: &[f64], floor: f64) -> GmmModel {
    let k = model.components.len();
    let n = samples.len() as f64;
    let mut out = model.clone();
    let mut resp = vec![0.0; samples.len() * k];
    for (si, &x) in samples.iter().enumerate() {
        let logs: Vec<f64> = model
            .components
            .iter()
            .map(|c| {
                c.weight.ln()
                    - 0.5 * (std::f64::consts::TAU * c.variance).ln()
                    - (x - c.mean).powi(2) / (2.0 * c.variance)
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        for (ci, l) in logs.iter().enumerate() {
            resp[si * k + ci] = (l - max).exp() / denom;
        }
    }
    for ci in 0..k {
        let rsum: f64 = (0..samples.len()).map(|si| resp[si * k + ci]).sum();
        let rsum = rsum.max(1e-300);
        let mean = (0..samples.len())
            .map(|si| resp[si * k + ci] * samples[si])
            .sum::<f64>()
            / rsum;
        let var = (0..samples.len())
            .map(|si| resp[si * k + ci] * (samples[si] - mean).powi(2))
            .sum::<f64>()
            / rsum;
        out.components[ci] = GmmComponent {
            weight: rsum / n,
            mean,
            variance: var.max(floor),
        };
    }
    out
}

// ---------------------------------------------------------------------------
// Flow network and max-flow
// ---------------------------------------------------------------------------

/// Directed flow network with dedicated source/sink terminals.
///
/// Arcs are stored as forward/reverse residual pairs (`arc ^ 1` is the
/// partner), the usual adjacency-list layout for augmenting-path solvers.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    node_count: usize,
    pub source: usize,
    pub sink: usize,
    to: Vec<u32>,
    cap: Vec<f64>,
    adj: Vec<Vec<u32>>,
}

impl FlowNetwork {
    /// Network with `interior` ordinary nodes (indices `0..interior`),
    /// a source at `interior` and a sink at `interior + 1`.
    pub fn new(interior: usize) -> Self {
        let node_count = interior + 2;
        FlowNetwork {
            node_count,
            source: interior,
            sink: interior + 1,
            to: Vec::new(),
            cap: Vec::new(),
            adj: vec![Vec::new(); node_count],
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Iterates original arcs as `(from, to, capacity)`.
    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.to.len() / 2).map(|i| {
            let a = 2 * i;
            (self.to[a + 1] as usize, self.to[a] as usize, self.cap[a])
        })
    }

    /// Directed arc `from -> to` with the given capacity (reverse residual 0).
    pub fn add_arc(&mut self, from: usize, to: usize, capacity: f64) -> Result<()> {
        if capacity < 0.0 || !capacity.is_finite() {
            return Err(Error::Segmentation(format!(
                "arc capacity must be finite and >= 0, got {capacity}"
            )));
        }
        if from >= self.node_count || to >= self.node_count {
            return Err(Error::Segmentation("arc endpoint out of range".into()));
        }
        self.adj[from].push(self.to.len() as u32);
        self.to.push(to as u32);
        self.cap.push(capacity);
        self.adj[to].push(self.to.len() as u32);
        self.to.push(from as u32);
        self.cap.push(0.0);
        Ok(())
    }
}

/// Result of a max-flow computation: the flow value and the source side of
/// the induced minimum cut.
#[derive(Debug, Clone)]
pub struct MaxFlowResult {
    pub flow: f64,
    /// `true` for nodes on the source side of the cut.
    pub source_side: Vec<bool>,
    /// Total original capacity of arcs crossing the returned cut.
    pub cut_capacity: f64,
}

/// Dinic's algorithm. The phase bound is independent of capacity magnitudes,
/// so the search terminates for arbitrary nonnegative reals; with integral
/// capacities all arithmetic is exact.
pub fn max_flow(net: &FlowNetwork) -> MaxFlowResult {
    let n = net.node_count;
    let mut cap = net.cap.clone();
    let mut level = vec![-1i32; n];
    let mut iter = vec![0usize; n];
    let mut flow = 0.0;

    loop {
        level.fill(-1);
        level[net.source] = 0;
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(net.source);
        while let Some(u) = queue.pop_front() {
            for &a in &net.adj[u] {
                let a = a as usize;
                let v = net.to[a] as usize;
                if cap[a] > 0.0 && level[v] < 0 {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        if level[net.sink] < 0 {
            break;
        }
        iter.fill(0);
        loop {
            let pushed = dfs_augment(net, &mut cap, &level, &mut iter, net.source, f64::INFINITY);
            if pushed == 0.0 {
                break;
            }
            flow += pushed;
        }
    }

    // Min cut: source side = residual-reachable nodes.
    let mut source_side = vec![false; n];
    source_side[net.source] = true;
    let mut stack = vec![net.source];
    while let Some(u) = stack.pop() {
        for &a in &net.adj[u] {
            let a = a as usize;
            let v = net.to[a] as usize;
            if cap[a] > 0.0 && !source_side[v] {
                source_side[v] = true;
                stack.push(v);
            }
        }
    }
    let mut cut_capacity = 0.0;
    for (u, v, c) in net.arcs() {
        if source_side[u] && !source_side[v] {
            cut_capacity += c;
        }
    }
    MaxFlowResult {
        flow,
        source_side,
        cut_capacity,
    }
}

fn dfs_augment(
    net: &FlowNetwork,
    cap: &mut [f64],
    level: &[i32],
    iter: &mut [usize],
    u: usize,
    limit: f64,
) -> f64 {
    if u == net.sink {
        return limit;
    }
    while iter[u] < net.adj[u].len() {
        let a = net.adj[u][iter[u]] as usize;
        let v = net.to[a] as usize;
        if cap[a] > 0.0 && level[v] == level[u] + 1 {
            let pushed = dfs_augment(net, cap, level, iter, v, limit.min(cap[a]));
            if pushed > 0.0 {
                cap[a] -= pushed;
                cap[a ^ 1] += pushed;
                return pushed;
            }
        }
        iter[u] += 1;
    }
    0.0
}

// ---------------------------------------------------------------------------
// Graph construction and segmentation
// ---------------------------------------------------------------------------

const VAR_FLOOR_SCALE: f64 = 1e-6;

fn variance_floor(grid: &VoxelGrid) -> f64 {
    let (lo, hi) = grid.min_max();
    let range = hi - lo;
    if range > 0.0 {
        VAR_FLOOR_SCALE * range * range
    } else {
        1e-12
    }
}

/// Boundary kernel between two neighbor densities.
fn boundary_capacity(da: f64, db: f64, sigma_b: f64) -> f64 {
    (-(da - db).powi(2) / (2.0 * sigma_b * sigma_b)).exp()
}

/// Build the s-t network for `E(A) = lambda R(A) + B(A)`.
///
/// Terminal arcs carry `lambda * NLL` under the opposite class model: the
/// source arc (cut when the voxel lands on the background side) costs the
/// background NLL, the sink arc the foreground NLL. Seeds get an additional
/// `hard_seed_weight` terminal arc. A Gaussian NLL can be negative, so both
/// terminal arcs of a voxel are shifted by a common per-voxel offset to keep
/// capacities nonnegative; exactly one of the two is cut in any labeling,
/// which leaves the minimizer unchanged.
pub fn build_graph(
    grid: &VoxelGrid,
    seeds: &SeedSet,
    fg: &GmmModel,
    bg: &GmmModel,
    params: &SegmentationParams,
) -> Result<FlowNetwork> {
    params.validate()?;
    seeds.validate(grid)?;
    let n = grid.len();
    let mut net = FlowNetwork::new(n);
    let (s, t) = (net.source, net.sink);

    for idx in 0..n {
        let x = grid.values[idx];
        let w_source = params.lambda * bg.nll(x); // cut if labeled background
        let w_sink = params.lambda * fg.nll(x); // cut if labeled foreground
        let shift = (-w_source.min(w_sink)).max(0.0);
        net.add_arc(s, idx, w_source + shift)?;
        net.add_arc(idx, t, w_sink + shift)?;
    }
    for &[i, j, k] in &seeds.foreground {
        net.add_arc(s, grid.index(i, j, k), params.hard_seed_weight)?;
    }
    for &[i, j, k] in &seeds.background {
        net.add_arc(grid.index(i, j, k), t, params.hard_seed_weight)?;
    }

    let d = grid.dims;
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                let idx = grid.index(i, j, k);
                let va = grid.values[idx];
                let neighbors = [
                    (i + 1 < d[0]).then(|| grid.index(i + 1, j, k)),
                    (j + 1 < d[1]).then(|| grid.index(i, j + 1, k)),
                    (k + 1 < d[2]).then(|| grid.index(i, j, k + 1)),
                ];
                for other in neighbors.into_iter().flatten() {
                    let c = boundary_capacity(va, grid.values[other], params.boundary_scale);
                    net.add_arc(idx, other, c)?;
                    net.add_arc(other, idx, c)?;
                }
            }
        }
    }
    Ok(net)
}

fn seed_samples(grid: &VoxelGrid, seeds: &[[usize; 3]]) -> Vec<f64> {
    seeds.iter().map(|&[i, j, k]| grid.at(i, j, k)).collect()
}

/// Models fitted from the seed samples of each class. The component count is
/// clamped to the number of distinct sample values so sparse seed sets stay
/// valid.
pub fn fit_seed_models(
    grid: &VoxelGrid,
    seeds: &SeedSet,
    params: &SegmentationParams,
) -> Result<(GmmModel, GmmModel)> {
    seeds.validate(grid)?;
    let floor = variance_floor(grid);
    let fit = |samples: Vec<f64>, seed: u64| -> Result<GmmModel> {
        let mut distinct = samples.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let k = params.gmm_components.min(distinct.len()).max(1);
        fit_gmm(&samples, k, floor, seed)
    };
    let fg = fit(seed_samples(grid, &seeds.foreground), params.seed)?;
    let bg = fit(
        seed_samples(grid, &seeds.background),
        params.seed.wrapping_add(1),
    )?;
    Ok((fg, bg))
}

/// Full pipeline: fit per-class mixtures from the seeds, build the network,
/// run max-flow and return the source-side voxels as the foreground mask.
pub fn segment(
    grid: &VoxelGrid,
    seeds: &SeedSet,
    params: &SegmentationParams,
) -> Result<BinaryMask> {
    let (fg, bg) = fit_seed_models(grid, seeds, params)?;
    let net = build_graph(grid, seeds, &fg, &bg, params)?;
    let result = max_flow(&net);
    let values: Vec<bool> = (0..grid.len()).map(|i| result.source_side[i]).collect();
    BinaryMask::from_values(grid.dims, grid.spacing, grid.origin, values)
}

/// Direct evaluation of `E(A) = lambda R(A) + B(A)` for a labeling.
///
/// Kept as a plain double sum, independent of the graph encoding, so it can
/// serve as the oracle for cut-based minimization.
pub fn energy(
    mask: &BinaryMask,
    grid: &VoxelGrid,
    fg: &GmmModel,
    bg: &GmmModel,
    params: &SegmentationParams,
) -> Result<f64> {
    if mask.dims != grid.dims {
        return Err(Error::ShapeMismatch(format!(
            "mask dims {:?} vs grid dims {:?}",
            mask.dims, grid.dims
        )));
    }
    let mut region = 0.0;
    for idx in 0..grid.len() {
        let x = grid.values[idx];
        region += if mask.values[idx] { fg.nll(x) } else { bg.nll(x) };
    }
    let mut boundary = 0.0;
    let d = grid.dims;
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                let idx = grid.index(i, j, k);
                let neighbors = [
                    (i + 1 < d[0]).then(|| grid.index(i + 1, j, k)),
                    (j + 1 < d[1]).then(|| grid.index(i, j + 1, k)),
                    (k + 1 < d[2]).then(|| grid.index(i, j, k + 1)),
                ];
                for other in neighbors.into_iter().flatten() {
                    if mask.values[idx] != mask.values[other] {
                        boundary += boundary_capacity(
                            grid.values[idx],
                            grid.values[other],
                            params.boundary_scale,
                        );
                    }
                }
            }
        }
    }
    Ok(params.lambda * region + boundary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_phantom, phantom_mask, PhantomShape, PhantomSpec};

    fn sphere_spec(noise: f64) -> PhantomSpec {
        PhantomSpec {
            dims: [16, 16, 16],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            shape: PhantomShape::Sphere {
                center: [8.0, 8.0, 8.0],
                radius: 5.0,
            },
            inside: 100.0,
            outside: 0.0,
            noise_sigma: noise,
            seed: 11,
        }
    }

    // -- GMM ---------------------------------------------------------------

    #[test]
    fn gmm_degenerate_cluster_uses_floor() {
        let model = fit_gmm(&[5.0, 5.0, 5.0], 1, 1e-4, 0).unwrap();
        assert_eq!(model.components.len(), 1);
        assert!((model.components[0].mean - 5.0).abs() < 1e-12);
        assert_eq!(model.components[0].variance, 1e-4);
        assert!((model.components[0].weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gmm_rejects_k_above_distinct_count() {
        assert!(fit_gmm(&[1.0, 1.0, 2.0], 3, 1e-6, 0).is_err());
        assert!(fit_gmm(&[1.0], 2, 1e-6, 0).is_err());
    }

    /// Independent k-means oracle on two separated blocks.
    #[test]
    fn gmm_two_blocks_matches_kmeans() {
        let mut samples = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            samples.push(rng.gen_range(-0.5..0.5));
            samples.push(100.0 + rng.gen_range(-0.5..0.5));
        }
        // Plain 1D 2-means from deliberately split starting centers.
        let mut centers = [0.25f64, 99.0];
        for _ in 0..50 {
            let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0.0, 0.0, 0.0);
            for &x in &samples {
                if (x - centers[0]).abs() <= (x - centers[1]).abs() {
                    s0 += x;
                    n0 += 1.0;
                } else {
                    s1 += x;
                    n1 += 1.0;
                }
            }
            centers = [s0 / n0, s1 / n1];
        }
        centers.sort_by(f64::total_cmp);

        let model = fit_gmm(&samples, 2, 1e-6 * 100.0f64.powi(2), 1).unwrap();
        let mut means: Vec<f64> = model.components.iter().map(|c| c.mean).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] - centers[0]).abs() < 1.0, "{means:?} vs {centers:?}");
        assert!((means[1] - centers[1]).abs() < 1.0);
    }

    /// EM monotonicity: a further E+M application never lowers the
    /// log-likelihood, from the initial model or the converged one.
    #[test]
    fn gmm_loglik_monotone_on_trimodal_data() {
        let mut samples = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [0.0, 40.0, 90.0] {
            for _ in 0..40 {
                samples.push(mode + rng.gen_range(-3.0..3.0));
            }
        }
        let floor = 1e-6 * 8100.0;
        let mut model = fit_gmm(&samples, 3, floor, 2).unwrap();
        let mut ll = model.log_likelihood(&samples);
        for _ in 0..10 {
            model = em_step(&model, &samples, floor);
            let next = model.log_likelihood(&samples);
            assert!(next >= ll - 1e-9 * ll.abs().max(1.0), "{next} < {ll}");
            ll = next;
        }
    }

    #[test]
    fn gmm_deterministic_per_seed() {
        let samples: Vec<f64> = (0..60).map(|i| (i % 7) as f64 * 3.0).collect();
        let a = fit_gmm(&samples, 3, 1e-6, 9).unwrap();
        let b = fit_gmm(&samples, 3, 1e-6, 9).unwrap();
        assert_eq!(a, b);
    }

    // -- Max flow ----------------------------------------------------------

    #[test]
    fn single_arc_flow() {
        let mut net = FlowNetwork::new(0);
        net.add_arc(net.source, net.sink, 5.0).unwrap();
        let r = max_flow(&net);
        assert_eq!(r.flow, 5.0);
        assert_eq!(r.cut_capacity, 5.0);
    }

    #[test]
    fn diamond_flow() {
        // s->a(3), s->b(2), a->t(2), b->t(3), a->b(1): max flow 5.
        let mut net = FlowNetwork::new(2);
        let (a, b) = (0, 1);
        net.add_arc(net.source, a, 3.0).unwrap();
        net.add_arc(net.source, b, 2.0).unwrap();
        net.add_arc(a, net.sink, 2.0).unwrap();
        net.add_arc(b, net.sink, 3.0).unwrap();
        net.add_arc(a, b, 1.0).unwrap();
        let r = max_flow(&net);
        assert_eq!(r.flow, 5.0);
        assert_eq!(r.cut_capacity, 5.0);
        assert_eq!(r.flow, brute_force_min_cut(&net));
    }

    /// Exhaustive cut oracle: enumerate all 2^n interior partitions.
    fn brute_force_min_cut(net: &FlowNetwork) -> f64 {
        let interior = net.node_count() - 2;
        assert!(interior <= 16);
        let arcs: Vec<(usize, usize, f64)> = net.arcs().collect();
        let mut best = f64::INFINITY;
        for assign in 0..(1u32 << interior) {
            let side = |node: usize| -> bool {
                if node == net.source {
                    true
                } else if node == net.sink {
                    false
                } else {
                    assign >> node & 1 == 1
                }
            };
            let cut: f64 = arcs
                .iter()
                .filter(|&&(u, v, _)| side(u) && !side(v))
                .map(|&(_, _, c)| c)
                .sum();
            best = best.min(cut);
        }
        best
    }

    #[test]
    fn random_networks_match_exhaustive_cuts() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let interior = rng.gen_range(2..=10);
            let mut net = FlowNetwork::new(interior);
            for _ in 0..rng.gen_range(4..30) {
                let from = rng.gen_range(0..interior + 1); // interior or source
                let to = rng.gen_range(0..interior + 1); // interior or (shift) sink
                let from = if from == interior { net.source } else { from };
                let to = if to == interior { net.sink } else { to };
                if from == to {
                    continue;
                }
                // Integer capacities keep all sums exact in f64.
                net.add_arc(from, to, rng.gen_range(0..64) as f64).unwrap();
            }
            net.add_arc(net.source, 0, rng.gen_range(1..64) as f64)
                .unwrap();
            net.add_arc(interior - 1, net.sink, rng.gen_range(1..64) as f64)
                .unwrap();
            let r = max_flow(&net);
            let oracle = brute_force_min_cut(&net);
            assert_eq!(r.flow, oracle, "flow vs exhaustive min cut");
            assert_eq!(r.cut_capacity, oracle, "cut capacity vs exhaustive");
        }
    }

    #[test]
    fn rejects_negative_and_infinite_capacity() {
        let mut net = FlowNetwork::new(1);
        assert!(net.add_arc(0, 1, -1.0).is_err());
        assert!(net.add_arc(0, 1, f64::INFINITY).is_err());
    }

    // -- Graph construction --------------------------------------------------

    fn tiny_grid(values: Vec<f64>, dims: [usize; 3]) -> VoxelGrid {
        VoxelGrid::from_values(dims, [1.0; 3], [0.0; 3], values).unwrap()
    }

    #[test]
    fn lambda_zero_zeroes_non_seed_terminals() {
        let grid = tiny_grid(vec![0.0, 50.0, 100.0, 25.0], [4, 1, 1]);
        let seeds = SeedSet {
            foreground: vec![[0, 0, 0]],
            background: vec![[3, 0, 0]],
        };
        let params = SegmentationParams {
            lambda: 0.0,
            ..Default::default()
        };
        let (fg, bg) = fit_seed_models(&grid, &seeds, &params).unwrap();
        let net = build_graph(&grid, &seeds, &fg, &bg, &params).unwrap();
        for (u, v, c) in net.arcs() {
            let terminal = u == net.source || v == net.sink;
            let seed_arc = (u == net.source && v == 0 && c == params.hard_seed_weight)
                || (u == 3 && v == net.sink && c == params.hard_seed_weight);
            if terminal && !seed_arc {
                assert_eq!(c, 0.0, "non-seed terminal arc {u}->{v} must be 0");
            }
        }
    }

    #[test]
    fn equal_density_neighbors_have_unit_capacity() {
        let grid = tiny_grid(vec![42.0, 42.0], [2, 1, 1]);
        let seeds = SeedSet {
            foreground: vec![[0, 0, 0]],
            background: vec![[1, 0, 0]],
        };
        let params = SegmentationParams::default();
        let (fg, bg) = fit_seed_models(&grid, &seeds, &params).unwrap();
        let net = build_graph(&grid, &seeds, &fg, &bg, &params).unwrap();
        let neighbor: Vec<f64> = net
            .arcs()
            .filter(|&(u, v, _)| u < 2 && v < 2)
            .map(|(_, _, c)| c)
            .collect();
        assert!(!neighbor.is_empty());
        for c in neighbor {
            assert_eq!(c, 1.0);
        }
    }

    /// Hand-set 2-voxel instance: the cut minimum must equal the brute-force
    /// minimum of E(A) over all 4 labelings.
    #[test]
    fn two_voxel_cut_matches_energy_enumeration() {
        let grid = tiny_grid(vec![10.0, 90.0], [2, 1, 1]);
        let seeds = SeedSet {
            foreground: vec![[0, 0, 0]],
            background: vec![[1, 0, 0]],
        };
        let params = SegmentationParams {
            lambda: 0.7,
            boundary_scale: 40.0,
            ..Default::default()
        };
        let (fg, bg) = fit_seed_models(&grid, &seeds, &params).unwrap();
        let mask = segment(&grid, &seeds, &params).unwrap();
        let e_cut = energy(&mask, &grid, &fg, &bg, &params).unwrap();
        let mut best = f64::INFINITY;
        for assign in 0..4u8 {
            let values = vec![assign & 1 == 1, assign & 2 == 2];
            // Seed-consistent labelings only.
            if !values[0] || values[1] {
                continue;
            }
            let m = BinaryMask::from_values([2, 1, 1], [1.0; 3], [0.0; 3], values).unwrap();
            best = best.min(energy(&m, &grid, &fg, &bg, &params).unwrap());
        }
        assert_eq!(e_cut, best);
    }

    #[test]
    fn empty_seed_sets_rejected() {
        let grid = tiny_grid(vec![0.0, 1.0], [2, 1, 1]);
        let seeds = SeedSet {
            foreground: vec![],
            background: vec![[1, 0, 0]],
        };
        assert!(segment(&grid, &seeds, &SegmentationParams::default()).is_err());
    }

    // -- Segmentation end to end ---------------------------------------------

    #[test]
    fn noise_free_sphere_recovered_exactly() {
        let spec = sphere_spec(0.0);
        let grid = make_phantom(&spec).unwrap();
        let truth = phantom_mask(&spec).unwrap();
        let seeds = SeedSet {
            foreground: vec![[8, 8, 8]],
            background: vec![[0, 0, 0]],
        };
        let mask = segment(&grid, &seeds, &SegmentationParams::default()).unwrap();
        assert_eq!(mask.values, truth.values);
    }

    #[test]
    fn all_foreground_seeds_label_everything() {
        let grid = tiny_grid(vec![0.0, 10.0, 20.0, 30.0], [4, 1, 1]);
        // A background seed is mandatory; park it on the last voxel and seed
        // the rest foreground: hard constraints must hold on all of them.
        let seeds = SeedSet {
            foreground: (0..3).map(|i| [i, 0, 0]).collect(),
            background: vec![[3, 0, 0]],
        };
        let mask = segment(&grid, &seeds, &SegmentationParams::default()).unwrap();
        assert!(mask.values[0] && mask.values[1] && mask.values[2]);
        assert!(!mask.values[3]);
    }

    /// Exhaustive oracle: the cut-derived labeling must attain the minimum
    /// of E(A) over every seed-consistent labeling.
    fn assert_segmentation_is_exhaustive_min(grid: &VoxelGrid, params: &SegmentationParams) {
        let n = grid.len();
        let seeds = SeedSet {
            foreground: vec![grid.coords(0)],
            background: vec![grid.coords(n - 1)],
        };
        let (fg, bg) = fit_seed_models(grid, &seeds, params).unwrap();
        let mask = segment(grid, &seeds, params).unwrap();
        let e_cut = energy(&mask, grid, &fg, &bg, params).unwrap();

        let free = n - 2;
        assert!(free <= 12);
        let mut best = f64::INFINITY;
        for assign in 0..(1u64 << free) {
            let mut values = vec![false; n];
            values[0] = true;
            for b in 0..free {
                values[1 + b] = assign >> b & 1 == 1;
            }
            let candidate =
                BinaryMask::from_values(grid.dims, grid.spacing, grid.origin, values).unwrap();
            let e = energy(&candidate, grid, &fg, &bg, params).unwrap();
            if e < best {
                best = e;
            }
        }
        assert_eq!(e_cut, best, "cut energy vs exhaustive minimum");
        assert!(mask.values[0], "foreground seed respected");
        assert!(!mask.values[n - 1], "background seed respected");
    }

    #[test]
    fn noisy_small_grids_attain_exhaustive_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let values: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..100.0)).collect();
            let grid = tiny_grid(values, [3, 3, 1]);
            let params = SegmentationParams {
                lambda: rng.gen_range(0.0..2.0),
                boundary_scale: rng.gen_range(5.0..50.0),
                ..Default::default()
            };
            assert_segmentation_is_exhaustive_min(&grid, &params);
        }
    }

    #[test]
    fn energy_uniform_labeling_has_no_boundary_term() {
        let grid = tiny_grid(vec![1.0, 2.0, 3.0, 4.0], [2, 2, 1]);
        let params = SegmentationParams {
            lambda: 2.0,
            ..Default::default()
        };
        let fg = fit_gmm(&[1.0, 2.0], 1, 1e-6, 0).unwrap();
        let bg = fit_gmm(&[3.0, 4.0], 1, 1e-6, 0).unwrap();
        let all = BinaryMask::new([2, 2, 1], [1.0; 3], [0.0; 3], true).unwrap();
        let e = energy(&all, &grid, &fg, &bg, &params).unwrap();
        let region: f64 = grid.values.iter().map(|&x| fg.nll(x)).sum();
        assert!((e - 2.0 * region).abs() < 1e-12);

        // lambda = 0 leaves only the boundary term.
        let mut half = all.clone();
        half.values[0] = false;
        let p0 = SegmentationParams {
            lambda: 0.0,
            ..params
        };
        let e0 = energy(&half, &grid, &fg, &bg, &p0).unwrap();
        let expected = boundary_capacity(1.0, 2.0, p0.boundary_scale)
            + boundary_capacity(1.0, 3.0, p0.boundary_scale);
        assert!((e0 - expected).abs() < 1e-12);
    }

    /// Local-optimality sweep: flipping any single unseeded voxel of the
    /// segmentation result cannot lower the energy.
    #[test]
    fn segmentation_is_single_flip_optimal() {
        let spec = sphere_spec(1.0);
        let grid = make_phantom(&spec).unwrap();
        let seeds = SeedSet {
            foreground: vec![[8, 8, 8]],
            background: vec![[0, 0, 0]],
        };
        let params = SegmentationParams {
            lambda: 0.5,
            ..Default::default()
        };
        let (fg, bg) = fit_seed_models(&grid, &seeds, &params).unwrap();
        let mask = segment(&grid, &seeds, &params).unwrap();
        let base = energy(&mask, &grid, &fg, &bg, &params).unwrap();
        let mut flipped = mask.clone();
        for idx in (0..grid.len()).step_by(97) {
            if grid.coords(idx) == [8, 8, 8] || grid.coords(idx) == [0, 0, 0] {
                continue;
            }
            flipped.values[idx] = !flipped.values[idx];
            let e = energy(&flipped, &grid, &fg, &bg, &params).unwrap();
            assert!(e >= base - 1e-9, "flip at {idx} lowered energy");
            flipped.values[idx] = !flipped.values[idx];
        }
    }

    /// Increasing lambda never decreases agreement with the region term's
    /// pointwise preference (checked via exhaustive minimization).
    #[test]
    fn lambda_monotonicity_on_fixed_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let values: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..100.0)).collect();
        let grid = tiny_grid(values, [4, 2, 1]);
        let seeds = SeedSet {
            foreground: vec![[0, 0, 0]],
            background: vec![[3, 1, 0]],
        };
        let base = SegmentationParams::default();
        let (fg, bg) = fit_seed_models(&grid, &seeds, &base).unwrap();

        let preference: Vec<bool> = grid.values.iter().map(|&x| fg.nll(x) < bg.nll(x)).collect();
        let mut prev_agree = 0usize;
        for (li, lambda) in [0.0, 0.05, 0.2, 1.0, 5.0, 50.0].into_iter().enumerate() {
            let params = SegmentationParams {
                lambda,
                ..base.clone()
            };
            let mask = exhaustive_min_mask(&grid, &fg, &bg, &params);
            let agree = mask
                .values
                .iter()
                .zip(&preference)
                .filter(|(a, b)| a == b)
                .count();
            if li > 0 {
                assert!(
                    agree >= prev_agree,
                    "agreement dropped from {prev_agree} to {agree} at lambda {lambda}"
                );
            }
            prev_agree = agree;
        }
    }

    fn exhaustive_min_mask(
        grid: &VoxelGrid,
        fg: &GmmModel,
        bg: &GmmModel,
        params: &SegmentationParams,
    ) -> BinaryMask {
        let n = grid.len();
        let mut best = f64::INFINITY;
        let mut best_mask = BinaryMask::new(grid.dims, grid.spacing, grid.origin, false).unwrap();
        for assign in 0..(1u64 << (n - 2)) {
            let mut values = vec![false; n];
            values[0] = true;
            for b in 0..n - 2 {
                values[1 + b] = assign >> b & 1 == 1;
            }
            let candidate =
                BinaryMask::from_values(grid.dims, grid.spacing, grid.origin, values).unwrap();
            let e = energy(&candidate, grid, fg, bg, params).unwrap();
            if e < best {
                best = e;
                best_mask = candidate;
            }
        }
        best_mask
    }
}
