//! Centerline extraction from contrast volumes: threshold, morphology,
//! topology-preserving 3D thinning, and conversion to a vessel graph.
//!
//! Thinning deletes simple points (foreground 26-connectivity, background
//! 6-connectivity) in six directional sub-iterations with endpoint
//! preservation, so connected components of both phases are invariant.
//! Radii come from the exact Euclidean distance transform, measured from
//! voxel centers to the nearest non-interior corner of the voxel lattice:
//! an isolated voxel gets half its diagonal.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::volume::{gaussian_blur, morph_close, morph_open, BinaryMask, VoxelGrid};

// ---------------------------------------------------------------------------
// Histogram threshold
// ---------------------------------------------------------------------------

const OTSU_BINS: usize = 256;

/// Otsu's criterion over a 256-bin histogram: the returned density maximizes
/// the between-class variance; thresholding with `value >= t` separates the
/// classes. Constant volumes are rejected.
pub fn auto_threshold(grid: &VoxelGrid) -> Result<f64> {
    let (lo, hi) = grid.min_max();
    if !(hi > lo) {
        return Err(Error::Vessel("degenerate histogram: constant volume".into()));
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut hist = [0usize; OTSU_BINS];
    for &v in &grid.values {
        let bin = (((v - lo) / width) as usize).min(OTSU_BINS - 1);
        hist[bin] += 1;
    }
    let total = grid.len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(b, &c)| b as f64 * c as f64)
        .sum::<f64>()
        / total;

    let mut best_bin = 0;
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..OTSU_BINS - 1 {
        w0 += hist[t] as f64 / total;
        sum0 += t as f64 * hist[t] as f64 / total;
        let w1 = 1.0 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_mean - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1).powi(2);
        if var > best_var {
            best_var = var;
            best_bin = t;
        }
    }
    // Upper edge of the winning bin, so `>= threshold` selects the upper class.
    Ok(lo + (best_bin + 1) as f64 * width)
}

/// Parameters of the vessel-mask pipeline: blur, threshold, open, close.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VesselMaskParams {
    /// Explicit threshold; `None` selects it from the histogram.
    pub threshold: Option<f64>,
    pub blur_sigma: f64,
    pub open_radius: usize,
    pub close_radius: usize,
}

impl Default for VesselMaskParams {
    fn default() -> Self {
        VesselMaskParams {
            threshold: None,
            blur_sigma: 0.0,
            open_radius: 1,
            close_radius: 1,
        }
    }
}

/// Blur, threshold (given or automatic), then open and close.
pub fn extract_vessel_mask(grid: &VoxelGrid, params: &VesselMaskParams) -> Result<BinaryMask> {
    let blurred = if params.blur_sigma > 0.0 {
        gaussian_blur(grid, [params.blur_sigma; 3])?
    } else {
        grid.clone()
    };
    let threshold = match params.threshold {
        Some(t) => t,
        None => auto_threshold(&blurred)?,
    };
    let mask = blurred.threshold(threshold);
    let mask = morph_open(&mask, params.open_radius);
    Ok(morph_close(&mask, params.close_radius))
}

// ---------------------------------------------------------------------------
// Exact Euclidean distance transform
// ---------------------------------------------------------------------------

/// 1D lower-envelope pass: `out[q] = min_i (queries[q] - centers[i])^2 + f[i]`.
/// Centers must be strictly increasing; `f` entries may be infinite.
fn envelope_pass(centers: &[f64], f: &[f64], queries: &[f64], out: &mut [f64]) {
    let n = centers.len();
    // Hull of parabola indices and the left boundary of each one's validity.
    let mut hull: Vec<usize> = Vec::with_capacity(n);
    let mut left: Vec<f64> = Vec::with_capacity(n);
    for i in 0..n {
        if f[i] == f64::INFINITY {
            continue;
        }
        let mut s;
        loop {
            match hull.last() {
                None => {
                    s = f64::NEG_INFINITY;
                    break;
                }
                Some(&j) => {
                    // Intersection of parabolas rooted at centers[i], centers[j].
                    s = ((f[i] + centers[i] * centers[i]) - (f[j] + centers[j] * centers[j]))
                        / (2.0 * (centers[i] - centers[j]));
                    if s <= *left.last().unwrap() {
                        hull.pop();
                        left.pop();
                    } else {
                        break;
                    }
                }
            }
        }
        hull.push(i);
        left.push(s);
    }
    if hull.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut h = 0usize;
    for (qi, &q) in queries.iter().enumerate() {
        while h + 1 < hull.len() && left[h + 1] < q {
            h += 1;
        }
        let i = hull[h];
        out[qi] = (q - centers[i]).powi(2) + f[i];
    }
}

/// Exact Euclidean distance from every voxel center to the nearest lattice
/// corner that touches background (or the volume border). Separable
/// Felzenszwalb-Huttenlocher sweeps with half-voxel query offsets.
pub fn distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let d = mask.dims;
    let (nx, ny, nz) = (d[0], d[1], d[2]);
    let (cx, cy, cz) = (nx + 1, ny + 1, nz + 1);
    let s = mask.spacing;

    // Corner is interior iff all (up to 8) incident voxels are foreground;
    // border corners are never interior.
    let cidx = |i: usize, j: usize, k: usize| i + cx * (j + cy * k);
    let mut g = vec![0.0f64; cx * cy * cz];
    for k in 0..cz {
        for j in 0..cy {
            for i in 0..cx {
                let interior = i > 0
                    && j > 0
                    && k > 0
                    && i < nx
                    && j < ny
                    && k < nz
                    && (0..8).all(|c| {
                        let o = [(c & 1), (c >> 1) & 1, (c >> 2) & 1];
                        mask.at(i - 1 + o[0], j - 1 + o[1], k - 1 + o[2])
                    });
                g[cidx(i, j, k)] = if interior { f64::INFINITY } else { 0.0 };
            }
        }
    }

    // Pass 1 (x): queries at voxel centers, sources at corners.
    let centers_x: Vec<f64> = (0..cx).map(|i| i as f64 * s[0]).collect();
    let queries_x: Vec<f64> = (0..nx).map(|i| (i as f64 + 0.5) * s[0]).collect();
    let mut d1 = vec![0.0f64; nx * cy * cz];
    let mut row = vec![0.0f64; cx.max(cy).max(cz)];
    let mut out_row = vec![0.0f64; nx.max(ny).max(nz)];
    for k in 0..cz {
        for j in 0..cy {
            for i in 0..cx {
                row[i] = g[cidx(i, j, k)];
            }
            envelope_pass(&centers_x, &row[..cx], &queries_x, &mut out_row[..nx]);
            for i in 0..nx {
                d1[i + nx * (j + cy * k)] = out_row[i];
            }
        }
    }

    // Pass 2 (y).
    let centers_y: Vec<f64> = (0..cy).map(|j| j as f64 * s[1]).collect();
    let queries_y: Vec<f64> = (0..ny).map(|j| (j as f64 + 0.5) * s[1]).collect();
    let mut d2 = vec![0.0f64; nx * ny * cz];
    for k in 0..cz {
        for i in 0..nx {
            for j in 0..cy {
                row[j] = d1[i + nx * (j + cy * k)];
            }
            envelope_pass(&centers_y, &row[..cy], &queries_y, &mut out_row[..ny]);
            for j in 0..ny {
                d2[i + nx * (j + ny * k)] = out_row[j];
            }
        }
    }

    // Pass 3 (z).
    let centers_z: Vec<f64> = (0..cz).map(|k| k as f64 * s[2]).collect();
    let queries_z: Vec<f64> = (0..nz).map(|k| (k as f64 + 0.5) * s[2]).collect();
    let mut dist = vec![0.0f64; nx * ny * nz];
    for j in 0..ny {
        for i in 0..nx {
            for k in 0..cz {
                row[k] = d2[i + nx * (j + ny * k)];
            }
            envelope_pass(&centers_z, &row[..cz], &queries_z, &mut out_row[..nz]);
            for k in 0..nz {
                dist[i + nx * (j + ny * k)] = out_row[k].sqrt();
            }
        }
    }
    dist
}

// ---------------------------------------------------------------------------
// 3D thinning
// ---------------------------------------------------------------------------

/// Centerline voxels with per-voxel radius estimates (mm).
#[derive(Debug, Clone)]
pub struct Skeleton {
    pub mask: BinaryMask,
    /// Distance-transform value of the source mask at each voxel (full
    /// volume layout; meaningful on skeleton voxels).
    pub radii: Vec<f64>,
}

impl Skeleton {
    pub fn voxels(&self) -> Vec<[usize; 3]> {
        (0..self.mask.len())
            .filter(|&i| self.mask.values[i])
            .map(|i| self.mask.coords(i))
            .collect()
    }
}

const N26: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut n = 0;
    let mut dz = -1i64;
    while dz <= 1 {
        let mut dy = -1i64;
        while dy <= 1 {
            let mut dx = -1i64;
            while dx <= 1 {
                if dx != 0 || dy != 0 || dz != 0 {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

const N6: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

fn fg_at(mask: &BinaryMask, p: [i64; 3]) -> bool {
    p[0] >= 0
        && p[1] >= 0
        && p[2] >= 0
        && (p[0] as usize) < mask.dims[0]
        && (p[1] as usize) < mask.dims[1]
        && (p[2] as usize) < mask.dims[2]
        && mask.at(p[0] as usize, p[1] as usize, p[2] as usize)
}

fn fg_neighbor_count(mask: &BinaryMask, p: [i64; 3]) -> usize {
    N26.iter()
        .filter(|o| fg_at(mask, [p[0] + o[0], p[1] + o[1], p[2] + o[2]]))
        .count()
}

/// Bertrand/Malandain simple-point characterization: deleting `p` preserves
/// topology iff the foreground of N26*(p) has exactly one 26-component and
/// the background of N18(p) has exactly one 6-component touching a face
/// neighbor of `p`.
fn is_simple(mask: &BinaryMask, p: [i64; 3]) -> bool {
    // Local 3x3x3 snapshot, center removed.
    let mut local = [false; 27];
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let li = ((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1)) as usize;
                local[li] = fg_at(mask, [p[0] + dx, p[1] + dy, p[2] + dz]);
            }
        }
    }
    let center = 13usize;
    local[center] = false;

    // Count 26-components of local foreground.
    let mut seen = [false; 27];
    let mut fg_components = 0;
    for start in 0..27 {
        if start == center || !local[start] || seen[start] {
            continue;
        }
        fg_components += 1;
        if fg_components > 1 {
            return false;
        }
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            let (vx, vy, vz) = ((v % 3) as i64, ((v / 3) % 3) as i64, (v / 9) as i64);
            for o in &N26 {
                let (nx, ny, nz) = (vx + o[0], vy + o[1], vz + o[2]);
                if !(0..3).contains(&nx) || !(0..3).contains(&ny) || !(0..3).contains(&nz) {
                    continue;
                }
                let ni = (nx + 3 * ny + 9 * nz) as usize;
                if ni != center && local[ni] && !seen[ni] {
                    seen[ni] = true;
                    stack.push(ni);
                }
            }
        }
    }
    if fg_components != 1 {
        return false;
    }

    // Count 6-components of local background restricted to the
    // 18-neighborhood, keeping only those touching a face neighbor.
    let in_n18 = |v: usize| -> bool {
        let (vx, vy, vz) = (v % 3, (v / 3) % 3, v / 9);
        let d = (vx as i64 - 1).abs() + (vy as i64 - 1).abs() + (vz as i64 - 1).abs();
        d == 1 || d == 2
    };
    let mut seen_bg = [false; 27];
    let mut bg_components = 0;
    for start in 0..27 {
        if !in_n18(start) || local[start] || seen_bg[start] {
            continue;
        }
        // Flood this component; remember whether it touches a face neighbor.
        let mut touches_face = false;
        let mut stack = vec![start];
        seen_bg[start] = true;
        while let Some(v) = stack.pop() {
            let (vx, vy, vz) = ((v % 3) as i64, ((v / 3) % 3) as i64, (v / 9) as i64);
            if (vx - 1).abs() + (vy - 1).abs() + (vz - 1).abs() == 1 {
                touches_face = true;
            }
            for o in &N6 {
                let (nx, ny, nz) = (vx + o[0], vy + o[1], vz + o[2]);
                if !(0..3).contains(&nx) || !(0..3).contains(&ny) || !(0..3).contains(&nz) {
                    continue;
                }
                let ni = (nx + 3 * ny + 9 * nz) as usize;
                if in_n18(ni) && !local[ni] && !seen_bg[ni] {
                    seen_bg[ni] = true;
                    stack.push(ni);
                }
            }
        }
        if touches_face {
            bg_components += 1;
            if bg_components > 1 {
                return false;
            }
        }
    }
    bg_components == 1
}

/// Thinning options. `prune_spur_factor` removes leaf chains shorter than
/// `factor * local radius` that hang off a branching voxel; these are
/// stair-step artifacts, not vessel ends. Zero disables pruning.
#[derive(Debug, Clone, Copy)]
pub struct ThinningParams {
    pub prune_spur_factor: f64,
}

impl Default for ThinningParams {
    fn default() -> Self {
        ThinningParams {
            prune_spur_factor: 2.0,
        }
    }
}

/// Iterative boundary peeling with default spur pruning; see
/// [`skeletonize_with`].
pub fn skeletonize(mask: &BinaryMask) -> Result<Skeleton> {
    skeletonize_with(mask, &ThinningParams::default())
}

/// Iterative boundary peeling: six directional sub-iterations per round,
/// deleting simple non-endpoint voxels until stable. Within a sub-iteration
/// voxels are visited in increasing distance-transform order, which keeps
/// the surviving curve centered and stops cap corners from freezing into
/// spurious endpoints. Deletion is sequential, so every simple-point check
/// sees the current image and topology is preserved exactly. Spur chains
/// below the pruning threshold are then removed and thinning resumes until
/// both phases are stable.
pub fn skeletonize_with(mask: &BinaryMask, params: &ThinningParams) -> Result<Skeleton> {
    if mask.count_foreground() == 0 {
        return Err(Error::Vessel("cannot skeletonize an empty mask".into()));
    }
    let radii = distance_transform(mask);
    let mut order: Vec<usize> = (0..mask.len()).filter(|&i| mask.values[i]).collect();
    order.sort_by(|&a, &b| radii[a].total_cmp(&radii[b]).then(a.cmp(&b)));

    let mut current = mask.clone();
    loop {
        thin_until_stable(&mut current, &order);
        if params.prune_spur_factor <= 0.0
            || prune_spurs(&mut current, &radii, params.prune_spur_factor) == 0
        {
            break;
        }
    }
    Ok(Skeleton {
        mask: current,
        radii,
    })
}

fn thin_until_stable(current: &mut BinaryMask, order: &[usize]) {
    loop {
        let mut deleted = 0usize;
        for dir in &N6 {
            // Mark/delete in two phases: candidates are the voxels facing
            // background in `dir` at the start of the sub-iteration, so one
            // pass peels exactly one directional layer instead of cascading
            // through the cross-section. Deletion itself stays sequential
            // with simplicity re-checked against the current image.
            let candidates: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&idx| {
                    if !current.values[idx] {
                        return false;
                    }
                    let c = current.coords(idx);
                    let p = [c[0] as i64, c[1] as i64, c[2] as i64];
                    !fg_at(current, [p[0] + dir[0], p[1] + dir[1], p[2] + dir[2]])
                })
                .collect();
            for idx in candidates {
                let c = current.coords(idx);
                let p = [c[0] as i64, c[1] as i64, c[2] as i64];
                if fg_neighbor_count(current, p) <= 1 {
                    continue; // endpoint preservation
                }
                if is_simple(current, p) {
                    current.values[idx] = false;
                    deleted += 1;
                }
            }
        }
        if deleted == 0 {
            break;
        }
    }
}

/// Remove leaf chains that end on a branching voxel and are shorter than
/// `factor * radius(branch voxel)`. Only the chain is deleted, so connected
/// components are unchanged. Returns the number of chains removed.
fn prune_spurs(current: &mut BinaryMask, radii: &[f64], factor: f64) -> usize {
    let degree =
        |m: &BinaryMask, p: [usize; 3]| fg_neighbor_count(m, [p[0] as i64, p[1] as i64, p[2] as i64]);
    let mut endpoints: Vec<[usize; 3]> = (0..current.len())
        .filter(|&i| current.values[i])
        .map(|i| current.coords(i))
        .filter(|&p| degree(current, p) == 1)
        .collect();
    endpoints.sort_unstable();

    let mut pruned = 0usize;
    for e in endpoints {
        if !current.at(e[0], e[1], e[2]) || degree(current, e) != 1 {
            continue; // already consumed by a previous prune
        }
        // Walk from the endpoint until a non-degree-2 voxel.
        let mut chain = vec![e];
        let mut prev = e;
        let mut cur = e;
        let terminal = loop {
            let mut next = None;
            for o in &N26 {
                let q = [
                    cur[0] as i64 + o[0],
                    cur[1] as i64 + o[1],
                    cur[2] as i64 + o[2],
                ];
                if !fg_at(current, q) {
                    continue;
                }
                let qq = [q[0] as usize, q[1] as usize, q[2] as usize];
                if qq != prev {
                    next = Some(qq);
                    break;
                }
            }
            let Some(nxt) = next else { break None };
            if degree(current, nxt) != 2 {
                break Some(nxt);
            }
            chain.push(nxt);
            prev = cur;
            cur = nxt;
        };
        let Some(junction) = terminal else { continue };
        if degree(current, junction) < 3 {
            continue; // chain ends on another endpoint: a real path
        }
        let mut length = 0.0;
        let mut walk = chain.clone();
        walk.push(junction);
        for w in walk.windows(2) {
            length += geom::dist(
                current.voxel_center(w[0][0], w[0][1], w[0][2]),
                current.voxel_center(w[1][0], w[1][1], w[1][2]),
            );
        }
        let threshold = factor * radii[current.index(junction[0], junction[1], junction[2])];
        if length < threshold {
            for p in chain {
                current.set(p[0], p[1], p[2], false);
            }
            pruned += 1;
        }
    }
    pruned
}

// ---------------------------------------------------------------------------
// Graph extraction
// ---------------------------------------------------------------------------

/// Node of a vessel graph (mm).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub position: Vec3,
    pub radius: f64,
}

/// Undirected edge tracing a centerline path between two nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphEdge {
    pub id: usize,
    pub nodes: [usize; 2],
    /// Polyline arclength (mm), always >= the node distance.
    pub length: f64,
    /// Mean of per-voxel radii along the traced path (mm).
    pub radius: f64,
}

/// Centerline graph: endpoints and branch clusters become nodes, traced
/// skeleton paths become edges. Edges closing a cycle are flagged rather
/// than rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VesselGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cycle_edges: Vec<usize>,
}

impl VesselGraph {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet((0..n).collect())
    }
    fn find(&mut self, x: usize) -> usize {
        if self.0[x] != x {
            let root = self.find(self.0[x]);
            self.0[x] = root;
        }
        self.0[x]
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
        ra != rb
    }
}

/// Convert a skeleton to its node/edge graph.
///
/// Voxels with a 26-neighbor count other than 2 are node voxels; connected
/// clusters of node voxels collapse to a single node at their centroid.
/// Degree-2 chains between clusters become edges with polyline arclength and
/// mean radius.
pub fn skeleton_to_graph(skel: &Skeleton) -> Result<VesselGraph> {
    let mask = &skel.mask;
    let voxels = skel.voxels();
    if voxels.is_empty() {
        return Err(Error::Vessel("empty skeleton".into()));
    }

    let degree = |p: [usize; 3]| fg_neighbor_count(mask, [p[0] as i64, p[1] as i64, p[2] as i64]);
    let lin = |p: [usize; 3]| mask.index(p[0], p[1], p[2]);

    // Cluster node voxels (degree != 2) by 26-connectivity.
    let mut cluster_of: HashMap<usize, usize> = HashMap::new();
    let mut clusters: Vec<Vec<[usize; 3]>> = Vec::new();
    for &p in &voxels {
        if degree(p) == 2 || cluster_of.contains_key(&lin(p)) {
            continue;
        }
        let cid = clusters.len();
        let mut members = Vec::new();
        let mut stack = vec![p];
        cluster_of.insert(lin(p), cid);
        while let Some(v) = stack.pop() {
            members.push(v);
            for o in &N26 {
                let q = [
                    v[0] as i64 + o[0],
                    v[1] as i64 + o[1],
                    v[2] as i64 + o[2],
                ];
                if !fg_at(mask, q) {
                    continue;
                }
                let qq = [q[0] as usize, q[1] as usize, q[2] as usize];
                if degree(qq) != 2 && !cluster_of.contains_key(&lin(qq)) {
                    cluster_of.insert(lin(qq), cid);
                    stack.push(qq);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }

    let mut nodes = Vec::with_capacity(clusters.len());
    for (cid, members) in clusters.iter().enumerate() {
        let mut pos = [0.0; 3];
        let mut radius = 0.0;
        for &m in members {
            pos = geom::add(pos, mask.voxel_center(m[0], m[1], m[2]));
            radius += skel.radii[lin(m)];
        }
        nodes.push(GraphNode {
            id: cid,
            position: geom::scale(pos, 1.0 / members.len() as f64),
            radius: radius / members.len() as f64,
        });
    }

    // Trace degree-2 chains. `visited` marks chain voxels already consumed.
    let mut visited = vec![false; mask.len()];
    let mut edges: Vec<GraphEdge> = Vec::new();
    let mut cycle_edges = Vec::new();
    let mut dsu = DisjointSet::new(nodes.len());
    let mut push_edge = |a: usize, b: usize, path: &[[usize; 3]], edges: &mut Vec<GraphEdge>,
                         cycle_edges: &mut Vec<usize>, dsu: &mut DisjointSet| {
        let mut length = 0.0;
        for w in path.windows(2) {
            length += geom::dist(
                mask.voxel_center(w[0][0], w[0][1], w[0][2]),
                mask.voxel_center(w[1][0], w[1][1], w[1][2]),
            );
        }
        let radius =
            path.iter().map(|&p| skel.radii[lin(p)]).sum::<f64>() / path.len() as f64;
        let id = edges.len();
        if !dsu.union(a, b) {
            cycle_edges.push(id);
        }
        edges.push(GraphEdge {
            id,
            nodes: [a, b],
            length,
            radius,
        });
    };

    for (cid, members) in clusters.iter().enumerate() {
        for &m in members {
            for o in &N26 {
                let q = [
                    m[0] as i64 + o[0],
                    m[1] as i64 + o[1],
                    m[2] as i64 + o[2],
                ];
                if !fg_at(mask, q) {
                    continue;
                }
                let mut cur = [q[0] as usize, q[1] as usize, q[2] as usize];
                if degree(cur) != 2 {
                    // Direct cluster-to-cluster contact: record once, from the
                    // lower cluster id (or lower voxel for equal clusters).
                    let other = cluster_of[&lin(cur)];
                    if other != cid {
                        if cid < other {
                            push_edge(
                                cid,
                                other,
                                &[m, cur],
                                &mut edges,
                                &mut cycle_edges,
                                &mut dsu,
                            );
                        }
                    }
                    continue;
                }
                if visited[lin(cur)] {
                    continue;
                }
                // Walk the chain away from the cluster.
                let mut path = vec![m, cur];
                visited[lin(cur)] = true;
                let mut prev = m;
                loop {
                    let mut next = None;
                    for o2 in &N26 {
                        let q2 = [
                            cur[0] as i64 + o2[0],
                            cur[1] as i64 + o2[1],
                            cur[2] as i64 + o2[2],
                        ];
                        if !fg_at(mask, q2) {
                            continue;
                        }
                        let qq = [q2[0] as usize, q2[1] as usize, q2[2] as usize];
                        if qq == prev {
                            continue;
                        }
                        next = Some(qq);
                        break;
                    }
                    let Some(nxt) = next else {
                        break;
                    };
                    path.push(nxt);
                    if degree(nxt) != 2 {
                        break;
                    }
                    if visited[lin(nxt)] {
                        break;
                    }
                    visited[lin(nxt)] = true;
                    prev = cur;
                    cur = nxt;
                }
                let last = *path.last().unwrap();
                if degree(last) != 2 {
                    let other = cluster_of[&lin(last)];
                    push_edge(cid, other, &path, &mut edges, &mut cycle_edges, &mut dsu);
                }
                // A chain ending on a visited degree-2 voxel is a pure cycle
                // with no node voxel; those cannot occur when any endpoint or
                // branch exists on the loop, and a fully closed loop without
                // node voxels has no clusters to anchor to, so it is dropped.
            }
        }
    }

    Ok(VesselGraph {
        nodes,
        edges,
        cycle_edges,
    })
}

// ---------------------------------------------------------------------------
// Component counting (topology audits)
// ---------------------------------------------------------------------------

/// Number of 26-connected foreground components.
pub fn foreground_components(mask: &BinaryMask) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    for start in 0..mask.len() {
        if !mask.values[start] || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            let c = mask.coords(v);
            for o in &N26 {
                let q = [
                    c[0] as i64 + o[0],
                    c[1] as i64 + o[1],
                    c[2] as i64 + o[2],
                ];
                if fg_at(mask, q) {
                    let qi = mask.index(q[0] as usize, q[1] as usize, q[2] as usize);
                    if !seen[qi] {
                        seen[qi] = true;
                        stack.push(qi);
                    }
                }
            }
        }
    }
    count
}

/// Number of 6-connected background components, counting the unbounded
/// outside as part of the background (computed on a 1-voxel padded copy).
pub fn background_components(mask: &BinaryMask) -> usize {
    let d = mask.dims;
    let nd = [d[0] + 2, d[1] + 2, d[2] + 2];
    let idx = |i: usize, j: usize, k: usize| i + nd[0] * (j + nd[1] * k);
    let mut bg = vec![true; nd[0] * nd[1] * nd[2]];
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                if mask.at(i, j, k) {
                    bg[idx(i + 1, j + 1, k + 1)] = false;
                }
            }
        }
    }
    let mut seen = vec![false; bg.len()];
    let mut count = 0;
    for start in 0..bg.len() {
        if !bg[start] || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            let (i, j, k) = (v % nd[0], (v / nd[0]) % nd[1], v / (nd[0] * nd[1]));
            for o in &N6 {
                let (ni, nj, nk) = (
                    i as i64 + o[0],
                    j as i64 + o[1],
                    k as i64 + o[2],
                );
                if ni < 0
                    || nj < 0
                    || nk < 0
                    || ni >= nd[0] as i64
                    || nj >= nd[1] as i64
                    || nk >= nd[2] as i64
                {
                    continue;
                }
                let qi = idx(ni as usize, nj as usize, nk as usize);
                if bg[qi] && !seen[qi] {
                    seen[qi] = true;
                    stack.push(qi);
                }
            }
        }
    }
    count
}
