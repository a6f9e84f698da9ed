//! Volume data model, file I/O, synthetic phantoms and low-level filters.
//!
//! A volume is stored as a flat scalar array with x the fastest-varying
//! index: `index = x + dims[0] * (y + dims[1] * z)`. Every module in the
//! crate inherits this ordering. The voxel `(i, j, k)` occupies the box
//! `origin + [i..i+1, j..j+1, k..k+1] * spacing`, so its center sits at
//! `origin + (i + 0.5) * spacing`.
//!
//! Volumes are written as a two-file pair: a JSON header (dims, spacing,
//! origin, dtype, byte order, payload filename) next to a raw little-endian
//! binary payload.

use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

/// Scalar 3D volume with physical spacing, in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub values: Vec<f64>,
}

/// Boolean 3D volume with the same shape rules as [`VoxelGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub values: Vec<bool>,
}

fn check_shape(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::ShapeMismatch(format!("zero dimension in {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::ShapeMismatch(format!(
            "non-positive spacing in {spacing:?}"
        )));
    }
    let n = dims[0] * dims[1] * dims[2];
    if len != n {
        return Err(Error::ShapeMismatch(format!(
            "value count {len} does not match dims {dims:?} ({n})"
        )));
    }
    Ok(())
}

macro_rules! grid_common {
    ($ty:ty, $elem:ty) => {
        impl $ty {
            pub fn new(
                dims: [usize; 3],
                spacing: [f64; 3],
                origin: [f64; 3],
                fill: $elem,
            ) -> Result<Self> {
                check_shape(dims, spacing, dims[0] * dims[1] * dims[2])?;
                Ok(Self {
                    dims,
                    spacing,
                    origin,
                    values: vec![fill; dims[0] * dims[1] * dims[2]],
                })
            }

            pub fn from_values(
                dims: [usize; 3],
                spacing: [f64; 3],
                origin: [f64; 3],
                values: Vec<$elem>,
            ) -> Result<Self> {
                check_shape(dims, spacing, values.len())?;
                Ok(Self {
                    dims,
                    spacing,
                    origin,
                    values,
                })
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            #[inline]
            pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
                debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
                i + self.dims[0] * (j + self.dims[1] * k)
            }

            #[inline]
            pub fn at(&self, i: usize, j: usize, k: usize) -> $elem {
                self.values[self.index(i, j, k)]
            }

            #[inline]
            pub fn set(&mut self, i: usize, j: usize, k: usize, v: $elem) {
                let idx = self.index(i, j, k);
                self.values[idx] = v;
            }

            /// Inverse of [`Self::index`].
            #[inline]
            pub fn coords(&self, idx: usize) -> [usize; 3] {
                let i = idx % self.dims[0];
                let j = (idx / self.dims[0]) % self.dims[1];
                let k = idx / (self.dims[0] * self.dims[1]);
                [i, j, k]
            }

            /// Physical center of voxel `(i, j, k)` in mm.
            #[inline]
            pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
                [
                    self.origin[0] + (i as f64 + 0.5) * self.spacing[0],
                    self.origin[1] + (j as f64 + 0.5) * self.spacing[1],
                    self.origin[2] + (k as f64 + 0.5) * self.spacing[2],
                ]
            }

            pub fn voxel_volume(&self) -> f64 {
                self.spacing[0] * self.spacing[1] * self.spacing[2]
            }

            pub fn in_bounds(&self, idx: [usize; 3]) -> bool {
                idx[0] < self.dims[0] && idx[1] < self.dims[1] && idx[2] < self.dims[2]
            }
        }
    };
}

grid_common!(VoxelGrid, f64);
grid_common!(BinaryMask, bool);

impl VoxelGrid {
    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Binary threshold: foreground where `value >= threshold`.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            values: self.values.iter().map(|&v| v >= threshold).collect(),
        }
    }
}

impl BinaryMask {
    pub fn count_foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// `true` iff every foreground voxel of `self` is foreground in `other`.
    pub fn subset_of(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(&a, &b)| !a || b)
    }

    pub fn to_grid(&self, fg: f64, bg: f64) -> VoxelGrid {
        VoxelGrid {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            values: self.values.iter().map(|&v| if v { fg } else { bg }).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

/// Sample type of the raw payload. All payloads are little-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    I16,
    F32,
}

impl Dtype {
    fn sample_size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: Dtype,
    byte_order: String,
    data: String,
}

fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

/// Write `grid` as a header/payload pair. `path` names the JSON header; the
/// payload goes next to it with the extension replaced by `.raw`.
pub fn save_volume(grid: &VoxelGrid, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let raw_path = payload_path(path);
    let header = VolumeHeader {
        dims: grid.dims,
        spacing: grid.spacing,
        origin: grid.origin,
        dtype,
        byte_order: "little".into(),
        data: raw_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let mut payload = Vec::with_capacity(grid.len() * dtype.sample_size());
    match dtype {
        Dtype::U8 => {
            for &v in &grid.values {
                payload.push(v as u8);
            }
        }
        Dtype::I16 => {
            for &v in &grid.values {
                payload.extend_from_slice(&(v as i16).to_le_bytes());
            }
        }
        Dtype::F32 => {
            for &v in &grid.values {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let header_json = serde_json::to_string_pretty(&header)?;
    std::fs::write(path, header_json).map_err(|e| Error::io(path, e))?;
    std::fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

/// Load a volume saved by [`save_volume`].
pub fn load_volume(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let mut header_json = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut header_json))
        .map_err(|e| Error::io(path, e))?;
    let header: VolumeHeader = serde_json::from_str(&header_json)
        .map_err(|e| Error::VolumeFormat(format!("bad header {}: {e}", path.display())))?;
    if header.byte_order != "little" {
        return Err(Error::VolumeFormat(format!(
            "unsupported byte order '{}'",
            header.byte_order
        )));
    }
    check_shape(
        header.dims,
        header.spacing,
        header.dims[0] * header.dims[1] * header.dims[2],
    )?;
    let raw_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.data);
    let payload = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let expected = n * header.dtype.sample_size();
    if payload.len() != expected {
        return Err(Error::VolumeFormat(format!(
            "payload {} has {} bytes, header implies {}",
            raw_path.display(),
            payload.len(),
            expected
        )));
    }
    let mut values = Vec::with_capacity(n);
    match header.dtype {
        Dtype::U8 => values.extend(payload.iter().map(|&b| b as f64)),
        Dtype::I16 => {
            for c in payload.chunks_exact(2) {
                values.push(i16::from_le_bytes([c[0], c[1]]) as f64);
            }
        }
        Dtype::F32 => {
            for c in payload.chunks_exact(4) {
                values.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
    }
    VoxelGrid::from_values(header.dims, header.spacing, header.origin, values)
}

/// Write a mask through the volume format with dtype u8 (0 = background,
/// 1 = foreground).
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    save_volume(&mask.to_grid(1.0, 0.0), path, Dtype::U8)
}

/// Load a u8 volume as a mask: nonzero voxels are foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let grid = load_volume(path)?;
    Ok(BinaryMask {
        dims: grid.dims,
        spacing: grid.spacing,
        origin: grid.origin,
        values: grid.values.iter().map(|&v| v != 0.0).collect(),
    })
}

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

/// Analytic shape for phantom generation, all coordinates in mm.
/// A voxel is inside when its center lies strictly inside the shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhantomShape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Ellipsoid {
        center: [f64; 3],
        semi_axes: [f64; 3],
    },
    Tube {
        start: [f64; 3],
        end: [f64; 3],
        radius: f64,
    },
    /// Trunk from `root` to `junction`, then two branches to `tip_a`/`tip_b`.
    YTube {
        root: [f64; 3],
        junction: [f64; 3],
        tip_a: [f64; 3],
        tip_b: [f64; 3],
        radius: f64,
    },
}

impl PhantomShape {
    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            PhantomShape::Sphere { center, radius } => geom::dist(p, center) < radius,
            PhantomShape::Ellipsoid { center, semi_axes } => {
                let d = geom::sub(p, center);
                let q = (d[0] / semi_axes[0]).powi(2)
                    + (d[1] / semi_axes[1]).powi(2)
                    + (d[2] / semi_axes[2]).powi(2);
                q < 1.0
            }
            PhantomShape::Tube { start, end, radius } => {
                geom::dist_to_segment(p, start, end) < radius
            }
            PhantomShape::YTube {
                root,
                junction,
                tip_a,
                tip_b,
                radius,
            } => {
                geom::dist_to_segment(p, root, junction) < radius
                    || geom::dist_to_segment(p, junction, tip_a) < radius
                    || geom::dist_to_segment(p, junction, tip_b) < radius
            }
        }
    }

    /// Axis-aligned bounding box (mm).
    fn bbox(&self) -> ([f64; 3], [f64; 3]) {
        let pad = |pts: &[Vec3], r: f64| {
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for p in pts {
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a] - r);
                    hi[a] = hi[a].max(p[a] + r);
                }
            }
            (lo, hi)
        };
        match *self {
            PhantomShape::Sphere { center, radius } => pad(&[center], radius),
            PhantomShape::Ellipsoid { center, semi_axes } => {
                let r = semi_axes[0].max(semi_axes[1]).max(semi_axes[2]);
                pad(&[center], r)
            }
            PhantomShape::Tube { start, end, radius } => pad(&[start, end], radius),
            PhantomShape::YTube {
                root,
                junction,
                tip_a,
                tip_b,
                radius,
            } => pad(&[root, junction, tip_a, tip_b], radius),
        }
    }
}

/// Full description of a synthetic test volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    pub shape: PhantomShape,
    pub inside: f64,
    pub outside: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_spacing() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

/// Deterministic phantom volume: inside/outside values by analytic membership
/// of voxel centers, plus optional Gaussian noise from a seeded generator.
pub fn make_phantom(spec: &PhantomSpec) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::new(spec.dims, spec.spacing, spec.origin, spec.outside)?;
    let (lo, hi) = spec.shape.bbox();
    for a in 0..3 {
        let vol_lo = spec.origin[a];
        let vol_hi = spec.origin[a] + spec.dims[a] as f64 * spec.spacing[a];
        if lo[a] < vol_lo - 1e-9 || hi[a] > vol_hi + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "phantom shape exceeds volume bounds on axis {a} ({:.3}..{:.3} vs {:.3}..{:.3})",
                lo[a], hi[a], vol_lo, vol_hi
            )));
        }
    }
    for k in 0..spec.dims[2] {
        for j in 0..spec.dims[1] {
            for i in 0..spec.dims[0] {
                if spec.shape.contains(grid.voxel_center(i, j, k)) {
                    grid.set(i, j, k, spec.inside);
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for v in &mut grid.values {
            *v += spec.noise_sigma * standard_normal(&mut rng);
        }
    }
    Ok(grid)
}

/// Exact membership mask of the phantom shape (the ground truth that
/// `make_phantom` discretizes before noise).
pub fn phantom_mask(spec: &PhantomSpec) -> Result<BinaryMask> {
    let grid = make_phantom(&PhantomSpec {
        noise_sigma: 0.0,
        inside: 1.0,
        outside: 0.0,
        ..spec.clone()
    })?;
    Ok(grid.threshold(0.5))
}

/// Box-Muller transform over the seeded stream; keeps noise reproducible
/// without pulling a distributions dependency.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

/// Separable Gaussian blur with a ±3σ truncated, normalized kernel and
/// edge replication, so constant volumes are fixed points. `sigma` is in mm
/// per axis; a zero entry skips that axis.
pub fn gaussian_blur(grid: &VoxelGrid, sigma: [f64; 3]) -> Result<VoxelGrid> {
    if sigma.iter().any(|&s| s < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "negative blur sigma {sigma:?}"
        )));
    }
    let mut out = grid.clone();
    for axis in 0..3 {
        let sigma_vox = sigma[axis] / grid.spacing[axis];
        if sigma_vox == 0.0 {
            continue;
        }
        let radius = (3.0 * sigma_vox).ceil() as i64;
        if radius == 0 {
            continue;
        }
        let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
        for d in -radius..=radius {
            kernel.push((-(d as f64).powi(2) / (2.0 * sigma_vox * sigma_vox)).exp());
        }
        let total: f64 = kernel.iter().sum();
        for w in &mut kernel {
            *w /= total;
        }
        out = convolve_axis(&out, axis, &kernel, radius);
    }
    Ok(out)
}

fn convolve_axis(grid: &VoxelGrid, axis: usize, kernel: &[f64], radius: i64) -> VoxelGrid {
    let mut out = grid.clone();
    let dims = grid.dims;
    let n = dims[axis] as i64;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let pos = [i, j, k];
                let mut acc = 0.0;
                for (w_idx, &w) in kernel.iter().enumerate() {
                    let d = w_idx as i64 - radius;
                    // Edge replication: clamp the sample index.
                    let s = (pos[axis] as i64 + d).clamp(0, n - 1) as usize;
                    let mut sp = pos;
                    sp[axis] = s;
                    acc += w * grid.at(sp[0], sp[1], sp[2]);
                }
                out.set(i, j, k, acc);
            }
        }
    }
    out
}

fn dilate_once(mask: &BinaryMask) -> BinaryMask {
    let mut out = mask.clone();
    let d = mask.dims;
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                if mask.at(i, j, k) {
                    continue;
                }
                let hit = (i > 0 && mask.at(i - 1, j, k))
                    || (i + 1 < d[0] && mask.at(i + 1, j, k))
                    || (j > 0 && mask.at(i, j - 1, k))
                    || (j + 1 < d[1] && mask.at(i, j + 1, k))
                    || (k > 0 && mask.at(i, j, k - 1))
                    || (k + 1 < d[2] && mask.at(i, j, k + 1));
                if hit {
                    out.set(i, j, k, true);
                }
            }
        }
    }
    out
}

fn erode_once(mask: &BinaryMask) -> BinaryMask {
    // Out-of-bounds counts as background.
    let mut out = mask.clone();
    let d = mask.dims;
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                if !mask.at(i, j, k) {
                    continue;
                }
                let keep = i > 0
                    && mask.at(i - 1, j, k)
                    && i + 1 < d[0]
                    && mask.at(i + 1, j, k)
                    && j > 0
                    && mask.at(i, j - 1, k)
                    && j + 1 < d[1]
                    && mask.at(i, j + 1, k)
                    && k > 0
                    && mask.at(i, j, k - 1)
                    && k + 1 < d[2]
                    && mask.at(i, j, k + 1);
                if !keep {
                    out.set(i, j, k, false);
                }
            }
        }
    }
    out
}

fn pad_mask(mask: &BinaryMask, pad: usize) -> BinaryMask {
    let d = mask.dims;
    let nd = [d[0] + 2 * pad, d[1] + 2 * pad, d[2] + 2 * pad];
    let mut out = BinaryMask {
        dims: nd,
        spacing: mask.spacing,
        origin: [
            mask.origin[0] - pad as f64 * mask.spacing[0],
            mask.origin[1] - pad as f64 * mask.spacing[1],
            mask.origin[2] - pad as f64 * mask.spacing[2],
        ],
        values: vec![false; nd[0] * nd[1] * nd[2]],
    };
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                out.set(i + pad, j + pad, k + pad, mask.at(i, j, k));
            }
        }
    }
    out
}

fn crop_mask_pad(mask: &BinaryMask, pad: usize, dims: [usize; 3], origin: [f64; 3]) -> BinaryMask {
    let mut out = BinaryMask {
        dims,
        spacing: mask.spacing,
        origin,
        values: vec![false; dims[0] * dims[1] * dims[2]],
    };
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out.set(i, j, k, mask.at(i + pad, j + pad, k + pad));
            }
        }
    }
    out
}

/// Morphological opening (erode then dilate) with the 6-connected ball of
/// the given radius. Radius 0 is the identity.
pub fn morph_open(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    // The eroded set dilates back inside the original footprint, so no
    // padding is required for the opening to match the unbounded-domain
    // result.
    let mut m = mask.clone();
    for _ in 0..radius {
        m = erode_once(&m);
    }
    for _ in 0..radius {
        m = dilate_once(&m);
    }
    m
}

/// Morphological closing (dilate then erode) with the 6-connected ball of
/// the given radius. Computed on a padded copy so border voxels behave as in
/// an unbounded background, keeping the operation extensive and idempotent.
pub fn morph_close(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let mut m = pad_mask(mask, radius);
    for _ in 0..radius {
        m = dilate_once(&m);
    }
    for _ in 0..radius {
        m = erode_once(&m);
    }
    crop_mask_pad(&m, radius, mask.dims, mask.origin)
}

// ---------------------------------------------------------------------------
// Utilities
// ---------------------------------------------------------------------------

/// 2x mean-pooling downsample; odd trailing samples average over the voxels
/// that exist.
pub fn downsample2x(grid: &VoxelGrid) -> VoxelGrid {
    let d = grid.dims;
    let nd = [d[0].div_ceil(2), d[1].div_ceil(2), d[2].div_ceil(2)];
    let mut out = VoxelGrid {
        dims: nd,
        spacing: [
            grid.spacing[0] * 2.0,
            grid.spacing[1] * 2.0,
            grid.spacing[2] * 2.0,
        ],
        origin: grid.origin,
        values: vec![0.0; nd[0] * nd[1] * nd[2]],
    };
    for k in 0..nd[2] {
        for j in 0..nd[1] {
            for i in 0..nd[0] {
                let mut acc = 0.0;
                let mut count = 0usize;
                for dk in 0..2 {
                    for dj in 0..2 {
                        for di in 0..2 {
                            let (si, sj, sk) = (2 * i + di, 2 * j + dj, 2 * k + dk);
                            if si < d[0] && sj < d[1] && sk < d[2] {
                                acc += grid.at(si, sj, sk);
                                count += 1;
                            }
                        }
                    }
                }
                out.set(i, j, k, acc / count as f64);
            }
        }
    }
    out
}

/// Sub-volume `[lo, hi)` in voxel indices; the origin shifts so physical
/// coordinates are preserved.
pub fn crop(grid: &VoxelGrid, lo: [usize; 3], hi: [usize; 3]) -> Result<VoxelGrid> {
    for a in 0..3 {
        if lo[a] >= hi[a] || hi[a] > grid.dims[a] {
            return Err(Error::InvalidArgument(format!(
                "crop bounds {lo:?}..{hi:?} invalid for dims {:?}",
                grid.dims
            )));
        }
    }
    let nd = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut out = VoxelGrid {
        dims: nd,
        spacing: grid.spacing,
        origin: [
            grid.origin[0] + lo[0] as f64 * grid.spacing[0],
            grid.origin[1] + lo[1] as f64 * grid.spacing[1],
            grid.origin[2] + lo[2] as f64 * grid.spacing[2],
        ],
        values: vec![0.0; nd[0] * nd[1] * nd[2]],
    };
    for k in 0..nd[2] {
        for j in 0..nd[1] {
            for i in 0..nd[0] {
                out.set(i, j, k, grid.at(i + lo[0], j + lo[1], k + lo[2]));
            }
        }
    }
    Ok(out)
}
