//! Surface extraction, Taubin smoothing and voxel-based tetrahedral meshing.
//!
//! Surfaces come from marching the cells of the (implicitly background-padded)
//! voxel-center lattice. Every cell is triangulated through a fixed
//! six-tetrahedron decomposition whose main diagonal follows the same global
//! rule in all cells, so neighboring cells agree on the shared face diagonals
//! and the extracted 0.5-isosurface is watertight by construction: isosurface
//! vertices sit at midpoints of bipolar lattice edges (cube edges, face
//! diagonals, or the cell diagonal — the latter two act as the consistent
//! center-sampling rule for ambiguous configurations). The case tables are
//! generated once at startup from that decomposition.
//!
//! The volumetric generator splits each foreground voxel into the same six
//! tetrahedra, which conform across voxels for the same reason.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::volume::BinaryMask;

/// Triangle surface in mm.
#[derive(Debug, Clone, Default)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

/// Tetrahedral volume mesh in mm. All tets are positively oriented.
#[derive(Debug, Clone, Default)]
pub struct TetMesh {
    pub vertices: Vec<Vec3>,
    pub tets: Vec<[usize; 4]>,
}

impl SurfaceMesh {
    /// Enclosed volume by the divergence theorem; positive for closed
    /// surfaces with outward-pointing triangle normals.
    pub fn enclosed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let (a, b, c) = (
                    self.vertices[t[0]],
                    self.vertices[t[1]],
                    self.vertices[t[2]],
                );
                geom::dot(a, geom::cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Undirected edge -> number of incident triangles.
    pub fn edge_incidence(&self) -> HashMap<(usize, usize), usize> {
        let mut map = HashMap::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (a.min(b), a.max(b));
                *map.entry(key).or_insert(0) += 1;
            }
        }
        map
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_incidence().values().all(|&c| c == 2)
    }
}

impl TetMesh {
    pub fn volume(&self) -> f64 {
        self.tets
            .iter()
            .map(|t| {
                geom::tet_volume(
                    self.vertices[t[0]],
                    self.vertices[t[1]],
                    self.vertices[t[2]],
                    self.vertices[t[3]],
                )
            })
            .sum()
    }

    /// The four faces of tet `t` as vertex triples, each sorted.
    fn tet_faces(t: [usize; 4]) -> [[usize; 3]; 4] {
        let mut faces = [
            [t[0], t[1], t[2]],
            [t[0], t[1], t[3]],
            [t[0], t[2], t[3]],
            [t[1], t[2], t[3]],
        ];
        for f in &mut faces {
            f.sort_unstable();
        }
        faces
    }

    /// Sorted face triple -> incidence count (1 = boundary, 2 = interior).
    pub fn face_incidence(&self) -> HashMap<[usize; 3], usize> {
        let mut map = HashMap::new();
        for &t in &self.tets {
            for f in Self::tet_faces(t) {
                *map.entry(f).or_insert(0) += 1;
            }
        }
        map
    }

    /// Vertices that lie on at least one boundary face.
    pub fn boundary_vertices(&self) -> Vec<bool> {
        let mut b = vec![false; self.vertices.len()];
        for (face, count) in self.face_incidence() {
            if count == 1 {
                for v in face {
                    b[v] = true;
                }
            }
        }
        b
    }
}

// ---------------------------------------------------------------------------
// Case-table construction
// ---------------------------------------------------------------------------

/// Kuhn decomposition of the unit cell: six tets sharing the 0-7 diagonal
/// (corner index = x + 2y + 4z).
const TET_CORNERS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

fn corner_offset(c: usize) -> [i64; 3] {
    [(c & 1) as i64, ((c >> 1) & 1) as i64, ((c >> 2) & 1) as i64]
}

fn corner_pos(c: usize) -> Vec3 {
    let o = corner_offset(c);
    [o[0] as f64, o[1] as f64, o[2] as f64]
}

type CornerPair = (usize, usize);
type CaseTriangles = Vec<[CornerPair; 3]>;

/// `TABLE[tet][state]` where bit `b` of `state` marks tet corner `b` as
/// foreground; triangle vertices are midpoints of the listed corner pairs,
/// wound so normals point from foreground to background. Orientation is
/// decided geometrically on the unit cell and survives any positive
/// per-axis scaling.
fn case_table() -> &'static Vec<Vec<CaseTriangles>> {
    static TABLE: OnceLock<Vec<Vec<CaseTriangles>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        TET_CORNERS
            .iter()
            .map(|corners| {
                (0u8..16)
                    .map(|state| tet_case(corners, state))
                    .collect::<Vec<_>>()
            })
            .collect()
    })
}

fn tet_case(corners: &[usize; 4], state: u8) -> CaseTriangles {
    let fg: Vec<usize> = (0..4).filter(|&b| state >> b & 1 == 1).collect();
    let bg: Vec<usize> = (0..4).filter(|&b| state >> b & 1 == 0).collect();
    let pair = |a: usize, b: usize| -> CornerPair {
        let (ca, cb) = (corners[a], corners[b]);
        (ca.min(cb), ca.max(cb))
    };
    let mut tris: CaseTriangles = match (fg.len(), bg.len()) {
        (0, _) | (_, 0) => Vec::new(),
        (1, 3) => vec![[pair(fg[0], bg[0]), pair(fg[0], bg[1]), pair(fg[0], bg[2])]],
        (3, 1) => vec![[pair(bg[0], fg[0]), pair(bg[0], fg[1]), pair(bg[0], fg[2])]],
        (2, 2) => {
            let q = [
                pair(fg[0], bg[0]),
                pair(fg[0], bg[1]),
                pair(fg[1], bg[1]),
                pair(fg[1], bg[0]),
            ];
            vec![[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
        }
        _ => unreachable!(),
    };
    // Wind towards the background side.
    let centroid = |set: &[usize]| -> Vec3 {
        let mut c = [0.0; 3];
        for &b in set {
            c = geom::add(c, corner_pos(corners[b]));
        }
        geom::scale(c, 1.0 / set.len() as f64)
    };
    if !tris.is_empty() {
        let dir = geom::sub(centroid(&bg), centroid(&fg));
        for tri in &mut tris {
            let mid =
                |p: CornerPair| -> Vec3 { geom::scale(geom::add(corner_pos(p.0), corner_pos(p.1)), 0.5) };
            let n = geom::cross(
                geom::sub(mid(tri[1]), mid(tri[0])),
                geom::sub(mid(tri[2]), mid(tri[0])),
            );
            if geom::dot(n, dir) < 0.0 {
                tri.swap(1, 2);
            }
        }
    }
    tris
}

// ---------------------------------------------------------------------------
// Marching cubes
// ---------------------------------------------------------------------------

fn pack_sample(p: [i64; 3]) -> u64 {
    // Padded sample indices start at -1; shift into unsigned range.
    debug_assert!(p.iter().all(|&c| (-1..(1 << 20)).contains(&c)));
    (((p[0] + 1) as u64) << 42) | (((p[1] + 1) as u64) << 21) | ((p[2] + 1) as u64)
}

/// Extract the closed 0.5-isosurface of a binary mask.
///
/// The mask is treated as padded with one background layer, so surfaces always
/// close. An empty mask yields an empty mesh.
pub fn marching_cubes(mask: &BinaryMask) -> SurfaceMesh {
    let d = mask.dims;
    let (nx, ny, nz) = (d[0] as i64, d[1] as i64, d[2] as i64);
    let fg = |p: [i64; 3]| -> bool {
        p[0] >= 0
            && p[1] >= 0
            && p[2] >= 0
            && p[0] < nx
            && p[1] < ny
            && p[2] < nz
            && mask.at(p[0] as usize, p[1] as usize, p[2] as usize)
    };
    let sample_pos = |p: [i64; 3]| -> Vec3 {
        [
            mask.origin[0] + (p[0] as f64 + 0.5) * mask.spacing[0],
            mask.origin[1] + (p[1] as f64 + 0.5) * mask.spacing[1],
            mask.origin[2] + (p[2] as f64 + 0.5) * mask.spacing[2],
        ]
    };

    let table = case_table();
    let mut mesh = SurfaceMesh::default();
    let mut vertex_ids: HashMap<u128, usize> = HashMap::new();

    for ck in -1..nz {
        for cj in -1..ny {
            for ci in -1..nx {
                let base = [ci, cj, ck];
                let mut state8 = 0u8;
                for c in 0..8 {
                    let o = corner_offset(c);
                    if fg([base[0] + o[0], base[1] + o[1], base[2] + o[2]]) {
                        state8 |= 1 << c;
                    }
                }
                if state8 == 0 || state8 == 0xff {
                    continue;
                }
                for (t, corners) in TET_CORNERS.iter().enumerate() {
                    let mut state4 = 0u8;
                    for (b, &c) in corners.iter().enumerate() {
                        if state8 >> c & 1 == 1 {
                            state4 |= 1 << b;
                        }
                    }
                    for tri in &table[t][state4 as usize] {
                        let mut ids = [0usize; 3];
                        for (slot, &(ca, cb)) in tri.iter().enumerate() {
                            let (oa, ob) = (corner_offset(ca), corner_offset(cb));
                            let a = [base[0] + oa[0], base[1] + oa[1], base[2] + oa[2]];
                            let b = [base[0] + ob[0], base[1] + ob[1], base[2] + ob[2]];
                            let (ka, kb) = (pack_sample(a), pack_sample(b));
                            let key = ((ka.min(kb) as u128) << 64) | ka.max(kb) as u128;
                            let next = mesh.vertices.len();
                            let id = *vertex_ids.entry(key).or_insert_with(|| {
                                mesh.vertices.push(geom::scale(
                                    geom::add(sample_pos(a), sample_pos(b)),
                                    0.5,
                                ));
                                next
                            });
                            ids[slot] = id;
                        }
                        mesh.triangles.push(ids);
                    }
                }
            }
        }
    }
    mesh
}

// ---------------------------------------------------------------------------
// Taubin smoothing
// ---------------------------------------------------------------------------

/// Parameters of the lambda/mu smoothing passes.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaubinParams {
    pub lambda: f64,
    pub mu: f64,
    pub iterations: usize,
}

impl Default for TaubinParams {
    fn default() -> Self {
        TaubinParams {
            lambda: 0.33,
            mu: -0.34,
            iterations: 20,
        }
    }
}

fn vertex_neighbors(vertex_count: usize, triangles: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); vertex_count];
    for t in triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            nbrs[a].push(b);
            nbrs[b].push(a);
        }
    }
    for n in &mut nbrs {
        n.sort_unstable();
        n.dedup();
    }
    nbrs
}

fn umbrella_pass(positions: &mut [Vec3], nbrs: &[Vec<usize>], factor: f64) {
    let snapshot: Vec<Vec3> = positions.to_vec();
    for (i, pos) in positions.iter_mut().enumerate() {
        if nbrs[i].is_empty() {
            continue; // isolated vertices stay fixed
        }
        let mut mean = [0.0; 3];
        for &n in &nbrs[i] {
            mean = geom::add(mean, snapshot[n]);
        }
        mean = geom::scale(mean, 1.0 / nbrs[i].len() as f64);
        *pos = geom::add(*pos, geom::scale(geom::sub(mean, *pos), factor));
    }
}

/// Alternating lambda/mu umbrella smoothing. Connectivity is untouched; only
/// vertex positions move.
pub fn taubin_smooth(mesh: &SurfaceMesh, params: &TaubinParams) -> SurfaceMesh {
    let mut out = mesh.clone();
    let nbrs = vertex_neighbors(mesh.vertices.len(), &mesh.triangles);
    for _ in 0..params.iterations {
        umbrella_pass(&mut out.vertices, &nbrs, params.lambda);
        umbrella_pass(&mut out.vertices, &nbrs, params.mu);
    }
    out
}

// ---------------------------------------------------------------------------
// Voxel tetrahedral mesh
// ---------------------------------------------------------------------------

/// Tetrahedralize the foreground voxels directly: each voxel splits into six
/// tets with a globally consistent diagonal rule, so shared faces conform
/// across voxels and the total volume equals voxel count times voxel volume.
///
/// With `smooth_boundary`, a Taubin pass moves boundary vertices only;
/// interior vertices stay put. Smoothing that would invert a tet is rejected.
pub fn voxel_tet_mesh(mask: &BinaryMask, smooth_boundary: Option<&TaubinParams>) -> Result<TetMesh> {
    if mask.count_foreground() == 0 {
        return Err(Error::Mesh("mask has no foreground voxels".into()));
    }
    let d = mask.dims;
    let mut mesh = TetMesh::default();
    let mut corner_ids: HashMap<u64, usize> = HashMap::new();
    let corner_pos = |p: [i64; 3]| -> Vec3 {
        [
            mask.origin[0] + p[0] as f64 * mask.spacing[0],
            mask.origin[1] + p[1] as f64 * mask.spacing[1],
            mask.origin[2] + p[2] as f64 * mask.spacing[2],
        ]
    };

    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                if !mask.at(i, j, k) {
                    continue;
                }
                let base = [i as i64, j as i64, k as i64];
                let mut ids = [0usize; 8];
                for (c, id) in ids.iter_mut().enumerate() {
                    let o = corner_offset(c);
                    let p = [base[0] + o[0], base[1] + o[1], base[2] + o[2]];
                    let key = pack_sample(p);
                    let next = mesh.vertices.len();
                    *id = *corner_ids.entry(key).or_insert_with(|| {
                        mesh.vertices.push(corner_pos(p));
                        next
                    });
                }
                for corners in &TET_CORNERS {
                    let mut tet = [
                        ids[corners[0]],
                        ids[corners[1]],
                        ids[corners[2]],
                        ids[corners[3]],
                    ];
                    let v = geom::tet_volume(
                        mesh.vertices[tet[0]],
                        mesh.vertices[tet[1]],
                        mesh.vertices[tet[2]],
                        mesh.vertices[tet[3]],
                    );
                    if v < 0.0 {
                        tet.swap(2, 3);
                    }
                    mesh.tets.push(tet);
                }
            }
        }
    }

    if let Some(params) = smooth_boundary {
        smooth_tet_boundary(&mut mesh, params)?;
    }
    Ok(mesh)
}

/// Taubin smoothing restricted to boundary vertices, using the boundary
/// triangle graph for the umbrella weights.
fn smooth_tet_boundary(mesh: &mut TetMesh, params: &TaubinParams) -> Result<()> {
    let boundary_flags = mesh.boundary_vertices();
    // Boundary faces with original (unsorted) orientation are not needed;
    // adjacency is orientation-free.
    let mut boundary_faces: Vec<[usize; 3]> = Vec::new();
    for (face, count) in mesh.face_incidence() {
        if count == 1 {
            boundary_faces.push(face);
        }
    }
    boundary_faces.sort_unstable();
    let nbrs = vertex_neighbors(mesh.vertices.len(), &boundary_faces);

    let mut positions = mesh.vertices.clone();
    for _ in 0..params.iterations {
        for factor in [params.lambda, params.mu] {
            let snapshot = positions.clone();
            for (i, pos) in positions.iter_mut().enumerate() {
                if !boundary_flags[i] || nbrs[i].is_empty() {
                    continue;
                }
                let mut mean = [0.0; 3];
                for &n in &nbrs[i] {
                    mean = geom::add(mean, snapshot[n]);
                }
                mean = geom::scale(mean, 1.0 / nbrs[i].len() as f64);
                *pos = geom::add(*pos, geom::scale(geom::sub(mean, *pos), factor));
            }
        }
    }
    for (idx, t) in mesh.tets.iter().enumerate() {
        let v = geom::tet_volume(positions[t[0]], positions[t[1]], positions[t[2]], positions[t[3]]);
        if v <= 0.0 {
            return Err(Error::Mesh(format!(
                "boundary smoothing inverts tet {idx} (signed volume {v:.3e})"
            )));
        }
    }
    mesh.vertices = positions;
    Ok(())
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MeshStats {
    pub volume: f64,
    pub min_quality: f64,
    pub max_quality: f64,
    pub boundary_faces: usize,
    pub tet_count: usize,
    pub vertex_count: usize,
}

/// Normalized radius ratio `3 r_in / r_circ`, equal to 1 for the regular tet.
fn tet_quality(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> f64 {
    let vol = geom::tet_volume(a, b, c, d);
    let area = geom::tri_area(a, b, c)
        + geom::tri_area(a, b, d)
        + geom::tri_area(a, c, d)
        + geom::tri_area(b, c, d);
    let r_in = 3.0 * vol / area;
    // Circumcenter from |x-a|^2 = |x-v|^2 for v in {b, c, d}.
    let rows = [geom::sub(b, a), geom::sub(c, a), geom::sub(d, a)];
    let rhs = [
        0.5 * geom::dot(rows[0], rows[0]),
        0.5 * geom::dot(rows[1], rows[1]),
        0.5 * geom::dot(rows[2], rows[2]),
    ];
    let det = geom::dot(rows[0], geom::cross(rows[1], rows[2]));
    // Cramer's rule, column by column.
    let col = |idx: usize, repl: [f64; 3]| -> [Vec3; 3] {
        let mut m = rows;
        for r in 0..3 {
            m[r][idx] = repl[r];
        }
        m
    };
    let solve = |m: [Vec3; 3]| geom::dot(m[0], geom::cross(m[1], m[2])) / det;
    let rel = [
        solve(col(0, rhs)),
        solve(col(1, rhs)),
        solve(col(2, rhs)),
    ];
    let r_circ = geom::norm(rel);
    3.0 * r_in / r_circ
}

/// Volume, quality range and boundary face count. Inverted tets are an error,
/// not a silent statistic.
pub fn mesh_stats(mesh: &TetMesh) -> Result<MeshStats> {
    if mesh.tets.is_empty() {
        return Err(Error::Mesh("empty tetrahedral mesh".into()));
    }
    let mut volume = 0.0;
    let mut min_q = f64::INFINITY;
    let mut max_q = f64::NEG_INFINITY;
    for (idx, t) in mesh.tets.iter().enumerate() {
        let (a, b, c, d) = (
            mesh.vertices[t[0]],
            mesh.vertices[t[1]],
            mesh.vertices[t[2]],
            mesh.vertices[t[3]],
        );
        let v = geom::tet_volume(a, b, c, d);
        if v <= 0.0 {
            return Err(Error::Mesh(format!(
                "tet {idx} has non-positive signed volume {v:.3e}"
            )));
        }
        volume += v;
        let q = tet_quality(a, b, c, d);
        min_q = min_q.min(q);
        max_q = max_q.max(q);
    }
    let boundary_faces = mesh
        .face_incidence()
        .values()
        .filter(|&&count| count == 1)
        .count();
    Ok(MeshStats {
        volume,
        min_quality: min_q,
        max_quality: max_q,
        boundary_faces,
        tet_count: mesh.tets.len(),
        vertex_count: mesh.vertices.len(),
    })
}
