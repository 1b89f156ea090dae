//! From implicit field to explicit geometry: dense grid evaluation,
//! marching-cubes isosurface extraction with shared-edge vertex
//! deduplication, area-weighted vertex normals, ASCII OBJ export/import,
//! and a parity rasterizer for volumetric checks on extracted meshes.

mod tables;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::checkpoint::{self, CheckpointError, TensorRecord};
use crate::occupancy::{OccupancyError, OccupancyModel};
use crate::synth::VoxelGrid;

use tables::{EDGE_TABLE, TRIANGLE_TABLE};

/// What can go wrong while building or serializing geometry.
#[derive(Debug, thiserror::Error)]
pub enum MeshingError {
    #[error("model evaluation failed: {0}")]
    Occupancy(#[from] OccupancyError),
    #[error("grid dims {dims:?} invalid: every axis needs at least 2 samples")]
    BadDims { dims: [usize; 3] },
    #[error("grid value at index {index} is not finite")]
    NonFinite { index: usize },
    #[error("grid has {got} values, dims {dims:?} require {expected}")]
    ValueCount { dims: [usize; 3], expected: usize, got: usize },
    #[error("isolevel {iso} is not finite")]
    BadIso { iso: f64 },
    #[error("mesh is empty")]
    EmptyMesh,
    #[error("vertex {index} has no incident face area; no normal exists")]
    IsolatedVertex { index: usize },
    #[error("face {face} references vertex {index} beyond {count} vertices")]
    FaceIndexOutOfRange { face: usize, index: usize, count: usize },
    #[error("face {face} repeats a vertex index")]
    DegenerateFace { face: usize },
    #[error("normal {index} is not unit length (norm {norm})")]
    NormalNotUnit { index: usize, norm: f64 },
    #[error("normals length {got} does not match vertex count {expected}")]
    NormalCount { expected: usize, got: usize },
    #[error("obj parse error at line {line}: {reason}")]
    ObjParse { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor file error: {0}")]
    Tensor(#[from] CheckpointError),
}

// ---------------------------------------------------------------------------
// Scalar grids
// ---------------------------------------------------------------------------

/// A dense scalar field sampled on an axis-aligned lattice. Sample
/// `(i, j, k)` sits at `origin + (i, j, k) * step` per axis; values are
/// stored row-major with x outermost and z innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    dims: [usize; 3],
    origin: [f64; 3],
    step: [f64; 3],
    values: Vec<f64>,
}

impl ScalarGrid {
    /// Wrap explicit samples, validating dims and finiteness.
    pub fn from_values(
        dims: [usize; 3],
        origin: [f64; 3],
        step: [f64; 3],
        values: Vec<f64>,
    ) -> Result<Self, MeshingError> {
        if dims.iter().any(|&d| d < 2) {
            return Err(MeshingError::BadDims { dims });
        }
        let expected = dims[0] * dims[1] * dims[2];
        if values.len() != expected {
            return Err(MeshingError::ValueCount { dims, expected, got: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(MeshingError::NonFinite { index });
        }
        Ok(Self { dims, origin, step, values })
    }

    /// Sample a function at the cell centers of the unit cube: axis of `n`
    /// cells puts sample `i` at `-0.5 + (i + 0.5) / n`. Panics on
    /// non-finite samples or axes below 2 (caller bug).
    pub fn from_fn(resolution: [usize; 3], f: impl Fn([f64; 3]) -> f64) -> Self {
        assert!(resolution.iter().all(|&d| d >= 2), "resolution must be at least 2 per axis");
        let [nx, ny, nz] = resolution;
        let origin = [
            -0.5 + 0.5 / nx as f64,
            -0.5 + 0.5 / ny as f64,
            -0.5 + 0.5 / nz as f64,
        ];
        let step = [1.0 / nx as f64, 1.0 / ny as f64, 1.0 / nz as f64];
        let mut values = Vec::with_capacity(nx * ny * nz);
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let p = [
                        origin[0] + i as f64 * step[0],
                        origin[1] + j as f64 * step[1],
                        origin[2] + k as f64 * step[2],
                    ];
                    let v = f(p);
                    assert!(v.is_finite(), "field value at {p:?} is not finite");
                    values.push(v);
                }
            }
        }
        Self { dims: resolution, origin, step, values }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn step(&self) -> [f64; 3] {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// World position of sample (i, j, k).
    pub fn position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.step[0],
            self.origin[1] + j as f64 * self.step[1],
            self.origin[2] + k as f64 * self.step[2],
        ]
    }

    /// A copy surrounded by one layer of zero samples on every side, so
    /// any isosurface above 0 closes. Interior values are preserved
    /// bit-for-bit; the lattice extends one step outward per axis.
    pub fn pad_with_zeros(&self) -> ScalarGrid {
        let [nx, ny, nz] = self.dims;
        let dims = [nx + 2, ny + 2, nz + 2];
        let origin = [
            self.origin[0] - self.step[0],
            self.origin[1] - self.step[1],
            self.origin[2] - self.step[2],
        ];
        let mut values = vec![0.0; dims[0] * dims[1] * dims[2]];
        for i in 0..nx {
            for j in 0..ny {
                let src = self.index(i, j, 0);
                let dst = ((i + 1) * dims[1] + (j + 1)) * dims[2] + 1;
                values[dst..dst + nz].copy_from_slice(&self.values[src..src + nz]);
            }
        }
        ScalarGrid { dims, origin, step: self.step, values }
    }
}

/// Evaluate a model over the unit cube at `resolution` cell centers per
/// axis and zero-pad the result, ready for watertight extraction. The
/// model runs in eval mode; evaluation order never affects the values
/// (per-point independence).
pub fn eval_grid(
    model: &OccupancyModel,
    cond: Option<&crate::conditioning::ConditionVector>,
    resolution: [usize; 3],
) -> Result<ScalarGrid, MeshingError> {
    if resolution.iter().any(|&d| d < 2) {
        return Err(MeshingError::BadDims { dims: resolution });
    }
    let [nx, ny, nz] = resolution;
    let mut points = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                points.push([
                    -0.5 + (i as f64 + 0.5) / nx as f64,
                    -0.5 + (j as f64 + 0.5) / ny as f64,
                    -0.5 + (k as f64 + 0.5) / nz as f64,
                ]);
            }
        }
    }
    let report = model.predict(&points, cond)?;
    let interior = ScalarGrid {
        dims: resolution,
        origin: [
            -0.5 + 0.5 / nx as f64,
            -0.5 + 0.5 / ny as f64,
            -0.5 + 0.5 / nz as f64,
        ],
        step: [1.0 / nx as f64, 1.0 / ny as f64, 1.0 / nz as f64],
        values: report.probabilities,
    };
    Ok(interior.pad_with_zeros())
}

// ---------------------------------------------------------------------------
// Triangle meshes
// ---------------------------------------------------------------------------

/// Indexed triangle mesh with optional per-vertex unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Option<Vec<[f64; 3]>>,
}

impl TriangleMesh {
    pub fn empty() -> Self {
        Self { vertices: Vec::new(), faces: Vec::new(), normals: None }
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty() && self.faces.is_empty()
    }

    /// Check index bounds, face non-degeneracy, and normal shape/length.
    pub fn validate(&self) -> Result<(), MeshingError> {
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                if v >= self.vertices.len() {
                    return Err(MeshingError::FaceIndexOutOfRange {
                        face: fi,
                        index: v,
                        count: self.vertices.len(),
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshingError::DegenerateFace { face: fi });
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.vertices.len() {
                return Err(MeshingError::NormalCount {
                    expected: self.vertices.len(),
                    got: normals.len(),
                });
            }
            for (i, n) in normals.iter().enumerate() {
                let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(MeshingError::NormalNotUnit { index: i, norm });
                }
            }
        }
        Ok(())
    }

    /// Count undirected edges whose incident-face count is not exactly 2;
    /// zero means the mesh is watertight.
    pub fn boundary_edge_count(&self) -> usize {
        self.edge_face_counts()
            .values()
            .filter(|&&c| c != 2)
            .count()
    }

    /// Number of distinct undirected edges.
    pub fn edge_count(&self) -> usize {
        self.edge_face_counts().len()
    }

    fn edge_face_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

// ---------------------------------------------------------------------------
// Marching cubes
// ---------------------------------------------------------------------------

/// Per-corner lattice offsets matching the lookup tables.
const CORNER: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs spanned by each of the 12 cell edges.
const EDGE_ENDS: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Classic 256-case marching cubes with linear interpolation along
/// crossing edges. Vertices on shared lattice edges are deduplicated, and
/// the interpolation always runs from the lattice-low endpoint so both
/// adjacent cells compute bit-identical positions. Faces are wound so
/// normals point toward the below-isolevel side (outward for a field that
/// is high inside the object). Triangles whose corners collapse onto one
/// deduplicated vertex are dropped.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> Result<TriangleMesh, MeshingError> {
    if !iso.is_finite() {
        return Err(MeshingError::BadIso { iso });
    }
    let [nx, ny, nz] = grid.dims();
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    // Key: (lattice point, axis) of an edge's lower endpoint.
    let mut edge_cache: HashMap<(usize, usize, usize, u8), usize> = HashMap::new();

    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for k in 0..nz - 1 {
                let vals: [f64; 8] = std::array::from_fn(|c| {
                    grid.get(i + CORNER[c][0], j + CORNER[c][1], k + CORNER[c][2])
                });
                let mut case = 0usize;
                for (c, &v) in vals.iter().enumerate() {
                    if v < iso {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut edge_verts = [usize::MAX; 12];
                for (e, &(c1, c2)) in EDGE_ENDS.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let p1 = [i + CORNER[c1][0], j + CORNER[c1][1], k + CORNER[c1][2]];
                    let p2 = [i + CORNER[c2][0], j + CORNER[c2][1], k + CORNER[c2][2]];
                    // Canonicalize: lo is the lattice-lower endpoint along
                    // the one axis where the two differ.
                    let axis = (0..3).find(|&a| p1[a] != p2[a]).expect("distinct corners");
                    let (lo, hi) = if p1[axis] < p2[axis] { (p1, p2) } else { (p2, p1) };
                    let key = (lo[0], lo[1], lo[2], axis as u8);
                    let idx = *edge_cache.entry(key).or_insert_with(|| {
                        let v_lo = grid.get(lo[0], lo[1], lo[2]);
                        let v_hi = grid.get(hi[0], hi[1], hi[2]);
                        let t = (iso - v_lo) / (v_hi - v_lo);
                        let a = grid.position(lo[0], lo[1], lo[2]);
                        let b = grid.position(hi[0], hi[1], hi[2]);
                        let p = [
                            a[0] + t * (b[0] - a[0]),
                            a[1] + t * (b[1] - a[1]),
                            a[2] + t * (b[2] - a[2]),
                        ];
                        vertices.push(p);
                        vertices.len() - 1
                    });
                    edge_verts[e] = idx;
                }
                let tri = &TRIANGLE_TABLE[case];
                let mut t = 0;
                while t < tri.len() && tri[t] >= 0 {
                    let a = edge_verts[tri[t] as usize];
                    let b = edge_verts[tri[t + 1] as usize];
                    let c = edge_verts[tri[t + 2] as usize];
                    debug_assert!(a != usize::MAX && b != usize::MAX && c != usize::MAX);
                    if a != b && b != c && a != c {
                        faces.push([a, b, c]);
                    }
                    t += 3;
                }
            }
        }
    }
    Ok(TriangleMesh { vertices, faces, normals: None })
}

// ---------------------------------------------------------------------------
// Normals
// ---------------------------------------------------------------------------

/// Area-weighted vertex normals: each incident face contributes its cross
/// product (twice its area times its unit normal); the sum is normalized.
/// Orientation follows face winding. A vertex with no incident face area
/// has no defined normal and is an error.
pub fn vertex_normals(mesh: &TriangleMesh) -> Result<Vec<[f64; 3]>, MeshingError> {
    if mesh.vertices.is_empty() {
        return Err(MeshingError::EmptyMesh);
    }
    mesh.validate()?;
    let mut acc = vec![[0.0f64; 3]; mesh.vertices.len()];
    for f in &mesh.faces {
        let a = mesh.vertices[f[0]];
        let b = mesh.vertices[f[1]];
        let c = mesh.vertices[f[2]];
        let n = cross(sub(b, a), sub(c, a));
        for &v in f {
            acc[v][0] += n[0];
            acc[v][1] += n[1];
            acc[v][2] += n[2];
        }
    }
    acc.iter()
        .enumerate()
        .map(|(index, n)| {
            let len = norm(*n);
            if len == 0.0 {
                Err(MeshingError::IsolatedVertex { index })
            } else {
                Ok([n[0] / len, n[1] / len, n[2] / len])
            }
        })
        .collect()
}

/// Attach area-weighted vertex normals to a mesh.
pub fn with_normals(mut mesh: TriangleMesh) -> Result<TriangleMesh, MeshingError> {
    mesh.normals = Some(vertex_normals(&mesh)?);
    Ok(mesh)
}

// ---------------------------------------------------------------------------
// OBJ serialization
// ---------------------------------------------------------------------------

/// ASCII OBJ text: one `v x y z` line per vertex (shortest round-tripping
/// float form, so import is bit-exact) then one 1-based `f i j k` line per
/// face.
pub fn mesh_to_obj(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        s.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    s
}

/// Parse ASCII OBJ: `v` and triangular `f` records (index-only or
/// slash-qualified); comments and foreign directives are ignored.
/// Errors carry 1-based line numbers.
pub fn mesh_from_obj(text: &str) -> Result<TriangleMesh, MeshingError> {
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let err = |line: usize, reason: String| MeshingError::ObjParse { line, reason };
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let mut it = raw.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<&str> = it.collect();
                if coords.len() != 3 {
                    return Err(err(line, format!("vertex needs 3 coordinates, got {}", coords.len())));
                }
                let mut v = [0.0; 3];
                for (a, c) in v.iter_mut().zip(&coords) {
                    *a = c
                        .parse::<f64>()
                        .map_err(|_| err(line, format!("bad coordinate {c:?}")))?;
                    if !a.is_finite() {
                        return Err(err(line, format!("non-finite coordinate {c:?}")));
                    }
                }
                vertices.push(v);
            }
            Some("f") => {
                let tokens: Vec<&str> = it.collect();
                if tokens.len() != 3 {
                    return Err(err(line, format!("face needs 3 vertices, got {}", tokens.len())));
                }
                let mut f = [0usize; 3];
                for (slot, tok) in f.iter_mut().zip(&tokens) {
                    let first = tok.split('/').next().unwrap_or("");
                    let idx: usize = first
                        .parse()
                        .map_err(|_| err(line, format!("bad face index {tok:?}")))?;
                    if idx == 0 {
                        return Err(err(line, "face indices are 1-based".to_string()));
                    }
                    *slot = idx - 1;
                }
                faces.push(f);
            }
            _ => continue,
        }
    }
    let mesh = TriangleMesh { vertices, faces, normals: None };
    if let Err(MeshingError::FaceIndexOutOfRange { face, index, count }) = mesh.validate() {
        return Err(MeshingError::FaceIndexOutOfRange { face, index, count });
    }
    Ok(mesh)
}

/// Validate and write a mesh as ASCII OBJ.
pub fn export_mesh(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshingError> {
    mesh.validate()?;
    fs::write(path, mesh_to_obj(mesh))?;
    Ok(())
}

/// Read an ASCII OBJ mesh.
pub fn import_mesh(path: &Path) -> Result<TriangleMesh, MeshingError> {
    let text = fs::read_to_string(path)?;
    mesh_from_obj(&text)
}

// ---------------------------------------------------------------------------
// Grid persistence
// ---------------------------------------------------------------------------

/// Store a grid in the binary tensor container (values at 32-bit
/// precision, the storage contract for all artifacts).
pub fn save_grid(path: &Path, grid: &ScalarGrid) -> Result<(), CheckpointError> {
    let [nx, ny, nz] = grid.dims();
    let records = [
        TensorRecord::new("values", vec![nx, ny, nz], grid.values().iter().map(|&v| v as f32).collect()),
        TensorRecord::new("origin", vec![3], grid.origin().iter().map(|&v| v as f32).collect()),
        TensorRecord::new("step", vec![3], grid.step().iter().map(|&v| v as f32).collect()),
    ];
    checkpoint::write_tensor_file(path, &records)
}

/// Load a grid stored by [`save_grid`].
pub fn load_grid(path: &Path) -> Result<ScalarGrid, MeshingError> {
    let records = checkpoint::read_tensor_file(path)?;
    let find = |name: &str| {
        records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| MeshingError::Tensor(CheckpointError::Model(
                OccupancyError::MissingTensor { name: name.to_string() },
            )))
    };
    let values = find("values")?;
    if values.dims.len() != 3 {
        return Err(MeshingError::BadDims { dims: [0, 0, 0] });
    }
    let dims = [values.dims[0], values.dims[1], values.dims[2]];
    let origin = find("origin")?;
    let step = find("step")?;
    let take3 = |r: &TensorRecord| -> [f64; 3] {
        [r.data[0] as f64, r.data[1] as f64, r.data[2] as f64]
    };
    ScalarGrid::from_values(
        dims,
        take3(origin),
        take3(step),
        values.data.iter().map(|&v| v as f64).collect(),
    )
}

// ---------------------------------------------------------------------------
// Parity rasterization
// ---------------------------------------------------------------------------

/// Rasterize a closed mesh onto the unit-cube voxel lattice by z-column
/// parity: a cell is inside when an odd number of surface crossings lie
/// below its center. Assumes generic position (no column passing exactly
/// through a vertex or edge); choose dims misaligned with the extraction
/// lattice.
pub fn rasterize_mesh(mesh: &TriangleMesh, dims: [usize; 3]) -> VoxelGrid {
    assert!(dims.iter().all(|&d| d > 0), "raster dims must be positive");
    let [nx, ny, nz] = dims;
    let center = |i: usize, n: usize| -0.5 + (i as f64 + 0.5) / n as f64;
    let mut values = vec![false; nx * ny * nz];
    for ix in 0..nx {
        let x = center(ix, nx);
        for iy in 0..ny {
            let y = center(iy, ny);
            let mut zs: Vec<f64> = Vec::new();
            for f in &mesh.faces {
                let a = mesh.vertices[f[0]];
                let b = mesh.vertices[f[1]];
                let c = mesh.vertices[f[2]];
                let d = [b[0] - a[0], b[1] - a[1]];
                let e = [c[0] - a[0], c[1] - a[1]];
                let det = d[0] * e[1] - d[1] * e[0];
                if det == 0.0 {
                    continue; // triangle vertical in z; measure-zero contribution
                }
                let q = [x - a[0], y - a[1]];
                let u = (q[0] * e[1] - q[1] * e[0]) / det;
                let v = (d[0] * q[1] - d[1] * q[0]) / det;
                if u >= 0.0 && v >= 0.0 && u + v <= 1.0 {
                    zs.push(a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2]));
                }
            }
            for iz in 0..nz {
                let cz = center(iz, nz);
                let below = zs.iter().filter(|&&z| z < cz).count();
                values[(ix * ny + iy) * nz + iz] = below % 2 == 1;
            }
        }
    }
    VoxelGrid::from_values(dims, values).expect("dims validated")
}
