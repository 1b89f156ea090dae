//! Reconstruction quality metrics: volumetric IoU and precision over voxel
//! grids, Chamfer-L1 distance and normal consistency over sampled
//! surfaces, plus the end-to-end evaluation protocol and mean/std
//! aggregation. Nearest-neighbor queries run through a kd-tree whose
//! results are checked against the public brute-force oracle.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionVector;
use crate::meshing::{eval_grid, marching_cubes, MeshingError, ScalarGrid, TriangleMesh};
use crate::occupancy::{OccupancyError, OccupancyModel};
use crate::par;
use crate::synth::{voxelize, ToothShapeOracle, VoxelGrid};

/// What can go wrong while scoring a reconstruction.
#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("grids have different dims: {a:?} vs {b:?}")]
    DimMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("precision is undefined for an empty prediction grid")]
    EmptyPrediction,
    #[error("surface sample set needs at least one point")]
    EmptySamples,
    #[error("points and normals differ in length: {points} vs {normals}")]
    SampleShape { points: usize, normals: usize },
    #[error("normal {index} is not unit length (norm {norm})")]
    NonUnitNormal { index: usize, norm: f64 },
    #[error("mesh has no faces to sample")]
    NoFaces,
    #[error("mesh has zero total surface area")]
    ZeroArea,
    #[error("requested zero surface samples")]
    ZeroSampleCount,
    #[error("ground-truth shape is empty at this resolution")]
    EmptyGroundTruth,
    #[error("probability grid dims {got:?} do not match padded resolution {expected:?}")]
    GridShape { got: [usize; 3], expected: [usize; 3] },
    #[error(transparent)]
    Meshing(#[from] MeshingError),
    #[error(transparent)]
    Occupancy(#[from] OccupancyError),
}

// ---------------------------------------------------------------------------
// Volumetric metrics
// ---------------------------------------------------------------------------

/// Intersection over union of two occupancy grids on the same lattice.
/// Two empty grids are identical, so their IoU is 1.
pub fn volumetric_iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64, MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimMismatch { a: a.dims(), b: b.dims() });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.values().iter().zip(b.values()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Fraction of predicted-occupied cells that are also ground-truth
/// occupied: |D ∩ G| / |D|. Undefined (an error) when D is empty.
pub fn volumetric_precision(d: &VoxelGrid, g: &VoxelGrid) -> Result<f64, MetricsError> {
    if d.dims() != g.dims() {
        return Err(MetricsError::DimMismatch { a: d.dims(), b: g.dims() });
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in d.values().iter().zip(g.values()) {
        total += usize::from(x);
        inter += usize::from(x && y);
    }
    if total == 0 {
        return Err(MetricsError::EmptyPrediction);
    }
    Ok(inter as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Surface samples
// ---------------------------------------------------------------------------

/// Points drawn from a mesh surface with their face normals; the raw
/// material for Chamfer and normal-consistency scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSamples {
    pub points: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    /// Which mesh the samples came from (for report provenance).
    pub source: String,
}

impl SurfaceSamples {
    /// Wrap points and unit normals, enforcing the shape invariants.
    pub fn new(
        points: Vec<[f64; 3]>,
        normals: Vec<[f64; 3]>,
        source: impl Into<String>,
    ) -> Result<Self, MetricsError> {
        if points.is_empty() {
            return Err(MetricsError::EmptySamples);
        }
        if points.len() != normals.len() {
            return Err(MetricsError::SampleShape { points: points.len(), normals: normals.len() });
        }
        check_unit_normals(&normals)?;
        Ok(Self { points, normals, source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_unit_normals(normals: &[[f64; 3]]) -> Result<(), MetricsError> {
    for (index, n) in normals.iter().enumerate() {
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(MetricsError::NonUnitNormal { index, norm });
        }
    }
    Ok(())
}

/// Draw `n` points from the mesh surface, each face chosen with
/// probability proportional to its area and positions barycentric-uniform
/// within the face. Normals are the face normals. Fully seeded.
pub fn sample_surface(
    mesh: &TriangleMesh,
    n: usize,
    seed: u64,
    source: impl Into<String>,
) -> Result<SurfaceSamples, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroSampleCount);
    }
    if mesh.faces.is_empty() {
        return Err(MetricsError::NoFaces);
    }
    // Cumulative area table; zero-area faces get zero mass.
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut face_normals = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in &mesh.faces {
        let a = mesh.vertices[f[0]];
        let b = mesh.vertices[f[1]];
        let c = mesh.vertices[f[2]];
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cr = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let len = (cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2]).sqrt();
        total += len / 2.0;
        cumulative.push(total);
        if len > 0.0 {
            face_normals.push([cr[0] / len, cr[1] / len, cr[2] / len]);
        } else {
            face_normals.push([0.0, 0.0, 0.0]); // never sampled: zero mass
        }
    }
    if total <= 0.0 {
        return Err(MetricsError::ZeroArea);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.gen::<f64>() * total;
        let fi = cumulative
            .partition_point(|&c| c <= target)
            .min(mesh.faces.len() - 1);
        let f = mesh.faces[fi];
        let a = mesh.vertices[f[0]];
        let b = mesh.vertices[f[1]];
        let c = mesh.vertices[f[2]];
        // Square-root trick: uniform over the triangle.
        let su = rng.gen::<f64>().sqrt();
        let r2 = rng.gen::<f64>();
        let (w0, w1, w2) = (1.0 - su, su * (1.0 - r2), su * r2);
        points.push([
            w0 * a[0] + w1 * b[0] + w2 * c[0],
            w0 * a[1] + w1 * b[1] + w2 * c[1],
            w0 * a[2] + w1 * b[2] + w2 * c[2],
        ]);
        normals.push(face_normals[fi]);
    }
    SurfaceSamples::new(points, normals, source)
}

// ---------------------------------------------------------------------------
// Nearest neighbors
// ---------------------------------------------------------------------------

/// Static median-split kd-tree over 3D points. Construction and queries
/// are deterministic: splits break coordinate ties by original index, and
/// a query returns the minimal squared distance (ties keep the first
/// point found in traversal order — the distance itself is unambiguous).
pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    /// Permutation of point indices arranged as an implicit tree: each
    /// recursion's median sits mid-range, children in the half-ranges.
    order: Vec<u32>,
}

const KD_LEAF: usize = 8;

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [[f64; 3]]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        if !points.is_empty() {
            build_recurse(points, &mut order, 0);
        }
        Self { points, order }
    }

    /// Index of the nearest point and the squared distance to it.
    pub fn nearest(&self, q: [f64; 3]) -> (usize, f64) {
        assert!(!self.points.is_empty(), "nearest on empty tree");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.order.len(), 0, &mut best);
        best
    }

    fn search(&self, q: [f64; 3], lo: usize, hi: usize, depth: usize, best: &mut (usize, f64)) {
        if hi - lo <= KD_LEAF {
            for &i in &self.order[lo..hi] {
                let d = dist2(q, self.points[i as usize]);
                if d < best.1 {
                    *best = (i as usize, d);
                }
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let pivot = self.points[self.order[mid] as usize];
        let d = dist2(q, pivot);
        if d < best.1 {
            *best = (self.order[mid] as usize, d);
        }
        let axis = depth % 3;
        let delta = q[axis] - pivot[axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, depth + 1, best);
        if delta * delta < best.1 {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn build_recurse(points: &[[f64; 3]], order: &mut [u32], depth: usize) {
    if order.len() <= KD_LEAF {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    let (left, right) = order.split_at_mut(mid);
    build_recurse(points, left, depth + 1);
    build_recurse(points, &mut right[1..], depth + 1);
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Exhaustive nearest neighbor: the oracle the kd-tree must agree with.
pub fn nearest_brute(points: &[[f64; 3]], q: [f64; 3]) -> (usize, f64) {
    assert!(!points.is_empty(), "nearest on empty set");
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, &p) in points.iter().enumerate() {
        let d = dist2(q, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Nearest-neighbor index and squared distance for every query point,
/// computed in parallel but collected in query order.
fn all_nearest(targets: &[[f64; 3]], queries: &[[f64; 3]]) -> Vec<(usize, f64)> {
    let tree = KdTree::build(targets);
    par::map_indexed(queries.len(), |i| tree.nearest(queries[i]))
}

// ---------------------------------------------------------------------------
// Surface metrics
// ---------------------------------------------------------------------------

fn directed_chamfer(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let nn = all_nearest(to, from);
    let sum: f64 = nn.iter().map(|&(_, d2)| d2.sqrt()).sum();
    sum / from.len() as f64
}

/// Chamfer-L1: half the mean point-to-nearest distance in each direction.
/// Distances enter at power one; symmetric by construction.
pub fn chamfer_l1(p: &SurfaceSamples, q: &SurfaceSamples) -> Result<f64, MetricsError> {
    if p.is_empty() || q.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    Ok(0.5 * directed_chamfer(&p.points, &q.points) + 0.5 * directed_chamfer(&q.points, &p.points))
}

/// Brute-force Chamfer-L1: the O(n·m) oracle the kd-tree path must match.
pub fn chamfer_l1_brute(p: &SurfaceSamples, q: &SurfaceSamples) -> Result<f64, MetricsError> {
    if p.is_empty() || q.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        let sum: f64 = from.iter().map(|&x| nearest_brute(to, x).1.sqrt()).sum();
        sum / from.len() as f64
    };
    Ok(0.5 * directed(&p.points, &q.points) + 0.5 * directed(&q.points, &p.points))
}

fn directed_nc(from: &SurfaceSamples, to: &SurfaceSamples) -> f64 {
    let nn = all_nearest(&to.points, &from.points);
    let sum: f64 = nn
        .iter()
        .zip(&from.normals)
        .map(|(&(j, _), n)| {
            let m = to.normals[j];
            (n[0] * m[0] + n[1] * m[1] + n[2] * m[2]).abs()
        })
        .sum();
    sum / from.points.len() as f64
}

/// Normal consistency: mean absolute cosine between each sample's normal
/// and its Euclidean nearest neighbor's normal, averaged both ways.
/// Orientation-agnostic via the absolute value.
pub fn normal_consistency(p: &SurfaceSamples, q: &SurfaceSamples) -> Result<f64, MetricsError> {
    if p.is_empty() || q.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    check_unit_normals(&p.normals)?;
    check_unit_normals(&q.normals)?;
    Ok(0.5 * directed_nc(p, q) + 0.5 * directed_nc(q, p))
}

/// Brute-force normal consistency, for equivalence checks.
pub fn normal_consistency_brute(p: &SurfaceSamples, q: &SurfaceSamples) -> Result<f64, MetricsError> {
    if p.is_empty() || q.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    check_unit_normals(&p.normals)?;
    check_unit_normals(&q.normals)?;
    let directed = |from: &SurfaceSamples, to: &SurfaceSamples| -> f64 {
        let sum: f64 = from
            .points
            .iter()
            .zip(&from.normals)
            .map(|(&x, n)| {
                let (j, _) = nearest_brute(&to.points, x);
                let m = to.normals[j];
                (n[0] * m[0] + n[1] * m[1] + n[2] * m[2]).abs()
            })
            .sum();
        sum / from.points.len() as f64
    };
    Ok(0.5 * directed(p, q) + 0.5 * directed(q, p))
}

// ---------------------------------------------------------------------------
// End-to-end evaluation
// ---------------------------------------------------------------------------

/// Protocol knobs for scoring one reconstruction.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Cells per axis of the evaluation lattice.
    pub resolution: usize,
    /// Isolevel for extraction and probability thresholding.
    pub iso: f64,
    /// Surface samples per mesh.
    pub samples: usize,
    /// Seed for the surface samplers.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { resolution: 128, iso: 0.5, samples: 100_000, seed: 0 }
    }
}

/// Scores for one reconstruction. A prediction whose extracted mesh is
/// empty is a reconstruction failure: `failed` is set and the metrics
/// that need a surface (or a nonempty prediction set) are absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub seed: u64,
    pub resolution: usize,
    pub iso: f64,
    pub sample_count: usize,
    pub failed: bool,
    pub iou: Option<f64>,
    pub chamfer_l1: Option<f64>,
    pub normal_consistency: Option<f64>,
    pub precision: Option<f64>,
}


/// Score a model against a shape oracle: extract the isosurface at the
/// configured lattice, compare thresholded probabilities with the oracle
/// voxelization cell-by-cell, and compare seeded surface samples of the
/// two meshes. The prediction's volumetric grid comes from thresholding
/// the probability grid (cells with probability ≥ iso), not from
/// re-rasterizing the mesh, so volumetric and surface scores share one
/// source of truth.
pub fn evaluate_reconstruction(
    model: &OccupancyModel,
    cond: Option<&ConditionVector>,
    oracle: &ToothShapeOracle,
    config: &EvalConfig,
) -> Result<ReconstructionReport, MetricsError> {
    let r = config.resolution;
    let grid = eval_grid(model, cond, [r, r, r])?;
    evaluate_probability_grid(&grid, oracle, config)
}

/// The scoring core, taking the padded probability grid directly (as
/// produced by grid evaluation). Split out so the protocol can be
/// exercised with synthetic grids.
pub fn evaluate_probability_grid(
    padded: &ScalarGrid,
    oracle: &ToothShapeOracle,
    config: &EvalConfig,
) -> Result<ReconstructionReport, MetricsError> {
    let r = config.resolution;
    let expected = [r + 2, r + 2, r + 2];
    if padded.dims() != expected {
        return Err(MetricsError::GridShape { got: padded.dims(), expected });
    }

    // Volumetric comparison on the unpadded lattice.
    let mut pred_cells = Vec::with_capacity(r * r * r);
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                pred_cells.push(padded.get(i + 1, j + 1, k + 1) >= config.iso);
            }
        }
    }
    let d = VoxelGrid::from_values([r, r, r], pred_cells).expect("dims positive");
    let g = voxelize(oracle, [r, r, r]);
    if g.count_occupied() == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let iou = volumetric_iou(&d, &g)?;

    let base = ReconstructionReport {
        seed: config.seed,
        resolution: r,
        iso: config.iso,
        sample_count: config.samples,
        failed: false,
        iou: Some(iou),
        chamfer_l1: None,
        normal_consistency: None,
        precision: None,
    };

    let pred_mesh = marching_cubes(padded, config.iso)?;
    if pred_mesh.faces.is_empty() {
        return Ok(ReconstructionReport { failed: true, ..base });
    }
    let precision = volumetric_precision(&d, &g)?;

    // Ground-truth surface: the isosurface of the indicator field on the
    // same lattice, so a model that reproduces the oracle exactly on the
    // lattice yields the identical mesh.
    let origin = [-0.5 + 0.5 / r as f64; 3];
    let step = [1.0 / r as f64; 3];
    let indicator: Vec<f64> = g.values().iter().map(|&v| f64::from(u8::from(v))).collect();
    let gt_grid = ScalarGrid::from_values([r, r, r], origin, step, indicator)?.pad_with_zeros();
    let gt_mesh = marching_cubes(&gt_grid, config.iso)?;

    // Both meshes are sampled with the same seed (common random numbers):
    // a prediction identical to the ground truth then scores exactly zero
    // Chamfer and unit normal consistency instead of sampling noise.
    let sp = sample_surface(&pred_mesh, config.samples, config.seed, "prediction")?;
    let sg = sample_surface(&gt_mesh, config.samples, config.seed, "ground_truth")?;
    let chamfer = chamfer_l1(&sp, &sg)?;
    let nc = normal_consistency(&sp, &sg)?;

    Ok(ReconstructionReport {
        chamfer_l1: Some(chamfer),
        normal_consistency: Some(nc),
        precision: Some(precision),
        ..base
    })
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Mean and spread of one metric over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub seeds: Vec<u64>,
}

fn summarize(values: &[(u64, f64)]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&(_, v)| v).sum::<f64>() / n;
    // Population std: defined for a single run and stable to report.
    let var = values.iter().map(|&(_, v)| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MetricSummary {
        mean,
        std: var.sqrt(),
        runs: values.len(),
        seeds: values.iter().map(|&(s, _)| s).collect(),
    })
}

/// Pool repeated reports into {metric → {mean, std, runs, seeds}}. All
/// teeth and repetitions are pooled together (no per-case averaging);
/// failed reconstructions contribute to `failure_rate` and to whichever
/// metrics they still define.
pub fn aggregate(reports: &[ReconstructionReport]) -> BTreeMap<String, MetricSummary> {
    let mut out = BTreeMap::new();
    let collect = |f: fn(&ReconstructionReport) -> Option<f64>| -> Vec<(u64, f64)> {
        reports
            .iter()
            .filter_map(|r| f(r).map(|v| (r.seed, v)))
            .collect()
    };
    let entries: [(&str, Vec<(u64, f64)>); 5] = [
        ("iou", collect(|r| r.iou)),
        ("chamfer_l1", collect(|r| r.chamfer_l1)),
        ("normal_consistency", collect(|r| r.normal_consistency)),
        ("precision", collect(|r| r.precision)),
        (
            "failure_rate",
            reports.iter().map(|r| (r.seed, f64::from(u8::from(r.failed)))).collect(),
        ),
    ];
    for (name, values) in entries {
        if let Some(summary) = summarize(&values) {
            out.insert(name.to_string(), summary);
        }
    }
    out
}

/// Serialize an aggregate as pretty JSON with a trailing newline.
pub fn aggregate_to_json(summary: &BTreeMap<String, MetricSummary>) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}
