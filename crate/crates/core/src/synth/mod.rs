//! Procedural tooth corpus: analytic per-class shapes, voxelization,
//! occupancy point sampling, projection patches, multi-channel scene
//! renderings, and persisted datasets.
//!
//! Every shape is the union of a superellipsoid crown and one or more
//! tapered-cone roots, fully determined by `(class, seed)`. All geometry
//! lives in the `[-0.5, 0.5]^3` cube with +z occlusal (crown up) and the
//! projection axis +y.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError, TensorRecord};
use crate::conditioning::{ConditioningError, PatchImage, PATCH_SIZE};
use crate::occupancy::FitSample;
use crate::par;

/// Default voxelization dims: anisotropic cells, isotropic cube coordinates.
pub const VOXEL_DIMS: [usize; 3] = [144, 80, 80];

/// Default number of occupancy sample points per shape.
pub const DEFAULT_POINT_COUNT: usize = 100_000;

/// Line-integral resolution along the projection axis.
pub const PROJECTION_STEPS: usize = 128;

/// Scene bitmap width in pixels.
pub const SCENE_WIDTH: usize = 768;

/// Scene bitmap height in pixels.
pub const SCENE_HEIGHT: usize = 256;

/// Horizontal stride between scene slots; adjacent 64-px tiles overlap 16 px.
pub const SCENE_SLOT_STRIDE: usize = 48;

/// What can go wrong while building scenes or datasets.
#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("duplicate tooth class {0} in scene")]
    DuplicateClass(ToothClass),
    #[error("invalid dataset config: {reason}")]
    InvalidConfig { reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("tensor file error: {0}")]
    Tensor(#[from] CheckpointError),
    #[error("patch error: {0}")]
    Patch(#[from] ConditioningError),
    #[error("dataset sample {id}: {reason}")]
    BadSample { id: String, reason: String },
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Classes and families
// ---------------------------------------------------------------------------

/// Universal-numbering tooth class, 1..=32. 1-16 upper arch, 17-32 lower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ToothClass(u8);

impl ToothClass {
    pub fn new(value: u8) -> Option<Self> {
        (1..=32).contains(&value).then_some(Self(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Zero-based index used for table lookups.
    pub fn index0(self) -> usize {
        self.0 as usize - 1
    }

    /// Classes 1-16 are the upper arch.
    pub fn is_upper(self) -> bool {
        self.0 <= 16
    }

    pub fn family(self) -> ToothFamily {
        ToothFamily::of(self)
    }
}

impl std::fmt::Display for ToothClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Anatomical family, which fixes the base geometry and root count range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToothFamily {
    /// Incisors and canines (universal numbers 6-11 and 22-27): one root.
    Anterior,
    /// Universal numbers 4-5, 12-13, 20-21, 28-29: one or two roots.
    Premolar,
    /// Universal numbers 1-3, 14-16, 17-19, 30-32: two or three roots.
    Molar,
}

impl ToothFamily {
    pub fn of(class: ToothClass) -> Self {
        // Position within one arch quadrant-pair: 1-16 and 17-32 repeat the
        // same molar/premolar/anterior/premolar/molar run.
        let p = if class.0 <= 16 { class.0 } else { 33 - class.0 };
        match p {
            6..=11 => Self::Anterior,
            4 | 5 | 12 | 13 => Self::Premolar,
            _ => Self::Molar,
        }
    }

    /// Inclusive root-count range for the family.
    pub fn root_count_range(self) -> (usize, usize) {
        match self {
            Self::Anterior => (1, 1),
            Self::Premolar => (1, 2),
            Self::Molar => (2, 3),
        }
    }
}

// ---------------------------------------------------------------------------
// Analytic primitives
// ---------------------------------------------------------------------------

/// Superellipsoid solid: inside iff
/// `((|x'|^(2/e2) + |y'|^(2/e2))^(e2/e1) + |z'|^(2/e1)) <= 1`
/// with primed coordinates centered and scaled by the semi-axes. `e1 = e2
/// = 1` gives an ellipsoid; smaller exponents give blockier shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Superellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// North-south (z) squareness exponent.
    pub e1: f64,
    /// East-west (x-y) squareness exponent.
    pub e2: f64,
}

impl Superellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let x = ((p[0] - self.center[0]) / self.semi_axes[0]).abs();
        let y = ((p[1] - self.center[1]) / self.semi_axes[1]).abs();
        let z = ((p[2] - self.center[2]) / self.semi_axes[2]).abs();
        let xy = x.powf(2.0 / self.e2) + y.powf(2.0 / self.e2);
        xy.powf(self.e2 / self.e1) + z.powf(2.0 / self.e1) <= 1.0
    }
}

/// One root as stored in a spec: a vertical cone hanging from the crown
/// center plane, its axis through `apex_offset` in the x-y plane, linearly
/// tapering from `base_radius` to a point over `length`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootSpec {
    pub apex_offset: [f64; 2],
    pub base_radius: f64,
    pub length: f64,
}

/// A root resolved into world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
struct TaperedCone {
    axis: [f64; 2],
    base_z: f64,
    base_radius: f64,
    length: f64,
}

impl TaperedCone {
    fn contains(&self, p: [f64; 3]) -> bool {
        let down = self.base_z - p[2];
        if down < 0.0 || down > self.length {
            return false;
        }
        let r = self.base_radius * (1.0 - down / self.length);
        let dx = p[0] - self.axis[0];
        let dy = p[1] - self.axis[1];
        dx * dx + dy * dy <= r * r
    }
}

/// Fully resolved generation parameters for one tooth.
#[derive(Debug, Clone, PartialEq)]
pub struct ToothSpec {
    pub class: ToothClass,
    pub crown: Superellipsoid,
    pub roots: Vec<RootSpec>,
    pub seed: u64,
}

impl ToothSpec {
    /// The analytic occupancy function for this spec.
    pub fn oracle(&self) -> ToothShapeOracle {
        let roots = self
            .roots
            .iter()
            .map(|r| TaperedCone {
                axis: r.apex_offset,
                base_z: self.crown.center[2],
                base_radius: r.base_radius,
                length: r.length,
            })
            .collect();
        ToothShapeOracle { crown: Some(self.crown), roots }
    }
}

/// Analytic occupancy function: 1 inside the union of the primitives and
/// the cube, 0 everywhere else (including everywhere outside the cube).
#[derive(Debug, Clone, PartialEq)]
pub struct ToothShapeOracle {
    crown: Option<Superellipsoid>,
    roots: Vec<TaperedCone>,
}

impl ToothShapeOracle {
    /// An oracle that is 0 everywhere.
    pub fn empty() -> Self {
        Self { crown: None, roots: Vec::new() }
    }

    /// A sphere centered at the origin; the test and demo shape.
    pub fn sphere(radius: f64) -> Self {
        Self {
            crown: Some(Superellipsoid {
                center: [0.0; 3],
                semi_axes: [radius; 3],
                e1: 1.0,
                e2: 1.0,
            }),
            roots: Vec::new(),
        }
    }

    pub fn occupied(&self, p: [f64; 3]) -> bool {
        if p.iter().any(|v| v.abs() > 0.5) {
            return false;
        }
        if let Some(c) = &self.crown {
            if c.contains(p) {
                return true;
            }
        }
        self.roots.iter().any(|r| r.contains(p))
    }

    pub fn occupancy(&self, p: [f64; 3]) -> f64 {
        if self.occupied(p) {
            1.0
        } else {
            0.0
        }
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Family geometry defaults, jittered per shape by up to +/-15%.
struct FamilyDefaults {
    crown_z: f64,
    semi_axes: [f64; 3],
    e1: f64,
    e2: f64,
    root_radius: f64,
    root_length: f64,
}

fn family_defaults(family: ToothFamily) -> FamilyDefaults {
    match family {
        ToothFamily::Anterior => FamilyDefaults {
            crown_z: 0.22,
            semi_axes: [0.16, 0.12, 0.18],
            e1: 0.8,
            e2: 0.7,
            root_radius: 0.08,
            root_length: 0.55,
        },
        ToothFamily::Premolar => FamilyDefaults {
            crown_z: 0.24,
            semi_axes: [0.20, 0.17, 0.16],
            e1: 0.65,
            e2: 0.6,
            root_radius: 0.07,
            root_length: 0.48,
        },
        ToothFamily::Molar => FamilyDefaults {
            crown_z: 0.25,
            semi_axes: [0.26, 0.22, 0.17],
            e1: 0.5,
            e2: 0.5,
            root_radius: 0.065,
            root_length: 0.44,
        },
    }
}

/// Unjittered root-axis positions for a given family and root count.
fn root_axes(family: ToothFamily, count: usize) -> Vec<[f64; 2]> {
    match (family, count) {
        (ToothFamily::Anterior, _) | (_, 1) => vec![[0.0, 0.0]],
        (ToothFamily::Premolar, _) => vec![[0.055, 0.0], [-0.055, 0.0]],
        (ToothFamily::Molar, 2) => vec![[0.09, 0.0], [-0.09, 0.0]],
        (ToothFamily::Molar, _) => vec![[0.09, 0.05], [-0.09, 0.05], [0.0, -0.075]],
    }
}

/// Mix a class into a stream seed so each (class, seed) pair draws an
/// independent jitter stream (splitmix64 finalizer).
fn mix_seed(class: ToothClass, seed: u64) -> u64 {
    let mut z = seed ^ (class.value() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn jitter<R: Rng>(rng: &mut R, v: f64) -> f64 {
    v * (0.85 + 0.30 * rng.gen::<f64>())
}

/// Deterministically generate one tooth: family defaults jittered within
/// +/-15%, root count drawn from the family range. The draw order is fixed
/// (semi-axes, exponents, root count, then per-root axis/radius/length), so
/// identical `(class, seed)` pairs always produce identical specs.
pub fn generate_tooth(class: ToothClass, seed: u64) -> (ToothSpec, ToothShapeOracle) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(class, seed));
    let family = class.family();
    let d = family_defaults(family);

    let semi_axes = [
        jitter(&mut rng, d.semi_axes[0]),
        jitter(&mut rng, d.semi_axes[1]),
        jitter(&mut rng, d.semi_axes[2]),
    ];
    let e1 = jitter(&mut rng, d.e1);
    let e2 = jitter(&mut rng, d.e2);

    let (lo, hi) = family.root_count_range();
    let coin = rng.gen::<f64>();
    let count = if hi > lo && coin < 0.5 { hi } else { lo };

    let roots = root_axes(family, count)
        .into_iter()
        .map(|axis| RootSpec {
            apex_offset: [jitter(&mut rng, axis[0]), jitter(&mut rng, axis[1])],
            base_radius: jitter(&mut rng, d.root_radius),
            length: jitter(&mut rng, d.root_length),
        })
        .collect();

    let spec = ToothSpec {
        class,
        crown: Superellipsoid {
            center: [0.0, 0.0, d.crown_z],
            semi_axes,
            e1,
            e2,
        },
        roots,
        seed,
    };
    let oracle = spec.oracle();
    (spec, oracle)
}

// ---------------------------------------------------------------------------
// Voxelization
// ---------------------------------------------------------------------------

/// Binary voxel grid over the cube. Cell centers span `[-0.5, 0.5]` per
/// axis independently: axis of `n` cells puts center `i` at
/// `-0.5 + (i + 0.5) / n`, so anisotropic dims give anisotropic cells over
/// isotropic coordinates. Values are stored row-major with x outermost and
/// z innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    values: Vec<bool>,
}

impl VoxelGrid {
    pub fn from_values(dims: [usize; 3], values: Vec<bool>) -> Result<Self, SynthError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(SynthError::InvalidConfig { reason: "voxel dims must be positive".into() });
        }
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(SynthError::InvalidConfig {
                reason: format!("expected {} voxel values, got {}", n, values.len()),
            });
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> bool {
        self.values[self.index(ix, iy, iz)]
    }

    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            -0.5 + (ix as f64 + 0.5) / self.dims[0] as f64,
            -0.5 + (iy as f64 + 0.5) / self.dims[1] as f64,
            -0.5 + (iz as f64 + 0.5) / self.dims[2] as f64,
        ]
    }

    pub fn count_occupied(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Evaluate the oracle at every cell center.
pub fn voxelize(oracle: &ToothShapeOracle, dims: [usize; 3]) -> VoxelGrid {
    assert!(dims.iter().all(|&d| d > 0), "voxel dims must be positive");
    let [nx, ny, nz] = dims;
    let values = par::map_indexed(nx * ny * nz, |i| {
        let iz = i % nz;
        let iy = (i / nz) % ny;
        let ix = i / (nz * ny);
        let p = [
            -0.5 + (ix as f64 + 0.5) / nx as f64,
            -0.5 + (iy as f64 + 0.5) / ny as f64,
            -0.5 + (iz as f64 + 0.5) / nz as f64,
        ];
        oracle.occupied(p)
    });
    VoxelGrid { dims, values }
}

// ---------------------------------------------------------------------------
// Point sampling
// ---------------------------------------------------------------------------

/// Seeded uniform occupancy samples. Coordinates are quantized to f32 at
/// draw time and labels are evaluated at the quantized position, so
/// re-evaluating the oracle at the stored points reproduces the stored
/// labels exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSampleSet {
    pub points: Vec<[f32; 3]>,
    /// One 0/1 label per point.
    pub labels: Vec<u8>,
    pub seed: u64,
}

/// Draw `t` points uniformly from the cube and label them with the oracle.
pub fn sample_points(oracle: &ToothShapeOracle, t: usize, seed: u64) -> PointSampleSet {
    assert!(t >= 1, "point count must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(t);
    let mut labels = Vec::with_capacity(t);
    for _ in 0..t {
        let p = [
            (rng.gen::<f64>() - 0.5) as f32,
            (rng.gen::<f64>() - 0.5) as f32,
            (rng.gen::<f64>() - 0.5) as f32,
        ];
        let q = [p[0] as f64, p[1] as f64, p[2] as f64];
        points.push(p);
        labels.push(oracle.occupied(q) as u8);
    }
    PointSampleSet { points, labels, seed }
}

// ---------------------------------------------------------------------------
// Projection rendering
// ---------------------------------------------------------------------------

/// Parallel projection along +y: pixel (row, col) integrates occupancy over
/// [`PROJECTION_STEPS`] samples of y at `x = -0.5 + (col + 0.5) /
/// resolution`, `z = 0.5 - (row + 0.5) / resolution` (row 0 is the top of
/// the shape). The image is max-normalized to [0, 1]; an empty shape gives
/// all zeros.
pub fn render_projection(oracle: &ToothShapeOracle, resolution: usize) -> Vec<f64> {
    assert!(resolution >= 1, "projection resolution must be at least 1");
    let mut img = par::map_indexed(resolution * resolution, |i| {
        let row = i / resolution;
        let col = i % resolution;
        let x = -0.5 + (col as f64 + 0.5) / resolution as f64;
        let z = 0.5 - (row as f64 + 0.5) / resolution as f64;
        let hits = (0..PROJECTION_STEPS)
            .filter(|&s| {
                let y = -0.5 + (s as f64 + 0.5) / PROJECTION_STEPS as f64;
                oracle.occupied([x, y, z])
            })
            .count();
        hits as f64 / PROJECTION_STEPS as f64
    });
    let max = img.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        for v in &mut img {
            *v /= max;
        }
    }
    img
}

/// The 64x64 conditioning patch for one shape.
pub fn render_patch(oracle: &ToothShapeOracle) -> PatchImage {
    PatchImage::new(render_projection(oracle, PATCH_SIZE))
        .expect("projection is always a valid patch")
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

/// A multi-channel segmentation rendering over one pixel grid: binary
/// silhouette channels keyed by tooth class (absent classes are implicit
/// all-zero channels) plus the background channel, the complement of the
/// union of all silhouettes.
#[derive(Debug, Clone)]
pub struct SegmentationScene {
    pub width: usize,
    pub height: usize,
    /// Background channel: 1.0 where no tooth projects, else 0.0.
    pub background: Vec<f64>,
    /// (class, row-major binary silhouette) pairs in ascending class order.
    pub channels: Vec<(ToothClass, Vec<f64>)>,
}

/// Top-left (row, col) of the 64x64 tile for a class under the default
/// two-band arch layout: uppers on the top band in class order, lowers on
/// the bottom band mirrored so opposing teeth share a column.
pub fn default_tile_origin(class: ToothClass) -> [isize; 2] {
    let slot = if class.is_upper() {
        class.index0()
    } else {
        32 - class.value() as usize
    };
    let col = (slot * SCENE_SLOT_STRIDE) as isize - 8;
    let row = if class.is_upper() { 48 } else { 144 };
    [row, col]
}

/// Render teeth into one scene at explicit tile origins (row, col), which
/// may hang off the canvas; out-of-canvas pixels are clipped. Returns the
/// max-normalized intensity image and the per-class silhouette channels.
pub fn make_scene(
    teeth: &[(ToothSpec, [isize; 2])],
) -> Result<(Vec<f64>, SegmentationScene), SynthError> {
    let mut seen = BTreeSet::new();
    for (spec, _) in teeth {
        if !seen.insert(spec.class) {
            return Err(SynthError::DuplicateClass(spec.class));
        }
    }
    let n = SCENE_WIDTH * SCENE_HEIGHT;
    let mut px = vec![0.0; n];
    let mut channels: Vec<(ToothClass, Vec<f64>)> = Vec::with_capacity(teeth.len());
    let mut order: Vec<usize> = (0..teeth.len()).collect();
    order.sort_by_key(|&i| teeth[i].0.class);
    for &i in &order {
        let (spec, origin) = &teeth[i];
        let proj = render_projection(&spec.oracle(), PATCH_SIZE);
        let mut chan = vec![0.0; n];
        for tr in 0..PATCH_SIZE {
            let r = origin[0] + tr as isize;
            if r < 0 || r >= SCENE_HEIGHT as isize {
                continue;
            }
            for tc in 0..PATCH_SIZE {
                let c = origin[1] + tc as isize;
                if c < 0 || c >= SCENE_WIDTH as isize {
                    continue;
                }
                let v = proj[tr * PATCH_SIZE + tc];
                let at = r as usize * SCENE_WIDTH + c as usize;
                px[at] += v;
                if v > 0.0 {
                    chan[at] = 1.0;
                }
            }
        }
        channels.push((spec.class, chan));
    }
    let max = px.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        for v in &mut px {
            *v /= max;
        }
    }
    let mut background = vec![1.0; n];
    for (_, chan) in &channels {
        for (b, &c) in background.iter_mut().zip(chan) {
            if c > 0.0 {
                *b = 0.0;
            }
        }
    }
    let seg = SegmentationScene {
        width: SCENE_WIDTH,
        height: SCENE_HEIGHT,
        background,
        channels,
    };
    Ok((px, seg))
}

/// [`make_scene`] with every tooth at its default arch slot.
pub fn make_arch_scene(specs: &[ToothSpec]) -> Result<(Vec<f64>, SegmentationScene), SynthError> {
    let placed: Vec<(ToothSpec, [isize; 2])> = specs
        .iter()
        .map(|s| (s.clone(), default_tile_origin(s.class)))
        .collect();
    make_scene(&placed)
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Which split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?} (expected train/val/test)")),
        }
    }
}

/// Generation plan for a persisted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Universal tooth numbers to generate, all distinct.
    pub classes: Vec<u8>,
    pub n_per_class: usize,
    pub seed: u64,
    /// Occupancy samples per shape.
    pub point_count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: (1..=16).collect(),
            n_per_class: 20,
            seed: 0,
            point_count: DEFAULT_POINT_COUNT,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |reason: String| Err(SynthError::InvalidConfig { reason });
        if self.classes.is_empty() {
            return invalid("classes must be non-empty".into());
        }
        let mut seen = BTreeSet::new();
        for &c in &self.classes {
            if ToothClass::new(c).is_none() {
                return invalid(format!("tooth class {c} out of range 1..=32"));
            }
            if !seen.insert(c) {
                return invalid(format!("duplicate tooth class {c}"));
            }
        }
        if self.n_per_class == 0 {
            return invalid("n_per_class must be at least 1".into());
        }
        if self.point_count == 0 {
            return invalid("point_count must be at least 1".into());
        }
        Ok(())
    }
}

/// One manifest row. The geometry is not stored: `(class, seed)` fully
/// determines the shape via [`generate_tooth`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub class: u8,
    pub seed: u64,
    pub split: String,
    pub points_file: String,
    pub patch_file: String,
}

/// Dataset index, serialized as pretty JSON with a fixed field order so
/// identical configs produce byte-identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub n_per_class: usize,
    pub point_count: usize,
    pub classes: Vec<u8>,
    pub split_policy: String,
    pub samples: Vec<ManifestSample>,
}

const MANIFEST_FORMAT: &str = "toothrec-dataset-v1";
const SPLIT_POLICY: &str =
    "val=round(0.05*N), test=round(0.18*N), train=remainder; assignment by seeded shuffle";
const SPLIT_SALT: u64 = 0x51DE_57A7;

/// Per-sample generation seed, decorrelated from neighbors.
fn sample_seed(dataset_seed: u64, class: ToothClass, index: usize) -> u64 {
    mix_seed(class, dataset_seed ^ ((index as u64) << 8).wrapping_add(0xA5A5_5A5A))
}

/// Assign splits by seeded shuffle: `round(0.05 N)` to val, `round(0.18 N)`
/// to test, the rest to train (a single-sample dataset is all train).
fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let val_n = (0.05 * n as f64).round() as usize;
    let test_n = (0.18 * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; n];
    for &i in order.iter().take(val_n) {
        splits[i] = Split::Val;
    }
    for &i in order.iter().skip(val_n).take(test_n) {
        splits[i] = Split::Test;
    }
    splits
}

/// Generate and persist a dataset: per-sample point tensors (container
/// format, tensors `points` [T,3] and `labels` [T]), projection patches as
/// PGM, and a JSON manifest written last so a failed build leaves no
/// manifest behind.
pub fn dataset_build(dir: &Path, config: &DatasetConfig) -> Result<Manifest, SynthError> {
    config.validate()?;
    let points_dir = dir.join("points");
    let patches_dir = dir.join("patches");
    fs::create_dir_all(&points_dir).map_err(io_at(&points_dir))?;
    fs::create_dir_all(&patches_dir).map_err(io_at(&patches_dir))?;

    let mut keys = Vec::new();
    for &c in &config.classes {
        let class = ToothClass::new(c).expect("validated");
        for k in 0..config.n_per_class {
            keys.push((class, k));
        }
    }
    let splits = assign_splits(keys.len(), config.seed);

    let mut samples = Vec::with_capacity(keys.len());
    for ((class, k), split) in keys.into_iter().zip(splits) {
        let seed = sample_seed(config.seed, class, k);
        let (_, oracle) = generate_tooth(class, seed);
        let id = format!("c{:02}_s{:03}", class.value(), k);
        let points_file = format!("points/{id}.ocdt");
        let patch_file = format!("patches/{id}.pgm");

        let set = sample_points(&oracle, config.point_count, seed);
        let flat: Vec<f32> = set.points.iter().flat_map(|p| p.iter().copied()).collect();
        let labels: Vec<f32> = set.labels.iter().map(|&l| l as f32).collect();
        let records = [
            TensorRecord::new("points", vec![set.points.len(), 3], flat),
            TensorRecord::new("labels", vec![set.labels.len()], labels),
        ];
        checkpoint::write_tensor_file(&dir.join(&points_file), &records)?;
        render_patch(&oracle).write_pgm(&dir.join(&patch_file))?;

        samples.push(ManifestSample {
            id,
            class: class.value(),
            seed,
            split: split.as_str().to_string(),
            points_file,
            patch_file,
        });
    }

    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        seed: config.seed,
        n_per_class: config.n_per_class,
        point_count: config.point_count,
        classes: config.classes.clone(),
        split_policy: SPLIT_POLICY.to_string(),
        samples,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_at(&path))?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Open a dataset directory by parsing its manifest.
pub fn dataset_load(dir: &Path) -> Result<Dataset, SynthError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(SynthError::InvalidConfig {
            reason: format!("unknown dataset format {:?}", manifest.format),
        });
    }
    Ok(Dataset { dir: dir.to_path_buf(), manifest })
}

impl Dataset {
    /// Manifest rows belonging to one split.
    pub fn split_samples(&self, split: Split) -> Vec<&ManifestSample> {
        self.manifest
            .samples
            .iter()
            .filter(|s| s.split == split.as_str())
            .collect()
    }

    /// Materialize one sample: patch from its PGM, points and labels from
    /// its tensor file.
    pub fn load_sample(&self, sample: &ManifestSample) -> Result<FitSample, SynthError> {
        let bad = |reason: String| SynthError::BadSample { id: sample.id.clone(), reason };
        let class = ToothClass::new(sample.class)
            .ok_or_else(|| bad(format!("class {} out of range", sample.class)))?;
        let patch = PatchImage::read_pgm(&self.dir.join(&sample.patch_file))?;
        let records = checkpoint::read_tensor_file(&self.dir.join(&sample.points_file))?;
        let find = |name: &str| {
            records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| bad(format!("missing tensor {name:?}")))
        };
        let pts = find("points")?;
        if pts.dims.len() != 2 || pts.dims[1] != 3 {
            return Err(bad(format!("points tensor has dims {:?}", pts.dims)));
        }
        let points: Vec<[f32; 3]> = pts
            .data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let lab = find("labels")?;
        if lab.dims != vec![points.len()] {
            return Err(bad(format!(
                "labels tensor has dims {:?} for {} points",
                lab.dims,
                points.len()
            )));
        }
        let labels = lab
            .data
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(0u8)
                } else if v == 1.0 {
                    Ok(1u8)
                } else {
                    Err(bad(format!("non-binary label {v}")))
                }
            })
            .collect::<Result<Vec<u8>, SynthError>>()?;
        Ok(FitSample { class, patch, points, labels })
    }

    /// Materialize every sample of one split, in manifest order.
    pub fn fit_samples(&self, split: Split) -> Result<Vec<FitSample>, SynthError> {
        self.split_samples(split)
            .into_iter()
            .map(|s| self.load_sample(s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPHERE_VOLUME: f64 = 4.0 / 3.0 * std::f64::consts::PI * 0.3 * 0.3 * 0.3;

    fn class(v: u8) -> ToothClass {
        ToothClass::new(v).unwrap()
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("toothrec_synth_{tag}_{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).unwrap();
        }
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn families_follow_universal_numbering() {
        let expect = |v: u8, f: ToothFamily| assert_eq!(class(v).family(), f, "class {v}");
        for v in [1, 2, 3, 14, 15, 16, 17, 18, 19, 30, 31, 32] {
            expect(v, ToothFamily::Molar);
        }
        for v in [4, 5, 12, 13, 20, 21, 28, 29] {
            expect(v, ToothFamily::Premolar);
        }
        for v in (6..=11).chain(22..=27) {
            expect(v, ToothFamily::Anterior);
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        for v in [8u8, 4, 1] {
            let (a, _) = generate_tooth(class(v), 42);
            let (b, _) = generate_tooth(class(v), 42);
            assert_eq!(a, b);
            let (c, _) = generate_tooth(class(v), 43);
            assert_ne!(a, c, "distinct seeds should jitter class {v} differently");
        }
    }

    #[test]
    fn root_counts_follow_class_families() {
        for v in 1..=32u8 {
            let (lo, hi) = class(v).family().root_count_range();
            let mut seen = BTreeSet::new();
            for seed in 0..20 {
                let (spec, _) = generate_tooth(class(v), seed);
                assert!(
                    (lo..=hi).contains(&spec.roots.len()),
                    "class {v} seed {seed}: {} roots outside {lo}..={hi}",
                    spec.roots.len()
                );
                seen.insert(spec.roots.len());
            }
            if hi > lo {
                assert!(seen.len() > 1, "class {v}: root count never varied over 20 seeds");
            }
        }
    }

    #[test]
    fn generated_geometry_fits_the_cube() {
        for v in 1..=32u8 {
            for seed in 0..5 {
                let (spec, oracle) = generate_tooth(class(v), seed);
                let c = &spec.crown;
                for a in 0..3 {
                    assert!(
                        c.center[a].abs() + c.semi_axes[a] <= 0.5,
                        "class {v} seed {seed}: crown exceeds cube on axis {a}"
                    );
                }
                for r in &spec.roots {
                    assert!(c.center[2] - r.length >= -0.5, "root apex below cube");
                    for a in 0..2 {
                        assert!(
                            r.apex_offset[a].abs() + r.base_radius <= 0.5,
                            "root base exceeds cube on axis {a}"
                        );
                    }
                }
                assert_eq!(oracle.occupancy(c.center), 1.0, "crown center must be inside");
                assert_eq!(oracle.occupancy([0.49, 0.49, 0.49]), 0.0, "far corner must be empty");
            }
        }
    }

    #[test]
    fn oracle_is_zero_outside_the_cube() {
        let huge = ToothShapeOracle::sphere(10.0);
        assert_eq!(huge.occupancy([0.0, 0.0, 0.0]), 1.0);
        for p in [
            [0.51, 0.0, 0.0],
            [0.0, -0.51, 0.0],
            [0.0, 0.0, 0.7],
            [10.0, 10.0, 10.0],
        ] {
            assert_eq!(huge.occupancy(p), 0.0, "point {p:?} is outside the cube");
        }
    }

    #[test]
    fn unit_exponent_superellipsoid_is_a_sphere() {
        let s = ToothShapeOracle::sphere(0.3);
        assert!(s.occupied([0.29, 0.0, 0.0]));
        assert!(!s.occupied([0.31, 0.0, 0.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let p = [
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ];
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if (r - 0.3).abs() > 1e-9 {
                assert_eq!(s.occupied(p), r < 0.3, "point {p:?} at radius {r}");
            }
        }
    }

    #[test]
    fn voxelize_matches_oracle_at_cell_centers() {
        let (_, oracle) = generate_tooth(class(3), 7);
        let grid = voxelize(&oracle, [18, 10, 10]);
        for ix in 0..18 {
            for iy in 0..10 {
                for iz in 0..10 {
                    let p = grid.cell_center(ix, iy, iz);
                    assert_eq!(grid.get(ix, iy, iz), oracle.occupied(p));
                }
            }
        }
        let empty = voxelize(&ToothShapeOracle::empty(), [6, 5, 4]);
        assert_eq!(empty.count_occupied(), 0);
    }

    #[test]
    fn voxel_grid_geometry_is_pinned() {
        let grid = voxelize(&ToothShapeOracle::empty(), [4, 2, 2]);
        assert_eq!(grid.dims(), [4, 2, 2]);
        assert_eq!(grid.cell_center(0, 0, 0), [-0.375, -0.25, -0.25]);
        assert_eq!(grid.cell_center(3, 1, 1), [0.375, 0.25, 0.25]);
        assert_eq!(grid.index(1, 0, 1), 5);
        assert!(VoxelGrid::from_values([2, 2, 2], vec![false; 7]).is_err());
        assert!(VoxelGrid::from_values([2, 0, 2], vec![]).is_err());
    }

    #[test]
    fn sphere_voxel_fraction_matches_analytic_volume() {
        let grid = voxelize(&ToothShapeOracle::sphere(0.3), [128, 128, 128]);
        let frac = grid.count_occupied() as f64 / (128.0 * 128.0 * 128.0);
        let rel = (frac - SPHERE_VOLUME).abs() / SPHERE_VOLUME;
        assert!(rel < 0.05, "fraction {frac} vs analytic {SPHERE_VOLUME}, rel err {rel}");
    }

    #[test]
    fn sample_points_is_deterministic_with_exact_labels() {
        let oracle = ToothShapeOracle::sphere(0.3);
        let a = sample_points(&oracle, 5_000, 7);
        let b = sample_points(&oracle, 5_000, 7);
        assert_eq!(a, b);
        assert_eq!(a.points.len(), 5_000);
        for (p, &l) in a.points.iter().zip(&a.labels) {
            assert!(p.iter().all(|v| v.abs() <= 0.5));
            let q = [p[0] as f64, p[1] as f64, p[2] as f64];
            assert_eq!(oracle.occupied(q) as u8, l, "stored label must match oracle at {q:?}");
        }
        let c = sample_points(&oracle, 5_000, 8);
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn sample_fraction_matches_analytic_volume_within_3_sigma() {
        let oracle = ToothShapeOracle::sphere(0.3);
        let set = sample_points(&oracle, 100_000, 11);
        let frac = set.labels.iter().map(|&l| l as f64).sum::<f64>() / 100_000.0;
        let sigma = (SPHERE_VOLUME * (1.0 - SPHERE_VOLUME) / 100_000.0).sqrt();
        assert!(
            (frac - SPHERE_VOLUME).abs() <= 3.0 * sigma,
            "fraction {frac} vs {SPHERE_VOLUME} (sigma {sigma})"
        );
    }

    #[test]
    fn projection_renders_empty_full_and_sphere_profiles() {
        let empty = render_projection(&ToothShapeOracle::empty(), PATCH_SIZE);
        assert!(empty.iter().all(|&v| v == 0.0));

        // A sphere of radius 10 covers the whole cube, so every ray sees
        // the same chord and the normalized image is identically 1.
        let full = render_projection(&ToothShapeOracle::sphere(10.0), PATCH_SIZE);
        assert!(full.iter().all(|&v| v == 1.0));

        let img = render_projection(&ToothShapeOracle::sphere(0.3), PATCH_SIZE);
        // The discrete y-sampling makes every pixel near the projected
        // center tie at the maximal hit count, so all four central pixels
        // normalize to exactly 1; pixels far from the center must not.
        for (row, col) in [(31, 31), (31, 32), (32, 31), (32, 32)] {
            assert_eq!(img[row * PATCH_SIZE + col], 1.0, "center pixel ({row},{col})");
        }
        assert!(img[10 * PATCH_SIZE + 31] < 1.0, "off-center pixel must be below the peak");
        // Corner pixel is outside the projected disk: no ray sample can hit.
        assert_eq!(img[0], 0.0);
        // Radial monotonicity along the center row: mid-disk beats rim.
        let center_row = 31 * PATCH_SIZE;
        assert!(img[center_row + 31] > img[center_row + 16]);
    }

    #[test]
    fn patch_and_projection_agree() {
        let (_, oracle) = generate_tooth(class(9), 3);
        let patch = render_patch(&oracle);
        let proj = render_projection(&oracle, PATCH_SIZE);
        for r in 0..PATCH_SIZE {
            for c in 0..PATCH_SIZE {
                assert_eq!(patch.at(r, c), proj[r * PATCH_SIZE + c]);
            }
        }
    }

    #[test]
    fn scene_with_no_teeth_is_background_only() {
        let (px, seg) = make_scene(&[]).unwrap();
        assert!(px.iter().all(|&v| v == 0.0));
        assert!(seg.background.iter().all(|&v| v == 1.0));
        assert!(seg.channels.is_empty());
        assert_eq!((seg.width, seg.height), (SCENE_WIDTH, SCENE_HEIGHT));
    }

    #[test]
    fn single_tooth_scene_matches_its_silhouette() {
        let (spec, oracle) = generate_tooth(class(5), 1);
        let (px, seg) = make_arch_scene(std::slice::from_ref(&spec)).unwrap();
        assert_eq!(seg.channels.len(), 1);
        let (ch_class, chan) = &seg.channels[0];
        assert_eq!(*ch_class, spec.class);

        let proj = render_projection(&oracle, PATCH_SIZE);
        let origin = default_tile_origin(spec.class);
        let mut seen_any = false;
        for tr in 0..PATCH_SIZE {
            for tc in 0..PATCH_SIZE {
                let r = origin[0] + tr as isize;
                let c = origin[1] + tc as isize;
                if r < 0 || c < 0 || r >= SCENE_HEIGHT as isize || c >= SCENE_WIDTH as isize {
                    continue;
                }
                let at = r as usize * SCENE_WIDTH + c as usize;
                let expected = f64::from(proj[tr * PATCH_SIZE + tc] > 0.0);
                assert_eq!(chan[at], expected);
                assert_eq!(seg.background[at], 1.0 - expected);
                seen_any |= expected > 0.0;
            }
        }
        assert!(seen_any, "silhouette must be non-empty");
        let max = px.iter().cloned().fold(0.0_f64, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn overlapping_teeth_share_pixels_across_channels() {
        let (a, _) = generate_tooth(class(1), 2);
        let (b, _) = generate_tooth(class(2), 2);
        let (_, seg) = make_scene(&[(a, [100, 100]), (b, [100, 120])]).unwrap();
        assert_eq!(seg.channels.len(), 2);
        let shared = seg.channels[0]
            .1
            .iter()
            .zip(&seg.channels[1].1)
            .filter(|(&x, &y)| x > 0.0 && y > 0.0)
            .count();
        assert!(shared > 0, "20-px offset molars must overlap somewhere");
    }

    #[test]
    fn duplicate_scene_classes_are_rejected() {
        let (a, _) = generate_tooth(class(1), 2);
        let (b, _) = generate_tooth(class(1), 3);
        match make_scene(&[(a, [0, 0]), (b, [0, 64])]) {
            Err(SynthError::DuplicateClass(c)) => assert_eq!(c.value(), 1),
            other => panic!("expected DuplicateClass, got {other:?}"),
        }
    }

    #[test]
    fn default_layout_aligns_opposing_teeth() {
        for v in 1..=16u8 {
            let upper = default_tile_origin(class(v));
            let lower = default_tile_origin(class(33 - v));
            assert_eq!(upper[1], lower[1], "classes {v} and {} share a column", 33 - v);
            assert_ne!(upper[0], lower[0]);
        }
    }

    #[test]
    fn split_sizes_follow_the_rounding_policy() {
        let splits = assign_splits(320, 9);
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Val), 16);
        assert_eq!(count(Split::Test), 58);
        assert_eq!(count(Split::Train), 246);

        let tiny = assign_splits(1, 9);
        assert_eq!(tiny, vec![Split::Train]);

        let twenty = assign_splits(20, 9);
        let count = |s: Split| twenty.iter().filter(|&&x| x == s).count();
        assert_eq!((count(Split::Val), count(Split::Test), count(Split::Train)), (1, 4, 15));
    }

    #[test]
    fn dataset_build_is_deterministic_and_loads_back() {
        let config = DatasetConfig {
            classes: vec![1, 4, 9],
            n_per_class: 4,
            seed: 21,
            point_count: 600,
        };
        let dir_a = temp_dir("build_a");
        let dir_b = temp_dir("build_b");
        let manifest = dataset_build(&dir_a, &config).unwrap();
        dataset_build(&dir_b, &config).unwrap();
        let text_a = fs::read(dir_a.join("manifest.json")).unwrap();
        let text_b = fs::read(dir_b.join("manifest.json")).unwrap();
        assert_eq!(text_a, text_b, "manifests must be byte-identical across builds");
        assert_eq!(manifest.samples.len(), 12);

        let ds = dataset_load(&dir_a).unwrap();
        assert_eq!(ds.manifest, manifest);
        let n_train = ds.split_samples(Split::Train).len();
        let n_val = ds.split_samples(Split::Val).len();
        let n_test = ds.split_samples(Split::Test).len();
        // round(0.05*12)=1, round(0.18*12)=2.
        assert_eq!((n_train, n_val, n_test), (9, 1, 2));

        for sample in &ds.manifest.samples {
            let fit = ds.load_sample(sample).unwrap();
            let klass = ToothClass::new(sample.class).unwrap();
            let (_, oracle) = generate_tooth(klass, sample.seed);
            let fresh = sample_points(&oracle, config.point_count, sample.seed);
            assert_eq!(fit.points, fresh.points, "{}: stored points differ", sample.id);
            assert_eq!(fit.labels, fresh.labels, "{}: stored labels differ", sample.id);
            let quantized = PatchImage::from_pgm(&render_patch(&oracle).to_pgm()).unwrap();
            assert_eq!(fit.patch.pixels(), quantized.pixels(), "{}: patch differs", sample.id);
        }
        fs::remove_dir_all(&dir_a).ok();
        fs::remove_dir_all(&dir_b).ok();
    }

    #[test]
    fn dataset_config_validation_rejects_bad_plans() {
        let ok = DatasetConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!(ok.classes.len(), 16);
        assert_eq!(ok.n_per_class, 20);

        let no_classes = DatasetConfig { classes: vec![], ..ok.clone() };
        assert!(no_classes.validate().is_err());
        let bad_class = DatasetConfig { classes: vec![1, 33], ..ok.clone() };
        assert!(bad_class.validate().is_err());
        let dup_class = DatasetConfig { classes: vec![4, 4], ..ok.clone() };
        assert!(dup_class.validate().is_err());
        let zero_n = DatasetConfig { n_per_class: 0, ..ok.clone() };
        assert!(zero_n.validate().is_err());
        let zero_points = DatasetConfig { point_count: 0, ..ok };
        assert!(zero_points.validate().is_err());
    }
}
