//! Conditioning: from a (tooth class, rendered patch) observation to the
//! 128-dimensional vector that steers the occupancy network.
//!
//! Two information sources are fused by addition: a learned per-class
//! embedding row and a small strided-convolution encoding of a 64x64
//! grayscale patch. Patches travel as binary PGM (P5) files.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::numerics::{Graph, NodeId, NumericsError, Tensor};
use crate::synth::{SegmentationScene, ToothClass};

/// Length of every condition vector.
pub const CONDITION_DIM: usize = 128;
/// Patch side length in pixels.
pub const PATCH_SIZE: usize = 64;
/// Padding in scene pixels added around a tooth's bounding box before
/// cropping.
const CROP_MARGIN: usize = 4;
/// Channel widths of the four strided conv stages.
const ENC_CHANNELS: [usize; 5] = [1, 8, 16, 32, 64];

/// Errors from patch extraction, PGM I/O, and condition assembly.
#[derive(Debug, thiserror::Error)]
pub enum ConditioningError {
    #[error("scene has no channel for class {class}")]
    MissingClass { class: u8 },
    #[error("scene channel for class {class} has no occupied pixels")]
    EmptyChannel { class: u8 },
    #[error("pgm: {reason}")]
    PgmFormat { reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn pgm_err<T>(reason: impl Into<String>) -> Result<T, ConditioningError> {
    Err(ConditioningError::PgmFormat { reason: reason.into() })
}

/// A 64x64 grayscale patch with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchImage {
    pixels: Vec<f64>,
}

impl PatchImage {
    /// Validate length, finiteness, and range.
    pub fn new(pixels: Vec<f64>) -> Result<Self, ConditioningError> {
        if pixels.len() != PATCH_SIZE * PATCH_SIZE {
            return pgm_err(format!(
                "patch must hold {} pixels, got {}",
                PATCH_SIZE * PATCH_SIZE,
                pixels.len()
            ));
        }
        if pixels.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return pgm_err("patch intensities must be finite and within [0, 1]");
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Row-major pixel at (row, col).
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * PATCH_SIZE + col]
    }

    /// Serialize as binary PGM (P5), 8-bit, maxval 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{PATCH_SIZE} {PATCH_SIZE}\n255\n").into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }

    /// Parse a binary PGM (P5). Requires 64x64 with maxval 255; tolerates
    /// comments and arbitrary whitespace in the header per the PGM spec.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self, ConditioningError> {
        let mut pos = 0usize;
        let mut token = |what: &str| -> Result<Vec<u8>, ConditioningError> {
            // Skip whitespace and '#' comments.
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return pgm_err(format!("missing {what}"));
            }
            Ok(bytes[start..pos].to_vec())
        };

        if token("magic")? != b"P5" {
            return pgm_err("not a binary PGM (magic must be P5)");
        }
        let parse = |raw: Vec<u8>, what: &str| -> Result<usize, ConditioningError> {
            std::str::from_utf8(&raw)
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .map_or_else(|| pgm_err(format!("bad {what}")), Ok)
        };
        let w = parse(token("width")?, "width")?;
        let h = parse(token("height")?, "height")?;
        let maxval = parse(token("maxval")?, "maxval")?;
        if (w, h) != (PATCH_SIZE, PATCH_SIZE) {
            return pgm_err(format!("expected {PATCH_SIZE}x{PATCH_SIZE}, got {w}x{h}"));
        }
        if maxval != 255 {
            return pgm_err(format!("expected maxval 255, got {maxval}"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return pgm_err("missing raster separator");
        }
        pos += 1;
        let raster = &bytes[pos..];
        if raster.len() < w * h {
            return pgm_err(format!("raster truncated: {} of {} bytes", raster.len(), w * h));
        }
        let pixels = raster[..w * h].iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(pixels)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), ConditioningError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self, ConditioningError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_pgm(&bytes)
    }

    /// The patch as a [1, 64, 64] tensor, the encoder's input layout.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, PATCH_SIZE, PATCH_SIZE], self.pixels.clone())
            .expect("patch invariants imply a valid tensor")
    }
}

/// Crop the square region around one class's silhouette in a scene and
/// resample it to 64x64, normalized so the brightest pixel is 1.
///
/// The crop window is the bounding box of positive pixels, padded by
/// [`CROP_MARGIN`], grown centered to a square, shifted (not shrunk) back
/// inside the scene, and capped at the smaller scene dimension.
pub fn extract_patch(
    scene: &SegmentationScene,
    class: ToothClass,
) -> Result<PatchImage, ConditioningError> {
    let map = scene
        .channels
        .iter()
        .find(|(c, _)| *c == class)
        .map(|(_, m)| m)
        .ok_or(ConditioningError::MissingClass { class: class.value() })?;
    debug_assert_eq!(map.len(), scene.width * scene.height);

    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for r in 0..scene.height {
        for c in 0..scene.width {
            if map[r * scene.width + c] > 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(ConditioningError::EmptyChannel { class: class.value() });
    }

    // Pad, then grow the short axis to a square, centered.
    let pad = |lo: usize, hi: usize, max: usize| {
        (lo.saturating_sub(CROP_MARGIN), (hi + CROP_MARGIN).min(max - 1))
    };
    let (r0, r1) = pad(r0, r1, scene.height);
    let (c0, c1) = pad(c0, c1, scene.width);
    let side = (r1 - r0 + 1).max(c1 - c0 + 1).min(scene.height.min(scene.width));
    let center = |lo: usize, hi: usize, side: usize, max: usize| -> usize {
        let want = (lo + hi + 1).saturating_sub(side) / 2; // centered start
        want.min(max - side)
    };
    let rs = center(r0, r1, side, scene.height);
    let cs = center(c0, c1, side, scene.width);

    // Nearest-neighbor resample through pixel centers.
    let mut pixels = vec![0.0; PATCH_SIZE * PATCH_SIZE];
    for r in 0..PATCH_SIZE {
        let sr = rs + (((r as f64 + 0.5) * side as f64 / PATCH_SIZE as f64) as usize).min(side - 1);
        for c in 0..PATCH_SIZE {
            let sc =
                cs + (((c as f64 + 0.5) * side as f64 / PATCH_SIZE as f64) as usize).min(side - 1);
            pixels[r * PATCH_SIZE + c] = map[sr * scene.width + sc];
        }
    }
    let peak = pixels.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        // Occupied pixels exist but fell between sample centers; treat as
        // an empty observation rather than dividing by zero.
        return Err(ConditioningError::EmptyChannel { class: class.value() });
    }
    for p in pixels.iter_mut() {
        *p /= peak;
    }
    PatchImage::new(pixels)
}

/// Learned per-class rows, one for each of the 32 universal classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    table: Tensor, // [32, CONDITION_DIM]
}

impl ClassEmbedding {
    /// Rows initialized from N(0, 0.02^2).
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        Self { table: Tensor::randn(vec![32, CONDITION_DIM], 0.02, rng).with_grad() }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Tensor {
        &mut self.table
    }

    /// The embedding row for a class, for tape-free evaluation.
    pub fn row(&self, class: ToothClass) -> &[f64] {
        self.table.row(class.index0())
    }

    /// Insert the table as a trainable graph parameter.
    pub fn insert_params(&self, g: &mut Graph) -> NodeId {
        g.param(&self.table)
    }

    /// Graph lookup of one class row as a [1, 128] node.
    pub fn forward(
        g: &mut Graph,
        table: NodeId,
        class: ToothClass,
    ) -> Result<NodeId, NumericsError> {
        g.embed_row(table, class.index0())
    }
}

/// Strided-convolution patch encoder: four 3x3 stride-2 conv+ReLU stages
/// (1 -> 8 -> 16 -> 32 -> 64 channels, 64x64 -> 4x4 pixels), global average
/// pooling, then a linear projection to 128 features.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder {
    conv_w: Vec<Tensor>, // [Cout, Cin, 3, 3] each
    conv_b: Vec<Tensor>, // [Cout] each
    fc_w: Tensor,        // [64, CONDITION_DIM]
    fc_b: Tensor,        // [CONDITION_DIM]
}

/// Graph node ids for one insertion of the encoder's parameters.
#[derive(Debug, Clone)]
pub struct PatchEncoderNodes {
    conv_w: Vec<NodeId>,
    conv_b: Vec<NodeId>,
    fc_w: NodeId,
    fc_b: NodeId,
}

impl PatchEncoderNodes {
    /// Node ids flattened in [`PatchEncoder::params`] order.
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(2 * self.conv_w.len() + 2);
        for (&w, &b) in self.conv_w.iter().zip(&self.conv_b) {
            out.push(w);
            out.push(b);
        }
        out.push(self.fc_w);
        out.push(self.fc_b);
        out
    }
}

impl PatchEncoder {
    /// He-normal conv kernels (fan_in = Cin*9), zero biases, He-normal
    /// projection.
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for s in 0..4 {
            let (cin, cout) = (ENC_CHANNELS[s], ENC_CHANNELS[s + 1]);
            conv_w.push(Tensor::he_normal(vec![cout, cin, 3, 3], cin * 9, rng).with_grad());
            conv_b.push(Tensor::zeros(vec![cout]).with_grad());
        }
        let last = ENC_CHANNELS[4];
        Self {
            conv_w,
            conv_b,
            fc_w: Tensor::he_normal(vec![last, CONDITION_DIM], last, rng).with_grad(),
            fc_b: Tensor::zeros(vec![CONDITION_DIM]).with_grad(),
        }
    }

    /// Parameters in a fixed, documented order: conv stages shallow to deep
    /// (weight then bias), then the projection weight and bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(10);
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            out.push(w);
            out.push(b);
        }
        out.push(&self.fc_w);
        out.push(&self.fc_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(10);
        for (w, b) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        out
    }

    /// Insert all parameters as trainable graph nodes.
    pub fn insert_params(&self, g: &mut Graph) -> PatchEncoderNodes {
        PatchEncoderNodes {
            conv_w: self.conv_w.iter().map(|t| g.param(t)).collect(),
            conv_b: self.conv_b.iter().map(|t| g.param(t)).collect(),
            fc_w: g.param(&self.fc_w),
            fc_b: g.param(&self.fc_b),
        }
    }

    /// Encoder forward on the graph: patch node [1, 64, 64] -> [1, 128].
    pub fn forward(
        g: &mut Graph,
        nodes: &PatchEncoderNodes,
        patch: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let mut x = patch;
        for s in 0..4 {
            let c = g.conv2d_s2(x, nodes.conv_w[s], nodes.conv_b[s])?;
            x = g.relu(c);
        }
        let pooled = g.global_avg_pool(x)?;
        g.linear(pooled, nodes.fc_w, nodes.fc_b)
    }

    /// Tape-free encoding for evaluation. Bit-identical to [`Self::forward`]
    /// because it runs the same ops through a throwaway graph of constants.
    pub fn encode(&self, patch: &PatchImage) -> Result<Vec<f64>, NumericsError> {
        let mut g = Graph::new();
        let p = g.leaf(patch.to_tensor());
        let nodes = PatchEncoderNodes {
            conv_w: self.conv_w.iter().map(|t| g.leaf(t.clone())).collect(),
            conv_b: self.conv_b.iter().map(|t| g.leaf(t.clone())).collect(),
            fc_w: g.leaf(self.fc_w.clone()),
            fc_b: g.leaf(self.fc_b.clone()),
        };
        let out = Self::forward(&mut g, &nodes, p)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// A validated 128-dimensional condition vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector(Vec<f64>);

impl ConditionVector {
    pub fn new(values: Vec<f64>) -> Result<Self, NumericsError> {
        if values.len() != CONDITION_DIM {
            return Err(NumericsError::InvalidShape {
                shape: vec![values.len()],
                reason: format!("condition vector must have {CONDITION_DIM} entries"),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { context: "ConditionVector::new", index });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Which conditioning inputs feed the condition vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSource {
    /// Class embedding + encoded patch, fused by addition.
    ClassAndPatch,
    /// Encoded patch only.
    PatchOnly,
    /// Class embedding only.
    ClassOnly,
}

/// Assemble the condition vector for one observation, tape-free.
///
/// With [`ConditionSource::ClassAndPatch`] the class row and the patch
/// encoding are summed component-wise; the single-source variants pass one
/// branch through unchanged.
pub fn make_condition(
    embedding: &ClassEmbedding,
    encoder: &PatchEncoder,
    source: ConditionSource,
    class: ToothClass,
    patch: &PatchImage,
) -> Result<ConditionVector, NumericsError> {
    let vals = match source {
        ConditionSource::ClassOnly => embedding.row(class).to_vec(),
        ConditionSource::PatchOnly => encoder.encode(patch)?,
        ConditionSource::ClassAndPatch => {
            let mut v = encoder.encode(patch)?;
            for (a, b) in v.iter_mut().zip(embedding.row(class)) {
                *a += b;
            }
            v
        }
    };
    ConditionVector::new(vals)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn class(v: u8) -> ToothClass {
        ToothClass::new(v).unwrap()
    }

    fn blob_scene() -> SegmentationScene {
        // A 7x9 bright rectangle with a dimmer halo pixel, off-center in a
        // 60x100 scene.
        let (h, w) = (60, 100);
        let mut map = vec![0.0; h * w];
        for r in 20..27 {
            for c in 40..49 {
                map[r * w + c] = 0.5;
            }
        }
        map[23 * w + 44] = 0.8; // brightest
        let background = map.iter().map(|&v| f64::from(v == 0.0)).collect();
        SegmentationScene { width: w, height: h, background, channels: vec![(class(3), map)] }
    }

    #[test]
    fn patch_round_trips_through_pgm_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pixels: Vec<f64> = (0..PATCH_SIZE * PATCH_SIZE).map(|_| rng.gen::<f64>()).collect();
        let p = PatchImage::new(pixels).unwrap();
        let bytes = p.to_pgm();
        let q = PatchImage::from_pgm(&bytes).unwrap();
        // Quantization to 8 bits is the only loss, and it is idempotent.
        assert_eq!(q.to_pgm(), bytes);
        for (a, b) in p.pixels().iter().zip(q.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_parser_rejects_malformed_headers() {
        let good = PatchImage::new(vec![0.5; PATCH_SIZE * PATCH_SIZE]).unwrap().to_pgm();
        assert!(PatchImage::from_pgm(&good).is_ok());

        let mut wrong_magic = good.clone();
        wrong_magic[1] = b'2';
        assert!(matches!(
            PatchImage::from_pgm(&wrong_magic),
            Err(ConditioningError::PgmFormat { .. })
        ));

        let truncated = &good[..good.len() - 10];
        assert!(matches!(
            PatchImage::from_pgm(truncated),
            Err(ConditioningError::PgmFormat { .. })
        ));

        let wrong_size = b"P5\n32 64\n255\n".to_vec();
        assert!(PatchImage::from_pgm(&wrong_size).is_err());

        let wrong_maxval =
            [b"P5\n64 64\n65535\n".to_vec(), vec![0u8; PATCH_SIZE * PATCH_SIZE * 2]].concat();
        assert!(PatchImage::from_pgm(&wrong_maxval).is_err());
    }

    #[test]
    fn pgm_parser_tolerates_comments() {
        let mut bytes = b"P5 # binary graymap\n# tooth patch\n64\t64\n255\n".to_vec();
        bytes.extend(vec![128u8; PATCH_SIZE * PATCH_SIZE]);
        let p = PatchImage::from_pgm(&bytes).unwrap();
        assert!((p.at(0, 0) - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn extract_patch_crops_squarely_and_normalizes() {
        let scene = blob_scene();
        let p = extract_patch(&scene, class(3)).unwrap();
        let peak = p.pixels().iter().cloned().fold(0.0, f64::max);
        assert_eq!(peak, 1.0, "brightest pixel must be exactly 1");
        // The blob occupies a central region; corners of the padded square
        // crop are empty.
        assert_eq!(p.at(0, 0), 0.0);
        assert_eq!(p.at(PATCH_SIZE - 1, PATCH_SIZE - 1), 0.0);
        // Every pixel is background, the rescaled plateau, or the peak.
        for &v in p.pixels() {
            assert!(
                v == 0.0 || (v - 0.5 / 0.8).abs() < 1e-12 || v == 1.0,
                "unexpected intensity {v}"
            );
        }
        assert!(p.pixels().iter().any(|&v| (v - 0.5 / 0.8).abs() < 1e-12));
    }

    #[test]
    fn extract_patch_is_invariant_to_intensity_rescale() {
        let scene = blob_scene();
        let mut dim = scene.clone();
        for v in dim.channels[0].1.iter_mut() {
            *v *= 0.35;
        }
        let a = extract_patch(&scene, class(3)).unwrap();
        let b = extract_patch(&dim, class(3)).unwrap();
        for (x, y) in a.pixels().iter().zip(b.pixels()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn extract_patch_reports_missing_and_empty_channels() {
        let scene = blob_scene();
        assert!(matches!(
            extract_patch(&scene, class(9)),
            Err(ConditioningError::MissingClass { class: 9 })
        ));
        let empty = SegmentationScene {
            width: 10,
            height: 10,
            background: vec![1.0; 100],
            channels: vec![(class(5), vec![0.0; 100])],
        };
        assert!(matches!(
            extract_patch(&empty, class(5)),
            Err(ConditioningError::EmptyChannel { class: 5 })
        ));
    }

    #[test]
    fn embedding_rows_are_seeded_and_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e1 = ClassEmbedding::new(&mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e2 = ClassEmbedding::new(&mut rng);
        assert_eq!(e1.table().data(), e2.table().data());
        assert_eq!(e1.table().shape(), &[32, CONDITION_DIM]);
        let var = e1.table().data().iter().map(|v| v * v).sum::<f64>()
            / e1.table().numel() as f64;
        assert!((var.sqrt() - 0.02).abs() < 0.004, "std {}", var.sqrt());
        // Distinct classes get distinct rows.
        assert_ne!(e1.row(class(1)), e1.row(class(32)));
    }

    #[test]
    fn encoder_output_shape_and_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = PatchEncoder::new(&mut rng);
        let n: usize = enc.params().iter().map(|t| t.numel()).sum();
        // 8*1*9+8 + 16*8*9+16 + 32*16*9+32 + 64*32*9+64 + 64*128+128
        assert_eq!(n, 80 + 1168 + 4640 + 18496 + 8320);
        let patch = PatchImage::new(vec![0.25; PATCH_SIZE * PATCH_SIZE]).unwrap();
        let v = enc.encode(&patch).unwrap();
        assert_eq!(v.len(), CONDITION_DIM);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn encode_matches_graph_forward_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = PatchEncoder::new(&mut rng);
        let pixels: Vec<f64> =
            (0..PATCH_SIZE * PATCH_SIZE).map(|_| rng.gen::<f64>()).collect();
        let patch = PatchImage::new(pixels).unwrap();

        let eval = enc.encode(&patch).unwrap();
        let mut g = Graph::new();
        let p = g.leaf(patch.to_tensor());
        let nodes = enc.insert_params(&mut g);
        let out = PatchEncoder::forward(&mut g, &nodes, p).unwrap();
        assert!(g
            .value(out)
            .data()
            .iter()
            .zip(&eval)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn condition_fusion_is_componentwise_addition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = ClassEmbedding::new(&mut rng);
        let enc = PatchEncoder::new(&mut rng);
        let patch = PatchImage::new(vec![0.6; PATCH_SIZE * PATCH_SIZE]).unwrap();
        let c = class(17);

        let both = make_condition(&emb, &enc, ConditionSource::ClassAndPatch, c, &patch).unwrap();
        let cls = make_condition(&emb, &enc, ConditionSource::ClassOnly, c, &patch).unwrap();
        let pat = make_condition(&emb, &enc, ConditionSource::PatchOnly, c, &patch).unwrap();
        for i in 0..CONDITION_DIM {
            assert!(
                (both.values()[i] - (cls.values()[i] + pat.values()[i])).abs() < 1e-15,
                "index {i}"
            );
        }
    }

    #[test]
    fn condition_vector_validates() {
        assert!(ConditionVector::new(vec![0.0; CONDITION_DIM]).is_ok());
        assert!(ConditionVector::new(vec![0.0; 12]).is_err());
        let mut v = vec![0.0; CONDITION_DIM];
        v[7] = f64::INFINITY;
        assert!(ConditionVector::new(v).is_err());
    }
}
