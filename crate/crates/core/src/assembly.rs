//! Jaw assembly: arrange per-tooth meshes along a beta-function arch
//! curve. Slots sit at equal arc-length spacing; each tooth is moved by a
//! rigid transform only (rotation aligning its forward axis with the
//! curve tangent, plus translation to the slot point), with the upper
//! arch turned half a revolution about the tangent so its crowns face
//! down.

use crate::meshing::TriangleMesh;
use crate::synth::ToothClass;

/// What can go wrong while laying out a jaw.
#[derive(Debug, thiserror::Error)]
pub enum AssemblyError {
    #[error("curve parameter {t} outside [0, 1]")]
    ParamOutOfRange { t: f64 },
    #[error("curve parameter {name} = {value} must be finite and positive")]
    BadCurveParameter { name: &'static str, value: f64 },
    #[error("class {class} does not belong to the {jaw} arch")]
    WrongJaw { class: u8, jaw: Jaw },
    #[error("class {class} appears more than once")]
    DuplicateClass { class: u8 },
    #[error("layout has {got} slots; placing by class needs {expected}")]
    SlotCount { expected: usize, got: usize },
}

/// Which arch a tooth belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Jaw {
    Upper,
    Lower,
}

impl std::fmt::Display for Jaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Jaw::Upper => "upper",
            Jaw::Lower => "lower",
        })
    }
}

// ---------------------------------------------------------------------------
// Arch curve
// ---------------------------------------------------------------------------

/// Dental arch as a beta-function profile:
/// y(x) = depth * (1 - (2|x|/width)^2)^exponent for |x| <= width/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchCurve {
    /// Total arch width in cube units.
    pub width: f64,
    /// Apex depth at the midline.
    pub depth: f64,
    /// Beta exponent shaping how sharply the arch turns.
    pub exponent: f64,
}

impl Default for ArchCurve {
    fn default() -> Self {
        Self { width: 0.9, depth: 0.45, exponent: 0.8 }
    }
}

impl ArchCurve {
    pub fn new(width: f64, depth: f64, exponent: f64) -> Result<Self, AssemblyError> {
        for (name, value) in [("width", width), ("depth", depth), ("exponent", exponent)] {
            if !value.is_finite() || value <= 0.0 {
                return Err(AssemblyError::BadCurveParameter { name, value });
            }
        }
        Ok(Self { width, depth, exponent })
    }
}

/// Point on the arch at parameter t in [0, 1]: x sweeps the width
/// linearly, y follows the beta profile. Endpoints land on the baseline,
/// the midpoint on the apex.
pub fn arch_point(curve: &ArchCurve, t: f64) -> Result<(f64, f64), AssemblyError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(AssemblyError::ParamOutOfRange { t });
    }
    let x = (t - 0.5) * curve.width;
    let u = 2.0 * x.abs() / curve.width;
    let base = (1.0 - u * u).max(0.0);
    let y = curve.depth * base.powf(curve.exponent);
    Ok((x, y))
}

// ---------------------------------------------------------------------------
// Slot layout
// ---------------------------------------------------------------------------

/// One tooth position on the arch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    /// Curve parameter of the slot center.
    pub t: f64,
    /// Slot center in the arch plane.
    pub position: [f64; 2],
    /// Unit tangent in the direction of increasing t.
    pub tangent: [f64; 2],
}

/// Slots at equal arc-length spacing along one arch.
#[derive(Debug, Clone, PartialEq)]
pub struct JawLayout {
    pub curve: ArchCurve,
    pub slots: Vec<Slot>,
}

/// Default quadrature resolution for arc-length computation.
pub const QUADRATURE_SEGMENTS: usize = 1024;

/// Lay out `n` slots at arc-length fractions (i + 0.5)/n, with arc length
/// measured by piecewise-linear quadrature over `QUADRATURE_SEGMENTS`
/// segments and tangents from central differences.
pub fn layout_slots(curve: &ArchCurve, n: usize) -> JawLayout {
    layout_slots_with_segments(curve, n, QUADRATURE_SEGMENTS)
}

/// [`layout_slots`] with an explicit quadrature resolution, so convergence
/// can be measured.
pub fn layout_slots_with_segments(curve: &ArchCurve, n: usize, segments: usize) -> JawLayout {
    assert!(n >= 1, "a layout needs at least one slot");
    assert!(segments >= 2, "quadrature needs at least two segments");
    // Cumulative arc length over a uniform parameter table.
    let pt = |t: f64| arch_point(curve, t).expect("t in range");
    let mut cumulative = Vec::with_capacity(segments + 1);
    cumulative.push(0.0);
    let mut prev = pt(0.0);
    for j in 1..=segments {
        let t = j as f64 / segments as f64;
        let p = pt(t);
        let (dx, dy) = (p.0 - prev.0, p.1 - prev.1);
        cumulative.push(cumulative[j - 1] + (dx * dx + dy * dy).sqrt());
        prev = p;
    }
    let total = cumulative[segments];

    let h = 1.0 / segments as f64;
    let slots = (0..n)
        .map(|i| {
            let target = total * (i as f64 + 0.5) / n as f64;
            // Invert the cumulative table by linear interpolation.
            let j = cumulative.partition_point(|&c| c < target).clamp(1, segments);
            let (c0, c1) = (cumulative[j - 1], cumulative[j]);
            let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.0 };
            let t = (j as f64 - 1.0 + frac) * h;
            let (x, y) = pt(t);
            let (ax, ay) = pt((t - h).max(0.0));
            let (bx, by) = pt((t + h).min(1.0));
            let (mut tx, mut ty) = (bx - ax, by - ay);
            let len = (tx * tx + ty * ty).sqrt();
            tx /= len;
            ty /= len;
            Slot { t, position: [x, y], tangent: [tx, ty] }
        })
        .collect();
    JawLayout { curve: *curve, slots }
}

// ---------------------------------------------------------------------------
// Tooth placement
// ---------------------------------------------------------------------------

fn slot_for(class: ToothClass, jaw: Jaw) -> Result<usize, AssemblyError> {
    match jaw {
        Jaw::Upper if class.is_upper() => Ok(class.value() as usize - 1),
        // Opposing teeth share a column: lower class c faces upper 33 - c.
        Jaw::Lower if !class.is_upper() => Ok(32 - class.value() as usize),
        _ => Err(AssemblyError::WrongJaw { class: class.value(), jaw }),
    }
}

/// Rigidly place each tooth at its slot: rotate the tooth's forward axis
/// (+x) onto the slot tangent and translate its origin to the slot point.
/// Upper-arch teeth are first turned half a revolution about the forward
/// axis — a proper rotation, so crowns point down without any reflection.
/// The result concatenates all placed meshes with reindexed faces;
/// normals are dropped (recompute after assembly if needed).
pub fn place_teeth(
    teeth: &[(ToothClass, TriangleMesh)],
    layout: &JawLayout,
    jaw: Jaw,
) -> Result<TriangleMesh, AssemblyError> {
    if layout.slots.len() != 16 {
        return Err(AssemblyError::SlotCount { expected: 16, got: layout.slots.len() });
    }
    let mut seen = [false; 33];
    let mut out = TriangleMesh::empty();
    for (class, mesh) in teeth {
        let c = class.value() as usize;
        if seen[c] {
            return Err(AssemblyError::DuplicateClass { class: class.value() });
        }
        seen[c] = true;
        let slot = layout.slots[slot_for(*class, jaw)?];
        let [tx, ty] = slot.tangent;
        // Rotation about z taking +x to the tangent; upper teeth are
        // pre-flipped by (x, y, z) -> (x, -y, -z), a rotation of pi about x.
        let flip = if jaw == Jaw::Upper { -1.0 } else { 1.0 };
        let shift = [slot.position[0], slot.position[1], 0.0];
        let base = out.vertices.len();
        out.vertices.extend(mesh.vertices.iter().map(|v| {
            let (x, y, z) = (v[0], flip * v[1], flip * v[2]);
            [
                tx * x - ty * y + shift[0],
                ty * x + tx * y + shift[1],
                z + shift[2],
            ]
        }));
        out.faces.extend(
            mesh.faces
                .iter()
                .map(|f| [f[0] + base, f[1] + base, f[2] + base]),
        );
    }
    Ok(out)
}

/// Concatenate meshes with reindexed faces (normals dropped).
pub fn merge_meshes(meshes: &[TriangleMesh]) -> TriangleMesh {
    let mut out = TriangleMesh::empty();
    for mesh in meshes {
        let base = out.vertices.len();
        out.vertices.extend_from_slice(&mesh.vertices);
        out.faces.extend(
            mesh.faces
                .iter()
                .map(|f| [f[0] + base, f[1] + base, f[2] + base]),
        );
    }
    out
}

/// Rigid translation of a whole mesh (normals preserved: translation does
/// not change them).
pub fn translate_mesh(mesh: &TriangleMesh, offset: [f64; 3]) -> TriangleMesh {
    TriangleMesh {
        vertices: mesh
            .vertices
            .iter()
            .map(|v| [v[0] + offset[0], v[1] + offset[1], v[2] + offset[2]])
            .collect(),
        faces: mesh.faces.clone(),
        normals: mesh.normals.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tooth_class(v: u8) -> ToothClass {
        ToothClass::new(v).unwrap()
    }

    /// Small asymmetric test mesh with centroid at the origin.
    fn marker_mesh() -> TriangleMesh {
        let vertices = vec![
            [0.04, 0.0, -0.02],
            [-0.02, 0.03, -0.02],
            [-0.02, -0.03, -0.02],
            [0.0, 0.0, 0.06],
        ];
        let centroid = [0.0, 0.0, 0.0];
        let shifted = vertices
            .iter()
            .map(|v| [v[0] - centroid[0], v[1] - centroid[1], v[2] - centroid[2]])
            .collect();
        TriangleMesh {
            vertices: shifted,
            faces: vec![[0, 1, 2], [0, 3, 1], [1, 3, 2], [2, 3, 0]],
            normals: None,
        }
    }

    #[test]
    fn arch_curve_hits_its_landmarks() {
        let curve = ArchCurve::default();
        assert_eq!(arch_point(&curve, 0.5).unwrap(), (0.0, curve.depth));
        let (x0, y0) = arch_point(&curve, 0.0).unwrap();
        assert_eq!((x0, y0), (-curve.width / 2.0, 0.0));
        let (x1, y1) = arch_point(&curve, 1.0).unwrap();
        assert_eq!((x1, y1), (curve.width / 2.0, 0.0));

        // Exact mirror symmetry between t and 1 - t. Dyadic parameters
        // keep 1 - t itself exact, so the comparison tests the curve and
        // not the test harness's rounding.
        for t in [0.0625, 0.25, 0.3125, 0.46875] {
            let (xa, ya) = arch_point(&curve, t).unwrap();
            let (xb, yb) = arch_point(&curve, 1.0 - t).unwrap();
            assert_eq!(xa, -xb);
            assert_eq!(ya, yb);
        }

        for bad in [-0.01, 1.01, f64::NAN] {
            assert!(matches!(
                arch_point(&curve, bad),
                Err(AssemblyError::ParamOutOfRange { .. })
            ));
        }
    }

    #[test]
    fn curve_parameters_are_validated() {
        let c = ArchCurve::default();
        assert_eq!((c.width, c.depth, c.exponent), (0.9, 0.45, 0.8));
        assert!(ArchCurve::new(1.2, 0.5, 0.7).is_ok());
        for (w, d, e) in [(0.0, 0.45, 0.8), (0.9, -1.0, 0.8), (0.9, 0.45, f64::NAN)] {
            assert!(matches!(
                ArchCurve::new(w, d, e),
                Err(AssemblyError::BadCurveParameter { .. })
            ));
        }
    }

    #[test]
    fn slots_are_mirror_symmetric_with_equal_arc_spacing() {
        let curve = ArchCurve::default();
        let layout = layout_slots(&curve, 16);
        assert_eq!(layout.slots.len(), 16);
        for i in 0..16 {
            let a = layout.slots[i];
            let b = layout.slots[15 - i];
            assert!(
                (a.position[0] + b.position[0]).abs() < 1e-6,
                "slot x must be antisymmetric: {} vs {}",
                a.position[0],
                b.position[0]
            );
            assert!((a.position[1] - b.position[1]).abs() < 1e-6);
            // Points lie on the curve by construction.
            let (x, y) = arch_point(&curve, a.t).unwrap();
            assert_eq!([x, y], a.position);
            // Tangents are unit length.
            let len = (a.tangent[0].powi(2) + a.tangent[1].powi(2)).sqrt();
            assert!((len - 1.0).abs() < 1e-12);
        }

        // Equal arc-length spacing, measured within the same quadrature
        // model: reconstruct cumulative length at each slot t and check
        // consecutive gaps agree.
        let segments = 4096;
        let measure = |t_end: f64| -> f64 {
            let mut acc = 0.0;
            let mut prev = arch_point(&curve, 0.0).unwrap();
            let steps = (t_end * segments as f64).floor() as usize;
            for j in 1..=steps {
                let p = arch_point(&curve, j as f64 / segments as f64).unwrap();
                acc += ((p.0 - prev.0).powi(2) + (p.1 - prev.1).powi(2)).sqrt();
                prev = p;
            }
            let p = arch_point(&curve, t_end).unwrap();
            acc + ((p.0 - prev.0).powi(2) + (p.1 - prev.1).powi(2)).sqrt()
        };
        let arcs: Vec<f64> = layout.slots.iter().map(|s| measure(s.t)).collect();
        let gaps: Vec<f64> = arcs.windows(2).map(|w| w[1] - w[0]).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        for g in &gaps {
            assert!(
                (g - mean).abs() < 1e-4,
                "arc gaps should be equal, got {gaps:?}"
            );
        }
    }

    #[test]
    fn a_single_slot_sits_at_the_apex() {
        let curve = ArchCurve::default();
        let layout = layout_slots(&curve, 1);
        assert_eq!(layout.slots.len(), 1);
        let slot = layout.slots[0];
        assert!((slot.t - 0.5).abs() < 1e-6);
        assert!(slot.position[0].abs() < 1e-6);
        assert!((slot.position[1] - curve.depth).abs() < 1e-6);
        // At the apex the tangent is horizontal, pointing along +x.
        assert!((slot.tangent[0] - 1.0).abs() < 1e-6);
        assert!(slot.tangent[1].abs() < 1e-4);
    }

    #[test]
    fn doubling_quadrature_barely_moves_the_slots() {
        let curve = ArchCurve::default();
        let coarse = layout_slots_with_segments(&curve, 16, QUADRATURE_SEGMENTS);
        let fine = layout_slots_with_segments(&curve, 16, QUADRATURE_SEGMENTS * 2);
        for (a, b) in coarse.slots.iter().zip(&fine.slots) {
            let dx = (a.position[0] - b.position[0]).abs();
            let dy = (a.position[1] - b.position[1]).abs();
            assert!(
                dx < 1e-4 && dy < 1e-4,
                "slot moved by ({dx}, {dy}) when doubling quadrature"
            );
        }
    }

    #[test]
    fn placement_is_rigid() {
        let mesh = marker_mesh();
        let layout = layout_slots(&ArchCurve::default(), 16);
        for (jaw, class) in [(Jaw::Upper, 3u8), (Jaw::Lower, 30)] {
            let placed = place_teeth(&[(tooth_class(class), mesh.clone())], &layout, jaw).unwrap();
            assert_eq!(placed.vertices.len(), mesh.vertices.len());
            assert_eq!(placed.faces, mesh.faces);
            for i in 0..mesh.vertices.len() {
                for j in i + 1..mesh.vertices.len() {
                    let d0 = dist(mesh.vertices[i], mesh.vertices[j]);
                    let d1 = dist(placed.vertices[i], placed.vertices[j]);
                    assert!(
                        (d0 - d1).abs() < 1e-9,
                        "pairwise distance changed: {d0} vs {d1}"
                    );
                }
            }
        }
    }

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    #[test]
    fn sixteen_identical_teeth_line_the_arch() {
        let mesh = marker_mesh();
        let curve = ArchCurve::default();
        let layout = layout_slots(&curve, 16);
        let teeth: Vec<(ToothClass, TriangleMesh)> =
            (1..=16).map(|c| (tooth_class(c), mesh.clone())).collect();
        let combined = place_teeth(&teeth, &layout, Jaw::Upper).unwrap();
        assert_eq!(combined.vertices.len(), 16 * mesh.vertices.len());
        assert_eq!(combined.faces.len(), 16 * mesh.faces.len());
        combined.validate().unwrap();

        let nv = mesh.vertices.len();
        for (i, slot) in layout.slots.iter().enumerate() {
            let chunk = &combined.vertices[i * nv..(i + 1) * nv];
            let mut centroid = [0.0f64; 3];
            for v in chunk {
                for a in 0..3 {
                    centroid[a] += v[a] / nv as f64;
                }
            }
            // The marker mesh is centered, so each centroid must land on
            // its slot point, which lies on the curve.
            assert!((centroid[0] - slot.position[0]).abs() < 1e-6);
            assert!((centroid[1] - slot.position[1]).abs() < 1e-6);
            assert!(centroid[2].abs() < 1e-6);
            let (_, y) = arch_point(&curve, slot.t).unwrap();
            assert!((centroid[1] - y).abs() < 1e-6, "centroid off the arch curve");
        }
    }

    #[test]
    fn upper_teeth_flip_z_by_rotation_not_reflection() {
        let mesh = marker_mesh();
        let layout = layout_slots(&ArchCurve::default(), 16);
        // Upper class 1 and lower class 32 share a slot.
        let upper = place_teeth(&[(tooth_class(1), mesh.clone())], &layout, Jaw::Upper).unwrap();
        let lower = place_teeth(&[(tooth_class(32), mesh.clone())], &layout, Jaw::Lower).unwrap();
        for (u, l) in upper.vertices.iter().zip(&lower.vertices) {
            assert!(
                (u[2] + l[2]).abs() < 1e-12,
                "upper z must mirror lower z: {} vs {}",
                u[2],
                l[2]
            );
        }
        // Same handedness: signed volume of the placed tetrahedron keeps
        // its sign (a reflection would flip it).
        let signed_volume = |m: &TriangleMesh| -> f64 {
            let [a, b, c, d] = [m.vertices[0], m.vertices[1], m.vertices[2], m.vertices[3]];
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let w = [d[0] - a[0], d[1] - a[1], d[2] - a[2]];
            u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
                + u[2] * (v[0] * w[1] - v[1] * w[0])
        };
        let original = signed_volume(&mesh);
        assert!((signed_volume(&upper) - original).abs() < 1e-12);
        assert!((signed_volume(&lower) - original).abs() < 1e-12);
    }

    #[test]
    fn class_and_layout_validation() {
        let mesh = marker_mesh();
        let layout = layout_slots(&ArchCurve::default(), 16);

        assert!(place_teeth(&[], &layout, Jaw::Upper).unwrap().is_empty());

        assert!(matches!(
            place_teeth(&[(tooth_class(17), mesh.clone())], &layout, Jaw::Upper),
            Err(AssemblyError::WrongJaw { class: 17, .. })
        ));
        assert!(matches!(
            place_teeth(&[(tooth_class(4), mesh.clone())], &layout, Jaw::Lower),
            Err(AssemblyError::WrongJaw { class: 4, .. })
        ));
        assert!(matches!(
            place_teeth(
                &[(tooth_class(4), mesh.clone()), (tooth_class(4), mesh.clone())],
                &layout,
                Jaw::Upper
            ),
            Err(AssemblyError::DuplicateClass { class: 4 })
        ));

        let short = layout_slots(&ArchCurve::default(), 5);
        assert!(matches!(
            place_teeth(&[(tooth_class(4), mesh.clone())], &short, Jaw::Upper),
            Err(AssemblyError::SlotCount { expected: 16, got: 5 })
        ));
    }

    #[test]
    fn merging_and_translating_preserve_structure() {
        let mesh = marker_mesh();
        let layout = layout_slots(&ArchCurve::default(), 16);
        let upper = place_teeth(
            &(1..=16).map(|c| (tooth_class(c), mesh.clone())).collect::<Vec<_>>(),
            &layout,
            Jaw::Upper,
        )
        .unwrap();
        let lower = place_teeth(
            &(17..=32).map(|c| (tooth_class(c), mesh.clone())).collect::<Vec<_>>(),
            &layout,
            Jaw::Lower,
        )
        .unwrap();
        let upper_shifted = translate_mesh(&upper, [0.0, 0.0, 0.12]);
        let jaw = merge_meshes(&[upper_shifted.clone(), lower]);
        jaw.validate().unwrap();
        assert_eq!(jaw.vertices.len(), 32 * mesh.vertices.len());
        assert_eq!(jaw.faces.len(), 32 * mesh.faces.len());
        // Translation moved every upper vertex up by exactly the offset.
        for (a, b) in upper.vertices.iter().zip(&upper_shifted.vertices) {
            assert_eq!(b[2], a[2] + 0.12);
            assert_eq!(a[0], b[0]);
            assert_eq!(a[1], b[1]);
        }
        // Random spot-check that merged faces reference the right chunks.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let fi = rng.gen_range(0..jaw.faces.len());
            for &v in &jaw.faces[fi] {
                assert!(v < jaw.vertices.len());
            }
        }
    }
}
