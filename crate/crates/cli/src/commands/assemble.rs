//! `toothrec assemble` — reconstruct every requested tooth from one
//! checkpoint and arrange both jaws along the arch curve into a single OBJ.
//!
//! Placement is rigid (no scaling and no collision resolution between
//! neighbors); the output is visualization-grade.

use log::{debug, info, warn};

use toothrec::assembly::{layout_slots, merge_meshes, place_teeth, translate_mesh, ArchCurve, Jaw};
use toothrec::meshing::{eval_grid, export_mesh, marching_cubes};
use toothrec::synth::{generate_tooth, render_patch};

use crate::commands::{condition_for, load_checkpoint, tooth_class};
use crate::config::{parse_class_list, FieldSpec, Resolved, Schema};
use crate::error::CliError;

pub const SCHEMA: Schema = Schema {
    command: "assemble",
    fields: &[
        FieldSpec { key: "checkpoint", default: "model.ocdt", help: "trained checkpoint to load" },
        FieldSpec { key: "out", default: "jaw.obj", help: "combined OBJ output path" },
        FieldSpec { key: "classes", default: "1-32", help: "teeth to reconstruct and place" },
        FieldSpec {
            key: "resolution",
            default: "64",
            help: "per-tooth evaluation lattice cells per axis (2..=1024)",
        },
        FieldSpec { key: "iso", default: "0.5", help: "isolevel, strictly inside (0,1)" },
        FieldSpec {
            key: "patch_seed",
            default: "0",
            help: "generation seed for the per-class synthetic patches",
        },
        FieldSpec { key: "arch_width", default: "0.9", help: "arch curve width" },
        FieldSpec { key: "arch_depth", default: "0.45", help: "arch curve depth" },
        FieldSpec { key: "arch_exponent", default: "0.8", help: "arch curve flatness exponent" },
        FieldSpec {
            key: "jaw_separation",
            default: "1.1",
            help: "vertical distance between the upper and lower jaw planes",
        },
    ],
};

pub fn run(cfg: &Resolved) -> Result<(), CliError> {
    let classes = parse_class_list(cfg.get("classes"))?;
    let resolution =
        cfg.parse_checked("resolution", "in 2..=1024", |v: usize| (2..=1024).contains(&v))?;
    let iso = cfg.parse_checked("iso", "strictly inside (0,1)", |v: f64| v > 0.0 && v < 1.0)?;
    let patch_seed: u64 = cfg.parse("patch_seed")?;
    let separation = cfg.parse_checked("jaw_separation", "finite and non-negative", |v: f64| {
        v.is_finite() && v >= 0.0
    })?;
    let curve = ArchCurve::new(
        cfg.parse("arch_width")?,
        cfg.parse("arch_depth")?,
        cfg.parse("arch_exponent")?,
    )?;
    let out = cfg.path("out");

    let rec = load_checkpoint(&cfg.path("checkpoint"))?;
    let layout = layout_slots(&curve, 16);

    let mut upper = Vec::new();
    let mut lower = Vec::new();
    for &number in &classes {
        let class = tooth_class(number)?;
        let (_, oracle) = generate_tooth(class, patch_seed);
        let patch = render_patch(&oracle);
        let cond = condition_for(&rec, class, &patch)?;
        let grid = eval_grid(&rec.occupancy, cond.as_ref(), [resolution; 3])?;
        let mesh = marching_cubes(&grid, iso)?;
        if mesh.is_empty() {
            warn!("tooth {number} reconstructed empty at iso {iso}; leaving its slot open");
            continue;
        }
        debug!("tooth {number}: {} vertices, {} faces", mesh.vertices.len(), mesh.faces.len());
        if class.is_upper() {
            upper.push((class, mesh));
        } else {
            lower.push((class, mesh));
        }
    }
    let placed = classes.len() - (upper.len() + lower.len());
    if placed > 0 {
        warn!("{placed} of {} teeth reconstructed empty", classes.len());
    }

    let upper_jaw =
        translate_mesh(&place_teeth(&upper, &layout, Jaw::Upper)?, [0.0, 0.0, separation / 2.0]);
    let lower_jaw =
        translate_mesh(&place_teeth(&lower, &layout, Jaw::Lower)?, [0.0, 0.0, -separation / 2.0]);
    let jaw = merge_meshes(&[upper_jaw, lower_jaw]);
    if jaw.is_empty() {
        warn!("every tooth reconstructed empty; writing an empty OBJ");
    }
    export_mesh(&jaw, &out)?;
    info!(
        "wrote {} ({} teeth, {} vertices, {} faces)",
        out.display(),
        upper.len() + lower.len(),
        jaw.vertices.len(),
        jaw.faces.len()
    );
    Ok(())
}
