//! `toothrec reconstruct` — run the trained model over a lattice and write
//! the extracted surface as an OBJ file.

use std::path::Path;

use log::{info, warn};

use toothrec::conditioning::PatchImage;
use toothrec::meshing::{eval_grid, export_mesh, marching_cubes, with_normals};
use toothrec::synth::{generate_tooth, render_patch};

use crate::commands::{condition_for, load_checkpoint, tooth_class};
use crate::config::{FieldSpec, Resolved, Schema};
use crate::error::CliError;

pub const SCHEMA: Schema = Schema {
    command: "reconstruct",
    fields: &[
        FieldSpec { key: "checkpoint", default: "model.ocdt", help: "trained checkpoint to load" },
        FieldSpec { key: "class", default: "19", help: "universal tooth number to reconstruct" },
        FieldSpec {
            key: "patch",
            default: "",
            help: "input patch PGM; empty renders the synthetic patch for (class, patch_seed)",
        },
        FieldSpec {
            key: "patch_seed",
            default: "0",
            help: "generation seed of the synthetic patch (used when patch is empty)",
        },
        FieldSpec { key: "out", default: "mesh.obj", help: "OBJ output path" },
        FieldSpec {
            key: "resolution",
            default: "128",
            help: "evaluation lattice cells per axis (2..=1024)",
        },
        FieldSpec { key: "iso", default: "0.5", help: "extraction isolevel, strictly inside (0,1)" },
        FieldSpec { key: "normals", default: "true", help: "write per-vertex normals to the OBJ" },
    ],
};

pub fn run(cfg: &Resolved) -> Result<(), CliError> {
    let class = tooth_class(cfg.parse("class")?)?;
    let resolution =
        cfg.parse_checked("resolution", "in 2..=1024", |v: usize| (2..=1024).contains(&v))?;
    let iso = cfg.parse_checked("iso", "strictly inside (0,1)", |v: f64| v > 0.0 && v < 1.0)?;
    let want_normals: bool = cfg.parse("normals")?;
    let out = cfg.path("out");

    let rec = load_checkpoint(&cfg.path("checkpoint"))?;
    let patch = match cfg.get("patch") {
        "" => {
            let (_, oracle) = generate_tooth(class, cfg.parse("patch_seed")?);
            render_patch(&oracle)
        }
        path => PatchImage::read_pgm(Path::new(path))
            .map_err(|e| CliError::Io(format!("patch {path}: {e}")))?,
    };
    let cond = condition_for(&rec, class, &patch)?;

    info!("evaluating a {resolution}^3 lattice for class {}", class.value());
    let grid = eval_grid(&rec.occupancy, cond.as_ref(), [resolution; 3])?;
    let mut mesh = marching_cubes(&grid, iso)?;
    if mesh.is_empty() {
        warn!("no surface crosses iso {iso} at resolution {resolution}; writing an empty OBJ");
    } else if want_normals {
        match with_normals(mesh.clone()) {
            Ok(m) => mesh = m,
            Err(e) => warn!("skipping normals: {e}"),
        }
    }
    export_mesh(&mesh, &out)?;
    info!(
        "wrote {} ({} vertices, {} faces)",
        out.display(),
        mesh.vertices.len(),
        mesh.faces.len()
    );
    Ok(())
}
