//! `toothrec synth` — generate and persist a synthetic tooth dataset.

use log::info;

use toothrec::synth::{dataset_build, DatasetConfig, Split};

use crate::config::{parse_class_list, FieldSpec, Resolved, Schema};
use crate::error::CliError;

pub const SCHEMA: Schema = Schema {
    command: "synth",
    fields: &[
        FieldSpec { key: "out", default: "dataset", help: "output directory for the dataset" },
        FieldSpec {
            key: "classes",
            default: "1-16",
            help: "universal tooth numbers to generate, e.g. 1-16 or 3,19,25-28",
        },
        FieldSpec { key: "n_per_class", default: "20", help: "shapes generated per class" },
        FieldSpec { key: "seed", default: "0", help: "master generation seed" },
        FieldSpec {
            key: "point_count",
            default: "100000",
            help: "labelled occupancy samples stored per shape",
        },
    ],
};

pub fn run(cfg: &Resolved) -> Result<(), CliError> {
    let out = cfg.path("out");
    let config = DatasetConfig {
        classes: parse_class_list(cfg.get("classes"))?,
        n_per_class: cfg.parse("n_per_class")?,
        seed: cfg.parse("seed")?,
        point_count: cfg.parse("point_count")?,
    };
    config.validate()?;

    info!(
        "generating {} classes x {} shapes into {}",
        config.classes.len(),
        config.n_per_class,
        out.display()
    );
    let manifest = dataset_build(&out, &config)?;
    let count = |split: Split| {
        manifest.samples.iter().filter(|s| s.split == split.as_str()).count()
    };
    info!(
        "dataset complete: {} samples ({} train / {} val / {} test)",
        manifest.samples.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}
