//! `toothrec eval` — score a checkpoint on a dataset split and write a JSON
//! report with pooled and per-class summaries over repeated samplings.

use std::collections::BTreeMap;

use log::{debug, info};
use serde::Serialize;

use toothrec::meshing::eval_grid;
use toothrec::metrics::{
    aggregate, evaluate_probability_grid, EvalConfig, MetricSummary, ReconstructionReport,
};
use toothrec::synth::{dataset_load, generate_tooth, Split};

use crate::commands::{condition_for, load_checkpoint, tooth_class};
use crate::config::{FieldSpec, Resolved, Schema};
use crate::error::CliError;

pub const SCHEMA: Schema = Schema {
    command: "eval",
    fields: &[
        FieldSpec { key: "checkpoint", default: "model.ocdt", help: "trained checkpoint to score" },
        FieldSpec { key: "dataset", default: "dataset", help: "dataset directory from `synth`" },
        FieldSpec { key: "split", default: "test", help: "split to score: train, val, or test" },
        FieldSpec { key: "out", default: "metrics.json", help: "JSON report output path" },
        FieldSpec {
            key: "repetitions",
            default: "10",
            help: "surface-sampling repetitions per shape (at least 1)",
        },
        FieldSpec {
            key: "resolution",
            default: "128",
            help: "evaluation lattice cells per axis (2..=1024)",
        },
        FieldSpec { key: "iso", default: "0.5", help: "isolevel, strictly inside (0,1)" },
        FieldSpec {
            key: "samples",
            default: "100000",
            help: "surface samples per mesh per repetition",
        },
        FieldSpec {
            key: "base_seed",
            default: "0",
            help: "repetition k draws surface samples with seed base_seed + k",
        },
    ],
};

#[derive(Serialize)]
struct Protocol {
    checkpoint: String,
    dataset: String,
    split: String,
    shapes: usize,
    repetitions: usize,
    resolution: usize,
    iso: f64,
    samples: usize,
    base_seed: u64,
}

#[derive(Serialize)]
struct EvalDoc {
    protocol: Protocol,
    pooled: BTreeMap<String, MetricSummary>,
    per_class: BTreeMap<String, BTreeMap<String, MetricSummary>>,
}

pub fn run(cfg: &Resolved) -> Result<(), CliError> {
    let repetitions = cfg.parse_checked("repetitions", "at least 1", |v: usize| v >= 1)?;
    let resolution =
        cfg.parse_checked("resolution", "in 2..=1024", |v: usize| (2..=1024).contains(&v))?;
    let iso = cfg.parse_checked("iso", "strictly inside (0,1)", |v: f64| v > 0.0 && v < 1.0)?;
    let samples = cfg.parse_checked("samples", "at least 1", |v: usize| v >= 1)?;
    let base_seed: u64 = cfg.parse("base_seed")?;
    let split: Split = cfg.get("split").parse().map_err(CliError::Usage)?;
    let out = cfg.path("out");

    let rec = load_checkpoint(&cfg.path("checkpoint"))?;
    let dataset = dataset_load(&cfg.path("dataset"))?;
    let rows = dataset.split_samples(split);
    if rows.is_empty() {
        return Err(CliError::usage(format!(
            "split {} of dataset {} holds no samples",
            split.as_str(),
            dataset.dir.display()
        )));
    }

    info!(
        "scoring {} shapes x {} repetitions at {}^3",
        rows.len(),
        repetitions,
        resolution
    );
    let mut all: Vec<ReconstructionReport> = Vec::new();
    let mut per_class: BTreeMap<String, Vec<ReconstructionReport>> = BTreeMap::new();
    for row in &rows {
        let class = tooth_class(row.class)
            .map_err(|_| CliError::Io(format!("manifest sample {}: bad class {}", row.id, row.class)))?;
        let sample = dataset.load_sample(row)?;
        let (_, oracle) = generate_tooth(class, row.seed);
        let cond = condition_for(&rec, class, &sample.patch)?;
        let grid = eval_grid(&rec.occupancy, cond.as_ref(), [resolution; 3])?;
        for k in 0..repetitions {
            let metric_config = EvalConfig {
                resolution,
                iso,
                samples,
                seed: base_seed.wrapping_add(k as u64),
            };
            let report = evaluate_probability_grid(&grid, &oracle, &metric_config)?;
            per_class
                .entry(format!("{:02}", class.value()))
                .or_default()
                .push(report.clone());
            all.push(report);
        }
        debug!("scored {}", row.id);
    }

    let doc = EvalDoc {
        protocol: Protocol {
            checkpoint: cfg.get("checkpoint").to_string(),
            dataset: cfg.get("dataset").to_string(),
            split: split.as_str().to_string(),
            shapes: rows.len(),
            repetitions,
            resolution,
            iso,
            samples,
            base_seed,
        },
        pooled: aggregate(&all),
        per_class: per_class.iter().map(|(k, v)| (k.clone(), aggregate(v))).collect(),
    };
    let mut json = serde_json::to_string_pretty(&doc)?;
    json.push('\n');
    crate::commands::write_text(&out, &json)?;

    for (metric, s) in &doc.pooled {
        info!("{metric}: {:.4} +/- {:.4} over {} runs", s.mean, s.std, s.runs);
    }
    info!("report written to {}", out.display());
    Ok(())
}
