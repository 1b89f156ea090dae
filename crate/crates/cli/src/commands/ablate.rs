//! `toothrec ablate` — train the four conditioning variants (CBN/CX, with
//! and without the class embedding) under one identical budget, score each
//! on the test split, and emit a four-row comparison table.

use std::collections::BTreeMap;

use log::info;
use serde::Serialize;

use toothrec::conditioning::{ConditionSource, PatchImage};
use toothrec::meshing::eval_grid;
use toothrec::metrics::{aggregate, evaluate_probability_grid, EvalConfig};
use toothrec::occupancy::{fit, ConditioningMode, Reconstructor, TrainConfig};
use toothrec::synth::{dataset_load, generate_tooth, Split, ToothClass, ToothShapeOracle};

use crate::commands::{condition_for, tooth_class, write_text};
use crate::config::{parse_seed_list, FieldSpec, Resolved, Schema};
use crate::error::CliError;

pub const SCHEMA: Schema = Schema {
    command: "ablate",
    fields: &[
        FieldSpec { key: "dataset", default: "dataset", help: "dataset directory from `synth`" },
        FieldSpec {
            key: "out",
            default: "ablation.json",
            help: "JSON report path (the table also prints to stdout)",
        },
        FieldSpec { key: "seeds", default: "0,1,2", help: "training seeds, comma-separated" },
        FieldSpec { key: "alpha", default: "2", help: "excitation gate scale" },
        FieldSpec { key: "features", default: "128", help: "feature width of the network" },
        FieldSpec { key: "blocks", default: "5", help: "residual blocks in the network" },
        FieldSpec { key: "learning_rate", default: "0.0001", help: "optimizer step size" },
        FieldSpec { key: "batch_size", default: "10", help: "shapes per training step" },
        FieldSpec {
            key: "points_per_step",
            default: "2048",
            help: "points subsampled per shape per step",
        },
        FieldSpec { key: "max_epochs", default: "250", help: "epoch budget per variant" },
        FieldSpec {
            key: "patience",
            default: "20",
            help: "epochs without validation improvement before stopping",
        },
        FieldSpec {
            key: "val_points",
            default: "10000",
            help: "stored points per shape used by the validation probe",
        },
        FieldSpec {
            key: "eval_resolution",
            default: "128",
            help: "test-split evaluation lattice cells per axis (2..=1024)",
        },
        FieldSpec { key: "eval_iso", default: "0.5", help: "isolevel, strictly inside (0,1)" },
        FieldSpec {
            key: "eval_samples",
            default: "100000",
            help: "surface samples per mesh per repetition",
        },
        FieldSpec {
            key: "eval_repetitions",
            default: "1",
            help: "surface-sampling repetitions per trained model (at least 1)",
        },
        FieldSpec {
            key: "eval_base_seed",
            default: "0",
            help: "repetition k draws surface samples with seed eval_base_seed + k",
        },
    ],
};

struct Variant {
    name: &'static str,
    mode: ConditioningMode,
    class_embedding: bool,
}

const VARIANTS: [Variant; 4] = [
    Variant { name: "CBN Only", mode: ConditioningMode::Cbn, class_embedding: false },
    Variant { name: "CX Only", mode: ConditioningMode::Cx, class_embedding: false },
    Variant { name: "CBN+Tooth Class", mode: ConditioningMode::Cbn, class_embedding: true },
    Variant { name: "CX+Tooth Class", mode: ConditioningMode::Cx, class_embedding: true },
];

const TABLE_METRICS: [&str; 4] = ["iou", "chamfer_l1", "normal_consistency", "precision"];

#[derive(Serialize)]
struct VariantRow {
    variant: String,
    conditioning: String,
    class_embedding: bool,
    seeds: Vec<u64>,
    /// Pooled test-split mean per metric, one entry per training seed
    /// (null where every reconstruction of a seed failed to produce it).
    per_seed: BTreeMap<String, Vec<Option<f64>>>,
    /// Mean across seeds of the per-seed pooled means.
    mean: BTreeMap<String, f64>,
    /// Population standard deviation across seeds.
    std: BTreeMap<String, f64>,
    median_iou: Option<f64>,
}

#[derive(Serialize)]
struct Directional {
    cx_class_median_iou: Option<f64>,
    cx_only_median_iou: Option<f64>,
    cbn_class_median_iou: Option<f64>,
    cx_class_ge_cx_only: Option<bool>,
    cx_class_ge_cbn_class: Option<bool>,
}

#[derive(Serialize)]
struct Budget {
    dataset: String,
    seeds: Vec<u64>,
    alpha: f64,
    features: usize,
    blocks: usize,
    learning_rate: f64,
    batch_size: usize,
    points_per_step: usize,
    max_epochs: usize,
    patience: usize,
    val_points: usize,
    eval_resolution: usize,
    eval_iso: f64,
    eval_samples: usize,
    eval_repetitions: usize,
    eval_base_seed: u64,
}

#[derive(Serialize)]
struct AblationDoc {
    budget: Budget,
    rows: Vec<VariantRow>,
    directional: Directional,
}

pub fn run(cfg: &Resolved) -> Result<(), CliError> {
    let seeds = parse_seed_list(cfg.get("seeds"))?;
    if seeds.is_empty() {
        return Err(CliError::usage("seed list is empty".to_string()));
    }
    let alpha =
        cfg.parse_checked("alpha", "finite and positive", |v: f64| v.is_finite() && v > 0.0)?;
    let features = cfg.parse_checked("features", "at least 2", |v: usize| v >= 2)?;
    let blocks = cfg.parse_checked("blocks", "at least 1", |v: usize| v >= 1)?;
    let budget = Budget {
        dataset: cfg.get("dataset").to_string(),
        seeds: seeds.clone(),
        alpha,
        features,
        blocks,
        learning_rate: cfg.parse("learning_rate")?,
        batch_size: cfg.parse("batch_size")?,
        points_per_step: cfg.parse("points_per_step")?,
        max_epochs: cfg.parse("max_epochs")?,
        patience: cfg.parse("patience")?,
        val_points: cfg.parse("val_points")?,
        eval_resolution: cfg
            .parse_checked("eval_resolution", "in 2..=1024", |v: usize| (2..=1024).contains(&v))?,
        eval_iso: cfg
            .parse_checked("eval_iso", "strictly inside (0,1)", |v: f64| v > 0.0 && v < 1.0)?,
        eval_samples: cfg.parse_checked("eval_samples", "at least 1", |v: usize| v >= 1)?,
        eval_repetitions: cfg
            .parse_checked("eval_repetitions", "at least 1", |v: usize| v >= 1)?,
        eval_base_seed: cfg.parse("eval_base_seed")?,
    };
    let base_train_config = TrainConfig {
        learning_rate: budget.learning_rate,
        batch_size: budget.batch_size,
        points_per_shape_per_step: budget.points_per_step,
        max_epochs: budget.max_epochs,
        patience: budget.patience,
        rng_seed: 0,
        val_points_per_shape: budget.val_points,
    };
    base_train_config.validate()?;
    let out = cfg.path("out");

    let dataset = dataset_load(&cfg.path("dataset"))?;
    let train = dataset.fit_samples(Split::Train)?;
    let val = dataset.fit_samples(Split::Val)?;
    let test_rows = dataset.split_samples(Split::Test);
    if test_rows.is_empty() {
        return Err(CliError::usage(format!(
            "test split of dataset {} holds no samples",
            dataset.dir.display()
        )));
    }
    // Patches and oracles for the test split; the stored points are not
    // needed for mesh-based scoring.
    let mut tests: Vec<(ToothClass, ToothShapeOracle, PatchImage)> = Vec::new();
    for row in &test_rows {
        let class = tooth_class(row.class)
            .map_err(|_| CliError::Io(format!("manifest sample {}: bad class {}", row.id, row.class)))?;
        let (_, oracle) = generate_tooth(class, row.seed);
        tests.push((class, oracle, dataset.load_sample(row)?.patch));
    }

    let mut rows = Vec::new();
    for variant in &VARIANTS {
        let source = if variant.class_embedding {
            ConditionSource::ClassAndPatch
        } else {
            ConditionSource::PatchOnly
        };
        let mut per_seed: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
        for &seed in &seeds {
            let mut rec =
                Reconstructor::with_dims(variant.mode, source, alpha, features, blocks, seed);
            let train_config = TrainConfig { rng_seed: seed, ..base_train_config };
            let fit_report = fit(&mut rec, &train, &val, &train_config)?;
            info!(
                "{} seed {}: best val accuracy {:.4} at epoch {}",
                variant.name, seed, fit_report.best_val_accuracy, fit_report.best_epoch
            );

            let mut reports = Vec::new();
            for (class, oracle, patch) in &tests {
                let cond = condition_for(&rec, *class, patch)?;
                let grid =
                    eval_grid(&rec.occupancy, cond.as_ref(), [budget.eval_resolution; 3])?;
                for k in 0..budget.eval_repetitions {
                    let metric_config = EvalConfig {
                        resolution: budget.eval_resolution,
                        iso: budget.eval_iso,
                        samples: budget.eval_samples,
                        seed: budget.eval_base_seed.wrapping_add(k as u64),
                    };
                    reports.push(evaluate_probability_grid(&grid, oracle, &metric_config)?);
                }
            }
            let pooled = aggregate(&reports);
            for metric in TABLE_METRICS.iter().chain(["failure_rate"].iter()) {
                per_seed
                    .entry((*metric).to_string())
                    .or_default()
                    .push(pooled.get(*metric).map(|s| s.mean));
            }
            if let Some(s) = pooled.get("iou") {
                info!("{} seed {}: mean test iou {:.4}", variant.name, seed, s.mean);
            }
        }
        rows.push(build_row(variant, &seeds, per_seed));
    }

    let median_of = |name: &str| rows.iter().find(|r| r.variant == name).and_then(|r| r.median_iou);
    let cx_class = median_of("CX+Tooth Class");
    let cx_only = median_of("CX Only");
    let cbn_class = median_of("CBN+Tooth Class");
    let doc = AblationDoc {
        budget,
        rows,
        directional: Directional {
            cx_class_median_iou: cx_class,
            cx_only_median_iou: cx_only,
            cbn_class_median_iou: cbn_class,
            cx_class_ge_cx_only: cx_class.zip(cx_only).map(|(a, b)| a >= b),
            cx_class_ge_cbn_class: cx_class.zip(cbn_class).map(|(a, b)| a >= b),
        },
    };

    crate::commands::print_stdout(&render_table(&doc.rows));
    let mut json = serde_json::to_string_pretty(&doc)?;
    json.push('\n');
    write_text(&out, &json)?;
    info!("report written to {}", out.display());
    Ok(())
}

fn build_row(
    variant: &Variant,
    seeds: &[u64],
    per_seed: BTreeMap<String, Vec<Option<f64>>>,
) -> VariantRow {
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for (metric, values) in &per_seed {
        let present: Vec<f64> = values.iter().flatten().copied().collect();
        if present.is_empty() {
            continue;
        }
        let m = present.iter().sum::<f64>() / present.len() as f64;
        let var =
            present.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / present.len() as f64;
        mean.insert(metric.clone(), m);
        std.insert(metric.clone(), var.sqrt());
    }
    let median_iou = per_seed.get("iou").and_then(|values| {
        let mut present: Vec<f64> = values.iter().flatten().copied().collect();
        if present.is_empty() {
            return None;
        }
        present.sort_by(f64::total_cmp);
        let mid = present.len() / 2;
        Some(if present.len() % 2 == 1 {
            present[mid]
        } else {
            0.5 * (present[mid - 1] + present[mid])
        })
    });
    VariantRow {
        variant: variant.name.to_string(),
        conditioning: match variant.mode {
            ConditioningMode::Cbn => "cbn".to_string(),
            _ => "cx".to_string(),
        },
        class_embedding: variant.class_embedding,
        seeds: seeds.to_vec(),
        per_seed,
        mean,
        std,
        median_iou,
    }
}

/// Four rows, one per variant; cells are `mean +/- std` across seeds.
fn render_table(rows: &[VariantRow]) -> String {
    let cell = |row: &VariantRow, metric: &str| -> String {
        match (row.mean.get(metric), row.std.get(metric)) {
            (Some(m), Some(s)) => format!("{m:.4} +/- {s:.4}"),
            _ => "n/a".to_string(),
        }
    };
    let mut text = format!(
        "{:<18} {:>18} {:>18} {:>20} {:>18}\n",
        "variant", "iou", "chamfer_l1", "normal_consistency", "precision"
    );
    for row in rows {
        let cells: Vec<String> = TABLE_METRICS.iter().map(|m| cell(row, m)).collect();
        text.push_str(&format!(
            "{:<18} {:>18} {:>18} {:>20} {:>18}\n",
            row.variant, cells[0], cells[1], cells[2], cells[3]
        ));
    }
    text
}
