//! `toothrec train` — fit the conditioned occupancy model on a dataset, or
//! overfit it to a single synthetic shape.

use std::fmt::Write as _;
use std::path::Path;

use log::info;

use toothrec::checkpoint::save_reconstructor;
use toothrec::conditioning::ConditionSource;
use toothrec::occupancy::{
    fit, overfit_single, validation_accuracy, EpochStats, FitSample, OverfitConfig, Reconstructor,
    TrainConfig,
};
use toothrec::synth::{dataset_load, generate_tooth, render_patch, sample_points, Split};

use crate::commands::{tooth_class, write_text};
use crate::config::{parse_conditioning, FieldSpec, Resolved, Schema};
use crate::error::CliError;

pub const SCHEMA: Schema = Schema {
    command: "train",
    fields: &[
        FieldSpec {
            key: "dataset",
            default: "dataset",
            help: "dataset directory from `synth` (ignored when overfit_one=true)",
        },
        FieldSpec { key: "out", default: "model.ocdt", help: "checkpoint output path" },
        FieldSpec {
            key: "history",
            default: "history.csv",
            help: "loss-history CSV output (epoch,train_loss,val_accuracy)",
        },
        FieldSpec {
            key: "conditioning",
            default: "cx",
            help: "conditioning mode: cx, cbn, or none",
        },
        FieldSpec {
            key: "use_class_embedding",
            default: "true",
            help: "add the class embedding to the patch embedding",
        },
        FieldSpec { key: "alpha", default: "2", help: "excitation gate scale" },
        FieldSpec { key: "features", default: "128", help: "feature width of the network" },
        FieldSpec { key: "blocks", default: "5", help: "residual blocks in the network" },
        FieldSpec {
            key: "seed",
            default: "0",
            help: "seed for parameter init, shuffling, and subsampling",
        },
        FieldSpec { key: "learning_rate", default: "0.0001", help: "optimizer step size" },
        FieldSpec { key: "batch_size", default: "10", help: "shapes per training step" },
        FieldSpec {
            key: "points_per_step",
            default: "2048",
            help: "points subsampled per shape per step",
        },
        FieldSpec { key: "max_epochs", default: "250", help: "epoch budget" },
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
            key: "overfit_one",
            default: "false",
            help: "train on one synthetic shape instead of a dataset",
        },
        FieldSpec { key: "overfit_class", default: "19", help: "tooth class of the overfit shape" },
        FieldSpec {
            key: "overfit_shape_seed",
            default: "0",
            help: "generation seed of the overfit shape",
        },
        FieldSpec { key: "overfit_steps", default: "2000", help: "step budget for overfit_one" },
        FieldSpec {
            key: "overfit_points",
            default: "100000",
            help: "labelled training points drawn for the overfit shape (with `seed`)",
        },
        FieldSpec {
            key: "overfit_probe_points",
            default: "10000",
            help: "fresh points per accuracy probe (drawn with seed+1)",
        },
        FieldSpec {
            key: "overfit_check_every",
            default: "50",
            help: "steps between accuracy probes",
        },
        FieldSpec {
            key: "overfit_target",
            default: "",
            help: "stop once probe accuracy reaches this value (empty: run the full budget)",
        },
    ],
};

pub fn run(cfg: &Resolved) -> Result<(), CliError> {
    let mode = parse_conditioning(cfg.get("conditioning"))?;
    let source = if cfg.parse::<bool>("use_class_embedding")? {
        ConditionSource::ClassAndPatch
    } else {
        ConditionSource::PatchOnly
    };
    let alpha =
        cfg.parse_checked("alpha", "finite and positive", |v: f64| v.is_finite() && v > 0.0)?;
    let features = cfg.parse_checked("features", "at least 2", |v: usize| v >= 2)?;
    let blocks = cfg.parse_checked("blocks", "at least 1", |v: usize| v >= 1)?;
    let seed: u64 = cfg.parse("seed")?;
    let out = cfg.path("out");
    let history_path = cfg.path("history");

    let mut rec = Reconstructor::with_dims(mode, source, alpha, features, blocks, seed);

    if cfg.parse::<bool>("overfit_one")? {
        return run_overfit(cfg, &mut rec, seed, &out, &history_path);
    }

    let train_config = TrainConfig {
        learning_rate: cfg.parse("learning_rate")?,
        batch_size: cfg.parse("batch_size")?,
        points_per_shape_per_step: cfg.parse("points_per_step")?,
        max_epochs: cfg.parse("max_epochs")?,
        patience: cfg.parse("patience")?,
        rng_seed: seed,
        val_points_per_shape: cfg.parse("val_points")?,
    };
    train_config.validate()?;

    let dataset = dataset_load(&cfg.path("dataset"))?;
    let train = dataset.fit_samples(Split::Train)?;
    let val = dataset.fit_samples(Split::Val)?;
    info!(
        "training {:?} ({} features, {} blocks) on {} shapes, validating on {}",
        mode,
        features,
        blocks,
        train.len(),
        val.len()
    );

    let report = fit(&mut rec, &train, &val, &train_config)?;
    save_reconstructor(&out, &rec)?;
    write_history(&history_path, &report.history)?;
    info!(
        "best epoch {} with validation accuracy {:.4}; checkpoint {}",
        report.best_epoch,
        report.best_val_accuracy,
        out.display()
    );
    Ok(())
}

/// Overfit one seeded synthetic shape; probes run on fresh oracle points.
fn run_overfit(
    cfg: &Resolved,
    rec: &mut Reconstructor,
    seed: u64,
    out: &Path,
    history_path: &Path,
) -> Result<(), CliError> {
    let class = tooth_class(cfg.parse("overfit_class")?)?;
    let shape_seed: u64 = cfg.parse("overfit_shape_seed")?;
    let target = match cfg.get("overfit_target") {
        "" => None,
        _ => Some(cfg.parse_checked("overfit_target", "inside (0, 1]", |v: f64| {
            v > 0.0 && v <= 1.0
        })?),
    };
    let overfit_config = OverfitConfig {
        learning_rate: cfg.parse("learning_rate")?,
        max_steps: cfg.parse("overfit_steps")?,
        points_per_step: cfg.parse("points_per_step")?,
        rng_seed: seed,
        check_every: cfg.parse("overfit_check_every")?,
        target_accuracy: target,
    };
    let pool_size = cfg.parse_checked("overfit_points", "at least 2", |v: usize| v >= 2)?;
    let probe_points = cfg.parse_checked("overfit_probe_points", "at least 1", |v: usize| v >= 1)?;

    let (_, oracle) = generate_tooth(class, shape_seed);
    let pool = sample_points(&oracle, pool_size, seed);
    let sample = FitSample {
        class,
        patch: render_patch(&oracle),
        points: pool.points,
        labels: pool.labels,
    };
    let fresh = sample_points(&oracle, probe_points, seed.wrapping_add(1));
    let probe_sample = FitSample {
        class,
        patch: sample.patch.clone(),
        points: fresh.points,
        labels: fresh.labels,
    };

    info!(
        "overfitting class {} (shape seed {}) for up to {} steps",
        class.value(),
        shape_seed,
        overfit_config.max_steps
    );
    let mut probes: Vec<f64> = Vec::new();
    let report = overfit_single(rec, &sample, &overfit_config, |r| {
        let acc = validation_accuracy(r, std::slice::from_ref(&probe_sample), probe_points)?;
        probes.push(acc);
        Ok(acc)
    })?;

    save_reconstructor(out, rec)?;
    let mut text = String::from("epoch,train_loss,val_accuracy\n");
    for (i, acc) in probes.iter().enumerate() {
        // Probes fire every check_every steps; the last one fires at the
        // step the run actually stopped on.
        let step = if i + 1 < probes.len() {
            (i + 1) * overfit_config.check_every
        } else {
            report.steps_run
        };
        let _ = writeln!(text, "{},{},{}", step, report.losses[step - 1], acc);
    }
    write_text(history_path, &text)?;
    info!(
        "ran {} steps; final probe accuracy {}; checkpoint {}",
        report.steps_run,
        report.last_probe.map_or("none".to_string(), |a| format!("{a:.4}")),
        out.display()
    );
    Ok(())
}

fn write_history(path: &Path, history: &[EpochStats]) -> Result<(), CliError> {
    let mut text = String::from("epoch,train_loss,val_accuracy\n");
    for row in history {
        let _ = writeln!(text, "{},{},{}", row.epoch, row.train_loss, row.val_accuracy);
    }
    write_text(path, &text)
}
