//! End-to-end tests that drive the installed binary: exit codes, config
//! layering, determinism of on-disk artifacts, and the warning paths.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use toothrec::meshing::import_mesh;
use toothrec::synth::{generate_tooth, render_patch, ToothClass};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_toothrec"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_exit(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: expected exit {code}\nstderr:\n{}",
        stderr_of(out)
    );
}

/// A dataset small enough to train against in well under a second.
fn tiny_dataset(dir: &Path) -> PathBuf {
    let out = dir.join("dataset");
    let result = run(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "classes=1,2,19",
        "--set",
        "n_per_class=4",
        "--set",
        "point_count=3000",
    ]);
    assert_exit(&result, 0, "tiny synth");
    out
}

const TINY_TRAIN: &[&str] = &[
    "--set",
    "features=16",
    "--set",
    "blocks=2",
    "--set",
    "max_epochs=3",
    "--set",
    "points_per_step=256",
    "--set",
    "val_points=2000",
    "--set",
    "batch_size=4",
];

/// Train a checkpoint on the tiny dataset; returns (checkpoint, history).
fn tiny_checkpoint(dir: &Path, dataset: &Path, tag: &str) -> (PathBuf, PathBuf) {
    let ckpt = dir.join(format!("{tag}.ocdt"));
    let hist = dir.join(format!("{tag}.csv"));
    let mut args = vec![
        "train",
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--set",
    ];
    let hist_arg = format!("history={}", hist.display());
    args.push(&hist_arg);
    args.extend_from_slice(TINY_TRAIN);
    let result = run(&args);
    assert_exit(&result, 0, "tiny train");
    (ckpt, hist)
}

fn json_of(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[test]
fn synth_default_catalog_is_320_entries_and_byte_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d1 = dir.path().join("d1");
    let d2 = dir.path().join("d2");
    for d in [&d1, &d2] {
        let out = run(&[
            "synth",
            "--out",
            d.to_str().unwrap(),
            "--set",
            "point_count=500",
        ]);
        assert_exit(&out, 0, "synth default catalog");
    }
    let m1 = fs::read(d1.join("manifest.json")).unwrap();
    let m2 = fs::read(d2.join("manifest.json")).unwrap();
    assert_eq!(m1, m2, "same seed must give a byte-identical manifest");

    let doc = json_of(&d1.join("manifest.json"));
    let samples = doc["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 320, "16 default classes x 20 samples");
    for split in ["train", "val", "test"] {
        assert!(
            samples.iter().any(|s| s["split"] == split),
            "split {split} must be populated"
        );
    }
}

#[test]
fn synth_rejects_bad_config_before_writing_anything() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("never");

    let out = run(&[
        "synth",
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "classes=0-5",
    ]);
    assert_exit(&out, 1, "class 0 is out of range");
    assert!(!out_dir.exists(), "rejected config must write nothing");

    let out = run(&[
        "synth",
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "bogus=1",
    ]);
    assert_exit(&out, 1, "unknown key");
    assert!(
        stderr_of(&out).contains("n_per_class"),
        "unknown-key error should list the known keys"
    );
    assert!(!out_dir.exists());

    let out = run(&["synth", "--out", "/proc/definitely/not/writable"]);
    assert_exit(&out, 2, "unwritable output is an I/O error");
    assert!(!Path::new("/proc/definitely/not/writable/manifest.json").exists());
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[test]
fn train_requires_a_dataset_and_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();

    let out = run(&[
        "train",
        "--dataset",
        dir.path().join("missing").to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "missing dataset is an I/O error");

    let dataset = tiny_dataset(dir.path());
    let (c1, h1) = tiny_checkpoint(dir.path(), &dataset, "a");
    let (c2, h2) = tiny_checkpoint(dir.path(), &dataset, "b");
    assert_eq!(
        fs::read(&c1).unwrap(),
        fs::read(&c2).unwrap(),
        "same config and seed must give byte-identical checkpoints"
    );
    assert_eq!(fs::read_to_string(&h1).unwrap(), fs::read_to_string(&h2).unwrap());

    let head = fs::read_to_string(&h1).unwrap();
    assert!(head.starts_with("epoch,train_loss,val_accuracy\n"));
}

#[test]
fn train_cbn_variant_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(dir.path());
    let ckpt = dir.path().join("cbn.ocdt");
    let mut args = vec![
        "train",
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--conditioning",
        "cbn",
    ];
    args.extend_from_slice(TINY_TRAIN);
    let out = run(&args);
    assert_exit(&out, 0, "cbn training smoke");
    assert!(ckpt.exists());
}

// ---------------------------------------------------------------------------
// config layering
// ---------------------------------------------------------------------------

#[test]
fn config_file_set_pairs_and_named_flags_layer_in_that_order() {
    let dir = tempfile::tempdir().unwrap();
    // Within a file the last assignment wins; --set beats the file; a named
    // flag beats --set. Each layered run must equal the equivalent direct run.
    let cfg = dir.path().join("synth.cfg");
    fs::write(
        &cfg,
        "# comment lines and blanks are skipped\n\nclasses=1,2\nn_per_class=3\npoint_count=700\nseed=9\nseed=1\n",
    )
    .unwrap();

    let run_synth = |out: &Path, extra: &[&str]| {
        let mut args = vec!["synth", "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let r = run(&args);
        assert_exit(&r, 0, "synth layering");
    };
    let manifest = |p: &Path| fs::read(p.join("manifest.json")).unwrap();

    // File only: seed=1 via last-wins.
    let via_file = dir.path().join("f");
    run_synth(&via_file, &["--config", cfg.to_str().unwrap()]);
    let direct1 = dir.path().join("g");
    run_synth(
        &direct1,
        &["--set", "classes=1,2", "--set", "n_per_class=3", "--set", "point_count=700", "--seed", "1"],
    );
    assert_eq!(manifest(&via_file), manifest(&direct1), "last file assignment wins");

    // --set overrides the file; the named flag overrides --set.
    let layered = dir.path().join("h");
    run_synth(
        &layered,
        &["--config", cfg.to_str().unwrap(), "--set", "seed=2", "--seed", "3"],
    );
    let direct3 = dir.path().join("i");
    run_synth(
        &direct3,
        &["--set", "classes=1,2", "--set", "n_per_class=3", "--set", "point_count=700", "--seed", "3"],
    );
    assert_eq!(manifest(&layered), manifest(&direct3), "flag > --set > file");
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

#[test]
fn reconstruct_handles_weak_models_corrupt_checkpoints_and_explicit_patches() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(dir.path());
    let (ckpt, _) = tiny_checkpoint(dir.path(), &dataset, "rec");

    // A barely-trained model has no probability near 0.99: empty mesh,
    // warning, exit 0, and a loadable (empty) OBJ.
    let empty_obj = dir.path().join("empty.obj");
    let out = run(&[
        "reconstruct",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        empty_obj.to_str().unwrap(),
        "--resolution",
        "16",
        "--iso",
        "0.99",
    ]);
    assert_exit(&out, 0, "empty mesh is a warning, not an error");
    assert!(stderr_of(&out).contains("empty OBJ"));
    let mesh = import_mesh(&empty_obj).unwrap();
    assert!(mesh.vertices.is_empty() && mesh.faces.is_empty());

    // Near init the field sits near 0.5 everywhere, so a low isolevel must
    // cut a real surface; the OBJ round-trips through the mesh loader.
    let full_obj = dir.path().join("full.obj");
    let out = run(&[
        "reconstruct",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        full_obj.to_str().unwrap(),
        "--resolution",
        "24",
        "--iso",
        "0.05",
    ]);
    assert_exit(&out, 0, "low-iso reconstruction");
    let mesh = import_mesh(&full_obj).unwrap();
    assert!(!mesh.vertices.is_empty() && !mesh.faces.is_empty());

    // An explicit patch file takes the PGM path.
    let class = ToothClass::new(19).unwrap();
    let (_, oracle) = generate_tooth(class, 0);
    let pgm = dir.path().join("patch.pgm");
    render_patch(&oracle).write_pgm(&pgm).unwrap();
    let out = run(&[
        "reconstruct",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--patch",
        pgm.to_str().unwrap(),
        "--out",
        dir.path().join("patched.obj").to_str().unwrap(),
        "--resolution",
        "12",
        "--iso",
        "0.05",
    ]);
    assert_exit(&out, 0, "explicit patch file");

    // Flipping one payload byte must fail the integrity check by name.
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 8] ^= 0x01;
    let bad = dir.path().join("bad.ocdt");
    fs::write(&bad, bytes).unwrap();
    let out = run(&[
        "reconstruct",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("never.obj").to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "corrupt checkpoint");
    assert!(
        stderr_of(&out).contains("crc mismatch"),
        "error must name the failed CRC:\n{}",
        stderr_of(&out)
    );
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[test]
fn eval_rejects_zero_repetitions_and_writes_deterministic_json() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(dir.path());
    let (ckpt, _) = tiny_checkpoint(dir.path(), &dataset, "eval");

    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--repetitions",
        "0",
    ]);
    assert_exit(&out, 1, "zero repetitions is a config error");

    let out = run(&[
        "eval",
        "--checkpoint",
        dir.path().join("missing.ocdt").to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "missing checkpoint is an I/O error");

    let j1 = dir.path().join("m1.json");
    let j2 = dir.path().join("m2.json");
    for j in [&j1, &j2] {
        let out = run(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--dataset",
            dataset.to_str().unwrap(),
            "--out",
            j.to_str().unwrap(),
            "--repetitions",
            "2",
            "--set",
            "resolution=16",
            "--set",
            "samples=500",
        ]);
        assert_exit(&out, 0, "tiny eval");
    }
    assert_eq!(
        fs::read(&j1).unwrap(),
        fs::read(&j2).unwrap(),
        "identical eval invocations must write identical JSON"
    );

    let doc = json_of(&j1);
    assert!(doc["pooled"]["failure_rate"]["mean"].is_number());
    assert_eq!(doc["protocol"]["repetitions"], 2);
    let per_class = doc["per_class"].as_object().unwrap();
    assert!(!per_class.is_empty());
    for key in per_class.keys() {
        assert!(
            key.len() == 2 && key.chars().all(|c| c.is_ascii_digit()),
            "per-class keys are zero-padded class numbers, got {key:?}"
        );
    }
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[test]
fn ablate_smoke_emits_four_finite_rows_and_identical_tables_on_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(dir.path());

    let j1 = dir.path().join("t1.json");
    let j2 = dir.path().join("t2.json");
    let mut tables = Vec::new();
    for j in [&j1, &j2] {
        // Five epochs cannot learn the shapes; a low eval isolevel keeps
        // every variant's test meshes non-empty so all metrics stay finite.
        let out = run(&[
            "ablate",
            "--dataset",
            dataset.to_str().unwrap(),
            "--out",
            j.to_str().unwrap(),
            "--seeds",
            "0",
            "--set",
            "features=16",
            "--set",
            "blocks=2",
            "--set",
            "max_epochs=5",
            "--set",
            "points_per_step=256",
            "--set",
            "batch_size=4",
            "--set",
            "val_points=500",
            "--set",
            "eval_resolution=16",
            "--set",
            "eval_samples=500",
            "--set",
            "eval_iso=0.05",
        ]);
        assert_exit(&out, 0, "ablate smoke");
        tables.push(String::from_utf8_lossy(&out.stdout).into_owned());
    }
    assert_eq!(fs::read(&j1).unwrap(), fs::read(&j2).unwrap());
    assert_eq!(tables[0], tables[1], "identical seeds must print identical tables");

    let doc = json_of(&j1);
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let expected = ["CBN Only", "CX Only", "CBN+Tooth Class", "CX+Tooth Class"];
    for (row, name) in rows.iter().zip(expected) {
        assert_eq!(row["variant"], name);
        for metric in ["iou", "chamfer_l1", "normal_consistency", "precision"] {
            let v = row["mean"][metric].as_f64();
            assert!(
                v.is_some_and(f64::is_finite),
                "{name}/{metric} must be finite, got {:?}",
                row["mean"][metric]
            );
        }
        assert!(tables[0].contains(name), "table must print {name}");
    }
    assert!(doc["directional"]["cx_class_ge_cx_only"].is_boolean());
}

// ---------------------------------------------------------------------------
// assemble
// ---------------------------------------------------------------------------

#[test]
fn assemble_writes_an_obj_that_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(dir.path());
    let (ckpt, _) = tiny_checkpoint(dir.path(), &dataset, "jaw");

    let obj = dir.path().join("jaw.obj");
    let out = run(&[
        "assemble",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        obj.to_str().unwrap(),
        "--resolution",
        "12",
        "--set",
        "iso=0.05",
    ]);
    assert_exit(&out, 0, "full-mouth assembly");
    let mesh = import_mesh(&obj).unwrap();
    assert!(!mesh.vertices.is_empty() && !mesh.faces.is_empty());

    // A single arch is also a valid request.
    let upper = dir.path().join("upper.obj");
    let out = run(&[
        "assemble",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        upper.to_str().unwrap(),
        "--resolution",
        "12",
        "--set",
        "iso=0.05",
        "--set",
        "classes=1-16",
    ]);
    assert_exit(&out, 0, "upper arch only");
    assert!(import_mesh(&upper).is_ok());
}

// ---------------------------------------------------------------------------
// usage surface
// ---------------------------------------------------------------------------

#[test]
fn help_version_and_keys_succeed_and_malformed_set_pairs_fail() {
    assert_exit(&run(&["--help"]), 0, "--help");
    assert_exit(&run(&["--version"]), 0, "--version");

    let keys = run(&["keys"]);
    assert_exit(&keys, 0, "keys");
    let text = String::from_utf8_lossy(&keys.stdout).into_owned();
    assert!(text.contains("[train]") && text.contains("learning_rate"));

    let out = run(&["synth", "--set", "no-equals-sign"]);
    assert_exit(&out, 1, "--set needs KEY=VALUE");

    let out = run(&["frobnicate"]);
    assert_exit(&out, 1, "unknown subcommand");
}
