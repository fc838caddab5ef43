use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dbsam::report::{parse_loss_csv, parse_metrics_csv};
use dbsam::{checkpoint, dataset};
use dbsam_core::Tensor;

fn dbsam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbsam")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dbsam(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a failing command and returns its single diagnostic line.
fn fails(args: &[&str]) -> String {
    let out = dbsam(args);
    assert!(!out.status.success(), "{args:?} succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
# tiny network for quick runs
image_size_vit = 16
patch_size = 8
embed_dim = 8
num_heads = 2
depth = 2
mlp_ratio = 2
se_reduction = 2
image_size_conv = 8
out_channels = 8
deform_heads = 2
num_points = 2
gate_reduction = 2
batch_size = 2
epochs = 2
";

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        names.sort();
        for f in names {
            out.push((f.strip_prefix(dir).unwrap().display().to_string(), fs::read(&f).unwrap()));
        }
    }
    out
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        ok(&["gen-data", "--n", "4", "--size", "32", "--seed", seed, "--out", p(out)]);
    }
    assert_eq!(files(&a), files(&b));
    assert_ne!(files(&a), files(&c));
    assert_eq!(dataset::read(&a).unwrap().len(), 4);
}

#[test]
fn gen_data_with_no_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    ok(&["gen-data", "--n", "0", "--out", p(&out)]);
    assert!(dataset::read(&out).unwrap().is_empty());
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run, cfg, report) = (dir.path().join("data"), dir.path().join("run"), dir.path().join("tiny.cfg"), dir.path().join("eval/metrics.csv"));
    fs::write(&cfg, TINY).unwrap();
    ok(&["gen-data", "--n", "5", "--size", "32", "--seed", "1", "--out", p(&data)]);
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);

    let log = parse_loss_csv(&fs::read_to_string(run.join("loss.csv")).unwrap()).unwrap();
    assert_eq!(log.len(), 2 * 3);
    assert!(log.iter().all(|l| l.loss.is_finite()));
    assert_eq!(log[0].lr, 1e-4);

    let stdout = ok(&["eval", "--ckpt", p(&run.join("model.dbsm")), "--data", p(&data), "--tolerance", "1", "--report", p(&report)]);
    assert!(stdout.contains("mean DSC"));
    let r = parse_metrics_csv(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.per_sample.len(), 5);

    let model = checkpoint::load_with_config(&run.join("model.dbsm")).unwrap();
    assert_eq!(model.config.epochs, 2);
    let again = dbsam_core::train::evaluate(&model, &dbsam_core::train::prepare(&dataset::read(&data).unwrap(), &model).unwrap(), 1.0).unwrap();
    assert_eq!(again, r);
}

#[test]
fn same_seed_runs_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = (dir.path().join("data"), dir.path().join("tiny.cfg"));
    fs::write(&cfg, TINY).unwrap();
    ok(&["gen-data", "--n", "3", "--size", "16", "--out", p(&data)]);
    let runs: Vec<_> = ["r1", "r2"].iter().map(|r| dir.path().join(r)).collect();
    for r in &runs {
        ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(r)]);
    }
    for f in ["loss.csv", "model.dbsm", "config.txt"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_config_key_is_a_startup_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let err = fails(&["train", "--config", p(&cfg), "--data", "nowhere", "--out", p(&dir.path().join("run"))]);
    assert!(err.contains("unknown config key \"learning_rate\""), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn grid_inconsistency_is_a_startup_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "image_size_conv = 64\n").unwrap();
    let err = fails(&["train", "--config", p(&cfg), "--data", "nowhere", "--out", p(&dir.path().join("run"))]);
    assert!(err.contains("does not match ViT token grid"), "{err}");
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg, run) = (dir.path().join("data"), dir.path().join("tiny.cfg"), dir.path().join("run"));
    fs::write(&cfg, TINY.replace("epochs = 2", "epochs = 1")).unwrap();
    ok(&["gen-data", "--n", "2", "--size", "16", "--out", p(&data)]);
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    let ckpt = run.join("model.dbsm");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    fs::write(&ckpt, bytes).unwrap();
    let err = fails(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--report", p(&dir.path().join("r.csv"))]);
    assert!(err.contains("bad magic"), "{err}");
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(&["train", "--data", p(&dir.path().join("none")), "--out", p(&dir.path().join("run"))]);
    assert!(err.contains("manifest.csv"), "{err}");
}

#[test]
fn slice_volume_keeps_foreground_slices_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let (vol, out) = (dir.path().join("ct-01.dbsm"), dir.path().join("slices"));
    let (dz, h, w) = (4, 12, 10);
    let volume = Tensor::from_fn(&[dz, h, w], |i| (i % 37) as f64 * 3.0 - 20.0);
    // slice 2 is empty, the others hold a 4×4 block
    let mask = Tensor::from_fn(&[dz, h, w], |i| {
        let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
        (z != 2 && (3..7).contains(&y) && (2..6).contains(&x)) as u8 as f64
    });
    dataset::write_volume(&vol, &volume, &mask).unwrap();
    let stdout = ok(&["slice-volume", "--in", p(&vol), "--min-fg", "1", "--size", "24", "--out", p(&out)]);
    assert!(stdout.contains("wrote 3 of 4 slices"), "{stdout}");
    let samples = dataset::read(&out).unwrap();
    let ids: Vec<_> = samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["ct_01_z0000", "ct_01_z0001", "ct_01_z0003"]);
    assert!(samples.iter().all(|s| s.size() == (24, 24) && s.image.shape() == [3, 24, 24]));
}

#[test]
fn empty_volume_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let vol = dir.path().join("v.dbsm");
    dataset::write_volume(&vol, &Tensor::zeros(&[0, 4, 4]), &Tensor::zeros(&[0, 4, 4])).unwrap();
    let err = fails(&["slice-volume", "--in", p(&vol), "--out", p(&dir.path().join("o"))]);
    assert!(err.contains("contract violation"), "{err}");
}

#[test]
fn grad_check_names_the_faulty_block() {
    let err = fails(&["grad-check", "--inject-fault", "fusion_gate"]);
    assert!(err.contains("in: fusion_gate"), "{err}");
    let out = dbsam(&["grad-check", "--inject-fault", "nonsense"]);
    assert!(!out.status.success());
}

#[test]
fn grad_check_passes() {
    let stdout = ok(&["grad-check"]);
    assert_eq!(stdout.lines().filter(|l| l.ends_with("pass")).count(), dbsam_core::gradcheck::BLOCKS.len());
}

#[test]
fn ablate_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg, out) = (dir.path().join("data"), dir.path().join("tiny.cfg"), dir.path().join("ablation"));
    fs::write(&cfg, TINY).unwrap();
    ok(&["gen-data", "--n", "2", "--size", "16", "--out", p(&data)]);
    let stdout = ok(&["ablate", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    for name in ["decoder-only", "+channel-attention", "+bilateral", "+fusion"] {
        assert!(stdout.contains(name), "{stdout}");
    }
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(out.join("decoder-only/model.dbsm").is_file());
}

#[test]
fn export_frozen_feeds_pretrained() {
    let dir = tempfile::tempdir().unwrap();
    let (vit, data, cfg, run) = (dir.path().join("vit.dbsm"), dir.path().join("data"), dir.path().join("c.cfg"), dir.path().join("run"));
    let donor_cfg = dir.path().join("donor.cfg");
    fs::write(&donor_cfg, format!("{TINY}vit_seed = 99\n")).unwrap();
    ok(&["export-frozen", "--config", p(&donor_cfg), "--out", p(&vit)]);
    fs::write(&cfg, format!("{TINY}epochs = 1\npretrained = {}\n", p(&vit)).replace("epochs = 2\n", "")).unwrap();
    ok(&["gen-data", "--n", "2", "--size", "16", "--out", p(&data)]);
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    let model = checkpoint::load_with_config(&run.join("model.dbsm")).unwrap();
    let frozen = dbsam::dbsm::load(&vit).unwrap();
    for r in &frozen {
        assert!(model.store.by_name(&r.name).unwrap().value.bit_eq(&r.tensor), "{}", r.name);
    }
}
