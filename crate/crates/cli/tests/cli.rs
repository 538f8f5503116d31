//! End-to-end runs of the `vaemap` binary: every subcommand against small
//! generated datasets, exit-code behavior, and the reproducibility contracts
//! (identical reruns, bit-exact replay from saved maps, inputs never
//! mutated).

use std::path::{Path, PathBuf};
use std::process::Output;

use vaemap_core::mapio::{load_image, read_raw_map};
use vaemap_core::model::Checkpoint;

fn vaemap(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_vaemap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "expected exit {code}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// A defect-texture training config small enough to train in about a second.
fn small_defect_config() -> &'static str {
    r#"
[run]
seed = 11

[data]
source = "defect"
n_normal = 6
n_abnormal = 3
resolution = 32

[model]
latent_dim = 4
stages = [4, 8]
epochs = 2
batch_size = 4
lr = 0.001
"#
}

#[test]
fn train_is_reproducible_and_writes_a_complete_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", small_defect_config());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let output = vaemap(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_code(&output, 0);
    }

    let ckpt_a = std::fs::read(out_a.join("model.ckpt")).unwrap();
    let ckpt_b = std::fs::read(out_b.join("model.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "same seed must give identical checkpoints");

    let curve = std::fs::read_to_string(out_a.join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,recon,kl,total\n"));
    assert_eq!(curve.lines().count(), 3);

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    for rel in manifest["outputs"].as_array().unwrap() {
        let path = out_a.join(rel.as_str().unwrap());
        assert!(path.is_file(), "manifest lists missing file {}", path.display());
    }
    assert!(out_a.join("config.toml").is_file());
    assert!(
        !out_a.join(".lock").exists(),
        "lock must be released when the run ends"
    );
}

#[test]
fn train_aborts_cleanly_on_missing_dataset_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "run.toml",
        "[data]\nsource = \"folder\"\nroot = \"/no/such/tree\"\ncategory = \"widget\"\n",
    );
    let out = dir.path().join("run");
    let output = vaemap(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_code(&output, 3);
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", "[model]\nlatent_dims = 4\n");
    let output = vaemap(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_code(&output, 2);
    assert!(String::from_utf8_lossy(&output.stderr).contains("latent_dims"));
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", small_defect_config());
    let out = dir.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".lock"), b"").unwrap();
    let output = vaemap(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_code(&output, 2);
}

#[test]
fn attend_emits_one_map_per_dimension_plus_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", small_defect_config());
    let train_out = dir.path().join("train");
    assert_code(
        &vaemap(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap(),
        ]),
        0,
    );

    let attend_config = write_config(
        dir.path(),
        "attend.toml",
        &format!(
            "{}\n[attention]\nimages = 2\n\n",
            small_defect_config().replace(
                "[model]",
                &format!(
                    "[model]\ncheckpoint = \"{}\"",
                    train_out.join("model.ckpt").display()
                )
            )
        ),
    );
    let attend_out = dir.path().join("attend");
    assert_code(
        &vaemap(&[
            "attend",
            "--config",
            attend_config.to_str().unwrap(),
            "--out",
            attend_out.to_str().unwrap(),
            "--layer",
            "conv2",
        ]),
        0,
    );

    for i in 0..2 {
        assert!(attend_out.join(format!("attend/img{i:03}_input.png")).is_file());
        let mut names: Vec<String> = (0..4).map(|d| format!("img{i:03}_dim{d:02}")).collect();
        names.push(format!("img{i:03}_aggregate"));
        assert_eq!(names.len(), 4 + 1, "latent_dim + 1 maps per image");
        for name in names {
            let png = attend_out.join(format!("attend/{name}.png"));
            let raw = attend_out.join(format!("attend/{name}.raw"));
            assert!(png.is_file(), "{name}.png missing");
            assert!(raw.is_file(), "{name}.raw missing");
            let decoded = load_image(&png, 1).unwrap();
            let exact = read_raw_map(&raw).unwrap();
            assert_eq!(decoded.shape()[0], 32);
            assert_eq!(exact.shape(), &[32, 32]);
            for (px, v) in decoded.iter().zip(exact.iter()) {
                assert!(
                    (px - v).abs() <= 0.5 / 255.0 + 1e-12,
                    "{name}: png {px} vs raw {v} beyond 8-bit quantization"
                );
            }
        }
    }
}

fn localize_config(base_defect: &str, extra: &str) -> String {
    format!("{base_defect}\n{extra}")
}

#[test]
fn localize_writes_per_method_rows_and_replays_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "run.toml",
        &localize_config(small_defect_config(), ""),
    );
    let fresh = dir.path().join("fresh");
    assert_code(
        &vaemap(&[
            "localize",
            "--config",
            config.to_str().unwrap(),
            "--out",
            fresh.to_str().unwrap(),
        ]),
        0,
    );

    let csv = std::fs::read_to_string(fresh.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "category,method,layer,auroc,best_iou,best_threshold,n_pos,n_neg"
    );
    assert_eq!(lines.len(), 3, "header plus one row per method:\n{csv}");
    assert!(lines[1].starts_with("synthetic-defect,attention,"));
    assert!(lines[2].starts_with("synthetic-defect,recon,"));

    for idx in 0..3 {
        assert!(fresh
            .join(format!("maps/synthetic-defect/{idx:04}_mask.png"))
            .is_file());
        assert!(fresh
            .join(format!("maps/synthetic-defect/{idx:04}_attention.raw"))
            .is_file());
        assert!(fresh
            .join(format!("maps/synthetic-defect/{idx:04}_recon.raw"))
            .is_file());
    }

    let replay_config = write_config(
        dir.path(),
        "replay.toml",
        &localize_config(
            small_defect_config(),
            &format!(
                "[eval]\nfrom_maps = \"{}\"\n",
                fresh.join("maps").display()
            ),
        ),
    );
    let replay = dir.path().join("replay");
    assert_code(
        &vaemap(&[
            "localize",
            "--config",
            replay_config.to_str().unwrap(),
            "--out",
            replay.to_str().unwrap(),
        ]),
        0,
    );
    let replayed = std::fs::read_to_string(replay.join("report.csv")).unwrap();
    assert_eq!(replayed, csv, "replay from saved maps must be bit-exact");
}

#[test]
fn gen_data_exports_a_tree_localize_reads_without_mutating() {
    let dir = tempfile::tempdir().unwrap();
    let gen_config = write_config(
        dir.path(),
        "gen.toml",
        r#"
[data]
source = "defect"
n_normal = 5
n_abnormal = 2
resolution = 32
category = "widget"
"#,
    );
    let gen_out = dir.path().join("gen");
    assert_code(
        &vaemap(&[
            "gen-data",
            "--config",
            gen_config.to_str().unwrap(),
            "--out",
            gen_out.to_str().unwrap(),
            "--seed",
            "3",
        ]),
        0,
    );
    let tree = gen_out.join("dataset");
    assert!(tree.join("widget/train/good/000.png").is_file());
    assert!(tree.join("widget/ground_truth/defect/000_mask.png").is_file());

    let digest_before = tree_digest(&tree);
    let loc_config = write_config(
        dir.path(),
        "loc.toml",
        &format!(
            r#"
[data]
source = "folder"
root = "{}"

[model]
latent_dim = 4
stages = [4, 8]
epochs = 1
batch_size = 4
"#,
            tree.display()
        ),
    );
    let loc_out = dir.path().join("loc");
    assert_code(
        &vaemap(&[
            "localize",
            "--config",
            loc_config.to_str().unwrap(),
            "--out",
            loc_out.to_str().unwrap(),
        ]),
        0,
    );
    assert_eq!(
        tree_digest(&tree),
        digest_before,
        "localize must not touch its inputs"
    );
    let csv = std::fs::read_to_string(loc_out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("widget,attention,"));
    assert!(csv.contains("widget,recon,"));
}

fn tree_digest(root: &Path) -> String {
    let mut paths: Vec<PathBuf> = walk(root);
    paths.sort();
    let mut acc = String::new();
    for p in paths {
        acc.push_str(&format!(
            "{}:{}\n",
            p.display(),
            vaemap_core::util::sha256_hex(&std::fs::read(&p).unwrap())
        ));
    }
    vaemap_core::util::sha256_hex(acc.as_bytes())
}

fn walk(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

fn shapes_distrain_config(lambda: f64) -> String {
    format!(
        r#"
[run]
seed = 21

[data]
source = "shapes"
resolution = 16
cardinalities = [2, 2, 3, 3, 3]

[model]
latent_dim = 3
stages = [4, 8]

[disentangle]
lambda = {lambda}
gamma = 2.0
steps = 1
batch_size = 4
subset = 24
eval_every = 1
n_votes = 10
batch_per_vote = 4
std_sample = 16
eval_images = 2
"#
    )
}

#[test]
fn distrain_lambda_settings_share_the_data_and_noise_streams() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for (name, lambda) in [("base", 0.0), ("ad", 1.0)] {
        let config = write_config(
            dir.path(),
            &format!("{name}.toml"),
            &shapes_distrain_config(lambda),
        );
        let out = dir.path().join(name);
        assert_code(
            &vaemap(&[
                "distrain",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]),
            0,
        );
        let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        let lines: Vec<String> = csv.lines().map(str::to_string).collect();
        assert_eq!(
            lines[0],
            "step,recon,kl,tc,ad,metric,eval_overlap,eval_recon"
        );
        assert_eq!(lines.len(), 2, "one step, one eval row:\n{csv}");
        rows.push(lines[1].clone());
        assert!(out.join("model.ckpt").is_file());
        Checkpoint::load(&out.join("model.ckpt")).unwrap();
    }
    let base: Vec<&str> = rows[0].split(',').collect();
    let ad: Vec<&str> = rows[1].split(',').collect();
    for (i, field) in ["step", "recon", "kl", "tc"].iter().enumerate() {
        assert_eq!(
            base[i], ad[i],
            "{field} must match at step 1: identical init, batch, and noise"
        );
    }
    assert_eq!(base[4], "0.000000", "baseline logs no overlap term");
}

#[test]
fn distrain_then_dismetric_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", &shapes_distrain_config(1.0));
    let train_out = dir.path().join("train");
    assert_code(
        &vaemap(&[
            "distrain",
            "--config",
            config.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap(),
        ]),
        0,
    );

    let metric_config = write_config(
        dir.path(),
        "metric.toml",
        &shapes_distrain_config(1.0).replace(
            "[model]",
            &format!(
                "[model]\ncheckpoint = \"{}\"",
                train_out.join("model.ckpt").display()
            ),
        ),
    );
    let metric_out = dir.path().join("metric");
    assert_code(
        &vaemap(&[
            "dismetric",
            "--config",
            metric_config.to_str().unwrap(),
            "--out",
            metric_out.to_str().unwrap(),
        ]),
        0,
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(metric_out.join("dismetric.json")).unwrap())
            .unwrap();
    let score = report["score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score));
    let overlap = report["mean_pairwise_overlap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&overlap));
    assert!(report["reconstruction_error"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["votes"].as_array().unwrap().len(), 5);
}

#[test]
fn demo_grid_is_deterministic_with_ten_columns() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "run.toml",
        r#"
[run]
seed = 5

[data]
source = "digits"
resolution = 16
n_per_class = 2
normal_digit = 1

[model]
latent_dim = 2
stages = [4]
epochs = 1
batch_size = 2
"#,
    );
    let mut grids = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        assert_code(
            &vaemap(&[
                "demo",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]),
            0,
        );
        grids.push(std::fs::read(out.join("demo_grid.png")).unwrap());
    }
    assert_eq!(grids[0], grids[1], "same seed must give identical panels");

    let grid = load_image(&dir.path().join("a/demo_grid.png"), 1).unwrap();
    assert_eq!(grid.shape()[0], 2 * 16 + 2);
    assert_eq!(grid.shape()[1], 10 * 16 + 9 * 2, "ten columns of cells");
    assert!(grid.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn dismetric_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", &shapes_distrain_config(1.0));
    let output = vaemap(&[
        "dismetric",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_code(&output, 2);
}
