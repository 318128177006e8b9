//! End-to-end tests of the pvgc binary: artifact layout, precedence,
//! reproducibility, exit codes, and the file-backed dataset path.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pvgc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvgc"))
        .args(args)
        .current_dir(cwd)
        .env("PVGC_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("no signal")
}

/// Fast micro training run: 3 classes x 5 samples, 2 epochs.
fn quick_train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--synthetic",
        "--preset",
        "micro",
        "--epochs",
        "2",
        "--set",
        "synthetic_per_class=5",
        "--set",
        "batch_size=4",
        "--set",
        "warmup_epochs=1",
        "--seed",
        "1",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    pvgc(&args, dir)
}

#[test]
fn train_writes_all_artifacts_and_history_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = quick_train(dir.path(), "run", &[]);
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    for f in ["resolved.cfg", "history.tsv", "best.ckpt", "metrics.txt"] {
        assert!(dir.path().join("run").join(f).exists(), "missing {f}");
    }
    let history = std::fs::read_to_string(dir.path().join("run/history.tsv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines.len(), 3, "header plus one row per epoch:\n{history}");
    assert_eq!(lines[0], "epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc");
    assert!(lines[1].starts_with("1\t") && lines[2].starts_with("2\t"));
}

#[test]
fn resolved_config_reproduces_the_run_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let o = quick_train(dir.path(), "a", &[]);
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    let cfg = dir.path().join("a/resolved.cfg");
    let o = pvgc(&["train", "--config", cfg.to_str().unwrap(), "--out", "b"], dir.path());
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    for f in ["resolved.cfg", "history.tsv", "best.ckpt", "metrics.txt"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between the run and its echo");
    }
}

#[test]
fn set_override_beats_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "epochs = 7\nsynthetic_per_class = 5\nbatch_size = 4\nwarmup_epochs = 1\n")
        .unwrap();
    let o = pvgc(
        &["train", "--config", "run.cfg", "--set", "epochs=1", "--set", "warmup_epochs=0", "--out", "r"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    let resolved = std::fs::read_to_string(dir.path().join("r/resolved.cfg")).unwrap();
    assert!(resolved.contains("epochs = 1\n"), "{resolved}");
    let history = std::fs::read_to_string(dir.path().join("r/history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 2, "one epoch trained");
}

#[test]
fn config_errors_exit_2_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "image = 32\nwat = 5\n").unwrap();
    let o = pvgc(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("wat") && msg.contains("line 2"), "{msg}");

    std::fs::write(dir.path().join("bad2.cfg"), "epochs = banana\n").unwrap();
    let o = pvgc(&["train", "--config", "bad2.cfg"], dir.path());
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("banana") && msg.contains("line 1"), "{msg}");
}

#[test]
fn eval_reproduces_training_time_validation_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let o = quick_train(dir.path(), "run", &[]);
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));

    let history = std::fs::read_to_string(dir.path().join("run/history.tsv")).unwrap();
    let best_val_acc = history
        .lines()
        .skip(1)
        .map(|l| l.rsplit('\t').next().unwrap().to_string())
        .max_by(|a, b| a.parse::<f64>().unwrap().partial_cmp(&b.parse::<f64>().unwrap()).unwrap())
        .unwrap();

    let o = pvgc(&["eval", "run/best.ckpt", "--split", "val"], dir.path());
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("accuracy = ")).unwrap();
    let evaluated = line.trim_start_matches("accuracy = ");
    assert_eq!(evaluated, best_val_acc, "eval accuracy differs from the best history row\n{out}");
}

#[test]
fn eval_with_mismatched_architecture_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let o = quick_train(dir.path(), "run", &[]);
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    let o = pvgc(&["eval", "run/best.ckpt", "--set", "stages=4x1,8x1,12x1,16x1"], dir.path());
    assert_eq!(code(&o), 5, "stderr: {}", stderr(&o));
}

#[test]
fn divergent_run_exits_4_naming_epoch_and_batch() {
    let dir = tempfile::tempdir().unwrap();
    let o = quick_train(dir.path(), "run", &["--set", "start_lr=1e200", "--set", "peak_lr=1e200"]);
    assert_eq!(code(&o), 4, "stdout: {} stderr: {}", stdout(&o), stderr(&o));
    let msg = stderr(&o);
    assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}");
}

#[test]
fn zero_epoch_run_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = pvgc(
        &["train", "--synthetic", "--preset", "micro", "--epochs", "0", "--set", "synthetic_per_class=5", "--seed", "1", "--out", "run"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    let history = std::fs::read_to_string(dir.path().join("run/history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 1, "header only");
    assert!(dir.path().join("run/best.ckpt").exists());
    assert!(!dir.path().join("run/metrics.txt").exists(), "no validation report without epochs");
}

#[test]
fn gradcheck_passes_and_lists_every_op_once() {
    let dir = tempfile::tempdir().unwrap();
    let o = pvgc(&["gradcheck", "--instances", "2", "--max-coords", "2"], dir.path());
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    let out = stdout(&o);
    let op_lines: Vec<&str> = out.lines().filter(|l| l.starts_with("op ")).collect();
    let mut names: Vec<&str> = op_lines.iter().map(|l| l.split_whitespace().nth(1).unwrap()).collect();
    let total = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), total, "an op is listed twice:\n{out}");
    for expected in ["matmul", "conv2d", "caps_predict", "batch_norm_train", "reduce_max"] {
        assert!(names.contains(&expected), "{expected} missing:\n{out}");
    }
    assert!(out.contains("model end-to-end"), "{out}");
    assert!(out.contains("gradient check passed"), "{out}");
}

#[test]
fn injected_backward_fault_exits_6_naming_the_op() {
    let dir = tempfile::tempdir().unwrap();
    let o = pvgc(&["gradcheck", "--instances", "2", "--max-coords", "2", "--inject-backward-fault", "gelu"], dir.path());
    assert_eq!(code(&o), 6, "stdout: {}", stdout(&o));
    assert!(stderr(&o).contains("gelu"), "stderr: {}", stderr(&o));
}

#[test]
fn inspect_reports_both_heads_and_the_stage_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let o = pvgc(&["inspect", "--preset", "tiny"], dir.path());
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("capsule head") && out.contains("pooling head"), "{out}");
    assert!(out.contains("5929440") && out.contains("6287847"), "totals changed:\n{out}");
    for grid in ["64x64", "32x32", "16x16", "8x8"] {
        assert!(out.contains(grid), "missing {grid} in schedule:\n{out}");
    }
}

// ---- file-backed dataset fixtures ----

/// Writes per-class striped 8x8 PNGs plus a manifest covering all seven
/// vocabulary classes. Training-time preprocessing rescales them.
fn write_image_dataset(root: &Path, per_class: usize) -> (PathBuf, PathBuf) {
    let classes = ["akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"];
    let images = root.join("images");
    std::fs::create_dir_all(&images).unwrap();
    let mut csv = String::from("image_id,dx\n");
    for (k, class) in classes.iter().enumerate() {
        for i in 0..per_class {
            let id = format!("img_{class}_{i}");
            let img = image::RgbImage::from_fn(8, 8, |x, y| {
                let v = (31 * k + 17 * i + (x + y * 8) as usize % 7) as u8;
                image::Rgb([v, v.wrapping_mul(3), 255 - v])
            });
            img.save(images.join(format!("{id}.png"))).unwrap();
            csv.push_str(&format!("{id},{class}\n"));
        }
    }
    let manifest = root.join("metadata.csv");
    std::fs::write(&manifest, csv).unwrap();
    (manifest, images)
}

#[test]
fn trains_from_a_manifest_of_png_files() {
    let dir = tempfile::tempdir().unwrap();
    write_image_dataset(dir.path(), 10);
    let o = pvgc(
        &[
            "train",
            "--preset",
            "micro",
            "--epochs",
            "1",
            "--set",
            "classes=7",
            "--set",
            "synthetic=false",
            "--set",
            "manifest=metadata.csv",
            "--set",
            "images=images",
            "--set",
            "batch_size=8",
            "--set",
            "warmup_epochs=0",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("56 train / 7 val samples"), "stratified 80/10/10 of 70:\n{out}");
    assert!(dir.path().join("run/best.ckpt").exists());
}

#[test]
fn missing_image_files_exit_3_listing_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (_, images) = write_image_dataset(dir.path(), 3);
    std::fs::remove_file(images.join("img_mel_1.png")).unwrap();
    std::fs::remove_file(images.join("img_df_0.png")).unwrap();
    let o = pvgc(
        &["train", "--set", "synthetic=false", "--set", "manifest=metadata.csv", "--set", "images=images", "--set", "classes=7"],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
    let msg = stderr(&o);
    assert!(msg.contains("img_mel_1") && msg.contains("img_df_0"), "{msg}");
}

#[test]
fn unknown_label_exits_3_naming_the_row() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::write(dir.path().join("metadata.csv"), "image_id,dx\na,nv\nb,warts\n").unwrap();
    let o = pvgc(
        &["train", "--set", "synthetic=false", "--set", "manifest=metadata.csv", "--set", "images=images", "--set", "classes=7"],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
    let msg = stderr(&o);
    assert!(msg.contains("row 3") && msg.contains("warts"), "{msg}");
}
