//! End-to-end runs of the `migs` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_migs");

/// Small model at 16×16 with 1 training task and 4 test tasks.
const TINY: &str = r#"{
  "seed": 7,
  "dataset": {"num_tasks": 5, "num_test_tasks": 4, "scenes_per_task": 14, "test_scenes_per_task": 4,
              "max_shots": 10, "image_height": 16, "image_width": 16},
  "model": {
    "gcn": {"embed_dim": 6, "num_layers": 1, "propagation_hidden": 8, "update_hidden": 8,
            "box_head_hidden": 6, "mask_size": 4},
    "generator": {"num_blocks": 2, "channels": [6, 4], "modulation_width": 4, "latent_dim": 4},
    "discriminator": {"global_channels": [4, 4], "object_channels": [4, 4], "crop_size": 8}
  },
  "inner": {"k": 2, "batch_size": 2},
  "outer": {"iterations": 4, "checkpoint_every": 2},
  "eval": {"shots": [5, 10], "finetune_steps": 2, "prd": {"num_clusters": 4, "num_angles": 101, "restarts": 2}}
}"#;

fn migs(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A temp dir holding `tiny.json` (optionally patched) and a generated dataset.
struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), config).unwrap();
        let w = Self { dir };
        ok(&w.run(&["gen-data", "--config", "tiny.json", "--out", "data"]));
        w
    }

    fn tiny() -> Self {
        Self::new(TINY)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        migs(args, self.dir.path())
    }

    fn train(&self, cmd: &str, out: &str) -> Output {
        self.run(&[cmd, "--config", "tiny.json", "--data", "data", "--out", out])
    }
}

fn with_config(patch: serde_json::Value) -> String {
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    merge(&mut v, patch);
    v.to_string()
}

fn merge(a: &mut serde_json::Value, b: serde_json::Value) {
    match (a, b) {
        (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_manifest_and_is_byte_identical() {
    let w = Workspace::tiny();
    assert!(w.path("data/manifest.json").is_file());
    ok(&w.run(&["gen-data", "--config", "tiny.json", "--out", "again"]));
    assert_eq!(tree(&w.path("data")), tree(&w.path("again")));
}

#[test]
fn missing_config_exits_1_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = migs(
        &["gen-data", "--config", "nope.json", "--out", "d"],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nope.json"), "{}", stderr(&out));
}

#[test]
fn malformed_config_and_bad_flags_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\"seed\": ").unwrap();
    assert_eq!(
        code(&migs(
            &["gen-data", "--config", "bad.json", "--out", "d"],
            dir.path()
        )),
        1
    );
    std::fs::write(dir.path().join("bad.json"), "{\"sed\": 1}").unwrap();
    assert_eq!(
        code(&migs(
            &["gen-data", "--config", "bad.json", "--out", "d"],
            dir.path()
        )),
        1
    );
    assert_eq!(code(&migs(&["gen-data", "--bogus"], dir.path())), 1);
}

#[test]
fn unwritable_output_exits_2() {
    let w = Workspace::tiny();
    std::fs::write(w.path("blocker"), "file").unwrap();
    let out = w.run(&["gen-data", "--config", "tiny.json", "--out", "blocker/sub"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn missing_dataset_exits_2() {
    let w = Workspace::tiny();
    let out = w.run(&[
        "meta-train",
        "--config",
        "tiny.json",
        "--data",
        "absent",
        "--out",
        "m",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn divergence_exits_3() {
    let w = Workspace::new(&with_config(
        serde_json::json!({"outer": {"divergence_bound": 1e-6}}),
    ));
    let out = w.train("meta-train", "m");
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let out = w.train("baseline-train", "b");
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn checkpoint_version_mismatch_exits_4() {
    let w = Workspace::tiny();
    let ckpt = PathBuf::from(ok(&w.train("meta-train", "m")).trim());
    let mut bytes = std::fs::read(w.path("m/checkpoints/final.ckpt")).unwrap();
    assert_eq!(
        w.path("m/checkpoints/final.ckpt"),
        w.path(ckpt.to_str().unwrap())
    );
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(w.path("old.ckpt"), &bytes).unwrap();
    let out = w.run(&[
        "finetune-eval",
        "--config",
        "tiny.json",
        "--checkpoint",
        "old.ckpt",
        "--data",
        "data",
        "--out",
        "e",
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn training_writes_curve_with_one_row_per_iteration() {
    let w = Workspace::tiny();
    // The baseline counts optimiser steps: one row per k × tasks_per_step = 2 steps.
    for (cmd, dir, stride) in [("meta-train", "m", 1), ("baseline-train", "b", 2)] {
        ok(&w.train(cmd, dir));
        let curve = std::fs::read_to_string(w.path(&format!("{dir}/curve.csv"))).unwrap();
        let mut lines = curve.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header[0], "iteration");
        for col in [
            "box_l1",
            "gan_global_g",
            "gan_obj_g",
            "aux",
            "perceptual",
            "image_l1",
            "total_g",
            "total_d",
        ] {
            assert!(header.contains(&col), "{cmd}: missing {col}");
        }
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), 4, "{cmd}");
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), header.len());
            assert_eq!(r[0].parse::<usize>().unwrap(), (i + 1) * stride);
            assert!(r[2..].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
        }
        let ckpts = [2 * stride, 4 * stride].map(|n| format!("checkpoints/iter_{n}.ckpt"));
        for f in [
            "config.json",
            "run.json",
            "checkpoints/final.ckpt",
            &ckpts[0],
            &ckpts[1],
        ] {
            assert!(w.path(&format!("{dir}/{f}")).is_file(), "{cmd}: {f}");
        }
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let w = Workspace::tiny();
    for (cmd, a, b, mid, end) in [
        ("meta-train", "a", "b", 2, 4),
        ("baseline-train", "ba", "bb", 4, 8),
    ] {
        ok(&w.train(cmd, a));
        ok(&w.train(cmd, b));
        let ckpts = w.path(&format!("{b}/checkpoints"));
        std::fs::copy(
            ckpts.join(format!("iter_{mid}.ckpt")),
            ckpts.join("latest.ckpt"),
        )
        .unwrap();
        std::fs::remove_file(ckpts.join("final.ckpt")).unwrap();
        ok(&w.run(&[
            cmd,
            "--config",
            "tiny.json",
            "--data",
            "data",
            "--out",
            b,
            "--resume",
        ]));
        let last = format!("checkpoints/iter_{end}.ckpt");
        for f in ["checkpoints/final.ckpt", &last, "curve.csv"] {
            let x = std::fs::read(w.path(&format!("{a}/{f}"))).unwrap();
            let y = std::fs::read(w.path(&format!("{b}/{f}"))).unwrap();
            assert!(x == y, "{cmd}: {f} differs after resume");
        }
    }
}

#[test]
fn resume_with_changed_config_is_rejected() {
    let w = Workspace::tiny();
    ok(&w.train("meta-train", "m"));
    std::fs::write(
        w.path("other.json"),
        with_config(serde_json::json!({"seed": 8})),
    )
    .unwrap();
    let out = w.run(&[
        "meta-train",
        "--config",
        "other.json",
        "--data",
        "data",
        "--out",
        "m",
        "--resume",
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

fn finetune_eval(w: &Workspace, out: &str) {
    ok(&w.run(&[
        "finetune-eval",
        "--config",
        "tiny.json",
        "--checkpoint",
        "m/checkpoints/final.ckpt",
        "--baseline",
        "b/checkpoints/final.ckpt",
        "--data",
        "data",
        "--out",
        out,
    ]));
}

#[test]
fn finetune_eval_reports_every_cell_and_is_reproducible() {
    let w = Workspace::tiny();
    ok(&w.train("meta-train", "m"));
    ok(&w.train("baseline-train", "b"));
    finetune_eval(&w, "e1");
    finetune_eval(&w, "e2");

    let csv = std::fs::read_to_string(w.path("e1/report.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    for method in ["migs", "baseline"] {
        let mine: Vec<_> = rows.iter().filter(|r| r[1] == method).collect();
        assert_eq!(mine.len(), 8, "{method}");
        assert_eq!(mine.iter().filter(|r| r[2] == "5").count(), 4);
        assert_eq!(mine.iter().filter(|r| r[2] == "10").count(), 4);
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("e1/report.json")).unwrap()).unwrap();
    assert!(report["extractor_fingerprint"].is_string());
    assert!(report["config_hash"].is_string());
    assert!(w.path("e1/comparison.md").is_file());

    for f in ["report.json", "report.csv", "comparison.md"] {
        let a = std::fs::read(w.path(&format!("e1/{f}"))).unwrap();
        let b = std::fs::read(w.path(&format!("e2/{f}"))).unwrap();
        assert!(a == b, "{f} differs between reruns");
    }
}

#[test]
fn generate_writes_a_deterministic_png() {
    let w = Workspace::tiny();
    ok(&w.train("meta-train", "m"));
    std::fs::write(
        w.path("g.json"),
        r#"{"objects": [0, 1], "edges": [[0, 0, 1]]}"#,
    )
    .unwrap();
    let gen = |seed: &str, out: &str| {
        ok(&w.run(&[
            "generate",
            "--checkpoint",
            "m/checkpoints/final.ckpt",
            "--graph",
            "g.json",
            "--seed",
            seed,
            "--out",
            out,
        ]));
        std::fs::read(w.path(out)).unwrap()
    };
    let a = gen("3", "a.png");
    let b = gen("3", "b.png");
    assert_eq!(a, b);
    assert_eq!(&a[1..4], b"PNG");
    // IHDR width and height.
    assert_eq!(u32::from_be_bytes(a[16..20].try_into().unwrap()), 16);
    assert_eq!(u32::from_be_bytes(a[20..24].try_into().unwrap()), 16);

    std::fs::write(
        w.path("bad.json"),
        r#"{"objects": [0, 1], "edges": [[0, 99, 1]]}"#,
    )
    .unwrap();
    let out = w.run(&[
        "generate",
        "--checkpoint",
        "m/checkpoints/final.ckpt",
        "--graph",
        "bad.json",
        "--out",
        "c.png",
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(!w.path("c.png").exists());
}

#[test]
fn smoke_run_finishes_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"{"seed": 1, "dataset": {"num_tasks": 2, "num_test_tasks": 1}, "outer": {"iterations": 50, "checkpoint_every": 25}}"#;
    std::fs::write(dir.path().join("smoke.json"), config).unwrap();
    ok(&migs(
        &["gen-data", "--config", "smoke.json", "--out", "data"],
        dir.path(),
    ));
    let start = Instant::now();
    ok(&migs(
        &[
            "meta-train",
            "--config",
            "smoke.json",
            "--data",
            "data",
            "--out",
            "m",
        ],
        dir.path(),
    ));
    let took = start.elapsed();
    eprintln!("smoke meta-train: {:.1}s", took.as_secs_f64());
    assert!(took < Duration::from_secs(600), "{took:?}");
}
