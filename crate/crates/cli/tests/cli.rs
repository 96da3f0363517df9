use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use awcc::config::RunConfig;
use awcc::data::synthetic::{save_png, write_dataset, SceneSpec};
use awcc::eval::read_density;
use awcc::train::save_checkpoint;
use awcc::{Tensor, TrainState32};
use serde_json::Value;
use tempfile::TempDir;

fn awcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_awcc"))
        .args(args)
        .env_remove("AWCC_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: TempDir,
    ann: PathBuf,
}

fn fixture(images: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_dataset(dir.path().join("data"), images, &SceneSpec::new(40, 2, 8), 3).unwrap();
    Fixture { dir, ann }
}

impl Fixture {
    fn config(&self, name: &str, steps: u64, every: u64) -> PathBuf {
        let text = format!(
            "[model]\npreset = \"tiny\"\ncrop_size = 32\n\n[data]\nannotations = {:?}\n\n[train]\nsteps = {steps}\nlr = 1e-3\ncheckpoint_every = {every}\nout_dir = {:?}\n",
            s(&self.ann),
            s(&self.dir.path().join("run"))
        );
        let p = self.dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    /// Untrained checkpoint written through the library.
    fn checkpoint(&self, zero_offsets: bool) -> PathBuf {
        let cfg = RunConfig::load(self.config("ckpt.toml", 1, 0)).unwrap();
        let mut state = TrainState32::new(cfg).unwrap();
        if zero_offsets {
            state.model.zero_offsets();
        }
        let p = self.dir.path().join(if zero_offsets { "zero.ckpt" } else { "init.ckpt" });
        save_checkpoint(&state, &p).unwrap();
        p
    }
}

fn log_lines(out: &str) -> Vec<Value> {
    out.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn train_smoke() {
    let f = fixture(3);
    let cfg = f.config("run.toml", 10, 0);
    let o = awcc(&["--config", s(&cfg), "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = log_lines(&stdout(&o));
    assert_eq!(lines.len(), 10);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i as u64 + 1);
        for key in ["l_cc", "l_con", "l_cp", "total", "queue_len"] {
            assert!(l.get(key).is_some(), "missing {key}");
        }
    }
    let run = f.dir.path().join("run");
    assert!(run.join("last.ckpt").is_file());
    assert_eq!(fs::read_to_string(run.join("loss.jsonl")).unwrap().lines().count(), 10);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nstpes = 10\n").unwrap();
    let o = awcc(&["--config", s(&cfg), "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stpes"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_exits_3() {
    let f = fixture(1);
    fs::remove_file(&f.ann).unwrap();
    let o = awcc(&["--config", s(&f.config("run.toml", 2, 0)), "train"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn resume_runs_only_the_remaining_steps() {
    let f = fixture(3);
    let first = awcc(&["--config", s(&f.config("a.toml", 50, 50)), "train"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let ckpt = f.dir.path().join("run").join("step-00000050.ckpt");
    assert!(ckpt.is_file());

    let o = awcc(&["--config", s(&f.config("b.toml", 100, 0)), "train", "--resume", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let steps: Vec<u64> = log_lines(&stdout(&o)).iter().map(|l| l["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, (51..=100).collect::<Vec<_>>());

    // a straight 100-step run gives the same tail
    let g = fixture(3);
    let full = awcc(&["--config", s(&g.config("c.toml", 100, 0)), "train"]);
    let full_lines = log_lines(&stdout(&full));
    assert_eq!(full_lines[50..].to_vec(), log_lines(&stdout(&o)));
}

#[test]
fn same_seed_same_log() {
    let f = fixture(3);
    let cfg = f.config("run.toml", 6, 0);
    let a = awcc(&["--deterministic", "--seed", "7", "--config", s(&cfg), "train"]);
    let b = awcc(&["--deterministic", "--seed", "7", "--config", s(&cfg), "train"]);
    let c = awcc(&["--deterministic", "--seed", "8", "--config", s(&cfg), "train"]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    assert_ne!(stdout(&a), stdout(&c));
}

#[test]
fn evaluate_reports_json() {
    let f = fixture(3);
    let ckpt = f.checkpoint(false);
    let o = awcc(&["evaluate", "--checkpoint", s(&ckpt), "--annotations", s(&f.ann)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rep["overall"]["q"], 3);
    assert_eq!(rep["per_image"].as_array().unwrap().len(), 3);

    let o = awcc(&["evaluate", "--checkpoint", s(&ckpt), "--annotations", s(&f.ann), "--subset", "weather"]);
    let rep: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rep["per_subset"]["clear"]["q"], 1);
    assert_eq!(rep["per_subset"]["adverse"]["q"], 2);
    assert!(rep["overall"]["mae"].is_number());
}

#[test]
fn evaluate_rejects_bad_checkpoints() {
    let f = fixture(1);
    let missing = f.dir.path().join("nope.ckpt");
    let o = awcc(&["evaluate", "--checkpoint", s(&missing), "--annotations", s(&f.ann)]);
    assert_eq!(o.status.code(), Some(2));

    let ckpt = f.checkpoint(false);
    let other = f.dir.path().join("paper.toml");
    fs::write(&other, "[model]\npreset = \"paper\"\n").unwrap();
    let o = awcc(&["--config", s(&other), "evaluate", "--checkpoint", s(&ckpt), "--annotations", s(&f.ann)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("different model"), "{}", stderr(&o));
}

#[test]
fn predict_zero_image() {
    let f = fixture(1);
    let ckpt = f.checkpoint(true);
    let img = f.dir.path().join("black.png");
    save_png(&Tensor::<f32>::zeros(&[3, 64, 64]), &img).unwrap();
    let out = f.dir.path().join("d.bin");
    let o = awcc(&["predict", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "0.0");
    let d = read_density(&out).unwrap();
    assert_eq!((d.rows(), d.cols()), (8, 8));
    assert!(d.grid.data().iter().all(|&v| v == 0.0));
}

#[test]
fn predict_pads_to_the_stride() {
    let f = fixture(1);
    let ckpt = f.checkpoint(false);
    let img = f.dir.path().join("big.png");
    save_png(&Tensor::<f32>::full(&[3, 500, 500], 0.4), &img).unwrap();
    let out = f.dir.path().join("d.bin");
    let png = f.dir.path().join("d.png");
    let o = awcc(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&img),
        "--out",
        s(&out),
        "--render",
        s(&png),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d = read_density(&out).unwrap();
    assert_eq!((d.rows(), d.cols()), (63, 63));
    let printed: f64 = stdout(&o).trim().parse().unwrap();
    let sum: f64 = d.grid.data().iter().map(|&v| v as f64).sum();
    assert!((printed - sum).abs() <= 1e-4 * sum.max(1.0));
    assert!(png.is_file());
}

#[test]
fn predict_unreadable_image_exits_3() {
    let f = fixture(1);
    let ckpt = f.checkpoint(false);
    let bad = f.dir.path().join("bad.png");
    fs::write(&bad, b"not an image").unwrap();
    let out = f.dir.path().join("d.bin");
    let o = awcc(&["predict", "--checkpoint", s(&ckpt), "--image", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let o = awcc(&["predict", "--checkpoint", s(&ckpt), "--image", "/does/not/exist.png", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn probe_lists_neighbors() {
    let f = fixture(6);
    let ckpt = f.checkpoint(false);
    let o = awcc(&["probe", "--checkpoint", s(&ckpt), "--annotations", s(&f.ann), "--query-id", "synthetic_0000.png"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let n = v["neighbors"].as_array().unwrap();
    assert_eq!(n.len(), 4);
    let d: Vec<f64> = n.iter().map(|x| x["distance"].as_f64().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
    assert!(n.iter().all(|x| x["image_id"] != "synthetic_0000.png" && x["weather"].is_string()));

    let o = awcc(&["probe", "--checkpoint", s(&ckpt), "--annotations", s(&f.ann), "--query-id", "ghost"]);
    assert_eq!(o.status.code(), Some(2));
    let o = awcc(&[
        "probe",
        "--checkpoint",
        s(&ckpt),
        "--annotations",
        s(&f.ann),
        "--query-id",
        "synthetic_0000.png",
        "--topk",
        "6",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_root_env_prefixes_relative_paths() {
    let f = fixture(3);
    let ckpt = f.checkpoint(false);
    let o = Command::new(env!("CARGO_BIN_EXE_awcc"))
        .args(["evaluate", "--checkpoint", s(&ckpt), "--annotations", "annotations.jsonl"])
        .env("AWCC_DATA_ROOT", f.dir.path().join("data"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}
