use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use reid_cli::{EvalReport, RunConfig};
use reid_core::datagen::{split_pairs, Observation};
use reid_core::features::Backbone;
use reid_core::io::{load_gallery, load_observations, save_observations, Checkpoint};
use reid_core::novelty::Confusion;
use reid_core::pipeline::initial_head;
use reid_core::retrieval::{build_gallery, evaluate_queries, summarize};
use serde_json::{json, Value};

fn reid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reid")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = reid(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    reid(dir, args).status.code().unwrap()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small population and short schedule so each command takes well under a second.
fn small_config(dir: &Path) {
    let cfg = json!({
        "population": {"n_individuals": 12, "mean_obs_per_individual": 4, "image_height": 24, "image_width": 24},
        "experiment": {"backbone": {"input_size": 24}, "train": {"stage1_epochs": 3, "stage2_epochs": 2}}
    });
    std::fs::write(dir.join("cfg.json"), cfg.to_string()).unwrap();
    ok(dir, &["gen-data", "--config", "cfg.json", "--seed", "5", "--out", "obs.jsonl"]);
}

const C: [&str; 4] = ["--config", "cfg.json", "--seed", "5"];

fn with(extra: &[&'static str]) -> Vec<&'static str> {
    let mut v: Vec<&str> = extra.to_vec();
    v.extend(C);
    v
}

#[test]
fn gen_data_counts_labels() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--individuals", "60", "--mean-obs", "6", "--seed", "7", "--image-size", "8", "--out", "o.jsonl"]);
    let obs = load_observations(&dir.path().join("o.jsonl")).unwrap();
    assert_eq!(obs.iter().map(|o| o.individual_id).collect::<BTreeSet<_>>().len(), 60);
    let run = read_json(dir.path().join("o.run.json"));
    assert_eq!(run["run_config"]["seed"], 7);
    assert_eq!(run["n_individuals"], 60);

    let out = reid(dir.path(), &["gen-data", "--individuals", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least one individual"));

    ok(dir.path(), &["gen-data", "--preset", "paper-scale", "--mean-obs", "1", "--image-size", "4", "--out", "p.jsonl"]);
    let obs = load_observations(&dir.path().join("p.jsonl")).unwrap();
    assert_eq!(obs.iter().map(|o| o.individual_id).collect::<BTreeSet<_>>().len(), 513);
}

#[test]
fn usage_and_data_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["train", "--data", "missing.jsonl"]), 2);
    assert_eq!(code(d, &["train"]), 2);
    assert_eq!(code(d, &["frobnicate"]), 2);
    assert_eq!(code(d, &["gen-data", "--config", "missing.json"]), 2);
    std::fs::write(d.join("bad.json"), "{\"seed\": ").unwrap();
    assert_eq!(code(d, &["gen-data", "--config", "bad.json"]), 2);
    std::fs::write(d.join("bad.jsonl"), "{\"obs_id\": 1}\n").unwrap();
    assert_eq!(code(d, &["train", "--data", "bad.jsonl"]), 3);
    std::fs::write(d.join("model.ckpt"), b"not a model").unwrap();
    small_config(d);
    assert_eq!(code(d, &with(&["eval", "--data", "obs.jsonl", "--model", "model.ckpt"])), 3);
    assert_eq!(code(d, &with(&["train", "--data", "obs.jsonl", "--holdout-new", "1.5"])), 2);
    assert_eq!(code(d, &["calibrate"]), 2);
}

#[test]
fn default_schedule_is_100_plus_100() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = json!({"population": {"n_individuals": 9, "mean_obs_per_individual": 3, "image_height": 8, "image_width": 8},
                     "experiment": {"backbone": {"input_size": 8, "stage1_pool": 2, "stage2_stride": 2, "feature_dim": 16}}});
    std::fs::write(d.join("cfg.json"), cfg.to_string()).unwrap();
    ok(d, &["gen-data", "--config", "cfg.json", "--out", "obs.jsonl"]);
    ok(d, &["train", "--config", "cfg.json", "--data", "obs.jsonl"]);
    let log = std::fs::read_to_string(d.join("train_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 200);
    assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some("1")).count(), 100);
    assert!(rows[199].starts_with("200,2,"));
    let report = read_json(d.join("train_report.json"));
    assert_eq!(report["run_config"]["experiment"]["train"]["stage1_lr"], 1e-3);
    assert_eq!(report["run_config"]["experiment"]["train"]["stage2_lr"], 1e-4);
}

#[test]
fn zero_epochs_is_initialization_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(d, &with(&["train", "--data", "obs.jsonl", "--stage1-epochs", "0", "--stage2-epochs", "0", "--out-dir", "zero"]));
    let ckpt = Checkpoint::load(&d.join("zero/model.ckpt")).unwrap();
    let cfg: RunConfig = serde_json::from_value(read_json(d.join("zero/train_report.json"))["run_config"].clone()).unwrap();
    let backbone = Backbone::new(cfg.experiment.backbone).unwrap();
    assert_eq!(ckpt.head, initial_head(&backbone, &cfg.experiment.train).unwrap());
    assert_eq!(ckpt.backbone, backbone);

    ok(d, &with(&["train", "--data", "obs.jsonl", "--out-dir", "a"]));
    ok(d, &with(&["train", "--data", "obs.jsonl", "--out-dir", "b"]));
    assert_eq!(std::fs::read(d.join("a/model.ckpt")).unwrap(), std::fs::read(d.join("b/model.ckpt")).unwrap());
    assert_eq!(std::fs::read(d.join("a/train_log.csv")).unwrap(), std::fs::read(d.join("b/train_log.csv")).unwrap());
    ok(d, &["train", "--data", "obs.jsonl", "--out-dir", "c", "--config", "cfg.json", "--seed", "6"]);
    assert_ne!(std::fs::read(d.join("a/model.ckpt")).unwrap(), std::fs::read(d.join("c/model.ckpt")).unwrap());
}

#[test]
fn eval_matches_library_and_emits_full_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(d, &with(&["train", "--data", "obs.jsonl", "--out-dir", "m"]));
    let curve = ok(d, &with(&["eval", "--data", "obs.jsonl", "--model", "m/model.ckpt", "--out-dir", "e", "--report", "curve"]));
    let report: EvalReport = serde_json::from_value(read_json(d.join("e/metrics.json"))).unwrap();
    assert_eq!(report.run_config.seed, 5);
    let raw = read_json(d.join("e/metrics.json"));
    for key in ["accuracy_at_1", "accuracy_at_5", "map_at_5"] {
        assert!(raw["metrics"][key].is_f64());
    }

    let obs = load_observations(&d.join("obs.jsonl")).unwrap();
    let (ls, _) = split_pairs(&obs, 0.3, 5).unwrap();
    let ckpt = Checkpoint::load(&d.join("m/model.ckpt")).unwrap();
    let gallery = build_gallery(&ckpt.head, &ckpt.backbone, &ls.support).unwrap();
    let results = evaluate_queries(&ckpt.head, &ckpt.backbone, &ls.query, &gallery).unwrap();
    assert_eq!(report.metrics, summarize(&results).unwrap());
    assert_eq!((report.n_gallery, report.n_query), (gallery.len(), ls.query.len()));
    assert_eq!(load_gallery(&d.join("e/gallery.bin")).unwrap(), gallery);

    let ks: Vec<usize> = curve.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ks, (1..=gallery.len()).collect::<Vec<_>>());
    assert_eq!(std::fs::read_to_string(d.join("e/curve.csv")).unwrap(), curve);
    assert!(curve.trim_end().ends_with(",1"));
}

#[test]
fn calibrate_matches_grid_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut lines = String::new();
    let mut scored = Vec::new();
    for i in 0..40u32 {
        let new = i % 3 == 0;
        let dist = ((i * 37) % 100) as f64 / 60.0 + if new { 0.3 } else { 0.0 };
        scored.push((dist, new));
        lines.push_str(&json!({"min_distance": dist, "truly_new": new}).to_string());
        lines.push('\n');
    }
    std::fs::write(d.join("s.jsonl"), lines).unwrap();
    ok(d, &["calibrate", "--scores", "s.jsonl", "--out", "cal.json", "--seed", "3"]);
    let rep = read_json(d.join("cal.json"));
    assert_eq!(rep["run_config"]["seed"], 3);
    let t = rep["calibration"]["threshold"].as_f64().unwrap();
    let grid: Vec<f64> = (0..=400).map(|i| i as f64 * 0.005).collect();
    assert!(grid.contains(&t));
    let f1 = |t: f64| {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for &(dist, new) in &scored {
            match (dist > t, new) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        2.0 * tp / (2.0 * tp + fp + fn_)
    };
    let best = grid.iter().map(|&g| f1(g)).fold(0.0, f64::max);
    assert_eq!(f1(t), best);
    assert_eq!(rep["calibration"]["f1"].as_f64().unwrap(), best);
    let first_best = grid.iter().copied().find(|&g| f1(g) == best).unwrap();
    assert_eq!(t, first_best);
    assert_eq!(Confusion::tally(&scored, t).f1(), best);

    std::fs::write(d.join("one.jsonl"), "{\"min_distance\":0.4,\"truly_new\":true}\n").unwrap();
    assert_eq!(code(d, &["calibrate", "--scores", "one.jsonl"]), 2);
}

#[test]
fn calibrate_from_model_with_holdout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(d, &with(&["train", "--data", "obs.jsonl", "--holdout-new", "0.25", "--out-dir", "m"]));
    let train = read_json(d.join("m/train_report.json"));
    assert!(!train["held_out_individuals"].as_array().unwrap().is_empty());
    assert_eq!(code(d, &with(&["calibrate", "--data", "obs.jsonl", "--model", "m/model.ckpt"])), 2);
    ok(d, &with(&["calibrate", "--data", "obs.jsonl", "--model", "m/model.ckpt", "--holdout-new", "0.25", "--out", "cal.json"]));
    let rep = read_json(d.join("cal.json"));
    let n = rep["n_calibration"].as_u64().unwrap() + rep["n_validation"].as_u64().unwrap();
    assert!(n > 0);
    let v = &rep["validation"];
    assert_eq!(v["threshold"], rep["calibration"]["threshold"]);
    assert_eq!(v["n_queries"], rep["n_validation"]);
}

#[test]
fn fuse_eval_reports_three_metric_sets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(d, &with(&["train", "--data", "obs.jsonl", "--side", "left", "--out-dir", "l"]));
    ok(d, &with(&["train", "--data", "obs.jsonl", "--side", "right", "--out-dir", "r"]));
    for mode in ["distance", "rank"] {
        ok(d, &with(&["fuse-eval", "--data", "obs.jsonl", "--left-model", "l/model.ckpt", "--right-model", "r/model.ckpt", "--mode", mode]));
        let rep = read_json(d.join("fusion.json"));
        assert_eq!(rep["mode"], mode);
        for part in ["left", "right", "fused"] {
            assert!(rep["report"][part]["accuracy_at_1"].is_f64());
        }
        let left: EvalReport = {
            ok(d, &with(&["eval", "--data", "obs.jsonl", "--model", "l/model.ckpt", "--out-dir", "el"]));
            serde_json::from_value(read_json(d.join("el/metrics.json"))).unwrap()
        };
        assert_eq!(rep["report"]["left"]["accuracy_at_1"].as_f64().unwrap(), left.metrics.accuracy_at_1);
    }

    // keep every capture of one individual with 2 to 4 captures and a single capture of the rest
    let obs = load_observations(&d.join("obs.jsonl")).unwrap();
    let count = |id: u32| obs.iter().filter(|o| o.individual_id == id && o.side == reid_core::datagen::Side::Left).count();
    let full = (0..12).find(|&id| (2..=4).contains(&count(id))).expect("an individual with 2 to 4 captures");
    let mut seen = BTreeSet::new();
    let kept: Vec<Observation> = obs.iter().filter(|o| o.individual_id == full || seen.insert((o.individual_id, o.side))).cloned().collect();
    save_observations(&d.join("single.jsonl"), &kept).unwrap();
    let (ls, _) = split_pairs(&kept, 0.3, 5).unwrap();
    assert_eq!(ls.query.len(), 1);
    ok(d, &with(&["fuse-eval", "--data", "single.jsonl", "--left-model", "l/model.ckpt", "--right-model", "r/model.ckpt"]));
    let rep = read_json(d.join("fusion.json"));
    assert_eq!(rep["report"]["n_pairs"], 1);
}

/// Kills the server even when an assertion fails.
struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http(addr: &str, method: &str, path: &str, body: &str) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "{method} {path} HTTP/1.1\r\nhost: x\r\nconnection: close\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{body}", body.len())
        .unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).unwrap();
    let resp = String::from_utf8_lossy(&raw);
    let status = resp[9..12].parse().unwrap();
    let json = resp.split_once("\r\n\r\n").map(|(_, b)| b).unwrap_or("");
    (status, serde_json::from_str(json).unwrap_or(Value::Null))
}

#[test]
fn serve_binds_ephemeral_port_and_ranks_known_queries() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(d, &with(&["train", "--data", "obs.jsonl", "--out-dir", "m"]));
    ok(d, &with(&["eval", "--data", "obs.jsonl", "--model", "m/model.ckpt", "--out-dir", "e"]));
    let child = Command::new(env!("CARGO_BIN_EXE_reid"))
        .current_dir(d)
        .args(["serve", "--model", "m/model.ckpt", "--gallery", "e/gallery.bin", "--observations", "obs.jsonl", "--port", "0", "--state-dir", "state"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut child = Server(child);
    let mut line = String::new();
    BufReader::new(child.0.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap().to_string();
    assert!(!addr.ends_with(":0"));

    let (status, health) = http(&addr, "GET", "/healthz", "");
    assert_eq!(status, 200);
    assert_eq!(health["version"], env!("CARGO_PKG_VERSION"));

    let gallery = load_gallery(&d.join("e/gallery.bin")).unwrap();
    let obs = load_observations(&d.join("obs.jsonl")).unwrap();
    let known = obs.iter().find(|o| o.obs_id == gallery.entries()[3].obs_id).unwrap();
    let (status, created) = http(&addr, "POST", "/observations", &json!({"image": known.image, "side": "L"}).to_string());
    assert_eq!(status, 201);
    let (_, task) = http(&addr, "GET", &format!("/tasks/{}", created["task_id"]), "");
    assert_eq!(task["candidates"][0]["obs_id"], known.obs_id);
    assert_eq!(task["candidates"][0]["distance"].as_f64(), Some(0.0));
    assert_eq!(task["candidates"].as_array().unwrap().len(), 5);
    let (status, _) = http(&addr, "GET", &format!("/observations/{}/thumbnail.png", known.obs_id), "");
    assert_eq!(status, 200);
    drop(child);
    assert!(d.join("state/journal.jsonl").exists());
}
