use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"
[knowledge]
steps = 40
batch_pairs = 8
lr = 1e-3

[model]
d = 32
decoder_layers = 1
backbone_channels = [8, 16]
backbone_kernels = [3, 3, 1]
prompt_count = 8

[train]
epochs = 2
lr = 1e-3

[eval]
bootstrap = 20
min_cases = 0
"#;

fn kdiag(args: &[&str]) -> Output {
    kdiag_env(args, None)
}

fn kdiag_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kdiag"));
    cmd.args(args).env_remove("KDIAG_SEED");
    if let Some(s) = seed_env {
        cmd.env("KDIAG_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = kdiag(args);
    assert!(
        out.status.success(),
        "kdiag {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_world(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth",
        "--out",
        p(dir),
        "--classes",
        "4",
        "--unseen",
        "1",
        "--samples-per-class",
        "20",
        "--manifests",
        "2",
        "--knowledge-extra",
        "10",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

/// Every file below `dir`, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn header(path: &Path) -> Value {
    let text = fs::read_to_string(path).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

fn class_names(path: &Path) -> Vec<String> {
    serde_json::from_value(header(path)["class_names"].clone()).unwrap()
}

fn world_list(dir: &Path, key: &str) -> Vec<String> {
    let world: Value = serde_json::from_str(&fs::read_to_string(dir.join("world.json")).unwrap()).unwrap();
    serde_json::from_value(world[key].clone()).unwrap()
}

#[test]
fn synth_is_byte_identical_for_a_repeated_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    tiny_world(&a, &["--seed", "7"]);
    tiny_world(&b, &["--seed", "7"]);
    tiny_world(&c, &["--seed", "8"]);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    tiny_world(&a, &["--seed", "11"]);
    let args = [
        "synth",
        "--out",
        p(&b),
        "--classes",
        "4",
        "--unseen",
        "1",
        "--samples-per-class",
        "20",
        "--manifests",
        "2",
        "--knowledge-extra",
        "10",
    ];
    assert!(kdiag_env(&args, Some("11")).status.success());
    assert_eq!(tree(&a), tree(&b));

    let out = kdiag_env(&args, Some("eleven"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn held_out_class_is_absent_from_training_manifests_only() {
    let tmp = TempDir::new().unwrap();
    let w = tmp.path().join("w");
    tiny_world(&w, &[]);
    let unseen = world_list(&w, "unseen");
    assert_eq!(unseen.len(), 1);
    for file in ["train-0.jsonl", "train-1.jsonl", "val.jsonl"] {
        let names = class_names(&w.join(file));
        assert!(!names.contains(&unseen[0]), "{file} labels the held-out class");
        for line in fs::read_to_string(w.join(file)).unwrap().lines().skip(1) {
            assert!(!line.contains(&format!("\"{}\"", unseen[0])));
        }
    }
    let test = class_names(&w.join("test.jsonl"));
    assert_eq!(test.len(), 4);
    assert!(test.contains(&unseen[0]));
}

#[test]
fn default_world_has_three_manifests_with_disjoint_labels() {
    let tmp = TempDir::new().unwrap();
    let w = tmp.path().join("w");
    ok(&["synth", "--out", p(&w), "--samples-per-class", "3", "--knowledge-extra", "0"]);
    assert_eq!(world_list(&w, "classes").len(), 16);
    let mut all: Vec<String> = Vec::new();
    for j in 0..3 {
        let names = class_names(&w.join(format!("train-{j}.jsonl")));
        assert!(!names.is_empty());
        assert!(names.iter().all(|n| !all.contains(n)));
        all.extend(names);
    }
    assert_eq!(all.len(), 16);
    assert!(!w.join("train-3.jsonl").exists());
}

#[test]
fn bad_parameters_and_inputs_map_to_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let w = tmp.path().join("w");
    let out = kdiag(&["synth", "--out", p(&w), "--classes", "3", "--unseen", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);

    assert_eq!(kdiag(&["synth"]).status.code(), Some(2));
    assert_eq!(kdiag(&["frobnicate"]).status.code(), Some(2));

    let missing = tmp.path().join("missing.jsonl");
    let out = kdiag(&["train", "--manifest", p(&missing), "--out", p(&w), "--mode", "baseline"]);
    assert_eq!(out.status.code(), Some(3));

    let garbled = tmp.path().join("garbled.jsonl");
    fs::write(&garbled, "{\"name\": 3}\n").unwrap();
    let out = kdiag(&["train", "--manifest", p(&garbled), "--out", p(&w), "--mode", "baseline"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let w = tmp.path().join("w");
    tiny_world(&w, &[]);
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochs = 2\nmomentum = 0.9\n").unwrap();
    let out = kdiag(&["train", "--manifest", p(&w.join("train-0.jsonl")), "--out", p(&tmp.path().join("m")), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}

struct Recipe {
    _tmp: TempDir,
    root: PathBuf,
}

impl Recipe {
    fn at(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// A tiny world, a frozen encoder and a ke_lp classifier trained on it.
fn recipe() -> Recipe {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().to_path_buf();
    let r = Recipe { _tmp: tmp, root };
    let cfg = r.at("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    tiny_world(&r.at("world"), &["--seed", "5"]);
    ok(&["train-ke", "--catalog", p(&r.at("world/catalog.jsonl")), "--out", p(&r.at("ke")), "--config", p(&cfg)]);
    ok(&[
        "train",
        "--manifest",
        p(&r.at("world/train-0.jsonl")),
        "--manifest",
        p(&r.at("world/train-1.jsonl")),
        "--ke",
        p(&r.at("ke")),
        "--out",
        p(&r.at("model")),
        "--config",
        p(&cfg),
    ]);
    r
}

#[test]
fn full_recipe_runs_end_to_end() {
    let r = recipe();
    let seen = world_list(&r.at("world"), "seen");
    let unseen = world_list(&r.at("world"), "unseen");

    ok(&[
        "eval",
        "--model",
        p(&r.at("model")),
        "--ke",
        p(&r.at("ke")),
        "--manifest",
        p(&r.at("world/train-0.jsonl")),
        "--manifest",
        p(&r.at("world/train-1.jsonl")),
        "--out",
        p(&r.at("eval")),
    ]);
    let report = fs::read_to_string(r.at("eval/report.jsonl")).unwrap();
    let lines: Vec<Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), seen.len() + 1);
    for (line, class) in lines.iter().zip({
        let mut s = seen.clone();
        s.sort();
        s
    }) {
        assert_eq!(line["class"], Value::String(class));
        assert!(line["auc"].as_f64().is_some_and(|a| (0.0..=1.0).contains(&a)));
    }
    assert_eq!(lines.last().unwrap()["summary"], Value::Bool(true));
    assert!(fs::read(r.at("eval/auc.png")).unwrap().starts_with(b"\x89PNG"));

    ok(&[
        "zeroshot",
        "--model",
        p(&r.at("model")),
        "--ke",
        p(&r.at("ke")),
        "--manifest",
        p(&r.at("world/test.jsonl")),
        "--classes",
        &unseen.join(","),
        "--out",
        p(&r.at("zs")),
    ]);
    let zs = fs::read_to_string(r.at("zs/report.jsonl")).unwrap();
    assert_eq!(zs.lines().count(), unseen.len() + 1);
    assert!(zs.contains(&unseen[0]));
}

#[test]
fn zeroshot_rejects_a_seen_class_with_a_protocol_error() {
    let r = recipe();
    let seen = world_list(&r.at("world"), "seen");
    let out = kdiag(&[
        "zeroshot",
        "--model",
        p(&r.at("model")),
        "--ke",
        p(&r.at("ke")),
        "--manifest",
        p(&r.at("world/test.jsonl")),
        "--classes",
        &seen[0],
        "--out",
        p(&r.at("zs")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("protocol"));
    assert!(!r.at("zs/report.jsonl").exists());
}

#[test]
fn resolved_config_round_trips_and_reproduces_the_run() {
    let r = recipe();
    let echoed = fs::read_to_string(r.at("model/config.toml")).unwrap();
    let parsed: toml::Table = echoed.parse().unwrap();
    assert_eq!(parsed["model"]["d"].as_integer(), Some(32));
    assert_eq!(parsed["train"]["epochs"].as_integer(), Some(2));

    // the checkpoint embeds the same structure
    let manifest: Value = serde_json::from_str(&fs::read_to_string(r.at("model/manifest.json")).unwrap()).unwrap();
    let embedded = &manifest["meta"]["training"]["config"];
    let as_json: Value = serde_json::to_value(&parsed).unwrap();
    assert_eq!(embedded["model"], as_json["model"]);
    assert_eq!(embedded["train"]["seed"], as_json["train"]["seed"]);

    // feeding the echo back in gives the same echo and the same weights
    ok(&[
        "train",
        "--manifest",
        p(&r.at("world/train-0.jsonl")),
        "--manifest",
        p(&r.at("world/train-1.jsonl")),
        "--ke",
        p(&r.at("ke")),
        "--out",
        p(&r.at("model2")),
        "--config",
        p(&r.at("model/config.toml")),
    ]);
    assert_eq!(fs::read_to_string(r.at("model2/config.toml")).unwrap(), echoed);
    assert_eq!(tree(&r.at("model/arrays")), tree(&r.at("model2/arrays")));
    assert_eq!(fs::read(r.at("model/log.jsonl")).unwrap(), fs::read(r.at("model2/log.jsonl")).unwrap());
}

#[test]
fn attn_writes_a_normalized_heatmap_and_sidecar() {
    let r = recipe();
    let seen = world_list(&r.at("world"), "seen");
    let test = fs::read_to_string(r.at("world/test.jsonl")).unwrap();
    let first: Value = serde_json::from_str(test.lines().nth(1).unwrap()).unwrap();
    let image = r.at("world").join(first["image"].as_str().unwrap());
    ok(&[
        "attn",
        "--model",
        p(&r.at("model")),
        "--ke",
        p(&r.at("ke")),
        "--image",
        p(&image),
        "--class",
        &seen[0],
        "--out",
        p(&r.at("attn")),
    ]);
    let side = fs::read_to_string(r.at("attn/heatmap.txt")).unwrap();
    let rows: Vec<Vec<f64>> = side
        .lines()
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    let total: f64 = rows.iter().flatten().sum();
    assert!((total - 1.0).abs() < 1e-5, "mass {total}");
    assert!(rows.iter().all(|r| r.len() == rows[0].len()));
    assert!(fs::read(r.at("attn/heatmap.pgm")).unwrap().starts_with(b"P5"));
    let pred: Value = serde_json::from_str(&fs::read_to_string(r.at("attn/prediction.json")).unwrap()).unwrap();
    assert_eq!(pred["grid"][0].as_u64(), Some(rows.len() as u64));
    assert!(pred["score"].as_f64().is_some_and(|s| (0.0..=1.0).contains(&s)));
}

#[test]
fn assemble_writes_splits_and_arms_with_the_union_vocabulary() {
    let tmp = TempDir::new().unwrap();
    let w = tmp.path().join("w");
    tiny_world(&w, &[]);
    let (a0, a1) = (w.join("train-0.jsonl"), w.join("train-1.jsonl"));
    let out = tmp.path().join("asm");
    ok(&["assemble", "--manifest", p(&a0), "--manifest", p(&a1), "--split", "0.5,0.25,0.25", "--out", p(&out)]);
    let rows = |f: &str| fs::read_to_string(out.join(f)).unwrap().lines().count() - 1;
    let source_rows = |f: &Path| fs::read_to_string(f).unwrap().lines().count() - 1;
    assert_eq!(rows("train.jsonl") + rows("val.jsonl") + rows("test.jsonl"), source_rows(&a0) + source_rows(&a1));
    let mut vocab = class_names(&a0);
    vocab.extend(class_names(&a1));
    vocab.sort();
    assert_eq!(class_names(&out.join("train.jsonl")), vocab);

    // assembled manifests are usable from anywhere
    let cfg = tmp.path().join("baseline.toml");
    fs::write(&cfg, SMALL.replace("prompt_count = 8\n", "")).unwrap();
    let m = tmp.path().join("m");
    ok(&["train", "--manifest", p(&out.join("train.jsonl")), "--mode", "baseline", "--out", p(&m), "--config", p(&cfg)]);

    let arms = tmp.path().join("arms");
    ok(&["assemble", "--target", p(&a0), "--manifest", p(&a1), "--out", p(&arms)]);
    let arm_rows = |f: &str| fs::read_to_string(arms.join(f)).unwrap().lines().count() - 1;
    assert_eq!(arm_rows("separation.jsonl"), source_rows(&a0));
    assert!(arm_rows("plus_diversity.jsonl") >= arm_rows("separation.jsonl"));
    assert!(arm_rows("plus_diversity_amount.jsonl") >= arm_rows("plus_diversity.jsonl"));
}
