//! One function per subcommand. Every command writes the fully resolved
//! run configuration to `<out>/config.toml` and echoes it on stderr.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use kdiag_core::data::{ImageSample, LabeledDataset};
use kdiag_core::dataset::{
    assemble as assemble_manifests, build_union_vocabulary, diversity_amount_arms, split_indices, AssembledDataset,
    DatasetManifest, ManifestRecord,
};
use kdiag_core::eval::{evaluate, zero_shot_eval, EvalReport};
use kdiag_core::knowledge::{pair_similarity_gap, train_knowledge_encoder, TextEncoder};
use kdiag_core::query_head::attention_heatmap;
use kdiag_core::synth::{
    compositional_catalog, extend_catalog, generate_catalog, render_dataset, ConceptCatalog, SyntheticWorldSpec,
};
use kdiag_core::training::{class_embeddings, train_classifier};
use kdiag_core::{Classifier32, Error, Result, ToyTextEncoder32};
use serde_json::json;

use crate::config::RunConfig;
use crate::imageio;
use crate::{AssembleArgs, AttnArgs, Common, EvalArgs, EvalFlags, SynthArgs, TrainArgs, TrainKeArgs, ZeroshotArgs};

pub const SEED_ENV: &str = "KDIAG_SEED";
const KNOWLEDGE_SALT: u64 = 0x6b6e_6f77;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Seed precedence: `--seed`, then an explicit `train.seed` in the config
/// file, then `KDIAG_SEED`, then whatever `base` already holds.
fn resolve(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let (mut config, explicit_seed) = match &common.config {
        Some(path) => {
            let config = RunConfig::load(path)?;
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
            let explicit = table.get("train").and_then(|t| t.get("seed")).is_some();
            (config, explicit)
        }
        None => (base, false),
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    } else if !explicit_seed {
        if let Ok(text) = std::env::var(SEED_ENV) {
            config.train.seed = text
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{text}` is not an unsigned integer")))?;
        }
    }
    Ok(config)
}

fn echo(config: &RunConfig, out: &Path) -> Result<()> {
    config.validate()?;
    let text = config.to_toml();
    eprintln!("# resolved configuration\n{text}");
    let path = out.join("config.toml");
    fs::write(&path, &text).map_err(io_err(&path))
}

/// Reads a manifest and makes its relative image paths absolute, taking
/// them relative to the manifest's directory.
fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::read_jsonl(open(path)?).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let base = fs::canonicalize(parent).map_err(io_err(parent))?;
    for r in &mut m.records {
        let image = Path::new(&r.image);
        if image.is_relative() {
            r.image = base.join(image).to_string_lossy().into_owned();
        }
    }
    Ok(m)
}

fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut out = create(path)?;
    manifest.write_jsonl(&mut out)?;
    out.flush().map_err(io_err(path))
}

fn load_assembled(paths: &[PathBuf]) -> Result<LabeledDataset> {
    let manifests = paths.iter().map(|p| read_manifest(p)).collect::<Result<Vec<_>>>()?;
    let vocabulary = build_union_vocabulary(&manifests)?;
    assemble_manifests(&manifests, &vocabulary)?.load_images(|r| imageio::load_gray(Path::new(&r.image)))
}

fn load_encoder(path: Option<&PathBuf>, needed: bool) -> Result<Option<ToyTextEncoder32>> {
    match (path, needed) {
        (Some(p), true) => Ok(Some(ToyTextEncoder32::load(p)?)),
        (None, true) => Err(Error::Config("this model mode needs --ke <encoder dir>".into())),
        (_, false) => Ok(None),
    }
}

fn as_dyn(enc: &Option<ToyTextEncoder32>) -> Option<&dyn TextEncoder<f32>> {
    enc.as_ref().map(|e| e as &dyn TextEncoder<f32>)
}

/// Classifier plus the run configuration it was trained with; the
/// checkpoint's sections replace everything but `[eval]` and the seed.
fn load_model(dir: &Path, common: &Common, flags: &EvalFlags) -> Result<(Classifier32, RunConfig)> {
    let (model, meta) = Classifier32::load(dir)?;
    let stored: RunConfig = match meta.get("config") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Parse(format!("checkpoint config: {e}")))?,
        None => RunConfig::default(),
    };
    let mut config = resolve(common, stored.clone())?;
    config.knowledge = stored.knowledge;
    config.model = stored.model;
    if let Some(b) = flags.bootstrap {
        config.eval.bootstrap = b;
    }
    if let Some(m) = flags.min_cases {
        config.eval.min_cases = m;
    }
    Ok((model, config))
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    let path = out.join("report.jsonl");
    let mut w = create(&path)?;
    report.write_jsonl(&mut w)?;
    w.flush().map_err(io_err(&path))?;
    imageio::auc_chart(&out.join("auc.png"), report)?;
    let s = report.summary();
    match s.mean_auc {
        Some(m) => eprintln!("mean AUC {m:.4} over {}/{} classes", s.defined_classes, s.total_classes),
        None => eprintln!("mean AUC undefined ({} classes)", s.total_classes),
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let config = resolve(&a.common, RunConfig::default())?;
    let seed = config.seed();
    if a.unseen >= a.classes {
        return Err(Error::Parameter(format!("--unseen {} leaves no seen class of {}", a.unseen, a.classes)));
    }
    let seen = a.classes - a.unseen;
    if a.manifests == 0 || a.manifests > seen {
        return Err(Error::Parameter(format!("--manifests must lie in 1..={seen}")));
    }
    let attributes = a
        .attributes
        .unwrap_or(if a.unseen > 0 { (seen + 1).clamp(4, 12) } else { 12 });
    let world = if a.unseen > 0 {
        compositional_catalog(seen, a.unseen, attributes, seed)?
    } else {
        generate_catalog(a.classes, attributes, seed)?
    };
    let spec = SyntheticWorldSpec {
        image_size: a.image_size,
        num_classes: a.classes,
        samples_per_class: a.samples_per_class,
        noise_sigma: a.noise,
        seed,
    };
    spec.validate()?;
    let catalog = extend_catalog(&world, a.knowledge_extra, seed ^ KNOWLEDGE_SALT)?;
    let data = render_dataset(&catalog, &spec)?;

    create_dir(&a.out)?;
    echo(&config, &a.out)?;
    let catalog_path = a.out.join("catalog.jsonl");
    let mut w = create(&catalog_path)?;
    catalog.write_jsonl(&mut w)?;
    w.flush().map_err(io_err(&catalog_path))?;

    let images = a.out.join("images");
    create_dir(&images)?;
    let mut refs = Vec::with_capacity(data.len());
    for s in &data.samples {
        let rel = format!("images/{}.pgm", s.image.id);
        imageio::save_pgm(&a.out.join(&rel), &s.image)?;
        refs.push(rel);
    }

    let names = &data.class_names;
    let seen_names = &names[..seen];
    let [train, val, test] = split_indices(data.len(), (0.7, 0.1, 0.2), seed)?;
    let record = |i: usize, classes: &[String], split: &str| ManifestRecord {
        id: data.samples[i].image.id.clone(),
        image: refs[i].clone(),
        labels: classes
            .iter()
            .map(|c| (c.clone(), data.samples[i].labels.get(data.class_index(c).expect("own class"))))
            .collect(),
        split: Some(split.into()),
    };
    let chunk = train.len().div_ceil(a.manifests);
    let mut train_files = Vec::new();
    for j in 0..a.manifests {
        let classes: Vec<String> = seen_names.iter().skip(j).step_by(a.manifests).cloned().collect();
        let rows = train.iter().skip(j * chunk).take(chunk);
        let manifest = DatasetManifest {
            name: format!("train-{j}"),
            records: rows.map(|&i| record(i, &classes, "train")).collect(),
            class_names: classes,
        };
        let file = format!("train-{j}.jsonl");
        write_manifest(&a.out.join(&file), &manifest)?;
        train_files.push(file);
    }
    for (name, rows, classes) in [("val", &val, seen_names), ("test", &test, &names[..])] {
        let manifest = DatasetManifest {
            name: name.into(),
            class_names: classes.to_vec(),
            records: rows.iter().map(|&i| record(i, classes, name)).collect(),
        };
        write_manifest(&a.out.join(format!("{name}.jsonl")), &manifest)?;
    }
    write_json(
        &a.out.join("world.json"),
        &json!({
            "classes": names,
            "seen": seen_names,
            "unseen": &names[seen..],
            "attributes": attributes,
            "knowledge_concepts": catalog.len(),
            "spec": spec,
            "train_manifests": train_files,
            "splits": {"train": train.len(), "val": val.len(), "test": test.len()},
        }),
    )?;
    eprintln!(
        "{} images, {} classes ({} unseen), {} training manifests in {}",
        data.len(),
        a.classes,
        a.unseen,
        a.manifests,
        a.out.display()
    );
    Ok(())
}

pub fn train_ke(a: &TrainKeArgs) -> Result<()> {
    let mut config = resolve(&a.common, RunConfig::default())?;
    if let Some(steps) = a.steps {
        config.knowledge.steps = steps;
    }
    create_dir(&a.out)?;
    echo(&config, &a.out)?;
    let catalog = ConceptCatalog::read_jsonl(open(&a.catalog)?, config.seed())?;
    let mut enc = ToyTextEncoder32::new(config.encoder(), config.seed())?;
    let report = train_knowledge_encoder(&mut enc, &catalog, &config.contrastive())?;
    enc.freeze();
    let (matched, mismatched) = pair_similarity_gap(&enc, &catalog)?;
    enc.save(&a.out, config.knowledge.tau, config.seed())?;
    write_json(
        &a.out.join("report.json"),
        &json!({
            "concepts": catalog.len(),
            "probe_before": report.probe_before,
            "probe_after": report.probe_after,
            "matched_similarity": matched,
            "mismatched_similarity": mismatched,
            "step_losses": report.step_losses,
        }),
    )?;
    eprintln!(
        "probe loss {:.4} -> {:.4}; cosine matched {matched:.3}, mismatched {mismatched:.3}",
        report.probe_before, report.probe_after
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut config = resolve(&a.common, RunConfig::default())?;
    if let Some(mode) = a.mode {
        config.model.mode = mode;
    }
    if a.prompt_count.is_some() {
        config.model.prompt_count = a.prompt_count;
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    let model_config = config.model()?;
    create_dir(&a.out)?;
    echo(&config, &a.out)?;
    let enc = load_encoder(a.ke.as_ref(), model_config.mode.uses_knowledge())?;
    let data = load_assembled(&a.manifests)?;
    let mut model = Classifier32::new(model_config, data.class_names.clone(), config.seed())?;
    let log_path = a.out.join("log.jsonl");
    let mut log = create(&log_path)?;
    let report = train_classifier(&mut model, &data, as_dyn(&enc), &config.training(), Some(&mut log))?;
    log.flush().map_err(io_err(&log_path))?;
    let config_json = serde_json::to_value(&config).map_err(|e| Error::Parse(e.to_string()))?;
    model.save(&a.out, json!({"config": config_json, "report": report}))?;
    if let Some(last) = report.epochs.last() {
        eprintln!("{} classes, {} samples, final epoch loss {:.4}", data.class_names.len(), data.len(), last.loss);
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let (model, config) = load_model(&a.model, &a.common, &a.eval)?;
    create_dir(&a.out)?;
    echo(&config, &a.out)?;
    let enc = load_encoder(a.ke.as_ref(), model.mode().uses_knowledge())?;
    let test = load_assembled(&a.manifests)?;
    let report = evaluate(&model, as_dyn(&enc), &test, config.evaluation())?;
    write_report(&a.out, &report)
}

pub fn zeroshot(a: &ZeroshotArgs) -> Result<()> {
    let (model, config) = load_model(&a.model, &a.common, &a.eval)?;
    let unseen: Vec<String> = a.classes.iter().map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect();
    if let Some(seen) = unseen.iter().find(|n| model.class_names().contains(n)) {
        return Err(Error::Protocol(format!("`{seen}` is part of the training vocabulary")));
    }
    create_dir(&a.out)?;
    echo(&config, &a.out)?;
    let enc = load_encoder(a.ke.as_ref(), model.mode().uses_knowledge())?;
    let test = load_assembled(&a.manifests)?;
    let report = zero_shot_eval(&model, as_dyn(&enc), &unseen, &test, config.evaluation())?;
    write_report(&a.out, &report)
}

pub fn assemble(a: &AssembleArgs) -> Result<()> {
    let config = resolve(&a.common, RunConfig::default())?;
    create_dir(&a.out)?;
    echo(&config, &a.out)?;
    let pool = a.manifests.iter().map(|p| read_manifest(p)).collect::<Result<Vec<_>>>()?;
    let write = |name: &str, data: &AssembledDataset| write_manifest(&a.out.join(format!("{name}.jsonl")), &data.to_manifest(name));
    let vocabulary = match &a.target {
        Some(target) => {
            let target = read_manifest(target)?;
            let arms = diversity_amount_arms(&target, &pool)?;
            write("separation", &arms.separation)?;
            write("plus_diversity", &arms.plus_diversity)?;
            write("plus_diversity_amount", &arms.plus_diversity_amount)?;
            arms.separation.vocabulary.clone()
        }
        None => {
            let vocabulary = build_union_vocabulary(&pool)?;
            let all = assemble_manifests(&pool, &vocabulary)?;
            match &a.split {
                Some(r) if r.len() != 3 => {
                    return Err(Error::Parameter(format!("--split takes three ratios, got {}", r.len())));
                }
                Some(r) => {
                    let [train, val, test] = all.split((r[0], r[1], r[2]), config.seed())?;
                    write("train", &train)?;
                    write("val", &val)?;
                    write("test", &test)?;
                }
                None => write("assembled", &all)?,
            }
            vocabulary
        }
    };
    write_json(&a.out.join("vocabulary.json"), &json!(vocabulary))?;
    eprintln!("{} classes in the union vocabulary", vocabulary.len());
    Ok(())
}

pub fn attn(a: &AttnArgs) -> Result<()> {
    let (model, config) = load_model(&a.model, &a.common, &EvalFlags { bootstrap: None, min_cases: None })?;
    create_dir(&a.out)?;
    echo(&config, &a.out)?;
    let enc = load_encoder(a.ke.as_ref(), model.mode().uses_knowledge())?;
    let mut names = model.class_names().to_vec();
    let index = match names.iter().position(|n| *n == a.class) {
        Some(i) => i,
        None if enc.is_some() => {
            names.push(a.class.clone());
            names.len() - 1
        }
        None => return Err(Error::Vocabulary(format!("`{}` is not a class of this baseline model", a.class))),
    };
    let image: ImageSample = imageio::load_gray(&a.image)?;
    let embeddings = match &enc {
        Some(e) => Some(class_embeddings(e, &names, model.config().d())?),
        None => None,
    };
    let bundle = model
        .predict(&[&image], embeddings.as_ref(), 1)?
        .pop()
        .ok_or_else(|| Error::Input("no prediction".into()))?;
    let grid = model.grid(image.height, image.width)?;
    if bundle.attention.is_empty() {
        return Err(Error::Config("this model has no cross-attention (plain baseline head)".into()));
    }
    let heat = attention_heatmap(&bundle, index, grid)?;
    let heat: Vec<f64> = heat.data().iter().map(|&v| f64::from(v)).collect();
    imageio::save_heatmap(&a.out.join("heatmap.pgm"), &a.out.join("heatmap.txt"), &heat, grid, a.scale)?;
    let scores: serde_json::Map<String, serde_json::Value> =
        names.iter().zip(&bundle.scores).map(|(n, &s)| (n.clone(), json!(f64::from(s)))).collect();
    write_json(
        &a.out.join("prediction.json"),
        &json!({
            "image": a.image,
            "class": a.class,
            "score": f64::from(bundle.scores[index]),
            "grid": [grid.0, grid.1],
            "scores": scores,
        }),
    )?;
    eprintln!("{}: score {:.4}, grid {}x{}", a.class, bundle.scores[index], grid.0, grid.1);
    Ok(())
}
