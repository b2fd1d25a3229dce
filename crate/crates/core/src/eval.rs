//! AUC with missing-label exclusion, percentile bootstrap intervals, and
//! seen / zero-shot evaluation reports.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, LabeledDataset, MISSING};
use crate::error::{Error, Result};
use crate::knowledge::TextEncoder;
use crate::model::{Classifier, Mode};
use crate::scalar::Scalar;
use crate::training::class_embeddings;

/// Mann-Whitney AUC with midranks for ties. Entries labeled `-1` are
/// dropped first; `None` when no positives or no negatives remain.
pub fn auc(scores: &[f64], labels: &[i8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut obs: Vec<(f64, bool)> = Vec::with_capacity(scores.len());
    for (&s, &l) in scores.iter().zip(labels) {
        match l {
            MISSING => {}
            0 | 1 => {
                if s.is_nan() {
                    return Err(Error::Input("NaN score".into()));
                }
                obs.push((s, l == 1));
            }
            other => return Err(Error::Input(format!("label value {other} outside {{0, 1, -1}}"))),
        }
    }
    let n_pos = obs.iter().filter(|o| o.1).count();
    let n_neg = obs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    obs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < obs.len() {
        let mut j = i;
        while j + 1 < obs.len() && obs[j + 1].0 == obs[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * obs[i..=j].iter().filter(|o| o.1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Linear-interpolation quantile of sorted data (`h = (n - 1) q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Redraw attempts per bootstrap resample before giving up.
pub const MAX_REDRAWS: usize = 1000;

/// Percentile bootstrap interval of the AUC. Resamples draw observed
/// records with replacement; a resample lacking positives or negatives is
/// redrawn up to [`MAX_REDRAWS`] times. Resample `b` uses stream `b` of a
/// ChaCha8 generator seeded with `seed`, so results do not depend on
/// evaluation order.
pub fn bootstrap_ci(scores: &[f64], labels: &[i8], n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) || n_boot == 0 {
        return Err(Error::Config(format!("bootstrap needs 0 < level < 1 and n_boot > 0, got {level}, {n_boot}")));
    }
    if auc(scores, labels)?.is_none() {
        return Err(Error::Undefined("AUC undefined on the full sample".into()));
    }
    let (s, l): (Vec<f64>, Vec<i8>) = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != MISSING)
        .map(|(&s, &l)| (s, l))
        .unzip();
    let n = s.len();
    let mut boots = Vec::with_capacity(n_boot);
    let (mut rs, mut rl) = (vec![0.0; n], vec![0i8; n]);
    for b in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let mut value = None;
        for _ in 0..MAX_REDRAWS {
            for k in 0..n {
                let i = rng.random_range(0..n);
                rs[k] = s[i];
                rl[k] = l[i];
            }
            value = auc(&rs, &rl)?;
            if value.is_some() {
                break;
            }
        }
        boots.push(value.ok_or_else(|| {
            Error::Undefined(format!("bootstrap resample {b} stayed degenerate after {MAX_REDRAWS} draws"))
        })?);
    }
    boots.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&boots, alpha), quantile_sorted(&boots, 1.0 - alpha)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassStatus {
    Ok,
    /// No positives or no negatives among observed labels.
    Undefined,
    /// At most `min_cases` positives (with `min_cases > 0`).
    Dismissed,
}

/// One report line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: String,
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub status: ClassStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub summary: bool,
    pub mean_auc: Option<f64>,
    pub defined_classes: usize,
    pub total_classes: usize,
    pub ci_method: String,
    pub level: f64,
    pub n_boot: usize,
    pub min_cases: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassResult>,
    pub options: EvalOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Bootstrap resamples per class; 0 skips intervals.
    pub bootstrap: usize,
    pub level: f64,
    /// Classes with at most this many positives are dismissed from the
    /// mean; 0 keeps everything.
    pub min_cases: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bootstrap: 1000,
            level: 0.95,
            min_cases: 50,
            seed: 0,
        }
    }
}

impl EvalReport {
    /// Builds a report from per-class score columns and label columns.
    pub fn from_columns(names: &[String], scores: &[Vec<f64>], labels: &[Vec<i8>], options: EvalOptions) -> Result<Self> {
        if names.len() != scores.len() || names.len() != labels.len() {
            return Err(Error::Shape("class, score and label column counts differ".into()));
        }
        let mut classes = Vec::with_capacity(names.len());
        for (c, name) in names.iter().enumerate() {
            let (s, l) = (&scores[c], &labels[c]);
            let value = auc(s, l)?;
            let n_pos = l.iter().filter(|&&v| v == 1).count();
            let n_neg = l.iter().filter(|&&v| v == 0).count();
            let status = match value {
                None => ClassStatus::Undefined,
                Some(_) if n_pos <= options.min_cases && options.min_cases > 0 => ClassStatus::Dismissed,
                Some(_) => ClassStatus::Ok,
            };
            let ci = if value.is_some() && options.bootstrap > 0 {
                // a distinct seed per class
                let seed = options.seed ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                Some(bootstrap_ci(s, l, options.bootstrap, options.level, seed)?)
            } else {
                None
            };
            classes.push(ClassResult {
                class: name.clone(),
                auc: value,
                n_pos,
                n_neg,
                ci_low: ci.map(|c| c.0),
                ci_high: ci.map(|c| c.1),
                status,
            });
        }
        Ok(Self { classes, options })
    }

    pub fn empty(options: EvalOptions) -> Self {
        Self {
            classes: Vec::new(),
            options,
        }
    }

    pub fn get(&self, class: &str) -> Option<&ClassResult> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            summary: true,
            mean_auc: mean_auc(self).ok(),
            defined_classes: self.classes.iter().filter(|c| c.status == ClassStatus::Ok).count(),
            total_classes: self.classes.len(),
            ci_method: "percentile bootstrap over records".into(),
            level: self.options.level,
            n_boot: self.options.bootstrap,
            min_cases: self.options.min_cases,
        }
    }

    /// One JSON line per class, then the summary line.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let err = |e: std::io::Error| Error::io("evaluation report", e);
        for c in &self.classes {
            let line = serde_json::to_string(c).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(out, "{line}").map_err(err)?;
        }
        let line = serde_json::to_string(&self.summary()).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(out, "{line}").map_err(err)
    }
}

/// Unweighted mean over classes with status `Ok`.
pub fn mean_auc(report: &EvalReport) -> Result<f64> {
    let values: Vec<f64> = report
        .classes
        .iter()
        .filter(|c| c.status == ClassStatus::Ok)
        .filter_map(|c| c.auc)
        .collect();
    if values.is_empty() {
        return Err(Error::Undefined("no class has a defined AUC".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Scores of every image for the given queries, one column per query.
fn score_columns<T: Scalar>(
    model: &Classifier<T>,
    images: &[&ImageSample],
    embeddings: Option<&crate::tensor::Tensor<T>>,
    queries: usize,
) -> Result<Vec<Vec<f64>>> {
    let bundles = model.predict(images, embeddings, 64)?;
    let mut cols = vec![Vec::with_capacity(images.len()); queries];
    for b in &bundles {
        for (col, &s) in cols.iter_mut().zip(&b.scores) {
            col.push(s.as_f64());
        }
    }
    Ok(cols)
}

/// Evaluates the model's own classes on `test`, which must contain them.
pub fn evaluate<T: Scalar>(
    model: &Classifier<T>,
    encoder: Option<&dyn TextEncoder<T>>,
    test: &LabeledDataset,
    options: EvalOptions,
) -> Result<EvalReport> {
    let names = model.class_names().to_vec();
    let data = test.select_classes(&names)?;
    let images: Vec<&ImageSample> = data.samples.iter().map(|s| &s.image).collect();
    let embeddings = match (model.mode(), encoder) {
        (Mode::Baseline, _) => None,
        (_, Some(e)) => Some(class_embeddings(e, &names, model.config().d())?),
        (mode, None) => return Err(Error::Config(format!("mode {} needs a knowledge encoder", mode.as_str()))),
    };
    let scores = score_columns(model, &images, embeddings.as_ref(), names.len())?;
    let labels: Vec<Vec<i8>> = (0..names.len()).map(|c| data.column(c)).collect();
    EvalReport::from_columns(&names, &scores, &labels, options)
}

/// Score given to every unseen class by a model without name embeddings.
pub const BASELINE_UNSEEN_SCORE: f64 = 0.5;

/// Scores classes absent from training by embedding their names with the
/// frozen encoder and running them through the prompt module and decoder
/// like any seen class. Baseline models have no way to represent a new
/// name, so they give every image the constant [`BASELINE_UNSEEN_SCORE`],
/// which yields AUC 0.5 by construction. No parameter is modified.
pub fn zero_shot_eval<T: Scalar>(
    model: &Classifier<T>,
    encoder: Option<&dyn TextEncoder<T>>,
    unseen_names: &[String],
    test: &LabeledDataset,
    options: EvalOptions,
) -> Result<EvalReport> {
    if let Some(seen) = unseen_names.iter().find(|n| model.class_names().contains(n)) {
        return Err(Error::Protocol(format!("`{seen}` is part of the training vocabulary")));
    }
    if unseen_names.is_empty() {
        return Ok(EvalReport::empty(options));
    }
    let data = test.select_classes(unseen_names)?;
    let labels: Vec<Vec<i8>> = (0..unseen_names.len()).map(|c| data.column(c)).collect();
    let scores = match (model.mode(), encoder) {
        (Mode::Baseline, _) => vec![vec![BASELINE_UNSEEN_SCORE; data.len()]; unseen_names.len()],
        (_, Some(e)) => {
            let embeddings = class_embeddings(e, unseen_names, model.config().d())?;
            let images: Vec<&ImageSample> = data.samples.iter().map(|s| &s.image).collect();
            score_columns(model, &images, Some(&embeddings), unseen_names.len())?
        }
        (mode, None) => return Err(Error::Config(format!("mode {} needs a knowledge encoder", mode.as_str()))),
    };
    EvalReport::from_columns(unseen_names, &scores, &labels, options)
}
