//! Masked cross-entropy and the classifier training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{ImageSample, LabelRecord, LabeledDataset, MISSING};
use crate::error::{Error, Result};
use crate::knowledge::TextEncoder;
use crate::model::Classifier;
use crate::optim::{default_warmup_steps, AdamW, AdamWConfig, WarmupSchedule};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::visual::Backbone;

/// Two-way cross-entropy `-log softmax(row)[label]`.
fn entry_loss<T: Scalar>(row: &[T], label: i8) -> T {
    let m = row[0].max(row[1]);
    let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
    lse - row[label as usize]
}

/// Mean two-way cross-entropy over the observed entries of one sample.
/// Returns `(0, 0)` when nothing is observed.
pub fn masked_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[i8]) -> Result<(T, usize)> {
    if logits.shape() != [labels.len(), 2] {
        return Err(Error::Shape(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|v| !matches!(v, -1..=1)) {
        return Err(Error::Input(format!("label value {bad} outside {{0, 1, -1}}")));
    }
    let mut sum = T::zero();
    let mut count = 0;
    for (q, &label) in labels.iter().enumerate() {
        if label != MISSING {
            sum = sum + entry_loss(logits.row(q), label);
            count += 1;
        }
    }
    if count == 0 {
        return Ok((T::zero(), 0));
    }
    Ok((sum / T::lit(count as f64), count))
}

/// Batch loss on the tape: the mean, over samples with at least one
/// observed label, of each sample's masked mean cross-entropy. `logits` is
/// `[batch * q, 2]`, sample-major. Returns the loss and the number of
/// contributing samples.
pub fn masked_batch_loss<'t, T: Scalar>(logits: Var<'t, T>, labels: &[&LabelRecord], q: usize) -> Result<(Var<'t, T>, usize)> {
    if logits.shape() != [labels.len() * q, 2] {
        return Err(Error::Shape(format!(
            "logits {:?} for {} samples of {q} classes",
            logits.shape(),
            labels.len()
        )));
    }
    let contributing = labels.iter().filter(|l| l.observed_count() > 0).count();
    let mut picks = Vec::new();
    for (b, record) in labels.iter().enumerate() {
        if record.len() != q {
            return Err(Error::Shape(format!("label record of length {} for {q} classes", record.len())));
        }
        let n = record.observed_count();
        if n == 0 {
            continue;
        }
        let w = -T::one() / T::lit((n * contributing) as f64);
        for (i, &v) in record.values().iter().enumerate() {
            if v != MISSING {
                picks.push(((b * q + i) * 2 + v as usize, w));
            }
        }
    }
    Ok((logits.log_softmax_rows().weighted_pick(picks), contributing))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_lr: f64,
    /// Defaults to 5% of all steps when unset.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    pub horizontal_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-4,
            warmup_lr: 1e-5,
            warmup_steps: None,
            seed: 0,
            horizontal_flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        WarmupSchedule::new(self.lr, self.warmup_lr, 0).map(|_| ())
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, samples: usize) -> Result<WarmupSchedule> {
        let warmup = self
            .warmup_steps
            .unwrap_or_else(|| default_warmup_steps(self.total_steps(samples)));
        WarmupSchedule::new(self.lr, self.warmup_lr, warmup)
    }
}

/// One line of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub total_steps: usize,
    pub warmup_steps: usize,
    /// Parameter fingerprint of the knowledge encoder, identical before and
    /// after training.
    pub encoder_fingerprint: Option<u64>,
}

/// Text embeddings of `names` from a frozen encoder, checked against the
/// model width.
pub fn class_embeddings<T: Scalar>(encoder: &dyn TextEncoder<T>, names: &[String], d: usize) -> Result<Tensor<T>> {
    if !encoder.is_frozen() {
        return Err(Error::Config("the knowledge encoder must be frozen before classifier training".into()));
    }
    if encoder.embed_dim() != d {
        return Err(Error::Config(format!(
            "encoder width {} differs from model width {d}",
            encoder.embed_dim()
        )));
    }
    let texts: Vec<&str> = names.iter().map(String::as_str).collect();
    encoder.embed_texts(&texts)
}

/// Trains every classifier parameter (backbone, decoder, and prompt module
/// or class table) on `data`, whose class list must equal the model's.
/// Knowledge modes need a frozen `encoder`; baseline mode must not get one.
/// Per-epoch records are appended to `log` as JSON lines. Batches without
/// any observed label are skipped without an optimizer step.
pub fn train_classifier<T: Scalar>(
    model: &mut Classifier<T>,
    data: &LabeledDataset,
    encoder: Option<&dyn TextEncoder<T>>,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    config.validate()?;
    if data.class_names != model.class_names() {
        return Err(Error::Vocabulary("training data classes differ from the model's classes".into()));
    }
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mode = model.mode();
    let (embeddings, fingerprint) = match (mode.uses_knowledge(), encoder) {
        (true, None) => {
            return Err(Error::Config(format!("mode {} needs a knowledge encoder", mode.as_str())));
        }
        (false, Some(_)) => return Err(Error::Config("baseline mode takes no knowledge encoder".into())),
        (true, Some(e)) => {
            let before = e.params().fingerprint();
            (Some(class_embeddings(e, &data.class_names, model.config().d())?), Some(before))
        }
        (false, None) => (None, None),
    };
    let q = data.class_names.len();
    let schedule = config.schedule(data.len())?;
    let total_steps = config.total_steps(data.len());
    let mut opt = AdamW::new(model.params(), AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let mut lr = schedule.lr_at_step(step);
        for chunk in order.chunks(config.batch_size) {
            let flipped: Vec<ImageSample>;
            let images: Vec<&ImageSample> = if config.horizontal_flip {
                flipped = chunk
                    .iter()
                    .map(|&i| {
                        let img = &data.samples[i].image;
                        if rng.random::<bool>() {
                            img.flipped_horizontally()
                        } else {
                            img.clone()
                        }
                    })
                    .collect();
                flipped.iter().collect()
            } else {
                chunk.iter().map(|&i| &data.samples[i].image).collect()
            };
            let labels: Vec<&LabelRecord> = chunk.iter().map(|&i| &data.samples[i].labels).collect();
            if labels.iter().all(|l| l.observed_count() == 0) {
                continue;
            }
            let tape = Tape::new();
            let p = model.params().bind(&tape);
            let (pixels, h, w) = Backbone::pixels::<T>(&images)?;
            let out = model.forward(&p, &tape, tape.constant(pixels), images.len(), (h, w), embeddings.as_ref())?;
            let (loss, _) = masked_batch_loss(out.logits, &labels, q)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Divergence { step });
            }
            let grads = p.grads(&tape.backward(loss));
            drop(p);
            lr = schedule.lr_at_step(step);
            opt.step(model.params_mut(), &grads, lr);
            step += 1;
            loss_sum += value.as_f64();
            batches += 1;
        }
        let record = EpochLog {
            epoch,
            step,
            loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            lr,
        };
        if let Some(out) = log.as_deref_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        epochs.push(record);
    }
    if let (Some(e), Some(before)) = (encoder, fingerprint) {
        if e.params().fingerprint() != before {
            return Err(Error::Contract("knowledge encoder parameters changed during training".into()));
        }
    }
    Ok(TrainReport {
        epochs,
        total_steps,
        warmup_steps: schedule.warmup_steps,
        encoder_fingerprint: fingerprint,
    })
}
