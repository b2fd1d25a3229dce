//! The full classifier: visual backbone, query source (learned class table,
//! frozen text embeddings, or prompt-adapted embeddings) and the decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Bound, Linear, ParamId, ParamStore};
use crate::prompt::PromptModule;
use crate::query_head::{present_probability, PredictionBundle, QueryHead, QueryHeadConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::visual::{Backbone, BackboneConfig, BackboneKind};

pub const CHECKPOINT_KIND: &str = "classifier";

/// Where disease identity comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Learned per-class embedding table; no text knowledge.
    Baseline,
    /// Frozen knowledge-encoder embeddings used directly as queries.
    Ke,
    /// Knowledge embeddings passed through the prompt module.
    KeLp,
}

impl Mode {
    pub fn uses_knowledge(self) -> bool {
        !matches!(self, Mode::Baseline)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Ke => "ke",
            Mode::KeLp => "ke_lp",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "ke" => Ok(Mode::Ke),
            "ke_lp" => Ok(Mode::KeLp),
            other => Err(Error::Config(format!("unknown mode `{other}` (baseline, ke, ke_lp)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub backbone: BackboneConfig,
    pub decoder: QueryHeadConfig,
    pub prompt_count: Option<usize>,
    pub positional_encoding: bool,
    /// Baseline only: global average pooling plus one linear layer instead
    /// of the decoder.
    pub baseline_plain_head: bool,
}

impl ModelConfig {
    pub fn new(mode: Mode, d: usize) -> Self {
        Self {
            mode,
            backbone: BackboneConfig::conv(d),
            decoder: QueryHeadConfig::new(d),
            prompt_count: (mode == Mode::KeLp).then_some(32),
            positional_encoding: true,
            baseline_plain_head: false,
        }
    }

    /// Small CPU configuration: narrow backbone with a 1x1 last stage and a
    /// two-layer decoder.
    pub fn reduced(mode: Mode, d: usize) -> Self {
        let mut config = Self::new(mode, d);
        config.backbone.kind = BackboneKind::Conv {
            channels: [16, 32],
            kernels: [3, 3, 1],
        };
        config.decoder.layers = 2;
        config
    }

    pub fn d(&self) -> usize {
        self.decoder.d
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        if self.backbone.d != self.decoder.d {
            return Err(Error::Config(format!(
                "backbone width {} differs from decoder width {}",
                self.backbone.d, self.decoder.d
            )));
        }
        match (self.mode, self.prompt_count) {
            (Mode::KeLp, None) => return Err(Error::Config("mode ke_lp needs prompt_count".into())),
            (Mode::KeLp, Some(0)) => return Err(Error::Config("prompt_count must be at least 1".into())),
            (Mode::Baseline | Mode::Ke, Some(_)) => {
                return Err(Error::Config(format!(
                    "prompt_count is only valid in mode ke_lp, not {}",
                    self.mode.as_str()
                )))
            }
            _ => {}
        }
        if self.baseline_plain_head && self.mode != Mode::Baseline {
            return Err(Error::Config("baseline_plain_head requires mode baseline".into()));
        }
        Ok(())
    }
}

/// Rescales text embeddings to L2 norm `sqrt(d)`, i.e. unit scale per
/// coordinate, so queries match the scale of the learned parameters. The
/// encoder is trained with a cosine objective, so only directions carry
/// meaning. Zero rows are rejected.
pub fn scale_embeddings<T: Scalar>(embeddings: &Tensor<T>) -> Result<Tensor<T>> {
    let d = embeddings.cols();
    let target = T::lit(d as f64).sqrt();
    let mut out = embeddings.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::Degenerate(format!("class embedding {r} has norm {norm:?}")));
        }
        for x in row.iter_mut() {
            *x = *x * target / norm;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Classifier<T> {
    config: ModelConfig,
    class_names: Vec<String>,
    params: ParamStore<T>,
    backbone: Backbone,
    head: Option<QueryHead>,
    prompt: Option<PromptModule>,
    class_table: Option<ParamId>,
    plain_head: Option<Linear>,
}

/// Tape-level classifier output for a batch.
pub struct ForwardOutput<'t, T> {
    /// `[batch * Q, 2]`, sample-major.
    pub logits: Var<'t, T>,
    pub cross_attention: Vec<Var<'t, T>>,
    pub queries: usize,
    pub tokens: usize,
    pub grid: (usize, usize),
}

impl<T: Scalar> Classifier<T> {
    /// Builds a freshly initialized model over `class_names` (the training
    /// vocabulary; it sizes the baseline class table).
    pub fn new(config: ModelConfig, class_names: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if class_names.is_empty() {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let d = config.d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, "visual", config.backbone, &mut rng)?;
        let (mut head, mut prompt, mut class_table, mut plain_head) = (None, None, None, None);
        if config.baseline_plain_head {
            plain_head = Some(Linear::new(&mut params, "plain_head", d, 2 * class_names.len(), &mut rng));
        } else {
            head = Some(QueryHead::new(&mut params, "decoder", config.decoder, &mut rng)?);
        }
        match config.mode {
            Mode::Baseline if !config.baseline_plain_head => {
                class_table = Some(params.add("class_table", normal_tensor(&[class_names.len(), d], 1.0, &mut rng)));
            }
            Mode::KeLp => {
                let n = config.prompt_count.expect("validated");
                prompt = Some(PromptModule::new(&mut params, "prompt", d, n, &mut rng)?);
            }
            _ => {}
        }
        Ok(Self {
            config,
            class_names,
            params,
            backbone,
            head,
            prompt,
            class_table,
            plain_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn prompt(&self) -> Option<&PromptModule> {
        self.prompt.as_ref()
    }

    /// Decoder queries for the given text embeddings (knowledge modes) or
    /// for the whole training vocabulary (baseline table).
    pub fn queries<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, embeddings: Option<&Tensor<T>>) -> Result<Var<'t, T>> {
        match (self.config.mode, embeddings) {
            (Mode::Baseline, None) => Ok(p[self.class_table.ok_or_else(|| {
                Error::Contract("plain-head baseline has no query table".into())
            })?]),
            (Mode::Baseline, Some(_)) => Err(Error::Contract("baseline mode takes no text embeddings".into())),
            (_, None) => Err(Error::Config(format!(
                "mode {} needs knowledge-encoder embeddings",
                self.config.mode.as_str()
            ))),
            (mode, Some(e)) => {
                if e.shape().len() != 2 || e.cols() != self.config.d() {
                    return Err(Error::Shape(format!(
                        "embeddings {:?} but model width is {}",
                        e.shape(),
                        self.config.d()
                    )));
                }
                let t = tape.constant(scale_embeddings(e)?);
                Ok(match mode {
                    Mode::KeLp => self.prompt.as_ref().expect("ke_lp has prompts").adapt(p, t),
                    _ => t,
                })
            }
        }
    }

    /// Number of queries for a forward pass.
    fn query_count(&self, embeddings: Option<&Tensor<T>>) -> usize {
        embeddings.map_or(self.class_names.len(), |e| e.rows())
    }

    /// Runs the model on `pixels` (`[batch * H * W, 1]`).
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, T>,
        tape: &'t Tape<T>,
        pixels: Var<'t, T>,
        batch: usize,
        (height, width): (usize, usize),
        embeddings: Option<&Tensor<T>>,
    ) -> Result<ForwardOutput<'t, T>> {
        let (tokens, grid) = self
            .backbone
            .tokens(p, pixels, batch, height, width, self.config.positional_encoding)?;
        let l = grid.0 * grid.1;
        if let Some(plain) = &self.plain_head {
            if embeddings.is_some() {
                return Err(Error::Contract("baseline mode takes no text embeddings".into()));
            }
            let q = self.class_names.len();
            let segs: Vec<(usize, usize)> = (0..batch).map(|b| (b * l, l)).collect();
            let pooled = tokens.segment_mean(&segs);
            let logits = plain.forward(p, pooled).reshape(&[batch * q, 2]);
            return Ok(ForwardOutput {
                logits,
                cross_attention: Vec::new(),
                queries: q,
                tokens: l,
                grid,
            });
        }
        let q = self.query_count(embeddings);
        let queries = self.queries(p, tape, embeddings)?.tile_rows(batch);
        let head = self.head.as_ref().expect("decoder present");
        let out = head.decode_batch(p, queries, tokens, batch, q, l)?;
        Ok(ForwardOutput {
            logits: out.logits,
            cross_attention: out.cross_attention,
            queries: q,
            tokens: l,
            grid,
        })
    }

    /// Inference over many images, `chunk` at a time.
    pub fn predict(&self, images: &[&ImageSample], embeddings: Option<&Tensor<T>>, chunk: usize) -> Result<Vec<PredictionBundle<T>>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let tape = Tape::new();
            let p = self.params.bind_frozen(&tape);
            let (pixels, h, w) = Backbone::pixels::<T>(part)?;
            let f = self.forward(&p, &tape, tape.constant(pixels), part.len(), (h, w), embeddings)?;
            if f.cross_attention.is_empty() {
                let logits = f.logits.to_tensor();
                for b in 0..part.len() {
                    let rows: Vec<Vec<T>> = (0..f.queries).map(|i| logits.row(b * f.queries + i).to_vec()).collect();
                    out.push(PredictionBundle {
                        scores: rows.iter().map(|r| present_probability(r[0], r[1])).collect(),
                        logits: Tensor::from_rows(&rows)?,
                        attention: Vec::new(),
                    });
                }
            } else {
                let decoded = crate::query_head::DecodeOutput {
                    logits: f.logits,
                    cross_attention: f.cross_attention,
                };
                out.extend(QueryHead::bundles(&tape, &decoded, part.len(), f.queries, f.tokens));
            }
        }
        Ok(out)
    }

    /// Token grid produced for `height x width` inputs.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.backbone.grid(height, width)
    }

    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<()> {
        let full = serde_json::json!({
            "model": self.config,
            "class_names": self.class_names,
            "dtype": T::dtype_name(),
            "training": meta,
        });
        checkpoint::save(dir, CHECKPOINT_KIND, full, &self.params)
    }

    /// Restores a saved classifier; returns it with the saved training
    /// metadata.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (manifest, stored) = checkpoint::load::<T>(dir, Some(CHECKPOINT_KIND))?;
        let parse = |key: &str| {
            manifest
                .meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Parse(format!("checkpoint meta lacks `{key}`")))
        };
        let config: ModelConfig =
            serde_json::from_value(parse("model")?).map_err(|e| Error::Parse(format!("model config: {e}")))?;
        let class_names: Vec<String> =
            serde_json::from_value(parse("class_names")?).map_err(|e| Error::Parse(format!("class names: {e}")))?;
        let mut model = Self::new(config, class_names, 0)?;
        model.params.load_from(&stored)?;
        let meta = manifest.meta.get("training").cloned().unwrap_or(serde_json::Value::Null);
        Ok((model, meta))
    }
}
