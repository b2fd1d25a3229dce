//! Disease-query decoder: class embeddings act as queries over the visual
//! tokens through pre-norm transformer blocks, and a shared head maps each
//! query to two logits (absent, present).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnSegment, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Logits per query: index 0 is "absent", 1 is "present".
pub const CLASSES_PER_QUERY: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryHeadConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub d: usize,
    /// Query self-attention inside every block.
    pub self_attention: bool,
    /// 1 for a single shared linear map, 2 for linear-GELU-linear.
    pub head_layers: usize,
}

impl QueryHeadConfig {
    pub fn new(d: usize) -> Self {
        Self {
            layers: 4,
            heads: 4,
            ffn_width: 4 * d,
            d,
            self_attention: true,
            head_layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.ffn_width == 0 || self.d == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!("d={} not divisible by {} heads", self.d, self.heads)));
        }
        if !matches!(self.head_layers, 1 | 2) {
            return Err(Error::Config(format!("head_layers must be 1 or 2, got {}", self.head_layers)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct QueryHead {
    config: QueryHeadConfig,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Vec<Linear>,
}

/// Tape-level decoder output for a packed batch.
pub struct DecodeOutput<'t, T> {
    /// `[batch * Q, 2]`.
    pub logits: Var<'t, T>,
    /// Cross-attention node of every block; its saved probabilities hold
    /// the per-head maps.
    pub cross_attention: Vec<Var<'t, T>>,
}

/// Scores and explanations for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle<T> {
    /// `[Q, 2]`.
    pub logits: Tensor<T>,
    /// Probability of "present" per query.
    pub scores: Vec<T>,
    /// One `[Q, tokens]` head-averaged cross-attention matrix per block.
    pub attention: Vec<Tensor<T>>,
}

/// `softmax(logits)[1]` for one two-way row.
pub fn present_probability<T: Scalar>(absent: T, present: T) -> T {
    let m = absent.max(present);
    let (e0, e1) = ((absent - m).exp(), (present - m).exp());
    e1 / (e0 + e1)
}

impl QueryHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: QueryHeadConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let blocks = (0..config.layers)
            .map(|i| {
                let n = format!("{name}.block{i}");
                Block {
                    self_norm: LayerNorm::new(store, &format!("{n}.self_norm"), d),
                    self_attn: MultiHeadAttention::new(store, &format!("{n}.self_attn"), d, config.heads, rng),
                    cross_norm: LayerNorm::new(store, &format!("{n}.cross_norm"), d),
                    cross_attn: MultiHeadAttention::new(store, &format!("{n}.cross_attn"), d, config.heads, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{n}.ffn_norm"), d),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, config.ffn_width, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), d);
        let head = if config.head_layers == 1 {
            vec![Linear::new(store, &format!("{name}.head"), d, CLASSES_PER_QUERY, rng)]
        } else {
            vec![
                Linear::new(store, &format!("{name}.head.hidden"), d, d, rng),
                Linear::new(store, &format!("{name}.head.output"), d, CLASSES_PER_QUERY, rng),
            ]
        };
        Ok(Self {
            config,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &QueryHeadConfig {
        &self.config
    }

    /// Shared classification head on `[rows, d]` features.
    pub fn classify<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        match self.head.as_slice() {
            [single] => single.forward(p, x),
            [hidden, output] => output.forward(p, hidden.forward(p, x).gelu()),
            _ => unreachable!("head has one or two layers"),
        }
    }

    /// Decodes `batch` images at once. `queries` is `[batch * q, d]`
    /// (sample-major), `tokens` is `[batch * l, d]`.
    pub fn decode_batch<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        queries: Var<'t, T>,
        tokens: Var<'t, T>,
        batch: usize,
        q: usize,
        l: usize,
    ) -> Result<DecodeOutput<'t, T>> {
        let d = self.config.d;
        if queries.cols() != d || tokens.cols() != d {
            return Err(Error::Shape(format!(
                "query width {} and token width {} must both be {d}",
                queries.cols(),
                tokens.cols()
            )));
        }
        if queries.rows() != batch * q || tokens.rows() != batch * l {
            return Err(Error::Shape(format!(
                "{} query rows and {} token rows for batch {batch} with {q} queries and {l} tokens",
                queries.rows(),
                tokens.rows()
            )));
        }
        let self_segs: Vec<AttnSegment> = (0..batch)
            .map(|b| AttnSegment {
                q_start: b * q,
                q_len: q,
                k_start: b * q,
                k_len: q,
            })
            .collect();
        let cross_segs: Vec<AttnSegment> = (0..batch)
            .map(|b| AttnSegment {
                q_start: b * q,
                q_len: q,
                k_start: b * l,
                k_len: l,
            })
            .collect();
        let mut x = queries;
        let mut cross_attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            if self.config.self_attention {
                let h = block.self_norm.forward(p, x);
                let (out, _) = block.self_attn.forward(p, h, h, &self_segs);
                x = x.add(out);
            }
            let h = block.cross_norm.forward(p, x);
            let (out, attended) = block.cross_attn.forward(p, h, tokens, &cross_segs);
            cross_attention.push(attended);
            x = x.add(out);
            let h = block.ffn_norm.forward(p, x);
            x = x.add(block.ffn.forward(p, h));
        }
        let logits = self.classify(p, self.final_norm.forward(p, x));
        Ok(DecodeOutput {
            logits,
            cross_attention,
        })
    }

    /// Splits a batch output into one bundle per image.
    pub fn bundles<T: Scalar>(tape: &Tape<T>, out: &DecodeOutput<'_, T>, batch: usize, q: usize, l: usize) -> Vec<PredictionBundle<T>> {
        let logits = out.logits.to_tensor();
        let maps: Vec<(usize, Vec<T>)> = out
            .cross_attention
            .iter()
            .map(|&v| {
                let (_, heads, probs) = tape.attention_probs(v).expect("cross-attention node");
                (heads, probs)
            })
            .collect();
        (0..batch)
            .map(|b| {
                let rows: Vec<Vec<T>> = (0..q).map(|i| logits.row(b * q + i).to_vec()).collect();
                let scores = rows.iter().map(|r| present_probability(r[0], r[1])).collect();
                let attention = maps
                    .iter()
                    .map(|(heads, probs)| {
                        let block = q * l;
                        let base = b * heads * block;
                        let inv = T::one() / T::lit(*heads as f64);
                        let mut avg = Tensor::zeros(&[q, l]);
                        for h in 0..*heads {
                            let src = &probs[base + h * block..base + (h + 1) * block];
                            for (a, &s) in avg.data_mut().iter_mut().zip(src) {
                                *a = *a + s;
                            }
                        }
                        avg.map(|a| a * inv)
                    })
                    .collect();
                PredictionBundle {
                    logits: Tensor::from_rows(&rows).expect("rectangular logits"),
                    scores,
                    attention,
                }
            })
            .collect()
    }

    /// Decodes one image from `[Q, d]` queries and `[L, d]` tokens.
    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, queries: &Tensor<T>, tokens: &Tensor<T>) -> Result<PredictionBundle<T>> {
        if queries.shape().len() != 2 || tokens.shape().len() != 2 {
            return Err(Error::Shape("queries and tokens must be matrices".into()));
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let (q, l) = (queries.rows(), tokens.rows());
        let out = self.decode_batch(&p, tape.constant(queries.clone()), tape.constant(tokens.clone()), 1, q, l)?;
        let bundle = Self::bundles(&tape, &out, 1, q, l).remove(0);
        Ok(bundle)
    }
}

/// Mean over blocks of one class's attention row, reshaped to the grid.
pub fn attention_heatmap<T: Scalar>(bundle: &PredictionBundle<T>, class_index: usize, grid: (usize, usize)) -> Result<Tensor<T>> {
    let q = bundle.scores.len();
    if class_index >= q {
        return Err(Error::Input(format!("class index {class_index} out of range for {q} queries")));
    }
    let first = bundle
        .attention
        .first()
        .ok_or_else(|| Error::Input("bundle has no attention maps".into()))?;
    if first.cols() != grid.0 * grid.1 {
        return Err(Error::Shape(format!(
            "{} tokens do not form a {}x{} grid",
            first.cols(),
            grid.0,
            grid.1
        )));
    }
    let inv = T::one() / T::lit(bundle.attention.len() as f64);
    let mut out = Tensor::zeros(&[grid.0, grid.1]);
    for layer in &bundle.attention {
        for (o, &a) in out.data_mut().iter_mut().zip(layer.row(class_index)) {
            *o = *o + a;
        }
    }
    Ok(out.map(|v| v * inv))
}
