//! Text encoder for concept names and definitions, its symmetric
//! temperature-scaled contrastive objective, and the training loop.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnSegment, Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Bound, FeedForward, Fnv, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::optim::{default_warmup_steps, AdamW, AdamWConfig, WarmupSchedule};
use crate::scalar::Scalar;
use crate::synth::ConceptCatalog;
use crate::tensor::Tensor;

/// Lowercasing tokenizer that splits on anything non-alphanumeric and
/// hashes tokens (FNV-1a) into a fixed number of buckets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            max_seq_len: 256,
        }
    }
}

impl Tokenizer {
    pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
    }

    pub fn token_id(&self, word: &str) -> usize {
        let mut h = Fnv::new();
        h.write(word.as_bytes());
        (h.finish() % self.vocab_size as u64) as usize
    }

    /// Token ids truncated to `max_seq_len`; errors on an empty result.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = Self::words(text)
            .take(self.max_seq_len)
            .map(|w| self.token_id(&w))
            .collect();
        if ids.is_empty() {
            return Err(Error::Input(format!("text `{text}` has no tokens")));
        }
        Ok(ids)
    }

    /// Digest identifying the tokenization scheme and its parameters.
    pub fn spec_hash(&self) -> String {
        let mut h = Fnv::new();
        h.write(b"lower|split-non-alnum|fnv1a-mod");
        h.write(&(self.vocab_size as u64).to_le_bytes());
        h.write(&(self.max_seq_len as u64).to_le_bytes());
        format!("{:016x}", h.finish())
    }
}

/// Anything that maps texts to fixed-width vectors and can be trained
/// through the tape.
pub trait TextEncoder<T: Scalar> {
    fn embed_dim(&self) -> usize;

    fn params(&self) -> &ParamStore<T>;

    /// Mutable parameters; a frozen encoder refuses.
    fn params_mut(&mut self) -> Result<&mut ParamStore<T>>;

    fn is_frozen(&self) -> bool;

    /// Marks the encoder immutable. There is no way back.
    fn freeze(&mut self);

    /// Records the embedding of `texts` (one row each) on the tape.
    fn forward<'t>(&self, params: &Bound<'t, T>, tape: &'t Tape<T>, texts: &[&str]) -> Result<Var<'t, T>>;

    /// Embeds texts without recording gradients.
    fn embed_texts(&self, texts: &[&str]) -> Result<Tensor<T>> {
        if texts.is_empty() {
            return Err(Error::Input("no texts to embed".into()));
        }
        let tape = Tape::new();
        let bound = self.params().bind_frozen(&tape);
        let out = self.forward(&bound, &tape, texts)?;
        let value = out.to_tensor();
        Ok(value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyEncoderConfig {
    pub tokenizer: Tokenizer,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
}

impl ToyEncoderConfig {
    pub fn with_dim(d: usize) -> Self {
        Self {
            tokenizer: Tokenizer::default(),
            d,
            layers: 2,
            heads: 4,
            ffn_width: 4 * d,
        }
    }
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self::with_dim(256)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

/// Hashed-vocabulary transformer encoder trained from scratch: token
/// embeddings, pre-norm self-attention blocks, mean pooling and a linear
/// projection.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder<T> {
    config: ToyEncoderConfig,
    params: ParamStore<T>,
    embedding: ParamId,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    projection: Linear,
    frozen: bool,
}

impl<T: Scalar> ToyTextEncoder<T> {
    pub fn new(config: ToyEncoderConfig, seed: u64) -> Result<Self> {
        if config.d == 0 || config.heads == 0 || config.d % config.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} must be a positive multiple of {} heads",
                config.d, config.heads
            )));
        }
        if config.tokenizer.vocab_size == 0 || config.tokenizer.max_seq_len == 0 {
            return Err(Error::Config("tokenizer needs a nonzero vocabulary and length".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d;
        let embedding = params.add(
            "token_embedding",
            normal_tensor(&[config.tokenizer.vocab_size, d], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        let layers = (0..config.layers)
            .map(|l| EncoderLayer {
                norm1: LayerNorm::new(&mut params, &format!("layer{l}.norm1"), d),
                attn: MultiHeadAttention::new(&mut params, &format!("layer{l}.attn"), d, config.heads, &mut rng),
                norm2: LayerNorm::new(&mut params, &format!("layer{l}.norm2"), d),
                ffn: FeedForward::new(&mut params, &format!("layer{l}.ffn"), d, config.ffn_width, &mut rng),
            })
            .collect();
        let final_norm = LayerNorm::new(&mut params, "final_norm", d);
        let projection = Linear::new(&mut params, "projection", d, d, &mut rng);
        Ok(Self {
            config,
            params,
            embedding,
            layers,
            final_norm,
            projection,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.config.tokenizer
    }

    /// Writes a checkpoint whose manifest records width, temperature,
    /// tokenizer digest and training seed.
    pub fn save(&self, dir: &Path, tau: f64, seed: u64) -> Result<()> {
        let meta = serde_json::json!({
            "encoder": "toy",
            "d": self.config.d,
            "tau": tau,
            "tokenizer_hash": self.config.tokenizer.spec_hash(),
            "seed": seed,
            "frozen": self.frozen,
            "config": self.config,
        });
        checkpoint::save(dir, "text_encoder", meta, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, stored) = checkpoint::load::<T>(dir, Some("text_encoder"))?;
        let config: ToyEncoderConfig = serde_json::from_value(manifest.meta["config"].clone())
            .map_err(|e| Error::Parse(format!("text encoder config: {e}")))?;
        let expected = config.tokenizer.spec_hash();
        if manifest.meta["tokenizer_hash"] != serde_json::Value::String(expected.clone()) {
            return Err(Error::Parse(format!(
                "tokenizer digest mismatch (expected {expected})"
            )));
        }
        let mut enc = Self::new(config, 0)?;
        enc.params.load_from(&stored)?;
        if manifest.meta["frozen"] == serde_json::Value::Bool(true) {
            enc.frozen = true;
        }
        Ok(enc)
    }
}

impl<T: Scalar> TextEncoder<T> for ToyTextEncoder<T> {
    fn embed_dim(&self) -> usize {
        self.config.d
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> Result<&mut ParamStore<T>> {
        if self.frozen {
            return Err(Error::Contract("text encoder is frozen".into()));
        }
        Ok(&mut self.params)
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn freeze(&mut self) {
        self.frozen = true;
    }

    fn forward<'t>(&self, p: &Bound<'t, T>, _tape: &'t Tape<T>, texts: &[&str]) -> Result<Var<'t, T>> {
        if texts.is_empty() {
            return Err(Error::Input("no texts to embed".into()));
        }
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(texts.len());
        for text in texts {
            let tokens = self.config.tokenizer.encode(text)?;
            spans.push((ids.len(), tokens.len()));
            ids.extend(tokens);
        }
        let segs: Vec<AttnSegment> = spans
            .iter()
            .map(|&(start, len)| AttnSegment {
                q_start: start,
                q_len: len,
                k_start: start,
                k_len: len,
            })
            .collect();
        let mut x = p[self.embedding].gather_rows(&ids);
        for layer in &self.layers {
            let h = layer.norm1.forward(p, x);
            let (attn, _) = layer.attn.forward(p, h, h, &segs);
            x = x.add(attn);
            let h = layer.norm2.forward(p, x);
            x = x.add(layer.ffn.forward(p, h));
        }
        let pooled = self.final_norm.forward(p, x).segment_mean(&spans);
        Ok(self.projection.forward(p, pooled))
    }
}

/// Fixed (non-trainable) text featurizer that can sit under a learned
/// projection, e.g. an externally pretrained language model.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn features(&self, text: &str) -> Result<Vec<f64>>;
}

/// Sum of fixed pseudo-random vectors of the hashed tokens, normalized by
/// token count. Stands in for an external encoder in encoder-swap studies.
#[derive(Clone, Debug)]
pub struct HashedBagOfWords {
    pub tokenizer: Tokenizer,
    pub dim: usize,
    pub seed: u64,
}

impl FeatureExtractor for HashedBagOfWords {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn features(&self, text: &str) -> Result<Vec<f64>> {
        let ids = self.tokenizer.encode(text)?;
        let mut out = vec![0.0; self.dim];
        for &id in &ids {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            for o in out.iter_mut() {
                *o += rng.random_range(-1.0..1.0);
            }
        }
        let n = ids.len() as f64;
        Ok(out.into_iter().map(|x| x / n).collect())
    }
}

/// External featurizer plus a trainable linear projection to `d`.
pub struct ProjectedEncoder<T, F> {
    base: F,
    params: ParamStore<T>,
    projection: Linear,
    d: usize,
    frozen: bool,
}

impl<T: Scalar, F: FeatureExtractor> ProjectedEncoder<T, F> {
    pub fn new(base: F, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let projection = Linear::new(&mut params, "projection", base.feature_dim(), d, &mut rng);
        Self {
            base,
            params,
            projection,
            d,
            frozen: false,
        }
    }
}

impl<T: Scalar, F: FeatureExtractor> TextEncoder<T> for ProjectedEncoder<T, F> {
    fn embed_dim(&self) -> usize {
        self.d
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> Result<&mut ParamStore<T>> {
        if self.frozen {
            return Err(Error::Contract("text encoder is frozen".into()));
        }
        Ok(&mut self.params)
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn freeze(&mut self) {
        self.frozen = true;
    }

    fn forward<'t>(&self, p: &Bound<'t, T>, tape: &'t Tape<T>, texts: &[&str]) -> Result<Var<'t, T>> {
        if texts.is_empty() {
            return Err(Error::Input("no texts to embed".into()));
        }
        let mut data = Vec::with_capacity(texts.len() * self.base.feature_dim());
        for text in texts {
            data.extend(self.base.features(text)?.into_iter().map(T::lit));
        }
        let feats = tape.constant(Tensor::from_vec(&[texts.len(), self.base.feature_dim()], data)?);
        Ok(self.projection.forward(p, feats))
    }
}

/// Symmetric InfoNCE over matched rows: the mean, over both directions and
/// all `N` rows, of the negative log-probability that row `i` of one side
/// picks row `i` of the other, with cosine similarities scaled by `1/tau`.
pub fn contrastive_loss<'t, T: Scalar>(names: Var<'t, T>, definitions: Var<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    let (ns, ds) = (names.shape(), definitions.shape());
    if ns.len() != 2 || ns != ds {
        return Err(Error::Shape(format!("embedding shapes {ns:?} and {ds:?}")));
    }
    let n = ns[0];
    if n == 0 {
        return Err(Error::Input("contrastive batch is empty".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature {tau} must be positive")));
    }
    for side in [names, definitions] {
        let v = side.value();
        if (0..n).any(|r| v.row(r).iter().all(|x| x.is_zero())) {
            return Err(Error::Degenerate("zero-norm embedding row".into()));
        }
    }
    let logits = names
        .l2_normalize_rows()
        .matmul_t(definitions.l2_normalize_rows(), false, true)
        .scale(T::lit(1.0 / tau));
    let w = T::lit(-1.0 / (2.0 * n as f64));
    let diag: Vec<(usize, T)> = (0..n).map(|i| (i * n + i, w)).collect();
    let forward = logits.log_softmax_rows().weighted_pick(diag.clone());
    let backward = logits.transpose().log_softmax_rows().weighted_pick(diag);
    Ok(forward.add(backward))
}

/// Evaluates [`contrastive_loss`] on plain matrices.
pub fn contrastive_loss_value<T: Scalar>(names: &Tensor<T>, definitions: &Tensor<T>, tau: f64) -> Result<T> {
    let tape = Tape::new();
    let loss = contrastive_loss(tape.constant(names.clone()), tape.constant(definitions.clone()), tau)?;
    let value = loss.value().item();
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub batch_pairs: usize,
    pub steps: usize,
    pub max_seq_len: usize,
    pub lr: f64,
    pub warmup_lr: f64,
    /// Defaults to 5% of `steps` when unset.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            batch_pairs: 64,
            steps: 2000,
            max_seq_len: 256,
            lr: 1e-4,
            warmup_lr: 1e-5,
            warmup_steps: None,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.batch_pairs == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("batch_pairs and max_seq_len must be positive".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<WarmupSchedule> {
        let warmup = self.warmup_steps.unwrap_or_else(|| default_warmup_steps(self.steps));
        WarmupSchedule::new(self.lr, self.warmup_lr, warmup)
    }
}

/// Loss trace of a contrastive training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub step_losses: Vec<f64>,
    pub probe_before: f64,
    pub probe_after: f64,
}

fn pair_loss<T: Scalar, E: TextEncoder<T>>(encoder: &E, catalog: &ConceptCatalog, idx: &[usize], tau: f64) -> Result<f64> {
    let (names, defs) = texts_for(catalog, idx);
    let n = encoder.embed_texts(&names)?;
    let d = encoder.embed_texts(&defs)?;
    Ok(contrastive_loss_value(&n, &d, tau)?.as_f64())
}

fn texts_for<'a>(catalog: &'a ConceptCatalog, idx: &[usize]) -> (Vec<&'a str>, Vec<&'a str>) {
    let names = idx.iter().map(|&i| catalog.concepts[i].name.as_str()).collect();
    let defs = idx.iter().map(|&i| catalog.concepts[i].definition.as_str()).collect();
    (names, defs)
}

/// Trains `encoder` on the catalog's (name, definition) pairs. Batches are
/// drawn without replacement when the catalog has at least `batch_pairs`
/// concepts and with replacement otherwise. The probe batch is fixed by the
/// seed and only evaluated, before and after training.
pub fn train_knowledge_encoder<T: Scalar, E: TextEncoder<T>>(
    encoder: &mut E,
    catalog: &ConceptCatalog,
    config: &ContrastiveConfig,
) -> Result<ContrastiveReport> {
    config.validate()?;
    if encoder.is_frozen() {
        return Err(Error::Contract("cannot train a frozen text encoder".into()));
    }
    if catalog.len() < 2 {
        return Err(Error::Input("contrastive training needs at least two concepts".into()));
    }
    let schedule = config.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = config.batch_pairs;
    let with_replacement = catalog.len() < batch;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        if with_replacement {
            (0..batch).map(|_| rng.random_range(0..catalog.len())).collect()
        } else {
            sample_indices(rng, catalog.len(), batch).into_vec()
        }
    };
    let probe = draw(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_9b0be));
    let mut report = ContrastiveReport {
        probe_before: pair_loss(encoder, catalog, &probe, config.tau)?,
        ..Default::default()
    };
    let mut opt = AdamW::new(encoder.params(), AdamWConfig::default());
    for step in 0..config.steps {
        let idx = draw(&mut rng);
        let (names, defs) = texts_for(catalog, &idx);
        let tape = Tape::new();
        let bound = encoder.params().bind(&tape);
        let mut texts = names;
        texts.extend(defs);
        let emb = encoder.forward(&bound, &tape, &texts)?;
        let loss = contrastive_loss(emb.slice_rows(0, batch), emb.slice_rows(batch, batch), config.tau)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::Divergence { step });
        }
        report.step_losses.push(value.as_f64());
        let grads = bound.grads(&tape.backward(loss));
        drop(bound);
        opt.step(encoder.params_mut()?, &grads, schedule.lr_at_step(step));
    }
    report.probe_after = pair_loss(encoder, catalog, &probe, config.tau)?;
    Ok(report)
}

/// Mean cosine similarity of matched (name, definition) pairs and of all
/// mismatched pairs.
pub fn pair_similarity_gap<T: Scalar, E: TextEncoder<T>>(encoder: &E, catalog: &ConceptCatalog) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..catalog.len()).collect();
    let (names, defs) = texts_for(catalog, &idx);
    let cos = |m: Tensor<T>| -> Tensor<T> {
        let tape = Tape::new();
        let v = tape.constant(m).l2_normalize_rows();
        let value = v.to_tensor();
        value
    };
    let n = cos(encoder.embed_texts(&names)?);
    let d = cos(encoder.embed_texts(&defs)?);
    let sims = n.matmul(&d.transpose())?;
    let k = catalog.len();
    let (mut matched, mut mismatched) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let s = sims.at(i, j).as_f64();
            if i == j {
                matched += s;
            } else {
                mismatched += s;
            }
        }
    }
    Ok((matched / k as f64, mismatched / (k * k - k).max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_catalog;

    fn small_encoder(seed: u64) -> ToyTextEncoder<f64> {
        ToyTextEncoder::new(ToyEncoderConfig::with_dim(16), seed).unwrap()
    }

    #[test]
    fn tokenizer_splits_and_truncates() {
        let tok = Tokenizer {
            vocab_size: 4096,
            max_seq_len: 3,
        };
        let words: Vec<String> = Tokenizer::words("A finding, with HAZY-features.").collect();
        assert_eq!(words, ["a", "finding", "with", "hazy", "features"]);
        assert_eq!(tok.encode("a b c d e").unwrap().len(), 3);
        assert!(matches!(tok.encode(" ,.- "), Err(Error::Input(_))));
        assert_eq!(tok.token_id("Hazy".to_lowercase().as_str()), tok.token_id("hazy"));
    }

    #[test]
    fn identical_texts_embed_identically() {
        let enc = small_encoder(1);
        let e = enc.embed_texts(&["bron-pneu", "bron-pneu", "card"]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_ne!(e.row(0), e.row(2));
        assert_eq!(e.shape(), &[3, 16]);
    }

    #[test]
    fn embedding_rows_are_independent_of_batch_order() {
        let enc = small_encoder(2);
        let a = enc.embed_texts(&["bron", "card effu", "A finding with hazy features."]).unwrap();
        let b = enc.embed_texts(&["A finding with hazy features.", "bron", "card effu"]).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(2));
        assert_eq!(a.row(2), b.row(0));
    }

    #[test]
    fn long_texts_embed_like_their_truncation() {
        let mut cfg = ToyEncoderConfig::with_dim(16);
        cfg.tokenizer.max_seq_len = 4;
        let enc = ToyTextEncoder::<f64>::new(cfg, 3).unwrap();
        let e = enc.embed_texts(&["one two three four five six", "one two three four"]).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn empty_text_is_an_input_error() {
        let enc = small_encoder(4);
        assert!(matches!(enc.embed_texts(&["ok", "--"]), Err(Error::Input(_))));
        assert!(matches!(enc.embed_texts(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let a = Tensor::from_vec(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[1, 3], vec![5.0, 1.0, 0.1]).unwrap();
        assert_eq!(contrastive_loss_value(&a, &b, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn loss_errors() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(contrastive_loss_value(&a, &b, 1.0), Err(Error::Degenerate(_))));
        assert!(matches!(contrastive_loss_value(&b, &b, 0.0), Err(Error::Parameter(_))));
        let c = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(contrastive_loss_value(&b, &c, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn frozen_encoder_rejects_updates_but_embeds_the_same() {
        let mut enc = small_encoder(5);
        let before = enc.embed_texts(&["bron"]).unwrap();
        enc.freeze();
        assert_eq!(enc.embed_texts(&["bron"]).unwrap(), before);
        assert!(matches!(enc.params_mut(), Err(Error::Contract(_))));
        let cat = generate_catalog(4, 4, 0).unwrap();
        let err = train_knowledge_encoder(&mut enc, &cat, &ContrastiveConfig::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn training_is_deterministic_and_reduces_probe_loss() {
        let cat = generate_catalog(24, 8, 1).unwrap();
        let cfg = ContrastiveConfig {
            batch_pairs: 8,
            steps: 40,
            lr: 3e-3,
            warmup_lr: 1e-4,
            seed: 9,
            ..Default::default()
        };
        let mut a = ToyTextEncoder::<f32>::new(ToyEncoderConfig::with_dim(16), 3).unwrap();
        let mut b = a.clone();
        let ra = train_knowledge_encoder(&mut a, &cat, &cfg).unwrap();
        let rb = train_knowledge_encoder(&mut b, &cat, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ra, rb);
        assert!(ra.probe_after < ra.probe_before, "{ra:?}");
    }

    #[test]
    fn small_catalog_samples_with_replacement() {
        let cat = generate_catalog(3, 4, 1).unwrap();
        let cfg = ContrastiveConfig {
            batch_pairs: 8,
            steps: 2,
            ..Default::default()
        };
        let mut enc = ToyTextEncoder::<f32>::new(ToyEncoderConfig::with_dim(8), 0).unwrap();
        let report = train_knowledge_encoder(&mut enc, &cat, &cfg).unwrap();
        assert_eq!(report.step_losses.len(), 2);
    }

    #[test]
    fn zero_steps_leaves_parameters_untouched() {
        let cat = generate_catalog(6, 4, 2).unwrap();
        let cfg = ContrastiveConfig {
            batch_pairs: 4,
            steps: 0,
            ..Default::default()
        };
        let mut enc = ToyTextEncoder::<f32>::new(ToyEncoderConfig::with_dim(8), 0).unwrap();
        let init = enc.params().clone();
        let report = train_knowledge_encoder(&mut enc, &cat, &cfg).unwrap();
        assert_eq!(enc.params(), &init);
        assert!(report.step_losses.is_empty());
        assert_eq!(report.probe_before, report.probe_after);
    }

    #[test]
    fn projected_encoder_trains_its_projection_only() {
        let base = HashedBagOfWords {
            tokenizer: Tokenizer::default(),
            dim: 24,
            seed: 1,
        };
        let mut enc = ProjectedEncoder::<f64, _>::new(base, 8, 2);
        let e = enc.embed_texts(&["bron card", "card bron"]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        let cat = generate_catalog(12, 6, 4).unwrap();
        let cfg = ContrastiveConfig {
            batch_pairs: 6,
            steps: 30,
            lr: 1e-2,
            warmup_lr: 1e-3,
            ..Default::default()
        };
        let report = train_knowledge_encoder(&mut enc, &cat, &cfg).unwrap();
        assert!(report.probe_after < report.probe_before);
        assert_eq!(enc.params().len(), 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("kdiag-ke-{}", std::process::id()));
        let mut enc = ToyTextEncoder::<f32>::new(ToyEncoderConfig::with_dim(8), 7).unwrap();
        enc.freeze();
        enc.save(&dir, 0.07, 7).unwrap();
        let back = ToyTextEncoder::<f32>::load(&dir).unwrap();
        assert_eq!(back.params(), enc.params());
        assert!(back.is_frozen());
        let manifest = checkpoint::read_manifest(&dir).unwrap();
        assert_eq!(manifest.meta["d"], 8);
        assert_eq!(manifest.meta["seed"], 7);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
