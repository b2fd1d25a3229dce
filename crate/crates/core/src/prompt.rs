//! Learnable prompt module: each class embedding picks a convex mixture of
//! a shared bank of prompt vectors.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Bound, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Class embeddings from the frozen text encoder, one row per class name.
#[derive(Clone, Debug, PartialEq)]
pub struct DiseaseEmbeddings<T> {
    matrix: Tensor<T>,
    class_names: Vec<String>,
}

impl<T: Scalar> DiseaseEmbeddings<T> {
    pub fn new(matrix: Tensor<T>, class_names: Vec<String>) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() != class_names.len() {
            return Err(Error::Shape(format!(
                "{} class names for embedding matrix {:?}",
                class_names.len(),
                matrix.shape()
            )));
        }
        if !matrix.all_finite() {
            return Err(Error::Input("non-finite class embedding".into()));
        }
        Ok(Self { matrix, class_names })
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Prompt bank plus the one-hidden-layer GELU MLP that scores it.
///
/// The MLP output layer starts at zero, so every class initially receives
/// the uniform mixture, i.e. the bank mean.
#[derive(Clone, Copy, Debug)]
pub struct PromptModule {
    pub hidden: Linear,
    pub output: Linear,
    pub bank: ParamId,
    pub dim: usize,
    pub prompt_count: usize,
}

impl PromptModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        prompt_count: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if prompt_count == 0 {
            return Err(Error::Config("prompt_count must be at least 1".into()));
        }
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.mlp.hidden"), dim, dim, rng),
            output: Linear::zeros(store, &format!("{name}.mlp.output"), dim, prompt_count),
            bank: store.add(
                format!("{name}.bank"),
                normal_tensor(&[prompt_count, dim], 1.0 / (dim as f64).sqrt(), rng),
            ),
            dim,
            prompt_count,
        })
    }

    /// MLP scores before the softmax, `[Q, prompt_count]`.
    pub fn logits<'t, T: Scalar>(&self, p: &Bound<'t, T>, embeddings: Var<'t, T>) -> Var<'t, T> {
        self.output.forward(p, self.hidden.forward(p, embeddings).gelu())
    }

    /// Row-stochastic weights over the bank, `[Q, prompt_count]`.
    pub fn distribution<'t, T: Scalar>(&self, p: &Bound<'t, T>, embeddings: Var<'t, T>) -> Var<'t, T> {
        self.logits(p, embeddings).softmax_rows()
    }

    /// Adapted embeddings `distribution · bank`, `[Q, dim]`.
    pub fn adapt<'t, T: Scalar>(&self, p: &Bound<'t, T>, embeddings: Var<'t, T>) -> Var<'t, T> {
        self.distribution(p, embeddings).matmul(p[self.bank])
    }

    fn check<T: Scalar>(&self, embeddings: &Tensor<T>) -> Result<()> {
        if embeddings.cols() != self.dim {
            return Err(Error::Shape(format!(
                "embedding width {} but prompt module expects {}",
                embeddings.cols(),
                self.dim
            )));
        }
        if !embeddings.all_finite() {
            return Err(Error::Input("non-finite class embedding".into()));
        }
        Ok(())
    }

    pub fn distribution_value<T: Scalar>(&self, store: &ParamStore<T>, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(embeddings)?;
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let out = self.distribution(&p, tape.constant(embeddings.clone())).to_tensor();
        Ok(out)
    }

    pub fn adapt_value<T: Scalar>(&self, store: &ParamStore<T>, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(embeddings)?;
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let out = self.adapt(&p, tape.constant(embeddings.clone())).to_tensor();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn module(dim: usize, n: usize) -> (ParamStore<f64>, PromptModule) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let m = PromptModule::new(&mut store, "prompt", dim, n, &mut rng).unwrap();
        (store, m)
    }

    fn embeddings(q: usize, dim: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        normal_tensor(&[q, dim], 1.0, &mut rng)
    }

    #[test]
    fn zero_output_layer_gives_uniform_weights() {
        let (store, m) = module(6, 4);
        let w = m.distribution_value(&store, &embeddings(3, 6)).unwrap();
        assert!(w.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let adapted = m.adapt_value(&store, &embeddings(3, 6)).unwrap();
        let bank = store.get(m.bank);
        for j in 0..6 {
            let mean = (0..4).map(|i| bank.at(i, j)).sum::<f64>() / 4.0;
            for r in 0..3 {
                assert!((adapted.at(r, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_prompt_is_copied_to_every_class() {
        let (mut store, m) = module(5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        *store.get_mut(m.output.weight) = normal_tensor(&[5, 1], 1.0, &mut rng);
        let w = m.distribution_value(&store, &embeddings(4, 5)).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
        let adapted = m.adapt_value(&store, &embeddings(4, 5)).unwrap();
        let v = store.get(m.bank).row(0).to_vec();
        for r in 0..4 {
            assert_eq!(adapted.row(r), v.as_slice());
        }
    }

    #[test]
    fn two_prompt_mixture() {
        let (mut store, m) = module(2, 2);
        // hidden layer irrelevant: zero weights, output bias sets the logits
        *store.get_mut(m.output.bias) = Tensor::from_vec(&[2], vec![3f64.ln(), 0.0]).unwrap();
        *store.get_mut(m.bank) = Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let e = embeddings(1, 2);
        let w = m.distribution_value(&store, &e).unwrap();
        assert!((w.at(0, 0) - 0.75).abs() < 1e-15 && (w.at(0, 1) - 0.25).abs() < 1e-15);
        let out = m.adapt_value(&store, &e).unwrap();
        assert!((out.at(0, 0) - 1.5).abs() < 1e-15 && (out.at(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let (store, m) = module(4, 3);
        assert!(matches!(m.adapt_value(&store, &embeddings(2, 5)), Err(Error::Shape(_))));
        assert!(DiseaseEmbeddings::new(embeddings(2, 4), vec!["a".into()]).is_err());
    }

    #[test]
    fn zero_prompts_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(PromptModule::new(&mut store, "p", 4, 0, &mut rng).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, m) = module(6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // perturb the zero output layer so every path carries signal
        let mut inputs: Vec<Tensor<f64>> = vec![embeddings(3, 6)];
        for (_, t) in store.iter() {
            let noisy = normal_tensor::<f64>(t.shape(), 0.5, &mut rng);
            inputs.push(noisy);
        }
        let readout = normal_tensor::<f64>(&[3, 6], 1.0, &mut rng);
        let report = crate::gradcheck::check_gradients(&inputs, 1e-4, |tape, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            m.adapt(&p, v[0]).mul(tape.constant(readout.clone())).sum()
        });
        assert!(report.max_rel_err <= 1e-3, "{report:?}");
    }

    proptest::proptest! {
        #[test]
        fn rows_are_convex_mixtures(seed in 0u64..500, q in 1usize..5, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let m = PromptModule::new(&mut store, "p", 4, n, &mut rng).unwrap();
            *store.get_mut(m.output.weight) = normal_tensor(&[4, n], 3.0, &mut rng);
            let e: Tensor<f64> = normal_tensor(&[q, 4], 2.0, &mut rng);
            let w = m.distribution_value(&store, &e).unwrap();
            for r in 0..q {
                let row = w.row(r);
                proptest::prop_assert!(row.iter().all(|&x| x >= 0.0));
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
            let out = m.adapt_value(&store, &e).unwrap();
            let bank = store.get(m.bank);
            for j in 0..4 {
                let col: Vec<f64> = (0..n).map(|i| bank.at(i, j)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for r in 0..q {
                    proptest::prop_assert!(out.at(r, j) >= lo - 1e-12 && out.at(r, j) <= hi + 1e-12);
                }
            }
        }
    }
}
