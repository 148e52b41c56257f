//! Named parameter storage and the per-pass graph that binds parameters to a
//! tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{GradCheckReport, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::arg(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Gradients for every parameter of a [`ParamStore`], zero where absent.
#[derive(Clone, Debug)]
pub struct ParamGrads(Vec<Tensor>);

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        ParamGrads(store.values.iter().map(|v| Tensor::zeros(v.shape())).collect())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.0.iter()
    }

    pub fn accumulate(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.0 {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

/// One forward pass: a fresh tape, lazily bound parameters, and the random
/// state used by dropout.
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub rng: ChaCha8Rng,
    pub train: bool,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore, rng: ChaCha8Rng, train: bool) -> Self {
        Graph { tape: Tape::new(), params, bound: vec![None; params.len()], rng, train }
    }

    /// The tape node for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.tape.dropout(x, p, self.train, &mut self.rng)
    }

    /// Backward pass from `loss`, gathered per parameter.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        let out = self
            .bound
            .iter()
            .zip(&self.params.values)
            .map(|(b, v)| b.and_then(|var| grads.take(var)).unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect();
        Ok(ParamGrads(out))
    }
}

/// Central-difference check of [`Graph::param_grads`] for every element of
/// every parameter in `store`. `f` runs in eval mode with a fixed random
/// stream, so it must be deterministic.
pub fn grad_check_params<F>(store: &ParamStore, f: F, epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    use rand::SeedableRng;
    if epsilon <= 0.0 {
        return Err(Error::arg("epsilon must be positive"));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, ChaCha8Rng::seed_from_u64(0), false);
        let out = f(&mut g)?;
        if g.value(out).numel() != 1 {
            return Err(Error::arg("gradient check needs a scalar function"));
        }
        Ok(g.value(out).item())
    };
    let analytic = {
        let mut g = Graph::new(store, ChaCha8Rng::seed_from_u64(0), false);
        let out = f(&mut g)?;
        g.param_grads(out)?
    };
    let mut work = store.clone();
    let (mut max_abs, mut max_rel, mut count) = (0f64, 0f64, 0);
    for id in store.ids() {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + epsilon;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - epsilon;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let exact = analytic.get(id).data()[j];
            let abs = (numeric - exact).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / numeric.abs().max(exact.abs()).max(1e-8));
            count += 1;
        }
    }
    Ok(GradCheckReport { max_abs_diff: max_abs, max_rel_diff: max_rel, passed: max_rel <= tolerance, element_count: count })
}

/// Parameter initializers.
pub mod init {
    use super::*;

    pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Glorot/Xavier uniform for the given fan-in and fan-out.
    pub fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}
