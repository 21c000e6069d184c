use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which side of the shared/per-series split a parameter lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    /// Shared across every series.
    Shared,
    /// A table whose row `i` belongs to series `i`.
    SeriesRows,
    /// A full copy owned by one series.
    Series(usize),
}

impl Partition {
    pub fn is_per_series(self) -> bool {
        !matches!(self, Partition::Shared)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor,
    pub partition: Partition,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Parameter {
    pub fn new(value: Tensor, partition: Partition) -> Self {
        let n = value.numel();
        Self {
            value,
            partition,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Named parameters plus their Adam moments.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`. A name can only ever sit in one partition.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, partition: Partition) {
        self.params.insert(name.into(), Parameter::new(value, partition));
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        partition: Partition,
        rng: &mut R,
    ) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape/data agree");
        self.insert(name, t, partition);
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn count_in(&self, pred: impl Fn(Partition) -> bool) -> usize {
        self.params
            .values()
            .filter(|p| pred(p.partition))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn shared_count(&self) -> usize {
        self.count_in(|p| p == Partition::Shared)
    }

    pub fn per_series_count(&self) -> usize {
        self.count_in(Partition::is_per_series)
    }

    pub fn per_series_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, p)| p.partition.is_per_series())
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// One Adam step with bias correction. Parameters without a gradient are
    /// left untouched, including their moments and step counter.
    pub fn adam_step(&mut self, grads: &HashMap<String, Tensor>, lr: f64) {
        for (name, p) in self.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            debug_assert_eq!(g.shape(), p.value.shape(), "gradient shape for {name}");
            p.steps += 1;
            let t = p.steps as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            let values = p.value.data_mut();
            for (((w, m), v), gi) in values.iter_mut().zip(&mut p.m).zip(&mut p.v).zip(g.data()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }

    /// Copies values (not moments) from `other` for every shared name.
    pub fn load_values(&mut self, other: &ParameterStore) {
        for (name, p) in self.params.iter_mut() {
            if let Some(src) = other.params.get(name) {
                p.value = src.value.clone();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(v), Partition::Shared);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(1.5);
        let grads = HashMap::from([("w".to_string(), Tensor::scalar(0.0))]);
        s.adam_step(&grads, 0.1);
        assert_eq!(s.value("w").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias-corrected both are 1 -> step = lr / (1 + eps)
        let mut s = scalar_store(0.0);
        let grads = HashMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        s.adam_step(&grads, 0.1);
        let expect = -0.1 / (1.0 + ADAM_EPS);
        assert!((s.value("w").unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_freezes_parameter() {
        let mut s = scalar_store(2.0);
        s.insert("b", Tensor::scalar(3.0), Partition::Shared);
        let grads = HashMap::from([("b".to_string(), Tensor::scalar(1.0))]);
        s.adam_step(&grads, 0.5);
        assert_eq!(s.value("w").unwrap().item(), 2.0);
        assert_eq!(s.get("w").unwrap().steps(), 0);
        assert!(s.value("b").unwrap().item() < 3.0);
    }

    #[test]
    fn identical_parameters_stay_identical() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::from_vec(vec![0.3, -0.2]), Partition::Series(0));
        s.insert("b", Tensor::from_vec(vec![0.3, -0.2]), Partition::Series(1));
        for k in 0..20 {
            let g = Tensor::from_vec(vec![(k as f64).sin(), (k as f64).cos()]);
            let grads = HashMap::from([("a".to_string(), g.clone()), ("b".to_string(), g)]);
            s.adam_step(&grads, 0.01);
        }
        assert_eq!(s.value("a"), s.value("b"));
    }

    #[test]
    fn partition_counts() {
        let mut s = ParameterStore::new();
        s.insert("shared", Tensor::zeros(vec![3, 4]), Partition::Shared);
        s.insert("emb", Tensor::zeros(vec![5, 2]), Partition::SeriesRows);
        assert_eq!(s.count(), 22);
        assert_eq!(s.shared_count(), 12);
        assert_eq!(s.per_series_count(), 10);
        assert_eq!(s.per_series_names(), vec!["emb"]);
    }
}
