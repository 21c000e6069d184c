//! Small layer helpers on top of the tape. Each layer owns the names of its
//! parameters; values live in a [`ParameterStore`] and are bound to a graph
//! on every forward pass.

use std::rc::Rc;

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParameterStore, Partition};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Name prefix and partition for every parameter a component creates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scope {
    pub prefix: String,
    pub partition: Partition,
}

impl Scope {
    pub fn shared(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            partition: Partition::Shared,
        }
    }

    pub fn child(&self, name: &str) -> Self {
        Self {
            prefix: self.name(name),
            partition: self.partition,
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }
}

pub fn bind(g: &mut Graph, store: &ParameterStore, name: &str) -> Result<Var> {
    let value = store
        .value(name)
        .ok_or_else(|| Error::Config(format!("parameter `{name}` missing from store")))?;
    Ok(g.param(name, value))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, scope: &Scope, inp: usize, out: usize) -> Self {
        let weight = scope.name("weight");
        let bias = scope.name("bias");
        store.insert_uniform(&weight, &[inp, out], inp, scope.partition, rng);
        store.insert_uniform(&bias, &[out], inp, scope.partition, rng);
        Self { weight, bias, inp, out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = bind(g, store, &self.weight)?;
        let b = bind(g, store, &self.bias)?;
        g.affine(x, w, b)
    }

    pub fn zero(&self, store: &mut ParameterStore) {
        for name in [&self.weight, &self.bias] {
            if let Some(p) = store.get_mut(name) {
                p.value.data_mut().fill(0.0);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, scope: &Scope, dim: usize) -> Self {
        let gamma = scope.name("gamma");
        let beta = scope.name("beta");
        store.insert(&gamma, Tensor::full(vec![dim], 1.0), scope.partition);
        store.insert(&beta, Tensor::zeros(vec![dim]), scope.partition);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let gm = bind(g, store, &self.gamma)?;
        let bt = bind(g, store, &self.beta)?;
        g.layer_norm(x, gm, bt)
    }
}

/// `affine -> relu -> dropout -> affine`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        scope: &Scope,
        dim: usize,
        hidden: usize,
        dropout: f64,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &scope.child("fc1"), dim, hidden),
            output: Linear::new(store, rng, &scope.child("fc2"), hidden, dim),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        self.output.forward(g, store, h)
    }
}

/// Multi-head scaled dot-product self-attention over axis 1 of `[B, L, d]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// `[B, heads, L, L]` attention weights.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        scope: &Scope,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden size {dim} is not divisible by {heads} attention heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &scope.child("query"), dim, dim),
            key: Linear::new(store, rng, &scope.child("key"), dim, dim),
            value: Linear::new(store, rng, &scope.child("value"), dim, dim),
            output: Linear::new(store, rng, &scope.child("out"), dim, dim),
            heads,
            dim,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<AttentionOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(shape_err(
                "attention",
                format!("expected [B, L, {}], got {shape:?}", self.dim),
            ));
        }
        let (b, l) = (shape[0], shape[1]);
        let dk = self.dim / self.heads;
        let split = [b, l, self.heads, dk];
        let q = self.query.forward(g, store, x)?;
        let q = g.reshape(q, &split)?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = self.key.forward(g, store, x)?;
        let k = g.reshape(k, &split)?;
        let kt = g.permute(k, &[0, 2, 3, 1])?;
        let v = self.value.forward(g, store, x)?;
        let v = g.reshape(v, &split)?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let weights = match mask {
            Some(m) => g.masked_softmax(scores, m)?,
            None => g.softmax(scores, 3)?,
        };
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, self.dim])?;
        let output = self.output.forward(g, store, ctx)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Rows `ids` of `x` along axis 0 (rows may repeat).
pub fn gather_rows(g: &mut Graph, x: Var, ids: &[usize]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let rest: usize = s[1..].iter().product();
    let flat = g.reshape(x, &[s[0], rest])?;
    let rows = g.embedding(flat, ids)?;
    let mut out = s;
    out[0] = ids.len();
    g.reshape(rows, &out)
}

/// Applies `f` separately to the rows of each group and reassembles the
/// outputs in the original row order. `f` receives the group id and that
/// group's rows.
pub fn per_group<F>(g: &mut Graph, x: Var, groups: &[usize], mut f: F) -> Result<Var>
where
    F: FnMut(&mut Graph, usize, Var) -> Result<Var>,
{
    let mut order: Vec<usize> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (row, id) in groups.iter().enumerate() {
        match order.iter().position(|o| o == id) {
            Some(k) => members[k].push(row),
            None => {
                order.push(*id);
                members.push(vec![row]);
            }
        }
    }
    if order.len() == 1 {
        return f(g, order[0], x);
    }
    let mut parts = Vec::with_capacity(order.len());
    let mut position = vec![0; groups.len()];
    let mut next = 0;
    for (id, rows) in order.iter().zip(&members) {
        let sub = gather_rows(g, x, rows)?;
        parts.push(f(g, *id, sub)?);
        for r in rows {
            position[*r] = next;
            next += 1;
        }
    }
    let stacked = g.concat(&parts, 0)?;
    gather_rows(g, stacked, &position)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn per_group_restores_row_order() {
        let mut g = Graph::new(false, 0);
        let x = g.leaf(Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap(), true);
        let out = per_group(&mut g, x, &[1, 0, 1, 2], |g, id, rows| {
            Ok(g.scale(rows, 10f64.powi(id as i32)))
        })
        .unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 10.0, 2.0, 3.0, 40.0, 50.0, 600.0, 700.0]);
        let loss = g.sum(out);
        let grads = g.backward(loss).unwrap();
        assert_eq!(
            grads.get(x).unwrap().data(),
            &[10.0, 10.0, 1.0, 1.0, 10.0, 10.0, 100.0, 100.0]
        );
    }

    #[test]
    fn scope_names_nest() {
        let s = Scope::shared("temporal").child("block0");
        assert_eq!(s.name("weight"), "temporal.block0.weight");
        assert_eq!(Scope::shared("").name("w"), "w");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, &Scope::shared("a"), 8, 2).unwrap();
        let mut g = Graph::new(false, 0);
        let data = (0..3 * 5 * 8).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.constant(Tensor::new(vec![3, 5, 8], data).unwrap());
        let out = mha.forward(&mut g, &store, x, None).unwrap();
        assert_eq!(g.shape(out.output), &[3, 5, 8]);
        for row in g.value(out.weights).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        assert!(MultiHeadAttention::new(&mut store, &mut rng, &Scope::shared("a"), 10, 4).is_err());
    }
}
