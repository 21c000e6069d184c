//! Central finite-difference oracle for the tape's backward rules.
//!
//! Each instance builds `loss = sum(op(inputs) * probe)` with a fixed random
//! probe, differentiates it on the tape, and compares every input gradient
//! against `(loss(x + h) - loss(x - h)) / 2h` evaluated by rebuilding the graph.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsdesign::autodiff::{ConvSpec, Graph, OpKind, Tensor};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub struct Instance {
    pub kind: OpKind,
    pub inputs: Vec<Tensor>,
    /// Inputs that are differentiated (others enter as constants).
    pub differentiable: Vec<bool>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // keep values away from 0 so relu kinks are not straddled by the step
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Names of every differentiable op kind covered by the suite.
pub const KINDS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "matmul_batched",
    "affine",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "concat",
    "slice",
    "embedding",
    "dropout",
    "conv1d_causal_dilated",
    "conv1d_strided",
    "reshape",
    "permute",
];

pub fn instance(kind: &str, rng: &mut ChaCha8Rng) -> Instance {
    let two = |k: OpKind, a: Tensor, b: Tensor| Instance {
        kind: k,
        inputs: vec![a, b],
        differentiable: vec![true, true],
    };
    let one = |k: OpKind, a: Tensor| Instance {
        kind: k,
        inputs: vec![a],
        differentiable: vec![true],
    };
    match kind {
        "add" | "sub" | "mul" | "div" => {
            let (b0, b1, b2) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
            let broadcast = rng.random_bool(0.5);
            let a = random_tensor(rng, &[b0, b1, b2]);
            let b_shape: Vec<usize> = if broadcast { vec![b1, b2] } else { vec![b0, b1, b2] };
            let b = if kind == "div" {
                positive_tensor(rng, &b_shape)
            } else {
                random_tensor(rng, &b_shape)
            };
            let k = match kind {
                "add" => OpKind::Add,
                "sub" => OpKind::Sub,
                "mul" => OpKind::Mul,
                _ => OpKind::Div,
            };
            two(k, a, b)
        }
        "scale" => {
            let c = rng.random_range(-2.0..2.0);
            let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
            one(OpKind::Scale(c), random_tensor(rng, &s))
        }
        "matmul" => {
            let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            two(
                OpKind::MatMul,
                random_tensor(rng, &[b, m, k]),
                random_tensor(rng, &[k, n]),
            )
        }
        "matmul_batched" => {
            let (b, h, m, k, n) = (
                dim(rng, 1, 2),
                dim(rng, 1, 2),
                dim(rng, 1, 3),
                dim(rng, 1, 3),
                dim(rng, 1, 3),
            );
            two(
                OpKind::MatMul,
                random_tensor(rng, &[b, h, m, k]),
                random_tensor(rng, &[b, h, k, n]),
            )
        }
        "affine" => {
            let (r, i, o) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            Instance {
                kind: OpKind::Affine,
                inputs: vec![
                    random_tensor(rng, &[2, r, i]),
                    random_tensor(rng, &[i, o]),
                    random_tensor(rng, &[o]),
                ],
                differentiable: vec![true, true, true],
            }
        }
        "relu" | "gelu" | "sigmoid" | "tanh" => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
            let k = match kind {
                "relu" => OpKind::Relu,
                "gelu" => OpKind::Gelu,
                "sigmoid" => OpKind::Sigmoid,
                _ => OpKind::Tanh,
            };
            one(k, random_tensor(rng, &s))
        }
        "softmax" => {
            let s = [dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 1, 3)];
            let axis = rng.random_range(0..3);
            one(OpKind::Softmax { axis }, random_tensor(rng, &s))
        }
        "masked_softmax" => {
            let (b, l) = (dim(rng, 1, 3), dim(rng, 2, 5));
            let mut mask: Vec<bool> = (0..l * l).map(|_| rng.random_bool(0.6)).collect();
            for r in 0..l {
                mask[r * l + r] = true;
            }
            one(
                OpKind::MaskedSoftmax { mask: Rc::new(mask) },
                random_tensor(rng, &[b, l, l]),
            )
        }
        "layer_norm" => {
            let (r, d) = (dim(rng, 1, 4), dim(rng, 2, 6));
            Instance {
                kind: OpKind::LayerNorm,
                inputs: vec![
                    random_tensor(rng, &[r, d]),
                    random_tensor(rng, &[d]),
                    random_tensor(rng, &[d]),
                ],
                differentiable: vec![true, true, true],
            }
        }
        "sum" | "mean" => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
            one(
                if kind == "sum" { OpKind::Sum } else { OpKind::Mean },
                random_tensor(rng, &s),
            )
        }
        "sum_axis" | "mean_axis" => {
            let s = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3)];
            let axis = rng.random_range(0..3);
            let k = if kind == "sum_axis" {
                OpKind::SumAxis { axis }
            } else {
                OpKind::MeanAxis { axis }
            };
            one(k, random_tensor(rng, &s))
        }
        "concat" => {
            let axis = rng.random_range(0..3);
            let mut base = vec![dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            let a = random_tensor(rng, &base);
            base[axis] = dim(rng, 1, 3);
            let b = random_tensor(rng, &base);
            two(OpKind::Concat { axis }, a, b)
        }
        "slice" => {
            let s = [dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 1, 3)];
            let axis = rng.random_range(0..3);
            let start = rng.random_range(0..s[axis]);
            let end = rng.random_range(start + 1..=s[axis]);
            one(OpKind::Slice { axis, start, end }, random_tensor(rng, &s))
        }
        "embedding" => {
            let (v, d) = (dim(rng, 1, 5), dim(rng, 1, 4));
            let n = dim(rng, 1, 6);
            let ids = (0..n).map(|_| rng.random_range(0..v)).collect();
            one(OpKind::Embedding { ids }, random_tensor(rng, &[v, d]))
        }
        "dropout" => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
            one(OpKind::Dropout { rate: 0.3 }, random_tensor(rng, &s))
        }
        "conv1d_causal_dilated" | "conv1d_strided" => {
            let (b, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = dim(rng, 1, 3);
            let spec = if kind == "conv1d_strided" {
                ConvSpec::strided(dim(rng, 1, 3))
            } else {
                ConvSpec::causal(dim(rng, 1, 3))
            };
            let l = dim(rng, k.max(2), 7);
            Instance {
                kind: OpKind::Conv1d(spec),
                inputs: vec![
                    random_tensor(rng, &[b, l, cin]),
                    random_tensor(rng, &[k, cin, cout]),
                    random_tensor(rng, &[cout]),
                ],
                differentiable: vec![true, true, true],
            }
        }
        "reshape" => {
            let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            one(
                OpKind::Reshape { shape: vec![a * b, c] },
                random_tensor(rng, &[a, b, c]),
            )
        }
        "permute" => {
            let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 2)];
            let perms: [[usize; 4]; 4] = [[0, 2, 1, 3], [3, 2, 1, 0], [1, 0, 3, 2], [0, 2, 3, 1]];
            let perm = perms[rng.random_range(0..4)].to_vec();
            one(OpKind::Permute { perm }, random_tensor(rng, &s))
        }
        other => panic!("unknown kind {other}"),
    }
}

fn loss(inst: &Instance, inputs: &[Tensor], probe_seed: u64, want_grad: bool) -> (f64, Vec<Option<Tensor>>) {
    // dropout masks come from the graph seed, so every rebuild uses the same one
    let mut g = Graph::new(true, 99);
    let vars: Vec<_> = inputs
        .iter()
        .zip(&inst.differentiable)
        .map(|(t, d)| g.leaf(t.clone(), *d && want_grad))
        .collect();
    let out = g.apply(&inst.kind, &vars).unwrap();
    let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe_shape = g.shape(out).to_vec();
    let probe = random_tensor(&mut prng, &probe_shape);
    let p = g.constant(probe);
    let prod = g.mul(out, p).unwrap();
    let root = g.sum(prod);
    let value = g.value(root).item();
    if !want_grad {
        return (value, vec![]);
    }
    let grads = g.backward(root).unwrap();
    (value, vars.iter().map(|v| grads.get(*v).cloned()).collect())
}

/// Max relative error between tape and finite-difference gradients, using
/// `|a - n| / max(|a|, |n|, 1e-3)` per element.
pub fn max_relative_error(inst: &Instance, probe_seed: u64) -> f64 {
    let (_, analytic) = loss(inst, &inst.inputs, probe_seed, true);
    let mut worst: f64 = 0.0;
    for (idx, input) in inst.inputs.iter().enumerate() {
        if !inst.differentiable[idx] {
            continue;
        }
        let ga = analytic[idx]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for e in 0..input.numel() {
            let mut plus = inst.inputs.clone();
            plus[idx].data_mut()[e] += STEP;
            let mut minus = inst.inputs.clone();
            minus[idx].data_mut()[e] -= STEP;
            let (lp, _) = loss(inst, &plus, probe_seed, false);
            let (lm, _) = loss(inst, &minus, probe_seed, false);
            let numeric = (lp - lm) / (2.0 * STEP);
            let a = ga.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Runs `per_kind` random instances for every kind; returns `(kind, worst error)`.
pub fn run_suite(per_kind: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    KINDS
        .iter()
        .map(|kind| {
            let worst = (0..per_kind)
                .map(|i| {
                    let inst = instance(kind, &mut rng);
                    max_relative_error(&inst, seed ^ (i as u64 * 7919))
                })
                .fold(0.0, f64::max);
            (*kind, worst)
        })
        .collect()
}
