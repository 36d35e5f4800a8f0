//! Parameter storage, layers and the optimizer built on [`crate::graph`].

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, Tape, Var};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(usize);

/// An ordered collection of named parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
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

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.values.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    /// Rounds every parameter to `f32` precision so that a checkpoint
    /// written in 32-bit floats reloads to exactly the same model.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Replaces the values of parameters with matching names from `other`.
    pub fn load_from(&mut self, other: &ParamSet) -> crate::Result<()> {
        for (name, value) in other.iter() {
            let slot = self.by_name_mut(name).ok_or_else(|| {
                crate::Error::Validation(format!("checkpoint has unknown parameter {name}"))
            })?;
            crate::error::ensure!(
                slot.dim() == value.dim(),
                "parameter {name} has shape {:?}, checkpoint has {:?}",
                slot.dim(),
                value.dim()
            );
            slot.assign(value);
        }
        crate::error::ensure!(
            other.len() == self.len(),
            "checkpoint has {} parameters, model has {}",
            other.len(),
            self.len()
        );
        Ok(())
    }
}

/// Tape handles for the parameters of one [`ParamSet`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter, zero where the loss does not reach it.
    pub fn gradients(&self, params: &ParamSet, grads: &mut Gradients) -> Vec<Array2<f64>> {
        self.vars
            .iter()
            .zip(params.values.iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Array2::zeros(p.dim())))
            .collect()
    }
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Self {
            weight: ps.add(format!("{name}.weight"), normal_matrix(rng, input, output, std)),
            bias: ps.add(format!("{name}.bias"), Array2::zeros((1, output))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, bound.var(self.weight));
        tape.add_row(y, bound.var(self.bias))
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, ps: &mut ParamSet) {
        ps.get_mut(self.weight).fill(0.0);
        ps.get_mut(self.bias).fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        Self {
            gain: ps.add(format!("{name}.gain"), Array2::ones((1, width))),
            bias: ps.add(format!("{name}.bias"), Array2::zeros((1, width))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let n = tape.normalize_rows(x);
        let n = tape.mul_row(n, bound.var(self.gain));
        tape.add_row(n, bound.var(self.bias))
    }
}

/// Pre-norm transformer encoder layer: self-attention and a GELU MLP, each
/// wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

/// Hidden width multiplier of the feed-forward block.
pub const MLP_RATIO: usize = 2;

impl EncoderLayer {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "model width {dim} not divisible by {heads} heads");
        let hidden = dim * MLP_RATIO;
        Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim),
            query: Linear::new(ps, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(ps, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(ps, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim),
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, seq_len: usize) -> Var {
        let h = self.norm1.forward(tape, bound, x);
        let q = self.query.forward(tape, bound, h);
        let k = self.key.forward(tape, bound, h);
        let v = self.value.forward(tape, bound, h);
        let a = tape.attention(q, k, v, self.heads, seq_len);
        let a = self.out.forward(tape, bound, a);
        let x = tape.add(x, a);
        let h = self.norm2.forward(tape, bound, x);
        let h = self.fc1.forward(tape, bound, h);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, bound, h);
        tape.add(x, h)
    }
}

/// A stack of [`EncoderLayer`]s followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(ps, &format!("{name}.layer{i}"), dim, heads, rng))
            .collect();
        Self {
            layers,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Encodes `batch` sequences of `seq_len` tokens stacked row-wise.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var, seq_len: usize) -> Var {
        for layer in &self.layers {
            x = layer.forward(tape, bound, x, seq_len);
        }
        self.norm.forward(tape, bound, x)
    }
}

/// Mini-batch gradient descent with heavy-ball momentum and global-norm
/// gradient clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    clip: Option<f64>,
    velocity: Vec<Vec<Array2<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip: Option<f64>, params: &[&ParamSet]) -> Self {
        let velocity = params
            .iter()
            .map(|ps| ps.values.iter().map(|v| Array2::zeros(v.dim())).collect())
            .collect();
        Self {
            lr,
            momentum,
            clip,
            velocity,
        }
    }

    /// Applies one update. `grads[i]` holds the gradients for `params[i]`.
    pub fn step(&mut self, params: &mut [&mut ParamSet], grads: &[Vec<Array2<f64>>]) {
        assert_eq!(params.len(), self.velocity.len());
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let factor = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for ((ps, gs), vs) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, g), v) in ps.values.iter_mut().zip(gs).zip(vs.iter_mut()) {
                *v *= self.momentum;
                v.scaled_add(factor, g);
                p.scaled_add(-self.lr, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transformer_output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let enc = TransformerEncoder::new(&mut ps, "enc", 2, 8, 2, &mut rng);
        let x = normal_matrix(&mut rng, 6, 8, 1.0);
        let run = || {
            let mut t = Tape::new();
            let b = ps.bind(&mut t);
            let xv = t.leaf(x.clone());
            let y = enc.forward(&mut t, &b, xv, 3);
            t.value(y).clone()
        };
        let y = run();
        assert_eq!(y.dim(), (6, 8));
        assert_eq!(y, run());
    }

    #[test]
    fn sequences_in_a_batch_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let enc = TransformerEncoder::new(&mut ps, "enc", 1, 4, 2, &mut rng);
        let mut x = normal_matrix(&mut rng, 4, 4, 1.0);
        let run = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let b = ps.bind(&mut t);
            let xv = t.leaf(x.clone());
            let y = enc.forward(&mut t, &b, xv, 2);
            t.value(y).clone()
        };
        let before = run(&x);
        x[[3, 1]] += 5.0;
        let after = run(&x);
        assert_eq!(before.row(0), after.row(0));
        assert_eq!(before.row(1), after.row(1));
        assert_ne!(before.row(2), after.row(2));
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Array2::from_elem((1, 1), 3.0));
        let mut opt = Sgd::new(0.1, 0.9, None, &[&ps]);
        for _ in 0..200 {
            let g = ps.get(id) * 2.0;
            opt.step(&mut [&mut ps], &[vec![g]]);
        }
        assert!(ps.get(id)[[0, 0]].abs() < 1e-3);
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Array2::zeros((1, 2)));
        let mut opt = Sgd::new(1.0, 0.0, Some(1.0), &[&ps]);
        opt.step(&mut [&mut ps], &[vec![ndarray::array![[30.0, 40.0]]]]);
        let p = ps.get(id);
        assert!((p[[0, 0]] + 0.6).abs() < 1e-12 && (p[[0, 1]] + 0.8).abs() < 1e-12);
    }

    #[test]
    fn rounding_is_idempotent() {
        let mut ps = ParamSet::new();
        ps.add("x", ndarray::array![[0.1, 1.0 / 3.0]]);
        ps.round_to_f32();
        let once = ps.clone();
        ps.round_to_f32();
        assert_eq!(once, ps);
    }
}
