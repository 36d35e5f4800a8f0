//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value on the tape is a 2-D array. Scalars are `1 x 1` arrays. The
//! tape is rebuilt for each forward pass; parameters enter as leaves and their
//! gradients are read back from [`Gradients`] after [`Tape::backward`].
//!
//! The op set is exactly what the encoder and recognizer networks need:
//! affine maps, pointwise nonlinearities, row softmax, layer normalization,
//! row gathering for sequence assembly, a fused multi-head self-attention
//! core, and scalar loss nodes whose local gradient is supplied by the
//! caller.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Normalize { x: Var, inv_std: Vec<f64> },
    GroupMean(Var, usize),
    RepeatRows(Var, usize),
    Gather(Vec<(Var, usize)>),
    ConcatCols(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<Array2<f64>>,
    },
    Scalar { input: Var, grad: Array2<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of every row.
pub fn softmax_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub fn sigmoid_array(x: &ArrayView2<f64>) -> Array2<f64> {
    x.mapv(sigmoid)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Multiplies every row of an `m x n` matrix elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(&self.value(a).view());
        self.push(value, Op::Softmax(a))
    }

    /// Standardizes every row to zero mean and unit variance.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let cols = input.ncols() as f64;
        let mut out = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::Normalize { x, inv_std })
    }

    /// Mean over consecutive groups of `group` rows: `(b*group) x n -> b x n`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let input = self.value(x);
        assert!(group > 0 && input.nrows().is_multiple_of(group), "group_mean: bad group size");
        let b = input.nrows() / group;
        let mut out = Array2::zeros((b, input.ncols()));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let block = input.slice(s![i * group..(i + 1) * group, ..]);
            row.assign(&block.mean_axis(Axis(0)).expect("nonempty group"));
        }
        self.push(out, Op::GroupMean(x, group))
    }

    /// Repeats each row `times` times consecutively: `b x n -> (b*times) x n`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let input = self.value(x);
        let mut out = Array2::zeros((input.nrows() * times, input.ncols()));
        for (i, row) in input.rows().into_iter().enumerate() {
            for t in 0..times {
                out.row_mut(i * times + t).assign(&row);
            }
        }
        self.push(out, Op::RepeatRows(x, times))
    }

    /// Builds a matrix whose `i`-th row is row `rows[i].1` of `rows[i].0`.
    pub fn gather(&mut self, rows: Vec<(Var, usize)>) -> Var {
        assert!(!rows.is_empty(), "gather: no rows");
        let cols = self.value(rows[0].0).ncols();
        let mut out = Array2::zeros((rows.len(), cols));
        for (i, &(src, r)) in rows.iter().enumerate() {
            let source = self.value(src);
            assert_eq!(source.ncols(), cols, "gather: column mismatch");
            out.row_mut(i).assign(&source.row(r));
        }
        self.push(out, Op::Gather(rows))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), vb.nrows(), "concat_cols: row mismatch");
        let value = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).expect("same rows");
        self.push(value, Op::ConcatCols(a, b))
    }

    /// Scaled dot-product self-attention over a batch of equal-length
    /// sequences stacked row-wise. `q`, `k`, `v` are `(batch*seq_len) x d`
    /// with `d` divisible by `heads`; the output has the same shape and holds
    /// the concatenated per-head outputs (before the output projection).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        assert!(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
        assert!(seq_len > 0 && rows % seq_len == 0, "attention: ragged batch");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, d));
        let mut probs = Vec::with_capacity(rows / seq_len * heads);
        for b in 0..rows / seq_len {
            let r = b * seq_len..(b + 1) * seq_len;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![r.clone(), c.clone()]);
                let kb = kv.slice(s![r.clone(), c.clone()]);
                let vb = vv.slice(s![r.clone(), c.clone()]);
                let scores = qb.dot(&kb.t()) * scale;
                let a = softmax_rows(&scores.view());
                out.slice_mut(s![r.clone(), c]).assign(&a.dot(&vb));
                probs.push(a);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
        )
    }

    /// Records a scalar computed from `input` together with its gradient
    /// with respect to `input`.
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(grad.dim(), self.value(input).dim(), "scalar_fn: gradient shape");
        self.push(Array2::from_elem((1, 1), value), Op::Scalar { input, grad })
    }

    /// `sum_i w_i * x_i` over `1 x 1` nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum::<f64>();
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSum(terms))
    }

    /// Back-propagates from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward: output must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, drow);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MulRow(a, row) => {
                    let da = &g * self.value(*row);
                    let drow = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *row, drow);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g * *c);
                }
                Op::Gelu(a) => {
                    let mut da = g;
                    Zip::from(&mut da)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let mut da = g;
                    Zip::from(&mut da)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut da = &g * y;
                    for (mut row, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|d, &yv| *d -= yv * dot);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Normalize { x, inv_std } => {
                    let xhat = &node.value;
                    let cols = xhat.ncols() as f64;
                    let mut dx = g;
                    for ((mut row, xrow), &inv) in
                        dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let mean_g = row.sum() / cols;
                        let mean_gx = row.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        Zip::from(&mut row)
                            .and(&xrow)
                            .for_each(|d, &xh| *d = inv * (*d - mean_g - xh * mean_gx));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GroupMean(x, group) => {
                    let input = self.value(*x);
                    let mut dx = Array2::zeros(input.dim());
                    let inv = 1.0 / *group as f64;
                    for (i, row) in g.rows().into_iter().enumerate() {
                        for t in 0..*group {
                            dx.row_mut(i * group + t).scaled_add(inv, &row);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::RepeatRows(x, times) => {
                    let input = self.value(*x);
                    let mut dx = Array2::zeros(input.dim());
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        for t in 0..*times {
                            row += &g.row(i * times + t);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather(rows) => {
                    for (i, &(src, r)) in rows.iter().enumerate() {
                        let entry = grads[src.0]
                            .get_or_insert_with(|| Array2::zeros(self.value(src).dim()));
                        let mut target = entry.row_mut(r);
                        target += &g.row(i);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let na = self.value(*a).ncols();
                    accumulate(&mut grads, *a, g.slice(s![.., ..na]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![.., na..]).to_owned());
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    seq_len,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, d) = qv.dim();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros((rows, d));
                    let mut dk = Array2::zeros((rows, d));
                    let mut dv = Array2::zeros((rows, d));
                    let mut p = probs.iter();
                    for b in 0..rows / seq_len {
                        let r = b * seq_len..(b + 1) * seq_len;
                        for h in 0..*heads {
                            let c = h * dh..(h + 1) * dh;
                            let a = p.next().expect("cached attention weights");
                            let go = g.slice(s![r.clone(), c.clone()]);
                            let qb = qv.slice(s![r.clone(), c.clone()]);
                            let kb = kv.slice(s![r.clone(), c.clone()]);
                            let vb = vv.slice(s![r.clone(), c.clone()]);
                            let da = go.dot(&vb.t());
                            dv.slice_mut(s![r.clone(), c.clone()]).assign(&a.t().dot(&go));
                            let mut ds = &da * a;
                            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                                let dot = row.sum();
                                Zip::from(&mut row).and(&arow).for_each(|x, &av| *x -= av * dot);
                            }
                            ds *= scale;
                            dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kb));
                            dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qb));
                        }
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Scalar { input, grad } => {
                    let upstream = g[[0, 0]];
                    accumulate(&mut grads, *input, grad * upstream);
                }
                Op::WeightedSum(terms) => {
                    let upstream = g[[0, 0]];
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Array2::from_elem((1, 1), upstream * w));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(w * f(x)))/dx against central differences.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = build(&mut t, xv);
            random(&mut rng, t.value(y).nrows(), t.value(y).ncols())
        };
        let eval = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = build(&mut t, xv);
            (t.value(y) * &probe).sum()
        };
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = build(&mut t, xv);
        let w = t.leaf(probe.clone());
        let prod = t.mul(y, w);
        let ones_r = t.leaf(Array2::ones((1, t.value(prod).nrows())));
        let ones_c = t.leaf(Array2::ones((t.value(prod).ncols(), 1)));
        let left = t.matmul(ones_r, prod);
        let total = t.matmul(left, ones_c);
        let grads = t.backward(total);
        let analytic = grads.get(xv).expect("gradient reaches input");
        let h = 1e-5;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = x.clone();
            plus[[r, c]] += h;
            let mut minus = x.clone();
            minus[[r, c]] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[[r, c]];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!((a - numeric).abs() / denom < 1e-5, "entry {idx}: {a} vs {numeric}");
        }
    }

    #[test]
    fn pointwise_and_row_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 4, 6);
        check_unary(|t, x| t.gelu(x), x.clone());
        check_unary(|t, x| t.sigmoid(x), x.clone());
        check_unary(|t, x| t.softmax(x), x.clone());
        check_unary(|t, x| t.normalize_rows(x), x.clone());
        check_unary(|t, x| t.group_mean(x, 2), x.clone());
        check_unary(|t, x| t.repeat_rows(x, 3), x.clone());
        check_unary(|t, x| t.gather(vec![(x, 3), (x, 0), (x, 3)]), x.clone());
        check_unary(
            |t, x| {
                let y = t.scale(x, 0.5);
                t.concat_cols(x, y)
            },
            x,
        );
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, 5, 3);
        let row = random(&mut rng, 1, 3);
        let other = random(&mut rng, 4, 3);
        let x = random(&mut rng, 4, 5);
        check_unary(
            |t, x| {
                let wv = t.leaf(w.clone());
                let rv = t.leaf(row.clone());
                let y = t.matmul(x, wv);
                let y = t.add_row(y, rv);
                let y = t.mul_row(y, rv);
                let o = t.leaf(other.clone());
                let y = t.mul(y, o);
                t.add(y, o)
            },
            x.clone(),
        );
        // Gradient with respect to the broadcast row.
        let x2 = random(&mut rng, 1, 3);
        check_unary(
            |t, r| {
                let o = t.leaf(other.clone());
                let y = t.add_row(o, r);
                t.mul_row(y, r)
            },
            x2,
        );
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, v) = (random(&mut rng, 6, 4), random(&mut rng, 6, 4));
        let q = random(&mut rng, 6, 4);
        check_unary(
            |t, qv| {
                let kv = t.leaf(k.clone());
                let vv = t.leaf(v.clone());
                t.attention(qv, kv, vv, 2, 3)
            },
            q.clone(),
        );
        check_unary(
            |t, kv| {
                let qv = t.leaf(q.clone());
                let vv = t.leaf(v.clone());
                t.attention(qv, kv, vv, 2, 3)
            },
            k.clone(),
        );
        check_unary(
            |t, vv| {
                let qv = t.leaf(q.clone());
                let kv = t.leaf(k.clone());
                t.attention(qv, kv, vv, 2, 3)
            },
            v.clone(),
        );
        // Self-attention with a shared input.
        check_unary(|t, x| t.attention(x, x, x, 2, 3), q);
    }

    #[test]
    fn attention_rows_are_convex_combinations_of_values() {
        let mut t = Tape::new();
        let q = t.leaf(array![[1.0, 0.0], [0.0, 1.0]]);
        let v = t.leaf(array![[2.0, 2.0], [4.0, 4.0]]);
        let out = t.attention(q, q, v, 1, 2);
        for x in t.value(out).iter() {
            assert!((2.0..=4.0).contains(x));
        }
    }

    #[test]
    fn scalar_nodes_scale_their_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let s = t.scalar_fn(x, 3.0, array![[0.5, -1.0]]);
        let total = t.weighted_sum(vec![(s, 2.0), (s, 1.0)]);
        assert_eq!(t.scalar(total), 9.0);
        let g = t.backward(total);
        assert_eq!(g.get(x).unwrap(), &array![[1.5, -3.0]]);
    }

    #[test]
    fn unused_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0]]);
        let unused = t.leaf(array![[1.0]]);
        let y = t.scale(x, 2.0);
        let g = t.backward(y);
        assert!(g.get(unused).is_none());
        assert_eq!(g.get(x).unwrap()[[0, 0]], 2.0);
    }
}
