//! Training objectives.
//!
//! Every loss takes probabilities (softmax or per-class sigmoid outputs), and
//! each has a companion `*_grad` returning the derivative with respect to
//! those probabilities. [`rows_node`] turns any of them into a tape node so
//! the chain rule through the model is handled by the tape.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::{Tape, Var};
use crate::synthgen::Label;

/// Lower bound applied to probabilities and their complements inside logs.
pub const EPS: f64 = 1e-12;

/// Link used by the base classification loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    /// `-log p_y` on softmax probabilities.
    #[default]
    SoftmaxCe,
    /// Binary cross-entropy per class, averaged over classes.
    SigmoidCe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub base: BaseLoss,
    pub beta: f64,
    pub eta: f64,
    pub r: usize,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            base: BaseLoss::SoftmaxCe,
            beta: 0.999,
            eta: 0.5,
            r: 3,
            gamma: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..1.0).contains(&self.beta), "beta must lie in [0, 1), got {}", self.beta);
        ensure!(self.eta >= 0.0, "eta must be non-negative, got {}", self.eta);
        ensure!(self.r >= 1, "r must be at least 1");
        ensure!(self.gamma > 0.0 && self.gamma <= 1.0, "gamma must lie in (0, 1], got {}", self.gamma);
        Ok(())
    }
}

fn ln_clamped(x: f64) -> f64 {
    x.max(EPS).ln()
}

fn d_ln_clamped(x: f64) -> f64 {
    if x > EPS {
        1.0 / x
    } else {
        0.0
    }
}

fn check_label(p: &[f64], y: &Label, base: BaseLoss) -> Result<()> {
    match (y, base) {
        (Label::Single(c), BaseLoss::SoftmaxCe) => {
            ensure!(*c < p.len(), "label {c} out of range for {} classes", p.len())
        }
        (Label::Multi(v), BaseLoss::SigmoidCe) => ensure!(
            v.len() == p.len(),
            "multi-label vector has {} entries but there are {} classes",
            v.len(),
            p.len()
        ),
        (Label::Single(c), BaseLoss::SigmoidCe) => {
            ensure!(*c < p.len(), "label {c} out of range for {} classes", p.len())
        }
        (Label::Multi(_), BaseLoss::SoftmaxCe) => {
            return Err(crate::Error::Validation(
                "softmax cross-entropy needs a single-label target".into(),
            ))
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of `y` under `p`.
pub fn base_loss(p: &[f64], y: &Label, base: BaseLoss) -> Result<f64> {
    check_label(p, y, base)?;
    Ok(match base {
        BaseLoss::SoftmaxCe => -ln_clamped(p[y.single().expect("checked")]),
        BaseLoss::SigmoidCe => {
            let k = p.len() as f64;
            -p.iter()
                .enumerate()
                .map(|(c, &pc)| if y.contains(c) { ln_clamped(pc) } else { ln_clamped(1.0 - pc) })
                .sum::<f64>()
                / k
        }
    })
}

pub fn base_loss_grad(p: &[f64], y: &Label, base: BaseLoss) -> Result<Vec<f64>> {
    check_label(p, y, base)?;
    let mut g = vec![0.0; p.len()];
    match base {
        BaseLoss::SoftmaxCe => {
            let c = y.single().expect("checked");
            g[c] = -d_ln_clamped(p[c]);
        }
        BaseLoss::SigmoidCe => {
            let k = p.len() as f64;
            for (c, (gc, &pc)) in g.iter_mut().zip(p).enumerate() {
                *gc = if y.contains(c) {
                    -d_ln_clamped(pc) / k
                } else {
                    d_ln_clamped(1.0 - pc) / k
                };
            }
        }
    }
    Ok(g)
}

fn check_absent(p: &[f64], q: &[usize]) -> Result<()> {
    for &c in q {
        ensure!(c < p.len(), "absent class {c} out of range for {} classes", p.len());
    }
    Ok(())
}

/// `-sum_{q in Q} log(1 - p_q)`.
pub fn absent_loss(p: &[f64], q: &[usize]) -> Result<f64> {
    check_absent(p, q)?;
    Ok(-q.iter().map(|&c| ln_clamped(1.0 - p[c])).sum::<f64>())
}

pub fn absent_loss_grad(p: &[f64], q: &[usize]) -> Result<Vec<f64>> {
    check_absent(p, q)?;
    let mut g = vec![0.0; p.len()];
    for &c in q {
        g[c] += d_ln_clamped(1.0 - p[c]);
    }
    Ok(g)
}

/// Class-balanced weight `(1 - beta) / (1 - beta^n)`.
pub fn cb_weight(n: u64, beta: f64) -> Result<f64> {
    ensure!(n >= 1, "cb_weight needs n >= 1, got {n}");
    ensure!((0.0..1.0).contains(&beta), "beta must lie in [0, 1), got {beta}");
    if n == 1 || beta == 0.0 {
        return Ok(1.0);
    }
    // 1 - beta^n computed without cancellation.
    let denom = -(n as f64 * beta.ln()).exp_m1();
    Ok((1.0 - beta) / denom)
}

/// Product of the class-level and cluster-level weights.
pub fn audio_balanced_weight(n_y: u64, n_yj: u64, beta: f64) -> Result<f64> {
    ensure!(n_yj >= 1, "cluster count must be at least 1");
    ensure!(n_y >= n_yj, "class count {n_y} is smaller than cluster count {n_yj}");
    Ok(cb_weight(n_y, beta)? * cb_weight(n_yj, beta)?)
}

pub fn audio_balanced_loss(p: &[f64], y: &Label, n_y: u64, n_yj: u64, cfg: &LossConfig) -> Result<f64> {
    Ok(audio_balanced_weight(n_y, n_yj, cfg.beta)? * base_loss(p, y, cfg.base)?)
}

pub fn audio_balanced_loss_grad(p: &[f64], y: &Label, n_y: u64, n_yj: u64, cfg: &LossConfig) -> Result<Vec<f64>> {
    let w = audio_balanced_weight(n_y, n_yj, cfg.beta)?;
    Ok(base_loss_grad(p, y, cfg.base)?.into_iter().map(|g| w * g).collect())
}

/// One unlabeled target video in an encoder batch.
#[derive(Clone, Copy, Debug)]
pub struct TargetTerm<'a> {
    pub probs: &'a [f64],
    pub absent: &'a [usize],
}

/// One labeled source video in an encoder batch, with its loss weight.
#[derive(Clone, Copy, Debug)]
pub struct SourceTerm<'a> {
    pub probs: &'a [f64],
    pub label: &'a Label,
    pub weight: f64,
}

impl<'a> SourceTerm<'a> {
    /// Weighted by class size `n_y` and interaction-cluster size `n_yj`.
    pub fn balanced(probs: &'a [f64], label: &'a Label, n_y: u64, n_yj: u64, beta: f64) -> Result<Self> {
        Ok(Self {
            probs,
            label,
            weight: audio_balanced_weight(n_y, n_yj, beta)?,
        })
    }
}

/// Mean absent loss over the target batch plus mean weighted base loss over
/// the source batch. An empty batch contributes 0.
pub fn encoder_loss(target: &[TargetTerm], source: &[SourceTerm], base: BaseLoss) -> Result<f64> {
    let mut total = 0.0;
    if !target.is_empty() {
        let mut s = 0.0;
        for t in target {
            s += absent_loss(t.probs, t.absent)?;
        }
        total += s / target.len() as f64;
    }
    if !source.is_empty() {
        let mut s = 0.0;
        for t in source {
            s += t.weight * base_loss(t.probs, t.label, base)?;
        }
        total += s / source.len() as f64;
    }
    Ok(total)
}

/// `L(p*, y) + eta * (L(h, y) + L(h', y))`.
pub fn recognizer_loss(p_star: &[f64], h: &[f64], h_prime: &[f64], y: &Label, cfg: &LossConfig) -> Result<f64> {
    ensure!(
        h.len() == p_star.len() && h_prime.len() == p_star.len(),
        "p*, h and h' must have the same length ({}, {}, {})",
        p_star.len(),
        h.len(),
        h_prime.len()
    );
    let main = base_loss(p_star, y, cfg.base)?;
    if cfg.eta == 0.0 {
        return Ok(main);
    }
    Ok(main + cfg.eta * (base_loss(h, y, cfg.base)? + base_loss(h_prime, y, cfg.base)?))
}

/// Gradients with respect to `(p*, h, h')`.
pub fn recognizer_loss_grad(
    p_star: &[f64],
    h: &[f64],
    h_prime: &[f64],
    y: &Label,
    cfg: &LossConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    recognizer_loss(p_star, h, h_prime, y, cfg)?;
    let scale = |v: Vec<f64>| v.into_iter().map(|g| cfg.eta * g).collect::<Vec<_>>();
    Ok((
        base_loss_grad(p_star, y, cfg.base)?,
        scale(base_loss_grad(h, y, cfg.base)?),
        scale(base_loss_grad(h_prime, y, cfg.base)?),
    ))
}

/// Sums a per-row loss over the rows of `probs` into a scalar tape node.
///
/// `f(i, row)` returns the loss of row `i` and its gradient with respect to
/// that row; rows may be skipped by returning `None`.
pub fn rows_node(
    tape: &mut Tape,
    probs: Var,
    mut f: impl FnMut(usize, ArrayView1<f64>) -> Result<Option<(f64, Vec<f64>)>>,
) -> Result<Var> {
    let p = tape.value(probs);
    let mut grad = Array2::zeros(p.dim());
    let mut value = 0.0;
    for (i, row) in p.rows().into_iter().enumerate() {
        if let Some((l, g)) = f(i, row)? {
            value += l;
            grad.row_mut(i).iter_mut().zip(g).for_each(|(d, s)| *d = s);
        }
    }
    Ok(tape.scalar_fn(probs, value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::softmax_rows;
    use ndarray::array;

    #[test]
    fn closed_forms() {
        assert_eq!(cb_weight(1, 0.999).unwrap(), 1.0);
        assert_eq!(cb_weight(1, 0.5).unwrap(), 1.0);
        for n in [1, 10, 1000] {
            assert_eq!(cb_weight(n, 0.0).unwrap(), 1.0);
        }
        assert!((absent_loss(&[0.5, 0.2], &[0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(absent_loss(&[0.5, 0.2], &[]).unwrap(), 0.0);
        let uniform = [0.125; 8];
        assert!((base_loss(&uniform, &Label::Single(3), BaseLoss::SoftmaxCe).unwrap() - 8f64.ln()).abs() < 1e-12);
        assert_eq!(base_loss(&[0.0, 1.0], &Label::Single(1), BaseLoss::SoftmaxCe).unwrap(), 0.0);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(cb_weight(0, 0.9).is_err());
        assert!(cb_weight(3, 1.0).is_err());
        assert!(absent_loss(&[0.5], &[1]).is_err());
        assert!(base_loss(&[0.5, 0.5], &Label::Single(2), BaseLoss::SoftmaxCe).is_err());
        assert!(audio_balanced_loss(&[0.5, 0.5], &Label::Single(0), 2, 3, &LossConfig::default()).is_err());
        let cfg = LossConfig::default();
        assert!(recognizer_loss(&[0.5, 0.5], &[1.0], &[0.5, 0.5], &Label::Single(0), &cfg).is_err());
        assert!(LossConfig { beta: 1.0, ..cfg.clone() }.validate().is_err());
        assert!(LossConfig { eta: -0.1, ..cfg }.validate().is_err());
    }

    #[test]
    fn clamping_keeps_losses_finite() {
        assert!(absent_loss(&[1.0], &[0]).unwrap().is_finite());
        assert!(base_loss(&[0.0, 1.0], &Label::Single(0), BaseLoss::SoftmaxCe).unwrap().is_finite());
        let g = absent_loss_grad(&[1.0], &[0]).unwrap();
        assert!(g[0].is_finite());
    }

    #[test]
    fn cb_weight_is_monotone() {
        for beta in [0.5, 0.9, 0.99, 0.999, 0.9999] {
            let mut prev = f64::INFINITY;
            for n in 1..2000 {
                let w = cb_weight(n, beta).unwrap();
                assert!(w <= prev && w >= 1.0 - beta);
                prev = w;
            }
        }
    }

    #[test]
    fn sigmoid_ce_averages_over_classes() {
        let p = [0.9, 0.2];
        let y = Label::Multi(vec![true, false]);
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((base_loss(&p, &y, BaseLoss::SigmoidCe).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn recognizer_loss_collapses() {
        let cfg = LossConfig { eta: 0.0, ..LossConfig::default() };
        let y = Label::Single(1);
        let p = [0.3, 0.7];
        assert_eq!(
            recognizer_loss(&p, &[0.9, 0.1], &[0.9, 0.1], &y, &cfg).unwrap(),
            base_loss(&p, &y, cfg.base).unwrap()
        );
        let one = [0.0, 1.0];
        assert_eq!(recognizer_loss(&one, &one, &one, &y, &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn rows_node_backpropagates_through_softmax() {
        let logits = array![[0.2, -0.4, 1.0], [0.0, 0.3, -0.2]];
        let labels = [Label::Single(2), Label::Single(0)];
        let mut tape = Tape::new();
        let x = tape.leaf(logits.clone());
        let p = tape.softmax(x);
        let loss = rows_node(&mut tape, p, |i, row| {
            let row = row.to_vec();
            Ok(Some((
                base_loss(&row, &labels[i], BaseLoss::SoftmaxCe)?,
                base_loss_grad(&row, &labels[i], BaseLoss::SoftmaxCe)?,
            )))
        })
        .unwrap();
        let grads = tape.backward(loss);
        let probs = softmax_rows(&logits.view());
        let mut expected = probs.clone();
        expected[[0, 2]] -= 1.0;
        expected[[1, 0]] -= 1.0;
        let got = grads.get(x).unwrap();
        assert!((got - &expected).iter().all(|d| d.abs() < 1e-12));
    }
}
