//! Central finite differences for checking analytic gradients, plus ready
//! checks of the two trainable forward passes on tiny random networks.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{AttentionModule, EncoderDims, Stage1Model, VisualEncoder};
use crate::graph::{softmax_rows, Tape};
use crate::losses::{absent_loss, absent_loss_grad, base_loss, base_loss_grad, rows_node, BaseLoss};
use crate::nn::{normal_matrix, ParamSet};
use crate::recognizer::{ClassTokenSource, Recognizer, RecognizerDims, RecognizerInputs, SequenceMode};
use crate::synthgen::{Domain, Label};

/// Step used by the gradient checks.
pub const STEP: f64 = 1e-5;

/// Central-difference derivative of `f` with respect to each listed
/// coordinate of `x`; `x` is restored afterwards.
pub fn central_difference(x: &mut [f64], coords: &[usize], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(x);
            x[i] = orig - step;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; 0 when both are below
/// `floor` in norm.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < floor {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Relative error between the analytic parameter gradient of a loss and
/// central differences, over `coords` randomly chosen scalars (all of them
/// when `coords` is `None`).
///
/// `loss(sets, with_grad)` returns the loss value and, when asked, one
/// gradient list per parameter set.
pub fn parameter_error(
    sets: &mut [ParamSet],
    coords: Option<usize>,
    rng: &mut impl Rng,
    loss: impl Fn(&[ParamSet], bool) -> (f64, Vec<Vec<Array2<f64>>>),
) -> f64 {
    let (_, grads) = loss(sets, true);
    let analytic: Vec<f64> = grads.iter().flatten().flat_map(|g| g.iter().copied()).collect();
    let total = analytic.len();
    let chosen: Vec<usize> = match coords {
        Some(c) if c < total => {
            let mut v = sample(rng, total, c).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    };
    let mut flat: Vec<f64> = sets.iter().flat_map(|s| s.iter().flat_map(|(_, v)| v.iter().copied()).collect::<Vec<_>>()).collect();
    let shapes: Vec<Vec<(usize, usize)>> = sets
        .iter()
        .map(|s| s.iter().map(|(_, v)| v.dim()).collect())
        .collect();
    let mut scratch: Vec<ParamSet> = sets.to_vec();
    let numeric = central_difference(&mut flat, &chosen, STEP, |x| {
        let mut offset = 0;
        for (set, dims) in scratch.iter_mut().zip(&shapes) {
            for (value, &(r, c)) in set.values_mut().zip(dims) {
                let n = r * c;
                value.iter_mut().zip(&x[offset..offset + n]).for_each(|(d, s)| *d = *s);
                offset += n;
            }
        }
        loss(&scratch, false).0
    });
    let picked: Vec<f64> = chosen.iter().map(|&i| analytic[i]).collect();
    relative_error(&picked, &numeric, 1e-10)
}

fn tiny_encoder_dims() -> EncoderDims {
    EncoderDims {
        num_classes: 3,
        clips: 2,
        visual_dim: 5,
        audio_dim: 4,
        visual_hidden: 8,
        audio_hidden: 8,
        att_dim: 8,
        att_heads: 2,
        att_depth: 1,
    }
}

/// Stage-one loss (weighted source cross-entropy plus target absent loss)
/// through the visual encoder and attention module of a tiny random model.
pub fn encoder_forward_error(seed: u64, coords: Option<usize>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = tiny_encoder_dims();
    let (ns, nt, clips, k) = (2, 2, dims.clips, dims.num_classes);
    let visual = VisualEncoder::new(&dims, BaseLoss::SoftmaxCe, &mut rng);
    let attention = AttentionModule::new(&dims, &mut rng);
    let x = normal_matrix(&mut rng, (ns + nt) * clips, dims.visual_dim, 1.0);
    let a = normal_matrix(&mut rng, (ns + nt) * clips, dims.audio_hidden, 1.0);
    let labels: Vec<Label> = (0..ns).map(|_| Label::Single(rng.random_range(0..k))).collect();
    let weights: Vec<f64> = (0..ns).map(|_| rng.random_range(0.5..2.0)).collect();
    let absent: Vec<Vec<usize>> = (0..nt).map(|_| vec![rng.random_range(0..k)]).collect();
    let template = Stage1Model {
        visual,
        attention: Some(attention),
        clips,
    };
    let mut sets = vec![
        template.visual.params.clone(),
        template.attention.as_ref().expect("attention").params.clone(),
    ];
    parameter_error(&mut sets, coords, &mut rng, |sets, with_grad| {
        let mut model = template.clone();
        model.visual.params = sets[0].clone();
        model.attention.as_mut().expect("attention").params = sets[1].clone();
        let mut tape = Tape::new();
        let vb = model.visual.params.bind(&mut tape);
        let ab = model.attention.as_ref().expect("attention").params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let av = tape.leaf(a.clone());
        let out = model.forward(&mut tape, &vb, Some(&ab), xv, av);
        let loss = rows_node(&mut tape, out.probs, |i, row| {
            let p = row.to_vec();
            if i < ns {
                let s = weights[i] / ns as f64;
                let g = base_loss_grad(&p, &labels[i], BaseLoss::SoftmaxCe)?;
                Ok(Some((s * base_loss(&p, &labels[i], BaseLoss::SoftmaxCe)?, g.iter().map(|g| s * g).collect())))
            } else {
                let q = &absent[i - ns];
                let s = 1.0 / nt as f64;
                let g = absent_loss_grad(&p, q)?;
                Ok(Some((s * absent_loss(&p, q)?, g.iter().map(|g| s * g).collect())))
            }
        })
        .expect("valid rows");
        let value = tape.scalar(loss);
        if !with_grad {
            return (value, Vec::new());
        }
        let mut grads = tape.backward(loss);
        let g = vec![
            vb.gradients(&model.visual.params, &mut grads),
            ab.gradients(&model.attention.as_ref().expect("attention").params, &mut grads),
        ];
        (value, g)
    })
}

/// Recognizer loss (class-token prediction plus both sound-vector mixture
/// terms, eta 0.5) through a tiny random recognizer with the audio token.
pub fn recognizer_forward_error(seed: u64, coords: Option<usize>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = RecognizerDims {
        num_classes: 3,
        clips: 2,
        visual_hidden: 8,
        audio_hidden: 8,
        dim: 16,
        heads: 2,
        depth: 1,
    };
    let (b, k, clips) = (3, dims.num_classes, dims.clips);
    let template = Recognizer::new(
        &dims,
        SequenceMode::AudioToken,
        ClassTokenSource::SoundVectors,
        BaseLoss::SoftmaxCe,
        None,
        &mut rng,
    )
    .expect("valid dims");
    let inputs = RecognizerInputs {
        visual_clips: normal_matrix(&mut rng, b * clips, dims.visual_hidden, 1.0),
        audio_clips: normal_matrix(&mut rng, b * clips, dims.audio_hidden, 1.0),
        audio_hidden: None,
        audio_probs: softmax_rows(&normal_matrix(&mut rng, b, k, 1.0).view()),
        domains: vec![Domain::Source, Domain::Target, Domain::Source],
    };
    let labels: Vec<Label> = (0..b).map(|_| Label::Single(rng.random_range(0..k))).collect();
    let eta = 0.5;
    let mut sets = vec![template.params.clone()];
    parameter_error(&mut sets, coords, &mut rng, |sets, with_grad| {
        let mut model = template.clone();
        model.params = sets[0].clone();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &inputs);
        let token = out.token.expect("audio token mode builds a class token");
        let mut term = |var| {
            rows_node(&mut tape, var, |i, row| {
                let p = row.to_vec();
                let g = base_loss_grad(&p, &labels[i], BaseLoss::SoftmaxCe)?;
                Ok(Some((base_loss(&p, &labels[i], BaseLoss::SoftmaxCe)? / b as f64, g.iter().map(|g| g / b as f64).collect())))
            })
            .expect("valid rows")
        };
        let terms = vec![(term(out.probs), 1.0), (term(token.h), eta), (term(token.h_prime), eta)];
        let loss = tape.weighted_sum(terms);
        let value = tape.scalar(loss);
        if !with_grad {
            return (value, Vec::new());
        }
        let mut grads = tape.backward(loss);
        (value, vec![bound.gradients(&model.params, &mut grads)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let mut x = vec![1.0, -2.0];
        let g = central_difference(&mut x, &[0, 1], STEP, |v| v[0].powi(3) + 2.0 * v[1]);
        assert!(relative_error(&g, &[3.0, 2.0], 1e-12) < 1e-9);
        assert_eq!(x, vec![1.0, -2.0]);
    }

    #[test]
    fn tiny_networks_pass() {
        assert!(encoder_forward_error(0, None) < 1e-4);
        assert!(recognizer_forward_error(0, None) < 1e-4);
    }

    #[test]
    fn tiny_vectors_count_as_equal() {
        assert_eq!(relative_error(&[1e-14], &[-1e-14], 1e-10), 0.0);
        assert!(relative_error(&[1.0], &[1.1], 1e-10) > 0.09);
    }
}
