//! Pseudo-labels for unlabeled target videos.
//!
//! Pseudo-absent labels name activities a video almost certainly does *not*
//! contain, read off the lowest class probabilities of a source-trained
//! encoder. Hard pseudo-labels commit to the most likely class instead.
//! All rankings break ties by the smaller index.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::synthgen::Label;

/// Which pretrained encoder produced the probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Audio,
    Visual,
}

/// Single- or multi-label classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Single,
    Multi,
}

/// Pseudo-absent labels for a set of videos.
#[derive(Clone, Debug, PartialEq)]
pub struct AbsentLabels {
    pub provenance: Provenance,
    /// `absent[i][k]` is true when class `k` is asserted absent from video `i`.
    pub mask: Vec<Vec<bool>>,
}

impl AbsentLabels {
    /// Absent class indices of video `i`.
    pub fn set(&self, i: usize) -> Vec<usize> {
        self.mask[i].iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k).collect()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Single-label rule applied to every row of `probs`.
    pub fn single(probs: &Array2<f64>, r: usize, provenance: Provenance) -> Result<Self> {
        let k = probs.ncols();
        let mask = probs
            .rows()
            .into_iter()
            .map(|row| {
                let q = absent_set_single(row.as_slice().expect("standard layout"), r)?;
                let mut m = vec![false; k];
                q.into_iter().for_each(|c| m[c] = true);
                Ok(m)
            })
            .collect::<Result<_>>()?;
        Ok(Self { provenance, mask })
    }

    pub fn multi(probs: &Array2<f64>, alpha: &[f64], gamma: f64, provenance: Provenance) -> Result<Self> {
        Ok(Self {
            provenance,
            mask: absent_mask_multi(probs, alpha, gamma)?,
        })
    }
}

fn ascending_order(values: impl Iterator<Item = f64>) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = values.enumerate().map(|(i, v)| (v, i)).collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.into_iter().map(|(_, i)| i).collect()
}

/// The `r` classes with the lowest probability, in increasing index order.
pub fn absent_set_single(p: &[f64], r: usize) -> Result<Vec<usize>> {
    let k = p.len();
    ensure!(r >= 1 && r < k, "r must satisfy 1 <= r < K (r = {r}, K = {k})");
    ensure!(
        p.iter().all(|v| (0.0..=1.0).contains(v)),
        "probabilities must lie in [0, 1]"
    );
    let mut q = ascending_order(p.iter().copied());
    q.truncate(r);
    q.sort_unstable();
    Ok(q)
}

/// Number of videos marked absent for a class with source prevalence `alpha`.
pub fn absent_count(alpha: f64, gamma: f64, videos: usize) -> usize {
    // The small offset keeps products such as 0.8 * 0.05 * 100 from rounding
    // down across an integer boundary.
    (((1.0 - alpha) * gamma * videos as f64) + 1e-9).floor().max(0.0) as usize
}

/// Multi-label rule: for each class `k`, the `floor((1 - alpha_k) * gamma * M)`
/// videos with the lowest probability of `k` are marked absent.
pub fn absent_mask_multi(probs: &Array2<f64>, alpha: &[f64], gamma: f64) -> Result<Vec<Vec<bool>>> {
    let (m, k) = probs.dim();
    ensure!(alpha.len() == k, "alpha has {} entries but probabilities have {k} classes", alpha.len());
    ensure!(gamma > 0.0 && gamma <= 1.0, "gamma must lie in (0, 1], got {gamma}");
    ensure!(
        alpha.iter().all(|a| (0.0..=1.0).contains(a)),
        "alpha entries must lie in [0, 1]"
    );
    let mut mask = vec![vec![false; k]; m];
    for (c, column) in probs.columns().into_iter().enumerate() {
        let count = absent_count(alpha[c], gamma, m).min(m);
        for i in ascending_order(column.iter().copied()).into_iter().take(count) {
            mask[i][c] = true;
        }
    }
    Ok(mask)
}

/// Argmax with ties resolved to the smaller index; NaN entries are skipped.
pub fn argmax(p: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in p.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Commits to a label: argmax in single-label mode, `p >= threshold` in
/// multi-label mode.
pub fn hard_pseudo(p: &[f64], mode: LabelMode, threshold: f64) -> Result<Label> {
    ensure!(!p.is_empty() && p.iter().any(|v| !v.is_nan()), "probabilities are empty or all NaN");
    match mode {
        LabelMode::Single => Ok(Label::Single(argmax(p).expect("some finite entry"))),
        LabelMode::Multi => {
            ensure!(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0, 1)");
            Ok(Label::Multi(p.iter().map(|&v| v >= threshold).collect()))
        }
    }
}

/// Hard pseudo-labels for every row of `probs`.
pub fn hard_pseudo_rows(probs: &Array2<f64>, mode: LabelMode, threshold: f64) -> Result<Vec<Label>> {
    probs
        .rows()
        .into_iter()
        .map(|row| hard_pseudo(row.as_slice().expect("standard layout"), mode, threshold))
        .collect()
}

/// Fraction of labeled videos that contain each class.
pub fn class_prior(labels: &[&Label], num_classes: usize) -> Result<Vec<f64>> {
    ensure!(!labels.is_empty(), "class prior needs at least one labeled video");
    let mut counts = vec![0usize; num_classes];
    for label in labels {
        for c in label.classes() {
            ensure!(c < num_classes, "label {c} out of range for {num_classes} classes");
            counts[c] += 1;
        }
    }
    let n = labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn lowest_r_with_worked_examples() {
        assert_eq!(absent_set_single(&[0.5, 0.2, 0.15, 0.10, 0.05], 3).unwrap(), vec![2, 3, 4]);
        assert_eq!(absent_set_single(&[0.2; 5], 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn r_out_of_range_is_rejected() {
        assert!(absent_set_single(&[0.5, 0.5], 0).is_err());
        assert!(absent_set_single(&[0.5, 0.5], 2).is_err());
        assert!(absent_set_single(&[1.5, -0.5], 1).is_err());
    }

    #[test]
    fn multi_label_counts_follow_floor_rule() {
        assert_eq!(absent_count(0.2, 0.05, 100), 4);
        assert_eq!(absent_count(1.0, 0.05, 100), 0);
        let probs = Array2::from_shape_fn((100, 2), |(i, c)| ((i * 7 + c * 13) % 100) as f64 / 100.0);
        let mask = absent_mask_multi(&probs, &[0.2, 1.0], 0.05).unwrap();
        assert_eq!(mask.iter().filter(|r| r[0]).count(), 4);
        assert_eq!(mask.iter().filter(|r| r[1]).count(), 0);
    }

    #[test]
    fn multi_label_dimension_mismatch_is_rejected() {
        let probs = array![[0.1, 0.2], [0.3, 0.4]];
        assert!(absent_mask_multi(&probs, &[0.1], 0.5).is_err());
        assert!(absent_mask_multi(&probs, &[0.1, 0.1], 0.0).is_err());
    }

    #[test]
    fn hard_pseudo_examples() {
        assert_eq!(hard_pseudo(&[0.1, 0.7, 0.2], LabelMode::Single, 0.5).unwrap(), Label::Single(1));
        assert_eq!(hard_pseudo(&[0.25; 4], LabelMode::Single, 0.5).unwrap(), Label::Single(0));
        assert_eq!(
            hard_pseudo(&[0.6, 0.4, 0.5], LabelMode::Multi, 0.5).unwrap(),
            Label::Multi(vec![true, false, true])
        );
        assert!(hard_pseudo(&[f64::NAN, f64::NAN], LabelMode::Single, 0.5).is_err());
        assert_eq!(hard_pseudo(&[f64::NAN, 0.1], LabelMode::Single, 0.5).unwrap(), Label::Single(1));
    }

    #[test]
    fn class_prior_counts_videos() {
        let labels: Vec<Label> = (0..10).map(|i| Label::Single(if i < 3 { 0 } else { 1 })).collect();
        let refs: Vec<&Label> = labels.iter().collect();
        let alpha = class_prior(&refs, 3).unwrap();
        assert_eq!(alpha, vec![0.3, 0.7, 0.0]);
        assert!(class_prior(&[], 3).is_err());

        let all = [Label::Multi(vec![true, true]), Label::Multi(vec![true, false])];
        let refs: Vec<&Label> = all.iter().collect();
        assert_eq!(class_prior(&refs, 2).unwrap(), vec![1.0, 0.5]);
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn absent_set_excludes_unique_argmax(p in simplex(7), r in 1usize..7) {
            let q = absent_set_single(&p, r).unwrap();
            prop_assert_eq!(q.len(), r);
            let top = argmax(&p).unwrap();
            let unique = p.iter().filter(|&&v| v == p[top]).count() == 1;
            if unique {
                prop_assert!(!q.contains(&top));
            }
        }

        #[test]
        fn absent_set_is_rank_invariant(p in simplex(6), r in 1usize..6, scale in 0.1f64..10.0) {
            let scaled: Vec<f64> = p.iter().map(|v| v * scale).collect();
            let s: f64 = scaled.iter().sum();
            let renorm: Vec<f64> = scaled.iter().map(|v| v / s).collect();
            prop_assert_eq!(absent_set_single(&p, r).unwrap(), absent_set_single(&renorm, r).unwrap());
        }

        #[test]
        fn mask_column_sums_are_exact(
            seed in 0u64..1000,
            alpha in prop::collection::vec(0.0f64..=1.0, 5),
            gamma in 0.01f64..=1.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let probs = Array2::from_shape_fn((37, 5), |_| rng.random::<f64>());
            let mask = absent_mask_multi(&probs, &alpha, gamma).unwrap();
            for c in 0..5 {
                let sum = mask.iter().filter(|r| r[c]).count();
                prop_assert_eq!(sum, absent_count(alpha[c], gamma, 37));
            }
        }
    }
}
