//! Interaction clusters within each activity class.
//!
//! Videos of one class are grouped by k-means over a per-video feature (by
//! default the pooled audio feature), with the number of clusters picked by
//! an elbow rule. The resulting cluster sizes drive audio-balanced weighting.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::synthgen::{derive_seed, rng_for, Label};

pub const RESTARTS: usize = 10;
pub const MAX_ITERATIONS: usize = 300;
pub const ELBOW_THRESHOLD: f64 = 0.10;
pub const DEFAULT_K_MAX: usize = 12;

/// Result of [`kmeans_fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub sse: f64,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Row order sorted lexicographically, so results do not depend on how the
/// caller ordered the points.
fn canonical_order(x: &Array2<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b))
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

fn distinct_rows(sorted: &Array2<f64>) -> usize {
    if sorted.nrows() == 0 {
        return 0;
    }
    1 + sorted
        .rows()
        .into_iter()
        .zip(sorted.rows().into_iter().skip(1))
        .filter(|(a, b)| a != b)
        .count()
}

fn plus_plus_seeds(x: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    centroids.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centroids.row(c)));
        }
    }
    centroids
}

/// One Lloyd run; returns the fit and the SSE after every iteration.
fn lloyd(x: &Array2<f64>, mut centroids: Array2<f64>) -> (KMeans, Vec<f64>) {
    let k = centroids.nrows();
    let mut assignments = vec![usize::MAX; x.nrows()];
    let mut trace = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (i, r) in x.rows().into_iter().enumerate() {
            let (j, _) = nearest(r, &centroids);
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        trace.push(sse(x, &centroids, &assignments));
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, r) in x.rows().into_iter().enumerate() {
            sums.row_mut(assignments[i]).scaled_add(1.0, &r);
            counts[assignments[i]] += 1;
        }
        // Empty clusters keep their previous centroid.
        for (j, &n) in counts.iter().enumerate() {
            if n > 0 {
                centroids.row_mut(j).assign(&(&sums.row(j) / n as f64));
            }
        }
        trace.push(sse(x, &centroids, &assignments));
    }
    let fit = KMeans {
        sse: sse(x, &centroids, &assignments),
        centroids,
        assignments,
    };
    (fit, trace)
}

fn sse(x: &Array2<f64>, centroids: &Array2<f64>, assignments: &[usize]) -> f64 {
    x.rows()
        .into_iter()
        .zip(assignments)
        .map(|(r, &j)| sq_dist(r, centroids.row(j)))
        .sum()
}

/// Relabels clusters so centroids appear in lexicographic order.
fn canonical_labels(fit: KMeans) -> KMeans {
    let order = canonical_order(&fit.centroids);
    let mut rank = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    KMeans {
        centroids: fit.centroids.select(Axis(0), &order),
        assignments: fit.assignments.iter().map(|&j| rank[j]).collect(),
        sse: fit.sse,
    }
}

/// k-means with k-means++ seeding and [`RESTARTS`] restarts, keeping the
/// lowest SSE (earlier restart on ties).
///
/// When there are fewer than `k` distinct points, every distinct point
/// becomes its own centroid and fewer than `k` centroids are returned.
pub fn kmeans_fit(features: &Array2<f64>, k: usize, seed: u64) -> Result<KMeans> {
    ensure!(features.nrows() > 0, "k-means needs at least one point");
    ensure!(k >= 1, "k must be at least 1");
    ensure!(features.iter().all(|v| v.is_finite()), "k-means features must be finite");
    let order = canonical_order(features);
    let x = features.select(Axis(0), &order);
    let distinct = distinct_rows(&x);

    let best = if distinct <= k {
        let mut keep = vec![0];
        for i in 1..x.nrows() {
            if x.row(i) != x.row(i - 1) {
                keep.push(i);
            }
        }
        let centroids = x.select(Axis(0), &keep);
        lloyd(&x, centroids).0
    } else {
        let mut best: Option<KMeans> = None;
        for restart in 0..RESTARTS {
            let mut rng = rng_for(seed, &[restart as u64]);
            let (fit, _) = lloyd(&x, plus_plus_seeds(&x, k, &mut rng));
            if best.as_ref().is_none_or(|b| fit.sse < b.sse) {
                best = Some(fit);
            }
        }
        best.expect("at least one restart")
    };

    let best = canonical_labels(best);
    let mut assignments = vec![0; order.len()];
    for (pos, &original) in order.iter().enumerate() {
        assignments[original] = best.assignments[pos];
    }
    Ok(KMeans { assignments, ..best })
}

/// SSE trace of a single seeded Lloyd run, one entry per half-step.
pub fn lloyd_trace(features: &Array2<f64>, k: usize, seed: u64) -> Result<Vec<f64>> {
    ensure!(features.nrows() >= k && k >= 1, "need at least k points");
    let mut rng = rng_for(seed, &[0]);
    Ok(lloyd(features, plus_plus_seeds(features, k, &mut rng)).1)
}

/// Smallest `k` whose relative SSE drop to `k + 1` falls under
/// [`ELBOW_THRESHOLD`]; the largest candidate if none does.
pub fn elbow_select(features: &Array2<f64>, k_max: usize, seed: u64) -> Result<usize> {
    ensure!(features.nrows() > 0, "elbow selection needs at least one point");
    ensure!(k_max >= 1, "k_max must be at least 1");
    let limit = k_max.min(features.nrows());
    let mut prev = kmeans_fit(features, 1, derive_seed(seed, &[1]))?.sse;
    if prev == 0.0 {
        return Ok(1);
    }
    for k in 1..limit {
        let next = kmeans_fit(features, k + 1, derive_seed(seed, &[k as u64 + 1]))?.sse;
        if (prev - next) / prev < ELBOW_THRESHOLD {
            return Ok(k);
        }
        if next == 0.0 {
            return Ok(k + 1);
        }
        prev = next;
    }
    Ok(limit)
}

/// Feature used to group videos of a class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    #[default]
    Audio,
    Visual,
}

/// How many clusters each class gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Elbow { k_max: usize },
    Fixed { k: usize },
}

impl Default for Selection {
    fn default() -> Self {
        Selection::Elbow { k_max: DEFAULT_K_MAX }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassClusters {
    /// Number of clusters; 0 when the class has no videos.
    pub k: usize,
    pub centroids: Array2<f64>,
}

/// Per-class clustering of labeled videos.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub feature_source: FeatureSource,
    pub seed: u64,
    pub classes: Vec<ClassClusters>,
    /// For each video, its `(class, cluster)` memberships.
    pub assignments: Vec<Vec<(usize, usize)>>,
}

impl ClusterModel {
    /// Clusters the videos of each class using one feature row per video.
    pub fn fit(
        features: &Array2<f64>,
        labels: &[&Label],
        num_classes: usize,
        selection: Selection,
        feature_source: FeatureSource,
        seed: u64,
    ) -> Result<Self> {
        ensure!(
            features.nrows() == labels.len(),
            "{} feature rows for {} labels",
            features.nrows(),
            labels.len()
        );
        let mut assignments = vec![Vec::new(); labels.len()];
        let mut classes = Vec::with_capacity(num_classes);
        for y in 0..num_classes {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].contains(y)).collect();
            if members.is_empty() {
                classes.push(ClassClusters {
                    k: 0,
                    centroids: Array2::zeros((0, features.ncols())),
                });
                continue;
            }
            let x = features.select(Axis(0), &members);
            let class_seed = derive_seed(seed, &[y as u64]);
            let k = match selection {
                Selection::Elbow { k_max } => elbow_select(&x, k_max, class_seed)?,
                Selection::Fixed { k } => k,
            };
            let fit = kmeans_fit(&x, k, class_seed)?;
            for (&i, &j) in members.iter().zip(&fit.assignments) {
                assignments[i].push((y, j));
            }
            classes.push(ClassClusters {
                k: fit.centroids.nrows(),
                centroids: fit.centroids,
            });
        }
        Ok(Self {
            feature_source,
            seed,
            classes,
            assignments,
        })
    }

    /// Cluster of video `i` within class `y`.
    pub fn cluster_of(&self, i: usize, y: usize) -> Option<usize> {
        self.assignments.get(i)?.iter().find(|(c, _)| *c == y).map(|&(_, j)| j)
    }

    /// Writes `video_id,class,cluster` rows.
    pub fn write_csv(&self, ids: &[&str], path: &Path) -> Result<()> {
        ensure!(ids.len() == self.assignments.len(), "one id per clustered video is required");
        let err = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["video_id", "class", "cluster"]).map_err(err)?;
        for (id, memberships) in ids.iter().zip(&self.assignments) {
            for (y, j) in memberships {
                w.write_record([id.to_string(), y.to_string(), j.to_string()]).map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Class sizes `n_y` and cluster sizes `n_{y,j}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_y: Vec<u64>,
    pub n_yj: Vec<Vec<u64>>,
}

impl Counts {
    /// `(n_y, n_{y,j})` of video `i` for class `y`.
    pub fn of(&self, model: &ClusterModel, i: usize, y: usize) -> Option<(u64, u64)> {
        let j = model.cluster_of(i, y)?;
        Some((self.n_y[y], self.n_yj[y][j]))
    }
}

pub fn cluster_stats(model: &ClusterModel, labels: &[&Label]) -> Result<Counts> {
    ensure!(
        labels.len() == model.assignments.len(),
        "{} labels for {} clustered videos",
        labels.len(),
        model.assignments.len()
    );
    let k = model.classes.len();
    let mut n_y = vec![0u64; k];
    let mut n_yj: Vec<Vec<u64>> = model.classes.iter().map(|c| vec![0; c.k]).collect();
    for (i, label) in labels.iter().enumerate() {
        for y in label.classes() {
            ensure!(y < k, "label {y} out of range for {k} classes");
            let j = model
                .cluster_of(i, y)
                .ok_or_else(|| Error::Validation(format!("video {i} has no cluster for class {y}")))?;
            ensure!(j < n_yj[y].len(), "cluster {j} out of range for class {y}");
            n_y[y] += 1;
            n_yj[y][j] += 1;
        }
    }
    Ok(Counts { n_y, n_yj })
}

/// Mean of each row over consecutive groups of `group` rows; turns per-clip
/// features into per-video features.
pub fn pool_rows(x: &Array2<f64>, group: usize) -> Array2<f64> {
    let n = x.nrows() / group;
    let mut out = Array2::zeros((n, x.ncols()));
    for i in 0..n {
        let block = x.slice(ndarray::s![i * group..(i + 1) * group, ..]);
        out.row_mut(i).assign(&block.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols())));
    }
    out
}
