//! Seeded synthetic audiovisual feature benchmark with controllable domain
//! shift.
//!
//! Each video is a short sequence of clips; every clip carries a visual and an
//! audio feature vector. A video belongs to an activity class and, within the
//! class, to an interaction cluster (the object or environment acted upon).
//!
//! * Audio prototypes are hierarchical: each class has a center and each of
//!   its interaction clusters sits at a [`CLUSTER_SPREAD`]-scaled offset from
//!   it. Visual prototypes are independent per `(class, cluster)`, since
//!   appearance depends on the object and scene more than sound does.
//! * Audio prototypes are shared across domains per `(class, cluster)`, up to a
//!   small `audio_jitter`. Silent classes emit background sound that carries
//!   no class information.
//! * Visual prototypes move between domains by exactly `visual_shift`.
//! * Class priors and within-class cluster frequencies differ per domain,
//!   which produces label shift and a long tail of interactions.
//!
//! Every video is generated from its own derived seed, so results do not
//! depend on generation order.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub mod io;

/// Version tag written into dataset manifests.
pub const GENERATOR_VERSION: &str = "synthgen-2";

/// Number of class-independent background sounds used for silent classes.
pub const BACKGROUND_SOUNDS: usize = 4;

/// Scale of a cluster's offset from its class center, relative to the
/// unit scale of class centers.
pub const CLUSTER_SPREAD: f64 = 0.5;

const PRIOR_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    /// Row index of this domain's embedding.
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// Ground-truth label of a video.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Single(usize),
    Multi(Vec<bool>),
}

impl Label {
    pub fn contains(&self, class: usize) -> bool {
        match self {
            Label::Single(y) => *y == class,
            Label::Multi(v) => v.get(class).copied().unwrap_or(false),
        }
    }

    /// Active class indices in increasing order.
    pub fn classes(&self) -> Vec<usize> {
        match self {
            Label::Single(y) => vec![*y],
            Label::Multi(v) => v.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect(),
        }
    }

    pub fn single(&self) -> Option<usize> {
        match self {
            Label::Single(y) => Some(*y),
            Label::Multi(_) => None,
        }
    }
}

/// Everything the generator knows about a video that a learner must not see
/// directly. Source labels are exposed through [`VideoSample::supervision`];
/// the rest is reachable only through the evaluation accessors on
/// [`Dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Truth {
    pub label: Label,
    pub cluster: usize,
    pub audible: bool,
}

/// One synthetic video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub domain: Domain,
    /// `clips x visual_dim`, row-major.
    pub visual: Vec<f32>,
    /// `clips x audio_dim`, row-major.
    pub audio: Vec<f32>,
    truth: Truth,
}

impl VideoSample {
    pub(crate) fn new(id: String, domain: Domain, visual: Vec<f32>, audio: Vec<f32>, truth: Truth) -> Self {
        Self {
            id,
            domain,
            visual,
            audio,
            truth,
        }
    }

    /// The training label: available for source videos only.
    pub fn supervision(&self) -> Option<&Label> {
        match self.domain {
            Domain::Source => Some(&self.truth.label),
            Domain::Target => None,
        }
    }

    pub fn visual_matrix(&self, clips: usize) -> Array2<f64> {
        to_matrix(&self.visual, clips)
    }

    pub fn audio_matrix(&self, clips: usize) -> Array2<f64> {
        to_matrix(&self.audio, clips)
    }
}

fn to_matrix(data: &[f32], rows: usize) -> Array2<f64> {
    let cols = data.len() / rows;
    Array2::from_shape_fn((rows, cols), |(r, c)| data[r * cols + c] as f64)
}

/// Declarative description of a synthetic source/target benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub audible: Vec<bool>,
    pub clusters_per_class: Vec<usize>,
    pub source_class_prior: Vec<f64>,
    pub target_class_prior: Vec<f64>,
    pub source_cluster_freq: Vec<Vec<f64>>,
    pub target_cluster_freq: Vec<Vec<f64>>,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub clips: usize,
    pub sigma_within: f64,
    pub visual_shift: f64,
    pub audio_jitter: f64,
    pub num_source: usize,
    pub num_target: usize,
    pub multilabel: bool,
    pub seed: u64,
    /// Selects an independent set of visual prototypes while keeping labels,
    /// clusters and audio identical. Stream 1 plays the role of a second
    /// visual modality.
    #[serde(default)]
    pub visual_stream: u32,
}

impl DomainSpec {
    /// The default benchmark: eight classes (two silent), three interaction
    /// clusters per class with a long tail in the source domain, a reversed
    /// class prior in the target domain and a large visual shift.
    pub fn shift_heavy(seed: u64) -> Self {
        let k = 8;
        let source_class_prior = vec![0.30, 0.22, 0.15, 0.11, 0.08, 0.06, 0.05, 0.03];
        let mut target_class_prior = source_class_prior.clone();
        target_class_prior.reverse();
        Self {
            num_classes: k,
            audible: vec![true, true, false, true, true, true, false, true],
            clusters_per_class: vec![3; k],
            source_class_prior,
            target_class_prior,
            source_cluster_freq: vec![vec![0.80, 0.15, 0.05]; k],
            target_cluster_freq: vec![vec![0.20, 0.30, 0.50]; k],
            visual_dim: 32,
            audio_dim: 32,
            clips: 4,
            sigma_within: 1.0,
            visual_shift: 5.0,
            audio_jitter: 0.3,
            num_source: 800,
            num_target: 800,
            multilabel: false,
            seed,
            visual_stream: 0,
        }
    }

    /// A small spec for unit tests and examples.
    pub fn tiny(seed: u64) -> Self {
        Self {
            num_classes: 4,
            audible: vec![true, true, true, false],
            clusters_per_class: vec![2; 4],
            source_class_prior: vec![0.4, 0.3, 0.2, 0.1],
            target_class_prior: vec![0.25; 4],
            source_cluster_freq: vec![vec![0.8, 0.2]; 4],
            target_cluster_freq: vec![vec![0.5, 0.5]; 4],
            visual_dim: 8,
            audio_dim: 8,
            clips: 2,
            sigma_within: 0.5,
            visual_shift: 2.0,
            audio_jitter: 0.1,
            num_source: 40,
            num_target: 40,
            multilabel: false,
            seed,
            visual_stream: 0,
        }
    }

    /// Checks every structural invariant, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        ensure!(k >= 2, "num_classes must be at least 2, got {k}");
        ensure!(self.clips >= 1, "clips must be at least 1");
        ensure!(self.num_source >= 1, "num_source must be at least 1");
        ensure!(self.num_target >= 1, "num_target must be at least 1");
        ensure!(self.visual_dim >= 1 && self.audio_dim >= 1, "feature dimensions must be positive");
        ensure!(
            self.visual_shift.is_finite() && self.visual_shift >= 0.0,
            "visual_shift must be finite and >= 0"
        );
        ensure!(
            self.audio_jitter.is_finite() && self.audio_jitter >= 0.0,
            "audio_jitter must be finite and >= 0"
        );
        ensure!(
            self.sigma_within.is_finite() && self.sigma_within >= 0.0,
            "sigma_within must be finite and >= 0"
        );
        ensure!(self.audible.len() == k, "audible must have num_classes entries");
        ensure!(self.clusters_per_class.len() == k, "clusters_per_class must have num_classes entries");
        ensure!(
            self.clusters_per_class.iter().all(|&c| c >= 1),
            "clusters_per_class entries must be at least 1"
        );
        check_distribution("source_class_prior", &self.source_class_prior, k)?;
        check_distribution("target_class_prior", &self.target_class_prior, k)?;
        for (name, freq) in [
            ("source_cluster_freq", &self.source_cluster_freq),
            ("target_cluster_freq", &self.target_cluster_freq),
        ] {
            ensure!(freq.len() == k, "{name} must have num_classes rows");
            for (c, row) in freq.iter().enumerate() {
                check_distribution(&format!("{name}[{c}]"), row, self.clusters_per_class[c])?;
            }
        }
        Ok(())
    }

    pub fn class_prior(&self, domain: Domain) -> &[f64] {
        match domain {
            Domain::Source => &self.source_class_prior,
            Domain::Target => &self.target_class_prior,
        }
    }

    pub fn cluster_freq(&self, domain: Domain) -> &[Vec<f64>] {
        match domain {
            Domain::Source => &self.source_cluster_freq,
            Domain::Target => &self.target_cluster_freq,
        }
    }

    pub fn count(&self, domain: Domain) -> usize {
        match domain {
            Domain::Source => self.num_source,
            Domain::Target => self.num_target,
        }
    }
}

fn check_distribution(name: &str, p: &[f64], len: usize) -> Result<()> {
    ensure!(p.len() == len, "{name} must have {len} entries, got {}", p.len());
    ensure!(
        p.iter().all(|v| v.is_finite() && *v >= 0.0),
        "{name} entries must be finite and nonnegative"
    );
    let sum: f64 = p.iter().sum();
    ensure!((sum - 1.0).abs() <= PRIOR_TOL, "{name} must sum to 1 (sums to {sum})");
    Ok(())
}

/// A generated benchmark: labeled source videos and unlabeled target videos.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub source: Vec<VideoSample>,
    pub target: Vec<VideoSample>,
    pub version: String,
}

impl Dataset {
    pub fn videos(&self, domain: Domain) -> &[VideoSample] {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Source labels in video order.
    pub fn source_labels(&self) -> Vec<&Label> {
        self.source
            .iter()
            .map(|s| s.supervision().expect("source videos are labeled"))
            .collect()
    }

    /// Ground truth for evaluation and analysis only. Training code must not
    /// call this for the target domain.
    pub fn evaluation_truth(&self, domain: Domain) -> Vec<&Truth> {
        self.videos(domain).iter().map(|s| &s.truth).collect()
    }

    /// Ground-truth labels of the first `count` target videos, for
    /// semi-supervised runs that deliberately label part of the target set.
    pub fn revealed_target_labels(&self, count: usize) -> Vec<&Label> {
        self.target.iter().take(count).map(|s| &s.truth.label).collect()
    }

    /// Replaces every target label, cluster and audibility flag with
    /// scrambled values. Used to prove that training never reads them.
    pub fn with_scrambled_target_truth(&self, seed: u64) -> Dataset {
        let mut out = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.spec.num_classes;
        for s in &mut out.target {
            s.truth.label = match &s.truth.label {
                Label::Single(_) => Label::Single(rng.random_range(0..k)),
                Label::Multi(_) => Label::Multi((0..k).map(|_| rng.random_bool(0.5)).collect()),
            };
            s.truth.cluster = rng.random_range(0..7);
            s.truth.audible = rng.random_bool(0.5);
        }
        out
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integers into an independent stream seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub(crate) fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

const STREAM_AUDIO: u64 = 1;
const STREAM_VISUAL: u64 = 2;
const STREAM_VIDEO: u64 = 3;
const STREAM_MIX: u64 = 4;

fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draws `count` standard-normal prototypes, redrawing any that lands closer
/// than half the typical inter-prototype distance to an earlier one.
fn separated_prototypes(rng: &mut impl Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let min_dist = 0.5 * (2.0 * dim as f64).sqrt();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut candidate = gaussian_vec(rng, dim);
        for _ in 0..100 {
            if out.iter().all(|p| dist(p, &candidate) >= min_dist) {
                break;
            }
            candidate = gaussian_vec(rng, dim);
        }
        out.push(candidate);
    }
    out
}

/// `extra + classes` separated centers; returns per-pair prototypes (class
/// center plus a scaled separated offset) and the `extra` leftover centers.
fn hierarchical(rng: &mut impl Rng, spec: &DomainSpec, extra: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut centers = separated_prototypes(rng, spec.num_classes + extra, dim);
    let leftover = centers.split_off(spec.num_classes);
    let pairs: usize = spec.clusters_per_class.iter().sum();
    let mut offsets = separated_prototypes(rng, pairs, dim).into_iter();
    let mut out = Vec::with_capacity(pairs);
    for (k, &c) in spec.clusters_per_class.iter().enumerate() {
        for _ in 0..c {
            let o = offsets.next().expect("one offset per pair");
            out.push(centers[k].iter().zip(o).map(|(m, d)| m + CLUSTER_SPREAD * d).collect());
        }
    }
    (out, leftover)
}

/// Per-spec prototypes, indexed `[class][cluster]`.
struct Prototypes {
    audio: Vec<Vec<Vec<f64>>>,
    audio_jitter_dir: Vec<Vec<Vec<f64>>>,
    background: Vec<Vec<f64>>,
    visual: Vec<Vec<Vec<f64>>>,
    visual_shift_dir: Vec<Vec<Vec<f64>>>,
}

impl Prototypes {
    fn new(spec: &DomainSpec) -> Self {
        let pairs: usize = spec.clusters_per_class.iter().sum();
        let nest = |flat: Vec<Vec<f64>>| -> Vec<Vec<Vec<f64>>> {
            let mut it = flat.into_iter();
            spec.clusters_per_class
                .iter()
                .map(|&c| (0..c).map(|_| it.next().expect("enough prototypes")).collect())
                .collect()
        };

        let mut rng = rng_for(spec.seed, &[STREAM_AUDIO]);
        let (all_audio, background) = hierarchical(&mut rng, spec, BACKGROUND_SOUNDS, spec.audio_dim);
        let jitter = (0..pairs).map(|_| unit_vec(&mut rng, spec.audio_dim)).collect();

        let mut rng = rng_for(spec.seed, &[STREAM_VISUAL, spec.visual_stream as u64]);
        let visual = separated_prototypes(&mut rng, pairs, spec.visual_dim);
        let shift = (0..pairs).map(|_| unit_vec(&mut rng, spec.visual_dim)).collect();

        Self {
            audio: nest(all_audio),
            audio_jitter_dir: nest(jitter),
            background,
            visual: nest(visual),
            visual_shift_dir: nest(shift),
        }
    }

    fn audio_mean(&self, spec: &DomainSpec, class: usize, cluster: usize, domain: Domain) -> Vec<f64> {
        let base = &self.audio[class][cluster];
        match domain {
            Domain::Source => base.clone(),
            Domain::Target => base
                .iter()
                .zip(&self.audio_jitter_dir[class][cluster])
                .map(|(m, d)| m + spec.audio_jitter * d)
                .collect(),
        }
    }

    fn visual_mean(&self, spec: &DomainSpec, class: usize, cluster: usize, domain: Domain) -> Vec<f64> {
        let base = &self.visual[class][cluster];
        match domain {
            Domain::Source => base.clone(),
            Domain::Target => base
                .iter()
                .zip(&self.visual_shift_dir[class][cluster])
                .map(|(m, d)| m + spec.visual_shift * d)
                .collect(),
        }
    }
}

fn categorical(rng: &mut impl Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn noisy(rng: &mut impl Rng, mean: &[f64], sigma: f64, out: &mut Vec<f32>) {
    for m in mean {
        let e: f64 = StandardNormal.sample(rng);
        out.push((m + sigma * e) as f32);
    }
}

fn generate_video(spec: &DomainSpec, protos: &Prototypes, domain: Domain, index: usize) -> VideoSample {
    let mut rng = rng_for(spec.seed, &[STREAM_VIDEO, domain.index() as u64, index as u64]);
    let k = spec.num_classes;
    let prior = spec.class_prior(domain);
    let freq = spec.cluster_freq(domain);

    // Active classes, each with its own interaction cluster.
    let active: Vec<(usize, usize)> = if spec.multilabel {
        let count = rng.random_range(1..=3usize).min(k);
        let mut weights = prior.to_vec();
        let mut chosen = Vec::with_capacity(count);
        for _ in 0..count {
            if weights.iter().all(|&w| w <= 0.0) {
                break;
            }
            let c = categorical(&mut rng, &weights);
            weights[c] = 0.0;
            chosen.push(c);
        }
        chosen.into_iter().map(|c| (c, categorical(&mut rng, &freq[c]))).collect()
    } else {
        let c = categorical(&mut rng, prior);
        vec![(c, categorical(&mut rng, &freq[c]))]
    };
    let background = rng.random_range(0..BACKGROUND_SOUNDS);

    let mut visual = Vec::with_capacity(spec.clips * spec.visual_dim);
    let mut audio = Vec::with_capacity(spec.clips * spec.audio_dim);
    for clip in 0..spec.clips {
        let (c, j) = active[clip % active.len()];
        noisy(&mut rng, &protos.visual_mean(spec, c, j, domain), spec.sigma_within, &mut visual);
        let audio_mean = if spec.audible[c] {
            protos.audio_mean(spec, c, j, domain)
        } else {
            protos.background[background].clone()
        };
        noisy(&mut rng, &audio_mean, spec.sigma_within, &mut audio);
    }

    let (primary, cluster) = active[0];
    let label = if spec.multilabel {
        let mut v = vec![false; k];
        for &(c, _) in &active {
            v[c] = true;
        }
        Label::Multi(v)
    } else {
        Label::Single(primary)
    };
    let prefix = match domain {
        Domain::Source => 's',
        Domain::Target => 't',
    };
    VideoSample::new(
        format!("{prefix}{index:06}"),
        domain,
        visual,
        audio,
        Truth {
            label,
            cluster,
            audible: spec.audible[primary],
        },
    )
}

/// Generates a dataset; a pure function of `spec` (including its seed).
pub fn generate(spec: &DomainSpec) -> Result<Dataset> {
    spec.validate()?;
    let protos = Prototypes::new(spec);
    let make = |domain: Domain| -> Vec<VideoSample> {
        (0..spec.count(domain))
            .map(|i| generate_video(spec, &protos, domain, i))
            .collect()
    };
    Ok(Dataset {
        spec: spec.clone(),
        source: make(Domain::Source),
        target: make(Domain::Target),
        version: GENERATOR_VERSION.to_string(),
    })
}

/// Number of videos `mix_audio` modifies for a given ratio.
pub fn mixed_count(ratio: f64, total: usize) -> usize {
    // Guards against products like 0.29 * 100 = 28.999999999999996.
    ((ratio * total as f64) + 1e-9).floor() as usize
}

/// Contaminates the audio of a `ratio` fraction of all videos: each clip's
/// audio becomes the average of its own audio and the corresponding clip of
/// another randomly chosen video. Visual features are untouched.
pub fn mix_audio(ds: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    ensure!((0.0..=1.0).contains(&ratio), "mix ratio must lie in [0, 1], got {ratio}");
    let (n, m) = (ds.source.len(), ds.target.len());
    let total = n + m;
    let count = mixed_count(ratio, total);
    let mut out = ds.clone();
    if count == 0 || total < 2 {
        return Ok(out);
    }
    let mut rng = rng_for(seed, &[STREAM_MIX]);
    let mut order: Vec<usize> = (0..total).collect();
    for i in 0..count {
        let j = rng.random_range(i..total);
        order.swap(i, j);
    }
    let original = |idx: usize| -> &VideoSample {
        if idx < n {
            &ds.source[idx]
        } else {
            &ds.target[idx - n]
        }
    };
    for &victim in &order[..count] {
        let mut partner = rng.random_range(0..total - 1);
        if partner >= victim {
            partner += 1;
        }
        let other = original(partner).audio.clone();
        let sample = if victim < n {
            &mut out.source[victim]
        } else {
            &mut out.target[victim - n]
        };
        for (a, b) in sample.audio.iter_mut().zip(&other) {
            *a = 0.5 * *a + 0.5 * *b;
        }
    }
    Ok(out)
}
