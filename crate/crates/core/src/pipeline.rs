//! Two-stage training, inference and baselines.
//!
//! A [`Session`] owns the generated data and the pretrained audio encoder,
//! so several method variants of one experiment can share them. Stage one
//! trains the visual encoder (optionally with audio-based attention) on
//! source labels plus target pseudo-labels; stage two trains the recognizer
//! on top of the frozen stage-one features.
//!
//! Target labels are never read here except through
//! [`Dataset::revealed_target_labels`] in semi-supervised runs and
//! [`Dataset::evaluation_truth`] when scoring.

use std::path::Path;
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::clustering::{cluster_stats, ClusterModel, Counts, FeatureSource};
use crate::config::{ExperimentConfig, MethodConfig, PseudoKind};
use crate::encoder::{AttentionModule, AudioEncoder, AudioFeatures, Stage1Model, VisualEncoder};
use crate::error::{ensure, Error, Result};
use crate::eval::{group_metrics, headline, Grouping, MetricsReport};
use crate::graph::Tape;
use crate::labels::{class_prior, hard_pseudo_rows, AbsentLabels, LabelMode, Provenance};
use crate::losses::{absent_loss, absent_loss_grad, base_loss, base_loss_grad, cb_weight, rows_node, BaseLoss};
use crate::nn::{Bound, ParamSet, Sgd};
use crate::recognizer::{ClassTokenSource, Recognizer, RecognizerInputs};
use crate::synthgen::{derive_seed, generate, mix_audio, Dataset, Domain, Label, VideoSample};

const TAG_AUDIO: u64 = 10;
const TAG_STAGE1: u64 = 11;
const TAG_STAGE2: u64 = 12;
const TAG_NOISE: u64 = 13;
const TAG_CLUSTER: u64 = 14;

/// Videos per inference chunk.
const CHUNK: usize = 256;

/// Stacks the per-clip features of `videos` row-wise.
pub fn stack(videos: &[VideoSample], clips: usize, visual: bool) -> Array2<f64> {
    let dim = |v: &VideoSample| if visual { v.visual.len() } else { v.audio.len() } / clips;
    let cols = videos.first().map(dim).unwrap_or(0);
    let mut out = Array2::zeros((videos.len() * clips, cols));
    for (i, v) in videos.iter().enumerate() {
        let data = if visual { &v.visual } else { &v.audio };
        for (j, x) in data.iter().enumerate() {
            out[[i * clips + j / cols, j % cols]] = *x as f64;
        }
    }
    out
}

fn clip_rows(idx: &[usize], clips: usize) -> Vec<usize> {
    idx.iter().flat_map(|&i| i * clips..(i + 1) * clips).collect()
}

/// A shuffled partition of `0..n` into batches of at most `size`.
fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn label_mode(base: BaseLoss) -> LabelMode {
    match base {
        BaseLoss::SoftmaxCe => LabelMode::Single,
        BaseLoss::SigmoidCe => LabelMode::Multi,
    }
}

fn sgd(cfg: &ExperimentConfig, params: &[&ParamSet]) -> Sgd {
    let clip = (cfg.optim.clip > 0.0).then_some(cfg.optim.clip);
    Sgd::new(cfg.optim.lr, cfg.optim.momentum, clip, params)
}

/// Runs `f` on consecutive chunks of `n` videos and stacks the results.
fn chunked(n: usize, mut f: impl FnMut(&[usize]) -> Result<Array2<f64>>) -> Result<Array2<f64>> {
    let idx: Vec<usize> = (0..n).collect();
    let parts = idx.chunks(CHUNK).map(&mut f).collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Validation(e.to_string()))
}

/// Trains the audio encoder on labeled source audio.
pub fn pretrain_audio(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(AudioEncoder, Vec<f64>)> {
    ensure!(!ds.source.is_empty(), "audio pretraining needs labeled source videos");
    let dims = cfg.encoder_dims();
    let clips = dims.clips;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_AUDIO]));
    let mut enc = AudioEncoder::new(&dims, cfg.loss.base, &mut rng);
    let x = stack(&ds.source, clips, false);
    let labels = ds.source_labels();
    let mut opt = sgd(cfg, &[&enc.params]);
    let mut trace = Vec::new();
    for _ in 0..cfg.optim.pretrain_epochs {
        let mut total = 0.0;
        for batch in batches(ds.source.len(), cfg.optim.batch_size, &mut rng) {
            let mut tape = Tape::new();
            let bound = enc.params.bind(&mut tape);
            let input = tape.leaf(x.select(Axis(0), &clip_rows(&batch, clips)));
            let out = enc.forward(&mut tape, &bound, input, clips);
            let scale = 1.0 / batch.len() as f64;
            let loss = rows_node(&mut tape, out.probs, |i, row| {
                let p = row.to_vec();
                let y = labels[batch[i]];
                let g = base_loss_grad(&p, y, enc.base)?.into_iter().map(|g| g * scale).collect();
                Ok(Some((base_loss(&p, y, enc.base)? * scale, g)))
            })?;
            total += tape.scalar(loss) * batch.len() as f64;
            let mut grads = tape.backward(loss);
            let g = bound.gradients(&enc.params, &mut grads);
            opt.step(&mut [&mut enc.params], &[g]);
        }
        trace.push(total / ds.source.len() as f64);
    }
    enc.params.round_to_f32();
    Ok((enc, trace))
}

/// Audio-balanced weight of every source video, rescaled to mean 1.
///
/// Multi-label videos average the weight over their active classes.
pub fn balanced_weights(labels: &[&Label], model: &ClusterModel, counts: &Counts, beta: f64) -> Result<Vec<f64>> {
    let mut w = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        let classes = label.classes();
        ensure!(!classes.is_empty(), "source video {i} has no active class");
        let mut sum = 0.0;
        for &y in &classes {
            let (n_y, n_yj) = counts
                .of(model, i, y)
                .ok_or_else(|| Error::Validation(format!("source video {i} has no cluster for class {y}")))?;
            sum += cb_weight(n_y, beta)? * cb_weight(n_yj, beta)?;
        }
        w.push(sum / classes.len() as f64);
    }
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    Ok(w.into_iter().map(|x| x / mean).collect())
}

/// Pseudo-supervision for target videos in stage one.
#[derive(Clone, Debug)]
pub enum TargetSupervision {
    Absent(AbsentLabels),
    Hard(Vec<Label>),
}

/// Trained stage-one networks and the training signals they used.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub model: Stage1Model,
    /// Audio encoder as used by this model (differs from the pretrained one
    /// only when its last layer was fine-tuned).
    pub audio: AudioEncoder,
    pub audio_finetuned: bool,
    pub clusters: Option<ClusterModel>,
    pub supervision: Option<TargetSupervision>,
    pub trace: Vec<f64>,
}

/// Trained stage-two recognizer.
#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub recognizer: Recognizer,
    pub trace: Vec<f64>,
}

/// One visual stream's trained models.
#[derive(Clone, Debug)]
pub struct StreamModels {
    pub stage1: Stage1Output,
    pub stage2: Option<Stage2Output>,
}

/// Features of one domain of one dataset, stacked per clip.
#[derive(Clone, Debug)]
struct DomainData {
    visual: Array2<f64>,
    raw_audio: Array2<f64>,
    audio: AudioFeatures,
}

/// One visual stream of an experiment: training data (train noise) and
/// evaluation data (test noise), with precomputed audio features.
#[derive(Clone, Debug)]
pub struct Stream {
    pub train: Dataset,
    pub eval: Dataset,
    source: DomainData,
    target: DomainData,
    eval_target: DomainData,
}

/// Data, pretrained audio encoder and cached baselines for one experiment.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub audio: AudioEncoder,
    pub audio_trace: Vec<f64>,
    pub streams: Vec<Stream>,
    visual_baseline: Option<Stage1Output>,
}

/// Predictions and metrics of a trained run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub models: Vec<StreamModels>,
    /// Wall-clock seconds per stage and stream, e.g. `("stage1/0", 2.5)`.
    pub timings: Vec<(String, f64)>,
    pub target_probs: Array2<f64>,
    pub report: MetricsReport,
}

/// Fields of a config that determine the data and the pretrained audio
/// encoder; variants sharing them can share a session.
fn session_key(cfg: &ExperimentConfig) -> String {
    let audio = (
        &cfg.model.audio_hidden,
        &cfg.optim.lr,
        &cfg.optim.momentum,
        &cfg.optim.clip,
        &cfg.optim.batch_size,
        &cfg.optim.pretrain_epochs,
        &cfg.loss.base,
    );
    serde_json::to_string(&(cfg.seed, &cfg.data, &cfg.noise, audio)).expect("serializes")
}

fn audio_features(audio: &AudioEncoder, raw: &Array2<f64>, clips: usize) -> Result<AudioFeatures> {
    let n = raw.nrows() / clips;
    if n == 0 {
        let width = audio.params.get(audio.fc1.weight).ncols();
        let k = audio.params.get(audio.head.weight).ncols();
        return Ok(AudioFeatures {
            hidden: Array2::zeros((0, width)),
            clips: Array2::zeros((0, width)),
            pooled: Array2::zeros((0, width)),
            probs: Array2::zeros((0, k)),
        });
    }
    let parts = (0..n)
        .collect::<Vec<_>>()
        .chunks(CHUNK)
        .map(|c| audio.infer(&raw.select(Axis(0), &clip_rows(c, clips)), clips))
        .collect::<Result<Vec<_>>>()?;
    let cat = |f: fn(&AudioFeatures) -> &Array2<f64>| {
        let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
        concatenate(Axis(0), &views).expect("same widths")
    };
    Ok(AudioFeatures {
        hidden: cat(|p| &p.hidden),
        clips: cat(|p| &p.clips),
        pooled: cat(|p| &p.pooled),
        probs: cat(|p| &p.probs),
    })
}

fn domain_data(audio: &AudioEncoder, videos: &[VideoSample], clips: usize) -> Result<DomainData> {
    let raw_audio = stack(videos, clips, false);
    Ok(DomainData {
        visual: stack(videos, clips, true),
        audio: audio_features(audio, &raw_audio, clips)?,
        raw_audio,
    })
}

impl Session {
    /// Generates the data and pretrains the audio encoder.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Self::from_datasets(cfg, generate_streams(cfg)?)
    }

    /// Pretrains the audio encoder on the first dataset's source videos;
    /// one dataset per visual stream.
    pub fn from_datasets(cfg: &ExperimentConfig, datasets: Vec<Dataset>) -> Result<Self> {
        cfg.validate()?;
        ensure!(!datasets.is_empty(), "no dataset");
        let train = mix_audio(&datasets[0], cfg.noise.train, derive_seed(cfg.seed, &[TAG_NOISE, 0]))?;
        let (audio, trace) = pretrain_audio(cfg, &train)?;
        Self::assemble(cfg, datasets, audio, trace)
    }

    /// Uses an already trained audio encoder.
    pub fn with_audio(cfg: &ExperimentConfig, audio: AudioEncoder, audio_trace: Vec<f64>) -> Result<Self> {
        Self::assemble(cfg, generate_streams(cfg)?, audio, audio_trace)
    }

    fn assemble(cfg: &ExperimentConfig, datasets: Vec<Dataset>, audio: AudioEncoder, audio_trace: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let streams = datasets
            .into_iter()
            .map(|base| {
                let train = mix_audio(&base, cfg.noise.train, derive_seed(cfg.seed, &[TAG_NOISE, 0]))?;
                let eval = mix_audio(&base, cfg.noise.test, derive_seed(cfg.seed, &[TAG_NOISE, 1]))?;
                let clips = base.spec.clips;
                ensure!(
                    clips == cfg.data.clips && base.num_classes() == cfg.data.num_classes,
                    "dataset shape differs from the config"
                );
                Ok(Stream {
                    source: domain_data(&audio, &train.source, clips)?,
                    target: domain_data(&audio, &train.target, clips)?,
                    eval_target: domain_data(&audio, &eval.target, clips)?,
                    train,
                    eval,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            audio,
            audio_trace,
            streams,
            visual_baseline: None,
        })
    }

    /// Whether `cfg` can run on this session's data and audio encoder.
    pub fn accepts(&self, cfg: &ExperimentConfig) -> bool {
        self.check_compatible(cfg).is_ok()
    }

    fn check_compatible(&self, cfg: &ExperimentConfig) -> Result<()> {
        cfg.validate()?;
        ensure!(
            session_key(cfg) == session_key(&self.cfg),
            "config differs from the session in data, noise, seed or audio pretraining settings"
        );
        ensure!(
            !cfg.method.dual_modality || self.streams.len() == 2,
            "dual-modality run requested but the session has a single visual stream"
        );
        Ok(())
    }

    /// Source-only visual encoder on the first stream, trained once.
    pub fn visual_baseline(&mut self) -> Result<&Stage1Output> {
        if self.visual_baseline.is_none() {
            let mut cfg = self.cfg.clone();
            cfg.method = MethodConfig::visual_only();
            let out = train_stage1(&cfg, &self.streams[0], &self.audio, None)?;
            self.visual_baseline = Some(out);
        }
        Ok(self.visual_baseline.as_ref().expect("just trained"))
    }

    /// Target probabilities of the visual baseline on training data.
    fn baseline_target_probs(&mut self) -> Result<Array2<f64>> {
        let stream = self.streams[0].clone();
        let base = self.visual_baseline()?;
        stage1_probs(&base.model, &stream.target.visual, &stream.target.audio.clips, base.model.clips)
    }

    /// Pseudo-absent labels for the first stream's training target set.
    pub fn absent_labels(&mut self, provenance: Provenance, cfg: &ExperimentConfig) -> Result<AbsentLabels> {
        let probs = match provenance {
            Provenance::Audio => self.streams[0].target.audio.probs.clone(),
            Provenance::Visual => self.baseline_target_probs()?,
        };
        absent_from_probs(cfg, &self.streams[0].train, &probs, provenance)
    }

    /// Trains and evaluates one method variant.
    pub fn run(&mut self, cfg: &ExperimentConfig) -> Result<RunResult> {
        self.check_compatible(cfg)?;
        let visual_probs = if cfg.method.stage1_needs_visual_baseline() {
            Some(self.baseline_target_probs()?)
        } else {
            None
        };
        let cluster_features = if cfg.method.balanced && cfg.method.cluster_feature == FeatureSource::Visual {
            let stream = self.streams[0].clone();
            let base = self.visual_baseline()?;
            Some(pooled_visual_features(&base.model, &stream.source, base.model.clips)?)
        } else {
            None
        };
        let aux = Auxiliary {
            visual_probs,
            cluster_features,
        };
        let mut models = Vec::new();
        let mut timings = Vec::new();
        for (s, stream) in self.streams[..if cfg.method.dual_modality { 2 } else { 1 }].iter().enumerate() {
            let clock = Instant::now();
            let stage1 = train_stage1(cfg, stream, &self.audio, Some(&aux))?;
            timings.push((format!("stage1/{s}"), clock.elapsed().as_secs_f64()));
            let stage2 = if cfg.method.stage2 {
                let clock = Instant::now();
                let out = train_stage2(cfg, stream, &stage1)?;
                timings.push((format!("stage2/{s}"), clock.elapsed().as_secs_f64()));
                Some(out)
            } else {
                None
            };
            models.push(StreamModels { stage1, stage2 });
        }
        let target_probs = self.predict(&models)?;
        let report = self.report(&target_probs)?;
        Ok(RunResult {
            models,
            timings,
            target_probs,
            report,
        })
    }

    /// Evaluation-set target probabilities, averaged over streams.
    pub fn predict(&self, models: &[StreamModels]) -> Result<Array2<f64>> {
        ensure!(!models.is_empty(), "no trained model");
        ensure!(
            models.len() <= self.streams.len(),
            "{} models for {} visual streams",
            models.len(),
            self.streams.len()
        );
        let preds = models
            .iter()
            .zip(&self.streams)
            .map(|(m, s)| infer_stream(m, s))
            .collect::<Result<Vec<_>>>()?;
        average_predictions(&preds)
    }

    /// Evaluation-set target probabilities of one stream's models.
    pub fn predict_stream(&self, stream: usize, models: &StreamModels) -> Result<Array2<f64>> {
        let s = self
            .streams
            .get(stream)
            .ok_or_else(|| Error::Validation(format!("no visual stream {stream}")))?;
        infer_stream(models, s)
    }

    /// Metrics of target predictions against evaluation truth.
    pub fn report(&self, probs: &Array2<f64>) -> Result<MetricsReport> {
        let eval = &self.streams[0].eval;
        let truth = eval.evaluation_truth(Domain::Target);
        let source = eval.evaluation_truth(Domain::Source);
        let labels: Vec<&Label> = truth.iter().map(|t| &t.label).collect();
        let metric = if eval.spec.multilabel { "map" } else { "top1" };
        let mut report = MetricsReport::default();
        report.push(metric, "all", headline(probs, &labels)?);
        report.push_groups(metric, &group_metrics(probs, &truth, Grouping::SilentAudible, &source)?);
        let bins = group_metrics(probs, &truth, Grouping::FrequencyBins, &source)?;
        report.push_groups(metric, &bins);
        // The two rare bins together.
        let names = crate::eval::group_names(&truth, Grouping::FrequencyBins, &source);
        let rare: Vec<usize> = (0..truth.len()).filter(|&i| names[i] != "bin_over_10").collect();
        if !rare.is_empty() {
            let sub = probs.select(Axis(0), &rare);
            let sub_labels: Vec<&Label> = rare.iter().map(|&i| labels[i]).collect();
            if let Ok(v) = headline(&sub, &sub_labels) {
                report.push(metric, "bin_0_10", v);
            }
        }
        Ok(report)
    }

    /// Baseline metrics: source-only visual encoder, pretrained audio
    /// encoder, or the average of both.
    pub fn baseline(&mut self, kind: Baseline) -> Result<(Array2<f64>, MetricsReport)> {
        let stream = self.streams[0].clone();
        let audio = stream.eval_target.audio.probs.clone();
        let probs = match kind {
            Baseline::AudioOnly => audio,
            Baseline::VisualOnly | Baseline::LateFusion => {
                let base = self.visual_baseline()?;
                let visual = stage1_probs(
                    &base.model,
                    &stream.eval_target.visual,
                    &stream.eval_target.audio.clips,
                    base.model.clips,
                )?;
                if kind == Baseline::LateFusion {
                    average_predictions(&[visual, audio])?
                } else {
                    visual
                }
            }
        };
        let report = self.report(&probs)?;
        Ok((probs, report))
    }
}

impl MethodConfig {
    fn stage1_needs_visual_baseline(&self) -> bool {
        self.absent && self.pseudo_source == Provenance::Visual
    }
}

/// One generated dataset per visual stream the config asks for.
pub fn generate_streams(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    let streams = if cfg.method.dual_modality { 2 } else { 1 };
    (0..streams)
        .map(|s| {
            let mut spec = cfg.data.clone();
            spec.visual_stream = s;
            generate(&spec)
        })
        .collect()
}

/// Baseline models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    VisualOnly,
    AudioOnly,
    LateFusion,
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual_only" => Ok(Baseline::VisualOnly),
            "audio_only" => Ok(Baseline::AudioOnly),
            "late_fusion" => Ok(Baseline::LateFusion),
            other => Err(Error::Validation(format!("unknown baseline {other:?}"))),
        }
    }
}

/// Element-wise mean of equally shaped prediction matrices.
pub fn average_predictions(preds: &[Array2<f64>]) -> Result<Array2<f64>> {
    ensure!(!preds.is_empty(), "no predictions to average");
    let dim = preds[0].dim();
    ensure!(preds.iter().all(|p| p.dim() == dim), "prediction shapes differ");
    let mut sum = Array2::zeros(dim);
    for p in preds {
        sum += p;
    }
    Ok(sum / preds.len() as f64)
}

/// Signals computed outside stage one that some variants need.
#[derive(Default)]
pub struct Auxiliary {
    /// Target probabilities of the source-only visual encoder.
    pub visual_probs: Option<Array2<f64>>,
    /// Per-video source features for visual-feature clustering.
    pub cluster_features: Option<Array2<f64>>,
}

fn absent_from_probs(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    probs: &Array2<f64>,
    provenance: Provenance,
) -> Result<AbsentLabels> {
    if ds.spec.multilabel {
        let alpha = class_prior(&ds.source_labels(), ds.num_classes())?;
        AbsentLabels::multi(probs, &alpha, cfg.loss.gamma, provenance)
    } else {
        AbsentLabels::single(probs, cfg.loss.r, provenance)
    }
}

fn stage1_probs(model: &Stage1Model, visual: &Array2<f64>, audio_clips: &Array2<f64>, clips: usize) -> Result<Array2<f64>> {
    let n = visual.nrows() / clips;
    chunked(n, |c| {
        let rows = clip_rows(c, clips);
        Ok(model.infer(&visual.select(Axis(0), &rows), &audio_clips.select(Axis(0), &rows))?.1)
    })
}

fn stage1_clip_features(
    model: &Stage1Model,
    visual: &Array2<f64>,
    audio_clips: &Array2<f64>,
    clips: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = visual.nrows() / clips;
    let mut probs = Vec::new();
    let feats = chunked(n, |c| {
        let rows = clip_rows(c, clips);
        let (f, p) = model.infer(&visual.select(Axis(0), &rows), &audio_clips.select(Axis(0), &rows))?;
        probs.push(p);
        Ok(f)
    })?;
    let views: Vec<_> = probs.iter().map(|p| p.view()).collect();
    Ok((feats, concatenate(Axis(0), &views).expect("same widths")))
}

fn pooled_visual_features(model: &Stage1Model, source: &DomainData, clips: usize) -> Result<Array2<f64>> {
    let (f, _) = stage1_clip_features(model, &source.visual, &source.audio.clips, clips)?;
    Ok(crate::clustering::pool_rows(&f, clips))
}

/// Audio clip features the attention module reads for the given videos,
/// recomputed through a trainable last layer when fine-tuning.
fn audio_clips_var(
    tape: &mut Tape,
    audio: &AudioEncoder,
    audio_bound: Option<&Bound>,
    data: &DomainData,
    rows: &[usize],
) -> crate::graph::Var {
    match audio_bound {
        Some(bound) => {
            let h = tape.leaf(data.audio.hidden.select(Axis(0), rows));
            let h = audio.fc2.forward(tape, bound, h);
            tape.gelu(h)
        }
        None => tape.leaf(data.audio.clips.select(Axis(0), rows)),
    }
}

/// Stage one: visual encoder and attention trained on weighted source
/// cross-entropy plus target pseudo-label losses.
pub fn train_stage1(
    cfg: &ExperimentConfig,
    stream: &Stream,
    audio: &AudioEncoder,
    aux: Option<&Auxiliary>,
) -> Result<Stage1Output> {
    let method = &cfg.method;
    let ds = &stream.train;
    let dims = cfg.encoder_dims();
    let clips = dims.clips;
    let base = cfg.loss.base;
    let stream_tag = ds.spec.visual_stream as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_STAGE1, stream_tag]));
    // Separate batch streams keep variants that differ only in their target
    // loss on identical source batches.
    let mut source_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_STAGE1, stream_tag, 1]));
    let mut target_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_STAGE1, stream_tag, 2]));
    let visual = VisualEncoder::new(&dims, base, &mut rng);
    let attention = method.attention.then(|| {
        let mut a = AttentionModule::new(&dims, &mut rng);
        a.positional = cfg.model.att_positional;
        a
    });
    let mut model = Stage1Model {
        visual,
        attention,
        clips,
    };
    let mut audio = audio.clone();
    let finetune = method.finetune_audio && model.attention.is_some();

    let source_labels = ds.source_labels();
    let n = ds.source.len();
    let m = ds.target.len();

    // Source weights.
    let (clusters, weights) = if method.balanced && n > 0 {
        let features = match method.cluster_feature {
            FeatureSource::Audio => stream.source.audio.pooled.clone(),
            FeatureSource::Visual => aux
                .and_then(|a| a.cluster_features.clone())
                .ok_or_else(|| Error::Validation("visual-feature clustering needs the visual baseline".into()))?,
        };
        let model = ClusterModel::fit(
            &features,
            &source_labels,
            ds.num_classes(),
            method.selection(),
            method.cluster_feature,
            derive_seed(cfg.seed, &[TAG_CLUSTER]),
        )?;
        let counts = cluster_stats(&model, &source_labels)?;
        let w = balanced_weights(&source_labels, &model, &counts, cfg.loss.beta)?;
        (Some(model), w)
    } else {
        (None, vec![1.0; n])
    };

    // Target supervision.
    let revealed = ((method.labeled_target_fraction * m as f64) + 1e-9).floor() as usize;
    let revealed_labels = ds.revealed_target_labels(revealed.min(m));
    let supervision = if method.absent && m > 0 {
        let probs = match method.pseudo_source {
            Provenance::Audio => stream.target.audio.probs.clone(),
            Provenance::Visual => aux
                .and_then(|a| a.visual_probs.clone())
                .ok_or_else(|| Error::Validation("visual pseudo-labels need the visual baseline".into()))?,
        };
        Some(match method.pseudo_kind {
            PseudoKind::Absent => TargetSupervision::Absent(absent_from_probs(cfg, ds, &probs, method.pseudo_source)?),
            PseudoKind::Hard => TargetSupervision::Hard(hard_pseudo_rows(&probs, label_mode(base), 0.5)?),
        })
    } else {
        None
    };
    let absent_sets: Option<Vec<Vec<usize>>> = match &supervision {
        Some(TargetSupervision::Absent(a)) => Some((0..a.len()).map(|i| a.set(i)).collect()),
        _ => None,
    };
    let use_target = supervision.is_some() || !revealed_labels.is_empty();

    let mut opt = {
        let mut sets = vec![&model.visual.params];
        if let Some(a) = &model.attention {
            sets.push(&a.params);
        }
        if finetune {
            sets.push(&audio.params);
        }
        sgd(cfg, &sets)
    };

    let bsz = cfg.optim.batch_size;
    let mut trace = Vec::new();
    let mut target_batches: Vec<Vec<usize>> = Vec::new();
    for _ in 0..cfg.optim.stage1_epochs {
        let source_batches = if n > 0 {
            batches(n, bsz, &mut source_rng)
        } else {
            batches(m, bsz, &mut source_rng).into_iter().map(|_| Vec::new()).collect()
        };
        let mut total = 0.0;
        let steps = source_batches.len();
        for sb in source_batches {
            let tb = if use_target {
                if target_batches.is_empty() {
                    target_batches = batches(m, bsz, &mut target_rng);
                    target_batches.reverse();
                }
                target_batches.pop().expect("refilled")
            } else {
                Vec::new()
            };
            let mut tape = Tape::new();
            let vb = model.visual.params.bind(&mut tape);
            let ab = model.attention.as_ref().map(|a| a.params.bind(&mut tape));
            let fb = finetune.then(|| audio.params.bind(&mut tape));

            let s_rows = clip_rows(&sb, clips);
            let t_rows = clip_rows(&tb, clips);
            let vis_s = stream.source.visual.select(Axis(0), &s_rows);
            let vis_t = stream.target.visual.select(Axis(0), &t_rows);
            let vis = tape.leaf(concatenate(Axis(0), &[vis_s.view(), vis_t.view()]).expect("same width"));
            let aud_s = audio_clips_var(&mut tape, &audio, fb.as_ref(), &stream.source, &s_rows);
            let aud_t = audio_clips_var(&mut tape, &audio, fb.as_ref(), &stream.target, &t_rows);
            let all_rows: Vec<(crate::graph::Var, usize)> = (0..s_rows.len())
                .map(|r| (aud_s, r))
                .chain((0..t_rows.len()).map(|r| (aud_t, r)))
                .collect();
            let aud = tape.gather(all_rows);
            let out = model.forward(&mut tape, &vb, ab.as_ref(), vis, aud);

            let ns = sb.len();
            let nt = tb.len();
            let loss = rows_node(&mut tape, out.probs, |i, row| {
                let p = row.to_vec();
                if i < ns {
                    let v = sb[i];
                    let scale = weights[v] / ns as f64;
                    let y = source_labels[v];
                    let g = base_loss_grad(&p, y, base)?.into_iter().map(|g| g * scale).collect();
                    return Ok(Some((base_loss(&p, y, base)? * scale, g)));
                }
                let v = tb[i - ns];
                let scale = 1.0 / nt as f64;
                if v < revealed_labels.len() {
                    let y = revealed_labels[v];
                    let g = base_loss_grad(&p, y, base)?.into_iter().map(|g| g * scale).collect();
                    return Ok(Some((base_loss(&p, y, base)? * scale, g)));
                }
                match &supervision {
                    Some(TargetSupervision::Absent(_)) => {
                        let q = &absent_sets.as_ref().expect("absent sets")[v];
                        let g = absent_loss_grad(&p, q)?.into_iter().map(|g| g * scale).collect();
                        Ok(Some((absent_loss(&p, q)? * scale, g)))
                    }
                    Some(TargetSupervision::Hard(labels)) => {
                        let y = &labels[v];
                        let g = base_loss_grad(&p, y, base)?.into_iter().map(|g| g * scale).collect();
                        Ok(Some((base_loss(&p, y, base)? * scale, g)))
                    }
                    None => Ok(None),
                }
            })?;
            let value = tape.scalar(loss);
            ensure!(value.is_finite(), "stage-one loss became non-finite");
            total += value;
            let mut grads = tape.backward(loss);
            let mut all = vec![vb.gradients(&model.visual.params, &mut grads)];
            if let (Some(a), Some(b)) = (&model.attention, &ab) {
                all.push(b.gradients(&a.params, &mut grads));
            }
            if let Some(b) = &fb {
                all.push(b.gradients(&audio.params, &mut grads));
            }
            drop(tape);
            let mut sets = vec![&mut model.visual.params];
            if let Some(a) = &mut model.attention {
                sets.push(&mut a.params);
            }
            if finetune {
                sets.push(&mut audio.params);
            }
            opt.step(&mut sets, &all);
        }
        trace.push(total / steps.max(1) as f64);
    }
    model.visual.params.round_to_f32();
    if let Some(a) = &mut model.attention {
        a.params.round_to_f32();
    }
    audio.params.round_to_f32();
    Ok(Stage1Output {
        model,
        audio,
        audio_finetuned: finetune,
        clusters,
        supervision,
        trace,
    })
}

/// Frozen stage-one features of a domain, in recognizer input form.
fn recognizer_inputs(stage1: &Stage1Output, data: &DomainData, domain: Domain, clips: usize) -> Result<(RecognizerInputs, Array2<f64>)> {
    let features = if stage1.audio_finetuned {
        audio_features(&stage1.audio, &data.raw_audio, clips)?
    } else {
        data.audio.clone()
    };
    let AudioFeatures {
        hidden,
        clips: audio_clips,
        probs,
        ..
    } = features;
    let (visual_clips, p_v) = stage1_clip_features(&stage1.model, &data.visual, &audio_clips, clips)?;
    let n = visual_clips.nrows() / clips;
    Ok((
        RecognizerInputs {
            visual_clips,
            audio_clips,
            audio_hidden: Some(hidden),
            audio_probs: probs,
            domains: vec![domain; n],
        },
        p_v,
    ))
}

fn concat_inputs(a: &RecognizerInputs, b: &RecognizerInputs) -> RecognizerInputs {
    let cat = |x: &Array2<f64>, y: &Array2<f64>| concatenate(Axis(0), &[x.view(), y.view()]).expect("same widths");
    RecognizerInputs {
        visual_clips: cat(&a.visual_clips, &b.visual_clips),
        audio_clips: cat(&a.audio_clips, &b.audio_clips),
        audio_hidden: match (&a.audio_hidden, &b.audio_hidden) {
            (Some(x), Some(y)) => Some(cat(x, y)),
            _ => None,
        },
        audio_probs: cat(&a.audio_probs, &b.audio_probs),
        domains: a.domains.iter().chain(&b.domains).copied().collect(),
    }
}

/// Stage two: the recognizer trained on source labels and target hard
/// pseudo-labels from the stage-one encoder, with stage one frozen.
pub fn train_stage2(cfg: &ExperimentConfig, stream: &Stream, stage1: &Stage1Output) -> Result<Stage2Output> {
    let ds = &stream.train;
    let clips = cfg.data.clips;
    let base = cfg.loss.base;
    let eta = cfg.loss.eta;
    let (src, _) = recognizer_inputs(stage1, &stream.source, Domain::Source, clips)?;
    let (tgt, p_t) = recognizer_inputs(stage1, &stream.target, Domain::Target, clips)?;
    let n = src.len();
    let m = tgt.len();
    let source_labels: Vec<Label> = ds.source_labels().into_iter().cloned().collect();
    let mut target_labels: Vec<Label> = if m > 0 {
        hard_pseudo_rows(&p_t, label_mode(base), 0.5)?
    } else {
        Vec::new()
    };
    let revealed = ((cfg.method.labeled_target_fraction * m as f64) + 1e-9).floor() as usize;
    for (slot, y) in target_labels.iter_mut().zip(ds.revealed_target_labels(revealed.min(m))) {
        *slot = y.clone();
    }

    let stream_tag = ds.spec.visual_stream as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_STAGE2, stream_tag]));
    let mut source_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_STAGE2, stream_tag, 1]));
    let mut target_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_STAGE2, stream_tag, 2]));
    let fc2 = (
        stage1.audio.params.get(stage1.audio.fc2.weight),
        stage1.audio.params.get(stage1.audio.fc2.bias),
    );
    let mut rec = Recognizer::new(
        &cfg.recognizer_dims(),
        cfg.method.sequence,
        cfg.method.class_token,
        base,
        Some(fc2),
        &mut rng,
    )?;
    let mut opt = sgd(cfg, &[&rec.params]);
    let bsz = cfg.optim.batch_size;
    let mut trace = Vec::new();
    let mut target_batches: Vec<Vec<usize>> = Vec::new();
    for _ in 0..cfg.optim.stage2_epochs {
        let source_batches = batches(n, bsz, &mut source_rng);
        let steps = source_batches.len();
        let mut total = 0.0;
        for sb in source_batches {
            let tb = if m > 0 {
                if target_batches.is_empty() {
                    target_batches = batches(m, bsz, &mut target_rng);
                    target_batches.reverse();
                }
                target_batches.pop().expect("refilled")
            } else {
                Vec::new()
            };
            let inputs = concat_inputs(&src.select(&sb, clips), &tgt.select(&tb, clips));
            let labels: Vec<&Label> = sb
                .iter()
                .map(|&i| &source_labels[i])
                .chain(tb.iter().map(|&i| &target_labels[i]))
                .collect();
            let scale = 1.0 / labels.len() as f64;
            let mut tape = Tape::new();
            let bound = rec.params.bind(&mut tape);
            let out = rec.forward(&mut tape, &bound, &inputs);
            let term = |tape: &mut Tape, var, weight: f64| {
                rows_node(tape, var, |i, row| {
                    let p = row.to_vec();
                    let y = labels[i];
                    let g = base_loss_grad(&p, y, base)?.into_iter().map(|g| g * weight).collect();
                    Ok(Some((base_loss(&p, y, base)? * weight, g)))
                })
            };
            let mut terms = vec![(term(&mut tape, out.probs, scale)?, 1.0)];
            if let (Some(tok), true) = (out.token, eta > 0.0) {
                terms.push((term(&mut tape, tok.h, scale)?, eta));
                terms.push((term(&mut tape, tok.h_prime, scale)?, eta));
            }
            let loss = tape.weighted_sum(terms);
            let value = tape.scalar(loss);
            ensure!(value.is_finite(), "stage-two loss became non-finite");
            total += value;
            let mut grads = tape.backward(loss);
            let g = bound.gradients(&rec.params, &mut grads);
            drop(tape);
            opt.step(&mut [&mut rec.params], &[g]);
        }
        trace.push(total / steps.max(1) as f64);
    }
    rec.params.round_to_f32();
    Ok(Stage2Output { recognizer: rec, trace })
}

/// Evaluation-set target probabilities of one stream's models.
fn infer_stream(models: &StreamModels, stream: &Stream) -> Result<Array2<f64>> {
    let clips = stream.eval.spec.clips;
    match &models.stage2 {
        None => stage1_probs(
            &models.stage1.model,
            &stream.eval_target.visual,
            &stream.eval_target.audio.clips,
            clips,
        ),
        Some(stage2) => {
            let (inputs, _) = recognizer_inputs(&models.stage1, &stream.eval_target, Domain::Target, clips)?;
            chunked(inputs.len(), |c| Ok(stage2.recognizer.infer(&inputs.select(c, clips))?.probs))
        }
    }
}

/// Rebuilds untrained models with the architecture `cfg` describes; used
/// before loading checkpoints.
pub fn build_models(cfg: &ExperimentConfig, audio: &AudioEncoder) -> Result<Vec<StreamModels>> {
    let dims = cfg.encoder_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let streams = if cfg.method.dual_modality { 2 } else { 1 };
    (0..streams)
        .map(|_| {
            let visual = VisualEncoder::new(&dims, cfg.loss.base, &mut rng);
            let attention = cfg.method.attention.then(|| {
                let mut a = AttentionModule::new(&dims, &mut rng);
                a.positional = cfg.model.att_positional;
                a
            });
            let stage1 = Stage1Output {
                model: Stage1Model {
                    visual,
                    attention,
                    clips: dims.clips,
                },
                audio: audio.clone(),
                audio_finetuned: cfg.method.finetune_audio && cfg.method.attention,
                clusters: None,
                supervision: None,
                trace: Vec::new(),
            };
            let stage2 = if cfg.method.stage2 {
                let fc2 = (audio.params.get(audio.fc2.weight), audio.params.get(audio.fc2.bias));
                Some(Stage2Output {
                    recognizer: Recognizer::new(
                        &cfg.recognizer_dims(),
                        cfg.method.sequence,
                        cfg.method.class_token,
                        cfg.loss.base,
                        Some(fc2),
                        &mut rng,
                    )?,
                    trace: Vec::new(),
                })
            } else {
                None
            };
            Ok(StreamModels { stage1, stage2 })
        })
        .collect()
}

/// Writes every trained parameter set under `dir`.
pub fn save_models(dir: &Path, audio: &AudioEncoder, models: &[StreamModels]) -> Result<()> {
    checkpoint::save(&audio.params, dir, "audio")?;
    for (s, m) in models.iter().enumerate() {
        checkpoint::save(&m.stage1.audio.params, dir, &format!("stream{s}_audio"))?;
        checkpoint::save(&m.stage1.model.visual.params, dir, &format!("stream{s}_visual"))?;
        if let Some(a) = &m.stage1.model.attention {
            checkpoint::save(&a.params, dir, &format!("stream{s}_attention"))?;
        }
        if let Some(r) = &m.stage2 {
            checkpoint::save(&r.recognizer.params, dir, &format!("stream{s}_recognizer"))?;
        }
    }
    Ok(())
}

/// Reads models written by [`save_models`].
pub fn load_models(cfg: &ExperimentConfig, dir: &Path) -> Result<(AudioEncoder, Vec<StreamModels>)> {
    let dims = cfg.encoder_dims();
    let mut audio = AudioEncoder::new(&dims, cfg.loss.base, &mut ChaCha8Rng::seed_from_u64(0));
    checkpoint::restore(&mut audio.params, dir, "audio")?;
    let mut models = build_models(cfg, &audio)?;
    for (s, m) in models.iter_mut().enumerate() {
        checkpoint::restore(&mut m.stage1.audio.params, dir, &format!("stream{s}_audio"))?;
        checkpoint::restore(&mut m.stage1.model.visual.params, dir, &format!("stream{s}_visual"))?;
        if let Some(a) = &mut m.stage1.model.attention {
            checkpoint::restore(&mut a.params, dir, &format!("stream{s}_attention"))?;
        }
        if let Some(r) = &mut m.stage2 {
            checkpoint::restore(&mut r.recognizer.params, dir, &format!("stream{s}_recognizer"))?;
        }
    }
    Ok((audio, models))
}

/// Whether a class-token source needs first-layer audio activations.
pub fn needs_audio_hidden(source: ClassTokenSource) -> bool {
    source == ClassTokenSource::AudioFeaturesJoint
}
