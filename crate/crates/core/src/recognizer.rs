//! Stage-two recognizer `R(.)`: a transformer over projected visual (and
//! optionally audio) clip tokens, led by a class token whose output state is
//! classified.
//!
//! In `audio_token` mode the class token is built from a bank of learnable
//! activity-sound vectors `g_k`: an audio head picks a first mixture `h`,
//! the mixed vector is concatenated with a low-dimensional view of the
//! visual feature, and a second head picks the final mixture `h'`. Audio
//! reaches the transformer only through that token.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::link;
use crate::error::{ensure, Result};
use crate::graph::{Tape, Var};
use crate::losses::BaseLoss;
use crate::nn::{normal_matrix, Bound, Linear, ParamId, ParamSet, TransformerEncoder};
use crate::synthgen::Domain;

/// Token layout fed to the transformer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    /// `[cls; visual; audio]` with a plain learnable class token.
    Vanilla,
    /// As `Vanilla`, with a per-domain embedding added to visual tokens.
    DomainEmbed,
    /// `[z_cls; visual + domain embedding]`; audio only through `z_cls`.
    #[default]
    AudioToken,
}

/// What the class token is made of in `audio_token` mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTokenSource {
    /// Mixture of the activity-sound vectors.
    #[default]
    SoundVectors,
    /// Linear projection of the audio encoder's class probabilities.
    AudioPrediction,
    /// Linear projection of the pooled audio feature from the frozen audio
    /// encoder.
    AudioFeatures,
    /// As `AudioFeatures`, with the audio encoder's last layer trained along
    /// with the recognizer.
    AudioFeaturesJoint,
    /// A plain learnable vector.
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognizerDims {
    pub num_classes: usize,
    pub clips: usize,
    pub visual_hidden: usize,
    pub audio_hidden: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
}

impl RecognizerDims {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.heads >= 1 && self.dim.is_multiple_of(self.heads),
            "recognizer width {} must be divisible by {} heads",
            self.dim,
            self.heads
        );
        ensure!(self.dim >= 8, "recognizer width must be at least 8");
        ensure!(self.clips >= 1 && self.num_classes >= 2, "need clips and at least two classes");
        Ok(())
    }

    /// Width of the visual down-projection inside the sound-vector bank.
    pub fn low_dim(&self) -> usize {
        self.dim / 8
    }
}

/// Learnable activity-sound vectors and the two heads that mix them.
#[derive(Clone, Debug)]
pub struct SoundVectorBank {
    pub vectors: ParamId,
    pub audio_head: Linear,
    pub visual_down: Linear,
    pub joint_head: Linear,
}

impl SoundVectorBank {
    fn new(ps: &mut ParamSet, dims: &RecognizerDims, rng: &mut impl Rng) -> Self {
        let k = dims.num_classes;
        let d = dims.dim;
        Self {
            vectors: ps.add("bank.vectors", normal_matrix(rng, k, d, 1.0 / (d as f64).sqrt())),
            audio_head: Linear::new(ps, "bank.audio_head", dims.audio_hidden, k, rng),
            visual_down: Linear::new(ps, "bank.visual_down", dims.visual_hidden, dims.low_dim(), rng),
            joint_head: Linear::new(ps, "bank.joint_head", d + dims.low_dim(), k, rng),
        }
    }
}

/// Class token and its mixtures, one row per video.
#[derive(Clone, Copy, Debug)]
pub struct ClassTokenVars {
    pub z: Var,
    pub h: Var,
    pub h_prime: Var,
}

/// Builds `z_cls`, `h` and `h'` from pooled audio and pooled visual features.
pub fn build_class_token(
    tape: &mut Tape,
    bound: &Bound,
    bank: &SoundVectorBank,
    pooled_audio: Var,
    pooled_visual: Var,
) -> ClassTokenVars {
    let g_all = bound.var(bank.vectors);
    let logits = bank.audio_head.forward(tape, bound, pooled_audio);
    let h = tape.softmax(logits);
    let g = tape.matmul(h, g_all);
    let low = bank.visual_down.forward(tape, bound, pooled_visual);
    let joint = tape.concat_cols(g, low);
    let logits = bank.joint_head.forward(tape, bound, joint);
    let h_prime = tape.softmax(logits);
    let z = tape.matmul(h_prime, g_all);
    ClassTokenVars { z, h, h_prime }
}

/// Per-batch inputs to the recognizer, all produced by frozen stage-one
/// networks.
#[derive(Clone, Debug)]
pub struct RecognizerInputs {
    /// Modulated visual clip features, `batch * clips` rows.
    pub visual_clips: Array2<f64>,
    /// Intermediate audio clip features, `batch * clips` rows.
    pub audio_clips: Array2<f64>,
    /// First-layer audio activations; needed only for joint audio training.
    pub audio_hidden: Option<Array2<f64>>,
    /// Audio class probabilities, one row per video.
    pub audio_probs: Array2<f64>,
    pub domains: Vec<Domain>,
}

impl RecognizerInputs {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// The rows belonging to videos `idx`.
    pub fn select(&self, idx: &[usize], clips: usize) -> Self {
        let clip_rows: Vec<usize> = idx.iter().flat_map(|&i| i * clips..(i + 1) * clips).collect();
        Self {
            visual_clips: self.visual_clips.select(Axis(0), &clip_rows),
            audio_clips: self.audio_clips.select(Axis(0), &clip_rows),
            audio_hidden: self.audio_hidden.as_ref().map(|h| h.select(Axis(0), &clip_rows)),
            audio_probs: self.audio_probs.select(Axis(0), idx),
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
        }
    }
}

/// Trainable copy of the audio encoder's last layer for joint training.
#[derive(Clone, Debug)]
pub struct AudioTail {
    pub fc2: Linear,
}

/// Recognizer parameters: projections, domain embeddings, transformer,
/// class tokens and output head.
#[derive(Clone, Debug)]
pub struct Recognizer {
    pub params: ParamSet,
    pub dims: RecognizerDims,
    pub mode: SequenceMode,
    pub source: ClassTokenSource,
    pub base: BaseLoss,
    pub visual_proj: Linear,
    pub audio_proj: Linear,
    pub domain_embed: ParamId,
    pub plain_cls: ParamId,
    pub pos: ParamId,
    pub encoder: TransformerEncoder,
    pub head: Linear,
    pub bank: SoundVectorBank,
    pub prediction_proj: Linear,
    pub feature_proj: Linear,
    pub audio_tail: Option<AudioTail>,
}

/// Tape handles produced by [`Recognizer::forward`].
#[derive(Clone, Copy, Debug)]
pub struct RecognizerVars {
    pub sequence: Var,
    pub cls_state: Var,
    pub probs: Var,
    /// Present only when the class token comes from the sound vectors.
    pub token: Option<ClassTokenVars>,
}

impl Recognizer {
    /// `audio_fc2` seeds the audio tail for joint training.
    pub fn new(
        dims: &RecognizerDims,
        mode: SequenceMode,
        source: ClassTokenSource,
        base: BaseLoss,
        audio_fc2: Option<(&Array2<f64>, &Array2<f64>)>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        dims.validate()?;
        let mut params = ParamSet::new();
        let d = dims.dim;
        let std = 1.0 / (d as f64).sqrt();
        let visual_proj = Linear::new(&mut params, "rec.visual_proj", dims.visual_hidden, d, rng);
        let audio_proj = Linear::new(&mut params, "rec.audio_proj", dims.audio_hidden, d, rng);
        let domain_embed = params.add("rec.domain_embed", Array2::zeros((2, d)));
        let plain_cls = params.add("rec.cls", normal_matrix(rng, 1, d, std));
        let pos = params.add("rec.pos", normal_matrix(rng, 2 * dims.clips + 1, d, std));
        let encoder = TransformerEncoder::new(&mut params, "rec.encoder", dims.depth, d, dims.heads, rng);
        let head = Linear::new(&mut params, "rec.head", d, dims.num_classes, rng);
        let bank = SoundVectorBank::new(&mut params, dims, rng);
        let prediction_proj = Linear::new(&mut params, "rec.prediction_proj", dims.num_classes, d, rng);
        let feature_proj = Linear::new(&mut params, "rec.feature_proj", dims.audio_hidden, d, rng);
        let audio_tail = match source {
            ClassTokenSource::AudioFeaturesJoint => {
                let (w, b) = audio_fc2.ok_or_else(|| {
                    crate::Error::Validation("joint audio training needs the audio encoder's last layer".into())
                })?;
                let weight = params.add("rec.audio_tail.weight", w.clone());
                let bias = params.add("rec.audio_tail.bias", b.clone());
                Some(AudioTail {
                    fc2: Linear { weight, bias },
                })
            }
            _ => None,
        };
        Ok(Self {
            params,
            dims: dims.clone(),
            mode,
            source,
            base,
            visual_proj,
            audio_proj,
            domain_embed,
            plain_cls,
            pos,
            encoder,
            head,
            bank,
            prediction_proj,
            feature_proj,
            audio_tail,
        })
    }

    pub fn seq_len(&self) -> usize {
        match self.mode {
            SequenceMode::AudioToken => self.dims.clips + 1,
            _ => 2 * self.dims.clips + 1,
        }
    }

    /// Assembles the token sequence (without positions) for a batch.
    pub fn build_sequence(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        visual_clips: Var,
        audio_clips: Var,
        cls: Var,
        domains: &[Domain],
    ) -> Var {
        let n = self.dims.clips;
        let batch = domains.len();
        let mut vis = self.visual_proj.forward(tape, bound, visual_clips);
        if self.mode != SequenceMode::Vanilla {
            let e = bound.var(self.domain_embed);
            let rows = domains.iter().flat_map(|d| std::iter::repeat_n((e, d.index()), n)).collect();
            let per_token = tape.gather(rows);
            vis = tape.add(vis, per_token);
        }
        let mut rows = Vec::with_capacity(batch * self.seq_len());
        match self.mode {
            SequenceMode::AudioToken => {
                for b in 0..batch {
                    rows.push((cls, b));
                    rows.extend((0..n).map(|t| (vis, b * n + t)));
                }
            }
            SequenceMode::Vanilla | SequenceMode::DomainEmbed => {
                let aud = self.audio_proj.forward(tape, bound, audio_clips);
                for b in 0..batch {
                    rows.push((cls, b));
                    rows.extend((0..n).map(|t| (vis, b * n + t)));
                    rows.extend((0..n).map(|t| (aud, b * n + t)));
                }
            }
        }
        tape.gather(rows)
    }

    fn class_token(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &RecognizerInputs,
        visual_clips: Var,
        audio_clips: Var,
    ) -> (Var, Option<ClassTokenVars>) {
        let batch = inputs.len();
        let n = self.dims.clips;
        let plain = || (0..batch).map(|_| (bound.var(self.plain_cls), 0)).collect::<Vec<_>>();
        if self.mode != SequenceMode::AudioToken {
            return (tape.gather(plain()), None);
        }
        match self.source {
            ClassTokenSource::Learnable => (tape.gather(plain()), None),
            ClassTokenSource::AudioPrediction => {
                let p = tape.leaf(inputs.audio_probs.clone());
                (self.prediction_proj.forward(tape, bound, p), None)
            }
            ClassTokenSource::AudioFeatures | ClassTokenSource::AudioFeaturesJoint => {
                let clips = match (&self.audio_tail, &inputs.audio_hidden) {
                    (Some(tail), Some(hidden)) => {
                        let h = tape.leaf(hidden.clone());
                        let h = tail.fc2.forward(tape, bound, h);
                        tape.gelu(h)
                    }
                    _ => audio_clips,
                };
                let pooled = tape.group_mean(clips, n);
                (self.feature_proj.forward(tape, bound, pooled), None)
            }
            ClassTokenSource::SoundVectors => {
                let pooled_audio = tape.group_mean(audio_clips, n);
                let pooled_visual = tape.group_mean(visual_clips, n);
                let token = build_class_token(tape, bound, &self.bank, pooled_audio, pooled_visual);
                (token.z, Some(token))
            }
        }
    }

    /// Full forward for a batch.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, inputs: &RecognizerInputs) -> RecognizerVars {
        let visual_clips = tape.leaf(inputs.visual_clips.clone());
        let audio_clips = tape.leaf(inputs.audio_clips.clone());
        let (cls, token) = self.class_token(tape, bound, inputs, visual_clips, audio_clips);
        let sequence = self.build_sequence(tape, bound, visual_clips, audio_clips, cls, &inputs.domains);
        let (probs, cls_state) = self.recognizer_forward(tape, bound, sequence, inputs.len());
        RecognizerVars {
            sequence,
            cls_state,
            probs,
            token,
        }
    }

    /// Adds positions, encodes, and classifies each sequence from its first
    /// token's output state.
    pub fn recognizer_forward(&self, tape: &mut Tape, bound: &Bound, sequence: Var, batch: usize) -> (Var, Var) {
        let len = self.seq_len();
        let pos = bound.var(self.pos);
        let tiled = tape.gather((0..batch).flat_map(|_| (0..len).map(move |t| (pos, t))).collect());
        let x = tape.add(sequence, tiled);
        let encoded = self.encoder.forward(tape, bound, x, len);
        let cls_state = tape.gather((0..batch).map(|b| (encoded, b * len)).collect());
        let logits = self.head.forward(tape, bound, cls_state);
        (link(tape, logits, self.base), cls_state)
    }

    /// Probabilities for a batch, plus `h` and `h'` when the sound-vector
    /// bank is in use.
    pub fn infer(&self, inputs: &RecognizerInputs) -> Result<RecognizerOutput> {
        ensure!(!inputs.is_empty(), "recognizer needs at least one video");
        let n = self.dims.clips;
        ensure!(
            inputs.visual_clips.dim() == (inputs.len() * n, self.dims.visual_hidden),
            "visual clip features have shape {:?}, expected ({}, {})",
            inputs.visual_clips.dim(),
            inputs.len() * n,
            self.dims.visual_hidden
        );
        ensure!(
            inputs.audio_clips.dim() == (inputs.len() * n, self.dims.audio_hidden),
            "audio clip features have shape {:?}, expected ({}, {})",
            inputs.audio_clips.dim(),
            inputs.len() * n,
            self.dims.audio_hidden
        );
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, inputs);
        Ok(RecognizerOutput {
            probs: tape.value(out.probs).clone(),
            sequence: tape.value(out.sequence).clone(),
            mixtures: out
                .token
                .map(|t| (tape.value(t.h).clone(), tape.value(t.h_prime).clone(), tape.value(t.z).clone())),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RecognizerOutput {
    pub probs: Array2<f64>,
    pub sequence: Array2<f64>,
    /// `(h, h', z_cls)` when the sound-vector bank builds the class token.
    pub mixtures: Option<(Array2<f64>, Array2<f64>, Array2<f64>)>,
}
