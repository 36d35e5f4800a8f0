//! Stage-one networks: the audio encoder, the visual encoder and the
//! audio-based channel attention that gates visual features.
//!
//! All forwards work on batches. Per-clip inputs are stacked row-wise, clip
//! fastest: row `b * clips + t` is clip `t` of video `b`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::{Tape, Var};
use crate::losses::BaseLoss;
use crate::nn::{normal_matrix, Bound, Linear, ParamId, ParamSet, TransformerEncoder};

/// Applies the output link matching the classification loss.
pub fn link(tape: &mut Tape, logits: Var, base: BaseLoss) -> Var {
    match base {
        BaseLoss::SoftmaxCe => tape.softmax(logits),
        BaseLoss::SigmoidCe => tape.sigmoid(logits),
    }
}

/// Widths and depths of the stage-one networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub num_classes: usize,
    pub clips: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub visual_hidden: usize,
    pub audio_hidden: usize,
    pub att_dim: usize,
    pub att_heads: usize,
    pub att_depth: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, "need at least two classes");
        ensure!(self.clips >= 1, "need at least one clip");
        ensure!(
            self.att_heads >= 1 && self.att_dim.is_multiple_of(self.att_heads),
            "attention width {} must be divisible by {} heads",
            self.att_dim,
            self.att_heads
        );
        ensure!(
            self.visual_dim > 0 && self.audio_dim > 0 && self.visual_hidden > 0 && self.audio_hidden > 0,
            "feature widths must be positive"
        );
        Ok(())
    }
}

/// Outputs of [`AudioEncoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct AudioVars {
    /// First hidden layer, per clip.
    pub hidden: Var,
    /// Intermediate per-clip features read by the attention module.
    pub clips: Var,
    pub pooled: Var,
    pub probs: Var,
}

/// `A(.)`: per-clip two-layer network, mean pooling, linear classifier.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub params: ParamSet,
    pub fc1: Linear,
    pub fc2: Linear,
    pub head: Linear,
    pub base: BaseLoss,
    pub input_dim: usize,
}

/// Concrete audio encoder outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    pub hidden: Array2<f64>,
    pub clips: Array2<f64>,
    pub pooled: Array2<f64>,
    pub probs: Array2<f64>,
}

impl AudioEncoder {
    pub fn new(dims: &EncoderDims, base: BaseLoss, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let fc1 = Linear::new(&mut params, "audio.fc1", dims.audio_dim, dims.audio_hidden, rng);
        let fc2 = Linear::new(&mut params, "audio.fc2", dims.audio_hidden, dims.audio_hidden, rng);
        let head = Linear::new(&mut params, "audio.head", dims.audio_hidden, dims.num_classes, rng);
        Self {
            params,
            fc1,
            fc2,
            head,
            base,
            input_dim: dims.audio_dim,
        }
    }

    /// Everything after the first hidden layer, starting from its output.
    pub fn forward_from_hidden(&self, tape: &mut Tape, bound: &Bound, hidden: Var, clips: usize) -> AudioVars {
        let h = self.fc2.forward(tape, bound, hidden);
        let h = tape.gelu(h);
        let pooled = tape.group_mean(h, clips);
        let logits = self.head.forward(tape, bound, pooled);
        AudioVars {
            hidden,
            clips: h,
            pooled,
            probs: link(tape, logits, self.base),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, clips: usize) -> AudioVars {
        let h = self.fc1.forward(tape, bound, x);
        let h = tape.gelu(h);
        self.forward_from_hidden(tape, bound, h, clips)
    }

    /// Runs the encoder on `x` (`batch * clips` rows of audio features).
    pub fn infer(&self, x: &Array2<f64>, clips: usize) -> Result<AudioFeatures> {
        ensure!(
            x.ncols() == self.input_dim,
            "audio features have width {}, encoder expects {}",
            x.ncols(),
            self.input_dim
        );
        ensure!(clips >= 1 && x.nrows().is_multiple_of(clips) && x.nrows() > 0, "audio input is not whole videos");
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let input = tape.leaf(x.clone());
        let out = self.forward(&mut tape, &bound, input, clips);
        Ok(AudioFeatures {
            hidden: tape.value(out.hidden).clone(),
            clips: tape.value(out.clips).clone(),
            pooled: tape.value(out.pooled).clone(),
            probs: tape.value(out.probs).clone(),
        })
    }
}

/// Outputs of [`VisualEncoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct VisualVars {
    /// Per-clip hidden features after attention modulation.
    pub clips: Var,
    pub pooled: Var,
    pub probs: Var,
}

/// `V(.)`: per-clip two-layer network whose hidden features can be gated
/// channel-wise before pooling and classification.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub params: ParamSet,
    pub fc1: Linear,
    pub fc2: Linear,
    pub head: Linear,
    pub base: BaseLoss,
    pub input_dim: usize,
}

impl VisualEncoder {
    pub fn new(dims: &EncoderDims, base: BaseLoss, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let fc1 = Linear::new(&mut params, "visual.fc1", dims.visual_dim, dims.visual_hidden, rng);
        let fc2 = Linear::new(&mut params, "visual.fc2", dims.visual_hidden, dims.visual_hidden, rng);
        let head = Linear::new(&mut params, "visual.head", dims.visual_hidden, dims.num_classes, rng);
        Self {
            params,
            fc1,
            fc2,
            head,
            base,
            input_dim: dims.visual_dim,
        }
    }

    /// `gate` is one row per video; `None` leaves the features unmodulated.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, gate: Option<Var>, clips: usize) -> VisualVars {
        let h = self.fc1.forward(tape, bound, x);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, bound, h);
        let mut h = tape.gelu(h);
        if let Some(a) = gate {
            let per_clip = tape.repeat_rows(a, clips);
            h = tape.mul(h, per_clip);
        }
        let pooled = tape.group_mean(h, clips);
        let logits = self.head.forward(tape, bound, pooled);
        VisualVars {
            clips: h,
            pooled,
            probs: link(tape, logits, self.base),
        }
    }
}

/// `psi(.)`: transformer over the intermediate audio features of a video,
/// read out through a learnable class token into a sigmoid channel gate.
#[derive(Clone, Debug)]
pub struct AttentionModule {
    pub params: ParamSet,
    pub input: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub encoder: TransformerEncoder,
    pub out: Linear,
    pub positional: bool,
    pub clips: usize,
}

impl AttentionModule {
    pub fn new(dims: &EncoderDims, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let d = dims.att_dim;
        let std = 1.0 / (d as f64).sqrt();
        let input = Linear::new(&mut params, "attention.input", dims.audio_hidden, d, rng);
        let cls = params.add("attention.cls", normal_matrix(rng, 1, d, std));
        let pos = params.add("attention.pos", normal_matrix(rng, dims.clips + 1, d, std));
        let encoder = TransformerEncoder::new(&mut params, "attention.encoder", dims.att_depth, d, dims.att_heads, rng);
        let out = Linear::new(&mut params, "attention.out", d, dims.visual_hidden, rng);
        Self {
            params,
            input,
            cls,
            pos,
            encoder,
            out,
            positional: true,
            clips: dims.clips,
        }
    }

    /// Channel gate in `(0, 1)` for each video of the batch.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, audio_clips: Var, clips: usize) -> Var {
        let tokens = self.input.forward(tape, bound, audio_clips);
        let batch = tape.value(audio_clips).nrows() / clips;
        let cls = bound.var(self.cls);
        let seq_len = clips + 1;
        let mut rows = Vec::with_capacity(batch * seq_len);
        for b in 0..batch {
            rows.push((cls, 0));
            rows.extend((0..clips).map(|t| (tokens, b * clips + t)));
        }
        let mut seq = tape.gather(rows);
        if self.positional {
            let pos = bound.var(self.pos);
            let tiled = tape.gather((0..batch).flat_map(|_| (0..seq_len).map(move |t| (pos, t))).collect());
            seq = tape.add(seq, tiled);
        }
        let encoded = self.encoder.forward(tape, bound, seq, seq_len);
        let cls_out = tape.gather((0..batch).map(|b| (encoded, b * seq_len)).collect());
        let logits = self.out.forward(tape, bound, cls_out);
        tape.sigmoid(logits)
    }

    /// Gate for a single video from its `clips x audio_hidden` features.
    pub fn infer(&self, audio_clips: &Array2<f64>) -> Result<Array2<f64>> {
        ensure!(audio_clips.nrows() > 0, "attention needs at least one audio token");
        let clips = audio_clips.nrows();
        ensure!(
            !self.positional || clips <= self.clips,
            "{clips} audio tokens but positions exist for {}",
            self.clips
        );
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.leaf(audio_clips.clone());
        let a = self.forward(&mut tape, &bound, x, clips);
        Ok(tape.value(a).clone())
    }
}

/// The full stage-one encoder `E(.)`.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub visual: VisualEncoder,
    /// Present when audio-based attention is enabled.
    pub attention: Option<AttentionModule>,
    pub clips: usize,
}

impl Stage1Model {
    /// Forward from visual inputs and frozen intermediate audio features.
    pub fn forward(
        &self,
        tape: &mut Tape,
        visual_bound: &Bound,
        attention_bound: Option<&Bound>,
        visual: Var,
        audio_clips: Var,
    ) -> VisualVars {
        let gate = match (&self.attention, attention_bound) {
            (Some(att), Some(bound)) => Some(att.forward(tape, bound, audio_clips, self.clips)),
            _ => None,
        };
        self.visual.forward(tape, visual_bound, visual, gate, self.clips)
    }

    /// Modulated per-clip features and probabilities for a batch.
    pub fn infer(&self, visual: &Array2<f64>, audio_clips: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        ensure!(
            visual.ncols() == self.visual.input_dim,
            "visual features have width {}, encoder expects {}",
            visual.ncols(),
            self.visual.input_dim
        );
        ensure!(visual.nrows() == audio_clips.nrows(), "visual and audio clip counts differ");
        let mut tape = Tape::new();
        let vb = self.visual.params.bind(&mut tape);
        let ab = self.attention.as_ref().map(|a| a.params.bind(&mut tape));
        let v = tape.leaf(visual.clone());
        let a = tape.leaf(audio_clips.clone());
        let out = self.forward(&mut tape, &vb, ab.as_ref(), v, a);
        Ok((tape.value(out.clips).clone(), tape.value(out.probs).clone()))
    }
}
