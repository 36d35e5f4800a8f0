//! Declared ablation grids.
//!
//! Each axis turns one value string into a configured cell. Axes named after
//! a config key (anything containing a dot, e.g. `loss.eta`) set that key
//! directly.

use anyhow::{anyhow, bail, Context, Result};
use audioadapt::config::{ExperimentConfig, MethodConfig};
use audioadapt::losses::BaseLoss;
use audioadapt::pipeline::Baseline;

/// What a grid cell runs.
#[derive(Clone, Debug)]
pub enum Cell {
    Method(ExperimentConfig),
    Baseline(ExperimentConfig, Baseline),
}

impl Cell {
    pub fn config(&self) -> &ExperimentConfig {
        match self {
            Cell::Method(c) | Cell::Baseline(c, _) => c,
        }
    }
}

pub struct Axis {
    pub name: &'static str,
    pub about: &'static str,
    pub values: &'static [&'static str],
}

pub const AXES: &[Axis] = &[
    Axis {
        name: "stage1",
        about: "cumulative stage-one components, then the full model",
        values: &["visual_only", "attention", "attention_absent", "attention_absent_balanced", "full"],
    },
    Axis {
        name: "pseudo",
        about: "pseudo-label source and type",
        values: &["audio_absent", "audio_hard", "visual_absent", "visual_hard"],
    },
    Axis {
        name: "r",
        about: "pseudo-absent labels per video (single-label)",
        values: &["1", "2", "3", "4", "5", "6"],
    },
    Axis {
        name: "gamma",
        about: "pseudo-absent fraction (multi-label data)",
        values: &["0.01", "0.03", "0.05", "0.07", "0.1"],
    },
    Axis {
        name: "k",
        about: "clusters per class: elbow or fixed",
        values: &["elbow", "4", "5", "6", "7", "8", "9", "10"],
    },
    Axis {
        name: "cluster_feature",
        about: "features clustered for the balanced loss",
        values: &["audio", "visual"],
    },
    Axis {
        name: "class_token",
        about: "recognizer class-token source",
        values: &["sound_vectors", "audio_prediction", "audio_features", "audio_features_joint", "learnable"],
    },
    Axis {
        name: "sequence",
        about: "recognizer input sequence",
        values: &["vanilla", "domain_embed", "audio_token"],
    },
    Axis {
        name: "att_depth",
        about: "attention-module encoder layers",
        values: &["1", "2", "4", "8"],
    },
    Axis {
        name: "rec_depth",
        about: "recognizer encoder layers",
        values: &["1", "2", "3", "4"],
    },
    Axis {
        name: "modality",
        about: "input modality combinations",
        values: &["audio", "visual", "visual_dual", "audio_visual", "audio_visual_dual"],
    },
    Axis {
        name: "fusion",
        about: "late fusion against the full model",
        values: &["late_fusion", "ours"],
    },
    Axis {
        name: "noise",
        about: "train:test irrelevant-sound ratios",
        values: &[
            "0:0", "0:0.1", "0:0.2", "0:0.5", "0.1:0", "0.1:0.1", "0.1:0.2", "0.1:0.5", "0.2:0", "0.2:0.1", "0.2:0.2",
            "0.2:0.5", "0.5:0", "0.5:0.1", "0.5:0.2", "0.5:0.5",
        ],
    },
];

pub fn find(name: &str) -> Option<&'static Axis> {
    AXES.iter().find(|a| a.name == name)
}

fn set(cfg: &ExperimentConfig, assignments: &[String]) -> Result<ExperimentConfig> {
    Ok(cfg.with_overrides(assignments)?)
}

fn with_method(cfg: &ExperimentConfig, method: MethodConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.method = method;
    c
}

/// Builds the cell for `value` on `axis` from the base config.
pub fn cell(base: &ExperimentConfig, axis: &str, value: &str) -> Result<Cell> {
    let bad = || anyhow!("invalid value {value:?} for axis {axis}");
    let cfg = base.clone();
    let out = match axis {
        "stage1" => Cell::Method(match value {
            "visual_only" => with_method(&cfg, MethodConfig::visual_only()),
            "attention" => with_method(&cfg, MethodConfig::stage1(true, false, false)),
            "attention_absent" => with_method(&cfg, MethodConfig::stage1(true, true, false)),
            "attention_absent_balanced" => with_method(&cfg, MethodConfig::stage1(true, true, true)),
            "full" => cfg,
            _ => return Err(bad()),
        }),
        "pseudo" => {
            let (source, kind) = value.split_once('_').ok_or_else(bad)?;
            Cell::Method(set(
                &cfg,
                &[format!("method.pseudo_source={source}"), format!("method.pseudo_kind={kind}")],
            )?)
        }
        "r" => Cell::Method(set(&cfg, &[format!("loss.r={value}")])?),
        "gamma" => {
            let mut c = cfg;
            c.data.multilabel = true;
            c.loss.base = BaseLoss::SigmoidCe;
            Cell::Method(set(&c, &[format!("loss.gamma={value}")])?)
        }
        "k" => {
            let k = if value == "elbow" { "0" } else { value };
            let n: usize = k.parse().map_err(|_| bad())?;
            if value != "elbow" && n == 0 {
                return Err(bad());
            }
            Cell::Method(set(&cfg, &[format!("method.fixed_k={k}")])?)
        }
        "cluster_feature" => Cell::Method(set(&cfg, &[format!("method.cluster_feature={value}")])?),
        "class_token" => Cell::Method(set(&cfg, &[format!("method.class_token={value}")])?),
        "sequence" => Cell::Method(set(&cfg, &[format!("method.sequence={value}")])?),
        "att_depth" => Cell::Method(set(&cfg, &[format!("model.att_depth={value}")])?),
        "rec_depth" => Cell::Method(set(&cfg, &[format!("model.rec_depth={value}")])?),
        "modality" => match value {
            "audio" => Cell::Baseline(cfg, Baseline::AudioOnly),
            "visual" => Cell::Baseline(cfg, Baseline::VisualOnly),
            "visual_dual" => {
                let mut m = MethodConfig::visual_only();
                m.dual_modality = true;
                Cell::Method(with_method(&cfg, m))
            }
            "audio_visual" => Cell::Method(cfg),
            "audio_visual_dual" => {
                let mut c = cfg;
                c.method.dual_modality = true;
                Cell::Method(c)
            }
            _ => return Err(bad()),
        },
        "fusion" => match value {
            "late_fusion" => Cell::Baseline(cfg, Baseline::LateFusion),
            "ours" => Cell::Method(cfg),
            _ => return Err(bad()),
        },
        "noise" => {
            let (train, test) = value.split_once(':').ok_or_else(bad)?;
            Cell::Method(set(&cfg, &[format!("noise.train={train}"), format!("noise.test={test}")])?)
        }
        key if key.contains('.') => Cell::Method(set(&cfg, &[format!("{key}={value}")])?),
        _ => bail!("unknown axis {axis}"),
    };
    out.config().validate().with_context(|| format!("axis {axis} value {value}"))?;
    Ok(out)
}
