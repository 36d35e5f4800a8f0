//! Command-line harness: dataset generation, training, evaluation, ablation
//! grids and report tables.
//!
//! Everything is written under one output root (`--out`, or the
//! `AUDIOADAPT_OUT` environment variable, default `out`):
//!
//! ```text
//! data/<name>/stream<i>/      generated datasets
//! runs/<run id>/              config.toml, record.json, metrics.csv,
//!                             metrics.jsonl, analysis.csv, checkpoints/
//! tables/<axis>.csv           one row per grid value and seed
//! report/<axis>.csv           per-value means and standard deviations
//! ```

pub mod ablate;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use audioadapt::config::ExperimentConfig;
use audioadapt::eval::{tnr_absent, MetricsReport};
use audioadapt::labels::Provenance;
use audioadapt::pipeline::{generate_streams, load_models, save_models, Session};
use audioadapt::synthgen::{io, Domain, Label};

use ablate::Cell;

#[derive(Debug, Parser)]
#[command(name = "audioadapt", version, about = "Audio-adaptive activity recognition experiments")]
pub struct Cli {
    /// Output root.
    #[arg(long, global = true, env = "AUDIOADAPT_OUT", default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and save the datasets a config describes.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory name under data/ (default: config hash and seed).
        #[arg(long)]
        name: Option<String>,
    },
    /// Train the configured method and write a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run id (default: config hash and seed).
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Re-evaluate a trained run from its checkpoints.
    Eval {
        #[arg(long)]
        run_id: String,
    },
    /// Run an ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Axis name, or any config key such as loss.eta.
        #[arg(long)]
        axis: String,
        /// Comma-separated values (default: the axis's declared grid).
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Number of seeds, counting up from the config seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Aggregate ablation tables into per-value summaries.
    Report,
    /// List ablation axes.
    Axes,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file (default: the built-in benchmark config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed; also seeds data generation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config key, e.g. --set loss.r=4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentConfig::new(0),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        cfg = cfg.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of a metrics JSON-lines file.
#[derive(Debug, Serialize)]
pub struct MetricRecord<'a> {
    pub run_id: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Summary of a training run, written as `record.json`.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub metrics: Vec<audioadapt::eval::MetricRow>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

pub fn default_id(cfg: &ExperimentConfig) -> String {
    format!("{}-s{}", cfg.hash(), cfg.seed)
}

fn jsonl(run_id: &str, cfg: &ExperimentConfig, report: &MetricsReport) -> String {
    let hash = cfg.hash();
    report
        .rows
        .iter()
        .map(|r| {
            let rec = MetricRecord {
                run_id,
                config_hash: &hash,
                seed: cfg.seed,
                metric: format!("{}.{}", r.metric, r.group),
                value: r.value,
            };
            serde_json::to_string(&rec).expect("record serializes") + "\n"
        })
        .collect()
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, name } => gen(&cli.out, &config.load()?, name),
        Command::Train { config, run_id } => train(&cli.out, &config.load()?, run_id).map(|_| ()),
        Command::Eval { run_id } => eval(&cli.out, &run_id).map(|_| ()),
        Command::Ablate {
            config,
            axis,
            values,
            seeds,
        } => ablate(&cli.out, &config.load()?, &axis, &values, seeds).map(|_| ()),
        Command::Report => report(&cli.out).map(|_| ()),
        Command::Axes => {
            for a in ablate::AXES {
                println!("{:<16} {} [{}]", a.name, a.about, a.values.join(","));
            }
            Ok(())
        }
    }
}

pub fn gen(out: &Path, cfg: &ExperimentConfig, name: Option<String>) -> Result<()> {
    let dir = out.join("data").join(name.unwrap_or_else(|| default_id(cfg)));
    for (i, ds) in generate_streams(cfg)?.iter().enumerate() {
        let stream = dir.join(format!("stream{i}"));
        io::save(ds, &stream)?;
        println!("{} {}", stream.display(), io::digest(&stream)?);
    }
    write(&dir.join("config.toml"), cfg.to_toml())
}

/// Trains, evaluates and writes a run directory; returns it.
pub fn train(out: &Path, cfg: &ExperimentConfig, run_id: Option<String>) -> Result<PathBuf> {
    let run_id = run_id.unwrap_or_else(|| default_id(cfg));
    let dir = out.join("runs").join(&run_id);
    if dir.exists() {
        bail!("run {run_id} already exists at {}", dir.display());
    }
    let clock = Instant::now();
    let mut session = Session::new(cfg)?;
    let mut timings = BTreeMap::from([("pretrain".to_string(), clock.elapsed().as_secs_f64())]);
    let result = session.run(cfg)?;
    timings.extend(result.timings.iter().cloned());

    write(&dir.join("config.toml"), cfg.to_toml())?;
    let checkpoints = dir.join("checkpoints");
    save_models(&checkpoints, &session.audio, &result.models)?;
    let metrics = dir.join("metrics.csv");
    write(&metrics, result.report.to_csv())?;
    write(&dir.join("metrics.jsonl"), jsonl(&run_id, cfg, &result.report))?;

    // Pseudo-label quality and loss traces, kept apart from the metrics.
    let mut analysis = MetricsReport::default();
    let truth: Vec<Label> = session.streams[0]
        .train
        .evaluation_truth(Domain::Target)
        .iter()
        .map(|t| t.label.clone())
        .collect();
    let truth: Vec<&Label> = truth.iter().collect();
    for (name, p) in [("audio", Provenance::Audio), ("visual", Provenance::Visual)] {
        let absent = session.absent_labels(p, cfg)?;
        analysis.push("tnr", name, tnr_absent(&absent, &truth)?);
    }
    if let Some(v) = session.audio_trace.last() {
        analysis.push("final_loss", "pretrain", *v);
    }
    let m = &result.models[0];
    if let Some(v) = m.stage1.trace.last() {
        analysis.push("final_loss", "stage1", *v);
    }
    if let Some(v) = m.stage2.as_ref().and_then(|s| s.trace.last()) {
        analysis.push("final_loss", "stage2", *v);
    }
    write(&dir.join("analysis.csv"), analysis.to_csv())?;

    let record = RunRecord {
        run_id: run_id.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        timings,
        metrics: result.report.rows.clone(),
        artifacts: BTreeMap::from([
            ("checkpoints".to_string(), checkpoints),
            ("metrics".to_string(), metrics),
        ]),
    };
    write(&dir.join("record.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    print!("{}", result.report.to_csv());
    Ok(dir)
}

/// Rebuilds a run from its checkpoints and writes `eval_metrics.csv`.
pub fn eval(out: &Path, run_id: &str) -> Result<PathBuf> {
    let dir = out.join("runs").join(run_id);
    let path = dir.join("config.toml");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    let (audio, models) = load_models(&cfg, &dir.join("checkpoints"))?;
    let session = Session::with_audio(&cfg, audio, Vec::new())?;
    let report = session.report(&session.predict(&models)?)?;
    let target = dir.join("eval_metrics.csv");
    write(&target, report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(target)
}

const TABLE_GROUPS: [&str; 7] = [
    "all",
    "silent",
    "audible",
    "bin_0_1",
    "bin_2_10",
    "bin_over_10",
    "bin_0_10",
];

fn metric_name(cfg: &ExperimentConfig) -> &'static str {
    if cfg.data.multilabel {
        "map"
    } else {
        "top1"
    }
}

/// Runs the grid and writes `tables/<axis>.csv` and `.jsonl`; returns the
/// CSV path.
pub fn ablate(out: &Path, base: &ExperimentConfig, axis: &str, values: &[String], seeds: u64) -> Result<PathBuf> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let values: Vec<String> = if values.is_empty() {
        match ablate::find(axis) {
            Some(a) => a.values.iter().map(|v| v.to_string()).collect(),
            None => bail!("axis {axis} has no declared grid; pass --values"),
        }
    } else {
        values.to_vec()
    };
    let mut cells = Vec::new();
    for seed in base.seed..base.seed + seeds {
        let seeded = base.with_seed(seed);
        for v in &values {
            cells.push((seed, v.clone(), ablate::cell(&seeded, axis, v)?));
        }
    }

    let mut sessions: Vec<Session> = Vec::new();
    let mut table = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["axis", "value", "seed", "config_hash", "metric"];
    header.extend(TABLE_GROUPS);
    table.write_record(&header)?;
    let mut lines = String::new();
    for (seed, value, cell) in cells {
        let cfg = cell.config();
        // Sessions live per seed; keep only those of the current seed.
        sessions.retain(|s| s.cfg.seed == seed);
        let idx = match sessions.iter().position(|s| s.accepts(cfg)) {
            Some(i) => i,
            None => {
                sessions.push(Session::new(cfg)?);
                sessions.len() - 1
            }
        };
        let session = &mut sessions[idx];
        let report = match &cell {
            Cell::Method(c) => session.run(c)?.report,
            Cell::Baseline(_, kind) => session.baseline(*kind)?.1,
        };
        let metric = metric_name(cfg);
        let mut row = vec![
            axis.to_string(),
            value.clone(),
            seed.to_string(),
            cfg.hash(),
            metric.to_string(),
        ];
        row.extend(
            TABLE_GROUPS
                .iter()
                .map(|g| report.get(metric, g).map(|v| v.to_string()).unwrap_or_default()),
        );
        table.write_record(&row)?;
        lines.push_str(&jsonl(&format!("{axis}={value}/s{seed}"), cfg, &report));
        eprintln!("{axis}={value} seed {seed}: {metric} {:?}", report.get(metric, "all"));
    }
    let path = out.join("tables").join(format!("{}.csv", file_stem(axis)));
    write(&path, table.into_inner()?)?;
    write(&path.with_extension("jsonl"), lines)?;
    Ok(path)
}

fn file_stem(axis: &str) -> String {
    axis.replace(['/', '\\'], "_")
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Summarizes every table under `tables/` into `report/`; returns the
/// written paths.
/// (axis, value, metric).
type Key = (String, String, String);

pub fn report(out: &Path) -> Result<Vec<PathBuf>> {
    let tables = out.join("tables");
    let mut paths: Vec<PathBuf> = fs::read_dir(&tables)
        .with_context(|| format!("reading {}", tables.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut written = Vec::new();
    for path in paths {
        let mut reader = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
        let headers = reader.headers()?.clone();
        let groups: Vec<(usize, String)> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| TABLE_GROUPS.contains(h))
            .map(|(i, h)| (i, h.to_string()))
            .collect();
        // (axis, value, metric) in first-seen order.
        let mut order: Vec<Key> = Vec::new();
        let mut samples: BTreeMap<Key, Vec<Vec<Option<f64>>>> = BTreeMap::new();
        for rec in reader.records() {
            let rec = rec?;
            let key = (rec[0].to_string(), rec[1].to_string(), rec[4].to_string());
            if !samples.contains_key(&key) {
                order.push(key.clone());
            }
            let row = groups.iter().map(|(i, _)| rec[*i].parse().ok()).collect();
            samples.entry(key).or_default().push(row);
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["axis".to_string(), "value".into(), "metric".into(), "seeds".into()];
        for (_, g) in &groups {
            header.push(format!("{g}_mean"));
            header.push(format!("{g}_std"));
        }
        w.write_record(&header)?;
        for key in order {
            let rows = &samples[&key];
            let mut out_row = vec![key.0.clone(), key.1.clone(), key.2.clone(), rows.len().to_string()];
            for j in 0..groups.len() {
                let xs: Vec<f64> = rows.iter().filter_map(|r| r[j]).collect();
                if xs.is_empty() {
                    out_row.extend([String::new(), String::new()]);
                } else {
                    let (m, s) = mean_std(&xs);
                    out_row.extend([m.to_string(), s.to_string()]);
                }
            }
            w.write_record(&out_row)?;
        }
        let target = out.join("report").join(path.file_name().expect("file"));
        write(&target, w.into_inner()?)?;
        println!("{}", target.display());
        written.push(target);
    }
    Ok(written)
}
