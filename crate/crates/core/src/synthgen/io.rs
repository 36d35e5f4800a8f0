//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json        generator version, seed and the full spec
//! <dir>/source_visual.bin    f32 little-endian, [video, clip, dim]
//! <dir>/source_audio.bin
//! <dir>/target_visual.bin
//! <dir>/target_audio.bin
//! <dir>/labels.csv           id,domain,label,cluster,audible
//! ```
//!
//! Multi-label entries in `labels.csv` list the active classes separated by
//! `;`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Domain, DomainSpec, Label, Truth, VideoSample};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const LABELS: &str = "labels.csv";
pub const ARRAY_FILES: [&str; 4] = [
    "source_visual.bin",
    "source_audio.bin",
    "target_visual.bin",
    "target_audio.bin",
];

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    generator_version: String,
    seed: u64,
    spec: DomainSpec,
}

/// Writes `values` as little-endian `f32`.
pub fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "length is not a multiple of 4 bytes"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn label_field(label: &Label) -> String {
    match label {
        Label::Single(y) => y.to_string(),
        Label::Multi(_) => label
            .classes()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";"),
    }
}

fn parse_label(field: &str, spec: &DomainSpec, path: &Path) -> Result<Label> {
    let bad = |what: &str| Error::format(path, format!("bad label {field:?}: {what}"));
    if spec.multilabel {
        let mut v = vec![false; spec.num_classes];
        for part in field.split(';').filter(|p| !p.is_empty()) {
            let c: usize = part.parse().map_err(|_| bad("not an integer"))?;
            *v.get_mut(c).ok_or_else(|| bad("class out of range"))? = true;
        }
        Ok(Label::Multi(v))
    } else {
        let y: usize = field.parse().map_err(|_| bad("not an integer"))?;
        if y >= spec.num_classes {
            return Err(bad("class out of range"));
        }
        Ok(Label::Single(y))
    }
}

/// Writes `ds` into `dir`, creating it if needed.
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        generator_version: ds.version.clone(),
        seed: ds.spec.seed,
        spec: ds.spec.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    for (domain, videos) in [(Domain::Source, &ds.source), (Domain::Target, &ds.target)] {
        let prefix = domain.as_str();
        write_f32(
            &dir.join(format!("{prefix}_visual.bin")),
            videos.iter().flat_map(|v| v.visual.iter().copied()),
        )?;
        write_f32(
            &dir.join(format!("{prefix}_audio.bin")),
            videos.iter().flat_map(|v| v.audio.iter().copied()),
        )?;
    }

    let path = dir.join(LABELS);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(dir.join(LABELS), e.to_string());
    w.write_record(["id", "domain", "label", "cluster", "audible"]).map_err(csv_err)?;
    for v in ds.source.iter().chain(&ds.target) {
        w.write_record([
            v.id.as_str(),
            v.domain.as_str(),
            &label_field(&v.truth.label),
            &v.truth.cluster.to_string(),
            if v.truth.audible { "1" } else { "0" },
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads a dataset previously written by [`save`].
pub fn load(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let spec = manifest.spec;
    spec.validate()?;

    let path = dir.join(LABELS);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut rows: Vec<(String, Domain, Truth)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(&path, e.to_string()))?;
        if record.len() != 5 {
            return Err(Error::format(&path, "expected 5 columns"));
        }
        let domain = match &record[1] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(Error::format(&path, format!("unknown domain {other:?}"))),
        };
        let label = parse_label(&record[2], &spec, &path)?;
        let cluster = record[3]
            .parse()
            .map_err(|_| Error::format(&path, format!("bad cluster {:?}", &record[3])))?;
        let audible = match &record[4] {
            "1" => true,
            "0" => false,
            other => return Err(Error::format(&path, format!("bad audible flag {other:?}"))),
        };
        rows.push((record[0].to_string(), domain, Truth { label, cluster, audible }));
    }

    let build = |domain: Domain| -> Result<Vec<VideoSample>> {
        let prefix = domain.as_str();
        let visual_path = dir.join(format!("{prefix}_visual.bin"));
        let audio_path = dir.join(format!("{prefix}_audio.bin"));
        let visual = read_f32(&visual_path)?;
        let audio = read_f32(&audio_path)?;
        let count = spec.count(domain);
        let (vs, as_) = (spec.clips * spec.visual_dim, spec.clips * spec.audio_dim);
        if visual.len() != count * vs {
            return Err(Error::format(visual_path, "array size does not match the manifest"));
        }
        if audio.len() != count * as_ {
            return Err(Error::format(audio_path, "array size does not match the manifest"));
        }
        let mut truths = rows.iter().filter(|r| r.1 == domain);
        (0..count)
            .map(|i| {
                let (id, _, truth) = truths
                    .next()
                    .ok_or_else(|| Error::format(dir.join(LABELS), format!("missing {prefix} rows")))?;
                Ok(VideoSample::new(
                    id.clone(),
                    domain,
                    visual[i * vs..(i + 1) * vs].to_vec(),
                    audio[i * as_..(i + 1) * as_].to_vec(),
                    truth.clone(),
                ))
            })
            .collect()
    };
    let source = build(Domain::Source)?;
    let target = build(Domain::Target)?;
    if rows.len() != source.len() + target.len() {
        return Err(Error::format(dir.join(LABELS), "row count does not match the manifest"));
    }
    Ok(Dataset {
        spec,
        source,
        target,
        version: manifest.generator_version,
    })
}

/// SHA-256 over every dataset file, in a fixed order.
pub fn digest(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let files: Vec<PathBuf> = std::iter::once(MANIFEST)
        .chain(ARRAY_FILES)
        .chain(std::iter::once(LABELS))
        .map(|f| dir.join(f))
        .collect();
    for path in files {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}
