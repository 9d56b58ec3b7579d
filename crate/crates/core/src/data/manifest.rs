//! Dataset manifests and the causal-pair dataset builder.
//!
//! On disk a manifest is line-delimited JSON: the first line is the header
//! object, every following line one record. Inline arrays use shortest
//! round-trip decimal text, so `read(write(m)) == m` bit for bit. A record
//! may instead reference a little-endian `f64` sidecar file through
//! `x_file` (path relative to the manifest).

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::sample::{DataMode, Sample};
use super::scene::{generate_scene, SceneConfig};
use super::treatment::{apply_treatment, TreatmentSpec};
use crate::error::{domain, Result, TltError};
use crate::seed;

pub const MANIFEST_FORMAT: &str = "tlt-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub mode: DataMode,
    pub treated_fraction: f64,
    pub flip_rate: f64,
    /// Number of treatment labels flipped by [`flip_treatments`].
    pub flip_count: usize,
    pub seed: u64,
    pub planted_ate: Option<f64>,
    pub treatment: Option<TreatmentSpec>,
    pub records: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    #[serde(rename = "K")]
    num_classes: usize,
    mode: DataMode,
    treated_fraction: f64,
    flip_rate: f64,
    flip_count: usize,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    planted_ate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    treatment: Option<TreatmentSpec>,
    num_records: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x_file: Option<String>,
    y: usize,
    t: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<u8>>,
}

pub fn empirical_treated_fraction(records: &[Sample]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|s| f64::from(s.t)).sum::<f64>() / records.len() as f64
}

impl DatasetManifest {
    pub fn new(
        num_classes: usize,
        mode: DataMode,
        seed: u64,
        treatment: Option<TreatmentSpec>,
        records: Vec<Sample>,
    ) -> Self {
        Self {
            num_classes,
            mode,
            treated_fraction: empirical_treated_fraction(&records),
            flip_rate: 0.0,
            flip_count: 0,
            seed,
            planted_ate: None,
            treatment,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Copy holding only the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        self.with_records(indices.iter().map(|i| self.records[*i].clone()).collect())
    }

    /// Copy of the header metadata around a new record list.
    pub fn with_records(&self, records: Vec<Sample>) -> DatasetManifest {
        DatasetManifest {
            num_classes: self.num_classes,
            mode: self.mode,
            treated_fraction: empirical_treated_fraction(&records),
            flip_rate: self.flip_rate,
            flip_count: self.flip_count,
            seed: self.seed,
            planted_ate: self.planted_ate,
            treatment: self.treatment,
            records,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            r.validate(self.num_classes)?;
            if r.mode() != self.mode {
                return domain(format!("record {} does not match manifest mode", r.id));
            }
            if !ids.insert(r.id.as_str()) {
                return domain(format!("duplicate record id {}", r.id));
            }
        }
        if !self.records.is_empty() {
            let emp = empirical_treated_fraction(&self.records);
            if (emp - self.treated_fraction).abs() > 1.0 / self.records.len() as f64 {
                return domain(format!(
                    "treated_fraction {} disagrees with empirical {emp}",
                    self.treated_fraction
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return domain(format!("flip rate {} outside [0, 1]", self.flip_rate));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            num_classes: self.num_classes,
            mode: self.mode,
            treated_fraction: self.treated_fraction,
            flip_rate: self.flip_rate,
            flip_count: self.flip_count,
            seed: self.seed,
            planted_ate: self.planted_ate,
            treatment: self.treatment,
            num_records: self.records.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for s in &self.records {
            let rec = Record {
                id: s.id.clone(),
                shape: s.shape.clone(),
                x: Some(s.x.clone()),
                x_file: None,
                y: s.y,
                t: s.t,
                mask: s.mask.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        let mut lines = file.lines();
        let first = lines
            .next()
            .ok_or_else(|| TltError::Format(format!("{}: empty manifest", path.display())))??;
        let header: Header = serde_json::from_str(&first)?;
        if header.format != MANIFEST_FORMAT {
            return Err(TltError::Format(format!(
                "{}: unsupported manifest format '{}'",
                path.display(),
                header.format
            )));
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut records = Vec::with_capacity(header.num_records);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)?;
            let x = match (rec.x, rec.x_file) {
                (Some(x), _) => x,
                (None, Some(file)) => read_f64_sidecar(&base.join(file))?,
                (None, None) => {
                    return Err(TltError::Format(format!("record {} carries no input", rec.id)))
                }
            };
            records.push(Sample { id: rec.id, shape: rec.shape, x, y: rec.y, t: rec.t, mask: rec.mask });
        }
        if records.len() != header.num_records {
            return Err(TltError::Format(format!(
                "{}: header declares {} records, found {}",
                path.display(),
                header.num_records,
                records.len()
            )));
        }
        let manifest = DatasetManifest {
            num_classes: header.num_classes,
            mode: header.mode,
            treated_fraction: header.treated_fraction,
            flip_rate: header.flip_rate,
            flip_count: header.flip_count,
            seed: header.seed,
            planted_ate: header.planted_ate,
            treatment: header.treatment,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Reads a raw little-endian `f64` array.
pub fn read_f64_sidecar(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(TltError::Format(format!("{}: length not a multiple of 8", path.display())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Writes a raw little-endian `f64` array.
pub fn write_f64_sidecar(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Flips every record's treatment independently with probability `rate`.
pub fn flip_treatments(d: &DatasetManifest, rate: f64, rng: &mut seed::Rng) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&rate) {
        return domain(format!("flip rate {rate} outside [0, 1]"));
    }
    let mut out = d.clone();
    let mut flips = 0;
    for r in out.records.iter_mut() {
        if rng.random::<f64>() < rate {
            r.t = 1 - r.t;
            flips += 1;
        }
    }
    out.flip_rate = rate;
    out.flip_count = flips;
    out.treated_fraction = empirical_treated_fraction(&out.records);
    Ok(out)
}

/// Builder settings for an image causal-pair dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalPairConfig {
    pub scene: SceneConfig,
    pub num_samples: usize,
    /// Treatment applied to the treated subset; `None` leaves every sample clean.
    pub treatment: Option<TreatmentSpec>,
    pub treated_fraction: f64,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for CausalPairConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            num_samples: 1000,
            treatment: None,
            treated_fraction: 0.5,
            seed: 0,
            id_prefix: "s".into(),
        }
    }
}

/// Picks exactly `floor(n * fraction)` treated indices, spread evenly over a
/// class-grouped shuffled order so each class is treated in proportion.
fn stratified_treated(labels: &[usize], num_classes: usize, fraction: f64, rng: &mut seed::Rng) -> Vec<bool> {
    let mut order: Vec<usize> = Vec::with_capacity(labels.len());
    for c in 0..num_classes {
        let mut group: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == c).collect();
        group.shuffle(rng);
        order.extend(group);
    }
    let mut treated = vec![false; labels.len()];
    for (j, idx) in order.iter().enumerate() {
        let before = (j as f64 * fraction).floor();
        let after = ((j + 1) as f64 * fraction).floor();
        treated[*idx] = after > before;
    }
    treated
}

/// Renders `num_samples` class-balanced scenes and treats a stratified
/// `treated_fraction` of them.
pub fn build_causal_pairs(cfg: &CausalPairConfig) -> Result<DatasetManifest> {
    cfg.scene.validate()?;
    if !(0.0..=1.0).contains(&cfg.treated_fraction) {
        return domain(format!("treated fraction {} outside [0, 1]", cfg.treated_fraction));
    }
    let k = cfg.scene.num_classes;
    let labels: Vec<usize> = (0..cfg.num_samples).map(|i| i % k).collect();
    let mut assign_rng = seed::rng(seed::derive(cfg.seed, &["assign".into()]));
    let treated = match cfg.treatment {
        Some(_) => stratified_treated(&labels, k, cfg.treated_fraction, &mut assign_rng),
        None => vec![false; cfg.num_samples],
    };
    let mut records = Vec::with_capacity(cfg.num_samples);
    for (i, (&y, &is_treated)) in labels.iter().zip(&treated).enumerate() {
        let scene_seed = seed::derive(cfg.seed, &["sample".into(), i.into()]);
        let mut s = generate_scene(y, scene_seed, &cfg.scene)?;
        s.id = format!("{}-{i:06}", cfg.id_prefix);
        if is_treated {
            let spec = cfg.treatment.as_ref().expect("treated only with a treatment");
            let mut rng = seed::rng(seed::derive(scene_seed, &["treat".into()]));
            s = apply_treatment(&s, spec, &mut rng)?;
        }
        records.push(s);
    }
    Ok(DatasetManifest::new(k, DataMode::Image, cfg.seed, cfg.treatment, records))
}

/// Renders each scene twice: untreated and treated. Used for matched-pair
/// feature comparisons.
pub fn build_matched_pairs(cfg: &CausalPairConfig) -> Result<Vec<(Sample, Sample)>> {
    let spec = cfg
        .treatment
        .ok_or_else(|| TltError::Precondition("matched pairs need a treatment".into()))?;
    let k = cfg.scene.num_classes;
    (0..cfg.num_samples)
        .map(|i| {
            let scene_seed = seed::derive(cfg.seed, &["sample".into(), i.into()]);
            let mut s = generate_scene(i % k, scene_seed, &cfg.scene)?;
            s.id = format!("{}-{i:06}", cfg.id_prefix);
            let mut rng = seed::rng(seed::derive(scene_seed, &["treat".into()]));
            let treated = apply_treatment(&s, &spec, &mut rng)?;
            Ok((s, treated))
        })
        .collect()
}

/// Splits record indices into `k` folds stratified by the `(y, t)` cell.
pub fn stratified_folds(d: &DatasetManifest, k: usize, seed_value: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > d.len() {
        return domain(format!("cannot split {} records into {k} folds", d.len()));
    }
    let mut rng = seed::rng(seed::derive(seed_value, &["folds".into()]));
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for y in 0..d.num_classes {
        for t in 0..2u8 {
            let mut cell: Vec<usize> =
                (0..d.len()).filter(|i| d.records[*i].y == y && d.records[*i].t == t).collect();
            cell.shuffle(&mut rng);
            for idx in cell {
                folds[next % k].push(idx);
                next += 1;
            }
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}
