use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{drf_class, generate_phantom, simulate_low_dose, PhantomSpec, VolumePair, DRF_LEVELS};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowDoseFile {
    pub drf: u32,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub id: usize,
    pub seed: u64,
    pub split: Split,
    pub standard: String,
    pub low_dose: Vec<LowDoseFile>,
}

/// Dataset description stored next to the raw volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub extent: usize,
    /// Largest standard-dose voxel over the whole dataset; the
    /// normalization constant.
    pub max_intensity: f64,
    pub counts_scale: f64,
    pub volumes: Vec<VolumeEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.extent == 0 {
            return Err(Error::invalid("dataset extent must be positive"));
        }
        if !(self.max_intensity > 0.0 && self.max_intensity.is_finite()) {
            return Err(Error::invalid(format!(
                "normalization constant must be positive, got {}",
                self.max_intensity
            )));
        }
        let mut seen = HashSet::new();
        for v in &self.volumes {
            for name in std::iter::once(&v.standard).chain(v.low_dose.iter().map(|l| &l.file)) {
                if name.is_empty() || name.contains(['/', '\\']) || name == MANIFEST_FILE {
                    return Err(Error::invalid(format!("invalid volume file name {name:?}")));
                }
                if !seen.insert(name.as_str()) {
                    return Err(Error::invalid(format!("duplicate volume file name {name:?}")));
                }
            }
            for l in &v.low_dose {
                drf_class(l.drf)?;
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.volumes.len()).filter(|&i| self.volumes[i].split == split).collect()
    }
}

/// A dataset held in memory, volumes in original units.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub standard: Vec<Tensor>,
    /// Aligned with each entry's `low_dose` list.
    pub low_dose: Vec<Vec<Tensor>>,
}

impl Dataset {
    pub fn low_dose(&self, volume: usize, drf: u32) -> Result<&Tensor> {
        let entry = self
            .manifest
            .volumes
            .get(volume)
            .ok_or_else(|| Error::invalid(format!("no volume {volume}")))?;
        let k = entry
            .low_dose
            .iter()
            .position(|l| l.drf == drf)
            .ok_or_else(|| Error::invalid(format!("volume {} has no DRF {drf} scan", entry.id)))?;
        Ok(&self.low_dose[volume][k])
    }

    /// Paired example in original units.
    pub fn pair(&self, volume: usize, drf: u32) -> Result<VolumePair> {
        let x = self.low_dose(volume, drf)?.clone();
        let entry = &self.manifest.volumes[volume];
        Ok(VolumePair {
            x,
            y_s: self.standard[volume].clone(),
            y_c: drf_class(drf)?,
            drf,
            seed: entry.seed,
        })
    }

    /// Same pair scaled into `[0, 1]`.
    pub fn normalized_pair(&self, volume: usize, drf: u32) -> Result<VolumePair> {
        let p = self.pair(volume, drf)?;
        let max = self.manifest.max_intensity;
        Ok(VolumePair {
            x: normalize(&p.x, max)?,
            y_s: normalize(&p.y_s, max)?,
            ..p
        })
    }
}

/// How to synthesize a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetPlan {
    pub phantom: PhantomSpec,
    pub seed: u64,
    /// Expected counts per unit uptake at full dose.
    pub counts_scale: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub drfs: Vec<u32>,
}

impl Default for DatasetPlan {
    fn default() -> Self {
        DatasetPlan {
            phantom: PhantomSpec::default(),
            seed: 0,
            counts_scale: 100.0,
            train: 64,
            val: 16,
            test: 16,
            drfs: DRF_LEVELS.to_vec(),
        }
    }
}

/// Generates phantoms and their simulated low-dose scans. Each volume
/// draws from its own stream derived from the plan seed and its index.
pub fn generate_dataset(plan: &DatasetPlan) -> Result<Dataset> {
    plan.phantom.validate()?;
    if plan.drfs.is_empty() {
        return Err(Error::config("dataset needs at least one DRF"));
    }
    let mut drfs = HashSet::new();
    for &d in &plan.drfs {
        drf_class(d)?;
        if !drfs.insert(d) {
            return Err(Error::config(format!("DRF {d} listed twice")));
        }
    }
    let root = Rng::new(plan.seed);
    let splits = std::iter::repeat_n(Split::Train, plan.train)
        .chain(std::iter::repeat_n(Split::Val, plan.val))
        .chain(std::iter::repeat_n(Split::Test, plan.test));
    let mut entries = Vec::new();
    let mut standard = Vec::new();
    let mut low_dose = Vec::new();
    for (id, split) in splits.enumerate() {
        // Masked to 63 bits: the manifest format stores signed integers.
        let seed = root.split(id as u64).seed() & i64::MAX as u64;
        let vrng = Rng::new(seed);
        let y = generate_phantom(&plan.phantom, &mut vrng.split(0))?;
        let mut scans = Vec::with_capacity(plan.drfs.len());
        let mut files = Vec::with_capacity(plan.drfs.len());
        for &drf in &plan.drfs {
            scans.push(simulate_low_dose(&y, drf, plan.counts_scale, &mut vrng.split(1 + drf as u64))?);
            files.push(LowDoseFile {
                drf,
                file: format!("vol_{id:04}_l{drf}.raw"),
            });
        }
        entries.push(VolumeEntry {
            id,
            seed,
            split,
            standard: format!("vol_{id:04}_s.raw"),
            low_dose: files,
        });
        standard.push(y);
        low_dose.push(scans);
    }
    if entries.is_empty() {
        return Err(Error::config("dataset plan has no volumes"));
    }
    let max = standard
        .iter()
        .map(|t| t.max_value() as f64)
        .fold(0.0, f64::max);
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        extent: plan.phantom.extent,
        max_intensity: max,
        counts_scale: plan.counts_scale,
        volumes: entries,
    };
    manifest.validate()?;
    Ok(Dataset {
        manifest,
        standard,
        low_dose,
    })
}

fn write_volume(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_volume(path: &Path, extent: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = extent.pow(3);
    if bytes.len() != n * 4 {
        return Err(Error::format(
            path,
            format!("size mismatch: {} bytes, expected {} for extent {extent}", bytes.len(), n * 4),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(vec![1, 1, extent, extent, extent], data)
}

/// Writes every volume as raw little-endian `f32`, then the manifest.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let m = &dataset.manifest;
    m.validate()?;
    if dataset.standard.len() != m.volumes.len() || dataset.low_dose.len() != m.volumes.len() {
        return Err(Error::invalid("dataset volumes do not match the manifest"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let want = [1, 1, m.extent, m.extent, m.extent];
    for (i, entry) in m.volumes.iter().enumerate() {
        if entry.low_dose.len() != dataset.low_dose[i].len() {
            return Err(Error::invalid(format!("volume {} scan count mismatch", entry.id)));
        }
        let files = std::iter::once((&entry.standard, &dataset.standard[i]))
            .chain(entry.low_dose.iter().map(|l| &l.file).zip(&dataset.low_dose[i]));
        for (name, t) in files {
            if t.shape() != want {
                return Err(Error::shape(format!("{name}: shape {:?}, expected {want:?}", t.shape())));
            }
            write_volume(&dir.join(name), t)?;
        }
    }
    let text = toml::to_string(m).map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: toml::Table = text.parse().map_err(|e| Error::format(&path, format!("{e}")))?;
    match raw.get("format_version").and_then(|v| v.as_integer()) {
        Some(v) if v == FORMAT_VERSION as i64 => {}
        found => {
            return Err(Error::Version {
                path,
                found: found.map_or("none".into(), |v| v.to_string()),
                expected: FORMAT_VERSION.to_string(),
            })
        }
    }
    let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::format(&path, format!("{e}")))?;
    m.validate()?;
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut standard = Vec::with_capacity(manifest.volumes.len());
    let mut low_dose = Vec::with_capacity(manifest.volumes.len());
    for entry in &manifest.volumes {
        standard.push(read_volume(&dir.join(&entry.standard), manifest.extent)?);
        low_dose.push(
            entry
                .low_dose
                .iter()
                .map(|l| read_volume(&dir.join(&l.file), manifest.extent))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(Dataset {
        manifest,
        standard,
        low_dose,
    })
}

fn check_max(max: f64) -> Result<()> {
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::invalid(format!("normalization constant must be positive, got {max}")));
    }
    Ok(())
}

/// Divides by the dataset maximum and clamps into `[0, 1]`.
pub fn normalize(volume: &Tensor, max: f64) -> Result<Tensor> {
    check_max(max)?;
    Ok(volume.map(|v| (v as f64 / max).clamp(0.0, 1.0) as f32))
}

/// Back to original units.
pub fn denormalize(volume: &Tensor, max: f64) -> Result<Tensor> {
    check_max(max)?;
    Ok(volume.map(|v| (v as f64 * max) as f32))
}
