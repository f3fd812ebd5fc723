//! Manifests, synthetic data, PK sampling and augmentation.

mod augment;
mod image;
mod sampler;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, channel_replicate, grayscale, random_erase, AugmentConfig};
pub use image::{load_image, ImageCache, ImageTensor, NORM_MEAN, NORM_STD};
pub use sampler::{sample_pk_batch, PkBatch, SamplerConfig};
pub use synthetic::{generate_synthetic, render_identity, SyntheticConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "VIS")]
    Vis,
    #[serde(rename = "IR")]
    Ir,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Vis, Modality::Ir];

    pub fn index(self) -> usize {
        match self {
            Modality::Vis => 0,
            Modality::Ir => 1,
        }
    }

    pub fn opposite(self) -> Modality {
        match self {
            Modality::Vis => Modality::Ir,
            Modality::Ir => Modality::Vis,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Vis => "VIS",
            Modality::Ir => "IR",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "VIS" => Ok(Modality::Vis),
            "IR" => Ok(Modality::Ir),
            other => Err(Error::UnknownModality(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    /// Contiguous label in `0..num_identities`.
    pub identity: usize,
    pub modality: Modality,
    pub camera: u32,
}

/// A validated dataset catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub split: Split,
    /// `original_ids[label]` is the identity as written in the source file.
    pub original_ids: Vec<u64>,
    /// Non-fatal findings, e.g. a training identity seen in one modality only.
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct Row {
    path: String,
    identity: u64,
    modality: String,
    camera: u32,
}

impl Manifest {
    /// Build from records with raw identity labels, re-indexing them to
    /// `0..n` in ascending order of the raw label.
    pub fn from_raw(raw: Vec<(PathBuf, u64, Modality, u32)>, split: Split) -> Manifest {
        let mut ids: Vec<u64> = raw.iter().map(|r| r.1).collect();
        ids.sort_unstable();
        ids.dedup();
        let index: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let records = raw
            .into_iter()
            .map(|(image_path, id, modality, camera)| SampleRecord {
                image_path,
                identity: index[&id],
                modality,
                camera,
            })
            .collect();
        let mut m = Manifest {
            records,
            split,
            original_ids: ids,
            warnings: Vec::new(),
        };
        if split == Split::Train {
            for (label, counts) in m.per_identity_counts().iter().enumerate() {
                for modality in Modality::BOTH {
                    if counts[modality.index()] == 0 {
                        m.warnings.push(format!(
                            "identity {} has no {modality} images",
                            m.original_ids[label]
                        ));
                    }
                }
            }
        }
        m
    }

    /// Read a CSV manifest. Relative paths are resolved against the CSV's
    /// directory.
    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Manifest> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "identity", "modality", "camera"] {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: 1,
                msg: "header must be `path,identity,modality,camera`".into(),
            });
        }
        let mut raw = Vec::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })?;
            let modality: Modality = row.modality.parse()?;
            raw.push((base.join(&row.path), row.identity, modality, row.camera));
        }
        Ok(Manifest::from_raw(raw, split))
    }

    /// Write as CSV with paths relative to the CSV's directory where possible.
    /// Identities are written as their original labels.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        w.write_record(["path", "identity", "modality", "camera"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            let rel = r.image_path.strip_prefix(base).unwrap_or(&r.image_path);
            w.write_record([
                rel.to_string_lossy().as_ref(),
                &self.original_ids[r.identity].to_string(),
                &r.modality.to_string(),
                &r.camera.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.original_ids.len()
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.records
            .iter()
            .filter(|r| r.modality == modality)
            .count()
    }

    pub fn n_vis(&self) -> usize {
        self.count(Modality::Vis)
    }

    pub fn n_ir(&self) -> usize {
        self.count(Modality::Ir)
    }

    /// `[vis, ir]` record counts per identity label.
    pub fn per_identity_counts(&self) -> Vec<[usize; 2]> {
        let mut c = vec![[0usize; 2]; self.num_identities()];
        for r in &self.records {
            c[r.identity][r.modality.index()] += 1;
        }
        c
    }

    /// Records of one modality, keeping identity labels and original ids.
    pub fn filter_modality(&self, modality: Modality, split: Split) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| r.modality == modality)
                .cloned()
                .collect(),
            split,
            original_ids: self.original_ids.clone(),
            warnings: Vec::new(),
        }
    }
}

/// Read a training manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    Manifest::load(path, Split::Train)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Manifest {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}
