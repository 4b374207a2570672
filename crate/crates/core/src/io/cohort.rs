//! Cohort directory layout: one directory per subject holding
//! `t1.vol`, `t1c.vol`, `t2.vol`, `flair.vol` and optionally `labels.vol`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::volume_file::{load_volume, save_volume};
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Modality, MultiModalScan};

pub const LABELS_FILE: &str = "labels.vol";
pub const SPLIT_FILE: &str = "split.json";

fn modality_path(dir: &Path, m: Modality) -> PathBuf {
    dir.join(format!("{}.vol", m.file_stem()))
}

/// Write the scan into `root/<subject_id>/`.
pub fn save_scan(scan: &MultiModalScan, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&scan.subject_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for m in Modality::ALL {
        save_volume(scan.modality(m), modality_path(&dir, m))?;
    }
    if let Some(l) = &scan.labels {
        save_volume(l.volume(), dir.join(LABELS_FILE))?;
    }
    Ok(dir)
}

/// Load a subject directory; the subject id is the directory name.
pub fn load_scan(dir: &Path) -> Result<MultiModalScan> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("{} has no usable subject name", dir.display())))?
        .to_string();
    let vols = [
        load_volume(modality_path(dir, Modality::T1))?,
        load_volume(modality_path(dir, Modality::T1c))?,
        load_volume(modality_path(dir, Modality::T2))?,
        load_volume(modality_path(dir, Modality::Flair))?,
    ];
    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() {
        Some(LabelVolume::new(load_volume(&labels_path)?)?)
    } else {
        None
    };
    MultiModalScan::new(id, vols, labels)
}

/// Subject directories under `root` (those containing a FLAIR volume), sorted.
pub fn list_subjects(root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && modality_path(&path, Modality::Flair).exists() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                ids.push(name.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::invalid(format!("{} contains no subject directories", root.display())));
    }
    Ok(ids)
}

pub fn load_subjects(root: &Path, ids: &[String]) -> Result<Vec<MultiModalScan>> {
    ids.iter().map(|id| load_scan(&root.join(id))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub fraction: f64,
    pub seed: u64,
    pub train: Vec<String>,
    pub dev: Vec<String>,
}

impl CohortSplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("split serialises");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}
