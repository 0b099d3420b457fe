//! Case bundles: one CT volume with its organ and lesion label volumes,
//! the report-level disease labels and an optional feature field.
//!
//! On disk a case is a directory holding `case.json` plus the volumes it
//! names (paths relative to the directory).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::volume::{self, LabelVolume, ScalarVolume, VolumeError, VolumeFormat};

/// The five lobes used for chest localisation, in option order.
pub const LOBES: [&str; 5] = [
    "left upper lobe",
    "left lower lobe",
    "right upper lobe",
    "right middle lobe",
    "right lower lobe",
];

pub const PLEURAL_SPACE: &str = "pleural space";

pub const CASE_FILE: &str = "case.json";

#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("case {case}: {source}")]
    Volume {
        case: String,
        source: VolumeError,
    },
}

pub type Result<T, E = CaseError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub case_id: String,
    /// Source dataset the case came from.
    pub source: String,
    /// Report-level disease labels.
    #[serde(default)]
    pub labels: BTreeSet<String>,
    pub volume: PathBuf,
    pub organs: PathBuf,
    pub lesions: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Case {
    pub meta: CaseMeta,
    pub hu: ScalarVolume,
    pub organs: LabelVolume,
    pub lesions: LabelVolume,
}

impl Case {
    pub fn id(&self) -> &str {
        &self.meta.case_id
    }

    /// Mask of all lobes present in the organ volume.
    pub fn lung_mask(&self) -> volume::BinaryMask {
        self.organs.mask_of_names(&LOBES)
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CaseError + '_ {
    move |source| CaseError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_meta(dir: &Path) -> Result<CaseMeta> {
    let path = dir.join(CASE_FILE);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    serde_json::from_str(&text).map_err(|source| CaseError::Json { path, source })
}

/// Loads only the label volumes; used by generators that never read HU.
pub fn load_labels_only(dir: &Path, meta: &CaseMeta) -> Result<(LabelVolume, LabelVolume)> {
    let wrap = |source| CaseError::Volume {
        case: meta.case_id.clone(),
        source,
    };
    let organs_path = dir.join(&meta.organs);
    let lesions_path = dir.join(&meta.lesions);
    let organs = volume::load_labels(&organs_path, VolumeFormat::detect(&organs_path)).map_err(wrap)?;
    let lesions = volume::load_labels(&lesions_path, VolumeFormat::detect(&lesions_path)).map_err(wrap)?;
    Ok((organs, lesions))
}

pub fn load_case(dir: &Path) -> Result<Case> {
    let meta = read_meta(dir)?;
    let (organs, lesions) = load_labels_only(dir, &meta)?;
    let vol_path = dir.join(&meta.volume);
    let hu = volume::load_volume(&vol_path, VolumeFormat::detect(&vol_path)).map_err(|source| {
        CaseError::Volume {
            case: meta.case_id.clone(),
            source,
        }
    })?;
    Ok(Case {
        meta,
        hu,
        organs,
        lesions,
    })
}

/// Writes a case in raw-with-sidecar form, rewriting the volume paths in
/// `meta` to the files produced.
pub fn save_case(dir: &Path, case: &Case) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let wrap = |source| CaseError::Volume {
        case: case.meta.case_id.clone(),
        source,
    };
    let mut meta = case.meta.clone();
    meta.volume = "ct.f32".into();
    meta.organs = "organs.f32".into();
    meta.lesions = "lesions.f32".into();
    volume::save_raw(&case.hu, &dir.join(&meta.volume)).map_err(wrap)?;
    volume::save_labels_raw(&case.organs, &dir.join(&meta.organs)).map_err(wrap)?;
    volume::save_labels_raw(&case.lesions, &dir.join(&meta.lesions)).map_err(wrap)?;
    write_meta(dir, &meta)
}

pub fn write_meta(dir: &Path, meta: &CaseMeta) -> Result<()> {
    let path = dir.join(CASE_FILE);
    let text = serde_json::to_string_pretty(meta).map_err(|source| CaseError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(io(&path))
}

/// Case directories directly under `root` that hold a `case.json`, sorted
/// by path so every run visits them in the same order.
pub fn list_case_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = vec![];
    for entry in fs::read_dir(root).map_err(io(root))? {
        let entry = entry.map_err(io(root))?;
        let p = entry.path();
        if p.join(CASE_FILE).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}
