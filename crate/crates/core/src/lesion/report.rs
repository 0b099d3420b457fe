//! Per-case analytics export.

use serde::{Deserialize, Serialize};

use crate::case::{LOBES, PLEURAL_SPACE};
use crate::exec::Execution;
use crate::volume::{HuStat, LabelVolume, ScalarVolume};

use super::{
    assign_region, connected_components_3d_with, effusion_ratio, emphysema_index, filter_min_size,
    hu_contrast, max_inplane_diameter, slice_percentile_of_max_extent, BoundingBox, Connectivity,
    LesionError, LesionInstance, Result, DEFAULT_MIN_VOLUME_ML,
};

/// Label vocabulary and measurement knobs for lesion analytics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticsConfig {
    pub connectivity: Connectivity,
    pub min_volume_ml: f64,
    pub hu_stat: HuStat,
    /// Lesion labels considered when looking for the largest lesion.
    pub target_labels: Vec<String>,
    /// Lesion labels counted as discrete nodules/masses.
    pub nodule_labels: Vec<String>,
    pub emphysema_label: String,
    pub effusion_label: String,
    /// Organ labels whose union is the lung.
    pub lung_regions: Vec<String>,
    /// Organ labels whose union is the effusion reference region.
    pub effusion_regions: Vec<String>,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        let lobes: Vec<String> = LOBES.iter().map(|s| s.to_string()).collect();
        let mut effusion_regions = lobes.clone();
        effusion_regions.push(PLEURAL_SPACE.to_string());
        AnalyticsConfig {
            connectivity: Connectivity::default(),
            min_volume_ml: DEFAULT_MIN_VOLUME_ML,
            hu_stat: HuStat::default(),
            target_labels: ["nodule", "mass", "ground-glass opacity", "consolidation", "atelectasis"]
                .map(String::from)
                .to_vec(),
            nodule_labels: vec!["nodule".into(), "mass".into()],
            emphysema_label: "emphysema".into(),
            effusion_label: "pleural effusion".into(),
            lung_regions: lobes,
            effusion_regions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub id: usize,
    pub volume_ml: f64,
    pub diameter_mm: f64,
    pub region: String,
    pub slice_percentile: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseIndices {
    pub emphysema_index: Option<f64>,
    pub effusion_ratio: Option<f64>,
    /// Largest target lesion against lung tissue outside every lesion.
    pub hu_contrast: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionReport {
    /// Target-lesion instances, largest first.
    pub instances: Vec<InstanceSummary>,
    pub nodule_count: usize,
    pub indices: CaseIndices,
}

/// Connected components of the union of `labels`, size-filtered.
pub fn instances_of(
    lesions: &LabelVolume,
    labels: &[String],
    cfg: &AnalyticsConfig,
    exec: Execution,
) -> Result<Vec<LesionInstance>> {
    let mask = lesions.mask_of_names(labels);
    filter_min_size(connected_components_3d_with(&mask, cfg.connectivity, exec), cfg.min_volume_ml)
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(
            LesionError::EmptyLung
            | LesionError::EmptyRegion
            | LesionError::EmptyLesion
            | LesionError::NoNormalTissue,
        ) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn analyze_lesions(
    hu: &ScalarVolume,
    organs: &LabelVolume,
    lesions: &LabelVolume,
    cfg: &AnalyticsConfig,
    exec: Execution,
) -> Result<LesionReport> {
    crate::volume::check_geometry(
        (hu.dims(), hu.spacing()),
        (organs.dims(), organs.spacing()),
        "volume vs organs",
    )?;
    crate::volume::check_geometry(
        (hu.dims(), hu.spacing()),
        (lesions.dims(), lesions.spacing()),
        "volume vs lesions",
    )?;
    let targets = instances_of(lesions, &cfg.target_labels, cfg, exec)?;
    let mut instances = Vec::with_capacity(targets.len());
    for inst in &targets {
        instances.push(InstanceSummary {
            id: inst.id,
            volume_ml: inst.physical_volume_ml,
            diameter_mm: max_inplane_diameter(inst),
            region: assign_region(inst, organs)?,
            slice_percentile: slice_percentile_of_max_extent(&inst.to_mask())?,
            bbox: inst.bbox,
        });
    }
    let nodule_count = instances_of(lesions, &cfg.nodule_labels, cfg, exec)?.len();

    let lung = organs.mask_of_names(&cfg.lung_regions);
    let emph = lesions.mask_of_names(&[&cfg.emphysema_label]);
    let eff = lesions.mask_of_names(&[&cfg.effusion_label]);
    let region = organs.mask_of_names(&cfg.effusion_regions);
    let contrast = match targets.first() {
        Some(largest) => optional(hu_contrast(
            hu,
            &largest.to_mask(),
            &lung,
            &lesions.foreground(),
            cfg.hu_stat,
        ))?,
        None => None,
    };
    Ok(LesionReport {
        instances,
        nodule_count,
        indices: CaseIndices {
            emphysema_index: optional(emphysema_index(&emph, &lung))?,
            effusion_ratio: optional(effusion_ratio(&eff, &region))?,
            hu_contrast: contrast,
        },
    })
}
