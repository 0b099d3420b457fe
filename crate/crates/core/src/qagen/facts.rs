//! Per-case measurements and cohort statistics feeding the generators.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::rules::RuleTables;
use super::Result;
use crate::case::{Case, LOBES};
use crate::exec::Execution;
use crate::lesion::report::{analyze_lesions, instances_of, AnalyticsConfig};
use crate::lesion::{assign_region, quantile, GradingBins, LesionError};
use crate::memory::{organ_record, OrganRecord};

pub const LEFT_LOBES: [&str; 2] = ["left upper lobe", "left lower lobe"];
pub const RIGHT_LOBES: [&str; 3] = ["right upper lobe", "right middle lobe", "right lower lobe"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LargestLesion {
    pub volume_ml: f64,
    pub diameter_mm: f64,
    pub region: String,
    pub slice_percentile: f64,
}

/// Occupancy of the two attenuation components, in mL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attenuation {
    pub ggo_ml: f64,
    pub consolidation_ml: f64,
    /// `mask` when pattern labels were present, `hu` for the HU-range fallback.
    pub method: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFacts {
    pub case_id: String,
    pub source: String,
    pub labels: BTreeSet<String>,
    pub largest: Option<LargestLesion>,
    pub nodule_count: usize,
    /// Nodule/mass instances per lobe, every lobe listed.
    pub nodules_by_lobe: BTreeMap<String, usize>,
    pub lung_ml: f64,
    pub left_ml: f64,
    pub right_ml: f64,
    pub emphysema_ml: f64,
    pub emphysema_index: Option<f64>,
    pub effusion_ml: f64,
    pub effusion_ratio: Option<f64>,
    pub hu_contrast: Option<f64>,
    pub attenuation: Option<Attenuation>,
    /// Side holding most opacity voxels, when opacity exists and one side wins.
    pub opacity_side: Option<Side>,
    pub organs: Vec<OrganRecord>,
}

fn ml(count: usize, voxel_mm3: f64) -> f64 {
    count as f64 * voxel_mm3 / 1000.0
}

/// Measures everything the generators need from one case.
pub fn case_facts(case: &Case, cfg: &AnalyticsConfig, rules: &RuleTables, exec: Execution) -> Result<CaseFacts> {
    let report = analyze_lesions(&case.hu, &case.organs, &case.lesions, cfg, exec)?;
    let vox = case.hu.spacing().voxel_mm3();
    let organs = &case.organs;
    let lesions = &case.lesions;

    let largest = report.instances.first().map(|i| LargestLesion {
        volume_ml: i.volume_ml,
        diameter_mm: i.diameter_mm,
        region: i.region.clone(),
        slice_percentile: i.slice_percentile,
    });

    let nodules = instances_of(lesions, &cfg.nodule_labels, cfg, exec)?;
    let mut nodules_by_lobe: BTreeMap<String, usize> = LOBES.iter().map(|l| (l.to_string(), 0)).collect();
    for n in &nodules {
        let r = assign_region(n, organs)?;
        if let Some(c) = nodules_by_lobe.get_mut(&r) {
            *c += 1;
        }
    }

    let lung = organs.mask_of_names(&LOBES);
    let left = organs.mask_of_names(&LEFT_LOBES);
    let right = organs.mask_of_names(&RIGHT_LOBES);
    let emph = lesions.mask_of_names(&[&cfg.emphysema_label]);
    let eff = lesions.mask_of_names(&[&cfg.effusion_label]);

    let ggo = lesions.mask_of_names(&rules.attenuation.ggo_labels);
    let cons = lesions.mask_of_names(&rules.attenuation.consolidation_labels);
    let (g, c) = (ggo.intersection_count(&lung)?, cons.intersection_count(&lung)?);
    let opacity = lesions.mask_of_names(&rules.volume_loss.opacity_labels);
    let attenuation = if g + c > 0 {
        Some(Attenuation {
            ggo_ml: ml(g, vox),
            consolidation_ml: ml(c, vox),
            method: "mask".into(),
        })
    } else {
        // no pattern masks: classify target-lesion voxels inside the lung by HU range
        let region = lesions.mask_of_names(&cfg.target_labels).and(&lung)?;
        let in_range = |r: [f64; 2], v: f64| v > r[0] && v <= r[1];
        let (mut g, mut c) = (0usize, 0usize);
        for i in region.indices() {
            let v = case.hu.data()[i] as f64;
            g += in_range(rules.attenuation.ggo_hu, v) as usize;
            c += in_range(rules.attenuation.consolidation_hu, v) as usize;
        }
        (g + c > 0).then(|| Attenuation {
            ggo_ml: ml(g, vox),
            consolidation_ml: ml(c, vox),
            method: "hu".into(),
        })
    };
    let (ol, or) = (opacity.intersection_count(&left)?, opacity.intersection_count(&right)?);
    let opacity_side = match ol.cmp(&or) {
        std::cmp::Ordering::Greater => Some(Side::Left),
        std::cmp::Ordering::Less => Some(Side::Right),
        std::cmp::Ordering::Equal => None,
    };

    let organ_names: Vec<&str> = organs.label_names().values().map(String::as_str).collect();
    let records = organ_names
        .iter()
        .filter_map(|n| organ_record(organs, &case.hu, n))
        .collect();

    Ok(CaseFacts {
        case_id: case.meta.case_id.clone(),
        source: case.meta.source.clone(),
        labels: case.meta.labels.clone(),
        largest,
        nodule_count: report.nodule_count,
        nodules_by_lobe,
        lung_ml: ml(lung.count(), vox),
        left_ml: ml(left.count(), vox),
        right_ml: ml(right.count(), vox),
        emphysema_ml: ml(emph.intersection_count(&lung)?, vox),
        emphysema_index: report.indices.emphysema_index,
        effusion_ml: ml(eff.count(), vox),
        effusion_ratio: report.indices.effusion_ratio,
        hu_contrast: report.indices.hu_contrast,
        attenuation,
        opacity_side,
        organs: records,
    })
}

/// Dataset-level references derived from all case facts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub size: usize,
    /// Upper and lower lung-volume percentiles, absent for a small cohort.
    pub lung_p_hi: Option<f64>,
    pub lung_p_lo: Option<f64>,
    /// Median left/right lung volume ratio.
    pub median_lr_ratio: Option<f64>,
    pub emphysema_bins: GradingBins,
    pub effusion_bins: GradingBins,
}

impl Cohort {
    pub fn from_facts(facts: &[CaseFacts], rules: &RuleTables) -> Result<Self> {
        let min = rules.organ_size.min_cohort;
        let lungs: Vec<f64> = facts.iter().filter(|f| f.lung_ml > 0.0).map(|f| f.lung_ml).collect();
        let pct = |p: f64| -> Result<Option<f64>> {
            if lungs.len() < min {
                return Ok(None);
            }
            Ok(Some(quantile(&lungs, p)?))
        };
        let ratios: Vec<f64> = facts
            .iter()
            .filter(|f| f.left_ml > 0.0 && f.right_ml > 0.0)
            .map(|f| f.left_ml / f.right_ml)
            .collect();
        let median_lr_ratio = if ratios.len() >= min {
            Some(quantile(&ratios, 0.5)?)
        } else {
            None
        };
        let positive = |get: fn(&CaseFacts) -> Option<f64>| -> Vec<f64> {
            facts.iter().filter_map(get).filter(|&v| v > 0.0).collect()
        };
        let emph = positive(|f| f.emphysema_index);
        let eff = positive(|f| f.effusion_ratio);
        Ok(Cohort {
            size: facts.len(),
            lung_p_hi: pct(rules.organ_size.p_hi)?,
            lung_p_lo: pct(rules.organ_size.p_lo)?,
            median_lr_ratio,
            emphysema_bins: rules.grading.emphysema.resolve(&emph, min)?,
            effusion_bins: rules.grading.effusion.resolve(&eff, min)?,
        })
    }

    pub fn require_lung_percentiles(&self, need: usize) -> std::result::Result<(f64, f64), LesionError> {
        match (self.lung_p_hi, self.lung_p_lo) {
            (Some(h), Some(l)) => Ok((h, l)),
            _ => Err(LesionError::CohortTooSmall {
                have: self.size,
                need,
            }),
        }
    }
}
