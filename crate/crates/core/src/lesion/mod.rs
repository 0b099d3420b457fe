//! Deterministic mask-derived lesion measurements: instances, sizes,
//! locations, contrasts and grading indices.

mod ccl;
mod diameter;
mod grading;
pub mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::volume::{self, BinaryMask, Dims, HuStat, LabelVolume, ScalarVolume, Spacing, VolumeError};

pub use ccl::{connected_components_3d, connected_components_3d_with, label_roots, Connectivity};
pub use diameter::{boundary_points, convex_hull, max_area_slice, max_inplane_diameter};
pub use grading::{grade, quantile, quantile_bins, quantile_sorted, BinsSpec, GradingBins};

/// Region name returned when an instance overlaps no region.
pub const UNASSIGNED: &str = "unassigned";

/// Default minimum component size in mL.
pub const DEFAULT_MIN_VOLUME_ML: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum LesionError {
    #[error("no lesion instances")]
    NoLesions,
    #[error("lesion mask is empty")]
    EmptyLesion,
    #[error("organ has no voxels outside the lesion masks")]
    NoNormalTissue,
    #[error("lung mask is empty")]
    EmptyLung,
    #[error("reference region mask is empty")]
    EmptyRegion,
    #[error("mask is empty")]
    EmptyMask,
    #[error("cohort of {have} values is too small (need {need})")]
    CohortTooSmall { have: usize, need: usize },
    #[error("cohort values are too concentrated to form distinct bins")]
    DegenerateCohort,
    #[error("invalid grading bins: {0}")]
    InvalidBins(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = LesionError> = std::result::Result<T, E>;

/// Inclusive voxel index ranges, indexed `[x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    /// Minimum corner as `(z, y, x)` for ordering.
    pub fn corner_zyx(&self) -> (usize, usize, usize) {
        (self.min[2], self.min[1], self.min[0])
    }
}

/// One connected component of a lesion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionInstance {
    pub id: usize,
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub physical_volume_ml: f64,
    pub bbox: BoundingBox,
    pub dims: Dims,
    pub spacing: Spacing,
}

impl LesionInstance {
    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask::from_indices(self.dims, self.spacing, &self.voxels)
    }
}

/// Keeps instances of at least `min_volume_ml`, order preserved.
pub fn filter_min_size(instances: Vec<LesionInstance>, min_volume_ml: f64) -> Result<Vec<LesionInstance>> {
    if !(min_volume_ml >= 0.0) {
        return Err(LesionError::InvalidArgument(format!(
            "minimum volume {min_volume_ml} must be >= 0"
        )));
    }
    Ok(instances
        .into_iter()
        .filter(|i| i.physical_volume_ml >= min_volume_ml)
        .collect())
}

/// Largest instance by physical volume, using the component ordering for ties.
pub fn largest_instance(instances: &[LesionInstance]) -> Result<&LesionInstance> {
    instances
        .iter()
        .min_by(|a, b| ccl_order(a, b))
        .ok_or(LesionError::NoLesions)
}

fn ccl_order(a: &LesionInstance, b: &LesionInstance) -> std::cmp::Ordering {
    b.physical_volume_ml
        .total_cmp(&a.physical_volume_ml)
        .then_with(|| a.bbox.corner_zyx().cmp(&b.bbox.corner_zyx()))
        .then_with(|| a.voxels[0].cmp(&b.voxels[0]))
}

/// Per-region-name overlap counts of an instance.
pub fn region_overlaps(inst: &LesionInstance, regions: &LabelVolume) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let data = regions.data();
    for &i in &inst.voxels {
        let l = data[i];
        if l != 0 {
            if let Some(name) = regions.name_of(l) {
                *counts.entry(name.to_string()).or_default() += 1;
            }
        }
    }
    counts
}

/// Region with the largest overlap ratio `|inst ∩ r| / |inst|`.
///
/// All ratios share the denominator, so the absolute-overlap tie-break
/// coincides with the ratio; remaining ties go to the lexicographically
/// smallest name. No overlap yields [`UNASSIGNED`].
pub fn assign_region(inst: &LesionInstance, regions: &LabelVolume) -> Result<String> {
    volume::check_geometry(
        (inst.dims, inst.spacing),
        (regions.dims(), regions.spacing()),
        "instance vs regions",
    )?;
    let mut best: Option<(&String, usize)> = None;
    let overlaps = region_overlaps(inst, regions);
    // BTreeMap iterates names ascending, so strict `>` keeps the smallest name
    for (name, &count) in &overlaps {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((name, count));
        }
    }
    Ok(best
        .map(|(n, _)| n.clone())
        .unwrap_or_else(|| UNASSIGNED.to_string()))
}

pub fn count_by_region(instances: &[LesionInstance], regions: &LabelVolume, query_region: &str) -> Result<usize> {
    let mut n = 0;
    for inst in instances {
        if assign_region(inst, regions)? == query_region {
            n += 1;
        }
    }
    Ok(n)
}

/// Position of the slice with the largest mask area (lowest z on ties) as a
/// percentage of scan depth: `100 z* / (D - 1)`, 0 when `D == 1`.
pub fn slice_percentile_of_max_extent(m: &BinaryMask) -> Result<f64> {
    let areas = m.slice_areas();
    let (mut best_z, mut best_a) = (0usize, 0usize);
    for (z, &a) in areas.iter().enumerate() {
        if a > best_a {
            best_z = z;
            best_a = a;
        }
    }
    if best_a == 0 {
        return Err(LesionError::EmptyMask);
    }
    let d = m.dims().nz;
    Ok(if d <= 1 {
        0.0
    } else {
        100.0 * best_z as f64 / (d - 1) as f64
    })
}

/// `stat(HU over lesion) - stat(HU over organ minus all lesions)`.
pub fn hu_contrast(
    hu: &ScalarVolume,
    lesion: &BinaryMask,
    organ: &BinaryMask,
    all_lesions: &BinaryMask,
    stat: HuStat,
) -> Result<f64> {
    let lesion_hu = match volume::hu_statistic(hu, lesion, stat) {
        Err(VolumeError::EmptyMask) => return Err(LesionError::EmptyLesion),
        other => other?,
    };
    let normal = organ.minus(all_lesions)?;
    let normal_hu = match volume::hu_statistic(hu, &normal, stat) {
        Err(VolumeError::EmptyMask) => return Err(LesionError::NoNormalTissue),
        other => other?,
    };
    Ok(lesion_hu - normal_hu)
}

fn occupancy(part: &BinaryMask, whole: &BinaryMask, empty: LesionError) -> Result<f64> {
    let denom = whole.count();
    if denom == 0 {
        return Err(empty);
    }
    Ok(part.intersection_count(whole)? as f64 / denom as f64)
}

/// `V(emph ∩ lung) / V(lung)`.
pub fn emphysema_index(emph: &BinaryMask, lung: &BinaryMask) -> Result<f64> {
    occupancy(emph, lung, LesionError::EmptyLung)
}

/// `V(eff ∩ region) / V(region)`.
pub fn effusion_ratio(eff: &BinaryMask, region: &BinaryMask) -> Result<f64> {
    occupancy(eff, region, LesionError::EmptyRegion)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d() -> Dims {
        Dims::new(10, 10, 61).unwrap()
    }

    fn inst_at(pts: &[(usize, usize, usize)]) -> LesionInstance {
        let mut v: Vec<usize> = pts.iter().map(|&(x, y, z)| d().index(x, y, z)).collect();
        v.sort_unstable();
        LesionInstance::from_voxels(0, v, d(), Spacing::unit())
    }

    fn lobes() -> LabelVolume {
        let names = BTreeMap::from([
            (1, "right lower lobe".to_string()),
            (2, "left upper lobe".to_string()),
        ]);
        let mut lv = LabelVolume::empty(d(), Spacing::unit(), names);
        for z in 0..61 {
            for y in 0..10 {
                for x in 0..10 {
                    lv.set(x, y, z, if x < 5 { 1 } else { 2 });
                }
            }
        }
        lv
    }

    #[test]
    fn filter_and_largest() {
        let sizes = [1200usize, 50, 400];
        let insts: Vec<_> = sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let mut i = inst_at(&[(0, 0, k)]);
                i.physical_volume_ml = n as f64 / 1000.0;
                i
            })
            .collect();
        let kept = filter_min_size(insts.clone(), 0.1).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].physical_volume_ml, 1.2);
        assert_eq!(kept[1].physical_volume_ml, 0.4);
        assert_eq!(filter_min_size(insts.clone(), 0.0).unwrap(), insts);
        assert!(filter_min_size(insts, -1.0).is_err());
        assert!(matches!(largest_instance(&[]), Err(LesionError::NoLesions)));
    }

    #[test]
    fn largest_tie_prefers_lower_z() {
        let a = inst_at(&[(0, 0, 9), (1, 0, 9)]);
        let b = inst_at(&[(0, 0, 5), (1, 0, 5)]);
        let pair = [a, b];
        assert_eq!(largest_instance(&pair).unwrap().bbox.min[2], 5);
    }

    #[test]
    fn region_assignment() {
        let inside = inst_at(&[(1, 1, 3), (2, 1, 3)]);
        assert_eq!(assign_region(&inside, &lobes()).unwrap(), "right lower lobe");
        let split: Vec<_> = (2..7).map(|x| (x, 2, 4)).chain([(3, 3, 4)]).collect();
        // x in 2..5 -> rll (4 voxels with (3,3)), x in 5..7 -> lul (2 voxels)
        assert_eq!(assign_region(&inst_at(&split), &lobes()).unwrap(), "right lower lobe");
        let even: Vec<_> = (3..7).map(|x| (x, 2, 4)).collect();
        assert_eq!(assign_region(&inst_at(&even), &lobes()).unwrap(), "left upper lobe");
        let empty = LabelVolume::empty(d(), Spacing::unit(), BTreeMap::new());
        assert_eq!(assign_region(&inside, &empty).unwrap(), UNASSIGNED);
        assert_eq!(count_by_region(&[], &lobes(), "right lower lobe").unwrap(), 0);
    }

    #[test]
    fn slice_percentile() {
        let mut m = BinaryMask::empty(d(), Spacing::unit());
        m.set(1, 1, 30, true);
        m.set(2, 1, 30, true);
        m.set(1, 1, 40, true);
        assert_eq!(slice_percentile_of_max_extent(&m).unwrap(), 50.0);
        let mut m = BinaryMask::empty(d(), Spacing::unit());
        m.set(0, 0, 0, true);
        assert_eq!(slice_percentile_of_max_extent(&m).unwrap(), 0.0);
        assert!(slice_percentile_of_max_extent(&BinaryMask::empty(d(), Spacing::unit())).is_err());
        let one = Dims::new(2, 2, 1).unwrap();
        let m = BinaryMask::new(one, Spacing::unit(), vec![true; 4]).unwrap();
        assert_eq!(slice_percentile_of_max_extent(&m).unwrap(), 0.0);
    }

    #[test]
    fn contrast_constant_regions() {
        let dd = Dims::new(4, 1, 1).unwrap();
        let s = Spacing::unit();
        let hu = ScalarVolume::new(dd, s, vec![50.0, -800.0, -800.0, 0.0]).unwrap();
        let lesion = BinaryMask::new(dd, s, vec![true, false, false, false]).unwrap();
        let organ = BinaryMask::new(dd, s, vec![true, true, true, false]).unwrap();
        assert_eq!(hu_contrast(&hu, &lesion, &organ, &lesion, HuStat::Median).unwrap(), 850.0);
        let flat = ScalarVolume::filled(dd, s, 20.0);
        assert_eq!(hu_contrast(&flat, &lesion, &organ, &lesion, HuStat::TrimmedMean).unwrap(), 0.0);
        let empty = BinaryMask::empty(dd, s);
        assert!(matches!(hu_contrast(&hu, &empty, &organ, &lesion, HuStat::Median), Err(LesionError::EmptyLesion)));
        assert!(matches!(hu_contrast(&hu, &lesion, &lesion, &lesion, HuStat::Median), Err(LesionError::NoNormalTissue)));
    }

    #[test]
    fn indices_bounds() {
        let dd = Dims::new(4, 1, 1).unwrap();
        let s = Spacing::unit();
        let lung = BinaryMask::new(dd, s, vec![true, true, false, false]).unwrap();
        assert_eq!(emphysema_index(&lung, &lung).unwrap(), 1.0);
        assert_eq!(emphysema_index(&BinaryMask::empty(dd, s), &lung).unwrap(), 0.0);
        assert!(matches!(emphysema_index(&lung, &BinaryMask::empty(dd, s)), Err(LesionError::EmptyLung)));
        assert_eq!(effusion_ratio(&lung, &lung).unwrap(), 1.0);
        assert!(matches!(effusion_ratio(&lung, &BinaryMask::empty(dd, s)), Err(LesionError::EmptyRegion)));
    }
}
