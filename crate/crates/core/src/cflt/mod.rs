//! Coarse-to-fine lesion targeting over externally computed feature fields.
//!
//! A text embedding is compared against every cell of a `(h, w, d, n)`
//! feature field, the resulting heatmap is min-max normalised and cropped
//! to an organ's z-extent, and candidate ROIs are scored by summing
//! `rho(P) * H(P)` over the projected cells whose response clears `tau`.

mod tensor;

use std::ops::Range;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::memory::{RoiCandidate, RoiLocation};
use crate::volume::{self, BinaryMask, Dims, VolumeError};

pub use tensor::{read_embedding, read_feature_field, write_embedding, write_feature_field};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum CfltError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed tensor file: {0}")]
    MalformedTensor(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("text embedding has zero norm")]
    ZeroTextEmbedding,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("z range [{z_min}, {z_max}] is invalid for depth {depth}")]
    InvalidRange {
        z_min: usize,
        z_max: usize,
        depth: usize,
    },
    #[error("ROI projects onto no heatmap cell")]
    EmptyProjection,
    #[error("no candidate ROIs")]
    NoCandidates,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = CfltError> = std::result::Result<T, E>;

/// Grid of local embeddings; cell `(i, j, k)` starts at
/// `n * (i + h * (j + w * k))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    grid: [usize; 3],
    n: usize,
    voxel_dims: Dims,
    data: Vec<f32>,
}

impl FeatureField {
    pub fn new(grid: [usize; 3], n: usize, voxel_dims: Dims, data: Vec<f32>) -> Result<Self> {
        let cells = grid.iter().product::<usize>();
        if cells == 0 || n == 0 {
            return Err(CfltError::DimMismatch("feature field has a zero dimension".into()));
        }
        if data.len() != cells * n {
            return Err(CfltError::DimMismatch(format!(
                "{} values for {cells} cells of width {n}",
                data.len()
            )));
        }
        let v = [voxel_dims.nx, voxel_dims.ny, voxel_dims.nz];
        if grid.iter().zip(v).any(|(&g, vd)| g > vd) {
            return Err(CfltError::DimMismatch(format!(
                "grid {grid:?} is finer than voxel grid {v:?}"
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(CfltError::NonFinite("feature field"));
        }
        Ok(FeatureField {
            grid,
            n,
            voxel_dims,
            data,
        })
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn embed_dim(&self) -> usize {
        self.n
    }

    pub fn voxel_dims(&self) -> Dims {
        self.voxel_dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cell_count(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn cell(&self, c: usize) -> &[f32] {
        &self.data[c * self.n..(c + 1) * self.n]
    }

    pub fn mapping(&self) -> PatchGridMapping {
        PatchGridMapping {
            grid: self.grid,
            voxel_dims: self.voxel_dims,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(Vec<f32>);

impl TextEmbedding {
    pub fn new(v: Vec<f32>) -> Result<Self> {
        if v.is_empty() {
            return Err(CfltError::DimMismatch("empty text embedding".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CfltError::NonFinite("text embedding"));
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(CfltError::ZeroTextEmbedding);
        }
        Ok(TextEmbedding(v))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Per-cell scores over the feature grid. Pruned cells hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    grid: [usize; 3],
    values: Vec<f64>,
    /// Feature cells with zero norm, scored 0.
    pub zero_norm_cells: usize,
}

impl Heatmap {
    pub fn new(grid: [usize; 3], values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.iter().product::<usize>() {
            return Err(CfltError::DimMismatch(format!(
                "{} values for grid {grid:?}",
                values.len()
            )));
        }
        Ok(Heatmap {
            grid,
            values,
            zero_norm_cells: 0,
        })
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.grid[0] * (j + self.grid[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn live_cells(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite()).count()
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity of every feature cell with `t`.
pub fn similarity_heatmap(f: &FeatureField, t: &TextEmbedding) -> Result<Heatmap> {
    similarity_heatmap_with(f, t, Execution::default())
}

pub fn similarity_heatmap_with(f: &FeatureField, t: &TextEmbedding, exec: Execution) -> Result<Heatmap> {
    if t.0.len() != f.n {
        return Err(CfltError::DimMismatch(format!(
            "embedding width {} vs feature width {}",
            t.0.len(),
            f.n
        )));
    }
    let t_norm = norm(&t.0);
    if t_norm == 0.0 {
        return Err(CfltError::ZeroTextEmbedding);
    }
    let t_hat: Vec<f64> = t.0.iter().map(|&x| x as f64 / t_norm).collect();
    let scores = exec.map_range(f.cell_count(), |c| {
        let v = f.cell(c);
        let n = norm(v);
        if n == 0.0 {
            return None;
        }
        let dot: f64 = v.iter().zip(&t_hat).map(|(&a, &b)| a as f64 * b).sum();
        Some((dot / n).clamp(-1.0, 1.0))
    });
    let zero_norm_cells = scores.iter().filter(|s| s.is_none()).count();
    if zero_norm_cells > 0 {
        log::warn!("{zero_norm_cells} feature cells have zero norm and score 0");
    }
    Ok(Heatmap {
        grid: f.grid,
        values: scores.into_iter().map(|s| s.unwrap_or(0.0)).collect(),
        zero_norm_cells,
    })
}

/// Min-max rescale of the finite cells to [0, 1]; a constant map becomes
/// 0.5 everywhere. Pruned cells stay pruned.
pub fn normalize_heatmap(h: &Heatmap) -> Heatmap {
    let finite = h.values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let values = h
        .values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                v
            } else if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.5
            }
        })
        .collect();
    Heatmap {
        grid: h.grid,
        values,
        zero_norm_cells: h.zero_norm_cells,
    }
}

/// Maps heatmap cells to half-open voxel boxes that tile the volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGridMapping {
    grid: [usize; 3],
    voxel_dims: Dims,
}

impl PatchGridMapping {
    pub fn new(grid: [usize; 3], voxel_dims: Dims) -> Result<Self> {
        let v = [voxel_dims.nx, voxel_dims.ny, voxel_dims.nz];
        if grid.iter().zip(v).any(|(&g, vd)| g == 0 || g > vd) {
            return Err(CfltError::DimMismatch(format!(
                "grid {grid:?} does not fit voxel grid {v:?}"
            )));
        }
        Ok(PatchGridMapping { grid, voxel_dims })
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn voxel_dims(&self) -> Dims {
        self.voxel_dims
    }

    fn extent(&self, axis: usize) -> usize {
        [self.voxel_dims.nx, self.voxel_dims.ny, self.voxel_dims.nz][axis]
    }

    /// Voxel range covered by cell index `i` along `axis`.
    pub fn axis_range(&self, axis: usize, i: usize) -> Range<usize> {
        let (g, v) = (self.grid[axis], self.extent(axis));
        (i * v / g)..((i + 1) * v / g)
    }

    pub fn cell_coords(&self, c: usize) -> [usize; 3] {
        let [h, w, _] = self.grid;
        [c % h, (c / h) % w, c / (h * w)]
    }

    pub fn cell_box(&self, c: usize) -> [Range<usize>; 3] {
        let [i, j, k] = self.cell_coords(c);
        [self.axis_range(0, i), self.axis_range(1, j), self.axis_range(2, k)]
    }

    pub fn cell_count(&self) -> usize {
        self.grid.iter().product()
    }

    fn check(&self, h: &Heatmap) -> Result<()> {
        if h.grid != self.grid {
            return Err(CfltError::DimMismatch(format!(
                "heatmap grid {:?} vs mapping grid {:?}",
                h.grid, self.grid
            )));
        }
        Ok(())
    }
}

/// Heatmap after cropping, with the number of cells removed.
#[derive(Debug, Clone, PartialEq)]
pub struct Cropped {
    pub heatmap: Heatmap,
    pub pruned: usize,
    /// Set when no cell survived the crop.
    pub empty: bool,
}

/// Sets cells whose voxel box lies entirely outside `[z_min, z_max]` to
/// `-inf`; partially overlapping cells keep their value.
pub fn crop_by_z_range(h: &Heatmap, z_range: (usize, usize), mapping: &PatchGridMapping) -> Result<Cropped> {
    mapping.check(h)?;
    let (z_min, z_max) = z_range;
    let depth = mapping.voxel_dims.nz;
    if z_min > z_max || z_max >= depth {
        return Err(CfltError::InvalidRange { z_min, z_max, depth });
    }
    let mut values = h.values.clone();
    let [hh, ww, dd] = h.grid;
    let layer = hh * ww;
    let mut pruned = 0;
    for k in 0..dd {
        let r = mapping.axis_range(2, k);
        let overlaps = r.start <= z_max && r.end > z_min;
        if !overlaps {
            for v in &mut values[k * layer..(k + 1) * layer] {
                if v.is_finite() {
                    pruned += 1;
                }
                *v = f64::NEG_INFINITY;
            }
        }
    }
    let heatmap = Heatmap {
        grid: h.grid,
        values,
        zero_norm_cells: h.zero_norm_cells,
    };
    let empty = heatmap.live_cells() == 0;
    if empty {
        log::warn!("crop to z range [{z_min}, {z_max}] left no heatmap cells");
    }
    Ok(Cropped { heatmap, pruned, empty })
}

/// Fraction of a cell's voxel box inside `organ`.
pub fn organ_overlap_ratio(cell: usize, organ: &BinaryMask, mapping: &PatchGridMapping) -> f64 {
    let [rx, ry, rz] = mapping.cell_box(cell);
    let total = rx.len() * ry.len() * rz.len();
    let mut inside = 0usize;
    for z in rz {
        for y in ry.clone() {
            for x in rx.clone() {
                inside += organ.at(x, y, z) as usize;
            }
        }
    }
    inside as f64 / total as f64
}

/// `rho` for every cell, in cell order.
pub fn organ_overlap_grid(organ: &BinaryMask, mapping: &PatchGridMapping, exec: Execution) -> Result<Vec<f64>> {
    if organ.dims() != mapping.voxel_dims {
        return Err(CfltError::DimMismatch(format!(
            "organ dims {:?} vs mapped volume {:?}",
            organ.dims(),
            mapping.voxel_dims
        )));
    }
    Ok(exec.map_range(mapping.cell_count(), |c| organ_overlap_ratio(c, organ, mapping)))
}

/// A region of interest scored against the heatmap.
#[derive(Debug, Clone, PartialEq)]
pub enum Roi {
    /// One axial slice across the full plane.
    Slice(usize),
    Region { name: String, mask: BinaryMask },
}

impl Roi {
    pub fn location(&self) -> RoiLocation {
        match self {
            Roi::Slice(z) => RoiLocation::AxialSlice(*z),
            Roi::Region { name, .. } => RoiLocation::SubRegion(name.clone()),
        }
    }

    /// Cells whose voxel box intersects the ROI.
    pub fn projection(&self, mapping: &PatchGridMapping) -> Vec<usize> {
        match self {
            Roi::Slice(z) => {
                let [h, w, d] = mapping.grid;
                (0..d)
                    .filter(|&k| mapping.axis_range(2, k).contains(z))
                    .flat_map(|k| (0..h * w).map(move |c| c + k * h * w))
                    .collect()
            }
            Roi::Region { mask, .. } => (0..mapping.cell_count())
                .filter(|&c| {
                    let [rx, ry, rz] = mapping.cell_box(c);
                    rz.into_iter().any(|z| {
                        ry.clone()
                            .any(|y| rx.clone().any(|x| mask.at(x, y, z)))
                    })
                })
                .collect(),
        }
    }
}

/// Every axial slice of an inclusive z range as a slice ROI.
pub fn slice_candidates(z_range: (usize, usize)) -> Vec<Roi> {
    (z_range.0..=z_range.1).map(Roi::Slice).collect()
}

/// `S(R) = sum over projected cells with H >= tau of rho * H`, with `rho`
/// precomputed per cell.
pub fn score_roi_with_overlap(
    roi: &Roi,
    h: &Heatmap,
    rho: &[f64],
    tau: f64,
    mapping: &PatchGridMapping,
) -> Result<f64> {
    mapping.check(h)?;
    if rho.len() != h.values.len() {
        return Err(CfltError::DimMismatch("overlap grid size".into()));
    }
    if let Roi::Region { mask, .. } = roi {
        if mask.dims() != mapping.voxel_dims {
            return Err(CfltError::DimMismatch("ROI mask dims".into()));
        }
    }
    let cells = roi.projection(mapping);
    if cells.is_empty() {
        return Err(CfltError::EmptyProjection);
    }
    Ok(cells
        .into_iter()
        .filter(|&c| h.values[c] >= tau)
        .fold(0.0, |acc, c| acc + rho[c] * h.values[c]))
}

pub fn score_roi(roi: &Roi, h: &Heatmap, organ: &BinaryMask, tau: f64, mapping: &PatchGridMapping) -> Result<f64> {
    let rho = organ_overlap_grid(organ, mapping, Execution::Sequential)?;
    score_roi_with_overlap(roi, h, &rho, tau, mapping)
}

fn roi_order(a: &(Roi, f64), b: &(Roi, f64)) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    let by_location = match (&a.0, &b.0) {
        (Roi::Slice(x), Roi::Slice(y)) => x.cmp(y),
        (Roi::Region { name: x, .. }, Roi::Region { name: y, .. }) => x.cmp(y),
        (Roi::Slice(_), Roi::Region { .. }) => Ordering::Less,
        (Roi::Region { .. }, Roi::Slice(_)) => Ordering::Greater,
    };
    b.1.total_cmp(&a.1).then(by_location)
}

/// Scores every candidate and keeps the best `top_k`, ranked from 1.
/// Ties go to the lower slice index, then the smaller region name.
pub fn rank_rois(
    candidates: &[Roi],
    h: &Heatmap,
    organ: &BinaryMask,
    tau: f64,
    mapping: &PatchGridMapping,
    top_k: usize,
) -> Result<Vec<RoiCandidate>> {
    let rho = organ_overlap_grid(organ, mapping, Execution::default())?;
    rank_rois_with_overlap(candidates, h, &rho, tau, mapping, top_k, Execution::default())
}

pub fn rank_rois_with_overlap(
    candidates: &[Roi],
    h: &Heatmap,
    rho: &[f64],
    tau: f64,
    mapping: &PatchGridMapping,
    top_k: usize,
    exec: Execution,
) -> Result<Vec<RoiCandidate>> {
    if candidates.is_empty() {
        return Err(CfltError::NoCandidates);
    }
    if top_k == 0 {
        return Err(CfltError::InvalidArgument("top_k must be at least 1".into()));
    }
    let scores = exec.map_slice(candidates, |roi| score_roi_with_overlap(roi, h, rho, tau, mapping));
    let mut scored = Vec::with_capacity(candidates.len());
    for (roi, s) in candidates.iter().zip(scores) {
        scored.push((roi.clone(), s?));
    }
    scored.sort_by(roi_order);
    Ok(scored
        .into_iter()
        .take(top_k)
        .enumerate()
        .map(|(i, (roi, score))| RoiCandidate {
            location: roi.location(),
            score,
            rank: i + 1,
        })
        .collect())
}

/// Knobs for one targeting pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetParams {
    pub tau: f64,
    pub top_k: usize,
}

impl Default for TargetParams {
    fn default() -> Self {
        TargetParams {
            tau: DEFAULT_TAU,
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetOutcome {
    /// Normalised, organ-cropped heatmap.
    pub heatmap: Heatmap,
    pub candidates: Vec<RoiCandidate>,
    pub warnings: Vec<String>,
}

/// Heatmap, normalisation, crop to the organ's z-extent, then ranking of
/// every axial slice in that extent.
pub fn target_slices(
    f: &FeatureField,
    t: &TextEmbedding,
    organ: &BinaryMask,
    params: TargetParams,
    exec: Execution,
) -> Result<TargetOutcome> {
    let mapping = f.mapping();
    let mut warnings = vec![];
    let raw = similarity_heatmap_with(f, t, exec)?;
    if raw.zero_norm_cells > 0 {
        warnings.push(format!("{} zero-norm feature cells", raw.zero_norm_cells));
    }
    let z_range = volume::z_extent(organ)?;
    let cropped = crop_by_z_range(&normalize_heatmap(&raw), z_range, &mapping)?;
    if cropped.empty {
        warnings.push("crop left no cells".into());
    }
    let rho = organ_overlap_grid(organ, &mapping, exec)?;
    let candidates = rank_rois_with_overlap(
        &slice_candidates(z_range),
        &cropped.heatmap,
        &rho,
        params.tau,
        &mapping,
        params.top_k,
        exec,
    )?;
    if candidates.iter().all(|c| c.score == 0.0) {
        warnings.push(format!("no cell reaches tau = {}; all scores are 0", params.tau));
    }
    for w in &warnings {
        log::info!("{w}");
    }
    Ok(TargetOutcome {
        heatmap: cropped.heatmap,
        candidates,
        warnings,
    })
}

/// Cosine of the spatially averaged feature vector with `t`.
pub fn volume_level_similarity(f: &FeatureField, t: &TextEmbedding) -> Result<f64> {
    if t.0.len() != f.n {
        return Err(CfltError::DimMismatch("embedding width".into()));
    }
    let mut mean = vec![0f64; f.n];
    for c in 0..f.cell_count() {
        for (m, &v) in mean.iter_mut().zip(f.cell(c)) {
            *m += v as f64;
        }
    }
    let mean_norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if mean_norm == 0.0 {
        return Ok(0.0);
    }
    let t_norm = norm(&t.0);
    let dot: f64 = mean.iter().zip(&t.0).map(|(a, &b)| a * b as f64).sum();
    Ok(dot / (mean_norm * t_norm))
}
