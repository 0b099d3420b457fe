//! Spacing-aware CT and label volumes with the geometric and intensity
//! primitives the rest of the crate is built on.
//!
//! Voxels are stored x-fastest, z-slowest: `index = x + nx * (y + ny * z)`.
//! Axis `z` is the axial (slice) axis.

mod nifti;
mod raw;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;

pub use raw::{read_sidecar, save_labels_raw, save_raw, sidecar_path, Sidecar};

/// Largest accepted extent along any axis.
pub const MAX_DIM: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension {value} along axis {axis} exceeds {MAX_DIM}")]
    DimensionOverflow { axis: usize, value: usize },
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("invalid spacing ({0}, {1}, {2}): every component must be positive and finite")]
    InvalidSpacing(f64, f64, f64),
    #[error("invalid dims ({0}, {1}, {2}): every component must be >= 1")]
    InvalidDims(usize, usize, usize),
    #[error("data length {actual} does not match dims ({expected} voxels)")]
    DataLength { expected: usize, actual: usize },
    #[error("label {0} is present in the data but has no name")]
    UnnamedLabel(u32),
    #[error("voxel value {0} is not a non-negative integer label")]
    InvalidLabelValue(f32),
    #[error("mask is empty")]
    EmptyMask,
    #[error("volume geometry mismatch: {0}")]
    DimsMismatch(String),
    #[error("cannot sample {k} slices from a volume of depth {depth}")]
    KTooLarge { k: usize, depth: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    VolumeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Millimetres per voxel along x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(dx) && ok(dy) && ok(dz) {
            Ok(Spacing { dx, dy, dz })
        } else {
            Err(VolumeError::InvalidSpacing(dx, dy, dz))
        }
    }

    pub fn unit() -> Self {
        Spacing { dx: 1.0, dy: 1.0, dz: 1.0 }
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_mm3(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    fn approx_eq(&self, other: &Spacing) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs());
        close(self.dx, other.dx) && close(self.dy, other.dy) && close(self.dz, other.dz)
    }
}

/// Voxel counts along x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(VolumeError::InvalidDims(nx, ny, nz));
        }
        for (axis, &value) in [nx, ny, nz].iter().enumerate() {
            if value > MAX_DIM {
                return Err(VolumeError::DimensionOverflow { axis, value });
            }
        }
        Ok(Dims { nx, ny, nz })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxels per axial slice.
    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / self.slice_len();
        (x, y, z)
    }
}

/// Shared geometry check used by every paired operation.
pub(crate) fn check_geometry(
    a: (Dims, Spacing),
    b: (Dims, Spacing),
    what: &str,
) -> Result<()> {
    if a.0 != b.0 {
        return Err(VolumeError::DimsMismatch(format!(
            "{what}: dims {:?} vs {:?}",
            a.0, b.0
        )));
    }
    if !a.1.approx_eq(&b.1) {
        return Err(VolumeError::DimsMismatch(format!(
            "{what}: spacing {:?} vs {:?}",
            a.1, b.1
        )));
    }
    Ok(())
}

/// A CT volume in Hounsfield Units.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(VolumeError::DataLength {
                expected: dims.len(),
                actual: data.len(),
            });
        }
        Ok(ScalarVolume { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Self {
        ScalarVolume {
            dims,
            spacing,
            data: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    /// One axial slice, x-fastest.
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.dims.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// An integer label volume (organ or lesion segmentation).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<u32>,
    label_names: BTreeMap<u32, String>,
}

impl LabelVolume {
    pub fn new(
        dims: Dims,
        spacing: Spacing,
        data: Vec<u32>,
        label_names: BTreeMap<u32, String>,
    ) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(VolumeError::DataLength {
                expected: dims.len(),
                actual: data.len(),
            });
        }
        let mut seen = vec![];
        for &l in &data {
            if l != 0 && !label_names.contains_key(&l) && !seen.contains(&l) {
                seen.push(l);
            }
        }
        if let Some(&l) = seen.first() {
            return Err(VolumeError::UnnamedLabel(l));
        }
        Ok(LabelVolume {
            dims,
            spacing,
            data,
            label_names,
        })
    }

    pub fn empty(dims: Dims, spacing: Spacing, label_names: BTreeMap<u32, String>) -> Self {
        LabelVolume {
            dims,
            spacing,
            data: vec![0; dims.len()],
            label_names,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn label_names(&self) -> &BTreeMap<u32, String> {
        &self.label_names
    }

    /// Label id for an organ or lesion name.
    pub fn label_of(&self, name: &str) -> Option<u32> {
        self.label_names
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .map(|(&id, _)| id)
    }

    pub fn name_of(&self, label: u32) -> Option<&str> {
        self.label_names.get(&label).map(String::as_str)
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u32) {
        let i = self.dims.index(x, y, z);
        self.data[i] = label;
    }

    /// Mask of all voxels carrying any of `labels`.
    pub fn mask_of(&self, labels: &[u32]) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|l| labels.contains(l)).collect(),
        }
    }

    /// Mask for a set of names; unknown names contribute nothing.
    pub fn mask_of_names<S: AsRef<str>>(&self, names: &[S]) -> BinaryMask {
        let ids: Vec<u32> = names.iter().filter_map(|n| self.label_of(n.as_ref())).collect();
        self.mask_of(&ids)
    }

    /// Mask of every nonzero voxel.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&l| l != 0).collect(),
        }
    }
}

/// A voxel membership mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    dims: Dims,
    spacing: Spacing,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(VolumeError::DataLength {
                expected: dims.len(),
                actual: data.len(),
            });
        }
        Ok(BinaryMask { dims, spacing, data })
    }

    pub fn empty(dims: Dims, spacing: Spacing) -> Self {
        BinaryMask {
            dims,
            spacing,
            data: vec![false; dims.len()],
        }
    }

    pub fn from_indices(dims: Dims, spacing: Spacing, indices: &[usize]) -> Self {
        let mut m = Self::empty(dims, spacing);
        for &i in indices {
            m.data[i] = true;
        }
        m
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        self.data[i]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }

    pub fn set_index(&mut self, i: usize, v: bool) {
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.count_with(Execution::default())
    }

    pub fn count_with(&self, exec: Execution) -> usize {
        let n = self.dims.slice_len();
        exec.map_range(self.dims.nz, |z| {
            self.data[z * n..(z + 1) * n].iter().filter(|&&b| b).count()
        })
        .into_iter()
        .sum()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Member voxels per axial slice.
    pub fn slice_areas(&self) -> Vec<usize> {
        let n = self.dims.slice_len();
        (0..self.dims.nz)
            .map(|z| self.data[z * n..(z + 1) * n].iter().filter(|&&b| b).count())
            .collect()
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        check_geometry(
            (self.dims, self.spacing),
            (other.dims, other.spacing),
            "mask combination",
        )?;
        Ok(BinaryMask {
            dims: self.dims,
            spacing: self.spacing,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    /// Members of `self` not in `other`.
    pub fn minus(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    /// Number of voxels in both masks.
    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        check_geometry(
            (self.dims, self.spacing),
            (other.dims, other.spacing),
            "mask intersection",
        )?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count())
    }
}

/// On-disk volume encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti1,
    RawWithSidecar,
}

impl VolumeFormat {
    /// `.nii` / `.nii.gz` / `.hdr` are NIfTI; anything else is raw.
    pub fn detect(path: &Path) -> Self {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") || name.ends_with(".hdr") {
            VolumeFormat::Nifti1
        } else {
            VolumeFormat::RawWithSidecar
        }
    }
}

/// Loads a CT volume, rescaled into HU.
pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<ScalarVolume> {
    match format {
        VolumeFormat::Nifti1 => nifti::read_nifti(path),
        VolumeFormat::RawWithSidecar => raw::load_raw(path).map(|(v, _)| v),
    }
}

/// Loads a label volume. Names come from the sidecar `labels=` line
/// (for NIfTI, from an optional sidecar next to the image).
pub fn load_labels(path: &Path, format: VolumeFormat) -> Result<LabelVolume> {
    let (vol, names) = match format {
        VolumeFormat::Nifti1 => {
            let v = nifti::read_nifti(path)?;
            let side = sidecar_path(path);
            let names = if side.exists() {
                read_sidecar(&side)?.labels
            } else {
                BTreeMap::new()
            };
            (v, names)
        }
        VolumeFormat::RawWithSidecar => raw::load_raw(path)?,
    };
    let mut data = Vec::with_capacity(vol.data.len());
    for &v in &vol.data {
        if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32) {
            return Err(VolumeError::InvalidLabelValue(v));
        }
        data.push(v as u32);
    }
    LabelVolume::new(vol.dims, vol.spacing, data, names)
}

/// Linearly resamples along z to `target_depth` slices.
///
/// Output slice `j` samples source position `j * (D - 1) / (T - 1)` (end
/// slices map onto end slices); a single output slice samples the centre.
/// The z spacing is rescaled by `D / T`.
pub fn resample_depth(v: &ScalarVolume, target_depth: usize) -> Result<ScalarVolume> {
    if target_depth == 0 {
        return Err(VolumeError::InvalidArgument("target depth must be >= 1".into()));
    }
    let d = v.dims.nz;
    if target_depth == d {
        return Ok(v.clone());
    }
    let dims = Dims::new(v.dims.nx, v.dims.ny, target_depth)?;
    let spacing = Spacing::new(
        v.spacing.dx,
        v.spacing.dy,
        v.spacing.dz * d as f64 / target_depth as f64,
    )?;
    let n = dims.slice_len();
    let mut data = vec![0f32; dims.len()];
    for j in 0..target_depth {
        let pos = if target_depth == 1 {
            (d - 1) as f64 / 2.0
        } else {
            j as f64 * (d - 1) as f64 / (target_depth - 1) as f64
        };
        let lo = (pos.floor() as usize).min(d - 1);
        let hi = (lo + 1).min(d - 1);
        let w = pos - lo as f64;
        let (a, b) = (v.slice(lo), v.slice(hi));
        let out = &mut data[j * n..(j + 1) * n];
        for i in 0..n {
            out[i] = ((1.0 - w) * a[i] as f64 + w * b[i] as f64) as f32;
        }
    }
    ScalarVolume::new(dims, spacing, data)
}

/// `k` axial indices at the centres of `k` equal bins over `depth` slices.
///
/// Index `i` is `(i + 0.5) * depth / k` rounded half-down, which keeps the
/// sequence strictly increasing (bins are at least one slice wide) and maps
/// `k == depth` onto `0..depth`. Computed in exact integer arithmetic.
pub fn uniform_slice_sample(depth: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(VolumeError::InvalidArgument("k must be >= 1".into()));
    }
    if k > depth {
        return Err(VolumeError::KTooLarge { k, depth });
    }
    // value = (2i + 1) * depth / (2k); round half down = ceil(value - 1/2)
    let den = 2 * k;
    Ok((0..k)
        .map(|i| {
            let num = (2 * i + 1) * depth;
            let idx = (num - k).div_ceil(den);
            idx.min(depth - 1)
        })
        .collect())
}

/// Physical volume of a mask in millilitres.
pub fn mask_physical_volume(m: &BinaryMask) -> f64 {
    m.count() as f64 * m.spacing.voxel_mm3() / 1000.0
}

/// Summary statistic over a masked HU region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HuStat {
    Mean,
    #[default]
    Median,
    /// Mean after dropping `floor(0.1 n)` values from each tail.
    TrimmedMean,
}

fn masked_values(v: &ScalarVolume, m: &BinaryMask) -> Result<Vec<f64>> {
    check_geometry((v.dims, v.spacing), (m.dims, m.spacing), "hu statistic")?;
    let vals: Vec<f64> = v
        .data
        .iter()
        .zip(&m.data)
        .filter(|(_, &b)| b)
        .map(|(&x, _)| x as f64)
        .collect();
    if vals.is_empty() {
        return Err(VolumeError::EmptyMask);
    }
    Ok(vals)
}

/// Arithmetic mean HU over a mask.
pub fn mean_hu(v: &ScalarVolume, m: &BinaryMask) -> Result<f64> {
    mean_hu_with(v, m, Execution::default())
}

pub fn mean_hu_with(v: &ScalarVolume, m: &BinaryMask, exec: Execution) -> Result<f64> {
    check_geometry((v.dims, v.spacing), (m.dims, m.spacing), "mean hu")?;
    let n = v.dims.slice_len();
    // per-slice partials, summed in slice order so the result is mode-independent
    let partials = exec.map_range(v.dims.nz, |z| {
        let (mut s, mut c) = (0f64, 0usize);
        for i in z * n..(z + 1) * n {
            if m.data[i] {
                s += v.data[i] as f64;
                c += 1;
            }
        }
        (s, c)
    });
    let (sum, count) = partials
        .into_iter()
        .fold((0.0, 0), |(s, c), (ps, pc)| (s + ps, c + pc));
    if count == 0 {
        return Err(VolumeError::EmptyMask);
    }
    Ok(sum / count as f64)
}

pub fn median_of(mut vals: Vec<f64>) -> f64 {
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        (vals[n / 2 - 1] + vals[n / 2]) / 2.0
    }
}

pub fn trimmed_mean_of(mut vals: Vec<f64>) -> f64 {
    vals.sort_by(f64::total_cmp);
    let cut = vals.len() / 10;
    let kept = &vals[cut..vals.len() - cut];
    kept.iter().sum::<f64>() / kept.len() as f64
}

pub fn median_hu(v: &ScalarVolume, m: &BinaryMask) -> Result<f64> {
    Ok(median_of(masked_values(v, m)?))
}

pub fn trimmed_mean_hu(v: &ScalarVolume, m: &BinaryMask) -> Result<f64> {
    Ok(trimmed_mean_of(masked_values(v, m)?))
}

pub fn hu_statistic(v: &ScalarVolume, m: &BinaryMask, stat: HuStat) -> Result<f64> {
    match stat {
        HuStat::Mean => mean_hu(v, m),
        HuStat::Median => median_hu(v, m),
        HuStat::TrimmedMean => trimmed_mean_hu(v, m),
    }
}

/// First and last axial slice containing a member voxel.
pub fn z_extent(m: &BinaryMask) -> Result<(usize, usize)> {
    let n = m.dims.slice_len();
    let occupied = |z: usize| m.data[z * n..(z + 1) * n].iter().any(|&b| b);
    let zmin = (0..m.dims.nz).find(|&z| occupied(z)).ok_or(VolumeError::EmptyMask)?;
    let zmax = (0..m.dims.nz).rev().find(|&z| occupied(z)).unwrap_or(zmin);
    Ok((zmin, zmax))
}
