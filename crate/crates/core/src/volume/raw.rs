//! Raw little-endian float32 voxels with a `key=value` text sidecar.
//!
//! ```text
//! dims=H,W,D
//! spacing=dx,dy,dz
//! labels=1:liver;2:spleen
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{io_err, Dims, LabelVolume, Result, ScalarVolume, Spacing, VolumeError};

#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub dims: Dims,
    pub spacing: Spacing,
    pub labels: BTreeMap<u32, String>,
}

/// `ct.raw` -> `ct.txt`, `ct.nii.gz` -> `ct.txt`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".gz")
        .unwrap_or(&name)
        .rsplit_once('.')
        .map(|(s, _)| s.to_string())
        .unwrap_or_else(|| name.clone());
    path.with_file_name(format!("{stem}.txt"))
}

fn parse_triple<T: std::str::FromStr>(value: &str, key: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(VolumeError::MalformedHeader(format!(
            "`{key}` needs three comma-separated values, got `{value}`"
        )));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| {
            VolumeError::MalformedHeader(format!("bad `{key}` component `{p}`"))
        })?);
    }
    let mut it = out.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

pub fn parse_labels(value: &str) -> Result<BTreeMap<u32, String>> {
    let mut labels = BTreeMap::new();
    for entry in value.split(';').map(str::trim).filter(|e| !e.is_empty()) {
        let (id, name) = entry.split_once(':').ok_or_else(|| {
            VolumeError::MalformedHeader(format!("label entry `{entry}` lacks `id:name`"))
        })?;
        let id: u32 = id
            .trim()
            .parse()
            .map_err(|_| VolumeError::MalformedHeader(format!("bad label id `{id}`")))?;
        if id == 0 {
            return Err(VolumeError::MalformedHeader("label 0 is background".into()));
        }
        labels.insert(id, name.trim().to_string());
    }
    Ok(labels)
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let (mut dims, mut spacing, mut labels) = (None, None, BTreeMap::new());
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| VolumeError::MalformedHeader(format!("sidecar line `{line}`")))?;
        match key.trim() {
            "dims" => {
                let [x, y, z] = parse_triple::<usize>(value, "dims")?;
                dims = Some(Dims::new(x, y, z)?);
            }
            "spacing" => {
                let [x, y, z] = parse_triple::<f64>(value, "spacing")?;
                spacing = Some(Spacing::new(x, y, z)?);
            }
            "labels" => labels = parse_labels(value)?,
            other => {
                return Err(VolumeError::MalformedHeader(format!(
                    "unknown sidecar key `{other}`"
                )))
            }
        }
    }
    Ok(Sidecar {
        dims: dims.ok_or_else(|| VolumeError::MalformedHeader("sidecar lacks `dims`".into()))?,
        spacing: spacing
            .ok_or_else(|| VolumeError::MalformedHeader("sidecar lacks `spacing`".into()))?,
        labels,
    })
}

pub(super) fn load_raw(path: &Path) -> Result<(ScalarVolume, BTreeMap<u32, String>)> {
    let side = read_sidecar(&sidecar_path(path))?;
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() != side.dims.len() * 4 {
        return Err(VolumeError::MalformedHeader(format!(
            "{} holds {} bytes, dims need {}",
            path.display(),
            bytes.len(),
            side.dims.len() * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((ScalarVolume::new(side.dims, side.spacing, data)?, side.labels))
}

fn write_sidecar(path: &Path, dims: Dims, spacing: Spacing, labels: Option<&BTreeMap<u32, String>>) -> Result<()> {
    let mut text = format!(
        "dims={},{},{}\nspacing={},{},{}\n",
        dims.nx, dims.ny, dims.nz, spacing.dx, spacing.dy, spacing.dz
    );
    if let Some(labels) = labels.filter(|l| !l.is_empty()) {
        let joined: Vec<String> = labels.iter().map(|(id, n)| format!("{id}:{n}")).collect();
        text.push_str(&format!("labels={}\n", joined.join(";")));
    }
    let side = sidecar_path(path);
    fs::write(&side, text).map_err(|e| io_err(&side, e))
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Writes `path` (voxels) and its sidecar.
pub fn save_raw(v: &ScalarVolume, path: &Path) -> Result<()> {
    write_f32(path, v.data().iter().copied())?;
    write_sidecar(path, v.dims(), v.spacing(), None)
}

pub fn save_labels_raw(v: &LabelVolume, path: &Path) -> Result<()> {
    if v.data().iter().any(|&l| l > (1 << 24)) {
        return Err(VolumeError::InvalidArgument(
            "labels above 2^24 are not exactly representable as float32".into(),
        ));
    }
    write_f32(path, v.data().iter().map(|&l| l as f32))?;
    write_sidecar(path, v.dims(), v.spacing(), Some(v.label_names()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{load_labels, load_volume, VolumeFormat};

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar_path(Path::new("/a/ct.raw")), PathBuf::from("/a/ct.txt"));
        assert_eq!(sidecar_path(Path::new("/a/ct.nii.gz")), PathBuf::from("/a/ct.txt"));
    }

    #[test]
    fn zero_volume_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.raw");
        fs::write(&p, vec![0u8; 64 * 4]).unwrap();
        fs::write(dir.path().join("z.txt"), "dims=4,4,4\nspacing=1,1,1\n").unwrap();
        let v = load_volume(&p, VolumeFormat::RawWithSidecar).unwrap();
        assert_eq!(v.data().len(), 64);
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert_eq!(v.spacing(), Spacing::unit());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.raw");
        let d = Dims::new(3, 1, 1).unwrap();
        let names = BTreeMap::from([(1, "liver".to_string()), (2, "right lower lobe".to_string())]);
        let l = LabelVolume::new(d, Spacing::new(0.7, 0.7, 1.25).unwrap(), vec![0, 1, 2], names).unwrap();
        save_labels_raw(&l, &p).unwrap();
        assert_eq!(load_labels(&p, VolumeFormat::RawWithSidecar).unwrap(), l);
    }

    #[test]
    fn rejects_bad_sidecar_and_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.raw");
        fs::write(&p, vec![0u8; 12]).unwrap();
        fs::write(dir.path().join("b.txt"), "dims=2,2\nspacing=1,1,1\n").unwrap();
        assert!(matches!(
            load_volume(&p, VolumeFormat::RawWithSidecar),
            Err(VolumeError::MalformedHeader(_))
        ));
        fs::write(dir.path().join("b.txt"), "dims=2,2,2\nspacing=1,1,1\n").unwrap();
        assert!(matches!(
            load_volume(&p, VolumeFormat::RawWithSidecar),
            Err(VolumeError::MalformedHeader(_))
        ));
        fs::write(dir.path().join("b.txt"), "dims=5000,1,1\nspacing=1,1,1\n").unwrap();
        assert!(matches!(
            load_volume(&p, VolumeFormat::RawWithSidecar),
            Err(VolumeError::DimensionOverflow { .. })
        ));
    }

    #[test]
    fn fractional_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.raw");
        let v = ScalarVolume::new(Dims::new(2, 1, 1).unwrap(), Spacing::unit(), vec![0.0, 1.5]).unwrap();
        save_raw(&v, &p).unwrap();
        assert!(matches!(
            load_labels(&p, VolumeFormat::RawWithSidecar),
            Err(VolumeError::InvalidLabelValue(_))
        ));
    }
}
