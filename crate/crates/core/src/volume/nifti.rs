//! Minimal NIfTI-1 reader: single-file `.nii` (optionally gzipped) and
//! `.hdr`/`.img` pairs, datatypes uint8 / int16 / float32.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{io_err, Dims, Result, ScalarVolume, Spacing, VolumeError, MAX_DIM};

const HEADER_LEN: usize = 348;

const DIM: usize = 40;
const DATATYPE: usize = 70;
const PIXDIM: usize = 76;
const VOX_OFFSET: usize = 108;
const SCL_SLOPE: usize = 112;
const SCL_INTER: usize = 116;
const MAGIC: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[at..at + N]);
        b
    }

    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.bytes(at)),
            Endian::Big => i16::from_be_bytes(self.bytes(at)),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.bytes(at)),
            Endian::Big => f32::from_be_bytes(self.bytes(at)),
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| io_err(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| io_err(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub(super) fn read_nifti(path: &Path) -> Result<ScalarVolume> {
    let buf = read_maybe_gz(path)?;
    if buf.len() < HEADER_LEN {
        return Err(VolumeError::MalformedHeader(format!(
            "{} is shorter than a NIfTI-1 header",
            path.display()
        )));
    }
    let endian = if i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) == HEADER_LEN as i32 {
        Endian::Little
    } else if i32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) == HEADER_LEN as i32 {
        Endian::Big
    } else {
        return Err(VolumeError::MalformedHeader("sizeof_hdr is not 348".into()));
    };
    let r = Reader { buf: &buf, endian };

    let magic = &buf[MAGIC..MAGIC + 4];
    let single_file = match magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        other => {
            return Err(VolumeError::MalformedHeader(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };

    let ndim = r.i16(DIM);
    if !(1..=7).contains(&ndim) {
        return Err(VolumeError::MalformedHeader(format!("dim[0] = {ndim}")));
    }
    let mut extent = [1usize; 3];
    for (axis, e) in extent.iter_mut().enumerate() {
        if (axis as i16) < ndim {
            let v = r.i16(DIM + 2 * (axis + 1));
            if v < 1 {
                return Err(VolumeError::MalformedHeader(format!("dim[{}] = {v}", axis + 1)));
            }
            *e = v as usize;
            if *e > MAX_DIM {
                return Err(VolumeError::DimensionOverflow { axis, value: *e });
            }
        }
    }
    for axis in 4..=ndim as usize {
        let v = r.i16(DIM + 2 * axis);
        if v > 1 {
            return Err(VolumeError::MalformedHeader(format!(
                "only 3D volumes are supported (dim[{axis}] = {v})"
            )));
        }
    }
    let dims = Dims::new(extent[0], extent[1], extent[2])?;

    let pix = |i: usize| (r.f32(PIXDIM + 4 * i) as f64).abs();
    let spacing = Spacing::new(pix(1), pix(2), pix(3)).map_err(|_| {
        VolumeError::MalformedHeader(format!("pixdim ({}, {}, {})", pix(1), pix(2), pix(3)))
    })?;

    let datatype = r.i16(DATATYPE);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(VolumeError::UnsupportedDatatype(other)),
    };

    let image_owned;
    let image: &[u8] = if single_file {
        let off = r.f32(VOX_OFFSET);
        if !(off.is_finite() && off >= HEADER_LEN as f32) {
            return Err(VolumeError::MalformedHeader(format!("vox_offset = {off}")));
        }
        &buf[(off as usize).min(buf.len())..]
    } else {
        let img = path.with_extension("img");
        image_owned = read_maybe_gz(&img)?;
        &image_owned
    };
    let needed = dims.len() * width;
    if image.len() < needed {
        return Err(VolumeError::MalformedHeader(format!(
            "image data holds {} bytes, dims need {needed}",
            image.len()
        )));
    }

    let (slope, inter) = (r.f32(SCL_SLOPE), r.f32(SCL_INTER));
    // slope 0 (or non-finite) means "no scaling" in NIfTI-1
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0f32, 0.0f32)
    } else {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    };

    let ir = Reader { buf: image, endian };
    let data = (0..dims.len())
        .map(|i| {
            let raw = match datatype {
                DT_UINT8 => image[i] as f32,
                DT_INT16 => ir.i16(2 * i) as f32,
                _ => ir.f32(4 * i),
            };
            raw * slope + inter
        })
        .collect();
    ScalarVolume::new(dims, spacing, data)
}
