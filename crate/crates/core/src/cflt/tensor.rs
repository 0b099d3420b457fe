//! Tensor files: one ASCII header line, then little-endian f32 payload.
//!
//! ```text
//! tensor dims=h,w,d,n voxel_dims=H,W,D\n<h*w*d*n f32>
//! tensor dims=n\n<n f32>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{CfltError, FeatureField, Result, TextEmbedding};
use crate::volume::Dims;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CfltError + '_ {
    move |source| CfltError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, msg: impl Into<String>) -> CfltError {
    CfltError::MalformedTensor(format!("{}: {}", path.display(), msg.into()))
}

fn split_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(&'a str, &'a [u8])> {
    let nl = bytes
        .iter()
        .take(256)
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| malformed(path, "header is not UTF-8"))?;
    Ok((header, &bytes[nl + 1..]))
}

fn parse_list(path: &Path, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| malformed(path, format!("bad dimension {p:?}")))
        })
        .collect()
}

fn parse_header(path: &Path, header: &str) -> Result<(Vec<usize>, Option<Vec<usize>>)> {
    let mut fields = header.split_whitespace();
    if fields.next() != Some("tensor") {
        return Err(malformed(path, "header must start with `tensor`"));
    }
    let (mut dims, mut voxel) = (None, None);
    for f in fields {
        match f.split_once('=') {
            Some(("dims", v)) => dims = Some(parse_list(path, v)?),
            Some(("voxel_dims", v)) => voxel = Some(parse_list(path, v)?),
            _ => return Err(malformed(path, format!("unknown header field {f:?}"))),
        }
    }
    let dims = dims.ok_or_else(|| malformed(path, "missing dims"))?;
    if dims.contains(&0) {
        return Err(malformed(path, "zero dimension"));
    }
    Ok((dims, voxel))
}

fn decode(path: &Path, payload: &[u8], count: usize) -> Result<Vec<f32>> {
    if payload.len() != count * 4 {
        return Err(malformed(
            path,
            format!("expected {} payload bytes, found {}", count * 4, payload.len()),
        ));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn encode(header: &str, data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(header.len() + 1 + data.len() * 4);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
    f.write_all(bytes).map_err(io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io(path))
}

pub fn read_feature_field(path: &Path) -> Result<FeatureField> {
    let bytes = fs::read(path).map_err(io(path))?;
    let (header, payload) = split_header(path, &bytes)?;
    let (dims, voxel) = parse_header(path, header)?;
    let [h, w, d, n] = dims[..] else {
        return Err(malformed(path, "feature field needs dims=h,w,d,n"));
    };
    let voxel = voxel.ok_or_else(|| malformed(path, "feature field needs voxel_dims"))?;
    let [vx, vy, vz] = voxel[..] else {
        return Err(malformed(path, "voxel_dims needs three values"));
    };
    let count = h
        .checked_mul(w)
        .and_then(|c| c.checked_mul(d))
        .and_then(|c| c.checked_mul(n))
        .ok_or_else(|| malformed(path, "dims overflow"))?;
    let data = decode(path, payload, count)?;
    let voxel_dims = Dims::new(vx, vy, vz).map_err(|e| malformed(path, e.to_string()))?;
    FeatureField::new([h, w, d], n, voxel_dims, data)
}

pub fn write_feature_field(path: &Path, f: &FeatureField) -> Result<()> {
    let [h, w, d] = f.grid();
    let v = f.voxel_dims();
    let header = format!(
        "tensor dims={h},{w},{d},{} voxel_dims={},{},{}",
        f.embed_dim(),
        v.nx,
        v.ny,
        v.nz
    );
    write_atomic(path, &encode(&header, f.data()))
}

pub fn read_embedding(path: &Path) -> Result<TextEmbedding> {
    let bytes = fs::read(path).map_err(io(path))?;
    let (header, payload) = split_header(path, &bytes)?;
    let (dims, voxel) = parse_header(path, header)?;
    if dims.len() != 1 || voxel.is_some() {
        return Err(malformed(path, "embedding needs dims=n only"));
    }
    TextEmbedding::new(decode(path, payload, dims[0])?)
}

pub fn write_embedding(path: &Path, t: &TextEmbedding) -> Result<()> {
    let header = format!("tensor dims={}", t.as_slice().len());
    write_atomic(path, &encode(&header, t.as_slice()))
}
