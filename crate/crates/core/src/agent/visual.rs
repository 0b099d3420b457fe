//! Single-slice renderings handed to the model: windowed HU, label
//! contours, and a 2× crop.

use image::{ImageBuffer, ImageFormat, Rgb, RgbImage};

use crate::volume::{check_geometry, LabelVolume, ScalarVolume, VolumeError};

use super::protocol::{RoiBox, Tool};

#[derive(Debug, thiserror::Error)]
pub enum VisualError {
    #[error("slice {slice} is outside 0..{depth}")]
    SliceOutOfRange { slice: usize, depth: usize },
    #[error("crop-zoom needs an roi box")]
    MissingRoi,
    #[error("roi {0:?} does not fit the slice")]
    RoiOutOfBounds(RoiBox),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("png encoding: {0}")]
    Encode(String),
}

pub type Result<T, E = VisualError> = std::result::Result<T, E>;

/// HU display window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub center: f64,
    pub width: f64,
}

pub const LUNG_WINDOW: Window = Window {
    center: -600.0,
    width: 1500.0,
};

pub const SOFT_TISSUE_WINDOW: Window = Window {
    center: 40.0,
    width: 400.0,
};

const LUNG_WINDOW_ORGANS: [&str; 5] = ["lung", "airway", "pleura", "bronchus", "trachea"];

pub fn window_for_organ(organ: &str) -> Window {
    let o = organ.to_ascii_lowercase();
    if LUNG_WINDOW_ORGANS.iter().any(|k| o.contains(k)) || o.contains("lobe") {
        LUNG_WINDOW
    } else {
        SOFT_TISSUE_WINDOW
    }
}

impl Window {
    pub fn apply(&self, hu: f32) -> u8 {
        let lo = self.center - self.width / 2.0;
        let v = (hu as f64 - lo) / self.width * 255.0;
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// Contour colours, indexed by `(label - 1) % 8`. None is grey.
pub const PALETTE: [[u8; 3]; 8] = [
    [255, 0, 0],
    [0, 200, 0],
    [0, 90, 255],
    [255, 220, 0],
    [255, 0, 255],
    [0, 230, 230],
    [255, 128, 0],
    [140, 60, 220],
];

pub fn label_color(label: u32) -> [u8; 3] {
    PALETTE[(label.saturating_sub(1) % PALETTE.len() as u32) as usize]
}

fn check_slice(hu: &ScalarVolume, z: usize) -> Result<()> {
    let depth = hu.dims().nz;
    if z >= depth {
        return Err(VisualError::SliceOutOfRange { slice: z, depth });
    }
    Ok(())
}

/// Grey axial slice, x along columns and y along rows.
pub fn windowed_slice(hu: &ScalarVolume, z: usize, w: Window) -> Result<RgbImage> {
    check_slice(hu, z)?;
    let d = hu.dims();
    let s = hu.slice(z);
    Ok(ImageBuffer::from_fn(d.nx as u32, d.ny as u32, |x, y| {
        let g = w.apply(s[x as usize + d.nx * y as usize]);
        Rgb([g, g, g])
    }))
}

/// In-plane 4-neighbour boundary of each nonzero label: pixels with a
/// neighbour of a different label or outside the slice.
pub fn contour_pixels(masks: &LabelVolume, z: usize) -> Vec<(usize, usize, u32)> {
    let d = masks.dims();
    let s = &masks.data()[z * d.slice_len()..(z + 1) * d.slice_len()];
    let at = |x: usize, y: usize| s[x + d.nx * y];
    let mut out = vec![];
    for y in 0..d.ny {
        for x in 0..d.nx {
            let l = at(x, y);
            if l == 0 {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == d.nx
                || y + 1 == d.ny
                || at(x - 1, y) != l
                || at(x + 1, y) != l
                || at(x, y - 1) != l
                || at(x, y + 1) != l;
            if edge {
                out.push((x, y, l));
            }
        }
    }
    out
}

pub fn mask_overlay(hu: &ScalarVolume, masks: &LabelVolume, z: usize, w: Window) -> Result<RgbImage> {
    check_geometry((hu.dims(), hu.spacing()), (masks.dims(), masks.spacing()), "overlay masks vs CT")?;
    let mut img = windowed_slice(hu, z, w)?;
    for (x, y, l) in contour_pixels(masks, z) {
        img.put_pixel(x as u32, y as u32, Rgb(label_color(l)));
    }
    Ok(img)
}

/// The roi of the windowed slice, upscaled 2× by pixel replication.
pub fn crop_zoom(hu: &ScalarVolume, z: usize, roi: RoiBox, w: Window) -> Result<RgbImage> {
    let base = windowed_slice(hu, z, w)?;
    let d = hu.dims();
    if roi.x1 > d.nx || roi.y1 > d.ny || roi.x0 >= roi.x1 || roi.y0 >= roi.y1 {
        return Err(VisualError::RoiOutOfBounds(roi));
    }
    let (cw, ch) = ((roi.x1 - roi.x0) as u32, (roi.y1 - roi.y0) as u32);
    Ok(ImageBuffer::from_fn(cw * 2, ch * 2, |x, y| {
        *base.get_pixel(roi.x0 as u32 + x / 2, roi.y0 as u32 + y / 2)
    }))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| VisualError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Renders the requested tool on axial slice `z` and encodes it as PNG.
pub fn apply_visual_op(
    tool: Tool,
    z: usize,
    hu: &ScalarVolume,
    masks: &LabelVolume,
    roi: Option<RoiBox>,
    w: Window,
) -> Result<Vec<u8>> {
    let img = match tool {
        Tool::MaskOverlay => mask_overlay(hu, masks, z, w)?,
        Tool::CropZoom => {
            check_slice(hu, z)?;
            crop_zoom(hu, z, roi.ok_or(VisualError::MissingRoi)?, w)?
        }
    };
    encode_png(&img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing};
    use std::collections::BTreeMap;

    fn vols(n: usize) -> (ScalarVolume, LabelVolume) {
        let d = Dims::new(n, n, 3).unwrap();
        let hu = ScalarVolume::filled(d, Spacing::unit(), -600.0);
        let masks = LabelVolume::empty(d, Spacing::unit(), BTreeMap::from([(1, "lesion".to_string())]));
        (hu, masks)
    }

    #[test]
    fn windows() {
        assert_eq!(LUNG_WINDOW.apply(-600.0), 128);
        assert_eq!(LUNG_WINDOW.apply(-2000.0), 0);
        assert_eq!(SOFT_TISSUE_WINDOW.apply(240.0), 255);
        assert_eq!(window_for_organ("right lower lobe"), LUNG_WINDOW);
        assert_eq!(window_for_organ("liver"), SOFT_TISSUE_WINDOW);
    }

    #[test]
    fn empty_overlay_is_grey() {
        let (hu, masks) = vols(8);
        let img = mask_overlay(&hu, &masks, 1, LUNG_WINDOW).unwrap();
        assert!(img.pixels().all(|p| p.0 == [128, 128, 128]));
    }

    #[test]
    fn errors() {
        let (hu, masks) = vols(8);
        assert!(matches!(
            apply_visual_op(Tool::MaskOverlay, 3, &hu, &masks, None, LUNG_WINDOW),
            Err(VisualError::SliceOutOfRange { slice: 3, depth: 3 })
        ));
        assert!(matches!(
            apply_visual_op(Tool::CropZoom, 0, &hu, &masks, None, LUNG_WINDOW),
            Err(VisualError::MissingRoi)
        ));
        let roi = RoiBox { x0: 0, y0: 0, x1: 9, y1: 2 };
        assert!(matches!(crop_zoom(&hu, 0, roi, LUNG_WINDOW), Err(VisualError::RoiOutOfBounds(_))));
    }

    #[test]
    fn png_decodes() {
        let (hu, masks) = vols(8);
        let png = apply_visual_op(Tool::MaskOverlay, 0, &hu, &masks, None, LUNG_WINDOW).unwrap();
        let img = image::load_from_memory(&png).unwrap();
        assert_eq!((img.width(), img.height()), (8, 8));
    }
}
