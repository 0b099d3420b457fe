use slicewise::cflt::{Heatmap, Roi};
use slicewise::volume::{BinaryMask, Dims};

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Voxel interval of cell `i` of `g` along an axis of `v` voxels.
pub fn interval(i: usize, g: usize, v: usize) -> (usize, usize) {
    (i * v / g, (i + 1) * v / g)
}

pub fn boxes(grid: [usize; 3], d: Dims) -> Vec<[(usize, usize); 3]> {
    let mut out = vec![];
    for k in 0..grid[2] {
        for j in 0..grid[1] {
            for i in 0..grid[0] {
                out.push([interval(i, grid[0], d.nx), interval(j, grid[1], d.ny), interval(k, grid[2], d.nz)]);
            }
        }
    }
    out
}

pub fn voxels_in(b: &[(usize, usize); 3]) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    (b[2].0..b[2].1).flat_map(move |z| (b[1].0..b[1].1).flat_map(move |y| (b[0].0..b[0].1).map(move |x| (x, y, z))))
}

/// Brute-force `sum over touched cells with H >= tau of rho * H`.
pub fn score_oracle(roi: &Roi, h: &Heatmap, organ: &BinaryMask, tau: f64) -> f64 {
    let d = organ.dims();
    let mut s = 0.0;
    for (c, b) in boxes(h.grid(), d).iter().enumerate() {
        let touched = match roi {
            Roi::Slice(z) => b[2].0 <= *z && *z < b[2].1,
            Roi::Region { mask, .. } => voxels_in(b).any(|(x, y, z)| mask.at(x, y, z)),
        };
        let v = h.values()[c];
        if !touched || v < tau || v.is_nan() {
            continue;
        }
        let total = voxels_in(b).count();
        let inside = voxels_in(b).filter(|&(x, y, z)| organ.at(x, y, z)).count();
        s += inside as f64 / total as f64 * v;
    }
    s
}

