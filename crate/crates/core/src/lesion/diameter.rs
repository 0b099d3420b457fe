//! Largest in-plane diameter of a component.

use super::LesionInstance;
use crate::volume::Spacing;

/// Axial slice with the most member voxels (lowest z on ties), with its
/// member `(x, y)` coordinates.
pub fn max_area_slice(inst: &LesionInstance) -> (usize, Vec<(i64, i64)>) {
    let dims = inst.dims;
    let mut by_z: std::collections::BTreeMap<usize, Vec<(i64, i64)>> = Default::default();
    for &i in &inst.voxels {
        let (x, y, z) = dims.coords(i);
        by_z.entry(z).or_default().push((x as i64, y as i64));
    }
    let mut best: Option<(usize, Vec<(i64, i64)>)> = None;
    for (z, pts) in by_z {
        if best.as_ref().is_none_or(|(_, b)| pts.len() > b.len()) {
            best = Some((z, pts));
        }
    }
    best.unwrap_or((0, vec![]))
}

/// Member points with at least one in-plane 4-neighbour outside the set.
pub fn boundary_points(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let set: std::collections::HashSet<(i64, i64)> = points.iter().copied().collect();
    points
        .iter()
        .copied()
        .filter(|&(x, y)| {
            [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|(dx, dy)| !set.contains(&(x + dx, y + dy)))
        })
        .collect()
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull vertices (monotone chain, collinear points dropped).
pub fn convex_hull(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn distance(a: (i64, i64), b: (i64, i64), s: Spacing) -> f64 {
    let ex = s.dx * (a.0 - b.0) as f64;
    let ey = s.dy * (a.1 - b.1) as f64;
    (ex * ex + ey * ey).sqrt()
}

/// Maximum centre-to-centre distance (mm) between boundary voxels on the
/// slice of largest cross-section. A single voxel measures 0 mm.
///
/// The farthest pair of a point set under an axis-scaled Euclidean metric
/// lies on the convex hull, so only hull vertices are compared.
pub fn max_inplane_diameter(inst: &LesionInstance) -> f64 {
    let (_, pts) = max_area_slice(inst);
    let hull = convex_hull(boundary_points(&pts));
    let mut best = 0.0f64;
    for i in 0..hull.len() {
        for j in i + 1..hull.len() {
            best = best.max(distance(hull[i], hull[j], inst.spacing));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn inst(pts: &[(usize, usize, usize)], spacing: Spacing) -> LesionInstance {
        let d = Dims::new(32, 32, 8).unwrap();
        let mut v: Vec<usize> = pts.iter().map(|&(x, y, z)| d.index(x, y, z)).collect();
        v.sort_unstable();
        LesionInstance::from_voxels(0, v, d, spacing)
    }

    #[test]
    fn single_voxel_is_zero() {
        assert_eq!(max_inplane_diameter(&inst(&[(3, 3, 3)], Spacing::unit())), 0.0);
    }

    #[test]
    fn row_of_ten() {
        let pts: Vec<_> = (0..10).map(|x| (x + 2, 5, 1)).collect();
        let s = Spacing::new(0.5, 0.5, 1.0).unwrap();
        assert_eq!(max_inplane_diameter(&inst(&pts, s)), 4.5);
    }

    #[test]
    fn picks_largest_slice_lowest_z() {
        // z=1 has a 3-long row, z=2 a 3-long column, z=4 two voxels far apart
        let pts = [(0, 0, 1), (1, 0, 1), (2, 0, 1), (5, 0, 2), (5, 1, 2), (5, 2, 2), (0, 0, 4), (0, 20, 4)];
        let i = inst(&pts, Spacing::new(1.0, 2.0, 1.0).unwrap());
        assert_eq!(max_area_slice(&i).0, 1);
        assert_eq!(max_inplane_diameter(&i), 2.0);
    }

    #[test]
    fn hull_of_square() {
        let pts: Vec<(i64, i64)> = (0..5).flat_map(|x| (0..5).map(move |y| (x, y))).collect();
        let h = convex_hull(pts);
        assert_eq!(h.len(), 4);
        assert_eq!(boundary_points(&[(0, 0)]), vec![(0, 0)]);
    }
}
