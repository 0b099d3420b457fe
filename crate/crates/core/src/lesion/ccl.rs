//! 3D connected-component labelling with a slab-parallel union-find.
//!
//! Each z-slab is labelled independently (its parent entries form a
//! disjoint chunk of the forest), then the slab seams are merged
//! sequentially. Roots always point at the smallest voxel index of their
//! component, so the result does not depend on how slabs were scheduled.

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::volume::{BinaryMask, Dims, Spacing};

use super::{BoundingBox, LesionInstance};

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    #[serde(rename = "6")]
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    /// Neighbour offsets (dx, dy, dz) that precede a voxel in scan order.
    pub fn backward_offsets(self) -> &'static [(i64, i64, i64)] {
        const SIX: [(i64, i64, i64); 3] = [(-1, 0, 0), (0, -1, 0), (0, 0, -1)];
        const TWENTY_SIX: [(i64, i64, i64); 13] = [
            (-1, 0, 0),
            (-1, -1, 0),
            (0, -1, 0),
            (1, -1, 0),
            (-1, -1, -1),
            (0, -1, -1),
            (1, -1, -1),
            (-1, 0, -1),
            (0, 0, -1),
            (1, 0, -1),
            (-1, 1, -1),
            (0, 1, -1),
            (1, 1, -1),
        ];
        match self {
            Connectivity::Six => &SIX,
            Connectivity::TwentySix => &TWENTY_SIX,
        }
    }
}

fn find(parent: &mut [u32], base: usize, mut i: usize) -> usize {
    while parent[i - base] as usize != i {
        let p = parent[i - base] as usize;
        let gp = parent[p - base];
        parent[i - base] = gp;
        i = gp as usize;
    }
    i
}

fn union(parent: &mut [u32], base: usize, a: usize, b: usize) {
    let ra = find(parent, base, a);
    let rb = find(parent, base, b);
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi - base] = lo as u32;
    }
}

/// Unions `i` with its backward neighbours, restricted to `z >= z_floor`.
#[allow(clippy::too_many_arguments)]
fn link_voxel(
    mask: &[bool],
    dims: Dims,
    parent: &mut [u32],
    base: usize,
    offsets: &[(i64, i64, i64)],
    i: usize,
    z_floor: usize,
    only_dz: Option<i64>,
) {
    let (x, y, z) = dims.coords(i);
    for &(dx, dy, dz) in offsets {
        if only_dz.is_some_and(|d| d != dz) {
            continue;
        }
        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
        if nx < 0
            || ny < 0
            || nz < z_floor as i64
            || nx >= dims.nx as i64
            || ny >= dims.ny as i64
        {
            continue;
        }
        let j = dims.index(nx as usize, ny as usize, nz as usize);
        if mask[j] {
            union(parent, base, i, j);
        }
    }
}

/// Labels the mask; returns one root index per voxel (`u32::MAX` for
/// background). Roots are the smallest index in each component.
pub fn label_roots(m: &BinaryMask, conn: Connectivity, exec: Execution) -> Vec<u32> {
    label_roots_in_slabs(m, conn, exec, exec.parallelism())
}

fn label_roots_in_slabs(m: &BinaryMask, conn: Connectivity, exec: Execution, slabs: usize) -> Vec<u32> {
    let dims = m.dims();
    assert!(
        dims.len() < NONE as usize,
        "volumes above 2^32 - 1 voxels are not supported"
    );
    let mask = m.data();
    let sl = dims.slice_len();
    let mut parent: Vec<u32> = (0..dims.len() as u32).collect();
    let offsets = conn.backward_offsets();

    let slab_depth = dims.nz.div_ceil(slabs.max(1)).max(1);
    exec.for_each_chunk_mut(&mut parent, slab_depth * sl, |slab, chunk| {
        let base = slab * slab_depth * sl;
        let z0 = slab * slab_depth;
        for local in 0..chunk.len() {
            let i = base + local;
            if mask[i] {
                link_voxel(mask, dims, chunk, base, offsets, i, z0, None);
            }
        }
    });

    // seams between slabs
    for z0 in (slab_depth..dims.nz).step_by(slab_depth) {
        for i in z0 * sl..(z0 + 1) * sl {
            if mask[i] {
                link_voxel(mask, dims, &mut parent, 0, offsets, i, 0, Some(-1));
            }
        }
    }

    for i in 0..dims.len() {
        if mask[i] {
            let r = find(&mut parent, 0, i);
            parent[i] = r as u32;
        } else {
            parent[i] = NONE;
        }
    }
    parent
}

/// Splits a mask into maximal connected components, ordered by descending
/// physical volume, then lowest bounding-box corner (z, y, x), then lowest
/// first voxel index.
pub fn connected_components_3d(m: &BinaryMask, conn: Connectivity) -> Vec<LesionInstance> {
    connected_components_3d_with(m, conn, Execution::default())
}

pub fn connected_components_3d_with(
    m: &BinaryMask,
    conn: Connectivity,
    exec: Execution,
) -> Vec<LesionInstance> {
    let dims = m.dims();
    let roots = label_roots(m, conn, exec);
    let mut slot = vec![NONE; dims.len()];
    let mut groups: Vec<Vec<usize>> = vec![];
    for (i, &r) in roots.iter().enumerate() {
        if r == NONE {
            continue;
        }
        let r = r as usize;
        if slot[r] == NONE {
            slot[r] = groups.len() as u32;
            groups.push(vec![]);
        }
        groups[slot[r] as usize].push(i);
    }
    let mut instances: Vec<LesionInstance> = groups
        .into_iter()
        .map(|voxels| LesionInstance::from_voxels(0, voxels, dims, m.spacing()))
        .collect();
    sort_instances(&mut instances);
    for (id, inst) in instances.iter_mut().enumerate() {
        inst.id = id;
    }
    instances
}

pub(super) fn instance_order(a: &LesionInstance, b: &LesionInstance) -> std::cmp::Ordering {
    b.voxels
        .len()
        .cmp(&a.voxels.len())
        .then_with(|| a.bbox.corner_zyx().cmp(&b.bbox.corner_zyx()))
        .then_with(|| a.voxels[0].cmp(&b.voxels[0]))
}

pub(super) fn sort_instances(v: &mut [LesionInstance]) {
    v.sort_by(instance_order);
}

impl LesionInstance {
    /// `voxels` must be sorted ascending and nonempty.
    pub fn from_voxels(id: usize, voxels: Vec<usize>, dims: Dims, spacing: Spacing) -> Self {
        let mut min = [usize::MAX; 3];
        let mut max = [0usize; 3];
        for &i in &voxels {
            let (x, y, z) = dims.coords(i);
            for (a, v) in [x, y, z].into_iter().enumerate() {
                min[a] = min[a].min(v);
                max[a] = max[a].max(v);
            }
        }
        let physical_volume_ml = voxels.len() as f64 * spacing.voxel_mm3() / 1000.0;
        LesionInstance {
            id,
            voxels,
            physical_volume_ml,
            bbox: BoundingBox { min, max },
            dims,
            spacing,
        }
    }
}
