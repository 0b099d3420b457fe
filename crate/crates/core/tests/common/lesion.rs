use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use slicewise::lesion::{Connectivity, LesionInstance};
use slicewise::volume::{BinaryMask, Dims, Spacing};

pub fn random_mask(rng: &mut ChaCha8Rng, dims: Dims, p: f64) -> BinaryMask {
    let data = (0..dims.len()).map(|_| rng.gen_bool(p)).collect();
    BinaryMask::new(dims, Spacing::unit(), data).unwrap()
}

pub fn neighbours(conn: Connectivity) -> Vec<(i64, i64, i64)> {
    let mut out = vec![];
    for dz in -1..=1i64 {
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                let keep = match conn {
                    Connectivity::Six => manhattan == 1,
                    Connectivity::TwentySix => manhattan > 0,
                };
                if keep {
                    out.push((dx, dy, dz));
                }
            }
        }
    }
    out
}

/// Breadth-first flood fill; returns one component id per voxel.
pub fn flood_fill(m: &BinaryMask, conn: Connectivity) -> Vec<Option<usize>> {
    let d = m.dims();
    let offs = neighbours(conn);
    let mut comp = vec![None; d.len()];
    let mut next = 0;
    for start in 0..d.len() {
        if !m.contains(start) || comp[start].is_some() {
            continue;
        }
        comp[start] = Some(next);
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = d.coords(i);
            for &(dx, dy, dz) in &offs {
                let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if nx < 0 || ny < 0 || nz < 0 || nx >= d.nx as i64 || ny >= d.ny as i64 || nz >= d.nz as i64 {
                    continue;
                }
                let j = d.index(nx as usize, ny as usize, nz as usize);
                if m.contains(j) && comp[j].is_none() {
                    comp[j] = Some(next);
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    comp
}

pub fn partition_of(instances: &[LesionInstance]) -> BTreeSet<Vec<usize>> {
    instances.iter().map(|i| i.voxels.clone()).collect()
}

pub fn oracle_partition(comp: &[Option<usize>]) -> BTreeSet<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in comp.iter().enumerate() {
        if let Some(c) = c {
            groups.entry(*c).or_default().push(i);
        }
    }
    groups.into_values().collect()
}

/// Random connected blob grown by accretion.
pub fn random_blob(rng: &mut ChaCha8Rng, dims: Dims, size: usize) -> Vec<usize> {
    let start = (dims.nx / 2, dims.ny / 2, dims.nz / 2);
    let mut set = BTreeSet::from([dims.index(start.0, start.1, start.2)]);
    let mut members = vec![start];
    while set.len() < size {
        let (x, y, z) = members[rng.gen_range(0..members.len())];
        let (dx, dy, dz) = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)][rng.gen_range(0..6)];
        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
        if nx < 0 || ny < 0 || nz < 0 || nx >= dims.nx as i64 || ny >= dims.ny as i64 || nz >= dims.nz as i64 {
            continue;
        }
        let p = (nx as usize, ny as usize, nz as usize);
        if set.insert(dims.index(p.0, p.1, p.2)) {
            members.push(p);
        }
    }
    set.into_iter().collect()
}

pub fn all_pairs_diameter(inst: &LesionInstance) -> f64 {
    let d = inst.dims;
    let mut area: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &inst.voxels {
        *area.entry(d.coords(i).2).or_default() += 1;
    }
    let max = *area.values().max().unwrap();
    let z = *area.iter().find(|(_, &a)| a == max).unwrap().0;
    let pts: Vec<(usize, usize)> = inst
        .voxels
        .iter()
        .map(|&i| d.coords(i))
        .filter(|c| c.2 == z)
        .map(|(x, y, _)| (x, y))
        .collect();
    let mut best = 0.0f64;
    for a in &pts {
        for b in &pts {
            let dx = (a.0 as f64 - b.0 as f64) * inst.spacing.dx;
            let dy = (a.1 as f64 - b.1 as f64) * inst.spacing.dy;
            best = best.max((dx * dx + dy * dy).sqrt());
        }
    }
    best
}

