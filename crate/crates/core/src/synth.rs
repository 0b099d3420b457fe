//! Synthetic chest cases for offline runs: block-shaped lungs split into
//! five lobes, a pleural rim, and lesions planted according to a rotating
//! set of archetypes so every question subtype and answer option has supply.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::case::{self, Case, CaseError, CaseMeta, LOBES, PLEURAL_SPACE};
use crate::cflt::{self, FeatureField, TextEmbedding};
use crate::exec::Execution;
use crate::seed;
use crate::volume::{Dims, LabelVolume, ScalarVolume, Spacing};

pub const NX: usize = 40;
pub const NY: usize = 32;
pub const NZ: usize = 24;
pub const SPACING: [f64; 3] = [1.2, 1.2, 2.0];
pub const FEATURE_GRID: [usize; 3] = [10, 8, 12];
pub const EMBED_DIM: usize = 8;
pub const ARCHETYPES: usize = 12;
pub const EMBEDDING_FILE: &str = "lesion.embedding";
pub const FEATURES_FILE: &str = "features.tensor";

pub const LESION_LABELS: [&str; 7] = [
    "nodule",
    "mass",
    "ground-glass opacity",
    "consolidation",
    "atelectasis",
    "emphysema",
    "pleural effusion",
];

const NODULE: u32 = 1;
const MASS: u32 = 2;
const GGO: u32 = 3;
const CONSOLIDATION: u32 = 4;
const ATELECTASIS: u32 = 5;
const EMPHYSEMA: u32 = 6;
const EFFUSION: u32 = 7;

const PLEURA_LABEL: u32 = 6;
const HEART_LABEL: u32 = 7;

const INCIDENTAL: [&str; 3] = ["cardiomegaly", "arterial wall calcification", "coronary artery wall calcification"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub cases: usize,
    pub seed: u64,
    pub features: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            cases: 720,
            seed: 0,
            features: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCase {
    pub case: Case,
    pub features: Option<FeatureField>,
}

/// Axis-aligned half-open box.
#[derive(Debug, Clone, Copy)]
struct Block {
    x: (usize, usize),
    y: (usize, usize),
    z: (usize, usize),
}

impl Block {
    fn center(&self) -> [f64; 3] {
        let m = |(a, b): (usize, usize)| (a + b) as f64 / 2.0 - 0.5;
        [m(self.x), m(self.y), m(self.z)]
    }
}

struct Builder {
    dims: Dims,
    organs: Vec<u32>,
    lesions: Vec<u32>,
    lobes: [Block; 5],
    right: Block,
    left: Block,
}

impl Builder {
    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        self.dims.index(x, y, z)
    }

    fn lobe_label(lobe: usize) -> u32 {
        lobe as u32 + 1
    }

    /// Labels voxels of `lobe` inside the ellipsoid, leaving earlier
    /// lesions alone. `pick` chooses the label per voxel.
    fn ellipsoid(&mut self, lobe: usize, c: [f64; 3], r: [f64; 3], pick: impl Fn(usize, usize, usize) -> u32) {
        let b = self.lobes[lobe];
        for z in b.z.0..b.z.1 {
            for y in b.y.0..b.y.1 {
                for x in b.x.0..b.x.1 {
                    let d = [(x as f64 - c[0]) / r[0], (y as f64 - c[1]) / r[1], (z as f64 - c[2]) / r[2]];
                    let i = self.idx(x, y, z);
                    if d.iter().map(|v| v * v).sum::<f64>() <= 1.0 && self.organs[i] == Self::lobe_label(lobe) && self.lesions[i] == 0 {
                        self.lesions[i] = pick(x, y, z);
                    }
                }
            }
        }
    }
}

fn lobe_side_is_left(lobe: usize) -> bool {
    lobe < 2
}

fn lungs(rng: &mut ChaCha20Rng, shrink: Option<bool>) -> (Block, Block) {
    let depth = rng.gen_range(17..=22);
    let height = rng.gen_range(15..=20);
    let (y, z) = ((4, 4 + depth), (2, 2 + height));
    let mut wr: usize = rng.gen_range(13..=15);
    let mut wl: usize = rng.gen_range(12..=14);
    match shrink {
        Some(true) => wl = (wl as f64 * 0.6).round() as usize,
        Some(false) => wr = (wr as f64 * 0.6).round() as usize,
        None => {}
    }
    let right = Block { x: (4, 4 + wr), y, z };
    let left = Block { x: (NX - 4 - wl, NX - 4), y, z };
    (right, left)
}

fn split_z(b: Block, parts: usize) -> Vec<Block> {
    let h = b.z.1 - b.z.0;
    (0..parts)
        .map(|k| Block {
            z: (b.z.0 + k * h / parts, b.z.0 + (k + 1) * h / parts),
            ..b
        })
        .collect()
}

fn build(rng: &mut ChaCha20Rng, shrink: Option<bool>) -> Builder {
    let dims = Dims::new(NX, NY, NZ).expect("fixed dims");
    let (right, left) = lungs(rng, shrink);
    // lower z is inferior
    let l = split_z(left, 2);
    let r = split_z(right, 3);
    let lobes = [l[1], l[0], r[2], r[1], r[0]];
    let mut organs = vec![0u32; dims.len()];
    for (k, b) in lobes.iter().enumerate() {
        for z in b.z.0..b.z.1 {
            for y in b.y.0..b.y.1 {
                for x in b.x.0..b.x.1 {
                    organs[dims.index(x, y, z)] = k as u32 + 1;
                }
            }
        }
    }
    for lung in [right, left] {
        let lateral = if lung.x.0 < NX / 2 { (lung.x.0 - 2, lung.x.0) } else { (lung.x.1, lung.x.1 + 2) };
        for z in lung.z.0..lung.z.1 {
            for y in lung.y.0..lung.y.1 + 2 {
                for x in lateral.0.min(lung.x.0)..lateral.1.max(lung.x.1) {
                    let rim = (lateral.0..lateral.1).contains(&x) || y >= lung.y.1;
                    if rim && organs[dims.index(x, y, z)] == 0 {
                        organs[dims.index(x, y, z)] = PLEURA_LABEL;
                    }
                }
            }
        }
    }
    let (hy, hz) = (right.y.0 + (right.y.1 - right.y.0) / 2, right.z.0 + (right.z.1 - right.z.0) / 2);
    for z in right.z.0..hz {
        for y in right.y.0..hy {
            for x in right.x.1..left.x.0 {
                organs[dims.index(x, y, z)] = HEART_LABEL;
            }
        }
    }
    Builder {
        dims,
        organs,
        lesions: vec![0; dims.len()],
        lobes,
        right,
        left,
    }
}

fn sphere(b: &mut Builder, lobe: usize, c: [f64; 3], r: f64, label: u32) {
    b.ellipsoid(lobe, c, [r, r, r.min(2.5)], |_, _, _| label);
}

/// One large primary nodule or mass in `lobe` plus up to two small ones in
/// front/back slots so that none touch.
fn plant_nodules(b: &mut Builder, rng: &mut ChaCha20Rng, lobe: usize, extra: usize) -> usize {
    let c = b.lobes[lobe].center();
    let label = if rng.gen_bool(0.3) { MASS } else { NODULE };
    sphere(b, lobe, c, rng.gen_range(2.6..3.4), label);
    let mut slots: Vec<(usize, f64)> = (0..5).flat_map(|l| [(l, -6.0), (l, 6.0)]).collect();
    slots.shuffle(rng);
    for &(l, dy) in slots.iter().take(extra) {
        let lc = b.lobes[l].center();
        sphere(b, l, [lc[0], lc[1] + dy, lc[2]], 1.5, NODULE);
    }
    1 + extra
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Opacity {
    Ggo,
    Consolidation,
    Mixed,
}

fn plant_opacity(b: &mut Builder, rng: &mut ChaCha20Rng, lobe: usize, kind: Opacity) {
    let c = b.lobes[lobe].center();
    let r = [rng.gen_range(3.0..5.0), rng.gen_range(3.0..5.0), rng.gen_range(2.0..3.0)];
    match kind {
        Opacity::Ggo => b.ellipsoid(lobe, c, r, |_, _, _| GGO),
        Opacity::Consolidation => b.ellipsoid(lobe, c, r, |_, _, _| CONSOLIDATION),
        Opacity::Mixed => b.ellipsoid(lobe, c, r, |x, y, z| if (x + y + z) % 2 == 0 { GGO } else { CONSOLIDATION }),
    }
}

/// Airless slab along the base of the lowest lobe on one side.
fn plant_atelectasis(b: &mut Builder, left: bool) {
    let lobe = if left { 1 } else { 4 };
    let lb = b.lobes[lobe];
    for z in lb.z.0..(lb.z.0 + 2).min(lb.z.1) {
        for y in (lb.y.1 - 3)..lb.y.1 {
            for x in lb.x.0..lb.x.1 {
                let i = b.idx(x, y, z);
                if b.lesions[i] == 0 {
                    b.lesions[i] = ATELECTASIS;
                }
            }
        }
    }
}

fn plant_emphysema(b: &mut Builder, rng: &mut ChaCha20Rng) {
    let p = rng.gen_range(0.03..0.35);
    for i in 0..b.dims.len() {
        if (1..=5).contains(&b.organs[i]) && b.lesions[i] == 0 && rng.gen_bool(p) {
            b.lesions[i] = EMPHYSEMA;
        }
    }
}

fn plant_effusion(b: &mut Builder, rng: &mut ChaCha20Rng) {
    let frac = rng.gen_range(0.05..1.0);
    let both = rng.gen_bool(0.4);
    let left_first = rng.gen_bool(0.5);
    for (k, lung) in [b.left, b.right].into_iter().enumerate() {
        if !both && (k == 0) != left_first {
            continue;
        }
        let top = lung.z.0 + ((lung.z.1 - lung.z.0) as f64 * frac).ceil() as usize;
        let xr = (lung.x.0.saturating_sub(2), (lung.x.1 + 2).min(NX));
        for z in lung.z.0..top {
            for y in lung.y.0..(lung.y.1 + 2) {
                for x in xr.0..xr.1 {
                    let i = b.idx(x, y, z);
                    if b.organs[i] == PLEURA_LABEL {
                        b.lesions[i] = EFFUSION;
                    }
                }
            }
        }
    }
}

fn incidental(rng: &mut ChaCha20Rng, labels: &mut BTreeSet<String>) {
    for l in INCIDENTAL {
        if rng.gen_bool(0.2) {
            labels.insert(l.to_string());
        }
    }
}

/// Report labels implied by the planted masks.
fn mask_labels(lesions: &[u32], labels: &mut BTreeSet<String>) {
    let present: BTreeSet<u32> = lesions.iter().copied().filter(|&l| l != 0).collect();
    let map = [
        (NODULE, "lung nodule"),
        (MASS, "lung nodule"),
        (GGO, "lung opacity"),
        (CONSOLIDATION, "consolidation"),
        (ATELECTASIS, "atelectasis"),
        (EMPHYSEMA, "emphysema"),
        (EFFUSION, "pleural effusion"),
    ];
    for (l, name) in map {
        if present.contains(&l) {
            labels.insert(name.to_string());
        }
    }
}

fn hu_of(organ: u32, lesion: u32, inside_body: bool) -> f32 {
    match lesion {
        NODULE => 30.0,
        MASS => 40.0,
        GGO => -550.0,
        CONSOLIDATION => 20.0,
        ATELECTASIS => 0.0,
        EMPHYSEMA => -960.0,
        EFFUSION => 10.0,
        _ => match organ {
            1..=5 => -850.0,
            PLEURA_LABEL => 20.0,
            HEART_LABEL => 40.0,
            _ if inside_body => 40.0,
            _ => -1000.0,
        },
    }
}

/// Unit direction the planted lesions point to in feature space.
pub fn lesion_embedding() -> TextEmbedding {
    let mut v = vec![0.0; EMBED_DIM];
    v[0] = 1.0;
    TextEmbedding::new(v).expect("nonzero")
}

fn feature_field(b: &Builder, rng: &mut ChaCha20Rng) -> FeatureField {
    let mapping = cflt::PatchGridMapping::new(FEATURE_GRID, b.dims).expect("grid fits");
    let mut data = Vec::with_capacity(mapping.cell_count() * EMBED_DIM);
    for c in 0..mapping.cell_count() {
        let [xr, yr, zr] = mapping.cell_box(c);
        let (mut hit, mut n) = (0usize, 0usize);
        for z in zr.clone() {
            for y in yr.clone() {
                for x in xr.clone() {
                    n += 1;
                    hit += matches!(b.lesions[b.idx(x, y, z)], NODULE..=ATELECTASIS) as usize;
                }
            }
        }
        let f = hit as f32 / n as f32;
        for k in 0..EMBED_DIM {
            let base = match k {
                0 => f,
                1 => 0.8 * (1.0 - f),
                _ => 0.0,
            };
            data.push(base + rng.gen_range(-0.05..0.05));
        }
    }
    FeatureField::new(FEATURE_GRID, EMBED_DIM, b.dims, data).expect("consistent field")
}

/// The `index`-th case of a cohort. Archetype `index % 12` decides what
/// is planted; everything else is drawn from the case's own stream.
pub fn synth_case(index: usize, seed: u64, features: bool) -> SynthCase {
    let mut rng = seed::rng(seed, seed::STREAM_SYNTH, &format!("case-{index}"));
    let arch = index % ARCHETYPES;
    // cycles the primary lobe so locations come out balanced
    let lobe = (index / ARCHETYPES) % LOBES.len();
    let opacity_case = (6..=9).contains(&arch);
    let shrink = (opacity_case && rng.gen_bool(0.5)).then_some(lobe_side_is_left(lobe));
    let mut b = build(&mut rng, shrink);
    let mut labels = BTreeSet::new();
    match arch {
        0 => {}
        1 => {
            let extra = rng.gen_range(0..=2);
            plant_nodules(&mut b, &mut rng, lobe, extra);
        }
        2 => {
            let extra = rng.gen_range(0..=1);
            plant_nodules(&mut b, &mut rng, lobe, extra);
            plant_effusion(&mut b, &mut rng);
        }
        3 => plant_emphysema(&mut b, &mut rng),
        4 => {
            if rng.gen_bool(0.5) {
                plant_nodules(&mut b, &mut rng, lobe, 0);
            }
            plant_emphysema(&mut b, &mut rng);
            labels.insert("bronchiectasis".to_string());
            if rng.gen_bool(0.5) {
                labels.insert("peribronchial thickening".to_string());
            }
        }
        5 => {
            let pick = rng.gen_range(0..3);
            if pick != 1 {
                labels.insert("pulmonary fibrotic sequela".to_string());
            }
            if pick != 0 {
                labels.insert("interlobular septal thickening".to_string());
            }
            if rng.gen_bool(0.5) {
                let extra = rng.gen_range(0..=1);
                plant_nodules(&mut b, &mut rng, lobe, extra);
            }
            if rng.gen_bool(0.3) {
                labels.insert("bronchiectasis".to_string());
            }
        }
        6 => {
            plant_opacity(&mut b, &mut rng, lobe, Opacity::Ggo);
            if rng.gen_bool(0.3) {
                plant_effusion(&mut b, &mut rng);
            }
        }
        7 => {
            plant_opacity(&mut b, &mut rng, lobe, Opacity::Consolidation);
            if rng.gen_bool(0.5) {
                plant_atelectasis(&mut b, lobe_side_is_left(lobe));
            }
        }
        8 => plant_opacity(&mut b, &mut rng, lobe, Opacity::Mixed),
        9 => {
            let kind = *[Opacity::Ggo, Opacity::Consolidation, Opacity::Mixed].choose(&mut rng).expect("nonempty");
            plant_opacity(&mut b, &mut rng, lobe, kind);
            plant_emphysema(&mut b, &mut rng);
            if rng.gen_bool(0.3) {
                labels.insert("bronchiectasis".to_string());
            }
        }
        10 => plant_effusion(&mut b, &mut rng),
        _ => {
            let pick = rng.gen_range(0..3);
            if pick != 1 {
                labels.insert("mosaic attenuation pattern".to_string());
            }
            if pick != 0 {
                labels.insert("peribronchial thickening".to_string());
            }
        }
    }
    mask_labels(&b.lesions, &mut labels);
    incidental(&mut rng, &mut labels);

    let spacing = Spacing::new(SPACING[0], SPACING[1], SPACING[2]).expect("positive spacing");
    let mut hu = Vec::with_capacity(b.dims.len());
    for i in 0..b.dims.len() {
        let (x, y, _) = b.dims.coords(i);
        let body = (1..NX - 1).contains(&x) && (2..NY - 1).contains(&y);
        hu.push(hu_of(b.organs[i], b.lesions[i], body) + rng.gen_range(-20.0..20.0));
    }
    let features = features.then(|| feature_field(&b, &mut rng));
    let organ_names: BTreeMap<u32, String> = LOBES
        .iter()
        .enumerate()
        .map(|(k, n)| (k as u32 + 1, n.to_string()))
        .chain([(PLEURA_LABEL, PLEURAL_SPACE.to_string()), (HEART_LABEL, "heart".to_string())])
        .collect();
    let lesion_names: BTreeMap<u32, String> = LESION_LABELS.iter().enumerate().map(|(k, n)| (k as u32 + 1, n.to_string())).collect();
    let source = if matches!(arch, 1 | 2) && index.is_multiple_of(2) { "nsclc" } else { "ct-rate" };
    let case_id = format!("synth-{index:04}");
    let case = Case {
        meta: CaseMeta {
            case_id,
            source: source.to_string(),
            labels,
            volume: "ct.f32".into(),
            organs: "organs.f32".into(),
            lesions: "lesions.f32".into(),
            features: features.as_ref().map(|_| FEATURES_FILE.into()),
        },
        hu: ScalarVolume::new(b.dims, spacing, hu).expect("sized"),
        organs: LabelVolume::new(b.dims, spacing, b.organs, organ_names).expect("sized"),
        lesions: LabelVolume::new(b.dims, spacing, b.lesions, lesion_names).expect("sized"),
    };
    SynthCase { case, features }
}

pub fn synth_cohort(cfg: &SynthConfig, exec: Execution) -> Vec<SynthCase> {
    exec.map_range(cfg.cases, |i| synth_case(i, cfg.seed, cfg.features))
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Tensor(#[from] cflt::CfltError),
}

/// Writes one directory per case plus the shared lesion embedding.
pub fn write_cohort(root: &Path, cases: &[SynthCase]) -> Result<(), SynthError> {
    std::fs::create_dir_all(root).map_err(|source| CaseError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    for c in cases {
        let dir = root.join(c.case.id());
        case::save_case(&dir, &c.case)?;
        if let Some(f) = &c.features {
            cflt::write_feature_field(&dir.join(FEATURES_FILE), f)?;
        }
    }
    cflt::write_embedding(&root.join(EMBEDDING_FILE), &lesion_embedding())?;
    Ok(())
}
