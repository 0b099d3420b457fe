//! Organ-level memory initialisation and the append-only evidence memory
//! shared by lesion targeting and the agent loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::volume::{
    self, check_geometry, mask_physical_volume, LabelVolume, ScalarVolume, VolumeError,
};

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("evidence reference {id} does not point to an earlier entry (memory holds {len})")]
    DanglingEvidenceRef { id: usize, len: usize },
    #[error("turn {got} does not follow previous turn {prev}")]
    NonIncreasingTurn { prev: usize, got: usize },
    #[error("ROI rank {0} is already present")]
    DuplicateRank(usize),
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("slice {0} was never attached by an agent update")]
    SliceNeverAttached(usize),
    #[error("no pixel payload may be attached to slice {0}: the latest update does not reference it")]
    UnexpectedAttachment(usize),
    #[error("organ list is empty")]
    EmptyOrganList,
    #[error("none of the requested organs has any voxel")]
    AllOrgansEmpty,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("memory json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("memory text line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T, E = MemoryError> = std::result::Result<T, E>;

/// Per-organ summary: size, mean HU and axial extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganRecord {
    pub organ: String,
    pub size_ml: f64,
    pub mean_hu: f64,
    pub z_range: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "at")]
pub enum RoiLocation {
    AxialSlice(usize),
    SubRegion(String),
}

impl std::fmt::Display for RoiLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RoiLocation::AxialSlice(z) => write!(f, "slice:{z}"),
            RoiLocation::SubRegion(name) => write!(f, "region:{name}"),
        }
    }
}

impl RoiLocation {
    fn parse(s: &str) -> Option<Self> {
        if let Some(z) = s.strip_prefix("slice:") {
            z.parse().ok().map(RoiLocation::AxialSlice)
        } else {
            s.strip_prefix("region:").map(|r| RoiLocation::SubRegion(r.to_string()))
        }
    }
}

/// A ranked lesion candidate emitted by lesion targeting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiCandidate {
    pub location: RoiLocation,
    pub score: f64,
    pub rank: usize,
}

pub const UNDETERMINED: &str = "undetermined";

/// One reasoning turn: rationale, current answer, cited evidence, assumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentUpdate {
    pub turn: usize,
    pub rationale: String,
    pub answer: String,
    pub evidence_refs: Vec<usize>,
    pub assumptions: Vec<String>,
    pub attached_slice: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Entry {
    Organ(OrganRecord),
    Roi(RoiCandidate),
    Update(AgentUpdate),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: usize,
    #[serde(flatten)]
    pub entry: Entry,
}

/// Append-only store of evidence. Entry ids are dense from 0 and never
/// change; only pixel payloads of attached slices can be released.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceMemory {
    entries: Vec<MemoryEntry>,
    dropped_slices: BTreeSet<usize>,
    #[serde(skip)]
    pixels: BTreeMap<usize, Vec<u8>>,
}

impl EvidenceMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> Option<&MemoryEntry> {
        self.entries.get(id)
    }

    pub fn dropped_slices(&self) -> &BTreeSet<usize> {
        &self.dropped_slices
    }

    pub fn organs(&self) -> impl Iterator<Item = &OrganRecord> {
        self.entries.iter().filter_map(|e| match &e.entry {
            Entry::Organ(o) => Some(o),
            _ => None,
        })
    }

    pub fn organ(&self, name: &str) -> Option<&OrganRecord> {
        self.organs().find(|o| o.organ == name)
    }

    pub fn rois(&self) -> impl Iterator<Item = &RoiCandidate> {
        self.entries.iter().filter_map(|e| match &e.entry {
            Entry::Roi(r) => Some(r),
            _ => None,
        })
    }

    pub fn updates(&self) -> impl Iterator<Item = &AgentUpdate> {
        self.entries.iter().filter_map(|e| match &e.entry {
            Entry::Update(u) => Some(u),
            _ => None,
        })
    }

    pub fn last_turn(&self) -> usize {
        self.updates().map(|u| u.turn).max().unwrap_or(0)
    }

    fn was_attached(&self, slice: usize) -> bool {
        self.updates().any(|u| u.attached_slice == Some(slice))
    }

    fn validate(&self, entry: &Entry) -> Result<()> {
        match entry {
            Entry::Organ(o) => {
                if !(o.size_ml.is_finite() && o.size_ml >= 0.0) || !o.mean_hu.is_finite() {
                    return Err(MemoryError::InvalidEntry(format!("organ record {o:?}")));
                }
                if o.z_range.0 > o.z_range.1 {
                    return Err(MemoryError::InvalidEntry(format!(
                        "organ {} has z_min > z_max",
                        o.organ
                    )));
                }
            }
            Entry::Roi(r) => {
                if !r.score.is_finite() || r.rank == 0 {
                    return Err(MemoryError::InvalidEntry(format!("roi candidate {r:?}")));
                }
                if self.rois().any(|x| x.rank == r.rank) {
                    return Err(MemoryError::DuplicateRank(r.rank));
                }
            }
            Entry::Update(u) => {
                if let Some(&id) = u.evidence_refs.iter().find(|&&id| id >= self.len()) {
                    return Err(MemoryError::DanglingEvidenceRef { id, len: self.len() });
                }
                let prev = self.last_turn();
                if u.turn <= prev {
                    return Err(MemoryError::NonIncreasingTurn { prev, got: u.turn });
                }
            }
        }
        Ok(())
    }

    /// Appends an entry at the next id.
    pub fn append(&mut self, entry: Entry) -> Result<usize> {
        self.validate(&entry)?;
        let id = self.entries.len();
        if let Entry::Update(AgentUpdate {
            attached_slice: Some(z),
            ..
        }) = &entry
        {
            self.dropped_slices.remove(z);
        }
        self.entries.push(MemoryEntry { id, entry });
        Ok(id)
    }

    /// Stores the pixel payload for the slice attached by the latest update.
    pub fn attach_pixels(&mut self, slice: usize, png: Vec<u8>) -> Result<()> {
        let latest = self.updates().last().and_then(|u| u.attached_slice);
        if latest != Some(slice) {
            return Err(MemoryError::UnexpectedAttachment(slice));
        }
        self.pixels.insert(slice, png);
        Ok(())
    }

    pub fn pixels(&self, slice: usize) -> Option<&[u8]> {
        self.pixels.get(&slice).map(Vec::as_slice)
    }

    /// Slices whose pixels are still held.
    pub fn live_slices(&self) -> Vec<usize> {
        self.pixels.keys().copied().collect()
    }

    /// Releases the pixel payload of a used slice. Its textual trace stays.
    /// Returns `false` when the slice was already dropped.
    pub fn drop_slice(&mut self, slice: usize) -> Result<bool> {
        if !self.was_attached(slice) {
            return Err(MemoryError::SliceNeverAttached(slice));
        }
        self.pixels.remove(&slice);
        Ok(self.dropped_slices.insert(slice))
    }

    /// Deterministic prompt text: one line per entry in id order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            match &e.entry {
                Entry::Organ(o) => writeln!(
                    out,
                    "organ={} size_ml={:.2} mean_hu={:.2} z=[{},{}]",
                    o.organ, o.size_ml, o.mean_hu, o.z_range.0, o.z_range.1
                ),
                Entry::Roi(r) => writeln!(
                    out,
                    "roi rank={} loc={} score={:.2}",
                    r.rank, r.location, r.score
                ),
                Entry::Update(u) => {
                    let ev: Vec<String> = u.evidence_refs.iter().map(usize::to_string).collect();
                    let asm: Vec<String> =
                        u.assumptions.iter().map(|a| format!("{a:?}")).collect();
                    writeln!(
                        out,
                        "turn={} answer={} evidence=[{}] assumptions=[{}]",
                        u.turn,
                        u.answer,
                        ev.join(","),
                        asm.join(", ")
                    )
                }
            }
            .expect("writing to a String cannot fail");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rebuilds a memory from its JSON export, re-checking every invariant.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: EvidenceMemory = serde_json::from_str(text)?;
        let mut mem = EvidenceMemory::new();
        for (expected, e) in raw.entries.into_iter().enumerate() {
            if e.id != expected {
                return Err(MemoryError::InvalidEntry(format!(
                    "entry id {} at position {expected}",
                    e.id
                )));
            }
            mem.append(e.entry)?;
        }
        for z in raw.dropped_slices {
            mem.drop_slice(z)?;
        }
        Ok(mem)
    }

    /// Parses text produced by [`EvidenceMemory::render`]. Values come back at
    /// the rendered precision; rationales and slice attachments are not part
    /// of the text form.
    pub fn parse_rendered(text: &str) -> Result<Self> {
        let mut mem = EvidenceMemory::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |msg: &str| MemoryError::Parse {
                line: n + 1,
                msg: msg.to_string(),
            };
            let entry = if let Some(rest) = line.strip_prefix("organ=") {
                let (name, rest) = rest.split_once(" size_ml=").ok_or_else(|| err("size_ml"))?;
                let (size, rest) = rest.split_once(" mean_hu=").ok_or_else(|| err("mean_hu"))?;
                let (hu, rest) = rest.split_once(" z=[").ok_or_else(|| err("z"))?;
                let (a, b) = rest
                    .trim_end_matches(']')
                    .split_once(',')
                    .ok_or_else(|| err("z range"))?;
                Entry::Organ(OrganRecord {
                    organ: name.to_string(),
                    size_ml: size.parse().map_err(|_| err("size_ml value"))?,
                    mean_hu: hu.parse().map_err(|_| err("mean_hu value"))?,
                    z_range: (
                        a.parse().map_err(|_| err("z_min"))?,
                        b.parse().map_err(|_| err("z_max"))?,
                    ),
                })
            } else if let Some(rest) = line.strip_prefix("roi rank=") {
                let (rank, rest) = rest.split_once(" loc=").ok_or_else(|| err("loc"))?;
                let (loc, score) = rest.rsplit_once(" score=").ok_or_else(|| err("score"))?;
                Entry::Roi(RoiCandidate {
                    location: RoiLocation::parse(loc).ok_or_else(|| err("location"))?,
                    score: score.parse().map_err(|_| err("score value"))?,
                    rank: rank.parse().map_err(|_| err("rank value"))?,
                })
            } else if let Some(rest) = line.strip_prefix("turn=") {
                let (turn, rest) = rest.split_once(" answer=").ok_or_else(|| err("answer"))?;
                let (answer, rest) = rest.split_once(" evidence=[").ok_or_else(|| err("evidence"))?;
                let (ev, rest) = rest.split_once("] assumptions=[").ok_or_else(|| err("assumptions"))?;
                let asm = rest.strip_suffix(']').ok_or_else(|| err("assumptions end"))?;
                let evidence_refs = ev
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim().parse().map_err(|_| err("evidence id")))
                    .collect::<Result<Vec<usize>>>()?;
                let assumptions = if asm.is_empty() {
                    vec![]
                } else {
                    serde_json::from_str::<Vec<String>>(&format!("[{asm}]"))
                        .map_err(|_| err("assumption list"))?
                };
                Entry::Update(AgentUpdate {
                    turn: turn.parse().map_err(|_| err("turn value"))?,
                    rationale: String::new(),
                    answer: answer.to_string(),
                    evidence_refs,
                    assumptions,
                    attached_slice: None,
                })
            } else {
                return Err(err("unrecognised entry"));
            };
            mem.append(entry)?;
        }
        Ok(mem)
    }
}

/// Result of organ-aware initialisation.
#[derive(Debug, Clone)]
pub struct InitOutcome {
    pub memory: EvidenceMemory,
    /// Requested organs with no voxels (or no label), in request order.
    pub omitted: Vec<String>,
}

/// Computes one organ record (size, mean HU, z-extent) per requested organ.
pub fn organ_record(organs: &LabelVolume, hu: &ScalarVolume, name: &str) -> Option<OrganRecord> {
    let label = organs.label_of(name)?;
    let mask = organs.mask_of(&[label]);
    let z_range = volume::z_extent(&mask).ok()?;
    let mean_hu = volume::mean_hu_with(hu, &mask, Execution::Sequential).ok()?;
    Some(OrganRecord {
        organ: name.to_string(),
        size_ml: mask_physical_volume(&mask),
        mean_hu,
        z_range,
    })
}

/// Seeds a memory with per-organ records. Lesion information is not added
/// here; lesion candidates only enter memory through lesion targeting.
pub fn init_memory<S: AsRef<str> + Sync>(
    organs: &LabelVolume,
    hu: &ScalarVolume,
    organ_list: &[S],
) -> Result<InitOutcome> {
    init_memory_with(organs, hu, organ_list, Execution::default())
}

pub fn init_memory_with<S: AsRef<str> + Sync>(
    organs: &LabelVolume,
    hu: &ScalarVolume,
    organ_list: &[S],
    exec: Execution,
) -> Result<InitOutcome> {
    if organ_list.is_empty() {
        return Err(MemoryError::EmptyOrganList);
    }
    check_geometry(
        (organs.dims(), organs.spacing()),
        (hu.dims(), hu.spacing()),
        "organ labels vs CT",
    )?;
    let records = exec.map_slice(organ_list, |name| organ_record(organs, hu, name.as_ref()));
    let mut memory = EvidenceMemory::new();
    let mut omitted = vec![];
    for (name, rec) in organ_list.iter().zip(records) {
        match rec {
            Some(r) => {
                memory.append(Entry::Organ(r))?;
            }
            None => {
                log::info!("organ `{}` has no voxels; omitted from memory", name.as_ref());
                omitted.push(name.as_ref().to_string());
            }
        }
    }
    if memory.is_empty() {
        return Err(MemoryError::AllOrgansEmpty);
    }
    Ok(InitOutcome { memory, omitted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing};

    fn update(turn: usize, refs: Vec<usize>, slice: Option<usize>) -> Entry {
        Entry::Update(AgentUpdate {
            turn,
            rationale: "r".into(),
            answer: "A".into(),
            evidence_refs: refs,
            assumptions: vec![],
            attached_slice: slice,
        })
    }

    fn organ(name: &str) -> Entry {
        Entry::Organ(OrganRecord {
            organ: name.into(),
            size_ml: 1.0,
            mean_hu: 40.0,
            z_range: (1, 2),
        })
    }

    #[test]
    fn append_ids_and_refs() {
        let mut m = EvidenceMemory::new();
        assert_eq!(m.append(organ("liver")).unwrap(), 0);
        assert_eq!(m.append(update(1, vec![0], None)).unwrap(), 1);
        assert!(matches!(
            m.append(update(2, vec![99], None)),
            Err(MemoryError::DanglingEvidenceRef { id: 99, len: 2 })
        ));
        assert!(matches!(
            m.append(update(1, vec![], None)),
            Err(MemoryError::NonIncreasingTurn { prev: 1, got: 1 })
        ));
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn drop_slice_rules() {
        let mut m = EvidenceMemory::new();
        m.append(organ("lung")).unwrap();
        assert!(matches!(m.drop_slice(7), Err(MemoryError::SliceNeverAttached(7))));
        m.append(update(1, vec![0], Some(30))).unwrap();
        m.attach_pixels(30, vec![1, 2, 3]).unwrap();
        assert_eq!(m.pixels(30), Some(&[1u8, 2, 3][..]));
        let before = m.render();
        assert!(m.drop_slice(30).unwrap());
        assert_eq!(m.dropped_slices().iter().copied().collect::<Vec<_>>(), vec![30]);
        assert_eq!(m.pixels(30), None);
        assert_eq!(m.render(), before);
        let snapshot = m.clone();
        assert!(!m.drop_slice(30).unwrap());
        assert_eq!(m, snapshot);
    }

    #[test]
    fn attach_requires_latest_update() {
        let mut m = EvidenceMemory::new();
        m.append(update(1, vec![], Some(4))).unwrap();
        assert!(m.attach_pixels(5, vec![]).is_err());
        m.attach_pixels(4, vec![]).unwrap();
    }

    #[test]
    fn render_formats() {
        let mut m = EvidenceMemory::new();
        assert_eq!(m.render(), "");
        m.append(organ("liver")).unwrap();
        m.append(Entry::Roi(RoiCandidate {
            location: RoiLocation::AxialSlice(12),
            score: 0.456,
            rank: 1,
        }))
        .unwrap();
        m.append(Entry::Update(AgentUpdate {
            turn: 1,
            rationale: "x".into(),
            answer: "B".into(),
            evidence_refs: vec![0, 1],
            assumptions: vec!["no contrast".into()],
            attached_slice: None,
        }))
        .unwrap();
        assert_eq!(
            m.render(),
            "organ=liver size_ml=1.00 mean_hu=40.00 z=[1,2]\n\
             roi rank=1 loc=slice:12 score=0.46\n\
             turn=1 answer=B evidence=[0,1] assumptions=[\"no contrast\"]\n"
        );
        let back = EvidenceMemory::parse_rendered(&m.render()).unwrap();
        assert_eq!(back.render(), m.render());
    }

    #[test]
    fn duplicate_rank_rejected() {
        let mut m = EvidenceMemory::new();
        let roi = |rank| {
            Entry::Roi(RoiCandidate {
                location: RoiLocation::SubRegion("segment 4".into()),
                score: 1.0,
                rank,
            })
        };
        m.append(roi(1)).unwrap();
        assert!(matches!(m.append(roi(1)), Err(MemoryError::DuplicateRank(1))));
    }

    #[test]
    fn json_round_trip_rechecks() {
        let mut m = EvidenceMemory::new();
        m.append(organ("liver")).unwrap();
        m.append(update(1, vec![0], Some(3))).unwrap();
        m.drop_slice(3).unwrap();
        let back = EvidenceMemory::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["entries"][1]["evidence_refs"] = serde_json::json!([5]);
        assert!(matches!(
            EvidenceMemory::from_json(&v.to_string()),
            Err(MemoryError::DanglingEvidenceRef { id: 5, .. })
        ));
    }

    #[test]
    fn init_memory_edge_cases() {
        let d = Dims::new(4, 4, 4).unwrap();
        let names = BTreeMap::from([(1, "liver".to_string()), (2, "spleen".to_string())]);
        let mut data = vec![0u32; d.len()];
        data[0] = 1;
        let lv = LabelVolume::new(d, Spacing::unit(), data, names.clone()).unwrap();
        let hu = ScalarVolume::filled(d, Spacing::unit(), 40.0);
        let out = init_memory(&lv, &hu, &["liver", "spleen", "kidney"]).unwrap();
        assert_eq!(out.memory.len(), 1);
        assert_eq!(out.omitted, vec!["spleen".to_string(), "kidney".to_string()]);
        let empty = LabelVolume::empty(d, Spacing::unit(), names);
        assert!(matches!(
            init_memory(&empty, &hu, &["liver"]),
            Err(MemoryError::AllOrgansEmpty)
        ));
        let other = ScalarVolume::filled(Dims::new(4, 4, 5).unwrap(), Spacing::unit(), 0.0);
        assert!(matches!(
            init_memory(&lv, &other, &["liver"]),
            Err(MemoryError::Volume(VolumeError::DimsMismatch(_)))
        ));
        let none: [&str; 0] = [];
        assert!(matches!(init_memory(&lv, &hu, &none), Err(MemoryError::EmptyOrganList)));
    }
}
