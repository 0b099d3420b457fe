use std::collections::BTreeSet;

use proptest::prelude::*;
use slicewise::memory::{AgentUpdate, Entry, EvidenceMemory, MemoryError, OrganRecord, RoiCandidate, RoiLocation};

#[derive(Debug, Clone)]
pub enum Op {
    Organ(u8),
    Roi(usize),
    Update { turn_step: usize, refs: Vec<usize>, slice: Option<usize> },
    Attach(usize),
    Drop(usize),
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..4).prop_map(Op::Organ),
        (1usize..8).prop_map(Op::Roi),
        (0usize..3, proptest::collection::vec(0usize..40, 0..4), proptest::option::of(0usize..6))
            .prop_map(|(turn_step, refs, slice)| Op::Update { turn_step, refs, slice }),
        (0usize..6).prop_map(Op::Attach),
        (0usize..6).prop_map(Op::Drop),
    ]
}

/// Reference model of what the memory should accept.
#[derive(Default)]
pub struct Model {
    len: usize,
    last_turn: usize,
    ranks: BTreeSet<usize>,
    attached_ever: BTreeSet<usize>,
    latest_attached: Option<usize>,
    dropped: BTreeSet<usize>,
}

pub fn run(ops: &[Op]) -> Result<(), TestCaseError> {
    let mut mem = EvidenceMemory::new();
    let mut model = Model::default();
    let mut snapshots: Vec<String> = vec![];
    for op in ops {
        match op {
            Op::Organ(i) => {
                let rec = OrganRecord { organ: format!("organ-{i}"), size_ml: 1.0, mean_hu: 30.0, z_range: (1, 3) };
                let id = mem.append(Entry::Organ(rec)).unwrap();
                prop_assert_eq!(id, model.len);
                model.len += 1;
            }
            Op::Roi(rank) => {
                let c = RoiCandidate { location: RoiLocation::AxialSlice(*rank), score: 0.5, rank: *rank };
                let res = mem.append(Entry::Roi(c));
                if model.ranks.insert(*rank) {
                    prop_assert_eq!(res.unwrap(), model.len);
                    model.len += 1;
                } else {
                    prop_assert!(matches!(res, Err(MemoryError::DuplicateRank(_))));
                }
            }
            Op::Update { turn_step, refs, slice } => {
                let turn = model.last_turn + turn_step;
                let u = AgentUpdate {
                    turn,
                    rationale: "r".into(),
                    answer: "A".into(),
                    evidence_refs: refs.clone(),
                    assumptions: vec![],
                    attached_slice: *slice,
                };
                let res = mem.append(Entry::Update(u));
                let dangling = refs.iter().any(|&r| r >= model.len);
                if dangling {
                    let dangling_err = matches!(res, Err(MemoryError::DanglingEvidenceRef { .. }));
                    prop_assert!(dangling_err);
                } else if *turn_step == 0 {
                    let turn_err = matches!(res, Err(MemoryError::NonIncreasingTurn { .. }));
                    prop_assert!(turn_err);
                } else {
                    prop_assert_eq!(res.unwrap(), model.len);
                    model.len += 1;
                    model.last_turn = turn;
                    model.latest_attached = *slice;
                    if let Some(z) = slice {
                        model.attached_ever.insert(*z);
                        model.dropped.remove(z);
                    }
                }
            }
            Op::Attach(z) => {
                let res = mem.attach_pixels(*z, vec![1, 2, 3]);
                if model.latest_attached == Some(*z) {
                    res.unwrap();
                    prop_assert!(mem.live_slices().contains(z));
                } else {
                    prop_assert!(matches!(res, Err(MemoryError::UnexpectedAttachment(_))));
                }
            }
            Op::Drop(z) => {
                let res = mem.drop_slice(*z);
                if model.attached_ever.contains(z) {
                    prop_assert_eq!(res.unwrap(), model.dropped.insert(*z));
                    prop_assert!(mem.pixels(*z).is_none());
                } else {
                    prop_assert!(matches!(res, Err(MemoryError::SliceNeverAttached(_))));
                }
            }
        }

        // ids stay dense and earlier entries never change
        prop_assert_eq!(mem.len(), model.len);
        for (i, e) in mem.entries().iter().enumerate() {
            prop_assert_eq!(e.id, i);
            if let Some(before) = snapshots.get(i) {
                prop_assert_eq!(&serde_json::to_string(e).unwrap(), before);
            }
            if let Entry::Update(u) = &e.entry {
                prop_assert!(u.evidence_refs.iter().all(|&r| r < i));
            }
        }
        while snapshots.len() < mem.len() {
            snapshots.push(serde_json::to_string(&mem.entries()[snapshots.len()]).unwrap());
        }
        prop_assert_eq!(mem.dropped_slices(), &model.dropped);
    }
    let back = EvidenceMemory::from_json(&mem.to_json().unwrap()).unwrap();
    prop_assert_eq!(back.entries(), mem.entries());
    Ok(())
}

