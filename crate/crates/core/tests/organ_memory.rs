use std::collections::BTreeMap;

use slicewise::memory::{init_memory, AgentUpdate, Entry, EvidenceMemory, MemoryError, OrganRecord};
use slicewise::volume::{Dims, LabelVolume, ScalarVolume, Spacing};

/// Liver: 2000 voxels at 40 HU over z 10..=45. Spleen: 300 voxels at 50 HU
/// over z 20..=30. Unit spacing.
fn two_organ_scene() -> (LabelVolume, ScalarVolume) {
    let dims = Dims::new(64, 64, 50).unwrap();
    let names: BTreeMap<u32, String> = [(1, "liver".to_string()), (2, "spleen".to_string())].into();
    let mut labels = LabelVolume::empty(dims, Spacing::unit(), names);
    let mut hu = vec![-1000f32; dims.len()];
    let mut place = |label: u32, n: usize, z0: usize, depth: usize, x0: usize, value: f32| {
        let mut per_slice = vec![0usize; depth];
        for k in 0..n {
            let dz = k * depth / n;
            let j = per_slice[dz];
            per_slice[dz] += 1;
            let (x, y, z) = (x0 + j % 16, j / 16, z0 + dz);
            labels.set(x, y, z, label);
            hu[dims.index(x, y, z)] = value;
        }
    };
    place(1, 2000, 10, 36, 0, 40.0);
    place(2, 300, 20, 11, 32, 50.0);
    (labels, ScalarVolume::new(dims, Spacing::unit(), hu).unwrap())
}

#[test]
fn two_organ_records() {
    let (labels, hu) = two_organ_scene();
    let out = init_memory(&labels, &hu, &["liver", "spleen"]).unwrap();
    assert!(out.omitted.is_empty());
    let organs: Vec<&OrganRecord> = out.memory.organs().collect();
    assert_eq!(
        organs,
        vec![
            &OrganRecord { organ: "liver".into(), size_ml: 2.0, mean_hu: 40.0, z_range: (10, 45) },
            &OrganRecord { organ: "spleen".into(), size_ml: 0.3, mean_hu: 50.0, z_range: (20, 30) },
        ]
    );
}

#[test]
fn rendering_golden_text() {
    let (labels, hu) = two_organ_scene();
    let mut mem = init_memory(&labels, &hu, &["liver", "spleen"]).unwrap().memory;
    assert_eq!(
        mem.render(),
        "organ=liver size_ml=2.00 mean_hu=40.00 z=[10,45]\n\
         organ=spleen size_ml=0.30 mean_hu=50.00 z=[20,30]\n"
    );
    mem.append(Entry::Update(AgentUpdate {
        turn: 1,
        rationale: "liver is larger".into(),
        answer: "A".into(),
        evidence_refs: vec![0, 1],
        assumptions: vec!["no contrast".into()],
        attached_slice: None,
    }))
    .unwrap();
    let text = mem.render();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(text.lines().last().unwrap(), "turn=1 answer=A evidence=[0,1] assumptions=[\"no contrast\"]");
    assert_eq!(EvidenceMemory::parse_rendered(&text).unwrap().render(), text);
}

#[test]
fn missing_organs_are_omitted_in_order() {
    let (labels, hu) = two_organ_scene();
    let out = init_memory(&labels, &hu, &["kidney", "spleen", "heart"]).unwrap();
    assert_eq!(out.omitted, vec!["kidney".to_string(), "heart".to_string()]);
    assert_eq!(out.memory.len(), 1);
    assert!(matches!(init_memory(&labels, &hu, &["kidney"]), Err(MemoryError::AllOrgansEmpty)));
}
