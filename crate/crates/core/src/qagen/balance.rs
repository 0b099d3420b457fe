//! Option-balanced, capped, source-fair sampling of the candidate pool.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::rules::RuleTables;
use super::{Subtype, VqaItem, CHEST};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancePolicy {
    pub target_per_subtype: usize,
    /// Maximum items drawn from one case across all subtypes.
    pub per_case_cap: usize,
    pub seed: u64,
    /// Subtypes to emit, in manifest order.
    pub subtypes: Vec<Subtype>,
    /// Spread correct answers evenly over option positions.
    pub balance_positions: bool,
}

impl Default for BalancePolicy {
    fn default() -> Self {
        BalancePolicy {
            target_per_subtype: 60,
            per_case_cap: 3,
            seed: 0,
            subtypes: CHEST.to_vec(),
            balance_positions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub subtype: Subtype,
    /// Option content that ran short; `None` for numeric subtypes.
    pub content: Option<String>,
    pub wanted: usize,
    pub available: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub total: usize,
    pub per_subtype: BTreeMap<Subtype, usize>,
    pub content_counts: BTreeMap<Subtype, BTreeMap<String, usize>>,
    pub per_source: BTreeMap<String, usize>,
    pub shortfalls: Vec<Shortfall>,
}

impl BalanceReport {
    pub fn render(&self) -> String {
        let mut s = format!("selected {} items\n", self.total);
        for (st, n) in &self.per_subtype {
            s.push_str(&format!("  {st}: {n}"));
            if let Some(c) = self.content_counts.get(st) {
                let parts: Vec<String> = c.iter().map(|(k, v)| format!("{k}={v}")).collect();
                s.push_str(&format!(" [{}]", parts.join(", ")));
            }
            s.push('\n');
        }
        for (src, n) in &self.per_source {
            s.push_str(&format!("  source {src}: {n}\n"));
        }
        for f in &self.shortfalls {
            match &f.content {
                Some(c) => s.push_str(&format!(
                    "shortfall {} {c:?}: wanted {}, available {}\n",
                    f.subtype, f.wanted, f.available
                )),
                None => s.push_str(&format!(
                    "shortfall {}: wanted {}, available {}\n",
                    f.subtype, f.wanted, f.available
                )),
            }
        }
        s
    }
}

fn typicality(it: &VqaItem) -> u64 {
    it.provenance.get::<u64>("typicality").unwrap_or(0)
}

fn tiebreak(seed: u64, it: &VqaItem) -> [u8; 32] {
    seed::derive(seed, seed::STREAM_SAMPLER, &it.key())
}

/// Takes up to `quota` items, cycling over sources in name order.
fn round_robin(mut bucket: Vec<VqaItem>, quota: usize, seed: u64) -> Vec<VqaItem> {
    bucket.sort_by(|a, b| {
        typicality(b)
            .cmp(&typicality(a))
            .then_with(|| tiebreak(seed, a).cmp(&tiebreak(seed, b)))
    });
    let mut by_source: BTreeMap<String, VecDeque<VqaItem>> = BTreeMap::new();
    for it in bucket {
        by_source.entry(it.source.clone()).or_default().push_back(it);
    }
    let mut out = Vec::with_capacity(quota);
    while out.len() < quota && by_source.values().any(|q| !q.is_empty()) {
        for q in by_source.values_mut() {
            if out.len() == quota {
                break;
            }
            if let Some(it) = q.pop_front() {
                out.push(it);
            }
        }
    }
    out
}

/// Selects a balanced subset of `pool`.
///
/// At most one item per (case, subtype) and `per_case_cap` per case.
/// Closed-set subtypes get an equal share per option content (within one)
/// limited by the scarcest content; subtypes with the smallest supply are
/// filled first so they get first pick of capped cases.
pub fn balance_and_sample(pool: Vec<VqaItem>, policy: &BalancePolicy, rules: &RuleTables) -> (Vec<VqaItem>, BalanceReport) {
    let wanted: HashSet<Subtype> = policy.subtypes.iter().copied().collect();
    let mut seen = HashSet::new();
    let mut by_subtype: BTreeMap<Subtype, Vec<VqaItem>> = BTreeMap::new();
    for it in pool {
        if wanted.contains(&it.subtype) && seen.insert(it.key()) {
            by_subtype.entry(it.subtype).or_default().push(it);
        }
    }
    let order_of = |s: &Subtype| policy.subtypes.iter().position(|x| x == s).unwrap_or(usize::MAX);
    let mut order: Vec<Subtype> = policy.subtypes.clone();
    order.sort_by_key(|s| (by_subtype.get(s).map_or(0, Vec::len), order_of(s)));
    order.dedup();

    let mut used: HashMap<String, usize> = HashMap::new();
    let mut report = BalanceReport::default();
    let mut selected: Vec<VqaItem> = vec![];
    for st in order {
        let cands: Vec<VqaItem> = by_subtype
            .remove(&st)
            .unwrap_or_default()
            .into_iter()
            .filter(|it| used.get(&it.case_id).copied().unwrap_or(0) < policy.per_case_cap)
            .collect();
        let target = policy.target_per_subtype;
        let mut chosen = vec![];
        match st.closed_contents(rules) {
            Some(contents) => {
                let mut buckets: BTreeMap<String, Vec<VqaItem>> =
                    contents.iter().map(|c| (c.clone(), vec![])).collect();
                for it in cands {
                    if let Some(b) = buckets.get_mut(it.answer()) {
                        b.push(it);
                    }
                }
                let n = contents.len();
                let share = |i: usize| target / n + usize::from(i < target % n);
                let min_supply = buckets.values().map(Vec::len).min().unwrap_or(0);
                let mut counts = BTreeMap::new();
                for (i, c) in contents.iter().enumerate() {
                    let bucket = buckets.remove(c).unwrap_or_default();
                    if bucket.len() < share(i) {
                        report.shortfalls.push(Shortfall {
                            subtype: st,
                            content: Some(c.clone()),
                            wanted: share(i),
                            available: bucket.len(),
                        });
                    }
                    let quota = share(i).min(min_supply);
                    let got = round_robin(bucket, quota, policy.seed);
                    counts.insert(c.clone(), got.len());
                    chosen.extend(got);
                }
                report.content_counts.insert(st, counts);
            }
            None => {
                if cands.len() < target {
                    report.shortfalls.push(Shortfall {
                        subtype: st,
                        content: None,
                        wanted: target,
                        available: cands.len(),
                    });
                }
                chosen = round_robin(cands, target, policy.seed);
            }
        }
        for it in &chosen {
            *used.entry(it.case_id.clone()).or_default() += 1;
        }
        if policy.balance_positions {
            place_answers(&mut chosen, policy.seed, st);
        }
        report.per_subtype.insert(st, chosen.len());
        selected.extend(chosen);
    }
    selected.sort_by(|a, b| {
        order_of(&a.subtype)
            .cmp(&order_of(&b.subtype))
            .then_with(|| a.case_id.cmp(&b.case_id))
    });
    for it in &selected {
        *report.per_source.entry(it.source.clone()).or_default() += 1;
    }
    report.total = selected.len();
    for s in &report.shortfalls {
        log::info!(
            "shortfall in {}{}: wanted {}, available {}",
            s.subtype,
            s.content.as_ref().map(|c| format!(" ({c})")).unwrap_or_default(),
            s.wanted,
            s.available
        );
    }
    (selected, report)
}

/// Assigns answer positions round-robin over a seeded item order.
fn place_answers(items: &mut [VqaItem], seed: u64, st: Subtype) {
    items.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut seed::rng(seed, seed::STREAM_SAMPLER, &format!("positions/{st}")));
    for (slot, &i) in idx.iter().enumerate() {
        let n = items[i].options.len();
        items[i].place_answer(slot % n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qagen::Provenance;

    fn item(case: &str, source: &str, truth: &str) -> VqaItem {
        let options = vec![truth.to_string(), if truth == "yes" { "no" } else { "yes" }.to_string()];
        VqaItem {
            case_id: case.into(),
            source: source.into(),
            subtype: Subtype::LungLesionExistence,
            question_type: Subtype::LungLesionExistence.question_type(),
            organ: "lung".into(),
            question: "q".into(),
            options,
            answer_index: 0,
            provenance: Provenance::new("t"),
        }
    }

    fn pool(yes: usize, no: usize) -> Vec<VqaItem> {
        let mut v = vec![];
        for i in 0..yes {
            v.push(item(&format!("y{i:03}"), if i % 2 == 0 { "a" } else { "b" }, "yes"));
        }
        for i in 0..no {
            v.push(item(&format!("n{i:03}"), "a", "no"));
        }
        v
    }

    fn policy(target: usize) -> BalancePolicy {
        BalancePolicy {
            target_per_subtype: target,
            subtypes: vec![Subtype::LungLesionExistence],
            ..BalancePolicy::default()
        }
    }

    #[test]
    fn exact_balance() {
        let (sel, rep) = balance_and_sample(pool(30, 30), &policy(40), &RuleTables::default());
        assert_eq!(sel.len(), 40);
        let c = &rep.content_counts[&Subtype::LungLesionExistence];
        assert_eq!((c["yes"], c["no"]), (20, 20));
        assert!(rep.shortfalls.is_empty());
        let first = sel.iter().filter(|i| i.answer_index == 0).count();
        assert_eq!(first, 20);
    }

    #[test]
    fn supply_bound() {
        let (sel, rep) = balance_and_sample(pool(50, 10), &policy(40), &RuleTables::default());
        assert_eq!(sel.len(), 20);
        let c = &rep.content_counts[&Subtype::LungLesionExistence];
        assert_eq!((c["yes"], c["no"]), (10, 10));
        assert_eq!(rep.shortfalls.len(), 1);
        assert_eq!(rep.shortfalls[0].content.as_deref(), Some("no"));
        assert!(rep.render().contains("shortfall lung-lesion-existence"));
    }

    #[test]
    fn sources_alternate_and_duplicates_drop() {
        let mut p = pool(30, 30);
        p.push(item("y000", "a", "yes"));
        let (sel, _) = balance_and_sample(p, &policy(20), &RuleTables::default());
        let yes_sources: Vec<&str> = sel
            .iter()
            .filter(|i| i.answer() == "yes")
            .map(|i| i.source.as_str())
            .collect();
        assert_eq!(yes_sources.iter().filter(|s| **s == "a").count(), 5);
        assert!(sel.iter().filter(|i| i.case_id == "y000").count() <= 1);
    }

    #[test]
    fn deterministic() {
        let a = balance_and_sample(pool(30, 30), &policy(40), &RuleTables::default());
        let b = balance_and_sample(pool(30, 30), &policy(40), &RuleTables::default());
        assert_eq!(a, b);
    }
}
