//! Answer parsing, accuracy aggregation and random baselines.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::qagen::{QuestionType, Subtype, VqaItem};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("answers line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("answer for {0} has no manifest item")]
    UnknownItem(String),
    #[error("subtype {0} is not in the manifest")]
    UnknownSubtype(String),
    #[error("trials must be at least 1")]
    NoTrials,
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn letter_at_start(s: &str) -> Option<usize> {
    let b = s.as_bytes();
    let (letter, rest) = match b {
        [b'(', l, b')', rest @ ..] => (*l, rest),
        [l, rest @ ..] => (*l, rest),
        [] => return None,
    };
    if !(b'A'..=b'E').contains(&letter) {
        return None;
    }
    let closed = b.first() == Some(&b'(');
    match rest.first() {
        None => Some((letter - b'A') as usize),
        Some(b')' | b'.' | b':') => Some((letter - b'A') as usize),
        Some(c) if closed && !c.is_ascii_alphanumeric() => Some((letter - b'A') as usize),
        _ => None,
    }
}

fn contains_word(hay: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric());
    let mut from = 0;
    while let Some(pos) = hay[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        if boundary(hay[..start].chars().next_back()) && boundary(hay[end..].chars().next()) {
            return true;
        }
        from = start + needle.chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// Option index named by a model reply, or `None` when no rule applies.
///
/// A leading option letter (`B`, `B)`, `B.`, `B:`, `(B)`) wins; otherwise
/// the longest option text found as a whole phrase, ignoring case.
pub fn parse_answer(raw: &str, options: &[String]) -> Option<usize> {
    let t = raw.trim_start();
    let t = t
        .strip_prefix("Answer:")
        .or_else(|| t.strip_prefix("answer:"))
        .map_or(t, str::trim_start);
    if let Some(i) = letter_at_start(t) {
        if i < options.len() {
            return Some(i);
        }
    }
    let hay = raw.to_lowercase();
    let mut best: Option<(usize, usize)> = None;
    for (i, o) in options.iter().enumerate() {
        let o = o.to_lowercase();
        if contains_word(&hay, o.trim()) && best.is_none_or(|(_, len)| o.len() > len) {
            best = Some((i, o.len()));
        }
    }
    best.map(|(i, _)| i)
}

/// One answered item as written by an agent or baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub case_id: String,
    pub subtype: Subtype,
    /// Raw final answer text.
    pub raw: String,
    #[serde(default)]
    pub turns: usize,
    #[serde(default)]
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AnswerRecord {
    pub fn key(&self) -> String {
        format!("{}/{}", self.case_id, self.subtype)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case_id: String,
    pub subtype: Subtype,
    /// `None` for an unparseable answer, scored as wrong.
    pub predicted: Option<usize>,
    pub correct: bool,
    pub turns: usize,
    pub wall_ms: u64,
}

pub fn read_answers<R: BufRead>(r: R) -> Result<Vec<AnswerRecord>> {
    let mut out = vec![];
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| EvalError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_answers(path: &Path) -> Result<Vec<AnswerRecord>> {
    let f = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_answers(std::io::BufReader::new(f))
}

/// Scores answers against the manifest. Manifest items without an answer
/// are scored as invalid.
pub fn score(answers: &[AnswerRecord], manifest: &[VqaItem]) -> Result<Vec<EvalRecord>> {
    let by_key: HashMap<String, &AnswerRecord> = answers.iter().map(|a| (a.key(), a)).collect();
    let known: HashMap<String, ()> = manifest.iter().map(|m| (m.key(), ())).collect();
    if let Some(a) = answers.iter().find(|a| !known.contains_key(&a.key())) {
        return Err(EvalError::UnknownItem(a.key()));
    }
    let mut out: Vec<EvalRecord> = manifest
        .iter()
        .map(|it| {
            let a = by_key.get(&it.key());
            let predicted = a.and_then(|a| parse_answer(&a.raw, &it.options));
            EvalRecord {
                case_id: it.case_id.clone(),
                subtype: it.subtype,
                predicted,
                correct: predicted == Some(it.answer_index),
                turns: a.map_or(0, |a| a.turns),
                wall_ms: a.map_or(0, |a| a.wall_ms),
            }
        })
        .collect();
    out.sort_by(|a, b| (&a.case_id, a.subtype).cmp(&(&b.case_id, b.subtype)));
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl Accuracy {
    fn add(&mut self, ok: bool) {
        self.n += 1;
        self.correct += ok as usize;
        self.accuracy = self.correct as f64 / self.n as f64;
    }
}

/// Unweighted mean; 0 for an empty slice.
pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Source,
    Organ,
    Type,
}

impl std::str::FromStr for GroupBy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(GroupBy::Source),
            "organ" => Ok(GroupBy::Organ),
            "type" => Ok(GroupBy::Type),
            _ => Err(format!("unknown grouping {s:?} (source|organ|type)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub n: usize,
    pub correct: usize,
    /// Item-weighted accuracy.
    pub micro: f64,
    /// Mean of the group's per-subtype accuracies.
    #[serde(rename = "macro")]
    pub macro_: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_subtype: BTreeMap<Subtype, Accuracy>,
    /// Macro average of subtype accuracies within each question type.
    pub per_type: BTreeMap<QuestionType, f64>,
    /// Macro average over all subtypes.
    pub total_macro_subtypes: f64,
    /// Macro average over the per-type averages.
    pub total_macro_types: f64,
    pub invalid: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, BTreeMap<String, GroupRow>>,
}

fn group_key(it: &VqaItem, by: GroupBy) -> String {
    match by {
        GroupBy::Source => it.source.clone(),
        GroupBy::Organ => it.organ.clone(),
        GroupBy::Type => it.question_type.to_string(),
    }
}

/// Per-subtype, per-type and total accuracy, plus optional groupings.
pub fn aggregate(records: &[EvalRecord], manifest: &[VqaItem], group_by: &[GroupBy]) -> Result<EvalReport> {
    let items: HashMap<(String, Subtype), &VqaItem> =
        manifest.iter().map(|m| ((m.case_id.clone(), m.subtype), m)).collect();
    let mut per_subtype: BTreeMap<Subtype, Accuracy> = BTreeMap::new();
    let mut grouped: BTreeMap<GroupBy, BTreeMap<String, BTreeMap<Subtype, Accuracy>>> = BTreeMap::new();
    let mut invalid = 0;
    for r in records {
        let it = items
            .get(&(r.case_id.clone(), r.subtype))
            .ok_or_else(|| EvalError::UnknownSubtype(format!("{}/{}", r.case_id, r.subtype)))?;
        per_subtype.entry(r.subtype).or_default().add(r.correct);
        invalid += r.predicted.is_none() as usize;
        for &g in group_by {
            grouped
                .entry(g)
                .or_default()
                .entry(group_key(it, g))
                .or_default()
                .entry(r.subtype)
                .or_default()
                .add(r.correct);
        }
    }
    Ok(summarise(per_subtype, grouped, invalid))
}

fn summarise(
    per_subtype: BTreeMap<Subtype, Accuracy>,
    grouped: BTreeMap<GroupBy, BTreeMap<String, BTreeMap<Subtype, Accuracy>>>,
    invalid: usize,
) -> EvalReport {
    let mut by_type: BTreeMap<QuestionType, Vec<f64>> = BTreeMap::new();
    for (s, a) in &per_subtype {
        by_type.entry(s.question_type()).or_default().push(a.accuracy);
    }
    let per_type: BTreeMap<QuestionType, f64> = by_type.iter().map(|(t, v)| (*t, macro_average(v))).collect();
    let all: Vec<f64> = per_subtype.values().map(|a| a.accuracy).collect();
    let types: Vec<f64> = per_type.values().copied().collect();
    let groups = grouped
        .into_iter()
        .map(|(g, rows)| {
            let name = serde_json::to_value(g).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            let rows = rows
                .into_iter()
                .map(|(k, subs)| {
                    let n = subs.values().map(|a| a.n).sum::<usize>();
                    let correct = subs.values().map(|a| a.correct).sum::<usize>();
                    let accs: Vec<f64> = subs.values().map(|a| a.accuracy).collect();
                    (
                        k,
                        GroupRow {
                            n,
                            correct,
                            micro: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
                            macro_: macro_average(&accs),
                        },
                    )
                })
                .collect();
            (name, rows)
        })
        .collect();
    EvalReport {
        per_subtype,
        per_type,
        total_macro_subtypes: macro_average(&all),
        total_macro_types: macro_average(&types),
        invalid,
        groups,
    }
}

/// Report from per-subtype accuracies alone.
pub fn report_from_accuracies(acc: &BTreeMap<Subtype, f64>) -> EvalReport {
    let per_subtype = acc
        .iter()
        .map(|(s, &a)| {
            (
                *s,
                Accuracy {
                    n: 0,
                    correct: 0,
                    accuracy: a,
                },
            )
        })
        .collect();
    summarise(per_subtype, BTreeMap::new(), 0)
}

pub fn render_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:<38} {:>6} {:>8}", "type", "subtype", "n", "acc");
    for t in r.per_type.keys() {
        for (st, a) in r.per_subtype.iter().filter(|(st, _)| st.question_type() == *t) {
            let _ = writeln!(s, "{:<12} {:<38} {:>6} {:>8.3}", short_type(*t), st.key(), a.n, a.accuracy);
        }
        let _ = writeln!(s, "{:<12} {:<38} {:>6} {:>8.3}", short_type(*t), "average", "", r.per_type[t]);
    }
    let _ = writeln!(s, "total (macro over subtypes) {:>27.3}", r.total_macro_subtypes);
    let _ = writeln!(s, "total (macro over types) {:>30.3}", r.total_macro_types);
    let _ = writeln!(s, "invalid answers: {}", r.invalid);
    for (g, rows) in &r.groups {
        let _ = writeln!(s, "\nby {g}:");
        for (k, row) in rows {
            let _ = writeln!(s, "  {:<40} {:>6} micro {:.3} macro {:.3}", k, row.n, row.micro, row.macro_);
        }
    }
    s
}

fn short_type(t: QuestionType) -> &'static str {
    match t {
        QuestionType::Measurement => "measure",
        QuestionType::Recognition => "recognition",
        QuestionType::VisualReasoning => "visual",
        QuestionType::MedicalReasoning => "medical",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub items: usize,
    /// Mean of `1 / |options|` over the subtype's items.
    pub analytic: f64,
    /// Fraction of correct uniform guesses over all trials.
    pub monte_carlo: f64,
}

/// Uniform-guess accuracy per subtype, analytic and simulated.
pub fn random_baseline(
    manifest: &[VqaItem],
    seed: u64,
    trials: usize,
    exec: Execution,
) -> Result<BTreeMap<Subtype, BaselineRow>> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let hits = exec.map_slice(manifest, |it| {
        let mut rng = seed::rng(seed, seed::STREAM_RANDOM_CLIENT, &format!("baseline/{}", it.key()));
        (0..trials)
            .filter(|_| rng.gen_range(0..it.options.len()) == it.answer_index)
            .count()
    });
    let mut acc: BTreeMap<Subtype, (usize, f64, usize)> = BTreeMap::new();
    for (it, h) in manifest.iter().zip(hits) {
        let e = acc.entry(it.subtype).or_default();
        e.0 += 1;
        e.1 += 1.0 / it.options.len() as f64;
        e.2 += h;
    }
    Ok(acc
        .into_iter()
        .map(|(s, (n, inv, h))| {
            (
                s,
                BaselineRow {
                    items: n,
                    analytic: inv / n as f64,
                    monte_carlo: h as f64 / (n * trials) as f64,
                },
            )
        })
        .collect())
}

/// Per-subtype accuracy of the seeded random client, replying through the
/// structured format and scored by `parse_answer`, over `trials` passes.
/// The random client never requests a slice, so each item is one turn.
pub fn random_client_accuracy(
    manifest: &[VqaItem],
    seed: u64,
    trials: usize,
    exec: Execution,
) -> Result<BTreeMap<Subtype, f64>> {
    use crate::agent::protocol::{parse_reply, RequestMode, SYSTEM_PROMPT};
    use crate::agent::{ModelClient, ModelRequest, RandomClient};
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let client = RandomClient::new(seed);
    let hits = exec.map_slice(manifest, |it| {
        let req = ModelRequest {
            system: SYSTEM_PROMPT.to_string(),
            memory: String::new(),
            memory_len: 0,
            question: it.question.clone(),
            options: it.options.clone(),
            item_key: it.key(),
            turn: 1,
            call: 0,
            mode: RequestMode::Combined,
            image: None,
            reminder: None,
        };
        (0..trials as u64)
            .filter(|&t| {
                let text = client.with_trial(t).complete(&req).unwrap_or_default();
                parse_reply(&text, &it.options)
                    .ok()
                    .and_then(|p| parse_answer(&p.answer, &it.options))
                    == Some(it.answer_index)
            })
            .count()
    });
    let mut acc: BTreeMap<Subtype, (usize, usize)> = BTreeMap::new();
    for (it, h) in manifest.iter().zip(hits) {
        let e = acc.entry(it.subtype).or_default();
        e.0 += trials;
        e.1 += h;
    }
    Ok(acc.into_iter().map(|(s, (n, h))| (s, h as f64 / n as f64)).collect())
}

/// Subtypes whose simulated accuracy strays more than `tol` from analytic.
pub fn rand_violations(rows: &BTreeMap<Subtype, f64>, baseline: &BTreeMap<Subtype, BaselineRow>, tol: f64) -> Vec<(Subtype, f64, f64)> {
    rows.iter()
        .filter_map(|(s, &got)| {
            let want = baseline.get(s)?.analytic;
            ((got - want).abs() > tol).then_some((*s, got, want))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qagen::Provenance;

    fn opts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_examples() {
        let o = opts(&["pleural effusion", "lung nodule", "right lower lobe"]);
        assert_eq!(parse_answer("B) pleural effusion", &o), Some(1));
        assert_eq!(parse_answer("the answer is right lower lobe", &o), Some(2));
        assert_eq!(parse_answer("I am not sure", &o), None);
        assert_eq!(parse_answer("(C)", &o), Some(2));
        assert_eq!(parse_answer("A", &o), Some(0));
        assert_eq!(parse_answer("Answer: B.", &o), Some(1));
        assert_eq!(parse_answer("E) none", &o), None);
    }

    #[test]
    fn parse_word_boundaries() {
        let o = opts(&["yes", "no"]);
        assert_eq!(parse_answer("I do not know", &o), None);
        assert_eq!(parse_answer("No, nothing there", &o), Some(1));
        assert_eq!(parse_answer("a nodule is visible", &o), None);
        let o = opts(&["lobe", "right lower lobe"]);
        assert_eq!(parse_answer("in the right lower lobe", &o), Some(1));
    }

    fn item(case: &str, s: Subtype, n: usize, source: &str) -> VqaItem {
        VqaItem {
            case_id: case.into(),
            source: source.into(),
            subtype: s,
            question_type: s.question_type(),
            organ: "lung".into(),
            question: "q".into(),
            options: (0..n).map(|i| format!("opt{i}")).collect(),
            answer_index: 1,
            provenance: Provenance::new("t"),
        }
    }

    #[test]
    fn macro_examples() {
        let v = [0.82, 0.82, 0.63, 0.85, 0.73, 0.72];
        assert_eq!(format!("{:.2}", macro_average(&v)), "0.76");
        assert_eq!(macro_average(&[]), 0.0);
    }

    #[test]
    fn all_correct_and_grouping() {
        let m = vec![
            item("c1", Subtype::LungLesionExistence, 2, "s1"),
            item("c2", Subtype::LungLesionExistence, 2, "s2"),
            item("c1", Subtype::LesionCounting, 4, "s1"),
        ];
        let answers: Vec<AnswerRecord> = m
            .iter()
            .map(|it| AnswerRecord {
                case_id: it.case_id.clone(),
                subtype: it.subtype,
                raw: "B".into(),
                turns: 1,
                wall_ms: 0,
                error: None,
            })
            .collect();
        let recs = score(&answers, &m).unwrap();
        let r = aggregate(&recs, &m, &[GroupBy::Source, GroupBy::Type]).unwrap();
        assert!(r.per_subtype.values().all(|a| a.accuracy == 1.0));
        assert_eq!(r.total_macro_subtypes, 1.0);
        assert_eq!(r.groups["source"]["s2"].n, 1);
        assert_eq!(r.groups["type"]["visual-reasoning"].micro, 1.0);
        let table = render_table(&r);
        assert!(table.contains("lesion-counting"));
    }

    #[test]
    fn missing_and_unknown_answers() {
        let m = vec![item("c1", Subtype::LungLesionExistence, 2, "s")];
        let recs = score(&[], &m).unwrap();
        assert_eq!(recs[0].predicted, None);
        assert!(!recs[0].correct);
        let stray = AnswerRecord {
            case_id: "zz".into(),
            subtype: Subtype::LungLesionExistence,
            raw: "A".into(),
            turns: 0,
            wall_ms: 0,
            error: None,
        };
        assert!(matches!(score(&[stray], &m), Err(EvalError::UnknownItem(_))));
    }

    #[test]
    fn analytic_baselines() {
        let m = vec![
            item("a", Subtype::LungLesionExistence, 2, "s"),
            item("b", Subtype::EmphysemaGrading, 3, "s"),
            item("c", Subtype::LesionCounting, 4, "s"),
        ];
        let b = random_baseline(&m, 1, 10, Execution::Sequential).unwrap();
        assert_eq!(b[&Subtype::LungLesionExistence].analytic, 0.5);
        assert_eq!(format!("{:.2}", b[&Subtype::EmphysemaGrading].analytic), "0.33");
        assert_eq!(b[&Subtype::LesionCounting].analytic, 0.25);
        assert!(random_baseline(&m, 1, 0, Execution::Sequential).is_err());
    }
}
