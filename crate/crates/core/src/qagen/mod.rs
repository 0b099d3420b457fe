//! Deterministic, mask-driven multiple-choice question generation.
//!
//! Generation runs in three passes: per-case facts are measured from the
//! masks ([`facts`]), cohort statistics are pooled across cases, and each
//! subtype generator turns facts into at most one item per case. The pool
//! is then balanced and sampled ([`balance`]). Every item carries the rule
//! id and measured values its answer came from, so [`audit`] can re-derive
//! the truth without the volumes.

pub mod audit;
pub mod balance;
pub mod facts;
pub mod generators;
pub mod mcq;
pub mod rules;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::case::CaseError;
use crate::lesion::LesionError;
use crate::volume::VolumeError;

pub use balance::{balance_and_sample, BalancePolicy, BalanceReport, Shortfall};
pub use facts::{case_facts, Cohort, CaseFacts};
pub use generators::{generate_pool, GenConfig};
pub use mcq::{gen_numeric_mcq, DistractorPolicy, Mcq};
pub use rules::RuleTables;

#[derive(Debug, thiserror::Error)]
pub enum QagenError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("rule tables: {0}")]
    Rules(String),
    #[error("label {0:?} is not in the label-region map")]
    UnknownLabel(String),
    #[error("region {0:?} is not in the label-region map")]
    UnknownRegion(String),
    #[error("truth value is not finite")]
    NonFiniteTruth,
    #[error("distractors collapse to fewer than four distinct options")]
    DistractorCollision,
    #[error("case matches several phenotypes: {0:?}")]
    AmbiguousPhenotype(Vec<String>),
    #[error("no phenotype matches")]
    NoPhenotype,
    #[error("no lesion to ask about")]
    NoLesion,
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("unknown subtype {0:?}")]
    UnknownSubtype(String),
    #[error(transparent)]
    Lesion(#[from] LesionError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Case(#[from] CaseError),
}

pub type Result<T, E = QagenError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionType {
    Measurement,
    Recognition,
    VisualReasoning,
    MedicalReasoning,
}

impl QuestionType {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Measurement => "measurement",
            QuestionType::Recognition => "recognition",
            QuestionType::VisualReasoning => "visual-reasoning",
            QuestionType::MedicalReasoning => "medical-reasoning",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

macro_rules! subtypes {
    ($($v:ident => $key:literal, $ty:ident;)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum Subtype {
            $(#[serde(rename = $key)] $v,)*
        }

        impl Subtype {
            pub const ALL: &'static [Subtype] = &[$(Subtype::$v,)*];

            pub fn key(self) -> &'static str {
                match self {
                    $(Subtype::$v => $key,)*
                }
            }

            pub fn question_type(self) -> QuestionType {
                match self {
                    $(Subtype::$v => QuestionType::$ty,)*
                }
            }
        }

        impl FromStr for Subtype {
            type Err = QagenError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($key => Ok(Subtype::$v),)*
                    _ => Err(QagenError::UnknownSubtype(s.to_string())),
                }
            }
        }
    };
}

subtypes! {
    BronchusLesionExistence => "bronchus-lesion-existence", Recognition;
    LungLesionExistence => "lung-lesion-existence", Recognition;
    PleuraLesionExistence => "pleura-lesion-existence", Recognition;
    LargestLesionDiameter => "largest-lesion-diameter", VisualReasoning;
    LargestLesionLocation => "largest-lesion-location", VisualReasoning;
    LargestLesionSlice => "largest-lesion-slice", VisualReasoning;
    LesionCountByLocation => "lesion-count-by-location", VisualReasoning;
    LesionCounting => "lesion-counting", VisualReasoning;
    OrganEnlargement => "organ-enlargement", VisualReasoning;
    OrganAtrophy => "organ-atrophy", VisualReasoning;
    LesionOrganHuDifference => "lesion-organ-hu-difference", VisualReasoning;
    AttenuationPattern => "attenuation-pattern-classification", MedicalReasoning;
    VolumeLoss => "volume-loss-lesion-classification", MedicalReasoning;
    ImagingPhenotype => "imaging-phenotype-analysis", MedicalReasoning;
    PhenotypeMixing => "phenotype-mixing-identification", MedicalReasoning;
    EmphysemaGrading => "emphysema-severity-grading", MedicalReasoning;
    EffusionGrading => "pleural-effusion-grading", MedicalReasoning;
    OrganHuMeasurement => "organ-hu-measurement", Measurement;
    OrganVolumeMeasurement => "organ-volume-measurement", Measurement;
    LesionVolumeMeasurement => "lesion-volume-measurement", Measurement;
}

/// The chest question catalogue; measurement subtypes are excluded.
pub const CHEST: [Subtype; 17] = [
    Subtype::BronchusLesionExistence,
    Subtype::LungLesionExistence,
    Subtype::PleuraLesionExistence,
    Subtype::LargestLesionDiameter,
    Subtype::LargestLesionLocation,
    Subtype::LargestLesionSlice,
    Subtype::LesionCountByLocation,
    Subtype::LesionCounting,
    Subtype::OrganEnlargement,
    Subtype::OrganAtrophy,
    Subtype::LesionOrganHuDifference,
    Subtype::AttenuationPattern,
    Subtype::VolumeLoss,
    Subtype::ImagingPhenotype,
    Subtype::PhenotypeMixing,
    Subtype::EmphysemaGrading,
    Subtype::EffusionGrading,
];

pub const YES: &str = "yes";
pub const NO: &str = "no";
pub const ATTENUATION_PATTERNS: [&str; 3] = ["GGO-dominant", "consolidation-dominant", "mixed"];
pub const VOLUME_LOSS: &str = "volume-loss dominant";
pub const NO_VOLUME_LOSS: &str = "no volume loss";

impl Subtype {
    /// Fixed option contents for closed-set subtypes, `None` for numeric ones.
    pub fn closed_contents(self, rules: &RuleTables) -> Option<Vec<String>> {
        use Subtype::*;
        let s = |v: &[&str]| Some(v.iter().map(|x| x.to_string()).collect());
        match self {
            BronchusLesionExistence | LungLesionExistence | PleuraLesionExistence | OrganEnlargement
            | OrganAtrophy | PhenotypeMixing => s(&[YES, NO]),
            LargestLesionLocation => s(&crate::case::LOBES),
            AttenuationPattern => s(&ATTENUATION_PATTERNS),
            VolumeLoss => s(&[VOLUME_LOSS, NO_VOLUME_LOSS]),
            ImagingPhenotype => Some(rules.phenotypes.iter().map(|p| p.name.clone()).collect()),
            EmphysemaGrading => Some(rules.grading.emphysema.labels.clone()),
            EffusionGrading => Some(rules.grading.effusion.labels.clone()),
            _ => None,
        }
    }

    /// Options shown per item.
    pub fn option_count(self, rules: &RuleTables) -> usize {
        match self {
            // three patterns, but each item pairs the truth with one alternative
            Subtype::AttenuationPattern => 2,
            s => s
                .closed_contents(rules)
                .map_or(mcq::NUMERIC_OPTIONS, |c| c.len()),
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Rule id plus the measured values an answer was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub rule: String,
    pub values: BTreeMap<String, serde_json::Value>,
}

impl Provenance {
    pub fn new(rule: &str) -> Self {
        Provenance {
            rule: rule.to_string(),
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, v: impl Serialize) -> Self {
        self.values
            .insert(key.to_string(), serde_json::to_value(v).expect("provenance value"));
        self
    }

    pub fn get<T: serde::de::DeserializeOwned>(&self, key: &str) -> Option<T> {
        self.values
            .get(key)
            .and_then(|v| serde_json::from_value(v.clone()).ok())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaItem {
    pub case_id: String,
    pub source: String,
    pub subtype: Subtype,
    pub question_type: QuestionType,
    pub organ: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    pub provenance: Provenance,
}

impl VqaItem {
    pub fn answer(&self) -> &str {
        &self.options[self.answer_index]
    }

    /// `case_id/subtype`, unique within a balanced manifest.
    pub fn key(&self) -> String {
        format!("{}/{}", self.case_id, self.subtype)
    }

    /// Moves the correct option to position `pos`, swapping with its occupant.
    pub fn place_answer(&mut self, pos: usize) {
        self.options.swap(self.answer_index, pos);
        self.answer_index = pos;
    }

    pub fn letter(index: usize) -> char {
        (b'A' + index as u8) as char
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.answer_index >= self.options.len() {
            return Err("answer_index out of range".into());
        }
        let mut seen = std::collections::HashSet::new();
        if !self.options.iter().all(|o| seen.insert(o)) {
            return Err("options are not distinct".into());
        }
        if self.subtype.question_type() != self.question_type {
            return Err("question_type does not match subtype".into());
        }
        Ok(())
    }
}

/// Everything one generation run produces.
#[derive(Debug, Clone)]
pub struct GenerationRun {
    pub items: Vec<VqaItem>,
    pub report: BalanceReport,
    pub skips: Vec<generators::Skip>,
    pub cohort: Cohort,
    /// Size of the candidate pool before balancing.
    pub pool_size: usize,
}

/// Facts for every case, cohort statistics, candidate pool, then balancing.
pub fn generate_manifest(
    cases: &[crate::case::Case],
    rules: &RuleTables,
    analytics: &crate::lesion::report::AnalyticsConfig,
    policy: &BalancePolicy,
    exec: crate::exec::Execution,
) -> Result<GenerationRun> {
    let facts = exec
        .map_slice(cases, |c| case_facts(c, analytics, rules, crate::exec::Execution::Sequential))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    generate_from_facts(&facts, rules, policy, exec)
}

pub fn generate_from_facts(
    facts: &[CaseFacts],
    rules: &RuleTables,
    policy: &BalancePolicy,
    exec: crate::exec::Execution,
) -> Result<GenerationRun> {
    let cohort = Cohort::from_facts(facts, rules)?;
    let gen = GenConfig {
        seed: policy.seed,
        subtypes: policy.subtypes.clone(),
    };
    let (pool, skips) = generate_pool(facts, &cohort, rules, &gen, exec)?;
    let pool_size = pool.len();
    let (items, report) = balance_and_sample(pool, policy, rules);
    Ok(GenerationRun {
        items,
        report,
        skips,
        cohort,
        pool_size,
    })
}

pub fn write_manifest<W: Write>(w: &mut W, items: &[VqaItem]) -> std::io::Result<()> {
    for it in items {
        serde_json::to_writer(&mut *w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn manifest_to_string(items: &[VqaItem]) -> String {
    let mut buf = vec![];
    write_manifest(&mut buf, items).expect("in-memory write");
    String::from_utf8(buf).expect("manifest is UTF-8")
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<VqaItem>> {
    let mut out = vec![];
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| QagenError::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item: VqaItem = serde_json::from_str(&line).map_err(|e| QagenError::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        item.check().map_err(|msg| QagenError::Manifest { line: i + 1, msg })?;
        out.push(item);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<VqaItem>> {
    let f = std::fs::File::open(path).map_err(|source| QagenError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_manifest(std::io::BufReader::new(f))
}
