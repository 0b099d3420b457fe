//! Rule tables driving question generation, loaded from TOML.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{QagenError, Result};
use crate::lesion::{GradingBins, LesionError};

/// Rule tables shipped with the crate.
pub const DEFAULT_CHEST_RULES: &str = include_str!("../../rules/chest.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeRule {
    pub name: String,
    pub key: BTreeSet<String>,
    #[serde(default)]
    pub disallowed: BTreeSet<String>,
    #[serde(default)]
    pub extras: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorTable {
    pub size_factors: Vec<f64>,
    pub percentile_step: u32,
    pub hu_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HuDifferenceRule {
    /// Finite bin edges in HU, strictly increasing.
    pub edges: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttenuationRule {
    pub margin: f64,
    pub ggo_labels: Vec<String>,
    pub consolidation_labels: Vec<String>,
    /// Half-open `(lo, hi]` HU range used when no pattern masks exist.
    pub ggo_hu: [f64; 2],
    pub consolidation_hu: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeLossRule {
    pub margin: f64,
    pub opacity_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSizeRule {
    pub p_hi: f64,
    pub p_lo: f64,
    pub min_cohort: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradingMode {
    /// Cohort tertiles when the cohort allows it, otherwise fixed cutoffs.
    Auto,
    Fixed,
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingRule {
    pub mode: GradingMode,
    pub cutoffs: Vec<f64>,
    pub labels: Vec<String>,
}

impl GradingRule {
    pub fn fixed_bins(&self) -> Result<GradingBins> {
        Ok(GradingBins::from_cutoffs(&self.cutoffs, &self.labels)?)
    }

    /// Bins for this rule given the positive-index cohort.
    pub fn resolve(&self, cohort: &[f64], min_cohort: usize) -> Result<GradingBins> {
        let quantile = || crate::lesion::quantile_bins(cohort, self.labels.len(), &self.labels);
        match self.mode {
            GradingMode::Fixed => self.fixed_bins(),
            GradingMode::Quantile => {
                if cohort.len() < min_cohort {
                    return Err(LesionError::CohortTooSmall {
                        have: cohort.len(),
                        need: min_cohort,
                    }
                    .into());
                }
                Ok(quantile()?)
            }
            GradingMode::Auto => {
                if cohort.len() >= min_cohort {
                    match quantile() {
                        Ok(b) => return Ok(b),
                        Err(LesionError::DegenerateCohort) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
                self.fixed_bins()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingTables {
    pub emphysema: GradingRule,
    pub effusion: GradingRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleTables {
    #[serde(default)]
    pub incidental: BTreeSet<String>,
    /// Disease label to anatomical region.
    pub regions: BTreeMap<String, String>,
    #[serde(rename = "phenotype")]
    pub phenotypes: Vec<PhenotypeRule>,
    pub distractors: DistractorTable,
    pub hu_difference: HuDifferenceRule,
    pub attenuation: AttenuationRule,
    pub volume_loss: VolumeLossRule,
    pub organ_size: OrganSizeRule,
    pub grading: GradingTables,
}

impl Default for RuleTables {
    fn default() -> Self {
        RuleTables::from_toml(DEFAULT_CHEST_RULES).expect("bundled rule tables are valid")
    }
}

impl RuleTables {
    pub fn from_toml(text: &str) -> Result<Self> {
        let t: RuleTables = toml::from_str(text).map_err(|e| QagenError::Rules(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| QagenError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| QagenError::Rules(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("rule tables serialise")
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QagenError::Rules(m));
        let known = |l: &String| self.regions.contains_key(l);
        for p in &self.phenotypes {
            if p.key.is_empty() {
                return bad(format!("phenotype {:?} has no key labels", p.name));
            }
            for l in p.key.iter().chain(&p.disallowed).chain(&p.extras) {
                if !known(l) {
                    return bad(format!("phenotype {:?} uses unmapped label {l:?}", p.name));
                }
            }
        }
        for (i, a) in self.phenotypes.iter().enumerate() {
            for b in &self.phenotypes[i + 1..] {
                if a.name == b.name {
                    return bad(format!("duplicate phenotype {:?}", a.name));
                }
                if a.key.is_subset(&b.key) || b.key.is_subset(&a.key) {
                    return bad(format!("key sets of {:?} and {:?} are nested", a.name, b.name));
                }
            }
        }
        if let Some(l) = self.incidental.iter().find(|l| !known(l)) {
            return bad(format!("incidental label {l:?} is unmapped"));
        }
        let e = &self.hu_difference.edges;
        if e.len() < 3 || e.windows(2).any(|w| w[0] >= w[1]) || e.iter().any(|v| !v.is_finite()) {
            return bad("hu_difference.edges must be >= 3 finite, strictly increasing values".into());
        }
        if self.distractors.size_factors.len() < 3
            || self.distractors.size_factors.iter().any(|&f| !(f > 0.0) || f == 1.0)
        {
            return bad("distractors.size_factors needs >= 3 positive factors other than 1".into());
        }
        if self.distractors.percentile_step == 0 || self.distractors.percentile_step > 25 {
            return bad("distractors.percentile_step must be in 1..=25".into());
        }
        if !(self.distractors.hu_step > 0.0) {
            return bad("distractors.hu_step must be positive".into());
        }
        let os = &self.organ_size;
        if !(0.0 < os.p_lo && os.p_lo < os.p_hi && os.p_hi < 1.0) {
            return bad("organ_size needs 0 < p_lo < p_hi < 1".into());
        }
        for (name, r) in [("emphysema", &self.grading.emphysema), ("effusion", &self.grading.effusion)] {
            if r.labels.len() < 2 {
                return bad(format!("grading.{name} needs at least two labels"));
            }
            r.fixed_bins()
                .map_err(|e| QagenError::Rules(format!("grading.{name}: {e}")))?;
        }
        for m in [self.attenuation.margin, self.volume_loss.margin] {
            if !(0.0..1.0).contains(&m) {
                return bad("margins must be in [0, 1)".into());
            }
        }
        Ok(())
    }

    pub fn region_of(&self, label: &str) -> Result<&str> {
        self.regions
            .get(label)
            .map(String::as_str)
            .ok_or_else(|| QagenError::UnknownLabel(label.to_string()))
    }

    pub fn has_region(&self, region: &str) -> bool {
        self.regions.values().any(|r| r == region)
    }

    pub fn phenotype_names(&self) -> Vec<&str> {
        self.phenotypes.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn hu_bin_labels(&self) -> Vec<String> {
        hu_bin_labels(&self.hu_difference.edges)
    }

    pub fn hu_bin(&self, value: f64) -> usize {
        hu_bin(&self.hu_difference.edges, value)
    }
}

/// Bin labels for HU edges: one open bin below, one between each pair of
/// edges, one open bin above.
pub fn hu_bin_labels(edges: &[f64]) -> Vec<String> {
    let mut out = vec![format!("below {} HU", edges[0])];
    for w in edges.windows(2) {
        out.push(format!("{} to {} HU", w[0], w[1]));
    }
    out.push(format!("above {} HU", edges[edges.len() - 1]));
    out
}

/// Bin index of a HU value; a value on an edge goes to the upper bin.
pub fn hu_bin(edges: &[f64], value: f64) -> usize {
    edges.iter().take_while(|&&e| value >= e).count()
}
