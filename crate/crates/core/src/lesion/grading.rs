//! Ordinal grading of continuous indices.

use serde::{Deserialize, Serialize};

use super::{LesionError, Result};

/// Ordered `(upper_bound, label)` bins; the last bound is +inf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BinsSpec", into = "BinsSpec")]
pub struct GradingBins {
    bounds: Vec<f64>,
    labels: Vec<String>,
}

/// Serialised form: finite cutoffs plus one more label than cutoffs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinsSpec {
    pub cutoffs: Vec<f64>,
    pub labels: Vec<String>,
}

impl TryFrom<BinsSpec> for GradingBins {
    type Error = LesionError;
    fn try_from(s: BinsSpec) -> Result<Self> {
        GradingBins::from_cutoffs(&s.cutoffs, &s.labels)
    }
}

impl From<GradingBins> for BinsSpec {
    fn from(b: GradingBins) -> Self {
        BinsSpec {
            cutoffs: b.cutoffs().to_vec(),
            labels: b.labels,
        }
    }
}

impl GradingBins {
    /// `cutoffs` strictly increasing and finite; `labels.len() == cutoffs.len() + 1`.
    pub fn from_cutoffs<S: AsRef<str>>(cutoffs: &[f64], labels: &[S]) -> Result<Self> {
        if labels.len() != cutoffs.len() + 1 {
            return Err(LesionError::InvalidBins(format!(
                "{} cutoffs need {} labels, got {}",
                cutoffs.len(),
                cutoffs.len() + 1,
                labels.len()
            )));
        }
        if cutoffs.iter().any(|c| !c.is_finite()) {
            return Err(LesionError::InvalidBins("cutoffs must be finite".into()));
        }
        if cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LesionError::InvalidBins("cutoffs must be strictly increasing".into()));
        }
        let mut bounds = cutoffs.to_vec();
        bounds.push(f64::INFINITY);
        Ok(GradingBins {
            bounds,
            labels: labels.iter().map(|l| l.as_ref().to_string()).collect(),
        })
    }

    pub fn cutoffs(&self) -> &[f64] {
        &self.bounds[..self.bounds.len() - 1]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn bins(&self) -> impl Iterator<Item = (f64, &str)> {
        self.bounds.iter().copied().zip(self.labels.iter().map(String::as_str))
    }

    /// Index of the bin holding `value`; a value equal to a bound falls in
    /// the higher bin.
    pub fn bin_index(&self, value: f64) -> usize {
        self.bounds
            .iter()
            .position(|&b| value < b)
            .unwrap_or(self.bounds.len() - 1)
    }

    pub fn grade(&self, value: f64) -> &str {
        &self.labels[self.bin_index(value)]
    }
}

pub fn grade(value: f64, bins: &GradingBins) -> &str {
    bins.grade(value)
}

/// Sample quantile with linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(LesionError::CohortTooSmall { have: 0, need: 1 });
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, p))
}

/// Cohort-calibrated bins with bounds at the `i / k` quantiles.
pub fn quantile_bins<S: AsRef<str>>(cohort: &[f64], k: usize, labels: &[S]) -> Result<GradingBins> {
    if k < 2 || cohort.len() < k {
        return Err(LesionError::CohortTooSmall {
            have: cohort.len(),
            need: k.max(2),
        });
    }
    if cohort.iter().any(|v| !v.is_finite()) {
        return Err(LesionError::InvalidBins("cohort holds non-finite values".into()));
    }
    let mut v = cohort.to_vec();
    v.sort_by(f64::total_cmp);
    let cutoffs: Vec<f64> = (1..k).map(|i| quantile_sorted(&v, i as f64 / k as f64)).collect();
    if v[0] == v[v.len() - 1] || cutoffs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LesionError::DegenerateCohort);
    }
    GradingBins::from_cutoffs(&cutoffs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_goes_up() {
        let b = GradingBins::from_cutoffs(&[0.05, 0.15], &["mild", "moderate", "severe"]).unwrap();
        assert_eq!(b.grade(0.0), "mild");
        assert_eq!(b.grade(0.0499999), "mild");
        assert_eq!(b.grade(0.05), "moderate");
        assert_eq!(b.grade(0.15), "severe");
        assert_eq!(b.grade(1.0), "severe");
    }

    #[test]
    fn median_bound_of_one_to_hundred() {
        let c: Vec<f64> = (1..=100).map(f64::from).collect();
        let b = quantile_bins(&c, 2, &["low", "high"]).unwrap();
        assert_eq!(b.cutoffs(), &[50.5]);
    }

    #[test]
    fn constant_cohort_is_degenerate() {
        assert!(matches!(
            quantile_bins(&[3.0; 50], 3, &["a", "b", "c"]),
            Err(LesionError::DegenerateCohort)
        ));
        assert!(matches!(
            quantile_bins(&[1.0], 2, &["a", "b"]),
            Err(LesionError::CohortTooSmall { .. })
        ));
    }

    #[test]
    fn invalid_bins_rejected() {
        assert!(GradingBins::from_cutoffs(&[0.2, 0.1], &["a", "b", "c"]).is_err());
        assert!(GradingBins::from_cutoffs(&[0.1], &["a"]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let b = GradingBins::from_cutoffs(&[0.02, 0.1], &["small", "moderate", "large"]).unwrap();
        let j = serde_json::to_string(&b).unwrap();
        assert_eq!(j, r#"{"cutoffs":[0.02,0.1],"labels":["small","moderate","large"]}"#);
        assert_eq!(serde_json::from_str::<GradingBins>(&j).unwrap(), b);
    }
}
