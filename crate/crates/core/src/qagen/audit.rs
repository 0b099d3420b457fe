//! Re-derivation of an item's answer from its provenance alone.

use std::collections::BTreeSet;

use super::facts::Side;
use super::generators::{attenuation_label, evaluate_phenotypes, labels_in_region, volume_loss_truth};
use super::mcq::{format_value, percentile_grid_value};
use super::rules::{hu_bin, hu_bin_labels, RuleTables};
use super::{VqaItem, NO, NO_VOLUME_LOSS, VOLUME_LOSS, YES};
use crate::lesion::GradingBins;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AuditError {
    #[error("{key}: provenance lacks {field:?}")]
    MissingField { key: String, field: String },
    #[error("{key}: unknown rule {rule:?}")]
    UnknownRule { key: String, rule: String },
    #[error("{key}: provenance gives {expected:?} but the marked answer is {found:?}")]
    Mismatch {
        key: String,
        expected: String,
        found: String,
    },
    #[error("{key}: {msg}")]
    Invalid { key: String, msg: String },
}

fn yes_no(b: bool) -> String {
    if b { YES } else { NO }.to_string()
}

/// The answer text implied by `item.provenance`.
pub fn expected_answer(item: &VqaItem, rules: &RuleTables) -> Result<String, AuditError> {
    let key = item.key();
    let p = &item.provenance;
    let num = |f: &str| -> Result<f64, AuditError> {
        p.get::<f64>(f).ok_or_else(|| AuditError::MissingField {
            key: key.clone(),
            field: f.into(),
        })
    };
    let text = |f: &str| -> Result<String, AuditError> {
        p.get::<String>(f).ok_or_else(|| AuditError::MissingField {
            key: key.clone(),
            field: f.into(),
        })
    };
    let labels = || -> Result<BTreeSet<String>, AuditError> {
        p.get("labels").ok_or_else(|| AuditError::MissingField {
            key: key.clone(),
            field: "labels".into(),
        })
    };
    let invalid = |e: super::QagenError| AuditError::Invalid {
        key: key.clone(),
        msg: e.to_string(),
    };
    Ok(match p.rule.as_str() {
        "label-region-existence" => {
            let hits = labels_in_region(&labels()?, rules, &text("region")?).map_err(invalid)?;
            yes_no(!hits.is_empty())
        }
        "phenotype-rules" => {
            let e = evaluate_phenotypes(&labels()?, rules).map_err(invalid)?;
            match e.matches.as_slice() {
                [one] => one.clone(),
                other => {
                    return Err(AuditError::Invalid {
                        key,
                        msg: format!("{} phenotypes match", other.len()),
                    })
                }
            }
        }
        "phenotype-mixing" => yes_no(evaluate_phenotypes(&labels()?, rules).map_err(invalid)?.active.len() >= 2),
        "largest-instance-max-inplane-diameter" => format_value(num("diameter_mm")?, 1, "mm"),
        "largest-instance-max-overlap-lobe" => text("region")?,
        "largest-instance-max-area-slice-percentile" => format!("{}%", percentile_grid_value(num("percentile")?)),
        "nodule-component-count" | "nodule-count-in-lobe" => (num("count")? as u64).to_string(),
        "organ-volume-above-cohort-percentile" => yes_no(num("volume_ml")? > num("threshold_ml")?),
        "organ-volume-below-cohort-percentile" => yes_no(num("volume_ml")? < num("threshold_ml")?),
        "largest-lesion-hu-contrast-bin" => {
            let edges: Vec<f64> = p.get("edges").ok_or_else(|| AuditError::MissingField {
                key: key.clone(),
                field: "edges".into(),
            })?;
            if edges.is_empty() {
                return Err(AuditError::Invalid { key, msg: "no edges".into() });
            }
            hu_bin_labels(&edges)[hu_bin(&edges, num("delta_hu")?)].clone()
        }
        "attenuation-occupancy-dominance" => {
            attenuation_label(num("ggo_ml")?, num("consolidation_ml")?, num("margin")?).to_string()
        }
        "opacity-side-volume-ratio" => {
            let side: Side = p.get("side").ok_or_else(|| AuditError::MissingField {
                key: key.clone(),
                field: "side".into(),
            })?;
            let (loss, _) = volume_loss_truth(
                side,
                num("left_ml")?,
                num("right_ml")?,
                num("median_lr_ratio")?,
                num("margin")?,
            );
            if loss { VOLUME_LOSS } else { NO_VOLUME_LOSS }.to_string()
        }
        "emphysema-index-grade" | "effusion-ratio-grade" => {
            let bins: GradingBins = p.get("bins").ok_or_else(|| AuditError::MissingField {
                key: key.clone(),
                field: "bins".into(),
            })?;
            bins.grade(num("index")?).to_string()
        }
        "organ-mean-hu" => format_value(num("mean_hu")?, 0, "HU"),
        "organ-volume" => format_value(num("volume_ml")?, 1, "mL"),
        "largest-lesion-volume" => format_value(num("volume_ml")?, 2, "mL"),
        other => {
            return Err(AuditError::UnknownRule {
                key,
                rule: other.to_string(),
            })
        }
    })
}

pub fn audit_item(item: &VqaItem, rules: &RuleTables) -> Result<(), AuditError> {
    let expected = expected_answer(item, rules)?;
    let found = item.options.get(item.answer_index).cloned().unwrap_or_default();
    if expected != found {
        return Err(AuditError::Mismatch {
            key: item.key(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Audits every item, returning all failures.
pub fn audit_manifest(items: &[VqaItem], rules: &RuleTables) -> Vec<AuditError> {
    items.iter().filter_map(|it| audit_item(it, rules).err()).collect()
}
