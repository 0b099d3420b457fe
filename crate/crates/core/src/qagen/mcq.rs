//! Numeric multiple-choice construction: distractors, dedup, shuffling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::{QagenError, Result};

/// How distractors are derived from the true value.
#[derive(Debug, Clone, PartialEq)]
pub enum DistractorPolicy {
    /// `truth * f` for each factor; sizes and volumes.
    Multiplicative { factors: Vec<f64>, decimals: usize, unit: String },
    /// `truth +- 1, +- 2`, never negative.
    Count,
    /// A window of consecutive bins containing the true bin.
    AdjacentBins { labels: Vec<String> },
    /// Percent positions on a grid of `step`; the true option is the grid
    /// value nearest the measured percentile.
    Percentile { step: u32 },
    /// `truth + k * step` for nonzero `k`; signed quantities such as HU.
    Additive { step: f64, decimals: usize, unit: String },
}

/// A generated question body before it is wrapped into an item.
#[derive(Debug, Clone, PartialEq)]
pub struct Mcq {
    pub options: Vec<String>,
    pub answer_index: usize,
    /// Set when the primary policy collided and additive offsets were used.
    pub fallback: bool,
}

pub const NUMERIC_OPTIONS: usize = 4;

pub fn format_value(v: f64, decimals: usize, unit: &str) -> String {
    // avoid "-0.0"
    let v = if v == 0.0 { 0.0 } else { v };
    if unit.is_empty() {
        format!("{v:.decimals$}")
    } else {
        format!("{v:.decimals$} {unit}")
    }
}

fn dedup_keep_order(v: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    v.into_iter().filter(|s| seen.insert(s.clone())).collect()
}

/// Shuffles `options` and returns the new index of `options[0]`.
pub fn shuffle_with_truth_first(mut options: Vec<String>, rng: &mut ChaCha20Rng) -> (Vec<String>, usize) {
    let truth = options[0].clone();
    options.shuffle(rng);
    let idx = options.iter().position(|o| *o == truth).expect("truth is present");
    (options, idx)
}

fn additive(truth: f64, step: f64, decimals: usize, unit: &str, nonneg: bool) -> Vec<String> {
    let mut out = vec![format_value(truth, decimals, unit)];
    for k in 1..=12 {
        for sign in [1.0, -1.0] {
            let v = truth + sign * k as f64 * step;
            if nonneg && v < 0.0 {
                continue;
            }
            out.push(format_value(v, decimals, unit));
        }
        out = dedup_keep_order(out);
        if out.len() >= NUMERIC_OPTIONS {
            out.truncate(NUMERIC_OPTIONS);
            return out;
        }
    }
    out
}

/// Builds a four-option question around `truth`.
pub fn gen_numeric_mcq(truth: f64, policy: &DistractorPolicy, rng: &mut ChaCha20Rng) -> Result<Mcq> {
    if !truth.is_finite() {
        return Err(QagenError::NonFiniteTruth);
    }
    let (raw, fallback) = match policy {
        DistractorPolicy::Multiplicative { factors, decimals, unit } => {
            let mut v = vec![format_value(truth, *decimals, unit)];
            v.extend(factors.iter().map(|f| format_value(truth * f, *decimals, unit)));
            let v = dedup_keep_order(v);
            if v.len() >= NUMERIC_OPTIONS {
                (v, false)
            } else {
                let step = 10f64.powi(-(*decimals as i32)).max(truth.abs() * 0.25);
                (additive(truth, step, *decimals, unit, truth >= 0.0), true)
            }
        }
        DistractorPolicy::Count => {
            let t = truth.round().max(0.0) as i64;
            let mut near: Vec<i64> = [-2, -1, 1, 2].iter().map(|d| t + d).filter(|&v| v >= 0).collect();
            near.shuffle(rng);
            near.truncate(3);
            let mut extra = t + 3;
            while near.len() < 3 {
                near.push(extra);
                extra += 1;
            }
            let mut v = vec![t.to_string()];
            v.extend(near.iter().map(|n| n.to_string()));
            (v, false)
        }
        DistractorPolicy::AdjacentBins { labels } => {
            if labels.len() < NUMERIC_OPTIONS {
                return Err(QagenError::DistractorCollision);
            }
            let b = truth as usize;
            if b >= labels.len() || truth.fract() != 0.0 || truth < 0.0 {
                return Err(QagenError::NonFiniteTruth);
            }
            let lo = b.saturating_sub(NUMERIC_OPTIONS - 1);
            let hi = b.min(labels.len() - NUMERIC_OPTIONS);
            let start = rng.gen_range(lo..=hi);
            let mut v = vec![labels[b].clone()];
            v.extend((start..start + NUMERIC_OPTIONS).filter(|&i| i != b).map(|i| labels[i].clone()));
            (v, false)
        }
        DistractorPolicy::Percentile { step } => {
            let q = percentile_grid_value(truth);
            let step = *step as i64;
            let steps: Vec<i64> = (-5..=5).filter(|m| (0..=100).contains(&(q + m * step))).collect();
            let pos0 = steps.iter().position(|&m| m == 0).expect("q is on the grid");
            let lo = pos0.saturating_sub(NUMERIC_OPTIONS - 1);
            let hi = pos0.min(steps.len().saturating_sub(NUMERIC_OPTIONS));
            if steps.len() < NUMERIC_OPTIONS {
                return Err(QagenError::DistractorCollision);
            }
            let start = rng.gen_range(lo..=hi);
            let mut v = vec![format!("{q}%")];
            v.extend(
                steps[start..start + NUMERIC_OPTIONS]
                    .iter()
                    .filter(|&&m| m != 0)
                    .map(|m| format!("{}%", q + m * step)),
            );
            (v, false)
        }
        DistractorPolicy::Additive { step, decimals, unit } => (additive(truth, *step, *decimals, unit, false), false),
    };
    if raw.len() < NUMERIC_OPTIONS {
        return Err(QagenError::DistractorCollision);
    }
    let (options, answer_index) = shuffle_with_truth_first(raw, rng);
    Ok(Mcq {
        options,
        answer_index,
        fallback,
    })
}

/// Nearest multiple of 10 to a percentile in [0, 100], halves rounding up.
pub fn percentile_grid_value(p: f64) -> i64 {
    ((p.clamp(0.0, 100.0) / 10.0 + 0.5).floor() as i64 * 10).min(100)
}

/// Option whose numeric percent value is closest to `p`; ties to the lower value.
pub fn nearest_percent_option(options: &[String], p: f64) -> Option<usize> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, o) in options.iter().enumerate() {
        let v: f64 = o.trim_end_matches('%').parse().ok()?;
        let d = (v - p).abs();
        if best.is_none_or(|(_, bd, bv)| d < bd || (d == bd && v < bv)) {
            best = Some((i, d, v));
        }
    }
    best.map(|(i, _, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    fn sorted(mut v: Vec<String>) -> Vec<String> {
        v.sort();
        v
    }

    #[test]
    fn size_policy() {
        let p = DistractorPolicy::Multiplicative {
            factors: vec![0.5, 2.0, 4.0],
            decimals: 1,
            unit: "mm".into(),
        };
        let m = gen_numeric_mcq(12.0, &p, &mut rng()).unwrap();
        assert_eq!(sorted(m.options.clone()), sorted(vec!["6.0 mm".into(), "12.0 mm".into(), "24.0 mm".into(), "48.0 mm".into()]));
        assert_eq!(m.options[m.answer_index], "12.0 mm");
        assert!(!m.fallback);
        let z = gen_numeric_mcq(0.0, &p, &mut rng()).unwrap();
        assert!(z.fallback);
        assert_eq!(z.options[z.answer_index], "0.0 mm");
        assert_eq!(z.options.len(), 4);
    }

    #[test]
    fn count_policy() {
        let m = gen_numeric_mcq(0.0, &DistractorPolicy::Count, &mut rng()).unwrap();
        assert_eq!(sorted(m.options.clone()), vec!["0", "1", "2", "3"]);
        assert_eq!(m.options[m.answer_index], "0");
        for t in 0..10 {
            let m = gen_numeric_mcq(t as f64, &DistractorPolicy::Count, &mut rng()).unwrap();
            assert_eq!(m.options.len(), 4);
            assert!(m.options.iter().all(|o| o.parse::<i64>().unwrap() >= 0));
        }
    }

    #[test]
    fn percentile_policy_truth_is_nearest() {
        for p in [0.0, 4.9, 5.0, 33.3, 50.0, 94.0, 100.0] {
            for seed in 0..20 {
                let mut r = ChaCha20Rng::seed_from_u64(seed);
                let m = gen_numeric_mcq(p, &DistractorPolicy::Percentile { step: 20 }, &mut r).unwrap();
                assert_eq!(nearest_percent_option(&m.options, p), Some(m.answer_index), "p={p}");
            }
        }
    }

    #[test]
    fn adjacent_bins_window() {
        let labels: Vec<String> = (0..8).map(|i| format!("bin{i}")).collect();
        for b in 0..8 {
            let m = gen_numeric_mcq(b as f64, &DistractorPolicy::AdjacentBins { labels: labels.clone() }, &mut rng()).unwrap();
            assert_eq!(m.options[m.answer_index], labels[b]);
            let mut idx: Vec<usize> = m.options.iter().map(|o| o[3..].parse().unwrap()).collect();
            idx.sort();
            assert_eq!(idx[3] - idx[0], 3, "{idx:?}");
        }
    }

    #[test]
    fn additive_signed() {
        let p = DistractorPolicy::Additive { step: 20.0, decimals: 0, unit: "HU".into() };
        let m = gen_numeric_mcq(-5.0, &p, &mut rng()).unwrap();
        assert_eq!(m.options[m.answer_index], "-5 HU");
        assert_eq!(m.options.len(), 4);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(gen_numeric_mcq(f64::NAN, &DistractorPolicy::Count, &mut rng()).is_err());
    }
}
