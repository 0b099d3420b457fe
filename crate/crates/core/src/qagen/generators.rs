//! One generator per subtype. Label-only subtypes take nothing but the
//! case's label set, so they cannot read voxel data.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::facts::{CaseFacts, Cohort, Side};
use super::mcq::{self, gen_numeric_mcq, DistractorPolicy};
use super::rules::RuleTables;
use super::{
    Provenance, QagenError, Result, Subtype, VqaItem, ATTENUATION_PATTERNS, CHEST, NO, NO_VOLUME_LOSS, VOLUME_LOSS,
    YES,
};
use crate::case::LOBES;
use crate::exec::Execution;
use crate::seed;

/// Who a question is about, with the per-item random streams.
#[derive(Debug, Clone)]
pub struct ItemContext<'a> {
    pub case_id: &'a str,
    pub source: &'a str,
    pub seed: u64,
}

impl ItemContext<'_> {
    fn key(&self, s: Subtype) -> String {
        format!("{}/{}", self.case_id, s)
    }

    /// Stream for generator choices such as the queried lobe.
    pub fn choice_rng(&self, s: Subtype) -> ChaCha20Rng {
        seed::rng(self.seed, seed::STREAM_GENERATOR, &self.key(s))
    }

    /// Stream for option shuffling.
    pub fn shuffle_rng(&self, s: Subtype) -> ChaCha20Rng {
        seed::rng(self.seed, seed::STREAM_SHUFFLER, &self.key(s))
    }

    fn item(&self, s: Subtype, organ: &str, question: String, options: Vec<String>, answer_index: usize, prov: Provenance) -> VqaItem {
        VqaItem {
            case_id: self.case_id.to_string(),
            source: self.source.to_string(),
            subtype: s,
            question_type: s.question_type(),
            organ: organ.to_string(),
            question,
            options,
            answer_index,
            provenance: prov,
        }
    }

    /// Closed-set item: `contents` shuffled, truth located by value.
    fn closed(&self, s: Subtype, organ: &str, question: String, contents: Vec<String>, truth: &str, prov: Provenance) -> VqaItem {
        let mut opts = contents;
        let pos = opts.iter().position(|o| o == truth).expect("truth is one of the contents");
        opts.swap(0, pos);
        let (options, answer_index) = mcq::shuffle_with_truth_first(opts, &mut self.shuffle_rng(s));
        self.item(s, organ, question, options, answer_index, prov)
    }

    fn numeric(&self, s: Subtype, organ: &str, question: String, truth: f64, policy: &DistractorPolicy, prov: Provenance) -> Result<VqaItem> {
        let m = gen_numeric_mcq(truth, policy, &mut self.shuffle_rng(s))?;
        let prov = if m.fallback { prov.with("fallback", true) } else { prov };
        Ok(self.item(s, organ, question, m.options, m.answer_index, prov))
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        YES
    } else {
        NO
    }
}

fn yes_no_contents() -> Vec<String> {
    vec![YES.into(), NO.into()]
}

fn check_labels(labels: &BTreeSet<String>, rules: &RuleTables) -> Result<()> {
    for l in labels {
        rules.region_of(l)?;
    }
    Ok(())
}

fn region_phrase(region: &str) -> &str {
    match region {
        "bronchus" => "bronchus/airway",
        "lung" => "lung parenchymal",
        "pleura" => "pleural",
        r => r,
    }
}

/// Labels of `labels` that the map places in `region`.
pub fn labels_in_region(labels: &BTreeSet<String>, rules: &RuleTables, region: &str) -> Result<Vec<String>> {
    check_labels(labels, rules)?;
    Ok(labels
        .iter()
        .filter(|l| rules.regions.get(*l).is_some_and(|r| r == region))
        .cloned()
        .collect())
}

/// Yes/no existence of any label mapped to `region`.
pub fn gen_existence(ctx: &ItemContext, labels: &BTreeSet<String>, rules: &RuleTables, region: &str, subtype: Subtype) -> Result<VqaItem> {
    if !rules.has_region(region) {
        return Err(QagenError::UnknownRegion(region.to_string()));
    }
    let hits = labels_in_region(labels, rules, region)?;
    let truth = yes_no(!hits.is_empty());
    let prov = Provenance::new("label-region-existence")
        .with("labels", labels)
        .with("region", region)
        .with("hits", &hits);
    let q = format!("Does this chest CT show any {} lesion?", region_phrase(region));
    Ok(ctx.closed(subtype, region, q, yes_no_contents(), truth, prov))
}

/// Phenotype activity and clean matches for one label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhenotypeEval {
    /// Phenotypes with at least one key label present.
    pub active: Vec<String>,
    /// Active phenotypes with no disallowed label and no label outside
    /// key, extras or the incidental list.
    pub matches: Vec<String>,
    /// Key-label hits per active phenotype.
    pub key_hits: Vec<usize>,
}

pub fn evaluate_phenotypes(labels: &BTreeSet<String>, rules: &RuleTables) -> Result<PhenotypeEval> {
    check_labels(labels, rules)?;
    let mut eval = PhenotypeEval {
        active: vec![],
        matches: vec![],
        key_hits: vec![],
    };
    for p in &rules.phenotypes {
        let hits = labels.intersection(&p.key).count();
        if hits == 0 {
            continue;
        }
        eval.active.push(p.name.clone());
        eval.key_hits.push(hits);
        let clean = labels.is_disjoint(&p.disallowed)
            && labels
                .iter()
                .all(|l| p.key.contains(l) || p.extras.contains(l) || rules.incidental.contains(l));
        if clean {
            eval.matches.push(p.name.clone());
        }
    }
    Ok(eval)
}

pub fn gen_phenotype(ctx: &ItemContext, labels: &BTreeSet<String>, rules: &RuleTables) -> Result<VqaItem> {
    let eval = evaluate_phenotypes(labels, rules)?;
    let truth = match eval.matches.len() {
        0 => return Err(QagenError::NoPhenotype),
        1 => eval.matches[0].clone(),
        _ => return Err(QagenError::AmbiguousPhenotype(eval.matches)),
    };
    let hits = eval.key_hits[eval.active.iter().position(|a| *a == truth).expect("match is active")];
    let prov = Provenance::new("phenotype-rules")
        .with("labels", labels)
        .with("phenotype", &truth)
        .with("typicality", hits);
    let q = "Which imaging phenotype best summarises the findings in this chest CT?".to_string();
    let contents = rules.phenotypes.iter().map(|p| p.name.clone()).collect();
    Ok(ctx.closed(Subtype::ImagingPhenotype, "lung", q, contents, &truth, prov))
}

pub fn gen_mixing(ctx: &ItemContext, labels: &BTreeSet<String>, rules: &RuleTables) -> Result<VqaItem> {
    let eval = evaluate_phenotypes(labels, rules)?;
    if eval.active.is_empty() {
        return Err(QagenError::NotApplicable("no phenotype group is active".into()));
    }
    let truth = yes_no(eval.active.len() >= 2);
    let prov = Provenance::new("phenotype-mixing")
        .with("labels", labels)
        .with("active", &eval.active)
        .with("typicality", eval.key_hits.iter().sum::<usize>() + 10 * eval.active.len());
    let q = "Does this chest CT show a mixed imaging phenotype, with two or more phenotype groups active at once?".to_string();
    Ok(ctx.closed(Subtype::PhenotypeMixing, "lung", q, yes_no_contents(), truth, prov))
}

fn largest(f: &CaseFacts) -> Result<&super::facts::LargestLesion> {
    f.largest.as_ref().ok_or(QagenError::NoLesion)
}

pub fn gen_diameter(ctx: &ItemContext, f: &CaseFacts, rules: &RuleTables) -> Result<VqaItem> {
    let l = largest(f)?;
    let policy = DistractorPolicy::Multiplicative {
        factors: rules.distractors.size_factors.clone(),
        decimals: 1,
        unit: "mm".into(),
    };
    let prov = Provenance::new("largest-instance-max-inplane-diameter").with("diameter_mm", l.diameter_mm);
    let q = "What is the maximum in-plane diameter of the largest lesion in this chest CT?".to_string();
    ctx.numeric(Subtype::LargestLesionDiameter, "lung", q, l.diameter_mm, &policy, prov)
}

pub fn gen_location(ctx: &ItemContext, f: &CaseFacts) -> Result<VqaItem> {
    let l = largest(f)?;
    if !LOBES.contains(&l.region.as_str()) {
        return Err(QagenError::NotApplicable(format!("largest lesion lies in {:?}", l.region)));
    }
    let prov = Provenance::new("largest-instance-max-overlap-lobe").with("region", &l.region);
    let q = "Which lobe contains the largest lesion in this chest CT?".to_string();
    let contents = LOBES.iter().map(|s| s.to_string()).collect();
    Ok(ctx.closed(Subtype::LargestLesionLocation, "lung", q, contents, &l.region, prov))
}

pub fn gen_slice(ctx: &ItemContext, f: &CaseFacts, rules: &RuleTables) -> Result<VqaItem> {
    let l = largest(f)?;
    let policy = DistractorPolicy::Percentile {
        step: rules.distractors.percentile_step,
    };
    let prov = Provenance::new("largest-instance-max-area-slice-percentile").with("percentile", l.slice_percentile);
    let q = "At which relative position along the scan (0% = first slice, 100% = last slice) does the largest lesion reach its largest cross-section?".to_string();
    ctx.numeric(Subtype::LargestLesionSlice, "lung", q, l.slice_percentile, &policy, prov)
}

pub fn gen_counting(ctx: &ItemContext, f: &CaseFacts) -> Result<VqaItem> {
    let prov = Provenance::new("nodule-component-count").with("count", f.nodule_count);
    let q = "How many separate pulmonary nodules or masses are present in this chest CT?".to_string();
    ctx.numeric(Subtype::LesionCounting, "lung", q, f.nodule_count as f64, &DistractorPolicy::Count, prov)
}

pub fn gen_count_by_location(ctx: &ItemContext, f: &CaseFacts) -> Result<VqaItem> {
    if f.nodule_count == 0 {
        return Err(QagenError::NoLesion);
    }
    let s = Subtype::LesionCountByLocation;
    let lobe = *LOBES.choose(&mut ctx.choice_rng(s)).expect("five lobes");
    let count = f.nodules_by_lobe.get(lobe).copied().unwrap_or(0);
    let prov = Provenance::new("nodule-count-in-lobe").with("lobe", lobe).with("count", count);
    let q = format!("How many separate pulmonary nodules or masses are located in the {lobe}?");
    ctx.numeric(s, lobe, q, count as f64, &DistractorPolicy::Count, prov)
}

pub fn gen_organ_size(ctx: &ItemContext, f: &CaseFacts, cohort: &Cohort, rules: &RuleTables, subtype: Subtype) -> Result<VqaItem> {
    let (p_hi, p_lo) = cohort.require_lung_percentiles(rules.organ_size.min_cohort)?;
    if f.lung_ml <= 0.0 {
        return Err(QagenError::NotApplicable("no lung mask".into()));
    }
    let (truth, prov, q) = match subtype {
        Subtype::OrganEnlargement => (
            f.lung_ml > p_hi,
            Provenance::new("organ-volume-above-cohort-percentile")
                .with("volume_ml", f.lung_ml)
                .with("threshold_ml", p_hi),
            "Compared with the reference population, are the lungs enlarged in this chest CT?",
        ),
        Subtype::OrganAtrophy => (
            f.lung_ml < p_lo,
            Provenance::new("organ-volume-below-cohort-percentile")
                .with("volume_ml", f.lung_ml)
                .with("threshold_ml", p_lo),
            "Compared with the reference population, are the lungs reduced in volume in this chest CT?",
        ),
        other => return Err(QagenError::NotApplicable(format!("{other} is not an organ-size subtype"))),
    };
    Ok(ctx.closed(subtype, "lung", q.to_string(), yes_no_contents(), yes_no(truth), prov))
}

pub fn gen_hu_difference(ctx: &ItemContext, f: &CaseFacts, rules: &RuleTables) -> Result<VqaItem> {
    largest(f)?;
    let dhu = f
        .hu_contrast
        .ok_or_else(|| QagenError::NotApplicable("no normal lung tissue".into()))?;
    let labels = rules.hu_bin_labels();
    let bin = rules.hu_bin(dhu);
    let prov = Provenance::new("largest-lesion-hu-contrast-bin")
        .with("delta_hu", dhu)
        .with("edges", &rules.hu_difference.edges);
    let q = "What is the attenuation difference between the largest lesion and the surrounding normal lung (lesion minus normal)?".to_string();
    ctx.numeric(
        Subtype::LesionOrganHuDifference,
        "lung",
        q,
        bin as f64,
        &DistractorPolicy::AdjacentBins { labels },
        prov,
    )
}

/// Attenuation label from the two occupancies and the dominance margin.
pub fn attenuation_label(ggo: f64, cons: f64, margin: f64) -> &'static str {
    if ggo > 0.0 && ggo >= cons * (1.0 + margin) {
        ATTENUATION_PATTERNS[0]
    } else if cons > 0.0 && cons >= ggo * (1.0 + margin) {
        ATTENUATION_PATTERNS[1]
    } else {
        ATTENUATION_PATTERNS[2]
    }
}

pub fn gen_attenuation(ctx: &ItemContext, f: &CaseFacts, rules: &RuleTables) -> Result<VqaItem> {
    let s = Subtype::AttenuationPattern;
    let a = f
        .attenuation
        .as_ref()
        .ok_or_else(|| QagenError::NotApplicable("no opacity".into()))?;
    let truth = attenuation_label(a.ggo_ml, a.consolidation_ml, rules.attenuation.margin);
    let others: Vec<&str> = ATTENUATION_PATTERNS.iter().copied().filter(|p| *p != truth).collect();
    let other = others[ctx.choice_rng(s).gen_range(0..others.len())];
    let prov = Provenance::new("attenuation-occupancy-dominance")
        .with("ggo_ml", a.ggo_ml)
        .with("consolidation_ml", a.consolidation_ml)
        .with("margin", rules.attenuation.margin)
        .with("method", &a.method);
    let q = "Which attenuation pattern best describes the pulmonary opacities in this chest CT?".to_string();
    Ok(ctx.closed(s, "lung", q, vec![truth.to_string(), other.to_string()], truth, prov))
}

/// Volume loss when the opacity side's share, relative to the cohort's
/// typical left/right ratio, falls below `1 - margin`.
pub fn volume_loss_truth(side: Side, left_ml: f64, right_ml: f64, median_lr: f64, margin: f64) -> (bool, f64) {
    let rel = match side {
        Side::Left => (left_ml / right_ml) / median_lr,
        Side::Right => (right_ml / left_ml) * median_lr,
    };
    (rel < 1.0 - margin, rel)
}

pub fn gen_volume_loss(ctx: &ItemContext, f: &CaseFacts, cohort: &Cohort, rules: &RuleTables) -> Result<VqaItem> {
    let side = f
        .opacity_side
        .ok_or_else(|| QagenError::NotApplicable("no lateralised opacity".into()))?;
    let median = cohort.median_lr_ratio.ok_or(QagenError::Lesion(crate::lesion::LesionError::CohortTooSmall {
        have: cohort.size,
        need: rules.organ_size.min_cohort,
    }))?;
    if f.left_ml <= 0.0 || f.right_ml <= 0.0 {
        return Err(QagenError::NotApplicable("missing a lung side".into()));
    }
    let (loss, rel) = volume_loss_truth(side, f.left_ml, f.right_ml, median, rules.volume_loss.margin);
    let truth = if loss { VOLUME_LOSS } else { NO_VOLUME_LOSS };
    let prov = Provenance::new("opacity-side-volume-ratio")
        .with("side", side)
        .with("left_ml", f.left_ml)
        .with("right_ml", f.right_ml)
        .with("median_lr_ratio", median)
        .with("margin", rules.volume_loss.margin)
        .with("relative", rel);
    let q = "Is the pulmonary opacity in this chest CT accompanied by regional lung volume loss?".to_string();
    let contents = vec![VOLUME_LOSS.to_string(), NO_VOLUME_LOSS.to_string()];
    Ok(ctx.closed(Subtype::VolumeLoss, "lung", q, contents, truth, prov))
}

pub fn gen_grading(ctx: &ItemContext, f: &CaseFacts, cohort: &Cohort, subtype: Subtype) -> Result<VqaItem> {
    let (value, present, bins, rule, organ, q) = match subtype {
        Subtype::EmphysemaGrading => (
            f.emphysema_index,
            f.emphysema_ml > 0.0,
            &cohort.emphysema_bins,
            "emphysema-index-grade",
            "lung",
            "How severe is the emphysema in this chest CT?",
        ),
        Subtype::EffusionGrading => (
            f.effusion_ratio,
            f.effusion_ml > 0.0,
            &cohort.effusion_bins,
            "effusion-ratio-grade",
            "pleura",
            "How large is the pleural effusion in this chest CT?",
        ),
        other => return Err(QagenError::NotApplicable(format!("{other} is not a grading subtype"))),
    };
    if !present {
        return Err(QagenError::NotApplicable("finding absent".into()));
    }
    let value = value.ok_or_else(|| QagenError::NotApplicable("reference region empty".into()))?;
    let truth = bins.grade(value).to_string();
    let prov = Provenance::new(rule).with("index", value).with("bins", bins);
    Ok(ctx.closed(subtype, organ, q.to_string(), bins.labels().to_vec(), &truth, prov))
}

pub fn gen_measurement(ctx: &ItemContext, f: &CaseFacts, rules: &RuleTables, subtype: Subtype) -> Result<VqaItem> {
    let s = subtype;
    match s {
        Subtype::OrganHuMeasurement | Subtype::OrganVolumeMeasurement => {
            if f.organs.is_empty() {
                return Err(QagenError::NotApplicable("no organ records".into()));
            }
            let rec = &f.organs[ctx.choice_rng(s).gen_range(0..f.organs.len())];
            if s == Subtype::OrganHuMeasurement {
                let policy = DistractorPolicy::Additive {
                    step: rules.distractors.hu_step,
                    decimals: 0,
                    unit: "HU".into(),
                };
                let prov = Provenance::new("organ-mean-hu").with("organ", &rec.organ).with("mean_hu", rec.mean_hu);
                let q = format!("What is the mean attenuation of the {}?", rec.organ);
                ctx.numeric(s, &rec.organ, q, rec.mean_hu, &policy, prov)
            } else {
                let policy = DistractorPolicy::Multiplicative {
                    factors: rules.distractors.size_factors.clone(),
                    decimals: 1,
                    unit: "mL".into(),
                };
                let prov = Provenance::new("organ-volume").with("organ", &rec.organ).with("volume_ml", rec.size_ml);
                let q = format!("What is the volume of the {}?", rec.organ);
                ctx.numeric(s, &rec.organ, q, rec.size_ml, &policy, prov)
            }
        }
        Subtype::LesionVolumeMeasurement => {
            let l = largest(f)?;
            let policy = DistractorPolicy::Multiplicative {
                factors: rules.distractors.size_factors.clone(),
                decimals: 2,
                unit: "mL".into(),
            };
            let prov = Provenance::new("largest-lesion-volume").with("volume_ml", l.volume_ml);
            let q = "What is the volume of the largest lesion?".to_string();
            ctx.numeric(s, "lung", q, l.volume_ml, &policy, prov)
        }
        other => Err(QagenError::NotApplicable(format!("{other} is not a measurement subtype"))),
    }
}

/// Dispatches one subtype for one case.
pub fn generate_item(f: &CaseFacts, cohort: &Cohort, rules: &RuleTables, seed: u64, s: Subtype) -> Result<VqaItem> {
    let ctx = ItemContext {
        case_id: &f.case_id,
        source: &f.source,
        seed,
    };
    use Subtype::*;
    match s {
        BronchusLesionExistence => gen_existence(&ctx, &f.labels, rules, "bronchus", s),
        LungLesionExistence => gen_existence(&ctx, &f.labels, rules, "lung", s),
        PleuraLesionExistence => gen_existence(&ctx, &f.labels, rules, "pleura", s),
        LargestLesionDiameter => gen_diameter(&ctx, f, rules),
        LargestLesionLocation => gen_location(&ctx, f),
        LargestLesionSlice => gen_slice(&ctx, f, rules),
        LesionCountByLocation => gen_count_by_location(&ctx, f),
        LesionCounting => gen_counting(&ctx, f),
        OrganEnlargement | OrganAtrophy => gen_organ_size(&ctx, f, cohort, rules, s),
        LesionOrganHuDifference => gen_hu_difference(&ctx, f, rules),
        AttenuationPattern => gen_attenuation(&ctx, f, rules),
        VolumeLoss => gen_volume_loss(&ctx, f, cohort, rules),
        ImagingPhenotype => gen_phenotype(&ctx, &f.labels, rules),
        PhenotypeMixing => gen_mixing(&ctx, &f.labels, rules),
        EmphysemaGrading | EffusionGrading => gen_grading(&ctx, f, cohort, s),
        OrganHuMeasurement | OrganVolumeMeasurement | LesionVolumeMeasurement => gen_measurement(&ctx, f, rules, s),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub subtypes: Vec<Subtype>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            subtypes: CHEST.to_vec(),
        }
    }
}

/// A (case, subtype) pair that produced no item, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub case_id: String,
    pub subtype: Subtype,
    pub reason: String,
}

/// Candidate pool over all cases, in (case, subtype) order.
pub fn generate_pool(
    facts: &[CaseFacts],
    cohort: &Cohort,
    rules: &RuleTables,
    cfg: &GenConfig,
    exec: Execution,
) -> Result<(Vec<VqaItem>, Vec<Skip>)> {
    let per_case = exec.map_slice(facts, |f| {
        let mut items = vec![];
        let mut skips = vec![];
        for &s in &cfg.subtypes {
            match generate_item(f, cohort, rules, cfg.seed, s) {
                Ok(it) => items.push(it),
                Err(e @ (QagenError::UnknownLabel(_) | QagenError::UnknownRegion(_) | QagenError::Rules(_))) => {
                    return Err(e)
                }
                Err(e) => skips.push(Skip {
                    case_id: f.case_id.clone(),
                    subtype: s,
                    reason: e.to_string(),
                }),
            }
        }
        Ok((items, skips))
    });
    let mut items = vec![];
    let mut skips = vec![];
    for r in per_case {
        let (i, s) = r?;
        items.extend(i);
        skips.extend(s);
    }
    for s in &skips {
        log::debug!("{} {}: skipped ({})", s.case_id, s.subtype, s.reason);
    }
    Ok((items, skips))
}
