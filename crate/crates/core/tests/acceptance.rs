//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs offline on the synthetic cohort with mock clients.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::cflt::{cosine, score_oracle};
use common::lesion::{all_pairs_diameter, flood_fill, oracle_partition, partition_of, random_blob, random_mask};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::TestRunner;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicewise::agent::protocol::{format_reply, Tool};
use slicewise::agent::{run_loop, session_memory, CannedClient, LoopConfig, OracleClient, Question, RandomClient};
use slicewise::cflt::{normalize_heatmap, score_roi, similarity_heatmap, FeatureField, Roi, TargetParams, TextEmbedding};
use slicewise::eval::{macro_average, random_client_accuracy};
use slicewise::lesion::report::AnalyticsConfig;
use slicewise::lesion::{
    connected_components_3d_with, effusion_ratio, emphysema_index, max_inplane_diameter, quantile_bins, Connectivity,
    LesionInstance,
};
use slicewise::qagen::{generate_manifest, BalancePolicy, QuestionType, RuleTables, Subtype, VqaItem, CHEST};
use slicewise::synth::{lesion_embedding, synth_case, synth_cohort, SynthCase, SynthConfig};
use slicewise::volume::{BinaryMask, Dims, Spacing};
use slicewise::Execution;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const RAND_TOLERANCE: f64 = 0.03;
const RAND_TRIALS: usize = 2000;
const SCORE_TOLERANCE: f64 = 1e-9;
const COSINE_TOLERANCE: f64 = 1e-6;
const CHI2_MIN_P: f64 = 0.01;

type Outcome = Result<String, String>;

struct Fixture {
    cohort: Vec<SynthCase>,
    items: Vec<VqaItem>,
}

fn fixture() -> Fixture {
    let cohort = synth_cohort(&SynthConfig { cases: 720, seed: 0, features: true }, Execution::Parallel);
    let cases: Vec<_> = cohort.iter().map(|s| s.case.clone()).collect();
    let run = generate_manifest(
        &cases,
        &RuleTables::default(),
        &AnalyticsConfig::default(),
        &BalancePolicy::default(),
        Execution::Parallel,
    )
    .expect("synthetic manifest");
    Fixture { cohort, items: run.items }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!("took {:.1?}, limit {:.0?}", elapsed, limit))
    }
}

/// Published random-guess accuracy for a given option count.
fn published_rand(options: usize) -> f64 {
    match options {
        2 => 0.50,
        3 => 0.33,
        4 => 0.25,
        n => 1.0 / n as f64,
    }
}

fn rand_reproduction(fx: &Fixture) -> Outcome {
    let t = Instant::now();
    if fx.items.len() < 1000 {
        return Err(format!("manifest has only {} items", fx.items.len()));
    }
    let acc = random_client_accuracy(&fx.items, 0, RAND_TRIALS, Execution::Parallel).map_err(|e| e.to_string())?;
    let mut worst = (0.0f64, None);
    for (s, got) in &acc {
        let n = fx.items.iter().find(|i| i.subtype == *s).unwrap().options.len();
        let dev = (got - published_rand(n)).abs();
        if dev > worst.0 {
            worst = (dev, Some(*s));
        }
        if dev > RAND_TOLERANCE {
            return Err(format!("{s}: {got:.3} vs {:.2}", published_rand(n)));
        }
    }
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "{} subtypes, {} items, max |dev| {:.4} ({}), {:.1?}",
        acc.len(),
        fx.items.len(),
        worst.0,
        worst.1.map_or("-".into(), |s| s.to_string()),
        t.elapsed()
    ))
}

fn oracle_ceiling(fx: &Fixture) -> Outcome {
    let oracle = OracleClient::from_items(&fx.items);
    let emb = lesion_embedding();
    let organs: Vec<String> = fx.cohort[0].case.organs.label_names().values().cloned().collect();
    let by_id: BTreeMap<&str, &SynthCase> = fx.cohort.iter().map(|c| (c.case.id(), c)).collect();
    let answer = |it: &VqaItem| -> Result<bool, String> {
        let sc = by_id[it.case_id.as_str()];
        let q = Question::from(it);
        let f = sc.features.as_ref().ok_or("missing features")?;
        let targeting = Some((f, &emb, q.organ.as_str(), TargetParams::default()));
        let (mut mem, _) =
            session_memory(&sc.case, &organs, targeting, Execution::Sequential).map_err(|e| e.to_string())?;
        let out = run_loop(&q, &mut mem, &sc.case.hu, &sc.case.organs, &oracle, &LoopConfig::default())
            .map_err(|e| e.to_string())?;
        Ok(out.final_answer == VqaItem::letter(it.answer_index).to_string())
    };
    let t = Instant::now();
    let first: Vec<Result<bool, String>> = Execution::Parallel.map_slice(&fx.items[..200], answer);
    let t200 = t.elapsed();
    let rest: Vec<Result<bool, String>> = Execution::Parallel.map_slice(&fx.items[200..], answer);
    let mut correct = 0;
    for r in first.into_iter().chain(rest) {
        correct += r? as usize;
    }
    let acc = correct as f64 / fx.items.len() as f64;
    if correct != fx.items.len() {
        return Err(format!("accuracy {acc:.4}"));
    }
    within(t200, Duration::from_secs(120))?;
    Ok(format!("accuracy {acc:.3} over {} items, 200 items in {t200:.1?}", fx.items.len()))
}

fn ccl_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let dims = Dims::new(32, 32, 32).unwrap();
    for i in 0..200 {
        let p = rng.gen_range(0.02..0.6);
        let m = random_mask(&mut rng, dims, p);
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let got = partition_of(&connected_components_3d_with(&m, conn, Execution::Parallel));
            if got != oracle_partition(&flood_fill(&m, conn)) {
                return Err(format!("mask {i} ({conn:?}) differs from flood fill"));
            }
        }
    }
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!("200 masks x 2 connectivities, {:.1?}", t.elapsed()))
}

fn diameter_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let dims = Dims::new(40, 40, 12).unwrap();
    for i in 0..100 {
        let size = rng.gen_range(1..=500);
        let spacing = Spacing::new(rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5), 2.0).unwrap();
        let inst = LesionInstance::from_voxels(0, random_blob(&mut rng, dims, size), dims, spacing);
        let (got, want) = (max_inplane_diameter(&inst), all_pairs_diameter(&inst));
        if got != want {
            return Err(format!("component {i}: {got} vs {want}"));
        }
    }
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!("100 components, exact, {:.1?}", t.elapsed()))
}

fn score_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let grid = [8, 8, 4];
    let (mut worst_score, mut worst_cos) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let dims = Dims::new(rng.gen_range(8..24), rng.gen_range(8..24), rng.gen_range(4..12)).unwrap();
        let n = 16;
        let data = (0..256 * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let f = FeatureField::new(grid, n, dims, data).unwrap();
        let e = TextEmbedding::new((0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let raw = similarity_heatmap(&f, &e).map_err(|e| e.to_string())?;
        for c in 0..f.cell_count() {
            worst_cos = worst_cos.max((raw.values()[c] - cosine(f.cell(c), e.as_slice())).abs());
        }
        let h = normalize_heatmap(&raw);
        let organ = random_mask(&mut rng, dims, 0.5);
        let tau = rng.gen_range(0.0..1.0);
        let roi = if rng.gen_bool(0.5) {
            Roi::Slice(rng.gen_range(0..dims.nz))
        } else {
            let mut m = random_mask(&mut rng, dims, 0.05);
            m.set(0, 0, 0, true);
            Roi::Region { name: "r".into(), mask: m }
        };
        let got = score_roi(&roi, &h, &organ, tau, &f.mapping()).map_err(|e| e.to_string())?;
        worst_score = worst_score.max((got - score_oracle(&roi, &h, &organ, tau)).abs());
    }
    if worst_score > SCORE_TOLERANCE || worst_cos > COSINE_TOLERANCE {
        return Err(format!("score dev {worst_score:e}, cosine dev {worst_cos:e}"));
    }
    within(t.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "100 tuples, max score dev {worst_score:.1e}, max cosine dev {worst_cos:.1e}, {:.1?}",
        t.elapsed()
    ))
}

fn loop_contracts() -> Outcome {
    let sc = synth_case(5, 0, true);
    let organs: Vec<String> = sc.case.organs.label_names().values().cloned().collect();
    let emb = lesion_embedding();
    let q = Question {
        key: "synth-0005/lung-lesion-existence".into(),
        text: "Does this chest CT show any lung lesion?".into(),
        options: vec!["yes".into(), "no".into()],
        organ: "lung".into(),
    };
    let session = |client: &dyn slicewise::agent::ModelClient| {
        let targeting = Some((sc.features.as_ref().unwrap(), &emb, "lung", TargetParams::default()));
        let (mut mem, _) = session_memory(&sc.case, &organs, targeting, Execution::Sequential).unwrap();
        run_loop(&q, &mut mem, &sc.case.hu, &sc.case.organs, client, &LoopConfig::default())
            .map_err(|e| e.to_string())
            .map(|o| o.transcript)
    };
    let always = CannedClient::script(vec![format_reply("look", "A", &[0], &[], Some((Tool::MaskOverlay, 10, None)))]);
    let stop = CannedClient::script(vec![format_reply("enough", "A", &[0], &[], None)]);
    let n_always = session(&always)?.turns.len();
    let n_stop = session(&stop)?.turns.len();
    if n_always != 5 || n_stop != 1 {
        return Err(format!("always-visual {n_always} turns, immediate stop {n_stop} turns"));
    }
    let a = session(&RandomClient::new(9))?.canonical_bytes();
    let b = session(&RandomClient::new(9))?.canonical_bytes();
    let c = session(&always)?.canonical_bytes();
    let d = session(&always)?.canonical_bytes();
    if a != b || c != d {
        return Err("transcripts differ across identical runs".into());
    }
    Ok(format!("always-visual {n_always} turns, immediate stop {n_stop} turn, replay byte-identical"))
}

fn balancing(fx: &Fixture) -> Outcome {
    let rules = RuleTables::default();
    let mut type_counts: BTreeMap<QuestionType, usize> = BTreeMap::new();
    for s in CHEST {
        *type_counts.entry(s.question_type()).or_default() += 1;
    }
    let split: Vec<usize> = [QuestionType::Recognition, QuestionType::VisualReasoning, QuestionType::MedicalReasoning]
        .iter()
        .map(|t| type_counts[t])
        .collect();
    let present: std::collections::BTreeSet<Subtype> = fx.items.iter().map(|i| i.subtype).collect();
    if split != [3, 8, 6] || present.len() != 17 {
        return Err(format!("subtype split {split:?}, {} present", present.len()));
    }
    let mut max_spread = 0;
    for s in CHEST {
        let Some(contents) = s.closed_contents(&rules) else { continue };
        let mut n: BTreeMap<&str, usize> = contents.iter().map(|c| (c.as_str(), 0)).collect();
        for it in fx.items.iter().filter(|i| i.subtype == s) {
            *n.get_mut(it.answer()).ok_or("answer outside contents")? += 1;
        }
        let spread = n.values().max().unwrap() - n.values().min().unwrap();
        max_spread = max_spread.max(spread);
        if spread > 1 {
            return Err(format!("{s}: {n:?}"));
        }
    }
    // positions: E_j sums 1/n_i over items that have a position j
    let k = fx.items.iter().map(|i| i.options.len()).max().unwrap();
    let mut observed = vec![0f64; k];
    let mut expected = vec![0f64; k];
    for it in &fx.items {
        observed[it.answer_index] += 1.0;
        for e in expected.iter_mut().take(it.options.len()) {
            *e += 1.0 / it.options.len() as f64;
        }
    }
    let chi2: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(chi2);
    if fx.items.len() < 500 || p <= CHI2_MIN_P {
        return Err(format!("chi2 {chi2:.3}, p {p:.4} over {} items", fx.items.len()));
    }
    Ok(format!(
        "17 subtypes (3/8/6), max content spread {max_spread}, positions chi2 {chi2:.3} p {p:.3} over {} items",
        fx.items.len()
    ))
}

fn memory_invariants() -> Outcome {
    let t = Instant::now();
    let mut runner = TestRunner::deterministic();
    let mut steps = 0;
    for _ in 0..5 {
        let ops = proptest::collection::vec(common::memory::op(), 1000)
            .new_tree(&mut runner)
            .unwrap()
            .current();
        steps += ops.len();
        common::memory::run(&ops).map_err(|e| e.to_string())?;
    }
    within(t.elapsed(), Duration::from_secs(5))?;
    Ok(format!("{steps} random operations, {:.1?}", t.elapsed()))
}

fn index_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let dims = Dims::new(9, 7, 5).unwrap();
    for _ in 0..2000 {
        let (pa, pb) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let a = random_mask(&mut rng, dims, pa);
        let b = random_mask(&mut rng, dims, pb);
        for v in [emphysema_index(&a, &b), effusion_ratio(&a, &b)].into_iter().flatten() {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("index {v} outside [0, 1]"));
            }
        }
    }
    let empty = BinaryMask::empty(dims, Spacing::unit());
    if emphysema_index(&empty, &empty).is_ok() {
        return Err("empty lung accepted".into());
    }
    let mut worst = 0usize;
    for _ in 0..20 {
        let cohort: Vec<f64> = (0..300).map(|_| rng.gen_range(0.0..0.4)).collect();
        let bins = quantile_bins(&cohort, 3, &["mild", "moderate", "severe"]).map_err(|e| e.to_string())?;
        let mut counts = [0usize; 3];
        for &v in &cohort {
            counts[bins.bin_index(v)] += 1;
        }
        let dev = counts.iter().map(|&c| c.abs_diff(100)).max().unwrap();
        worst = worst.max(dev);
        if dev > 1 {
            return Err(format!("tertile counts {counts:?}"));
        }
    }
    Ok(format!("4000 fuzzed indices in [0, 1], tertiles within 100 +/- {worst}"))
}

fn macro_check() -> Outcome {
    let avg = macro_average(&[0.82, 0.82, 0.63, 0.85, 0.73, 0.72]);
    if format!("{avg:.2}") == "0.76" {
        Ok(format!("macro average {avg:.4} -> 0.76"))
    } else {
        Err(format!("macro average {avg}"))
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let start = Instant::now();
    let fx = fixture();
    println!("fixture: {} cases, {} items, {:.1?}", fx.cohort.len(), fx.items.len(), start.elapsed());
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("rand-column reproduction", Box::new(|| rand_reproduction(&fx))),
        ("oracle ceiling", Box::new(|| oracle_ceiling(&fx))),
        ("ccl oracle equivalence", Box::new(ccl_equivalence)),
        ("diameter oracle equivalence", Box::new(diameter_equivalence)),
        ("roi scoring equivalence", Box::new(score_equivalence)),
        ("loop contracts", Box::new(loop_contracts)),
        ("balancing contract", Box::new(|| balancing(&fx))),
        ("memory invariants", Box::new(memory_invariants)),
        ("grading and index bounds", Box::new(index_bounds)),
        ("macro-average check", Box::new(macro_check)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2}. {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
