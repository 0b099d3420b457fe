use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use slicewise::agent::{self, CannedClient, LoopConfig, ModelClient, OracleClient, Question, RandomClient};
use slicewise::case::{self, Case};
use slicewise::cflt::{self, FeatureField, TargetParams, TextEmbedding};
use slicewise::config::{ClientKind, RunConfig};
use slicewise::eval::{self, AnswerRecord, GroupBy};
use slicewise::lesion::report::{analyze_lesions, AnalyticsConfig};
use slicewise::memory::{self, Entry, EvidenceMemory};
use slicewise::qagen::{self, BalancePolicy, RuleTables, VqaItem};
use slicewise::synth::{self, SynthConfig};
use slicewise::Execution;

use crate::io::{emit, write_atomic, write_json};
use crate::{AgentArgs, AnalyzeArgs, Cli, Cmd, EvalArgs, QagenArgs, SynthArgs, TargetArgs};

struct Ctx {
    cfg: RunConfig,
    exec: Execution,
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.check_inputs()?;
    if let Some(j) = cli.jobs {
        slicewise::exec::configure_threads(j).map_err(|e| anyhow!("--jobs: {e}"))?;
    }
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    let ctx = Ctx { cfg, exec };
    match cli.cmd {
        Cmd::Analyze(a) => analyze(&ctx, a),
        Cmd::Target(a) => target(&ctx, a),
        Cmd::Agent(a) => run_agent(&ctx, a),
        Cmd::Qagen(a) => run_qagen(&ctx, a),
        Cmd::Eval(a) => run_eval(&ctx, a),
        Cmd::Synth(a) => run_synth(&ctx, a),
    }
}

fn organ_list(case: &Case, requested: &[String]) -> Vec<String> {
    if requested.is_empty() {
        case.organs.label_names().values().cloned().collect()
    } else {
        requested.to_vec()
    }
}

fn analyze(ctx: &Ctx, a: AnalyzeArgs) -> Result<ExitCode> {
    let case = case::load_case(&a.case)?;
    let id = case.id().to_string();
    let requested = if a.organs.is_empty() { &ctx.cfg.organs } else { &a.organs };
    let organs = organ_list(&case, requested);
    let init = memory::init_memory_with(&case.organs, &case.hu, &organs, ctx.exec).with_context(|| format!("case {id}"))?;
    let records: Vec<_> = init.memory.organs().cloned().collect();
    let lesions = analyze_lesions(&case.hu, &case.organs, &case.lesions, &AnalyticsConfig::default(), ctx.exec)
        .with_context(|| format!("case {id}"))?;
    let out = json!({
        "case_id": id,
        "organs": records,
        "omitted": init.omitted,
        "lesions": lesions,
    });
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&out)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

fn case_features(dir: &Path, case: &Case, explicit: Option<&Path>) -> Result<Option<FeatureField>> {
    let path = match (explicit, &case.meta.features) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => dir.join(p),
        (None, None) => return Ok(None),
    };
    Ok(Some(cflt::read_feature_field(&path).with_context(|| format!("case {}", case.id()))?))
}

fn target(ctx: &Ctx, a: TargetArgs) -> Result<ExitCode> {
    let case = case::load_case(&a.case)?;
    let f = case_features(&a.case, &case, a.features.as_deref())?.ok_or_else(|| anyhow!("case {} has no feature field; pass --features", case.id()))?;
    let emb_path = a.embedding.or_else(|| ctx.cfg.embedding.clone()).context("--embedding is required")?;
    let t = cflt::read_embedding(&emb_path)?;
    let params = TargetParams {
        tau: a.tau.unwrap_or(ctx.cfg.tau),
        top_k: a.top_k.unwrap_or(ctx.cfg.top_k),
    };
    let mask = agent::target_organ_mask(&case.organs, &a.organ);
    let out = cflt::target_slices(&f, &t, &mask, params, ctx.exec).with_context(|| format!("case {}", case.id()))?;
    if let Some(mp) = &a.memory {
        let mut mem = if mp.exists() {
            EvidenceMemory::from_json(&std::fs::read_to_string(mp)?)?
        } else {
            let organs = organ_list(&case, &ctx.cfg.organs);
            memory::init_memory_with(&case.organs, &case.hu, &organs, ctx.exec)?.memory
        };
        for c in &out.candidates {
            mem.append(Entry::Roi(c.clone()))?;
        }
        write_atomic(mp, (mem.to_json()? + "\n").as_bytes())?;
    }
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let v = json!({"case_id": case.id(), "organ": a.organ, "candidates": out.candidates, "warnings": out.warnings});
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&v)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

fn load_rules(ctx: &Ctx, explicit: Option<PathBuf>) -> Result<RuleTables> {
    Ok(match explicit.or_else(|| ctx.cfg.rules.clone()) {
        Some(p) => RuleTables::load(&p)?,
        None => RuleTables::default(),
    })
}

fn require_cases_dir(ctx: &Ctx, explicit: Option<PathBuf>) -> Result<PathBuf> {
    explicit
        .or_else(|| ctx.cfg.cases_dir.clone())
        .context("--cases-dir (or cases_dir in the config) is required")
}

fn run_qagen(ctx: &Ctx, a: QagenArgs) -> Result<ExitCode> {
    let rules = load_rules(ctx, a.rules)?;
    let root = require_cases_dir(ctx, a.cases_dir)?;
    let dirs = case::list_case_dirs(&root)?;
    if dirs.is_empty() {
        bail!("no case directories under {}", root.display());
    }
    let cases = ctx
        .exec
        .map_slice(&dirs, |d| case::load_case(d))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let policy = BalancePolicy {
        target_per_subtype: a.target.unwrap_or(ctx.cfg.target_per_subtype),
        per_case_cap: a.cap.unwrap_or(ctx.cfg.per_case_cap),
        seed: a.seed.unwrap_or(ctx.cfg.seed),
        ..BalancePolicy::default()
    };
    let run = qagen::generate_manifest(&cases, &rules, &AnalyticsConfig::default(), &policy, ctx.exec)?;
    let out = a
        .out
        .or_else(|| ctx.cfg.manifest.clone())
        .unwrap_or_else(|| ctx.cfg.output_dir.join("manifest.jsonl"));
    write_atomic(&out, qagen::manifest_to_string(&run.items).as_bytes())?;
    let report_path = a.report.unwrap_or_else(|| out.with_extension("report.json"));
    write_json(
        &report_path,
        &json!({"report": run.report, "pool_size": run.pool_size, "cases": cases.len(), "skips": run.skips.len()}),
    )?;
    eprint!("{}", run.report.render());
    eprintln!("manifest: {} ({} items)", out.display(), run.items.len());
    Ok(ExitCode::SUCCESS)
}

fn make_client(ctx: &Ctx, a: &AgentArgs, manifest: &[VqaItem]) -> Result<Box<dyn ModelClient>> {
    let kind: ClientKind = match &a.client {
        Some(k) => k.parse().map_err(|e: String| anyhow!(e))?,
        None => ctx.cfg.client,
    };
    Ok(match kind {
        ClientKind::Oracle => Box::new(OracleClient::from_items(manifest)),
        ClientKind::Random => Box::new(RandomClient::new(a.seed.unwrap_or(ctx.cfg.seed))),
        ClientKind::Canned => {
            let p = a.script.clone().or_else(|| ctx.cfg.canned_script.clone()).context("the canned client needs --script")?;
            Box::new(CannedClient::load(&p)?)
        }
        #[cfg(feature = "http")]
        ClientKind::Http => {
            let endpoint = a.endpoint.clone().or_else(|| ctx.cfg.endpoint.clone()).context("the http client needs --endpoint")?;
            let model = a.model.clone().or_else(|| ctx.cfg.model.clone()).unwrap_or_else(|| "default".into());
            Box::new(agent::client::HttpClient::new(
                &endpoint,
                &model,
                &ctx.cfg.token_env,
                std::time::Duration::from_secs(ctx.cfg.timeout_s),
            )?)
        }
        #[cfg(not(feature = "http"))]
        ClientKind::Http => bail!("this build has no http client (enable the `http` feature)"),
    })
}

struct LoadedCase {
    case: Case,
    features: Option<FeatureField>,
}

fn transcript_name(it: &VqaItem) -> String {
    format!("{}__{}.json", it.case_id, it.subtype)
}

fn run_agent(ctx: &Ctx, a: AgentArgs) -> Result<ExitCode> {
    let manifest_path = a.manifest.clone().or_else(|| ctx.cfg.manifest.clone()).context("--manifest is required")?;
    let mut items = qagen::load_manifest(&manifest_path)?;
    if let Some(n) = a.limit {
        items.truncate(n);
    }
    let root = require_cases_dir(ctx, a.cases_dir.clone())?;
    let out = a.out.clone().unwrap_or_else(|| ctx.cfg.output_dir.clone());
    let client = make_client(ctx, &a, &items)?;

    let mut by_id = HashMap::new();
    for d in case::list_case_dirs(&root)? {
        by_id.insert(case::read_meta(&d)?.case_id, d);
    }
    let mut needed: Vec<&str> = items.iter().map(|i| i.case_id.as_str()).collect();
    needed.sort_unstable();
    needed.dedup();
    let targeting = !a.no_targeting;
    let loaded: Vec<Result<LoadedCase, String>> = ctx.exec.map_slice(&needed, |id| {
        let dir = by_id.get(*id).ok_or_else(|| format!("case {id} not found under {}", root.display()))?;
        let case = case::load_case(dir).map_err(|e| e.to_string())?;
        let features = if targeting {
            case_features(dir, &case, None).map_err(|e| format!("{e:#}"))?
        } else {
            None
        };
        Ok(LoadedCase { case, features })
    });
    let cases: HashMap<&str, Result<LoadedCase, String>> = needed.iter().copied().zip(loaded).collect();
    let embedding: Option<TextEmbedding> = match ctx.cfg.embedding.clone().or_else(|| {
        let p = root.join(synth::EMBEDDING_FILE);
        p.exists().then_some(p)
    }) {
        Some(p) if targeting => Some(cflt::read_embedding(&p)?),
        _ => None,
    };
    let loop_cfg = LoopConfig {
        t_max: a.t_max.unwrap_or(ctx.cfg.t_max),
        routing: ctx.cfg.routing,
        ..LoopConfig::default()
    };
    let params = TargetParams {
        tau: ctx.cfg.tau,
        top_k: ctx.cfg.top_k,
    };

    let results = ctx.exec.map_slice(&items, |it| {
        let started = Instant::now();
        let mut rec = AnswerRecord {
            case_id: it.case_id.clone(),
            subtype: it.subtype,
            raw: String::new(),
            turns: 0,
            wall_ms: 0,
            error: None,
        };
        let lc = match &cases[it.case_id.as_str()] {
            Ok(lc) => lc,
            Err(e) => {
                rec.error = Some(e.clone());
                return (rec, None);
            }
        };
        let tgt = match (&lc.features, &embedding) {
            (Some(f), Some(t)) => Some((f, t, it.organ.as_str(), params)),
            _ => None,
        };
        let organs = organ_list(&lc.case, &ctx.cfg.organs);
        let mut mem = match agent::session_memory(&lc.case, &organs, tgt, Execution::Sequential) {
            Ok((m, _)) => m,
            Err(e) => {
                rec.error = Some(format!("case {}: {e}", it.case_id));
                return (rec, None);
            }
        };
        let q = Question::from(it);
        let transcript = match agent::run_loop(&q, &mut mem, &lc.case.hu, &lc.case.lesions, client.as_ref(), &loop_cfg) {
            Ok(o) => {
                rec.raw = o.final_answer;
                o.transcript
            }
            Err(f) => {
                rec.error = Some(f.error.to_string());
                f.transcript
            }
        };
        rec.turns = transcript.turns.len();
        rec.wall_ms = started.elapsed().as_millis() as u64;
        (rec, Some(transcript))
    });

    let tdir = out.join("transcripts");
    let mut answers = String::new();
    let mut failed = 0;
    for (it, (rec, tr)) in items.iter().zip(&results) {
        if let Some(tr) = tr {
            write_json(&tdir.join(transcript_name(it)), tr)?;
        }
        if let Some(e) = &rec.error {
            failed += 1;
            log::warn!("{}: {e}", rec.key());
        }
        answers.push_str(&serde_json::to_string(rec)?);
        answers.push('\n');
    }
    let answers_path = out.join("answers.jsonl");
    write_atomic(&answers_path, answers.as_bytes())?;
    eprintln!("{} items, {} failed; answers: {}", items.len(), failed, answers_path.display());
    if failed > 0 {
        if let Some((_, e)) = results.iter().find_map(|(r, _)| r.error.as_ref().map(|e| (r, e))) {
            eprintln!("first failure: {e}");
        }
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_eval(ctx: &Ctx, a: EvalArgs) -> Result<ExitCode> {
    let manifest_path = a.manifest.clone().or_else(|| ctx.cfg.manifest.clone()).context("--manifest is required")?;
    let manifest = qagen::load_manifest(&manifest_path)?;
    let groups = a
        .group_by
        .iter()
        .map(|g| g.parse::<GroupBy>().map_err(|e| anyhow!(e)))
        .collect::<Result<Vec<_>>>()?;
    let mut summary = serde_json::Map::new();
    match &a.answers {
        Some(p) if !p.exists() => {
            eprintln!("error: answers file {} does not exist", p.display());
            return Ok(ExitCode::from(2));
        }
        Some(p) => {
            let answers = eval::load_answers(p)?;
            let records = eval::score(&answers, &manifest)?;
            let report = eval::aggregate(&records, &manifest, &groups)?;
            print!("{}", eval::render_table(&report));
            summary.insert("report".into(), serde_json::to_value(&report)?);
        }
        None if !a.assert_rand => {
            eprintln!("error: --answers is required unless --assert-rand is given");
            return Ok(ExitCode::from(2));
        }
        None => {}
    }
    let mut code = ExitCode::SUCCESS;
    if a.assert_rand {
        let seed = a.seed.unwrap_or(ctx.cfg.seed);
        let simulated = eval::random_client_accuracy(&manifest, seed, a.trials, ctx.exec)?;
        let baseline = eval::random_baseline(&manifest, seed, a.trials, ctx.exec)?;
        let bad = eval::rand_violations(&simulated, &baseline, a.tolerance);
        let mut rows = BTreeMap::new();
        for (s, got) in &simulated {
            let want = baseline[s].analytic;
            let ok = (got - want).abs() <= a.tolerance;
            println!("rand {:<38} simulated {:.3} analytic {:.3} {}", s.key(), got, want, if ok { "ok" } else { "FAIL" });
            rows.insert(s.key(), json!({"simulated": got, "analytic": want, "ok": ok}));
        }
        summary.insert("rand".into(), json!({"trials": a.trials, "tolerance": a.tolerance, "subtypes": rows}));
        if !bad.is_empty() {
            eprintln!("{} subtypes outside ±{}", bad.len(), a.tolerance);
            code = ExitCode::from(1);
        }
    }
    if let Some(j) = &a.json {
        write_json(j, &summary)?;
    }
    Ok(code)
}

fn run_synth(ctx: &Ctx, a: SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        cases: a.cases,
        seed: a.seed.unwrap_or(ctx.cfg.seed),
        features: !a.no_features,
    };
    let cases = synth::synth_cohort(&cfg, ctx.exec);
    synth::write_cohort(&a.out, &cases)?;
    eprintln!("wrote {} cases to {}", cases.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
