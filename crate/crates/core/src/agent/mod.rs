//! The one-slice-per-turn loop: reason over memory, route, render one
//! slice, attach it to the next turn, release the previous one.

pub mod client;
pub mod protocol;
pub mod visual;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::case::{Case, LOBES, PLEURAL_SPACE};
use crate::cflt::{self, FeatureField, TargetParams, TextEmbedding};
use crate::exec::Execution;
use crate::memory::{self, AgentUpdate, Entry, EvidenceMemory, MemoryError, RoiLocation, UNDETERMINED};
use crate::qagen::VqaItem;
use crate::volume::{BinaryMask, LabelVolume, ScalarVolume};

pub use client::{CannedClient, ClientError, ModelClient, OracleClient, RandomClient};
pub use protocol::{ModelRequest, RequestMode, RoiBox, RouteFields, RouterDecision, SliceImage, Tool};
pub use visual::{apply_visual_op, Window};

pub const DEFAULT_T_MAX: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("invalid loop setup: {0}")]
    InvalidSetup(String),
    #[error("targeting: {0}")]
    Target(#[from] cflt::CfltError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    /// `case_id/subtype`.
    pub key: String,
    pub text: String,
    pub options: Vec<String>,
    pub organ: String,
}

impl From<&VqaItem> for Question {
    fn from(it: &VqaItem) -> Self {
        Question {
            key: it.key(),
            text: it.question.clone(),
            options: it.options.clone(),
            organ: it.organ.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    /// Routing keys come from the reasoning reply.
    SameResponse,
    /// A second call per turn asks only for the routing decision.
    SeparateCall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub t_max: usize,
    pub routing: RoutingMode,
    pub toolset: Vec<Tool>,
    /// Overrides the organ-based display window.
    pub window: Option<Window>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            t_max: DEFAULT_T_MAX,
            routing: RoutingMode::SameResponse,
            toolset: Tool::ALL.to_vec(),
            window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    pub request_digests: Vec<String>,
    pub responses: Vec<String>,
    pub update: AgentUpdate,
    pub decision: RouterDecision,
    /// Slice rendered for the next turn, if any.
    pub rendered_slice: Option<usize>,
    pub image_sha256: Option<String>,
    pub flags: Vec<String>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub item_key: String,
    pub t_max: usize,
    pub turns: Vec<TurnRecord>,
    pub final_answer: Option<String>,
    pub dropped_slices: Vec<usize>,
    pub error: Option<String>,
}

impl SessionTranscript {
    /// JSON bytes without wall-clock fields.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_value(self).expect("transcript serialises");
        if let Some(turns) = v["turns"].as_array_mut() {
            for t in turns {
                if let Some(o) = t.as_object_mut() {
                    o.remove("elapsed_ms");
                }
            }
        }
        serde_json::to_vec(&v).expect("value serialises")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }
}

#[derive(Debug)]
pub struct LoopOutcome {
    pub final_answer: String,
    pub transcript: SessionTranscript,
}

/// A client failure mid-session, with the turns completed so far.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct LoopFailure {
    pub error: AgentError,
    pub transcript: SessionTranscript,
}

/// What one reasoning call produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub update: AgentUpdate,
    pub route: RouteFields,
    pub request_digests: Vec<String>,
    pub responses: Vec<String>,
    pub flags: Vec<String>,
    pub calls: usize,
}

struct Session<'a> {
    q: &'a Question,
    client: &'a dyn ModelClient,
    calls: usize,
}

impl Session<'_> {
    fn request(&self, mem: &EvidenceMemory, turn: usize, mode: RequestMode, image: Option<&SliceImage>, reminder: bool) -> ModelRequest {
        ModelRequest {
            system: protocol::SYSTEM_PROMPT.to_string(),
            memory: mem.render(),
            memory_len: mem.len(),
            question: self.q.text.clone(),
            options: self.q.options.clone(),
            item_key: self.q.key.clone(),
            turn,
            call: self.calls,
            mode,
            image: image.cloned(),
            reminder: reminder.then(|| protocol::STRICT_REMINDER.to_string()),
        }
    }

    fn call(&mut self, req: &ModelRequest, digests: &mut Vec<String>, responses: &mut Vec<String>) -> Result<String, ClientError> {
        digests.push(req.digest());
        self.calls += 1;
        let text = self.client.complete(req)?;
        responses.push(text.clone());
        Ok(text)
    }
}

/// One reasoning turn: asks the model (retrying once with a stricter
/// reminder), appends the resulting update to memory and attaches the
/// image's pixels. Evidence ids that do not point into memory are dropped.
fn reason_turn(
    s: &mut Session<'_>,
    mem: &mut EvidenceMemory,
    turn: usize,
    image: Option<&SliceImage>,
    mode: RequestMode,
) -> Result<StepOutcome, AgentError> {
    let (mut digests, mut responses, mut flags) = (vec![], vec![], vec![]);
    let start_calls = s.calls;
    let mut parsed = None;
    for retry in [false, true] {
        let req = s.request(mem, turn, mode, image, retry);
        let text = s.call(&req, &mut digests, &mut responses)?;
        match protocol::parse_reply(&text, &s.q.options) {
            Ok(p) => {
                parsed = Some(p);
                break;
            }
            Err(e) => flags.push(format!("unparseable reply: {e}")),
        }
    }
    let parsed = parsed.unwrap_or_else(|| {
        flags.push("undetermined after retry".into());
        protocol::ParsedReply {
            rationale: String::new(),
            answer: UNDETERMINED.to_string(),
            evidence: vec![],
            assumptions: vec![],
            route: RouteFields::default(),
        }
    });
    let (evidence, bad): (Vec<usize>, Vec<usize>) = parsed.evidence.iter().partition(|&&id| id < mem.len());
    if !bad.is_empty() {
        flags.push(format!("dropped evidence ids {bad:?}"));
    }
    let update = AgentUpdate {
        turn: mem.last_turn() + 1,
        rationale: parsed.rationale,
        answer: parsed.answer,
        evidence_refs: evidence,
        assumptions: parsed.assumptions,
        attached_slice: image.map(|i| i.slice),
    };
    mem.append(Entry::Update(update.clone()))?;
    if let Some(img) = image {
        mem.attach_pixels(img.slice, img.png.clone())?;
    }
    Ok(StepOutcome {
        update,
        route: parsed.route,
        request_digests: digests,
        responses,
        flags,
        calls: s.calls - start_calls,
    })
}

/// Single reasoning step against a memory, as the first turn of a session.
pub fn reason_step(q: &Question, mem: &mut EvidenceMemory, client: &dyn ModelClient) -> Result<StepOutcome, AgentError> {
    let mut s = Session { q, client, calls: 0 };
    reason_turn(&mut s, mem, 1, None, RequestMode::Combined)
}

/// Where and how to look next.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub decision: RouterDecision,
    pub slice: Option<usize>,
    pub roi: Option<RoiBox>,
    pub flags: Vec<String>,
}

/// Interprets routing keys. Anything unusable yields `(false, none)` with
/// a flag; a missing slice falls back to the best-ranked candidate slice.
pub fn route(fields: &RouteFields, toolset: &[Tool], mem: &EvidenceMemory, depth: usize) -> Route {
    let mut flags = vec![];
    let stop = |flags: Vec<String>| Route {
        decision: RouterDecision::SUFFICIENT,
        slice: None,
        roi: None,
        flags,
    };
    let need = match fields.need_visual.as_deref().map(str::to_ascii_lowercase).as_deref() {
        Some("true" | "yes" | "1") => true,
        Some("false" | "no" | "0") | None => false,
        Some(other) => {
            flags.push(format!("unreadable need_visual {other:?}"));
            return stop(flags);
        }
    };
    if !need {
        return stop(flags);
    }
    let tool = match fields.tool.as_deref().map(str::parse::<Tool>) {
        Some(Ok(t)) if toolset.contains(&t) => t,
        Some(Ok(t)) => {
            flags.push(format!("tool {t} is not in the toolset"));
            return stop(flags);
        }
        Some(Err(e)) => {
            flags.push(e);
            return stop(flags);
        }
        None => {
            flags.push("need_visual without a tool".into());
            return stop(flags);
        }
    };
    let slice = match fields.slice.as_deref().map(str::parse::<usize>) {
        Some(Ok(z)) => z,
        Some(Err(_)) | None => {
            let fallback = mem
                .rois()
                .filter_map(|r| match r.location {
                    RoiLocation::AxialSlice(z) => Some((r.rank, z)),
                    RoiLocation::SubRegion(_) => None,
                })
                .min()
                .map_or(depth / 2, |(_, z)| z);
            flags.push(format!("no usable slice; using {fallback}"));
            fallback
        }
    };
    let roi = match fields.roi.as_deref().map(str::parse::<RoiBox>) {
        Some(Ok(r)) => Some(r),
        Some(Err(e)) => {
            flags.push(e);
            None
        }
        None => None,
    };
    Route {
        decision: RouterDecision::acquire(tool),
        slice: Some(slice),
        roi,
        flags,
    }
}

/// Runs turns until the router declares sufficiency or `t_max` is hit.
/// The slice rendered in turn t travels with the request of turn t+1; the
/// previously attached slice is released when a new one arrives and the
/// last one when the session ends.
pub fn run_loop(
    q: &Question,
    mem: &mut EvidenceMemory,
    hu: &ScalarVolume,
    masks: &LabelVolume,
    client: &dyn ModelClient,
    cfg: &LoopConfig,
) -> Result<LoopOutcome, Box<LoopFailure>> {
    let mut transcript = SessionTranscript {
        item_key: q.key.clone(),
        t_max: cfg.t_max,
        turns: vec![],
        final_answer: None,
        dropped_slices: vec![],
        error: None,
    };
    let fail = |error: AgentError, mut transcript: SessionTranscript| {
        transcript.error = Some(error.to_string());
        Box::new(LoopFailure { error, transcript })
    };
    if cfg.t_max == 0 || cfg.toolset.is_empty() {
        return Err(fail(AgentError::InvalidSetup("t_max and toolset must be nonempty".into()), transcript));
    }
    let window = cfg.window.unwrap_or_else(|| visual::window_for_organ(&q.organ));
    let depth = hu.dims().nz;
    let mut s = Session { q, client, calls: 0 };
    let mut pending: Option<SliceImage> = None;
    let mut live: Option<usize> = None;
    for t in 1..=cfg.t_max {
        let started = Instant::now();
        let image = pending.take();
        let reason_mode = match cfg.routing {
            RoutingMode::SameResponse => RequestMode::Combined,
            RoutingMode::SeparateCall => RequestMode::Reason,
        };
        let mut step = match reason_turn(&mut s, mem, t, image.as_ref(), reason_mode) {
            Ok(st) => st,
            Err(e) => return Err(fail(e, transcript)),
        };
        if let Some(img) = &image {
            if let Some(prev) = live.filter(|&p| p != img.slice) {
                if let Err(e) = mem.drop_slice(prev) {
                    return Err(fail(e.into(), transcript));
                }
                transcript.dropped_slices.push(prev);
            }
            live = Some(img.slice);
        }
        if cfg.routing == RoutingMode::SeparateCall {
            let req = s.request(mem, t, RequestMode::Route, None, false);
            match s.call(&req, &mut step.request_digests, &mut step.responses) {
                Ok(text) => match protocol::parse_route_reply(&text) {
                    Ok(f) => step.route = f,
                    Err(e) => step.flags.push(format!("unparseable routing reply: {e}")),
                },
                Err(e) => return Err(fail(e.into(), transcript)),
            }
        }
        let r = route(&step.route, &cfg.toolset, mem, depth);
        step.flags.extend(r.flags);
        let mut decision = r.decision;
        let mut rendered = None;
        if let (Some(tool), Some(z)) = (decision.action(), r.slice) {
            if t < cfg.t_max {
                match apply_visual_op(tool, z, hu, masks, r.roi, window) {
                    Ok(png) => {
                        let img = SliceImage::new(z, tool, png);
                        rendered = Some(img.png_sha256.clone());
                        pending = Some(img);
                    }
                    Err(e) => {
                        step.flags.push(format!("visual op failed: {e}"));
                        decision = RouterDecision::SUFFICIENT;
                    }
                }
            }
        }
        transcript.turns.push(TurnRecord {
            turn: t,
            request_digests: step.request_digests,
            responses: step.responses,
            update: step.update,
            decision,
            rendered_slice: pending.as_ref().map(|p| p.slice),
            image_sha256: rendered,
            flags: step.flags,
            elapsed_ms: started.elapsed().as_millis() as u64,
        });
        if !decision.acquire_visual() {
            break;
        }
    }
    if let Some(z) = live {
        if let Err(e) = mem.drop_slice(z) {
            return Err(fail(e.into(), transcript));
        }
        transcript.dropped_slices.push(z);
    }
    let final_answer = transcript.turns.last().map(|t| t.update.answer.clone()).unwrap_or_else(|| UNDETERMINED.to_string());
    transcript.final_answer = Some(final_answer.clone());
    Ok(LoopOutcome { final_answer, transcript })
}

/// Mask used to crop and score the heatmap for a question about `organ`.
pub fn target_organ_mask(organs: &LabelVolume, organ: &str) -> BinaryMask {
    match organ {
        "lung" | "bronchus" => organs.mask_of_names(&LOBES),
        "pleura" => {
            let mut names: Vec<&str> = LOBES.to_vec();
            names.push(PLEURAL_SPACE);
            organs.mask_of_names(&names)
        }
        other if organs.label_of(other).is_some() => organs.mask_of_names(&[other]),
        _ => organs.foreground(),
    }
}

/// Organ records for every labelled organ plus, when a feature field is
/// given, the ranked candidate slices from lesion targeting.
pub fn session_memory(
    case: &Case,
    organ_list: &[String],
    targeting: Option<(&FeatureField, &TextEmbedding, &str, TargetParams)>,
    exec: Execution,
) -> Result<(EvidenceMemory, Vec<String>), AgentError> {
    let init = memory::init_memory_with(&case.organs, &case.hu, organ_list, exec)?;
    let mut mem = init.memory;
    let mut warnings: Vec<String> = init.omitted.iter().map(|o| format!("organ {o} omitted: no voxels")).collect();
    if let Some((f, t, organ, params)) = targeting {
        let mask = target_organ_mask(&case.organs, organ);
        let out = cflt::target_slices(f, t, &mask, params, exec)?;
        for c in out.candidates {
            mem.append(Entry::Roi(c))?;
        }
        warnings.extend(out.warnings);
    }
    Ok((mem, warnings))
}
