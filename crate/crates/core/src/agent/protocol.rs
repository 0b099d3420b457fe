//! Request rendering and parsing of the fenced key-value reply block.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::parse_answer;
use crate::memory::UNDETERMINED;

pub const SYSTEM_PROMPT: &str = "You answer multiple-choice questions about a 3D chest CT. \
You see a text memory of organ measurements, candidate slices and your earlier turns, and at most one \
rendered axial slice per turn. Write your reasoning, then end with a fenced block:\n\
```\nanswer=<option letter or undetermined>\nevidence=<comma-separated memory ids>\n\
assumptions=<semicolon-separated>\nneed_visual=<true|false>\ntool=<mask-overlay|crop-zoom|none>\n\
slice=<axial index>\nroi=<x0,y0,x1,y1 for crop-zoom>\n```";

pub const REASON_ONLY_PROMPT: &str = "Leave need_visual, tool, slice and roi out of the block; \
a separate request will ask for them.";

pub const ROUTE_PROMPT: &str = "Decide whether one more axial slice is needed. Reply with a fenced \
block holding only need_visual, tool, slice and roi.";

pub const STRICT_REMINDER: &str = "Your previous reply could not be parsed. Reply again and end with \
exactly one fenced block of key=value lines. The answer key is required and must be an option letter \
or `undetermined`.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tool {
    MaskOverlay,
    CropZoom,
}

impl Tool {
    pub const ALL: [Tool; 2] = [Tool::MaskOverlay, Tool::CropZoom];

    pub fn as_str(self) -> &'static str {
        match self {
            Tool::MaskOverlay => "mask-overlay",
            Tool::CropZoom => "crop-zoom",
        }
    }
}

impl std::fmt::Display for Tool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Tool {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mask-overlay" => Ok(Tool::MaskOverlay),
            "crop-zoom" => Ok(Tool::CropZoom),
            _ => Err(format!("unknown tool {s:?}")),
        }
    }
}

/// Router output. `action` is `None` exactly when no visual is acquired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterDecision {
    acquire_visual: bool,
    action: Option<Tool>,
}

impl RouterDecision {
    pub const SUFFICIENT: RouterDecision = RouterDecision {
        acquire_visual: false,
        action: None,
    };

    pub fn acquire(tool: Tool) -> Self {
        RouterDecision {
            acquire_visual: true,
            action: Some(tool),
        }
    }

    pub fn acquire_visual(&self) -> bool {
        self.acquire_visual
    }

    pub fn action(&self) -> Option<Tool> {
        self.action
    }

    pub fn action_name(&self) -> &'static str {
        self.action.map_or("none", Tool::as_str)
    }
}

/// Half-open pixel box `[x0, x1) × [y0, y1)` on an axial slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl std::str::FromStr for RoiBox {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("roi {s:?}: {e}"))?;
        match v[..] {
            [x0, y0, x1, y1] if x0 < x1 && y0 < y1 => Ok(RoiBox { x0, y0, x1, y1 }),
            _ => Err(format!("roi {s:?} is not x0,y0,x1,y1 with x0<x1, y0<y1")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestMode {
    /// Reasoning and routing in one reply.
    Combined,
    /// Reasoning only; routing comes from a separate `Route` call.
    Reason,
    Route,
}

/// One rendered slice travelling with a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceImage {
    pub slice: usize,
    pub tool: Tool,
    #[serde(skip)]
    pub png: Vec<u8>,
    pub png_sha256: String,
}

impl SliceImage {
    pub fn new(slice: usize, tool: Tool, png: Vec<u8>) -> Self {
        let png_sha256 = hex::encode(Sha256::digest(&png));
        SliceImage {
            slice,
            tool,
            png,
            png_sha256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub system: String,
    pub memory: String,
    /// Number of memory entries; valid evidence ids are `0..memory_len`.
    pub memory_len: usize,
    pub question: String,
    pub options: Vec<String>,
    /// `case_id/subtype`, used by fixture-driven clients.
    pub item_key: String,
    pub turn: usize,
    /// Zero-based count of client calls made earlier in this session.
    pub call: usize,
    pub mode: RequestMode,
    pub image: Option<SliceImage>,
    pub reminder: Option<String>,
}

impl ModelRequest {
    /// User message text; the image, if any, is sent alongside.
    pub fn user_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Evidence memory:\n{}", self.memory.trim_end());
        let _ = writeln!(s, "\nQuestion: {}", self.question);
        for (i, o) in self.options.iter().enumerate() {
            let _ = writeln!(s, "{}) {}", (b'A' + i as u8) as char, o);
        }
        let _ = writeln!(s, "\nTurn {}.", self.turn);
        if let Some(img) = &self.image {
            let _ = writeln!(s, "Attached: axial slice {} rendered with {}.", img.slice, img.tool);
        }
        match self.mode {
            RequestMode::Combined => {}
            RequestMode::Reason => s.push_str(REASON_ONLY_PROMPT),
            RequestMode::Route => s.push_str(ROUTE_PROMPT),
        }
        if let Some(r) = &self.reminder {
            let _ = write!(s, "\n{r}");
        }
        s
    }

    /// SHA-256 over the canonical JSON of the request; the image enters
    /// through its own digest.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serialises");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Routing keys as written by the model, interpreted later by the router.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteFields {
    pub need_visual: Option<String>,
    pub tool: Option<String>,
    pub slice: Option<String>,
    pub roi: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedReply {
    pub rationale: String,
    /// Option letter, or `undetermined`.
    pub answer: String,
    pub evidence: Vec<usize>,
    pub assumptions: Vec<String>,
    pub route: RouteFields,
}

fn last_fenced_block(text: &str) -> Option<(usize, &str)> {
    let end = text.rfind("```")?;
    let before = &text[..end];
    let start = before.rfind("```")?;
    let inner = &before[start + 3..];
    // Drop an info string such as ```text.
    let inner = inner.split_once('\n').map_or("", |(_, rest)| rest);
    Some((start, inner))
}

fn key_values(block: &str) -> Vec<(String, String)> {
    block
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_ascii_lowercase(), v.trim().to_string()))
        .collect()
}

fn route_fields(kv: &[(String, String)]) -> RouteFields {
    let get = |k: &str| kv.iter().rev().find(|(key, _)| key == k).map(|(_, v)| v.clone());
    RouteFields {
        need_visual: get("need_visual"),
        tool: get("tool"),
        slice: get("slice"),
        roi: get("roi"),
    }
}

fn answer_letter(value: &str, options: &[String]) -> Result<String, String> {
    if value.eq_ignore_ascii_case(UNDETERMINED) {
        return Ok(UNDETERMINED.to_string());
    }
    parse_answer(value, options)
        .map(|i| ((b'A' + i as u8) as char).to_string())
        .ok_or_else(|| format!("answer {value:?} names no option"))
}

/// Parses a reasoning reply. Fails when there is no fenced block, no
/// `answer` key, an answer naming no option, or a malformed evidence list.
pub fn parse_reply(text: &str, options: &[String]) -> Result<ParsedReply, String> {
    let (start, block) = last_fenced_block(text).ok_or("no fenced block")?;
    let kv = key_values(block);
    let get = |k: &str| kv.iter().rev().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    let answer = answer_letter(get("answer").ok_or("no answer key")?, options)?;
    let evidence = match get("evidence") {
        None => vec![],
        Some(v) => v
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<usize>().map_err(|e| format!("evidence {p:?}: {e}")))
            .collect::<Result<_, _>>()?,
    };
    let assumptions = get("assumptions")
        .map(|v| v.split(';').map(str::trim).filter(|p| !p.is_empty()).map(String::from).collect())
        .unwrap_or_default();
    Ok(ParsedReply {
        rationale: text[..start].trim().to_string(),
        answer,
        evidence,
        assumptions,
        route: route_fields(&kv),
    })
}

/// Parses the routing keys of a dedicated routing reply.
pub fn parse_route_reply(text: &str) -> Result<RouteFields, String> {
    let (_, block) = last_fenced_block(text).ok_or("no fenced block")?;
    let f = route_fields(&key_values(block));
    if f.need_visual.is_none() {
        return Err("no need_visual key".into());
    }
    Ok(f)
}

/// Writes a reply in the format `parse_reply` reads.
pub fn format_reply(
    rationale: &str,
    answer: &str,
    evidence: &[usize],
    assumptions: &[&str],
    visual: Option<(Tool, usize, Option<RoiBox>)>,
) -> String {
    let ev: Vec<String> = evidence.iter().map(usize::to_string).collect();
    let mut s = format!(
        "{rationale}\n```\nanswer={answer}\nevidence={}\nassumptions={}\n",
        ev.join(","),
        assumptions.join("; ")
    );
    match visual {
        None => s.push_str("need_visual=false\ntool=none\n"),
        Some((tool, z, roi)) => {
            let _ = writeln!(s, "need_visual=true\ntool={tool}\nslice={z}");
            if let Some(r) = roi {
                let _ = writeln!(s, "roi={},{},{},{}", r.x0, r.y0, r.x1, r.y1);
            }
        }
    }
    s.push_str("```\n");
    s
}
