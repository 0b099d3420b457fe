//! Run configuration: a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Unknown keys are rejected so typos do not pass
//! silently. `to_text` writes every key in a fixed order and parsing its
//! output yields the same config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::agent::{RoutingMode, DEFAULT_T_MAX};
use crate::cflt::{DEFAULT_TAU, DEFAULT_TOP_K};

pub const DEFAULT_TOKEN_ENV: &str = "SLICEWISE_API_TOKEN";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config key {key}: {msg}")]
    Value { key: String, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("{key} = {path}: no such file or directory")]
    MissingPath { key: String, path: PathBuf },
    #[error("{0}: {1}")]
    Io(PathBuf, String),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientKind {
    Canned,
    Oracle,
    Random,
    Http,
}

impl ClientKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClientKind::Canned => "canned",
            ClientKind::Oracle => "oracle",
            ClientKind::Random => "random",
            ClientKind::Http => "http",
        }
    }
}

impl FromStr for ClientKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "canned" => Ok(ClientKind::Canned),
            "oracle" => Ok(ClientKind::Oracle),
            "random" => Ok(ClientKind::Random),
            "http" => Ok(ClientKind::Http),
            _ => Err(format!("unknown client {s:?} (canned|oracle|random|http)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Directory of case directories.
    pub cases_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Prompt embedding used for lesion targeting.
    pub embedding: Option<PathBuf>,
    /// Generator rule tables; the bundled chest tables when absent.
    pub rules: Option<PathBuf>,
    /// Organs recorded in memory; every labelled organ when empty.
    pub organs: Vec<String>,
    pub tau: f64,
    pub top_k: usize,
    pub t_max: usize,
    pub routing: RoutingMode,
    pub client: ClientKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub token_env: String,
    pub timeout_s: u64,
    pub canned_script: Option<PathBuf>,
    pub seed: u64,
    pub target_per_subtype: usize,
    pub per_case_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cases_dir: None,
            manifest: None,
            output_dir: PathBuf::from("out"),
            embedding: None,
            rules: None,
            organs: vec![],
            tau: DEFAULT_TAU,
            top_k: DEFAULT_TOP_K,
            t_max: DEFAULT_T_MAX,
            routing: RoutingMode::SameResponse,
            client: ClientKind::Oracle,
            endpoint: None,
            model: None,
            token_env: DEFAULT_TOKEN_ENV.to_string(),
            timeout_s: 120,
            canned_script: None,
            seed: 0,
            target_per_subtype: 60,
            per_case_cap: 3,
        }
    }
}

fn routing_str(r: RoutingMode) -> &'static str {
    match r {
        RoutingMode::SameResponse => "same-response",
        RoutingMode::SeparateCall => "separate-call",
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        msg: e.to_string(),
    })
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = || Some(PathBuf::from(v));
        match key {
            "cases_dir" => self.cases_dir = path(),
            "manifest" => self.manifest = path(),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "embedding" => self.embedding = path(),
            "rules" => self.rules = path(),
            "organs" => {
                self.organs = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
            }
            "tau" => {
                let t: f64 = parse_num(key, v)?;
                if !t.is_finite() {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        msg: "must be finite".into(),
                    });
                }
                self.tau = t;
            }
            "top_k" => self.top_k = parse_num(key, v)?,
            "t_max" => {
                let t: usize = parse_num(key, v)?;
                if t == 0 {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        msg: "must be at least 1".into(),
                    });
                }
                self.t_max = t;
            }
            "routing" => {
                self.routing = match v {
                    "same-response" => RoutingMode::SameResponse,
                    "separate-call" => RoutingMode::SeparateCall,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            msg: format!("{v:?} is not same-response|separate-call"),
                        })
                    }
                }
            }
            "client" => {
                self.client = v.parse().map_err(|msg| ConfigError::Value { key: key.into(), msg })?;
            }
            "endpoint" => self.endpoint = Some(v.to_string()),
            "model" => self.model = Some(v.to_string()),
            "token_env" => self.token_env = v.to_string(),
            "timeout_s" => self.timeout_s = parse_num(key, v)?,
            "canned_script" => self.canned_script = path(),
            "seed" => self.seed = parse_num(key, v)?,
            "target_per_subtype" => self.target_per_subtype = parse_num(key, v)?,
            "per_case_cap" => self.per_case_cap = parse_num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e.to_string()))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &str| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        for (k, v) in [("cases_dir", p(&self.cases_dir)), ("manifest", p(&self.manifest))] {
            if let Some(v) = v {
                kv(k, &v);
            }
        }
        kv("output_dir", &self.output_dir.display().to_string());
        for (k, v) in [("embedding", p(&self.embedding)), ("rules", p(&self.rules))] {
            if let Some(v) = v {
                kv(k, &v);
            }
        }
        if !self.organs.is_empty() {
            kv("organs", &self.organs.join(", "));
        }
        kv("tau", &self.tau.to_string());
        kv("top_k", &self.top_k.to_string());
        kv("t_max", &self.t_max.to_string());
        kv("routing", routing_str(self.routing));
        kv("client", self.client.as_str());
        if let Some(e) = &self.endpoint {
            kv("endpoint", e);
        }
        if let Some(m) = &self.model {
            kv("model", m);
        }
        kv("token_env", &self.token_env);
        kv("timeout_s", &self.timeout_s.to_string());
        if let Some(c) = p(&self.canned_script) {
            kv("canned_script", &c);
        }
        kv("seed", &self.seed.to_string());
        kv("target_per_subtype", &self.target_per_subtype.to_string());
        kv("per_case_cap", &self.per_case_cap.to_string());
        s
    }

    /// Every input path named by the config must exist.
    pub fn check_inputs(&self) -> Result<()> {
        let inputs = [
            ("cases_dir", &self.cases_dir),
            ("embedding", &self.embedding),
            ("rules", &self.rules),
            ("canned_script", &self.canned_script),
        ];
        for (key, p) in inputs {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ConfigError::MissingPath {
                        key: key.to_string(),
                        path: p.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}
