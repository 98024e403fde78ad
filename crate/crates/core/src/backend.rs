//! Backends for module execution, judging and oracle generation, plus the
//! write-once oracle cache.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use crate::error::{Error, Result};
use crate::pipeline::{
    module_input_text, Agent, ModuleCall, ModuleSlot, OracleSet, OracleSource, OutputKind, Payload, PipelineLayout,
    Task,
};
use crate::prescription::sha256_hex;
use crate::scoring::Judge;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Simulated,
    External,
}

fn default_concurrency() -> usize {
    1
}

fn default_text_path() -> String {
    "/choices/0/message/content".into()
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    /// JSON pointer to the completion text in the response body.
    #[serde(default = "default_text_path")]
    pub response_text_path: String,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

impl BackendSpec {
    pub fn simulated(model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Simulated,
            endpoint_url: None,
            model_name: model_name.into(),
            temperature: 0.0,
            max_concurrency: default_concurrency(),
            auth_token_env: None,
            response_text_path: default_text_path(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff_ms(),
        }
    }

    pub fn external(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::External,
            endpoint_url: Some(endpoint_url.into()),
            ..Self::simulated(model_name)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == BackendKind::External && self.endpoint_url.as_deref().is_none_or(str::is_empty) {
            return Err(Error::InvalidArgument(
                "external backend needs a non-empty endpoint_url".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be a non-negative number",
                self.temperature
            )));
        }
        if self.max_concurrency == 0 {
            return Err(Error::InvalidArgument("max_concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

/// Failure classes a transport reports.
#[derive(Debug)]
pub enum TransportError {
    /// Worth retrying: connection problems, 5xx, 429.
    Transient(String),
    Auth(String),
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> std::result::Result<Value, TransportError>;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
        }
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> std::result::Result<Value, TransportError> {
        let mut req = self.agent.post(url).set("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        match req.send_json(body.clone()) {
            Ok(resp) => resp
                .into_json::<Value>()
                .map_err(|e| TransportError::Fatal(format!("response body is not JSON: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                match code {
                    401 | 403 => Err(TransportError::Auth(format!("HTTP {code}: {text}"))),
                    429 | 500..=599 => Err(TransportError::Transient(format!("HTTP {code}: {text}"))),
                    _ => Err(TransportError::Fatal(format!("HTTP {code}: {text}"))),
                }
            }
            Err(ureq::Error::Transport(t)) => Err(TransportError::Transient(t.to_string())),
        }
    }
}

/// Completion function used by simulated backends: (system, user, seed).
pub type SimulatedFn = Arc<dyn Fn(&str, &str, u64) -> String + Send + Sync>;

/// Deterministic echo used when no simulator function is attached.
pub fn echo_fn(model: &str) -> SimulatedFn {
    let model = model.to_string();
    Arc::new(move |_system, user, seed| format!("[{model}:{seed:016x}] {user}"))
}

struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.in_flight.lock().expect("gate lock");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("gate lock");
        }
        *n += 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.in_flight.lock().expect("gate lock") -= 1;
        self.gate.freed.notify_one();
    }
}

/// A configured backend ready to serve completions.
pub struct BackendClient {
    spec: BackendSpec,
    transport: Box<dyn Transport>,
    simulated: SimulatedFn,
    gate: Gate,
}

impl BackendClient {
    pub fn new(spec: BackendSpec) -> Result<Self> {
        Self::with_transport(spec, Box::new(HttpTransport::default()))
    }

    pub fn with_transport(spec: BackendSpec, transport: Box<dyn Transport>) -> Result<Self> {
        spec.validate()?;
        let simulated = echo_fn(&spec.model_name);
        let limit = spec.max_concurrency;
        Ok(Self {
            spec,
            transport,
            simulated,
            gate: Gate {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                limit,
            },
        })
    }

    /// Routes simulated completions to `f` instead of the echo.
    pub fn with_simulated(mut self, f: SimulatedFn) -> Self {
        self.simulated = f;
        self
    }

    pub fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn bearer(&self) -> Result<Option<String>> {
        match &self.spec.auth_token_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| Error::Auth(format!("environment variable {var} is not set"))),
        }
    }

    pub fn complete(&self, system_text: &str, user_text: &str, seed: u64) -> Result<String> {
        if self.spec.kind == BackendKind::Simulated {
            return Ok((self.simulated)(system_text, user_text, seed));
        }
        let url = self.spec.endpoint_url.as_deref().unwrap_or_default();
        let bearer = self.bearer()?;
        let body = json!({
            "model": self.spec.model_name,
            "messages": [
                {"role": "system", "content": system_text},
                {"role": "user", "content": user_text},
            ],
            "temperature": self.spec.temperature,
        });
        let _slot = self.gate.acquire();
        let mut attempt = 0u32;
        loop {
            match self.transport.post_json(url, bearer.as_deref(), &body) {
                Ok(v) => {
                    return v
                        .pointer(&self.spec.response_text_path)
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .ok_or_else(|| {
                            Error::MalformedResponse(format!("no string at {}", self.spec.response_text_path))
                        })
                }
                Err(TransportError::Auth(m)) => return Err(Error::Auth(m)),
                Err(TransportError::Fatal(m)) => return Err(Error::MalformedResponse(m)),
                Err(TransportError::Transient(m)) => {
                    if attempt >= self.spec.max_retries {
                        return Err(Error::Transport(format!("giving up after {attempt} retries: {m}")));
                    }
                    let wait = self.spec.backoff_base_ms.saturating_mul(1 << attempt);
                    attempt += 1;
                    warn!(attempt, wait_ms = wait, error = %m, "transient backend failure; retrying");
                    std::thread::sleep(Duration::from_millis(wait));
                }
            }
        }
    }
}

fn kind_instructions(kind: OutputKind) -> &'static str {
    match kind {
        OutputKind::Text => "Reply with plain text only.",
        OutputKind::IntentLabel => {
            "Reply with one JSON object of the form {\"intent\": string, \"slots\": {string: string}} and nothing else."
        }
        OutputKind::ToolCall => {
            "Reply with one JSON object of the form {\"tool\": string, \"args\": {string: string}} and nothing else."
        }
    }
}

/// System prompt for a module; the correction block, when present, is
/// appended after the fixed instructions and schema.
pub fn module_system_prompt(slot: &ModuleSlot, patch_block: Option<&str>) -> String {
    let mut s = format!(
        "You are the {} stage (module {}) of a multi-stage customer-service assistant. {}",
        slot.name,
        slot.index,
        kind_instructions(slot.output_kind)
    );
    if let Some(block) = patch_block.filter(|b| !b.is_empty()) {
        s.push_str("\n\nCorrections from earlier tasks. Do not repeat the wrong outputs.\n\n");
        s.push_str(block);
    }
    s
}

fn json_object(text: &str) -> Option<Value> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    serde_json::from_str(text.get(start..=end)?).ok()
}

fn string_map(v: Option<&Value>) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Some(Value::Object(m)) = v {
        for (k, v) in m {
            let s = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.insert(k.clone(), s);
        }
    }
    out
}

/// Parses a completion into the payload shape a slot expects.
pub fn parse_payload(kind: OutputKind, text: &str) -> std::result::Result<Payload, String> {
    match kind {
        OutputKind::Text => Ok(Payload::text(text.trim())),
        OutputKind::IntentLabel => {
            let v = json_object(text).ok_or_else(|| format!("no JSON object in reply: {text}"))?;
            let intent = v
                .get("intent")
                .and_then(Value::as_str)
                .ok_or("reply lacks an \"intent\" string")?;
            Ok(Payload::Intent {
                intent: intent.to_string(),
                slots: string_map(v.get("slots")),
            })
        }
        OutputKind::ToolCall => {
            let v = json_object(text).ok_or_else(|| format!("no JSON object in reply: {text}"))?;
            let tool = v
                .get("tool")
                .and_then(Value::as_str)
                .ok_or("reply lacks a \"tool\" string")?;
            Ok(Payload::ToolCall {
                tool: tool.to_string(),
                args: string_map(v.get("args")),
            })
        }
    }
}

/// Module set served by one chat-completion backend.
pub struct LlmAgent {
    client: BackendClient,
    layout: PipelineLayout,
}

impl LlmAgent {
    pub fn new(client: BackendClient, layout: PipelineLayout) -> Self {
        Self { client, layout }
    }
}

impl Agent for LlmAgent {
    fn layout(&self) -> &PipelineLayout {
        &self.layout
    }

    fn backend_tag(&self) -> String {
        format!("{:?}:{}", self.client.spec.kind, self.client.spec.model_name).to_lowercase()
    }

    fn concurrent(&self) -> bool {
        self.client.spec.max_concurrency > 1
    }

    fn execute(&self, call: &ModuleCall<'_>) -> std::result::Result<Payload, String> {
        let system = module_system_prompt(call.slot, call.patch.map(|p| p.rendered_block.as_str()));
        let reply = self
            .client
            .complete(&system, &call.input_text(), call.seed)
            .map_err(|e| e.to_string())?;
        parse_payload(call.slot.output_kind, &reply)
    }
}

const JUDGE_SYSTEM: &str = "You grade one stage of a multi-stage assistant against a reference output. \
Severity rubric: 0 exact match; 0.3 surface-only difference; 0.7 wrong content, intent or argument format; \
0.95 wrong tool. Reply with the severity as a single number between 0 and 1.";

/// Severity judge served by a backend.
pub struct LlmJudge {
    client: BackendClient,
}

impl LlmJudge {
    pub fn new(client: BackendClient) -> Self {
        Self { client }
    }
}

fn first_number(text: &str) -> Option<f64> {
    text.split(|c: char| !(c.is_ascii_digit() || c == '.'))
        .filter(|s| !s.is_empty())
        .find_map(|s| s.parse::<f64>().ok())
}

impl Judge for LlmJudge {
    fn tag(&self) -> String {
        format!("llm:{}", self.client.spec.model_name)
    }

    fn concurrent(&self) -> bool {
        self.client.spec.max_concurrency > 1
    }

    fn score(&self, slot: &ModuleSlot, input: &str, output: &Payload, oracle: &Payload) -> Result<f64> {
        let user = format!(
            "Stage: {} ({})\nInput: {input}\nOutput: {}\nReference: {}",
            slot.name,
            slot.output_kind,
            output.render(),
            oracle.render()
        );
        let reply = self.client.complete(JUDGE_SYSTEM, &user, 0)?;
        let v = first_number(&reply).ok_or_else(|| Error::Judge(format!("no number in judge reply: {reply}")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Judge(format!("severity {v} outside [0, 1]")));
        }
        Ok(v)
    }
}

/// Strong reference model that produces S*_i stage by stage, each stage
/// seeing the reference outputs upstream of it.
pub struct LlmOracle {
    client: BackendClient,
    layout: PipelineLayout,
}

impl LlmOracle {
    pub fn new(client: BackendClient, layout: PipelineLayout) -> Self {
        Self { client, layout }
    }
}

impl OracleSource for LlmOracle {
    fn oracle_for(&self, task: &Task) -> Result<OracleSet> {
        let mut upstream = Vec::new();
        let mut outputs = BTreeMap::new();
        for slot in self.layout.slots() {
            let system = format!("{} Produce the best possible output.", module_system_prompt(slot, None));
            let reply = self.client.complete(&system, &module_input_text(task, &upstream), 0)?;
            let payload = parse_payload(slot.output_kind, &reply).map_err(|message| Error::Backend {
                index: slot.index,
                message,
            })?;
            upstream.push(payload.clone());
            outputs.insert(slot.index, payload);
        }
        Ok(OracleSet {
            task_id: task.task_id.clone(),
            outputs,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheMode {
    ReadWrite,
    Sealed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheLine {
    task_id: String,
    module_index: usize,
    payload: Payload,
    source_tag: String,
}

/// Persistent (task, module) → S*_i store. Entries are write-once; once
/// sealed, misses are errors.
pub struct OracleCache {
    path: Option<PathBuf>,
    source_tag: String,
    mode: RwLock<CacheMode>,
    entries: RwLock<BTreeMap<(String, usize), Payload>>,
    writer: Mutex<Option<File>>,
}

impl OracleCache {
    pub fn in_memory(source_tag: impl Into<String>) -> Self {
        Self {
            path: None,
            source_tag: source_tag.into(),
            mode: RwLock::new(CacheMode::ReadWrite),
            entries: RwLock::new(BTreeMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (or creates) a JSONL cache file.
    pub fn open(path: impl AsRef<Path>, source_tag: impl Into<String>, mode: CacheMode) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = BTreeMap::new();
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let l: CacheLine = serde_json::from_str(&line)?;
                let key = (l.task_id.clone(), l.module_index);
                if let Some(prev) = entries.get(&key) {
                    if prev != &l.payload {
                        return Err(Error::OracleCacheOverwrite {
                            task_id: l.task_id,
                            index: l.module_index,
                        });
                    }
                }
                entries.insert(key, l.payload);
            }
        }
        let writer = match mode {
            CacheMode::ReadWrite => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
            ),
            CacheMode::Sealed => None,
        };
        Ok(Self {
            path: Some(path),
            source_tag: source_tag.into(),
            mode: RwLock::new(mode),
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
        })
    }

    pub fn mode(&self) -> CacheMode {
        *self.mode.read().expect("cache lock")
    }

    pub fn seal(&self) {
        *self.mode.write().expect("cache lock") = CacheMode::Sealed;
        *self.writer.lock().expect("cache lock") = None;
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, task_id: &str, index: usize) -> Option<Payload> {
        self.entries
            .read()
            .expect("cache lock")
            .get(&(task_id.to_string(), index))
            .cloned()
    }

    /// Stores a value; re-inserting the same value is a no-op, a different
    /// one is an error.
    pub fn insert(&self, task_id: &str, index: usize, payload: Payload) -> Result<()> {
        if self.mode() == CacheMode::Sealed {
            return Err(Error::OracleCacheSealed {
                task_id: task_id.to_string(),
                index,
            });
        }
        let mut entries = self.entries.write().expect("cache lock");
        let key = (task_id.to_string(), index);
        if let Some(prev) = entries.get(&key) {
            return if prev == &payload {
                Ok(())
            } else {
                Err(Error::OracleCacheOverwrite {
                    task_id: task_id.to_string(),
                    index,
                })
            };
        }
        if let Some(f) = self.writer.lock().expect("cache lock").as_mut() {
            let line = serde_json::to_string(&CacheLine {
                task_id: task_id.to_string(),
                module_index: index,
                payload: payload.clone(),
                source_tag: self.source_tag.clone(),
            })?;
            let path = self.path.clone().unwrap_or_default();
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
            f.flush().map_err(|e| Error::io(&path, e))?;
        }
        entries.insert(key, payload);
        Ok(())
    }

    /// sha256 over the sorted entries.
    pub fn content_hash(&self) -> Result<String> {
        let entries = self.entries.read().expect("cache lock");
        let rows: Vec<(&(String, usize), &Payload)> = entries.iter().collect();
        Ok(sha256_hex(&serde_json::to_vec(&rows)?))
    }

    /// Oracle view for a layout, optionally filling misses from `backend`.
    pub fn source<'a>(&'a self, layout: &'a PipelineLayout, backend: Option<&'a dyn OracleSource>) -> CachedOracle<'a> {
        CachedOracle {
            cache: self,
            layout,
            backend,
        }
    }
}

/// Returns the cached S*_i, calling the backend only on a miss in
/// read-write mode.
pub fn oracle_get_or_fill(
    cache: &OracleCache,
    task: &Task,
    index: usize,
    backend: Option<&dyn OracleSource>,
) -> Result<Payload> {
    if let Some(p) = cache.get(&task.task_id, index) {
        return Ok(p);
    }
    let sealed = || Error::OracleCacheSealed {
        task_id: task.task_id.clone(),
        index,
    };
    if cache.mode() == CacheMode::Sealed {
        return Err(sealed());
    }
    let backend = backend.ok_or_else(|| Error::MissingOracle {
        task_id: task.task_id.clone(),
        index,
    })?;
    debug!(task = %task.task_id, index, "oracle cache miss; filling");
    let set = backend.oracle_for(task)?;
    for (&i, p) in &set.outputs {
        cache.insert(&task.task_id, i, p.clone())?;
    }
    set.get(index).cloned()
}

pub struct CachedOracle<'a> {
    cache: &'a OracleCache,
    layout: &'a PipelineLayout,
    backend: Option<&'a dyn OracleSource>,
}

impl OracleSource for CachedOracle<'_> {
    fn oracle_for(&self, task: &Task) -> Result<OracleSet> {
        let mut outputs = BTreeMap::new();
        for slot in self.layout.slots() {
            outputs.insert(
                slot.index,
                oracle_get_or_fill(self.cache, task, slot.index, self.backend)?,
            );
        }
        Ok(OracleSet {
            task_id: task.task_id.clone(),
            outputs,
        })
    }
}
