//! LLM backends and response parsers.
//!
//! [`Backend`] is the only thing the pipeline knows about a model. Besides the
//! HTTP chat client there are three deterministic stand-ins used by tests and
//! dry runs: a scripted replay, a linear oracle and a nearest-demo oracle.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::modules::{LandcoverClass, ModuleCall};
use crate::region::TargetClass;

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_TOP_P: f64 = 1.0;
pub const ESTIMATION_MAX_TOKENS: u32 = 64;
pub const SELECTION_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub n_samples: usize,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            n_samples: 1,
            max_tokens: ESTIMATION_MAX_TOKENS,
        }
    }

    pub fn samples(mut self, n: usize) -> Self {
        self.n_samples = n;
        self
    }

    pub fn max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn top_p(mut self, p: f64) -> Self {
        self.top_p = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Argument("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Argument("top_p must be in (0, 1]".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Argument("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Scripted,
    LinearOracle,
    KnnOracle,
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Returns exactly `request.n_samples` responses.
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>>;

    /// How many single-sample requests may run at once.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Issues `count` independent single-sample completions, up to the backend's
/// in-flight limit at a time. Responses keep request order.
pub fn complete_many(backend: &dyn Backend, request: &CompletionRequest, count: usize) -> Vec<Result<String>> {
    let single = CompletionRequest {
        n_samples: 1,
        ..request.clone()
    };
    let width = backend.max_in_flight().max(1);
    let first = |r: Result<Vec<String>>| {
        r.and_then(|mut v| {
            if v.is_empty() {
                Err(Error::Backend("backend returned no choices".into()))
            } else {
                Ok(v.swap_remove(0))
            }
        })
    };
    if width == 1 {
        return (0..count).map(|_| first(backend.complete(&single))).collect();
    }
    let mut out = Vec::with_capacity(count);
    for chunk_start in (0..count).step_by(width) {
        let n = width.min(count - chunk_start);
        let chunk: Vec<Result<String>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..n).map(|_| s.spawn(|| first(backend.complete(&single)))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Backend("worker panicked".into()))))
                .collect()
        });
        out.extend(chunk);
    }
    out
}

/// Replays a fixed list of responses, front to back.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<String>>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            queue: Mutex::new(responses.into_iter().map(Into::into).collect()),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    /// Prompts received so far, one entry per `complete` call.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl Backend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>> {
        request.validate()?;
        let mut q = self.queue.lock().unwrap();
        if q.len() < request.n_samples {
            return Err(Error::Backend(format!(
                "scripted backend exhausted: wanted {}, have {}",
                request.n_samples,
                q.len()
            )));
        }
        self.prompts.lock().unwrap().push(request.prompt.clone());
        Ok(q.drain(..request.n_samples).collect())
    }
}

/// An estimation prompt split back into its demonstrations and target.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedEstimationPrompt {
    pub demonstrations: Vec<(String, f64)>,
    pub target: String,
}

/// Recovers demonstrations and the target paragraph from an estimation prompt.
pub fn parse_estimation_prompt(prompt: &str) -> Result<ParsedEstimationPrompt> {
    let mut demonstrations = Vec::new();
    let mut target = None;
    for block in prompt.split("\n\n").filter(|b| !b.trim().is_empty()) {
        let lines: Vec<&str> = block.lines().collect();
        let last = lines.last().copied().unwrap_or_default().trim();
        let Some(answer) = last.strip_prefix("Answer:") else {
            return Err(Error::Backend("estimation prompt block has no Answer line".into()));
        };
        let paragraph = lines[0].to_string();
        if answer.trim().is_empty() {
            target = Some(paragraph);
        } else {
            demonstrations.push((paragraph, parse_numeric_answer(answer)?));
        }
    }
    let target = target.ok_or_else(|| Error::Backend("estimation prompt has no target block".into()))?;
    Ok(ParsedEstimationPrompt { demonstrations, target })
}

/// Splits a serialized paragraph into `(description, value)` pairs for the
/// sentences whose value is numeric.
pub fn paragraph_features(paragraph: &str) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let body = paragraph.trim().trim_end_matches('.');
    for sentence in body.split(". ") {
        if let Some((desc, value)) = sentence.rsplit_once(" is ") {
            if let Ok(v) = value.trim().parse::<f64>() {
                out.insert(desc.trim().to_string(), v);
            }
        }
    }
    out
}

/// Answers with `bias + Σ weight[description] · value` over the target
/// paragraph's numeric sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearOracle {
    pub weights: BTreeMap<String, f64>,
    pub bias: f64,
}

impl LinearOracle {
    pub fn score(&self, paragraph: &str) -> f64 {
        let feats = paragraph_features(paragraph);
        self.bias
            + self
                .weights
                .iter()
                .map(|(d, w)| w * feats.get(d).copied().unwrap_or(0.0))
                .sum::<f64>()
    }
}

impl Backend for LinearOracle {
    fn kind(&self) -> BackendKind {
        BackendKind::LinearOracle
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>> {
        request.validate()?;
        let parsed = parse_estimation_prompt(&request.prompt)?;
        let answer = format!("{:.6}", self.score(&parsed.target));
        Ok(vec![answer; request.n_samples])
    }

    fn max_in_flight(&self) -> usize {
        8
    }
}

/// Answers with the mean label of the `k` demonstrations sharing the most
/// whitespace tokens with the target; earlier demos win ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnOracle {
    pub k: usize,
    /// Used when the prompt carries no demonstrations.
    pub default_answer: f64,
}

impl Default for KnnOracle {
    fn default() -> Self {
        KnnOracle {
            k: 3,
            default_answer: 0.0,
        }
    }
}

impl KnnOracle {
    pub fn answer(&self, parsed: &ParsedEstimationPrompt) -> f64 {
        if parsed.demonstrations.is_empty() || self.k == 0 {
            return self.default_answer;
        }
        let target: BTreeSet<&str> = parsed.target.split_whitespace().collect();
        let mut scored: Vec<(usize, usize, f64)> = parsed
            .demonstrations
            .iter()
            .enumerate()
            .map(|(i, (p, label))| {
                let toks: BTreeSet<&str> = p.split_whitespace().collect();
                (toks.intersection(&target).count(), i, *label)
            })
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let top = &scored[..self.k.min(scored.len())];
        top.iter().map(|t| t.2).sum::<f64>() / top.len() as f64
    }
}

impl Backend for KnnOracle {
    fn kind(&self) -> BackendKind {
        BackendKind::KnnOracle
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>> {
        request.validate()?;
        let parsed = parse_estimation_prompt(&request.prompt)?;
        Ok(vec![format!("{:.6}", self.answer(&parsed)); request.n_samples])
    }

    fn max_in_flight(&self) -> usize {
        8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpChatConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub requests_per_minute: u32,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for HttpChatConfig {
    fn default() -> Self {
        HttpChatConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_in_flight: 4,
            requests_per_minute: 60,
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

struct RateLimiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max_in_flight: usize,
    min_interval: Duration,
    next_start: Mutex<Instant>,
}

struct Permit<'a>(&'a RateLimiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

impl RateLimiter {
    fn new(max_in_flight: usize, requests_per_minute: u32) -> Self {
        let min_interval = if requests_per_minute == 0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(60.0 / requests_per_minute as f64)
        };
        RateLimiter {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max_in_flight: max_in_flight.max(1),
            min_interval,
            next_start: Mutex::new(Instant::now()),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max_in_flight {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        drop(n);
        let wait = {
            let mut next = self.next_start.lock().unwrap();
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + self.min_interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
        Permit(self)
    }
}

/// OpenAI-style `/chat/completions` client.
pub struct HttpChatBackend {
    config: HttpChatConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    limiter: RateLimiter,
    attempts: AtomicUsize,
}

enum Failure {
    Transient(String),
    Fatal(String),
}

impl HttpChatBackend {
    pub fn new(config: HttpChatConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .build()
            .into();
        let limiter = RateLimiter::new(config.max_in_flight, config.requests_per_minute);
        HttpChatBackend {
            config,
            api_key,
            agent,
            limiter,
            attempts: AtomicUsize::new(0),
        }
    }

    /// Total HTTP attempts, retries included.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, request: &CompletionRequest, n: usize) -> std::result::Result<Vec<String>, Failure> {
        let _permit = self.limiter.acquire();
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "n": n,
            "max_tokens": request.max_tokens,
        });
        let mut req = self.agent.post(&self.endpoint()).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::StatusCode(code)) => {
                let msg = format!("HTTP {code} from {}", self.endpoint());
                return Err(if code >= 500 || code == 429 || code == 408 {
                    Failure::Transient(msg)
                } else {
                    Failure::Fatal(msg)
                });
            }
            Err(e) => return Err(Failure::Transient(e.to_string())),
        };
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Failure::Transient(format!("bad response body: {e}")))?;
        let choices = value
            .get("choices")
            .and_then(|c| c.as_array())
            .ok_or_else(|| Failure::Fatal("response has no choices array".into()))?;
        choices
            .iter()
            .map(|c| {
                c.pointer("/message/content")
                    .and_then(|v| v.as_str())
                    .map(str::to_string)
                    .ok_or_else(|| Failure::Fatal("choice has no message.content".into()))
            })
            .collect()
    }

    fn with_retries(&self, request: &CompletionRequest, n: usize) -> Result<Vec<String>> {
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let backoff = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(10));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.attempt(request, n) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(msg)) => return Err(Error::Backend(msg)),
                Err(Failure::Transient(msg)) => {
                    log::warn!("chat request failed (attempt {}): {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::Transport(format!(
            "giving up after {} retries: {last}",
            self.config.max_retries
        )))
    }
}

impl Backend for HttpChatBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::HttpChat
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>> {
        request.validate()?;
        let mut out = Vec::with_capacity(request.n_samples);
        // providers may return fewer choices than asked for
        while out.len() < request.n_samples {
            let got = self.with_retries(request, request.n_samples - out.len())?;
            if got.is_empty() {
                return Err(Error::Backend("provider returned zero choices".into()));
            }
            out.extend(got);
        }
        out.truncate(request.n_samples);
        Ok(out)
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight.max(1)
    }
}

/// Module calls recognized in one response, plus what was skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedModules {
    pub calls: Vec<ModuleCall>,
    pub warnings: Vec<String>,
}

fn family_spans(line: &str) -> Vec<(usize, &'static str)> {
    use crate::modules::Family;
    let mut hits: Vec<(usize, &'static str)> = Vec::new();
    for fam in Family::ALL {
        let name = fam.name();
        let mut from = 0;
        while let Some(pos) = line[from..].find(name) {
            hits.push((from + pos, name));
            from += pos + name.len();
        }
    }
    hits.sort();
    hits
}

fn words(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).filter(|w| !w.is_empty())
}

fn landcover_arg(args: &str) -> Option<LandcoverClass> {
    words(args).find_map(|w| match w {
        "agriculture" => Some(LandcoverClass::Agricultural),
        "buildings" => Some(LandcoverClass::Building),
        "roads" => Some(LandcoverClass::Road),
        "trees" => Some(LandcoverClass::Tree),
        _ => w.parse().ok(),
    })
}

fn target_arg(args: &str) -> Option<TargetClass> {
    words(args).find_map(|w| match w {
        "airports" => Some(TargetClass::Airport),
        "ports" => Some(TargetClass::Port),
        _ => w.parse().ok(),
    })
}

fn simple_call(name: &str, args: &str) -> std::result::Result<ModuleCall, String> {
    match name {
        "get_address" => Ok(ModuleCall::Address),
        "get_area" => Ok(ModuleCall::Area),
        "get_night_light" => Ok(ModuleCall::NightLight),
        "count_area" => landcover_arg(args)
            .map(ModuleCall::CountArea)
            .ok_or_else(|| format!("count_area without a known landcover class: {args:?}")),
        "get_distance_to_nearest_target" => target_arg(args)
            .map(ModuleCall::DistanceToNearest)
            .ok_or_else(|| format!("distance without a known target class: {args:?}")),
        other => Err(format!("{other} cannot be used here")),
    }
}

fn parse_line(line: &str) -> std::result::Result<Option<ModuleCall>, String> {
    let lower = line.to_ascii_lowercase();
    let spans = family_spans(&lower);
    let Some(&(pos, name)) = spans.first() else {
        // something that looks like a call but is not in the registry
        if let Some(ident) = words(&lower).find(|w| w.contains('_') || lower.contains(&format!("{w}("))) {
            return Err(format!("unknown module {ident:?}"));
        }
        return Ok(None);
    };
    let rest = &lower[pos + name.len()..];
    if name != "get_aggregate_neighbor_info" {
        let next = spans.get(1).map(|s| s.0 - pos - name.len()).unwrap_or(rest.len());
        return simple_call(name, &rest[..next]).map(Some);
    }
    let Some(&(ipos, iname)) = spans.iter().skip(1).find(|s| s.1 != "get_aggregate_neighbor_info") else {
        return Err("neighbor aggregation without an inner module".into());
    };
    let inner_args = &lower[ipos + iname.len()..];
    let inner = simple_call(iname, inner_args)?;
    ModuleCall::neighbor(inner).map(Some).map_err(|e| e.to_string())
}

fn is_numbered(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &t[digits..];
    rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')).map(str::trim)
}

/// Extracts module calls from a module-selection response.
///
/// Numbered lines are scanned when present, otherwise every line. Each call
/// is kept once, in first-mention order.
pub fn parse_module_list(text: &str) -> ParsedModules {
    let numbered: Vec<&str> = text.lines().filter_map(is_numbered).collect();
    let lines: Vec<&str> = if numbered.is_empty() {
        text.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
    } else {
        numbered
    };
    let mut out = ParsedModules::default();
    for line in lines {
        match parse_line(line) {
            Ok(Some(call)) if !out.calls.contains(&call) => out.calls.push(call),
            Ok(_) => {}
            Err(w) => out.warnings.push(w),
        }
    }
    out
}

fn number_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?").expect("valid regex"))
}

fn strip_decorations(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    for (i, &c) in chars.iter().enumerate() {
        let between_digits = i > 0
            && i + 1 < chars.len()
            && chars[i - 1].is_ascii_digit()
            && chars[i + 1].is_ascii_digit();
        match c {
            ',' if between_digits => {}
            '$' | '€' | '£' | '¥' | '₩' | '%' => {}
            _ => out.push(c),
        }
    }
    out
}

/// First decimal or scientific number in a model answer, preferring the text
/// after the last `Answer:` marker.
pub fn parse_numeric_answer(text: &str) -> Result<f64> {
    let cleaned = strip_decorations(text);
    let find = |s: &str| -> Option<f64> {
        number_regex()
            .find_iter(s)
            .find_map(|m| m.as_str().parse::<f64>().ok().filter(|v| v.is_finite()))
    };
    let lower = cleaned.to_ascii_lowercase();
    if let Some(pos) = lower.rfind("answer:") {
        if let Some(v) = find(&cleaned[pos + "answer:".len()..]) {
            return Ok(v);
        }
    }
    find(&cleaned).ok_or_else(|| Error::AnswerParse(text.to_string()))
}
