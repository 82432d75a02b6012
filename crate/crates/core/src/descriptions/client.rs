//! Description sources: offline fixtures, a live chat-completion endpoint with
//! retries, and replay of recorded request/response cassettes.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{DescriptionCall, DescriptionClient, DescriptionRecord, TEMPLATES};
use crate::error::{Error, Result};

pub const ENV_URL: &str = "MSGCOOP_LLM_URL";
pub const ENV_API_KEY: &str = "MSGCOOP_LLM_API_KEY";
pub const ENV_MODEL: &str = "MSGCOOP_LLM_MODEL";

/// Serves descriptions from description records. The raw list of each class
/// is read template-major: entry `template * samples_per_template + sample`.
#[derive(Debug, Clone)]
pub struct FixtureClient {
    raw: HashMap<String, Vec<String>>,
    samples_per_template: usize,
}

impl FixtureClient {
    pub fn new(records: &[DescriptionRecord], samples_per_template: usize) -> Self {
        Self {
            raw: records
                .iter()
                .map(|r| (r.class.clone(), r.raw.clone()))
                .collect(),
            samples_per_template,
        }
    }
}

impl DescriptionClient for FixtureClient {
    fn complete(&self, call: &DescriptionCall) -> Result<String> {
        let missing = || Error::MissingFixture {
            class: call.class_name.clone(),
            template: call.template_index,
            sample: call.sample_index,
        };
        let raw = self.raw.get(&call.class_name).ok_or_else(missing)?;
        if call.sample_index >= self.samples_per_template {
            return Err(missing());
        }
        raw.get(call.template_index * self.samples_per_template + call.sample_index)
            .cloned()
            .ok_or_else(missing)
    }
}

/// Live endpoint settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_retries: usize,
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub temperature: f64,
    pub cassette: Option<PathBuf>,
}

impl LiveConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: "gpt-4".to_string(),
            api_key: None,
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
            temperature: 1.0,
            cassette: None,
        }
    }

    /// Reads the endpoint from `MSGCOOP_LLM_URL`, the key from
    /// `MSGCOOP_LLM_API_KEY` and an optional model from `MSGCOOP_LLM_MODEL`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_URL)
            .map_err(|_| Error::InvalidConfig(format!("{ENV_URL} is not set")))?;
        let mut cfg = Self::new(url);
        cfg.api_key = std::env::var(ENV_API_KEY).ok();
        if let Ok(model) = std::env::var(ENV_MODEL) {
            cfg.model = model;
        }
        Ok(cfg)
    }
}

/// Identifies the call a cassette entry answered.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CassetteKey {
    pub class: String,
    pub category: String,
    pub template: usize,
    pub sample: usize,
}

impl CassetteKey {
    fn of(call: &DescriptionCall) -> Self {
        Self {
            class: call.class_name.clone(),
            category: call.category.clone(),
            template: call.template_index,
            sample: call.sample_index,
        }
    }
}

/// One line of a cassette file (JSON Lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: CassetteKey,
    pub request: Value,
    pub status: u16,
    pub response: Value,
}

/// Blocking chat-completion client with exponential backoff.
///
/// Transport errors, 429 and 5xx responses are retried up to `max_retries`
/// times, sleeping `initial_backoff · 2^attempt` in between. Every exchange
/// that returns a body is appended to the cassette when one is configured.
pub struct HttpChatClient {
    config: LiveConfig,
    http: reqwest::blocking::Client,
    cassette: Option<Mutex<File>>,
}

impl HttpChatClient {
    pub fn new(config: LiveConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Http(e.to_string()))?;
        let cassette = match &config.cassette {
            Some(path) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?,
            )),
            None => None,
        };
        Ok(Self {
            config,
            http,
            cassette,
        })
    }

    /// Chat-completion body: a system message and one user message.
    pub fn request_body(&self, call: &DescriptionCall) -> Value {
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": call.system},
                {"role": "user", "content": call.prompt},
            ],
            "temperature": self.config.temperature,
        })
    }

    fn record(&self, call: &DescriptionCall, request: &Value, status: u16, response: Value) -> Result<()> {
        let Some(file) = &self.cassette else {
            return Ok(());
        };
        let entry = CassetteEntry {
            key: CassetteKey::of(call),
            request: request.clone(),
            status,
            response,
        };
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        let mut f = file.lock().expect("cassette lock poisoned");
        f.write_all(line.as_bytes())
            .map_err(|e| Error::io(self.config.cassette.clone().unwrap_or_default(), e))
    }

    fn attempt(&self, call: &DescriptionCall, body: &Value) -> std::result::Result<String, Attempt> {
        let mut req = self.http.post(&self.config.url).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        let parsed: Value = serde_json::from_str(&text).unwrap_or(Value::String(text.clone()));
        self.record(call, body, status.as_u16(), parsed.clone())
            .map_err(|e| Attempt::Fatal(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(format!("status {status}: {text}")));
        }
        extract_content(&parsed).ok_or_else(|| Attempt::Fatal(format!("no message content in {text}")))
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

fn extract_content(body: &Value) -> Option<String> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl DescriptionClient for HttpChatClient {
    fn complete(&self, call: &DescriptionCall) -> Result<String> {
        let body = self.request_body(call);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.initial_backoff * 2u32.pow(attempt as u32 - 1);
                log::warn!(
                    "LLM request for {:?} failed ({last}); retry {attempt} in {wait:?}",
                    call.class_name
                );
                std::thread::sleep(wait);
            }
            match self.attempt(call, &body) {
                Ok(text) if text.trim().is_empty() => {
                    return Err(Error::EmptyResponse {
                        class: call.class_name.clone(),
                    })
                }
                Ok(text) => return Ok(text),
                Err(Attempt::Retry(msg)) => last = msg,
                Err(Attempt::Fatal(msg)) => return Err(Error::Http(msg)),
            }
        }
        Err(Error::RetriesExhausted { attempts, last })
    }
}

pub fn read_cassette(path: &Path) -> Result<Vec<CassetteEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Answers calls from the successful entries of a recorded cassette. When a
/// key was recorded more than once the last success wins.
#[derive(Debug, Clone)]
pub struct ReplayClient {
    answers: HashMap<CassetteKey, String>,
}

impl ReplayClient {
    pub fn new(entries: &[CassetteEntry]) -> Self {
        let answers = entries
            .iter()
            .filter(|e| (200..300).contains(&e.status))
            .filter_map(|e| extract_content(&e.response).map(|c| (e.key.clone(), c)))
            .collect();
        Self { answers }
    }
}

impl DescriptionClient for ReplayClient {
    fn complete(&self, call: &DescriptionCall) -> Result<String> {
        self.answers
            .get(&CassetteKey::of(call))
            .cloned()
            .ok_or_else(|| Error::MissingFixture {
                class: call.class_name.clone(),
                template: call.template_index,
                sample: call.sample_index,
            })
    }
}

/// Converts a cassette into fixture records (raw only), classes in order of
/// first appearance.
pub fn cassette_to_records(entries: &[CassetteEntry], samples_per_template: usize) -> Result<Vec<DescriptionRecord>> {
    let replay = ReplayClient::new(entries);
    let mut classes: Vec<(String, String)> = Vec::new();
    for e in entries {
        if !classes.iter().any(|(c, _)| c == &e.key.class) {
            classes.push((e.key.class.clone(), e.key.category.clone()));
        }
    }
    classes
        .into_iter()
        .map(|(class, category)| {
            let mut req = super::DescriptionRequest::new(&class, &category, samples_per_template);
            req.templates = TEMPLATES.iter().map(|t| t.to_string()).collect();
            Ok(DescriptionRecord {
                raw: super::fetch_descriptions(&req, &replay)?,
                class,
                category,
                selected: vec![],
                mean_sims: vec![],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptions::{fetch_descriptions, DescriptionRequest};

    fn record(class: &str, raw: &[&str]) -> DescriptionRecord {
        DescriptionRecord {
            class: class.into(),
            category: "pets".into(),
            raw: raw.iter().map(|s| s.to_string()).collect(),
            selected: vec![],
            mean_sims: vec![],
        }
    }

    #[test]
    fn fixtures_pass_through_in_order() {
        let rec = record("beagle", &["one", "two", "three", "four", "five"]);
        let client = FixtureClient::new(&[rec], 1);
        let req = DescriptionRequest::new("beagle", "pets", 1);
        assert_eq!(
            fetch_descriptions(&req, &client).unwrap(),
            vec!["one", "two", "three", "four", "five"]
        );
    }

    #[test]
    fn fixtures_are_truncated_and_keyed() {
        let long: Vec<String> = (0..25).map(|i| format!("w{i}")).collect();
        let long = long.join(" ");
        let rec = record("cat", &[&long, "b", "c", "d", "e", "f", "g", "h", "i", "j"]);
        let client = FixtureClient::new(&[rec], 2);
        let req = DescriptionRequest::new("cat", "pets", 2);
        let out = fetch_descriptions(&req, &client).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(out[0].split(' ').count(), 20);
        assert_eq!(out[3], "d");

        let req = DescriptionRequest::new("cat", "pets", 3);
        assert!(matches!(
            fetch_descriptions(&req, &client),
            Err(Error::MissingFixture { .. })
        ));
        let req = DescriptionRequest::new("dog", "pets", 2);
        assert!(matches!(
            fetch_descriptions(&req, &client),
            Err(Error::MissingFixture { .. })
        ));
    }

    #[test]
    fn blank_fixture_is_an_empty_response() {
        let rec = record("cat", &["  ", "b", "c", "d", "e"]);
        let client = FixtureClient::new(&[rec], 1);
        let req = DescriptionRequest::new("cat", "pets", 1);
        assert!(matches!(
            fetch_descriptions(&req, &client),
            Err(Error::EmptyResponse { .. })
        ));
    }

    #[test]
    fn replay_and_conversion() {
        let mut entries = Vec::new();
        for t in 0..5 {
            entries.push(CassetteEntry {
                key: CassetteKey {
                    class: "owl".into(),
                    category: "birds".into(),
                    template: t,
                    sample: 0,
                },
                request: json!({}),
                status: 200,
                response: json!({"choices": [{"message": {"content": format!("answer {t}")}}]}),
            });
        }
        entries.push(CassetteEntry {
            status: 500,
            response: json!("boom"),
            ..entries[0].clone()
        });
        let recs = cassette_to_records(&entries, 1).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].category, "birds");
        assert_eq!(recs[0].raw[4], "answer 4");
    }
}
