use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::answer::RefinementDecision;
use super::prompt::PromptBundle;
use crate::error::{Error, Result};
use crate::trajstore::LevelLabels;

/// Something that answers prompts.
pub trait RefinerBackend: Sync {
    fn id(&self) -> &str;

    /// Extra attempts after a failed or unparseable answer.
    fn retries(&self) -> u32 {
        0
    }

    fn answer(&self, prompt: &PromptBundle) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubRules {
    /// Minimum share of references agreeing on a next class for a correction.
    pub majority_threshold: f64,
    pub severe_label: String,
}

impl Default for StubRules {
    fn default() -> Self {
        Self {
            majority_threshold: 0.6,
            severe_label: LevelLabels::SEVERE.to_string(),
        }
    }
}

/// Rule-based stand-in for a fine-tuned language model.
///
/// 1. Severe level, a strict majority of reference next intentions are
///    immobility, and the prediction is not: answer "stay still".
/// 2. The most common reference next class reaches the majority threshold
///    and differs from the prediction: answer that class ("stay still" when
///    that class is immobility).
/// 3. Otherwise keep the prediction.
#[derive(Clone, Debug, Default)]
pub struct StubBackend {
    pub rules: StubRules,
}

impl StubBackend {
    pub fn decide(&self, prompt: &PromptBundle) -> RefinementDecision {
        let f = &prompt.facts;
        let n = f.reference_next.len();
        if n == 0 {
            return RefinementDecision::KEEP;
        }
        let classes = f.intentions + usize::from(f.immobility_class.is_some());
        let mut counts = vec![0usize; classes];
        for &c in &f.reference_next {
            counts[c] += 1;
        }
        if let Some(imm) = f.immobility_class {
            if f.label == self.rules.severe_label && 2 * counts[imm] > n && f.predicted_class != imm {
                return RefinementDecision::STAY_STILL;
            }
        }
        let (majority, &count) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("at least one class");
        if count as f64 / n as f64 >= self.rules.majority_threshold && majority != f.predicted_class {
            if Some(majority) == f.immobility_class {
                return RefinementDecision::STAY_STILL;
            }
            return RefinementDecision::class(majority);
        }
        RefinementDecision::KEEP
    }
}

impl RefinerBackend for StubBackend {
    fn id(&self) -> &str {
        "stub"
    }

    fn answer(&self, prompt: &PromptBundle) -> Result<String> {
        Ok(self.decide(prompt).to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireSlot {
    pub slot_id: usize,
    pub vector: Vec<f64>,
}

/// Request body sent to an external backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub prompt_text: String,
    pub embedding_slots: Vec<WireSlot>,
    pub disaster_prefix: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub answer: String,
}

impl WireRequest {
    pub fn from_prompt(prompt: &PromptBundle) -> Self {
        Self {
            prompt_text: prompt.wire_text(),
            embedding_slots: prompt
                .slots
                .iter()
                .map(|s| WireSlot {
                    slot_id: s.slot_id,
                    vector: s.vector.clone(),
                })
                .collect(),
            disaster_prefix: prompt.disaster_prefix.clone().unwrap_or_default(),
        }
    }
}

/// One HTTP-like exchange; errors are transport failures.
pub trait Transport: Sync {
    fn post(&self, body: &str, timeout: Duration) -> std::result::Result<String, String>;
}

pub struct UreqTransport {
    pub endpoint: String,
    pub token: Option<String>,
}

impl UreqTransport {
    /// Reads `REFINER_ENDPOINT` and optionally `REFINER_TOKEN`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("REFINER_ENDPOINT")
            .map_err(|_| Error::config("REFINER_ENDPOINT is not set"))?;
        Ok(Self {
            endpoint,
            token: std::env::var("REFINER_TOKEN").ok(),
        })
    }
}

impl Transport for UreqTransport {
    fn post(&self, body: &str, timeout: Duration) -> std::result::Result<String, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut req = agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }
}

/// External model behind a JSON endpoint.
pub struct HttpBackend<T: Transport> {
    pub transport: T,
    pub retries: u32,
    pub timeout: Duration,
}

impl<T: Transport> HttpBackend<T> {
    pub fn new(transport: T) -> Self {
        Self {
            transport,
            retries: 2,
            timeout: Duration::from_secs(30),
        }
    }
}

impl<T: Transport> RefinerBackend for HttpBackend<T> {
    fn id(&self) -> &str {
        "http"
    }

    fn retries(&self) -> u32 {
        self.retries
    }

    fn answer(&self, prompt: &PromptBundle) -> Result<String> {
        let body = serde_json::to_string(&WireRequest::from_prompt(prompt))?;
        let raw = self.transport.post(&body, self.timeout).map_err(|message| Error::Backend {
            backend: "http".into(),
            retries: 0,
            message,
        })?;
        match serde_json::from_str::<WireResponse>(&raw) {
            Ok(r) => Ok(r.answer),
            // A payload without the expected shape is an unparseable answer.
            Err(_) => Ok(raw),
        }
    }
}
