//! Deterministic mock backend. Behavior is a pure function of the question
//! metadata and the policy: the mock answers MCQs with the most plausible
//! option and affirms claims whose candidate plausibility clears a
//! threshold, which is exactly the least-incorrect selection behavior the
//! harness is built to expose.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Deserialize;

use crate::model::{DerivedQuestion, QuestionPayload, Setting};

use super::{
    Backend, ClientError, CompletionRequest, Coverage, LogprobMap, ModelResponse,
};

/// Plausibility scores per (item, option text) plus the yes/no threshold.
///
/// Option texts missing from an item's score map get plausibility 0.0 — a
/// non-semantic replacement token has no plausibility. `UnknownItem` fires
/// only when the item id itself has no entry.
///
/// `no_answer_threshold`, when set, makes the mock answer "no answer" on
/// MCQs whose best option falls below it; the base policy never abstains.
#[derive(Debug, Clone)]
pub struct MockPolicy {
    scores: HashMap<String, HashMap<String, f64>>,
    pub tf_threshold: f64,
    pub noise_seed: u64,
    pub no_answer_threshold: Option<f64>,
}

#[derive(Deserialize)]
struct PolicyLine {
    parent_id: String,
    scores: HashMap<String, f64>,
    theta: f64,
    #[serde(default)]
    no_answer_threshold: Option<f64>,
}

impl MockPolicy {
    pub fn new(tf_threshold: f64) -> Self {
        MockPolicy {
            scores: HashMap::new(),
            tf_threshold,
            noise_seed: 0,
            no_answer_threshold: None,
        }
    }

    pub fn set_scores(
        &mut self,
        parent_id: impl Into<String>,
        scores: impl IntoIterator<Item = (String, f64)>,
    ) {
        self.scores
            .insert(parent_id.into(), scores.into_iter().collect());
    }

    /// Load from JSONL lines of `{"parent_id", "scores", "theta"}`. Theta
    /// must agree across lines.
    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, ClientError> {
        let mut policy: Option<MockPolicy> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: PolicyLine = serde_json::from_str(&line).map_err(|e| {
                ClientError::MalformedBackendReply(format!(
                    "policy line {}: {e}",
                    idx + 1
                ))
            })?;
            let policy = policy.get_or_insert_with(|| {
                let mut p = MockPolicy::new(parsed.theta);
                p.no_answer_threshold = parsed.no_answer_threshold;
                p
            });
            if (policy.tf_threshold - parsed.theta).abs() > f64::EPSILON {
                return Err(ClientError::MalformedBackendReply(format!(
                    "policy line {}: theta {} conflicts with {}",
                    idx + 1,
                    parsed.theta,
                    policy.tf_threshold
                )));
            }
            policy.scores.insert(parsed.parent_id, parsed.scores);
        }
        policy.ok_or_else(|| {
            ClientError::MalformedBackendReply("policy file has no score lines".into())
        })
    }

    fn item_scores(&self, parent_id: &str) -> Result<&HashMap<String, f64>, ClientError> {
        self.scores
            .get(parent_id)
            .ok_or_else(|| ClientError::UnknownItem(parent_id.to_string()))
    }

    fn plausibility(scores: &HashMap<String, f64>, text: &str) -> f64 {
        scores.get(text).copied().unwrap_or(0.0)
    }
}

const PROB_FLOOR: f64 = 1e-9;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Answer one derived question under the policy. Logprobs are full coverage
/// over the mock's synthetic vocabulary (yes/no for claims, option letters
/// and "no answer" for MCQs); probabilities come from plausibilities by a
/// monotone map (claims: p(yes) = plausibility; MCQs: plausibilities
/// normalized to sum one, with any leftover no-answer mass taken off the
/// top). Zero-probability tokens are omitted from the map.
pub fn mock_complete(
    question: &DerivedQuestion,
    policy: &MockPolicy,
    model_id: &str,
) -> Result<ModelResponse, ClientError> {
    let scores = policy.item_scores(&question.parent_id)?;
    let (text, logprob_entries) = match &question.payload {
        QuestionPayload::Claim(claim) => {
            let p = clamp_prob(MockPolicy::plausibility(scores, &claim.candidate));
            let answer = if p > policy.tf_threshold { "Yes" } else { "No" };
            let mut entries = BTreeMap::new();
            entries.insert("Yes".to_string(), p.ln());
            entries.insert("No".to_string(), (1.0 - p).ln());
            (answer.to_string(), entries)
        }
        QuestionPayload::Item(item) => {
            let plausibilities: Vec<f64> = item
                .options
                .iter()
                .map(|t| MockPolicy::plausibility(scores, t))
                .collect();
            let (best_idx, best) = plausibilities
                .iter()
                .copied()
                .enumerate()
                // strict comparison keeps the earliest label on ties
                .fold((0usize, f64::MIN), |(bi, bv), (i, v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                });
            let abstain = question.setting != Setting::MultiSelect
                && policy.no_answer_threshold.is_some_and(|t| best < t);
            let answer = if abstain {
                "no answer".to_string()
            } else if question.setting == Setting::MultiSelect {
                let mut picked: Vec<String> = item
                    .labels()
                    .iter()
                    .zip(&plausibilities)
                    .filter(|(_, p)| **p > policy.tf_threshold)
                    .map(|(l, _)| l.symbol().to_string())
                    .collect();
                if picked.is_empty() {
                    picked.push(item.labels()[best_idx].symbol().to_string());
                }
                picked.join(", ")
            } else {
                item.labels()[best_idx].symbol().to_string()
            };

            let total: f64 = plausibilities.iter().sum();
            let letter_mass = if abstain { best } else { 1.0 };
            let mut entries = BTreeMap::new();
            for (label, p) in item.labels().iter().zip(&plausibilities) {
                let prob = if total > 0.0 {
                    letter_mass * p / total
                } else if abstain {
                    0.0
                } else {
                    1.0 / plausibilities.len() as f64
                };
                if prob > 0.0 {
                    entries.insert(label.symbol().to_string(), prob.ln());
                }
            }
            if abstain {
                let leftover = 1.0 - letter_mass;
                if leftover > 0.0 {
                    entries.insert("no answer".to_string(), leftover.ln());
                }
            }
            (answer, entries)
        }
    };
    Ok(ModelResponse {
        text,
        logprobs: Some(vec![LogprobMap {
            entries: logprob_entries,
            coverage: Coverage::Full,
        }]),
        model_id: model_id.to_string(),
        cached: false,
    })
}

/// Mock backend wrapper; counts completions so tests can assert cache
/// soundness.
pub struct MockBackend {
    policy: MockPolicy,
    model_id: String,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(policy: MockPolicy) -> Self {
        MockBackend {
            policy,
            model_id: "mock".to_string(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_model_id(policy: MockPolicy, model_id: impl Into<String>) -> Self {
        MockBackend {
            policy,
            model_id: model_id.into(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Backend for MockBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<ModelResponse, ClientError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let question = request.question.ok_or(ClientError::MissingMetadata)?;
        mock_complete(question, &self.policy, &self.model_id)
    }
}
