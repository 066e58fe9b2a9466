//! Extraction of structured verdicts from free-text model completions.
//!
//! Everything here is a pure rule cascade: no error paths, just an
//! `Unparseable` verdict when no rule fires. Verdicts never name a label
//! outside the caller's valid set.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{DerivedQuestion, OptionLabel, Setting};

/// The parsed verdict of one completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    Label { label: OptionLabel },
    Yes,
    No,
    NoAnswer,
    LabelSet { labels: BTreeSet<OptionLabel> },
    Unparseable,
}

/// A verdict plus the span of response text that produced it. Unparseable
/// verdicts carry an empty span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub verdict: Verdict,
    pub evidence: String,
}

impl Extraction {
    fn unparseable() -> Self {
        Extraction {
            verdict: Verdict::Unparseable,
            evidence: String::new(),
        }
    }
}

fn leading_label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // A single letter up front, optionally wrapped in quotes/brackets/
        // markdown, followed by punctuation, a line end, or end of text.
        // A bare letter followed by more prose ("A reasonable choice...")
        // is NOT a leading answer token; the unique-mention rule covers it.
        Regex::new(r#"(?i)^[\s*_>"'(\[]*([a-z])(?:[.):,;\]"'*_!]|\s*$|\s*\r?\n)"#).unwrap()
    })
}

fn answer_is_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)\banswer\s*(?:is\s*:?|:)\s*[*_"'(\[]*([a-z])\b"#).unwrap()
    })
}

fn standalone_label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b([a-z])\b").unwrap())
}

fn no_answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bno\s+answer\b").unwrap())
}

fn leading_yes_no_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)^[\s*_>"'(\[]*(yes|no)(?:[.):,;\]"'*_!]|\s*$|\s*\r?\n)"#).unwrap()
    })
}

fn yes_word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\byes\b").unwrap())
}

fn no_word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bno\b").unwrap())
}

fn valid_label(captured: &str, labels: &[OptionLabel]) -> Option<OptionLabel> {
    let c = captured.chars().next()?;
    let label = OptionLabel::from_symbol(c)?;
    labels.contains(&label).then_some(label)
}

/// Extract a single option choice. Rule cascade, first match wins:
/// leading standalone label, "answer is X" phrasing, unique label mention,
/// then (when allowed) a "no answer" claim. Labels outside `labels` never
/// match.
pub fn extract_choice(text: &str, labels: &[OptionLabel], allow_no_answer: bool) -> Extraction {
    if labels.is_empty() {
        return Extraction::unparseable();
    }
    // rule 1: leading standalone label token
    if let Some(caps) = leading_label_re().captures(text) {
        if let Some(label) = valid_label(&caps[1], labels) {
            return Extraction {
                verdict: Verdict::Label { label },
                evidence: caps.get(0).unwrap().as_str().trim().to_string(),
            };
        }
    }
    // rule 2: "answer is X" / "answer: X"
    if let Some(caps) = answer_is_re().captures(text) {
        if let Some(label) = valid_label(&caps[1], labels) {
            return Extraction {
                verdict: Verdict::Label { label },
                evidence: caps.get(0).unwrap().as_str().to_string(),
            };
        }
    }
    // rule 3: a single distinct valid label mentioned anywhere
    let mut mentioned: Vec<(OptionLabel, String)> = Vec::new();
    for caps in standalone_label_re().captures_iter(text) {
        if let Some(label) = valid_label(&caps[1], labels) {
            if !mentioned.iter().any(|(l, _)| *l == label) {
                mentioned.push((label, caps.get(0).unwrap().as_str().to_string()));
            }
        }
    }
    if let [(label, evidence)] = mentioned.as_slice() {
        return Extraction {
            verdict: Verdict::Label { label: *label },
            evidence: evidence.clone(),
        };
    }
    // rule 4: explicit no-answer claim
    if allow_no_answer {
        if let Some(m) = no_answer_re().find(text) {
            return Extraction {
                verdict: Verdict::NoAnswer,
                evidence: m.as_str().to_string(),
            };
        }
    }
    Extraction::unparseable()
}

/// Extract a yes/no verdict: leading token first, otherwise a unique
/// polarity word anywhere in the text.
pub fn extract_yes_no(text: &str) -> Extraction {
    if let Some(caps) = leading_yes_no_re().captures(text) {
        let word = caps[1].to_ascii_lowercase();
        return Extraction {
            verdict: if word == "yes" { Verdict::Yes } else { Verdict::No },
            evidence: caps.get(0).unwrap().as_str().trim().to_string(),
        };
    }
    let yes = yes_word_re().find(text);
    let no = no_word_re().find(text);
    match (yes, no) {
        (Some(m), None) => Extraction {
            verdict: Verdict::Yes,
            evidence: m.as_str().to_string(),
        },
        (None, Some(m)) => Extraction {
            verdict: Verdict::No,
            evidence: m.as_str().to_string(),
        },
        _ => Extraction::unparseable(),
    }
}

/// Collect every valid label mentioned as a standalone token (covers comma
/// and "and" separated lists). Empty collection is Unparseable.
pub fn extract_multi(text: &str, labels: &[OptionLabel]) -> Extraction {
    if labels.is_empty() {
        return Extraction::unparseable();
    }
    let mut found = BTreeSet::new();
    let mut spans: Vec<&str> = Vec::new();
    for caps in standalone_label_re().captures_iter(text) {
        if let Some(label) = valid_label(&caps[1], labels) {
            if found.insert(label) {
                spans.push(caps.get(0).unwrap().as_str());
            }
        }
    }
    if found.is_empty() {
        return Extraction::unparseable();
    }
    Extraction {
        verdict: Verdict::LabelSet { labels: found },
        evidence: spans.join(", "),
    }
}

/// Extract the verdict a question's setting calls for: yes/no for claims,
/// label sets for multi-select, label-or-no-answer for the no-correct
/// setting, and a plain label choice everywhere else.
pub fn extract_for_question(question: &DerivedQuestion, text: &str) -> Extraction {
    let labels = question
        .payload
        .item()
        .map(|item| item.labels())
        .unwrap_or_default();
    match question.setting {
        Setting::TfCorrect | Setting::TfIncorrect => extract_yes_no(text),
        Setting::MultiSelect => extract_multi(text, &labels),
        Setting::NoCorrect => extract_choice(text, &labels, true),
        _ => extract_choice(text, &labels, false),
    }
}
