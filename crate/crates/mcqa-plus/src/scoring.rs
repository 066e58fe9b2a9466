//! Filters and metrics: the invariability (diamond) filter, the dagger
//! subset, per-setting accuracy, the macro-mean aggregate, yes/no confidence
//! scores, multi-select recall, the no-answer ratio, and replacement
//! recovery.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Coverage, LogprobMap, ModelResponse};
use crate::model::{
    Dataset, DatasetError, DatasetMarker, DerivedQuestion, ExpectedResponse, OptionLabel,
    Setting, SCHEMA_VERSION,
};
use crate::parsing::{Extraction, Verdict};
use crate::transforms::{PermutationBudget, Profile};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("item {0:?} lacks records for part of its permutation budget")]
    IncompleteCoverage(String),
    #[error("no records for setting {0}")]
    EmptySetting(Setting),
    #[error("per-setting accuracies missing setting {0}")]
    MissingSetting(Setting),
    #[error("profile {0:?} is not a macro-mean profile")]
    UnsupportedProfile(Profile),
    #[error("no records carry usable logprobs for the {0} estimator")]
    NoLogprobs(&'static str),
    #[error("no records qualify for the confidence sum")]
    NoQualifyingRecords,
    #[error("no multi-selection records (label sets of size >= 2)")]
    NoMultiSelections,
}

// ---------------------------------------------------------------------------
// Evaluation records
// ---------------------------------------------------------------------------

/// The persisted join of a derived question, its prompt digest, the model's
/// response, and the parsed verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question: DerivedQuestion,
    pub prompt_digest: String,
    pub response: ModelResponse,
    pub extraction: Extraction,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Whether a verdict satisfies an expected response.
pub fn verdict_matches(verdict: &Verdict, expected: &ExpectedResponse) -> bool {
    match (verdict, expected) {
        (Verdict::Label { label }, ExpectedResponse::Label(want)) => label == want,
        (Verdict::Yes, ExpectedResponse::Yes) => true,
        (Verdict::No, ExpectedResponse::No) => true,
        (Verdict::NoAnswer, ExpectedResponse::NoAnswer) => true,
        (Verdict::LabelSet { labels }, ExpectedResponse::LabelSet(want)) => labels == want,
        _ => false,
    }
}

impl EvalRecord {
    pub fn new(
        question: DerivedQuestion,
        prompt_digest: String,
        response: ModelResponse,
        extraction: Extraction,
    ) -> Self {
        let correct = verdict_matches(&extraction.verdict, &question.expected);
        EvalRecord {
            question,
            prompt_digest,
            response,
            extraction,
            correct,
            error: None,
        }
    }
}

// Record-stream codec; the wire format mirrors the in-memory structure,
// with the derived-question schema embedded under "question".

#[derive(Serialize, Deserialize)]
struct RecordsHeader {
    schema: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config_digest: Option<String>,
}

pub fn serialize_records(
    records: &[EvalRecord],
    mut writer: impl Write,
    run_config_digest: Option<&str>,
) -> std::io::Result<()> {
    let header = RecordsHeader {
        schema: format!("mcqa-plus/{SCHEMA_VERSION}"),
        kind: "records".to_string(),
        run_config_digest: run_config_digest.map(str::to_string),
    };
    writeln!(writer, "{}", serde_json::to_string(&header)?)?;
    for record in records {
        writeln!(writer, "{}", serde_json::to_string(record)?)?;
    }
    Ok(())
}

pub fn parse_records(reader: impl BufRead) -> Result<Vec<EvalRecord>, DatasetError> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if line_no == 1 {
            if let Ok(value) = serde_json::from_str::<serde_json::Value>(&line) {
                if value.get("schema").is_some() {
                    continue;
                }
            }
        }
        let record: EvalRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        let recomputed = verdict_matches(&record.extraction.verdict, &record.question.expected);
        if record.correct != recomputed {
            return Err(DatasetError::MalformedLine {
                line: line_no,
                message: format!(
                    "stored correct={} contradicts the extraction/expected pair",
                    record.correct
                ),
            });
        }
        records.push(record);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

/// Keep the items whose every budgeted permutation was answered with the
/// (remapped) gold label. Records must cover the full budget per item.
pub fn invariability_filter(
    items: &Dataset,
    records: &[EvalRecord],
    budget: &PermutationBudget,
) -> Result<Dataset, ScoringError> {
    let mut by_parent: BTreeMap<&str, BTreeMap<u32, &EvalRecord>> = BTreeMap::new();
    for record in records {
        if record.question.setting != Setting::Reordered {
            continue;
        }
        if let Some(index) = record.question.permutation_index {
            by_parent
                .entry(record.question.parent_id.as_str())
                .or_default()
                .insert(index, record);
        }
    }
    let mut retained = Vec::new();
    for item in &items.items {
        let expected_count = budget
            .count_for(item.n_options())
            .map_err(|_| ScoringError::IncompleteCoverage(item.id.clone()))?;
        let covered = by_parent.get(item.id.as_str());
        let complete = covered.is_some_and(|map| {
            map.len() == expected_count
                && map.contains_key(&0)
                && map.keys().all(|&i| (i as usize) < expected_count)
        });
        if !complete {
            return Err(ScoringError::IncompleteCoverage(item.id.clone()));
        }
        let invariable = covered
            .unwrap()
            .values()
            .all(|r| verdict_matches(&r.extraction.verdict, &r.question.expected));
        if invariable {
            retained.push(item.clone());
        }
    }
    Ok(Dataset {
        items: retained,
        marker: DatasetMarker::Diamond,
        provenance: format!(
            "invariability filter: correct under every ordering of {budget:?}"
        ),
    })
}

/// Items whose base (setting a) answer was a wrong label, each tagged with
/// that misleading label. Items answered correctly are excluded, as are
/// unparseable base answers (no misleading label exists) and items without
/// a base record.
pub fn dagger_subset(items: &Dataset, base_records: &[EvalRecord]) -> Dataset {
    let mut by_parent: BTreeMap<&str, &EvalRecord> = BTreeMap::new();
    for record in base_records {
        if record.question.setting == Setting::Original {
            by_parent.insert(record.question.parent_id.as_str(), record);
        }
    }
    let mut out = Vec::new();
    for item in &items.items {
        let Some(record) = by_parent.get(item.id.as_str()) else {
            continue;
        };
        let Verdict::Label { label } = record.extraction.verdict else {
            continue;
        };
        if item.gold_label() == Some(label) {
            continue;
        }
        out.push(item.with_misleading(label));
    }
    Dataset {
        items: out,
        marker: DatasetMarker::Dagger,
        provenance: "items answered incorrectly in the base run".to_string(),
    }
}

// ---------------------------------------------------------------------------
// Accuracy metrics
// ---------------------------------------------------------------------------

/// Fraction of the setting's records with a correct verdict.
pub fn setting_accuracy(records: &[EvalRecord], setting: Setting) -> Result<f64, ScoringError> {
    let of_setting: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| r.question.setting == setting)
        .collect();
    if of_setting.is_empty() {
        return Err(ScoringError::EmptySetting(setting));
    }
    let correct = of_setting.iter().filter(|r| r.correct).count();
    Ok(correct as f64 / of_setting.len() as f64)
}

/// Unweighted mean of the per-setting accuracies over the profile's
/// settings (macro averaging: per-setting record counts do not matter).
pub fn mcqa_plus_score(
    per_setting: &BTreeMap<Setting, f64>,
    profile: Profile,
) -> Result<f64, ScoringError> {
    if profile == Profile::X1 {
        return Err(ScoringError::UnsupportedProfile(profile));
    }
    let settings = profile.settings();
    let mut total = 0.0;
    for setting in settings {
        total += per_setting
            .get(setting)
            .ok_or(ScoringError::MissingSetting(*setting))?;
    }
    Ok(total / settings.len() as f64)
}

// ---------------------------------------------------------------------------
// Confidence scores
// ---------------------------------------------------------------------------

/// How yes/no probabilities are normalized from recorded logprobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Softmax over the full recorded vocabulary (mock backend).
    FullVocab,
    /// Renormalize over the recorded top-k tokens.
    TopK,
    /// Renormalize over the best yes and no surface forms only.
    Binary,
}

impl Estimator {
    fn name(self) -> &'static str {
        match self {
            Estimator::FullVocab => "full_vocab",
            Estimator::TopK => "top_k",
            Estimator::Binary => "binary",
        }
    }
}

/// Which reading of the incorrect-confidence definition to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Qualify when yes outscores no; average the yes-probability
    /// (mistaken affirmations of incorrect claims). Default.
    Text,
    /// Qualify when no outscores yes; average the no-probability.
    Formula,
}

fn is_yes_token(token: &str) -> bool {
    token.trim().eq_ignore_ascii_case("yes")
}

fn is_no_token(token: &str) -> bool {
    token.trim().eq_ignore_ascii_case("no")
}

/// The yes/no scores at the answer position: the first logprob position
/// carrying either polarity. Each polarity takes its highest-probability
/// surface variant.
struct YesNoScores<'a> {
    map: &'a LogprobMap,
    yes: Option<(&'a str, f64)>,
    no: Option<(&'a str, f64)>,
}

fn yes_no_scores(response: &ModelResponse) -> Option<YesNoScores<'_>> {
    let positions = response.logprobs.as_ref()?;
    for map in positions {
        let mut yes: Option<(&str, f64)> = None;
        let mut no: Option<(&str, f64)> = None;
        for (token, lp) in &map.entries {
            if is_yes_token(token) && yes.is_none_or(|(_, best)| *lp > best) {
                yes = Some((token, *lp));
            }
            if is_no_token(token) && no.is_none_or(|(_, best)| *lp > best) {
                no = Some((token, *lp));
            }
        }
        if yes.is_some() || no.is_some() {
            return Some(YesNoScores { map, yes, no });
        }
    }
    None
}

/// exp(lp) / sum(exp(lp_i)) over a token subset, summed in token order so
/// identical subsets give bit-identical results across estimators.
fn renormalized(target_lp: f64, subset: impl Iterator<Item = f64>) -> f64 {
    let denom: f64 = subset.map(f64::exp).sum();
    target_lp.exp() / denom
}

fn estimate_probability(
    scores: &YesNoScores<'_>,
    target: (&str, f64),
    estimator: Estimator,
) -> Option<f64> {
    match estimator {
        Estimator::FullVocab => {
            if scores.map.coverage != Coverage::Full {
                return None;
            }
            Some(renormalized(target.1, scores.map.entries.values().copied()))
        }
        Estimator::TopK => Some(renormalized(
            target.1,
            scores.map.entries.values().copied(),
        )),
        Estimator::Binary => {
            let mut subset: Vec<(&str, f64)> = Vec::new();
            if let Some(yes) = scores.yes {
                subset.push(yes);
            }
            if let Some(no) = scores.no {
                subset.push(no);
            }
            subset.sort_by(|a, b| a.0.cmp(b.0));
            Some(renormalized(target.1, subset.iter().map(|(_, lp)| *lp)))
        }
    }
}

/// A record's qualifying confidence value, if any. Missing polarities count
/// as probability zero, so a lone "yes" still qualifies under yes > no.
fn qualifying_value(
    record: &EvalRecord,
    estimator: Estimator,
    convention: Convention,
) -> Option<Option<f64>> {
    let scores = yes_no_scores(&record.response)?;
    let z_yes = scores.yes.map(|(_, lp)| lp).unwrap_or(f64::NEG_INFINITY);
    let z_no = scores.no.map(|(_, lp)| lp).unwrap_or(f64::NEG_INFINITY);
    let (qualifies, target) = match convention {
        Convention::Text => (z_yes > z_no, scores.yes),
        Convention::Formula => (z_no > z_yes, scores.no),
    };
    if !qualifies {
        return Some(None); // usable logprobs, but excluded from the sum
    }
    let target = target.expect("qualifying side has a token");
    Some(estimate_probability(&scores, target, estimator))
}

/// Mean normalized yes-probability over setting-c records where the yes
/// score strictly exceeds the no score, with the count of such records.
pub fn confidence_correct(
    records: &[EvalRecord],
    estimator: Estimator,
) -> Result<(f64, usize), ScoringError> {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut usable = false;
    for record in records.iter().filter(|r| r.question.setting == Setting::TfCorrect) {
        match qualifying_value(record, estimator, Convention::Text) {
            None => continue,
            Some(None) => usable = true,
            Some(Some(p)) => {
                usable = true;
                total += p;
                n += 1;
            }
        }
    }
    if !usable {
        return Err(ScoringError::NoLogprobs(estimator.name()));
    }
    if n == 0 {
        return Err(ScoringError::NoQualifyingRecords);
    }
    Ok((total / n as f64, n))
}

/// Per parent MCQ, the incorrect-option claim affirmed with the highest
/// qualifying confidence; averaged across MCQs. Returns the mean and the
/// number of contributing MCQs.
pub fn confidence_incorrect_star(
    records: &[EvalRecord],
    estimator: Estimator,
    convention: Convention,
) -> Result<(f64, usize), ScoringError> {
    let mut best_per_parent: BTreeMap<&str, f64> = BTreeMap::new();
    let mut usable = false;
    for record in records.iter().filter(|r| r.question.setting == Setting::TfIncorrect) {
        match qualifying_value(record, estimator, convention) {
            None => continue,
            Some(None) => usable = true,
            Some(Some(p)) => {
                usable = true;
                best_per_parent
                    .entry(record.question.parent_id.as_str())
                    .and_modify(|best| *best = best.max(p))
                    .or_insert(p);
            }
        }
    }
    if !usable {
        return Err(ScoringError::NoLogprobs(estimator.name()));
    }
    if best_per_parent.is_empty() {
        return Err(ScoringError::NoQualifyingRecords);
    }
    let m = best_per_parent.len();
    let total: f64 = best_per_parent.values().sum();
    Ok((total / m as f64, m))
}

/// Aggregated confidence numbers as they appear in the metrics document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub c_correct: f64,
    pub c_incorrect_star: f64,
    /// 100 * c_incorrect_star / c_correct; absent when c_correct is zero.
    pub relative_percent: Option<f64>,
    pub n_correct: usize,
    pub m_incorrect: usize,
    pub estimator: Estimator,
    pub convention: Convention,
}

pub fn confidence_report(
    records: &[EvalRecord],
    estimator: Estimator,
    convention: Convention,
) -> Result<ConfidenceReport, ScoringError> {
    let (c_correct, n_correct) = confidence_correct(records, estimator)?;
    let (c_incorrect_star, m_incorrect) =
        confidence_incorrect_star(records, estimator, convention)?;
    let relative_percent =
        (c_correct > 0.0).then(|| 100.0 * c_incorrect_star / c_correct);
    Ok(ConfidenceReport {
        c_correct,
        c_incorrect_star,
        relative_percent,
        n_correct,
        m_incorrect,
        estimator,
        convention,
    })
}

// ---------------------------------------------------------------------------
// Diagnostic metrics
// ---------------------------------------------------------------------------

/// Recall of the gold and misleading options among multi-selection records
/// (label sets of size >= 2) over a dagger dataset. Records whose payload
/// lacks a gold or misleading annotation are skipped.
pub fn multi_select_recall(records: &[EvalRecord]) -> Result<(f64, f64), ScoringError> {
    let mut included = 0usize;
    let mut with_gold = 0usize;
    let mut with_misleading = 0usize;
    for record in records.iter().filter(|r| r.question.setting == Setting::MultiSelect) {
        let Verdict::LabelSet { labels } = &record.extraction.verdict else {
            continue;
        };
        if labels.len() < 2 {
            continue;
        }
        let Some(item) = record.question.payload.item() else {
            continue;
        };
        let (Some(gold), Some(misleading)) = (item.gold_label(), item.misleading_label())
        else {
            continue;
        };
        included += 1;
        if labels.contains(&gold) {
            with_gold += 1;
        }
        if labels.contains(&misleading) {
            with_misleading += 1;
        }
    }
    if included == 0 {
        return Err(ScoringError::NoMultiSelections);
    }
    Ok((
        with_gold as f64 / included as f64,
        with_misleading as f64 / included as f64,
    ))
}

/// Fraction of setting-f records answered with a no-answer claim.
pub fn no_answer_ratio(records: &[EvalRecord]) -> Result<f64, ScoringError> {
    let of_setting: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| r.question.setting == Setting::NoCorrect)
        .collect();
    if of_setting.is_empty() {
        return Err(ScoringError::EmptySetting(Setting::NoCorrect));
    }
    let claims = of_setting
        .iter()
        .filter(|r| r.extraction.verdict == Verdict::NoAnswer)
        .count();
    Ok(claims as f64 / of_setting.len() as f64)
}

/// Fraction of misleading-replaced records now answered with the gold label.
pub fn replacement_recovery(records: &[EvalRecord]) -> Result<f64, ScoringError> {
    let of_setting: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| r.question.setting == Setting::MisleadingReplaced)
        .collect();
    if of_setting.is_empty() {
        return Err(ScoringError::EmptySetting(Setting::MisleadingReplaced));
    }
    let recovered = of_setting
        .iter()
        .filter(|r| verdict_matches(&r.extraction.verdict, &r.question.expected))
        .count();
    Ok(recovered as f64 / of_setting.len() as f64)
}

// ---------------------------------------------------------------------------
// Metrics document
// ---------------------------------------------------------------------------

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MultiSelectReport {
    pub recall_correct: f64,
    pub recall_misleading: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountsReport {
    pub records: usize,
    pub unparseable: usize,
    pub by_setting: BTreeMap<String, usize>,
    pub errored: usize,
}

/// The metrics JSON written by `score` and consumed by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub model_id: String,
    pub dataset: String,
    pub profile: Option<Profile>,
    pub run_config_digest: Option<String>,
    pub counts: CountsReport,
    pub per_setting_accuracy: BTreeMap<String, f64>,
    pub overall_accuracy: Option<f64>,
    pub mcqa: Option<f64>,
    pub mcqa_plus: Option<f64>,
    pub mcqa_plus_hard: Option<f64>,
    /// The score of an x1-profile run: plain accuracy over its one-per-item
    /// sampled records.
    pub mcqa_plus_x1: Option<f64>,
    pub confidence: Option<ConfidenceReport>,
    pub confidence_note: Option<String>,
    pub multi_select: Option<MultiSelectReport>,
    pub no_answer_ratio: Option<f64>,
    pub replacement_recovery: Option<f64>,
}

fn consensus<'a>(values: impl Iterator<Item = &'a str>) -> String {
    let distinct: BTreeSet<&str> = values.filter(|v| !v.is_empty()).collect();
    match distinct.len() {
        0 => String::new(),
        1 => distinct.into_iter().next().unwrap().to_string(),
        _ => "mixed".to_string(),
    }
}

/// Compute the full metrics document for a record stream.
pub fn compute_metrics(
    records: &[EvalRecord],
    estimator: Estimator,
    convention: Convention,
    profile: Option<Profile>,
    run_config_digest: Option<String>,
) -> Metrics {
    let mut by_setting: BTreeMap<String, usize> = BTreeMap::new();
    for record in records {
        *by_setting
            .entry(record.question.setting.code().to_string())
            .or_default() += 1;
    }
    let mut per_setting_accuracy = BTreeMap::new();
    for setting in Setting::ALL {
        if let Ok(acc) = setting_accuracy(records, setting) {
            per_setting_accuracy.insert(setting.code().to_string(), acc);
        }
    }
    let typed: BTreeMap<Setting, f64> = per_setting_accuracy
        .iter()
        .filter_map(|(code, acc)| Setting::from_code(code).map(|s| (s, *acc)))
        .collect();
    let overall_accuracy = (!records.is_empty()).then(|| {
        records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64
    });
    let (confidence, confidence_note) = match confidence_report(records, estimator, convention)
    {
        Ok(report) => (Some(report), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Metrics {
        schema_version: METRICS_SCHEMA_VERSION,
        model_id: consensus(records.iter().map(|r| r.response.model_id.as_str())),
        dataset: consensus(records.iter().filter_map(|r| {
            r.question.payload.item().map(|i| i.source.as_str())
        })),
        profile,
        run_config_digest,
        counts: CountsReport {
            records: records.len(),
            unparseable: records
                .iter()
                .filter(|r| r.extraction.verdict == Verdict::Unparseable)
                .count(),
            by_setting,
            errored: records.iter().filter(|r| r.error.is_some()).count(),
        },
        per_setting_accuracy,
        overall_accuracy,
        mcqa: typed.get(&Setting::Original).copied(),
        mcqa_plus: mcqa_plus_score(&typed, Profile::Full).ok(),
        mcqa_plus_hard: mcqa_plus_score(&typed, Profile::Hard).ok(),
        mcqa_plus_x1: overall_accuracy.filter(|_| profile == Some(Profile::X1)),
        confidence,
        confidence_note,
        multi_select: multi_select_recall(records)
            .ok()
            .map(|(recall_correct, recall_misleading)| MultiSelectReport {
                recall_correct,
                recall_misleading,
            }),
        no_answer_ratio: no_answer_ratio(records).ok(),
        replacement_recovery: replacement_recovery(records).ok(),
    }
}

/// Helper shared by scoring consumers: the labels a record's payload admits.
pub fn payload_labels(question: &DerivedQuestion) -> Vec<OptionLabel> {
    question
        .payload
        .item()
        .map(|item| item.labels())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::Coverage;
    use crate::model::{Gold, MCQItem, QuestionPayload};
    use crate::transforms::{enumerate_permutations, original_question};
    use std::collections::BTreeSet as Set;

    fn item(id: &str, options: &[&str], gold: usize) -> MCQItem {
        MCQItem::new(
            id,
            "stem?",
            options.iter().map(|s| s.to_string()).collect(),
            Gold::Label(OptionLabel::from_index(gold).unwrap()),
            Set::new(),
            "unit",
        )
        .unwrap()
    }

    fn response() -> ModelResponse {
        ModelResponse {
            text: "A".into(),
            logprobs: None,
            model_id: "mock".into(),
            cached: false,
        }
    }

    fn record_for(question: DerivedQuestion, verdict: Verdict) -> EvalRecord {
        EvalRecord::new(
            question,
            "digest".into(),
            response(),
            Extraction {
                verdict,
                evidence: "A".into(),
            },
        )
    }

    fn label(c: char) -> OptionLabel {
        OptionLabel::from_symbol(c).unwrap()
    }

    fn claim_record(
        parent: &str,
        setting: Setting,
        z_yes: f64,
        z_no: f64,
    ) -> EvalRecord {
        // two-token softmax over raw logits, frozen as log-probabilities
        let denom = z_yes.exp() + z_no.exp();
        let mut entries = std::collections::BTreeMap::new();
        entries.insert("Yes".to_string(), (z_yes.exp() / denom).ln());
        entries.insert("No".to_string(), (z_no.exp() / denom).ln());
        let question = DerivedQuestion {
            parent_id: parent.to_string(),
            setting,
            payload: QuestionPayload::Claim(crate::model::TFClaim {
                stem: "stem?".into(),
                candidate: "candidate".into(),
                polarity: if setting == Setting::TfCorrect {
                    crate::model::ClaimPolarity::Correct
                } else {
                    crate::model::ClaimPolarity::Incorrect
                },
            }),
            expected: if setting == Setting::TfCorrect {
                ExpectedResponse::Yes
            } else {
                ExpectedResponse::No
            },
            permutation_index: None,
        };
        let text = if z_yes > z_no { "Yes" } else { "No" };
        EvalRecord::new(
            question,
            "digest".into(),
            ModelResponse {
                text: text.into(),
                logprobs: Some(vec![LogprobMap {
                    entries,
                    coverage: Coverage::Full,
                }]),
                model_id: "mock".into(),
                cached: false,
            },
            Extraction {
                verdict: if z_yes > z_no { Verdict::Yes } else { Verdict::No },
                evidence: text.into(),
            },
        )
    }

    #[test]
    fn setting_accuracy_basics() {
        let it = item("q1", &["a", "b"], 0);
        let q = original_question(&it).unwrap();
        let records = vec![
            record_for(q.clone(), Verdict::Label { label: label('A') }),
            record_for(q.clone(), Verdict::Label { label: label('A') }),
            record_for(q.clone(), Verdict::Label { label: label('B') }),
            record_for(q.clone(), Verdict::Label { label: label('A') }),
        ];
        assert_eq!(setting_accuracy(&records, Setting::Original).unwrap(), 0.75);
        assert!(matches!(
            setting_accuracy(&records, Setting::Nota),
            Err(ScoringError::EmptySetting(Setting::Nota))
        ));
    }

    #[test]
    fn unparseable_scores_zero() {
        let it = item("q1", &["a", "b"], 0);
        let q = original_question(&it).unwrap();
        let records = vec![
            record_for(q.clone(), Verdict::Unparseable),
            record_for(q, Verdict::Unparseable),
        ];
        assert_eq!(setting_accuracy(&records, Setting::Original).unwrap(), 0.0);
    }

    #[test]
    fn macro_mean_fixture() {
        let per_setting: BTreeMap<Setting, f64> = [
            (Setting::Original, 1.0),
            (Setting::Reordered, 0.8),
            (Setting::TfCorrect, 1.0),
            (Setting::TfIncorrect, 0.4),
            (Setting::Nota, 0.0),
            (Setting::NoCorrect, 0.6),
        ]
        .into_iter()
        .collect();
        let full = mcqa_plus_score(&per_setting, Profile::Full).unwrap();
        assert!((full - 3.8 / 6.0).abs() < 1e-15);
        let hard = mcqa_plus_score(&per_setting, Profile::Hard).unwrap();
        assert!((hard - 0.45).abs() < 1e-15);

        let perfect: BTreeMap<Setting, f64> =
            Setting::CORE.into_iter().map(|s| (s, 1.0)).collect();
        assert_eq!(mcqa_plus_score(&perfect, Profile::Full).unwrap(), 1.0);
    }

    #[test]
    fn macro_mean_missing_setting() {
        let mut per_setting: BTreeMap<Setting, f64> =
            Setting::CORE.into_iter().map(|s| (s, 1.0)).collect();
        per_setting.remove(&Setting::Nota);
        assert!(matches!(
            mcqa_plus_score(&per_setting, Profile::Full),
            Err(ScoringError::MissingSetting(Setting::Nota))
        ));
    }

    #[test]
    fn confidence_correct_mean_and_count() {
        // two qualifying records at p(yes) 0.9 and 0.8, one excluded
        let records = vec![
            claim_record("q1", Setting::TfCorrect, 0.9f64.ln(), 0.1f64.ln()),
            claim_record("q2", Setting::TfCorrect, 0.8f64.ln(), 0.2f64.ln()),
            claim_record("q3", Setting::TfCorrect, 0.2f64.ln(), 0.8f64.ln()),
        ];
        let (c, n) = confidence_correct(&records, Estimator::FullVocab).unwrap();
        assert_eq!(n, 2);
        assert!((c - 0.85).abs() < 1e-12);
    }

    #[test]
    fn two_token_softmax_value() {
        // logits z_yes = 2, z_no = 0
        let records = vec![claim_record("q1", Setting::TfCorrect, 2.0, 0.0)];
        let (c, n) = confidence_correct(&records, Estimator::FullVocab).unwrap();
        assert_eq!(n, 1);
        let expected = 2.0f64.exp() / (2.0f64.exp() + 1.0);
        assert!((c - expected).abs() < 1e-12);
        assert!((c - 0.8807970779778823).abs() < 1e-9);
    }

    #[test]
    fn incorrect_star_takes_per_parent_max() {
        let records = vec![
            claim_record("q1", Setting::TfIncorrect, 0.7f64.ln(), 0.3f64.ln()),
            claim_record("q1", Setting::TfIncorrect, 0.9f64.ln(), 0.1f64.ln()),
            claim_record("q1", Setting::TfIncorrect, 0.3f64.ln(), 0.7f64.ln()),
            claim_record("q2", Setting::TfIncorrect, 0.7f64.ln(), 0.3f64.ln()),
        ];
        let (c, m) =
            confidence_incorrect_star(&records, Estimator::FullVocab, Convention::Text).unwrap();
        assert_eq!(m, 2);
        assert!((c - 0.8).abs() < 1e-12); // mean of 0.9 and 0.7
    }

    #[test]
    fn formula_convention_uses_no_side() {
        let records = vec![
            claim_record("q1", Setting::TfIncorrect, 0.3f64.ln(), 0.7f64.ln()),
            claim_record("q2", Setting::TfIncorrect, 0.9f64.ln(), 0.1f64.ln()),
        ];
        let (c, m) =
            confidence_incorrect_star(&records, Estimator::FullVocab, Convention::Formula)
                .unwrap();
        assert_eq!(m, 1); // only q1 qualifies under z_no > z_yes
        assert!((c - 0.7).abs() < 1e-12);
    }

    #[test]
    fn tie_qualifies_for_neither() {
        let records = vec![claim_record("q1", Setting::TfCorrect, 0.5f64.ln(), 0.5f64.ln())];
        assert!(matches!(
            confidence_correct(&records, Estimator::FullVocab),
            Err(ScoringError::NoQualifyingRecords)
        ));
    }

    #[test]
    fn missing_logprobs_is_an_error() {
        let it = item("q1", &["a", "b"], 0);
        let q = crate::transforms::derive_true_false(&it).unwrap().remove(0);
        let records = vec![record_for(q, Verdict::Yes)];
        assert!(matches!(
            confidence_correct(&records, Estimator::FullVocab),
            Err(ScoringError::NoLogprobs(_))
        ));
    }

    #[test]
    fn relative_percent_ratio() {
        let records = vec![
            claim_record("q1", Setting::TfCorrect, 0.9f64.ln(), 0.1f64.ln()),
            claim_record("q1", Setting::TfIncorrect, 0.8f64.ln(), 0.2f64.ln()),
        ];
        let report =
            confidence_report(&records, Estimator::FullVocab, Convention::Text).unwrap();
        let relative = report.relative_percent.unwrap();
        assert!((relative - 800.0 / 9.0).abs() < 1e-9); // 88.9%
    }

    #[test]
    fn estimators_coincide_on_two_token_vocab() {
        let records = vec![claim_record("q1", Setting::TfCorrect, 1.3, -0.4)];
        let (full, _) = confidence_correct(&records, Estimator::FullVocab).unwrap();
        let (binary, _) = confidence_correct(&records, Estimator::Binary).unwrap();
        let (top_k, _) = confidence_correct(&records, Estimator::TopK).unwrap();
        assert_eq!(full.to_bits(), binary.to_bits());
        assert_eq!(full.to_bits(), top_k.to_bits());
    }

    #[test]
    fn invariability_filter_behavior() {
        let items = vec![item("good", &["w", "x", "y", "z"], 1), item("bad", &["p", "q", "r", "s"], 0)];
        let dataset = Dataset::raw(items.clone());
        let budget = PermutationBudget::All;
        let mut records = Vec::new();
        for it in &items {
            for q in enumerate_permutations(it, &budget).unwrap() {
                let verdict = if it.id == "good" {
                    // always the remapped gold
                    match &q.expected {
                        ExpectedResponse::Label(l) => Verdict::Label { label: *l },
                        _ => unreachable!(),
                    }
                } else {
                    Verdict::Label { label: label('A') } // positional answering
                };
                records.push(record_for(q, verdict));
            }
        }
        let diamond = invariability_filter(&dataset, &records, &budget).unwrap();
        assert_eq!(
            diamond.items.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(),
            vec!["good"]
        );
        assert_eq!(diamond.marker, DatasetMarker::Diamond);
    }

    #[test]
    fn incomplete_coverage_is_an_error() {
        let it = item("q1", &["a", "b", "c", "d"], 0);
        let dataset = Dataset::raw(vec![it.clone()]);
        let budget = PermutationBudget::All;
        let mut records: Vec<EvalRecord> = enumerate_permutations(&it, &budget)
            .unwrap()
            .into_iter()
            .map(|q| {
                let verdict = match &q.expected {
                    ExpectedResponse::Label(l) => Verdict::Label { label: *l },
                    _ => unreachable!(),
                };
                record_for(q, verdict)
            })
            .collect();
        records.pop();
        assert!(matches!(
            invariability_filter(&dataset, &records, &budget),
            Err(ScoringError::IncompleteCoverage(id)) if id == "q1"
        ));
    }

    #[test]
    fn larger_budget_strictly_shrinks_diamond() {
        // correct under every rotation, wrong under one non-rotation
        // ordering: retained by the cyclic filter, dropped by the full one
        let it = item("q1", &["a", "b", "c", "d"], 0);
        let dataset = Dataset::raw(vec![it.clone()]);
        let records_for = |budget: &PermutationBudget, sabotage_last: bool| -> Vec<EvalRecord> {
            let questions = enumerate_permutations(&it, budget).unwrap();
            let last = questions.len() - 1;
            questions
                .into_iter()
                .enumerate()
                .map(|(i, q)| {
                    let ExpectedResponse::Label(gold) = q.expected.clone() else {
                        unreachable!()
                    };
                    let verdict = if sabotage_last && i == last {
                        Verdict::Unparseable
                    } else {
                        Verdict::Label { label: gold }
                    };
                    record_for(q, verdict)
                })
                .collect()
        };
        let cyclic = PermutationBudget::Cyclic;
        let all = PermutationBudget::All;
        let small = invariability_filter(&dataset, &records_for(&cyclic, false), &cyclic).unwrap();
        assert_eq!(small.items.len(), 1);
        let big = invariability_filter(&dataset, &records_for(&all, true), &all).unwrap();
        assert!(big.items.is_empty());
    }

    #[test]
    fn dagger_subset_definition() {
        let items = vec![
            item("wrong", &["a", "b"], 0),
            item("right", &["c", "d"], 1),
            item("garbled", &["e", "f"], 0),
        ];
        let dataset = Dataset::raw(items.clone());
        let records = vec![
            record_for(
                original_question(&items[0]).unwrap(),
                Verdict::Label { label: label('B') },
            ),
            record_for(
                original_question(&items[1]).unwrap(),
                Verdict::Label { label: label('B') },
            ),
            record_for(original_question(&items[2]).unwrap(), Verdict::Unparseable),
        ];
        let dagger = dagger_subset(&dataset, &records);
        assert_eq!(dagger.items.len(), 1);
        assert_eq!(dagger.items[0].id, "wrong");
        assert_eq!(dagger.items[0].misleading_label().unwrap().symbol(), 'B');
        assert_eq!(dagger.marker, DatasetMarker::Dagger);
    }

    #[test]
    fn diamond_and_dagger_disjoint() {
        let items = vec![item("q1", &["a", "b"], 0), item("q2", &["c", "d"], 1)];
        let dataset = Dataset::raw(items.clone());
        let budget = PermutationBudget::All;
        let mut perm_records = Vec::new();
        let mut base_records = Vec::new();
        for it in &items {
            // q1 answered correctly everywhere; q2 answered wrong
            let right = it.id == "q1";
            for q in enumerate_permutations(it, &budget).unwrap() {
                let ExpectedResponse::Label(gold) = q.expected.clone() else {
                    unreachable!()
                };
                let verdict = if right {
                    Verdict::Label { label: gold }
                } else {
                    let wrong = if gold == label('A') { label('B') } else { label('A') };
                    Verdict::Label { label: wrong }
                };
                perm_records.push(record_for(q, verdict));
            }
            let base = original_question(it).unwrap();
            let ExpectedResponse::Label(gold) = base.expected.clone() else {
                unreachable!()
            };
            let verdict = if right {
                Verdict::Label { label: gold }
            } else {
                let wrong = if gold == label('A') { label('B') } else { label('A') };
                Verdict::Label { label: wrong }
            };
            base_records.push(record_for(base, verdict));
        }
        let diamond = invariability_filter(&dataset, &perm_records, &budget).unwrap();
        let dagger = dagger_subset(&dataset, &base_records);
        let diamond_ids: Set<&str> = diamond.items.iter().map(|i| i.id.as_str()).collect();
        let dagger_ids: Set<&str> = dagger.items.iter().map(|i| i.id.as_str()).collect();
        assert!(diamond_ids.is_disjoint(&dagger_ids));
    }

    #[test]
    fn multi_select_recall_rules() {
        let base = item("q1", &["a", "b", "c", "d"], 0).with_misleading(label('B'));
        let q = crate::transforms::multi_select_question(&base).unwrap();
        let set = |chars: &[char]| Verdict::LabelSet {
            labels: chars.iter().map(|c| label(*c)).collect(),
        };
        let records = vec![
            record_for(q.clone(), set(&['A', 'B'])),      // both recalls
            record_for(q.clone(), set(&['B', 'C'])),      // misleading only
            record_for(q.clone(), set(&['A', 'C', 'D'])), // gold only
            record_for(q.clone(), set(&['B'])),           // single selection: excluded
        ];
        let (gold, misleading) = multi_select_recall(&records).unwrap();
        assert!((gold - 2.0 / 3.0).abs() < 1e-12);
        assert!((misleading - 2.0 / 3.0).abs() < 1e-12);

        let only_single = vec![record_for(q, set(&['B']))];
        assert!(matches!(
            multi_select_recall(&only_single),
            Err(ScoringError::NoMultiSelections)
        ));
    }

    #[test]
    fn no_answer_ratio_fraction() {
        let it = item("q1", &["a", "b"], 0);
        let policy = crate::transforms::TokenPolicy::gibberish(5, 0).unwrap();
        let q = crate::transforms::strip_correct_option(&it, &policy).unwrap();
        let mut records: Vec<EvalRecord> = (0..7)
            .map(|_| record_for(q.clone(), Verdict::Label { label: label('A') }))
            .collect();
        for _ in 0..3 {
            records.push(record_for(q.clone(), Verdict::NoAnswer));
        }
        assert!((no_answer_ratio(&records).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn replacement_recovery_fraction() {
        let base = item("q1", &["a", "b", "c"], 0).with_misleading(label('B'));
        let policy = crate::transforms::TokenPolicy::gibberish(5, 1).unwrap();
        let q = crate::transforms::misleading_replaced_question(&base, &policy).unwrap();
        let records = vec![
            record_for(q.clone(), Verdict::Label { label: label('A') }),
            record_for(q.clone(), Verdict::Label { label: label('C') }),
            record_for(q.clone(), Verdict::Label { label: label('A') }),
            record_for(q, Verdict::Unparseable),
        ];
        assert_eq!(replacement_recovery(&records).unwrap(), 0.5);
    }

    #[test]
    fn macro_score_invariant_to_duplicated_records() {
        let it = item("q1", &["a", "b", "c", "d"], 0);
        let suite = crate::transforms::build_suite(
            &it,
            Profile::Full,
            &PermutationBudget::Cyclic,
            &crate::transforms::TokenPolicy::gibberish(5, 2).unwrap(),
            0,
        )
        .unwrap();
        let mut records: Vec<EvalRecord> = suite
            .questions
            .iter()
            .map(|q| {
                let verdict = match &q.expected {
                    ExpectedResponse::Label(l) => Verdict::Label { label: *l },
                    ExpectedResponse::Yes => Verdict::Yes,
                    ExpectedResponse::No => Verdict::Unparseable, // force d below 1.0
                    ExpectedResponse::NoAnswer => Verdict::NoAnswer,
                    ExpectedResponse::LabelSet(set) => Verdict::LabelSet {
                        labels: set.clone(),
                    },
                };
                record_for(q.clone(), verdict)
            })
            .collect();
        let accuracy_map = |records: &[EvalRecord]| -> BTreeMap<Setting, f64> {
            Setting::CORE
                .into_iter()
                .filter_map(|s| setting_accuracy(records, s).ok().map(|a| (s, a)))
                .collect()
        };
        let before = mcqa_plus_score(&accuracy_map(&records), Profile::Full).unwrap();
        let d_records: Vec<EvalRecord> = records
            .iter()
            .filter(|r| r.question.setting == Setting::TfIncorrect)
            .cloned()
            .collect();
        records.extend(d_records);
        let after = mcqa_plus_score(&accuracy_map(&records), Profile::Full).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn records_round_trip() {
        let it = item("q1", &["a", "b"], 0);
        let q = original_question(&it).unwrap();
        let records = vec![record_for(q, Verdict::Label { label: label('A') })];
        let mut buf = Vec::new();
        serialize_records(&records, &mut buf, Some("digest")).unwrap();
        let back = parse_records(buf.as_slice()).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn tampered_correct_flag_rejected() {
        let it = item("q1", &["a", "b"], 0);
        let q = original_question(&it).unwrap();
        let records = vec![record_for(q, Verdict::Label { label: label('A') })];
        let mut buf = Vec::new();
        serialize_records(&records, &mut buf, None).unwrap();
        let tampered = String::from_utf8(buf)
            .unwrap()
            .replace("\"correct\":true", "\"correct\":false");
        assert!(matches!(
            parse_records(tampered.as_bytes()),
            Err(DatasetError::MalformedLine { line: 2, .. })
        ));
    }
}
