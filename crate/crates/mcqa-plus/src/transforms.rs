//! Pure, deterministic generation of every derived-question form: option
//! permutations, true-or-false derivation, "None of the above" substitution,
//! correct-option removal, misleading-option replacement, and the suite
//! builder that combines them.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::model::{
    ClaimPolarity, DerivedQuestion, ExpectedResponse, Gold, MCQItem, OptionLabel,
    QuestionPayload, Setting, TFClaim,
};
use crate::seed;

/// Literal text appended by the NOTA substitution.
pub const NOTA_TEXT: &str = "None of the above";

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("sampled budget of {k} exceeds the permutation space ({space} orderings)")]
    BudgetExceedsSpace { k: usize, space: u128 },
    #[error("sampled budget must request at least one ordering")]
    EmptyBudget,
    #[error("gold option {0:?} is NOTA-like; item rejected for T/F derivation")]
    GoldIsNotaLike(String),
    #[error("item already has a NOTA-like option: {0:?}")]
    AlreadyHasNota(String),
    #[error("target {0} is the gold option")]
    TargetIsGold(char),
    #[error("target {0} is not a label of this item")]
    TargetOutOfRange(char),
    #[error("item gold must be a label for this transform")]
    GoldNotLabel,
    #[error("fixed token text {0:?} contains an alphabetic word of length >= 3")]
    SemanticToken(String),
    #[error("gibberish length must be at least 1")]
    EmptyToken,
    #[error("no setting is applicable to this item: {0}")]
    NoApplicableSettings(String),
}

// ---------------------------------------------------------------------------
// Budgets and token policies
// ---------------------------------------------------------------------------

/// How many option orderings to test per item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationBudget {
    /// Every one of the n! orderings.
    All,
    /// The n rotations.
    Cyclic,
    /// `k` distinct orderings including the identity, drawn under `seed`.
    Sampled { k: usize, seed: u64 },
}

pub fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

impl PermutationBudget {
    /// Default used by the CLI: exhaustive for small items, rotations beyond.
    pub fn default_for(n_options: usize) -> Self {
        if n_options <= 4 {
            PermutationBudget::All
        } else {
            PermutationBudget::Cyclic
        }
    }

    /// Number of orderings this budget produces for an n-option item.
    pub fn count_for(&self, n_options: usize) -> Result<usize, TransformError> {
        match *self {
            PermutationBudget::All => Ok(factorial(n_options) as usize),
            PermutationBudget::Cyclic => Ok(n_options),
            PermutationBudget::Sampled { k, .. } => {
                if k == 0 {
                    return Err(TransformError::EmptyBudget);
                }
                let space = factorial(n_options);
                if k as u128 > space {
                    return Err(TransformError::BudgetExceedsSpace { k, space });
                }
                Ok(k)
            }
        }
    }
}

/// Produces the non-semantic replacement text for removed or replaced
/// options. Output never contains an alphabetic word of length >= 3, so it
/// cannot read as a real answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenPolicy {
    FixedString(String),
    RandomGibberish { length: usize, seed: u64 },
}

const GIBBERISH_CHARSET: &[u8] = b"!@#$%^&*~0123456789";

fn has_alphabetic_word(text: &str) -> bool {
    let mut run = 0usize;
    for c in text.chars() {
        if c.is_alphabetic() {
            run += 1;
            if run >= 3 {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

impl TokenPolicy {
    pub fn fixed(text: impl Into<String>) -> Result<Self, TransformError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(TransformError::EmptyToken);
        }
        if has_alphabetic_word(&text) {
            return Err(TransformError::SemanticToken(text));
        }
        Ok(TokenPolicy::FixedString(text))
    }

    pub fn gibberish(length: usize, seed: u64) -> Result<Self, TransformError> {
        if length == 0 {
            return Err(TransformError::EmptyToken);
        }
        Ok(TokenPolicy::RandomGibberish { length, seed })
    }

    /// Deterministic token for the given context. The salt keeps distinct
    /// replacement sites from colliding under the gibberish policy.
    pub fn generate(&self, salt: &str) -> String {
        match self {
            TokenPolicy::FixedString(text) => text.clone(),
            TokenPolicy::RandomGibberish { length, seed } => {
                let mut rng = seed::rng(*seed, salt);
                (0..*length)
                    .map(|_| GIBBERISH_CHARSET[rng.gen_range(0..GIBBERISH_CHARSET.len())] as char)
                    .collect()
            }
        }
    }
}

// ---------------------------------------------------------------------------
// NOTA-like detection
// ---------------------------------------------------------------------------

/// Configurable list of option texts treated as "None of the above"-like.
/// Combiner options ("Both A and B") are deliberately not in the default.
#[derive(Debug, Clone)]
pub struct NotaPatterns {
    patterns: Vec<String>,
}

impl Default for NotaPatterns {
    fn default() -> Self {
        NotaPatterns {
            patterns: [
                "none of the above",
                "none of these",
                "all of the above",
                "all of these",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl NotaPatterns {
    pub fn custom(patterns: impl IntoIterator<Item = String>) -> Self {
        NotaPatterns {
            patterns: patterns.into_iter().map(|p| normalize_for_nota(&p)).collect(),
        }
    }

    pub fn matches(&self, text: &str) -> bool {
        self.patterns.contains(&normalize_for_nota(text))
    }
}

fn normalize_for_nota(text: &str) -> String {
    let lowered: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True iff the text matches the default NOTA-like pattern list.
pub fn is_nota_like(text: &str) -> bool {
    NotaPatterns::default().matches(text)
}

// ---------------------------------------------------------------------------
// Individual transforms
// ---------------------------------------------------------------------------

fn derived_item(
    parent: &MCQItem,
    suffix: &str,
    options: Vec<String>,
    gold: Gold,
) -> MCQItem {
    MCQItem::assemble(
        format!("{}/{}", parent.id, suffix),
        parent.stem.clone(),
        options,
        gold,
        parent.tags.clone(),
        parent.source.clone(),
    )
    .expect("transform outputs preserve structural invariants")
}

/// Setting (a): the item itself, wrapped as a derived question.
pub fn original_question(item: &MCQItem) -> Result<DerivedQuestion, TransformError> {
    let gold = item.gold_label().ok_or(TransformError::GoldNotLabel)?;
    Ok(DerivedQuestion {
        parent_id: item.id.clone(),
        setting: Setting::Original,
        payload: QuestionPayload::Item(derived_item(
            item,
            "a",
            item.options.clone(),
            item.gold,
        )),
        expected: ExpectedResponse::Label(gold),
        permutation_index: None,
    })
}

fn apply_ordering(item: &MCQItem, ordering: &[usize], index: u32) -> DerivedQuestion {
    let gold = item.gold_label().expect("caller checked gold");
    let options: Vec<String> = ordering.iter().map(|&i| item.options[i].clone()).collect();
    let new_gold_pos = ordering
        .iter()
        .position(|&i| i == gold.index())
        .expect("ordering covers all positions");
    let new_gold = OptionLabel::from_index(new_gold_pos).expect("position in range");
    DerivedQuestion {
        parent_id: item.id.clone(),
        setting: Setting::Reordered,
        payload: QuestionPayload::Item(derived_item(
            item,
            &format!("b{index}"),
            options,
            Gold::Label(new_gold),
        )),
        expected: ExpectedResponse::Label(new_gold),
        permutation_index: Some(index),
    }
}

fn all_orderings(n: usize) -> Vec<Vec<usize>> {
    // Lexicographic enumeration; the identity comes first.
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    // next_permutation, textbook form
    while let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| current[i] < current[i + 1]) {
        let j = (i + 1..n).rev().find(|&j| current[j] > current[i]).unwrap();
        current.swap(i, j);
        current[i + 1..].reverse();
        out.push(current.clone());
    }
    out
}

/// Setting (b): the item under every ordering in the budget, options
/// relabeled `A..` and gold remapped to follow its text. The identity
/// ordering is always present with permutation_index 0.
pub fn enumerate_permutations(
    item: &MCQItem,
    budget: &PermutationBudget,
) -> Result<Vec<DerivedQuestion>, TransformError> {
    item.gold_label().ok_or(TransformError::GoldNotLabel)?;
    let n = item.n_options();
    let orderings: Vec<Vec<usize>> = match *budget {
        PermutationBudget::All => all_orderings(n),
        PermutationBudget::Cyclic => (0..n)
            .map(|r| (0..n).map(|i| (i + r) % n).collect())
            .collect(),
        PermutationBudget::Sampled { k, seed } => {
            budget.count_for(n)?; // validates k against n!
            let identity: Vec<usize> = (0..n).collect();
            let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
            seen.insert(identity.clone());
            let mut orderings = vec![identity.clone()];
            let mut rng = seed::rng(seed, "perm-sample");
            while orderings.len() < k {
                let mut candidate: Vec<usize> = (0..n).collect();
                candidate.shuffle(&mut rng);
                if seen.insert(candidate.clone()) {
                    orderings.push(candidate);
                }
            }
            orderings
        }
    };
    Ok(orderings
        .iter()
        .enumerate()
        .map(|(i, ordering)| apply_ordering(item, ordering, i as u32))
        .collect())
}

/// Settings (c) and (d): one yes-claim for the gold option and one no-claim
/// per non-NOTA-like incorrect option. NOTA-like incorrect options are
/// skipped; a NOTA-like gold rejects the whole item.
pub fn derive_true_false(item: &MCQItem) -> Result<Vec<DerivedQuestion>, TransformError> {
    let gold = item.gold_label().ok_or(TransformError::GoldNotLabel)?;
    let gold_text = item.option_text(gold).expect("gold label in range");
    if is_nota_like(gold_text) {
        return Err(TransformError::GoldIsNotaLike(gold_text.to_string()));
    }
    let mut out = vec![DerivedQuestion {
        parent_id: item.id.clone(),
        setting: Setting::TfCorrect,
        payload: QuestionPayload::Claim(TFClaim {
            stem: item.stem.clone(),
            candidate: gold_text.to_string(),
            polarity: ClaimPolarity::Correct,
        }),
        expected: ExpectedResponse::Yes,
        permutation_index: None,
    }];
    for label in item.labels() {
        if label == gold {
            continue;
        }
        let text = item.option_text(label).expect("label in range");
        if is_nota_like(text) {
            continue;
        }
        out.push(DerivedQuestion {
            parent_id: item.id.clone(),
            setting: Setting::TfIncorrect,
            payload: QuestionPayload::Claim(TFClaim {
                stem: item.stem.clone(),
                candidate: text.to_string(),
                polarity: ClaimPolarity::Incorrect,
            }),
            expected: ExpectedResponse::No,
            permutation_index: None,
        });
    }
    Ok(out)
}

/// Setting (e): drop the gold option's text and append "None of the above"
/// as the final option; the appended option is the expected answer. Option
/// count is unchanged.
pub fn replace_correct_with_nota(item: &MCQItem) -> Result<DerivedQuestion, TransformError> {
    let gold = item.gold_label().ok_or(TransformError::GoldNotLabel)?;
    if let Some(text) = item.options.iter().find(|t| is_nota_like(t)) {
        return Err(TransformError::AlreadyHasNota(text.clone()));
    }
    let mut options: Vec<String> = item
        .options
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != gold.index())
        .map(|(_, t)| t.clone())
        .collect();
    options.push(NOTA_TEXT.to_string());
    let expected = OptionLabel::from_index(options.len() - 1).expect("count unchanged");
    Ok(DerivedQuestion {
        parent_id: item.id.clone(),
        setting: Setting::Nota,
        payload: QuestionPayload::Item(derived_item(
            item,
            "e",
            options,
            Gold::Label(expected),
        )),
        expected: ExpectedResponse::Label(expected),
        permutation_index: None,
    })
}

/// Setting (f): replace the gold option's text with a non-semantic token.
/// Option count and labels are unchanged; the expected response is
/// "no answer" and the payload's gold becomes NoAnswer.
pub fn strip_correct_option(
    item: &MCQItem,
    policy: &TokenPolicy,
) -> Result<DerivedQuestion, TransformError> {
    let gold = item.gold_label().ok_or(TransformError::GoldNotLabel)?;
    let mut options = item.options.clone();
    options[gold.index()] = policy.generate(&format!("{}:f:{}", item.id, gold.symbol()));
    Ok(DerivedQuestion {
        parent_id: item.id.clone(),
        setting: Setting::NoCorrect,
        payload: QuestionPayload::Item(derived_item(item, "f", options, Gold::NoAnswer)),
        expected: ExpectedResponse::NoAnswer,
        permutation_index: None,
    })
}

/// Replace one non-gold option's text with a non-semantic token, leaving
/// gold untouched. Used to build the misleading-replacement setting over
/// dagger items.
pub fn replace_option_text(
    item: &MCQItem,
    target: OptionLabel,
    policy: &TokenPolicy,
) -> Result<MCQItem, TransformError> {
    if target.index() >= item.n_options() {
        return Err(TransformError::TargetOutOfRange(target.symbol()));
    }
    if item.gold_label() == Some(target) {
        return Err(TransformError::TargetIsGold(target.symbol()));
    }
    let mut options = item.options.clone();
    options[target.index()] =
        policy.generate(&format!("{}:replace:{}", item.id, target.symbol()));
    Ok(MCQItem::assemble(
        item.id.clone(),
        item.stem.clone(),
        options,
        item.gold,
        item.tags.clone(),
        item.source.clone(),
    )
    .expect("replacement preserves structural invariants"))
}

/// Wrap a (typically misleading-replaced) item as a diagnostic question.
pub fn misleading_replaced_question(
    item: &MCQItem,
    policy: &TokenPolicy,
) -> Result<DerivedQuestion, TransformError> {
    let gold = item.gold_label().ok_or(TransformError::GoldNotLabel)?;
    let misleading = item
        .misleading_label()
        .ok_or(TransformError::GoldNotLabel)?;
    let replaced = replace_option_text(item, misleading, policy)?;
    Ok(DerivedQuestion {
        parent_id: item.id.clone(),
        setting: Setting::MisleadingReplaced,
        payload: QuestionPayload::Item(derived_item(
            &replaced,
            "replaced",
            replaced.options.clone(),
            replaced.gold,
        )),
        expected: ExpectedResponse::Label(gold),
        permutation_index: None,
    })
}

/// Wrap an item as a select-all-that-apply diagnostic question. The strictly
/// correct selection is the gold option alone.
pub fn multi_select_question(item: &MCQItem) -> Result<DerivedQuestion, TransformError> {
    let gold = item.gold_label().ok_or(TransformError::GoldNotLabel)?;
    let mut expected = BTreeSet::new();
    expected.insert(gold);
    Ok(DerivedQuestion {
        parent_id: item.id.clone(),
        setting: Setting::MultiSelect,
        payload: QuestionPayload::Item(derived_item(
            item,
            "multi",
            item.options.clone(),
            item.gold,
        )),
        expected: ExpectedResponse::LabelSet(expected),
        permutation_index: None,
    })
}

// ---------------------------------------------------------------------------
// Suite builder
// ---------------------------------------------------------------------------

/// Which settings a suite covers. X1 draws a single question per item from
/// the full setting pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Hard,
    X1,
}

impl Profile {
    pub fn settings(self) -> &'static [Setting] {
        match self {
            Profile::Full | Profile::X1 => &Setting::CORE,
            Profile::Hard => &Setting::HARD,
        }
    }
}

/// A setting skipped for one item, with the reason.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Omission {
    pub parent_id: String,
    pub setting: Setting,
    pub reason: String,
}

/// Questions produced for one item plus any per-setting omissions.
#[derive(Debug, Clone)]
pub struct SuiteOutput {
    pub questions: Vec<DerivedQuestion>,
    pub omissions: Vec<Omission>,
}

/// Generate the derived questions for one item under the given profile.
/// A constituent transform error omits its setting (recorded in the output)
/// rather than failing the item; X1 draws are excluded the same way.
pub fn build_suite(
    item: &MCQItem,
    profile: Profile,
    budget: &PermutationBudget,
    policy: &TokenPolicy,
    seed: u64,
) -> Result<SuiteOutput, TransformError> {
    item.gold_label().ok_or(TransformError::GoldNotLabel)?;

    let mut omissions = Vec::new();
    let mut groups: Vec<(Setting, Vec<DerivedQuestion>)> = Vec::new();
    let record = |setting: Setting,
                      result: Result<Vec<DerivedQuestion>, TransformError>,
                      groups: &mut Vec<(Setting, Vec<DerivedQuestion>)>,
                      omissions: &mut Vec<Omission>| {
        match result {
            Ok(questions) => groups.push((setting, questions)),
            Err(e) => omissions.push(Omission {
                parent_id: item.id.clone(),
                setting,
                reason: e.to_string(),
            }),
        }
    };

    let wants = |s: Setting| profile.settings().contains(&s);

    if wants(Setting::Original) {
        record(
            Setting::Original,
            original_question(item).map(|q| vec![q]),
            &mut groups,
            &mut omissions,
        );
    }
    if wants(Setting::Reordered) {
        record(
            Setting::Reordered,
            enumerate_permutations(item, budget),
            &mut groups,
            &mut omissions,
        );
    }
    if wants(Setting::TfCorrect) || wants(Setting::TfIncorrect) {
        match derive_true_false(item) {
            Ok(questions) => {
                let (c, d): (Vec<_>, Vec<_>) = questions
                    .into_iter()
                    .partition(|q| q.setting == Setting::TfCorrect);
                if wants(Setting::TfCorrect) {
                    groups.push((Setting::TfCorrect, c));
                }
                if wants(Setting::TfIncorrect) {
                    groups.push((Setting::TfIncorrect, d));
                }
            }
            Err(e) => {
                for setting in [Setting::TfCorrect, Setting::TfIncorrect] {
                    if wants(setting) {
                        omissions.push(Omission {
                            parent_id: item.id.clone(),
                            setting,
                            reason: e.to_string(),
                        });
                    }
                }
            }
        }
    }
    if wants(Setting::Nota) {
        record(
            Setting::Nota,
            replace_correct_with_nota(item).map(|q| vec![q]),
            &mut groups,
            &mut omissions,
        );
    }
    if wants(Setting::NoCorrect) {
        record(
            Setting::NoCorrect,
            strip_correct_option(item, policy).map(|q| vec![q]),
            &mut groups,
            &mut omissions,
        );
    }

    let questions = match profile {
        Profile::Full | Profile::Hard => groups.into_iter().flat_map(|(_, qs)| qs).collect(),
        Profile::X1 => {
            let candidates: Vec<(Setting, Vec<DerivedQuestion>)> = groups
                .into_iter()
                .filter(|(_, qs)| !qs.is_empty())
                .collect();
            if candidates.is_empty() {
                return Err(TransformError::NoApplicableSettings(item.id.clone()));
            }
            let mut rng = seed::rng(seed, &format!("x1:{}", item.id));
            let (_, group) = &candidates[rng.gen_range(0..candidates.len())];
            vec![group[rng.gen_range(0..group.len())].clone()]
        }
    };
    Ok(SuiteOutput {
        questions,
        omissions,
    })
}
