//! Prompt rendering: templates, few-shot demonstration construction, and the
//! select-all variant. Rendering is deterministic; demos never share a
//! parent with the question under evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{DerivedQuestion, MCQItem, QuestionPayload, Setting, TFClaim};
use crate::seed;
use crate::transforms::{derive_true_false, replace_correct_with_nota, NOTA_TEXT};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template is for setting {template}, question is setting {question}")]
    TemplateSettingMismatch { template: String, question: String },
    #[error("template for setting {setting} must use the {placeholder} placeholder correctly: {problem}")]
    InvalidTemplate {
        setting: String,
        placeholder: &'static str,
        problem: &'static str,
    },
    #[error("demo pool cannot supply {needed} demo(s) for setting {setting}: {reason}")]
    InsufficientPool {
        setting: String,
        needed: usize,
        reason: String,
    },
    #[error("template file {0}: {1}")]
    TemplateFile(String, String),
}

/// Rendered prompt text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    text: String,
}

impl Prompt {
    pub fn new(text: String) -> Self {
        Prompt { text }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Content digest used for caching and record keying.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.text.as_bytes());
        hex::encode(hasher.finalize())
    }
}

/// A per-setting template: an instruction body with `{stem}`, `{options}`
/// and `{claim}` placeholders, plus the trailing answer cue.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub setting: Setting,
    pub instruction: String,
    pub answer_cue: String,
}

impl PromptTemplate {
    pub fn new(
        setting: Setting,
        instruction: impl Into<String>,
        answer_cue: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let template = PromptTemplate {
            setting,
            instruction: instruction.into(),
            answer_cue: answer_cue.into(),
        };
        template.check_placeholders()?;
        Ok(template)
    }

    /// The compiled-in default template for a setting.
    pub fn builtin(setting: Setting) -> Self {
        let raw = match setting {
            Setting::Original => include_str!("../templates/a.txt"),
            Setting::Reordered => include_str!("../templates/b.txt"),
            Setting::TfCorrect => include_str!("../templates/c.txt"),
            Setting::TfIncorrect => include_str!("../templates/d.txt"),
            Setting::Nota => include_str!("../templates/e.txt"),
            Setting::NoCorrect => include_str!("../templates/f.txt"),
            Setting::MultiSelect => include_str!("../templates/multi.txt"),
            Setting::MisleadingReplaced => include_str!("../templates/replaced.txt"),
        };
        Self::from_text(setting, raw).expect("builtin templates are valid")
    }

    /// Parse template text: the last non-empty line is the answer cue, the
    /// rest is the instruction body.
    pub fn from_text(setting: Setting, raw: &str) -> Result<Self, PromptError> {
        let trimmed = raw.trim_end();
        let (instruction, cue) = match trimmed.rfind('\n') {
            Some(pos) => (trimmed[..pos].trim_end(), trimmed[pos + 1..].trim()),
            None => ("", trimmed),
        };
        Self::new(setting, instruction, cue)
    }

    fn check_placeholders(&self) -> Result<(), PromptError> {
        let claim_based = self.setting.is_claim();
        let has = |p: &str| self.instruction.contains(p);
        if claim_based {
            if !has("{claim}") {
                return Err(PromptError::InvalidTemplate {
                    setting: self.setting.code().to_string(),
                    placeholder: "{claim}",
                    problem: "missing",
                });
            }
            if has("{options}") {
                return Err(PromptError::InvalidTemplate {
                    setting: self.setting.code().to_string(),
                    placeholder: "{options}",
                    problem: "not available for claim settings",
                });
            }
        } else {
            if !has("{stem}") || !has("{options}") {
                return Err(PromptError::InvalidTemplate {
                    setting: self.setting.code().to_string(),
                    placeholder: "{stem}/{options}",
                    problem: "missing",
                });
            }
            if has("{claim}") {
                return Err(PromptError::InvalidTemplate {
                    setting: self.setting.code().to_string(),
                    placeholder: "{claim}",
                    problem: "only available for claim settings",
                });
            }
        }
        Ok(())
    }
}

/// Templates for every setting, with per-file overrides from a directory.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<Setting, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            templates: Setting::ALL
                .into_iter()
                .map(|s| (s, PromptTemplate::builtin(s)))
                .collect(),
        }
    }

    /// Builtin templates overridden by any `<code>.txt` files in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for setting in Setting::ALL {
            let path = dir.join(format!("{}.txt", setting.code()));
            if path.is_file() {
                let raw = std::fs::read_to_string(&path).map_err(|e| {
                    PromptError::TemplateFile(path.display().to_string(), e.to_string())
                })?;
                set.templates
                    .insert(setting, PromptTemplate::from_text(setting, &raw)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, setting: Setting) -> &PromptTemplate {
        &self.templates[&setting]
    }
}

fn options_block(item: &MCQItem) -> String {
    item.labels()
        .iter()
        .map(|l| format!("{}. {}", l.symbol(), item.option_text(*l).unwrap()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn claim_block(claim: &TFClaim) -> String {
    format!(
        "Question: {}\nProposed answer: {}",
        claim.stem, claim.candidate
    )
}

// Placeholder availability is checked at template construction, so
// substitution cannot leave a placeholder unresolved.
fn substitute(instruction: &str, payload: &QuestionPayload) -> String {
    match payload {
        QuestionPayload::Item(item) => instruction
            .replace("{stem}", &item.stem)
            .replace("{options}", &options_block(item)),
        QuestionPayload::Claim(claim) => instruction
            .replace("{stem}", &claim.stem)
            .replace("{claim}", &claim_block(claim)),
    }
}

/// Render a derived question: demos (if any), then the instruction with the
/// question substituted, then the answer cue.
pub fn render_prompt(
    question: &DerivedQuestion,
    template: &PromptTemplate,
    demos: &[String],
) -> Result<Prompt, PromptError> {
    if template.setting != question.setting {
        return Err(PromptError::TemplateSettingMismatch {
            template: template.setting.code().to_string(),
            question: question.setting.code().to_string(),
        });
    }
    let body = substitute(&template.instruction, &question.payload);
    let mut text = String::new();
    for demo in demos {
        text.push_str(demo);
        text.push_str("\n\n");
    }
    text.push_str(&body);
    text.push('\n');
    text.push_str(&template.answer_cue);
    Ok(Prompt::new(text))
}

/// Render a select-all prompt for an item.
pub fn render_multi_select_prompt(
    item: &MCQItem,
    template: &PromptTemplate,
) -> Result<Prompt, PromptError> {
    if template.setting != Setting::MultiSelect {
        return Err(PromptError::TemplateSettingMismatch {
            template: template.setting.code().to_string(),
            question: Setting::MultiSelect.code().to_string(),
        });
    }
    let body = substitute(&template.instruction, &QuestionPayload::Item(item.clone()));
    Ok(Prompt::new(format!("{body}\n{}", template.answer_cue)))
}

// ---------------------------------------------------------------------------
// Few-shot demonstrations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemoMode {
    ZeroShot,
    FewShot(usize),
}

/// Demonstration policy: a held-out pool plus a seed for reproducible
/// selection.
#[derive(Debug, Clone)]
pub struct DemoPolicy {
    pub mode: DemoMode,
    pub pool: Vec<MCQItem>,
    pub seed: u64,
}

impl DemoPolicy {
    pub fn zero_shot() -> Self {
        DemoPolicy {
            mode: DemoMode::ZeroShot,
            pool: Vec::new(),
            seed: 0,
        }
    }
}

fn demo_text(body: String, cue: &str, answer: &str) -> String {
    format!("{body}\n{cue} {answer}")
}

fn mcq_demo(item: &MCQItem, template: &PromptTemplate) -> Option<String> {
    let gold = item.gold_label()?;
    let body = format!("{}\n{}", item.stem, options_block(item));
    Some(demo_text(
        body,
        &template.answer_cue,
        &gold.symbol().to_string(),
    ))
}

/// Build the demo block for one setting. `exclude_parent` is the id of the
/// question under evaluation; pool entries sharing it are never used.
///
/// Recipes: claim settings get exactly two demos with opposite answers
/// (order decided by the seed); the NOTA setting gets demos whose answer is
/// the appended NOTA option; every other setting gets `k` items answered
/// with their gold label.
pub fn build_demos(
    setting: Setting,
    policy: &DemoPolicy,
    template: &PromptTemplate,
    exclude_parent: Option<&str>,
) -> Result<Vec<String>, PromptError> {
    let k = match policy.mode {
        DemoMode::ZeroShot => return Ok(Vec::new()),
        DemoMode::FewShot(k) => k,
    };
    let insufficient = |needed: usize, reason: &str| PromptError::InsufficientPool {
        setting: setting.code().to_string(),
        needed,
        reason: reason.to_string(),
    };
    let mut pool: Vec<&MCQItem> = policy
        .pool
        .iter()
        .filter(|item| Some(item.id.as_str()) != exclude_parent)
        .collect();
    let mut rng = seed::rng(policy.seed, &format!("demos:{}", setting.code()));
    pool.shuffle(&mut rng);

    match setting {
        Setting::TfCorrect | Setting::TfIncorrect => {
            // exactly two demonstrations, one answered Yes and one No
            let mut yes_demo = None;
            let mut no_demo = None;
            for item in &pool {
                let Ok(questions) = derive_true_false(item) else {
                    continue;
                };
                if yes_demo.is_none() {
                    if let Some(q) = questions.iter().find(|q| q.setting == Setting::TfCorrect) {
                        let claim = q.payload.claim().unwrap();
                        yes_demo =
                            Some(demo_text(claim_block(claim), &template.answer_cue, "Yes"));
                        continue;
                    }
                }
                if no_demo.is_none() {
                    if let Some(q) = questions.iter().find(|q| q.setting == Setting::TfIncorrect)
                    {
                        let claim = q.payload.claim().unwrap();
                        no_demo =
                            Some(demo_text(claim_block(claim), &template.answer_cue, "No"));
                    }
                }
                if yes_demo.is_some() && no_demo.is_some() {
                    break;
                }
            }
            match (yes_demo, no_demo) {
                (Some(yes), Some(no)) => {
                    if rng.gen_bool(0.5) {
                        Ok(vec![yes, no])
                    } else {
                        Ok(vec![no, yes])
                    }
                }
                _ => Err(insufficient(
                    2,
                    "need one item for a yes-claim and one for a no-claim",
                )),
            }
        }
        Setting::Nota => {
            let mut demos = Vec::new();
            for item in &pool {
                if demos.len() == k {
                    break;
                }
                let Ok(q) = replace_correct_with_nota(item) else {
                    continue;
                };
                let payload = q.payload.item().unwrap();
                let nota_label = payload
                    .labels()
                    .into_iter()
                    .find(|l| payload.option_text(*l) == Some(NOTA_TEXT))
                    .expect("NOTA transform appends the NOTA option");
                let body = format!("{}\n{}", payload.stem, options_block(payload));
                demos.push(demo_text(
                    body,
                    &template.answer_cue,
                    &nota_label.symbol().to_string(),
                ));
            }
            if demos.len() < k {
                return Err(insufficient(k, "not enough NOTA-transformable items"));
            }
            Ok(demos)
        }
        _ => {
            let demos: Vec<String> = pool
                .iter()
                .filter_map(|item| mcq_demo(item, template))
                .take(k)
                .collect();
            if demos.len() < k {
                return Err(insufficient(k, "not enough items with gold labels"));
            }
            Ok(demos)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExpectedResponse, Gold, OptionLabel};
    use crate::transforms::original_question;
    use std::collections::BTreeSet;

    fn item(id: &str, options: &[&str], gold: usize) -> MCQItem {
        MCQItem::new(
            id,
            format!("Stem of {id}?"),
            options.iter().map(|s| s.to_string()).collect(),
            Gold::Label(OptionLabel::from_index(gold).unwrap()),
            BTreeSet::new(),
            "unit",
        )
        .unwrap()
    }

    fn pool() -> Vec<MCQItem> {
        (0..6)
            .map(|i| {
                item(
                    &format!("pool{i}"),
                    &["alpha", "beta", "gamma", "delta"],
                    i % 4,
                )
            })
            .collect()
    }

    #[test]
    fn zero_shot_prompt_lists_options() {
        let q = original_question(&item("q1", &["Paris", "London", "Rome", "Berlin"], 0)).unwrap();
        let template = PromptTemplate::builtin(Setting::Original);
        let prompt = render_prompt(&q, &template, &[]).unwrap();
        for line in ["A. Paris", "B. London", "C. Rome", "D. Berlin"] {
            assert!(prompt.text().contains(line), "missing {line:?} in:\n{}", prompt.text());
        }
        assert!(prompt.text().ends_with("Answer:"));
    }

    #[test]
    fn claim_prompt_contains_claim() {
        let q = derive_true_false(&item("q1", &["Paris", "London"], 0))
            .unwrap()
            .remove(0);
        let template = PromptTemplate::builtin(Setting::TfCorrect);
        let prompt = render_prompt(&q, &template, &[]).unwrap();
        assert!(prompt.text().contains("Proposed answer: Paris"));
        assert!(prompt.text().contains("\"Yes\" or \"No\""));
    }

    #[test]
    fn no_correct_prompt_has_no_answer_instruction() {
        let policy = crate::transforms::TokenPolicy::gibberish(6, 0).unwrap();
        let q = crate::transforms::strip_correct_option(
            &item("q1", &["Paris", "London"], 0),
            &policy,
        )
        .unwrap();
        let template = PromptTemplate::builtin(Setting::NoCorrect);
        let prompt = render_prompt(&q, &template, &[]).unwrap();
        assert!(prompt
            .text()
            .contains("If you think there is no correct answer, you can respond with 'no answer'"));
    }

    #[test]
    fn setting_mismatch_is_rejected() {
        let q = original_question(&item("q1", &["a", "b"], 0)).unwrap();
        let template = PromptTemplate::builtin(Setting::NoCorrect);
        assert!(matches!(
            render_prompt(&q, &template, &[]),
            Err(PromptError::TemplateSettingMismatch { .. })
        ));
    }

    #[test]
    fn rendering_is_deterministic() {
        let it = item("q1", &["a", "b", "c"], 1);
        let template = PromptTemplate::builtin(Setting::MultiSelect);
        let a = render_multi_select_prompt(&it, &template).unwrap();
        let b = render_multi_select_prompt(&it, &template).unwrap();
        assert_eq!(a, b);
        assert!(a.text().contains("Select all options"));
    }

    #[test]
    fn multi_select_rejects_other_templates() {
        let it = item("q1", &["a", "b"], 0);
        let template = PromptTemplate::builtin(Setting::Original);
        assert!(matches!(
            render_multi_select_prompt(&it, &template),
            Err(PromptError::TemplateSettingMismatch { .. })
        ));
    }

    #[test]
    fn tf_demos_have_opposite_answers() {
        let policy = DemoPolicy {
            mode: DemoMode::FewShot(2),
            pool: pool(),
            seed: 11,
        };
        let template = PromptTemplate::builtin(Setting::TfCorrect);
        let demos = build_demos(Setting::TfCorrect, &policy, &template, None).unwrap();
        assert_eq!(demos.len(), 2);
        let yes_count = demos.iter().filter(|d| d.ends_with("Yes")).count();
        let no_count = demos.iter().filter(|d| d.ends_with("No")).count();
        assert_eq!((yes_count, no_count), (1, 1));
    }

    #[test]
    fn tf_demo_order_alternates_with_seed() {
        let template = PromptTemplate::builtin(Setting::TfCorrect);
        let mut orders = BTreeSet::new();
        for seed in 0..32 {
            let policy = DemoPolicy {
                mode: DemoMode::FewShot(2),
                pool: pool(),
                seed,
            };
            let demos = build_demos(Setting::TfCorrect, &policy, &template, None).unwrap();
            orders.insert(demos[0].ends_with("Yes"));
        }
        assert_eq!(orders.len(), 2, "both demo orders must occur across seeds");
    }

    #[test]
    fn zero_shot_demos_empty() {
        let template = PromptTemplate::builtin(Setting::Original);
        let demos =
            build_demos(Setting::Original, &DemoPolicy::zero_shot(), &template, None).unwrap();
        assert!(demos.is_empty());
    }

    #[test]
    fn nota_demos_answer_the_nota_label() {
        let policy = DemoPolicy {
            mode: DemoMode::FewShot(2),
            pool: pool(),
            seed: 3,
        };
        let template = PromptTemplate::builtin(Setting::Nota);
        let demos = build_demos(Setting::Nota, &policy, &template, None).unwrap();
        assert_eq!(demos.len(), 2);
        for demo in &demos {
            assert!(demo.contains(NOTA_TEXT));
            assert!(demo.ends_with("D")); // 4 options, NOTA appended last
        }
    }

    #[test]
    fn nota_demos_fail_without_transformable_pool() {
        let pool = vec![item("n1", &["x", "None of the above"], 0)];
        let policy = DemoPolicy {
            mode: DemoMode::FewShot(1),
            pool,
            seed: 0,
        };
        let template = PromptTemplate::builtin(Setting::Nota);
        assert!(matches!(
            build_demos(Setting::Nota, &policy, &template, None),
            Err(PromptError::InsufficientPool { .. })
        ));
    }

    #[test]
    fn demos_never_leak_the_target_parent() {
        let mut small = pool();
        small.truncate(2);
        let policy = DemoPolicy {
            mode: DemoMode::FewShot(1),
            pool: small,
            seed: 5,
        };
        let template = PromptTemplate::builtin(Setting::Original);
        let demos =
            build_demos(Setting::Original, &policy, &template, Some("pool0")).unwrap();
        assert_eq!(demos.len(), 1);
        assert!(!demos[0].contains("Stem of pool0?"));
    }

    #[test]
    fn demo_selection_reproducible() {
        let policy = DemoPolicy {
            mode: DemoMode::FewShot(3),
            pool: pool(),
            seed: 21,
        };
        let template = PromptTemplate::builtin(Setting::Original);
        let a = build_demos(Setting::Original, &policy, &template, None).unwrap();
        let b = build_demos(Setting::Original, &policy, &template, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn template_dir_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("a.txt"),
            "Custom instruction.\n\n{stem}\n{options}\n\nFinal answer:\n",
        )
        .unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.get(Setting::Original).answer_cue, "Final answer:");
        assert!(set.get(Setting::Original).instruction.starts_with("Custom"));
        // untouched settings fall back to builtin
        assert_eq!(
            set.get(Setting::TfCorrect).instruction,
            PromptTemplate::builtin(Setting::TfCorrect).instruction
        );
    }

    #[test]
    fn distinct_questions_render_distinct_prompts() {
        let it = item("q1", &["Paris", "London", "Rome", "Berlin"], 0);
        let template = PromptTemplate::builtin(Setting::Reordered);
        let qs = crate::transforms::enumerate_permutations(
            &it,
            &crate::transforms::PermutationBudget::Cyclic,
        )
        .unwrap();
        let prompts: BTreeSet<String> = qs
            .iter()
            .map(|q| render_prompt(q, &template, &[]).unwrap().text().to_string())
            .collect();
        assert_eq!(prompts.len(), qs.len());
    }

    #[test]
    fn invalid_templates_rejected() {
        assert!(matches!(
            PromptTemplate::new(Setting::Original, "no placeholders here", "Answer:"),
            Err(PromptError::InvalidTemplate { .. })
        ));
        assert!(matches!(
            PromptTemplate::new(Setting::TfCorrect, "{options} wrong kind {claim}", "Answer:"),
            Err(PromptError::InvalidTemplate { .. })
        ));
    }

    #[test]
    fn expected_field_untouched_by_rendering() {
        let q = original_question(&item("q1", &["a", "b"], 1)).unwrap();
        assert_eq!(
            q.expected,
            ExpectedResponse::Label(OptionLabel::from_index(1).unwrap())
        );
    }
}
