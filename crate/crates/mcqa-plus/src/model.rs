//! Domain types shared by every stage of the pipeline, plus the JSONL codecs
//! for datasets, derived questions and evaluation records.
//!
//! All types here are immutable after construction and safe to share across
//! threads. Option labels are positional: `A` always names the first option,
//! so permuting options relabels them.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Schema identifier written into file headers.
pub const SCHEMA_PREFIX: &str = "mcqa-plus";
/// The only schema version this build reads and writes.
pub const SCHEMA_VERSION: &str = "v1";

/// Tag prefix used to annotate dagger items with the option the model
/// wrongly chose in the base run.
pub const MISLEADING_TAG_PREFIX: &str = "misleading:";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("item has {0} option(s); between 2 and 26 required")]
    BadOptionCount(usize),
    #[error("option {0} has empty text")]
    EmptyOptionText(char),
    #[error("options {0} and {1} have the same text after whitespace normalization")]
    DuplicateOptionText(char, char),
    #[error("gold index {gold} out of range for {n_options} options")]
    GoldOutOfRange { gold: usize, n_options: usize },
    #[error("gold_text {gold_text:?} does not match option {label} text {option_text:?}")]
    GoldTextMismatch {
        label: char,
        gold_text: String,
        option_text: String,
    },
    #[error("label {0:?} is not a valid option label")]
    BadLabel(String),
    #[error("setting {setting} requires expected response {requirement}")]
    ExpectedMismatch {
        setting: &'static str,
        requirement: &'static str,
    },
    #[error("setting {setting} carries the wrong payload kind")]
    PayloadMismatch { setting: &'static str },
}

// ---------------------------------------------------------------------------
// Option labels
// ---------------------------------------------------------------------------

/// Positional option label. `A` is the first option of its item; an item has
/// at most 26 options, so labels are the letters `A..Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OptionLabel(u8);

impl OptionLabel {
    pub const MAX_OPTIONS: usize = 26;

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::MAX_OPTIONS).then_some(OptionLabel(index as u8))
    }

    pub fn from_symbol(symbol: char) -> Option<Self> {
        let upper = symbol.to_ascii_uppercase();
        upper
            .is_ascii_uppercase()
            .then(|| OptionLabel(upper as u8 - b'A'))
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut chars = text.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                Self::from_symbol(c).ok_or_else(|| ModelError::BadLabel(text.to_string()))
            }
            _ => Err(ModelError::BadLabel(text.to_string())),
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn symbol(self) -> char {
        (b'A' + self.0) as char
    }

    /// The consecutive labels `A..` for an item with `n` options.
    pub fn first_n(n: usize) -> Vec<OptionLabel> {
        (0..n.min(Self::MAX_OPTIONS)).map(|i| OptionLabel(i as u8)).collect()
    }
}

impl fmt::Display for OptionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

impl Serialize for OptionLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.symbol().to_string())
    }
}

impl<'de> Deserialize<'de> for OptionLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        OptionLabel::parse(&s).map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Items
// ---------------------------------------------------------------------------

/// Gold answer of an item. `NoAnswer` appears only on items produced by the
/// no-correct transform (setting f).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gold {
    Label(OptionLabel),
    NoAnswer,
}

impl Gold {
    pub fn label(self) -> Option<OptionLabel> {
        match self {
            Gold::Label(l) => Some(l),
            Gold::NoAnswer => None,
        }
    }
}

/// One multiple-choice question. Labels are implied by option position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MCQItem {
    pub id: String,
    pub stem: String,
    pub options: Vec<String>,
    pub gold: Gold,
    pub tags: BTreeSet<String>,
    pub source: String,
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl MCQItem {
    /// Build a source-dataset item, enforcing every invariant: 2..=26 options,
    /// non-empty texts, pairwise-distinct texts after whitespace
    /// normalization, gold in range.
    pub fn new(
        id: impl Into<String>,
        stem: impl Into<String>,
        options: Vec<String>,
        gold: Gold,
        tags: BTreeSet<String>,
        source: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let item = Self::assemble(id, stem, options, gold, tags, source)?;
        item.check_distinct_texts()?;
        Ok(item)
    }

    /// Relaxed constructor for transform outputs: skips the distinct-texts
    /// rule (a FixedString token policy can legitimately duplicate texts)
    /// but keeps every structural invariant.
    pub(crate) fn assemble(
        id: impl Into<String>,
        stem: impl Into<String>,
        options: Vec<String>,
        gold: Gold,
        tags: BTreeSet<String>,
        source: impl Into<String>,
    ) -> Result<Self, ModelError> {
        if options.len() < 2 || options.len() > OptionLabel::MAX_OPTIONS {
            return Err(ModelError::BadOptionCount(options.len()));
        }
        for (i, text) in options.iter().enumerate() {
            if normalize_ws(text).is_empty() {
                return Err(ModelError::EmptyOptionText((b'A' + i as u8) as char));
            }
        }
        if let Gold::Label(l) = gold {
            if l.index() >= options.len() {
                return Err(ModelError::GoldOutOfRange {
                    gold: l.index(),
                    n_options: options.len(),
                });
            }
        }
        Ok(MCQItem {
            id: id.into(),
            stem: stem.into(),
            options,
            gold,
            tags,
            source: source.into(),
        })
    }

    fn check_distinct_texts(&self) -> Result<(), ModelError> {
        for i in 0..self.options.len() {
            for j in (i + 1)..self.options.len() {
                if normalize_ws(&self.options[i]) == normalize_ws(&self.options[j]) {
                    return Err(ModelError::DuplicateOptionText(
                        (b'A' + i as u8) as char,
                        (b'A' + j as u8) as char,
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn n_options(&self) -> usize {
        self.options.len()
    }

    pub fn labels(&self) -> Vec<OptionLabel> {
        OptionLabel::first_n(self.options.len())
    }

    pub fn option_text(&self, label: OptionLabel) -> Option<&str> {
        self.options.get(label.index()).map(String::as_str)
    }

    pub fn gold_label(&self) -> Option<OptionLabel> {
        self.gold.label()
    }

    pub fn gold_text(&self) -> Option<&str> {
        self.gold_label().and_then(|l| self.option_text(l))
    }

    /// Misleading label recorded on dagger items, if any.
    pub fn misleading_label(&self) -> Option<OptionLabel> {
        self.tags
            .iter()
            .find_map(|t| t.strip_prefix(MISLEADING_TAG_PREFIX))
            .and_then(|s| OptionLabel::parse(s).ok())
    }

    /// Copy of this item tagged with the given misleading label.
    pub fn with_misleading(&self, label: OptionLabel) -> MCQItem {
        let mut item = self.clone();
        item.tags
            .retain(|t| !t.starts_with(MISLEADING_TAG_PREFIX));
        item.tags
            .insert(format!("{MISLEADING_TAG_PREFIX}{}", label.symbol()));
        item
    }
}

// ---------------------------------------------------------------------------
// Settings and derived questions
// ---------------------------------------------------------------------------

/// The six MCQA+ question settings plus the two diagnostic settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Setting {
    /// (a) original MCQ
    Original,
    /// (b) MCQ with re-ordered answer options
    Reordered,
    /// (c) true-or-false question derived from the correct option
    TfCorrect,
    /// (d) true-or-false question derived from an incorrect option
    TfIncorrect,
    /// (e) MCQ with the correct option replaced by "None of the above"
    Nota,
    /// (f) MCQ with no correct option
    NoCorrect,
    /// diagnostic: select-all-that-apply over dagger items
    MultiSelect,
    /// diagnostic: dagger items with the misleading option replaced
    MisleadingReplaced,
}

impl Setting {
    pub const CORE: [Setting; 6] = [
        Setting::Original,
        Setting::Reordered,
        Setting::TfCorrect,
        Setting::TfIncorrect,
        Setting::Nota,
        Setting::NoCorrect,
    ];

    pub const HARD: [Setting; 4] = [
        Setting::Reordered,
        Setting::TfIncorrect,
        Setting::Nota,
        Setting::NoCorrect,
    ];

    pub const ALL: [Setting; 8] = [
        Setting::Original,
        Setting::Reordered,
        Setting::TfCorrect,
        Setting::TfIncorrect,
        Setting::Nota,
        Setting::NoCorrect,
        Setting::MultiSelect,
        Setting::MisleadingReplaced,
    ];

    /// Wire code, also used for template file names.
    pub fn code(self) -> &'static str {
        match self {
            Setting::Original => "a",
            Setting::Reordered => "b",
            Setting::TfCorrect => "c",
            Setting::TfIncorrect => "d",
            Setting::Nota => "e",
            Setting::NoCorrect => "f",
            Setting::MultiSelect => "multi",
            Setting::MisleadingReplaced => "replaced",
        }
    }

    pub fn from_code(code: &str) -> Option<Setting> {
        Setting::ALL.into_iter().find(|s| s.code() == code)
    }

    /// True for the true-or-false settings, whose payload is a claim.
    pub fn is_claim(self) -> bool {
        matches!(self, Setting::TfCorrect | Setting::TfIncorrect)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl Serialize for Setting {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Setting {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Setting::from_code(&s)
            .ok_or_else(|| D::Error::custom(format!("unknown setting code {s:?}")))
    }
}

/// Polarity of the option a claim asserts as the answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClaimPolarity {
    Correct,
    Incorrect,
}

/// A yes/no claim produced by the true-or-false derivation: the candidate
/// option text asserted as the answer to the stem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TFClaim {
    pub stem: String,
    pub candidate: String,
    pub polarity: ClaimPolarity,
}

/// What a correct response to a derived question looks like.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExpectedResponse {
    Label(OptionLabel),
    Yes,
    No,
    NoAnswer,
    LabelSet(BTreeSet<OptionLabel>),
}

impl Serialize for ExpectedResponse {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            ExpectedResponse::Label(l) => l.serialize(serializer),
            ExpectedResponse::Yes => serializer.serialize_str("yes"),
            ExpectedResponse::No => serializer.serialize_str("no"),
            ExpectedResponse::NoAnswer => serializer.serialize_str("no_answer"),
            ExpectedResponse::LabelSet(set) => set.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for ExpectedResponse {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(deserializer)?;
        match value {
            serde_json::Value::String(s) => match s.as_str() {
                "yes" => Ok(ExpectedResponse::Yes),
                "no" => Ok(ExpectedResponse::No),
                "no_answer" => Ok(ExpectedResponse::NoAnswer),
                other => OptionLabel::parse(other)
                    .map(ExpectedResponse::Label)
                    .map_err(D::Error::custom),
            },
            serde_json::Value::Array(entries) => {
                let mut set = BTreeSet::new();
                for entry in entries {
                    let s = entry
                        .as_str()
                        .ok_or_else(|| D::Error::custom("label set entries must be strings"))?;
                    set.insert(OptionLabel::parse(s).map_err(D::Error::custom)?);
                }
                Ok(ExpectedResponse::LabelSet(set))
            }
            other => Err(D::Error::custom(format!(
                "expected response must be a string or array, got {other}"
            ))),
        }
    }
}

/// Payload of a derived question: a full MCQ or a yes/no claim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuestionPayload {
    Item(MCQItem),
    Claim(TFClaim),
}

impl QuestionPayload {
    pub fn item(&self) -> Option<&MCQItem> {
        match self {
            QuestionPayload::Item(item) => Some(item),
            QuestionPayload::Claim(_) => None,
        }
    }

    pub fn claim(&self) -> Option<&TFClaim> {
        match self {
            QuestionPayload::Claim(claim) => Some(claim),
            QuestionPayload::Item(_) => None,
        }
    }
}

/// A question produced by a transform, tagged with its setting and the
/// response that counts as correct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivedQuestion {
    pub parent_id: String,
    pub setting: Setting,
    pub payload: QuestionPayload,
    pub expected: ExpectedResponse,
    pub permutation_index: Option<u32>,
}

impl DerivedQuestion {
    /// Check the per-setting consistency rules relating payload kind and
    /// expected response.
    pub fn validate(&self) -> Result<(), ModelError> {
        match self.setting {
            Setting::TfCorrect | Setting::TfIncorrect => {
                if self.payload.claim().is_none() {
                    return Err(ModelError::PayloadMismatch {
                        setting: self.setting.code(),
                    });
                }
            }
            _ => {
                if self.payload.item().is_none() {
                    return Err(ModelError::PayloadMismatch {
                        setting: self.setting.code(),
                    });
                }
            }
        }
        if let Some(item) = self.payload.item() {
            let in_range = |l: &OptionLabel| l.index() < item.n_options();
            let agrees_with_gold = match &self.expected {
                ExpectedResponse::Label(l) => {
                    in_range(l)
                        && match self.setting {
                            Setting::Original
                            | Setting::Reordered
                            | Setting::Nota
                            | Setting::MisleadingReplaced => item.gold_label() == Some(*l),
                            _ => true,
                        }
                }
                ExpectedResponse::LabelSet(set) => {
                    !set.is_empty() && set.iter().all(in_range)
                }
                _ => true,
            };
            if !agrees_with_gold {
                return Err(ModelError::ExpectedMismatch {
                    setting: self.setting.code(),
                    requirement: "a label (set) within the option range matching the payload gold",
                });
            }
        }
        match self.setting {
            Setting::TfCorrect if self.expected != ExpectedResponse::Yes => {
                Err(ModelError::ExpectedMismatch {
                    setting: "c",
                    requirement: "yes",
                })
            }
            Setting::TfIncorrect if self.expected != ExpectedResponse::No => {
                Err(ModelError::ExpectedMismatch {
                    setting: "d",
                    requirement: "no",
                })
            }
            Setting::NoCorrect if self.expected != ExpectedResponse::NoAnswer => {
                Err(ModelError::ExpectedMismatch {
                    setting: "f",
                    requirement: "no_answer",
                })
            }
            Setting::Nota => {
                let ok = match (&self.expected, self.payload.item()) {
                    (ExpectedResponse::Label(l), Some(item)) => item
                        .option_text(*l)
                        .is_some_and(|t| t == crate::transforms::NOTA_TEXT),
                    _ => false,
                };
                if ok {
                    Ok(())
                } else {
                    Err(ModelError::ExpectedMismatch {
                        setting: "e",
                        requirement: "the label carrying the \"None of the above\" text",
                    })
                }
            }
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMarker {
    Raw,
    Diamond,
    Dagger,
}

/// A collection of items plus the provenance of the filter that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub items: Vec<MCQItem>,
    pub marker: DatasetMarker,
    pub provenance: String,
}

impl Dataset {
    pub fn raw(items: Vec<MCQItem>) -> Self {
        Dataset {
            items,
            marker: DatasetMarker::Raw,
            provenance: String::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// JSONL codec
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: gold index {gold} out of range for {n_options} options")]
    GoldOutOfRange {
        line: usize,
        gold: usize,
        n_options: usize,
    },
    #[error("line {line}: item has {n_options} option(s); at least 2 required")]
    TooFewOptions { line: usize, n_options: usize },
    #[error("line {line}: {source}")]
    InvalidItem { line: usize, source: ModelError },
    #[error("unsupported schema version {0:?} (this build reads {SCHEMA_VERSION})")]
    UnsupportedSchemaVersion(String),
    #[error("header names schema {0:?}, expected {1:?}")]
    SchemaMismatch(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    schema: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    marker: Option<DatasetMarker>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config_digest: Option<String>,
}

fn schema_string(version: &str) -> String {
    format!("{SCHEMA_PREFIX}/{version}")
}

#[derive(Debug, Serialize, Deserialize)]
struct ItemRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    stem: String,
    options: Vec<String>,
    gold: Option<usize>,
    gold_text: Option<String>,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    source: String,
}

impl ItemRecord {
    fn from_item(item: &MCQItem) -> Self {
        ItemRecord {
            id: Some(item.id.clone()),
            stem: item.stem.clone(),
            options: item.options.clone(),
            gold: item.gold_label().map(OptionLabel::index),
            gold_text: item.gold_text().map(str::to_string),
            tags: item.tags.iter().cloned().collect(),
            source: item.source.clone(),
        }
    }

    /// Validate and convert. `strict` enforces the source-dataset invariants
    /// (distinct option texts); derived payloads use the relaxed rule.
    fn into_item(self, line: usize, strict: bool) -> Result<MCQItem, DatasetError> {
        let n_options = self.options.len();
        if n_options < 2 {
            return Err(DatasetError::TooFewOptions { line, n_options });
        }
        let gold = match self.gold {
            Some(index) => Gold::Label(OptionLabel::from_index(index).ok_or(
                DatasetError::GoldOutOfRange {
                    line,
                    gold: index,
                    n_options,
                },
            )?),
            None => Gold::NoAnswer,
        };
        if let Gold::Label(l) = gold {
            if l.index() >= n_options {
                return Err(DatasetError::GoldOutOfRange {
                    line,
                    gold: l.index(),
                    n_options,
                });
            }
            if let Some(ref gold_text) = self.gold_text {
                let option_text = &self.options[l.index()];
                if gold_text != option_text {
                    return Err(DatasetError::InvalidItem {
                        line,
                        source: ModelError::GoldTextMismatch {
                            label: l.symbol(),
                            gold_text: gold_text.clone(),
                            option_text: option_text.clone(),
                        },
                    });
                }
            }
        }
        let id = self.id.unwrap_or_else(|| format!("line-{line}"));
        let tags: BTreeSet<String> = self.tags.into_iter().collect();
        let built = if strict {
            MCQItem::new(id, self.stem, self.options, gold, tags, self.source)
        } else {
            MCQItem::assemble(id, self.stem, self.options, gold, tags, self.source)
        };
        built.map_err(|source| match source {
            ModelError::BadOptionCount(n) if n < 2 => {
                DatasetError::TooFewOptions { line, n_options: n }
            }
            source => DatasetError::InvalidItem { line, source },
        })
    }
}

/// Outcome of a lenient parse: the records that validated plus every error.
pub struct LenientParse {
    pub dataset: Dataset,
    pub errors: Vec<DatasetError>,
}

fn parse_header(first_line: &str, kind: &str, version: &str) -> Result<Option<FileHeader>, DatasetError> {
    let value: serde_json::Value = match serde_json::from_str(first_line) {
        Ok(v) => v,
        Err(_) => return Ok(None), // not a header; let record parsing report it
    };
    if value.get("schema").is_none() {
        return Ok(None);
    }
    let header: FileHeader = serde_json::from_value(value).map_err(|e| {
        DatasetError::MalformedLine {
            line: 1,
            message: e.to_string(),
        }
    })?;
    if header.schema != schema_string(version) {
        return Err(DatasetError::UnsupportedSchemaVersion(header.schema));
    }
    if header.kind != kind {
        return Err(DatasetError::SchemaMismatch(header.kind, kind.to_string()));
    }
    Ok(Some(header))
}

fn parse_dataset_inner(
    reader: impl BufRead,
    schema_version: &str,
    lenient: bool,
) -> Result<LenientParse, DatasetError> {
    if schema_version != SCHEMA_VERSION {
        return Err(DatasetError::UnsupportedSchemaVersion(
            schema_version.to_string(),
        ));
    }
    let mut items = Vec::new();
    let mut errors = Vec::new();
    let mut seen_ids = BTreeSet::new();
    let mut marker = DatasetMarker::Raw;
    let mut provenance = String::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if line_no == 1 {
            if let Some(header) = parse_header(&line, "items", schema_version)? {
                marker = header.marker.unwrap_or(DatasetMarker::Raw);
                provenance = header.provenance.unwrap_or_default();
                continue;
            }
        }
        let parsed = serde_json::from_str::<ItemRecord>(&line)
            .map_err(|e| DatasetError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })
            .and_then(|record| record.into_item(line_no, true))
            .and_then(|item| {
                if seen_ids.contains(&item.id) {
                    Err(DatasetError::DuplicateId {
                        line: line_no,
                        id: item.id.clone(),
                    })
                } else {
                    Ok(item)
                }
            });
        match parsed {
            Ok(item) => {
                seen_ids.insert(item.id.clone());
                items.push(item);
            }
            Err(e) if lenient => errors.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok(LenientParse {
        dataset: Dataset {
            items,
            marker,
            provenance,
        },
        errors,
    })
}

/// Parse a newline-delimited item stream, failing on the first bad record.
pub fn parse_dataset(reader: impl BufRead, schema_version: &str) -> Result<Dataset, DatasetError> {
    parse_dataset_inner(reader, schema_version, false).map(|p| p.dataset)
}

/// Parse leniently: bad records are collected as errors and skipped.
pub fn parse_dataset_lenient(
    reader: impl BufRead,
    schema_version: &str,
) -> Result<LenientParse, DatasetError> {
    parse_dataset_inner(reader, schema_version, true)
}

/// Write a dataset as JSONL: a header object, then one item per line.
/// `parse_dataset(serialize_dataset(d)) == d` field for field.
pub fn serialize_dataset(
    dataset: &Dataset,
    mut writer: impl Write,
    run_config_digest: Option<&str>,
) -> std::io::Result<()> {
    let header = FileHeader {
        schema: schema_string(SCHEMA_VERSION),
        kind: "items".to_string(),
        marker: Some(dataset.marker),
        provenance: Some(dataset.provenance.clone()),
        run_config_digest: run_config_digest.map(str::to_string),
    };
    writeln!(writer, "{}", serde_json::to_string(&header)?)?;
    for item in &dataset.items {
        writeln!(
            writer,
            "{}",
            serde_json::to_string(&ItemRecord::from_item(item))?
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Derived-question codec
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DerivedRecord {
    parent_id: String,
    setting: Setting,
    expected: ExpectedResponse,
    permutation_index: Option<u32>,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    item: Option<ItemRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    claim: Option<TFClaim>,
}

impl DerivedRecord {
    fn from_question(q: &DerivedQuestion) -> Self {
        let (item, claim) = match &q.payload {
            QuestionPayload::Item(item) => (Some(ItemRecord::from_item(item)), None),
            QuestionPayload::Claim(claim) => (None, Some(claim.clone())),
        };
        DerivedRecord {
            parent_id: q.parent_id.clone(),
            setting: q.setting,
            expected: q.expected.clone(),
            permutation_index: q.permutation_index,
            item,
            claim,
        }
    }

    fn into_question(self, line: usize) -> Result<DerivedQuestion, DatasetError> {
        let payload = match (self.item, self.claim) {
            (_, Some(claim)) if self.setting.is_claim() => QuestionPayload::Claim(claim),
            (Some(record), None) if !self.setting.is_claim() => {
                QuestionPayload::Item(record.into_item(line, false)?)
            }
            _ => {
                return Err(DatasetError::MalformedLine {
                    line,
                    message: format!(
                        "setting {:?} carries the wrong payload kind",
                        self.setting.code()
                    ),
                })
            }
        };
        let question = DerivedQuestion {
            parent_id: self.parent_id,
            setting: self.setting,
            payload,
            expected: self.expected,
            permutation_index: self.permutation_index,
        };
        question
            .validate()
            .map_err(|source| DatasetError::InvalidItem { line, source })?;
        Ok(question)
    }
}

impl Serialize for DerivedQuestion {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        DerivedRecord::from_question(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DerivedQuestion {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let record = DerivedRecord::deserialize(deserializer)?;
        record.into_question(0).map_err(D::Error::custom)
    }
}

/// Parse a derived-question JSONL stream.
pub fn parse_derived(
    reader: impl BufRead,
    schema_version: &str,
) -> Result<Vec<DerivedQuestion>, DatasetError> {
    if schema_version != SCHEMA_VERSION {
        return Err(DatasetError::UnsupportedSchemaVersion(
            schema_version.to_string(),
        ));
    }
    let mut questions = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if line_no == 1 && parse_header(&line, "derived", schema_version)?.is_some() {
            continue;
        }
        let record: DerivedRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        questions.push(record.into_question(line_no)?);
    }
    Ok(questions)
}

/// Write derived questions as JSONL with a header line.
pub fn serialize_derived(
    questions: &[DerivedQuestion],
    mut writer: impl Write,
    run_config_digest: Option<&str>,
) -> std::io::Result<()> {
    let header = FileHeader {
        schema: schema_string(SCHEMA_VERSION),
        kind: "derived".to_string(),
        marker: None,
        provenance: None,
        run_config_digest: run_config_digest.map(str::to_string),
    };
    writeln!(writer, "{}", serde_json::to_string(&header)?)?;
    for q in questions {
        writeln!(
            writer,
            "{}",
            serde_json::to_string(&DerivedRecord::from_question(q))?
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(id: &str, options: &[&str], gold: usize) -> MCQItem {
        MCQItem::new(
            id,
            format!("stem for {id}"),
            options.iter().map(|s| s.to_string()).collect(),
            Gold::Label(OptionLabel::from_index(gold).unwrap()),
            BTreeSet::new(),
            "unit",
        )
        .unwrap()
    }

    #[test]
    fn labels_are_consecutive_letters() {
        let labels = OptionLabel::first_n(4);
        let symbols: String = labels.iter().map(|l| l.symbol()).collect();
        assert_eq!(symbols, "ABCD");
        assert_eq!(OptionLabel::parse("C").unwrap().index(), 2);
        assert!(OptionLabel::parse("AB").is_err());
        assert!(OptionLabel::parse("1").is_err());
    }

    #[test]
    fn item_invariants_enforced() {
        assert!(matches!(
            MCQItem::new("x", "s", vec!["a".into()], Gold::NoAnswer, BTreeSet::new(), ""),
            Err(ModelError::BadOptionCount(1))
        ));
        assert!(matches!(
            MCQItem::new(
                "x",
                "s",
                vec!["a".into(), "  a ".into()],
                Gold::NoAnswer,
                BTreeSet::new(),
                ""
            ),
            Err(ModelError::DuplicateOptionText('A', 'B'))
        ));
        assert!(matches!(
            MCQItem::new(
                "x",
                "s",
                vec!["a".into(), "b".into()],
                Gold::Label(OptionLabel::from_index(3).unwrap()),
                BTreeSet::new(),
                ""
            ),
            Err(ModelError::GoldOutOfRange { gold: 3, n_options: 2 })
        ));
    }

    #[test]
    fn parse_single_record() {
        let line = r#"{"id": "q1", "stem": "Capital of France?", "options": ["Paris", "London", "Rome", "Berlin"], "gold": 1, "gold_text": "London", "tags": [], "source": "toy"}"#;
        let ds = parse_dataset(line.as_bytes(), SCHEMA_VERSION).unwrap();
        assert_eq!(ds.items.len(), 1);
        assert_eq!(ds.items[0].gold_label().unwrap().symbol(), 'B');
        assert_eq!(ds.marker, DatasetMarker::Raw);
    }

    #[test]
    fn gold_out_of_range_names_line() {
        let lines = concat!(
            r#"{"id": "q1", "stem": "s", "options": ["a", "b", "c", "d"], "gold": 0, "gold_text": "a", "tags": [], "source": ""}"#,
            "\n",
            r#"{"id": "q2", "stem": "s", "options": ["a", "b", "c", "d"], "gold": 4, "gold_text": null, "tags": [], "source": ""}"#,
        );
        match parse_dataset(lines.as_bytes(), SCHEMA_VERSION) {
            Err(DatasetError::GoldOutOfRange { line: 2, gold: 4, .. }) => {}
            other => panic!("expected GoldOutOfRange at line 2, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let lines = concat!(
            r#"{"id": "q1", "stem": "s", "options": ["a", "b"], "gold": 0, "gold_text": "a", "tags": [], "source": ""}"#,
            "\n",
            r#"{"id": "q1", "stem": "t", "options": ["c", "d"], "gold": 1, "gold_text": "d", "tags": [], "source": ""}"#,
        );
        match parse_dataset(lines.as_bytes(), SCHEMA_VERSION) {
            Err(DatasetError::DuplicateId { line: 2, id }) => assert_eq!(id, "q1"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn too_few_options_named() {
        let line = r#"{"id": "q1", "stem": "s", "options": ["a"], "gold": 0, "gold_text": "a", "tags": [], "source": ""}"#;
        assert!(matches!(
            parse_dataset(line.as_bytes(), SCHEMA_VERSION),
            Err(DatasetError::TooFewOptions { line: 1, n_options: 1 })
        ));
    }

    #[test]
    fn gold_text_mismatch_rejected() {
        let line = r#"{"id": "q1", "stem": "s", "options": ["a", "b"], "gold": 0, "gold_text": "b", "tags": [], "source": ""}"#;
        assert!(matches!(
            parse_dataset(line.as_bytes(), SCHEMA_VERSION),
            Err(DatasetError::InvalidItem { line: 1, .. })
        ));
    }

    #[test]
    fn missing_id_uses_line_number() {
        let line = r#"{"stem": "s", "options": ["a", "b"], "gold": 0, "gold_text": "a"}"#;
        let ds = parse_dataset(line.as_bytes(), SCHEMA_VERSION).unwrap();
        assert_eq!(ds.items[0].id, "line-1");
    }

    #[test]
    fn lenient_mode_collects_errors() {
        let lines = concat!(
            "not json\n",
            r#"{"id": "q1", "stem": "s", "options": ["a", "b"], "gold": 0, "gold_text": "a"}"#,
            "\n",
            r#"{"id": "q2", "stem": "s", "options": ["a"], "gold": 0, "gold_text": "a"}"#,
        );
        let parsed = parse_dataset_lenient(lines.as_bytes(), SCHEMA_VERSION).unwrap();
        assert_eq!(parsed.dataset.items.len(), 1);
        assert_eq!(parsed.errors.len(), 2);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset::raw(vec![]);
        let mut buf = Vec::new();
        serialize_dataset(&ds, &mut buf, None).unwrap();
        let back = parse_dataset(buf.as_slice(), SCHEMA_VERSION).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn unknown_schema_version_rejected() {
        assert!(matches!(
            parse_dataset("".as_bytes(), "v9"),
            Err(DatasetError::UnsupportedSchemaVersion(_))
        ));
    }

    #[test]
    fn misleading_tag_round_trip() {
        let tagged = item("q1", &["a", "b", "c"], 0)
            .with_misleading(OptionLabel::parse("C").unwrap());
        assert_eq!(tagged.misleading_label().unwrap().symbol(), 'C');
        let retagged = tagged.with_misleading(OptionLabel::parse("B").unwrap());
        assert_eq!(retagged.misleading_label().unwrap().symbol(), 'B');
        assert_eq!(
            retagged.tags.iter().filter(|t| t.starts_with("misleading:")).count(),
            1
        );
    }

    #[test]
    fn hundred_items_round_trip_stable_order() {
        let items: Vec<MCQItem> = (0..100)
            .map(|i| {
                let mut it = item(
                    &format!("q{i:03}"),
                    &["alpha", "beta", "gamma", "delta"],
                    i % 4,
                )
                .clone();
                it.tags.insert("knowledge".to_string());
                it
            })
            .collect();
        let ds = Dataset {
            items,
            marker: DatasetMarker::Diamond,
            provenance: "synthetic".to_string(),
        };
        let mut buf = Vec::new();
        serialize_dataset(&ds, &mut buf, Some("digest123")).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 101); // header + 100 items
        let back = parse_dataset(buf.as_slice(), SCHEMA_VERSION).unwrap();
        assert_eq!(back, ds);
    }

    fn arb_item(idx: usize) -> impl Strategy<Value = MCQItem> {
        let option = "[a-z]{1,8}";
        (proptest::collection::btree_set(option, 2..6), "[ -~]{0,30}").prop_map(
            move |(texts, stem)| {
                let options: Vec<String> = texts.into_iter().collect();
                let gold = idx % options.len();
                MCQItem::new(
                    format!("q{idx}"),
                    stem,
                    options,
                    Gold::Label(OptionLabel::from_index(gold).unwrap()),
                    BTreeSet::new(),
                    "prop",
                )
                .unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn round_trip_identity(items in proptest::collection::vec((0usize..1000).prop_flat_map(arb_item), 0..20)) {
            let mut unique = BTreeSet::new();
            let items: Vec<MCQItem> = items
                .into_iter()
                .enumerate()
                .map(|(i, mut it)| {
                    it.id = format!("q{i}");
                    unique.insert(it.id.clone());
                    it
                })
                .collect();
            prop_assume!(unique.len() == items.len());
            let ds = Dataset::raw(items);
            let mut buf = Vec::new();
            serialize_dataset(&ds, &mut buf, None).unwrap();
            let back = parse_dataset(buf.as_slice(), SCHEMA_VERSION).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
