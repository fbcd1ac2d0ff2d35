//! Labelled corpora: loading, binary label mapping and deterministic splits.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::fnv1a64_seeded;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryLabel {
    Neutral,
    Flagged,
}

impl BinaryLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            BinaryLabel::Neutral => "neutral",
            BinaryLabel::Flagged => "flagged",
        }
    }

    /// Class index used by the classifier head: 0 = neutral, 1 = flagged.
    pub fn class_index(self) -> usize {
        match self {
            BinaryLabel::Neutral => 0,
            BinaryLabel::Flagged => 1,
        }
    }

    pub fn is_flagged(self) -> bool {
        self == BinaryLabel::Flagged
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BinaryLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neutral" => Ok(BinaryLabel::Neutral),
            "flagged" => Ok(BinaryLabel::Flagged),
            other => Err(Error::Validation(format!("unknown label {other:?}"))),
        }
    }
}

/// Fine-grained labels that count as flagged content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    flagged: BTreeSet<String>,
}

impl Default for LabelVocabulary {
    fn default() -> Self {
        Self::new([
            "toxic",
            "severe_toxic",
            "obscene",
            "threat",
            "insult",
            "identity_hate",
        ])
    }
}

impl LabelVocabulary {
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            flagged: labels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, label: &str) -> bool {
        self.flagged.contains(label)
    }

    /// Flagged iff at least one vocabulary label is present. `neutral` is
    /// accepted and carries no signal; anything else is rejected.
    pub fn map_fine_to_binary<S: AsRef<str>>(&self, raw_labels: &[S]) -> Result<BinaryLabel> {
        let mut flagged = false;
        for label in raw_labels {
            let label = label.as_ref();
            if self.contains(label) {
                flagged = true;
            } else if label != "neutral" {
                return Err(Error::Validation(format!(
                    "label {label:?} is not in the fine-grained vocabulary"
                )));
            }
        }
        Ok(if flagged {
            BinaryLabel::Flagged
        } else {
            BinaryLabel::Neutral
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub lang: String,
    pub raw_labels: BTreeSet<String>,
    pub label: BinaryLabel,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        lang: impl Into<String>,
        label: BinaryLabel,
    ) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            lang: lang.into(),
            raw_labels: BTreeSet::new(),
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetRole {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub flagged: usize,
    pub neutral: usize,
}

impl LabelCounts {
    fn tally<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let mut counts = Self::default();
        for ex in examples {
            match ex.label {
                BinaryLabel::Flagged => counts.flagged += 1,
                BinaryLabel::Neutral => counts.neutral += 1,
            }
        }
        counts
    }

    pub fn total(&self) -> usize {
        self.flagged + self.neutral
    }
}

/// An ordered, validated collection of examples. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    name: String,
    role: DatasetRole,
    examples: Vec<Example>,
    counts: LabelCounts,
}

impl Dataset {
    /// Validates id uniqueness. Target datasets keep only binary labels.
    pub fn new(name: impl Into<String>, role: DatasetRole, mut examples: Vec<Example>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if ex.id.is_empty() {
                return Err(Error::Validation("example with empty id".into()));
            }
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {:?}", ex.id)));
            }
        }
        if role == DatasetRole::Target {
            for ex in &mut examples {
                ex.raw_labels.clear();
            }
        }
        let counts = LabelCounts::tally(&examples);
        Ok(Self {
            name: name.into(),
            role,
            examples,
            counts,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> DatasetRole {
        self.role
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn counts(&self) -> LabelCounts {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|ex| ex.id == id)
    }

    /// Reads one JSON record per line. The dataset name is the file stem.
    pub fn load_jsonl(path: &Path, role: DatasetRole, vocab: &LabelVocabulary) -> Result<Self> {
        Self::load_records(path, role, vocab, true)
    }

    /// Loads prediction inputs as a target dataset. Records without any label
    /// get a neutral placeholder, which inference never reads.
    pub fn load_queries_jsonl(path: &Path, vocab: &LabelVocabulary) -> Result<Self> {
        Self::load_records(path, DatasetRole::Target, vocab, false)
    }

    fn load_records(path: &Path, role: DatasetRole, vocab: &LabelVocabulary, require_label: bool) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            };
            let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let raw_labels: BTreeSet<String> = record.raw_labels.unwrap_or_default().into_iter().collect();
            let label = match (&record.label, raw_labels.is_empty()) {
                (Some(label), _) => label.parse(),
                (None, false) => vocab.map_fine_to_binary(&raw_labels.iter().collect::<Vec<_>>()),
                (None, true) if !require_label => Ok(BinaryLabel::Neutral),
                (None, true) => Err(Error::Validation("record has neither label nor raw_labels".into())),
            }
            .map_err(|e| parse_err(e.to_string()))?;
            examples.push(Example {
                id: record.id,
                text: record.text,
                lang: record.lang,
                raw_labels,
                label,
            });
        }
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string();
        Self::new(name, role, examples)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for ex in &self.examples {
            let record = Record {
                id: ex.id.clone(),
                text: ex.text.clone(),
                lang: ex.lang.clone(),
                label: Some(ex.label.as_str().to_string()),
                raw_labels: (!ex.raw_labels.is_empty()).then(|| ex.raw_labels.iter().cloned().collect()),
            };
            let line = serde_json::to_string(&record).expect("record serialization is infallible");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Partitions into (train, dev, test). Examples are ranked by a seeded
    /// hash of their id and cut at the rounded cumulative fractions; each
    /// part keeps the original dataset order.
    pub fn split(&self, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
        if self.is_empty() {
            return Err(Error::Argument("cannot split an empty dataset".into()));
        }
        let n = self.len();
        let mut order: Vec<(u64, usize)> = self
            .examples
            .iter()
            .enumerate()
            .map(|(i, ex)| (mix64(fnv1a64_seeded(ex.id.as_bytes(), spec.seed)), i))
            .collect();
        order.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then_with(|| self.examples[a.1].id.cmp(&self.examples[b.1].id))
        });

        let n_train = ((n as f64) * spec.train).round() as usize;
        let n_train_dev = (((n as f64) * (spec.train + spec.dev)).round() as usize).max(n_train);
        let (n_train, n_train_dev) = (n_train.min(n), n_train_dev.min(n));

        let mut bucket = vec![0u8; n];
        for (rank, &(_, i)) in order.iter().enumerate() {
            bucket[i] = if rank < n_train {
                0
            } else if rank < n_train_dev {
                1
            } else {
                2
            };
        }
        let part = |b: u8, suffix: &str| {
            let examples = self
                .examples
                .iter()
                .zip(&bucket)
                .filter(|(_, &x)| x == b)
                .map(|(ex, _)| ex.clone())
                .collect();
            Dataset::new(format!("{}_{suffix}", self.name), self.role, examples)
        };
        Ok((part(0, "train")?, part(1, "dev")?, part(2, "test")?))
    }
}

/// splitmix64 finaliser. FNV-1a alone leaves the high bits of ids that
/// differ only in trailing characters nearly identical.
fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, dev: f64, test: f64, seed: u64) -> Result<Self> {
        if [train, dev, test].iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::Argument("split fractions must be finite and non-negative".into()));
        }
        if (train + dev + test - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "split fractions sum to {}, expected 1",
                train + dev + test
            )));
        }
        Ok(Self { train, dev, test, seed })
    }
}
