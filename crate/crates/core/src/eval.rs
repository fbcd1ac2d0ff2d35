//! Flagged-class metrics, evaluation drivers and reports.
//!
//! Reports are written as TOML with a fixed layout: `dataset`, `model`, one
//! `[lang."<code>"]` table per language in code order, `[overall]`, then an
//! optional `[[example]]` array with per-query explanations. Metrics carry
//! four decimals; attention and agreement values six. Confusion counts are
//! stored alongside so a report reads back exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{BinaryLabel, Dataset, Example};
use crate::embed::Tables;
use crate::error::{Error, Result};
use crate::index::{Index, Neighbourhood};
use crate::model::{HeadConfig, HeadParams};
use crate::par::{self, Execution};
use crate::train::BatchInputs;

/// Confusion counts with flagged as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn record(&mut self, predicted: BinaryLabel, gold: BinaryLabel) {
        match (predicted.is_flagged(), gold.is_flagged()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> Metrics {
        f1_flagged(self)
    }
}

pub fn confusion(predicted: &[BinaryLabel], gold: &[BinaryLabel]) -> Result<ConfusionCounts> {
    if predicted.len() != gold.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} gold labels",
            predicted.len(),
            gold.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Argument("confusion over zero examples".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in predicted.iter().zip(gold) {
        c.record(p, g);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Zero denominators give zero, never NaN.
pub fn f1_flagged(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        precision,
        recall,
        f1,
    }
}

/// One prediction, with optional explanation data.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: BinaryLabel,
    pub attention: Option<Vec<f64>>,
    pub agreement: Option<Vec<f64>>,
}

impl Prediction {
    pub fn label_only(label: BinaryLabel) -> Self {
        Self {
            label,
            attention: None,
            agreement: None,
        }
    }
}

/// Anything that labels a query from its retrieved neighbourhood.
pub trait Predictor: Sync {
    fn describe(&self) -> String;
    fn predict(&self, query: &Example, neighbourhood: &Neighbourhood) -> Result<Prediction>;
}

/// The trained head as a predictor. Reads head inputs from `tables`.
pub struct HeadPredictor<'a> {
    pub config: HeadConfig,
    pub params: &'a HeadParams,
    pub tables: &'a Tables,
}

impl Predictor for HeadPredictor<'_> {
    fn describe(&self) -> String {
        let kind = match self.config.interaction {
            crate::model::Interaction::BiEncoder => "be-knn+",
            crate::model::Interaction::Pair { .. } => "ce-knn+",
        };
        format!("{kind} k={} lambda={}", self.config.k, self.config.lambda)
    }

    fn predict(&self, query: &Example, neighbourhood: &Neighbourhood) -> Result<Prediction> {
        let inputs = BatchInputs::gather(&query.id, neighbourhood, self.tables, &self.config)?;
        let trace = inputs.forward(self.params, &self.config)?;
        Ok(Prediction {
            label: trace.prediction(),
            attention: Some(trace.attention.clone()),
            agreement: Some(trace.agreement_probs()),
        })
    }
}

/// Retrieves `k` neighbours for every example using the retrieval table.
pub fn retrieve_all(
    dataset: &Dataset,
    index: &Index,
    tables: &Tables,
    k: usize,
    exclude_self: bool,
    exec: Execution,
) -> Result<Vec<Neighbourhood>> {
    let queries = dataset
        .examples()
        .iter()
        .map(|ex| Ok((ex.id.as_str(), tables.retrieval.require(&ex.id)?)))
        .collect::<Result<Vec<_>>>()?;
    index.query_batch(&queries, k, exclude_self, exec)
}

/// Retrieves `k` neighbours per example, predicts, and aggregates metrics.
pub fn evaluate(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    index: &Index,
    tables: &Tables,
    k: usize,
    explain: bool,
    exec: Execution,
) -> Result<Report> {
    let neighbourhoods = retrieve_all(dataset, index, tables, k, false, exec)?;
    evaluate_neighbourhoods(predictor, dataset, &neighbourhoods, explain, exec)
}

/// Like [`evaluate`] with neighbourhoods already retrieved, one per example.
pub fn evaluate_neighbourhoods(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    neighbourhoods: &[Neighbourhood],
    explain: bool,
    exec: Execution,
) -> Result<Report> {
    if neighbourhoods.len() != dataset.len() {
        return Err(Error::Argument(format!(
            "{} neighbourhoods for {} examples",
            neighbourhoods.len(),
            dataset.len()
        )));
    }
    let pairs: Vec<(&Example, &Neighbourhood)> = dataset.examples().iter().zip(neighbourhoods).collect();
    let predictions = par::try_map(exec, &pairs, |(ex, n)| predictor.predict(ex, n))?;
    let mut report = Report::new(dataset.name(), predictor.describe());
    for ((ex, n), pred) in pairs.iter().zip(&predictions) {
        report.record(ex, pred.label);
        if explain {
            report.examples.push(ExampleRecord::new(ex, n, pred));
        }
    }
    Ok(report)
}

/// Per-query explanation: neighbours, attention and agreement probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleRecord {
    pub id: String,
    pub gold: BinaryLabel,
    pub predicted: BinaryLabel,
    pub neighbours: Vec<String>,
    pub attention: Vec<f64>,
    pub agreement: Vec<f64>,
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

impl ExampleRecord {
    /// Values are rounded to six decimals, the precision they are written at.
    pub fn new(ex: &Example, neighbourhood: &Neighbourhood, pred: &Prediction) -> Self {
        let round = |v: &Option<Vec<f64>>| v.as_deref().unwrap_or(&[]).iter().copied().map(round6).collect();
        Self {
            id: ex.id.clone(),
            gold: ex.label,
            predicted: pred.label,
            neighbours: neighbourhood.hits.iter().map(|h| h.id.clone()).collect(),
            attention: round(&pred.attention),
            agreement: round(&pred.agreement),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub dataset: String,
    pub model: String,
    pub languages: BTreeMap<String, ConfusionCounts>,
    pub examples: Vec<ExampleRecord>,
}

impl Report {
    pub fn new(dataset: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            model: model.into(),
            languages: BTreeMap::new(),
            examples: Vec::new(),
        }
    }

    pub fn record(&mut self, ex: &Example, predicted: BinaryLabel) {
        self.languages.entry(ex.lang.clone()).or_default().record(predicted, ex.label);
    }

    /// Micro-averaged counts over all languages.
    pub fn overall(&self) -> ConfusionCounts {
        let mut total = ConfusionCounts::default();
        for c in self.languages.values() {
            total.merge(c);
        }
        total
    }

    pub fn metrics(&self) -> Metrics {
        self.overall().metrics()
    }

    pub fn to_toml_string(&self) -> String {
        let mut s = String::new();
        let q = |x: &str| toml::Value::String(x.to_string()).to_string();
        let counts_block = |s: &mut String, c: &ConfusionCounts| {
            let m = c.metrics();
            writeln!(s, "precision = {:.4}", m.precision).unwrap();
            writeln!(s, "recall = {:.4}", m.recall).unwrap();
            writeln!(s, "f1 = {:.4}", m.f1).unwrap();
            writeln!(s, "support = {}", c.total()).unwrap();
            writeln!(s, "tp = {}\nfp = {}\nfn = {}\ntn = {}", c.tp, c.fp, c.fn_, c.tn).unwrap();
        };
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ");
        writeln!(s, "dataset = {}", q(&self.dataset)).unwrap();
        writeln!(s, "model = {}", q(&self.model)).unwrap();
        for (lang, c) in &self.languages {
            writeln!(s, "\n[lang.{}]", q(lang)).unwrap();
            counts_block(&mut s, c);
        }
        writeln!(s, "\n[overall]").unwrap();
        counts_block(&mut s, &self.overall());
        for ex in &self.examples {
            writeln!(s, "\n[[example]]").unwrap();
            writeln!(s, "id = {}", q(&ex.id)).unwrap();
            writeln!(s, "gold = {}", q(ex.gold.as_str())).unwrap();
            writeln!(s, "predicted = {}", q(ex.predicted.as_str())).unwrap();
            let ids: Vec<String> = ex.neighbours.iter().map(|n| q(n)).collect();
            writeln!(s, "neighbours = [{}]", ids.join(", ")).unwrap();
            writeln!(s, "attention = [{}]", list(&ex.attention)).unwrap();
            writeln!(s, "agreement = [{}]", list(&ex.agreement)).unwrap();
        }
        s
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("report: {m}"));
        let table: toml::Table = text.parse().map_err(|e| Error::Format(format!("report: {e}")))?;
        let string = |t: &toml::Table, key: &str| {
            t.get(key)
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("missing string {key}")))
        };
        let count = |t: &toml::Table, key: &str| {
            t.get(key)
                .and_then(|v| v.as_integer())
                .and_then(|v| usize::try_from(v).ok())
                .ok_or_else(|| bad(&format!("missing count {key}")))
        };
        let counts = |t: &toml::Table| -> Result<ConfusionCounts> {
            Ok(ConfusionCounts {
                tp: count(t, "tp")?,
                fp: count(t, "fp")?,
                fn_: count(t, "fn")?,
                tn: count(t, "tn")?,
            })
        };
        let floats = |t: &toml::Table, key: &str| -> Result<Vec<f64>> {
            t.get(key)
                .and_then(|v| v.as_array())
                .ok_or_else(|| bad(&format!("missing array {key}")))?
                .iter()
                .map(|v| v.as_float().ok_or_else(|| bad(&format!("non-float in {key}"))))
                .collect()
        };

        let mut report = Report::new(string(&table, "dataset")?, string(&table, "model")?);
        if let Some(langs) = table.get("lang") {
            let langs = langs.as_table().ok_or_else(|| bad("lang must be a table"))?;
            for (lang, v) in langs {
                let t = v.as_table().ok_or_else(|| bad("language entry must be a table"))?;
                report.languages.insert(lang.clone(), counts(t)?);
            }
        }
        if let Some(examples) = table.get("example") {
            for v in examples.as_array().ok_or_else(|| bad("example must be an array"))? {
                let t = v.as_table().ok_or_else(|| bad("example entry must be a table"))?;
                let neighbours = t
                    .get("neighbours")
                    .and_then(|v| v.as_array())
                    .ok_or_else(|| bad("missing neighbours"))?
                    .iter()
                    .map(|v| v.as_str().map(str::to_string).ok_or_else(|| bad("neighbour id must be a string")))
                    .collect::<Result<_>>()?;
                report.examples.push(ExampleRecord {
                    id: string(t, "id")?,
                    gold: string(t, "gold")?.parse()?,
                    predicted: string(t, "predicted")?.parse()?,
                    neighbours,
                    attention: floats(t, "attention")?,
                    agreement: floats(t, "agreement")?,
                });
            }
        }
        let overall = table
            .get("overall")
            .and_then(|v| v.as_table())
            .ok_or_else(|| bad("missing overall"))?;
        if counts(overall)? != report.overall() {
            return Err(bad("overall counts disagree with per-language counts"));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}
