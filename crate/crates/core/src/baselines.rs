//! Voting baselines over a retrieved neighbourhood, and re-ranking of a
//! neighbourhood by the trained representation.
//!
//! Both voters break ties towards [`BinaryLabel::Flagged`]. Weighted voting
//! sums raw cosine scores, so negative scores pull against their label; a
//! label absent from the first `k` hits never wins.

use std::fmt::Write as _;

use crate::dataset::{BinaryLabel, Example};
use crate::embed::Tables;
use crate::error::{Error, Result};
use crate::eval::{confusion, Metrics, Prediction, Predictor};
use crate::index::{Hit, Neighbourhood};
use crate::model::{HeadConfig, HeadParams, Interaction};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoteResult {
    pub label: BinaryLabel,
    pub flagged_weight: f64,
    pub neutral_weight: f64,
    pub k_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteMethod {
    Majority,
    Weighted,
}

impl VoteMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            VoteMethod::Majority => "majority",
            VoteMethod::Weighted => "weighted",
        }
    }

    pub fn vote(self, neighbourhood: &Neighbourhood, k: usize) -> Result<VoteResult> {
        match self {
            VoteMethod::Majority => majority_vote(neighbourhood, k),
            VoteMethod::Weighted => weighted_vote(neighbourhood, k),
        }
    }
}

impl std::str::FromStr for VoteMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(VoteMethod::Majority),
            "weighted" => Ok(VoteMethod::Weighted),
            other => Err(Error::Argument(format!("unknown vote method {other:?}"))),
        }
    }
}

fn vote_with(neighbourhood: &Neighbourhood, k: usize, weight: impl Fn(&Hit) -> f64) -> Result<VoteResult> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if k > neighbourhood.len() {
        return Err(Error::Argument(format!(
            "k = {k} exceeds the {} retrieved neighbours of {:?}",
            neighbourhood.len(),
            neighbourhood.query_id
        )));
    }
    let (mut flagged, mut neutral) = (0.0, 0.0);
    let mut n_flagged = 0;
    for hit in &neighbourhood.hits[..k] {
        match hit.label {
            BinaryLabel::Flagged => {
                flagged += weight(hit);
                n_flagged += 1;
            }
            BinaryLabel::Neutral => neutral += weight(hit),
        }
    }
    // A label with no hits cannot win, even against a negative sum.
    let label = match n_flagged {
        0 => BinaryLabel::Neutral,
        n if n == k => BinaryLabel::Flagged,
        _ if flagged >= neutral => BinaryLabel::Flagged,
        _ => BinaryLabel::Neutral,
    };
    Ok(VoteResult {
        label,
        flagged_weight: flagged,
        neutral_weight: neutral,
        k_used: k,
    })
}

pub fn majority_vote(neighbourhood: &Neighbourhood, k: usize) -> Result<VoteResult> {
    vote_with(neighbourhood, k, |_| 1.0)
}

pub fn weighted_vote(neighbourhood: &Neighbourhood, k: usize) -> Result<VoteResult> {
    vote_with(neighbourhood, k, |h| h.score)
}

/// A voter usable with [`crate::eval::evaluate`].
#[derive(Debug, Clone, Copy)]
pub struct VotePredictor {
    pub method: VoteMethod,
    pub k: usize,
}

impl Predictor for VotePredictor {
    fn describe(&self) -> String {
        format!("{}-vote k={}", self.method.as_str(), self.k)
    }

    fn predict(&self, _query: &Example, neighbourhood: &Neighbourhood) -> Result<Prediction> {
        Ok(Prediction::label_only(self.method.vote(neighbourhood, self.k)?.label))
    }
}

/// Re-sorts hits by descending BE score between projected query and hit
/// vectors (head table), ties by ascending id. Scores become BE scores.
pub fn rerank(
    neighbourhood: &Neighbourhood,
    cfg: &HeadConfig,
    params: &HeadParams,
    tables: &Tables,
) -> Result<Neighbourhood> {
    if let Interaction::Pair { .. } = cfg.interaction {
        return Err(Error::Argument("re-ranking needs a bi-encoder head".into()));
    }
    let head = tables.head();
    let q = head.require(&neighbourhood.query_id)?;
    let mut hits = neighbourhood
        .hits
        .iter()
        .map(|h| {
            Ok(Hit {
                id: h.id.clone(),
                score: params.be_score(q, head.require(&h.id)?),
                label: h.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    Ok(Neighbourhood {
        query_id: neighbourhood.query_id.clone(),
        hits,
    })
}

pub fn rerank_all(
    neighbourhoods: &[Neighbourhood],
    cfg: &HeadConfig,
    params: &HeadParams,
    tables: &Tables,
    exec: Execution,
) -> Result<Vec<Neighbourhood>> {
    par::try_map(exec, neighbourhoods, |n| rerank(n, cfg, params, tables))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub metrics: Metrics,
}

/// Voting metrics at each `k`, one neighbourhood per gold label.
pub fn sweep_k(
    neighbourhoods: &[Neighbourhood],
    method: VoteMethod,
    ks: &[usize],
    gold: &[BinaryLabel],
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if neighbourhoods.len() != gold.len() {
        return Err(Error::Argument(format!(
            "{} neighbourhoods for {} gold labels",
            neighbourhoods.len(),
            gold.len()
        )));
    }
    ks.iter()
        .map(|&k| {
            let votes = par::try_map(exec, neighbourhoods, |n| method.vote(n, k).map(|v| v.label))?;
            Ok(SweepRow {
                k,
                metrics: confusion(&votes, gold)?.metrics(),
            })
        })
        .collect()
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("k\tprecision\trecall\tf1\n");
    for r in rows {
        let m = r.metrics;
        writeln!(s, "{}\t{:.4}\t{:.4}\t{:.4}", r.k, m.precision, m.recall, m.f1).unwrap();
    }
    s
}

/// Parses a comma-separated list of positive integers.
pub fn parse_ks(text: &str) -> Result<Vec<usize>> {
    let ks = text
        .split(',')
        .map(|t| match t.trim().parse::<usize>() {
            Ok(k) if k > 0 => Ok(k),
            _ => Err(Error::Argument(format!("bad neighbour count {t:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if ks.is_empty() {
        return Err(Error::Argument("empty k list".into()));
    }
    Ok(ks)
}
