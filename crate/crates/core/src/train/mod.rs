//! Multi-task optimisation of the head.
//!
//! The objective for one query with `k` neighbours is
//! `(1 - λ) · L_agree + λ · L_class`, where `L_agree` is the mean
//! cross-entropy of the per-neighbour label-agreement logits and `L_class`
//! the cross-entropy of the query classification logits.

mod grad;
mod optim;
mod trainer;

pub use grad::{backward, gradient_check, random_gradcheck, GradCheckReport, GradCheckSettings};
pub use optim::{Optimizer, OptimizerState};
pub use trainer::{
    accumulate, history_tsv, mean_loss, write_history, HistoryRecord, TrainConfig, TrainOutcome, Trainer,
};

use crate::dataset::{BinaryLabel, Example};
use crate::embed::Tables;
use crate::error::{Error, Result};
use crate::index::Neighbourhood;
use crate::model::{cross_entropy, ForwardTrace, HeadConfig, HeadParams, Interaction, Matrix};

/// `targets[j]` is true iff neighbour `j` shares the query's label.
pub fn agreement_targets(query: BinaryLabel, neighbours: &[BinaryLabel]) -> Vec<bool> {
    neighbours.iter().map(|&n| n == query).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub agreement: f64,
    pub classification: f64,
}

pub fn loss(trace: &ForwardTrace, targets: &[bool], query: BinaryLabel, lambda: f64) -> LossParts {
    let k = trace.agree_logits.rows();
    debug_assert_eq!(targets.len(), k);
    let agreement = (0..k)
        .map(|j| cross_entropy(trace.agree_logits.row(j), usize::from(targets[j])))
        .sum::<f64>()
        / k as f64;
    let classification = cross_entropy(&trace.class_logits, query.class_index());
    LossParts {
        total: (1.0 - lambda) * agreement + lambda * classification,
        agreement,
        classification,
    }
}

/// Head inputs for one query.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchInputs {
    Vectors {
        query: Vec<f64>,
        neighbours: Vec<Vec<f64>>,
    },
    Features(Matrix),
}

impl BatchInputs {
    /// Head inputs for the first `cfg.k` hits of `neighbourhood`, read from
    /// the head table, or from the pair table for a pair-feature head.
    pub fn gather(query_id: &str, neighbourhood: &Neighbourhood, tables: &Tables, cfg: &HeadConfig) -> Result<Self> {
        if neighbourhood.len() < cfg.k {
            return Err(Error::Argument(format!(
                "query {query_id:?} has {} neighbours, head needs {}",
                neighbourhood.len(),
                cfg.k
            )));
        }
        let hits = &neighbourhood.hits[..cfg.k];
        Ok(match cfg.interaction {
            Interaction::BiEncoder => {
                let head = tables.head();
                BatchInputs::Vectors {
                    query: head.require(query_id)?.to_vec(),
                    neighbours: hits
                        .iter()
                        .map(|h| head.require(&h.id).map(<[f64]>::to_vec))
                        .collect::<Result<_>>()?,
                }
            }
            Interaction::Pair { dim } => {
                let pairs = tables
                    .pairs
                    .as_ref()
                    .ok_or_else(|| Error::Argument("pair-feature head needs a pair table".into()))?;
                let mut h = Matrix::zeros(cfg.k, dim);
                for (j, hit) in hits.iter().enumerate() {
                    let key = Tables::pair_key(query_id, &hit.id);
                    let v = pairs.get(&key).ok_or_else(|| {
                        Error::Argument(format!("no pair vector for ({query_id:?}, {:?})", hit.id))
                    })?;
                    if v.len() != dim {
                        return Err(Error::Argument(format!("pair vectors have dimension {}, head expects {dim}", v.len())));
                    }
                    h.row_mut(j).copy_from_slice(v);
                }
                BatchInputs::Features(h)
            }
        })
    }

    pub fn forward(&self, params: &HeadParams, cfg: &HeadConfig) -> Result<ForwardTrace> {
        match self {
            BatchInputs::Vectors { query, neighbours } => {
                let refs: Vec<&[f64]> = neighbours.iter().map(Vec::as_slice).collect();
                params.forward(cfg, query, &refs)
            }
            BatchInputs::Features(h) => params.forward_features(cfg, h.clone()),
        }
    }
}

/// One query with its neighbourhood and supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub query_id: String,
    pub neighbourhood: Neighbourhood,
    pub inputs: BatchInputs,
    pub agreement_targets: Vec<bool>,
    pub query_target: BinaryLabel,
}

impl Batch {
    /// Uses the first `cfg.k` hits of `neighbourhood`.
    pub fn assemble(query: &Example, neighbourhood: &Neighbourhood, tables: &Tables, cfg: &HeadConfig) -> Result<Self> {
        let inputs = BatchInputs::gather(&query.id, neighbourhood, tables, cfg)?;
        let neighbourhood = neighbourhood.truncated(cfg.k);
        Ok(Self {
            query_id: query.id.clone(),
            agreement_targets: agreement_targets(query.label, &neighbourhood.labels()),
            neighbourhood,
            inputs,
            query_target: query.label,
        })
    }

    pub fn forward(&self, params: &HeadParams, cfg: &HeadConfig) -> Result<ForwardTrace> {
        self.inputs.forward(params, cfg)
    }

    pub fn loss(&self, params: &HeadParams, cfg: &HeadConfig) -> Result<LossParts> {
        let trace = self.forward(params, cfg)?;
        Ok(loss(&trace, &self.agreement_targets, self.query_target, cfg.lambda))
    }
}
