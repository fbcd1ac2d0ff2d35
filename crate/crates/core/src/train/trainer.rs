use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, Batch, Optimizer, OptimizerState};
use crate::dataset::{BinaryLabel, Dataset};
use crate::embed::Tables;
use crate::error::{Error, Result};
use crate::eval::{confusion, Metrics};
use crate::index::Index;
use crate::model::{save_checkpoint, HeadConfig, HeadParams};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Queries whose gradients are averaged into one optimiser step.
    pub accumulation: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Minimum dev-F1 gain that resets the patience counter.
    pub early_stop_delta: f64,
    /// Evaluations without such a gain before stopping.
    pub early_stop_patience: usize,
    /// Dev evaluations per epoch.
    pub eval_every: usize,
    /// Write `ckpt_step{N}.nfp` every this many steps; 0 disables.
    pub checkpoint_every_steps: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            accumulation: 8,
            lr: 1e-3,
            optimizer: Optimizer::adam(),
            early_stop_delta: 0.001,
            early_stop_patience: 4,
            eval_every: 4,
            checkpoint_every_steps: 160,
            seed: 0,
            exec: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.accumulation == 0 {
            return bad("accumulation must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(self.early_stop_delta.is_finite() && self.early_stop_delta >= 0.0) {
            return bad("early-stop delta must be non-negative");
        }
        Ok(())
    }
}

/// One evaluation point: mean training loss since the previous one, plus
/// dev precision/recall/F1 when a dev set is present.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best dev F1, or the final ones without dev data.
    pub best_params: HeadParams,
    pub final_params: HeadParams,
    pub history: Vec<HistoryRecord>,
    pub steps: usize,
    pub best_dev_f1: Option<f64>,
    pub stopped_early: bool,
}

pub struct Trainer {
    pub head: HeadConfig,
    pub config: TrainConfig,
    init: Option<HeadParams>,
    checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(head: HeadConfig, config: TrainConfig) -> Self {
        Self {
            head,
            config,
            init: None,
            checkpoint_dir: None,
        }
    }

    /// Start from these parameters instead of a fresh initialisation.
    pub fn with_init(mut self, params: HeadParams) -> Self {
        self.init = Some(params);
        self
    }

    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Retrieves `k` neighbours per query and assembles training batches.
    pub fn prepare_batches(
        &self,
        queries: &Dataset,
        index: &Index,
        tables: &Tables,
        exclude_self: bool,
    ) -> Result<Vec<Batch>> {
        let neighbourhoods =
            crate::eval::retrieve_all(queries, index, tables, self.head.k, exclude_self, self.config.exec)?;
        let pairs: Vec<_> = queries.examples().iter().zip(&neighbourhoods).collect();
        par::try_map(self.config.exec, &pairs, |(ex, n)| Batch::assemble(ex, n, tables, &self.head))
    }

    /// Trains on `train` queries against `index`, selecting by F1 on `dev`.
    pub fn fit(&self, train: &Dataset, dev: &Dataset, index: &Index, tables: &Tables) -> Result<TrainOutcome> {
        let train_batches = self.prepare_batches(train, index, tables, false)?;
        let dev_batches = self.prepare_batches(dev, index, tables, false)?;
        self.run(&train_batches, Some(&dev_batches))
    }

    /// Pre-trains on the source set itself, each query retrieving from the
    /// source index with itself excluded.
    pub fn pretrain_cli(
        &self,
        source: &Dataset,
        index: &Index,
        tables: &Tables,
        dev: Option<&Dataset>,
    ) -> Result<TrainOutcome> {
        let train_batches = self.prepare_batches(source, index, tables, true)?;
        let dev_batches = dev.map(|d| self.prepare_batches(d, index, tables, true)).transpose()?;
        self.run(&train_batches, dev_batches.as_deref())
    }

    pub fn run(&self, train: &[Batch], dev: Option<&[Batch]>) -> Result<TrainOutcome> {
        let cfg = &self.config;
        cfg.validate()?;
        self.head.validate()?;
        if train.is_empty() {
            return Err(Error::Argument("no training queries".into()));
        }
        if dev.is_some_and(<[Batch]>::is_empty) {
            return Err(Error::Argument("empty dev set".into()));
        }
        let mut params = match &self.init {
            Some(p) => {
                p.check_shapes(&self.head)?;
                p.clone()
            }
            None => HeadParams::init(&self.head)?,
        };
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }

        let mut state = OptimizerState::new(&params);
        let mut history = Vec::new();
        let mut best: Option<(f64, HeadParams)> = None;
        let mut stale = 0usize;
        let mut stopped_early = false;
        let mut step = 0usize;
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        let steps_per_epoch = train.len().div_ceil(cfg.accumulation);

        'epochs: for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
            for (s, window) in order.chunks(cfg.accumulation).enumerate() {
                let batch: Vec<&Batch> = window.iter().map(|&i| &train[i]).collect();
                let (grads, losses) = accumulate(&params, &self.head, &batch, cfg.exec)?;
                loss_sum += losses.iter().sum::<f64>();
                loss_count += losses.len();
                state.apply(&mut params, &grads, cfg.lr, cfg.optimizer)?;
                step += 1;

                if cfg.checkpoint_every_steps > 0 && step.is_multiple_of(cfg.checkpoint_every_steps) {
                    self.write_checkpoint(&format!("ckpt_step{step}.nfp"), &params)?;
                }

                let (e, n) = (cfg.eval_every, steps_per_epoch);
                if (s + 1) * e / n == s * e / n {
                    continue;
                }
                let dev_metrics = dev.map(|d| dev_metrics(&params, &self.head, d, cfg.exec)).transpose()?;
                history.push(HistoryRecord {
                    step,
                    epoch: epoch + 1,
                    train_loss: loss_sum / loss_count as f64,
                    dev: dev_metrics,
                });
                (loss_sum, loss_count) = (0.0, 0);
                let Some(m) = dev_metrics else { continue };
                let prev = best.as_ref().map(|(f, _)| *f);
                if prev.is_none_or(|b| m.f1 > b) {
                    best = Some((m.f1, params.clone()));
                    self.write_checkpoint("best.nfp", &params)?;
                }
                if prev.is_none_or(|b| m.f1 > b + cfg.early_stop_delta) {
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.early_stop_patience {
                        stopped_early = true;
                        break 'epochs;
                    }
                }
            }
        }

        let (best_dev_f1, best_params) = match best {
            Some((f, p)) => (Some(f), p),
            None => (None, params.clone()),
        };
        Ok(TrainOutcome {
            best_params,
            final_params: params,
            history,
            steps: step,
            best_dev_f1,
            stopped_early,
        })
    }

    fn write_checkpoint(&self, name: &str, params: &HeadParams) -> Result<()> {
        match &self.checkpoint_dir {
            Some(dir) => save_checkpoint(&dir.join(name), &self.head, params),
            None => Ok(()),
        }
    }
}

/// Mean gradient over `batches`, plus each batch's loss in input order.
/// Per-query gradients may be computed in parallel; they are summed in input
/// order so the result does not depend on the execution mode.
pub fn accumulate(
    params: &HeadParams,
    cfg: &HeadConfig,
    batches: &[&Batch],
    exec: Execution,
) -> Result<(HeadParams, Vec<f64>)> {
    if batches.is_empty() {
        return Err(Error::Argument("cannot accumulate over zero queries".into()));
    }
    let results = par::try_map(exec, batches, |b| backward(params, cfg, b))?;
    let mut total = HeadParams::zeros(cfg);
    let mut losses = Vec::with_capacity(results.len());
    for (g, parts) in &results {
        if !parts.total.is_finite() {
            return Err(Error::Training(format!("non-finite loss {}", parts.total)));
        }
        losses.push(parts.total);
        for (t, gt) in total.tensors_mut().into_iter().zip(g.tensors()) {
            for (x, gx) in t.as_mut_slice().iter_mut().zip(gt.as_slice()) {
                *x += gx;
            }
        }
    }
    let scale = 1.0 / batches.len() as f64;
    for t in total.tensors_mut() {
        t.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
    }
    Ok((total, losses))
}

pub fn mean_loss(params: &HeadParams, cfg: &HeadConfig, batches: &[Batch], exec: Execution) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Argument("mean loss over zero queries".into()));
    }
    let losses = par::try_map(exec, batches, |b| b.loss(params, cfg).map(|l| l.total))?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn dev_metrics(params: &HeadParams, cfg: &HeadConfig, dev: &[Batch], exec: Execution) -> Result<Metrics> {
    let predicted: Vec<BinaryLabel> = par::try_map(exec, dev, |b| b.forward(params, cfg).map(|t| t.prediction()))?;
    let gold: Vec<BinaryLabel> = dev.iter().map(|b| b.query_target).collect();
    Ok(confusion(&predicted, &gold)?.metrics())
}

/// Tab-separated history; training loss at 17 significant digits.
pub fn history_tsv(history: &[HistoryRecord]) -> String {
    let mut s = String::from("step\tepoch\ttrain_loss\tdev_precision\tdev_recall\tdev_f1\n");
    for r in history {
        write!(s, "{}\t{}\t{:.16e}", r.step, r.epoch, r.train_loss).unwrap();
        match r.dev {
            Some(m) => writeln!(s, "\t{:.4}\t{:.4}\t{:.4}", m.precision, m.recall, m.f1).unwrap(),
            None => s.push_str("\t-\t-\t-\n"),
        }
    }
    s
}

pub fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    std::fs::write(path, history_tsv(history)).map_err(|e| Error::io(path, e))
}
