//! Reverse-mode gradients of the multi-task loss and a central
//! finite-difference checker that only uses the forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss, Batch, BatchInputs, LossParts};
use crate::dataset::BinaryLabel;
use crate::error::Result;
use crate::index::{Hit, Neighbourhood};
use crate::model::{dot, softmax, HeadConfig, HeadParams, Interaction, Matrix, TENSOR_NAMES};
use crate::par::{self, Execution};

/// Exact gradients of the batch loss with respect to every head tensor.
/// The returned [`HeadParams`] holds gradients, not weights.
pub fn backward(params: &HeadParams, cfg: &HeadConfig, batch: &Batch) -> Result<(HeadParams, LossParts)> {
    let trace = batch.forward(params, cfg)?;
    let parts = loss(&trace, &batch.agreement_targets, batch.query_target, cfg.lambda);
    let lambda = cfg.lambda;
    let k = trace.h.rows();
    let mut g = HeadParams::zeros(cfg);
    let mut dh = Matrix::zeros(k, trace.h.cols());

    // Classification branch.
    let mut g_cls = softmax(&trace.class_logits);
    g_cls[batch.query_target.class_index()] -= 1.0;
    g_cls.iter_mut().for_each(|x| *x *= lambda);
    g.w_cls.add_outer(&g_cls, &trace.pooled);
    add_bias(&mut g.b_cls, &g_cls);
    let mut d_pooled = vec![0.0; trace.h.cols()];
    params.w_cls.matvec_t_add(&g_cls, &mut d_pooled);

    // Attention pooling: pooled = Σ a_j H_j, a = softmax(s).
    let d_a: Vec<f64> = (0..k).map(|j| dot(trace.h.row(j), &d_pooled)).collect();
    let mean_d_a = dot(&trace.attention, &d_a);
    for j in 0..k {
        let a_j = trace.attention[j];
        crate::model::axpy(a_j, &d_pooled, dh.row_mut(j));
        let d_score = a_j * (d_a[j] - mean_d_a);
        if d_score == 0.0 {
            continue;
        }
        let u = trace.attn_hidden.row(j);
        crate::model::axpy(d_score, u, g.w_attn2.row_mut(0));
        let d_z: Vec<f64> = params
            .w_attn2
            .row(0)
            .iter()
            .zip(u)
            .map(|(w, u)| d_score * w * (1.0 - u * u))
            .collect();
        g.w_attn1.add_outer(&d_z, trace.h.row(j));
        params.w_attn1.matvec_t_add(&d_z, dh.row_mut(j));
    }

    // Agreement branch, averaged over neighbours.
    let scale = (1.0 - lambda) / k as f64;
    for j in 0..k {
        let mut g_agree = softmax(trace.agree_logits.row(j));
        g_agree[usize::from(batch.agreement_targets[j])] -= 1.0;
        g_agree.iter_mut().for_each(|x| *x *= scale);
        g.w_agree.add_outer(&g_agree, trace.h.row(j));
        add_bias(&mut g.b_agree, &g_agree);
        params.w_agree.matvec_t_add(&g_agree, dh.row_mut(j));
    }

    // Shared projection: H_j = [r_q; r_j; |r_q - r_j|], r = tanh(W_p x + b_p).
    if let (Interaction::BiEncoder, BatchInputs::Vectors { query, neighbours }) = (cfg.interaction, &batch.inputs) {
        let p = trace.rep_q.len();
        let mut d_rep_q = vec![0.0; p];
        let mut d_pre = vec![0.0; p];
        for j in 0..k {
            let dh_j = dh.row(j);
            let r_n = trace.rep_n.row(j);
            for i in 0..p {
                let diff = trace.rep_q[i] - r_n[i];
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let d_abs = sign * dh_j[2 * p + i];
                d_rep_q[i] += dh_j[i] + d_abs;
                d_pre[i] = (dh_j[p + i] - d_abs) * (1.0 - r_n[i] * r_n[i]);
            }
            g.w_proj.add_outer(&d_pre, &neighbours[j]);
            add_bias(&mut g.b_proj, &d_pre);
        }
        for i in 0..p {
            d_pre[i] = d_rep_q[i] * (1.0 - trace.rep_q[i] * trace.rep_q[i]);
        }
        g.w_proj.add_outer(&d_pre, query);
        add_bias(&mut g.b_proj, &d_pre);
    }

    Ok((g, parts))
}

fn add_bias(b: &mut Matrix, g: &[f64]) {
    for (x, y) in b.as_mut_slice().iter_mut().zip(g) {
        *x += y;
    }
}

/// Where the largest analytic/numeric disagreement occurred.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub tensor: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// components that are zero up to finite-difference noise from dominating.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares [`backward`] against central differences of the forward loss for
/// every parameter value. Returns the worst mismatch.
pub fn gradient_check(
    params: &HeadParams,
    cfg: &HeadConfig,
    batch: &Batch,
    eps: f64,
    floor: f64,
) -> Result<GradMismatch> {
    let (analytic, _) = backward(params, cfg, batch)?;
    let mut probe = params.clone();
    let mut worst = GradMismatch {
        tensor: TENSOR_NAMES[0],
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_error: 0.0,
    };
    for (t, name) in TENSOR_NAMES.iter().enumerate() {
        for i in 0..params.tensors()[t].as_slice().len() {
            let x0 = params.tensors()[t].as_slice()[i];
            probe.tensors_mut()[t].as_mut_slice()[i] = x0 + eps;
            let plus = batch.loss(&probe, cfg)?.total;
            probe.tensors_mut()[t].as_mut_slice()[i] = x0 - eps;
            let minus = batch.loss(&probe, cfg)?.total;
            probe.tensors_mut()[t].as_mut_slice()[i] = x0;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.tensors()[t].as_slice()[i];
            let rel = relative_error(a, numeric, floor);
            if rel > worst.rel_error || rel.is_nan() {
                worst = GradMismatch {
                    tensor: name,
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                };
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    pub seed: u64,
    pub trials: usize,
    pub d: usize,
    pub p: usize,
    pub h_r: usize,
    pub ks: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub eps: f64,
    pub floor: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 20,
            d: 32,
            p: 16,
            h_r: 8,
            ks: vec![1, 5, 10],
            lambdas: vec![0.0, 0.3, 0.5, 1.0],
            eps: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckTrial {
    pub k: usize,
    pub lambda: f64,
    pub worst: GradMismatch,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub trials: Vec<GradCheckTrial>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.trials
            .iter()
            .map(|t| t.worst.rel_error)
            .fold(0.0, |a, b| if b.is_nan() { f64::NAN } else { a.max(b) })
    }
}

/// Random instances cycling through every `k` and then every `lambda`:
/// trial `i` uses `ks[i % |ks|]` and `lambdas[(i / |ks|) % |lambdas|]`.
/// Parameters (biases included) and inputs are drawn from a seeded stream.
pub fn random_gradcheck(settings: &GradCheckSettings, exec: Execution) -> Result<GradCheckReport> {
    let mut master = ChaCha8Rng::seed_from_u64(settings.seed);
    let seeds: Vec<u64> = (0..settings.trials).map(|_| master.random()).collect();
    let trials = par::map_range(exec, settings.trials, |i| {
        let k = settings.ks[i % settings.ks.len()];
        let lambda = settings.lambdas[(i / settings.ks.len()) % settings.lambdas.len()];
        let cfg = HeadConfig {
            d: settings.d,
            p: settings.p,
            h_r: settings.h_r,
            k,
            lambda,
            seed: seeds[i],
            interaction: Interaction::BiEncoder,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i] ^ 0x5eed);
        let (params, batch) = random_instance(&cfg, &mut rng)?;
        let worst = gradient_check(&params, &cfg, &batch, settings.eps, settings.floor)?;
        Ok(GradCheckTrial { k, lambda, worst })
    });
    Ok(GradCheckReport {
        trials: trials.into_iter().collect::<Result<_>>()?,
    })
}

fn random_instance(cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Result<(HeadParams, Batch)> {
    let mut params = HeadParams::init(cfg)?;
    for b in [&mut params.b_proj, &mut params.b_agree, &mut params.b_cls] {
        b.as_mut_slice().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    let mut unit = |d: usize| {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        crate::embed::l2_normalize(&v)
    };
    let query = unit(cfg.d);
    let neighbours: Vec<Vec<f64>> = (0..cfg.k).map(|_| unit(cfg.d)).collect();
    let label = |b: bool| if b { BinaryLabel::Flagged } else { BinaryLabel::Neutral };
    let query_target = label(rng.random());
    let labels: Vec<BinaryLabel> = (0..cfg.k).map(|_| label(rng.random())).collect();
    let batch = Batch {
        query_id: "q".into(),
        neighbourhood: Neighbourhood {
            query_id: "q".into(),
            hits: labels
                .iter()
                .enumerate()
                .map(|(j, &l)| Hit {
                    id: format!("n{j}"),
                    score: 0.0,
                    label: l,
                })
                .collect(),
        },
        inputs: BatchInputs::Vectors { query, neighbours },
        agreement_targets: super::agreement_targets(query_target, &labels),
        query_target,
    };
    Ok((params, batch))
}
