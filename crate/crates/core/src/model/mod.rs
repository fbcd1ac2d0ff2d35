//! The neighbourhood classification head.
//!
//! For a query `q` with neighbours `n_1..n_k`:
//!
//! ```text
//! rep(x)   = tanh(W_p x + b_p)                      shared projection
//! H_j      = [rep(q); rep(n_j); |rep(q) - rep(n_j)|] interaction features
//! agree_j  = W_a H_j + b_a                          (disagree, agree) logits
//! s_j      = W2 tanh(W1 H_j)                        attention scores
//! a        = softmax(s)
//! pooled   = Σ_j a_j H_j
//! logits   = W_c pooled + b_c                       (neutral, flagged)
//! ```
//!
//! Neighbour labels are never an input. With [`Interaction::Pair`] the rows
//! of `H` come from precomputed pair vectors and the projection is unused.

mod checkpoint;
mod matrix;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use matrix::{axpy, cross_entropy, dot, softmax, Matrix};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::BinaryLabel;
use crate::error::{Error, Result};

/// Where interaction features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interaction {
    /// Query and neighbours are projected separately; `h = 3p`.
    BiEncoder,
    /// Externally supplied pair vectors of the given dimension are `H` rows.
    Pair { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    /// Input embedding dimension.
    pub d: usize,
    /// Projection dimension.
    pub p: usize,
    /// Attention hidden dimension, strictly below `h`.
    pub h_r: usize,
    /// Neighbourhood size.
    pub k: usize,
    /// Weight of the classification loss; agreement gets `1 - lambda`.
    pub lambda: f64,
    pub seed: u64,
    pub interaction: Interaction,
}

impl HeadConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            p: 64,
            h_r: 16,
            k: 10,
            lambda: 0.3,
            seed: 0,
            interaction: Interaction::BiEncoder,
        }
    }

    /// Interaction feature dimension.
    pub fn h(&self) -> usize {
        match self.interaction {
            Interaction::BiEncoder => 3 * self.p,
            Interaction::Pair { dim } => dim,
        }
    }

    /// Rows of the projection matrix (zero in pair mode).
    pub fn projection_rows(&self) -> usize {
        match self.interaction {
            Interaction::BiEncoder => self.p,
            Interaction::Pair { .. } => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.d == 0 {
            return bad("embedding dimension d must be positive".into());
        }
        if self.interaction == Interaction::BiEncoder && self.p == 0 {
            return bad("projection dimension p must be positive".into());
        }
        if self.h() == 0 {
            return bad("interaction dimension must be positive".into());
        }
        if self.h_r == 0 || self.h_r >= self.h() {
            return bad(format!("need 0 < h_r < h, got h_r = {}, h = {}", self.h_r, self.h()));
        }
        if self.k == 0 {
            return bad("neighbourhood size k must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        Ok(())
    }
}

/// Trainable tensors. Biases are column matrices so every tensor shares one
/// representation; [`HeadParams::tensors`] lists them in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_proj: Matrix,
    pub b_proj: Matrix,
    pub w_agree: Matrix,
    pub b_agree: Matrix,
    pub w_attn1: Matrix,
    pub w_attn2: Matrix,
    pub w_cls: Matrix,
    pub b_cls: Matrix,
}

pub const TENSOR_NAMES: [&str; 8] = [
    "w_proj", "b_proj", "w_agree", "b_agree", "w_attn1", "w_attn2", "w_cls", "b_cls",
];

impl HeadParams {
    pub fn zeros(cfg: &HeadConfig) -> Self {
        let (d, p, h, h_r) = (cfg.d, cfg.projection_rows(), cfg.h(), cfg.h_r);
        Self {
            w_proj: Matrix::zeros(p, d),
            b_proj: Matrix::zeros(p, 1),
            w_agree: Matrix::zeros(2, h),
            b_agree: Matrix::zeros(2, 1),
            w_attn1: Matrix::zeros(h_r, h),
            w_attn2: Matrix::zeros(1, h_r),
            w_cls: Matrix::zeros(2, h),
            b_cls: Matrix::zeros(2, 1),
        }
    }

    /// Glorot-uniform weights drawn from a seeded stream, zero biases.
    pub fn init(cfg: &HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for w in [
            &mut params.w_proj,
            &mut params.w_agree,
            &mut params.w_attn1,
            &mut params.w_attn2,
            &mut params.w_cls,
        ] {
            if w.as_slice().is_empty() {
                continue;
            }
            let s = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            let dist = Uniform::new_inclusive(-s, s).expect("finite bounds");
            w.as_mut_slice().iter_mut().for_each(|x| *x = dist.sample(&mut rng));
        }
        Ok(params)
    }

    pub fn tensors(&self) -> [&Matrix; 8] {
        [
            &self.w_proj,
            &self.b_proj,
            &self.w_agree,
            &self.b_agree,
            &self.w_attn1,
            &self.w_attn2,
            &self.w_cls,
            &self.b_cls,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.w_proj,
            &mut self.b_proj,
            &mut self.w_agree,
            &mut self.b_agree,
            &mut self.w_attn1,
            &mut self.w_attn2,
            &mut self.w_cls,
            &mut self.b_cls,
        ]
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.as_slice().iter().all(|x| x.is_finite()))
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &HeadConfig) -> Result<()> {
        let want = Self::zeros(cfg);
        for ((have, want), name) in self.tensors().iter().zip(want.tensors()).zip(TENSOR_NAMES) {
            if have.shape() != want.shape() {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, expected {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }

    /// `tanh(W_p v + b_p)`
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut z = self.w_proj.matvec(v);
        for (zi, bi) in z.iter_mut().zip(self.b_proj.as_slice()) {
            *zi = (*zi + bi).tanh();
        }
        z
    }

    /// `(disagree, agree)` logits for one interaction feature.
    pub fn agreement_logits(&self, feature: &[f64]) -> [f64; 2] {
        affine2(&self.w_agree, &self.b_agree, feature)
    }

    /// `(neutral, flagged)` logits for the pooled feature.
    pub fn classify(&self, pooled: &[f64]) -> [f64; 2] {
        affine2(&self.w_cls, &self.b_cls, pooled)
    }

    /// Structured self-attention over the rows of `h`; returns the
    /// attention weights and the pooled feature.
    pub fn attend(&self, h: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let att = self.attention(h)?;
        Ok((att.weights, att.pooled))
    }

    fn attention(&self, h: &Matrix) -> Result<Attention> {
        let k = h.rows();
        if k == 0 {
            return Err(Error::Argument("attention over an empty neighbourhood".into()));
        }
        let mut hidden = Matrix::zeros(k, self.w_attn1.rows());
        let mut scores = Vec::with_capacity(k);
        for j in 0..k {
            let u: Vec<f64> = self.w_attn1.matvec(h.row(j)).into_iter().map(f64::tanh).collect();
            scores.push(dot(self.w_attn2.row(0), &u));
            hidden.row_mut(j).copy_from_slice(&u);
        }
        let weights = softmax(&scores);
        let mut pooled = vec![0.0; h.cols()];
        for (j, &a) in weights.iter().enumerate() {
            axpy(a, h.row(j), &mut pooled);
        }
        Ok(Attention {
            hidden,
            scores,
            weights,
            pooled,
        })
    }

    /// Full bi-encoder forward pass. `neighbours` must hold exactly `cfg.k`
    /// vectors of length `cfg.d`.
    pub fn forward(&self, cfg: &HeadConfig, query: &[f64], neighbours: &[&[f64]]) -> Result<ForwardTrace> {
        if cfg.interaction != Interaction::BiEncoder {
            return Err(Error::Argument("forward needs a bi-encoder head; use forward_features for pair vectors".into()));
        }
        if neighbours.len() != cfg.k {
            return Err(Error::Argument(format!(
                "expected {} neighbours, got {}",
                cfg.k,
                neighbours.len()
            )));
        }
        if query.len() != cfg.d || neighbours.iter().any(|n| n.len() != cfg.d) {
            return Err(Error::Argument(format!("input vectors must have length {}", cfg.d)));
        }
        let rep_q = self.project(query);
        let p = rep_q.len();
        let mut rep_n = Matrix::zeros(cfg.k, p);
        let mut h = Matrix::zeros(cfg.k, 3 * p);
        for (j, n) in neighbours.iter().enumerate() {
            let r = self.project(n);
            h.row_mut(j).copy_from_slice(&interaction_be(&rep_q, &r)?);
            rep_n.row_mut(j).copy_from_slice(&r);
        }
        self.finish(rep_q, rep_n, h)
    }

    /// Forward pass from precomputed interaction features (`k × h`).
    pub fn forward_features(&self, cfg: &HeadConfig, h: Matrix) -> Result<ForwardTrace> {
        if h.rows() != cfg.k || h.cols() != cfg.h() {
            return Err(Error::Argument(format!(
                "interaction matrix is {:?}, expected ({}, {})",
                h.shape(),
                cfg.k,
                cfg.h()
            )));
        }
        self.finish(Vec::new(), Matrix::zeros(h.rows(), 0), h)
    }

    fn finish(&self, rep_q: Vec<f64>, rep_n: Matrix, h: Matrix) -> Result<ForwardTrace> {
        let mut agree_logits = Matrix::zeros(h.rows(), 2);
        for j in 0..h.rows() {
            agree_logits.row_mut(j).copy_from_slice(&self.agreement_logits(h.row(j)));
        }
        let att = self.attention(&h)?;
        let class_logits = self.classify(&att.pooled);
        Ok(ForwardTrace {
            rep_q,
            rep_n,
            h,
            agree_logits,
            attn_hidden: att.hidden,
            attn_scores: att.scores,
            attention: att.weights,
            pooled: att.pooled,
            class_logits,
        })
    }

    /// Cosine of the projected representations; 0 if either is ~zero.
    pub fn be_score(&self, a: &[f64], b: &[f64]) -> f64 {
        let (ra, rb) = (self.project(a), self.project(b));
        let na = dot(&ra, &ra).sqrt();
        let nb = dot(&rb, &rb).sqrt();
        if na < 1e-12 || nb < 1e-12 {
            return 0.0;
        }
        (dot(&ra, &rb) / (na * nb)).clamp(-1.0, 1.0)
    }
}

struct Attention {
    hidden: Matrix,
    scores: Vec<f64>,
    weights: Vec<f64>,
    pooled: Vec<f64>,
}

fn affine2(w: &Matrix, b: &Matrix, x: &[f64]) -> [f64; 2] {
    let b = b.as_slice();
    [dot(w.row(0), x) + b[0], dot(w.row(1), x) + b[1]]
}

/// `[rep_q; rep_n; |rep_q - rep_n|]`
pub fn interaction_be(rep_q: &[f64], rep_n: &[f64]) -> Result<Vec<f64>> {
    if rep_q.len() != rep_n.len() {
        return Err(Error::Argument(format!(
            "representation lengths differ: {} vs {}",
            rep_q.len(),
            rep_n.len()
        )));
    }
    let mut out = Vec::with_capacity(3 * rep_q.len());
    out.extend_from_slice(rep_q);
    out.extend_from_slice(rep_n);
    out.extend(rep_q.iter().zip(rep_n).map(|(a, b)| (a - b).abs()));
    Ok(out)
}

/// Intermediate activations of one query–neighbourhood pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Projected query (empty in pair mode).
    pub rep_q: Vec<f64>,
    /// Projected neighbours, `k × p` (zero columns in pair mode).
    pub rep_n: Matrix,
    /// Interaction features, `k × h`.
    pub h: Matrix,
    /// `k × 2` (disagree, agree) logits.
    pub agree_logits: Matrix,
    /// `tanh(W1 H_j)` per neighbour, `k × h_r`.
    pub attn_hidden: Matrix,
    pub attn_scores: Vec<f64>,
    pub attention: Vec<f64>,
    pub pooled: Vec<f64>,
    pub class_logits: [f64; 2],
}

impl ForwardTrace {
    /// Argmax of the class logits; equal logits resolve to neutral.
    pub fn prediction(&self) -> BinaryLabel {
        if self.class_logits[1] > self.class_logits[0] {
            BinaryLabel::Flagged
        } else {
            BinaryLabel::Neutral
        }
    }

    /// Softmax probability of agreement for each neighbour.
    pub fn agreement_probs(&self) -> Vec<f64> {
        (0..self.agree_logits.rows())
            .map(|j| softmax(self.agree_logits.row(j))[1])
            .collect()
    }
}
