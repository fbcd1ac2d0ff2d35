//! Seeded synthetic source/target corpora with precomputed vectors.
//!
//! Each vector has `label_dims` coordinates carrying the label signal and
//! `dim - label_dims` topic coordinates that carry none. Label coordinates
//! are `±margin · μ` plus Gaussian noise; topic coordinates are one of
//! `topics` random centres at scale `topic_scale` plus noise. Target points
//! use a rotated label direction and their own topic centres, so raw cosine
//! retrieval is dominated by topic while a learned projection can recover
//! the label.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{BinaryLabel, Dataset, DatasetRole, Example};
use crate::embed::{l2_normalize_in_place, EmbeddingTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub source_n: usize,
    pub target_n: usize,
    pub dim: usize,
    pub label_dims: usize,
    pub topics: usize,
    pub margin: f64,
    pub label_noise: f64,
    pub topic_scale: f64,
    pub topic_noise: f64,
    /// Size of the perturbation rotating the target label direction.
    pub target_shift: f64,
    pub source_flagged: f64,
    pub target_flagged: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            source_n: 2000,
            target_n: 300,
            dim: 32,
            label_dims: 16,
            topics: 8,
            margin: 0.5,
            label_noise: 0.15,
            topic_scale: 2.0,
            topic_noise: 0.7,
            target_shift: 0.5,
            source_flagged: 0.35,
            target_flagged: 0.4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.source_n < 2 || self.target_n < 2 {
            return bad("synthetic sets need at least two examples".into());
        }
        if self.label_dims == 0 || self.label_dims >= self.dim {
            return bad(format!("label_dims must be in 1..{}", self.dim));
        }
        if self.topics == 0 {
            return bad("topics must be at least 1".into());
        }
        for (name, f) in [("source_flagged", self.source_flagged), ("target_flagged", self.target_flagged)] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must be in [0, 1]"));
            }
        }
        for x in [self.margin, self.label_noise, self.topic_scale, self.topic_noise, self.target_shift] {
            if !(x.is_finite() && x >= 0.0) {
                return bad("scales must be finite and non-negative".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub source: Dataset,
    pub target: Dataset,
    /// Unit-normalised vectors for every source and target id.
    pub vectors: EmbeddingTable,
}

pub const SOURCE_FILE: &str = "source.jsonl";
pub const TARGET_FILE: &str = "target.jsonl";
pub const VECTORS_FILE: &str = "vectors.nfv";

impl SynthData {
    /// Writes the three files and returns their paths in that order.
    pub fn write(&self, dir: &Path) -> Result<[PathBuf; 3]> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = [dir.join(SOURCE_FILE), dir.join(TARGET_FILE), dir.join(VECTORS_FILE)];
        self.source.write_jsonl(&paths[0])?;
        self.target.write_jsonl(&paths[1])?;
        self.vectors.save(&paths[2])?;
        Ok(paths)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = gaussian(rng, n);
    l2_normalize_in_place(&mut v);
    v
}

struct Domain {
    direction: Vec<f64>,
    centres: Vec<Vec<f64>>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (ld, td) = (cfg.label_dims, cfg.dim - cfg.label_dims);
    let direction = unit(&mut rng, ld);
    let source_domain = Domain {
        centres: (0..cfg.topics).map(|_| unit(&mut rng, td)).collect(),
        direction: direction.clone(),
    };
    let perturb = gaussian(&mut rng, ld);
    let mut shifted: Vec<f64> = direction
        .iter()
        .zip(&perturb)
        .map(|(d, p)| d + cfg.target_shift * p / (ld as f64).sqrt())
        .collect();
    l2_normalize_in_place(&mut shifted);
    let target_domain = Domain {
        centres: (0..cfg.topics).map(|_| unit(&mut rng, td)).collect(),
        direction: shifted,
    };

    let mut vectors = EmbeddingTable::new(cfg.dim);
    let mut draw = |prefix: &str, lang: &str, n: usize, flagged: f64, domain: &Domain, rng: &mut ChaCha8Rng| {
        let n_flagged = (flagged * n as f64).round() as usize;
        let mut examples = Vec::with_capacity(n);
        for i in 0..n {
            let label = if i < n_flagged { BinaryLabel::Flagged } else { BinaryLabel::Neutral };
            let sign = if label.is_flagged() { 1.0 } else { -1.0 };
            let topic = rng.random_range(0..domain.centres.len());
            let mut v = Vec::with_capacity(cfg.dim);
            v.extend(
                domain
                    .direction
                    .iter()
                    .zip(gaussian(rng, ld))
                    .map(|(d, z)| sign * cfg.margin * d + cfg.label_noise * z),
            );
            v.extend(
                domain.centres[topic]
                    .iter()
                    .zip(gaussian(rng, td))
                    .map(|(c, z)| cfg.topic_scale * c + cfg.topic_noise * z),
            );
            let id = format!("{prefix}{i:05}");
            vectors.insert(id.clone(), &v)?;
            let mut ex = Example::new(id, format!("{prefix} item {i} topic {topic}"), lang, label);
            if label.is_flagged() && prefix == "s" {
                ex.raw_labels.insert("toxic".into());
            }
            examples.push(ex);
        }
        Ok::<_, Error>(examples)
    };
    let source = draw("s", "en", cfg.source_n, cfg.source_flagged, &source_domain, &mut rng)?;
    let target = draw("t", "tr", cfg.target_n, cfg.target_flagged, &target_domain, &mut rng)?;
    Ok(SynthData {
        source: Dataset::new("source", DatasetRole::Source, source)?,
        target: Dataset::new("target", DatasetRole::Target, target)?,
        vectors,
    })
}
