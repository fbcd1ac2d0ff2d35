//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs offline on synthetic data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use knnplus::baselines::{majority_vote, weighted_vote};
use knnplus::eval::{f1_flagged, ConfusionCounts, HeadPredictor, Predictor, Report};
use knnplus::model::{checkpoint_bytes, checkpoint_from_bytes, softmax, Matrix};
use knnplus::synth::{generate, SynthConfig};
use knnplus::train::{random_gradcheck, GradCheckSettings, TrainConfig, Trainer};
use knnplus::{
    BinaryLabel, EmbeddingTable, Example, Execution, HeadConfig, HeadParams, Hit, Index, Neighbourhood, SplitSpec,
    Tables,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn cli(args: &[&str]) -> Result<(), String> {
    let argv: Vec<String> = std::iter::once("knnplus").chain(args.iter().copied()).map(String::from).collect();
    match knnplus_cli::run(argv) {
        0 => Ok(()),
        code => Err(format!("`knnplus {}` exited with {code}", args.join(" "))),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn read_tsv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty tsv")?.split('\t').collect();
    Ok(lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split('\t').map(String::from)).collect())
        .collect())
}

fn num(row: &BTreeMap<String, String>, key: &str) -> Result<f64, String> {
    row.get(key).and_then(|v| v.parse().ok()).ok_or_else(|| format!("missing numeric column {key}"))
}

fn best_dev_f1(history: &Path) -> Result<f64, String> {
    read_tsv(history)?
        .iter()
        .map(|r| num(r, "dev_f1"))
        .try_fold(0.0f64, |a, f| f.map(|f| a.max(f)))
}

/// Synthetic task laid out on disk by the CLI, shared by criteria 4-8.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Result<Self, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        cli(&["synth", "--out-dir", s(&data), "--seed", "7"])?;
        cli(&[
            "index", "build", "--data", s(&data.join("source.jsonl")), "--vectors", s(&data.join("vectors.nfv")),
            "--out", s(&root.join("source.nfi")),
        ])?;
        Ok(Self { _dir: dir, root })
    }

    fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    fn index(&self) -> PathBuf {
        self.root.join("source.nfi")
    }

    fn train(&self, out: &str, extra: &[&str]) -> Result<PathBuf, String> {
        let out = self.root.join(out);
        let mut args = vec![
            "train", "--source-index", s(&self.index()), "--target-train", s(&self.data("target_train.jsonl")),
            "--target-dev", s(&self.data("target_dev.jsonl")), "--vectors", s(&self.data("vectors.nfv")),
            "--out-dir", s(&out), "--k", "10", "--lambda", "0.3", "--epochs", "10", "--lr", "0.01", "--seed", "7",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        args.extend(extra.iter().map(|a| a.to_string()));
        cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
        Ok(out)
    }
}

fn criterion_1() -> Outcome {
    let settings = GradCheckSettings { seed: 7, ..GradCheckSettings::default() };
    ensure!(settings.trials >= 20 && (settings.d, settings.p, settings.h_r) == (32, 16, 8), "settings drifted");
    let report = random_gradcheck(&settings, Execution::Parallel).map_err(|e| e.to_string())?;
    let max = report.max_rel_error();
    ensure!(report.trials.len() >= 20, "only {} trials", report.trials.len());
    for lambda in [0.0, 0.3, 0.5, 1.0] {
        ensure!(report.trials.iter().any(|t| t.lambda == lambda), "lambda {lambda} not covered");
    }
    for k in [1, 5, 10] {
        ensure!(report.trials.iter().any(|t| t.k == k), "k {k} not covered");
    }
    ensure!(max < 1e-4, "max relative error {max:.3e}");
    cli(&["gradcheck", "--seed", "7"])?;
    Ok(format!("max relative error {max:.3e} over {} trials; `gradcheck` exits 0", report.trials.len()))
}

fn oracle_topk(index: &Index, v: &[f64], k: usize) -> Vec<(String, f64)> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let q: Vec<f64> = v.iter().map(|x| x / norm).collect();
    let mut all: Vec<(String, f64)> = (0..index.len())
        .map(|i| {
            let mut acc = 0.0f64;
            for (j, &x) in index.row(i).iter().enumerate() {
                acc += q[j] * f64::from(x);
            }
            (index.ids()[i].clone(), acc)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn criterion_2() -> Outcome {
    let mut checked = 0usize;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=1000);
        let d = rng.random_range(1..=64);
        // Few distinct rows so that exact score ties are common.
        let distinct = rng.random_range(1..=n);
        let pool: Vec<Vec<f32>> = (0..distinct)
            .map(|_| {
                let mut v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                if v.iter().all(|x| *x == 0.0) {
                    v[0] = 1.0;
                }
                v
            })
            .collect();
        let mut ids: Vec<String> = (0..n).map(|i| format!("r{:04}", (i * 7919) % 10007)).collect();
        ids.shuffle(&mut rng);
        let mut rows = Vec::with_capacity(n * d);
        for _ in 0..n {
            rows.extend_from_slice(&pool[rng.random_range(0..distinct)]);
        }
        let labels = (0..n).map(|i| if i % 3 == 0 { BinaryLabel::Flagged } else { BinaryLabel::Neutral }).collect();
        let index = Index::from_parts(d, ids, labels, rows).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            let q: Vec<f64> = if rng.random_bool(0.3) {
                index.row(rng.random_range(0..n)).iter().map(|&x| f64::from(x)).collect()
            } else {
                (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            let k = rng.random_range(1..=n.min(25));
            let got = index.query_topk("q", &q, k, None).map_err(|e| e.to_string())?;
            let want = oracle_topk(&index, &q, k);
            let got: Vec<(String, f64)> = got.hits.into_iter().map(|h| (h.id, h.score)).collect();
            ensure!(got == want, "seed {seed}: top-{k} differs from oracle (n={n}, d={d})");
            let par = index.query_topk_with("q", &q, k, None, Execution::Parallel).map_err(|e| e.to_string())?;
            ensure!(par.hits.iter().map(|h| (h.id.clone(), h.score)).collect::<Vec<_>>() == want, "parallel scan differs");
            checked += 1;
        }
    }
    Ok(format!("200 random indexes, {checked} queries identical to the sort-everything oracle"))
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_head(rng: &mut ChaCha8Rng) -> (HeadConfig, HeadParams) {
    let d = rng.random_range(2..12);
    let p = rng.random_range(1..6);
    let cfg = HeadConfig {
        p,
        h_r: rng.random_range(1..3 * p),
        k: rng.random_range(1..8),
        lambda: rng.random_range(0.0..=1.0),
        seed: rng.random(),
        ..HeadConfig::new(d)
    };
    let mut params = HeadParams::init(&cfg).expect("valid random config");
    for b in [&mut params.b_proj, &mut params.b_agree, &mut params.b_cls] {
        b.as_mut_slice().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    (cfg, params)
}

const CASES: u64 = 100;

fn criterion_3() -> Outcome {
    let mut names = Vec::new();
    let mut check = |name: &str, f: &dyn Fn(u64) -> Result<(), String>| -> Result<(), String> {
        for seed in 0..CASES {
            f(seed).map_err(|e| format!("{name}, case {seed}: {e}"))?;
        }
        names.push(name.to_string());
        Ok(())
    };

    let forward = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cfg, params) = random_head(&mut rng);
        let q = unit(&mut rng, cfg.d);
        let ns: Vec<Vec<f64>> = (0..cfg.k).map(|_| unit(&mut rng, cfg.d)).collect();
        (cfg, params, q, ns)
    };
    let run = |cfg: &HeadConfig, params: &HeadParams, q: &[f64], ns: &[Vec<f64>]| {
        let refs: Vec<&[f64]> = ns.iter().map(Vec::as_slice).collect();
        params.forward(cfg, q, &refs).map_err(|e| e.to_string())
    };

    check("attention sums to 1", &|seed| {
        let (cfg, params, q, ns) = forward(seed);
        let t = run(&cfg, &params, &q, &ns)?;
        let sum: f64 = t.attention.iter().sum();
        ensure!((sum - 1.0).abs() <= 1e-6 && t.attention.iter().all(|a| *a >= 0.0), "sum {sum}");
        Ok(())
    })?;

    check("zero attention parameters pool the row mean", &|seed| {
        let (cfg, mut params, q, ns) = forward(seed);
        params.w_attn1.fill(0.0);
        params.w_attn2.fill(0.0);
        let t = run(&cfg, &params, &q, &ns)?;
        for c in 0..cfg.h() {
            let mean = (0..cfg.k).map(|j| t.h.get(j, c)).sum::<f64>() / cfg.k as f64;
            ensure!((t.pooled[c] - mean).abs() <= 1e-12, "column {c}: {} vs {mean}", t.pooled[c]);
        }
        Ok(())
    })?;

    check("interaction feature blocks", &|seed| {
        let (cfg, params, q, ns) = forward(seed);
        let t = run(&cfg, &params, &q, &ns)?;
        let rq = params.project(&q);
        ensure!(rq == t.rep_q, "query representation");
        for (j, n) in ns.iter().enumerate() {
            let rn = params.project(n);
            let row = t.h.row(j);
            let p = cfg.p;
            ensure!(row[..p] == rq[..], "query block of row {j}");
            ensure!(row[p..2 * p] == rn[..], "neighbour block of row {j}");
            let diff: Vec<f64> = rq.iter().zip(&rn).map(|(a, b)| (a - b).abs()).collect();
            ensure!(row[2 * p..] == diff[..], "difference block of row {j}");
        }
        Ok(())
    })?;

    check("inference ignores neighbour labels", &|seed| {
        let (cfg, params, q, ns) = forward(seed);
        let mut table = EmbeddingTable::new(cfg.d);
        table.insert("q", &q).map_err(|e| e.to_string())?;
        for (j, n) in ns.iter().enumerate() {
            table.insert(format!("n{j}"), n).map_err(|e| e.to_string())?;
        }
        let tables = Tables::new(table);
        let predictor = HeadPredictor { config: cfg, params: &params, tables: &tables };
        let query = Example::new("q", "", "xx", BinaryLabel::Neutral);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let hood = |rng: &mut ChaCha8Rng| Neighbourhood {
            query_id: "q".into(),
            hits: (0..cfg.k)
                .map(|j| Hit {
                    id: format!("n{j}"),
                    score: 0.5,
                    label: if rng.random() { BinaryLabel::Flagged } else { BinaryLabel::Neutral },
                })
                .collect(),
        };
        let a = predictor.predict(&query, &hood(&mut rng)).map_err(|e| e.to_string())?;
        let b = predictor.predict(&query, &hood(&mut rng)).map_err(|e| e.to_string())?;
        let bits = |v: &Option<Vec<f64>>| v.as_ref().unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure!(a.label == b.label, "label changed");
        ensure!(bits(&a.attention) == bits(&b.attention) && bits(&a.agreement) == bits(&b.agreement), "outputs changed");
        Ok(())
    })?;

    check("softmax shift invariance", &|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..12);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let c = rng.random_range(-500.0..500.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let (a, b) = (softmax(&x), softmax(&shifted));
        for (p, q) in a.iter().zip(&b) {
            ensure!((p - q).abs() <= 1e-12, "{p} vs {q} at shift {c}");
        }
        Ok(())
    })?;

    check("checkpoint round trip", &|seed| {
        let (cfg, params, q, ns) = forward(seed);
        let (cfg2, params2) = checkpoint_from_bytes(&checkpoint_bytes(&cfg, &params)).map_err(|e| e.to_string())?;
        let (a, b) = (run(&cfg, &params, &q, &ns)?, run(&cfg2, &params2, &q, &ns)?);
        for (x, y) in a.class_logits.iter().zip(&b.class_logits) {
            ensure!((x - y).abs() <= 1e-12, "class logits");
        }
        ensure!(a.attention.iter().zip(&b.attention).all(|(x, y)| (x - y).abs() <= 1e-12), "attention");
        ensure!(a.agree_logits.max_abs_diff(&b.agree_logits) <= 1e-12, "agreement logits");
        Ok(())
    })?;

    check("voter ties go to flagged", &|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = rng.random_range(1..8);
        let score = rng.random_range(-1.0..1.0);
        let mut labels: Vec<BinaryLabel> =
            (0..2 * pairs).map(|i| if i < pairs { BinaryLabel::Flagged } else { BinaryLabel::Neutral }).collect();
        labels.shuffle(&mut rng);
        let hood = Neighbourhood {
            query_id: "q".into(),
            hits: labels.iter().enumerate().map(|(i, &label)| Hit { id: format!("h{i}"), score, label }).collect(),
        };
        let m = majority_vote(&hood, 2 * pairs).map_err(|e| e.to_string())?;
        let w = weighted_vote(&hood, 2 * pairs).map_err(|e| e.to_string())?;
        ensure!(m.label == BinaryLabel::Flagged && w.label == BinaryLabel::Flagged, "tie not flagged");
        Ok(())
    })?;

    check("F1 zero denominators", &|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tn = rng.random_range(0..100);
        let fn_ = rng.random_range(0..100);
        let fp = rng.random_range(0..100);
        let m = f1_flagged(&ConfusionCounts { tp: 0, fp: 0, fn_, tn });
        ensure!((m.precision, m.f1) == (0.0, 0.0), "no predicted positives");
        let m = f1_flagged(&ConfusionCounts { tp: 0, fp, fn_: 0, tn });
        ensure!((m.recall, m.f1) == (0.0, 0.0), "no gold positives");
        let m = f1_flagged(&ConfusionCounts { tp: 0, fp, fn_, tn });
        ensure!(m.f1 == 0.0 && !m.f1.is_nan(), "P + R = 0");
        Ok(())
    })?;

    Ok(format!("{} properties x {CASES} seeded cases: {}", names.len(), names.join("; ")))
}

fn criterion_4(ws: &Workspace, started: Instant) -> Outcome {
    let out = ws.train("head", &[])?;
    let report_path = ws.root.join("head_test.toml");
    cli(&[
        "evaluate", "--ckpt", s(&out.join("best.nfp")), "--index", s(&ws.index()), "--data",
        s(&ws.data("target_test.jsonl")), "--vectors", s(&ws.data("vectors.nfv")), "--out", s(&report_path),
    ])?;
    let head_f1 = Report::load(&report_path).map_err(|e| e.to_string())?.metrics().f1;
    let sweep = ws.root.join("majority.tsv");
    cli(&[
        "baseline", "majority", "--index", s(&ws.index()), "--data", s(&ws.data("target_test.jsonl")), "--vectors",
        s(&ws.data("vectors.nfv")), "--k-sweep", "10", "--out", s(&sweep),
    ])?;
    let vote_f1 = num(&read_tsv(&sweep)?[0], "f1")?;
    let elapsed = started.elapsed();
    let epochs = read_tsv(&out.join("history.tsv"))?.iter().map(|r| num(r, "epoch")).try_fold(0.0f64, |a, e| e.map(|e| a.max(e)))?;
    let detail = format!(
        "head test F1 {head_f1:.4}, majority k=10 F1 {vote_f1:.4}, {epochs} epochs, {:.1}s",
        elapsed.as_secs_f64()
    );
    ensure!(epochs <= 10.0, "{detail}: too many epochs");
    ensure!(head_f1 >= 0.90, "{detail}: head below 0.90");
    ensure!(head_f1 >= vote_f1, "{detail}: head below majority vote");
    ensure!(elapsed < Duration::from_secs(120), "{detail}: over 2 minutes");
    Ok(detail)
}

fn criterion_5(ws: &Workspace) -> Outcome {
    let started = Instant::now();
    let ckpt = ws.root.join("head").join("best.nfp");
    if !ckpt.exists() {
        ws.train("head", &[])?;
    }
    let out = ws.root.join("rerank.tsv");
    cli(&[
        "rerank-eval", "--ckpt", s(&ckpt), "--index", s(&ws.index()), "--data", s(&ws.data("target_test.jsonl")),
        "--vectors", s(&ws.data("vectors.nfv")), "--k-sweep", "3,5,10,20", "--out", s(&out),
    ])?;
    let rows = read_tsv(&out)?;
    ensure!(rows.len() == 4, "expected 4 rows");
    let mut strict = false;
    let mut parts = Vec::new();
    for r in &rows {
        let (k, before, after) = (num(r, "k")?, num(r, "f1_before")?, num(r, "f1_after")?);
        parts.push(format!("k={k}: {before:.4}->{after:.4}"));
        ensure!(after >= before, "k={k}: re-ranking lowered F1 {before:.4} -> {after:.4}");
        strict |= after > before;
    }
    let detail = format!("{}, {:.1}s", parts.join(", "), started.elapsed().as_secs_f64());
    ensure!(strict, "{detail}: no strict improvement");
    ensure!(started.elapsed() < Duration::from_secs(120), "{detail}: over 2 minutes");
    Ok(detail)
}

fn criterion_6() -> Outcome {
    let data = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let tables = Tables::new(data.vectors.clone());
    let index = Index::build(&data.source, &data.vectors).map_err(|e| e.to_string())?;
    let (train, _, _) = data.target.split(&SplitSpec::new(0.6, 0.2, 0.2, 7).unwrap()).map_err(|e| e.to_string())?;
    // 180 queries in windows of 18: 10 steps per epoch, 50 steps in 5 epochs.
    let config = TrainConfig { epochs: 5, accumulation: 18, lr: 0.01, seed: 7, ..TrainConfig::default() };
    let mut detail = Vec::new();
    for lambda in [1.0, 0.0] {
        let head = HeadConfig { k: 10, lambda, seed: 7, ..HeadConfig::new(32) };
        let trainer = Trainer::new(head, config.clone());
        let batches = trainer.prepare_batches(&train, &index, &tables, false).map_err(|e| e.to_string())?;
        let init = HeadParams::init(&head).map_err(|e| e.to_string())?;
        let out = trainer.run(&batches, None).map_err(|e| e.to_string())?;
        ensure!(out.steps == 50, "{} steps instead of 50", out.steps);
        let p = &out.final_params;
        let frozen: Vec<(&str, &Matrix, &Matrix)> = if lambda == 1.0 {
            vec![("W_a", &p.w_agree, &init.w_agree), ("b_a", &p.b_agree, &init.b_agree)]
        } else {
            vec![
                ("W1", &p.w_attn1, &init.w_attn1),
                ("W2", &p.w_attn2, &init.w_attn2),
                ("W_c", &p.w_cls, &init.w_cls),
                ("b_c", &p.b_cls, &init.b_cls),
            ]
        };
        for (name, now, then) in frozen {
            let delta = now.max_abs_diff(then);
            ensure!(delta < 1e-12, "lambda={lambda}: {name} moved by {delta:e}");
        }
        let moved = p.w_proj.max_abs_diff(&init.w_proj);
        ensure!(moved > 0.0, "lambda={lambda}: projection never moved");
        detail.push(format!("lambda={lambda}: frozen tensors exact, W_p moved {moved:.2e}"));
    }
    Ok(format!("50 steps each; {}", detail.join("; ")))
}

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        out.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(out)
}

fn criterion_7(ws: &Workspace) -> Outcome {
    let mut compared = Vec::new();
    let same = |a: &Path, b: &Path| -> Result<usize, String> {
        let (x, y) = (dir_bytes(a)?, dir_bytes(b)?);
        ensure!(!x.is_empty(), "{} is empty", a.display());
        ensure!(x.keys().eq(y.keys()), "file sets differ: {:?} vs {:?}", x.keys(), y.keys());
        for (name, bytes) in &x {
            ensure!(&y[name] == bytes, "{name} differs between runs");
        }
        Ok(x.len())
    };

    let synth = |dir: &Path| cli(&["synth", "--out-dir", s(dir), "--seed", "7", "--source-n", "300", "--target-n", "60"]);
    let (a, b) = (ws.root.join("det_synth_a"), ws.root.join("det_synth_b"));
    synth(&a)?;
    synth(&b)?;
    compared.push(format!("synth {}", same(&a, &b)?));

    let t1 = ws.train("det_train_a", &["--checkpoint-every", "20"])?;
    let t2 = ws.train("det_train_b", &["--checkpoint-every", "20"])?;
    let t3 = ws.train("det_train_seq", &["--checkpoint-every", "20", "--sequential"])?;
    let t4 = ws.train("det_train_t1", &["--checkpoint-every", "20", "--threads", "1"])?;
    let n = same(&t1, &t2)?;
    same(&t1, &t3)?;
    same(&t1, &t4)?;
    compared.push(format!("train {n} (also --sequential, --threads 1)"));

    let ckpt = t1.join("best.nfp");
    let outputs = ws.root.join("det_outputs");
    let (index, vectors) = (ws.index(), ws.data("vectors.nfv"));
    for run in ["a", "b"] {
        let dir = outputs.join(run);
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let common = ["--index", s(&index), "--vectors", s(&vectors)];
        let test = s(&ws.data("target_test.jsonl")).to_string();
        let mut eval = vec!["evaluate", "--ckpt", s(&ckpt), "--data", &test, "--explain"];
        let report = dir.join("report.toml");
        eval.extend(common);
        eval.extend(["--out", s(&report)]);
        cli(&eval)?;
        let predictions = dir.join("predictions.tsv");
        let mut pred = vec!["predict", "--ckpt", s(&ckpt), "--input", &test, "--explain", "--out", s(&predictions)];
        pred.extend(common);
        cli(&pred)?;
        let sweep = dir.join("weighted.tsv");
        let mut base = vec!["baseline", "weighted", "--data", &test, "--out", s(&sweep)];
        base.extend(common);
        cli(&base)?;
        let rerank = dir.join("rerank.tsv");
        let mut rr = vec!["rerank-eval", "--ckpt", s(&ckpt), "--data", &test, "--out", s(&rerank)];
        rr.extend(common);
        cli(&rr)?;
    }
    compared.push(format!("evaluate/predict/baseline/rerank-eval {}", same(&outputs.join("a"), &outputs.join("b"))?));
    Ok(format!("byte-identical files: {}", compared.join(", ")))
}

fn criterion_8(ws: &Workspace) -> Outcome {
    let started = Instant::now();
    let alone = ws.root.join("head");
    if !alone.join("history.tsv").exists() {
        ws.train("head", &[])?;
    }
    let pre = ws.root.join("cli_pre");
    cli(&[
        "cli-pretrain", "--source", s(&ws.data("source.jsonl")), "--vectors", s(&ws.data("vectors.nfv")),
        "--source-index", s(&ws.index()), "--out-dir", s(&pre), "--epochs", "1", "--lr", "0.01", "--seed", "7",
        "--k", "10", "--lambda", "0.3",
    ])?;
    let adapted = ws.train("cli_then_train", &["--init-from", s(&pre.join("pretrained.nfp"))])?;
    let f_alone = best_dev_f1(&alone.join("history.tsv"))?;
    let f_cli = best_dev_f1(&adapted.join("history.tsv"))?;
    let detail = format!(
        "dev F1: cli-pretrain->train {f_cli:.4}, train alone {f_alone:.4}, {:.1}s",
        started.elapsed().as_secs_f64()
    );
    ensure!(f_cli >= f_alone, "{detail}");
    ensure!(started.elapsed() < Duration::from_secs(180), "{detail}: over 3 minutes");
    Ok(detail)
}

fn main() {
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut run = |id: u8, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let (tag, text) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(e) => ("FAIL", e),
        };
        println!("[{tag}] criterion {id} ({name}): {text} [{:.1}s]", started.elapsed().as_secs_f64());
        results.push((id, name, outcome));
    };

    run(1, "gradient oracle", &mut criterion_1);
    run(2, "retrieval oracle", &mut criterion_2);
    run(3, "invariant suite", &mut criterion_3);
    let setup = Instant::now();
    let ws = Workspace::new();
    match &ws {
        Ok(ws) => {
            run(4, "synthetic transfer", &mut || criterion_4(ws, setup));
            run(5, "re-ranking", &mut || criterion_5(ws));
            run(6, "lambda endpoints", &mut criterion_6);
            run(7, "determinism", &mut || criterion_7(ws));
            run(8, "CLI pre-training", &mut || criterion_8(ws));
        }
        Err(e) => {
            for (id, name) in [(4, "synthetic transfer"), (5, "re-ranking"), (7, "determinism"), (8, "CLI pre-training")] {
                run(id, name, &mut || Err(format!("workspace setup failed: {e}")));
            }
            run(6, "lambda endpoints", &mut criterion_6);
        }
    }
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
