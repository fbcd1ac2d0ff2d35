use std::fmt::Write as _;
use std::path::Path;

use knnplus::baselines::{parse_ks, rerank_all, sweep_k, sweep_tsv, VoteMethod};
use knnplus::embed::embed_text;
use knnplus::eval::{evaluate, retrieve_all, HeadPredictor, Predictor};
use knnplus::model::{load_checkpoint, save_checkpoint};
use knnplus::synth::{generate, SynthConfig};
use knnplus::train::{random_gradcheck, write_history, GradCheckSettings, Optimizer, TrainConfig, Trainer};
use knnplus::{
    Dataset, DatasetRole, EmbeddingTable, Error, Execution, HeadConfig, Index, Interaction,
    LabelVocabulary, Result, SplitSpec, Tables,
};

use crate::{
    BaselineArgs, Command, EmbedArgs, EvaluateArgs, GradcheckArgs, HeadArgs, IndexBuildArgs, IndexCommand,
    LambdaSweepArgs, OptimizerArg, PredictArgs, PretrainArgs, RerankArgs, ScheduleArgs, SynthArgs, TrainArgs,
    VectorArgs, VoteArg,
};

pub fn dispatch(command: &Command, exec: Execution) -> Result<()> {
    match command {
        Command::Embed(a) => embed(a),
        Command::Index(IndexCommand::Build(a)) => index_build(a),
        Command::Train(a) => train(a, exec),
        Command::CliPretrain(a) => cli_pretrain(a, exec),
        Command::Predict(a) => predict(a, exec),
        Command::Evaluate(a) => evaluate_cmd(a, exec),
        Command::Baseline(a) => baseline(a, exec),
        Command::RerankEval(a) => rerank_eval(a, exec),
        Command::LambdaSweep(a) => lambda_sweep(a, exec),
        Command::Gradcheck(a) => gradcheck(a, exec),
        Command::Synth(a) => synth(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Validation(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::Validation(format!("cannot create {}: {e}", path.display())))
}

fn load_data(path: &Path, role: DatasetRole) -> Result<Dataset> {
    Dataset::load_jsonl(path, role, &LabelVocabulary::default())
}

fn load_table(path: &Path) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path, None)
}

fn load_tables(v: &VectorArgs) -> Result<Tables> {
    let (first, rest) = v.vectors.split_first().ok_or_else(|| Error::Argument("no --vectors given".into()))?;
    let mut retrieval = load_table(first)?;
    for path in rest {
        retrieval.merge(&load_table(path)?)?;
    }
    Ok(Tables {
        retrieval,
        head: v.head_vectors.as_deref().map(load_table).transpose()?,
        pairs: v.pair_vectors.as_deref().map(load_table).transpose()?,
    })
}

fn head_config(args: &HeadArgs, tables: &Tables, seed: u64) -> HeadConfig {
    let interaction = match &tables.pairs {
        Some(p) => Interaction::Pair { dim: p.dim() },
        None => Interaction::BiEncoder,
    };
    HeadConfig {
        d: tables.head().dim(),
        p: if tables.pairs.is_some() { 0 } else { args.p },
        h_r: args.h_r,
        k: args.k,
        lambda: args.lambda,
        seed,
        interaction,
    }
}

fn optimizer(o: OptimizerArg) -> Optimizer {
    match o {
        OptimizerArg::Adam => Optimizer::adam(),
        OptimizerArg::Sgd => Optimizer::Sgd,
    }
}

fn train_config(s: &ScheduleArgs, exec: Execution) -> TrainConfig {
    TrainConfig {
        epochs: s.epochs,
        accumulation: s.accum,
        lr: s.lr,
        optimizer: optimizer(s.optimizer),
        early_stop_delta: s.delta,
        early_stop_patience: s.patience,
        eval_every: s.eval_every,
        checkpoint_every_steps: s.checkpoint_every,
        seed: s.seed,
        exec,
    }
}

fn fmt_f1(f: Option<f64>) -> String {
    f.map_or_else(|| "-".into(), |f| format!("{f:.4}"))
}

fn embed(a: &EmbedArgs) -> Result<()> {
    if a.dim < 2 {
        return Err(Error::Argument("--dim must be at least 2".into()));
    }
    let data = Dataset::load_queries_jsonl(&a.data, &LabelVocabulary::default())?;
    let mut table = EmbeddingTable::new(a.dim);
    for ex in data.examples() {
        table.insert(ex.id.clone(), &embed_text(&ex.text, a.dim, a.seed))?;
    }
    table.save(&a.out)?;
    println!("embedded {} texts into {} dimensions", table.len(), a.dim);
    Ok(())
}

fn index_build(a: &IndexBuildArgs) -> Result<()> {
    let data = load_data(&a.data, DatasetRole::Source)?;
    let tables = load_tables(&a.vectors)?;
    let index = Index::build(&data, &tables.retrieval)?;
    index.save(&a.out)?;
    let counts = data.counts();
    println!("indexed {} rows ({} flagged, {} neutral)", index.len(), counts.flagged, counts.neutral);
    Ok(())
}

fn train(a: &TrainArgs, exec: Execution) -> Result<()> {
    let index = Index::load(&a.source_index)?;
    let train = load_data(&a.target_train, DatasetRole::Target)?;
    let dev = load_data(&a.target_dev, DatasetRole::Target)?;
    let tables = load_tables(&a.vectors)?;
    let mut head = head_config(&a.head, &tables, a.schedule.seed);
    let init = match &a.init_from {
        Some(path) => {
            let (cfg, params) = load_checkpoint(path)?;
            head = HeadConfig { k: head.k, lambda: head.lambda, seed: head.seed, ..cfg };
            Some(params)
        }
        None => None,
    };
    let mut trainer = Trainer::new(head, train_config(&a.schedule, exec)).with_checkpoint_dir(&a.out_dir);
    if let Some(p) = init {
        trainer = trainer.with_init(p);
    }
    let out = trainer.fit(&train, &dev, &index, &tables)?;
    save_checkpoint(&a.out_dir.join("final.nfp"), &head, &out.final_params)?;
    write_history(&a.out_dir.join("history.tsv"), &out.history)?;
    println!(
        "steps {}\tbest_dev_f1 {}\tstopped_early {}",
        out.steps,
        fmt_f1(out.best_dev_f1),
        out.stopped_early
    );
    Ok(())
}

fn cli_pretrain(a: &PretrainArgs, exec: Execution) -> Result<()> {
    let source = load_data(&a.source, DatasetRole::Source)?;
    let tables = load_tables(&a.vectors)?;
    let index = match &a.source_index {
        Some(p) => Index::load(p)?,
        None => Index::build(&source, &tables.retrieval)?,
    };
    let dev = a.dev.as_deref().map(|p| load_data(p, DatasetRole::Target)).transpose()?;
    let head = head_config(&a.head, &tables, a.seed);
    let config = TrainConfig {
        epochs: a.epochs,
        accumulation: a.accum,
        lr: a.lr,
        optimizer: optimizer(a.optimizer),
        checkpoint_every_steps: a.checkpoint_every,
        seed: a.seed,
        exec,
        ..TrainConfig::default()
    };
    create_dir(&a.out_dir)?;
    let out = Trainer::new(head, config)
        .with_checkpoint_dir(&a.out_dir)
        .pretrain_cli(&source, &index, &tables, dev.as_ref())?;
    save_checkpoint(&a.out_dir.join("pretrained.nfp"), &head, &out.best_params)?;
    write_history(&a.out_dir.join("history.tsv"), &out.history)?;
    println!("steps {}\tbest_dev_f1 {}", out.steps, fmt_f1(out.best_dev_f1));
    Ok(())
}

fn predict(a: &PredictArgs, exec: Execution) -> Result<()> {
    let (cfg, params) = load_checkpoint(&a.ckpt)?;
    let index = Index::load(&a.index)?;
    let queries = Dataset::load_queries_jsonl(&a.input, &LabelVocabulary::default())?;
    let tables = load_tables(&a.vectors)?;
    let predictor = HeadPredictor { config: cfg, params: &params, tables: &tables };
    let neighbourhoods = retrieve_all(&queries, &index, &tables, cfg.k, false, exec)?;
    let pairs: Vec<_> = queries.examples().iter().zip(&neighbourhoods).collect();
    let predictions = knnplus::par::try_map(exec, &pairs, |(ex, n)| predictor.predict(ex, n))?;

    let mut out = String::from("id\tpredicted");
    if a.explain {
        out.push_str("\tneighbours\tattention\tagreement");
    }
    out.push('\n');
    let list = |v: &Option<Vec<f64>>| {
        v.as_deref().unwrap_or(&[]).iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
    };
    for ((ex, n), p) in pairs.iter().zip(&predictions) {
        write!(out, "{}\t{}", ex.id, p.label).unwrap();
        if a.explain {
            let ids: Vec<&str> = n.hits.iter().map(|h| h.id.as_str()).collect();
            write!(out, "\t{}\t{}\t{}", ids.join(","), list(&p.attention), list(&p.agreement)).unwrap();
        }
        out.push('\n');
    }
    write_text(&a.out, &out)?;
    let flagged = predictions.iter().filter(|p| p.label.is_flagged()).count();
    println!("predicted {} queries, {flagged} flagged", predictions.len());
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, exec: Execution) -> Result<()> {
    let (cfg, params) = load_checkpoint(&a.ckpt)?;
    let index = Index::load(&a.index)?;
    let data = load_data(&a.data, DatasetRole::Target)?;
    let tables = load_tables(&a.vectors)?;
    let predictor = HeadPredictor { config: cfg, params: &params, tables: &tables };
    let report = evaluate(&predictor, &data, &index, &tables, cfg.k, a.explain, exec)?;
    report.save(&a.out)?;
    let m = report.metrics();
    println!("precision {:.4}\trecall {:.4}\tf1 {:.4}", m.precision, m.recall, m.f1);
    Ok(())
}

fn depth_for(ks: &[usize], depth: Option<usize>) -> usize {
    let max_k = ks.iter().copied().max().unwrap_or(1);
    depth.unwrap_or(max_k.max(20))
}

fn baseline(a: &BaselineArgs, exec: Execution) -> Result<()> {
    let ks = parse_ks(&a.k_sweep)?;
    let index = Index::load(&a.index)?;
    let data = load_data(&a.data, DatasetRole::Target)?;
    let tables = load_tables(&a.vectors)?;
    let method = match a.method {
        VoteArg::Majority => VoteMethod::Majority,
        VoteArg::Weighted => VoteMethod::Weighted,
    };
    let neighbourhoods = retrieve_all(&data, &index, &tables, depth_for(&ks, a.depth), false, exec)?;
    let gold: Vec<_> = data.examples().iter().map(|e| e.label).collect();
    let rows = sweep_k(&neighbourhoods, method, &ks, &gold, exec)?;
    let tsv = sweep_tsv(&rows);
    write_text(&a.out, &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn rerank_eval(a: &RerankArgs, exec: Execution) -> Result<()> {
    let ks = parse_ks(&a.k_sweep)?;
    let (cfg, params) = load_checkpoint(&a.ckpt)?;
    let index = Index::load(&a.index)?;
    let data = load_data(&a.data, DatasetRole::Target)?;
    let tables = load_tables(&a.vectors)?;
    let before = retrieve_all(&data, &index, &tables, depth_for(&ks, a.depth), false, exec)?;
    let after = rerank_all(&before, &cfg, &params, &tables, exec)?;
    let gold: Vec<_> = data.examples().iter().map(|e| e.label).collect();
    let rows_before = sweep_k(&before, VoteMethod::Majority, &ks, &gold, exec)?;
    let rows_after = sweep_k(&after, VoteMethod::Majority, &ks, &gold, exec)?;
    let mut out = String::from("k\tprecision_before\trecall_before\tf1_before\tprecision_after\trecall_after\tf1_after\n");
    for (b, r) in rows_before.iter().zip(&rows_after) {
        let (mb, ma) = (b.metrics, r.metrics);
        writeln!(
            out,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            b.k, mb.precision, mb.recall, mb.f1, ma.precision, ma.recall, ma.f1
        )
        .unwrap();
    }
    write_text(&a.out, &out)?;
    print!("{out}");
    Ok(())
}

fn parse_lambdas(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| match t.trim().parse::<f64>() {
            Ok(l) if (0.0..=1.0).contains(&l) => Ok(l),
            _ => Err(Error::Argument(format!("bad lambda {t:?}"))),
        })
        .collect()
}

fn lambda_sweep(a: &LambdaSweepArgs, exec: Execution) -> Result<()> {
    let lambdas = parse_lambdas(&a.lambdas)?;
    let index = Index::load(&a.source_index)?;
    let train = load_data(&a.target_train, DatasetRole::Target)?;
    let dev = load_data(&a.target_dev, DatasetRole::Target)?;
    let test = a.target_test.as_deref().map(|p| load_data(p, DatasetRole::Target)).transpose()?;
    let tables = load_tables(&a.vectors)?;
    let config = train_config(&a.schedule, exec);

    let probe = Trainer::new(head_config(&a.head, &tables, a.schedule.seed), config.clone());
    let train_batches = probe.prepare_batches(&train, &index, &tables, false)?;
    let dev_batches = probe.prepare_batches(&dev, &index, &tables, false)?;

    let mut out = String::from("lambda\tdev_f1\ttest_precision\ttest_recall\ttest_f1\n");
    for lambda in lambdas {
        let head = HeadConfig { lambda, ..head_config(&a.head, &tables, a.schedule.seed) };
        let result = Trainer::new(head, config.clone()).run(&train_batches, Some(&dev_batches))?;
        write!(out, "{lambda}\t{}", fmt_f1(result.best_dev_f1)).unwrap();
        match &test {
            Some(test) => {
                let predictor = HeadPredictor { config: head, params: &result.best_params, tables: &tables };
                let m = evaluate(&predictor, test, &index, &tables, head.k, false, exec)?.metrics();
                writeln!(out, "\t{:.4}\t{:.4}\t{:.4}", m.precision, m.recall, m.f1).unwrap();
            }
            None => out.push_str("\t-\t-\t-\n"),
        }
    }
    write_text(&a.out, &out)?;
    print!("{out}");
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, exec: Execution) -> Result<()> {
    let settings = GradCheckSettings { seed: a.seed, trials: a.trials, ..GradCheckSettings::default() };
    let report = random_gradcheck(&settings, exec)?;
    println!("trial\tk\tlambda\ttensor\tindex\trel_error");
    for (i, t) in report.trials.iter().enumerate() {
        println!("{i}\t{}\t{}\t{}\t{}\t{:.3e}", t.k, t.lambda, t.worst.tensor, t.worst.index, t.worst.rel_error);
    }
    let max = report.max_rel_error();
    println!("max relative error: {max:.3e}");
    if max.is_nan() || max >= a.tolerance {
        return Err(Error::Training(format!("gradient check failed: {max:.3e} >= {:.1e}", a.tolerance)));
    }
    Ok(())
}

fn parse_fractions(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Argument(format!("bad fraction {t:?}"))))
        .collect::<Result<_>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| Error::Argument("--split needs three fractions".into()))
}

fn synth(a: &SynthArgs) -> Result<()> {
    if a.dim < 2 {
        return Err(Error::Argument("--dim must be at least 2".into()));
    }
    let cfg = SynthConfig {
        seed: a.seed,
        source_n: a.source_n,
        target_n: a.target_n,
        dim: a.dim,
        label_dims: a.dim / 2,
        ..SynthConfig::default()
    };
    let [tr, dv, te] = parse_fractions(&a.split)?;
    let spec = SplitSpec::new(tr, dv, te, a.seed)?;
    let data = generate(&cfg)?;
    data.write(&a.out_dir)?;
    let (train, dev, test) = data.target.split(&spec)?;
    for part in [&train, &dev, &test] {
        part.write_jsonl(&a.out_dir.join(format!("{}.jsonl", part.name())))?;
    }
    println!(
        "source {}\ttarget {} (train {}, dev {}, test {})\tdim {}",
        data.source.len(),
        data.target.len(),
        train.len(),
        dev.len(),
        test.len(),
        a.dim
    );
    Ok(())
}
