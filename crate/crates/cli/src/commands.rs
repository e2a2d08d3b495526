use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use gateskip::analysis::{
    distribution_csv, heatmap_matrix, histogram_csv, record_trace, site_distribution, vocab_csv,
    vocab_topk, GateTrace, VocabStats,
};
use gateskip::evaluation::{compare_random_baseline, sweep, EvalSet, SweepReport};
use gateskip::inference::{self, GenerationConfig, Sampling};
use gateskip::io::{load_checkpoint, save_checkpoint, write_atomic, RunConfig};
use gateskip::model::{gate_param_count, GateArch, GateConfig, GateShape, GateSharing, Model, ModuleKind};
use gateskip::skipping::{random_skip_mask, select_skips, ImportanceScores};
use gateskip::tokenizer;
use gateskip::training::{Corpus, Trainer};
use gateskip::Error;

use crate::{AnalyzeArgs, CountArgs, GenerateArgs, SimulateArgs, SweepArgs, TrainArgs};

/// Exit code 2 for bad input or configuration, 1 for anything that fails
/// once the work has started.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::CheckpointVersion { .. } => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn context(what: impl std::fmt::Display) -> impl FnOnce(Error) -> Failure {
    move |e| match Failure::from(e) {
        Failure::Usage(e) => Failure::Usage(e.context(what.to_string())),
        Failure::Runtime(e) => Failure::Runtime(e.context(what.to_string())),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn read_bytes(path: &Path, what: &str) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Runtime(anyhow!("cannot read {what} {}: {e}", path.display())))
}

fn out_dir(flag: Option<PathBuf>, configured: Option<PathBuf>) -> Result<PathBuf, Failure> {
    let dir = flag.or(configured).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .map_err(|e| usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_output(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf, Failure> {
    let path = dir.join(name);
    write_atomic(&path, contents).map_err(context(format!("writing {}", path.display())))?;
    Ok(path)
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    require_file(path, "checkpoint")?;
    load_checkpoint(path).map_err(context(format!("loading {}", path.display())))
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Failure> {
    let text = match path {
        Some(p) => {
            require_file(p, "config file")?;
            let bytes = read_bytes(p, "config file")?;
            String::from_utf8(bytes).map_err(|_| usage(format!("{} is not UTF-8", p.display())))?
        }
        None => String::new(),
    };
    RunConfig::load(&text, overrides).map_err(|e| usage(e))
}

fn check_budgets(budgets: &[f64]) -> Result<(), Failure> {
    if budgets.is_empty() {
        return Err(usage("no budgets given"));
    }
    match budgets.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
        Some(b) => Err(usage(format!("budget {b} outside (0, 1]"))),
        None => Ok(()),
    }
}

pub fn train(args: TrainArgs, out: Option<PathBuf>) -> Outcome {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(c) = args.corpus {
        cfg.corpus = Some(c);
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if !(0.0..1.0).contains(&args.held_out) {
        return Err(usage(format!("--held-out {} outside [0, 1)", args.held_out)));
    }
    let corpus_path = cfg
        .corpus
        .clone()
        .ok_or_else(|| usage("no corpus given (--corpus or paths.corpus)"))?;
    require_file(&corpus_path, "corpus")?;
    let dir = out_dir(out, cfg.out_dir.clone())?;
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| dir.join("model.ckpt"));

    let corpus = Corpus::from_bytes(&read_bytes(&corpus_path, "corpus")?, args.held_out)?;
    if corpus.train.len() <= cfg.train.seq_len {
        return Err(usage(format!(
            "corpus has {} training tokens, fewer than seq_len + 1 = {}",
            corpus.train.len(),
            cfg.train.seq_len + 1
        )));
    }
    let model = Model::new(cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut log = Vec::new();
    let every = args.log_every;
    let result = trainer.run(&corpus.train, &mut log, &mut |_, entry| {
        if every > 0 && (entry.step % every == 0 || entry.step == 1) {
            eprintln!("{entry}");
        }
        Ok(())
    });
    // The log is kept even when training stops early.
    let log_path = write_output(&dir, "train.log", &log)?;
    let logs = result.map_err(|e| Failure::Runtime(anyhow::Error::new(e).context("training")))?;
    save_checkpoint(&trainer.model, &ckpt).map_err(context(format!("writing {}", ckpt.display())))?;
    if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
        println!("steps = {}", logs.len());
        println!("first_ce = {:.6}", first.ce);
        println!("final_ce = {:.6}", last.ce);
    }
    println!("checkpoint = {}", ckpt.display());
    println!("log = {}", log_path.display());
    Ok(())
}

fn generation_config(args: &GenerateArgs) -> Result<GenerationConfig, Failure> {
    let cfg = GenerationConfig {
        budget: args.budget,
        max_new_tokens: args.max_new_tokens,
        sampling: if args.temperature == 0.0 {
            Sampling::Greedy
        } else {
            Sampling::Temperature(args.temperature)
        },
        eos_id: (!args.no_eos).then_some(tokenizer::EOS),
        seed: args.seed,
        window: args.window,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn generate(args: GenerateArgs) -> Outcome {
    let cfg = generation_config(&args)?;
    if args.prompt.is_empty() {
        return Err(usage("empty prompt"));
    }
    let model = load_model(&args.checkpoint)?;
    let prompt = tokenizer::encode(args.prompt.as_bytes());
    if prompt.len() > model.config.max_seq {
        return Err(usage(format!(
            "prompt has {} tokens; the model accepts at most {}",
            prompt.len(),
            model.config.max_seq
        )));
    }
    let generation = inference::generate(&model, &prompt, &cfg)?;
    print!("{}", generation.to_text(model.config.n_layers));
    Ok(())
}

pub fn eval_sweep(args: SweepArgs, out: Option<PathBuf>) -> Outcome {
    check_budgets(&args.budgets)?;
    require_file(&args.corpus, "corpus")?;
    let expected = match &args.config {
        Some(p) => Some(load_config(Some(p), &[])?),
        None => None,
    };
    let dir = out_dir(out, expected.as_ref().and_then(|c| c.out_dir.clone()))?;
    let model = load_model(&args.checkpoint)?;
    if let Some(exp) = expected {
        if exp.model != model.config {
            return Err(usage(format!(
                "checkpoint {} was saved with {:?}, but the configuration asks for {:?}",
                args.checkpoint.display(),
                model.config,
                exp.model
            )));
        }
    }
    let seq_len = args
        .seq_len
        .unwrap_or_else(|| 64.min(model.config.max_seq.saturating_sub(1)));
    if seq_len == 0 || seq_len >= model.config.max_seq {
        return Err(usage(format!(
            "--seq-len must be in 1..{}",
            model.config.max_seq
        )));
    }
    let corpus = Corpus::from_bytes(&read_bytes(&args.corpus, "corpus")?, args.held_out)?;
    let set = EvalSet::from_corpus(&corpus, seq_len, args.max_sequences, args.probes, args.probe_len)?;

    let points = sweep(&model, &set, &args.budgets)?;
    let baseline = if args.baseline {
        let fractions: Vec<f64> = points
            .iter()
            .map(|p| p.realized_savings.clamp(0.0, 1.0))
            .collect();
        compare_random_baseline(&model, &set, &fractions, args.seed)?
    } else {
        Vec::new()
    };
    let report = SweepReport::new(points, baseline, &args.targets)?;
    let path = write_output(&dir, "sweep.csv", report.to_csv().as_bytes())?;
    print!("{}", report.to_text());
    println!("csv = {}", path.display());
    Ok(())
}

fn analysis_sequences(args: &AnalyzeArgs, max_seq: usize) -> Result<Vec<Vec<u32>>, Failure> {
    let bytes = match (&args.text, &args.input) {
        (Some(t), _) => t.as_bytes().to_vec(),
        (None, Some(p)) => {
            require_file(p, "input")?;
            read_bytes(p, "input")?
        }
        (None, None) => return Err(usage("give --text or --input")),
    };
    if bytes.is_empty() {
        return Err(usage("input is empty"));
    }
    let per = if args.bos { max_seq - 1 } else { max_seq };
    if args.text.is_some() && bytes.len() > per {
        return Err(usage(format!(
            "--text has {} tokens; the model accepts at most {per}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks(per.max(1))
        .map(|c| {
            if args.bos {
                tokenizer::encode_with_bos(c)
            } else {
                tokenizer::encode(c)
            }
        })
        .collect())
}

pub fn analyze(args: AnalyzeArgs, out: Option<PathBuf>) -> Outcome {
    if !(args.budget > 0.0 && args.budget <= 1.0) {
        return Err(usage(format!("budget {} outside (0, 1]", args.budget)));
    }
    if args.top_k == 0 {
        return Err(usage("--top-k must be at least 1"));
    }
    let dir = out_dir(out, None)?;
    let model = load_model(&args.checkpoint)?;
    let sequences = analysis_sequences(&args, model.config.max_seq)?;

    let traces: Vec<GateTrace> = sequences
        .iter()
        .map(|s| record_trace(&model, s, args.budget))
        .collect::<Result<_, _>>()?;
    let first = &traces[0];
    let mut written = Vec::new();
    written.push(write_output(&dir, "trace.csv", first.to_csv()?.as_bytes())?);
    for kind in ModuleKind::ALL {
        let h = heatmap_matrix(first, kind)?;
        let name = format!("heatmap_{}.csv", kind.as_str());
        written.push(write_output(&dir, &name, h.to_csv()?.as_bytes())?);
    }

    let mut stats = VocabStats::new();
    for t in &traces {
        stats.add_trace(t, args.module);
    }
    let top = vocab_topk(&stats, args.top_k)?;
    written.push(write_output(&dir, "vocab.csv", vocab_csv(&top.entries)?.as_bytes())?);

    let mut rows = Vec::new();
    for layer in 0..model.config.n_layers {
        for kind in ModuleKind::ALL {
            match site_distribution(&traces, layer, kind) {
                Ok(d) => rows.push((layer, kind, d)),
                Err(Error::Insufficient(m)) => eprintln!("note: layer {layer} {kind}: {m}"),
                Err(e) => return Err(e.into()),
            }
        }
    }
    written.push(write_output(&dir, "distribution.csv", distribution_csv(&rows)?.as_bytes())?);
    written.push(write_output(&dir, "histogram.csv", histogram_csv(&rows)?.as_bytes())?);

    println!("sequences = {}", traces.len());
    if let Some(m) = top.margin {
        println!("top_margin = {m:.6}");
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Three significant digits.
fn percent(p: f64) -> String {
    if p == 0.0 {
        return "0%".to_string();
    }
    let decimals = (2 - p.abs().log10().floor() as i32).max(0) as usize;
    format!("{p:.decimals$}%")
}

pub fn count_params(args: CountArgs) -> Outcome {
    if args.layers == 0 {
        return Err(usage("--layers must be at least 1"));
    }
    if args.hidden == 0 {
        return Err(usage("--hidden must be at least 1"));
    }
    if let Some(b) = args.backbone {
        if !(b.is_finite() && b > 0.0) {
            return Err(usage(format!("--backbone {b} must be positive")));
        }
    }
    let variants: Vec<GateConfig> = if args.all {
        let mut v = Vec::new();
        for &sharing in GateSharing::ALL {
            for &shape in GateShape::ALL {
                for &arch in GateArch::ALL {
                    v.push(GateConfig {
                        shape,
                        sharing,
                        arch,
                        ..GateConfig::default()
                    });
                }
            }
        }
        v
    } else {
        vec![GateConfig {
            shape: args.shape,
            sharing: args.sharing,
            arch: args.arch,
            ..GateConfig::default()
        }]
    };
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<7} {:<11} {:<10} {:>16} {:>10}",
        "shape", "sharing", "arch", "gate_params", "overhead"
    );
    for g in &variants {
        let n = gate_param_count(g, args.hidden, args.layers);
        let overhead = match args.backbone {
            Some(b) => percent(100.0 * n as f64 / b),
            None => "-".to_string(),
        };
        let _ = writeln!(
            table,
            "{:<7} {:<11} {:<10} {:>16} {:>10}",
            g.shape.as_str(),
            g.sharing.as_str(),
            g.arch.as_str(),
            group_thousands(n),
            overhead
        );
    }
    print!("{table}");
    Ok(())
}

/// Per-budget comparison of quantile and random skip sets over every
/// recorded site.
#[derive(Debug, PartialEq)]
pub struct SimulationRow {
    pub budget: f64,
    pub quantile_fraction: f64,
    pub random_fraction: f64,
    /// Share of (site, position) pairs on which the two policies agree.
    pub agreement: f64,
}

pub fn simulate(trace: &GateTrace, budgets: &[f64], seed: u64) -> Result<Vec<SimulationRow>, Error> {
    let mut sites: std::collections::BTreeMap<(usize, ModuleKind), Vec<(usize, f64)>> =
        Default::default();
    for e in &trace.entries {
        sites.entry((e.layer, e.module)).or_default().push((e.position, e.score));
    }
    let mut sorted = budgets.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    for b in sorted {
        let (mut q_skips, mut r_skips, mut agree, mut total) = (0usize, 0usize, 0usize, 0usize);
        for (i, entries) in sites.values_mut().enumerate() {
            entries.sort_by_key(|(p, _)| *p);
            let scores = ImportanceScores(entries.iter().map(|(_, s)| *s).collect());
            let active: Vec<usize> = (0..scores.len()).collect();
            let q = select_skips(&scores, b, &active)?.mask;
            let site_seed = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let r = random_skip_mask(scores.len(), 1.0 - b, site_seed)?;
            q_skips += q.skipped();
            r_skips += r.skipped();
            agree += q.as_slice().iter().zip(r.as_slice()).filter(|(a, b)| a == b).count();
            total += scores.len();
        }
        let t = total.max(1) as f64;
        rows.push(SimulationRow {
            budget: b,
            quantile_fraction: q_skips as f64 / t,
            random_fraction: r_skips as f64 / t,
            agreement: agree as f64 / t,
        });
    }
    Ok(rows)
}

pub fn simulate_skip(args: SimulateArgs, out: Option<PathBuf>) -> Outcome {
    check_budgets(&args.budgets)?;
    require_file(&args.trace, "trace")?;
    let dir = out_dir(out, None)?;
    let bytes = read_bytes(&args.trace, "trace")?;
    let text = String::from_utf8(bytes).map_err(|_| usage("trace is not UTF-8"))?;
    let trace = GateTrace::from_csv(&text).map_err(context(format!("parsing {}", args.trace.display())))?;
    let rows = simulate(&trace, &args.budgets, args.seed)?;
    let mut csv = String::from("budget,quantile_skip_fraction,random_skip_fraction,agreement\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{:.6},{:.6},{:.6},{:.6}",
            r.budget, r.quantile_fraction, r.random_fraction, r.agreement
        );
    }
    let path = write_output(&dir, "simulate.csv", csv.as_bytes())?;
    print!("{csv}");
    println!("csv = {}", path.display());
    Ok(())
}
