use super::*;
use crate::model::{GateConfig, ModelConfig};
use crate::numerics::Tensor;

fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        n_layers: 2,
        hidden: 16,
        n_heads: 2,
        ff_dim: 32,
        max_seq: 64,
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).unwrap()
}

fn tiny_train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        schedule: BudgetSchedule::new(1.0, 0.8, steps).unwrap(),
        total_steps: steps,
        warmup_steps: steps / 10,
        batch_size: 4,
        seq_len: 16,
        peak_lr: 1e-2,
        ..TrainConfig::default()
    }
}

fn repeating_corpus() -> Vec<u32> {
    let unit = b"the quick brown fox jumps over the lazy dog; pack my box with 5 ";
    assert_eq!(unit.len(), 64);
    unit.iter().cycle().take(64 * 40).map(|b| *b as u32).collect()
}

#[test]
fn sparsity_loss_means() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::full(&[3, 4], 0.5));
    let b = t.constant(Tensor::full(&[2, 1], 0.5));
    let s = sparsity_loss(&mut t, &[a, b]).unwrap();
    assert_eq!(t.value(s).item(), 0.5);

    let lo = t.constant(Tensor::full(&[2, 3], 0.2));
    let hi = t.constant(Tensor::full(&[2, 3], 0.8));
    let s = sparsity_loss(&mut t, &[lo, hi]).unwrap();
    assert!((t.value(s).item() - 0.5).abs() < 1e-15);

    let z = t.constant(Tensor::full(&[4], 1e-12));
    let s = sparsity_loss(&mut t, &[z]).unwrap();
    assert!(t.value(s).item() < 1e-11);
    assert!(sparsity_loss(&mut t, &[]).is_err());
}

#[test]
fn total_loss_arithmetic() {
    let mut t = Tape::new();
    let ce = t.constant(Tensor::scalar(2.0));
    let s = t.constant(Tensor::scalar(0.5));
    let l = total_loss(&mut t, ce, s, 0.1).unwrap();
    assert!((t.value(l).item() - 2.05).abs() < 1e-15);
    let l = total_loss(&mut t, ce, s, 0.0).unwrap();
    assert_eq!(t.value(l).item(), 2.0);
}

#[test]
fn total_loss_gradient_is_linear_in_weight() {
    let model = tiny_model(3);
    let tokens: Vec<u32> = b"gated residual".iter().map(|b| *b as u32).collect();
    let bias_grads = |weight: f64| -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let pass = model
            .forward(
                &mut tape,
                &vars,
                &tokens[..tokens.len() - 1],
                &mut crate::skipping::NoSkip,
                None,
                ForwardOptions::default(),
            )
            .unwrap();
        let targets: Vec<usize> = tokens[1..].iter().map(|t| *t as usize).collect();
        let ce = tape
            .cross_entropy(pass.logits, &targets, &vec![true; targets.len()])
            .unwrap();
        let sp = sparsity_loss(&mut tape, &pass.gate_activations).unwrap();
        let loss = total_loss(&mut tape, ce, sp, weight).unwrap();
        tape.backward(loss).unwrap();
        let mut out = Vec::new();
        vars.visit(&mut |name, v| {
            if name.ends_with("_gate.bias") {
                out.extend(tape.grad(*v).unwrap().into_data());
            }
        });
        out
    };
    let (g0, g1, gh) = (bias_grads(0.0), bias_grads(1.0), bias_grads(0.5));
    for ((a, b), h) in g0.iter().zip(&g1).zip(&gh) {
        let predicted = a + 0.5 * (b - a);
        assert!((h - predicted).abs() <= 1e-12 * (1.0 + h.abs()), "{h} vs {predicted}");
    }
    assert!(g0.iter().zip(&g1).any(|(a, b)| a != b));
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let corpus = repeating_corpus();
    let run = || {
        let mut tr = Trainer::new(tiny_model(1), tiny_train_config(5)).unwrap();
        let logs = tr.run(&corpus, &mut std::io::sink(), &mut |_, _| Ok(())).unwrap();
        (tr.model.params, logs)
    };
    assert_eq!(run(), run());
}

#[test]
fn first_step_at_full_budget_skips_at_most_one_token_per_module() {
    let corpus = repeating_corpus();
    let cfg = tiny_train_config(10);
    let mut tr = Trainer::new(tiny_model(2), cfg).unwrap();
    let batch = BatchSampler::new(cfg.batch_size, cfg.seq_len, 7).next_batch(&corpus).unwrap();
    let log = tr.train_step(&batch, 1).unwrap();
    assert_eq!(log.budget, 1.0);
    for f in &log.skip_fraction {
        // two modules per layer, each skipping at most one of seq_len tokens
        assert!(*f <= 1.0 / cfg.seq_len as f64 + 1e-12, "{f}");
    }
}

#[test]
fn smoke_training_reduces_cross_entropy() {
    let corpus = repeating_corpus();
    let mut tr = Trainer::new(tiny_model(4), tiny_train_config(200)).unwrap();
    let logs = tr.run(&corpus, &mut std::io::sink(), &mut |_, _| Ok(())).unwrap();
    let mean = |s: &[StepLog]| s.iter().map(|l| l.ce).sum::<f64>() / s.len() as f64;
    let early = mean(&logs[..20]);
    let late = mean(&logs[180..]);
    assert!(late < early, "{early} -> {late}");
    for w in logs.windows(2) {
        assert!(w[1].budget <= w[0].budget);
    }
    for l in &logs {
        assert!(l.grad_norm.is_finite());
    }
}

#[test]
fn frozen_ce_pushes_gates_down() {
    let corpus = repeating_corpus();
    let cfg = TrainConfig {
        warmup_steps: 0,
        total_steps: 1000,
        schedule: BudgetSchedule::new(1.0, 1.0, 1000).unwrap(),
        batch_size: 2,
        seq_len: 16,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(tiny_model(5), cfg).unwrap();
    tr.freeze_ce = true;
    let batch = BatchSampler::new(2, 16, 3).next_batch(&corpus).unwrap();
    let mut prev = mean_gate_activation(&tr.model, &batch).unwrap();
    for t in 1..=10 {
        tr.train_step(&batch, t).unwrap();
        let now = mean_gate_activation(&tr.model, &batch).unwrap();
        assert!(now < prev, "step {t}: {prev} -> {now}");
        prev = now;
    }
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let mut model = tiny_model(6);
    model.params.lm_head.data_mut()[0] = f64::NAN;
    let mut tr = Trainer::new(model, tiny_train_config(3)).unwrap();
    let batch = Batch::from_windows(&[vec![1, 2, 3, 4, 5]]);
    match tr.train_step(&batch, 1) {
        Err(Error::NonFiniteLoss { step: 1, snapshot }) => assert!(snapshot.contains("ce=")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_validation() {
    let mut cfg = tiny_train_config(10);
    cfg.warmup_steps = 11;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_train_config(10);
    cfg.sparsity_weight = -1.0;
    assert!(cfg.validate().is_err());
    assert!(Trainer::new(tiny_model(0), TrainConfig::default()).is_ok());
    let empty = Batch::default();
    let mut tr = Trainer::new(tiny_model(0), tiny_train_config(2)).unwrap();
    assert!(tr.train_step(&empty, 1).is_err());
}

#[test]
fn log_line_format() {
    let log = StepLog {
        step: 3,
        budget: 0.9,
        lr: 1e-3,
        ce: 2.5,
        sparsity: 0.75,
        total: 2.575,
        grad_norm: 0.5,
        skip_fraction: vec![0.1, 0.0],
    };
    assert_eq!(
        log.to_string(),
        "step=3 budget=0.900000 lr=1.000000e-3 ce=2.500000 sparsity=0.750000 total=2.575000 grad_norm=0.500000 skip=0.1000,0.0000"
    );
}

#[test]
fn gate_config_default_is_vector_per_module_exit() {
    let g = GateConfig::default();
    assert_eq!(g.to_owned(), tiny_model(0).config.gate);
}
