use super::*;
use crate::model::{ModelConfig, ModuleKind};
use crate::skipping::{BudgetPolicy, BudgetSchedule, NoSkip, Site, SkipAll};
use crate::training::{TrainConfig, Trainer};
use rand::RngCore;
use std::sync::OnceLock;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden: 16,
        n_heads: 2,
        ff_dim: 32,
        max_seq: 64,
        ..ModelConfig::default()
    }
}

fn ids(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

/// A tiny model trained until it continues "abcabc..." reliably.
fn periodic_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        let steps = 300;
        let cfg = TrainConfig {
            schedule: BudgetSchedule::new(1.0, 0.9, steps).unwrap(),
            total_steps: steps,
            warmup_steps: 20,
            batch_size: 4,
            seq_len: 24,
            peak_lr: 1e-2,
            ..TrainConfig::default()
        };
        let corpus = ids(&"abc".repeat(200));
        let mut tr = Trainer::new(Model::new(tiny_config(), 11).unwrap(), cfg).unwrap();
        tr.run(&corpus, &mut std::io::sink(), &mut |_, _| Ok(())).unwrap();
        tr.model
    })
}

#[test]
fn prefill_fills_cache_and_skips_at_most_one_per_site() {
    let model = Model::new(tiny_config(), 1).unwrap();
    let prompt = ids("residual gates");
    let mut cache = KvCache::new(2, 16);
    let pre = prefill(&model, &prompt, &mut BudgetPolicy::new(1.0), &mut cache).unwrap();
    assert_eq!(cache.len().unwrap(), prompt.len());
    for l in 0..2 {
        assert_eq!(cache.layer_len(l).unwrap(), prompt.len());
    }
    assert_eq!(pre.records.len(), 4);
    for r in &pre.records {
        assert!(r.skipped.iter().filter(|s| **s).count() <= 1);
    }
    assert_eq!(pre.last_logits.len(), model.config.vocab);
}

#[test]
fn fully_skipped_prefill_is_the_embedding_model() {
    let model = Model::new(tiny_config(), 2).unwrap();
    let prompt = ids("skip everything");
    let mut cache = KvCache::new(2, 16);
    let pre = prefill(&model, &prompt, &mut SkipAll, &mut cache).unwrap();
    let reference = model.embedding_logits(&prompt).unwrap();
    assert_eq!(pre.last_logits, reference.row(prompt.len() - 1));
}

#[test]
fn incremental_decode_matches_full_recompute() {
    let model = Model::new(tiny_config(), 3).unwrap();
    let text = ids("the cache must agree");
    let (full, _, _) = model
        .logits(&text, &mut NoSkip, None, ForwardOptions::default())
        .unwrap();
    let split = 6;
    let mut cache = KvCache::new(2, 16);
    let pre = prefill(&model, &text[..split], &mut NoSkip, &mut cache).unwrap();
    let mut max_err: f64 = 0.0;
    for (a, b) in pre.last_logits.iter().zip(full.row(split - 1)) {
        max_err = max_err.max((a - b).abs());
    }
    for (i, &tok) in text.iter().enumerate().skip(split) {
        let (logits, _) = decode_step(&model, &mut cache, tok, &mut NoSkip).unwrap();
        for (a, b) in logits.iter().zip(full.row(i)) {
            max_err = max_err.max((a - b).abs());
        }
    }
    assert!(max_err <= 1e-5, "{max_err}");
    assert_eq!(cache.len().unwrap(), text.len());
}

#[test]
fn decode_needs_prefilled_cache() {
    let model = Model::new(tiny_config(), 3).unwrap();
    let mut cache = KvCache::new(2, 16);
    assert!(decode_step(&model, &mut cache, 1, &mut NoSkip).is_err());
}

#[test]
fn streaming_policy_processes_first_token() {
    let mut p = StreamingPolicy::new(1.0, 8).unwrap();
    let site = Site::new(0, ModuleKind::Attention);
    assert_eq!(p.decide(site, &[0.2], &[0]).unwrap().0, vec![false]);
    // one stored score: the threshold is that score itself
    assert_eq!(p.decide(site, &[0.1], &[1]).unwrap().0, vec![true]);
    assert_eq!(p.decide(site, &[0.3], &[2]).unwrap().0, vec![false]);
    assert_eq!(p.history(site), vec![0.2, 0.1, 0.3]);
    let other = Site::new(1, ModuleKind::Mlp);
    assert_eq!(p.decide(other, &[0.0], &[3]).unwrap().0, vec![false]);
    assert!(StreamingPolicy::new(0.0, 8).is_err());
    assert!(StreamingPolicy::new(0.5, 0).is_err());
}

#[test]
fn streaming_window_is_bounded() {
    let mut p = StreamingPolicy::new(0.5, 4).unwrap();
    let site = Site::new(0, ModuleKind::Mlp);
    p.observe(site, (0..10).map(f64::from));
    assert_eq!(p.history(site), vec![6.0, 7.0, 8.0, 9.0]);
}

#[test]
fn streaming_skip_rate_tracks_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let site = Site::new(0, ModuleKind::Attention);
    let window = 64;
    let n = 20_000;
    let mut full = StreamingPolicy::new(1.0, window).unwrap();
    let mut quarter = StreamingPolicy::new(0.75, window).unwrap();
    for i in 0..n {
        // distinct scores in (0, 1)
        let s = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        full.decide(site, &[s], &[i]).unwrap();
        quarter.decide(site, &[s], &[i]).unwrap();
    }
    let f = full.skips as f64 / n as f64;
    assert!(f <= 2.0 / window as f64, "{f}");
    let q = quarter.skips as f64 / n as f64;
    assert!((q - 0.25).abs() < 0.02, "{q}");
}

#[test]
fn zero_new_tokens_returns_prompt() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let cfg = GenerationConfig {
        max_new_tokens: 0,
        ..GenerationConfig::default()
    };
    let prompt = ids("hello");
    let g = generate(&model, &prompt, &cfg).unwrap();
    assert_eq!(g.tokens, prompt);
    assert!(g.generated().is_empty());
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let cfg = GenerationConfig {
        budget: 0.8,
        max_new_tokens: 10,
        eos_id: None,
        ..GenerationConfig::default()
    };
    let prompt = ids("abc");
    let a = generate(&model, &prompt, &cfg).unwrap();
    let b = generate(&model, &prompt, &cfg).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.records, b.records);
    assert_eq!(a.tokens.len(), prompt.len() + 10);
    assert_eq!(a.cache.len().unwrap(), prompt.len() + 9);
    assert_eq!(a.trace.entries.len(), 2 * 2 * (prompt.len() + 9));

    let sampled = GenerationConfig {
        sampling: Sampling::Temperature(1.5),
        seed: 9,
        ..cfg
    };
    let c = generate(&model, &prompt, &sampled).unwrap();
    let d = generate(&model, &prompt, &sampled).unwrap();
    assert_eq!(c.tokens, d.tokens);
    let text = a.to_text(2);
    assert!(text.contains("layer_skips = "));
    assert!(text.contains("saved_fraction = "));
}

#[test]
fn generation_stops_at_max_seq_and_eos() {
    let mut model = Model::new(tiny_config(), 4).unwrap();
    let cfg = GenerationConfig {
        max_new_tokens: 1000,
        eos_id: None,
        ..GenerationConfig::default()
    };
    let g = generate(&model, &ids("x"), &cfg).unwrap();
    assert_eq!(g.tokens.len(), model.config.max_seq);

    // A zero output norm makes every logit zero, so greedy picks id 0.
    model.params.final_norm = crate::numerics::Tensor::zeros(&[16]);
    let cfg = GenerationConfig {
        max_new_tokens: 5,
        eos_id: Some(0),
        ..GenerationConfig::default()
    };
    let g = generate(&model, &ids("x"), &cfg).unwrap();
    assert_eq!(g.generated(), &[0]);
}

#[test]
fn skipped_rows_are_copied_up_after_generation() {
    let model = Model::new(tiny_config(), 5).unwrap();
    let cfg = GenerationConfig {
        budget: 0.6,
        max_new_tokens: 20,
        eos_id: None,
        window: 16,
        ..GenerationConfig::default()
    };
    let g = generate(&model, &ids("copy the rows up"), &cfg).unwrap();
    verify_copy_up(&g.cache, &g.records).unwrap();
    let upper_skips = g
        .records
        .iter()
        .filter(|r| r.site.layer > 0 && r.site.kind == ModuleKind::Attention)
        .flat_map(|r| &r.skipped)
        .filter(|s| **s)
        .count();
    assert!(upper_skips > 0);
    assert!(g.flops.saved_fraction > 0.0);

    let mut tampered = g.cache.clone();
    let rec = g
        .records
        .iter()
        .find(|r| r.site.layer == 1 && r.site.kind == ModuleKind::Attention && r.skipped.contains(&true))
        .unwrap();
    let pos = rec.positions[rec.skipped.iter().position(|s| *s).unwrap()];
    tampered.truncate(pos);
    assert!(verify_copy_up(&tampered, &g.records).is_err());
}

#[test]
fn memorized_period_continues_exactly() {
    let model = periodic_model();
    let cfg = GenerationConfig {
        budget: 1.0,
        max_new_tokens: 12,
        eos_id: None,
        ..GenerationConfig::default()
    };
    let g = generate(model, &ids("abcabcab"), &cfg).unwrap();
    assert_eq!(tokenizer::decode(g.generated()), b"cabcabcabcab");
}

#[test]
fn finished_sequences_leave_the_active_set() {
    let model = periodic_model();
    let cfg = GenerationConfig {
        budget: 1.0,
        max_new_tokens: 10,
        eos_id: Some(u32::from(b'a')),
        ..GenerationConfig::default()
    };
    let prompts = vec![ids("abcabc"), ids("abcab")];
    let mut stream = StreamingPolicy::new(1.0, 256).unwrap();
    let mut decode_calls = 0usize;
    let out = generate_with(
        model,
        &prompts,
        &cfg,
        &mut |s, stage| match stage {
            Stage::Prefill => Box::new(PrefillPolicy::new(1.0, s)),
            Stage::Decode => {
                decode_calls += 1;
                Box::new(&mut *s)
            }
        },
        &mut stream,
    )
    .unwrap();
    assert_eq!(tokenizer::decode(out[0].generated()), b"a");
    assert_eq!(tokenizer::decode(out[1].generated()), b"ca");
    assert_eq!(decode_calls, 1);
    // prompt scores of both sequences plus the single decode step
    let site = Site::new(1, ModuleKind::Mlp);
    assert_eq!(stream.history(site).len(), 6 + 5 + 1);
    let batched = generate_batch(model, &prompts, &cfg).unwrap();
    assert_eq!(batched[1].tokens, out[1].tokens);
}

#[test]
fn invalid_generation_configs() {
    let model = Model::new(tiny_config(), 4).unwrap();
    for cfg in [
        GenerationConfig {
            budget: 0.0,
            ..GenerationConfig::default()
        },
        GenerationConfig {
            window: 0,
            ..GenerationConfig::default()
        },
        GenerationConfig {
            sampling: Sampling::Temperature(0.0),
            ..GenerationConfig::default()
        },
    ] {
        assert!(generate(&model, &ids("a"), &cfg).is_err());
    }
    assert!(generate(&model, &[], &GenerationConfig::default()).is_err());
    let long = vec![1u32; 65];
    assert!(generate(&model, &long, &GenerationConfig::default()).is_err());
}
