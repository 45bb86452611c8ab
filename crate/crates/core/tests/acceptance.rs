//! Whole-stack acceptance suite. Each test exercises one advertised guarantee
//! end to end and prints a single `[PASS]`/`[FAIL]` verdict line (run with
//! `cargo test --test acceptance -- --nocapture` to see them all).

mod common;

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use rexlab_core::corpus::{
    dedup, jaccard_estimate, threshold_filter, train_bpe, train_classifier, ClassifierHyper,
    Document, MinHashParams,
};
use rexlab_core::curriculum::{PhaseKind, PhaseSpec, TrainSource, Trainer, TrainerConfig};
use rexlab_core::encoder::{rope_freqs, EncoderConfig, PackedBatch};
use rexlab_core::eval::{
    cosent_loss_value, evaluate_similarity, fine_tune_similarity, model_recovery, spearman,
    FineTuneConfig,
};
use rexlab_core::kernels::{grad_check, AttentionLayout, NodeId, Tape, Tensor};
use rexlab_core::masking::{mix_batch, sample_span_mask, GuidedSpans, MaskingPolicy};
use rexlab_core::optim::{stable_adamw_step, wsd_lr, OptimizerHyper, OptimizerState, SchedulePlan};
use rexlab_core::rng::stream;
use rexlab_core::{Model32, Model64, Result, Tensor64, TokenId};

use common::*;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor64 {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

// ---------------------------------------------------------------------------
// 1. Finite-difference verification of every differentiable tape operation.
// ---------------------------------------------------------------------------

#[test]
fn a01_kernel_gradients_match_finite_differences() -> Result<()> {
    let started = Instant::now();
    let mut crit = Criterion::new("kernel gradients vs finite differences");
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);

    type OpFn = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;
    let mut cases: Vec<(&str, Vec<Tensor64>, OpFn)> = Vec::new();

    cases.push((
        "matmul",
        vec![rand_tensor(&[4, 6], -1.0, 1.0, &mut rng), rand_tensor(&[6, 5], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| t.matmul(ids[0], ids[1])),
    ));
    cases.push((
        "linear_nobias",
        vec![rand_tensor(&[4, 6], -1.0, 1.0, &mut rng), rand_tensor(&[6, 5], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| t.linear_nobias(ids[0], ids[1])),
    ));
    cases.push((
        "matmul_transposed",
        vec![rand_tensor(&[4, 6], -1.0, 1.0, &mut rng), rand_tensor(&[5, 6], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| t.matmul_transposed(ids[0], ids[1])),
    ));
    cases.push((
        "add",
        vec![rand_tensor(&[4, 6], -1.0, 1.0, &mut rng), rand_tensor(&[4, 6], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| t.add(ids[0], ids[1])),
    ));
    cases.push((
        "mul",
        vec![rand_tensor(&[4, 6], -1.0, 1.0, &mut rng), rand_tensor(&[4, 6], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| t.mul(ids[0], ids[1])),
    ));
    cases.push((
        "scale",
        vec![rand_tensor(&[4, 6], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| t.scale(ids[0], 1.7)),
    ));
    cases.push((
        "gelu",
        vec![rand_tensor(&[4, 6], -2.0, 2.0, &mut rng)],
        Box::new(|t, ids| t.gelu(ids[0])),
    ));
    cases.push((
        "geglu",
        vec![
            rand_tensor(&[4, 6], -1.0, 1.0, &mut rng),
            rand_tensor(&[6, 5], -1.0, 1.0, &mut rng),
            rand_tensor(&[6, 5], -1.0, 1.0, &mut rng),
        ],
        Box::new(|t, ids| t.geglu(ids[0], ids[1], ids[2])),
    ));
    cases.push((
        "layer_norm_nobias",
        vec![rand_tensor(&[4, 6], -1.0, 1.0, &mut rng), rand_tensor(&[6], 0.5, 1.5, &mut rng)],
        Box::new(|t, ids| t.layer_norm_nobias(ids[0], ids[1], 1e-5)),
    ));

    let positions: Arc<Vec<usize>> = Arc::new((0..6).collect());
    let plain = Arc::new(rope_freqs(4, 10_000.0, 1.0)?.inv_freq);
    let stretched = Arc::new(rope_freqs(4, 10_000.0, 2.0)?.inv_freq);
    for (name, freqs) in [("rope_apply", plain), ("rope_apply_rescaled", stretched)] {
        let (p, f) = (Arc::clone(&positions), freqs);
        cases.push((
            name,
            vec![rand_tensor(&[6, 8], -1.0, 1.0, &mut rng)],
            Box::new(move |t, ids| t.rope_apply(ids[0], Arc::clone(&p), Arc::clone(&f), 2)),
        ));
    }

    let full = Arc::new(AttentionLayout::full(6));
    let banded = Arc::new(AttentionLayout::new_with(6, |i, j| i.abs_diff(j) <= 2));
    for (name, layout) in [("sdpa_global", full), ("sdpa_windowed", banded)] {
        cases.push((
            name,
            vec![
                rand_tensor(&[6, 8], -1.0, 1.0, &mut rng),
                rand_tensor(&[6, 8], -1.0, 1.0, &mut rng),
                rand_tensor(&[6, 8], -1.0, 1.0, &mut rng),
            ],
            Box::new(move |t, ids| t.sdpa(ids[0], ids[1], ids[2], Arc::clone(&layout), 2)),
        ));
    }

    cases.push((
        "embed",
        vec![rand_tensor(&[7, 5], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| t.embed(ids[0], &[0, 3, 6, 2])),
    ));
    cases.push((
        "gather_rows",
        vec![rand_tensor(&[6, 5], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| t.gather_rows(ids[0], &[0, 2, 2, 5])),
    ));
    cases.push((
        "mean_rows",
        vec![rand_tensor(&[6, 5], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| t.mean_rows(ids[0], &[1, 3, 4])),
    ));
    cases.push((
        "l2_normalize",
        vec![rand_tensor(&[1, 6], 0.3, 1.0, &mut rng)],
        Box::new(|t, ids| t.l2_normalize(ids[0])),
    ));
    cases.push((
        "dot",
        vec![rand_tensor(&[1, 6], -1.0, 1.0, &mut rng), rand_tensor(&[1, 6], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| t.dot(ids[0], ids[1])),
    ));
    cases.push((
        "stack_scalars",
        vec![
            rand_tensor(&[2, 3], -1.0, 1.0, &mut rng),
            rand_tensor(&[2, 3], -1.0, 1.0, &mut rng),
            rand_tensor(&[2, 3], -1.0, 1.0, &mut rng),
        ],
        Box::new(|t, ids| {
            let scalars: Vec<NodeId> =
                ids.iter().map(|&id| t.sum_all(id)).collect::<Result<_>>()?;
            t.stack_scalars(&scalars)
        }),
    ));
    cases.push((
        "softmax_cross_entropy",
        vec![rand_tensor(&[4, 9], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| t.softmax_cross_entropy(ids[0], &[1, 0, 8, 3])),
    ));
    cases.push((
        "cosent_loss",
        vec![rand_tensor(&[6], -0.9, 0.9, &mut rng)],
        Box::new(|t, ids| t.cosent_loss(ids[0], &[1.0, 0.66, 0.33, 0.0, 1.0, 0.33], 2.0)),
    ));
    cases.push((
        "dropout",
        vec![rand_tensor(&[4, 6], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(7);
            t.dropout(ids[0], 0.3, &mut mask_rng)
        }),
    ));
    cases.push((
        "sum_all",
        vec![rand_tensor(&[4, 6], -1.0, 1.0, &mut rng)],
        Box::new(|t, ids| t.sum_all(ids[0])),
    ));

    let probes_per_op = 120;
    let mut worst: (f64, &str) = (0.0, "none");
    let mut total_probes = 0usize;
    for (i, (name, inputs, op)) in cases.iter().enumerate() {
        let report = grad_check(inputs, probes_per_op, 0xace0 + i as u64, op)?;
        total_probes += report.probes;
        if report.max_rel_err > worst.0 {
            worst = (report.max_rel_err, name);
        }
        crit.check(
            report.max_rel_err <= 1e-4,
            format!("{name}: max rel err {:.3e} > 1e-4", report.max_rel_err),
        );
        crit.check(report.probes >= 100, format!("{name}: only {} probes", report.probes));
    }
    let secs = started.elapsed().as_secs_f64();
    crit.check(secs < 60.0, format!("took {secs:.1}s, budget is 60s"));
    crit.note(format!(
        "{} ops, {} probes, worst rel err {:.3e} ({}), {:.1}s",
        cases.len(),
        total_probes,
        worst.0,
        worst.1,
        secs
    ));
    crit.finish();
    Ok(())
}

// ---------------------------------------------------------------------------
// 2. Span-mask statistics: realized ratios and the span-length law.
// ---------------------------------------------------------------------------

#[test]
fn a02_span_masking_matches_requested_ratio_and_span_law() {
    let mut crit = Criterion::new("span-mask ratio and span-length statistics");
    let seqs = 10_000usize;
    let len = 512usize;

    let mut spans_drawn: Vec<usize> = Vec::new();
    let mut measure = |ratio: f64, collect: bool| -> f64 {
        let policy = MaskingPolicy { mask_ratio: ratio, ..MaskingPolicy::default() };
        let mut total = 0usize;
        for i in 0..seqs {
            let mut rng = stream(42, "acc-mask", &[(ratio * 100.0) as u64, i as u64]);
            let plan = sample_span_mask(len, &policy, &mut rng);
            total += plan.positions.len();
            if collect {
                spans_drawn.extend(&plan.drawn_spans);
            }
        }
        total as f64 / (seqs * len) as f64
    };

    let realized30 = measure(0.30, true);
    let realized15 = measure(0.15, false);
    crit.check(
        (0.285..=0.315).contains(&realized30),
        format!("realized ratio {realized30:.4} outside [0.285, 0.315] for 0.30"),
    );
    crit.check(
        (0.14..=0.16).contains(&realized15),
        format!("realized ratio {realized15:.4} outside [0.14, 0.16] for 0.15"),
    );

    // Reference: Monte-Carlo mean of max(1, Poisson(3)) from an independent
    // sampler.
    let poisson = Poisson::new(3.0).expect("valid mean");
    let mut ref_rng = ChaCha8Rng::seed_from_u64(0xb0b);
    let draws = 500_000usize;
    let ref_mean = (0..draws)
        .map(|_| {
            let x: f64 = poisson.sample(&mut ref_rng);
            x.max(1.0)
        })
        .sum::<f64>()
        / draws as f64;
    let span_mean = spans_drawn.iter().sum::<usize>() as f64 / spans_drawn.len() as f64;
    crit.check(
        (span_mean - ref_mean).abs() <= 0.10 * ref_mean,
        format!("span mean {span_mean:.3} deviates >10% from Monte-Carlo {ref_mean:.3}"),
    );
    crit.note(format!(
        "realized 0.30→{realized30:.4}, 0.15→{realized15:.4}; span mean {span_mean:.3} vs {ref_mean:.3} ({} draws)",
        spans_drawn.len()
    ));
    crit.finish();
}

// ---------------------------------------------------------------------------
// 3. Guided/random routing share and guided-span coverage.
// ---------------------------------------------------------------------------

#[test]
fn a03_guided_routing_share_and_span_coverage() {
    let mut crit = Criterion::new("guided-mask routing share and span coverage");
    let policy = MaskingPolicy { guided_fraction: 0.05, ..MaskingPolicy::default() };
    let len = 512usize;
    let spans = GuidedSpans::new(vec![(100, 110), (300, 318)]);
    let seqs: Vec<(usize, &GuidedSpans)> = (0..10_000).map(|_| (len, &spans)).collect();
    let mut rng = stream(9, "acc-guided", &[]);
    let routed = mix_batch(&seqs, &policy, &mut rng);

    let guided: Vec<_> = routed.iter().filter(|r| r.guided).collect();
    let share = guided.len() as f64 / routed.len() as f64;
    crit.check(
        (0.04..=0.06).contains(&share),
        format!("guided share {share:.4} outside [0.04, 0.06]"),
    );

    let in_span =
        |p: usize| -> bool { (100..110).contains(&p) || (300..318).contains(&p) };
    let covered =
        guided.iter().filter(|r| r.plan.positions.iter().any(|&p| in_span(p))).count();
    crit.check(
        covered == guided.len(),
        format!("{} of {} guided sequences miss every annotated span", guided.len() - covered, guided.len()),
    );
    crit.note(format!(
        "share {share:.4} over {} sequences; {}/{} guided plans hit an annotated span",
        routed.len(),
        covered,
        guided.len()
    ));
    crit.finish();
}

// ---------------------------------------------------------------------------
// 4. Attention equivalences: saturated window, packing, position shifts.
// ---------------------------------------------------------------------------

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn a04_attention_equivalences_hold() -> Result<()> {
    let mut crit = Criterion::new("attention equivalences");
    let vocab = 61usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0x47);
    let mut seq = |n: usize| -> Vec<TokenId> {
        (0..n).map(|_| rng.gen_range(0..vocab as TokenId)).collect()
    };

    // A window at least as long as the sequence makes local layers exactly
    // global: same weights, one model forced all-local, the other all-global.
    let mut base = EncoderConfig::sized(3, 32, 48, 4, vocab, 64);
    base.dropout = 0.0;
    let built = Model64::build(base, 11)?;
    let mut all_local = built.clone();
    all_local.config.window = 64;
    all_local.config.global_every = 100;
    let mut all_global = built.clone();
    all_global.config.global_every = 1;
    let tokens = seq(48);
    let single = PackedBatch::single(&tokens)?;
    let d_window =
        max_abs_diff(all_local.forward(&single)?.data(), all_global.forward(&single)?.data());
    crit.check(d_window <= 1e-6, format!("saturated-window mismatch {d_window:.3e} > 1e-6"));

    // Packing must not change any sequence's hidden states. Exercise both
    // layer kinds: a 4-layer model alternating an 8-token window with global.
    let mut mixed_cfg = EncoderConfig::sized(4, 32, 48, 4, vocab, 64);
    mixed_cfg.dropout = 0.0;
    mixed_cfg.window = 8;
    mixed_cfg.global_every = 2;
    let mixed = Model64::build(mixed_cfg, 23)?;
    let (s0, s1, s2) = (seq(9), seq(48), seq(17));
    let packed = PackedBatch::pack(&[&s0, &s1, &s2])?;
    let hidden = mixed.forward(&packed)?;
    let width = 32usize;
    let mut d_pack = 0.0f64;
    for (i, s) in [&s0, &s1, &s2].iter().enumerate() {
        let alone = mixed.forward(&PackedBatch::single(s)?)?;
        let (lo, hi) = packed.seq_range(i);
        d_pack = d_pack.max(max_abs_diff(
            &hidden.data()[lo * width..hi * width],
            alone.data(),
        ));
    }
    crit.check(d_pack <= 1e-5, format!("packed-vs-single mismatch {d_pack:.3e} > 1e-5"));

    // Rotary positions are relative: shifting every position by a constant
    // must leave the outputs unchanged.
    let shifted = PackedBatch::single(&s1)?.with_position_offset(37);
    let d_shift = max_abs_diff(
        mixed.forward(&PackedBatch::single(&s1)?)?.data(),
        mixed.forward(&shifted)?.data(),
    );
    crit.check(d_shift <= 1e-5, format!("position-shift mismatch {d_shift:.3e} > 1e-5"));

    crit.note(format!(
        "window {d_window:.2e}, packing {d_pack:.2e}, shift {d_shift:.2e}"
    ));
    crit.finish();
    Ok(())
}

// ---------------------------------------------------------------------------
// 5. Trapezoidal learning-rate schedule boundary values.
// ---------------------------------------------------------------------------

#[test]
fn a05_lr_schedule_boundary_values_exact() {
    let mut crit = Criterion::new("trapezoidal schedule boundaries");
    let peak = 8e-4;
    let plan = SchedulePlan {
        warmup_steps: 100,
        stable_steps: 300,
        decay_steps: 400,
        peak_lr: peak,
        batch_warmup: vec![(0, 32)],
    };
    let tol = 1e-12;
    let checks = [
        (0u64, 0.0, "start"),
        (100, peak, "warmup end"),
        (250, peak, "mid-plateau"),
        (399, peak, "plateau end"),
        (500, 0.5 * peak, "quarter-decay"),
        (800, 0.0, "schedule end"),
        (1000, 0.0, "past the end"),
    ];
    let mut worst = 0.0f64;
    for (step, want, what) in checks {
        let got = wsd_lr(step, &plan);
        worst = worst.max((got - want).abs());
        crit.check(
            (got - want).abs() <= tol,
            format!("{what} (step {step}): lr {got:.3e} vs expected {want:.3e}"),
        );
    }
    crit.note(format!("7 boundary points exact to {tol:.0e} (worst |Δ| {worst:.1e})"));
    crit.finish();
}

// ---------------------------------------------------------------------------
// 6. Optimizer: scalar single-step oracle, update clipping, descent.
// ---------------------------------------------------------------------------

#[test]
fn a06_optimizer_oracle_clipping_and_descent() -> Result<()> {
    let mut crit = Criterion::new("clipped-AdamW oracle, clipping, descent");

    // Single-step scalar oracle: with negligible eps the first bias-corrected
    // update is exactly sign(g), so lr 0.1 moves the parameter 1 → 0.9.
    let hyper = OptimizerHyper {
        peak_lr: 0.1,
        betas: (0.9, 0.98),
        eps: 1e-30,
        weight_decay: 0.0,
        clip_threshold: 1.0,
    };
    let mut params: IndexMap<String, Tensor<f64>> = IndexMap::new();
    params.insert("w".into(), Tensor::from_vec(&[1], vec![1.0])?);
    let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
    grads.insert("w".into(), vec![1.0]);
    let mut state = OptimizerState::<f64>::new();
    stable_adamw_step(&mut params, &grads, &mut state, &hyper, 0.1)?;
    let got = params["w"].data()[0];
    crit.check((got - 0.9).abs() <= 1e-10, format!("scalar step gave {got:.12}, expected 0.9"));

    // Update clipping: gradients six orders of magnitude too large must never
    // move any tensor by more than lr·d in RMS.
    let lr = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(0xc11b);
    let mut params: IndexMap<String, Tensor<f64>> = IndexMap::new();
    params.insert("a".into(), rand_tensor(&[4, 4], -1.0, 1.0, &mut rng));
    params.insert("b".into(), rand_tensor(&[8], -1.0, 1.0, &mut rng));
    params.insert("c".into(), rand_tensor(&[2, 8], -1.0, 1.0, &mut rng));
    let mut state = OptimizerState::<f64>::new();
    let mut worst_rms = 0.0f64;
    for _ in 0..50 {
        let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
        for (name, t) in &params {
            grads.insert(
                name.clone(),
                (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0) * 1e6).collect(),
            );
        }
        let before: IndexMap<String, Vec<f64>> =
            params.iter().map(|(k, v)| (k.clone(), v.data().to_vec())).collect();
        let stats = stable_adamw_step(&mut params, &grads, &mut state, &hyper, lr)?;
        for (name, t) in &params {
            let old = &before[name];
            let rms = (t
                .data()
                .iter()
                .zip(old)
                .map(|(n, o)| (n - o) * (n - o))
                .sum::<f64>()
                / t.numel() as f64)
                .sqrt();
            worst_rms = worst_rms.max(rms);
            crit.check(
                rms <= lr * hyper.clip_threshold * (1.0 + 1e-9),
                format!("tensor {name}: applied update RMS {rms:.3e} exceeds lr·d {:.3e}", lr),
            );
        }
        crit.check(
            stats.max_update_rms <= lr * hyper.clip_threshold + 1e-15,
            format!("reported update RMS {:.3e} exceeds lr·d", stats.max_update_rms),
        );
    }

    // Descent: 200 steps on a quadratic bowl must shrink it at least 10×.
    let mut params: IndexMap<String, Tensor<f64>> = IndexMap::new();
    params.insert("x".into(), rand_tensor(&[16], 0.5, 1.5, &mut rng));
    let f0: f64 = params["x"].data().iter().map(|v| v * v).sum();
    let mut state = OptimizerState::<f64>::new();
    for _ in 0..200 {
        let g: Vec<f64> = params["x"].data().iter().map(|v| 2.0 * v).collect();
        let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
        grads.insert("x".into(), g);
        stable_adamw_step(&mut params, &grads, &mut state, &hyper, 0.05)?;
    }
    let f1: f64 = params["x"].data().iter().map(|v| v * v).sum();
    crit.check(f1 <= f0 / 10.0, format!("quadratic went {f0:.3} → {f1:.3}, less than 10×"));

    crit.note(format!(
        "scalar step exact to 1e-10; worst clipped RMS {worst_rms:.3e} ≤ {:.0e}; quadratic {f0:.2} → {f1:.2e}",
        lr * hyper.clip_threshold
    ));
    crit.finish();
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared training helper for the two curriculum checks.
// ---------------------------------------------------------------------------

fn single_phase(
    budget: u64,
    seq_len: usize,
    mixture_start: Vec<f64>,
    mixture_end: Vec<f64>,
    peak_lr: f64,
    batch: usize,
) -> PhaseSpec {
    PhaseSpec {
        name: PhaseKind::Pretrain,
        token_budget: budget,
        seq_len,
        mask_ratio: 0.30,
        mean_span: 3.0,
        guided_fraction: 0.0,
        mixture_start,
        mixture_end,
        rope_base: 10_000.0,
        ntk_scale: 1.0,
        schedule: SchedulePlan {
            warmup_steps: 20,
            stable_steps: 1 << 60,
            decay_steps: 0,
            peak_lr,
            batch_warmup: vec![(0, batch)],
        },
    }
}

// ---------------------------------------------------------------------------
// 7. A micro-sized encoder memorizes a 50-document catalog.
// ---------------------------------------------------------------------------

#[test]
fn a07_micro_model_memorizes_its_catalog() -> Result<()> {
    let started = Instant::now();
    let mut crit = Criterion::new("micro-model catalog memorization");

    let docs = catalog_docs(50);
    let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
    let vocab = train_bpe(&refs, 512)?;
    crit.check(vocab.vocab_size() <= 2048, format!("vocab {} > 2048", vocab.vocab_size()));
    let toks: Vec<Vec<TokenId>> = docs.iter().map(|d| vocab.encode(d)).collect();
    let s = vocab.specials();

    let mut cfg = EncoderConfig::micro(vocab.vocab_size(), 64);
    cfg.dropout = 0.0;
    cfg.window = 48;
    let model = Model32::build(cfg, 4242)?;

    let dir = tempfile::tempdir().expect("tempdir");
    let mut tcfg = TrainerConfig::new(dir.path().join("overfit"), s.mask, s.cls, s.sep);
    tcfg.step_limit = Some(100);
    tcfg.hyper = OptimizerHyper { weight_decay: 0.0, ..OptimizerHyper::default() };
    let phase = single_phase(1 << 60, 50, vec![1.0], vec![1.0], 2e-3, 5);
    let source = TrainSource::new("catalog", toks.clone());
    let mut trainer = Trainer::new(model, vec![phase], vec![source], tcfg, 4242)?;

    let ks = [1usize, 3, 5];
    let mut steps_total = 0u64;
    let mut top1 = 0.0f64;
    let mut rounds = 0usize;
    while rounds < 12 {
        let recs = trainer.run()?;
        steps_total += recs.len() as u64;
        rounds += 1;
        let rep = model_recovery(&trainer.model, s.cls, s.sep, s.mask, &toks, 48, &ks, 99)?;
        let a1 = rep.accuracy(48, 1).expect("k=1 row");
        let a3 = rep.accuracy(48, 3).expect("k=3 row");
        let a5 = rep.accuracy(48, 5).expect("k=5 row");
        crit.check(
            a1 <= a3 + 1e-12 && a3 <= a5 + 1e-12,
            format!("round {rounds}: top-k accuracies not nested ({a1:.3}, {a3:.3}, {a5:.3})"),
        );
        top1 = a1;
        if top1 >= 0.95 {
            break;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    crit.check(top1 >= 0.95, format!("training-set top-1 recovery {top1:.3} < 0.95"));
    crit.check(steps_total <= 3000, format!("{steps_total} optimizer steps > 3000"));
    crit.check(secs < 600.0, format!("took {secs:.0}s, budget is 600s"));
    crit.note(format!(
        "top-1 {top1:.3} after {steps_total} steps ({rounds} eval rounds, vocab {}, {:.0}s)",
        vocab.vocab_size(),
        secs
    ));
    crit.finish();
    Ok(())
}

// ---------------------------------------------------------------------------
// 8. Annealing the mixture toward the domain beats a static general mixture.
// ---------------------------------------------------------------------------

#[test]
fn a08_domain_annealing_beats_static_mixture() -> Result<()> {
    let started = Instant::now();
    let mut crit = Criterion::new("mixture annealing benefit");

    let gen_sents = fixed_sentences(&GENERAL_POOL, 24, 21, "gen-sent");
    let dom_sents = fixed_sentences(&DOMAIN_POOL, 12, 21, "dom-sent");
    let general = rotated_docs(&gen_sents);
    let domain = rotated_docs(&dom_sents);
    let mut reversed = dom_sents.clone();
    reversed.reverse();
    let held = rotated_docs(&reversed);

    let all: Vec<&str> = general.iter().chain(domain.iter()).map(String::as_str).collect();
    let vocab = train_bpe(&all, 420)?;
    let enc = |texts: &[String]| -> Vec<Vec<TokenId>> {
        texts.iter().map(|t| vocab.encode(t)).collect()
    };
    let (tg, td, th) = (enc(&general), enc(&domain), enc(&held));
    let s = vocab.specials();

    let mut cfg = EncoderConfig::sized(2, 64, 96, 4, vocab.vocab_size(), 34);
    cfg.dropout = 0.0;
    cfg.window = 16;
    cfg.global_every = 2;

    let dir = tempfile::tempdir().expect("tempdir");
    let run = |seed: u64, annealed: bool| -> Result<f64> {
        let end = if annealed { vec![0.2, 0.8] } else { vec![0.9, 0.1] };
        let phase = single_phase(68_000, 34, vec![0.9, 0.1], end, 2e-3, 8);
        let label = if annealed { "annealed" } else { "static" };
        let mut tcfg = TrainerConfig::new(
            dir.path().join(format!("{label}-{seed}")),
            s.mask,
            s.cls,
            s.sep,
        );
        tcfg.hyper = OptimizerHyper { weight_decay: 0.0, ..OptimizerHyper::default() };
        let model = Model32::build(cfg.clone(), seed)?;
        let sources = vec![
            TrainSource::new("general", tg.clone()),
            TrainSource::new("domain", td.clone()),
        ];
        let mut trainer = Trainer::new(model, vec![phase], sources, tcfg, seed)?;
        trainer.run()?;
        let rep = model_recovery(&trainer.model, s.cls, s.sep, s.mask, &th, 32, &[1], 7)?;
        Ok(rep.accuracy(32, 1).expect("k=1 row"))
    };

    let mut wins = 0usize;
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let base = run(1000 + seed, false)?;
        let annealed = run(1000 + seed, true)?;
        let gap = annealed - base;
        if gap >= 0.05 {
            wins += 1;
        }
        detail.push(format!("seed {seed}: {base:.3}→{annealed:.3} ({gap:+.3})"));
    }
    let secs = started.elapsed().as_secs_f64();
    crit.check(wins >= 4, format!("only {wins}/5 seeds gained ≥5 points [{}]", detail.join(", ")));
    crit.note(format!("{wins}/5 seeds gained ≥5 points [{}] ({secs:.0}s)", detail.join(", ")));
    crit.finish();
    Ok(())
}

// ---------------------------------------------------------------------------
// 9. Similarity fine-tuning lifts dev Spearman; rank statistic vs oracle.
// ---------------------------------------------------------------------------

fn oracle_spearman(pred: &[f64], target: &[f64]) -> f64 {
    // Average ranks by direct counting: 1 + |below| + (|equal| − 1)/2.
    let rank = |xs: &[f64]| -> Vec<f64> {
        xs.iter()
            .map(|&x| {
                let below = xs.iter().filter(|&&y| y < x).count();
                let equal = xs.iter().filter(|&&y| y == x).count();
                below as f64 + (equal as f64 - 1.0) / 2.0 + 1.0
            })
            .collect()
    };
    let rp = rank(pred);
    let rt = rank(target);
    let n = pred.len() as f64;
    let mean_p = rp.iter().sum::<f64>() / n;
    let mean_t = rt.iter().sum::<f64>() / n;
    let (mut cov, mut var_p, mut var_t) = (0.0f64, 0.0f64, 0.0f64);
    for (p, t) in rp.iter().zip(&rt) {
        cov += (p - mean_p) * (t - mean_t);
        var_p += (p - mean_p) * (p - mean_p);
        var_t += (t - mean_t) * (t - mean_t);
    }
    cov / (var_p.sqrt() * var_t.sqrt())
}

#[test]
fn a09_similarity_fine_tune_and_rank_oracle() -> Result<()> {
    let started = Instant::now();
    let mut crit = Criterion::new("similarity fine-tuning and rank oracle");

    // Rank statistic against a brute-force oracle on tied short vectors.
    let mut rng = ChaCha8Rng::seed_from_u64(0x04ac1e);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    while cases < 500 {
        let n = rng.gen_range(2..=10);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(0..5) as f64 * 0.25).collect()
        };
        let pred = draw(&mut rng);
        let target = draw(&mut rng);
        let spread = |xs: &[f64]| xs.iter().any(|&v| v != xs[0]);
        if !spread(&pred) || !spread(&target) {
            continue;
        }
        cases += 1;
        let got = spearman(&pred, &target)?;
        let want = oracle_spearman(&pred, &target);
        worst = worst.max((got - want).abs());
    }
    crit.check(worst == 0.0, format!("rank statistic differs from oracle by {worst:.3e}"));

    // Fine-tuning on graded pairs: the repeated product codes dominate the
    // untuned cosines, while the tuned encoder learns to track the grades.
    let mut gen = ChaCha8Rng::seed_from_u64(0x9a1);
    let pairs = graded_pairs(110, &mut gen);
    let mut texts: Vec<String> = Vec::new();
    for p in &pairs {
        texts.push(p.query.clone());
        texts.push(p.product_text());
    }
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vocab = train_bpe(&refs, 420)?;

    let mut cfg = EncoderConfig::sized(2, 24, 72, 4, vocab.vocab_size(), 66);
    cfg.dropout = 0.0;
    cfg.global_every = 2;
    let mut model = Model32::build(cfg, 0x777)?;

    let dev: Vec<_> = pairs.iter().filter(|p| in_dev_split(&p.query)).cloned().collect();
    crit.check(dev.len() >= 8, format!("only {} dev pairs", dev.len()));
    let (_, baseline) = evaluate_similarity(&model, &vocab, &dev, 56)?;
    crit.check(baseline < 0.3, format!("untuned dev Spearman {baseline:.3} not below 0.3"));

    let ft = FineTuneConfig {
        epochs: 40,
        batch_size: 8,
        lr: 3e-3,
        lambda: 20.0,
        max_len: 56,
        freeze_encoder: false,
        seed: 0x7efe,
    };
    let report = fine_tune_similarity(&mut model, &vocab, &pairs, &ft)?;
    let tuned = *report.dev_spearman.last().expect("at least one epoch");
    crit.check(tuned >= 0.9, format!("tuned dev Spearman {tuned:.3} < 0.9"));

    let secs = started.elapsed().as_secs_f64();
    crit.note(format!(
        "oracle exact on 500 tied cases; dev Spearman {baseline:.3} → {tuned:.3} ({} dev pairs, {secs:.0}s)",
        report.dev_size
    ));
    crit.finish();
    Ok(())
}

// ---------------------------------------------------------------------------
// 10. Pairwise ranking loss equals its brute-force double loop.
// ---------------------------------------------------------------------------

#[test]
fn a10_ranking_loss_matches_brute_force() -> Result<()> {
    let mut crit = Criterion::new("ranking-loss oracle equivalence");
    let mut rng = ChaCha8Rng::seed_from_u64(0xc05e);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.gen_range(2..=16);
        let cosines: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64).collect();
        let lambda = if case % 2 == 0 { 20.0 } else { 2.5 };
        let got = cosent_loss_value(&cosines, &targets, lambda)?;
        let mut sum = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if targets[i] > targets[j] {
                    sum += (lambda * (cosines[j] - cosines[i])).exp();
                }
            }
        }
        let want = sum.ln_1p();
        worst = worst.max((got - want).abs());
        crit.check(
            (got - want).abs() <= 1e-9,
            format!("case {case} (n={n}): |{got:.12} − {want:.12}| > 1e-9"),
        );
    }

    // Closed forms: no ordered pairs ⇒ exactly 0; one ordered pair with equal
    // cosines ⇒ ln 2.
    let zero = cosent_loss_value(&[0.3, -0.2, 0.9], &[1.0, 1.0, 1.0], 20.0)?;
    crit.check(zero.abs() <= 1e-12, format!("all-tied targets gave {zero:.3e}, expected 0"));
    let ln2 = cosent_loss_value(&[0.4, 0.4], &[1.0, 0.0], 20.0)?;
    crit.check(
        (ln2 - std::f64::consts::LN_2).abs() <= 1e-12,
        format!("equal-cosine pair gave {ln2:.15}, expected ln 2"),
    );
    crit.note(format!("200 random cases within 1e-9 (worst {worst:.2e}); closed forms exact"));
    crit.finish();
    Ok(())
}

// ---------------------------------------------------------------------------
// 11. Corpus pipeline: near-dup estimation, dedup, classifier, filtering, BPE.
// ---------------------------------------------------------------------------

#[test]
fn a11_curation_pipeline_end_to_end() -> Result<()> {
    let started = Instant::now();
    let mut crit = Criterion::new("curation pipeline");
    let params = MinHashParams { k: 256, w: 5, seed: 123 };

    // Estimator accuracy on pairs built to have exact overlap 0.5.
    let mut err_sum = 0.0f64;
    let pairs = 200usize;
    for i in 0..pairs {
        let (a, b) = jaccard_half_pair(i);
        let sa = rexlab_core::corpus::minhash_signature(&a, &params)?;
        let sb = rexlab_core::corpus::minhash_signature(&b, &params)?;
        err_sum += (jaccard_estimate(&sa, &sb)? - 0.5).abs();
    }
    let mean_err = err_sum / pairs as f64;
    crit.check(mean_err <= 0.04, format!("mean |J error| {mean_err:.4} > 0.04"));

    // Deduplication recovers planted near-duplicates and is idempotent.
    let mut docs = unique_docs(150, 30);
    let planted = 60usize;
    for i in 0..planted {
        let mut text = docs[i].text.clone();
        if i % 2 == 1 {
            text.push_str(&format!(" extra{i}"));
        }
        docs.push(Document::new(format!("dup{i}"), "synthetic", text));
    }
    let report = dedup(&docs, 0.8, &params)?;
    let mut cluster_of: HashMap<&str, usize> = HashMap::new();
    for (ci, c) in report.clusters.iter().enumerate() {
        cluster_of.insert(c.kept.as_str(), ci);
        for d in &c.dropped {
            cluster_of.insert(d.as_str(), ci);
        }
    }
    let recovered = (0..planted)
        .filter(|i| {
            let a = cluster_of.get(format!("base{i}").as_str());
            let b = cluster_of.get(format!("dup{i}").as_str());
            a.is_some() && a == b
        })
        .count();
    crit.check(
        recovered as f64 >= 0.95 * planted as f64,
        format!("only {recovered}/{planted} planted duplicate pairs recovered"),
    );
    let again = dedup(&report.retained, 0.8, &params)?;
    let ids = |ds: &[Document]| -> Vec<String> { ds.iter().map(|d| d.id.clone()).collect() };
    crit.check(
        again.clusters.is_empty() && ids(&again.retained) == ids(&report.retained),
        "second dedup pass changed an already-deduplicated corpus".to_string(),
    );

    // Distilled classifier separates the two topics on held-out documents.
    let mut rng = stream(13, "acc-clf", &[]);
    let clf_docs = separable_corpus(400, &mut rng);
    let (clf, clf_report) = train_classifier(&clf_docs, &ClassifierHyper::default())?;
    let acc = clf_report.holdout_accuracy.expect("non-empty holdout");
    crit.check(acc >= 0.95, format!("holdout accuracy {acc:.3} < 0.95"));

    // Raising the score threshold only ever shrinks the retained set. The
    // pool blends the topics so scores spread out and each cut really bites.
    let pool = blended_corpus(200, &mut rng);
    let keep_ids = |tau: f64| -> Result<HashSet<String>> {
        let (kept, _) = threshold_filter(&pool, &clf, tau)?;
        Ok(kept.into_iter().map(|d| d.id).collect())
    };
    let (loose, mid, tight) = (keep_ids(0.1)?, keep_ids(0.5)?, keep_ids(0.9)?);
    crit.check(
        tight.is_subset(&mid) && mid.is_subset(&loose),
        format!(
            "retained sets not nested: {} / {} / {} at thresholds 0.9 / 0.5 / 0.1",
            tight.len(),
            mid.len(),
            loose.len()
        ),
    );
    crit.check(
        tight.len() < mid.len() && mid.len() < loose.len(),
        format!(
            "thresholds did not distinguish the pool: {} / {} / {} docs retained",
            tight.len(),
            mid.len(),
            loose.len()
        ),
    );

    // Byte-level tokenizer round-trips arbitrary well-formed text exactly.
    let sample = [
        "plain ascii with words and more plain words to merge",
        "ανάλυση κειμένου και λέξεις για την ανάλυση",
        "分かち書きのないテキストを分かち書きする",
        "emoji 🎉🛒 and symbols ∀x∈S with emoji again 🎉",
        "числа и буквы вперемешку среди других букв и чисел",
        "digits 12345 punctuation?! quotes \"nested\" and CAPS",
    ];
    let vocab = train_bpe(&sample, 300)?;
    let mut trip_rng = ChaCha8Rng::seed_from_u64(0x0ff);
    let mut failures = 0usize;
    for _ in 0..10_000 {
        let text = random_utf8(&mut trip_rng, 24);
        if vocab.decode(&vocab.encode(&text))? != text {
            failures += 1;
        }
    }
    crit.check(failures == 0, format!("{failures} of 10000 round-trips changed the text"));

    let secs = started.elapsed().as_secs_f64();
    crit.note(format!(
        "J err {mean_err:.4}; dups {recovered}/{planted}; clf {acc:.3}; nested {}⊆{}⊆{}; 10000 round-trips ({secs:.0}s)",
        tight.len(),
        mid.len(),
        loose.len()
    ));
    crit.finish();
    Ok(())
}

// ---------------------------------------------------------------------------
// 12. Bit-identical reruns and exact checkpoint-resume reproduction.
// ---------------------------------------------------------------------------

fn dir_snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> =
            std::fs::read_dir(dir).expect("readable dir").map(|e| e.expect("entry")).collect();
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).expect("under root").display().to_string();
                out.push((rel, std::fs::read(&p).expect("readable file")));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn a12_determinism_and_exact_resume() -> Result<()> {
    let mut crit = Criterion::new("bit-identical reruns and exact resume");
    let vocab = 290usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0xd7);
    let docs: Vec<Vec<TokenId>> = (0..20)
        .map(|_| {
            let n = rng.gen_range(30..60);
            (0..n).map(|_| rng.gen_range(5..vocab as TokenId)).collect()
        })
        .collect();
    let mut cfg = EncoderConfig::sized(2, 32, 48, 2, vocab, 18);
    cfg.dropout = 0.1;
    let phase = || single_phase(6_000, 18, vec![1.0], vec![1.0], 1e-3, 4);
    let dir = tempfile::tempdir().expect("tempdir");
    let tconf = |name: &str, limit: Option<u64>| {
        let mut c = TrainerConfig::new(dir.path().join(name), 0, 3, 4);
        c.step_limit = limit;
        c
    };
    let source = || vec![TrainSource::new("synthetic", docs.clone())];

    // Two runs, same seed and configuration, different directories.
    let mut run_a = Trainer::new(Model32::build(cfg.clone(), 77)?, vec![phase()], source(), tconf("a", None), 77)?;
    let recs_a = run_a.run()?;
    let mut run_b = Trainer::new(Model32::build(cfg.clone(), 77)?, vec![phase()], source(), tconf("b", None), 77)?;
    run_b.run()?;
    let snap_a = dir_snapshot(&dir.path().join("a"));
    let snap_b = dir_snapshot(&dir.path().join("b"));
    crit.check(
        snap_a.iter().map(|(n, _)| n).eq(snap_b.iter().map(|(n, _)| n)),
        "the two runs wrote different file sets".to_string(),
    );
    let diff: Vec<&str> = snap_a
        .iter()
        .zip(&snap_b)
        .filter(|((_, da), (_, db))| da != db)
        .map(|((n, _), _)| n.as_str())
        .collect();
    crit.check(diff.is_empty(), format!("byte differences in {diff:?}"));

    // A run interrupted every 7 steps, resumed from disk each time, must
    // reproduce the uninterrupted loss trace exactly.
    let cfg_c = tconf("c", Some(7));
    let mut trace_c: Vec<Option<f64>> = Vec::new();
    let mut run_c =
        Trainer::new(Model32::build(cfg.clone(), 77)?, vec![phase()], source(), cfg_c.clone(), 77)?;
    let mut rounds = 0usize;
    loop {
        let recs = run_c.run()?;
        trace_c.extend(recs.iter().map(|r| r.loss));
        if run_c.state.phase_index >= run_c.phases.len() {
            break;
        }
        drop(run_c);
        run_c = Trainer::resume(vec![phase()], source(), cfg_c.clone())?;
        rounds += 1;
        assert!(rounds < 1000, "resume loop failed to make progress");
    }
    let trace_a: Vec<Option<f64>> = recs_a.iter().map(|r| r.loss).collect();
    crit.check(
        trace_c.len() == trace_a.len(),
        format!("interrupted run took {} steps, uninterrupted {}", trace_c.len(), trace_a.len()),
    );
    let exact = trace_a
        .iter()
        .zip(&trace_c)
        .all(|(x, y)| match (x, y) {
            (Some(a), Some(b)) => a.to_bits() == b.to_bits(),
            (None, None) => true,
            _ => false,
        });
    crit.check(exact, "loss traces differ between interrupted and uninterrupted runs".to_string());
    let ckpt_a = dir_snapshot(&dir.path().join("a").join("checkpoint"));
    let ckpt_c = dir_snapshot(&dir.path().join("c").join("checkpoint"));
    crit.check(
        ckpt_a == ckpt_c,
        "final checkpoints differ between interrupted and uninterrupted runs".to_string(),
    );

    crit.note(format!(
        "{} files byte-identical across reruns; {} steps reproduced bit-exactly over {} resumes",
        snap_a.len(),
        trace_a.len(),
        rounds
    ));
    crit.finish();
    Ok(())
}
