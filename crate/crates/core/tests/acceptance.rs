//! Acceptance gate: eight binding checks, one test each, covering gradient
//! correctness, fusion exactness, the consensus metric, attention contracts,
//! desk-scale learnability, the ablation harness, determinism/persistence,
//! and optimizer/init spot values. Each test prints a single
//! "criterion N PASS" line (visible under --nocapture) once its assertions
//! hold; the cargo pass/fail line is the gate.

use std::collections::HashMap;
use std::time::Instant;

use drau::ablation::{run_ablation, variant_param_count, AblationConfig};
use drau::adam::{Adam, AdamConfig};
use drau::attention::{ConvAttnParams, RauConfig, RauParams};
use drau::checkpoint::{load_checkpoint, save_checkpoint};
use drau::data::{generate_split, Category, DataConfig, Split, Vocab};
use drau::fusion::{mcb_fuse, outer_sketch_brute_force, SketchParams};
use drau::init::glorot_bound;
use drau::metric::vqa_accuracy;
use drau::model::{ModelConfig, Variant};
use drau::params::{Init, ParamStore};
use drau::rng::stream;
use drau::suite::gradient_suite;
use drau::tensor::{Graph, Tensor};
use drau::train::{evaluate, train, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;

fn clean_data(
    train_n: usize,
    val_n: usize,
) -> (Vec<drau::data::VQASample>, Vec<drau::data::VQASample>, Vocab) {
    let dcfg = DataConfig {
        corruption: 0.0,
        ..DataConfig::default()
    };
    let vocab = Vocab::for_grid(dcfg.grid, dcfg.feat_dim).unwrap();
    let train_set = generate_split(&dcfg, train_n, Split::Train).unwrap();
    let val_set = generate_split(&dcfg, val_n, Split::Val).unwrap();
    (train_set, val_set, vocab)
}

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let report = gradient_suite().unwrap();
    let elapsed = t0.elapsed();
    print!("{}", report.to_text());
    assert!(report.passed(), "\n{}", report.to_text());
    let worst = report
        .cases
        .iter()
        .map(|c| c.max_rel_err)
        .fold(0.0_f64, f64::max);
    assert!(worst < 1e-4, "worst case rel err {worst}");
    assert!(
        elapsed.as_secs() < 120,
        "suite took {elapsed:?}, budget is 2 min"
    );
    println!(
        "criterion 1 PASS: {} cases, worst rel err {worst:.3e}, {elapsed:?}",
        report.cases.len()
    );
}

#[test]
fn criterion_2_fusion_exactness() {
    let t0 = Instant::now();
    let (n, d) = (8, 16);
    let mut worst = 0.0_f64;
    for seed in 0..50u64 {
        let p = SketchParams::new(n, n, d, seed).unwrap();
        let mut rng = stream(seed, "acceptance.mcb");
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oracle = outer_sketch_brute_force(&x, &y, &p);

        let mut g = Graph::new();
        let xv = g.leaf(Tensor::vector(x).unwrap());
        let yv = g.leaf(Tensor::vector(y).unwrap());
        let fused = mcb_fuse(&mut g, xv, yv, &p, false, false).unwrap();
        let got = g.data(fused);
        assert_eq!(got.len(), d);
        for (a, b) in got.iter().zip(&oracle) {
            let diff = (a - b).abs();
            worst = worst.max(diff);
            assert!(diff <= 1e-9, "seed {seed}: |{a} - {b}| = {diff}");
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}, budget is 10 s");
    println!("criterion 2 PASS: 50 seeds, worst abs diff {worst:.3e}, {elapsed:?}");
}

#[test]
fn criterion_3_consensus_metric() {
    let t0 = Instant::now();
    // Exhaustive over match counts 0..=10.
    for c in 0..=10usize {
        let mut annotations: Vec<String> = vec!["yes".to_string(); c];
        for i in 0..10 - c {
            annotations.push(format!("filler{i}"));
        }
        let got = vqa_accuracy("yes", &annotations).unwrap();
        let want = (c as f64 / 3.0).min(1.0);
        assert_eq!(got, want, "match count {c}");
    }
    // Random multisets against a string-counting oracle.
    let pool = ["yes", "no", "2", "red", "blue circle", "nothing"];
    let mut rng = stream(7, "acceptance.metric");
    for _ in 0..500 {
        let annotations: Vec<String> = (0..10)
            .map(|_| pool.choose(&mut rng).unwrap().to_string())
            .collect();
        let answer = pool.choose(&mut rng).unwrap();
        let matches = annotations.iter().filter(|a| a.as_str() == *answer).count();
        let want = (matches as f64 / 3.0).min(1.0);
        assert_eq!(vqa_accuracy(answer, &annotations).unwrap(), want);
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_millis() < 1000, "took {elapsed:?}, budget is 1 s");
    println!("criterion 3 PASS: exhaustive 0..=10 and 500 random multisets, {elapsed:?}");
}

/// Forward one attention unit and return its weight matrix [G x K].
fn attn_weights(
    recurrent: bool,
    store: &ParamStore,
    unit_r: &RauParams,
    unit_c: &ConvAttnParams,
    x_t: &Tensor,
    f_t: &Tensor,
    mask: Option<&[bool]>,
) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let x = g.leaf(x_t.detached());
    let f = g.leaf(f_t.detached());
    let map = if recurrent {
        unit_r.forward(&mut g, &b, x, f, mask).unwrap().1
    } else {
        unit_c.forward(&mut g, &b, x, f, mask).unwrap().1
    };
    (0..map.glimpses)
        .map(|gi| map.glimpse_row(gi).to_vec())
        .collect()
}

#[test]
fn criterion_4_attention_normalization_and_dichotomy() {
    let t0 = Instant::now();
    let (k, channels, feat) = (6, 5, 3);
    let cfg = RauConfig {
        positions: k,
        channels,
        scaled: 6,
        hidden: 5,
        glimpses: 2,
        feat_width: feat,
        output: 4,
    };
    let mut store = ParamStore::new(11);
    let rau = RauParams::register(&mut store, "rau", cfg).unwrap();
    let conv = ConvAttnParams::register(&mut store, "conv", k, channels, 6, 2, feat, 4).unwrap();

    let mut rng = stream(11, "acceptance.attn");
    for recurrent in [true, false] {
        for i in 0..1000 {
            let x = Tensor::matrix(
                k,
                channels,
                (0..k * channels).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let f = Tensor::matrix(
                k,
                feat,
                (0..k * feat).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            // Alternate unmasked inputs with a random mask leaving at
            // least one position visible.
            let mask: Option<Vec<bool>> = if i % 2 == 0 {
                None
            } else {
                let open = rng.gen_range(0..k);
                Some((0..k).map(|p| p != open && rng.gen_bool(0.4)).collect())
            };
            let rows = attn_weights(recurrent, &store, &rau, &conv, &x, &f, mask.as_deref());
            for row in &rows {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9, "row sums to {sum}");
                if let Some(m) = &mask {
                    for (p, (&w, &dead)) in row.iter().zip(m).enumerate() {
                        if dead {
                            assert!(w == 0.0, "masked position {p} holds {w}");
                        }
                    }
                }
            }
        }
    }

    // Dichotomy: permuting positions always commutes with conv attention,
    // and some permutation breaks commutation for the recurrent unit.
    let base_x = Tensor::matrix(
        k,
        channels,
        (0..k * channels).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let base_f = Tensor::matrix(
        k,
        feat,
        (0..k * feat).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let permute = |t: &Tensor, cols: usize, perm: &[usize]| -> Tensor {
        let src = t.data();
        let mut data = Vec::with_capacity(src.len());
        for &p in perm {
            data.extend_from_slice(&src[p * cols..(p + 1) * cols]);
        }
        Tensor::matrix(perm.len(), cols, data).unwrap()
    };
    let mut rau_violation = false;
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let px = permute(&base_x, channels, &perm);
        let pf = permute(&base_f, feat, &perm);
        for recurrent in [true, false] {
            let plain = attn_weights(recurrent, &store, &rau, &conv, &base_x, &base_f, None);
            let moved = attn_weights(recurrent, &store, &rau, &conv, &px, &pf, None);
            let gap = (0..plain.len())
                .flat_map(|gi| (0..k).map(move |n| (gi, n)))
                .map(|(gi, n)| (moved[gi][n] - plain[gi][perm[n]]).abs())
                .fold(0.0_f64, f64::max);
            if recurrent {
                rau_violation |= gap > 1e-6;
            } else {
                assert!(gap <= 1e-9, "conv permutation gap {gap}");
            }
        }
    }
    assert!(
        rau_violation,
        "no order-sensitive permutation found for the recurrent unit in 100 draws"
    );
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, budget is 1 min");
    println!("criterion 4 PASS: 2x1000 normalized maps, dichotomy held, {elapsed:?}");
}

#[test]
fn criterion_5_learnability() {
    let t0 = Instant::now();
    let (train_set, val_set, vocab) = clean_data(4000, 1000);
    let mcfg = ModelConfig::desk(Variant::SimpleRvau);
    let tcfg = TrainConfig {
        iters: 5000,
        batch: 32,
        dropout: 0.3,
        seed: 0,
        eval_interval: 500,
        ..TrainConfig::default()
    };
    assert!((tcfg.optim.lr - 7e-4).abs() < 1e-18, "default lr drifted");
    let out = train(&mcfg, &tcfg, &train_set, &val_set, &vocab).unwrap();
    let ev = evaluate(&out.model, &out.store, &val_set, &vocab).unwrap();
    let yesno = ev.report.category(Category::YesNo).unwrap().accuracy;
    let number = ev.report.category(Category::Number).unwrap().accuracy;
    let elapsed = t0.elapsed();
    println!(
        "criterion 5: yes/no {yesno:.4} (bar 0.95), counting {number:.4} (bar 0.80), \
         overall {:.4}, wall {elapsed:?} (target 15 min)",
        ev.report.overall
    );
    assert!(yesno >= 0.95, "yes/no accuracy {yesno:.4} below 0.95");
    assert!(number >= 0.80, "counting accuracy {number:.4} below 0.80");
    println!("criterion 5 PASS");
}

#[test]
fn criterion_6_ablation_methodology() {
    let t0 = Instant::now();
    let (train_set, val_set, vocab) = clean_data(600, 300);
    let mcfg = ModelConfig::desk(Variant::SimpleConv);
    // Reduced budget: the methodology contract (completion, matched
    // parameter counts, spread across seeds, emitted table) is what is
    // gated here, not trained accuracy. The step count and rate are set
    // just past the point where every variant leaves its initial
    // modal-answer plateau, so seeds genuinely diverge.
    let ablation = AblationConfig {
        variants: Variant::ALL.to_vec(),
        seeds: vec![0, 1, 2],
        train: TrainConfig {
            iters: 500,
            batch: 8,
            optim: AdamConfig {
                lr: 1.5e-3,
                ..AdamConfig::default()
            },
            dropout: 0.3,
            eval_interval: 500,
            ..TrainConfig::default()
        },
        jobs: 1,
    };
    let table = run_ablation(&mcfg, &ablation, &train_set, &val_set, &vocab).unwrap();
    print!("{}", table.to_tsv());
    for note in table.directional_notes() {
        println!("{note}");
    }

    assert_eq!(table.rows.len(), 6);
    for row in &table.rows {
        assert_eq!(row.failed, 0, "{} had failed runs", row.variant);
        assert_eq!(row.completed, 3, "{} incomplete", row.variant);
        assert!(
            row.overall.std > 0.0,
            "{} shows no variance across seeds",
            row.variant
        );
    }
    // The simple pair match each other; the dual grid all match its base.
    for (a, b) in [
        (Variant::SimpleRvau, Variant::SimpleConv),
        (Variant::DcaRvau, Variant::Dca),
        (Variant::DcaRtau, Variant::Dca),
        (Variant::Drau, Variant::Dca),
    ] {
        let pa = variant_param_count(&mcfg, a).unwrap() as f64;
        let pb = variant_param_count(&mcfg, b).unwrap() as f64;
        let gap = (pa - pb).abs() / pb;
        assert!(gap < 0.02, "{a} vs {b}: params {pa} vs {pb}, gap {gap:.4}");
    }
    let elapsed = t0.elapsed();
    println!("criterion 6 PASS: 6 variants x 3 seeds, table emitted, {elapsed:?}");
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let t0 = Instant::now();
    let (train_set, val_set, vocab) = clean_data(256, 128);
    let mcfg = ModelConfig::desk(Variant::SimpleRvau);
    let tcfg = TrainConfig {
        iters: 40,
        batch: 8,
        dropout: 0.3,
        seed: 3,
        eval_interval: 20,
        ..TrainConfig::default()
    };
    let a = train(&mcfg, &tcfg, &train_set, &val_set, &vocab).unwrap();
    let b = train(&mcfg, &tcfg, &train_set, &val_set, &vocab).unwrap();
    assert_eq!(a.trace.len(), b.trace.len());
    for (ra, rb) in a.trace.iter().zip(&b.trace) {
        assert_eq!(ra.step, rb.step);
        assert_eq!(
            ra.loss.to_bits(),
            rb.loss.to_bits(),
            "trace diverged at step {}",
            ra.step
        );
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    save_checkpoint(&path, &tcfg, &mcfg, &a.store, &a.optimizer).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.step, 40);

    let before = evaluate(&a.model, &a.store, &val_set, &vocab).unwrap();
    let after = evaluate(&loaded.model, &loaded.store, &val_set, &vocab).unwrap();
    assert_eq!(before.scores.len(), after.scores.len());
    for (x, y) in before.scores.iter().zip(&after.scores) {
        assert_eq!(x.to_bits(), y.to_bits(), "per-sample score changed");
    }
    assert_eq!(
        before.report.overall.to_bits(),
        after.report.overall.to_bits()
    );
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}, budget is 5 min");
    println!("criterion 7 PASS: bitwise traces and stable round-trip, {elapsed:?}");
}

#[test]
fn criterion_8_optimizer_and_init_spot_values() {
    let bound = glorot_bound(4, 4);
    assert!(
        (bound - 0.75_f64.sqrt()).abs() < 1e-12,
        "glorot bound {bound}"
    );

    let cfg = AdamConfig::default();
    let mut store = ParamStore::new(0);
    store.register("w", &[1], Init::Zeros).unwrap();
    let mut adam = Adam::new(cfg).unwrap();
    let mut grads = HashMap::new();
    grads.insert("w".to_string(), vec![1.0]);
    adam.step(&mut store, &grads).unwrap();
    let got = store.get("w").unwrap().data()[0];
    let want = -cfg.lr / (1.0 + cfg.eps);
    assert!(
        (got - want).abs() < 1e-12,
        "first step moved to {got}, expected {want}"
    );
    println!("criterion 8 PASS: glorot bound and first optimizer step exact");
}
