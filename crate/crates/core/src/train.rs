//! Batched optimization of one model variant over the synthetic corpus,
//! plus dropout-free evaluation with consensus scoring. One training step
//! samples a batch with replacement, draws each target uniformly from the
//! sample's ten annotations, and applies one Adam update to the mean
//! gradient.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::data::{Category, VQASample, Vocab, ANNOTATIONS};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metric::{majority_annotation, vqa_accuracy, EvalReport, ScoreAccumulator};
use crate::model::{predict_answer, Model, ModelConfig};
use crate::params::ParamStore;
use crate::rng::{indexed_stream, stream};
use crate::tensor::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: AdamConfig,
    pub batch: usize,
    pub iters: u64,
    pub dropout: f64,
    pub seed: u64,
    /// Validation cadence in steps; the last step always evaluates.
    pub eval_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optim: AdamConfig::default(),
            batch: 32,
            iters: 5_000,
            dropout: 0.3,
            seed: 0,
            eval_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.batch == 0 {
            return Err(Error::config("batch size must be at least 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval interval must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// One line of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    /// Mean batch loss.
    pub loss: f64,
    /// Overall validation accuracy, on steps that evaluated.
    pub val_accuracy: Option<f64>,
}

/// Parameters frozen at the best validation score seen so far.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub step: u64,
    pub val_accuracy: f64,
    pub store: ParamStore,
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub model_cfg: ModelConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: Adam,
    pub trace: Vec<TraceRow>,
    pub best: Option<BestSnapshot>,
}

/// The corpus a model reads must fit the widths it was built with.
pub fn check_vocab(cfg: &ModelConfig, vocab: &Vocab) -> Result<()> {
    if vocab.token_count() > cfg.token_vocab {
        return Err(Error::config(format!(
            "vocabulary has {} tokens but the model embeds only {}",
            vocab.token_count(),
            cfg.token_vocab
        )));
    }
    if vocab.answer_count() != cfg.answers {
        return Err(Error::config(format!(
            "vocabulary has {} answers but the model scores {}",
            vocab.answer_count(),
            cfg.answers
        )));
    }
    Ok(())
}

fn check_features(cfg: &ModelConfig, dataset: &[VQASample]) -> Result<()> {
    for s in dataset {
        s.validate(cfg.regions, cfg.region_feat)?;
    }
    Ok(())
}

/// Draw this visit's target annotation uniformly, redrawing out-of-vocab
/// answers. Returns None when no annotation is in vocabulary at all.
fn draw_target(
    sample: &VQASample,
    vocab: &Vocab,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<usize> {
    if !sample.annotations.iter().any(|a| vocab.answer_id(a).is_some()) {
        return None;
    }
    loop {
        let k = rng.gen_range(0..ANNOTATIONS);
        if let Some(id) = vocab.answer_id(&sample.annotations[k]) {
            return Some(id);
        }
    }
}

/// Train `cfg.iters` steps from a fresh initialization. The model config's
/// dropout is overridden by the train config so one dataset of runs can
/// sweep it. The trace carries one row per step; rows on the evaluation
/// cadence (and the last row) also carry validation accuracy.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[VQASample],
    val_set: &[VQASample],
    vocab: &Vocab,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = ModelConfig {
        dropout: cfg.dropout,
        ..*model_cfg
    };
    model_cfg.validate()?;
    check_vocab(&model_cfg, vocab)?;
    if train_set.is_empty() {
        return Err(Error::degenerate("train", "empty training set"));
    }
    check_features(&model_cfg, train_set)?;
    check_features(&model_cfg, val_set)?;

    let mut store = ParamStore::new(cfg.seed);
    let model = Model::build(&mut store, model_cfg)?;
    let mut optimizer = Adam::new(cfg.optim)?;
    let mut trace = Vec::with_capacity(cfg.iters as usize);
    let mut best: Option<BestSnapshot> = None;

    for step in 0..cfg.iters {
        let mut batch_rng = indexed_stream(cfg.seed, "train.batch", step);
        let mut dropout_rng = indexed_stream(cfg.seed, "train.dropout", step);
        let mut total: HashMap<String, Vec<f64>> = HashMap::new();
        let mut loss_sum = 0.0;
        let mut processed = 0usize;
        for _ in 0..cfg.batch {
            let sample = &train_set[batch_rng.gen_range(0..train_set.len())];
            let Some(target) = draw_target(sample, vocab, &mut batch_rng) else {
                continue;
            };
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let feats = g.constant(sample.feature_tensor(model_cfg.regions, model_cfg.region_feat)?);
            let out = model.forward(&mut g, &b, &sample.tokens, feats, Mode::Train, &mut dropout_rng)?;
            let loss = model.loss(&mut g, out.logits, target)?;
            let loss_value = g.data(loss)[0];
            if !loss_value.is_finite() {
                let tensor = g
                    .first_nonfinite()
                    .map(|(_, desc)| desc)
                    .unwrap_or_else(|| "loss".to_string());
                return Err(Error::Diverged { step, tensor });
            }
            g.backward(loss)?;
            for (name, grad) in b.grads(&mut g, &store)? {
                match total.get_mut(&name) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&grad) {
                            *a += v;
                        }
                    }
                    None => {
                        total.insert(name, grad);
                    }
                }
            }
            loss_sum += loss_value;
            processed += 1;
        }
        if processed == 0 {
            return Err(Error::degenerate(
                "train",
                format!("step {step}: no sampled question had an in-vocabulary annotation"),
            ));
        }
        let scale = 1.0 / processed as f64;
        for grad in total.values_mut() {
            for v in grad.iter_mut() {
                *v *= scale;
            }
        }
        for grad in total.values() {
            if let Some(bad) = grad.iter().find(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    tensor: format!("gradient value {bad}"),
                });
            }
        }
        optimizer.step(&mut store, &total)?;

        let mut val_accuracy = None;
        let due = (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.iters;
        if due && !val_set.is_empty() {
            let eval = evaluate(&model, &store, val_set, vocab)?;
            let overall = eval.report.overall;
            if best.as_ref().map_or(true, |b| overall > b.val_accuracy) {
                best = Some(BestSnapshot {
                    step,
                    val_accuracy: overall,
                    store: store.clone(),
                });
            }
            val_accuracy = Some(overall);
        }
        trace.push(TraceRow {
            step,
            loss: loss_sum * scale,
            val_accuracy,
        });
    }

    Ok(TrainOutcome {
        config: *cfg,
        model_cfg,
        model,
        store,
        optimizer,
        trace,
        best,
    })
}

/// Per-sample consensus scores plus the aggregated report; `scores` lines
/// up with the dataset's order.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub scores: Vec<f64>,
}

/// Score a model over a split in eval mode (dropout off).
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    dataset: &[VQASample],
    vocab: &Vocab,
) -> Result<Evaluation> {
    check_vocab(&model.cfg, vocab)?;
    check_features(&model.cfg, dataset)?;
    let mut rng = stream(store.seed(), "eval");
    let mut acc = ScoreAccumulator::new();
    let mut scores = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let feats = g.constant(sample.feature_tensor(model.cfg.regions, model.cfg.region_feat)?);
        let out = model.forward(&mut g, &b, &sample.tokens, feats, Mode::Eval, &mut rng)?;
        let logits = g.data(out.logits).to_vec();
        let answer_id = predict_answer(&logits)?;
        let answer = vocab.answer(answer_id).ok_or_else(|| {
            Error::contract("evaluate", format!("predicted id {answer_id} has no answer string"))
        })?;
        let score = vqa_accuracy(answer, &sample.annotations)?;
        acc.add(sample.category, score);
        scores.push(score);
    }
    Ok(Evaluation {
        report: acc.report(model.cfg.variant.name(), store.seed()),
        scores,
    })
}

/// Best possible mean consensus score on a split: always answer with the
/// majority annotation. With no label disagreement this is exactly 1.
pub fn consensus_ceiling(dataset: &[VQASample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::degenerate("consensus_ceiling", "empty dataset"));
    }
    let mut sum = 0.0;
    for s in dataset {
        sum += vqa_accuracy(majority_annotation(&s.annotations)?, &s.annotations)?;
    }
    Ok(sum / dataset.len() as f64)
}

/// Mean accuracy over the counting and relational questions of a split,
/// given per-sample scores from [`evaluate`]. Returns None when the split
/// has no such questions.
pub fn counting_relational_accuracy(dataset: &[VQASample], scores: &[f64]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (s, &score) in dataset.iter().zip(scores) {
        if s.category == Category::Number || s.question.starts_with("what is ") {
            sum += score;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, DataConfig, Split};
    use crate::model::Variant;

    fn tiny_model(variant: Variant) -> ModelConfig {
        ModelConfig {
            joint: 12,
            learned_embed: 6,
            frozen_embed: 6,
            q_hidden: 10,
            attn_scaled: 8,
            attn_hidden: 8,
            attn_output: 8,
            token_vocab: 24,
            ..ModelConfig::desk(variant)
        }
    }

    fn tiny_data(count: usize, split: Split) -> (Vec<VQASample>, Vocab) {
        let cfg = DataConfig { seed: 5, ..DataConfig::default() };
        let samples = generate_split(&cfg, count, split).unwrap();
        let vocab = Vocab::for_grid(cfg.grid, cfg.feat_dim).unwrap();
        (samples, vocab)
    }

    fn tiny_train_cfg(iters: u64) -> TrainConfig {
        TrainConfig {
            batch: 4,
            iters,
            dropout: 0.1,
            eval_interval: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_returns_the_initialization() {
        let (data, vocab) = tiny_data(16, Split::Train);
        let cfg = tiny_train_cfg(0);
        let out = train(&tiny_model(Variant::SimpleRvau), &cfg, &data, &[], &vocab).unwrap();
        let mut fresh = ParamStore::new(cfg.seed);
        let mc = ModelConfig { dropout: cfg.dropout, ..tiny_model(Variant::SimpleRvau) };
        Model::build(&mut fresh, mc).unwrap();
        assert!(out.trace.is_empty());
        for name in fresh.names() {
            let a = fresh.get(name).unwrap().data();
            let b = out.store.get(name).unwrap().data();
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn same_seed_gives_a_bitwise_identical_trace() {
        let (data, vocab) = tiny_data(32, Split::Train);
        let (val, _) = tiny_data(8, Split::Val);
        let cfg = tiny_train_cfg(10);
        let mc = tiny_model(Variant::SimpleRvau);
        let a = train(&mc, &cfg, &data, &val, &vocab).unwrap();
        let b = train(&mc, &cfg, &data, &val, &vocab).unwrap();
        assert_eq!(a.trace.len(), b.trace.len());
        for (ra, rb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(ra.step, rb.step);
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.val_accuracy, rb.val_accuracy);
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let (data, vocab) = tiny_data(32, Split::Train);
        let mc = tiny_model(Variant::SimpleRvau);
        let a = train(&mc, &tiny_train_cfg(5), &data, &[], &vocab).unwrap();
        let cfg_b = TrainConfig { seed: 1, ..tiny_train_cfg(5) };
        let b = train(&mc, &cfg_b, &data, &[], &vocab).unwrap();
        assert_ne!(a.trace[4].loss, b.trace[4].loss);
    }

    #[test]
    fn non_finite_values_report_divergence_with_a_tensor_name() {
        // Saturating gates and stable softmax keep extreme learning rates
        // finite, so poison the inputs to exercise the abort path.
        let (mut data, vocab) = tiny_data(8, Split::Train);
        for s in &mut data {
            s.features[0] = f64::NAN;
        }
        let err = train(&tiny_model(Variant::SimpleRvau), &tiny_train_cfg(1), &data, &[], &vocab)
            .unwrap_err();
        match err {
            Error::Diverged { step, tensor } => {
                assert_eq!(step, 0);
                assert!(!tensor.is_empty());
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn all_out_of_vocab_annotations_are_rejected() {
        let (mut data, vocab) = tiny_data(4, Split::Train);
        for s in &mut data {
            s.annotations = vec!["florp".to_string(); ANNOTATIONS];
        }
        let err = train(&tiny_model(Variant::SimpleRvau), &tiny_train_cfg(1), &data, &[], &vocab)
            .unwrap_err();
        assert!(matches!(err, Error::Degenerate { .. }), "got {err}");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (data, vocab) = tiny_data(12, Split::Val);
        let mc = ModelConfig { dropout: 0.0, ..tiny_model(Variant::SimpleConv) };
        let mut store = ParamStore::new(3);
        let model = Model::build(&mut store, mc).unwrap();
        let a = evaluate(&model, &store, &data, &vocab).unwrap();
        let b = evaluate(&model, &store, &data, &vocab).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.report.samples, 12);
        assert!(a.report.overall >= 0.0 && a.report.overall <= 1.0);
    }

    #[test]
    fn vocab_width_mismatches_are_config_errors() {
        let (data, vocab) = tiny_data(4, Split::Train);
        let mc = ModelConfig { answers: 7, ..tiny_model(Variant::SimpleRvau) };
        let err = train(&mc, &tiny_train_cfg(1), &data, &[], &vocab).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
        let mc = ModelConfig { token_vocab: 3, ..tiny_model(Variant::SimpleRvau) };
        let err = train(&mc, &tiny_train_cfg(1), &data, &[], &vocab).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
    }

    #[test]
    fn clean_labels_have_a_ceiling_of_one() {
        let cfg = DataConfig { corruption: 0.0, ..DataConfig::default() };
        let samples = generate_split(&cfg, 50, Split::Train).unwrap();
        assert_eq!(consensus_ceiling(&samples).unwrap(), 1.0);
    }

    #[test]
    fn noisy_labels_lower_the_ceiling_but_not_far() {
        let cfg = DataConfig { corruption: 0.1, ..DataConfig::default() };
        let samples = generate_split(&cfg, 400, Split::Train).unwrap();
        let ceiling = consensus_ceiling(&samples).unwrap();
        assert!(ceiling > 0.9 && ceiling <= 1.0, "ceiling {ceiling}");
    }

    #[test]
    fn best_snapshot_tracks_the_top_validation_score() {
        let (data, vocab) = tiny_data(48, Split::Train);
        let (val, _) = tiny_data(16, Split::Val);
        let cfg = tiny_train_cfg(16);
        let out = train(&tiny_model(Variant::SimpleRvau), &cfg, &data, &val, &vocab).unwrap();
        let best = out.best.expect("validation ran");
        let evaluated: Vec<f64> = out.trace.iter().filter_map(|r| r.val_accuracy).collect();
        assert!(!evaluated.is_empty());
        let top = evaluated.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(best.val_accuracy, top);
        // The snapshot really is the parameters from that step, not the end.
        let model = Model::build(&mut ParamStore::new(cfg.seed), ModelConfig {
            dropout: cfg.dropout,
            ..tiny_model(Variant::SimpleRvau)
        })
        .unwrap();
        let replay = evaluate(&model, &best.store, &val, &vocab).unwrap();
        assert_eq!(replay.report.overall, best.val_accuracy);
    }

    #[test]
    fn counting_relational_subset_selects_the_right_rows() {
        let (data, _) = tiny_data(60, Split::Train);
        let scores: Vec<f64> = data
            .iter()
            .map(|s| {
                if s.category == Category::Number || s.question.starts_with("what is ") {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        assert_eq!(counting_relational_accuracy(&data, &scores), Some(1.0));
        let zeros = vec![0.0; data.len()];
        assert_eq!(counting_relational_accuracy(&data, &zeros), Some(0.0));
    }
}
