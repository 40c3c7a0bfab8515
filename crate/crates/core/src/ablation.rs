//! Variant-by-seed sweeps: train every requested architecture under each
//! seed, evaluate on a held-out split, and aggregate mean and spread per
//! cell. Individual run failures become table rows instead of aborting
//! the sweep.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Category, VQASample, Vocab};
use crate::error::{Error, Result};
use crate::metric::EvalReport;
use crate::model::{Model, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::train::{counting_relational_accuracy, evaluate, train, TrainConfig};

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Per-run settings; the seed field is overridden by each sweep seed.
    pub train: TrainConfig,
    /// Worker threads; 0 or 1 runs serially.
    pub jobs: usize,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::config("ablation needs at least one variant".to_string()));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("ablation needs at least one seed".to_string()));
        }
        self.train.validate()
    }
}

/// Scores of one completed run.
#[derive(Debug, Clone)]
pub struct RunScores {
    pub report: EvalReport,
    pub counting_relational: Option<f64>,
}

/// One (variant, seed) cell: either scores or the failure message.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub params: usize,
    pub outcome: std::result::Result<RunScores, String>,
}

/// Population mean and spread of one column over completed seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    fn over(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat { mean: 0.0, std: 0.0, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        // Population variance: one seed legitimately reports zero spread.
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Stat { mean, std: var.sqrt(), n }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

/// Aggregated row for one variant.
#[derive(Debug, Clone)]
pub struct VariantRow {
    pub variant: Variant,
    pub params: usize,
    pub completed: usize,
    pub failed: usize,
    pub overall: Stat,
    pub yesno: Stat,
    pub number: Stat,
    pub other: Stat,
    pub counting_relational: Stat,
}

/// The full sweep result: per-variant rows plus every raw run.
#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<VariantRow>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    /// Tab-separated table with one header line and one line per variant;
    /// failed runs are appended as comment lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "variant\tparams\tseeds\tfailed\tall\tyesno\tnumber\tother\tcounting+relational\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.variant, r.params, r.completed, r.failed, r.overall, r.yesno, r.number, r.other,
                r.counting_relational
            ));
        }
        for run in &self.runs {
            if let Err(reason) = &run.outcome {
                out.push_str(&format!("# failed\t{}\tseed {}\t{reason}\n", run.variant, run.seed));
            }
        }
        out
    }

    fn median_subset(&self, variant: Variant) -> Option<f64> {
        let mut values: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.outcome.as_ref().ok())
            .filter_map(|s| s.counting_relational)
            .collect();
        if values.is_empty() {
            return None;
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = values.len() / 2;
        Some(if values.len() % 2 == 1 {
            values[mid]
        } else {
            (values[mid - 1] + values[mid]) / 2.0
        })
    }

    /// Median counting+relational comparisons between recurrent and
    /// convolutional attention, for whichever pairs the sweep covered.
    /// Observations, not assertions.
    pub fn directional_notes(&self) -> Vec<String> {
        let pairs = [
            (Variant::SimpleRvau, Variant::SimpleConv),
            (Variant::Drau, Variant::Dca),
        ];
        let mut notes = Vec::new();
        for (recurrent, conv) in pairs {
            if let (Some(r), Some(c)) = (self.median_subset(recurrent), self.median_subset(conv)) {
                notes.push(format!(
                    "counting+relational median: {recurrent} {r:.4} vs {conv} {c:.4} (gap {:+.4})",
                    r - c
                ));
            }
        }
        notes
    }
}

/// Parameter count of one variant at the given widths.
pub fn variant_param_count(model_cfg: &ModelConfig, variant: Variant) -> Result<usize> {
    let cfg = ModelConfig { variant, ..*model_cfg };
    let mut store = ParamStore::new(0);
    Model::build(&mut store, cfg)?;
    Ok(store.total_len())
}

fn run_one(
    model_cfg: &ModelConfig,
    ablation: &AblationConfig,
    train_set: &[VQASample],
    val_set: &[VQASample],
    vocab: &Vocab,
    variant: Variant,
    seed: u64,
) -> AblationRun {
    let cfg = ModelConfig { variant, ..*model_cfg };
    let train_cfg = TrainConfig { seed, ..ablation.train };
    let params = variant_param_count(model_cfg, variant).unwrap_or(0);
    let outcome = train(&cfg, &train_cfg, train_set, val_set, vocab)
        .and_then(|out| {
            let eval = evaluate(&out.model, &out.store, val_set, vocab)?;
            let counting_relational = counting_relational_accuracy(val_set, &eval.scores);
            Ok(RunScores { report: eval.report, counting_relational })
        })
        .map_err(|e| e.to_string());
    AblationRun { variant, seed, params, outcome }
}

/// Train every variant under every seed and aggregate. Rows keep the
/// requested variant order; failures are counted per row and recorded
/// verbatim in `runs`.
pub fn run_ablation(
    model_cfg: &ModelConfig,
    ablation: &AblationConfig,
    train_set: &[VQASample],
    val_set: &[VQASample],
    vocab: &Vocab,
) -> Result<AblationTable> {
    ablation.validate()?;
    if val_set.is_empty() {
        return Err(Error::degenerate("run_ablation", "empty validation set"));
    }
    let pairs: Vec<(Variant, u64)> = ablation
        .variants
        .iter()
        .flat_map(|&v| ablation.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let job = |&(variant, seed): &(Variant, u64)| {
        run_one(model_cfg, ablation, train_set, val_set, vocab, variant, seed)
    };
    let runs: Vec<AblationRun> = if ablation.jobs > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(ablation.jobs)
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?
            .install(|| pairs.par_iter().map(job).collect())
    } else {
        pairs.iter().map(job).collect()
    };

    let category = |report: &EvalReport, c: Category| {
        report.category(c).map(|s| s.accuracy).unwrap_or(0.0)
    };
    let rows = ablation
        .variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == variant).collect();
            let ok: Vec<&RunScores> =
                mine.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let col = |f: &dyn Fn(&RunScores) -> f64| {
                Stat::over(&ok.iter().map(|s| f(s)).collect::<Vec<f64>>())
            };
            VariantRow {
                variant,
                params: mine.first().map(|r| r.params).unwrap_or(0),
                completed: ok.len(),
                failed: mine.len() - ok.len(),
                overall: col(&|s| s.report.overall),
                yesno: col(&|s| category(&s.report, Category::YesNo)),
                number: col(&|s| category(&s.report, Category::Number)),
                other: col(&|s| category(&s.report, Category::Other)),
                counting_relational: col(&|s| s.counting_relational.unwrap_or(0.0)),
            }
        })
        .collect();

    Ok(AblationTable { rows, runs })
}
