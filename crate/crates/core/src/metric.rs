//! Consensus accuracy and evaluation reports. A prediction is scored
//! against all ten annotations: agreeing with three or more annotators
//! earns full credit, fewer earn thirds.

use std::collections::HashMap;

use serde::Serialize;

use crate::data::{Category, ANNOTATIONS};
use crate::error::{Error, Result};

/// Consensus score of one answer: min(matches / 3, 1).
pub fn vqa_accuracy(answer: &str, annotations: &[String]) -> Result<f64> {
    if annotations.len() != ANNOTATIONS {
        return Err(Error::contract(
            "vqa_accuracy",
            format!("need exactly {ANNOTATIONS} annotations, got {}", annotations.len()),
        ));
    }
    let matches = annotations.iter().filter(|a| a.as_str() == answer).count();
    Ok((matches as f64 / 3.0).min(1.0))
}

/// The annotation string most annotators gave; ties break to the
/// lexicographically smallest so the result is deterministic.
pub fn majority_annotation(annotations: &[String]) -> Result<&str> {
    if annotations.is_empty() {
        return Err(Error::contract("majority_annotation", "no annotations"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for a in annotations {
        *counts.entry(a.as_str()).or_insert(0) += 1;
    }
    Ok(counts
        .into_iter()
        .max_by(|(sa, na), (sb, nb)| na.cmp(nb).then(sb.cmp(sa)))
        .unwrap()
        .0)
}

/// Accuracy of one question category inside a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CategoryScore {
    pub category: Category,
    pub samples: usize,
    pub accuracy: f64,
}

/// Aggregated evaluation of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub samples: usize,
    /// Mean per-sample consensus score.
    pub overall: f64,
    /// One entry per category, in `Category::ALL` order; categories the
    /// split never exercised report zero samples and zero accuracy.
    pub categories: Vec<CategoryScore>,
}

impl EvalReport {
    pub fn category(&self, c: Category) -> Option<&CategoryScore> {
        self.categories.iter().find(|s| s.category == c)
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "variant {} seed {}: overall {:.4} over {} samples",
            self.variant, self.seed, self.overall, self.samples
        )?;
        for s in &self.categories {
            write!(f, "\n  {:<8} {:.4} ({})", s.category.name(), s.accuracy, s.samples)?;
        }
        Ok(())
    }
}

/// Streaming mean-accuracy aggregator behind [`EvalReport`].
#[derive(Debug, Clone, Default)]
pub struct ScoreAccumulator {
    sum: f64,
    count: usize,
    per_category: HashMap<Category, (f64, usize)>,
}

impl ScoreAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, category: Category, score: f64) {
        self.sum += score;
        self.count += 1;
        let slot = self.per_category.entry(category).or_insert((0.0, 0));
        slot.0 += score;
        slot.1 += 1;
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn report(&self, variant: &str, seed: u64) -> EvalReport {
        let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
        EvalReport {
            variant: variant.to_string(),
            seed,
            samples: self.count,
            overall: mean(self.sum, self.count),
            categories: Category::ALL
                .iter()
                .map(|&category| {
                    let (sum, n) = self.per_category.get(&category).copied().unwrap_or((0.0, 0));
                    CategoryScore {
                        category,
                        samples: n,
                        accuracy: mean(sum, n),
                    }
                })
                .collect(),
        }
    }
}
