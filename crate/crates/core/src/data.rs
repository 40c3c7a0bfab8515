//! Deterministic grid-world question answering data. Scenes are small
//! grids of colored shapes; questions are templated to exercise counting,
//! existence, attribute lookup, and relational reasoning; every label is
//! computed exactly from the scene and then expanded into ten annotations
//! with an optional disagreement rate, mimicking crowd-sourced labels.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PAD_TOKEN;
use crate::rng::stream;
use crate::tensor::Tensor;

/// Annotations attached to every question.
pub const ANNOTATIONS: usize = 10;
/// Clean feature dims per region before padding: one-hot shape (3),
/// one-hot color (4), normalized center (2), occupancy bit (1).
pub const CLEAN_DIMS: usize = 10;

// ── Scenes ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn plural(&self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

/// A square grid of cells, each empty or holding one colored shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub grid: usize,
    /// Row-major cells, length grid^2.
    pub cells: Vec<Option<(Shape, Color)>>,
    pub seed: u64,
}

impl Scene {
    pub fn regions(&self) -> usize {
        self.grid * self.grid
    }

    pub fn object_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Objects matching an optional color and shape filter.
    pub fn count(&self, color: Option<Color>, shape: Option<Shape>) -> usize {
        self.cells
            .iter()
            .flatten()
            .filter(|(s, c)| color.map_or(true, |cf| *c == cf) && shape.map_or(true, |sf| *s == sf))
            .count()
    }

    /// Cell index of the single object matching the filter, if exactly one.
    pub fn find_unique(&self, color: Option<Color>, shape: Option<Shape>) -> Option<usize> {
        let mut found = None;
        for (i, cell) in self.cells.iter().enumerate() {
            if let Some((s, c)) = cell {
                if color.map_or(true, |cf| *c == cf) && shape.map_or(true, |sf| *s == sf) {
                    if found.is_some() {
                        return None;
                    }
                    found = Some(i);
                }
            }
        }
        found
    }
}

/// Populate a scene from its seed: each cell holds an object with the given
/// probability, and one object is forced into an otherwise empty grid.
pub fn generate_scene(seed: u64, grid: usize, occupancy: f64) -> Result<Scene> {
    if grid < 2 {
        return Err(Error::config(format!("grid side must be at least 2, got {grid}")));
    }
    if !(0.0..=1.0).contains(&occupancy) {
        return Err(Error::config(format!(
            "occupancy must lie in [0, 1], got {occupancy}"
        )));
    }
    let mut rng = stream(seed, "scene");
    let k = grid * grid;
    let mut cells: Vec<Option<(Shape, Color)>> = (0..k)
        .map(|_| {
            // Draw all three values unconditionally so cell contents stay
            // independent of their neighbors' occupancy.
            let occupied = rng.gen::<f64>() < occupancy;
            let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
            let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
            occupied.then_some((shape, color))
        })
        .collect();
    if cells.iter().all(|c| c.is_none()) {
        let at = rng.gen_range(0..k);
        let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
        let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
        cells[at] = Some((shape, color));
    }
    Ok(Scene { grid, cells, seed })
}

/// Per-region features: the clean encoding in the first `CLEAN_DIMS`
/// entries, zero padding up to `feat_dim`, and Gaussian noise of the given
/// width over everything. Empty cells keep their center coordinates so
/// position stays observable.
pub fn region_features(scene: &Scene, sigma: f64, feat_dim: usize, seed: u64) -> Result<Tensor> {
    if feat_dim < CLEAN_DIMS {
        return Err(Error::config(format!(
            "feature width {feat_dim} cannot hold the {CLEAN_DIMS} clean dims"
        )));
    }
    if sigma < 0.0 {
        return Err(Error::config(format!("noise width must be nonnegative, got {sigma}")));
    }
    let k = scene.regions();
    let mut data = vec![0.0; k * feat_dim];
    for (i, cell) in scene.cells.iter().enumerate() {
        let row = &mut data[i * feat_dim..(i + 1) * feat_dim];
        if let Some((shape, color)) = cell {
            row[Shape::ALL.iter().position(|s| s == shape).unwrap()] = 1.0;
            row[3 + Color::ALL.iter().position(|c| c == color).unwrap()] = 1.0;
            row[9] = 1.0;
        }
        let (r, c) = (i / scene.grid, i % scene.grid);
        row[7] = (c as f64 + 0.5) / scene.grid as f64;
        row[8] = (r as f64 + 0.5) / scene.grid as f64;
    }
    if sigma > 0.0 {
        let mut rng = stream(seed, "features");
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    Tensor::matrix(k, feat_dim, data)
}

/// Read (shape, color) back out of one clean feature row, or None for an
/// unoccupied cell. Argmax decoding, so it also tolerates small noise.
pub fn decode_cell(row: &[f64]) -> Option<(Shape, Color)> {
    if row.len() < CLEAN_DIMS || row[9] <= 0.5 {
        return None;
    }
    let argmax = |slice: &[f64]| {
        slice
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };
    Some((Shape::ALL[argmax(&row[0..3])], Color::ALL[argmax(&row[3..7])]))
}

/// Rebuild a scene from clean features (the answerability oracle).
pub fn decode_scene(features: &Tensor, grid: usize) -> Result<Scene> {
    let k = grid * grid;
    if features.rank() != 2 || features.shape()[0] != k {
        return Err(Error::dim(
            "decode_scene",
            format!("features {:?} vs {k} cells", features.shape()),
        ));
    }
    let width = features.shape()[1];
    let cells = (0..k)
        .map(|i| decode_cell(&features.data()[i * width..(i + 1) * width]))
        .collect();
    Ok(Scene { grid, cells, seed: 0 })
}

// ── Questions ───────────────────────────────────────────────────────────────

/// Coarse answer-type buckets used for reporting and balancing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    YesNo,
    Number,
    Other,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::YesNo, Category::Number, Category::Other];

    pub fn name(&self) -> &'static str {
        match self {
            Category::YesNo => "yesno",
            Category::Number => "number",
            Category::Other => "other",
        }
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown category '{s}'")))
    }
}

/// One askable question with its exact answer and the same-category wrong
/// answers a disagreeing annotator could give.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub question: String,
    pub category: Category,
    pub truth: String,
    pub plausible: Vec<String>,
}

fn number_answers(k: usize, truth: usize) -> Vec<String> {
    (0..=k).filter(|n| *n != truth).map(|n| n.to_string()).collect()
}

fn combo_name(shape: Shape, color: Color) -> String {
    format!("{} {}", color.name(), shape.name())
}

/// Every question the templates can ask about a scene. Templates whose
/// precondition fails (no unique referent, no in-grid neighbor) are
/// skipped, never asked with a broken premise.
pub fn generate_candidates(scene: &Scene) -> Vec<Candidate> {
    let k = scene.regions();
    let mut out = Vec::new();
    let count_q = |question: String, n: usize| Candidate {
        question,
        category: Category::Number,
        truth: n.to_string(),
        plausible: number_answers(k, n),
    };

    out.push(count_q("how many objects".to_string(), scene.count(None, None)));
    for color in Color::ALL {
        out.push(count_q(
            format!("how many {} objects", color.name()),
            scene.count(Some(color), None),
        ));
    }
    for shape in Shape::ALL {
        out.push(count_q(
            format!("how many {}", shape.plural()),
            scene.count(None, Some(shape)),
        ));
    }

    for shape in Shape::ALL {
        for color in Color::ALL {
            let present = scene.count(Some(color), Some(shape)) > 0;
            let truth = if present { "yes" } else { "no" };
            let other = if present { "no" } else { "yes" };
            out.push(Candidate {
                question: format!("is there a {} {}", color.name(), shape.name()),
                category: Category::YesNo,
                truth: truth.to_string(),
                plausible: vec![other.to_string()],
            });
        }
    }

    for shape in Shape::ALL {
        if let Some(at) = scene.find_unique(None, Some(shape)) {
            let (_, color) = scene.cells[at].unwrap();
            out.push(Candidate {
                question: format!("what color is the {}", shape.name()),
                category: Category::Other,
                truth: color.name().to_string(),
                plausible: Color::ALL
                    .iter()
                    .filter(|c| **c != color)
                    .map(|c| c.name().to_string())
                    .collect(),
            });
        }
    }

    let relational_answers: Vec<String> = Shape::ALL
        .iter()
        .flat_map(|s| Color::ALL.iter().map(|c| combo_name(*s, *c)))
        .chain(std::iter::once("nothing".to_string()))
        .collect();
    for shape in Shape::ALL {
        for color in Color::ALL {
            let Some(at) = scene.find_unique(Some(color), Some(shape)) else {
                continue;
            };
            let (row, col) = (at / scene.grid, at % scene.grid);
            let left = (col > 0).then(|| at - 1);
            let up = (row > 0).then(|| at - scene.grid);
            let neighbors = [("left of", left), ("above", up)];
            for (word, neighbor) in neighbors {
                let Some(n) = neighbor else { continue };
                let truth = match scene.cells[n] {
                    Some((ns, nc)) => combo_name(ns, nc),
                    None => "nothing".to_string(),
                };
                out.push(Candidate {
                    question: format!("what is {word} the {} {}", color.name(), shape.name()),
                    category: Category::Other,
                    truth: truth.clone(),
                    plausible: relational_answers
                        .iter()
                        .filter(|a| **a != truth)
                        .cloned()
                        .collect(),
                });
            }
        }
    }
    out
}

/// Expand an exact answer into `ANNOTATIONS` labels, each independently
/// replaced by a plausible wrong answer with probability `corruption`.
pub fn annotate(
    truth: &str,
    plausible: &[String],
    corruption: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    (0..ANNOTATIONS)
        .map(|_| {
            if !plausible.is_empty() && rng.gen::<f64>() < corruption {
                plausible[rng.gen_range(0..plausible.len())].clone()
            } else {
                truth.to_string()
            }
        })
        .collect()
}

// ── Vocabulary ──────────────────────────────────────────────────────────────

/// Fixed token and answer inventories for a grid size. Ids are dense,
/// bijective, and independent of any particular dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub grid: usize,
    pub feat_dim: usize,
    tokens: Vec<String>,
    token_ids: HashMap<String, usize>,
    answers: Vec<String>,
    answer_ids: HashMap<String, usize>,
}

pub const UNK_TOKEN: usize = 1;

const FIXED_TOKENS: [&str; 24] = [
    "<pad>", "<unk>", "how", "many", "objects", "is", "there", "a", "what", "color", "the",
    "left", "of", "above", "circle", "square", "triangle", "circles", "squares", "triangles",
    "red", "green", "blue", "yellow",
];

impl Vocab {
    pub fn for_grid(grid: usize, feat_dim: usize) -> Result<Vocab> {
        if grid < 2 {
            return Err(Error::config(format!("grid side must be at least 2, got {grid}")));
        }
        let tokens: Vec<String> = FIXED_TOKENS.iter().map(|t| t.to_string()).collect();
        let mut answers: Vec<String> = vec!["yes".to_string(), "no".to_string()];
        answers.extend((0..=grid * grid).map(|n| n.to_string()));
        answers.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        for shape in Shape::ALL {
            for color in Color::ALL {
                answers.push(combo_name(shape, color));
            }
        }
        answers.push("nothing".to_string());
        Vocab::from_lists(grid, feat_dim, tokens, answers)
    }

    /// Assemble from explicit lists (the file reader's entry point).
    pub fn from_lists(
        grid: usize,
        feat_dim: usize,
        tokens: Vec<String>,
        answers: Vec<String>,
    ) -> Result<Vocab> {
        let index = |items: &[String], what: &str| -> Result<HashMap<String, usize>> {
            let mut map = HashMap::new();
            for (i, item) in items.iter().enumerate() {
                if map.insert(item.clone(), i).is_some() {
                    return Err(Error::config(format!("duplicate {what} entry '{item}'")));
                }
            }
            Ok(map)
        };
        if tokens.len() <= UNK_TOKEN || tokens[PAD_TOKEN] != "<pad>" || tokens[UNK_TOKEN] != "<unk>"
        {
            return Err(Error::config(
                "token list must start with <pad>, <unk>".to_string(),
            ));
        }
        let token_ids = index(&tokens, "token")?;
        let answer_ids = index(&answers, "answer")?;
        Ok(Vocab {
            grid,
            feat_dim,
            tokens,
            token_ids,
            answers,
            answer_ids,
        })
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn answer_count(&self) -> usize {
        self.answers.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn answer(&self, id: usize) -> Option<&str> {
        self.answers.get(id).map(|s| s.as_str())
    }

    /// Id for a word; unknown words map to the unk id.
    pub fn token_id(&self, word: &str) -> usize {
        self.token_ids.get(word).copied().unwrap_or(UNK_TOKEN)
    }

    pub fn answer_id(&self, answer: &str) -> Option<usize> {
        self.answer_ids.get(answer).copied()
    }

    /// Whitespace tokenization into ids, unknowns included.
    pub fn tokenize(&self, question: &str) -> Vec<usize> {
        question.split_whitespace().map(|w| self.token_id(w)).collect()
    }
}

// ── Samples and dataset generation ──────────────────────────────────────────

/// One question over one scene, ready for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VQASample {
    pub id: u64,
    pub question: String,
    pub tokens: Vec<usize>,
    pub category: Category,
    /// Row-major K x feat_dim region features.
    pub features: Vec<f64>,
    pub annotations: Vec<String>,
    pub scene_seed: u64,
}

impl VQASample {
    pub fn validate(&self, regions: usize, feat_dim: usize) -> Result<()> {
        if self.annotations.len() != ANNOTATIONS {
            return Err(Error::contract(
                "sample",
                format!(
                    "sample {} carries {} annotations, need {ANNOTATIONS}",
                    self.id,
                    self.annotations.len()
                ),
            ));
        }
        if self.features.len() != regions * feat_dim {
            return Err(Error::dim(
                "sample",
                format!(
                    "sample {} features {} vs {regions}x{feat_dim}",
                    self.id,
                    self.features.len()
                ),
            ));
        }
        if self.tokens.is_empty() {
            return Err(Error::degenerate("sample", format!("sample {} has no tokens", self.id)));
        }
        Ok(())
    }

    pub fn feature_tensor(&self, regions: usize, feat_dim: usize) -> Result<Tensor> {
        self.validate(regions, feat_dim)?;
        Tensor::matrix(regions, feat_dim, self.features.clone())
    }
}

/// Generator settings; `Default` is the desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub grid: usize,
    pub feat_dim: usize,
    /// Gaussian feature noise width.
    pub noise: f64,
    /// Per-cell object probability.
    pub occupancy: f64,
    /// Per-annotation disagreement probability.
    pub corruption: f64,
    pub questions_per_scene: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            grid: 4,
            feat_dim: 20,
            noise: 0.05,
            occupancy: 0.25,
            corruption: 0.1,
            questions_per_scene: 3,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn regions(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::config(format!("grid side must be at least 2, got {}", self.grid)));
        }
        if self.feat_dim < CLEAN_DIMS {
            return Err(Error::config(format!(
                "feature width {} cannot hold the {CLEAN_DIMS} clean dims",
                self.feat_dim
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::config("noise width must be nonnegative".to_string()));
        }
        if !(0.0..=1.0).contains(&self.occupancy) {
            return Err(Error::config("occupancy must lie in [0, 1]".to_string()));
        }
        if !(0.0..1.0).contains(&self.corruption) {
            return Err(Error::config("corruption must lie in [0, 1)".to_string()));
        }
        if self.questions_per_scene == 0 {
            return Err(Error::config("questions per scene must be positive".to_string()));
        }
        Ok(())
    }
}

/// Which half of the scene-seed sequence a dataset draws from. Train takes
/// even scene indices, validation odd ones, so no scene ever leaks across.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn first_index(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

/// Category mix the balancer steers toward.
const CATEGORY_TARGETS: [(Category, f64); 3] = [
    (Category::YesNo, 0.30),
    (Category::Number, 0.40),
    (Category::Other, 0.30),
];

/// Generate exactly `count` samples for one split. Scene i gets seed
/// `cfg.seed + i`; per-slot question choice is deficit-driven toward the
/// category targets, falling back to whatever the scene offers.
pub fn generate_split(cfg: &DataConfig, count: usize, split: Split) -> Result<Vec<VQASample>> {
    cfg.validate()?;
    let vocab = Vocab::for_grid(cfg.grid, cfg.feat_dim)?;
    let mut samples = Vec::with_capacity(count);
    let mut emitted: HashMap<Category, usize> = HashMap::new();
    let mut scene_index = split.first_index();
    while samples.len() < count {
        let scene_seed = cfg.seed + scene_index;
        scene_index += 2;
        let scene = generate_scene(scene_seed, cfg.grid, cfg.occupancy)?;
        let features = region_features(&scene, cfg.noise, cfg.feat_dim, scene_seed)?;
        let mut candidates = generate_candidates(&scene);
        let mut rng = stream(scene_seed, "questions");
        for _ in 0..cfg.questions_per_scene {
            if samples.len() == count || candidates.is_empty() {
                break;
            }
            let total = (samples.len() + 1) as f64;
            let pick_category = CATEGORY_TARGETS
                .iter()
                .filter(|(c, _)| candidates.iter().any(|q| q.category == *c))
                .max_by(|(ca, ta), (cb, tb)| {
                    let da = ta * total - *emitted.get(ca).unwrap_or(&0) as f64;
                    let db = tb * total - *emitted.get(cb).unwrap_or(&0) as f64;
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(c, _)| *c)
                .expect("candidate list is non-empty");
            let in_category: Vec<usize> = candidates
                .iter()
                .enumerate()
                .filter(|(_, q)| q.category == pick_category)
                .map(|(i, _)| i)
                .collect();
            let chosen = candidates.swap_remove(in_category[rng.gen_range(0..in_category.len())]);
            *emitted.entry(chosen.category).or_insert(0) += 1;
            let annotations = annotate(&chosen.truth, &chosen.plausible, cfg.corruption, &mut rng);
            samples.push(VQASample {
                id: samples.len() as u64,
                tokens: vocab.tokenize(&chosen.question),
                question: chosen.question,
                category: chosen.category,
                features: features.data().to_vec(),
                annotations,
                scene_seed,
            });
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_rebuilds_the_scene() {
        let a = generate_scene(7, 4, 0.35).unwrap();
        let b = generate_scene(7, 4, 0.35).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(8, 4, 0.35).unwrap();
        assert_ne!(a.cells, c.cells);
    }

    #[test]
    fn scenes_hold_one_to_k_objects() {
        for seed in 0..200 {
            let scene = generate_scene(seed, 4, 0.1).unwrap();
            let n = scene.object_count();
            assert!((1..=16).contains(&n), "seed {seed}: {n} objects");
        }
    }

    #[test]
    fn tiny_grid_is_rejected() {
        assert!(generate_scene(1, 1, 0.5).is_err());
    }

    #[test]
    fn occupancy_rate_is_honored() {
        let rate = 0.35;
        let trials = 10_000;
        let mut per_cell = vec![0usize; 16];
        for seed in 0..trials {
            let scene = generate_scene(seed, 4, rate).unwrap();
            for (i, cell) in scene.cells.iter().enumerate() {
                if cell.is_some() {
                    per_cell[i] += 1;
                }
            }
        }
        for (i, &hits) in per_cell.iter().enumerate() {
            let p = hits as f64 / trials as f64;
            assert!((p - rate).abs() < 0.02, "cell {i}: empirical rate {p}");
        }
    }

    #[test]
    fn clean_features_decode_every_combo() {
        let mut cells = vec![None; 16];
        for (i, (shape, color)) in Shape::ALL
            .iter()
            .flat_map(|s| Color::ALL.iter().map(move |c| (*s, *c)))
            .enumerate()
        {
            cells[i] = Some((shape, color));
        }
        let scene = Scene { grid: 4, cells: cells.clone(), seed: 0 };
        let f = region_features(&scene, 0.0, 20, 0).unwrap();
        for (i, expect) in cells.iter().enumerate() {
            let row = &f.data()[i * 20..(i + 1) * 20];
            assert_eq!(decode_cell(row), *expect, "cell {i}");
        }
    }

    #[test]
    fn empty_cells_carry_zero_onehots_and_position() {
        let scene = Scene {
            grid: 4,
            cells: {
                let mut c = vec![None; 16];
                c[3] = Some((Shape::Circle, Color::Red));
                c
            },
            seed: 0,
        };
        let f = region_features(&scene, 0.0, 20, 0).unwrap();
        let row = &f.data()[0..20];
        assert!(row[0..7].iter().all(|&v| v == 0.0));
        assert_eq!(row[9], 0.0);
        assert_eq!(row[7], 0.125);
        assert_eq!(row[8], 0.125);
        assert!(row[10..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_leaves_the_clean_part_recoverable() {
        let scene = generate_scene(3, 4, 0.35).unwrap();
        let a = region_features(&scene, 0.05, 20, 100).unwrap();
        let b = region_features(&scene, 0.05, 20, 101).unwrap();
        let clean = region_features(&scene, 0.0, 20, 102).unwrap();
        for i in 0..a.len() {
            let da = a.data()[i] - clean.data()[i];
            let db = b.data()[i] - clean.data()[i];
            assert!(da.abs() < 0.5 && db.abs() < 0.5);
        }
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn counting_questions_tell_the_truth() {
        let mut cells = vec![None; 16];
        cells[0] = Some((Shape::Circle, Color::Red));
        cells[5] = Some((Shape::Circle, Color::Red));
        cells[9] = Some((Shape::Circle, Color::Red));
        cells[12] = Some((Shape::Square, Color::Blue));
        let scene = Scene { grid: 4, cells, seed: 0 };
        let candidates = generate_candidates(&scene);
        let find = |q: &str| candidates.iter().find(|c| c.question == q).unwrap();
        assert_eq!(find("how many circles").truth, "3");
        assert_eq!(find("how many objects").truth, "4");
        assert_eq!(find("how many red objects").truth, "3");
        assert_eq!(find("how many green objects").truth, "0");
        assert_eq!(find("is there a blue square").truth, "yes");
        assert_eq!(find("is there a blue triangle").truth, "no");
        assert_eq!(find("what color is the square").truth, "blue");
        assert!(!candidates.iter().any(|c| c.question == "what color is the circle"));
    }

    #[test]
    fn relational_answers_match_exhaustive_neighbor_scan() {
        for seed in 0..300u64 {
            let scene = generate_scene(seed, 4, 0.35).unwrap();
            for cand in generate_candidates(&scene) {
                let Some(rest) = cand.question.strip_prefix("what is ") else {
                    continue;
                };
                let (offset, rest) = if let Some(r) = rest.strip_prefix("left of the ") {
                    ((0i64, -1i64), r)
                } else if let Some(r) = rest.strip_prefix("above the ") {
                    ((-1, 0), r)
                } else {
                    continue;
                };
                let mut words = rest.split(' ');
                let color = words.next().unwrap();
                let shape = words.next().unwrap();
                // Exhaustive scan: find the unique referent, then look up
                // the neighbor cell directly.
                let matches: Vec<usize> = (0..16)
                    .filter(|&i| {
                        scene.cells[i].map_or(false, |(s, c)| {
                            s.name() == shape && c.name() == color
                        })
                    })
                    .collect();
                assert_eq!(matches.len(), 1, "referent not unique for {}", cand.question);
                let at = matches[0] as i64;
                let (row, col) = (at / 4 + offset.0, at % 4 + offset.1);
                assert!((0..4).contains(&row) && (0..4).contains(&col));
                let expect = match scene.cells[(row * 4 + col) as usize] {
                    Some((s, c)) => format!("{} {}", c.name(), s.name()),
                    None => "nothing".to_string(),
                };
                assert_eq!(cand.truth, expect, "{}", cand.question);
            }
        }
    }

    #[test]
    fn edge_referents_get_no_out_of_grid_question() {
        let mut cells = vec![None; 16];
        cells[0] = Some((Shape::Circle, Color::Red));
        let scene = Scene { grid: 4, cells, seed: 0 };
        let candidates = generate_candidates(&scene);
        assert!(!candidates
            .iter()
            .any(|c| c.question.starts_with("what is") && c.question.contains("red circle")));
    }

    #[test]
    fn annotations_follow_the_corruption_rate() {
        let plausible = vec!["no".to_string()];
        let mut rng = stream(1, "corrupt");
        let mut wrong = 0;
        let trials = 20_000;
        for _ in 0..trials {
            for a in annotate("yes", &plausible, 0.1, &mut rng) {
                if a == "no" {
                    wrong += 1;
                }
            }
        }
        let rate = wrong as f64 / (trials * ANNOTATIONS) as f64;
        assert!((rate - 0.1).abs() < 0.01, "empirical corruption {rate}");
    }

    #[test]
    fn zero_corruption_gives_unanimous_annotations() {
        let mut rng = stream(2, "corrupt");
        let got = annotate("3", &number_answers(16, 3), 0.0, &mut rng);
        assert_eq!(got, vec!["3".to_string(); ANNOTATIONS]);
    }

    #[test]
    fn corrupted_annotations_stay_in_category() {
        let plausible = number_answers(16, 5);
        let mut rng = stream(3, "corrupt");
        for _ in 0..200 {
            for a in annotate("5", &plausible, 0.5, &mut rng) {
                let n: usize = a.parse().unwrap();
                assert!(n <= 16);
            }
        }
    }

    #[test]
    fn vocabulary_is_bijective_and_reserved() {
        let v = Vocab::for_grid(4, 20).unwrap();
        assert_eq!(v.token(PAD_TOKEN), Some("<pad>"));
        assert_eq!(v.token(UNK_TOKEN), Some("<unk>"));
        assert_eq!(v.answer_count(), 36);
        for id in 0..v.token_count() {
            assert_eq!(v.token_id(v.token(id).unwrap()), id);
        }
        for id in 0..v.answer_count() {
            assert_eq!(v.answer_id(v.answer(id).unwrap()), Some(id));
        }
        assert_eq!(v.token_id("zebra"), UNK_TOKEN);
        assert_eq!(v.answer_id("zebra"), None);
    }

    #[test]
    fn every_template_tokenizes_without_unknowns() {
        let v = Vocab::for_grid(4, 20).unwrap();
        for seed in 0..50 {
            let scene = generate_scene(seed, 4, 0.35).unwrap();
            for cand in generate_candidates(&scene) {
                let ids = v.tokenize(&cand.question);
                assert!(!ids.is_empty());
                assert!(
                    ids.iter().all(|&t| t != PAD_TOKEN && t != UNK_TOKEN),
                    "question '{}' hit pad or unk",
                    cand.question
                );
                assert!(v.answer_id(&cand.truth).is_some(), "answer '{}'", cand.truth);
                for p in &cand.plausible {
                    assert!(v.answer_id(p).is_some(), "plausible '{p}'");
                }
            }
        }
    }

    #[test]
    fn split_generation_is_deterministic_and_disjoint() {
        let cfg = DataConfig::default();
        let a = generate_split(&cfg, 100, Split::Train).unwrap();
        let b = generate_split(&cfg, 100, Split::Train).unwrap();
        assert_eq!(a, b);
        let val = generate_split(&cfg, 100, Split::Val).unwrap();
        for s in &a {
            assert_eq!(s.scene_seed % 2, 0);
        }
        for s in &val {
            assert_eq!(s.scene_seed % 2, 1);
        }
        assert_eq!(a.len(), 100);
        assert_eq!(val.len(), 100);
    }

    #[test]
    fn samples_validate_against_their_config() {
        let cfg = DataConfig::default();
        let samples = generate_split(&cfg, 50, Split::Train).unwrap();
        for s in &samples {
            s.validate(cfg.regions(), cfg.feat_dim).unwrap();
            assert_eq!(s.annotations.len(), ANNOTATIONS);
            s.feature_tensor(cfg.regions(), cfg.feat_dim).unwrap();
        }
    }

    #[test]
    fn category_mix_stays_near_the_targets() {
        let cfg = DataConfig::default();
        let samples = generate_split(&cfg, 10_000, Split::Train).unwrap();
        let mut counts: HashMap<Category, usize> = HashMap::new();
        for s in &samples {
            *counts.entry(s.category).or_insert(0) += 1;
        }
        for (cat, target) in CATEGORY_TARGETS {
            let p = *counts.get(&cat).unwrap_or(&0) as f64 / samples.len() as f64;
            assert!(
                (p - target).abs() <= 0.02,
                "{cat}: {p} vs target {target}"
            );
        }
    }

    #[test]
    fn ground_truth_is_recoverable_from_clean_features() {
        // Noise-free, corruption-free data: decoding the features and
        // re-asking the question must reproduce the unanimous annotation.
        let cfg = DataConfig {
            noise: 0.0,
            corruption: 0.0,
            ..DataConfig::default()
        };
        let samples = generate_split(&cfg, 300, Split::Train).unwrap();
        for s in &samples {
            let f = s.feature_tensor(cfg.regions(), cfg.feat_dim).unwrap();
            let decoded = decode_scene(&f, cfg.grid).unwrap();
            let truth = generate_candidates(&decoded)
                .into_iter()
                .find(|c| c.question == s.question)
                .unwrap_or_else(|| panic!("decoded scene cannot ask '{}'", s.question))
                .truth;
            assert!(s.annotations.iter().all(|a| *a == truth), "{}", s.question);
        }
    }
}
