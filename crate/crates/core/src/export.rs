//! Attention visualization files: per-glimpse grayscale grid images for the
//! visual maps (plain-text portable graymaps), token-weight listings for
//! the textual maps, and the prediction with its consensus score.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::AttentionMap;
use crate::data::{VQASample, Vocab};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metric::vqa_accuracy;
use crate::model::{predict_answer, Model};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::tensor::Graph;

const PGM_MAX: u32 = 255;

/// Write one glimpse as an ASCII graymap. Pixels are weights scaled so the
/// largest weight is white; the original scale is kept in a `# max`
/// comment so readers can undo the normalization.
pub fn write_pgm(path: &Path, width: usize, height: usize, weights: &[f64]) -> Result<()> {
    if weights.len() != width * height {
        return Err(Error::dim(
            "write_pgm",
            format!("{} weights for {width}x{height} image", weights.len()),
        ));
    }
    if let Some(bad) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::contract("write_pgm", format!("weight {bad} is not a probability")));
    }
    let max = weights.iter().cloned().fold(0.0, f64::max);
    let mut text = String::new();
    let _ = writeln!(text, "P2");
    let _ = writeln!(text, "# max {max:e}");
    let _ = writeln!(text, "{width} {height}");
    let _ = writeln!(text, "{PGM_MAX}");
    for row in weights.chunks(width) {
        let pixels: Vec<String> = row
            .iter()
            .map(|w| {
                let p = if max > 0.0 { (w / max * PGM_MAX as f64).round() as u32 } else { 0 };
                p.min(PGM_MAX).to_string()
            })
            .collect();
        let _ = writeln!(text, "{}", pixels.join(" "));
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read an ASCII graymap written by [`write_pgm`] back into weights:
/// (width, height, max, weights). Quantization bounds the error per value
/// at max/(2*255).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, f64, Vec<f64>)> {
    let parse = |line: usize, detail: String| Error::parse(path.display().to_string(), line, detail);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut max: Option<f64> = None;
    let mut fields: Vec<(usize, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("max ") {
                max = Some(v.trim().parse().map_err(|_| parse(i + 1, format!("bad max '{v}'")))?);
            }
            continue;
        }
        for field in line.split_whitespace() {
            fields.push((i + 1, field.to_string()));
        }
    }
    if fields.first().map(|(_, f)| f.as_str()) != Some("P2") {
        return Err(parse(1, "not a plain graymap (missing P2)".to_string()));
    }
    let max = max.ok_or_else(|| parse(0, "missing '# max' comment".to_string()))?;
    let number = |idx: usize, what: &str| -> Result<u32> {
        let (line, field) = fields
            .get(idx)
            .ok_or_else(|| parse(0, format!("truncated graymap: missing {what}")))?;
        field.parse().map_err(|_| parse(*line, format!("bad {what} '{field}'")))
    };
    let width = number(1, "width")? as usize;
    let height = number(2, "height")? as usize;
    let depth = number(3, "depth")?;
    if depth != PGM_MAX {
        return Err(parse(0, format!("unsupported depth {depth}")));
    }
    let mut weights = Vec::with_capacity(width * height);
    for k in 0..width * height {
        let p = number(4 + k, "pixel")?;
        weights.push(p as f64 / PGM_MAX as f64 * max);
    }
    if fields.len() > 4 + width * height {
        return Err(parse(0, "trailing pixels beyond width*height".to_string()));
    }
    Ok((width, height, max, weights))
}

/// Everything one export run produced.
#[derive(Debug, Clone)]
pub struct ExportSummary {
    pub predicted: String,
    pub score: f64,
    pub files: Vec<PathBuf>,
}

fn write_token_weights(
    path: &Path,
    map: &AttentionMap,
    glimpse: usize,
    tokens: &[String],
) -> Result<()> {
    let mut text = String::new();
    for (pos, token) in tokens.iter().enumerate() {
        let _ = writeln!(text, "{token}\t{:e}", map.weight(glimpse, pos));
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Run one sample through a model in eval mode and write, per glimpse, the
/// visual map as `vis_glimpse_<i>.pgm` (a √K x √K grid) and, for dual
/// models, the textual map as `txt_glimpse_<i>.txt`; plus `answer.txt`
/// with the question, prediction, and consensus score.
pub fn export_attention(
    dir: &Path,
    model: &Model,
    store: &ParamStore,
    sample: &VQASample,
    vocab: &Vocab,
) -> Result<ExportSummary> {
    let k = model.cfg.regions;
    let grid = (k as f64).sqrt().round() as usize;
    if grid * grid != k {
        return Err(Error::config(format!("{k} regions do not form a square grid")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let feats = g.constant(sample.feature_tensor(k, model.cfg.region_feat)?);
    let mut rng = stream(store.seed(), "export");
    let out = model.forward(&mut g, &b, &sample.tokens, feats, Mode::Eval, &mut rng)?;
    let logits = g.data(out.logits).to_vec();
    let answer_id = predict_answer(&logits)?;
    let predicted = vocab
        .answer(answer_id)
        .ok_or_else(|| {
            Error::contract("export", format!("predicted id {answer_id} has no answer string"))
        })?
        .to_string();
    let score = vqa_accuracy(&predicted, &sample.annotations)?;

    let mut files = Vec::new();
    for glimpse in 0..out.visual.glimpses {
        let path = dir.join(format!("vis_glimpse_{glimpse}.pgm"));
        write_pgm(&path, grid, grid, out.visual.glimpse_row(glimpse))?;
        files.push(path);
    }
    if let Some(txt) = &out.textual {
        let tokens: Vec<String> = sample
            .tokens
            .iter()
            .map(|&t| vocab.token(t).unwrap_or("<unk>").to_string())
            .collect();
        for glimpse in 0..txt.glimpses {
            let path = dir.join(format!("txt_glimpse_{glimpse}.txt"));
            write_token_weights(&path, txt, glimpse, &tokens)?;
            files.push(path);
        }
    }

    let answer_path = dir.join("answer.txt");
    let mut text = String::new();
    let _ = writeln!(text, "question\t{}", sample.question);
    let _ = writeln!(text, "predicted\t{predicted}");
    let _ = writeln!(text, "score\t{score}");
    fs::write(&answer_path, text).map_err(|e| Error::io(answer_path.display().to_string(), e))?;
    files.push(answer_path);

    Ok(ExportSummary {
        predicted,
        score,
        files,
    })
}
