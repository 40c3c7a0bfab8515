//! Dataset files on disk: samples as JSON Lines, vocabularies as a small
//! tab-separated sidecar with section headers. Both formats round-trip
//! exactly and report the offending line on parse failure.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::{VQASample, Vocab};
use crate::error::{Error, Result};

/// Write one sample per line as JSON.
pub fn write_dataset(path: &Path, samples: &[VQASample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for sample in samples {
        let line = serde_json::to_string(sample)
            .map_err(|e| Error::contract("write_dataset", e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a JSON Lines dataset; blank lines are skipped, anything else that
/// fails to parse names its line number.
pub fn read_dataset(path: &Path) -> Result<Vec<VQASample>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: VQASample =
            serde_json::from_str(&line).map_err(|e| Error::parse(path.display().to_string(), i + 1, e.to_string()))?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Write a vocabulary sidecar:
///
/// ```text
/// # meta
/// grid<TAB>4
/// feat_dim<TAB>20
/// # tokens
/// 0<TAB><pad>
/// ...
/// # answers
/// 0<TAB>yes
/// ...
/// ```
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut put = |s: String| writeln!(w, "{s}").map_err(|e| Error::io(path.display().to_string(), e));
    put("# meta".to_string())?;
    put(format!("grid\t{}", vocab.grid))?;
    put(format!("feat_dim\t{}", vocab.feat_dim))?;
    put("# tokens".to_string())?;
    for (i, t) in vocab.tokens().iter().enumerate() {
        put(format!("{i}\t{t}"))?;
    }
    put("# answers".to_string())?;
    for (i, a) in vocab.answers().iter().enumerate() {
        put(format!("{i}\t{a}"))?;
    }
    drop(put);
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a vocabulary sidecar written by [`write_vocab`]. Entries must be
/// dense and in order; violations name their line.
pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut grid = None;
    let mut feat_dim = None;
    let mut tokens = Vec::new();
    let mut answers = Vec::new();
    let mut section = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix("# ") {
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path.display().to_string(), lineno, "expected <key>\\t<value>".to_string()))?;
        match section.as_str() {
            "meta" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| Error::parse(path.display().to_string(), lineno, format!("bad meta value '{value}'")))?;
                match key {
                    "grid" => grid = Some(n),
                    "feat_dim" => feat_dim = Some(n),
                    other => {
                        return Err(Error::parse(path.display().to_string(), lineno, format!("unknown meta key '{other}'")))
                    }
                }
            }
            "tokens" | "answers" => {
                let list = if section == "tokens" { &mut tokens } else { &mut answers };
                let id: usize = key
                    .parse()
                    .map_err(|_| Error::parse(path.display().to_string(), lineno, format!("bad id '{key}'")))?;
                if id != list.len() {
                    return Err(Error::parse(
                        path.display().to_string(),
                        lineno,
                        format!("id {id} out of order, expected {}", list.len()),
                    ));
                }
                list.push(value.to_string());
            }
            other => {
                return Err(Error::parse(path.display().to_string(), lineno, format!("unknown section '{other}'")));
            }
        }
    }
    let grid = grid.ok_or_else(|| Error::parse(path.display().to_string(), 0, "missing meta key 'grid'".to_string()))?;
    let feat_dim =
        feat_dim.ok_or_else(|| Error::parse(path.display().to_string(), 0, "missing meta key 'feat_dim'".to_string()))?;
    Vocab::from_lists(grid, feat_dim, tokens, answers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, DataConfig, Split};

    #[test]
    fn dataset_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let cfg = DataConfig { seed: 11, ..DataConfig::default() };
        let samples = generate_split(&cfg, 40, Split::Train).unwrap();
        write_dataset(&path, &samples).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(samples, back);
        // Feature floats survive bit for bit.
        for (a, b) in samples[0].features.iter().zip(&back[0].features) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn empty_file_reads_as_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn corrupt_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let cfg = DataConfig::default();
        let samples = generate_split(&cfg, 2, Split::Train).unwrap();
        let good = serde_json::to_string(&samples[0]).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");
    }

    #[test]
    fn missing_file_reports_its_path() {
        let err = read_dataset(Path::new("/nonexistent/никуда.jsonl")).unwrap_err();
        assert!(err.to_string().contains("никуда"), "got: {err}");
    }

    #[test]
    fn vocab_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let vocab = Vocab::for_grid(4, 20).unwrap();
        write_vocab(&path, &vocab).unwrap();
        let back = read_vocab(&path).unwrap();
        assert_eq!(vocab, back);
    }

    #[test]
    fn vocab_reader_rejects_gaps_and_junk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        std::fs::write(
            &path,
            "# meta\ngrid\t4\nfeat_dim\t20\n# tokens\n0\t<pad>\n2\t<unk>\n",
        )
        .unwrap();
        let err = read_vocab(&path).unwrap_err();
        assert!(err.to_string().contains("line 6"), "got: {err}");

        std::fs::write(&path, "# meta\ngrid\t4\n# what\n0\tx\n").unwrap();
        let err = read_vocab(&path).unwrap_err();
        assert!(err.to_string().contains("unknown section"), "got: {err}");
    }
}
