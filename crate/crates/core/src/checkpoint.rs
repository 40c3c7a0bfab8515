//! Checkpoint files: a text manifest (version, config echo, step counter,
//! tensor directory) followed by one raw block of little-endian f64 values.
//! Parameters, optimizer moments, and the step counter round-trip bitwise.
//! Training randomness is derived from (seed, step), so the manifest's seed
//! and step are the complete RNG state.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::adam::{Adam, Moments};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::train::TrainConfig;

const MAGIC: &str = "drau-checkpoint v1";
const DATA_MARKER: &[u8] = b"\n[data]\n";

/// A checkpoint pulled back into memory, with the model rebuilt from its
/// config echo so loaded parameters land on the exact same structure.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub train: TrainConfig,
    pub model_cfg: ModelConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: Adam,
    pub step: u64,
}

/// Write parameters, optimizer state, and both configs to one file.
pub fn save_checkpoint(
    path: &Path,
    train: &TrainConfig,
    model_cfg: &ModelConfig,
    store: &ParamStore,
    optimizer: &Adam,
) -> Result<()> {
    let io = |e| Error::io(path.display().to_string(), e);
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);

    // Directory rows: record id, comma-separated dims, offset in f64s.
    let mut rows: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for (name, tensor) in store.iter() {
        rows.push((format!("param:{name}"), tensor.shape().to_vec(), tensor.data()));
    }
    for (name, moments) in optimizer.moments() {
        rows.push((format!("m:{name}"), vec![moments.m.len()], &moments.m));
        rows.push((format!("v:{name}"), vec![moments.v.len()], &moments.v));
    }

    writeln!(w, "{MAGIC}").map_err(io)?;
    writeln!(w, "[config]").map_err(io)?;
    let train_json = serde_json::to_string(train)
        .map_err(|e| Error::contract("checkpoint", e.to_string()))?;
    let model_json = serde_json::to_string(model_cfg)
        .map_err(|e| Error::contract("checkpoint", e.to_string()))?;
    writeln!(w, "train\t{train_json}").map_err(io)?;
    writeln!(w, "model\t{model_json}").map_err(io)?;
    writeln!(w, "[state]").map_err(io)?;
    writeln!(w, "step\t{}", optimizer.step_count()).map_err(io)?;
    writeln!(w, "[tensors]").map_err(io)?;
    let mut offset = 0usize;
    for (record, dims, data) in &rows {
        let dims_text: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{record}\t{}\t{offset}", dims_text.join(",")).map_err(io)?;
        offset += data.len();
    }
    w.write_all(DATA_MARKER.strip_prefix(b"\n").unwrap()).map_err(io)?;
    for (_, _, data) in &rows {
        for v in *data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

struct DirectoryRow {
    dims: Vec<usize>,
    offset: usize,
}

/// Read a checkpoint and rebuild the model, parameters, and optimizer.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let io = |e| Error::io(path.display().to_string(), e);
    let parse = |line: usize, detail: String| Error::parse(path.display().to_string(), line, detail);
    let mut bytes = Vec::new();
    File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;

    let split = bytes
        .windows(DATA_MARKER.len())
        .position(|win| win == DATA_MARKER)
        .ok_or_else(|| parse(0, "missing [data] section".to_string()))?;
    let manifest = std::str::from_utf8(&bytes[..split])
        .map_err(|e| parse(0, format!("manifest is not utf-8: {e}")))?;
    let raw = &bytes[split + DATA_MARKER.len()..];
    if raw.len() % 8 != 0 {
        return Err(parse(0, format!("data block of {} bytes is not f64-aligned", raw.len())));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut train: Option<TrainConfig> = None;
    let mut model_cfg: Option<ModelConfig> = None;
    let mut step: Option<u64> = None;
    let mut directory: BTreeMap<String, DirectoryRow> = BTreeMap::new();
    let mut section = "";
    for (i, line) in manifest.lines().enumerate() {
        let lineno = i + 1;
        if i == 0 {
            if line != MAGIC {
                return Err(parse(lineno, format!("bad magic {line:?}, expected {MAGIC:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            section = line;
            continue;
        }
        let (key, value) = line
            .split_once('\t')
            .ok_or_else(|| parse(lineno, "expected <key>\\t<value>".to_string()))?;
        match (section, key) {
            ("[config]", "train") => {
                train = Some(
                    serde_json::from_str(value).map_err(|e| parse(lineno, e.to_string()))?,
                );
            }
            ("[config]", "model") => {
                model_cfg = Some(
                    serde_json::from_str(value).map_err(|e| parse(lineno, e.to_string()))?,
                );
            }
            ("[state]", "step") => {
                step = Some(value.parse().map_err(|_| parse(lineno, format!("bad step '{value}'")))?);
            }
            ("[tensors]", record) => {
                let (dims_text, offset_text) = value
                    .split_once('\t')
                    .ok_or_else(|| parse(lineno, "expected <dims>\\t<offset>".to_string()))?;
                let dims: Vec<usize> = dims_text
                    .split(',')
                    .map(|d| d.parse().map_err(|_| parse(lineno, format!("bad dim '{d}'"))))
                    .collect::<Result<_>>()?;
                let offset: usize = offset_text
                    .parse()
                    .map_err(|_| parse(lineno, format!("bad offset '{offset_text}'")))?;
                if directory
                    .insert(record.to_string(), DirectoryRow { dims, offset })
                    .is_some()
                {
                    return Err(parse(lineno, format!("duplicate record {record:?}")));
                }
            }
            (sec, key) => {
                return Err(parse(lineno, format!("unexpected entry {key:?} in section {sec:?}")));
            }
        }
    }
    let train = train.ok_or_else(|| parse(0, "missing train config".to_string()))?;
    let model_cfg = model_cfg.ok_or_else(|| parse(0, "missing model config".to_string()))?;
    let step = step.ok_or_else(|| parse(0, "missing step".to_string()))?;

    let fetch = |row: &DirectoryRow, record: &str| -> Result<&[f64]> {
        let len: usize = row.dims.iter().product();
        let end = row.offset.checked_add(len).filter(|e| *e <= values.len());
        end.map(|e| &values[row.offset..e]).ok_or_else(|| {
            parse(0, format!("record {record:?} overruns the data block"))
        })
    };

    let mut store = ParamStore::new(train.seed);
    let model = Model::build(&mut store, model_cfg)?;
    for name in store.names().to_vec() {
        let record = format!("param:{name}");
        let row = directory
            .get(&record)
            .ok_or_else(|| parse(0, format!("checkpoint lacks parameter {name:?}")))?;
        let tensor = store.get_mut(&name)?;
        if row.dims != tensor.shape() {
            return Err(Error::contract(
                "checkpoint",
                format!("parameter {name:?}: stored shape {:?} vs model {:?}", row.dims, tensor.shape()),
            ));
        }
        tensor.data_mut().copy_from_slice(fetch(row, &record)?);
    }
    for record in directory.keys() {
        if let Some(name) = record.strip_prefix("param:") {
            if !store.contains(name) {
                return Err(Error::contract(
                    "checkpoint",
                    format!("stored parameter {name:?} does not exist in this model"),
                ));
            }
        }
    }

    let mut moments: BTreeMap<String, Moments> = BTreeMap::new();
    for (record, row) in &directory {
        let Some(name) = record.strip_prefix("m:") else { continue };
        let v_record = format!("v:{name}");
        let v_row = directory
            .get(&v_record)
            .ok_or_else(|| parse(0, format!("moment {name:?} has m but no v")))?;
        moments.insert(
            name.to_string(),
            Moments {
                m: fetch(row, record)?.to_vec(),
                v: fetch(v_row, &v_record)?.to_vec(),
            },
        );
    }
    let optimizer = Adam::restore(train.optim, step, moments)?;

    Ok(LoadedCheckpoint {
        train,
        model_cfg,
        model,
        store,
        optimizer,
        step,
    })
}
