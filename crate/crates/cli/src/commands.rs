//! The six workflows behind the subcommands. Each resolves its settings
//! through the flag/file/environment layers, echoes the effective
//! configuration, runs the library call, and writes plain-text outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use drau::ablation::{run_ablation, AblationConfig};
use drau::checkpoint::{load_checkpoint, save_checkpoint};
use drau::data::{generate_split, Category, DataConfig, Split, VQASample, Vocab};
use drau::dataio::{read_dataset, read_vocab, write_dataset, write_vocab};
use drau::error::{Error, Result};
use drau::export::export_attention;
use drau::model::{ModelConfig, Variant};
use drau::suite::gradient_suite;
use drau::train::{evaluate, train, TrainConfig, TrainOutcome};

use crate::args::{AblateArgs, AttnArgs, EvalArgs, GenDataArgs, TrainArgs};
use crate::config::{echo, resolve, resolve_seed, Overlay};
use crate::pairs;

fn overlay_for(path: &Option<PathBuf>) -> Result<Overlay> {
    match path {
        Some(p) => Overlay::from_file(p),
        None => Ok(Overlay::empty()),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

fn category_counts(samples: &[VQASample]) -> String {
    Category::ALL
        .iter()
        .map(|&c| {
            let n = samples.iter().filter(|s| s.category == c).count();
            format!("{c} {n}")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut o = overlay_for(&args.config)?;
    let d = DataConfig::default();
    let scenes = resolve(args.scenes, &mut o, "scenes", 500)?;
    let cfg = DataConfig {
        grid: resolve(args.grid, &mut o, "grid", d.grid)?,
        feat_dim: resolve(args.feat_dim, &mut o, "feat-dim", d.feat_dim)?,
        noise: resolve(args.noise, &mut o, "noise", d.noise)?,
        occupancy: resolve(args.occupancy, &mut o, "occupancy", d.occupancy)?,
        corruption: resolve(args.corruption, &mut o, "corruption", d.corruption)?,
        questions_per_scene: resolve(
            args.questions_per_scene,
            &mut o,
            "questions-per-scene",
            d.questions_per_scene,
        )?,
        seed: resolve_seed(args.seed, &mut o, d.seed)?,
    };
    o.finish()?;
    echo(
        "gen-data",
        cfg.seed,
        pairs![
            "out" => args.out.display(),
            "scenes" => scenes,
            "grid" => cfg.grid,
            "feat-dim" => cfg.feat_dim,
            "noise" => cfg.noise,
            "occupancy" => cfg.occupancy,
            "corruption" => cfg.corruption,
            "questions-per-scene" => cfg.questions_per_scene,
        ],
    );

    let count = scenes * cfg.questions_per_scene;
    let vocab = Vocab::for_grid(cfg.grid, cfg.feat_dim)?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    for (split, name) in [(Split::Train, "train"), (Split::Val, "val")] {
        let samples = generate_split(&cfg, count, split)?;
        write_dataset(&args.out.join(format!("{name}.jsonl")), &samples)?;
        println!("{name}: {} samples ({})", samples.len(), category_counts(&samples));
    }
    write_vocab(&args.out.join("vocab.tsv"), &vocab)?;
    println!(
        "vocab: {} tokens, {} answers",
        vocab.token_count(),
        vocab.answer_count()
    );
    Ok(())
}

/// Load the three dataset files that gen-data writes into one directory.
fn load_dataset_dir(dir: &Path) -> Result<(Vec<VQASample>, Vec<VQASample>, Vocab)> {
    let train_set = read_dataset(&dir.join("train.jsonl"))?;
    let val_set = read_dataset(&dir.join("val.jsonl"))?;
    let vocab = read_vocab(&dir.join("vocab.tsv"))?;
    Ok((train_set, val_set, vocab))
}

/// Desk-scale model dimensions resized to fit a concrete vocabulary.
fn model_for_vocab(variant: Variant, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        regions: vocab.grid * vocab.grid,
        region_feat: vocab.feat_dim,
        token_vocab: vocab.token_count(),
        answers: vocab.answer_count(),
        ..ModelConfig::desk(variant)
    }
}

fn write_trace(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    let io = io_err(path);
    writeln!(file, "# step\tloss\tval_accuracy").map_err(&io)?;
    for row in &outcome.trace {
        let val = row
            .val_accuracy
            .map(|v| format!("{v:e}"))
            .unwrap_or_default();
        writeln!(file, "{}\t{:e}\t{}", row.step, row.loss, val).map_err(&io)?;
    }
    Ok(())
}

pub fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut o = overlay_for(&args.config)?;
    let t = TrainConfig::default();
    let variant = resolve(args.variant, &mut o, "variant", Variant::Drau)?;
    let mut tcfg = TrainConfig {
        iters: resolve(args.iters, &mut o, "iters", t.iters)?,
        batch: resolve(args.batch, &mut o, "batch", t.batch)?,
        dropout: resolve(args.dropout, &mut o, "dropout", t.dropout)?,
        eval_interval: resolve(args.eval_interval, &mut o, "eval-interval", t.eval_interval)?,
        seed: resolve_seed(args.seed, &mut o, t.seed)?,
        ..t
    };
    tcfg.optim.lr = resolve(args.lr, &mut o, "lr", t.optim.lr)?;
    o.finish()?;
    echo(
        "train",
        tcfg.seed,
        pairs![
            "data" => args.data.display(),
            "out" => args.out.display(),
            "variant" => variant,
            "iters" => tcfg.iters,
            "batch" => tcfg.batch,
            "lr" => tcfg.optim.lr,
            "dropout" => tcfg.dropout,
            "eval-interval" => tcfg.eval_interval,
        ],
    );

    let (train_set, val_set, vocab) = load_dataset_dir(&args.data)?;
    let mcfg = model_for_vocab(variant, &vocab);
    let outcome = train(&mcfg, &tcfg, &train_set, &val_set, &vocab)?;

    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    write_trace(&args.out.join("trace.tsv"), &outcome)?;
    save_checkpoint(
        &args.out.join("model.ckpt"),
        &tcfg,
        &mcfg,
        &outcome.store,
        &outcome.optimizer,
    )?;
    match &outcome.best {
        Some(best) => println!(
            "trained {} steps; best val accuracy {:.4} at step {}",
            outcome.trace.len(),
            best.val_accuracy,
            best.step
        ),
        None => println!("trained {} steps; no validation pass ran", outcome.trace.len()),
    }
    println!("wrote {}", args.out.join("trace.tsv").display());
    println!("wrote {}", args.out.join("model.ckpt").display());
    Ok(())
}

pub fn eval_cmd(args: EvalArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    echo(
        "eval",
        loaded.train.seed,
        pairs![
            "checkpoint" => args.checkpoint.display(),
            "data" => args.data.display(),
            "vocab" => args.vocab.display(),
            "variant" => loaded.model_cfg.variant,
            "step" => loaded.step,
        ],
    );
    let samples = read_dataset(&args.data)?;
    let vocab = read_vocab(&args.vocab)?;
    let ev = evaluate(&loaded.model, &loaded.store, &samples, &vocab)?;
    print!("{}", ev.report);
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let mut o = overlay_for(&args.config)?;
    let t = TrainConfig::default();
    let seeds = resolve(args.seeds, &mut o, "seeds", 3u64)?;
    let variants = match &args.variants {
        Some(list) => list.clone(),
        None => match o.take::<String>("variants")? {
            Some(csv) => parse_variants(&csv)?,
            None => Variant::ALL.to_vec(),
        },
    };
    let mut tcfg = TrainConfig {
        iters: resolve(args.iters, &mut o, "iters", t.iters)?,
        batch: resolve(args.batch, &mut o, "batch", t.batch)?,
        dropout: resolve(args.dropout, &mut o, "dropout", t.dropout)?,
        eval_interval: resolve(args.eval_interval, &mut o, "eval-interval", t.eval_interval)?,
        ..t
    };
    tcfg.optim.lr = resolve(args.lr, &mut o, "lr", t.optim.lr)?;
    let jobs = resolve(args.jobs, &mut o, "jobs", 1usize)?;
    o.finish()?;
    let variant_names = variants
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",");
    echo(
        "ablate",
        tcfg.seed,
        pairs![
            "data" => args.data.display(),
            "variants" => variant_names,
            "seeds" => seeds,
            "iters" => tcfg.iters,
            "batch" => tcfg.batch,
            "lr" => tcfg.optim.lr,
            "dropout" => tcfg.dropout,
            "eval-interval" => tcfg.eval_interval,
            "jobs" => jobs,
        ],
    );

    let (train_set, val_set, vocab) = load_dataset_dir(&args.data)?;
    let ablation = AblationConfig {
        variants,
        seeds: (0..seeds).collect(),
        train: tcfg,
        jobs,
    };
    let base = model_for_vocab(Variant::Drau, &vocab);
    let table = run_ablation(&base, &ablation, &train_set, &val_set, &vocab)?;
    print!("{}", table.to_tsv());
    for note in table.directional_notes() {
        println!("{note}");
    }
    Ok(())
}

fn parse_variants(csv: &str) -> Result<Vec<Variant>> {
    csv.split(',')
        .map(|name| name.trim().parse())
        .collect::<Result<Vec<Variant>>>()
}

pub fn attn(args: AttnArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    echo(
        "attn",
        loaded.train.seed,
        pairs![
            "checkpoint" => args.checkpoint.display(),
            "data" => args.data.display(),
            "vocab" => args.vocab.display(),
            "sample" => args.sample,
            "out" => args.out.display(),
        ],
    );
    let samples = read_dataset(&args.data)?;
    let vocab = read_vocab(&args.vocab)?;
    let sample = samples.get(args.sample).ok_or_else(|| {
        Error::config(format!(
            "sample index {} out of range, dataset holds {}",
            args.sample,
            samples.len()
        ))
    })?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let summary = export_attention(&args.out, &loaded.model, &loaded.store, sample, &vocab)?;
    println!("question: {}", sample.question);
    println!("predicted: {} (consensus score {:.4})", summary.predicted, summary.score);
    for f in &summary.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

pub fn gradcheck() -> Result<()> {
    echo("gradcheck", 0, &[]);
    let report = gradient_suite()?;
    print!("{}", report.to_text());
    if !report.passed() {
        return Err(Error::contract(
            "gradcheck",
            "at least one case exceeded the tolerance",
        ));
    }
    println!("all {} cases passed", report.cases.len());
    Ok(())
}
