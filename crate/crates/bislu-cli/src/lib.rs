//! Command-line surface: train on a corpus directory, evaluate and predict
//! from checkpoints, verify gradients by finite differences, and generate
//! synthetic corpora.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;

use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bislu::data::{parse_corpus, synth_corpus, write_corpus, AnnotatedUtterance, DatasetSplits, LabelSets};
use bislu::train::{self, evaluate_split, grid_search, predict_detailed, TrainConfig, Trained};

#[derive(Parser)]
#[command(
    name = "bislu",
    version,
    about = "Joint multiple intent detection and slot filling: a bidirectional span-based model trained from scratch"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write the best checkpoint plus reports
    Train(TrainArgs),
    /// Score a checkpoint on one corpus split
    Eval(EvalArgs),
    /// Read utterances from stdin, one per line, and print predictions
    Predict(PredictArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic multi-intent corpus
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Directory holding train.txt and validation.txt (test.txt optional)
    #[arg(long)]
    data_dir: PathBuf,
    /// Directory to write model.ckpt and reports into
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the seed from the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Try 1..=5 contrastive views and keep the best by validation
    /// sentence accuracy
    #[arg(long)]
    sweep_views: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory (same layout as for `train`)
    #[arg(long)]
    data: PathBuf,
    /// Which split to score: train, validation, or test
    #[arg(long, default_value = "validation")]
    split: String,
    /// Override the stored intent decision threshold
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// One of: id, sf, id_scl, sf_scl, sd, joint, encoder, biaffine — or
    /// "all"
    #[arg(long, default_value = "all")]
    component: String,
    /// Randomized trials per component
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write train.txt, validation.txt, test.txt into
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 300)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    val: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(), // usage errors exit 2, --help/--version exit 0
    };
    let outcome = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Synth(a) => cmd_synth(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

// ── corpus directory layout ───────────────────────────────────────────

fn load_split(dir: &Path, name: &str) -> Result<(Vec<AnnotatedUtterance>, String)> {
    let path = dir.join(format!("{name}.txt"));
    let (utts, report) =
        parse_corpus(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok((utts, format!("{name}: {report}")))
}

/// Load train/validation(/test) corpus files from one directory.
pub fn load_data_dir(dir: &Path) -> Result<(DatasetSplits, String)> {
    let (train, r1) = load_split(dir, "train")?;
    let (validation, r2) = load_split(dir, "validation")?;
    let mut lines = vec![r1, r2];
    let test = if dir.join("test.txt").exists() {
        let (t, r3) = load_split(dir, "test")?;
        lines.push(r3);
        t
    } else {
        Vec::new()
    };
    let data = DatasetSplits::new(train, validation, test)?;
    Ok((data, lines.join("\n") + "\n"))
}

// ── train ─────────────────────────────────────────────────────────────

fn print_epochs(report: &bislu::train::TrainReport) {
    for e in &report.epochs {
        println!(
            "epoch {:>3}  loss {:.4}  val intent {:.3}  slot-f1 {:.3}  sentence {:.3}  ({:.1}s)",
            e.epoch,
            e.train_loss,
            e.val_intent_accuracy,
            e.val_slot_f1,
            e.val_sentence_accuracy,
            e.seconds
        );
    }
    println!(
        "best epoch {} with validation sentence accuracy {:.3}",
        report.best_epoch, report.best_sentence_accuracy
    );
}

fn save_outputs(
    out_dir: &Path,
    cfg: &TrainConfig,
    data: &DatasetSplits,
    trained: &Trained<f32>,
    load_report: &str,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let best = &trained.report.epochs[trained.report.best_epoch];
    let metric = checkpoint::SavedMetric {
        best_epoch: trained.report.best_epoch,
        val_sentence_accuracy: best.val_sentence_accuracy,
        val_intent_accuracy: best.val_intent_accuracy,
        val_slot_f1: best.val_slot_f1,
    };
    let ckpt = out_dir.join("model.ckpt");
    checkpoint::save(&ckpt, cfg, &data.labels, &trained.vocab, &metric, &trained.params)?;
    std::fs::write(
        out_dir.join("train_report.json"),
        serde_json::to_string_pretty(&trained.report)? + "\n",
    )?;
    std::fs::write(out_dir.join("load_report.txt"), load_report)?;
    Ok(ckpt)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut cfg = config::load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let (data, load_report) = load_data_dir(&args.data_dir)?;
    print!("{load_report}");

    let (trained, effective_cfg) = if args.sweep_views {
        let candidates: Vec<(String, TrainConfig)> = (1..=5)
            .map(|v| {
                let mut c = cfg.clone();
                c.views.views = v;
                (format!("views={v}"), c)
            })
            .collect();
        let (grid, trained) = grid_search::<f32>(&data, &candidates)?;
        for run in &grid.runs {
            println!(
                "{}: best validation sentence accuracy {:.3} (epoch {})",
                run.label, run.report.best_sentence_accuracy, run.report.best_epoch
            );
        }
        println!("selected {}", grid.runs[grid.best].label);
        std::fs::create_dir_all(&args.out_dir)?;
        std::fs::write(
            args.out_dir.join("grid_report.json"),
            serde_json::to_string_pretty(&grid)? + "\n",
        )?;
        let winner = candidates[grid.best].1.clone();
        (trained, winner)
    } else {
        (train::train::<f32>(&data, &cfg)?, cfg)
    };

    print_epochs(&trained.report);
    let ckpt = save_outputs(&args.out_dir, &effective_cfg, &data, &trained, &load_report)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(0)
}

// ── eval ──────────────────────────────────────────────────────────────

fn label_diff(kind: &str, data: &[String], model: &[String]) -> Option<String> {
    let missing: Vec<&String> = data.iter().filter(|l| !model.contains(l)).collect();
    if missing.is_empty() {
        return None;
    }
    let extra: Vec<&String> = model.iter().filter(|l| !data.contains(l)).collect();
    Some(format!(
        "{kind} labels in the data but unknown to the checkpoint: {missing:?}; checkpoint-only {kind} labels: {extra:?}"
    ))
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    if !["train", "validation", "test"].contains(&args.split.as_str()) {
        bail!("unknown split '{}' (expected train, validation, or test)", args.split);
    }
    let loaded = checkpoint::load(&args.checkpoint)?;
    let (utts, report_line) = load_split(&args.data, &args.split)?;
    println!("{report_line}");

    let data_labels = LabelSets::from_utterances(&utts);
    let mut problems = Vec::new();
    if let Some(d) = label_diff("intent", &data_labels.intents, &loaded.labels.intents) {
        problems.push(d);
    }
    if let Some(d) = label_diff("slot", &data_labels.slots, &loaded.labels.slots) {
        problems.push(d);
    }
    if !problems.is_empty() {
        bail!("label inventories are incompatible:\n{}", problems.join("\n"));
    }

    let mut pcfg = loaded.config.prediction.clone();
    if let Some(t) = args.threshold {
        pcfg.t_i = t;
        pcfg.validate()
            .map_err(|e| anyhow::anyhow!("bad threshold: {e}"))?;
    }
    let result = evaluate_split(
        &loaded.params,
        &loaded.pipe,
        &loaded.vocab,
        &loaded.labels,
        &utts,
        &pcfg,
    )?;
    println!("{result}");
    Ok(0)
}

// ── predict ───────────────────────────────────────────────────────────

fn cmd_predict(args: PredictArgs) -> Result<i32> {
    let loaded = checkpoint::load(&args.checkpoint)?;
    let stdin = std::io::stdin();
    for (lineno, line) in stdin.lock().lines().enumerate() {
        let line = line.context("reading stdin")?;
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            eprintln!("warning: line {} is empty, skipped", lineno + 1);
            continue;
        }
        match predict_detailed(
            &loaded.params,
            &loaded.pipe,
            &loaded.vocab,
            &loaded.labels,
            &words,
            &loaded.config.prediction,
        ) {
            Ok((pred, probs)) => {
                let intents: Vec<serde_json::Value> = pred
                    .intents
                    .iter()
                    .map(|label| {
                        let id = loaded
                            .labels
                            .intent_id(label)
                            .expect("decoded intents come from the label list");
                        serde_json::json!({ "label": label, "probability": probs[id] })
                    })
                    .collect();
                let slots: Vec<serde_json::Value> = pred
                    .slots
                    .iter()
                    .map(|s| {
                        serde_json::json!({
                            "start": s.start, "end": s.end,
                            "label": s.label, "score": s.score,
                        })
                    })
                    .collect();
                println!(
                    "{}",
                    serde_json::json!({ "intents": intents, "slots": slots })
                );
            }
            Err(e) => eprintln!("warning: line {} skipped: {e}", lineno + 1),
        }
    }
    Ok(0)
}

// ── gradcheck ─────────────────────────────────────────────────────────

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let components: Vec<&str> = if args.component == "all" {
        gradcheck::COMPONENTS.to_vec()
    } else {
        vec![args.component.as_str()]
    };
    let mut all_ok = true;
    for comp in components {
        let report = gradcheck::run_component(comp, args.trials, args.seed)?;
        let verdict = if report.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<9} max rel err {:.3e} over {} entries ({} trials) worst {}[{}] analytic {:.6e} numeric {:.6e} .. {verdict}",
            report.component,
            report.max_rel_err,
            report.checked_entries,
            report.trials,
            report.worst_param,
            report.worst_entry,
            report.analytic,
            report.numeric,
        );
        all_ok &= report.passed();
    }
    Ok(if all_ok { 0 } else { 1 })
}

// ── synth ─────────────────────────────────────────────────────────────

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    let data = synth_corpus(args.seed, args.train, args.val, args.test)?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    for (name, split) in [
        ("train", &data.train),
        ("validation", &data.validation),
        ("test", &data.test),
    ] {
        let path = args.out_dir.join(format!("{name}.txt"));
        std::fs::write(&path, write_corpus(split)?)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("{}: {} utterances", path.display(), split.len());
    }
    println!(
        "labels: {} intents, {} slot types",
        data.labels.num_intents(),
        data.labels.num_slots()
    );
    Ok(0)
}
