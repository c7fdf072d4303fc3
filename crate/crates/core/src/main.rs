//! Command-line front end. Exit codes: 0 success, 2 validation failure,
//! 1 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use kdial::pipeline::{
    entry_dir, gen_synthetic_corpus, load_predictions, load_split, run_entry, score_predictions,
    summarize, train_vocab, EntryPreset, ModelStore, PipelineError, RunConfig, SynthSizes,
    TrainTask,
};

#[derive(Parser)]
#[command(name = "kdial", about = "Knowledge-grounded task-oriented dialogue pipeline")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Detector,
    Selector,
    Generator,
}

#[derive(Subcommand)]
enum Command {
    /// Load the train and eval splits and print their sizes.
    Ingest {
        /// Also require gold labels on both splits.
        #[arg(long)]
        validate: bool,
    },
    /// Train the subword vocabulary and write it to the configured path.
    TokenizerTrain,
    /// (Re)train the models of one family used by the configured entry.
    Train {
        #[arg(long, value_enum)]
        task: TaskArg,
    },
    /// Score the configured entry's predictions file on one task.
    Evaluate {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        task: u8,
        /// Predictions file; defaults to the entry's output.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run an entry preset end to end.
    Run {
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=4))]
        entry: Option<u8>,
    },
    /// Write a synthetic corpus (train, val and unseen splits).
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        /// Domains x entities x documents, e.g. 3x5x6.
        #[arg(long)]
        sizes: SynthSizes,
        #[arg(long)]
        dialogues: Option<usize>,
        /// Output directory; defaults to the config's synth.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let path = cli.config.ok_or_else(|| PipelineError::Config {
        path: PathBuf::new(),
        message: "--config is required".into(),
    })?;
    let mut config = RunConfig::load(&path)?;
    match cli.command {
        Command::Ingest { validate } => {
            let train = load_split(&config.train)?;
            let eval = load_split(&config.eval)?;
            if validate && (train.labels.is_none() || eval.labels.is_none()) {
                return Err(PipelineError::NoLabels);
            }
            print(&json!({"train": summarize(&train), "eval": summarize(&eval)}));
        }
        Command::TokenizerTrain => {
            let vocab = train_vocab(&config)?;
            print(&json!({"path": config.vocab.path, "size": vocab.len()}));
        }
        Command::Train { task } => {
            let vocab = kdial::tokenizer::Vocab::load(&config.vocab.path)?;
            let task = match task {
                TaskArg::Detector => TrainTask::Detector,
                TaskArg::Selector => TrainTask::Selector,
                TaskArg::Generator => TrainTask::Generator,
            };
            let preset = config.preset()?;
            let mut store = ModelStore::new(&config, &vocab);
            store.models_for(&preset, Some(task))?;
            let trained: Vec<_> = store
                .reports
                .iter()
                .map(|(p, r)| json!({"checkpoint": p, "final_epoch_loss": r.epoch_losses.last()}))
                .collect();
            print(&json!(trained));
        }
        Command::Evaluate { task, predictions } => {
            let ds = load_split(&config.eval)?;
            let file = predictions.unwrap_or_else(|| entry_dir(&config).join("predictions.json"));
            let preds = load_predictions(&file, &ds)?;
            let reports = score_predictions(&ds, &preds)?;
            print(&serde_json::to_value(&reports[usize::from(task) - 1]).expect("report serializes"));
        }
        Command::Run { entry } => {
            if let Some(e) = entry {
                EntryPreset::new(e)?;
                config.entry = e;
            }
            let out = run_entry(&config)?;
            print(&json!({"predictions": out.predictions, "reports": out.reports}));
        }
        Command::Synth {
            seed,
            mut sizes,
            dialogues,
            out,
        } => {
            let synth = config.synth.as_ref();
            sizes.dialogues = dialogues.or(synth.map(|s| s.dialogues)).unwrap_or(200);
            let dir = out.or(synth.map(|s| s.dir.clone())).ok_or_else(|| PipelineError::Config {
                path: path.clone(),
                message: "no output directory: pass --out or set synth.dir".into(),
            })?;
            gen_synthetic_corpus(&dir, seed.unwrap_or(config.seed), &sizes)?;
            print(&json!({"dir": dir, "sizes": sizes.to_string(), "dialogues": sizes.dialogues}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
