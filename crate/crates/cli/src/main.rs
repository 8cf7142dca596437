//! `biogen`: command-line driver for vocabulary building, denoising
//! pretraining, downstream fine-tuning, evaluation and the noise ablation.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on bad arguments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use biogen_core::bpe::{train_bpe, Vocab};
use biogen_core::checkpoint::Checkpoint;
use biogen_core::config::{RunConfig, TaskKind};
use biogen_core::corpus::load_documents;
use biogen_core::error::{Error, Result};
use biogen_core::metrics::MetricReport;
use biogen_core::synthetic::{write_bundle, BundleSizes};
use biogen_core::tasks::{
    evaluate_test, pretrain_from_config, resolve_vocab, run_ablation, run_task, score_predictions,
    AblationInputs, TaskData, TaskSettings, TypeVocab,
};
use biogen_core::train::{from_checkpoint, save_checkpoint};
use biogen_core::model::ModelParams;
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};

const TASK_KINDS: [&str; 4] = ["dialogue", "summarization", "linking", "ner"];
const NER_LABELS_KEY: &str = "ner_labels";

#[derive(Parser)]
#[command(name = "biogen", version, about = "Denoising seq2seq pretraining and biomedical task harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file; relative paths inside resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint to start from.
    #[arg(long)]
    init: PathBuf,
    /// Vocabulary file the checkpoint was trained with.
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and toy task datasets.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        docs: usize,
    },
    /// Train a BPE vocabulary on a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoising pretraining; resumes from a checkpoint in --out.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = PossibleValuesParser::new(["ti", "sp", "ti+sp"]))]
        noise: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Stop (with a checkpoint) after this many steps in total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Fine-tune a checkpoint on a task and score the test split.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = PossibleValuesParser::new(TASK_KINDS))]
        task: String,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint, or a prediction file, on a task's test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = PossibleValuesParser::new(TASK_KINDS))]
        task: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "preds", requires = "vocab")]
        init: Option<PathBuf>,
        #[arg(long, requires = "init")]
        vocab: Option<PathBuf>,
        /// Prediction file in the format written to predictions.txt.
        #[arg(long, conflicts_with_all = ["init", "vocab"])]
        preds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Constrained-beam entity linking against a knowledge base.
    Link {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pointer-decoded named entity recognition.
    Ner {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain with text infilling only and with both noises, then compare on tasks.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated task names declared in the config (default: all).
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, seed, docs } => {
            write_bundle(
                &out,
                seed,
                BundleSizes {
                    documents: docs,
                    ..BundleSizes::default()
                },
            )?;
            println!("wrote {}", out.display());
        }
        Command::BuildVocab {
            corpus,
            vocab_size,
            out,
        } => {
            let vocab = train_bpe(&load_documents(&corpus)?, vocab_size)?;
            create_parent(&out)?;
            vocab.save(&out)?;
            println!("{} tokens", vocab.size());
        }
        Command::Pretrain {
            cfg,
            noise,
            out,
            stop_after,
        } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(n) = noise {
                cfg.set("noise", &n)?;
            }
            let inputs = AblationInputs::load(&cfg, Path::new("."), None)?;
            create_dir(&out)?;
            let vocab = resolve_vocab(&cfg, Path::new("."), &inputs, &out)?;
            pretrain_from_config(&cfg, &inputs.corpus, &vocab, &out, stop_after)?;
            println!("{}", cfg.to_text().trim_end());
        }
        Command::Finetune {
            cfg,
            task,
            data,
            model,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            let kind: TaskKind = task.parse()?;
            let task_data = TaskData::load(kind, &data)?;
            let (params, _, vocab) = load_model(&model.init, &model.vocab)?;
            let settings = TaskSettings::from_config(&cfg)?.fit_to(&params.config);
            create_dir(&out)?;
            cfg.write(out.join("config.txt"))?;
            let outcome = run_task(&task_data, &params, &vocab, &settings, &out)?;
            let mut extra = vec![("task".to_string(), kind.to_string())];
            if let Some(labels) = &outcome.ner_labels {
                extra.push((NER_LABELS_KEY.into(), labels.join(",")));
            }
            save_checkpoint(out.join("best.bin"), &outcome.params, None, &extra)?;
            println!("best epoch {}", outcome.best_epoch);
            print_report(&outcome.report);
        }
        Command::Eval {
            cfg,
            task,
            data,
            init,
            vocab,
            preds,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            let kind: TaskKind = task.parse()?;
            let task_data = TaskData::load_test(kind, &data, None)?;
            create_dir(&out)?;
            cfg.write(out.join("config.txt"))?;
            let report = match preds {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    score_predictions(&task_data, &text, cfg.get_bool("bleu_smoothing")?)?
                }
                None => {
                    let (init, vocab) = (init.expect("clap requires it"), vocab.expect("clap requires it"));
                    score_model(&cfg, &task_data, &init, &vocab, &out)?
                }
            };
            report.write(&out, "metrics")?;
            print_report(&report);
        }
        Command::Link {
            cfg,
            kb,
            data,
            model,
            beam,
            out,
        } => {
            let mut cfg = load_config(&cfg)?;
            cfg.set("beam_size", &beam.to_string())?;
            let task_data = TaskData::load_test(TaskKind::Linking, &data, Some(&kb))?;
            create_dir(&out)?;
            cfg.write(out.join("config.txt"))?;
            let report = score_model(&cfg, &task_data, &model.init, &model.vocab, &out)?;
            report.write(&out, "metrics")?;
            print_report(&report);
        }
        Command::Ner { cfg, data, model, out } => {
            let cfg = load_config(&cfg)?;
            let task_data = TaskData::load_test(TaskKind::Ner, &data, None)?;
            create_dir(&out)?;
            cfg.write(out.join("config.txt"))?;
            let report = score_model(&cfg, &task_data, &model.init, &model.vocab, &out)?;
            report.write(&out, "metrics")?;
            print_report(&report);
        }
        Command::Ablate { cfg, tasks, out } => {
            let cfg = load_config(&cfg)?;
            let inputs = AblationInputs::load(&cfg, Path::new("."), tasks.as_deref())?;
            let report = run_ablation(&cfg, Path::new("."), &inputs, &out)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

/// Runs inference on the test split, writing `predictions.txt` into `out`.
/// NER runs take entity labels from the checkpoint when it records them.
fn score_model(
    cfg: &RunConfig,
    data: &TaskData,
    init: &Path,
    vocab: &Path,
    out: &Path,
) -> Result<MetricReport> {
    let (params, ckpt, vocab) = load_model(init, vocab)?;
    let settings = TaskSettings::from_config(cfg)?.fit_to(&params.config);
    let types = ckpt.get(NER_LABELS_KEY).map(|l| TypeVocab {
        labels: l.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect(),
    });
    let (report, preds) = evaluate_test(data, &params, &vocab, &settings, types.as_ref())?;
    let path = out.join("predictions.txt");
    fs::write(&path, preds).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

fn load_model(init: &Path, vocab: &Path) -> Result<(ModelParams<f32>, Checkpoint, Vocab)> {
    let ckpt = Checkpoint::load(init)?;
    let (params, _) = from_checkpoint(&ckpt)?;
    let vocab = Vocab::load(vocab)?;
    if vocab.size() != params.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the checkpoint expects {}",
            vocab.size(),
            params.config.vocab_size
        )));
    }
    Ok((params, ckpt, vocab))
}

/// Loads the config (or defaults), applies overrides, and rewrites relative
/// corpus, vocab and task paths against the config file's directory.
fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let (mut cfg, base) = match &args.config {
        Some(p) => (RunConfig::load(p)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (RunConfig::default(), PathBuf::new()),
    };
    let rebase = |p: &str| base.join(p).display().to_string();
    for key in ["corpus", "vocab"] {
        if let Some(p) = cfg.get_path(key)? {
            let p = rebase(p);
            cfg.set(key, &p)?;
        }
    }
    let tasks: Vec<(String, String)> = cfg
        .tasks()
        .iter()
        .map(|(name, entry)| (name.clone(), format!("{}:{}", entry.kind, rebase(&entry.dir))))
        .collect();
    for (name, value) in tasks {
        cfg.set(&format!("task.{name}"), &value)?;
    }
    for pair in &args.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn print_report(report: &MetricReport) {
    print!("{}", report.to_tsv());
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}
