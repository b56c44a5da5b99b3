use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use nlmw_core::config::{load_preset, parse_config, RunConfig, Split};
use nlmw_core::data::{load_lambada_items, read_text, Corpus};
use nlmw_core::diagnostics::{gradcheck_suite, GRAD_TOLERANCE};
use nlmw_core::evaluation::{
    categorize_targets, category_report, predict_targets, run_sweep, score_corpus, sweep_tsv, ScoreReport, SweepSpec,
};
use nlmw_core::model::build_model;
use nlmw_core::training::{checkpoint_load_matching, checkpoint_save, train_loop, TrainEvent, TrainState};
use nlmw_core::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.nlmw";

#[derive(Parser)]
#[command(name = "nlmw", version, about = "Train and evaluate NPLM and Transformer language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, logging progress and checkpointing on validation improvement.
    Train(RunArgs),
    /// Score the configured evaluation split with a checkpoint.
    Eval(RunArgs),
    /// Train one model per (value, seed) cell and report validation perplexity.
    Sweep(RunArgs),
    /// Finite-difference gradient checks over every layer and model variant.
    Gradcheck,
    /// Target-word accuracy by category on a passage file.
    Analyze(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name, e.g. nplm16 or transformer_c.
    #[arg(long)]
    preset: Option<String>,
    /// `key=value` overrides, applied after the file.
    overrides: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => parse_config(path, &self.overrides),
            (None, Some(name)) => load_preset(name, &self.overrides),
            (None, None) => Err(Error::Config("one of --config or --preset is required".into())),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => a.load().and_then(|c| train(&c)),
        Command::Eval(a) => a.load().and_then(|c| eval(&c)),
        Command::Sweep(a) => a.load().and_then(|c| sweep(&c)),
        Command::Gradcheck => gradcheck(),
        Command::Analyze(a) => a.load().and_then(|c| analyze(&c)),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            println!("error kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("this command needs `{key}` to be set")))
}

fn optional_text(path: &Option<PathBuf>) -> Result<String> {
    path.as_deref().map_or(Ok(String::new()), read_text)
}

fn load_corpus(config: &RunConfig) -> Result<Corpus> {
    let train = read_text(required(&config.data.train, "train")?)?;
    let valid = optional_text(&config.data.valid)?;
    let test = optional_text(&config.data.test)?;
    let corpus = Corpus::from_texts(&train, &valid, &test, config.vocab_mode, config.vocab_limit()?)?;
    info!(
        "vocabulary {} tokens; train {} valid {} test {}",
        corpus.vocab.len(),
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len()
    );
    Ok(corpus)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn checkpoint_path(config: &RunConfig) -> PathBuf {
    config
        .train
        .checkpoint_path
        .clone()
        .unwrap_or_else(|| config.out_dir.join(CHECKPOINT_FILE))
}

fn train(config: &RunConfig) -> Result<bool> {
    let corpus = load_corpus(config)?;
    let model_cfg = config.model_for_vocab(corpus.vocab.len())?;
    let mut train_cfg = config.train.clone();
    let ckpt = checkpoint_path(config);
    train_cfg.checkpoint_path = Some(ckpt.clone());

    let mut resolved = config.clone();
    resolved.model = model_cfg.clone();
    resolved.train.checkpoint_path = Some(ckpt.clone());
    write_file(&config.out_dir.join("config.conf"), &resolved.to_config_text())?;
    write_file(&config.out_dir.join("vocab.txt"), &corpus.vocab.export())?;

    let model = build_model::<f32>(&model_cfg, train_cfg.seed)?;
    let state = TrainState::new(model, &train_cfg)?;
    let mut saved = false;
    let mut stdout = std::io::stdout().lock();
    let state = train_loop(&train_cfg, state, &corpus.train, &corpus.valid, &mut |event| {
        if matches!(event, TrainEvent::Checkpoint { .. }) {
            saved = true;
        }
        let _ = writeln!(stdout, "{event}");
    })?;
    if !saved {
        // no validation split, or validation never ran
        checkpoint_save(&state, &ckpt)?;
        let _ = writeln!(
            stdout,
            "{}",
            TrainEvent::Checkpoint {
                step: state.step,
                path: ckpt
            }
        );
    }
    Ok(true)
}

fn eval(config: &RunConfig) -> Result<bool> {
    let corpus = load_corpus(config)?;
    let expected = config.model_for_vocab(corpus.vocab.len())?;
    let state = checkpoint_load_matching::<f32>(&checkpoint_path(config), &expected)?;
    let (name, ids) = match config.eval_split {
        Split::Valid => ("valid", &corpus.valid),
        Split::Test => ("test", &corpus.test),
    };
    if ids.is_empty() {
        return Err(Error::Config(format!("the {name} split is empty or not configured")));
    }
    let report = score_corpus(&state.model, ids, &config.eval)?;
    let table = format!("{}\n{}\n", ScoreReport::tsv_header(), report.tsv_row(name));
    print!("{table}");
    write_file(&config.out_dir.join(format!("eval_{name}.tsv")), &table)?;
    Ok(true)
}

fn sweep(config: &RunConfig) -> Result<bool> {
    let corpus = load_corpus(config)?;
    if corpus.valid.is_empty() {
        return Err(Error::Config("a sweep needs a `valid` split".into()));
    }
    let spec = SweepSpec {
        kind: config.sweep_kind,
        values: config.sweep_values.clone(),
        seeds: config.sweep_seeds.clone(),
        model: config.model_for_vocab(corpus.vocab.len())?,
        train: config.train.clone(),
        eval: config.eval,
    };
    let rows = run_sweep(&spec, &corpus.train, &corpus.valid)?;
    let table = sweep_tsv(&rows);
    print!("{table}");
    write_file(&config.out_dir.join(format!("sweep_{}.tsv", spec.kind)), &table)?;
    Ok(true)
}

fn gradcheck() -> Result<bool> {
    let entries = gradcheck_suite()?;
    println!("group\tname\tmax_rel_err\tchecked\tstatus");
    for e in &entries {
        println!(
            "{}\t{}\t{:.3e}\t{}\t{}",
            e.group.as_str(),
            e.name,
            e.report.max_rel_err,
            e.report.checked,
            if e.passed() { "PASS" } else { "FAIL" }
        );
    }
    let failed = entries.iter().filter(|e| !e.passed()).count();
    println!("checks={} failed={failed} tolerance={GRAD_TOLERANCE:e}", entries.len());
    Ok(failed == 0)
}

fn analyze(config: &RunConfig) -> Result<bool> {
    let corpus = load_corpus(config)?;
    let expected = config.model_for_vocab(corpus.vocab.len())?;
    let state = checkpoint_load_matching::<f32>(&checkpoint_path(config), &expected)?;
    let items = load_lambada_items(
        required(&config.data.lambada, "lambada")?,
        &corpus.vocab,
        config.data.lambada_annotations.as_deref(),
    )?;
    let predictions = predict_targets(&state.model, &items, config.eval.seq_len)?;
    let flags = categorize_targets(&items, &corpus.frequencies()?, config.cf_threshold, config.lf_threshold);
    let table = category_report(&items, &predictions, &flags)?.to_tsv();
    print!("{table}");
    write_file(&config.out_dir.join("analysis.tsv"), &table)?;
    Ok(true)
}
