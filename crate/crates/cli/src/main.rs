//! `vcp`: corpus generation, training, prompt data generation, inference,
//! evaluation and the full comparison experiment.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vcp_core::config::RunConfig;
use vcp_core::corpus::{Example, ExampleRecord};
use vcp_core::datagen::{self, PromptExample, Provenance};
use vcp_core::experiment;
use vcp_core::io::{read_jsonl, write_json, write_jsonl};
use vcp_core::metrics::evaluate;
use vcp_core::model::{checkpoint, Model, PromptParams};
use vcp_core::mr::MeaningRepresentation;
use vcp_core::pipeline::{self, Mode, PipelineConfig, PipelineResult};
use vcp_core::training::{self, Stage, TrainPair};
use vcp_core::vocab::Vocab;
use vcp_core::Error;

#[derive(Parser)]
#[command(name = "vcp", version, about = "Verification-and-correction prompting for data-to-text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Base,
    PromptInit,
    PromptTune,
    WholeAblation,
}

impl StageArg {
    fn stage(self) -> Stage {
        match self {
            StageArg::Base => Stage::Base,
            StageArg::PromptInit => Stage::PromptInit,
            StageArg::PromptTune => Stage::PromptTune,
            StageArg::WholeAblation => Stage::WholeModelAblation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Init,
    Tune,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Vcp,
    BaselineGreedy,
    BaselineBeam,
    NoPositionAblation,
    DirectSampling,
}

impl ModeArg {
    fn mode(self) -> Mode {
        match self {
            ModeArg::Vcp => Mode::Vcp,
            ModeArg::BaselineGreedy => Mode::BaselineGreedy,
            ModeArg::BaselineBeam => Mode::BaselineBeam,
            ModeArg::NoPositionAblation => Mode::NoPositionAblation,
            ModeArg::DirectSampling => Mode::DirectSampling,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus splits and the vocabulary.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write a checkpoint plus a JSON Lines log.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory from gen-corpus (vocabulary, and train/val for the base stage).
        #[arg(long)]
        corpus: PathBuf,
        /// Base checkpoint; required by every stage except base.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Checkpoint whose prompts start prompt tuning; fresh prompts otherwise.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Prompt dataset (JSON Lines) for the prompt and ablation stages.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a prompt initialization or tuning dataset.
    Datagen {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        model: PathBuf,
        /// Checkpoint with the initialized prompts used to decode tune targets.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one decoding mode over an MR file and write results as JSON Lines.
    Infer {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// Checkpoint holding trained prompts (vcp and no-position modes).
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Examples to decode; defaults to the corpus test split.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score inference results against references.
    Eval {
        #[arg(long)]
        results: PathBuf,
        /// Examples (JSON Lines `{mr, refs}`) aligned with the results.
        #[arg(long)]
        references: PathBuf,
        #[arg(long, default_value = "eval")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole comparison for several seeds and print the table.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// 0 ok, 1 I/O or file format, 2 configuration or input, 3 invariant violation.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. }
        | Error::Csv { .. }
        | Error::Json(_)
        | Error::BadCheckpoint(_)
        | Error::VersionMismatch { .. } => 1,
        Error::Row { source, .. } => exit_code(source),
        Error::FrozenViolation { .. } | Error::ChecksumMismatch { .. } | Error::Divergence { .. } => 3,
        _ => 2,
    }
}

type Result<T> = vcp_core::Result<T>;

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_examples(path: &Path) -> Result<Vec<Example>> {
    read_jsonl::<ExampleRecord>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            Example::try_from(r).map_err(|e| Error::Row {
                row: i + 1,
                source: Box::new(e),
            })
        })
        .collect()
}

fn load_vocab(corpus: &Path) -> Result<Vocab> {
    Vocab::load(&corpus.join("vocab.txt"))
}

fn load_model(path: &Path, vocab: &Vocab) -> Result<checkpoint::Checkpoint<f32>> {
    let ck = checkpoint::load::<f32>(path)?;
    if ck.vocab_hash != vocab.hash() {
        return Err(Error::Config(format!(
            "{} was trained with a different vocabulary",
            path.display()
        )));
    }
    Ok(ck)
}

/// Prompts stored in `path`, which must have been trained on `base`.
fn load_prompts(path: &Path, vocab: &Vocab, base: &Model<f32>) -> Result<PromptParams<f32>> {
    let ck = load_model(path, vocab)?;
    let (expected, actual) = (base.checksum(), ck.model.checksum());
    if expected != actual {
        return Err(Error::ChecksumMismatch { expected, actual });
    }
    ck.prompts
        .ok_or_else(|| Error::Config(format!("{} holds no prompts", path.display())))
}

fn mrs(examples: &[Example]) -> Vec<MeaningRepresentation> {
    examples.iter().map(|e| e.mr.clone()).collect()
}

fn gen_corpus(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let (splits, vocab) = experiment::build_corpus(&cfg)?;
    experiment::write_corpus(out, &splits, &vocab)?;
    let all: Vec<&Example> = splits.train.iter().chain(&splits.val).chain(&splits.test).collect();
    let slots: usize = all.iter().map(|e| e.mr.slots.len()).sum();
    let refs: usize = all.iter().map(|e| e.references.len()).sum();
    println!(
        "train {} / val {} / test {} examples, {} references, {:.2} slots per MR, vocabulary {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        refs,
        slots as f64 / all.len() as f64,
        vocab.len()
    );
    Ok(())
}

fn prompt_pairs(path: &Path, vocab: &Vocab, strip: bool) -> Result<Vec<TrainPair>> {
    let data: Vec<PromptExample> = read_jsonl(path)?;
    Ok(data
        .iter()
        .map(|e| if strip { e.unprompted_pair(vocab) } else { e.train_pair(vocab) })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn train(
    stage: Stage,
    config: Option<&Path>,
    corpus: &Path,
    model: Option<&Path>,
    prompts: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let vocab = load_vocab(corpus)?;
    let tc = cfg.train.get(stage);
    let log = out.with_extension("log.jsonl");
    let need_model = || {
        model.ok_or_else(|| Error::Config(format!("stage {} needs --model of a trained base", stage.name())))
    };
    let need_data = || data.ok_or_else(|| Error::Config(format!("stage {} needs --data", stage.name())));
    let report = match stage {
        Stage::Base => {
            let mut m = Model::<f32>::new(cfg.model_config(vocab.len()))?;
            let train = experiment::reference_pairs(&vocab, &load_examples(&corpus.join("train.jsonl"))?);
            let val = experiment::reference_pairs(&vocab, &load_examples(&corpus.join("val.jsonl"))?);
            let report = training::fine_tune(&mut m, &train, &val, tc)?;
            checkpoint::save(out, &m, None, &vocab.hash())?;
            report
        }
        Stage::WholeModelAblation => {
            let mut m = load_model(need_model()?, &vocab)?.model;
            let pairs = prompt_pairs(need_data()?, &vocab, true)?;
            let report = training::whole_model_finetune_ablation(&mut m, &pairs, &[], tc)?;
            checkpoint::save(out, &m, None, &vocab.hash())?;
            report
        }
        Stage::PromptInit | Stage::PromptTune => {
            let m = load_model(need_model()?, &vocab)?.model;
            let pairs = prompt_pairs(need_data()?, &vocab, false)?;
            let mut p = match prompts {
                Some(path) => load_prompts(path, &vocab, &m)?,
                None => PromptParams::init(m.config(), cfg.k, cfg.seed)?,
            };
            let report = if stage == Stage::PromptInit {
                training::prompt_init_train(&m, &mut p, &pairs, &[], tc)?
            } else {
                training::prompt_tune(&m, &mut p, &pairs, &[], tc)?
            };
            checkpoint::save(out, &m, Some(&p), &vocab.hash())?;
            report
        }
    };
    report.write_log(&log)?;
    println!(
        "{}: {} epochs, selected epoch {}, final train loss {:.4}",
        stage.name(),
        report.log.len(),
        report.selected_epoch,
        report.log.last().map_or(f64::NAN, |l| l.train_loss)
    );
    Ok(())
}

fn datagen(
    kind: KindArg,
    model: &Path,
    prompts: Option<&Path>,
    config: Option<&Path>,
    corpus: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let vocab = load_vocab(corpus)?;
    let m = load_model(model, &vocab)?.model;
    let train = load_examples(&corpus.join("train.jsonl"))?;
    let candidates =
        datagen::collect_candidates(&m, &vocab, &mrs(&train), &cfg.grammar.slot_inventories, &cfg.datagen)?;
    let data = match kind {
        KindArg::Init => datagen::build_init_dataset(&candidates, cfg.k, cfg.datagen.position_mode)?,
        KindArg::Tune => {
            let p = prompts.map(|path| load_prompts(path, &vocab, &m)).transpose()?;
            datagen::build_prompt_dataset(&m, p.as_ref(), &vocab, &candidates, &cfg.datagen)?
        }
    };
    datagen::validate_examples(&data.examples)?;
    write_jsonl(out, &data.examples)?;
    let provenance = match kind {
        KindArg::Init => Provenance::Init,
        KindArg::Tune => Provenance::Tune,
    };
    println!(
        "{:?} dataset: {} candidates, {} kept, {} discarded",
        provenance,
        data.candidates,
        data.examples.len(),
        data.discarded
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn infer(
    mode: Mode,
    config: Option<&Path>,
    model: &Path,
    prompts: Option<&Path>,
    corpus: &Path,
    input: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let vocab = load_vocab(corpus)?;
    let ck = load_model(model, &vocab)?;
    let p = match prompts {
        Some(path) => Some(load_prompts(path, &vocab, &ck.model)?),
        None => ck.prompts.clone(),
    };
    let input = input.map_or_else(|| corpus.join("test.jsonl"), Path::to_path_buf);
    let examples = load_examples(&input)?;
    let pc = PipelineConfig {
        mode,
        ..cfg.pipeline.clone()
    };
    let batch = pipeline::run_batch(&ck.model, p.as_ref(), &vocab, &mrs(&examples), &pc)?;
    for (i, msg) in &batch.failures {
        eprintln!("input {}: {msg}", i + 1);
    }
    write_jsonl(out, &batch.results)?;
    let corrected = batch.results.iter().filter(|r| r.prompted_input.is_some()).count();
    println!(
        "{}: {} outputs, {} regenerated, {} failed",
        mode.name(),
        batch.results.len(),
        corrected,
        batch.failures.len()
    );
    if batch.failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Shape(format!("{} inputs failed", batch.failures.len())))
    }
}

fn eval(results: &Path, references: &Path, mode: &str, out: Option<&Path>) -> Result<()> {
    let results: Vec<PipelineResult> = read_jsonl(results)?;
    let refs: Vec<Vec<String>> = load_examples(references)?.into_iter().map(|e| e.references).collect();
    let report = evaluate(mode, &results, &refs, 0)?;
    println!(
        "{}: n {} BLEU {:.2} SER initial {:.3}% final {:.3}%",
        report.mode, report.n, report.bleu, report.ser_initial, report.ser_final
    );
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn run_experiment(config: Option<&Path>, seeds: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(n) = seeds {
        cfg.seeds = n;
    }
    let summary = experiment::run(&cfg, out, |msg| eprintln!("{msg}"))?;
    print!("{}", summary.render());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { config, out } => gen_corpus(config.as_deref(), &out),
        Command::Train {
            stage,
            config,
            corpus,
            model,
            prompts,
            data,
            out,
        } => train(
            stage.stage(),
            config.as_deref(),
            &corpus,
            model.as_deref(),
            prompts.as_deref(),
            data.as_deref(),
            &out,
        ),
        Command::Datagen {
            kind,
            model,
            prompts,
            config,
            corpus,
            out,
        } => datagen(kind, &model, prompts.as_deref(), config.as_deref(), &corpus, &out),
        Command::Infer {
            mode,
            config,
            model,
            prompts,
            corpus,
            input,
            out,
        } => infer(
            mode.mode(),
            config.as_deref(),
            &model,
            prompts.as_deref(),
            &corpus,
            input.as_deref(),
            &out,
        ),
        Command::Eval {
            results,
            references,
            mode,
            out,
        } => eval(&results, &references, &mode, out.as_deref()),
        Command::Experiment { config, seeds, out } => run_experiment(config.as_deref(), seeds, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::io("f", std::io::Error::other("x"))), 1);
        let frozen = Error::FrozenViolation {
            stage: "prompt_tune".into(),
            before: "a".into(),
            after: "b".into(),
        };
        assert_eq!(exit_code(&frozen), 3);
        let row = Error::Row {
            row: 2,
            source: Box::new(Error::Config("x".into())),
        };
        assert_eq!(exit_code(&row), 2);
    }

    #[test]
    fn arguments_parse() {
        Cli::try_parse_from(["vcp", "train", "--stage", "prompt-init", "--corpus", "c", "--out", "o"]).unwrap();
        assert!(Cli::try_parse_from(["vcp", "train", "--stage", "bogus", "--corpus", "c", "--out", "o"]).is_err());
    }
}
