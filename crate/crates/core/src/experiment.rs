//! End-to-end comparison: for each instance seed, train the base model,
//! generate prompt data, train the prompt variants and the whole-model
//! ablation, and score every decoding mode on the test split.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{generate_splits, CorpusSplits, Example, ExampleRecord};
use crate::datagen::{self, Candidate, Dataset, DatagenConfig};
use crate::error::{Error, Result};
use crate::io::{write_json, write_jsonl};
use crate::metrics::{evaluate, Report};
use crate::model::decode::greedy_decode;
use crate::model::{checkpoint, Model, PromptParams};
use crate::mr::{MeaningRepresentation, PositionMode};
use crate::pipeline::{self, Mode, PipelineConfig, PipelineResult};
use crate::training::{self, TrainPair};
use crate::vocab::Vocab;

/// Table rows in display order.
pub const ROWS: [&str; 7] = [
    "baseline_greedy",
    "baseline_beam",
    "vcp",
    "no_position",
    "whole_ablation",
    "no_init",
    "direct_sampling",
];

pub fn reference_pairs(vocab: &Vocab, examples: &[Example]) -> Vec<TrainPair> {
    examples
        .iter()
        .flat_map(|e| {
            let src = vocab.encode(&e.mr.serialize());
            e.references.iter().map(move |r| TrainPair {
                src: src.clone(),
                tgt: vocab.encode(r),
            })
        })
        .collect()
}

/// Writes the corpus splits and the vocabulary into `dir`.
pub fn write_corpus(dir: &Path, splits: &CorpusSplits, vocab: &Vocab) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        write_jsonl(&dir.join(format!("{name}.jsonl")), part.iter().map(ExampleRecord::from))?;
    }
    vocab.save(&dir.join("vocab.txt"))
}

pub fn build_corpus(cfg: &RunConfig) -> Result<(CorpusSplits, Vocab)> {
    let splits = generate_splits(&cfg.grammar, cfg.corpus.train, cfg.corpus.val, cfg.corpus.test)?;
    let vocab = Vocab::build(&splits.train, cfg.k)?;
    Ok((splits, vocab))
}

/// Exact-match rate of prompted against unprompted greedy outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoOpRate {
    pub matched: usize,
    pub total: usize,
}

impl NoOpRate {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            return 1.0;
        }
        self.matched as f64 / self.total as f64
    }
}

pub fn no_op_rate(
    model: &Model<f32>,
    prompts: &PromptParams<f32>,
    vocab: &Vocab,
    candidates: &[Candidate],
    k: usize,
    mode: PositionMode,
) -> Result<NoOpRate> {
    let mut matched = 0;
    for c in candidates {
        let src = vocab.encode(&c.prompted_input(k, mode)?);
        let out = greedy_decode(model, Some(prompts), &src, vocab)?;
        matched += usize::from(out.text == c.initial.text);
    }
    Ok(NoOpRate {
        matched,
        total: candidates.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowScore {
    pub ser: f64,
    pub ser_initial: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub seed: u64,
    pub candidates: usize,
    pub init_examples: usize,
    pub tune_examples: usize,
    pub tune_discarded: usize,
    /// No-op agreement of the initialized prompts on perturbed validation MRs.
    pub init_no_op: NoOpRate,
    pub base_checksum: String,
    /// Base checksum after each prompt stage, which must all equal `base_checksum`.
    pub checksums_after_prompt_stages: Vec<String>,
    pub rows: BTreeMap<String, RowScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowStats {
    pub row: String,
    pub ser: Vec<f64>,
    pub bleu: Vec<f64>,
    pub ser_mean: f64,
    pub ser_std: f64,
    pub bleu_mean: f64,
    pub bleu_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub instances: Vec<InstanceSummary>,
    pub table: Vec<RowStats>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl ExperimentSummary {
    pub fn from_instances(instances: Vec<InstanceSummary>) -> Self {
        let table = ROWS
            .iter()
            .map(|&row| {
                let ser: Vec<f64> = instances.iter().map(|i| i.rows[row].ser).collect();
                let bleu: Vec<f64> = instances.iter().map(|i| i.rows[row].bleu).collect();
                let (ser_mean, ser_std) = mean_std(&ser);
                let (bleu_mean, bleu_std) = mean_std(&bleu);
                RowStats {
                    row: row.to_string(),
                    ser,
                    bleu,
                    ser_mean,
                    ser_std,
                    bleu_mean,
                    bleu_std,
                }
            })
            .collect();
        ExperimentSummary { instances, table }
    }

    pub fn row(&self, name: &str) -> Option<&RowStats> {
        self.table.iter().find(|r| r.row == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>16} {:>16}  per-seed SER", "row", "SER % (mean±sd)", "BLEU (mean±sd)");
        for r in &self.table {
            let per: Vec<String> = r.ser.iter().map(|v| format!("{v:.2}")).collect();
            let _ = writeln!(
                out,
                "{:<16} {:>8.3} ± {:<5.3} {:>8.2} ± {:<5.2}  {}",
                r.row,
                r.ser_mean,
                r.ser_std,
                r.bleu_mean,
                r.bleu_std,
                per.join(" ")
            );
        }
        out
    }
}

fn dir(path: PathBuf) -> Result<PathBuf> {
    std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

struct Context<'a> {
    cfg: &'a RunConfig,
    vocab: &'a Vocab,
    splits: &'a CorpusSplits,
    out: PathBuf,
    /// Base checksum after every prompt stage.
    checksums: RefCell<Vec<String>>,
}

impl Context<'_> {
    fn train_prompts(
        &self,
        model: &Model<f32>,
        start: PromptParams<f32>,
        data: &Dataset,
        stage: training::Stage,
        name: &str,
    ) -> Result<PromptParams<f32>> {
        let pairs: Vec<TrainPair> = data.examples.iter().map(|e| e.train_pair(self.vocab)).collect();
        let mut prompts = start;
        let tc = self.cfg.train.get(stage);
        let report = match stage {
            training::Stage::PromptInit => training::prompt_init_train(model, &mut prompts, &pairs, &[], tc)?,
            _ => training::prompt_tune(model, &mut prompts, &pairs, &[], tc)?,
        };
        report.write_log(&self.out.join(format!("{name}_log.jsonl")))?;
        checkpoint::save(&self.out.join(format!("{name}.ckpt")), model, Some(&prompts), &self.vocab.hash())?;
        self.checksums.borrow_mut().push(model.checksum());
        Ok(prompts)
    }

    fn save_dataset(&self, name: &str, data: &Dataset) -> Result<()> {
        write_jsonl(&self.out.join(format!("{name}.jsonl")), &data.examples)
    }

    fn score(&self, row: &str, results: &[PipelineResult]) -> Result<Report> {
        let refs: Vec<Vec<String>> = self.splits.test.iter().map(|e| e.references.clone()).collect();
        let report = evaluate(row, results, &refs, 0)?;
        write_jsonl(&self.out.join(format!("results_{row}.jsonl")), results)?;
        write_json(&self.out.join(format!("report_{row}.json")), &report)?;
        Ok(report)
    }
}

fn batch(
    model: &Model<f32>,
    prompts: Option<&PromptParams<f32>>,
    vocab: &Vocab,
    mrs: &[MeaningRepresentation],
    cfg: &PipelineConfig,
) -> Result<Vec<PipelineResult>> {
    let b = pipeline::run_batch(model, prompts, vocab, mrs, cfg)?;
    match b.failures.first() {
        None => Ok(b.results),
        Some((i, msg)) => Err(Error::Shape(format!("test input {i} failed in {}: {msg}", cfg.mode.name()))),
    }
}

/// Runs one instance; `cfg` is already specialized with `for_instance`.
pub fn run_instance(
    cfg: &RunConfig,
    splits: &CorpusSplits,
    vocab: &Vocab,
    out: &Path,
) -> Result<InstanceSummary> {
    let ctx = Context {
        cfg,
        vocab,
        splits,
        out: dir(out.to_path_buf())?,
        checksums: RefCell::new(Vec::new()),
    };
    let k = cfg.k;
    let mut model = Model::<f32>::new(cfg.model_config(vocab.len()))?;
    let train = reference_pairs(vocab, &splits.train);
    let val = reference_pairs(vocab, &splits.val);
    training::fine_tune(&mut model, &train, &val, &cfg.train.base)?.write_log(&ctx.out.join("base_log.jsonl"))?;
    checkpoint::save(&ctx.out.join("base.ckpt"), &model, None, &vocab.hash())?;
    let base_checksum = model.checksum();

    let sources: Vec<MeaningRepresentation> = splits.train.iter().map(|e| e.mr.clone()).collect();
    let candidates = datagen::collect_candidates(&model, vocab, &sources, &cfg.grammar.slot_inventories, &cfg.datagen)?;
    if candidates.is_empty() {
        return Err(Error::EmptyInput("no erroneous candidates were found".into()));
    }
    let fresh = || PromptParams::<f32>::init(model.config(), k, cfg.seed);
    let at_slot = DatagenConfig {
        position_mode: PositionMode::AtSlot,
        ..cfg.datagen.clone()
    };
    let front = DatagenConfig {
        position_mode: PositionMode::Front,
        ..cfg.datagen.clone()
    };

    let init_set = datagen::build_init_dataset(&candidates, k, PositionMode::AtSlot)?;
    ctx.save_dataset("init", &init_set)?;
    let p_init = ctx.train_prompts(&model, fresh()?, &init_set, training::Stage::PromptInit, "prompt_init")?;
    let tune_set = datagen::build_prompt_dataset(&model, Some(&p_init), vocab, &candidates, &at_slot)?;
    ctx.save_dataset("tune", &tune_set)?;
    let p_vcp = ctx.train_prompts(&model, p_init.clone(), &tune_set, training::Stage::PromptTune, "vcp")?;
    let p_no_init = ctx.train_prompts(&model, fresh()?, &tune_set, training::Stage::PromptTune, "no_init")?;

    let init_front = datagen::build_init_dataset(&candidates, k, PositionMode::Front)?;
    ctx.save_dataset("init_front", &init_front)?;
    let p_init_front =
        ctx.train_prompts(&model, fresh()?, &init_front, training::Stage::PromptInit, "prompt_init_front")?;
    let tune_front = datagen::build_prompt_dataset(&model, Some(&p_init_front), vocab, &candidates, &front)?;
    ctx.save_dataset("tune_front", &tune_front)?;
    let p_front =
        ctx.train_prompts(&model, p_init_front, &tune_front, training::Stage::PromptTune, "no_position")?;

    let mut whole = model.clone();
    let plain: Vec<TrainPair> = tune_set.examples.iter().map(|e| e.unprompted_pair(vocab)).collect();
    training::whole_model_finetune_ablation(&mut whole, &plain, &[], &cfg.train.whole_ablation)?
        .write_log(&ctx.out.join("whole_ablation_log.jsonl"))?;
    checkpoint::save(&ctx.out.join("whole_ablation.ckpt"), &whole, None, &vocab.hash())?;

    let val_sources: Vec<MeaningRepresentation> = splits.val.iter().map(|e| e.mr.clone()).collect();
    let held_out_cfg = DatagenConfig {
        seed: cfg.datagen.seed.wrapping_add(1),
        max_rounds: cfg.held_out_rounds,
        ..at_slot.clone()
    };
    let held_out =
        datagen::collect_candidates(&model, vocab, &val_sources, &cfg.grammar.slot_inventories, &held_out_cfg)?;
    let init_no_op = no_op_rate(&model, &p_init, vocab, &held_out, k, PositionMode::AtSlot)?;

    let mrs: Vec<MeaningRepresentation> = splits.test.iter().map(|e| e.mr.clone()).collect();
    let with = |mode: Mode| PipelineConfig {
        mode,
        ..cfg.pipeline.clone()
    };
    let greedy = batch(&model, None, vocab, &mrs, &with(Mode::BaselineGreedy))?;
    let correct = |prompts: &PromptParams<f32>, mode: Mode| -> Result<Vec<PipelineResult>> {
        greedy
            .iter()
            .map(|r| pipeline::correct(&model, prompts, vocab, r.clone(), &with(mode)))
            .collect()
    };
    let mut rows = BTreeMap::new();
    let mut record = |row: &str, results: &[PipelineResult]| -> Result<()> {
        let r = ctx.score(row, results)?;
        rows.insert(
            row.to_string(),
            RowScore {
                ser: r.ser_final,
                ser_initial: r.ser_initial,
                bleu: r.bleu,
            },
        );
        Ok(())
    };
    record("baseline_greedy", &greedy)?;
    record("baseline_beam", &batch(&model, None, vocab, &mrs, &with(Mode::BaselineBeam))?)?;
    record("vcp", &correct(&p_vcp, Mode::Vcp)?)?;
    record("no_position", &correct(&p_front, Mode::NoPositionAblation)?)?;
    record("whole_ablation", &batch(&whole, None, vocab, &mrs, &with(Mode::BaselineGreedy))?)?;
    record("no_init", &correct(&p_no_init, Mode::Vcp)?)?;
    record("direct_sampling", &batch(&model, None, vocab, &mrs, &with(Mode::DirectSampling))?)?;

    let summary = InstanceSummary {
        seed: cfg.seed,
        candidates: candidates.len(),
        init_examples: init_set.examples.len(),
        tune_examples: tune_set.examples.len(),
        tune_discarded: tune_set.discarded,
        init_no_op,
        checksums_after_prompt_stages: ctx.checksums.take(),
        base_checksum,
        rows,
    };
    write_json(&ctx.out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Runs `cfg.seeds` instances and writes `summary.json` and `table.txt`.
pub fn run(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&str)) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let out = dir(out.to_path_buf())?;
    let (splits, vocab) = build_corpus(cfg)?;
    write_corpus(&out.join("corpus"), &splits, &vocab)?;
    let mut instances = Vec::with_capacity(cfg.seeds);
    for i in 0..cfg.seeds {
        let inst = cfg.for_instance(i);
        progress(&format!("instance {} (seed {})", i + 1, inst.seed));
        let started = Instant::now();
        let s = run_instance(&inst, &splits, &vocab, &out.join(format!("seed_{}", inst.seed)))?;
        progress(&format!(
            "seed {}: baseline SER {:.2}%, vcp SER {:.2}% ({:.0}s)",
            s.seed,
            s.rows["baseline_greedy"].ser,
            s.rows["vcp"].ser,
            started.elapsed().as_secs_f64()
        ));
        instances.push(s);
    }
    let summary = ExperimentSummary::from_instances(instances);
    write_json(&out.join("summary.json"), &summary)?;
    std::fs::write(out.join("table.txt"), summary.render()).map_err(|e| Error::io(out.join("table.txt"), e))?;
    Ok(summary)
}
