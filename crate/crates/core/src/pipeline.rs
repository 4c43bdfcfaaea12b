//! Generate, verify, regenerate: greedy initial prediction, slot check, and
//! a prompted regeneration for inputs with errors; plus the baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checker::{self, SlotErrorReport};
use crate::error::{Error, Result};
use crate::model::decode::{beam_decode, greedy_decode, sample_decode, ScoredOutput};
use crate::model::{Model, PromptParams};
use crate::mr::{MeaningRepresentation, PositionMode};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vcp,
    BaselineGreedy,
    BaselineBeam,
    NoPositionAblation,
    DirectSampling,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Vcp => "vcp",
            Mode::BaselineGreedy => "baseline_greedy",
            Mode::BaselineBeam => "baseline_beam",
            Mode::NoPositionAblation => "no_position_ablation",
            Mode::DirectSampling => "direct_sampling",
        }
    }

    pub fn needs_prompts(self) -> bool {
        matches!(self, Mode::Vcp | Mode::NoPositionAblation)
    }

    pub fn position_mode(self) -> PositionMode {
        match self {
            Mode::NoPositionAblation => PositionMode::Front,
            _ => PositionMode::AtSlot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub k: usize,
    pub max_rounds: usize,
    pub beam: usize,
    pub sample_n: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::Vcp,
            k: 6,
            max_rounds: 1,
            beam: 10,
            sample_n: 10,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn with_mode(mode: Mode) -> Self {
        PipelineConfig {
            mode,
            ..PipelineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("pipeline.{msg}")));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        match self.mode {
            Mode::BaselineBeam if self.beam == 0 => bad("beam must be at least 1"),
            Mode::DirectSampling if self.sample_n == 0 => bad("sample_n must be at least 1"),
            Mode::DirectSampling if !(self.temperature > 0.0 && self.temperature.is_finite()) => {
                bad("temperature must be positive")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    #[serde(with = "crate::mr::as_string")]
    pub mr: MeaningRepresentation,
    pub initial: ScoredOutput,
    pub initial_report: SlotErrorReport,
    pub prompted_input: Option<String>,
    pub regenerated: Option<ScoredOutput>,
    pub regenerated_report: Option<SlotErrorReport>,
    pub final_text: String,
    pub rounds_used: usize,
}

impl PipelineResult {
    fn initial_only(mr: &MeaningRepresentation, initial: ScoredOutput) -> Self {
        let initial_report = checker::check(mr, &initial.text);
        PipelineResult {
            mr: mr.clone(),
            final_text: initial.text.clone(),
            initial,
            initial_report,
            prompted_input: None,
            regenerated: None,
            regenerated_report: None,
            rounds_used: 0,
        }
    }

    pub fn final_report(&self) -> &SlotErrorReport {
        self.regenerated_report.as_ref().unwrap_or(&self.initial_report)
    }
}

fn encode_mr(vocab: &Vocab, mr: &MeaningRepresentation) -> Vec<u32> {
    vocab.encode(&mr.serialize())
}

pub fn greedy_baseline(model: &Model<f32>, vocab: &Vocab, mr: &MeaningRepresentation) -> Result<PipelineResult> {
    let initial = greedy_decode(model, None, &encode_mr(vocab, mr), vocab)?;
    Ok(PipelineResult::initial_only(mr, initial))
}

/// Top-1 of beam search as the only output.
pub fn beam_baseline(
    model: &Model<f32>,
    vocab: &Vocab,
    mr: &MeaningRepresentation,
    beam: usize,
) -> Result<PipelineResult> {
    let top = beam_decode(model, None, &encode_mr(vocab, mr), beam, vocab)?
        .into_iter()
        .next()
        .expect("beam search returns at least one hypothesis");
    Ok(PipelineResult::initial_only(mr, top))
}

/// Runs the verify-and-regenerate loop on top of a greedy initial result.
pub fn correct(
    model: &Model<f32>,
    prompts: &PromptParams<f32>,
    vocab: &Vocab,
    initial: PipelineResult,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    let mut result = initial;
    while result.rounds_used < cfg.max_rounds && !result.final_report().is_clean() {
        let missing = result.final_report().erroneous_slots();
        let prompted = result
            .mr
            .insert_prompts(&missing, cfg.k, cfg.mode.position_mode())?
            .serialize();
        let regen = greedy_decode(model, Some(prompts), &vocab.encode(&prompted), vocab)?;
        result.regenerated_report = Some(checker::check(&result.mr, &regen.text));
        result.final_text = regen.text.clone();
        result.regenerated = Some(regen);
        result.prompted_input = Some(prompted);
        result.rounds_used += 1;
    }
    Ok(result)
}

pub fn vcp_infer(
    model: &Model<f32>,
    prompts: &PromptParams<f32>,
    vocab: &Vocab,
    mr: &MeaningRepresentation,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    if !cfg.mode.needs_prompts() {
        return Err(Error::Config(format!(
            "pipeline.mode {} does not regenerate with prompts",
            cfg.mode.name()
        )));
    }
    correct(model, prompts, vocab, greedy_baseline(model, vocab, mr)?, cfg)
}

/// Picks the sample with the fewest slot errors; ties go to the higher
/// normalized log-probability, then to the earlier sample.
pub fn select_sample(
    mr: &MeaningRepresentation,
    samples: Vec<ScoredOutput>,
) -> Option<(ScoredOutput, SlotErrorReport)> {
    let mut best: Option<(ScoredOutput, SlotErrorReport)> = None;
    for s in samples {
        let report = checker::check(mr, &s.text);
        let better = match &best {
            None => true,
            Some((b, r)) => {
                report.error_count < r.error_count
                    || (report.error_count == r.error_count && s.normalized_logprob > b.normalized_logprob)
            }
        };
        if better {
            best = Some((s, report));
        }
    }
    best
}

/// Greedy initial output kept for reference; the final text is the best of
/// `sample_n` ancestral samples. `index` selects the per-example stream.
pub fn direct_sampling_baseline(
    model: &Model<f32>,
    vocab: &Vocab,
    mr: &MeaningRepresentation,
    cfg: &PipelineConfig,
    index: u64,
) -> Result<PipelineResult> {
    let mut result = greedy_baseline(model, vocab, mr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let samples = sample_decode(model, &encode_mr(vocab, mr), cfg.sample_n, cfg.temperature, &mut rng, vocab)?;
    let (best, report) = select_sample(mr, samples).expect("sample_n >= 1");
    result.final_text = best.text.clone();
    result.regenerated = Some(best);
    result.regenerated_report = Some(report);
    result.rounds_used = 1;
    Ok(result)
}

/// Applies `cfg.mode` to one MR.
pub fn run_one(
    model: &Model<f32>,
    prompts: Option<&PromptParams<f32>>,
    vocab: &Vocab,
    mr: &MeaningRepresentation,
    cfg: &PipelineConfig,
    index: usize,
) -> Result<PipelineResult> {
    match cfg.mode {
        Mode::BaselineGreedy => greedy_baseline(model, vocab, mr),
        Mode::BaselineBeam => beam_baseline(model, vocab, mr, cfg.beam),
        Mode::DirectSampling => direct_sampling_baseline(model, vocab, mr, cfg, index as u64),
        Mode::Vcp | Mode::NoPositionAblation => {
            let prompts = prompts.ok_or_else(|| {
                Error::Config(format!("pipeline.mode {} needs prompt parameters", cfg.mode.name()))
            })?;
            vcp_infer(model, prompts, vocab, mr, cfg)
        }
    }
}

#[derive(Debug)]
pub struct Batch {
    pub results: Vec<PipelineResult>,
    /// Inputs that failed, by position, with the error message.
    pub failures: Vec<(usize, String)>,
}

pub fn run_batch(
    model: &Model<f32>,
    prompts: Option<&PromptParams<f32>>,
    vocab: &Vocab,
    mrs: &[MeaningRepresentation],
    cfg: &PipelineConfig,
) -> Result<Batch> {
    cfg.validate()?;
    if cfg.mode.needs_prompts() && prompts.is_none() {
        return Err(Error::Config(format!(
            "pipeline.mode {} needs prompt parameters",
            cfg.mode.name()
        )));
    }
    let mut results = Vec::with_capacity(mrs.len());
    let mut failures = Vec::new();
    for (i, mr) in mrs.iter().enumerate() {
        match run_one(model, prompts, vocab, mr, cfg, i) {
            Ok(r) => results.push(r),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    Ok(Batch { results, failures })
}
