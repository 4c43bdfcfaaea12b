//! Prompt training data: perturb training MRs into unseen inputs, keep those
//! the frozen model gets wrong, mark the erroneous slots with prompt tokens
//! and label targets either with the model's own prediction (initialization)
//! or with the best error-free beam hypothesis (tuning).

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checker::{self, SlotErrorReport};
use crate::error::{Error, Result};
use crate::model::decode::{beam_decode, greedy_decode, ScoredOutput};
use crate::model::{Model, PromptParams};
use crate::mr::{parse_mr, MeaningRepresentation, PositionMode, SlotKind};
use crate::training::TrainPair;
use crate::vocab::Vocab;

pub type Inventories = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub k: usize,
    pub beam: usize,
    /// Maximum number of erroneous candidates collected.
    pub limit: usize,
    /// Passes over the source MRs.
    pub max_rounds: usize,
    /// Never resample a valued slot's current value (when alternatives exist).
    pub exclude_original: bool,
    pub position_mode: PositionMode,
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            k: 6,
            beam: 10,
            limit: 2000,
            max_rounds: 5,
            exclude_original: false,
            position_mode: PositionMode::AtSlot,
            seed: 0,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("datagen.{msg}")));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.beam == 0 {
            return bad("beam must be at least 1");
        }
        if self.limit == 0 {
            return bad("limit must be at least 1");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Init,
    Tune,
}

/// One prompt training example; `mr` is stored in its canonical string form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptExample {
    pub prompted_input: String,
    pub target: String,
    pub provenance: Provenance,
    #[serde(with = "crate::mr::as_string")]
    pub mr: MeaningRepresentation,
}

impl PromptExample {
    /// Encoded pair for prompt training.
    pub fn train_pair(&self, vocab: &Vocab) -> TrainPair {
        TrainPair {
            src: vocab.encode(&self.prompted_input),
            tgt: vocab.encode(&self.target),
        }
    }

    /// Encoded pair with the prompt tokens removed from the input.
    pub fn unprompted_pair(&self, vocab: &Vocab) -> TrainPair {
        TrainPair {
            src: vocab.encode(&self.mr.serialize()),
            tgt: vocab.encode(&self.target),
        }
    }
}

/// A perturbed MR whose greedy prediction has slot errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub mr: MeaningRepresentation,
    pub initial: ScoredOutput,
    pub report: SlotErrorReport,
}

impl Candidate {
    pub fn prompted_input(&self, k: usize, mode: PositionMode) -> Result<String> {
        Ok(self
            .mr
            .insert_prompts(&self.report.erroneous_slots(), k, mode)?
            .serialize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<PromptExample>,
    pub candidates: usize,
    pub discarded: usize,
}

/// Resamples every slot value: valued slots from their inventory, boolean
/// slots from yes/no. Empty-valued slots stay empty.
pub fn perturb_mr_with<R: Rng>(
    mr: &MeaningRepresentation,
    inventories: &Inventories,
    exclude_original: bool,
    rng: &mut R,
) -> Result<MeaningRepresentation> {
    let mut out = mr.clone();
    for slot in &mut out.slots {
        if slot.value.is_empty() {
            continue;
        }
        let pick = |options: &[&str], rng: &mut R| -> String {
            let pool: Vec<&str> = if exclude_original && options.len() > 1 {
                options.iter().copied().filter(|v| *v != slot.value).collect()
            } else {
                options.to_vec()
            };
            pool.choose(rng).expect("non-empty pool").to_string()
        };
        let value = match slot.kind {
            SlotKind::Boolean => pick(&["yes", "no"], rng),
            SlotKind::Valued => {
                let inv = inventories
                    .get(&slot.name)
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| Error::MissingInventory(slot.name.clone()))?;
                let options: Vec<&str> = inv.iter().map(String::as_str).collect();
                pick(&options, rng)
            }
        };
        slot.value = value;
    }
    Ok(out)
}

pub fn perturb_mr(
    mr: &MeaningRepresentation,
    inventories: &Inventories,
    seed: u64,
) -> Result<MeaningRepresentation> {
    perturb_mr_with(mr, inventories, false, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Greedy prediction plus its checker verdict.
pub fn predict(
    model: &Model<f32>,
    vocab: &Vocab,
    mr: &MeaningRepresentation,
) -> Result<(ScoredOutput, SlotErrorReport)> {
    let out = greedy_decode(model, None, &vocab.encode(&mr.serialize()), vocab)?;
    let report = checker::check(mr, &out.text);
    Ok((out, report))
}

/// Perturbs `sources` round by round and keeps the inputs whose greedy
/// prediction has slot errors, until `cfg.limit` are found.
pub fn collect_candidates(
    model: &Model<f32>,
    vocab: &Vocab,
    sources: &[MeaningRepresentation],
    inventories: &Inventories,
    cfg: &DatagenConfig,
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::EmptyInput("no source MRs to perturb".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for _ in 0..cfg.max_rounds {
        for mr in sources {
            let mr = perturb_mr_with(mr, inventories, cfg.exclude_original, &mut rng)?;
            let (initial, report) = predict(model, vocab, &mr)?;
            if report.is_clean() {
                continue;
            }
            out.push(Candidate { mr, initial, report });
            if out.len() >= cfg.limit {
                return Ok(out);
            }
        }
    }
    Ok(out)
}

/// Initialization data: the target is the model's own unprompted greedy
/// prediction, errors included.
pub fn build_init_dataset(candidates: &[Candidate], k: usize, mode: PositionMode) -> Result<Dataset> {
    let examples = candidates
        .iter()
        .map(|c| {
            Ok(PromptExample {
                prompted_input: c.prompted_input(k, mode)?,
                target: c.initial.text.clone(),
                provenance: Provenance::Init,
                mr: c.mr.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        candidates: candidates.len(),
        discarded: 0,
        examples,
    })
}

/// Tuning data: beam-decodes each prompted input and keeps the error-free
/// hypothesis with the highest length-normalized log-probability. Candidates
/// without one are discarded and counted. `prompts` are the parameters the
/// prompt tokens are decoded with; without them the unprompted input is used.
pub fn build_prompt_dataset(
    model: &Model<f32>,
    prompts: Option<&PromptParams<f32>>,
    vocab: &Vocab,
    candidates: &[Candidate],
    cfg: &DatagenConfig,
) -> Result<Dataset> {
    cfg.validate()?;
    let mut examples = Vec::new();
    let mut discarded = 0;
    for c in candidates {
        let prompted_input = c.prompted_input(cfg.k, cfg.position_mode)?;
        let src = match prompts {
            Some(_) => vocab.encode(&prompted_input),
            None => vocab.encode(&c.mr.serialize()),
        };
        let hyps = beam_decode(model, prompts, &src, cfg.beam, vocab)?;
        let best = hyps
            .into_iter()
            .filter(|h| checker::check(&c.mr, &h.text).is_clean())
            .fold(None::<ScoredOutput>, |best, h| match best {
                Some(b) if b.normalized_logprob >= h.normalized_logprob => Some(b),
                _ => Some(h),
            });
        match best {
            Some(h) => examples.push(PromptExample {
                prompted_input,
                target: h.text,
                provenance: Provenance::Tune,
                mr: c.mr.clone(),
            }),
            None => discarded += 1,
        }
    }
    Ok(Dataset {
        candidates: candidates.len(),
        discarded,
        examples,
    })
}

/// Checks that every prompted input strips back to its MR and that tune
/// targets are error-free.
pub fn validate_examples(examples: &[PromptExample]) -> Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        let stripped = parse_mr(&crate::mr::strip_prompt_tokens(&ex.prompted_input))?;
        if stripped != ex.mr {
            return Err(Error::Config(format!(
                "example {i}: prompted input does not strip back to its MR"
            )));
        }
        if ex.provenance == Provenance::Tune && !checker::check(&ex.mr, &ex.target).is_clean() {
            return Err(Error::Config(format!("example {i}: tune target has slot errors")));
        }
    }
    Ok(())
}
