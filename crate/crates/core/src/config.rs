//! The single JSON document that configures every stage of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::GrammarConfig;
use crate::datagen::DatagenConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::PipelineConfig;
use crate::training::{Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            train: 3000,
            val: 300,
            test: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfigs {
    #[serde(default = "base_defaults")]
    pub base: TrainConfig,
    #[serde(default = "init_defaults")]
    pub prompt_init: TrainConfig,
    #[serde(default = "tune_defaults")]
    pub prompt_tune: TrainConfig,
    #[serde(default = "whole_defaults")]
    pub whole_ablation: TrainConfig,
}

fn base_defaults() -> TrainConfig {
    TrainConfig::defaults(Stage::Base)
}

fn init_defaults() -> TrainConfig {
    TrainConfig::defaults(Stage::PromptInit)
}

/// Desk-scale tuning schedule: the tune sets hold tens to hundreds of
/// examples, so the stage table's 5 epochs give too few optimizer steps.
fn tune_defaults() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.03,
        epochs: 30,
        ..TrainConfig::defaults(Stage::PromptTune)
    }
}

fn whole_defaults() -> TrainConfig {
    TrainConfig::defaults(Stage::WholeModelAblation)
}

impl Default for StageConfigs {
    fn default() -> Self {
        StageConfigs {
            base: base_defaults(),
            prompt_init: init_defaults(),
            prompt_tune: tune_defaults(),
            whole_ablation: whole_defaults(),
        }
    }
}

impl StageConfigs {
    pub fn get(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Base => &self.base,
            Stage::PromptInit => &self.prompt_init,
            Stage::PromptTune => &self.prompt_tune,
            Stage::WholeModelAblation => &self.whole_ablation,
        }
    }

    fn all_mut(&mut self) -> [&mut TrainConfig; 4] {
        [
            &mut self.base,
            &mut self.prompt_init,
            &mut self.prompt_tune,
            &mut self.whole_ablation,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the first experiment instance; instance `i` uses `seed + i`.
    pub seed: u64,
    /// Number of independently trained instances in `experiment`.
    pub seeds: usize,
    /// Prompt tokens per erroneous slot; must match `datagen.k` and `pipeline.k`.
    pub k: usize,
    pub corpus: CorpusSizes,
    pub grammar: GrammarConfig,
    /// `vocab_size` and `prompt_tokens` are filled in from the vocabulary.
    pub model: ModelConfig,
    pub train: StageConfigs,
    pub datagen: DatagenConfig,
    pub pipeline: PipelineConfig,
    /// Perturbation rounds over the validation MRs when measuring the
    /// prompt-initialization no-op rate in `experiment`.
    pub held_out_rounds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: 3,
            k: 6,
            corpus: CorpusSizes::default(),
            grammar: GrammarConfig::default(),
            model: ModelConfig::default(),
            train: StageConfigs::default(),
            datagen: DatagenConfig::default(),
            pipeline: PipelineConfig::default(),
            held_out_rounds: 30,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validates every section so no stage starts on a config a later stage
    /// would reject.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seeds == 0 {
            return bad("seeds must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.held_out_rounds == 0 {
            return bad("held_out_rounds must be at least 1".into());
        }
        if self.datagen.k != self.k {
            return bad(format!("datagen.k ({}) must equal k ({})", self.datagen.k, self.k));
        }
        if self.pipeline.k != self.k {
            return bad(format!("pipeline.k ({}) must equal k ({})", self.pipeline.k, self.k));
        }
        let CorpusSizes { train, val, test } = self.corpus;
        if train == 0 || val == 0 || test == 0 {
            return bad("corpus.train, corpus.val and corpus.test must be at least 1".into());
        }
        self.grammar.validate()?;
        let mut model = self.model_config(crate::vocab::RESERVED.len() + self.k + 1);
        model.seed = self.seed;
        model.validate()?;
        for (key, stage) in [
            ("train.base", Stage::Base),
            ("train.prompt_init", Stage::PromptInit),
            ("train.prompt_tune", Stage::PromptTune),
            ("train.whole_ablation", Stage::WholeModelAblation),
        ] {
            let cfg = self.train.get(stage);
            if cfg.stage != stage {
                return bad(format!("{key}.stage must be {}", stage.name()));
            }
            cfg.validate()?;
        }
        self.datagen.validate()?;
        self.pipeline.validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            prompt_tokens: self.k,
            ..self.model.clone()
        }
    }

    /// The configuration of experiment instance `index`: every stage seed is
    /// set to `seed + index`. Corpus generation keeps `grammar.seed`.
    pub fn for_instance(&self, index: usize) -> RunConfig {
        let seed = self.seed + index as u64;
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.model.seed = seed;
        for t in cfg.train.all_mut() {
            t.seed = seed;
        }
        cfg.datagen.seed = seed;
        cfg.pipeline.seed = seed;
        cfg
    }
}
