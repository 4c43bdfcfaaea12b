//! Corpus BLEU and the aggregate evaluation report.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::checker::{self, normalize, SlotErrorReport};
use crate::error::{Error, Result};
use crate::pipeline::PipelineResult;

pub const MAX_NGRAM: usize = 4;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_default() += 1;
        }
    }
    counts
}

/// Clipped and total n-gram counts summed over the corpus. Each candidate
/// n-gram count is clipped by its maximum count in any one reference.
pub fn modified_precision<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    n: usize,
) -> (usize, usize) {
    let mut clipped = 0;
    let mut total = 0;
    for (cand, refs) in candidates.iter().zip(references) {
        let cand_counts = ngram_counts(cand, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in refs {
            for (gram, c) in ngram_counts(r, n) {
                let slot = max_ref.entry(gram).or_default();
                *slot = (*slot).max(c);
            }
        }
        for (gram, c) in cand_counts {
            total += c;
            clipped += c.min(max_ref.get(gram).copied().unwrap_or(0));
        }
    }
    (clipped, total)
}

fn closest_ref_len<T>(cand_len: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(cand_len), len))
        .unwrap_or(0)
}

/// Corpus-level BLEU-4 on a 0..=100 scale, no smoothing.
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    corpus_bleu_with(candidates, references, false)
}

/// `smooth` adds one to the matched and total counts of every order above
/// one, which keeps tiny debugging corpora off zero.
pub fn corpus_bleu_with<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    smooth: bool,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("BLEU needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::EmptyInput("every candidate needs a reference".into()));
    }

    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }
    let ref_len: usize = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| closest_ref_len(c.len(), r))
        .sum();

    let mut log_sum = 0.0;
    for n in 1..=MAX_NGRAM {
        let (mut matched, mut total) = modified_precision(candidates, references, n);
        if smooth && n > 1 {
            matched += 1;
            total += 1;
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let brevity = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * brevity * (log_sum / MAX_NGRAM as f64).exp())
}

/// BLEU over raw strings, tokenized with the checker's normalizer.
pub fn text_bleu<S: AsRef<str>>(candidates: &[S], references: &[Vec<S>]) -> Result<f64> {
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| normalize(c.as_ref())).collect();
    let refs: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| normalize(r.as_ref())).collect())
        .collect();
    corpus_bleu(&cands, &refs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub mr: String,
    pub final_text: String,
    pub errors_initial: usize,
    pub errors_final: usize,
    pub slots: usize,
}

/// Aggregate scores for one decoding mode over one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub mode: String,
    pub bleu: f64,
    pub ser_initial: f64,
    pub ser_final: f64,
    pub n: usize,
    pub discards: usize,
    /// Reserved; not computed by this toolkit.
    pub meteor: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    #[serde(default)]
    pub per_example: Vec<ExampleScore>,
}

impl Report {
    /// Scores final texts against references; SER is computed over both the
    /// initial and the final checker reports.
    pub fn from_reports(
        mode: &str,
        initial: &[SlotErrorReport],
        finals: &[SlotErrorReport],
        references: &[Vec<String>],
        discards: usize,
    ) -> Result<Self> {
        if initial.len() != finals.len() || finals.len() != references.len() {
            return Err(Error::LengthMismatch(format!(
                "{} initial reports, {} final reports, {} reference sets",
                initial.len(),
                finals.len(),
                references.len()
            )));
        }
        let texts: Vec<&str> = finals.iter().map(|r| r.text.as_str()).collect();
        let refs: Vec<Vec<&str>> = references
            .iter()
            .map(|rs| rs.iter().map(String::as_str).collect())
            .collect();
        let bleu = text_bleu(&texts, &refs)?;
        let per_example = initial
            .iter()
            .zip(finals)
            .map(|(i, f)| ExampleScore {
                mr: f.mr.serialize(),
                final_text: f.text.clone(),
                errors_initial: i.error_count,
                errors_final: f.error_count,
                slots: f.checkable_slots(),
            })
            .collect();
        Ok(Report {
            schema_version: REPORT_SCHEMA_VERSION,
            mode: mode.to_string(),
            bleu,
            ser_initial: checker::ser(initial)?,
            ser_final: checker::ser(finals)?,
            n: finals.len(),
            discards,
            meteor: None,
            rouge_l: None,
            cider: None,
            per_example,
        })
    }
}

/// Scores a batch of pipeline results against their reference sets.
pub fn evaluate(
    mode: &str,
    results: &[PipelineResult],
    references: &[Vec<String>],
    discards: usize,
) -> Result<Report> {
    let initial: Vec<SlotErrorReport> = results.iter().map(|r| r.initial_report.clone()).collect();
    let finals: Vec<SlotErrorReport> = results.iter().map(|r| r.final_report().clone()).collect();
    Report::from_reports(mode, &initial, &finals, references, discards)
}
