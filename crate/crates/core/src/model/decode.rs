//! Greedy, beam and ancestral-sampling decoders over any next-token scorer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::prompt::PromptParams;
use super::scalar::Scalar;
use super::transformer::{DecoderCache, EncodedSource, Model};
use crate::error::Result;
use crate::vocab::{Vocab, BOS, EOS};

/// Incremental next-token distribution.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Maximum number of scored steps, EOS included.
    fn max_len(&self) -> usize;

    fn start(&self) -> Self::State;

    /// Feeds `tokens[i]` to `states[i]` and returns the next-token
    /// log-probabilities, `vocab_size` per state.
    fn advance(&self, states: &mut [Self::State], tokens: &[u32]) -> Result<Vec<f64>>;
}

/// A finished hypothesis without its surface text.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, EOS excluded.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    /// Scored steps: the tokens plus EOS when it was produced.
    pub length: usize,
}

impl Hypothesis {
    pub fn normalized_logprob(&self) -> f64 {
        self.logprob / self.length.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutput {
    pub tokens: Vec<u32>,
    pub text: String,
    pub logprob: f64,
    pub normalized_logprob: f64,
}

impl ScoredOutput {
    pub fn new(h: Hypothesis, vocab: &Vocab) -> Self {
        ScoredOutput {
            text: vocab.decode(&h.tokens),
            normalized_logprob: h.normalized_logprob(),
            logprob: h.logprob,
            tokens: h.tokens,
        }
    }
}

/// Lowest index among the maxima.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn greedy<S: StepScorer>(scorer: &S) -> Result<Hypothesis> {
    let mut states = vec![scorer.start()];
    let mut lp = scorer.advance(&mut states, &[BOS])?;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let max_len = scorer.max_len();
    for step in 0..max_len {
        let t = argmax(&lp);
        logprob += lp[t];
        if t as u32 == EOS {
            let length = tokens.len() + 1;
            return Ok(Hypothesis {
                tokens,
                logprob,
                length,
            });
        }
        tokens.push(t as u32);
        if step + 1 == max_len {
            break;
        }
        lp = scorer.advance(&mut states, &[t as u32])?;
    }
    let length = tokens.len();
    Ok(Hypothesis {
        tokens,
        logprob,
        length,
    })
}

/// Length-normalized beam search.
///
/// Each step keeps the `beam - finished` best extensions by cumulative
/// log-probability (ties to the lower hypothesis index, then the lower token
/// id). Extensions ending in EOS are finished; hypotheses still live at
/// `max_len` finish as they are. Returns exactly `beam` hypotheses when that
/// many exist, sorted by normalized log-probability, best first.
pub fn beam<S: StepScorer>(scorer: &S, width: usize) -> Result<Vec<Hypothesis>> {
    assert!(width >= 1, "beam width must be at least 1");
    let v = scorer.vocab_size();
    let max_len = scorer.max_len();
    let mut states = vec![scorer.start()];
    let mut lp = scorer.advance(&mut states, &[BOS])?;
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        let room = width - finished.len();
        if room == 0 || live.is_empty() {
            break;
        }
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (i, (_, score)) in live.iter().enumerate() {
            for t in 0..v {
                cands.push((score + lp[i * v + t], i, t));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(room);

        let mut next_live = Vec::new();
        let mut next_states = Vec::new();
        let mut next_tokens = Vec::new();
        for (score, i, t) in cands {
            let mut tokens = live[i].0.clone();
            if t as u32 == EOS {
                let length = tokens.len() + 1;
                finished.push(Hypothesis {
                    tokens,
                    logprob: score,
                    length,
                });
            } else {
                tokens.push(t as u32);
                next_live.push((tokens, score));
                next_states.push(states[i].clone());
                next_tokens.push(t as u32);
            }
        }
        live = next_live;
        states = next_states;
        if live.is_empty() || step + 1 == max_len || finished.len() == width {
            break;
        }
        lp = scorer.advance(&mut states, &next_tokens)?;
    }
    for (tokens, logprob) in live {
        if finished.len() == width {
            break;
        }
        let length = tokens.len();
        finished.push(Hypothesis {
            tokens,
            logprob,
            length,
        });
    }
    finished.sort_by(|a, b| b.normalized_logprob().total_cmp(&a.normalized_logprob()));
    Ok(finished)
}

/// `n` independent ancestral samples at the given temperature. Scores are
/// the untempered log-probabilities of the sampled tokens.
pub fn sample<S: StepScorer, R: Rng>(
    scorer: &S,
    n: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<Hypothesis>> {
    assert!(temperature > 0.0, "temperature must be positive");
    let v = scorer.vocab_size();
    let max_len = scorer.max_len();
    let mut states = vec![scorer.start(); n];
    let mut lp = scorer.advance(&mut states, &vec![BOS; n])?;
    let mut active: Vec<usize> = (0..n).collect();
    let mut out: Vec<Hypothesis> = (0..n)
        .map(|_| Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            length: 0,
        })
        .collect();

    for step in 0..max_len {
        let mut keep = Vec::new();
        let mut fed = Vec::new();
        for (row, &i) in active.iter().enumerate() {
            let dist = &lp[row * v..(row + 1) * v];
            let t = draw(dist, temperature, rng);
            let h = &mut out[i];
            h.logprob += dist[t];
            h.length += 1;
            if t as u32 != EOS {
                h.tokens.push(t as u32);
                keep.push(row);
                fed.push(t as u32);
            }
        }
        if keep.is_empty() || step + 1 == max_len {
            break;
        }
        let mut next_states: Vec<S::State> = keep.iter().map(|&r| states[r].clone()).collect();
        active = keep.iter().map(|&r| active[r]).collect();
        lp = scorer.advance(&mut next_states, &fed)?;
        states = next_states;
    }
    Ok(out)
}

fn draw<R: Rng>(logprobs: &[f64], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = logprobs.iter().map(|&l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    argmax(&weights)
}

/// Scores continuations of one encoded source with a model.
pub struct ModelScorer<'a, F> {
    model: &'a Model<F>,
    src: EncodedSource<F>,
    max_len: usize,
}

impl<'a, F: Scalar> ModelScorer<'a, F> {
    pub fn new(model: &'a Model<F>, prompts: Option<&PromptParams<F>>, src: &[u32]) -> Result<Self> {
        Ok(ModelScorer {
            model,
            src: model.encode(prompts, src)?,
            max_len: model.config().max_len,
        })
    }

    /// Caps generation below the model's positional limit.
    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len.clamp(1, self.model.config().max_len);
        self
    }
}

impl<F: Scalar> StepScorer for ModelScorer<'_, F> {
    type State = DecoderCache<F>;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn start(&self) -> Self::State {
        self.model.start(&self.src)
    }

    fn advance(&self, states: &mut [Self::State], tokens: &[u32]) -> Result<Vec<f64>> {
        let srcs = vec![&self.src; tokens.len()];
        let lp = self.model.step(&srcs, states, tokens)?;
        Ok(lp.into_iter().map(Scalar::as_f64).collect())
    }
}

pub fn greedy_decode<F: Scalar>(
    model: &Model<F>,
    prompts: Option<&PromptParams<F>>,
    src: &[u32],
    vocab: &Vocab,
) -> Result<ScoredOutput> {
    let scorer = ModelScorer::new(model, prompts, src)?;
    Ok(ScoredOutput::new(greedy(&scorer)?, vocab))
}

pub fn beam_decode<F: Scalar>(
    model: &Model<F>,
    prompts: Option<&PromptParams<F>>,
    src: &[u32],
    width: usize,
    vocab: &Vocab,
) -> Result<Vec<ScoredOutput>> {
    let scorer = ModelScorer::new(model, prompts, src)?;
    Ok(beam(&scorer, width)?
        .into_iter()
        .map(|h| ScoredOutput::new(h, vocab))
        .collect())
}

pub fn sample_decode<F: Scalar, R: Rng>(
    model: &Model<F>,
    src: &[u32],
    n: usize,
    temperature: f64,
    rng: &mut R,
    vocab: &Vocab,
) -> Result<Vec<ScoredOutput>> {
    let scorer = ModelScorer::new(model, None, src)?;
    Ok(sample(&scorer, n, temperature, rng)?
        .into_iter()
        .map(|h| ScoredOutput::new(h, vocab))
        .collect())
}
