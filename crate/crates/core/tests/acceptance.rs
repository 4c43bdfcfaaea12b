//! Acceptance run: one `[PASS]`/`[FAIL]` line per criterion. Exits non-zero
//! when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcp_core::checker::{self, SlotStatus};
use vcp_core::config::RunConfig;
use vcp_core::corpus::{generate_corpus, GrammarConfig};
use vcp_core::experiment::{self, median, ExperimentSummary};
use vcp_core::metrics::{modified_precision, text_bleu};
use vcp_core::model::decode::{beam, greedy, ModelScorer, StepScorer};
use vcp_core::model::{Model, ModelConfig, Pair, PromptParams, Trainable};
use vcp_core::mr::{parse_mr, MeaningRepresentation, SlotKind};
use vcp_core::training::{prompt_init_train, prompt_tune, Stage, TrainConfig, TrainPair};
use vcp_core::vocab::{EOS, FIRST_PROMPT_ID};

const SER_REDUCTION_MIN: f64 = 0.30;
const BLEU_DROP_MAX: f64 = 2.0;
const BUDGET_SECS: f64 = 45.0 * 60.0;
const NO_OP_MIN: f64 = 0.95;
const GRAD_REL_TOL: f64 = 1e-6;
const GRAD_SAMPLES: usize = 1000;
/// Both gradients below this are roundoff around a structural zero.
const GRAD_ZERO_FLOOR: f64 = 1e-10;
const CHECKER_PAIRS: usize = 500;
const ROUND_TRIP_MRS: usize = 1000;

type Verdict = (bool, String);

fn main() {
    let mut lines: Vec<(&str, Verdict)> = vec![
        ("checker oracle", checker_oracle()),
        ("gradient check", gradient_check()),
        ("decoder contracts", decoder_contracts()),
        ("bleu", bleu_cases()),
        ("parser round trip", parser_round_trip()),
        ("determinism", determinism()),
        ("frozen base (direct)", frozen_direct()),
    ];
    let out = tempfile::tempdir().expect("temp dir");
    let started = Instant::now();
    let summary = experiment::run(&RunConfig::default(), out.path(), |m| eprintln!("  {m}"));
    let secs = started.elapsed().as_secs_f64();
    match summary {
        Ok(s) => {
            eprintln!("{}", s.render());
            lines.push(("ser reduction", ser_reduction(&s, secs)));
            lines.push(("ablation direction", ablation_direction(&s)));
            lines.push(("frozen base (experiment)", frozen_experiment(&s)));
            lines.push(("init no-op", init_no_op(&s)));
        }
        Err(e) => {
            for name in ["ser reduction", "ablation direction", "frozen base (experiment)", "init no-op"] {
                lines.push((name, (false, format!("experiment failed: {e}"))));
            }
        }
    }
    let mut failed = 0;
    for (name, (pass, detail)) in &lines {
        println!("[{}] {name}: {detail}", if *pass { "PASS" } else { "FAIL" });
        failed += usize::from(!pass);
    }
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- experiment

fn ser_reduction(s: &ExperimentSummary, secs: f64) -> Verdict {
    let mut reductions = Vec::new();
    let mut all_lower = true;
    let mut worst_drop = f64::NEG_INFINITY;
    let mut per_seed = Vec::new();
    for inst in &s.instances {
        let base = &inst.rows["baseline_greedy"];
        let vcp = &inst.rows["vcp"];
        all_lower &= vcp.ser < base.ser;
        reductions.push(if base.ser > 0.0 { (base.ser - vcp.ser) / base.ser } else { 0.0 });
        worst_drop = worst_drop.max(base.bleu - vcp.bleu);
        per_seed.push(format!("seed {} {:.2}%->{:.2}%", inst.seed, base.ser, vcp.ser));
    }
    let med = median(&reductions);
    let pass = s.instances.len() == 3
        && all_lower
        && med >= SER_REDUCTION_MIN
        && worst_drop <= BLEU_DROP_MAX
        && secs <= BUDGET_SECS;
    (
        pass,
        format!(
            "{}; median reduction {:.1}% (min {:.0}%), strictly lower every seed: {all_lower}, \
             worst BLEU drop {worst_drop:.2} (max {BLEU_DROP_MAX}), {:.1} min (max {:.0})",
            per_seed.join(", "),
            100.0 * med,
            100.0 * SER_REDUCTION_MIN,
            secs / 60.0,
            BUDGET_SECS / 60.0
        ),
    )
}

fn ablation_direction(s: &ExperimentSummary) -> Verdict {
    let med = |row: &str| median(&s.row(row).expect("row present").ser);
    let rows: BTreeMap<&str, f64> = experiment::ROWS.iter().map(|&r| (r, med(r))).collect();
    let (vcp, base, no_pos, no_init) = (
        rows["vcp"],
        rows["baseline_greedy"],
        rows["no_position"],
        rows["no_init"],
    );
    let ordering = vcp <= no_pos && no_pos <= base && vcp <= no_init;
    let table: Vec<String> = rows.iter().map(|(r, v)| format!("{r} {v:.2}")).collect();
    (
        vcp < base,
        format!(
            "median SER %: {}; vcp <= no_position <= baseline and vcp <= no_init: {ordering}",
            table.join(", ")
        ),
    )
}

fn frozen_experiment(s: &ExperimentSummary) -> Verdict {
    let stages: usize = s.instances.iter().map(|i| i.checksums_after_prompt_stages.len()).sum();
    let intact = s.instances.iter().all(|i| {
        !i.checksums_after_prompt_stages.is_empty()
            && i.checksums_after_prompt_stages.iter().all(|c| *c == i.base_checksum)
    });
    (intact, format!("{stages} prompt-stage checksums across {} seeds match the base", s.instances.len()))
}

fn init_no_op(s: &ExperimentSummary) -> Verdict {
    let matched: usize = s.instances.iter().map(|i| i.init_no_op.matched).sum();
    let total: usize = s.instances.iter().map(|i| i.init_no_op.total).sum();
    let rate = if total == 0 { 0.0 } else { matched as f64 / total as f64 };
    let per: Vec<String> = s
        .instances
        .iter()
        .map(|i| format!("seed {} {}/{}", i.seed, i.init_no_op.matched, i.init_no_op.total))
        .collect();
    (
        total > 0 && rate >= NO_OP_MIN,
        format!("{matched}/{total} = {:.1}% (min {:.0}%); {}", 100.0 * rate, 100.0 * NO_OP_MIN, per.join(", ")),
    )
}

// ------------------------------------------------------------ checker oracle

/// Rules restated from the checker's contract, scanned by brute force.
mod oracle {
    const CUES: [&str; 15] = [
        "not", "no", "n't", "never", "without", "lacks", "lack", "isn't", "doesn't", "cannot", "can't",
        "won't", "neither", "nor", "non",
    ];
    const BEFORE: usize = 4;
    const AFTER: usize = 2;

    pub fn tokens(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut w = String::new();
            for c in word.chars() {
                let c = if c == '\u{2019}' { '\'' } else { c };
                if c.is_alphanumeric() || c == '\'' {
                    w.extend(c.to_lowercase());
                }
            }
            if !w.is_empty() {
                out.push(w);
            }
        }
        out
    }

    pub fn valued_present(value: &str, text: &str) -> bool {
        let needle = tokens(value);
        if needle.is_empty() {
            return true;
        }
        let hay = tokens(text);
        (0..hay.len()).any(|i| i + needle.len() <= hay.len() && (0..needle.len()).all(|j| hay[i + j] == needle[j]))
    }

    fn cue(t: &str) -> bool {
        CUES.contains(&t) || t.ends_with("n't")
    }

    /// Returns (missing, contradicted) for a yes/no slot whose noun is given.
    pub fn boolean(noun: &str, yes: bool, text: &str) -> (bool, bool) {
        let toks = tokens(text);
        let Some(at) = toks.iter().position(|t| t == noun) else {
            return (yes, false);
        };
        let mut negated = false;
        for (j, t) in toks.iter().enumerate() {
            let near = (j < at && at - j <= BEFORE) || (j > at && j - at <= AFTER);
            negated |= near && cue(t);
        }
        (false, negated == yes)
    }
}

fn checker_oracle() -> Verdict {
    let slots = [("has_linux_release", "linux"), ("available_on_steam", "steam")];
    let names = [
        "Tom Clancy is here .",
        "tom clancy is here .",
        "TOM CLANCY, again .",
        "Tom's clancy game .",
        "a game .",
    ];
    let phrases = |n: &str| -> Vec<String> {
        let mut v = vec![
            String::new(),
            format!("it runs on {n} ."),
            format!("it is on {}.", n.to_uppercase()),
            format!("{n}, yes ."),
            format!("it has {n}s support ."),
        ];
        for d in 0..7 {
            let gap = "very ".repeat(d);
            v.push(format!("it is not {gap}on {n} ."));
        }
        for d in 0..3 {
            let gap = "x ".repeat(d);
            v.push(format!("{n} {gap}never ."));
        }
        v.push(format!("it isn't on {n} ."));
        v.push(format!("it wasn\u{2019}t out for {n} ."));
        v.push(format!("no {n} port ."));
        v.push(format!("without {n} ."));
        v.push(format!("{n} is fine but not {n} ."));
        v.push(format!("not on {n} but on {n} ."));
        v.push(format!("lacks a proper {n} client ."));
        v.push(format!("{n} : non native ."));
        v.push(format!("nothing on {n} ."));
        v.push(format!("no no no no no sure {n} ."));
        v
    };
    let mut agree = 0;
    let mut total = 0;
    let mut matrix: BTreeMap<(bool, &str), usize> = BTreeMap::new();
    let mut first_mismatch = None;
    for (slot, noun) in slots {
        for value in ["yes", "no"] {
            for name in names {
                for phrase in phrases(noun) {
                    let mr = MeaningRepresentation::new("recommend", [("name", "Tom Clancy"), (slot, value)]).unwrap();
                    let text = format!("{name} {phrase}");
                    let report = checker::check(&mr, &text);
                    let name_ok = oracle::valued_present("Tom Clancy", &text);
                    let (missing, contradicted) = oracle::boolean(noun, value == "yes", &text);
                    let want = [
                        if name_ok { SlotStatus::Ok } else { SlotStatus::Missing },
                        if missing {
                            SlotStatus::Missing
                        } else if contradicted {
                            SlotStatus::Contradicted
                        } else {
                            SlotStatus::Ok
                        },
                    ];
                    let got: Vec<SlotStatus> = report.verdicts.iter().map(|v| v.status).collect();
                    let mention = !oracle::tokens(&text).iter().all(|t| t != noun);
                    let kind = match (mention, contradicted) {
                        (false, _) => "absent",
                        (true, c) if c != (value == "yes") => "plain",
                        _ => "negated",
                    };
                    *matrix.entry((value == "yes", kind)).or_default() += 1;
                    let want_errors = want.iter().filter(|s| **s != SlotStatus::Ok).count();
                    if got == want && report.error_count == want_errors {
                        agree += 1;
                    } else if first_mismatch.is_none() {
                        first_mismatch = Some(format!("{text:?}: checker {got:?}, oracle {want:?}"));
                    }
                    total += 1;
                }
            }
        }
    }
    let cells = matrix.len();
    let pass = total == CHECKER_PAIRS && agree == total && cells == 6;
    let mut detail = format!("{agree}/{total} pairs agree; yes/no x mention x negation cells covered: {cells}/6");
    if let Some(m) = first_mismatch {
        detail.push_str(&format!("; first mismatch {m}"));
    }
    (pass, detail)
}

// ------------------------------------------------------------ gradient check

fn grad_config(prompt_in_decoder: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        prompt_tokens: 3,
        d_model: 8,
        heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        ff_dim: 12,
        max_len: 10,
        dropout: 0.0,
        seed: 21,
        prompt_in_decoder,
    }
}

fn five_point(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < GRAD_ZERO_FLOOR {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn gradient_check() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut above_floor = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let p = |i: u32| FIRST_PROMPT_ID + i;
    let data = [
        (vec![7, p(0), p(1), 9, 10], vec![11, 12, 13]),
        (vec![9, 14, 15, 8], vec![7, 7]),
        (vec![p(0), p(1), p(2), 12], vec![15, 9, 10, 11]),
    ];
    let pairs: Vec<Pair> = data.iter().map(|(s, t)| Pair { src: s, tgt: t }).collect();
    for prompt_in_decoder in [false, true] {
        let c = grad_config(prompt_in_decoder);
        let mut model = Model::<f64>::new(c.clone()).unwrap();
        let mut prompts = PromptParams::<f64>::zeros(&c, 3).unwrap();
        for v in prompts.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let (_, grads) = model
            .loss_and_grad(Some(&prompts), &pairs, Trainable { base: true, prompt: true }, None)
            .unwrap();
        let (gb, gp) = (grads.base.unwrap(), grads.prompt.unwrap());
        for s in 0..GRAD_SAMPLES / 2 {
            let h = 1e-3;
            let (a, n) = if s % 5 == 4 {
                let i = rng.random_range(0..gp.len());
                let x = prompts.data()[i];
                let n = five_point(
                    &mut |v| {
                        prompts.data_mut()[i] = v;
                        model.loss(Some(&prompts), &pairs).unwrap()
                    },
                    x,
                    h,
                );
                prompts.data_mut()[i] = x;
                (gp[i], n)
            } else {
                let i = rng.random_range(0..gb.len());
                let x = model.params()[i];
                let n = five_point(
                    &mut |v| {
                        model.params_mut()[i] = v;
                        model.loss(Some(&prompts), &pairs).unwrap()
                    },
                    x,
                    h,
                );
                model.params_mut()[i] = x;
                (gb[i], n)
            };
            worst = worst.max(rel_err(a, n));
            above_floor += usize::from(a.abs().max(n.abs()) >= GRAD_ZERO_FLOOR);
            checked += 1;
        }
    }
    (
        checked >= GRAD_SAMPLES && worst <= GRAD_REL_TOL && above_floor * 2 >= checked,
        format!(
            "{checked} sampled parameters (base and prompt, with and without decoder prefix), \
             worst relative error {worst:.2e} (max {GRAD_REL_TOL:.0e}), {above_floor} above the {GRAD_ZERO_FLOOR:.0e} floor"
        ),
    )
}

// ------------------------------------------------------------ frozen base

fn frozen_direct() -> Verdict {
    let c = ModelConfig {
        vocab_size: 20,
        prompt_tokens: 2,
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_dim: 16,
        max_len: 8,
        dropout: 0.1,
        seed: 3,
        prompt_in_decoder: true,
    };
    let model = Model::<f32>::new(c.clone()).unwrap();
    let bits = |m: &Model<f32>| m.params().iter().map(|v| v.to_bits()).collect::<Vec<u32>>();
    let before = (model.checksum(), bits(&model));
    let mut prompts = PromptParams::<f32>::init(&c, 2, 3).unwrap();
    let start = prompts.checksum();
    let data: Vec<TrainPair> = (0..12u32)
        .map(|i| TrainPair {
            src: vec![6 + i % 5, FIRST_PROMPT_ID, FIRST_PROMPT_ID + 1, 12 + i % 7],
            tgt: vec![10 + i % 9, 8],
        })
        .collect();
    let run = |stage: Stage, prompts: &mut PromptParams<f32>| {
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::defaults(stage) };
        match stage {
            Stage::PromptInit => prompt_init_train(&model, prompts, &data, &[], &cfg),
            _ => prompt_tune(&model, prompts, &data, &[], &cfg),
        }
    };
    let init = run(Stage::PromptInit, &mut prompts);
    let after_init = (model.checksum(), bits(&model));
    let tune = run(Stage::PromptTune, &mut prompts);
    let after_tune = (model.checksum(), bits(&model));
    let ok = init.is_ok() && tune.is_ok() && before == after_init && before == after_tune && prompts.checksum() != start;
    (
        ok,
        format!(
            "base bits identical after prompt init ({}) and tune ({}); prompts changed: {}",
            before == after_init,
            before == after_tune,
            prompts.checksum() != start
        ),
    )
}

// ------------------------------------------------------------ decoders

/// Three symbols: 0 and 1 are words, 2 is end of sequence. Logits depend on
/// the generated prefix through a fixed table.
struct Toy;

impl Toy {
    fn logprobs(prefix: &[u32]) -> [f64; 3] {
        let l = match prefix {
            [] => [1.0, 0.9, -1.0],
            [0] => [-0.5, 0.2, 1.0],
            [1] => [1.5, -2.0, 0.1],
            [.., a, b] => [0.3 * *a as f64, -0.2 * *b as f64, 2.0],
            [_] => [0.0, 0.0, 0.0],
        };
        let lse = l.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        l.map(|v| v - lse)
    }
}

const TOY_MAX_LEN: usize = 3;

impl StepScorer for Toy {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        3
    }

    fn max_len(&self) -> usize {
        TOY_MAX_LEN
    }

    fn start(&self) -> Vec<u32> {
        Vec::new()
    }

    fn advance(&self, states: &mut [Vec<u32>], tokens: &[u32]) -> vcp_core::Result<Vec<f64>> {
        let mut out = Vec::new();
        for (s, &t) in states.iter_mut().zip(tokens) {
            s.push(t);
            out.extend(Self::logprobs(&s[1..]));
        }
        Ok(out)
    }
}

/// Every complete output with its normalized score: sequences ended by EOS
/// within the step limit, plus unfinished ones cut at the limit.
fn toy_enumeration() -> Vec<(Vec<u32>, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<u32>::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let dist = Toy::logprobs(&prefix);
        out.push((prefix.clone(), (lp + dist[EOS as usize]) / (prefix.len() + 1) as f64));
        for t in 0..2u32 {
            let mut next = prefix.clone();
            next.push(t);
            let score = lp + dist[t as usize];
            if next.len() == TOY_MAX_LEN {
                let len = next.len() as f64;
                out.push((next, score / len));
            } else {
                stack.push((next, score));
            }
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

fn decoder_contracts() -> Verdict {
    let c = ModelConfig {
        vocab_size: 30,
        prompt_tokens: 3,
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_dim: 16,
        max_len: 12,
        dropout: 0.0,
        seed: 17,
        prompt_in_decoder: false,
    };
    let model = Model::<f32>::new(c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut equal = 0;
    for _ in 0..100 {
        let len = rng.random_range(1..10);
        let src: Vec<u32> = (0..len).map(|_| rng.random_range(7..30)).collect();
        let scorer = ModelScorer::new(&model, None, &src).unwrap();
        let g = greedy(&scorer).unwrap();
        let b = beam(&scorer, 1).unwrap();
        equal += usize::from(b.len() == 1 && b[0].tokens == g.tokens);
    }
    let found: Vec<Vec<u32>> = beam(&Toy, 2).unwrap().into_iter().map(|h| h.tokens).collect();
    let exhaustive: Vec<Vec<u32>> = toy_enumeration().into_iter().take(2).map(|e| e.0).collect();
    (
        equal == 100 && found == exhaustive,
        format!("beam 1 == greedy on {equal}/100 inputs; toy beam 2 {found:?}, exhaustive top 2 {exhaustive:?}"),
    )
}

// ------------------------------------------------------------ BLEU

fn bleu_cases() -> Verdict {
    let corpus = generate_corpus(&GrammarConfig::default(), 50).unwrap();
    let refs: Vec<Vec<String>> = corpus.iter().map(|e| e.references.clone()).collect();
    let identity: Vec<String> = corpus.iter().map(|e| e.references[0].clone()).collect();
    let id_score = text_bleu(&identity, &refs).unwrap();

    let words = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let (clipped, total) = modified_precision(
        &[words("the the the the the the the")],
        &[vec![words("the cat is on the mat")]],
        1,
    );

    // Candidates: each reference with its last two words dropped.
    let cands: Vec<String> = identity
        .iter()
        .map(|r| {
            let w: Vec<&str> = r.split(' ').collect();
            w[..w.len().saturating_sub(2)].join(" ")
        })
        .collect();
    let score = text_bleu(&cands, &refs).unwrap();
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let pc: Vec<String> = order.iter().map(|&i| cands[i].clone()).collect();
    let pr: Vec<Vec<String>> = order.iter().map(|&i| refs[i].clone()).collect();
    let permuted = text_bleu(&pc, &pr).unwrap();
    let pass = id_score == 100.0 && (clipped, total) == (2, 7) && (score - permuted).abs() < 1e-9 && score < 100.0;
    (
        pass,
        format!(
            "identity {id_score:.1}; clipped unigram {clipped}/{total}; 50-example corpus {score:.6} vs permuted {permuted:.6}"
        ),
    )
}

// ------------------------------------------------------------ parser

/// Intent and (name, value, kind) per slot.
type Structure = (String, Vec<(String, String, SlotKind)>);

fn parser_round_trip() -> Verdict {
    let corpus = generate_corpus(&GrammarConfig::default(), ROUND_TRIP_MRS).unwrap();
    let round_trips = corpus
        .iter()
        .filter(|e| parse_mr(&e.mr.serialize()).is_ok_and(|m| m == e.mr))
        .count();

    let structure = |text: &str| -> Option<Structure> {
        let mr = parse_mr(text).ok()?;
        Some((
            mr.intent.clone(),
            mr.slots.iter().map(|s| (s.name.clone(), s.value.clone(), s.kind)).collect(),
        ))
    };
    let s = |a: &str, b: &str, k: SlotKind| (a.to_string(), b.to_string(), k);
    let quoted = [
        (
            "recommend(name[Tom Clancy], release_year[1999], has_linux_release[yes])",
            (
                "recommend".to_string(),
                vec![
                    s("name", "Tom Clancy", SlotKind::Valued),
                    s("release_year", "1999", SlotKind::Valued),
                    s("has_linux_release", "yes", SlotKind::Boolean),
                ],
            ),
        ),
        (
            "request attribute(esrb[])",
            ("request_attribute".to_string(), vec![s("esrb", "", SlotKind::Valued)]),
        ),
        ("inform()", ("inform".to_string(), vec![])),
    ];
    let quoted_ok = quoted.iter().filter(|(t, want)| structure(t).as_ref() == Some(want)).count();
    (
        round_trips == ROUND_TRIP_MRS && quoted_ok == quoted.len(),
        format!("{round_trips}/{ROUND_TRIP_MRS} generated MRs round-trip; {quoted_ok}/3 quoted strings parse as stated"),
    )
}

// ------------------------------------------------------------ determinism

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig {
        seeds: 1,
        held_out_rounds: 2,
        ..RunConfig::default()
    };
    cfg.corpus.train = 1000;
    cfg.corpus.val = 20;
    cfg.corpus.test = 20;
    cfg.model.d_model = 32;
    cfg.model.heads = 2;
    cfg.model.enc_layers = 1;
    cfg.model.dec_layers = 1;
    cfg.model.ff_dim = 64;
    cfg.train.base.learning_rate = 0.005;
    cfg.train.base.epochs = 10;
    cfg.train.prompt_init.epochs = 2;
    cfg.train.prompt_tune.epochs = 2;
    cfg.train.whole_ablation.epochs = 2;
    cfg.datagen.limit = 20;
    cfg.datagen.max_rounds = 2;
    cfg.pipeline.beam = 3;
    cfg.pipeline.sample_n = 3;
    cfg
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut dirs = vec![root.to_path_buf()];
    while let Some(d) = dirs.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                dirs.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Verdict {
    let cfg = tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if let Err(e) = experiment::run(&cfg, a.path(), |_| {}).and_then(|_| experiment::run(&cfg, b.path(), |_| {})) {
        return (false, format!("small run failed: {e}"));
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    (
        fa == fb && !fa.is_empty() && differing.is_empty(),
        format!(
            "{} output files from two small end-to-end runs, {} differ{}",
            fa.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    )
}
