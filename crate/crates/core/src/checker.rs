//! Rule-based slot verification and slot error rate.
//!
//! Valued slots must appear as a contiguous run of normalized tokens in the
//! text. Boolean slots are judged by the noun inside the slot name (`steam`
//! for `available_on_steam`) and by whether a negation cue sits near its
//! first mention.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mr::{MeaningRepresentation, Slot, SlotKind};

pub const NEGATION_CUES: [&str; 15] = [
    "not", "no", "n't", "never", "without", "lacks", "lack", "isn't", "doesn't", "cannot",
    "can't", "won't", "neither", "nor", "non",
];

/// Tokens before a mention that may carry its negation.
pub const DEFAULT_NEGATION_WINDOW: usize = 4;
/// Tokens after a mention that may carry its negation.
pub const NEGATION_LOOKAHEAD: usize = 2;

const NOUN_PREFIXES: [&str; 3] = ["has_", "available_on_", "is_"];
const NOUN_SUFFIXES: [&str; 3] = ["_released", "_release", "_available"];

/// Lowercases, drops every character that is not a letter, digit or
/// apostrophe, and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|word| {
            let cleaned: String = word
                .chars()
                .map(|c| if c == '\u{2019}' { '\'' } else { c })
                .filter(|c| c.is_alphanumeric() || *c == '\'')
                .flat_map(char::to_lowercase)
                .collect();
            (!cleaned.is_empty()).then_some(cleaned)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotStatus {
    Ok,
    Missing,
    Contradicted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotVerdict {
    pub slot_name: String,
    pub status: SlotStatus,
    /// Token index of the mention in the normalized text.
    pub evidence: Option<usize>,
}

impl SlotVerdict {
    pub fn is_error(&self) -> bool {
        self.status != SlotStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotErrorReport {
    pub mr: MeaningRepresentation,
    pub text: String,
    pub verdicts: Vec<SlotVerdict>,
    pub error_count: usize,
}

impl SlotErrorReport {
    /// Slots that count toward the SER denominator.
    pub fn checkable_slots(&self) -> usize {
        self.mr.slots.iter().filter(|s| s.is_checkable()).count()
    }

    /// Names of slots judged missing or contradicted, for prompt insertion.
    pub fn erroneous_slots(&self) -> BTreeSet<String> {
        self.verdicts
            .iter()
            .filter(|v| v.is_error())
            .map(|v| v.slot_name.clone())
            .collect()
    }

    pub fn is_clean(&self) -> bool {
        self.error_count == 0
    }
}

/// Verifies every slot of `mr` against `text`.
pub fn check(mr: &MeaningRepresentation, text: &str) -> SlotErrorReport {
    let tokens = normalize(text);
    let verdicts: Vec<SlotVerdict> = mr
        .slots
        .iter()
        .map(|slot| match slot.kind {
            SlotKind::Boolean => check_boolean_slot(slot, &tokens),
            SlotKind::Valued => check_valued_slot(slot, &tokens),
        })
        .collect();
    let error_count = verdicts.iter().filter(|v| v.is_error()).count();
    SlotErrorReport {
        mr: mr.clone(),
        text: text.to_string(),
        verdicts,
        error_count,
    }
}

fn check_valued_slot(slot: &Slot, tokens: &[String]) -> SlotVerdict {
    let needle = normalize(&slot.value);
    let (status, evidence) = if needle.is_empty() {
        (SlotStatus::Ok, None)
    } else {
        match find_subsequence(tokens, &needle) {
            Some(at) => (SlotStatus::Ok, Some(at)),
            None => (SlotStatus::Missing, None),
        }
    };
    SlotVerdict {
        slot_name: slot.name.clone(),
        status,
        evidence,
    }
}

fn find_subsequence(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Judges a yes/no slot from its first noun mention.
///
/// | value | noun absent | mention negated | mention plain |
/// |-------|-------------|-----------------|---------------|
/// | yes   | missing     | contradicted    | ok            |
/// | no    | ok          | ok              | contradicted  |
pub fn check_boolean_slot(slot: &Slot, tokens: &[String]) -> SlotVerdict {
    let noun = match extract_boolean_noun(&slot.name) {
        Ok(noun) => noun,
        // A name with nothing left to look for cannot be verified.
        Err(_) => {
            return SlotVerdict {
                slot_name: slot.name.clone(),
                status: SlotStatus::Ok,
                evidence: None,
            }
        }
    };
    let affirmative = slot.value.eq_ignore_ascii_case("yes");
    let mention = tokens.iter().position(|t| *t == noun);
    let status = match mention {
        None if affirmative => SlotStatus::Missing,
        None => SlotStatus::Ok,
        Some(at) => {
            let negated = detect_negation(tokens, at, DEFAULT_NEGATION_WINDOW);
            if negated == affirmative {
                SlotStatus::Contradicted
            } else {
                SlotStatus::Ok
            }
        }
    };
    SlotVerdict {
        slot_name: slot.name.clone(),
        status,
        evidence: mention,
    }
}

/// The noun a boolean slot name refers to, e.g. `linux` for
/// `has_linux_release`.
pub fn extract_boolean_noun(slot_name: &str) -> Result<String> {
    let mut rest = slot_name.to_lowercase();
    if let Some(prefix) = NOUN_PREFIXES.iter().find(|p| rest.starts_with(*p)) {
        rest = rest[prefix.len()..].to_string();
    }
    if let Some(suffix) = NOUN_SUFFIXES.iter().find(|s| rest.ends_with(*s)) {
        rest.truncate(rest.len() - suffix.len());
    }
    rest.split('_')
        .rfind(|part| !part.is_empty())
        .map(str::to_string)
        .ok_or_else(|| Error::NoNoun(slot_name.to_string()))
}

pub fn is_negation_cue(token: &str) -> bool {
    NEGATION_CUES.contains(&token) || token.ends_with("n't")
}

/// True when a negation cue occurs within `window` tokens before
/// `mention_index` or within two tokens after it.
pub fn detect_negation(tokens: &[String], mention_index: usize, window: usize) -> bool {
    if mention_index >= tokens.len() {
        return false;
    }
    let start = mention_index.saturating_sub(window);
    let end = (mention_index + NEGATION_LOOKAHEAD + 1).min(tokens.len());
    tokens[start..mention_index]
        .iter()
        .chain(&tokens[mention_index + 1..end])
        .any(|t| is_negation_cue(t))
}

/// Slot error rate in percent: erroneous slots over checkable slots.
pub fn ser(reports: &[SlotErrorReport]) -> Result<f64> {
    let errors: usize = reports.iter().map(|r| r.error_count).sum();
    let slots: usize = reports.iter().map(SlotErrorReport::checkable_slots).sum();
    if slots == 0 {
        return Err(Error::EmptyDenominator);
    }
    Ok(100.0 * errors as f64 / slots as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mr::parse_mr;

    fn toks(s: &str) -> Vec<String> {
        normalize(s)
    }

    fn table1() -> MeaningRepresentation {
        parse_mr("recommend(name[Tom Clancy], release_year[1999], has_linux_release[yes])").unwrap()
    }

    #[test]
    fn normalization() {
        assert_eq!(
            normalize("Since you're into Linux games, you heard of Tom Clancy?"),
            vec!["since", "you're", "into", "linux", "games", "you", "heard", "of", "tom", "clancy"]
        );
        assert_eq!(normalize("Senua’s -- real-time!"), vec!["senua's", "realtime"]);
    }

    #[test]
    fn table_one_initial_prediction() {
        let report = check(&table1(), "Since you're into Linux games, you heard of Tom Clancy?");
        let statuses: Vec<_> = report.verdicts.iter().map(|v| v.status).collect();
        assert_eq!(
            statuses,
            vec![SlotStatus::Ok, SlotStatus::Missing, SlotStatus::Ok]
        );
        assert_eq!(report.error_count, 1);
        assert_eq!(report.erroneous_slots(), BTreeSet::from(["release_year".to_string()]));
        assert_eq!(report.verdicts[0].evidence, Some(8));
    }

    #[test]
    fn table_one_regeneration_is_clean() {
        let report = check(
            &table1(),
            "Since you're into Linux games, have you heard of Tom Clancy which is released in 1999?",
        );
        assert!(report.is_clean());
    }

    #[test]
    fn full_coverage_has_no_errors() {
        let mr = parse_mr(
            "inform(name[Max Payne 3], release_year[2012], genres[action-adventure], has_multiplayer[yes])",
        )
        .unwrap();
        assert_eq!(check(&mr, "Max Payne 3 2012 action-adventure multiplayer").error_count, 0);
    }

    #[test]
    fn contiguous_tokens_not_substrings() {
        let mr = parse_mr("inform(genre[art])").unwrap();
        assert_eq!(check(&mr, "a party game").error_count, 1);
        let mr = parse_mr("inform(name[Tom Clancy])").unwrap();
        assert_eq!(check(&mr, "tom likes clancy").error_count, 1);
        assert_eq!(check(&mr, "TOM CLANCY!").error_count, 0);
    }

    #[test]
    fn empty_values_always_ok() {
        let mr = parse_mr("request_attribute(esrb[])").unwrap();
        let report = check(&mr, "anything at all");
        assert!(report.is_clean());
        assert_eq!(report.checkable_slots(), 0);
    }

    #[test]
    fn boolean_examples() {
        let yes = Slot::new("has_linux_release", "yes");
        let no = Slot::new("has_linux_release", "no");
        assert_eq!(
            check_boolean_slot(&yes, &toks("have you heard of Tom Clancy on Linux")).status,
            SlotStatus::Ok
        );
        assert_eq!(
            check_boolean_slot(&no, &toks("it was never released on Linux")).status,
            SlotStatus::Ok
        );
        assert_eq!(
            check_boolean_slot(&no, &toks("it runs great on Linux")).status,
            SlotStatus::Contradicted
        );
    }

    #[test]
    fn boolean_six_case_matrix() {
        let cases = [
            ("yes", "a fine game", SlotStatus::Missing),
            ("yes", "it is not on linux", SlotStatus::Contradicted),
            ("yes", "it is on linux", SlotStatus::Ok),
            ("no", "a fine game", SlotStatus::Ok),
            ("no", "it is not on linux", SlotStatus::Ok),
            ("no", "it is on linux", SlotStatus::Contradicted),
        ];
        for (value, text, want) in cases {
            let slot = Slot::new("has_linux_release", value);
            assert_eq!(check_boolean_slot(&slot, &toks(text)).status, want, "{value} / {text}");
        }
    }

    #[test]
    fn ok_verdicts_carry_evidence() {
        let mr = parse_mr("inform(name[Tom Clancy], has_linux_release[yes], has_mac_release[no])")
            .unwrap();
        let report = check(&mr, "Tom Clancy is on Linux");
        assert_eq!(report.verdicts[0].evidence, Some(0));
        assert_eq!(report.verdicts[1].evidence, Some(4));
        assert_eq!(report.verdicts[2].status, SlotStatus::Ok);
        assert_eq!(report.verdicts[2].evidence, None);
    }

    #[test]
    fn noun_extraction() {
        assert_eq!(extract_boolean_noun("has_linux_release").unwrap(), "linux");
        assert_eq!(extract_boolean_noun("has_linux_released").unwrap(), "linux");
        assert_eq!(extract_boolean_noun("available_on_steam").unwrap(), "steam");
        assert_eq!(extract_boolean_noun("has_multiplayer").unwrap(), "multiplayer");
        assert_eq!(extract_boolean_noun("is_steam_available").unwrap(), "steam");
        assert_eq!(extract_boolean_noun("has_local_coop").unwrap(), "coop");
        assert!(matches!(extract_boolean_noun("has__release"), Err(Error::NoNoun(_))));
    }

    #[test]
    fn negation_window() {
        let t = toks("not available on linux");
        assert!(detect_negation(&t, 3, 4));
        let t = toks("available on linux");
        assert!(!detect_negation(&t, 2, 4));
        let t = toks("no multiplayer mode");
        assert!(detect_negation(&t, 1, 4));
        // cue five tokens back falls outside a window of four
        let t = toks("not a b c d linux");
        assert!(!detect_negation(&t, 5, 4));
        assert!(detect_negation(&t, 5, 5));
        // lookahead of two
        let t = toks("linux support is not there");
        assert!(!detect_negation(&t, 0, 4));
        let t = toks("linux is not supported");
        assert!(detect_negation(&t, 0, 4));
        let t = toks("linux wasn't supported");
        assert!(detect_negation(&t, 0, 4));
    }

    #[test]
    fn ser_arithmetic() {
        let mr = table1();
        let clean = check(&mr, "Tom Clancy from 1999 on Linux");
        assert_eq!(ser(std::slice::from_ref(&clean)).unwrap(), 0.0);

        let one_missing = check(&mr, "Tom Clancy on Linux");
        let v = ser(std::slice::from_ref(&one_missing)).unwrap();
        assert!((v - 100.0 / 3.0).abs() < 1e-9);

        // 10 reports x 4 slots with 2 errors in total
        let mr4 = parse_mr("inform(name[a], genre[b], rating[c], platform[d])").unwrap();
        let mut reports: Vec<_> = (0..8).map(|_| check(&mr4, "a b c d")).collect();
        reports.push(check(&mr4, "a b c"));
        reports.push(check(&mr4, "b c d"));
        assert!((ser(&reports).unwrap() - 5.0).abs() < 1e-12);
        reports.reverse();
        assert!((ser(&reports).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ser_excludes_empty_values_and_rejects_zero_denominator() {
        let mr = parse_mr("request_attribute(esrb[], rating[good])").unwrap();
        let r = check(&mr, "nothing");
        assert_eq!(ser(std::slice::from_ref(&r)).unwrap(), 100.0);
        let empty = check(&parse_mr("request_attribute(esrb[])").unwrap(), "x");
        assert!(matches!(ser(&[empty]), Err(Error::EmptyDenominator)));
        assert!(matches!(ser(&[]), Err(Error::EmptyDenominator)));
    }
}
