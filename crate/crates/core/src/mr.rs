//! Meaning representations in the bracketed `intent(slot[value], ...)` format.
//!
//! Slot names and intents are normalized to lowercase with internal runs of
//! whitespace mapped to a single underscore, so `request attribute(esrb[])`
//! and `request_attribute(esrb[])` parse to the same structure. Values are
//! kept verbatim apart from surrounding whitespace; list-like values such as
//! `genres[a, b]` are one opaque string.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BOOLEAN_PREFIXES: [&str; 2] = ["has_", "available_on_"];
const BOOLEAN_SUFFIXES: [&str; 3] = ["_release", "_released", "_available"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Valued,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub value: String,
    pub kind: SlotKind,
}

impl Slot {
    /// Builds a slot, normalizing the name and inferring its kind.
    pub fn new(name: &str, value: &str) -> Self {
        let name = normalize_name(name);
        let value = value.trim().to_string();
        let kind = infer_kind(&name, &value);
        Slot { name, value, kind }
    }

    pub fn is_boolean(&self) -> bool {
        self.kind == SlotKind::Boolean
    }

    /// Empty-valued slots (request-style MRs) carry nothing to verify.
    pub fn is_checkable(&self) -> bool {
        !self.value.is_empty()
    }
}

/// Name shape of a yes/no slot: `has_*`, `available_on_*`, `*_release`,
/// `*_released` or `*_available`.
pub fn is_boolean_slot_name(name: &str) -> bool {
    BOOLEAN_PREFIXES.iter().any(|p| name.starts_with(p) && name.len() > p.len())
        || BOOLEAN_SUFFIXES
            .iter()
            .any(|s| name.ends_with(s) && name.len() > s.len())
}

fn infer_kind(name: &str, value: &str) -> SlotKind {
    let yes_no = value.eq_ignore_ascii_case("yes") || value.eq_ignore_ascii_case("no");
    if yes_no && is_boolean_slot_name(name) {
        SlotKind::Boolean
    } else {
        SlotKind::Valued
    }
}

fn normalize_name(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeaningRepresentation {
    pub intent: String,
    pub slots: Vec<Slot>,
}

impl MeaningRepresentation {
    /// Builds an MR from `(name, value)` pairs, rejecting duplicate names.
    pub fn new<I, N, V>(intent: &str, slots: I) -> Result<Self>
    where
        I: IntoIterator<Item = (N, V)>,
        N: AsRef<str>,
        V: AsRef<str>,
    {
        let intent = normalize_name(intent);
        if intent.is_empty() {
            return Err(Error::malformed(0, "missing intent"));
        }
        let mut mr = MeaningRepresentation {
            intent,
            slots: Vec::new(),
        };
        for (name, value) in slots {
            let slot = Slot::new(name.as_ref(), value.as_ref());
            if slot.name.is_empty() {
                return Err(Error::malformed(0, "empty slot name"));
            }
            if mr.slot(&slot.name).is_some() {
                return Err(Error::malformed(0, format!("duplicate slot `{}`", slot.name)));
            }
            mr.slots.push(slot);
        }
        Ok(mr)
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    /// Canonical `intent(n1[v1], n2[v2])` form.
    pub fn serialize(&self) -> String {
        self.to_string()
    }

    /// Marks `missing` slots with `k` prompt tokens.
    pub fn insert_prompts(
        &self,
        missing: &BTreeSet<String>,
        k: usize,
        position_mode: PositionMode,
    ) -> Result<PromptedMr> {
        PromptedMr::new(self.clone(), missing.clone(), k, position_mode)
    }
}

impl fmt::Display for MeaningRepresentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.intent)?;
        for (i, slot) in self.slots.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}[{}]", slot.name, slot.value)?;
        }
        f.write_str(")")
    }
}

impl FromStr for MeaningRepresentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_mr(s)
    }
}

fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].chars().count()
}

/// Parses `intent(slot[value], ...)`. Errors carry the character offset of
/// the offending position in `text`.
pub fn parse_mr(text: &str) -> Result<MeaningRepresentation> {
    let err = |byte: usize, reason: &str| Error::malformed(char_offset(text, byte), reason);

    let open = text.find('(').ok_or_else(|| err(0, "missing `(`"))?;
    let intent_raw = &text[..open];
    if intent_raw.contains([')', '[', ']']) {
        return Err(err(0, "unexpected bracket before intent"));
    }
    let intent = normalize_name(intent_raw);
    if intent.is_empty() {
        return Err(err(open, "missing intent"));
    }

    let trimmed_end = text.trim_end().len();
    if !text[..trimmed_end].ends_with(')') || trimmed_end <= open {
        return Err(err(trimmed_end, "unbalanced parentheses: missing closing `)`"));
    }
    let close = trimmed_end - 1;
    let body_start = open + 1;
    let body = &text[body_start..close];

    let mut slots: Vec<Slot> = Vec::new();
    let mut pos = 0usize;
    let bytes = body.as_bytes();
    loop {
        while pos < body.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= body.len() {
            if !slots.is_empty() {
                return Err(err(body_start + pos, "trailing comma"));
            }
            break;
        }
        let name_start = pos;
        let rel_open = body[pos..]
            .find(['[', ']', '(', ')', ','])
            .map(|i| pos + i)
            .ok_or_else(|| err(body_start + pos, "slot without `[value]`"))?;
        if bytes[rel_open] != b'[' {
            return Err(err(body_start + rel_open, "expected `[` after slot name"));
        }
        let name = normalize_name(&body[name_start..rel_open]);
        if name.is_empty() {
            return Err(err(body_start + name_start, "empty slot name"));
        }
        let value_start = rel_open + 1;
        let value_end = body[value_start..]
            .find([']', '['])
            .map(|i| value_start + i)
            .ok_or_else(|| err(body_start + rel_open, "unbalanced `[`"))?;
        if bytes[value_end] == b'[' {
            return Err(err(body_start + value_end, "nested `[` inside slot value"));
        }
        let value = &body[value_start..value_end];
        if value.contains(['(', ')']) {
            return Err(err(body_start + value_start, "parenthesis inside slot value"));
        }
        if slots.iter().any(|s| s.name == name) {
            return Err(err(body_start + name_start, &format!("duplicate slot `{name}`")));
        }
        slots.push(Slot::new(&name, value));

        pos = value_end + 1;
        while pos < body.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= body.len() {
            break;
        }
        if bytes[pos] != b',' {
            return Err(err(body_start + pos, "expected `,` between slots"));
        }
        pos += 1;
    }

    Ok(MeaningRepresentation { intent, slots })
}

/// The literal spelling of the `index`-th prompt token (1-based).
pub fn prompt_token(index: usize) -> String {
    format!("<token{index}>")
}

/// `<token1> <token2> ... <tokenk>`
pub fn prompt_span(k: usize) -> String {
    (1..=k).map(prompt_token).collect::<Vec<_>>().join(" ")
}

/// Returns the 1-based index if `word` is a prompt token.
pub fn prompt_token_index(word: &str) -> Option<usize> {
    let digits = word.strip_prefix("<token")?.strip_suffix('>')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    digits.parse().ok()
}

/// Removes every `<tokenN>` (and the single space that follows it) so a
/// prompted input parses back to its source MR.
pub fn strip_prompt_tokens(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("<token") {
        let tail = &rest[start..];
        match tail.find('>') {
            Some(end) if prompt_token_index(&tail[..=end]).is_some() => {
                out.push_str(&rest[..start]);
                let mut after = &tail[end + 1..];
                if let Some(stripped) = after.strip_prefix(' ') {
                    after = stripped;
                }
                rest = after;
            }
            _ => {
                out.push_str(&rest[..start + 1]);
                rest = &rest[start + 1..];
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    #[default]
    AtSlot,
    Front,
}

/// An MR with error-correcting prompt tokens attached to some of its slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptedMr {
    pub mr: MeaningRepresentation,
    pub prompted_slots: BTreeSet<String>,
    pub k: usize,
    pub position_mode: PositionMode,
}

impl PromptedMr {
    pub fn new(
        mr: MeaningRepresentation,
        prompted_slots: BTreeSet<String>,
        k: usize,
        position_mode: PositionMode,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("prompt token count k must be at least 1".into()));
        }
        if let Some(unknown) = prompted_slots.iter().find(|n| mr.slot(n).is_none()) {
            return Err(Error::UnknownSlot(unknown.clone()));
        }
        Ok(PromptedMr {
            mr,
            prompted_slots,
            k,
            position_mode,
        })
    }

    pub fn serialize(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for PromptedMr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.prompted_slots.is_empty() {
            return write!(f, "{}", self.mr);
        }
        let span = prompt_span(self.k);
        match self.position_mode {
            PositionMode::Front => write!(f, "{span} {}", self.mr),
            PositionMode::AtSlot => {
                write!(f, "{}(", self.mr.intent)?;
                for (i, slot) in self.mr.slots.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    if !self.prompted_slots.contains(&slot.name) {
                        write!(f, "{}[{}]", slot.name, slot.value)?;
                    } else if slot.value.is_empty() {
                        write!(f, "{}[{span}]", slot.name)?;
                    } else {
                        write!(f, "{}[{span} {}]", slot.name, slot.value)?;
                    }
                }
                f.write_str(")")
            }
        }
    }
}

/// Serde adapter storing an MR as its canonical string.
pub mod as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::{parse_mr, MeaningRepresentation};

    pub fn serialize<S: Serializer>(mr: &MeaningRepresentation, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&mr.serialize())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<MeaningRepresentation, D::Error> {
        let text = String::deserialize(d)?;
        parse_mr(&text).map_err(serde::de::Error::custom)
    }
}
