//! Synthetic video-game corpus and external CSV ingestion.
//!
//! The default grammar keeps every slot's values on token alphabets that are
//! disjoint from each other and from the template words, so the slot checker
//! is exact on references: an omitted value is always reported missing and a
//! realized one is always found.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mr::{parse_mr, MeaningRepresentation};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub mr: MeaningRepresentation,
    pub references: Vec<String>,
}

/// On-disk shape of an [`Example`]: `{"mr": "...", "refs": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub mr: String,
    pub refs: Vec<String>,
}

impl From<&Example> for ExampleRecord {
    fn from(ex: &Example) -> Self {
        ExampleRecord {
            mr: ex.mr.serialize(),
            refs: ex.references.clone(),
        }
    }
}

impl TryFrom<ExampleRecord> for Example {
    type Error = Error;

    fn try_from(rec: ExampleRecord) -> Result<Self> {
        if rec.refs.is_empty() {
            return Err(Error::EmptyInput(format!("example `{}` has no references", rec.mr)));
        }
        Ok(Example {
            mr: parse_mr(&rec.mr)?,
            references: rec.refs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentSpec {
    pub name: String,
    /// Allowed slots in canonical output order.
    pub slots: Vec<String>,
    #[serde(default)]
    pub required: Vec<String>,
    pub min_slots: usize,
    pub max_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentTemplates {
    /// Sentence openings; `{name}` is replaced by the name slot's value.
    pub openings: Vec<String>,
    pub closings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BooleanPhrases {
    pub yes: Vec<String>,
    pub no: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarConfig {
    pub intents: Vec<IntentSpec>,
    pub slot_inventories: BTreeMap<String, Vec<String>>,
    pub boolean_slots: BTreeSet<String>,
    pub omission_rate: f64,
    /// Probability of realizing a template or phrase with its first listed
    /// wording; the remaining wordings share the rest uniformly.
    pub primary_phrase_rate: f64,
    pub templates: BTreeMap<String, IntentTemplates>,
    /// Realizations of valued slots other than `name`; `{value}` placeholder.
    pub slot_phrases: BTreeMap<String, Vec<String>>,
    pub boolean_phrases: BTreeMap<String, BooleanPhrases>,
    /// Stands in for `{name}` when the name is absent or omitted.
    pub name_fallback: String,
    pub references_per_example: usize,
    pub seed: u64,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for GrammarConfig {
    fn default() -> Self {
        let intent = |name: &str, slots: &[&str], required: &[&str], min, max| IntentSpec {
            name: name.into(),
            slots: strings(slots),
            required: strings(required),
            min_slots: min,
            max_slots: max,
        };
        let all = [
            "name",
            "release_year",
            "genre",
            "rating",
            "developer",
            "platform",
            "has_multiplayer",
            "available_on_steam",
        ];
        let intents = vec![
            intent("inform", &all, &["name"], 3, 5),
            intent(
                "recommend",
                &["name", "release_year", "genre", "platform", "has_multiplayer"],
                &["name"],
                2,
                3,
            ),
            intent(
                "confirm",
                &["name", "release_year", "developer", "platform"],
                &["name"],
                2,
                3,
            ),
            intent(
                "request",
                &["release_year", "genre", "developer", "platform", "has_multiplayer"],
                &[],
                1,
                2,
            ),
        ];

        let mut slot_inventories = BTreeMap::new();
        slot_inventories.insert(
            "name".to_string(),
            strings(&[
                "Crystal Saga", "Iron Harbor", "Shadow Realm", "Neon Drift", "Frost Keep",
                "Ember Knight", "Silent Orbit", "Lunar Forge", "Copper Canyon", "Velvet Storm",
                "Hollow Crown", "Amber Tide", "Rogue Signal", "Pixel Garden", "Thunder Vale",
                "Echo Protocol", "Scarlet Dawn", "Obsidian Gate", "Wild Meadow", "Crimson Tower",
                "Star Pilgrim", "Glass Labyrinth", "Rust Empire", "Zen Circuit", "Solar Nomad",
                "Dusk Hunter", "Marble Quest", "Polar Rift", "Jade Serpent", "Mystic Lagoon",
            ]),
        );
        slot_inventories.insert(
            "release_year".to_string(),
            (1995..=2020).map(|y| y.to_string()).collect(),
        );
        slot_inventories.insert(
            "genre".to_string(),
            strings(&[
                "shooter", "puzzle", "strategy", "racing", "platformer", "simulation",
                "fighting", "sports", "horror", "roguelike",
            ]),
        );
        slot_inventories.insert(
            "rating".to_string(),
            strings(&["poor", "average", "good", "excellent", "mediocre"]),
        );
        slot_inventories.insert(
            "developer".to_string(),
            strings(&[
                "Valve", "Ubisoft", "Capcom", "Bethesda", "Rockstar", "Bungie", "Konami", "Sega",
                "Atlus", "BioWare", "Treyarch", "Remedy",
            ]),
        );
        slot_inventories.insert(
            "platform".to_string(),
            strings(&["PC", "PlayStation", "Xbox", "Switch", "Mobile", "Dreamcast"]),
        );
        slot_inventories.insert("has_multiplayer".to_string(), strings(&["yes", "no"]));
        slot_inventories.insert("available_on_steam".to_string(), strings(&["yes", "no"]));

        let boolean_slots = BTreeSet::from([
            "has_multiplayer".to_string(),
            "available_on_steam".to_string(),
        ]);

        let mut templates = BTreeMap::new();
        let tpl = |openings: &[&str], closings: &[&str]| IntentTemplates {
            openings: strings(openings),
            closings: strings(closings),
        };
        templates.insert(
            "inform".to_string(),
            tpl(&["{name} is a game", "{name} is a title"], &["."]),
        );
        templates.insert(
            "recommend".to_string(),
            tpl(&["have you tried {name}", "do you know {name}"], &["?"]),
        );
        templates.insert(
            "confirm".to_string(),
            tpl(&["do you mean {name}", "you mean {name}"], &["?"]),
        );
        templates.insert(
            "request".to_string(),
            tpl(&["are you looking for a game", "what is your favorite game"], &["?"]),
        );

        let mut slot_phrases = BTreeMap::new();
        slot_phrases.insert(
            "release_year".to_string(),
            strings(&["released in {value}", "from {value}"]),
        );
        slot_phrases.insert(
            "genre".to_string(),
            strings(&["in the {value} genre", "of the {value} genre"]),
        );
        slot_phrases.insert(
            "rating".to_string(),
            strings(&["rated {value}", "with a {value} rating"]),
        );
        slot_phrases.insert(
            "developer".to_string(),
            strings(&["made by {value}", "developed by {value}"]),
        );
        slot_phrases.insert("platform".to_string(), strings(&["on {value}", "for {value}"]));

        let mut boolean_phrases = BTreeMap::new();
        boolean_phrases.insert(
            "has_multiplayer".to_string(),
            BooleanPhrases {
                yes: strings(&["and it has multiplayer", "and it supports multiplayer"]),
                no: strings(&["and it has no multiplayer", "and it does not support multiplayer"]),
            },
        );
        boolean_phrases.insert(
            "available_on_steam".to_string(),
            BooleanPhrases {
                yes: strings(&["and it is available on steam", "and it is sold on steam"]),
                no: strings(&["and it is not available on steam", "and it is never sold on steam"]),
            },
        );

        GrammarConfig {
            intents,
            slot_inventories,
            boolean_slots,
            omission_rate: 0.10,
            primary_phrase_rate: 0.8,
            templates,
            slot_phrases,
            boolean_phrases,
            name_fallback: "it".into(),
            references_per_example: 1,
            seed: 7,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.omission_rate) {
            return cfg(format!(
                "grammar.omission_rate must be in [0, 1], got {}",
                self.omission_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.primary_phrase_rate) {
            return cfg(format!(
                "grammar.primary_phrase_rate must be in [0, 1], got {}",
                self.primary_phrase_rate
            ));
        }
        if self.intents.is_empty() {
            return cfg("grammar.intents is empty".into());
        }
        if self.references_per_example == 0 {
            return cfg("grammar.references_per_example must be at least 1".into());
        }
        for intent in &self.intents {
            let at = |what: &str| format!("grammar.intents[{}]: {what}", intent.name);
            if intent.min_slots == 0 || intent.min_slots > intent.max_slots {
                return cfg(at("need 1 <= min_slots <= max_slots"));
            }
            if intent.max_slots > intent.slots.len() {
                return cfg(at("max_slots exceeds the number of allowed slots"));
            }
            if intent.required.len() > intent.min_slots {
                return cfg(at("more required slots than min_slots"));
            }
            if let Some(r) = intent.required.iter().find(|r| !intent.slots.contains(r)) {
                return cfg(at(&format!("required slot `{r}` is not allowed")));
            }
            let Some(tpl) = self.templates.get(&intent.name) else {
                return cfg(at("no templates"));
            };
            if tpl.openings.is_empty() || tpl.closings.is_empty() {
                return cfg(at("templates need at least one opening and one closing"));
            }
            let mentions_name = tpl.openings.iter().any(|o| o.contains("{name}"));
            if mentions_name && !intent.slots.iter().any(|s| s == "name") {
                return cfg(at("template references {name} but the intent has no name slot"));
            }
            for slot in &intent.slots {
                match self.slot_inventories.get(slot) {
                    None => return cfg(format!("grammar.slot_inventories: `{slot}` missing")),
                    Some(values) if values.is_empty() => {
                        return cfg(format!("grammar.slot_inventories: `{slot}` is empty"))
                    }
                    _ => {}
                }
                if self.boolean_slots.contains(slot) {
                    if !self.boolean_phrases.contains_key(slot) {
                        return cfg(at(&format!("no boolean phrases for `{slot}`")));
                    }
                } else if slot == "name" {
                    if !tpl.openings.iter().all(|o| o.contains("{name}")) {
                        return cfg(at("every opening must place {name}"));
                    }
                } else if self.slot_phrases.get(slot).is_none_or(Vec::is_empty) {
                    return cfg(at(&format!("no phrases for `{slot}`")));
                }
            }
        }
        Ok(())
    }

    pub fn is_boolean(&self, slot: &str) -> bool {
        self.boolean_slots.contains(slot)
    }

    fn sample_mr(&self, rng: &mut ChaCha8Rng) -> MeaningRepresentation {
        let intent = self.intents.choose(rng).expect("validated non-empty");
        let count = rng.random_range(intent.min_slots..=intent.max_slots);
        let mut optional: Vec<&String> = intent
            .slots
            .iter()
            .filter(|s| !intent.required.contains(s))
            .collect();
        optional.shuffle(rng);
        let mut chosen: BTreeSet<&String> = intent.required.iter().collect();
        chosen.extend(optional.into_iter().take(count - intent.required.len()));

        let pairs: Vec<(&str, &str)> = intent
            .slots
            .iter()
            .filter(|s| chosen.contains(s))
            .map(|s| {
                let value = self.slot_inventories[s]
                    .choose(rng)
                    .expect("validated non-empty");
                (s.as_str(), value.as_str())
            })
            .collect();
        MeaningRepresentation::new(&intent.name, pairs).expect("grammar slots are unique")
    }

    fn wording<'a>(&self, options: &'a [String], rng: &mut ChaCha8Rng) -> &'a String {
        match options.split_first() {
            Some((first, rest)) if rest.is_empty() || rng.random_bool(self.primary_phrase_rate) => first,
            Some((_, rest)) => rest.choose(rng).expect("non-empty"),
            None => unreachable!("validated non-empty"),
        }
    }

    fn realize(&self, mr: &MeaningRepresentation, rng: &mut ChaCha8Rng) -> String {
        let omit: Option<&str> = if rng.random_bool(self.omission_rate) {
            let candidates: Vec<&str> = mr
                .slots
                .iter()
                .filter(|s| !self.is_boolean(&s.name))
                .map(|s| s.name.as_str())
                .collect();
            candidates.choose(rng).copied()
        } else {
            None
        };

        let tpl = &self.templates[&mr.intent];
        let opening = self.wording(&tpl.openings, rng);
        let name = match mr.slot("name") {
            Some(slot) if omit != Some("name") => slot.value.as_str(),
            _ => self.name_fallback.as_str(),
        };
        let mut parts = vec![opening.replace("{name}", name)];
        let mut phrases = Vec::new();
        for slot in &mr.slots {
            if slot.name == "name" || omit == Some(slot.name.as_str()) {
                continue;
            }
            let phrase = if self.is_boolean(&slot.name) {
                let p = &self.boolean_phrases[&slot.name];
                let options = if slot.value.eq_ignore_ascii_case("yes") {
                    &p.yes
                } else {
                    &p.no
                };
                self.wording(options, rng).clone()
            } else {
                self.wording(&self.slot_phrases[&slot.name], rng)
                    .replace("{value}", &slot.value)
            };
            phrases.push(phrase);
        }
        if !phrases.is_empty() {
            parts.push(phrases.join(" , "));
        }
        parts.push(self.wording(&tpl.closings, rng).clone());
        parts.join(" ")
    }
}

/// Generates `n` examples. Deterministic in `cfg.seed`.
pub fn generate_corpus(cfg: &GrammarConfig, n: usize) -> Result<Vec<Example>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..n)
        .map(|_| {
            let mr = cfg.sample_mr(&mut rng);
            let references = (0..cfg.references_per_example)
                .map(|_| cfg.realize(&mr, &mut rng))
                .collect();
            Example { mr, references }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// One generation stream cut into consecutive train/validation/test blocks.
pub fn generate_splits(
    cfg: &GrammarConfig,
    train: usize,
    val: usize,
    test: usize,
) -> Result<CorpusSplits> {
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::Config("every corpus split needs at least one example".into()));
    }
    let mut all = generate_corpus(cfg, train + val + test)?;
    let test_part = all.split_off(train + val);
    let val_part = all.split_off(train);
    Ok(CorpusSplits {
        train: all,
        val: val_part,
        test: test_part,
    })
}

/// Reads a `mr,ref` CSV. Rows sharing an MR merge into one multi-reference
/// example, in order of first appearance.
pub fn load_csv(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            row: 1,
            reason: e.to_string(),
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let (Some(mr_col), Some(ref_col)) = (column("mr"), column("ref")) else {
        return Err(Error::Csv {
            row: 1,
            reason: "header must contain `mr` and `ref` columns".into(),
        });
    };

    let mut examples: Vec<Example> = Vec::new();
    let mut by_mr: BTreeMap<String, usize> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let record = record.map_err(|e| Error::Csv {
            row,
            reason: e.to_string(),
        })?;
        let (Some(mr_text), Some(reference)) = (record.get(mr_col), record.get(ref_col)) else {
            return Err(Error::Csv {
                row,
                reason: "missing column".into(),
            });
        };
        let mr = parse_mr(mr_text).map_err(|e| Error::Row {
            row,
            source: Box::new(e),
        })?;
        let key = mr.serialize();
        match by_mr.get(&key) {
            Some(&idx) => examples[idx].references.push(reference.to_string()),
            None => {
                by_mr.insert(key, examples.len());
                examples.push(Example {
                    mr,
                    references: vec![reference.to_string()],
                });
            }
        }
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checker::{check, SlotStatus};

    fn all_refs(examples: &[Example]) -> impl Iterator<Item = (&Example, &String)> {
        examples
            .iter()
            .flat_map(|ex| ex.references.iter().map(move |r| (ex, r)))
    }

    #[test]
    fn default_grammar_validates() {
        GrammarConfig::default().validate().unwrap();
    }

    #[test]
    fn no_omission_means_full_coverage() {
        let cfg = GrammarConfig {
            omission_rate: 0.0,
            references_per_example: 2,
            ..Default::default()
        };
        let corpus = generate_corpus(&cfg, 2000).unwrap();
        for (ex, r) in all_refs(&corpus) {
            assert_eq!(check(&ex.mr, r).error_count, 0, "{} / {r}", ex.mr);
        }
    }

    #[test]
    fn forced_omission_drops_exactly_one_valued_slot() {
        let cfg = GrammarConfig {
            omission_rate: 1.0,
            ..Default::default()
        };
        let corpus = generate_corpus(&cfg, 2000).unwrap();
        let mut checked = 0;
        for (ex, r) in all_refs(&corpus) {
            let has_valued = ex.mr.slots.iter().any(|s| !cfg.is_boolean(&s.name));
            if ex.mr.slots.len() < 2 || !has_valued {
                continue;
            }
            let report = check(&ex.mr, r);
            assert_eq!(report.error_count, 1, "{} / {r}", ex.mr);
            let bad = report.verdicts.iter().find(|v| v.is_error()).unwrap();
            assert_eq!(bad.status, SlotStatus::Missing);
            assert!(!cfg.is_boolean(&bad.slot_name));
            checked += 1;
        }
        assert!(checked > 1500);
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = GrammarConfig::default();
        let a = generate_corpus(&cfg, 300).unwrap();
        let b = generate_corpus(&cfg, 300).unwrap();
        assert_eq!(a, b);
        let other = GrammarConfig {
            seed: cfg.seed + 1,
            ..cfg
        };
        assert_ne!(a, generate_corpus(&other, 300).unwrap());
    }

    #[test]
    fn default_omission_rate_is_roughly_ten_percent() {
        let cfg = GrammarConfig::default();
        let corpus = generate_corpus(&cfg, 3000).unwrap();
        let with_error = all_refs(&corpus)
            .filter(|(ex, r)| check(&ex.mr, r).error_count > 0)
            .count();
        let rate = with_error as f64 / corpus.len() as f64;
        assert!((0.07..0.13).contains(&rate), "{rate}");
    }

    #[test]
    fn generated_mrs_round_trip() {
        let corpus = generate_corpus(&GrammarConfig::default(), 1000).unwrap();
        for ex in &corpus {
            assert_eq!(parse_mr(&ex.mr.serialize()).unwrap(), ex.mr);
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let bad = GrammarConfig {
            omission_rate: 1.5,
            ..Default::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("omission_rate"), "{msg}");

        let mut empty = GrammarConfig::default();
        empty.slot_inventories.insert("genre".into(), vec![]);
        assert!(matches!(generate_corpus(&empty, 5), Err(Error::Config(_))));

        let mut no_name_tpl = GrammarConfig::default();
        no_name_tpl.templates.get_mut("request").unwrap().openings = vec!["{name} ?".into()];
        assert!(no_name_tpl.validate().is_err());

        let skew = GrammarConfig {
            primary_phrase_rate: -0.1,
            ..Default::default()
        };
        assert!(skew.validate().unwrap_err().to_string().contains("primary_phrase_rate"));
    }

    #[test]
    fn primary_phrase_rate_steers_wording() {
        let first_share = |rate: f64| {
            let cfg = GrammarConfig {
                primary_phrase_rate: rate,
                omission_rate: 0.0,
                ..Default::default()
            };
            let first = cfg.slot_phrases["genre"][0].to_lowercase();
            let corpus = generate_corpus(&cfg, 400).unwrap();
            let with_genre: Vec<_> = all_refs(&corpus)
                .filter_map(|(ex, r)| ex.mr.slot("genre").map(|s| (s.value.to_lowercase(), r.to_lowercase())))
                .collect();
            let hits = with_genre
                .iter()
                .filter(|(v, r)| r.contains(&first.replace("{value}", v)))
                .count();
            hits as f64 / with_genre.len() as f64
        };
        assert_eq!(first_share(1.0), 1.0);
        assert_eq!(first_share(0.0), 0.0);
        let default = first_share(0.8);
        assert!((0.7..0.9).contains(&default), "{default}");
    }

    #[test]
    fn splits_are_consecutive_blocks() {
        let cfg = GrammarConfig::default();
        let s = generate_splits(&cfg, 30, 5, 7).unwrap();
        let all = generate_corpus(&cfg, 42).unwrap();
        assert_eq!(s.train, all[..30]);
        assert_eq!(s.val, all[30..35]);
        assert_eq!(s.test, all[35..]);
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(
            &path,
            "mr,ref\n\"inform(name[Max Payne 3])\",\"Max Payne 3 is a game.\"\n\
             \"inform(name[Max Payne 3])\",\"It is Max Payne 3.\"\n\
             \"confirm(name[Hellblade])\",\"Hellblade?\"\n",
        )
        .unwrap();
        let examples = load_csv(&path).unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[0].mr.slots.len(), 1);
        assert_eq!(
            examples[0].references,
            vec!["Max Payne 3 is a game.", "It is Max Payne 3."]
        );

        std::fs::write(&path, "meaning,text\n\"inform(name[A])\",\"A\"\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Csv { row: 1, .. })));

        std::fs::write(&path, "mr,ref\n\"inform(name[A])\",\"A\"\n\"inform(name[B]\",\"B\"\n")
            .unwrap();
        match load_csv(&path) {
            Err(Error::Row { row: 3, source }) => {
                assert!(matches!(*source, Error::MalformedMr { .. }))
            }
            other => panic!("{other:?}"),
        }

        assert!(matches!(
            load_csv(&dir.path().join("absent.csv")),
            Err(Error::Io { .. })
        ));
    }
}
