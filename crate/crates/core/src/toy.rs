//! Synthetic template corpus for smoke tests and end-to-end checks.
//!
//! Every intent owns a few keywords and a handful of templates; slots own
//! disjoint value vocabularies. Filler words and the marker words that
//! introduce slot values come from pools shared by all intents, so the cue
//! for where a slot starts carries over to unseen intents. Slot `s` is
//! always introduced by marker `s % markers`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{UtteranceRecord, OUTSIDE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub intents: usize,
    pub slot_labels: usize,
    pub per_intent: usize,
    pub templates_per_intent: usize,
    pub keywords_per_intent: usize,
    pub values_per_slot: usize,
    pub fillers: usize,
    pub markers: usize,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            intents: 8,
            slot_labels: 12,
            per_intent: 200,
            templates_per_intent: 3,
            keywords_per_intent: 1,
            values_per_slot: 6,
            fillers: 12,
            markers: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Part {
    Keyword,
    Filler,
    Marker(usize),
    Slot(usize),
}

pub fn intent_name(i: usize) -> String {
    format!("Intent{i}")
}

/// Slot `s` belongs to intent `intents - 1 - s % intents`, so the last
/// intents receive the extra slots when labels do not divide evenly.
pub fn slot_owner(s: usize, intents: usize) -> usize {
    intents - 1 - s % intents
}

pub fn generate_toy_corpus(cfg: &ToyCorpusConfig) -> Vec<UtteranceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let slot_values: Vec<Vec<Vec<String>>> = (0..cfg.slot_labels)
        .map(|s| {
            (0..cfg.values_per_slot)
                .map(|v| {
                    let len = rng.gen_range(1..=2);
                    (0..len)
                        .map(|k| format!("v{s}_{}", (v * 2 + k) % (cfg.values_per_slot + 2)))
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut records = Vec::with_capacity(cfg.intents * cfg.per_intent);
    for i in 0..cfg.intents {
        let slots: Vec<usize> = (0..cfg.slot_labels)
            .filter(|&s| slot_owner(s, cfg.intents) == i)
            .collect();
        let templates: Vec<Vec<Part>> = (0..cfg.templates_per_intent)
            .map(|_| {
                let mut body = Vec::new();
                for _ in 0..rng.gen_range(0..=1) {
                    body.push(vec![Part::Keyword]);
                }
                for _ in 0..rng.gen_range(1..=2) {
                    body.push(vec![Part::Filler]);
                }
                for &s in &slots {
                    body.push(vec![Part::Marker(s % cfg.markers), Part::Slot(s)]);
                }
                body.shuffle(&mut rng);
                let mut parts = vec![Part::Keyword];
                parts.extend(body.into_iter().flatten());
                parts
            })
            .collect();
        let name = intent_name(i);
        for n in 0..cfg.per_intent {
            let template = templates.choose(&mut rng).expect("templates");
            let mut tokens = Vec::new();
            let mut labels = Vec::new();
            for part in template {
                match part {
                    Part::Keyword => {
                        tokens.push(format!(
                            "k{i}_{}",
                            rng.gen_range(0..cfg.keywords_per_intent)
                        ));
                        labels.push(OUTSIDE.to_string());
                    }
                    Part::Filler => {
                        tokens.push(format!("f{}", rng.gen_range(0..cfg.fillers)));
                        labels.push(OUTSIDE.to_string());
                    }
                    Part::Marker(m) => {
                        tokens.push(format!("m{m}"));
                        labels.push(OUTSIDE.to_string());
                    }
                    Part::Slot(s) => {
                        let value = slot_values[*s].choose(&mut rng).expect("values");
                        for w in value {
                            tokens.push(w.clone());
                            labels.push(format!("{name}:slot{s}"));
                        }
                    }
                }
            }
            records.push(UtteranceRecord {
                id: format!("{name}-{n}"),
                tokens,
                slots: labels,
                intent: name.clone(),
            });
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn corpus_shape() {
        let cfg = ToyCorpusConfig::default();
        let recs = generate_toy_corpus(&cfg);
        assert_eq!(recs.len(), 1600);
        let slots: BTreeSet<&str> = recs
            .iter()
            .flat_map(|r| r.slots.iter().map(String::as_str))
            .filter(|s| *s != "O")
            .collect();
        assert_eq!(slots.len(), 12);
        let intents: BTreeSet<&str> = recs.iter().map(|r| r.intent.as_str()).collect();
        assert_eq!(intents.len(), 8);
        assert_eq!(recs, generate_toy_corpus(&cfg));
    }
}
