use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{UtteranceRecord, OUTSIDE};
use crate::encoder::Featurizer;
use crate::error::Result;
use crate::sampler::Episode;

/// Ordered intent and slot label inventories with index lookup.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub intents: Vec<String>,
    pub slots: Vec<String>,
}

impl LabelSpace {
    pub fn new(intents: Vec<String>, slots: Vec<String>) -> Self {
        LabelSpace { intents, slots }
    }

    /// Sorted labels of `records`, optionally forcing the outside label in.
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a UtteranceRecord>,
        with_outside: bool,
    ) -> Self {
        let mut intents = BTreeSet::new();
        let mut slots = BTreeSet::new();
        for r in records {
            intents.insert(r.intent.clone());
            slots.extend(r.slots.iter().cloned());
        }
        if with_outside {
            slots.insert(OUTSIDE.to_string());
        }
        LabelSpace {
            intents: intents.into_iter().collect(),
            slots: slots.into_iter().collect(),
        }
    }

    fn index_of(labels: &[String]) -> HashMap<&str, usize> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect()
    }

    pub fn intent_index(&self, label: &str) -> Option<usize> {
        self.intents.iter().position(|l| l == label)
    }

    pub fn slot_index(&self, label: &str) -> Option<usize> {
        self.slots.iter().position(|l| l == label)
    }
}

/// A labelled set of utterances turned into input matrices and label
/// indices. Labels missing from the label space map to `None`.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub features: Vec<Tensor>,
    pub intents: Vec<Option<usize>>,
    pub slots: Vec<Vec<Option<usize>>>,
}

impl PreparedSet {
    pub fn new(
        featurizer: &Featurizer,
        records: &[UtteranceRecord],
        labels: &LabelSpace,
    ) -> Result<Self> {
        let ii = LabelSpace::index_of(&labels.intents);
        let si = LabelSpace::index_of(&labels.slots);
        let mut out = PreparedSet {
            features: Vec::with_capacity(records.len()),
            intents: Vec::with_capacity(records.len()),
            slots: Vec::with_capacity(records.len()),
        };
        for r in records {
            out.features.push(featurizer.features(r)?);
            out.intents.push(ii.get(r.intent.as_str()).copied());
            out.slots.push(
                r.slots
                    .iter()
                    .map(|s| si.get(s.as_str()).copied())
                    .collect(),
            );
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }
}

/// An episode ready for an algorithm: features plus indices into one label
/// space shared by support and query.
#[derive(Clone, Debug)]
pub struct PreparedEpisode {
    pub labels: LabelSpace,
    pub support: PreparedSet,
    pub query: PreparedSet,
    /// Query tokens whose gold label was remapped to the outside label.
    pub query_remapped: Vec<Vec<bool>>,
}

impl PreparedEpisode {
    /// Label space taken from the support set. `with_outside` adds the
    /// outside label even when no support token carries it, which output
    /// heads need; prototypes can only exist for labels seen in support.
    pub fn new(featurizer: &Featurizer, episode: &Episode, with_outside: bool) -> Result<Self> {
        let labels = LabelSpace::from_records(&episode.support, with_outside);
        Ok(PreparedEpisode {
            support: PreparedSet::new(featurizer, &episode.support, &labels)?,
            query: PreparedSet::new(featurizer, &episode.query, &labels)?,
            query_remapped: episode.query_remap_mask(),
            labels,
        })
    }
}

/// Per-query predictions with the log-probabilities they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodePrediction {
    pub labels: LabelSpace,
    pub intents: Vec<String>,
    pub intent_log_probs: Vec<Vec<f64>>,
    pub slots: Vec<Vec<String>>,
    pub slot_log_probs: Vec<Vec<Vec<f64>>>,
}

impl EpisodePrediction {
    /// Builds predictions from raw logits: `intent_logits` is `|Q|×n`,
    /// `slot_logits` holds the token rows of every query utterance in order.
    pub(crate) fn from_logits(
        labels: &LabelSpace,
        intent_logits: &Tensor,
        slot_logits: &Tensor,
        lengths: &[usize],
    ) -> Self {
        let mut intents = Vec::with_capacity(lengths.len());
        let mut intent_log_probs = Vec::with_capacity(lengths.len());
        let mut slots = Vec::with_capacity(lengths.len());
        let mut slot_log_probs = Vec::with_capacity(lengths.len());
        let mut row = 0;
        for (q, &m) in lengths.iter().enumerate() {
            let lp = log_softmax(intent_logits.row(q));
            intents.push(labels.intents[argmax(&lp)].clone());
            intent_log_probs.push(lp);
            let mut tags = Vec::with_capacity(m);
            let mut tag_lps = Vec::with_capacity(m);
            for _ in 0..m {
                let lp = log_softmax(slot_logits.row(row));
                tags.push(labels.slots[argmax(&lp)].clone());
                tag_lps.push(lp);
                row += 1;
            }
            slots.push(tags);
            slot_log_probs.push(tag_lps);
        }
        EpisodePrediction {
            labels: labels.clone(),
            intents,
            intent_log_probs,
            slots,
            slot_log_probs,
        }
    }

    /// Replaces predictions at masked tokens with the outside label so they
    /// cannot form spans.
    pub fn mask_slots(&mut self, mask: &[Vec<bool>]) {
        for (tags, m) in self.slots.iter_mut().zip(mask) {
            for (t, &hide) in tags.iter_mut().zip(m) {
                if hide {
                    *t = OUTSIDE.to_string();
                }
            }
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
