//! Intent accuracy, exact-match span F1 and multi-seed aggregation.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{split_bio, OUTSIDE};
use crate::error::{Error, Result};

/// A labelled token range `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

/// Extracts maximal spans from per-token slot labels.
///
/// A run of tokens sharing the same non-outside label forms one span. When
/// labels carry `B-`/`I-` tags, the tag is stripped for comparison and a
/// `B-` token always opens a new span.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (j, raw) in labels.iter().enumerate() {
        let (tag, label) = split_bio(raw.as_ref());
        let continues = matches!(&open, Some((l, _)) if l == label) && tag != Some('B');
        if continues {
            continue;
        }
        if let Some((l, start)) = open.take() {
            spans.push(Span {
                label: l,
                start,
                end: j,
            });
        }
        if label != OUTSIDE {
            open = Some((label.to_string(), j));
        }
    }
    if let Some((l, start)) = open {
        spans.push(Span {
            label: l,
            start,
            end: labels.len(),
        });
    }
    spans
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub gold: usize,
    pub predicted: usize,
    pub matched: usize,
}

impl SpanCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.matched, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.matched, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Span counts over a batch of utterances; spans only match within the same
/// utterance.
pub fn span_f1<S: AsRef<str>>(predicted: &[Vec<S>], gold: &[Vec<S>]) -> Result<SpanCounts> {
    if predicted.len() != gold.len() {
        return Err(Error::contract(
            "metrics",
            format!(
                "{} predicted vs {} gold utterances",
                predicted.len(),
                gold.len()
            ),
        ));
    }
    let mut counts = SpanCounts::default();
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::contract(
                "metrics",
                format!(
                    "utterance {i}: {} predicted vs {} gold tokens",
                    p.len(),
                    g.len()
                ),
            ));
        }
        let gold_spans: HashSet<Span> = extract_spans(g).into_iter().collect();
        let pred_spans = extract_spans(p);
        counts.gold += gold_spans.len();
        counts.predicted += pred_spans.len();
        counts.matched += pred_spans.iter().filter(|s| gold_spans.contains(s)).count();
    }
    Ok(counts)
}

pub fn ic_accuracy<S: PartialEq>(predicted: &[S], gold: &[S]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::contract(
            "metrics",
            format!(
                "{} predictions vs {} gold intents",
                predicted.len(),
                gold.len()
            ),
        ));
    }
    let correct = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(ratio(correct, gold.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub ic_accuracy: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub queries: usize,
    pub spans: SpanCounts,
}

impl EpisodeMetrics {
    pub fn compute<S: AsRef<str> + PartialEq>(
        predicted_intents: &[S],
        gold_intents: &[S],
        predicted_slots: &[Vec<S>],
        gold_slots: &[Vec<S>],
    ) -> Result<Self> {
        let ic = ic_accuracy(predicted_intents, gold_intents)?;
        let spans = span_f1(predicted_slots, gold_slots)?;
        Ok(EpisodeMetrics {
            ic_accuracy: ic,
            slot_precision: spans.precision(),
            slot_recall: spans.recall(),
            slot_f1: spans.f1(),
            queries: gold_intents.len(),
            spans,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample (n - 1) standard deviation; a single value has
    /// standard deviation 0.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub episodes: usize,
    pub ic_accuracy: MeanStd,
    pub slot_f1: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub episode_count: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedSummary>,
    /// Mean and standard deviation of the per-seed means.
    pub ic_accuracy: MeanStd,
    pub slot_f1: MeanStd,
}

/// Averages episodes within each seed, then summarizes across seeds.
pub fn aggregate(runs: &[(u64, Vec<EpisodeMetrics>)]) -> Result<AggregateReport> {
    if runs.is_empty() || runs.iter().any(|(_, eps)| eps.is_empty()) {
        return Err(Error::contract(
            "metrics",
            "aggregate needs at least one episode per seed",
        ));
    }
    let per_seed: Vec<SeedSummary> = runs
        .iter()
        .map(|(seed, eps)| {
            let ic: Vec<f64> = eps.iter().map(|e| e.ic_accuracy).collect();
            let f1: Vec<f64> = eps.iter().map(|e| e.slot_f1).collect();
            SeedSummary {
                seed: *seed,
                episodes: eps.len(),
                ic_accuracy: MeanStd::of(&ic),
                slot_f1: MeanStd::of(&f1),
            }
        })
        .collect();
    let ic_means: Vec<f64> = per_seed.iter().map(|s| s.ic_accuracy.mean).collect();
    let f1_means: Vec<f64> = per_seed.iter().map(|s| s.slot_f1.mean).collect();
    Ok(AggregateReport {
        episode_count: runs[0].1.len(),
        seeds: runs.iter().map(|(s, _)| *s).collect(),
        ic_accuracy: MeanStd::of(&ic_means),
        slot_f1: MeanStd::of(&f1_means),
        per_seed,
    })
}
