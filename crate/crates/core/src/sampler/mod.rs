//! Variable-way, variable-shot episode construction.
//!
//! An episode is built in four draws: the way `n` and class set `L`, the
//! query shot `k_q`, a support budget `|S|` scaled by `β ~ U(0, 1]`, and
//! per-class support shots `k_l` proportional to noisy class frequencies.
//! Support and query examples are then drawn without overlap and slot
//! labels present on only one side are remapped to the outside label.

mod buffer;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_bio, UtteranceRecord, OUTSIDE};
use crate::error::{Error, Result};

pub use buffer::{next_joint_dataset, EpisodeBuffer};

/// Smallest way an episode may have.
pub const MIN_WAY: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k_max: usize,
    pub seed: u64,
    pub query_cap: usize,
    pub per_class_cap: usize,
}

impl SamplerConfig {
    pub fn new(k_max: usize, seed: u64) -> Result<Self> {
        let cfg = SamplerConfig {
            k_max,
            seed,
            query_cap: 10,
            per_class_cap: 20,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_max < MIN_WAY {
            return Err(Error::contract(
                "episode_sampler",
                format!("k_max = {} is below the minimum way {MIN_WAY}", self.k_max),
            ));
        }
        if self.query_cap == 0 || self.per_class_cap == 0 {
            return Err(Error::contract("episode_sampler", "caps must be positive"));
        }
        Ok(())
    }
}

/// Examples of one split grouped by intent.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotSplit {
    pub name: String,
    classes: BTreeMap<String, Vec<UtteranceRecord>>,
}

impl FewShotSplit {
    pub fn from_records(name: impl Into<String>, records: Vec<UtteranceRecord>) -> Self {
        let mut classes: BTreeMap<String, Vec<UtteranceRecord>> = BTreeMap::new();
        for r in records {
            classes.entry(r.intent.clone()).or_default().push(r);
        }
        FewShotSplit {
            name: name.into(),
            classes,
        }
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn examples(&self, class: &str) -> &[UtteranceRecord] {
        self.classes.get(class).map_or(&[], Vec::as_slice)
    }

    pub fn class_size(&self, class: &str) -> usize {
        self.examples(class).len()
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &UtteranceRecord> {
        self.classes.values().flatten()
    }

    fn pool(&self) -> Vec<(&str, usize)> {
        self.classes
            .iter()
            .map(|(k, v)| (k.as_str(), v.len()))
            .collect()
    }
}

/// Every quantity drawn while building one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub way: usize,
    pub classes: Vec<String>,
    pub class_sizes: Vec<usize>,
    pub query_shot: usize,
    pub beta: f64,
    pub support_budget: usize,
    pub alpha: Vec<f64>,
    pub proportions: Vec<f64>,
    pub support_shots: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeSet {
    Support,
    Query,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemappedToken {
    pub set: EpisodeSet,
    pub example: usize,
    pub token: usize,
    pub original: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub source_dataset: String,
    pub trace: EpisodeTrace,
    pub support: Vec<UtteranceRecord>,
    pub query: Vec<UtteranceRecord>,
    pub remapped: Vec<RemappedToken>,
}

impl Episode {
    /// Sorted intent labels of the support set.
    pub fn intent_labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.support.iter().map(|r| r.intent.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Sorted slot labels of the support set, outside label included.
    pub fn slot_labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .support
            .iter()
            .flat_map(|r| r.slots.iter().map(String::as_str))
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Per query example, which tokens were remapped to the outside label.
    pub fn query_remap_mask(&self) -> Vec<Vec<bool>> {
        let mut mask: Vec<Vec<bool>> = self.query.iter().map(|r| vec![false; r.len()]).collect();
        for t in &self.remapped {
            if t.set == EpisodeSet::Query {
                mask[t.example][t.token] = true;
            }
        }
        mask
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("episode serializes")
    }
}

/// Deterministic generator for episode `counter` under `seed`. Each counter
/// selects an independent ChaCha stream, so episodes can be replayed
/// individually.
pub fn episode_rng(seed: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    rng
}

fn draw_way(pool: &[(&str, usize)], rng: &mut impl Rng) -> Result<(usize, Vec<usize>)> {
    if pool.len() < MIN_WAY {
        return Err(Error::SplitTooSmall {
            found: pool.len(),
            required: MIN_WAY,
        });
    }
    let way = rng.gen_range(MIN_WAY..=pool.len());
    let mut chosen = index::sample(rng, pool.len(), way).into_vec();
    chosen.sort_unstable();
    Ok((way, chosen))
}

/// `k_q = min(query_cap, min_l floor(|X_l| / 2))`.
pub fn query_shot(classes: &[(&str, usize)], cfg: &SamplerConfig) -> Result<usize> {
    let (name, size) = classes
        .iter()
        .min_by_key(|(_, s)| *s)
        .ok_or_else(|| Error::contract("episode_sampler", "empty class set"))?;
    let k_q = cfg.query_cap.min(size / 2);
    if k_q == 0 {
        return Err(Error::ClassTooSmall {
            class: name.to_string(),
            size: *size,
        });
    }
    Ok(k_q)
}

/// `|S| = min(K_max, Σ_l ceil(β · min(per_class_cap, |X_l| - k_q)))`.
pub fn support_budget(beta: f64, sizes: &[usize], k_q: usize, cfg: &SamplerConfig) -> usize {
    let total: usize = sizes
        .iter()
        .map(|&s| (beta * cfg.per_class_cap.min(s - k_q) as f64).ceil() as usize)
        .sum();
    cfg.k_max.min(total)
}

/// Normalized noisy proportions and support shots for fixed `α` draws:
/// `R_l = e^{α_l}|X_l| / Σ e^{α_l'}|X_l'|`,
/// `k_l = min(floor(R_l (|S| - |L|)) + 1, |X_l| - k_q)`.
pub fn class_shots(
    alpha: &[f64],
    sizes: &[usize],
    k_q: usize,
    budget: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if budget < sizes.len() {
        return Err(Error::contract(
            "episode_sampler",
            format!(
                "support budget {budget} is smaller than the way {}",
                sizes.len()
            ),
        ));
    }
    let weights: Vec<f64> = alpha
        .iter()
        .zip(sizes)
        .map(|(a, &s)| a.exp() * s as f64)
        .collect();
    let total: f64 = weights.iter().sum();
    let proportions: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let spare = (budget - sizes.len()) as f64;
    let shots = proportions
        .iter()
        .zip(sizes)
        .map(|(r, &s)| ((r * spare).floor() as usize + 1).min(s - k_q))
        .collect();
    Ok((proportions, shots))
}

fn draw_trace(
    pool: &[(&str, usize)],
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<EpisodeTrace> {
    let (way, chosen) = draw_way(pool, rng)?;
    let classes: Vec<(&str, usize)> = chosen.iter().map(|&i| pool[i]).collect();
    let sizes: Vec<usize> = classes.iter().map(|c| c.1).collect();
    let k_q = query_shot(&classes, cfg)?;
    let beta = 1.0 - rng.gen::<f64>();
    let budget = support_budget(beta, &sizes, k_q, cfg);
    let alpha: Vec<f64> = (0..way)
        .map(|_| rng.gen_range(0.5f64.ln()..2f64.ln()))
        .collect();
    let (proportions, support_shots) = class_shots(&alpha, &sizes, k_q, budget)?;
    Ok(EpisodeTrace {
        way,
        classes: classes.iter().map(|c| c.0.to_string()).collect(),
        class_sizes: sizes,
        query_shot: k_q,
        beta,
        support_budget: budget,
        alpha,
        proportions,
        support_shots,
    })
}

/// Draws disjoint support and query positions per class of `trace`.
fn draw_positions(
    trace: &EpisodeTrace,
    rng: &mut impl Rng,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    trace
        .classes
        .iter()
        .zip(&trace.class_sizes)
        .zip(&trace.support_shots)
        .map(|((class, &size), &k)| {
            let needed = k + trace.query_shot;
            if needed > size {
                return Err(Error::ClassExhausted {
                    class: class.clone(),
                    needed,
                    available: size,
                });
            }
            let mut picks = index::sample(rng, size, needed).into_vec();
            let query = picks.split_off(k);
            Ok((picks, query))
        })
        .collect()
}

/// Remaps slot labels that occur in only one of support/query to the
/// outside label. Labels are compared without their BIO tag.
fn remap_unshared(
    support: &mut [UtteranceRecord],
    query: &mut [UtteranceRecord],
) -> Vec<RemappedToken> {
    fn types(set: &[UtteranceRecord]) -> BTreeSet<String> {
        set.iter()
            .flat_map(|r| r.slots.iter())
            .map(|s| split_bio(s).1.to_string())
            .filter(|s| s != OUTSIDE)
            .collect()
    }
    let (in_support, in_query) = (types(support), types(query));
    let mut remapped = Vec::new();
    for (which, records, other) in [
        (EpisodeSet::Support, support, &in_query),
        (EpisodeSet::Query, query, &in_support),
    ] {
        for (e, r) in records.iter_mut().enumerate() {
            for (t, slot) in r.slots.iter_mut().enumerate() {
                let ty = split_bio(slot).1;
                if ty != OUTSIDE && !other.contains(ty) {
                    remapped.push(RemappedToken {
                        set: which,
                        example: e,
                        token: t,
                        original: std::mem::replace(slot, OUTSIDE.to_string()),
                    });
                }
            }
        }
    }
    remapped
}

fn build_episode(
    source: &str,
    trace: EpisodeTrace,
    examples: &[&[UtteranceRecord]],
    positions: &[(Vec<usize>, Vec<usize>)],
) -> Episode {
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (records, (s, q)) in examples.iter().zip(positions) {
        support.extend(s.iter().map(|&i| records[i].clone()));
        query.extend(q.iter().map(|&i| records[i].clone()));
    }
    let remapped = remap_unshared(&mut support, &mut query);
    Episode {
        source_dataset: source.to_string(),
        trace,
        support,
        query,
        remapped,
    }
}

pub fn sample_way(split: &FewShotSplit, rng: &mut impl Rng) -> Result<(usize, Vec<String>)> {
    let pool = split.pool();
    let (way, chosen) = draw_way(&pool, rng)?;
    Ok((way, chosen.iter().map(|&i| pool[i].0.to_string()).collect()))
}

pub fn sample_query_shot(
    classes: &[String],
    split: &FewShotSplit,
    cfg: &SamplerConfig,
) -> Result<usize> {
    let pool: Vec<(&str, usize)> = classes
        .iter()
        .map(|c| (c.as_str(), split.class_size(c)))
        .collect();
    query_shot(&pool, cfg)
}

/// Draws `β` and returns it with the resulting support budget.
pub fn sample_support_budget(
    classes: &[String],
    split: &FewShotSplit,
    k_q: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> (f64, usize) {
    let sizes: Vec<usize> = classes.iter().map(|c| split.class_size(c)).collect();
    let beta = 1.0 - rng.gen::<f64>();
    (beta, support_budget(beta, &sizes, k_q, cfg))
}

/// Draws `α_l` and returns `(α, R, k)`.
pub fn sample_class_shots(
    classes: &[String],
    split: &FewShotSplit,
    k_q: usize,
    budget: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    let sizes: Vec<usize> = classes.iter().map(|c| split.class_size(c)).collect();
    let alpha: Vec<f64> = (0..classes.len())
        .map(|_| rng.gen_range(0.5f64.ln()..2f64.ln()))
        .collect();
    let (r, k) = class_shots(&alpha, &sizes, k_q, budget)?;
    Ok((alpha, r, k))
}

pub fn assemble_episode(
    split: &FewShotSplit,
    trace: EpisodeTrace,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let positions = draw_positions(&trace, rng)?;
    let examples: Vec<&[UtteranceRecord]> =
        trace.classes.iter().map(|c| split.examples(c)).collect();
    Ok(build_episode(&split.name, trace, &examples, &positions))
}

/// Draws one complete episode from the whole split.
pub fn sample_episode(
    split: &FewShotSplit,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let trace = draw_trace(&split.pool(), cfg, rng)?;
    assemble_episode(split, trace, rng)
}

/// Independent episodes indexed by a counter; episode `i` depends only on
/// `(cfg.seed, i)` and the split.
pub struct EpisodeStream<'a> {
    split: &'a FewShotSplit,
    cfg: SamplerConfig,
    next: u64,
}

impl<'a> EpisodeStream<'a> {
    pub fn new(split: &'a FewShotSplit, cfg: SamplerConfig) -> Self {
        EpisodeStream {
            split,
            cfg,
            next: 0,
        }
    }

    pub fn episode(&self, counter: u64) -> Result<Episode> {
        sample_episode(
            self.split,
            &self.cfg,
            &mut episode_rng(self.cfg.seed, counter),
        )
    }
}

impl Iterator for EpisodeStream<'_> {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        let ep = self.episode(self.next);
        self.next += 1;
        Some(ep)
    }
}
