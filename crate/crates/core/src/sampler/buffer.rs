use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use super::{build_episode, draw_positions, draw_trace, Episode, FewShotSplit, SamplerConfig};
use crate::data::UtteranceRecord;
use crate::error::{Error, Result};

/// Sampling without reuse: examples handed out in an episode or batch are
/// removed until the buffer can no longer supply one, at which point it is
/// refilled with the whole split.
#[derive(Clone, Debug)]
pub struct EpisodeBuffer {
    split: FewShotSplit,
    remaining: BTreeMap<String, Vec<usize>>,
    refreshes: usize,
}

impl EpisodeBuffer {
    pub fn new(split: FewShotSplit) -> Self {
        let mut buffer = EpisodeBuffer {
            split,
            remaining: BTreeMap::new(),
            refreshes: 0,
        };
        buffer.fill();
        buffer
    }

    fn fill(&mut self) {
        self.remaining = self
            .split
            .classes()
            .map(|c| (c.to_string(), (0..self.split.class_size(c)).collect()))
            .collect();
    }

    pub fn name(&self) -> &str {
        &self.split.name
    }

    pub fn split(&self) -> &FewShotSplit {
        &self.split
    }

    pub fn remaining(&self) -> usize {
        self.remaining.values().map(Vec::len).sum()
    }

    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    pub fn refresh(&mut self) {
        self.fill();
        self.refreshes += 1;
    }

    fn try_episode(&mut self, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Episode> {
        // classes with fewer than two examples cannot contribute a query
        let eligible: Vec<(&str, usize)> = self
            .remaining
            .iter()
            .filter(|(_, v)| v.len() >= 2)
            .map(|(k, v)| (k.as_str(), v.len()))
            .collect();
        let trace = draw_trace(&eligible, cfg, rng)?;
        let positions = draw_positions(&trace, rng)?;
        let mut used: Vec<Vec<usize>> = Vec::with_capacity(trace.classes.len());
        let mut examples: Vec<Vec<UtteranceRecord>> = Vec::with_capacity(trace.classes.len());
        for (class, (s, q)) in trace.classes.iter().zip(&positions) {
            let pool = &self.remaining[class];
            let records = self.split.examples(class);
            let ids: Vec<usize> = s.iter().chain(q).map(|&p| pool[p]).collect();
            // positions are re-expressed against the materialized subset
            examples.push(ids.iter().map(|&i| records[i].clone()).collect());
            used.push(ids);
        }
        let local: Vec<(Vec<usize>, Vec<usize>)> = positions
            .iter()
            .map(|(s, q)| {
                (
                    (0..s.len()).collect(),
                    (s.len()..s.len() + q.len()).collect(),
                )
            })
            .collect();
        let slices: Vec<&[UtteranceRecord]> = examples.iter().map(Vec::as_slice).collect();
        let episode = build_episode(&self.split.name, trace, &slices, &local);
        for (class, ids) in episode.trace.classes.iter().zip(&used) {
            let drop: BTreeSet<usize> = ids.iter().copied().collect();
            if let Some(pool) = self.remaining.get_mut(class) {
                pool.retain(|i| !drop.contains(i));
            }
        }
        Ok(episode)
    }

    /// Samples an episode from the remaining examples, refilling first when
    /// they cannot form one.
    pub fn next_episode(&mut self, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Episode> {
        match self.try_episode(cfg, rng) {
            Ok(ep) => Ok(ep),
            Err(
                Error::SplitTooSmall { .. }
                | Error::ClassTooSmall { .. }
                | Error::ClassExhausted { .. },
            ) => {
                self.refresh();
                self.try_episode(cfg, rng)
            }
            Err(e) => Err(e),
        }
    }

    /// Removes up to `size` random examples, refilling first when fewer than
    /// `size` remain.
    pub fn next_batch(&mut self, size: usize, rng: &mut impl Rng) -> Vec<UtteranceRecord> {
        if self.remaining() < size {
            self.refresh();
        }
        let mut all: Vec<(String, usize)> = self
            .remaining
            .iter()
            .flat_map(|(c, v)| v.iter().map(move |&i| (c.clone(), i)))
            .collect();
        all.shuffle(rng);
        all.truncate(size);
        let mut batch = Vec::with_capacity(all.len());
        for (class, i) in &all {
            batch.push(self.split.examples(class)[*i].clone());
        }
        for (class, i) in all {
            if let Some(pool) = self.remaining.get_mut(&class) {
                pool.retain(|&j| j != i);
            }
        }
        batch
    }
}

/// Picks the index of the buffer to draw the next episode or batch from,
/// uniformly over registered datasets.
pub fn next_joint_dataset(buffers: &[EpisodeBuffer], rng: &mut impl Rng) -> Result<usize> {
    if buffers.is_empty() {
        return Err(Error::contract("episode_sampler", "no datasets registered"));
    }
    Ok(rng.gen_range(0..buffers.len()))
}
