use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Optimizer;
use crate::data::UtteranceRecord;
use crate::error::{Error, Result};
use crate::metrics::EpisodeMetrics;
use crate::sampler::{
    next_joint_dataset, EpisodeBuffer, EpisodeStream, FewShotSplit, SamplerConfig,
};

use super::baseline::{baseline_pretrain_step, ensure_global_heads, epoch_batches, AdaptConfig};
use super::episode::{LabelSpace, PreparedEpisode};
use super::fomaml::{fomaml_meta_step, HeadTask};
use super::proto::proto_loss_on_tape;
use super::{backward_into, evaluate_episode, Algorithm, FewShotModel};
use crate::encoder::EncoderVars;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLoopConfig {
    pub algorithm: Algorithm,
    pub outer_lr: f64,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub baseline_batch: usize,
    pub baseline_adapt_steps: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
}

impl TrainLoopConfig {
    /// Defaults for non-contextual embeddings.
    pub fn new(algorithm: Algorithm) -> Self {
        TrainLoopConfig {
            algorithm,
            outer_lr: algorithm.default_outer_lr(),
            inner_lr: 0.01,
            inner_steps: 8,
            baseline_batch: 512,
            baseline_adapt_steps: 10,
            epochs: 50,
            episodes_per_epoch: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.outer_lr.is_nan() || self.outer_lr <= 0.0 {
            problems.push(format!("outer_lr must be positive, got {}", self.outer_lr));
        }
        if self.inner_lr.is_nan() || self.inner_lr <= 0.0 {
            problems.push(format!("inner_lr must be positive, got {}", self.inner_lr));
        }
        if self.baseline_batch == 0 {
            problems.push("baseline_batch must be positive".into());
        }
        if self.episodes_per_epoch == 0 {
            problems.push("episodes_per_epoch must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn adapt(&self) -> AdaptConfig {
        AdaptConfig {
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            adapt_steps: self.baseline_adapt_steps,
            adapt_lr: match self.algorithm {
                Algorithm::Finetune => self.outer_lr,
                _ => 0.001,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Episodes, or mini-batches for the baseline.
    pub updates: usize,
    pub mean_loss: f64,
    pub refreshes: usize,
}

/// Stream id of the training generator, kept apart from the per-episode
/// evaluation streams.
const TRAIN_STREAM: u64 = u64::MAX;

/// Trains `model` on one or more datasets.
///
/// Episodic algorithms draw `episodes_per_epoch` episodes per epoch; with
/// several datasets each episode's source is picked uniformly. The baseline
/// makes one shuffled pass per epoch over a single dataset, or draws as
/// many batches from uniformly picked dataset buffers when several are
/// registered. `on_epoch` runs after every epoch.
pub fn train(
    model: &mut FewShotModel,
    datasets: &[FewShotSplit],
    cfg: &TrainLoopConfig,
    sampler: &SamplerConfig,
    mut on_epoch: impl FnMut(&EpochStats, &FewShotModel) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    sampler.validate()?;
    if datasets.is_empty() {
        return Err(Error::contract(
            "fewshot_algorithms",
            "no training datasets",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut buffers: Vec<EpisodeBuffer> =
        datasets.iter().cloned().map(EpisodeBuffer::new).collect();
    let repr = model.slot_representation();
    let mut optimizer = Optimizer::adam(cfg.outer_lr);
    let all: Vec<UtteranceRecord> = datasets.iter().flat_map(|d| d.records().cloned()).collect();
    let labels = LabelSpace::from_records(&all, true);
    if cfg.algorithm == Algorithm::Finetune {
        ensure_global_heads(&mut model.params, &labels, &mut rng)?;
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut updates = 0;
        match cfg.algorithm {
            Algorithm::Finetune if datasets.len() == 1 => {
                for idx in epoch_batches(all.len(), cfg.baseline_batch, &mut rng) {
                    let batch: Vec<UtteranceRecord> = idx.iter().map(|&i| all[i].clone()).collect();
                    total += baseline_pretrain_step(
                        &mut model.params,
                        &model.featurizer,
                        &batch,
                        &labels,
                        repr,
                        &mut optimizer,
                    )?;
                    updates += 1;
                }
            }
            Algorithm::Finetune => {
                let batches = all.len().div_ceil(cfg.baseline_batch);
                for _ in 0..batches {
                    let d = next_joint_dataset(&buffers, &mut rng)?;
                    let batch = buffers[d].next_batch(cfg.baseline_batch, &mut rng);
                    total += baseline_pretrain_step(
                        &mut model.params,
                        &model.featurizer,
                        &batch,
                        &labels,
                        repr,
                        &mut optimizer,
                    )?;
                    updates += 1;
                }
            }
            Algorithm::Proto | Algorithm::Fomaml => {
                for _ in 0..cfg.episodes_per_epoch {
                    let d = next_joint_dataset(&buffers, &mut rng)?;
                    let episode = buffers[d].next_episode(sampler, &mut rng)?;
                    total += if cfg.algorithm == Algorithm::Proto {
                        let prep = PreparedEpisode::new(&model.featurizer, &episode, false)?;
                        let loss = backward_into(&mut model.params, |tape, bound| {
                            let enc = EncoderVars::from_bound(tape, bound)?;
                            proto_loss_on_tape(tape, &enc, &prep, repr)
                        })?;
                        optimizer.step(&mut model.params)?;
                        loss
                    } else {
                        let prep = PreparedEpisode::new(&model.featurizer, &episode, true)?;
                        let task = HeadTask::new(&prep, repr);
                        fomaml_meta_step(
                            &mut model.params,
                            &task,
                            cfg.inner_steps,
                            cfg.inner_lr,
                            &mut optimizer,
                        )?
                    };
                    updates += 1;
                }
            }
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            updates,
            mean_loss: total / updates.max(1) as f64,
            refreshes: buffers.iter().map(EpisodeBuffer::refreshes).sum(),
        };
        log::info!(
            "epoch {}: {} updates, mean loss {:.5}",
            stats.epoch,
            stats.updates,
            stats.mean_loss
        );
        on_epoch(&stats, model)?;
        history.push(stats);
    }
    Ok(history)
}

/// Evaluates on `episodes` episodes replayed from `sampler.seed`.
pub fn evaluate(
    algorithm: Algorithm,
    model: &FewShotModel,
    split: &FewShotSplit,
    sampler: &SamplerConfig,
    episodes: usize,
    adapt: &AdaptConfig,
) -> Result<Vec<EpisodeMetrics>> {
    let stream = EpisodeStream::new(split, sampler.clone());
    (0..episodes as u64)
        .map(|i| {
            let episode = stream.episode(i)?;
            evaluate_episode(algorithm, model, &episode, adapt).map(|(_, m)| m)
        })
        .collect()
}
