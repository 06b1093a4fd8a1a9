use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Optimizer, ParameterSet, Tape, Tensor};
use crate::data::UtteranceRecord;
use crate::encoder::{
    insert_random_heads, insert_zero_heads, EncodedVars, EncoderVars, Featurizer, Head,
    SlotRepresentation, FORWARD_BIAS,
};
use crate::error::{Error, Result};

use super::episode::{EpisodePrediction, LabelSpace, PreparedEpisode, PreparedSet};
use super::fomaml::EPISODE_HEAD_PREFIX;
use super::{backward_into, encode_set, encode_set_frozen, head_logits, joint_loss};

/// Per-episode adaptation settings used at evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            inner_steps: 8,
            inner_lr: 0.01,
            adapt_steps: 10,
            adapt_lr: 0.001,
        }
    }
}

/// Shuffled index batches covering `0..n` exactly once.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn state_dim(params: &ParameterSet) -> Result<usize> {
    Ok(params.require(FORWARD_BIAS)?.numel() / 2)
}

/// Adds randomly initialized global heads for `labels` unless heads of the
/// right shape already exist.
pub(crate) fn ensure_global_heads(
    params: &mut ParameterSet,
    labels: &LabelSpace,
    rng: &mut impl Rng,
) -> Result<()> {
    let dim = state_dim(params)?;
    let fits = |h: Head, n: usize| {
        params
            .get(&h.weight_name(""))
            .is_some_and(|w| w.shape() == [dim, n])
    };
    if !(fits(Head::Intent, labels.intents.len()) && fits(Head::Slot, labels.slots.len())) {
        insert_random_heads(
            params,
            "",
            dim,
            labels.intents.len(),
            labels.slots.len(),
            rng,
        );
    }
    Ok(())
}

/// One mini-batch update of the encoder and the global heads.
pub fn baseline_pretrain_step(
    params: &mut ParameterSet,
    featurizer: &Featurizer,
    batch: &[UtteranceRecord],
    labels: &LabelSpace,
    repr: SlotRepresentation,
    optimizer: &mut Optimizer,
) -> Result<f64> {
    let set = PreparedSet::new(featurizer, batch, labels)?;
    let loss = backward_into(params, |tape, bound| {
        let enc = EncoderVars::from_bound(tape, bound)?;
        let encoded = encode_set(tape, &enc, &set.features, repr)?;
        let (il, sl) = head_logits(tape, bound, "", &encoded)?;
        joint_loss(tape, il, sl, &set.intents, &set.slots)
    })?;
    optimizer.step(params)?;
    Ok(loss)
}

/// Mini-batch training over every class of `records` for `epochs` passes.
/// Returns the loss of every step.
#[allow(clippy::too_many_arguments)]
pub fn baseline_pretrain(
    params: &mut ParameterSet,
    featurizer: &Featurizer,
    records: &[UtteranceRecord],
    repr: SlotRepresentation,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::contract(
            "fewshot_algorithms",
            "empty training split",
        ));
    }
    let labels = LabelSpace::from_records(records, true);
    ensure_global_heads(params, &labels, rng)?;
    let mut opt = Optimizer::adam(learning_rate);
    let mut losses = Vec::new();
    for _ in 0..epochs {
        for idx in epoch_batches(records.len(), batch_size, rng) {
            let batch: Vec<UtteranceRecord> = idx.iter().map(|&i| records[i].clone()).collect();
            losses.push(baseline_pretrain_step(
                params, featurizer, &batch, &labels, repr, &mut opt,
            )?);
        }
    }
    Ok(losses)
}

/// Trains fresh zero heads on top of the frozen encoder with full-support
/// Adam steps, then predicts the query set. `params` is only read.
pub fn baseline_adapt_evaluate(
    params: &ParameterSet,
    episode: &PreparedEpisode,
    repr: SlotRepresentation,
    adapt: &AdaptConfig,
) -> Result<EpisodePrediction> {
    let dim = state_dim(params)?;
    let (s_sent, s_tok) = encode_set_frozen(params, &episode.support.features, repr)?;
    let (q_sent, q_tok) = encode_set_frozen(params, &episode.query.features, repr)?;
    let mut heads = ParameterSet::new();
    insert_zero_heads(
        &mut heads,
        EPISODE_HEAD_PREFIX,
        dim,
        episode.labels.intents.len(),
        episode.labels.slots.len(),
    );
    let constants = |tape: &mut Tape, sent: &Tensor, tok: &Tensor| {
        let sentence = tape.constant(sent.clone());
        let tokens = tape.constant(tok.clone());
        EncodedVars {
            token_states: tokens,
            sentence,
            slot_states: tokens,
        }
    };
    let mut opt = Optimizer::adam(adapt.adapt_lr);
    for _ in 0..adapt.adapt_steps {
        backward_into(&mut heads, |tape, bound| {
            let encoded = constants(tape, &s_sent, &s_tok);
            let (il, sl) = head_logits(tape, bound, EPISODE_HEAD_PREFIX, &encoded)?;
            joint_loss(
                tape,
                il,
                sl,
                &episode.support.intents,
                &episode.support.slots,
            )
        })?;
        opt.step(&mut heads)?;
    }
    let mut tape = Tape::new();
    let bound = heads.bind_frozen(&mut tape);
    let encoded = constants(&mut tape, &q_sent, &q_tok);
    let (il, sl) = head_logits(&mut tape, &bound, EPISODE_HEAD_PREFIX, &encoded)?;
    let lengths: Vec<usize> = episode.query.slots.iter().map(Vec::len).collect();
    Ok(EpisodePrediction::from_logits(
        &episode.labels,
        tape.value(il),
        tape.value(sl),
        &lengths,
    ))
}
