//! Joint prototypical networks, first-order MAML and the fine-tune
//! baseline, with the episodic training and evaluation loops.

mod baseline;
mod episode;
mod fomaml;
mod proto;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParameterSet, Tape, Tensor, Var};
use crate::encoder::{
    encode_features, head_forward, EncodedVars, EncoderConfig, EncoderVars, Featurizer, Head,
    SlotRepresentation,
};
use crate::error::{Error, Result};
use crate::metrics::EpisodeMetrics;
use crate::sampler::Episode;

pub use baseline::{
    baseline_adapt_evaluate, baseline_pretrain, baseline_pretrain_step, epoch_batches, AdaptConfig,
};
pub use episode::{
    argmax, log_softmax, EpisodePrediction, LabelSpace, PreparedEpisode, PreparedSet,
};
pub use fomaml::{
    fomaml_inner_finetune, fomaml_meta_step, fomaml_predict, HeadTask, MetaTask,
    EPISODE_HEAD_PREFIX,
};
pub use proto::{
    compute_prototypes, proto_episode_loss, proto_log_probs, proto_loss_on_tape, proto_predict,
    PrototypeSet,
};
pub use train::{evaluate, train, EpochStats, TrainLoopConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Proto,
    Fomaml,
    Finetune,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Proto => "proto",
            Algorithm::Fomaml => "fomaml",
            Algorithm::Finetune => "finetune",
        }
    }

    pub fn default_outer_lr(self) -> f64 {
        match self {
            Algorithm::Fomaml => 0.0029,
            Algorithm::Proto | Algorithm::Finetune => 0.001,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proto" => Ok(Algorithm::Proto),
            "fomaml" => Ok(Algorithm::Fomaml),
            "finetune" => Ok(Algorithm::Finetune),
            other => Err(Error::Config(vec![format!(
                "algorithm '{other}' is not one of proto, fomaml, finetune"
            )])),
        }
    }
}

/// Trainable parameters together with the frozen input pipeline.
#[derive(Clone, Debug)]
pub struct FewShotModel {
    pub config: EncoderConfig,
    pub featurizer: Featurizer,
    pub params: ParameterSet,
}

impl FewShotModel {
    pub fn slot_representation(&self) -> SlotRepresentation {
        self.config.slot_representation
    }
}

/// Encodes a prepared set, stacking sentence vectors (`N×2H`) and the
/// per-token slot states of every utterance in order (`T×2H`).
pub(crate) fn encode_set(
    tape: &mut Tape,
    enc: &EncoderVars,
    features: &[Tensor],
    repr: SlotRepresentation,
) -> Result<EncodedVars> {
    if features.is_empty() {
        return Err(Error::contract(
            "fewshot_algorithms",
            "cannot encode an empty set",
        ));
    }
    let mut sentences = Vec::with_capacity(features.len());
    let mut tokens = Vec::with_capacity(features.len());
    let mut states = Vec::with_capacity(features.len());
    for f in features {
        let e = encode_features(tape, enc, f, repr)?;
        sentences.push(e.sentence);
        tokens.push(e.slot_states);
        states.push(e.token_states);
    }
    Ok(EncodedVars {
        sentence: tape.concat(&sentences, 0)?,
        slot_states: tape.concat(&tokens, 0)?,
        token_states: tape.concat(&states, 0)?,
    })
}

/// Encodes a set with the encoder held fixed; the results are plain values.
pub(crate) fn encode_set_frozen(
    params: &ParameterSet,
    features: &[Tensor],
    repr: SlotRepresentation,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let enc = EncoderVars::from_bound(&tape, &bound)?;
    let out = encode_set(&mut tape, &enc, features, repr)?;
    Ok((
        tape.value(out.sentence).clone(),
        tape.value(out.slot_states).clone(),
    ))
}

/// Loss summed over one utterance's intent and tokens, averaged over the
/// utterances: mean intent cross entropy plus the token cross entropy
/// scaled by scored tokens per utterance. Entries without a target are
/// skipped.
pub(crate) fn joint_loss(
    tape: &mut Tape,
    intent_logits: Var,
    slot_logits: Var,
    intents: &[Option<usize>],
    slots: &[Vec<Option<usize>>],
) -> Result<Var> {
    let (rows, targets): (Vec<usize>, Vec<usize>) = intents
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .unzip();
    if rows.is_empty() {
        return Err(Error::contract(
            "fewshot_algorithms",
            "no utterance has a known intent",
        ));
    }
    let n = intents.len() as f64;
    let picked = if rows.len() == intents.len() {
        intent_logits
    } else {
        tape.select_rows(intent_logits, &rows)?
    };
    let mut loss = tape.softmax_cross_entropy(picked, &targets)?;
    let (token_rows, token_targets): (Vec<usize>, Vec<usize>) = slots
        .iter()
        .flatten()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .unzip();
    if !token_rows.is_empty() {
        let total: usize = slots.iter().map(Vec::len).sum();
        let picked = if token_rows.len() == total {
            slot_logits
        } else {
            tape.select_rows(slot_logits, &token_rows)?
        };
        let ce = tape.softmax_cross_entropy(picked, &token_targets)?;
        let weighted = tape.scale(ce, token_rows.len() as f64 / n);
        loss = tape.add(loss, weighted)?;
    }
    Ok(loss)
}

/// Intent and slot logits of the heads under `prefix` for stacked
/// encodings.
pub(crate) fn head_logits(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    encoded: &EncodedVars,
) -> Result<(Var, Var)> {
    Ok((
        head_forward(tape, bound, prefix, encoded, Head::Intent)?,
        head_forward(tape, bound, prefix, encoded, Head::Slot)?,
    ))
}

/// Builds a loss on a fresh tape, runs backward and adds the gradients into
/// `params`. Returns the loss value.
pub fn backward_into(
    params: &mut ParameterSet,
    build: impl FnOnce(&mut Tape, &Bound) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    params.accumulate_grads(&bound, &grads)?;
    Ok(value)
}

/// Adapts to the support set as the algorithm prescribes and predicts the
/// query set. Slot predictions at query tokens whose gold label was
/// remapped are replaced by the outside label before scoring.
pub fn evaluate_episode(
    algorithm: Algorithm,
    model: &FewShotModel,
    episode: &Episode,
    adapt: &AdaptConfig,
) -> Result<(EpisodePrediction, EpisodeMetrics)> {
    let repr = model.slot_representation();
    let mut prediction = match algorithm {
        Algorithm::Proto => {
            let prep = PreparedEpisode::new(&model.featurizer, episode, false)?;
            proto_predict(&model.params, &prep, repr)?
        }
        Algorithm::Fomaml => {
            let prep = PreparedEpisode::new(&model.featurizer, episode, true)?;
            fomaml_predict(
                &model.params,
                &prep,
                repr,
                adapt.inner_steps,
                adapt.inner_lr,
            )?
        }
        Algorithm::Finetune => {
            let prep = PreparedEpisode::new(&model.featurizer, episode, true)?;
            baseline_adapt_evaluate(&model.params, &prep, repr, adapt)?
        }
    };
    prediction.mask_slots(&episode.query_remap_mask());
    let gold_intents: Vec<&str> = episode.query.iter().map(|r| r.intent.as_str()).collect();
    let gold_slots: Vec<Vec<&str>> = episode
        .query
        .iter()
        .map(|r| r.slots.iter().map(String::as_str).collect())
        .collect();
    let pred_intents: Vec<&str> = prediction.intents.iter().map(String::as_str).collect();
    let pred_slots: Vec<Vec<&str>> = prediction
        .slots
        .iter()
        .map(|t| t.iter().map(String::as_str).collect())
        .collect();
    let metrics = EpisodeMetrics::compute(&pred_intents, &gold_intents, &pred_slots, &gold_slots)?;
    Ok((prediction, metrics))
}
