use crate::autodiff::{ParameterSet, Tape, Tensor, Var};
use crate::encoder::{encode_features, EncoderVars, SlotRepresentation};
use crate::error::{Error, Result};

use super::episode::{log_softmax, EpisodePrediction, LabelSpace, PreparedEpisode, PreparedSet};
use super::{encode_set, joint_loss};

/// Mean support embedding per intent and per slot label.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub labels: LabelSpace,
    /// `n×2H`, row order of `labels.intents`.
    pub intent_prototypes: Tensor,
    pub intent_counts: Vec<usize>,
    /// `k×2H`, row order of `labels.slots`.
    pub slot_prototypes: Tensor,
    pub slot_counts: Vec<usize>,
}

struct ProtoVars {
    intents: Var,
    slots: Var,
    intent_counts: Vec<usize>,
    slot_counts: Vec<usize>,
}

/// Row-normalized membership matrix: `A[c][i] = 1/|members of c|`.
fn averaging_matrix(members: &[Option<usize>], classes: usize) -> Result<(Tensor, Vec<usize>)> {
    let mut counts = vec![0usize; classes];
    for m in members.iter().flatten() {
        counts[*m] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::contract(
            "fewshot_algorithms",
            format!("label {c} has no support members"),
        ));
    }
    let mut a = vec![0.0; classes * members.len()];
    for (i, m) in members.iter().enumerate() {
        if let Some(c) = *m {
            a[c * members.len() + i] = 1.0 / counts[c] as f64;
        }
    }
    Ok((Tensor::matrix(classes, members.len(), a)?, counts))
}

fn prototypes_on_tape(
    tape: &mut Tape,
    enc: &EncoderVars,
    support: &PreparedSet,
    labels: &LabelSpace,
    repr: SlotRepresentation,
) -> Result<ProtoVars> {
    let encoded = encode_set(tape, enc, &support.features, repr)?;
    let (ai, intent_counts) = averaging_matrix(&support.intents, labels.intents.len())?;
    let tokens: Vec<Option<usize>> = support.slots.iter().flatten().copied().collect();
    let (asl, slot_counts) = averaging_matrix(&tokens, labels.slots.len())?;
    let ai = tape.constant(ai);
    let asl = tape.constant(asl);
    Ok(ProtoVars {
        intents: tape.matmul(ai, encoded.sentence)?,
        slots: tape.matmul(asl, encoded.slot_states)?,
        intent_counts,
        slot_counts,
    })
}

/// Negative squared distances from every query utterance to the intent
/// prototypes (`|Q|×n`) and from every query token to the slot prototypes
/// (`T×k`).
fn query_logits(
    tape: &mut Tape,
    enc: &EncoderVars,
    query: &PreparedSet,
    protos: &ProtoVars,
    repr: SlotRepresentation,
) -> Result<(Var, Var)> {
    let encoded = encode_set(tape, enc, &query.features, repr)?;
    let di = tape.sq_dist(encoded.sentence, protos.intents)?;
    let ds = tape.sq_dist(encoded.slot_states, protos.slots)?;
    Ok((tape.scale(di, -1.0), tape.scale(ds, -1.0)))
}

pub fn compute_prototypes(
    params: &ParameterSet,
    episode: &PreparedEpisode,
    repr: SlotRepresentation,
) -> Result<PrototypeSet> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let enc = EncoderVars::from_bound(&tape, &bound)?;
    let p = prototypes_on_tape(&mut tape, &enc, &episode.support, &episode.labels, repr)?;
    Ok(PrototypeSet {
        labels: episode.labels.clone(),
        intent_prototypes: tape.value(p.intents).clone(),
        intent_counts: p.intent_counts,
        slot_prototypes: tape.value(p.slots).clone(),
        slot_counts: p.slot_counts,
    })
}

fn neg_sq_dist_log_probs(x: &[f64], protos: &Tensor) -> Vec<f64> {
    let (k, _) = protos.dims2();
    let logits: Vec<f64> = (0..k)
        .map(|c| {
            -x.iter()
                .zip(protos.row(c))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .collect();
    log_softmax(&logits)
}

/// Intent log-probabilities of one query utterance and slot
/// log-probabilities of each of its tokens.
pub fn proto_log_probs(
    params: &ParameterSet,
    prototypes: &PrototypeSet,
    features: &Tensor,
    repr: SlotRepresentation,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if prototypes.labels.intents.is_empty() || prototypes.labels.slots.is_empty() {
        return Err(Error::contract("fewshot_algorithms", "empty prototype set"));
    }
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let enc = EncoderVars::from_bound(&tape, &bound)?;
    let e = encode_features(&mut tape, &enc, features, repr)?;
    let intent = neg_sq_dist_log_probs(
        tape.value(e.sentence).values(),
        &prototypes.intent_prototypes,
    );
    let states = tape.value(e.slot_states);
    let slots = (0..states.dims2().0)
        .map(|j| neg_sq_dist_log_probs(states.row(j), &prototypes.slot_prototypes))
        .collect();
    Ok((intent, slots))
}

/// Records the episode loss on `tape`: query intent and token negative
/// log-likelihoods under the prototype distributions, summed per utterance
/// and averaged over the query set. Query tokens whose label has no
/// prototype are left out.
pub fn proto_loss_on_tape(
    tape: &mut Tape,
    enc: &EncoderVars,
    episode: &PreparedEpisode,
    repr: SlotRepresentation,
) -> Result<Var> {
    let protos = prototypes_on_tape(tape, enc, &episode.support, &episode.labels, repr)?;
    let (il, sl) = query_logits(tape, enc, &episode.query, &protos, repr)?;
    joint_loss(tape, il, sl, &episode.query.intents, &episode.query.slots)
}

pub fn proto_episode_loss(
    params: &ParameterSet,
    episode: &PreparedEpisode,
    repr: SlotRepresentation,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let enc = EncoderVars::from_bound(&tape, &bound)?;
    let loss = proto_loss_on_tape(&mut tape, &enc, episode, repr)?;
    Ok(tape.value(loss).item())
}

/// Nearest-prototype predictions for the query set.
pub fn proto_predict(
    params: &ParameterSet,
    episode: &PreparedEpisode,
    repr: SlotRepresentation,
) -> Result<EpisodePrediction> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let enc = EncoderVars::from_bound(&tape, &bound)?;
    let protos = prototypes_on_tape(&mut tape, &enc, &episode.support, &episode.labels, repr)?;
    let (il, sl) = query_logits(&mut tape, &enc, &episode.query, &protos, repr)?;
    let lengths: Vec<usize> = episode.query.slots.iter().map(Vec::len).collect();
    Ok(EpisodePrediction::from_logits(
        &episode.labels,
        tape.value(il),
        tape.value(sl),
        &lengths,
    ))
}
