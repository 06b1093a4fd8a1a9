use crate::autodiff::{Bound, Optimizer, ParameterSet, Tape, Var};
use crate::encoder::{insert_zero_heads, EncoderVars, SlotRepresentation};
use crate::error::Result;

use super::episode::{EpisodePrediction, PreparedEpisode, PreparedSet};
use super::{backward_into, encode_set, head_logits, joint_loss};

/// Name prefix of the per-episode heads added during adaptation.
pub const EPISODE_HEAD_PREFIX: &str = "episode.";

/// A task the meta-learner adapts to: a loss on the support set for the
/// inner loop and one on the query set for the meta-gradient.
pub trait MetaTask {
    /// Starting point of the inner loop, derived from the shared
    /// parameters. The default is an unchanged copy.
    fn adapt_init(&self, params: &ParameterSet) -> ParameterSet {
        params.clone()
    }

    fn support_loss(&self, tape: &mut Tape, bound: &Bound) -> Result<Var>;

    fn query_loss(&self, tape: &mut Tape, bound: &Bound) -> Result<Var>;
}

/// `d` plain SGD steps on the support loss, starting from
/// [`MetaTask::adapt_init`]. `params` is not modified.
pub fn fomaml_inner_finetune<T: MetaTask>(
    params: &ParameterSet,
    task: &T,
    steps: usize,
    inner_lr: f64,
) -> Result<ParameterSet> {
    let mut adapted = task.adapt_init(params);
    adapted.zero_grads();
    let mut sgd = Optimizer::sgd(inner_lr);
    for _ in 0..steps {
        backward_into(&mut adapted, |tape, bound| task.support_loss(tape, bound))?;
        sgd.step(&mut adapted)?;
    }
    Ok(adapted)
}

/// One meta step: adapt on the support set, take the query-loss gradient at
/// the adapted parameters and let `outer` apply it to the shared ones.
/// Parameters that exist only in the adapted copy (episode heads) are
/// dropped. Returns the query loss.
pub fn fomaml_meta_step<T: MetaTask>(
    params: &mut ParameterSet,
    task: &T,
    steps: usize,
    inner_lr: f64,
    outer: &mut Optimizer,
) -> Result<f64> {
    let adapted = fomaml_inner_finetune(params, task, steps, inner_lr)?;
    let mut tape = Tape::new();
    let bound = adapted.bind(&mut tape);
    let loss = task.query_loss(&mut tape, &bound)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    params.zero_grads();
    params.accumulate_grads(&bound, &grads)?;
    outer.step(params)?;
    Ok(value)
}

/// Episode task with zero-initialized heads sized to the episode.
pub struct HeadTask<'a> {
    pub episode: &'a PreparedEpisode,
    pub repr: SlotRepresentation,
}

impl<'a> HeadTask<'a> {
    pub fn new(episode: &'a PreparedEpisode, repr: SlotRepresentation) -> Self {
        HeadTask { episode, repr }
    }

    fn loss(&self, tape: &mut Tape, bound: &Bound, set: &PreparedSet) -> Result<Var> {
        let enc = EncoderVars::from_bound(tape, bound)?;
        let encoded = encode_set(tape, &enc, &set.features, self.repr)?;
        let (il, sl) = head_logits(tape, bound, EPISODE_HEAD_PREFIX, &encoded)?;
        joint_loss(tape, il, sl, &set.intents, &set.slots)
    }
}

impl MetaTask for HeadTask<'_> {
    fn adapt_init(&self, params: &ParameterSet) -> ParameterSet {
        let mut adapted = params.clone();
        let dim = params
            .get(crate::encoder::FORWARD_BIAS)
            .map(|b| b.numel() / 2)
            .unwrap_or(0);
        insert_zero_heads(
            &mut adapted,
            EPISODE_HEAD_PREFIX,
            dim,
            self.episode.labels.intents.len(),
            self.episode.labels.slots.len(),
        );
        adapted
    }

    fn support_loss(&self, tape: &mut Tape, bound: &Bound) -> Result<Var> {
        self.loss(tape, bound, &self.episode.support)
    }

    fn query_loss(&self, tape: &mut Tape, bound: &Bound) -> Result<Var> {
        self.loss(tape, bound, &self.episode.query)
    }
}

/// Inner-loop adaptation on the support set followed by head predictions
/// on the query set.
pub fn fomaml_predict(
    params: &ParameterSet,
    episode: &PreparedEpisode,
    repr: SlotRepresentation,
    steps: usize,
    inner_lr: f64,
) -> Result<EpisodePrediction> {
    let task = HeadTask::new(episode, repr);
    let adapted = fomaml_inner_finetune(params, &task, steps, inner_lr)?;
    let mut tape = Tape::new();
    let bound = adapted.bind_frozen(&mut tape);
    let enc = EncoderVars::from_bound(&tape, &bound)?;
    let encoded = encode_set(&mut tape, &enc, &episode.query.features, repr)?;
    let (il, sl) = head_logits(&mut tape, &bound, EPISODE_HEAD_PREFIX, &encoded)?;
    let lengths: Vec<usize> = episode.query.slots.iter().map(Vec::len).collect();
    Ok(EpisodePrediction::from_logits(
        &episode.labels,
        tape.value(il),
        tape.value(sl),
        &lengths,
    ))
}
