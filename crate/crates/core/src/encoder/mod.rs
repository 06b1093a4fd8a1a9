//! Frozen embedding lookup, a bidirectional gated recurrent encoder and the
//! fully connected intent and slot heads.

mod embeddings;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{xavier_uniform, zeros_param, Bound, ParameterSet, Tape, Tensor, Var};
use crate::data::UtteranceRecord;
use crate::error::{Error, Result};

pub use embeddings::{
    load_embeddings, parse_embeddings, ContextualVectors, EmbeddingCoverage, EmbeddingTable,
    Vocabulary, UNKNOWN_TOKEN,
};

pub const FORWARD_WEIGHT: &str = "encoder.forward.weight";
pub const FORWARD_BIAS: &str = "encoder.forward.bias";
pub const BACKWARD_WEIGHT: &str = "encoder.backward.weight";
pub const BACKWARD_BIAS: &str = "encoder.backward.bias";
pub const ENCODER_PARAMS: [&str; 4] =
    [FORWARD_WEIGHT, FORWARD_BIAS, BACKWARD_WEIGHT, BACKWARD_BIAS];

/// Which per-token vector feeds the slot head or slot prototypes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotRepresentation {
    /// Concatenated forward and backward states at each position.
    #[default]
    TokenState,
    /// Sentence vector of the prefix ending at each position. Quadratic in
    /// the utterance length.
    Prefix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    /// Hidden size of each direction; token states have width `2 * hidden_dim`.
    pub hidden_dim: usize,
    #[serde(default)]
    pub contextual_vectors: bool,
    #[serde(default)]
    pub slot_representation: SlotRepresentation,
}

impl EncoderConfig {
    pub fn new(embedding_dim: usize, hidden_dim: usize) -> Self {
        EncoderConfig {
            embedding_dim,
            hidden_dim,
            contextual_vectors: false,
            slot_representation: SlotRepresentation::TokenState,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::contract(
                "encoder_model",
                "embedding_dim and hidden_dim must be positive",
            ));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// Fresh recurrent weights for both directions.
pub fn init_encoder_params(config: &EncoderConfig, rng: &mut impl Rng) -> Result<ParameterSet> {
    config.validate()?;
    let (e, h) = (config.embedding_dim, config.hidden_dim);
    let mut params = ParameterSet::new();
    params.insert(FORWARD_WEIGHT, xavier_uniform(rng, e + h, 4 * h));
    params.insert(FORWARD_BIAS, zeros_param(&[4 * h]));
    params.insert(BACKWARD_WEIGHT, xavier_uniform(rng, e + h, 4 * h));
    params.insert(BACKWARD_BIAS, zeros_param(&[4 * h]));
    Ok(params)
}

/// Where token input vectors come from.
#[derive(Clone, Debug, PartialEq)]
pub enum InputSource {
    Table(EmbeddingTable),
    Contextual(ContextualVectors),
}

/// Turns records into `m×E` input matrices. Holds only frozen state.
#[derive(Clone, Debug, PartialEq)]
pub struct Featurizer {
    pub vocab: Vocabulary,
    pub source: InputSource,
}

impl Featurizer {
    pub fn from_table(vocab: Vocabulary, table: EmbeddingTable) -> Self {
        Featurizer {
            vocab,
            source: InputSource::Table(table),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.source {
            InputSource::Table(t) => t.dim(),
            InputSource::Contextual(c) => c.dim(),
        }
    }

    pub fn features(&self, record: &UtteranceRecord) -> Result<Tensor> {
        if record.tokens.is_empty() {
            return Err(Error::EmptyUtterance);
        }
        match &self.source {
            InputSource::Table(t) => Ok(t.lookup(&self.vocab, &record.tokens)),
            InputSource::Contextual(c) => {
                let v = c.get(&record.id).ok_or_else(|| {
                    Error::contract(
                        "encoder_model",
                        format!("no contextual vectors for utterance '{}'", record.id),
                    )
                })?;
                if v.dims2().0 != record.len() {
                    return Err(Error::contract(
                        "encoder_model",
                        format!(
                            "utterance '{}' has {} tokens but {} vectors",
                            record.id,
                            record.len(),
                            v.dims2().0
                        ),
                    ));
                }
                Ok(v.clone())
            }
        }
    }
}

/// Tape handles for the four encoder parameters.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub forward_weight: Var,
    pub forward_bias: Var,
    pub backward_weight: Var,
    pub backward_bias: Var,
    pub hidden_dim: usize,
}

impl EncoderVars {
    pub fn from_bound(tape: &Tape, bound: &Bound) -> Result<Self> {
        let forward_bias = bound.var(FORWARD_BIAS)?;
        Ok(EncoderVars {
            forward_weight: bound.var(FORWARD_WEIGHT)?,
            forward_bias,
            backward_weight: bound.var(BACKWARD_WEIGHT)?,
            backward_bias: bound.var(BACKWARD_BIAS)?,
            hidden_dim: tape.value(forward_bias).numel() / 4,
        })
    }
}

/// Encoder outputs as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// `m×2H`
    pub token_states: Var,
    /// `2H`
    pub sentence: Var,
    /// `m×2H`; equal to `token_states` unless prefix encoding is selected.
    pub slot_states: Var,
}

fn run_direction(
    tape: &mut Tape,
    rows: &[Var],
    order: impl Iterator<Item = usize>,
    weight: Var,
    bias: Var,
    h: usize,
) -> Result<Vec<(usize, Var)>> {
    let mut state = tape.constant(Tensor::zeros(&[2 * h]));
    let mut out = Vec::with_capacity(rows.len());
    for j in order {
        state = tape.lstm_cell(rows[j], state, weight, bias)?;
        out.push((j, tape.slice(state, 0, h)?));
    }
    Ok(out)
}

/// Runs both directions over the input rows.
pub fn encode_rows(
    tape: &mut Tape,
    enc: &EncoderVars,
    rows: &[Var],
    slot_representation: SlotRepresentation,
) -> Result<EncodedVars> {
    let m = rows.len();
    if m == 0 {
        return Err(Error::EmptyUtterance);
    }
    let h = enc.hidden_dim;
    let fwd = run_direction(tape, rows, 0..m, enc.forward_weight, enc.forward_bias, h)?;
    let mut bwd = run_direction(
        tape,
        rows,
        (0..m).rev(),
        enc.backward_weight,
        enc.backward_bias,
        h,
    )?;
    bwd.reverse();
    let mut per_token = Vec::with_capacity(m);
    for j in 0..m {
        per_token.push(tape.concat(&[fwd[j].1, bwd[j].1], 1)?);
    }
    let token_states = tape.concat(&per_token, 0)?;
    let sentence = tape.concat(&[fwd[m - 1].1, bwd[0].1], 1)?;
    let slot_states = match slot_representation {
        SlotRepresentation::TokenState => token_states,
        SlotRepresentation::Prefix => {
            let mut prefix = Vec::with_capacity(m);
            for (j, f) in fwd.iter().enumerate() {
                let back = if j == m - 1 {
                    bwd[0].1
                } else {
                    let run = run_direction(
                        tape,
                        rows,
                        (0..=j).rev(),
                        enc.backward_weight,
                        enc.backward_bias,
                        h,
                    )?;
                    run[run.len() - 1].1
                };
                prefix.push(tape.concat(&[f.1, back], 1)?);
            }
            tape.concat(&prefix, 0)?
        }
    };
    Ok(EncodedVars {
        token_states,
        sentence,
        slot_states,
    })
}

/// Records the rows of a frozen `m×E` feature matrix as constants and
/// encodes them.
pub fn encode_features(
    tape: &mut Tape,
    enc: &EncoderVars,
    features: &Tensor,
    slot_representation: SlotRepresentation,
) -> Result<EncodedVars> {
    let (m, _) = features.dims2();
    let rows: Vec<Var> = (0..m)
        .map(|j| tape.constant(Tensor::vector(features.row(j).to_vec())))
        .collect();
    encode_rows(tape, enc, &rows, slot_representation)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedUtterance {
    pub token_states: Tensor,
    pub sentence_vector: Tensor,
}

/// Forward pass without gradient tracking.
pub fn encode_utterance(params: &ParameterSet, features: &Tensor) -> Result<EncodedUtterance> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let enc = EncoderVars::from_bound(&tape, &bound)?;
    let out = encode_features(&mut tape, &enc, features, SlotRepresentation::TokenState)?;
    Ok(EncodedUtterance {
        token_states: tape.value(out.token_states).clone(),
        sentence_vector: tape.value(out.sentence).clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Intent,
    Slot,
}

impl Head {
    pub fn weight_name(self, prefix: &str) -> String {
        match self {
            Head::Intent => format!("{prefix}intent_head.weight"),
            Head::Slot => format!("{prefix}slot_head.weight"),
        }
    }

    pub fn bias_name(self, prefix: &str) -> String {
        match self {
            Head::Intent => format!("{prefix}intent_head.bias"),
            Head::Slot => format!("{prefix}slot_head.bias"),
        }
    }
}

/// Adds zero-initialized intent and slot heads under `prefix`.
pub fn insert_zero_heads(
    params: &mut ParameterSet,
    prefix: &str,
    state_dim: usize,
    intents: usize,
    slots: usize,
) {
    params.insert(
        Head::Intent.weight_name(prefix),
        zeros_param(&[state_dim, intents]),
    );
    params.insert(Head::Intent.bias_name(prefix), zeros_param(&[intents]));
    params.insert(
        Head::Slot.weight_name(prefix),
        zeros_param(&[state_dim, slots]),
    );
    params.insert(Head::Slot.bias_name(prefix), zeros_param(&[slots]));
}

/// Adds Xavier-initialized heads under `prefix`.
pub fn insert_random_heads(
    params: &mut ParameterSet,
    prefix: &str,
    state_dim: usize,
    intents: usize,
    slots: usize,
    rng: &mut impl Rng,
) {
    params.insert(
        Head::Intent.weight_name(prefix),
        xavier_uniform(rng, state_dim, intents),
    );
    params.insert(Head::Intent.bias_name(prefix), zeros_param(&[intents]));
    params.insert(
        Head::Slot.weight_name(prefix),
        xavier_uniform(rng, state_dim, slots),
    );
    params.insert(Head::Slot.bias_name(prefix), zeros_param(&[slots]));
}

/// Intent logits `[n]` from the sentence vector, or slot logits `m×k` from
/// the per-token states.
pub fn head_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    encoded: &EncodedVars,
    head: Head,
) -> Result<Var> {
    let w = bound.var(&head.weight_name(prefix))?;
    let b = bound.var(&head.bias_name(prefix))?;
    let x = match head {
        Head::Intent => encoded.sentence,
        Head::Slot => encoded.slot_states,
    };
    let z = tape.matmul(x, w)?;
    tape.add_bias(z, b)
}
