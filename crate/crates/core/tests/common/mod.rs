#![allow(dead_code)]

use fsicsf::algorithms::FewShotModel;
use fsicsf::data::UtteranceRecord;
use fsicsf::encoder::{init_encoder_params, EmbeddingTable, EncoderConfig, Featurizer, Vocabulary};
use fsicsf::sampler::{episode_rng, Episode, EpisodeTrace, FewShotSplit};

pub fn record(id: &str, intent: &str, tokens: &str, slots: &str) -> UtteranceRecord {
    UtteranceRecord::new(
        id,
        tokens.split_whitespace().map(String::from).collect(),
        slots.split_whitespace().map(String::from).collect(),
        intent,
    )
    .unwrap()
}

/// Classes of the given sizes; every example is `w0 w1` labelled `O x`.
pub fn synthetic_split(sizes: &[(&str, usize)]) -> FewShotSplit {
    let records = sizes
        .iter()
        .flat_map(|&(name, n)| {
            (0..n).map(move |i| record(&format!("{name}-{i}"), name, "w0 w1", "O x"))
        })
        .collect();
    FewShotSplit::from_records("synthetic", records)
}

/// Random frozen embeddings and a freshly initialized encoder over the
/// vocabulary of `records`.
pub fn model_for<'a>(
    records: impl IntoIterator<Item = &'a UtteranceRecord>,
    embedding_dim: usize,
    hidden_dim: usize,
    seed: u64,
) -> FewShotModel {
    let vocab = Vocabulary::from_records(records);
    let mut rng = episode_rng(seed, 0);
    let table = EmbeddingTable::random(&vocab, embedding_dim, &mut rng);
    let config = EncoderConfig::new(embedding_dim, hidden_dim);
    let params = init_encoder_params(&config, &mut rng).unwrap();
    FewShotModel {
        config,
        featurizer: Featurizer::from_table(vocab, table),
        params,
    }
}

/// An episode assembled by hand, bypassing the sampler.
pub fn manual_episode(support: Vec<UtteranceRecord>, query: Vec<UtteranceRecord>) -> Episode {
    let mut classes: Vec<String> = support.iter().map(|r| r.intent.clone()).collect();
    classes.sort();
    classes.dedup();
    Episode {
        source_dataset: "manual".into(),
        trace: EpisodeTrace {
            way: classes.len(),
            class_sizes: vec![0; classes.len()],
            classes,
            query_shot: 0,
            beta: 1.0,
            support_budget: support.len(),
            alpha: Vec::new(),
            proportions: Vec::new(),
            support_shots: Vec::new(),
        },
        support,
        query,
        remapped: Vec::new(),
    }
}

/// Two intents, three-token utterances.
pub fn two_class_episode() -> Episode {
    manual_episode(
        vec![
            record("s0", "play", "play some jazz", "O O play:genre"),
            record("s1", "play", "play loud rock", "O O play:genre"),
            record("s2", "book", "book table tonight", "O O book:time"),
            record("s3", "book", "book seat now", "O O book:time"),
        ],
        vec![
            record("q0", "play", "play some rock", "O O play:genre"),
            record("q1", "book", "book table now", "O O book:time"),
        ],
    )
}

/// Brute-force span oracle: every `[i, j)` whose tokens share one
/// non-outside type, where no inner token carries a `B-` tag and neither
/// neighbour could extend the range.
pub fn brute_force_spans(labels: &[String]) -> Vec<(String, usize, usize)> {
    fn parts(l: &str) -> (bool, &str) {
        match l.split_once('-') {
            Some(("B", t)) => (true, t),
            Some(("I", t)) => (false, t),
            _ => (false, l),
        }
    }
    let n = labels.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..=n {
            let (_, ty) = parts(&labels[i]);
            if ty == "O" {
                continue;
            }
            let uniform = (i..j).all(|k| parts(&labels[k]).1 == ty);
            let no_inner_begin = (i + 1..j).all(|k| !parts(&labels[k]).0);
            let left_closed = i == 0 || parts(&labels[i - 1]).1 != ty || parts(&labels[i]).0;
            let right_closed = j == n || parts(&labels[j]).1 != ty || parts(&labels[j]).0;
            if uniform && no_inner_begin && left_closed && right_closed {
                out.push((ty.to_string(), i, j));
            }
        }
    }
    out
}
