//! Acceptance suite: one PASS/FAIL line per criterion. Criterion 11 runs
//! only when `FSICSF_CORPORA` points at a directory of prepared corpora.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use common::{brute_force_spans, model_for, synthetic_split, two_class_episode};
use fsicsf::algorithms::{
    backward_into, baseline_pretrain, compute_prototypes, evaluate, evaluate_episode,
    fomaml_inner_finetune, fomaml_meta_step, proto_episode_loss, proto_log_probs,
    proto_loss_on_tape, proto_predict, train, AdaptConfig, Algorithm, HeadTask, MetaTask,
    PreparedEpisode, PrototypeSet, TrainLoopConfig,
};
use fsicsf::autodiff::gradcheck::{run_catalogue, TRIALS_PER_OP};
use fsicsf::autodiff::{checkpoint, Bound, Optimizer, ParameterSet, Tape, Tensor, Var};
use fsicsf::data::{
    parse_dataset_str, published_statistics, split_bio, write_dataset_file, UtteranceRecord,
    OUTSIDE,
};
use fsicsf::encoder::{EncoderVars, InputSource, SlotRepresentation};
use fsicsf::metrics::{aggregate, extract_spans, span_f1};
use fsicsf::sampler::{
    class_shots, episode_rng, query_shot, sample_episode, support_budget, Episode, EpisodeSet,
    EpisodeStream, FewShotSplit, SamplerConfig,
};
use fsicsf::toy::{generate_toy_corpus, ToyCorpusConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(message())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const SAMPLER_SIZES: [(&str, usize); 5] = [("a", 50), ("b", 40), ("c", 30), ("d", 20), ("e", 10)];

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let report = run_catalogue(0).map_err(err)?;
    let elapsed = start.elapsed().as_secs_f64();
    for op in &report.ops {
        check(op.trials == TRIALS_PER_OP, || {
            format!("{} ran {} shapes", op.op, op.trials)
        })?;
        check(op.max_relative_error < 1e-6, || {
            format!("{} relative error {:.3e}", op.op, op.max_relative_error)
        })?;
    }
    check(elapsed < 60.0, || format!("took {elapsed:.1} s"))?;
    Ok(format!(
        "{} ops x {} shapes, max relative error {:.2e}, {:.2} s",
        report.ops.len(),
        TRIALS_PER_OP,
        report.max_relative_error(),
        elapsed
    ))
}

fn check_episode(ep: &Episode, split: &FewShotSplit, k_max: usize) -> Result<(), String> {
    let t = &ep.trace;
    check((3..=5).contains(&t.way), || format!("way {}", t.way))?;
    check(t.query_shot <= 10, || format!("k_q {}", t.query_shot))?;
    check(t.support_shots.iter().sum::<usize>() <= k_max, || {
        format!("sum k {:?}", t.support_shots)
    })?;
    for ((class, &k), &size) in t.classes.iter().zip(&t.support_shots).zip(&t.class_sizes) {
        check(k >= 1, || format!("k_{class} = 0"))?;
        check(k + t.query_shot <= size, || {
            format!("k_{class} = {k} exceeds {size} - {}", t.query_shot)
        })?;
        check(split.class_size(class) == size, || {
            format!("size of {class}")
        })?;
        let s: BTreeSet<&str> = ep
            .support
            .iter()
            .filter(|r| &r.intent == class)
            .map(|r| r.id.as_str())
            .collect();
        let q: BTreeSet<&str> = ep
            .query
            .iter()
            .filter(|r| &r.intent == class)
            .map(|r| r.id.as_str())
            .collect();
        check(s.len() == k && q.len() == t.query_shot, || {
            format!("{class}: {} support / {} query examples", s.len(), q.len())
        })?;
        check(s.is_disjoint(&q), || {
            format!("{class}: support and query overlap")
        })?;
    }
    Ok(())
}

fn sampler_conformance() -> Outcome {
    let start = Instant::now();
    let split = synthetic_split(&SAMPLER_SIZES);
    let mut total = 0;
    for k_max in [20, 100] {
        let stream = EpisodeStream::new(&split, SamplerConfig::new(k_max, 11).map_err(err)?);
        for (i, ep) in stream.take(10_000).enumerate() {
            let ep = ep.map_err(err)?;
            check_episode(&ep, &split, k_max)
                .map_err(|m| format!("K_max {k_max}, episode {i}: {m}"))?;
            total += 1;
        }
    }
    let cfg = SamplerConfig::new(20, 0).map_err(err)?;
    let k_q = query_shot(&[("a", 30), ("b", 8), ("c", 14)], &cfg).map_err(err)?;
    let budget = support_budget(0.5, &[30, 8, 14], k_q, &cfg);
    let (_, shots) = class_shots(&[0.0; 3], &[30, 8, 14], k_q, budget).map_err(err)?;
    check(
        (k_q, budget, shots.as_slice()) == (4, 17, &[9, 3, 4][..]),
        || format!("worked example gave k_q {k_q}, |S| {budget}, k {shots:?}"),
    )?;
    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 60.0, || format!("took {elapsed:.1} s"))?;
    Ok(format!(
        "{total} episodes conform, worked example (4, 17, [9, 3, 4]), {elapsed:.2} s"
    ))
}

fn adversarial_split(rng: &mut impl Rng, id: usize) -> FewShotSplit {
    const TYPES: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
    let classes = rng.gen_range(3..=5);
    let mut records = Vec::new();
    for c in 0..classes {
        let own: Vec<&str> = TYPES
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(0.4))
            .collect();
        let size = rng.gen_range(4..=12);
        for e in 0..size {
            let len = rng.gen_range(1..=6);
            let slots: Vec<String> = (0..len)
                .map(|_| {
                    if own.is_empty() || rng.gen_bool(0.4) {
                        OUTSIDE.to_string()
                    } else {
                        let ty = own[rng.gen_range(0..own.len())];
                        match rng.gen_range(0..3) {
                            0 => ty.to_string(),
                            1 => format!("B-{ty}"),
                            _ => format!("I-{ty}"),
                        }
                    }
                })
                .collect();
            let tokens = (0..len).map(|j| format!("t{j}")).collect();
            records.push(
                UtteranceRecord::new(format!("{id}-{c}-{e}"), tokens, slots, format!("C{c}"))
                    .unwrap(),
            );
        }
    }
    FewShotSplit::from_records("adversarial", records)
}

fn slot_types(sets: &[Vec<String>]) -> BTreeSet<String> {
    sets.iter()
        .flatten()
        .map(|s| split_bio(s).1.to_string())
        .filter(|s| s != OUTSIDE)
        .collect()
}

fn remap_closure() -> Outcome {
    let mut rng = episode_rng(2024, 0);
    let mut remapped_total = 0;
    let mut support_side = 0;
    for i in 0..1000 {
        let split = adversarial_split(&mut rng, i);
        let originals: BTreeMap<&str, &UtteranceRecord> =
            split.records().map(|r| (r.id.as_str(), r)).collect();
        // ways reach 5; a smaller budget is a contract error
        let cfg = SamplerConfig::new(rng.gen_range(5..=20), i as u64).map_err(err)?;
        let ep = sample_episode(&split, &cfg, &mut rng).map_err(err)?;
        let restore = |set: EpisodeSet, records: &[UtteranceRecord]| -> Vec<Vec<String>> {
            let mut slots: Vec<Vec<String>> = records.iter().map(|r| r.slots.clone()).collect();
            for t in ep.remapped.iter().filter(|t| t.set == set) {
                slots[t.example][t.token] = t.original.clone();
            }
            slots
        };
        let before_s = restore(EpisodeSet::Support, &ep.support);
        let before_q = restore(EpisodeSet::Query, &ep.query);
        for (records, before) in [(&ep.support, &before_s), (&ep.query, &before_q)] {
            for (r, slots) in records.iter().zip(before) {
                let orig = originals[r.id.as_str()];
                check(&orig.slots == slots && orig.tokens == r.tokens, || {
                    format!(
                        "episode {i}: {} differs from its source beyond recorded remaps",
                        r.id
                    )
                })?;
            }
        }
        let (types_s, types_q) = (slot_types(&before_s), slot_types(&before_q));
        for (set, records, before, other) in [
            (EpisodeSet::Support, &ep.support, &before_s, &types_q),
            (EpisodeSet::Query, &ep.query, &before_q, &types_s),
        ] {
            for (e, (r, slots)) in records.iter().zip(before).enumerate() {
                for (t, orig) in slots.iter().enumerate() {
                    let ty = split_bio(orig).1;
                    let should = ty != OUTSIDE && !other.contains(ty);
                    let was = ep
                        .remapped
                        .iter()
                        .any(|x| x.set == set && x.example == e && x.token == t);
                    check(should == was && (!should || r.slots[t] == OUTSIDE), || {
                        format!("episode {i}: {set:?} example {e} token {t} ({orig}) remap {was}, expected {should}")
                    })?;
                    if was && set == EpisodeSet::Support {
                        support_side += 1;
                    }
                }
            }
        }
        let after_s: Vec<Vec<String>> = ep.support.iter().map(|r| r.slots.clone()).collect();
        let after_q: Vec<Vec<String>> = ep.query.iter().map(|r| r.slots.clone()).collect();
        check(slot_types(&after_s) == slot_types(&after_q), || {
            format!("episode {i}: label sets differ after remapping")
        })?;
        remapped_total += ep.remapped.len();
    }
    check(support_side > 0 && remapped_total > support_side, || {
        "construction never exercised both directions".to_string()
    })?;
    Ok(format!(
        "1000 episodes closed, {remapped_total} tokens remapped ({support_side} on the support side)"
    ))
}

fn random_labels(rng: &mut impl Rng, bio: bool) -> Vec<String> {
    let alphabet: &[&str] = if bio {
        &["O", "B-a", "I-a", "B-b", "I-b"]
    } else {
        &["O", "a", "b", "c"]
    };
    let len = rng.gen_range(0..=12);
    (0..len)
        .map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string())
        .collect()
}

fn metric_oracle() -> Outcome {
    let mut rng = episode_rng(4, 0);
    for bio in [false, true] {
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..1000 {
            let g = random_labels(&mut rng, bio);
            let mut p = g.clone();
            for l in p.iter_mut() {
                if rng.gen_bool(0.2) {
                    *l = random_labels(&mut rng, bio)
                        .pop()
                        .unwrap_or_else(|| OUTSIDE.to_string());
                }
            }
            let got: Vec<(String, usize, usize)> = extract_spans(&g)
                .into_iter()
                .map(|s| (s.label, s.start, s.end))
                .collect();
            let mut want = brute_force_spans(&g);
            want.sort_by_key(|s| (s.1, s.2));
            check(got == want, || {
                format!("spans of {g:?}: {got:?} vs oracle {want:?}")
            })?;
            gold.push(g);
            pred.push(p);
        }
        let counts = span_f1(&pred, &gold).map_err(err)?;
        let (mut g_total, mut p_total, mut matched) = (0, 0, 0);
        for (p, g) in pred.iter().zip(&gold) {
            let gs: BTreeSet<_> = brute_force_spans(g).into_iter().collect();
            let ps = brute_force_spans(p);
            g_total += gs.len();
            p_total += ps.len();
            matched += ps.iter().filter(|s| gs.contains(*s)).count();
        }
        check(
            (counts.gold, counts.predicted, counts.matched) == (g_total, p_total, matched),
            || format!("counts {counts:?} vs oracle ({g_total}, {p_total}, {matched})"),
        )?;
        let oracle_f1 = 2.0 * matched as f64 / (g_total + p_total) as f64;
        check((counts.f1() - oracle_f1).abs() < 1e-12, || {
            format!("F1 {} vs {oracle_f1}", counts.f1())
        })?;
    }
    let fixture = parse_dataset_str(
        "# intent: AddToPlaylist\nPlease\tO\nadd\tO\nsome\tO\nPete\tAddToPlaylist:artist\n\
         Townshend\tAddToPlaylist:artist\nto\tO\nmy\tAddToPlaylist:playlist_owner\nplaylist\tO\n\
         Fiesta\tAddToPlaylist:playlist\nHits\tAddToPlaylist:playlist\ncon\tAddToPlaylist:playlist\n\
         Lali\tAddToPlaylist:playlist\n",
        "fixture",
    )
    .map_err(err)?;
    let spans: Vec<(String, usize, usize)> = extract_spans(&fixture[0].slots)
        .into_iter()
        .map(|s| (s.label, s.start, s.end))
        .collect();
    let expected = vec![
        ("AddToPlaylist:artist".to_string(), 3, 5),
        ("AddToPlaylist:playlist_owner".to_string(), 6, 7),
        ("AddToPlaylist:playlist".to_string(), 8, 12),
    ];
    check(spans == expected, || format!("fixture spans {spans:?}"))?;
    let words = |s: &str| vec![s.split(' ').map(String::from).collect::<Vec<_>>()];
    let f1 = span_f1(&words("a a O O O O"), &words("a a O b O c"))
        .map_err(err)?
        .f1();
    check((f1 - 0.5).abs() < 1e-15, || {
        format!("one of three spans gave F1 {f1}")
    })?;
    Ok("2000 IO/BIO sequences agree with the brute-force enumerator; fixture spans and F1 = 0.5 hold".into())
}

fn toy_splits(per_intent: usize) -> (FewShotSplit, FewShotSplit) {
    let records = generate_toy_corpus(&ToyCorpusConfig {
        per_intent,
        ..ToyCorpusConfig::default()
    });
    let (train, test): (Vec<_>, Vec<_>) = records
        .into_iter()
        .partition(|r| r.intent.as_str() < "Intent5");
    (
        FewShotSplit::from_records("train", train),
        FewShotSplit::from_records("test", test),
    )
}

fn permuted_prototypes(p: &PrototypeSet, perm: &[usize]) -> PrototypeSet {
    let rows = |t: &Tensor| {
        Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
    };
    let mut out = p.clone();
    out.labels.intents = perm.iter().map(|&i| p.labels.intents[i].clone()).collect();
    out.intent_prototypes = rows(&p.intent_prototypes);
    out.intent_counts = perm.iter().map(|&i| p.intent_counts[i]).collect();
    out
}

fn proto_gradient_error() -> Result<f64, String> {
    let episode = two_class_episode();
    let model = model_for(episode.support.iter().chain(&episode.query), 4, 3, 8);
    let repr = SlotRepresentation::TokenState;
    let prep = PreparedEpisode::new(&model.featurizer, &episode, false).map_err(err)?;
    let mut params = model.params.clone();
    params.zero_grads();
    backward_into(&mut params, |tape, bound| {
        let enc = EncoderVars::from_bound(tape, bound)?;
        proto_loss_on_tape(tape, &enc, &prep, repr)
    })
    .map_err(err)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let analytic = params.get(&name).unwrap().grad().unwrap().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let mut work = model.params.clone();
            let orig = work.get(&name).unwrap().values()[j];
            work.get_mut(&name).unwrap().values_mut()[j] = orig + h;
            let up = proto_episode_loss(&work, &prep, repr).map_err(err)?;
            work.get_mut(&name).unwrap().values_mut()[j] = orig - h;
            let down = proto_episode_loss(&work, &prep, repr).map_err(err)?;
            numeric.push((up - down) / (2.0 * h));
        }
        let scale = analytic
            .iter()
            .chain(&numeric)
            .fold(1e-8_f64, |m, v| m.max(v.abs()));
        let diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

fn prototypical_correctness() -> Outcome {
    let (_, test) = toy_splits(20);
    let model = model_for(test.records(), 8, 6, 5);
    let repr = SlotRepresentation::TokenState;
    let stream = EpisodeStream::new(&test, SamplerConfig::new(20, 3).map_err(err)?);
    let mut worst_norm: f64 = 0.0;
    let mut worst_drift: f64 = 0.0;
    let mut rng = episode_rng(3, 1);
    for ep in stream.take(20) {
        let ep = ep.map_err(err)?;
        let prep = PreparedEpisode::new(&model.featurizer, &ep, false).map_err(err)?;
        let protos = compute_prototypes(&model.params, &prep, repr).map_err(err)?;
        let mut perm: Vec<usize> = (0..protos.labels.intents.len()).collect();
        perm.shuffle(&mut rng);
        let permuted = permuted_prototypes(&protos, &perm);
        for (q, r) in ep.query.iter().enumerate() {
            let features = model.featurizer.features(r).map_err(err)?;
            let (intent, slots) =
                proto_log_probs(&model.params, &protos, &features, repr).map_err(err)?;
            for lp in std::iter::once(&intent).chain(&slots) {
                let total: f64 = lp.iter().map(|v| v.exp()).sum();
                worst_norm = worst_norm.max((total - 1.0).abs());
            }
            let (p_intent, _) =
                proto_log_probs(&model.params, &permuted, &features, repr).map_err(err)?;
            for (new_pos, &old) in perm.iter().enumerate() {
                worst_drift = worst_drift.max((p_intent[new_pos] - intent[old]).abs());
            }
            check(worst_drift < 1e-9, || {
                format!("query {q}: relabelled prototypes drift {worst_drift:e}")
            })?;
        }
        let base = proto_predict(&model.params, &prep, repr).map_err(err)?;
        let mut shuffled = ep.clone();
        shuffled.support.shuffle(&mut rng);
        let prep2 = PreparedEpisode::new(&model.featurizer, &shuffled, false).map_err(err)?;
        let protos2 = compute_prototypes(&model.params, &prep2, repr).map_err(err)?;
        for (a, b) in [
            (&protos.intent_prototypes, &protos2.intent_prototypes),
            (&protos.slot_prototypes, &protos2.slot_prototypes),
        ] {
            for (x, y) in a.values().iter().zip(b.values()) {
                worst_drift = worst_drift.max((x - y).abs());
            }
        }
        let again = proto_predict(&model.params, &prep2, repr).map_err(err)?;
        check(
            base.intents == again.intents && base.slots == again.slots,
            || "argmax changed under support permutation".to_string(),
        )?;
    }
    check(worst_norm < 1e-9, || {
        format!("probabilities off by {worst_norm:e}")
    })?;
    check(worst_drift < 1e-9, || {
        format!("prototype drift {worst_drift:e}")
    })?;
    let grad = proto_gradient_error()?;
    check(grad < 1e-6, || {
        format!("proto loss gradient relative error {grad:e}")
    })?;
    Ok(format!(
        "normalization {worst_norm:.1e}, permutation drift {worst_drift:.1e}, loss gradient error {grad:.2e}"
    ))
}

/// `L(θ) = ½‖Aθ − b‖²` for a support and a query pair.
struct Quadratic {
    support: (Tensor, Tensor),
    query: (Tensor, Tensor),
}

impl Quadratic {
    fn loss(tape: &mut Tape, bound: &Bound, (a, b): &(Tensor, Tensor)) -> fsicsf::Result<Var> {
        let theta = bound.var("theta")?;
        let a = tape.constant(a.clone());
        let neg_b = tape.constant(Tensor::new(
            b.shape().to_vec(),
            b.values().iter().map(|v| -v).collect(),
        )?);
        let at = tape.matmul(a, theta)?;
        let r = tape.add(at, neg_b)?;
        let sq = tape.mul(r, r)?;
        let s = tape.sum(sq);
        Ok(tape.scale(s, 0.5))
    }

    /// `∇L(θ) = Aᵀ(Aθ − b)`.
    fn gradient((a, b): &(Tensor, Tensor), theta: &[f64]) -> Vec<f64> {
        let (m, n) = a.dims2();
        let r: Vec<f64> = (0..m)
            .map(|i| (0..n).map(|j| a.row(i)[j] * theta[j]).sum::<f64>() - b.values()[i])
            .collect();
        (0..n)
            .map(|j| (0..m).map(|i| a.row(i)[j] * r[i]).sum())
            .collect()
    }
}

impl MetaTask for Quadratic {
    fn support_loss(&self, tape: &mut Tape, bound: &Bound) -> fsicsf::Result<Var> {
        Quadratic::loss(tape, bound, &self.support)
    }

    fn query_loss(&self, tape: &mut Tape, bound: &Bound) -> fsicsf::Result<Var> {
        Quadratic::loss(tape, bound, &self.query)
    }
}

fn fomaml_equivalence() -> Outcome {
    let (train_split, _) = toy_splits(20);
    let model = model_for(train_split.records(), 6, 4, 21);
    let stream = EpisodeStream::new(&train_split, SamplerConfig::new(20, 21).map_err(err)?);
    let mut worst_d0: f64 = 0.0;
    for ep in stream.take(3) {
        let ep = ep.map_err(err)?;
        let prep = PreparedEpisode::new(&model.featurizer, &ep, true).map_err(err)?;
        let task = HeadTask::new(&prep, SlotRepresentation::TokenState);
        let mut meta = model.params.clone();
        let mut outer = Optimizer::adam(0.0029);
        fomaml_meta_step(&mut meta, &task, 0, 0.01, &mut outer).map_err(err)?;

        let mut with_heads = task.adapt_init(&model.params);
        with_heads.zero_grads();
        backward_into(&mut with_heads, |tape, bound| task.query_loss(tape, bound)).map_err(err)?;
        let mut plain = model.params.clone();
        let names: Vec<String> = plain.names().map(String::from).collect();
        for name in &names {
            let g = with_heads.get(name).unwrap().grad().map(<[f64]>::to_vec);
            plain.get_mut(name).unwrap().set_grad(g);
        }
        Optimizer::adam(0.0029).step(&mut plain).map_err(err)?;
        worst_d0 = worst_d0.max(meta.max_abs_diff(&plain));
        check(meta.names().eq(plain.names()), || {
            "meta step changed the parameter set".into()
        })?;
    }
    check(worst_d0 <= 1e-12, || {
        format!("d = 0 differs from Adam by {worst_d0:e}")
    })?;

    let mut rng = episode_rng(6, 0);
    let mut rand_t = |r: usize, c: usize| {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let task = Quadratic {
        support: (rand_t(4, 3), rand_t(4, 1)),
        query: (rand_t(5, 3), rand_t(5, 1)),
    };
    let theta = rand_t(3, 1);
    let mut params = ParameterSet::new();
    params.insert("theta", theta.clone().with_requires_grad(true));
    let (alpha, beta) = (0.1, 0.05);
    let adapted = fomaml_inner_finetune(&params, &task, 1, alpha).map_err(err)?;
    let g_s = Quadratic::gradient(&task.support, theta.values());
    let phi_prime: Vec<f64> = theta
        .values()
        .iter()
        .zip(&g_s)
        .map(|(t, g)| t - alpha * g)
        .collect();
    let inner_err = adapted
        .get("theta")
        .unwrap()
        .values()
        .iter()
        .zip(&phi_prime)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    check(inner_err <= 1e-10, || {
        format!("d = 1 adapted parameters off by {inner_err:e}")
    })?;
    let mut outer = Optimizer::sgd(beta);
    fomaml_meta_step(&mut params, &task, 1, alpha, &mut outer).map_err(err)?;
    let g_q = Quadratic::gradient(&task.query, &phi_prime);
    let outer_err = params
        .get("theta")
        .unwrap()
        .values()
        .iter()
        .zip(theta.values().iter().zip(&g_q))
        .fold(0.0_f64, |m, (a, (t, g))| m.max((a - (t - beta * g)).abs()));
    check(outer_err <= 1e-10, || {
        format!("d = 1 meta update off by {outer_err:e}")
    })?;
    Ok(format!(
        "d = 0 vs Adam {worst_d0:.1e}; d = 1 adapted {inner_err:.1e}, meta update {outer_err:.1e}"
    ))
}

fn baseline_freeze() -> Outcome {
    let (train_split, test) = toy_splits(30);
    let mut model = model_for(train_split.records().chain(test.records()), 8, 6, 13);
    let train_records: Vec<UtteranceRecord> = train_split.records().cloned().collect();
    baseline_pretrain(
        &mut model.params,
        &model.featurizer,
        &train_records,
        SlotRepresentation::TokenState,
        1,
        64,
        0.001,
        &mut episode_rng(13, 1),
    )
    .map_err(err)?;
    let table_bits = |m: &fsicsf::algorithms::FewShotModel| -> Vec<u64> {
        match &m.featurizer.source {
            InputSource::Table(t) => t.matrix().values().iter().map(|v| v.to_bits()).collect(),
            InputSource::Contextual(_) => Vec::new(),
        }
    };
    let params_before = checkpoint::encode(&model.params);
    let table_before = table_bits(&model);
    let stream = EpisodeStream::new(&test, SamplerConfig::new(20, 13).map_err(err)?);
    for (i, ep) in stream.take(100).enumerate() {
        let ep = ep.map_err(err)?;
        evaluate_episode(Algorithm::Finetune, &model, &ep, &AdaptConfig::default()).map_err(err)?;
        check(checkpoint::encode(&model.params) == params_before, || {
            format!("episode {i}: encoder parameters changed")
        })?;
        check(table_bits(&model) == table_before, || {
            format!("episode {i}: embeddings changed")
        })?;
    }
    Ok(format!(
        "{} parameter tensors and the embedding table bit-identical across 100 episodes",
        model.params.len()
    ))
}

fn toy_ordering() -> Outcome {
    let start = Instant::now();
    let (train_split, test) = toy_splits(200);
    let sampler = SamplerConfig::new(20, 1).map_err(err)?;
    let mut results = BTreeMap::new();
    for algorithm in [Algorithm::Proto, Algorithm::Fomaml, Algorithm::Finetune] {
        let mut model = model_for(train_split.records().chain(test.records()), 32, 32, 99);
        let mut cfg = TrainLoopConfig::new(algorithm);
        cfg.episodes_per_epoch = 100;
        cfg.epochs = if algorithm == Algorithm::Finetune {
            50
        } else {
            20
        };
        train(
            &mut model,
            std::slice::from_ref(&train_split),
            &cfg,
            &sampler,
            |_, _| Ok(()),
        )
        .map_err(err)?;
        let metrics =
            evaluate(algorithm, &model, &test, &sampler, 100, &cfg.adapt()).map_err(err)?;
        let report = aggregate(&[(1, metrics)]).map_err(err)?;
        results.insert(
            algorithm.name(),
            (report.ic_accuracy.mean, report.slot_f1.mean),
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (p_ic, p_f1) = results["proto"];
    let (_, m_f1) = results["fomaml"];
    let (_, b_f1) = results["finetune"];
    let summary = results
        .iter()
        .map(|(k, (ic, f1))| format!("{k} IC {:.1} F1 {:.1}", ic * 100.0, f1 * 100.0))
        .collect::<Vec<_>>()
        .join(", ");
    check(p_ic >= 0.9, || format!("proto IC below 90: {summary}"))?;
    check(p_f1 >= 0.7, || format!("proto F1 below 70: {summary}"))?;
    check(p_f1 > b_f1, || {
        format!("proto F1 does not exceed fine-tune: {summary}")
    })?;
    check(m_f1 > b_f1, || {
        format!("foMAML F1 does not exceed fine-tune: {summary}")
    })?;
    check(elapsed < 900.0, || format!("took {elapsed:.0} s"))?;
    Ok(format!("{summary}; {elapsed:.0} s"))
}

fn kmax_direction() -> Outcome {
    let split = synthetic_split(&SAMPLER_SIZES);
    let mut means = Vec::new();
    for k_max in [20, 100] {
        let stream = EpisodeStream::new(&split, SamplerConfig::new(k_max, 9).map_err(err)?);
        let mut total = 0.0;
        for ep in stream.take(10_000) {
            let t = ep.map_err(err)?.trace;
            total += t.support_shots.iter().sum::<usize>() as f64 / t.way as f64;
        }
        means.push(total / 10_000.0);
    }
    check(means[1] > means[0], || {
        format!("mean shot {:.2} at 20 vs {:.2} at 100", means[0], means[1])
    })?;
    Ok(format!(
        "mean support shot {:.2} (K_max 20) < {:.2} (K_max 100)",
        means[0], means[1]
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fsicsf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(err)?;
    check(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn same_bytes(a: &Path, b: &Path) -> Result<(), String> {
    let (x, y) = (fs::read(a).map_err(err)?, fs::read(b).map_err(err)?);
    check(x == y, || {
        format!("{} and {} differ", a.display(), b.display())
    })
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (train_split, test) = toy_splits(40);
    let train_file = d.join("train.txt");
    let test_file = d.join("test.txt");
    write_dataset_file(
        &train_split.records().cloned().collect::<Vec<_>>(),
        &train_file,
    )
    .map_err(err)?;
    write_dataset_file(&test.records().cloned().collect::<Vec<_>>(), &test_file).map_err(err)?;
    let mut compared = 0;
    for run in ["a", "b"] {
        run_cli(&[
            "sample",
            "--split",
            &s(&train_file),
            "--kmax",
            "20",
            "--count",
            "100",
            "--seed",
            "7",
            "--out",
            &s(&d.join(format!("{run}.jsonl"))),
        ])?;
    }
    same_bytes(&d.join("a.jsonl"), &d.join("b.jsonl"))?;
    compared += 1;
    for algorithm in ["proto", "fomaml", "finetune"] {
        for run in ["a", "b"] {
            let cfg = d.join(format!("{algorithm}-{run}.json"));
            let body = serde_json::json!({
                "algorithm": algorithm, "k_max": 20, "seeds": [5, 6], "embedding_dim": 8, "hidden_dim": 6,
                "epochs": 2, "episodes_per_epoch": 4, "inner_steps": 2, "baseline_batch": 64,
                "datasets": [{"name": "toy", "train": train_file, "test": test_file}],
                "output": format!("{algorithm}-{run}")
            });
            fs::write(&cfg, body.to_string()).map_err(err)?;
            run_cli(&["train", "--config", &s(&cfg)])?;
            let ckpt = d.join(format!("{algorithm}-{run}/toy/seed{{seed}}/last.ckpt"));
            run_cli(&[
                "eval",
                "--checkpoint",
                &s(&ckpt),
                "--split",
                &s(&test_file),
                "--episodes",
                "10",
                "--seeds",
                "5,6",
                "--dataset",
                "toy",
                "--out",
                &s(&d.join(format!("{algorithm}-{run}.tsv"))),
            ])?;
        }
        for seed in [5, 6] {
            for file in [
                "epoch001.ckpt",
                "epoch002.ckpt",
                "last.ckpt",
                "last.ckpt.meta.json",
            ] {
                let rel = format!("toy/seed{seed}/{file}");
                same_bytes(
                    &d.join(format!("{algorithm}-a/{rel}")),
                    &d.join(format!("{algorithm}-b/{rel}")),
                )?;
                compared += 1;
            }
        }
        same_bytes(
            &d.join(format!("{algorithm}-a.tsv")),
            &d.join(format!("{algorithm}-b.tsv")),
        )?;
        same_bytes(
            &d.join(format!("{algorithm}-a.md")),
            &d.join(format!("{algorithm}-b.md")),
        )?;
        compared += 2;
    }
    Ok(format!(
        "{compared} artifact pairs byte-identical across reruns"
    ))
}

fn dataset_statistics() -> Option<Outcome> {
    let root = std::env::var_os("FSICSF_CORPORA")?;
    let root = Path::new(&root);
    let run = || -> Outcome {
        let dir = tempfile::tempdir().map_err(err)?;
        let mut checked = Vec::new();
        for name in ["atis", "snips", "top"] {
            let (data, splits) = (
                root.join(name).join("corpus.txt"),
                root.join(name).join("splits.json"),
            );
            if !data.exists() || !splits.exists() {
                continue;
            }
            let out = dir.path().join(name);
            run_cli(&[
                "prepare-splits",
                "--data",
                data.to_str().unwrap(),
                "--splits",
                splits.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])?;
            let stats = fs::read_to_string(out.join("stats.tsv")).map_err(err)?;
            for line in stats.lines().skip(1) {
                let f: Vec<&str> = line.split('\t').collect();
                let Some(want) = published_statistics(name, f[0]) else {
                    continue;
                };
                let got: Vec<usize> = f[1..4].iter().map(|v| v.parse().unwrap()).collect();
                check(
                    got == [want.utterances, want.intents, want.slot_labels],
                    || format!("{name} {}: {got:?} vs published {want:?}", f[0]),
                )?;
            }
            checked.push(name);
        }
        check(!checked.is_empty(), || {
            format!(
                "no <name>/corpus.txt + splits.json under {}",
                root.display()
            )
        })?;
        Ok(format!("{} match the published counts", checked.join(", ")))
    };
    Some(run())
}

fn guarded(f: fn() -> Outcome) -> Outcome {
    std::panic::catch_unwind(f).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 10] = [
        ("gradient integrity", gradient_integrity),
        ("sampler conformance", sampler_conformance),
        ("remap closure", remap_closure),
        ("metric oracle", metric_oracle),
        ("prototypical correctness", prototypical_correctness),
        ("foMAML degenerate equivalence", fomaml_equivalence),
        ("baseline freeze contract", baseline_freeze),
        ("toy ordering", toy_ordering),
        ("K_max direction", kmax_direction),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = guarded(*f);
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {:>2} {name}: {detail}", i + 1);
    }
    match dataset_statistics() {
        None => println!("[SKIP] 11 dataset statistics: set FSICSF_CORPORA to a directory of <name>/corpus.txt and splits.json"),
        Some(Ok(d)) => println!("[PASS] 11 dataset statistics: {d}"),
        Some(Err(d)) => {
            failed += 1;
            println!("[FAIL] 11 dataset statistics: {d}");
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
