//! Finite-difference verification of every differentiable tape operation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const STEP: f64 = 1e-5;
pub const FAILURE_THRESHOLD: f64 = 1e-5;
pub const TRIALS_PER_OP: usize = 5;

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub ops: Vec<OpCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.ops
            .iter()
            .map(|o| o.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self, threshold: f64) -> Vec<&'static str> {
        self.ops
            .iter()
            .filter(|o| o.max_relative_error.is_nan() || o.max_relative_error >= threshold)
            .map(|o| o.op)
            .collect()
    }
}

type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Compares backward against central differences for `build` at `inputs`.
///
/// The output is reduced to a scalar with fixed random weights so every
/// output element contributes. The error for each input is
/// `max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-8)`;
/// the worst input is returned.
pub fn check_function(inputs: &[Tensor], build: &Builder<'_>, rng: &mut impl Rng) -> Result<f64> {
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).clone()
    };
    let weights: Vec<f64> = (0..probe.numel())
        .map(|_| rng.gen_range(0.5..1.5))
        .collect();

    let scalar = |tape: &mut Tape, out: Var| -> Result<Var> {
        let w = Tensor::new(tape.shape(out).to_vec(), weights.clone())?;
        let w = tape.constant(w);
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars)?;
    let loss = scalar(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = scalar(&mut tape, out)?;
        Ok(tape.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut work = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].values()[j];
            work[i].values_mut()[j] = orig + STEP;
            let up = eval(&work)?;
            work[i].values_mut()[j] = orig - STEP;
            let down = eval(&work)?;
            work[i].values_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        let scale = analytic
            .iter()
            .chain(&numeric)
            .fold(1e-8_f64, |m, v| m.max(v.abs()));
        let err = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(err / scale);
    }
    Ok(worst)
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches count")
}

fn dim(rng: &mut impl Rng) -> usize {
    rng.gen_range(1..=4)
}

fn random_matrix(rng: &mut impl Rng) -> Tensor {
    let shape = [dim(rng), dim(rng)];
    random(rng, &shape)
}

/// Runs every catalogue entry on [`TRIALS_PER_OP`] random shapes.
type MakeCase<'m> = &'m dyn Fn(&mut ChaCha8Rng, usize) -> (Vec<Tensor>, Box<Builder<'static>>);

pub fn run_catalogue(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::new();
    let mut record = |op: &'static str, rng: &mut ChaCha8Rng, make: MakeCase| -> Result<()> {
        let mut worst: f64 = 0.0;
        for trial in 0..TRIALS_PER_OP {
            let (inputs, build) = make(rng, trial);
            worst = worst.max(check_function(&inputs, build.as_ref(), rng)?);
        }
        ops.push(OpCheck {
            op,
            trials: TRIALS_PER_OP,
            max_relative_error: worst,
        });
        Ok(())
    };

    record("matmul", &mut rng, &|rng, _| {
        let (m, k, n) = (dim(rng), dim(rng), dim(rng));
        (
            vec![random(rng, &[m, k]), random(rng, &[k, n])],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        )
    })?;
    record("add", &mut rng, &|rng, _| {
        let shape = [dim(rng), dim(rng)];
        (
            vec![random(rng, &shape), random(rng, &shape)],
            Box::new(|t, v| t.add(v[0], v[1])),
        )
    })?;
    record("add_bias", &mut rng, &|rng, _| {
        let (m, n) = (dim(rng), dim(rng));
        (
            vec![random(rng, &[m, n]), random(rng, &[n])],
            Box::new(|t, v| t.add_bias(v[0], v[1])),
        )
    })?;
    record("multiply", &mut rng, &|rng, _| {
        let shape = [dim(rng), dim(rng)];
        (
            vec![random(rng, &shape), random(rng, &shape)],
            Box::new(|t, v| t.mul(v[0], v[1])),
        )
    })?;
    record("scale", &mut rng, &|rng, _| {
        let factor = rng.gen_range(-2.0..2.0);
        (
            vec![random_matrix(rng)],
            Box::new(move |t, v| Ok(t.scale(v[0], factor))),
        )
    })?;
    record("concat", &mut rng, &|rng, trial| {
        let axis = trial % 2;
        let (r, c) = (dim(rng), dim(rng));
        let (a, b) = if axis == 0 {
            (random(rng, &[r, c]), {
                let r2 = dim(rng);
                random(rng, &[r2, c])
            })
        } else {
            (random(rng, &[r, c]), {
                let c2 = dim(rng);
                random(rng, &[r, c2])
            })
        };
        (
            vec![a, b],
            Box::new(move |t, v| t.concat(&[v[0], v[1]], axis)),
        )
    })?;
    record("tanh", &mut rng, &|rng, _| {
        (vec![random_matrix(rng)], Box::new(|t, v| Ok(t.tanh(v[0]))))
    })?;
    record("sigmoid", &mut rng, &|rng, _| {
        (
            vec![random_matrix(rng)],
            Box::new(|t, v| Ok(t.sigmoid(v[0]))),
        )
    })?;
    record("mean", &mut rng, &|rng, trial| {
        let input = random_matrix(rng);
        if trial % 2 == 0 {
            (vec![input], Box::new(|t, v| Ok(t.mean(v[0]))))
        } else {
            (vec![input], Box::new(|t, v| t.mean_rows(v[0])))
        }
    })?;
    record("sum", &mut rng, &|rng, _| {
        (vec![random_matrix(rng)], Box::new(|t, v| Ok(t.sum(v[0]))))
    })?;
    record("slice", &mut rng, &|rng, _| {
        let n = dim(rng) + 2;
        let start = rng.gen_range(0..n);
        let len = rng.gen_range(1..=n - start);
        (
            vec![random(rng, &[n])],
            Box::new(move |t, v| t.slice(v[0], start, len)),
        )
    })?;
    record("select_rows", &mut rng, &|rng, _| {
        let (m, n) = (dim(rng), dim(rng));
        let count = dim(rng) + 1;
        let rows: Vec<usize> = (0..count).map(|_| rng.gen_range(0..m)).collect();
        (
            vec![random(rng, &[m, n])],
            Box::new(move |t, v| t.select_rows(v[0], &rows)),
        )
    })?;
    record("squared_euclidean_distance", &mut rng, &|rng, _| {
        let (m, k, d) = (dim(rng), dim(rng), dim(rng));
        (
            vec![random(rng, &[m, d]), random(rng, &[k, d])],
            Box::new(|t, v| t.sq_dist(v[0], v[1])),
        )
    })?;
    record("softmax_cross_entropy", &mut rng, &|rng, _| {
        let (n, k) = (dim(rng), dim(rng) + 1);
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let mut logits = random(rng, &[n, k]);
        for v in logits.values_mut() {
            *v *= 3.0;
        }
        (
            vec![logits],
            Box::new(move |t, v| t.softmax_cross_entropy(v[0], &targets)),
        )
    })?;
    record("recurrent_cell", &mut rng, &|rng, _| {
        let (e, h) = (dim(rng), dim(rng));
        (
            vec![
                random(rng, &[e]),
                random(rng, &[2 * h]),
                random(rng, &[e + h, 4 * h]),
                random(rng, &[4 * h]),
            ],
            Box::new(|t, v| t.lstm_cell(v[0], v[1], v[2], v[3])),
        )
    })?;
    record("recurrent_unroll", &mut rng, &|rng, _| {
        // three chained cells: exercises gradient flow through the state
        let (e, h) = (dim(rng), dim(rng));
        (
            vec![
                random(rng, &[3, e]),
                random(rng, &[e + h, 4 * h]),
                random(rng, &[4 * h]),
            ],
            Box::new(move |t, v| {
                let mut state = t.constant(Tensor::zeros(&[2 * h]));
                for step in 0..3 {
                    let x = t.select_rows(v[0], &[step])?;
                    let x = t.mean_rows(x)?;
                    state = t.lstm_cell(x, state, v[1], v[2])?;
                }
                Ok(state)
            }),
        )
    })?;

    Ok(GradCheckReport { seed, ops })
}

/// Runs the catalogue and fails when any operation reaches
/// [`FAILURE_THRESHOLD`].
pub fn gradient_check(seed: u64) -> Result<GradCheckReport> {
    let report = run_catalogue(seed)?;
    let failures = report.failures(FAILURE_THRESHOLD);
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(Error::GradCheck(format!(
            "relative error >= {FAILURE_THRESHOLD:e} for: {}",
            failures.join(", ")
        )))
    }
}
