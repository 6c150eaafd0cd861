//! Adjoint-method gradients of the mean cross-entropy loss, and a
//! central-difference oracle that differentiates the discretized loss.
//!
//! The adjoint is discretized independently of the forward scheme: backward
//! RK4 on Hermite-interpolated forward states and Simpson quadrature of the
//! gradient integrals, so the two agree up to an O(Δt⁴) discretization error.

use std::borrow::Borrow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::DictionarySpec;
use crate::error::{NaedError, Result};
use crate::integrator::{adjoint_pass, forward_pass, simpson_weights, SolverConfig};
use crate::model::{self, argmax, log_softmax, Matrix, Parameters};
use crate::signal::TimeSeries;

/// `∂J/∂β, ∂J/∂B, ∂J/∂A, ∂J/∂b`, shaped like [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub beta: Matrix,
    pub forcing: Matrix,
    pub readout: Matrix,
    pub bias: Vec<f64>,
}

pub const BLOCK_NAMES: [&str; 4] = ["beta", "B", "A", "b"];

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Self {
            beta: Matrix::zeros(params.beta.rows, params.beta.cols),
            forcing: Matrix::zeros(params.forcing.rows, params.forcing.cols),
            readout: Matrix::zeros(params.readout.rows, params.readout.cols),
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [&self.beta.data, &self.forcing.data, &self.readout.data, &self.bias]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.beta.data, &mut self.forcing.data, &mut self.readout.data, &mut self.bias]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.blocks().into_iter().flatten()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, block) in BLOCK_NAMES.iter().zip(self.blocks()) {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(NaedError::NonFiniteGradient { block: name });
            }
        }
        Ok(())
    }

    /// Per-block `‖self − reference‖_∞ / max(‖reference‖_∞, floor)`.
    pub fn relative_errors(&self, reference: &Gradients) -> [f64; 4] {
        const FLOOR: f64 = 1e-8;
        let mut out = [0.0; 4];
        for (o, (a, r)) in out.iter_mut().zip(self.blocks().into_iter().zip(reference.blocks())) {
            let diff = a.iter().zip(r).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let scale = r.iter().map(|v| v.abs()).fold(0.0, f64::max).max(FLOOR);
            *o = diff / scale;
        }
        out
    }

    pub fn max_relative_error(&self, reference: &Gradients) -> f64 {
        self.relative_errors(reference).into_iter().fold(0.0, f64::max)
    }
}

/// Loss, gradients and training accuracy of one batch evaluation.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub loss: f64,
    pub grads: Gradients,
    pub correct: usize,
}

/// Failure of one sample inside a batch.
#[derive(Debug)]
pub struct SampleFailure {
    pub sample: String,
    pub error: NaedError,
}

struct SampleContribution<'a> {
    id: &'a str,
    loss: f64,
    correct: bool,
    grads: Gradients,
}

fn sample_contribution<'a>(
    params: &Parameters,
    spec: &DictionarySpec,
    ts: &'a TimeSeries,
    scale: f64,
    cfg: SolverConfig,
) -> Result<SampleContribution<'a>> {
    let label = ts
        .label()
        .ok_or_else(|| NaedError::invalid("batch", format!("series `{}` is unlabeled", ts.id())))?;
    let m = spec.hidden_dim();
    let d = spec.dimension();
    let n = ts.input_dim();
    let classes = params.num_classes();

    let fp = forward_pass(params, spec, ts, cfg)?;
    let h_final = fp.traj.final_state();
    let log_p = log_softmax(&params.logits(h_final));
    let probs: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
    // residual y − ŷ
    let mut residual: Vec<f64> = probs.iter().map(|p| -p).collect();
    residual[label] += 1.0;

    let mut grads = Gradients::zeros_like(params);
    for c in 0..classes {
        grads.bias[c] = -scale * residual[c];
        for i in 0..m {
            grads.readout.data[c * m + i] = -scale * residual[c] * h_final[i];
        }
    }

    // λ(T) = (1/|batch|) Aᵀ(y − ŷ), the negated loss sensitivity to h(T)
    let mut terminal = params.readout.transpose_mul_vec(&residual);
    terminal.iter_mut().for_each(|v| *v *= scale);
    let adj = adjoint_pass(params, spec, &fp, &terminal, cfg)?;

    let times = fp.traj.grid.times();
    let (w_nodes, w_mids) = simpson_weights(times);
    let mut accumulate = |w: f64, lam: &[f64], xi: &[f64], x: &[f64]| {
        for a in 0..m {
            let wl = w * lam[a];
            for (g, v) in grads.beta.data[a * d..(a + 1) * d].iter_mut().zip(xi) {
                *g -= wl * v;
            }
            for (g, v) in grads.forcing.data[a * n..(a + 1) * n].iter_mut().zip(x) {
                *g -= wl * v;
            }
        }
    };
    for (k, &w) in w_nodes.iter().enumerate() {
        accumulate(w, adj.lambda.state(k), &fp.xi[k * d..(k + 1) * d], &fp.forcing[k * n..(k + 1) * n]);
    }
    let mut x_mid = vec![0.0; n];
    for (k, &w) in w_mids.iter().enumerate() {
        ts.interpolate_segment(fp.traj.grid.segment(k), 0.5 * (times[k] + times[k + 1]), &mut x_mid);
        accumulate(w, &adj.lambda_mid[k * m..(k + 1) * m], &adj.xi_mid[k * d..(k + 1) * d], &x_mid);
    }

    Ok(SampleContribution {
        id: ts.id(),
        loss: -log_p[label],
        correct: argmax(&probs) == label,
        grads,
    })
}

/// Adjoint gradients with per-sample failure details; contributions are
/// reduced in ascending sample-id order.
pub fn evaluate_batch<T>(
    params: &Parameters,
    spec: &DictionarySpec,
    batch: &[T],
    cfg: SolverConfig,
) -> std::result::Result<BatchEvaluation, SampleFailure>
where
    T: Borrow<TimeSeries> + Sync,
{
    if batch.is_empty() {
        return Err(SampleFailure {
            sample: String::new(),
            error: NaedError::invalid("batch", "empty batch"),
        });
    }
    let scale = 1.0 / batch.len() as f64;
    let mut parts: Vec<std::result::Result<SampleContribution<'_>, SampleFailure>> = batch
        .par_iter()
        .map(|ts| {
            let ts = ts.borrow();
            sample_contribution(params, spec, ts, scale, cfg).map_err(|error| SampleFailure {
                sample: ts.id().to_string(),
                error,
            })
        })
        .collect();
    parts.sort_by(|a, b| {
        let key = |r: &std::result::Result<SampleContribution<'_>, SampleFailure>| match r {
            Ok(c) => c.id.to_string(),
            Err(f) => f.sample.clone(),
        };
        key(a).cmp(&key(b))
    });

    let mut grads = Gradients::zeros_like(params);
    let mut loss = 0.0;
    let mut correct = 0;
    for part in parts {
        let c = part?;
        loss += c.loss;
        correct += usize::from(c.correct);
        grads.add_assign(&c.grads);
    }
    grads.check_finite().map_err(|error| SampleFailure {
        sample: String::new(),
        error,
    })?;
    Ok(BatchEvaluation {
        loss: loss * scale,
        grads,
        correct,
    })
}

/// Mean cross-entropy and its adjoint-method gradients.
pub fn adjoint_gradients<T>(params: &Parameters, spec: &DictionarySpec, batch: &[T], cfg: SolverConfig) -> Result<(f64, Gradients)>
where
    T: Borrow<TimeSeries> + Sync,
{
    evaluate_batch(params, spec, batch, cfg)
        .map(|e| (e.loss, e.grads))
        .map_err(|f| f.error)
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central differences of the discretized loss, one coordinate at a time,
/// with step `eps·max(1, |θ_k|)`.
pub fn finite_difference_oracle(
    params: &Parameters,
    spec: &DictionarySpec,
    batch: &[TimeSeries],
    cfg: SolverConfig,
    eps: f64,
) -> Result<Gradients> {
    if !(eps > 0.0) {
        return Err(NaedError::invalid("finite-difference step", format!("must be positive, got {eps}")));
    }
    let flat = params.to_flat();
    let derivs: Vec<Result<f64>> = (0..flat.len())
        .into_par_iter()
        .map(|k| {
            let step = eps * flat[k].abs().max(1.0);
            let mut probe = params.clone();
            let mut values = flat.clone();
            values[k] = flat[k] + step;
            probe.set_flat(&values);
            let plus = model::loss(&probe, spec, batch, cfg)?;
            values[k] = flat[k] - step;
            probe.set_flat(&values);
            let minus = model::loss(&probe, spec, batch, cfg)?;
            Ok((plus - minus) / (2.0 * step))
        })
        .collect();
    let mut grads = Gradients::zeros_like(params);
    let mut it = derivs.into_iter();
    for block in grads.blocks_mut() {
        for g in block.iter_mut() {
            *g = it.next().unwrap()?;
        }
    }
    Ok(grads)
}

/// Central difference of a scalar function, the oracle's building block.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    let step = eps * x.abs().max(1.0);
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Adjoint-versus-oracle errors at one substep count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckLevel {
    pub substeps: usize,
    /// Per block, in the order of [`BLOCK_NAMES`].
    pub block_errors: [f64; 4],
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub levels: Vec<GradCheckLevel>,
    /// `max_error[i] / max_error[i + 1]` for consecutive levels.
    pub ratios: Vec<f64>,
}

/// Compares adjoint gradients with the oracle at each substep count.
pub fn convergence_study(
    params: &Parameters,
    spec: &DictionarySpec,
    batch: &[TimeSeries],
    substeps: &[usize],
    eps: f64,
) -> Result<GradCheckReport> {
    let mut levels = Vec::with_capacity(substeps.len());
    for &s in substeps {
        let cfg = SolverConfig::with_substeps(s);
        let (_, adjoint) = adjoint_gradients(params, spec, batch, cfg)?;
        let oracle = finite_difference_oracle(params, spec, batch, cfg, eps)?;
        let block_errors = adjoint.relative_errors(&oracle);
        levels.push(GradCheckLevel {
            substeps: s,
            block_errors,
            max_error: block_errors.iter().cloned().fold(0.0, f64::max),
        });
    }
    let ratios = levels.windows(2).map(|w| w[0].max_error / w[1].max_error).collect();
    Ok(GradCheckReport { levels, ratios })
}

/// Seeded test problem for gradient checks: signals sampled every 2 on `[0, 20]`
/// built from two random sinusoids per channel, labels cycling through the
/// classes, and `β, B ~ U[−0.5, 0.5]` so that trajectories stay moderate
/// while the dynamics are far from trivial. `β` is halved and `B` shrunk
/// until every trajectory stays within `[−3, 3]`.
pub fn gradcheck_problem(
    spec: &DictionarySpec,
    input_dim: usize,
    classes: usize,
    samples: usize,
    seed: u64,
) -> Result<(Parameters, Vec<TimeSeries>)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let times: Vec<f64> = (0..=10).map(|j| 2.0 * f64::from(j)).collect();
    let batch = (0..samples)
        .map(|i| {
            let waves: Vec<(f64, f64, f64)> = (0..2 * input_dim)
                .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.0..6.3)))
                .collect();
            let values = times
                .iter()
                .map(|t| {
                    (0..input_dim)
                        .map(|k| waves[2 * k..2 * k + 2].iter().map(|(a, w, ph)| a * (w * t + ph).sin()).sum())
                        .collect()
                })
                .collect();
            TimeSeries::new(format!("g{i:03}"), times.clone(), values, Some(i % classes))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut params = model::initialize(spec, input_dim, classes, seed);
    for v in params.beta.data.iter_mut().chain(params.forcing.data.iter_mut()) {
        *v = rng.gen_range(-0.5..0.5);
    }
    let bounded = |p: &Parameters| {
        batch.iter().all(|ts| {
            crate::integrator::solve_forward(p, spec, ts, SolverConfig::with_substeps(4))
                .is_ok_and(|traj| traj.states.iter().all(|v| v.abs() <= 3.0))
        })
    };
    for _ in 0..30 {
        if bounded(&params) {
            break;
        }
        params.beta.data.iter_mut().for_each(|v| *v *= 0.5);
        params.forcing.data.iter_mut().for_each(|v| *v *= 0.8);
    }
    Ok((params, batch))
}
