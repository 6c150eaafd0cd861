//! Empirical checks of the input-perturbation stability bounds.
//!
//! For a trained classifier `𝒞(x) = σ(A h(T) + b)` the perturbed prediction
//! satisfies `|𝒞(x+η) − 𝒞(x)| ≤ L ‖η‖_{L¹}` with
//! `L = ‖A‖₂ ‖B‖₂ e^{𝓛 T ‖β‖₂}`, where `𝓛` is the Lipschitz constant of the
//! dictionary on a ball containing every trajectory involved. The same `L`
//! controls Wiener-path perturbations through `sup_s |W_s|`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::DictionarySpec;
use crate::error::{NaedError, Result};
use crate::integrator::{RhsWork, SolverConfig};
use crate::model::{softmax, Parameters};
use crate::signal::TimeSeries;

/// Radius inflation applied to the observed trajectory hull before the
/// polynomial Lipschitz bound is taken.
const RADIUS_MARGIN: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub l1_trials: usize,
    pub wiener_paths: usize,
    /// Largest L¹ norm drawn for deterministic perturbations.
    pub max_l1: f64,
    /// Wiener increments per sample interval.
    pub wiener_refine: usize,
    pub substeps: usize,
    pub seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            l1_trials: 10_000,
            wiener_paths: 10_000,
            max_l1: 1.0,
            wiener_refine: 8,
            substeps: 1,
            seed: 0,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_l1.is_finite() && self.max_l1 > 0.0) {
            return Err(NaedError::invalid("max_l1", "must be positive and finite"));
        }
        if self.wiener_refine == 0 || self.substeps == 0 {
            return Err(NaedError::invalid("substeps", "must be at least 1"));
        }
        Ok(())
    }
}

/// The pieces of the stability constant `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstant {
    /// `‖A‖₂`; softmax itself is 1-Lipschitz in the Euclidean norm.
    pub readout_lipschitz: f64,
    pub forcing_norm: f64,
    pub beta_norm: f64,
    pub dictionary_lipschitz: f64,
    pub radius: f64,
    pub final_time: f64,
    pub value: f64,
}

impl StabilityConstant {
    pub fn compute(params: &Parameters, spec: &DictionarySpec, radius: f64, final_time: f64) -> Self {
        let readout_lipschitz = params.readout.spectral_norm();
        let forcing_norm = params.forcing.spectral_norm();
        let beta_norm = params.beta.spectral_norm();
        let dictionary_lipschitz = spec.vector_lipschitz(radius);
        let value = readout_lipschitz * forcing_norm * (dictionary_lipschitz * final_time * beta_norm).exp();
        Self {
            readout_lipschitz,
            forcing_norm,
            beta_norm,
            dictionary_lipschitz,
            radius,
            final_time,
            value,
        }
    }
}

/// L¹ radius within which the predicted class cannot change.
///
/// A class swap needs the top-two probability gap to close, and that gap moves
/// by at most `√2 |Δp|₂`.
pub fn certified_l1_radius(probabilities: &[f64], constant: f64) -> f64 {
    let mut sorted = probabilities.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let gap = sorted[0] - sorted.get(1).copied().unwrap_or(0.0);
    gap / (std::f64::consts::SQRT_2 * constant)
}

/// `∫₀¹ |p + s q|₂ ds`, in closed form.
fn segment_norm_integral(p: &[f64], q: &[f64]) -> f64 {
    let qq: f64 = q.iter().map(|v| v * v).sum();
    let pp: f64 = p.iter().map(|v| v * v).sum();
    if qq == 0.0 {
        return pp.sqrt();
    }
    let qn = qq.sqrt();
    let s0 = p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / qq;
    let k2 = (pp / qq - s0 * s0).max(0.0);
    let k = k2.sqrt();
    let antiderivative = |u: f64| {
        let tail = if k > 0.0 { k2 * (u / k).asinh() } else { 0.0 };
        0.5 * (u * (u * u + k2).sqrt() + tail)
    };
    qn * (antiderivative(1.0 + s0) - antiderivative(s0))
}

/// Exact `∫₀^T |η(t)|₂ dt` for a piecewise-linear signal given by its samples.
pub fn l1_norm(times: &[f64], values: &[f64], input_dim: usize) -> f64 {
    let mut q = vec![0.0; input_dim];
    times
        .windows(2)
        .enumerate()
        .map(|(j, w)| {
            let a = &values[j * input_dim..(j + 1) * input_dim];
            let b = &values[(j + 1) * input_dim..(j + 2) * input_dim];
            for i in 0..input_dim {
                q[i] = b[i] - a[i];
            }
            (w[1] - w[0]) * segment_norm_integral(a, &q)
        })
        .sum()
}

fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct L1Report {
    pub trials: usize,
    pub violations: usize,
    /// Largest observed `|Δ𝒞| / (L ‖η‖_{L¹})`.
    pub max_ratio: f64,
    /// Trials whose perturbation lay inside the certified radius.
    pub certified_trials: usize,
    pub certified_flips: usize,
    pub constant: StabilityConstant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WienerReport {
    pub paths: usize,
    pub input_dim: usize,
    /// Paths with `|Δ𝒞| > L sup|W|`.
    pub pathwise_violations: usize,
    pub max_ratio: f64,
    /// Fraction of paths with `|Δ𝒞| ≥ r`, `r = 3 (dT)^{1/2} L`.
    pub empirical_tail: f64,
    /// Fraction of paths with `sup|W| ≥ 3 (dT)^{1/2}`.
    pub sup_tail: f64,
    /// `2d e^{−r²/(2dTL²)}`, the same at both thresholds.
    pub tail_bound: f64,
    pub constant: StabilityConstant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub l1: L1Report,
    pub wiener: WienerReport,
}

impl L1Report {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.certified_flips == 0
    }
}

impl WienerReport {
    pub fn passed(&self) -> bool {
        self.pathwise_violations == 0 && self.empirical_tail <= self.tail_bound && self.sup_tail <= self.tail_bound
    }
}

impl StabilityReport {
    pub fn passed(&self) -> bool {
        self.l1.passed() && self.wiener.passed()
    }
}

fn check_inputs(params: &Parameters, spec: &DictionarySpec, samples: &[TimeSeries], config: &StabilityConfig) -> Result<()> {
    config.validate()?;
    params.check_shapes(spec)?;
    if samples.is_empty() {
        return Err(NaedError::invalid("samples", "no samples to perturb"));
    }
    if samples.iter().any(|s| s.input_dim() != params.input_dim()) {
        return Err(NaedError::invalid("samples", "input dimension does not match the model"));
    }
    Ok(())
}

fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Outcome {
    distance: f64,
    size: f64,
    radius: f64,
    flipped: bool,
    nominal: Vec<f64>,
}

/// Random piecewise-linear perturbation with log-uniform L¹ norm in
/// `[1e-6, 1]·max_l1`.
fn draw_perturbation(ts: &TimeSeries, max_l1: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let n = ts.input_dim();
    let len = ts.len();
    let mut eta: Vec<f64> = (0..len * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    // localized bumps half of the time
    if rng.gen_bool(0.5) {
        let width = rng.gen_range(1..=len.max(2) / 2);
        let start = rng.gen_range(0..=len - width.min(len));
        for (j, chunk) in eta.chunks_mut(n).enumerate() {
            if j < start || j >= start + width {
                chunk.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let mut size = l1_norm(ts.times(), &eta, n);
    if size == 0.0 {
        eta.iter_mut().for_each(|v| *v = 1.0);
        size = l1_norm(ts.times(), &eta, n);
    }
    let target = max_l1 * 10f64.powf(rng.gen_range(-6.0..=0.0));
    let scale = target / size;
    eta.iter_mut().for_each(|v| *v *= scale);
    let size = l1_norm(ts.times(), &eta, n);
    (eta, size)
}

fn trajectory_radius(traj: &crate::integrator::Trajectory) -> f64 {
    traj.states.chunks(traj.dim).map(norm).fold(0.0, f64::max)
}

/// Deterministic-perturbation check: `|𝒞(x+η) − 𝒞(x)| ≤ L ‖η‖_{L¹}`.
pub fn check_l1(params: &Parameters, spec: &DictionarySpec, samples: &[TimeSeries], config: &StabilityConfig) -> Result<L1Report> {
    check_inputs(params, spec, samples, config)?;
    let cfg = SolverConfig::with_substeps(config.substeps);
    let outcomes: Vec<Outcome> = (0..config.l1_trials)
        .into_par_iter()
        .map(|trial| {
            let ts = &samples[trial % samples.len()];
            let mut rng = trial_rng(config.seed, trial as u64);
            let (eta, size) = draw_perturbation(ts, config.max_l1, &mut rng);
            let nominal_traj = crate::integrator::solve_forward(params, spec, ts, cfg)?;
            let values: Vec<f64> = ts.values().iter().zip(&eta).map(|(x, e)| x + e).collect();
            let perturbed = ts.with_values(values)?;
            let perturbed_traj = crate::integrator::solve_forward(params, spec, &perturbed, cfg)?;
            let p = softmax(&params.logits(nominal_traj.final_state()));
            let q = softmax(&params.logits(perturbed_traj.final_state()));
            Ok(Outcome {
                distance: euclidean_distance(&p, &q),
                size,
                radius: trajectory_radius(&nominal_traj).max(trajectory_radius(&perturbed_traj)),
                flipped: crate::model::argmax(&p) != crate::model::argmax(&q),
                nominal: p,
            })
        })
        .collect::<Result<_>>()?;

    let radius = outcomes.iter().map(|o| o.radius).fold(0.0, f64::max) * RADIUS_MARGIN;
    let final_time = samples.iter().map(TimeSeries::final_time).fold(0.0, f64::max);
    let constant = StabilityConstant::compute(params, spec, radius, final_time);
    let mut report = L1Report {
        trials: outcomes.len(),
        violations: 0,
        max_ratio: 0.0,
        certified_trials: 0,
        certified_flips: 0,
        constant,
    };
    for o in &outcomes {
        let bound = constant.value * o.size;
        if o.distance > bound {
            report.violations += 1;
        }
        if bound > 0.0 {
            report.max_ratio = report.max_ratio.max(o.distance / bound);
        }
        if o.size < certified_l1_radius(&o.nominal, constant.value) {
            report.certified_trials += 1;
            if o.flipped {
                report.certified_flips += 1;
            }
        }
    }
    Ok(report)
}

/// Final state of `ḣ = βΞ(h) + B(x + Ẇ)` for a Wiener path `W` that is linear
/// between the nodes of `times`; `w` holds `W` at those nodes.
///
/// Solves for `u = h − B W`, which obeys the smooth equation
/// `u̇ = βΞ(u + BW) + Bx`. Also returns the largest `|h|` seen at a node.
fn solve_shifted(
    params: &Parameters,
    spec: &DictionarySpec,
    ts: &TimeSeries,
    times: &[f64],
    w: &[f64],
    substeps: usize,
    guard: f64,
) -> Result<(Vec<f64>, f64)> {
    let m = spec.hidden_dim();
    let n = ts.input_dim();
    let mut work = RhsWork::new(spec);
    let mut u = vec![0.0; m];
    let mut shift = vec![0.0; m];
    let mut h = vec![0.0; m];
    let mut x = vec![0.0; n];
    let mut wt = vec![0.0; n];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut tmp = vec![0.0; m];
    let mut end_w = vec![0.0; n];
    let mut end_h = vec![0.0; m];
    let mut radius = 0.0f64;

    let mut eval = |work: &mut RhsWork, j: usize, t: f64, state: &[f64], out: &mut [f64]| {
        let lam = (t - times[j]) / (times[j + 1] - times[j]);
        for i in 0..n {
            wt[i] = (1.0 - lam) * w[j * n + i] + lam * w[(j + 1) * n + i];
        }
        params.forcing.mul_vec_into(&wt, &mut shift);
        for i in 0..m {
            h[i] = state[i] + shift[i];
        }
        ts.interpolate_into(t, &mut x);
        work.rhs(params, spec, &h, &x, out);
    };

    for j in 0..times.len() - 1 {
        let dt = (times[j + 1] - times[j]) / substeps as f64;
        for r in 0..substeps {
            let t = times[j] + r as f64 * dt;
            eval(&mut work, j, t, &u, &mut k1);
            for i in 0..m {
                tmp[i] = u[i] + 0.5 * dt * k1[i];
            }
            eval(&mut work, j, t + 0.5 * dt, &tmp, &mut k2);
            for i in 0..m {
                tmp[i] = u[i] + 0.5 * dt * k2[i];
            }
            eval(&mut work, j, t + 0.5 * dt, &tmp, &mut k3);
            for i in 0..m {
                tmp[i] = u[i] + dt * k3[i];
            }
            let t_next = if r + 1 == substeps { times[j + 1] } else { t + dt };
            eval(&mut work, j, t_next, &tmp, &mut k4);
            for i in 0..m {
                u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let lam = (t_next - times[j]) / (times[j + 1] - times[j]);
            for i in 0..n {
                end_w[i] = (1.0 - lam) * w[j * n + i] + lam * w[(j + 1) * n + i];
            }
            params.forcing.mul_vec_into(&end_w, &mut end_h);
            for i in 0..m {
                end_h[i] += u[i];
            }
            let size = norm(&end_h);
            if !(size.is_finite() && size <= guard) {
                return Err(NaedError::BlowUp { t: t_next, norm: size });
            }
            radius = radius.max(size);
        }
    }
    Ok((end_h, radius))
}

/// Sample grid with every interval split into `refine` equal pieces.
fn refined_times(times: &[f64], refine: usize) -> Vec<f64> {
    crate::integrator::FineGrid::new(times, refine).times().to_vec()
}

struct PathOutcome {
    distance: f64,
    sup_w: f64,
    final_time: f64,
    radius: f64,
}

/// Wiener-path check: pathwise `|Δ𝒞| ≤ L sup|W|` plus the tail bound at
/// `r = 3 (dT)^{1/2} L`, with `d` the input dimension.
pub fn check_wiener(params: &Parameters, spec: &DictionarySpec, samples: &[TimeSeries], config: &StabilityConfig) -> Result<WienerReport> {
    check_inputs(params, spec, samples, config)?;
    let n = params.input_dim();
    let guard = SolverConfig::default().blowup_guard;
    let nominal: Vec<(Vec<f64>, f64)> = samples
        .par_iter()
        .map(|ts| {
            let times = refined_times(ts.times(), config.wiener_refine);
            let zero = vec![0.0; times.len() * n];
            solve_shifted(params, spec, ts, &times, &zero, config.substeps, guard)
        })
        .collect::<Result<_>>()?;

    let outcomes: Vec<PathOutcome> = (0..config.wiener_paths)
        .into_par_iter()
        .map(|path| {
            let idx = path % samples.len();
            let ts = &samples[idx];
            let times = refined_times(ts.times(), config.wiener_refine);
            let mut rng = trial_rng(config.seed.wrapping_add(1), path as u64);
            let mut w = vec![0.0; times.len() * n];
            let mut sup_w = 0.0f64;
            for k in 1..times.len() {
                let sd = (times[k] - times[k - 1]).sqrt();
                for i in 0..n {
                    let z: f64 = rng.sample(StandardNormal);
                    w[k * n + i] = w[(k - 1) * n + i] + sd * z;
                }
                sup_w = sup_w.max(norm(&w[k * n..(k + 1) * n]));
            }
            let (h_final, radius) = solve_shifted(params, spec, ts, &times, &w, config.substeps, guard)?;
            let p = softmax(&params.logits(&nominal[idx].0));
            let q = softmax(&params.logits(&h_final));
            Ok(PathOutcome {
                distance: euclidean_distance(&p, &q),
                sup_w,
                final_time: ts.final_time(),
                radius,
            })
        })
        .collect::<Result<_>>()?;

    let radius = outcomes
        .iter()
        .map(|o| o.radius)
        .chain(nominal.iter().map(|(_, r)| *r))
        .fold(0.0, f64::max)
        * RADIUS_MARGIN;
    let final_time = samples.iter().map(TimeSeries::final_time).fold(0.0, f64::max);
    let constant = StabilityConstant::compute(params, spec, radius, final_time);
    let l = constant.value;
    let d = n as f64;

    let mut pathwise_violations = 0;
    let mut max_ratio = 0.0f64;
    let mut over_r = 0usize;
    let mut over_z = 0usize;
    for o in &outcomes {
        let bound = l * o.sup_w;
        if o.distance > bound {
            pathwise_violations += 1;
        }
        if bound > 0.0 {
            max_ratio = max_ratio.max(o.distance / bound);
        }
        let z = 3.0 * (d * o.final_time).sqrt();
        if o.distance >= z * l {
            over_r += 1;
        }
        if o.sup_w >= z {
            over_z += 1;
        }
    }
    let paths = outcomes.len().max(1) as f64;
    Ok(WienerReport {
        paths: outcomes.len(),
        input_dim: n,
        pathwise_violations,
        max_ratio,
        empirical_tail: over_r as f64 / paths,
        sup_tail: over_z as f64 / paths,
        tail_bound: 2.0 * d * (-4.5f64).exp(),
        constant,
    })
}

pub fn stability_check(params: &Parameters, spec: &DictionarySpec, samples: &[TimeSeries], config: &StabilityConfig) -> Result<StabilityReport> {
    Ok(StabilityReport {
        l1: check_l1(params, spec, samples, config)?,
        wiener: check_wiener(params, spec, samples, config)?,
    })
}
