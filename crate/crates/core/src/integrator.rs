//! Fixed-step RK4 for the forced hidden-state ODE and its adjoint, plus
//! composite quadrature rules.
//!
//! Steps are aligned with the sample grid: every sample interval is split into
//! `substeps` equal steps, so the piecewise-linear forcing is smooth inside
//! each step.

use crate::dictionary::DictionarySpec;
use crate::error::{NaedError, Result};
use crate::model::Parameters;
use crate::signal::TimeSeries;

pub const DEFAULT_BLOWUP_GUARD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// RK4 steps per sample interval.
    pub substeps: usize,
    /// Solves abort once `‖h‖_∞` exceeds this.
    pub blowup_guard: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            substeps: 1,
            blowup_guard: DEFAULT_BLOWUP_GUARD,
        }
    }
}

impl SolverConfig {
    pub fn with_substeps(substeps: usize) -> Self {
        Self {
            substeps,
            ..Self::default()
        }
    }
}

/// Sample grid refined by `substeps` equal subdivisions per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FineGrid {
    times: Vec<f64>,
    substeps: usize,
}

impl FineGrid {
    pub fn new(sample_times: &[f64], substeps: usize) -> Self {
        assert!(substeps >= 1, "substeps must be at least 1");
        let mut times = Vec::with_capacity((sample_times.len() - 1) * substeps + 1);
        for w in sample_times.windows(2) {
            let dt = (w[1] - w[0]) / substeps as f64;
            times.push(w[0]);
            for r in 1..substeps {
                times.push(w[0] + r as f64 * dt);
            }
        }
        times.push(*sample_times.last().unwrap());
        Self { times, substeps }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Sample interval containing the step that starts at node `k`.
    #[inline]
    pub fn segment(&self, k: usize) -> usize {
        k / self.substeps
    }
}

/// States on every fine-grid node, row-major (`len × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: FineGrid,
    pub states: Vec<f64>,
    pub dim: usize,
}

impl Trajectory {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.grid.len() - 1)
    }

    pub fn initial_state(&self) -> &[f64] {
        self.state(0)
    }
}

/// Forward solve plus the node data reused by the gradient quadratures.
#[derive(Debug, Clone)]
pub(crate) struct ForwardPass {
    pub traj: Trajectory,
    /// `Ξ(h)` at every node (`len × d`).
    pub xi: Vec<f64>,
    /// Interpolated forcing at every node (`len × n`).
    pub forcing: Vec<f64>,
    /// `ḣ` at every node (`len × m`), for Hermite interpolation.
    pub hdot: Vec<f64>,
}

/// Scratch buffers for right-hand-side evaluation.
pub(crate) struct RhsWork {
    dict_scratch: Vec<f64>,
    pub xi: Vec<f64>,
    pub jac: Vec<f64>,
}

impl RhsWork {
    pub fn new(spec: &DictionarySpec) -> Self {
        Self {
            dict_scratch: Vec::new(),
            xi: vec![0.0; spec.dimension()],
            jac: vec![0.0; spec.dimension() * spec.hidden_dim()],
        }
    }

    /// `out = β Ξ(h) + B x`; leaves `Ξ(h)` in `self.xi`.
    #[inline]
    pub fn rhs(&mut self, params: &Parameters, spec: &DictionarySpec, h: &[f64], x: &[f64], out: &mut [f64]) {
        spec.eval_into(h, &mut self.dict_scratch, &mut self.xi, None);
        params.beta.mul_vec_into(&self.xi, out);
        params.forcing.mul_vec_add(x, out);
    }

    /// `out = β D_hΞ(h)` as an `m × m` row-major matrix.
    #[inline]
    pub fn linearization(&mut self, params: &Parameters, spec: &DictionarySpec, h: &[f64], out: &mut [f64]) {
        spec.eval_into(h, &mut self.dict_scratch, &mut self.xi, Some(&mut self.jac));
        let m = spec.hidden_dim();
        let d = spec.dimension();
        out.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..m {
            let brow = params.beta.row(a);
            for j in 0..d {
                let bj = brow[j];
                if bj == 0.0 {
                    continue;
                }
                let jrow = &self.jac[j * m..(j + 1) * m];
                for c in 0..m {
                    out[a * m + c] += bj * jrow[c];
                }
            }
        }
    }
}

#[inline]
fn check_guard(state: &[f64], guard: f64, t: f64) -> Result<()> {
    let norm = state.iter().fold(0.0f64, |acc, v| if v.is_nan() { f64::NAN } else { acc.max(v.abs()) });
    if norm.is_nan() || norm > guard {
        return Err(NaedError::BlowUp { t, norm });
    }
    Ok(())
}

/// RK4 solution of `ḣ = βΞ(h) + B x(t)`, `h(0) = 0`, on the fine grid.
pub fn solve_forward(params: &Parameters, spec: &DictionarySpec, ts: &TimeSeries, cfg: SolverConfig) -> Result<Trajectory> {
    forward(params, spec, ts, cfg, false).map(|p| p.traj)
}

pub(crate) fn forward_pass(params: &Parameters, spec: &DictionarySpec, ts: &TimeSeries, cfg: SolverConfig) -> Result<ForwardPass> {
    forward(params, spec, ts, cfg, true)
}

fn forward(params: &Parameters, spec: &DictionarySpec, ts: &TimeSeries, cfg: SolverConfig, record: bool) -> Result<ForwardPass> {
    let m = spec.hidden_dim();
    let d = spec.dimension();
    let n = ts.input_dim();
    let grid = FineGrid::new(ts.times(), cfg.substeps);
    let nodes = grid.len();
    let mut states = vec![0.0; nodes * m];
    let mut xi_nodes = if record { vec![0.0; nodes * d] } else { Vec::new() };
    let mut forcing = if record { vec![0.0; nodes * n] } else { Vec::new() };
    let mut hdot = if record { vec![0.0; nodes * m] } else { Vec::new() };

    let mut work = RhsWork::new(spec);
    let mut x_a = vec![0.0; n];
    let mut x_mid = vec![0.0; n];
    let mut x_b = vec![0.0; n];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut tmp = vec![0.0; m];
    let mut h = vec![0.0; m];

    let times = grid.times();
    for k in 0..nodes - 1 {
        let (t, t_next) = (times[k], times[k + 1]);
        let dt = t_next - t;
        let seg = grid.segment(k);
        ts.interpolate_segment(seg, t, &mut x_a);
        ts.interpolate_segment(seg, t + 0.5 * dt, &mut x_mid);
        ts.interpolate_segment(seg, t_next, &mut x_b);

        work.rhs(params, spec, &h, &x_a, &mut k1);
        if record {
            xi_nodes[k * d..(k + 1) * d].copy_from_slice(&work.xi);
            forcing[k * n..(k + 1) * n].copy_from_slice(&x_a);
            hdot[k * m..(k + 1) * m].copy_from_slice(&k1);
        }
        for i in 0..m {
            tmp[i] = h[i] + 0.5 * dt * k1[i];
        }
        work.rhs(params, spec, &tmp, &x_mid, &mut k2);
        for i in 0..m {
            tmp[i] = h[i] + 0.5 * dt * k2[i];
        }
        work.rhs(params, spec, &tmp, &x_mid, &mut k3);
        for i in 0..m {
            tmp[i] = h[i] + dt * k3[i];
        }
        work.rhs(params, spec, &tmp, &x_b, &mut k4);
        for i in 0..m {
            h[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        check_guard(&h, cfg.blowup_guard, t_next)?;
        states[(k + 1) * m..(k + 2) * m].copy_from_slice(&h);
    }
    if record {
        let last = nodes - 1;
        let x_last = ts.value(ts.len() - 1);
        work.rhs(params, spec, &h, x_last, &mut k1);
        xi_nodes[last * d..].copy_from_slice(&work.xi);
        forcing[last * n..].copy_from_slice(x_last);
        hdot[last * m..].copy_from_slice(&k1);
    }
    Ok(ForwardPass {
        traj: Trajectory { grid, states, dim: m },
        xi: xi_nodes,
        forcing,
        hdot,
    })
}

/// Cubic Hermite value at the midpoint of a step of length `dt`.
#[inline]
fn hermite_mid(a: f64, b: f64, da: f64, db: f64, dt: f64) -> f64 {
    0.5 * (a + b) + 0.125 * dt * (da - db)
}

/// Adjoint nodes plus the step-midpoint data used by Simpson quadrature.
#[derive(Debug, Clone)]
pub(crate) struct AdjointPass {
    pub lambda: Trajectory,
    /// `λ` at every step midpoint (`steps × m`).
    pub lambda_mid: Vec<f64>,
    /// `Ξ(h)` at every step midpoint (`steps × d`).
    pub xi_mid: Vec<f64>,
}

/// Backward RK4 solve of `λ̇ = −[β D_hΞ(h)]ᵀ λ` from `λ(T) = terminal`.
///
/// Half-step forward states come from cubic Hermite interpolation of the
/// stored trajectory and its derivative, which keeps the scheme fourth order.
pub fn solve_adjoint(
    params: &Parameters,
    spec: &DictionarySpec,
    ts: &TimeSeries,
    forward: &Trajectory,
    terminal: &[f64],
    cfg: SolverConfig,
) -> Result<Trajectory> {
    let m = spec.hidden_dim();
    let mut work = RhsWork::new(spec);
    let mut x = vec![0.0; ts.input_dim()];
    let mut hdot = vec![0.0; forward.states.len()];
    for (k, &t) in forward.grid.times().iter().enumerate() {
        ts.interpolate_into(t, &mut x);
        work.rhs(params, spec, forward.state(k), &x, &mut hdot[k * m..(k + 1) * m]);
    }
    adjoint_core(params, spec, forward, &hdot, terminal, cfg, false).map(|a| a.lambda)
}

pub(crate) fn adjoint_pass(
    params: &Parameters,
    spec: &DictionarySpec,
    forward: &ForwardPass,
    terminal: &[f64],
    cfg: SolverConfig,
) -> Result<AdjointPass> {
    adjoint_core(params, spec, &forward.traj, &forward.hdot, terminal, cfg, true)
}

fn adjoint_core(
    params: &Parameters,
    spec: &DictionarySpec,
    forward: &Trajectory,
    hdot: &[f64],
    terminal: &[f64],
    cfg: SolverConfig,
    record: bool,
) -> Result<AdjointPass> {
    let m = spec.hidden_dim();
    let d = spec.dimension();
    if terminal.len() != m {
        return Err(NaedError::invalid("adjoint terminal", format!("expected length {m}, got {}", terminal.len())));
    }
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(NaedError::invalid("adjoint terminal", "non-finite entries"));
    }
    let grid = forward.grid.clone();
    let nodes = grid.len();
    let steps = nodes - 1;
    let times = grid.times();
    let mut states = vec![0.0; nodes * m];
    let mut lambda_mid = if record { vec![0.0; steps * m] } else { Vec::new() };
    let mut xi_mid = if record { vec![0.0; steps * d] } else { Vec::new() };
    let mut lam = terminal.to_vec();
    states[(nodes - 1) * m..].copy_from_slice(&lam);

    let mut work = RhsWork::new(spec);
    let mut m_hi = vec![0.0; m * m];
    let mut m_mid = vec![0.0; m * m];
    let mut m_lo = vec![0.0; m * m];
    let mut h_mid = vec![0.0; m];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut tmp = vec![0.0; m];
    let mut dlam_lo = vec![0.0; m];

    // g(λ) = −Mᵀ λ
    let apply = |mat: &[f64], v: &[f64], out: &mut [f64]| {
        for c in 0..m {
            let mut acc = 0.0;
            for a in 0..m {
                acc += mat[a * m + c] * v[a];
            }
            out[c] = -acc;
        }
    };

    work.linearization(params, spec, forward.state(nodes - 1), &mut m_hi);
    for k in (0..steps).rev() {
        let dt = times[k + 1] - times[k];
        let (h_lo, h_hi) = (forward.state(k), forward.state(k + 1));
        let (f_lo, f_hi) = (&hdot[k * m..(k + 1) * m], &hdot[(k + 1) * m..(k + 2) * m]);
        for i in 0..m {
            h_mid[i] = hermite_mid(h_lo[i], h_hi[i], f_lo[i], f_hi[i], dt);
        }
        work.linearization(params, spec, &h_mid, &mut m_mid);
        if record {
            xi_mid[k * d..(k + 1) * d].copy_from_slice(&work.xi);
        }
        work.linearization(params, spec, h_lo, &mut m_lo);

        apply(&m_hi, &lam, &mut k1);
        for i in 0..m {
            tmp[i] = lam[i] - 0.5 * dt * k1[i];
        }
        apply(&m_mid, &tmp, &mut k2);
        for i in 0..m {
            tmp[i] = lam[i] - 0.5 * dt * k2[i];
        }
        apply(&m_mid, &tmp, &mut k3);
        for i in 0..m {
            tmp[i] = lam[i] - dt * k3[i];
        }
        apply(&m_lo, &tmp, &mut k4);
        let lam_hi = &states[(k + 1) * m..(k + 2) * m];
        for i in 0..m {
            lam[i] = lam_hi[i] - dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        check_guard(&lam, cfg.blowup_guard, times[k])?;
        if record {
            apply(&m_lo, &lam, &mut dlam_lo);
            for i in 0..m {
                lambda_mid[k * m + i] = hermite_mid(lam[i], lam_hi[i], dlam_lo[i], k1[i], dt);
            }
        }
        states[k * m..(k + 1) * m].copy_from_slice(&lam);
        std::mem::swap(&mut m_hi, &mut m_lo);
    }
    Ok(AdjointPass {
        lambda: Trajectory { grid, states, dim: m },
        lambda_mid,
        xi_mid,
    })
}

/// Composite Simpson weights on a grid whose step midpoints are sampled
/// separately: returns `(node weights, midpoint weights)`.
pub fn simpson_weights(times: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; times.len()];
    let mut mids = vec![0.0; times.len().saturating_sub(1)];
    for k in 0..mids.len() {
        let dt = times[k + 1] - times[k];
        nodes[k] += dt / 6.0;
        nodes[k + 1] += dt / 6.0;
        mids[k] = 4.0 * dt / 6.0;
    }
    (nodes, mids)
}

/// Trapezoid weights on a (possibly nonuniform) grid.
pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; times.len()];
    for k in 0..times.len().saturating_sub(1) {
        let half = 0.5 * (times[k + 1] - times[k]);
        w[k] += half;
        w[k + 1] += half;
    }
    w
}

/// Composite trapezoid rule of vector-valued node data (`len × width`).
pub fn quadrature(times: &[f64], values: &[f64], width: usize) -> Vec<f64> {
    assert_eq!(values.len(), times.len() * width, "one value row per grid node");
    let mut out = vec![0.0; width];
    for (k, wk) in trapezoid_weights(times).into_iter().enumerate() {
        for (o, v) in out.iter_mut().zip(&values[k * width..(k + 1) * width]) {
            *o += wk * v;
        }
    }
    out
}
