//! Synthetic labeled datasets from forced dynamical systems and a gated
//! diffusion equation, solved by reference integrators that are independent
//! of the training path.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NaedError, Result};
use crate::signal::{Dataset, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Oscillator,
    VanDerPol,
    Lorenz,
    LotkaVolterra,
    GatedDiffusion,
}

impl System {
    pub const ALL: [System; 5] = [
        System::Oscillator,
        System::VanDerPol,
        System::Lorenz,
        System::LotkaVolterra,
        System::GatedDiffusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Oscillator => "oscillator",
            System::VanDerPol => "van-der-pol",
            System::Lorenz => "lorenz",
            System::LotkaVolterra => "lotka-volterra",
            System::GatedDiffusion => "gated-diffusion",
        }
    }

    /// Named parameters and their defaults.
    pub fn default_params(self) -> BTreeMap<String, f64> {
        let pairs: &[(&str, f64)] = match self {
            System::Oscillator => &[("gamma", 0.2), ("omega", 1.0), ("coeff_var", 1.0)],
            System::VanDerPol => &[("mu", 0.3), ("coeff_var", 1.0)],
            System::Lorenz => &[("sigma", 5.0), ("rho", 10.0), ("beta", 1.3), ("scale", 4.0), ("coeff_var", 1.0)],
            System::LotkaVolterra => &[("alpha", 0.8), ("beta", 0.1), ("delta", 0.01), ("gamma", 1.1), ("coeff_var", 0.5)],
            System::GatedDiffusion => &[("kappa", 0.165), ("dz", 0.05), ("dt", 0.01), ("width", 0.1), ("max_switches", 10.0)],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn default_final_time(self) -> f64 {
        match self {
            System::GatedDiffusion => 1.0,
            _ => 10.0,
        }
    }

    fn default_sample_rate(self) -> f64 {
        match self {
            System::GatedDiffusion => 100.0,
            _ => 10.0,
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = NaedError;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|sys| sys.name() == s)
            .ok_or_else(|| NaedError::invalid("system", format!("unknown system `{s}`")))
    }
}

/// Which signal is recorded for the Lotka–Volterra system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LvInputMode {
    #[default]
    X,
    Xdot,
}

impl FromStr for LvInputMode {
    type Err = NaedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(LvInputMode::X),
            "xdot" => Ok(LvInputMode::Xdot),
            _ => Err(NaedError::invalid("lv input mode", format!("expected `x` or `xdot`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub system: System,
    pub samples: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub final_time: f64,
    /// Samples per unit time; the grid has `final_time·sample_rate + 1` points.
    pub sample_rate: f64,
    pub system_params: BTreeMap<String, f64>,
    pub lv_input_mode: LvInputMode,
    pub noise_variance: f64,
    /// Number of sinusoids `K` in the forcing.
    pub forcing_terms: usize,
    /// Reference RK4 steps per sample interval (ODE systems).
    pub reference_substeps: usize,
    /// Lorenz drift `σ(u₂ − u₁)` instead of the printed `σ(u₂ − u₃)`.
    pub lorenz_classical: bool,
}

impl GeneratorConfig {
    pub fn new(system: System, seed: u64) -> Self {
        Self {
            system,
            samples: 10_000,
            train_fraction: 0.8,
            seed,
            final_time: system.default_final_time(),
            sample_rate: system.default_sample_rate(),
            system_params: system.default_params(),
            lv_input_mode: LvInputMode::X,
            noise_variance: 0.0,
            forcing_terms: 2,
            reference_substeps: 40,
            lorenz_classical: false,
        }
    }

    /// Override one named system parameter.
    pub fn set_param(&mut self, key: &str, value: f64) -> Result<()> {
        match self.system_params.get_mut(key) {
            Some(v) => {
                *v = value;
                Ok(())
            }
            None => Err(NaedError::invalid(
                "system parameter",
                format!("`{key}` is not a parameter of {}", self.system),
            )),
        }
    }

    pub fn param(&self, key: &str) -> f64 {
        self.system_params[key]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(NaedError::invalid("generator config", reason));
        if self.samples == 0 {
            return bad("the sample count must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if !(self.final_time > 0.0) || !self.final_time.is_finite() {
            return bad(format!("final time must be positive, got {}", self.final_time));
        }
        if !(self.sample_rate > 0.0) || self.grid_len() < 2 {
            return bad("the sample grid needs at least two points".into());
        }
        if !(self.noise_variance >= 0.0) {
            return bad(format!("noise variance must be non-negative, got {}", self.noise_variance));
        }
        if self.forcing_terms == 0 || self.reference_substeps == 0 {
            return bad("forcing terms and reference substeps must be positive".into());
        }
        let defaults = self.system.default_params();
        for key in self.system_params.keys() {
            if !defaults.contains_key(key) {
                return bad(format!("`{key}` is not a parameter of {}", self.system));
            }
        }
        for key in defaults.keys() {
            if !self.system_params.get(key).is_some_and(|v| v.is_finite()) {
                return bad(format!("parameter `{key}` is missing or non-finite"));
            }
        }
        if self.system == System::GatedDiffusion {
            DiffusionParams::from_config(self)?.check_cfl()?;
        }
        Ok(())
    }

    pub fn grid_len(&self) -> usize {
        (self.final_time * self.sample_rate).round() as usize + 1
    }

    /// Uniform sample grid on `[0, T]`.
    pub fn sample_times(&self) -> Vec<f64> {
        let last = self.grid_len() - 1;
        (0..=last).map(|j| self.final_time * j as f64 / last as f64).collect()
    }

    fn sample_id(&self, index: usize) -> String {
        let width = (self.samples.saturating_sub(1)).to_string().len().max(5);
        format!("{}-{index:0width$}", self.system)
    }
}

/// `scale·Σ A_k sin(α_k t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SineForcing {
    pub amplitudes: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub scale: f64,
}

impl SineForcing {
    fn draw(rng: &mut ChaCha8Rng, terms: usize, variance: f64, scale: f64) -> Result<Self> {
        let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| NaedError::invalid("forcing variance", e.to_string()))?;
        let mut amplitudes = Vec::with_capacity(terms);
        let mut frequencies = Vec::with_capacity(terms);
        for _ in 0..terms {
            amplitudes.push(normal.sample(rng));
            frequencies.push(normal.sample(rng));
        }
        Ok(Self {
            amplitudes,
            frequencies,
            scale,
        })
    }

    pub fn value(&self, t: f64) -> f64 {
        self.scale * self.amplitudes.iter().zip(&self.frequencies).map(|(a, w)| a * (w * t).sin()).sum::<f64>()
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.scale * self.amplitudes.iter().zip(&self.frequencies).map(|(a, w)| a * w * (w * t).cos()).sum::<f64>()
    }

    fn describe(&self) -> String {
        serde_json::json!({ "A": self.amplitudes, "alpha": self.frequencies, "scale": self.scale }).to_string()
    }
}

/// One generated sample before the train/test split.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub series: TimeSeries,
    /// Reference-solver state at the final time (`[S(T)]` for diffusion).
    pub final_state: Vec<f64>,
    /// JSON description of the drawn forcing.
    pub forcing: String,
}

/// Classic RK4 with `steps` equal steps over `[0, t_end]`.
fn rk4<const D: usize>(f: impl Fn(f64, &[f64; D]) -> [f64; D], y0: [f64; D], t_end: f64, steps: usize) -> Option<[f64; D]> {
    let dt = t_end / steps as f64;
    let mut y = y0;
    let axpy = |y: &[f64; D], k: &[f64; D], a: f64| -> [f64; D] { std::array::from_fn(|i| y[i] + a * k[i]) };
    for s in 0..steps {
        let t = s as f64 * dt;
        let k1 = f(t, &y);
        let k2 = f(t + 0.5 * dt, &axpy(&y, &k1, 0.5 * dt));
        let k3 = f(t + 0.5 * dt, &axpy(&y, &k2, 0.5 * dt));
        let k4 = f(t + dt, &axpy(&y, &k3, dt));
        for i in 0..D {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            return None;
        }
    }
    Some(y)
}

/// Class index of the sign rule: `(1,0)` when `u > 0`, otherwise `(0,1)`.
fn sign_label(u: f64) -> usize {
    if u > 0.0 {
        0
    } else {
        1
    }
}

/// Argmax with ties to the lower index.
fn argmax_label(u: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in u.iter().enumerate() {
        if *v > u[best] {
            best = i;
        }
    }
    best
}

/// Numerical parameters of the gated diffusion scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionParams {
    pub kappa: f64,
    pub dz: f64,
    pub dt: f64,
    pub width: f64,
    pub final_time: f64,
    pub max_switches: usize,
}

impl DiffusionParams {
    pub fn from_config(cfg: &GeneratorConfig) -> Result<Self> {
        let p = Self {
            kappa: cfg.param("kappa"),
            dz: cfg.param("dz"),
            dt: cfg.param("dt"),
            width: cfg.param("width"),
            final_time: cfg.final_time,
            max_switches: cfg.param("max_switches") as usize,
        };
        if !(p.kappa > 0.0 && p.dz > 0.0 && p.dt > 0.0 && p.width > 0.0) {
            return Err(NaedError::invalid("diffusion parameters", "kappa, dz, dt and width must be positive"));
        }
        let cells = 1.0 / p.dz;
        if (cells - cells.round()).abs() > 1e-9 {
            return Err(NaedError::invalid("diffusion parameters", format!("dz = {} does not divide [0, 1]", p.dz)));
        }
        Ok(p)
    }

    pub fn nodes(&self) -> usize {
        (1.0 / self.dz).round() as usize + 1
    }

    pub fn steps(&self) -> usize {
        (self.final_time / self.dt).round() as usize
    }

    /// `κ·dt/dz²` at the nominal time step.
    pub fn cfl_number(&self) -> f64 {
        self.kappa * self.dt / (self.dz * self.dz)
    }

    /// Explicit Euler sub-steps per nominal step that bring the mesh ratio to
    /// at most 1/2, the stability limit of the scheme.
    pub fn inner_steps(&self) -> usize {
        (self.cfl_number() / 0.5).ceil().max(1.0) as usize
    }

    pub fn check_cfl(&self) -> Result<()> {
        let nominal = self.cfl_number();
        if !(nominal < 1.0) {
            return Err(NaedError::invalid("diffusion parameters", format!("CFL number {nominal} is not below 1")));
        }
        let inner = nominal / self.inner_steps() as f64;
        if !(inner <= 0.5) {
            return Err(NaedError::invalid("diffusion parameters", format!("inner mesh ratio {inner} exceeds 1/2")));
        }
        Ok(())
    }

    fn initial_profile(&self) -> Vec<f64> {
        let norm = 1.0 / (2.0 * std::f64::consts::PI * self.width * self.width).sqrt();
        (0..self.nodes())
            .map(|i| {
                let z = i as f64 * self.dz;
                norm * (-(z - 0.5) * (z - 0.5) / (2.0 * self.width * self.width)).exp()
            })
            .collect()
    }

    fn survival(&self, u: &[f64]) -> f64 {
        let last = u.len() - 1;
        self.dz * (0.5 * u[0] + u[1..last].iter().sum::<f64>() + 0.5 * u[last])
    }
}

/// Switching function: starts at 0 and flips at every switch time `≤ t`.
pub fn switching_value(switch_times: &[f64], t: f64) -> f64 {
    (switch_times.iter().filter(|&&s| s <= t).count() % 2) as f64
}

/// Survival probability `S(t_n)` at every nominal time step `n = 0..=steps`
/// for the gated diffusion driven by `switch_times`.
pub fn diffusion_survival(params: &DiffusionParams, switch_times: &[f64]) -> Result<Vec<f64>> {
    params.check_cfl()?;
    let inner = params.inner_steps();
    let r = params.cfl_number() / inner as f64;
    let mut u = params.initial_profile();
    let mut next = vec![0.0; u.len()];
    let last = u.len() - 1;
    let mut history = Vec::with_capacity(params.steps() + 1);
    history.push(params.survival(&u));
    for n in 0..params.steps() {
        let absorbing = switching_value(switch_times, n as f64 * params.dt) == 1.0;
        for _ in 0..inner {
            if absorbing {
                u[last] = 0.0;
            }
            // ghost node u₋₁ = u₁ gives the reflecting condition at z = 0
            next[0] = u[0] + r * (2.0 * u[1] - 2.0 * u[0]);
            for i in 1..last {
                next[i] = u[i] + r * (u[i + 1] - 2.0 * u[i] + u[i - 1]);
            }
            next[last] = if absorbing { 0.0 } else { u[last] + r * (2.0 * u[last - 1] - 2.0 * u[last]) };
            std::mem::swap(&mut u, &mut next);
        }
        history.push(params.survival(&u));
    }
    Ok(history)
}

/// Generate sample `index` of the configured system.
pub fn generate_sample(cfg: &GeneratorConfig, index: usize) -> Result<GeneratedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let id = cfg.sample_id(index);
    let times = cfg.sample_times();
    let t_end = cfg.final_time;
    let steps = (times.len() - 1) * cfg.reference_substeps;
    let fail = |reason: &str| NaedError::GenerationFailure {
        index,
        seed: cfg.seed,
        reason: reason.to_string(),
    };
    let var = |cfg: &GeneratorConfig| cfg.param("coeff_var");

    let (values, final_state, label, forcing): (Vec<f64>, Vec<f64>, usize, String) = match cfg.system {
        System::Oscillator => {
            let x = SineForcing::draw(&mut rng, cfg.forcing_terms, var(cfg), 1.0)?;
            let (g, w) = (cfg.param("gamma"), cfg.param("omega"));
            let y = rk4(|t, y: &[f64; 2]| [y[1], x.value(t) - g * y[1] - w * w * y[0]], [0.0; 2], t_end, steps)
                .ok_or_else(|| fail("reference solve diverged"))?;
            (times.iter().map(|&t| x.value(t)).collect(), y.to_vec(), sign_label(y[0]), x.describe())
        }
        System::VanDerPol => {
            let x = SineForcing::draw(&mut rng, cfg.forcing_terms, var(cfg), 1.0)?;
            let mu = cfg.param("mu");
            let y = rk4(|t, y: &[f64; 2]| [y[1], x.value(t) + mu * (1.0 - y[0] * y[0]) * y[1] - y[0]], [0.0; 2], t_end, steps)
                .ok_or_else(|| fail("reference solve diverged"))?;
            (times.iter().map(|&t| x.value(t)).collect(), y.to_vec(), sign_label(y[0]), x.describe())
        }
        System::Lorenz => {
            let x = SineForcing::draw(&mut rng, cfg.forcing_terms, var(cfg), cfg.param("scale"))?;
            let (s, rho, b) = (cfg.param("sigma"), cfg.param("rho"), cfg.param("beta"));
            let classical = cfg.lorenz_classical;
            let y = rk4(
                |t, u: &[f64; 3]| {
                    let drift = if classical { u[1] - u[0] } else { u[1] - u[2] };
                    [s * drift + x.value(t), u[0] * (rho - u[2]) - u[1], u[0] * u[1] - b * u[2]]
                },
                [1.0; 3],
                t_end,
                steps,
            )
            .ok_or_else(|| fail("reference solve diverged"))?;
            (times.iter().map(|&t| x.value(t)).collect(), y.to_vec(), sign_label(y[0]), x.describe())
        }
        System::LotkaVolterra => {
            let base = SineForcing::draw(&mut rng, cfg.forcing_terms, var(cfg), 1.0)?;
            let (a, b, d, g) = (cfg.param("alpha"), cfg.param("beta"), cfg.param("delta"), cfg.param("gamma"));
            let x = |t: f64| base.value(t).powi(2);
            let y = rk4(
                |t, u: &[f64; 2]| {
                    let xt = x(t);
                    [a * u[0] - b * xt * u[0] * u[1], d * xt * u[0] * u[1] - g * u[1]]
                },
                [5.0, 4.0],
                t_end,
                steps,
            )
            .ok_or_else(|| fail("reference solve diverged"))?;
            let values = match cfg.lv_input_mode {
                LvInputMode::X => times.iter().map(|&t| x(t)).collect(),
                LvInputMode::Xdot => times.iter().map(|&t| 2.0 * base.value(t) * base.derivative(t)).collect(),
            };
            (values, y.to_vec(), argmax_label(&y), base.describe())
        }
        System::GatedDiffusion => {
            let params = DiffusionParams::from_config(cfg)?;
            let q = rng.gen_range(0..=params.max_switches);
            let mut switches: Vec<f64> = (0..q).map(|_| rng.gen_range(0.0..1.0) * t_end).collect();
            switches.sort_by(f64::total_cmp);
            let s = diffusion_survival(&params, &switches)?;
            let s_end = *s.last().unwrap();
            if !s_end.is_finite() {
                return Err(fail("diffusion solve diverged"));
            }
            let label = if s_end < 0.5 { 0 } else { 1 };
            let values = times.iter().map(|&t| switching_value(&switches, t)).collect();
            (values, vec![s_end], label, serde_json::json!({ "switch_times": switches }).to_string())
        }
    };
    let series = TimeSeries::from_flat(id, times, values, 1, Some(label))?;
    Ok(GeneratedSample {
        series,
        final_state,
        forcing,
    })
}

/// Generate, label and split a dataset; noise (if configured) is added to
/// the recorded signals after labeling.
pub fn generate(cfg: &GeneratorConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let samples: Vec<GeneratedSample> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| generate_sample(cfg, i))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..cfg.samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let n_train = ((cfg.samples as f64 * cfg.train_fraction).round() as usize).clamp(1, cfg.samples.max(2) - 1);
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let build = |idx: &[usize], split: &str| -> Result<Dataset> {
        let mut ds = Dataset::new(idx.iter().map(|&i| samples[i].series.clone()).collect(), 1, 2)?;
        ds.metadata = base_metadata(cfg, split);
        for &i in idx {
            ds.metadata.insert(format!("forcing/{}", samples[i].series.id()), samples[i].forcing.clone());
        }
        Ok(ds)
    };
    let mut train = build(&train_idx, "train")?;
    let mut test = build(&test_idx, "test")?;
    if cfg.noise_variance > 0.0 {
        train = add_noise(&train, cfg.noise_variance, cfg.seed.wrapping_add(1))?;
        test = add_noise(&test, cfg.noise_variance, cfg.seed.wrapping_add(2))?;
    }
    Ok((train, test))
}

fn base_metadata(cfg: &GeneratorConfig, split: &str) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("system".into(), cfg.system.to_string());
    meta.insert("split".into(), split.into());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("final_time".into(), cfg.final_time.to_string());
    meta.insert("noise_variance".into(), cfg.noise_variance.to_string());
    for (k, v) in &cfg.system_params {
        meta.insert(format!("param/{k}"), v.to_string());
    }
    if cfg.system == System::LotkaVolterra {
        meta.insert("lv_input_mode".into(), format!("{:?}", cfg.lv_input_mode).to_lowercase());
    }
    if cfg.system == System::Lorenz {
        meta.insert("lorenz_drift".into(), if cfg.lorenz_classical { "classical" } else { "printed" }.into());
    }
    meta
}

/// Add iid `N(0, variance)` noise to every sampled value. Series `i` draws
/// from its own stream, so the noise does not depend on evaluation order.
pub fn add_noise(dataset: &Dataset, variance: f64, seed: u64) -> Result<Dataset> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(NaedError::invalid("noise variance", format!("must be non-negative, got {variance}")));
    }
    if variance == 0.0 {
        return Ok(dataset.clone());
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite positive standard deviation");
    let series = dataset
        .series
        .iter()
        .enumerate()
        .map(|(i, ts)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let noisy = ts.values().iter().map(|v| v + normal.sample(&mut rng)).collect();
            ts.with_values(noisy)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Dataset {
        series,
        ..dataset.clone()
    };
    out.metadata.insert("noise_variance".into(), variance.to_string());
    Ok(out)
}
