//! The classifier: parameters `Θ = {β, B, A, b}`, prediction through the
//! final hidden state, cross-entropy loss and initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dictionary::{DictionaryKind, DictionarySpec};
use crate::error::{NaedError, Result};
use crate::integrator::{solve_forward, SolverConfig};
use crate::signal::TimeSeries;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self · v`
    #[inline]
    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            *o = self.row(r).iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    /// `out += self · v`
    #[inline]
    pub fn mul_vec_add(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            *o += self.row(r).iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.mul_vec_into(v, &mut out);
        out
    }

    /// `selfᵀ · v`
    pub fn transpose_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate().take(self.rows) {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        out
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let m = nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        m.singular_values().iter().cloned().fold(0.0, f64::max)
    }
}

/// Trainable parameters.
///
/// * `beta` — `m × d` dictionary coefficients
/// * `forcing` — `m × n` input matrix `B`
/// * `readout` — `|Y| × m` matrix `A`
/// * `bias` — length `|Y|` vector `b`
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub beta: Matrix,
    pub forcing: Matrix,
    pub readout: Matrix,
    pub bias: Vec<f64>,
}

impl Parameters {
    pub fn zeros(spec: &DictionarySpec, input_dim: usize, classes: usize) -> Self {
        let m = spec.hidden_dim();
        Self {
            beta: Matrix::zeros(m, spec.dimension()),
            forcing: Matrix::zeros(m, input_dim),
            readout: Matrix::zeros(classes, m),
            bias: vec![0.0; classes],
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.beta.rows
    }

    pub fn input_dim(&self) -> usize {
        self.forcing.cols
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    /// Number of scalar entries.
    pub fn len(&self) -> usize {
        self.beta.data.len() + self.forcing.data.len() + self.readout.data.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries in the order β, B, A, b.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.beta
            .data
            .iter()
            .chain(&self.forcing.data)
            .chain(&self.readout.data)
            .chain(&self.bias)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.beta
            .data
            .iter_mut()
            .chain(&mut self.forcing.data)
            .chain(&mut self.readout.data)
            .chain(&mut self.bias)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    /// Overwrite every entry from a flat vector in `iter` order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len());
        for (p, v) in self.iter_mut().zip(flat) {
            *p = *v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// Number of nonzero β entries.
    pub fn nonzero_beta(&self) -> usize {
        self.beta.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn check_shapes(&self, spec: &DictionarySpec) -> Result<()> {
        let m = spec.hidden_dim();
        let ok = self.beta.rows == m
            && self.beta.cols == spec.dimension()
            && self.forcing.rows == m
            && self.readout.cols == m
            && self.readout.rows == self.bias.len()
            && self.bias.len() >= 2;
        if !ok {
            return Err(NaedError::invalid("parameters", "shapes inconsistent with the dictionary"));
        }
        if !self.is_finite() {
            return Err(NaedError::invalid("parameters", "non-finite entries"));
        }
        Ok(())
    }

    /// Logits `A h + b`.
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        self.readout.mul_vec_add(hidden, &mut z);
        z
    }
}

/// Seeded initialization.
///
/// Linear polynomial and Fourier dictionaries draw `β, B, A ~ U[−1, 1]` and
/// `b ~ U[0, 1]`; polynomial dictionaries of degree ≥ 2 draw
/// `β, B ~ U[−0.1, 0.1]` and `A, b ~ U[−1, 1]`.
pub fn initialize(spec: &DictionarySpec, input_dim: usize, classes: usize, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Parameters::zeros(spec, input_dim, classes);
    let (dyn_range, bias_lo) = match spec.kind() {
        DictionaryKind::Polynomial { degree } if degree >= 2 => (0.1, -1.0),
        _ => (1.0, 0.0),
    };
    for v in p.beta.data.iter_mut().chain(p.forcing.data.iter_mut()) {
        *v = rng.gen_range(-dyn_range..=dyn_range);
    }
    for v in p.readout.data.iter_mut() {
        *v = rng.gen_range(-1.0..=1.0);
    }
    for v in p.bias.iter_mut() {
        *v = rng.gen_range(bias_lo..=1.0);
    }
    p
}

/// `d·m + n·m + m·|Y| + |Y|`
pub fn param_count(spec: &DictionarySpec, input_dim: usize, classes: usize) -> usize {
    let m = spec.hidden_dim();
    spec.dimension() * m + input_dim * m + m * classes + classes
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub hidden_final: Vec<f64>,
}

impl Prediction {
    pub fn class(&self) -> usize {
        argmax(&self.probabilities)
    }
}

pub fn predict(params: &Parameters, spec: &DictionarySpec, ts: &TimeSeries, cfg: SolverConfig) -> Result<Prediction> {
    let traj = solve_forward(params, spec, ts, cfg)?;
    let hidden_final = traj.final_state().to_vec();
    Ok(Prediction {
        probabilities: softmax(&params.logits(&hidden_final)),
        hidden_final,
    })
}

/// Cross-entropy of one labelled sample given its final hidden state.
pub(crate) fn sample_loss(params: &Parameters, hidden_final: &[f64], label: usize) -> f64 {
    -log_softmax(&params.logits(hidden_final))[label]
}

/// Mean cross-entropy over a labelled batch.
pub fn loss(params: &Parameters, spec: &DictionarySpec, batch: &[TimeSeries], cfg: SolverConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(NaedError::invalid("batch", "empty batch"));
    }
    let mut total = 0.0;
    for ts in batch {
        let label = ts
            .label()
            .ok_or_else(|| NaedError::invalid("batch", format!("series `{}` is unlabeled", ts.id())))?;
        let traj = solve_forward(params, spec, ts, cfg)?;
        total += sample_loss(params, traj.final_state(), label);
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn series(label: usize) -> TimeSeries {
        let times: Vec<f64> = (0..=10).map(|j| j as f64).collect();
        let vals: Vec<Vec<f64>> = times.iter().map(|t| vec![t.sin()]).collect();
        TimeSeries::new(format!("s{label}"), times, vals, Some(label)).unwrap()
    }

    #[test]
    fn param_counts() {
        let poly = |m, k| DictionarySpec::polynomial(m, k).unwrap();
        let four = |m, k| DictionarySpec::fourier(m, k, 10.0).unwrap();
        assert_eq!(param_count(&poly(2, 1), 1, 2), 14);
        assert_eq!(param_count(&four(2, 2), 1, 2), 58);
        assert_eq!(param_count(&four(3, 1), 1, 2), 92);
        for spec in [poly(2, 1), poly(3, 2), four(2, 1), four(3, 1)] {
            assert_eq!(Parameters::zeros(&spec, 2, 3).len(), param_count(&spec, 2, 3));
        }
    }

    #[test]
    fn initialization_ranges_and_determinism() {
        let spec = DictionarySpec::polynomial(2, 2).unwrap();
        let p = initialize(&spec, 1, 2, 3);
        assert!(p.beta.data.iter().chain(&p.forcing.data).all(|v| v.abs() <= 0.1));
        assert!(p.readout.data.iter().chain(&p.bias).all(|v| v.abs() <= 1.0));
        assert_eq!(p, initialize(&spec, 1, 2, 3));
        assert_ne!(p, initialize(&spec, 1, 2, 4));

        let lin = DictionarySpec::polynomial(2, 1).unwrap();
        let p = initialize(&lin, 1, 2, 9);
        assert!(p.bias.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p.beta.data.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn fourier_init_mean_is_centered() {
        let spec = DictionarySpec::fourier(2, 1, 10.0).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut seed = 0;
        while count < 100_000 {
            let p = initialize(&spec, 1, 2, seed);
            sum += p.beta.data.iter().sum::<f64>();
            count += p.beta.data.len();
            seed += 1;
        }
        assert!((sum / count as f64).abs() < 0.01);
    }

    #[test]
    fn zero_model_predicts_uniform() {
        let spec = DictionarySpec::polynomial(2, 1).unwrap();
        let p = Parameters::zeros(&spec, 1, 2);
        let pred = predict(&p, &spec, &series(0), SolverConfig::default()).unwrap();
        assert_eq!(pred.probabilities, vec![0.5, 0.5]);
        assert_eq!(pred.class(), 0);
        assert_abs_diff_eq!(loss(&p, &spec, &[series(0)], SolverConfig::default()).unwrap(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[3f64.ln(), 0.0]);
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn loss_limits_and_mean() {
        let spec = DictionarySpec::polynomial(1, 1).unwrap();
        let mut p = Parameters::zeros(&spec, 1, 2);
        p.bias = vec![50.0, 0.0];
        let l = loss(&p, &spec, &[series(0)], SolverConfig::default()).unwrap();
        assert!(l < 1e-20, "{l}");

        p.bias = vec![0.3, -0.4];
        let a = loss(&p, &spec, &[series(0)], SolverConfig::default()).unwrap();
        let b = loss(&p, &spec, &[series(1)], SolverConfig::default()).unwrap();
        let both = loss(&p, &spec, &[series(0), series(1)], SolverConfig::default()).unwrap();
        assert_abs_diff_eq!(both, (a + b) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn unlabeled_batch_rejected() {
        let spec = DictionarySpec::polynomial(1, 1).unwrap();
        let p = Parameters::zeros(&spec, 1, 2);
        let ts = series(0).with_label(None);
        assert!(loss(&p, &spec, &[ts], SolverConfig::default()).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }

    proptest! {
        #[test]
        fn softmax_is_translation_invariant(zi in proptest::collection::vec(-30_000i32..30_000, 2..6), shift in -100i32..100) {
            // dyadic logits keep the shift itself exact
            let z: Vec<f64> = zi.iter().map(|&v| v as f64 / 1024.0).collect();
            let shift = shift as f64;
            let a = softmax(&z);
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let b = softmax(&shifted);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|&p| p >= 0.0));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-14);
            }
        }
    }
}
