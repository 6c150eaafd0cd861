//! Candidate-function dictionaries Ξ(h) for the hidden-state vector field.
//!
//! Two families are supported:
//!
//! * **Polynomial** of maximum degree `k`: every monomial `h^α / α!` with
//!   `|α| ≤ k`, ordered by total degree and, within a degree, by descending
//!   exponent tuple. For `m = 2, k = 2` this gives
//!   `1, h1, h2, h1²/2, h1·h2, h2²/2`.
//! * **Fourier** with maximum multiplier `K` and period `L`: all products
//!   `f_1(h_1)···f_m(h_m)` where each factor is one of
//!   `1, cos(2πh/L), sin(2πh/L), …, cos(2πKh/L), sin(2πKh/L)`. Entries are in
//!   tensor order with the last coordinate varying fastest.
//!
//! The basis order is part of the checkpoint format and must not change.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{NaedError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DictionaryKind {
    Polynomial { degree: usize },
    Fourier { harmonics: usize, period: f64 },
}

#[derive(Debug, Clone)]
enum Basis {
    Polynomial {
        /// Exponent tuples, `dim × m`, row-major.
        exponents: Vec<u32>,
        /// Taylor coefficient `1/α!` per entry.
        coefs: Vec<f64>,
    },
    Fourier {
        /// `2π / L`
        omega: f64,
    },
}

/// Immutable description of a dictionary and its dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct DictionarySpec {
    kind: DictionaryKind,
    hidden_dim: usize,
    dim: usize,
    basis: Basis,
}

impl PartialEq for DictionarySpec {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.hidden_dim == other.hidden_dim
    }
}

/// `Ξ(h)` together with its Jacobian `D_h Ξ(h)` (`dim × m`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryEval {
    pub values: Vec<f64>,
    pub jacobian: Vec<f64>,
}

impl DictionaryEval {
    pub fn jacobian_row(&self, j: usize) -> &[f64] {
        let m = self.jacobian.len() / self.values.len();
        &self.jacobian[j * m..(j + 1) * m]
    }
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Exponent tuples of total degree `degree` in `m` variables, in descending
/// lexicographic order.
fn push_exponents(m: usize, degree: u32, prefix: &mut Vec<u32>, out: &mut Vec<u32>) {
    if prefix.len() + 1 == m {
        prefix.push(degree);
        out.extend_from_slice(prefix);
        prefix.pop();
        return;
    }
    for first in (0..=degree).rev() {
        prefix.push(first);
        push_exponents(m, degree - first, prefix, out);
        prefix.pop();
    }
}

impl DictionarySpec {
    pub fn polynomial(hidden_dim: usize, degree: usize) -> Result<Self> {
        if hidden_dim == 0 {
            return Err(NaedError::invalid("dictionary", "hidden dimension m must be positive"));
        }
        let mut exponents = Vec::new();
        let mut prefix = Vec::with_capacity(hidden_dim);
        for total in 0..=degree as u32 {
            push_exponents(hidden_dim, total, &mut prefix, &mut exponents);
        }
        let dim = exponents.len() / hidden_dim;
        debug_assert_eq!(dim, binomial(degree + hidden_dim, hidden_dim));
        let coefs = exponents
            .chunks(hidden_dim)
            .map(|alpha| 1.0 / alpha.iter().map(|&a| factorial(a)).product::<f64>())
            .collect();
        Ok(Self {
            kind: DictionaryKind::Polynomial { degree },
            hidden_dim,
            dim,
            basis: Basis::Polynomial { exponents, coefs },
        })
    }

    pub fn fourier(hidden_dim: usize, harmonics: usize, period: f64) -> Result<Self> {
        if hidden_dim == 0 {
            return Err(NaedError::invalid("dictionary", "hidden dimension m must be positive"));
        }
        if harmonics == 0 {
            return Err(NaedError::invalid("dictionary", "Fourier multiplier K must be positive"));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(NaedError::invalid("dictionary", format!("Fourier period L must be positive, got {period}")));
        }
        let dim = (2 * harmonics + 1)
            .checked_pow(hidden_dim as u32)
            .ok_or_else(|| NaedError::invalid("dictionary", "Fourier dictionary too large"))?;
        Ok(Self {
            kind: DictionaryKind::Fourier { harmonics, period },
            hidden_dim,
            dim,
            basis: Basis::Fourier { omega: 2.0 * PI / period },
        })
    }

    pub fn kind(&self) -> DictionaryKind {
        self.kind
    }

    /// Hidden-state dimension `m`.
    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Number of dictionary entries `d`.
    pub fn dimension(&self) -> usize {
        self.dim
    }

    /// Exponent tuple of entry `j` (polynomial dictionaries only).
    pub fn exponents(&self, j: usize) -> Option<&[u32]> {
        match &self.basis {
            Basis::Polynomial { exponents, .. } => {
                Some(&exponents[j * self.hidden_dim..(j + 1) * self.hidden_dim])
            }
            Basis::Fourier { .. } => None,
        }
    }

    /// Human-readable label for entry `j`, e.g. `h1^2/2` or `cos1(h1)*sin2(h2)`.
    pub fn entry_label(&self, j: usize) -> String {
        match &self.basis {
            Basis::Polynomial { .. } => {
                let alpha = self.exponents(j).unwrap();
                let mut parts = Vec::new();
                let mut denom = 1.0;
                for (i, &a) in alpha.iter().enumerate() {
                    match a {
                        0 => {}
                        1 => parts.push(format!("h{}", i + 1)),
                        _ => parts.push(format!("h{}^{}", i + 1, a)),
                    }
                    denom *= factorial(a);
                }
                let mut label = if parts.is_empty() { "1".to_string() } else { parts.join("*") };
                if denom != 1.0 {
                    label.push_str(&format!("/{denom}"));
                }
                label
            }
            Basis::Fourier { .. } => {
                let factors = self.fourier_factor_count();
                let mut rem = j;
                let mut digits = vec![0; self.hidden_dim];
                for i in (0..self.hidden_dim).rev() {
                    digits[i] = rem % factors;
                    rem /= factors;
                }
                let parts: Vec<String> = digits
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c != 0)
                    .map(|(i, &c)| {
                        let k = (c + 1) / 2;
                        let f = if c % 2 == 1 { "cos" } else { "sin" };
                        format!("{f}{k}(h{})", i + 1)
                    })
                    .collect();
                if parts.is_empty() {
                    "1".to_string()
                } else {
                    parts.join("*")
                }
            }
        }
    }

    fn fourier_factor_count(&self) -> usize {
        match self.kind {
            DictionaryKind::Fourier { harmonics, .. } => 2 * harmonics + 1,
            DictionaryKind::Polynomial { .. } => 0,
        }
    }

    /// Indices of the degree-one monomials `h_1, …, h_m` (polynomial only).
    pub fn linear_indices(&self) -> Option<Vec<usize>> {
        match self.kind {
            DictionaryKind::Polynomial { degree } if degree >= 1 => Some((1..=self.hidden_dim).collect()),
            _ => None,
        }
    }

    /// Checked evaluation of `Ξ(h)` and `D_h Ξ(h)`.
    pub fn evaluate(&self, h: &[f64]) -> Result<DictionaryEval> {
        if h.len() != self.hidden_dim {
            return Err(NaedError::invalid(
                "hidden state",
                format!("expected length {}, got {}", self.hidden_dim, h.len()),
            ));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(NaedError::NonFiniteInput(h.to_vec()));
        }
        let mut scratch = Vec::new();
        let mut values = vec![0.0; self.dim];
        let mut jacobian = vec![0.0; self.dim * self.hidden_dim];
        self.eval_into(h, &mut scratch, &mut values, Some(&mut jacobian));
        Ok(DictionaryEval { values, jacobian })
    }

    /// Unchecked hot-path evaluation into caller-provided buffers.
    ///
    /// `values` must have length `d`; `jacobian`, when given, `d·m`.
    pub fn eval_into(&self, h: &[f64], scratch: &mut Vec<f64>, values: &mut [f64], jacobian: Option<&mut [f64]>) {
        let m = self.hidden_dim;
        debug_assert_eq!(h.len(), m);
        debug_assert_eq!(values.len(), self.dim);
        match (&self.basis, self.kind) {
            (Basis::Polynomial { exponents, coefs }, DictionaryKind::Polynomial { degree }) => {
                // powers[i * (k+1) + p] = h_i^p
                let stride = degree + 1;
                scratch.clear();
                scratch.resize(m * stride, 1.0);
                for i in 0..m {
                    for p in 1..stride {
                        scratch[i * stride + p] = scratch[i * stride + p - 1] * h[i];
                    }
                }
                let powers = &scratch[..];
                for (j, (alpha, &c)) in exponents.chunks(m).zip(coefs.iter()).enumerate() {
                    let mut v = c;
                    for i in 0..m {
                        v *= powers[i * stride + alpha[i] as usize];
                    }
                    values[j] = v;
                }
                if let Some(jac) = jacobian {
                    debug_assert_eq!(jac.len(), self.dim * m);
                    for (j, (alpha, &c)) in exponents.chunks(m).zip(coefs.iter()).enumerate() {
                        for i in 0..m {
                            let a = alpha[i] as usize;
                            let out = &mut jac[j * m + i];
                            if a == 0 {
                                *out = 0.0;
                                continue;
                            }
                            let mut v = c * a as f64 * powers[i * stride + a - 1];
                            for l in 0..m {
                                if l != i {
                                    v *= powers[l * stride + alpha[l] as usize];
                                }
                            }
                            *out = v;
                        }
                    }
                }
            }
            (Basis::Fourier { omega }, DictionaryKind::Fourier { harmonics, .. }) => {
                let factors = 2 * harmonics + 1;
                // scratch layout: [values m×F | derivatives m×F | digit counters m]
                scratch.clear();
                scratch.resize(2 * m * factors, 0.0);
                let (f, df) = scratch.split_at_mut(m * factors);
                for i in 0..m {
                    let (s1, c1) = (omega * h[i]).sin_cos();
                    let row = &mut f[i * factors..(i + 1) * factors];
                    let drow = &mut df[i * factors..(i + 1) * factors];
                    row[0] = 1.0;
                    drow[0] = 0.0;
                    let (mut ck, mut sk) = (c1, s1);
                    for k in 1..=harmonics {
                        let kw = k as f64 * omega;
                        row[2 * k - 1] = ck;
                        row[2 * k] = sk;
                        drow[2 * k - 1] = -kw * sk;
                        drow[2 * k] = kw * ck;
                        let next_c = ck * c1 - sk * s1;
                        let next_s = sk * c1 + ck * s1;
                        ck = next_c;
                        sk = next_s;
                    }
                }
                let mut jac = jacobian;
                let mut digits = [0usize; 16];
                let mut big_digits;
                let digits: &mut [usize] = if m <= 16 {
                    &mut digits[..m]
                } else {
                    big_digits = vec![0usize; m];
                    &mut big_digits
                };
                for j in 0..self.dim {
                    let mut v = 1.0;
                    for i in 0..m {
                        v *= f[i * factors + digits[i]];
                    }
                    values[j] = v;
                    if let Some(jac) = jac.as_deref_mut() {
                        for i in 0..m {
                            let mut g = df[i * factors + digits[i]];
                            if g != 0.0 {
                                for l in 0..m {
                                    if l != i {
                                        g *= f[l * factors + digits[l]];
                                    }
                                }
                            }
                            jac[j * m + i] = g;
                        }
                    }
                    // advance the mixed-radix counter, last coordinate fastest
                    for i in (0..m).rev() {
                        digits[i] += 1;
                        if digits[i] < factors {
                            break;
                        }
                        digits[i] = 0;
                    }
                }
            }
            _ => unreachable!("basis tables always match the dictionary kind"),
        }
    }

    /// Per-entry Lipschitz bound: `|ξ_j(h1) − ξ_j(h2)| ≤ L·‖h1 − h2‖₂`.
    ///
    /// Global for Fourier dictionaries (`2πK·m/L`); for polynomials it holds on
    /// the ball `‖h‖ ≤ radius`.
    pub fn lipschitz_estimate(&self, radius: f64) -> f64 {
        match self.kind {
            DictionaryKind::Fourier { harmonics, period } => {
                2.0 * PI * harmonics as f64 * self.hidden_dim as f64 / period
            }
            DictionaryKind::Polynomial { .. } => self
                .polynomial_gradient_bounds(radius)
                .into_iter()
                .fold(0.0, f64::max),
        }
    }

    /// Lipschitz bound for the whole vector: `‖Ξ(h1) − Ξ(h2)‖₂ ≤ L·‖h1 − h2‖₂`.
    ///
    /// Uses the Frobenius norm of the Jacobian, which is constant for Fourier
    /// dictionaries. Affine polynomial dictionaries get the exact value 1.
    pub fn vector_lipschitz(&self, radius: f64) -> f64 {
        match self.kind {
            DictionaryKind::Fourier { harmonics, period } => {
                let omega = 2.0 * PI / period;
                let k = harmonics as f64;
                let deriv_sq = omega * omega * k * (k + 1.0) * (2.0 * k + 1.0) / 6.0;
                let value_sq = 1.0 + k;
                (self.hidden_dim as f64 * deriv_sq * value_sq.powi(self.hidden_dim as i32 - 1)).sqrt()
            }
            DictionaryKind::Polynomial { degree: 0 } => 0.0,
            DictionaryKind::Polynomial { degree: 1 } => 1.0,
            DictionaryKind::Polynomial { .. } => self
                .polynomial_gradient_bounds(radius)
                .iter()
                .map(|b| b * b)
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Bound on `‖∇ξ_j‖₂` over the ball of the given radius, per entry.
    fn polynomial_gradient_bounds(&self, radius: f64) -> Vec<f64> {
        let m = self.hidden_dim;
        let Basis::Polynomial { exponents, .. } = &self.basis else {
            return Vec::new();
        };
        exponents
            .chunks(m)
            .map(|alpha| {
                let total: u32 = alpha.iter().sum();
                let sq: f64 = (0..m)
                    .filter(|&i| alpha[i] > 0)
                    .map(|i| {
                        let denom: f64 = alpha
                            .iter()
                            .enumerate()
                            .map(|(l, &a)| factorial(if l == i { a - 1 } else { a }))
                            .product();
                        let b = radius.powi(total as i32 - 1) / denom;
                        b * b
                    })
                    .sum();
                sq.sqrt()
            })
            .collect()
    }
}

/// On-disk form: `{"kind": "polynomial"|"fourier", "m": int, "k"|"K": int, "L": real}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpecRepr {
    kind: String,
    m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    big_k: Option<usize>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    period: Option<f64>,
}

impl From<DictionarySpec> for SpecRepr {
    fn from(spec: DictionarySpec) -> Self {
        match spec.kind {
            DictionaryKind::Polynomial { degree } => SpecRepr {
                kind: "polynomial".into(),
                m: spec.hidden_dim,
                k: Some(degree),
                big_k: None,
                period: None,
            },
            DictionaryKind::Fourier { harmonics, period } => SpecRepr {
                kind: "fourier".into(),
                m: spec.hidden_dim,
                k: None,
                big_k: Some(harmonics),
                period: Some(period),
            },
        }
    }
}

impl TryFrom<SpecRepr> for DictionarySpec {
    type Error = NaedError;

    fn try_from(r: SpecRepr) -> Result<Self> {
        match r.kind.as_str() {
            "polynomial" => {
                let k = r.k.ok_or_else(|| NaedError::invalid("dictionary", "polynomial spec needs `k`"))?;
                DictionarySpec::polynomial(r.m, k)
            }
            "fourier" => {
                let big_k = r.big_k.ok_or_else(|| NaedError::invalid("dictionary", "fourier spec needs `K`"))?;
                let period = r.period.ok_or_else(|| NaedError::invalid("dictionary", "fourier spec needs `L`"))?;
                DictionarySpec::fourier(r.m, big_k, period)
            }
            other => Err(NaedError::invalid("dictionary", format!("unknown kind `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn dimensions() {
        assert_eq!(DictionarySpec::fourier(2, 1, 10.0).unwrap().dimension(), 9);
        assert_eq!(DictionarySpec::polynomial(2, 2).unwrap().dimension(), 6);
        assert_eq!(DictionarySpec::polynomial(1, 0).unwrap().dimension(), 1);
        assert_eq!(DictionarySpec::fourier(3, 1, 10.0).unwrap().dimension(), 27);
        for m in 1..5 {
            for k in 0..5 {
                let spec = DictionarySpec::polynomial(m, k).unwrap();
                let per_degree: usize = (0..=k).map(|j| binomial(j + m - 1, m - 1)).sum();
                assert_eq!(spec.dimension(), per_degree);
                assert_eq!(spec.dimension(), binomial(k + m, m));
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(DictionarySpec::fourier(2, 1, 0.0).is_err());
        assert!(DictionarySpec::fourier(2, 1, -1.0).is_err());
        assert!(DictionarySpec::fourier(2, 0, 1.0).is_err());
        assert!(DictionarySpec::polynomial(0, 1).is_err());
    }

    #[test]
    fn polynomial_ordering_and_labels() {
        let spec = DictionarySpec::polynomial(2, 2).unwrap();
        let labels: Vec<_> = (0..6).map(|j| spec.entry_label(j)).collect();
        assert_eq!(labels, ["1", "h1", "h2", "h1^2/2", "h1*h2", "h2^2/2"]);
        assert_eq!(spec.linear_indices(), Some(vec![1, 2]));
    }

    #[test]
    fn fourier_ordering_last_coordinate_fastest() {
        let spec = DictionarySpec::fourier(2, 1, 10.0).unwrap();
        let labels: Vec<_> = (0..9).map(|j| spec.entry_label(j)).collect();
        assert_eq!(
            labels,
            [
                "1",
                "cos1(h2)",
                "sin1(h2)",
                "cos1(h1)",
                "cos1(h1)*cos1(h2)",
                "cos1(h1)*sin1(h2)",
                "sin1(h1)",
                "sin1(h1)*cos1(h2)",
                "sin1(h1)*sin1(h2)"
            ]
        );
    }

    #[test]
    fn origin_evaluations() {
        let spec = DictionarySpec::polynomial(2, 1).unwrap();
        let e = spec.evaluate(&[0.0, 0.0]).unwrap();
        assert_eq!(e.values, vec![1.0, 0.0, 0.0]);
        assert_eq!(e.jacobian, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);

        let spec = DictionarySpec::fourier(1, 1, 10.0).unwrap();
        let e = spec.evaluate(&[0.0]).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 0.0]);
        assert_eq!(e.jacobian[0], 0.0);
        assert_eq!(e.jacobian[1], 0.0);
        assert_abs_diff_eq!(e.jacobian[2], 2.0 * PI / 10.0, epsilon = 1e-15);
    }

    #[test]
    fn quadratic_at_one_two() {
        let spec = DictionarySpec::polynomial(2, 2).unwrap();
        let e = spec.evaluate(&[1.0, 2.0]).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 2.0, 0.5, 2.0, 2.0]);
    }

    #[test]
    fn non_finite_input_rejected() {
        let spec = DictionarySpec::polynomial(2, 1).unwrap();
        assert!(matches!(spec.evaluate(&[f64::NAN, 0.0]), Err(NaedError::NonFiniteInput(_))));
        assert!(matches!(spec.evaluate(&[0.0, f64::INFINITY]), Err(NaedError::NonFiniteInput(_))));
        assert!(spec.evaluate(&[0.0]).is_err());
    }

    #[test]
    fn lipschitz_examples() {
        let f = DictionarySpec::fourier(1, 1, 10.0).unwrap();
        assert_abs_diff_eq!(f.lipschitz_estimate(1.0), 0.6283185307179586, epsilon = 1e-12);
        let p = DictionarySpec::polynomial(1, 1).unwrap();
        assert_eq!(p.lipschitz_estimate(0.3), 1.0);
        assert_eq!(p.lipschitz_estimate(30.0), 1.0);
        let p = DictionarySpec::polynomial(1, 2).unwrap();
        assert_eq!(p.lipschitz_estimate(2.0), 2.0);
    }

    #[test]
    fn constant_row_is_zero() {
        let spec = DictionarySpec::fourier(3, 2, 7.0).unwrap();
        let e = spec.evaluate(&[0.3, -1.2, 4.0]).unwrap();
        assert_eq!(e.values[0], 1.0);
        assert!(e.jacobian_row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn serde_round_trip() {
        let p = DictionarySpec::polynomial(2, 3).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"kind":"polynomial","m":2,"k":3}"#);
        assert_eq!(serde_json::from_str::<DictionarySpec>(&s).unwrap(), p);
        let f = DictionarySpec::fourier(2, 2, 10.0).unwrap();
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(s, r#"{"kind":"fourier","m":2,"K":2,"L":10.0}"#);
        assert_eq!(serde_json::from_str::<DictionarySpec>(&s).unwrap(), f);
        assert!(serde_json::from_str::<DictionarySpec>(r#"{"kind":"fourier","m":2,"K":2,"L":-1}"#).is_err());
    }

    fn arb_spec() -> impl Strategy<Value = DictionarySpec> {
        prop_oneof![
            (1usize..4, 0usize..4).prop_map(|(m, k)| DictionarySpec::polynomial(m, k).unwrap()),
            (1usize..4, 1usize..3, 1.0f64..20.0).prop_map(|(m, k, l)| DictionarySpec::fourier(m, k, l).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn jacobian_matches_central_differences(spec in arb_spec(), seed in proptest::collection::vec(-1.5f64..1.5, 3)) {
            let m = spec.hidden_dim();
            let h = &seed[..m];
            let e = spec.evaluate(h).unwrap();
            let step = 1e-6;
            for i in 0..m {
                let mut hp = h.to_vec();
                let mut hm = h.to_vec();
                hp[i] += step;
                hm[i] -= step;
                let vp = spec.evaluate(&hp).unwrap().values;
                let vm = spec.evaluate(&hm).unwrap().values;
                for j in 0..spec.dimension() {
                    let fd = (vp[j] - vm[j]) / (2.0 * step);
                    let an = e.jacobian[j * m + i];
                    let scale = an.abs().max(1.0);
                    prop_assert!((fd - an).abs() / scale < 1e-6, "entry {j} coord {i}: fd {fd} vs {an}");
                }
            }
        }

        #[test]
        fn ordering_is_deterministic(spec in arb_spec(), seed in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let again: DictionarySpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
            let h = &seed[..spec.hidden_dim()];
            prop_assert_eq!(spec.evaluate(h).unwrap(), again.evaluate(h).unwrap());
        }

        #[test]
        fn fourier_is_periodic(m in 1usize..4, k in 1usize..4, period in 0.5f64..20.0,
                               seed in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let spec = DictionarySpec::fourier(m, k, period).unwrap();
            let h = &seed[..m];
            let base = spec.evaluate(h).unwrap().values;
            for i in 0..m {
                let mut shifted = h.to_vec();
                shifted[i] += period;
                let v = spec.evaluate(&shifted).unwrap().values;
                for (a, b) in base.iter().zip(&v) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    /// Sampled soundness of the Lipschitz estimates on 10^4 random pairs.
    #[test]
    fn lipschitz_soundness_sampled() {
        use rand::{Rng, SeedableRng};
        let specs = [
            DictionarySpec::polynomial(1, 1).unwrap(),
            DictionarySpec::polynomial(2, 2).unwrap(),
            DictionarySpec::polynomial(3, 3).unwrap(),
            DictionarySpec::fourier(1, 1, 10.0).unwrap(),
            DictionarySpec::fourier(2, 2, 10.0).unwrap(),
            DictionarySpec::fourier(3, 1, 3.0).unwrap(),
        ];
        let radius = 1.7;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for spec in &specs {
            let m = spec.hidden_dim();
            let per_entry = spec.lipschitz_estimate(radius);
            let vector = spec.vector_lipschitz(radius);
            let sample = |rng: &mut rand_chacha::ChaCha8Rng| loop {
                let h: Vec<f64> = (0..m).map(|_| rng.gen_range(-radius..radius)).collect();
                if h.iter().map(|v| v * v).sum::<f64>().sqrt() <= radius {
                    return h;
                }
            };
            for _ in 0..10_000 {
                let a = sample(&mut rng);
                let b = sample(&mut rng);
                let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                let va = spec.evaluate(&a).unwrap().values;
                let vb = spec.evaluate(&b).unwrap().values;
                let inf = va.iter().zip(&vb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                let two = va.iter().zip(&vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!(inf <= per_entry * dist + 1e-14, "{spec:?}: {inf} > {per_entry}·{dist}");
                assert!(two <= vector * dist + 1e-14, "{spec:?}: {two} > {vector}·{dist}");
            }
        }
    }
}
