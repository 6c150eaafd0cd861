//! Sampled time signals, labels and datasets.

use std::collections::{BTreeMap, HashSet};

use crate::error::{NaedError, Result};

/// One sampled input signal `x_i` on its own time grid.
///
/// Values are stored row-major: sample `j` occupies
/// `values[j*n..(j+1)*n]`. The label, when present, is the class index of the
/// one-hot target vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    id: String,
    times: Vec<f64>,
    values: Vec<f64>,
    input_dim: usize,
    label: Option<usize>,
}

impl TimeSeries {
    pub fn new(id: impl Into<String>, times: Vec<f64>, values: Vec<Vec<f64>>, label: Option<usize>) -> Result<Self> {
        let input_dim = values.first().map(Vec::len).unwrap_or(0);
        if values.iter().any(|v| v.len() != input_dim) {
            return Err(NaedError::invalid("time series", "all samples must share the input dimension"));
        }
        Self::from_flat(id, times, values.concat(), input_dim, label)
    }

    pub fn from_flat(
        id: impl Into<String>,
        times: Vec<f64>,
        values: Vec<f64>,
        input_dim: usize,
        label: Option<usize>,
    ) -> Result<Self> {
        let id = id.into();
        if times.len() < 2 {
            return Err(NaedError::invalid("time series", format!("`{id}` needs at least two samples")));
        }
        if input_dim == 0 || values.len() != times.len() * input_dim {
            return Err(NaedError::invalid(
                "time series",
                format!("`{id}`: {} values for {} times of dimension {input_dim}", values.len(), times.len()),
            ));
        }
        if times[0] != 0.0 {
            return Err(NaedError::invalid("time series", format!("`{id}` must start at t = 0")));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(NaedError::invalid("time series", format!("`{id}` times must be strictly increasing")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NaedError::invalid("time series", format!("`{id}` contains non-finite values")));
        }
        Ok(Self {
            id,
            times,
            values,
            input_dim,
            label,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// All sampled values, row-major.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, j: usize) -> &[f64] {
        &self.values[j * self.input_dim..(j + 1) * self.input_dim]
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Final time `T_i`.
    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    /// Same grid and label, different values (must keep shape and finiteness).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_flat(self.id.clone(), self.times.clone(), values, self.input_dim, self.label)
    }

    /// One-hot target vector of length `classes`.
    pub fn one_hot(&self, classes: usize) -> Option<Vec<f64>> {
        self.label.map(|c| {
            let mut y = vec![0.0; classes];
            y[c] = 1.0;
            y
        })
    }

    /// Piecewise-linear interpolation of the signal, clamped outside `[0, T]`.
    pub fn interpolate(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.input_dim];
        self.interpolate_into(t, &mut out);
        out
    }

    pub fn interpolate_into(&self, t: f64, out: &mut [f64]) {
        let last = self.times.len() - 1;
        if t <= self.times[0] {
            out.copy_from_slice(self.value(0));
            return;
        }
        if t >= self.times[last] {
            out.copy_from_slice(self.value(last));
            return;
        }
        // first index with times[j] > t, so times[j-1] <= t < times[j]
        let hi = self.times.partition_point(|&s| s <= t);
        let lo = hi - 1;
        if self.times[lo] == t {
            out.copy_from_slice(self.value(lo));
            return;
        }
        self.interpolate_segment(lo, t, out);
    }

    /// Interpolate inside segment `[t_j, t_{j+1}]` without searching.
    #[inline]
    pub(crate) fn interpolate_segment(&self, j: usize, t: f64, out: &mut [f64]) {
        let (t0, t1) = (self.times[j], self.times[j + 1]);
        let lam = (t - t0) / (t1 - t0);
        let x0 = self.value(j);
        let x1 = self.value(j + 1);
        for k in 0..self.input_dim {
            let (a, b) = (x0[k], x1[k]);
            // clamp so rounding never leaves the bracket
            out[k] = ((1.0 - lam) * a + lam * b).clamp(a.min(b), a.max(b));
        }
    }
}

/// A labelled collection of series sharing input dimension and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub series: Vec<TimeSeries>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(series: Vec<TimeSeries>, input_dim: usize, num_classes: usize) -> Result<Self> {
        let ds = Self {
            series,
            input_dim,
            num_classes,
            metadata: BTreeMap::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.series.len());
        for ts in &self.series {
            if ts.input_dim() != self.input_dim {
                return Err(NaedError::invalid(
                    "dataset",
                    format!("series `{}` has input dimension {}, expected {}", ts.id(), ts.input_dim(), self.input_dim),
                ));
            }
            if let Some(c) = ts.label() {
                if c >= self.num_classes {
                    return Err(NaedError::invalid(
                        "dataset",
                        format!("series `{}` has label {c} outside [0, {})", ts.id(), self.num_classes),
                    ));
                }
            }
            if !ids.insert(ts.id()) {
                return Err(NaedError::invalid("dataset", format!("duplicate id `{}`", ts.id())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Count of samples per class; unlabeled series are ignored.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for c in self.series.iter().filter_map(TimeSeries::label) {
            counts[c] += 1;
        }
        counts
    }

    /// Largest final time over all series.
    pub fn max_final_time(&self) -> f64 {
        self.series.iter().map(TimeSeries::final_time).fold(0.0, f64::max)
    }

    /// Subset by index, keeping shape and metadata.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            series: indices.iter().map(|&i| self.series[i].clone()).collect(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            metadata: self.metadata.clone(),
        }
    }
}
