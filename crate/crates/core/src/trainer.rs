//! Adam training of the full parameter set, iterative hard thresholding of β,
//! stratified cross-validation of the threshold, and accuracy evaluation.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::DictionarySpec;
use crate::error::{NaedError, Result};
use crate::gradients::{evaluate_batch, Gradients};
use crate::integrator::SolverConfig;
use crate::model::{self, Parameters};
use crate::signal::{Dataset, TimeSeries};

/// Learning rates searched in the reference experiments.
pub const LEARNING_RATES: [f64; 6] = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5];

/// Threshold grid searched by cross-validation in the reference experiments.
pub const LAMBDA_GRID: [f64; 6] = [0.01, 0.03, 0.05, 0.1, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchSize {
    Full,
    Mini(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: BatchSize,
    pub substeps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Relative epoch-to-epoch loss change regarded as stalled.
    pub convergence_tol: f64,
    /// Consecutive stalled epochs that end training.
    pub patience: usize,
    /// Hard threshold for β; zero disables thresholding.
    pub sparse_lambda: f64,
    pub seed: u64,
    /// Multiplier on the initial `β` drawn by [`model::initialize`].
    #[serde(default = "unit_scale")]
    pub init_beta_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_epochs: 500,
            batch_size: BatchSize::Full,
            substeps: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            convergence_tol: 1e-5,
            patience: 20,
            sparse_lambda: 0.0,
            seed: 0,
            init_beta_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(NaedError::invalid("train config", reason));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1".into());
        }
        if !(self.sparse_lambda >= 0.0) {
            return bad(format!("sparse lambda must be non-negative, got {}", self.sparse_lambda));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam decay rates must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.convergence_tol >= 0.0) {
            return bad("Adam epsilon must be positive and the tolerance non-negative".into());
        }
        if !(self.init_beta_scale > 0.0) || !self.init_beta_scale.is_finite() {
            return bad(format!("initial beta scale must be positive, got {}", self.init_beta_scale));
        }
        if self.batch_size == BatchSize::Mini(0) {
            return bad("mini-batch size must be at least 1".into());
        }
        Ok(())
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig::with_substeps(self.substeps)
    }
}

/// Per-epoch record: loss and accuracy at the parameters the epoch started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub nonzero_beta: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub nonzero_beta_count: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub converged: bool,
    pub wall_time_secs: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainReport {
    /// `epoch,loss,trainAcc,nnzBeta` log, one row per epoch.
    pub fn write_epoch_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,loss,trainAcc,nnzBeta")?;
        for r in &self.history {
            writeln!(out, "{},{},{},{}", r.epoch, r.loss, r.train_accuracy, r.nonzero_beta)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(state: &mut AdamState, params: &mut Parameters, grads: &Gradients, config: &TrainConfig) {
    assert_eq!(state.m.len(), params.len(), "optimizer state does not match the parameters");
    state.t += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t);
    let c2 = 1.0 - b2.powi(state.t);
    for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
}

/// Zero every β entry with `|β_ij| < lambda`; returns how many were zeroed.
pub fn threshold(params: &mut Parameters, lambda: f64) -> usize {
    let mut zeroed = 0;
    for b in params.beta.data.iter_mut() {
        if *b != 0.0 && b.abs() < lambda {
            *b = 0.0;
            zeroed += 1;
        }
    }
    zeroed
}

/// State after one descent-plus-threshold step, passed to training observers.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub lambda: f64,
    pub nonzero_before_threshold: usize,
    pub params: &'a Parameters,
}

pub fn train(train: &Dataset, test: Option<&Dataset>, spec: &DictionarySpec, config: &TrainConfig) -> Result<(Parameters, TrainReport)> {
    let mut init = model::initialize(spec, train.input_dim, train.num_classes, config.seed);
    init.beta.data.iter_mut().for_each(|b| *b *= config.init_beta_scale);
    train_with_observer(train, test, spec, config, init, |_| {})
}

/// Training from explicit initial parameters, calling `observer` after every
/// optimizer step.
pub fn train_with_observer(
    train: &Dataset,
    test: Option<&Dataset>,
    spec: &DictionarySpec,
    config: &TrainConfig,
    init: Parameters,
    mut observer: impl FnMut(&StepEvent<'_>),
) -> Result<(Parameters, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(NaedError::invalid("training split", "is empty"));
    }
    init.check_shapes(spec)?;
    let started = Instant::now();
    let solver = config.solver();
    let mut params = init;
    let mut adam = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch_len = match config.batch_size {
        BatchSize::Full => train.len(),
        BatchSize::Mini(b) => b.min(train.len()),
    };

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut stalled = 0;
    let mut converged = false;
    let mut step = 0;

    for epoch in 0..config.max_epochs {
        if batch_len < train.len() {
            order.shuffle(&mut rng);
        }
        let start_params = params.clone();
        let mut epoch_loss = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(batch_len) {
            let batch: Vec<&TimeSeries> = chunk.iter().map(|&i| &train.series[i]).collect();
            let eval = evaluate_batch(&params, spec, &batch, solver).map_err(|f| {
                if f.error.is_numerical() {
                    NaedError::BlowUpDuringTraining {
                        epoch,
                        sample: f.sample,
                        source: Box::new(f.error),
                    }
                } else {
                    f.error
                }
            })?;
            epoch_loss += eval.loss * chunk.len() as f64;
            correct += eval.correct;

            adam_step(&mut adam, &mut params, &eval.grads, config);
            let nonzero_before_threshold = params.nonzero_beta();
            if config.sparse_lambda > 0.0 {
                threshold(&mut params, config.sparse_lambda);
            }
            observer(&StepEvent {
                epoch,
                step,
                lambda: config.sparse_lambda,
                nonzero_before_threshold,
                params: &params,
            });
            step += 1;
        }
        let loss = epoch_loss / train.len() as f64;
        let record = EpochRecord {
            epoch,
            loss,
            train_accuracy: correct as f64 / train.len() as f64,
            nonzero_beta: start_params.nonzero_beta(),
        };
        log::debug!("epoch {epoch}: loss {loss:.6}, train accuracy {:.4}", record.train_accuracy);
        if let Some(prev) = history.last().map(|r: &EpochRecord| r.loss) {
            if (loss - prev).abs() <= config.convergence_tol * prev.abs().max(f64::MIN_POSITIVE) {
                stalled += 1;
            } else {
                stalled = 0;
            }
        }
        history.push(record);
        if loss < best.0 {
            best = (loss, start_params, epoch);
        }
        if stalled >= config.patience {
            converged = true;
            break;
        }
    }
    if history.is_empty() {
        return Err(NaedError::invalid("train config", "max epochs must be at least 1"));
    }
    if !converged {
        log::info!("training stopped at the epoch cap ({}) before the loss converged", config.max_epochs);
    }

    let (_, best_params, best_epoch) = best;
    let train_accuracy = evaluate(&best_params, spec, &train.series, solver)?;
    let test_accuracy = test.map(|t| evaluate(&best_params, spec, &t.series, solver)).transpose()?;
    let report = TrainReport {
        loss_history: history.iter().map(|r| r.loss).collect(),
        train_accuracy,
        test_accuracy,
        nonzero_beta_count: best_params.nonzero_beta(),
        epochs: history.len(),
        best_epoch,
        converged,
        wall_time_secs: started.elapsed().as_secs_f64(),
        history,
    };
    Ok((best_params, report))
}

/// Fraction of samples whose predicted class equals the label. A sample whose
/// forward solve blows up counts as misclassified.
pub fn evaluate(params: &Parameters, spec: &DictionarySpec, split: &[TimeSeries], cfg: SolverConfig) -> Result<f64> {
    if split.is_empty() {
        return Err(NaedError::invalid("evaluation split", "is empty"));
    }
    let hits: Vec<Result<bool>> = split
        .par_iter()
        .map(|ts| {
            let label = ts
                .label()
                .ok_or_else(|| NaedError::invalid("evaluation split", format!("series `{}` is unlabeled", ts.id())))?;
            match model::predict(params, spec, ts, cfg) {
                Ok(p) => Ok(p.class() == label),
                Err(e @ NaedError::BlowUp { .. }) => {
                    log::warn!("sample `{}` counted as misclassified: {e}", ts.id());
                    Ok(false)
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut correct = 0;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Stratified split of sample indices into `k` folds. Each class is shuffled
/// and dealt round-robin, continuing where the previous class stopped, so fold
/// sizes differ by at most one and per-class counts by at most one.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(k >= 1, "need at least one fold");
    let classes = labels.iter().copied().max().map_or(0, |c| c + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        for i in members {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

pub const CV_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub chosen: f64,
    pub scores: Vec<LambdaScore>,
}

/// Five-fold stratified cross-validation over `lambda_grid`; the λ with the
/// highest mean held-out accuracy wins, ties going to the smaller λ.
pub fn cross_validate_lambda(dataset: &Dataset, spec: &DictionarySpec, config: &TrainConfig, lambda_grid: &[f64]) -> Result<CvReport> {
    if lambda_grid.is_empty() {
        return Err(NaedError::invalid("lambda grid", "is empty"));
    }
    if lambda_grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(NaedError::invalid("lambda grid", "entries must be non-negative"));
    }
    if dataset.len() < CV_FOLDS {
        return Err(NaedError::invalid("dataset", format!("cross-validation needs at least {CV_FOLDS} samples")));
    }
    let labels: Vec<usize> = dataset
        .series
        .iter()
        .map(|s| s.label().ok_or_else(|| NaedError::invalid("dataset", format!("series `{}` is unlabeled", s.id()))))
        .collect::<Result<_>>()?;
    let folds = stratified_folds(&labels, CV_FOLDS, config.seed);
    let solver = config.solver();

    let mut scores = Vec::with_capacity(lambda_grid.len());
    for &lambda in lambda_grid {
        let mut fold_accuracies = Vec::with_capacity(CV_FOLDS);
        for (f, held) in folds.iter().enumerate() {
            let train_idx: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, idx)| idx.iter().copied())
                .collect();
            let train_split = dataset.subset(&train_idx);
            let held_split = dataset.subset(held);
            let cfg = TrainConfig {
                sparse_lambda: lambda,
                ..config.clone()
            };
            let (params, _) = train(&train_split, None, spec, &cfg)?;
            let acc = evaluate(&params, spec, &held_split.series, solver)?;
            log::info!("lambda {lambda}: fold {f} accuracy {acc:.4}");
            fold_accuracies.push(acc);
        }
        let mean_accuracy = fold_accuracies.iter().sum::<f64>() / CV_FOLDS as f64;
        scores.push(LambdaScore {
            lambda,
            fold_accuracies,
            mean_accuracy,
        });
    }
    let chosen = scores
        .iter()
        .fold(None::<&LambdaScore>, |best, s| match best {
            Some(b) if b.mean_accuracy > s.mean_accuracy => Some(b),
            Some(b) if b.mean_accuracy == s.mean_accuracy && b.lambda <= s.lambda => Some(b),
            _ => Some(s),
        })
        .unwrap()
        .lambda;
    Ok(CvReport { chosen, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Matrix;
    use proptest::prelude::*;

    /// Class decided by the sign of ∫x, which a linear model with β = 0 reads
    /// off directly from h(T) = B∫x.
    fn separable(count: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let series = (0..count)
            .map(|i| {
                let times: Vec<f64> = (0..=20).map(|j| j as f64 * 0.25).collect();
                let offset = if i % 2 == 0 { 0.5 } else { -0.5 } * rng.gen_range(0.5..1.5);
                let freq = rng.gen_range(0.5..2.0);
                let vals = times.iter().map(|t| vec![offset + 0.3 * (freq * t).sin()]).collect();
                TimeSeries::new(format!("t{i:04}"), times, vals, Some(usize::from(offset < 0.0))).unwrap()
            })
            .collect();
        Dataset::new(series, 1, 2).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let spec = DictionarySpec::polynomial(2, 1).unwrap();
        let mut p = model::initialize(&spec, 1, 2, 3);
        let before = p.clone();
        let g = Gradients::zeros_like(&p);
        let mut st = AdamState::new(p.len());
        adam_step(&mut st, &mut p, &g, &TrainConfig::default());
        assert_eq!(p, before);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let spec = DictionarySpec::polynomial(2, 1).unwrap();
        let mut p = Parameters::zeros(&spec, 1, 2);
        let mut g = Gradients::zeros_like(&p);
        for (k, v) in g.beta.data.iter_mut().enumerate() {
            *v = if k % 2 == 0 { 3.0 } else { -0.02 };
        }
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut st = AdamState::new(p.len());
        adam_step(&mut st, &mut p, &g, &cfg);
        for (k, v) in p.beta.data.iter().enumerate() {
            let expected_sign = if k % 2 == 0 { -1.0 } else { 1.0 };
            // |Δθ| = α|g|/(|g| + ε) ≤ α
            assert!(v.abs() <= 0.1);
            assert!((v.abs() - 0.1).abs() < 1e-6);
            assert_eq!(v.signum(), expected_sign);
        }
    }

    #[test]
    fn adam_on_scalar_quadratic() {
        // J(θ) = θ²/2 carried by the single bias entry, checked against the
        // textbook recursion written out independently
        let mut p = Parameters {
            beta: Matrix::zeros(1, 1),
            forcing: Matrix::zeros(1, 1),
            readout: Matrix::zeros(1, 1),
            bias: vec![1.0],
        };
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut st = AdamState::new(p.len());
        let (mut th, mut m1, mut m2) = (1.0f64, 0.0f64, 0.0f64);
        let mut losses = vec![0.5];
        for t in 1..=50 {
            let mut g = Gradients::zeros_like(&p);
            g.bias[0] = p.bias[0];
            adam_step(&mut st, &mut p, &g, &cfg);
            m1 = 0.9 * m1 + 0.1 * th;
            m2 = 0.999 * m2 + 0.001 * th * th;
            let step = 0.1 * (m1 / (1.0 - 0.9f64.powi(t))) / ((m2 / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            th -= step;
            assert!((p.bias[0] - th).abs() < 1e-14);
            losses.push(0.5 * th * th);
        }
        // monotone until momentum carries θ past the minimum at step 12
        assert!(losses[..12].windows(2).all(|w| w[1] < w[0]));
        assert!(losses[12] > losses[11]);
        assert!(losses[50] < 1e-4);
    }

    #[test]
    fn threshold_zeroes_small_entries_only() {
        let spec = DictionarySpec::polynomial(1, 2).unwrap();
        let mut p = Parameters::zeros(&spec, 1, 2);
        p.beta.data = vec![0.05, -0.2, 0.1];
        assert_eq!(threshold(&mut p, 0.1), 1);
        assert_eq!(p.beta.data, vec![0.0, -0.2, 0.1]);
    }

    #[test]
    fn separable_toy_is_learned() {
        let ds = separable(40, 1);
        let spec = DictionarySpec::polynomial(2, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 200,
            seed: 2,
            ..TrainConfig::default()
        };
        let (_, report) = train(&ds, None, &spec, &cfg).unwrap();
        assert_eq!(report.train_accuracy, 1.0);
        assert!(report.epochs <= 200);
    }

    #[test]
    fn dense_training_keeps_all_beta() {
        let ds = separable(20, 4);
        let spec = DictionarySpec::fourier(2, 1, 5.0).unwrap();
        let cfg = TrainConfig {
            max_epochs: 5,
            seed: 5,
            ..TrainConfig::default()
        };
        let (p, report) = train(&ds, None, &spec, &cfg).unwrap();
        assert_eq!(report.nonzero_beta_count, p.beta.data.len());
    }

    #[test]
    fn init_beta_scale_shrinks_the_starting_field() {
        let data = separable(20, 4);
        let spec = DictionarySpec::fourier(1, 1, 5.0).unwrap();
        let cfg = TrainConfig {
            max_epochs: 1,
            init_beta_scale: 0.1,
            seed: 6,
            ..TrainConfig::default()
        };
        let mut seen = None;
        let mut init = model::initialize(&spec, 1, 2, 6);
        init.beta.data.iter_mut().for_each(|b| *b *= 0.1);
        train_with_observer(&data, None, &spec, &cfg, init.clone(), |e| {
            seen.get_or_insert_with(|| e.params.beta.clone());
        })
        .unwrap();
        let (_, report) = train(&data, None, &spec, &cfg).unwrap();
        let (_, direct) = train_with_observer(&data, None, &spec, &cfg, init, |_| {}).unwrap();
        assert_eq!(report.loss_history, direct.loss_history);
        assert!(seen.unwrap().data.iter().all(|b| b.abs() <= 0.1 + cfg.learning_rate));

        let bad = TrainConfig {
            init_beta_scale: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable(24, 6);
        let spec = DictionarySpec::fourier(2, 1, 5.0).unwrap();
        let cfg = TrainConfig {
            max_epochs: 8,
            batch_size: BatchSize::Mini(7),
            sparse_lambda: 0.05,
            seed: 9,
            ..TrainConfig::default()
        };
        let (_, a) = train(&ds, None, &spec, &cfg).unwrap();
        let (_, b) = train(&ds, None, &spec, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn blow_up_reports_epoch_and_sample() {
        let ds = separable(4, 7);
        let spec = DictionarySpec::polynomial(1, 2).unwrap();
        let mut init = Parameters::zeros(&spec, 1, 2);
        init.beta.data = vec![1.0, 0.0, 50.0];
        let cfg = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        };
        match train_with_observer(&ds, None, &spec, &cfg, init, |_| {}) {
            Err(NaedError::BlowUpDuringTraining { epoch, sample, .. }) => {
                assert_eq!(epoch, 0);
                assert_eq!(sample, "t0000");
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_counts_blow_up_as_miss() {
        let ds = separable(6, 8);
        let spec = DictionarySpec::polynomial(1, 2).unwrap();
        let mut p = Parameters::zeros(&spec, 1, 2);
        p.beta.data = vec![1.0, 0.0, 50.0];
        assert_eq!(evaluate(&p, &spec, &ds.series, SolverConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_all_correct() {
        let ds = separable(10, 9);
        let spec = DictionarySpec::polynomial(1, 1).unwrap();
        let mut p = Parameters::zeros(&spec, 1, 2);
        p.forcing.data = vec![1.0];
        p.readout.data = vec![1.0, -1.0];
        assert_eq!(evaluate(&p, &spec, &ds.series, SolverConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn single_lambda_grid_returns_it() {
        let ds = separable(10, 10);
        let spec = DictionarySpec::polynomial(1, 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 2,
            seed: 1,
            ..TrainConfig::default()
        };
        let report = cross_validate_lambda(&ds, &spec, &cfg, &[0.3]).unwrap();
        assert_eq!(report.chosen, 0.3);
        assert_eq!(report.scores[0].fold_accuracies.len(), CV_FOLDS);
    }

    #[test]
    fn epoch_csv_layout() {
        let report = TrainReport {
            loss_history: vec![0.5],
            train_accuracy: 1.0,
            test_accuracy: None,
            nonzero_beta_count: 3,
            epochs: 1,
            best_epoch: 0,
            converged: false,
            wall_time_secs: 0.0,
            history: vec![EpochRecord {
                epoch: 0,
                loss: 0.5,
                train_accuracy: 0.75,
                nonzero_beta: 3,
            }],
        };
        let mut buf = Vec::new();
        report.write_epoch_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,loss,trainAcc,nnzBeta\n0,0.5,0.75,3\n");
    }

    proptest! {
        #[test]
        fn folds_are_balanced(labels in proptest::collection::vec(0usize..3, 5..200), seed in any::<u64>()) {
            let folds = stratified_folds(&labels, CV_FOLDS, seed);
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for c in 0..3 {
                let total = labels.iter().filter(|&&l| l == c).count() as f64;
                for f in &folds {
                    let count = f.iter().filter(|&&i| labels[i] == c).count() as f64;
                    prop_assert!((count - total / CV_FOLDS as f64).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn threshold_invariant_holds_every_step(lambda in 0.01f64..0.5, seed in 0u64..1000) {
            let ds = separable(12, seed);
            let spec = DictionarySpec::fourier(2, 1, 5.0).unwrap();
            let cfg = TrainConfig { learning_rate: 0.05, max_epochs: 6, sparse_lambda: lambda, seed, ..TrainConfig::default() };
            let init = model::initialize(&spec, 1, 2, seed);
            let mut violations = 0;
            let mut monotone = true;
            train_with_observer(&ds, None, &spec, &cfg, init, |ev| {
                violations += ev.params.beta.data.iter().filter(|b| **b != 0.0 && b.abs() < ev.lambda).count();
                monotone &= ev.params.nonzero_beta() <= ev.nonzero_before_threshold;
            }).unwrap();
            prop_assert_eq!(violations, 0);
            prop_assert!(monotone);
        }
    }
}
