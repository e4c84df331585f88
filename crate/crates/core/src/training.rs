//! Windows, splits, the training loop, metrics, and repeated runs.

use std::io::Write;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{format_timestamp, DAY_END_HOUR, DAY_START_HOUR};
use crate::error::{Error, Result};
use crate::models::{forward_tape, Batch, Forecaster};
use crate::tensor::{AdamConfig, AdamState, Parameter, Tape, Tensor};

/// A half-open interval `[start, end)` of contiguous data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
}

/// `[03:00, 19:00)` of every day from `first` to `last` inclusive.
pub fn daily_spans(first: NaiveDate, last: NaiveDate) -> Vec<Span> {
    first
        .iter_days()
        .take_while(|d| *d <= last)
        .map(|d| Span {
            start: d.and_hms_opt(DAY_START_HOUR, 0, 0).unwrap(),
            end: d.and_hms_opt(DAY_END_HOUR, 0, 0).unwrap(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowIndex {
    pub index_id: usize,
    pub input_hours: Vec<NaiveDateTime>,
    pub target_hours: Vec<NaiveDateTime>,
    /// True when every hour lies inside one valid span.
    pub gap_safe: bool,
    /// Position of the first input hour in the hour list the window was
    /// built from.
    pub start: usize,
}

/// Sliding `l + p` hour windows, one hour apart, lying wholly inside a
/// single span and over consecutive hours of `hours` (sorted). Spans too
/// short for a window contribute nothing.
pub fn build_windows(hours: &[NaiveDateTime], l: usize, p: usize, spans: &[Span]) -> Vec<WindowIndex> {
    let len = l + p;
    let mut out = Vec::new();
    if len == 0 {
        return out;
    }
    for span in spans {
        let lo = hours.partition_point(|t| *t < span.start);
        let hi = hours.partition_point(|t| *t < span.end);
        let mut run_start = lo;
        for k in lo..=hi {
            let breaks = k == hi || (k > run_start && hours[k] - hours[k - 1] != Duration::hours(1));
            if !breaks {
                continue;
            }
            let run_end = k;
            if run_end >= run_start + len {
                for s in run_start..=run_end - len {
                    out.push(WindowIndex {
                        index_id: out.len(),
                        input_hours: hours[s..s + l].to_vec(),
                        target_hours: hours[s + l..s + len].to_vec(),
                        gap_safe: true,
                        start: s,
                    });
                }
            }
            run_start = k;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const REGULAR: SplitRatios = SplitRatios {
        train: 0.9,
        validation: 0.05,
        test: 0.05,
    };
    pub const EVACUATION: SplitRatios = SplitRatios {
        train: 0.8,
        validation: 0.1,
        test: 0.1,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("split ratios {parts:?} must be in [0, 1] and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then `floor(n * ratio)` indices to validation and test
/// each; the remainder goes to training.
pub fn split(indices: &[usize], ratios: SplitRatios, seed: u64) -> Result<Split> {
    ratios.validate()?;
    if indices.is_empty() {
        return Err(Error::Validation("cannot split an empty index list".into()));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let count = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
    let (n_val, n_test) = (count(ratios.validation), count(ratios.test));
    let n_train = n - n_val - n_test;
    Ok(Split {
        train: shuffled[..n_train].to_vec(),
        validation: shuffled[n_train..n_train + n_val].to_vec(),
        test: shuffled[n_train + n_val..].to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Validation("batch_size and max_epochs must be at least 1".into()));
        }
        if !(self.adam.learning_rate >= 0.0) || !self.adam.learning_rate.is_finite() {
            return Err(Error::Validation("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Something [`train`] can optimize: a parameter list plus a loss over
/// window positions.
pub trait Learner {
    fn parameters(&self) -> &[Parameter];
    fn parameters_mut(&mut self) -> &mut [Parameter];
    /// Mean squared error over `windows`; with `grad`, one gradient slot
    /// per parameter.
    fn loss(&self, windows: &[usize], grad: bool) -> Result<(f64, Vec<Option<Tensor>>)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Mini-batch ADAM with early stopping. On return the learner holds the
/// parameters of the epoch with the lowest validation loss (training loss
/// when `val` is empty).
pub fn train<L: Learner>(learner: &mut L, train_set: &[usize], val: &[usize], config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("no training windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(config.adam, learner.parameters());
    let mut order = train_set.to_vec();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let diverged = |epoch: usize, e: Error| match e {
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    };

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (loss, grads) = learner.loss(chunk, true).map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            for (p, g) in learner.parameters_mut().iter_mut().zip(grads) {
                p.grad = g;
            }
            adam.step(learner.parameters_mut()).map_err(|e| diverged(epoch, e))?;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            learner.loss(val, false).map_err(|e| diverged(epoch, e))?.0
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, learner.parameters().iter().map(|p| p.value.clone()).collect()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, values) = best.expect("at least one epoch");
    for (p, v) in learner.parameters_mut().iter_mut().zip(values) {
        p.value = v;
        p.grad = None;
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss,
    })
}

/// Normalized inputs, adjacency and targets for one forecasting problem.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub inputs: Vec<Tensor>,
    pub adjacency: Option<Vec<Tensor>>,
    /// Normalized target flow per hour and node.
    pub targets: Vec<Vec<f64>>,
    pub windows: Vec<WindowIndex>,
    pub input_length: usize,
    pub horizon: usize,
}

impl Prepared {
    pub fn node_count(&self) -> usize {
        self.targets.first().map_or(0, |t| t.len())
    }

    /// Stacks the windows at `positions` into a batch and its
    /// `(B * N) x p` target.
    pub fn batch(&self, positions: &[usize]) -> Result<(Batch, Tensor)> {
        let (l, p, n) = (self.input_length, self.horizon, self.node_count());
        let mut xs: Vec<&[Tensor]> = Vec::with_capacity(positions.len());
        let mut adj: Vec<&[Tensor]> = Vec::with_capacity(positions.len());
        let mut y = Vec::with_capacity(positions.len() * n * p);
        for &w in positions {
            let s = self
                .windows
                .get(w)
                .ok_or_else(|| Error::Contract(format!("window {w} out of range")))?
                .start;
            if s + l + p > self.inputs.len() {
                return Err(Error::Contract(format!("window {w} runs past the data")));
            }
            xs.push(&self.inputs[s..s + l]);
            if let Some(a) = &self.adjacency {
                adj.push(&a[s..s + l]);
            }
            for i in 0..n {
                for k in 0..p {
                    y.push(self.targets[s + l + k][i]);
                }
            }
        }
        let batch = Batch::stack(&xs, self.adjacency.as_ref().map(|_| &adj[..]))?;
        Ok((batch, Tensor::matrix(positions.len() * n, p, y)?))
    }
}

/// A [`Forecaster`] bound to its prepared data.
pub struct ForecastLearner<'a> {
    pub model: Forecaster,
    pub data: &'a Prepared,
}

impl Learner for ForecastLearner<'_> {
    fn parameters(&self) -> &[Parameter] {
        self.model.params.as_slice()
    }

    fn parameters_mut(&mut self) -> &mut [Parameter] {
        self.model.params.as_mut_slice()
    }

    fn loss(&self, windows: &[usize], grad: bool) -> Result<(f64, Vec<Option<Tensor>>)> {
        let (batch, target) = self.data.batch(windows)?;
        let tape = Tape::new();
        let vars = self.model.params.bind(&tape, grad);
        let pred = forward_tape(&tape, &vars, &self.model.config, &batch)?;
        let loss = tape.mse_loss(pred, tape.constant(target))?;
        let value = tape.with_value(loss, |t| t.data()[0]);
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        Ok((value, vars.to_vec().into_iter().map(|v| grads.get(v).cloned()).collect()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Rmse,
    Mae,
    Mape,
    R2,
    Smape,
}

/// Eq. 6 to 9 plus R². MAPE skips terms with `|actual| < 1`; SMAPE counts
/// a term with both values zero as zero. Both are in percent.
pub fn metric(kind: MetricKind, actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(Error::shape("metric", format!("{} actual vs {} predicted", actual.len(), predicted.len())));
    }
    if actual.is_empty() {
        return Err(Error::Validation("metric of an empty series".into()));
    }
    let n = actual.len() as f64;
    let pairs = actual.iter().zip(predicted);
    Ok(match kind {
        MetricKind::Rmse => (pairs.map(|(a, p)| (a - p) * (a - p)).sum::<f64>() / n).sqrt(),
        MetricKind::Mae => pairs.map(|(a, p)| (a - p).abs()).sum::<f64>() / n,
        MetricKind::Mape => {
            let (sum, count) = pairs
                .filter(|(a, _)| a.abs() >= 1.0)
                .fold((0.0, 0usize), |(s, c), (a, p)| (s + ((a - p) / a).abs(), c + 1));
            if count == 0 {
                return Err(Error::Validation("MAPE undefined: every actual value is below 1".into()));
            }
            100.0 * sum / count as f64
        }
        MetricKind::R2 => {
            let mean = actual.iter().sum::<f64>() / n;
            let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
            if ss_tot == 0.0 {
                return Err(Error::Validation("R² undefined: actual values are constant".into()));
            }
            let ss_res: f64 = pairs.map(|(a, p)| (a - p) * (a - p)).sum();
            1.0 - ss_res / ss_tot
        }
        MetricKind::Smape => {
            let sum: f64 = pairs
                .map(|(a, p)| {
                    let d = (a.abs() + p.abs()) / 2.0;
                    if d == 0.0 {
                        0.0
                    } else {
                        (a - p).abs() / d
                    }
                })
                .sum();
            100.0 * sum / n
        }
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
    pub r2: f64,
    pub smape: f64,
}

impl Metrics {
    pub fn compute(actual: &[f64], predicted: &[f64]) -> Result<Self> {
        Ok(Metrics {
            rmse: metric(MetricKind::Rmse, actual, predicted)?,
            mae: metric(MetricKind::Mae, actual, predicted)?,
            mape: metric(MetricKind::Mape, actual, predicted)?,
            r2: metric(MetricKind::R2, actual, predicted)?,
            smape: metric(MetricKind::Smape, actual, predicted)?,
        })
    }

    pub const NAMES: [&'static str; 5] = ["rmse", "mae", "mape", "r2", "smape"];

    /// Values in [`NAMES`](Self::NAMES) order.
    pub fn values(&self) -> [f64; 5] {
        [self.rmse, self.mae, self.mape, self.r2, self.smape]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Metrics {
            rmse: v[0],
            mae: v[1],
            mape: v[2],
            r2: v[3],
            smape: v[4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub detector_id: String,
    /// Hour being predicted.
    pub timestamp: NaiveDateTime,
    /// 1-based horizon.
    pub horizon: usize,
    pub actual: f64,
    pub predicted: f64,
}

/// Aggregate and per-horizon metrics of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregate: Metrics,
    pub per_horizon: Vec<Metrics>,
    pub samples: usize,
}

impl EvalReport {
    pub fn from_predictions(rows: &[PredictionRow], horizon: usize) -> Result<Self> {
        let (a, p): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r.actual, r.predicted)).unzip();
        let per_horizon = (1..=horizon)
            .map(|k| {
                let (a, p): (Vec<f64>, Vec<f64>) = rows
                    .iter()
                    .filter(|r| r.horizon == k)
                    .map(|r| (r.actual, r.predicted))
                    .unzip();
                Metrics::compute(&a, &p)
            })
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            aggregate: Metrics::compute(&a, &p)?,
            per_horizon,
            samples: rows.len(),
        })
    }
}

/// Denormalized predictions of `model` for the windows at `positions`.
pub fn predict_windows(model: &Forecaster, data: &Prepared, positions: &[usize], detector_ids: &[String]) -> Result<Vec<PredictionRow>> {
    let mut out = Vec::new();
    for chunk in positions.chunks(64) {
        let (batch, target) = data.batch(chunk)?;
        let pred = model.predict_normalized(&batch)?;
        out.extend(prediction_rows(&model.normalizer, data, chunk, &pred, &target, detector_ids));
    }
    Ok(out)
}

pub(crate) fn prediction_rows(
    norm: &crate::models::Normalizer,
    data: &Prepared,
    chunk: &[usize],
    pred: &Tensor,
    target: &Tensor,
    detector_ids: &[String],
) -> Vec<PredictionRow> {
    let n = data.node_count();
    let mut out = Vec::with_capacity(chunk.len() * n * data.horizon);
    for (b, &w) in chunk.iter().enumerate() {
        let win = &data.windows[w];
        for (i, id) in detector_ids.iter().enumerate().take(n) {
            for k in 0..data.horizon {
                out.push(PredictionRow {
                    detector_id: id.clone(),
                    timestamp: win.target_hours[k],
                    horizon: k + 1,
                    actual: norm.denormalize_target(target.at(b * n + i, k)),
                    predicted: norm.denormalize_target(pred.at(b * n + i, k)),
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_index: usize,
    pub seed: u64,
    pub aggregate: Option<Metrics>,
    pub per_horizon: Vec<Metrics>,
    pub error: Option<String>,
}

/// Per-run metrics with their mean and (sample) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_count: usize,
    pub runs: Vec<RunSummary>,
    pub mean: Metrics,
    pub std: Metrics,
    pub per_horizon_mean: Vec<Metrics>,
    /// True when some run failed; the statistics then cover the successful
    /// runs only.
    pub partial: bool,
}

impl MetricReport {
    pub fn from_runs(runs: Vec<RunSummary>) -> Result<Self> {
        let ok: Vec<&RunSummary> = runs.iter().filter(|r| r.aggregate.is_some()).collect();
        if ok.is_empty() {
            let first = runs.iter().find_map(|r| r.error.clone()).unwrap_or_default();
            return Err(Error::Validation(format!("every run failed; first error: {first}")));
        }
        let (mean, std) = mean_std(ok.iter().map(|r| r.aggregate.unwrap()));
        let horizons = ok[0].per_horizon.len();
        let per_horizon_mean = (0..horizons)
            .map(|k| mean_std(ok.iter().map(|r| r.per_horizon[k])).0)
            .collect();
        Ok(MetricReport {
            run_count: runs.len(),
            partial: ok.len() != runs.len(),
            runs,
            mean,
            std,
            per_horizon_mean,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per run and horizon (`all` for the aggregate), then mean and
    /// std rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| crate::graph::with_path(e, path))?;
        w.write_record(["run", "seed", "horizon", "rmse", "mae", "mape", "r2", "smape", "error"])?;
        let num = |m: &Metrics| m.values().map(|v| v.to_string());
        for r in &self.runs {
            match &r.aggregate {
                Some(m) => {
                    let mut rec = vec![r.run_index.to_string(), r.seed.to_string(), "all".into()];
                    rec.extend(num(m));
                    rec.push(String::new());
                    w.write_record(&rec)?;
                    for (k, m) in r.per_horizon.iter().enumerate() {
                        let mut rec = vec![r.run_index.to_string(), r.seed.to_string(), (k + 1).to_string()];
                        rec.extend(num(m));
                        rec.push(String::new());
                        w.write_record(&rec)?;
                    }
                }
                None => {
                    let mut rec = vec![r.run_index.to_string(), r.seed.to_string(), "all".into()];
                    rec.extend(std::iter::repeat(String::new()).take(5));
                    rec.push(r.error.clone().unwrap_or_default());
                    w.write_record(&rec)?;
                }
            }
        }
        for (label, m) in [("mean", &self.mean), ("std", &self.std)] {
            let mut rec = vec![label.to_string(), String::new(), "all".into()];
            rec.extend(num(m));
            rec.push(String::new());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn mean_std(items: impl Iterator<Item = Metrics> + Clone) -> (Metrics, Metrics) {
    let n = items.clone().count() as f64;
    let mut sum = [0.0; 5];
    for m in items.clone() {
        for (s, v) in sum.iter_mut().zip(m.values()) {
            *s += v;
        }
    }
    let mean = sum.map(|s| s / n);
    let mut sq = [0.0; 5];
    for m in items {
        for ((s, v), mu) in sq.iter_mut().zip(m.values()).zip(mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    let std = if n > 1.0 { sq.map(|s| (s / (n - 1.0)).sqrt()) } else { [0.0; 5] };
    (Metrics::from_values(mean), Metrics::from_values(std))
}

/// Runs `experiment(run_index, seed)` for `n` runs with seeds
/// `base_seed + run_index`, on at most `threads` worker threads. Failed
/// runs are recorded in the report rather than aborting it.
pub fn repeat_runs<F>(n: usize, base_seed: u64, threads: usize, experiment: F) -> Result<MetricReport>
where
    F: Fn(usize, u64) -> Result<EvalReport> + Sync,
{
    if n == 0 {
        return Err(Error::Validation("run count must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    let runs: Vec<RunSummary> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let seed = base_seed.wrapping_add(i as u64);
                match experiment(i, seed) {
                    Ok(r) => RunSummary {
                        run_index: i,
                        seed,
                        aggregate: Some(r.aggregate),
                        per_horizon: r.per_horizon,
                        error: None,
                    },
                    Err(e) => RunSummary {
                        run_index: i,
                        seed,
                        aggregate: None,
                        per_horizon: Vec::new(),
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    MetricReport::from_runs(runs)
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::graph::with_path(e, path))?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_predictions_csv(rows: &[PredictionRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "detector_id,timestamp,horizon,actual,predicted").map_err(io)?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.detector_id,
            format_timestamp(r.timestamp),
            r.horizon,
            r.actual,
            r.predicted
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}
