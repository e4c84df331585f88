//! Fitting and evaluating forecasters and transfer models on datasets.

use chrono::{NaiveDate, NaiveDateTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureSet};
use crate::detector::{engineer_features, impute, qc_filter, DetectorSeries, ImputeConfig, ImputeReport, QcReport, QcThresholds, RawDetectorSeries};
use crate::error::{Error, Result};
use crate::graph::{AdjacencyOptions, Directionality, EdgeWeighting, RoadGraph};
use crate::models::{AdjacencyMode, Forecaster, ModelConfig, ModelVariant, Normalizer};
use crate::training::{
    build_windows, daily_spans, predict_windows, split, train, EvalReport, ForecastLearner, Prepared, Split, SplitRatios,
    TrainConfig, TrainOutcome, WindowIndex,
};
use crate::transfer::{fit_transfer, TransferModel, TransferPrepared};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightingSetting {
    /// `tau_minutes` defaults to the median edge travel time over the
    /// training hours.
    Affinity { tau_minutes: Option<f64> },
    RawTravelTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjacencySetting {
    pub weighting: WeightingSetting,
    pub directionality: Directionality,
}

impl Default for AdjacencySetting {
    fn default() -> Self {
        AdjacencySetting {
            weighting: WeightingSetting::Affinity { tau_minutes: None },
            directionality: Directionality::Directed,
        }
    }
}

impl AdjacencySetting {
    pub fn resolve(&self, dataset: &Dataset, hours: &[usize]) -> Result<AdjacencyOptions> {
        let weighting = match self.weighting {
            WeightingSetting::RawTravelTime => EdgeWeighting::RawTravelTime,
            WeightingSetting::Affinity { tau_minutes: Some(tau) } => EdgeWeighting::Affinity { tau_minutes: tau },
            WeightingSetting::Affinity { tau_minutes: None } => EdgeWeighting::Affinity {
                tau_minutes: dataset
                    .median_edge_minutes(hours.iter().copied())
                    .ok_or_else(|| Error::Validation("graph has no edges to derive tau from".into()))?,
            },
        };
        if let EdgeWeighting::Affinity { tau_minutes } = weighting {
            if !(tau_minutes > 0.0) || !tau_minutes.is_finite() {
                return Err(Error::Validation(format!("tau must be positive, got {tau_minutes}")));
            }
        }
        Ok(AdjacencyOptions {
            weighting,
            directionality: self.directionality,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSetup {
    pub variant: ModelVariant,
    pub hidden_size: usize,
    pub input_length: usize,
    pub horizon: usize,
    /// Adds the two movement columns to the traffic features.
    pub movement_features: bool,
    pub adjacency: AdjacencySetting,
    pub training: TrainConfig,
}

impl Default for ForecastSetup {
    fn default() -> Self {
        ForecastSetup {
            variant: ModelVariant::DgcnLstm,
            hidden_size: 64,
            input_length: 6,
            horizon: 6,
            movement_features: false,
            adjacency: AdjacencySetting::default(),
            training: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSetup {
    pub hidden_size: usize,
    pub movement_features: bool,
    pub training: TrainConfig,
}

impl Default for TransferSetup {
    fn default() -> Self {
        TransferSetup {
            hidden_size: 32,
            movement_features: true,
            training: TrainConfig::default(),
        }
    }
}

impl TransferSetup {
    pub fn feature_set(&self) -> FeatureSet {
        FeatureSet {
            movement: self.movement_features,
            evacuation: true,
        }
    }
}

/// Cleaned series of several periods over a common detector set.
#[derive(Clone, Debug)]
pub struct Cleaned {
    pub graph: RoadGraph,
    pub periods: Vec<Vec<DetectorSeries>>,
    pub qc: Vec<QcReport>,
    pub imputation: Vec<ImputeReport>,
}

/// Quality control and imputation of each period. Only detectors that pass
/// quality control in every period are kept.
pub fn clean_periods(periods: Vec<Vec<RawDetectorSeries>>, graph: &RoadGraph, qc: &QcThresholds, imputation: &ImputeConfig) -> Result<Cleaned> {
    let mut kept = Vec::new();
    let mut reports = Vec::new();
    for p in periods {
        let (k, r) = qc_filter(p, qc);
        kept.push(k);
        reports.push(r);
    }
    let common: Vec<String> = graph
        .detector_ids()
        .into_iter()
        .filter(|id| reports.iter().all(|r| r.retained.contains(id)))
        .collect();
    if common.is_empty() {
        return Err(Error::Validation("no detector passes quality control in every period".into()));
    }
    let graph = graph.restricted(&common)?;
    let mut cleaned = Vec::new();
    let mut imputed = Vec::new();
    for k in kept {
        let series: Vec<RawDetectorSeries> = k.into_iter().filter(|s| common.contains(&s.detector_id)).collect();
        let (s, r) = impute(&series, &graph, imputation)?;
        cleaned.push(s);
        imputed.push(r);
    }
    Ok(Cleaned {
        graph,
        periods: cleaned,
        qc: reports,
        imputation: imputed,
    })
}

pub fn build_dataset(series: &[DetectorSeries], graph: &RoadGraph) -> Result<Dataset> {
    Dataset::from_features(&engineer_features(series)?, graph)
}

/// Gap-safe windows over the daily spans from `first_day` (default: the
/// first day of data) to the last day of data.
pub fn dataset_windows(dataset: &Dataset, first_day: Option<NaiveDate>, l: usize, p: usize) -> Result<Vec<WindowIndex>> {
    let (Some(first), Some(last)) = (dataset.hours.first(), dataset.hours.last()) else {
        return Err(Error::Validation("dataset has no hours".into()));
    };
    let first = first_day.unwrap_or(first.date());
    Ok(build_windows(&dataset.hours, l, p, &daily_spans(first, last.date())))
}

fn window_hours(windows: &[WindowIndex], positions: &[usize], span: impl Fn(&WindowIndex) -> std::ops::Range<usize>) -> Vec<usize> {
    let mut hours: Vec<usize> = positions.iter().flat_map(|&w| span(&windows[w])).collect();
    hours.sort_unstable();
    hours.dedup();
    hours
}

/// Normalized inputs, adjacency and targets for `model` over `dataset`.
pub fn prepare_forecaster(model: &Forecaster, dataset: &Dataset, windows: Vec<WindowIndex>) -> Result<Prepared> {
    if dataset.node_count() != model.config.node_count {
        return Err(Error::shape(
            "prepare_forecaster",
            format!("model has {} nodes, data has {}", model.config.node_count, dataset.node_count()),
        ));
    }
    let set = FeatureSet::from_names(&model.feature_names)?;
    if set.width() != model.config.input_feature_count {
        return Err(Error::shape(
            "prepare_forecaster",
            format!("model takes {} features, its names list {}", model.config.input_feature_count, set.width()),
        ));
    }
    let inputs = dataset
        .inputs(set)?
        .iter()
        .map(|x| model.normalizer.normalize_features(x))
        .collect::<Result<Vec<_>>>()?;
    let adjacency = match model.config.adjacency_mode {
        AdjacencyMode::Dynamic => Some(dataset.normalized_adjacency(&model.adjacency)),
        AdjacencyMode::Static => {
            let a = model
                .static_adjacency
                .clone()
                .ok_or_else(|| Error::Contract("static model without its adjacency".into()))?;
            Some(vec![a; dataset.len()])
        }
        AdjacencyMode::None => None,
    };
    let targets = dataset
        .flows
        .iter()
        .map(|row| row.iter().map(|&v| model.normalizer.normalize_target(v)).collect())
        .collect();
    Ok(Prepared {
        inputs,
        adjacency,
        targets,
        windows,
        input_length: model.config.input_length,
        horizon: model.config.horizon,
    })
}

#[derive(Clone, Debug)]
pub struct ForecastFit {
    pub model: Forecaster,
    pub outcome: TrainOutcome,
    pub data: Prepared,
    pub split: Split,
}

/// Splits the windows, fits normalization and adjacency on the training
/// windows, and trains a new forecaster.
pub fn fit_forecaster(dataset: &Dataset, windows: Vec<WindowIndex>, ratios: SplitRatios, setup: &ForecastSetup, seed: u64) -> Result<ForecastFit> {
    let positions: Vec<usize> = (0..windows.len()).collect();
    let split = split(&positions, ratios, seed)?;
    if split.train.is_empty() {
        return Err(Error::Validation("no training windows".into()));
    }
    let (l, p) = (setup.input_length, setup.horizon);
    let input_hours = window_hours(&windows, &split.train, |w| w.start..w.start + l);
    let all_hours = window_hours(&windows, &split.train, |w| w.start..w.start + l + p);

    let set = FeatureSet {
        movement: setup.movement_features,
        evacuation: false,
    };
    let options = setup.adjacency.resolve(dataset, &input_hours)?;
    let mut config = ModelConfig::new(dataset.node_count(), set.width(), setup.variant);
    config.hidden_size = setup.hidden_size;
    config.input_length = l;
    config.horizon = p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Forecaster::new(setup.variant, config, set.names(), options, &mut rng)?;
    if setup.variant == ModelVariant::GcnLstm {
        model.static_adjacency = Some(dataset.static_adjacency(&input_hours, &options)?);
    }
    let inputs = dataset.inputs(set)?;
    model.normalizer = Normalizer::fit(
        input_hours.iter().map(|&h| &inputs[h]),
        all_hours.iter().flat_map(|&h| dataset.flows[h].iter().copied()),
    )?;
    let data = prepare_forecaster(&model, dataset, windows)?;
    let mut learner = ForecastLearner { model, data: &data };
    let outcome = train(&mut learner, &split.train, &split.validation, &setup.training, seed)?;
    let model = learner.model;
    Ok(ForecastFit {
        model,
        outcome,
        data,
        split,
    })
}

pub fn evaluate_forecaster(model: &Forecaster, data: &Prepared, positions: &[usize], detector_ids: &[String]) -> Result<EvalReport> {
    if positions.is_empty() {
        return Err(Error::Validation("no windows to evaluate".into()));
    }
    EvalReport::from_predictions(&predict_windows(model, data, positions, detector_ids)?, data.horizon)
}

#[derive(Clone, Debug)]
pub struct TransferFit {
    pub model: TransferModel,
    pub outcome: TrainOutcome,
    pub data: TransferPrepared,
    pub split: Split,
}

/// Trains a transfer model on top of the frozen `pretrained` forecaster.
/// `dataset` must carry evacuation features.
pub fn fit_transfer_model(
    pretrained: Forecaster,
    dataset: &Dataset,
    windows: Vec<WindowIndex>,
    ratios: SplitRatios,
    setup: &TransferSetup,
    seed: u64,
) -> Result<TransferFit> {
    let positions: Vec<usize> = (0..windows.len()).collect();
    let split = split(&positions, ratios, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = TransferModel::new(pretrained, setup.feature_set(), setup.hidden_size, &mut rng)?;
    let train_windows: Vec<&WindowIndex> = split.train.iter().map(|&w| &windows[w]).collect();
    model.fit_normalizer(dataset, &train_windows)?;
    let data = model.prepare(dataset, windows)?;
    let (model, outcome) = fit_transfer(model, &data, &split.train, &split.validation, &setup.training, seed)?;
    Ok(TransferFit {
        model,
        outcome,
        data,
        split,
    })
}

pub fn evaluate_transfer(model: &TransferModel, data: &TransferPrepared, positions: &[usize], detector_ids: &[String]) -> Result<EvalReport> {
    if positions.is_empty() {
        return Err(Error::Validation("no windows to evaluate".into()));
    }
    EvalReport::from_predictions(&model.predict_windows(data, positions, detector_ids)?, data.branch.horizon)
}

/// First hour of `dataset` at or after `t`.
pub fn first_hour_from(dataset: &Dataset, t: NaiveDateTime) -> Option<usize> {
    let i = dataset.hours.partition_point(|h| *h < t);
    (i < dataset.len()).then_some(i)
}
