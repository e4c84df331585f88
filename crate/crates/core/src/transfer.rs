//! Transfer learning for the evacuation period.
//!
//! Four parts: a frozen pretrained forecaster, an LSTM branch over traffic
//! plus evacuation features with its own head, a sigmoid control gate fed
//! by the branch's final hidden state, and an output that adds the gated
//! pretrained prediction to the branch prediction:
//!
//! ```text
//! y = sigmoid(h W_c + b_c) * y_pretrained + (h W_o + b_o)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::NaiveDateTime;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureSet};
use crate::detector::{format_timestamp, parse_timestamp};
use crate::error::{Error, Result};
use crate::graph::{haversine_miles, with_path, RoadGraph};
use crate::models::{encode, AdjacencyMode, Batch, DgcnLstmParams, Forecaster, ModelConfig, Normalizer, ParamVars, PARAM_NAMES};
use crate::movement::HourlyMovement;
use crate::tensor::{uniform_fan_in, Checkpoint, Parameter, Tape, Tensor, Var};
use crate::training::{prediction_rows, train, Learner, PredictionRow, Prepared, TrainConfig, TrainOutcome, WindowIndex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvacFeatureRow {
    pub detector_id: String,
    pub timestamp: NaiveDateTime,
    /// Negative after landfall.
    pub time_to_landfall_hours: f64,
    pub distance_to_evac_zone_miles: f64,
    pub population_under_orders: f64,
    pub fb_inflow: f64,
    pub fb_outflow: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvacFeatureFrame {
    pub rows: Vec<EvacFeatureRow>,
}

impl EvacFeatureFrame {
    /// Population under orders never decreases and distance is constant,
    /// per detector.
    pub fn validate(&self) -> Result<()> {
        let mut by_detector: BTreeMap<&str, Vec<&EvacFeatureRow>> = BTreeMap::new();
        for r in &self.rows {
            by_detector.entry(&r.detector_id).or_default().push(r);
        }
        for (id, mut rows) in by_detector {
            rows.sort_by_key(|r| r.timestamp);
            for w in rows.windows(2) {
                if w[1].population_under_orders < w[0].population_under_orders {
                    return Err(Error::Validation(format!(
                        "{id}: population under orders decreases at {}",
                        w[1].timestamp
                    )));
                }
                if w[1].distance_to_evac_zone_miles != w[0].distance_to_evac_zone_miles {
                    return Err(Error::Validation(format!("{id}: distance to evacuation zone changes over time")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvacuationOrder {
    pub time: NaiveDateTime,
    pub population: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvacuationSchedule {
    pub landfall: NaiveDateTime,
    /// `(latitude, longitude)` of evacuation zone reference points.
    pub zones: Vec<(f64, f64)>,
    pub orders: Vec<EvacuationOrder>,
}

/// Evacuation features for every detector of `graph` at every hour.
/// Movement hours without a record get zero.
pub fn evac_feature_frame(
    graph: &RoadGraph,
    hours: &[NaiveDateTime],
    schedule: &EvacuationSchedule,
    movement: &[HourlyMovement],
) -> Result<EvacFeatureFrame> {
    if schedule.zones.is_empty() {
        return Err(Error::Validation("evacuation schedule has no zones".into()));
    }
    if schedule.orders.iter().any(|o| !(o.population >= 0.0)) {
        return Err(Error::Validation("order populations must be non-negative".into()));
    }
    let moves: HashMap<(&str, NaiveDateTime), (f64, f64)> = movement
        .iter()
        .map(|m| ((m.detector_id.as_str(), m.timestamp), (m.inflow, m.outflow)))
        .collect();
    let mut rows = Vec::with_capacity(graph.node_count() * hours.len());
    for node in graph.nodes() {
        let distance = schedule
            .zones
            .iter()
            .map(|&(lat, lon)| haversine_miles(node.latitude, node.longitude, lat, lon))
            .fold(f64::INFINITY, f64::min);
        for &t in hours {
            let population = schedule.orders.iter().filter(|o| o.time <= t).map(|o| o.population).sum();
            let (fb_inflow, fb_outflow) = moves.get(&(node.detector_id.as_str(), t)).copied().unwrap_or_default();
            rows.push(EvacFeatureRow {
                detector_id: node.detector_id.clone(),
                timestamp: t,
                time_to_landfall_hours: (schedule.landfall - t).num_seconds() as f64 / 3600.0,
                distance_to_evac_zone_miles: distance,
                population_under_orders: population,
                fb_inflow,
                fb_outflow,
            });
        }
    }
    Ok(EvacFeatureFrame { rows })
}

#[derive(Debug, Serialize, Deserialize)]
struct EvacCsvRow {
    detector_id: String,
    timestamp: String,
    time_to_landfall: f64,
    distance_to_evac_zone: f64,
    population_under_orders: f64,
    fb_inflow: f64,
    fb_outflow: f64,
}

pub fn write_evac_csv(frame: &EvacFeatureFrame, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| with_path(e, path))?;
    for r in &frame.rows {
        w.serialize(EvacCsvRow {
            detector_id: r.detector_id.clone(),
            timestamp: format_timestamp(r.timestamp),
            time_to_landfall: r.time_to_landfall_hours,
            distance_to_evac_zone: r.distance_to_evac_zone_miles,
            population_under_orders: r.population_under_orders,
            fb_inflow: r.fb_inflow,
            fb_outflow: r.fb_outflow,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_evac_csv(path: &Path) -> Result<EvacFeatureFrame> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| with_path(e, path))?;
    let mut rows = Vec::new();
    for row in reader.deserialize::<EvacCsvRow>() {
        let r = row.map_err(|e| with_path(e, path))?;
        rows.push(EvacFeatureRow {
            detector_id: r.detector_id,
            timestamp: parse_timestamp(&r.timestamp)?,
            time_to_landfall_hours: r.time_to_landfall,
            distance_to_evac_zone_miles: r.distance_to_evac_zone,
            population_under_orders: r.population_under_orders,
            fb_inflow: r.fb_inflow,
            fb_outflow: r.fb_outflow,
        });
    }
    let frame = EvacFeatureFrame { rows };
    frame.validate()?;
    Ok(frame)
}

/// `sigmoid(context W + b)`.
pub fn control_gate(context: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let g = control_gate_tape(&tape, tape.constant(context.clone()), tape.constant(weight.clone()), tape.constant(bias.clone()))?;
    Ok(tape.value(g))
}

pub fn control_gate_tape(tape: &Tape, context: Var, weight: Var, bias: Var) -> Result<Var> {
    tape.sigmoid(tape.add(tape.matmul(context, weight)?, bias)?)
}

/// Transfer output on a tape. `vars` holds the seven branch tensors in
/// [`PARAM_NAMES`] order followed by the control weight and bias;
/// `pretrained` is the frozen model's `(B * N) x p` prediction.
pub fn transfer_forward_tape(tape: &Tape, vars: &[Var], branch_config: &ModelConfig, batch: &Batch, pretrained: Var) -> Result<Var> {
    if vars.len() != PARAM_NAMES.len() + 2 {
        return Err(Error::Contract(format!("transfer model has 9 tensors, got {}", vars.len())));
    }
    let pv = ParamVars::from_slice(&vars[..7]);
    let h = encode(tape, &pv, branch_config, batch)?;
    let branch = tape.add(tape.matmul(h, pv.head_weight)?, pv.head_bias)?;
    let gate = control_gate_tape(tape, h, vars[7], vars[8])?;
    tape.add(tape.mul(gate, pretrained)?, branch)
}

pub const TRANSFER_KIND: &str = "evacflow.transfer";

#[derive(Clone, Debug, PartialEq)]
pub struct TransferModel {
    pub pretrained: Forecaster,
    /// SHA-256 of the pretrained model's canonical checkpoint.
    pub pretrained_hash: String,
    pub branch_config: ModelConfig,
    pub feature_set: FeatureSet,
    /// Branch input normalization; the target scale is the pretrained
    /// model's.
    pub normalizer: Normalizer,
    trainable: Vec<Parameter>,
}

impl TransferModel {
    pub fn new<R: Rng + ?Sized>(pretrained: Forecaster, feature_set: FeatureSet, hidden_size: usize, rng: &mut R) -> Result<Self> {
        let branch_config = ModelConfig {
            node_count: pretrained.config.node_count,
            input_feature_count: feature_set.width(),
            hidden_size,
            input_length: pretrained.config.input_length,
            horizon: pretrained.config.horizon,
            adjacency_mode: AdjacencyMode::None,
        };
        let mut trainable = DgcnLstmParams::init(&branch_config, rng)?.as_slice().to_vec();
        trainable.push(Parameter::new(
            "control.weight",
            uniform_fan_in(rng, hidden_size, branch_config.horizon, hidden_size),
        ));
        trainable.push(Parameter::new("control.bias", Tensor::zeros(&[1, branch_config.horizon])));
        let mut normalizer = Normalizer::identity(branch_config.input_feature_count);
        normalizer.target_mean = pretrained.normalizer.target_mean;
        normalizer.target_std = pretrained.normalizer.target_std;
        Ok(TransferModel {
            pretrained_hash: pretrained.to_checkpoint()?.content_hash()?,
            pretrained,
            branch_config,
            feature_set,
            normalizer,
            trainable,
        })
    }

    pub fn trainable(&self) -> &[Parameter] {
        &self.trainable
    }

    pub fn trainable_mut(&mut self) -> &mut [Parameter] {
        &mut self.trainable
    }

    /// Current hash of the pretrained model.
    pub fn pretrained_digest(&self) -> Result<String> {
        self.pretrained.to_checkpoint()?.content_hash()
    }

    /// Fits the branch input normalization on the input hours of `windows`.
    pub fn fit_normalizer(&mut self, dataset: &Dataset, windows: &[&WindowIndex]) -> Result<()> {
        let inputs = dataset.inputs(self.feature_set)?;
        let hours = input_hours(windows, self.branch_config.input_length);
        let fitted = Normalizer::fit(hours.iter().map(|&h| &inputs[h]), [0.0])?;
        self.normalizer.feature_mean = fitted.feature_mean;
        self.normalizer.feature_std = fitted.feature_std;
        Ok(())
    }

    /// Normalized branch inputs, targets in the pretrained scale, and the
    /// frozen model's cached predictions for every window.
    pub fn prepare(&self, dataset: &Dataset, windows: Vec<WindowIndex>) -> Result<TransferPrepared> {
        let pre = &self.pretrained;
        let pre_inputs = dataset
            .inputs(FeatureSet::from_names(&pre.feature_names)?)?
            .iter()
            .map(|x| pre.normalizer.normalize_features(x))
            .collect::<Result<Vec<_>>>()?;
        let pre_adj = match pre.config.adjacency_mode {
            AdjacencyMode::Dynamic => Some(dataset.normalized_adjacency(&pre.adjacency)),
            AdjacencyMode::Static => {
                let a = pre
                    .static_adjacency
                    .clone()
                    .ok_or_else(|| Error::Contract("static model without its adjacency".into()))?;
                Some(vec![a; dataset.len()])
            }
            AdjacencyMode::None => None,
        };
        let targets: Vec<Vec<f64>> = dataset
            .flows
            .iter()
            .map(|row| row.iter().map(|&v| self.normalizer.normalize_target(v)).collect())
            .collect();
        let frozen = Prepared {
            inputs: pre_inputs,
            adjacency: pre_adj,
            targets: targets.clone(),
            windows: windows.clone(),
            input_length: pre.config.input_length,
            horizon: pre.config.horizon,
        };
        let positions: Vec<usize> = (0..windows.len()).collect();
        let mut pretrained = Vec::with_capacity(windows.len());
        let n = dataset.node_count();
        for chunk in positions.chunks(64) {
            let (batch, _) = frozen.batch(chunk)?;
            let y = pre.predict_normalized(&batch)?;
            for b in 0..chunk.len() {
                let rows = y.data()[b * n * y.cols()..(b + 1) * n * y.cols()].to_vec();
                pretrained.push(Tensor::matrix(n, y.cols(), rows)?);
            }
        }
        let branch_inputs = dataset
            .inputs(self.feature_set)?
            .iter()
            .map(|x| self.normalizer.normalize_features(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransferPrepared {
            branch: Prepared {
                inputs: branch_inputs,
                adjacency: None,
                targets,
                windows,
                input_length: self.branch_config.input_length,
                horizon: self.branch_config.horizon,
            },
            pretrained,
        })
    }

    /// `(B * N) x p` normalized predictions, plus the gate and the two
    /// parts when `parts` is set.
    pub fn predict_normalized(&self, data: &TransferPrepared, positions: &[usize]) -> Result<Tensor> {
        let (batch, _) = data.branch.batch(positions)?;
        let tape = Tape::new();
        let vars: Vec<Var> = self.trainable.iter().map(|p| tape.constant(p.value.clone())).collect();
        let pre = tape.constant(data.stacked_pretrained(positions)?);
        let y = transfer_forward_tape(&tape, &vars, &self.branch_config, &batch, pre)?;
        Ok(tape.value(y))
    }

    /// Gate, pretrained prediction and branch prediction, computed
    /// separately.
    pub fn components(&self, data: &TransferPrepared, positions: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let (batch, _) = data.branch.batch(positions)?;
        let tape = Tape::new();
        let vars: Vec<Var> = self.trainable.iter().map(|p| tape.constant(p.value.clone())).collect();
        let pv = ParamVars::from_slice(&vars[..7]);
        let h = encode(&tape, &pv, &self.branch_config, &batch)?;
        let branch = tape.add(tape.matmul(h, pv.head_weight)?, pv.head_bias)?;
        let gate = control_gate_tape(&tape, h, vars[7], vars[8])?;
        Ok((tape.value(gate), data.stacked_pretrained(positions)?, tape.value(branch)))
    }

    pub fn predict_windows(&self, data: &TransferPrepared, positions: &[usize], detector_ids: &[String]) -> Result<Vec<PredictionRow>> {
        let mut out = Vec::new();
        for chunk in positions.chunks(64) {
            let (_, target) = data.branch.batch(chunk)?;
            let pred = self.predict_normalized(data, chunk)?;
            out.extend(prediction_rows(&self.normalizer, &data.branch, chunk, &pred, &target, detector_ids));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "branch_config": self.branch_config,
            "feature_set": self.feature_set,
            "feature_names": self.feature_set.names(),
            "pretrained_sha256": self.pretrained_hash,
        });
        let mut ck = Checkpoint::new(TRANSFER_KIND, meta);
        for p in &self.trainable {
            ck.push(format!("branch.{}", p.name), p.value.clone());
        }
        let n = &self.normalizer;
        let f = n.feature_mean.len();
        ck.push("branch_norm.feature_mean", Tensor::matrix(1, f, n.feature_mean.clone())?);
        ck.push("branch_norm.feature_std", Tensor::matrix(1, f, n.feature_std.clone())?);
        Ok(ck)
    }

    /// Rebuilds a transfer model, refusing a pretrained model whose hash
    /// differs from the one recorded at training time.
    pub fn from_checkpoint(ck: &Checkpoint, pretrained: Forecaster) -> Result<Self> {
        if ck.kind != TRANSFER_KIND {
            return Err(Error::Checkpoint(format!("expected a transfer checkpoint, found `{}`", ck.kind)));
        }
        let field = |k: &str| {
            ck.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata is missing `{k}`")))
        };
        let expected: String = serde_json::from_value(field("pretrained_sha256")?)?;
        let actual = pretrained.to_checkpoint()?.content_hash()?;
        if expected != actual {
            return Err(Error::Checkpoint(format!(
                "pretrained model hash {actual} does not match the recorded {expected}"
            )));
        }
        let branch_config: ModelConfig = serde_json::from_value(field("branch_config")?)?;
        let feature_set: FeatureSet = serde_json::from_value(field("feature_set")?)?;
        let names = PARAM_NAMES.iter().copied().chain(["control.weight", "control.bias"]);
        let trainable = names
            .map(|n| Ok(Parameter::new(n, ck.tensor(&format!("branch.{n}"))?.clone())))
            .collect::<Result<Vec<_>>>()?;
        DgcnLstmParams::from_tensors(&branch_config, trainable[..7].iter().map(|p| p.value.clone()).collect())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let normalizer = Normalizer {
            feature_mean: ck.tensor("branch_norm.feature_mean")?.data().to_vec(),
            feature_std: ck.tensor("branch_norm.feature_std")?.data().to_vec(),
            target_mean: pretrained.normalizer.target_mean,
            target_std: pretrained.normalizer.target_std,
        };
        Ok(TransferModel {
            pretrained,
            pretrained_hash: expected,
            branch_config,
            feature_set,
            normalizer,
            trainable,
        })
    }
}

fn input_hours(windows: &[&WindowIndex], l: usize) -> Vec<usize> {
    let mut hours: Vec<usize> = windows.iter().flat_map(|w| w.start..w.start + l).collect();
    hours.sort_unstable();
    hours.dedup();
    hours
}

/// Branch data plus the frozen model's per-window predictions.
#[derive(Clone, Debug)]
pub struct TransferPrepared {
    pub branch: Prepared,
    /// `N x p` normalized prediction per window.
    pub pretrained: Vec<Tensor>,
}

impl TransferPrepared {
    fn stacked_pretrained(&self, positions: &[usize]) -> Result<Tensor> {
        let p = self.branch.horizon;
        let mut data = Vec::new();
        for &w in positions {
            data.extend_from_slice(
                self.pretrained
                    .get(w)
                    .ok_or_else(|| Error::Contract(format!("window {w} out of range")))?
                    .data(),
            );
        }
        Tensor::matrix(data.len() / p, p, data)
    }
}

pub struct TransferLearner<'a> {
    pub model: TransferModel,
    pub data: &'a TransferPrepared,
}

impl Learner for TransferLearner<'_> {
    fn parameters(&self) -> &[Parameter] {
        &self.model.trainable
    }

    fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.model.trainable
    }

    fn loss(&self, windows: &[usize], grad: bool) -> Result<(f64, Vec<Option<Tensor>>)> {
        let (batch, target) = self.data.branch.batch(windows)?;
        let tape = Tape::new();
        let vars: Vec<Var> = self
            .model
            .trainable
            .iter()
            .map(|p| if grad { tape.param(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        let pre = tape.constant(self.data.stacked_pretrained(windows)?);
        let y = transfer_forward_tape(&tape, &vars, &self.model.branch_config, &batch, pre)?;
        let loss = tape.mse_loss(y, tape.constant(target))?;
        let value = tape.with_value(loss, |t| t.data()[0]);
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.get(v).cloned()).collect()))
    }
}

/// Trains the branch and control layer. The pretrained model's hash is
/// checked before and after.
pub fn fit_transfer(
    model: TransferModel,
    data: &TransferPrepared,
    train_set: &[usize],
    val: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<(TransferModel, TrainOutcome)> {
    if train_set.is_empty() {
        return Err(Error::Validation("no evacuation training windows".into()));
    }
    let before = model.pretrained_digest()?;
    if before != model.pretrained_hash {
        return Err(Error::Contract("pretrained model changed since the transfer model was built".into()));
    }
    let mut learner = TransferLearner { model, data };
    let outcome = train(&mut learner, train_set, val, config, seed)?;
    if learner.model.pretrained_digest()? != before {
        return Err(Error::Contract("pretrained parameters changed during transfer training".into()));
    }
    Ok((learner.model, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{chain, AdjacencyOptions, Directionality, EdgeWeighting};
    use crate::models::ModelVariant;
    use crate::tensor::grad_check;
    use chrono::{Duration, NaiveDate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pretrained(rng: &mut ChaCha8Rng) -> Forecaster {
        let cfg = ModelConfig {
            node_count: 5,
            input_feature_count: 11,
            hidden_size: 4,
            input_length: 3,
            horizon: 2,
            adjacency_mode: AdjacencyMode::Dynamic,
        };
        let opts = AdjacencyOptions {
            weighting: EdgeWeighting::Affinity { tau_minutes: 2.0 },
            directionality: Directionality::Directed,
        };
        Forecaster::new(ModelVariant::DgcnLstm, cfg, FeatureSet::TRAFFIC.names(), opts, rng).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn branch_batch(rng: &mut ChaCha8Rng, f: usize) -> Batch {
        let w: Vec<Tensor> = (0..3).map(|_| random(rng, 5, f)).collect();
        Batch::stack(&[&w], None).unwrap()
    }

    #[test]
    fn gate_examples() {
        let ctx = Tensor::from_rows(&[&[0.3, -2.0], &[5.0, 1.0]]).unwrap();
        let g = control_gate(&ctx, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[1, 3])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
        let g = control_gate(&ctx, &Tensor::zeros(&[2, 3]), &Tensor::full(&[1, 3], -30.0)).unwrap();
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let g = control_gate(&random(&mut rng, 4, 3).map(|v| v * 5.0), &random(&mut rng, 3, 2), &random(&mut rng, 1, 2)).unwrap();
            assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn saturated_gates_isolate_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fs = FeatureSet { movement: true, evacuation: true };
        let mut m = TransferModel::new(pretrained(&mut rng), fs, 4, &mut rng).unwrap();
        let batch = branch_batch(&mut rng, 16);
        let pre = random(&mut rng, 5, 2);
        let run = |m: &TransferModel| {
            let tape = Tape::new();
            let vars: Vec<Var> = m.trainable().iter().map(|p| tape.constant(p.value.clone())).collect();
            let y = transfer_forward_tape(&tape, &vars, &m.branch_config, &batch, tape.constant(pre.clone())).unwrap();
            tape.value(y)
        };
        // gate to 0: branch alone
        m.trainable_mut()[8].value = Tensor::full(&[1, 2], -800.0);
        m.trainable_mut()[7].value = Tensor::zeros(&[4, 2]);
        let y = run(&m);
        let tape = Tape::new();
        let vars: Vec<Var> = m.trainable().iter().map(|p| tape.constant(p.value.clone())).collect();
        let pv = ParamVars::from_slice(&vars[..7]);
        let h = encode(&tape, &pv, &m.branch_config, &batch).unwrap();
        let b = tape.value(tape.add(tape.matmul(h, pv.head_weight).unwrap(), pv.head_bias).unwrap());
        assert_eq!(y, b);
        // gate to 1 and branch head zeroed: pretrained alone
        m.trainable_mut()[8].value = Tensor::full(&[1, 2], 800.0);
        m.trainable_mut()[5].value = Tensor::zeros(&[4, 2]);
        m.trainable_mut()[6].value = Tensor::zeros(&[1, 2]);
        assert_eq!(run(&m), pre);
    }

    #[test]
    fn gradient_check_trainable_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = TransferModel::new(pretrained(&mut rng), FeatureSet { movement: true, evacuation: true }, 3, &mut rng).unwrap();
        let batch = branch_batch(&mut rng, 16);
        let pre = random(&mut rng, 5, 2);
        let target = random(&mut rng, 5, 2);
        let points: Vec<Tensor> = m.trainable().iter().map(|p| p.value.clone()).collect();
        let report = grad_check(
            |tape, vars| {
                let y = transfer_forward_tape(tape, vars, &m.branch_config, &batch, tape.constant(pre.clone()))?;
                tape.mse_loss(y, tape.constant(target.clone()))
            },
            &points,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_checks_pretrained_hash() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pre = pretrained(&mut rng);
        let m = TransferModel::new(pre.clone(), FeatureSet { movement: false, evacuation: true }, 3, &mut rng).unwrap();
        let ck = Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
        assert_eq!(TransferModel::from_checkpoint(&ck, pre.clone()).unwrap(), m);
        let mut other = pre;
        other.params.get_mut("head.bias").unwrap().data_mut()[0] += 1e-9;
        let err = TransferModel::from_checkpoint(&ck, other).unwrap_err();
        assert!(err.to_string().contains("hash"));
    }

    #[test]
    fn evac_frame_features() {
        let g = chain(3, 2.0);
        let t0 = NaiveDate::from_ymd_opt(2022, 9, 26).unwrap().and_hms_opt(3, 0, 0).unwrap();
        let hours: Vec<NaiveDateTime> = (0..10).map(|h| t0 + Duration::hours(h)).collect();
        let schedule = EvacuationSchedule {
            landfall: t0 + Duration::hours(5),
            zones: vec![(28.5, -81.4)],
            orders: vec![
                EvacuationOrder { time: t0 + Duration::hours(2), population: 1000.0 },
                EvacuationOrder { time: t0 + Duration::hours(4), population: 500.0 },
            ],
        };
        let f = evac_feature_frame(&g, &hours, &schedule, &[]).unwrap();
        f.validate().unwrap();
        let d0: Vec<&EvacFeatureRow> = f.rows.iter().filter(|r| r.detector_id == "D0").collect();
        assert_eq!(d0[0].time_to_landfall_hours, 5.0);
        assert_eq!(d0[9].time_to_landfall_hours, -4.0);
        assert_eq!(d0[1].population_under_orders, 0.0);
        assert_eq!(d0[2].population_under_orders, 1000.0);
        assert_eq!(d0[9].population_under_orders, 1500.0);
        assert!(d0[0].distance_to_evac_zone_miles < 1e-9);

        let mut bad = f.clone();
        bad.rows[3].population_under_orders = 0.0;
        assert!(bad.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("evac.csv");
        write_evac_csv(&f, &p).unwrap();
        assert_eq!(read_evac_csv(&p).unwrap(), f);
    }
}
