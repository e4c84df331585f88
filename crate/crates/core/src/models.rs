//! DGCN-LSTM forecaster and its LSTM / GCN-LSTM baselines.
//!
//! Every timestep runs one graph convolution `tanh(A_t X_t W + b)` followed
//! by an LSTM cell whose weights are shared by all nodes. A per-node affine
//! head maps the final hidden state to `p` flows.
//!
//! Computation is batched: a batch of `B` windows is stacked into `B * N`
//! rows and graph propagation multiplies each `N`-row block by its own
//! adjacency.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AdjacencyOptions, Directionality, EdgeWeighting};
use crate::tensor::{uniform_fan_in, Checkpoint, Parameter, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyMode {
    /// One adjacency per input hour.
    #[default]
    Dynamic,
    /// A single fixed adjacency.
    Static,
    /// No propagation; nodes are processed independently.
    None,
}

/// The three model families compared in the experiments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Lstm,
    GcnLstm,
    #[default]
    DgcnLstm,
}

impl ModelVariant {
    pub fn adjacency_mode(self) -> AdjacencyMode {
        match self {
            ModelVariant::Lstm => AdjacencyMode::None,
            ModelVariant::GcnLstm => AdjacencyMode::Static,
            ModelVariant::DgcnLstm => AdjacencyMode::Dynamic,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Lstm => "LSTM",
            ModelVariant::GcnLstm => "GCN-LSTM",
            ModelVariant::DgcnLstm => "DGCN-LSTM",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub node_count: usize,
    pub input_feature_count: usize,
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
    #[serde(default = "default_len")]
    pub input_length: usize,
    #[serde(default = "default_len")]
    pub horizon: usize,
    #[serde(default)]
    pub adjacency_mode: AdjacencyMode,
}

fn default_hidden() -> usize {
    64
}

fn default_len() -> usize {
    6
}

impl ModelConfig {
    pub fn new(node_count: usize, input_feature_count: usize, variant: ModelVariant) -> Self {
        ModelConfig {
            node_count,
            input_feature_count,
            hidden_size: default_hidden(),
            input_length: default_len(),
            horizon: default_len(),
            adjacency_mode: variant.adjacency_mode(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("node_count", self.node_count),
            ("input_feature_count", self.input_feature_count),
            ("hidden_size", self.hidden_size),
            ("input_length", self.input_length),
            ("horizon", self.horizon),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Validation(format!("model config: {name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Parameter names, in storage order.
pub const PARAM_NAMES: [&str; 7] = [
    "gc.weight",
    "gc.bias",
    "lstm.w_input",
    "lstm.w_hidden",
    "lstm.bias",
    "head.weight",
    "head.bias",
];

/// Trainable tensors of one forecaster. LSTM gate blocks are packed
/// column-wise in the order input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct DgcnLstmParams {
    params: Vec<Parameter>,
}

impl DgcnLstmParams {
    /// Uniform fan-in initialization; forget-gate biases start at 1.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (f, h, p) = (config.input_feature_count, config.hidden_size, config.horizon);
        let mut lstm_bias = Tensor::zeros(&[1, 4 * h]);
        for j in h..2 * h {
            lstm_bias.data_mut()[j] = 1.0;
        }
        let tensors = vec![
            uniform_fan_in(rng, f, h, f),
            Tensor::zeros(&[1, h]),
            uniform_fan_in(rng, h, 4 * h, h),
            uniform_fan_in(rng, h, 4 * h, h),
            lstm_bias,
            uniform_fan_in(rng, h, p, h),
            Tensor::zeros(&[1, p]),
        ];
        Self::from_tensors(config, tensors)
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let shapes = Self::shapes(config);
        Self::from_tensors(config, shapes.iter().map(|s| Tensor::zeros(s)).collect())
    }

    fn shapes(config: &ModelConfig) -> [[usize; 2]; 7] {
        let (f, h, p) = (config.input_feature_count, config.hidden_size, config.horizon);
        [[f, h], [1, h], [h, 4 * h], [h, 4 * h], [1, 4 * h], [h, p], [1, p]]
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = Self::shapes(config);
        if tensors.len() != shapes.len() {
            return Err(Error::shape("params", format!("expected 7 tensors, got {}", tensors.len())));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(PARAM_NAMES) {
            if t.shape() != s {
                return Err(Error::shape("params", format!("`{name}` is {:?}, expected {s:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Validation(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(DgcnLstmParams {
            params: tensors.into_iter().zip(PARAM_NAMES).map(|(t, n)| Parameter::new(n, t)).collect(),
        })
    }

    pub fn as_slice(&self) -> &[Parameter] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// Registers the parameters on `tape`, tracked or as constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> ParamVars {
        let v: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        ParamVars::from_slice(&v)
    }
}

/// Tape handles for the tensors of [`DgcnLstmParams`].
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub gc_weight: Var,
    pub gc_bias: Var,
    pub lstm: LstmVars,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ParamVars {
    /// From seven handles in [`PARAM_NAMES`] order.
    pub fn from_slice(v: &[Var]) -> Self {
        ParamVars {
            gc_weight: v[0],
            gc_bias: v[1],
            lstm: LstmVars {
                w_input: v[2],
                w_hidden: v[3],
                bias: v[4],
            },
            head_weight: v[5],
            head_bias: v[6],
        }
    }

    pub fn to_vec(&self) -> Vec<Var> {
        vec![
            self.gc_weight,
            self.gc_bias,
            self.lstm.w_input,
            self.lstm.w_hidden,
            self.lstm.bias,
            self.head_weight,
            self.head_bias,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
}

/// A batch of windows in stacked form.
#[derive(Clone, Debug)]
pub struct Batch {
    /// One `(B * N) x F` tensor per input hour.
    pub steps: Vec<Tensor>,
    /// Per input hour, one `N x N` block per window; `None` skips
    /// propagation.
    pub adjacency: Vec<Option<Rc<[Tensor]>>>,
    pub batch_size: usize,
}

impl Batch {
    /// Stacks single windows. `windows[b][t]` is the `N x F` input of
    /// window `b` at hour `t`; `adjacency[b][t]` its normalized adjacency.
    pub fn stack(windows: &[&[Tensor]], adjacency: Option<&[&[Tensor]]>) -> Result<Self> {
        let b = windows.len();
        let l = windows.first().map_or(0, |w| w.len());
        if b == 0 || l == 0 || windows.iter().any(|w| w.len() != l) {
            return Err(Error::Contract("batch needs windows of equal, non-zero length".into()));
        }
        if let Some(adj) = adjacency {
            if adj.len() != b || adj.iter().any(|a| a.len() != l) {
                return Err(Error::Contract("one adjacency per window and hour is required".into()));
            }
        }
        let (n, f) = windows[0][0].dims2()?;
        let mut steps = Vec::with_capacity(l);
        let mut blocks = Vec::with_capacity(l);
        for t in 0..l {
            let mut data = Vec::with_capacity(b * n * f);
            for w in windows {
                if w[t].shape() != [n, f] {
                    return Err(Error::shape("batch", format!("{:?} vs {:?}", w[t].shape(), [n, f])));
                }
                data.extend_from_slice(w[t].data());
            }
            steps.push(Tensor::matrix(b * n, f, data)?);
            blocks.push(adjacency.map(|adj| adj.iter().map(|a| a[t].clone()).collect::<Rc<[Tensor]>>()));
        }
        Ok(Batch {
            steps,
            adjacency: blocks,
            batch_size: b,
        })
    }
}

/// `tanh(A X W + b)`; `A` is data and receives no gradient.
pub fn dgcn_layer(tape: &Tape, x: Var, adjacency: Option<&Rc<[Tensor]>>, weight: Var, bias: Var) -> Result<Var> {
    let mixed = match adjacency {
        Some(a) => tape.propagate(Rc::clone(a), x)?,
        None => x,
    };
    let z = tape.matmul(mixed, weight)?;
    tape.tanh(tape.add(z, bias)?)
}

/// One LSTM step for every row of `x`.
pub fn lstm_cell(tape: &Tape, x: Var, h: Var, c: Var, w: &LstmVars) -> Result<(Var, Var)> {
    let hidden = tape.shape(h)[1];
    let z = tape.add(tape.matmul(x, w.w_input)?, tape.matmul(h, w.w_hidden)?)?;
    let z = tape.add(z, w.bias)?;
    let i = tape.sigmoid(tape.slice_cols(z, 0, hidden)?)?;
    let f = tape.sigmoid(tape.slice_cols(z, hidden, hidden)?)?;
    let g = tape.tanh(tape.slice_cols(z, 2 * hidden, hidden)?)?;
    let o = tape.sigmoid(tape.slice_cols(z, 3 * hidden, hidden)?)?;
    let c_next = tape.add(tape.mul(f, c)?, tape.mul(i, g)?)?;
    let h_next = tape.mul(o, tape.tanh(c_next)?)?;
    Ok((h_next, c_next))
}

fn check_batch(config: &ModelConfig, batch: &Batch) -> Result<()> {
    if batch.steps.len() != config.input_length {
        return Err(Error::Contract(format!(
            "window has {} hours, model expects {}",
            batch.steps.len(),
            config.input_length
        )));
    }
    let rows = batch.batch_size * config.node_count;
    for s in &batch.steps {
        if s.shape() != [rows, config.input_feature_count] {
            return Err(Error::shape(
                "forward",
                format!(
                    "features {:?}, expected [{rows}, {}]",
                    s.shape(),
                    config.input_feature_count
                ),
            ));
        }
    }
    for a in &batch.adjacency {
        match (config.adjacency_mode, a) {
            (AdjacencyMode::None, Some(_)) => {
                return Err(Error::Contract("adjacency supplied to a model without propagation".into()))
            }
            (AdjacencyMode::Dynamic | AdjacencyMode::Static, None) => {
                return Err(Error::Contract("graph model needs an adjacency for every hour".into()))
            }
            (_, Some(blocks)) => {
                let n = config.node_count;
                if blocks.len() != batch.batch_size || blocks.iter().any(|b| b.shape() != [n, n]) {
                    return Err(Error::shape("forward", format!("adjacency blocks must be {n}x{n}, one per window")));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Runs the recurrence and returns the final hidden state, `(B * N) x H`.
pub fn encode(tape: &Tape, vars: &ParamVars, config: &ModelConfig, batch: &Batch) -> Result<Var> {
    check_batch(config, batch)?;
    let rows = batch.batch_size * config.node_count;
    let mut h = tape.constant(Tensor::zeros(&[rows, config.hidden_size]));
    let mut c = h;
    for (x, adj) in batch.steps.iter().zip(&batch.adjacency) {
        let x = tape.constant(x.clone());
        let e = dgcn_layer(tape, x, adj.as_ref(), vars.gc_weight, vars.gc_bias)?;
        (h, c) = lstm_cell(tape, e, h, c, &vars.lstm)?;
    }
    Ok(h)
}

/// Batched forward pass on a tape, returning `(B * N) x p` flows.
pub fn forward_tape(tape: &Tape, vars: &ParamVars, config: &ModelConfig, batch: &Batch) -> Result<Var> {
    let h = encode(tape, vars, config, batch)?;
    tape.add(tape.matmul(h, vars.head_weight)?, vars.head_bias)
}

/// Adjacency supplied to a single-window forward pass.
#[derive(Clone, Copy, Debug)]
pub enum AdjacencyInput<'a> {
    Dynamic(&'a [Tensor]),
    Static(&'a Tensor),
    None,
}

/// Predicts `N x p` flows for one window of `N x F` inputs.
pub fn forward(params: &DgcnLstmParams, config: &ModelConfig, window: &[Tensor], adjacency: AdjacencyInput<'_>) -> Result<Tensor> {
    if window.len() != config.input_length {
        return Err(Error::Contract(format!(
            "window has {} hours, model expects {}",
            window.len(),
            config.input_length
        )));
    }
    let per_hour: Vec<Tensor> = match (config.adjacency_mode, adjacency) {
        (AdjacencyMode::Dynamic, AdjacencyInput::Dynamic(a)) => {
            if a.len() != window.len() {
                return Err(Error::Contract(format!("{} adjacencies for {} hours", a.len(), window.len())));
            }
            a.to_vec()
        }
        (AdjacencyMode::Static, AdjacencyInput::Static(a)) => vec![a.clone(); window.len()],
        (AdjacencyMode::None, _) => Vec::new(),
        (mode, _) => return Err(Error::Contract(format!("{mode:?} model given the wrong kind of adjacency"))),
    };
    let adj: Vec<&[Tensor]> = vec![&per_hour];
    let batch = Batch::stack(&[window], (!per_hour.is_empty()).then_some(&adj[..]))?;
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let out = forward_tape(&tape, &vars, config, &batch)?;
    Ok(tape.value(out))
}

/// The LSTM and GCN-LSTM baselines: the LSTM skips propagation (a per-node
/// dense layer); the GCN-LSTM applies one static adjacency at every hour.
pub fn baseline_forward(
    variant: ModelVariant,
    window: &[Tensor],
    adjacency: Option<&Tensor>,
    params: &DgcnLstmParams,
    config: &ModelConfig,
) -> Result<Tensor> {
    let mut config = *config;
    match variant {
        ModelVariant::Lstm => {
            config.adjacency_mode = AdjacencyMode::None;
            forward(params, &config, window, AdjacencyInput::None)
        }
        ModelVariant::GcnLstm => {
            config.adjacency_mode = AdjacencyMode::Static;
            let a = adjacency.ok_or_else(|| Error::Contract("GCN-LSTM needs a static adjacency".into()))?;
            forward(params, &config, window, AdjacencyInput::Static(a))
        }
        ModelVariant::DgcnLstm => Err(Error::Contract("DGCN-LSTM is not a baseline; use forward".into())),
    }
}

/// Per-feature z-scores for inputs and one z-score for the target flow,
/// fitted on training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Normalizer {
    pub fn identity(features: usize) -> Self {
        Normalizer {
            feature_mean: vec![0.0; features],
            feature_std: vec![1.0; features],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    /// Fits on `N x F` feature tensors and raw target values. Constant
    /// columns get a unit scale.
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a Tensor>, targets: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for t in features {
            let (rows, cols) = t.dims2()?;
            if sum.is_empty() {
                sum = vec![0.0; cols];
                sq = vec![0.0; cols];
            } else if sum.len() != cols {
                return Err(Error::shape("normalizer", format!("{cols} features vs {}", sum.len())));
            }
            for r in 0..rows {
                for (j, v) in t.row(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            count += rows;
        }
        let (mut tn, mut ts, mut tsq) = (0usize, 0.0, 0.0);
        for v in targets {
            tn += 1;
            ts += v;
            tsq += v * v;
        }
        if count == 0 || tn == 0 {
            return Err(Error::Validation("cannot fit normalization on empty data".into()));
        }
        let stats = |s: f64, q: f64, n: usize| {
            let mean = s / n as f64;
            let std = (q / n as f64 - mean * mean).max(0.0).sqrt();
            (mean, if std > 1e-9 * mean.abs().max(1.0) { std } else { 1.0 })
        };
        let (feature_mean, feature_std) = sum.iter().zip(&sq).map(|(&s, &q)| stats(s, q, count)).unzip();
        let (target_mean, target_std) = stats(ts, tsq, tn);
        Ok(Normalizer {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        })
    }

    pub fn normalize_features(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = x.dims2()?;
        if cols != self.feature_mean.len() {
            return Err(Error::shape(
                "normalize",
                format!("{cols} features, normalizer has {}", self.feature_mean.len()),
            ));
        }
        let mut out = x.clone();
        for r in 0..rows {
            for j in 0..cols {
                out.set(r, j, (x.at(r, j) - self.feature_mean[j]) / self.feature_std[j]);
            }
        }
        Ok(out)
    }

    pub fn normalize_target(&self, v: f64) -> f64 {
        (v - self.target_mean) / self.target_std
    }

    pub fn denormalize_target(&self, v: f64) -> f64 {
        v * self.target_std + self.target_mean
    }

    fn to_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let f = self.feature_mean.len();
        vec![
            (format!("{prefix}.feature_mean"), Tensor::matrix(1, f, self.feature_mean.clone()).unwrap()),
            (format!("{prefix}.feature_std"), Tensor::matrix(1, f, self.feature_std.clone()).unwrap()),
            (
                format!("{prefix}.target"),
                Tensor::matrix(1, 2, vec![self.target_mean, self.target_std]).unwrap(),
            ),
        ]
    }

    fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let t = ck.tensor(&format!("{prefix}.target"))?;
        if t.len() != 2 {
            return Err(Error::Checkpoint("target normalization must hold two values".into()));
        }
        Ok(Normalizer {
            feature_mean: ck.tensor(&format!("{prefix}.feature_mean"))?.data().to_vec(),
            feature_std: ck.tensor(&format!("{prefix}.feature_std"))?.data().to_vec(),
            target_mean: t.data()[0],
            target_std: t.data()[1],
        })
    }
}

pub const FORECASTER_KIND: &str = "evacflow.forecaster";

/// A forecaster with everything needed to predict from raw inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecaster {
    pub variant: ModelVariant,
    pub config: ModelConfig,
    pub params: DgcnLstmParams,
    pub normalizer: Normalizer,
    pub feature_names: Vec<String>,
    pub adjacency: AdjacencyOptions,
    /// The GCN-LSTM's fixed normalized adjacency.
    pub static_adjacency: Option<Tensor>,
}

impl Forecaster {
    pub fn new<R: Rng + ?Sized>(
        variant: ModelVariant,
        config: ModelConfig,
        feature_names: Vec<String>,
        adjacency: AdjacencyOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if config.adjacency_mode != variant.adjacency_mode() {
            return Err(Error::Validation(format!(
                "{} requires adjacency mode {:?}",
                variant.name(),
                variant.adjacency_mode()
            )));
        }
        if feature_names.len() != config.input_feature_count {
            return Err(Error::Validation(format!(
                "{} feature names for {} input features",
                feature_names.len(),
                config.input_feature_count
            )));
        }
        Ok(Forecaster {
            variant,
            params: DgcnLstmParams::init(&config, rng)?,
            normalizer: Normalizer::identity(config.input_feature_count),
            config,
            feature_names,
            adjacency,
            static_adjacency: None,
        })
    }

    /// Predictions in normalized target space, `(B * N) x p`.
    pub fn predict_normalized(&self, batch: &Batch) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let out = forward_tape(&tape, &vars, &self.config, batch)?;
        Ok(tape.value(out))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let (weighting, tau) = match self.adjacency.weighting {
            EdgeWeighting::Affinity { tau_minutes } => ("affinity", Some(tau_minutes)),
            EdgeWeighting::RawTravelTime => ("raw_travel_time", None),
        };
        let meta = serde_json::json!({
            "variant": self.variant,
            "config": self.config,
            "feature_names": self.feature_names,
            "weighting": weighting,
            "directionality": self.adjacency.directionality,
        });
        let mut ck = Checkpoint::new(FORECASTER_KIND, meta);
        for p in self.params.as_slice() {
            ck.push(p.name.clone(), p.value.clone());
        }
        for (n, t) in self.normalizer.to_tensors("norm") {
            ck.push(n, t);
        }
        if let Some(tau) = tau {
            ck.push("adjacency.tau", Tensor::scalar(tau));
        }
        if let Some(a) = &self.static_adjacency {
            ck.push("adjacency.static", a.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != FORECASTER_KIND {
            return Err(Error::Checkpoint(format!("expected a forecaster checkpoint, found `{}`", ck.kind)));
        }
        let meta = &ck.metadata;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata is missing `{k}`")))
        };
        let variant: ModelVariant = serde_json::from_value(field("variant")?)?;
        let config: ModelConfig = serde_json::from_value(field("config")?)?;
        config.validate()?;
        let feature_names: Vec<String> = serde_json::from_value(field("feature_names")?)?;
        let directionality: Directionality = serde_json::from_value(field("directionality")?)?;
        let weighting = match field("weighting")?.as_str() {
            Some("affinity") => EdgeWeighting::Affinity {
                tau_minutes: ck.tensor("adjacency.tau")?.data()[0],
            },
            Some("raw_travel_time") => EdgeWeighting::RawTravelTime,
            other => return Err(Error::Checkpoint(format!("unknown edge weighting {other:?}"))),
        };
        let tensors = PARAM_NAMES
            .iter()
            .map(|n| ck.tensor(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        let params = DgcnLstmParams::from_tensors(&config, tensors).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let normalizer = Normalizer::from_checkpoint(ck, "norm")?;
        if normalizer.feature_mean.len() != config.input_feature_count {
            return Err(Error::Checkpoint("normalizer width does not match the model".into()));
        }
        let static_adjacency = ck.tensor("adjacency.static").ok().cloned();
        Ok(Forecaster {
            variant,
            config,
            params,
            normalizer,
            feature_names,
            adjacency: AdjacencyOptions {
                weighting,
                directionality,
            },
            static_adjacency,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid_ref(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn small(n: usize, f: usize, h: usize, l: usize, p: usize, mode: AdjacencyMode) -> ModelConfig {
        ModelConfig {
            node_count: n,
            input_feature_count: f,
            hidden_size: h,
            input_length: l,
            horizon: p,
            adjacency_mode: mode,
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn row_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            a.set(i, i, 1.0);
            if i + 1 < n {
                a.set(i, i + 1, rng.gen_range(0.1..1.0));
            }
            let s: f64 = a.row(i).iter().sum();
            for j in 0..n {
                a.set(i, j, a.at(i, j) / s);
            }
        }
        a
    }

    #[test]
    fn dgcn_identity_and_zero_cases() {
        let tape = Tape::new();
        let x = Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.0], &[0.1, 0.3]]).unwrap();
        let xv = tape.constant(x.clone());
        let eye: Rc<[Tensor]> = vec![Tensor::eye(3)].into();
        let w = tape.constant(Tensor::eye(2));
        let b = tape.constant(Tensor::zeros(&[1, 2]));
        let h = tape.value(dgcn_layer(&tape, xv, Some(&eye), w, b).unwrap());
        assert_eq!(h, x.map(f64::tanh));

        let zeros = tape.constant(Tensor::zeros(&[3, 2]));
        let bias = tape.constant(Tensor::from_rows(&[&[0.3, -0.2]]).unwrap());
        let h = tape.value(dgcn_layer(&tape, zeros, Some(&eye), w, bias).unwrap());
        for r in 0..3 {
            assert_eq!(h.row(r), &[0.3f64.tanh(), (-0.2f64).tanh()]);
        }
    }

    #[test]
    fn dgcn_chain_by_hand() {
        // 3-node chain, 2 features, hidden 2
        let a = Tensor::from_rows(&[&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5], &[0.0, 0.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let w = Tensor::from_rows(&[&[0.1, -0.2], &[0.3, 0.4]]).unwrap();
        let b = Tensor::from_rows(&[&[0.05, -0.05]]).unwrap();
        // A X = [[2,3],[4,5],[5,6]]
        let ax: [[f64; 2]; 3] = [[2.0, 3.0], [4.0, 5.0], [5.0, 6.0]];
        let tape = Tape::new();
        let blocks: Rc<[Tensor]> = vec![a].into();
        let out = dgcn_layer(&tape, tape.constant(x), Some(&blocks), tape.constant(w), tape.constant(b)).unwrap();
        let out = tape.value(out);
        for (r, row) in ax.iter().enumerate() {
            let z0 = row[0] * 0.1 + row[1] * 0.3 + 0.05;
            let z1 = row[0] * -0.2 + row[1] * 0.4 - 0.05;
            assert!((out.at(r, 0) - z0.tanh()).abs() < 1e-15);
            assert!((out.at(r, 1) - z1.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_zero_weights() {
        let tape = Tape::new();
        let h_dim = 3;
        let w = LstmVars {
            w_input: tape.constant(Tensor::zeros(&[2, 4 * h_dim])),
            w_hidden: tape.constant(Tensor::zeros(&[h_dim, 4 * h_dim])),
            bias: tape.constant(Tensor::zeros(&[1, 4 * h_dim])),
        };
        let c0 = Tensor::from_rows(&[&[1.0, -2.0, 0.5], &[4.0, 0.0, -0.3]]).unwrap();
        let x = tape.constant(Tensor::ones(&[2, 2]));
        let h = tape.constant(Tensor::ones(&[2, h_dim]));
        let (h1, c1) = lstm_cell(&tape, x, h, tape.constant(c0.clone()), &w).unwrap();
        let (h1, c1) = (tape.value(h1), tape.value(c1));
        for (k, c) in c0.data().iter().enumerate() {
            assert!((c1.data()[k] - 0.5 * c).abs() < 1e-15);
            assert!((h1.data()[k] - 0.5 * (0.5 * c).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let w = LstmVars {
            w_input: tape.constant(random(&mut rng, 4, 20).map(|v| v * 5.0)),
            w_hidden: tape.constant(random(&mut rng, 5, 20).map(|v| v * 5.0)),
            bias: tape.constant(random(&mut rng, 1, 20)),
        };
        let c0 = random(&mut rng, 6, 5).map(|v| v * 10.0);
        let (h1, c1) = lstm_cell(
            &tape,
            tape.constant(random(&mut rng, 6, 4).map(|v| v * 10.0)),
            tape.constant(random(&mut rng, 6, 5)),
            tape.constant(c0.clone()),
            &w,
        )
        .unwrap();
        let (h1, c1) = (tape.value(h1), tape.value(c1));
        assert!(h1.data().iter().all(|v| v.abs() < 1.0));
        for (a, b) in c1.data().iter().zip(c0.data()) {
            assert!(a.abs() <= b.abs() + 1.0);
        }
    }

    fn instance(seed: u64, mode: AdjacencyMode) -> (ModelConfig, DgcnLstmParams, Vec<Tensor>, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small(5, 3, 4, 3, 2, mode);
        let params = DgcnLstmParams::init(&cfg, &mut rng).unwrap();
        let window = (0..3).map(|_| random(&mut rng, 5, 3)).collect();
        let adj = (0..3).map(|_| row_stochastic(&mut rng, 5)).collect();
        (cfg, params, window, adj)
    }

    #[test]
    fn output_shape_and_window_contract() {
        for mode in [AdjacencyMode::Dynamic, AdjacencyMode::Static, AdjacencyMode::None] {
            let (cfg, params, window, adj) = instance(3, mode);
            let input = match mode {
                AdjacencyMode::Dynamic => AdjacencyInput::Dynamic(&adj),
                AdjacencyMode::Static => AdjacencyInput::Static(&adj[0]),
                AdjacencyMode::None => AdjacencyInput::None,
            };
            let y = forward(&params, &cfg, &window, input).unwrap();
            assert_eq!(y.shape(), &[5, 2]);
            let err = forward(&params, &cfg, &window[..2], input).unwrap_err();
            assert!(matches!(err, Error::Contract(_)));
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (cfg, params, window, adj) = instance(11, AdjacencyMode::Dynamic);
        let perm = [3usize, 0, 4, 1, 2];
        let permute_rows = |t: &Tensor| {
            let mut out = t.clone();
            for (new, &old) in perm.iter().enumerate() {
                for j in 0..t.cols() {
                    out.set(new, j, t.at(old, j));
                }
            }
            out
        };
        let permute_adj = |a: &Tensor| {
            let mut out = a.clone();
            for (ni, &oi) in perm.iter().enumerate() {
                for (nj, &oj) in perm.iter().enumerate() {
                    out.set(ni, nj, a.at(oi, oj));
                }
            }
            out
        };
        let y = forward(&params, &cfg, &window, AdjacencyInput::Dynamic(&adj)).unwrap();
        let pw: Vec<Tensor> = window.iter().map(permute_rows).collect();
        let pa: Vec<Tensor> = adj.iter().map(permute_adj).collect();
        let py = forward(&params, &cfg, &pw, AdjacencyInput::Dynamic(&pa)).unwrap();
        let expect = permute_rows(&y);
        for (a, b) in py.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_check_small_model() {
        let (cfg, params, window, adj) = instance(5, AdjacencyMode::Dynamic);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let target = random(&mut rng, 5, 2);
        let batch = Batch::stack(&[&window], Some(&[&adj[..]])).unwrap();
        let report = grad_check(
            |tape, vars| {
                let pv = ParamVars::from_slice(vars);
                let y = forward_tape(tape, &pv, &cfg, &batch)?;
                let t = tape.constant(target.clone());
                tape.mse_loss(y, t)
            },
            &params.tensors(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn single_node_lstm_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = small(1, 2, 3, 4, 2, AdjacencyMode::None);
        let params = DgcnLstmParams::init(&cfg, &mut rng).unwrap();
        let window: Vec<Tensor> = (0..4).map(|_| random(&mut rng, 1, 2)).collect();
        let got = baseline_forward(ModelVariant::Lstm, &window, None, &params, &cfg).unwrap();

        // scalar-loop reference
        let p = |n: &str| params.get(n).unwrap();
        let (wg, bg, wx, wh, bl, wo, bo) = (
            p("gc.weight"),
            p("gc.bias"),
            p("lstm.w_input"),
            p("lstm.w_hidden"),
            p("lstm.bias"),
            p("head.weight"),
            p("head.bias"),
        );
        let hd = 3;
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        for x in &window {
            let e: Vec<f64> = (0..hd)
                .map(|k| (x.at(0, 0) * wg.at(0, k) + x.at(0, 1) * wg.at(1, k) + bg.at(0, k)).tanh())
                .collect();
            let gate = |g: usize, k: usize| {
                let col = g * hd + k;
                let mut z = bl.at(0, col);
                for (m, ev) in e.iter().enumerate() {
                    z += ev * wx.at(m, col);
                }
                for (m, hv) in h.iter().enumerate() {
                    z += hv * wh.at(m, col);
                }
                z
            };
            let mut hn = vec![0.0; hd];
            for k in 0..hd {
                let i = sigmoid_ref(gate(0, k));
                let f = sigmoid_ref(gate(1, k));
                let g = gate(2, k).tanh();
                let o = sigmoid_ref(gate(3, k));
                c[k] = f * c[k] + i * g;
                hn[k] = o * c[k].tanh();
            }
            h = hn;
        }
        for j in 0..2 {
            let mut y = bo.at(0, j);
            for k in 0..hd {
                y += h[k] * wo.at(k, j);
            }
            assert!((got.at(0, j) - y).abs() < 1e-10);
        }
    }

    #[test]
    fn gcn_with_identity_equals_lstm() {
        let (cfg, params, window, _) = instance(8, AdjacencyMode::None);
        let a = baseline_forward(ModelVariant::Lstm, &window, None, &params, &cfg).unwrap();
        let b = baseline_forward(ModelVariant::GcnLstm, &window, Some(&Tensor::eye(5)), &params, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dynamic_adjacency_matters() {
        let (cfg, params, window, mut adj) = instance(4, AdjacencyMode::Dynamic);
        let before = forward(&params, &cfg, &window, AdjacencyInput::Dynamic(&adj)).unwrap();
        let v = adj[1].at(2, 3);
        adj[1].set(2, 3, v * 1.5);
        let after = forward(&params, &cfg, &window, AdjacencyInput::Dynamic(&adj)).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn batched_equals_single() {
        let (cfg, params, w1, a1) = instance(6, AdjacencyMode::Dynamic);
        let (_, _, w2, a2) = instance(7, AdjacencyMode::Dynamic);
        let batch = Batch::stack(&[&w1, &w2], Some(&[&a1[..], &a2[..]])).unwrap();
        let tape = Tape::new();
        let vars = params.bind(&tape, false);
        let cfg_b = cfg;
        let y = tape.value(forward_tape(&tape, &vars, &cfg_b, &batch).unwrap());
        let y1 = forward(&params, &cfg, &w1, AdjacencyInput::Dynamic(&a1)).unwrap();
        let y2 = forward(&params, &cfg, &w2, AdjacencyInput::Dynamic(&a2)).unwrap();
        assert_eq!(&y.data()[..10], y1.data());
        assert_eq!(&y.data()[10..], y2.data());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small(4, 3, 5, 6, 6, AdjacencyMode::Static);
        let names = vec!["a".to_string(), "b".into(), "c".into()];
        let opts = AdjacencyOptions {
            weighting: EdgeWeighting::Affinity { tau_minutes: 2.125 },
            directionality: Directionality::Undirected,
        };
        let mut m = Forecaster::new(ModelVariant::GcnLstm, cfg, names, opts, &mut rng).unwrap();
        m.normalizer.target_mean = 812.25;
        m.static_adjacency = Some(Tensor::eye(4));
        let back = Forecaster::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn normalizer_statistics() {
        let a = Tensor::from_rows(&[&[1.0, 5.0], &[3.0, 5.0]]).unwrap();
        let n = Normalizer::fit([&a], [10.0, 20.0, 30.0]).unwrap();
        assert_eq!(n.feature_mean, vec![2.0, 5.0]);
        assert_eq!(n.feature_std, vec![1.0, 1.0]);
        assert_eq!(n.target_mean, 20.0);
        assert!((n.target_std - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((n.denormalize_target(n.normalize_target(17.5)) - 17.5).abs() < 1e-12);
    }
}
