//! Configuration-driven experiment steps. Every step reads files under the
//! output directory (or configured raw inputs), writes its artifacts into
//! its own subdirectory, and leaves a `manifest.json` beside them.
//!
//! | step | reads | writes |
//! |------|-------|--------|
//! | `synth` | config | `data/` |
//! | `ingest-detectors` | graph, detector CSVs | `clean/` |
//! | `ingest-movement` | `clean/`, movement, tile map, centroids | `movement/` |
//! | `build-features` | `clean/`, `movement/`, schedule | `features/` |
//! | `train` | `clean/`, `features/`, `movement/` | `model/` |
//! | `transfer` | `features/`, `model/` | `transfer/` |
//! | `evaluate` | `features/`, `model/`, `transfer/` | `eval/` |
//! | `predict` | `features/`, `model/`, `transfer/` | `predict/` |
//! | `report` | `eval/` | `report/` |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::detector::{
    engineer_features, read_detector_csv, read_feature_csv, to_complete, to_raw, write_detector_csv, write_feature_csv, DetectorSeries,
    ImputeConfig, QcThresholds,
};
use crate::error::{Error, Result};
use crate::experiment::{
    clean_periods, dataset_windows, evaluate_forecaster, evaluate_transfer, fit_forecaster, fit_transfer_model, prepare_forecaster,
    ForecastSetup, TransferSetup,
};
use crate::graph::{read_graph_csv, write_edges_csv, write_graph_csv, RoadGraph};
use crate::models::Forecaster;
use crate::movement::{
    process_movements, read_centroid_csv, read_hourly_movement_csv, read_movement_csv, read_tile_map_csv, write_hourly_movement_csv,
    CountField,
};
use crate::synthetic::{generate_scenario, write_scenario, ScenarioConfig, ScenarioFiles};
use crate::tensor::Checkpoint;
use crate::training::{
    split, write_history_csv, Metrics, write_predictions_csv, EvalReport, MetricReport, RunSummary, SplitRatios, WindowIndex,
};
use crate::transfer::{evac_feature_frame, read_evac_csv, write_evac_csv, EvacuationSchedule, TransferModel};

/// Raw input files. Unset paths default to the files `synth` writes under
/// `<out_dir>/data/`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub nodes: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub regular_detectors: Option<PathBuf>,
    pub evacuation_detectors: Option<PathBuf>,
    pub movement: Option<PathBuf>,
    pub tile_map: Option<PathBuf>,
    pub centroids: Option<PathBuf>,
    pub schedule: Option<PathBuf>,
}

impl InputPaths {
    fn each_mut(&mut self) -> [&mut Option<PathBuf>; 8] {
        [
            &mut self.nodes,
            &mut self.edges,
            &mut self.regular_detectors,
            &mut self.evacuation_detectors,
            &mut self.movement,
            &mut self.tile_map,
            &mut self.centroids,
            &mut self.schedule,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub regular: SplitRatios,
    pub evacuation: SplitRatios,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            regular: SplitRatios::REGULAR,
            evacuation: SplitRatios::EVACUATION,
        }
    }
}

/// One file describing a whole experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Used by `synth`; its seed is replaced by [`seed`](Self::seed).
    pub scenario: ScenarioConfig,
    pub inputs: InputPaths,
    pub qc: QcThresholds,
    pub imputation: ImputeConfig,
    pub model: ForecastSetup,
    pub transfer: TransferSetup,
    pub split: SplitConfig,
    /// First day of evacuation windows; defaults to the second day of
    /// evacuation data (the first only provides history).
    pub evacuation_first_day: Option<NaiveDate>,
    pub seed: u64,
    pub runs: usize,
    /// Worker threads for repeated runs.
    pub threads: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: ScenarioConfig::default(),
            inputs: InputPaths::default(),
            qc: QcThresholds::default(),
            imputation: ImputeConfig::default(),
            model: ForecastSetup::default(),
            transfer: TransferSetup::default(),
            split: SplitConfig::default(),
            evacuation_first_day: None,
            seed: 42,
            runs: 1,
            threads: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON, reporting `path:line:column` on syntax or schema
    /// errors. Relative paths are resolved against the config's directory.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            Error::Validation(format!("{}:{}:{}: {}", origin.display(), e.line(), e.column(), strip_position(&e)))
        })?;
        let base = origin.parent().unwrap_or(Path::new(""));
        for p in cfg.inputs.each_mut().into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.regular.validate()?;
        self.split.evacuation.validate()?;
        self.model.training.validate()?;
        self.transfer.training.validate()?;
        self.scenario.validate()?;
        if self.runs == 0 {
            return Err(Error::Validation("runs must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Validation("threads must be at least 1".into()));
        }
        let m = &self.model;
        if m.hidden_size == 0 || m.input_length == 0 || m.horizon == 0 || self.transfer.hidden_size == 0 {
            return Err(Error::Validation("hidden sizes, input_length and horizon must be at least 1".into()));
        }
        let mut inputs = self.inputs.clone();
        for p in inputs.each_mut().into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Validation(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn layout(&self) -> Layout {
        Layout { root: self.out_dir.clone() }
    }

    fn files(&self) -> ScenarioFiles {
        let d = ScenarioFiles::in_dir(&self.layout().data());
        let i = &self.inputs;
        let pick = |p: &Option<PathBuf>, default: PathBuf| p.clone().unwrap_or(default);
        ScenarioFiles {
            nodes: pick(&i.nodes, d.nodes),
            edges: pick(&i.edges, d.edges),
            regular_detectors: pick(&i.regular_detectors, d.regular_detectors),
            evacuation_detectors: pick(&i.evacuation_detectors, d.evacuation_detectors),
            movement: pick(&i.movement, d.movement),
            tile_map: pick(&i.tile_map, d.tile_map),
            centroids: pick(&i.centroids, d.centroids),
            evacuation_features: d.evacuation_features,
            schedule: pick(&i.schedule, d.schedule),
        }
    }
}

fn strip_position(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

/// Artifact directories under the output root.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn clean(&self) -> PathBuf {
        self.root.join("clean")
    }
    pub fn movement(&self) -> PathBuf {
        self.root.join("movement")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn transfer(&self) -> PathBuf {
        self.root.join("transfer")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn predict(&self) -> PathBuf {
        self.root.join("predict")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn forecaster_checkpoint(&self, run: usize) -> PathBuf {
        self.model().join(format!("run_{run}")).join("forecaster.ckpt")
    }
    pub fn transfer_checkpoint(&self, run: usize) -> PathBuf {
        self.transfer().join(format!("run_{run}")).join("transfer.ckpt")
    }
}

/// Provenance record written beside every step's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub runs: usize,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| missing(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn missing(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::Validation(format!("missing upstream artifact {}", path.display()))
    } else {
        Error::io(path, e)
    }
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Validation(format!("missing upstream artifact {}", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn write_manifest(cfg: &ExperimentConfig, command: &str, dir: &Path, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<Manifest> {
    let manifest = Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: cfg.hash()?,
        seed: cfg.seed,
        runs: cfg.runs,
        inputs: inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), file_sha256(p)?)))
            .collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        config: cfg.clone(),
    };
    write_json(&manifest, &dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Generates a synthetic scenario into `data/`.
pub fn synth(cfg: &ExperimentConfig) -> Result<Manifest> {
    let mut scenario = cfg.scenario.clone();
    scenario.seed = cfg.seed;
    let s = generate_scenario(&scenario)?;
    let dir = cfg.layout().data();
    let f = write_scenario(&s, &dir)?;
    let outputs = [
        f.nodes,
        f.edges,
        f.regular_detectors,
        f.evacuation_detectors,
        f.movement,
        f.tile_map,
        f.centroids,
        f.evacuation_features,
        f.schedule,
    ];
    write_manifest(cfg, "synth", &dir, &[], &outputs)
}

fn read_graph(nodes: &Path, edges: &Path) -> Result<RoadGraph> {
    let edges = edges.exists().then_some(edges);
    read_graph_csv(require(nodes)?, edges)
}

/// Quality control and imputation of both periods into `clean/`.
pub fn ingest_detectors(cfg: &ExperimentConfig) -> Result<Manifest> {
    let f = cfg.files();
    let graph = read_graph(&f.nodes, &f.edges)?;
    let regular = read_detector_csv(require(&f.regular_detectors)?, &graph)?;
    let evacuation = read_detector_csv(require(&f.evacuation_detectors)?, &graph)?;
    let cleaned = clean_periods(vec![regular, evacuation], &graph, &cfg.qc, &cfg.imputation)?;
    let dir = cfg.layout().clean();
    create_dir(&dir)?;
    let out = CleanFiles::in_dir(&dir);
    write_graph_csv(&cleaned.graph, &out.nodes)?;
    write_edges_csv(&cleaned.graph, &out.edges)?;
    write_detector_csv(&to_raw(&cleaned.periods[0]), &out.regular)?;
    write_detector_csv(&to_raw(&cleaned.periods[1]), &out.evacuation)?;
    let report = serde_json::json!({
        "regular": { "qc": cleaned.qc[0], "imputation": cleaned.imputation[0] },
        "evacuation": { "qc": cleaned.qc[1], "imputation": cleaned.imputation[1] },
    });
    write_json(&report, &out.report)?;
    let mut inputs = vec![f.nodes.clone(), f.regular_detectors, f.evacuation_detectors];
    if f.edges.exists() {
        inputs.insert(1, f.edges);
    }
    write_manifest(cfg, "ingest-detectors", &dir, &inputs, &[out.nodes, out.edges, out.regular, out.evacuation, out.report])
}

struct CleanFiles {
    nodes: PathBuf,
    edges: PathBuf,
    regular: PathBuf,
    evacuation: PathBuf,
    report: PathBuf,
}

impl CleanFiles {
    fn in_dir(dir: &Path) -> Self {
        CleanFiles {
            nodes: dir.join("nodes.csv"),
            edges: dir.join("edges.csv"),
            regular: dir.join("regular.csv"),
            evacuation: dir.join("evacuation.csv"),
            report: dir.join("qc_report.json"),
        }
    }
}

struct Clean {
    graph: RoadGraph,
    regular: Vec<DetectorSeries>,
    evacuation: Vec<DetectorSeries>,
}

fn load_clean(cfg: &ExperimentConfig) -> Result<(Clean, Vec<PathBuf>)> {
    let f = CleanFiles::in_dir(&cfg.layout().clean());
    let graph = read_graph(&f.nodes, &f.edges)?;
    let regular = to_complete(&read_detector_csv(require(&f.regular)?, &graph)?)?;
    let evacuation = to_complete(&read_detector_csv(require(&f.evacuation)?, &graph)?)?;
    Ok((
        Clean {
            graph,
            regular,
            evacuation,
        },
        vec![f.nodes, f.edges, f.regular, f.evacuation],
    ))
}

/// Movement records to hourly per-detector movement in `movement/`.
pub fn ingest_movement(cfg: &ExperimentConfig) -> Result<Manifest> {
    let f = cfg.files();
    let (clean, mut inputs) = load_clean(cfg)?;
    let movements = read_movement_csv(require(&f.movement)?)?;
    let tiles = read_tile_map_csv(require(&f.tile_map)?)?;
    let centroids = read_centroid_csv(require(&f.centroids)?)?;
    let traffic: Vec<DetectorSeries> = clean.regular.iter().chain(&clean.evacuation).cloned().collect();
    let (crisis, report) = process_movements(&movements, &tiles, &centroids, &clean.graph, &traffic, CountField::Crisis)?;
    let (baseline, _) = process_movements(&movements, &tiles, &centroids, &clean.graph, &traffic, CountField::Baseline)?;
    let dir = cfg.layout().movement();
    create_dir(&dir)?;
    let (hourly, base, rep) = (dir.join("hourly.csv"), dir.join("baseline_hourly.csv"), dir.join("report.json"));
    write_hourly_movement_csv(&crisis, &hourly)?;
    write_hourly_movement_csv(&baseline, &base)?;
    write_json(&report, &rep)?;
    inputs.extend([f.movement, f.tile_map, f.centroids]);
    write_manifest(cfg, "ingest-movement", &dir, &inputs, &[hourly, base, rep])
}

struct FeatureFiles {
    regular: PathBuf,
    evacuation: PathBuf,
    evac: PathBuf,
}

impl FeatureFiles {
    fn in_dir(dir: &Path) -> Self {
        FeatureFiles {
            regular: dir.join("regular.csv"),
            evacuation: dir.join("evacuation.csv"),
            evac: dir.join("evac_features.csv"),
        }
    }
}

/// Traffic features for both periods plus evacuation features, in
/// `features/`.
pub fn build_features(cfg: &ExperimentConfig) -> Result<Manifest> {
    let f = cfg.files();
    let (clean, mut inputs) = load_clean(cfg)?;
    let hourly_path = cfg.layout().movement().join("hourly.csv");
    let hourly = read_hourly_movement_csv(require(&hourly_path)?)?;
    let schedule_text = std::fs::read_to_string(&f.schedule).map_err(|e| missing(&f.schedule, e))?;
    let schedule: EvacuationSchedule = serde_json::from_str(&schedule_text)
        .map_err(|e| Error::Validation(format!("{}:{}:{}: {}", f.schedule.display(), e.line(), e.column(), strip_position(&e))))?;

    let dir = cfg.layout().features();
    create_dir(&dir)?;
    let out = FeatureFiles::in_dir(&dir);
    write_feature_csv(&engineer_features(&clean.regular)?, &out.regular)?;
    write_feature_csv(&engineer_features(&clean.evacuation)?, &out.evacuation)?;
    let mut hours: Vec<NaiveDateTime> = clean.evacuation.iter().flat_map(|s| s.timestamps.iter().copied()).collect();
    hours.sort();
    hours.dedup();
    let evac = evac_feature_frame(&clean.graph, &hours, &schedule, &hourly)?;
    write_evac_csv(&evac, &out.evac)?;
    inputs.extend([hourly_path, f.schedule]);
    write_manifest(cfg, "build-features", &dir, &inputs, &[out.regular, out.evacuation, out.evac])
}

struct Datasets {
    regular: Dataset,
    evacuation: Dataset,
    inputs: Vec<PathBuf>,
}

fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let layout = cfg.layout();
    let clean = CleanFiles::in_dir(&layout.clean());
    let graph = read_graph(&clean.nodes, &clean.edges)?;
    let f = FeatureFiles::in_dir(&layout.features());
    let mut regular = Dataset::from_features(&read_feature_csv(require(&f.regular)?)?, &graph)?;
    let mut evacuation = Dataset::from_features(&read_feature_csv(require(&f.evacuation)?)?, &graph)?;
    evacuation.attach_evacuation(&read_evac_csv(require(&f.evac)?)?)?;
    let mut inputs = vec![clean.nodes, clean.edges, f.regular, f.evacuation, f.evac];
    let hourly = layout.movement().join("hourly.csv");
    if cfg.model.movement_features {
        regular.attach_movement(&read_hourly_movement_csv(require(&hourly)?)?);
        inputs.push(hourly);
    }
    Ok(Datasets {
        regular,
        evacuation,
        inputs,
    })
}

fn regular_windows(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<WindowIndex>> {
    dataset_windows(ds, None, cfg.model.input_length, cfg.model.horizon)
}

fn evacuation_windows(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<WindowIndex>> {
    let first = match cfg.evacuation_first_day {
        Some(d) => d,
        None => {
            let d0 = ds.hours.first().ok_or_else(|| Error::Validation("evacuation data is empty".into()))?.date();
            d0.succ_opt().unwrap_or(d0)
        }
    };
    let w = dataset_windows(ds, Some(first), cfg.model.input_length, cfg.model.horizon)?;
    if w.is_empty() {
        return Err(Error::Validation(format!("no evacuation windows from {first}")));
    }
    Ok(w)
}

/// Like [`repeat_runs`](crate::training::repeat_runs) but fails with the
/// first run's original error instead of recording it.
fn each_run<F>(cfg: &ExperimentConfig, experiment: F) -> Result<MetricReport>
where
    F: Fn(usize, u64) -> Result<EvalReport> + Sync,
{
    let first_error: Mutex<Option<(usize, Error)>> = Mutex::new(None);
    let report = crate::training::repeat_runs(cfg.runs, cfg.seed, cfg.threads, |run, seed| {
        experiment(run, seed).map_err(|e| {
            let msg = e.to_string();
            let mut slot = first_error.lock().unwrap_or_else(|p| p.into_inner());
            if !matches!(slot.as_ref(), Some((r, _)) if *r < run) {
                *slot = Some((run, e));
            }
            Error::Validation(msg)
        })
    });
    match first_error.into_inner().unwrap_or_else(|p| p.into_inner()) {
        Some((_, e)) => Err(e),
        None => report,
    }
}

fn positions(windows: &[WindowIndex]) -> Vec<usize> {
    (0..windows.len()).collect()
}

/// Trains `runs` forecasters (seeds `seed + run`) into `model/run_<i>/`
/// and writes their test metrics to `model/metric_report.json`.
pub fn train(cfg: &ExperimentConfig) -> Result<Manifest> {
    let data = load_datasets(cfg)?;
    let windows = regular_windows(cfg, &data.regular)?;
    let layout = cfg.layout();
    let ids = data.regular.graph.detector_ids();
    let report = each_run(cfg, |run, seed| {
        let fit = fit_forecaster(&data.regular, windows.clone(), cfg.split.regular, &cfg.model, seed)?;
        let path = layout.forecaster_checkpoint(run);
        create_dir(path.parent().unwrap())?;
        fit.model.to_checkpoint()?.save(&path)?;
        write_history_csv(&fit.outcome.history, &path.with_file_name("history.csv"))?;
        evaluate_forecaster(&fit.model, &fit.data, &fit.split.test, &ids)
    })?;
    let dir = layout.model();
    let json = dir.join("metric_report.json");
    report.write_json(&json)?;
    let mut outputs: Vec<PathBuf> = (0..cfg.runs).map(|r| layout.forecaster_checkpoint(r)).filter(|p| p.exists()).collect();
    outputs.push(json);
    write_manifest(cfg, "train", &dir, &data.inputs, &outputs)
}

fn load_forecaster(path: &Path) -> Result<Forecaster> {
    Forecaster::from_checkpoint(&Checkpoint::load(require(path)?)?)
}

/// Trains one transfer model per pretrained run into `transfer/run_<i>/`.
pub fn transfer(cfg: &ExperimentConfig) -> Result<Manifest> {
    let data = load_datasets(cfg)?;
    let windows = evacuation_windows(cfg, &data.evacuation)?;
    let layout = cfg.layout();
    let ids = data.evacuation.graph.detector_ids();
    let pretrained: Vec<Forecaster> = (0..cfg.runs)
        .map(|r| load_forecaster(&layout.forecaster_checkpoint(r)))
        .collect::<Result<_>>()?;
    let report = each_run(cfg, |run, seed| {
        let fit = fit_transfer_model(pretrained[run].clone(), &data.evacuation, windows.clone(), cfg.split.evacuation, &cfg.transfer, seed)?;
        let path = layout.transfer_checkpoint(run);
        create_dir(path.parent().unwrap())?;
        fit.model.to_checkpoint()?.save(&path)?;
        write_history_csv(&fit.outcome.history, &path.with_file_name("history.csv"))?;
        evaluate_transfer(&fit.model, &fit.data, &fit.split.test, &ids)
    })?;
    let dir = layout.transfer();
    let json = dir.join("metric_report.json");
    report.write_json(&json)?;
    let mut inputs = data.inputs;
    inputs.extend((0..cfg.runs).map(|r| layout.forecaster_checkpoint(r)));
    let mut outputs: Vec<PathBuf> = (0..cfg.runs).map(|r| layout.transfer_checkpoint(r)).filter(|p| p.exists()).collect();
    outputs.push(json);
    write_manifest(cfg, "transfer", &dir, &inputs, &outputs)
}

/// Names of the evaluations `evaluate` writes, each as
/// `eval/<name>.json` and `eval/<name>.csv`.
pub const EVALUATIONS: [&str; 3] = ["regular", "regular_on_evacuation", "transfer"];

struct RunEvaluation {
    regular: EvalReport,
    regular_on_evacuation: EvalReport,
    transfer: Option<EvalReport>,
}

fn evaluate_run(cfg: &ExperimentConfig, data: &Datasets, run: usize, predictions: Option<&Path>) -> Result<RunEvaluation> {
    let layout = cfg.layout();
    let seed = cfg.seed.wrapping_add(run as u64);
    let model = load_forecaster(&layout.forecaster_checkpoint(run))?;

    let reg_windows = regular_windows(cfg, &data.regular)?;
    let reg_test = split(&positions(&reg_windows), cfg.split.regular, seed)?.test;
    let reg_ids = data.regular.graph.detector_ids();
    let reg_data = prepare_forecaster(&model, &data.regular, reg_windows)?;

    let ev_windows = evacuation_windows(cfg, &data.evacuation)?;
    let ev_test = split(&positions(&ev_windows), cfg.split.evacuation, seed)?.test;
    let ev_ids = data.evacuation.graph.detector_ids();
    let ev_data = prepare_forecaster(&model, &data.evacuation, ev_windows.clone())?;

    let transfer_path = layout.transfer_checkpoint(run);
    let transfer = if transfer_path.exists() {
        let tm = TransferModel::from_checkpoint(&Checkpoint::load(&transfer_path)?, model.clone())?;
        Some((tm.prepare(&data.evacuation, ev_windows)?, tm))
    } else {
        None
    };

    if let Some(dir) = predictions {
        let rows = crate::training::predict_windows(&model, &reg_data, &reg_test, &reg_ids)?;
        write_predictions_csv(&rows, &dir.join("regular.csv"))?;
        let rows = crate::training::predict_windows(&model, &ev_data, &ev_test, &ev_ids)?;
        write_predictions_csv(&rows, &dir.join("regular_on_evacuation.csv"))?;
        if let Some((td, tm)) = &transfer {
            write_predictions_csv(&tm.predict_windows(td, &ev_test, &ev_ids)?, &dir.join("transfer.csv"))?;
        }
    }
    Ok(RunEvaluation {
        regular: evaluate_forecaster(&model, &reg_data, &reg_test, &reg_ids)?,
        regular_on_evacuation: evaluate_forecaster(&model, &ev_data, &ev_test, &ev_ids)?,
        transfer: transfer.map(|(td, tm)| evaluate_transfer(&tm, &td, &ev_test, &ev_ids)).transpose()?,
    })
}

fn summary(run: usize, seed: u64, r: &EvalReport) -> RunSummary {
    RunSummary {
        run_index: run,
        seed,
        aggregate: Some(r.aggregate),
        per_horizon: r.per_horizon.clone(),
        error: None,
    }
}

/// Test-split metrics of every run: the forecaster on regular and on
/// evacuation data, and the transfer model when one was trained.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<Manifest> {
    let data = load_datasets(cfg)?;
    let layout = cfg.layout();
    let mut runs: BTreeMap<&str, Vec<RunSummary>> = BTreeMap::new();
    let mut inputs = data.inputs.clone();
    for run in 0..cfg.runs {
        let seed = cfg.seed.wrapping_add(run as u64);
        let e = evaluate_run(cfg, &data, run, None)?;
        runs.entry("regular").or_default().push(summary(run, seed, &e.regular));
        runs.entry("regular_on_evacuation").or_default().push(summary(run, seed, &e.regular_on_evacuation));
        inputs.push(layout.forecaster_checkpoint(run));
        if let Some(t) = &e.transfer {
            runs.entry("transfer").or_default().push(summary(run, seed, t));
            inputs.push(layout.transfer_checkpoint(run));
        }
    }
    let dir = layout.eval();
    create_dir(&dir)?;
    let mut outputs = Vec::new();
    for (name, r) in runs {
        if r.len() != cfg.runs {
            return Err(Error::Validation(format!("transfer checkpoints exist for only {} of {} runs", r.len(), cfg.runs)));
        }
        let report = MetricReport::from_runs(r)?;
        let (json, csv) = (dir.join(format!("{name}.json")), dir.join(format!("{name}.csv")));
        report.write_json(&json)?;
        report.write_csv(&csv)?;
        outputs.extend([json, csv]);
    }
    write_manifest(cfg, "evaluate", &dir, &inputs, &outputs)
}

/// Test-window predictions of run 0 in `predict/`.
pub fn predict(cfg: &ExperimentConfig) -> Result<Manifest> {
    let data = load_datasets(cfg)?;
    let layout = cfg.layout();
    let dir = layout.predict();
    create_dir(&dir)?;
    evaluate_run(cfg, &data, 0, Some(&dir))?;
    let mut inputs = data.inputs;
    inputs.push(layout.forecaster_checkpoint(0));
    let mut outputs = vec![dir.join("regular.csv"), dir.join("regular_on_evacuation.csv")];
    if layout.transfer_checkpoint(0).exists() {
        inputs.push(layout.transfer_checkpoint(0));
        outputs.push(dir.join("transfer.csv"));
    }
    write_manifest(cfg, "predict", &dir, &inputs, &outputs)
}

/// Summary tables (mean and std over runs) from `eval/`.
pub fn report(cfg: &ExperimentConfig) -> Result<Manifest> {
    let layout = cfg.layout();
    let mut reports = Vec::new();
    let mut inputs = Vec::new();
    for name in EVALUATIONS {
        let path = layout.eval().join(format!("{name}.json"));
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let r: MetricReport = serde_json::from_str(&text)?;
        reports.push((name, r));
        inputs.push(path);
    }
    if reports.is_empty() {
        return Err(Error::Validation(format!(
            "missing upstream artifact {}",
            layout.eval().join("regular.json").display()
        )));
    }
    let dir = layout.report();
    create_dir(&dir)?;
    let mut md = String::from("| model | runs | RMSE | MAE | MAPE | R2 | SMAPE |\n|---|---|---|---|---|---|---|\n");
    let mut csv = String::from("model,runs,metric,mean,std\n");
    for (name, r) in &reports {
        let cells: Vec<String> = r
            .mean
            .values()
            .into_iter()
            .zip(r.std.values())
            .map(|(m, s)| format!("{m:.3} ± {s:.3}"))
            .collect();
        let _ = writeln!(md, "| {name} | {} | {} |", r.run_count, cells.join(" | "));
        for ((metric, m), s) in Metrics::NAMES.iter().zip(r.mean.values()).zip(r.std.values()) {
            let _ = writeln!(csv, "{name},{},{metric},{m},{s}", r.run_count);
        }
    }
    md.push_str("\nSMAPE by horizon (mean over runs)\n\n| model |");
    let horizons = reports[0].1.per_horizon_mean.len();
    for k in 1..=horizons {
        let _ = write!(md, " h{k} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(horizons));
    md.push('\n');
    for (name, r) in &reports {
        let _ = write!(md, "| {name} |");
        for m in &r.per_horizon_mean {
            let _ = write!(md, " {:.3} |", m.smape);
        }
        md.push('\n');
    }
    let (md_path, csv_path) = (dir.join("summary.md"), dir.join("summary.csv"));
    std::fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    write_manifest(cfg, "report", &dir, &inputs, &[md_path, csv_path])
}

/// Every step in order: synth, ingestion, features, train, transfer,
/// evaluate, predict, report.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<Manifest>> {
    let steps: [fn(&ExperimentConfig) -> Result<Manifest>; 9] =
        [synth, ingest_detectors, ingest_movement, build_features, train, transfer, evaluate, predict, report];
    steps.iter().map(|step| step(cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_resolve_against_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("n.csv"), "").unwrap();
        let origin = dir.path().join("exp.json");
        let cfg = ExperimentConfig::from_json(r#"{ "inputs": { "nodes": "n.csv" }, "out_dir": "o" }"#, &origin).unwrap();
        assert_eq!(cfg.inputs.nodes, Some(dir.path().join("n.csv")));
        assert_eq!(cfg.out_dir, dir.path().join("o"));
        assert_eq!(cfg.files().nodes, dir.path().join("n.csv"));
        assert_eq!(cfg.files().edges, dir.path().join("o/data/edges.csv"));
    }

    #[test]
    fn schema_errors_carry_position() {
        let e = ExperimentConfig::from_json("{\n \"split\": { \"regular\": { \"train\": 1 } }\n}", Path::new("c.json")).unwrap_err();
        assert!(e.to_string().starts_with("invalid input: c.json:2:"), "{e}");
        assert!(!e.to_string().contains(" at line "), "{e}");
    }

    #[test]
    fn invariants_are_checked_at_load() {
        let bad = [
            r#"{ "runs": 0 }"#,
            r#"{ "threads": 0 }"#,
            r#"{ "split": { "regular": { "train": 0.5, "validation": 0.1, "test": 0.1 } } }"#,
            r#"{ "inputs": { "movement": "/definitely/not/here.csv" } }"#,
        ];
        for text in bad {
            assert!(matches!(ExperimentConfig::from_json(text, Path::new("c.json")), Err(Error::Validation(_))), "{text}");
        }
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text, Path::new("/c.json")).unwrap(), ExperimentConfig {
            out_dir: PathBuf::from("/out"),
            ..cfg
        });
    }

    #[test]
    fn documented_config_matches_schema() {
        let guide = include_str!("../../../book/src/cli.md");
        let start = guide.find("```json\n").unwrap() + 8;
        let end = start + guide[start..].find("```").unwrap();
        let cfg: ExperimentConfig = serde_json::from_str(&guide[start..end]).unwrap();
        assert_eq!(cfg.runs, 10);
        assert_eq!(cfg.inputs.nodes, Some(PathBuf::from("raw/nodes.csv")));
    }
}
