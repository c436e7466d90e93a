//! Experiment configuration, seed sweeps and result files.
//!
//! A run is a pure function of its configuration: the policy is seeded with
//! the run seed and a synthetic stream with a seed derived from it. Wall-clock
//! timing is the only exception and is off unless `record_timing` is set.
//!
//! Output directory layout:
//!
//! - `results.csv`: one row per `(config, seed)`, flushed after each run.
//! - `summary.json`: `{config_id: {metric: {mean, std}}}` over all rows.
//! - `trace_<config_id>_seed<seed>.csv`: per-step log, when tracing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EtaSpec, GraphParams};
use crate::metrics::{compute_metrics_with, MetricsOptions, RunMetrics};
use crate::policies::{Policy, PolicyConfig, PolicyKind, StepRecord};
use crate::scoring::ScoreParams;
use crate::streams::{load_stream, save_stream, synthetic_stream, StreamConfig, StreamStep};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// User-facing policy parameters; resolved against the stream into a
/// [`PolicyConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    pub target_alpha: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub beta: f64,
    /// Selective nodes `J`.
    #[serde(rename = "J")]
    pub n_selective: usize,
    /// Links drawn per node `N`.
    #[serde(rename = "N")]
    pub max_links: usize,
    pub eta_e: EtaSpec,
    pub xi: f64,
    pub k_reg: usize,
    pub alpha_init: Option<f64>,
    pub coma_gamma: f64,
    pub aci_eta: f64,
    pub aci_model: usize,
    pub shared_u: bool,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            target_alpha: 0.1,
            eta: 0.05,
            epsilon: 0.5,
            beta: 0.05,
            n_selective: 1,
            max_links: 3,
            eta_e: EtaSpec::default(),
            xi: 0.1,
            k_reg: 1,
            alpha_init: None,
            coma_gamma: 0.01,
            aci_eta: 0.005,
            aci_model: 0,
            shared_u: false,
        }
    }
}

impl PolicyParams {
    pub fn resolve(&self, n_models: usize, n_labels: usize) -> Result<PolicyConfig> {
        let eta_e = self.eta_e.resolve(self.n_selective)?;
        let graph = GraphParams::new(self.n_selective, self.max_links, eta_e)?;
        let score = ScoreParams::new(self.xi, self.k_reg, n_labels)?;
        let mut cfg = PolicyConfig::new(n_models, graph, score);
        cfg.target_alpha = self.target_alpha;
        cfg.eta = self.eta;
        cfg.epsilon = self.epsilon;
        cfg.beta = self.beta;
        cfg.alpha_init = self.alpha_init;
        cfg.coma_gamma = self.coma_gamma;
        cfg.aci_eta = self.aci_eta;
        cfg.aci_model = self.aci_model;
        cfg.shared_u = self.shared_u;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamSource {
    Synthetic(StreamConfig),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub policy: PolicyKind,
    #[serde(default)]
    pub policy_params: PolicyParams,
    pub stream: StreamSource,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Overrides the generated config id.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub metrics: MetricsOptions,
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub trace: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if let StreamSource::Synthetic(s) = &self.stream {
            s.validate()?;
            self.policy_params.resolve(s.n_models(), s.n_labels)?;
        }
        Ok(())
    }

    /// `<policy>_N<N>_J<J>` unless a name is given.
    pub fn config_id(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!(
                "{}_N{}_J{}",
                self.policy, self.policy_params.max_links, self.policy_params.n_selective
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub policy: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub seed: u64,
    pub coverage: f64,
    pub avg_width: f64,
    pub single_width: f64,
    pub runtime: f64,
    pub width_under_k: f64,
}

impl ResultRow {
    fn key(&self) -> (String, usize, usize, u64) {
        (self.policy.clone(), self.n, self.j, self.seed)
    }
}

/// Output of one seed.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub metrics: RunMetrics,
    /// `ᾱ_t^m` per step, when requested.
    pub alpha_bars: Option<Vec<Vec<f64>>>,
}

impl RunOutcome {
    /// Realised pinball losses of the chosen model (0 where undefined).
    pub fn chosen_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.chosen_loss.unwrap_or(0.0)).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Skip `(config, seed)` pairs already present in `results.csv`.
    pub resume: bool,
    /// Force per-step trace files on.
    pub trace: bool,
}

/// Steps for one seed, streamed from a file or generated on the fly.
pub fn open_stream(source: &StreamSource, seed: u64) -> Result<Box<dyn Iterator<Item = Result<StreamStep>>>> {
    match source {
        StreamSource::Synthetic(cfg) => {
            let cfg = cfg.for_run(seed);
            Ok(Box::new((1..=cfg.horizon).map(move |t| crate::streams::generate_step(&cfg, t))))
        }
        StreamSource::File(path) => Ok(Box::new(load_stream(path)?)),
    }
}

/// Runs one seed of `cfg`. With `analysis` set, `ᾱ_t^m` of every model is
/// recorded before each step for offline regret.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, analysis: bool) -> Result<RunOutcome> {
    let mut stream = open_stream(&cfg.stream, seed)?.peekable();
    let (n_models, n_labels) = match stream.peek() {
        Some(Ok(step)) => (step.probs.len(), step.probs[0].n_labels()),
        Some(Err(_)) => return Err(stream.next().unwrap().unwrap_err()),
        None => return Err(Error::Empty("stream")),
    };
    let pcfg = cfg.policy_params.resolve(n_models, n_labels)?;
    let mut policy = Policy::new(cfg.policy, pcfg, seed)?;
    let mut records = Vec::new();
    let mut alpha_bars = analysis.then(Vec::new);
    for step in stream {
        let step = step?;
        if step.probs.len() != n_models {
            return Err(Error::ModelCountMismatch {
                t: step.t,
                expected: n_models,
                found: step.probs.len(),
            });
        }
        if let Some(bars) = alpha_bars.as_mut() {
            bars.push(policy.hindsight_alpha_bars(&step.probs, step.true_label)?);
        }
        let start = cfg.record_timing.then(Instant::now);
        let (_, mut record) = policy.step(&step.probs, step.true_label)?;
        if let Some(start) = start {
            record.wall_nanos = start.elapsed().as_nanos() as u64;
        }
        record.t = step.t;
        records.push(record);
    }
    let metrics = compute_metrics_with(&records, &cfg.metrics)?;
    Ok(RunOutcome {
        seed,
        records,
        metrics,
        alpha_bars,
    })
}

fn result_row(cfg: &ExperimentConfig, seed: u64, m: &RunMetrics) -> ResultRow {
    ResultRow {
        policy: cfg.policy.to_string(),
        n: cfg.policy_params.max_links,
        j: cfg.policy_params.n_selective,
        seed,
        coverage: m.coverage_pct,
        avg_width: m.avg_width,
        single_width: m.single_width_pct,
        runtime: m.runtime_secs,
        width_under_k: m.width_under_k_pct,
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

fn write_trace(path: &Path, records: &[StepRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    w.write_record(["t", "node", "chosen_model", "subset_size", "set_size", "err", "chosen_loss", "wall_nanos"])?;
    for r in records {
        w.write_record([
            r.t.to_string(),
            r.node.to_string(),
            r.chosen_model.to_string(),
            r.subset.len().to_string(),
            r.set_size.to_string(),
            r.err.to_string(),
            r.chosen_loss.map_or(String::new(), |l| l.to_string()),
            r.wall_nanos.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

pub type Summary = BTreeMap<String, BTreeMap<String, MeanStd>>;

/// Mean and spread of every metric, grouped by `<policy>_N<N>_J<J>`.
pub fn summarize(rows: &[ResultRow]) -> Summary {
    let mut groups: BTreeMap<String, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry(format!("{}_N{}_J{}", r.policy, r.n, r.j))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|(id, rs)| {
            let metric = |f: fn(&ResultRow) -> f64| MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let mut m = BTreeMap::new();
            m.insert("coverage".to_string(), metric(|r| r.coverage));
            m.insert("avg_width".to_string(), metric(|r| r.avg_width));
            m.insert("single_width".to_string(), metric(|r| r.single_width));
            m.insert("runtime".to_string(), metric(|r| r.runtime));
            m.insert("width_under_k".to_string(), metric(|r| r.width_under_k));
            (id, m)
        })
        .collect()
}

/// Runs every config against `output`, appending to one results file.
/// All configs must share the same output directory.
pub fn run_configs(cfgs: &[ExperimentConfig], opts: RunOptions) -> Result<Vec<ResultRow>> {
    let Some(first) = cfgs.first() else {
        return Err(Error::Empty("experiment configs"));
    };
    let out_dir = &first.output;
    if cfgs.iter().any(|c| &c.output != out_dir) {
        return Err(Error::Config("all configs of one run must share an output directory".into()));
    }
    for c in cfgs {
        c.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results_path = out_dir.join(RESULTS_FILE);

    let mut existing = Vec::new();
    if opts.resume && results_path.exists() {
        existing = read_results(&results_path)?;
    }
    let done: BTreeSet<_> = existing.iter().map(ResultRow::key).collect();
    let append = opts.resume && results_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&results_path)
        .map_err(|e| Error::io(&results_path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(!append)
        .from_writer(file);

    let mut rows = existing;
    for cfg in cfgs {
        for &seed in &cfg.seeds {
            let key = (
                cfg.policy.to_string(),
                cfg.policy_params.max_links,
                cfg.policy_params.n_selective,
                seed,
            );
            if done.contains(&key) {
                continue;
            }
            let outcome = run_seed(cfg, seed, false)?;
            if cfg.trace || opts.trace {
                let name = format!("trace_{}_seed{}.csv", cfg.config_id(), seed);
                write_trace(&out_dir.join(name), &outcome.records)?;
            }
            let row = result_row(cfg, seed, &outcome.metrics);
            writer.serialize(&row)?;
            writer.flush().map_err(|e| Error::io(&results_path, e))?;
            rows.push(row);
        }
    }
    drop(writer);

    let summary_path = out_dir.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&summarize(&rows))?;
    text.push('\n');
    fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    Ok(rows)
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Vec<ResultRow>> {
    run_configs(std::slice::from_ref(cfg), opts)
}

/// One `--grid` axis, such as `N=1,3,5`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GridAxis {
    MaxLinks(Vec<usize>),
    Selective(Vec<usize>),
    Policy(Vec<PolicyKind>),
}

impl std::str::FromStr for GridAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis `{s}` is not KEY=V1,V2,...")))?;
        let parts: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if parts.is_empty() {
            return Err(Error::Config(format!("grid axis `{s}` has no values")));
        }
        let ints = || -> Result<Vec<usize>> {
            parts
                .iter()
                .map(|p| p.parse().map_err(|_| Error::Config(format!("bad grid value `{p}` in `{s}`"))))
                .collect()
        };
        match key.trim() {
            "N" => Ok(GridAxis::MaxLinks(ints()?)),
            "J" => Ok(GridAxis::Selective(ints()?)),
            "policy" => Ok(GridAxis::Policy(parts.iter().map(|p| p.parse()).collect::<Result<_>>()?)),
            other => Err(Error::Config(format!("unknown grid key `{other}` (expected N, J or policy)"))),
        }
    }
}

/// Cartesian product of `base` over the grid axes, in axis order.
pub fn expand_grid(base: &ExperimentConfig, grid: &[GridAxis]) -> Vec<ExperimentConfig> {
    let mut out = vec![base.clone()];
    for axis in grid {
        out = out
            .into_iter()
            .flat_map(|c| {
                let variants: Vec<ExperimentConfig> = match axis {
                    GridAxis::MaxLinks(v) => v
                        .iter()
                        .map(|&n| {
                            let mut c = c.clone();
                            c.policy_params.max_links = n;
                            c
                        })
                        .collect(),
                    GridAxis::Selective(v) => v
                        .iter()
                        .map(|&j| {
                            let mut c = c.clone();
                            c.policy_params.n_selective = j;
                            c
                        })
                        .collect(),
                    GridAxis::Policy(v) => v
                        .iter()
                        .map(|&p| {
                            let mut c = c.clone();
                            c.policy = p;
                            c
                        })
                        .collect(),
                };
                variants
            })
            .collect();
    }
    for c in &mut out {
        c.name = None;
    }
    out
}

pub fn run_sweep(base: &ExperimentConfig, grid: &[GridAxis], opts: RunOptions) -> Result<Vec<ResultRow>> {
    run_configs(&expand_grid(base, grid), opts)
}

/// What `gen-stream` accepts: a bare stream config or a full experiment
/// config with a synthetic stream.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StreamSpec {
    Experiment(Box<ExperimentConfig>),
    Stream(StreamConfig),
}

impl StreamSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The stream an experiment would see for its first seed.
    pub fn stream_config(&self) -> Result<StreamConfig> {
        match self {
            StreamSpec::Stream(s) => Ok(s.clone()),
            StreamSpec::Experiment(e) => match &e.stream {
                StreamSource::Synthetic(s) => Ok(s.for_run(e.seeds.first().copied().unwrap_or(0))),
                StreamSource::File(_) => Err(Error::Config("gen-stream needs a synthetic stream".into())),
            },
        }
    }
}

pub fn generate_stream_file(cfg: &StreamConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_stream(out, cfg.n_labels, synthetic_stream(cfg))
}
