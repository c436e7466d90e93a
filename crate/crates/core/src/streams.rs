//! Synthetic multi-model prediction streams and the stream file format.
//!
//! A synthetic step draws the true label uniformly and, for each model
//! profile, produces `softmax((signal·onehot(y) + σ·z) / temperature)` with
//! `z ~ N(0, I)` and `σ = noise_scale·(1 + severity_gain·severity)`. Severity follows a
//! per-batch schedule, so accuracy falls and sets grow as the corruption level
//! rises. Every draw is addressed by `(seed, stream, t, model)`: any step can
//! be regenerated on its own.
//!
//! Stream files are CSV with header `t,true_label,severity,model_id,p_0,...`
//! and one row per `(t, model)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::scoring::ProbVector;

/// Highest severity level.
pub const MAX_SEVERITY: u8 = 5;

/// Rows whose probabilities stray further than this from one are rejected.
pub const FILE_SIMPLEX_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// 0,1,2,3,4,5,4,3,2,1,0,... one level per batch.
    Gradual,
    /// 0,5,0,5,... one level per batch.
    Sudden,
    Stationary,
}

/// Severity at 1-based time `t`.
pub fn severity_at(t: u64, schedule: Schedule, batch_size: u64) -> u8 {
    let batch = t.saturating_sub(1) / batch_size.max(1);
    match schedule {
        Schedule::Stationary => 0,
        Schedule::Sudden => {
            if batch.is_multiple_of(2) {
                0
            } else {
                MAX_SEVERITY
            }
        }
        Schedule::Gradual => {
            let period = 2 * u64::from(MAX_SEVERITY);
            let pos = batch % period;
            if pos <= u64::from(MAX_SEVERITY) {
                pos as u8
            } else {
                (period - pos) as u8
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    High,
    Medium,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub quality: Quality,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_noise_scale() -> f64 {
    1.0
}

fn default_temperature() -> f64 {
    1.0
}

impl ModelProfile {
    pub fn new(quality: Quality) -> Self {
        Self {
            quality,
            noise_scale: default_noise_scale(),
            temperature: default_temperature(),
        }
    }
}

/// Logit boost given to the true label, by model quality.
///
/// With ten labels and unit noise the defaults give roughly 0.96, 0.63 and
/// 0.29 top-1 accuracy at severity 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalLevels {
    pub high: f64,
    pub medium: f64,
    pub low: f64,
}

impl Default for SignalLevels {
    fn default() -> Self {
        Self {
            high: 3.5,
            medium: 1.8,
            low: 0.8,
        }
    }
}

impl SignalLevels {
    pub fn of(&self, q: Quality) -> f64 {
        match q {
            Quality::High => self.high,
            Quality::Medium => self.medium,
            Quality::Low => self.low,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub n_labels: usize,
    pub horizon: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: u64,
    pub schedule: Schedule,
    pub model_profiles: Vec<ModelProfile>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub signal: SignalLevels,
    /// Relative noise increase per severity level.
    #[serde(default = "default_severity_gain")]
    pub severity_gain: f64,
}

fn default_batch_size() -> u64 {
    500
}

fn default_severity_gain() -> f64 {
    0.25
}

impl StreamConfig {
    /// Eight models (six high, one medium, one low quality), ten labels,
    /// 6000 steps in batches of 500. The high-quality models differ in noise
    /// scale, from 0.6 to 1.6, so their set sizes differ at equal coverage.
    pub fn default_mixed(schedule: Schedule, master_seed: u64) -> Self {
        let mut model_profiles: Vec<ModelProfile> = [0.6, 0.8, 1.0, 1.2, 1.4, 1.6]
            .into_iter()
            .map(|noise_scale| ModelProfile {
                noise_scale,
                ..ModelProfile::new(Quality::High)
            })
            .collect();
        model_profiles.push(ModelProfile::new(Quality::Medium));
        model_profiles.push(ModelProfile::new(Quality::Low));
        Self {
            n_labels: 10,
            horizon: 6000,
            batch_size: default_batch_size(),
            schedule,
            model_profiles,
            master_seed,
            signal: SignalLevels::default(),
            severity_gain: default_severity_gain(),
        }
    }

    pub fn n_models(&self) -> usize {
        self.model_profiles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.batch_size == 0 {
            return Err(Error::Config("horizon and batch_size must be >= 1".into()));
        }
        if self.model_profiles.is_empty() {
            return Err(Error::Config("at least one model profile is required".into()));
        }
        if !(self.severity_gain >= 0.0 && self.severity_gain.is_finite()) {
            return Err(Error::Config("severity_gain must be non-negative".into()));
        }
        if self.n_labels < 2 {
            return Err(Error::Config("at least two labels are required".into()));
        }
        for p in &self.model_profiles {
            if !(p.noise_scale >= 0.0 && p.temperature > 0.0) {
                return Err(Error::Config(format!("invalid model profile {p:?}")));
            }
        }
        Ok(())
    }

    /// `1 + severity_gain·severity`.
    pub fn noise_multiplier(&self, severity: u8) -> f64 {
        1.0 + self.severity_gain * f64::from(severity)
    }

    /// Copy whose master seed is mixed with a run seed.
    pub fn for_run(&self, run_seed: u64) -> Self {
        let mut c = self.clone();
        c.master_seed = crate::rng::derive_seed(self.master_seed, "stream-run", run_seed, 0);
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamStep {
    pub t: u64,
    pub true_label: usize,
    pub severity: u8,
    pub probs: Vec<ProbVector>,
}

/// Output of one model profile given the label, severity and a noise source.
pub fn model_output<R: Rng + ?Sized>(
    profile: &ModelProfile,
    signal: f64,
    n_labels: usize,
    true_label: usize,
    noise_mult: f64,
    rng: &mut R,
) -> ProbVector {
    let sigma = profile.noise_scale * noise_mult;
    let logits: Vec<f64> = (0..n_labels)
        .map(|k| {
            let z: f64 = rng.sample(StandardNormal);
            let boost = if k == true_label { signal } else { 0.0 };
            (boost + sigma * z) / profile.temperature
        })
        .collect();
    softmax(&logits)
}

fn softmax(logits: &[f64]) -> ProbVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    ProbVector::normalized(exps).expect("softmax of finite logits is a simplex")
}

/// Step `t` (1-based) of the synthetic stream.
pub fn generate_step(cfg: &StreamConfig, t: u64) -> Result<StreamStep> {
    if t == 0 || t > cfg.horizon {
        return Err(Error::Config(format!("t = {t} outside 1..={}", cfg.horizon)));
    }
    let severity = severity_at(t, cfg.schedule, cfg.batch_size);
    let true_label = stream_rng(cfg.master_seed, "label", t, 0).random_range(0..cfg.n_labels);
    let noise_mult = cfg.noise_multiplier(severity);
    let probs = cfg
        .model_profiles
        .iter()
        .enumerate()
        .map(|(m, profile)| {
            let mut rng = stream_rng(cfg.master_seed, "noise", t, m as u64);
            model_output(
                profile,
                cfg.signal.of(profile.quality),
                cfg.n_labels,
                true_label,
                noise_mult,
                &mut rng,
            )
        })
        .collect();
    Ok(StreamStep {
        t,
        true_label,
        severity,
        probs,
    })
}

/// Iterator over steps `1..=horizon`.
pub fn synthetic_stream(cfg: &StreamConfig) -> impl Iterator<Item = Result<StreamStep>> + '_ {
    (1..=cfg.horizon).map(move |t| generate_step(cfg, t))
}

fn header(n_labels: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "true_label", "severity", "model_id"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..n_labels).map(|k| format!("p_{k}")));
    h
}

/// Writes steps in the stream file format.
pub fn write_stream<W: Write, I>(writer: W, n_labels: usize, steps: I) -> Result<()>
where
    I: IntoIterator<Item = Result<StreamStep>>,
{
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(header(n_labels))?;
    let mut row: Vec<String> = Vec::with_capacity(n_labels + 4);
    for step in steps {
        let step = step?;
        for (m, p) in step.probs.iter().enumerate() {
            row.clear();
            row.push(step.t.to_string());
            row.push(step.true_label.to_string());
            row.push(step.severity.to_string());
            row.push(m.to_string());
            row.extend(p.as_slice().iter().map(|x| format!("{x:.16e}")));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<stream writer>", e))?;
    Ok(())
}

pub fn save_stream<I>(path: &Path, n_labels: usize, steps: I) -> Result<()>
where
    I: IntoIterator<Item = Result<StreamStep>>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_stream(BufWriter::new(file), n_labels, steps)
}

/// Streaming reader for stream files; yields one [`StreamStep`] per `t`.
pub struct StreamReader<R: std::io::Read> {
    records: csv::StringRecordsIntoIter<R>,
    n_labels: usize,
    n_models: Option<usize>,
    lookahead: Option<(u64, csv::StringRecord)>,
    row: u64,
    last_t: u64,
    done: bool,
}

pub fn load_stream(path: &Path) -> Result<StreamReader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    StreamReader::new(file)
}

impl<R: std::io::Read> StreamReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let head = rdr.headers()?.clone();
        let cols: Vec<&str> = head.iter().collect();
        let fixed = ["t", "true_label", "severity", "model_id"];
        if cols.len() < fixed.len() + 1 || cols[..fixed.len()] != fixed {
            return Err(Error::Schema(format!(
                "header must start with t,true_label,severity,model_id,p_0; got `{}`",
                cols.join(",")
            )));
        }
        let n_labels = cols.len() - fixed.len();
        for (k, c) in cols[fixed.len()..].iter().enumerate() {
            if *c != format!("p_{k}") {
                return Err(Error::Schema(format!("column {} should be p_{k}, found `{c}`", k + fixed.len())));
            }
        }
        Ok(Self {
            records: rdr.into_records(),
            n_labels,
            n_models: None,
            lookahead: None,
            row: 1,
            last_t: 0,
            done: false,
        })
    }

    /// Requires every step to carry exactly `n` model rows.
    pub fn expect_models(mut self, n: usize) -> Self {
        self.n_models = Some(n);
        self
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    fn next_record(&mut self) -> Option<Result<(u64, csv::StringRecord)>> {
        if let Some(r) = self.lookahead.take() {
            return Some(Ok(r));
        }
        let rec = self.records.next()?;
        self.row += 1;
        let row = self.row;
        Some(rec.map_err(Error::from).and_then(|r| {
            let t = parse_field::<u64>(&r, 0, row)?;
            Ok((t, r))
        }))
    }

    fn parse_row(&self, rec: &csv::StringRecord) -> Result<(usize, u8, usize, ProbVector)> {
        let row = self.row;
        if rec.len() != self.n_labels + 4 {
            return Err(Error::MalformedRow {
                row,
                msg: format!("{} fields, expected {}", rec.len(), self.n_labels + 4),
            });
        }
        let label = parse_field::<usize>(rec, 1, row)?;
        let severity = parse_field::<u8>(rec, 2, row)?;
        let model = parse_field::<usize>(rec, 3, row)?;
        if label >= self.n_labels {
            return Err(Error::MalformedRow {
                row,
                msg: format!("true_label {label} >= {}", self.n_labels),
            });
        }
        if severity > MAX_SEVERITY {
            return Err(Error::MalformedRow {
                row,
                msg: format!("severity {severity} > {MAX_SEVERITY}"),
            });
        }
        let probs = (4..rec.len())
            .map(|i| parse_field::<f64>(rec, i, row))
            .collect::<Result<Vec<f64>>>()?;
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::MalformedRow {
                row,
                msg: "negative or non-finite probability".into(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > FILE_SIMPLEX_TOL {
            return Err(Error::NotSimplex { row, sum });
        }
        let probs = if (sum - 1.0).abs() <= crate::scoring::SIMPLEX_TOL {
            ProbVector::new(probs)?
        } else {
            ProbVector::normalized(probs)?
        };
        Ok((label, severity, model, probs))
    }

    fn read_step(&mut self) -> Option<Result<StreamStep>> {
        let (t, first) = match self.next_record()? {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        Some(self.collect_step(t, first))
    }

    fn collect_step(&mut self, t: u64, first: csv::StringRecord) -> Result<StreamStep> {
        if t <= self.last_t {
            return Err(Error::MalformedRow {
                row: self.row,
                msg: format!("t = {t} does not increase past {}", self.last_t),
            });
        }
        self.last_t = t;
        let (true_label, severity, model, p) = self.parse_row(&first)?;
        let mut probs = vec![p];
        let mut expected_model = 1;
        if model != 0 {
            return Err(Error::MalformedRow {
                row: self.row,
                msg: format!("first model_id of t = {t} is {model}, expected 0"),
            });
        }
        loop {
            match self.next_record() {
                None => break,
                Some(Err(e)) => return Err(e),
                Some(Ok((next_t, rec))) => {
                    if next_t != t {
                        self.lookahead = Some((next_t, rec));
                        break;
                    }
                    let (label, sev, model, p) = self.parse_row(&rec)?;
                    if label != true_label || sev != severity {
                        return Err(Error::MalformedRow {
                            row: self.row,
                            msg: format!("label/severity differ between model rows of t = {t}"),
                        });
                    }
                    if model != expected_model {
                        return Err(Error::MalformedRow {
                            row: self.row,
                            msg: format!("model_id {model}, expected {expected_model}"),
                        });
                    }
                    expected_model += 1;
                    probs.push(p);
                }
            }
        }
        match self.n_models {
            Some(n) if n != probs.len() => {
                return Err(Error::ModelCountMismatch {
                    t,
                    expected: n,
                    found: probs.len(),
                })
            }
            None => self.n_models = Some(probs.len()),
            _ => {}
        }
        Ok(StreamStep {
            t,
            true_label,
            severity,
            probs,
        })
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, row: u64) -> Result<T> {
    let raw = rec.get(i).ok_or(Error::MalformedRow {
        row,
        msg: format!("missing field {i}"),
    })?;
    raw.trim().parse().map_err(|_| Error::MalformedRow {
        row,
        msg: format!("cannot parse field {i} (`{raw}`)"),
    })
}

impl<R: std::io::Read> Iterator for StreamReader<R> {
    type Item = Result<StreamStep>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.read_step();
        if matches!(out, None | Some(Err(_))) {
            self.done = true;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradual_schedule_positions() {
        let s = Schedule::Gradual;
        assert_eq!(severity_at(1, s, 500), 0);
        assert_eq!(severity_at(500, s, 500), 0);
        assert_eq!(severity_at(501, s, 500), 1);
        assert_eq!(severity_at(2501, s, 500), 5);
        assert_eq!(severity_at(3001, s, 500), 4);
        assert_eq!(severity_at(5001, s, 500), 0);
        assert_eq!(severity_at(5501, s, 500), 1);
    }

    #[test]
    fn sudden_and_stationary_schedules() {
        assert_eq!(severity_at(1, Schedule::Sudden, 500), 0);
        assert_eq!(severity_at(501, Schedule::Sudden, 500), 5);
        assert_eq!(severity_at(1001, Schedule::Sudden, 500), 0);
        assert!((1..5000).all(|t| severity_at(t, Schedule::Stationary, 500) == 0));
    }

    #[test]
    fn noiseless_high_quality_ranks_truth_first() {
        let mut profile = ModelProfile::new(Quality::High);
        profile.noise_scale = 0.0;
        let mut rng = stream_rng(0, "t", 0, 0);
        for y in 0..10 {
            for sev in 0..=5 {
                let p = model_output(&profile, 3.5, 10, y, 1.0 + f64::from(sev), &mut rng);
                assert_eq!(p.argmax(), y);
            }
        }
    }

    #[test]
    fn identical_profiles_and_streams_agree() {
        let profile = ModelProfile::new(Quality::Medium);
        let a = model_output(&profile, 1.8, 10, 3, 1.5, &mut stream_rng(4, "noise", 9, 1));
        let b = model_output(&profile, 1.8, 10, 3, 1.5, &mut stream_rng(4, "noise", 9, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn random_access_matches_sequential() {
        let mut cfg = StreamConfig::default_mixed(Schedule::Gradual, 42);
        cfg.horizon = 50;
        let seq: Vec<StreamStep> = synthetic_stream(&cfg).map(|s| s.unwrap()).collect();
        for t in [1u64, 17, 50] {
            assert_eq!(generate_step(&cfg, t).unwrap(), seq[t as usize - 1]);
        }
        assert!(generate_step(&cfg, 51).is_err());
        assert!(generate_step(&cfg, 0).is_err());
    }

    fn accuracy(cfg: &StreamConfig, model: usize, severity: u8, samples: u64) -> f64 {
        let profile = cfg.model_profiles[model];
        let signal = cfg.signal.of(profile.quality);
        let hits = (0..samples)
            .filter(|&i| {
                let y = stream_rng(cfg.master_seed, "acc-label", i, 0).random_range(0..cfg.n_labels);
                let mut rng = stream_rng(cfg.master_seed, "acc-noise", i, u64::from(severity));
                model_output(&profile, signal, cfg.n_labels, y, cfg.noise_multiplier(severity), &mut rng).argmax() == y
            })
            .count();
        hits as f64 / samples as f64
    }

    #[test]
    fn default_signal_levels_separate_qualities() {
        let cfg = StreamConfig::default_mixed(Schedule::Stationary, 3);
        let high = accuracy(&cfg, 0, 0, 10_000);
        let low = accuracy(&cfg, 7, 0, 10_000);
        assert!(high >= 0.85, "high-quality accuracy {high}");
        assert!(low <= 0.4, "low-quality accuracy {low}");
    }

    #[test]
    fn accuracy_non_increasing_in_severity() {
        let cfg = StreamConfig::default_mixed(Schedule::Stationary, 5);
        for model in [0, 6, 7] {
            let accs: Vec<f64> = (0..=MAX_SEVERITY).map(|s| accuracy(&cfg, model, s, 10_000)).collect();
            for w in accs.windows(2) {
                // Monte-Carlo slack of about two standard errors.
                assert!(w[1] <= w[0] + 0.01, "model {model}: {accs:?}");
            }
        }
    }

    #[test]
    fn round_trip_through_file_format() {
        let mut cfg = StreamConfig::default_mixed(Schedule::Sudden, 8);
        cfg.horizon = 30;
        let mut buf = Vec::new();
        write_stream(&mut buf, cfg.n_labels, synthetic_stream(&cfg)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,true_label,severity,model_id,p_0,"));
        assert!(!text.contains('\r'));
        let loaded: Vec<StreamStep> = StreamReader::new(buf.as_slice())
            .unwrap()
            .expect_models(8)
            .map(|s| s.unwrap())
            .collect();
        let original: Vec<StreamStep> = synthetic_stream(&cfg).map(|s| s.unwrap()).collect();
        assert_eq!(loaded, original);
    }

    #[test]
    fn non_simplex_row_is_rejected() {
        let data = "t,true_label,severity,model_id,p_0,p_1\n1,0,0,0,0.5,0.3\n";
        let err = StreamReader::new(data.as_bytes()).unwrap().next().unwrap().unwrap_err();
        assert!(matches!(err, Error::NotSimplex { .. }), "{err}");
    }

    #[test]
    fn missing_model_column_is_a_schema_error() {
        let data = "t,true_label,severity,p_0,p_1\n1,0,0,0.5,0.5\n";
        assert!(matches!(StreamReader::new(data.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn model_count_mismatch_is_reported() {
        let data = "t,true_label,severity,model_id,p_0,p_1\n\
                    1,0,0,0,0.5,0.5\n1,0,0,1,0.5,0.5\n\
                    2,1,0,0,0.5,0.5\n";
        let steps: Vec<_> = StreamReader::new(data.as_bytes()).unwrap().collect();
        assert!(steps[0].is_ok());
        assert!(matches!(steps[1], Err(Error::ModelCountMismatch { t: 2, expected: 2, found: 1 })));

        let one = "t,true_label,severity,model_id,p_0,p_1\n1,0,0,0,0.5,0.5\n";
        let err = StreamReader::new(one.as_bytes()).unwrap().expect_models(3).next().unwrap();
        assert!(matches!(err, Err(Error::ModelCountMismatch { .. })));
    }

    #[test]
    fn malformed_rows_are_reported() {
        let data = "t,true_label,severity,model_id,p_0,p_1\n1,0,0,0,abc,0.5\n";
        let err = StreamReader::new(data.as_bytes()).unwrap().next().unwrap();
        assert!(matches!(err, Err(Error::MalformedRow { .. })));
        let data = "t,true_label,severity,model_id,p_0,p_1\n1,2,0,0,0.5,0.5\n";
        let err = StreamReader::new(data.as_bytes()).unwrap().next().unwrap();
        assert!(matches!(err, Err(Error::MalformedRow { .. })));
    }
}
