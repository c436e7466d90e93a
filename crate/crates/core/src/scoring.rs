//! Nonconformity scoring, calibration storage and prediction-set construction.
//!
//! Scores follow the regularised adaptive-prediction-set form
//!
//! ```text
//! S(X, Y) = ξ·√max(k_Y − k_reg, 0) + u·p[Y] + ρ(Y)
//! ```
//!
//! where `k_Y` counts labels with probability `≥ p[Y]` (ties included) and
//! `ρ(Y)` sums the probabilities strictly greater than `p[Y]`.
//!
//! Thresholds use the level `⌈t(1−α)⌉/(t−1)` over the `t−1` calibration
//! scores seen so far, read as the 1-based index `⌈t(1−α)⌉` into the sorted
//! scores. Levels above one give `+∞` (every label is kept) and levels at or
//! below zero give `−∞` (the empty set).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` accepted by [`ProbVector::new`].
pub const SIMPLEX_TOL: f64 = 1e-6;

/// One model's predicted distribution over labels at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidProbVector("no labels".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidProbVector(format!("entry {bad} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidProbVector(format!("entries sum to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Builds a vector after rescaling to sum to one.
    pub fn normalized(mut probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::InvalidProbVector(format!("cannot normalise sum {sum}")));
        }
        probs.iter_mut().for_each(|p| *p /= sum);
        Self::new(probs)
    }

    pub fn n_labels(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// Hyperparameters of the score: `ξ`, `k_reg` and the label count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    pub xi: f64,
    pub k_reg: usize,
    pub n_labels: usize,
}

impl ScoreParams {
    pub fn new(xi: f64, k_reg: usize, n_labels: usize) -> Result<Self> {
        let p = Self { xi, k_reg, n_labels };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi.is_finite() && self.xi >= 0.0) {
            return Err(Error::InvalidParams(format!("xi = {} must be >= 0", self.xi)));
        }
        if self.n_labels == 0 {
            return Err(Error::InvalidParams("n_labels must be >= 1".into()));
        }
        if self.k_reg > self.n_labels {
            return Err(Error::InvalidParams(format!(
                "k_reg = {} exceeds n_labels = {}",
                self.k_reg, self.n_labels
            )));
        }
        Ok(())
    }
}

fn check_inputs(p: &ProbVector, u: f64, params: &ScoreParams) -> Result<()> {
    if p.n_labels() != params.n_labels {
        return Err(Error::InvalidProbVector(format!(
            "{} entries, expected {}",
            p.n_labels(),
            params.n_labels
        )));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidUniform(u));
    }
    Ok(())
}

#[inline]
fn combine(params: &ScoreParams, k_y: usize, u: f64, p_y: f64, rho: f64) -> f64 {
    let excess = k_y.saturating_sub(params.k_reg) as f64;
    params.xi * excess.sqrt() + u * p_y + rho
}

/// Score of label `y` under prediction `p` with randomisation `u`.
pub fn nonconformity_score(p: &ProbVector, y: usize, u: f64, params: &ScoreParams) -> Result<f64> {
    check_inputs(p, u, params)?;
    let probs = p.as_slice();
    let p_y = *probs.get(y).ok_or(Error::InvalidLabel {
        label: y,
        n_labels: params.n_labels,
    })?;
    let k_y = probs.iter().filter(|&&q| q >= p_y).count();
    // Accumulate in descending order so the value matches `ScoreTable` bit for bit.
    let mut greater: Vec<f64> = probs.iter().copied().filter(|&q| q > p_y).collect();
    greater.sort_unstable_by(|a, b| b.total_cmp(a));
    let rho = greater.iter().fold(0.0, |acc, q| acc + q);
    Ok(combine(params, k_y, u, p_y, rho))
}

/// Scores of every label for one `(model, timestep)`, computed in one sort.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    scores: Vec<f64>,
}

impl ScoreTable {
    pub fn new(p: &ProbVector, u: f64, params: &ScoreParams) -> Result<Self> {
        check_inputs(p, u, params)?;
        let probs = p.as_slice();
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_unstable_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

        let mut scores = vec![0.0; probs.len()];
        let mut rho = 0.0;
        let mut start = 0;
        while start < order.len() {
            let level = probs[order[start]];
            let end = order[start..]
                .iter()
                .position(|&i| probs[i] != level)
                .map_or(order.len(), |off| start + off);
            for &label in &order[start..end] {
                scores[label] = combine(params, end, u, level, rho);
            }
            for &label in &order[start..end] {
                rho += probs[label];
            }
            start = end;
        }
        Ok(Self { scores })
    }

    pub fn score(&self, label: usize) -> f64 {
        self.scores[label]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Labels whose score does not exceed `threshold`.
    pub fn prediction_set(&self, threshold: f64) -> PredictionSet {
        let labels = self
            .scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s <= threshold)
            .map(|(i, _)| i)
            .collect();
        PredictionSet { labels, threshold }
    }

    /// Size of the set at `threshold` without materialising it.
    pub fn set_size(&self, threshold: f64) -> usize {
        self.scores.iter().filter(|&&s| s <= threshold).count()
    }
}

/// A conformal prediction set together with the threshold that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub labels: Vec<usize>,
    pub threshold: f64,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.labels.binary_search(&label).is_ok()
    }
}

/// `{Y : S(p, Y, u) ≤ threshold}`, with the same `u` for every candidate.
pub fn build_prediction_set(
    p: &ProbVector,
    threshold: f64,
    u: f64,
    params: &ScoreParams,
) -> Result<PredictionSet> {
    Ok(ScoreTable::new(p, u, params)?.prediction_set(threshold))
}

/// Sorted multiset of historical nonconformity scores for one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationStore {
    scores: Vec<f64>,
}

impl CalibrationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_scores(mut scores: Vec<f64>) -> Self {
        scores.sort_unstable_by(f64::total_cmp);
        Self { scores }
    }

    /// Number of scored pairs, i.e. `t − 1` at time `t`.
    pub fn count(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn insert(&mut self, score: f64) {
        debug_assert!(!score.is_nan());
        let at = self.scores.partition_point(|&s| s <= score);
        self.scores.insert(at, score);
    }

    /// Merges an unsorted batch in `O(n + k log k)`; the batch is drained.
    pub fn merge_batch(&mut self, batch: &mut Vec<f64>) {
        match batch.len() {
            0 => return,
            1 => {
                self.insert(batch[0]);
                batch.clear();
                return;
            }
            _ => {}
        }
        batch.sort_unstable_by(f64::total_cmp);
        let old_len = self.scores.len();
        self.scores.resize(old_len + batch.len(), 0.0);
        // Merge from the back so no element is moved twice.
        let (mut i, mut j, mut k) = (old_len, batch.len(), self.scores.len());
        while j > 0 {
            if i > 0 && self.scores[i - 1] > batch[j - 1] {
                self.scores[k - 1] = self.scores[i - 1];
                i -= 1;
            } else {
                self.scores[k - 1] = batch[j - 1];
                j -= 1;
            }
            k -= 1;
        }
        batch.clear();
    }

    /// 1-based quantile index `⌈t(1−α)⌉` with `t = count + 1`, or `None` for
    /// the `+∞` clamp. Zero or negative indices are returned as `Some(0)`.
    fn level_index(&self, alpha: f64) -> Option<usize> {
        let n = self.scores.len();
        if n == 0 {
            return None;
        }
        let k = ((n + 1) as f64 * (1.0 - alpha)).ceil();
        if k > n as f64 || k.is_nan() {
            None
        } else if k <= 0.0 {
            Some(0)
        } else {
            Some(k as usize)
        }
    }

    /// Threshold `q̂_α` for miscoverage level `alpha`.
    pub fn threshold(&self, alpha: f64) -> f64 {
        match self.level_index(alpha) {
            None => f64::INFINITY,
            Some(0) => f64::NEG_INFINITY,
            Some(k) => self.scores[k - 1],
        }
    }

    /// Largest miscoverage level whose threshold still admits `true_score`.
    ///
    /// With `r = |{s ≥ true_score}|` the covered levels are exactly
    /// `α < 1 − (n − r)/(n + 1)`; the supremum of that open interval is
    /// returned. An empty store returns `1.0`.
    pub fn alpha_bar(&self, true_score: f64) -> f64 {
        let n = self.scores.len();
        if n == 0 {
            return 1.0;
        }
        let below = self.scores.partition_point(|&s| s < true_score);
        1.0 - below as f64 / (n + 1) as f64
    }
}

pub fn quantile_threshold(store: &CalibrationStore, alpha: f64) -> f64 {
    store.threshold(alpha)
}

pub fn optimal_alpha_bar(store: &CalibrationStore, true_score: f64) -> f64 {
    store.alpha_bar(true_score)
}

pub fn insert_calibration(mut store: CalibrationStore, score: f64) -> CalibrationStore {
    store.insert(score);
    store
}
