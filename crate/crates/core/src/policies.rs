//! Online decision loops over an ensemble of models.
//!
//! All loops follow the same protocol at time `t`: build a prediction set from
//! the models' outputs, observe the true label, update the ensemble, and add
//! every model's score of `(X_t, Y_t)` to that model's calibration store.
//!
//! Calibration scores are appended to a per-model pending buffer and merged
//! into the sorted store only when the model is next queried. A policy that
//! queries `N` models per step therefore pays `O(N·t)` for calibration
//! upkeep, while one that queries all `M` models pays `O(M·t)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{pinball_loss, AlphaState};
use crate::error::{Error, Result};
use crate::graph::{effective_subset, generate_graph, select_node, FeedbackGraph, GraphParams};
use crate::rng::{sample_categorical, stream_rng};
use crate::scoring::{nonconformity_score, CalibrationStore, PredictionSet, ProbVector, ScoreParams, ScoreTable};

/// Weights are rescaled by `1/max` once the largest drops below this.
pub const WEIGHT_UNDERFLOW: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Gmocp,
    Egmocp,
    Mocp,
    Coma,
    Aci,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Gmocp => "gmocp",
            PolicyKind::Egmocp => "egmocp",
            PolicyKind::Mocp => "mocp",
            PolicyKind::Coma => "coma",
            PolicyKind::Aci => "aci",
        }
    }

    pub fn uses_graph(self) -> bool {
        matches!(self, PolicyKind::Gmocp | PolicyKind::Egmocp)
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmocp" => Ok(PolicyKind::Gmocp),
            "egmocp" => Ok(PolicyKind::Egmocp),
            "mocp" => Ok(PolicyKind::Mocp),
            "coma" => Ok(PolicyKind::Coma),
            "aci" => Ok(PolicyKind::Aci),
            other => Err(Error::Config(format!("unknown policy `{other}`"))),
        }
    }
}

/// Resolved parameters shared by every policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Target miscoverage `α`.
    pub target_alpha: f64,
    /// SF-OGD learning rate `η`.
    pub eta: f64,
    /// Weight step `ε`.
    pub epsilon: f64,
    /// Set-size mix `β` (EGMOCP only).
    pub beta: f64,
    pub graph: GraphParams,
    pub n_models: usize,
    pub score: ScoreParams,
    /// Starting `α_1^m`; defaults to `target_alpha`.
    pub alpha_init: Option<f64>,
    /// COMA weight decay `γ` in `w ← w·exp(−γ·Len)`.
    pub coma_gamma: f64,
    /// Fixed step of the single-model adaptive baseline.
    pub aci_eta: f64,
    /// Model driven by the single-model baseline.
    pub aci_model: usize,
    /// Draw one `u` per timestep for all models instead of one per model.
    pub shared_u: bool,
}

impl PolicyConfig {
    pub fn new(n_models: usize, graph: GraphParams, score: ScoreParams) -> Self {
        Self {
            target_alpha: 0.1,
            eta: 0.05,
            epsilon: 0.5,
            beta: 0.05,
            graph,
            n_models,
            score,
            alpha_init: None,
            coma_gamma: 0.01,
            aci_eta: 0.005,
            aci_model: 0,
            shared_u: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.target_alpha) {
            return Err(Error::Config(format!("target_alpha = {} outside (0, 1)", self.target_alpha)));
        }
        if !open_unit(self.epsilon) {
            return Err(Error::Config(format!("epsilon = {} outside (0, 1)", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta = {} outside [0, 1)", self.beta)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta = {} must be positive", self.eta)));
        }
        if self.n_models == 0 {
            return Err(Error::Config("at least one model is required".into()));
        }
        if self.aci_model >= self.n_models {
            return Err(Error::Config(format!(
                "aci_model = {} but only {} models",
                self.aci_model, self.n_models
            )));
        }
        if !(self.coma_gamma >= 0.0 && self.aci_eta >= 0.0) {
            return Err(Error::Config("coma_gamma and aci_eta must be non-negative".into()));
        }
        self.graph.validate()?;
        self.score.validate()
    }

    pub fn initial_alpha(&self) -> f64 {
        self.alpha_init.unwrap_or(self.target_alpha)
    }

    /// `2^b` with `b = ⌊log₂ J⌋`.
    pub fn step_divisor(&self) -> f64 {
        f64::from(1u32 << self.graph.b())
    }
}

/// Weight, adaptive level and calibration history of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub weight: f64,
    pub alpha_state: AlphaState,
    calibration: CalibrationStore,
    pending: Vec<f64>,
}

impl ModelState {
    pub fn new(alpha: f64, eta: f64) -> Self {
        Self {
            weight: 1.0,
            alpha_state: AlphaState::new(alpha, eta),
            calibration: CalibrationStore::new(),
            pending: Vec::new(),
        }
    }

    /// Sorted calibration store with every recorded score merged in.
    pub fn calibration(&mut self) -> &CalibrationStore {
        self.calibration.merge_batch(&mut self.pending);
        &self.calibration
    }

    /// Total number of recorded scores, merged or not.
    pub fn calibration_count(&self) -> usize {
        self.calibration.count() + self.pending.len()
    }

    pub fn record_score(&mut self, score: f64) {
        self.pending.push(score);
    }
}

/// Per-step random streams, addressed by `(seed, name, t)`.
#[derive(Debug, Clone, Copy)]
pub struct StepRng {
    pub seed: u64,
    pub t: u64,
    pub shared_u: bool,
}

impl StepRng {
    pub fn new(seed: u64, t: u64, shared_u: bool) -> Self {
        Self { seed, t, shared_u }
    }

    pub fn graph(&self) -> rand_chacha::ChaCha8Rng {
        stream_rng(self.seed, "graph", self.t, 0)
    }

    pub fn node(&self) -> rand_chacha::ChaCha8Rng {
        stream_rng(self.seed, "node", self.t, 0)
    }

    pub fn model(&self) -> rand_chacha::ChaCha8Rng {
        stream_rng(self.seed, "model", self.t, 0)
    }

    pub fn vote(&self) -> rand_chacha::ChaCha8Rng {
        stream_rng(self.seed, "vote", self.t, 0)
    }

    /// Score randomisation `U_t` for `model`.
    pub fn u(&self, model: usize) -> f64 {
        let sub = if self.shared_u { 0 } else { model as u64 + 1 };
        stream_rng(self.seed, "u", self.t, sub).random()
    }
}

/// Log line for one online step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub node: usize,
    pub chosen_model: usize,
    pub subset: Vec<usize>,
    pub set_size: usize,
    /// 1 when the final set misses the true label.
    pub err: u8,
    /// Loss estimates `l_t^m` for the models that received feedback.
    pub losses: Vec<(usize, f64)>,
    /// Realised pinball loss of the chosen model, when defined.
    pub chosen_loss: Option<f64>,
    pub wall_nanos: u64,
}

fn check_step(cfg: &PolicyConfig, states: &[ModelState], probs: &[ProbVector], true_label: usize) -> Result<()> {
    if probs.len() != cfg.n_models || states.len() != cfg.n_models {
        return Err(Error::Config(format!(
            "expected {} models, got {} outputs and {} states",
            cfg.n_models,
            probs.len(),
            states.len()
        )));
    }
    if true_label >= cfg.score.n_labels {
        return Err(Error::InvalidLabel {
            label: true_label,
            n_labels: cfg.score.n_labels,
        });
    }
    Ok(())
}

fn rescale_weights(states: &mut [ModelState]) {
    let max = states.iter().map(|s| s.weight).fold(0.0, f64::max);
    if max < WEIGHT_UNDERFLOW && max > 0.0 {
        for s in states.iter_mut() {
            s.weight /= max;
        }
    }
    for s in states.iter_mut() {
        if s.weight.is_nan() || s.weight < f64::MIN_POSITIVE {
            s.weight = f64::MIN_POSITIVE;
        }
    }
}

/// Records `(X_t, Y_t)` in every model's store; `tables` holds the score
/// tables already built this step.
fn record_all(
    states: &mut [ModelState],
    tables: &[Option<ScoreTable>],
    probs: &[ProbVector],
    true_label: usize,
    us: &[f64],
    params: &ScoreParams,
) -> Result<()> {
    for (m, state) in states.iter_mut().enumerate() {
        let score = match &tables[m] {
            Some(table) => table.score(true_label),
            None => nonconformity_score(&probs[m], true_label, us[m], params)?,
        };
        state.record_score(score);
    }
    Ok(())
}

fn draw_us(cfg: &PolicyConfig, rng: &StepRng) -> Vec<f64> {
    (0..cfg.n_models).map(|m| rng.u(m)).collect()
}

/// Outcome of the graph-feedback selection stage.
#[derive(Debug, Clone)]
pub struct Selection {
    pub graph: FeedbackGraph,
    pub node: usize,
    pub subset: Vec<usize>,
    pub chosen: usize,
}

/// Draws a graph, a selective node and, from that node's subset, a model in
/// proportion to its weight.
pub fn select_model<G, N, M>(
    weights: &[f64],
    params: &GraphParams,
    graph_rng: &mut G,
    node_rng: &mut N,
    model_rng: &mut M,
) -> Result<Selection>
where
    G: Rng + ?Sized,
    N: Rng + ?Sized,
    M: Rng + ?Sized,
{
    let graph = generate_graph(weights, params, graph_rng)?;
    let node = select_node(&graph, node_rng);
    let subset = effective_subset(&graph, node);
    let subset_weights: Vec<f64> = subset.iter().map(|&m| weights[m]).collect();
    let chosen = subset[sample_categorical(&subset_weights, model_rng)];
    Ok(Selection {
        graph,
        node,
        subset,
        chosen,
    })
}

fn graph_step(
    states: &mut [ModelState],
    cfg: &PolicyConfig,
    probs: &[ProbVector],
    true_label: usize,
    rng: &StepRng,
    size_aware: bool,
) -> Result<(PredictionSet, StepRecord)> {
    check_step(cfg, states, probs, true_label)?;
    let weights: Vec<f64> = states.iter().map(|s| s.weight).collect();
    let Selection {
        graph,
        node,
        subset,
        chosen,
    } = select_model(&weights, &cfg.graph, &mut rng.graph(), &mut rng.node(), &mut rng.model())?;

    let us = draw_us(cfg, rng);
    let mut tables: Vec<Option<ScoreTable>> = vec![None; cfg.n_models];
    let mut set = None;
    let mut losses = Vec::with_capacity(subset.len());
    let mut chosen_loss = None;
    let divisor = cfg.step_divisor();

    for &m in &subset {
        let table = ScoreTable::new(&probs[m], us[m], &cfg.score)?;
        let state = &mut states[m];
        let alpha = state.alpha_state.alpha;
        let store = state.calibration();
        let threshold = store.threshold(alpha);
        let alpha_bar = store.alpha_bar(table.score(true_label));
        if m == chosen {
            set = Some(table.prediction_set(threshold));
        }
        let loss = pinball_loss(alpha_bar, alpha, cfg.target_alpha);
        let estimate = loss / graph.inclusion_prob()[m];
        let exponent = if size_aware {
            let len = table.set_size(threshold) as f64;
            (1.0 - cfg.beta) * estimate / divisor + cfg.beta * len
        } else {
            estimate / divisor
        };
        state.weight *= (-cfg.epsilon * exponent).exp();
        state.alpha_state.update(alpha_bar, cfg.target_alpha);
        if m == chosen {
            chosen_loss = Some(loss);
        }
        losses.push((m, estimate));
        tables[m] = Some(table);
    }

    record_all(states, &tables, probs, true_label, &us, &cfg.score)?;
    rescale_weights(states);

    let set = set.expect("chosen model belongs to the subset");
    let record = StepRecord {
        t: rng.t,
        node,
        chosen_model: chosen,
        subset,
        set_size: set.len(),
        err: u8::from(!set.contains(true_label)),
        losses,
        chosen_loss,
        wall_nanos: 0,
    };
    Ok((set, record))
}

/// One GMOCP round: graph feedback, subset selection, importance-weighted
/// exponential weights and per-model SF-OGD.
pub fn gmocp_step(
    states: &mut [ModelState],
    cfg: &PolicyConfig,
    probs: &[ProbVector],
    true_label: usize,
    rng: &StepRng,
) -> Result<(PredictionSet, StepRecord)> {
    graph_step(states, cfg, probs, true_label, rng, false)
}

/// GMOCP with the set size `Len(α_t^m)` mixed into the weight exponent.
pub fn egmocp_step(
    states: &mut [ModelState],
    cfg: &PolicyConfig,
    probs: &[ProbVector],
    true_label: usize,
    rng: &StepRng,
) -> Result<(PredictionSet, StepRecord)> {
    graph_step(states, cfg, probs, true_label, rng, true)
}

/// Full-information multi-model selection: every model gets its pinball loss
/// and SF-OGD update each round.
pub fn mocp_step(
    states: &mut [ModelState],
    cfg: &PolicyConfig,
    probs: &[ProbVector],
    true_label: usize,
    rng: &StepRng,
) -> Result<(PredictionSet, StepRecord)> {
    check_step(cfg, states, probs, true_label)?;
    let weights: Vec<f64> = states.iter().map(|s| s.weight).collect();
    let chosen = sample_categorical(&weights, &mut rng.model());
    let us = draw_us(cfg, rng);
    let mut tables: Vec<Option<ScoreTable>> = vec![None; cfg.n_models];
    let mut set = None;
    let mut losses = Vec::with_capacity(cfg.n_models);
    let mut chosen_loss = None;

    for (m, state) in states.iter_mut().enumerate() {
        let table = ScoreTable::new(&probs[m], us[m], &cfg.score)?;
        let alpha = state.alpha_state.alpha;
        let store = state.calibration();
        let threshold = store.threshold(alpha);
        let alpha_bar = store.alpha_bar(table.score(true_label));
        if m == chosen {
            set = Some(table.prediction_set(threshold));
        }
        let loss = pinball_loss(alpha_bar, alpha, cfg.target_alpha);
        state.weight *= (-cfg.epsilon * loss).exp();
        state.alpha_state.update(alpha_bar, cfg.target_alpha);
        if m == chosen {
            chosen_loss = Some(loss);
        }
        losses.push((m, loss));
        tables[m] = Some(table);
    }

    record_all(states, &tables, probs, true_label, &us, &cfg.score)?;
    rescale_weights(states);

    let set = set.expect("chosen model is in range");
    let record = StepRecord {
        t: rng.t,
        node: 0,
        chosen_model: chosen,
        subset: (0..cfg.n_models).collect(),
        set_size: set.len(),
        err: u8::from(!set.contains(true_label)),
        losses,
        chosen_loss,
        wall_nanos: 0,
    };
    Ok((set, record))
}

/// Weighted-majority merge of the per-model sets at a shared adaptive level.
pub fn coma_step(
    states: &mut [ModelState],
    shared: &mut AlphaState,
    cfg: &PolicyConfig,
    probs: &[ProbVector],
    true_label: usize,
    rng: &StepRng,
) -> Result<(PredictionSet, StepRecord)> {
    check_step(cfg, states, probs, true_label)?;
    let total: f64 = states.iter().map(|s| s.weight).sum();
    let norm: Vec<f64> = states.iter().map(|s| s.weight / total).collect();
    let us = draw_us(cfg, rng);
    let vote_u: f64 = rng.vote().random();

    let mut tables: Vec<Option<ScoreTable>> = vec![None; cfg.n_models];
    let mut sets = Vec::with_capacity(cfg.n_models);
    for (m, state) in states.iter_mut().enumerate() {
        let table = ScoreTable::new(&probs[m], us[m], &cfg.score)?;
        let threshold = state.calibration().threshold(shared.alpha);
        sets.push(table.prediction_set(threshold));
        tables[m] = Some(table);
    }

    let set = weighted_vote(&sets, &norm, vote_u, cfg.score.n_labels);
    let err = u8::from(!set.contains(true_label));
    shared.apply_gradient(f64::from(err) - cfg.target_alpha);

    let mut losses = Vec::with_capacity(cfg.n_models);
    for ((m, state), s) in states.iter_mut().enumerate().zip(&sets) {
        let penalty = cfg.coma_gamma * s.len() as f64;
        state.weight *= (-penalty).exp();
        losses.push((m, penalty));
    }
    record_all(states, &tables, probs, true_label, &us, &cfg.score)?;
    rescale_weights(states);

    let chosen = norm
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(m, _)| m);
    let record = StepRecord {
        t: rng.t,
        node: 0,
        chosen_model: chosen,
        subset: (0..cfg.n_models).collect(),
        set_size: set.len(),
        err,
        losses,
        chosen_loss: None,
        wall_nanos: 0,
    };
    Ok((set, record))
}

/// `{Y : Σ_m w̄_m 𝕀[Y ∈ C^m] > (1 + U)/2}`.
pub fn weighted_vote(sets: &[PredictionSet], norm_weights: &[f64], u: f64, n_labels: usize) -> PredictionSet {
    let cut = (1.0 + u) / 2.0;
    let mut mass = vec![0.0; n_labels];
    for (s, w) in sets.iter().zip(norm_weights) {
        for &label in &s.labels {
            mass[label] += w;
        }
    }
    PredictionSet {
        labels: (0..n_labels).filter(|&y| mass[y] > cut).collect(),
        threshold: cut,
    }
}

/// Single-model adaptive conformal step `α ← α + η(α* − err)`.
pub fn aci_step(
    state: &mut ModelState,
    cfg: &PolicyConfig,
    probs: &ProbVector,
    true_label: usize,
    rng: &StepRng,
) -> Result<(PredictionSet, StepRecord)> {
    if true_label >= cfg.score.n_labels {
        return Err(Error::InvalidLabel {
            label: true_label,
            n_labels: cfg.score.n_labels,
        });
    }
    let m = cfg.aci_model;
    let table = ScoreTable::new(probs, rng.u(m), &cfg.score)?;
    let alpha = state.alpha_state.alpha;
    let store = state.calibration();
    let threshold = store.threshold(alpha);
    let true_score = table.score(true_label);
    let alpha_bar = store.alpha_bar(true_score);
    let set = table.prediction_set(threshold);
    let err = u8::from(!set.contains(true_label));
    state.alpha_state.alpha += cfg.aci_eta * (cfg.target_alpha - f64::from(err));
    state.record_score(true_score);

    let record = StepRecord {
        t: rng.t,
        node: 0,
        chosen_model: m,
        subset: vec![m],
        set_size: set.len(),
        err,
        losses: Vec::new(),
        chosen_loss: Some(pinball_loss(alpha_bar, alpha, cfg.target_alpha)),
        wall_nanos: 0,
    };
    Ok((set, record))
}

/// A policy together with its evolving state.
#[derive(Debug, Clone)]
pub struct Policy {
    kind: PolicyKind,
    cfg: PolicyConfig,
    states: Vec<ModelState>,
    shared: AlphaState,
    seed: u64,
    t: u64,
}

impl Policy {
    pub fn new(kind: PolicyKind, cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let alpha = cfg.initial_alpha();
        let states = (0..cfg.n_models).map(|_| ModelState::new(alpha, cfg.eta)).collect();
        Ok(Self {
            kind,
            shared: AlphaState::new(alpha, cfg.eta),
            cfg,
            states,
            seed,
            t: 1,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn states(&self) -> &[ModelState] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [ModelState] {
        &mut self.states
    }

    /// Time index of the next step.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn step_rng(&self) -> StepRng {
        StepRng::new(self.seed, self.t, self.cfg.shared_u)
    }

    /// Normalised model weights.
    pub fn weight_pmf(&self) -> Vec<f64> {
        let total: f64 = self.states.iter().map(|s| s.weight).sum();
        self.states.iter().map(|s| s.weight / total).collect()
    }

    pub fn step(&mut self, probs: &[ProbVector], true_label: usize) -> Result<(PredictionSet, StepRecord)> {
        let rng = self.step_rng();
        let out = match self.kind {
            PolicyKind::Gmocp => gmocp_step(&mut self.states, &self.cfg, probs, true_label, &rng),
            PolicyKind::Egmocp => egmocp_step(&mut self.states, &self.cfg, probs, true_label, &rng),
            PolicyKind::Mocp => mocp_step(&mut self.states, &self.cfg, probs, true_label, &rng),
            PolicyKind::Coma => coma_step(&mut self.states, &mut self.shared, &self.cfg, probs, true_label, &rng),
            PolicyKind::Aci => {
                if probs.len() != self.cfg.n_models {
                    return Err(Error::Config(format!(
                        "expected {} models, got {}",
                        self.cfg.n_models,
                        probs.len()
                    )));
                }
                let m = self.cfg.aci_model;
                aci_step(&mut self.states[m], &self.cfg, &probs[m], true_label, &rng)
            }
        }?;
        self.t += 1;
        Ok(out)
    }

    /// `ᾱ_t^m` of every model for the upcoming step, for offline regret
    /// analysis. Merges all pending calibration scores.
    pub fn hindsight_alpha_bars(&mut self, probs: &[ProbVector], true_label: usize) -> Result<Vec<f64>> {
        let rng = self.step_rng();
        let mut out = Vec::with_capacity(self.states.len());
        for (m, state) in self.states.iter_mut().enumerate() {
            let score = nonconformity_score(&probs[m], true_label, rng.u(m), &self.cfg.score)?;
            out.push(state.calibration().alpha_bar(score));
        }
        Ok(out)
    }

    /// Set size each model would produce for `probs` at its current level.
    pub fn candidate_set_sizes(&mut self, probs: &[ProbVector]) -> Result<Vec<usize>> {
        let rng = self.step_rng();
        let mut out = Vec::with_capacity(self.states.len());
        for (m, state) in self.states.iter_mut().enumerate() {
            let table = ScoreTable::new(&probs[m], rng.u(m), &self.cfg.score)?;
            let alpha = state.alpha_state.alpha;
            out.push(table.set_size(state.calibration().threshold(alpha)));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(m: usize, j: usize, n: usize, eta_e: f64, k: usize) -> PolicyConfig {
        PolicyConfig::new(
            m,
            GraphParams::uniform(j, n, eta_e).unwrap(),
            ScoreParams::new(0.1, 1, k).unwrap(),
        )
    }

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn coma_vote_examples() {
        let yes = PredictionSet { labels: vec![0], threshold: 0.0 };
        let no = PredictionSet { labels: vec![], threshold: 0.0 };
        let third = [1.0 / 3.0; 3];
        let s = weighted_vote(&[yes.clone(), yes.clone(), no.clone()], &third, 0.2, 2);
        assert_eq!(s.labels, vec![0]);
        // U = 1 needs a strict majority above 1, which no weighting reaches.
        let s = weighted_vote(&[yes.clone(), yes.clone(), yes.clone()], &third, 1.0, 2);
        assert!(s.is_empty());
        let s = weighted_vote(&[yes, no], &[0.5, 0.5], 0.0, 2);
        assert!(s.is_empty());
    }

    #[test]
    fn aci_update_direction() {
        let c = cfg(1, 1, 1, 0.5, 3);
        let mut state = ModelState::new(0.1, c.eta);
        let probs = pv(&[0.8, 0.15, 0.05]);
        // Empty store: threshold +∞, certain cover.
        let (_, rec) = aci_step(&mut state, &c, &probs, 2, &StepRng::new(1, 1, false)).unwrap();
        assert_eq!(rec.err, 0);
        assert!((state.alpha_state.alpha - (0.1 + c.aci_eta * 0.1)).abs() < 1e-15);

        // Force a miss with α > 1: threshold −∞.
        state.alpha_state.alpha = 1.5;
        let (_, rec) = aci_step(&mut state, &c, &probs, 0, &StepRng::new(1, 2, false)).unwrap();
        assert_eq!(rec.err, 1);
        assert!((state.alpha_state.alpha - (1.5 - c.aci_eta * 0.9)).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_leaves_weights_unchanged() {
        let mut states = vec![ModelState::new(0.1, 0.05), ModelState::new(0.1, 0.05)];
        states[0].weight = 0.7;
        states[1].weight = 0.3;
        // With α_t = ᾱ_t the pinball loss vanishes; an empty store gives ᾱ = 1.
        for s in states.iter_mut() {
            s.alpha_state.alpha = 1.0;
        }
        let c = cfg(2, 1, 2, 1.0, 2);
        let probs = vec![pv(&[0.6, 0.4]), pv(&[0.3, 0.7])];
        let (_, rec) = gmocp_step(&mut states, &c, &probs, 0, &StepRng::new(3, 1, false)).unwrap();
        assert!(rec.losses.iter().all(|(_, l)| *l == 0.0));
        assert_eq!(states[0].weight, 0.7);
        assert_eq!(states[1].weight, 0.3);
    }

    #[test]
    fn egmocp_size_penalty_ratio() {
        // Two models with identical loss and set sizes 1 and 20.
        let beta: f64 = 0.05;
        let eps: f64 = 0.5;
        let ratio = (eps * beta * 19.0).exp();
        assert!((ratio - 1.608).abs() < 1e-3);

        let k = 20;
        let mut sharp = vec![0.0; k];
        sharp[0] = 1.0;
        let flat = vec![1.0 / k as f64; k];
        let mut c = cfg(2, 1, 2, 1.0, k);
        c.beta = beta;
        c.epsilon = eps;
        c.score = ScoreParams::new(0.0, 0, k).unwrap();
        // One calibration score of 0.5 at α = 0.5 gives threshold 0.5: the
        // sharp model keeps {0} (when u ≤ 0.5), the flat model keeps all 20.
        let mut states = vec![ModelState::new(0.5, 0.05), ModelState::new(0.5, 0.05)];
        for s in states.iter_mut() {
            s.record_score(0.5);
        }
        let probs = vec![ProbVector::new(sharp).unwrap(), ProbVector::new(flat).unwrap()];
        let mut seen = false;
        for seed in 0..50 {
            let mut st = states.clone();
            let rng = StepRng::new(seed, 1, true);
            let (_, rec) = egmocp_step(&mut st, &c, &probs, 0, &rng).unwrap();
            if rec.subset.len() == 2 {
                let l0 = rec.losses[0].1;
                let l1 = rec.losses[1].1;
                let sizes: Vec<usize> = (0..2)
                    .map(|m| ScoreTable::new(&probs[m], rng.u(m), &c.score).unwrap().set_size(0.5))
                    .collect();
                let expect = (-eps * ((1.0 - beta) * (l0 - l1) + beta * (sizes[0] as f64 - sizes[1] as f64))).exp();
                assert!((st[0].weight / st[1].weight - expect).abs() < 1e-12);
                if l0 == l1 && sizes == [1, 20] {
                    assert!((st[0].weight / st[1].weight - ratio).abs() < 1e-12);
                    seen = true;
                }
            }
        }
        assert!(seen, "no draw put both models in the subset with equal losses");
    }

    #[test]
    fn beta_zero_matches_gmocp() {
        let mut c = cfg(3, 2, 2, 0.3, 4);
        c.beta = 0.0;
        let mut a = Policy::new(PolicyKind::Gmocp, c.clone(), 17).unwrap();
        let mut b = Policy::new(PolicyKind::Egmocp, c, 17).unwrap();
        for t in 0..300u64 {
            let probs = vec![
                pv(&[0.7, 0.1, 0.1, 0.1]),
                pv(&[0.25 + 0.01 * (t % 5) as f64, 0.25, 0.25, 0.25]),
                pv(&[0.1, 0.2, 0.3, 0.4]),
            ];
            let y = (t as usize * 7) % 4;
            let (sa, ra) = a.step(&probs, y).unwrap();
            let (sb, rb) = b.step(&probs, y).unwrap();
            assert_eq!(sa, sb);
            assert_eq!(ra, rb);
        }
        for (x, y) in a.states().iter().zip(b.states()) {
            assert_eq!(x.weight, y.weight);
            assert_eq!(x.alpha_state, y.alpha_state);
        }
    }

    #[test]
    fn mocp_identical_losses_keep_weights_equal() {
        // Shared u makes the three models' scores, and so their losses, identical.
        let mut c = cfg(3, 1, 1, 0.5, 3);
        c.shared_u = true;
        let mut p = Policy::new(PolicyKind::Mocp, c, 5).unwrap();
        for t in 0..200 {
            let out = pv(&[0.5, 0.3, 0.2]);
            let probs = vec![out.clone(), out.clone(), out];
            p.step(&probs, t % 3).unwrap();
        }
        let w = p.weight_pmf();
        assert!(w.iter().all(|&x| x == w[0]));
    }

    #[test]
    fn chosen_model_is_in_subset_and_calibration_grows() {
        let c = cfg(4, 2, 2, 0.4, 3);
        let mut p = Policy::new(PolicyKind::Gmocp, c, 9).unwrap();
        for t in 0..100usize {
            let probs: Vec<ProbVector> = (0..4).map(|m| pv(&[1.0 + m as f64, 2.0, 1.0 + (t % 3) as f64])).collect();
            let (set, rec) = p.step(&probs, t % 3).unwrap();
            assert!(rec.subset.contains(&rec.chosen_model));
            assert_eq!(rec.set_size, set.len());
            assert!(p.states().iter().all(|s| s.calibration_count() == t + 1));
            assert!(p.states().iter().all(|s| s.weight > 0.0 && s.weight.is_finite()));
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let c = cfg(2, 1, 1, 0.5, 3);
        let mut p = Policy::new(PolicyKind::Gmocp, c, 1).unwrap();
        assert!(p.step(&[pv(&[1.0, 1.0, 1.0])], 0).is_err());
        assert!(p.step(&[pv(&[1.0, 1.0, 1.0]), pv(&[1.0, 1.0, 1.0])], 3).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(2, 1, 1, 0.5, 3);
        assert!(c.validate().is_ok());
        c.epsilon = 1.0;
        assert!(c.validate().is_err());
        c.epsilon = 0.5;
        c.aci_model = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn weights_rescale_on_underflow() {
        let mut states = vec![ModelState::new(0.1, 0.05), ModelState::new(0.1, 0.05)];
        states[0].weight = 1e-301;
        states[1].weight = 5e-302;
        rescale_weights(&mut states);
        assert_eq!(states[0].weight, 1.0);
        assert!((states[1].weight - 0.5).abs() < 1e-12);
    }
}
