//! Brute-force, grid and Monte-Carlo references for the fast paths.
//!
//! Exact oracles report the largest absolute deviation. Monte-Carlo oracles
//! report the largest per-instance relative deviation, the pooled relative
//! deviation over all instances and the largest per-instance z-score; they
//! pass when the pooled deviation is inside the tolerance and no single
//! instance is further than [`Z_LIMIT`] standard errors from its target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{effective_subset, generate_graph, select_node, FeedbackGraph, GraphParams};
use crate::metrics::{best_constant_alpha, cumulative_pinball};
use crate::rng::{derive_seed, sample_categorical};
use crate::scoring::CalibrationStore;

/// Largest tolerated per-instance z-score for Monte-Carlo oracles.
pub const Z_LIMIT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleName {
    Quantile,
    AlphaBar,
    InclusionProb,
    LossUnbiasedness,
    RegretGrid,
}

impl OracleName {
    pub const ALL: [OracleName; 5] = [
        OracleName::Quantile,
        OracleName::AlphaBar,
        OracleName::InclusionProb,
        OracleName::LossUnbiasedness,
        OracleName::RegretGrid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OracleName::Quantile => "quantile",
            OracleName::AlphaBar => "alpha_bar",
            OracleName::InclusionProb => "inclusion_prob",
            OracleName::LossUnbiasedness => "loss_unbiasedness",
            OracleName::RegretGrid => "regret_grid",
        }
    }

    /// Tolerance the oracle is checked against.
    pub fn tolerance(self) -> f64 {
        match self {
            OracleName::Quantile => 0.0,
            OracleName::AlphaBar | OracleName::RegretGrid => 1e-4,
            OracleName::InclusionProb => 0.01,
            OracleName::LossUnbiasedness => 0.02,
        }
    }
}

impl std::str::FromStr for OracleName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OracleName::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::UnknownOracle(s.to_string()))
    }
}

impl std::fmt::Display for OracleName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleParams {
    pub instances: usize,
    /// Monte-Carlo draws per instance.
    pub draws: usize,
    pub seed: u64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            instances: 1000,
            draws: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub instances: usize,
    pub comparisons: usize,
    pub tolerance: f64,
    /// Absolute for exact and grid oracles, relative for Monte-Carlo ones.
    pub max_deviation: f64,
    pub pooled_deviation: Option<f64>,
    pub max_z: Option<f64>,
    pub passed: bool,
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: instances={} comparisons={} max_deviation={:.3e} tolerance={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.comparisons,
            self.max_deviation,
            self.tolerance
        )?;
        if let Some(p) = self.pooled_deviation {
            write!(f, " pooled_deviation={p:.3e}")?;
        }
        if let Some(z) = self.max_z {
            write!(f, " max_z={z:.2}")?;
        }
        Ok(())
    }
}

/// Scans the sorted scores for the first position whose empirical level
/// `i/n` reaches `⌈(n+1)(1−α)⌉/n`.
pub fn scan_quantile(scores: &[f64], alpha: f64) -> f64 {
    let n = scores.len();
    if n == 0 {
        return f64::INFINITY;
    }
    let level = ((n + 1) as f64 * (1.0 - alpha)).ceil() / n as f64;
    if level > 1.0 {
        return f64::INFINITY;
    }
    if level <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .iter()
        .enumerate()
        .find(|(i, _)| (i + 1) as f64 / n as f64 >= level)
        .map(|(_, &s)| s)
        .unwrap_or(f64::INFINITY)
}

/// Largest `α` on the grid `{0, res, 2·res, …, 1}` whose scanned threshold
/// admits `true_score`.
pub fn grid_alpha_bar(scores: &[f64], true_score: f64, resolution: f64) -> f64 {
    let steps = (1.0 / resolution).round() as usize;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    (0..=steps)
        .rev()
        .map(|i| i as f64 * resolution)
        .find(|&a| true_score <= scan_quantile(&sorted, a))
        .unwrap_or(f64::NAN)
}

/// Minimum of `Σ_t L(ᾱ_t, α)` over the grid `lo, lo + res, …, hi`.
pub fn grid_best_alpha(alpha_bars: &[f64], target_alpha: f64, lo: f64, hi: f64, resolution: f64) -> (f64, f64) {
    let steps = ((hi - lo) / resolution).round() as usize;
    (0..=steps)
        .map(|i| lo + i as f64 * resolution)
        .map(|a| (a, cumulative_pinball(alpha_bars, a, target_alpha)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("grid is non-empty")
}

/// Inclusion frequencies with the node PMF and connection PMFs of `graph`
/// held fixed: each draw picks a node from `p′` and redraws its `N` links.
pub fn mc_inclusion_fixed<R: Rng + ?Sized>(graph: &FeedbackGraph, draws: usize, rng: &mut R) -> Vec<f64> {
    let m = graph.n_models();
    let mut hits = vec![0usize; m];
    let mut row = vec![false; m];
    for _ in 0..draws {
        let node = select_node(graph, rng);
        row.iter_mut().for_each(|x| *x = false);
        for _ in 0..graph.max_links() {
            row[sample_categorical(graph.connect_pmf(node), rng)] = true;
        }
        for (h, &linked) in hits.iter_mut().zip(&row) {
            *h += usize::from(linked);
        }
    }
    hits.into_iter().map(|h| h as f64 / draws as f64).collect()
}

/// How the Monte-Carlo unbiasedness check resamples feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// Regenerate the whole graph each draw.
    FullGraph,
    /// Keep one graph's node PMF and redraw only the chosen node's links.
    FixedNodePmf,
}

/// Monte-Carlo mean of `l^m = L^m·𝕀[m ∈ S]/q^m` for frozen weights and
/// realised losses.
pub fn mc_importance_loss<R: Rng + ?Sized>(
    weights: &[f64],
    losses: &[f64],
    params: &GraphParams,
    mode: Resampling,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let m = weights.len();
    let mut sums = vec![0.0; m];
    match mode {
        Resampling::FullGraph => {
            for _ in 0..draws {
                let g = generate_graph(weights, params, rng)?;
                let node = select_node(&g, rng);
                for k in effective_subset(&g, node) {
                    sums[k] += losses[k] / g.inclusion_prob()[k];
                }
            }
        }
        Resampling::FixedNodePmf => {
            let g = generate_graph(weights, params, rng)?;
            let freq = mc_inclusion_fixed(&g, draws, rng);
            for k in 0..m {
                sums[k] = losses[k] * freq[k] / g.inclusion_prob()[k] * draws as f64;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / draws as f64).collect())
}

fn instance_rng(params: &OracleParams, name: OracleName, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(params.seed, name.as_str(), i as u64, 0))
}

/// Random calibration store with deliberate ties.
fn random_store<R: Rng + ?Sized>(rng: &mut R, max_len: usize) -> Vec<f64> {
    let n = rng.random_range(0..=max_len);
    let levels = rng.random_range(1..=8u32);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                f64::from(rng.random_range(0..levels)) / f64::from(levels)
            } else {
                rng.random::<f64>() * 1.5
            }
        })
        .collect()
}

fn random_graph_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<(Vec<f64>, GraphParams)> {
    let m = rng.random_range(2..=8usize);
    let j = [1usize, 2, 3, 4][rng.random_range(0..4)];
    let n = rng.random_range(1..=m);
    let eta: Vec<f64> = (0..j).map(|_| rng.random_range(0.1..=1.0)).collect();
    let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..5.0)).collect();
    Ok((weights, GraphParams::new(j, n, eta)?))
}

#[derive(Default)]
struct McTally {
    max_rel: f64,
    max_z: f64,
    observed: f64,
    expected: f64,
    comparisons: usize,
}

impl McTally {
    /// `freq` estimates a Bernoulli mean `p` from `draws` samples, scaled by
    /// `scale` on both sides.
    fn add(&mut self, estimate: f64, target: f64, p: f64, scale: f64, draws: usize) {
        let se = scale * (p * (1.0 - p) / draws as f64).sqrt();
        let diff = (estimate - target).abs();
        self.max_rel = self.max_rel.max(diff / target);
        if se > 0.0 {
            self.max_z = self.max_z.max(diff / se);
        } else if diff > 1e-12 {
            self.max_z = f64::INFINITY;
        }
        self.observed += estimate;
        self.expected += target;
        self.comparisons += 1;
    }

    fn report(self, name: OracleName, instances: usize) -> OracleReport {
        let pooled = (self.observed - self.expected).abs() / self.expected;
        OracleReport {
            name: name.to_string(),
            instances,
            comparisons: self.comparisons,
            tolerance: name.tolerance(),
            max_deviation: self.max_rel,
            pooled_deviation: Some(pooled),
            max_z: Some(self.max_z),
            passed: pooled < name.tolerance() && self.max_z < Z_LIMIT,
        }
    }
}

/// Runs one oracle against the fast implementation.
pub fn oracle_check(name: OracleName, params: &OracleParams) -> Result<OracleReport> {
    if params.instances == 0 {
        return Err(Error::InvalidParams("instances must be >= 1".into()));
    }
    let tol = name.tolerance();
    let exact = |max_dev: f64, comparisons: usize, passed: bool| OracleReport {
        name: name.to_string(),
        instances: params.instances,
        comparisons,
        tolerance: tol,
        max_deviation: max_dev,
        pooled_deviation: None,
        max_z: None,
        passed,
    };
    match name {
        OracleName::Quantile => {
            let mut max_dev: f64 = 0.0;
            let mut mismatches = 0usize;
            let mut comparisons = 0usize;
            for i in 0..params.instances {
                let mut rng = instance_rng(params, name, i);
                let scores = random_store(&mut rng, 40);
                let store = CalibrationStore::from_scores(scores.clone());
                for _ in 0..20 {
                    let alpha = rng.random_range(-0.2..1.2);
                    let fast = store.threshold(alpha);
                    let slow = scan_quantile(&scores, alpha);
                    comparisons += 1;
                    if fast != slow {
                        mismatches += 1;
                        let d = (fast - slow).abs();
                        max_dev = max_dev.max(if d.is_nan() { f64::INFINITY } else { d });
                    }
                }
            }
            Ok(exact(max_dev, comparisons, mismatches == 0))
        }
        OracleName::AlphaBar => {
            let mut max_dev: f64 = 0.0;
            let mut ok = true;
            let mut comparisons = 0usize;
            for i in 0..params.instances {
                let mut rng = instance_rng(params, name, i);
                let scores = random_store(&mut rng, 12);
                let store = CalibrationStore::from_scores(scores.clone());
                let probe = if !scores.is_empty() && rng.random_bool(0.5) {
                    scores[rng.random_range(0..scores.len())]
                } else {
                    rng.random_range(-0.2..1.7)
                };
                let fast = store.alpha_bar(probe);
                let grid = grid_alpha_bar(&scores, probe, 1e-4);
                comparisons += 1;
                // The covered set is open at ᾱ, so the grid sits just below it.
                let d = fast - grid;
                ok &= (-1e-12..=tol + 1e-12).contains(&d);
                max_dev = max_dev.max(d.abs());
            }
            Ok(exact(max_dev, comparisons, ok))
        }
        OracleName::RegretGrid => {
            let mut max_dev: f64 = 0.0;
            let mut ok = true;
            let mut comparisons = 0usize;
            for i in 0..params.instances {
                let mut rng = instance_rng(params, name, i);
                let len = rng.random_range(1..=30);
                let bars: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
                let target = rng.random_range(0.02..0.5);
                let (_, fast) = best_constant_alpha(&bars, target, -0.05, 1.05);
                let (_, grid) = grid_best_alpha(&bars, target, -0.05, 1.05, 1e-4);
                comparisons += 1;
                // Per-step loss is 1-Lipschitz in α, so the grid is within
                // one resolution step per term.
                let d = (grid - fast) / len as f64;
                ok &= d >= -1e-12 && d <= tol + 1e-12;
                max_dev = max_dev.max(d.abs());
            }
            Ok(exact(max_dev, comparisons, ok))
        }
        OracleName::InclusionProb => {
            let mut tally = McTally::default();
            for i in 0..params.instances {
                let mut rng = instance_rng(params, name, i);
                let (weights, gp) = random_graph_instance(&mut rng)?;
                let g = generate_graph(&weights, &gp, &mut rng)?;
                let freq = mc_inclusion_fixed(&g, params.draws, &mut rng);
                for (f, &q) in freq.iter().zip(g.inclusion_prob()) {
                    tally.add(*f, q, q, 1.0, params.draws);
                }
            }
            Ok(tally.report(name, params.instances))
        }
        OracleName::LossUnbiasedness => {
            let mut tally = McTally::default();
            for i in 0..params.instances {
                let mut rng = instance_rng(params, name, i);
                let (weights, gp) = random_graph_instance(&mut rng)?;
                let losses: Vec<f64> = (0..weights.len()).map(|_| rng.random_range(0.01..0.9)).collect();
                // A single selective node makes the node PMF degenerate, so
                // full regeneration is exact there.
                let mode = if gp.n_selective == 1 {
                    Resampling::FullGraph
                } else {
                    Resampling::FixedNodePmf
                };
                // Replays the first graph the estimator draws; with one node
                // `q` does not depend on the links at all.
                let q = generate_graph(&weights, &gp, &mut rng.clone())?.inclusion_prob().to_vec();
                let est = mc_importance_loss(&weights, &losses, &gp, mode, params.draws, &mut rng)?;
                for k in 0..weights.len() {
                    tally.add(est[k], losses[k], q[k], losses[k] / q[k], params.draws);
                }
            }
            Ok(tally.report(name, params.instances))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for o in OracleName::ALL {
            assert_eq!(o.as_str().parse::<OracleName>().unwrap(), o);
        }
        assert!(matches!("median".parse::<OracleName>(), Err(Error::UnknownOracle(_))));
    }

    #[test]
    fn scan_examples() {
        assert_eq!(scan_quantile(&[0.4, 0.1, 0.3, 0.2], 0.5), 0.3);
        assert_eq!(scan_quantile(&[], 0.5), f64::INFINITY);
        assert_eq!(scan_quantile(&[0.1], 0.1), f64::INFINITY);
        assert_eq!(scan_quantile(&[0.1, 0.2], 1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn small_checks_pass() {
        let p = OracleParams {
            instances: 50,
            draws: 20_000,
            seed: 1,
        };
        for o in OracleName::ALL {
            let r = oracle_check(o, &p).unwrap();
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn full_regeneration_is_exact_for_one_node() {
        let weights = [3.0, 1.0, 0.5];
        let losses = [0.2, 0.4, 0.1];
        let gp = GraphParams::uniform(1, 2, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let est = mc_importance_loss(&weights, &losses, &gp, Resampling::FullGraph, 100_000, &mut rng).unwrap();
        for (e, l) in est.iter().zip(losses) {
            assert!((e - l).abs() / l < 0.02, "{e} vs {l}");
        }
    }
}
