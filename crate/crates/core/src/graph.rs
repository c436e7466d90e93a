//! Bipartite feedback graphs between selective nodes and model nodes.
//!
//! Each of the `J` selective nodes draws `N` model indices i.i.d. from the
//! connection PMF `p^m = (1 − η_e)·w^m/Σw + η_e/M` and links to every index it
//! drew. A node's weight is the summed weight of its linked models; one node
//! is selected in proportion to that weight, and its neighbourhood becomes the
//! candidate subset for the round.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sample_categorical;

/// Exploration coefficients as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    /// Same coefficient on every selective node.
    Scalar(f64),
    /// One coefficient per selective node.
    PerNode(Vec<f64>),
    /// `"preset"`: `[0.2, 0.8]` for two nodes, `[0.1, 0.2, 0.3, 0.4]` for four,
    /// and `0.2` on every node otherwise.
    Named(String),
}

impl Default for EtaSpec {
    fn default() -> Self {
        EtaSpec::Named("preset".into())
    }
}

impl EtaSpec {
    pub fn preset(n_selective: usize) -> Vec<f64> {
        match n_selective {
            2 => vec![0.2, 0.8],
            4 => vec![0.1, 0.2, 0.3, 0.4],
            j => vec![0.2; j],
        }
    }

    pub fn resolve(&self, n_selective: usize) -> Result<Vec<f64>> {
        match self {
            EtaSpec::Scalar(e) => Ok(vec![*e; n_selective]),
            EtaSpec::PerNode(v) if v.len() == n_selective => Ok(v.clone()),
            EtaSpec::PerNode(v) => Err(Error::Config(format!(
                "{} exploration coefficients for {} selective nodes",
                v.len(),
                n_selective
            ))),
            EtaSpec::Named(name) if name == "preset" => Ok(Self::preset(n_selective)),
            EtaSpec::Named(name) => Err(Error::Config(format!("unknown eta_e preset `{name}`"))),
        }
    }
}

/// Shape of the graph: `J` selective nodes, `N` draws per node, per-node `η_e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    pub n_selective: usize,
    pub max_links: usize,
    pub eta_e: Vec<f64>,
}

impl GraphParams {
    pub fn new(n_selective: usize, max_links: usize, eta_e: Vec<f64>) -> Result<Self> {
        let p = Self {
            n_selective,
            max_links,
            eta_e,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(n_selective: usize, max_links: usize, eta_e: f64) -> Result<Self> {
        Self::new(n_selective, max_links, vec![eta_e; n_selective])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_selective == 0 || self.max_links == 0 {
            return Err(Error::InvalidParams("J and N must both be >= 1".into()));
        }
        if self.eta_e.len() != self.n_selective {
            return Err(Error::InvalidParams(format!(
                "{} exploration coefficients for J = {}",
                self.eta_e.len(),
                self.n_selective
            )));
        }
        if let Some(e) = self.eta_e.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(Error::InvalidParams(format!("eta_e = {e} outside (0, 1]")));
        }
        Ok(())
    }

    /// `b = ⌊log₂ J⌋`, the exponent in the weight-step divisor `2^b`.
    pub fn b(&self) -> u32 {
        self.n_selective.ilog2()
    }
}

/// `p^m = (1 − η_e)·w^m/Σw + η_e/M`.
pub fn connection_pmf(weights: &[f64], eta_e: f64) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::InvalidParams("no models".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidParams("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    let uniform = eta_e / weights.len() as f64;
    Ok(weights
        .iter()
        .map(|w| (1.0 - eta_e) * w / total + uniform)
        .collect())
}

/// One realised graph with its derived PMFs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGraph {
    n_models: usize,
    max_links: usize,
    /// Row-major `J × M` adjacency.
    adjacency: Vec<bool>,
    /// Row-major `J × M`; row `j` is the connection PMF under node `j`'s `η_e`.
    connect_pmf: Vec<f64>,
    node_weights: Vec<f64>,
    node_pmf: Vec<f64>,
    inclusion_prob: Vec<f64>,
}

impl FeedbackGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_pmf.len()
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn max_links(&self) -> usize {
        self.max_links
    }

    pub fn linked(&self, node: usize, model: usize) -> bool {
        self.adjacency[node * self.n_models + model]
    }

    pub fn adjacency_row(&self, node: usize) -> &[bool] {
        &self.adjacency[node * self.n_models..(node + 1) * self.n_models]
    }

    pub fn connect_pmf(&self, node: usize) -> &[f64] {
        &self.connect_pmf[node * self.n_models..(node + 1) * self.n_models]
    }

    /// `u^j`: summed weight of the models linked to each node.
    pub fn node_weights(&self) -> &[f64] {
        &self.node_weights
    }

    /// `p′^j = u^j / Σ u`.
    pub fn node_pmf(&self) -> &[f64] {
        &self.node_pmf
    }

    /// `q^m = Σ_j p′^j (1 − (1 − p^{m,j})^N)`.
    pub fn inclusion_prob(&self) -> &[f64] {
        &self.inclusion_prob
    }
}

/// Draws a graph from the current model weights.
pub fn generate_graph<R: Rng + ?Sized>(
    weights: &[f64],
    params: &GraphParams,
    rng: &mut R,
) -> Result<FeedbackGraph> {
    params.validate()?;
    let m = weights.len();
    let j_count = params.n_selective;
    let mut adjacency = vec![false; j_count * m];
    let mut connect = Vec::with_capacity(j_count * m);
    let mut node_weights = Vec::with_capacity(j_count);

    let mut cached: Option<(f64, Vec<f64>)> = None;
    for (j, &eta) in params.eta_e.iter().enumerate() {
        let pmf = match &cached {
            Some((e, pmf)) if *e == eta => pmf.clone(),
            _ => {
                let pmf = connection_pmf(weights, eta)?;
                cached = Some((eta, pmf.clone()));
                pmf
            }
        };
        let row = &mut adjacency[j * m..(j + 1) * m];
        for _ in 0..params.max_links {
            row[sample_categorical(&pmf, rng)] = true;
        }
        node_weights.push(
            row.iter()
                .zip(weights)
                .filter(|(&linked, _)| linked)
                .map(|(_, w)| w)
                .sum::<f64>(),
        );
        connect.extend_from_slice(&pmf);
    }

    let total: f64 = node_weights.iter().sum();
    let node_pmf: Vec<f64> = if total > 0.0 {
        node_weights.iter().map(|u| u / total).collect()
    } else {
        vec![1.0 / j_count as f64; j_count]
    };

    let n = params.max_links as i32;
    let inclusion_prob = (0..m)
        .map(|model| {
            node_pmf
                .iter()
                .enumerate()
                .map(|(j, pj)| pj * (1.0 - (1.0 - connect[j * m + model]).powi(n)))
                .sum()
        })
        .collect();

    Ok(FeedbackGraph {
        n_models: m,
        max_links: params.max_links,
        adjacency,
        connect_pmf: connect,
        node_weights,
        node_pmf,
        inclusion_prob,
    })
}

/// Categorical draw of a selective node from `p′`.
pub fn select_node<R: Rng + ?Sized>(graph: &FeedbackGraph, rng: &mut R) -> usize {
    sample_categorical(graph.node_pmf(), rng)
}

/// `S_t`: models linked to `node`, in index order.
pub fn effective_subset(graph: &FeedbackGraph, node: usize) -> Vec<usize> {
    graph
        .adjacency_row(node)
        .iter()
        .enumerate()
        .filter(|(_, &linked)| linked)
        .map(|(m, _)| m)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn connection_pmf_examples() {
        let p = connection_pmf(&[5.0, 0.1, 2.0], 1.0).unwrap();
        assert!(p.iter().all(|&x| close(x, 1.0 / 3.0)));
        let p = connection_pmf(&[3.0, 1.0], 0.0).unwrap();
        assert!(close(p[0], 0.75) && close(p[1], 0.25));
        let p = connection_pmf(&[3.0, 1.0], 0.5).unwrap();
        assert!(close(p[0], 0.625) && close(p[1], 0.375));
        assert!(matches!(connection_pmf(&[0.0, 0.0], 0.3), Err(Error::ZeroWeights)));
    }

    #[test]
    fn closed_form_inclusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = generate_graph(&[1.0, 4.0], &GraphParams::uniform(1, 2, 1.0).unwrap(), &mut rng).unwrap();
        assert!(g.inclusion_prob().iter().all(|&q| close(q, 0.75)));

        let g = generate_graph(&[1.0; 5], &GraphParams::uniform(1, 1, 0.3).unwrap(), &mut rng).unwrap();
        assert!(g.inclusion_prob().iter().all(|&q| close(q, 0.2)));
        assert_eq!(effective_subset(&g, 0).len(), 1);
    }

    #[test]
    fn single_node_is_always_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = GraphParams::uniform(1, 3, 0.4).unwrap();
        for _ in 0..100 {
            let g = generate_graph(&[1.0, 2.0, 3.0, 4.0], &params, &mut rng).unwrap();
            assert_eq!(select_node(&g, &mut rng), 0);
        }
    }

    #[test]
    fn subset_reads_adjacency_row() {
        let g = FeedbackGraph {
            n_models: 4,
            max_links: 2,
            adjacency: vec![true, false, true, false, false, true, false, false],
            connect_pmf: vec![0.25; 8],
            node_weights: vec![2.0, 1.0],
            node_pmf: vec![0.0, 1.0],
            inclusion_prob: vec![0.0; 4],
        };
        assert_eq!(effective_subset(&g, 0), vec![0, 2]);
        assert_eq!(effective_subset(&g, 1), vec![1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(select_node(&g, &mut rng), 1);
        }
    }

    #[test]
    fn node_selection_frequency() {
        let g = FeedbackGraph {
            n_models: 2,
            max_links: 1,
            adjacency: vec![true, false, false, true],
            connect_pmf: vec![0.5; 4],
            node_weights: vec![0.3, 0.7],
            node_pmf: vec![0.3, 0.7],
            inclusion_prob: vec![0.3, 0.7],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 100_000;
        let ones = (0..draws).filter(|_| select_node(&g, &mut rng) == 1).count();
        let freq = ones as f64 / draws as f64;
        assert!((freq - 0.7).abs() / 0.7 < 0.01, "freq = {freq}");
    }

    #[test]
    fn graph_invariants_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights = [0.1, 3.0, 1e-3, 2.0, 0.5, 7.0];
        for (j, n, eta) in [(1, 1, 0.2), (2, 3, 0.5), (4, 5, 0.1), (3, 6, 1.0)] {
            let params = GraphParams::uniform(j, n, eta).unwrap();
            for _ in 0..200 {
                let g = generate_graph(&weights, &params, &mut rng).unwrap();
                for node in 0..j {
                    let links = g.adjacency_row(node).iter().filter(|&&l| l).count();
                    assert!((1..=n).contains(&links));
                    assert!((g.connect_pmf(node).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                assert!((g.node_pmf().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for &q in g.inclusion_prob() {
                    assert!(q > 0.0 && q <= 1.0 + 1e-12);
                    assert!(q >= eta / weights.len() as f64 - 1e-12);
                }
            }
        }
    }

    #[test]
    fn equal_weights_full_exploration_is_exchangeable() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = GraphParams::uniform(3, 4, 1.0).unwrap();
        let g = generate_graph(&[1.0; 5], &params, &mut rng).unwrap();
        let q = g.inclusion_prob();
        assert!(q.iter().all(|&x| x == q[0]));
    }

    #[test]
    fn deterministic_given_seed() {
        let params = GraphParams::new(3, 4, vec![0.1, 0.5, 0.9]).unwrap();
        let w = [1.0, 2.0, 0.5, 0.25];
        let a = generate_graph(&w, &params, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_graph(&w, &params, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inclusion_frequency_matches_q() {
        // Hold the node PMF of one realised graph fixed, redraw the selected
        // node's links, and count how often each model lands in the subset.
        let weights = [2.0, 0.5, 1.0];
        let params = GraphParams::new(2, 2, vec![0.2, 0.8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = generate_graph(&weights, &params, &mut rng).unwrap();
        let draws = 100_000;
        let mut hits = [0usize; 3];
        for _ in 0..draws {
            let node = select_node(&g, &mut rng);
            let mut row = [false; 3];
            for _ in 0..params.max_links {
                row[sample_categorical(g.connect_pmf(node), &mut rng)] = true;
            }
            for (h, linked) in hits.iter_mut().zip(row) {
                *h += usize::from(linked);
            }
        }
        for (m, &h) in hits.iter().enumerate() {
            let freq = h as f64 / draws as f64;
            let q = g.inclusion_prob()[m];
            assert!((freq - q).abs() / q < 0.01, "model {m}: freq {freq} q {q}");
        }
    }

    #[test]
    fn expected_subset_size_full_exploration() {
        let m = 5;
        let params = GraphParams::uniform(1, m, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draws = 100_000;
        let total: usize = (0..draws)
            .map(|_| effective_subset(&generate_graph(&[1.0; 5], &params, &mut rng).unwrap(), 0).len())
            .sum();
        let mean = total as f64 / draws as f64;
        let expected = m as f64 * (1.0 - (1.0 - 1.0 / m as f64).powi(m as i32));
        assert!((mean - expected).abs() / expected < 0.01, "{mean} vs {expected}");
        assert!(expected < m as f64);
    }

    #[test]
    fn eta_spec_resolution() {
        assert_eq!(EtaSpec::Scalar(0.3).resolve(3).unwrap(), vec![0.3; 3]);
        assert_eq!(EtaSpec::default().resolve(2).unwrap(), vec![0.2, 0.8]);
        assert_eq!(EtaSpec::default().resolve(4).unwrap(), vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(EtaSpec::default().resolve(1).unwrap(), vec![0.2]);
        assert!(EtaSpec::PerNode(vec![0.1]).resolve(2).is_err());
        let parsed: EtaSpec = serde_json::from_str("[0.2, 0.8]").unwrap();
        assert_eq!(parsed, EtaSpec::PerNode(vec![0.2, 0.8]));
        assert_eq!(GraphParams::uniform(4, 1, 0.5).unwrap().b(), 2);
        assert_eq!(GraphParams::uniform(3, 1, 0.5).unwrap().b(), 1);
    }
}
