//! Run metrics over step records, plus offline regret against the best
//! constant level in hindsight.

use serde::{Deserialize, Serialize};

use crate::adapt::pinball_loss;
use crate::error::{Error, Result};
use crate::policies::StepRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsOptions {
    /// Local coverage window length.
    pub window: usize,
    /// Sets strictly smaller than this count towards `width_under_k_pct`.
    pub width_cap: usize,
    /// Slide the local coverage window one step at a time instead of tiling.
    pub overlapping: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            window: 100,
            width_cap: 40,
            overlapping: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n_steps: usize,
    pub coverage_pct: f64,
    pub avg_width: f64,
    /// Share of steps whose set is exactly `{Y_t}`, over all steps.
    pub single_width_pct: f64,
    pub local_coverage: Vec<f64>,
    pub width_under_k_pct: f64,
    pub runtime_secs: f64,
}

pub fn compute_metrics(records: &[StepRecord], window: usize, width_cap: usize) -> Result<RunMetrics> {
    compute_metrics_with(
        records,
        &MetricsOptions {
            window,
            width_cap,
            overlapping: false,
        },
    )
}

pub fn compute_metrics_with(records: &[StepRecord], opts: &MetricsOptions) -> Result<RunMetrics> {
    if records.is_empty() {
        return Err(Error::Empty("step records"));
    }
    let n = records.len() as f64;
    let mut covered = 0usize;
    let mut width = 0usize;
    let mut single = 0usize;
    let mut under = 0usize;
    let mut nanos = 0u128;
    for r in records {
        let hit = r.err == 0;
        covered += usize::from(hit);
        width += r.set_size;
        single += usize::from(hit && r.set_size == 1);
        under += usize::from(hit && r.set_size < opts.width_cap);
        nanos += u128::from(r.wall_nanos);
    }
    let hits: Vec<u8> = records.iter().map(|r| 1 - r.err.min(1)).collect();
    Ok(RunMetrics {
        n_steps: records.len(),
        coverage_pct: 100.0 * covered as f64 / n,
        avg_width: width as f64 / n,
        single_width_pct: 100.0 * single as f64 / n,
        local_coverage: local_coverage(&hits, opts.window, opts.overlapping),
        width_under_k_pct: 100.0 * under as f64 / n,
        runtime_secs: nanos as f64 * 1e-9,
    })
}

/// Window means of the coverage indicators. Only full windows are reported.
pub fn local_coverage(hits: &[u8], window: usize, overlapping: bool) -> Vec<f64> {
    if window == 0 || hits.len() < window {
        return Vec::new();
    }
    let w = window as f64;
    if !overlapping {
        return hits
            .chunks_exact(window)
            .map(|c| c.iter().map(|&h| f64::from(h)).sum::<f64>() / w)
            .collect();
    }
    let mut sum: usize = hits[..window].iter().map(|&h| usize::from(h)).sum();
    let mut out = Vec::with_capacity(hits.len() - window + 1);
    out.push(sum as f64 / w);
    for i in window..hits.len() {
        sum = sum + usize::from(hits[i]) - usize::from(hits[i - window]);
        out.push(sum as f64 / w);
    }
    out
}

/// `Σ_t L(ᾱ_t, α)` for a constant `α`.
pub fn cumulative_pinball(alpha_bars: &[f64], alpha: f64, target_alpha: f64) -> f64 {
    alpha_bars.iter().map(|&b| pinball_loss(b, alpha, target_alpha)).sum()
}

/// Exact minimiser of `α ↦ Σ_t L(ᾱ_t, α)` over `[lo, hi]`.
///
/// The objective is convex and piecewise linear with kinks at the `ᾱ_t`, so
/// the minimum sits on a kink or an end point. All candidates are scored in
/// one pass over the sorted values. Returns `(α*, Σ_t L(ᾱ_t, α*))`.
pub fn best_constant_alpha(alpha_bars: &[f64], target_alpha: f64, lo: f64, hi: f64) -> (f64, f64) {
    if alpha_bars.is_empty() {
        return (lo.max(0.0).min(hi), 0.0);
    }
    let mut sorted = alpha_bars.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    let t = sorted.len() as f64;

    // L(b, a) = τ(b − a) + max(0, a − b); with k values below a and prefix
    // sum P_k: Σ L = τ(total − t·a) + k·a − P_k.
    let eval = |a: f64, k: usize, prefix: f64| target_alpha * (total - t * a) + k as f64 * a - prefix;
    let count_below = |a: f64| sorted.partition_point(|&b| b < a);

    let mut prefix = vec![0.0; sorted.len() + 1];
    for (i, b) in sorted.iter().enumerate() {
        prefix[i + 1] = prefix[i] + b;
    }
    let mut best = (lo, eval(lo, count_below(lo), prefix[count_below(lo)]));
    let k_hi = count_below(hi);
    let hi_val = eval(hi, k_hi, prefix[k_hi]);
    if hi_val < best.1 {
        best = (hi, hi_val);
    }
    for (i, &b) in sorted.iter().enumerate() {
        if b <= lo || b >= hi || (i > 0 && sorted[i - 1] == b) {
            continue;
        }
        let v = eval(b, i, prefix[i]);
        if v < best.1 {
            best = (b, v);
        }
    }
    // Re-sum directly so the value matches `cumulative_pinball` bit for bit.
    (best.0, cumulative_pinball(alpha_bars, best.0, target_alpha))
}

/// Offline regret of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regret {
    pub regret: f64,
    pub policy_loss: f64,
    pub best_loss: f64,
    pub best_model: usize,
    pub best_alpha: f64,
}

/// `Σ_t L_t(chosen) − min_{m, α} Σ_t L(ᾱ_t^m, α)` with `α` ranging over
/// `[−η, 1 + η]`. `alpha_bars[t][m]` is `ᾱ_t^m`.
pub fn hindsight_regret(
    chosen_losses: &[f64],
    alpha_bars: &[Vec<f64>],
    target_alpha: f64,
    eta: f64,
) -> Result<Regret> {
    if chosen_losses.len() != alpha_bars.len() {
        return Err(Error::InvalidParams(format!(
            "{} chosen losses but {} rows of optimal levels",
            chosen_losses.len(),
            alpha_bars.len()
        )));
    }
    let n_models = alpha_bars.first().map_or(0, Vec::len);
    if alpha_bars.iter().any(|row| row.len() != n_models) {
        return Err(Error::InvalidParams("ragged optimal-level matrix".into()));
    }
    let policy_loss: f64 = chosen_losses.iter().sum();
    let mut best = (0usize, 0.0, if n_models == 0 { 0.0 } else { f64::INFINITY });
    let mut column = Vec::with_capacity(alpha_bars.len());
    for m in 0..n_models {
        column.clear();
        column.extend(alpha_bars.iter().map(|row| row[m]));
        let (a, v) = best_constant_alpha(&column, target_alpha, -eta, 1.0 + eta);
        if v < best.2 {
            best = (m, a, v);
        }
    }
    Ok(Regret {
        regret: policy_loss - best.2,
        policy_loss,
        best_loss: best.2,
        best_model: best.0,
        best_alpha: best.1,
    })
}
