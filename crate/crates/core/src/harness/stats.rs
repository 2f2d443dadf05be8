//! Inference-cost statistics, linear fits and scaling reports.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::config::{Preset, RunConfig};
use crate::evaluator::{cif, ratio_string, Evaluation, Score};
use crate::scheduler::{rank, Termination};
use crate::topology::{InferenceTopology, StateId};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("state {state} of topology {topology} has no evaluation")]
    MissingEvaluations { topology: usize, state: StateId },
    #[error("no rows")]
    Empty,
}

/// One fitted coefficient. Inference fields are `None` when the residual
/// degrees of freedom are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub estimate: f64,
    pub std_err: Option<f64>,
    pub t: Option<f64>,
    pub p_value: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: Coefficient,
    pub bias: Coefficient,
    pub n: usize,
    pub residual_sum_squares: f64,
    /// Set when standard errors and p-values cannot be computed.
    pub inference_undefined: bool,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.bias.estimate + self.slope.estimate * x
    }
}

/// Ordinary least squares `y = bias + slope * x`.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<LinearFit, StatsError> {
    let n = points.len();
    if n < 2 {
        return Err(StatsError::DegenerateInput(format!("{n} points; at least 2 needed")));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(StatsError::DegenerateInput("non-finite coordinate".into()));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(StatsError::DegenerateInput("all x values are identical".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let bias = my - slope * mx;
    let rss: f64 = points.iter().map(|p| (p.1 - bias - slope * p.0).powi(2)).sum();
    let df = n - 2;

    let coef = |estimate: f64, se: Option<f64>, t_dist: Option<&StudentsT>| {
        let (Some(se), Some(dist)) = (se, t_dist) else {
            return Coefficient {
                estimate,
                std_err: None,
                t: None,
                p_value: None,
                ci_low: None,
                ci_high: None,
            };
        };
        let t = estimate / se;
        let p = if t.is_nan() { 1.0 } else { 2.0 * (1.0 - dist.cdf(t.abs())) };
        let q = dist.inverse_cdf(0.975);
        Coefficient {
            estimate,
            std_err: Some(se),
            t: Some(t),
            p_value: Some(p.clamp(0.0, 1.0)),
            ci_low: Some(estimate - q * se),
            ci_high: Some(estimate + q * se),
        }
    };

    if df == 0 {
        return Ok(LinearFit {
            slope: coef(slope, None, None),
            bias: coef(bias, None, None),
            n,
            residual_sum_squares: rss,
            inference_undefined: true,
        });
    }
    let sigma2 = rss / df as f64;
    let se_slope = (sigma2 / sxx).sqrt();
    let se_bias = (sigma2 * (1.0 / nf + mx * mx / sxx)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    Ok(LinearFit {
        slope: coef(slope, Some(se_slope), Some(&dist)),
        bias: coef(bias, Some(se_bias), Some(&dist)),
        n,
        residual_sum_squares: rss,
        inference_undefined: false,
    })
}

/// Fits mean topology size against complexity.
pub fn fit_topology_sizes(points: &[(u32, f64)]) -> Result<LinearFit, StatsError> {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(c, s)| (c as f64, s)).collect();
    linear_fit(&pts)
}

/// One benchmark entry's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub entry: usize,
    pub complexity: u32,
    pub preset: Preset,
    pub topology_size: usize,
    pub termination: Termination,
    #[serde(with = "ratio_string")]
    pub final_vqa: Score,
    pub final_clip: f64,
    /// Number of created states when the first final state appeared.
    pub steps_to_best: usize,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityAggregate {
    pub complexity: u32,
    pub runs: usize,
    pub mean_size: f64,
    pub size_std_dev: f64,
    pub size_std_err: f64,
    pub mean_vqa: f64,
    #[serde(with = "ratio_string")]
    pub cif: Score,
    pub mean_clip: f64,
    pub mean_steps_to_best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<ComplexityAggregate>,
}

impl RunStats {
    pub fn from_rows(rows: Vec<RunRow>) -> RunStats {
        let aggregates = aggregate(&rows);
        RunStats { rows, aggregates }
    }

    pub fn size_points(&self) -> Vec<(u32, f64)> {
        self.aggregates.iter().map(|a| (a.complexity, a.mean_size)).collect()
    }
}

pub fn score_f64(s: Score) -> f64 {
    *s.numer() as f64 / *s.denom() as f64
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-complexity aggregates, recomputed from rows alone.
pub fn aggregate(rows: &[RunRow]) -> Vec<ComplexityAggregate> {
    let mut groups: BTreeMap<u32, Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.complexity).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(complexity, rs)| {
            let n = rs.len();
            let mean_size = mean(rs.iter().map(|r| r.topology_size as f64));
            let var = if n > 1 {
                rs.iter()
                    .map(|r| (r.topology_size as f64 - mean_size).powi(2))
                    .sum::<f64>()
                    / (n - 1) as f64
            } else {
                0.0
            };
            let scores: Vec<Score> = rs.iter().map(|r| r.final_vqa).collect();
            ComplexityAggregate {
                complexity,
                runs: n,
                mean_size,
                size_std_dev: var.sqrt(),
                size_std_err: (var / n as f64).sqrt(),
                mean_vqa: mean(scores.iter().map(|s| score_f64(*s))),
                cif: cif(&scores).expect("group is non-empty"),
                mean_clip: mean(rs.iter().map(|r| r.final_clip)),
                mean_steps_to_best: mean(rs.iter().map(|r| r.steps_to_best as f64)),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// Best state among the first `n` created states, for each `n`.
    Steps,
    /// All states of each depth layer.
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    /// Prefix length in steps mode, depth in depth mode.
    pub key: u32,
    pub count: usize,
    pub mean_vqa: f64,
    #[serde(with = "ratio_string")]
    pub cif: Score,
    pub mean_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub mode: ScalingMode,
    pub rows: Vec<ScalingRow>,
}

fn evaluations(topologies: &[InferenceTopology]) -> Result<Vec<Vec<(u32, &Evaluation)>>, StatsError> {
    topologies
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            t.states
                .iter()
                .map(|s| {
                    s.evaluation
                        .as_ref()
                        .map(|e| (s.depth, e))
                        .ok_or(StatsError::MissingEvaluations {
                            topology: ti,
                            state: s.state_id,
                        })
                })
                .collect()
        })
        .collect()
}

fn row(key: u32, evals: &[&Evaluation]) -> ScalingRow {
    let scores: Vec<Score> = evals.iter().map(|e| e.vqa_score).collect();
    ScalingRow {
        key,
        count: evals.len(),
        mean_vqa: mean(scores.iter().map(|s| score_f64(*s))),
        cif: cif(&scores).unwrap_or_default(),
        mean_clip: mean(evals.iter().map(|e| e.clip_i)),
    }
}

/// Steps mode tracks the running best under `cfg`'s ranking; a topology
/// shorter than `n` contributes its final best. Depth mode skips the
/// unevaluated root.
pub fn scaling_report(
    topologies: &[InferenceTopology],
    mode: ScalingMode,
    cfg: &RunConfig,
) -> Result<ScalingReport, StatsError> {
    let per_topology = evaluations(topologies)?;
    let rows = match mode {
        ScalingMode::Steps => {
            let longest = per_topology.iter().map(Vec::len).max().unwrap_or(0);
            let mut best: Vec<Option<&Evaluation>> = vec![None; per_topology.len()];
            let mut rows = Vec::with_capacity(longest);
            for n in 0..longest {
                for (b, evals) in best.iter_mut().zip(&per_topology) {
                    if let Some(&(_, e)) = evals.get(n) {
                        if b.is_none_or(|cur| rank(e, cur, cfg) == Ordering::Greater) {
                            *b = Some(e);
                        }
                    }
                }
                let present: Vec<&Evaluation> = best.iter().flatten().copied().collect();
                rows.push(row(n as u32 + 1, &present));
            }
            rows
        }
        ScalingMode::Depth => {
            let mut layers: BTreeMap<u32, Vec<&Evaluation>> = BTreeMap::new();
            for evals in &per_topology {
                for &(d, e) in evals {
                    layers.entry(d).or_default().push(e);
                }
            }
            layers.into_iter().map(|(d, es)| row(d, &es)).collect()
        }
    };
    Ok(ScalingReport { mode, rows })
}
