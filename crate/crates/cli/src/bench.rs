//! Residual traces of the iterative solvers on normalized key-covariance systems.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use gka::numerics::{Precision, SeededRng};
use gka::solvers::{normalized_covariance_problem, IterativeMethod, SpdProblem, SpectralBounds};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::report::{median, Check};

pub const SCHEMA: &str = "gka-solver-bench/1";
pub const HEADER: [&str; 5] = ["solver", "precision", "problem_id", "iter", "residual"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverBenchConfig {
    pub dim: usize,
    /// Number of problems when `prefixes` is not given.
    pub problems: usize,
    /// Explicit prefix lengths, one problem each.
    pub prefixes: Option<Vec<usize>>,
    pub prefix_min: usize,
    pub prefix_max: usize,
    pub ridge: f64,
    pub iters: usize,
    pub solvers: Vec<String>,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for SolverBenchConfig {
    fn default() -> Self {
        SolverBenchConfig {
            dim: 128,
            problems: 100,
            prefixes: None,
            prefix_min: 1,
            prefix_max: 512,
            ridge: 0.02,
            iters: 30,
            solvers: IterativeMethod::ALL.iter().map(|m| m.as_str().to_string()).collect(),
            precision: Precision::Full,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub solver: String,
    pub precision: String,
    pub problem_id: usize,
    pub iter: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub median_final: f64,
    /// Median residual after each iteration.
    pub median_by_iter: Vec<f64>,
    pub breakdowns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: SolverBenchConfig,
    pub prefixes: Vec<usize>,
    pub methods: BTreeMap<String, MethodSummary>,
    pub checks: Vec<Check>,
}

pub fn problem_prefixes(cfg: &SolverBenchConfig) -> Vec<usize> {
    if let Some(p) = &cfg.prefixes {
        return p.clone();
    }
    let mut rng = SeededRng::new(cfg.seed).fork("prefixes");
    let span = cfg.prefix_max.saturating_sub(cfg.prefix_min) + 1;
    (0..cfg.problems).map(|_| cfg.prefix_min + rng.below(span)).collect()
}

pub fn run_solver_bench(cfg: &SolverBenchConfig) -> Result<(Vec<BenchRow>, BenchSummary)> {
    if cfg.dim == 0 || !(cfg.ridge > 0.0) {
        bail!("solver-bench needs dim > 0 and ridge > 0");
    }
    let methods = cfg
        .solvers
        .iter()
        .map(|s| s.parse::<IterativeMethod>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let prefixes = problem_prefixes(cfg);
    let bounds = SpectralBounds::new(cfg.ridge, 1.0 + cfg.ridge)?;
    let root = SeededRng::new(cfg.seed).fork("problems");

    type Traces = Vec<(IterativeMethod, Vec<f64>, usize)>;
    let per_problem: Vec<Traces> = prefixes
        .par_iter()
        .enumerate()
        .map(|(id, prefix)| {
            let mut rng = root.fork_index(id as u64);
            let (h, q) = normalized_covariance_problem(cfg.dim, *prefix, cfg.ridge, cfg.precision, &mut rng);
            let p = SpdProblem::new(&h, &q, bounds, cfg.iters).with_precision(cfg.precision);
            methods
                .iter()
                .map(|m| {
                    let (_, tr) = m.solve(&p, true)?;
                    let tr = tr.expect("trace requested");
                    Ok((*m, tr.residuals, tr.breakdowns))
                })
                .collect::<Result<Traces>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for m in &methods {
        for (id, traces) in per_problem.iter().enumerate() {
            let (_, res, _) = traces.iter().find(|(mm, _, _)| mm == m).expect("method ran");
            for (iter, r) in res.iter().enumerate() {
                rows.push(BenchRow {
                    solver: m.as_str().into(),
                    precision: cfg.precision.as_str().into(),
                    problem_id: id,
                    iter,
                    residual: *r,
                });
            }
        }
    }

    let mut summaries = BTreeMap::new();
    for m in &methods {
        let traces: Vec<(&Vec<f64>, usize)> = per_problem
            .iter()
            .map(|t| t.iter().find(|(mm, _, _)| mm == m).map(|(_, r, b)| (r, *b)).expect("method ran"))
            .collect();
        let len = traces.iter().map(|(r, _)| r.len()).max().unwrap_or(0);
        let median_by_iter: Vec<f64> = (0..len)
            .map(|i| median(&traces.iter().filter_map(|(r, _)| r.get(i).copied()).collect::<Vec<_>>()))
            .collect();
        summaries.insert(
            m.as_str().to_string(),
            MethodSummary {
                median_final: median(&traces.iter().filter_map(|(r, _)| r.last().copied()).collect::<Vec<_>>()),
                median_by_iter,
                breakdowns: traces.iter().map(|(_, b)| b).sum(),
            },
        );
    }
    let checks = if prefixes.is_empty() { Vec::new() } else { default_checks(cfg, &summaries) };
    Ok((
        rows,
        BenchSummary {
            config: cfg.clone(),
            prefixes,
            methods: summaries,
            checks,
        },
    ))
}

fn default_checks(cfg: &SolverBenchConfig, s: &BTreeMap<String, MethodSummary>) -> Vec<Check> {
    let mut out = Vec::new();
    match cfg.precision {
        Precision::Full => {
            if let (Some(cg), true) = (s.get("cg"), cfg.iters >= 30) {
                out.push(Check::at_most("cg median final residual", cg.median_final, 1e-10));
            }
        }
        _ => {
            if let (Some(ch), Some(cg)) = (s.get("ch"), s.get("cg")) {
                out.push(Check::at_most("ch median final residual vs cg", ch.median_final, cg.median_final));
            }
            if let (Some(ch), true) = (s.get("ch"), cfg.iters >= 10) {
                out.push(Check::at_most("ch final residual vs its 10th iterate", ch.median_final, ch.median_by_iter[10]));
            }
        }
    }
    out
}
