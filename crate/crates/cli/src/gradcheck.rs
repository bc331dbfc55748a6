//! Gradient deviation of solver-based backward passes from the exact-solve gradient.
//!
//! Two settings: a single system `x = H⁻¹q` with loss `⟨c, x⟩`, and a residual
//! stack of memory layers whose input gradient is compared end to end.

use std::collections::BTreeMap;

use anyhow::Result;
use gka::layer::{
    backward_sequential_reference, forward_sequential_reference, InnerSolver, LayerConfig, Regularization, ReferenceState,
    SequenceBatch, UpstreamGrads,
};
use gka::numerics::{solve_exact, Matrix, Precision, SeededRng};
use gka::solvers::{cg_solve, chebyshev_error_bound, chebyshev_solve, chebyshev_solve_with_tail, normalized_covariance_problem, reverse_chebyshev, SpdProblem, SpectralBounds};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::report::{median, Check};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub dim: usize,
    pub problems: usize,
    pub prefix_min: usize,
    pub prefix_max: usize,
    pub ridge: f64,
    pub iters: usize,
    pub precision: Precision,
    pub stacked: StackedConfig,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            dim: 64,
            problems: 20,
            prefix_min: 256,
            prefix_max: 2048,
            ridge: 0.02,
            iters: 30,
            precision: Precision::Full,
            stacked: StackedConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackedConfig {
    pub layers: usize,
    pub time: usize,
    pub dim: usize,
    pub a: f64,
    /// Forget gates are drawn uniformly from this range.
    pub gates: (f64, f64),
}

impl Default for StackedConfig {
    fn default() -> Self {
        StackedConfig {
            layers: 4,
            time: 48,
            dim: 32,
            a: 0.02,
            gates: (0.9, 1.0),
        }
    }
}

/// Relative deviations per method, aggregated over problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub median: f64,
    pub max: f64,
}

impl Deviation {
    fn of(v: &[f64]) -> Self {
        Deviation {
            median: median(v),
            max: v.iter().cloned().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    /// `dq` deviation from the exact gradient, keyed by method.
    pub isolated_dq: BTreeMap<String, Deviation>,
    /// `dH` deviation from the exact gradient, keyed by method.
    pub isolated_dh: BTreeMap<String, Deviation>,
    /// Implicit against reverse-mode Chebyshev `dq`.
    pub implicit_vs_reverse_dq: Deviation,
    /// Input-gradient deviation of the layer stack, keyed by method.
    pub stacked: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

struct Isolated {
    dq: [f64; 4],
    dh: [f64; 4],
    impl_vs_rev: f64,
}

const METHODS: [&str; 4] = ["ch_impl", "ch_reverse", "cg_impl", "exact_at_precision"];

fn isolated_problem(cfg: &GradCheckConfig, id: usize, prefix: usize) -> Result<Isolated> {
    let mut rng = SeededRng::new(cfg.seed).fork("isolated").fork_index(id as u64);
    let (h, q) = normalized_covariance_problem(cfg.dim, prefix, cfg.ridge, cfg.precision, &mut rng);
    let c = rng.unit_vector(cfg.dim);
    let bounds = SpectralBounds::new(cfg.ridge, 1.0 + cfg.ridge)?;
    let p = SpdProblem::new(&h, &q, bounds, cfg.iters).with_precision(cfg.precision);

    let x_exact = solve_exact(&h, &q)?;
    let dq_exact = solve_exact(&h, &c)?;
    let dh_of = |dq: &[f64], x: &[f64]| Matrix::outer(dq, x).scaled(-1.0).into_vec();
    let dh_exact = dh_of(&dq_exact, &x_exact);

    let (x_ch, tail) = chebyshev_solve_with_tail(&p)?;
    let dq_ch = chebyshev_solve(&p.with_rhs(&c), false)?.0;
    let rev = reverse_chebyshev(&p, &tail, &c)?;
    let x_cg = cg_solve(&p, false)?.0;
    let dq_cg = cg_solve(&p.with_rhs(&c), false)?.0;
    let mut x_ex_p = x_exact.clone();
    let mut dq_ex_p = dq_exact.clone();
    cfg.precision.round_slice(&mut x_ex_p);
    cfg.precision.round_slice(&mut dq_ex_p);

    let dq = [
        rel(&dq_ch, &dq_exact),
        rel(&rev.dq, &dq_exact),
        rel(&dq_cg, &dq_exact),
        rel(&dq_ex_p, &dq_exact),
    ];
    let dh = [
        rel(&dh_of(&dq_ch, &x_ch), &dh_exact),
        rel(rev.dh.as_slice(), &dh_exact),
        rel(&dh_of(&dq_cg, &x_cg), &dh_exact),
        rel(&dh_of(&dq_ex_p, &x_ex_p), &dh_exact),
    ];
    Ok(Isolated {
        dq,
        dh,
        impl_vs_rev: rel(&dq_ch, &rev.dq),
    })
}

/// A residual stack `x_{l+1} = x_l + Layer_l(x_l W_q, x_l W_k, x_l W_v)` with
/// fixed random projections, gates and α-logits.
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub time: usize,
    pub dim: usize,
    pub x0: Vec<f64>,
    /// Loss is `⟨c, x_L⟩`.
    pub c: Vec<f64>,
    pub layers: Vec<StackLayer>,
    pub a: f64,
}

#[derive(Debug, Clone)]
pub struct StackLayer {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub log_gates: Vec<f64>,
    pub alpha_logits: Vec<f64>,
}

impl LayerStack {
    pub fn random(cfg: &StackedConfig, rng: &SeededRng) -> Self {
        let (t, d) = (cfg.time, cfg.dim);
        let mut r = rng.fork("x0");
        let x0 = r.normal_vec(t * d);
        let c = rng.fork("c").normal_vec(t * d);
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut r = rng.fork("layer").fork_index(l as u64);
                let s = 1.0 / (d as f64).sqrt();
                let mut w = || r.normal_matrix(d, d).scaled(s);
                let (wq, wk, wv) = (w(), w(), w());
                let log_gates = (0..t).map(|_| r.uniform_range(cfg.gates.0, cfg.gates.1).ln()).collect();
                let alpha_logits = (0..t).map(|_| r.normal()).collect();
                StackLayer {
                    wq,
                    wk,
                    wv,
                    log_gates,
                    alpha_logits,
                }
            })
            .collect();
        LayerStack {
            time: t,
            dim: d,
            x0,
            c,
            layers,
            a: cfg.a,
        }
    }

    fn project(&self, x: &[f64], w: &Matrix) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
            w.matvec_transpose_into(row, o);
        }
        out
    }

    fn project_back(&self, g: &[f64], w: &Matrix) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; g.len()];
        for (row, o) in g.chunks(d).zip(out.chunks_mut(d)) {
            w.matvec_into(row, o);
        }
        out
    }

    /// `dL/dx_0` with the given solver and precision in every layer.
    pub fn input_gradient(&self, solver: InnerSolver, precision: Precision, iters: usize) -> Result<Vec<f64>> {
        let cfg = LayerConfig::new(self.dim)
            .with_regularization(Regularization::Adaptive { a: self.a })
            .with_iters(iters)
            .with_precision(precision)
            .with_solver(solver);
        let mut x = self.x0.clone();
        let mut states: Vec<ReferenceState> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut b = SequenceBatch::zeros(1, 1, self.time, self.dim);
            b.q = self.project(&x, &l.wq);
            b.k = self.project(&x, &l.wk);
            b.v = self.project(&x, &l.wv);
            b.log_gates = l.log_gates.clone();
            b.alpha_logits = l.alpha_logits.clone();
            let (y, st) = forward_sequential_reference(&b, &cfg, solver)?;
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
            states.push(st);
        }
        let mut g = self.c.clone();
        for (l, st) in self.layers.iter().zip(&states).rev() {
            let gb = backward_sequential_reference(st, &UpstreamGrads::from_dy(g.clone()))?;
            for (dp, w) in [(&gb.dq, &l.wq), (&gb.dk, &l.wk), (&gb.dv, &l.wv)] {
                g.iter_mut().zip(self.project_back(dp, w)).for_each(|(a, b)| *a += b);
            }
        }
        Ok(g)
    }
}

/// Input-gradient deviation from the full-precision exact-solve gradient.
pub fn stacked_deviation(cfg: &GradCheckConfig) -> Result<BTreeMap<String, f64>> {
    let stack = LayerStack::random(&cfg.stacked, &SeededRng::new(cfg.seed).fork("stack"));
    let exact = stack.input_gradient(InnerSolver::Exact, Precision::Full, cfg.iters)?;
    let mut out = BTreeMap::new();
    for (name, solver) in [("ch_impl", InnerSolver::Chebyshev), ("cg_impl", InnerSolver::ConjugateGradient)] {
        let g = stack.input_gradient(solver, cfg.precision, cfg.iters)?;
        out.insert(name.to_string(), rel(&g, &exact));
    }
    Ok(out)
}

pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(cfg.seed).fork("prefixes");
    let span = cfg.prefix_max.saturating_sub(cfg.prefix_min) + 1;
    let prefixes: Vec<usize> = (0..cfg.problems).map(|_| cfg.prefix_min + rng.below(span)).collect();
    let results = prefixes
        .par_iter()
        .enumerate()
        .map(|(id, t)| isolated_problem(cfg, id, *t))
        .collect::<Result<Vec<_>>>()?;
    let collect = |f: &dyn Fn(&Isolated) -> f64| results.iter().map(f).collect::<Vec<_>>();
    let mut isolated_dq = BTreeMap::new();
    let mut isolated_dh = BTreeMap::new();
    for (i, name) in METHODS.iter().enumerate() {
        isolated_dq.insert(name.to_string(), Deviation::of(&collect(&|r| r.dq[i])));
        isolated_dh.insert(name.to_string(), Deviation::of(&collect(&|r| r.dh[i])));
    }
    let implicit_vs_reverse_dq = Deviation::of(&collect(&|r| r.impl_vs_rev));
    let stacked = stacked_deviation(cfg)?;

    let mut checks = Vec::new();
    if cfg.precision == Precision::Full && !results.is_empty() {
        checks.push(Check::at_most("implicit vs reverse chebyshev dq (max)", implicit_vs_reverse_dq.max, 1e-10));
        let kappa = (1.0 + cfg.ridge) / cfg.ridge;
        let bound = chebyshev_error_bound(kappa, cfg.iters);
        checks.push(Check::at_most("ch_impl dq vs exact (max)", isolated_dq["ch_impl"].max, bound));
    }
    if cfg.precision != Precision::Full {
        checks.push(Check::below("stacked ch_impl deviation vs cg_impl", stacked["ch_impl"], stacked["cg_impl"]));
    }
    Ok(GradCheckReport {
        config: cfg.clone(),
        isolated_dq,
        isolated_dh,
        implicit_vs_reverse_dq,
        stacked,
        checks,
    })
}
