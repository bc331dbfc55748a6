use gka::layer::*;
use gka::numerics::{max_abs_diff, norm2, spd_with_spectrum, Matrix, Precision, SeededRng};
use gka::solvers::*;
use proptest::prelude::*;

fn eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let dm = nalgebra::DMatrix::from_row_slice(n, n, m.as_slice());
    dm.symmetric_eigen().eigenvalues.iter().copied().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_schedule_stays_in_its_band(rho in 0.0f64..0.999, iters in 1usize..80) {
        let w = chebyshev_weight_schedule(rho, iters).unwrap();
        let (star, _) = omega_fixed_points(rho);
        prop_assert_eq!(w.len(), iters + 1);
        for pair in w.windows(2) {
            let denom = 4.0 - rho * rho * pair[0];
            prop_assert!((2.0..=4.0).contains(&denom));
            prop_assert!(pair[1] <= pair[0] + 1e-15);
            prop_assert!(pair[1] >= star - 1e-12);
        }
    }

    #[test]
    fn weight_error_contracts_each_step(rho in 0.05f64..0.99, iters in 2usize..60) {
        let w = chebyshev_weight_schedule(rho, iters).unwrap();
        let (star, _) = omega_fixed_points(rho);
        let rate = rho * rho * star * star / 4.0;
        for pair in w.windows(2) {
            let (e0, e1) = (pair[0] - star, pair[1] - star);
            prop_assert!(e1 <= rate * e0 / (1.0 - rho * rho * e0 * star / 4.0).max(1e-12) * (1.0 + 1e-9) + 1e-14);
        }
    }

    #[test]
    fn chebyshev_is_linear_in_the_rhs(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let eigs: Vec<f64> = (0..12).map(|i| 0.1 + i as f64 * 0.2).collect();
        let h = spd_with_spectrum(&eigs, &mut rng);
        let bounds = SpectralBounds::new(0.1, 2.3).unwrap();
        let (q1, q2) = (rng.normal_vec(12), rng.normal_vec(12));
        let q: Vec<f64> = q1.iter().zip(&q2).map(|(x, y)| a * x + b * y).collect();
        let solve = |rhs: &[f64]| chebyshev_solve(&SpdProblem::new(&h, rhs, bounds, 20), false).unwrap().0;
        let (x1, x2, x) = (solve(&q1), solve(&q2), solve(&q));
        let combo: Vec<f64> = x1.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();
        prop_assert!(max_abs_diff(&x, &combo) <= 1e-12 * (1.0 + norm2(&q)));
    }

    #[test]
    fn reversal_reconstructs_iterates(seed in 0u64..1000, iters in 1usize..20) {
        let mut rng = SeededRng::new(seed);
        let eigs: Vec<f64> = (0..8).map(|i| 0.2 + i as f64 * 0.25).collect();
        let h = spd_with_spectrum(&eigs, &mut rng);
        let bounds = SpectralBounds::new(0.2, 1.95).unwrap();
        let q = rng.normal_vec(8);
        let p = SpdProblem::new(&h, &q, bounds, iters);
        let (_, trace) = chebyshev_solve(&p, true).unwrap();
        let (_, tail) = chebyshev_solve_with_tail(&p).unwrap();
        let g = reverse_chebyshev(&p, &tail, &rng.normal_vec(8)).unwrap();
        let trace = trace.unwrap();
        prop_assert_eq!(g.reconstructed.len(), trace.iterates.len());
        for (rec, orig) in g.reconstructed.iter().zip(&trace.iterates) {
            let scale = orig.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            prop_assert!(max_abs_diff(rec, orig) <= 1e-8 * scale);
        }
    }

    #[test]
    fn adaptive_bounds_cap_the_condition_number(norm in 1e-6f64..1e3, a in 1e-3f64..1.0) {
        let lb = adaptive_lambda(norm, a, 1e-6);
        prop_assert!(lb.l / lb.mu <= (a + 1.0) / a * (1.0 + 1e-12));
        prop_assert_eq!(lb.mu, lb.lambda);
    }

    #[test]
    fn regularized_state_spectrum_lies_in_bounds(seed in 0u64..500, t in 1usize..40, lo in 0.0f64..0.99) {
        let mut rng = SeededRng::new(seed);
        let b = SequenceBatch::random(1, 1, t, 6, (lo, 1.0), &mut rng);
        let cfg = LayerConfig::new(6);
        let (_, st) = forward_sequential_reference(&b, &cfg, InnerSolver::Exact).unwrap();
        let head = &st.per_head[0];
        for (h, lb) in head.h.iter().zip(&head.lambdas) {
            for e in eigenvalues(h) {
                prop_assert!(e >= -1e-12);
                prop_assert!(e + lb.lambda >= lb.mu * (1.0 - 1e-12));
                prop_assert!(e + lb.lambda <= lb.l * (1.0 + 1e-12));
            }
            prop_assert!(lb.l / lb.mu <= 51.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn chunk_size_does_not_change_outputs(seed in 0u64..500, t in 1usize..40, chunk in 1usize..12) {
        let mut rng = SeededRng::new(seed);
        let b = SequenceBatch::random(1, 2, t, 4, (0.3, 1.0), &mut rng);
        let cfg = LayerConfig::new(4).with_chunk_size(chunk);
        let (y, _) = forward_chunkwise(&b, &cfg).unwrap();
        let (yr, _) = forward_sequential_reference(&b, &cfg, InnerSolver::Chebyshev).unwrap();
        prop_assert!(max_abs_diff(&y, &yr) <= 1e-9);
    }

    #[test]
    fn chunkwise_gradients_match_sequential(seed in 0u64..200, t in 1usize..24, chunk in 1usize..9) {
        let mut rng = SeededRng::new(seed);
        let b = SequenceBatch::random(1, 1, t, 3, (0.3, 1.0), &mut rng);
        let cfg = LayerConfig::new(3).with_chunk_size(chunk);
        let dy = rng.normal_vec(t * 3);
        let (_, st) = forward_chunkwise(&b, &cfg).unwrap();
        let g = backward_chunkwise(&st, &UpstreamGrads::from_dy(dy.clone())).unwrap();
        let (_, rs) = forward_sequential_reference(&b, &cfg, InnerSolver::Chebyshev).unwrap();
        let gr = backward_sequential_reference(&rs, &UpstreamGrads::from_dy(dy)).unwrap();
        for ((name, a), (_, r)) in g.groups().iter().zip(gr.groups().iter()) {
            prop_assert!(max_abs_diff(a, r) <= 1e-9 * (1.0 + norm2(r)), "{}", name);
        }
    }

    #[test]
    fn rounding_is_idempotent(x in -1e30f64..1e30) {
        for p in [Precision::Bf16, Precision::Single, Precision::Full] {
            prop_assert_eq!(p.round(p.round(x)), p.round(x));
        }
    }
}
