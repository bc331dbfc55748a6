use gka::layer::*;
use gka::numerics::{max_abs_diff, norm2, solve_exact, Matrix, SeededRng};

fn rel(a: &[f64], b: &[f64]) -> f64 {
    max_abs_diff(a, b) / norm2(b).max(1e-300)
}

#[test]
fn chunkwise_matches_sequential_reference() {
    let mut rng = SeededRng::new(10);
    let batch = SequenceBatch::random(2, 2, 64, 8, (0.8, 1.0), &mut rng);
    for solver in [InnerSolver::Chebyshev, InnerSolver::Exact, InnerSolver::ConjugateGradient] {
        let cfg = LayerConfig::new(8).with_chunk_size(16).with_solver(solver);
        let (yc, _) = forward_chunkwise(&batch, &cfg).unwrap();
        let (ys, _) = forward_sequential_reference(&batch, &cfg, solver).unwrap();
        assert!(max_abs_diff(&yc, &ys) <= 1e-8, "{solver:?}: {}", max_abs_diff(&yc, &ys));
    }
}

#[test]
fn ragged_length_is_padded_and_masked() {
    let mut rng = SeededRng::new(11);
    let batch = SequenceBatch::random(1, 3, 21, 4, (0.5, 1.0), &mut rng);
    let cfg = LayerConfig::new(4).with_chunk_size(8);
    let (yc, st) = forward_chunkwise(&batch, &cfg).unwrap();
    assert_eq!(yc.len(), 3 * 21 * 4);
    assert_eq!(st.per_head[0].prep.padded, 24);
    let (ys, _) = forward_sequential_reference(&batch, &cfg, InnerSolver::Chebyshev).unwrap();
    assert!(max_abs_diff(&yc, &ys) <= 1e-10);
}

#[test]
fn rank_one_closed_form() {
    let mut b = SequenceBatch::zeros(1, 1, 1, 4);
    b.q[0] = 1.0;
    b.k[0] = 1.0;
    b.v[0] = 1.0;
    b.alpha_logits[0] = f64::INFINITY;
    let exact = 1.0 / 1.02;
    let cfg = LayerConfig::new(4).with_chunk_size(1);
    let (y, st) = forward_chunkwise(&b, &cfg.clone().with_solver(InnerSolver::Exact)).unwrap();
    assert!((y[0] - exact).abs() < 1e-15 && y[1..].iter().all(|v| *v == 0.0));
    assert!((st.lambdas()[0] - 0.02).abs() < 1e-15);
    let (y, _) = forward_chunkwise(&b, &cfg).unwrap();
    // The Chebyshev polynomial is exact on the eigenvalue 1.02 = L only up to
    // its equioscillation level 1/T_30((L+μ)/(L−μ)).
    let level = 1.0 / (30.0 * (1.04f64).acosh()).cosh();
    assert!((y[0] - exact).abs() <= level * exact * 1.0001, "{}", (y[0] - exact).abs());
    assert!((y[0] - exact).abs() > 1e-6);
}

#[test]
fn zero_alpha_is_gated_linear_attention() {
    let mut rng = SeededRng::new(12);
    let mut b = SequenceBatch::random(1, 1, 20, 5, (0.6, 1.0), &mut rng);
    b.alpha_logits.iter_mut().for_each(|a| *a = f64::NEG_INFINITY);
    let cfg = LayerConfig::new(5).with_chunk_size(8);
    let (y, st) = forward_chunkwise(&b, &cfg).unwrap();
    let prep = &st.per_head[0].prep;
    let mut s = Matrix::zeros(5, 5);
    for t in 0..20 {
        s.scale(prep.gamma[t]);
        s.add_outer(1.0, &prep.v[t * 5..t * 5 + 5], &prep.k[t * 5..t * 5 + 5]);
        let mut want = vec![0.0; 5];
        s.matvec_into(&prep.q[t * 5..t * 5 + 5], &mut want);
        assert!(max_abs_diff(&y[t * 5..t * 5 + 5], &want) < 1e-12);
    }
}

#[test]
fn alpha_placements_agree() {
    let mut rng = SeededRng::new(13);
    let b = SequenceBatch::random(1, 2, 32, 6, (0.7, 1.0), &mut rng);
    let cfg = LayerConfig::new(6).with_chunk_size(8);
    let (y1, _) = forward_chunkwise(&b, &cfg).unwrap();
    let (y2, _) = forward_chunkwise(&b, &cfg.clone().with_alpha_placement(AlphaPlacement::AfterProjection)).unwrap();
    assert!(max_abs_diff(&y1, &y2) <= 1e-12);
}

#[test]
fn single_key_ridge() {
    let mut b = SequenceBatch::zeros(1, 1, 1, 3);
    let k = [0.6, 0.8, 0.0];
    b.q[..3].copy_from_slice(&k);
    b.k[..3].copy_from_slice(&k);
    b.v[..3].copy_from_slice(&[2.0, -1.0, 0.5]);
    b.alpha_logits[0] = f64::INFINITY;
    let cfg = LayerConfig::new(3)
        .with_chunk_size(1)
        .with_solver(InnerSolver::Exact)
        .with_regularization(Regularization::Constant { lambda: 0.3 });
    let (y, _) = forward_sequential_reference(&b, &cfg, InnerSolver::Exact).unwrap();
    for i in 0..3 {
        assert!((y[i] - b.v[i] / 1.3).abs() < 1e-14);
    }
}

#[test]
fn projection_limit_with_vanishing_regularization() {
    let d = 6;
    let mut rng = SeededRng::new(14);
    let mut b = SequenceBatch::zeros(1, 1, d, d);
    let basis = gka::numerics::random_orthogonal(d, &mut rng);
    for t in 0..d {
        // Linearly independent but not orthogonal unit keys.
        let mut k: Vec<f64> = basis.row(t).to_vec();
        if t > 0 {
            for (a, p) in k.iter_mut().zip(basis.row(t - 1)) {
                *a += 0.5 * p;
            }
        }
        let n = norm2(&k);
        k.iter_mut().for_each(|x| *x /= n);
        b.k[t * d..(t + 1) * d].copy_from_slice(&k);
        b.v[t * d..(t + 1) * d].copy_from_slice(&k);
    }
    let q = rng.unit_vector(d);
    for t in 0..d {
        b.q[t * d..(t + 1) * d].copy_from_slice(&q);
    }
    b.alpha_logits.iter_mut().for_each(|a| *a = f64::INFINITY);
    let cfg = LayerConfig::new(d)
        .with_chunk_size(d)
        .with_regularization(Regularization::Adaptive { a: 1e-6 })
        .with_solver(InnerSolver::Exact);
    let (y, _) = forward_sequential_reference(&b, &cfg, InnerSolver::Exact).unwrap();
    for t in 0..d {
        // Orthogonal projection of q onto span{k_1..k_t}.
        let kt = Matrix::from_fn(t + 1, d, |i, j| b.k[i * d + j]);
        let gram = gka::numerics::matmul(&kt, &kt.transpose(), gka::numerics::Precision::Full).unwrap();
        let mut rhs = vec![0.0; t + 1];
        kt.matvec_into(&q, &mut rhs);
        let coef = solve_exact(&gram, &rhs).unwrap();
        let mut proj = vec![0.0; d];
        kt.matvec_transpose_into(&coef, &mut proj);
        assert!(max_abs_diff(&y[t * d..(t + 1) * d], &proj) < 1e-3);
    }
}

#[test]
fn zero_gates_make_the_layer_memoryless() {
    let mut rng = SeededRng::new(15);
    let mut b = SequenceBatch::random(1, 1, 16, 4, (0.5, 1.0), &mut rng);
    b.log_gates.iter_mut().for_each(|g| *g = f64::NEG_INFINITY);
    let cfg = LayerConfig::new(4).with_chunk_size(4);
    let (y, _) = forward_chunkwise(&b, &cfg).unwrap();
    for t in 0..16 {
        let mut single = SequenceBatch::zeros(1, 1, 1, 4);
        single.q.copy_from_slice(&b.q[t * 4..t * 4 + 4]);
        single.k.copy_from_slice(&b.k[t * 4..t * 4 + 4]);
        single.v.copy_from_slice(&b.v[t * 4..t * 4 + 4]);
        single.alpha_logits[0] = b.alpha_logits[t];
        let (ys, _) = forward_chunkwise(&single, &cfg).unwrap();
        assert!(max_abs_diff(&y[t * 4..t * 4 + 4], &ys) < 1e-12);
    }
}

#[test]
fn unit_gates_give_nondecreasing_norms() {
    let mut rng = SeededRng::new(16);
    let mut b = SequenceBatch::random(1, 1, 48, 5, (0.5, 1.0), &mut rng);
    b.log_gates.iter_mut().for_each(|g| *g = 0.0);
    let cfg = LayerConfig::new(5).with_chunk_size(16);
    let (_, st) = forward_chunkwise(&b, &cfg).unwrap();
    let norms = &st.per_head[0].plan.norms;
    assert!(norms.windows(2).all(|w| w[1] >= w[0] - 1e-12));
}

#[test]
fn exact_and_chebyshev_references_are_close() {
    let mut rng = SeededRng::new(17);
    let b = SequenceBatch::random(1, 2, 40, 6, (0.8, 1.0), &mut rng);
    let cfg = LayerConfig::new(6);
    let (ye, _) = forward_sequential_reference(&b, &cfg, InnerSolver::Exact).unwrap();
    let (yc, _) = forward_sequential_reference(&b, &cfg, InnerSolver::Chebyshev).unwrap();
    // Worst-case Chebyshev error at κ = 51 after 30 steps is 2R_a^30/(1 + R_a^60).
    let ra = (51f64.sqrt() - 1.0) / (51f64.sqrt() + 1.0);
    assert!(rel(&yc, &ye) <= 2.0 * ra.powi(30));
}

#[test]
fn solver_errors_carry_coordinates() {
    let mut rng = SeededRng::new(18);
    let b = SequenceBatch::random(1, 1, 4, 3, (0.5, 1.0), &mut rng);
    let cfg = LayerConfig::new(4);
    assert!(forward_chunkwise(&b, &cfg).is_err());
}
