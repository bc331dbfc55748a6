use gka::kf::*;
use gka::layer::*;
use gka::numerics::{matmul, max_abs_diff, Matrix, Precision, SeededRng};

fn stream(rng: &mut SeededRng, t: usize, d: usize, unit: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let keys = (0..t).map(|_| if unit { rng.unit_vector(d) } else { rng.normal_vec(d) }).collect();
    let values = (0..t).map(|_| rng.normal_vec(d)).collect();
    (keys, values)
}

fn woodbury_residual(phi: &Matrix, keys: &[Vec<f64>], etas: &[f64], lambda: f64) -> f64 {
    let d = phi.rows();
    let mut h = Matrix::scaled_identity(d, lambda);
    for (k, e) in keys.iter().zip(etas) {
        h.add_outer(*e, k, k);
    }
    matmul(phi, &h, Precision::Full).unwrap().max_abs_diff(&Matrix::identity(d))
}

#[test]
fn woodbury_inverse_stays_consistent() {
    let mut rng = SeededRng::new(40);
    let (d, t, lambda) = (16, 64, 0.5);
    let (keys, values) = stream(&mut rng, t, d, false);
    let etas: Vec<f64> = (0..t).map(|_| 0.1 + rng.uniform()).collect();
    let mut st = KfState::new(d, d, lambda).unwrap();
    for i in 0..t {
        st.step(&keys[i], &values[i], etas[i]).unwrap();
        let r = woodbury_residual(&st.phi, &keys[..=i], &etas[..=i], lambda);
        assert!(r <= 1e-7, "step {i}: {r}");
    }
    assert_eq!(st.breakdowns, 0);
}

#[test]
fn kalman_trajectory_is_the_ridge_minimizer() {
    let mut rng = SeededRng::new(41);
    let (d, t, lambda) = (16, 64, 0.1);
    let (keys, values) = stream(&mut rng, t, d, true);
    let etas = vec![1.0; t];
    let mut st = KfState::new(d, d, lambda).unwrap();
    for i in 0..t {
        st.step(&keys[i], &values[i], etas[i]).unwrap();
        let want = ridge_state(&keys[..=i], &values[..=i], &etas[..=i], lambda).unwrap();
        assert!(st.s.max_abs_diff(&want) <= 1e-8, "step {i}: {}", st.s.max_abs_diff(&want));
    }
}

#[test]
fn steady_state_filter_matches_kalman_steps() {
    let mut rng = SeededRng::new(42);
    let (d, t, lambda) = (8, 48, 0.25);
    let (keys, values) = stream(&mut rng, t, d, false);
    let etas: Vec<f64> = (0..t).map(|_| 0.2 + 2.0 * rng.uniform()).collect();
    let noise: Vec<f64> = etas.iter().map(|e| 1.0 / e).collect();
    let states = steady_state_kf_run(&keys, &values, &noise, 1.0 / lambda).unwrap();
    let mut st = KfState::new(d, d, lambda).unwrap();
    for i in 0..t {
        st.step(&keys[i], &values[i], etas[i]).unwrap();
        assert!(st.s.max_abs_diff(&states[i]) <= 1e-10, "step {i}");
    }
}

#[test]
fn diffuse_prior_projects_onto_the_first_key() {
    let k = vec![vec![0.5, -1.0, 2.0]];
    let v = vec![vec![1.0, 3.0]];
    let s = steady_state_kf_run(&k, &v, &[1.0], 1e8).unwrap();
    let kk: f64 = k[0].iter().map(|x| x * x).sum();
    let pinv: Vec<f64> = k[0].iter().map(|x| x / kk).collect();
    let want = Matrix::outer(&v[0], &pinv);
    assert!(s[0].max_abs_diff(&want) <= 1e-7);
}

#[test]
fn frozen_identity_covariance_is_deltanet() {
    let mut rng = SeededRng::new(43);
    let (d, t) = (8, 100);
    let (keys, values) = stream(&mut rng, t, d, true);
    let mut kf = KfState::frozen_identity(d, d);
    let mut dn = Matrix::zeros(d, d);
    for i in 0..t {
        let r = 0.05 + 3.0 * rng.uniform();
        kf.step(&keys[i], &values[i], 1.0 / r).unwrap();
        deltanet_step(&mut dn, &keys[i], &values[i], 1.0 / (1.0 + r));
        assert!(kf.s.max_abs_diff(&dn) <= 1e-12, "step {i}");
    }
    assert_eq!(kf.phi, Matrix::identity(d));
}

#[test]
fn kalman_readout_matches_ungated_layer_reference() {
    let mut rng = SeededRng::new(44);
    let (d, t, lambda) = (6, 40, 0.3);
    let mut b = SequenceBatch::random(1, 1, t, d, (0.5, 1.0), &mut rng);
    b.log_gates.iter_mut().for_each(|g| *g = 0.0);
    b.alpha_logits.iter_mut().for_each(|a| *a = f64::INFINITY);
    let cfg = LayerConfig::new(d)
        .with_normalize_qk(false)
        .with_regularization(Regularization::Constant { lambda })
        .with_solver(InnerSolver::Exact);
    let (y, _) = forward_sequential_reference(&b, &cfg, InnerSolver::Exact).unwrap();
    let mut st = KfState::new(d, d, lambda).unwrap();
    for i in 0..t {
        let sl = i * d..(i + 1) * d;
        st.step(&b.k[sl.clone()], &b.v[sl.clone()], 1.0).unwrap();
        let read = st.read(&b.q[sl.clone()]).unwrap();
        assert!(max_abs_diff(&read, &y[sl]) <= 1e-8, "step {i}");
    }
}

#[test]
fn reduced_precision_degrades_the_inverse() {
    let mut rng = SeededRng::new(45);
    let (d, t, lambda) = (16, 256, 1e-3);
    let (keys, values) = stream(&mut rng, t, d, true);
    let etas = vec![1.0; t];
    let mut full = KfState::new(d, d, lambda).unwrap();
    let mut low = KfState::new(d, d, lambda).unwrap().with_precision(Precision::Bf16);
    for i in 0..t {
        full.step(&keys[i], &values[i], etas[i]).unwrap();
        low.step(&keys[i], &values[i], etas[i]).unwrap();
    }
    let rf = woodbury_residual(&full.phi, &keys, &etas, lambda);
    let rl = woodbury_residual(&low.phi, &keys, &etas, lambda);
    assert!(rf <= 1e-7);
    assert!(rl > 1e-2);
    assert!(low.breakdowns > 0);
    assert_eq!(full.breakdowns, 0);
}
