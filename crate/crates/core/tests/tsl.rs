mod common;

use common::{gauss, random_psd_tensor, scale_to_level, tsl_instance};
use nalgebra::{DMatrix, DVector};
use til_core::rng::{self, Rng};
use til_core::tensor_core::SymTensor4;
use til_core::tsl::{
    bounded_drift, full_decomposition, run_first_stage, run_second_stage, smoothed_projection, smoothed_projection_single, Localizer,
    LocalizerModel, TslParams, MAX_TSL_N,
};
use til_core::Error;

fn random_basis(d: usize, k: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, k, |_, _| gauss(rng)).qr().q()
}

fn random_vec(d: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| gauss(rng))
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.abs().max()
}

#[test]
fn smoothed_projection_with_zero_vectors_is_plain_projection() {
    let mut r = rng::stream(1, 0);
    let basis = random_basis(7, 4, &mut r);
    let zero = DVector::zeros(7);
    let c = smoothed_projection(&basis, &zero, &zero, 0.1).unwrap();
    assert!(max_abs(&(c - &basis * basis.transpose())) < 1e-12);
}

#[test]
fn smoothed_projection_with_large_v_removes_its_direction() {
    let d = 5;
    let eye = DMatrix::<f64>::identity(d, d);
    let mut v = DVector::zeros(d);
    v[0] = 100.0;
    let c = smoothed_projection(&eye, &v, &DVector::zeros(d), 1e-2).unwrap();
    let mut want = eye.clone();
    want[(0, 0)] = 0.0;
    assert!(max_abs(&(c - want)) < 1e-12);
}

#[test]
fn smoothed_projection_properties_on_random_subspaces() {
    let (d, dim) = (9, 5);
    let mut r = rng::stream(2, 0);
    for _ in 0..200 {
        let basis = random_basis(d, dim, &mut r);
        let (v, u) = (random_vec(d, &mut r), random_vec(d, &mut r));
        let delta = 10f64.powf(-3.0 * rand::Rng::random::<f64>(&mut r));
        let c = smoothed_projection(&basis, &v, &u, delta).unwrap();
        let proj = &basis * basis.transpose();
        assert!(max_abs(&(&c - c.transpose())) < 1e-14);
        assert!(max_abs(&((DMatrix::identity(d, d) - &proj) * &c)) < 1e-10);
        for l in c.clone().symmetric_eigen().eigenvalues.iter() {
            assert!((-1e-10..=1.0 + 1e-10).contains(l));
        }
        assert!(c.trace() >= dim as f64 - 2.0 - 1e-8);
        // Identity on the part of H orthogonal to both v_H and u~.
        let c2_trace = (&c * &c).trace();
        assert!(c2_trace >= dim as f64 - 2.0 - 1e-8);
    }
}

#[test]
fn smoothed_projection_shrinks_v_to_sqrt_delta_over_e() {
    // |C(H,v) v| = r exp(-r^2/(2 delta)) peaks at r = sqrt(delta), where it
    // is sqrt(delta/e), which exceeds delta whenever delta < 1/e.
    let d = 4;
    let eye = DMatrix::<f64>::identity(d, d);
    let delta: f64 = 0.01;
    let mut v = DVector::zeros(d);
    v[1] = delta.sqrt();
    let cv = smoothed_projection_single(&eye, &v, delta).unwrap() * &v;
    let peak = (delta / std::f64::consts::E).sqrt();
    assert!((cv.norm() - peak).abs() < 1e-14);
    assert!(cv.norm() > delta);

    let mut r = rng::stream(3, 0);
    for _ in 0..200 {
        let basis = random_basis(9, 6, &mut r);
        let delta = 10f64.powf(-3.0 * rand::Rng::random::<f64>(&mut r));
        let scale = delta.sqrt() * 2.0 * rand::Rng::random::<f64>(&mut r);
        let v = random_vec(9, &mut r).normalize() * scale;
        let u = random_vec(9, &mut r).normalize() * scale;
        let c = smoothed_projection(&basis, &v, &u, delta).unwrap();
        let bound = (delta / std::f64::consts::E).sqrt() + 1e-12;
        assert!((&c * &v).norm() <= bound);
        assert!((&c * &u).norm() <= bound);
    }
}

#[test]
fn smoothed_projection_input_errors() {
    let bad = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    let v = DVector::zeros(3);
    assert!(matches!(smoothed_projection(&bad, &v, &v, 0.1), Err(Error::InvalidInput(_))));
    let eye = DMatrix::<f64>::identity(3, 3);
    assert!(smoothed_projection(&eye, &v, &v, 0.0).is_err());
    assert!(smoothed_projection(&eye, &DVector::zeros(4), &v, 0.1).is_err());
}

#[test]
fn bounded_drift_examples() {
    let d = 4;
    let eye = DMatrix::<f64>::identity(d, d);
    let delta = 1e-3;
    assert_eq!(bounded_drift(&eye, &DVector::zeros(d), delta, 3.0).unwrap(), DVector::zeros(d));

    let x = DVector::from_element(d, (delta / 2.0 / d as f64).sqrt());
    assert!((x.norm_squared() - delta / 2.0).abs() < 1e-18);
    let v = bounded_drift(&eye, &x, delta, 3.0).unwrap();
    let want = &x * (-3.0 / (delta / 2.0));
    assert!((v - want).norm() < 1e-9);

    // Directions outside Image(C) are ignored.
    let mut c = eye.clone();
    c[(0, 0)] = 0.0;
    let v = bounded_drift(&c, &x, delta, 3.0).unwrap();
    assert_eq!(v[0], 0.0);

    let out = DVector::from_element(d, delta.sqrt());
    assert!(matches!(bounded_drift(&eye, &out, delta, 3.0), Err(Error::OutsideBall { .. })));
}

#[test]
fn forced_increments_update_state_exactly() {
    let (op, phi) = tsl_instance(11, 0.5);
    let model = LocalizerModel::first_stage(&op, &phi).unwrap();
    let d = model.dim();
    let mut loc = Localizer::new(&model, &TslParams::default()).unwrap();
    let zero_v = DVector::zeros(d);

    loc.apply(&DMatrix::zeros(d, d), &zero_v, &zero_v, 0.25);
    assert!(loc.state.log_f.iter().all(|l| *l == 0.0));
    assert_eq!(loc.state.k, model.k0);
    assert_eq!(loc.state.t, 0.25);

    let h = 1e-3;
    let eye = DMatrix::<f64>::identity(d, d);
    loc.apply(&eye, &zero_v, &zero_v, h);
    for (x, l) in loc.state.log_f.iter().enumerate() {
        let f2 = model.features.row(x).norm_squared();
        assert!((l + 0.5 * h * f2).abs() < 1e-15);
    }
    assert!(max_abs(&(&loc.state.k - (&model.k0 - &eye * (0.5 * h)))) < 1e-15);
    assert_eq!(loc.state.x, zero_v);
}

#[test]
fn density_views_agree_along_trajectory() {
    let (op, phi) = tsl_instance(12, 0.5);
    let model = LocalizerModel::first_stage(&op, &phi).unwrap();
    let mut loc = Localizer::new(&model, &TslParams::default()).unwrap();
    let mut r = rng::stream(12, 1);
    for _ in 0..100 {
        if loc.step(&mut r).unwrap() {
            break;
        }
    }
    assert!(loc.state.accepted >= 100);
    for (a, b) in loc.state.log_f.iter().zip(loc.closed_form_log_f()) {
        assert!((a - b).abs() < 1e-8);
    }
    let mass: f64 = loc.weights().iter().sum();
    assert!((mass - loc.state.mass).abs() < 1e-12);
}

#[test]
fn trace_decreases_at_least_at_rank_rate() {
    let (op, phi) = tsl_instance(13, 0.5);
    let model = LocalizerModel::first_stage(&op, &phi).unwrap();
    let params = TslParams::default();
    let mut loc = Localizer::new(&model, &params).unwrap();
    let mut r = rng::stream(13, 1);
    for _ in 0..200 {
        let rank = loc.rank();
        let c = loc.projection().unwrap();
        let c2 = (&c * &c).trace();
        assert!(c2 >= rank as f64 - 2.0 - 1e-8, "Tr C^2 = {c2}, rank = {rank}");
        let (t0, tr0) = (loc.state.t, loc.state.k.trace());
        if loc.step(&mut r).unwrap() {
            break;
        }
        let rate = (tr0 - loc.state.k.trace()) / (loc.state.t - t0);
        if loc.rank() == rank {
            assert!(rate >= (rank as f64 - 2.0) / 2.0 - 1e-6, "rate {rate} at rank {rank}");
        }
    }
}

#[test]
fn first_stage_on_rank_one_tensor_stops_at_start() {
    let u = [0.5, -0.2, 0.3];
    let op = SymTensor4::rank_one(&u).flatten();
    let phi = common::table(3, |x| x[0]);
    let res = run_first_stage(&op, &phi, &TslParams::default(), &mut rng::stream(14, 0)).unwrap();
    assert_eq!(res.diagnostics.tau, 0.0);
    assert!(res.diagnostics.stopped_at_start);
    // T = M1 (x) M1 with M1 = +-u u^T.
    let uu = DMatrix::from_fn(3, 3, |i, j| u[i] * u[j]);
    assert!(max_abs(&(&res.m1 - &uu)).min(max_abs(&(&res.m1 + &uu))) < 1e-12);
    assert!(max_abs(&res.m2) < 1e-8);
}

#[test]
fn first_stage_reaches_rank_two_inside_ball() {
    let (op, phi) = tsl_instance(15, 0.5);
    let params = TslParams { check_monotone: true, ..TslParams::default() };
    let res = run_first_stage(&op, &phi, &params, &mut rng::stream(15, 0)).unwrap();
    assert!(res.diagnostics.tau > 0.0);
    assert!(res.diagnostics.max_norm_x_sq < params.delta);
    assert!(res.diagnostics.trace_tau < res.diagnostics.trace_0);
    assert!(res.asymmetry < 1e-6);
    let total: f64 = res.measure.iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn second_stage_with_identity_weight() {
    let n = 4;
    let mut r = rng::stream(16, 0);
    let g = DMatrix::from_fn(n, n, |_, _| gauss(&mut r));
    let m = (&g * g.transpose()) * (0.05 / n as f64);
    let eye = DMatrix::<f64>::identity(n, n);
    let ref_log = vec![0.0; 1 << n];
    let phi = common::table(n, |x| x[0] * x[1]);
    let model = LocalizerModel::second_stage(&m, &eye, &ref_log, &phi, n).unwrap();
    for x in 0..1usize << n {
        assert!((model.features.row(x).norm_squared() - (n * n) as f64).abs() < 1e-12);
    }
    let params = TslParams::default();
    let res = run_second_stage(&m, &eye, &ref_log, &phi, &params, &mut r).unwrap();
    assert!(res.diagnostics.max_norm_x_sq < params.delta);
    let left = res.factors.iter().fold(DMatrix::zeros(n, n), |acc, f| acc + f * f.transpose());
    let gap = (&m - &left).symmetric_eigen().eigenvalues.min();
    assert!(gap > -1e-9);
}

#[test]
fn decomposition_of_zero_tensor_is_uniform() {
    let op = SymTensor4::zeros(3).flatten();
    let phi = common::table(3, |x| x[2]);
    let dec = full_decomposition(&op, &phi, &TslParams::default(), 17, 3).unwrap();
    assert_eq!(dec.components.len(), 3);
    for c in &dec.components {
        assert!(c.ledger.all());
        assert!(c.first_stage_at_start);
    }
    for w in dec.mixture().unwrap() {
        assert!((w - 0.125).abs() < 1e-12);
    }
}

#[test]
fn tilt_stays_in_ball_at_n4() {
    let n = 4;
    let mut r = rng::stream(18, 0);
    let op = scale_to_level(&random_psd_tensor(n, 6, &mut r), 0.5).flatten();
    let phi = common::table(n, |x| x[0] * x[3]);
    let model = LocalizerModel::first_stage(&op, &phi).unwrap();
    let params = TslParams::default();
    for seed in 0..10 {
        let mut loc = Localizer::new(&model, &params).unwrap();
        let mut s = rng::stream(18, seed + 1);
        for _ in 0..500 {
            if loc.step(&mut s).unwrap() {
                break;
            }
            assert!(loc.state.x.norm_squared() < params.delta);
        }
        assert!(loc.state.max_norm_x_sq < params.delta);
    }
}

#[test]
fn dimension_cap() {
    let op = SymTensor4::zeros(MAX_TSL_N + 1).flatten();
    let phi = vec![0.0; 1 << (MAX_TSL_N + 1)];
    assert!(matches!(LocalizerModel::first_stage(&op, &phi), Err(Error::DimensionTooLarge { .. })));
}
