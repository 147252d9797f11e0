use mflab::dynamics::{flow_map, fundamental_matrix, gronwall_bound, integrate_costate, integrate_forward};
use mflab::flow::init_path;
use mflab::{DataMeasure, LossModel, ParameterPath, VectorFieldModel};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(d: usize, gated: bool, seed: u64) -> (VectorFieldModel, ParameterPath, DataMeasure) {
    let model = if gated { VectorFieldModel::gated_tanh(d) } else { VectorFieldModel::linear_tanh(d) };
    let path = init_path(3, 4, model.m(), 0.8, 1, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let samples = (0..3)
        .map(|_| ((0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    (model, path, DataMeasure::uniform(samples).unwrap())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn rk4_converges_at_fourth_order() {
    for gated in [false, true] {
        let (model, path, data) = setup(2, gated, 5);
        let reference = integrate_forward(&model, &path, &data, 512).unwrap();
        let err = |s: usize| {
            let t = integrate_forward(&model, &path, &data, s).unwrap();
            (0..data.len()).map(|i| dist(t.final_state(i), reference.final_state(i))).fold(0.0, f64::max)
        };
        let (e4, e8, e16) = (err(4), err(8), err(16));
        for ratio in [e4 / e8, e8 / e16] {
            assert!((12.0..20.0).contains(&ratio), "gated {gated}: ratios {} {}", e4 / e8, e8 / e16);
        }
    }
}

#[test]
fn flow_maps_compose() {
    let (model, path, data) = setup(3, true, 2);
    let x = data.x(0);
    let s = 6;
    let end = 3 * s;
    let direct = flow_map(&model, &path, s, x, 0, end).unwrap();
    let mid = flow_map(&model, &path, s, x, 0, 7).unwrap();
    let composed = flow_map(&model, &path, s, &mid, 7, end).unwrap();
    assert!(dist(&direct, &composed) < 1e-14);
    let trace = integrate_forward(&model, &path, &data, s).unwrap();
    assert!(dist(&direct, trace.final_state(0)) < 1e-14);
    assert_eq!(flow_map(&model, &path, s, x, 4, 4).unwrap(), x.to_vec());
}

#[test]
fn states_stay_inside_gronwall_envelope() {
    for gated in [false, true] {
        let (model, path, data) = setup(2, gated, 8);
        let trace = integrate_forward(&model, &path, &data, 8).unwrap();
        for i in 0..data.len() {
            for node in 0..trace.node_count() {
                let bound = gronwall_bound(&model, &path, norm(data.x(i)), trace.node_time(node));
                assert!(norm(trace.state(i, node)) <= bound + 1e-12);
            }
        }
    }
}

#[test]
fn costate_is_transpose_of_linearization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for gated in [false, true] {
        let (model, path, data) = setup(3, gated, 4);
        let loss = LossModel::squared_error(data.radius());
        let trace = integrate_forward(&model, &path, &data, 8).unwrap();
        let costate = integrate_costate(&model, &loss, &path, &data, &trace).unwrap();
        let last = trace.node_count() - 1;
        for i in 0..data.len() {
            for node in [0, 5, last] {
                let dx = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                let m = fundamental_matrix(&model, &path, &data, &trace, i, node, last).unwrap();
                let g = DVector::from_vec(loss.grad(trace.final_state(i), data.y(i)));
                let forward = g.dot(&(m * &dx));
                let adjoint = DVector::from_column_slice(costate.costate(i, node)).dot(&dx);
                assert!((forward - adjoint).abs() <= 1e-9 * (1.0 + forward.abs()), "{forward} vs {adjoint}");
            }
            // p₀ against central differences of ℓ∘X₁.
            let p0 = costate.costate(i, 0);
            for c in 0..3 {
                let h = 1e-6;
                let mut xp = data.x(i).to_vec();
                let mut xm = xp.clone();
                xp[c] += h;
                xm[c] -= h;
                let lp = loss.eval(&flow_map(&model, &path, 8, &xp, 0, last).unwrap(), data.y(i));
                let lm = loss.eval(&flow_map(&model, &path, 8, &xm, 0, last).unwrap(), data.y(i));
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - p0[c]).abs() < 1e-7 * (1.0 + fd.abs()), "{fd} vs {}", p0[c]);
            }
        }
    }
}

#[test]
fn fundamental_matrix_cocycle_and_differences() {
    let (model, path, data) = setup(3, true, 9);
    let trace = integrate_forward(&model, &path, &data, 8).unwrap();
    let last = trace.node_count() - 1;
    for (a, b, c) in [(0, 5, last), (3, 8, 17), (0, 0, 9)] {
        let mac = fundamental_matrix(&model, &path, &data, &trace, 1, a, c).unwrap();
        let mab = fundamental_matrix(&model, &path, &data, &trace, 1, a, b).unwrap();
        let mbc = fundamental_matrix(&model, &path, &data, &trace, 1, b, c).unwrap();
        assert!((&mac - &mbc * &mab).amax() < 1e-8 * (1.0 + mac.amax()));
    }
    let m = fundamental_matrix(&model, &path, &data, &trace, 1, 4, last).unwrap();
    let x = trace.state(1, 4).to_vec();
    for c in 0..3 {
        let h = 1e-6;
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[c] += h;
        xm[c] -= h;
        let yp = flow_map(&model, &path, 8, &xp, 4, last).unwrap();
        let ym = flow_map(&model, &path, 8, &xm, 4, last).unwrap();
        for r in 0..3 {
            let fd = (yp[r] - ym[r]) / (2.0 * h);
            assert!((fd - m[(r, c)]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }
}

/// `∂X₁/∂θ_j` for a particle of layer `k` equals
/// `∫_{layer k} M(x; t, 1) w_j ∂_θv(X_t, θ_j) dt`.
#[test]
fn parameter_sensitivity_matches_linearized_formula() {
    let s = 32;
    for gated in [false, true] {
        let (model, path, data) = setup(2, gated, 13);
        let trace = integrate_forward(&model, &path, &data, s).unwrap();
        let last = trace.node_count() - 1;
        let (k, j) = (1, 2);
        let theta = path.particle(k, j).to_vec();
        let w = path.layer(k).weights()[j];
        let dt = path.dt(k);
        let node0 = trace.layer_node(k);
        let h_node = dt / s as f64;
        for i in 0..data.len() {
            let mut integral = nalgebra::DMatrix::zeros(2, model.m());
            for q in 0..=s {
                let node = node0 + q;
                let simpson = if q == 0 || q == s { 1.0 } else if q % 2 == 1 { 4.0 } else { 2.0 };
                let m = fundamental_matrix(&model, &path, &data, &trace, i, node, last).unwrap();
                let jt = model.jac_v_theta(trace.state(i, node), &theta).unwrap();
                integral += (m * jt) * (simpson * h_node / 3.0 * w);
            }
            for c in 0..model.m() {
                let h = 1e-6;
                let shifted = |delta: f64| {
                    let mut p = path.clone();
                    p.particle_mut(k, j)[c] += delta;
                    integrate_forward(&model, &p, &data, s).unwrap().final_state(i).to_vec()
                };
                let (yp, ym) = (shifted(h), shifted(-h));
                for r in 0..2 {
                    let fd = (yp[r] - ym[r]) / (2.0 * h);
                    let scale = integral.amax().max(1e-3);
                    assert!((fd - integral[(r, c)]).abs() / scale < 1e-4, "gated {gated} ({r},{c}): {fd} vs {}", integral[(r, c)]);
                }
            }
        }
    }
}
