use nalgebra::Vector3;
use nashflow::fields::VectorField;
use nashflow::geometry::Sphere;
use nashflow::operators::Operators;
use nashflow::rng::{normal3, StreamId};
use nashflow::spectral::{index, SpectralField, SphericalGrid};
use nashflow::stochastic::{pairing_estimator, propagate, q_step, reconstruct_u, sde_step, NoiseLayout, PathState, SolverConfig, TensorChoice};

fn mixed(l_max: usize) -> SpectralField<f64> {
    let mut u = SpectralField::zeros(l_max);
    u.curl[index(1, 0)] = 1.0;
    u.curl[index(2, 1)] = 0.8;
    u.curl[index(3, -2)] = -0.6;
    u
}

#[test]
fn pinning_holds_over_a_thousand_steps() {
    let grid = SphericalGrid::<f64>::new(4, 6, 12).unwrap();
    let u = mixed(4);
    let cfg = SolverConfig::new(0.1, 1e-3, 1.0, grid.len());
    let ens = propagate(&grid, &cfg, &[u.stream_function()], NoiseLayout::Independent, 0).unwrap();
    let worst = ens.paths.iter().flatten().map(|p| p.pinning_residual()).fold(0.0, f64::max);
    assert_eq!(ens.dropped, 0);
    assert!(worst <= 1e-8, "pinning drift {worst:e}");
}

#[test]
fn estimator_variance_scales_inversely_with_paths() {
    let grid = SphericalGrid::<f64>::new(4, 6, 12).unwrap();
    let v = SpectralField::mode(4, 2, 1);
    let scaled: Vec<f64> = [1_000usize, 10_000, 100_000]
        .iter()
        .map(|&n| {
            let cfg = SolverConfig { seed: 5, ..SolverConfig::new(0.1, 0.01, 0.2, n) };
            let ens = propagate(&grid, &cfg, &[], NoiseLayout::Independent, 0).unwrap();
            let e = pairing_estimator(&v, &ens, &v).unwrap();
            e.stderr * e.stderr * ens.total() as f64
        })
        .collect();
    for s in &scaled {
        let r = s / scaled[2];
        assert!((0.7..1.4).contains(&r), "n · stderr² ratios {scaled:?}");
    }
}

/// Pairing integrand `w ⟨u_0(x0), Q J⁺ v(X)⟩` for three step sizes driven by
/// the same Brownian path, summed over all paths.
fn coupled_pairing(grid: &SphericalGrid<f64>, replicates: u32, dt: f64, steps: usize, nu: f64) -> [f64; 3] {
    let v = SpectralField::<f64>::mode(grid.l_max(), 2, 1);
    let tensor = TensorChoice::TwoT1;
    let mut total = [0.0; 3];
    for (q, (x0, w)) in grid.nodes().iter().zip(grid.weights()).enumerate() {
        let u0 = v.eval(x0);
        for r in 0..replicates {
            let mut rng = StreamId::new(11, 0, q as u32, r).rng();
            let mut states: Vec<PathState<f64>> = (0..3).map(|_| PathState::new(*x0, *w, StreamId::new(11, 0, q as u32, r))).collect();
            let mut k0: Vec<_> = states.iter().map(|s| s.generator(&tensor).unwrap()).collect();
            let fine = 4;
            let mut acc = [Vector3::zeros(); 2];
            for n in 0..steps * fine {
                let z = normal3(&mut rng);
                let dw = Vector3::new(z[0], z[1], z[2]) * (dt / fine as f64).sqrt();
                // level 2: dt/4, level 1: dt/2, level 0: dt
                let mut advance = |lvl: usize, inc: Vector3<f64>, h: f64| {
                    sde_step(&mut states[lvl], None, h, nu, &inc).unwrap();
                    let k1 = states[lvl].generator(&tensor).unwrap();
                    q_step(&mut states[lvl], &k0[lvl], &k1, h, nu);
                    k0[lvl] = k1;
                };
                advance(2, dw, dt / 4.0);
                acc[0] += dw;
                acc[1] += dw;
                if n % 2 == 1 {
                    advance(1, acc[1], dt / 2.0);
                    acc[1] = Vector3::zeros();
                }
                if n % 4 == 3 {
                    advance(0, acc[0], dt);
                    acc[0] = Vector3::zeros();
                }
            }
            for (t, s) in total.iter_mut().zip(&states) {
                *t += s.weight * s.deposit(&u0).unwrap().dot(&v.eval(&s.x)) / replicates as f64;
            }
        }
    }
    total
}

#[test]
fn heat_decay_bias_is_first_order_in_dt() {
    let grid = SphericalGrid::<f64>::new(4, 6, 12).unwrap();
    let (nu, t): (f64, f64) = (0.1, 1.0);
    let exact = (-nu * 6.0 * t).exp();
    let dt = 0.1;
    let [b0, b1, b2] = coupled_pairing(&grid, 1400, dt, (t / dt).round() as usize, nu).map(|e| e - exact);
    // Coupled differences cancel most of the noise: b(dt) − b(dt/2) ≈ 2 (b(dt/2) − b(dt/4)).
    let ratio = (b0 - b1) / (b1 - b2);
    assert!((1.5..2.6).contains(&ratio), "biases {b0:e} {b1:e} {b2:e}, ratio {ratio}");
}

#[test]
fn heat_decay_follows_hodge_eigenvalues_from_the_operator_suite() {
    let grid = SphericalGrid::<f64>::new(4, 8, 16).unwrap();
    let u0 = mixed(4);
    let (nu, t) = (0.1, 0.2);
    let cfg = SolverConfig { seed: 3, ..SolverConfig::new(nu, 2e-3, t, 100_000) };
    let ens = propagate(&grid, &cfg, &[], NoiseLayout::Independent, 0).unwrap();
    let rec = reconstruct_u(&u0, &ens, &grid).unwrap();
    let s2 = Sphere::<f64, 3>::new();
    let ops = Operators::new(&s2);
    let x = Vector3::new(0.36, 0.48, -0.8);
    for (l, m) in [(1usize, 0i64), (2, 1), (3, -2)] {
        let mode = SpectralField::<f64>::mode(4, l, m);
        let b = mode.eval(&x);
        let lambda = ops.hodge_laplacian(&mode, &x).dot(&b) / b.norm_squared();
        assert!((lambda - (l * (l + 1)) as f64).abs() < 1e-8);
        let i = index(l, m);
        let predicted = u0.curl[i] * (-nu * lambda * t).exp();
        let z = (rec.field.curl[i] - predicted) / rec.stderr[i];
        assert!(z.abs() <= 3.0, "mode ({l},{m}): {} vs {predicted}, z = {z}", rec.field.curl[i]);
    }
}
