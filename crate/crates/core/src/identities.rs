//! Identity catalog behind `nashflow verify`.
//!
//! Every check evaluates two independent routes (or a route against a closed
//! form) at sampled points and fields and records the worst residual.

use crate::fields::{random_unit, Killing, Polynomial, ProjectedConstant, ProjectedPolynomial, RotatedGradient, VectorField};
use crate::geometry::{Derivative, Ellipsoid, EmbeddedManifold, Matrix, Sphere, Vector};
use crate::operators::Operators;
use crate::scalar::Real;
use crate::spectral::{SpectralField, SphericalGrid};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Tolerance for identities evaluated with exact derivatives.
pub const ANALYTIC_TOL: f64 = 1e-8;
/// Tolerance for identities evaluated with nested finite differences.
pub const FD_TOL: f64 = 1e-5;
/// Tolerance for sign audits.
pub const AUDIT_TOL: f64 = 1e-6;
/// Tolerance for quadrature identities.
pub const QUADRATURE_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub identity_id: String,
    pub manifold: String,
    pub n_samples: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub n_points: usize,
    pub n_fields: usize,
    pub field_degree: u8,
    pub semi_axes: [f64; 3],
    pub ellipsoid_points: usize,
    pub ellipsoid_fields: usize,
    /// Test hook: negates the shape operator so the audits must fail.
    pub flip_shape_sign: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            n_points: 200,
            n_fields: 20,
            field_degree: 3,
            semi_axes: [1.0, 1.0, 2.0],
            ellipsoid_points: 24,
            ellipsoid_fields: 4,
            flip_shape_sign: false,
        }
    }
}

/// Collects residuals per identity, in first-seen order.
#[derive(Debug)]
struct Ledger {
    manifold: String,
    rows: Vec<(String, f64, usize, f64)>,
}

impl Ledger {
    fn new(manifold: impl Into<String>) -> Self {
        Ledger { manifold: manifold.into(), rows: Vec::new() }
    }

    fn add(&mut self, id: &str, tol: f64, residual: f64) {
        let r = if residual.is_finite() { residual } else { f64::INFINITY };
        match self.rows.iter_mut().find(|row| row.0 == id) {
            Some(row) => {
                row.2 += 1;
                row.3 = row.3.max(r);
            }
            None => self.rows.push((id.to_string(), tol, 1, r)),
        }
    }

    fn finish(self) -> Vec<IdentityRecord> {
        let manifold = self.manifold;
        self.rows
            .into_iter()
            .map(|(identity_id, tolerance, n_samples, max_residual)| IdentityRecord {
                identity_id,
                manifold: manifold.clone(),
                n_samples,
                max_residual,
                tolerance,
                pass: max_residual <= tolerance,
            })
            .collect()
    }
}

/// Delegating manifold whose shape operator has the wrong sign.
#[derive(Debug)]
pub struct FlippedShape<M>(pub M);

impl<T: Real, M: EmbeddedManifold<T, N>, const N: usize> EmbeddedManifold<T, N> for FlippedShape<M> {
    fn label(&self) -> String {
        self.0.label()
    }
    fn level<S: Real>(&self, y: &Vector<S, N>) -> S {
        self.0.level(y)
    }
    fn level_gradient<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        self.0.level_gradient(y)
    }
    fn membership_residual(&self, y: &Vector<T, N>) -> T {
        self.0.membership_residual(y)
    }
    fn membership_tolerance(&self) -> T {
        self.0.membership_tolerance()
    }
    fn derivative(&self) -> Derivative<T> {
        self.0.derivative()
    }
    fn max_step(&self) -> T {
        self.0.max_step()
    }
    fn project_point<S: Real>(&self, y: &Vector<S, N>) -> Option<Vector<S, N>> {
        self.0.project_point(y)
    }
    fn normal<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        self.0.normal(y)
    }
    fn projector<S: Real>(&self, y: &Vector<S, N>) -> Matrix<S, N> {
        self.0.projector(y)
    }
    fn d_lambda_raw(&self, x: &Vector<T, N>, v: &Vector<T, N>, xi: &Vector<T, N>) -> Vector<T, N> {
        self.0.d_lambda_raw(x, v, xi)
    }
    fn d_normal_raw(&self, x: &Vector<T, N>, v: &Vector<T, N>) -> Vector<T, N> {
        self.0.d_normal_raw(x, v)
    }
    fn shape_raw(&self, x: &Vector<T, N>, u: &Vector<T, N>, normal: &Vector<T, N>) -> Vector<T, N> {
        -self.0.shape_raw(x, u, normal)
    }
    fn trace_alpha_raw(&self, x: &Vector<T, N>) -> Vector<T, N> {
        self.0.trace_alpha_raw(x)
    }
}

fn unit<const N: usize>(i: usize) -> Vector<f64, N> {
    Vector::from_fn(|k, _| if k == i { 1.0 } else { 0.0 })
}

fn random_tangent<M: EmbeddedManifold<f64, N>, R: Rng, const N: usize>(m: &M, x: &Vector<f64, N>, rng: &mut R) -> Vector<f64, N> {
    m.projector(x) * random_unit::<f64, R, N>(rng)
}

fn random_killing<R: Rng, const N: usize>(rng: &mut R) -> Killing<f64, N> {
    let a = Matrix::<f64, N>::from_fn(|_, _| rng.random_range(-1.0..1.0));
    Killing::from_matrix(a - a.transpose())
}

fn random_point_on<M: EmbeddedManifold<f64, 3>, R: Rng>(m: &M, rng: &mut R) -> Vector3<f64> {
    loop {
        let y = random_unit::<f64, R, 3>(rng) * rng.random_range(0.8..1.6);
        if let Some(x) = m.project_point(&y) {
            return x;
        }
    }
}

/// Checks that need only the point and a field value, on any manifold.
fn pointwise_embedding<M: EmbeddedManifold<f64, N>, B: VectorField<N>, R: Rng, const N: usize>(
    ledger: &mut Ledger,
    ops: &Operators<'_, f64, M, N>,
    x: &Vector<f64, N>,
    b: &B,
    tol: f64,
    rng: &mut R,
) {
    let m = ops.manifold();
    let bx = b.eval(x);
    let frame: Vec<Vector<f64, N>> = (0..N).map(|i| ops.frame(i).eval(x)).collect();
    let completeness: f64 = frame.iter().map(|a| a.dot(&bx).powi(2)).sum::<f64>() - bx.norm_squared();
    ledger.add("frame_completeness", tol, completeness.abs());
    let div_sum = (0..N).fold(Vector::<f64, N>::zeros(), |acc, i| acc + frame[i] * ops.divergence(&ops.frame(i), x));
    ledger.add("frame_divergence_sum", tol, div_sum.norm());
    let t1 = ops.tensor_t1(b, x);
    ledger.add("t1_frame_vs_embedding", tol, (t1 - ops.tensor_t1_embedding(b, x)).norm());
    let ric = ops.ricci_gauss(b, x);
    ledger.add("ricci_decomposition", tol, (t1 + ric + ops.tensor_t2(b, x)).norm());
    let hodge = ops.hodge_laplacian(b, x);
    ledger.add("hodge_frame_vs_weitzenbock", tol, (hodge - ops.hodge_laplacian_weitzenbock(b, x)).norm());
    // Λ dΛ(v) = dΛ(v) Λ^⊥ and Λ^⊥ dΛ(v) = dΛ(v) Λ
    let v = random_tangent(m, x, rng);
    let p = m.projector(x);
    let q = Matrix::<f64, N>::identity() - p;
    let dl = Matrix::<f64, N>::from_columns(&(0..N).map(|j| m.d_lambda_raw(x, &v, &unit::<N>(j))).collect::<Vec<_>>());
    ledger.add("projector_exchange", tol, (p * dl - dl * q).norm().max((q * dl - dl * p).norm()));
    let (u, w) = (random_tangent(m, x, rng), random_tangent(m, x, rng));
    let normal = m.normal(x) * rng.random_range(0.5..2.0);
    let duality = m.alpha_raw(x, &u, &w).dot(&normal) - m.shape_raw(x, &u, &normal).dot(&w);
    ledger.add("shape_operator_duality", tol, duality.abs());
    ledger.add("second_fundamental_form_symmetry", tol, (m.alpha_raw(x, &u, &w) - m.alpha_raw(x, &w, &u)).norm());
    ledger.add("second_fundamental_form_normal", tol, (p * m.alpha_raw(x, &u, &w)).norm());
    let xi = random_unit::<f64, R, N>(rng);
    let div_projected = ops.divergence(&ProjectedConstant::new(m, xi), x);
    ledger.add("divergence_trace_alpha", tol, (div_projected - ops.divergence_of_projected(&xi, x)).abs());
}

/// Frame and curvature identities on the unit sphere `S^{N−1}`.
pub fn sphere_identities<const N: usize>(cfg: &VerifyConfig) -> Vec<IdentityRecord> {
    if cfg.flip_shape_sign {
        sphere_identities_on::<_, N>(&FlippedShape(Sphere::<f64, N>::new()), cfg)
    } else {
        sphere_identities_on::<_, N>(&Sphere::<f64, N>::new(), cfg)
    }
}

fn sphere_identities_on<M: EmbeddedManifold<f64, N>, const N: usize>(m: &M, cfg: &VerifyConfig) -> Vec<IdentityRecord> {
    let n = (N - 1) as f64;
    let tol = ANALYTIC_TOL;
    let ops = Operators::new(m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (N as u64) << 32);
    let mut ledger = Ledger::new(m.label());
    let fields: Vec<ProjectedPolynomial<'_, f64, M, N>> = (0..cfg.n_fields).map(|_| ProjectedPolynomial::random(m, cfg.field_degree, &mut rng)).collect();
    let killing: Vec<Killing<f64, N>> = (0..cfg.n_fields).map(|_| random_killing(&mut rng)).collect();
    for _ in 0..cfg.n_points {
        let x = random_unit::<f64, _, N>(&mut rng);
        for i in 0..N {
            let a = ops.frame(i);
            ledger.add("frame_divergence_closed_form", tol, (ops.divergence(&a, &x) + n * x[i]).abs());
        }
        let geo = (0..N).fold(Vector::<f64, N>::zeros(), |acc, i| acc + ops.covariant_derivative(&ops.frame(i), &x, &ops.frame(i).eval(&x)));
        ledger.add("frame_geodesic_sum", tol, geo.norm());
        let tr = m.trace_alpha_raw(&x);
        ledger.add("trace_alpha_closed_form", tol, (tr + x * n).norm());
        for (b, k) in fields.iter().zip(&killing) {
            pointwise_embedding(&mut ledger, &ops, &x, b, tol, &mut rng);
            let bx = b.eval(&x);
            let cov = (0..N).fold(0.0f64, |worst, i| worst.max((ops.covariant_derivative(&ops.frame(i), &x, &bx) + bx * x[i]).norm()));
            ledger.add("frame_covariant_closed_form", tol, cov);
            // Σ_i ⟨A_i ∧ ∇_v A_i, a ∧ b⟩ = 0
            let (ta, tb) = (random_tangent(m, &x, &mut rng), random_tangent(m, &x, &mut rng));
            let wedge: f64 = (0..N)
                .map(|i| {
                    let a = ops.frame(i).eval(&x);
                    let d = ops.covariant_derivative(&ops.frame(i), &x, &bx);
                    a.dot(&ta) * d.dot(&tb) - a.dot(&tb) * d.dot(&ta)
                })
                .sum();
            ledger.add("frame_wedge_sum", tol, wedge.abs());
            ledger.add("t1_closed_form", tol, (ops.tensor_t1(b, &x) + bx * n).norm());
            ledger.add("t1_embedding_closed_form", tol, (ops.tensor_t1_embedding(b, &x) + bx * n).norm());
            ledger.add("t2_closed_form", tol, (ops.tensor_t2(b, &x) - bx).norm());
            ledger.add("ricci_closed_form", tol, (ops.ricci(b, &x) - bx * (n - 1.0)).norm());
            ledger.add("ricci_gauss_closed_form", tol, (ops.ricci_gauss(b, &x) - bx * (n - 1.0)).norm());
            let lap_hat = ops.frame_laplacian(b, &x);
            let lap = ops.bochner_laplacian(b, &x);
            ledger.add("frame_laplacian_closed_form", tol, (lap_hat - lap - bx * (n + 1.0)).norm());
            // div-free companion: frame route of □̂ against the Bochner route
            let em = ops.ebin_marsden_divfree(k, &x).map(|v| (v - ops.ebin_marsden_laplacian(k, &x)).norm()).unwrap_or(f64::INFINITY);
            ledger.add("ebin_marsden_frame_vs_bochner", tol, em);
        }
    }
    ledger.finish()
}

/// Embedding identities on an ellipsoid with finite-difference derivatives.
pub fn ellipsoid_identities(cfg: &VerifyConfig) -> crate::error::Result<Vec<IdentityRecord>> {
    let e = Ellipsoid::ellipsoid(cfg.semi_axes)?;
    Ok(if cfg.flip_shape_sign { ellipsoid_identities_on(&FlippedShape(e.clone()), &e, cfg) } else { ellipsoid_identities_on(&e, &e, cfg) })
}

fn ellipsoid_identities_on<M: EmbeddedManifold<f64, 3>>(m: &M, e: &Ellipsoid<f64>, cfg: &VerifyConfig) -> Vec<IdentityRecord> {
    let tol = FD_TOL;
    let ops = Operators::new(m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe111);
    let [a, b, c] = cfg.semi_axes;
    let mut ledger = Ledger::new(format!("ellipsoid({a},{b},{c})"));
    let fields: Vec<ProjectedPolynomial<'_, f64, M, 3>> = (0..cfg.ellipsoid_fields).map(|_| ProjectedPolynomial::random(m, cfg.field_degree, &mut rng)).collect();
    let streams: Vec<RotatedGradient<'_, f64, M, Polynomial<f64, 3>>> =
        (0..cfg.ellipsoid_fields).map(|_| RotatedGradient::new(m, Polynomial::random(cfg.field_degree, &mut rng))).collect();
    let mut points: Vec<Vector3<f64>> = vec![Vector3::new(a, 0.0, 0.0)];
    points.extend((1..cfg.ellipsoid_points).map(|_| random_point_on(m, &mut rng)));
    for x in &points {
        for (bf, sf) in fields.iter().zip(&streams) {
            pointwise_embedding(&mut ledger, &ops, x, bf, tol, &mut rng);
            let k = e.gaussian_curvature(x);
            let bx = bf.eval(x);
            ledger.add("ricci_gaussian_curvature", tol, (ops.ricci(bf, x) - bx * k).norm());
            ledger.add("ricci_gauss_gaussian_curvature", tol, (ops.ricci_gauss(bf, x) - bx * k).norm());
            let em = ops.ebin_marsden_divfree(sf, x).map(|v| (v - ops.ebin_marsden_laplacian(sf, x)).norm()).unwrap_or(f64::INFINITY);
            ledger.add("ebin_marsden_frame_vs_bochner", tol, em);
        }
    }
    // At (a, 0, 0) the Gaussian curvature is a²/(b²c²), 1/4 for (1, 1, 2).
    let axis = Vector3::new(a, 0.0, 0.0);
    let k_axis = a * a / (b * b * c * c);
    for bf in &fields {
        ledger.add("ricci_axis_point", tol, (ops.ricci(bf, &axis) - bf.eval(&axis) * k_axis).norm());
    }
    ledger.finish()
}

/// Sign conventions that the written remarks get wrong, settled numerically.
pub fn sign_audits(cfg: &VerifyConfig) -> Vec<IdentityRecord> {
    if cfg.flip_shape_sign {
        sign_audits_on(&FlippedShape(Sphere::<f64, 3>::new()), cfg)
    } else {
        sign_audits_on(&Sphere::<f64, 3>::new(), cfg)
    }
}

fn sign_audits_on<M: EmbeddedManifold<f64, 3>>(m: &M, cfg: &VerifyConfig) -> Vec<IdentityRecord> {
    let tol = AUDIT_TOL;
    let ops = Operators::new(m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa0d1);
    let mut ledger = Ledger::new(m.label());
    let rotations: Vec<Killing<f64, 3>> = (0..3).map(|i| Killing::rotation(unit::<3>(i))).collect();
    let curl: Vec<SpectralField<f64>> = (-2..=2).map(|mm| SpectralField::mode(4, 2, mm)).collect();
    for _ in 0..cfg.n_points.clamp(1, 50) {
        let x = random_unit::<f64, _, 3>(&mut rng);
        let v = random_tangent(m, &x, &mut rng);
        // 𝒜(v, x) for the outer unit normal x
        ledger.add("shape_operator_outer_normal", tol, (m.shape_raw(&x, &v, &x) + v).norm());
        for r in &rotations {
            let rx = r.eval(&x);
            ledger.add("killing_ebin_marsden_vanishes", tol, ops.ebin_marsden_laplacian(r, &x).norm());
            ledger.add("killing_hodge_eigenvalue", tol, (ops.hodge_laplacian(r, &x) - rx * 2.0).norm());
            ledger.add("killing_frame_laplacian", tol, (ops.frame_laplacian(r, &x) - rx * 2.0).norm());
        }
        for f in &curl {
            let fx = f.eval(&x);
            let em = ops.ebin_marsden_laplacian(f, &x);
            let relation = em - (ops.hodge_laplacian(f, &x) - ops.ricci(f, &x) * 2.0);
            ledger.add("ebin_marsden_is_hodge_minus_two_ricci", tol, relation.norm());
            ledger.add("ebin_marsden_curl_eigenvalue", tol, (em - fx * 4.0).norm());
        }
    }
    // □̂ = 2 Def* Def in weak form: ∫⟨□̂B, B⟩ = 2∫|Def B|²
    let grid = SphericalGrid::<f64>::new(4, 12, 24).expect("valid grid");
    let weak: Vec<Box<dyn Fn(&Vector3<f64>) -> (f64, f64) + '_>> = vec![
        Box::new(|x| weak_terms(&ops, &rotations[2], x)),
        Box::new(|x| weak_terms(&ops, &curl[1], x)),
        Box::new(|x| weak_terms(&ops, &curl[4], x)),
    ];
    for w in &weak {
        let (lhs, rhs) = integrate2(&grid, w.as_ref());
        ledger.add("ebin_marsden_weak_definition", tol, (lhs - rhs).abs());
    }
    ledger.finish()
}

fn weak_terms<M: EmbeddedManifold<f64, 3>, B: VectorField<3>>(ops: &Operators<'_, f64, M, 3>, b: &B, x: &Vector3<f64>) -> (f64, f64) {
    let bx = b.eval(x);
    (ops.ebin_marsden_laplacian(b, x).dot(&bx), 2.0 * ops.deformation_tensor(b, x).norm_squared())
}

fn integrate2(grid: &SphericalGrid<f64>, f: &dyn Fn(&Vector3<f64>) -> (f64, f64)) -> (f64, f64) {
    grid.nodes().iter().zip(grid.weights()).fold((0.0, 0.0), |(a, b), (x, w)| {
        let (u, v) = f(x);
        (a + w * u, b + w * v)
    })
}

/// Integral identities on S² by Gauss quadrature, plus divergence
/// preservation checks.
pub fn integral_identities(cfg: &VerifyConfig) -> Vec<IdentityRecord> {
    let s2 = Sphere::<f64, 3>::new();
    let ops = Operators::new(&s2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1b9);
    let mut ledger = Ledger::new("S2");
    let grid = SphericalGrid::<f64>::new(6, 16, 32).expect("valid grid");
    let n_pairs = cfg.n_fields.clamp(1, 4);
    for _ in 0..n_pairs {
        let b = ProjectedPolynomial::random(&s2, cfg.field_degree, &mut rng);
        let w = ProjectedPolynomial::random(&s2, cfg.field_degree, &mut rng);
        let (lhs, rhs) = integrate2(&grid, &|x| (ops.hodge_laplacian(&b, x).dot(&w.eval(x)), b.eval(x).dot(&ops.hodge_laplacian(&w, x))));
        ledger.add("hodge_symmetric", QUADRATURE_TOL, (lhs - rhs).abs());
        let d = RotatedGradient::new(&s2, Polynomial::<f64, 3>::random(cfg.field_degree, &mut rng));
        // −∫⟨Δ̂B, B⟩ = 2∫|Def B|² − 2∫|B|² for div-free B
        let (lhs, rhs) = integrate2(&grid, &|x| {
            let dx = d.eval(x);
            (-ops.frame_laplacian(&d, x).dot(&dx), 2.0 * ops.deformation_tensor(&d, x).norm_squared() - 2.0 * dx.norm_squared())
        });
        ledger.add("frame_laplacian_energy", QUADRATURE_TOL, (lhs - rhs).abs());
    }
    let points: Vec<Vector3<f64>> = (0..6).map(|_| random_unit::<f64, _, 3>(&mut rng)).collect();
    let v = RotatedGradient::new(&s2, Polynomial::<f64, 3>::random(cfg.field_degree, &mut rng));
    let b = RotatedGradient::new(&s2, Polynomial::<f64, 3>::random(cfg.field_degree, &mut rng));
    for x in &points {
        let lie = ops.bracket(&v, &b);
        ledger.add("lie_bracket_divergence_free", AUDIT_TOL, ops.divergence(&lie, x).abs());
        ledger.add("hodge_preserves_divergence_free", ANALYTIC_TOL, ops.divergence(&HodgeOnSphere(&b), x).abs());
        for l in 1..=4usize {
            for mm in [-(l as i64), 0, l as i64] {
                let f = SpectralField::<f64>::mode(4, l, mm);
                let eig = (l * (l + 1)) as f64;
                ledger.add("hodge_curl_eigenvalue", ANALYTIC_TOL, (ops.hodge_laplacian(&f, x) - f.eval(x) * eig).norm());
            }
        }
    }
    ledger.finish()
}

/// `y ↦ □B(y)` on S², evaluated with the operator suite at scalar type `S`.
struct HodgeOnSphere<'a, B>(&'a B);

impl<B: VectorField<3>> VectorField<3> for HodgeOnSphere<'_, B> {
    fn eval<S: Real>(&self, y: &Vector<S, 3>) -> Vector<S, 3> {
        let s = Sphere::<S, 3>::new();
        Operators::new(&s).hodge_laplacian(self.0, y)
    }
}

/// The full catalog: S², S³, the configured ellipsoid, sign audits and
/// quadrature identities.
pub fn run_catalog(cfg: &VerifyConfig) -> crate::error::Result<Vec<IdentityRecord>> {
    let mut out = sphere_identities::<3>(cfg);
    out.extend(sphere_identities::<4>(cfg));
    out.extend(ellipsoid_identities(cfg)?);
    out.extend(sign_audits(cfg));
    out.extend(integral_identities(cfg));
    Ok(out)
}
