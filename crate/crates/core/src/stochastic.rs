//! Stochastic Lagrangian representation of the vector heat and Navier–Stokes
//! flows on S².
//!
//! Paths follow `dX = √(2ν) Σ A_i(X)∘dW^i + u(X) dt`, carry the tangent
//! Jacobian `J` of the flow and a transport matrix `Q` with
//! `Q' = ν Q J⁺ 𝒯(X) J`. Pairing `u_0(x0)` against `Q J⁺ v(X_t)` and averaging
//! over start points and noise gives `∫⟨u_t, v⟩`.
//!
//! Start points are the nodes of a [`SphericalGrid`]. An ensemble of
//! `n_paths` trajectories is split into `R = ⌈n_paths / nodes⌉` replicates, each
//! covering every node once; standard errors are stratified by node.

use crate::error::{Error, Result};
use crate::fields::VectorField;
use crate::geometry::{norm, EmbeddedManifold, Sphere};
use crate::operators::Operators;
use crate::rng::{normal3, StreamId};
use crate::scalar::Real;
use crate::spectral::{basis_jets, curl_components, degree_order, n_coeffs, SpectralField, SphericalGrid, StreamFunction};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Paths whose tangent Jacobian is worse conditioned than this are dropped.
pub const MAX_CONDITION: f64 = 1e6;
/// A run fails when more than this fraction of paths is dropped.
pub const MAX_DROP_FRACTION: f64 = 1e-3;
/// Start nodes per work unit. Fixed, so reductions do not depend on threads.
const BLOCK: usize = 64;

fn proj<T: Real>(x: &Vector3<T>) -> Matrix3<T> {
    Matrix3::identity() - x * x.transpose()
}

/// Orthonormal basis of the plane orthogonal to the unit vector `x`.
fn plane_basis<T: Real>(x: &Vector3<T>) -> (Vector3<T>, Vector3<T>) {
    let (ax, ay, az) = (x[0].abs(), x[1].abs(), x[2].abs());
    let axis = if ax <= ay && ax <= az {
        Vector3::x()
    } else if ay <= az {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let u = x.cross(&axis);
    let u = u / norm(&u);
    (u, x.cross(&u))
}

fn det3<T: Real>(m: &Matrix3<T>) -> T {
    m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)]) - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
        + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
}

fn inv3<T: Real>(m: &Matrix3<T>) -> Option<Matrix3<T>> {
    let d = det3(m);
    if d == T::zero() || !d.is_finite() {
        return None;
    }
    let c = |i: usize, j: usize| {
        let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
        let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
        m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)]
    };
    // inverse = adjugate / det, adjugate = cofactorᵀ
    Some(Matrix3::from_fn(|i, j| c(j, i) / d))
}

/// Matrix exponential by scaling and squaring of a Taylor series.
pub fn expm<T: Real>(a: &Matrix3<T>) -> Matrix3<T> {
    let row_norm = |m: &Matrix3<T>| (0..3).map(|i| (0..3).map(|j| m[(i, j)].abs()).fold(T::zero(), |s, v| s + v)).fold(T::zero(), T::max);
    let mut s = 0u32;
    let mut scale = T::one();
    let half = T::lit(0.5);
    while row_norm(a) * scale > half && s < 64 {
        scale *= half;
        s += 1;
    }
    let b = a * scale;
    let mut result = Matrix3::identity();
    let mut term = Matrix3::identity();
    for k in 1..=24 {
        term = term * b / T::lit(k as f64);
        result += term;
        if row_norm(&term) <= T::epsilon() * T::lit(1e-2) {
            break;
        }
    }
    for _ in 0..s {
        result = result * result;
    }
    result
}

/// Correction tensor in the transport equation for `Q`.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorChoice<T> {
    /// `𝒯 = 2T₁`; the represented operator is the Hodge Laplacian.
    TwoT1,
    /// `𝒯 = Λ D Λ` for a constant ambient matrix `D`.
    Custom(Matrix3<T>),
}

struct Conjugated<'a, T> {
    d: Matrix3<T>,
    field: &'a SpectralField<T>,
}

impl<T: Real> VectorField<3> for Conjugated<'_, T> {
    fn eval<S: Real>(&self, y: &Vector3<S>) -> Vector3<S> {
        let p = proj(y);
        p * self.d.map(S::cast) * p * self.field.eval(y)
    }
}

impl<T: Real> TensorChoice<T> {
    /// Ambient matrix of `𝒯` at `x` (acts on tangent vectors).
    pub fn matrix_at(&self, x: &Vector3<T>) -> Matrix3<T> {
        match self {
            TensorChoice::TwoT1 => {
                let s = Sphere::<T, 3>::new();
                let tr = s.trace_alpha_raw(x);
                let p = proj(x);
                let mut m = Matrix3::zeros();
                for i in 0..3 {
                    let b = p.column(i).into_owned();
                    m.set_column(i, &(s.shape_raw(x, &b, &tr) * T::lit(-2.0)));
                }
                m
            }
            TensorChoice::Custom(d) => {
                let p = proj(x);
                p * d * p
            }
        }
    }

    /// Refuses tensors that do not keep divergence-free fields divergence
    /// free: `div(𝒯 B)` is sampled for every `C_lm` with `l ≤ 3`.
    pub fn check_divergence_preserving(&self) -> Result<()> {
        let d = match self {
            TensorChoice::TwoT1 => return Ok(()),
            TensorChoice::Custom(d) => d.map(|v| v.to_f64_lossy()),
        };
        let s2 = Sphere::<f64, 3>::new();
        let ops = Operators::new(&s2);
        let scale = d.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let points = [
            Vector3::new(0.48, -0.6, 0.64),
            Vector3::new(-0.36, 0.48, 0.8),
            Vector3::new(0.0, 0.6, -0.8),
            Vector3::new(0.8, 0.0, 0.6),
            Vector3::new(-0.6, -0.64, 0.48),
        ];
        let mut worst = 0.0f64;
        for l in 1..=3usize {
            for m in -(l as i64)..=(l as i64) {
                let field = SpectralField::<f64>::mode(3, l, m);
                let g = Conjugated { d, field: &field };
                for x in &points {
                    worst = worst.max(ops.divergence(&g, x).abs());
                }
            }
        }
        if worst > 1e-8 * scale {
            return Err(Error::Precondition(format!("custom tensor does not preserve divergence-free fields (|div| up to {worst:.3e})")));
        }
        Ok(())
    }
}

/// One trajectory started at a quadrature node.
#[derive(Clone, Debug, PartialEq)]
pub struct PathState<T: Real> {
    pub x0: Vector3<T>,
    pub x: Vector3<T>,
    /// `T_{x0}M → T_xM`, pinned on both sides.
    pub j: Matrix3<T>,
    /// `T_{x0}M → T_{x0}M`.
    pub q: Matrix3<T>,
    pub weight: T,
    pub stream: StreamId,
}

impl<T: Real> PathState<T> {
    pub fn new(x0: Vector3<T>, weight: T, stream: StreamId) -> Self {
        let p = proj(&x0);
        PathState { x0, x: x0, j: p, q: p, weight, stream }
    }

    /// Largest entry of `Λ J Λ₀ − J` and `Λ₀ Q Λ₀ − Q`.
    pub fn pinning_residual(&self) -> T {
        let p0 = proj(&self.x0);
        let p = proj(&self.x);
        let rj = p * self.j * p0 - self.j;
        let rq = p0 * self.q * p0 - self.q;
        rj.iter().chain(rq.iter()).fold(T::zero(), |m, v| m.max(v.abs()))
    }

    fn lifted(&self) -> Matrix3<T> {
        self.j + self.x * self.x0.transpose()
    }

    /// Determinant of `J` restricted to the tangent planes.
    pub fn tangent_determinant(&self) -> T {
        det3(&self.lifted())
    }

    /// Condition number of `J` on the tangent planes.
    pub fn condition_number(&self) -> T {
        let (e1, e2) = plane_basis(&self.x0);
        let (f1, f2) = plane_basis(&self.x);
        let (je1, je2) = (self.j * e1, self.j * e2);
        let (a, b, c, d) = (f1.dot(&je1), f1.dot(&je2), f2.dot(&je1), f2.dot(&je2));
        // singular values of [[a, b], [c, d]] are (p ± q) / 2
        let p = ((a + d) * (a + d) + (c - b) * (c - b)).sqrt();
        let q = ((a - d) * (a - d) + (b + c) * (b + c)).sqrt();
        (p + q) / (p - q).abs()
    }

    /// Tangent-restricted inverse `J⁺: T_xM → T_{x0}M`, or `None` for a
    /// degenerate path (orientation lost or condition number above the cap).
    pub fn tangent_inverse(&self) -> Option<Matrix3<T>> {
        let d = self.tangent_determinant();
        if !(d > T::zero()) || !(self.condition_number() <= T::lit(MAX_CONDITION)) {
            return None;
        }
        inv3(&self.lifted()).map(|inv| inv - self.x0 * self.x.transpose())
    }

    /// Generator `J⁺ 𝒯(X) J` of the transport equation.
    pub fn generator(&self, tensor: &TensorChoice<T>) -> Option<Matrix3<T>> {
        self.tangent_inverse().map(|jp| jp * tensor.matrix_at(&self.x) * self.j)
    }

    /// `Q J⁺ v`, the pull-back of a tangent vector at `X_t` to `x0`.
    pub fn pull_back(&self, v: &Vector3<T>) -> Option<Vector3<T>> {
        self.tangent_inverse().map(|jp| self.q * jp * v)
    }

    /// `J⁺ᵀ Qᵀ u`, the vector deposited at `X_t` for `u = u_0(x0)`.
    pub fn deposit(&self, u: &Vector3<T>) -> Option<Vector3<T>> {
        self.tangent_inverse().map(|jp| jp.transpose() * self.q.transpose() * u)
    }
}

/// One Stratonovich–Heun step for `(X, J)` with normalization as retraction.
/// `J` is advanced by the exact derivative of the discrete step map, so it
/// remains the Jacobian of the discrete flow. `dw` is the Brownian increment.
pub fn sde_step<T: Real>(state: &mut PathState<T>, drift: Option<&StreamFunction<T>>, dt: T, nu: T, dw: &Vector3<T>) -> Result<()> {
    if !dw.iter().all(|v| v.is_finite()) {
        return Err(Error::Instability("non-finite noise increment".into()));
    }
    let sigma = (T::lit(2.0) * nu).sqrt();
    let id = Matrix3::<T>::identity();
    let increment = |x: &Vector3<T>| -> (Vector3<T>, Matrix3<T>) {
        let xd = x.dot(dw);
        let mut f = (dw - x * xd) * sigma;
        // DA_i(x)h = −⟨h,e_i⟩x − ⟨x,e_i⟩h, contracted with dw
        let mut df = (x * dw.transpose() + id * xd) * (-sigma);
        if let Some(u) = drift {
            let (v, dv) = u.value_and_jacobian(x);
            f += v * dt;
            df += dv * dt;
        }
        (f, df)
    };
    let retract = |y: &Vector3<T>| -> Result<(Vector3<T>, Matrix3<T>)> {
        let r = norm(y);
        if !(r > T::zero()) || !r.is_finite() {
            return Err(Error::StepTooLarge(format!("retraction of a point with norm {}", r.to_f64_lossy())));
        }
        let p = y / r;
        Ok((p, proj(&p) / r))
    };
    let half = T::lit(0.5);
    let x = state.x;
    let (f0, df0) = increment(&x);
    let max_step = Sphere::<T, 3>::new().max_step();
    if !(norm(&f0) <= max_step) {
        return Err(Error::StepTooLarge(format!("step {} exceeds {}", norm(&f0).to_f64_lossy(), max_step.to_f64_lossy())));
    }
    let (xs, dps) = retract(&(x + f0))?;
    let (f1, df1) = increment(&xs);
    let (xn, dp) = retract(&(x + (f0 + f1) * half))?;
    let tangent = (id + df0 * half) * state.j + df1 * dps * (id + df0) * state.j * half;
    state.j = dp * tangent * proj(&state.x0);
    state.x = xn;
    Ok(())
}

/// Exponential-midpoint step of `Q' = ν Q K` with `K` given at both ends of
/// the step; exact when `K` is constant.
pub fn q_step<T: Real>(state: &mut PathState<T>, k_start: &Matrix3<T>, k_end: &Matrix3<T>, dt: T, nu: T) {
    let omega = (k_start + k_end) * (nu * dt * T::lit(0.5));
    let p0 = proj(&state.x0);
    state.q = p0 * state.q * expm(&omega) * p0;
}

/// Run parameters shared by the flow and the fixed-point solver.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig<T> {
    pub nu: T,
    pub dt: T,
    pub horizon: T,
    /// Total trajectories; rounded up to a whole number of replicates.
    pub n_paths: usize,
    pub picard_iters: usize,
    pub picard_tol: T,
    pub seed: u64,
    pub tensor: TensorChoice<T>,
}

impl<T: Real> SolverConfig<T> {
    pub fn new(nu: T, dt: T, horizon: T, n_paths: usize) -> Self {
        SolverConfig { nu, dt, horizon, n_paths, picard_iters: 5, picard_tol: T::lit(1e-2), seed: 0, tensor: TensorChoice::TwoT1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > T::zero()) {
            return Err(Error::Config("nu must be positive".into()));
        }
        if self.picard_iters == 0 {
            return Err(Error::Config("picard_iters must be at least 1".into()));
        }
        if !(self.picard_tol >= T::zero()) {
            return Err(Error::Config("picard_tol must be non-negative".into()));
        }
        self.steps().map(|_| ())
    }

    /// Number of SDE steps; `horizon` must be a whole multiple of `dt`.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > T::zero()) || !(self.horizon >= T::zero()) {
            return Err(Error::Config("dt must be positive and T non-negative".into()));
        }
        if self.dt > self.horizon && self.horizon > T::zero() {
            return Err(Error::Config("dt exceeds the horizon".into()));
        }
        if !(self.nu >= T::zero()) {
            return Err(Error::Config("nu must be non-negative".into()));
        }
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be at least 1".into()));
        }
        let ratio = (self.horizon / self.dt).to_f64_lossy();
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-6 * ratio.max(1.0) {
            return Err(Error::Config(format!("horizon is not a multiple of dt ({ratio} steps)")));
        }
        Ok(steps as usize)
    }
}

/// How noise is shared between start points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLayout {
    /// Every path has its own Brownian motion.
    Independent,
    /// All nodes of a replicate share one Brownian motion, so a replicate is
    /// a sample of the stochastic flow of diffeomorphisms.
    CommonFlow,
}

fn stream_for(layout: NoiseLayout, seed: u64, iteration: u32, node: usize, replicate: usize) -> StreamId {
    match layout {
        NoiseLayout::Independent => StreamId::new(seed, iteration, node as u32, replicate as u32),
        NoiseLayout::CommonFlow => StreamId::new(seed, iteration, u32::MAX, replicate as u32),
    }
}

fn drift_at<T>(drift: &[StreamFunction<T>], step: usize) -> Option<&StreamFunction<T>> {
    if drift.is_empty() {
        None
    } else {
        Some(&drift[step.min(drift.len() - 1)])
    }
}

/// Integrates one path over `steps` steps, calling `observe(step, state)` at
/// step 0 and after every step. Returns `false` if the path degenerates.
fn run_path<T: Real, O: FnMut(usize, &PathState<T>)>(
    state: &mut PathState<T>,
    cfg: &SolverConfig<T>,
    steps: usize,
    drift: &[StreamFunction<T>],
    mut observe: O,
) -> Result<bool> {
    let mut rng = state.stream.rng();
    let sqdt = cfg.dt.sqrt();
    let Some(mut k0) = state.generator(&cfg.tensor) else { return Ok(false) };
    observe(0, state);
    for n in 0..steps {
        let z = normal3(&mut rng);
        let dw = Vector3::new(T::lit(z[0]), T::lit(z[1]), T::lit(z[2])) * sqdt;
        sde_step(state, drift_at(drift, n), cfg.dt, cfg.nu, &dw)?;
        let Some(k1) = state.generator(&cfg.tensor) else { return Ok(false) };
        q_step(state, &k0, &k1, cfg.dt, cfg.nu);
        k0 = k1;
        observe(n + 1, state);
    }
    Ok(true)
}

fn replicates_for(n_paths: usize, nodes: usize) -> usize {
    n_paths.div_ceil(nodes).max(1)
}

fn check_drops(dropped: usize, total: usize) -> Result<()> {
    if dropped as f64 > MAX_DROP_FRACTION * total as f64 {
        return Err(Error::PathDegenerate { dropped, total });
    }
    Ok(())
}

/// Value with a Monte Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate<T> {
    pub mean: T,
    pub stderr: T,
}

/// Paths propagated to a common time.
#[derive(Clone, Debug)]
pub struct Ensemble<T: Real> {
    pub layout: NoiseLayout,
    pub time: T,
    pub replicates: usize,
    /// Node-major: entry `q · replicates + r`; `None` for dropped paths.
    pub paths: Vec<Option<PathState<T>>>,
    pub dropped: usize,
}

impl<T: Real> Ensemble<T> {
    pub fn nodes(&self) -> usize {
        self.paths.len() / self.replicates
    }

    pub fn total(&self) -> usize {
        self.paths.len()
    }

    /// Quadrature-weighted mean of `k` per-path quantities with standard
    /// errors. Independent layout stratifies by node; the common-flow layout
    /// uses the spread of per-replicate totals.
    pub fn weighted_mean<F>(&self, k: usize, f: F) -> Result<Vec<Estimate<T>>>
    where
        F: Fn(&PathState<T>, &mut [T]) + Sync,
    {
        if self.paths.iter().all(Option::is_none) {
            return Err(Error::EmptyEnsemble);
        }
        let r = self.replicates;
        match self.layout {
            NoiseLayout::Independent => {
                let blocks: Vec<Vec<(Vec<T>, Vec<T>)>> = self
                    .paths
                    .par_chunks(r * BLOCK)
                    .map(|chunk| {
                        let mut buf = vec![T::zero(); k];
                        chunk
                            .chunks(r)
                            .map(|node| {
                                let vals: Vec<Vec<T>> = node
                                    .iter()
                                    .flatten()
                                    .map(|p| {
                                        buf.iter_mut().for_each(|b| *b = T::zero());
                                        f(p, &mut buf);
                                        buf.iter().map(|&v| v * p.weight).collect()
                                    })
                                    .collect();
                                node_moments(&vals, k)
                            })
                            .collect()
                    })
                    .collect();
                let mut mean = vec![T::zero(); k];
                let mut var = vec![T::zero(); k];
                for (m, v) in blocks.iter().flatten() {
                    for i in 0..k {
                        mean[i] += m[i];
                        var[i] += v[i];
                    }
                }
                Ok(mean.into_iter().zip(var).map(|(mean, v)| Estimate { mean, stderr: v.sqrt() }).collect())
            }
            NoiseLayout::CommonFlow => {
                let q = self.nodes();
                let totals: Vec<Option<Vec<T>>> = (0..r)
                    .into_par_iter()
                    .map(|rep| {
                        let mut acc = vec![T::zero(); k];
                        let mut buf = vec![T::zero(); k];
                        for node in 0..q {
                            let p = self.paths[node * r + rep].as_ref()?;
                            buf.iter_mut().for_each(|b| *b = T::zero());
                            f(p, &mut buf);
                            for i in 0..k {
                                acc[i] += buf[i] * p.weight;
                            }
                        }
                        Some(acc)
                    })
                    .collect();
                let flows: Vec<Vec<T>> = totals.into_iter().flatten().collect();
                if flows.is_empty() {
                    return Err(Error::EmptyEnsemble);
                }
                let (mean, var) = node_moments(&flows, k);
                Ok(mean.into_iter().zip(var).map(|(m, v)| Estimate { mean: m, stderr: v.sqrt() }).collect())
            }
        }
    }
}

/// Mean of samples and variance of that mean (`NaN` with fewer than two).
fn node_moments<T: Real>(vals: &[Vec<T>], k: usize) -> (Vec<T>, Vec<T>) {
    let n = vals.len();
    if n == 0 {
        return (vec![T::zero(); k], vec![T::zero(); k]);
    }
    let nf = T::lit(n as f64);
    let mut mean = vec![T::zero(); k];
    for v in vals {
        for i in 0..k {
            mean[i] += v[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![T::zero(); k];
    if n < 2 {
        var.iter_mut().for_each(|v| *v = T::nan());
        return (mean, var);
    }
    for v in vals {
        for i in 0..k {
            let d = v[i] - mean[i];
            var[i] += d * d;
        }
    }
    let denom = nf * (nf - T::one());
    var.iter_mut().for_each(|v| *v /= denom);
    (mean, var)
}

/// Propagates `n_paths` trajectories from the grid nodes to the horizon.
/// `drift[n]` drives step `n` (the last entry is reused); empty means `u = 0`.
pub fn propagate<T: Real>(
    grid: &SphericalGrid<T>,
    cfg: &SolverConfig<T>,
    drift: &[StreamFunction<T>],
    layout: NoiseLayout,
    iteration: u32,
) -> Result<Ensemble<T>> {
    let steps = cfg.steps()?;
    let nodes = grid.nodes();
    let weights = grid.weights();
    let r = replicates_for(cfg.n_paths, nodes.len());
    let starts: Vec<usize> = (0..nodes.len()).step_by(BLOCK).collect();
    let blocks: Vec<Result<Vec<Option<PathState<T>>>>> = starts
        .par_iter()
        .map(|&b| {
            let mut out = Vec::with_capacity(BLOCK * r);
            for q in b..(b + BLOCK).min(nodes.len()) {
                for rep in 0..r {
                    let mut s = PathState::new(nodes[q], weights[q], stream_for(layout, cfg.seed, iteration, q, rep));
                    let alive = run_path(&mut s, cfg, steps, drift, |_, _| {})?;
                    out.push(alive.then_some(s));
                }
            }
            Ok(out)
        })
        .collect();
    let mut paths = Vec::with_capacity(nodes.len() * r);
    for b in blocks {
        paths.extend(b?);
    }
    let dropped = paths.iter().filter(|p| p.is_none()).count();
    check_drops(dropped, paths.len())?;
    Ok(Ensemble { layout, time: cfg.dt * T::lit(steps as f64), replicates: r, paths, dropped })
}

fn require_divergence_free<T: Real>(v: &SpectralField<T>) -> Result<()> {
    if !v.is_divergence_free() {
        return Err(Error::Precondition("test and initial fields must be divergence free".into()));
    }
    Ok(())
}

/// `∫⟨u_t, v⟩` as the weighted mean of `⟨u_0(x0), Q J⁺ v(X_t)⟩`.
pub fn pairing_estimator<T: Real>(u0: &SpectralField<T>, ensemble: &Ensemble<T>, v: &SpectralField<T>) -> Result<Estimate<T>> {
    require_divergence_free(v)?;
    let est = ensemble.weighted_mean(1, |p, out| {
        let g = p.deposit(&u0.eval(&p.x0)).unwrap_or_else(Vector3::zeros);
        out[0] = g.dot(&v.eval(&p.x));
    })?;
    Ok(est[0])
}

/// Represented field with a standard error per coefficient.
#[derive(Clone, Debug)]
pub struct Reconstruction<T> {
    pub field: SpectralField<T>,
    pub stderr: Vec<T>,
}

impl<T: Real> Reconstruction<T> {
    /// `√(Σ stderr²)`, the noise level of the coefficient vector.
    pub fn noise_norm(&self) -> T {
        self.stderr.iter().fold(T::zero(), |s, &e| s + e * e).sqrt()
    }
}

/// Reconstructs `u_t` by pairing against every `C_lm` up to the grid's
/// `l_max`, i.e. depositing `J⁺ᵀ Qᵀ u_0(x0)` at `X_t(x0)`.
pub fn reconstruct_u<T: Real>(u0: &SpectralField<T>, ensemble: &Ensemble<T>, grid: &SphericalGrid<T>) -> Result<Reconstruction<T>> {
    require_divergence_free(u0)?;
    let k = n_coeffs(grid.l_max());
    let est = ensemble.weighted_mean(k, |p, out| {
        if let Some(g) = p.deposit(&u0.eval(&p.x0)) {
            curl_components(grid.legendre(), &p.x, &g, out);
        }
    })?;
    let curl = est.iter().map(|e| e.mean).collect();
    Ok(Reconstruction { field: SpectralField::from_curl(grid.l_max(), curl)?, stderr: est.iter().map(|e| e.stderr).collect() })
}

/// Streaming propagation that reconstructs `u` at the steps in `record`
/// without keeping the paths. Returns the reconstructions and the number of
/// dropped paths.
pub fn propagate_reconstruct<T: Real>(
    grid: &SphericalGrid<T>,
    u0: &SpectralField<T>,
    cfg: &SolverConfig<T>,
    drift: &[StreamFunction<T>],
    iteration: u32,
    record: &[usize],
) -> Result<(Vec<Reconstruction<T>>, usize)> {
    require_divergence_free(u0)?;
    let steps = cfg.steps()?;
    let nodes = grid.nodes();
    let weights = grid.weights();
    let r = replicates_for(cfg.n_paths, nodes.len());
    let k = n_coeffs(grid.l_max());
    let mut slot = vec![usize::MAX; steps + 1];
    for (i, &s) in record.iter().enumerate() {
        if s > steps {
            return Err(Error::Config(format!("record step {s} beyond {steps} steps")));
        }
        slot[s] = i;
    }
    let width = record.len() * k;
    let starts: Vec<usize> = (0..nodes.len()).step_by(BLOCK).collect();
    type Partial<T> = (Vec<T>, Vec<T>, usize);
    let blocks: Vec<Result<Partial<T>>> = starts
        .par_iter()
        .map(|&b| {
            let mut mean = vec![T::zero(); width];
            let mut var = vec![T::zero(); width];
            let mut dropped = 0;
            let mut reps: Vec<Vec<T>> = Vec::with_capacity(r);
            let mut coeffs = vec![T::zero(); k];
            for q in b..(b + BLOCK).min(nodes.len()) {
                reps.clear();
                let u0x = u0.eval(&nodes[q]);
                for rep in 0..r {
                    let mut s = PathState::new(nodes[q], weights[q], stream_for(NoiseLayout::Independent, cfg.seed, iteration, q, rep));
                    let mut buf = vec![T::zero(); width];
                    let mut degenerate = false;
                    let alive = run_path(&mut s, cfg, steps, drift, |n, st| {
                        let i = slot[n];
                        if i == usize::MAX {
                            return;
                        }
                        match st.deposit(&u0x) {
                            Some(g) => {
                                curl_components(grid.legendre(), &st.x, &g, &mut coeffs);
                                for (o, c) in buf[i * k..(i + 1) * k].iter_mut().zip(&coeffs) {
                                    *o = *c * weights[q];
                                }
                            }
                            None => degenerate = true,
                        }
                    })?;
                    if alive && !degenerate {
                        reps.push(buf);
                    } else {
                        dropped += 1;
                    }
                }
                let (m, v) = node_moments(&reps, width);
                for i in 0..width {
                    mean[i] += m[i];
                    var[i] += v[i];
                }
            }
            Ok((mean, var, dropped))
        })
        .collect();
    let mut mean = vec![T::zero(); width];
    let mut var = vec![T::zero(); width];
    let mut dropped = 0;
    for b in blocks {
        let (m, v, d) = b?;
        for i in 0..width {
            mean[i] += m[i];
            var[i] += v[i];
        }
        dropped += d;
    }
    check_drops(dropped, nodes.len() * r)?;
    let out = (0..record.len())
        .map(|i| {
            let curl = mean[i * k..(i + 1) * k].to_vec();
            let stderr = var[i * k..(i + 1) * k].iter().map(|v| v.sqrt()).collect();
            SpectralField::from_curl(grid.l_max(), curl).map(|field| Reconstruction { field, stderr })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, dropped))
}

/// `u_0` decayed by the Stokes semigroup `e^{−ν l(l+1) t}`.
pub fn stokes_decay<T: Real>(u0: &SpectralField<T>, nu: T, t: T) -> SpectralField<T> {
    let mut out = u0.clone();
    for (i, c) in out.curl.iter_mut().enumerate() {
        let (l, _) = degree_order(i);
        *c *= (-nu * T::lit((l * (l + 1)) as f64) * t).exp();
    }
    out
}

/// Outcome of the fixed-point iteration.
#[derive(Clone, Debug)]
pub struct PicardResult<T> {
    /// `u` at every SDE step of the final iterate.
    pub fields: Vec<SpectralField<T>>,
    /// Standard errors of the final iterate at the horizon.
    pub stderr: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Max-over-time relative L² change after each iteration.
    pub changes: Vec<T>,
    pub dropped: usize,
}

/// Fixed-point iteration `u^{k+1} = reconstruct(drift u^k)` over the SDE
/// time grid, started from the Stokes flow of `u_0`, with fresh noise per
/// iteration.
pub fn picard_solve<T: Real>(grid: &SphericalGrid<T>, u0: &SpectralField<T>, cfg: &SolverConfig<T>) -> Result<PicardResult<T>> {
    cfg.validate()?;
    cfg.tensor.check_divergence_preserving()?;
    require_divergence_free(u0)?;
    if u0.l_max() != grid.l_max() {
        return Err(Error::Config(format!("field l_max {} differs from grid l_max {}", u0.l_max(), grid.l_max())));
    }
    let steps = cfg.steps()?;
    let record: Vec<usize> = (0..=steps).collect();
    let mut current: Vec<SpectralField<T>> = (0..=steps).map(|n| stokes_decay(u0, cfg.nu, cfg.dt * T::lit(n as f64))).collect();
    let mut changes = Vec::new();
    let mut stderr = vec![T::zero(); n_coeffs(grid.l_max())];
    let mut dropped = 0;
    let mut converged = false;
    let tiny = T::lit(1e-300).max(T::min_positive_value());
    for it in 1..=cfg.picard_iters {
        let drift: Vec<StreamFunction<T>> = current.iter().map(SpectralField::stream_function).collect();
        let (recs, d) = propagate_reconstruct(grid, u0, cfg, &drift, it as u32, &record)?;
        dropped += d;
        let change = recs
            .iter()
            .zip(&current)
            .map(|(new, old)| new.field.distance(old) / old.l2_norm().max(tiny))
            .fold(T::zero(), T::max);
        stderr = recs.last().map(|r| r.stderr.clone()).unwrap_or_default();
        current = recs.into_iter().map(|r| r.field).collect();
        changes.push(change);
        if change <= cfg.picard_tol {
            converged = true;
            break;
        }
    }
    Ok(PicardResult { fields: current, stderr, iterations: changes.len(), converged, changes, dropped })
}

/// Flow-density diagnostics of an ensemble.
#[derive(Clone, Debug)]
pub struct DensityReport<T> {
    /// `Σ_q w_q det J(x_q)` per common-noise flow: the area of the image,
    /// i.e. the mass of the flow density. Empty for independent paths.
    pub flow_masses: Vec<T>,
    /// Scalar harmonic coefficients `∫ ρ̄ Y_lm` of the mean density for
    /// `l ≤ l_density`, with standard errors.
    pub mean_density: Vec<Estimate<T>>,
    /// Mean density sampled at the grid nodes.
    pub density_grid: Vec<T>,
    /// Range of `1/ρ = det_tangent J` over surviving paths.
    pub det_range: (T, T),
    pub dropped: usize,
}

impl<T: Real> DensityReport<T> {
    pub fn max_mass_error(&self) -> T {
        let vol = T::lit(4.0) * T::PI();
        self.flow_masses.iter().fold(T::zero(), |m, &v| m.max((v - vol).abs()))
    }

    /// Largest `|det J − 1|`.
    pub fn max_det_deviation(&self) -> T {
        (self.det_range.0 - T::one()).abs().max((self.det_range.1 - T::one()).abs())
    }
}

/// Mass and mean density of the push-forward `(X_t)_#(dx)`: the density
/// coefficients are `E Σ_q w_q Y_lm(X_t(x_q))` and the path density is
/// `ρ(X_t(x0)) = 1/det_tangent J_t(x0)`.
pub fn density_diagnostics<T: Real>(ensemble: &Ensemble<T>, grid: &SphericalGrid<T>, l_density: usize) -> Result<DensityReport<T>> {
    let l_density = l_density.min(grid.l_max());
    let k = n_coeffs(l_density);
    let mean_density = ensemble.weighted_mean(k, |p, out| {
        for (o, (v, _)) in out.iter_mut().zip(basis_jets(grid.legendre(), &p.x)) {
            *o = v;
        }
    })?;
    let mut coeffs = vec![T::zero(); n_coeffs(grid.l_max())];
    for (c, e) in coeffs.iter_mut().zip(&mean_density) {
        *c = e.mean;
    }
    let density_grid = grid.synthesize_scalar(&coeffs)?;
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for p in ensemble.paths.iter().flatten() {
        let d = p.tangent_determinant();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let flow_masses = match ensemble.layout {
        NoiseLayout::Independent => Vec::new(),
        NoiseLayout::CommonFlow => {
            let r = ensemble.replicates;
            (0..r)
                .filter_map(|rep| {
                    (0..ensemble.nodes())
                        .try_fold(T::zero(), |acc, q| ensemble.paths[q * r + rep].as_ref().map(|p| acc + p.weight * p.tangent_determinant()))
                })
                .collect()
        }
    };
    Ok(DensityReport { flow_masses, mean_density, density_grid, det_range: (lo, hi), dropped: ensemble.dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn state_at(x0: Vector3<f64>) -> PathState<f64> {
        PathState::new(x0, 1.0, StreamId::new(0, 0, 0, 0))
    }

    #[test]
    fn expm_matches_closed_forms() {
        let a = Matrix3::new(0.0, -1.3, 0.0, 1.3, 0.0, 0.0, 0.0, 0.0, 0.0);
        let e = expm(&a);
        let (s, c) = 1.3f64.sin_cos();
        assert_abs_diff_eq!(e, Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0), epsilon = 1e-14);
        let d = expm(&Matrix3::from_diagonal(&Vector3::new(-3.0, 0.5, 9.0)));
        assert_abs_diff_eq!(d[(0, 0)], (-3.0f64).exp(), epsilon = 1e-15);
        assert!((d[(2, 2)] / 9.0f64.exp() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn tangent_inverse_of_identity_and_scaling() {
        let x0 = Vector3::new(0.48, -0.6, 0.64);
        let mut s = state_at(x0);
        assert_abs_diff_eq!(s.tangent_inverse().unwrap(), proj(&x0), epsilon = 1e-15);
        assert_abs_diff_eq!(s.tangent_determinant(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.condition_number(), 1.0, epsilon = 1e-12);
        s.j *= 3.0;
        assert_abs_diff_eq!(s.tangent_determinant(), 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.tangent_inverse().unwrap(), proj(&x0) / 3.0, epsilon = 1e-15);
        // similarity invariance of the generator
        let k = s.generator(&TensorChoice::TwoT1).unwrap();
        assert_abs_diff_eq!(k, proj(&x0) * -4.0, epsilon = 1e-13);
        s.j *= 1e-7;
        assert_abs_diff_eq!(s.condition_number(), 1.0, epsilon = 1e-6);
        let mut skewed = state_at(x0);
        let t = skewed.x0.cross(&Vector3::z()).normalize();
        skewed.j += t * t.transpose() * -0.9999999;
        assert!(skewed.tangent_inverse().is_none());
    }

    #[test]
    fn two_t1_on_the_sphere_is_minus_four() {
        let x = Vector3::new(0.0, 0.6, 0.8);
        assert_abs_diff_eq!(TensorChoice::<f64>::TwoT1.matrix_at(&x), proj(&x) * -4.0, epsilon = 1e-14);
    }

    #[test]
    fn still_path_without_noise_or_drift() {
        let x0 = Vector3::new(0.0, 0.6, 0.8);
        let mut s = state_at(x0);
        let before = s.clone();
        sde_step(&mut s, None, 1e-3, 0.0, &Vector3::new(0.3, -0.2, 0.1)).unwrap();
        assert_abs_diff_eq!(s.x, before.x, epsilon = 1e-16);
        assert_abs_diff_eq!(s.j, before.j, epsilon = 1e-15);
    }

    #[test]
    fn rigid_rotation_is_second_order() {
        let l_max = 3;
        let u = SpectralField::<f64>::rotation(l_max, 1.0).stream_function();
        let x0 = Vector3::new(0.8, 0.0, 0.6);
        let exact = |t: f64| Vector3::new(0.8 * t.cos(), 0.8 * t.sin(), 0.6);
        let err = |dt: f64| {
            let mut s = state_at(x0);
            sde_step(&mut s, Some(&u), dt, 0.0, &Vector3::zeros()).unwrap();
            (s.x - exact(dt)).norm()
        };
        let (e1, e2) = (err(0.02), err(0.01));
        assert!(e1 < 0.02f64.powi(2));
        // local error of a second-order method shrinks 8x per halving
        assert!(e1 / e2 > 7.0, "{e1} {e2}");
        // Jacobian of a rigid rotation is the rotation itself
        let mut s = state_at(x0);
        for _ in 0..100 {
            sde_step(&mut s, Some(&u), 0.01, 0.0, &Vector3::zeros()).unwrap();
        }
        assert!((s.x - exact(1.0)).norm() < 1e-5);
        let (sn, cs) = 1.0f64.sin_cos();
        let rot = Matrix3::new(cs, -sn, 0.0, sn, cs, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(s.j, rot * proj(&x0), epsilon = 1e-4);
        assert_abs_diff_eq!(s.tangent_determinant(), 1.0, epsilon = 1e-7);
    }

    #[test]
    fn jacobian_is_derivative_of_step_map() {
        let u = SpectralField::<f64>::mode(4, 3, -2).stream_function();
        let dw = Vector3::new(0.05, -0.03, 0.02);
        let x0 = Vector3::new(0.48, -0.6, 0.64);
        let step = |x: Vector3<f64>| {
            let mut s = state_at(x);
            sde_step(&mut s, Some(&u), 0.01, 0.3, &dw).unwrap();
            s
        };
        let s = step(x0);
        for v in proj(&x0).column_iter() {
            let v = v.into_owned();
            let h = 1e-6;
            let fd = (step((x0 + v * h).normalize()).x - step((x0 - v * h).normalize()).x) / (2.0 * h);
            assert_abs_diff_eq!(s.j * v, fd, epsilon = 1e-8);
        }
        assert!(s.pinning_residual() < 1e-14);
    }

    #[test]
    fn transport_closed_form() {
        let cfg = SolverConfig { seed: 11, ..SolverConfig::new(0.1, 1e-3, 0.5, 1) };
        let x0 = Vector3::new(0.0, 0.6, 0.8);
        let mut s = PathState::new(x0, 1.0, StreamId::new(11, 0, 0, 0));
        assert!(run_path(&mut s, &cfg, 500, &[], |_, _| {}).unwrap());
        let target = proj(&x0) * (-0.2f64).exp();
        assert!((s.q - target).norm() / target.norm() < 1e-10);
        assert!(s.pinning_residual() < 1e-12);
        // 𝒯 = 0 leaves Q at the identity
        let zero = SolverConfig { tensor: TensorChoice::Custom(Matrix3::zeros()), ..cfg };
        let mut s = PathState::new(x0, 1.0, StreamId::new(11, 0, 0, 0));
        run_path(&mut s, &zero, 500, &[], |_, _| {}).unwrap();
        assert_abs_diff_eq!(s.q, proj(&x0), epsilon = 1e-14);
    }

    #[test]
    fn custom_tensor_precheck() {
        assert!(TensorChoice::Custom(Matrix3::<f64>::identity() * 2.5).check_divergence_preserving().is_ok());
        let bad = TensorChoice::Custom(Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0)));
        assert!(matches!(bad.check_divergence_preserving(), Err(Error::Precondition(_))));
    }

    #[test]
    fn config_validation() {
        let ok = SolverConfig::new(0.1, 1e-3, 0.5, 10);
        assert_eq!(ok.steps().unwrap(), 500);
        assert!(ok.validate().is_ok());
        assert!(SolverConfig { nu: 0.0, ..ok.clone() }.validate().is_err());
        assert!(SolverConfig { dt: 0.3, ..ok.clone() }.steps().is_err());
        assert!(SolverConfig { dt: 1.0, ..ok.clone() }.steps().is_err());
        assert!(SolverConfig { n_paths: 0, ..ok }.steps().is_err());
    }

    #[test]
    fn time_zero_reconstruction_is_exact() {
        let grid = SphericalGrid::<f64>::new(4, 8, 16).unwrap();
        let mut u0 = SpectralField::mode(4, 2, 1);
        u0.axpy(0.5, &SpectralField::mode(4, 4, -3));
        let cfg = SolverConfig::new(0.1, 1e-3, 0.0, 1);
        let ens = propagate(&grid, &cfg, &[], NoiseLayout::Independent, 0).unwrap();
        let rec = reconstruct_u(&u0, &ens, &grid).unwrap();
        assert!(rec.field.distance(&u0) < 1e-10);
        let p = pairing_estimator(&u0, &ens, &SpectralField::mode(4, 2, 1)).unwrap();
        assert_abs_diff_eq!(p.mean, 1.0, epsilon = 1e-12);
        let d = density_diagnostics(&ens, &grid, 2).unwrap();
        assert!(d.density_grid.iter().all(|&r| (r - 1.0).abs() < 1e-12));
        assert!(pairing_estimator(&u0, &ens, &SpectralField::gradient_mode(4, 1, 0)).is_err());
    }

    #[test]
    fn ensembles_are_thread_independent() {
        let grid = SphericalGrid::<f64>::new(4, 8, 16).unwrap();
        let u0 = SpectralField::mode(4, 2, 1);
        let cfg = SolverConfig { seed: 3, ..SolverConfig::new(0.1, 1e-2, 0.1, 300) };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let ens = propagate(&grid, &cfg, &[], NoiseLayout::Independent, 1).unwrap();
                reconstruct_u(&u0, &ens, &grid).unwrap()
            })
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.field.curl, b.field.curl);
        assert_eq!(a.stderr, b.stderr);
    }

    #[test]
    fn streaming_matches_materialized() {
        let grid = SphericalGrid::<f64>::new(4, 8, 16).unwrap();
        let u0 = SpectralField::mode(4, 2, 1);
        let cfg = SolverConfig { seed: 5, ..SolverConfig::new(0.1, 1e-2, 0.1, 256) };
        let ens = propagate(&grid, &cfg, &[], NoiseLayout::Independent, 2).unwrap();
        let a = reconstruct_u(&u0, &ens, &grid).unwrap();
        let (recs, dropped) = propagate_reconstruct(&grid, &u0, &cfg, &[], 2, &[0, 10]).unwrap();
        assert_eq!(dropped, 0);
        assert!(recs[0].field.distance(&u0) < 1e-10);
        assert!(recs[1].field.distance(&a.field) < 1e-13);
    }

    #[test]
    fn common_flow_mass() {
        let grid = SphericalGrid::<f64>::new(6, 16, 32).unwrap();
        let cfg = SolverConfig { seed: 9, ..SolverConfig::new(0.1, 1e-2, 0.2, 3 * 512) };
        let ens = propagate(&grid, &cfg, &[], NoiseLayout::CommonFlow, 0).unwrap();
        let d = density_diagnostics(&ens, &grid, 2).unwrap();
        assert_eq!(d.flow_masses.len(), 3);
        assert!(d.max_mass_error() < 1e-3, "{:?}", d.flow_masses);
        assert!(d.det_range.0 < 1.0 && d.det_range.1 > 1.0);
    }
}
