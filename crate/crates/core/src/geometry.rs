//! Embedded hypersurfaces `M ⊂ ℝ^N` and their pointwise extrinsic geometry.
//!
//! Tangent vectors live in ambient coordinates. Every manifold supplies a
//! smooth ambient extension of its projector `Λ` and unit normal, generic over
//! the scalar so that dual numbers can differentiate through them.

use crate::dual::{seed, tangent};
use crate::error::{Error, Result};
use crate::scalar::Real;
use nalgebra::{SMatrix, SVector};
use std::fmt::Debug;

pub type Vector<T, const N: usize> = SVector<T, N>;
pub type Matrix<T, const N: usize> = SMatrix<T, N, N>;

/// Euclidean norm that also works for dual scalars.
#[inline]
pub fn norm<S: Real, const N: usize>(v: &Vector<S, N>) -> S {
    v.dot(v).sqrt()
}

#[inline]
pub(crate) fn cast_vec<T: Real, S: Real, const N: usize>(v: &Vector<T, N>) -> Vector<S, N> {
    v.map(S::cast)
}

/// Tolerance `t` floored at a few ulps of `T`, so `f32` instances stay usable.
#[inline]
pub(crate) fn tol<T: Real>(t: f64) -> T {
    T::lit(t).max(T::epsilon() * T::lit(16.0))
}

/// How derivatives of ambient extensions are taken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Derivative<T> {
    /// Forward-mode dual numbers through the ambient formula.
    Exact,
    /// Central difference along a retracted curve with the given step.
    Central(T),
}

/// A compact hypersurface with an explicit ambient realization.
pub trait EmbeddedManifold<T: Real, const N: usize>: Debug + Send + Sync {
    fn label(&self) -> String;

    /// Level function vanishing on the manifold.
    fn level<S: Real>(&self, y: &Vector<S, N>) -> S;

    /// Ambient gradient of [`level`](Self::level).
    fn level_gradient<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N>;

    /// Membership residual compared against [`membership_tolerance`](Self::membership_tolerance).
    fn membership_residual(&self, y: &Vector<T, N>) -> T;

    fn membership_tolerance(&self) -> T;

    /// Default derivative mode for operators on this manifold.
    fn derivative(&self) -> Derivative<T>;

    /// Largest ambient step accepted by [`retract`](EmbeddedManifold::retract).
    fn max_step(&self) -> T;

    /// Maps an ambient point near the manifold back onto it. Returns `None` when
    /// the projection does not converge.
    fn project_point<S: Real>(&self, y: &Vector<S, N>) -> Option<Vector<S, N>>;

    /// Ambient extension of the unit normal.
    fn normal<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        let g = self.level_gradient(y);
        g / norm(&g)
    }

    /// Ambient extension of the tangent projector `Λ_y`.
    fn projector<S: Real>(&self, y: &Vector<S, N>) -> Matrix<S, N> {
        let n = self.normal(y);
        Matrix::<S, N>::identity() - n * n.transpose()
    }

    /// `dΛ_x(v) ξ` on raw vectors.
    fn d_lambda_raw(&self, x: &Vector<T, N>, v: &Vector<T, N>, xi: &Vector<T, N>) -> Vector<T, N> {
        match self.derivative() {
            Derivative::Exact => tangent(&(self.projector(&seed(x, v)) * cast_vec(xi))),
            Derivative::Central(h) => along_curve(self, x, v, h, |p| self.projector(p) * xi),
        }
    }

    /// Derivative of the normal extension along a tangent `v`.
    fn d_normal_raw(&self, x: &Vector<T, N>, v: &Vector<T, N>) -> Vector<T, N> {
        match self.derivative() {
            Derivative::Exact => tangent(&self.normal(&seed(x, v))),
            Derivative::Central(h) => along_curve(self, x, v, h, |p| self.normal(p)),
        }
    }

    /// `α_x(u, v) = dΛ_x(u) v`.
    fn alpha_raw(&self, x: &Vector<T, N>, u: &Vector<T, N>, v: &Vector<T, N>) -> Vector<T, N> {
        self.d_lambda_raw(x, u, v)
    }

    /// `𝒜(u, V) = −Λ_x ∂_u V` for the normal field extending `V` along `n`.
    fn shape_raw(&self, x: &Vector<T, N>, u: &Vector<T, N>, normal: &Vector<T, N>) -> Vector<T, N> {
        let c = normal.dot(&self.normal(x));
        self.projector(x) * self.d_normal_raw(x, u) * (-c)
    }

    /// Orthonormal basis of `T_xM` (N − 1 vectors).
    fn tangent_basis(&self, x: &Vector<T, N>) -> Vec<Vector<T, N>> {
        let p = self.projector(x);
        let mut cols: Vec<Vector<T, N>> = (0..N).map(|i| p.column(i).into_owned()).collect();
        cols.sort_by(|a, b| b.dot(b).partial_cmp(&a.dot(a)).unwrap());
        let mut basis: Vec<Vector<T, N>> = Vec::with_capacity(N - 1);
        for c in cols {
            if basis.len() == N - 1 {
                break;
            }
            let mut w = c;
            for b in &basis {
                w -= b * b.dot(&w);
            }
            let r = norm(&w);
            if r > T::lit(1e-6) {
                basis.push(w / r);
            }
        }
        basis
    }

    /// `Σ_k α(b_k, b_k)` over the supplied orthonormal tangent basis.
    fn trace_alpha_in(&self, x: &Vector<T, N>, basis: &[Vector<T, N>]) -> Vector<T, N> {
        basis
            .iter()
            .fold(Vector::zeros(), |acc, b| acc + self.alpha_raw(x, b, b))
    }

    fn trace_alpha_raw(&self, x: &Vector<T, N>) -> Vector<T, N> {
        self.trace_alpha_in(x, &self.tangent_basis(x))
    }

    // Checked API on validated points.

    fn intrinsic_dim(&self) -> usize {
        N - 1
    }

    fn point(&self, coords: Vector<T, N>) -> Result<ManifoldPoint<T, N>> {
        let residual = self.membership_residual(&coords);
        let tolerance = self.membership_tolerance();
        if !(residual.abs() <= tolerance) {
            return Err(Error::InvalidPoint {
                residual: residual.to_f64_lossy(),
                tolerance: tolerance.to_f64_lossy(),
            });
        }
        if !(norm(&self.level_gradient(&coords)) > T::epsilon()) {
            return Err(Error::Degenerate("level function has a vanishing gradient".into()));
        }
        Ok(ManifoldPoint { coords })
    }

    fn tangent(&self, x: &ManifoldPoint<T, N>, v: Vector<T, N>) -> Result<TangentVector<T, N>> {
        let off = norm(&(v - self.projector(&x.coords) * v));
        if !(off <= tol::<T>(1e-10) * norm(&v).max(T::one())) {
            return Err(Error::NotTangent(off.to_f64_lossy()));
        }
        Ok(TangentVector { base: *x, vec: v })
    }

    fn project(&self, x: &ManifoldPoint<T, N>, xi: &Vector<T, N>) -> TangentVector<T, N> {
        TangentVector { base: *x, vec: self.projector(&x.coords) * xi }
    }

    /// `A_i = Λ_x e_i` for the standard ambient basis.
    fn frame_field(&self, x: &ManifoldPoint<T, N>) -> Frame<T, N> {
        let p = self.projector(&x.coords);
        Frame {
            point: *x,
            vectors: std::array::from_fn(|i| TangentVector { base: *x, vec: p.column(i).into_owned() }),
        }
    }

    fn d_lambda(&self, x: &ManifoldPoint<T, N>, v: &TangentVector<T, N>, xi: &Vector<T, N>) -> Result<Vector<T, N>> {
        v.check_base(x)?;
        Ok(self.d_lambda_raw(&x.coords, &v.vec, xi))
    }

    fn second_fundamental_form(
        &self,
        x: &ManifoldPoint<T, N>,
        u: &TangentVector<T, N>,
        v: &TangentVector<T, N>,
    ) -> Result<Vector<T, N>> {
        u.check_base(x)?;
        v.check_base(x)?;
        Ok(self.alpha_raw(&x.coords, &u.vec, &v.vec))
    }

    fn shape_operator(
        &self,
        x: &ManifoldPoint<T, N>,
        u: &TangentVector<T, N>,
        normal: &Vector<T, N>,
    ) -> Result<TangentVector<T, N>> {
        u.check_base(x)?;
        let along = self.projector(&x.coords) * normal;
        if !(norm(&along) <= tol::<T>(1e-8) * norm(normal).max(T::one())) {
            return Err(Error::InvalidNormal(norm(&along).to_f64_lossy()));
        }
        Ok(TangentVector { base: *x, vec: self.shape_raw(&x.coords, &u.vec, normal) })
    }

    fn trace_alpha(&self, x: &ManifoldPoint<T, N>) -> Vector<T, N> {
        self.trace_alpha_raw(&x.coords)
    }

    fn retract(&self, x: &ManifoldPoint<T, N>, step: &Vector<T, N>) -> Result<ManifoldPoint<T, N>> {
        let s = norm(step);
        if !(s <= self.max_step()) {
            return Err(Error::StepTooLarge(format!("|step| = {} exceeds {}", s, self.max_step())));
        }
        let y = self
            .project_point(&(x.coords + step))
            .ok_or_else(|| Error::StepTooLarge("projection onto the manifold did not converge".into()))?;
        self.point(y)
    }
}

/// Central difference of `f` along the retracted curve through `x` with velocity `v`.
pub(crate) fn along_curve<T, S, M, R, F, const N: usize>(m: &M, x: &Vector<S, N>, v: &Vector<S, N>, h: T, f: F) -> R
where
    T: Real,
    S: Real,
    M: EmbeddedManifold<T, N> + ?Sized,
    R: std::ops::Sub<Output = R> + std::ops::Mul<S, Output = R>,
    F: Fn(&Vector<S, N>) -> R,
{
    let speed = norm(v);
    let speed = if speed > S::zero() { speed } else { S::one() };
    let t = S::cast(h) / speed;
    let nan = || Vector::from_element(S::nan());
    let p = m.project_point(&(x + v * t)).unwrap_or_else(nan);
    let q = m.project_point(&(x - v * t)).unwrap_or_else(nan);
    (f(&p) - f(&q)) * (S::one() / (t + t))
}

/// A point on a manifold, validated at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManifoldPoint<T: Real, const N: usize> {
    coords: Vector<T, N>,
}

impl<T: Real, const N: usize> ManifoldPoint<T, N> {
    pub fn coords(&self) -> &Vector<T, N> {
        &self.coords
    }
}

/// Ambient-coordinate tangent vector attached to a base point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentVector<T: Real, const N: usize> {
    base: ManifoldPoint<T, N>,
    vec: Vector<T, N>,
}

impl<T: Real, const N: usize> TangentVector<T, N> {
    pub fn base(&self) -> &ManifoldPoint<T, N> {
        &self.base
    }

    pub fn vec(&self) -> &Vector<T, N> {
        &self.vec
    }

    fn check_base(&self, x: &ManifoldPoint<T, N>) -> Result<()> {
        if self.base.coords == x.coords {
            Ok(())
        } else {
            Err(Error::BaseMismatch)
        }
    }
}

/// The embedding frame `A_1..A_N` at a point.
#[derive(Clone, Debug)]
pub struct Frame<T: Real, const N: usize> {
    pub point: ManifoldPoint<T, N>,
    pub vectors: [TangentVector<T, N>; N],
}

/// Unit sphere `S^{N-1} ⊂ ℝ^N` with closed-form geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere<T, const N: usize> {
    max_step: T,
}

impl<T: Real, const N: usize> Sphere<T, N> {
    pub fn new() -> Self {
        assert!(N >= 3, "sphere needs intrinsic dimension at least 2");
        Self { max_step: T::one() }
    }
}

impl<T: Real, const N: usize> Default for Sphere<T, N> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real, const N: usize> EmbeddedManifold<T, N> for Sphere<T, N> {
    fn label(&self) -> String {
        format!("S{}", N - 1)
    }

    fn level<S: Real>(&self, y: &Vector<S, N>) -> S {
        (y.dot(y) - S::one()) * S::lit(0.5)
    }

    fn level_gradient<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        *y
    }

    fn membership_residual(&self, y: &Vector<T, N>) -> T {
        norm(y) - T::one()
    }

    fn membership_tolerance(&self) -> T {
        tol(1e-12)
    }

    fn derivative(&self) -> Derivative<T> {
        Derivative::Exact
    }

    fn max_step(&self) -> T {
        self.max_step
    }

    fn project_point<S: Real>(&self, y: &Vector<S, N>) -> Option<Vector<S, N>> {
        let r = norm(y);
        (r > S::zero()).then(|| y / r)
    }

    // Unnormalized extensions n(y) = y, Λ_y = I − y yᵀ.
    fn normal<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        *y
    }

    fn projector<S: Real>(&self, y: &Vector<S, N>) -> Matrix<S, N> {
        Matrix::<S, N>::identity() - y * y.transpose()
    }

    fn d_lambda_raw(&self, x: &Vector<T, N>, v: &Vector<T, N>, xi: &Vector<T, N>) -> Vector<T, N> {
        -(x * v.dot(xi)) - v * x.dot(xi)
    }

    fn d_normal_raw(&self, _x: &Vector<T, N>, v: &Vector<T, N>) -> Vector<T, N> {
        *v
    }

    fn shape_raw(&self, x: &Vector<T, N>, u: &Vector<T, N>, normal: &Vector<T, N>) -> Vector<T, N> {
        u * (-normal.dot(x))
    }

    fn trace_alpha_raw(&self, x: &Vector<T, N>) -> Vector<T, N> {
        x * -T::lit((N - 1) as f64)
    }
}

/// Smooth level function on `ℝ³` whose zero set is a compact surface.
pub trait Constraint<T: Real>: Debug + Send + Sync {
    fn value<S: Real>(&self, y: &Vector<S, 3>) -> S;

    /// Gradient of [`value`](Self::value); forward-mode by default.
    fn gradient<S: Real>(&self, y: &Vector<S, 3>) -> Vector<S, 3> {
        Vector::from_fn(|j, _| {
            let e = Vector::<S, 3>::from_fn(|i, _| if i == j { S::one() } else { S::zero() });
            self.value(&seed(y, &e)).eps
        })
    }
}

/// `Σ y_i² / a_i² − 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipsoidLevel<T> {
    pub semi_axes: [T; 3],
}

impl<T: Real> Constraint<T> for EllipsoidLevel<T> {
    fn value<S: Real>(&self, y: &Vector<S, 3>) -> S {
        (0..3).fold(-S::one(), |acc, i| {
            let a = S::cast(self.semi_axes[i]);
            acc + y[i] * y[i] / (a * a)
        })
    }

    fn gradient<S: Real>(&self, y: &Vector<S, 3>) -> Vector<S, 3> {
        Vector::from_fn(|i, _| {
            let a = S::cast(self.semi_axes[i]);
            S::lit(2.0) * y[i] / (a * a)
        })
    }
}

/// Zero set of a [`Constraint`] with finite-difference extrinsic geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImplicitSurface<T, C> {
    pub constraint: C,
    pub fd_step: T,
    pub max_step: T,
}

pub type Ellipsoid<T> = ImplicitSurface<T, EllipsoidLevel<T>>;

impl<T: Real, C: Constraint<T>> ImplicitSurface<T, C> {
    pub fn new(constraint: C, max_step: T) -> Self {
        Self { constraint, fd_step: T::lit(1e-5), max_step }
    }

    pub fn with_fd_step(mut self, h: T) -> Self {
        self.fd_step = h;
        self
    }
}

impl<T: Real> Ellipsoid<T> {
    pub fn ellipsoid(semi_axes: [T; 3]) -> Result<Self> {
        if semi_axes.iter().any(|a| !(*a > T::zero()) || !a.is_finite()) {
            return Err(Error::Config("ellipsoid semi-axes must be positive".into()));
        }
        let smallest = semi_axes.iter().fold(T::infinity(), |m, a| m.min(*a));
        Ok(Self::new(EllipsoidLevel { semi_axes }, smallest * T::lit(0.25)))
    }

    /// Closed-form Gaussian curvature `1 / (a²b²c² h⁴)`.
    pub fn gaussian_curvature(&self, x: &Vector<T, 3>) -> T {
        let [a, b, c] = self.constraint.semi_axes;
        let h2 = x[0] * x[0] / a.powi(4) + x[1] * x[1] / b.powi(4) + x[2] * x[2] / c.powi(4);
        T::one() / (a * a * b * b * c * c * h2 * h2)
    }
}

impl<T: Real, C: Constraint<T>> EmbeddedManifold<T, 3> for ImplicitSurface<T, C> {
    fn label(&self) -> String {
        format!("{:?}", self.constraint)
    }

    fn level<S: Real>(&self, y: &Vector<S, 3>) -> S {
        self.constraint.value(y)
    }

    fn level_gradient<S: Real>(&self, y: &Vector<S, 3>) -> Vector<S, 3> {
        self.constraint.gradient(y)
    }

    fn membership_residual(&self, y: &Vector<T, 3>) -> T {
        self.constraint.value(y)
    }

    fn membership_tolerance(&self) -> T {
        tol(1e-10)
    }

    fn derivative(&self) -> Derivative<T> {
        Derivative::Central(self.fd_step)
    }

    fn max_step(&self) -> T {
        self.max_step
    }

    /// Newton on `s ↦ F(y + s ∇F(y))`, at most 8 iterations.
    fn project_point<S: Real>(&self, y: &Vector<S, 3>) -> Option<Vector<S, 3>> {
        let g = self.constraint.gradient(y);
        let mut s = S::zero();
        let mut p = *y;
        for _ in 0..8 {
            let f = self.constraint.value(&p);
            if f.abs() <= S::epsilon() * S::lit(4.0) {
                break;
            }
            let slope = self.constraint.gradient(&p).dot(&g);
            if !(slope.abs() > S::zero()) {
                return None;
            }
            s -= f / slope;
            p = y + g * s;
        }
        (self.constraint.value(&p).abs() <= S::lit(1e-10) && p.iter().all(|c| c.is_finite())).then_some(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::Dual;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn s2() -> Sphere<f64, 3> {
        Sphere::new()
    }

    fn ell(a: f64, b: f64, c: f64) -> Ellipsoid<f64> {
        Ellipsoid::ellipsoid([a, b, c]).unwrap()
    }

    #[test]
    fn project_on_sphere_and_unit_ellipsoid() {
        let m = s2();
        let x = m.point(Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(*m.project(&x, &Vector3::new(1.0, 2.0, 3.0)).vec(), Vector3::new(1.0, 2.0, 0.0));
        let t = Vector3::new(0.3, -0.7, 0.0);
        assert_eq!(*m.project(&x, &t).vec(), t);

        let e = ell(1.0, 1.0, 1.0);
        let x = e.point(Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(*e.project(&x, &Vector3::new(5.0, 1.0, 0.0)).vec(), Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn off_manifold_points_are_rejected() {
        assert!(matches!(s2().point(Vector3::new(0.0, 0.0, 1.1)), Err(Error::InvalidPoint { .. })));
        assert!(ell(1.0, 1.0, 2.0).point(Vector3::new(0.0, 0.0, 2.0 + 1e-6)).is_err());
        let m = s2();
        let x = m.point(Vector3::z()).unwrap();
        assert!(matches!(m.tangent(&x, Vector3::new(0.0, 1.0, 1e-3)), Err(Error::NotTangent(_))));
    }

    #[test]
    fn frame_at_north_pole() {
        let m = s2();
        let f = m.frame_field(&m.point(Vector3::z()).unwrap());
        assert_eq!(*f.vectors[0].vec(), Vector3::x());
        assert_eq!(*f.vectors[1].vec(), Vector3::y());
        assert_eq!(*f.vectors[2].vec(), Vector3::zeros());
    }

    #[test]
    fn frame_at_ellipsoid_pole() {
        let e = ell(1.0, 1.0, 2.0);
        let f = e.frame_field(&e.point(Vector3::new(0.0, 0.0, 2.0)).unwrap());
        assert_abs_diff_eq!(*f.vectors[0].vec(), Vector3::x(), epsilon = 1e-15);
        assert_abs_diff_eq!(*f.vectors[1].vec(), Vector3::y(), epsilon = 1e-15);
        assert_abs_diff_eq!(*f.vectors[2].vec(), Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn d_lambda_sphere_example() {
        let m = s2();
        let x = m.point(Vector3::z()).unwrap();
        let v = m.tangent(&x, Vector3::x()).unwrap();
        assert_eq!(m.d_lambda(&x, &v, &Vector3::z()).unwrap(), -Vector3::x());
    }

    #[test]
    fn sphere_closed_forms_match_forward_mode() {
        let m = s2();
        let x = Vector3::new(0.48, -0.6, 0.64);
        let v = m.projector(&x) * Vector3::new(0.3, 0.1, -0.9);
        let xi = Vector3::new(-1.0, 0.4, 2.0);
        let ad = tangent(&(m.projector(&seed(&x, &v)) * xi.map(Dual::constant)));
        assert_abs_diff_eq!(ad, m.d_lambda_raw(&x, &v, &xi), epsilon = 1e-15);
    }

    #[test]
    fn ellipsoid_d_lambda_converges_at_second_order() {
        let x = Vector3::new(0.6, 0.0, 1.6);
        let oracle = {
            let e = ell(1.0, 1.0, 2.0);
            let v = e.projector(&x) * Vector3::new(0.2, 1.0, -0.5);
            let xi = Vector3::new(0.7, -0.3, 0.4);
            (v, xi, tangent(&(e.projector(&seed(&x, &v)) * xi.map(Dual::constant))))
        };
        let (v, xi, exact) = oracle;
        let err = |h: f64| {
            let e = ell(1.0, 1.0, 2.0).with_fd_step(h);
            (e.d_lambda_raw(&x, &v, &xi) - exact).norm()
        };
        let ratio = err(2e-3) / err(1e-3);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
        assert!(err(1e-5) < 1e-9);
    }

    #[test]
    fn alpha_on_sphere() {
        let m = s2();
        let x = m.point(Vector3::z()).unwrap();
        let e1 = m.tangent(&x, Vector3::x()).unwrap();
        let e2 = m.tangent(&x, Vector3::y()).unwrap();
        assert_eq!(m.second_fundamental_form(&x, &e1, &e1).unwrap(), -Vector3::z());
        assert_eq!(m.second_fundamental_form(&x, &e1, &e2).unwrap(), Vector3::zeros());
    }

    #[test]
    fn shape_operator_of_outer_normal_is_minus_identity() {
        let m = s2();
        let x = m.point(Vector3::new(0.0, 0.6, 0.8)).unwrap();
        let u = m.tangent(&x, Vector3::new(1.0, 0.8, -0.6)).unwrap();
        let a = m.shape_operator(&x, &u, x.coords()).unwrap();
        assert_abs_diff_eq!(*a.vec(), -*u.vec(), epsilon = 1e-15);
        assert_eq!(*m.shape_operator(&x, &u, &Vector3::zeros()).unwrap().vec(), Vector3::zeros());
        assert!(matches!(m.shape_operator(&x, &u, u.vec()), Err(Error::InvalidNormal(_))));
    }

    #[test]
    fn trace_alpha_reductions() {
        let m = s2();
        let x = Vector3::new(0.48, -0.6, 0.64);
        assert_abs_diff_eq!(m.trace_alpha_in(&x, &m.tangent_basis(&x)), -2.0 * x, epsilon = 1e-15);
        let s3 = Sphere::<f64, 4>::new();
        let y = nalgebra::Vector4::new(0.5, 0.5, 0.5, 0.5);
        assert_abs_diff_eq!(s3.trace_alpha_in(&y, &s3.tangent_basis(&y)), -3.0 * y, epsilon = 1e-15);
        let e = ell(1.0, 1.0, 1.0);
        assert_abs_diff_eq!(e.trace_alpha_raw(&x), -2.0 * x, epsilon = 1e-8);
    }

    #[test]
    fn sphere_retraction_examples() {
        let m = s2();
        let x = m.point(Vector3::z()).unwrap();
        assert_eq!(*m.retract(&x, &Vector3::new(0.0, 0.0, 0.5)).unwrap().coords(), Vector3::z());
        let x = m.point(Vector3::x()).unwrap();
        let r = m.retract(&x, &Vector3::new(0.0, 0.5, 0.0)).unwrap();
        assert_abs_diff_eq!(*r.coords(), Vector3::new(1.0, 0.5, 0.0).normalize(), epsilon = 1e-15);
    }

    #[test]
    fn sphere_retraction_of_unit_tangent_step() {
        let m = s2();
        let x = m.point(Vector3::x()).unwrap();
        let r = m.retract(&x, &Vector3::y()).unwrap();
        assert_abs_diff_eq!(*r.coords(), Vector3::new(1.0, 1.0, 0.0) / 2f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(m.retract(&x, &Vector3::new(0.0, 2.0, 0.0)), Err(Error::StepTooLarge(_))));
        assert!(matches!(m.retract(&x, &-Vector3::x()), Err(Error::StepTooLarge(_))));
    }

    #[test]
    fn ellipsoid_retraction_lands_on_surface() {
        let e = ell(1.0, 1.0, 2.0);
        let x = e.point(Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let r = e.retract(&x, &Vector3::new(0.05, 0.2, 0.1)).unwrap();
        assert!(e.level(r.coords()).abs() <= 1e-10);
    }

    #[test]
    fn gaussian_curvature_oracle() {
        let e = ell(1.0, 1.0, 2.0);
        assert_abs_diff_eq!(e.gaussian_curvature(&Vector3::x()), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(e.gaussian_curvature(&Vector3::new(0.0, 0.0, 2.0)), 4.0, epsilon = 1e-15);
    }

    #[test]
    fn default_constraint_gradient_matches_closed_form() {
        #[derive(Debug)]
        struct Generic(EllipsoidLevel<f64>);
        impl Constraint<f64> for Generic {
            fn value<S: Real>(&self, y: &Vector<S, 3>) -> S {
                self.0.value(y)
            }
        }
        let g = Generic(EllipsoidLevel { semi_axes: [1.0, 2.0, 3.0] });
        let y = Vector3::new(0.3, -1.2, 0.7);
        assert_abs_diff_eq!(g.gradient(&y), g.0.gradient(&y), epsilon = 1e-15);
    }

    #[test]
    fn works_in_single_precision() {
        let m = Sphere::<f32, 3>::new();
        let x = m.point(Vector3::new(0.0f32, 0.6, 0.8)).unwrap();
        let v = m.tangent(&x, Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let a = m.second_fundamental_form(&x, &v, &v).unwrap();
        assert!((a + x.coords()).norm() < 1e-6);
    }
}
