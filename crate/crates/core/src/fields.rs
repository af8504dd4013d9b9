//! Vector and scalar fields given by ambient formulas.
//!
//! A field is evaluated at any ambient point; on the manifold its value is the
//! field itself, off the manifold it is a smooth extension. Evaluation is
//! generic over the scalar so derivatives can be taken with dual numbers.

use crate::dual::seed;
use crate::geometry::{EmbeddedManifold, Matrix, Vector};
use crate::scalar::Real;
use rand::Rng;
use rand_distr::StandardNormal;
use std::marker::PhantomData;

pub trait VectorField<const N: usize>: Send + Sync {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N>;
}

pub trait ScalarField<const N: usize>: Send + Sync {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> S;
}

impl<F: VectorField<N> + ?Sized, const N: usize> VectorField<N> for &F {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        (**self).eval(y)
    }
}

impl<F: ScalarField<N> + ?Sized, const N: usize> ScalarField<N> for &F {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> S {
        (**self).eval(y)
    }
}

/// Ambient gradient of a scalar field by forward mode.
pub fn ambient_gradient<F: ScalarField<N>, S: Real, const N: usize>(f: &F, y: &Vector<S, N>) -> Vector<S, N> {
    Vector::from_fn(|j, _| {
        let e = Vector::<S, N>::from_fn(|i, _| if i == j { S::one() } else { S::zero() });
        f.eval(&seed(y, &e)).eps
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroField;

impl<const N: usize> VectorField<N> for ZeroField {
    fn eval<S: Real>(&self, _y: &Vector<S, N>) -> Vector<S, N> {
        Vector::zeros()
    }
}

/// `y ↦ Λ_y ξ`. With `ξ = e_i` this is the frame field `A_i`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedConstant<'m, T: Real, M, const N: usize> {
    pub manifold: &'m M,
    pub xi: Vector<T, N>,
}

impl<'m, T: Real, M: EmbeddedManifold<T, N>, const N: usize> ProjectedConstant<'m, T, M, N> {
    pub fn new(manifold: &'m M, xi: Vector<T, N>) -> Self {
        Self { manifold, xi }
    }

    pub fn frame(manifold: &'m M, i: usize) -> Self {
        Self { manifold, xi: Vector::from_fn(|k, _| if k == i { T::one() } else { T::zero() }) }
    }
}

impl<T: Real, M: EmbeddedManifold<T, N>, const N: usize> VectorField<N> for ProjectedConstant<'_, T, M, N> {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        self.manifold.projector(y) * self.xi.map(S::cast)
    }
}

/// Linear field `y ↦ Ω y` with `Ω` antisymmetric: a Killing field of every
/// round sphere centred at the origin.
#[derive(Clone, Copy, Debug)]
pub struct Killing<T: Real, const N: usize> {
    pub omega: Matrix<T, N>,
}

impl<T: Real, const N: usize> Killing<T, N> {
    /// Antisymmetric part of `m` (times two).
    pub fn from_matrix(m: Matrix<T, N>) -> Self {
        Self { omega: m - m.transpose() }
    }

    /// Rotation generator in the `(i, j)` plane.
    pub fn plane(i: usize, j: usize) -> Self {
        let mut omega = Matrix::zeros();
        omega[(j, i)] = T::one();
        omega[(i, j)] = -T::one();
        Self { omega }
    }
}

impl<T: Real> Killing<T, 3> {
    /// `y ↦ axis × y`.
    pub fn rotation(axis: Vector<T, 3>) -> Self {
        let (a, b, c) = (axis[0], axis[1], axis[2]);
        let z = T::zero();
        Self { omega: Matrix::<T, 3>::new(z, -c, b, c, z, -a, -b, a, z) }
    }
}

impl<T: Real, const N: usize> VectorField<N> for Killing<T, N> {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        self.omega.map(S::cast) * y
    }
}

/// Dense multivariate polynomial of bounded total degree.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial<T, const N: usize> {
    terms: Vec<([u8; N], T)>,
}

impl<T: Real, const N: usize> Polynomial<T, N> {
    pub fn new(terms: Vec<([u8; N], T)>) -> Self {
        Self { terms }
    }

    /// Coordinate function `y_i`.
    pub fn coordinate(i: usize) -> Self {
        let mut e = [0u8; N];
        e[i] = 1;
        Self { terms: vec![(e, T::one())] }
    }

    /// Gaussian coefficients on every monomial of degree at most `degree`.
    pub fn random<R: Rng + ?Sized>(degree: u8, rng: &mut R) -> Self {
        let terms = monomials::<N>(degree)
            .into_iter()
            .map(|e| {
                let c: f64 = rng.sample(StandardNormal);
                (e, T::lit(c))
            })
            .collect();
        Self { terms }
    }
}

fn monomials<const N: usize>(degree: u8) -> Vec<[u8; N]> {
    let mut out = vec![[0u8; N]];
    for k in 0..N {
        let mut next = Vec::new();
        for e in &out {
            let used: u8 = e.iter().sum();
            for p in 0..=(degree - used) {
                let mut f = *e;
                f[k] = p;
                next.push(f);
            }
        }
        out = next;
    }
    out
}

impl<T: Real, const N: usize> ScalarField<N> for Polynomial<T, N> {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> S {
        self.terms.iter().fold(S::zero(), |acc, (e, c)| {
            let mut m = S::cast(*c);
            for k in 0..N {
                m *= y[k].powi(e[k] as i32);
            }
            acc + m
        })
    }
}

/// `y ↦ Λ_y P(y)` for a polynomial map `P: ℝ^N → ℝ^N`.
#[derive(Clone, Debug)]
pub struct ProjectedPolynomial<'m, T: Real, M, const N: usize> {
    pub manifold: &'m M,
    pub components: Vec<Polynomial<T, N>>,
}

impl<'m, T: Real, M: EmbeddedManifold<T, N>, const N: usize> ProjectedPolynomial<'m, T, M, N> {
    pub fn random<R: Rng + ?Sized>(manifold: &'m M, degree: u8, rng: &mut R) -> Self {
        Self { manifold, components: (0..N).map(|_| Polynomial::random(degree, rng)).collect() }
    }
}

impl<T: Real, M: EmbeddedManifold<T, N>, const N: usize> VectorField<N> for ProjectedPolynomial<'_, T, M, N> {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        let p = Vector::<S, N>::from_fn(|i, _| self.components[i].eval(y));
        self.manifold.projector(y) * p
    }
}

/// Surface gradient `Λ_y ∇̄f(y)`.
#[derive(Clone, Debug)]
pub struct GradientField<'m, T, M, F, const N: usize> {
    pub manifold: &'m M,
    pub potential: F,
    _t: PhantomData<T>,
}

impl<'m, T: Real, M: EmbeddedManifold<T, N>, F: ScalarField<N>, const N: usize> GradientField<'m, T, M, F, N> {
    pub fn new(manifold: &'m M, potential: F) -> Self {
        Self { manifold, potential, _t: PhantomData }
    }
}

impl<T: Real, M: EmbeddedManifold<T, N>, F: ScalarField<N>, const N: usize> VectorField<N>
    for GradientField<'_, T, M, F, N>
{
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        self.manifold.projector(y) * ambient_gradient(&self.potential, y)
    }
}

/// `n(y) × ∇̄f(y)` on a surface in ℝ³; divergence free.
#[derive(Clone, Debug)]
pub struct RotatedGradient<'m, T, M, F> {
    pub manifold: &'m M,
    pub stream: F,
    _t: PhantomData<T>,
}

impl<'m, T: Real, M: EmbeddedManifold<T, 3>, F: ScalarField<3>> RotatedGradient<'m, T, M, F> {
    pub fn new(manifold: &'m M, stream: F) -> Self {
        Self { manifold, stream, _t: PhantomData }
    }
}

impl<T: Real, M: EmbeddedManifold<T, 3>, F: ScalarField<3>> VectorField<3> for RotatedGradient<'_, T, M, F> {
    fn eval<S: Real>(&self, y: &Vector<S, 3>) -> Vector<S, 3> {
        let n = self.manifold.normal(y);
        let n = n / crate::geometry::norm(&n);
        n.cross(&ambient_gradient(&self.stream, y))
    }
}

/// Pointwise product `f B`.
#[derive(Clone, Debug)]
pub struct Scaled<F, B> {
    pub factor: F,
    pub field: B,
}

impl<F: ScalarField<N>, B: VectorField<N>, const N: usize> VectorField<N> for Scaled<F, B> {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        self.field.eval(y) * self.factor.eval(y)
    }
}

/// `a A + b B`.
#[derive(Clone, Debug)]
pub struct Combination<T, A, B> {
    pub a: T,
    pub first: A,
    pub b: T,
    pub second: B,
}

impl<T: Real, A: VectorField<N>, B: VectorField<N>, const N: usize> VectorField<N> for Combination<T, A, B> {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        self.first.eval(y) * S::cast(self.a) + self.second.eval(y) * S::cast(self.b)
    }
}

/// Samples a point uniformly on the unit sphere of `ℝ^N`.
pub fn random_unit<T: Real, R: Rng + ?Sized, const N: usize>(rng: &mut R) -> Vector<T, N> {
    loop {
        let v = Vector::<f64, N>::from_fn(|_, _| rng.sample(StandardNormal));
        let r = v.norm();
        if r > 1e-3 {
            return (v / r).map(T::lit);
        }
    }
}
