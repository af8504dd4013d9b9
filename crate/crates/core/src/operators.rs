//! First and second order differential operators on vector fields.
//!
//! Every operator is evaluated pointwise. Composite fields (Lie brackets,
//! covariant derivatives, divergences) are themselves fields, so nested
//! operators are built by composition and differentiated with the manifold's
//! derivative mode: dual numbers on spheres, central differences along
//! retracted curves on implicit surfaces.

use crate::dual::{seed, tangent};
use crate::error::{Error, Result};
use crate::fields::{ScalarField, VectorField};
use crate::geometry::{along_curve, Derivative, EmbeddedManifold, Matrix, Vector};
use crate::scalar::Real;
use std::marker::PhantomData;

fn dvec<T, S, M, F, const N: usize>(m: &M, mode: Derivative<T>, f: &F, y: &Vector<S, N>, h: &Vector<S, N>) -> Vector<S, N>
where
    T: Real,
    S: Real,
    M: EmbeddedManifold<T, N>,
    F: VectorField<N>,
{
    match mode {
        Derivative::Exact => tangent(&f.eval(&seed(y, h))),
        Derivative::Central(step) => along_curve(m, y, h, step, |p| f.eval(p)),
    }
}

fn dscalar<T, S, M, F, const N: usize>(m: &M, mode: Derivative<T>, f: &F, y: &Vector<S, N>, h: &Vector<S, N>) -> S
where
    T: Real,
    S: Real,
    M: EmbeddedManifold<T, N>,
    F: ScalarField<N>,
{
    match mode {
        Derivative::Exact => f.eval(&seed(y, h)).eps,
        Derivative::Central(step) => along_curve(m, y, h, step, |p| f.eval(p)),
    }
}

#[inline]
fn column<S: Real, const N: usize>(p: &Matrix<S, N>, i: usize) -> Vector<S, N> {
    p.column(i).into_owned()
}

/// `[V, B] = D_V B − D_B V` as a field.
pub struct Lie<'a, T, M, V, B> {
    m: &'a M,
    mode: Derivative<T>,
    v: V,
    b: B,
}

impl<T: Real, M: EmbeddedManifold<T, N>, V: VectorField<N>, B: VectorField<N>, const N: usize> VectorField<N>
    for Lie<'_, T, M, V, B>
{
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        dvec(self.m, self.mode, &self.b, y, &self.v.eval(y)) - dvec(self.m, self.mode, &self.v, y, &self.b.eval(y))
    }
}

/// `∇_V B = Λ D_V B` as a field.
pub struct Covariant<'a, T, M, V, B> {
    m: &'a M,
    mode: Derivative<T>,
    v: V,
    b: B,
}

impl<T: Real, M: EmbeddedManifold<T, N>, V: VectorField<N>, B: VectorField<N>, const N: usize> VectorField<N>
    for Covariant<'_, T, M, V, B>
{
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        self.m.projector(y) * dvec(self.m, self.mode, &self.b, y, &self.v.eval(y))
    }
}

/// Frame field `A_i(y) = Λ_y e_i`.
pub struct FrameField<'a, T, M> {
    m: &'a M,
    i: usize,
    _t: PhantomData<T>,
}

impl<T: Real, M: EmbeddedManifold<T, N>, const N: usize> VectorField<N> for FrameField<'_, T, M> {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        column(&self.m.projector(y), self.i)
    }
}

/// `div B = Σ_i ⟨D_{A_i} B, A_i⟩` as a scalar field.
pub struct Divergence<'a, T, M, B> {
    m: &'a M,
    mode: Derivative<T>,
    b: B,
}

impl<T: Real, M: EmbeddedManifold<T, N>, B: VectorField<N>, const N: usize> ScalarField<N> for Divergence<'_, T, M, B> {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> S {
        let p = self.m.projector(y);
        (0..N).fold(S::zero(), |acc, i| {
            let a = column(&p, i);
            acc + dvec(self.m, self.mode, &self.b, y, &a).dot(&a)
        })
    }
}

/// Surface gradient `Σ_i (A_i f) A_i` as a field.
pub struct Gradient<'a, T, M, F> {
    m: &'a M,
    mode: Derivative<T>,
    f: F,
}

impl<T: Real, M: EmbeddedManifold<T, N>, F: ScalarField<N>, const N: usize> VectorField<N> for Gradient<'_, T, M, F> {
    fn eval<S: Real>(&self, y: &Vector<S, N>) -> Vector<S, N> {
        let p = self.m.projector(y);
        (0..N).fold(Vector::zeros(), |acc, i| {
            let a = column(&p, i);
            acc + a * dscalar(self.m, self.mode, &self.f, y, &a)
        })
    }
}

/// Symmetric bilinear form on `T_xM`, stored as an ambient matrix annihilating normals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymmetricTwoTensor<T: Real, const N: usize> {
    pub point: Vector<T, N>,
    pub matrix: Matrix<T, N>,
}

impl<T: Real, const N: usize> SymmetricTwoTensor<T, N> {
    pub fn apply(&self, u: &Vector<T, N>, v: &Vector<T, N>) -> T {
        u.dot(&(self.matrix * v))
    }

    pub fn trace(&self) -> T {
        self.matrix.trace()
    }

    /// Squared Hilbert–Schmidt norm.
    pub fn norm_squared(&self) -> T {
        self.matrix.iter().fold(T::zero(), |a, v| a + *v * *v)
    }
}

/// Operator suite bound to one manifold.
#[derive(Clone, Copy, Debug)]
pub struct Operators<'m, T: Real, M, const N: usize> {
    m: &'m M,
    inner: Derivative<T>,
    outer: Derivative<T>,
    _t: PhantomData<T>,
}

impl<'m, T: Real, M: EmbeddedManifold<T, N>, const N: usize> Operators<'m, T, M, N> {
    /// Exact derivatives when the manifold is analytic; otherwise central
    /// differences with the manifold's step inside and ten times that outside.
    pub fn new(m: &'m M) -> Self {
        match m.derivative() {
            Derivative::Exact => Self::with_modes(m, Derivative::Exact, Derivative::Exact),
            Derivative::Central(h) => Self::with_modes(m, Derivative::Central(h), Derivative::Central(h * T::lit(10.0))),
        }
    }

    pub fn with_modes(m: &'m M, inner: Derivative<T>, outer: Derivative<T>) -> Self {
        Self { m, inner, outer, _t: PhantomData }
    }

    pub fn manifold(&self) -> &'m M {
        self.m
    }

    pub fn frame(&self, i: usize) -> FrameField<'m, T, M> {
        FrameField { m: self.m, i, _t: PhantomData }
    }

    /// `[V, B]` as a field, differentiated with the inner mode.
    pub fn bracket<V: VectorField<N>, B: VectorField<N>>(&self, v: V, b: B) -> Lie<'m, T, M, V, B> {
        Lie { m: self.m, mode: self.inner, v, b }
    }

    /// `∇_V B` as a field, differentiated with the inner mode.
    pub fn covariant<V: VectorField<N>, B: VectorField<N>>(&self, v: V, b: B) -> Covariant<'m, T, M, V, B> {
        Covariant { m: self.m, mode: self.inner, v, b }
    }

    pub fn divergence_field<B: VectorField<N>>(&self, b: B) -> Divergence<'m, T, M, B> {
        Divergence { m: self.m, mode: self.inner, b }
    }

    fn frame_at(&self, x: &Vector<T, N>) -> [Vector<T, N>; N] {
        let p = self.m.projector(x);
        std::array::from_fn(|i| column(&p, i))
    }

    /// `∇_v B` at `x` for tangent `v`.
    pub fn covariant_derivative<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>, v: &Vector<T, N>) -> Vector<T, N> {
        self.m.projector(x) * dvec(self.m, self.inner, b, x, v)
    }

    /// `𝓛_V B = ∇_V B − ∇_B V`.
    pub fn lie_derivative<V: VectorField<N>, B: VectorField<N>>(&self, v: &V, b: &B, x: &Vector<T, N>) -> Vector<T, N> {
        self.bracket(v, b).eval(x)
    }

    pub fn divergence<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> T {
        self.divergence_field(b).eval(x)
    }

    /// `div(Λ ξ) = ⟨Trace α, ξ⟩`.
    pub fn divergence_of_projected(&self, xi: &Vector<T, N>, x: &Vector<T, N>) -> T {
        self.m.trace_alpha_raw(x).dot(xi)
    }

    /// Ambient matrix of `v ↦ ∇_v B`, annihilating normals.
    pub fn nabla<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Matrix<T, N> {
        let p = self.m.projector(x);
        let d = Matrix::<T, N>::from_columns(&self.frame_at(x).map(|a| dvec(self.m, self.inner, b, x, &a)));
        p * d * p
    }

    /// `Def B (X, Y) = ½(⟨∇_X B, Y⟩ + ⟨∇_Y B, X⟩)`.
    pub fn deformation_tensor<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> SymmetricTwoTensor<T, N> {
        let g = self.nabla(b, x);
        SymmetricTwoTensor { point: *x, matrix: (g + g.transpose()) * T::lit(0.5) }
    }

    /// `T₁ B = Σ_i div(A_i) 𝓛_{A_i} B`.
    pub fn tensor_t1<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Vector<T, N> {
        (0..N).fold(Vector::zeros(), |acc, i| {
            let a = self.frame(i);
            acc + self.lie_derivative(&a, b, x) * self.divergence(&a, x)
        })
    }

    /// `T₁ B = −𝒜(B, Trace α)`.
    pub fn tensor_t1_embedding<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Vector<T, N> {
        -self.m.shape_raw(x, &b.eval(x), &self.m.trace_alpha_raw(x))
    }

    /// `ψ(u, w) = Σ_i ⟨α(u, A_i), α(w, A_i)⟩` for tangent vectors at `x`.
    pub fn psi(&self, x: &Vector<T, N>, u: &Vector<T, N>, w: &Vector<T, N>) -> T {
        self.frame_at(x)
            .iter()
            .fold(T::zero(), |acc, a| acc + self.m.alpha_raw(x, u, a).dot(&self.m.alpha_raw(x, w, a)))
    }

    /// `⟨T₂ B, W⟩ = ψ(B, W)`.
    pub fn tensor_t2<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Vector<T, N> {
        let bx = b.eval(x);
        self.m
            .tangent_basis(x)
            .iter()
            .fold(Vector::zeros(), |acc, e| acc + e * self.psi(x, &bx, e))
    }

    /// `Ric = −T₁ − T₂`.
    pub fn ricci<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Vector<T, N> {
        -self.tensor_t1(b, x) - self.tensor_t2(b, x)
    }

    /// Ricci contraction of the Gauss equation:
    /// `⟨Ric B, W⟩ = ⟨Trace α, α(B, W)⟩ − Σ_i ⟨α(B, A_i), α(A_i, W)⟩`.
    pub fn ricci_gauss<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Vector<T, N> {
        let bx = b.eval(x);
        let tr = self.m.trace_alpha_raw(x);
        self.m.tangent_basis(x).iter().fold(Vector::zeros(), |acc, e| {
            acc + e * (tr.dot(&self.m.alpha_raw(x, &bx, e)) - self.psi(x, &bx, e))
        })
    }

    /// `Δ̂ B = Σ_i 𝓛_{A_i}² B`.
    pub fn frame_laplacian<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Vector<T, N> {
        (0..N).fold(Vector::zeros(), |acc, i| {
            let inner = self.bracket(self.frame(i), b);
            let outer = Lie { m: self.m, mode: self.outer, v: self.frame(i), b: inner };
            acc + outer.eval(x)
        })
    }

    /// `Δ B = Σ_i ∇_{A_i} ∇_{A_i} B`.
    pub fn bochner_laplacian<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Vector<T, N> {
        (0..N).fold(Vector::zeros(), |acc, i| {
            let inner = self.covariant(self.frame(i), b);
            let outer = Covariant { m: self.m, mode: self.outer, v: self.frame(i), b: inner };
            acc + outer.eval(x)
        })
    }

    /// `□ B = −Δ̂ B − 2 T₁ B`.
    pub fn hodge_laplacian<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Vector<T, N> {
        -self.frame_laplacian(b, x) - self.tensor_t1(b, x) * T::lit(2.0)
    }

    /// `□ B = −Δ B + Ric B`.
    pub fn hodge_laplacian_weitzenbock<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Vector<T, N> {
        self.ricci(b, x) - self.bochner_laplacian(b, x)
    }

    /// `∇ div B`.
    pub fn gradient_of_divergence<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Vector<T, N> {
        Gradient { m: self.m, mode: self.outer, f: self.divergence_field(b) }.eval(x)
    }

    /// `□̂ B = −Δ B − Ric B − ∇ div B`.
    pub fn ebin_marsden_laplacian<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Vector<T, N> {
        -self.bochner_laplacian(b, x) - self.ricci(b, x) - self.gradient_of_divergence(b, x)
    }

    /// `□̂ B = −Δ̂ B + 2 T₂ B`, valid only where `div B = 0`.
    pub fn ebin_marsden_divfree<B: VectorField<N>>(&self, b: &B, x: &Vector<T, N>) -> Result<Vector<T, N>> {
        let d = self.divergence(b, x);
        if !(d.abs() <= T::lit(1e-6)) {
            return Err(Error::Precondition(format!("field has divergence {d} at the evaluation point")));
        }
        Ok(self.tensor_t2(b, x) * T::lit(2.0) - self.frame_laplacian(b, x))
    }
}
