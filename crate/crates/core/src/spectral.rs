//! Real spherical harmonics on S², the divergence-free vector basis
//! `C_lm = x × ∇Y_lm / √(l(l+1))`, grid transforms, the Leray projection and a
//! Galerkin reference solver for Navier–Stokes with Hodge dissipation.
//!
//! Coefficients are indexed by `l² + l + m`; `m > 0` is the cosine part and
//! `m < 0` the sine part of order `|m|`.

use crate::error::{Error, Result};
use crate::fields::VectorField;
use crate::geometry::{Matrix, Vector};
use crate::scalar::Real;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use std::sync::Arc;

#[inline]
pub fn n_coeffs(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

#[inline]
pub fn index(l: usize, m: i64) -> usize {
    debug_assert!(m.unsigned_abs() as usize <= l);
    ((l * l + l) as i64 + m) as usize
}

#[inline]
pub fn degree_order(idx: usize) -> (usize, i64) {
    let l = (idx as f64).sqrt() as usize;
    let l = if (l + 1) * (l + 1) <= idx { l + 1 } else { l };
    (l, idx as i64 - (l * l + l) as i64)
}

#[inline]
fn tri(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

/// Recurrence constants for orthonormal associated Legendre functions with the
/// `sin^m θ` factor removed, so every entry is a polynomial in `z = cos θ`.
#[derive(Clone, Debug)]
pub struct Legendre<T> {
    l_max: usize,
    diag: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    /// `1/√(l(l+1))`, zero at `l = 0`.
    curl_norm: Vec<T>,
}

impl<T: Real> Legendre<T> {
    pub fn new(l_max: usize) -> Self {
        let mut diag = vec![T::zero(); l_max + 1];
        let mut a = vec![T::zero(); tri(l_max, l_max) + 1];
        let mut b = vec![T::zero(); tri(l_max, l_max) + 1];
        let mut c = 1.0 / (4.0 * std::f64::consts::PI).sqrt();
        for m in 0..=l_max {
            if m > 0 {
                c *= ((2 * m + 1) as f64 / (2 * m) as f64).sqrt();
            }
            diag[m] = T::lit(c);
            for l in (m + 1)..=l_max {
                let (lf, mf) = (l as f64, m as f64);
                if l == m + 1 {
                    a[tri(l, m)] = T::lit((2.0 * mf + 3.0).sqrt());
                } else {
                    a[tri(l, m)] = T::lit(((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt());
                    let l1 = lf - 1.0;
                    b[tri(l, m)] = T::lit(((l1 * l1 - mf * mf) / (4.0 * l1 * l1 - 1.0)).sqrt());
                }
            }
        }
        let curl_norm = (0..=l_max).map(|l| if l == 0 { T::zero() } else { T::lit(1.0 / ((l * (l + 1)) as f64).sqrt()) }).collect();
        Self { l_max, diag, a, b, curl_norm }
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// Values and first two `z`-derivatives of every `p̄_lm`, indexed by
    /// `l(l+1)/2 + m`.
    pub fn jets<S: Real>(&self, z: S) -> Vec<[S; 3]> {
        self.derivatives::<S, 3>(z)
    }

    /// Values and the first `D − 1` derivatives. Degrees run in the outer
    /// loop so the per-order recurrences interleave.
    pub fn derivatives<S: Real, const D: usize>(&self, z: S) -> Vec<[S; D]> {
        let l_max = self.l_max;
        let mut out = vec![[S::zero(); D]; tri(l_max, l_max) + 1];
        for l in 0..=l_max {
            let row = tri(l, 0);
            out[row + l][0] = S::cast(self.diag[l]);
            if l == 0 {
                continue;
            }
            let prev = tri(l - 1, 0);
            let m_top = l - 1;
            let a = S::cast(self.a[row + m_top]);
            let p = out[prev + m_top];
            let mut e = [S::zero(); D];
            e[0] = a * z * p[0];
            if D > 1 {
                e[1] = a * p[0];
            }
            out[row + m_top] = e;
            if l < 2 {
                continue;
            }
            let prev2 = tri(l - 2, 0);
            for m in 0..(l - 1) {
                let a = S::cast(self.a[row + m]);
                let b = S::cast(self.b[row + m]);
                let p1 = out[prev + m];
                let p2 = out[prev2 + m];
                let mut e = [S::zero(); D];
                e[0] = a * (z * p1[0] - b * p2[0]);
                for d in 1..D {
                    let k = S::lit(d as f64);
                    e[d] = a * (k * p1[d - 1] + z * p1[d] - b * p2[d]);
                }
                out[row + m] = e;
            }
        }
        out
    }

    /// Runs the degree recurrence for one order `m`, calling `visit(l, jet)`
    /// for `l = m..=l_max` with the value and first `D − 1` derivatives.
    #[inline(always)]
    fn for_order<S: Real, const D: usize>(&self, m: usize, z: S, mut visit: impl FnMut(usize, &[S; D])) {
        let mut p1 = [S::zero(); D];
        p1[0] = S::cast(self.diag[m]);
        visit(m, &p1);
        if m == self.l_max {
            return;
        }
        let a = S::cast(self.a[tri(m + 1, m)]);
        let mut e = [S::zero(); D];
        e[0] = a * z * p1[0];
        if D > 1 {
            e[1] = a * p1[0];
        }
        let mut p2 = std::mem::replace(&mut p1, e);
        visit(m + 1, &p1);
        for l in (m + 2)..=self.l_max {
            let t = tri(l, m);
            let a = S::cast(self.a[t]);
            let b = S::cast(self.b[t]);
            let mut e = [S::zero(); D];
            e[0] = a * (z * p1[0] - b * p2[0]);
            for d in 1..D {
                e[d] = a * (S::lit(d as f64) * p1[d - 1] + z * p1[d] - b * p2[d]);
            }
            p2 = std::mem::replace(&mut p1, e);
            visit(l, &p1);
        }
    }
}

/// Powers `(x + i y)^k` for `k = 0..=n` as `(re, im)` pairs.
fn complex_powers<S: Real>(x: S, y: S, n: usize) -> Vec<(S, S)> {
    let mut w = Vec::with_capacity(n + 1);
    w.push((S::one(), S::zero()));
    for k in 1..=n {
        let (r, i) = w[k - 1];
        w.push((r * x - i * y, r * y + i * x));
    }
    w
}

/// Coefficients regrouped by order: entry `tri(l, m)` holds `√2 (k^c, −k^s)`
/// (`(k, 0)` for `m = 0`).
fn pack<T: Real, S: Real>(l_max: usize, coeffs: &[T]) -> Vec<(S, S)> {
    let sqrt2 = S::SQRT_2();
    let mut out = vec![(S::zero(), S::zero()); tri(l_max, l_max) + 1];
    for l in 0..=l_max {
        out[tri(l, 0)] = (S::cast(coeffs[index(l, 0)]), S::zero());
        for m in 1..=l {
            out[tri(l, m)] = (S::cast(coeffs[index(l, m as i64)]) * sqrt2, -S::cast(coeffs[index(l, -(m as i64))]) * sqrt2);
        }
    }
    out
}

/// Value, ambient gradient and Hessian of `ψ(y) = Σ k_lm Y_lm(y)` using the
/// polynomial extension `Y_lm(y) = √2 p̄_lm(y₃) Re/Im (y₁ + i y₂)^m`.
pub fn scalar_jet<T: Real, S: Real>(leg: &Legendre<T>, coeffs: &[T], y: &Vector3<S>) -> (S, Vector3<S>, Matrix3<S>) {
    packed_jet(leg, &pack(leg.l_max, coeffs), y)
}

fn packed_jet<T: Real, S: Real>(leg: &Legendre<T>, packed: &[(S, S)], y: &Vector3<S>) -> (S, Vector3<S>, Matrix3<S>) {
    let l_max = leg.l_max;
    let w = complex_powers(y[0], y[1], l_max);
    let mut val = S::zero();
    let mut g = Vector3::<S>::zeros();
    let mut h = Matrix3::<S>::zeros();
    for m in 0..=l_max {
        // F_m(z) = Σ_l (k^c − i k^s) p̄_lm, so ψ = Σ_m Re(F_m w^m).
        let mut f = [(S::zero(), S::zero()); 3];
        leg.for_order::<S, 3>(m, y[2], |l, pj| {
            let (kc, ks) = packed[tri(l, m)];
            for d in 0..3 {
                f[d].0 += kc * pj[d];
                f[d].1 += ks * pj[d];
            }
        });
        let re = |a: (S, S), b: (S, S)| a.0 * b.0 - a.1 * b.1;
        let im = |a: (S, S), b: (S, S)| a.0 * b.1 + a.1 * b.0;
        let mf = S::lit(m as f64);
        val += re(f[0], w[m]);
        g[2] += re(f[1], w[m]);
        h[(2, 2)] += re(f[2], w[m]);
        if m >= 1 {
            let q = w[m - 1];
            // ∂x → m w^{m−1}, ∂y → i m w^{m−1}
            g[0] += mf * re(f[0], q);
            g[1] -= mf * im(f[0], q);
            let xz = mf * re(f[1], q);
            let yz = -mf * im(f[1], q);
            h[(0, 2)] += xz;
            h[(2, 0)] += xz;
            h[(1, 2)] += yz;
            h[(2, 1)] += yz;
        }
        if m >= 2 {
            let q = w[m - 2];
            let c = mf * (mf - S::one());
            let xx = c * re(f[0], q);
            let xy = -c * im(f[0], q);
            h[(0, 0)] += xx;
            h[(1, 1)] -= xx;
            h[(0, 1)] += xy;
            h[(1, 0)] += xy;
        }
    }
    (val, g, h)
}

/// Value and ambient gradient of every basis harmonic at `y`, by full index.
pub fn basis_jets<T: Real, S: Real>(leg: &Legendre<T>, y: &Vector3<S>) -> Vec<(S, Vector3<S>)> {
    let l_max = leg.l_max;
    let p = leg.jets(y[2]);
    let w = complex_powers(y[0], y[1], l_max);
    let sqrt2 = S::SQRT_2();
    let mut out = vec![(S::zero(), Vector3::zeros()); n_coeffs(l_max)];
    for l in 0..=l_max {
        for m in 0..=l {
            let pj = p[tri(l, m)];
            if m == 0 {
                out[index(l, 0)] = (pj[0], Vector3::new(S::zero(), S::zero(), pj[1]));
                continue;
            }
            let mf = S::lit(m as f64);
            let (wr, wi) = w[m];
            let (qr, qi) = w[m - 1];
            let c = (
                sqrt2 * pj[0] * wr,
                Vector3::new(sqrt2 * pj[0] * mf * qr, -sqrt2 * pj[0] * mf * qi, sqrt2 * pj[1] * wr),
            );
            let s = (
                sqrt2 * pj[0] * wi,
                Vector3::new(sqrt2 * pj[0] * mf * qi, sqrt2 * pj[0] * mf * qr, sqrt2 * pj[1] * wi),
            );
            out[index(l, m as i64)] = c;
            out[index(l, -(m as i64))] = s;
        }
    }
    out
}

/// `⟨g, C_lm(y)⟩` for every index, written into `out` (entry `l = 0` is zero).
pub fn curl_components<T: Real>(leg: &Legendre<T>, y: &Vector3<T>, g: &Vector3<T>, out: &mut [T]) {
    let l_max = leg.l_max;
    let w = complex_powers(y[0], y[1], l_max);
    let sqrt2 = T::SQRT_2();
    // ⟨g, y × ∇Y⟩ = ⟨∇Y, g × y⟩
    let c = g.cross(y);
    out[0] = T::zero();
    leg.for_order::<T, 2>(0, y[2], |l, pj| {
        if l > 0 {
            out[index(l, 0)] = pj[1] * c[2] * leg.curl_norm[l];
        }
    });
    for m in 1..=l_max {
        let mf = T::lit(m as f64);
        let (wr, wi) = w[m];
        let (qr, qi) = w[m - 1];
        let (ax, ay) = (qr * c[0] - qi * c[1], qi * c[0] + qr * c[1]);
        leg.for_order::<T, 2>(m, y[2], |l, pj| {
            let inv = leg.curl_norm[l];
            let s0 = sqrt2 * pj[0] * mf * inv;
            let s1 = sqrt2 * pj[1] * inv;
            out[index(l, m as i64)] = s0 * ax + s1 * wr * c[2];
            out[index(l, -(m as i64))] = s0 * ay + s1 * wi * c[2];
        });
    }
}

/// Gauss–Legendre nodes and weights on `[−1, 1]` by Newton iteration.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Coefficients over the curl basis `C_lm` and optionally the gradient basis
/// `G_lm = ∇Y_lm / √(l(l+1))`. Entries with `l = 0` are always zero.
#[derive(Clone, Debug)]
pub struct SpectralField<T> {
    l_max: usize,
    pub curl: Vec<T>,
    pub grad: Option<Vec<T>>,
    leg: Arc<Legendre<T>>,
}

impl<T: Real> PartialEq for SpectralField<T> {
    fn eq(&self, other: &Self) -> bool {
        self.l_max == other.l_max && self.curl == other.curl && self.grad == other.grad
    }
}

#[inline]
fn eigen_scale<T: Real>(l: usize) -> T {
    T::lit(((l * (l + 1)) as f64).sqrt())
}

impl<T: Real> SpectralField<T> {
    pub fn zeros(l_max: usize) -> Self {
        Self { l_max, curl: vec![T::zero(); n_coeffs(l_max)], grad: None, leg: Arc::new(Legendre::new(l_max)) }
    }

    pub fn from_curl(l_max: usize, curl: Vec<T>) -> Result<Self> {
        if curl.len() != n_coeffs(l_max) {
            return Err(Error::Config(format!("expected {} coefficients, got {}", n_coeffs(l_max), curl.len())));
        }
        let mut f = Self::zeros(l_max);
        f.curl = curl;
        f.curl[0] = T::zero();
        Ok(f)
    }

    /// Unit-coefficient curl mode `C_lm`.
    pub fn mode(l_max: usize, l: usize, m: i64) -> Self {
        let mut f = Self::zeros(l_max);
        f.curl[index(l, m)] = T::one();
        f
    }

    /// Unit-coefficient gradient mode `G_lm`.
    pub fn gradient_mode(l_max: usize, l: usize, m: i64) -> Self {
        let mut f = Self::zeros(l_max);
        let mut g = vec![T::zero(); n_coeffs(l_max)];
        g[index(l, m)] = T::one();
        f.grad = Some(g);
        f
    }

    /// `ω e₃ × x`.
    pub fn rotation(l_max: usize, omega: T) -> Self {
        // e₃ × x = −x × ∇(z) and z = √(4π/3) Y_10, C_10 = x × ∇Y_10 / √2.
        let mut f = Self::zeros(l_max);
        f.curl[index(1, 0)] = -omega * T::lit((8.0 * std::f64::consts::PI / 3.0).sqrt());
        f
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn legendre(&self) -> &Arc<Legendre<T>> {
        &self.leg
    }

    pub fn is_divergence_free(&self) -> bool {
        self.grad.as_ref().map_or(true, |g| g.iter().all(|c| c.is_zero()))
    }

    /// Stream-function coefficients `c_lm / √(l(l+1))`.
    fn stream(&self) -> Vec<T> {
        scaled_by_eigen(&self.curl)
    }

    fn potential(&self) -> Option<Vec<T>> {
        self.grad.as_ref().map(|g| scaled_by_eigen(g))
    }

    /// `½ Σ c²` (the kinetic energy `½∫|u|²`).
    pub fn energy(&self) -> T {
        let g = self.grad.as_ref().map_or(T::zero(), |g| dot(g, g));
        (dot(&self.curl, &self.curl) + g) * T::lit(0.5)
    }

    /// `Σ l(l+1) c²`.
    pub fn enstrophy(&self) -> T {
        self.curl.iter().enumerate().fold(T::zero(), |acc, (i, c)| {
            let (l, _) = degree_order(i);
            acc + T::lit((l * (l + 1)) as f64) * *c * *c
        })
    }

    pub fn l2_norm(&self) -> T {
        (self.energy() * T::lit(2.0)).sqrt()
    }

    /// `L²` distance, assuming equal truncation.
    pub fn distance(&self, other: &Self) -> T {
        let mut d = self.clone();
        d.axpy(-T::one(), other);
        d.l2_norm()
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: T, other: &Self) {
        for (s, o) in self.curl.iter_mut().zip(&other.curl) {
            *s += a * *o;
        }
        if let Some(og) = &other.grad {
            let g = self.grad.get_or_insert_with(|| vec![T::zero(); og.len()]);
            for (s, o) in g.iter_mut().zip(og) {
                *s += a * *o;
            }
        }
    }

    pub fn scale(&mut self, a: T) {
        self.curl.iter_mut().for_each(|c| *c *= a);
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|c| *c *= a);
        }
    }

    /// Field value and ambient Jacobian `Du` at a point of S² (curl part only).
    pub fn value_and_jacobian(&self, y: &Vector3<T>) -> (Vector3<T>, Matrix3<T>) {
        self.stream_function().value_and_jacobian(y)
    }

    /// Precomputed stream function of the curl part, for repeated evaluation.
    pub fn stream_function(&self) -> StreamFunction<T> {
        StreamFunction { leg: self.leg.clone(), packed: pack(self.l_max, &self.stream()) }
    }

    /// Complex view: `a_lm` for the requested family, conjugate symmetric in `m`.
    pub fn complex_coefficient(coeffs: &[T], l: usize, m: i64) -> (T, T) {
        let mu = m.unsigned_abs() as usize;
        if mu == 0 {
            return (coeffs[index(l, 0)], T::zero());
        }
        let s = T::FRAC_1_SQRT_2();
        let (re, im) = (coeffs[index(l, mu as i64)] * s, -coeffs[index(l, -(mu as i64))] * s);
        if m > 0 {
            (re, im)
        } else {
            let sign = if mu % 2 == 0 { T::one() } else { -T::one() };
            (sign * re, -sign * im)
        }
    }

    /// Inverse of [`complex_coefficient`](Self::complex_coefficient) for `m ≥ 0`.
    fn set_from_complex(coeffs: &mut [T], l: usize, m: i64, re: T, im: T) {
        if m == 0 {
            coeffs[index(l, 0)] = re;
        } else if m > 0 {
            coeffs[index(l, m)] = re * T::SQRT_2();
            coeffs[index(l, -m)] = -im * T::SQRT_2();
        }
    }

    /// CSV rows `family,l,m,re,im`, preceded by a `# run_id:` line.
    pub fn to_csv(&self, run_id: &str) -> String {
        let mut out = format!("# run_id: {run_id}\nfamily,l,m,re,im\n");
        let mut families = vec![("curl", &self.curl)];
        if let Some(g) = &self.grad {
            families.push(("grad", g));
        }
        for (name, c) in families {
            for l in 1..=self.l_max {
                for m in -(l as i64)..=(l as i64) {
                    let (re, im) = Self::complex_coefficient(c, l, m);
                    out.push_str(&format!("{name},{l},{m},{:e},{:e}\n", re.to_f64_lossy(), im.to_f64_lossy()));
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Config(format!("malformed spectral CSV row: {line}"));
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("family") {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            let l: usize = f[1].parse().map_err(|_| bad(line))?;
            let m: i64 = f[2].parse().map_err(|_| bad(line))?;
            let re: f64 = f[3].parse().map_err(|_| bad(line))?;
            let im: f64 = f[4].parse().map_err(|_| bad(line))?;
            if l == 0 || m.unsigned_abs() as usize > l || !(f[0] == "curl" || f[0] == "grad") {
                return Err(bad(line));
            }
            rows.push((f[0] == "grad", l, m, re, im));
        }
        let l_max = rows.iter().map(|r| r.1).max().ok_or_else(|| Error::Config("empty spectral CSV".into()))?;
        let mut field = Self::zeros(l_max);
        let mut grad = vec![T::zero(); n_coeffs(l_max)];
        let mut has_grad = false;
        for (is_grad, l, m, re, im) in rows {
            let target = if is_grad {
                has_grad = true;
                &mut grad
            } else {
                &mut field.curl
            };
            Self::set_from_complex(target, l, m, T::lit(re), T::lit(im));
        }
        if has_grad {
            field.grad = Some(grad);
        }
        Ok(field)
    }
}

/// Matrix of `h ↦ v × h`.
pub fn skew<S: Real>(v: &Vector3<S>) -> Matrix3<S> {
    let z = S::zero();
    Matrix3::new(z, -v[2], v[1], v[2], z, -v[0], -v[1], v[0], z)
}

/// `ψ` with `u = x × ∇ψ`; evaluates the velocity and its ambient Jacobian.
#[derive(Clone, Debug)]
pub struct StreamFunction<T> {
    leg: Arc<Legendre<T>>,
    packed: Vec<(T, T)>,
}

impl<T: Real> StreamFunction<T> {
    pub fn velocity(&self, y: &Vector3<T>) -> Vector3<T> {
        let (_, g, _) = packed_jet(&self.leg, &self.packed, y);
        y.cross(&g)
    }

    pub fn value_and_jacobian(&self, y: &Vector3<T>) -> (Vector3<T>, Matrix3<T>) {
        let (_, g, h) = packed_jet(&self.leg, &self.packed, y);
        // D(y × ∇ψ) h = h × ∇ψ + y × (Hψ h)
        (y.cross(&g), skew(y) * h - skew(&g))
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

fn scaled_by_eigen<T: Real>(c: &[T]) -> Vec<T> {
    c.iter()
        .enumerate()
        .map(|(i, v)| {
            let (l, _) = degree_order(i);
            if l == 0 {
                T::zero()
            } else {
                *v / eigen_scale::<T>(l)
            }
        })
        .collect()
}

impl<T: Real> VectorField<3> for SpectralField<T> {
    fn eval<S: Real>(&self, y: &Vector<S, 3>) -> Vector<S, 3> {
        let (_, g, _) = scalar_jet(&self.leg, &self.stream(), y);
        let mut u = y.cross(&g);
        if let Some(phi) = self.potential() {
            let (_, gp, _) = scalar_jet(&self.leg, &phi, y);
            let proj = Matrix::<S, 3>::identity() - y * y.transpose();
            u += proj * gp;
        }
        u
    }
}

/// Gauss–Legendre × uniform longitude grid with cached basis samples.
#[derive(Clone, Debug)]
pub struct SphericalGrid<T> {
    l_max: usize,
    n_lat: usize,
    n_lon: usize,
    nodes: Vec<Vector3<T>>,
    weights: Vec<T>,
    leg: Arc<Legendre<T>>,
    scalar_table: Vec<T>,
    curl_table: Vec<Vector3<T>>,
    grad_table: Vec<Vector3<T>>,
}

impl<T: Real> SphericalGrid<T> {
    pub fn new(l_max: usize, n_lat: usize, n_lon: usize) -> Result<Self> {
        if l_max < 1 {
            return Err(Error::Config("l_max must be at least 1".into()));
        }
        if n_lat < l_max + 1 || n_lon < 2 * l_max + 1 {
            return Err(Error::Config(format!(
                "grid {n_lat}x{n_lon} aliases degree {l_max}: need n_lat >= {} and n_lon >= {}",
                l_max + 1,
                2 * l_max + 1
            )));
        }
        let (z, w) = gauss_legendre(n_lat);
        let dphi = 2.0 * std::f64::consts::PI / n_lon as f64;
        let mut nodes = Vec::with_capacity(n_lat * n_lon);
        let mut weights = Vec::with_capacity(n_lat * n_lon);
        for j in 0..n_lat {
            let s = (1.0 - z[j] * z[j]).sqrt();
            for k in 0..n_lon {
                let phi = dphi * k as f64;
                nodes.push(Vector3::new(s * phi.cos(), s * phi.sin(), z[j]).map(T::lit));
                weights.push(T::lit(w[j] * dphi));
            }
        }
        let leg = Arc::new(Legendre::new(l_max));
        let nc = n_coeffs(l_max);
        let rows: Vec<Vec<(T, Vector3<T>, Vector3<T>)>> = nodes
            .par_iter()
            .map(|x| {
                basis_jets(&leg, x)
                    .into_iter()
                    .enumerate()
                    .map(|(i, (y, g))| {
                        let (l, _) = degree_order(i);
                        if l == 0 {
                            return (y, Vector3::zeros(), Vector3::zeros());
                        }
                        let s = eigen_scale::<T>(l);
                        let gt = g - x * x.dot(&g);
                        (y, x.cross(&g) / s, gt / s)
                    })
                    .collect()
            })
            .collect();
        let mut scalar_table = Vec::with_capacity(nodes.len() * nc);
        let mut curl_table = Vec::with_capacity(nodes.len() * nc);
        let mut grad_table = Vec::with_capacity(nodes.len() * nc);
        for row in rows {
            for (y, c, g) in row {
                scalar_table.push(y);
                curl_table.push(c);
                grad_table.push(g);
            }
        }
        Ok(Self { l_max, n_lat, n_lon, nodes, weights, leg, scalar_table, curl_table, grad_table })
    }

    /// 32 × 64 grid at `l_max = 15`.
    pub fn standard() -> Self {
        Self::new(15, 32, 64).expect("standard grid resolves its degree")
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_lat, self.n_lon)
    }

    pub fn nodes(&self) -> &[Vector3<T>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn legendre(&self) -> &Arc<Legendre<T>> {
        &self.leg
    }

    /// `C_lm(x_q)` for the full index `i`.
    pub fn curl_basis(&self, q: usize, i: usize) -> Vector3<T> {
        self.curl_table[q * n_coeffs(self.l_max) + i]
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n == self.len() {
            Ok(())
        } else {
            Err(Error::Config(format!("expected {} grid samples, got {n}", self.len())))
        }
    }

    fn check_degree(&self, l_max: usize) -> Result<()> {
        if l_max <= self.l_max {
            Ok(())
        } else {
            Err(Error::Config(format!("field degree {l_max} exceeds grid degree {}", self.l_max)))
        }
    }

    pub fn quadrature_integral(&self, samples: &[T]) -> T {
        samples.iter().zip(&self.weights).fold(T::zero(), |acc, (f, w)| acc + *f * *w)
    }

    pub fn analyze_scalar(&self, samples: &[T]) -> Result<Vec<T>> {
        self.check_len(samples.len())?;
        let nc = n_coeffs(self.l_max);
        let mut c = vec![T::zero(); nc];
        for (q, f) in samples.iter().enumerate() {
            let wf = *f * self.weights[q];
            let row = &self.scalar_table[q * nc..(q + 1) * nc];
            for (ci, y) in c.iter_mut().zip(row) {
                *ci += wf * *y;
            }
        }
        Ok(c)
    }

    pub fn synthesize_scalar(&self, coeffs: &[T]) -> Result<Vec<T>> {
        let nc = n_coeffs(self.l_max);
        if coeffs.len() > nc {
            return Err(Error::Config("scalar coefficients exceed grid degree".into()));
        }
        Ok((0..self.len())
            .map(|q| dot(coeffs, &self.scalar_table[q * nc..q * nc + coeffs.len()]))
            .collect())
    }

    /// Curl and gradient coefficients of tangent samples.
    pub fn analyze(&self, samples: &[Vector3<T>]) -> Result<SpectralField<T>> {
        self.check_len(samples.len())?;
        let nc = n_coeffs(self.l_max);
        let mut f = SpectralField::zeros(self.l_max);
        f.leg = self.leg.clone();
        let mut g = vec![T::zero(); nc];
        for (q, u) in samples.iter().enumerate() {
            let wu = u * self.weights[q];
            let base = q * nc;
            for i in 1..nc {
                f.curl[i] += wu.dot(&self.curl_table[base + i]);
                g[i] += wu.dot(&self.grad_table[base + i]);
            }
        }
        f.grad = Some(g);
        Ok(f)
    }

    pub fn synthesize(&self, field: &SpectralField<T>) -> Result<Vec<Vector3<T>>> {
        self.check_degree(field.l_max)?;
        let nc = n_coeffs(self.l_max);
        let k = n_coeffs(field.l_max);
        Ok((0..self.len())
            .map(|q| {
                let base = q * nc;
                let mut u = Vector3::zeros();
                for i in 1..k {
                    u += self.curl_table[base + i] * field.curl[i];
                    if let Some(g) = &field.grad {
                        u += self.grad_table[base + i] * g[i];
                    }
                }
                u
            })
            .collect())
    }

    /// Divergence-free part of tangent samples.
    pub fn leray_project(&self, samples: &[Vector3<T>]) -> Result<SpectralField<T>> {
        let mut f = self.analyze(samples)?;
        f.grad = None;
        Ok(f)
    }

    /// `∇_u u` at every node for the curl part of `field`.
    pub fn convection(&self, field: &SpectralField<T>) -> Vec<Vector3<T>> {
        let psi = field.stream();
        self.nodes
            .par_iter()
            .map(|x| {
                let (_, g, h) = scalar_jet(&field.leg, &psi, x);
                let u = x.cross(&g);
                let du = u.cross(&g) + x.cross(&(h * u));
                du - x * x.dot(&du)
            })
            .collect()
    }

    /// `N_lm = −⟨𝐏 ∇_u u, C_lm⟩`.
    pub fn nonlinear_term(&self, field: &SpectralField<T>) -> Result<Vec<T>> {
        self.check_degree(field.l_max)?;
        let conv = self.convection(field);
        let nc = n_coeffs(field.l_max);
        let stride = n_coeffs(self.l_max);
        let mut out = vec![T::zero(); nc];
        for (q, c) in conv.iter().enumerate() {
            let wc = c * self.weights[q];
            for i in 1..nc {
                out[i] -= wc.dot(&self.curl_table[q * stride + i]);
            }
        }
        Ok(out)
    }

    /// One integrating-factor RK2 step of
    /// `∂_t c_lm = −⟨𝐏(∇_u u), C_lm⟩ − ν l(l+1) c_lm`.
    pub fn reference_ns_step(&self, state: &SpectralField<T>, dt: T, nu: T) -> Result<SpectralField<T>> {
        if !state.is_divergence_free() {
            return Err(Error::Precondition("reference solver needs a divergence-free state".into()));
        }
        let decay: Vec<T> = (0..state.curl.len())
            .map(|i| {
                let (l, _) = degree_order(i);
                (-nu * T::lit((l * (l + 1)) as f64) * dt).exp()
            })
            .collect();
        let k1 = self.nonlinear_term(state)?;
        let mut stage = state.clone();
        for i in 0..k1.len() {
            stage.curl[i] = decay[i] * (state.curl[i] + dt * k1[i]);
        }
        let k2 = self.nonlinear_term(&stage)?;
        let half = dt * T::lit(0.5);
        let mut next = state.clone();
        for i in 0..k1.len() {
            next.curl[i] = decay[i] * (state.curl[i] + half * k1[i]) + half * k2[i];
        }
        next.grad = None;
        let e0 = state.energy();
        let e1 = next.energy();
        if !e1.is_finite() || e1 > (e0 * T::lit(4.0)).max(T::lit(1e-300)) + e0 {
            return Err(Error::Instability(format!(
                "energy went from {e0} to {e1} in one step of size {dt}"
            )));
        }
        Ok(next)
    }

    /// Reference trajectory sampled every step, starting with `u0`.
    pub fn reference_ns_trajectory(&self, u0: &SpectralField<T>, dt: T, nu: T, steps: usize) -> Result<Vec<SpectralField<T>>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(u0.clone());
        for _ in 0..steps {
            let next = self.reference_ns_step(out.last().unwrap(), dt, nu)?;
            out.push(next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{GradientField, Killing, Polynomial};
    use crate::geometry::Sphere;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(l: usize) -> SphericalGrid<f64> {
        SphericalGrid::new(l, l + 2, 2 * l + 3).unwrap()
    }

    #[test]
    fn index_round_trip() {
        for i in 0..n_coeffs(20) {
            let (l, m) = degree_order(i);
            assert_eq!(index(l, m), i);
        }
        assert_eq!(index(2, 1), 7);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert_abs_diff_eq!(s, 2.0 / 15.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn harmonics_are_orthonormal() {
        let g = grid(12);
        let nc = n_coeffs(12);
        let mut worst: f64 = 0.0;
        for i in 0..nc {
            for j in 0..nc {
                let s: f64 = (0..g.len()).map(|q| g.weights[q] * g.scalar_table[q * nc + i] * g.scalar_table[q * nc + j]).sum();
                worst = worst.max((s - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn constant_function_transform() {
        let g = SphericalGrid::<f64>::standard();
        let c = g.analyze_scalar(&vec![1.0; g.len()]).unwrap();
        assert_abs_diff_eq!(c[0], (4.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn quadrature_examples() {
        let g = SphericalGrid::<f64>::standard();
        let pi = std::f64::consts::PI;
        assert_abs_diff_eq!(g.quadrature_integral(&vec![1.0; g.len()]), 4.0 * pi, epsilon = 1e-12);
        let z2: Vec<f64> = g.nodes().iter().map(|x| x[2] * x[2]).collect();
        assert_abs_diff_eq!(g.quadrature_integral(&z2), 4.0 * pi / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn aliasing_grids_are_refused() {
        assert!(matches!(SphericalGrid::<f64>::new(15, 10, 64), Err(Error::Config(_))));
        assert!(matches!(SphericalGrid::<f64>::new(15, 32, 20), Err(Error::Config(_))));
    }

    #[test]
    fn vector_round_trips() {
        let g = grid(10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut f = SpectralField::from_curl(10, (0..n_coeffs(10)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        f.grad = Some((0..n_coeffs(10)).map(|i| if i == 0 { 0.0 } else { rng.random_range(-1.0..1.0) }).collect());
        let back = g.analyze(&g.synthesize(&f).unwrap()).unwrap();
        assert!(back.distance(&f) < 1e-10);

        let d = SpectralField::<f64>::mode(10, 2, 1);
        let back = g.analyze(&g.synthesize(&d).unwrap()).unwrap();
        assert!(back.distance(&d) < 1e-10);
    }

    #[test]
    fn jets_match_pointwise_values_and_forward_mode() {
        let leg = Legendre::<f64>::new(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c: Vec<f64> = (0..n_coeffs(6)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = Vector3::new(0.3, -0.5, 0.81);
        let (v, g, h) = scalar_jet(&leg, &c, &y);
        let jets = basis_jets(&leg, &y);
        let v2: f64 = jets.iter().zip(&c).map(|(j, c)| j.0 * c).sum();
        let g2: Vector3<f64> = jets.iter().zip(&c).fold(Vector3::zeros(), |a, (j, c)| a + j.1 * *c);
        assert_abs_diff_eq!(v, v2, epsilon = 1e-13);
        assert_abs_diff_eq!(g, g2, epsilon = 1e-13);
        for k in 0..3 {
            let e = Vector3::from_fn(|i, _| if i == k { 1.0 } else { 0.0 });
            let (_, gd, _) = scalar_jet(&leg, &c, &crate::dual::seed(&y, &e));
            assert_abs_diff_eq!(crate::dual::tangent(&gd), h.column(k).into_owned(), epsilon = 1e-12);
        }
    }

    #[test]
    fn curl_components_pair_against_basis_fields() {
        let leg = Legendre::<f64>::new(7);
        let y = Vector3::new(0.3, -0.5, 0.81).normalize();
        let g = Vector3::new(0.7, 0.1, -0.4);
        let mut out = vec![0.0; n_coeffs(7)];
        curl_components(&leg, &y, &g, &mut out);
        for (i, o) in out.iter().enumerate().skip(1) {
            let (l, m) = degree_order(i);
            let c = SpectralField::<f64>::mode(7, l, m).eval(&y);
            assert_abs_diff_eq!(*o, g.dot(&c), epsilon = 1e-13);
        }
        let d2 = leg.derivatives::<f64, 2>(0.37);
        let d3 = leg.jets(0.37);
        for (a, b) in d2.iter().zip(&d3) {
            assert_eq!(a[..], b[..2]);
        }
    }

    #[test]
    fn jacobian_matches_forward_mode() {
        let l = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = SpectralField::from_curl(l, (0..n_coeffs(l)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = Vector3::new(0.6, 0.0, 0.8);
        let (u, du) = f.value_and_jacobian(&y);
        assert_abs_diff_eq!(u, f.eval(&y), epsilon = 1e-13);
        let h = Vector3::new(0.2, -1.0, 0.3);
        let ad = crate::dual::tangent(&f.eval(&crate::dual::seed(&y, &h)));
        assert_abs_diff_eq!(du * h, ad, epsilon = 1e-12);
    }

    #[test]
    fn rotation_helper_is_e3_cross_x() {
        let f = SpectralField::<f64>::rotation(4, 1.5);
        let x = Vector3::new(0.48, -0.6, 0.64);
        assert_abs_diff_eq!(f.eval(&x), 1.5 * Vector3::z().cross(&x), epsilon = 1e-14);
    }

    #[test]
    fn leray_examples() {
        let g = grid(8);
        let s2 = Sphere::<f64, 3>::new();
        // ∇Y_21 ∝ ∇(xz)
        let p = Polynomial::<f64, 3>::new(vec![([1, 0, 1], 1.0)]);
        let grad = GradientField::new(&s2, p);
        let samples: Vec<_> = g.nodes().iter().map(|x| grad.eval(x)).collect();
        assert!(g.leray_project(&samples).unwrap().l2_norm() < 1e-12);

        let c32 = SpectralField::<f64>::mode(8, 3, 2);
        let back = g.leray_project(&g.synthesize(&c32).unwrap()).unwrap();
        assert!(back.distance(&c32) < 1e-12);

        let r = SpectralField::<f64>::rotation(8, 1.0);
        assert!(g.nonlinear_term(&r).unwrap().iter().all(|v| v.abs() < 1e-12));

        let k = Killing::<f64, 3>::rotation(Vector3::z());
        let ks: Vec<_> = g.nodes().iter().map(|x| k.eval(x)).collect();
        assert!(g.leray_project(&ks).unwrap().distance(&r) < 1e-12);
    }

    #[test]
    fn csv_round_trip_and_complex_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = SpectralField::from_curl(4, (0..n_coeffs(4)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let text = f.to_csv("abc");
        assert!(text.starts_with("# run_id: abc\nfamily,l,m,re,im\n"));
        let back = SpectralField::<f64>::from_csv(&text).unwrap();
        assert!(back.distance(&f) < 1e-14);
        let (r1, i1) = SpectralField::complex_coefficient(&f.curl, 3, 2);
        let (r2, i2) = SpectralField::complex_coefficient(&f.curl, 3, -2);
        assert_eq!((r1, -i1), (r2, i2));
        let (r1, i1) = SpectralField::complex_coefficient(&f.curl, 3, 1);
        let (r2, i2) = SpectralField::complex_coefficient(&f.curl, 3, -1);
        assert_eq!((-r1, i1), (r2, i2));
    }

    #[test]
    fn zero_state_stays_zero() {
        let g = grid(6);
        let z = SpectralField::<f64>::zeros(6);
        let next = g.reference_ns_step(&z, 1e-3, 0.1).unwrap();
        assert!(next.l2_norm() == 0.0);
    }

    #[test]
    fn rotation_decays_exactly() {
        let g = SphericalGrid::<f64>::standard();
        let u0 = SpectralField::rotation(15, 1.0);
        let traj = g.reference_ns_trajectory(&u0, 1e-3, 0.1, 500).unwrap();
        let ratio = traj[500].curl[index(1, 0)] / u0.curl[index(1, 0)];
        assert_abs_diff_eq!(ratio, (-0.1f64).exp(), epsilon = 1e-6);
    }
}
