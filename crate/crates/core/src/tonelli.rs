//! Tonelli Lagrangians on the tangent bundle of the sphere.
//!
//! Every Lagrangian here has the form `L(q, v) = G(g_q(v, v)) - U(q) + lambda_q(v)`
//! with a radial profile `G`. The electromagnetic kind uses `G(s) = s / 2`;
//! the fiber-polynomial kind uses an arbitrary polynomial in `s`, replaced by
//! its tangent line for `s > R^2` so that `L` is fiberwise quadratic at infinity.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::sphere_geom::{fibonacci_points, icosphere_vertices, polish_max, Metric, TwoForm};
use crate::vec3::{tangent_basis, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub enum LagrangianKind {
    /// `G(s) = s / 2`.
    Electromagnetic,
    /// `G(s) = sum_k c[k] s^k` with `s = g(v, v)`.
    FiberPolynomial(Vec<f64>),
}

/// The 1-form `lambda = d_v L(., 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Drift {
    #[default]
    None,
    /// `lambda_q(v) = c <e_z x q, v>`, whose differential is `2 c z dA_round`.
    Rotation(f64),
}

impl Drift {
    /// Ambient covector representing `lambda_q`.
    #[inline]
    pub fn covector(&self, q: Vec3) -> Vec3 {
        match *self {
            Drift::None => Vec3::ZERO,
            Drift::Rotation(c) => Vec3::new(-q.y, q.x, 0.0) * c,
        }
    }

    /// Gradient in `q` of `lambda_q(v)` for fixed ambient `v`.
    #[inline]
    pub fn dq(&self, v: Vec3) -> Vec3 {
        match *self {
            Drift::None => Vec3::ZERO,
            Drift::Rotation(c) => Vec3::new(v.y, -v.x, 0.0) * c,
        }
    }

    /// Density of `d lambda` against the round area form.
    #[inline]
    pub fn curl_density(&self, q: Vec3) -> f64 {
        match *self {
            Drift::None => 0.0,
            Drift::Rotation(c) => 2.0 * c * q.z,
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            Drift::None => true,
            Drift::Rotation(c) => c == 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lagrangian {
    pub kind: LagrangianKind,
    pub metric: Metric,
    pub potential: ScalarField,
    pub drift: Drift,
    pub extension_radius: f64,
}

/// Value and first two derivatives of the radial profile.
#[derive(Clone, Copy, Debug)]
struct Radial {
    g: f64,
    dg: f64,
    ddg: f64,
}

impl Lagrangian {
    /// `L = g(v, v) / 2 - U`.
    pub fn kinetic(metric: Metric, potential: ScalarField) -> Self {
        Lagrangian {
            kind: LagrangianKind::Electromagnetic,
            metric,
            potential,
            drift: Drift::None,
            extension_radius: 1.0,
        }
    }

    pub fn with_drift(mut self, drift: Drift) -> Self {
        self.drift = drift;
        self
    }

    pub fn with_kind(mut self, kind: LagrangianKind) -> Self {
        self.kind = kind;
        self
    }

    /// Sets `R = 3 sqrt(2 e_max + 2 max|U|)`; `max|U|` is estimated on a grid.
    pub fn with_default_extension(mut self, e_max: f64) -> Self {
        let umax = icosphere_vertices(2)
            .into_iter()
            .map(|q| self.potential.value(q).abs())
            .fold(0.0, f64::max);
        let r = 3.0 * libm::sqrt((2.0 * e_max + 2.0 * umax).max(0.0));
        self.extension_radius = if r > 0.0 { r } else { 1.0 };
        self
    }

    pub fn is_electromagnetic(&self) -> bool {
        matches!(self.kind, LagrangianKind::Electromagnetic)
    }

    fn radial(&self, s: f64) -> Radial {
        match &self.kind {
            LagrangianKind::Electromagnetic => Radial { g: 0.5 * s, dg: 0.5, ddg: 0.0 },
            LagrangianKind::FiberPolynomial(c) => {
                let r2 = self.extension_radius * self.extension_radius;
                if s > r2 {
                    let at = poly3(c, r2);
                    Radial { g: at.g + at.dg * (s - r2), dg: at.dg, ddg: 0.0 }
                } else {
                    poly3(c, s)
                }
            }
        }
    }

    /// `L(q, v)`.
    #[inline]
    pub fn eval(&self, q: Vec3, v: Vec3) -> f64 {
        let s = self.metric.norm_sq(q, v);
        self.radial(s).g - self.potential.value(q) + self.drift.covector(q).dot(v)
    }

    /// `E(q, v) = d_v L(q, v) v - L(q, v)`.
    #[inline]
    pub fn energy(&self, q: Vec3, v: Vec3) -> f64 {
        let s = self.metric.norm_sq(q, v);
        let r = self.radial(s);
        2.0 * s * r.dg - r.g + self.potential.value(q)
    }

    /// Fiber derivative `d_v L` as an ambient covector.
    #[inline]
    pub fn dv(&self, q: Vec3, v: Vec3) -> Vec3 {
        let phi = self.metric.factor(q);
        let s = phi * v.norm_sq();
        v * (2.0 * self.radial(s).dg * phi) + self.drift.covector(q)
    }

    /// Ambient gradient of `L` in `q` at fixed ambient `v`.
    #[inline]
    pub fn dq(&self, q: Vec3, v: Vec3) -> Vec3 {
        let s = self.metric.norm_sq(q, v);
        let dg = self.radial(s).dg;
        self.metric.factor_gradient(q) * (dg * v.norm_sq()) - self.potential.gradient(q) + self.drift.dq(v)
    }

    /// `d_v L(q, v)` converted to a tangent vector through the metric.
    pub fn legendre(&self, q: Vec3, v: Vec3) -> Vec3 {
        (self.dv(q, v) / self.metric.factor(q)).reject(q)
    }

    /// Eigenvalues of the fiber Hessian relative to `g`: transverse and radial.
    pub fn fiber_hessian_eigenvalues(&self, q: Vec3, v: Vec3) -> (f64, f64) {
        let s = self.metric.norm_sq(q, v);
        let r = self.radial(s);
        (2.0 * r.dg, 2.0 * r.dg + 4.0 * s * r.ddg)
    }

    /// Asymptotic value of `L / g(v, v)`.
    fn asymptotic_coefficient(&self) -> f64 {
        match &self.kind {
            LagrangianKind::Electromagnetic => 0.5,
            LagrangianKind::FiberPolynomial(_) => {
                let r2 = self.extension_radius * self.extension_radius;
                self.radial(r2 + 1.0).dg
            }
        }
    }
}

fn poly3(c: &[f64], s: f64) -> Radial {
    let g = c.iter().rev().fold(0.0, |acc, ck| acc * s + ck);
    let dg = c.iter().enumerate().skip(1).rev().fold(0.0, |acc, (k, ck)| acc * s + ck * k as f64);
    let ddg = c
        .iter()
        .enumerate()
        .skip(2)
        .rev()
        .fold(0.0, |acc, (k, ck)| acc * s + ck * (k * (k - 1)) as f64);
    Radial { g, dg, ddg }
}

/// Free-function form of [`Lagrangian::eval`].
pub fn lagrangian_eval(l: &Lagrangian, q: Vec3, v: Vec3) -> f64 {
    l.eval(q, v)
}

/// Free-function form of [`Lagrangian::energy`].
pub fn energy(l: &Lagrangian, q: Vec3, v: Vec3) -> f64 {
    l.energy(q, v)
}

/// Free-function form of [`Lagrangian::legendre`].
pub fn legendre(l: &Lagrangian, q: Vec3, v: Vec3) -> Vec3 {
    l.legendre(q, v)
}

/// `max_q E(q, 0)` over an icosahedral grid, polished by local ascent.
pub fn e0(l: &Lagrangian, grid_depth: u32) -> f64 {
    let f = |q: Vec3| l.energy(q, Vec3::ZERO);
    let mut verts = icosphere_vertices(grid_depth);
    verts.sort_by(|a, b| f(*b).total_cmp(&f(*a)));
    verts.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
    let mut best = f(verts[0]);
    for &q in verts.iter().take(4) {
        let (_, v) = polish_max(&f, q);
        best = best.max(v);
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiberBounds {
    pub h1: f64,
    pub h2: f64,
    pub sup_norm_dlambda_plus_sigma: f64,
}

/// Density of `d lambda + sigma` against the `g`-area form.
pub fn curl_plus_sigma_density(l: &Lagrangian, sigma: &TwoForm, q: Vec3) -> f64 {
    sigma.density.value(q) + l.drift.curl_density(q) / sigma.metric.factor(q)
}

/// Sampled constants for the valley estimates: the fiber Hessian is at least
/// `2 h1 g`, `L <= h2 (g(v, v) + 1)`, and the sup norm of `d lambda + sigma`.
pub fn fiber_bounds(l: &Lagrangian, sigma: &TwoForm, sample_count: usize) -> Result<FiberBounds> {
    if sample_count < 1000 {
        return Err(Error::InvalidArgument(alloc::format!(
            "fiber_bounds needs at least 1000 samples, got {sample_count}"
        )));
    }
    let pts = fibonacci_points(sample_count);
    let r = l.extension_radius;
    let speeds: Vec<f64> = (0..24).map(|k| 1.5 * r * k as f64 / 23.0).collect();

    let mut min_eig = f64::INFINITY;
    let mut max_ratio = l.asymptotic_coefficient();
    for &q in &pts {
        let (e1, e2) = tangent_basis(q);
        let scale = 1.0 / libm::sqrt(l.metric.factor(q));
        let lam = l.drift.covector(q).reject(q);
        let lam_dir = if lam.norm() > 0.0 { lam.normalized() } else { e1 };
        for &sp in &speeds {
            for dir in [e1, e2, lam_dir, -lam_dir] {
                let v = dir * (sp * scale);
                let (a, b) = l.fiber_hessian_eigenvalues(q, v);
                min_eig = min_eig.min(a).min(b);
                let ratio = l.eval(q, v) / (sp * sp + 1.0);
                max_ratio = max_ratio.max(ratio);
            }
        }
    }
    if min_eig <= 0.0 || !min_eig.is_finite() {
        return Err(Error::NonConvexFiber(min_eig));
    }
    let h1 = 0.5 * min_eig;
    let h2 = (1.1 * max_ratio).max(1.1 * h1);

    let dens = |q: Vec3| curl_plus_sigma_density(l, sigma, q).abs();
    let mut ranked: Vec<Vec3> = pts.clone();
    ranked.sort_by(|a, b| dens(*b).total_cmp(&dens(*a)));
    let mut sup = ranked.first().map(|q| dens(*q)).unwrap_or(0.0);
    for &q in ranked.iter().take(4) {
        sup = sup.max(polish_max(&dens, q).1);
    }
    Ok(FiberBounds { h1, h2, sup_norm_dlambda_plus_sigma: sup })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn kinetic() -> Lagrangian {
        Lagrangian::kinetic(Metric::Round, ScalarField::zero())
    }

    #[test]
    fn lagrangian_examples() {
        let q = Vec3::X;
        assert_eq!(kinetic().eval(q, Vec3::Y), 0.5);
        assert_eq!(kinetic().eval(q, Vec3::Y * 2.0), 2.0);
        let u = Lagrangian::kinetic(Metric::Round, ScalarField::Height { a: 0.3, c: 0.0 });
        assert!((u.eval(Vec3::Z, Vec3::ZERO) + 0.3).abs() < 1e-15);
        assert!((u.energy(Vec3::Z, Vec3::ZERO) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn energy_of_kinetic_speed() {
        for e in [0.02, 0.5] {
            let v = Vec3::Y * libm::sqrt(2.0 * e);
            assert!((kinetic().energy(Vec3::X, v) - e).abs() < 1e-15);
        }
    }

    #[test]
    fn drift_changes_l_not_e() {
        let l = kinetic().with_drift(Drift::Rotation(0.7));
        let q = Vec3::new(0.6, 0.0, 0.8);
        let v = Vec3::new(0.0, 0.3, 0.0);
        assert!((l.eval(q, v) - kinetic().eval(q, v)).abs() > 0.1);
        assert!((l.energy(q, v) - kinetic().energy(q, v)).abs() < 1e-15);
        let lam = l.drift.covector(q);
        assert!((l.legendre(q, v) - (v + lam)).norm() < 1e-15);
        assert_eq!(kinetic().legendre(q, Vec3::ZERO), Vec3::ZERO);
    }

    #[test]
    fn e0_examples() {
        assert_eq!(e0(&kinetic(), 3), 0.0);
        let lin = Lagrangian::kinetic(Metric::Round, ScalarField::Height { a: 0.3, c: 0.0 });
        assert!((e0(&lin, 3) - 0.3).abs() < 1e-9);
        let quad = Lagrangian::kinetic(Metric::Round, ScalarField::ZonalPoly(vec![0.0, 0.0, 0.3]))
            .with_drift(Drift::Rotation(1.3));
        assert!((e0(&quad, 3) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn fiber_bound_examples() {
        let flat = TwoForm::new(ScalarField::Height { a: 1.0, c: 0.2 }, Metric::Round);
        let b = fiber_bounds(&kinetic(), &flat, 2000).unwrap();
        assert!((b.h1 - 0.5).abs() < 1e-12);
        assert!((b.sup_norm_dlambda_plus_sigma - 1.2).abs() < 1e-3);
        let u = Lagrangian::kinetic(Metric::Round, ScalarField::Height { a: 0.3, c: 0.0 });
        let b = fiber_bounds(&u, &flat, 2000).unwrap();
        assert!(b.h2 <= 0.9 && b.h2 > b.h1);
    }

    #[test]
    fn non_convex_fiber_is_rejected() {
        let l = kinetic().with_kind(LagrangianKind::FiberPolynomial(vec![0.0, -0.1, 0.1]));
        let flat = TwoForm::default();
        assert!(matches!(fiber_bounds(&l, &flat, 1000), Err(Error::NonConvexFiber(_))));
    }

    #[test]
    fn quadratic_extension_is_c1() {
        let l = kinetic()
            .with_kind(LagrangianKind::FiberPolynomial(vec![0.0, 0.5, 0.2]))
            .with_default_extension(0.5);
        let r = l.extension_radius;
        let q = Vec3::Z;
        let (lo, hi) = (Vec3::X * (r - 1e-10), Vec3::X * (r + 1e-10));
        assert!((l.eval(q, lo) - l.eval(q, hi)).abs() < 1e-8);
        assert!((l.dv(q, lo) - l.dv(q, hi)).norm() < 1e-8);
        let (a, b) = l.fiber_hessian_eigenvalues(q, Vec3::X * (2.0 * r));
        assert!((a - b).abs() < 1e-15);
    }
}
