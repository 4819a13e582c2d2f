//! Geometry of the unit sphere in R^3: points, tangent vectors, conformal
//! metrics, 2-forms written as density times area form, and flux quadrature
//! over geodesic triangles.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::vec3::{angle_between, Vec3};

/// Base point of the loop-space cover.
pub const BASE_POINT: Vec3 = Vec3::new(-1.0, 0.0, 0.0);

/// Leaf triangles with smaller area fall back to the flat area formula.
const FLAT_AREA_CUTOFF: f64 = 1e-14;

/// A point on the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpherePoint(Vec3);

impl SpherePoint {
    /// Wraps a vector that is already of unit length (up to rounding).
    pub fn new_unchecked(x: Vec3) -> Self {
        SpherePoint(x)
    }

    pub fn vec(self) -> Vec3 {
        self.0
    }

    pub fn north() -> Self {
        SpherePoint(Vec3::Z)
    }

    pub fn south() -> Self {
        SpherePoint(-Vec3::Z)
    }

    pub fn from_spherical(z: f64, azimuth: f64) -> Self {
        let r = libm::sqrt((1.0 - z * z).max(0.0));
        SpherePoint(Vec3::new(r * libm::cos(azimuth), r * libm::sin(azimuth), z))
    }
}

/// Radial projection onto the sphere.
pub fn project_to_sphere(x: Vec3) -> Result<SpherePoint> {
    let n = x.norm();
    if n <= 1e-9 {
        return Err(Error::NearZeroVector(n));
    }
    Ok(SpherePoint(x / n))
}

/// A tangent vector together with its base point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentVector {
    pub base: SpherePoint,
    pub v: Vec3,
}

impl TangentVector {
    /// Projects `v` onto the tangent plane at `base`.
    pub fn new(base: SpherePoint, v: Vec3) -> Self {
        TangentVector { base, v: v.reject(base.vec()) }
    }
}

/// Riemannian metric on the sphere, `g = e^{2u} g_round`.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum Metric {
    #[default]
    Round,
    Conformal(ScalarField),
}

impl Metric {
    /// Conformal factor `e^{2u(q)}`.
    #[inline]
    pub fn factor(&self, q: Vec3) -> f64 {
        match self {
            Metric::Round => 1.0,
            Metric::Conformal(u) => libm::exp(2.0 * u.value(q)),
        }
    }

    /// Ambient gradient of the conformal factor.
    #[inline]
    pub fn factor_gradient(&self, q: Vec3) -> Vec3 {
        match self {
            Metric::Round => Vec3::ZERO,
            Metric::Conformal(u) => u.gradient(q) * (2.0 * libm::exp(2.0 * u.value(q))),
        }
    }

    pub fn inner(&self, q: Vec3, v: Vec3, w: Vec3) -> f64 {
        self.factor(q) * v.dot(w)
    }

    pub fn norm_sq(&self, q: Vec3, v: Vec3) -> f64 {
        self.factor(q) * v.norm_sq()
    }

    pub fn is_round(&self) -> bool {
        match self {
            Metric::Round => true,
            Metric::Conformal(u) => u.is_identically_zero(),
        }
    }

    pub fn is_zonal(&self) -> bool {
        match self {
            Metric::Round => true,
            Metric::Conformal(u) => u.is_zonal(),
        }
    }
}

/// A 2-form `sigma = f dA_g`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TwoForm {
    pub density: ScalarField,
    pub metric: Metric,
}

impl TwoForm {
    pub fn new(density: ScalarField, metric: Metric) -> Self {
        TwoForm { density, metric }
    }

    /// Density with respect to the round area form, `f e^{2u}`.
    #[inline]
    pub fn round_density(&self, q: Vec3) -> f64 {
        self.density.value(q) * self.metric.factor(q)
    }

    /// `sigma_q(v, w)`; `v` and `w` are assumed tangent at `q`.
    #[inline]
    pub fn eval(&self, q: SpherePoint, v: Vec3, w: Vec3) -> f64 {
        self.round_density(q.vec()) * Vec3::triple(q.vec(), v, w)
    }

    /// Signed flux through a geodesic triangle with `depth` levels of
    /// midpoint subdivision.
    pub fn flux_triangle(&self, tri: &SphericalTriangle, depth: u32) -> f64 {
        integrate_two_form_triangle(self, tri, depth)
    }
}

/// Evaluates `sigma_q(v, w)`.
pub fn two_form_eval(sigma: &TwoForm, q: SpherePoint, v: Vec3, w: Vec3) -> f64 {
    sigma.eval(q, v, w)
}

/// Geodesic triangle; vertex order fixes the orientation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalTriangle {
    pub a: Vec3,
    pub b: Vec3,
    pub c: Vec3,
}

impl SphericalTriangle {
    pub fn new(a: SpherePoint, b: SpherePoint, c: SpherePoint) -> Result<Self> {
        Self::from_vecs(a.vec(), b.vec(), c.vec())
    }

    pub(crate) fn from_vecs(a: Vec3, b: Vec3, c: Vec3) -> Result<Self> {
        let lim = core::f64::consts::PI - 1e-9;
        if angle_between(a, b) >= lim || angle_between(b, c) >= lim || angle_between(c, a) >= lim {
            return Err(Error::DegenerateTriangle);
        }
        Ok(SphericalTriangle { a, b, c })
    }

    pub fn reversed(&self) -> Self {
        SphericalTriangle { a: self.a, b: self.c, c: self.b }
    }

    /// Signed area; positive when `(a, b, c)` is counter-clockwise seen from
    /// outside the sphere.
    pub fn signed_area(&self) -> f64 {
        signed_area(self.a, self.b, self.c)
    }

    fn children(&self) -> [SphericalTriangle; 4] {
        let ab = (self.a + self.b).normalized();
        let bc = (self.b + self.c).normalized();
        let ca = (self.c + self.a).normalized();
        [
            SphericalTriangle { a: self.a, b: ab, c: ca },
            SphericalTriangle { a: ab, b: self.b, c: bc },
            SphericalTriangle { a: ca, b: bc, c: self.c },
            SphericalTriangle { a: ab, b: bc, c: ca },
        ]
    }
}

/// Signed spherical excess of the geodesic triangle `(a, b, c)`.
///
/// Uses the half-angle tangent form `tan(E/2) = <a, b x c> / (1 + a.b + b.c + c.a)`,
/// which stays accurate for slivers where l'Huilier's formula cancels.
#[inline]
pub fn signed_area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let det = Vec3::triple(a, b, c);
    let den = 1.0 + a.dot(b) + b.dot(c) + c.dot(a);
    2.0 * libm::atan2(det, den)
}

#[inline]
fn leaf_flux(sigma: &TwoForm, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let s = a + b + c;
    let n = s.norm();
    if n < 1e-12 {
        return 0.0;
    }
    let centroid = s / n;
    let mut area = signed_area(a, b, c);
    if area.abs() < FLAT_AREA_CUTOFF {
        area = 0.5 * centroid.dot((b - a).cross(c - a));
    }
    sigma.round_density(centroid) * area
}

fn integrate_rec(sigma: &TwoForm, a: Vec3, b: Vec3, c: Vec3, depth: u32) -> f64 {
    if depth == 0 {
        return leaf_flux(sigma, a, b, c);
    }
    let ab = (a + b).normalized();
    let bc = (b + c).normalized();
    let ca = (c + a).normalized();
    integrate_rec(sigma, a, ab, ca, depth - 1)
        + integrate_rec(sigma, ab, b, bc, depth - 1)
        + integrate_rec(sigma, ca, bc, c, depth - 1)
        + integrate_rec(sigma, ab, bc, ca, depth - 1)
}

/// Flux of `sigma` through a geodesic triangle by recursive 4-way midpoint
/// subdivision; leaves use `f(centroid) * signed area`.
pub fn integrate_two_form_triangle(sigma: &TwoForm, tri: &SphericalTriangle, depth: u32) -> f64 {
    if sigma.density.is_identically_zero() {
        return 0.0;
    }
    integrate_rec(sigma, tri.a, tri.b, tri.c, depth)
}

/// Flux of the triangle spanned by raw vertices, rejecting antipodal pairs.
pub(crate) fn triangle_flux(sigma: &TwoForm, a: Vec3, b: Vec3, c: Vec3, depth: u32) -> Result<f64> {
    let tri = SphericalTriangle::from_vecs(a, b, c)?;
    Ok(integrate_two_form_triangle(sigma, &tri, depth))
}

/// The 20 positively oriented faces of an icosahedron with vertices at the poles.
pub fn icosahedron() -> Vec<SphericalTriangle> {
    let zr = 1.0 / libm::sqrt(5.0);
    let rr = 2.0 / libm::sqrt(5.0);
    let mut verts = Vec::with_capacity(12);
    verts.push(Vec3::Z);
    for k in 0..5 {
        let phi = 2.0 * core::f64::consts::PI * k as f64 / 5.0;
        verts.push(Vec3::new(rr * libm::cos(phi), rr * libm::sin(phi), zr));
    }
    for k in 0..5 {
        let phi = 2.0 * core::f64::consts::PI * (k as f64 + 0.5) / 5.0;
        verts.push(Vec3::new(rr * libm::cos(phi), rr * libm::sin(phi), -zr));
    }
    verts.push(-Vec3::Z);
    let mut faces = Vec::with_capacity(20);
    for k in 0..5 {
        let u0 = 1 + k;
        let u1 = 1 + (k + 1) % 5;
        let l0 = 6 + k;
        let l1 = 6 + (k + 1) % 5;
        faces.push((0, u0, u1));
        faces.push((u0, l0, u1));
        faces.push((u1, l0, l1));
        faces.push((11, l1, l0));
    }
    faces
        .into_iter()
        .map(|(i, j, k)| {
            let (a, b, c) = (verts[i], verts[j], verts[k]);
            if Vec3::triple(a, b, c) > 0.0 {
                SphericalTriangle { a, b, c }
            } else {
                SphericalTriangle { a, c: b, b: c }
            }
        })
        .collect()
}

/// Vertices of the icosahedral grid refined `depth` times (with repeats).
pub fn icosphere_vertices(depth: u32) -> Vec<Vec3> {
    let mut tris = icosahedron();
    for _ in 0..depth {
        tris = tris.iter().flat_map(|t| t.children()).collect();
    }
    let mut out = Vec::with_capacity(tris.len() * 3);
    for t in &tris {
        out.push(t.a);
        out.push(t.b);
        out.push(t.c);
    }
    out
}

/// Approximates `int_{S^2} sigma` over the icosahedral triangulation.
pub fn total_flux(sigma: &TwoForm, depth: u32) -> f64 {
    icosahedron()
        .iter()
        .map(|t| integrate_two_form_triangle(sigma, t, depth))
        .sum()
}

/// Roughly uniform deterministic sample points (Fibonacci lattice).
pub fn fibonacci_points(n: usize) -> Vec<Vec3> {
    let golden = core::f64::consts::PI * (3.0 - libm::sqrt(5.0));
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            SpherePoint::from_spherical(z, golden * i as f64).vec()
        })
        .collect()
}

/// Local maximisation of a smooth function on the sphere by projected
/// gradient ascent with central-difference gradients.
pub(crate) fn polish_max<F: Fn(Vec3) -> f64>(f: &F, start: Vec3) -> (Vec3, f64) {
    let mut x = start;
    let mut fx = f(x);
    let mut step = 0.1;
    for _ in 0..200 {
        let (e1, e2) = crate::vec3::tangent_basis(x);
        let h = 1e-6;
        let d1 = (f((x + e1 * h).normalized()) - f((x - e1 * h).normalized())) / (2.0 * h);
        let d2 = (f((x + e2 * h).normalized()) - f((x - e2 * h).normalized())) / (2.0 * h);
        let g = e1 * d1 + e2 * d2;
        let gn = g.norm();
        if gn < 1e-13 {
            break;
        }
        let mut improved = false;
        while step > 1e-14 {
            let y = (x + g * (step / gn)).normalized();
            let fy = f(y);
            if fy > fx {
                x = y;
                fx = fy;
                step *= 2.0;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (x, fx)
}
