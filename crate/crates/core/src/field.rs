//! Built-in scalar functions on the sphere.
//!
//! Every field is a polynomial in the ambient coordinates, so it extends
//! smoothly off the sphere; the loop-space gradients rely on that extension
//! when differentiating through node normalisation.

use alloc::vec::Vec;

use crate::vec3::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub enum ScalarField {
    /// `f(q) = c`
    Constant(f64),
    /// `f(q) = a*z + c`
    Height { a: f64, c: f64 },
    /// `f(q) = sum_k coeffs[k] * z^k`
    ZonalPoly(Vec<f64>),
    /// `f(q) = <a, q> + c`
    Linear { a: Vec3, c: f64 },
}

impl Default for ScalarField {
    fn default() -> Self {
        ScalarField::Constant(0.0)
    }
}

impl ScalarField {
    pub fn zero() -> Self {
        ScalarField::Constant(0.0)
    }

    #[inline]
    pub fn value(&self, q: Vec3) -> f64 {
        match self {
            ScalarField::Constant(c) => *c,
            ScalarField::Height { a, c } => a * q.z + c,
            ScalarField::ZonalPoly(k) => horner(k, q.z),
            ScalarField::Linear { a, c } => a.dot(q) + c,
        }
    }

    /// Ambient gradient of the polynomial extension.
    #[inline]
    pub fn gradient(&self, q: Vec3) -> Vec3 {
        match self {
            ScalarField::Constant(_) => Vec3::ZERO,
            ScalarField::Height { a, .. } => Vec3::new(0.0, 0.0, *a),
            ScalarField::ZonalPoly(k) => Vec3::new(0.0, 0.0, horner_derivative(k, q.z)),
            ScalarField::Linear { a, .. } => *a,
        }
    }

    pub fn is_identically_zero(&self) -> bool {
        match self {
            ScalarField::Constant(c) => *c == 0.0,
            ScalarField::Height { a, c } => *a == 0.0 && *c == 0.0,
            ScalarField::ZonalPoly(k) => k.iter().all(|c| *c == 0.0),
            ScalarField::Linear { a, c } => *a == Vec3::ZERO && *c == 0.0,
        }
    }

    /// True when the field depends on the height `z` only.
    pub fn is_zonal(&self) -> bool {
        match self {
            ScalarField::Linear { a, .. } => a.x == 0.0 && a.y == 0.0,
            _ => true,
        }
    }

    /// Value as a function of height for zonal fields.
    pub fn zonal_value(&self, z: f64) -> Option<f64> {
        if !self.is_zonal() {
            return None;
        }
        Some(self.value(Vec3::new(0.0, 0.0, z)))
    }

    /// Exact `int_{lo}^{hi} f(z) dz` for zonal fields.
    pub fn zonal_integral(&self, lo: f64, hi: f64) -> Option<f64> {
        let prim = |z: f64| -> f64 {
            match self {
                ScalarField::Constant(c) => c * z,
                ScalarField::Height { a, c } => 0.5 * a * z * z + c * z,
                ScalarField::ZonalPoly(k) => {
                    let mut acc = 0.0;
                    for (i, c) in k.iter().enumerate().rev() {
                        acc = acc * z + c / (i as f64 + 1.0);
                    }
                    acc * z
                }
                ScalarField::Linear { a, c } => 0.5 * a.z * z * z + c * z,
            }
        };
        if !self.is_zonal() {
            return None;
        }
        Some(prim(hi) - prim(lo))
    }

    /// Multiply every value by `s`.
    pub fn scaled(&self, s: f64) -> ScalarField {
        match self {
            ScalarField::Constant(c) => ScalarField::Constant(c * s),
            ScalarField::Height { a, c } => ScalarField::Height { a: a * s, c: c * s },
            ScalarField::ZonalPoly(k) => ScalarField::ZonalPoly(k.iter().map(|c| c * s).collect()),
            ScalarField::Linear { a, c } => ScalarField::Linear { a: *a * s, c: c * s },
        }
    }
}

fn horner(k: &[f64], z: f64) -> f64 {
    k.iter().rev().fold(0.0, |acc, c| acc * z + c)
}

fn horner_derivative(k: &[f64], z: f64) -> f64 {
    let mut acc = 0.0;
    for (i, c) in k.iter().enumerate().skip(1).rev() {
        acc = acc * z + c * i as f64;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zonal_poly_matches_height() {
        let h = ScalarField::Height { a: 1.0, c: 0.2 };
        let p = ScalarField::ZonalPoly(vec![0.2, 1.0]);
        let q = Vec3::new(0.6, 0.0, 0.8);
        assert_eq!(h.value(q), p.value(q));
        assert_eq!(h.gradient(q), p.gradient(q));
        assert!((h.zonal_integral(-1.0, 0.0).unwrap() - p.zonal_integral(-1.0, 0.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn zonal_integral_of_z_over_lower_half() {
        let f = ScalarField::Height { a: 1.0, c: 0.0 };
        assert!((f.zonal_integral(-1.0, 0.0).unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn poly_derivative() {
        let p = ScalarField::ZonalPoly(vec![1.0, 2.0, 3.0]);
        // 2 + 6z at z = 0.5
        assert!((p.gradient(Vec3::new(0.0, 0.0, 0.5)).z - 5.0).abs() < 1e-15);
    }
}
