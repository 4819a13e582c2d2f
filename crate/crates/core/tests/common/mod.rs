#![allow(dead_code)]

use core::f64::consts::PI;

use magflow_core::loop_space::{lift, FreePeriodLoop, LiftedLoop};
use magflow_core::sphere_geom::Metric;
use magflow_core::vec3::tangent_basis;
use magflow_core::{Lagrangian, MagneticSystem, ScalarField, TwoForm, Vec3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn kinetic_system(f: ScalarField, sweep_depth: u32) -> MagneticSystem {
    let sigma = TwoForm::new(f, Metric::Round);
    let l = Lagrangian::kinetic(Metric::Round, ScalarField::zero());
    let mut sys = MagneticSystem::new(sigma, l).unwrap();
    sys.sweep_depth = sweep_depth;
    sys
}

pub fn height(c: f64) -> ScalarField {
    ScalarField::Height { a: 1.0, c }
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Smooth random loop: a circle about a random axis with three random
/// Fourier modes in its radius and a random period.
pub fn random_loop(rng: &mut ChaCha8Rng, n: usize) -> FreePeriodLoop {
    let axis = random_unit(rng);
    let (u, w) = tangent_basis(axis);
    let r0 = rng.gen_range(0.3..1.3);
    let modes: Vec<(f64, f64)> = (0..3).map(|_| (rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08))).collect();
    let phase = rng.gen_range(0.0..2.0 * PI);
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let nodes = (0..n)
        .map(|j| {
            let phi = sign * 2.0 * PI * j as f64 / n as f64 + phase;
            let r = r0
                + modes
                    .iter()
                    .enumerate()
                    .map(|(k, (a, b))| a * libm::cos((k + 1) as f64 * phi) + b * libm::sin((k + 1) as f64 * phi))
                    .sum::<f64>();
            axis * libm::cos(r) + (u * libm::cos(phi) + w * libm::sin(phi)) * libm::sin(r)
        })
        .collect();
    FreePeriodLoop::new(nodes, rng.gen_range(2.0..20.0)).unwrap()
}

pub fn random_lifted(sys: &MagneticSystem, rng: &mut ChaCha8Rng, n: usize) -> LiftedLoop {
    lift(sys, random_loop(rng, n)).unwrap()
}
