mod common;

use common::*;
use magflow_core::critical_values::{compute_e0, e1_lower_bound_general};
use magflow_core::flow::{integrate, State};
use magflow_core::loop_space::{
    action_gradient, deck_transform, deform, iterate, lift_with_apex, lifted_action_a, FreePeriodLoop, LiftedLoop,
};
use magflow_core::sphere_geom::{integrate_two_form_triangle, project_to_sphere, two_form_eval};
use magflow_core::tonelli::e0;
use magflow_core::variational::SolverConfig;
use magflow_core::vec3::tangent_basis;
use magflow_core::{
    Drift, Lagrangian, LagrangianKind, MagneticSystem, Metric, ScalarField, SpherePoint, SphericalTriangle,
    TangentVector, TwoForm, Vec3,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn wavy_metric() -> Metric {
    Metric::Conformal(ScalarField::Linear { a: Vec3::new(0.2, -0.1, 0.3), c: 0.05 })
}

fn random_tangent(rng: &mut ChaCha8Rng, q: Vec3, scale: f64) -> Vec3 {
    let (e1, e2) = tangent_basis(q);
    e1 * rng.gen_range(-scale..scale) + e2 * rng.gen_range(-scale..scale)
}

fn general_lagrangian() -> Lagrangian {
    Lagrangian::kinetic(wavy_metric(), ScalarField::Height { a: 0.3, c: 0.1 })
        .with_drift(Drift::Rotation(0.2))
        .with_kind(LagrangianKind::FiberPolynomial(vec![0.0, 0.5, 0.05]))
        .with_default_extension(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_lands_on_the_sphere(x in -5.0f64..5.0, y in -5.0f64..5.0, z in -5.0f64..5.0) {
        let v = Vec3::new(x, y, z);
        prop_assume!(v.norm() > 1e-6);
        let p = project_to_sphere(v).unwrap();
        prop_assert!((p.vec().norm() - 1.0).abs() <= 1e-12);
        let t = TangentVector::new(p, Vec3::new(y, z, x));
        prop_assert!(t.v.dot(p.vec()).abs() <= 1e-12);
    }

    #[test]
    fn two_form_is_antisymmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let sigma = TwoForm::new(ScalarField::Linear { a: Vec3::new(0.3, -1.0, 0.5), c: 0.2 }, wavy_metric());
        for _ in 0..1000 {
            let q = random_unit(&mut r);
            let (v, w) = (random_tangent(&mut r, q, 2.0), random_tangent(&mut r, q, 2.0));
            let q = project_to_sphere(q).unwrap();
            prop_assert_eq!(two_form_eval(&sigma, q, v, w), -two_form_eval(&sigma, q, w, v));
        }
    }

    #[test]
    fn metric_is_positive(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = wavy_metric();
        for _ in 0..100 {
            let q = random_unit(&mut r);
            let v = random_tangent(&mut r, q, 1.0);
            prop_assume!(v.norm() > 1e-9);
            prop_assert!(m.norm_sq(q, v) > 0.0);
        }
    }

    #[test]
    fn triangle_flux_is_additive(seed in any::<u64>(), depth in 0u32..4) {
        let mut r = rng(seed);
        let sigma = TwoForm::new(ScalarField::Height { a: 1.0, c: 0.2 }, Metric::Round);
        let a = random_unit(&mut r);
        let b = (a + random_tangent(&mut r, a, 0.8)).normalized();
        let c = (a + random_tangent(&mut r, a, 0.8)).normalized();
        let sp = |x: Vec3| SpherePoint::new_unchecked(x);
        let tri = SphericalTriangle::new(sp(a), sp(b), sp(c)).unwrap();
        let (ab, bc, ca) = ((a + b).normalized(), (b + c).normalized(), (c + a).normalized());
        let kids = [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)];
        let sum: f64 = kids
            .iter()
            .map(|&(x, y, z)| integrate_two_form_triangle(&sigma, &SphericalTriangle::new(sp(x), sp(y), sp(z)).unwrap(), depth))
            .sum();
        let whole = integrate_two_form_triangle(&sigma, &tri, depth + 1);
        prop_assert!((whole - sum).abs() <= 1e-12, "{} vs {}", whole, sum);
    }

    #[test]
    fn electromagnetic_energy_cancels(seed in any::<u64>()) {
        let mut r = rng(seed);
        let u = ScalarField::Height { a: 0.3, c: 0.1 };
        let l = Lagrangian::kinetic(wavy_metric(), u.clone()).with_drift(Drift::Rotation(0.4));
        for _ in 0..1000 {
            let q = random_unit(&mut r);
            let v = random_tangent(&mut r, q, 3.0);
            let expect = 0.5 * l.metric.norm_sq(q, v) + u.value(q);
            prop_assert!((l.energy(q, v) - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn legendre_is_the_fiber_derivative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = general_lagrangian();
        for _ in 0..50 {
            let q = random_unit(&mut r);
            let v = random_tangent(&mut r, q, 4.0);
            let w = random_tangent(&mut r, q, 1.0);
            let h = 1e-3;
            // the stencil must not straddle the extension radius, where the
            // second derivative jumps
            if (l.metric.norm_sq(q, v).sqrt() - l.extension_radius).abs() < 0.01 {
                continue;
            }
            let at = |t: f64| l.eval(q, v + w * t);
            let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            let an = l.metric.inner(q, l.legendre(q, v), w);
            prop_assert!((an - fd).abs() <= 1e-6 * an.abs().max(1e-3), "{} vs {}", an, fd);
        }
    }

    #[test]
    fn fiber_is_convex(seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = general_lagrangian();
        for _ in 0..200 {
            let q = random_unit(&mut r);
            let v = random_tangent(&mut r, q, 2.0 * l.extension_radius);
            let w = random_tangent(&mut r, q, 1.0);
            prop_assume!(w.norm() > 1e-3);
            let h = 1e-3;
            let second = l.eval(q, v + w * h) - 2.0 * l.eval(q, v) + l.eval(q, v - w * h);
            prop_assert!(second > 0.0, "{}", second);
        }
    }

    #[test]
    fn extension_is_c1_at_the_radius(seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = general_lagrangian();
        let q = random_unit(&mut r);
        let dir = random_tangent(&mut r, q, 1.0).normalized();
        let at = dir * (l.extension_radius / l.metric.factor(q).sqrt());
        // a jump would show at O(1); smooth variation across 2 eps is O(1e-10)
        let eps = 1e-12;
        let (inside, outside) = (at * (1.0 - eps), at * (1.0 + eps));
        prop_assert!((l.eval(q, inside) - l.eval(q, outside)).abs() <= 1e-8);
        prop_assert!((l.dv(q, inside) - l.dv(q, outside)).norm() <= 1e-8);
    }

    #[test]
    fn e0_bounds_rest_energies(seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = general_lagrangian();
        let bound = e0(&l, 5);
        for _ in 0..10_000 {
            let q = random_unit(&mut r);
            prop_assert!(l.energy(q, Vec3::ZERO) <= bound + 1e-9);
        }
    }

    #[test]
    fn fiber_bounds_are_ordered(c in -0.5f64..0.5, drift in -0.5f64..0.5) {
        let l = general_lagrangian().with_drift(Drift::Rotation(drift));
        let sys = MagneticSystem::new(TwoForm::new(ScalarField::Height { a: 1.0, c }, wavy_metric()), l).unwrap();
        let b = sys.fiber_bounds();
        prop_assert!(0.0 < b.h1 && b.h1 < b.h2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn flow_stays_on_the_unit_tangent_bundle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let sys = kinetic_system(height(0.2), 3);
        let q = random_unit(&mut r);
        let traj = integrate(&sys, State::new(q, random_tangent(&mut r, q, 0.5)), 5.0, 1e-2).unwrap();
        let h = traj.times[1] - traj.times[0];
        for w in traj.times.windows(2) {
            prop_assert!(w[1] > w[0] && ((w[1] - w[0]) - h).abs() <= 1e-12);
        }
        for s in &traj.states {
            prop_assert!((s.q.norm() - 1.0).abs() <= 1e-12);
            prop_assert!(s.q.dot(s.v).abs() <= 1e-12);
        }
    }

    #[test]
    fn flipping_the_field_reverses_time(seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = ScalarField::Linear { a: Vec3::new(0.3, 0.1, 1.0), c: 0.2 };
        let fwd = kinetic_system(f.clone(), 3);
        let bwd = kinetic_system(f.scaled(-1.0), 3);
        let q = random_unit(&mut r);
        let s0 = State::new(q, random_tangent(&mut r, q, 0.5));
        let end = *integrate(&fwd, s0, 3.0, 1e-3).unwrap().last();
        let back = *integrate(&bwd, State::new(end.q, -end.v), 3.0, 1e-3).unwrap().last();
        prop_assert!((back.q - s0.q).norm() <= 1e-8 && (back.v + s0.v).norm() <= 1e-8);
    }

    #[test]
    fn lifts_differ_by_whole_fluxes(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut sys = kinetic_system(height(0.2), 3);
        sys.cone_depth = 7;
        let fpl = random_loop(&mut r, 48);
        // keep the apex and its antipode away from the nodes, as lifts do
        let mut apex = || loop {
            let c = random_unit(&mut r);
            if fpl.nodes().iter().all(|x| x.dot(c).abs() < 0.95) {
                break c;
            }
        };
        let (ca, cb) = (apex(), apex());
        let a = lift_with_apex(&sys, fpl.clone(), ca).unwrap();
        let b = lift_with_apex(&sys, fpl, cb).unwrap();
        let k = (a.flux - b.flux) / sys.total_flux();
        prop_assert!((k - k.round()).abs() * sys.total_flux() <= 1e-4, "{}", k);
    }

    #[test]
    fn closed_deformation_returns_the_flux(seed in any::<u64>()) {
        let mut r = rng(seed);
        let sys = kinetic_system(height(0.2), 3);
        let start = random_lifted(&sys, &mut r, 32);
        let mut cur = start.clone();
        let wobble: Vec<FreePeriodLoop> = (0..4)
            .map(|_| {
                let nodes = start.fpl.nodes().iter().map(|x| (*x + random_tangent(&mut r, *x, 0.1)).normalized()).collect();
                FreePeriodLoop::new(nodes, start.fpl.period()).unwrap()
            })
            .collect();
        for w in wobble.into_iter().chain([start.fpl.clone()]) {
            cur = deform(&sys, &cur, w).unwrap();
        }
        prop_assert!((cur.flux - start.flux).abs() <= 1e-4);
    }

    #[test]
    fn ledger_identities(seed in any::<u64>(), k in -3i64..=3) {
        let mut r = rng(seed);
        let sys = kinetic_system(height(0.2), 3);
        let u = random_lifted(&sys, &mut r, 40);
        let a = lifted_action_a(&sys, 0.02, &u);
        let shifted = lifted_action_a(&sys, 0.02, &deck_transform(&sys, &u, k));
        prop_assert!((shifted - a - k as f64 * sys.total_flux()).abs() <= 1e-12 * (1.0 + a.abs()));
        for m in [2usize, 3, 5] {
            let am = lifted_action_a(&sys, 0.02, &iterate(&u, m).unwrap());
            prop_assert!(((am - m as f64 * a) / (m as f64 * a)).abs() <= 1e-9);
        }
    }

    #[test]
    fn gradient_is_tangent(seed in any::<u64>()) {
        let mut r = rng(seed);
        let sys = kinetic_system(height(0.2), 3);
        let u: LiftedLoop = random_lifted(&sys, &mut r, 64);
        let g = action_gradient(&sys, 0.02, &u);
        for (x, d) in u.fpl.nodes().iter().zip(&g.node_grads) {
            prop_assert!(x.dot(*d).abs() <= 1e-12 * (1.0 + d.norm()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn general_e1_bound_dominates_e0(c in -0.3f64..0.3) {
        let sys = kinetic_system(ScalarField::Linear { a: Vec3::new(0.2, 0.0, 1.0), c }, 3);
        let e0 = compute_e0(&sys);
        let cfg = SolverConfig { loop_nodes: 32, certify: false, ..SolverConfig::default() };
        if let Ok(cert) = e1_lower_bound_general(&sys, &[0.02, 0.04], &cfg) {
            prop_assert!(cert.energy >= e0);
            prop_assert!(cert.action_value < 0.0);
            prop_assert!((lifted_action_a(&sys, cert.energy, &cert.witness) - cert.action_value).abs() <= 1e-8);
        }
    }
}
