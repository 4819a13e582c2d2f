mod common;

use common::*;
use magflow_core::loop_space::{action_gradient, deform, lifted_action_a, FreePeriodLoop, LiftedLoop};
use magflow_core::vec3::tangent_basis;
use magflow_core::MagneticSystem;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central differences of the lifted action, with flux updated by sweeps.
fn fd_gradient(sys: &MagneticSystem, e: f64, ll: &LiftedLoop, h: f64) -> (Vec<[f64; 2]>, f64) {
    let nodes = ll.fpl.nodes().to_vec();
    let p = ll.fpl.period();
    let eval = |nodes: Vec<magflow_core::Vec3>, p: f64| {
        let moved = FreePeriodLoop::new(nodes, p).unwrap();
        lifted_action_a(sys, e, &deform(sys, ll, moved).unwrap())
    };
    let mut out = Vec::with_capacity(nodes.len());
    for i in 0..nodes.len() {
        let (e1, e2) = tangent_basis(nodes[i]);
        let mut comp = [0.0; 2];
        for (k, dir) in [e1, e2].into_iter().enumerate() {
            let mut plus = nodes.clone();
            plus[i] = (nodes[i] + dir * h).normalized();
            let mut minus = nodes.clone();
            minus[i] = (nodes[i] - dir * h).normalized();
            comp[k] = (eval(plus, p) - eval(minus, p)) / (2.0 * h);
        }
        out.push(comp);
    }
    let dp = (eval(nodes.clone(), p + h) - eval(nodes, p - h)) / (2.0 * h);
    (out, dp)
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [32, 64, 128] {
        let sys = kinetic_system(height(0.2), 6);
        for _ in 0..3 {
            let ll = random_lifted(&sys, &mut rng, n);
            let g = action_gradient(&sys, 0.02, &ll);
            let (fd, dp) = fd_gradient(&sys, 0.02, &ll, 1e-6);
            let mut err = (g.p_grad - dp).powi(2);
            let mut norm = g.p_grad.powi(2);
            for (i, c) in fd.iter().enumerate() {
                let (e1, e2) = tangent_basis(ll.fpl.nodes()[i]);
                let an = [g.differential[i].dot(e1), g.differential[i].dot(e2)];
                err += (an[0] - c[0]).powi(2) + (an[1] - c[1]).powi(2);
                norm += an[0].powi(2) + an[1].powi(2);
            }
            let rel = (err / norm).sqrt();
            assert!(rel < 1e-5, "N = {n}: relative error {rel:e}");
        }
    }
}
