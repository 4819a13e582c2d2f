//! Time integration of the magnetic Euler-Lagrange flow and certification of
//! candidate periodic orbits.

use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::loop_space::{action_gradient, FreePeriodLoop, LiftedLoop};
use crate::system::MagneticSystem;
use crate::vec3::{angle_between, tangent_basis, Vec3};

/// Position on the sphere and tangent velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct State {
    pub q: Vec3,
    pub v: Vec3,
}

impl State {
    pub fn new(q: Vec3, v: Vec3) -> Self {
        let q = q.normalized();
        State { q, v: v.reject(q) }
    }

    fn project(self) -> Self {
        State::new(self.q, self.v)
    }

    /// Euclidean distance in `R^3 x R^3`.
    pub fn distance(&self, o: &State) -> f64 {
        libm::sqrt((self.q - o.q).norm_sq() + (self.v - o.v).norm_sq())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub energy_series: Vec<f64>,
}

impl Trajectory {
    pub fn last(&self) -> &State {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Certification record of a candidate periodic orbit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrbitReport {
    /// Gradient norm of the discrete action at the loop the orbit came from.
    pub gradient_norm: f64,
    /// Mean energy along the loop minus the target energy.
    pub mean_energy_residual: f64,
    /// Distance between initial and final state after one period.
    pub closure_residual: f64,
    pub self_intersections: usize,
}

/// Thresholds for calling an orbit certified.
pub const CLOSURE_TOL: f64 = 1e-4;
pub const ENERGY_TOL: f64 = 1e-5;

impl OrbitReport {
    pub fn is_certified(&self) -> bool {
        self.closure_residual <= CLOSURE_TOL && self.mean_energy_residual.abs() <= ENERGY_TOL
    }
}

/// Right-hand side `(dq, dv)` of the Euler-Lagrange equations of
/// `L = g(v, v)/2 - U + lambda(v)` twisted by `sigma`.
pub fn magnetic_el_field(sys: &MagneticSystem, s: &State) -> Result<(Vec3, Vec3)> {
    if !sys.lagrangian.is_electromagnetic() {
        return Err(Error::UnsupportedLagrangian);
    }
    Ok(el_field(sys, s.q, s.v))
}

#[inline]
fn el_field(sys: &MagneticSystem, q: Vec3, v: Vec3) -> (Vec3, Vec3) {
    let metric = sys.metric();
    let l = &sys.lagrangian;
    let phi = metric.factor(q);
    let dphi = metric.factor_gradient(q);
    let f = sys.sigma.density.value(q);
    let vv = v.norm_sq();
    let mut force = v.cross(q) * (f * phi) - v * dphi.dot(v) + dphi * (0.5 * vv) - l.potential.gradient(q);
    if let crate::tonelli::Drift::Rotation(c) = l.drift {
        force -= Vec3::Z.cross(v) * (2.0 * c);
    }
    let dv = force.reject(q) / phi - q * vv;
    (v, dv)
}

#[inline]
fn rk4_step(sys: &MagneticSystem, s: State, h: f64) -> State {
    let (k1q, k1v) = el_field(sys, s.q, s.v);
    let (k2q, k2v) = el_field(sys, s.q + k1q * (0.5 * h), s.v + k1v * (0.5 * h));
    let (k3q, k3v) = el_field(sys, s.q + k2q * (0.5 * h), s.v + k2v * (0.5 * h));
    let (k4q, k4v) = el_field(sys, s.q + k3q * h, s.v + k3v * h);
    State {
        q: s.q + (k1q + (k2q + k3q) * 2.0 + k4q) * (h / 6.0),
        v: s.v + (k1v + (k2v + k3v) * 2.0 + k4v) * (h / 6.0),
    }
    .project()
}

fn energy_of(sys: &MagneticSystem, s: &State) -> f64 {
    sys.lagrangian.energy(s.q, s.v)
}

/// Advances `s0` by `steps` RK4 steps of size `h` without recording.
pub(crate) fn propagate(sys: &MagneticSystem, s0: State, h: f64, steps: usize) -> Result<State> {
    let mut s = s0.project();
    for k in 0..steps {
        s = rk4_step(sys, s, h);
        if !(s.v.norm() < 1e6) {
            return Err(Error::StepExplosion(h * (k + 1) as f64));
        }
    }
    Ok(s)
}

/// Classical RK4 with projection back to the tangent bundle after every step.
/// The step is shrunk so that a whole number of steps covers `[0, t]`.
pub fn integrate(sys: &MagneticSystem, s0: State, t: f64, h: f64) -> Result<Trajectory> {
    if !sys.lagrangian.is_electromagnetic() {
        return Err(Error::UnsupportedLagrangian);
    }
    if !(t > 0.0 && h > 0.0 && h <= t && h <= 0.1) {
        return Err(Error::InvalidArgument(alloc::format!("need 0 < h <= min(T, 0.1), got h = {h}, T = {t}")));
    }
    let steps = libm::ceil(t / h - 1e-9) as usize;
    let h = t / steps as f64;
    let mut s = s0.project();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut energies = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(s);
    energies.push(energy_of(sys, &s));
    for k in 1..=steps {
        s = rk4_step(sys, s, h);
        if !(s.v.norm() < 1e6) {
            return Err(Error::StepExplosion(h * k as f64));
        }
        times.push(h * k as f64);
        states.push(s);
        energies.push(energy_of(sys, &s));
    }
    Ok(Trajectory { times, states, energy_series: energies })
}

/// `max_t |E_t - E_0| / max(1, |E_0|)`.
pub fn energy_drift(traj: &Trajectory) -> f64 {
    let e0 = traj.energy_series[0];
    let dev = traj.energy_series.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max);
    dev / e0.abs().max(1.0)
}

/// Derivative in normalized time at node `i` of the trigonometric
/// interpolant through the nodes.
pub fn spectral_velocity(fpl: &FreePeriodLoop, i: usize) -> Vec3 {
    let n = fpl.len();
    let even = n % 2 == 0;
    let mut acc = Vec3::ZERO;
    for j in 1..n {
        let x = PI * j as f64 / n as f64;
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let w = if even { libm::cos(x) / libm::sin(x) } else { 1.0 / libm::sin(x) };
        acc += fpl.node(i + j) * (-PI * sign * w);
    }
    acc.reject(fpl.nodes()[i])
}

/// Initial state of a candidate loop: node 0 and its velocity over the period.
pub fn initial_state(fpl: &FreePeriodLoop) -> State {
    State::new(fpl.nodes()[0], spectral_velocity(fpl, 0) / fpl.period())
}

/// Counts transverse crossings between non-adjacent arcs of the polygon,
/// plus pairs passing within `1e-6` rad of each other.
pub fn self_intersections(fpl: &FreePeriodLoop) -> usize {
    let n = fpl.len();
    let arcs: Vec<(Vec3, Vec3)> = (0..n).map(|i| (fpl.nodes()[i], fpl.node(i + 1))).collect();
    let mut count = 0;
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (a, b) = arcs[i];
            let (c, d) = arcs[j];
            if arcs_cross(a, b, c, d) || arc_distance(a, b, c, d) < 1e-6 {
                count += 1;
            }
        }
    }
    count
}

fn on_arc(a: Vec3, b: Vec3, n: Vec3, x: Vec3) -> bool {
    a.cross(x).dot(n) >= 0.0 && x.cross(b).dot(n) >= 0.0
}

fn arcs_cross(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> bool {
    let n1 = a.cross(b);
    let n2 = c.cross(d);
    let line = n1.cross(n2);
    if n1.norm_sq() < 1e-30 || n2.norm_sq() < 1e-30 || line.norm_sq() < 1e-30 {
        return false;
    }
    let x = line.normalized();
    [x, -x].into_iter().any(|x| on_arc(a, b, n1, x) && on_arc(c, d, n2, x))
}

fn point_arc_distance(x: Vec3, a: Vec3, b: Vec3) -> f64 {
    let n = a.cross(b);
    let nn = n.norm();
    let ends = angle_between(x, a).min(angle_between(x, b));
    if nn < 1e-15 {
        return ends;
    }
    let nh = n / nn;
    let proj = x.reject(nh);
    if proj.norm() < 1e-15 {
        return ends;
    }
    let p = proj.normalized();
    if on_arc(a, b, n, p) {
        libm::asin(x.dot(nh).abs().min(1.0))
    } else {
        ends
    }
}

fn arc_distance(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> f64 {
    point_arc_distance(a, c, d)
        .min(point_arc_distance(b, c, d))
        .min(point_arc_distance(c, a, b))
        .min(point_arc_distance(d, a, b))
}

/// Integrates one period from the candidate's initial state and measures how
/// far it is from a periodic orbit of energy `e`.
pub fn certify_orbit(sys: &MagneticSystem, e: f64, candidate: &FreePeriodLoop, h: f64) -> Result<OrbitReport> {
    if !sys.lagrangian.is_electromagnetic() {
        return Err(Error::UnsupportedLagrangian);
    }
    let p = candidate.period();
    let s0 = initial_state(candidate);
    let steps = libm::ceil(p / h - 1e-9).max(1.0) as usize;
    let end = propagate(sys, s0, p / steps as f64, steps)?;
    let n = candidate.len();
    let mean_e = (0..n)
        .map(|i| sys.lagrangian.energy(candidate.nodes()[i], spectral_velocity(candidate, i) / p))
        .sum::<f64>()
        / n as f64;
    let grad = action_gradient(sys, e, &LiftedLoop::new(candidate.clone(), 0.0));
    Ok(OrbitReport {
        gradient_norm: grad.norm(),
        mean_energy_residual: mean_e - e,
        closure_residual: end.distance(&s0),
        self_intersections: self_intersections(candidate),
    })
}

/// Samples the orbit through `s0` at `n` uniform times over `[0, t)`.
pub fn sample_orbit(sys: &MagneticSystem, s0: State, t: f64, n: usize, h: f64) -> Result<FreePeriodLoop> {
    let sub = libm::ceil(t / (n as f64 * h) - 1e-9).max(1.0) as usize;
    let dt = t / (n * sub) as f64;
    let mut nodes = Vec::with_capacity(n);
    let mut s = s0.project();
    for _ in 0..n {
        nodes.push(s.q);
        s = propagate(sys, s, dt, sub)?;
    }
    FreePeriodLoop::new(nodes, t)
}

/// Segments used by multiple shooting.
const SEGMENTS: usize = 16;

/// Multiple-shooting problem: `SEGMENTS` states on the candidate, each
/// moved in its own tangent chart, plus the period.
struct Shooting<'a> {
    sys: &'a MagneticSystem,
    e: f64,
    /// Reference states and their tangent bases.
    base: Vec<(State, (Vec3, Vec3))>,
    t0: f64,
    /// Samples per segment and RK4 steps per sample.
    samples: usize,
    sub: usize,
}

impl Shooting<'_> {
    fn dim(&self) -> usize {
        4 * SEGMENTS + 1
    }

    fn state(&self, x: &DVector<f64>, k: usize) -> State {
        let (s, (e1, e2)) = self.base[k];
        let o = 4 * k;
        let q = (s.q + e1 * x[o] + e2 * x[o + 1]).normalized();
        State::new(q, s.v + e1 * x[o + 2] + e2 * x[o + 3])
    }

    fn dt(&self, x: &DVector<f64>) -> f64 {
        x[4 * SEGMENTS] / (SEGMENTS * self.samples * self.sub) as f64
    }

    fn segment_end(&self, x: &DVector<f64>, k: usize) -> Result<State> {
        propagate(self.sys, self.state(x, k), self.dt(x), self.samples * self.sub)
    }

    /// Nearly degenerate orbit families make the problem ill conditioned, so
    /// corrections stay close to the candidate.
    fn within_trust(&self, x: &DVector<f64>) -> bool {
        (0..SEGMENTS).all(|k| {
            let vn = self.base[k].0.v.norm().max(1e-12);
            let o = 4 * k;
            libm::hypot(x[o], x[o + 1]) <= 1e-2 && libm::hypot(x[o + 2], x[o + 3]) <= 1e-2 * vn
        }) && (x[4 * SEGMENTS] - self.t0).abs() <= 1e-2 * self.t0
    }

    fn block(&self, x: &DVector<f64>, k: usize, end: State) -> [f64; 6] {
        let next = self.state(x, (k + 1) % SEGMENTS);
        let dq = end.q - next.q;
        let dv = end.v - next.v;
        [dq.x, dq.y, dq.z, dv.x, dv.y, dv.z]
    }

    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if !(x[4 * SEGMENTS] > 0.0) {
            return Err(Error::RefinementFailed(f64::INFINITY));
        }
        let mut r = DVector::zeros(6 * SEGMENTS + 2);
        for k in 0..SEGMENTS {
            let end = self.segment_end(x, k)?;
            for (j, v) in self.block(x, k, end).into_iter().enumerate() {
                r[6 * k + j] = v;
            }
        }
        let s0 = self.state(x, 0);
        let (b0, _) = self.base[0];
        r[6 * SEGMENTS] = self.sys.lagrangian.energy(s0.q, s0.v) - self.e;
        r[6 * SEGMENTS + 1] = (s0.q - b0.q).dot(b0.v) / b0.v.norm().max(1e-12);
        Ok(r)
    }

    /// Jacobian by central differences, exploiting that a segment's chart
    /// only enters its own block and the previous one.
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let dim = self.dim();
        let mut jac = DMatrix::zeros(6 * SEGMENTS + 2, dim);
        for col in 0..4 * SEGMENTS {
            let k = col / 4;
            let step = 1e-7;
            let mut xp = x.clone();
            xp[col] += step;
            let mut xm = x.clone();
            xm[col] -= step;
            let (ep, em) = (self.segment_end(&xp, k)?, self.segment_end(&xm, k)?);
            let (bp, bm) = (self.block(&xp, k, ep), self.block(&xm, k, em));
            let prev = (k + SEGMENTS - 1) % SEGMENTS;
            let (pp, pm) = (self.state(&xp, k), self.state(&xm, k));
            for j in 0..6 {
                jac[(6 * k + j, col)] += (bp[j] - bm[j]) / (2.0 * step);
            }
            let d = [pp.q - pm.q, pp.v - pm.v];
            for j in 0..3 {
                jac[(6 * prev + j, col)] -= d[0].to_array()[j] / (2.0 * step);
                jac[(6 * prev + 3 + j, col)] -= d[1].to_array()[j] / (2.0 * step);
            }
            if k == 0 {
                let (b0, _) = self.base[0];
                let vn = b0.v.norm().max(1e-12);
                jac[(6 * SEGMENTS, col)] = (self.sys.lagrangian.energy(pp.q, pp.v)
                    - self.sys.lagrangian.energy(pm.q, pm.v))
                    / (2.0 * step);
                jac[(6 * SEGMENTS + 1, col)] = (pp.q - pm.q).dot(b0.v) / vn / (2.0 * step);
            }
        }
        let tc = 4 * SEGMENTS;
        let step = 1e-7 * x[tc].abs().max(1.0);
        let mut xp = x.clone();
        xp[tc] += step;
        let mut xm = x.clone();
        xm[tc] -= step;
        for k in 0..SEGMENTS {
            let (ep, em) = (self.segment_end(&xp, k)?, self.segment_end(&xm, k)?);
            let (bp, bm) = (self.block(&xp, k, ep), self.block(&xm, k, em));
            for j in 0..6 {
                jac[(6 * k + j, tc)] = (bp[j] - bm[j]) / (2.0 * step);
            }
        }
        Ok(jac)
    }

    fn sample(&self, x: &DVector<f64>) -> Result<FreePeriodLoop> {
        let dt = self.dt(x);
        let mut nodes = Vec::with_capacity(SEGMENTS * self.samples);
        for k in 0..SEGMENTS {
            let mut s = self.state(x, k);
            for _ in 0..self.samples {
                nodes.push(s.q);
                s = propagate(self.sys, s, dt, self.sub)?;
            }
        }
        FreePeriodLoop::new(nodes, x[4 * SEGMENTS])
    }
}

/// Refines a candidate into a periodic orbit of energy `e` by
/// Levenberg-Marquardt multiple shooting over 16 segments, then samples it
/// at `max(N, 256)` uniform times, rounded up to a multiple of 16.
pub fn refine_orbit(sys: &MagneticSystem, e: f64, candidate: &FreePeriodLoop, h: f64) -> Result<FreePeriodLoop> {
    if !sys.lagrangian.is_electromagnetic() {
        return Err(Error::UnsupportedLagrangian);
    }
    let n = candidate.len();
    let p = candidate.period();
    let even = n.div_ceil(SEGMENTS) * SEGMENTS;
    let c = if even == n { candidate.clone() } else { candidate.resample(even)? };
    let base = (0..SEGMENTS)
        .map(|k| {
            let i = k * even / SEGMENTS;
            let s = State::new(c.nodes()[i], spectral_velocity(&c, i) / p);
            (s, tangent_basis(s.q))
        })
        .collect();
    let total = n.max(256).div_ceil(SEGMENTS) * SEGMENTS;
    let samples = total / SEGMENTS;
    let sub = libm::ceil(p / (total as f64 * h) - 1e-9).max(1.0) as usize;
    let sh = Shooting { sys, e, base, t0: p, samples, sub };
    let mut x = DVector::zeros(sh.dim());
    x[4 * SEGMENTS] = p;
    let mut r = sh.residual(&x)?;
    let mut cost = r.norm_squared();
    let mut mu = 1e-6;
    for _ in 0..60 {
        if libm::sqrt(cost) < 1e-12 {
            break;
        }
        let jac = sh.jacobian(&x)?;
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * &r;
        let mut improved = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += mu * (1.0 + jtj[(k, k)]);
            }
            let Some(chol) = a.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let xn = &x + chol.solve(&(-&g));
            if !sh.within_trust(&xn) {
                mu *= 10.0;
                continue;
            }
            if let Ok(rn) = sh.residual(&xn) {
                let cn = rn.norm_squared();
                if cn < cost {
                    x = xn;
                    r = rn;
                    cost = cn;
                    mu = (mu * 0.3).max(1e-12);
                    improved = true;
                    break;
                }
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let res = libm::sqrt(cost);
    if !(res < 1e-7) {
        return Err(Error::RefinementFailed(res));
    }
    sh.sample(&x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ScalarField;
    use crate::sphere_geom::{Metric, TwoForm};
    use crate::tonelli::{Drift, Lagrangian};

    fn system(f: ScalarField) -> MagneticSystem {
        MagneticSystem::new(TwoForm::new(f, Metric::Round), Lagrangian::kinetic(Metric::Round, ScalarField::zero()))
            .unwrap()
    }

    #[test]
    fn field_examples() {
        let geo = system(ScalarField::zero());
        let s = State::new(Vec3::X, Vec3::Y * 2.0);
        let (dq, dv) = magnetic_el_field(&geo, &s).unwrap();
        assert_eq!(dq, s.v);
        assert!((dv + Vec3::X * 4.0).norm() < 1e-15);
        let one = system(ScalarField::Constant(1.0));
        let (_, dv) = magnetic_el_field(&one, &State::new(Vec3::X, Vec3::Y)).unwrap();
        // Lorentz term v x q, plus the centripetal term -|v|^2 q
        assert!((dv - (Vec3::Y.cross(Vec3::X) - Vec3::X)).norm() < 1e-15);
        let (_, dv) = magnetic_el_field(&one, &State::new(Vec3::X, Vec3::ZERO)).unwrap();
        assert_eq!(dv, Vec3::ZERO);
    }

    #[test]
    fn drift_acts_like_its_curl() {
        let l = Lagrangian::kinetic(Metric::Round, ScalarField::zero()).with_drift(Drift::Rotation(0.4));
        let a = MagneticSystem::new(TwoForm::default(), l).unwrap();
        let b = system(ScalarField::Height { a: 0.8, c: 0.0 });
        let s = State::new(Vec3::new(0.3, -0.2, 0.9), Vec3::new(0.5, 0.1, 0.0));
        let (_, da) = magnetic_el_field(&a, &s).unwrap();
        let (_, db) = magnetic_el_field(&b, &s).unwrap();
        assert!((da - db).norm() < 1e-14);
    }

    #[test]
    fn custom_kind_is_unsupported() {
        let l = Lagrangian::kinetic(Metric::Round, ScalarField::zero())
            .with_kind(crate::tonelli::LagrangianKind::FiberPolynomial(vec![0.0, 0.5, 0.1]));
        let sys = MagneticSystem::new(TwoForm::default(), l).unwrap();
        let s = State::new(Vec3::X, Vec3::Y);
        assert_eq!(magnetic_el_field(&sys, &s), Err(Error::UnsupportedLagrangian));
    }

    #[test]
    fn great_circle_closes() {
        let sys = system(ScalarField::zero());
        let s0 = State::new(Vec3::X, Vec3::Y);
        let tr = integrate(&sys, s0, 2.0 * PI, 1e-3).unwrap();
        assert!(tr.last().distance(&s0) < 1e-7);
    }

    #[test]
    fn rest_point_stays() {
        let sys = system(ScalarField::Constant(1.0));
        let s0 = State::new(Vec3::Z, Vec3::ZERO);
        let tr = integrate(&sys, s0, 3.0, 0.01).unwrap();
        assert!(tr.states.iter().all(|s| *s == s0));
        assert_eq!(energy_drift(&tr), 0.0);
    }

    #[test]
    fn spectral_velocity_of_circle() {
        for n in [32, 33] {
            let c = FreePeriodLoop::latitude(0.0, false, n, 1.0).unwrap();
            let v = spectral_velocity(&c, 0);
            // start at -x heading along -y at speed 2 pi
            assert!((v - Vec3::new(0.0, -2.0 * PI, 0.0)).norm() < 1e-10, "{v:?}");
        }
    }

    #[test]
    fn equator_certifies_for_height_field() {
        let sys = system(ScalarField::Height { a: 1.0, c: 0.0 });
        let eq = FreePeriodLoop::latitude(0.0, true, 128, 10.0 * PI).unwrap();
        let r = certify_orbit(&sys, 0.02, &eq, 1e-3).unwrap();
        assert!(r.closure_residual <= 1e-5, "{r:?}");
        assert!(r.mean_energy_residual.abs() < 1e-10);
        assert_eq!(r.self_intersections, 0);
    }

    #[test]
    fn crossings_of_figure_eight() {
        let n = 64;
        let nodes = (0..n)
            .map(|j| {
                let t = 2.0 * PI * j as f64 / n as f64;
                Vec3::new(1.0, 0.5 * libm::sin(t), 0.3 * libm::sin(2.0 * t))
            })
            .collect();
        let eight = FreePeriodLoop::new(nodes, 1.0).unwrap();
        assert!(self_intersections(&eight) >= 1);
        let circ = FreePeriodLoop::latitude(0.5, true, n, 1.0).unwrap();
        assert_eq!(self_intersections(&circ), 0);
    }
}
