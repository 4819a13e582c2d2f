//! Discrete free-period loops, their lifts to the universal cover of the loop
//! space, and the lifted action with its gradient.
//!
//! A loop is a closed polygon of `N` nodes joined by minor great-circle arcs,
//! each arc traversed at constant speed in `1/N` units of the normalized
//! time. The lift carries an explicit flux ledger: the integral of the
//! magnetic form over the homotopy that produced the loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::cyclic_tridiag_solve;
use crate::sphere_geom::{triangle_flux, TwoForm, BASE_POINT};
use crate::system::MagneticSystem;
use crate::vec3::{angle_between, sinc, slerp, tangent_basis, Vec3};

/// Smallest admissible node count.
pub const MIN_NODES: usize = 16;
/// Node cap for iterates.
pub const MAX_NODES: usize = 4096;
/// Largest node displacement allowed in a single sweep.
pub const MAX_SWEEP_STEP: f64 = 0.5;

const ANTIPODAL_LIMIT: f64 = PI - 1e-9;

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub(crate) const GAUSS8: [(f64, f64); 8] = [
    (0.019855071751231912, 0.050614268145188344),
    (0.10166676129318664, 0.11119051722668717),
    (0.2372337950418355, 0.15685332293894352),
    (0.4082826787521751, 0.18134189168918088),
    (0.5917173212478248, 0.18134189168918088),
    (0.7627662049581645, 0.15685332293894352),
    (0.8983332387068134, 0.11119051722668717),
    (0.9801449282487681, 0.050614268145188344),
];

/// A closed polygon on the sphere together with a free period.
#[derive(Clone, Debug, PartialEq)]
pub struct FreePeriodLoop {
    nodes: Vec<Vec3>,
    p: f64,
}

/// Geometry of one arc of the polygon.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Edge {
    /// Midpoint of the arc.
    pub mid: Vec3,
    /// Velocity at the midpoint with respect to normalized time.
    pub vel: Vec3,
    /// Arc length.
    pub theta: f64,
}

impl FreePeriodLoop {
    /// Normalizes the nodes and validates the polygon.
    pub fn new(nodes: Vec<Vec3>, p: f64) -> Result<Self> {
        if nodes.len() < MIN_NODES {
            return Err(Error::InvalidLoop(format!("{} nodes, need at least {MIN_NODES}", nodes.len())));
        }
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::InvalidLoop(format!("period must be positive, got {p}")));
        }
        let mut out = Vec::with_capacity(nodes.len());
        for x in nodes {
            let n = x.norm();
            if !(n > 1e-9) || !x.is_finite() {
                return Err(Error::NearZeroVector(n));
            }
            out.push(x / n);
        }
        let fpl = FreePeriodLoop { nodes: out, p };
        for i in 0..fpl.len() {
            if angle_between(fpl.nodes[i], fpl.node(i + 1)) >= ANTIPODAL_LIMIT {
                return Err(Error::InvalidLoop(format!("nodes {i} and {} are antipodal", (i + 1) % fpl.len())));
            }
        }
        Ok(fpl)
    }

    /// Constant loop at `q`.
    pub fn constant(q: Vec3, n: usize, p: f64) -> Result<Self> {
        Self::new(vec![q; n], p)
    }

    /// Circle of angular radius `radius` about `axis`, traversed with the
    /// axis on its left, starting in the direction of `start` from the axis.
    pub fn circle(axis: Vec3, radius: f64, start: Vec3, n: usize, p: f64) -> Result<Self> {
        let a = axis.normalized();
        let u0 = start.reject(a);
        let u = if u0.norm() > 1e-9 { u0.normalized() } else { tangent_basis(a).0 };
        let w = a.cross(u);
        let (cr, sr) = (libm::cos(radius), libm::sin(radius));
        let nodes = (0..n)
            .map(|j| {
                let phi = 2.0 * PI * j as f64 / n as f64;
                a * cr + (u * libm::cos(phi) + w * libm::sin(phi)) * sr
            })
            .collect();
        Self::new(nodes, p)
    }

    /// Latitude circle at height `z0` starting next to the base point.
    /// Westward circles have the lower cap on their left.
    pub fn latitude(z0: f64, westward: bool, n: usize, p: f64) -> Result<Self> {
        let (axis, radius) = if westward {
            (-Vec3::Z, libm::acos(-z0))
        } else {
            (Vec3::Z, libm::acos(z0))
        };
        Self::circle(axis, radius, BASE_POINT, n, p)
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn period(&self) -> f64 {
        self.p
    }

    /// Node `i` with cyclic indexing.
    #[inline]
    pub fn node(&self, i: usize) -> Vec3 {
        self.nodes[i % self.nodes.len()]
    }

    pub fn with_period(&self, p: f64) -> Self {
        FreePeriodLoop { nodes: self.nodes.clone(), p }
    }

    /// Same curve traversed backwards, still starting at node 0.
    pub fn reversed(&self) -> Self {
        let n = self.len();
        let nodes = (0..n).map(|i| self.nodes[(n - i) % n]).collect();
        FreePeriodLoop { nodes, p: self.p }
    }

    #[inline]
    pub(crate) fn edge(&self, i: usize) -> Edge {
        edge_geometry(self.nodes[i], self.node(i + 1), self.len() as f64)
    }

    /// Total length of the polygon.
    pub fn length(&self) -> f64 {
        (0..self.len()).map(|i| self.edge(i).theta).sum()
    }

    /// Discrete `||gamma'||^2_{L^2}` with respect to the metric.
    pub fn velocity_sq_l2(&self, sys: &MagneticSystem) -> f64 {
        let n = self.len();
        (0..n)
            .map(|i| {
                let e = self.edge(i);
                sys.metric().norm_sq(e.mid, e.vel)
            })
            .sum::<f64>()
            / n as f64
    }

    /// Point at normalized time `t` (any real; wraps), moving along the arcs.
    pub fn point_at(&self, t: f64) -> Vec3 {
        let n = self.len();
        let s = (t - libm::floor(t)) * n as f64;
        let i = (libm::floor(s) as usize).min(n - 1);
        slerp(self.nodes[i], self.node(i + 1), s - i as f64)
    }

    /// Resamples to `n` nodes uniformly in normalized time.
    pub fn resample(&self, n: usize) -> Result<Self> {
        if n == self.len() {
            return Ok(self.clone());
        }
        let nodes = (0..n).map(|j| self.point_at(j as f64 / n as f64)).collect();
        Self::new(nodes, self.p)
    }

    /// Resamples to `n` nodes spaced uniformly in arc length, starting at node 0.
    pub fn resample_arclength(&self, n: usize) -> Result<Self> {
        let m = self.len();
        let lens: Vec<f64> = (0..m).map(|i| self.edge(i).theta).collect();
        let total: f64 = lens.iter().sum();
        if total < 1e-12 {
            return Self::constant(self.nodes[0], n, self.p);
        }
        let mut nodes = Vec::with_capacity(n);
        let mut i = 0;
        let mut acc = 0.0;
        for j in 0..n {
            let target = total * j as f64 / n as f64;
            while i < m - 1 && acc + lens[i] < target {
                acc += lens[i];
                i += 1;
            }
            let u = if lens[i] > 0.0 { ((target - acc) / lens[i]).clamp(0.0, 1.0) } else { 0.0 };
            nodes.push(slerp(self.nodes[i], self.node(i + 1), u));
        }
        Self::new(nodes, self.p)
    }

    /// Largest angular distance between corresponding nodes.
    pub fn max_displacement(&self, other: &FreePeriodLoop) -> f64 {
        self.nodes
            .iter()
            .zip(&other.nodes)
            .map(|(a, b)| angle_between(*a, *b))
            .fold(0.0, f64::max)
    }
}

#[inline]
fn h_ratio(r: f64, theta: f64) -> f64 {
    if r < 1e-150 {
        1.0
    } else {
        theta / r
    }
}

/// `h'(r) / r` for `h(r) = 2 asin(r / 2) / r`.
#[inline]
fn h_prime_over_r(r: f64, h: f64) -> f64 {
    if r < 1e-2 {
        let r2 = r * r;
        1.0 / 12.0 + 3.0 * r2 / 160.0 + 15.0 * r2 * r2 / 3584.0
    } else {
        (1.0 / (r * libm::sqrt(1.0 - 0.25 * r * r)) - h / r) / r
    }
}

#[inline]
pub(crate) fn edge_geometry(a: Vec3, b: Vec3, n: f64) -> Edge {
    let c = b - a;
    let r = c.norm();
    let theta = angle_between(a, b);
    let mid = (a + b).normalized();
    Edge { mid, vel: c * (n * h_ratio(r, theta)), theta }
}

/// A loop with its position in the universal cover, recorded as flux.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedLoop {
    pub fpl: FreePeriodLoop,
    pub flux: f64,
}

impl LiftedLoop {
    pub fn new(fpl: FreePeriodLoop, flux: f64) -> Self {
        LiftedLoop { fpl, flux }
    }

    pub fn with_period(&self, p: f64) -> Self {
        LiftedLoop { fpl: self.fpl.with_period(p), flux: self.flux }
    }
}

/// Gradient of the lifted action.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopGradient {
    /// Riesz representative in the discrete H^1 metric, tangent at each node.
    pub node_grads: Vec<Vec3>,
    /// Tangent differential `dA / dx_i`.
    pub differential: Vec<Vec3>,
    /// `dA / dp`.
    pub p_grad: f64,
}

impl LoopGradient {
    /// Norm in the discrete H^1 metric, with the period direction weighted by one.
    pub fn norm(&self) -> f64 {
        let s: f64 = self.differential.iter().zip(&self.node_grads).map(|(d, g)| d.dot(*g)).sum();
        libm::sqrt(s.max(0.0) + self.p_grad * self.p_grad)
    }

    /// Norm of the node part only.
    pub fn node_norm(&self) -> f64 {
        let s: f64 = self.differential.iter().zip(&self.node_grads).map(|(d, g)| d.dot(*g)).sum();
        libm::sqrt(s.max(0.0))
    }
}

/// `S_e(gamma, p) = p * mean_i L(m_i, v_i / p) + p e` over the arcs.
pub fn discrete_action_s(sys: &MagneticSystem, e: f64, fpl: &FreePeriodLoop) -> f64 {
    let n = fpl.len();
    let p = fpl.p;
    let l = &sys.lagrangian;
    let sum: f64 = (0..n)
        .map(|i| {
            let ed = fpl.edge(i);
            l.eval(ed.mid, ed.vel / p)
        })
        .sum();
    p * sum / n as f64 + p * e
}

/// `A_e = S_e + flux`.
pub fn lifted_action_a(sys: &MagneticSystem, e: f64, ll: &LiftedLoop) -> f64 {
    discrete_action_s(sys, e, &ll.fpl) + ll.flux
}

/// Mean energy of the arcs at period `p`.
pub fn mean_energy(sys: &MagneticSystem, fpl: &FreePeriodLoop) -> f64 {
    let n = fpl.len();
    let p = fpl.p;
    (0..n)
        .map(|i| {
            let ed = fpl.edge(i);
            sys.lagrangian.energy(ed.mid, ed.vel / p)
        })
        .sum::<f64>()
        / n as f64
}

/// `dS/dp = e - mean energy`.
pub fn period_derivative(sys: &MagneticSystem, e: f64, fpl: &FreePeriodLoop) -> f64 {
    e - mean_energy(sys, fpl)
}

/// Period minimizing `S_e` on the ray `{(gamma, p)}`; `None` when the
/// action is unbounded below or the loop is constant.
pub fn optimal_period(sys: &MagneticSystem, e: f64, fpl: &FreePeriodLoop) -> Option<f64> {
    let n = fpl.len();
    let edges: Vec<Edge> = (0..n).map(|i| fpl.edge(i)).collect();
    if edges.iter().all(|ed| ed.theta == 0.0) {
        return None;
    }
    let l = &sys.lagrangian;
    // g(x) = dS/dp at p = exp(x) is increasing in x.
    let g = |x: f64| {
        let p = libm::exp(x);
        e - edges.iter().map(|ed| l.energy(ed.mid, ed.vel / p)).sum::<f64>() / n as f64
    };
    let mut lo = libm::log(fpl.p.max(1e-12));
    let mut hi = lo;
    let mut glo = g(lo);
    let mut ghi = glo;
    let mut k = 0;
    while glo > 0.0 {
        lo -= 1.0;
        glo = g(lo);
        k += 1;
        if k > 200 {
            return None;
        }
    }
    k = 0;
    while ghi < 0.0 {
        hi += 1.0;
        ghi = g(hi);
        k += 1;
        if k > 200 {
            return None;
        }
    }
    if glo == 0.0 {
        return Some(libm::exp(lo));
    }
    // Illinois-modified regula falsi on a bracket.
    let mut side = 0;
    for _ in 0..200 {
        let x = (lo * ghi - hi * glo) / (ghi - glo);
        let gx = g(x);
        if gx == 0.0 || (hi - lo).abs() < 1e-15 * (1.0 + x.abs()) {
            return Some(libm::exp(x));
        }
        if gx < 0.0 {
            lo = x;
            glo = gx;
            if side == -1 {
                ghi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            ghi = gx;
            if side == 1 {
                glo *= 0.5;
            }
            side = 1;
        }
    }
    Some(libm::exp(0.5 * (lo + hi)))
}

/// Derivative of the flux of the arc `a -> b` swept by node motions, as
/// ambient covectors `(dF/da, dF/db)`.
fn arc_flux_gradient(sigma: &TwoForm, a: Vec3, b: Vec3) -> (Vec3, Vec3) {
    let axb = a.cross(b);
    if axb.norm_sq() == 0.0 {
        return (Vec3::ZERO, Vec3::ZERO);
    }
    let theta = angle_between(a, b);
    let st = sinc(theta);
    let mut ia = 0.0;
    let mut ib = 0.0;
    for &(u, w) in &GAUSS8 {
        let ca = (1.0 - u) * sinc(theta * (1.0 - u));
        let cb = u * sinc(theta * u);
        let x = (a * ca + b * cb) / st;
        let f = sigma.round_density(x.normalized());
        ia += w * f * ca;
        ib += w * f * cb;
    }
    let s2 = st * st;
    (axb * (-ia / s2), axb * (-ib / s2))
}

/// Tangent differential of `A_e` with respect to the nodes and `dA/dp`.
pub fn action_differential(sys: &MagneticSystem, e: f64, fpl: &FreePeriodLoop) -> (Vec<Vec3>, f64) {
    let n = fpl.len();
    let nf = n as f64;
    let p = fpl.p;
    let l = &sys.lagrangian;
    let mut d = vec![Vec3::ZERO; n];
    let mut esum = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        let a = fpl.nodes[i];
        let b = fpl.nodes[j];
        let c = b - a;
        let s = a + b;
        let sn = s.norm();
        let m = s / sn;
        let r = c.norm();
        let theta = angle_between(a, b);
        let h = h_ratio(r, theta);
        let w = c * (nf * h / p);
        esum += l.energy(m, w);
        let lq = l.dq(m, w) * (p / nf);
        let lv = l.dv(m, w);
        let ds = (lq - m * m.dot(lq)) / sn;
        let dc = lv * h + c * (h_prime_over_r(r, h) * c.dot(lv));
        let (fa, fb) = arc_flux_gradient(&sys.sigma, a, b);
        d[i] += ds - dc + fa;
        d[j] += ds + dc + fb;
    }
    for (g, x) in d.iter_mut().zip(&fpl.nodes) {
        *g = g.reject(*x);
    }
    (d, e - esum / nf)
}

/// Riesz map of the discrete H^1 product `(1/N) sum <xi, eta> + N <D xi, D eta>`.
pub fn h1_riesz(nodes: &[Vec3], differential: &[Vec3]) -> Vec<Vec3> {
    let n = nodes.len();
    let nf = n as f64;
    let mut out = vec![Vec3::ZERO; n];
    let mut buf = vec![0.0; n];
    for k in 0..3 {
        for (b, d) in buf.iter_mut().zip(differential) {
            *b = nf * d.to_array()[k];
        }
        cyclic_tridiag_solve(1.0 + 2.0 * nf * nf, -nf * nf, &mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            match k {
                0 => o.x = *b,
                1 => o.y = *b,
                _ => o.z = *b,
            }
        }
    }
    for (g, x) in out.iter_mut().zip(nodes) {
        *g = g.reject(*x);
    }
    out
}

/// Gradient of the lifted action; the flux ledger does not enter it.
pub fn action_gradient(sys: &MagneticSystem, e: f64, ll: &LiftedLoop) -> LoopGradient {
    let (differential, p_grad) = action_differential(sys, e, &ll.fpl);
    let node_grads = h1_riesz(ll.fpl.nodes(), &differential);
    LoopGradient { node_grads, differential, p_grad }
}

/// Signed flux swept by the homotopy moving each node of `old` along a
/// geodesic to the matching node of `new`.
pub fn sweep_flux(sigma: &TwoForm, old: &FreePeriodLoop, new: &FreePeriodLoop, depth: u32) -> Result<f64> {
    if old.len() != new.len() {
        return Err(Error::InvalidArgument(format!(
            "sweep between loops with {} and {} nodes",
            old.len(),
            new.len()
        )));
    }
    let n = old.len();
    for i in 0..n {
        let ang = angle_between(old.nodes[i], new.nodes[i]);
        if ang > MAX_SWEEP_STEP {
            return Err(Error::StepTooLarge { node: i, angle: ang });
        }
    }
    if sigma.density.is_identically_zero() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        let (oi, oj, ni, nj) = (old.nodes[i], old.nodes[j], new.nodes[i], new.nodes[j]);
        if oi == ni && oj == nj {
            continue;
        }
        if oi != ni {
            total += triangle_flux(sigma, oi, ni, oj, depth)?;
        }
        if oj != nj {
            total += triangle_flux(sigma, ni, nj, oj, depth)?;
        }
    }
    Ok(total)
}

/// Moves a lifted loop to `new_loop`, updating the flux ledger. The period
/// of `new_loop` is taken as is; period changes carry no flux.
pub fn deform(sys: &MagneticSystem, ll: &LiftedLoop, new_loop: FreePeriodLoop) -> Result<LiftedLoop> {
    let dflux = sweep_flux(&sys.sigma, &ll.fpl, &new_loop, sys.sweep_depth)?;
    Ok(LiftedLoop { fpl: new_loop, flux: ll.flux + dflux })
}

/// Like [`deform`], splitting large node motions into nodewise geodesic
/// substeps of at most `0.4` rad.
pub fn transport(sys: &MagneticSystem, ll: &LiftedLoop, new_loop: FreePeriodLoop) -> Result<LiftedLoop> {
    let disp = ll.fpl.max_displacement(&new_loop);
    let steps = libm::ceil(disp / 0.4).max(1.0) as usize;
    let mut cur = ll.clone();
    for k in 1..=steps {
        let next = if k == steps {
            new_loop.clone()
        } else {
            let u = k as f64 / steps as f64;
            let nodes = ll
                .fpl
                .nodes
                .iter()
                .zip(&new_loop.nodes)
                .map(|(a, b)| slerp(*a, *b, u))
                .collect();
            FreePeriodLoop::new(nodes, new_loop.p)?
        };
        cur = deform(sys, &cur, next)?;
    }
    Ok(cur)
}

/// `m`-fold iterate: the polygon traversed `m` times with period `m p` and
/// flux `m * flux`. Beyond [`MAX_NODES`] nodes the iterate is resampled
/// uniformly in time.
pub fn iterate(ll: &LiftedLoop, m: usize) -> Result<LiftedLoop> {
    if m == 0 {
        return Err(Error::InvalidArgument("iterate needs m >= 1".into()));
    }
    if m == 1 {
        return Ok(ll.clone());
    }
    let n = ll.fpl.len();
    let p = ll.fpl.p * m as f64;
    let fpl = if n * m <= MAX_NODES {
        let nodes = (0..n * m).map(|i| ll.fpl.nodes[i % n]).collect();
        FreePeriodLoop { nodes, p }
    } else {
        let nodes = (0..MAX_NODES)
            .map(|j| ll.fpl.point_at(m as f64 * j as f64 / MAX_NODES as f64))
            .collect();
        FreePeriodLoop::new(nodes, p)?
    };
    Ok(LiftedLoop { fpl, flux: ll.flux * m as f64 })
}

/// Applies the `k`-th power of the deck generator.
pub fn deck_transform(sys: &MagneticSystem, ll: &LiftedLoop, k: i64) -> LiftedLoop {
    LiftedLoop { fpl: ll.fpl.clone(), flux: ll.flux + k as f64 * sys.total_flux() }
}

/// Membership in the valley `{||gamma'||^2 < tau p, p < tau}`.
pub fn in_valley(sys: &MagneticSystem, fpl: &FreePeriodLoop, tau: f64) -> bool {
    fpl.p < tau && fpl.velocity_sq_l2(sys) < tau * fpl.p
}

/// Default valley parameter cap.
pub const VALLEY_TAU_CAP: f64 = 0.1;

/// `2 h1 / ||d lambda + sigma||_inf`, before capping.
pub fn valley_tau_uncapped(sys: &MagneticSystem) -> Option<f64> {
    let b = sys.fiber_bounds();
    if b.sup_norm_dlambda_plus_sigma > 0.0 {
        Some(2.0 * b.h1 / b.sup_norm_dlambda_plus_sigma)
    } else {
        None
    }
}

/// Valley parameter: `min(2 h1 / ||d lambda + sigma||_inf, 0.1)`; the cap
/// when the form vanishes.
pub fn valley_tau(sys: &MagneticSystem) -> f64 {
    valley_tau_uncapped(sys).map_or(VALLEY_TAU_CAP, |t| t.min(VALLEY_TAU_CAP))
}

/// Smallest angular distance from `c` or `-c` to any node.
fn apex_margin(fpl: &FreePeriodLoop, c: Vec3) -> f64 {
    fpl.nodes
        .iter()
        .map(|x| {
            let a = angle_between(c, *x);
            a.min(PI - a)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Apex used for fresh lifts: the first of `x0, -e_z, -e_y` whose margin is
/// largest (ties within `1e-12` go to the earlier candidate).
pub fn default_apex(fpl: &FreePeriodLoop) -> Vec3 {
    let mut best = BASE_POINT;
    let mut best_margin = apex_margin(fpl, best);
    for c in [-Vec3::Z, -Vec3::Y] {
        let m = apex_margin(fpl, c);
        if m > best_margin + 1e-12 {
            best = c;
            best_margin = m;
        }
    }
    best
}

/// Apex on the left of a roughly planar loop: the normalized sum of
/// `x_i x x_{i+1}`. Coning from it integrates over the region to the left.
pub fn left_apex(fpl: &FreePeriodLoop) -> Option<Vec3> {
    let n = fpl.len();
    let s = (0..n).fold(Vec3::ZERO, |acc, i| acc + fpl.nodes[i].cross(fpl.node(i + 1)));
    if s.norm() < 1e-12 {
        None
    } else {
        Some(s.normalized())
    }
}

/// Flux of the cone joining `apex` to the loop along great arcs.
pub fn cone_flux(sigma: &TwoForm, fpl: &FreePeriodLoop, apex: Vec3, depth: u32) -> Result<f64> {
    if apex_margin(fpl, apex) < 1e-9 {
        return Err(Error::LiftFailed);
    }
    if sigma.density.is_identically_zero() {
        return Ok(0.0);
    }
    let n = fpl.len();
    let mut total = 0.0;
    for i in 0..n {
        let a = fpl.nodes[i];
        let b = fpl.node(i + 1);
        if a == b {
            continue;
        }
        total += triangle_flux(sigma, apex, a, b, depth).map_err(|_| Error::LiftFailed)?;
    }
    Ok(total)
}

/// Lift of a fresh loop by coning from `apex`.
pub fn lift_with_apex(sys: &MagneticSystem, fpl: FreePeriodLoop, apex: Vec3) -> Result<LiftedLoop> {
    let flux = cone_flux(&sys.sigma, &fpl, apex, sys.cone_depth)?;
    Ok(LiftedLoop { fpl, flux })
}

/// Lift of a fresh loop by coning from [`default_apex`].
pub fn lift(sys: &MagneticSystem, fpl: FreePeriodLoop) -> Result<LiftedLoop> {
    let apex = default_apex(&fpl);
    lift_with_apex(sys, fpl, apex)
}

/// Loop `s` of the family generating the fundamental group of the loop space:
/// the circle through the base point cut out by the plane through it with
/// normal `(-cos(pi s), 0, -sin(pi s))`, oriented so that the family sweeps
/// the sphere positively. Constant at `s = 0` and `s = 1`.
pub fn zeta_loop(s: f64, n: usize, p: f64) -> Result<FreePeriodLoop> {
    let nrm = Vec3::new(-libm::cos(PI * s), 0.0, -libm::sin(PI * s));
    let d = BASE_POINT.dot(nrm);
    let center = nrm * d;
    let rho = libm::sqrt((1.0 - d * d).max(0.0));
    if rho < 1e-12 {
        return FreePeriodLoop::constant(BASE_POINT, n, p);
    }
    let u = (BASE_POINT - center) / rho;
    let w = nrm.cross(u);
    let nodes = (0..n)
        .map(|j| {
            let phi = 2.0 * PI * j as f64 / n as f64;
            center + (u * libm::cos(phi) + w * libm::sin(phi)) * rho
        })
        .collect();
    FreePeriodLoop::new(nodes, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ScalarField;
    use crate::sphere_geom::Metric;
    use crate::tonelli::Lagrangian;

    fn system(f: ScalarField, u: ScalarField, depth: u32) -> MagneticSystem {
        let sigma = TwoForm::new(f, Metric::Round);
        let l = Lagrangian::kinetic(Metric::Round, u);
        let mut s = MagneticSystem::new(sigma, l).unwrap();
        s.sweep_depth = depth;
        s
    }

    fn hz(c: f64) -> ScalarField {
        ScalarField::Height { a: 1.0, c }
    }

    #[test]
    fn constant_loop_action() {
        let sys = system(ScalarField::zero(), ScalarField::Height { a: 0.3, c: 0.0 }, 3);
        let c = FreePeriodLoop::constant(Vec3::Z, 32, 2.0).unwrap();
        assert!((discrete_action_s(&sys, 0.5, &c) - 0.4).abs() < 1e-14);
    }

    #[test]
    fn equator_action_and_lift() {
        let sys = system(hz(0.0), ScalarField::zero(), 3);
        let eq = FreePeriodLoop::latitude(0.0, true, 128, 10.0 * PI).unwrap();
        assert!((discrete_action_s(&sys, 0.02, &eq) - 0.4 * PI).abs() < 2e-3);
        let ll = lift(&sys, eq).unwrap();
        assert!((ll.flux + PI).abs() < 1e-4);
        assert!((lifted_action_a(&sys, 0.02, &ll) + 0.6 * PI).abs() < 5e-3);
    }

    #[test]
    fn optimal_period_kinetic_closed_form() {
        let sys = system(hz(0.0), ScalarField::zero(), 3);
        let eq = FreePeriodLoop::latitude(0.3, true, 64, 1.0).unwrap();
        let p = optimal_period(&sys, 0.02, &eq).unwrap();
        let len = eq.length();
        assert!((p - len / libm::sqrt(0.04)).abs() < 1e-10 * p);
        assert!(period_derivative(&sys, 0.02, &eq.with_period(p)).abs() < 1e-12);
    }

    #[test]
    fn sweep_antisymmetry_and_step_limit() {
        let sys = system(hz(0.2), ScalarField::zero(), 4);
        let a = FreePeriodLoop::latitude(0.1, true, 32, 1.0).unwrap();
        let b = FreePeriodLoop::latitude(0.3, true, 32, 1.0).unwrap();
        let f = sweep_flux(&sys.sigma, &a, &b, 4).unwrap();
        let g = sweep_flux(&sys.sigma, &b, &a, 4).unwrap();
        assert!(f.abs() > 0.1 && (f + g).abs() < 1e-10);
        assert_eq!(sweep_flux(&sys.sigma, &a, &a, 4).unwrap(), 0.0);
        let far = FreePeriodLoop::latitude(0.9, true, 32, 1.0).unwrap();
        assert!(matches!(sweep_flux(&sys.sigma, &a, &far, 4), Err(Error::StepTooLarge { .. })));
    }

    #[test]
    fn latitude_sweep_matches_band_flux() {
        // westward circles: moving up adds the band to the left region
        let sys = system(hz(0.2), ScalarField::zero(), 5);
        let a = FreePeriodLoop::latitude(0.1, true, 256, 1.0).unwrap();
        let b = FreePeriodLoop::latitude(0.3, true, 256, 1.0).unwrap();
        let exact = 2.0 * PI * hz(0.2).zonal_integral(0.1, 0.3).unwrap();
        let f = sweep_flux(&sys.sigma, &a, &b, 5).unwrap();
        // polygon versus circle differs at order (2 pi / N)^2
        assert!((f - exact).abs() < 1e-3, "{f} vs {exact}");
    }

    #[test]
    fn zeta_family_covers_sphere_once() {
        let sys = system(hz(0.2), ScalarField::zero(), 4);
        let n = 64;
        let mut ll = LiftedLoop::new(zeta_loop(0.0, n, 1.0).unwrap(), 0.0);
        let k = 200;
        for j in 1..=k {
            let next = zeta_loop(j as f64 / k as f64, n, 1.0).unwrap();
            ll = deform(&sys, &ll, next).unwrap();
        }
        assert!((ll.flux - sys.total_flux()).abs() < 1e-4, "{} vs {}", ll.flux, sys.total_flux());
    }

    #[test]
    fn iterate_and_deck() {
        let sys = system(hz(0.2), ScalarField::zero(), 3);
        let u = lift(&sys, FreePeriodLoop::latitude(-0.2, true, 40, 7.0).unwrap()).unwrap();
        let a = lifted_action_a(&sys, 0.02, &u);
        for m in [2, 3, 5] {
            let um = iterate(&u, m).unwrap();
            assert!((lifted_action_a(&sys, 0.02, &um) - m as f64 * a).abs() < 1e-9 * a.abs());
        }
        assert_eq!(iterate(&u, 1).unwrap(), u);
        let z = deck_transform(&sys, &u, 1);
        assert!((lifted_action_a(&sys, 0.02, &z) - a - 0.8 * PI).abs() < 1e-6);
        assert_eq!(deck_transform(&sys, &z, -1).flux, u.flux);
    }

    #[test]
    fn iterate_cap_resamples() {
        let u = LiftedLoop::new(FreePeriodLoop::latitude(0.0, true, 1000, 1.0).unwrap(), 0.3);
        let v = iterate(&u, 5).unwrap();
        assert_eq!(v.fpl.len(), MAX_NODES);
        assert!((v.fpl.period() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn valley_membership() {
        let sys = system(hz(0.2), ScalarField::zero(), 3);
        let tau = valley_tau(&sys);
        assert!((tau - 0.1).abs() < 1e-15);
        let c = FreePeriodLoop::constant(Vec3::Z, 32, tau / 2.0).unwrap();
        assert!(in_valley(&sys, &c, tau));
        let eq = FreePeriodLoop::latitude(0.0, true, 32, 10.0 * PI).unwrap();
        assert!(!in_valley(&sys, &eq, 0.1));
        let strong = system(hz(0.2).scaled(10.0), ScalarField::zero(), 3);
        assert!((valley_tau_uncapped(&strong).unwrap() - 1.0 / 12.0).abs() < 1e-4);
        let flat = system(ScalarField::zero(), ScalarField::zero(), 3);
        assert_eq!(valley_tau(&flat), 0.1);
    }

    #[test]
    fn valley_boundary_is_open() {
        let sys = system(ScalarField::zero(), ScalarField::zero(), 3);
        let small = FreePeriodLoop::circle(Vec3::Z, 0.1, Vec3::X, 32, 0.5).unwrap();
        let v2 = small.velocity_sq_l2(&sys);
        // tau * p == ||gamma'||^2 exactly, and p < tau
        let tau = 2.0 * v2;
        assert!(small.period() < tau && tau * small.period() == v2);
        assert!(!in_valley(&sys, &small, tau));
        assert!(in_valley(&sys, &small, tau * 1.000001));
    }

    #[test]
    fn p_gradient_vanishes_at_mean_energy() {
        let sys = system(hz(0.2), ScalarField::zero(), 3);
        let c = FreePeriodLoop::circle(Vec3::new(0.2, 0.3, 1.0), 0.7, Vec3::X, 48, 1.0).unwrap();
        let p = optimal_period(&sys, 0.03, &c).unwrap();
        let g = action_gradient(&sys, 0.03, &LiftedLoop::new(c.with_period(p), 0.0));
        assert!(g.p_grad.abs() < 1e-10);
        assert!((mean_energy(&sys, &c.with_period(p)) - 0.03).abs() < 1e-10);
    }
}
