//! Waists by preconditioned descent, mountain-pass saddles by a climbing
//! string, energy scans and multiplicity searches over iterates and deck
//! copies of the waist.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::{certify_orbit, refine_orbit, OrbitReport};
use crate::loop_space::{
    action_differential, action_gradient, cone_flux, deck_transform, deform, in_valley, iterate,
    left_apex, lift, lifted_action_a, optimal_period, transport, valley_tau, zeta_loop, FreePeriodLoop, LiftedLoop,
};
use crate::sphere_geom::BASE_POINT;
use crate::system::MagneticSystem;
use crate::vec3::{angle_between, slerp, tangent_basis, Vec3};

/// Solver settings shared by the waist, minimax and scan drivers.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Target gradient norm.
    pub tol: f64,
    /// Iteration budget for descent; sweep budget for the string.
    pub max_iter: usize,
    /// Images on a minimax path.
    pub path_nodes: usize,
    /// Nodes per loop.
    pub loop_nodes: usize,
    /// Integration step used for certification.
    pub flow_step: f64,
    /// Gradient norm below which Newton polishing takes over.
    pub newton_switch: f64,
    /// Refine and certify outputs by shooting.
    pub certify: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-6,
            max_iter: 3000,
            path_nodes: 16,
            loop_nodes: 128,
            flow_step: 1e-3,
            newton_switch: 1e-3,
            certify: true,
        }
    }
}

/// Output of [`find_waist`].
#[derive(Clone, Debug, PartialEq)]
pub struct Waist {
    pub waist: LiftedLoop,
    pub action: f64,
    pub gradient_norm: f64,
    /// Lifted action after every accepted step.
    pub history: Vec<f64>,
    pub iterations: usize,
    /// Periodic orbit obtained by shooting from the waist.
    pub refined: Option<FreePeriodLoop>,
    pub report: Option<OrbitReport>,
}

/// Loop with its period reset to the optimum for `e`, floored at `1e-6`.
fn with_optimal_period(sys: &MagneticSystem, e: f64, fpl: FreePeriodLoop) -> FreePeriodLoop {
    let p = optimal_period(sys, e, &fpl).unwrap_or(1e-6).max(1e-6);
    fpl.with_period(p)
}

/// Retraction: moves node `i` along `dir[i] * alpha` and renormalizes.
fn retract(fpl: &FreePeriodLoop, dir: &[Vec3], alpha: f64) -> Result<FreePeriodLoop> {
    let nodes = fpl.nodes().iter().zip(dir).map(|(x, d)| *x + *d * alpha).collect();
    FreePeriodLoop::new(nodes, fpl.period())
}

fn max_norm(v: &[Vec3]) -> f64 {
    v.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolishMode {
    /// Levenberg-Marquardt on the action.
    Minimize,
    /// Gauss-Newton on the squared gradient; converges to saddles as well.
    Critical,
}

/// Gradient of the action in tangent charts around `base`.
struct Chart<'a> {
    sys: &'a MagneticSystem,
    e: f64,
    base: &'a FreePeriodLoop,
    basis: Vec<(Vec3, Vec3)>,
}

impl<'a> Chart<'a> {
    fn new(sys: &'a MagneticSystem, e: f64, base: &'a FreePeriodLoop) -> Self {
        let basis = base.nodes().iter().map(|x| tangent_basis(*x)).collect();
        Chart { sys, e, base, basis }
    }

    fn dim(&self) -> usize {
        2 * self.base.len() + 1
    }

    fn point(&self, y: &DVector<f64>) -> Result<FreePeriodLoop> {
        let nodes = self
            .base
            .nodes()
            .iter()
            .zip(&self.basis)
            .enumerate()
            .map(|(i, (x, (b1, b2)))| *x + *b1 * y[2 * i] + *b2 * y[2 * i + 1])
            .collect();
        FreePeriodLoop::new(nodes, self.base.period() + y[self.dim() - 1])
    }

    fn gradient(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.base.len();
        let fpl = self.point(y)?;
        let (d, dp) = action_differential(self.sys, self.e, &fpl);
        let mut g = DVector::zeros(self.dim());
        for i in 0..n {
            let (b1, b2) = self.basis[i];
            let raw = self.base.nodes()[i] + b1 * y[2 * i] + b2 * y[2 * i + 1];
            let scale = 1.0 / raw.norm();
            g[2 * i] = d[i].dot(b1) * scale;
            g[2 * i + 1] = d[i].dot(b2) * scale;
        }
        g[2 * n] = dp;
        Ok(g)
    }

    fn hessian(&self) -> Result<DMatrix<f64>> {
        let dim = self.dim();
        let mut h = DMatrix::zeros(dim, dim);
        let y0 = DVector::zeros(dim);
        for k in 0..dim {
            let eps = if k == dim - 1 { 1e-6 * self.base.period().max(1e-3) } else { 1e-6 };
            let mut yp = y0.clone();
            yp[k] = eps;
            let mut ym = y0.clone();
            ym[k] = -eps;
            let col = (self.gradient(&yp)? - self.gradient(&ym)?) / (2.0 * eps);
            h.set_column(k, &col);
        }
        let ht = h.transpose();
        Ok((h + ht) * 0.5)
    }
}

/// Newton-type polishing of a near-critical lifted loop in tangent charts.
/// Returns the polished loop and its H^1 gradient norm.
pub fn polish(
    sys: &MagneticSystem,
    e: f64,
    ll: &LiftedLoop,
    mode: PolishMode,
    tol: f64,
    max_iter: usize,
) -> Result<(LiftedLoop, f64)> {
    let mut cur = ll.clone();
    let mut gnorm = action_gradient(sys, e, &cur).norm();
    let mut mu = 1e-8;
    for _ in 0..max_iter {
        if gnorm <= tol {
            break;
        }
        let chart = Chart::new(sys, e, &cur.fpl);
        let y0 = DVector::zeros(chart.dim());
        let g = chart.gradient(&y0)?;
        let h = chart.hessian()?;
        let a0 = lifted_action_a(sys, e, &cur);
        let gsq = g.norm_squared();
        let scale = h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let mut accepted = false;
        for _ in 0..14 {
            let step = match mode {
                PolishMode::Minimize => {
                    let mut a = h.clone();
                    for k in 0..a.nrows() {
                        a[(k, k)] += mu * scale;
                    }
                    a.cholesky().map(|c| -c.solve(&g))
                }
                PolishMode::Critical => {
                    let mut a = &h * &h;
                    for k in 0..a.nrows() {
                        a[(k, k)] += mu * scale * scale;
                    }
                    a.cholesky().map(|c| -c.solve(&(&h * &g)))
                }
            };
            let Some(dy) = step else {
                mu *= 10.0;
                continue;
            };
            let trial = chart.point(&dy).and_then(|fpl| {
                if fpl.period() <= 0.0 || fpl.max_displacement(&cur.fpl) > 0.3 {
                    Err(Error::InvalidArgument("step too large".into()))
                } else {
                    deform(sys, &cur, fpl)
                }
            });
            if let Ok(next) = trial {
                let gn = Chart::new(sys, e, &next.fpl).gradient(&DVector::zeros(chart.dim()))?.norm_squared();
                let an = lifted_action_a(sys, e, &next);
                let ok = match mode {
                    PolishMode::Minimize => {
                        an < a0 - 1e-4 * g.dot(&dy).abs() || (gn < 0.25 * gsq && an <= a0 + 1e-10 * (1.0 + a0.abs()))
                    }
                    PolishMode::Critical => gn < gsq,
                };
                if ok {
                    cur = next;
                    mu = (mu * 0.1).max(1e-14);
                    accepted = true;
                    break;
                }
            }
            mu *= 10.0;
        }
        gnorm = action_gradient(sys, e, &cur).norm();
        if !accepted {
            break;
        }
    }
    Ok((cur, gnorm))
}

/// Refines and certifies a discrete critical loop. The report carries the
/// discrete gradient norm `gnorm` of the loop it came from.
fn certify_critical(
    sys: &MagneticSystem,
    e: f64,
    fpl: &FreePeriodLoop,
    gnorm: f64,
    cfg: &SolverConfig,
) -> (Option<FreePeriodLoop>, Option<OrbitReport>) {
    if !cfg.certify || !sys.lagrangian.is_electromagnetic() {
        return (None, None);
    }
    let (refined, report) = match refine_orbit(sys, e, fpl, cfg.flow_step) {
        Ok(r) => {
            let rep = certify_orbit(sys, e, &r, cfg.flow_step);
            (Some(r), rep.ok())
        }
        Err(_) => (None, certify_orbit(sys, e, fpl, cfg.flow_step).ok()),
    };
    let report = report.map(|mut r| {
        r.gradient_norm = gnorm;
        r
    });
    (refined, report)
}

/// Westward equator with a small third-harmonic bump, lifted by its cone.
pub fn default_seed(sys: &MagneticSystem, n: usize) -> Result<LiftedLoop> {
    let eq = FreePeriodLoop::latitude(0.0, true, n, 1.0)?;
    let nodes = eq
        .nodes()
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let phi = 2.0 * core::f64::consts::PI * j as f64 / n as f64;
            *x + Vec3::Z * (0.05 * libm::sin(3.0 * phi))
        })
        .collect();
    lift(sys, FreePeriodLoop::new(nodes, 1.0)?)
}

/// Descends the lifted action from `seed` to a local minimizer.
pub fn find_waist(sys: &MagneticSystem, e: f64, seed: &LiftedLoop, cfg: &SolverConfig) -> Result<Waist> {
    let tau = valley_tau(sys);
    let mut ll = seed.clone();
    ll.fpl = with_optimal_period(sys, e, ll.fpl);
    let mut a = lifted_action_a(sys, e, &ll);
    let mut history = vec![a];
    let mut alpha: f64 = 0.1;
    let mut gnorm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        if in_valley(sys, &ll.fpl, tau) {
            return Err(Error::ValleyCollapse { tau, period: ll.fpl.period() });
        }
        let g = action_gradient(sys, e, &ll);
        gnorm = g.norm();
        if gnorm <= cfg.tol {
            break;
        }
        if gnorm <= cfg.newton_switch {
            let (polished, gn) = polish(sys, e, &ll, PolishMode::Minimize, cfg.tol, 30)?;
            let ap = lifted_action_a(sys, e, &polished);
            if ap <= a + 1e-9 {
                ll = polished;
                a = ap;
                history.push(a);
                gnorm = gn;
            }
            if gnorm <= cfg.tol {
                break;
            }
        }
        iterations += 1;
        let dir: Vec<Vec3> = g.node_grads.iter().map(|v| -*v).collect();
        let slope: f64 = g.differential.iter().zip(&g.node_grads).map(|(d, v)| d.dot(*v)).sum();
        let cap = 0.2 / max_norm(&dir).max(1e-300);
        let mut step = (alpha * 2.0).min(cap);
        let mut moved = false;
        while step > 1e-14 {
            if let Ok(fpl) = retract(&ll.fpl, &dir, step) {
                let fpl = with_optimal_period(sys, e, fpl);
                if let Ok(next) = deform(sys, &ll, fpl) {
                    let an = lifted_action_a(sys, e, &next);
                    if an <= a - 1e-4 * step * slope {
                        ll = next;
                        a = an;
                        alpha = step;
                        moved = true;
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        history.push(a);
        if !moved {
            break;
        }
    }
    if in_valley(sys, &ll.fpl, tau) {
        return Err(Error::ValleyCollapse { tau, period: ll.fpl.period() });
    }
    if gnorm > cfg.tol {
        return Err(Error::MaxIterations { iterations, gradient_norm: gnorm });
    }
    let (refined, report) = certify_critical(sys, e, &ll.fpl, gnorm, cfg);
    Ok(Waist { action: a, waist: ll, gradient_norm: gnorm, history, iterations, refined, report })
}

/// A discrete path of lifted loops with pinned endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct PathOfLoops {
    pub images: Vec<LiftedLoop>,
    pub pinned: (bool, bool),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinimaxResult {
    /// Maximum action along the final path.
    pub value: f64,
    pub argmax_index: usize,
    pub saddle_gradient_norm: f64,
    pub converged: bool,
    /// Path maximum after every sweep.
    pub history: Vec<f64>,
    pub saddle: LiftedLoop,
    pub refined: Option<FreePeriodLoop>,
    pub report: Option<OrbitReport>,
    pub path: PathOfLoops,
}

/// Nodewise RMS chord distance between two loops with equal node counts.
fn loop_distance(a: &FreePeriodLoop, b: &FreePeriodLoop) -> f64 {
    let s: f64 = a.nodes().iter().zip(b.nodes()).map(|(x, y)| (*x - *y).norm_sq()).sum();
    libm::sqrt(s / a.len() as f64)
}

/// Loop between `a` and `b` by nodewise geodesic interpolation.
fn interpolate(a: &FreePeriodLoop, b: &FreePeriodLoop, u: f64) -> Result<FreePeriodLoop> {
    let nodes = a.nodes().iter().zip(b.nodes()).map(|(x, y)| slerp(*x, *y, u)).collect();
    FreePeriodLoop::new(nodes, a.period())
}

/// Appends nodewise-geodesic steps from the last image to `target`, at most
/// `0.1` rad per step, keeping the flux ledger.
fn push_towards(sys: &MagneticSystem, e: f64, path: &mut Vec<LiftedLoop>, target: &FreePeriodLoop) -> Result<()> {
    let start = path.last().expect("nonempty path").clone();
    let disp = start.fpl.max_displacement(target);
    let steps = libm::ceil(disp / 0.1).max(1.0) as usize;
    let mut cur = start.clone();
    for k in 1..=steps {
        let fpl = interpolate(&start.fpl, target, k as f64 / steps as f64)?;
        let fpl = with_optimal_period(sys, e, fpl);
        cur = deform(sys, &cur, fpl)?;
        path.push(cur.clone());
    }
    Ok(())
}

fn constant_like(n: usize, q: Vec3) -> Result<FreePeriodLoop> {
    FreePeriodLoop::constant(q, n, 1e-6)
}

/// Moves a constant loop from `a` to `b` (no flux is swept).
fn move_constant(sys: &MagneticSystem, e: f64, path: &mut Vec<LiftedLoop>, n: usize, to: Vec3) -> Result<()> {
    let from = path.last().expect("nonempty path").fpl.nodes()[0];
    let mid = if angle_between(from, to) > 3.0 {
        let (t, _) = tangent_basis(from);
        Some(t)
    } else {
        None
    };
    if let Some(m) = mid {
        push_towards(sys, e, path, &constant_like(n, m)?)?;
    }
    push_towards(sys, e, path, &constant_like(n, to)?)
}

/// One circuit of the generating family at the base point, `sign = +1` adds
/// the total flux and `-1` removes it.
fn push_zeta(sys: &MagneticSystem, e: f64, path: &mut Vec<LiftedLoop>, n: usize, sign: i64) -> Result<()> {
    let k = 160;
    for j in 1..=k {
        let s = if sign > 0 { j as f64 / k as f64 } else { 1.0 - j as f64 / k as f64 };
        let fpl = with_optimal_period(sys, e, zeta_loop(s, n, 1.0)?);
        let next = deform(sys, path.last().expect("nonempty path"), fpl)?;
        path.push(next);
    }
    Ok(())
}

fn apex_candidates(fpl: &FreePeriodLoop) -> Vec<Vec3> {
    match left_apex(fpl) {
        Some(c) => vec![c, -c],
        None => vec![BASE_POINT, -Vec3::Z],
    }
}

/// Path from `a` to `b` through constant loops: contract `a` to an apex,
/// move the constant loop, wind around the generating family as needed to
/// match the ledger, and expand from an apex of `b`.
fn valley_route(sys: &MagneticSystem, e: f64, a: &LiftedLoop, b: &LiftedLoop) -> Result<Vec<LiftedLoop>> {
    let n = a.fpl.len();
    let total = sys.total_flux();
    let ka: Vec<(Vec3, f64)> = apex_candidates(&a.fpl)
        .into_iter()
        .filter_map(|c| cone_flux(&sys.sigma, &a.fpl, c, sys.cone_depth).ok().map(|f| (c, a.flux - f)))
        .collect();
    let kb: Vec<(Vec3, f64)> = apex_candidates(&b.fpl)
        .into_iter()
        .filter_map(|c| cone_flux(&sys.sigma, &b.fpl, c, sys.cone_depth).ok().map(|f| (c, b.flux - f)))
        .collect();
    let tol = 1e-3 * (1.0 + total.abs());
    let mut best: Option<(i64, f64, Vec<LiftedLoop>)> = None;
    for &(ca, fa) in &ka {
        for &(cb, fb) in &kb {
            let diff = fb - fa;
            let k = if total.abs() > tol { libm::round(diff / total) as i64 } else { 0 };
            if (diff - k as f64 * total).abs() > tol {
                continue;
            }
            if let Some((bk, _, _)) = &best {
                if k.abs() > bk.abs() {
                    continue;
                }
            }
            let mut path = vec![a.clone()];
            push_towards(sys, e, &mut path, &constant_like(n, ca)?)?;
            if k != 0 {
                move_constant(sys, e, &mut path, n, BASE_POINT)?;
                for _ in 0..k.abs() {
                    push_zeta(sys, e, &mut path, n, k.signum())?;
                }
            }
            move_constant(sys, e, &mut path, n, cb)?;
            push_towards(sys, e, &mut path, &b.fpl)?;
            let last = path.last().expect("nonempty path");
            if (last.flux - b.flux).abs() > tol {
                continue;
            }
            *path.last_mut().expect("nonempty path") = b.clone();
            let peak = path.iter().map(|l| lifted_action_a(sys, e, l)).fold(f64::NEG_INFINITY, f64::max);
            let better = match &best {
                None => true,
                Some((bk, bp, _)) => k.abs() < bk.abs() || peak < *bp - 1e-12,
            };
            if better {
                best = Some((k, peak, path));
            }
        }
    }
    best.map(|(_, _, p)| p)
        .ok_or_else(|| Error::InvalidArgument("endpoints lie in different components of the loop space".into()))
}

/// Redistributes `m` images along the polyline through `images`, equally
/// spaced on each side of `pivot` (or overall when `pivot` is `None`).
fn reparametrize(
    sys: &MagneticSystem,
    e: f64,
    images: &[LiftedLoop],
    m: usize,
    pivot: Option<usize>,
) -> Result<Vec<LiftedLoop>> {
    let mut cum = vec![0.0];
    for w in images.windows(2) {
        let d = loop_distance(&w[0].fpl, &w[1].fpl);
        cum.push(cum.last().copied().unwrap_or(0.0) + d);
    }
    let total = *cum.last().unwrap_or(&0.0);
    let targets: Vec<f64> = match pivot {
        None => (0..m).map(|j| total * j as f64 / (m - 1) as f64).collect(),
        Some(p) => {
            let sp = cum[p];
            let (left, right) = (p, m - 1 - p);
            let mut t: Vec<f64> = (0..left).map(|j| sp * j as f64 / left as f64).collect();
            t.push(sp);
            t.extend((1..=right).map(|j| sp + (total - sp) * j as f64 / right as f64));
            t
        }
    };
    let mut out = Vec::with_capacity(m);
    let mut seg = 0;
    for (j, &t) in targets.iter().enumerate() {
        if j == 0 {
            out.push(images[0].clone());
            continue;
        }
        if j == m - 1 {
            out.push(images[images.len() - 1].clone());
            continue;
        }
        if let Some(p) = pivot {
            if j == p {
                out.push(images[p].clone());
                continue;
            }
        }
        while seg + 2 < cum.len() && cum[seg + 1] < t {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let u = if len > 0.0 { ((t - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let base = &images[seg];
        if u <= 0.0 {
            out.push(base.clone());
            continue;
        }
        let fpl = interpolate(&base.fpl, &images[seg + 1].fpl, u)?;
        let fpl = with_optimal_period(sys, e, fpl);
        out.push(transport(sys, base, fpl)?);
    }
    Ok(out)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `(1/N) sum <a_i, b_i> + N sum <a_{i+1} - a_i, b_{i+1} - b_i>`.
fn h1_inner(a: &[Vec3], b: &[Vec3]) -> f64 {
    let n = a.len();
    let nf = n as f64;
    let mut s = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        s += a[i].dot(b[i]) / nf + nf * (a[j] - a[i]).dot(b[j] - b[i]);
    }
    s
}

/// Climbing-image update: an Armijo step along the gradient component
/// orthogonal to the path tangent `tau`, then a secant Newton step that
/// maximizes the action along `tau`.
fn climb(
    sys: &MagneticSystem,
    e: f64,
    cur: &LiftedLoop,
    g: &crate::loop_space::LoopGradient,
    tau: &[Vec3],
) -> Result<LiftedLoop> {
    let tt = h1_inner(tau, tau);
    if !(tt > 0.0) {
        return Err(Error::InvalidArgument("zero path tangent".into()));
    }
    let along = |d: &[Vec3]| d.iter().zip(tau).map(|(a, b)| a.dot(*b)).sum::<f64>();
    let coef = along(&g.differential) / tt;
    let perp: Vec<Vec3> = g.node_grads.iter().zip(tau).map(|(gr, t)| -(*gr - *t * coef)).collect();
    let slope: f64 = g.differential.iter().zip(&perp).map(|(d, v)| -d.dot(*v)).sum();
    let a0 = lifted_action_a(sys, e, cur);
    let mut next = cur.clone();
    let mut step = 0.5f64.min(0.05 / max_norm(&perp).max(1e-300));
    while step > 1e-10 && slope > 0.0 {
        let trial = retract(&cur.fpl, &perp, step).and_then(|f| deform(sys, cur, with_optimal_period(sys, e, f)));
        if let Ok(t) = trial {
            if lifted_action_a(sys, e, &t) <= a0 - 1e-4 * step * slope {
                next = t;
                break;
            }
        }
        step *= 0.5;
    }
    let tmax = max_norm(tau).max(1e-300);
    let s0 = along(&action_differential(sys, e, &next.fpl).0);
    let h = 1e-4 / tmax;
    let probe = with_optimal_period(sys, e, retract(&next.fpl, tau, h)?);
    let s1 = along(&action_differential(sys, e, &probe).0);
    let kappa = (s1 - s0) / h;
    let beta = if kappa < 0.0 { -s0 / kappa } else { libm::copysign(0.02 / tmax, s0) };
    let beta = beta.clamp(-0.05 / tmax, 0.05 / tmax);
    let fpl = with_optimal_period(sys, e, retract(&next.fpl, tau, beta)?);
    deform(sys, &next, fpl)
}

/// Climbing-string search for a mountain-pass saddle between two local
/// minimizers of the lifted action.
pub fn minimax_path(
    sys: &MagneticSystem,
    e: f64,
    end_a: &LiftedLoop,
    end_b: &LiftedLoop,
    m: usize,
    cfg: &SolverConfig,
) -> Result<MinimaxResult> {
    if end_a.fpl.len() != end_b.fpl.len() {
        return Err(Error::InvalidArgument(format!(
            "endpoints have {} and {} nodes",
            end_a.fpl.len(),
            end_b.fpl.len()
        )));
    }
    if m < 8 {
        return Err(Error::InvalidArgument(format!("path needs at least 8 images, got {m}")));
    }
    for (index, end) in [end_a, end_b].into_iter().enumerate() {
        let gn = action_gradient(sys, e, end).norm();
        if gn > 1e-4 {
            return Err(Error::EndpointNotMinimal { index, gradient_norm: gn });
        }
    }
    let aa = lifted_action_a(sys, e, end_a);
    if end_a == end_b {
        let gn = action_gradient(sys, e, end_a).norm();
        return Ok(MinimaxResult {
            value: aa,
            argmax_index: 0,
            saddle_gradient_norm: gn,
            converged: true,
            history: vec![aa],
            saddle: end_a.clone(),
            refined: None,
            report: None,
            path: PathOfLoops { images: vec![end_a.clone(); m], pinned: (true, true) },
        });
    }

    let route = valley_route(sys, e, end_a, end_b)?;
    let mut images = reparametrize(sys, e, &route, m, None)?;
    let mut actions: Vec<f64> = images.iter().map(|l| lifted_action_a(sys, e, l)).collect();
    let mut history = Vec::new();
    let mut alphas = vec![0.05f64; m];
    let mut ci_gnorm = f64::INFINITY;
    let warmup = 10;
    let mut converged = false;
    let mut sweeps = 0;

    while sweeps < cfg.max_iter {
        sweeps += 1;
        let ci = if sweeps > warmup { Some(1 + argmax(&actions[1..m - 1])) } else { None };
        for i in 1..m - 1 {
            let g = action_gradient(sys, e, &images[i]);
            let cur = images[i].clone();
            if Some(i) == ci {
                let tau: Vec<Vec3> = images[i + 1]
                    .fpl
                    .nodes()
                    .iter()
                    .zip(images[i - 1].fpl.nodes())
                    .zip(cur.fpl.nodes())
                    .map(|((a, b), x)| (*a - *b).reject(*x))
                    .collect();
                ci_gnorm = g.node_norm();
                if let Ok(next) = climb(sys, e, &cur, &g, &tau) {
                    images[i] = next;
                }
            } else {
                let dir: Vec<Vec3> = g.node_grads.iter().map(|v| -*v).collect();
                let slope: f64 = g.differential.iter().zip(&g.node_grads).map(|(d, v)| d.dot(*v)).sum();
                let cap = 0.05 / max_norm(&dir).max(1e-300);
                let mut step = (alphas[i] * 1.5).min(cap);
                let a0 = actions[i];
                while step > 1e-10 {
                    if let Ok(fpl) = retract(&cur.fpl, &dir, step) {
                        let fpl = with_optimal_period(sys, e, fpl);
                        if let Ok(next) = deform(sys, &cur, fpl) {
                            if lifted_action_a(sys, e, &next) <= a0 - 1e-4 * step * slope {
                                images[i] = next;
                                alphas[i] = step;
                                break;
                            }
                        }
                    }
                    step *= 0.5;
                }
            }
        }
        images = reparametrize(sys, e, &images, m, ci)?;
        actions = images.iter().map(|l| lifted_action_a(sys, e, l)).collect();
        history.push(actions.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        if ci.is_some() && ci_gnorm <= cfg.newton_switch {
            break;
        }
    }

    let ci = 1 + argmax(&actions[1..m - 1]);
    let (saddle, gnorm) = polish(sys, e, &images[ci], PolishMode::Critical, cfg.tol, 40)?;
    if gnorm <= cfg.tol && saddle.fpl.max_displacement(&images[ci].fpl) < 0.3 {
        images[ci] = saddle;
        actions[ci] = lifted_action_a(sys, e, &images[ci]);
        converged = true;
    }
    let saddle_gnorm = if converged { gnorm } else { action_gradient(sys, e, &images[ci]).norm() };
    let argmax_index = argmax(&actions);
    let value = actions[argmax_index];
    history.push(value);
    let saddle = images[ci].clone();
    let (refined, report) = if converged {
        certify_critical(sys, e, &saddle.fpl, saddle_gnorm, cfg)
    } else {
        (None, None)
    };
    Ok(MinimaxResult {
        value,
        argmax_index,
        saddle_gradient_norm: saddle_gnorm,
        converged,
        history,
        saddle,
        refined,
        report,
        path: PathOfLoops { images, pinned: (true, true) },
    })
}

/// Label `(m, n)`: the `m`-fold iterate shifted by `n` deck transformations.
pub type Label = (usize, i64);

/// Doubles the node count by inserting arc midpoints; the polygon and its
/// flux are unchanged.
pub fn subdivide(ll: &LiftedLoop) -> Result<LiftedLoop> {
    let f = &ll.fpl;
    let mut nodes = Vec::with_capacity(2 * f.len());
    for i in 0..f.len() {
        nodes.push(f.nodes()[i]);
        nodes.push(slerp(f.nodes()[i], f.node(i + 1), 0.5));
    }
    Ok(LiftedLoop::new(FreePeriodLoop::new(nodes, f.period())?, ll.flux))
}

/// Endpoint for `label`, built from a waist on `n0` nodes so that every
/// label ends up with `n0 * m_max` nodes.
pub fn labelled_endpoint(
    sys: &MagneticSystem,
    e: f64,
    waist: &LiftedLoop,
    label: Label,
    m_max: usize,
    cfg: &SolverConfig,
) -> Result<LiftedLoop> {
    let (m, n) = label;
    if m == 0 || m_max % m != 0 {
        return Err(Error::InvalidArgument(format!("iterate {m} does not divide {m_max}")));
    }
    let mut base = waist.clone();
    let mut factor = m_max / m;
    let mut refine = false;
    while factor > 1 {
        if factor % 2 == 0 {
            base = subdivide(&base)?;
            factor /= 2;
        } else {
            let fpl = base.fpl.resample(base.fpl.len() * factor)?;
            base = transport(sys, &base, fpl)?;
            factor = 1;
        }
        refine = true;
    }
    if refine {
        base.fpl = with_optimal_period(sys, e, base.fpl);
        base = polish(sys, e, &base, PolishMode::Minimize, cfg.tol, 30)?.0;
    }
    Ok(deck_transform(sys, &iterate(&base, m)?, n))
}

/// Smallest `k` such that the loop is a `k`-fold traversal of a shorter
/// loop, up to `tol` in node position.
pub fn repetition_count(fpl: &FreePeriodLoop, tol: f64) -> usize {
    let n = fpl.len();
    for k in (2..=8).rev() {
        if n % k != 0 {
            continue;
        }
        let shift = n / k;
        if (0..n).all(|i| (fpl.nodes()[i] - fpl.node(i + shift)).norm() < tol) {
            return k;
        }
    }
    1
}

/// Primitive loop underlying a repeated traversal.
pub fn primitive(fpl: &FreePeriodLoop, tol: f64) -> FreePeriodLoop {
    let k = repetition_count(fpl, tol);
    if k == 1 {
        return fpl.clone();
    }
    let m = fpl.len() / k;
    let nodes = fpl.nodes()[..m].to_vec();
    FreePeriodLoop::new(nodes.clone(), fpl.period() / k as f64)
        .unwrap_or_else(|_| FreePeriodLoop::new(nodes.repeat(k), fpl.period()).expect("valid loop"))
}

/// Symmetric Hausdorff distance between the node sets of two loops.
pub fn hausdorff(a: &FreePeriodLoop, b: &FreePeriodLoop) -> f64 {
    let one = |x: &FreePeriodLoop, y: &FreePeriodLoop| {
        x.nodes()
            .iter()
            .map(|p| y.nodes().iter().map(|q| (*p - *q).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one(a, b).max(one(b, a))
}

/// Node-set distance between two loops after densifying both to at least
/// 512 nodes, so that different samplings of the same trace compare equal.
pub fn trace_distance(a: &FreePeriodLoop, b: &FreePeriodLoop) -> f64 {
    let dense = |f: &FreePeriodLoop| {
        let n = f.len() * libm::ceil(512.0 / f.len() as f64).max(1.0) as usize;
        f.resample(n).unwrap_or_else(|_| f.clone())
    };
    hausdorff(&dense(a), &dense(b))
}

/// A certified periodic orbit found by [`multiplicity_search`].
#[derive(Clone, Debug, PartialEq)]
pub struct FoundOrbit {
    /// Where the orbit came from, e.g. `waist` or `saddle (1,0)-(2,0)`.
    pub origin: String,
    pub action: f64,
    /// Primitive periodic orbit.
    pub orbit: FreePeriodLoop,
    /// How many times the critical loop traverses `orbit`.
    pub covering: usize,
    /// Certification of the primitive orbit.
    pub report: OrbitReport,
}

impl FoundOrbit {
    fn new(sys: &MagneticSystem, e: f64, origin: String, action: f64, refined: &FreePeriodLoop, h: f64) -> Option<Self> {
        let covering = repetition_count(refined, 1e-3);
        let orbit = primitive(refined, 1e-3);
        let report = certify_orbit(sys, e, &orbit, h).ok()?;
        report.is_certified().then_some(FoundOrbit { origin, action, orbit, covering, report })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairOutcome {
    pub labels: (Label, Label),
    pub value: Option<f64>,
    pub converged: bool,
    pub certified: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiplicityResult {
    pub waist: Waist,
    pub orbits: Vec<FoundOrbit>,
    pub pairs: Vec<PairOutcome>,
}

fn insert_distinct(orbits: &mut Vec<FoundOrbit>, cand: FoundOrbit) -> bool {
    let dup = orbits.iter().any(|o| {
        let ratio = o.orbit.period() / cand.orbit.period();
        (ratio - 1.0).abs() < 1e-3 && trace_distance(&o.orbit, &cand.orbit) < 1e-3
    });
    if !dup {
        orbits.push(cand);
    }
    !dup
}

fn label_text(l: Label) -> String {
    format!("({},{})", l.0, l.1)
}

/// Waist plus minimax saddles over all pairs of labelled endpoints, certified
/// and deduplicated as primitive orbits.
pub fn multiplicity_search(
    sys: &MagneticSystem,
    e: f64,
    seed: &LiftedLoop,
    labels: &[Label],
    cfg: &SolverConfig,
) -> Result<MultiplicityResult> {
    for (i, a) in labels.iter().enumerate() {
        if labels[..i].contains(a) {
            return Err(Error::InvalidArgument(format!("duplicate label {}", label_text(*a))));
        }
    }
    let waist = find_waist(sys, e, seed, cfg)?;
    let mut orbits = Vec::new();
    if let Some(r) = &waist.refined {
        if let Some(o) = FoundOrbit::new(sys, e, "waist".into(), waist.action, r, cfg.flow_step) {
            insert_distinct(&mut orbits, o);
        }
    }
    let m_max = labels.iter().map(|l| l.0).max().unwrap_or(1);
    let mut ends = Vec::with_capacity(labels.len());
    for &l in labels {
        ends.push(labelled_endpoint(sys, e, &waist.waist, l, m_max, cfg));
    }
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            let mut out = PairOutcome {
                labels: (labels[i], labels[j]),
                value: None,
                converged: false,
                certified: false,
                error: None,
            };
            match (&ends[i], &ends[j]) {
                (Ok(a), Ok(b)) => match minimax_path(sys, e, a, b, cfg.path_nodes, cfg) {
                    Ok(res) => {
                        out.value = Some(res.value);
                        out.converged = res.converged;
                        if let (Some(r), Some(rep)) = (&res.refined, res.report) {
                            out.certified = rep.is_certified();
                            if out.certified {
                                let origin =
                                    format!("saddle {}-{}", label_text(labels[i]), label_text(labels[j]));
                                if let Some(o) = FoundOrbit::new(sys, e, origin, res.value, r, cfg.flow_step) {
                                    insert_distinct(&mut orbits, o);
                                }
                            }
                        }
                    }
                    Err(err) => out.error = Some(format!("{err}")),
                },
                (Err(err), _) | (_, Err(err)) => out.error = Some(format!("{err}")),
            }
            pairs.push(out);
        }
    }
    Ok(MultiplicityResult { waist, orbits, pairs })
}

/// One row of an energy scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRow {
    pub energy: f64,
    pub waist_action: Option<f64>,
    pub minimax_value: Option<f64>,
    pub converged: bool,
    pub certified: bool,
    pub closure_residual: Option<f64>,
    pub error: Option<String>,
}

/// Waist action and minimax value between two labelled endpoints at each
/// energy; the waist is re-solved per energy from `seed`.
pub fn scan_energy(
    sys: &MagneticSystem,
    e_grid: &[f64],
    seed: &LiftedLoop,
    pair: (Label, Label),
    cfg: &SolverConfig,
) -> Vec<ScanRow> {
    let m_max = pair.0 .0.max(pair.1 .0);
    e_grid
        .iter()
        .map(|&e| {
            let mut row = ScanRow {
                energy: e,
                waist_action: None,
                minimax_value: None,
                converged: false,
                certified: false,
                closure_residual: None,
                error: None,
            };
            let mut run = || -> Result<()> {
                let w = find_waist(sys, e, seed, cfg)?;
                row.waist_action = Some(w.action);
                let a = labelled_endpoint(sys, e, &w.waist, pair.0, m_max, cfg)?;
                let b = labelled_endpoint(sys, e, &w.waist, pair.1, m_max, cfg)?;
                let res = minimax_path(sys, e, &a, &b, cfg.path_nodes, cfg)?;
                row.minimax_value = Some(res.value);
                row.converged = res.converged;
                if let Some(rep) = res.report {
                    row.certified = rep.is_certified();
                    row.closure_residual = Some(rep.closure_residual);
                }
                Ok(())
            };
            if let Err(err) = run() {
                row.error = Some(format!("{err}"));
            }
            row
        })
        .collect()
}
