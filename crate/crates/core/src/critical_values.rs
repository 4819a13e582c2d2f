//! The energy thresholds `e0` and a certified lower bound for `e1`, with the
//! latitude-circle reduction for rotationally symmetric systems.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::flow::self_intersections;
use crate::loop_space::{left_apex, lift_with_apex, lifted_action_a, FreePeriodLoop, LiftedLoop, GAUSS8};
use crate::system::MagneticSystem;
use crate::tonelli::e0;
use crate::variational::{find_waist, SolverConfig};
use crate::vec3::Vec3;

const E0_GRID_DEPTH: u32 = 5;
const LATITUDE_GRID: usize = 401;

/// Negative-action witness for an energy.
#[derive(Clone, Debug, PartialEq)]
pub struct E1Certificate {
    pub energy: f64,
    /// Embedded loop lifted by the cone over the region on its left.
    pub witness: LiftedLoop,
    pub action_value: f64,
}

pub fn compute_e0(sys: &MagneticSystem) -> f64 {
    e0(&sys.lagrangian, E0_GRID_DEPTH)
}

fn latitude_point(z: f64) -> Vec3 {
    Vec3::new(libm::sqrt((1.0 - z * z).max(0.0)), 0.0, z)
}

/// `2 pi int_lo^hi f(z) dz` against the round area, 64 Gauss panels.
fn zonal_flux(sys: &MagneticSystem, lo: f64, hi: f64) -> f64 {
    let panels = 64;
    let w = (hi - lo) / panels as f64;
    let mut s = 0.0;
    for k in 0..panels {
        let a = lo + w * k as f64;
        for &(u, gw) in &GAUSS8 {
            s += gw * w * sys.sigma.round_density(latitude_point(a + w * u));
        }
    }
    2.0 * PI * s
}

fn check_symmetric(sys: &MagneticSystem) -> Result<()> {
    if !sys.is_rotationally_symmetric() {
        return Err(Error::NotSymmetric);
    }
    if !sys.lagrangian.is_electromagnetic() {
        return Err(Error::UnsupportedLagrangian);
    }
    Ok(())
}

/// Action of a latitude circle at height `z0`, minimized over the period,
/// plus the flux of the lower cap: `l(z0) sqrt(2(e - U(z0))) + Flux(z0)`.
pub fn latitude_circle_action(sys: &MagneticSystem, e: f64, z0: f64) -> Result<f64> {
    check_symmetric(sys)?;
    if !(z0 > -1.0 && z0 < 1.0) {
        return Err(Error::InvalidArgument(alloc::format!("latitude {z0} outside (-1, 1)")));
    }
    Ok(speed_term(sys, e, z0) + zonal_flux(sys, -1.0, z0))
}

/// Metric length of the latitude times `sqrt(2(e - U))`.
fn speed_term(sys: &MagneticSystem, e: f64, z0: f64) -> f64 {
    let q = latitude_point(z0);
    let len = 2.0 * PI * libm::sqrt(1.0 - z0 * z0) * libm::sqrt(sys.metric().factor(q));
    len * libm::sqrt((2.0 * (e - sys.lagrangian.potential.value(q))).max(0.0))
}

/// Latitude action with either orientation; the reversed circle has the
/// upper cap on its left.
fn oriented_min(sys: &MagneticSystem, e: f64, z0: f64, total: f64) -> f64 {
    let lower = zonal_flux(sys, -1.0, z0);
    speed_term(sys, e, z0) + lower.min(total - lower)
}

/// Infimum over latitudes and both orientations of the latitude action,
/// including the limit of circles shrinking to a pole (reported as
/// `z0 = 1`). Returns `(z0, action)`.
pub fn min_latitude_action(sys: &MagneticSystem, e: f64) -> Result<(f64, f64)> {
    check_symmetric(sys)?;
    let total = zonal_flux(sys, -1.0, 1.0);
    let f = |z: f64| oriented_min(sys, e, z, total);
    let step = 2.0 / (LATITUDE_GRID + 1) as f64;
    let grid: Vec<f64> = (1..=LATITUDE_GRID).map(|k| -1.0 + step * k as f64).collect();
    let mut best = 0;
    let values: Vec<f64> = grid.iter().map(|z| f(*z)).collect();
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    let lo = (grid[best] - step).max(-1.0 + 1e-12);
    let hi = (grid[best] + step).min(1.0 - 1e-12);
    let (z, v) = golden_min(f, lo, hi, 1e-10);
    let interior = if v < values[best] { (z, v) } else { (grid[best], values[best]) };
    // circles shrinking to a pole: the speed term vanishes and the flux on
    // the left tends to 0 or the total flux
    let limit = if total < -1e-9 { total } else { 0.0 };
    Ok(if limit < interior.1 { (1.0, limit) } else { interior })
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = 0.5 * (libm::sqrt(5.0) - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let z = 0.5 * (a + b);
    (z, f(z))
}

/// Largest energy in `(e0, e_max]`, within `tol`, at which some latitude
/// circle has negative action.
pub fn e1_lower_bound_symmetric(sys: &MagneticSystem, e_max: f64, tol: f64) -> Result<f64> {
    check_symmetric(sys)?;
    let e0 = compute_e0(sys);
    if !(e_max > e0 && tol > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("need e_max > e0 = {e0} and tol > 0")));
    }
    let admissible = |e: f64| min_latitude_action(sys, e).map(|(_, a)| a < 0.0);
    let mut lo = e0 + 1e-3 * tol;
    if !admissible(lo)? {
        return Err(Error::NoNegativeConfiguration { trivial_bound: e0 });
    }
    let mut hi = e_max;
    if admissible(hi)? {
        return Ok(hi);
    }
    while hi - lo > 0.5 * tol {
        let mid = 0.5 * (lo + hi);
        if admissible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Twelve circles: three latitudes and three meridians, each in both
/// orientations, the westward equator first.
pub fn seed_bank(n: usize) -> Result<Vec<FreePeriodLoop>> {
    let mut seeds = Vec::with_capacity(12);
    for z0 in [0.0, -0.5, 0.5] {
        let c = FreePeriodLoop::latitude(z0, true, n, 1.0)?;
        seeds.push(c.reversed());
        seeds.insert(seeds.len() - 1, c);
    }
    for deg in [0.0, 60.0, 120.0] {
        let a = deg * PI / 180.0;
        let axis = Vec3::new(-libm::sin(a), libm::cos(a), 0.0);
        let c = FreePeriodLoop::circle(axis, 0.5 * PI, Vec3::Z, n, 1.0)?;
        seeds.push(c.clone());
        seeds.push(c.reversed());
    }
    Ok(seeds)
}

/// Negative-action witness at `e` from the seed bank, if any descent ends
/// at an embedded loop of negative action.
fn witness_at(sys: &MagneticSystem, e: f64, cfg: &SolverConfig) -> Option<E1Certificate> {
    let cfg = SolverConfig { certify: false, ..cfg.clone() };
    let seeds = seed_bank(cfg.loop_nodes).ok()?;
    for seed in seeds {
        let Ok(ll) = crate::loop_space::lift(sys, seed) else { continue };
        let Ok(w) = find_waist(sys, e, &ll, &cfg) else { continue };
        let fpl = w.waist.fpl;
        if self_intersections(&fpl) != 0 {
            continue;
        }
        let Some(apex) = left_apex(&fpl) else { continue };
        let Ok(witness) = lift_with_apex(sys, fpl, apex) else { continue };
        let action_value = lifted_action_a(sys, e, &witness);
        if action_value < 0.0 {
            return Some(E1Certificate { energy: e, witness, action_value });
        }
    }
    None
}

/// Largest energy of `e_grid` admitting an embedded loop of negative action,
/// with its witness. Energies are tried in increasing order; the search stops
/// at the first energy without a witness, since the minimal action is
/// increasing in `e`.
pub fn e1_lower_bound_general(sys: &MagneticSystem, e_grid: &[f64], cfg: &SolverConfig) -> Result<E1Certificate> {
    let e0 = compute_e0(sys);
    let mut grid: Vec<f64> = e_grid.iter().copied().filter(|e| *e > e0).collect();
    grid.sort_by(f64::total_cmp);
    let mut best = None;
    for e in grid {
        match witness_at(sys, e, cfg) {
            Some(c) => best = Some(c),
            None => break,
        }
    }
    best.ok_or(Error::NoNegativeConfiguration { trivial_bound: e0 })
}
