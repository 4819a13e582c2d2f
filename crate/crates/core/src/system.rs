//! A magnetic system: metric, magnetic form and Lagrangian, with the
//! quadrature settings shared by every solver.

use crate::error::{Error, Result};
use crate::sphere_geom::{total_flux, Metric, TwoForm};
use crate::tonelli::{fiber_bounds, FiberBounds, Lagrangian};

/// Default subdivision depth for whole-sphere flux.
pub const DEFAULT_FLUX_DEPTH: u32 = 6;
/// Default subdivision depth for the thin triangles of a sweep.
pub const DEFAULT_SWEEP_DEPTH: u32 = 3;
/// Default subdivision depth for the long triangles of a cone lift.
pub const DEFAULT_CONE_DEPTH: u32 = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct MagneticSystem {
    pub sigma: TwoForm,
    pub lagrangian: Lagrangian,
    /// Subdivision depth used for sweep and cone fluxes.
    pub sweep_depth: u32,
    /// Subdivision depth used when lifting fresh loops by coning.
    pub cone_depth: u32,
    total_flux: f64,
    fiber: FiberBounds,
}

impl MagneticSystem {
    pub fn new(sigma: TwoForm, lagrangian: Lagrangian) -> Result<Self> {
        Self::with_depths(sigma, lagrangian, DEFAULT_FLUX_DEPTH, DEFAULT_SWEEP_DEPTH)
    }

    pub fn with_depths(sigma: TwoForm, lagrangian: Lagrangian, flux_depth: u32, sweep_depth: u32) -> Result<Self> {
        if sigma.metric != lagrangian.metric {
            return Err(Error::InvalidArgument("magnetic form and Lagrangian use different metrics".into()));
        }
        let total = if sigma.density.is_identically_zero() { 0.0 } else { total_flux(&sigma, flux_depth.max(2)) };
        let fiber = fiber_bounds(&lagrangian, &sigma, 2000)?;
        Ok(MagneticSystem { sigma, lagrangian, sweep_depth, cone_depth: DEFAULT_CONE_DEPTH, total_flux: total, fiber })
    }

    pub fn metric(&self) -> &Metric {
        &self.sigma.metric
    }

    /// Cached `int_{S^2} sigma`.
    pub fn total_flux(&self) -> f64 {
        self.total_flux
    }

    pub fn fiber_bounds(&self) -> FiberBounds {
        self.fiber
    }

    /// Round metric, zonal density and potential, no drift, kinetic-type Lagrangian.
    pub fn is_rotationally_symmetric(&self) -> bool {
        self.metric().is_zonal()
            && self.sigma.density.is_zonal()
            && self.lagrangian.potential.is_zonal()
            && self.lagrangian.drift.is_zero()
    }
}
