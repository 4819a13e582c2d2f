use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("vector norm {0:e} is too small to project onto the sphere")]
    NearZeroVector(f64),
    #[error("degenerate spherical triangle: vertices are (nearly) antipodal")]
    DegenerateTriangle,
    #[error("invalid loop: {0}")]
    InvalidLoop(String),
    #[error("deformation step too large: node {node} moved {angle:.4} rad (limit 0.5)")]
    StepTooLarge { node: usize, angle: f64 },
    #[error("no admissible cone apex for lifting the loop")]
    LiftFailed,
    #[error("fiber Hessian is not positive definite at a sample (eigenvalue {0:e})")]
    NonConvexFiber(f64),
    #[error("operation requires an electromagnetic Lagrangian")]
    UnsupportedLagrangian,
    #[error("integration blew up at t = {0}")]
    StepExplosion(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("descent entered the valley of short loops (tau = {tau:.4}, p = {period:.4e})")]
    ValleyCollapse { tau: f64, period: f64 },
    #[error("no convergence after {iterations} iterations (gradient norm {gradient_norm:e})")]
    MaxIterations { iterations: usize, gradient_norm: f64 },
    #[error("endpoint {index} is not a local minimizer (gradient norm {gradient_norm:e})")]
    EndpointNotMinimal { index: usize, gradient_norm: f64 },
    #[error("system is not rotationally symmetric about the z axis")]
    NotSymmetric,
    #[error("no negative-action configuration found (trivial bound {trivial_bound})")]
    NoNegativeConfiguration { trivial_bound: f64 },
    #[error("periodic orbit refinement did not converge (residual {0:e})")]
    RefinementFailed(f64),
}

pub type Result<T> = core::result::Result<T, Error>;
