//! Small dense and banded solvers.

use alloc::vec;
use alloc::vec::Vec;

/// Solves the symmetric cyclic tridiagonal system with constant diagonal `d`
/// and constant off-diagonal `o` (including the corner entries) in place.
/// Requires `|d| > 2|o|` and `rhs.len() >= 3`.
pub(crate) fn cyclic_tridiag_solve(d: f64, o: f64, rhs: &mut [f64]) {
    let n = rhs.len();
    // Sherman-Morrison: A = T + u v^T with u = (gamma, 0, .., 0, o), v = (1, 0, .., 0, o / gamma).
    let gamma = -d;
    let mut diag = vec![d; n];
    diag[0] = d - gamma;
    diag[n - 1] = d - o * o / gamma;
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = o;
    thomas(&diag, o, rhs);
    thomas(&diag, o, &mut u);
    let num = rhs[0] + o / gamma * rhs[n - 1];
    let den = 1.0 + u[0] + o / gamma * u[n - 1];
    let fac = num / den;
    for (r, ui) in rhs.iter_mut().zip(&u) {
        *r -= fac * ui;
    }
}

fn thomas(diag: &[f64], o: f64, x: &mut [f64]) {
    let n = x.len();
    let mut c: Vec<f64> = vec![0.0; n];
    c[0] = o / diag[0];
    x[0] /= diag[0];
    for i in 1..n {
        let m = diag[i] - o * c[i - 1];
        c[i] = o / m;
        x[i] = (x[i] - o * x[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
}
