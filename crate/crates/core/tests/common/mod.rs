//! Test-side oracles shared by the integration tests.

#![allow(dead_code)]

use vpd_core::policy::{GradientRecord, PolicyParams};

/// Central-difference gradient over every stored coordinate, compared with
/// `analytic` as `||a - n|| / max(||a||, ||n||)`.
pub fn fd_relative_error(params: &PolicyParams, analytic: &GradientRecord, f: impl Fn(&PolicyParams) -> f64) -> f64 {
    let h = 1e-5;
    let mut p = params.clone();
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nn = 0.0f64;
    for id in params.coordinates() {
        let x0 = p.get(&id);
        p.set(&id, x0 + h);
        let fp = f(&p);
        p.set(&id, x0 - h);
        let fm = f(&p);
        p.set(&id, x0);
        let n = (fp - fm) / (2.0 * h);
        let a = analytic.get(&id);
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / denom
    }
}

/// Numerically careful `ln(1 + e^x)` written independently of the crate.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
