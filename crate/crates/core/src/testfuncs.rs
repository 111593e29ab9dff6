//! Compactly supported test functions on one subdomain with closed-form
//! partial derivatives.
//!
//! Points are `(x, y, t)` for the single-phase family and `(τ, t)` for the
//! Buckley–Leverett families; `d_dx`/`d2_dx2` then refer to τ.

use crate::quadrature::Subdomain;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TestFnEval {
    pub value: f64,
    pub d_dt: f64,
    pub d_dx: f64,
    pub d2_dx2: f64,
    pub d_dy: f64,
    pub d2_dy2: f64,
}

/// Local coordinates of `point`, rejecting anything outside the closed box.
fn local_coords<const D: usize>(point: &[f64], region: &Subdomain) -> Result<[f64; D]> {
    if point.len() != D || region.dim() != D {
        return Err(Error::Dimension(format!(
            "test function expects {D} coordinates, got point {} / region {}",
            point.len(),
            region.dim()
        )));
    }
    let mut out = [0.0; D];
    for (d, o) in out.iter_mut().enumerate() {
        let v = region.local(point, d);
        if !(v.abs() <= 1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "point {point:?} lies outside region centered at {:?}",
                region.center
            )));
        }
        *o = v;
    }
    Ok(out)
}

/// `(s² − 1)²` and its first two derivatives in `s`.
#[inline]
fn quartic(s: f64) -> (f64, f64, f64) {
    let q = s * s - 1.0;
    (q * q, 4.0 * s * q, 12.0 * s * s - 4.0)
}

/// `(s² − 1)` and its first two derivatives in `s`.
#[inline]
fn quadratic(s: f64) -> (f64, f64, f64) {
    (s * s - 1.0, 2.0 * s, 2.0)
}

/// `ω = (x̄² − 1)²(ȳ² − 1)²(t̄² − 1)`.
pub fn omega_sp(point: &[f64], region: &Subdomain) -> Result<TestFnEval> {
    let [xb, yb, tb] = local_coords::<3>(point, region)?;
    let (hx, hy, ht) = (region.half[0], region.half[1], region.half[2]);
    let (ax, ax1, ax2) = quartic(xb);
    let (ay, ay1, ay2) = quartic(yb);
    let (at, at1, _) = quadratic(tb);
    Ok(TestFnEval {
        value: ax * ay * at,
        d_dt: ax * ay * at1 / ht,
        d_dx: ax1 * ay * at / hx,
        d2_dx2: ax2 * ay * at / (hx * hx),
        d_dy: ax * ay1 * at / hy,
        d2_dy2: ax * ay2 * at / (hy * hy),
    })
}

/// `ω = (τ̄² − 1)(t̄² − 1)`.
pub fn omega_bl(point: &[f64], region: &Subdomain) -> Result<TestFnEval> {
    let [sb, tb] = local_coords::<2>(point, region)?;
    let (hs, ht) = (region.half[0], region.half[1]);
    let (a, a1, a2) = quadratic(sb);
    let (b, b1, _) = quadratic(tb);
    Ok(TestFnEval {
        value: a * b,
        d_dt: a * b1 / ht,
        d_dx: a1 * b / hs,
        d2_dx2: a2 * b / (hs * hs),
        ..Default::default()
    })
}

/// `ω = (τ̄² − 1)²(t̄² − 1)`; `∂ω/∂τ` also vanishes on the τ faces.
pub fn omega_bl_diffusion(point: &[f64], region: &Subdomain) -> Result<TestFnEval> {
    let [sb, tb] = local_coords::<2>(point, region)?;
    let (hs, ht) = (region.half[0], region.half[1]);
    let (a, a1, a2) = quartic(sb);
    let (b, b1, _) = quadratic(tb);
    Ok(TestFnEval {
        value: a * b,
        d_dt: a * b1 / ht,
        d_dx: a1 * b / hs,
        d2_dx2: a2 * b / (hs * hs),
        ..Default::default()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestFamily {
    SinglePhase,
    Advection,
    AdvectionDiffusion,
}

impl TestFamily {
    pub fn eval(self, point: &[f64], region: &Subdomain) -> Result<TestFnEval> {
        match self {
            TestFamily::SinglePhase => omega_sp(point, region),
            TestFamily::Advection => omega_bl(point, region),
            TestFamily::AdvectionDiffusion => omega_bl_diffusion(point, region),
        }
    }
}
