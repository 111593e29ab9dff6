//! Gauss–Legendre rules, tensor-product quadrature over space-time boxes and
//! Latin hypercube sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Matrix;
use crate::{Error, Result};

pub const MAX_NODES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct QuadRule1D {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadRule1D {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `∫₋₁¹ f` under this rule.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Legendre `P_n(x)` and `P_n'(x)` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// n-point Gauss–Legendre rule on [−1, 1], nodes ascending.
pub fn gauss_legendre(n: usize) -> Result<QuadRule1D> {
    if !(1..=MAX_NODES).contains(&n) {
        return Err(Error::config(format!(
            "Gauss-Legendre order must be in 1..={MAX_NODES}, got {n}"
        )));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Chebyshev-like initial guess for the i-th largest root
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-14 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d.is_finite() {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok(QuadRule1D { nodes, weights })
}

/// Axis-aligned box given by its center and half-lengths, physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct Subdomain {
    pub center: Vec<f64>,
    pub half: Vec<f64>,
}

impl Subdomain {
    pub fn new(center: Vec<f64>, half: Vec<f64>) -> Result<Self> {
        if center.len() != half.len() || center.is_empty() {
            return Err(Error::config(format!(
                "subdomain center has {} coordinates, half-lengths {}",
                center.len(),
                half.len()
            )));
        }
        if half.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::config(format!("half-lengths must be positive: {half:?}")));
        }
        Ok(Self { center, half })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn volume(&self) -> f64 {
        self.half.iter().map(|h| 2.0 * h).product()
    }

    /// Local coordinate `(p_d − c_d)/H_d`.
    pub fn local(&self, point: &[f64], d: usize) -> f64 {
        (point[d] - self.center[d]) / self.half[d]
    }
}

/// Tensor-product points (`Π n_d × dim`, last dimension fastest) and
/// weights scaled by `Π H_d`.
pub fn tensor_rule(per_dim: &[QuadRule1D], region: &Subdomain) -> Result<(Matrix, Vec<f64>)> {
    let dim = region.dim();
    if per_dim.len() != dim {
        return Err(Error::config(format!(
            "{} quadrature rules for a {dim}-dimensional region",
            per_dim.len()
        )));
    }
    let total: usize = per_dim.iter().map(QuadRule1D::len).product();
    let jac: f64 = region.half.iter().product();
    let mut points = Matrix::zeros((total, dim));
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; dim];
    for q in 0..total {
        let mut w = jac;
        for d in 0..dim {
            let rule = &per_dim[d];
            points[[q, d]] = region.center[d] + region.half[d] * rule.nodes[idx[d]];
            w *= rule.weights[idx[d]];
        }
        weights.push(w);
        for d in (0..dim).rev() {
            idx[d] += 1;
            if idx[d] < per_dim[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((points, weights))
}

fn check_bounds(bounds: &[(f64, f64)]) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::config("sampling bounds are empty"));
    }
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config(format!("invalid bounds ({lo}, {hi}) in dimension {d}")));
        }
    }
    Ok(())
}

/// `n × dim` Latin hypercube: every dimension has exactly one point in each of
/// its `n` equal strata.
pub fn latin_hypercube(n: usize, bounds: &[(f64, f64)], seed: u64) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::config("latin hypercube needs n >= 1"));
    }
    check_bounds(bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Matrix::zeros((n, bounds.len()));
    let mut strata: Vec<usize> = (0..n).collect();
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        strata.shuffle(&mut rng);
        let width = (hi - lo) / n as f64;
        for (i, &k) in strata.iter().enumerate() {
            let u: f64 = rng.random();
            // stay inside the stratum despite rounding
            let v = lo + (k as f64 + u) * width;
            let top = lo + (k + 1) as f64 * width;
            out[[i, d]] = if v >= top { v.next_down().max(lo + k as f64 * width) } else { v };
        }
    }
    Ok(out)
}

/// Uniform i.i.d. points in a box.
pub fn uniform_points(n: usize, bounds: &[(f64, f64)], seed: u64) -> Result<Matrix> {
    check_bounds(bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Matrix::zeros((n, bounds.len()));
    for i in 0..n {
        for (d, &(lo, hi)) in bounds.iter().enumerate() {
            out[[i, d]] = rng.random_range(lo..hi);
        }
    }
    Ok(out)
}

/// `n` regions with LHS centers, shrunk by `half` so every region lies inside
/// `bounds`.
pub fn sample_regions(n: usize, bounds: &[(f64, f64)], half: &[f64], seed: u64) -> Result<Vec<Subdomain>> {
    if half.len() != bounds.len() {
        return Err(Error::config(format!(
            "{} half-lengths for {} dimensions",
            half.len(),
            bounds.len()
        )));
    }
    let inner: Vec<(f64, f64)> = bounds
        .iter()
        .zip(half)
        .map(|(&(lo, hi), &h)| (lo + h, hi - h))
        .collect();
    if inner.iter().any(|&(lo, hi)| !(lo < hi)) {
        return Err(Error::config(format!(
            "regions with half-lengths {half:?} do not fit in {bounds:?}"
        )));
    }
    let centers = latin_hypercube(n, &inner, seed)?;
    centers
        .rows()
        .into_iter()
        .map(|c| Subdomain::new(c.to_vec(), half.to_vec()))
        .collect()
}
