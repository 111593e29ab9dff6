//! Truncated Karhunen–Loève expansion of `ln K` for a separable exponential
//! covariance `exp(−|Δx|/η_x − |Δy|/η_y)` with unit variance on `[0, L]²`.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::losses::Conductivity;
use crate::{Error, Result};

/// One-dimensional eigenpair: `λ = 2η/(η²w² + 1)` and
/// `f(x) = (ηw cos wx + sin wx) / √((η²w² + 1)L/2 + η)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode1D {
    pub w: f64,
    pub lambda: f64,
    eta: f64,
    norm: f64,
}

impl Mode1D {
    fn new(w: f64, eta: f64, length: f64) -> Self {
        let a = eta * eta * w * w + 1.0;
        Self {
            w,
            lambda: 2.0 * eta / a,
            eta,
            norm: (a * length / 2.0 + eta).sqrt(),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        let (s, c) = (self.w * x).sin_cos();
        (self.eta * self.w * c + s) / self.norm
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let (s, c) = (self.w * x).sin_cos();
        self.w * (c - self.eta * self.w * s) / self.norm
    }
}

/// First `n` eigenpairs on `[0, length]`. The k-th root of
/// `(η²w² − 1) sin wL − 2ηw cos wL` lies in `(kπ/L, (k+1)π/L)`.
pub fn modes_1d(eta: f64, length: f64, n: usize) -> Result<Vec<Mode1D>> {
    if !(eta > 0.0 && length > 0.0) {
        return Err(Error::config(format!("correlation length {eta} and domain {length} must be positive")));
    }
    let g = |w: f64| (eta * eta * w * w - 1.0) * (w * length).sin() - 2.0 * eta * w * (w * length).cos();
    let step = std::f64::consts::PI / length;
    (0..n)
        .map(|k| {
            let mut a = k as f64 * step;
            let mut b = (k + 1) as f64 * step;
            // w = 0 is a trivial root; start just inside the first interval
            if k == 0 {
                a = 1e-9 * step;
            }
            let (mut ga, gb) = (g(a), g(b));
            if ga.signum() == gb.signum() {
                return Err(Error::Numeric(format!("KLE root {k} not bracketed on [{a}, {b}]")));
            }
            for _ in 0..200 {
                let c = 0.5 * (a + b);
                if c <= a || c >= b {
                    break;
                }
                let gc = g(c);
                if gc.signum() == ga.signum() {
                    a = c;
                    ga = gc;
                } else {
                    b = c;
                }
            }
            Ok(Mode1D::new(0.5 * (a + b), eta, length))
        })
        .collect()
}

/// A two-dimensional product mode `f_i(x) g_j(y)` with eigenvalue `λ_i μ_j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode2D {
    pub i: usize,
    pub j: usize,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConductivityField {
    pub length: f64,
    pub eta: (f64, f64),
    modes_x: Vec<Mode1D>,
    modes_y: Vec<Mode1D>,
    pub modes: Vec<Mode2D>,
    pub xi: Vec<f64>,
}

/// 1-D modes generated per axis before forming products; the top products
/// only ever use low indices.
const MODES_PER_AXIS: usize = 40;

/// Top `n_terms` product modes and `ξ ~ N(0, 1)` drawn from `seed`.
pub fn kle_build(length: f64, eta: (f64, f64), n_terms: usize, seed: u64) -> Result<ConductivityField> {
    let modes_x = modes_1d(eta.0, length, MODES_PER_AXIS)?;
    let modes_y = modes_1d(eta.1, length, MODES_PER_AXIS)?;
    let mut products: Vec<Mode2D> = modes_x
        .iter()
        .enumerate()
        .flat_map(|(i, mx)| {
            modes_y.iter().enumerate().map(move |(j, my)| Mode2D {
                i,
                j,
                lambda: mx.lambda * my.lambda,
            })
        })
        .collect();
    products.sort_by(|a, b| b.lambda.total_cmp(&a.lambda).then(a.i.cmp(&b.i)).then(a.j.cmp(&b.j)));
    products.truncate(n_terms);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = (0..products.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(ConductivityField {
        length,
        eta,
        modes_x,
        modes_y,
        modes: products,
        xi,
    })
}

impl ConductivityField {
    pub fn with_xi(mut self, xi: Vec<f64>) -> Result<Self> {
        if xi.len() != self.modes.len() {
            return Err(Error::Dimension(format!("{} coefficients for {} modes", xi.len(), self.modes.len())));
        }
        self.xi = xi;
        Ok(self)
    }

    /// `ln K` and its gradient.
    pub fn ln_k(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (mut v, mut dx, mut dy) = (0.0, 0.0, 0.0);
        for (m, &xi) in self.modes.iter().zip(&self.xi) {
            let c = m.lambda.sqrt() * xi;
            let (fx, gy) = (&self.modes_x[m.i], &self.modes_y[m.j]);
            let (a, b) = (fx.value(x), gy.value(y));
            v += c * a * b;
            dx += c * fx.derivative(x) * b;
            dy += c * a * gy.derivative(y);
        }
        (v, dx, dy)
    }

    /// `(K, ∂K/∂x, ∂K/∂y)`.
    pub fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (l, lx, ly) = self.ln_k(x, y);
        let k = l.exp();
        (k, k * lx, k * ly)
    }

    /// Pointwise variance of the truncated `ln K`: `Σ λ_n f_n²`.
    pub fn truncated_variance(&self, x: f64, y: f64) -> f64 {
        self.modes
            .iter()
            .map(|m| m.lambda * (self.modes_x[m.i].value(x) * self.modes_y[m.j].value(y)).powi(2))
            .sum()
    }

    /// Mode metadata followed by `ln K` on the given node coordinates
    /// (row-major, `ys` outer).
    pub fn to_text(&self, xs: &[f64], ys: &[f64]) -> String {
        let mut out = String::new();
        writeln!(out, "kle-field 1").unwrap();
        writeln!(out, "length {:?}", self.length).unwrap();
        writeln!(out, "eta {:?} {:?}", self.eta.0, self.eta.1).unwrap();
        writeln!(out, "modes {}", self.modes.len()).unwrap();
        for (m, xi) in self.modes.iter().zip(&self.xi) {
            writeln!(out, "{} {} {:?} {:?}", m.i, m.j, m.lambda, xi).unwrap();
        }
        writeln!(out, "grid {} {}", ys.len(), xs.len()).unwrap();
        for &y in ys {
            let row: Vec<String> = xs.iter().map(|&x| format!("{:?}", self.ln_k(x, y).0)).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
        out
    }

    /// Rebuilds the field from its metadata and checks the stored grid.
    pub fn from_text(text: &str, xs: &[f64], ys: &[f64]) -> Result<Self> {
        let bad = |m: &str| Error::parse(format!("field file: {m}"));
        let mut lines = text.lines();
        let mut next = || lines.next().ok_or_else(|| bad("truncated"));
        if next()? != "kle-field 1" {
            return Err(bad("missing header"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(&format!("`{s}`: {e}")));
        let length = num(next()?.strip_prefix("length ").ok_or_else(|| bad("length"))?)?;
        let eta_line = next()?.strip_prefix("eta ").ok_or_else(|| bad("eta"))?.to_string();
        let etas: Vec<f64> = eta_line.split_whitespace().map(num).collect::<Result<_>>()?;
        let [ex, ey] = etas[..] else { return Err(bad("eta needs two values")) };
        let count: usize = next()?
            .strip_prefix("modes ")
            .ok_or_else(|| bad("modes"))?
            .parse()
            .map_err(|_| bad("mode count"))?;
        let mut field = kle_build(length, (ex, ey), count, 0)?;
        let mut xi = Vec::with_capacity(count);
        for k in 0..count {
            let line = next()?;
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 4 {
                return Err(bad(&format!("mode line `{line}`")));
            }
            let (i, j): (usize, usize) = (t[0].parse().map_err(|_| bad("i"))?, t[1].parse().map_err(|_| bad("j"))?);
            let m = field.modes[k];
            if (m.i, m.j) != (i, j) || m.lambda != num(t[2])? {
                return Err(bad(&format!("mode {k} does not match the rebuilt expansion")));
            }
            xi.push(num(t[3])?);
        }
        field.xi = xi;
        let dims = next()?.to_string();
        if dims != format!("grid {} {}", ys.len(), xs.len()) {
            return Err(bad(&format!("grid header `{dims}`")));
        }
        for &y in ys {
            let row: Vec<f64> = next()?.split_whitespace().map(num).collect::<Result<_>>()?;
            if row.len() != xs.len() {
                return Err(bad("short grid row"));
            }
            for (&x, &v) in xs.iter().zip(&row) {
                if field.ln_k(x, y).0 != v {
                    return Err(bad(&format!("ln K mismatch at ({x}, {y})")));
                }
            }
        }
        Ok(field)
    }

    pub fn save(&self, path: impl AsRef<Path>, xs: &[f64], ys: &[f64]) -> Result<()> {
        std::fs::write(path, self.to_text(xs, ys))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, xs: &[f64], ys: &[f64]) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, xs, ys)
    }
}

impl Conductivity for ConductivityField {
    fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        ConductivityField::eval(self, x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const L: f64 = 1020.0;
    const ETA: f64 = 204.0;

    fn centers() -> Vec<f64> {
        (0..51).map(|i| 10.0 + 20.0 * i as f64).collect()
    }

    #[test]
    fn zero_xi_is_unit_field() {
        let f = kle_build(L, (ETA, ETA), 20, 1).unwrap().with_xi(vec![0.0; 20]).unwrap();
        assert_eq!(f.eval(123.0, 456.0), (1.0, 0.0, 0.0));
    }

    #[test]
    fn eigenvalues_sorted_and_truncated() {
        let f = kle_build(L, (ETA, ETA), 20, 1).unwrap();
        assert_eq!(f.modes.len(), 20);
        assert!(f.modes.windows(2).all(|w| w[0].lambda >= w[1].lambda));
        assert!(kle_build(L, (0.0, ETA), 20, 1).is_err());
    }

    #[test]
    fn roots_satisfy_equation_and_are_orthonormal() {
        let modes = modes_1d(ETA, L, 10).unwrap();
        let n = 20_000;
        let h = L / n as f64;
        for (a, ma) in modes.iter().enumerate() {
            for (b, mb) in modes.iter().enumerate() {
                // midpoint rule on a fine grid
                let ip: f64 = (0..n).map(|k| {
                    let x = (k as f64 + 0.5) * h;
                    ma.value(x) * mb.value(x)
                }).sum::<f64>() * h;
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((ip - expected).abs() < 1e-6, "<f{a}, f{b}> = {ip}");
            }
        }
    }

    /// Dense eigenvalues of the 51-point Nyström discretisation of the 1-D
    /// kernel; the 2-D kernel is a Kronecker product, so its spectrum is the
    /// set of pairwise products.
    fn dense_1d(eta: f64) -> Vec<f64> {
        let x = centers();
        let c = nalgebra::DMatrix::from_fn(51, 51, |i, j| (-(x[i] - x[j]).abs() / eta).exp() * 20.0);
        let mut ev: Vec<f64> = c.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    #[test]
    fn spectrum_matches_dense_oracle() {
        let dense = dense_1d(ETA);
        let modes = modes_1d(ETA, L, 8).unwrap();
        for (m, d) in modes.iter().zip(&dense) {
            assert!((m.lambda - d).abs() / d < 0.02, "{} vs {d}", m.lambda);
        }
        let mut prod: Vec<f64> = dense.iter().flat_map(|a| dense.iter().map(move |b| a * b)).collect();
        prod.sort_by(|a, b| b.total_cmp(a));
        let f = kle_build(L, (ETA, ETA), 20, 0).unwrap();
        for (m, d) in f.modes.iter().zip(&prod) {
            assert!((m.lambda - d).abs() / d < 0.03, "{} vs {d}", m.lambda);
        }
        // share of Σλ² held by the 20 retained modes
        let total2: f64 = prod.iter().map(|v| v * v).sum();
        let kept2: f64 = f.modes.iter().map(|m| m.lambda * m.lambda).sum();
        assert!(kept2 / total2 >= 0.8, "captured {}", kept2 / total2);
    }

    #[test]
    fn monte_carlo_statistics() {
        let base = kle_build(L, (ETA, ETA), 20, 0).unwrap();
        let pts = [(10.0, 10.0), (500.0, 300.0), (1010.0, 700.0)];
        let n = 10_000;
        let mut sums = [0.0; 3];
        let mut sq = [0.0; 3];
        for seed in 0..n {
            let f = kle_build(L, (ETA, ETA), 20, seed).unwrap();
            for (k, &(x, y)) in pts.iter().enumerate() {
                let v = f.ln_k(x, y).0;
                sums[k] += v;
                sq[k] += v * v;
            }
        }
        for (k, &(x, y)) in pts.iter().enumerate() {
            let var = base.truncated_variance(x, y);
            let mean = sums[k] / n as f64;
            let sample_var = sq[k] / n as f64 - mean * mean;
            assert!(mean.abs() < 5.0 * (var / n as f64).sqrt(), "mean {mean}");
            assert!((sample_var - var).abs() < 0.1 * var, "var {sample_var} vs {var}");
        }
    }

    #[test]
    fn field_file_round_trip() {
        let f = kle_build(L, (ETA, ETA), 20, 42).unwrap();
        let xs = centers();
        let back = ConductivityField::from_text(&f.to_text(&xs, &xs), &xs, &xs).unwrap();
        assert_eq!(f, back);
        let mut broken = f.to_text(&xs, &xs);
        broken = broken.replacen("grid 51 51", "grid 50 51", 1);
        assert!(ConductivityField::from_text(&broken, &xs, &xs).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn gradient_matches_fd(seed in 0u64..50, x in 20.0f64..1000.0, y in 20.0f64..1000.0) {
            let f = kle_build(L, (ETA, ETA), 20, seed).unwrap();
            let (k, kx, ky) = f.eval(x, y);
            prop_assert!(k > 0.0);
            let h = 1e-3;
            let fdx = (f.eval(x + h, y).0 - f.eval(x - h, y).0) / (2.0 * h);
            let fdy = (f.eval(x, y + h).0 - f.eval(x, y - h).0) / (2.0 * h);
            // gradients are O(k/η); measure against that scale
            let scale = k / ETA;
            prop_assert!((kx - fdx).abs() <= 1e-7 * fdx.abs().max(scale), "{} vs {}", kx, fdx);
            prop_assert!((ky - fdy).abs() <= 1e-7 * fdy.abs().max(scale), "{} vs {}", ky, fdy);
        }
    }
}
