//! One-dimensional Buckley–Leverett displacement in travel-time coordinates:
//! fractional flow, the Welge shock and the self-similar analytic solution.

use std::io::Write;
use std::path::Path;

use std::ops::RangeInclusive;

use crate::diffcore::{Matrix, Var};
use crate::evalkit::{BenchmarkSetup, EvalSet, Model, ProblemConfig, SnapshotGrid, training_data};
use crate::losses::{LabeledPoints, ResidualTerm, StrongBuckley, WeakBuckley};
use crate::network::Normalization;
use crate::optimizer::TrainingProblem;
use crate::quadrature::{gauss_legendre, latin_hypercube, sample_regions};
use crate::{Error, Result};

/// Corey-type fractional flow `f_w = m S_e² / (m S_e² + (1 − S_e)²)` with
/// `S_e = (S − S_wr)/(1 − S_wr − S_or)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FracFlow {
    pub m: f64,
    pub s_wr: f64,
    pub s_or: f64,
}

impl Default for FracFlow {
    fn default() -> Self {
        Self {
            m: 2.0,
            s_wr: 0.0,
            s_or: 0.0,
        }
    }
}

impl FracFlow {
    pub fn new(m: f64, s_wr: f64, s_or: f64) -> Result<Self> {
        if !(m > 0.0) || !(s_wr >= 0.0) || !(s_or >= 0.0) || !(s_wr + s_or < 1.0) {
            return Err(Error::config(format!(
                "invalid fractional-flow parameters m={m}, S_wr={s_wr}, S_or={s_or}"
            )));
        }
        Ok(Self { m, s_wr, s_or })
    }

    fn mobile(&self) -> f64 {
        1.0 - self.s_wr - self.s_or
    }

    pub fn s_max(&self) -> f64 {
        1.0 - self.s_or
    }

    fn check(&self, s: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Domain(format!("saturation {s} outside [0, 1]")));
        }
        Ok(((s - self.s_wr) / self.mobile()).clamp(0.0, 1.0))
    }

    pub fn fw(&self, s: f64) -> Result<f64> {
        let e = self.check(s)?;
        let a = self.m * e * e;
        Ok(a / (a + (1.0 - e) * (1.0 - e)))
    }

    pub fn fw_prime(&self, s: f64) -> Result<f64> {
        let e = self.check(s)?;
        let d = self.m * e * e + (1.0 - e) * (1.0 - e);
        Ok(2.0 * self.m * e * (1.0 - e) / (d * d) / self.mobile())
    }
}

/// `f_w(S)` on the tape (no clamping; the network output may leave [0, 1]).
pub fn fw_var<'t>(frac: &FracFlow, s: &Var<'t>) -> Result<Var<'t>> {
    let e = s.add_scalar(-frac.s_wr)?.scale(1.0 / frac.mobile());
    let a = e.square().scale(frac.m);
    let b = e.neg().add_scalar(1.0)?.square();
    Ok(a.div(&a.add(&b)?)?)
}

/// `f'_w(S)` on the tape.
pub fn fw_prime_var<'t>(frac: &FracFlow, s: &Var<'t>) -> Result<Var<'t>> {
    let e = s.add_scalar(-frac.s_wr)?.scale(1.0 / frac.mobile());
    let one_minus = e.neg().add_scalar(1.0)?;
    let d = e.square().scale(frac.m).add(&one_minus.square())?;
    let num = e.mul(&one_minus)?.scale(2.0 * frac.m / frac.mobile());
    Ok(num.div(&d.square())?)
}

fn bisect(mut a: f64, mut b: f64, g: impl Fn(f64) -> Result<f64>, what: &str) -> Result<f64> {
    let (mut ga, gb) = (g(a)?, g(b)?);
    if ga == 0.0 {
        return Ok(a);
    }
    if gb == 0.0 {
        return Ok(b);
    }
    if ga.signum() == gb.signum() {
        return Err(Error::Numeric(format!("{what}: no sign change on [{a}, {b}]")));
    }
    for _ in 0..200 {
        let c = 0.5 * (a + b);
        if c <= a || c >= b || b - a <= 1e-15 {
            break;
        }
        let gc = g(c)?;
        if gc == 0.0 {
            return Ok(c);
        }
        if gc.signum() == ga.signum() {
            a = c;
            ga = gc;
        } else {
            b = c;
        }
    }
    Ok(0.5 * (a + b))
}

/// Shock saturation from the tangency `f'_w(S)(S − S_wr) = f_w(S) − f_w(S_wr)`,
/// and the shock speed `f'_w(S*)`.
pub fn welge_shock(frac: &FracFlow) -> Result<(f64, f64)> {
    let f0 = frac.fw(frac.s_wr)?;
    let g = |s: f64| Ok(frac.fw_prime(s)? * (s - frac.s_wr) - (frac.fw(s)? - f0));
    let eps = 1e-9 * frac.mobile();
    let s_star = bisect(frac.s_wr + eps, frac.s_max(), g, "Welge tangency")?;
    Ok((s_star, frac.fw_prime(s_star)?))
}

/// Analytic solution together with the reporting grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BLSolution {
    pub frac: FracFlow,
    pub s_star: f64,
    pub shock_speed: f64,
    pub tau: Vec<f64>,
    pub times: Vec<f64>,
}

pub const TAU_POINTS: usize = 501;
pub const TAU_SPACING: f64 = 0.002;
pub const STEPS: usize = 50;
pub const DT: f64 = 0.02;

impl BLSolution {
    pub fn new(frac: FracFlow) -> Result<Self> {
        let (s_star, shock_speed) = welge_shock(&frac)?;
        Ok(Self {
            frac,
            s_star,
            shock_speed,
            tau: (0..TAU_POINTS).map(|i| i as f64 * TAU_SPACING).collect(),
            times: (1..=STEPS).map(|k| k as f64 * DT).collect(),
        })
    }

    /// Saturation at time step `k` (1-based) on the τ grid.
    pub fn snapshot(&self, step: usize) -> Result<Vec<f64>> {
        let t = self.times[step - 1];
        self.tau.iter().map(|&tau| analytic_s(tau, t, self)).collect()
    }

    /// All steps, CSV rows `t,tau,S`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,tau,S")?;
        for k in 1..=self.times.len() {
            let t = self.times[k - 1];
            for (tau, s) in self.tau.iter().zip(self.snapshot(k)?) {
                writeln!(out, "{t:?},{tau:?},{s:?}")?;
            }
        }
        Ok(())
    }

    /// Space-time points `(τ, t)` and values for steps in `steps` (1-based).
    pub fn grid_values(&self, steps: std::ops::RangeInclusive<usize>) -> Result<(Matrix, Vec<f64>)> {
        let nt = steps.clone().count();
        let n = self.tau.len();
        let mut coords = Matrix::zeros((nt * n, 2));
        let mut vals = Vec::with_capacity(nt * n);
        for (j, k) in steps.enumerate() {
            let t = self.times[k - 1];
            for (i, (&tau, s)) in self.tau.iter().zip(self.snapshot(k)?).enumerate() {
                coords[[j * n + i, 0]] = tau;
                coords[[j * n + i, 1]] = t;
                vals.push(s);
            }
        }
        Ok((coords, vals))
    }
}

/// `S(τ, t) = s(τ/t) H[f'_w(S*) − τ/t]` where `f'_w(s(v)) = v` on `[S*, 1 − S_or]`.
pub fn analytic_s(tau: f64, t: f64, sol: &BLSolution) -> Result<f64> {
    if !(t > 0.0) || !(tau >= 0.0) {
        return Err(Error::Domain(format!("analytic solution needs t > 0 and tau >= 0, got ({tau}, {t})")));
    }
    let frac = &sol.frac;
    if tau == 0.0 {
        return Ok(frac.s_max());
    }
    let v = tau / t;
    if v > sol.shock_speed {
        return Ok(frac.s_wr);
    }
    if v == sol.shock_speed {
        return Ok(sol.s_star);
    }
    // f'_w decreases from the shock speed at S* to 0 at 1 − S_or
    bisect(sol.s_star, frac.s_max(), |s| Ok(frac.fw_prime(s)? - v), "rarefaction inversion")
}

impl BLSolution {
    /// All 50 steps on the τ grid.
    pub fn to_grid(&self) -> Result<SnapshotGrid> {
        let values = (1..=self.times.len()).map(|k| self.snapshot(k)).collect::<Result<_>>()?;
        Ok(SnapshotGrid {
            nodes: Matrix::from_shape_vec((self.tau.len(), 1), self.tau.clone()).expect("column shape"),
            times: self.times.clone(),
            values,
        })
    }
}

pub const TRAIN_STEPS: RangeInclusive<usize> = 1..=20;
pub const EVAL_STEPS: RangeInclusive<usize> = 21..=50;
/// Each of the IC and BC sets.
pub const IC_POINTS: usize = 1000;
pub const BC_POINTS: usize = 1000;
/// Region edge over domain length giving `H_τ = H_t = 0.004`.
pub const DEFAULT_RELATIVE_SIZE: f64 = 0.008;
pub const DEFAULT_QUAD_POINTS: usize = 10;

/// `(τ, t) ∈ [0, 1]²`.
pub fn domain() -> [(f64, f64); 2] {
    [(0.0, 1.0), (0.0, 1.0)]
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(0x2545_f491_4f6c_dd1d))
}

/// `S = 0` at `t = 0` and `S = 1 − S_or` at `τ = 0`.
pub fn ic_bc_points(frac: &FracFlow, seed: u64) -> Result<(LabeledPoints, LabeledPoints)> {
    let norm = Normalization::identity(2);
    let [tb, ttb] = domain();
    let line = |n: usize, bounds: (f64, f64), s: u64| latin_hypercube(n, &[bounds], s);
    let ic_tau = line(IC_POINTS, tb, sub_seed(seed, 0))?;
    let bc_t = line(BC_POINTS, ttb, sub_seed(seed, 1))?;
    let mut ic = Matrix::zeros((IC_POINTS, 2));
    ic.column_mut(0).assign(&ic_tau.column(0));
    let mut bc = Matrix::zeros((BC_POINTS, 2));
    bc.column_mut(1).assign(&bc_t.column(0));
    Ok((
        LabeledPoints::new(ic, vec![frac.s_wr; IC_POINTS], &norm)?,
        LabeledPoints::new(bc, vec![frac.s_max(); BC_POINTS], &norm)?,
    ))
}

/// Theory residual for the configured model and diffusion coefficient.
pub fn theory_term(frac: FracFlow, config: &ProblemConfig) -> Result<Option<Box<dyn ResidualTerm>>> {
    let norm = Normalization::identity(2);
    let bounds = domain();
    match config.model {
        Model::Dnn => {
            if config.collocation > 0 {
                return Err(Error::config("dnn takes no collocation points"));
            }
            Ok(None)
        }
        Model::Tgnn => {
            let pts = latin_hypercube(config.collocation, &bounds, sub_seed(config.sampler_seed, 2))?;
            Ok(Some(Box::new(StrongBuckley::new(&pts, frac, config.eta, &norm, 1.0)?)))
        }
        Model::TgnnWf => {
            let h = config.relative_size / 2.0;
            let half = [h * (bounds[0].1 - bounds[0].0), h * (bounds[1].1 - bounds[1].0)];
            let regions = sample_regions(config.collocation, &bounds, &half, sub_seed(config.sampler_seed, 2))?;
            let rule = gauss_legendre(config.quad_points)?;
            let scale = 1.0 / (half[0] * half[1]);
            let term = WeakBuckley::new(&regions, &[rule.clone(), rule], frac, config.eta, &norm, scale)?;
            Ok(Some(Box::new(term)))
        }
    }
}

/// Training data from steps 1–20 of the analytic grid, IC/BC points, the
/// theory term and the steps 21–50 evaluation set.
pub fn bl_problem(sol: &BLSolution, config: &ProblemConfig) -> Result<BenchmarkSetup> {
    if !(config.eta >= 0.0) {
        return Err(Error::config(format!("eta must be >= 0, got {}", config.eta)));
    }
    let norm = Normalization::identity(2);
    let grid = sol.to_grid()?;
    let data = training_data(&grid, config, TRAIN_STEPS, &norm)?;
    let (ic, bc) = ic_bc_points(&sol.frac, config.sampler_seed)?;
    let theory = theory_term(sol.frac, config)?;
    let (coords, truth) = grid.space_time(EVAL_STEPS)?;
    Ok(BenchmarkSetup {
        problem: TrainingProblem {
            norm,
            data,
            ic,
            bc,
            theory,
        },
        eval: EvalSet { coords, truth },
        input_dim: 2,
    })
}
