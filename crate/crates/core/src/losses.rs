//! Residual terms and the total loss.
//!
//! Every term is a mean of squared per-item residuals (items are labelled
//! points, collocation points or collocation regions). Terms expose their
//! sum of squares over an item range so the trainer can evaluate them in
//! chunks on separate tapes; the full-set mean is the sum over chunks divided
//! by the item count.

use std::ops::Range;

use crate::buckley::{self, FracFlow};
use crate::diffcore::{Matrix, Tape, Var, input_gradient};
use crate::network::{Normalization, Surrogate};
use crate::quadrature::{QuadRule1D, Subdomain, tensor_rule};
use crate::testfuncs::{TestFamily, omega_sp};
use crate::{Error, Result};

/// Rows pushed through the network per tape when evaluating in chunks.
pub const CHUNK_ROWS: usize = 4096;

/// A candidate solution: maps normalised input rows to physical outputs
/// (`n × 1`).
pub trait Trial<'t> {
    fn eval(&self, xi: &Var<'t>) -> Result<Var<'t>>;
}

impl<'t> Trial<'t> for Surrogate<'t, '_> {
    fn eval(&self, xi: &Var<'t>) -> Result<Var<'t>> {
        self.eval_normalized(xi)
    }
}

/// Closure-backed trial, mainly for manufactured solutions.
pub struct FnTrial<F>(pub F);

impl<F> FnTrial<F> {
    /// Pins the closure signature so the tape lifetime is inferred.
    pub fn new<'t>(f: F) -> Self
    where
        F: Fn(&Var<'t>) -> Result<Var<'t>>,
    {
        Self(f)
    }
}

impl<'t, F> Trial<'t> for FnTrial<F>
where
    F: Fn(&Var<'t>) -> Result<Var<'t>>,
{
    fn eval(&self, xi: &Var<'t>) -> Result<Var<'t>> {
        (self.0)(xi)
    }
}

pub trait ResidualTerm: Send + Sync {
    /// Number of items the mean runs over.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Network rows needed per item.
    fn rows_per_item(&self) -> usize {
        1
    }

    /// Σ r_i² over `items`, recorded on `tape`.
    fn sum_squares<'t>(&self, trial: &dyn Trial<'t>, tape: &'t Tape, items: Range<usize>) -> Result<Var<'t>>;

    /// Items per chunk so that a chunk stays near [`CHUNK_ROWS`] rows.
    fn items_per_chunk(&self) -> usize {
        (CHUNK_ROWS / self.rows_per_item().max(1)).max(1)
    }
}

/// Mean of squared residuals over the whole term on one tape; 0 when empty.
pub fn mean_residual<'t>(term: &dyn ResidualTerm, trial: &dyn Trial<'t>, tape: &'t Tape) -> Result<Var<'t>> {
    let n = term.len();
    if n == 0 {
        return Ok(tape.scalar(0.0));
    }
    Ok(term.sum_squares(trial, tape, 0..n)?.scale(1.0 / n as f64))
}

fn check_range(items: &Range<usize>, len: usize) -> Result<()> {
    if items.start > items.end || items.end > len {
        return Err(Error::Contract(format!("item range {items:?} outside 0..{len}")));
    }
    Ok(())
}

fn column(values: impl IntoIterator<Item = f64>) -> Matrix {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len();
    Matrix::from_shape_vec((n, 1), v).expect("column shape")
}

/// Points with target values: data, initial- and boundary-condition terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoints {
    /// Physical coordinates, `n × d`.
    pub coords: Matrix,
    /// Normalised coordinates fed to the network.
    pub xi: Matrix,
    /// Targets, `n × 1`.
    pub targets: Matrix,
}

impl LabeledPoints {
    pub fn new(coords: Matrix, targets: Vec<f64>, norm: &Normalization) -> Result<Self> {
        if coords.nrows() != targets.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} targets",
                coords.nrows(),
                targets.len()
            )));
        }
        if coords.ncols() != norm.dim() {
            return Err(Error::Dimension(format!(
                "points have {} coordinates, normalisation expects {}",
                coords.ncols(),
                norm.dim()
            )));
        }
        Ok(Self {
            xi: norm.normalize(&coords),
            coords,
            targets: column(targets),
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            coords: Matrix::zeros((0, dim)),
            xi: Matrix::zeros((0, dim)),
            targets: Matrix::zeros((0, 1)),
        }
    }
}

impl ResidualTerm for LabeledPoints {
    fn len(&self) -> usize {
        self.targets.nrows()
    }

    fn sum_squares<'t>(&self, trial: &dyn Trial<'t>, tape: &'t Tape, items: Range<usize>) -> Result<Var<'t>> {
        check_range(&items, self.len())?;
        let rows = items.clone();
        let xi = tape.constant(self.xi.slice(ndarray::s![rows.clone(), ..]).to_owned());
        let y = tape.constant(self.targets.slice(ndarray::s![rows, ..]).to_owned());
        Ok(trial.eval(&xi)?.sub(&y)?.square().sum())
    }
}

/// Conductivity and its spatial gradient at a point.
pub trait Conductivity: Sync {
    fn eval(&self, x: f64, y: f64) -> (f64, f64, f64);
}

/// Homogeneous field `K ≡ k`.
#[derive(Clone, Copy, Debug)]
pub struct UniformConductivity(pub f64);

impl Conductivity for UniformConductivity {
    fn eval(&self, _x: f64, _y: f64) -> (f64, f64, f64) {
        (self.0, 0.0, 0.0)
    }
}

/// Pointwise `S_s h_t − ∇·(K∇h)` at collocation points, times `scale`.
///
/// Derivatives come from nested reverse-mode differentiation with respect to
/// the normalised inputs and are chain-ruled back to physical units.
pub struct StrongSinglePhase {
    xi: Matrix,
    /// Per-point multipliers of h_t, h_x, h_y, h_xx, h_yy (normalised derivatives).
    coef: [Matrix; 5],
}

impl StrongSinglePhase {
    pub fn new(points: &Matrix, field: &dyn Conductivity, ss: f64, norm: &Normalization, scale: f64) -> Result<Self> {
        if points.ncols() != 3 || norm.dim() != 3 {
            return Err(Error::Dimension("single-phase points are (x, y, t)".into()));
        }
        let (lx, ly, lt) = (norm.span[0], norm.span[1], norm.span[2]);
        let n = points.nrows();
        let mut coef: [Vec<f64>; 5] = Default::default();
        for c in coef.iter_mut() {
            c.reserve(n);
        }
        for p in points.rows() {
            let (k, kx, ky) = field.eval(p[0], p[1]);
            coef[0].push(scale * ss / lt);
            coef[1].push(-scale * kx / lx);
            coef[2].push(-scale * ky / ly);
            coef[3].push(-scale * k / (lx * lx));
            coef[4].push(-scale * k / (ly * ly));
        }
        Ok(Self {
            xi: norm.normalize(points),
            coef: coef.map(column),
        })
    }

    pub fn residuals<'t>(&self, trial: &dyn Trial<'t>, tape: &'t Tape, items: Range<usize>) -> Result<Var<'t>> {
        check_range(&items, self.len())?;
        let x = tape.var(self.xi.slice(ndarray::s![items.clone(), ..]).to_owned());
        let h = trial.eval(&x)?;
        let g = input_gradient(&h, &x)?;
        let (hx, hy, ht) = (g.column(0)?, g.column(1)?, g.column(2)?);
        let hxx = input_gradient(&hx, &x)?.column(0)?;
        let hyy = input_gradient(&hy, &x)?.column(1)?;
        let c = |k: usize| tape.constant(self.coef[k].slice(ndarray::s![items.clone(), ..]).to_owned());
        let r = ht
            .mul(&c(0))?
            .add(&hx.mul(&c(1))?)?
            .add(&hy.mul(&c(2))?)?
            .add(&hxx.mul(&c(3))?)?
            .add(&hyy.mul(&c(4))?)?;
        Ok(r)
    }
}

impl ResidualTerm for StrongSinglePhase {
    fn len(&self) -> usize {
        self.xi.nrows()
    }

    fn items_per_chunk(&self) -> usize {
        // nested backward passes roughly triple the graph
        CHUNK_ROWS / 4
    }

    fn sum_squares<'t>(&self, trial: &dyn Trial<'t>, tape: &'t Tape, items: Range<usize>) -> Result<Var<'t>> {
        Ok(self.residuals(trial, tape, items)?.square().sum())
    }
}

/// Region residual `r_i = −Σ_q c_iq · g(u(p_q))` with precomputed
/// coefficients `c` (`R × Q`) and normalised quadrature points (`R·Q × d`).
#[derive(Clone, Debug)]
struct RegionQuadrature {
    xi: Matrix,
    q: usize,
}

impl RegionQuadrature {
    fn regions(&self) -> usize {
        self.xi.nrows() / self.q.max(1)
    }

    fn eval<'t>(&self, trial: &dyn Trial<'t>, tape: &'t Tape, items: &Range<usize>) -> Result<Var<'t>> {
        let rows = items.start * self.q..items.end * self.q;
        let xi = tape.constant(self.xi.slice(ndarray::s![rows, ..]).to_owned());
        Ok(trial.eval(&xi)?.reshape(items.len(), self.q)?)
    }
}

fn build_quadrature(
    regions: &[Subdomain],
    rules: &[QuadRule1D],
    norm: &Normalization,
    mut per_point: impl FnMut(&[f64], &Subdomain, f64) -> Result<Vec<f64>>,
    ncoef: usize,
) -> Result<(RegionQuadrature, Vec<Matrix>)> {
    let q: usize = rules.iter().map(QuadRule1D::len).product();
    let r = regions.len();
    let dim = norm.dim();
    let mut pts = Matrix::zeros((r * q, dim));
    let mut coefs = vec![Matrix::zeros((r, q)); ncoef];
    for (i, region) in regions.iter().enumerate() {
        if region.dim() != dim {
            return Err(Error::Dimension(format!(
                "region of dimension {} in a {dim}-dimensional problem",
                region.dim()
            )));
        }
        let (p, w) = tensor_rule(rules, region)?;
        for (j, (row, &wq)) in p.rows().into_iter().zip(&w).enumerate() {
            let point = row.to_vec();
            let c = per_point(&point, region, wq)?;
            for (m, cv) in c.into_iter().enumerate() {
                coefs[m][[i, j]] = cv;
            }
            pts.row_mut(i * q + j).assign(&row);
        }
    }
    Ok((
        RegionQuadrature {
            xi: norm.normalize(&pts),
            q,
        },
        coefs,
    ))
}

/// Weak single-phase residual with every derivative moved onto the test
/// function:
/// `r_i = −scale · Σ_q w_q (h(p_q) − datum) [S_s ω_t + K_x ω_x + K ω_xx + K_y ω_y + K ω_yy](p_q)`.
///
/// Subtracting a constant datum leaves the exact integral unchanged (the
/// operator annihilates constants) and removes its quadrature error.
pub struct WeakSinglePhase {
    quad: RegionQuadrature,
    coef: Matrix,
    datum: f64,
}

impl WeakSinglePhase {
    pub fn new(
        regions: &[Subdomain],
        rules: &[QuadRule1D],
        field: &dyn Conductivity,
        ss: f64,
        norm: &Normalization,
        datum: f64,
        scale: f64,
    ) -> Result<Self> {
        if norm.dim() != 3 || rules.len() != 3 {
            return Err(Error::Dimension("single-phase regions are (x, y, t)".into()));
        }
        let (quad, mut coefs) = build_quadrature(
            regions,
            rules,
            norm,
            |p, region, w| {
                let om = omega_sp(p, region)?;
                let (k, kx, ky) = field.eval(p[0], p[1]);
                let l = ss * om.d_dt + kx * om.d_dx + k * om.d2_dx2 + ky * om.d_dy + k * om.d2_dy2;
                Ok(vec![-scale * w * l])
            },
            1,
        )?;
        Ok(Self {
            quad,
            coef: coefs.remove(0),
            datum,
        })
    }

    pub fn points_per_region(&self) -> usize {
        self.quad.q
    }

    pub fn residuals<'t>(&self, trial: &dyn Trial<'t>, tape: &'t Tape, items: Range<usize>) -> Result<Var<'t>> {
        check_range(&items, self.len())?;
        let h = self.quad.eval(trial, tape, &items)?.add_scalar(-self.datum)?;
        let c = tape.constant(self.coef.slice(ndarray::s![items.clone(), ..]).to_owned());
        Ok(h.mul(&c)?.sum_to(items.len(), 1)?)
    }
}

impl ResidualTerm for WeakSinglePhase {
    fn len(&self) -> usize {
        self.quad.regions()
    }

    fn rows_per_item(&self) -> usize {
        self.quad.q
    }

    fn sum_squares<'t>(&self, trial: &dyn Trial<'t>, tape: &'t Tape, items: Range<usize>) -> Result<Var<'t>> {
        Ok(self.residuals(trial, tape, items)?.square().sum())
    }
}

/// Pointwise `S_t + f'_w(S) S_τ − η S_ττ`, times `scale`.
pub struct StrongBuckley {
    xi: Matrix,
    frac: FracFlow,
    eta: f64,
    /// Chain factors 1/span for τ and t.
    inv_span: (f64, f64),
    scale: f64,
}

impl StrongBuckley {
    pub fn new(points: &Matrix, frac: FracFlow, eta: f64, norm: &Normalization, scale: f64) -> Result<Self> {
        if points.ncols() != 2 || norm.dim() != 2 {
            return Err(Error::Dimension("Buckley-Leverett points are (tau, t)".into()));
        }
        if !(eta >= 0.0) {
            return Err(Error::config(format!("diffusion coefficient must be >= 0, got {eta}")));
        }
        Ok(Self {
            xi: norm.normalize(points),
            frac,
            eta,
            inv_span: (1.0 / norm.span[0], 1.0 / norm.span[1]),
            scale,
        })
    }

    pub fn residuals<'t>(&self, trial: &dyn Trial<'t>, tape: &'t Tape, items: Range<usize>) -> Result<Var<'t>> {
        check_range(&items, self.len())?;
        let x = tape.var(self.xi.slice(ndarray::s![items, ..]).to_owned());
        let s = trial.eval(&x)?;
        let g = input_gradient(&s, &x)?;
        let s_tau = g.column(0)?;
        let s_t = g.column(1)?;
        let (a, b) = self.inv_span;
        let mut r = s_t.scale(b).add(&buckley::fw_prime_var(&self.frac, &s)?.mul(&s_tau)?.scale(a))?;
        if self.eta > 0.0 {
            let s_tt = input_gradient(&s_tau, &x)?.column(0)?;
            r = r.sub(&s_tt.scale(self.eta * a * a))?;
        }
        Ok(r.scale(self.scale))
    }
}

impl ResidualTerm for StrongBuckley {
    fn len(&self) -> usize {
        self.xi.nrows()
    }

    fn items_per_chunk(&self) -> usize {
        CHUNK_ROWS / 4
    }

    fn sum_squares<'t>(&self, trial: &dyn Trial<'t>, tape: &'t Tape, items: Range<usize>) -> Result<Var<'t>> {
        Ok(self.residuals(trial, tape, items)?.square().sum())
    }
}

/// Weak Buckley–Leverett residual
/// `r_i = −scale · Σ_q w_q [S ω_t + f_w(S) ω_τ + η S ω_ττ](p_q)`.
/// η = 0 uses `(τ̄²−1)(t̄²−1)`; η > 0 uses `(τ̄²−1)²(t̄²−1)`.
pub struct WeakBuckley {
    quad: RegionQuadrature,
    /// Multiplier of S.
    a: Matrix,
    /// Multiplier of f_w(S).
    b: Matrix,
    frac: FracFlow,
}

impl WeakBuckley {
    pub fn new(
        regions: &[Subdomain],
        rules: &[QuadRule1D],
        frac: FracFlow,
        eta: f64,
        norm: &Normalization,
        scale: f64,
    ) -> Result<Self> {
        if norm.dim() != 2 || rules.len() != 2 {
            return Err(Error::Dimension("Buckley-Leverett regions are (tau, t)".into()));
        }
        if !(eta >= 0.0) {
            return Err(Error::config(format!("diffusion coefficient must be >= 0, got {eta}")));
        }
        let family = if eta > 0.0 {
            TestFamily::AdvectionDiffusion
        } else {
            TestFamily::Advection
        };
        let (quad, mut coefs) = build_quadrature(
            regions,
            rules,
            norm,
            |p, region, w| {
                let om = family.eval(p, region)?;
                Ok(vec![-scale * w * (om.d_dt + eta * om.d2_dx2), -scale * w * om.d_dx])
            },
            2,
        )?;
        let b = coefs.pop().unwrap();
        let a = coefs.pop().unwrap();
        Ok(Self { quad, a, b, frac })
    }

    pub fn residuals<'t>(&self, trial: &dyn Trial<'t>, tape: &'t Tape, items: Range<usize>) -> Result<Var<'t>> {
        check_range(&items, self.len())?;
        let s = self.quad.eval(trial, tape, &items)?;
        let f = buckley::fw_var(&self.frac, &s)?;
        let a = tape.constant(self.a.slice(ndarray::s![items.clone(), ..]).to_owned());
        let b = tape.constant(self.b.slice(ndarray::s![items.clone(), ..]).to_owned());
        Ok(s.mul(&a)?.add(&f.mul(&b)?)?.sum_to(items.len(), 1)?)
    }
}

impl ResidualTerm for WeakBuckley {
    fn len(&self) -> usize {
        self.quad.regions()
    }

    fn rows_per_item(&self) -> usize {
        self.quad.q
    }

    fn sum_squares<'t>(&self, trial: &dyn Trial<'t>, tape: &'t Tape, items: Range<usize>) -> Result<Var<'t>> {
        Ok(self.residuals(trial, tape, items)?.square().sum())
    }
}

/// The four loss components, each a scalar on the tape.
pub struct ResidualBundle<'t> {
    pub data: Var<'t>,
    pub theory: Var<'t>,
    pub ic: Var<'t>,
    pub bc: Var<'t>,
}

/// `R_data + R_IC + R_BC + λ_f R_theory`.
pub fn total_loss<'t>(bundle: &ResidualBundle<'t>, lambda_f: f64) -> Result<Var<'t>> {
    if !(lambda_f > 0.0) {
        return Err(Error::Contract(format!("lambda_f must be positive, got {lambda_f}")));
    }
    Ok(bundle
        .data
        .add(&bundle.ic)?
        .add(&bundle.bc)?
        .add(&bundle.theory.scale(lambda_f))?)
}

/// Plain-number counterpart of [`ResidualBundle`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ResidualValues {
    pub data: f64,
    pub theory: f64,
    pub ic: f64,
    pub bc: f64,
}

impl ResidualValues {
    /// Loss with the theory term weighted by `lambda_f` (0 drops it).
    pub fn total(&self, lambda_f: f64) -> f64 {
        self.data + self.ic + self.bc + lambda_f * self.theory
    }
}
