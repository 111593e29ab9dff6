//! Two-dimensional transient groundwater flow benchmark: random conductivity,
//! reference heads, and the training problem built from them.

pub mod fd;
pub mod kle;

use std::ops::RangeInclusive;

pub use fd::{FdSystem, HeadSnapshots, fd_run, fd_solve, node_coords};
pub use kle::{ConductivityField, kle_build};

use crate::diffcore::Matrix;
use crate::evalkit::{BenchmarkSetup, EvalSet, Model, ProblemConfig, training_data};
use crate::losses::{LabeledPoints, ResidualTerm, StrongSinglePhase, WeakSinglePhase};
use crate::network::Normalization;
use crate::optimizer::TrainingProblem;
use crate::quadrature::{QuadRule1D, Subdomain, gauss_legendre, latin_hypercube, sample_regions};
use crate::{Error, Result};

pub const KLE_TERMS: usize = 20;
/// Correlation length as a fraction of the domain length.
pub const CORRELATION_FRACTION: f64 = 0.2;
/// Simulated time span `L_t`.
pub const TIME_SPAN: f64 = 10.0;
pub const TRAIN_STEPS: RangeInclusive<usize> = 1..=18;
pub const EVAL_STEPS: RangeInclusive<usize> = 19..=50;
pub const BC_POINTS: usize = 20_000;
pub const IC_POINTS: usize = 10_000;
/// Reference level subtracted inside the weak integral.
pub const DATUM: f64 = 201.0;
/// Head range the outputs are measured in.
const HEAD_SCALE: f64 = 1.0;

pub fn default_field(seed: u64) -> Result<ConductivityField> {
    let eta = CORRELATION_FRACTION * fd::LENGTH;
    kle_build(fd::LENGTH, (eta, eta), KLE_TERMS, seed)
}

/// `(x, y, t)` over the full domain, outputs centred on 201.
pub fn normalization() -> Normalization {
    Normalization {
        lower: vec![0.0, 0.0, 0.0],
        span: vec![fd::LENGTH, fd::LENGTH, TIME_SPAN],
        out_offset: DATUM,
        out_scale: HEAD_SCALE,
    }
}

/// Box spanned by the grid nodes over the simulated time.
pub fn training_box() -> [(f64, f64); 3] {
    let xs = node_coords();
    let (lo, hi) = (xs[0], xs[fd::NODES - 1]);
    [(lo, hi), (lo, hi), (0.0, TIME_SPAN)]
}

/// Region half-lengths for a relative edge length (0.2 gives `H = 0.1 L`).
pub fn region_half(relative_size: f64) -> [f64; 3] {
    let h = relative_size / 2.0;
    [h * fd::LENGTH, h * fd::LENGTH, h * TIME_SPAN]
}

/// Length the residuals are made dimensionless with. A tenth of the domain
/// (the default region half-length) rather than the domain itself: measured
/// against `L` any head variation that the data asks for costs O(10) in
/// residual and the theory term pins the network to a constant.
pub const RESIDUAL_LENGTH: f64 = 0.1 * fd::LENGTH;

/// Strong residual multiplier making it dimensionless: `ℓ² / ΔH`.
pub fn strong_scale() -> f64 {
    RESIDUAL_LENGTH * RESIDUAL_LENGTH / HEAD_SCALE
}

/// Weak residual multiplier: the strong one divided by the region volume
/// factor `H_x H_y H_t`, so the residual is the integral in local coordinates.
pub fn weak_scale(half: &[f64; 3]) -> f64 {
    strong_scale() / (half[0] * half[1] * half[2])
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(0x2545_f491_4f6c_dd1d))
}

/// Weak-form regions and their tensor Gauss rule.
pub fn weak_regions(config: &ProblemConfig) -> Result<(Vec<Subdomain>, Vec<QuadRule1D>)> {
    let half = region_half(config.relative_size);
    let regions = sample_regions(config.collocation, &training_box(), &half, sub_seed(config.sampler_seed, 3))?;
    let rule = gauss_legendre(config.quad_points)?;
    Ok((regions, vec![rule.clone(), rule.clone(), rule]))
}

/// Theory residual for the configured model, `None` for plain DNN.
pub fn theory_term(field: &ConductivityField, config: &ProblemConfig) -> Result<Option<Box<dyn ResidualTerm>>> {
    let norm = normalization();
    match config.model {
        Model::Dnn => {
            if config.collocation > 0 {
                return Err(Error::config("dnn takes no collocation points"));
            }
            Ok(None)
        }
        Model::Tgnn => {
            let pts = latin_hypercube(config.collocation, &training_box(), sub_seed(config.sampler_seed, 3))?;
            let term = StrongSinglePhase::new(&pts, field, fd::SPECIFIC_STORAGE, &norm, strong_scale())?;
            Ok(Some(Box::new(term)))
        }
        Model::TgnnWf => {
            let (regions, rules) = weak_regions(config)?;
            let half = region_half(config.relative_size);
            let term = WeakSinglePhase::new(
                &regions,
                &rules,
                field,
                fd::SPECIFIC_STORAGE,
                &norm,
                DATUM,
                weak_scale(&half),
            )?;
            Ok(Some(Box::new(term)))
        }
    }
}

/// Dirichlet faces at the first and last node columns: 202 and 200.
pub fn boundary_points(n: usize, seed: u64) -> Result<LabeledPoints> {
    let [(x0, x1), yb, tb] = training_box();
    let half = n / 2;
    let mut coords = Matrix::zeros((2 * half, 3));
    let mut targets = Vec::with_capacity(2 * half);
    for (f, (x, h)) in [(x0, fd::HEAD_LEFT), (x1, fd::HEAD_RIGHT)].into_iter().enumerate() {
        let face = latin_hypercube(half, &[yb, tb], sub_seed(seed, 1 + f as u64))?;
        for (r, p) in face.rows().into_iter().enumerate() {
            let row = f * half + r;
            coords[[row, 0]] = x;
            coords[[row, 1]] = p[0];
            coords[[row, 2]] = p[1];
            targets.push(h);
        }
    }
    LabeledPoints::new(coords, targets, &normalization())
}

/// `t = 0` points labelled 202 within the first half cell, 200 elsewhere.
pub fn initial_points(n: usize, seed: u64) -> Result<LabeledPoints> {
    let [xb, yb, _] = training_box();
    let plane = latin_hypercube(n, &[xb, yb], sub_seed(seed, 0))?;
    let mut coords = Matrix::zeros((n, 3));
    let mut targets = Vec::with_capacity(n);
    let edge = xb.0 + fd::SPACING / 2.0;
    for (r, p) in plane.rows().into_iter().enumerate() {
        coords[[r, 0]] = p[0];
        coords[[r, 1]] = p[1];
        targets.push(if p[0] <= edge { fd::HEAD_LEFT } else { fd::HEAD_RIGHT });
    }
    LabeledPoints::new(coords, targets, &normalization())
}

/// Training data from steps 1–18, IC/BC points, the theory term and the
/// steps 19–50 evaluation set.
pub fn sp_problem(field: &ConductivityField, snapshots: &HeadSnapshots, config: &ProblemConfig) -> Result<BenchmarkSetup> {
    if snapshots.num_steps() < *EVAL_STEPS.end() {
        return Err(Error::config(format!(
            "reference covers {} steps, {} needed",
            snapshots.num_steps(),
            EVAL_STEPS.end()
        )));
    }
    let norm = normalization();
    let grid = snapshots.to_grid();
    let data = training_data(&grid, config, TRAIN_STEPS, &norm)?;
    let theory = theory_term(field, config)?;
    let (coords, truth) = grid.space_time(EVAL_STEPS)?;
    Ok(BenchmarkSetup {
        problem: TrainingProblem {
            data,
            ic: initial_points(IC_POINTS, config.sampler_seed)?,
            bc: boundary_points(BC_POINTS, config.sampler_seed)?,
            theory,
            norm,
        },
        eval: EvalSet { coords, truth },
        input_dim: 3,
    })
}
