//! Accuracy metrics, training-set sampling from snapshot grids, and noise
//! injection.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Matrix;
use crate::losses::LabeledPoints;
use crate::network::Normalization;
use crate::optimizer::TrainingProblem;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Model {
    Dnn,
    Tgnn,
    TgnnWf,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Dnn => "dnn",
            Model::Tgnn => "tgnn",
            Model::TgnnWf => "tgnn_wf",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dnn" => Ok(Model::Dnn),
            "tgnn" => Ok(Model::Tgnn),
            "tgnn_wf" => Ok(Model::TgnnWf),
            other => Err(Error::config(format!("unknown model `{other}` (dnn | tgnn | tgnn_wf)"))),
        }
    }
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} reference values",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// `‖pred − truth‖₂ / ‖truth‖₂`.
pub fn rel_l2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if !(den > 0.0) {
        return Err(Error::Contract("relative L2 error of a zero reference".into()));
    }
    Ok((num / den).sqrt())
}

/// `1 − Σ(pred − truth)² / Σ(truth − mean)²`.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if !(ss_tot > 0.0) {
        return Err(Error::Contract("R2 of a constant reference".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Values of a field on fixed spatial nodes at a sequence of times.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotGrid {
    /// Spatial coordinates, `nodes × d`.
    pub nodes: Matrix,
    /// Time of step `k` (1-based) is `times[k − 1]`.
    pub times: Vec<f64>,
    /// `values[k − 1][node]`.
    pub values: Vec<Vec<f64>>,
}

impl SnapshotGrid {
    pub fn num_nodes(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn num_steps(&self) -> usize {
        self.times.len()
    }

    fn check_steps(&self, steps: &RangeInclusive<usize>) -> Result<()> {
        if *steps.start() == 0 || *steps.end() > self.num_steps() || steps.is_empty() {
            return Err(Error::config(format!(
                "steps {steps:?} outside 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// Space-time coordinates and values for every node of every step in `steps`.
    pub fn space_time(&self, steps: RangeInclusive<usize>) -> Result<(Matrix, Vec<f64>)> {
        self.check_steps(&steps)?;
        let d = self.nodes.ncols();
        let n = self.num_nodes();
        let nt = steps.clone().count();
        let mut coords = Matrix::zeros((n * nt, d + 1));
        let mut vals = Vec::with_capacity(n * nt);
        for (j, k) in steps.enumerate() {
            for i in 0..n {
                let row = j * n + i;
                for c in 0..d {
                    coords[[row, c]] = self.nodes[[i, c]];
                }
                coords[[row, d]] = self.times[k - 1];
                vals.push(self.values[k - 1][i]);
            }
        }
        Ok((coords, vals))
    }

    /// Per-node range (max − min) over `steps`.
    pub fn range_over(&self, steps: RangeInclusive<usize>) -> Result<Vec<f64>> {
        self.check_steps(&steps)?;
        let mut lo = vec![f64::INFINITY; self.num_nodes()];
        let mut hi = vec![f64::NEG_INFINITY; self.num_nodes()];
        for k in steps {
            for (i, &v) in self.values[k - 1].iter().enumerate() {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        Ok(hi.iter().zip(&lo).map(|(h, l)| h - l).collect())
    }
}

/// One observation taken from a snapshot grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub node: usize,
    pub step: usize,
    /// Spatial coordinates followed by time.
    pub coords: Vec<f64>,
    pub value: f64,
}

/// `points_per_step` distinct nodes per step, drawn uniformly without
/// replacement, for every step in `steps`.
pub fn build_training_set(
    grid: &SnapshotGrid,
    points_per_step: usize,
    steps: RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<Sample>> {
    grid.check_steps(&steps)?;
    let n = grid.num_nodes();
    if points_per_step > n {
        return Err(Error::config(format!(
            "{points_per_step} points per step requested from {n} nodes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(points_per_step * steps.clone().count());
    for k in steps {
        let mut picks = rand::seq::index::sample(&mut rng, n, points_per_step).into_vec();
        picks.sort_unstable();
        for node in picks {
            let mut coords: Vec<f64> = grid.nodes.row(node).to_vec();
            coords.push(grid.times[k - 1]);
            out.push(Sample {
                node,
                step: k,
                coords,
                value: grid.values[k - 1][node],
            });
        }
    }
    Ok(out)
}

/// Additive perturbations `a · Δ(node) · ε` with `ε ~ U[−1, 1]` drawn per
/// sample and `Δ` the per-node range over `window`.
pub fn noise_offsets(
    samples: &[Sample],
    grid: &SnapshotGrid,
    window: RangeInclusive<usize>,
    a: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(a >= 0.0) {
        return Err(Error::config(format!("noise fraction must be >= 0, got {a}")));
    }
    let delta = grid.range_over(window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            let eps: f64 = rng.random_range(-1.0..=1.0);
            let d = *delta
                .get(s.node)
                .ok_or_else(|| Error::Dimension(format!("sample node {} outside grid", s.node)))?;
            Ok(a * (d * eps))
        })
        .collect()
}

pub fn add_noise(
    samples: &[Sample],
    grid: &SnapshotGrid,
    window: RangeInclusive<usize>,
    a: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if a == 0.0 {
        return Ok(samples.to_vec());
    }
    let offsets = noise_offsets(samples, grid, window, a, seed)?;
    Ok(samples
        .iter()
        .zip(offsets)
        .map(|(s, o)| Sample {
            value: s.value + o,
            ..s.clone()
        })
        .collect())
}

pub fn samples_to_points(samples: &[Sample], norm: &Normalization) -> Result<LabeledPoints> {
    let d = norm.dim();
    let mut coords = Matrix::zeros((samples.len(), d));
    for (i, s) in samples.iter().enumerate() {
        if s.coords.len() != d {
            return Err(Error::Dimension(format!("sample with {} coordinates, expected {d}", s.coords.len())));
        }
        for (c, &v) in s.coords.iter().enumerate() {
            coords[[i, c]] = v;
        }
    }
    LabeledPoints::new(coords, samples.iter().map(|s| s.value).collect(), norm)
}

/// Held-out reference values at physical coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub coords: Matrix,
    pub truth: Vec<f64>,
}

/// A ready-to-train benchmark instance.
pub struct BenchmarkSetup {
    pub problem: TrainingProblem,
    pub eval: EvalSet,
    /// Input width of the network.
    pub input_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub model: Model,
    pub problem: String,
    pub data_points: usize,
    pub collocation: usize,
    pub noise: f64,
    pub eta: f64,
    pub l2: f64,
    pub r2: f64,
    pub seconds: f64,
    pub lambda_f_final: f64,
    pub fingerprint: String,
}

pub const METRICS_HEADER: &str = "model,problem,data_points,collocation,noise,eta,l2,r2,seconds,lambda_f_final";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:e},{:.10},{:.3},{}",
            self.model,
            self.problem,
            self.data_points,
            self.collocation,
            self.noise,
            self.eta,
            self.l2,
            self.r2,
            self.seconds,
            if self.model == Model::Dnn {
                "N/A".to_string()
            } else {
                format!("{:.6}", self.lambda_f_final)
            }
        )
    }
}

/// Problem-level knobs shared by both benchmark builders.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemConfig {
    pub model: Model,
    pub data_per_step: usize,
    /// Collocation points (TgNN) or regions (TgNN-wf).
    pub collocation: usize,
    /// Region edge length over domain length, per dimension.
    pub relative_size: f64,
    pub quad_points: usize,
    pub noise: f64,
    pub eta: f64,
    pub data_seed: u64,
    pub sampler_seed: u64,
}

/// Sampled, optionally noisy observations from `window`.
pub fn training_data(
    grid: &SnapshotGrid,
    config: &ProblemConfig,
    window: RangeInclusive<usize>,
    norm: &Normalization,
) -> Result<LabeledPoints> {
    if config.data_per_step == 0 {
        return Ok(LabeledPoints::empty(norm.dim()));
    }
    let samples = build_training_set(grid, config.data_per_step, window.clone(), config.data_seed)?;
    // separate stream so the noise does not shift with the node picks
    let noisy = add_noise(&samples, grid, window, config.noise, config.data_seed ^ NOISE_STREAM)?;
    samples_to_points(&noisy, norm)
}

const NOISE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        let t = [1.0, 2.0, -3.0, 4.0];
        assert_eq!(rel_l2(&t, &t).unwrap(), 0.0);
        let twice: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        assert_relative_eq!(rel_l2(&twice, &t).unwrap(), 1.0, max_relative = 1e-15);
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
        let mean = t.iter().sum::<f64>() / 4.0;
        assert_relative_eq!(r2(&[mean; 4], &t).unwrap(), 0.0, epsilon = 1e-15);
        assert!(matches!(rel_l2(&[1.0], &[0.0]), Err(Error::Contract(_))));
        assert!(matches!(r2(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::Contract(_))));
        assert!(matches!(r2(&[1.0], &[3.0, 3.0]), Err(Error::Dimension(_))));
    }

    fn loop_metrics(p: &[f64], t: &[f64]) -> (f64, f64) {
        let (mut num, mut den, mut sum) = (0.0, 0.0, 0.0);
        for i in 0..t.len() {
            num += (p[i] - t[i]).powi(2);
            den += t[i].powi(2);
            sum += t[i];
        }
        let mean = sum / t.len() as f64;
        let mut tot = 0.0;
        for v in t {
            tot += (v - mean).powi(2);
        }
        ((num / den).sqrt(), 1.0 - num / tot)
    }

    fn grid() -> SnapshotGrid {
        let nodes = Matrix::from_shape_fn((30, 2), |(i, j)| (i * (j + 1)) as f64);
        let times: Vec<f64> = (1..=6).map(|k| 0.5 * k as f64).collect();
        let values = (0..6)
            .map(|k| (0..30).map(|i| 200.0 + ((i * 7 + k * 3) % 11) as f64 / 5.0).collect())
            .collect();
        SnapshotGrid { nodes, times, values }
    }

    #[test]
    fn training_set_counts() {
        let g = grid();
        let s = build_training_set(&g, 10, 1..=4, 3).unwrap();
        assert_eq!(s.len(), 40);
        assert!(build_training_set(&g, 0, 1..=4, 3).unwrap().is_empty());
        assert!(matches!(build_training_set(&g, 31, 1..=4, 3), Err(Error::Config(_))));
        assert!(build_training_set(&g, 5, 0..=4, 3).is_err());
        for k in 1..=4 {
            let mut nodes: Vec<usize> = s.iter().filter(|x| x.step == k).map(|x| x.node).collect();
            nodes.dedup();
            assert_eq!(nodes.len(), 10);
        }
        let x = &s[17];
        assert_eq!(x.value, g.values[x.step - 1][x.node]);
        assert_eq!(x.coords[2], g.times[x.step - 1]);
        assert_eq!(s, build_training_set(&g, 10, 1..=4, 3).unwrap());
    }

    #[test]
    fn noise_bounds_and_zero() {
        let g = grid();
        let s = build_training_set(&g, 30, 1..=4, 1).unwrap();
        assert_eq!(add_noise(&s, &g, 1..=4, 0.0, 9).unwrap(), s);
        let delta = g.range_over(1..=4).unwrap();
        let noisy = add_noise(&s, &g, 1..=4, 0.8, 9).unwrap();
        for (a, b) in s.iter().zip(&noisy) {
            assert!((b.value - a.value).abs() <= 0.8 * delta[a.node] + 1e-12);
        }
    }

    #[test]
    fn noise_mean_vanishes() {
        let g = grid();
        let one = build_training_set(&g, 30, 1..=4, 1).unwrap();
        let many: Vec<Sample> = one.iter().cycle().take(100_000).cloned().collect();
        let off = noise_offsets(&many, &g, 1..=4, 1.0, 4).unwrap();
        let delta = g.range_over(1..=4).unwrap();
        // normalised ε has variance 1/3; the sample mean is within 5σ/√n
        let eps_mean: f64 = many
            .iter()
            .zip(&off)
            .filter(|(s, _)| delta[s.node] > 0.0)
            .map(|(s, o)| o / delta[s.node])
            .sum::<f64>()
            / many.len() as f64;
        assert!(eps_mean.abs() < 5.0 * (1.0f64 / 3.0 / 1e5).sqrt());
    }

    #[test]
    fn report_row() {
        let r = MetricsReport {
            model: Model::Dnn,
            problem: "singlephase".into(),
            data_points: 1800,
            collocation: 0,
            noise: 0.4,
            eta: 0.0,
            l2: 1.5e-3,
            r2: 0.99,
            seconds: 12.0,
            lambda_f_final: 0.0,
            fingerprint: String::new(),
        };
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), METRICS_HEADER.split(',').count());
        assert!(row.starts_with("dnn,singlephase,1800,0,0.4,0,1.5e-3,"));
        assert!(row.ends_with("N/A"));
    }

    proptest! {
        #[test]
        fn metrics_match_loop_and_permutation(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..60), rot in 0usize..60) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.iter().cloned().unzip();
            prop_assume!(t.iter().any(|x| (x - t[0]).abs() > 1e-3));
            let (l, r) = loop_metrics(&p, &t);
            prop_assert!((rel_l2(&p, &t).unwrap() - l).abs() <= 1e-12 * l.max(1.0));
            prop_assert!((r2(&p, &t).unwrap() - r).abs() <= 1e-12 * r.abs().max(1.0));
            let k = rot % p.len();
            let (mut p2, mut t2) = (p.clone(), t.clone());
            p2.rotate_left(k);
            t2.rotate_left(k);
            prop_assert!((rel_l2(&p2, &t2).unwrap() - rel_l2(&p, &t).unwrap()).abs() <= 1e-12);
            prop_assert!((r2(&p2, &t2).unwrap() - r2(&p, &t).unwrap()).abs() <= 1e-12 * r.abs().max(1.0));
            prop_assert!(r2(&p, &t).unwrap() <= 1.0);
        }

        #[test]
        fn noise_linear_in_amplitude(a in 0.0f64..2.0, seed in any::<u64>()) {
            let g = grid();
            let s = build_training_set(&g, 12, 1..=5, seed).unwrap();
            let one = noise_offsets(&s, &g, 1..=5, a, seed).unwrap();
            let two = noise_offsets(&s, &g, 1..=5, 2.0 * a, seed).unwrap();
            for (x, y) in one.iter().zip(&two) {
                prop_assert_eq!(2.0 * x, *y);
            }
        }
    }
}
