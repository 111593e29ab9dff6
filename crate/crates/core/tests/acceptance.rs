//! Acceptance checks, one line per criterion.
//!
//! Criteria 6–9 train full-size models (hours on one core) and only run with
//! `WEAKFORM_ACCEPTANCE=full`; without it they print `NOT RUN`, which is
//! neither a pass nor a failure. The process exits non-zero if any criterion
//! that ran failed. Run directories go to a temporary folder unless
//! `WEAKFORM_ACCEPTANCE_OUT` names one to keep.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use weakform::buckley::{self, BLSolution, FracFlow};
use weakform::diffcore::{DiffError, Matrix, Tape, Var, input_derivative};
use weakform::experiment::{self, ExperimentConfig, RunOutput};
use weakform::losses::{FnTrial, LabeledPoints, StrongBuckley, UniformConductivity, WeakBuckley, WeakSinglePhase};
use weakform::network::{Activation, Layer, Normalization, init_mlp, predict_physical};
use weakform::optimizer::{TrainingProblem, loss_and_grad};
use weakform::quadrature::{gauss_legendre, sample_regions, tensor_rule};
use weakform::singlephase::{self, fd};
use weakform::testfuncs::{TestFamily, omega_sp};

enum Verdict {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Check = Result<Verdict, String>;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok { Verdict::Pass(detail) } else { Verdict::Fail(detail) }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn quadrature_exactness() -> Check {
    let mut worst = 0.0f64;
    for n in 1..=10 {
        let rule = gauss_legendre(n).map_err(err)?;
        for k in 0..2 * n {
            let got = rule.integrate(|x| x.powi(k as i32));
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            worst = worst.max((got - exact).abs() / exact.abs().max(1.0));
        }
    }
    Ok(verdict(worst <= 1e-11, format!("worst relative error {worst:.2e}")))
}

fn autodiff_correctness() -> Check {
    let frac = FracFlow::new(2.0, 0.0, 0.0).map_err(err)?;
    let norm = Normalization::identity(2);
    let mut seed = 0x5eed_u64;
    let mut next = move || {
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (seed >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut pts = |n: usize| Array2::from_shape_simple_fn((n, 2), &mut next);
    let data_x = pts(20);
    let targets: Vec<f64> = data_x.rows().into_iter().map(|r| 0.3 + 0.4 * r[0] * r[1]).collect();
    let colloc = pts(20);
    let ic_x = pts(5);
    let bc_x = pts(5);
    let problem = TrainingProblem {
        data: LabeledPoints::new(data_x, targets, &norm).map_err(err)?,
        ic: LabeledPoints::new(ic_x, vec![0.0; 5], &norm).map_err(err)?,
        bc: LabeledPoints::new(bc_x, vec![1.0; 5], &norm).map_err(err)?,
        theory: Some(Box::new(StrongBuckley::new(&colloc, frac, 4e-4, &norm, 1.0).map_err(err)?)),
        norm: norm.clone(),
    };
    let params = init_mlp(&[2, 4, 4, 1], Activation::Tanh, 9).map_err(err)?;
    let lambda = 1.7;
    let (_, grads) = loss_and_grad(&problem, &params, lambda, 1, true).map_err(err)?;
    let grads = grads.ok_or("no gradient returned")?;
    let loss_at = |p: &weakform::network::MlpParams| -> Result<f64, String> {
        Ok(loss_and_grad(&problem, p, lambda, 1, false).map_err(err)?.0.total(lambda))
    };
    let h = 1e-6;
    let mut worst_grad = 0.0f64;
    for (t, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let mut plus = params.clone();
            plus.tensors_mut()[t][[r, c]] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t][[r, c]] -= h;
            let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
            worst_grad = worst_grad.max((g[[r, c]] - fd).abs() / fd.abs().max(1e-6));
        }
    }

    let probe = pts(20);
    let tape = Tape::new();
    let x = tape.constant(probe.clone());
    let hs = 1e-4;
    let mut worst_second = 0.0f64;
    for dim in 0..2 {
        let d2 = input_derivative(&tape, |v| tanh_forward(&tape, params.layers(), v), &x, dim, 2).map_err(err)?;
        for (i, row) in probe.rows().into_iter().enumerate() {
            let at = |shift: f64| -> Result<f64, String> {
                let mut p = row.to_owned().insert_axis(ndarray::Axis(0));
                p[[0, dim]] += shift;
                Ok(params.predict(&p).map_err(err)?[[0, 0]])
            };
            let fd = (at(hs)? - 2.0 * at(0.0)? + at(-hs)?) / (hs * hs);
            let got = d2.value()[[i, 0]];
            worst_second = worst_second.max((got - fd).abs() / fd.abs().max(1e-3));
        }
    }
    Ok(verdict(
        worst_grad <= 1e-4 && worst_second <= 1e-4,
        format!("parameter gradient {worst_grad:.2e}, second input derivative {worst_second:.2e}"),
    ))
}

/// The network's forward pass spelled out with tape primitives.
fn tanh_forward<'t>(tape: &'t Tape, layers: &[Layer], v: &Var<'t>) -> Result<Var<'t>, DiffError> {
    let mut h = v.clone();
    for (i, l) in layers.iter().enumerate() {
        let z = h.matmul(&tape.constant(l.weight.clone()))?.add(&tape.constant(l.bias.clone()))?;
        h = if i + 1 == layers.len() { z } else { z.tanh() };
    }
    Ok(h)
}

fn integration_by_parts() -> Check {
    let norm = Normalization::identity(3);
    let ss = 0.3;
    let r5 = gauss_legendre(5).map_err(err)?;
    let rules = [r5.clone(), r5.clone(), r5];
    let regions = sample_regions(50, &[(0.0, 4.0), (0.0, 4.0), (0.0, 2.0)], &[0.4, 0.3, 0.2], 23).map_err(err)?;
    // per-dimension cubics and their derivatives (value, first, second)
    let fx = |x: f64| (1.0 + x - x.powi(3) / 6.0, -x);
    let fy = |y: f64| (2.0 - y * y + y.powi(3) / 3.0, -2.0 + 2.0 * y);
    let ft = |t: f64| (1.0 + t + t.powi(3) / 2.0, 1.0 + 1.5 * t * t);
    let trial = FnTrial::new(|xi| {
        let x = xi.column(0)?;
        let y = xi.column(1)?;
        let t = xi.column(2)?;
        let a = x.add_scalar(1.0)?.sub(&x.pow(3.0).scale(1.0 / 6.0))?;
        let b = y.square().neg().add_scalar(2.0)?.add(&y.pow(3.0).scale(1.0 / 3.0))?;
        let c = t.add_scalar(1.0)?.add(&t.pow(3.0).scale(0.5))?;
        Ok(a.mul(&b)?.mul(&c)?)
    });
    let tape = Tape::new();
    let term = WeakSinglePhase::new(&regions, &rules, &UniformConductivity(1.0), ss, &norm, 0.0, 1.0).map_err(err)?;
    let r = term.residuals(&trial, &tape, 0..regions.len()).map_err(err)?;
    let mut worst_sp = 0.0f64;
    for (i, region) in regions.iter().enumerate() {
        let (pts, w) = tensor_rule(&rules, region).map_err(err)?;
        let mut direct = 0.0;
        for (p, w) in pts.rows().into_iter().zip(&w) {
            let ((a, a2), (b, b2), (c, c1)) = (fx(p[0]), fy(p[1]), ft(p[2]));
            let lp = ss * a * b * c1 - a2 * b * c - a * b2 * c;
            direct += w * omega_sp(&p.to_vec(), region).map_err(err)?.value * lp;
        }
        worst_sp = worst_sp.max((r.value()[[i, 0]] - direct).abs() / direct.abs().max(1e-3));
    }

    let frac = FracFlow::new(2.0, 0.0, 0.0).map_err(err)?;
    let norm2 = Normalization::identity(2);
    let r10 = gauss_legendre(10).map_err(err)?;
    let rules2 = [r10.clone(), r10];
    let regions2 = sample_regions(50, &[(0.0, 1.0), (0.0, 1.0)], &[0.05, 0.04], 29).map_err(err)?;
    let smooth = FnTrial::new(|x| {
        let arg = x.column(0)?.add(&x.column(1)?.scale(2.0))?;
        Ok(arg.tanh().scale(0.3).add_scalar(0.5)?)
    });
    let mut worst_bl = 0.0f64;
    for eta in [0.0, 4e-4] {
        let family = if eta > 0.0 { TestFamily::AdvectionDiffusion } else { TestFamily::Advection };
        let term = WeakBuckley::new(&regions2, &rules2, frac, eta, &norm2, 1.0).map_err(err)?;
        let r = term.residuals(&smooth, &tape, 0..regions2.len()).map_err(err)?;
        for (i, region) in regions2.iter().enumerate() {
            let (pts, w) = tensor_rule(&rules2, region).map_err(err)?;
            let mut direct = 0.0;
            for (p, w) in pts.rows().into_iter().zip(&w) {
                let th = (p[0] + 2.0 * p[1]).tanh();
                let sech2 = 1.0 - th * th;
                let s = 0.5 + 0.3 * th;
                let integrand = 0.6 * sech2 + frac.fw_prime(s).map_err(err)? * 0.3 * sech2 + eta * 0.6 * th * sech2;
                direct += w * family.eval(&p.to_vec(), region).map_err(err)?.value * integrand;
            }
            worst_bl = worst_bl.max((r.value()[[i, 0]] - direct).abs() / direct.abs().max(region.volume()));
        }
    }
    Ok(verdict(
        worst_sp <= 1e-9 && worst_bl <= 1e-9,
        format!("single-phase {worst_sp:.2e}, Buckley-Leverett {worst_bl:.2e}"),
    ))
}

fn buckley_analytics() -> Check {
    let frac = FracFlow::new(2.0, 0.0, 0.0).map_err(err)?;
    let (s_star, speed) = buckley::welge_shock(&frac).map_err(err)?;
    // independent oracle: bisection on f(S) − S f'(S) for f = S²/(S² + (1−S)²/2)
    let f = |s: f64| s * s / (s * s + 0.5 * (1.0 - s) * (1.0 - s));
    let fp = |s: f64| {
        let d = s * s + 0.5 * (1.0 - s) * (1.0 - s);
        (2.0 * s * d - s * s * (3.0 * s - 1.0)) / (d * d)
    };
    let (mut lo, mut hi) = (0.1, 0.99);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) - mid * fp(mid)) * (f(lo) - lo * fp(lo)) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let oracle = 0.5 * (lo + hi);
    let sol = BLSolution::new(frac).map_err(err)?;
    let mut worst_mass = 0.0f64;
    for t in [0.2, 0.4, 0.8] {
        let n = 400_000;
        let upper = 2.0 * speed * t;
        let dx = upper / n as f64;
        let mut mass = 0.0;
        for i in 0..n {
            mass += buckley::analytic_s((i as f64 + 0.5) * dx, t, &sol).map_err(err)? * dx;
        }
        worst_mass = worst_mass.max((mass - t).abs());
    }
    let ok = (s_star - 0.5773503).abs() <= 1e-9 + 5e-8
        && (s_star - 1.0 / 3f64.sqrt()).abs() <= 1e-9
        && (s_star - oracle).abs() <= 1e-9
        && (speed - 1.3660254).abs() <= 1e-6;
    Ok(verdict(
        ok && worst_mass <= 1e-4,
        format!("S* = {s_star:.10}, speed = {speed:.8}, mass balance error {worst_mass:.1e}"),
    ))
}

fn reference_solver() -> Check {
    let extra = 2000;
    let run = fd::fd_run(&UniformConductivity(1.0), fd::DT, fd::STEPS + extra).map_err(err)?;
    let last = run.heads.last().ok_or("empty run")?;
    let xs = fd::node_coords();
    let span = fd::LENGTH - fd::SPACING;
    let mut dev = 0.0f64;
    for (c, h) in last.iter().enumerate() {
        let x = xs[c % fd::NODES];
        let linear = fd::HEAD_LEFT - (fd::HEAD_LEFT - fd::HEAD_RIGHT) * (x - xs[0]) / span;
        dev = dev.max((h - linear).abs());
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 1..=10 {
        let field = singlephase::default_field(seed).map_err(err)?;
        for step in fd::fd_solve(&field).map_err(err)?.heads {
            for h in step {
                lo = lo.min(h);
                hi = hi.max(h);
            }
        }
    }
    let ok = dev <= 1e-6 && lo >= fd::HEAD_RIGHT - 1e-9 && hi <= fd::HEAD_LEFT + 1e-9;
    Ok(verdict(ok, format!("linear profile deviation {dev:.1e}, heads in [{lo:.9}, {hi:.9}]")))
}

struct Runs {
    root: PathBuf,
    threads: usize,
}

impl Runs {
    fn train(&self, name: &str, text: &str) -> Result<RunOutput, String> {
        let config = ExperimentConfig::parse(text).map_err(err)?;
        let start = Instant::now();
        let out = experiment::run(&config, &self.root.join(name), self.threads, |_| {}).map_err(err)?;
        let r = &out.report;
        println!(
            "    {name}: l2 {:.3e}  r2 {:.4}  lambda {:.3}  ({:.0} s)",
            r.l2,
            r.r2,
            r.lambda_f_final,
            start.elapsed().as_secs_f64()
        );
        Ok(out)
    }
}

const SP_BASE: &str = "problem=singlephase\ndata_per_step=100\nepochs=1000\n";

fn sp(model: &str, extra: &str) -> String {
    let colloc = if model == "dnn" { "" } else { "collocation=1000\n" };
    format!("{SP_BASE}model={model}\n{colloc}{extra}")
}

fn single_phase(runs: &Runs, wf: &RunOutput) -> Check {
    let strong = runs.train("sp_tgnn", &sp("tgnn", ""))?;
    let (w, s) = (&wf.report, &strong.report);
    Ok(verdict(
        w.r2 >= 0.97 && w.l2 <= 2e-3 && w.l2 <= s.l2,
        format!("TgNN-wf R2 {:.4} L2 {:.3e}; TgNN L2 {:.3e}", w.r2, w.l2, s.l2),
    ))
}

fn noise_robustness(runs: &Runs, wf: &RunOutput) -> Check {
    let wf_noisy = runs.train("sp_tgnn_wf_noisy", &sp("tgnn_wf", "noise=0.4\n"))?;
    let dnn = runs.train("sp_dnn", &sp("dnn", ""))?;
    let dnn_noisy = runs.train("sp_dnn_noisy", &sp("dnn", "noise=0.4\n"))?;
    let wf_ratio = wf_noisy.report.l2 / wf.report.l2;
    let dnn_ratio = dnn_noisy.report.l2 / dnn.report.l2;
    Ok(verdict(
        wf_ratio <= 1.5 && dnn_ratio >= 2.0,
        format!("TgNN-wf noisy/clean {wf_ratio:.3}, DNN noisy/clean {dnn_ratio:.3}"),
    ))
}

/// First `τ` where the saturation profile drops through `level`.
fn front_position(profile: &[(f64, f64)], level: f64) -> Option<f64> {
    profile.windows(2).find_map(|w| {
        let ((t0, s0), (t1, s1)) = (w[0], w[1]);
        (s0 >= level && s1 < level).then(|| t0 + (s0 - level) / (s0 - s1) * (t1 - t0))
    })
}

fn buckley_diffusion(runs: &Runs) -> Check {
    let text = "problem=buckley\nmodel=tgnn_wf\ndata_per_step=100\ncollocation=10000\neta=0.0004\nepochs=3000\n";
    let out = runs.train("bl_tgnn_wf", text)?;
    let frac = FracFlow::new(2.0, 0.0, 0.0).map_err(err)?;
    let (s_star, speed) = buckley::welge_shock(&frac).map_err(err)?;
    let t = 0.6;
    let coords = Matrix::from_shape_fn((501, 2), |(i, j)| if j == 0 { i as f64 * 0.002 } else { t });
    let pred = predict_physical(&out.outcome.params, &Normalization::identity(2), &coords).map_err(err)?;
    let profile: Vec<(f64, f64)> = (0..501).map(|i| (coords[[i, 0]], pred[[i, 0]])).collect();
    let front = front_position(&profile, s_star / 2.0);
    let shift = front.map(|f| (f - speed * t).abs());
    let r = &out.report;
    let ok = r.l2 <= 0.12 && shift.is_some_and(|d| d <= 0.02);
    Ok(verdict(
        ok,
        format!(
            "3000-epoch fallback: L2 {:.3e} (R2 {:.4}), front at t=0.6 {} vs {:.4}",
            r.l2,
            r.r2,
            front.map_or("not found".into(), |f| format!("{f:.4}")),
            speed * t
        ),
    ))
}

fn dual_ascent(wf: &RunOutput) -> Check {
    let lambdas: Vec<f64> = wf.outcome.history.iter().map(|e| e.lambda_f).collect();
    let monotone = lambdas.windows(2).all(|w| w[1] >= w[0]);
    let finite = lambdas.iter().all(|l| l.is_finite());
    let last = wf.outcome.lambda_f;
    Ok(verdict(
        monotone && finite && (1.0..=100.0).contains(&last),
        format!("non-decreasing {monotone}, finite {finite}, final {last:.3}"),
    ))
}

fn determinism(root: &Path) -> Check {
    let text = "problem=buckley\nmodel=tgnn_wf\ndata_per_step=20\ncollocation=200\nepochs=15\nhidden=8\ndepth=3\n";
    let config = ExperimentConfig::parse(text).map_err(err)?;
    let mut rows = Vec::new();
    for (k, threads) in [(0, 1), (1, 1), (2, 3)] {
        let dir = root.join(format!("determinism_{k}"));
        experiment::run(&config, &dir, threads, |_| {}).map_err(err)?;
        let metrics = std::fs::read_to_string(dir.join("metrics.csv")).map_err(err)?;
        let history = std::fs::read_to_string(dir.join("history.csv")).map_err(err)?;
        rows.push((strip_seconds(&metrics), strip_last(&history), std::fs::read(dir.join("model.txt")).map_err(err)?));
    }
    let same = rows.windows(2).all(|w| w[0] == w[1]);
    Ok(verdict(
        same,
        "metrics (wall-time column excluded), history and weights identical across two runs and 1 vs 3 threads".into(),
    ))
}

/// Drops the wall-time column, the one field that legitimately differs.
fn strip_seconds(csv: &str) -> String {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = header.iter().position(|h| *h == "seconds");
    std::iter::once(header.join(","))
        .chain(lines.map(str::to_string))
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| Some(*i) != col)
                .map(|(_, v)| v)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn strip_last(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a))
        .collect::<Vec<_>>()
        .join("\n")
}

fn main() {
    let full = std::env::var("WEAKFORM_ACCEPTANCE").is_ok_and(|v| v == "full");
    // WEAKFORM_ACCEPTANCE_OUT keeps the run directories for inspection
    let kept = std::env::var_os("WEAKFORM_ACCEPTANCE_OUT").map(PathBuf::from);
    let root = kept
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join(format!("weakform-acceptance-{}", std::process::id())));
    let runs = Runs {
        root: root.clone(),
        threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let mut results: Vec<(u32, &str, Check)> = vec![
        (1, "quadrature exactness", quadrature_exactness()),
        (2, "autodiff correctness", autodiff_correctness()),
        (3, "integration by parts", integration_by_parts()),
        (4, "Buckley-Leverett analytics", buckley_analytics()),
        (5, "reference solver", reference_solver()),
    ];
    let skipped = || Ok(Verdict::NotRun("NOT RUN: set WEAKFORM_ACCEPTANCE=full (several hours on one core)".into()));
    if full {
        match runs.train("sp_tgnn_wf", &sp("tgnn_wf", "")) {
            Ok(wf) => {
                results.push((6, "single-phase reproduction", single_phase(&runs, &wf)));
                results.push((7, "noise robustness", noise_robustness(&runs, &wf)));
                results.push((8, "Buckley-Leverett with diffusion", buckley_diffusion(&runs)));
                results.push((9, "dual ascent", dual_ascent(&wf)));
            }
            Err(e) => {
                results.push((6, "single-phase reproduction", Err(e.clone())));
                results.push((7, "noise robustness", Err(e.clone())));
                results.push((8, "Buckley-Leverett with diffusion", buckley_diffusion(&runs)));
                results.push((9, "dual ascent", Err(e)));
            }
        }
    } else {
        results.push((6, "single-phase reproduction", skipped()));
        results.push((7, "noise robustness", skipped()));
        results.push((8, "Buckley-Leverett with diffusion", skipped()));
        results.push((9, "dual ascent", skipped()));
    }
    results.push((10, "determinism", determinism(&root)));
    if kept.is_none() {
        let _ = std::fs::remove_dir_all(&root);
    }

    let mut failed = 0;
    for (n, name, check) in results {
        let line = match check {
            Ok(Verdict::Pass(d)) => format!("PASS  {n:>2}. {name}: {d}"),
            Ok(Verdict::Fail(d)) => {
                failed += 1;
                format!("FAIL  {n:>2}. {name}: {d}")
            }
            Ok(Verdict::NotRun(d)) => format!("SKIP  {n:>2}. {name}: {d}"),
            Err(e) => {
                failed += 1;
                format!("FAIL  {n:>2}. {name}: error: {e}")
            }
        };
        println!("{line}");
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
