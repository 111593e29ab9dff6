//! Adam on the network parameters, dual ascent on the theory weight, and the
//! full-batch training loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::diffcore::{Matrix, Tape};
use crate::losses::{LabeledPoints, ResidualTerm, ResidualValues};
use crate::network::{MlpParams, Normalization, Surrogate};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params.tensors().iter().map(|t| Matrix::zeros(t.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut MlpParams, grads: &[Matrix], state: &mut AdamState) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() || state.m.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "{} parameter tensors, {} gradients, {} moment slots",
            tensors.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in tensors.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || state.m[i].dim() != g.dim() {
            return Err(Error::Dimension(format!(
                "tensor {i}: parameter {:?}, gradient {:?}",
                p.dim(),
                g.dim()
            )));
        }
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in tensor {i} at flat index {bad} (step {})",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (lr, eps) = (state.lr, state.eps);
    for (i, (p, g)) in tensors.iter_mut().zip(grads).enumerate() {
        ndarray::Zip::from(&mut **p)
            .and(g)
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
    }
    Ok(())
}

pub const LAMBDA_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualState {
    pub lambda_f: f64,
    pub step_size: f64,
}

/// Projected ascent on λ_f: the loss gradient with respect to λ_f is the
/// theory residual itself.
pub fn dual_step(state: DualState, r_theory: f64) -> Result<DualState> {
    if !(r_theory >= 0.0) {
        return Err(Error::Contract(format!("theory residual must be >= 0, got {r_theory}")));
    }
    Ok(DualState {
        lambda_f: (state.lambda_f + state.step_size * r_theory).max(LAMBDA_MIN),
        ..state
    })
}

/// Everything the loss needs: normalisation plus the four residual sets.
/// `theory = None` is plain data fitting.
pub struct TrainingProblem {
    pub norm: Normalization,
    pub data: LabeledPoints,
    pub ic: LabeledPoints,
    pub bc: LabeledPoints,
    pub theory: Option<Box<dyn ResidualTerm>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub dual_step: f64,
    pub lambda_init: f64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr: 1e-3,
            dual_step: 1.25,
            lambda_init: 1.0,
            threads: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub residuals: ResidualValues,
    /// Weight used for this epoch's loss (0 without a theory term).
    pub lambda_f: f64,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub history: Vec<EpochRecord>,
    /// λ_f after the last dual step (0 without a theory term).
    pub lambda_f: f64,
    /// Set when training stopped on a non-finite loss; `params` are then the
    /// last finite ones.
    pub aborted: Option<String>,
}

fn zeros_like(params: &MlpParams) -> Vec<Matrix> {
    params.tensors().iter().map(|t| Matrix::zeros(t.dim())).collect()
}

/// Sum of squares of one chunk and, if asked, its parameter gradients.
fn chunk_eval(
    term: &dyn ResidualTerm,
    params: &MlpParams,
    norm: &Normalization,
    items: std::ops::Range<usize>,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Matrix>>)> {
    let tape = Tape::new();
    let net = params.attach(&tape);
    let trial = Surrogate { net, norm };
    let s = term.sum_squares(&trial, &tape, items)?;
    let grads = if with_grad {
        Some(tape.grad(&s, &trial.net.parameters())?)
    } else {
        None
    };
    Ok((s.item(), grads))
}

/// Mean squared residual of `term` and the gradient of `weight · mean`,
/// accumulated over chunks in chunk order (so the result does not depend on
/// `threads`).
pub fn term_value_and_grad(
    term: &dyn ResidualTerm,
    params: &MlpParams,
    norm: &Normalization,
    weight: f64,
    threads: usize,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Matrix>>)> {
    let n = term.len();
    if n == 0 {
        return Ok((0.0, with_grad.then(|| zeros_like(params))));
    }
    let per = term.items_per_chunk().max(1);
    let chunks: Vec<std::ops::Range<usize>> = (0..n).step_by(per).map(|s| s..(s + per).min(n)).collect();
    let mut sum = 0.0;
    let mut acc = with_grad.then(|| zeros_like(params));
    let threads = threads.max(1);
    for wave in chunks.chunks(threads) {
        let results: Vec<Result<(f64, Option<Vec<Matrix>>)>> = if wave.len() == 1 {
            vec![chunk_eval(term, params, norm, wave[0].clone(), with_grad)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|r| s.spawn(|| chunk_eval(term, params, norm, r.clone(), with_grad)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("chunk worker panicked")).collect()
            })
        };
        for r in results {
            let (v, g) = r?;
            sum += v;
            if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                for (a, g) in acc.iter_mut().zip(g) {
                    *a += &g;
                }
            }
        }
    }
    let mean = sum / n as f64;
    if let Some(acc) = acc.as_mut() {
        let w = weight / n as f64;
        for a in acc.iter_mut() {
            a.mapv_inplace(|v| v * w);
        }
    }
    Ok((mean, acc))
}

/// Residual values and, optionally, the gradient of
/// `R_data + R_IC + R_BC + λ R_theory`.
pub fn loss_and_grad(
    problem: &TrainingProblem,
    params: &MlpParams,
    lambda_f: f64,
    threads: usize,
    with_grad: bool,
) -> Result<(ResidualValues, Option<Vec<Matrix>>)> {
    let norm = &problem.norm;
    let mut total = with_grad.then(|| zeros_like(params));
    let mut add = |g: Option<Vec<Matrix>>| {
        if let (Some(t), Some(g)) = (total.as_mut(), g) {
            for (a, g) in t.iter_mut().zip(g) {
                *a += &g;
            }
        }
    };
    let (data, g) = term_value_and_grad(&problem.data, params, norm, 1.0, threads, with_grad)?;
    add(g);
    let (ic, g) = term_value_and_grad(&problem.ic, params, norm, 1.0, threads, with_grad)?;
    add(g);
    let (bc, g) = term_value_and_grad(&problem.bc, params, norm, 1.0, threads, with_grad)?;
    add(g);
    let theory = match &problem.theory {
        Some(term) => {
            let (v, g) = term_value_and_grad(term.as_ref(), params, norm, lambda_f, threads, with_grad)?;
            add(g);
            v
        }
        None => 0.0,
    };
    Ok((ResidualValues { data, theory, ic, bc }, total))
}

/// Every chunk allocates and drops tens of megabytes of tape storage. With
/// glibc's adaptive thresholds that memory goes back to the kernel after each
/// chunk and is faulted in again, which costs about as much as the math.
fn keep_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        });
    }
}

pub fn train(problem: &TrainingProblem, params: MlpParams, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(problem, params, config, |_| {})
}

/// Full-batch training: per epoch one Adam step on the current loss, then
/// one dual step with that epoch's theory residual.
pub fn train_with(
    problem: &TrainingProblem,
    mut params: MlpParams,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if !(config.lr > 0.0) || !(config.dual_step >= 0.0) || !(config.lambda_init > 0.0) {
        return Err(Error::config(format!(
            "learning rate, dual step and initial lambda must be positive: {config:?}"
        )));
    }
    keep_heap();
    let has_theory = problem.theory.is_some();
    let mut adam = AdamState::new(&params, config.lr);
    let mut dual = DualState {
        lambda_f: config.lambda_init,
        step_size: config.dual_step,
    };
    let mut history = Vec::with_capacity(config.epochs);
    let mut aborted = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let lambda = if has_theory { dual.lambda_f } else { 0.0 };
        let (res, grads) = loss_and_grad(problem, &params, lambda, config.threads, true)?;
        let loss = res.total(lambda);
        if !loss.is_finite() {
            aborted = Some(format!("non-finite loss at epoch {epoch}: {res:?}"));
            break;
        }
        let before = params.clone();
        if let Err(e) = adam_step(&mut params, &grads.expect("gradients requested"), &mut adam) {
            params = before;
            aborted = Some(format!("epoch {epoch}: {e}"));
            break;
        }
        if has_theory {
            dual = dual_step(dual, res.theory)?;
        }
        let rec = EpochRecord {
            epoch,
            residuals: res,
            lambda_f: lambda,
            loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome {
        params,
        history,
        lambda_f: if has_theory { dual.lambda_f } else { 0.0 },
        aborted,
    })
}

pub const HISTORY_HEADER: &str = "epoch,r_data,r_theory,r_ic,r_bc,lambda_f,loss,seconds";

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in history {
        let v = &r.residuals;
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:.6}",
            r.epoch, v.data, v.theory, v.ic, v.bc, r.lambda_f, r.loss, r.seconds
        )?;
    }
    out.flush()?;
    Ok(())
}
