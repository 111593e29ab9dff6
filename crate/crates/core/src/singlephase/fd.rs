//! Cell-centred finite-difference solver for `S_s h_t = ∇·(K∇h)` on the
//! 51×51 grid, implicit in time, Dirichlet left/right and no-flow top/bottom.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffcore::Matrix;
use crate::evalkit::SnapshotGrid;
use crate::losses::Conductivity;
use crate::{Error, Result};

pub const NODES: usize = 51;
pub const SPACING: f64 = 20.0;
pub const LENGTH: f64 = 1020.0;
pub const DT: f64 = 0.2;
pub const STEPS: usize = 50;
/// Backward-Euler substeps per reported step.
pub const SUBSTEPS: usize = 8;
pub const SPECIFIC_STORAGE: f64 = 1e-4;
pub const HEAD_LEFT: f64 = 202.0;
pub const HEAD_RIGHT: f64 = 200.0;
/// Max-norm residual at which each linear solve stops.
pub const SOLVER_TOL: f64 = 1e-11;
const MAX_ITERS: usize = 20_000;
/// Slack for the head-range check; far above solver error.
const RANGE_SLACK: f64 = 1e-9;

/// Cell centres along either axis.
pub fn node_coords() -> Vec<f64> {
    (0..NODES).map(|i| SPACING / 2.0 + SPACING * i as f64).collect()
}

#[inline]
fn idx(i: usize, j: usize) -> usize {
    j * NODES + i
}

/// Heads at every step; `heads[0]` is the initial state, `heads[k]` is time
/// `k·dt`. Each array is row-major with `y` outer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSnapshots {
    pub dt: f64,
    pub heads: Vec<Vec<f64>>,
}

/// Harmonic-mean transmissibilities and storage for one field.
#[derive(Clone, Debug)]
pub struct FdSystem {
    /// Face between `(i, j)` and `(i + 1, j)`, stored at `idx(i, j)`.
    tx: Vec<f64>,
    /// Face between `(i, j)` and `(i, j + 1)`, stored at `idx(i, j)`.
    ty: Vec<f64>,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

impl FdSystem {
    pub fn new(field: &dyn Conductivity) -> Self {
        let xs = node_coords();
        let k: Vec<f64> = (0..NODES * NODES)
            .map(|n| field.eval(xs[n % NODES], xs[n / NODES]).0)
            .collect();
        let mut tx = vec![0.0; NODES * NODES];
        let mut ty = vec![0.0; NODES * NODES];
        for j in 0..NODES {
            for i in 0..NODES {
                // square cells: face length over centre distance is 1
                if i + 1 < NODES {
                    tx[idx(i, j)] = harmonic(k[idx(i, j)], k[idx(i + 1, j)]);
                }
                if j + 1 < NODES {
                    ty[idx(i, j)] = harmonic(k[idx(i, j)], k[idx(i, j + 1)]);
                }
            }
        }
        Self { tx, ty }
    }

    fn is_fixed(n: usize) -> bool {
        let i = n % NODES;
        i == 0 || i == NODES - 1
    }

    /// Net inflow `Σ T (h_nb − h)` into every free cell (0 on fixed cells).
    pub fn net_inflow(&self, h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; h.len()];
        self.laplace(h, &mut out, -1.0);
        out
    }

    /// `out[c] = sign · Σ T (h_c − h_nb)` on free cells, 0 elsewhere.
    fn laplace(&self, h: &[f64], out: &mut [f64], sign: f64) {
        for j in 0..NODES {
            for i in 1..NODES - 1 {
                let c = idx(i, j);
                let hc = h[c];
                let mut s = self.tx[c] * (hc - h[c + 1]) + self.tx[c - 1] * (hc - h[c - 1]);
                if j + 1 < NODES {
                    s += self.ty[c] * (hc - h[c + NODES]);
                }
                if j > 0 {
                    s += self.ty[c - NODES] * (hc - h[c - NODES]);
                }
                out[c] = sign * s;
            }
        }
    }

    fn diagonal(&self, storage: f64) -> Vec<f64> {
        (0..NODES * NODES)
            .map(|c| {
                if Self::is_fixed(c) {
                    return 1.0;
                }
                let j = c / NODES;
                let mut d = storage + self.tx[c] + self.tx[c - 1];
                if j + 1 < NODES {
                    d += self.ty[c];
                }
                if j > 0 {
                    d += self.ty[c - NODES];
                }
                d
            })
            .collect()
    }

    /// Solves `(storage·I + A) δ = rhs` on free cells (δ = 0 on fixed cells)
    /// by Jacobi-preconditioned conjugate gradients.
    fn solve(&self, storage: f64, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = rhs.len();
        let diag = self.diagonal(storage);
        let apply = |v: &[f64], out: &mut [f64]| {
            self.laplace(v, out, 1.0);
            for c in 0..n {
                if !Self::is_fixed(c) {
                    out[c] += storage * v[c];
                }
            }
        };
        let mut x = vec![0.0; n];
        let mut r: Vec<f64> = (0..n).map(|c| if Self::is_fixed(c) { 0.0 } else { rhs[c] }).collect();
        let norm_inf = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        if norm_inf(&r) <= SOLVER_TOL {
            return Ok(x);
        }
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(a, d)| a / d).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut ap = vec![0.0; n];
        for _ in 0..MAX_ITERS {
            apply(&p, &mut ap);
            let alpha = rz / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
            for c in 0..n {
                x[c] += alpha * p[c];
                r[c] -= alpha * ap[c];
            }
            if norm_inf(&r) <= SOLVER_TOL {
                return Ok(x);
            }
            for c in 0..n {
                z[c] = r[c] / diag[c];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for c in 0..n {
                p[c] = z[c] + beta * p[c];
            }
        }
        Err(Error::Numeric(format!(
            "conjugate gradients did not reach {SOLVER_TOL:e} in {MAX_ITERS} iterations"
        )))
    }

    /// One backward-Euler step of length `dt`.
    pub fn step(&self, h: &[f64], dt: f64) -> Result<Vec<f64>> {
        let storage = SPECIFIC_STORAGE * SPACING * SPACING / dt;
        let delta = self.solve(storage, &self.net_inflow(h))?;
        Ok(h.iter().zip(&delta).map(|(a, d)| a + d).collect())
    }

    /// Steady state reached from `h` (only its fixed cells matter).
    pub fn steady(&self, h: &[f64]) -> Result<Vec<f64>> {
        let delta = self.solve(0.0, &self.net_inflow(h))?;
        Ok(h.iter().zip(&delta).map(|(a, d)| a + d).collect())
    }
}

/// 202 on the left column, 200 everywhere else.
pub fn initial_heads() -> Vec<f64> {
    (0..NODES * NODES)
        .map(|c| if c % NODES == 0 { HEAD_LEFT } else { HEAD_RIGHT })
        .collect()
}

fn check_range(h: &[f64], step: usize) -> Result<()> {
    for (c, &v) in h.iter().enumerate() {
        if !(HEAD_RIGHT - RANGE_SLACK..=HEAD_LEFT + RANGE_SLACK).contains(&v) {
            return Err(Error::Numeric(format!(
                "head {v} at cell ({}, {}) of step {step} leaves [{HEAD_RIGHT}, {HEAD_LEFT}]",
                c % NODES,
                c / NODES
            )));
        }
    }
    Ok(())
}

/// `steps` reported steps of length `dt` from the initial state, each taken
/// as [`SUBSTEPS`] implicit substeps.
pub fn fd_run(field: &dyn Conductivity, dt: f64, steps: usize) -> Result<HeadSnapshots> {
    let sys = FdSystem::new(field);
    let mut heads = vec![initial_heads()];
    let sub = dt / SUBSTEPS as f64;
    for k in 1..=steps {
        let mut next = sys.step(&heads[k - 1], sub)?;
        for _ in 1..SUBSTEPS {
            next = sys.step(&next, sub)?;
        }
        check_range(&next, k)?;
        heads.push(next);
    }
    Ok(HeadSnapshots { dt, heads })
}

/// The reference run: 50 steps of 0.2.
pub fn fd_solve(field: &dyn Conductivity) -> Result<HeadSnapshots> {
    fd_run(field, DT, STEPS)
}

impl HeadSnapshots {
    pub fn num_steps(&self) -> usize {
        self.heads.len() - 1
    }

    pub fn head(&self, step: usize, i: usize, j: usize) -> f64 {
        self.heads[step][idx(i, j)]
    }

    /// Steps `1..` as a space-time grid over `(x, y)` nodes.
    pub fn to_grid(&self) -> SnapshotGrid {
        let xs = node_coords();
        let mut nodes = Matrix::zeros((NODES * NODES, 2));
        for j in 0..NODES {
            for i in 0..NODES {
                nodes[[idx(i, j), 0]] = xs[i];
                nodes[[idx(i, j), 1]] = xs[j];
            }
        }
        SnapshotGrid {
            nodes,
            times: (1..=self.num_steps()).map(|k| k as f64 * self.dt).collect(),
            values: self.heads[1..].to_vec(),
        }
    }

    /// Bilinear in space, linear in time; coordinates are clamped to the
    /// node hull and `[0, num_steps·dt]`.
    pub fn interpolate(&self, x: f64, y: f64, t: f64) -> f64 {
        let locate = |v: f64, lo: f64, h: f64, n: usize| {
            let s = ((v - lo) / h).clamp(0.0, (n - 1) as f64);
            let k = (s.floor() as usize).min(n - 2);
            (k, s - k as f64)
        };
        let (i, fx) = locate(x, SPACING / 2.0, SPACING, NODES);
        let (j, fy) = locate(y, SPACING / 2.0, SPACING, NODES);
        let (k, ft) = locate(t, 0.0, self.dt, self.heads.len());
        let plane = |s: usize| {
            let h = &self.heads[s];
            let a = h[idx(i, j)] * (1.0 - fx) + h[idx(i + 1, j)] * fx;
            let b = h[idx(i, j + 1)] * (1.0 - fx) + h[idx(i + 1, j + 1)] * fx;
            a * (1.0 - fy) + b * fy
        };
        plane(k) * (1.0 - ft) + plane(k + 1) * ft
    }

    /// One CSV block per step: `step,<heads row-major>` lines of 51 values.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "dt,{:?}", self.dt).unwrap();
        for (k, h) in self.heads.iter().enumerate() {
            for j in 0..NODES {
                let row: Vec<String> = (0..NODES).map(|i| format!("{:?}", h[idx(i, j)])).collect();
                writeln!(out, "{k},{j},{}", row.join(",")).unwrap();
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::parse(format!("snapshot file: {m}"));
        let mut lines = text.lines();
        let dt = lines
            .next()
            .and_then(|l| l.strip_prefix("dt,"))
            .ok_or_else(|| bad("missing dt line".into()))?
            .parse::<f64>()
            .map_err(|e| bad(e.to_string()))?;
        let mut heads: Vec<Vec<f64>> = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != NODES + 2 {
                return Err(bad(format!("line {} has {} fields", n + 2, f.len())));
            }
            let (k, j): (usize, usize) = (
                f[0].parse().map_err(|_| bad(format!("step `{}`", f[0])))?,
                f[1].parse().map_err(|_| bad(format!("row `{}`", f[1])))?,
            );
            if k != n / NODES || j != n % NODES {
                return Err(bad(format!("line {} out of order", n + 2)));
            }
            if j == 0 {
                heads.push(Vec::with_capacity(NODES * NODES));
            }
            for v in &f[2..] {
                heads[k].push(v.parse().map_err(|_| bad(format!("value `{v}`")))?);
            }
        }
        if heads.is_empty() || heads.last().unwrap().len() != NODES * NODES {
            return Err(bad("incomplete final step".into()));
        }
        Ok(Self { dt, heads })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
