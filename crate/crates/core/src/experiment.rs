//! Declarative runs: flat `key=value` configs, one-run orchestration with
//! CSV artifacts, and manifests of many runs.
//!
//! Config keys (defaults depend on `problem`):
//!
//! | key | singlephase | buckley |
//! |-----|-------------|---------|
//! | `problem` | required | required |
//! | `model` | required (`dnn`, `tgnn`, `tgnn_wf`) | required |
//! | `data_per_step` | 1000 | 500 |
//! | `collocation` | 10000 (0 for dnn) | 10000 (0 for dnn) |
//! | `relative_size` | 0.2 | 0.008 |
//! | `quad_points` | 5 | 10 |
//! | `noise` | 0 | 0 |
//! | `eta` | 0 | 0 |
//! | `epochs` | 1000 | 10000 |
//! | `lr` | 0.001 | 0.001 |
//! | `dual_step` | 1.25 | 1.25 |
//! | `hidden` / `depth` / `activation` | 50 / 7 / softplus | 20 / 8 / tanh |
//! | `field_seed`, `data_seed`, `sampler_seed`, `init_seed` | 1, 2, 3, 4 | 1, 2, 3, 4 |
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::buckley::{self, BLSolution, FracFlow};
use crate::diffcore::Matrix;
use crate::evalkit::{BenchmarkSetup, METRICS_HEADER, MetricsReport, Model, ProblemConfig, r2, rel_l2};
use crate::network::{Activation, MlpParams, Normalization, init_mlp, layer_sizes, predict_physical};
use crate::optimizer::{EpochRecord, TrainConfig, TrainOutcome, train_with, write_history};
use crate::singlephase::{self, HeadSnapshots, fd_solve};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Problem {
    SinglePhase,
    Buckley,
}

impl Problem {
    pub fn name(self) -> &'static str {
        match self {
            Problem::SinglePhase => "singlephase",
            Problem::Buckley => "buckley",
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "singlephase" => Ok(Problem::SinglePhase),
            "buckley" => Ok(Problem::Buckley),
            _ => Err(Error::config(format!("unknown problem `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub model: Model,
    pub data_per_step: usize,
    pub collocation: usize,
    pub relative_size: f64,
    pub quad_points: usize,
    pub noise: f64,
    pub eta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub dual_step: f64,
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
    pub field_seed: u64,
    pub data_seed: u64,
    pub sampler_seed: u64,
    pub init_seed: u64,
}

const KEYS: [&str; 18] = [
    "problem",
    "model",
    "data_per_step",
    "collocation",
    "relative_size",
    "quad_points",
    "noise",
    "eta",
    "epochs",
    "lr",
    "dual_step",
    "hidden",
    "depth",
    "activation",
    "field_seed",
    "data_seed",
    "sampler_seed",
    "init_seed",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

impl ExperimentConfig {
    /// Default settings for a problem/model pair.
    pub fn defaults(problem: Problem, model: Model) -> Self {
        let collocation = if model == Model::Dnn { 0 } else { 10_000 };
        let base = Self {
            problem,
            model,
            data_per_step: 1000,
            collocation,
            relative_size: 0.2,
            quad_points: 5,
            noise: 0.0,
            eta: 0.0,
            epochs: 1000,
            lr: 1e-3,
            dual_step: 1.25,
            hidden: 50,
            depth: 7,
            activation: Activation::Softplus,
            field_seed: 1,
            data_seed: 2,
            sampler_seed: 3,
            init_seed: 4,
        };
        match problem {
            Problem::SinglePhase => base,
            Problem::Buckley => Self {
                data_per_step: 500,
                relative_size: buckley::DEFAULT_RELATIVE_SIZE,
                quad_points: buckley::DEFAULT_QUAD_POINTS,
                epochs: 10_000,
                hidden: 20,
                depth: 8,
                activation: Activation::Tanh,
                ..base
            },
        }
    }

    /// Parses `key=value` lines; `problem` and `model` are required.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::config(format!("unknown key `{k}`")));
            }
            if map.insert(k.as_str(), v.as_str()).is_some() {
                return Err(Error::config(format!("duplicate key `{k}`")));
            }
        }
        let problem: Problem = map.get("problem").ok_or_else(|| Error::config("missing `problem`"))?.parse()?;
        let model: Model = map.get("model").ok_or_else(|| Error::config("missing `model`"))?.parse()?;
        let mut cfg = Self::defaults(problem, model);
        cfg.apply(&map)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, map: &BTreeMap<&str, &str>) -> Result<()> {
        for (&k, &v) in map {
            match k {
                "problem" | "model" => {}
                "data_per_step" => self.data_per_step = parse_value(k, v)?,
                "collocation" => self.collocation = parse_value(k, v)?,
                "relative_size" => self.relative_size = parse_value(k, v)?,
                "quad_points" => self.quad_points = parse_value(k, v)?,
                "noise" => self.noise = parse_value(k, v)?,
                "eta" => self.eta = parse_value(k, v)?,
                "epochs" => self.epochs = parse_value(k, v)?,
                "lr" => self.lr = parse_value(k, v)?,
                "dual_step" => self.dual_step = parse_value(k, v)?,
                "hidden" => self.hidden = parse_value(k, v)?,
                "depth" => self.depth = parse_value(k, v)?,
                "activation" => self.activation = v.parse()?,
                "field_seed" => self.field_seed = parse_value(k, v)?,
                "data_seed" => self.data_seed = parse_value(k, v)?,
                "sampler_seed" => self.sampler_seed = parse_value(k, v)?,
                "init_seed" => self.init_seed = parse_value(k, v)?,
                _ => unreachable!("keys checked against KEYS"),
            }
        }
        Ok(())
    }

    /// Re-parses with extra `key=value` overrides on top of this config.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = self
            .to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .filter(|(k, _)| !overrides.iter().any(|(o, _)| o == k))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.model == Model::Dnn && self.collocation > 0 {
            return bad("model=dnn forbids collocation > 0".into());
        }
        if self.model != Model::Dnn && self.collocation == 0 {
            return bad(format!("model={} needs collocation > 0", self.model));
        }
        if self.model == Model::Dnn && self.data_per_step == 0 {
            return bad("model=dnn needs data_per_step > 0".into());
        }
        if !(self.relative_size > 0.0 && self.relative_size < 1.0) {
            return bad(format!("relative_size must lie in (0, 1), got {}", self.relative_size));
        }
        if self.quad_points == 0 || self.hidden == 0 || self.depth == 0 {
            return bad("quad_points, hidden and depth must be positive".into());
        }
        if !(self.noise >= 0.0) || !(self.eta >= 0.0) {
            return bad("noise and eta must be >= 0".into());
        }
        if self.problem == Problem::SinglePhase && self.eta != 0.0 {
            return bad("eta applies to buckley only".into());
        }
        if !(self.lr > 0.0) || !(self.dual_step >= 0.0) {
            return bad("lr must be positive and dual_step non-negative".into());
        }
        Ok(())
    }

    /// Canonical form: every key in schema order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("problem", self.problem.to_string());
        kv("model", self.model.to_string());
        kv("data_per_step", self.data_per_step.to_string());
        kv("collocation", self.collocation.to_string());
        kv("relative_size", format!("{:?}", self.relative_size));
        kv("quad_points", self.quad_points.to_string());
        kv("noise", format!("{:?}", self.noise));
        kv("eta", format!("{:?}", self.eta));
        kv("epochs", self.epochs.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("dual_step", format!("{:?}", self.dual_step));
        kv("hidden", self.hidden.to_string());
        kv("depth", self.depth.to_string());
        kv("activation", self.activation.name().to_string());
        kv("field_seed", self.field_seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("sampler_seed", self.sampler_seed.to_string());
        kv("init_seed", self.init_seed.to_string());
        s
    }

    /// FNV-1a of the canonical text, as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let h = self.to_text().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        });
        format!("{h:016x}")
    }

    pub fn problem_config(&self) -> ProblemConfig {
        ProblemConfig {
            model: self.model,
            data_per_step: self.data_per_step,
            collocation: self.collocation,
            relative_size: self.relative_size,
            quad_points: self.quad_points,
            noise: self.noise,
            eta: self.eta,
            data_seed: self.data_seed,
            sampler_seed: self.sampler_seed,
        }
    }

    pub fn train_config(&self, threads: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            dual_step: self.dual_step,
            threads: threads.max(1),
            ..TrainConfig::default()
        }
    }

    /// Total observations used for training.
    pub fn data_points(&self) -> usize {
        let steps = match self.problem {
            Problem::SinglePhase => singlephase::TRAIN_STEPS.count(),
            Problem::Buckley => buckley::TRAIN_STEPS.count(),
        };
        self.data_per_step * steps
    }
}

/// Reference solution a problem is trained against.
pub enum Reference {
    SinglePhase {
        field: Box<singlephase::ConductivityField>,
        heads: HeadSnapshots,
    },
    Buckley(BLSolution),
}

impl Reference {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        Ok(match config.problem {
            Problem::SinglePhase => {
                let field = singlephase::default_field(config.field_seed)?;
                let heads = fd_solve(&field)?;
                Reference::SinglePhase {
                    field: Box::new(field),
                    heads,
                }
            }
            Problem::Buckley => Reference::Buckley(BLSolution::new(FracFlow::default())?),
        })
    }

    pub fn setup(&self, config: &ExperimentConfig) -> Result<BenchmarkSetup> {
        let pc = config.problem_config();
        match self {
            Reference::SinglePhase { field, heads } => singlephase::sp_problem(field, heads, &pc),
            Reference::Buckley(sol) => buckley::bl_problem(sol, &pc),
        }
    }

    /// Writes the reference fields into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        match self {
            Reference::SinglePhase { field, heads } => {
                let xs = singlephase::node_coords();
                field.save(dir.join("field.txt"), &xs, &xs)?;
                heads.save(dir.join("heads.csv"))?;
            }
            Reference::Buckley(sol) => sol.write_csv(dir.join("saturation.csv"))?,
        }
        Ok(())
    }
}

/// What one run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub outcome: TrainOutcome,
}

fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for r in rows {
        writeln!(out, "{r}")?;
    }
    out.flush()?;
    Ok(())
}

fn predict(params: &MlpParams, norm: &Normalization, coords: &Matrix) -> Result<Vec<f64>> {
    Ok(predict_physical(params, norm, coords)?.column(0).to_vec())
}

/// Profile extracts: heads along y = 320, 620, 920 at every evaluation step,
/// or saturation at t ∈ {0.44, 0.6, 0.8, 0.98}.
fn write_profiles(reference: &Reference, params: &MlpParams, norm: &Normalization, dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    let header = match reference {
        Reference::SinglePhase { heads, .. } => {
            let xs = singlephase::node_coords();
            for y in [320.0, 620.0, 920.0] {
                for k in singlephase::EVAL_STEPS {
                    let t = k as f64 * heads.dt;
                    let mut coords = Matrix::zeros((xs.len(), 3));
                    for (i, &x) in xs.iter().enumerate() {
                        coords[[i, 0]] = x;
                        coords[[i, 1]] = y;
                        coords[[i, 2]] = t;
                    }
                    let pred = predict(params, norm, &coords)?;
                    for (&x, p) in xs.iter().zip(pred) {
                        rows.push(format!("{y:?},{t:?},{x:?},{p:?},{:?}", heads.interpolate(x, y, t)));
                    }
                }
            }
            "y,t,x,pred,truth"
        }
        Reference::Buckley(sol) => {
            for t in [0.44, 0.6, 0.8, 0.98] {
                let mut coords = Matrix::zeros((sol.tau.len(), 2));
                for (i, &tau) in sol.tau.iter().enumerate() {
                    coords[[i, 0]] = tau;
                    coords[[i, 1]] = t;
                }
                let pred = predict(params, norm, &coords)?;
                for (&tau, p) in sol.tau.iter().zip(pred) {
                    rows.push(format!("{t:?},{tau:?},{p:?},{:?}", buckley::analytic_s(tau, t, sol)?));
                }
            }
            "t,tau,pred,truth"
        }
    };
    write_lines(&dir.join("profiles.csv"), header, rows)
}

/// Trains one configuration and writes `metrics.csv`, `history.csv`,
/// `predictions.csv`, `profiles.csv`, `config.txt` and `model.txt` to `out`.
/// A non-finite loss writes the history and returns [`Error::Training`].
pub fn run(
    config: &ExperimentConfig,
    out: &Path,
    threads: usize,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutput> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("config.txt"),
        format!("{}fingerprint={}\n", config.to_text(), config.fingerprint()),
    )?;
    let reference = Reference::build(config)?;
    let setup = reference.setup(config)?;
    let sizes = layer_sizes(setup.input_dim, config.hidden, config.depth, 1);
    let params = init_mlp(&sizes, config.activation, config.init_seed)?;

    let start = Instant::now();
    let outcome = train_with(&setup.problem, params, &config.train_config(threads), on_epoch)?;
    let seconds = start.elapsed().as_secs_f64();
    write_history(out.join("history.csv"), &outcome.history)?;
    if let Some(why) = &outcome.aborted {
        return Err(Error::Training(why.clone()));
    }
    outcome.params.save(out.join("model.txt"))?;

    let norm = &setup.problem.norm;
    let pred = predict(&outcome.params, norm, &setup.eval.coords)?;
    let truth = &setup.eval.truth;
    let report = MetricsReport {
        model: config.model,
        problem: config.problem.to_string(),
        data_points: config.data_points(),
        collocation: config.collocation,
        noise: config.noise,
        eta: config.eta,
        l2: rel_l2(&pred, truth)?,
        r2: r2(&pred, truth)?,
        seconds,
        lambda_f_final: outcome.lambda_f,
        fingerprint: config.fingerprint(),
    };
    write_lines(&out.join("metrics.csv"), METRICS_HEADER, [report.csv_row()])?;

    let dim = setup.input_dim;
    let coord_names = match config.problem {
        Problem::SinglePhase => "x,y,t",
        Problem::Buckley => "tau,t",
    };
    let rows = setup.eval.coords.rows().into_iter().zip(pred.iter().zip(truth)).map(|(c, (p, t))| {
        let mut line = String::new();
        for d in 0..dim {
            write!(line, "{:?},", c[d]).unwrap();
        }
        write!(line, "{p:?},{t:?}").unwrap();
        line
    });
    write_lines(&out.join("predictions.csv"), &format!("{coord_names},pred,truth"), rows)?;
    write_profiles(&reference, &outcome.params, norm, out)?;
    Ok(RunOutput { report, outcome })
}

/// One manifest line: a config file plus `key=value` overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub config_path: PathBuf,
    pub overrides: Vec<(String, String)>,
}

/// Relative config paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let path = PathBuf::from(parts.next().expect("non-empty line"));
        let overrides = parts
            .map(|p| {
                p.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::config(format!("manifest line {}: bad override `{p}`", n + 1)))
            })
            .collect::<Result<_>>()?;
        entries.push(ManifestEntry {
            config_path: if path.is_absolute() { path } else { base.join(path) },
            overrides,
        });
    }
    if entries.is_empty() {
        return Err(Error::config("empty manifest"));
    }
    Ok(entries)
}

pub const MATRIX_HEADER: &str =
    "model,problem,data_points,collocation,noise,eta,l2,r2,seconds,lambda_f_final,status";

fn entry_config(entry: &ManifestEntry) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&entry.config_path).map_err(|e| {
        Error::config(format!("cannot read {}: {e}", entry.config_path.display()))
    })?;
    let mut pairs: Vec<(String, String)> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got `{line}`")))?;
        let k = k.trim().to_string();
        if !entry.overrides.iter().any(|(o, _)| *o == k) {
            pairs.push((k, v.trim().to_string()));
        }
    }
    pairs.extend(entry.overrides.iter().cloned());
    ExperimentConfig::from_pairs(&pairs)
}

/// Placeholder row for a cell that was not trained.
fn blank_row(pairs: &[(String, String)], status: &str) -> String {
    let get = |k: &str| pairs.iter().rev().find(|(a, _)| a == k).map(|(_, v)| v.as_str()).unwrap_or("");
    format!(
        "{},{},N/A,{},{},{},N/A,N/A,N/A,N/A,{}",
        get("model"),
        get("problem"),
        get("collocation"),
        get("noise"),
        get("eta"),
        status.replace([',', '\n'], ";")
    )
}

/// Runs every entry into `out/run_NNN` and writes `out/matrix.csv` with one
/// row per entry; failures are recorded and do not stop the matrix.
pub fn run_matrix(entries: &[ManifestEntry], out: &Path, threads: usize) -> Result<Vec<String>> {
    if entries.is_empty() {
        return Err(Error::config("empty manifest"));
    }
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let row = match entry_config(entry) {
            Ok(cfg) => match run(&cfg, &out.join(format!("run_{i:03}")), threads, |_| {}) {
                Ok(o) => format!("{},ok", o.report.csv_row()),
                Err(e) => blank_row(&cfg_pairs(&cfg), &format!("error: {e}")),
            },
            // a DNN without data is the empty cell of the comparison table
            Err(Error::Config(m)) if m.contains("dnn needs data_per_step") => {
                blank_row(&raw_pairs(entry), "N/A")
            }
            Err(e) => blank_row(&raw_pairs(entry), &format!("error: {e}")),
        };
        rows.push(row);
    }
    write_lines(&out.join("matrix.csv"), MATRIX_HEADER, rows.iter().cloned())?;
    Ok(rows)
}

fn cfg_pairs(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    cfg.to_text()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Whatever key/value pairs can be read from an entry, for failure rows.
fn raw_pairs(entry: &ManifestEntry) -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = std::fs::read_to_string(&entry.config_path)
        .unwrap_or_default()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    pairs.extend(entry.overrides.iter().cloned());
    pairs
}
