//! The `opbasis` command line: generate, train, eval, gap, render, inspect.
//!
//! Every command reads a plain-text `key = value` config (`#` starts a
//! comment), applies `--set key=value` and `--seed` overrides, rejects
//! unknown keys, and writes the fully resolved config next to its outputs.
//! Feeding that snapshot back through `--config` reproduces the outputs
//! bit for bit.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::dataset::{digest_hex, DatasetError, DatasetSpec, MultifidelityDataset};
use crate::eval::{evaluate_model, performance_gap, EvalError, EvalReport, Statistic};
use crate::grid::FunctionSample;
use crate::model::{ModelConfig, ModelError, OperatorModel};
use crate::nets::NetError;
use crate::pde::{
    BurgersConfig, BurgersProblem, GrfSpec, NavierStokesConfig, NavierStokesProblem, PdeError, PoissonProblem, Problem,
};
use crate::train::{train_with, LossKind, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

fn pde_error(e: PdeError) -> CliError {
    match e {
        PdeError::BlowUp { .. } => CliError::Numeric(e.to_string()),
        PdeError::Config(_) => CliError::Config(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Spec(_) => Self::Config(e.to_string()),
            DatasetError::Generation { index, source } => match pde_error(source) {
                CliError::Numeric(m) => Self::Numeric(format!("sample {index}: {m}")),
                CliError::Config(m) => Self::Config(format!("sample {index}: {m}")),
                CliError::Data(m) => Self::Data(format!("sample {index}: {m}")),
            },
            DatasetError::Pde(p) => pde_error(p),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite(_) | ModelError::Net(NetError::NonFiniteGradient(_)) => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::Config(e.to_string()),
            TrainError::Diverged { .. } => Self::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::EmptyClass(_) => Self::Config(e.to_string()),
            EvalError::Model(m) => m.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "opbasis", version, about = "Operator learning with neural bases")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve PDE samples into a dataset file.
    Generate(RunArgs),
    /// Train a model on a dataset; writes a checkpoint and a history CSV.
    Train(RunArgs),
    /// Per-resolution test errors of one or more checkpoints.
    Eval(RunArgs),
    /// Discretization performance gap of one or more checkpoints.
    Gap(RunArgs),
    /// Heatmaps (PPM) and CSV arrays of one sample.
    Render(RunArgs),
    /// Print the header of a dataset or checkpoint file.
    Inspect { path: PathBuf },
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Plain-text key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (generate, train) or directory (eval, gap, render).
    #[arg(long)]
    pub out: PathBuf,
    /// Worker thread cap.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Extra `key=value` override, may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Resolved key-value configuration of one command. An empty value means
/// unset.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    keys: Vec<&'static str>,
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    /// `table` lists every accepted key with its default (`""` for none).
    pub fn new(table: &[(&'static str, &str)]) -> Self {
        Self {
            keys: table.iter().map(|t| t.0).collect(),
            values: table.iter().map(|(k, v)| (*k, v.to_string())).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let Some(k) = self.keys.iter().find(|k| **k == key) else {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        };
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {}: expected key = value", n + 1)));
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn resolve(table: &[(&'static str, &str)], args: &RunArgs) -> Result<Self, CliError> {
        let mut cfg = Self::new(table);
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for kv in &args.set {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(CliError::Config(format!("--set {kv}: expected KEY=VALUE")));
            };
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = args.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }

    /// Fills `key` with `value` unless it was given.
    pub fn default_to(&mut self, key: &str, value: impl ToString) {
        if self.get(key).is_none() {
            // keys come from the table, so this cannot fail
            let _ = self.set(key, &value.to_string());
        }
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.require(key)?;
        v.parse().map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
    }

    pub fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.get(key).map(|_| self.parse(key)).transpose()
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.get(key).map_or(Ok(Vec::new()), |v| parse_list(v, key))
    }

    /// Comma-separated paths.
    pub fn paths(&self, key: &str) -> Vec<PathBuf> {
        self.get(key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect())
            .unwrap_or_default()
    }

    /// Every key in table order, `key = value` per line.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for k in &self.keys {
            let _ = writeln!(s, "{k} = {}", self.values[k]);
        }
        s
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>, CliError> {
    v.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{s}`"))))
        .collect()
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

/// `<file>.config` for file outputs.
pub fn snapshot_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_dataset(path: &Path) -> Result<MultifidelityDataset, CliError> {
    MultifidelityDataset::load(path).map_err(|e| match e {
        DatasetError::Io(io) => CliError::Data(format!("{}: {io}", path.display())),
        e => e.into(),
    })
}

fn load_model(path: &Path) -> Result<OperatorModel, CliError> {
    OperatorModel::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub const GENERATE_KEYS: &[(&str, &str)] = &[
    ("problem", ""),
    ("n", ""),
    ("resolutions", ""),
    ("proportions", ""),
    ("seed", "0"),
    ("alpha", ""),
    ("rfs_decay", ""),
    ("rfs_modes", ""),
    ("rfs_amplitude", ""),
    ("grf_sigma", ""),
    ("grf_tau", ""),
    ("grf_alpha", ""),
    ("grf_modes", ""),
    ("nu", ""),
    ("t_final", ""),
    ("solver_modes", ""),
    ("dt", ""),
    ("forcing_amplitude", ""),
    ("export_csv", "false"),
];

const POISSON_KEYS: &[&str] = &["alpha", "rfs_decay", "rfs_modes", "rfs_amplitude"];
const GRF_KEYS: &[&str] = &["grf_sigma", "grf_tau", "grf_alpha", "grf_modes", "nu", "t_final", "solver_modes", "dt"];

fn reject_foreign(cfg: &RunConfig, own: &[&str], problem: &str) -> Result<(), CliError> {
    let all = POISSON_KEYS.iter().chain(GRF_KEYS).chain(&["forcing_amplitude"]);
    for k in all {
        if !own.contains(k) && cfg.get(k).is_some() {
            return Err(CliError::Config(format!("`{k}` does not apply to problem {problem}")));
        }
    }
    Ok(())
}

fn grf_from(cfg: &mut RunConfig, d: GrfSpec) -> Result<GrfSpec, CliError> {
    cfg.default_to("grf_sigma", format!("{:?}", d.sigma));
    cfg.default_to("grf_tau", format!("{:?}", d.tau));
    cfg.default_to("grf_alpha", format!("{:?}", d.alpha));
    cfg.default_to("grf_modes", d.kmax);
    Ok(GrfSpec {
        sigma: cfg.parse("grf_sigma")?,
        tau: cfg.parse("grf_tau")?,
        alpha: cfg.parse("grf_alpha")?,
        kmax: cfg.parse("grf_modes")?,
    })
}

/// `(nu, t_final, modes, dt)` with problem defaults filled in.
fn solver_from(cfg: &mut RunConfig, nu: f64, t_final: f64, modes: usize) -> Result<(f64, f64, usize, Option<f64>), CliError> {
    cfg.default_to("nu", format!("{nu:?}"));
    cfg.default_to("t_final", format!("{t_final:?}"));
    cfg.default_to("solver_modes", modes);
    cfg.default_to("dt", "auto");
    let dt = match cfg.require("dt")? {
        "auto" => None,
        _ => Some(cfg.parse("dt")?),
    };
    Ok((cfg.parse("nu")?, cfg.parse("t_final")?, cfg.parse("solver_modes")?, dt))
}

/// Builds the generator named by `problem`, filling defaults into `cfg`.
pub fn problem_from_config(cfg: &mut RunConfig) -> Result<Box<dyn Problem>, CliError> {
    let tag = cfg.require("problem")?.to_string();
    match tag.as_str() {
        "poisson" => {
            reject_foreign(cfg, POISSON_KEYS, &tag)?;
            let d = PoissonProblem::default();
            cfg.default_to("alpha", format!("{:?}", d.alpha));
            cfg.default_to("rfs_decay", format!("{:?}", d.decay));
            cfg.default_to("rfs_modes", d.modes);
            cfg.default_to("rfs_amplitude", format!("{:?}", d.amplitude));
            Ok(Box::new(PoissonProblem {
                alpha: cfg.parse("alpha")?,
                decay: cfg.parse("rfs_decay")?,
                modes: cfg.parse("rfs_modes")?,
                amplitude: cfg.parse("rfs_amplitude")?,
            }))
        }
        "burgers" => {
            reject_foreign(cfg, GRF_KEYS, &tag)?;
            let grf = grf_from(cfg, GrfSpec::burgers())?;
            let d = BurgersConfig::default();
            let (nu, t_final, modes, dt) = solver_from(cfg, d.nu, d.t_final, d.modes)?;
            Ok(Box::new(BurgersProblem {
                grf,
                solver: BurgersConfig { nu, t_final, modes, dt },
            }))
        }
        "navier_stokes" => {
            let own: Vec<&str> = GRF_KEYS.iter().copied().chain(["forcing_amplitude"]).collect();
            reject_foreign(cfg, &own, &tag)?;
            let grf = grf_from(cfg, GrfSpec::navier_stokes())?;
            let d = NavierStokesConfig::default();
            let (nu, t_final, modes, dt) = solver_from(cfg, d.nu, d.t_final, d.modes)?;
            cfg.default_to("forcing_amplitude", format!("{:?}", NavierStokesProblem::default().forcing_amplitude));
            Ok(Box::new(NavierStokesProblem {
                grf,
                solver: NavierStokesConfig { nu, t_final, modes, dt },
                forcing_amplitude: cfg.parse("forcing_amplitude")?,
            }))
        }
        other => Err(CliError::Config(format!(
            "unknown problem `{other}` (poisson, burgers, navier_stokes)"
        ))),
    }
}

fn parse_bool(cfg: &RunConfig, key: &str) -> Result<bool, CliError> {
    match cfg.require(key)? {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(CliError::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

pub fn cmd_generate(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(GENERATE_KEYS, args)?;
    let problem = problem_from_config(&mut cfg)?;
    let n: usize = cfg.parse("n")?;
    let resolutions: Vec<usize> = cfg.list("resolutions")?;
    if resolutions.len() == 1 {
        cfg.default_to("proportions", "1.0");
    }
    let proportions: Vec<f64> = cfg.list("proportions")?;
    let seed: u64 = cfg.parse("seed")?;
    let export = parse_bool(&cfg, "export_csv")?;
    let spec = DatasetSpec::new(n, resolutions, proportions)?;
    let ds = MultifidelityDataset::assemble(problem.as_ref(), &spec, seed)?;
    write_file(&snapshot_path(&args.out), cfg.snapshot())?;
    ds.save(&args.out)?;
    if export {
        ds.export_csv(&sibling(&args.out, ".csv"))?;
    }
    eprintln!(
        "wrote {} samples ({}) to {}",
        ds.len(),
        ds.counts_by_resolution().iter().map(|(r, c)| format!("R={r}: {c}")).collect::<Vec<_>>().join(", "),
        args.out.display()
    );
    Ok(())
}

pub const TRAIN_KEYS: &[(&str, &str)] = &[
    ("dataset", ""),
    ("preset", ""),
    ("seed", "0"),
    ("learning_rate", ""),
    ("decay", ""),
    ("epochs", ""),
    ("batch_size", ""),
    ("loss", ""),
    ("model", ""),
    ("p", ""),
    ("q", ""),
    ("encoder_modes", ""),
    ("reconstructor_modes", ""),
    ("encoder_hidden", ""),
    ("approximator_hidden", ""),
    ("reconstructor_hidden", ""),
    ("slope", ""),
    ("resume", ""),
];

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Training and architecture settings with preset defaults filled in.
pub fn train_setup(cfg: &mut RunConfig, ds: &MultifidelityDataset) -> Result<(TrainConfig, ModelConfig), CliError> {
    if cfg.get("resume").is_some() {
        return Err(CliError::Config("resuming from a checkpoint is not supported".into()));
    }
    let problem = ds.provenance().problem.clone();
    cfg.default_to("preset", &problem);
    let preset = cfg.require("preset")?.to_string();
    let t = TrainConfig::for_problem(&preset)
        .ok_or_else(|| CliError::Config(format!("unknown training preset `{preset}`")))?;
    cfg.default_to("learning_rate", format!("{:?}", t.learning_rate));
    cfg.default_to("decay", format!("{:?}", t.decay));
    cfg.default_to("epochs", t.epochs);
    cfg.default_to("batch_size", t.batch_size);
    cfg.default_to("loss", t.loss.name());
    let loss = cfg.require("loss")?;
    let loss = LossKind::parse(loss).ok_or_else(|| CliError::Config(format!("unknown loss `{loss}`")))?;
    let train = TrainConfig {
        learning_rate: cfg.parse("learning_rate")?,
        decay: cfg.parse("decay")?,
        epochs: cfg.parse("epochs")?,
        batch_size: cfg.parse("batch_size")?,
        seed: cfg.parse("seed")?,
        loss,
    };
    train.validate()?;

    let default_arch = if problem == "synthetic" || ModelConfig::for_problem(&problem).is_none() {
        if ds.dim() == 1 { "burgers" } else { "poisson" }.to_string()
    } else {
        problem
    };
    cfg.default_to("model", default_arch);
    let arch = cfg.require("model")?.to_string();
    let m = ModelConfig::for_problem(&arch)
        .ok_or_else(|| CliError::Config(format!("unknown model preset `{arch}`")))?;
    cfg.default_to("p", m.p);
    cfg.default_to("q", m.q);
    cfg.default_to("encoder_modes", m.encoder_modes);
    cfg.default_to("reconstructor_modes", m.reconstructor_modes);
    cfg.default_to("encoder_hidden", join(&m.encoder_hidden));
    cfg.default_to("approximator_hidden", join(&m.approximator_hidden));
    cfg.default_to("reconstructor_hidden", join(&m.reconstructor_hidden));
    cfg.default_to("slope", format!("{:?}", m.slope));
    let model = ModelConfig {
        dim: m.dim,
        encoder_modes: cfg.parse("encoder_modes")?,
        reconstructor_modes: cfg.parse("reconstructor_modes")?,
        encoder_hidden: cfg.list("encoder_hidden")?,
        approximator_hidden: cfg.list("approximator_hidden")?,
        reconstructor_hidden: cfg.list("reconstructor_hidden")?,
        p: cfg.parse("p")?,
        q: cfg.parse("q")?,
        slope: cfg.parse("slope")?,
    };
    if model.dim != ds.dim() {
        return Err(CliError::Config(format!(
            "model preset `{arch}` is {}D but the dataset is {}D",
            model.dim,
            ds.dim()
        )));
    }
    Ok((train, model))
}

pub fn cmd_train(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(TRAIN_KEYS, args)?;
    if cfg.get("resume").is_some() {
        return Err(CliError::Config("resuming from a checkpoint is not supported".into()));
    }
    let ds = load_dataset(Path::new(cfg.require("dataset")?))?;
    let (tcfg, mcfg) = train_setup(&mut cfg, &ds)?;
    let model = OperatorModel::new(&mcfg, &ds.provenance().problem, tcfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&snapshot_path(&args.out), cfg.snapshot())?;
    let epochs = tcfg.epochs;
    let (model, history) = train_with(model, &ds, &tcfg, |e, loss| {
        if e % 10 == 0 || e + 1 == epochs {
            eprintln!("epoch {e:>5}  loss {loss:.6e}");
        }
    })?;
    let mut bytes = Vec::new();
    model.write_to(&mut bytes)?;
    write_file(&args.out, &bytes)?;
    write_file(&sibling(&args.out, ".history.csv"), history.to_csv(false))?;
    eprintln!(
        "trained {} epochs ({} steps) in {:.1}s; checkpoint {}",
        epochs,
        history.optimizer_steps,
        history.wall_seconds.last().copied().unwrap_or(0.0),
        args.out.display()
    );
    Ok(())
}

pub const EVAL_KEYS: &[(&str, &str)] = &[
    ("checkpoints", ""),
    ("labels", ""),
    ("test_sets", ""),
    ("train_resolutions", ""),
    ("statistic", "mean"),
    ("seed", "0"),
];

struct EvalRun {
    labels: Vec<String>,
    reports: Vec<EvalReport>,
    train_groups: Vec<Vec<usize>>,
    statistic: Statistic,
}

fn run_evaluations(cfg: &RunConfig) -> Result<EvalRun, CliError> {
    let checkpoints = cfg.paths("checkpoints");
    if checkpoints.is_empty() {
        return Err(CliError::Config("missing required key `checkpoints`".into()));
    }
    let test_paths = cfg.paths("test_sets");
    if test_paths.is_empty() {
        return Err(CliError::Config("missing required key `test_sets`".into()));
    }
    let labels: Vec<String> = match cfg.get("labels") {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        None => checkpoints
            .iter()
            .map(|p| p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()))
            .collect(),
    };
    if labels.len() != checkpoints.len() {
        return Err(CliError::Config(format!("{} labels for {} checkpoints", labels.len(), checkpoints.len())));
    }
    let mut uniq = labels.clone();
    uniq.sort();
    uniq.dedup();
    if uniq.len() != labels.len() {
        return Err(CliError::Config("checkpoint labels must be distinct".into()));
    }
    let groups: Vec<Vec<usize>> = match cfg.get("train_resolutions") {
        None => vec![Vec::new(); checkpoints.len()],
        Some(v) => {
            let g: Vec<Vec<usize>> = v
                .split('|')
                .map(|s| parse_list(s, "train_resolutions"))
                .collect::<Result<_, _>>()?;
            match g.len() {
                1 => vec![g[0].clone(); checkpoints.len()],
                n if n == checkpoints.len() => g,
                n => {
                    return Err(CliError::Config(format!(
                        "{n} train_resolutions groups for {} checkpoints",
                        checkpoints.len()
                    )))
                }
            }
        }
    };
    let stat = cfg.require("statistic")?;
    let statistic = Statistic::parse(stat).ok_or_else(|| CliError::Config(format!("unknown statistic `{stat}`")))?;
    let tests: Vec<MultifidelityDataset> = test_paths.iter().map(|p| load_dataset(p)).collect::<Result<_, _>>()?;
    let refs: Vec<&MultifidelityDataset> = tests.iter().collect();
    let mut reports = Vec::with_capacity(checkpoints.len());
    for (path, train_res) in checkpoints.iter().zip(&groups) {
        let model = load_model(path)?;
        reports.push(evaluate_model(&model, &refs, train_res)?);
    }
    Ok(EvalRun {
        labels,
        reports,
        train_groups: groups,
        statistic,
    })
}

/// Train × test matrix of the chosen statistic, one row per checkpoint.
pub fn matrix_csv(labels: &[String], reports: &[EvalReport], stat: Statistic) -> String {
    let mut s = String::from("train");
    if let Some(r) = reports.first() {
        for row in &r.rows {
            let _ = write!(s, ",R{}", row.resolution);
        }
    }
    s.push('\n');
    for (label, r) in labels.iter().zip(reports) {
        s.push_str(label);
        for row in &r.rows {
            let _ = write!(s, ",{:?}", row.stat(stat));
        }
        s.push('\n');
    }
    s
}

pub fn cmd_eval(args: &RunArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(EVAL_KEYS, args)?;
    let run = run_evaluations(&cfg)?;
    let out = &args.out;
    fs::create_dir_all(out)?;
    write_file(&out.join("config.txt"), cfg.snapshot())?;
    for (label, r) in run.labels.iter().zip(&run.reports) {
        write_file(&out.join(format!("report_{label}.csv")), r.to_csv())?;
        write_file(&out.join(format!("summary_{label}.txt")), r.summary(run.statistic))?;
        if r.failures() > 0 {
            eprintln!("{label}: {} samples failed and were excluded", r.failures());
        }
    }
    let matrix = matrix_csv(&run.labels, &run.reports, run.statistic);
    write_file(&out.join("matrix.csv"), &matrix)?;
    print!("{matrix}");
    Ok(())
}

pub fn cmd_gap(args: &RunArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(EVAL_KEYS, args)?;
    if cfg.get("train_resolutions").is_none() {
        return Err(CliError::Config("gap needs `train_resolutions`".into()));
    }
    let run = run_evaluations(&cfg)?;
    let mut csv = format!("label,train_resolutions,gap_{}\n", run.statistic.name());
    for ((label, r), train) in run.labels.iter().zip(&run.reports).zip(&run.train_groups) {
        let g = performance_gap(r, train, run.statistic)?;
        let _ = writeln!(csv, "{label},{},{g:?}", join(train).replace(',', " "));
    }
    let out = &args.out;
    fs::create_dir_all(out)?;
    write_file(&out.join("config.txt"), cfg.snapshot())?;
    write_file(&out.join("gap.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub const RENDER_KEYS: &[(&str, &str)] = &[
    ("dataset", ""),
    ("index", "0"),
    ("checkpoint", ""),
    ("vmin", ""),
    ("vmax", ""),
    ("palette", "color"),
    ("scale", "4"),
    ("seed", "0"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Palette {
    Gray,
    Color,
}

/// Pixel flagging a value outside the colour range.
pub const FLAG_RGB: [u8; 3] = [255, 0, 255];

fn palette_rgb(p: Palette, t: f64) -> [u8; 3] {
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match p {
        Palette::Gray => [c(t); 3],
        // blue, cyan, yellow, red
        Palette::Color => {
            let stops = [[0.0, 0.0, 0.6], [0.0, 0.8, 0.9], [1.0, 0.9, 0.1], [0.7, 0.0, 0.0]];
            let x = t.clamp(0.0, 1.0) * 3.0;
            let i = (x.floor() as usize).min(2);
            let f = x - i as f64;
            let mix = |k: usize| stops[i][k] * (1.0 - f) + stops[i + 1][k] * f;
            [c(mix(0)), c(mix(1)), c(mix(2))]
        }
    }
}

/// Binary PPM heatmap of a 2D sample, `x` to the right and `y` upward,
/// each node drawn as a `scale`×`scale` block. Returns the image and the
/// number of nodes outside `[vmin, vmax]`, which are painted [`FLAG_RGB`].
pub fn render_ppm(s: &FunctionSample, vmin: f64, vmax: f64, palette: Palette, scale: usize) -> (Vec<u8>, usize) {
    let r = s.grid().points_per_axis();
    let side = r * scale;
    let mut img = format!("P6\n{side} {side}\n255\n").into_bytes();
    let mut clamped = 0;
    let pixels: Vec<[u8; 3]> = (0..r * r)
        .map(|k| {
            // row k counts down from the top edge
            let (row, col) = (k / r, k % r);
            let v = s.values()[col * r + (r - 1 - row)];
            if v < vmin || v > vmax || !v.is_finite() {
                clamped += 1;
                FLAG_RGB
            } else if vmax > vmin {
                palette_rgb(palette, (v - vmin) / (vmax - vmin))
            } else {
                palette_rgb(palette, 0.5)
            }
        })
        .collect();
    for row in 0..side {
        for col in 0..side {
            img.extend_from_slice(&pixels[(row / scale) * r + col / scale]);
        }
    }
    (img, clamped)
}

/// Values as an `R`×`R` CSV; line `i` holds the nodes with first index `i`.
pub fn grid_csv(s: &FunctionSample) -> String {
    let r = s.grid().points_per_axis();
    let mut out = String::new();
    for row in s.values().chunks(r) {
        out.push_str(&row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)))
}

pub fn cmd_render(args: &RunArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(RENDER_KEYS, args)?;
    let ds = load_dataset(Path::new(cfg.require("dataset")?))?;
    let index: usize = cfg.parse("index")?;
    let pair = ds
        .samples()
        .get(index)
        .ok_or_else(|| CliError::Config(format!("index {index} out of range ({} samples)", ds.len())))?;
    let palette = match cfg.require("palette")? {
        "gray" => Palette::Gray,
        "color" => Palette::Color,
        p => return Err(CliError::Config(format!("unknown palette `{p}` (gray, color)"))),
    };
    let scale: usize = cfg.parse("scale")?;
    if scale == 0 {
        return Err(CliError::Config("scale must be at least 1".into()));
    }
    let prediction = match cfg.get("checkpoint") {
        Some(p) => Some(load_model(Path::new(p))?.forward(&pair.input, pair.grid())?),
        None => None,
    };
    let error = prediction
        .as_ref()
        .map(|p| {
            let v = p.values().iter().zip(pair.output.values()).map(|(a, b)| a - b).collect();
            FunctionSample::new(*pair.grid(), v)
        })
        .transpose()
        .map_err(|e| CliError::Numeric(e.to_string()))?;

    let out = &args.out;
    fs::create_dir_all(out)?;
    write_file(&out.join("config.txt"), cfg.snapshot())?;

    if ds.dim() == 1 {
        let mut csv = String::from("x,input,truth,prediction,error\n");
        for (k, x) in pair.grid().axis_coords().iter().enumerate() {
            let opt = |s: &Option<FunctionSample>| s.as_ref().map_or(String::new(), |s| format!("{:?}", s.values()[k]));
            let _ = writeln!(
                csv,
                "{x:?},{:?},{:?},{},{}",
                pair.input.values()[k],
                pair.output.values()[k],
                opt(&prediction),
                opt(&error)
            );
        }
        write_file(&out.join("line.csv"), csv)?;
        return Ok(());
    }

    let (tmin, tmax) = min_max(pair.output.values());
    let vmin = cfg.parse_opt("vmin")?.unwrap_or(tmin);
    let vmax = cfg.parse_opt("vmax")?.unwrap_or(tmax);
    let (imin, imax) = min_max(pair.input.values());
    let mut panels: Vec<(&str, &FunctionSample, f64, f64)> =
        vec![("input", &pair.input, imin, imax), ("truth", &pair.output, vmin, vmax)];
    if let (Some(p), Some(e)) = (&prediction, &error) {
        panels.push(("prediction", p, vmin, vmax));
        let emax = e.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        panels.push(("error", e, -emax, emax));
    }
    let mut summary = String::from("panel,vmin,vmax,clamped\n");
    for (name, s, lo, hi) in panels {
        let (img, clamped) = render_ppm(s, lo, hi, palette, scale);
        write_file(&out.join(format!("{name}.ppm")), img)?;
        write_file(&out.join(format!("{name}.csv")), grid_csv(s))?;
        let _ = writeln!(summary, "{name},{lo:?},{hi:?},{clamped}");
        if clamped > 0 {
            eprintln!("{name}: {clamped} values outside [{lo}, {hi}] marked in magenta");
        }
    }
    write_file(&out.join("render.csv"), summary)?;
    Ok(())
}

/// Header text of a dataset or checkpoint; the dataset sample table is
/// condensed to per-resolution counts.
pub fn inspect(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = String::new();
    if bytes.starts_with(b"opbasis-dataset") {
        let ds = load_dataset(path)?;
        for line in bytes.split(|b| *b == b'\n') {
            let line = String::from_utf8_lossy(line);
            if line == "samples" {
                break;
            }
            out.push_str(&line);
            out.push('\n');
        }
        for (r, c) in ds.counts_by_resolution() {
            let _ = writeln!(out, "samples_at {r} {c}");
        }
        let _ = writeln!(out, "file_sha256 {}", digest_hex(&bytes));
    } else if bytes.starts_with(b"opbasis-model") {
        let m = load_model(path)?;
        let _ = writeln!(out, "checkpoint problem={} dim={} p={} q={} seed={}", m.problem(), m.dim(), m.p(), m.q(), m.seed());
        let _ = writeln!(out, "encoder {}", join(&m.encoder().widths()));
        let _ = writeln!(out, "approximator {}", join(&m.approximator().widths()));
        let _ = writeln!(out, "reconstructor {}", join(&m.reconstructor().widths()));
        let _ = writeln!(out, "file_sha256 {}", digest_hex(&bytes));
    } else {
        return Err(CliError::Data(format!("{}: neither a dataset nor a checkpoint", path.display())));
    }
    Ok(out)
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(CliError::Config("--jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Inspect { path } => {
            print!("{}", inspect(&path)?);
            Ok(())
        }
        Command::Generate(a) => with_jobs(a.jobs, || cmd_generate(&a))?,
        Command::Train(a) => with_jobs(a.jobs, || cmd_train(&a))?,
        Command::Eval(a) => with_jobs(a.jobs, || cmd_eval(&a))?,
        Command::Gap(a) => with_jobs(a.jobs, || cmd_gap(&a))?,
        Command::Render(a) => with_jobs(a.jobs, || cmd_render(&a))?,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
