// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end for `varseg-core`.
//!
//! Subcommands: `simulate`, `detect`, `evaluate`, `select-lag` and `plot`.
//! Every subcommand accepts `--config FILE` with flat `key = value` lines
//! named after the long flags; flags given on the command line win.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.

#![forbid(unsafe_code)]

pub mod figures;
pub mod io;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use varseg_core::datagen::{simulate, GenerationSpec, GroupSpec, Method, SparsityPattern};
use varseg_core::eval::{bic_lag_select, run_replications, Detector, EvalOptions, SimulationSummary, Stats};
use varseg_core::lstsp::LstspConfig;
use varseg_core::tbss::TbssConfig;
use varseg_core::{Grouping, PenaltyKind, TimeSeries};

use crate::figures::{render_figures, FigureKind, FigureOptions, Layout};
use crate::io::{
    load_csv, load_result, save_csv, save_result, sha256_hex, write_atomic, write_json, RunManifest,
    TruthDocument, SCHEMA_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl From<varseg_core::Error> for CliError {
    fn from(e: varseg_core::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "varseg",
    version,
    about = "Change point detection for piecewise-stationary VAR models",
    args_override_self = true,
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a piecewise-stationary VAR series (CSV) and its truth (JSON).
    Simulate(SimulateArgs),
    /// Detect change points in a CSV series and write a result JSON.
    Detect(DetectArgs),
    /// Replicate simulate + detect and summarize the accuracy.
    Evaluate(EvaluateArgs),
    /// Choose the VAR lag by BIC over detected segments.
    SelectLag(SelectLagArgs),
    /// Draw SVG figures of a result.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    Sparse,
    Group,
    Fls,
    Ls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternArg {
    OffDiagonal,
    Diagonal,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgoArg {
    Tbss,
    Lstsp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKindArg {
    ColumnwiseSeparate,
    ColumnwiseSimultaneous,
    RowwiseSeparate,
    RowwiseSimultaneous,
    Hierarchical,
    Explicit,
}

/// Parses `"0,1;2,3"` into `[[0, 1], [2, 3]]`.
fn parse_index_lists(s: &str) -> Result<Vec<Vec<usize>>, String> {
    s.split(';')
        .filter(|g| !g.trim().is_empty())
        .map(|g| {
            g.split(',')
                .map(|v| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}")))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SpecArgs {
    /// Transition structure of the generated process.
    #[arg(long, value_enum, default_value = "sparse")]
    pub method: ModelArg,
    /// Number of time points T.
    #[arg(long)]
    pub t_len: usize,
    /// Number of series p.
    #[arg(long)]
    pub p: usize,
    /// Lag of every segment, or one lag per segment.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub lags: Vec<usize>,
    /// Change points (first time of each new segment).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub breaks: Vec<usize>,
    /// Signal magnitudes: one per segment or one per segment and lag.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub signals: Vec<f64>,
    #[arg(long, value_enum, default_value = "off-diagonal")]
    pub pattern: PatternArg,
    /// Entry probability of the random pattern.
    #[arg(long, default_value_t = 0.05)]
    pub density: f64,
    #[arg(long, value_delimiter = ',')]
    pub ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub singular_vals: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub info_ratio: Vec<f64>,
    /// Slices filled by the group generator, e.g. "0,1;5".
    #[arg(long)]
    pub group_index: Option<String>,
    /// Fill rows instead of columns in the group generator.
    #[arg(long)]
    pub group_rowwise: bool,
    #[arg(long, default_value_t = 0.9)]
    pub spectral_radius: f64,
    /// Discarded warm-up points.
    #[arg(long, default_value_t = 50)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Noise variances: one value for all series or one per series.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub sigma: Vec<f64>,
}

impl SpecArgs {
    pub fn to_spec(&self) -> Result<GenerationSpec, CliError> {
        let method = match self.method {
            ModelArg::Sparse => Method::Sparse,
            ModelArg::Group => Method::GroupSparse,
            ModelArg::Fls => Method::FixedLowRankSparse,
            ModelArg::Ls => Method::LowRankSparse,
        };
        let mut breaks = self.breaks.clone();
        breaks.push(self.t_len + 1);
        let mut spec = GenerationSpec::new(method, self.t_len, self.p, 1, breaks, self.signals.clone());
        spec.lags = self.lags.clone();
        spec.pattern = match self.pattern {
            PatternArg::OffDiagonal => SparsityPattern::OffDiagonal,
            PatternArg::Diagonal => SparsityPattern::Diagonal,
            PatternArg::Random => SparsityPattern::Random(self.density),
        };
        spec.ranks = nonempty(&self.ranks);
        spec.singular_vals = nonempty(&self.singular_vals);
        spec.info_ratio = nonempty(&self.info_ratio);
        if let Some(g) = &self.group_index {
            spec.group = Some(GroupSpec {
                columnwise: !self.group_rowwise,
                index: parse_index_lists(g).map_err(CliError::Usage)?,
            });
        }
        spec.spectral_radius = self.spectral_radius;
        spec.skip = self.burn_in;
        spec.seed = self.seed;
        spec.sigma = match self.sigma.len() {
            1 => vec![self.sigma[0]; self.p],
            _ => self.sigma.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DetectorArgs {
    #[arg(long, value_enum, default_value = "tbss")]
    pub algo: AlgoArg,
    /// Penalty family; `ls` implies the rolling-window detector.
    #[arg(long, value_enum, default_value = "sparse")]
    pub penalty: ModelArg,
    /// VAR lag q of the fitted model.
    #[arg(long, default_value_t = 1)]
    pub lag: usize,
    #[arg(long, value_enum, default_value = "columnwise-separate")]
    pub group_kind: GroupKindArg,
    /// Explicit groups of slice indices for `--group-kind explicit`.
    #[arg(long)]
    pub groups: Option<String>,
    /// Explicit groups are rows rather than columns.
    #[arg(long)]
    pub groups_rowwise: bool,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub lambda1_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambda2_grid: Vec<f64>,
    /// Nuclear-norm weight of the fixed low-rank model.
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub an_grid: Vec<usize>,
    /// Screening penalty per change point.
    #[arg(long)]
    pub omega: Option<f64>,
    /// Pick the TBSS screening penalty with a BIC two-cluster split.
    #[arg(long)]
    pub bic_omega: bool,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub refit: bool,
    #[arg(long)]
    pub refit_radius: Option<usize>,
    #[arg(long)]
    pub refit_rho: Option<f64>,
    /// Seed of the TBSS cross-validation split.
    #[arg(long, default_value_t = 1)]
    pub cv_seed: u64,
    /// Left and right sparse weights of the window fits.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub lambda1: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub mu1: Vec<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub mu2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub mu3: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub omega_scale: f64,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub step: Option<usize>,
    /// Points skipped at both window ends.
    #[arg(long, default_value_t = 5)]
    pub skip: usize,
    #[arg(long)]
    pub cv: bool,
    #[arg(long, default_value_t = 3)]
    pub nfold: usize,
}

fn nonempty<T: Clone>(v: &[T]) -> Option<Vec<T>> {
    (!v.is_empty()).then(|| v.to_vec())
}

fn pair(v: &[f64], name: &str) -> Result<Option<[f64; 2]>, CliError> {
    match v.len() {
        0 => Ok(None),
        1 => Ok(Some([v[0]; 2])),
        2 => Ok(Some([v[0], v[1]])),
        n => Err(CliError::Usage(format!("--{name} takes one or two values, got {n}"))),
    }
}

impl DetectorArgs {
    pub fn to_detector(&self, p: usize) -> Result<Detector, CliError> {
        let lstsp = self.algo == AlgoArg::Lstsp || self.penalty == ModelArg::Ls;
        if lstsp {
            if self.penalty != ModelArg::Ls && self.penalty != ModelArg::Sparse {
                return Err(CliError::Usage(
                    "the rolling-window detector fits the low-rank plus sparse model (--penalty ls)".into(),
                ));
            }
            if self.lag != 1 {
                return Err(CliError::Usage("the rolling-window detector is lag 1".into()));
            }
            let mut c = LstspConfig {
                lambda1: pair(&self.lambda1, "lambda1")?,
                mu1: pair(&self.mu1, "mu1")?,
                lambda2: self.lambda2,
                mu2: self.mu2,
                lambda3: self.lambda3,
                mu3: self.mu3,
                omega: self.omega,
                omega_scale: self.omega_scale,
                window: self.window,
                step: self.step,
                skip: self.skip,
                cv: self.cv,
                nfold: self.nfold,
                refit_radius: self.refit_radius,
                ..LstspConfig::default()
            };
            if let Some(t) = self.tol {
                c.tol = t;
            }
            if let Some(m) = self.max_iter {
                c.max_iter = m;
            }
            return Ok(Detector::Lstsp(c));
        }
        let kind = match self.penalty {
            ModelArg::Sparse => PenaltyKind::Sparse,
            ModelArg::Fls => PenaltyKind::FixedLowRankSparse,
            ModelArg::Group => PenaltyKind::GroupSparse(match self.group_kind {
                GroupKindArg::ColumnwiseSeparate => Grouping::ColumnwiseSeparate,
                GroupKindArg::ColumnwiseSimultaneous => Grouping::ColumnwiseSimultaneous,
                GroupKindArg::RowwiseSeparate => Grouping::RowwiseSeparate,
                GroupKindArg::RowwiseSimultaneous => Grouping::RowwiseSimultaneous,
                GroupKindArg::Hierarchical => Grouping::HierarchicalLag,
                GroupKindArg::Explicit => {
                    let g = self
                        .groups
                        .as_deref()
                        .ok_or_else(|| CliError::Usage("--group-kind explicit needs --groups".into()))?;
                    let slices = parse_index_lists(g).map_err(CliError::Usage)?;
                    Grouping::from_slices(&slices, p, self.lag, !self.groups_rowwise)?
                }
            }),
            ModelArg::Ls => unreachable!("handled above"),
        };
        let mut c = TbssConfig::new(kind, self.lag);
        c.block_size = self.block_size;
        c.lambda1_grid = nonempty(&self.lambda1_grid);
        c.lambda2_grid = nonempty(&self.lambda2_grid);
        c.mu = self.mu;
        c.an_grid = nonempty(&self.an_grid);
        c.omega = self.omega;
        c.use_bic_for_omega = self.bic_omega;
        c.refit = self.refit;
        c.refit_radius = self.refit_radius;
        c.refit_rho = self.refit_rho;
        c.seed = self.cv_seed;
        if let Some(t) = self.tol {
            c.tol = t;
        }
        if let Some(m) = self.max_iter {
            c.max_iter = m;
        }
        Ok(Detector::Tbss(c))
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Flat key = value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Output CSV of the series.
    #[arg(long)]
    pub out: PathBuf,
    /// Output JSON of the true model.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV, one row per time point.
    pub input: PathBuf,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Output result JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[arg(long, default_value_t = 5)]
    pub nreps: usize,
    /// Critical value L of the success window.
    #[arg(long, default_value_t = 5.0)]
    pub critical: f64,
    /// Magnitude above which an estimated entry counts as nonzero.
    #[arg(long, default_value_t = 0.1)]
    pub threshold: f64,
    /// Output summary JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectLagArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    pub input: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub max_lag: usize,
    #[command(flatten)]
    pub detector: DetectorArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlotArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Result JSON written by `detect`.
    #[arg(long)]
    pub result: PathBuf,
    /// Series CSV, needed for `--kind cp`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cp")]
    #[serde(skip)]
    pub kind: FigureKind,
    #[arg(long, default_value_t = 0.1)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value = "circle")]
    #[serde(skip)]
    pub layout: Layout,
    #[arg(long, default_value = "red")]
    pub cp_color: String,
    /// Seed of the force-directed layout.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output SVG; per-segment graphs get a `-segN` suffix.
    #[arg(long)]
    pub out: PathBuf,
}

/// Flattens any serializable argument struct into `key -> value` strings.
fn snapshot<T: Serialize>(args: &T) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(args) {
        for (k, v) in map {
            match v {
                serde_json::Value::Object(inner) => {
                    for (k2, v2) in inner {
                        out.insert(k2, render_value(&v2));
                    }
                }
                other => {
                    out.insert(k, render_value(&other));
                }
            }
        }
    }
    out
}

fn render_value(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Array(a) => a.iter().map(render_value).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Splices settings from `--config FILE` in front of the command-line flags
/// so that later (command-line) occurrences override them.
fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else if a == "--config" {
            path = strs.get(i + 1).cloned();
        }
    }
    let (Some(path), Some(sub)) = (path, strs.get(1)) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(Path::new(&path), e))?;
    let pairs = io::parse_config(&text).map_err(|e| CliError::Usage(format!("{path}: {e}")))?;
    let cmd = Cli::command();
    let subcmd = cmd
        .find_subcommand(sub)
        .ok_or_else(|| CliError::Usage(format!("unknown subcommand {sub:?}")))?;
    let mut injected: Vec<OsString> = Vec::new();
    for (k, v) in pairs {
        let arg = subcmd
            .get_arguments()
            .find(|a| a.get_long() == Some(k.as_str()))
            .ok_or_else(|| CliError::Usage(format!("{path}: unknown setting {k:?}")))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{k}").into());
            injected.push(v.into());
        } else {
            match v.as_str() {
                "true" => injected.push(format!("--{k}").into()),
                "false" => {}
                _ => return Err(CliError::Usage(format!("{path}: {k} expects true or false"))),
            }
        }
    }
    let mut out = argv[..2].to_vec();
    out.extend(injected);
    out.extend(argv[2..].iter().cloned());
    Ok(out)
}

/// Caps rayon's global pool at `VARSEG_THREADS` when set.
fn configure_threads() {
    if let Some(n) = std::env::var("VARSEG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Runs the tool on `argv` (including the program name) and returns the
/// exit code.
pub fn cli_main<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    2
                }
            };
        }
    };
    configure_threads();
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Detect(a) => cmd_detect(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::SelectLag(a) => cmd_select_lag(&a, out),
        Command::Plot(a) => cmd_plot(&a, out),
    }
}

fn say(out: &mut dyn Write, msg: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    writeln!(out, "{msg}").map_err(|e| CliError::Runtime(e.to_string()))
}

fn input_digest(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = a.spec.to_spec()?;
    let mut manifest = RunManifest::new("simulate", snapshot(a));
    manifest.seed = Some(spec.seed);
    let sim = simulate(&spec)?;
    save_csv(&sim.data, &a.out)?;
    manifest.finish();
    if let Some(path) = &a.truth {
        write_json(&TruthDocument::new(&sim.model, spec.t_len, spec.p, manifest.clone()), path)?;
    }
    say(out, format_args!("wrote {} ({} x {})", a.out.display(), spec.t_len, spec.p))?;
    say(out, format_args!("manifest digest: {}", manifest.digest()))
}

fn cmd_detect(a: &DetectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("detect", snapshot(a));
    manifest.input_digest = Some(input_digest(&a.input)?);
    let data = load_csv(&a.input)?;
    let detector = a.detector.to_detector(data.dim())?;
    if let Detector::Tbss(c) = &detector {
        manifest.seed = Some(c.seed);
    }
    let result = detector.detect(&data)?;
    manifest.finish();
    say(out, format_args!("change points: {:?}", result.change_points))?;
    if let Some(path) = &a.out {
        save_result(&result, manifest.clone(), path)?;
        say(out, format_args!("wrote {}", path.display()))?;
    }
    say(out, format_args!("manifest digest: {}", manifest.digest()))
}

/// JSON form of a [`SimulationSummary`]; non-finite numbers become `null`.
#[derive(Debug, Serialize)]
pub struct SummaryDocument {
    pub schema_version: u32,
    pub t_len: usize,
    pub truth: Vec<usize>,
    pub critical: f64,
    pub rows: Vec<SummaryRow>,
    pub hausdorff: StatsDoc,
    pub sen: StatsDoc,
    pub spc: StatsDoc,
    pub acc: StatsDoc,
    pub mcc: StatsDoc,
    pub failed: Vec<usize>,
    pub mean_runtime: f64,
    pub replicates: Vec<ReplicateDoc>,
    pub manifest: RunManifest,
}

#[derive(Debug, Serialize)]
pub struct SummaryRow {
    pub truth: f64,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub selection_rate: f64,
}

#[derive(Debug, Serialize)]
pub struct StatsDoc {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub median: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct ReplicateDoc {
    pub index: usize,
    pub seed: u64,
    pub change_points: Vec<usize>,
    pub hausdorff: Option<f64>,
    pub sen: Option<f64>,
    pub spc: Option<f64>,
    pub acc: Option<f64>,
    pub mcc: Option<f64>,
    pub elapsed_seconds: f64,
    pub error: Option<String>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn stats_doc(s: &Stats) -> StatsDoc {
    StatsDoc {
        mean: finite(s.mean),
        std: finite(s.std),
        median: finite(s.median),
    }
}

impl SummaryDocument {
    pub fn new(s: &SimulationSummary, manifest: RunManifest) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            t_len: s.t_len,
            truth: s.truth.clone(),
            critical: s.critical,
            rows: s
                .rows
                .iter()
                .map(|r| SummaryRow {
                    truth: r.truth,
                    mean: finite(r.mean),
                    std: finite(r.std),
                    selection_rate: r.selection_rate,
                })
                .collect(),
            hausdorff: stats_doc(&s.hausdorff),
            sen: stats_doc(&s.sen),
            spc: stats_doc(&s.spc),
            acc: stats_doc(&s.acc),
            mcc: stats_doc(&s.mcc),
            failed: s.failed.clone(),
            mean_runtime: s.mean_runtime,
            replicates: s
                .replicates
                .iter()
                .map(|r| ReplicateDoc {
                    index: r.index,
                    seed: r.seed,
                    change_points: r.change_points.clone(),
                    hausdorff: finite(r.hausdorff),
                    sen: r.support.map(|m| m.sen),
                    spc: r.support.map(|m| m.spc),
                    acc: r.support.map(|m| m.acc),
                    mcc: r.support.map(|m| m.mcc),
                    elapsed_seconds: r.elapsed_seconds,
                    error: r.error.clone(),
                })
                .collect(),
            manifest,
        }
    }
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.nreps == 0 {
        return Err(CliError::Usage("--nreps must be at least 1".into()));
    }
    let spec = a.spec.to_spec()?;
    let mut manifest = RunManifest::new("evaluate", snapshot(a));
    manifest.seed = Some(spec.seed);
    let detector = a.detector.to_detector(spec.p)?;
    let opts = EvalOptions {
        critical: a.critical,
        threshold: a.threshold,
    };
    let summary = run_replications(a.nreps, &spec, &detector, &opts)?;
    manifest.finish();
    write!(out, "{summary}").map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(path) = &a.out {
        write_json(&SummaryDocument::new(&summary, manifest.clone()), path)?;
        say(out, format_args!("wrote {}", path.display()))?;
    }
    say(out, format_args!("manifest digest: {}", manifest.digest()))
}

fn cmd_select_lag(a: &SelectLagArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("select-lag", snapshot(a));
    manifest.input_digest = Some(input_digest(&a.input)?);
    if !(1..=8).contains(&a.max_lag) {
        return Err(CliError::Usage("--max-lag must lie in [1, 8]".into()));
    }
    let data = load_csv(&a.input)?;
    let config = match a.detector.to_detector(data.dim())? {
        Detector::Tbss(c) => c,
        Detector::Lstsp(_) => {
            return Err(CliError::Usage("lag selection uses the block detector (--algo tbss)".into()))
        }
    };
    let sel = bic_lag_select(&data, a.max_lag, &config)?;
    manifest.finish();
    for (d, v) in sel.bic.iter().enumerate() {
        match v {
            Some(v) => say(out, format_args!("lag {}: BIC {v:.6}", d + 1))?,
            None => say(out, format_args!("lag {}: skipped", d + 1))?,
        }
    }
    say(out, format_args!("selected lag: {}", sel.lag))?;
    say(out, format_args!("manifest digest: {}", manifest.digest()))
}

fn segment_path(path: &Path, segment: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "svg".into());
    path.with_file_name(format!("{stem}-seg{}.{ext}", segment + 1))
}

fn cmd_plot(a: &PlotArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut config = snapshot(a);
    config.insert("kind".into(), format!("{:?}", a.kind).to_lowercase());
    config.insert("layout".into(), format!("{:?}", a.layout).to_lowercase());
    let mut manifest = RunManifest::new("plot", config);
    manifest.input_digest = Some(input_digest(&a.result)?);
    manifest.seed = Some(a.seed);
    let doc = load_result(&a.result)?;
    let result = doc.result().map_err(CliError::Runtime)?;
    let data: Option<TimeSeries> = a.data.as_deref().map(load_csv).transpose()?;
    let opts = FigureOptions {
        threshold: a.threshold,
        layout: a.layout,
        cp_color: a.cp_color.clone(),
        seed: a.seed,
    };
    let figs = render_figures(&result, data.as_ref(), a.kind, &opts).map_err(CliError::Usage)?;
    for f in &figs {
        let path = match f.segment {
            Some(j) => segment_path(&a.out, j),
            None => a.out.clone(),
        };
        write_atomic(&path, f.svg.as_bytes())?;
        say(out, format_args!("wrote {}", path.display()))?;
    }
    manifest.finish();
    say(out, format_args!("manifest digest: {}", manifest.digest()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn index_lists() {
        assert_eq!(parse_index_lists("0,1; 5").unwrap(), vec![vec![0, 1], vec![5]]);
        assert!(parse_index_lists("0,x").is_err());
    }

    #[test]
    fn segment_paths() {
        assert_eq!(segment_path(Path::new("/tmp/g.svg"), 0), PathBuf::from("/tmp/g-seg1.svg"));
    }

    #[test]
    fn ls_penalty_selects_rolling_windows() {
        let cli = Cli::try_parse_from(["varseg", "detect", "x.csv", "--penalty", "ls", "--lambda1", "2.5"]).unwrap();
        let Command::Detect(a) = cli.command else { panic!() };
        match a.detector.to_detector(4).unwrap() {
            Detector::Lstsp(c) => assert_eq!(c.lambda1, Some([2.5, 2.5])),
            other => panic!("{other:?}"),
        }
    }
}
