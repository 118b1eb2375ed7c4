//! Command-line front end and on-disk formats.
//!
//! A calibration writes a results bundle directory:
//!
//! - `design.csv`: one row per evaluation, parameters in native units;
//! - `trace.jsonl`: the run trace as line-delimited JSON events;
//! - `summary.csv`: the per-iteration report at the configured RMSE cutoff;
//! - `accepted.csv`: evaluations whose RMSE beats that cutoff;
//! - `config.toml`: the configuration that produced the bundle.
//!
//! Every table starts with a `# trajopt-<kind> v<version>` line. Floats are written
//! with 17 significant digits. Exit codes: 0 success, 2 invalid input, 3 numerical
//! or progress failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::dataspace::{rescale, Bounds, DEFAULT_LOG_EPSILON};
use crate::emulator::{GpConfig, NuggetMode};
use crate::error::Error;
use crate::expansion::{ExpansionConfig, ExpansionPolicy, ExpansionSampler};
use crate::kernel::KernelFamily;
use crate::simulator::{sir_run, Objective, SirConfig, SirObjective, ToyObjective, TRAJECTORY_FORMAT};
use crate::workflow::{running_min, EvaluationSource, GridKind, GridSpec, RunStatus, RunTrace, Workflow, WorkflowConfig};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const DESIGN_FORMAT: &str = "# trajopt-design v1";
pub const REPORT_FORMAT: &str = "# trajopt-report v1";
pub const ACCEPTED_FORMAT: &str = "# trajopt-accepted v1";
pub const OUTPUT_DIR_ENV: &str = "TRAJOPT_OUTPUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Invalid(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::Failure(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => CliError::Invalid(m),
            other => CliError::Failure(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Invalid(format!("{}: {e}", path.display()))
}

/// Full-precision float text (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Config file

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Toy,
    Sir,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    pub ndim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub initial_design: usize,
    /// SIR only: model settings; `beta` and `seed_id` are set per evaluation.
    #[serde(default)]
    pub sir: Option<SirConfig>,
    /// SIR only: observed trajectory file to calibrate against instead of the ground truth.
    #[serde(default)]
    pub observed: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmulatorKind {
    Baseline,
    SeedProduct,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulatorSection {
    pub kind: EmulatorKind,
    #[serde(default = "default_family")]
    pub family: KernelFamily,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub n_starts: Option<usize>,
    #[serde(default)]
    pub nugget: Option<f64>,
}

fn default_family() -> KernelFamily {
    KernelFamily::Matern52
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub kind: GridKind,
    #[serde(default = "default_ngrid")]
    pub ngrid: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_true")]
    pub reuse_previous: bool,
}

fn default_ngrid() -> usize {
    crate::grid::DEFAULT_NGRID
}

fn default_step() -> f64 {
    crate::grid::DEFAULT_PROPOSAL_STEP
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    None,
    BySims,
    ByProb,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionSection {
    pub policy: PolicyKind,
    pub nseeds: i64,
    #[serde(default)]
    pub nexpansion: i64,
    #[serde(default)]
    pub nsims_expand: Option<i64>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub sampler: ExpansionSampler,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSection {
    pub budget: usize,
    pub nts_samp: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub log_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
    #[serde(default = "default_cutoff")]
    pub rmse_cutoff: f64,
}

fn default_cutoff() -> f64 {
    20.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub format_version: u32,
    pub problem: ProblemSection,
    pub emulator: EmulatorSection,
    pub grid: GridSection,
    pub expansion: ExpansionSection,
    pub workflow: WorkflowSection,
    pub output: OutputSection,
}

/// A checked configuration, ready to run.
pub struct RunPlan {
    pub bounds: Bounds,
    pub initial_design: usize,
    pub workflow: WorkflowConfig,
    pub objective: Box<dyn Objective>,
    pub output_dir: PathBuf,
    pub rmse_cutoff: f64,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| invalid(format!("config: {}", e.message())))
    }

    /// Checks every constraint, naming the first one violated, and builds the run.
    /// `base_dir` resolves relative paths inside the file.
    pub fn plan(&self, base_dir: &Path) -> Result<RunPlan, CliError> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(invalid(format!(
                "format_version: expected {CONFIG_FORMAT_VERSION}, got {}",
                self.format_version
            )));
        }
        let p = &self.problem;
        if p.ndim == 0 {
            return Err(invalid("problem.ndim must be >= 1"));
        }
        if p.lower.len() != p.ndim || p.upper.len() != p.ndim {
            return Err(invalid("problem.lower and problem.upper must have problem.ndim entries"));
        }
        let bounds = Bounds::new(p.lower.clone(), p.upper.clone())
            .map_err(|e| invalid(format!("problem bounds: {}", CliError::from(e))))?;
        if p.initial_design < 2 {
            return Err(invalid("problem.initial_design must be >= 2"));
        }

        let e = &self.expansion;
        if e.nseeds < 1 {
            return Err(invalid("expansion.nseeds must be >= 1"));
        }
        if e.nexpansion < 0 {
            return Err(invalid("expansion.nexpansion must be >= 0"));
        }
        let policy = match e.policy {
            PolicyKind::None => ExpansionPolicy::Never,
            PolicyKind::BySims => {
                let n = e
                    .nsims_expand
                    .ok_or_else(|| invalid("expansion.nsims_expand is required for policy by-sims"))?;
                if n < 1 {
                    return Err(invalid("expansion.nsims_expand must be >= 1"));
                }
                ExpansionPolicy::BySims { nsims: n as usize }
            }
            PolicyKind::ByProb => {
                let prob = e.p.ok_or_else(|| invalid("expansion.p is required for policy by-prob"))?;
                if !(0.0..=1.0).contains(&prob) {
                    return Err(invalid("expansion.p must lie in [0, 1]"));
                }
                ExpansionPolicy::ByProb { p: prob }
            }
        };
        let expansion = ExpansionConfig::new(e.nseeds as usize, e.nexpansion as usize, policy)?.with_sampler(e.sampler);

        let g = &self.grid;
        if g.ngrid == 0 {
            return Err(invalid("grid.ngrid must be >= 1"));
        }
        if !(g.step > 0.0 && g.step.is_finite()) {
            return Err(invalid("grid.step must be positive"));
        }

        let em = &self.emulator;
        let mut gp = match em.kind {
            EmulatorKind::Baseline => GpConfig::baseline(),
            EmulatorKind::SeedProduct => GpConfig::seed_product(),
        };
        gp.family = em.family;
        if let Some(r) = em.rank {
            if r == 0 {
                return Err(invalid("emulator.rank must be >= 1"));
            }
            gp.rank = Some(r);
        }
        if let Some(n) = em.n_starts {
            if n == 0 {
                return Err(invalid("emulator.n_starts must be >= 1"));
            }
            gp.n_starts = n;
        }
        if let Some(g) = em.nugget {
            if !(g > 0.0 && g.is_finite()) {
                return Err(invalid("emulator.nugget must be positive"));
            }
            gp.nugget = NuggetMode::Fixed(g);
        }

        let w = &self.workflow;
        if w.nts_samp == 0 {
            return Err(invalid("workflow.nts_samp must be >= 1"));
        }
        if w.budget < p.initial_design {
            return Err(invalid(format!(
                "workflow.budget ({}) must be >= problem.initial_design ({})",
                w.budget, p.initial_design
            )));
        }
        let log_epsilon = w.log_epsilon.unwrap_or(DEFAULT_LOG_EPSILON);
        if !(log_epsilon > 0.0) {
            return Err(invalid("workflow.log_epsilon must be positive"));
        }
        if !(self.output.rmse_cutoff >= 0.0) {
            return Err(invalid("output.rmse_cutoff must be >= 0"));
        }

        let objective: Box<dyn Objective> = match p.kind {
            ProblemKind::Toy => {
                if p.sir.is_some() || p.observed.is_some() {
                    return Err(invalid("problem.sir and problem.observed apply only to kind = \"sir\""));
                }
                Box::new(ToyObjective::new(p.ndim))
            }
            ProblemKind::Sir => {
                if p.ndim != 1 {
                    return Err(invalid("problem.ndim must be 1 for kind = \"sir\" (beta)"));
                }
                if p.lower[0] < 0.0 || p.upper[0] > 1.0 {
                    return Err(invalid("problem bounds for beta must lie in [0, 1]"));
                }
                let base = p.sir.clone().unwrap_or_default();
                let top = SirConfig {
                    seed_id: e.nseeds as u32,
                    ..base.clone()
                };
                top.validate()
                    .map_err(|err| invalid(format!("expansion.nseeds: {}", CliError::from(err))))?;
                let obj = match &p.observed {
                    Some(path) => {
                        let path = base_dir.join(path);
                        let text = fs::read_to_string(&path).map_err(|err| io_err(&path, err))?;
                        let observed = parse_trajectory_csv(&text)
                            .map_err(|m| invalid(format!("{}: {m}", path.display())))?;
                        SirObjective::new(base, bounds.clone(), observed)?
                    }
                    None => SirObjective::against_ground_truth(base, bounds.clone())?,
                };
                Box::new(obj)
            }
        };

        let workflow = WorkflowConfig {
            budget: w.budget,
            nts_samp: w.nts_samp,
            master_seed: w.master_seed,
            emulator: gp,
            grid: GridSpec {
                kind: g.kind,
                ngrid: g.ngrid,
                step: g.step,
                reuse_previous: g.reuse_previous,
            },
            expansion,
            log_epsilon,
        };
        workflow.validate()?;

        let output_dir = match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => base_dir.join(&self.output.directory),
        };
        Ok(RunPlan {
            bounds,
            initial_design: p.initial_design,
            workflow,
            objective,
            output_dir,
            rmse_cutoff: self.output.rmse_cutoff,
        })
    }
}

/// Infected counts from a trajectory table.
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<f64>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(TRAJECTORY_FORMAT) {
        return Err(format!("expected header line `{TRAJECTORY_FORMAT}`"));
    }
    if lines.next().map(str::trim) != Some("step,infected,cumulative") {
        return Err("expected column line `step,infected,cumulative`".into());
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(format!("row {}: expected 3 columns", n + 1));
        }
        let v: f64 = cols[1].trim().parse().map_err(|_| format!("row {}: bad infected count", n + 1))?;
        out.push(v);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bundle tables

/// Design table text for `trace`, parameters mapped to native units.
pub fn design_table(trace: &RunTrace, bounds: &Bounds) -> Result<String, CliError> {
    let d = bounds.dim();
    let mut s = String::new();
    writeln!(s, "{DESIGN_FORMAT}").unwrap();
    let xs: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    writeln!(s, "index,iteration,source,{},seed,y_raw,y_std,rmse,status", xs.join(",")).unwrap();
    for e in &trace.evaluations {
        let native = rescale(&e.point.x, bounds)?;
        let source = match e.source {
            EvaluationSource::Initial => "initial",
            EvaluationSource::Thompson => "thompson",
            EvaluationSource::Expansion => "expansion",
        };
        let xcols: Vec<String> = native.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            e.index,
            e.iteration,
            source,
            xcols.join(","),
            e.point.seed,
            fmt_opt(e.y_raw),
            fmt_opt(e.y_std),
            fmt_opt(e.rmse),
            if e.succeeded() { "ok" } else { "failed" }
        )
        .unwrap();
    }
    Ok(s)
}

/// One row of the design table as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub index: usize,
    pub iteration: u32,
    pub source: String,
    pub x: Vec<f64>,
    pub seed: u32,
    pub y_raw: Option<f64>,
    pub y_std: Option<f64>,
    pub rmse: Option<f64>,
    pub ok: bool,
}

pub fn parse_design_table(text: &str) -> Result<Vec<DesignRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(DESIGN_FORMAT) {
        return Err(format!("expected header line `{DESIGN_FORMAT}`"));
    }
    let cols: Vec<&str> = lines.next().ok_or("missing column line")?.split(',').collect();
    if cols.len() < 9 || cols[..3] != ["index", "iteration", "source"] {
        return Err("unexpected design columns".into());
    }
    let d = cols.len() - 8;
    let opt = |s: &str, what: &str, n: usize| -> Result<Option<f64>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| format!("row {n}: bad {what}"))
        }
    };
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(format!("row {}: expected {} columns", n + 1, cols.len()));
        }
        let x = f[3..3 + d]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| format!("row {}: bad coordinate", n + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(DesignRow {
            index: f[0].parse().map_err(|_| format!("row {}: bad index", n + 1))?,
            iteration: f[1].parse().map_err(|_| format!("row {}: bad iteration", n + 1))?,
            source: f[2].to_string(),
            x,
            seed: f[3 + d].parse().map_err(|_| format!("row {}: bad seed", n + 1))?,
            y_raw: opt(f[4 + d], "y_raw", n + 1)?,
            y_std: opt(f[5 + d], "y_std", n + 1)?,
            rmse: opt(f[6 + d], "rmse", n + 1)?,
            ok: match f[7 + d] {
                "ok" => true,
                "failed" => false,
                _ => return Err(format!("row {}: bad status", n + 1)),
            },
        });
    }
    Ok(rows)
}

/// Exact matches always count; otherwise the RMSE must be strictly below the cutoff.
pub fn accepted(rmse: f64, cutoff: f64) -> bool {
    rmse < cutoff || rmse == 0.0
}

/// Per-iteration report at `cutoff`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub iteration: u32,
    pub evaluated: usize,
    pub evaluations_total: usize,
    pub accepted: usize,
    /// Share of this iteration's evaluations accepted.
    pub proportion: f64,
    /// Share of all acquired (post-initial) evaluations so far accepted.
    pub cumulative_proportion: Option<f64>,
    pub best_observed: f64,
    pub nseeds: usize,
    pub expansion_seed: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub cutoff: f64,
    pub rows: Vec<ReportRow>,
    /// Indices of accepted evaluations.
    pub accepted: Vec<usize>,
}

impl Report {
    /// Share of acquired (post-initial) evaluations accepted, if any were acquired.
    pub fn acquired_proportion(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.cumulative_proportion)
    }
}

/// Builds the report from the design rows and the trace.
pub fn build_report(rows: &[DesignRow], trace: &RunTrace, cutoff: f64) -> Result<Report, String> {
    if rows.len() != trace.evaluations.len() {
        return Err(format!(
            "design table has {} rows but the trace has {} evaluations",
            rows.len(),
            trace.evaluations.len()
        ));
    }
    let ys: Vec<f64> = rows.iter().filter_map(|r| r.y_std).collect();
    let best = running_min(&ys);
    let mut nseeds = trace.header.initial_nseeds;
    let mut out = Vec::new();
    let mut acc_ids = Vec::new();
    let (mut acq_n, mut acq_ok, mut seen_ok, mut total) = (0usize, 0usize, 0usize, 0usize);
    let max_iter = rows.iter().map(|r| r.iteration).max().unwrap_or(0);
    for it in 0..=max_iter {
        let these: Vec<&DesignRow> = rows.iter().filter(|r| r.iteration == it).collect();
        let rec = trace.iterations.iter().find(|r| r.iteration == it);
        if it > 0 && rec.is_none() {
            return Err(format!("trace has no record for iteration {it}"));
        }
        let mut acc = 0;
        for r in &these {
            if r.ok && r.rmse.is_some_and(|e| accepted(e, cutoff)) {
                acc += 1;
                acc_ids.push(r.index);
            }
            if r.y_std.is_some() {
                seen_ok += 1;
            }
        }
        total += these.len();
        if it > 0 {
            acq_n += these.len();
            acq_ok += acc;
        }
        let mut expansion_seed = None;
        if let Some(rec) = rec {
            nseeds = rec.nseeds;
            expansion_seed = rec.expansion.map(|e| e.seed);
        }
        out.push(ReportRow {
            iteration: it,
            evaluated: these.len(),
            evaluations_total: total,
            accepted: acc,
            proportion: if these.is_empty() { 0.0 } else { acc as f64 / these.len() as f64 },
            cumulative_proportion: (acq_n > 0).then(|| acq_ok as f64 / acq_n as f64),
            best_observed: if seen_ok == 0 { f64::NAN } else { best[seen_ok - 1] },
            nseeds,
            expansion_seed,
        });
    }
    Ok(Report {
        cutoff,
        rows: out,
        accepted: acc_ids,
    })
}

pub fn report_table(report: &Report) -> String {
    let mut s = String::new();
    writeln!(s, "{REPORT_FORMAT}").unwrap();
    writeln!(s, "# cutoff={}", fmt_f64(report.cutoff)).unwrap();
    writeln!(
        s,
        "iteration,evaluated,evaluations_total,accepted,proportion,cumulative_proportion,best_observed,nseeds,expansion_seed"
    )
    .unwrap();
    for r in &report.rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.evaluated,
            r.evaluations_total,
            r.accepted,
            fmt_f64(r.proportion),
            fmt_opt(r.cumulative_proportion),
            fmt_f64(r.best_observed),
            r.nseeds,
            r.expansion_seed.map(|v| v.to_string()).unwrap_or_default()
        )
        .unwrap();
    }
    s
}

pub fn accepted_table(report: &Report, rows: &[DesignRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{ACCEPTED_FORMAT}").unwrap();
    writeln!(s, "# cutoff={}", fmt_f64(report.cutoff)).unwrap();
    writeln!(s, "index,iteration,seed,rmse").unwrap();
    for &i in &report.accepted {
        let r = &rows[i];
        writeln!(s, "{},{},{},{}", r.index, r.iteration, r.seed, fmt_opt(r.rmse)).unwrap();
    }
    s
}

fn write_bundle(dir: &Path, files: &[(&str, String)]) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::Failure(format!("{}: {e}", dir.display()));
    let name = dir
        .file_name()
        .ok_or_else(|| invalid(format!("output directory {} has no name", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(fail)?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(fail)?;
    }
    fs::create_dir(&tmp).map_err(fail)?;
    for (file, content) in files {
        fs::write(tmp.join(file), content).map_err(fail)?;
    }
    if dir.exists() {
        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        fs::rename(dir, &old).map_err(fail)?;
        fs::rename(&tmp, dir).map_err(fail)?;
        fs::remove_dir_all(&old).map_err(fail)?;
    } else {
        fs::rename(&tmp, dir).map_err(fail)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Debug, Parser)]
#[command(name = "trajopt", version, about = "Trajectory-oriented calibration of stochastic simulators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the reference SIR model once and write its trajectory table.
    Simulate(SimulateArgs),
    /// Run a calibration from a TOML config and write a results bundle.
    Calibrate(CalibrateArgs),
    /// Summarize a results bundle at an RMSE cutoff.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u32,
    #[arg(long, default_value_t = 0)]
    pub stream: u64,
    #[arg(long)]
    pub n_agents: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub infectious_period: Option<usize>,
    #[arg(long)]
    pub contact_radius: Option<f64>,
    #[arg(long)]
    pub grid_extent: Option<f64>,
    /// Output file; standard output if omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    pub config: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    pub bundle: PathBuf,
    #[arg(long, default_value_t = 20.0)]
    pub cutoff: f64,
    /// Directory for report.csv and accepted.csv; defaults to the bundle.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<String, CliError> {
    let d = SirConfig::default();
    let cfg = SirConfig {
        n_agents: args.n_agents.unwrap_or(d.n_agents),
        grid_extent: args.grid_extent.unwrap_or(d.grid_extent),
        beta: args.beta,
        seed_id: args.seed,
        crn_stream_id: args.stream,
        horizon: args.horizon.unwrap_or(d.horizon),
        infectious_period: args.infectious_period.unwrap_or(d.infectious_period),
        contact_radius: args.contact_radius.unwrap_or(d.contact_radius),
    };
    let traj = sir_run(&cfg)?;
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).map_err(|e| CliError::Failure(e.to_string()))?;
    let text = String::from_utf8(buf).expect("trajectory table is ASCII");
    if let Some(path) = &args.out {
        fs::write(path, &text).map_err(|e| io_err(path, e))?;
    }
    Ok(text)
}

/// Outcome of a calibration that produced a bundle.
#[derive(Debug, Clone)]
pub struct CalibrateOutcome {
    pub bundle: PathBuf,
    pub trace: RunTrace,
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<CalibrateOutcome, CliError> {
    let text = fs::read_to_string(&args.config).map_err(|e| io_err(&args.config, e))?;
    let file = RunConfigFile::parse(&text)?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let plan = file.plan(&base)?;

    let mut wf = Workflow::new(plan.workflow.clone(), plan.objective.as_ref())?;
    let data = wf
        .initial_design(plan.initial_design)
        .map_err(|e| CliError::Failure(format!("initial design: {e}")))?;
    let trace = wf.run(data)?;

    let design = design_table(&trace, &plan.bounds)?;
    let rows = parse_design_table(&design).map_err(CliError::Failure)?;
    let report = build_report(&rows, &trace, plan.rmse_cutoff).map_err(CliError::Failure)?;
    let jsonl = trace.to_jsonl()?;
    write_bundle(
        &plan.output_dir,
        &[
            ("design.csv", design),
            ("trace.jsonl", jsonl),
            ("summary.csv", report_table(&report)),
            ("accepted.csv", accepted_table(&report, &rows)),
            ("config.toml", text),
        ],
    )?;
    match &trace.finish.status {
        RunStatus::Completed => Ok(CalibrateOutcome {
            bundle: plan.output_dir,
            trace,
        }),
        RunStatus::NumericalFailure { message } | RunStatus::ProgressFailure { message } => Err(CliError::Failure(
            format!("{message} (partial bundle written to {})", plan.output_dir.display()),
        )),
    }
}

pub fn load_bundle(dir: &Path) -> Result<(Vec<DesignRow>, RunTrace), CliError> {
    let design_path = dir.join("design.csv");
    let trace_path = dir.join("trace.jsonl");
    let design = fs::read_to_string(&design_path).map_err(|e| io_err(&design_path, e))?;
    let trace_text = fs::read_to_string(&trace_path).map_err(|e| io_err(&trace_path, e))?;
    let rows = parse_design_table(&design).map_err(|m| invalid(format!("{}: {m}", design_path.display())))?;
    let trace = RunTrace::from_jsonl(&trace_text)
        .map_err(|e| invalid(format!("{}: {}", trace_path.display(), CliError::from(e))))?;
    Ok((rows, trace))
}

pub fn cmd_report(args: &ReportArgs) -> Result<Report, CliError> {
    if !(args.cutoff >= 0.0) {
        return Err(invalid("cutoff must be >= 0"));
    }
    let (rows, trace) = load_bundle(&args.bundle)?;
    let report = build_report(&rows, &trace, args.cutoff).map_err(|m| invalid(format!("corrupt bundle: {m}")))?;
    let out = args.out.clone().unwrap_or_else(|| args.bundle.clone());
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let report_path = out.join("report.csv");
    fs::write(&report_path, report_table(&report)).map_err(|e| io_err(&report_path, e))?;
    let acc_path = out.join("accepted.csv");
    fs::write(&acc_path, accepted_table(&report, &rows)).map_err(|e| io_err(&acc_path, e))?;
    Ok(report)
}

/// Parses `args` and runs the chosen command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a).map(|text| {
            if a.out.is_none() {
                print!("{text}");
            }
        }),
        Command::Calibrate(a) => cmd_calibrate(a).map(|o| {
            println!(
                "wrote {} ({} evaluations, {} iterations)",
                o.bundle.display(),
                o.trace.total_evaluations(),
                o.trace.iterations.len()
            );
        }),
        Command::Report(a) => cmd_report(a).map(|r| {
            if let Some(last) = r.rows.last() {
                println!(
                    "cutoff {}: {} accepted, acquired proportion {}, best observed {}",
                    r.cutoff,
                    r.accepted.len(),
                    r.acquired_proportion().map_or("n/a".into(), |p| p.to_string()),
                    last.best_observed
                );
            }
        }),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("trajopt: {e}");
            e.exit_code()
        }
    }
}
