//! The calibration loop.
//!
//! Each iteration refits the emulator on all data, refreshes the candidate grid,
//! picks a batch by Thompson sampling, possibly grows the seed space, evaluates the
//! batch and appends the results, until the evaluation budget is spent.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataspace::{Dataset, DesignPoint, ObjectiveTransform, DEFAULT_LOG_EPSILON};
use crate::emulator::{Emulator, GaussianProcess, GpConfig};
use crate::error::{Error, Result};
use crate::expansion::{
    check_for_expansion, expand, sample_from_expansion, sample_from_incumbents, ExpansionConfig, ExpansionEvent,
    ExpansionPolicy, ExpansionSampler, ExpansionState,
};
use crate::grid::{
    lhs_with_cycled_seeds, AdaptiveGrid, CandidateGrid, FixedGrid, GridConfig, GridContext, GridStrategy, LhsGrid,
    DEFAULT_NGRID, DEFAULT_PROPOSAL_STEP,
};
use crate::rng::{component_rng, stream_selector, Component};
use crate::simulator::Objective;

pub const TRACE_FORMAT_VERSION: u32 = 1;

/// Draws `nts_samp` joint posterior samples over `grid` and returns the distinct
/// argmins in order of first occurrence. Ties go to the lowest grid index.
pub fn thompson_select(
    emulator: &dyn Emulator,
    grid: &CandidateGrid,
    nts_samp: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<DesignPoint>> {
    if grid.is_empty() {
        return Err(Error::invalid("Thompson sampling needs a nonempty grid"));
    }
    if nts_samp == 0 {
        return Err(Error::invalid("nTS_samp must be >= 1"));
    }
    if !emulator.is_fitted() {
        return Err(Error::State("Thompson sampling needs a fitted emulator".into()));
    }
    let draws = emulator.sample(&grid.points, nts_samp, rng)?;
    let mut picked: Vec<usize> = Vec::new();
    for s in 0..draws.nrows() {
        let row = draws.row(s);
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] < row[best] {
                best = j;
            }
        }
        if !picked.contains(&best) {
            picked.push(best);
        }
    }
    Ok(picked.into_iter().map(|i| grid.points[i].clone()).collect())
}

/// Running minimum.
pub fn running_min(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut m = f64::INFINITY;
    for v in values {
        m = m.min(*v);
        out.push(m);
    }
    out
}

/// Running minimum of the transformed objective over successful evaluations,
/// in evaluation order.
pub fn best_observed(trace: &RunTrace) -> Vec<f64> {
    let ys: Vec<f64> = trace.evaluations.iter().filter_map(|e| e.y_std).collect();
    running_min(&ys)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    Fixed,
    Lhs,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub kind: GridKind,
    pub ngrid: usize,
    pub step: f64,
    /// Adaptive only: filter the previous adapted grid rather than a fresh LHS.
    pub reuse_previous: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            kind: GridKind::Adaptive,
            ngrid: DEFAULT_NGRID,
            step: DEFAULT_PROPOSAL_STEP,
            reuse_previous: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkflowConfig {
    pub budget: usize,
    pub nts_samp: usize,
    pub master_seed: u64,
    pub emulator: GpConfig,
    pub grid: GridSpec,
    pub expansion: ExpansionConfig,
    pub log_epsilon: f64,
}

impl WorkflowConfig {
    pub fn new(budget: usize, nts_samp: usize, master_seed: u64, nseeds: usize) -> Result<Self> {
        Ok(WorkflowConfig {
            budget,
            nts_samp,
            master_seed,
            emulator: GpConfig::seed_product(),
            grid: GridSpec::default(),
            expansion: ExpansionConfig::new(nseeds, 0, ExpansionPolicy::Never)?,
            log_epsilon: DEFAULT_LOG_EPSILON,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.nts_samp == 0 {
            return Err(Error::invalid("nTS_samp must be >= 1"));
        }
        if self.grid.ngrid == 0 {
            return Err(Error::invalid("ngrid must be >= 1"));
        }
        if !(self.grid.step > 0.0 && self.grid.step.is_finite()) {
            return Err(Error::invalid("proposal step must be positive"));
        }
        if !(self.log_epsilon > 0.0) {
            return Err(Error::invalid("log epsilon must be positive"));
        }
        if self.expansion.nseeds == 0 {
            return Err(Error::invalid("nseeds must be >= 1"));
        }
        self.expansion.policy.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationSource {
    Initial,
    Thompson,
    Expansion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    /// Position in evaluation order, starting at 0.
    pub index: usize,
    pub iteration: u32,
    pub source: EvaluationSource,
    pub point: DesignPoint,
    pub y_raw: Option<f64>,
    /// Under the final transform.
    pub y_std: Option<f64>,
    pub rmse: Option<f64>,
    pub error: Option<String>,
}

impl EvaluationRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    /// Seed-space size after any expansion this iteration.
    pub nseeds: usize,
    pub transform: ObjectiveTransform,
    pub log_marginal_likelihood: Option<f64>,
    pub grid_size: usize,
    pub grid_digest: String,
    pub thompson_batch: Vec<DesignPoint>,
    /// Completed evaluations since the last expansion, as seen by the check.
    pub counter_at_check: usize,
    pub expansion: Option<ExpansionEvent>,
    pub expansion_points: Vec<DesignPoint>,
    /// Points dropped to respect the budget.
    pub truncated: usize,
    pub evaluated: usize,
    pub failed: usize,
    pub evaluations_total: usize,
    /// Best raw objective so far.
    pub best_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub component: Component,
    pub component_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub master_seed: u64,
    /// How component streams are derived from the master seed.
    pub stream_rule: String,
    pub streams: Vec<StreamRecord>,
    pub budget: usize,
    pub nts_samp: usize,
    pub emulator: String,
    pub grid: String,
    pub initial_nseeds: usize,
    pub initial_design: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    NumericalFailure { message: String },
    ProgressFailure { message: String },
}

impl RunStatus {
    fn from_error(e: &Error) -> Self {
        match e {
            Error::Progress(m) => RunStatus::ProgressFailure { message: m.clone() },
            other => RunStatus::NumericalFailure {
                message: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFinish {
    pub status: RunStatus,
    pub evaluations: usize,
    pub final_nseeds: usize,
    pub expansions: Vec<ExpansionEvent>,
    pub transform: ObjectiveTransform,
    pub best_observed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Header(TraceHeader),
    Evaluation(EvaluationRecord),
    Iteration(IterationRecord),
    Finish(TraceFinish),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub evaluations: Vec<EvaluationRecord>,
    pub iterations: Vec<IterationRecord>,
    pub finish: TraceFinish,
}

impl RunTrace {
    pub fn total_evaluations(&self) -> usize {
        self.evaluations.len()
    }

    pub fn is_complete(&self) -> bool {
        self.finish.status == RunStatus::Completed
    }

    /// Line-delimited JSON: header, initial evaluations, then each iteration
    /// followed by its evaluations, then the finish record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut push = |ev: &TraceEvent| -> Result<()> {
            out.push_str(&serde_json::to_string(ev).map_err(|e| Error::State(e.to_string()))?);
            out.push('\n');
            Ok(())
        };
        push(&TraceEvent::Header(self.header.clone()))?;
        for e in self.evaluations.iter().filter(|e| e.iteration == 0) {
            push(&TraceEvent::Evaluation(e.clone()))?;
        }
        for it in &self.iterations {
            push(&TraceEvent::Iteration(it.clone()))?;
            for e in self.evaluations.iter().filter(|e| e.iteration == it.iteration) {
                push(&TraceEvent::Evaluation(e.clone()))?;
            }
        }
        push(&TraceEvent::Finish(self.finish.clone()))?;
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut evaluations = Vec::new();
        let mut iterations = Vec::new();
        let mut finish = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let ev: TraceEvent = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("trace line {}: {e}", n + 1)))?;
            match ev {
                TraceEvent::Header(h) => {
                    if h.format_version != TRACE_FORMAT_VERSION {
                        return Err(Error::invalid(format!(
                            "unsupported trace format version {}",
                            h.format_version
                        )));
                    }
                    header = Some(h)
                }
                TraceEvent::Evaluation(e) => evaluations.push(e),
                TraceEvent::Iteration(i) => iterations.push(i),
                TraceEvent::Finish(f) => finish = Some(f),
            }
        }
        evaluations.sort_by_key(|e| e.index);
        Ok(RunTrace {
            header: header.ok_or_else(|| Error::invalid("trace has no header"))?,
            evaluations,
            iterations,
            finish: finish.ok_or_else(|| Error::invalid("trace has no finish record"))?,
        })
    }
}

fn build_grid(config: &WorkflowConfig, d: usize) -> Result<Box<dyn GridStrategy>> {
    let gc = GridConfig::new(d, config.expansion.nseeds, config.grid.ngrid)?;
    Ok(match config.grid.kind {
        GridKind::Fixed => {
            let mut rng = component_rng(config.master_seed, Component::Grid, 0);
            Box::new(FixedGrid::from_lhs(gc, &mut rng)?)
        }
        GridKind::Lhs => Box::new(LhsGrid::new(gc)),
        GridKind::Adaptive => Box::new(
            AdaptiveGrid::new(gc)
                .with_step(config.grid.step)?
                .with_reuse_previous(config.grid.reuse_previous),
        ),
    })
}

pub struct Workflow<'a> {
    config: WorkflowConfig,
    objective: &'a dyn Objective,
    emulator: Box<dyn Emulator>,
    grid: Box<dyn GridStrategy>,
}

impl<'a> Workflow<'a> {
    pub fn new(config: WorkflowConfig, objective: &'a dyn Objective) -> Result<Self> {
        config.validate()?;
        let grid = build_grid(&config, objective.dim())?;
        let emulator = Box::new(GaussianProcess::new(config.emulator.clone()));
        Ok(Workflow {
            config,
            objective,
            emulator,
            grid,
        })
    }

    pub fn with_emulator(mut self, emulator: Box<dyn Emulator>) -> Self {
        self.emulator = emulator;
        self
    }

    pub fn with_grid(mut self, grid: Box<dyn GridStrategy>) -> Self {
        self.grid = grid;
        self
    }

    pub fn config(&self) -> &WorkflowConfig {
        &self.config
    }

    pub fn emulator(&self) -> &dyn Emulator {
        self.emulator.as_ref()
    }

    /// An `n`-point LHS with cycled seeds, evaluated. Fails if any evaluation fails.
    pub fn initial_design(&self, n: usize) -> Result<Dataset> {
        let mut rng = component_rng(self.config.master_seed, Component::InitialDesign, 0);
        let points = lhs_with_cycled_seeds(n, self.objective.dim(), self.config.expansion.nseeds, &mut rng)?;
        let evals = self.evaluate(&points);
        let mut y = Vec::with_capacity(n);
        for e in evals {
            y.push(e?.y_raw);
        }
        let mut ds = Dataset::new();
        ds.append(points, y, 0)?;
        Ok(ds)
    }

    fn evaluate(&self, points: &[DesignPoint]) -> Vec<Result<crate::simulator::Evaluation>> {
        let obj = self.objective;
        points.par_iter().map(|p| obj.evaluate(p)).collect()
    }

    /// Runs to budget from `initial`. Invalid inputs are errors; failures during the
    /// loop end the run early and are reported in the trace's finish record.
    pub fn run(&mut self, mut data: Dataset) -> Result<RunTrace> {
        let cfg = self.config.clone();
        if data.is_empty() {
            return Err(Error::invalid("initial dataset is empty"));
        }
        if cfg.budget < data.len() {
            return Err(Error::invalid(format!(
                "budget {} is smaller than the initial design ({})",
                cfg.budget,
                data.len()
            )));
        }
        if data.dim() != Some(self.objective.dim()) {
            return Err(Error::invalid("initial design dimension does not match the objective"));
        }
        for p in data.points() {
            p.validate(cfg.expansion.nseeds)?;
        }

        let header = TraceHeader {
            format_version: TRACE_FORMAT_VERSION,
            master_seed: cfg.master_seed,
            stream_rule: "ChaCha20 keyed by master_seed; stream = component_id << 32 | iteration".into(),
            streams: Component::ALL
                .iter()
                .map(|c| StreamRecord {
                    component: *c,
                    component_id: stream_selector(*c, 0) >> 32,
                })
                .collect(),
            budget: cfg.budget,
            nts_samp: cfg.nts_samp,
            emulator: self.emulator.name().to_string(),
            grid: self.grid.name().to_string(),
            initial_nseeds: cfg.expansion.nseeds,
            initial_design: data.len(),
        };

        let mut evaluations: Vec<EvaluationRecord> = data
            .points()
            .iter()
            .zip(data.y_raw())
            .enumerate()
            .map(|(i, (p, y))| EvaluationRecord {
                index: i,
                iteration: 0,
                source: EvaluationSource::Initial,
                point: p.clone(),
                y_raw: Some(*y),
                y_std: None,
                rmse: None,
                error: None,
            })
            .collect();
        let mut iterations = Vec::new();
        let mut expansion = ExpansionState::new(cfg.expansion.nseeds)?;
        expansion.record_evaluations(data.len());
        let mut status = RunStatus::Completed;
        let mut t: u32 = 0;

        while evaluations.len() < cfg.budget {
            t += 1;
            match self.iterate(t, &cfg, &mut data, &mut expansion, &mut evaluations) {
                Ok(rec) => iterations.push(rec),
                Err(e) => {
                    status = RunStatus::from_error(&e);
                    break;
                }
            }
        }

        let transform = data.restandardize(cfg.log_epsilon)?;
        for e in &mut evaluations {
            e.y_std = e.y_raw.map(|y| transform.apply(y));
        }
        let ys: Vec<f64> = evaluations.iter().filter_map(|e| e.y_std).collect();
        let finish = TraceFinish {
            status,
            evaluations: evaluations.len(),
            final_nseeds: expansion.current_k(),
            expansions: expansion.events().to_vec(),
            transform,
            best_observed: running_min(&ys),
        };
        Ok(RunTrace {
            header,
            evaluations,
            iterations,
            finish,
        })
    }

    fn iterate(
        &mut self,
        t: u32,
        cfg: &WorkflowConfig,
        data: &mut Dataset,
        expansion: &mut ExpansionState,
        evaluations: &mut Vec<EvaluationRecord>,
    ) -> Result<IterationRecord> {
        let seed = cfg.master_seed;
        let transform = data.restandardize(cfg.log_epsilon)?;
        let nseeds = expansion.current_k();
        self.emulator.fit(
            data.points(),
            data.y_std(),
            nseeds,
            &mut component_rng(seed, Component::Fit, t),
        )?;
        let lml = self
            .emulator
            .state_json()
            .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
            .and_then(|v| v.get("log_marginal_likelihood").and_then(|l| l.as_f64()));

        let grid = {
            let ctx = GridContext::new(self.emulator.as_ref(), data, nseeds);
            self.grid.sample(&ctx, &mut component_rng(seed, Component::Grid, t))?
        };
        let batch = thompson_select(
            self.emulator.as_ref(),
            &grid,
            cfg.nts_samp,
            &mut component_rng(seed, Component::Thompson, t),
        )?;

        let counter_at_check = expansion.sims_since_expansion();
        let mut event = None;
        let mut expansion_points = Vec::new();
        if check_for_expansion(
            expansion,
            &cfg.expansion.policy,
            self.emulator.as_ref(),
            data,
            &mut component_rng(seed, Component::Expansion, t),
        ) {
            let new_seed = expand(expansion, &cfg.expansion.policy, t);
            event = expansion.events().last().copied();
            expansion_points = match cfg.expansion.sampler {
                ExpansionSampler::Explore => sample_from_expansion(
                    &grid,
                    cfg.expansion.nexpansion,
                    new_seed,
                    &mut component_rng(seed, Component::ExpansionSample, t),
                )?,
                ExpansionSampler::Exploit => sample_from_incumbents(data, cfg.expansion.nexpansion, new_seed),
            };
        }

        let mut todo: Vec<(DesignPoint, EvaluationSource)> = batch
            .iter()
            .cloned()
            .map(|p| (p, EvaluationSource::Thompson))
            .chain(expansion_points.iter().cloned().map(|p| (p, EvaluationSource::Expansion)))
            .collect();
        let room = cfg.budget - evaluations.len();
        let truncated = todo.len().saturating_sub(room);
        todo.truncate(room);

        let points: Vec<DesignPoint> = todo.iter().map(|(p, _)| p.clone()).collect();
        let results = self.evaluate(&points);
        let mut ok_points = Vec::new();
        let mut ok_y = Vec::new();
        let mut failed = 0;
        for ((point, source), res) in todo.into_iter().zip(results) {
            let index = evaluations.len();
            let rec = match res {
                Ok(ev) if ev.y_raw.is_finite() && ev.y_raw >= 0.0 => {
                    ok_points.push(point.clone());
                    ok_y.push(ev.y_raw);
                    EvaluationRecord {
                        index,
                        iteration: t,
                        source,
                        point,
                        y_raw: Some(ev.y_raw),
                        y_std: None,
                        rmse: ev.rmse,
                        error: None,
                    }
                }
                other => {
                    failed += 1;
                    let msg = match other {
                        Err(e) => e.to_string(),
                        Ok(ev) => format!("objective returned invalid value {}", ev.y_raw),
                    };
                    EvaluationRecord {
                        index,
                        iteration: t,
                        source,
                        point,
                        y_raw: None,
                        y_std: None,
                        rmse: None,
                        error: Some(msg),
                    }
                }
            };
            evaluations.push(rec);
        }
        let evaluated = points.len();
        data.append(ok_points, ok_y, t)?;
        expansion.record_evaluations(evaluated);

        Ok(IterationRecord {
            iteration: t,
            nseeds: expansion.current_k(),
            transform,
            log_marginal_likelihood: lml,
            grid_size: grid.len(),
            grid_digest: grid.digest(),
            thompson_batch: batch,
            counter_at_check,
            expansion: event,
            expansion_points,
            truncated,
            evaluated,
            failed,
            evaluations_total: evaluations.len(),
            best_raw: data.y_raw().iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

/// Builds a workflow for `objective`, draws and evaluates an `n_initial`-point
/// design, and runs it to budget.
pub fn run_from_scratch(objective: &dyn Objective, config: WorkflowConfig, n_initial: usize) -> Result<RunTrace> {
    let mut wf = Workflow::new(config, objective)?;
    let data = wf.initial_design(n_initial)?;
    wf.run(data)
}

/// Runs `config` from an already evaluated initial dataset.
pub fn run(initial: Dataset, objective: &dyn Objective, config: WorkflowConfig) -> Result<RunTrace> {
    Workflow::new(config, objective)?.run(initial)
}
