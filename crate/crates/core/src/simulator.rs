//! Reference calibration targets.
//!
//! [`sir_run`] is a spatial agent-based SIR model. Agents random-walk on the
//! integer lattice `{0, ..., grid_extent}²` and an infected agent infects each
//! susceptible agent within the contact radius with probability `beta`. All
//! randomness comes from common random numbers keyed by `crn_stream_id`, so runs
//! that differ only in `seed_id` (the index-case position) see identical movement
//! and identical infection uniforms.
//!
//! Movement draws come from a ChaCha stream: two per agent for the initial lattice
//! position, then one per agent per step, in agent-id order. Infection uniforms are
//! counter-based: the uniform for infector `i`, target `j` at step `t` is a fixed
//! hash of `(crn_stream_id, t, i, j)`. A contact transmits iff that uniform is below
//! `beta`, so outcomes are coupled across `beta`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dataspace::{rescale, rmse, sse, Bounds, DesignPoint};
use crate::error::{Error, Result};

pub const GROUND_TRUTH_BETA: f64 = 0.069;
pub const GROUND_TRUTH_SEED: u32 = 0;
pub const TRAJECTORY_FORMAT: &str = "# trajopt-trajectory v1";

const MOVEMENT_KEY: u64 = 0x5349_525f_4d4f_5645;
const INFECTION_KEY: u64 = 0x5349_525f_494e_4645;

/// The nine random-walk moves: stay or one unit step toward a compass point.
const MOVES: [(f64, f64); 9] = [
    (0.0, 0.0),
    (1.0, 0.0),
    (1.0, 1.0),
    (0.0, 1.0),
    (-1.0, 1.0),
    (-1.0, 0.0),
    (-1.0, -1.0),
    (0.0, -1.0),
    (1.0, -1.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SirConfig {
    pub n_agents: usize,
    pub grid_extent: f64,
    pub beta: f64,
    pub seed_id: u32,
    pub crn_stream_id: u64,
    pub horizon: usize,
    pub infectious_period: usize,
    pub contact_radius: f64,
}

impl Default for SirConfig {
    fn default() -> Self {
        SirConfig {
            n_agents: 2000,
            grid_extent: 50.0,
            beta: GROUND_TRUTH_BETA,
            seed_id: GROUND_TRUTH_SEED,
            crn_stream_id: 0,
            horizon: 100,
            infectious_period: 14,
            contact_radius: 1.5,
        }
    }
}

impl SirConfig {
    /// Index-case position: `seed_id` units up the diagonal from the centre.
    pub fn index_position(&self) -> (f64, f64) {
        let c = (self.grid_extent / 2.0).floor() + self.seed_id as f64;
        (c, c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta {} outside [0,1]", self.beta)));
        }
        if self.n_agents == 0 {
            return Err(Error::invalid("n_agents must be >= 1"));
        }
        if !(self.grid_extent >= 1.0 && self.grid_extent.is_finite() && self.grid_extent.fract() == 0.0) {
            return Err(Error::invalid(format!(
                "grid_extent {} must be a positive whole number",
                self.grid_extent
            )));
        }
        if self.infectious_period == 0 {
            return Err(Error::invalid("infectious_period must be >= 1"));
        }
        if !(self.contact_radius >= 0.0 && self.contact_radius.is_finite()) {
            return Err(Error::invalid("contact_radius must be nonnegative"));
        }
        let (ix, _) = self.index_position();
        if ix > self.grid_extent {
            return Err(Error::invalid(format!(
                "seed {} places the index case at ({ix}, {ix}), outside the grid [0, {}]",
                self.seed_id, self.grid_extent
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub infected_counts: Vec<u32>,
    pub cumulative_infections: Vec<u32>,
    pub susceptible_counts: Vec<u32>,
    pub recovered_counts: Vec<u32>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.infected_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.infected_counts.is_empty()
    }

    pub fn infected_f64(&self) -> Vec<f64> {
        self.infected_counts.iter().map(|v| *v as f64).collect()
    }

    /// Comma-separated table with a format header: `step,infected,cumulative`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRAJECTORY_FORMAT}")?;
        writeln!(w, "step,infected,cumulative")?;
        for (t, (i, c)) in self.infected_counts.iter().zip(&self.cumulative_infections).enumerate() {
            writeln!(w, "{t},{i},{c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Susceptible,
    Infected { since: usize },
    Recovered,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn infection_uniform(stream: u64, step: usize, infector: usize, target: usize) -> f64 {
    let mut h = splitmix64(INFECTION_KEY ^ stream);
    h = splitmix64(h ^ step as u64);
    h = splitmix64(h ^ infector as u64);
    h = splitmix64(h ^ target as u64);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn reflect(v: f64, extent: f64) -> f64 {
    let r = v.rem_euclid(2.0 * extent);
    if r > extent {
        2.0 * extent - r
    } else {
        r
    }
}

fn movement_rng(stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(MOVEMENT_KEY);
    rng.set_stream(stream);
    rng
}

/// Spatial hash over cells of side `cell`.
struct CellIndex {
    cell: f64,
    side: usize,
    buckets: Vec<Vec<usize>>,
}

impl CellIndex {
    fn new(extent: f64, radius: f64) -> Self {
        let cell = radius.max(extent / 512.0).max(1e-9);
        let side = (extent / cell).floor() as usize + 1;
        CellIndex {
            cell,
            side,
            buckets: vec![Vec::new(); side * side],
        }
    }

    fn coords(&self, p: (f64, f64)) -> (usize, usize) {
        let cx = ((p.0 / self.cell) as usize).min(self.side - 1);
        let cy = ((p.1 / self.cell) as usize).min(self.side - 1);
        (cx, cy)
    }

    fn rebuild(&mut self, pos: &[(f64, f64)], include: impl Fn(usize) -> bool) {
        for b in &mut self.buckets {
            b.clear();
        }
        for (i, p) in pos.iter().enumerate() {
            if include(i) {
                let (cx, cy) = self.coords(*p);
                self.buckets[cy * self.side + cx].push(i);
            }
        }
    }

    /// Indices within `radius` of `p`, ascending.
    fn neighbours(&self, pos: &[(f64, f64)], p: (f64, f64), radius: f64, out: &mut Vec<usize>) {
        out.clear();
        let (cx, cy) = self.coords(p);
        let r2 = radius * radius;
        for y in cy.saturating_sub(1)..=(cy + 1).min(self.side - 1) {
            for x in cx.saturating_sub(1)..=(cx + 1).min(self.side - 1) {
                for &j in &self.buckets[y * self.side + x] {
                    let (dx, dy) = (pos[j].0 - p.0, pos[j].1 - p.1);
                    if dx * dx + dy * dy <= r2 {
                        out.push(j);
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

/// Runs the model; see the module docs for the draw order.
pub fn sir_run(config: &SirConfig) -> Result<Trajectory> {
    run_inner(config, None)
}

/// As [`sir_run`], also returning every movement draw in order.
pub fn sir_run_with_movement_log(config: &SirConfig) -> Result<(Trajectory, Vec<u8>)> {
    let mut log = Vec::new();
    let traj = run_inner(config, Some(&mut log))?;
    Ok((traj, log))
}

fn run_inner(config: &SirConfig, mut log: Option<&mut Vec<u8>>) -> Result<Trajectory> {
    config.validate()?;
    let n = config.n_agents;
    let ext = config.grid_extent;
    let mut rng = movement_rng(config.crn_stream_id);

    let side = ext as u32 + 1;
    let mut pos: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0..side) as f64, rng.random_range(0..side) as f64))
        .collect();
    pos[0] = config.index_position();
    let mut state = vec![State::Susceptible; n];
    state[0] = State::Infected { since: 0 };

    let cap = config.horizon + 1;
    let mut traj = Trajectory {
        infected_counts: Vec::with_capacity(cap),
        cumulative_infections: Vec::with_capacity(cap),
        susceptible_counts: Vec::with_capacity(cap),
        recovered_counts: Vec::with_capacity(cap),
    };
    let mut cumulative = 1u32;
    let record = |traj: &mut Trajectory, state: &[State], cumulative: u32| {
        let (mut s, mut i, mut r) = (0, 0, 0);
        for st in state {
            match st {
                State::Susceptible => s += 1,
                State::Infected { .. } => i += 1,
                State::Recovered => r += 1,
            }
        }
        traj.susceptible_counts.push(s);
        traj.infected_counts.push(i);
        traj.recovered_counts.push(r);
        traj.cumulative_infections.push(cumulative);
    };
    record(&mut traj, &state, cumulative);

    let mut index = CellIndex::new(ext, config.contact_radius);
    let mut near = Vec::new();
    let mut newly = Vec::new();
    for t in 1..=config.horizon {
        for p in pos.iter_mut() {
            let m = rng.random_range(0..MOVES.len());
            if let Some(l) = log.as_deref_mut() {
                l.push(m as u8);
            }
            let (dx, dy) = MOVES[m];
            *p = (reflect(p.0 + dx, ext), reflect(p.1 + dy, ext));
        }

        if config.beta > 0.0 {
            index.rebuild(&pos, |j| state[j] == State::Susceptible);
            newly.clear();
            for i in 0..n {
                if !matches!(state[i], State::Infected { .. }) {
                    continue;
                }
                index.neighbours(&pos, pos[i], config.contact_radius, &mut near);
                for &j in &near {
                    if infection_uniform(config.crn_stream_id, t, i, j) < config.beta {
                        newly.push(j);
                    }
                }
            }
            newly.sort_unstable();
            newly.dedup();
            for &j in &newly {
                state[j] = State::Infected { since: t };
            }
            cumulative += newly.len() as u32;
        }

        for st in state.iter_mut() {
            if let State::Infected { since } = *st {
                if t - since >= config.infectious_period {
                    *st = State::Recovered;
                }
            }
        }
        record(&mut traj, &state, cumulative);
    }
    Ok(traj)
}

/// The reference trajectory: `beta` 0.069 with the index case at the centre.
pub fn ground_truth(crn_stream_id: u64) -> Result<Trajectory> {
    ground_truth_with(&SirConfig {
        crn_stream_id,
        ..SirConfig::default()
    })
}

/// Ground truth under `base`'s population settings.
pub fn ground_truth_with(base: &SirConfig) -> Result<Trajectory> {
    sir_run(&SirConfig {
        beta: GROUND_TRUTH_BETA,
        seed_id: GROUND_TRUTH_SEED,
        ..base.clone()
    })
}

/// Seed-shifted quadratic in the first coordinate with per-seed minimizer
/// `0.5 + 0.02 (r - 1)`.
pub fn toy_objective(point: &DesignPoint) -> f64 {
    let target = 0.5 + 0.02 * (point.seed as f64 - 1.0);
    (point.x[0] - target).powi(2)
}

/// One simulator evaluation as seen by the workflow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Nonnegative discrepancy to minimize.
    pub y_raw: f64,
    /// Root-mean-square error against the truth, when one is known.
    pub rmse: Option<f64>,
}

/// A calibration target over the unit hypercube and seed ids.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, point: &DesignPoint) -> Result<Evaluation>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ToyObjective {
    pub dim: usize,
}

impl ToyObjective {
    pub fn new(dim: usize) -> Self {
        ToyObjective { dim: dim.max(1) }
    }
}

impl Objective for ToyObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, point: &DesignPoint) -> Result<Evaluation> {
        if point.dim() != self.dim {
            return Err(Error::invalid(format!("expected {} coordinates, got {}", self.dim, point.dim())));
        }
        let y = toy_objective(point);
        Ok(Evaluation {
            y_raw: y,
            rmse: Some(y.sqrt()),
        })
    }
}

/// SIR calibration of `beta` against an observed infected-count series.
///
/// The single coordinate maps to `beta` through `bounds`; design seed `r` maps to
/// `seed_id = r`. The discrepancy is the sum of squared errors on infected counts.
#[derive(Debug, Clone)]
pub struct SirObjective {
    base: SirConfig,
    bounds: Bounds,
    observed: Vec<f64>,
}

impl SirObjective {
    pub fn new(base: SirConfig, bounds: Bounds, observed: Vec<f64>) -> Result<Self> {
        if bounds.dim() != 1 {
            return Err(Error::invalid("SIR calibration has exactly one parameter (beta)"));
        }
        if observed.len() != base.horizon + 1 {
            return Err(Error::invalid(format!(
                "observed series has {} steps, expected {}",
                observed.len(),
                base.horizon + 1
            )));
        }
        Ok(SirObjective { base, bounds, observed })
    }

    /// Calibrates against [`ground_truth_with`] on the same stream.
    pub fn against_ground_truth(base: SirConfig, bounds: Bounds) -> Result<Self> {
        let observed = ground_truth_with(&base)?.infected_f64();
        Self::new(base, bounds, observed)
    }

    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    pub fn config_for(&self, point: &DesignPoint) -> Result<SirConfig> {
        let beta = rescale(&point.x, &self.bounds)?[0];
        Ok(SirConfig {
            beta,
            seed_id: point.seed,
            ..self.base.clone()
        })
    }

    pub fn trajectory(&self, point: &DesignPoint) -> Result<Trajectory> {
        sir_run(&self.config_for(point)?)
    }
}

impl Objective for SirObjective {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate(&self, point: &DesignPoint) -> Result<Evaluation> {
        let sim = self.trajectory(point)?.infected_f64();
        Ok(Evaluation {
            y_raw: sse(&sim, &self.observed)?,
            rmse: Some(rmse(&sim, &self.observed)?),
        })
    }
}
