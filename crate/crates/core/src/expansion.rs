//! Seed-space growth.
//!
//! The workflow keeps an [`ExpansionState`] and asks [`check_for_expansion`] once per
//! iteration. On expansion the next contiguous seed id is added and a handful of
//! points carrying that seed join the iteration's batch.

use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::dataspace::{Dataset, DesignPoint};
use crate::emulator::Emulator;
use crate::error::{Error, Result};
use crate::grid::CandidateGrid;

/// User-supplied trigger: a predicate over the emulator, the data so far and the state.
pub trait ExpansionPredicate: Send + Sync {
    fn should_expand(&self, emulator: &dyn Emulator, dataset: &Dataset, state: &ExpansionState) -> bool;
}

impl<F> ExpansionPredicate for F
where
    F: Fn(&dyn Emulator, &Dataset, &ExpansionState) -> bool + Send + Sync,
{
    fn should_expand(&self, emulator: &dyn Emulator, dataset: &Dataset, state: &ExpansionState) -> bool {
        self(emulator, dataset, state)
    }
}

#[derive(Clone)]
pub enum ExpansionPolicy {
    Never,
    /// Expand once `nsims` evaluations have completed since the last expansion.
    BySims { nsims: usize },
    /// Expand with fixed probability `p` at each check.
    ByProb { p: f64 },
    Custom(Arc<dyn ExpansionPredicate>),
}

impl fmt::Debug for ExpansionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpansionPolicy::Never => write!(f, "Never"),
            ExpansionPolicy::BySims { nsims } => write!(f, "BySims {{ nsims: {nsims} }}"),
            ExpansionPolicy::ByProb { p } => write!(f, "ByProb {{ p: {p} }}"),
            ExpansionPolicy::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl ExpansionPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            ExpansionPolicy::BySims { nsims } if *nsims == 0 => {
                Err(Error::invalid("nsims_expand must be >= 1"))
            }
            ExpansionPolicy::ByProb { p } if !(0.0..=1.0).contains(p) => {
                Err(Error::invalid(format!("expansion probability {p} outside [0,1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Where the points carrying a new seed come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpansionSampler {
    /// Uniform draws from the refined candidate grid.
    #[default]
    Explore,
    /// The best observed parameter values so far, re-run under the new seed.
    Exploit,
}

#[derive(Debug, Clone)]
pub struct ExpansionConfig {
    pub nseeds: usize,
    pub nexpansion: usize,
    pub policy: ExpansionPolicy,
    pub sampler: ExpansionSampler,
}

impl ExpansionConfig {
    pub fn new(nseeds: usize, nexpansion: usize, policy: ExpansionPolicy) -> Result<Self> {
        if nseeds == 0 {
            return Err(Error::invalid("nseeds must be >= 1"));
        }
        policy.validate()?;
        Ok(ExpansionConfig {
            nseeds,
            nexpansion,
            policy,
            sampler: ExpansionSampler::Explore,
        })
    }

    pub fn with_sampler(mut self, sampler: ExpansionSampler) -> Self {
        self.sampler = sampler;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionEvent {
    pub iteration: u32,
    pub seed: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionState {
    initial_k: usize,
    current_k: usize,
    sims_since_expansion: usize,
    events: Vec<ExpansionEvent>,
}

impl ExpansionState {
    pub fn new(initial_k: usize) -> Result<Self> {
        if initial_k == 0 {
            return Err(Error::invalid("initial seed-space size must be >= 1"));
        }
        Ok(ExpansionState {
            initial_k,
            current_k: initial_k,
            sims_since_expansion: 0,
            events: Vec::new(),
        })
    }

    pub fn initial_k(&self) -> usize {
        self.initial_k
    }

    pub fn current_k(&self) -> usize {
        self.current_k
    }

    pub fn sims_since_expansion(&self) -> usize {
        self.sims_since_expansion
    }

    pub fn events(&self) -> &[ExpansionEvent] {
        &self.events
    }

    /// Counts completed evaluations toward the next by-sims trigger.
    pub fn record_evaluations(&mut self, n: usize) {
        self.sims_since_expansion += n;
    }

    /// Adds seed `current_k + 1` and returns it. `consumed` evaluations are
    /// taken off the counter; any excess carries over to the next interval.
    pub fn expand(&mut self, iteration: u32, consumed: usize) -> u32 {
        self.current_k += 1;
        self.sims_since_expansion = self.sims_since_expansion.saturating_sub(consumed);
        let seed = self.current_k as u32;
        self.events.push(ExpansionEvent { iteration, seed });
        seed
    }
}

/// Does `policy` call for a new seed now?
pub fn check_for_expansion(
    state: &ExpansionState,
    policy: &ExpansionPolicy,
    emulator: &dyn Emulator,
    dataset: &Dataset,
    rng: &mut dyn RngCore,
) -> bool {
    match policy {
        ExpansionPolicy::Never => false,
        ExpansionPolicy::BySims { nsims } => state.sims_since_expansion >= *nsims,
        ExpansionPolicy::ByProb { p } => rng.random::<f64>() < *p,
        ExpansionPolicy::Custom(pred) => pred.should_expand(emulator, dataset, state),
    }
}

/// Expands `state` under `policy`: a by-sims trigger consumes one interval of the
/// counter, every other trigger clears it.
pub fn expand(state: &mut ExpansionState, policy: &ExpansionPolicy, iteration: u32) -> u32 {
    let consumed = match policy {
        ExpansionPolicy::BySims { nsims } => *nsims,
        _ => state.sims_since_expansion,
    };
    state.expand(iteration, consumed)
}

/// Draws `nexpansion` grid points (without replacement when possible) and gives
/// each the seed `new_seed`.
pub fn sample_from_expansion(
    grid: &CandidateGrid,
    nexpansion: usize,
    new_seed: u32,
    rng: &mut dyn RngCore,
) -> Result<Vec<DesignPoint>> {
    if grid.is_empty() {
        return Err(Error::invalid("cannot sample expansion points from an empty grid"));
    }
    let m = grid.len();
    let picks: Vec<usize> = if nexpansion <= m {
        index::sample(rng, m, nexpansion).into_vec()
    } else {
        (0..nexpansion).map(|_| rng.random_range(0..m)).collect()
    };
    Ok(picks
        .into_iter()
        .map(|i| DesignPoint::new(grid.points[i].x.clone(), new_seed))
        .collect())
}

/// The `n` best distinct parameter values observed so far, each under `new_seed`.
pub fn sample_from_incumbents(dataset: &Dataset, n: usize, new_seed: u32) -> Vec<DesignPoint> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|a, b| dataset.y_raw()[*a].total_cmp(&dataset.y_raw()[*b]).then(a.cmp(b)));
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    for i in order {
        if out.len() == n {
            break;
        }
        let x = &dataset.points()[i].x;
        if seen.insert(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>()) {
            out.push(DesignPoint::new(x.clone(), new_seed));
        }
    }
    out
}
