//! Joint search space, space-filling designs, rescaling and objective transforms.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied before taking the log of a discrepancy.
pub const DEFAULT_LOG_EPSILON: f64 = 1e-12;

/// Sample standard deviations below this are replaced by 1.
const STD_FLOOR: f64 = 1e-12;

/// An element of the joint search space: unit-hypercube coordinates and a seed id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub x: Vec<f64>,
    pub seed: u32,
}

impl DesignPoint {
    pub fn new(x: Vec<f64>, seed: u32) -> Self {
        DesignPoint { x, seed }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Checks the coordinates lie in `[0,1]` and the seed in `1..=nseeds`.
    pub fn validate(&self, nseeds: usize) -> Result<()> {
        if let Some(v) = self.x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("coordinate {v} outside [0,1]")));
        }
        if self.seed < 1 || self.seed as usize > nseeds {
            return Err(Error::invalid(format!(
                "seed {} outside 1..={nseeds}",
                self.seed
            )));
        }
        Ok(())
    }

    /// Bitwise identity key; two points are "the same" only if every bit matches.
    pub fn key(&self) -> (Vec<u64>, u32) {
        (self.x.iter().map(|v| v.to_bits()).collect(), self.seed)
    }
}

/// Box bounds in the simulator's native units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid("bounds must be nonempty and of equal length"));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::invalid(format!(
                    "bounds[{i}]: lower {l} must be below upper {u}"
                )));
            }
        }
        Ok(Bounds { lower, upper })
    }

    pub fn unit(d: usize) -> Self {
        Bounds {
            lower: vec![0.0; d],
            upper: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
}

/// Maps a unit-hypercube point to native units.
pub fn rescale(u: &[f64], bounds: &Bounds) -> Result<Vec<f64>> {
    if u.len() != bounds.dim() {
        return Err(Error::invalid("point dimension does not match bounds"));
    }
    if let Some(v) = u.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("coordinate {v} outside [0,1]")));
    }
    Ok(u.iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(u, (l, h))| l + u * (h - l))
        .collect())
}

/// Inverse of [`rescale`].
pub fn unrescale(x: &[f64], bounds: &Bounds) -> Result<Vec<f64>> {
    if x.len() != bounds.dim() {
        return Err(Error::invalid("point dimension does not match bounds"));
    }
    Ok(x.iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(x, (l, h))| (x - l) / (h - l))
        .collect())
}

/// `n` points in `[0,1]^d` with exactly one point per stratum `[i/n, (i+1)/n)` in
/// every dimension.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("latin hypercube needs n >= 1 and d >= 1"));
    }
    let mut points = vec![vec![0.0; d]; n];
    let nf = n as f64;
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..d {
        perm.shuffle(rng);
        for (point, &stratum) in points.iter_mut().zip(&perm) {
            let u: f64 = rng.random();
            point[j] = stratified_value(stratum, u, nf);
        }
    }
    Ok(points)
}

// (i + u) / n, nudged so that floor(v * n) == i survives rounding.
fn stratified_value(i: usize, u: f64, n: f64) -> f64 {
    let target = i as f64;
    let mut v = (target + u) / n;
    while (v * n).floor() > target {
        v = v.next_down();
    }
    while (v * n).floor() < target {
        v = v.next_up();
    }
    v
}

fn check_series(y_sim: &[f64], y_obs: &[f64]) -> Result<()> {
    if y_sim.len() != y_obs.len() {
        return Err(Error::invalid(format!(
            "series length mismatch: {} vs {}",
            y_sim.len(),
            y_obs.len()
        )));
    }
    if y_sim.is_empty() {
        return Err(Error::invalid("series must be nonempty"));
    }
    Ok(())
}

/// Sum of squared errors between a simulated and an observed series.
pub fn sse(y_sim: &[f64], y_obs: &[f64]) -> Result<f64> {
    check_series(y_sim, y_obs)?;
    Ok(y_sim
        .iter()
        .zip(y_obs)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

pub fn rmse(y_sim: &[f64], y_obs: &[f64]) -> Result<f64> {
    Ok((sse(y_sim, y_obs)? / y_sim.len() as f64).sqrt())
}

/// Log-then-standardize transform of raw discrepancies.
///
/// `y_std = (ln(max(y, epsilon)) - mean) / std`, with population statistics of the
/// logged values. A standard deviation below 1e-12 is replaced by 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTransform {
    pub epsilon: f64,
    pub mean: f64,
    pub std: f64,
}

impl ObjectiveTransform {
    pub fn fit(y_raw: &[f64], epsilon: f64) -> Result<(Self, Vec<f64>)> {
        if y_raw.is_empty() {
            return Err(Error::invalid("cannot fit a transform on no data"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("log floor epsilon must be positive"));
        }
        let logs: Vec<f64> = y_raw.iter().map(|&y| y.max(epsilon).ln()).collect();
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
        let mut std = var.sqrt();
        if !(std >= STD_FLOOR) {
            std = 1.0;
        }
        let t = ObjectiveTransform { epsilon, mean, std };
        let y_std = logs.iter().map(|l| (l - mean) / std).collect();
        Ok((t, y_std))
    }

    pub fn apply(&self, y_raw: f64) -> f64 {
        (y_raw.max(self.epsilon).ln() - self.mean) / self.std
    }

    pub fn invert(&self, y_std: f64) -> f64 {
        (y_std * self.std + self.mean).exp()
    }
}

/// Free-function form of [`ObjectiveTransform::fit`].
pub fn fit_transform(y_raw: &[f64], epsilon: f64) -> Result<(ObjectiveTransform, Vec<f64>)> {
    ObjectiveTransform::fit(y_raw, epsilon)
}

/// Append-only store of evaluated design points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    points: Vec<DesignPoint>,
    y_raw: Vec<f64>,
    y_std: Vec<f64>,
    iteration: Vec<u32>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a dataset from already-evaluated points, tagged as iteration 0.
    pub fn from_evaluations(points: Vec<DesignPoint>, y_raw: Vec<f64>) -> Result<Self> {
        let mut ds = Dataset::new();
        ds.append(points, y_raw, 0)?;
        Ok(ds)
    }

    pub fn append(&mut self, points: Vec<DesignPoint>, y_raw: Vec<f64>, iteration: u32) -> Result<()> {
        if points.len() != y_raw.len() {
            return Err(Error::invalid("points and objective values differ in length"));
        }
        if let Some(v) = y_raw.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("discrepancy {v} is not a finite nonnegative value")));
        }
        if let Some(first) = self.points.first() {
            if points.iter().any(|p| p.dim() != first.dim()) {
                return Err(Error::invalid("point dimension mismatch"));
            }
        }
        let n = points.len();
        self.points.extend(points);
        self.y_raw.extend(y_raw);
        self.iteration.extend(std::iter::repeat_n(iteration, n));
        // Stale until the next restandardize; keep lengths equal.
        self.y_std.resize(self.points.len(), f64::NAN);
        Ok(())
    }

    /// Recomputes `y_std` with a freshly fitted transform.
    pub fn restandardize(&mut self, epsilon: f64) -> Result<ObjectiveTransform> {
        let (t, y_std) = ObjectiveTransform::fit(&self.y_raw, epsilon)?;
        self.y_std = y_std;
        Ok(t)
    }

    /// Recomputes `y_std` under a given (e.g. frozen) transform.
    pub fn apply_transform(&mut self, t: &ObjectiveTransform) {
        self.y_std = self.y_raw.iter().map(|&y| t.apply(y)).collect();
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DesignPoint] {
        &self.points
    }

    pub fn y_raw(&self) -> &[f64] {
        &self.y_raw
    }

    pub fn y_std(&self) -> &[f64] {
        &self.y_std
    }

    pub fn iterations(&self) -> &[u32] {
        &self.iteration
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(DesignPoint::dim)
    }

    /// Index of the smallest raw discrepancy (first one on ties).
    pub fn argmin(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, y) in self.y_raw.iter().enumerate() {
            if best.is_none_or(|b| *y < self.y_raw[b]) {
                best = Some(i);
            }
        }
        best
    }
}
