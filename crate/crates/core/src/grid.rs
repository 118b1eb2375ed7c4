//! Candidate-grid strategies.
//!
//! [`FixedGrid`] never changes, [`LhsGrid`] draws a fresh Latin hypercube every
//! call, and [`AdaptiveGrid`] refines the previous grid in two stages:
//!
//! 1. *filtering*: weight every grid point by its likelihood under the emulator,
//!    normalize, and resample `M` points with replacement;
//! 2. *densification*: pick a retained point uniformly, perturb it with a reflected
//!    Gaussian step, and try each seed in ascending order with a Metropolis-Hastings
//!    acceptance test, adding the first accepted `(x, r)` that is not yet in the grid,
//!    until the grid holds `M` distinct points again.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::dataspace::{latin_hypercube, Dataset, DesignPoint};
use crate::emulator::Emulator;
use crate::error::{Error, Result};

pub const DEFAULT_NGRID: usize = 100;
pub const DEFAULT_PROPOSAL_STEP: f64 = 0.05;
/// Densification gives up after this many proposals per grid slot.
pub const MAX_PROPOSALS_PER_POINT: usize = 10_000;

const LIKELIHOOD_FLOOR: f64 = 1e-300;
const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridConfig {
    pub ndim: usize,
    pub nseeds: usize,
    pub ngrid: usize,
}

impl GridConfig {
    pub fn new(ndim: usize, nseeds: usize, ngrid: usize) -> Result<Self> {
        if ndim == 0 || nseeds == 0 || ngrid == 0 {
            return Err(Error::invalid("grid needs ndim, nseeds and ngrid >= 1"));
        }
        Ok(GridConfig { ndim, nseeds, ngrid })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    pub points: Vec<DesignPoint>,
}

impl CandidateGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// SHA-256 over coordinate bits and seeds, lowercase hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.points {
            for c in &p.x {
                h.update(c.to_bits().to_le_bytes());
            }
            h.update(p.seed.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// What a grid strategy may look at when sampling.
pub struct GridContext<'a> {
    pub emulator: &'a dyn Emulator,
    pub dataset: &'a Dataset,
    /// Current seed-space size.
    pub nseeds: usize,
    /// Incumbent: best (lowest) standardized objective so far.
    pub tau: f64,
}

impl<'a> GridContext<'a> {
    pub fn new(emulator: &'a dyn Emulator, dataset: &'a Dataset, nseeds: usize) -> Self {
        let tau = dataset
            .y_std()
            .iter()
            .copied()
            .filter(|v| !v.is_nan())
            .fold(f64::INFINITY, f64::min);
        GridContext {
            emulator,
            dataset,
            nseeds,
            tau,
        }
    }
}

pub trait GridStrategy: Send {
    fn name(&self) -> &str;
    fn sample(&mut self, ctx: &GridContext<'_>, rng: &mut dyn RngCore) -> Result<CandidateGrid>;
}

/// LHS over `[0,1]^d` with seeds cycled: point `i` gets seed `1 + (i mod k)`.
pub fn lhs_with_cycled_seeds(m: usize, d: usize, k: usize, rng: &mut dyn RngCore) -> Result<Vec<DesignPoint>> {
    if k == 0 {
        return Err(Error::invalid("seed space is empty"));
    }
    Ok(latin_hypercube(m, d, rng)?
        .into_iter()
        .enumerate()
        .map(|(i, x)| DesignPoint::new(x, 1 + (i % k) as u32))
        .collect())
}

#[derive(Debug, Clone)]
pub struct FixedGrid {
    grid: CandidateGrid,
}

impl FixedGrid {
    pub fn from_points(points: Vec<DesignPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("fixed grid needs at least one point"));
        }
        let d = points[0].dim();
        for p in &points {
            if p.dim() != d {
                return Err(Error::invalid("fixed grid points differ in dimension"));
            }
            p.validate(p.seed.max(1) as usize)?;
        }
        Ok(FixedGrid {
            grid: CandidateGrid { points },
        })
    }

    /// One-time Latin hypercube, frozen afterwards.
    pub fn from_lhs(config: GridConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let points = lhs_with_cycled_seeds(config.ngrid, config.ndim, config.nseeds, rng)?;
        Ok(FixedGrid {
            grid: CandidateGrid { points },
        })
    }

    pub fn grid(&self) -> &CandidateGrid {
        &self.grid
    }
}

impl GridStrategy for FixedGrid {
    fn name(&self) -> &str {
        "fixed"
    }

    fn sample(&mut self, _ctx: &GridContext<'_>, _rng: &mut dyn RngCore) -> Result<CandidateGrid> {
        Ok(self.grid.clone())
    }
}

#[derive(Debug, Clone)]
pub struct LhsGrid {
    config: GridConfig,
}

impl LhsGrid {
    pub fn new(config: GridConfig) -> Self {
        LhsGrid { config }
    }

    pub fn draw(&self, nseeds: usize, rng: &mut dyn RngCore) -> Result<CandidateGrid> {
        Ok(CandidateGrid {
            points: lhs_with_cycled_seeds(self.config.ngrid, self.config.ndim, nseeds, rng)?,
        })
    }
}

impl GridStrategy for LhsGrid {
    fn name(&self) -> &str {
        "lhs"
    }

    fn sample(&mut self, ctx: &GridContext<'_>, rng: &mut dyn RngCore) -> Result<CandidateGrid> {
        self.draw(ctx.nseeds, rng)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Probability that the latent objective beats `tau` given a posterior mean and sd.
pub fn improvement_probability(mean: f64, sd: f64, tau: f64) -> f64 {
    normal_cdf((tau - mean) / sd.max(SIGMA_FLOOR)).max(LIKELIHOOD_FLOOR)
}

/// Likelihood of one candidate: `Φ((tau - μ) / σ)` under the emulator posterior.
pub fn likelihood(point: &DesignPoint, emulator: &dyn Emulator, tau: f64) -> Result<f64> {
    Ok(likelihoods(std::slice::from_ref(point), emulator, tau)?[0])
}

/// Batched [`likelihood`].
pub fn likelihoods(points: &[DesignPoint], emulator: &dyn Emulator, tau: f64) -> Result<Vec<f64>> {
    if !emulator.is_fitted() {
        return Err(Error::State("likelihood needs a fitted emulator".into()));
    }
    let post = emulator.predict(points, false)?;
    Ok(post
        .mean
        .iter()
        .zip(post.var.iter())
        .map(|(m, v)| improvement_probability(*m, v.max(0.0).sqrt(), tau))
        .collect())
}

/// Metropolis-Hastings acceptance probability for a symmetric proposal.
pub fn acceptance_probability(l_candidate: f64, l_current: f64) -> f64 {
    if l_current <= 0.0 {
        return 1.0;
    }
    (l_candidate / l_current).min(1.0)
}

/// Draws `m` indices with replacement, proportional to `weights`.
pub fn importance_resample<R: Rng + ?Sized>(weights: &[f64], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::invalid("no weights to resample"));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::invalid(format!("invalid importance weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Progress("all importance weights are zero".into()));
    }
    let normalized: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let dist = WeightedIndex::new(&normalized)
        .map_err(|e| Error::invalid(format!("importance weights: {e}")))?;
    Ok((0..m).map(|_| dist.sample(rng)).collect())
}

fn reflect_unit(v: f64) -> f64 {
    let r = v.rem_euclid(2.0);
    if r > 1.0 {
        2.0 - r
    } else {
        r
    }
}

/// Per-dimension Gaussian step of scale `step`, reflected into `[0,1]`.
pub fn propose<R: Rng + ?Sized>(x: &[f64], step: f64, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            reflect_unit(v + step * z)
        })
        .collect()
}

/// Result of one filtering + densification pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub points: Vec<DesignPoint>,
    /// Distinct points surviving the filtering step.
    pub retained: usize,
    /// Densification proposals made.
    pub proposals: usize,
}

/// One adaptive refinement of `start` to `m` distinct points over `seeds`.
///
/// `lik` returns the (positive) likelihood of each point passed in.
pub fn adaptive_refine<L>(
    start: &[DesignPoint],
    m: usize,
    seeds: &[u32],
    step: f64,
    mut lik: L,
    rng: &mut dyn RngCore,
) -> Result<Refinement>
where
    L: FnMut(&[DesignPoint]) -> Result<Vec<f64>>,
{
    if start.is_empty() || m == 0 {
        return Err(Error::invalid("adaptive grid needs a nonempty start grid and M >= 1"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("adaptive grid needs a nonempty seed set"));
    }
    if !(step > 0.0) {
        return Err(Error::invalid("proposal step must be positive"));
    }

    // Filtering.
    let w = lik(start)?;
    let picks = importance_resample(&w, m, rng)?;
    let mut seen = HashSet::new();
    let mut grid: Vec<(DesignPoint, f64)> = Vec::with_capacity(m);
    for i in picks {
        if seen.insert(start[i].key()) {
            grid.push((start[i].clone(), w[i]));
        }
    }
    let retained = grid.len();

    // Densification.
    let max_proposals = MAX_PROPOSALS_PER_POINT * m;
    let mut proposals = 0;
    while grid.len() < m {
        if proposals >= max_proposals {
            return Err(Error::Progress(format!(
                "adaptive grid stalled at {} of {m} points after {proposals} proposals",
                grid.len()
            )));
        }
        proposals += 1;
        let pick = rng.random_range(0..grid.len());
        let (current, l_current) = (&grid[pick].0.x, grid[pick].1);
        let x_can = propose(current, step, rng);
        for &r in seeds {
            let cand = DesignPoint::new(x_can.clone(), r);
            let l_can = lik(std::slice::from_ref(&cand))?[0];
            let alpha = acceptance_probability(l_can, l_current);
            let u: f64 = rng.random();
            if u < alpha && !seen.contains(&cand.key()) {
                seen.insert(cand.key());
                grid.push((cand, l_can));
                break;
            }
        }
    }

    Ok(Refinement {
        points: grid.into_iter().map(|(p, _)| p).collect(),
        retained,
        proposals,
    })
}

#[derive(Debug, Clone)]
pub struct AdaptiveGrid {
    config: GridConfig,
    step: f64,
    /// Filter the previous adapted grid (true) or a fresh LHS (false) each call.
    reuse_previous: bool,
    previous: Option<Vec<DesignPoint>>,
    last: Option<Refinement>,
}

impl AdaptiveGrid {
    pub fn new(config: GridConfig) -> Self {
        AdaptiveGrid {
            config,
            step: DEFAULT_PROPOSAL_STEP,
            reuse_previous: true,
            previous: None,
            last: None,
        }
    }

    pub fn with_step(mut self, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid("proposal step must be positive"));
        }
        self.step = step;
        Ok(self)
    }

    pub fn with_reuse_previous(mut self, reuse: bool) -> Self {
        self.reuse_previous = reuse;
        self
    }

    pub fn last_refinement(&self) -> Option<&Refinement> {
        self.last.as_ref()
    }
}

impl GridStrategy for AdaptiveGrid {
    fn name(&self) -> &str {
        "adaptive"
    }

    fn sample(&mut self, ctx: &GridContext<'_>, rng: &mut dyn RngCore) -> Result<CandidateGrid> {
        if !ctx.emulator.is_fitted() {
            return Err(Error::State("adaptive grid needs a fitted emulator".into()));
        }
        let start = match (&self.previous, self.reuse_previous) {
            (Some(prev), true) => prev.clone(),
            _ => lhs_with_cycled_seeds(self.config.ngrid, self.config.ndim, ctx.nseeds, rng)?,
        };
        let seeds: Vec<u32> = (1..=ctx.nseeds as u32).collect();
        let refinement = adaptive_refine(
            &start,
            self.config.ngrid,
            &seeds,
            self.step,
            |pts| likelihoods(pts, ctx.emulator, ctx.tau),
            rng,
        )?;
        self.previous = Some(refinement.points.clone());
        let grid = CandidateGrid {
            points: refinement.points.clone(),
        };
        self.last = Some(refinement);
        Ok(grid)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, TestCaseError};
    use crate::emulator::PosteriorSummary;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Emulator with a prescribed posterior mean function and constant variance.
    pub(crate) struct StubEmulator {
        pub mean: fn(&DesignPoint) -> f64,
        pub var: f64,
    }

    impl Emulator for StubEmulator {
        fn name(&self) -> &str {
            "stub"
        }
        fn fit(&mut self, _: &[DesignPoint], _: &[f64], _: usize, _: &mut dyn RngCore) -> Result<()> {
            Ok(())
        }
        fn is_fitted(&self) -> bool {
            true
        }
        fn predict(&self, x: &[DesignPoint], with_cov: bool) -> Result<PosteriorSummary> {
            let m = x.len();
            Ok(PosteriorSummary {
                mean: DVector::from_iterator(m, x.iter().map(self.mean)),
                var: DVector::from_element(m, self.var),
                cov: with_cov.then(|| nalgebra::DMatrix::identity(m, m) * self.var),
            })
        }
    }

    // Trapezoid integration of the normal density on a fine grid, independent of erfc.
    fn phi_oracle(z: f64) -> f64 {
        let (lo, n) = (-12.0, 400_000);
        let h = (z - lo) / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = 0.5 * (pdf(lo) + pdf(z));
        for i in 1..n {
            s += pdf(lo + i as f64 * h);
        }
        s * h
    }

    fn ctx_for<'a>(emu: &'a dyn Emulator, ds: &'a Dataset, k: usize) -> GridContext<'a> {
        GridContext::new(emu, ds, k)
    }

    #[test]
    fn fixed_grid_is_frozen() {
        let pts = vec![
            DesignPoint::new(vec![0.1], 1),
            DesignPoint::new(vec![0.5], 2),
            DesignPoint::new(vec![0.9], 1),
        ];
        let mut g = FixedGrid::from_points(pts.clone()).unwrap();
        let emu = StubEmulator { mean: |_| 0.0, var: 1.0 };
        let ds = Dataset::new();
        let ctx = ctx_for(&emu, &ds, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = g.sample(&ctx, &mut rng).unwrap();
        let b = g.sample(&ctx, &mut rng).unwrap();
        assert_eq!(a.points, pts);
        assert_eq!(a.digest(), b.digest());

        let mut lhs = FixedGrid::from_lhs(GridConfig::new(1, 5, 100).unwrap(), &mut rng).unwrap();
        let a = lhs.sample(&ctx, &mut rng).unwrap();
        let b = lhs.sample(&ctx, &mut rng).unwrap();
        assert_eq!(a, b);
        let mut bins = [0usize; 100];
        for p in &a.points {
            bins[(p.x[0] * 100.0).floor() as usize] += 1;
        }
        assert!(bins.iter().all(|c| *c == 1));
    }

    #[test]
    fn lhs_grid_cycles_seeds_and_refreshes() {
        let mut g = LhsGrid::new(GridConfig::new(2, 5, 10).unwrap());
        let emu = StubEmulator { mean: |_| 0.0, var: 1.0 };
        let ds = Dataset::new();
        let ctx = ctx_for(&emu, &ds, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = g.sample(&ctx, &mut rng).unwrap();
        let b = g.sample(&ctx, &mut rng).unwrap();
        assert_ne!(a.points[0].x, b.points[0].x);
        for s in 1..=5 {
            assert_eq!(a.points.iter().filter(|p| p.seed == s).count(), 2);
        }
        let mut g = LhsGrid::new(GridConfig::new(1, 5, 100).unwrap());
        for _ in 0..3 {
            let grid = g.sample(&ctx, &mut rng).unwrap();
            let mut bins = [0usize; 100];
            for p in &grid.points {
                bins[(p.x[0] * 100.0).floor() as usize] += 1;
            }
            assert!(bins.iter().all(|c| *c == 1));
        }
    }

    #[test]
    fn likelihood_values() {
        for z in [5.0, -1.0, 0.0, 2.3] {
            assert!((normal_cdf(z) - phi_oracle(z)).abs() < 1e-9, "z = {z}");
        }
        let emu = StubEmulator { mean: |p| p.x[0], var: 0.04 };
        let p = |x: f64| DesignPoint::new(vec![x], 1);
        assert!((likelihood(&p(0.5), &emu, 0.5).unwrap() - 0.5).abs() < 1e-15);
        // sd 0.2: mean = tau - 5 sd and mean = tau + sd.
        let l5 = likelihood(&p(0.0), &emu, 1.0).unwrap();
        assert!((l5 - 0.9999997).abs() < 1e-7);
        assert!((l5 - phi_oracle(5.0)).abs() < 1e-9);
        let lm1 = likelihood(&p(0.7), &emu, 0.5).unwrap();
        assert!((lm1 - 0.158655).abs() < 1e-6);
        assert!(improvement_probability(100.0, 0.0, 0.0) >= 1e-300);
    }

    #[test]
    fn unfitted_emulator_rejected() {
        let gp = crate::emulator::GaussianProcess::baseline();
        assert!(matches!(
            likelihood(&DesignPoint::new(vec![0.2], 1), &gp, 0.0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn degenerate_weights_resample_one_point() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let idx = importance_resample(&[0.0, 0.0, 1.0, 0.0], 50, &mut rng).unwrap();
        assert!(idx.iter().all(|i| *i == 2));
        assert!(importance_resample(&[0.0, 0.0], 5, &mut rng).is_err());
        assert!(importance_resample(&[1.0, -1.0], 5, &mut rng).is_err());
    }

    #[test]
    fn resampling_frequencies_match_weights() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let w = [0.2, 0.3, 0.5];
        let mut counts = [0usize; 3];
        let reps = 20_000;
        for _ in 0..reps {
            for i in importance_resample(&w, 3, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        for (c, p) in counts.iter().zip(w) {
            assert!((*c as f64 / (3 * reps) as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn uniform_likelihood_accepts_first_proposal() {
        let start: Vec<DesignPoint> = (0..10).map(|i| DesignPoint::new(vec![i as f64 / 10.0], 1)).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let r = adaptive_refine(&start, 10, &[1, 2, 3], 0.05, |p| Ok(vec![1.0; p.len()]), &mut rng).unwrap();
        assert_eq!(r.points.len(), 10);
        assert_eq!(r.proposals, 10 - r.retained);
        // Every accepted candidate takes the first seed tried.
        assert!(r.points[r.retained..].iter().all(|p| p.seed == 1));
    }

    #[test]
    fn single_heavy_point_is_densified() {
        let start: Vec<DesignPoint> = (0..8).map(|i| DesignPoint::new(vec![i as f64 / 8.0], 1)).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let r = adaptive_refine(
            &start,
            8,
            &[1, 2],
            0.05,
            |p| Ok(p.iter().map(|q| if q.x[0] == 0.25 { 1.0 } else if start.contains(q) { 0.0 } else { 0.5 }).collect()),
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.retained, 1);
        assert_eq!(r.points[0].x, vec![0.25]);
        assert_eq!(r.points.len(), 8);
        let keys: HashSet<_> = r.points.iter().map(DesignPoint::key).collect();
        assert_eq!(keys.len(), 8);
    }

    #[test]
    fn zero_acceptance_reports_progress_failure() {
        let start = vec![DesignPoint::new(vec![0.5], 1)];
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let res = adaptive_refine(
            &start,
            3,
            &[1],
            0.05,
            |p| Ok(p.iter().map(|q| if q.x[0] == 0.5 { 1.0 } else { 0.0 }).collect()),
            &mut rng,
        );
        assert!(matches!(res, Err(Error::Progress(_))));
    }

    #[test]
    fn adaptive_grid_with_emulator() {
        let emu = StubEmulator { mean: |p| (p.x[0] - 0.3).powi(2) * 10.0 + p.seed as f64 * 0.1, var: 0.05 };
        let mut ds = Dataset::new();
        ds.append(vec![DesignPoint::new(vec![0.3], 1)], vec![1.0], 0).unwrap();
        ds.append(vec![DesignPoint::new(vec![0.8], 2)], vec![5.0], 0).unwrap();
        ds.restandardize(1e-12).unwrap();
        let ctx = ctx_for(&emu, &ds, 3);
        let mut g = AdaptiveGrid::new(GridConfig::new(1, 3, 40).unwrap());
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..3 {
            let grid = g.sample(&ctx, &mut rng).unwrap();
            assert_eq!(grid.len(), 40);
            for p in &grid.points {
                p.validate(3).unwrap();
            }
            let keys: HashSet<_> = grid.points.iter().map(DesignPoint::key).collect();
            assert_eq!(keys.len(), 40);
        }
    }

    #[test]
    fn reflection_stays_in_unit_interval() {
        for v in [-2.7, -0.3, 0.0, 0.4, 1.0, 1.3, 3.9] {
            let r = reflect_unit(v);
            assert!((0.0..=1.0).contains(&r), "{v} -> {r}");
        }
        assert!((reflect_unit(1.2) - 0.8).abs() < 1e-15);
        assert!((reflect_unit(-0.2) - 0.2).abs() < 1e-15);
    }

    fn check(points: &[DesignPoint], m: usize, d: usize, k: usize) -> std::result::Result<(), TestCaseError> {
        prop_assert_eq!(points.len(), m);
        let keys: HashSet<_> = points.iter().map(|p| p.key()).collect();
        prop_assert_eq!(keys.len(), m);
        for p in points {
            prop_assert_eq!(p.dim(), d);
            prop_assert!(p.validate(k).is_ok());
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn refinement_is_exactly_m_distinct_valid_points(
            m in 1usize..60,
            k in 1usize..6,
            d in 1usize..4,
            nstart in 1usize..50,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let start = lhs_with_cycled_seeds(nstart, d, k, &mut rng).unwrap();
            let seeds: Vec<u32> = (1..=k as u32).collect();
            let lik = |pts: &[DesignPoint]| -> Result<Vec<f64>> {
                Ok(pts.iter().map(|p| 0.05 + p.seed as f64 * p.x.iter().sum::<f64>()).collect())
            };
            let r = adaptive_refine(&start, m, &seeds, DEFAULT_PROPOSAL_STEP, lik, &mut rng).unwrap();
            check(&r.points, m, d, k)?;
            prop_assert!(r.retained <= m.min(nstart));
        }

        #[test]
        fn lhs_grid_is_exactly_m_valid_points(m in 1usize..200, k in 1usize..10, d in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let g = LhsGrid::new(GridConfig::new(d, k, m).unwrap()).draw(k, &mut rng).unwrap();
            prop_assert_eq!(g.len(), m);
            for p in &g.points {
                prop_assert!(p.validate(k).is_ok());
            }
        }
    }
}
