//! Emulators: the fit / predict / sample contract and Gaussian-process implementations.
//!
//! Two GP flavours share one implementation:
//! - the baseline GP uses only the continuous coordinates and ignores the seed column;
//! - the seed-product GP multiplies the continuous kernel by a unit-diagonal index
//!   kernel over seed ids.
//!
//! Hyperparameters maximize the log marginal likelihood
//! `-½ yᵀ(K+gI)⁻¹y - ½ log|K+gI| - (n/2) log 2π` with a zero prior mean, using
//! multi-start projected L-BFGS in log space (the seed loadings stay in linear space).

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataspace::{latin_hypercube, DesignPoint};
use crate::error::{Error, Result};
use crate::kernel::{
    cholesky_with_jitter, default_rank, gram, ContinuousKernel, JointKernel, KernelFamily,
    SeedKernel, LENGTHSCALE_BOUNDS, VARIANCE_BOUNDS,
};
use crate::optim::{minimize, BoxBounds, LbfgsOptions};

pub const NUGGET_FLOOR: f64 = 1e-8;
pub const NUGGET_CEILING: f64 = 10.0;
/// Smallest seed nugget reachable by the log-space parameterization.
pub const SEED_NUGGET_FLOOR: f64 = 1e-6;
pub const STATE_FORMAT_VERSION: u32 = 1;

const SQRT5: f64 = 2.236_067_977_499_79;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Predictive mean, marginal variances and (optionally) the joint covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub cov: Option<DMatrix<f64>>,
}

/// Anything that can be trained on design points and queried for a posterior.
pub trait Emulator: Send + Sync {
    fn name(&self) -> &str;

    /// Trains on `x` / `y` (standardized objective). `nseeds` is the current seed-space size.
    fn fit(&mut self, x: &[DesignPoint], y: &[f64], nseeds: usize, rng: &mut dyn RngCore) -> Result<()>;

    fn is_fitted(&self) -> bool;

    fn predict(&self, x: &[DesignPoint], with_cov: bool) -> Result<PosteriorSummary>;

    /// `size × m` matrix of joint posterior draws at `x`.
    fn sample(&self, x: &[DesignPoint], size: usize, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        let post = self.predict(x, true)?;
        let cov = post.cov.expect("predict(with_cov = true) returns a covariance");
        sample_mvn(&post.mean, &cov, size, rng)
    }

    /// Text snapshot of the fitted state, if the emulator supports one.
    fn state_json(&self) -> Option<String> {
        None
    }
}

/// Draws `size` samples from `N(mean, cov)` through a jittered Cholesky factor.
pub fn sample_mvn(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    size: usize,
    rng: &mut dyn RngCore,
) -> Result<DMatrix<f64>> {
    let m = mean.len();
    if cov.nrows() != m || cov.ncols() != m {
        return Err(Error::invalid("covariance shape does not match mean"));
    }
    let maxdiag = cov.diagonal().iter().fold(0.0f64, |a, b| a.max(*b));
    let (chol, _) = cholesky_with_jitter(cov, 1e-10 * maxdiag.max(1e-2))?;
    let l = chol.l();
    let mut out = DMatrix::zeros(size, m);
    let mut z = DVector::zeros(m);
    for s in 0..size {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(rng);
        }
        let draw = &l * &z;
        for i in 0..m {
            out[(s, i)] = mean[i] + draw[i];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum NuggetMode {
    /// Estimated jointly with the kernel hyperparameters, floored at 1e-8.
    Estimate,
    Fixed(f64),
}

/// GP hyperparameters in natural units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lengthscales: Vec<f64>,
    pub variance: f64,
    pub nugget: f64,
    /// Raw (unnormalized) index-kernel loadings, one row per seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_loadings: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_nuggets: Option<Vec<f64>>,
}

impl Hyperparameters {
    pub fn kernel(&self, family: KernelFamily) -> Result<JointKernel> {
        let cont = ContinuousKernel::new(family, self.lengthscales.clone(), self.variance)?;
        match (&self.seed_loadings, &self.seed_nuggets) {
            (Some(rows), Some(v)) => {
                let k = rows.len();
                let q = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != q) {
                    return Err(Error::invalid("ragged seed loading rows"));
                }
                let b = DMatrix::from_fn(k, q, |i, j| rows[i][j]);
                Ok(JointKernel::product(cont, SeedKernel::new(b, v.clone())?))
            }
            (None, None) => Ok(JointKernel::baseline(cont)),
            _ => Err(Error::invalid("seed loadings and seed nuggets must be given together")),
        }
    }

    fn seed_kernel(&self) -> Option<SeedKernel> {
        let rows = self.seed_loadings.as_ref()?;
        let v = self.seed_nuggets.as_ref()?;
        let q = rows.first()?.len();
        SeedKernel::new(DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]), v.clone()).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub family: KernelFamily,
    /// Multiply by a seed index kernel; `false` gives the seed-blind baseline.
    pub seed_kernel: bool,
    /// Index-kernel rank; `None` means `min(2, k)`.
    pub rank: Option<usize>,
    pub n_starts: usize,
    pub nugget: NuggetMode,
    /// Skip optimization and use these hyperparameters.
    pub fixed: Option<Hyperparameters>,
    /// Add the nugget to predictive variances (observation noise).
    pub include_noise: bool,
    /// Also start the optimizer from the previous fit's optimum.
    pub warm_start: bool,
    pub max_iter: usize,
}

impl GpConfig {
    pub fn baseline() -> Self {
        GpConfig {
            family: KernelFamily::Matern52,
            seed_kernel: false,
            rank: None,
            n_starts: 5,
            nugget: NuggetMode::Estimate,
            fixed: None,
            include_noise: false,
            warm_start: true,
            max_iter: 200,
        }
    }

    pub fn seed_product() -> Self {
        GpConfig {
            seed_kernel: true,
            ..Self::baseline()
        }
    }

    pub fn with_fixed(mut self, hp: Hyperparameters) -> Self {
        self.fixed = Some(hp);
        self
    }
}

/// Packing of hyperparameters into the optimizer's coordinate vector:
/// `[ln ℓ_1..ln ℓ_d, ln σ², (ln g), B row-major (k·q), ln v_1..ln v_k]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamLayout {
    pub d: usize,
    pub k: usize,
    pub q: usize,
    pub seed: bool,
    pub fixed_nugget: Option<f64>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.d + 1 + self.nugget_len() + if self.seed { self.k * self.q + self.k } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn nugget_len(&self) -> usize {
        usize::from(self.fixed_nugget.is_none())
    }

    fn b_offset(&self) -> usize {
        self.d + 1 + self.nugget_len()
    }

    fn v_offset(&self) -> usize {
        self.b_offset() + self.k * self.q
    }

    pub fn bounds(&self) -> BoxBounds {
        let mut lo = vec![LENGTHSCALE_BOUNDS.0.ln(); self.d];
        let mut hi = vec![LENGTHSCALE_BOUNDS.1.ln(); self.d];
        lo.push(VARIANCE_BOUNDS.0.ln());
        hi.push(VARIANCE_BOUNDS.1.ln());
        if self.fixed_nugget.is_none() {
            lo.push(NUGGET_FLOOR.ln());
            hi.push(NUGGET_CEILING.ln());
        }
        if self.seed {
            lo.extend(std::iter::repeat_n(-1.0, self.k * self.q));
            hi.extend(std::iter::repeat_n(1.0, self.k * self.q));
            lo.extend(std::iter::repeat_n(SEED_NUGGET_FLOOR.ln(), self.k));
            hi.extend(std::iter::repeat_n(crate::kernel::SEED_NUGGET_BOUNDS.1.ln(), self.k));
        }
        BoxBounds::new(lo, hi)
    }

    pub fn unpack(&self, theta: &[f64]) -> Hyperparameters {
        // exp(ln(bound)) can land an ulp outside the bound.
        let lengthscales = theta[..self.d]
            .iter()
            .map(|t| t.exp().clamp(LENGTHSCALE_BOUNDS.0, LENGTHSCALE_BOUNDS.1))
            .collect();
        let variance = theta[self.d].exp().clamp(VARIANCE_BOUNDS.0, VARIANCE_BOUNDS.1);
        let nugget = match self.fixed_nugget {
            Some(g) => g,
            None => theta[self.d + 1].exp().clamp(NUGGET_FLOOR, NUGGET_CEILING),
        };
        let (seed_loadings, seed_nuggets) = if self.seed {
            let b0 = self.b_offset();
            let rows = (0..self.k)
                .map(|i| theta[b0 + i * self.q..b0 + (i + 1) * self.q].to_vec())
                .collect();
            let v0 = self.v_offset();
            let v = theta[v0..v0 + self.k].iter().map(|t| t.exp()).collect();
            (Some(rows), Some(v))
        } else {
            (None, None)
        };
        Hyperparameters {
            lengthscales,
            variance,
            nugget,
            seed_loadings,
            seed_nuggets,
        }
    }

    /// Inverse of [`unpack`](Self::unpack); values are clamped into the box.
    pub fn pack(&self, hp: &Hyperparameters) -> Result<Vec<f64>> {
        if hp.lengthscales.len() != self.d {
            return Err(Error::invalid("lengthscale count does not match dimension"));
        }
        let mut theta: Vec<f64> = hp.lengthscales.iter().map(|l| l.ln()).collect();
        theta.push(hp.variance.ln());
        if self.fixed_nugget.is_none() {
            theta.push(hp.nugget.max(NUGGET_FLOOR).ln());
        }
        if self.seed {
            let rows = hp
                .seed_loadings
                .as_ref()
                .ok_or_else(|| Error::invalid("missing seed loadings"))?;
            let v = hp
                .seed_nuggets
                .as_ref()
                .ok_or_else(|| Error::invalid("missing seed nuggets"))?;
            if rows.len() != self.k || v.len() != self.k || rows.iter().any(|r| r.len() != self.q) {
                return Err(Error::invalid("seed kernel shape does not match layout"));
            }
            // Row scale is irrelevant after normalization; bring rows into [-1, 1].
            for r in rows {
                let m = r.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                let s = if m > 1.0 { m } else { 1.0 };
                theta.extend(r.iter().map(|b| b / s));
            }
            theta.extend(v.iter().map(|x| x.max(SEED_NUGGET_FLOOR).ln()));
        }
        self.bounds().project(&mut theta);
        Ok(theta)
    }
}

/// The marginal-likelihood objective for one training set.
pub struct FitProblem {
    layout: ParamLayout,
    family: KernelFamily,
    y: DVector<f64>,
    sqdiff: Vec<DMatrix<f64>>,
    seeds: Vec<usize>,
}

impl FitProblem {
    pub fn new(x: &[DesignPoint], y: &[f64], nseeds: usize, config: &GpConfig) -> Result<Self> {
        validate_training(x, y, nseeds, config.seed_kernel)?;
        let d = x[0].dim();
        let n = x.len();
        let q = config.rank.unwrap_or_else(|| default_rank(nseeds)).max(1);
        let fixed_nugget = match config.nugget {
            NuggetMode::Estimate => None,
            NuggetMode::Fixed(g) => {
                if !(g >= NUGGET_FLOOR) {
                    return Err(Error::invalid(format!("fixed nugget {g} below floor {NUGGET_FLOOR}")));
                }
                Some(g)
            }
        };
        let layout = ParamLayout {
            d,
            k: nseeds,
            q,
            seed: config.seed_kernel,
            fixed_nugget,
        };
        let sqdiff = (0..d)
            .map(|j| {
                DMatrix::from_fn(n, n, |a, b| {
                    let z = x[a].x[j] - x[b].x[j];
                    z * z
                })
            })
            .collect();
        Ok(FitProblem {
            layout,
            family: config.family,
            y: DVector::from_column_slice(y),
            sqdiff,
            seeds: x.iter().map(|p| p.seed as usize - 1).collect(),
        })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn bounds(&self) -> BoxBounds {
        self.layout.bounds()
    }

    /// Log marginal likelihood at `theta`; `-inf` if the covariance is not positive definite.
    pub fn lml(&self, theta: &[f64]) -> f64 {
        self.evaluate(theta, false).map_or(f64::NEG_INFINITY, |(l, _)| l)
    }

    /// Log marginal likelihood and its gradient with respect to `theta`.
    pub fn lml_grad(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        self.evaluate(theta, true)
    }

    fn evaluate(&self, theta: &[f64], want_grad: bool) -> Option<(f64, Vec<f64>)> {
        let lay = &self.layout;
        let n = self.y.len();
        let hp = lay.unpack(theta);
        let ls2: Vec<f64> = hp.lengthscales.iter().map(|l| l * l).collect();

        let mut s2: DMatrix<f64> = DMatrix::zeros(n, n);
        for (sq, l2) in self.sqdiff.iter().zip(&ls2) {
            s2.zip_apply(sq, |a, b| *a += b / l2);
        }
        let profile = s2.map(|v| match self.family {
            KernelFamily::Matern52 => crate::kernel::matern52_profile(v.sqrt()),
            KernelFamily::SquaredExponential => (-0.5 * v).exp(),
        });
        let kc = &profile * hp.variance;

        let seed_kernel = if lay.seed { hp.seed_kernel() } else { None };
        let ks = seed_kernel.as_ref().map(|sk| {
            let m = sk.matrix();
            DMatrix::from_fn(n, n, |a, b| m[(self.seeds[a], self.seeds[b])])
        });
        let mut k = match &ks {
            Some(ks) => kc.component_mul(ks),
            None => kc.clone(),
        };
        for i in 0..n {
            k[(i, i)] += hp.nugget;
        }

        let chol = nalgebra::Cholesky::new(k)?;
        let alpha = chol.solve(&self.y);
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let lml = -0.5 * self.y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * LN_2PI;
        if !lml.is_finite() {
            return None;
        }
        if !want_grad {
            return Some((lml, Vec::new()));
        }

        // dLML/dθ = ½ tr(W dK/dθ), W = ααᵀ - K⁻¹.
        let kinv = cholesky_inverse(chol.l_dirty());
        let w = &alpha * alpha.transpose() - kinv;
        let wks = match &ks {
            Some(ks) => w.component_mul(ks),
            None => w.clone(),
        };
        let mut grad = vec![0.0; lay.len()];

        let dbase = match self.family {
            KernelFamily::Matern52 => s2.map(|v| {
                let s = v.sqrt();
                (5.0 / 3.0) * (1.0 + SQRT5 * s) * (-SQRT5 * s).exp()
            }),
            KernelFamily::SquaredExponential => profile.clone(),
        };
        let wd = wks.component_mul(&dbase);
        for j in 0..lay.d {
            grad[j] = 0.5 * hp.variance * wd.dot(&self.sqdiff[j]) / ls2[j];
        }
        grad[lay.d] = 0.5 * wks.dot(&kc);
        if lay.fixed_nugget.is_none() {
            grad[lay.d + 1] = 0.5 * hp.nugget * w.trace();
        }

        if let Some(sk) = &seed_kernel {
            let kk = lay.k;
            let mut qm: DMatrix<f64> = DMatrix::zeros(kk, kk);
            for b in 0..n {
                for a in 0..n {
                    qm[(self.seeds[a], self.seeds[b])] += w[(a, b)] * kc[(a, b)];
                }
            }
            let bn = sk.loadings();
            let corr = sk.correlation();
            let raw = sk.loadings_raw();
            let b0 = lay.b_offset();
            for i in 0..kk {
                let norm = raw.row(i).norm();
                if norm == 0.0 {
                    continue;
                }
                for l in 0..lay.q {
                    let mut acc = 0.0;
                    for j in 0..kk {
                        if j != i {
                            acc += qm[(i, j)] * (bn[(j, l)] - bn[(i, l)] * corr[(i, j)]);
                        }
                    }
                    grad[b0 + i * lay.q + l] = acc / norm;
                }
            }
            let v0 = lay.v_offset();
            for (r, v) in sk.nuggets().iter().enumerate() {
                grad[v0 + r] = 0.5 * qm[(r, r)] * v;
            }
        }
        Some((lml, grad))
    }
}

/// Dot product with four partial sums, which the compiler can vectorize.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `(L Lᵀ)⁻¹` from the lower factor `L`; the upper triangle of `l` is ignored.
fn cholesky_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let ls = l.as_slice();
    let mut li = DMatrix::<f64>::zeros(n, n);
    for (j, x) in li.as_mut_slice().chunks_exact_mut(n).enumerate() {
        x[j] = 1.0;
        for k in j..n {
            let xk = x[k] / ls[k * n + k];
            x[k] = xk;
            if xk != 0.0 {
                let lk = &ls[k * n + k + 1..(k + 1) * n];
                for (xi, li) in x[k + 1..].iter_mut().zip(lk) {
                    *xi -= xk * li;
                }
            }
        }
    }
    let mut out = DMatrix::<f64>::zeros(n, n);
    let s = li.as_slice();
    for b in 0..n {
        let cb = &s[b * n..(b + 1) * n];
        for a in 0..=b {
            let ca = &s[a * n..(a + 1) * n];
            let v = dot4(&ca[b..], &cb[b..]);
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}

fn validate_training(x: &[DesignPoint], y: &[f64], nseeds: usize, seed_kernel: bool) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("{} inputs but {} outputs", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("a GP fit needs at least 2 points"));
    }
    if let Some(v) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite training output {v}")));
    }
    let d = x[0].dim();
    if d == 0 {
        return Err(Error::invalid("points need at least one coordinate"));
    }
    for p in x {
        if p.dim() != d {
            return Err(Error::invalid("training points differ in dimension"));
        }
        if seed_kernel {
            p.validate(nseeds)?;
        } else if p.x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("training coordinate outside [0,1]"));
        }
    }
    Ok(())
}

/// SHA-256 over the bit patterns of points and values, as lowercase hex.
pub fn training_digest(x: &[DesignPoint], y: &[f64]) -> String {
    let mut h = Sha256::new();
    for (p, v) in x.iter().zip(y) {
        for c in &p.x {
            h.update(c.to_bits().to_le_bytes());
        }
        h.update(p.seed.to_le_bytes());
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
struct Fitted {
    hp: Hyperparameters,
    theta: Vec<f64>,
    kernel: JointKernel,
    nseeds: usize,
    jitter: f64,
    l: DMatrix<f64>,
    alpha: DVector<f64>,
    x: Vec<DesignPoint>,
    y: Vec<f64>,
    lml: f64,
}

/// Serializable snapshot: hyperparameters plus a digest of the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpState {
    pub format_version: u32,
    pub emulator: String,
    pub family: KernelFamily,
    pub nseeds: usize,
    pub hyperparameters: Hyperparameters,
    pub log_marginal_likelihood: f64,
    pub n_train: usize,
    pub train_digest: String,
}

/// Gaussian-process emulator (baseline or seed-product, per [`GpConfig::seed_kernel`]).
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    config: GpConfig,
    fitted: Option<Fitted>,
    previous: Option<Hyperparameters>,
}

impl GaussianProcess {
    pub fn new(config: GpConfig) -> Self {
        GaussianProcess {
            config,
            fitted: None,
            previous: None,
        }
    }

    pub fn baseline() -> Self {
        Self::new(GpConfig::baseline())
    }

    pub fn seed_product() -> Self {
        Self::new(GpConfig::seed_product())
    }

    pub fn config(&self) -> &GpConfig {
        &self.config
    }

    pub fn hyperparameters(&self) -> Option<&Hyperparameters> {
        self.fitted.as_ref().map(|f| &f.hp)
    }

    /// Optimizer coordinates of the fitted hyperparameters.
    pub fn theta(&self) -> Option<&[f64]> {
        self.fitted.as_ref().map(|f| f.theta.as_slice())
    }

    pub fn kernel(&self) -> Option<&JointKernel> {
        self.fitted.as_ref().map(|f| &f.kernel)
    }

    pub fn log_marginal_likelihood(&self) -> Option<f64> {
        self.fitted.as_ref().map(|f| f.lml)
    }

    /// Extra diagonal added on top of the nugget to get a factorization (usually 0).
    pub fn jitter(&self) -> Option<f64> {
        self.fitted.as_ref().map(|f| f.jitter)
    }

    /// Lower Cholesky factor of the training covariance `K + (g + jitter) I`.
    pub fn cholesky_factor(&self) -> Option<&DMatrix<f64>> {
        self.fitted.as_ref().map(|f| &f.l)
    }

    /// Rebuilds a fitted model from a snapshot and the data it was trained on.
    pub fn from_state(
        mut config: GpConfig,
        state: &GpState,
        x: &[DesignPoint],
        y: &[f64],
    ) -> Result<Self> {
        if state.format_version != STATE_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported emulator state version {}",
                state.format_version
            )));
        }
        if training_digest(x, y) != state.train_digest {
            return Err(Error::invalid("training data does not match the state digest"));
        }
        config.family = state.family;
        config.seed_kernel = state.hyperparameters.seed_loadings.is_some();
        config.fixed = Some(state.hyperparameters.clone());
        let mut gp = GaussianProcess::new(config);
        // Fixed hyperparameters: the stream is never drawn from.
        let mut unused = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(0);
        gp.fit(x, y, state.nseeds, &mut unused)?;
        Ok(gp)
    }

    pub fn state(&self) -> Result<GpState> {
        let f = self
            .fitted
            .as_ref()
            .ok_or_else(|| Error::State("emulator has not been fitted".into()))?;
        Ok(GpState {
            format_version: STATE_FORMAT_VERSION,
            emulator: self.name().to_string(),
            family: self.config.family,
            nseeds: f.nseeds,
            hyperparameters: f.hp.clone(),
            log_marginal_likelihood: f.lml,
            n_train: f.x.len(),
            train_digest: training_digest(&f.x, &f.y),
        })
    }

    fn warm_start(&self, layout: &ParamLayout) -> Option<Vec<f64>> {
        if !self.config.warm_start {
            return None;
        }
        let prev = self.previous.as_ref()?;
        let mut hp = prev.clone();
        if layout.seed {
            let sk = prev.seed_kernel()?;
            if sk.rank() != layout.q || sk.nseeds() > layout.k {
                return None;
            }
            let grown = sk.grow(layout.k).ok()?;
            let raw = grown.loadings_raw();
            hp.seed_loadings = Some(
                (0..raw.nrows())
                    .map(|i| raw.row(i).iter().copied().collect())
                    .collect(),
            );
            hp.seed_nuggets = Some(grown.nuggets().to_vec());
        }
        layout.pack(&hp).ok()
    }

    fn optimize(&self, problem: &FitProblem, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let layout = problem.layout();
        let bounds = layout.bounds();
        let mut starts = Vec::new();
        if let Some(w) = self.warm_start(&layout) {
            starts.push(w);
        }
        if self.config.n_starts > 0 {
            let design = latin_hypercube(self.config.n_starts, layout.len(), rng)?;
            for u in design {
                starts.push(
                    u.iter()
                        .enumerate()
                        .map(|(i, u)| bounds.lower[i] + u * (bounds.upper[i] - bounds.lower[i]))
                        .collect(),
                );
            }
        }
        if starts.is_empty() {
            return Err(Error::invalid("hyperparameter search needs at least one start"));
        }
        let opts = LbfgsOptions {
            max_iter: self.config.max_iter,
            ..LbfgsOptions::default()
        };
        let results: Vec<(f64, Vec<f64>)> = starts
            .par_iter()
            .map(|x0| {
                let m = minimize(
                    |t| match problem.lml_grad(t) {
                        Some((l, g)) => (-l, g.into_iter().map(|v| -v).collect()),
                        None => (f64::INFINITY, vec![0.0; t.len()]),
                    },
                    x0,
                    &bounds,
                    opts,
                );
                (m.f, m.x)
            })
            .collect();
        let mut best: Option<&(f64, Vec<f64>)> = None;
        for r in &results {
            if r.0.is_finite() && best.is_none_or(|b| r.0 < b.0) {
                best = Some(r);
            }
        }
        best.map(|b| b.1.clone()).ok_or_else(|| Error::NumericalFailure {
            what: "no hyperparameter start produced a positive-definite covariance".into(),
            jitter: NUGGET_FLOOR,
        })
    }

    fn ensure_fitted(&self) -> Result<&Fitted> {
        self.fitted
            .as_ref()
            .ok_or_else(|| Error::State("emulator has not been fitted".into()))
    }
}

impl Emulator for GaussianProcess {
    fn name(&self) -> &str {
        if self.config.seed_kernel {
            "seed-product-gp"
        } else {
            "baseline-gp"
        }
    }

    fn fit(&mut self, x: &[DesignPoint], y: &[f64], nseeds: usize, rng: &mut dyn RngCore) -> Result<()> {
        let problem = FitProblem::new(x, y, nseeds, &self.config)?;
        let layout = problem.layout();
        let theta = match &self.config.fixed {
            Some(hp) => {
                if layout.seed
                    && hp.seed_loadings.as_ref().is_some_and(|r| r.len() != nseeds)
                {
                    return Err(Error::invalid("fixed seed kernel size does not match nseeds"));
                }
                let fixed_layout = ParamLayout {
                    q: hp
                        .seed_loadings
                        .as_ref()
                        .and_then(|r| r.first())
                        .map_or(layout.q, Vec::len),
                    fixed_nugget: Some(hp.nugget),
                    ..layout
                };
                let t = fixed_layout.pack(hp)?;
                self.fitted = Some(build_fitted(hp.clone(), t, self.config.family, nseeds, x, y)?);
                return Ok(());
            }
            None => self.optimize(&problem, rng)?,
        };
        let hp = layout.unpack(&theta);
        self.fitted = Some(build_fitted(hp.clone(), theta, self.config.family, nseeds, x, y)?);
        self.previous = Some(hp);
        Ok(())
    }

    fn is_fitted(&self) -> bool {
        self.fitted.is_some()
    }

    fn predict(&self, xnew: &[DesignPoint], with_cov: bool) -> Result<PosteriorSummary> {
        let f = self.ensure_fitted()?;
        if xnew.is_empty() {
            return Err(Error::invalid("no prediction points"));
        }
        if let Some(p) = xnew.iter().find(|p| p.x.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::invalid(format!("prediction point {:?} outside [0,1]", p.x)));
        }
        let kx = f.kernel.cross(&f.x, xnew)?;
        let mean = kx.tr_mul(&f.alpha);
        let v = f
            .l
            .solve_lower_triangular(&kx)
            .ok_or_else(|| Error::NumericalFailure {
                what: "triangular solve in predict".into(),
                jitter: f.jitter,
            })?;
        let noise = if self.config.include_noise { f.hp.nugget } else { 0.0 };
        let var = DVector::from_iterator(
            xnew.len(),
            xnew.iter().enumerate().map(|(i, p)| {
                (f.kernel.prior_variance(p) - v.column(i).norm_squared()).max(0.0) + noise
            }),
        );
        let cov = if with_cov {
            let mut c = f.kernel.cross(xnew, xnew)? - v.tr_mul(&v);
            let m = c.nrows();
            for i in 0..m {
                for j in 0..i {
                    let s = 0.5 * (c[(i, j)] + c[(j, i)]);
                    c[(i, j)] = s;
                    c[(j, i)] = s;
                }
                c[(i, i)] = var[i];
            }
            Some(c)
        } else {
            None
        };
        Ok(PosteriorSummary { mean, var, cov })
    }

    fn state_json(&self) -> Option<String> {
        self.state().ok().and_then(|s| serde_json::to_string(&s).ok())
    }
}

fn build_fitted(
    hp: Hyperparameters,
    theta: Vec<f64>,
    family: KernelFamily,
    nseeds: usize,
    x: &[DesignPoint],
    y: &[f64],
) -> Result<Fitted> {
    if !(hp.nugget >= NUGGET_FLOOR) {
        return Err(Error::invalid(format!("nugget {} below floor {NUGGET_FLOOR}", hp.nugget)));
    }
    let kernel = hp.kernel(family)?;
    if let Some(sk) = &kernel.seed {
        if sk.nseeds() != nseeds {
            return Err(Error::invalid("seed kernel size does not match nseeds"));
        }
    }
    let g = gram(x, &kernel, hp.nugget)?;
    let (chol, jitter) = cholesky_with_jitter(&g, 0.0)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let l = chol.l();
    let n = y.len() as f64;
    let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let lml = -0.5 * yv.dot(&alpha) - 0.5 * logdet - 0.5 * n * LN_2PI;
    Ok(Fitted {
        hp,
        theta,
        kernel,
        nseeds,
        jitter,
        l,
        alpha,
        x: x.to_vec(),
        y: y.to_vec(),
        lml,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn pt(x: f64, r: u32) -> DesignPoint {
        DesignPoint::new(vec![x], r)
    }

    fn fixed_baseline(ls: f64, var: f64, g: f64) -> GaussianProcess {
        GaussianProcess::new(GpConfig::baseline().with_fixed(Hyperparameters {
            lengthscales: vec![ls],
            variance: var,
            nugget: g,
            seed_loadings: None,
            seed_nuggets: None,
        }))
    }

    fn toy_data(n: usize, seed: u64) -> (Vec<DesignPoint>, Vec<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x: Vec<DesignPoint> = (0..n)
            .map(|_| pt(rng.random::<f64>(), rng.random_range(1..=3)))
            .collect();
        let y = x
            .iter()
            .map(|p| (6.0 * p.x[0]).sin() + 0.3 * p.seed as f64 + 0.05 * rng.random::<f64>())
            .collect();
        (x, y)
    }

    #[test]
    fn predict_before_fit_is_state_error() {
        let gp = GaussianProcess::baseline();
        assert!(matches!(gp.predict(&[pt(0.1, 1)], false), Err(Error::State(_))));
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(matches!(gp.sample(&[pt(0.1, 1)], 2, &mut rng), Err(Error::State(_))));
    }

    #[test]
    fn single_point_is_rejected() {
        let mut gp = GaussianProcess::baseline();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(matches!(
            gp.fit(&[pt(0.1, 1)], &[1.0], 1, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn two_point_lml_closed_form() {
        let (ls, var, g) = (0.3, 1.7, 1e-3);
        let x = [pt(0.2, 1), pt(0.45, 1)];
        let y = [0.8, -0.4];
        let mut gp = fixed_baseline(ls, var, g);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        gp.fit(&x, &y, 1, &mut rng).unwrap();

        let s: f64 = 0.25 / ls;
        let k12 = var * (1.0 + 5f64.sqrt() * s + 5.0 * s * s / 3.0) * (-(5f64.sqrt()) * s).exp();
        let (a, b, c) = (var + g, k12, var + g);
        let det = a * c - b * b;
        // [a b; b c]^-1 = [c -b; -b a] / det
        let quad = (c * y[0] * y[0] - 2.0 * b * y[0] * y[1] + a * y[1] * y[1]) / det;
        let expected = -0.5 * quad - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln();
        assert!((gp.log_marginal_likelihood().unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn one_point_prediction_matches_hand_solution() {
        let (ls, var, g) = (0.4, 0.9, 1e-2);
        let mut gp = fixed_baseline(ls, var, g);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        // Duplicated observation: K^-1 [1,1] = [1,1] / (2 var + g).
        gp.fit(&[pt(0.1, 1), pt(0.1, 1)], &[1.3, 1.3], 1, &mut rng).unwrap();
        let post = gp.predict(&[pt(0.35, 1)], false).unwrap();
        let k = crate::kernel::matern52(&[0.35], &[0.1], &[ls], var).unwrap();
        let expected = 2.0 * k / (2.0 * var + g) * 1.3;
        assert!((post.mean[0] - expected).abs() < 1e-12);

        // A second point ~90 lengthscales away decouples, leaving the 1x1 solve.
        let problem_x = [pt(0.1, 1), pt(0.999, 1)];
        let mut far = fixed_baseline(0.01, var, g);
        far.fit(&problem_x, &[1.3, 0.0], 1, &mut rng).unwrap();
        let post = far.predict(&[pt(0.105, 1)], false).unwrap();
        let k = crate::kernel::matern52(&[0.105], &[0.1], &[0.01], var).unwrap();
        assert!((post.mean[0] - k / (var + g) * 1.3).abs() < 1e-12);
    }

    #[test]
    fn interpolates_and_reverts_to_prior() {
        let x: Vec<DesignPoint> = (0..10).map(|i| pt(i as f64 / 30.0, 1)).collect();
        let y: Vec<f64> = x.iter().map(|p| (5.0 * p.x[0]).cos()).collect();
        let mut gp = fixed_baseline(0.02, 1.0, NUGGET_FLOOR);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        gp.fit(&x, &y, 1, &mut rng).unwrap();
        let post = gp.predict(&x, false).unwrap();
        for (m, t) in post.mean.iter().zip(&y) {
            assert!((m - t).abs() < 1e-5);
        }
        // 0.3 / 0.02 > 10 lengthscales from every training input.
        let far = gp.predict(&[pt(0.6, 1), pt(1.0, 1)], false).unwrap();
        for i in 0..2 {
            assert!(far.mean[i].abs() <= 1e-3);
            assert!((far.var[i] - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn prediction_is_linear_in_targets() {
        let (x, y1) = toy_data(12, 4);
        let y2: Vec<f64> = x.iter().map(|p| p.x[0] * p.x[0]).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let hp = Hyperparameters {
            lengthscales: vec![0.2],
            variance: 1.4,
            nugget: 1e-4,
            seed_loadings: Some(vec![vec![1.0, 0.2], vec![0.3, 0.9], vec![-0.5, 0.5]]),
            seed_nuggets: Some(vec![0.1, 0.0, 0.3]),
        };
        let xs: Vec<DesignPoint> = (0..7).map(|i| pt(i as f64 / 6.0, 1 + i % 3)).collect();
        let predict = |y: &[f64], rng: &mut ChaCha20Rng| {
            let mut gp = GaussianProcess::new(GpConfig::seed_product().with_fixed(hp.clone()));
            gp.fit(&x, y, 3, rng).unwrap();
            gp.predict(&xs, false).unwrap().mean
        };
        let (a, b) = (2.5, -0.7);
        let combo: Vec<f64> = y1.iter().zip(&y2).map(|(u, v)| a * u + b * v).collect();
        let lhs = predict(&combo, &mut rng);
        let rhs = predict(&y1, &mut rng) * a + predict(&y2, &mut rng) * b;
        assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn posterior_variance_below_prior() {
        let (x, y) = toy_data(15, 8);
        let mut gp = GaussianProcess::seed_product();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        gp.fit(&x, &y, 3, &mut rng).unwrap();
        let kern = gp.kernel().unwrap().clone();
        let xs: Vec<DesignPoint> = (0..60).map(|i| pt(i as f64 / 59.0, 1 + (i % 3) as u32)).collect();
        let post = gp.predict(&xs, true).unwrap();
        let cov = post.cov.unwrap();
        for (i, p) in xs.iter().enumerate() {
            assert!(post.var[i] <= kern.prior_variance(p) + 1e-10);
            assert!(cov[(i, i)] >= -1e-10);
            for j in 0..xs.len() {
                assert!((cov[(i, j)] - cov[(j, i)]).abs() <= 1e-12);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn prediction_linearity_holds_for_any_targets(
            y1 in proptest::collection::vec(-3.0f64..3.0, 8),
            y2 in proptest::collection::vec(-3.0f64..3.0, 8),
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let x: Vec<DesignPoint> = (0..8).map(|i| pt(i as f64 / 7.0, 1 + (i % 2) as u32)).collect();
            let hp = Hyperparameters {
                lengthscales: vec![0.3],
                variance: 1.0,
                nugget: 1e-6,
                seed_loadings: Some(vec![vec![1.0], vec![0.6]]),
                seed_nuggets: Some(vec![0.05, 0.05]),
            };
            let xs: Vec<DesignPoint> = (0..5).map(|i| pt(0.1 + i as f64 / 5.0, 1 + (i % 2) as u32)).collect();
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            let mut predict = |y: &[f64]| {
                let mut gp = GaussianProcess::new(GpConfig::seed_product().with_fixed(hp.clone()));
                gp.fit(&x, y, 2, &mut rng).unwrap();
                gp.predict(&xs, false).unwrap()
            };
            let combo: Vec<f64> = y1.iter().zip(&y2).map(|(u, v)| a * u + b * v).collect();
            let lhs = predict(&combo);
            let (p1, p2) = (predict(&y1), predict(&y2));
            let rhs = &p1.mean * a + &p2.mean * b;
            let scale = 1.0 + a.abs() + b.abs();
            proptest::prop_assert!((&lhs.mean - rhs).amax() <= 1e-10 * scale * 3.0);
            for i in 0..xs.len() {
                proptest::prop_assert!(lhs.var[i] <= hp.variance * (1.0 + 0.05) + 1e-10);
            }
        }
    }

    #[test]
    fn baseline_ignores_seed_labels() {
        let (x, y) = toy_data(10, 3);
        let permuted: Vec<DesignPoint> = x
            .iter()
            .map(|p| DesignPoint::new(p.x.clone(), [0, 3, 1, 2][p.seed as usize]))
            .collect();
        let mut a = GaussianProcess::baseline();
        let mut b = GaussianProcess::baseline();
        a.fit(&x, &y, 3, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        b.fit(&permuted, &y, 3, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let xs = [pt(0.3, 1), pt(0.7, 2)];
        assert_eq!(a.predict(&xs, true).unwrap(), b.predict(&xs, true).unwrap());
    }

    #[test]
    fn seed_product_is_relabeling_equivariant() {
        let (x, y) = toy_data(12, 6);
        let perm = [0usize, 3, 1, 2]; // old id -> new id
        let rows = vec![vec![1.0, 0.2], vec![0.3, 0.9], vec![-0.5, 0.5]];
        let v = vec![0.1, 0.0, 0.3];
        let mut rows_p = vec![vec![]; 3];
        let mut v_p = vec![0.0; 3];
        for old in 1..=3 {
            rows_p[perm[old] - 1] = rows[old - 1].clone();
            v_p[perm[old] - 1] = v[old - 1];
        }
        let hp = |r: Vec<Vec<f64>>, v: Vec<f64>| Hyperparameters {
            lengthscales: vec![0.3],
            variance: 1.1,
            nugget: 1e-3,
            seed_loadings: Some(r),
            seed_nuggets: Some(v),
        };
        let relabel = |p: &DesignPoint| DesignPoint::new(p.x.clone(), perm[p.seed as usize] as u32);
        let xp: Vec<DesignPoint> = x.iter().map(relabel).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut a = GaussianProcess::new(GpConfig::seed_product().with_fixed(hp(rows, v)));
        let mut b = GaussianProcess::new(GpConfig::seed_product().with_fixed(hp(rows_p, v_p)));
        a.fit(&x, &y, 3, &mut rng).unwrap();
        b.fit(&xp, &y, 3, &mut rng).unwrap();
        let xs = vec![pt(0.2, 1), pt(0.5, 2), pt(0.9, 3)];
        let xsp: Vec<DesignPoint> = xs.iter().map(relabel).collect();
        let pa = a.predict(&xs, true).unwrap();
        let pb = b.predict(&xsp, true).unwrap();
        assert!((pa.mean - pb.mean).amax() < 1e-10);
        assert!((pa.cov.unwrap() - pb.cov.unwrap()).amax() < 1e-10);
    }

    #[test]
    fn cholesky_inverse_matches_nalgebra() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for n in [1, 2, 7, 30] {
            let a = DMatrix::<f64>::from_fn(n, n + 3, |_, _| rng.random::<f64>() - 0.5);
            let k = &a * a.transpose() + DMatrix::<f64>::identity(n, n) * 0.1;
            let chol = nalgebra::Cholesky::new(k.clone()).unwrap();
            let ours = cholesky_inverse(chol.l_dirty());
            let theirs = chol.inverse();
            assert!((&ours - &theirs).abs().max() < 1e-10 * theirs.abs().max());
            assert!((&ours * &k - DMatrix::<f64>::identity(n, n)).abs().max() < 1e-9);
        }
    }

    fn fd_check(problem: &FitProblem, theta: &[f64], tol: f64) {
        let (_, g) = problem.lml_grad(theta).unwrap();
        // Smaller steps lose to roundoff when the nugget is tiny.
        let h = 1e-4;
        for i in 0..theta.len() {
            let mut up = theta.to_vec();
            let mut dn = theta.to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd = (problem.lml(&up) - problem.lml(&dn)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= tol * (1.0 + fd.abs()),
                "param {i}: analytic {} vs fd {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (x, y) = toy_data(14, 21);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for family in [KernelFamily::Matern52, KernelFamily::SquaredExponential] {
            for cfg in [GpConfig::baseline(), GpConfig::seed_product()] {
                let cfg = GpConfig { family, ..cfg };
                let problem = FitProblem::new(&x, &y, 3, &cfg).unwrap();
                let b = problem.bounds();
                for _ in 0..3 {
                    let theta: Vec<f64> = (0..b.dim())
                        .map(|i| {
                            let (lo, hi) = (b.lower[i], b.upper[i]);
                            lo + (0.2 + 0.6 * rng.random::<f64>()) * (hi - lo)
                        })
                        .collect();
                    fd_check(&problem, &theta, 1e-5);
                }
            }
        }
    }

    #[test]
    fn fit_is_deterministic_and_beats_starts() {
        let (x, y) = toy_data(20, 5);
        let fit = |seed: u64| {
            let mut gp = GaussianProcess::seed_product();
            gp.fit(&x, &y, 3, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
            gp
        };
        let a = fit(17);
        let b = fit(17);
        let ta = a.theta().unwrap();
        let tb = b.theta().unwrap();
        assert!(ta.iter().zip(tb).all(|(u, v)| u.to_bits() == v.to_bits()));

        // Reproduce the start points and check none beats the optimum.
        let problem = FitProblem::new(&x, &y, 3, a.config()).unwrap();
        let bounds = problem.bounds();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let design = latin_hypercube(5, problem.layout().len(), &mut rng).unwrap();
        let best = a.log_marginal_likelihood().unwrap();
        for u in design {
            let t: Vec<f64> = u
                .iter()
                .enumerate()
                .map(|(i, u)| bounds.lower[i] + u * (bounds.upper[i] - bounds.lower[i]))
                .collect();
            assert!(best >= problem.lml(&t) - 1e-9);
        }
    }

    #[test]
    fn optimum_is_stationary() {
        let x: Vec<DesignPoint> = (0..12).map(|i| pt(i as f64 / 11.0, 1)).collect();
        let y: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, p)| (4.0 * p.x[0]).sin() + 0.1 * ((i * 7 % 5) as f64 - 2.0))
            .collect();
        let mut gp = GaussianProcess::baseline();
        gp.fit(&x, &y, 1, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let problem = FitProblem::new(&x, &y, 1, gp.config()).unwrap();
        let bounds = problem.bounds();
        let theta = gp.theta().unwrap().to_vec();
        let h = 1e-5;
        for i in 0..theta.len() {
            if bounds.at_bound(&theta, i) {
                continue;
            }
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (problem.lml(&up) - problem.lml(&dn)) / (2.0 * h);
            assert!(fd.abs() <= 1e-3, "param {i} gradient {fd}");
        }
    }

    #[test]
    fn stored_factor_reproduces_gram() {
        let (x, y) = toy_data(25, 12);
        let mut gp = GaussianProcess::seed_product();
        gp.fit(&x, &y, 3, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let hp = gp.hyperparameters().unwrap();
        assert!(hp.nugget >= NUGGET_FLOOR);
        let g = gram(&x, gp.kernel().unwrap(), hp.nugget + gp.jitter().unwrap()).unwrap();
        let l = gp.cholesky_factor().unwrap();
        let rel = (l * l.transpose() - &g).norm() / g.norm();
        assert!(rel <= 1e-8);
    }

    #[test]
    fn degenerate_samples_equal_mean() {
        let x: Vec<DesignPoint> = (0..6).map(|i| pt(i as f64 / 5.0, 1)).collect();
        let y: Vec<f64> = x.iter().map(|p| p.x[0] - 0.5).collect();
        let mut gp = fixed_baseline(0.3, 1.0, NUGGET_FLOOR);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        gp.fit(&x, &y, 1, &mut rng).unwrap();
        let draws = gp.sample(&x, 50, &mut rng).unwrap();
        let mean = gp.predict(&x, false).unwrap().mean;
        for s in 0..50 {
            for i in 0..6 {
                assert!((draws[(s, i)] - mean[i]).abs() < 1e-3);
            }
        }
        let a = gp.sample(&x[..3], 4, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        let b = gp.sample(&x[..3], 4, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn state_roundtrip_restores_predictions() {
        let (x, y) = toy_data(15, 2);
        let mut gp = GaussianProcess::seed_product();
        gp.fit(&x, &y, 3, &mut ChaCha20Rng::seed_from_u64(4)).unwrap();
        let json = gp.state_json().unwrap();
        let state: GpState = serde_json::from_str(&json).unwrap();
        let restored = GaussianProcess::from_state(GpConfig::seed_product(), &state, &x, &y).unwrap();
        let xs = [pt(0.25, 2), pt(0.75, 3)];
        let a = gp.predict(&xs, true).unwrap();
        let b = restored.predict(&xs, true).unwrap();
        assert!((a.mean - b.mean).amax() < 1e-12);

        let mut y_bad = y.clone();
        y_bad[0] += 1.0;
        assert!(GaussianProcess::from_state(GpConfig::seed_product(), &state, &x, &y_bad).is_err());
    }
}
