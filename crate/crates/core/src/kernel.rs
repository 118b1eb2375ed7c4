//! Covariance functions over the joint (continuous, seed) space.
//!
//! The seed-aware covariance is a product `k_cont(x1, x2) * k_seed(r1, r2)` where
//! `k_seed(i, j) = (B Bᵀ + diag(v))_{ij}` and every row of `B` is normalized to unit
//! length, so `B Bᵀ` has a unit diagonal.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::dataspace::DesignPoint;
use crate::error::{Error, Result};

pub const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-2, 2.0);
pub const VARIANCE_BOUNDS: (f64, f64) = (1e-4, 1e2);
pub const SEED_NUGGET_BOUNDS: (f64, f64) = (0.0, 10.0);

/// Maximum number of ×10 jitter escalations before giving up on a factorization.
pub const MAX_JITTER_ESCALATIONS: usize = 5;

/// Jitter tried first when the requested jitter is zero and the matrix is not PD.
const JITTER_SEED: f64 = 1e-10;

const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Matern52,
    SquaredExponential,
}

/// Matérn-5/2 profile at scaled distance `s`.
pub fn matern52_profile(s: f64) -> f64 {
    (1.0 + SQRT5 * s + 5.0 * s * s / 3.0) * (-SQRT5 * s).exp()
}

pub fn squared_exponential_profile(s: f64) -> f64 {
    (-0.5 * s * s).exp()
}

/// Stationary kernel on the continuous coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousKernel {
    pub family: KernelFamily,
    lengthscales: Vec<f64>,
    variance: f64,
}

impl ContinuousKernel {
    pub fn new(family: KernelFamily, lengthscales: Vec<f64>, variance: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::invalid("kernel needs at least one lengthscale"));
        }
        let (lo, hi) = LENGTHSCALE_BOUNDS;
        if let Some(l) = lengthscales.iter().find(|l| !(lo..=hi).contains(*l)) {
            return Err(Error::invalid(format!("lengthscale {l} outside [{lo}, {hi}]")));
        }
        let (lo, hi) = VARIANCE_BOUNDS;
        if !(lo..=hi).contains(&variance) {
            return Err(Error::invalid(format!("variance {variance} outside [{lo}, {hi}]")));
        }
        Ok(ContinuousKernel {
            family,
            lengthscales,
            variance,
        })
    }

    pub fn matern52(lengthscales: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern52, lengthscales, variance)
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn scaled_distance(&self, x1: &[f64], x2: &[f64]) -> f64 {
        x1.iter()
            .zip(x2)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let z = (a - b) / l;
                z * z
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn profile(&self, s: f64) -> f64 {
        match self.family {
            KernelFamily::Matern52 => matern52_profile(s),
            KernelFamily::SquaredExponential => squared_exponential_profile(s),
        }
    }

    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        if x1.len() != self.dim() || x2.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point dimensions {} / {} do not match {} lengthscales",
                x1.len(),
                x2.len(),
                self.dim()
            )));
        }
        Ok(self.eval_unchecked(x1, x2))
    }

    pub(crate) fn eval_unchecked(&self, x1: &[f64], x2: &[f64]) -> f64 {
        self.variance * self.profile(self.scaled_distance(x1, x2))
    }
}

/// Matérn-5/2 covariance between two points.
pub fn matern52(x1: &[f64], x2: &[f64], lengthscales: &[f64], variance: f64) -> Result<f64> {
    ContinuousKernel::matern52(lengthscales.to_vec(), variance)?.eval(x1, x2)
}

/// Rows scaled to unit Euclidean norm. An all-zero row becomes `e_1`.
///
/// Rows already within a few ulps of unit norm are left untouched, which makes the
/// operation idempotent bit for bit.
pub fn normalize_rows(b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = b.clone();
    for mut row in out.row_iter_mut() {
        let norm = row.norm();
        if norm == 0.0 || !norm.is_finite() {
            row.fill(0.0);
            row[0] = 1.0;
        } else if (norm - 1.0).abs() > 8.0 * f64::EPSILON {
            row /= norm;
        }
    }
    out
}

/// Low-rank index kernel over seed ids `1..=k` with a unit-diagonal `B Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedKernel {
    b_raw: DMatrix<f64>,
    b: DMatrix<f64>,
    corr: DMatrix<f64>,
    v: Vec<f64>,
}

impl SeedKernel {
    pub fn new(b: DMatrix<f64>, v: Vec<f64>) -> Result<Self> {
        if b.nrows() == 0 || b.ncols() == 0 {
            return Err(Error::invalid("seed kernel needs k >= 1 and rank >= 1"));
        }
        if v.len() != b.nrows() {
            return Err(Error::invalid(format!(
                "seed nugget vector has {} entries for {} seeds",
                v.len(),
                b.nrows()
            )));
        }
        if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::invalid(format!("seed nugget {x} must be nonnegative")));
        }
        if b.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("seed loading matrix has non-finite entries"));
        }
        let normalized = normalize_rows(&b);
        let corr = &normalized * normalized.transpose();
        Ok(SeedKernel {
            b_raw: b,
            b: normalized,
            corr,
            v,
        })
    }

    /// Every seed perfectly correlated with every other (rank 1, all rows equal).
    pub fn fully_correlated(k: usize) -> Self {
        SeedKernel::new(DMatrix::from_element(k, 1, 1.0), vec![0.0; k]).expect("valid kernel")
    }

    /// Independent seeds: `B = I`, `v = 0`.
    pub fn independent(k: usize) -> Self {
        SeedKernel::new(DMatrix::identity(k, k), vec![0.0; k]).expect("valid kernel")
    }

    pub fn nseeds(&self) -> usize {
        self.b.nrows()
    }

    pub fn rank(&self) -> usize {
        self.b.ncols()
    }

    pub fn loadings_raw(&self) -> &DMatrix<f64> {
        &self.b_raw
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// `B Bᵀ` with normalized rows (unit diagonal).
    pub fn correlation(&self) -> &DMatrix<f64> {
        &self.corr
    }

    pub fn nuggets(&self) -> &[f64] {
        &self.v
    }

    /// Full `k × k` seed covariance `B Bᵀ + diag(v)`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut m = self.corr.clone();
        for (i, v) in self.v.iter().enumerate() {
            m[(i, i)] += v;
        }
        m
    }

    /// Covariance between seed ids `i` and `j` (both 1-based).
    pub fn eval(&self, i: u32, j: u32) -> Result<f64> {
        let k = self.nseeds();
        for s in [i, j] {
            if s < 1 || s as usize > k {
                return Err(Error::invalid(format!("seed id {s} outside 1..={k}")));
            }
        }
        Ok(self.eval_unchecked(i, j))
    }

    pub(crate) fn eval_unchecked(&self, i: u32, j: u32) -> f64 {
        let (a, b) = (i as usize - 1, j as usize - 1);
        let c = self.corr[(a, b)];
        if a == b {
            c + self.v[a]
        } else {
            c
        }
    }

    /// Adds seeds up to `new_k`. Each new loading row is the normalized mean of the
    /// existing normalized rows and each new nugget the mean of the existing nuggets.
    pub fn grow(&self, new_k: usize) -> Result<Self> {
        let k = self.nseeds();
        if new_k < k {
            return Err(Error::invalid("seed kernel cannot shrink"));
        }
        let q = self.rank();
        let mean_row = self.b.row_mean();
        let mean_v = self.v.iter().sum::<f64>() / k as f64;
        let mut b = self.b_raw.clone().resize_vertically(new_k, 0.0);
        for i in k..new_k {
            for c in 0..q {
                b[(i, c)] = mean_row[c];
            }
        }
        let mut v = self.v.clone();
        v.resize(new_k, mean_v);
        // Normalizing here keeps the raw rows of new seeds on the unit sphere.
        let b = {
            let mut nb = b;
            let fresh = normalize_rows(&nb.rows(k, new_k - k).into_owned());
            nb.rows_mut(k, new_k - k).copy_from(&fresh);
            nb
        };
        SeedKernel::new(b, v)
    }
}

/// Seed index covariance between ids `i` and `j`.
pub fn seed_index(i: u32, j: u32, kernel: &SeedKernel) -> Result<f64> {
    kernel.eval(i, j)
}

/// Default index-kernel rank for `k` seeds.
pub fn default_rank(k: usize) -> usize {
    k.clamp(1, 2)
}

/// Product covariance on design points. Without a seed kernel the seed column is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct JointKernel {
    pub continuous: ContinuousKernel,
    pub seed: Option<SeedKernel>,
}

impl JointKernel {
    pub fn baseline(continuous: ContinuousKernel) -> Self {
        JointKernel {
            continuous,
            seed: None,
        }
    }

    pub fn product(continuous: ContinuousKernel, seed: SeedKernel) -> Self {
        JointKernel {
            continuous,
            seed: Some(seed),
        }
    }

    pub fn check_point(&self, p: &DesignPoint) -> Result<()> {
        if p.dim() != self.continuous.dim() {
            return Err(Error::invalid(format!(
                "point has {} coordinates, kernel expects {}",
                p.dim(),
                self.continuous.dim()
            )));
        }
        if let Some(s) = &self.seed {
            if p.seed < 1 || p.seed as usize > s.nseeds() {
                return Err(Error::invalid(format!(
                    "seed id {} outside 1..={}",
                    p.seed,
                    s.nseeds()
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, p1: &DesignPoint, p2: &DesignPoint) -> Result<f64> {
        self.check_point(p1)?;
        self.check_point(p2)?;
        Ok(self.eval_unchecked(p1, p2))
    }

    pub(crate) fn eval_unchecked(&self, p1: &DesignPoint, p2: &DesignPoint) -> f64 {
        let c = self.continuous.eval_unchecked(&p1.x, &p2.x);
        match &self.seed {
            Some(s) => c * s.eval_unchecked(p1.seed, p2.seed),
            None => c,
        }
    }

    /// Prior variance at a point (diagonal of the covariance).
    pub fn prior_variance(&self, p: &DesignPoint) -> f64 {
        self.eval_unchecked(p, p)
    }

    /// Cross-covariance matrix with rows indexed by `a` and columns by `b`.
    pub fn cross(&self, a: &[DesignPoint], b: &[DesignPoint]) -> Result<DMatrix<f64>> {
        for p in a.iter().chain(b) {
            self.check_point(p)?;
        }
        Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
            self.eval_unchecked(&a[i], &b[j])
        }))
    }
}

/// Product covariance between two design points.
pub fn joint_cov(p1: &DesignPoint, p2: &DesignPoint, kernel: &JointKernel) -> Result<f64> {
    kernel.eval(p1, p2)
}

/// Gram matrix with `jitter` added on the diagonal.
pub fn gram(points: &[DesignPoint], kernel: &JointKernel, jitter: f64) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return Err(Error::invalid("gram matrix needs at least one point"));
    }
    if !(jitter >= 0.0) {
        return Err(Error::invalid("jitter must be nonnegative"));
    }
    for p in points {
        kernel.check_point(p)?;
    }
    let n = points.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval_unchecked(&points[i], &points[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
        g[(i, i)] += jitter;
    }
    Ok(g)
}

/// Cholesky factor of `m + jitter·I`, escalating the jitter by ×10 up to
/// [`MAX_JITTER_ESCALATIONS`] times. Returns the factor and the jitter that worked.
pub fn cholesky_with_jitter(m: &DMatrix<f64>, jitter: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut j = jitter;
    for attempt in 0..=MAX_JITTER_ESCALATIONS {
        if attempt > 0 {
            j = if j > 0.0 { j * 10.0 } else { JITTER_SEED };
        }
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += j;
        }
        if a.iter().any(|x| !x.is_finite()) {
            break;
        }
        if let Some(c) = Cholesky::new(a) {
            if c.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                return Ok((c, j));
            }
        }
    }
    Err(Error::NumericalFailure {
        what: format!("cholesky of {0}x{0} matrix", m.nrows()),
        jitter: j,
    })
}

/// Gram matrix plus its Cholesky factor; `jitter` is the starting diagonal inflation.
pub fn gram_cholesky(
    points: &[DesignPoint],
    kernel: &JointKernel,
    jitter: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let g = gram(points, kernel, 0.0)?;
    cholesky_with_jitter(&g, jitter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_seed_kernel(rng: &mut impl Rng, k: usize, q: usize) -> SeedKernel {
        let b = DMatrix::from_fn(k, q, |_, _| rng.random_range(-1.0..1.0));
        let v = (0..k).map(|_| rng.random_range(0.0..2.0)).collect();
        SeedKernel::new(b, v).unwrap()
    }

    fn random_points(rng: &mut impl Rng, n: usize, d: usize, k: u32) -> Vec<DesignPoint> {
        (0..n)
            .map(|_| {
                DesignPoint::new(
                    (0..d).map(|_| rng.random::<f64>()).collect(),
                    rng.random_range(1..=k),
                )
            })
            .collect()
    }

    #[test]
    fn matern_examples() {
        let v = matern52(&[0.3, 0.7], &[0.3, 0.7], &[0.2, 0.4], 2.5).unwrap();
        assert_eq!(v, 2.5);

        let a = matern52(&[0.1, 0.2], &[0.3, 0.05], &[0.3, 0.2], 1.0).unwrap();
        let b = matern52(&[0.2, 0.4], &[0.6, 0.1], &[0.6, 0.4], 1.0).unwrap();
        assert!((a - b).abs() < 1e-15);

        // s = 1 closed form, evaluated independently.
        let expected = (1.0 + 5f64.sqrt() + 5.0 / 3.0) * (-(5f64.sqrt())).exp();
        let got = matern52(&[0.0], &[0.5], &[0.5], 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.523994).abs() < 1e-6);

        assert!(matern52(&[0.0, 0.1], &[0.5], &[0.5], 1.0).is_err());
    }

    #[test]
    fn matern_is_nonincreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..=20_000 {
            let v = matern52_profile(i as f64 * 1e-3);
            assert!(v <= prev);
            prev = v;
        }
        let mut prev = f64::INFINITY;
        for i in 0..=20_000 {
            let v = squared_exponential_profile(i as f64 * 1e-3);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn seed_index_examples() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let sk = random_seed_kernel(&mut rng, 6, 2);
        for i in 1..=6 {
            let d = sk.eval(i, i).unwrap();
            assert!((d - (1.0 + sk.nuggets()[i as usize - 1])).abs() < 1e-12);
        }
        let same = SeedKernel::new(DMatrix::from_element(4, 2, 0.7), vec![0.0; 4]).unwrap();
        for i in 1..=4 {
            for j in 1..=4 {
                assert!((same.eval(i, j).unwrap() - 1.0).abs() < 1e-15);
            }
        }
        assert!(sk.eval(0, 1).is_err());
        assert!(sk.eval(1, 7).is_err());
    }

    #[test]
    fn seed_matrix_is_psd() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..50 {
            let sk = random_seed_kernel(&mut rng, 6, 2);
            let eig = SymmetricEigen::new(sk.matrix()).eigenvalues;
            assert!(eig.min() >= -1e-10);
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let b = DMatrix::from_fn(7, 3, |_, _| rng.random_range(-5.0..5.0));
            let once = normalize_rows(&b);
            let twice = normalize_rows(&once);
            assert!(once.iter().zip(twice.iter()).all(|(a, c)| a.to_bits() == c.to_bits()));
            for r in once.row_iter() {
                assert!((r.norm() - 1.0).abs() < 1e-12);
            }
        }
        let z = normalize_rows(&DMatrix::zeros(2, 2));
        assert_eq!(z[(0, 0)], 1.0);
    }

    #[test]
    fn joint_cov_examples() {
        let cont = ContinuousKernel::matern52(vec![0.3], 1.7).unwrap();
        let sk = SeedKernel::new(
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.6, 0.8, 0.0, 2.0]),
            vec![0.1, 0.2, 0.3],
        )
        .unwrap();
        let k = JointKernel::product(cont.clone(), sk.clone());
        let p = |x: f64, r: u32| DesignPoint::new(vec![x], r);
        assert!((joint_cov(&p(0.4, 2), &p(0.4, 2), &k).unwrap() - 1.7 * 1.2).abs() < 1e-12);
        assert!((joint_cov(&p(0.4, 1), &p(0.4, 2), &k).unwrap() - 1.7 * 0.6).abs() < 1e-12);
        let c = cont.eval(&[0.1], &[0.5]).unwrap();
        let s = sk.eval(2, 3).unwrap();
        assert!((joint_cov(&p(0.1, 2), &p(0.5, 3), &k).unwrap() - c * s).abs() < 1e-15);

        let ind = JointKernel::product(cont.clone(), SeedKernel::independent(3));
        for (x1, x2) in [(0.2, 0.2), (0.0, 1.0), (0.5, 0.51)] {
            assert_eq!(joint_cov(&p(x1, 1), &p(x2, 3), &ind).unwrap(), 0.0);
        }
        assert!(joint_cov(&p(0.1, 4), &p(0.1, 1), &k).is_err());

        // Baseline ignores seeds.
        let base = JointKernel::baseline(cont);
        assert_eq!(
            joint_cov(&p(0.2, 1), &p(0.3, 9), &base).unwrap(),
            joint_cov(&p(0.2, 5), &p(0.3, 2), &base).unwrap()
        );
    }

    #[test]
    fn gram_examples() {
        let cont = ContinuousKernel::matern52(vec![0.25, 0.5], 1.3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let k = JointKernel::product(cont.clone(), random_seed_kernel(&mut rng, 4, 2));

        let one = vec![DesignPoint::new(vec![0.5, 0.5], 2)];
        let g = gram(&one, &k, 1e-6).unwrap();
        assert_eq!(g[(0, 0)], joint_cov(&one[0], &one[0], &k).unwrap() + 1e-6);

        let pts = random_points(&mut rng, 20, 2, 4);
        let g = gram(&pts, &k, 0.0).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                assert!((g[(i, j)] - joint_cov(&pts[i], &pts[j], &k).unwrap()).abs() <= 1e-14);
            }
        }

        let dup_kernel = JointKernel::product(cont, SeedKernel::fully_correlated(4));
        let dup = vec![DesignPoint::new(vec![0.3, 0.3], 1); 2];
        let g0 = gram(&dup, &dup_kernel, 0.0).unwrap();
        let det = g0[(0, 0)] * g0[(1, 1)] - g0[(0, 1)] * g0[(1, 0)];
        assert!(det.abs() < 1e-14);
        let g8 = gram(&dup, &dup_kernel, 1e-8).unwrap();
        assert!(Cholesky::new(g8).is_some());

        assert!(gram(&[], &dup_kernel, 0.0).is_err());
    }

    #[test]
    fn jitter_escalation_reports_failure() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match cholesky_with_jitter(&bad, 1e-8) {
            Err(Error::NumericalFailure { jitter, .. }) => {
                assert!((jitter - 1e-3).abs() < 1e-15);
            }
            other => panic!("expected failure, got {other:?}"),
        }
        let dup = DMatrix::from_element(2, 2, 1.0);
        let (_, j) = cholesky_with_jitter(&dup, 0.0).unwrap();
        assert!(j > 0.0);
    }

    #[test]
    fn grow_appends_neutral_seed() {
        let sk = SeedKernel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            vec![0.2, 0.4],
        )
        .unwrap();
        let g = sk.grow(3).unwrap();
        assert_eq!(g.nseeds(), 3);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((g.loadings()[(2, 0)] - h).abs() < 1e-15);
        assert!((g.loadings()[(2, 1)] - h).abs() < 1e-15);
        assert!((g.nuggets()[2] - 0.3).abs() < 1e-15);
        assert_eq!(g.eval(1, 2).unwrap(), sk.eval(1, 2).unwrap());
        assert!(sk.grow(1).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_psd(seed in any::<u64>(), n in 1usize..25, k in 1usize..6) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let cont = ContinuousKernel::new(
                if seed % 2 == 0 { KernelFamily::Matern52 } else { KernelFamily::SquaredExponential },
                vec![rng.random_range(0.01..2.0), rng.random_range(0.01..2.0)],
                rng.random_range(1e-4..1e2),
            ).unwrap();
            let q = default_rank(k);
            let kern = JointKernel::product(cont, random_seed_kernel(&mut rng, k, q));
            let pts = random_points(&mut rng, n, 2, k as u32);
            for a in &pts {
                for b in &pts {
                    prop_assert_eq!(joint_cov(a, b, &kern).unwrap(), joint_cov(b, a, &kern).unwrap());
                }
            }
            let g = gram(&pts, &kern, 0.0).unwrap();
            let maxdiag = g.diagonal().max();
            let eig = SymmetricEigen::new(g).eigenvalues;
            prop_assert!(eig.min() >= -1e-8 * maxdiag);
        }
    }
}
