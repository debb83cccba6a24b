//! Exact multivariate Gaussian mixtures: density, score, noising, linear
//! pushforward, coordinate marginals, sampling and moments.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, log_sum_exp};
use crate::samples::{Provenance, SampleSet};
use crate::schedule::DiffusionSchedule;

/// Largest supported ambient dimension.
pub const MAX_DIM: usize = 32;

/// One weighted Gaussian with cached precision and normalizer.
#[derive(Debug, Clone)]
pub struct Component {
    weight: f64,
    log_weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    precision: Vec<f64>,
    log_norm: f64,
    logdet: f64,
}

impl Component {
    fn new(weight: f64, log_weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        check_dim(dim, cov.nrows())?;
        linalg::validate_spd(&cov, "component")?;
        let cov = linalg::symmetrize(&cov);
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Input("covariance Cholesky failed".into()))?
            .l();
        let (prec, logdet) = linalg::spd_inverse_logdet(&cov)?;
        let log_norm = -0.5 * (dim as f64) * (2.0 * PI).ln() - 0.5 * logdet;
        Ok(Self {
            weight,
            log_weight,
            mean,
            cov,
            chol,
            precision: prec.transpose().as_slice().to_vec(),
            log_norm,
            logdet,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn log_weight(&self) -> f64 {
        self.log_weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_det_cov(&self) -> f64 {
        self.logdet
    }

    /// Precision matrix, row-major.
    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    /// Writes `P(μ − x)` into `grad` and returns `log w + log N(x; μ, Σ)`.
    #[inline]
    fn eval(&self, x: &[f64], diff: &mut [f64], grad: &mut [f64]) -> f64 {
        let d = x.len();
        for i in 0..d {
            diff[i] = self.mean[i] - x[i];
        }
        let mut quad = 0.0;
        for i in 0..d {
            let row = &self.precision[i * d..(i + 1) * d];
            let g: f64 = row.iter().zip(&diff[..d]).map(|(p, v)| p * v).sum();
            grad[i] = g;
            quad += diff[i] * g;
        }
        self.log_weight + self.log_norm - 0.5 * quad
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GmmJson", into = "GmmJson")]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ComponentJson {
    w: f64,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GmmJson {
    dim: usize,
    components: Vec<ComponentJson>,
}

impl TryFrom<GmmJson> for GaussianMixture {
    type Error = Error;

    fn try_from(j: GmmJson) -> Result<Self> {
        let parts = j
            .components
            .into_iter()
            .map(|c| {
                let d = c.mean.len();
                if c.cov.len() != d || c.cov.iter().any(|r| r.len() != d) {
                    return Err(Error::Input("covariance shape does not match mean".into()));
                }
                let cov = DMatrix::from_row_slice(d, d, &c.cov.concat());
                Ok((c.w, DVector::from_vec(c.mean), cov))
            })
            .collect::<Result<Vec<_>>>()?;
        let g = GaussianMixture::new(parts)?;
        check_dim(j.dim, g.dim)?;
        Ok(g)
    }
}

impl From<GaussianMixture> for GmmJson {
    fn from(g: GaussianMixture) -> Self {
        GmmJson {
            dim: g.dim,
            components: g
                .components
                .iter()
                .map(|c| ComponentJson {
                    w: c.weight(),
                    mean: c.mean.iter().copied().collect(),
                    cov: (0..g.dim)
                        .map(|i| (0..g.dim).map(|j| c.cov[(i, j)]).collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

impl GaussianMixture {
    /// Builds a mixture from `(weight, mean, covariance)` triples.
    pub fn new(parts: Vec<(f64, DVector<f64>, DMatrix<f64>)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Input("mixture needs at least one component".into()));
        }
        let total: f64 = parts.iter().map(|p| p.0).sum();
        if parts.iter().any(|p| !(p.0 > 0.0) || !p.0.is_finite()) {
            return Err(Error::Input("mixture weights must be strictly positive".into()));
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!("mixture weights sum to {total}, not 1")));
        }
        let dim = parts[0].1.len();
        Self::check_dim_range(dim)?;
        let components = parts
            .into_iter()
            .map(|(w, m, c)| {
                check_dim(dim, m.len())?;
                Component::new(w, w.ln(), m, c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, components })
    }

    fn check_dim_range(dim: usize) -> Result<()> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Input(format!("dimension {dim} outside 1..={MAX_DIM}")));
        }
        Ok(())
    }

    /// Builds a mixture from unnormalized log-weights; normalization is exact in log space.
    pub fn from_log_weights(parts: Vec<(f64, DVector<f64>, DMatrix<f64>)>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("mixture needs at least one component".into()))?;
        let dim = first.1.len();
        Self::check_dim_range(dim)?;
        let lws: Vec<f64> = parts.iter().map(|p| p.0).collect();
        if lws.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Input("log-weights must be finite or -inf".into()));
        }
        let lz = log_sum_exp(&lws);
        if !lz.is_finite() {
            return Err(Error::Input("all mixture weights vanish".into()));
        }
        let mut components = Vec::with_capacity(parts.len());
        for (lw, mean, cov) in parts {
            check_dim(dim, mean.len())?;
            if lw == f64::NEG_INFINITY {
                continue;
            }
            components.push(Component::new((lw - lz).exp(), lw - lz, mean, cov)?);
        }
        Ok(Self { dim, components })
    }

    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![(1.0, mean, cov)])
    }

    /// `N(mean, var · I)`.
    pub fn isotropic(mean: &[f64], var: f64) -> Result<Self> {
        let d = mean.len();
        Self::gaussian(DVector::from_column_slice(mean), DMatrix::identity(d, d) * var)
    }

    /// Mixture of isotropic Gaussians with common variance.
    pub fn isotropic_mixture(weights: &[f64], means: &[Vec<f64>], var: f64) -> Result<Self> {
        if weights.len() != means.len() {
            return Err(Error::Input("weights and means differ in length".into()));
        }
        let d = means.first().map(|m| m.len()).unwrap_or(0);
        Self::new(
            weights
                .iter()
                .zip(means)
                .map(|(w, m)| (*w, DVector::from_column_slice(m), DMatrix::identity(d, d) * var))
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight()).collect()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.log_weight).collect()
    }

    pub fn means(&self) -> Vec<DVector<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    fn parts(&self) -> Vec<(f64, DVector<f64>, DMatrix<f64>)> {
        self.components
            .iter()
            .map(|c| (c.log_weight, c.mean.clone(), c.cov.clone()))
            .collect()
    }

    fn rebuild<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&DVector<f64>, &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>),
    {
        let components = self
            .components
            .iter()
            .map(|c| {
                let (m, s) = f(&c.mean, &c.cov);
                Component::new(c.weight, c.log_weight, m, s)
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = components[0].mean.len();
        Self::check_dim_range(dim)?;
        Ok(Self { dim, components })
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.log_density_unchecked(x))
    }

    /// `log Σ_k w_k N(x; μ_k, Σ_k)` via log-sum-exp.
    pub fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let mut diff = [0.0; MAX_DIM];
        let mut grad = [0.0; MAX_DIM];
        let mut m = f64::NEG_INFINITY;
        let mut s = 0.0;
        for c in &self.components {
            let l = c.eval(x, &mut diff, &mut grad);
            if l > m {
                s = s * (m - l).exp() + 1.0;
                m = l;
            } else {
                s += (l - m).exp();
            }
        }
        m + s.ln()
    }

    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let mut out = vec![0.0; self.dim];
        self.score_into(x, &mut out);
        Ok(out)
    }

    /// `∇ log p(x) = Σ_k r_k(x) Σ_k⁻¹(μ_k − x)`; responsibilities accumulated
    /// in a single streaming log-sum-exp pass. Returns `log p(x)`.
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let d = self.dim;
        let mut diff = [0.0; MAX_DIM];
        let mut grad = [0.0; MAX_DIM];
        let mut m = f64::NEG_INFINITY;
        let mut s = 0.0;
        out[..d].iter_mut().for_each(|v| *v = 0.0);
        for c in &self.components {
            let l = c.eval(x, &mut diff, &mut grad);
            if l > m {
                let r = (m - l).exp();
                s = s * r + 1.0;
                for i in 0..d {
                    out[i] = out[i] * r + grad[i];
                }
                m = l;
            } else {
                let r = (l - m).exp();
                s += r;
                for i in 0..d {
                    out[i] += r * grad[i];
                }
            }
        }
        for v in out[..d].iter_mut() {
            *v /= s;
        }
        m + s.ln()
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let mut diff = [0.0; MAX_DIM];
        let mut grad = [0.0; MAX_DIM];
        let ls: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.eval(x, &mut diff, &mut grad))
            .collect();
        let lz = log_sum_exp(&ls);
        Ok(ls.iter().map(|l| (l - lz).exp()).collect())
    }

    /// Forward-diffuses to schedule time `t`.
    pub fn noise(&self, schedule: &DiffusionSchedule, t: f64) -> Result<Self> {
        schedule.check_time(t)?;
        let lvl = schedule.noise_level(t);
        self.noise_scaled(lvl.scale, lvl.sigma)
    }

    /// Variance-exploding noising: every covariance gains `sigma² I`.
    pub fn noise_ve(&self, sigma: f64) -> Result<Self> {
        self.noise_scaled(1.0, sigma)
    }

    /// Law of `scale · x + sigma · ε` for `x` from this mixture.
    pub fn noise_scaled(&self, scale: f64, sigma: f64) -> Result<Self> {
        if !(scale > 0.0) || !(sigma >= 0.0) || !scale.is_finite() || !sigma.is_finite() {
            return Err(Error::Input(format!("invalid noise level scale={scale}, sigma={sigma}")));
        }
        if scale == 1.0 && sigma == 0.0 {
            return Ok(self.clone());
        }
        let d = self.dim;
        let v = sigma * sigma;
        self.rebuild(|m, c| {
            (
                m * scale,
                c * (scale * scale) + DMatrix::identity(d, d) * v,
            )
        })
    }

    /// Pushforward under `x ↦ A x`.
    pub fn pushforward(&self, map: &LinearMap) -> Result<Self> {
        check_dim(self.dim, map.dim())?;
        let a = map.matrix();
        self.rebuild(|m, c| (a * m, linalg::symmetrize(&(a * c * a.transpose()))))
    }

    /// Restriction to the coordinates in `coords` (in the given order).
    pub fn marginal(&self, coords: &[usize]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Input("marginal needs at least one coordinate".into()));
        }
        let mut seen = vec![false; self.dim];
        for &c in coords {
            if c >= self.dim {
                return Err(Error::Input(format!("coordinate {c} out of range 0..{}", self.dim)));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Input(format!("coordinate {c} repeated")));
            }
        }
        let k = coords.len();
        self.rebuild(|m, c| {
            (
                DVector::from_iterator(k, coords.iter().map(|&i| m[i])),
                DMatrix::from_fn(k, k, |i, j| c[(coords[i], coords[j])]),
            )
        })
    }

    /// Independent product: the first factor occupies the leading coordinates.
    pub fn product(&self, other: &Self) -> Result<Self> {
        let d = self.dim + other.dim;
        if d > MAX_DIM {
            return Err(Error::Input(format!("product dimension {d} exceeds {MAX_DIM}")));
        }
        let mut parts = Vec::new();
        for a in &self.components {
            for b in &other.components {
                let mean = DVector::from_iterator(d, a.mean.iter().chain(b.mean.iter()).copied());
                let mut cov = DMatrix::zeros(d, d);
                cov.view_mut((0, 0), (self.dim, self.dim)).copy_from(&a.cov);
                cov.view_mut((self.dim, self.dim), (other.dim, other.dim)).copy_from(&b.cov);
                parts.push((a.log_weight + b.log_weight, mean, cov));
            }
        }
        Self::from_log_weights(parts)
    }

    /// Reorders coordinates: output coordinate `i` is input coordinate `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_dim(self.dim, perm.len())?;
        self.marginal(perm)
    }

    /// Draws `n` i.i.d. samples; deterministic given `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleSet> {
        if n == 0 {
            return Err(Error::Input("sample count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (labels, data) = self.sample_with_labels(n, &mut rng);
        let _ = labels;
        SampleSet::new(self.dim, data, Provenance::new("gmm_exact", seed))
    }

    /// Draws `n` samples and the component each came from.
    pub fn sample_with_labels<R: Rng>(&self, n: usize, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
        let d = self.dim;
        let cum: Vec<f64> = self
            .components
            .iter()
            .scan(0.0, |acc, c| {
                *acc += c.weight();
                Some(*acc)
            })
            .collect();
        let total = *cum.last().unwrap();
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        let mut z = vec![0.0; d];
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * total;
            let k = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
            let c = &self.components[k];
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            for i in 0..d {
                let mut acc = c.mean[i];
                for j in 0..=i {
                    acc += c.chol[(i, j)] * z[j];
                }
                data.push(acc);
            }
            labels.push(k);
        }
        (labels, data)
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        self.components
            .iter()
            .fold(DVector::zeros(self.dim), |acc, c| acc + &c.mean * c.weight())
    }

    /// Total covariance `Σ_k w_k (Σ_k + μ_k μ_kᵀ) − μ μᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean_vector();
        let second = self.components.iter().fold(DMatrix::zeros(self.dim, self.dim), |acc, c| {
            acc + (&c.cov + &c.mean * c.mean.transpose()) * c.weight()
        });
        linalg::symmetrize(&(second - &mu * mu.transpose()))
    }

    /// Largest absolute difference between component parameters (weights, means, covariances),
    /// assuming components are listed in the same order.
    pub fn parameter_distance(&self, other: &Self) -> f64 {
        if self.dim != other.dim || self.components.len() != other.components.len() {
            return f64::INFINITY;
        }
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| {
                (a.weight() - b.weight())
                    .abs()
                    .max(linalg::max_abs_diff_vec(&a.mean, &b.mean))
                    .max(linalg::max_abs_diff(&a.cov, &b.cov))
            })
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    #[allow(dead_code)]
    pub(crate) fn raw_parts(&self) -> Vec<(f64, DVector<f64>, DMatrix<f64>)> {
        self.parts()
    }
}

/// Invertible linear map `x ↦ A x`.
#[derive(Debug, Clone)]
pub struct LinearMap {
    matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
    log_abs_det: f64,
    orthogonal: bool,
}

impl LinearMap {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::Input("linear map must be a non-empty square matrix".into()));
        }
        let det = matrix.determinant();
        if !(det.abs() > 1e-12) {
            return Err(Error::Input(format!("linear map is singular (det = {det:e})")));
        }
        let inverse = matrix
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Input("linear map is not invertible".into()))?;
        let n = matrix.nrows();
        let gram = matrix.transpose() * &matrix;
        let orthogonal = linalg::max_abs_diff(&gram, &DMatrix::identity(n, n)) < 1e-10;
        Ok(Self {
            matrix,
            inverse,
            log_abs_det: det.abs().ln(),
            orthogonal,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n)).expect("identity is invertible")
    }

    /// Permutation map sending coordinate `perm[i]` to position `i`.
    pub fn permutation(perm: &[usize]) -> Result<Self> {
        let n = perm.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, &p) in perm.iter().enumerate() {
            if p >= n {
                return Err(Error::Input("permutation index out of range".into()));
            }
            m[(i, p)] = 1.0;
        }
        Self::new(m)
    }

    /// Random rotation from the QR factorization of a Gaussian matrix.
    pub fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> Self {
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = g.qr();
        let (q, r) = (qr.q(), qr.r());
        let signs = DMatrix::from_diagonal(&r.diagonal().map(|v| if v < 0.0 { -1.0 } else { 1.0 }));
        Self::new(q * signs).expect("orthogonal matrices are invertible")
    }

    /// Random well-conditioned invertible map `I + s · G`, rejecting near-singular draws.
    pub fn random_invertible<R: Rng>(n: usize, spread: f64, rng: &mut R) -> Self {
        loop {
            let g = DMatrix::from_fn(n, n, |i, j| {
                let v: f64 = rng.sample(StandardNormal);
                if i == j { 1.0 + spread * v } else { spread * v }
            });
            if let Ok(m) = Self::new(g) {
                let sv = m.matrix.clone().singular_values();
                if sv.min() > 0.2 {
                    return m;
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse_matrix(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn inverse(&self) -> Self {
        Self::new(self.inverse.clone()).expect("inverse of invertible map is invertible")
    }

    pub fn is_orthogonal(&self) -> bool {
        self.orthogonal
    }

    pub fn log_abs_det(&self) -> f64 {
        self.log_abs_det
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(x)).iter().copied().collect()
    }

    pub fn apply_inverse(&self, z: &[f64]) -> Vec<f64> {
        (&self.inverse * DVector::from_column_slice(z)).iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{counterexample_matrix as counterexample_a, Counterexample};
    use rand::Rng;

    fn naive_density(g: &GaussianMixture, x: &[f64]) -> f64 {
        let d = g.dim();
        g.components()
            .iter()
            .map(|c| {
                let diff = DVector::from_column_slice(x) - c.mean();
                let inv = c.cov().clone().try_inverse().unwrap();
                let q = (diff.transpose() * inv * &diff)[(0, 0)];
                c.weight() * (-0.5 * q).exp()
                    / ((2.0 * PI).powi(d as i32) * c.cov().determinant()).sqrt()
            })
            .sum()
    }

    fn random_gmm<R: Rng>(rng: &mut R, d: usize, k: usize) -> GaussianMixture {
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let fix = 1.0 - w[1..].iter().sum::<f64>();
        w[0] = fix;
        GaussianMixture::new(
            w.into_iter()
                .map(|wk| {
                    let mean = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
                    let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.6..0.6));
                    let cov = &b * b.transpose() + DMatrix::identity(d, d) * 0.3;
                    (wk, mean, linalg::symmetrize(&cov))
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_mode() {
        let g = GaussianMixture::isotropic(&[0.0], 1.0).unwrap();
        assert!((g.log_density(&[0.0]).unwrap() + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn symmetric_pair_matches_direct_sum() {
        let (mu, s2) = (1.3, 0.7);
        let g = GaussianMixture::isotropic_mixture(&[0.5, 0.5], &[vec![-mu], vec![mu]], s2).unwrap();
        let term = |x: f64, m: f64| (-(x - m) * (x - m) / (2.0 * s2)).exp() / (2.0 * PI * s2).sqrt();
        for x in [0.0, 0.4, -2.5, 7.0] {
            let direct = (0.5 * term(x, -mu) + 0.5 * term(x, mu)).ln();
            assert!((g.log_density(&[x]).unwrap() - direct).abs() < 1e-13);
        }
    }

    #[test]
    fn counterexample_density_matches_naive_sum() {
        let p0 = Counterexample::new(1.0, 0.02).unwrap().p0();
        let x = [1.0, 0.0, 0.0, 0.0];
        let naive = naive_density(&p0, &x).ln();
        assert!((p0.log_density(&x).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let g = GaussianMixture::isotropic(&[0.0, 0.0], 1.0).unwrap();
        assert!(matches!(g.log_density(&[0.0]), Err(Error::DimensionMismatch { .. })));
        assert!(g.score(&[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn standard_and_single_gaussian_scores() {
        let g = GaussianMixture::isotropic(&[0.0, 0.0, 0.0], 1.0).unwrap();
        let s = g.score(&[0.3, -1.2, 2.0]).unwrap();
        assert_eq!(s, vec![-0.3, 1.2, -2.0]);

        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mu = DVector::from_vec(vec![1.0, -1.0]);
        let g = GaussianMixture::gaussian(mu.clone(), cov.clone()).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.7]);
        let expect = cov.try_inverse().unwrap() * (mu - &x);
        let got = g.score(x.as_slice()).unwrap();
        assert!((got[0] - expect[0]).abs() < 1e-14 && (got[1] - expect[1]).abs() < 1e-14);
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gmms: Vec<GaussianMixture> = (0..4)
            .map(|i| random_gmm(&mut rng, 1 + i, 1 + 2 * i))
            .collect();
        gmms.push(Counterexample::new(0.6, 0.3).unwrap().p0());
        let h = 1e-5;
        for g in &gmms {
            let d = g.dim();
            for _ in 0..200 {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.5..2.5)).collect();
                let s = g.score(&x).unwrap();
                let mut fd = vec![0.0; d];
                for i in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    fd[i] = (g.log_density(&xp).unwrap() - g.log_density(&xm).unwrap()) / (2.0 * h);
                }
                let num: f64 = s.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den = linalg::norm(&s).max(1.0);
                assert!(num / den < 1e-5, "relative fd error {}", num / den);
            }
        }
    }

    #[test]
    fn ve_noise_identity_and_semigroup() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_gmm(&mut rng, 3, 3);
        let zero = g.noise_ve(0.0).unwrap();
        assert_eq!(zero.parameter_distance(&g), 0.0);
        let sched = DiffusionSchedule::ve_linear(0.0, 2.0).unwrap();
        assert_eq!(g.noise(&sched, 0.0).unwrap().parameter_distance(&g), 0.0);
        let (a, b) = (0.37, 1.21);
        let twice = g.noise_ve(a).unwrap().noise_ve(b).unwrap();
        let once = g.noise_ve((a * a + b * b).sqrt()).unwrap();
        assert!(twice.parameter_distance(&once) < 1e-14);
        assert!(g.noise(&sched, 1.5).is_err());
    }

    #[test]
    fn counterexample_noised_covariance() {
        let (a, tau) = (1.0, 0.02);
        let p0 = Counterexample::new(a, tau).unwrap().p0();
        let sigma = tau;
        let noised = p0.noise_ve(sigma).unwrap();
        let am = counterexample_a(a);
        let base = (am.transpose() * &am).try_inverse().unwrap() * (tau * tau);
        let expect = DMatrix::identity(4, 4) * (sigma * sigma) + base;
        for c in noised.components() {
            assert!(linalg::max_abs_diff(c.cov(), &expect) < 1e-15);
        }
    }

    #[test]
    fn pushforward_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_gmm(&mut rng, 3, 2);
        let id = LinearMap::identity(3);
        assert!(g.pushforward(&id).unwrap().parameter_distance(&g) < 1e-15);

        let tau = 0.02;
        let p0 = Counterexample::new(1.0, tau).unwrap().p0();
        let a = LinearMap::new(counterexample_a(1.0)).unwrap();
        assert!(!a.is_orthogonal());
        let z = p0.pushforward(&a).unwrap();
        let means = z.means();
        assert!(linalg::max_abs_diff_vec(&means[0], &DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0])) < 1e-15);
        assert!(linalg::max_abs_diff_vec(&means[1], &DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0])) < 1e-15);
        for c in z.components() {
            assert!(linalg::max_abs_diff(c.cov(), &(DMatrix::identity(4, 4) * tau * tau)) < 1e-15);
        }

        let m = LinearMap::random_invertible(3, 0.5, &mut rng);
        let back = g.pushforward(&m).unwrap().pushforward(&m.inverse()).unwrap();
        assert!(back.parameter_distance(&g) < 1e-10);

        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(LinearMap::new(sing).is_err());
    }

    #[test]
    fn pushforward_change_of_variables() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = random_gmm(&mut rng, 4, 3);
        let m = LinearMap::random_invertible(4, 0.6, &mut rng);
        let pg = g.pushforward(&m).unwrap();
        assert_eq!(pg.weights().len(), g.weights().len());
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lhs = pg.log_density(&m.apply(&x)).unwrap();
            let rhs = g.log_density(&x).unwrap() - m.log_abs_det();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn marginal_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_gmm(&mut rng, 3, 2);
        assert!(g.marginal(&[0, 1, 2]).unwrap().parameter_distance(&g) < 1e-15);
        assert!(g.marginal(&[]).is_err());
        assert!(g.marginal(&[3]).is_err());
        assert!(g.marginal(&[1, 1]).is_err());

        let tau = 0.3;
        let p = GaussianMixture::isotropic(&[1.0, 2.0], tau * tau).unwrap();
        let m = p.marginal(&[0]).unwrap();
        assert!((m.components()[0].mean()[0] - 1.0).abs() < 1e-15);
        assert!((m.components()[0].cov()[(0, 0)] - tau * tau).abs() < 1e-15);
    }

    #[test]
    fn marginal_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = random_gmm(&mut rng, 2, 3);
        let m = g.marginal(&[0]).unwrap();
        // Simpson rule over the dropped coordinate.
        let (lo, hi, n) = (-25.0, 25.0, 20_000);
        let h = (hi - lo) / n as f64;
        for y in [-1.5, 0.0, 0.8, 2.2] {
            let mut acc = 0.0;
            for i in 0..=n {
                let x1 = lo + i as f64 * h;
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * g.log_density(&[y, x1]).unwrap().exp();
            }
            let quad = acc * h / 3.0;
            let exact = m.log_density(&[y]).unwrap().exp();
            assert!((quad - exact).abs() < 1e-10 * exact.max(1e-3));
        }
    }

    #[test]
    fn marginal_commutes_with_ve_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_gmm(&mut rng, 4, 3);
        let coords = [3, 1];
        let a = g.noise_ve(0.7).unwrap().marginal(&coords).unwrap();
        let b = g.marginal(&coords).unwrap().noise_ve(0.7).unwrap();
        assert!(a.parameter_distance(&b) < 1e-15);
    }

    #[test]
    fn sampling_moments_and_determinism() {
        let n = 100_000;
        let g = GaussianMixture::isotropic(&[0.0; 4], 1.0).unwrap();
        let s = g.sample(n, 1).unwrap();
        for v in s.mean() {
            assert!(v.abs() < 0.02);
        }
        let c = s.covariance();
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((c[i * 4 + j] - e).abs() < 0.05);
            }
        }
        assert_eq!(g.sample(50, 9).unwrap(), g.sample(50, 9).unwrap());

        let two = GaussianMixture::isotropic_mixture(&[0.5, 0.5], &[vec![-3.0], vec![3.0]], 0.1).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let (labels, _) = two.sample_with_labels(n, &mut r);
        let frac = labels.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01);
    }

    #[test]
    fn mean_vectors() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let g = GaussianMixture::gaussian(DVector::from_vec(vec![3.0, -1.0]), cov).unwrap();
        assert_eq!(g.mean_vector(), DVector::from_vec(vec![3.0, -1.0]));
        let sym = GaussianMixture::isotropic_mixture(&[0.5, 0.5], &[vec![-1.0], vec![1.0]], 0.3).unwrap();
        assert!(sym.mean_vector()[0].abs() < 1e-15);
        let p0 = Counterexample::new(1.0, 0.02).unwrap().p0();
        let m = p0.mean_vector();
        assert!(linalg::max_abs_diff_vec(&m, &DVector::from_vec(vec![0.5, 0.0, 0.5, 0.0])) < 1e-15);
    }

    #[test]
    fn rejects_invalid_construction() {
        let e = DVector::from_vec(vec![0.0]);
        let i = DMatrix::identity(1, 1);
        assert!(GaussianMixture::new(vec![(0.5, e.clone(), i.clone())]).is_err());
        assert!(GaussianMixture::new(vec![(1.0, e.clone(), i.clone() * 0.0)]).is_err());
        assert!(GaussianMixture::new(vec![(1.2, e.clone(), i.clone()), (-0.2, e.clone(), i.clone())]).is_err());
        assert!(GaussianMixture::new(vec![]).is_err());
        let e2 = DVector::from_vec(vec![0.0, 0.0]);
        assert!(GaussianMixture::new(vec![(0.5, e, i.clone()), (0.5, e2, DMatrix::identity(2, 2))]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let g = random_gmm(&mut rng, 3, 2);
        let s = g.to_json().unwrap();
        let back = GaussianMixture::from_json(&s).unwrap();
        assert_eq!(back.parameter_distance(&g), 0.0);
        assert!(GaussianMixture::from_json(r#"{"dim":2,"components":[{"w":1.0,"mean":[0,0],"cov":[[1,0]]}]}"#).is_err());
    }
}
