//! Concrete distribution families: the non-orthogonal counterexample, the
//! single-index Gaussian family, and random factorized specs.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::compose::{build_factorized, CompositionSpec};
use crate::discrete::MaskPartition;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::linalg::{logistic, symmetrize};

/// `A = [[1, −a, 0, 0], [0, 1, 0, 0], [0, 0, 1, −a], [0, 0, 0, 1]]`.
pub fn counterexample_matrix(a: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[1.0, -a, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -a, 0.0, 0.0, 0.0, 1.0],
    )
}

fn unit(i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(4);
    v[i] = 1.0;
    v
}

/// Four-dimensional pair of conditionals whose composition is projective in the
/// transformed coordinates `z = A x` but whose score deltas are not orthogonal in `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Counterexample {
    pub a: f64,
    pub tau: f64,
}

impl Counterexample {
    pub fn new(a: f64, tau: f64) -> Result<Self> {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::Input(format!("counterexample needs 0 < a <= 1, got {a}")));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Input(format!("counterexample needs tau > 0, got {tau}")));
        }
        Ok(Self { a, tau })
    }

    pub fn transform(&self) -> DMatrix<f64> {
        counterexample_matrix(self.a)
    }

    /// `τ² (AᵀA)⁻¹`, the covariance shared by every component.
    pub fn base_cov(&self) -> DMatrix<f64> {
        let a = self.transform();
        let ata = a.transpose() * &a;
        symmetrize(&(ata.try_inverse().expect("A is unit upper-triangular") * (self.tau * self.tau)))
    }

    /// `σ² I + τ² (AᵀA)⁻¹`.
    pub fn noised_cov(&self, sigma: f64) -> DMatrix<f64> {
        self.base_cov() + DMatrix::identity(4, 4) * (sigma * sigma)
    }

    fn pair(&self, m0: DVector<f64>, m1: DVector<f64>) -> GaussianMixture {
        let c = self.base_cov();
        GaussianMixture::new(vec![(0.5, m0, c.clone()), (0.5, m1, c)]).expect("valid counterexample mixture")
    }

    pub fn p0(&self) -> GaussianMixture {
        self.pair(unit(0), unit(2))
    }

    pub fn p1(&self) -> GaussianMixture {
        self.pair(unit(0) * self.a + unit(1), unit(2) * self.a + unit(3))
    }

    pub fn background(&self) -> GaussianMixture {
        GaussianMixture::gaussian(DVector::zeros(4), self.base_cov()).expect("valid background")
    }

    pub fn spec(&self) -> CompositionSpec {
        CompositionSpec::new(self.background(), vec![self.p0(), self.p1()]).expect("matching dims")
    }

    /// Means of the composed mixture, in the order its components are produced.
    pub fn composed_means(&self) -> [DVector<f64>; 4] {
        let a = self.a;
        [
            unit(0) * (1.0 + a) + unit(1),
            unit(0) + unit(2) * a + unit(3),
            unit(0) * a + unit(1) + unit(2),
            unit(2) * (1.0 + a) + unit(3),
        ]
    }

    /// Cross-term exponent `a σ² / ((a² + 2) σ² τ² + σ⁴ + τ⁴)` at noise level `sigma`.
    pub fn xi(&self, sigma: f64) -> f64 {
        let (a, s2, t2) = (self.a, sigma * sigma, self.tau * self.tau);
        a * s2 / ((a * a + 2.0) * s2 * t2 + s2 * s2 + t2 * t2)
    }

    /// Weight of each starved cluster, `½ S(−ξ)`.
    pub fn epsilon(&self, sigma: f64) -> f64 {
        0.5 * logistic(-self.xi(sigma))
    }

    /// `log ε`, finite even when `ε` underflows.
    pub fn log_epsilon(&self, sigma: f64) -> f64 {
        let xi = self.xi(sigma);
        // log S(−ξ) = −softplus(ξ)
        let softplus = if xi > 30.0 { xi + (-xi).exp().ln_1p() } else { xi.exp().ln_1p() };
        -std::f64::consts::LN_2 - softplus
    }

    /// `[½ − ε, ε, ε, ½ − ε]`.
    pub fn composed_weights(&self, sigma: f64) -> [f64; 4] {
        let e = self.epsilon(sigma);
        [0.5 - e, e, e, 0.5 - e]
    }

    /// Closed-form composition of the noised conditionals at level `sigma`.
    pub fn composed_at(&self, sigma: f64) -> Result<GaussianMixture> {
        let cov = self.noised_cov(sigma);
        let w = self.composed_weights(sigma);
        let parts = self
            .composed_means()
            .into_iter()
            .zip(w)
            .filter(|(_, w)| *w > 0.0)
            .map(|(m, w)| (w, m, cov.clone()))
            .collect::<Vec<_>>();
        // Renormalize in case tiny weights underflowed to zero.
        let total: f64 = parts.iter().map(|p| p.0).sum();
        GaussianMixture::new(parts.into_iter().map(|(w, m, c)| (w / total, m, c)).collect())
    }

    /// The clean composition (uniform weights) noised to level `sigma`.
    pub fn ideal_path_at(&self, sigma: f64) -> Result<GaussianMixture> {
        self.composed_at(0.0)?.noise_ve(sigma)
    }
}

/// Single-index Gaussian family: `p_i = N(e_i, σ² I)`, `p_b = N(0, σ² I)` and the
/// unconditional average `p_u = (1/n) Σ p_i`.
#[derive(Debug, Clone)]
pub struct SingleIndexFamily {
    pub n: usize,
    pub sigma: f64,
    pub conditionals: Vec<GaussianMixture>,
    pub empty_background: GaussianMixture,
    pub unconditional: GaussianMixture,
}

impl SingleIndexFamily {
    pub fn new(n: usize, sigma: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Input("need at least one conditional".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::Input(format!("sigma must be positive, got {sigma}")));
        }
        let var = sigma * sigma;
        let means: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                e
            })
            .collect();
        let conditionals = means.iter().map(|m| GaussianMixture::isotropic(m, var)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n,
            sigma,
            conditionals,
            empty_background: GaussianMixture::isotropic(&vec![0.0; n], var)?,
            unconditional: GaussianMixture::isotropic_mixture(&vec![1.0 / n as f64; n], &means, var)?,
        })
    }

    /// Composition with the unconditional average as background.
    pub fn bayes_spec(&self) -> CompositionSpec {
        CompositionSpec::new(self.unconditional.clone(), self.conditionals.clone()).expect("matching dims")
    }

    /// Composition with the zero-mean ("empty") background.
    pub fn empty_spec(&self) -> CompositionSpec {
        CompositionSpec::new(self.empty_background.clone(), self.conditionals.clone()).expect("matching dims")
    }
}

fn random_spd<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = &g * g.transpose() * (0.3 / d as f64) + DMatrix::identity(d, d) * 0.2;
    (&s + s.transpose()) * 0.5
}

fn random_mixture<R: Rng>(rng: &mut R, d: usize, cov: Option<&DMatrix<f64>>, spread: f64) -> Result<GaussianMixture> {
    let k = rng.random_range(1..=3);
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let parts = raw
        .iter()
        .map(|w| {
            let mean = DVector::from_fn(d, |_, _| rng.random_range(-spread..spread));
            let c = match cov {
                Some(c) => c.clone(),
                None => random_spd(rng, d),
            };
            (w / total, mean, c)
        })
        .collect();
    GaussianMixture::new(parts)
}

/// Random mask partition of `dim` coordinates into `k` nonempty blocks plus a
/// (possibly empty) background part.
pub fn random_masks<R: Rng>(rng: &mut R, dim: usize, k: usize) -> Result<MaskPartition> {
    if k > dim {
        return Err(Error::Input(format!("{k} blocks do not fit in dimension {dim}")));
    }
    let mut coords: Vec<usize> = (0..dim).collect();
    coords.shuffle(rng);
    let mut blocks: Vec<Vec<usize>> = coords[..k].iter().map(|&c| vec![c]).collect();
    let mut background = Vec::new();
    for &c in &coords[k..] {
        let slot = rng.random_range(0..=k);
        if slot == k {
            background.push(c);
        } else {
            blocks[slot].push(c);
        }
    }
    background.sort_unstable();
    blocks.iter_mut().for_each(|b| b.sort_unstable());
    MaskPartition::new(dim, background, blocks)
}

/// Random factorized spec with `k` conditional blocks.
///
/// With `shared_cov` every component uses one block-diagonal covariance and the
/// background is a single zero-mean Gaussian, so the closed-form composition applies.
/// Otherwise every block law is an arbitrary small mixture.
pub fn random_factorized_spec<R: Rng>(rng: &mut R, dim: usize, k: usize, shared_cov: bool) -> Result<CompositionSpec> {
    let masks = random_masks(rng, dim, k)?;
    let block_law = |rng: &mut R, d: usize, is_background: bool| -> Result<GaussianMixture> {
        if shared_cov {
            let c = random_spd(rng, d);
            if is_background {
                GaussianMixture::gaussian(DVector::zeros(d), c)
            } else {
                random_mixture(rng, d, Some(&c), 2.0)
            }
        } else {
            random_mixture(rng, d, None, if is_background { 0.5 } else { 2.0 })
        }
    };
    let bg_part = if masks.background.is_empty() {
        None
    } else {
        Some(block_law(rng, masks.background.len(), true)?)
    };
    let mut bg_blocks = Vec::with_capacity(k);
    let mut cond_blocks = Vec::with_capacity(k);
    for b in &masks.blocks {
        let bb = block_law(rng, b.len(), true)?;
        let cb = if shared_cov {
            // Conditional components must share the background block covariance.
            let c = bb.components()[0].cov().clone();
            random_mixture(rng, b.len(), Some(&c), 2.0)?
        } else {
            block_law(rng, b.len(), false)?
        };
        bg_blocks.push(bb);
        cond_blocks.push(cb);
    }
    build_factorized(&masks, bg_part.as_ref(), &bg_blocks, &cond_blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::compose_gmm_closed;
    use crate::gmm::LinearMap;
    use crate::linalg::max_abs_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counterexample_is_axis_aligned_after_transform() {
        let ce = Counterexample::new(0.7, 0.1).unwrap();
        let a = LinearMap::new(ce.transform()).unwrap();
        let z0 = ce.p0().pushforward(&a).unwrap();
        let z1 = ce.p1().pushforward(&a).unwrap();
        let t2 = DMatrix::identity(4, 4) * 0.01;
        for c in z0.components().iter().chain(z1.components()) {
            assert!(max_abs_diff(c.cov(), &t2) < 1e-14);
        }
        assert_eq!(z0.means(), vec![unit(0), unit(2)]);
        assert!((z1.means()[0].clone() - unit(1)).amax() < 1e-15);
        assert!((z1.means()[1].clone() - unit(3)).amax() < 1e-15);
    }

    #[test]
    fn xi_at_matched_noise() {
        for tau in [0.02, 0.1, 0.5] {
            let ce = Counterexample::new(1.0, tau).unwrap();
            let expect = 1.0 / (5.0 * tau * tau);
            assert!((ce.xi(tau) - expect).abs() < 1e-12 * expect);
            assert_eq!(ce.xi(0.0), 0.0);
            assert_eq!(ce.composed_weights(0.0), [0.25; 4]);
        }
        let ce = Counterexample::new(1.0, 0.02).unwrap();
        assert!(ce.epsilon(0.02) < 1e-100);
        assert!((ce.log_epsilon(0.02) - (-std::f64::consts::LN_2 - 500.0)).abs() < 1e-9);
        assert!(Counterexample::new(0.0, 0.1).is_err());
        assert!(Counterexample::new(1.0, 0.0).is_err());
    }

    #[test]
    fn composed_at_agrees_with_closed_form() {
        let ce = Counterexample::new(0.5, 0.3).unwrap();
        for sigma in [0.0, 0.2, 0.6] {
            let closed = compose_gmm_closed(&ce.spec().noise_ve(sigma).unwrap()).unwrap().mixture;
            assert!(closed.parameter_distance(&ce.composed_at(sigma).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn single_index_family_shapes() {
        let f = SingleIndexFamily::new(3, 0.2).unwrap();
        assert_eq!(f.conditionals.len(), 3);
        assert_eq!(f.unconditional.num_components(), 3);
        assert!(SingleIndexFamily::new(0, 0.2).is_err());
    }

    #[test]
    fn random_masks_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let d = rng.random_range(1..=8);
            let k = rng.random_range(0..=d.min(4));
            let m = random_masks(&mut rng, d, k).unwrap();
            assert_eq!(m.num_blocks(), k);
            assert!(m.blocks.iter().all(|b| !b.is_empty()));
        }
        assert!(random_masks(&mut rng, 2, 3).is_err());
    }
}
