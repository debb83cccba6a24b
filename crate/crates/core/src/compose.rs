//! The composition operator on Gaussian-mixture scores and densities,
//! factorized-conditional constructors, and structural checks (equivariance,
//! score-delta orthogonality, mean-difference cosines).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discrete::MaskPartition;
use crate::error::{check_dim, Error, Result};
use crate::gmm::{GaussianMixture, LinearMap, MAX_DIM};
use crate::linalg::{self, log_sum_exp};
use crate::samplers::{ScoreField, ScoreModel};
use crate::schedule::{DiffusionSchedule, NoiseLevel};

/// Background plus conditionals, optionally with a mask partition and a feature map.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SpecJson", into = "SpecJson")]
pub struct CompositionSpec {
    pub background: GaussianMixture,
    pub conditionals: Vec<GaussianMixture>,
    pub masks: Option<MaskPartition>,
    pub feature_map: Option<LinearMap>,
}

#[derive(Serialize, Deserialize)]
struct SpecJson {
    background: GaussianMixture,
    conditionals: Vec<GaussianMixture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    masks: Option<MaskPartition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_map: Option<Vec<Vec<f64>>>,
}

impl TryFrom<SpecJson> for CompositionSpec {
    type Error = Error;

    fn try_from(j: SpecJson) -> Result<Self> {
        let mut spec = CompositionSpec::new(j.background, j.conditionals)?;
        if let Some(m) = j.masks {
            spec = spec.with_masks(m)?;
        }
        if let Some(rows) = j.feature_map {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(Error::Input("feature map must be square".into()));
            }
            spec = spec.with_feature_map(LinearMap::new(DMatrix::from_row_slice(n, n, &rows.concat()))?)?;
        }
        Ok(spec)
    }
}

impl From<CompositionSpec> for SpecJson {
    fn from(s: CompositionSpec) -> Self {
        SpecJson {
            background: s.background,
            conditionals: s.conditionals,
            masks: s.masks,
            feature_map: s.feature_map.map(|m| {
                let a = m.matrix();
                (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect()).collect()
            }),
        }
    }
}

impl CompositionSpec {
    pub fn new(background: GaussianMixture, conditionals: Vec<GaussianMixture>) -> Result<Self> {
        for c in &conditionals {
            check_dim(background.dim(), c.dim())?;
        }
        Ok(Self { background, conditionals, masks: None, feature_map: None })
    }

    pub fn with_masks(mut self, masks: MaskPartition) -> Result<Self> {
        MaskPartition::new(self.dim(), masks.background.clone(), masks.blocks.clone())?;
        if masks.num_blocks() != self.conditionals.len() {
            return Err(Error::Input(format!(
                "{} mask blocks for {} conditionals",
                masks.num_blocks(),
                self.conditionals.len()
            )));
        }
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn with_feature_map(mut self, map: LinearMap) -> Result<Self> {
        check_dim(self.dim(), map.dim())?;
        self.feature_map = Some(map);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.background.dim()
    }

    /// Applies `f` to every distribution, keeping masks.
    pub fn map_distributions<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&GaussianMixture) -> Result<GaussianMixture>,
    {
        Ok(Self {
            background: f(&self.background)?,
            conditionals: self.conditionals.iter().map(&f).collect::<Result<_>>()?,
            masks: self.masks.clone(),
            feature_map: self.feature_map.clone(),
        })
    }

    pub fn noise(&self, schedule: &DiffusionSchedule, t: f64) -> Result<Self> {
        schedule.check_time(t)?;
        let lvl = schedule.noise_level(t);
        self.map_distributions(|g| g.noise_scaled(lvl.scale, lvl.sigma))
    }

    pub fn noise_ve(&self, sigma: f64) -> Result<Self> {
        self.map_distributions(|g| g.noise_ve(sigma))
    }

    /// Every distribution pushed forward by `map`; masks are dropped.
    pub fn pushforward(&self, map: &LinearMap) -> Result<Self> {
        let mut s = self.map_distributions(|g| g.pushforward(map))?;
        s.masks = None;
        s.feature_map = None;
        Ok(s)
    }

    /// The spec expressed in its feature space, if a feature map is attached.
    pub fn in_feature_space(&self) -> Result<Self> {
        match &self.feature_map {
            Some(m) => self.pushforward(m),
            None => Ok(self.clone()),
        }
    }

    /// `log p_b(x) + Σ_i (log p_i(x) − log p_b(x))`, without normalization.
    pub fn unnormalized_log_density(&self, x: &[f64]) -> Result<f64> {
        let lb = self.background.log_density(x)?;
        let mut acc = lb;
        for c in &self.conditionals {
            acc += c.log_density(x)? - lb;
        }
        Ok(acc)
    }

    /// `p_b(x|_{M_b}) Π_i p_i(x|_{M_i})` in log space; requires masks.
    pub fn product_form_log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let masks = self
            .masks
            .as_ref()
            .ok_or_else(|| Error::Input("product form needs a mask partition".into()))?;
        let restrict = |coords: &[usize]| coords.iter().map(|&c| x[c]).collect::<Vec<_>>();
        let mut acc = 0.0;
        if !masks.background.is_empty() {
            acc += self.background.marginal(&masks.background)?.log_density(&restrict(&masks.background))?;
        }
        for (c, block) in self.conditionals.iter().zip(&masks.blocks) {
            if !block.is_empty() {
                acc += c.marginal(block)?.log_density(&restrict(block))?;
            }
        }
        Ok(acc)
    }

    /// Score of the (un-noised) composition at `x`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let f = ComposedField::new(self.clone());
        let mut out = vec![0.0; self.dim()];
        f.score_into(x, &mut out);
        Ok(out)
    }

    /// Score deltas `∇ log p_i − ∇ log p_b` at `x`, one per conditional.
    pub fn score_deltas(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let sb = self.background.score(x)?;
        self.conditionals
            .iter()
            .map(|c| Ok(c.score(x)?.iter().zip(&sb).map(|(a, b)| a - b).collect()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Short content hash of the JSON form, used in sample provenance.
    pub fn hash(&self) -> String {
        let json = self.to_json().unwrap_or_default();
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Composed score field at one noise level.
#[derive(Debug, Clone)]
pub struct ComposedField {
    spec: CompositionSpec,
}

impl ComposedField {
    pub fn new(spec: CompositionSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &CompositionSpec {
        &self.spec
    }
}

impl ScoreField for ComposedField {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.spec.dim();
        let mut sb = [0.0; MAX_DIM];
        let mut si = [0.0; MAX_DIM];
        self.spec.background.score_into(x, &mut sb);
        let k = self.spec.conditionals.len() as f64;
        for i in 0..d {
            out[i] = (1.0 - k) * sb[i];
        }
        for c in &self.spec.conditionals {
            c.score_into(x, &mut si);
            for i in 0..d {
                out[i] += si[i];
            }
        }
    }
}

impl ScoreModel for CompositionSpec {
    type Field = ComposedField;

    fn dim(&self) -> usize {
        CompositionSpec::dim(self)
    }

    fn field(&self, level: NoiseLevel) -> Result<ComposedField> {
        Ok(ComposedField::new(self.map_distributions(|g| g.noise_scaled(level.scale, level.sigma))?))
    }
}

/// Composition spec paired with the schedule that noises it.
#[derive(Debug, Clone)]
pub struct ComposedScore {
    pub spec: CompositionSpec,
    pub schedule: DiffusionSchedule,
}

impl ComposedScore {
    pub fn new(spec: CompositionSpec, schedule: DiffusionSchedule) -> Self {
        Self { spec, schedule }
    }

    /// `∇ log p_b^t(x) + Σ_i (∇ log p_i^t(x) − ∇ log p_b^t(x))`.
    pub fn score(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.schedule.check_time(t)?;
        check_dim(self.spec.dim(), x.len())?;
        let f = self.spec.field(self.schedule.noise_level(t))?;
        let mut out = vec![0.0; self.spec.dim()];
        f.score_into(x, &mut out);
        Ok(out)
    }

    /// Score deltas of the noised distributions at time `t`.
    pub fn deltas(&self, t: f64, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.spec.noise(&self.schedule, t)?.score_deltas(x)
    }
}

/// Convenience wrapper for [`ComposedScore::score`].
pub fn composed_score(spec: &CompositionSpec, schedule: &DiffusionSchedule, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    ComposedScore::new(spec.clone(), schedule.clone()).score(t, x)
}

#[derive(Debug, Clone)]
pub struct ClosedComposition {
    pub mixture: GaussianMixture,
    /// `log Z` of the composed density `p_b Π_i p_i / p_b`.
    pub log_normalizer: f64,
}

/// Largest number of component tuples expanded by [`compose_gmm_closed`].
pub const MAX_CLOSED_COMPONENTS: usize = 100_000;

fn shared_cov_tol(s: &DMatrix<f64>) -> f64 {
    1e-12 * s.amax().max(1.0)
}

/// Checks that every Gaussian quotient `Π_i N(μ_i, Σ_i) / N(μ_b, Σ_b)^{k-1}` has a
/// positive-definite precision; otherwise the composition cannot be normalized.
pub fn check_integrable(spec: &CompositionSpec) -> Result<()> {
    let k = spec.conditionals.len();
    if k <= 1 {
        return Ok(());
    }
    let inv = |c: &DMatrix<f64>| -> Result<DMatrix<f64>> { Ok(linalg::spd_inverse_logdet(c)?.0) };
    let d = spec.dim();
    for b in spec.background.components() {
        let pb = inv(b.cov())?;
        // Worst case over tuples is governed by the smallest conditional precision per factor,
        // so checking each combination of one component per conditional is exact.
        let per_cond: Vec<Vec<DMatrix<f64>>> = spec
            .conditionals
            .iter()
            .map(|c| c.components().iter().map(|cc| inv(cc.cov())).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        let total: usize = per_cond.iter().map(Vec::len).product();
        if total > MAX_CLOSED_COMPONENTS {
            return Err(Error::UnsupportedClosedForm(format!("{total} component tuples")));
        }
        for idx in TupleIter::new(per_cond.iter().map(Vec::len).collect()) {
            let mut prec = -(&pb) * (k as f64 - 1.0);
            for (i, &j) in idx.iter().enumerate() {
                prec += &per_cond[i][j];
            }
            let lmin = linalg::min_eigenvalue(&prec);
            if lmin <= 1e-12 * prec.amax().max(1.0) {
                return Err(Error::NonIntegrable(format!(
                    "composed precision has eigenvalue {lmin:e} (dimension {d})"
                )));
            }
        }
    }
    Ok(())
}

/// Exact composed mixture when all components share one covariance `Σ` and the
/// background is `N(0, Σ)`.
pub fn compose_gmm_closed(spec: &CompositionSpec) -> Result<ClosedComposition> {
    let bg = &spec.background;
    if bg.num_components() != 1 {
        check_integrable(spec)?;
        return Err(Error::UnsupportedClosedForm("background must be a single Gaussian".into()));
    }
    let b = &bg.components()[0];
    let sigma = b.cov().clone();
    let tol = shared_cov_tol(&sigma);
    let same_cov = spec
        .conditionals
        .iter()
        .flat_map(|c| c.components())
        .all(|c| linalg::max_abs_diff(c.cov(), &sigma) <= tol);
    if !same_cov {
        check_integrable(spec)?;
        return Err(Error::UnsupportedClosedForm("component covariances differ from the background".into()));
    }
    if b.mean().amax() > 1e-12 {
        return Err(Error::UnsupportedClosedForm("background mean must be zero".into()));
    }
    if spec.conditionals.is_empty() {
        return Ok(ClosedComposition { mixture: bg.clone(), log_normalizer: 0.0 });
    }
    let sizes: Vec<usize> = spec.conditionals.iter().map(|c| c.num_components()).collect();
    let total: usize = sizes.iter().product();
    if total > MAX_CLOSED_COMPONENTS {
        return Err(Error::UnsupportedClosedForm(format!("{total} component tuples")));
    }
    let (prec, _) = linalg::spd_inverse_logdet(&sigma)?;
    let d = spec.dim();
    // Cached P μ for every conditional component.
    let pmu: Vec<Vec<DVector<f64>>> = spec
        .conditionals
        .iter()
        .map(|c| c.components().iter().map(|cc| &prec * cc.mean()).collect())
        .collect();
    let mut parts = Vec::with_capacity(total);
    for idx in TupleIter::new(sizes) {
        let mut mean = DVector::zeros(d);
        let mut lw = 0.0;
        for (i, &j) in idx.iter().enumerate() {
            let comp = &spec.conditionals[i].components()[j];
            lw += comp.log_weight();
            for (a, &ja) in idx.iter().enumerate().take(i) {
                lw += spec.conditionals[a].components()[ja].mean().dot(&pmu[i][j]);
            }
            mean += comp.mean();
        }
        parts.push((lw, mean, sigma.clone()));
    }
    let lws: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let log_normalizer = log_sum_exp(&lws);
    let mixture = GaussianMixture::from_log_weights(parts)?;
    Ok(ClosedComposition { mixture, log_normalizer })
}

/// Odometer over `Π_i 0..sizes[i]`, last index fastest.
pub(crate) struct TupleIter {
    sizes: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl TupleIter {
    pub(crate) fn new(sizes: Vec<usize>) -> Self {
        let next = if sizes.iter().any(|&s| s == 0) { None } else { Some(vec![0; sizes.len()]) };
        Self { sizes, next }
    }
}

impl Iterator for TupleIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let cur = self.next.take()?;
        let mut nxt = cur.clone();
        let mut i = nxt.len();
        loop {
            if i == 0 {
                break;
            }
            i -= 1;
            nxt[i] += 1;
            if nxt[i] < self.sizes[i] {
                self.next = Some(nxt);
                break;
            }
            nxt[i] = 0;
        }
        Some(cur)
    }
}

/// Factorized-conditional spec assembled from per-block distributions.
///
/// `background_part` is the background law of `M_b` (omit when `M_b` is empty),
/// `background_blocks[i]` the background law of `M_i`, and `conditional_blocks[i]`
/// the law that conditional `i` places on `M_i`. The background is the product of
/// its parts; conditional `i` is the background with block `M_i` replaced.
pub fn build_factorized(
    masks: &MaskPartition,
    background_part: Option<&GaussianMixture>,
    background_blocks: &[GaussianMixture],
    conditional_blocks: &[GaussianMixture],
) -> Result<CompositionSpec> {
    let n = masks.dim();
    MaskPartition::new(n, masks.background.clone(), masks.blocks.clone())?;
    let k = masks.num_blocks();
    if background_blocks.len() != k || conditional_blocks.len() != k {
        return Err(Error::Input(format!(
            "expected {k} background and conditional block distributions"
        )));
    }
    if masks.blocks.iter().any(Vec::is_empty) {
        return Err(Error::Input("conditional mask blocks must be nonempty".into()));
    }
    for (i, b) in masks.blocks.iter().enumerate() {
        check_dim(b.len(), background_blocks[i].dim())?;
        check_dim(b.len(), conditional_blocks[i].dim())?;
    }
    match (masks.background.is_empty(), background_part) {
        (false, Some(g)) => check_dim(masks.background.len(), g.dim())?,
        (false, None) => return Err(Error::Input("missing background-part distribution".into())),
        (true, Some(_)) => return Err(Error::Input("background part given for an empty M_b".into())),
        (true, None) => {}
    }
    // Coordinates in concatenation order: M_b, M_1, …, M_k.
    let order: Vec<usize> = masks.background.iter().chain(masks.blocks.iter().flatten()).copied().collect();
    let mut perm = vec![0; n];
    for (pos, &c) in order.iter().enumerate() {
        perm[c] = pos;
    }
    let assemble = |replace: Option<usize>| -> Result<GaussianMixture> {
        let mut parts: Vec<&GaussianMixture> = Vec::new();
        if let Some(g) = background_part {
            parts.push(g);
        }
        for i in 0..k {
            parts.push(if replace == Some(i) { &conditional_blocks[i] } else { &background_blocks[i] });
        }
        let mut acc = parts[0].clone();
        for p in &parts[1..] {
            acc = acc.product(p)?;
        }
        acc.permute(&perm)
    };
    let background = assemble(None)?;
    let conditionals = (0..k).map(|i| assemble(Some(i))).collect::<Result<Vec<_>>>()?;
    CompositionSpec::new(background, conditionals)?.with_masks(masks.clone())
}

/// Largest deviation of the spec's densities from the factorized form at `points`:
/// `|log p_i(x) − log p_i(x|_{M_i}) − log p_b(x|_{M_i^c})|` and
/// `|log p_b(x) − Σ_parts log p_b(x|_part)|`.
pub fn factorization_residual(spec: &CompositionSpec, points: &[Vec<f64>]) -> Result<f64> {
    let masks = spec
        .masks
        .as_ref()
        .ok_or_else(|| Error::Input("factorization check needs masks".into()))?;
    let restrict = |x: &[f64], c: &[usize]| c.iter().map(|&i| x[i]).collect::<Vec<_>>();
    let parts = masks.all_parts();
    let bg_marg: Vec<GaussianMixture> = parts.iter().map(|p| spec.background.marginal(p)).collect::<Result<_>>()?;
    let mut worst: f64 = 0.0;
    for x in points {
        let lb = spec.background.log_density(x)?;
        let prod: f64 = parts
            .iter()
            .zip(&bg_marg)
            .map(|(p, g)| g.log_density(&restrict(x, p)))
            .sum::<Result<f64>>()?;
        worst = worst.max((lb - prod).abs());
        for (i, c) in spec.conditionals.iter().enumerate() {
            let block = &masks.blocks[i];
            let comp = masks.complement(i);
            let mut rhs = c.marginal(block)?.log_density(&restrict(x, block))?;
            if !comp.is_empty() {
                rhs += spec.background.marginal(&comp)?.log_density(&restrict(x, &comp))?;
            }
            worst = worst.max((c.log_density(x)? - rhs).abs());
        }
    }
    Ok(worst)
}

/// A smooth invertible map with a tractable Jacobian determinant.
pub trait Diffeomorphism {
    fn forward(&self, x: &[f64]) -> Vec<f64>;
    fn inverse(&self, z: &[f64]) -> Vec<f64>;
    /// `log |det ∇forward(x)|`.
    fn log_abs_det_jacobian(&self, x: &[f64]) -> f64;
}

impl Diffeomorphism for LinearMap {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.apply(x)
    }

    fn inverse(&self, z: &[f64]) -> Vec<f64> {
        self.apply_inverse(z)
    }

    fn log_abs_det_jacobian(&self, _x: &[f64]) -> f64 {
        self.log_abs_det()
    }
}

/// Componentwise `x ↦ x + c · tanh(x)`, invertible for `c > −1`.
#[derive(Debug, Clone, Copy)]
pub struct TanhWarp {
    pub c: f64,
}

impl TanhWarp {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > -1.0) || !c.is_finite() {
            return Err(Error::Input(format!("tanh warp needs c > -1, got {c}")));
        }
        Ok(Self { c })
    }

    fn invert_scalar(&self, z: f64) -> f64 {
        // f is strictly increasing; bracket then Newton with bisection fallback.
        let f = |x: f64| x + self.c * x.tanh() - z;
        let (mut lo, mut hi) = (z - self.c.abs() - 1.0, z + self.c.abs() + 1.0);
        let mut x = z;
        for _ in 0..200 {
            let fx = f(x);
            if fx == 0.0 {
                return x;
            }
            if fx < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let sech2 = 1.0 - x.tanh().powi(2);
            let mut nx = x - fx / (1.0 + self.c * sech2);
            if !(nx > lo && nx < hi) {
                nx = 0.5 * (lo + hi);
            }
            if (nx - x).abs() <= 1e-16 * x.abs().max(1.0) {
                return nx;
            }
            x = nx;
        }
        x
    }
}

impl Diffeomorphism for TanhWarp {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v + self.c * v.tanh()).collect()
    }

    fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| self.invert_scalar(v)).collect()
    }

    fn log_abs_det_jacobian(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| (1.0 + self.c * (1.0 - v.tanh().powi(2))).ln()).sum()
    }
}

/// `log (φ♯p)(z) = log p(φ⁻¹ z) − log |det ∇φ(φ⁻¹ z)|`.
pub fn pushforward_log_density<D: Diffeomorphism + ?Sized>(g: &GaussianMixture, map: &D, z: &[f64]) -> Result<f64> {
    let x = map.inverse(z);
    Ok(g.log_density(&x)? - map.log_abs_det_jacobian(&x))
}

fn centered_max_residual(diffs: &[f64]) -> f64 {
    if diffs.is_empty() {
        return 0.0;
    }
    let c = diffs.iter().sum::<f64>() / diffs.len() as f64;
    diffs.iter().map(|d| (d - c).abs()).fold(0.0, f64::max)
}

/// Max over `points` of `|log C[A♯p⃗](Ax) − log (A♯C[p⃗])(Ax) − c|` with the best
/// global constant `c` removed. The left side is evaluated from the pushed-forward
/// mixtures, the right side from the original composition.
pub fn check_equivariance(spec: &CompositionSpec, map: &LinearMap, points: &[Vec<f64>]) -> Result<f64> {
    let pushed = spec.pushforward(map)?;
    let diffs = points
        .iter()
        .map(|x| {
            let z = map.apply(x);
            let lhs = pushed.unnormalized_log_density(&z)?;
            let rhs = spec.unnormalized_log_density(x)? - map.log_abs_det();
            Ok(lhs - rhs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(centered_max_residual(&diffs))
}

/// As [`check_equivariance`] for a general diffeomorphism; pushforward densities
/// are evaluated through the numerical inverse.
pub fn check_equivariance_diffeo<D: Diffeomorphism + ?Sized>(
    spec: &CompositionSpec,
    map: &D,
    points: &[Vec<f64>],
) -> Result<f64> {
    let diffs = points
        .iter()
        .map(|x| {
            let z = map.forward(x);
            let lb = pushforward_log_density(&spec.background, map, &z)?;
            let mut lhs = lb;
            for c in &spec.conditionals {
                lhs += pushforward_log_density(c, map, &z)? - lb;
            }
            let rhs = spec.unnormalized_log_density(x)? - map.log_abs_det_jacobian(x);
            Ok(lhs - rhs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(centered_max_residual(&diffs))
}

/// Largest parameter difference between noise-then-transform and transform-then-noise
/// over every distribution in the spec (VE noising at level `sigma`).
pub fn noise_transform_commutator(spec: &CompositionSpec, map: &LinearMap, sigma: f64) -> Result<f64> {
    let a = spec.noise_ve(sigma)?.pushforward(map)?;
    let b = spec.pushforward(map)?.noise_ve(sigma)?;
    Ok(std::iter::once((&a.background, &b.background))
        .chain(a.conditionals.iter().zip(&b.conditionals))
        .map(|(x, y)| x.parameter_distance(y))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    /// `max |⟨δ_i, δ_j⟩|` over pairs `i ≠ j` and points.
    pub max_inner_product: f64,
    /// Largest entry of any `δ_i` outside its mask `M_i` (0 without masks).
    pub max_off_mask: f64,
}

/// Pairwise inner products of noised score deltas and their off-mask support.
pub fn score_delta_orthogonality(
    spec: &CompositionSpec,
    masks: Option<&MaskPartition>,
    schedule: &DiffusionSchedule,
    t: f64,
    points: &[Vec<f64>],
) -> Result<OrthogonalityReport> {
    let noised = spec.noise(schedule, t)?;
    let mut inner: f64 = 0.0;
    let mut off: f64 = 0.0;
    for x in points {
        let deltas = noised.score_deltas(x)?;
        for i in 0..deltas.len() {
            for j in (i + 1)..deltas.len() {
                inner = inner.max(linalg::dot(&deltas[i], &deltas[j]).abs());
            }
            if let Some(m) = masks {
                for c in m.complement(i) {
                    off = off.max(deltas[i][c].abs());
                }
            }
        }
    }
    Ok(OrthogonalityReport { max_inner_product: inner, max_off_mask: off })
}

/// Cosine similarities between mean-difference vectors `μ_i − μ_b`.
pub fn mean_diff_heuristic(means: &[Vec<f64>], background_mean: &[f64]) -> Result<Vec<Vec<f64>>> {
    let diffs: Vec<Vec<f64>> = means
        .iter()
        .enumerate()
        .map(|(i, m)| {
            check_dim(background_mean.len(), m.len())?;
            let d: Vec<f64> = m.iter().zip(background_mean).map(|(a, b)| a - b).collect();
            if linalg::norm(&d) <= 1e-12 {
                return Err(Error::DegenerateConcept { index: i });
            }
            Ok(d)
        })
        .collect::<Result<_>>()?;
    let norms: Vec<f64> = diffs.iter().map(|d| linalg::norm(d)).collect();
    Ok((0..diffs.len())
        .map(|i| {
            (0..diffs.len())
                .map(|j| (linalg::dot(&diffs[i], &diffs[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0))
                .collect()
        })
        .collect())
}

/// Concept embeddings plus the background row.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub labels: Vec<String>,
    pub groups: Option<Vec<String>>,
    pub vectors: Vec<Vec<f64>>,
    pub background: Vec<f64>,
}

/// Reads `label,v0,…,v{d−1}` rows (optionally with a `group` column); one row must be
/// labeled `background`.
pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::Parse(format!("{}: missing `label` column", path.display())))?;
    let group_col = headers.iter().position(|h| h == "group");
    let value_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != label_col && Some(c) != group_col).collect();
    if value_cols.is_empty() {
        return Err(Error::Parse(format!("{}: no vector columns", path.display())));
    }
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut vectors = Vec::new();
    let mut background = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let v = value_cols
            .iter()
            .map(|&c| {
                let s = rec.get(c).unwrap_or("");
                s.parse::<f64>().map_err(|e| {
                    Error::Parse(format!("{}: row {}: bad value `{s}`: {e}", path.display(), line + 2))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = rec.get(label_col).unwrap_or("").to_string();
        if label == "background" {
            background = Some(v);
        } else {
            labels.push(label);
            groups.push(group_col.and_then(|c| rec.get(c)).unwrap_or("").to_string());
            vectors.push(v);
        }
    }
    let background =
        background.ok_or_else(|| Error::Parse(format!("{}: no `background` row", path.display())))?;
    Ok(Embeddings {
        labels,
        groups: group_col.map(|_| groups),
        vectors,
        background,
    })
}
