//! Exact probability tables over `{0,…,m−1}ⁿ`, used as a brute-force oracle for
//! composition, factorization and divergence identities.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest table size accepted.
pub const MAX_STATES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    m: usize,
    n: usize,
    probs: Vec<f64>,
}

fn state_count(m: usize, n: usize) -> Result<usize> {
    if m < 2 {
        return Err(Error::Input(format!("alphabet size must be >= 2, got {m}")));
    }
    let mut total: usize = 1;
    for _ in 0..n {
        total = total
            .checked_mul(m)
            .filter(|&t| t <= MAX_STATES)
            .ok_or_else(|| Error::Input(format!("{m}^{n} states exceed the enumeration bound")))?;
    }
    Ok(total)
}

impl DiscreteDistribution {
    pub fn new(m: usize, n: usize, probs: Vec<f64>) -> Result<Self> {
        let total = state_count(m, n)?;
        if probs.len() != total {
            return Err(Error::Input(format!("expected {total} probabilities, got {}", probs.len())));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Input("probabilities must be finite and nonnegative".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Self { m, n, probs })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(m: usize, n: usize, weights: Vec<f64>) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Input("weights must have positive finite total".into()));
        }
        Self::new(m, n, weights.into_iter().map(|w| w / s).collect())
    }

    /// Builds a distribution from an unnormalized weight function of the state.
    pub fn from_fn<F: FnMut(&[usize]) -> f64>(m: usize, n: usize, mut f: F) -> Result<Self> {
        let total = state_count(m, n)?;
        let mut x = vec![0; n];
        let w = (0..total)
            .map(|i| {
                decode_into(i, m, &mut x);
                f(&x)
            })
            .collect();
        Self::from_weights(m, n, w)
    }

    pub fn uniform(m: usize, n: usize) -> Result<Self> {
        Self::from_fn(m, n, |_| 1.0)
    }

    pub fn alphabet_size(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_states(&self) -> usize {
        self.probs.len()
    }

    pub fn decode(&self, index: usize) -> Vec<usize> {
        let mut x = vec![0; self.n];
        decode_into(index, self.m, &mut x);
        x
    }

    /// Mixed-radix index; coordinate 0 is most significant.
    pub fn encode(&self, x: &[usize]) -> usize {
        x.iter().fold(0, |acc, &v| acc * self.m + v)
    }

    pub fn prob(&self, x: &[usize]) -> f64 {
        self.probs[self.encode(x)]
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.m != other.m || self.n != other.n {
            return Err(Error::Input(format!(
                "shape mismatch: ({}, {}) vs ({}, {})",
                self.m, self.n, other.m, other.n
            )));
        }
        Ok(())
    }

    /// Index of every state's restriction to `coords`.
    fn projected_indices(&self, coords: &[usize]) -> Vec<usize> {
        let mut x = vec![0; self.n];
        (0..self.probs.len())
            .map(|i| {
                decode_into(i, self.m, &mut x);
                coords.iter().fold(0, |acc, &c| acc * self.m + x[c])
            })
            .collect()
    }

    fn check_coords(&self, coords: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.n];
        for &c in coords {
            if c >= self.n || std::mem::replace(&mut seen[c], true) {
                return Err(Error::Input(format!("bad coordinate {c} for dimension {}", self.n)));
            }
        }
        Ok(())
    }

    /// Marginal table over `coords`, as a raw vector of length `m^|coords|`.
    pub fn marginal_table(&self, coords: &[usize]) -> Result<Vec<f64>> {
        self.check_coords(coords)?;
        let mut out = vec![0.0; self.m.pow(coords.len() as u32)];
        for (p, j) in self.probs.iter().zip(self.projected_indices(coords)) {
            out[j] += p;
        }
        Ok(out)
    }

    pub fn marginal(&self, coords: &[usize]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Input("marginal needs at least one coordinate".into()));
        }
        let t = self.marginal_table(coords)?;
        Self::new(self.m, coords.len(), t)
    }

    pub fn total_variation(&self, other: &Self) -> Result<f64> {
        self.same_shape(other)?;
        Ok(0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }

    /// Product of marginals over the given disjoint blocks (which must cover `[n]`).
    pub fn product_of_marginals(&self, blocks: &[Vec<usize>]) -> Result<Vec<f64>> {
        let tables: Vec<(Vec<f64>, Vec<usize>)> = blocks
            .iter()
            .filter(|b| !b.is_empty())
            .map(|b| Ok((self.marginal_table(b)?, self.projected_indices(b))))
            .collect::<Result<_>>()?;
        Ok((0..self.probs.len())
            .map(|i| tables.iter().map(|(t, idx)| t[idx[i]]).product())
            .collect())
    }

    /// `sup` over complement values `c` with positive mass of
    /// `KL(p(x|_mask) ‖ p(x|_mask | x|_{mask^c} = c))`.
    pub fn sup_conditional_kl(&self, mask: &[usize]) -> Result<f64> {
        self.check_coords(mask)?;
        let comp: Vec<usize> = (0..self.n).filter(|c| !mask.contains(c)).collect();
        if mask.is_empty() || comp.is_empty() {
            return Ok(0.0);
        }
        let marg = self.marginal_table(mask)?;
        let mi = self.projected_indices(mask);
        let ci = self.projected_indices(&comp);
        let ncomp = self.m.pow(comp.len() as u32);
        let nmask = marg.len();
        let mut joint = vec![0.0; ncomp * nmask];
        for (i, p) in self.probs.iter().enumerate() {
            joint[ci[i] * nmask + mi[i]] += p;
        }
        let mut worst: f64 = 0.0;
        for c in 0..ncomp {
            let row = &joint[c * nmask..(c + 1) * nmask];
            let pc: f64 = row.iter().sum();
            if pc <= 0.0 {
                continue;
            }
            let mut kl = 0.0;
            for (pm, pj) in marg.iter().zip(row) {
                if *pm > 0.0 {
                    let cond = pj / pc;
                    if cond <= 0.0 {
                        return Ok(f64::INFINITY);
                    }
                    kl += pm * (pm / cond).ln();
                }
            }
            worst = worst.max(kl);
        }
        Ok(worst)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TableJson { m: self.m, n: self.n, probs: self.probs.clone() })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: TableJson = serde_json::from_str(s)?;
        Self::new(t.m, t.n, t.probs)
    }
}

#[derive(Serialize, Deserialize)]
struct TableJson {
    m: usize,
    n: usize,
    probs: Vec<f64>,
}

fn decode_into(mut index: usize, m: usize, x: &mut [usize]) {
    for v in x.iter_mut().rev() {
        *v = index % m;
        index /= m;
    }
}

/// Disjoint coordinate blocks `M_b, M_1, …, M_k` covering `[n]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPartition {
    pub background: Vec<usize>,
    pub blocks: Vec<Vec<usize>>,
}

impl MaskPartition {
    pub fn new(n: usize, background: Vec<usize>, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let mut owner = vec![false; n];
        for &c in background.iter().chain(blocks.iter().flatten()) {
            if c >= n {
                return Err(Error::Input(format!("mask coordinate {c} out of range 0..{n}")));
            }
            if std::mem::replace(&mut owner[c], true) {
                return Err(Error::Input(format!("mask blocks overlap at coordinate {c}")));
            }
        }
        if let Some(c) = owner.iter().position(|o| !o) {
            return Err(Error::Input(format!("coordinate {c} not covered by any mask")));
        }
        Ok(Self { background, blocks })
    }

    /// One singleton block per coordinate, empty background.
    pub fn singletons(n: usize) -> Self {
        Self { background: vec![], blocks: (0..n).map(|i| vec![i]).collect() }
    }

    pub fn dim(&self) -> usize {
        self.background.len() + self.blocks.iter().map(Vec::len).sum::<usize>()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Coordinates outside block `i`, ascending.
    pub fn complement(&self, i: usize) -> Vec<usize> {
        let n = self.dim();
        (0..n).filter(|c| !self.blocks[i].contains(c)).collect()
    }

    pub fn background_complement(&self) -> Vec<usize> {
        (0..self.dim()).filter(|c| !self.background.contains(c)).collect()
    }

    /// All nonempty parts, background first.
    pub fn all_parts(&self) -> Vec<Vec<usize>> {
        std::iter::once(self.background.clone())
            .chain(self.blocks.iter().cloned())
            .filter(|b| !b.is_empty())
            .collect()
    }
}

/// `C[p⃗](x) = (1/Z) p_b(x) Π_i p_i(x)/p_b(x)`; returns the table and `Z`.
pub fn compose_exact(
    bg: &DiscreteDistribution,
    conds: &[DiscreteDistribution],
) -> Result<(DiscreteDistribution, f64)> {
    for c in conds {
        bg.same_shape(c)?;
    }
    if conds.is_empty() {
        return Ok((bg.clone(), 1.0));
    }
    let k = conds.len() as f64;
    let mut w = vec![0.0; bg.num_states()];
    for (i, out) in w.iter_mut().enumerate() {
        let num: f64 = conds.iter().map(|c| c.probs[i]).product();
        let pb = bg.probs[i];
        if pb == 0.0 {
            if num > 0.0 {
                return Err(Error::UndefinedComposition { state: i });
            }
            continue;
        }
        if num > 0.0 {
            let lg: f64 = conds.iter().map(|c| c.probs[i].ln()).sum::<f64>() - (k - 1.0) * pb.ln();
            *out = lg.exp();
        }
    }
    let z: f64 = w.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Input(format!("composition normalizer is {z}")));
    }
    let d = DiscreteDistribution::new(bg.m, bg.n, w.into_iter().map(|v| v / z).collect())?;
    Ok((d, z))
}

/// `p_b(x|_{M_b}) Π_i p_i(x|_{M_i})`, the ideal projective composition.
pub fn ideal_composition(
    bg: &DiscreteDistribution,
    conds: &[DiscreteDistribution],
    masks: &MaskPartition,
) -> Result<DiscreteDistribution> {
    check_masks(bg, conds, masks)?;
    let mut factors: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    if !masks.background.is_empty() {
        factors.push((bg.marginal_table(&masks.background)?, bg.projected_indices(&masks.background)));
    }
    for (c, b) in conds.iter().zip(&masks.blocks) {
        if !b.is_empty() {
            factors.push((c.marginal_table(b)?, c.projected_indices(b)));
        }
    }
    let probs = (0..bg.num_states())
        .map(|i| factors.iter().map(|(t, idx)| t[idx[i]]).product())
        .collect();
    DiscreteDistribution::from_weights(bg.m, bg.n, probs)
}

fn check_masks(
    bg: &DiscreteDistribution,
    conds: &[DiscreteDistribution],
    masks: &MaskPartition,
) -> Result<()> {
    for c in conds {
        bg.same_shape(c)?;
    }
    if masks.dim() != bg.n {
        return Err(Error::Input("mask partition does not cover the state dimension".into()));
    }
    MaskPartition::new(bg.n, masks.background.clone(), masks.blocks.clone())?;
    if masks.num_blocks() != conds.len() {
        return Err(Error::Input(format!(
            "{} mask blocks for {} conditionals",
            masks.num_blocks(),
            conds.len()
        )));
    }
    Ok(())
}

/// Per-condition maximum absolute deviations for the three factorized-conditional requirements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    /// Condition 1, per conditional: `x|_{M_i}` independent of the rest under `p_i`.
    pub conditional_independence: Vec<f64>,
    /// Condition 2: mask blocks mutually independent under `p_b`.
    pub background_independence: f64,
    /// Condition 3, per conditional: `p_i` agrees with `p_b` off its mask.
    pub off_mask_agreement: Vec<f64>,
    pub tol: f64,
    pub passes: bool,
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn is_factorized(
    bg: &DiscreteDistribution,
    conds: &[DiscreteDistribution],
    masks: &MaskPartition,
    tol: f64,
) -> Result<FactorizationReport> {
    check_masks(bg, conds, masks)?;
    let mut cond1 = Vec::with_capacity(conds.len());
    let mut cond3 = Vec::with_capacity(conds.len());
    for (i, p) in conds.iter().enumerate() {
        let block = &masks.blocks[i];
        let comp = masks.complement(i);
        if block.is_empty() || comp.is_empty() {
            cond1.push(0.0);
        } else {
            let prod = p.product_of_marginals(&[block.clone(), comp.clone()])?;
            cond1.push(max_abs(&p.probs, &prod));
        }
        if comp.is_empty() {
            cond3.push(0.0);
        } else {
            cond3.push(max_abs(&p.marginal_table(&comp)?, &bg.marginal_table(&comp)?));
        }
    }
    let prod = bg.product_of_marginals(&masks.all_parts())?;
    let cond2 = max_abs(&bg.probs, &prod);
    let passes = cond2 <= tol && cond1.iter().chain(&cond3).all(|d| *d <= tol);
    Ok(FactorizationReport {
        conditional_independence: cond1,
        background_independence: cond2,
        off_mask_agreement: cond3,
        tol,
        passes,
    })
}

/// Worst total-variation distance between `hat` and each target on its own mask block.
pub fn projective_check(
    hat: &DiscreteDistribution,
    targets: &[DiscreteDistribution],
    masks: &MaskPartition,
) -> Result<f64> {
    check_masks(hat, targets, masks)?;
    let mut worst: f64 = 0.0;
    for (p, block) in targets.iter().zip(&masks.blocks) {
        if block.is_empty() {
            continue;
        }
        let a = hat.marginal_table(block)?;
        let b = p.marginal_table(block)?;
        worst = worst.max(0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>());
    }
    Ok(worst)
}

/// `KL(p ‖ q) = Σ p log(p/q)`, terms with `p = 0` contributing zero.
pub fn kl(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    p.same_shape(q)?;
    let mut acc = 0.0;
    for (i, (a, b)) in p.probs.iter().zip(&q.probs).enumerate() {
        if *a > 0.0 {
            if *b <= 0.0 {
                return Err(Error::SupportViolation(format!(
                    "state {i} has p = {a:e} but q = 0 (KL is infinite)"
                )));
            }
            acc += a * (a / b).ln();
        }
    }
    Ok(acc.max(0.0))
}

/// Background, conditionals and label-averaged unconditional of the cluttered
/// Bernoulli family.
#[derive(Debug, Clone)]
pub struct ClutterFamily {
    pub q: f64,
    pub background: DiscreteDistribution,
    pub conditionals: Vec<DiscreteDistribution>,
    pub unconditional: DiscreteDistribution,
}

/// Background i.i.d. Bernoulli(q); conditional `i` forces `x_i = 1`; unconditional is their average.
pub fn clutter_family(n: usize, q: f64) -> Result<ClutterFamily> {
    if n == 0 || n > 20 {
        return Err(Error::Input(format!("clutter family needs 1 <= n <= 20, got {n}")));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Input(format!("q must lie in (0, 1), got {q}")));
    }
    let bern = |x: &[usize], skip: Option<usize>| -> f64 {
        x.iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != skip)
            .map(|(_, &v)| if v == 1 { q } else { 1.0 - q })
            .product()
    };
    let background = DiscreteDistribution::from_fn(2, n, |x| bern(x, None))?;
    let conditionals = (0..n)
        .map(|i| {
            DiscreteDistribution::from_fn(2, n, |x| if x[i] == 1 { bern(x, Some(i)) } else { 0.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    let total = background.num_states();
    let avg: Vec<f64> = (0..total)
        .map(|s| conditionals.iter().map(|c| c.probs[s]).sum::<f64>() / n as f64)
        .collect();
    let unconditional = DiscreteDistribution::from_weights(2, n, avg)?;
    Ok(ClutterFamily { q, background, conditionals, unconditional })
}

/// `E_{p_b}[((p_u − p_b)/p_b)²]`, by enumeration.
pub fn chi_square_statistic(bg: &DiscreteDistribution, other: &DiscreteDistribution) -> Result<f64> {
    bg.same_shape(other)?;
    let mut acc = 0.0;
    for (pb, pu) in bg.probs.iter().zip(&other.probs) {
        if *pb > 0.0 {
            let r = (pu - pb) / pb;
            acc += pb * r * r;
        } else if *pu > 0.0 {
            return Err(Error::SupportViolation("other has mass outside the background".into()));
        }
    }
    Ok(acc)
}

pub fn binomial_pmf(k: usize, n: usize, q: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    let ln_choose = statrs::function::factorial::ln_binomial(n as u64, k as u64);
    (ln_choose + k as f64 * q.ln() + (n - k) as f64 * (1.0 - q).ln()).exp()
}

/// Randomized relaxed factorized-conditional family with exact slack terms.
#[derive(Debug, Clone)]
pub struct RelaxedFamily {
    pub eta: f64,
    pub background: DiscreteDistribution,
    pub conditionals: Vec<DiscreteDistribution>,
    pub masks: MaskPartition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxedBound {
    /// `KL(C* ‖ C)` with both sides normalized.
    pub kl: f64,
    /// `E_{C*}[log C* / C̃]` against the unnormalized composition `C̃`.
    pub kl_unnormalized: f64,
    pub log_normalizer: f64,
    pub budget: f64,
    pub eps_background: f64,
    pub eps_conditionals_sum: f64,
}

/// Per-state perturbation directions, drawn once so that `eta` can be swept.
#[derive(Debug, Clone)]
pub struct RelaxedSeed {
    m: usize,
    n: usize,
    masks: MaskPartition,
    block_marginals: Vec<Vec<f64>>,
    background_base: Vec<f64>,
    conditional_base: Vec<Vec<f64>>,
    background_dir: Vec<f64>,
    conditional_dirs: Vec<Vec<f64>>,
}

fn random_simplex<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..len).map(|_| rng.random_range(0.1..1.1)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

impl RelaxedSeed {
    pub fn random<R: Rng>(rng: &mut R, m: usize, masks: MaskPartition) -> Result<Self> {
        let n = masks.dim();
        let total = state_count(m, n)?;
        let block_marginals = masks
            .blocks
            .iter()
            .map(|b| random_simplex(rng, m.pow(b.len() as u32)))
            .collect();
        let conditional_base = masks
            .blocks
            .iter()
            .map(|b| random_simplex(rng, m.pow(b.len() as u32)))
            .collect();
        let background_base = random_simplex(rng, m.pow(masks.background.len() as u32));
        let mut dir = || (0..total).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
        let background_dir = dir();
        let conditional_dirs = (0..masks.num_blocks()).map(|_| dir()).collect();
        Ok(Self {
            m,
            n,
            masks,
            block_marginals,
            background_base,
            conditional_base,
            background_dir,
            conditional_dirs,
        })
    }

    /// Builds the family at perturbation strength `eta`; `eta = 0` is exactly factorized.
    ///
    /// Each perturbed conditional `p(x|_M | x|_{M^c})` is `base(x|_M) · exp(η g(x))`
    /// renormalized over `x|_M` for every fixed `x|_{M^c}`, which keeps the
    /// mask blocks independent under `p_b` and `p_i(x|_{M_i^c}) = p_b(x|_{M_i^c})`.
    pub fn family(&self, eta: f64) -> Result<RelaxedFamily> {
        let m = self.m;
        let n = self.n;
        let shape = DiscreteDistribution::uniform(m, n)?;
        let blocks_table = {
            let parts: Vec<(Vec<f64>, Vec<usize>)> = self
                .masks
                .blocks
                .iter()
                .zip(&self.block_marginals)
                .filter(|(b, _)| !b.is_empty())
                .map(|(b, t)| (t.clone(), shape.projected_indices(b)))
                .collect();
            (0..shape.num_states())
                .map(|i| parts.iter().map(|(t, idx)| t[idx[i]]).product::<f64>())
                .collect::<Vec<f64>>()
        };
        let bg_cond = conditional_table(&shape, &self.masks.background, &self.background_base, &self.background_dir, eta);
        let background = DiscreteDistribution::from_weights(
            m,
            n,
            bg_cond.iter().zip(&blocks_table).map(|(a, b)| a * b).collect(),
        )?;
        let conditionals = self
            .masks
            .blocks
            .iter()
            .enumerate()
            .map(|(i, block)| {
                let comp = self.masks.complement(i);
                let cond = conditional_table(&shape, block, &self.conditional_base[i], &self.conditional_dirs[i], eta);
                let off = if comp.is_empty() {
                    vec![1.0; shape.num_states()]
                } else {
                    let t = background.marginal_table(&comp)?;
                    shape.projected_indices(&comp).into_iter().map(|j| t[j]).collect()
                };
                DiscreteDistribution::from_weights(m, n, cond.iter().zip(&off).map(|(a, b)| a * b).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RelaxedFamily { eta, background, conditionals, masks: self.masks.clone() })
    }
}

fn conditional_table(
    shape: &DiscreteDistribution,
    mask: &[usize],
    base: &[f64],
    dir: &[f64],
    eta: f64,
) -> Vec<f64> {
    if mask.is_empty() {
        return vec![1.0; shape.num_states()];
    }
    let comp: Vec<usize> = (0..shape.n).filter(|c| !mask.contains(c)).collect();
    let mi = shape.projected_indices(mask);
    let ci = shape.projected_indices(&comp);
    let raw: Vec<f64> = (0..shape.num_states()).map(|i| base[mi[i]] * (eta * dir[i]).exp()).collect();
    let mut sums = vec![0.0; shape.m.pow(comp.len() as u32)];
    for (i, r) in raw.iter().enumerate() {
        sums[ci[i]] += r;
    }
    raw.iter().enumerate().map(|(i, r)| r / sums[ci[i]]).collect()
}

impl RelaxedFamily {
    /// Exact `KL(C* ‖ C)` against the slack budget `ε_b + Σ ε_i`.
    pub fn bound(&self) -> Result<RelaxedBound> {
        let ideal = ideal_composition(&self.background, &self.conditionals, &self.masks)?;
        let (composed, z) = compose_exact(&self.background, &self.conditionals)?;
        let kl_value = kl(&ideal, &composed)?;
        let eps_b = self.background.sup_conditional_kl(&self.masks.background)?;
        let eps_i: f64 = self
            .conditionals
            .iter()
            .zip(&self.masks.blocks)
            .map(|(c, b)| c.sup_conditional_kl(b))
            .sum::<Result<f64>>()?;
        Ok(RelaxedBound {
            kl: kl_value,
            kl_unnormalized: kl_value - z.ln(),
            log_normalizer: z.ln(),
            budget: eps_b + eps_i,
            eps_background: eps_b,
            eps_conditionals_sum: eps_i,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bern_product(ps: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::from_fn(2, ps.len(), |x| {
            x.iter().zip(ps).map(|(&v, p)| if v == 1 { *p } else { 1.0 - p }).product()
        })
        .unwrap()
    }

    #[test]
    fn encode_decode_round_trip() {
        let d = DiscreteDistribution::uniform(3, 4).unwrap();
        for i in 0..d.num_states() {
            assert_eq!(d.encode(&d.decode(i)), i);
        }
        assert_eq!(d.decode(1), vec![0, 0, 0, 1]);
    }

    #[test]
    fn validation() {
        assert!(DiscreteDistribution::new(2, 1, vec![0.5, 0.6]).is_err());
        assert!(DiscreteDistribution::new(2, 1, vec![1.5, -0.5]).is_err());
        assert!(DiscreteDistribution::new(2, 2, vec![1.0]).is_err());
        assert!(DiscreteDistribution::uniform(2, 21).is_err());
        assert!(MaskPartition::new(3, vec![0], vec![vec![0, 1], vec![2]]).is_err());
        assert!(MaskPartition::new(3, vec![], vec![vec![1], vec![2]]).is_err());
    }

    #[test]
    fn compose_with_background_as_conditional() {
        let bg = bern_product(&[0.3, 0.6, 0.5]);
        let (c, z) = compose_exact(&bg, &[bg.clone()]).unwrap();
        assert!(c.total_variation(&bg).unwrap() < 1e-15);
        assert!((z - 1.0).abs() < 1e-14);
    }

    #[test]
    fn compose_forced_bits_gives_point_mass() {
        let bg = DiscreteDistribution::uniform(2, 2).unwrap();
        let p1 = DiscreteDistribution::from_fn(2, 2, |x| if x[0] == 1 { 1.0 } else { 0.0 }).unwrap();
        let p2 = DiscreteDistribution::from_fn(2, 2, |x| if x[1] == 1 { 1.0 } else { 0.0 }).unwrap();
        let (c, _) = compose_exact(&bg, &[p1, p2]).unwrap();
        assert_eq!(c.probs(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn compose_undefined_when_background_vanishes() {
        let bg = DiscreteDistribution::new(2, 1, vec![1.0, 0.0]).unwrap();
        let p = DiscreteDistribution::new(2, 1, vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            compose_exact(&bg, &[p.clone(), p]),
            Err(Error::UndefinedComposition { state: 1 })
        ));
    }

    fn factorized_family() -> (DiscreteDistribution, Vec<DiscreteDistribution>, MaskPartition) {
        let probs = [0.2, 0.7, 0.4, 0.55];
        let bg = bern_product(&probs);
        let conds = vec![bern_product(&[0.2, 0.95, 0.4, 0.55]), bern_product(&[0.2, 0.7, 0.4, 0.05])];
        let masks = MaskPartition::new(4, vec![0, 2], vec![vec![1], vec![3]]).unwrap();
        (bg, conds, masks)
    }

    #[test]
    fn factorized_family_composes_to_product_form() {
        let (bg, conds, masks) = factorized_family();
        let report = is_factorized(&bg, &conds, &masks, 1e-12).unwrap();
        assert!(report.passes, "{report:?}");
        let (c, _) = compose_exact(&bg, &conds).unwrap();
        let ideal = ideal_composition(&bg, &conds, &masks).unwrap();
        assert!(c.total_variation(&ideal).unwrap() < 1e-12);
        assert!(projective_check(&c, &conds, &masks).unwrap() < 1e-12);
        // The background alone is not projective for these targets.
        assert!(projective_check(&bg, &conds, &masks).unwrap() > 0.1);
    }

    #[test]
    fn factorized_with_correlated_block() {
        // Two-coordinate block with internal correlation still factorizes.
        let bg = DiscreteDistribution::from_fn(2, 3, |x| {
            let pair = if x[0] == x[1] { 0.4 } else { 0.1 };
            pair * if x[2] == 1 { 0.3 } else { 0.7 }
        })
        .unwrap();
        let p1 = DiscreteDistribution::from_fn(2, 3, |x| {
            let pair = if x[0] == x[1] { 0.4 } else { 0.1 };
            pair * if x[2] == 1 { 0.9 } else { 0.1 }
        })
        .unwrap();
        let masks = MaskPartition::new(3, vec![0, 1], vec![vec![2]]).unwrap();
        assert!(is_factorized(&bg, &[p1], &masks, 1e-14).unwrap().passes);
    }

    #[test]
    fn count_constrained_background_fails_independence() {
        let n = 6;
        let bg = DiscreteDistribution::from_fn(2, n, |x| {
            let k: usize = x.iter().sum();
            if (1..=5).contains(&k) { 1.0 } else { 0.0 }
        })
        .unwrap();
        let masks = MaskPartition::singletons(n);
        let conds: Vec<_> = (0..n)
            .map(|i| {
                DiscreteDistribution::from_fn(2, n, |x| {
                    let k: usize = x.iter().sum();
                    if x[i] == 1 && (1..=5).contains(&k) { 1.0 } else { 0.0 }
                })
                .unwrap()
            })
            .collect();
        let r = is_factorized(&bg, &conds, &masks, 1e-12).unwrap();
        assert!(r.background_independence > 1e-3);
        assert!(!r.passes);
    }

    #[test]
    fn single_block_without_conditionals_is_vacuous() {
        let bg = DiscreteDistribution::from_fn(2, 3, |x| 1.0 + x[0] as f64 * x[2] as f64).unwrap();
        let masks = MaskPartition::new(3, vec![0, 1, 2], vec![]).unwrap();
        assert!(is_factorized(&bg, &[], &masks, 0.0).unwrap().passes);
    }

    #[test]
    fn kl_values() {
        let p = DiscreteDistribution::new(2, 1, vec![0.5, 0.5]).unwrap();
        let q = DiscreteDistribution::new(2, 1, vec![0.75, 0.25]).unwrap();
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl(&p, &q).unwrap() - expect).abs() < 1e-15);
        let point = DiscreteDistribution::new(2, 1, vec![1.0, 0.0]).unwrap();
        assert!(matches!(kl(&p, &point), Err(Error::SupportViolation(_))));
        assert!(kl(&point, &p).unwrap() > 0.0);
    }

    #[test]
    fn clutter_statistic_matches_formula() {
        for n in 1..=14 {
            for q in [0.1, 0.3, 0.5, 0.9] {
                let fam = clutter_family(n, q).unwrap();
                let stat = chi_square_statistic(&fam.background, &fam.unconditional).unwrap();
                let expect = (1.0 - q) / (n as f64 * q);
                assert!((stat - expect).abs() < 1e-12, "n={n} q={q}: {stat} vs {expect}");
            }
        }
        let fam = clutter_family(10, 0.5).unwrap();
        let stat = chi_square_statistic(&fam.background, &fam.unconditional).unwrap();
        assert!((stat - 0.1).abs() < 1e-12);
    }

    #[test]
    fn clutter_family_is_factorized() {
        let fam = clutter_family(5, 0.3).unwrap();
        let r = is_factorized(&fam.background, &fam.conditionals, &MaskPartition::singletons(5), 1e-14).unwrap();
        assert!(r.passes);
    }

    #[test]
    fn binomial_ratio_identity() {
        for (k, n, q) in [(1, 5, 0.3), (4, 9, 0.5), (7, 12, 0.9), (3, 3, 0.2), (10, 20, 0.05)] {
            let ratio = binomial_pmf(k - 1, n - 1, q) / binomial_pmf(k, n, q);
            assert!((ratio - k as f64 / (q * n as f64)).abs() < 1e-12 * ratio.max(1.0));
        }
    }

    #[test]
    fn relaxed_family_at_zero_is_factorized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let masks = MaskPartition::new(5, vec![0], vec![vec![1, 2], vec![3, 4]]).unwrap();
        let seed = RelaxedSeed::random(&mut rng, 2, masks.clone()).unwrap();
        let fam = seed.family(0.0).unwrap();
        assert!(is_factorized(&fam.background, &fam.conditionals, &masks, 1e-14).unwrap().passes);
        let b = fam.bound().unwrap();
        assert!(b.kl.abs() < 1e-13 && b.budget.abs() < 1e-13);
    }

    #[test]
    fn relaxed_family_keeps_required_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let masks = MaskPartition::new(5, vec![0], vec![vec![1, 2], vec![3, 4]]).unwrap();
        let seed = RelaxedSeed::random(&mut rng, 2, masks.clone()).unwrap();
        let fam = seed.family(0.4).unwrap();
        let r = is_factorized(&fam.background, &fam.conditionals, &masks, 1e-14).unwrap();
        // Off-mask marginals still agree with the background.
        assert!(r.off_mask_agreement.iter().all(|d| *d < 1e-14));
        // Mask blocks stay independent of each other under the background.
        let bg = &fam.background;
        let prod = bg.product_of_marginals(&[vec![1, 2], vec![3, 4]]).unwrap();
        let joint = bg.marginal_table(&[1, 2, 3, 4]).unwrap();
        assert!(max_abs(&prod, &joint) < 1e-14);
        // But the conditionals are no longer exactly factorized.
        assert!(r.conditional_independence.iter().any(|d| *d > 1e-6));
        let b = fam.bound().unwrap();
        assert!(b.kl <= b.budget);
        assert!(b.kl_unnormalized <= b.budget + 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let d = bern_product(&[0.1, 0.8]);
        let back = DiscreteDistribution::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
