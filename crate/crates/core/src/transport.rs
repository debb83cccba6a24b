//! Wasserstein distances between Gaussians, Gaussian mixtures and sample sets,
//! plus a Monte-Carlo KL estimator.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::linalg::{sym_sqrt, validate_spd};
use crate::samples::SampleSet;

/// Squared Bures–Wasserstein distance between `N(m0, s0)` and `N(m1, s1)`.
pub fn w2_gaussian_sq(m0: &DVector<f64>, s0: &DMatrix<f64>, m1: &DVector<f64>, s1: &DMatrix<f64>) -> Result<f64> {
    if m0.len() != m1.len() || s0.nrows() != m0.len() || s1.nrows() != m1.len() {
        return Err(Error::DimensionMismatch { expected: m0.len(), got: m1.len() });
    }
    validate_spd(s0, "first Gaussian")?;
    validate_spd(s1, "second Gaussian")?;
    Ok(w2_gaussian_sq_unchecked(m0, s0, m1, s1))
}

fn w2_gaussian_sq_unchecked(m0: &DVector<f64>, s0: &DMatrix<f64>, m1: &DVector<f64>, s1: &DMatrix<f64>) -> f64 {
    let r = sym_sqrt(s0);
    let cross = sym_sqrt(&(&r * s1 * &r));
    let bures = s0.trace() + s1.trace() - 2.0 * cross.trace();
    ((m0 - m1).norm_squared() + bures).max(0.0)
}

/// Bures–Wasserstein distance `W2(N(m0, s0), N(m1, s1))`.
pub fn w2_gaussian(m0: &DVector<f64>, s0: &DMatrix<f64>, m1: &DVector<f64>, s1: &DMatrix<f64>) -> Result<f64> {
    Ok(w2_gaussian_sq(m0, s0, m1, s1)?.sqrt())
}

/// Transport plan between two weight vectors, row-major `rows × cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingPlan {
    pub rows: usize,
    pub cols: usize,
    pub mass: Vec<f64>,
}

impl CouplingPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mass[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.mass.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols).map(|j| (0..self.rows).map(|i| self.get(i, j)).sum()).collect()
    }

    /// Writes `source,target,mass` rows for every nonzero entry.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "source,target,mass")?;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let m = self.get(i, j);
                if m > 0.0 {
                    writeln!(f, "{i},{j},{m:.17e}")?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }
}

fn check_weights(w: &[f64], what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Input(format!("{what}: empty weight vector")));
    }
    if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Input(format!("{what}: weights must be finite and nonnegative")));
    }
    Ok(())
}

/// Exact minimum-cost transport between weights `a` and `b` with row-major
/// `cost`. Successive shortest augmenting paths on the residual bipartite
/// graph (Bellman–Ford, so negative residual costs are handled directly).
pub fn solve_transport(a: &[f64], b: &[f64], cost: &[f64]) -> Result<(CouplingPlan, f64)> {
    check_weights(a, "source")?;
    check_weights(b, "target")?;
    let (k, l) = (a.len(), b.len());
    if cost.len() != k * l {
        return Err(Error::DimensionMismatch { expected: k * l, got: cost.len() });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Input("transport costs must be finite".into()));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-10 {
        return Err(Error::Input(format!("infeasible marginals: masses {sa} and {sb} differ")));
    }
    // Round-off can fake tiny negative cycles and leave dust masses behind, so
    // relaxations need a cost-scaled margin and masses below `eps` count as zero.
    let tol = 1e-12 * cost.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let eps = 1e-14 * sa.max(f64::MIN_POSITIVE);
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![0.0; k * l];
    let n = k + l;
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    loop {
        if supply.iter().all(|&s| s <= eps) {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        pred.iter_mut().for_each(|p| *p = None);
        for i in 0..k {
            if supply[i] > eps {
                dist[i] = 0.0;
            }
        }
        for _ in 0..=n {
            let mut changed = false;
            for i in 0..k {
                if dist[i].is_finite() {
                    for j in 0..l {
                        let nd = dist[i] + cost[i * l + j];
                        if nd < dist[k + j] - tol {
                            dist[k + j] = nd;
                            pred[k + j] = Some(i);
                            changed = true;
                        }
                    }
                }
            }
            for i in 0..k {
                for j in 0..l {
                    if supply[i] <= eps && flow[i * l + j] > eps && dist[k + j].is_finite() {
                        let nd = dist[k + j] - cost[i * l + j];
                        if nd < dist[i] - tol {
                            dist[i] = nd;
                            pred[i] = Some(k + j);
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let sink = (0..l)
            .filter(|&j| demand[j] > eps && dist[k + j].is_finite())
            .min_by(|&x, &y| dist[k + x].total_cmp(&dist[k + y]));
        let Some(sink) = sink else { break };
        // Walk back to the root source and find the bottleneck.
        let mut path = vec![k + sink];
        let mut node = k + sink;
        while let Some(p) = pred[node] {
            path.push(p);
            node = p;
            if path.len() > n + 1 {
                return Err(Error::Input("transport solver found a cycle".into()));
            }
        }
        let root = node;
        let mut delta = supply[root].min(demand[sink]);
        for w in path.windows(2) {
            let (to, from) = (w[0], w[1]);
            if from >= k {
                // Backward edge: sink `from` to source `to` cancels flow.
                delta = delta.min(flow[to * l + (from - k)]);
            }
        }
        for w in path.windows(2) {
            let (to, from) = (w[0], w[1]);
            if from < k {
                flow[from * l + (to - k)] += delta;
            } else {
                let e = &mut flow[to * l + (from - k)];
                *e = if *e - delta <= eps { 0.0 } else { *e - delta };
            }
        }
        supply[root] = if supply[root] - delta <= eps { 0.0 } else { supply[root] - delta };
        demand[sink] = if demand[sink] - delta <= eps { 0.0 } else { demand[sink] - delta };
        if delta <= 0.0 {
            break;
        }
    }
    let plan = CouplingPlan { rows: k, cols: l, mass: flow };
    for (s, t) in plan.row_sums().iter().zip(a) {
        if (s - t).abs() > 1e-10 {
            return Err(Error::Input("transport solver failed to meet source marginals".into()));
        }
    }
    let total = plan.mass.iter().zip(cost).map(|(m, c)| m * c).sum();
    Ok((plan, total))
}

/// Mixture Wasserstein distance and its optimal component coupling.
#[derive(Debug, Clone)]
pub struct Mw2 {
    pub value: f64,
    pub plan: CouplingPlan,
    /// Pairwise squared component distances, row-major.
    pub costs: Vec<f64>,
}

/// Largest `K · L` accepted by [`mw2`].
pub const MAX_MW2_PAIRS: usize = 10_000;

/// `MW2(p, q)²` = min over component couplings of `Σ c_kl W2²(p_k, q_l)`.
pub fn mw2(p: &GaussianMixture, q: &GaussianMixture) -> Result<Mw2> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: q.dim() });
    }
    let (k, l) = (p.num_components(), q.num_components());
    if k * l > MAX_MW2_PAIRS {
        return Err(Error::Input(format!("{k}×{l} components exceeds {MAX_MW2_PAIRS} pairs")));
    }
    let costs: Vec<f64> = (0..k * l)
        .into_par_iter()
        .map(|idx| {
            let (a, b) = (&p.components()[idx / l], &q.components()[idx % l]);
            w2_gaussian_sq_unchecked(a.mean(), a.cov(), b.mean(), b.cov())
        })
        .collect();
    let (plan, total) = solve_transport(&p.weights(), &q.weights(), &costs)?;
    Ok(Mw2 { value: total.max(0.0).sqrt(), plan, costs })
}

/// `2 Σ_k w_k Tr(Σ_k)` summed over both mixtures: the gap between `MW2` and `W2`.
pub fn mw2_gap(p: &GaussianMixture, q: &GaussianMixture) -> f64 {
    let part = |g: &GaussianMixture| g.components().iter().map(|c| c.weight() * c.cov().trace()).sum::<f64>();
    2.0 * (part(p) + part(q))
}

/// Interval `[max(0, MW2 − gap), MW2]` guaranteed to contain `W2(p, q)`.
pub fn w2_bracket(p: &GaussianMixture, q: &GaussianMixture) -> Result<(f64, f64)> {
    let m = mw2(p, q)?.value;
    Ok(((m - mw2_gap(p, q)).max(0.0), m))
}

/// Exact W2 between two 1-D empirical laws (unequal sizes allowed).
pub fn w2_empirical_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(w2_sq_1d(a, b)?.sqrt())
}

fn w2_sq_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("W2 needs nonempty sample sets".into()));
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    if xa.len() == xb.len() {
        let s: f64 = xa.iter().zip(&xb).map(|(x, y)| (x - y) * (x - y)).sum();
        return Ok(s / xa.len() as f64);
    }
    // Merge the two quantile step functions.
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        acc += (next - u) * (xa[i] - xb[j]).powi(2);
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    Ok(acc)
}

/// Minimum-cost perfect assignment for a square row-major cost matrix.
pub fn assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::DimensionMismatch { expected: n * n, got: cost.len() });
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    Ok(out)
}

/// Sample size up to which multi-dimensional empirical W2 is solved exactly.
pub const EXACT_ASSIGNMENT_MAX: usize = 2048;
/// Random directions used by the sliced fallback.
pub const SLICED_DIRECTIONS: usize = 256;

/// Empirical W2 between sample sets: exact in 1-D, exact assignment for equal
/// sizes up to [`EXACT_ASSIGNMENT_MAX`], sliced W2 otherwise.
pub fn w2_empirical(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("W2 needs nonempty sample sets".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let d = a.dim();
    if d == 1 {
        return w2_empirical_1d(a.data(), b.data());
    }
    let n = a.len();
    if n == b.len() && n <= EXACT_ASSIGNMENT_MAX {
        let cost: Vec<f64> = (0..n * n)
            .map(|idx| {
                let (x, y) = (a.row(idx / n), b.row(idx % n));
                x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum()
            })
            .collect();
        let perm = assignment(&cost, n)?;
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        return Ok((total / n as f64).sqrt());
    }
    sliced_w2(a, b, SLICED_DIRECTIONS, 0)
}

/// `(mean over random unit directions θ of W2²(θᵀa, θᵀb))^½`.
pub fn sliced_w2(a: &SampleSet, b: &SampleSet, directions: usize, seed: u64) -> Result<f64> {
    let d = a.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..directions)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let project = |s: &SampleSet, th: &[f64]| -> Vec<f64> {
        s.rows().map(|r| r.iter().zip(th).map(|(x, t)| x * t).sum()).collect()
    };
    let total = dirs
        .par_iter()
        .map(|th| w2_sq_1d(&project(a, th), &project(b, th)))
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum::<f64>();
    Ok((total / directions.max(1) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub n: usize,
}

/// `(1/n) Σ log p(x)/q(x)` over `n` draws from `p`, with its standard error.
pub fn kl_monte_carlo<Q: Fn(&[f64]) -> f64>(p: &GaussianMixture, log_q: Q, n: usize, seed: u64) -> Result<KlEstimate> {
    if n < 2 {
        return Err(Error::Input("Monte-Carlo KL needs at least two samples".into()));
    }
    let xs = p.sample(n, seed)?;
    let ratios = xs
        .rows()
        .map(|x| {
            let r = p.log_density_unchecked(x) - log_q(x);
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::SupportViolation(format!("log-ratio {r} at a sample")))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = ratios.iter().sum::<f64>() / n as f64;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(KlEstimate { estimate: mean, stderr: (var / n as f64).sqrt(), n })
}
