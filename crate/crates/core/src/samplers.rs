//! Reverse-diffusion and Langevin samplers driven by exact score fields.
//!
//! Every chain owns a ChaCha8 stream derived from `(seed, chain index)`, so
//! parallel and sequential runs produce identical bits.

use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{GaussianMixture, MAX_DIM};
use crate::samples::{Provenance, SampleSet};
use crate::schedule::{DiffusionSchedule, NoiseLevel, ScheduleKind};

/// A score function at one fixed noise level.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;
    /// Writes `∇ log p(x)` into `out[..dim]`.
    fn score_into(&self, x: &[f64], out: &mut [f64]);
}

/// A family of score fields indexed by noise level.
pub trait ScoreModel: Sync {
    type Field: ScoreField + Send;
    fn dim(&self) -> usize;
    fn field(&self, level: NoiseLevel) -> Result<Self::Field>;
}

impl ScoreField for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        GaussianMixture::score_into(self, x, out);
    }
}

impl ScoreModel for GaussianMixture {
    type Field = GaussianMixture;

    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn field(&self, level: NoiseLevel) -> Result<GaussianMixture> {
        self.noise_scaled(level.scale, level.sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    Langevin,
    #[serde(rename = "pc")]
    PredictorCorrector,
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
            SamplerKind::Langevin => "langevin",
            SamplerKind::PredictorCorrector => "pc",
        }
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            "langevin" => Ok(SamplerKind::Langevin),
            "pc" => Ok(SamplerKind::PredictorCorrector),
            _ => Err(Error::Input(format!("unknown sampler `{s}` (expected ddpm|ddim|langevin|pc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Reverse steps (diffusion samplers) or Langevin iterations (fixed-t).
    pub steps: usize,
    pub corrector_steps: usize,
    /// Langevin step size as a multiple of the current noise variance `σ_t²`.
    pub langevin_step_scale: f64,
    /// Schedule time at which fixed-t Langevin runs.
    pub langevin_t: f64,
    pub schedule: DiffusionSchedule,
    pub seed: u64,
    /// Apply one posterior-mean (Tweedie) step at the end of a reverse run.
    pub denoise_final: bool,
    pub parallel: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 64,
            corrector_steps: 0,
            langevin_step_scale: 0.1,
            langevin_t: 0.0,
            schedule: DiffusionSchedule::default(),
            seed: 0,
            denoise_final: false,
            parallel: true,
        }
    }
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, steps: usize, seed: u64) -> Self {
        Self { kind, steps, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.steps == 0 && self.kind != SamplerKind::Langevin {
            return Err(Error::Input("sampler needs at least one step".into()));
        }
        if !(self.langevin_step_scale > 0.0) || !self.langevin_step_scale.is_finite() {
            return Err(Error::Input(format!(
                "Langevin step scale must be positive, got {}",
                self.langevin_step_scale
            )));
        }
        self.schedule.check_time(self.langevin_t)
    }

    fn provenance(&self, name: &str) -> Provenance {
        let mut p = Provenance::new(name, self.seed);
        p.schedule = serde_json::to_value(&self.schedule).ok();
        p
    }
}

/// Per-chain generator: stream `chain` of the ChaCha8 sequence seeded by `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn run_chains<F>(n: usize, dim: usize, seed: u64, parallel: bool, chain: F) -> Result<Vec<f64>>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) -> Result<()> + Sync,
{
    if n == 0 {
        return Err(Error::Input("sample count must be positive".into()));
    }
    let one = |i: usize| -> Result<Vec<f64>> {
        let mut rng = chain_rng(seed, i);
        let mut x = vec![0.0; dim];
        chain(&mut rng, &mut x)?;
        Ok(x)
    };
    let rows: Vec<Vec<f64>> = if parallel {
        (0..n).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..n).map(one).collect::<Result<_>>()?
    };
    Ok(rows.concat())
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::SamplerDivergence { step })
    }
}

fn gaussian_fill<R: Rng>(rng: &mut R, z: &mut [f64]) {
    for v in z.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Score fields at every grid time, `fields[i]` at `grid[i]`.
fn precompute<M: ScoreModel>(model: &M, schedule: &DiffusionSchedule, grid: &[f64]) -> Result<Vec<M::Field>> {
    grid.iter().map(|&t| model.field(schedule.noise_level(t))).collect()
}

fn init_state<R: Rng>(rng: &mut R, schedule: &DiffusionSchedule, x: &mut [f64]) {
    let s = schedule.noise_level(1.0).sigma;
    gaussian_fill(rng, x);
    x.iter_mut().for_each(|v| *v *= s);
}

fn denoise<F: ScoreField>(field: &F, level: NoiseLevel, x: &mut [f64]) {
    let d = x.len();
    let mut s = [0.0; MAX_DIM];
    field.score_into(x, &mut s);
    let v = level.sigma * level.sigma;
    for i in 0..d {
        x[i] = (x[i] + v * s[i]) / level.scale;
    }
}

/// Probability-flow ODE integrated with Heun steps from `t = 1` to `t = 0`.
pub fn run_ddim<M: ScoreModel>(model: &M, config: &SamplerConfig, n: usize) -> Result<SampleSet> {
    config.validate()?;
    let sched = &config.schedule;
    let grid = sched.time_grid(config.steps);
    let levels: Vec<NoiseLevel> = grid.iter().map(|&t| sched.noise_level(t)).collect();
    let betas: Vec<f64> = grid.iter().map(|&t| sched.vp_beta(t)).collect();
    let fields = precompute(model, sched, &grid)?;
    let d = model.dim();
    let vp = sched.kind == ScheduleKind::VariancePreserving;
    let data = run_chains(n, d, config.seed, config.parallel, |rng, x| {
        init_state(rng, sched, x);
        let mut s = [0.0; MAX_DIM];
        let mut s2 = [0.0; MAX_DIM];
        let mut xt = [0.0; MAX_DIM];
        let mut k1 = [0.0; MAX_DIM];
        for i in 0..config.steps {
            // Drift of the ODE in the integration variable, evaluated at level j.
            let drift = |j: usize, y: &[f64], s: &mut [f64], out: &mut [f64]| {
                fields[j].score_into(y, s);
                for c in 0..d {
                    out[c] = if vp {
                        -0.5 * betas[j] * (y[c] + s[c])
                    } else {
                        -levels[j].sigma * s[c]
                    };
                }
            };
            let h = if vp { grid[i + 1] - grid[i] } else { levels[i + 1].sigma - levels[i].sigma };
            drift(i, x, &mut s, &mut k1);
            for c in 0..d {
                xt[c] = x[c] + h * k1[c];
            }
            if !vp && levels[i + 1].sigma == 0.0 {
                x.copy_from_slice(&xt[..d]);
            } else {
                let mut k2 = [0.0; MAX_DIM];
                drift(i + 1, &xt[..d], &mut s2, &mut k2);
                for c in 0..d {
                    x[c] += 0.5 * h * (k1[c] + k2[c]);
                }
            }
            check_finite(x, i)?;
        }
        if config.denoise_final {
            denoise(&fields[config.steps], levels[config.steps], x);
            check_finite(x, config.steps)?;
        }
        Ok(())
    })?;
    SampleSet::new(d, data, config.provenance("ddim"))
}

/// Shared reverse-SDE loop; `corrector_steps = 0` gives plain DDPM.
fn reverse_sde<M: ScoreModel>(model: &M, config: &SamplerConfig, n: usize, corrector_steps: usize, name: &str) -> Result<SampleSet> {
    config.validate()?;
    let sched = &config.schedule;
    let grid = sched.time_grid(config.steps);
    let levels: Vec<NoiseLevel> = grid.iter().map(|&t| sched.noise_level(t)).collect();
    let betas: Vec<f64> = grid.iter().map(|&t| sched.vp_beta(t)).collect();
    let fields = precompute(model, sched, &grid)?;
    let d = model.dim();
    let vp = sched.kind == ScheduleKind::VariancePreserving;
    let data = run_chains(n, d, config.seed, config.parallel, |rng, x| {
        init_state(rng, sched, x);
        let mut s = [0.0; MAX_DIM];
        let mut z = [0.0; MAX_DIM];
        for i in 0..config.steps {
            fields[i].score_into(x, &mut s);
            gaussian_fill(rng, &mut z[..d]);
            if vp {
                let dt = grid[i] - grid[i + 1];
                let b = betas[i];
                let noise = (b * dt).sqrt();
                for c in 0..d {
                    x[c] += (0.5 * b * x[c] + b * s[c]) * dt + noise * z[c];
                }
            } else {
                let dv = levels[i].sigma.powi(2) - levels[i + 1].sigma.powi(2);
                let noise = dv.sqrt();
                for c in 0..d {
                    x[c] += dv * s[c] + noise * z[c];
                }
            }
            check_finite(x, i)?;
            let eps = config.langevin_step_scale * levels[i + 1].sigma.powi(2);
            if corrector_steps > 0 && eps > 0.0 {
                langevin_steps(&fields[i + 1], x, corrector_steps, eps, rng, i)?;
            }
        }
        if config.denoise_final {
            denoise(&fields[config.steps], levels[config.steps], x);
            check_finite(x, config.steps)?;
        }
        Ok(())
    })?;
    SampleSet::new(d, data, config.provenance(name))
}

/// Reverse SDE with Euler–Maruyama steps.
pub fn run_ddpm<M: ScoreModel>(model: &M, config: &SamplerConfig, n: usize) -> Result<SampleSet> {
    reverse_sde(model, config, n, 0, "ddpm")
}

/// DDPM predictor followed by `corrector_steps` Langevin steps at each new level.
pub fn run_predictor_corrector<M: ScoreModel>(model: &M, config: &SamplerConfig, n: usize) -> Result<SampleSet> {
    reverse_sde(model, config, n, config.corrector_steps, "pc")
}

fn langevin_steps<F: ScoreField, R: Rng>(
    field: &F,
    x: &mut [f64],
    steps: usize,
    eps: f64,
    rng: &mut R,
    report_step: usize,
) -> Result<()> {
    let d = x.len();
    let mut s = [0.0; MAX_DIM];
    let mut z = [0.0; MAX_DIM];
    let half = 0.5 * eps;
    let noise = eps.sqrt();
    for _ in 0..steps {
        field.score_into(x, &mut s);
        gaussian_fill(rng, &mut z[..d]);
        for c in 0..d {
            x[c] += half * s[c] + noise * z[c];
        }
        check_finite(x, report_step)?;
    }
    Ok(())
}

/// Unadjusted Langevin `x ← x + (ε/2) ∇ log p(x) + √ε z` from each row of `init`.
pub fn run_langevin_at_t<F: ScoreField>(
    field: &F,
    init: &SampleSet,
    steps: usize,
    eps: f64,
    seed: u64,
    parallel: bool,
) -> Result<SampleSet> {
    if init.dim() != field.dim() {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: init.dim() });
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Input(format!("Langevin step size must be positive, got {eps}")));
    }
    let mut prov = Provenance::new("langevin", seed);
    prov.schedule = init.provenance.schedule.clone();
    if steps == 0 {
        return SampleSet::new(init.dim(), init.data().to_vec(), prov);
    }
    let d = init.dim();
    let one = |i: usize| -> Result<Vec<f64>> {
        let mut rng = chain_rng(seed, i);
        let mut x = init.row(i).to_vec();
        for k in 0..steps {
            langevin_steps(field, &mut x, 1, eps, &mut rng, k)?;
        }
        Ok(x)
    };
    let rows: Vec<Vec<f64>> = if parallel {
        (0..init.len()).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..init.len()).map(one).collect::<Result<_>>()?
    };
    SampleSet::new(d, rows.concat(), prov)
}

/// Fixed-t Langevin for a score model, with `ε = langevin_step_scale · σ_t²`.
pub fn run_langevin<M: ScoreModel>(model: &M, config: &SamplerConfig, init: &SampleSet) -> Result<SampleSet> {
    config.validate()?;
    let lvl = config.schedule.noise_level(config.langevin_t);
    if lvl.sigma <= 0.0 {
        return Err(Error::Input("fixed-t Langevin needs a positive noise level".into()));
    }
    let field = model.field(lvl)?;
    let eps = config.langevin_step_scale * lvl.sigma * lvl.sigma;
    let mut out = run_langevin_at_t(&field, init, config.steps, eps, config.seed, config.parallel)?;
    out.provenance.schedule = serde_json::to_value(&config.schedule).ok();
    Ok(out)
}

/// Dispatches on `config.kind`; fixed-t Langevin starts from `σ_t`-scaled Gaussian noise.
pub fn run_sampler<M: ScoreModel>(model: &M, config: &SamplerConfig, n: usize) -> Result<SampleSet> {
    match config.kind {
        SamplerKind::Ddim => run_ddim(model, config, n),
        SamplerKind::Ddpm => run_ddpm(model, config, n),
        SamplerKind::PredictorCorrector => run_predictor_corrector(model, config, n),
        SamplerKind::Langevin => {
            let d = model.dim();
            let s = config.schedule.noise_level(1.0).sigma;
            let init = run_chains(n, d, config.seed ^ 0x9e37_79b9_7f4a_7c15, config.parallel, |rng, x| {
                gaussian_fill(rng, x);
                x.iter_mut().for_each(|v| *v *= s);
                Ok(())
            })?;
            let init = SampleSet::new(d, init, Provenance::new("gaussian_init", config.seed))?;
            run_langevin(model, config, &init)
        }
    }
}

/// Fraction of samples whose nearest mean (Euclidean) is each entry of `means`.
pub fn nearest_mean_occupancy(samples: &SampleSet, means: &[DVector<f64>]) -> Result<Vec<f64>> {
    if means.is_empty() {
        return Err(Error::Input("need at least one cluster mean".into()));
    }
    for m in means {
        if m.len() != samples.dim() {
            return Err(Error::DimensionMismatch { expected: samples.dim(), got: m.len() });
        }
    }
    let mut counts = vec![0usize; means.len()];
    for r in samples.rows() {
        let best = means
            .iter()
            .enumerate()
            .map(|(k, m)| (k, r.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        counts[best] += 1;
    }
    let n = samples.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target() -> GaussianMixture {
        GaussianMixture::isotropic(&[1.0, -0.5], 0.09).unwrap()
    }

    #[test]
    fn ddim_recovers_gaussian_mean() {
        let cfg = SamplerConfig::new(SamplerKind::Ddim, 64, 1);
        let s = run_ddim(&target(), &cfg, 20_000).unwrap();
        let m = s.mean();
        assert!((m[0] - 1.0).abs() < 0.02 && (m[1] + 0.5).abs() < 0.02, "{m:?}");
    }

    #[test]
    fn parallel_matches_sequential() {
        for kind in [SamplerKind::Ddim, SamplerKind::Ddpm, SamplerKind::PredictorCorrector, SamplerKind::Langevin] {
            let mut cfg = SamplerConfig::new(kind, 16, 5);
            cfg.corrector_steps = 2;
            let a = run_sampler(&target(), &cfg, 200).unwrap();
            cfg.parallel = false;
            let b = run_sampler(&target(), &cfg, 200).unwrap();
            assert_eq!(a.data(), b.data(), "{kind:?}");
        }
    }

    #[test]
    fn pc_without_corrector_is_ddpm() {
        let cfg = SamplerConfig::new(SamplerKind::PredictorCorrector, 32, 9);
        let a = run_predictor_corrector(&target(), &cfg, 300).unwrap();
        let b = run_ddpm(&target(), &cfg, 300).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_langevin_steps_returns_init() {
        let init = target().sample(10, 3).unwrap();
        let out = run_langevin_at_t(&target(), &init, 0, 0.01, 1, true).unwrap();
        assert_eq!(out.data(), init.data());
    }

    #[test]
    fn divergence_is_reported() {
        let init = target().sample(4, 3).unwrap();
        let err = run_langevin_at_t(&target(), &init, 100, 1e6, 1, false).unwrap_err();
        assert!(matches!(err, Error::SamplerDivergence { .. }), "{err:?}");
    }

    #[test]
    fn occupancy_counts() {
        let s = SampleSet::from_rows(&[vec![0.1], vec![0.9], vec![1.2]], Provenance::new("t", 0)).unwrap();
        let occ = nearest_mean_occupancy(&s, &[DVector::from_vec(vec![0.0]), DVector::from_vec(vec![1.0])]).unwrap();
        assert_eq!(occ, vec![1.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn sampler_names_parse() {
        for k in ["ddpm", "ddim", "langevin", "pc"] {
            assert_eq!(k.parse::<SamplerKind>().unwrap().name(), k);
        }
        assert!("heun".parse::<SamplerKind>().is_err());
    }
}
