//! Named, seeded experiments. Each returns an [`ExperimentReport`] whose verdict
//! is computed from checks declared inside the report, and optionally writes
//! `report.json`, `metrics.csv` and plot-ready CSV tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::compose::{compose_gmm_closed, mean_diff_heuristic, read_embeddings, CompositionSpec};
use crate::discrete::{chi_square_statistic, clutter_family, compose_exact, projective_check, MaskPartition, RelaxedSeed};
use crate::error::{Error, Result};
use crate::families::{random_factorized_spec, Counterexample, SingleIndexFamily};
use crate::gmm::{GaussianMixture, LinearMap};
use crate::samplers::{nearest_mean_occupancy, run_langevin_at_t, run_sampler, SamplerConfig, SamplerKind, ScoreModel};
use crate::samples::{Provenance, SampleSet};
use crate::schedule::DiffusionSchedule;
use crate::stats::{gmm_cdf_1d, ks_critical_1pct, ks_critical_two_sample_1pct, ks_one_sample, ks_two_sample, w2_to_gmm_1d};
use crate::transport::{mw2, mw2_gap, w2_bracket};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Lt,
    Le,
    Gt,
    Ge,
    Between,
}

/// One declared pass condition on a named metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub metric: String,
    pub relation: Relation,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    pub value: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub params: BTreeMap<String, Value>,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub verdict: bool,
    pub artifacts: Vec<String>,
    /// Metrics shown first in one-line summaries.
    #[serde(default)]
    pub headline: Vec<String>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    fn new(name: &str, params: &Params) -> Self {
        Self {
            name: name.to_string(),
            params: params.values.clone(),
            metrics: BTreeMap::new(),
            checks: Vec::new(),
            verdict: true,
            artifacts: Vec::new(),
            headline: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    fn check_inner(&mut self, metric: &str, relation: Relation, threshold: f64, upper: Option<f64>) -> Result<()> {
        let value = *self
            .metrics
            .get(metric)
            .ok_or_else(|| Error::Input(format!("check references unknown metric `{metric}`")))?;
        let passed = match relation {
            Relation::Lt => value < threshold,
            Relation::Le => value <= threshold,
            Relation::Gt => value > threshold,
            Relation::Ge => value >= threshold,
            Relation::Between => value >= threshold && value <= upper.unwrap_or(f64::INFINITY),
        };
        self.verdict &= passed;
        self.checks.push(Check { metric: metric.to_string(), relation, threshold, upper, value, passed });
        Ok(())
    }

    /// Declares `metric <relation> threshold`.
    pub fn check(&mut self, metric: &str, relation: Relation, threshold: f64) -> Result<()> {
        self.check_inner(metric, relation, threshold, None)
    }

    /// Declares `lo <= metric <= hi`.
    pub fn check_between(&mut self, metric: &str, lo: f64, hi: f64) -> Result<()> {
        self.check_inner(metric, Relation::Between, lo, Some(hi))
    }

    pub fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// `metric,value` lines in name order.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k},{v:e}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Int,
    Float,
    FloatList,
    Bool,
    Str,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub kind: ParamKind,
    /// Default value as JSON text.
    pub default: &'static str,
    pub help: &'static str,
}

impl ParamSpec {
    const fn new(name: &'static str, kind: ParamKind, default: &'static str, help: &'static str) -> Self {
        Self { name, kind, default, help }
    }

    /// Coerces `v` to this parameter's type.
    pub fn coerce(&self, v: &Value) -> Result<Value> {
        let bad = || Error::Input(format!("parameter `{}` expects {:?}, got {v}", self.name, self.kind));
        Ok(match self.kind {
            ParamKind::Int => match v {
                Value::Number(n) if n.is_u64() => v.clone(),
                Value::Number(n) if n.as_f64().is_some_and(|f| f >= 0.0 && f.fract() == 0.0) => {
                    Value::from(n.as_f64().unwrap_or(0.0) as u64)
                }
                _ => return Err(bad()),
            },
            ParamKind::Float => match v.as_f64() {
                Some(f) if f.is_finite() => Value::from(f),
                _ => return Err(bad()),
            },
            ParamKind::FloatList => match v {
                Value::Array(xs) => Value::Array(
                    xs.iter()
                        .map(|x| x.as_f64().filter(|f| f.is_finite()).map(Value::from).ok_or_else(bad))
                        .collect::<Result<_>>()?,
                ),
                Value::Number(_) => Value::Array(vec![Value::from(v.as_f64().ok_or_else(bad)?)]),
                _ => return Err(bad()),
            },
            ParamKind::Bool => match v {
                Value::Bool(_) => v.clone(),
                _ => return Err(bad()),
            },
            ParamKind::Str => match v {
                Value::String(_) => v.clone(),
                _ => Value::String(v.to_string()),
            },
        })
    }
}

/// Validated parameter values for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    values: BTreeMap<String, Value>,
}

impl Params {
    fn get(&self, key: &str) -> Result<&Value> {
        self.values.get(key).ok_or_else(|| Error::Input(format!("missing parameter `{key}`")))
    }

    pub fn int(&self, key: &str) -> Result<usize> {
        self.get(key)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::Input(format!("parameter `{key}` is not an integer")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.get(key)?.as_u64().ok_or_else(|| Error::Input(format!("parameter `{key}` is not an integer")))
    }

    pub fn float(&self, key: &str) -> Result<f64> {
        self.get(key)?.as_f64().ok_or_else(|| Error::Input(format!("parameter `{key}` is not a number")))
    }

    pub fn floats(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)?
            .as_array()
            .and_then(|xs| xs.iter().map(Value::as_f64).collect())
            .ok_or_else(|| Error::Input(format!("parameter `{key}` is not a list of numbers")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.get(key)?.as_bool().ok_or_else(|| Error::Input(format!("parameter `{key}` is not a boolean")))
    }

    pub fn string(&self, key: &str) -> Result<String> {
        self.get(key)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Input(format!("parameter `{key}` is not a string")))
    }

    pub fn values(&self) -> &BTreeMap<String, Value> {
        &self.values
    }

    /// Short hash of the canonical JSON parameter map.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.values).unwrap_or_default();
        Sha256::digest(json.as_bytes()).iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

type Runner = fn(&Params, &Artifacts) -> Result<ExperimentReport>;

pub struct Experiment {
    pub name: &'static str,
    pub summary: &'static str,
    pub params: Vec<ParamSpec>,
    run: Runner,
}

impl Experiment {
    /// Defaults overlaid with `overrides`; unknown keys and ill-typed values are errors.
    pub fn params(&self, overrides: &BTreeMap<String, Value>) -> Result<Params> {
        let mut values = BTreeMap::new();
        for p in &self.params {
            let v: Value = serde_json::from_str(p.default)
                .map_err(|e| Error::Parse(format!("default for `{}`: {e}", p.name)))?;
            values.insert(p.name.to_string(), v);
        }
        for (k, v) in overrides {
            let spec = self.params.iter().find(|p| p.name == k).ok_or_else(|| {
                Error::Input(format!(
                    "unknown parameter `{k}` for {} (accepted: {})",
                    self.name,
                    self.params.iter().map(|p| p.name).collect::<Vec<_>>().join(", ")
                ))
            })?;
            values.insert(k.clone(), spec.coerce(v)?);
        }
        Ok(Params { values })
    }

    pub fn run(&self, params: &Params, out_root: Option<&Path>) -> Result<ExperimentReport> {
        let dir = out_root.map(|r| r.join(format!("{}-{}", self.name, params.hash())));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        let artifacts = Artifacts { dir: dir.clone() };
        let mut report = (self.run)(params, &artifacts)?;
        report.artifacts = artifacts.list();
        if let Some(d) = &dir {
            std::fs::write(d.join("metrics.csv"), report.metrics_csv())?;
            std::fs::write(d.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        }
        Ok(report)
    }

    pub fn output_dir(&self, params: &Params, out_root: &Path) -> PathBuf {
        out_root.join(format!("{}-{}", self.name, params.hash()))
    }
}

/// Output directory for plot tables and sample files (absent in dry runs).
pub struct Artifacts {
    dir: Option<PathBuf>,
}

impl Artifacts {
    fn list(&self) -> Vec<String> {
        let Some(d) = &self.dir else { return Vec::new() };
        let mut names: Vec<String> = std::fs::read_dir(d)
            .map(|rd| {
                rd.filter_map(|e| e.ok())
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .filter(|n| n != "report.json" && n != "metrics.csv")
                    .collect()
            })
            .unwrap_or_default();
        names.sort();
        names
    }

    fn samples(&self, name: &str, s: &SampleSet) -> Result<()> {
        if let Some(d) = &self.dir {
            s.write_csv(&d.join(name))?;
        }
        Ok(())
    }

    fn table(&self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let Some(d) = &self.dir else { return Ok(()) };
        let mut f = std::io::BufWriter::new(std::fs::File::create(d.join(name))?);
        writeln!(f, "{}", header.join(","))?;
        for r in rows {
            writeln!(f, "{}", r.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

fn seed_param() -> ParamSpec {
    ParamSpec::new("seed", ParamKind::Int, "0", "random seed")
}

fn sampler_params(n: &'static str, sigma_max: &'static str) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new("n_samples", ParamKind::Int, n, "number of samples"),
        ParamSpec::new("sigma_max", ParamKind::Float, sigma_max, "largest noise level of the VE schedule"),
        ParamSpec::new("sigma_min", ParamKind::Float, "0.02", "smallest noise level of the VE schedule"),
        ParamSpec::new("sampler", ParamKind::Str, "\"ddim\"", "ddpm | ddim | langevin | pc"),
        ParamSpec::new("steps", ParamKind::Int, "64", "reverse-diffusion steps"),
    ]
}

/// The experiment catalog.
pub fn catalog() -> Vec<Experiment> {
    use ParamKind::*;
    vec![
        Experiment {
            name: "exp_factorized",
            summary: "Sample a random factorized composition and test projected marginals",
            params: [
                vec![
                    ParamSpec::new("dim", Int, "4", "ambient dimension"),
                    ParamSpec::new("blocks", Int, "2", "number of conditional blocks"),
                    ParamSpec::new("orthogonal", Bool, "false", "also sample in randomly rotated coordinates"),
                    seed_param(),
                ],
                sampler_params("20000", "1000"),
            ]
            .concat(),
            run: exp_factorized,
        },
        Experiment {
            name: "exp_counterexample",
            summary: "Closed-form weights, MW2 bounds and sampler occupancy on the non-orthogonal pair",
            params: vec![
                ParamSpec::new("a", Float, "1.0", "shear strength in (0, 1]"),
                ParamSpec::new("tau", Float, "0.02", "component scale"),
                ParamSpec::new("n_samples", Int, "10000", "samples per sampler"),
                ParamSpec::new("steps", Int, "64", "DDIM steps"),
                ParamSpec::new("langevin_steps", Int, "500", "Langevin iterations at the smallest noise level"),
                ParamSpec::new("init_noise", Float, "0.05", "jitter added to the mixed Langevin initialization"),
                seed_param(),
            ],
            run: exp_counterexample,
        },
        Experiment {
            name: "exp_bayes_binary",
            summary: "Diagonal optimum of Bayes versus empty-background compositions",
            params: [
                vec![
                    ParamSpec::new("n", Int, "4", "number of single-index conditionals"),
                    ParamSpec::new("sigma_grid", FloatList, "[0.1, 0.25, 0.5]", "component scales"),
                    seed_param(),
                ],
                sampler_params("2000", "50"),
            ]
            .concat(),
            run: exp_bayes_binary,
        },
        Experiment {
            name: "exp_clutter",
            summary: "Chi-square statistic and projectivity gap of the cluttered Bernoulli family",
            params: vec![
                ParamSpec::new("n", Int, "10", "number of binary coordinates"),
                ParamSpec::new("q", Float, "0.5", "background Bernoulli probability"),
                ParamSpec::new("n_min", Int, "4", "smallest n in the sweep"),
                ParamSpec::new("n_max", Int, "14", "largest n in the sweep"),
                seed_param(),
            ],
            run: exp_clutter,
        },
        Experiment {
            name: "exp_relaxed_fc",
            summary: "Exact KL of perturbed factorized families against their slack budget",
            params: vec![
                ParamSpec::new("eta_grid", FloatList, "[0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5]", "perturbation strengths"),
                ParamSpec::new("families", Int, "100", "random families per strength"),
                ParamSpec::new("alphabet", Int, "2", "states per coordinate"),
                seed_param(),
            ],
            run: exp_relaxed_fc,
        },
        Experiment {
            name: "exp_heuristic",
            summary: "Cosine similarities of mean-difference vectors",
            params: vec![
                ParamSpec::new("embeddings", Str, "\"\"", "CSV of concept embeddings (empty: synthetic families)"),
                ParamSpec::new("dim", Int, "8", "synthetic dimension"),
                ParamSpec::new("blocks", Int, "3", "synthetic number of concepts"),
                seed_param(),
            ],
            run: exp_heuristic,
        },
    ]
}

pub fn find(name: &str) -> Result<Experiment> {
    catalog()
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::UnknownExperiment(name.to_string()))
}

/// Looks up `name`, applies `overrides` and runs it.
pub fn run_named(name: &str, overrides: &BTreeMap<String, Value>, out_root: Option<&Path>) -> Result<ExperimentReport> {
    let e = find(name)?;
    let p = e.params(overrides)?;
    e.run(&p, out_root)
}

fn sampler_config(p: &Params) -> Result<SamplerConfig> {
    let kind: SamplerKind = p.string("sampler")?.parse()?;
    let mut cfg = SamplerConfig::new(kind, p.int("steps")?, p.u64("seed")?);
    cfg.schedule = DiffusionSchedule::ve_geometric(p.float("sigma_min")?, p.float("sigma_max")?, cfg.steps.max(1))?;
    if kind == SamplerKind::PredictorCorrector {
        cfg.corrector_steps = 1;
    }
    if kind == SamplerKind::Langevin {
        // Fixed-t Langevin from broad noise needs many more iterations than reverse steps.
        cfg.langevin_t = 0.0;
        cfg.steps = cfg.steps.max(1) * 50;
    }
    Ok(cfg)
}

/// Law of coordinate `c` under the projective composition of a factorized spec,
/// forward-noised to `level`.
pub fn ideal_coordinate_marginal(spec: &CompositionSpec, c: usize, scale: f64, sigma: f64) -> Result<GaussianMixture> {
    let masks = spec
        .masks
        .as_ref()
        .ok_or_else(|| Error::Input("ideal marginal needs a mask partition".into()))?;
    let owner = masks.blocks.iter().position(|b| b.contains(&c));
    let src = match owner {
        Some(i) => &spec.conditionals[i],
        None => &spec.background,
    };
    src.marginal(&[c])?.noise_scaled(scale, sigma)
}

/// Per-coordinate KS statistics and W2 of `samples` against the ideal marginals.
pub fn marginal_fit(spec: &CompositionSpec, samples: &SampleSet, config: &SamplerConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let lvl = config.schedule.noise_level(0.0);
    let (scale, sigma) = if config.denoise_final { (1.0, 0.0) } else { (lvl.scale, lvl.sigma) };
    let mut ks = Vec::new();
    let mut w2 = Vec::new();
    for c in 0..spec.dim() {
        let target = ideal_coordinate_marginal(spec, c, scale, sigma)?;
        let col = samples.column(c);
        ks.push(ks_one_sample(&col, |x| gmm_cdf_1d(&target, x).unwrap_or(f64::NAN))?);
        w2.push(w2_to_gmm_1d(&col, &target)?);
    }
    Ok((ks, w2))
}

/// Samples `spec` in coordinates rotated by `rotation`, then maps back.
pub fn sample_rotated(spec: &CompositionSpec, rotation: &LinearMap, config: &SamplerConfig, n: usize) -> Result<SampleSet> {
    let rotated = spec.pushforward(rotation)?;
    let s = run_sampler(&rotated, config, n)?;
    let mut prov = s.provenance.clone();
    prov.sampler = format!("{}+rotation", prov.sampler);
    s.map_rows(s.dim(), prov, |r| rotation.apply_inverse(r))
}

fn exp_factorized(p: &Params, out: &Artifacts) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new("exp_factorized", p);
    let (dim, k, n) = (p.int("dim")?, p.int("blocks")?, p.int("n_samples")?);
    let seed = p.u64("seed")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_factorized_spec(&mut rng, dim, k, false)?;
    let cfg = sampler_config(p)?;
    let mut samples = run_sampler(&spec, &cfg, n)?;
    samples.provenance.spec_hash = Some(spec.hash());
    out.samples("samples.csv", &samples)?;
    let (ks, w2) = marginal_fit(&spec, &samples, &cfg)?;
    let mut rows = Vec::new();
    for c in 0..dim {
        r.metric(format!("ks_x{c}"), ks[c]);
        r.metric(format!("w2_x{c}"), w2[c]);
        rows.push(vec![c as f64, ks[c], w2[c]]);
    }
    r.metric("ks_max", ks.iter().copied().fold(0.0, f64::max));
    r.metric("w2_max", w2.iter().copied().fold(0.0, f64::max));
    r.metric("ks_critical", ks_critical_1pct(n));
    let crit = ks_critical_1pct(n);
    r.check("ks_max", Relation::Lt, crit)?;
    r.check("w2_max", Relation::Lt, 0.03)?;
    if p.bool("orthogonal")? {
        let q = LinearMap::random_orthogonal(dim, &mut rng);
        let mut rcfg = cfg.clone();
        rcfg.seed = seed.wrapping_add(1);
        let rotated = sample_rotated(&spec, &q, &rcfg, n)?;
        out.samples("samples_rotated.csv", &rotated)?;
        let (ks_r, _) = marginal_fit(&spec, &rotated, &cfg)?;
        let mut worst: f64 = 0.0;
        for c in 0..dim {
            let d = ks_two_sample(&samples.column(c), &rotated.column(c))?;
            r.metric(format!("ks2_x{c}"), d);
            worst = worst.max(d);
            rows[c].push(ks_r[c]);
            rows[c].push(d);
        }
        r.metric("ks2_max", worst);
        r.metric("ks2_critical", ks_critical_two_sample_1pct(n, n));
        r.metric("ks_rotated_max", ks_r.iter().copied().fold(0.0, f64::max));
        r.check("ks2_max", Relation::Lt, ks_critical_two_sample_1pct(n, n))?;
        r.check("ks_rotated_max", Relation::Lt, crit)?;
        out.table("marginal_fit.csv", &["coord", "ks", "w2", "ks_rotated", "ks_two_sample"], &rows)?;
    } else {
        out.table("marginal_fit.csv", &["coord", "ks", "w2"], &rows)?;
    }
    if k == 0 {
        r.note("no conditionals: the composition is the background itself");
    }
    Ok(r)
}

/// Bound quantities for the counterexample at noise level `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CounterexampleBounds {
    /// `MW2(p̂⁰, p̂^t)`.
    pub mw2_clean_vs_noised: f64,
    /// Lower and upper ends of the interval containing `W2(p̂⁰, p̂^t)`.
    pub bracket_lower: f64,
    pub bracket_upper: f64,
    /// `MW2(N_t[q⁰], q^t)` between the ideal path and the followed path.
    pub path_mw2: f64,
    /// `MW2 − 2 Σ w Tr(Σ)` lower bound on `W2(N_t[q⁰], q^t)`.
    pub path_lower: f64,
}

pub fn counterexample_bounds(ce: &Counterexample, sigma: f64) -> Result<CounterexampleBounds> {
    let clean = ce.composed_at(0.0)?;
    let noised = ce.composed_at(sigma)?;
    let (lo, hi) = w2_bracket(&clean, &noised)?;
    let ideal = ce.ideal_path_at(sigma)?;
    let m = mw2(&ideal, &noised)?.value;
    Ok(CounterexampleBounds {
        mw2_clean_vs_noised: hi,
        bracket_lower: lo,
        bracket_upper: hi,
        path_mw2: m,
        path_lower: m - mw2_gap(&ideal, &noised),
    })
}

/// Max over `points` of `|log C̃(x) − log Ĉ(x) − log Z|`, comparing the numeric
/// unnormalized composition with the closed-form mixture and its normalizer.
pub fn closed_form_residual(spec: &CompositionSpec, points: &[Vec<f64>]) -> Result<f64> {
    let closed = compose_gmm_closed(spec)?;
    points.iter().try_fold(0.0f64, |acc, x| {
        let lhs = spec.unnormalized_log_density(x)?;
        let rhs = closed.mixture.log_density(x)? + closed.log_normalizer;
        Ok(acc.max((lhs - rhs).abs()))
    })
}

/// Draws of `x_0 + x_1 + jitter` with `x_i` exact samples of each conditional.
pub fn mixed_initialization(ce: &Counterexample, n: usize, jitter: f64, seed: u64) -> Result<SampleSet> {
    let a = ce.p0().sample(n, seed)?;
    let b = ce.p1().sample(n, seed.wrapping_add(1))?;
    let z = GaussianMixture::isotropic(&[0.0; 4], 1.0)?.sample(n, seed.wrapping_add(2))?;
    let data: Vec<f64> = (0..n * 4).map(|i| a.data()[i] + b.data()[i] + jitter * z.data()[i]).collect();
    SampleSet::new(4, data, Provenance::new("mixed_init", seed))
}

fn exp_counterexample(p: &Params, out: &Artifacts) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new("exp_counterexample", p);
    let (a, tau) = (p.float("a")?, p.float("tau")?);
    let ce = Counterexample::new(a, tau)?;
    let seed = p.u64("seed")?;
    let n = p.int("n_samples")?;
    let spec = ce.spec();

    // Closed-form weights and numeric composition.
    let mut weight_res: f64 = 0.0;
    let mut dens_res: f64 = 0.0;
    for (i, &sigma) in [0.0, tau, 0.5, 1.0].iter().enumerate() {
        let noised = spec.noise_ve(sigma)?;
        let closed = compose_gmm_closed(&noised)?;
        for (w, e) in closed.mixture.weights().iter().zip(ce.composed_weights(sigma)) {
            weight_res = weight_res.max((w - e).abs());
        }
        let pts = closed.mixture.sample(200, seed.wrapping_add(10 + i as u64))?;
        let pts: Vec<Vec<f64>> = pts.rows().map(<[f64]>::to_vec).collect();
        dens_res = dens_res.max(closed_form_residual(&noised, &pts)?);
    }
    r.metric("weight_residual", weight_res);
    r.metric("log_density_residual", dens_res);
    r.check("weight_residual", Relation::Lt, 1e-12)?;
    r.check("log_density_residual", Relation::Lt, 1e-8)?;
    r.metric("xi_at_tau", ce.xi(tau));
    r.metric("log_eps_at_tau", ce.log_epsilon(tau));
    r.metric("eps_at_tau", ce.epsilon(tau));

    // MW2 bounds at σ = τ.
    let b = counterexample_bounds(&ce, tau)?;
    r.metric("bracket_lower", b.bracket_lower);
    r.metric("bracket_upper", b.bracket_upper);
    r.metric("path_mw2", b.path_mw2);
    r.metric("path_lower", b.path_lower);
    let tau2 = tau * tau;
    if a == 1.0 && tau2 < 1.0 / 66.0 {
        r.check("bracket_lower", Relation::Ge, 0.5)?;
        r.check("bracket_upper", Relation::Le, 2.0)?;
    }
    if a == 1.0 && tau2 < 1.0 / 82.0 {
        r.check("path_lower", Relation::Ge, 0.5)?;
    }
    let sigmas: Vec<f64> = (0..=40).map(|i| tau * 10f64.powf(-2.0 + 4.0 * i as f64 / 40.0)).collect();
    let mut path_max: f64 = 0.0;
    let mut weight_rows = Vec::new();
    for &s in &sigmas {
        let m = counterexample_bounds(&ce, s)?.path_mw2;
        path_max = path_max.max(m);
        let w = ce.composed_weights(s);
        weight_rows.push(vec![s, ce.xi(s), ce.log_epsilon(s), w[0], w[1], w[2], w[3], m]);
    }
    out.table("weights_vs_sigma.csv", &["sigma", "xi", "log_eps", "w0", "w1", "w2", "w3", "path_mw2"], &weight_rows)?;
    r.metric("path_mw2_max", path_max);
    r.metric("path_cap", std::f64::consts::SQRT_2 / tau);
    r.check("path_mw2_max", Relation::Le, std::f64::consts::SQRT_2 / tau)?;

    // Lipschitz continuity of each conditional along the noising path.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratio: f64 = 0.0;
    for _ in 0..50 {
        let (s0, s1): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        for g in [ce.p0(), ce.p1()] {
            let d = mw2(&g.noise_ve(s0)?, &g.noise_ve(s1)?)?.value;
            let cap = ((g.dim() * g.num_components()) as f64).sqrt() * (s0 - s1).abs();
            if cap > 0.0 {
                ratio = ratio.max(d / cap);
            }
        }
    }
    r.metric("lipschitz_ratio_max", ratio);
    r.check("lipschitz_ratio_max", Relation::Le, 1.0)?;

    // Sampler occupancy.
    let means = ce.composed_means();
    let mut cfg = SamplerConfig::new(SamplerKind::Ddim, p.int("steps")?, seed);
    let ddim = run_sampler(&spec, &cfg, n)?;
    let occ_ddim = nearest_mean_occupancy(&ddim, &means)?;
    out.samples("samples_ddim.csv", &ddim)?;

    cfg.kind = SamplerKind::Langevin;
    cfg.steps = p.int("langevin_steps")?;
    cfg.langevin_t = 0.0;
    let init = mixed_initialization(&ce, n, p.float("init_noise")?, seed.wrapping_add(100))?;
    let lvl = cfg.schedule.noise_level(0.0);
    let field = spec.field(lvl)?;
    let eps = cfg.langevin_step_scale * lvl.sigma * lvl.sigma;
    let ld = run_langevin_at_t(&field, &init, cfg.steps, eps, seed.wrapping_add(200), true)?;
    let occ_ld = nearest_mean_occupancy(&ld, &means)?;
    out.samples("samples_langevin.csv", &ld)?;

    let w_min = ce.composed_weights(lvl.sigma);
    let mut occ_rows = Vec::new();
    for k in 0..4 {
        r.metric(format!("ddim_occupancy_{k}"), occ_ddim[k]);
        r.metric(format!("langevin_occupancy_{k}"), occ_ld[k]);
        occ_rows.push(vec![k as f64, 0.25, w_min[k], occ_ddim[k], occ_ld[k]]);
    }
    out.table("occupancy.csv", &["cluster", "target", "weight_sigma_min", "ddim", "langevin"], &occ_rows)?;
    let skew = occ_ddim[0].min(occ_ddim[3]) - occ_ddim[1].max(occ_ddim[2]);
    r.metric("ddim_skew", skew);
    r.check("ddim_skew", Relation::Gt, 0.0)?;
    if a == 1.0 && tau <= 0.05 {
        r.check("ddim_occupancy_1", Relation::Lt, 0.05)?;
        r.check("ddim_occupancy_2", Relation::Lt, 0.05)?;
    }
    for k in 0..4 {
        r.check_between(&format!("langevin_occupancy_{k}"), 0.15, 0.35)?;
    }
    r.note("Langevin starts from sums of exact conditional draws; at the smallest noise level chains do not cross between clusters");
    Ok(r)
}

/// Uniform grid of `points` values on `[lo, hi]`.
pub fn alpha_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Argmax over `grid` of the unnormalized composed log-density along `α·(1, …, 1)`.
pub fn diagonal_argmax(spec: &CompositionSpec, grid: &[f64]) -> Result<(f64, Vec<f64>)> {
    let d = spec.dim();
    let vals = grid
        .iter()
        .map(|&a| spec.unnormalized_log_density(&vec![a; d]))
        .collect::<Result<Vec<f64>>>()?;
    let best = vals
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| grid[i])
        .unwrap_or(f64::NAN);
    Ok((best, vals))
}

fn exp_bayes_binary(p: &Params, out: &Artifacts) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new("exp_bayes_binary", p);
    let n = p.int("n")?;
    let sigmas = p.floats("sigma_grid")?;
    if sigmas.is_empty() {
        return Err(Error::Input("sigma_grid must not be empty".into()));
    }
    let grid = alpha_grid(-0.2, 1.2, 1001);
    let cell = grid[1] - grid[0];
    r.metric("grid_cell", cell);
    r.metric("alpha_expected_bayes", 1.0 / n as f64);
    for (i, &s) in sigmas.iter().enumerate() {
        let fam = SingleIndexFamily::new(n, s)?;
        let (ab, vb) = diagonal_argmax(&fam.bayes_spec(), &grid)?;
        let (ae, ve) = diagonal_argmax(&fam.empty_spec(), &grid)?;
        r.metric(format!("alpha_bayes_{i}"), ab);
        r.metric(format!("alpha_empty_{i}"), ae);
        r.metric(format!("alpha_bayes_error_{i}"), (ab - 1.0 / n as f64).abs());
        r.metric(format!("alpha_empty_error_{i}"), (ae - 1.0).abs());
        r.check(&format!("alpha_bayes_error_{i}"), Relation::Le, 2.0 * cell)?;
        r.check(&format!("alpha_empty_error_{i}"), Relation::Le, 2.0 * cell)?;
        if i == 0 {
            let rows: Vec<Vec<f64>> = grid.iter().zip(vb.iter().zip(&ve)).map(|(a, (b, e))| vec![*a, *b, *e]).collect();
            out.table("diagonal.csv", &["alpha", "log_bayes", "log_empty"], &rows)?;
        }
    }
    let fam = SingleIndexFamily::new(n, sigmas[0])?;
    let cfg = sampler_config(p)?;
    let ns = p.int("n_samples")?;
    for (label, spec) in [("bayes", fam.bayes_spec()), ("empty", fam.empty_spec())] {
        let s = run_sampler(&spec, &cfg, ns)?;
        let m = s.mean();
        r.metric(format!("mean_coordinate_{label}"), m.iter().sum::<f64>() / n as f64);
        out.samples(&format!("samples_{label}.csv"), &s)?;
    }
    r.note(format!(
        "samples drawn with {} ({} steps) from exact composed scores at sigma = {}; sample means depend on the sampler and step count",
        cfg.kind.name(),
        cfg.steps,
        sigmas[0]
    ));
    Ok(r)
}

/// TV distance between the Bayes-background and true-background compositions of
/// conditionals `subset` in the cluttered family, plus the projectivity error of
/// the Bayes composition.
pub fn clutter_gap(n: usize, q: f64, subset: &[usize]) -> Result<(f64, f64)> {
    let fam = clutter_family(n, q)?;
    let conds: Vec<_> = subset.iter().map(|&i| fam.conditionals[i].clone()).collect();
    let (bayes, _) = compose_exact(&fam.unconditional, &conds)?;
    let (ideal, _) = compose_exact(&fam.background, &conds)?;
    let blocks: Vec<Vec<usize>> = subset.iter().map(|&i| vec![i]).collect();
    let rest: Vec<usize> = (0..n).filter(|c| !subset.contains(c)).collect();
    let masks = MaskPartition::new(n, rest, blocks)?;
    Ok((bayes.total_variation(&ideal)?, projective_check(&bayes, &conds, &masks)?))
}

fn exp_clutter(p: &Params, out: &Artifacts) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new("exp_clutter", p);
    let (n, q) = (p.int("n")?, p.float("q")?);
    let fam = clutter_family(n, q)?;
    let chi2 = chi_square_statistic(&fam.background, &fam.unconditional)?;
    let formula = (1.0 - q) / (n as f64 * q);
    r.metric("chi2", chi2);
    r.headline.push("chi2".into());
    r.metric("chi2_formula", formula);
    r.metric("chi2_residual", (chi2 - formula).abs());
    r.check("chi2_residual", Relation::Lt, 1e-12)?;
    let (lo, hi) = (p.int("n_min")?, p.int("n_max")?);
    if lo < 3 || hi < lo || hi > 20 {
        return Err(Error::Input(format!("sweep needs 3 <= n_min <= n_max <= 20, got {lo}..{hi}")));
    }
    let mut rows = Vec::new();
    let mut bg_tv = Vec::new();
    let mut comp_tv = Vec::new();
    let mut proj_max: f64 = 0.0;
    for m in lo..=hi {
        let f = clutter_family(m, q)?;
        let c = chi_square_statistic(&f.background, &f.unconditional)?;
        let tv = f.unconditional.total_variation(&f.background)?;
        let (gap, proj) = clutter_gap(m, q, &[0, 2])?;
        r.metric(format!("background_tv_n{m}"), tv);
        r.metric(format!("composition_tv_n{m}"), gap);
        proj_max = proj_max.max(proj);
        bg_tv.push(tv);
        comp_tv.push(gap);
        rows.push(vec![m as f64, c, tv, gap, proj]);
    }
    out.table("clutter_sweep.csv", &["n", "chi2", "background_tv", "composition_tv", "projective_error"], &rows)?;
    r.metric("projective_error_max", proj_max);
    r.check("projective_error_max", Relation::Le, 1e-12)?;
    let rise = |v: &[f64]| v.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        // The Bayes background approaches the clutter background; the full
        // composition gap only settles down for larger n.
        r.metric("background_tv_max_increase", rise(&bg_tv));
        r.metric("composition_tv_max_increase", rise(&comp_tv));
        r.check("background_tv_max_increase", Relation::Le, 1e-12)?;
    }
    Ok(r)
}

/// Masks of the relaxed family: background `{4}`, blocks `{0,1}`, `{2}`, `{3}`.
pub fn relaxed_masks() -> MaskPartition {
    MaskPartition { background: vec![4], blocks: vec![vec![0, 1], vec![2], vec![3]] }
}

/// Absolute slack for round-off when comparing an exact KL with its budget.
const VIOLATION_TOL: f64 = 1e-12;

fn exp_relaxed_fc(p: &Params, out: &Artifacts) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new("exp_relaxed_fc", p);
    let mut etas = p.floats("eta_grid")?;
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    if etas.is_empty() || etas[0] < 0.0 {
        return Err(Error::Input("eta_grid needs nonnegative values".into()));
    }
    let families = p.int("families")?;
    let m = p.int("alphabet")?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.u64("seed")?);
    let seeds = (0..families)
        .map(|_| RelaxedSeed::random(&mut rng, m, relaxed_masks()))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut violations = 0usize;
    let mut unnorm_violations = 0usize;
    let mut mean_kl = Vec::new();
    let mut mean_budget = Vec::new();
    let mut ratios = Vec::new();
    for (ei, &eta) in etas.iter().enumerate() {
        let (mut skl, mut sb) = (0.0, 0.0);
        for (fi, s) in seeds.iter().enumerate() {
            let b = s.family(eta)?.bound()?;
            if b.kl > b.budget + VIOLATION_TOL {
                violations += 1;
            }
            if b.kl_unnormalized > b.budget + VIOLATION_TOL {
                unnorm_violations += 1;
            }
            if b.budget > VIOLATION_TOL {
                ratios.push(b.kl / b.budget);
            }
            skl += b.kl;
            sb += b.budget;
            rows.push(vec![eta, fi as f64, b.kl, b.kl_unnormalized, b.budget]);
        }
        let k = families.max(1) as f64;
        r.metric(format!("mean_kl_{ei}"), skl / k);
        r.metric(format!("mean_budget_{ei}"), sb / k);
        mean_kl.push(skl / k);
        mean_budget.push(sb / k);
    }
    out.table("relaxed_bound.csv", &["eta", "family", "kl", "kl_unnormalized", "budget"], &rows)?;
    r.metric("violation_tolerance", VIOLATION_TOL);
    r.metric("violations", violations as f64);
    r.metric("violations_unnormalized", unnorm_violations as f64);
    r.check("violations", Relation::Le, 0.0)?;
    r.metric("kl_at_smallest_eta", mean_kl[0]);
    r.metric("budget_at_smallest_eta", mean_budget[0]);
    if etas[0] == 0.0 {
        r.check("kl_at_smallest_eta", Relation::Le, 1e-12)?;
        r.check("budget_at_smallest_eta", Relation::Le, 1e-12)?;
    }
    let drop = |v: &[f64]| v.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    if etas.len() > 1 {
        r.metric("kl_max_drop", drop(&mean_kl));
        r.metric("budget_max_drop", drop(&mean_budget));
        r.check("kl_max_drop", Relation::Le, 0.0)?;
        r.check("budget_max_drop", Relation::Le, 0.0)?;
    }
    if !ratios.is_empty() {
        r.metric("tightness_mean", ratios.iter().sum::<f64>() / ratios.len() as f64);
        r.metric("tightness_max", ratios.iter().copied().fold(0.0, f64::max));
    }
    Ok(r)
}

fn offdiag_max_abs(m: &[Vec<f64>]) -> f64 {
    let mut w: f64 = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                w = w.max(v.abs());
            }
        }
    }
    w
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn exp_heuristic(p: &Params, out: &Artifacts) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new("exp_heuristic", p);
    let path = p.string("embeddings")?;
    let matrix = if path.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(p.u64("seed")?);
        let spec = random_factorized_spec(&mut rng, p.int("dim")?, p.int("blocks")?, false)?;
        let means: Vec<Vec<f64>> = spec.conditionals.iter().map(|c| to_vec(&c.mean_vector())).collect();
        let fc = mean_diff_heuristic(&means, &to_vec(&spec.background.mean_vector()))?;
        r.metric("factorized_max_offdiag", offdiag_max_abs(&fc));
        r.check("factorized_max_offdiag", Relation::Lt, 1e-10)?;
        let ce = Counterexample::new(1.0, 0.1)?;
        let ent_means = vec![to_vec(&ce.p0().mean_vector()), to_vec(&ce.p1().mean_vector())];
        let ent = mean_diff_heuristic(&ent_means, &to_vec(&ce.background().mean_vector()))?;
        r.metric("entangled_max_offdiag", offdiag_max_abs(&ent));
        r.check("entangled_max_offdiag", Relation::Ge, 0.5)?;
        fc
    } else {
        let e = read_embeddings(Path::new(&path))?;
        let m = mean_diff_heuristic(&e.vectors, &e.background)?;
        if let Some(groups) = &e.groups {
            let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
            for i in 0..m.len() {
                for j in 0..m.len() {
                    if i == j {
                        continue;
                    }
                    if groups[i] == groups[j] {
                        intra += m[i][j].abs();
                        ni += 1;
                    } else {
                        inter += m[i][j].abs();
                        nx += 1;
                    }
                }
            }
            if ni > 0 {
                r.metric("intra_group_mean_abs", intra / ni as f64);
            }
            if nx > 0 {
                r.metric("inter_group_mean_abs", inter / nx as f64);
            }
        }
        r.metric("max_offdiag", offdiag_max_abs(&m));
        m
    };
    let max_abs = matrix.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    r.metric("max_abs_entry", max_abs);
    r.check("max_abs_entry", Relation::Le, 1.0)?;
    let header: Vec<String> = (0..matrix.len()).map(|j| format!("c{j}")).collect();
    out.table("cosine.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &matrix)?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn unknown_names_and_params_are_rejected() {
        assert!(matches!(find("exp_nope"), Err(Error::UnknownExperiment(_))));
        let e = find("exp_clutter").unwrap();
        assert!(e.params(&overrides(&[("sampler", Value::from("ddim"))])).is_err());
        assert!(e.params(&overrides(&[("n", Value::from("ten"))])).is_err());
        assert!(e.params(&overrides(&[("n", Value::from(12))])).is_ok());
    }

    #[test]
    fn clutter_report() {
        let rep = run_named("exp_clutter", &overrides(&[("n", Value::from(10)), ("q", Value::from(0.5))]), None).unwrap();
        assert!((rep.metrics["chi2"] - 0.1).abs() < 1e-12);
        assert!(rep.verdict, "{:?}", rep.failed_checks());
    }

    #[test]
    fn checks_reference_existing_metrics() {
        let p = find("exp_clutter").unwrap().params(&BTreeMap::new()).unwrap();
        let mut r = ExperimentReport::new("x", &p);
        assert!(r.check("missing", Relation::Lt, 1.0).is_err());
        r.metric("m", 2.0);
        r.check_between("m", 1.0, 3.0).unwrap();
        r.check("m", Relation::Lt, 1.0).unwrap();
        assert!(!r.verdict);
        assert_eq!(r.failed_checks().len(), 1);
    }

    #[test]
    fn heuristic_synthetic() {
        let rep = run_named("exp_heuristic", &BTreeMap::new(), None).unwrap();
        assert!(rep.verdict, "{:?}", rep.failed_checks());
    }

    #[test]
    fn bayes_argmax_single_conditional() {
        let fam = SingleIndexFamily::new(1, 0.3).unwrap();
        let grid = alpha_grid(-0.2, 1.2, 1001);
        let a = diagonal_argmax(&fam.bayes_spec(), &grid).unwrap().0;
        let b = diagonal_argmax(&fam.empty_spec(), &grid).unwrap().0;
        assert_eq!(a, b);
    }
}
