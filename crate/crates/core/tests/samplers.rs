use projcomp::families::random_factorized_spec;
use projcomp::experiments::marginal_fit;
use projcomp::samplers::{run_langevin_at_t, run_sampler, SamplerConfig, SamplerKind, ScoreModel};
use projcomp::schedule::DiffusionSchedule;
use projcomp::stats::ks_critical_1pct;
use projcomp::{GaussianMixture, Provenance, SampleSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn target() -> GaussianMixture {
    GaussianMixture::isotropic(&[0.5, -1.0, 2.0], 0.7).unwrap()
}

/// Covariance of the target after forward noising to the schedule's end point.
fn endpoint_var(cfg: &SamplerConfig) -> f64 {
    let lvl = cfg.schedule.noise_level(0.0);
    0.7 * lvl.scale * lvl.scale + lvl.sigma * lvl.sigma
}

fn check_moments(s: &SampleSet, mean: &[f64], var: f64, tag: &str) {
    let m = s.mean();
    let c = s.covariance();
    let d = s.dim();
    for i in 0..d {
        assert!((m[i] - mean[i]).abs() < 0.02, "{tag}: mean[{i}] = {} vs {}", m[i], mean[i]);
        for j in 0..d {
            let want = if i == j { var } else { 0.0 };
            assert!((c[i * d + j] - want).abs() < 0.05, "{tag}: cov[{i},{j}] = {}", c[i * d + j]);
        }
    }
}

#[test]
fn reverse_samplers_agree_on_a_gaussian() {
    let g = target();
    let n = 100_000;
    for (kind, steps) in [(SamplerKind::Ddim, 64), (SamplerKind::Ddpm, 256), (SamplerKind::PredictorCorrector, 100)] {
        let mut cfg = SamplerConfig::new(kind, steps, 17);
        // The zero-mean start leaves a deterministic-path offset of about |mean|·sd/sigma_max.
        cfg.schedule = DiffusionSchedule::ve_geometric(0.02, 1000.0, steps).unwrap();
        if kind == SamplerKind::PredictorCorrector {
            cfg.corrector_steps = 3;
        }
        let s = run_sampler(&g, &cfg, n).unwrap();
        check_moments(&s, &[0.5, -1.0, 2.0], endpoint_var(&cfg), kind.name());
    }
}

#[test]
fn fixed_level_langevin_reaches_a_gaussian() {
    let g = GaussianMixture::isotropic(&[0.0, 0.0], 1.0).unwrap();
    let field = g.field(DiffusionSchedule::default().noise_level(0.0)).unwrap();
    let init = SampleSet::new(2, vec![3.0; 2 * 20_000], Provenance::new("const", 0)).unwrap();
    let s = run_langevin_at_t(&field, &init, 1500, 0.01, 3, true).unwrap();
    let lvl = DiffusionSchedule::default().noise_level(0.0);
    check_moments(&s, &[0.0, 0.0], 1.0 + lvl.sigma * lvl.sigma, "langevin");
}

#[test]
fn vp_schedule_recovers_a_gaussian() {
    let g = target();
    for kind in [SamplerKind::Ddim, SamplerKind::Ddpm] {
        let mut cfg = SamplerConfig::new(kind, 256, 5);
        cfg.schedule = DiffusionSchedule::vp(0.02, 0.1, 20.0, 256).unwrap();
        let s = run_sampler(&g, &cfg, 50_000).unwrap();
        let lvl = cfg.schedule.noise_level(0.0);
        let mean: Vec<f64> = [0.5, -1.0, 2.0].iter().map(|m| m * lvl.scale).collect();
        check_moments(&s, &mean, endpoint_var(&cfg), kind.name());
    }
}

#[test]
fn stochastic_samplers_respect_factorized_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let spec = random_factorized_spec(&mut rng, 3, 2, false).unwrap();
    let n = 20_000;
    for (kind, steps) in [(SamplerKind::Ddpm, 1024), (SamplerKind::PredictorCorrector, 256)] {
        let mut cfg = SamplerConfig::new(kind, steps, 8);
        cfg.schedule = DiffusionSchedule::ve_geometric(0.02, 1000.0, steps).unwrap();
        cfg.corrector_steps = 1;
        let s = run_sampler(&spec, &cfg, n).unwrap();
        let (ks, _) = marginal_fit(&spec, &s, &cfg).unwrap();
        let worst = ks.iter().copied().fold(0.0, f64::max);
        assert!(worst < ks_critical_1pct(n), "{}: KS {worst}", kind.name());
    }
}

#[test]
fn identical_seeds_give_identical_samples() {
    let g = target();
    for kind in [SamplerKind::Ddim, SamplerKind::Ddpm, SamplerKind::PredictorCorrector, SamplerKind::Langevin] {
        let mut cfg = SamplerConfig::new(kind, 8, 99);
        cfg.corrector_steps = 1;
        let a = run_sampler(&g, &cfg, 500).unwrap();
        let b = run_sampler(&g, &cfg, 500).unwrap();
        assert_eq!(a.data(), b.data(), "{}", kind.name());
    }
}
