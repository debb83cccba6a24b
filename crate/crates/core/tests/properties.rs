use approx::assert_abs_diff_eq;
use projcomp::discrete::{compose_exact, kl, DiscreteDistribution};
use projcomp::stats::{gmm_cdf_1d, gmm_quantile_1d};
use projcomp::transport::{mw2, solve_transport, w2_bracket};
use projcomp::GaussianMixture;
use proptest::prelude::*;

fn table(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, len)
}

fn mixture_1d() -> impl Strategy<Value = GaussianMixture> {
    prop::collection::vec((0.1f64..1.0, -5.0f64..5.0), 1..4).prop_flat_map(|parts| {
        (Just(parts), 0.05f64..2.0).prop_map(|(parts, var)| {
            let total: f64 = parts.iter().map(|p| p.0).sum();
            let w: Vec<f64> = parts.iter().map(|p| p.0 / total).collect();
            let m: Vec<Vec<f64>> = parts.iter().map(|p| vec![p.1]).collect();
            GaussianMixture::isotropic_mixture(&w, &m, var).unwrap()
        })
    })
}

fn mixture_2d() -> impl Strategy<Value = GaussianMixture> {
    prop::collection::vec((0.1f64..1.0, -3.0f64..3.0, -3.0f64..3.0), 1..5).prop_flat_map(|parts| {
        (Just(parts), 0.05f64..1.5).prop_map(|(parts, var)| {
            let total: f64 = parts.iter().map(|p| p.0).sum();
            let w: Vec<f64> = parts.iter().map(|p| p.0 / total).collect();
            let m: Vec<Vec<f64>> = parts.iter().map(|p| vec![p.1, p.2]).collect();
            GaussianMixture::isotropic_mixture(&w, &m, var).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(a in table(9), b in table(9)) {
        let p = DiscreteDistribution::from_weights(3, 2, a).unwrap();
        let q = DiscreteDistribution::from_weights(3, 2, b).unwrap();
        prop_assert!(kl(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl(&p, &p).unwrap() < 1e-15);
    }

    #[test]
    fn one_conditional_composes_to_itself(bg in table(8), c in table(8)) {
        let bg = DiscreteDistribution::from_weights(2, 3, bg).unwrap();
        let c = DiscreteDistribution::from_weights(2, 3, c).unwrap();
        let (out, z) = compose_exact(&bg, std::slice::from_ref(&c)).unwrap();
        assert_abs_diff_eq!(z, 1.0, epsilon = 1e-12);
        for (x, y) in out.probs().iter().zip(c.probs()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn quantile_inverts_the_cdf(g in mixture_1d(), u in 0.001f64..0.999) {
        let x = gmm_quantile_1d(&g, u).unwrap();
        assert_abs_diff_eq!(gmm_cdf_1d(&g, x).unwrap(), u, epsilon = 1e-8);
    }

    #[test]
    fn mixture_distance_is_symmetric(p in mixture_2d(), q in mixture_2d()) {
        let pq = mw2(&p, &q).unwrap().value;
        let qp = mw2(&q, &p).unwrap().value;
        assert_abs_diff_eq!(pq, qp, epsilon = 1e-9);
        prop_assert!(mw2(&p, &p).unwrap().value < 1e-6);
        let (lo, hi) = w2_bracket(&p, &q).unwrap();
        prop_assert!(0.0 <= lo && lo <= hi);
    }

    #[test]
    fn transport_plan_has_the_requested_marginals(a in table(4), b in table(5), cost in table(20)) {
        let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum(); v.into_iter().map(|x| x / s).collect::<Vec<_>>() };
        let (a, b) = (norm(a), norm(b));
        let (plan, total) = solve_transport(&a, &b, &cost).unwrap();
        for (got, want) in plan.row_sums().iter().zip(&a) {
            assert_abs_diff_eq!(*got, *want, epsilon = 1e-9);
        }
        for (got, want) in plan.col_sums().iter().zip(&b) {
            assert_abs_diff_eq!(*got, *want, epsilon = 1e-9);
        }
        // Never worse than the independent coupling.
        let indep: f64 = (0..20).map(|i| a[i / 5] * b[i % 5] * cost[i]).sum();
        prop_assert!(total <= indep + 1e-9);
    }
}
