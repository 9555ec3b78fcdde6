use proptest::prelude::*;
use rand::RngCore;

use specshare::baselines::{stationary_iterate, stationary_solve};
use specshare::checks::random_instance;
use specshare::its::{its_solve, Criterion, Monitoring};
use specshare::ldf::{run_ldf, DistanceForm, LdfScheduler};
use specshare::model::{quantizer_levels, ErrorDist, NetworkInstance, PowerGrid, PowerProfile, SensingModel};
use specshare::oracle::{prefix_shares, share_energy, water_fill};
use specshare::policy::rate_preserving_perturbation;
use specshare::rng::{keyed_rng, UserStreams};

fn error_dist() -> impl Strategy<Value = ErrorDist> {
    prop_oneof![
        (0.001f64..1.0).prop_map(|variance| ErrorDist::Gaussian { variance }),
        (0.001f64..0.5).prop_map(|half_width| ErrorDist::Uniform { half_width }),
    ]
}

fn gaussian(net: &NetworkInstance) -> SensingModel {
    SensingModel::uniform(net, ErrorDist::Gaussian { variance: 0.1 }, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantized_interference_is_unbiased(error in error_dist(), theta in 0.01f64..2.0, level in 0.01f64..2.0) {
        let (low, high) = quantizer_levels(error, theta, level).unwrap();
        let above = error.tail(theta - level);
        if above > 0.0 && above < 1.0 {
            prop_assert!(low <= high);
        }
        prop_assert!((above * high + (1.0 - above) * low - level).abs() <= 1e-9 * level.max(1.0));
    }

    #[test]
    fn solo_power_inverts_solo_rate(gain in 0.05f64..5.0, noise in 0.01f64..1.0, rate in 0.0f64..8.0) {
        let net = NetworkInstance::symmetric(1, gain, 0.0, noise, PowerGrid::new(1e9, 16).unwrap(), 0.1, 0.9).unwrap();
        let p = net.solo_power(0, rate);
        prop_assert!((net.solo_rate(0, p) - rate).abs() <= 1e-9 * rate.max(1.0));
        prop_assert!(net.solo_power(0, rate + 0.01) > p);
    }

    #[test]
    fn stationary_powers_are_a_fixed_point(seed in 0u64..10_000, users in 2usize..5, alpha in 0.0f64..0.3) {
        let net = random_instance(seed, users, alpha, 0.9).unwrap();
        let s = stationary_solve(&net);
        let iterated = stationary_iterate(&net, 100_000, 1e-13);
        prop_assert_eq!(s.feasible, iterated.feasible);
        if s.feasible {
            let rates = net.rates(&PowerProfile::new(s.powers.clone())).unwrap();
            for i in 0..users {
                prop_assert!((rates[i] - net.min_rate(i)).abs() <= 1e-9);
                prop_assert!((s.powers[i] - iterated.powers[i]).abs() <= 1e-8 * s.powers[i]);
            }
        }
    }

    #[test]
    fn rate_selection_meets_every_floor(seed in 0u64..10_000, users in 2usize..6, pf in any::<bool>()) {
        let net = random_instance(seed, users, 0.2, 0.95).unwrap();
        let criterion = if pf {
            Criterion::ProportionalFairness { weights: vec![1.0; users] }
        } else {
            Criterion::equal_sum(users)
        };
        let report = its_solve(&net, &gaussian(&net), &criterion, 1e-9, Monitoring::Perfect).unwrap();
        let sol = &report.solution;
        prop_assert!(sol.loop_residual <= 1e-9);
        let shares: f64 = (0..users).map(|i| net.min_rate(i) / sol.rates[i]).sum();
        prop_assert!((shares - 1.0).abs() <= 4.0 * f64::EPSILON);
        for i in 0..users {
            prop_assert!(sol.rates[i] >= net.min_rate(i));
            prop_assert!((net.solo_power(i, sol.rates[i]) - sol.powers[i]).abs() <= 1e-9 * sol.powers[i].max(1.0));
        }
    }

    #[test]
    fn scheduler_conserves_continuation_shares(seed in 0u64..10_000, users in 2usize..8, slots in 1usize..400) {
        let net = random_instance(seed, users, 0.2, 0.95).unwrap();
        let report = its_solve(&net, &gaussian(&net), &Criterion::equal_sum(users), 1e-9, Monitoring::Perfect).unwrap();
        let mut s = LdfScheduler::new(&report.solution, &report.constants, 0.95, DistanceForm::Algorithm).unwrap();
        for _ in 0..slots {
            let decision = s.step(false).unwrap();
            prop_assert!(decision.transmitter.is_some());
            let r = &s.state().r_prime;
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(r.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn schedule_converges_within_bound(seed in 0u64..10_000, users in 2usize..8, discount in 0.9f64..0.99) {
        let net = random_instance(seed, users, 0.2, discount).unwrap();
        let report = its_solve(&net, &gaussian(&net), &Criterion::equal_sum(users), 1e-9, Monitoring::Perfect).unwrap();
        let run = run_ldf(
            &net,
            &gaussian(&net),
            &report.solution,
            &report.constants,
            150,
            &mut UserStreams::new(seed, &[]),
            DistanceForm::Algorithm,
        )
        .unwrap();
        prop_assert!(run.worst_slack.unwrap() >= -1e-12);
        for t in 0..150 {
            prop_assert!(run.trace.profiles[t].transmitter_count() <= 1);
        }
    }

    #[test]
    fn water_filling_spends_the_whole_mass(seed in 0u64..10_000, users in 1usize..4, discount in 0.7f64..0.99, prefix in proptest::collection::vec(0usize..3, 0..6)) {
        let net = random_instance(seed, users, 0.1, discount).unwrap();
        let prefix: Vec<usize> = prefix.into_iter().map(|u| u % users).collect();
        let lower = prefix_shares(users, &prefix, discount);
        prop_assert!((lower.iter().sum::<f64>() - (1.0 - discount.powi(prefix.len() as i32))).abs() <= 1e-12);
        let a = water_fill(&net, &lower);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for i in 0..users {
            prop_assert!(a[i] >= lower[i]);
        }
        let free = water_fill(&net, &vec![0.0; users]);
        let cost = |a: &[f64]| (0..users).map(|i| share_energy(&net, i, a[i])).sum::<f64>();
        prop_assert!(cost(&free) <= cost(&a) * (1.0 + 1e-12));
    }

    #[test]
    fn moving_power_between_equal_slots_costs_energy(p in 0.05f64..5.0, t1 in 0usize..20, t2 in 0usize..20, k in 1usize..20) {
        prop_assume!(t1 != t2);
        let grid = PowerGrid::new(10.0, 512).unwrap();
        let net = NetworkInstance::symmetric(1, 1.0, 0.0, 0.05, grid, 0.5, 0.9).unwrap();
        if let Some(pert) = rate_preserving_perturbation(&net, 0, (t1, p), (t2, p), k as f64 * grid.step()).unwrap() {
            prop_assert!(pert.energy_change > 0.0);
            prop_assert!(pert.throughput_change.abs() <= 1e-12);
        }
    }

    #[test]
    fn keyed_streams_are_reproducible(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        let x = keyed_rng(seed, &[a, b]).next_u64();
        prop_assert_eq!(x, keyed_rng(seed, &[a, b]).next_u64());
        if a != b {
            prop_assert_ne!(x, keyed_rng(seed, &[b, a]).next_u64());
        }
    }
}
