//! Small hand-checkable instances with values computed independently here.

use std::f64::consts::LN_2;

use specshare::its::{its_solve, kkt_inner_solve, Criterion, Monitoring};
use specshare::model::{
    distress_prob, quantizer_levels, system_distress, system_distress_prob, ErrorDist, NetworkInstance, PowerGrid,
    PowerProfile, SensingModel,
};
use specshare::policy::{deviation_profitable, throughput_energy_ratio};
use specshare::rng::UserStreams;

fn grid() -> PowerGrid {
    PowerGrid::new(10.0, 512).unwrap()
}

fn net(n: usize, cross: f64) -> NetworkInstance {
    NetworkInstance::symmetric(n, 1.0, cross, 0.05, grid(), 1.0, 0.9).unwrap()
}

#[test]
fn throughput_of_simple_profiles() {
    let alone = net(2, 1.0).throughput(&PowerProfile::new(vec![0.15, 0.0]), 0).unwrap();
    assert!((alone - 2.0).abs() < 1e-12);
    let shared = net(2, 1.0).throughput(&PowerProfile::new(vec![1.0, 1.0]), 0).unwrap();
    let expected = (1.0 + 1.0 / 1.05f64).log2();
    assert!((shared - expected).abs() < 1e-15);
    assert!((shared - 0.965_234_6).abs() < 1e-7);
}

#[test]
fn interference_temperature_sums_noise_and_cross_terms() {
    let two = net(2, 0.5);
    let i = two.interference_temperature(&PowerProfile::new(vec![0.3, 1.0]), 0).unwrap();
    assert!((i - (0.05 + 0.5 * 1.0)).abs() < 1e-15);
    let three = net(3, 0.2);
    let i = three.interference_temperature(&PowerProfile::new(vec![0.0, 1.0, 1.0]), 0).unwrap();
    assert!((i - 0.45).abs() < 1e-15);
}

/// Trapezoid rule on a fine grid, kept separate from the adaptive quadrature under test.
fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|k| f(a + k as f64 * h)).sum();
    h * (0.5 * (f(a) + f(b)) + inner)
}

#[test]
fn gaussian_quantizer_matches_truncated_moments() {
    let (variance, noise, theta) = (0.1f64, 0.05, 1.0);
    let sd = variance.sqrt();
    let pdf = |e: f64| (-(e * e) / (2.0 * variance)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let cut = theta - noise;
    let span = 12.0 * sd;
    let mass_high = trapezoid(pdf, cut, span, 200_000);
    let mean_high = trapezoid(|e| (noise + e) * pdf(e), cut, span, 200_000) / mass_high;
    let mean_low = trapezoid(|e| (noise + e) * pdf(e), -span, cut, 200_000) / (1.0 - mass_high);
    let (low, high) = quantizer_levels(ErrorDist::Gaussian { variance }, theta, noise).unwrap();
    assert!((low - mean_low).abs() < 1e-8, "{low} vs {mean_low}");
    assert!((high - mean_high).abs() < 1e-6, "{high} vs {mean_high}");
    // Frozen values.
    assert!((low - 0.048_614_09).abs() < 1e-8, "{low}");
    assert!((high - 1.089_430_8).abs() < 1e-6, "{high}");
}

#[test]
fn uniform_quantizer_has_analytic_branches() {
    let (low, high) = quantizer_levels(ErrorDist::Uniform { half_width: 0.1 }, 0.05, 0.05).unwrap();
    assert!(low.abs() < 1e-12);
    assert!((high - 0.1).abs() < 1e-12);
}

#[test]
fn gaussian_distress_tail() {
    let one = NetworkInstance::symmetric(1, 1.0, 0.0, 0.05, grid(), 1.0, 0.9).unwrap();
    let sensing = SensingModel::uniform(&one, ErrorDist::Gaussian { variance: 0.1 }, 1.0).unwrap();
    let rho = distress_prob(&one, &sensing, &PowerProfile::new(vec![1.0]), 0).unwrap();
    let expected = 0.5 * statrs::function::erf::erfc(0.95 / 0.1f64.sqrt() / 2f64.sqrt());
    assert!((rho - expected).abs() < 1e-15);
    assert!((rho - 1.33e-3).abs() < 5e-6);
}

#[test]
fn system_distress_is_an_or_of_independent_signals() {
    // Threshold exactly at the interference level with symmetric error: each
    // transmitter signals with probability one half.
    let two = net(2, 1.0);
    let sensing = SensingModel::uniform(&two, ErrorDist::Uniform { half_width: 0.5 }, 1.05).unwrap();
    let p = PowerProfile::new(vec![1.0, 1.0]);
    assert!((distress_prob(&two, &sensing, &p, 0).unwrap() - 0.5).abs() < 1e-15);
    let exact = system_distress_prob(&two, &sensing, &p).unwrap();
    assert!((exact - 0.75).abs() < 1e-15);
    let mut streams = UserStreams::new(11, &[]);
    let draws = 200_000;
    let hits = (0..draws)
        .filter(|_| system_distress(&two, &sensing, &p, &mut streams).unwrap())
        .count();
    let freq = hits as f64 / draws as f64;
    // Five standard errors.
    assert!((freq - 0.75).abs() < 5.0 * (0.75 * 0.25 / draws as f64).sqrt(), "{freq}");
}

#[test]
fn energy_per_unit_throughput() {
    let one = NetworkInstance::symmetric(1, 1.0, 0.0, 0.05, grid(), 1.0, 0.9).unwrap();
    assert!((throughput_energy_ratio(&one, 0, 1.0).unwrap() - 0.05).abs() < 1e-15);
    assert!((throughput_energy_ratio(&one, 0, 2.0).unwrap() - 0.075).abs() < 1e-15);
    assert!((one.solo_power(0, 2.0) - 0.15).abs() < 1e-15);
}

#[test]
fn deviation_inequality() {
    let two = NetworkInstance::new(
        2,
        vec![vec![1.0, 0.5], vec![0.5, 2.0]],
        vec![0.05; 2],
        vec![grid(); 2],
        vec![0.5; 2],
        0.9,
    )
    .unwrap();
    // p_j g_jj = 2 against p_i g_ij = 1.
    assert!(deviation_profitable(&two, 0, 2.0, 1, 1.0));
    let weak = net(2, 0.1);
    assert!(deviation_profitable(&weak, 0, 1.0, 1, 1.0));
    assert!(deviation_profitable(&weak, 1, 1.0, 0, 1.0));
}

#[test]
fn kkt_equation_at_integer_rates() {
    let unit = NetworkInstance::symmetric(1, 1.0, 0.0, 1.0, PowerGrid::new(1e3, 64).unwrap(), 1.0, 0.9).unwrap();
    let c = Criterion::WeightedSum { weights: vec![1.0] };
    let lambda1 = 2.0 * LN_2 - 1.0;
    let lambda2 = 8.0 * LN_2 - 3.0;
    assert!((c.kkt_lhs(&unit, 0, 1.0) - lambda1).abs() < 1e-15);
    assert!((c.kkt_lhs(&unit, 0, 2.0) - lambda2).abs() < 1e-15);
    assert!((lambda1 - 0.386_29).abs() < 1e-5 && (lambda2 - 2.545_2).abs() < 1e-4);
    let cap = unit.max_rate(0);
    assert!((kkt_inner_solve(&unit, &c, 0, lambda1, cap).unwrap().rate - 1.0).abs() < 1e-9);
    assert!((kkt_inner_solve(&unit, &c, 0, lambda2, cap).unwrap().rate - 2.0).abs() < 1e-9);
}

#[test]
fn symmetric_pair_splits_slots_evenly() {
    let pair = net(2, 0.5);
    let sensing = SensingModel::uniform(&pair, ErrorDist::Gaussian { variance: 0.1 }, 1.0).unwrap();
    let report = its_solve(&pair, &sensing, &Criterion::equal_sum(2), 1e-9, Monitoring::Perfect).unwrap();
    for i in 0..2 {
        assert!((report.solution.rates[i] - 2.0).abs() < 1e-8);
        assert!((report.solution.powers[i] - 0.15).abs() < 1e-8);
    }
    // Grid over r_1 with r_2 fixed by the share constraint.
    let mut best = (f64::INFINITY, 0.0);
    for k in 1..200_000 {
        let r1 = 1.0 + k as f64 * 1e-4;
        let r2 = 1.0 / (1.0 - 1.0 / r1);
        let e = 0.5 * (0.05 * (2f64.powf(r1) - 1.0) / r1 + 0.05 * (2f64.powf(r2) - 1.0) / r2);
        if e < best.0 {
            best = (e, r1);
        }
    }
    assert!((best.1 - 2.0).abs() < 2e-4);
}

#[test]
fn convexity_second_derivative_closed_form() {
    let second = |x: f64| LN_2 * 2f64.powf(1.0 / x) / (x * x * x);
    assert!((second(1.0) - 2.0 * LN_2).abs() < 1e-15);
    assert!((second(0.5) - 32.0 * LN_2).abs() < 1e-12);
    assert!((second(0.5) - 22.18).abs() < 0.01);
}
