//! Self-test suite run by `specshare check`.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::baselines::{round_robin_closed_form, round_robin_crossover, round_robin_metrics, stationary_solve};
use crate::dynamics::{check_epochwise_bound, membership_scenario, run_dynamic};
use crate::error::Result;
use crate::its::{convexity_check, its_solve, Criterion, FeasibilityConstants, Monitoring, DEFAULT_PRECISION};
use crate::ldf::{run_ldf, DistanceForm};
use crate::model::{quantizer_levels, ErrorDist, NetworkInstance, PowerGrid, SensingModel};
use crate::oracle::optimal_schedule_oracle;
use crate::policy::two_slot_deviation;
use crate::rng::{keyed_rng, UserStreams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Random instance: exponential direct gains of mean one, cross gains of
/// mean `alpha`, floors uniform in `[0.1, 1]` and noise 0.05.
pub fn random_instance(seed: u64, users: usize, alpha: f64, discount: f64) -> Result<NetworkInstance> {
    let mut rng = keyed_rng(seed, &[0x7269]);
    let mut gains = Vec::with_capacity(users * users);
    for i in 0..users {
        for j in 0..users {
            let e: f64 = Exp1.sample(&mut rng);
            gains.push(if i == j { e } else { alpha * e });
        }
    }
    let floors = (0..users).map(|_| rng.random_range(0.1..=1.0)).collect();
    NetworkInstance::from_flat(
        users,
        gains,
        vec![0.05; users],
        vec![PowerGrid::new(1e9, 512)?; users],
        floors,
        discount,
    )
}

fn symmetric(n: usize, cross: f64, rate: f64, discount: f64) -> Result<NetworkInstance> {
    NetworkInstance::symmetric(n, 1.0, cross, 0.05, PowerGrid::new(1e3, 512)?, rate, discount)
}

fn quantizer() -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for error in [ErrorDist::Gaussian { variance: 0.1 }, ErrorDist::Uniform { half_width: 0.1 }] {
        for (noise, theta) in [(0.05, 1.0), (0.05, 0.05), (0.2, 0.1)] {
            let (low, high) = quantizer_levels(error, theta, noise)?;
            let above = error.tail(theta - noise);
            worst = worst.max((above * high + (1.0 - above) * low - noise).abs());
        }
    }
    Ok(CheckResult::new("quantizer mean", worst < 1e-9, format!("worst mean error {worst:e}")))
}

fn stationary() -> Result<CheckResult> {
    let s = stationary_solve(&symmetric(2, 0.5, 1.0, 0.9)?);
    let err = s.powers.iter().map(|p| (p - 0.1).abs()).fold(0.0, f64::max);
    let infeasible = !stationary_solve(&symmetric(2, 1.0, 1.0, 0.9)?).feasible;
    Ok(CheckResult::new(
        "stationary closed form",
        s.feasible && err < 1e-12 && infeasible,
        format!("error {err:e}, infeasible at alpha = 1: {infeasible}"),
    ))
}

fn round_robin() -> Result<CheckResult> {
    let report = round_robin_metrics(&symmetric(2, 0.3, 1.0, 0.9)?, &[0, 1], 0.9, 400)?;
    let (p1, p2) = round_robin_closed_form(0.05, 1.0, 0.9);
    let tail = 0.9f64.powi(400) * report.powers[1];
    let gap = (report.simulated.power[0] - p1).abs().max((report.simulated.power[1] - p2).abs());
    let alpha = round_robin_crossover(0.05, 1.0, 0.9);
    Ok(CheckResult::new(
        "round robin",
        gap <= tail + 1e-15 && (0.33..=0.34).contains(&alpha),
        format!("simulation gap {gap:e}, crossover {alpha:.4}"),
    ))
}

fn oracle() -> Result<CheckResult> {
    let res = optimal_schedule_oracle(&symmetric(2, 0.5, 1.0, 0.9)?, 10)?;
    let ok = res.contains_up_to_relabeling("1221122112");
    Ok(CheckResult::new(
        "oracle prefix",
        ok,
        format!("{} optimal prefixes of {}, least {}", res.optimal.len(), res.evaluated, res.best),
    ))
}

fn its() -> Result<CheckResult> {
    let hetero = NetworkInstance::symmetric(3, 1.0, 0.1, 0.05, PowerGrid::new(1e3, 512)?, 0.2, 0.95)?
        .with_min_rates(vec![0.2, 0.3, 0.5])?;
    let mut worst_loop: f64 = 0.0;
    let mut worst_final: f64 = 0.0;
    for net in [symmetric(2, 0.5, 1.0, 0.9)?, hetero] {
        let sensing = SensingModel::uniform(&net, ErrorDist::Gaussian { variance: 0.1 }, 1.0)?;
        let criterion = Criterion::equal_sum(net.users());
        let report = its_solve(&net, &sensing, &criterion, DEFAULT_PRECISION, Monitoring::Perfect)?;
        worst_loop = worst_loop.max(report.solution.loop_residual);
        worst_final = worst_final.max(report.solution.residual);
    }
    Ok(CheckResult::new(
        "rate selection residual",
        worst_loop <= DEFAULT_PRECISION && worst_final <= 4.0 * f64::EPSILON,
        format!("loop {worst_loop:e}, normalized {worst_final:e}"),
    ))
}

fn convexity() -> Result<CheckResult> {
    let net = symmetric(3, 0.2, 0.7, 0.9)?;
    let mut rng = keyed_rng(5, &[]);
    let samples: Vec<f64> = (0..200).map(|_| rng.random_range(0.05..20.0)).collect();
    let criteria = [
        Criterion::equal_sum(3),
        Criterion::ProportionalFairness {
            weights: vec![1.0; 3],
        },
    ];
    let violations: usize = criteria.iter().map(|c| convexity_check(&net, c, &samples).violations).sum();
    Ok(CheckResult::new("convexity", violations == 0, format!("{violations} violations")))
}

fn discount_floor() -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for n in 2..=10 {
        let net = symmetric(n, 0.1, 0.1, 0.99)?;
        let sensing = SensingModel::uniform(&net, ErrorDist::Exact, 1.0)?;
        let c = FeasibilityConstants::obedient(&net, &sensing, &vec![1.0; n])?;
        worst = worst.max((c.delta_min - (1.0 - 1.0 / n as f64)).abs());
    }
    Ok(CheckResult::new("obedient discount floor", worst < 1e-12, format!("worst error {worst:e}")))
}

fn schedule_bound() -> Result<CheckResult> {
    let mut worst = f64::INFINITY;
    for seed in 0..10u64 {
        let users = 2 + (seed as usize % 7);
        let net = random_instance(seed, users, 0.2, 0.95)?;
        let sensing = SensingModel::uniform(&net, ErrorDist::Gaussian { variance: 0.1 }, 1.0)?;
        let report = its_solve(&net, &sensing, &Criterion::equal_sum(users), DEFAULT_PRECISION, Monitoring::Perfect)?;
        let run = run_ldf(
            &net,
            &sensing,
            &report.solution,
            &report.constants,
            200,
            &mut UserStreams::new(seed, &[]),
            DistanceForm::Algorithm,
        );
        match run {
            Ok(run) => worst = worst.min(run.worst_slack.unwrap_or(f64::INFINITY)),
            Err(e) => return Ok(CheckResult::new("schedule convergence bound", false, format!("seed {seed}: {e}"))),
        }
    }
    Ok(CheckResult::new("schedule convergence bound", worst >= 0.0, format!("worst slack {worst:e}")))
}

fn deviation() -> Result<CheckResult> {
    let net = NetworkInstance::new(
        2,
        vec![vec![1.0, 0.1], vec![0.1, 1.0]],
        vec![0.05; 2],
        vec![PowerGrid::new(10.0, 512)?; 2],
        vec![0.5; 2],
        0.9,
    )?;
    let profitable = two_slot_deviation(&net, 0, 0.1, 1, 1.0, 1, 0.05)?.energy_saved() > 0.0;
    let unprofitable = two_slot_deviation(&net, 0, 1.0, 1, 0.05, 1, 0.05)?.energy_saved() <= 0.0;
    Ok(CheckResult::new(
        "deviation sign",
        profitable && unprofitable,
        format!("profitable case saves: {profitable}, reversed case saves nothing: {unprofitable}"),
    ))
}

fn epochs() -> Result<CheckResult> {
    let scenario = membership_scenario(1, 0.2, 300)?;
    let run = run_dynamic(&scenario, &mut UserStreams::new(1, &[]))?;
    let report = check_epochwise_bound(&scenario.universe, &run.log, &run.trace);
    Ok(CheckResult::new(
        "epoch bounds",
        report.holds(),
        format!(
            "{} epochs, telescoping error {:e}, {} violations",
            run.log.epochs.len(),
            report.telescoping_error,
            report.violations().count()
        ),
    ))
}

/// Runs every check; an error inside a check counts as a failure.
pub fn run_checks() -> Vec<CheckResult> {
    let checks: [(&str, fn() -> Result<CheckResult>); 11] = [
        ("quantizer mean", quantizer),
        ("stationary closed form", stationary),
        ("round robin", round_robin),
        ("oracle prefix", oracle),
        ("rate selection residual", its),
        ("convexity", convexity),
        ("obedient discount floor", discount_floor),
        ("schedule convergence bound", schedule_bound),
        ("deviation sign", deviation),
        ("epoch bounds", epochs),
        ("stationary matches best response", best_response),
    ];
    checks
        .iter()
        .map(|(name, f)| f().unwrap_or_else(|e| CheckResult::new(name, false, e.to_string())))
        .collect()
}

fn best_response() -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let net = random_instance(seed, 3, 0.1, 0.9)?;
        let a = stationary_solve(&net);
        let b = crate::baselines::stationary_iterate(&net, 100_000, 1e-13);
        if a.feasible != b.feasible {
            return Ok(CheckResult::new(
                "stationary matches best response",
                false,
                format!("seed {seed}: feasibility disagrees"),
            ));
        }
        if a.feasible {
            for (x, y) in a.powers.iter().zip(&b.powers) {
                worst = worst.max((x - y).abs() / x);
            }
        }
    }
    Ok(CheckResult::new(
        "stationary matches best response",
        worst < 1e-9,
        format!("worst relative gap {worst:e}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in run_checks() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
