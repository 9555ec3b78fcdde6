//! Seeded Monte-Carlo comparisons over random channels.
//!
//! Every trial draws its channel from `(seed, trial)` alone, so all points of
//! a sweep see the same channel realizations and differ only in the swept
//! parameter. Distress signals are drawn from `(seed, point, trial)`. Trials
//! run on a rayon pool and are folded in order, so results do not depend on
//! the number of threads.

use std::io::Write;
use std::time::Instant;

use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{stationary_solve, PunishForgivePolicy};
use crate::dynamics::{check_epochwise_bound, membership_scenario, run_dynamic};
use crate::error::{Error, Result};
use crate::its::{its_solve, Criterion, Monitoring, DEFAULT_PRECISION};
use crate::ldf::{run_ldf, DistanceForm};
use crate::model::{ErrorDist, NetworkInstance, PowerGrid, SensingModel};
use crate::policy::{discounted_metrics, evaluate, DiscountedMetrics};
use crate::rng::{derive_seed, keyed_rng, UserStreams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    AlphaSweep,
    UserSweep,
    RateSweep,
    Dynamic,
    Single,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::AlphaSweep => "alpha-sweep",
            ScenarioKind::UserSweep => "user-sweep",
            ScenarioKind::RateSweep => "rate-sweep",
            ScenarioKind::Dynamic => "dynamic",
            ScenarioKind::Single => "single",
        }
    }

    /// Name of the swept parameter.
    pub fn parameter(self) -> &'static str {
        match self {
            ScenarioKind::AlphaSweep | ScenarioKind::Dynamic | ScenarioKind::Single => "alpha",
            ScenarioKind::UserSweep => "users",
            ScenarioKind::RateSweep => "min_rate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Stationary,
    Npf,
    Proposed,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Stationary, PolicyKind::Npf, PolicyKind::Proposed];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Stationary => "stationary",
            PolicyKind::Npf => "npf",
            PolicyKind::Proposed => "proposed",
        }
    }
}

/// How power gains are drawn from a complex-normal channel `h`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelModel {
    /// `g = |h|^2`, exponential with the stated mean.
    #[default]
    Exponential,
    /// `g = |h|`.
    RawNormalMagnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    pub users: usize,
    pub alpha: f64,
    pub min_rate: f64,
    pub noise: f64,
    pub theta: f64,
    pub error: ErrorDist,
    pub discount: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub channel: ChannelModel,
    pub monitoring: Monitoring,
    pub distance_form: DistanceForm,
    pub precision: f64,
    pub punish_duration: usize,
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            users: 2,
            alpha: 0.2,
            min_rate: 1.0,
            noise: 0.05,
            theta: 1.0,
            error: ErrorDist::Gaussian { variance: 0.1 },
            discount: 0.95,
            grid_max: 1e9,
            grid_points: 512,
            channel: ChannelModel::Exponential,
            monitoring: Monitoring::Perfect,
            distance_form: DistanceForm::Algorithm,
            precision: DEFAULT_PRECISION,
            punish_duration: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: ScenarioKind,
    /// Values of the swept parameter; ignored by `single`.
    #[serde(default)]
    pub grid: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub horizon: usize,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(default = "all_policies")]
    pub policies: Vec<PolicyKind>,
}

fn all_policies() -> Vec<PolicyKind> {
    PolicyKind::ALL.to_vec()
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment file: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.scenario != ScenarioKind::Single && self.grid.is_empty() {
            return Err(Error::Config("parameter grid is empty".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("no policies selected".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.scenario == ScenarioKind::UserSweep && self.grid.iter().any(|&u| u < 1.0 || u.fract() != 0.0) {
            return Err(Error::Config("user counts must be positive integers".into()));
        }
        Ok(())
    }

    /// Swept values, one per point.
    pub fn points(&self) -> Vec<f64> {
        match self.scenario {
            ScenarioKind::Single => vec![self.defaults.alpha],
            _ => self.grid.clone(),
        }
    }
}

pub fn channel_seed(seed: u64, trial: usize) -> u64 {
    derive_seed(seed, &[0x6368, trial as u64])
}

/// Flat row-major gains for `users` users in trial `trial`.
///
/// Entry `(i, j)` depends only on `(seed, trial, i, j)`, so a smaller
/// population sees the leading block of a larger one.
pub fn draw_channel(seed: u64, trial: usize, users: usize, alpha: f64, model: ChannelModel) -> Vec<f64> {
    let trial_seed = channel_seed(seed, trial);
    let mut gains = Vec::with_capacity(users * users);
    for i in 0..users {
        for j in 0..users {
            let e: f64 = Exp1.sample(&mut keyed_rng(trial_seed, &[i as u64, j as u64]));
            let mean = if i == j { 1.0 } else { alpha };
            gains.push(match model {
                ChannelModel::Exponential => mean * e,
                ChannelModel::RawNormalMagnitude => (mean * e).sqrt(),
            });
        }
    }
    gains
}

/// Network and sensing model of one trial at one point.
pub fn trial_instance(spec: &ExperimentSpec, value: f64, trial: usize) -> Result<(NetworkInstance, SensingModel)> {
    let d = &spec.defaults;
    let (users, alpha, rate) = match spec.scenario {
        ScenarioKind::AlphaSweep | ScenarioKind::Single | ScenarioKind::Dynamic => (d.users, value, d.min_rate),
        ScenarioKind::UserSweep => (value as usize, d.alpha, d.min_rate),
        ScenarioKind::RateSweep => (d.users, d.alpha, value),
    };
    let net = NetworkInstance::from_flat(
        users,
        draw_channel(spec.seed, trial, users, alpha, d.channel),
        vec![d.noise; users],
        vec![PowerGrid::new(d.grid_max, d.grid_points)?; users],
        vec![rate; users],
        d.discount,
    )?;
    let sensing = SensingModel::uniform(&net, d.error, d.theta)?;
    Ok((net, sensing))
}

/// Per-user averages of one policy in one trial, or `None` when infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub power: f64,
    pub throughput: f64,
}

type TrialOutcome = Vec<Option<PolicyOutcome>>;

fn outcome(m: &DiscountedMetrics) -> PolicyOutcome {
    PolicyOutcome {
        power: m.mean_power(),
        throughput: m.mean_throughput(),
    }
}

/// Keeps infeasibility as `None` and passes every other error on.
fn feasible_or<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_infeasible() => Ok(None),
        Err(e) => Err(e),
    }
}

fn run_trial(spec: &ExperimentSpec, point: usize, value: f64, trial: usize) -> Result<TrialOutcome> {
    if spec.scenario == ScenarioKind::Dynamic {
        return run_dynamic_trial(spec, point, value, trial);
    }
    let d = &spec.defaults;
    let (net, sensing) = trial_instance(spec, value, trial)?;
    let n = net.users();
    let criterion = Criterion::equal_sum(n);
    let stationary = stationary_solve(&net);
    let needs_its = spec.policies.iter().any(|&p| p != PolicyKind::Stationary);
    let report = if needs_its {
        feasible_or(its_solve(&net, &sensing, &criterion, d.precision, d.monitoring))?
            .filter(|r| r.constants.admits_discount(net.discount()))
    } else {
        None
    };
    let streams = |policy: PolicyKind| UserStreams::new(spec.seed, &[point as u64, trial as u64, policy as u64]);
    spec.policies
        .iter()
        .map(|&policy| -> Result<Option<PolicyOutcome>> {
            match policy {
                PolicyKind::Stationary => {
                    if !stationary.feasible {
                        return Ok(None);
                    }
                    let rates = net.rates(&stationary.profile())?;
                    Ok(Some(PolicyOutcome {
                        power: stationary.powers.iter().sum::<f64>() / n as f64,
                        throughput: rates.iter().sum::<f64>() / n as f64,
                    }))
                }
                PolicyKind::Proposed => {
                    let Some(report) = &report else { return Ok(None) };
                    let run = run_ldf(
                        &net,
                        &sensing,
                        &report.solution,
                        &report.constants,
                        spec.horizon,
                        &mut streams(policy),
                        d.distance_form,
                    )?;
                    Ok(Some(outcome(&discounted_metrics(&run.trace, net.discount())?)))
                }
                PolicyKind::Npf => {
                    let Some(report) = &report else { return Ok(None) };
                    if !stationary.feasible {
                        return Ok(None);
                    }
                    let mut npf = PunishForgivePolicy::new(
                        &net,
                        &report.solution,
                        &report.constants,
                        &stationary,
                        d.punish_duration,
                        d.distance_form,
                    )?;
                    let trace = evaluate(&mut npf, &net, &sensing, spec.horizon, &mut streams(policy))?;
                    Ok(Some(outcome(&discounted_metrics(&trace, net.discount())?)))
                }
            }
        })
        .collect()
}

fn run_dynamic_trial(spec: &ExperimentSpec, point: usize, alpha: f64, trial: usize) -> Result<TrialOutcome> {
    let scenario = membership_scenario(channel_seed(spec.seed, trial), alpha, spec.horizon)?;
    let mut streams = UserStreams::new(spec.seed, &[point as u64, trial as u64]);
    let run = feasible_or(run_dynamic(&scenario, &mut streams))?;
    spec.policies
        .iter()
        .map(|&policy| {
            let Some(run) = &run else { return Ok(None) };
            if policy != PolicyKind::Proposed {
                return Ok(None);
            }
            let report = check_epochwise_bound(&scenario.universe, &run.log, &run.trace);
            if !report.holds() {
                return Err(Error::Invariant(format!(
                    "dynamic trial {trial}: epoch bound violated at {:?}",
                    report.violations().next()
                )));
            }
            if !run.log.rejected.is_empty() {
                return Ok(None);
            }
            let m = discounted_metrics(&run.trace, scenario.universe.discount())?;
            let initial = &scenario.initial;
            let k = initial.len() as f64;
            Ok(Some(PolicyOutcome {
                power: initial.iter().map(|&u| m.power[u]).sum::<f64>() / k,
                throughput: initial.iter().map(|&u| m.throughput[u]).sum::<f64>() / k,
            }))
        })
        .collect()
}

/// Mean with standard error, the latter absent below two samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stderr: Option<f64>,
    pub trials: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let k = values.len();
        if k == 0 {
            return Summary {
                mean: f64::NAN,
                stderr: None,
                trials: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / k as f64;
        let stderr = (k >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        });
        Summary { mean, stderr, trials: k }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub policy: PolicyKind,
    /// `power`, `throughput`, `feasible`, `power_common` or `power_paired`.
    pub metric: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub point: usize,
    pub value: f64,
    pub rows: Vec<MetricRow>,
}

impl PointResult {
    pub fn get(&self, policy: PolicyKind, metric: &str) -> Option<&Summary> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && r.metric == metric)
            .map(|r| &r.summary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub trials: usize,
    pub horizon: usize,
    pub points: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    /// Seed of each trial's channel draw.
    pub channel_seeds: Vec<u64>,
    pub threads: usize,
    pub runtime_secs: f64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub points: Vec<PointResult>,
    pub manifest: Manifest,
}

/// Runs every trial of every point on `threads` workers (0 means rayon's default).
pub fn run_experiment(spec: &ExperimentSpec, threads: usize) -> Result<ExperimentResult> {
    spec.validate()?;
    let start = Instant::now();
    let values = spec.points();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let jobs: Vec<(usize, usize)> = (0..values.len())
        .flat_map(|p| (0..spec.trials).map(move |t| (p, t)))
        .collect();
    let outcomes: Vec<TrialOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, t)| run_trial(spec, p, values[p], t))
            .collect::<Result<_>>()
    })?;
    let grid: Vec<&[TrialOutcome]> = outcomes.chunks(spec.trials).collect();
    let k = spec.policies.len();
    // Trials in which a policy is feasible at every point.
    let paired: Vec<Vec<bool>> = (0..k)
        .map(|q| (0..spec.trials).map(|t| grid.iter().all(|pt| pt[t][q].is_some())).collect())
        .collect();
    let points = grid
        .iter()
        .enumerate()
        .map(|(p, trials)| {
            let common: Vec<bool> = trials.iter().map(|o| o.iter().all(Option::is_some)).collect();
            let mut rows = Vec::new();
            for (q, &policy) in spec.policies.iter().enumerate() {
                let feasible: Vec<PolicyOutcome> = trials.iter().filter_map(|o| o[q]).collect();
                let pick = |mask: &[bool]| -> Vec<f64> {
                    trials
                        .iter()
                        .zip(mask)
                        .filter(|(_, &m)| m)
                        .filter_map(|(o, _)| o[q].map(|x| x.power))
                        .collect()
                };
                let flags: Vec<f64> = trials.iter().map(|o| if o[q].is_some() { 1.0 } else { 0.0 }).collect();
                let mut push = |metric: &str, summary: Summary| {
                    rows.push(MetricRow {
                        policy,
                        metric: metric.to_string(),
                        summary,
                    })
                };
                push("power", Summary::of(&feasible.iter().map(|o| o.power).collect::<Vec<_>>()));
                push("throughput", Summary::of(&feasible.iter().map(|o| o.throughput).collect::<Vec<_>>()));
                push("feasible", Summary::of(&flags));
                push("power_common", Summary::of(&pick(&common)));
                push("power_paired", Summary::of(&pick(&paired[q])));
            }
            PointResult {
                point: p,
                value: values[p],
                rows,
            }
        })
        .collect();
    let manifest = Manifest {
        scenario: spec.scenario,
        seed: spec.seed,
        trials: spec.trials,
        horizon: spec.horizon,
        points: values,
        policies: spec.policies.clone(),
        channel_seeds: (0..spec.trials)
            .map(|t| channel_seed(spec.seed, t))
            .collect(),
        threads: pool.current_num_threads(),
        runtime_secs: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok(ExperimentResult {
        spec: spec.clone(),
        points,
        manifest,
    })
}

/// `100 (1 - P_proposed / P_baseline)` over trials where every policy is feasible.
pub fn energy_saving_ratio(result: &ExperimentResult, point: usize, baseline: PolicyKind, proposed: PolicyKind) -> Result<f64> {
    let pt = result
        .points
        .get(point)
        .ok_or_else(|| Error::Config(format!("no point {point}")))?;
    let get = |policy| {
        pt.get(policy, "power_common")
            .ok_or_else(|| Error::Config(format!("policy {} was not run", PolicyKind::name(policy))))
    };
    let (b, p) = (get(baseline)?, get(proposed)?);
    if b.trials == 0 {
        return Err(Error::Infeasible(format!(
            "{} is infeasible in every trial at point {point}",
            baseline.name()
        )));
    }
    Ok(saving_percent(b.mean, p.mean))
}

pub fn saving_percent(baseline: f64, proposed: f64) -> f64 {
    100.0 * (1.0 - proposed / baseline)
}

/// Long-format CSV, one row per point, policy and metric.
pub fn write_csv<W: Write>(result: &ExperimentResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "point", "parameter", "value", "policy", "metric", "mean", "stderr", "trials"])?;
    let scenario = result.spec.scenario;
    for pt in &result.points {
        for row in &pt.rows {
            w.write_record([
                scenario.name().to_string(),
                pt.point.to_string(),
                scenario.parameter().to_string(),
                pt.value.to_string(),
                row.policy.name().to_string(),
                row.metric.clone(),
                row.summary.mean.to_string(),
                row.summary.stderr.map(|s| s.to_string()).unwrap_or_default(),
                row.summary.trials.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(scenario: ScenarioKind, grid: Vec<f64>, trials: usize) -> ExperimentSpec {
        ExperimentSpec {
            scenario,
            grid,
            trials,
            seed: 9,
            horizon: 300,
            defaults: Defaults::default(),
            policies: all_policies(),
        }
    }

    #[test]
    fn saving_arithmetic() {
        assert_eq!(saving_percent(1.0, 1.0), 0.0);
        assert!((saving_percent(1.0, 0.1) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn channels_nest_across_population_sizes() {
        let small = draw_channel(1, 3, 2, 0.5, ChannelModel::Exponential);
        let big = draw_channel(1, 3, 4, 0.5, ChannelModel::Exponential);
        assert_eq!(small[0], big[0]);
        assert_eq!(small[1], big[1]);
        assert_eq!(small[3], big[5]);
        let raw = draw_channel(1, 3, 2, 0.5, ChannelModel::RawNormalMagnitude);
        assert!((raw[1] * raw[1] - small[1]).abs() < 1e-15);
    }

    #[test]
    fn alpha_sweep_shapes() {
        let res = run_experiment(&spec(ScenarioKind::AlphaSweep, vec![0.1, 0.5, 1.5], 20), 2).unwrap();
        let proposed: Vec<f64> = res.points.iter().map(|p| p.get(PolicyKind::Proposed, "power").unwrap().mean).collect();
        assert!(proposed.windows(2).all(|w| w[0] == w[1]));
        let st: Vec<f64> = res
            .points
            .iter()
            .map(|p| p.get(PolicyKind::Stationary, "power_paired").unwrap().mean)
            .collect();
        assert!(st[0] < st[1] && st[1] < st[2], "{st:?}");
        assert!(res.points.iter().all(|p| p.get(PolicyKind::Proposed, "feasible").unwrap().mean == 1.0));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let s = spec(ScenarioKind::RateSweep, vec![0.5, 1.0], 6);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv(&run_experiment(&s, 1).unwrap(), &mut a).unwrap();
        write_csv(&run_experiment(&s, 3).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_empty_specs() {
        assert!(run_experiment(&spec(ScenarioKind::AlphaSweep, vec![], 2), 1).is_err());
        assert!(run_experiment(&spec(ScenarioKind::AlphaSweep, vec![0.1], 0), 1).is_err());
    }
}
