//! Users entering and leaving.
//!
//! Time is split into epochs of fixed membership. At a boundary the rates are
//! re-solved on the new population, with every continuing user asking for its
//! continuation throughput and every entrant for its floor, and the scheduler
//! restarts from those targets.

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::its::{its_solve, Criterion, ItsReport, Monitoring};
use crate::ldf::{DistanceForm, LdfScheduler, BOUND_TOL};
use crate::model::{system_distress, ErrorDist, NetworkInstance, PowerGrid, PowerProfile, SensingModel};
use crate::policy::PolicyTrace;
use crate::rng::{keyed_rng, UserStreams};

/// Tolerance of the epoch telescoping identity.
pub const TELESCOPE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventKind {
    Enter,
    Exit,
}

/// Broadcast at the start of slot `t`; takes effect in that slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipEvent {
    pub t: usize,
    pub kind: EventKind,
    pub users: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// First slot of the epoch.
    pub t_k: usize,
    /// One past the last slot.
    pub t_end: usize,
    /// Events that opened the epoch (empty for the first).
    pub events: Vec<MembershipEvent>,
    /// Active users, as indices into the universe.
    pub users: Vec<usize>,
    /// Targets fed to the rate solver: continuation throughput or floor.
    pub gamma: Vec<f64>,
    pub r_k: Vec<f64>,
    pub p_k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedEvent {
    pub event: MembershipEvent,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epochs: Vec<EpochRecord>,
    pub rejected: Vec<RejectedEvent>,
}

impl EpochLog {
    /// JSON array of `{t_k, event, users, r_k}`.
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .epochs
            .iter()
            .map(|e| {
                let event: Vec<serde_json::Value> = e
                    .events
                    .iter()
                    .map(|ev| serde_json::json!({"kind": ev.kind, "users": ev.users}))
                    .collect();
                serde_json::json!({"t_k": e.t_k, "event": event, "users": e.users, "r_k": e.r_k})
            })
            .collect();
        serde_json::Value::Array(rows)
    }

    /// Epoch active at slot `t`.
    pub fn epoch_at(&self, t: usize) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.t_k <= t && t < e.t_end)
    }
}

/// Re-solves the rates on a new population.
///
/// `targets` holds the continuation throughput of continuing users and the
/// floor of entrants, aligned with `users`.
pub fn on_membership_change(
    universe: &NetworkInstance,
    sensing: &SensingModel,
    users: &[usize],
    targets: Vec<f64>,
    precision: f64,
    monitoring: Monitoring,
    form: DistanceForm,
) -> Result<(ItsReport, LdfScheduler)> {
    let net = universe.subset(users)?.with_min_rates(targets)?;
    let sensing = sensing.subset(users);
    let report = its_solve(&net, &sensing, &Criterion::equal_sum(users.len()), precision, monitoring)?;
    if !report.constants.admits_discount(net.discount()) {
        return Err(Error::Infeasible(format!(
            "discount {} is below the {} this population needs",
            net.discount(),
            report.constants.delta_min
        )));
    }
    let scheduler = LdfScheduler::new(&report.solution, &report.constants, net.discount(), form)?;
    Ok((report, scheduler))
}

/// A population over a fixed universe of users plus a schedule of changes.
#[derive(Debug, Clone)]
pub struct DynamicScenario {
    pub universe: NetworkInstance,
    pub sensing: SensingModel,
    pub initial: Vec<usize>,
    pub events: Vec<MembershipEvent>,
    pub horizon: usize,
    pub precision: f64,
    pub monitoring: Monitoring,
    pub form: DistanceForm,
}

#[derive(Debug, Clone)]
pub struct DynamicRun {
    /// Trace over the whole universe; inactive users are silent.
    pub trace: PolicyTrace,
    pub log: EpochLog,
}

/// Simulates the scenario with distress signals drawn from `streams`.
pub fn run_dynamic(scenario: &DynamicScenario, streams: &mut UserStreams) -> Result<DynamicRun> {
    let universe = &scenario.universe;
    let n = universe.users();
    let mut events = scenario.events.clone();
    events.sort_by_key(|e| e.t);
    let mut users = scenario.initial.clone();
    users.sort_unstable();
    let targets: Vec<f64> = users.iter().map(|&u| universe.min_rate(u)).collect();
    let (report, mut scheduler) = on_membership_change(
        universe,
        &scenario.sensing,
        &users,
        targets.clone(),
        scenario.precision,
        scenario.monitoring,
        scenario.form,
    )?;
    let mut log = EpochLog {
        epochs: vec![EpochRecord {
            t_k: 0,
            t_end: scenario.horizon,
            events: vec![],
            users: users.clone(),
            gamma: targets,
            r_k: report.solution.rates.clone(),
            p_k: report.solution.powers.clone(),
        }],
        rejected: vec![],
    };
    let mut trace = PolicyTrace {
        profiles: Vec::with_capacity(scenario.horizon),
        signals: Vec::with_capacity(scenario.horizon),
        rates: Vec::with_capacity(scenario.horizon),
    };
    let mut next_event = 0;
    for t in 0..scenario.horizon {
        let mut batch = Vec::new();
        while next_event < events.len() && events[next_event].t == t {
            batch.push(events[next_event].clone());
            next_event += 1;
        }
        if !batch.is_empty() {
            let proposed = apply_events(&users, &batch, n)?;
            let gamma = scheduler.gamma();
            let targets: Vec<f64> = proposed
                .iter()
                .map(|u| match users.binary_search(u) {
                    Ok(k) => gamma[k],
                    Err(_) => universe.min_rate(*u),
                })
                .collect();
            match on_membership_change(
                universe,
                &scenario.sensing,
                &proposed,
                targets.clone(),
                scenario.precision,
                scenario.monitoring,
                scenario.form,
            ) {
                Ok((report, next)) => {
                    log::info!("slot {t}: epoch {} starts with {} users", log.epochs.len(), proposed.len());
                    log.epochs.last_mut().expect("first epoch exists").t_end = t;
                    log.epochs.push(EpochRecord {
                        t_k: t,
                        t_end: scenario.horizon,
                        events: batch,
                        users: proposed.clone(),
                        gamma: targets,
                        r_k: report.solution.rates.clone(),
                        p_k: report.solution.powers.clone(),
                    });
                    users = proposed;
                    scheduler = next;
                }
                Err(e) if e.is_infeasible() => {
                    log::warn!("slot {t}: membership change rejected: {e}");
                    for event in batch {
                        log.rejected.push(RejectedEvent {
                            event,
                            reason: e.to_string(),
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let decision = scheduler.decide();
        let mut profile = PowerProfile::silent(n);
        if let Some(k) = decision.transmitter {
            profile.set(users[k], decision.power);
        }
        let y = system_distress(universe, &scenario.sensing, &profile, streams)?;
        scheduler.advance(&decision, y)?;
        trace.rates.push(universe.rates(&profile)?);
        trace.signals.push(y);
        trace.profiles.push(profile);
    }
    Ok(DynamicRun { trace, log })
}

fn apply_events(users: &[usize], batch: &[MembershipEvent], universe: usize) -> Result<Vec<usize>> {
    let mut next = users.to_vec();
    for event in batch {
        for &u in &event.users {
            if u >= universe {
                return Err(Error::UserOutOfRange { index: u, users: universe });
            }
            match (event.kind, next.binary_search(&u)) {
                (EventKind::Enter, Err(pos)) => next.insert(pos, u),
                (EventKind::Exit, Ok(pos)) => {
                    next.remove(pos);
                }
                (EventKind::Enter, Ok(_)) => {
                    return Err(Error::Config(format!("slot {}: user {u} entered twice", event.t)));
                }
                (EventKind::Exit, Err(_)) => {
                    return Err(Error::Config(format!("slot {}: user {u} left without being present", event.t)));
                }
            }
        }
    }
    if next.is_empty() {
        return Err(Error::Config("membership change leaves nobody".into()));
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochBound {
    pub epoch: usize,
    pub user: usize,
    pub holds: bool,
    /// Smallest margin over the epoch; negative when violated.
    pub worst_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochBoundReport {
    pub bounds: Vec<EpochBound>,
    /// Largest gap between the cumulative distance and the rescaled epoch distance.
    pub telescoping_error: f64,
    /// Smallest margin of `|cumulative - R_i| <= max_l r_i^(l) d^{t - entry + 1}`.
    pub cumulative_worst_slack: f64,
}

impl EpochBoundReport {
    pub fn holds(&self) -> bool {
        self.bounds.iter().all(|b| b.holds) && self.telescoping_error <= TELESCOPE_TOL && self.cumulative_worst_slack >= 0.0
    }

    pub fn violations(&self) -> impl Iterator<Item = &EpochBound> {
        self.bounds.iter().filter(|b| !b.holds)
    }
}

/// Checks, for every epoch `l` and every user `i` in it,
/// `|(1-d) sum_{tau=t_l}^{t} d^{tau-t_l} r_i(tau) - gamma_i(t_l)| <= r_i^(l) d^{t-t_l+1}`,
/// the telescoping identity linking it to the distance counted from the
/// user's entry, and the resulting bound on that cumulative distance.
pub fn check_epochwise_bound(universe: &NetworkInstance, log: &EpochLog, trace: &PolicyTrace) -> EpochBoundReport {
    let d = universe.discount();
    let n = universe.users();
    // Per user: slot of entry, accumulated discounted throughput, and the largest rate so far.
    let mut entry: Vec<Option<usize>> = vec![None; n];
    let mut cumulative = vec![0.0; n];
    let mut weight = vec![0.0; n];
    let mut r_max = vec![0.0f64; n];
    let mut bounds = Vec::new();
    let mut telescoping_error: f64 = 0.0;
    let mut cumulative_worst = f64::INFINITY;
    for (l, epoch) in log.epochs.iter().enumerate() {
        for (k, &u) in epoch.users.iter().enumerate() {
            if entry[u].is_none() {
                entry[u] = Some(epoch.t_k);
                weight[u] = 1.0 - d;
            }
            let rate = epoch.r_k[k];
            let target = epoch.gamma[k];
            r_max[u] = r_max[u].max(rate);
            let scale = d.powi((epoch.t_k - entry[u].expect("entered")) as i32);
            let mut acc = 0.0;
            let mut w = 1.0 - d;
            let mut bound = rate * d;
            let mut worst = f64::INFINITY;
            for t in epoch.t_k..epoch.t_end.min(trace.horizon()) {
                let r = trace.rates[t][u];
                acc += w * r;
                let gap = (acc - target).abs();
                worst = worst.min(bound - gap + BOUND_TOL * rate.max(1.0));
                cumulative[u] += weight[u] * r;
                weight[u] *= d;
                let cum_gap = cumulative[u] - universe.min_rate(u);
                telescoping_error = telescoping_error.max((cum_gap - scale * (acc - target)).abs());
                let cum_bound = r_max[u] * weight[u] / (1.0 - d);
                cumulative_worst = cumulative_worst.min(cum_bound - cum_gap.abs() + BOUND_TOL * r_max[u].max(1.0));
                w *= d;
                bound *= d;
            }
            bounds.push(EpochBound {
                epoch: l,
                user: u,
                holds: worst >= 0.0,
                worst_slack: worst,
            });
        }
    }
    EpochBoundReport {
        bounds,
        telescoping_error,
        cumulative_worst_slack: cumulative_worst,
    }
}

/// Index of primary user `k` (numbered from 1) in [`membership_scenario`]'s universe.
pub fn primary_index(k: usize) -> usize {
    k - 1
}

/// Index of secondary user `k` (numbered from 1).
pub fn secondary_index(k: usize) -> usize {
    10 + k
}

/// Eleven primary users with floors `0.2, 0.22, ..., 0.4` and eight
/// secondary users with floor `0.1`. Ten primaries and two secondaries start;
/// SU2 leaves at 100, SU3 enters at 150, PU11 at 200 and SU4 to SU8 at 250.
/// Channels are drawn from `seed` with exponential power gains of mean one
/// (direct) and `alpha` (cross).
pub fn membership_scenario(seed: u64, alpha: f64, horizon: usize) -> Result<DynamicScenario> {
    let n = 19;
    let mut rng = keyed_rng(seed, &[0x64796e]);
    let mut gains = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let e: f64 = Exp1.sample(&mut rng);
            gains[i * n + j] = if i == j { e } else { alpha * e };
        }
    }
    let min_rates: Vec<f64> = (0..n).map(|u| if u < 11 { 0.2 + u as f64 * 0.02 } else { 0.1 }).collect();
    let universe = NetworkInstance::from_flat(
        11,
        gains,
        vec![0.05; n],
        vec![PowerGrid::new(1e9, 512)?; n],
        min_rates,
        0.95,
    )?;
    let sensing = SensingModel::uniform(&universe, ErrorDist::Gaussian { variance: 0.1 }, 1.0)?;
    let mut initial: Vec<usize> = (1..=10).map(primary_index).collect();
    initial.extend([secondary_index(1), secondary_index(2)]);
    let events = vec![
        MembershipEvent {
            t: 100,
            kind: EventKind::Exit,
            users: vec![secondary_index(2)],
        },
        MembershipEvent {
            t: 150,
            kind: EventKind::Enter,
            users: vec![secondary_index(3)],
        },
        MembershipEvent {
            t: 200,
            kind: EventKind::Enter,
            users: vec![primary_index(11)],
        },
        MembershipEvent {
            t: 250,
            kind: EventKind::Enter,
            users: (4..=8).map(secondary_index).collect(),
        },
    ];
    Ok(DynamicScenario {
        universe,
        sensing,
        initial,
        events,
        horizon,
        precision: crate::its::DEFAULT_PRECISION,
        monitoring: Monitoring::Perfect,
        form: DistanceForm::Algorithm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_scenario_meets_every_epoch_bound() {
        let scenario = membership_scenario(7, 0.2, 400).unwrap();
        let run = run_dynamic(&scenario, &mut UserStreams::new(7, &[1])).unwrap();
        assert_eq!(run.log.epochs.len(), 5);
        assert!(run.log.rejected.is_empty());
        assert_eq!(run.log.epochs[4].users.len(), 18);
        let report = check_epochwise_bound(&scenario.universe, &run.log, &run.trace);
        assert!(report.holds(), "{:?}", report.violations().collect::<Vec<_>>());
        for profile in &run.trace.profiles {
            assert!(profile.transmitter_count() <= 1);
        }
    }

    #[test]
    fn zero_floor_entrant_leaves_rates_alone() {
        let mut scenario = membership_scenario(3, 0.2, 60).unwrap();
        let floors: Vec<f64> = (0..19).map(|u| if u == 13 { 0.0 } else { scenario.universe.min_rate(u) }).collect();
        scenario.universe = scenario.universe.clone().with_min_rates(floors).unwrap();
        scenario.events = vec![MembershipEvent {
            t: 30,
            kind: EventKind::Enter,
            users: vec![13],
        }];
        let run = run_dynamic(&scenario, &mut UserStreams::new(3, &[])).unwrap();
        let (a, b) = (&run.log.epochs[0], &run.log.epochs[1]);
        for (k, u) in a.users.iter().enumerate() {
            let pos = b.users.binary_search(u).unwrap();
            assert!((a.r_k[k] - b.r_k[pos]).abs() < 1e-6 * a.r_k[k], "user {u}");
        }
    }

    #[test]
    fn exit_frees_slots() {
        let mut scenario = membership_scenario(11, 0.2, 120).unwrap();
        scenario.events.truncate(1);
        let run = run_dynamic(&scenario, &mut UserStreams::new(11, &[])).unwrap();
        let (a, b) = (&run.log.epochs[0], &run.log.epochs[1]);
        for (k, u) in b.users.iter().enumerate() {
            let pos = a.users.binary_search(u).unwrap();
            assert!(b.r_k[k] <= a.r_k[pos] * (1.0 + 1e-9), "user {u}");
        }
        assert!(run.trace.rates[100..].iter().all(|r| r[secondary_index(2)] == 0.0));
    }

    #[test]
    fn bad_events_are_reported() {
        assert!(apply_events(&[0, 1], &[MembershipEvent { t: 1, kind: EventKind::Enter, users: vec![1] }], 3).is_err());
        assert!(apply_events(&[0, 1], &[MembershipEvent { t: 1, kind: EventKind::Exit, users: vec![2] }], 3).is_err());
        assert!(apply_events(&[0], &[MembershipEvent { t: 1, kind: EventKind::Exit, users: vec![0] }], 3).is_err());
    }
}
