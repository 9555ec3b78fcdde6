//! Longest-distance-first scheduling.
//!
//! The scheduler carries one number per user, `r'_j`: the share of future
//! slots (discounted) the user is still owed, normalized by its instantaneous
//! rate. Each slot the user furthest from its floor transmits, and the shares
//! are updated so that what was promised is exactly what will be delivered.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::its::{FeasibilityConstants, ItsSolution, Monitoring};
use crate::model::{NetworkInstance, PowerProfile, SensingModel};
use crate::policy::{evaluate, Policy, PolicyTrace};
use crate::rng::UserStreams;

/// Allowed drift of `sum r'` away from one after a single update.
pub const CONSERVATION_TOL: f64 = 1e-12;

/// How far `r'` may fall outside `[0, 1]` before it counts as an escape rather than rounding.
pub const REGION_TOL: f64 = 1e-12;

/// Absolute slack granted to the convergence bound for floating-point summation.
pub const BOUND_TOL: f64 = 1e-12;

/// Which distance index ranks the users.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceForm {
    /// `(r' - mu) / (1 - r') * rho`.
    #[default]
    Algorithm,
    /// `(r' - mu) / (1 - r' + sum_k rho / (-b_jk))`.
    Prose,
}

/// Scheduler state: the slot index and the normalized continuation shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationState {
    pub t: usize,
    pub r_prime: Vec<f64>,
}

impl ContinuationState {
    /// `r'_j(0) = target_j / r_j`.
    pub fn initial(targets: &[f64], rates: &[f64]) -> Self {
        ContinuationState {
            t: 0,
            r_prime: targets.iter().zip(rates).map(|(t, r)| t / r).collect(),
        }
    }

    /// Continuation throughputs `gamma_j = r'_j r_j`.
    pub fn gamma(&self, rates: &[f64]) -> Vec<f64> {
        self.r_prime.iter().zip(rates).map(|(s, r)| s * r).collect()
    }
}

/// Distance of user `j` from its operating point.
///
/// Under perfect monitoring there is no signal weighting and the index is
/// `r' / (1 - r')`, which ranks users by `r'`. A user owed the whole future
/// (`r' >= 1`) is at infinite distance.
pub fn distance(state: &ContinuationState, constants: &FeasibilityConstants, j: usize, form: DistanceForm) -> f64 {
    let r = state.r_prime[j];
    if r >= 1.0 {
        return f64::INFINITY;
    }
    let mu = constants.mu_lower[j];
    if constants.monitoring == Monitoring::Perfect {
        return (r - mu) / (1.0 - r);
    }
    match form {
        DistanceForm::Algorithm => (r - mu) / (1.0 - r) * constants.rho_tdma[j],
        DistanceForm::Prose => {
            let transfer: f64 = (0..state.r_prime.len())
                .filter(|&k| k != j)
                .map(|k| constants.quiet_transfer(j, k))
                .sum();
            (r - mu) / (1.0 - r + transfer)
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(j);
        }
    }
    best
}

/// Who transmits in a slot, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub t: usize,
    pub transmitter: Option<usize>,
    pub distances: Vec<f64>,
    pub power: f64,
}

/// The scheduler state machine.
#[derive(Debug, Clone)]
pub struct LdfScheduler {
    rates: Vec<f64>,
    powers: Vec<f64>,
    constants: FeasibilityConstants,
    discount: f64,
    form: DistanceForm,
    state: ContinuationState,
    clamp_events: usize,
}

impl LdfScheduler {
    /// Starts from `r'_j = R_j / r_j`.
    pub fn new(solution: &ItsSolution, constants: &FeasibilityConstants, discount: f64, form: DistanceForm) -> Result<Self> {
        let state = ContinuationState::initial(&solution.targets, &solution.rates);
        Self::from_state(solution.rates.clone(), solution.powers.clone(), constants.clone(), discount, form, state)
    }

    pub fn from_state(
        rates: Vec<f64>,
        powers: Vec<f64>,
        constants: FeasibilityConstants,
        discount: f64,
        form: DistanceForm,
        state: ContinuationState,
    ) -> Result<Self> {
        let n = rates.len();
        if powers.len() != n || state.r_prime.len() != n || constants.mu_lower.len() != n {
            return Err(Error::InvalidInstance("scheduler inputs disagree on the number of users".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidInstance(format!("discount {discount} outside (0, 1)")));
        }
        Ok(LdfScheduler {
            rates,
            powers,
            constants,
            discount,
            form,
            state,
            clamp_events: 0,
        })
    }

    pub fn state(&self) -> &ContinuationState {
        &self.state
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn constants(&self) -> &FeasibilityConstants {
        &self.constants
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.state.gamma(&self.rates)
    }

    /// Number of times a share had to be clamped back into `[0, 1]`.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn decide(&self) -> ScheduleDecision {
        let n = self.rates.len();
        let distances: Vec<f64> = (0..n).map(|j| distance(&self.state, &self.constants, j, self.form)).collect();
        let owed = self.state.r_prime.iter().any(|&r| r > 0.0);
        let transmitter = if owed { argmax(&distances) } else { None };
        ScheduleDecision {
            t: self.state.t,
            transmitter,
            power: transmitter.map_or(0.0, |i| self.powers[i]),
            distances,
        }
    }

    /// Applies the update for `decision` after observing the slot's signal.
    pub fn advance(&mut self, decision: &ScheduleDecision, y: bool) -> Result<()> {
        if decision.t != self.state.t {
            return Err(Error::Invariant(format!(
                "decision for slot {} applied at slot {}",
                decision.t, self.state.t
            )));
        }
        let d = self.discount;
        let k = 1.0 / d - 1.0;
        let n = self.rates.len();
        if let Some(i) = decision.transmitter {
            let mut next: Vec<f64> = self.state.r_prime.iter().map(|r| r / d).collect();
            match self.constants.monitoring {
                Monitoring::Perfect => next[i] -= k,
                Monitoring::SignalDependent if !y => {
                    let mut moved = 0.0;
                    for j in (0..n).filter(|&j| j != i) {
                        let c = self.constants.quiet_transfer(i, j);
                        next[j] += k * c;
                        moved += c;
                    }
                    next[i] -= k * (1.0 + moved);
                }
                Monitoring::SignalDependent => {
                    let mut moved = 0.0;
                    for j in (0..n).filter(|&j| j != i) {
                        let c = self.constants.distress_transfer(i, j);
                        next[j] -= k * c;
                        moved += c;
                    }
                    next[i] -= k * (1.0 - moved);
                }
            }
            self.state.r_prime = next;
        }
        self.state.t += 1;
        self.settle()
    }

    /// Decides, applies the update for signal `y`, and returns the decision.
    pub fn step(&mut self, y: bool) -> Result<ScheduleDecision> {
        let decision = self.decide();
        self.advance(&decision, y)?;
        Ok(decision)
    }

    /// Accounts for a slot the scheduler did not control, in which user `j`
    /// received rate `realized[j]`. Shares that would turn negative are
    /// clamped to zero.
    pub fn absorb_slot(&mut self, realized: &[f64]) -> Result<()> {
        let d = self.discount;
        for (j, r) in self.state.r_prime.iter_mut().enumerate() {
            *r = (*r - (1.0 - d) * realized[j] / self.rates[j]) / d;
            if *r < 0.0 {
                log::warn!("slot {}: user {j} over-served by {:e}; share clamped to zero", self.state.t, -*r);
                *r = 0.0;
                self.clamp_events += 1;
            }
        }
        self.state.t += 1;
        self.normalize();
        Ok(())
    }

    /// Conservation and region checks after an update, then renormalization.
    ///
    /// Each update divides by `delta`, so rounding errors grow by `1/delta` per
    /// slot; rescaling to an exact unit sum after the check keeps them from
    /// compounding.
    fn settle(&mut self) -> Result<()> {
        let t = self.state.t;
        let sum: f64 = self.state.r_prime.iter().sum();
        if (sum - 1.0).abs() > CONSERVATION_TOL {
            return Err(Error::Invariant(format!(
                "slot {t}: continuation shares sum to {sum}, not 1"
            )));
        }
        for (j, r) in self.state.r_prime.iter_mut().enumerate() {
            if *r >= 0.0 && *r <= 1.0 {
                continue;
            }
            let outside = *r < -REGION_TOL || *r > 1.0 + REGION_TOL;
            if outside && self.constants.monitoring == Monitoring::Perfect {
                return Err(Error::Invariant(format!(
                    "slot {t}: user {j} continuation share {r} left [0, 1]; the discount factor is below what the schedule needs"
                )));
            }
            if outside {
                log::warn!("slot {t}: user {j} continuation share {r} clamped into [0, 1]");
                self.clamp_events += 1;
            }
            *r = r.clamp(0.0, 1.0);
        }
        self.normalize();
        Ok(())
    }

    fn normalize(&mut self) {
        let sum: f64 = self.state.r_prime.iter().sum();
        if sum > 0.0 {
            for r in self.state.r_prime.iter_mut() {
                *r /= sum;
            }
        }
    }
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub t: usize,
    pub i_star: Option<usize>,
    pub d: Vec<f64>,
    pub r_prime: Vec<f64>,
    pub y: Option<bool>,
}

/// Writes one JSON object per slot; infinite distances become `null`.
pub fn write_decisions_jsonl<W: Write>(records: &[DecisionRecord], mut out: W) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// The scheduler as a [`Policy`]: each call first applies the previous slot's
/// signal, then decides the current slot.
#[derive(Debug, Clone)]
pub struct LdfPolicy {
    scheduler: LdfScheduler,
    pending: Option<ScheduleDecision>,
    log: Vec<DecisionRecord>,
}

impl LdfPolicy {
    pub fn new(scheduler: LdfScheduler) -> Self {
        LdfPolicy {
            scheduler,
            pending: None,
            log: Vec::new(),
        }
    }

    pub fn scheduler(&self) -> &LdfScheduler {
        &self.scheduler
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.log
    }

    pub fn into_decisions(self) -> Vec<DecisionRecord> {
        self.log
    }

    fn catch_up(&mut self, history: &[bool]) -> Result<()> {
        if let Some(prev) = self.pending.take() {
            let y = history[prev.t];
            self.scheduler.advance(&prev, y)?;
            if let Some(rec) = self.log.last_mut() {
                rec.y = Some(y);
            }
        }
        Ok(())
    }
}

impl Policy for LdfPolicy {
    fn is_tdma(&self) -> bool {
        true
    }

    fn profile(&mut self, _t: usize, history: &[bool]) -> Result<PowerProfile> {
        self.catch_up(history)?;
        let n = self.scheduler.rates().len();
        let decision = self.scheduler.decide();
        self.log.push(DecisionRecord {
            t: decision.t,
            i_star: decision.transmitter,
            d: decision.distances.clone(),
            r_prime: self.scheduler.state().r_prime.clone(),
            y: None,
        });
        let profile = match decision.transmitter {
            Some(i) => PowerProfile::solo(n, i, decision.power),
            None => PowerProfile::silent(n),
        };
        self.pending = Some(decision);
        Ok(profile)
    }
}

/// A simulated schedule with its decision log.
#[derive(Debug, Clone)]
pub struct LdfRun {
    pub trace: PolicyTrace,
    pub decisions: Vec<DecisionRecord>,
    /// Smallest margin by which the convergence bound held (perfect monitoring only).
    pub worst_slack: Option<f64>,
    pub clamp_events: usize,
}

/// Checks `|(1-d) sum_{tau<=t} d^tau r_i(tau) - target_i| <= r_i d^{t+1}` for every slot and user.
///
/// Returns the smallest slack, or the first violation.
pub fn check_convergence_bound(trace: &PolicyTrace, targets: &[f64], rates: &[f64], discount: f64) -> Result<f64> {
    let mut worst = f64::INFINITY;
    for (i, (&target, &rate)) in targets.iter().zip(rates).enumerate() {
        let mut acc = 0.0;
        let mut weight = 1.0 - discount;
        let mut bound = rate * discount;
        for t in 0..trace.horizon() {
            acc += weight * trace.rates[t][i];
            let gap = (acc - target).abs();
            let slack = bound - gap;
            if slack < -BOUND_TOL * rate.max(1.0) {
                return Err(Error::BoundViolation { t, user: i, gap, bound });
            }
            worst = worst.min(slack);
            weight *= discount;
            bound *= discount;
        }
    }
    Ok(worst)
}

/// Runs the scheduler for `horizon` slots on `net`.
///
/// Under perfect monitoring the convergence bound is asserted at every slot
/// for every user.
pub fn run_ldf(
    net: &NetworkInstance,
    sensing: &SensingModel,
    solution: &ItsSolution,
    constants: &FeasibilityConstants,
    horizon: usize,
    streams: &mut UserStreams,
    form: DistanceForm,
) -> Result<LdfRun> {
    let scheduler = LdfScheduler::new(solution, constants, net.discount(), form)?;
    let mut policy = LdfPolicy::new(scheduler);
    let trace = evaluate(&mut policy, net, sensing, horizon, streams)?;
    let clamp_events = policy.scheduler().clamp_events();
    let mut decisions = policy.into_decisions();
    for rec in decisions.iter_mut() {
        rec.y = Some(trace.signals[rec.t]);
    }
    let worst_slack = match constants.monitoring {
        Monitoring::Perfect => Some(check_convergence_bound(&trace, &solution.targets, &solution.rates, net.discount())?),
        Monitoring::SignalDependent => None,
    };
    Ok(LdfRun {
        trace,
        decisions,
        worst_slack,
        clamp_events,
    })
}
