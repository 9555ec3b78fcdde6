//! Instantaneous throughput selection.
//!
//! Every TDMA user transmits at a single instantaneous rate `r_i`; it then
//! needs a discounted share `R_i / r_i` of the slots, and the shares must add
//! up to one. The rates minimizing an energy criterion are found by bisection
//! on the multiplier `lambda` of that constraint: for a given `lambda` each
//! user solves its own scalar KKT equation, broadcasts its share, and the sum
//! of the shares tells everybody which half of the bracket to keep.
//!
//! This module also computes the constants that decide whether a schedule can
//! keep self-interested users honest, and the minimum discount factor.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{distress_prob, system_distress_prob, NetworkInstance, PowerProfile, SensingModel};

/// Doubling the upper multiplier past this value means no rate vector meets the targets.
pub const LAMBDA_CAP: f64 = 1e12;

/// Absolute tolerance of the scalar KKT solve.
pub const INNER_TOL: f64 = 1e-12;

/// Default outer precision `e`.
pub const DEFAULT_PRECISION: f64 = 1e-9;

/// What the users can observe about each other.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitoring {
    /// Obedient users, or deviations observed without error: no deviation terms.
    #[default]
    Perfect,
    /// Deviations are only detected through the noisy distress signal.
    SignalDependent,
}

/// Energy criterion minimized over the discounted average powers `P_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    /// `sum_i w_i P_i`.
    WeightedSum { weights: Vec<f64> },
    /// `sum_i w_i ln P_i`.
    ProportionalFairness { weights: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    WeightedSum,
    ProportionalFairness,
}

impl Criterion {
    /// Weighted sum with every weight `1/n`.
    pub fn equal_sum(n: usize) -> Self {
        Criterion::WeightedSum {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn kind(&self) -> CriterionKind {
        match self {
            Criterion::WeightedSum { .. } => CriterionKind::WeightedSum,
            Criterion::ProportionalFairness { .. } => CriterionKind::ProportionalFairness,
        }
    }

    pub fn weights(&self) -> &[f64] {
        match self {
            Criterion::WeightedSum { weights } | Criterion::ProportionalFairness { weights } => weights,
        }
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Self {
        match self {
            Criterion::WeightedSum { .. } => Criterion::WeightedSum { weights },
            Criterion::ProportionalFairness { .. } => Criterion::ProportionalFairness { weights },
        }
    }

    pub fn subset(&self, users: &[usize]) -> Self {
        self.with_weights(users.iter().map(|&u| self.weights()[u]).collect())
    }

    pub fn validate(&self, net: &NetworkInstance) -> Result<()> {
        let w = self.weights();
        if w.len() != net.users() {
            return Err(Error::Config(format!(
                "criterion has {} weights for {} users",
                w.len(),
                net.users()
            )));
        }
        if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::Config("criterion weights must be positive".into()));
        }
        if self.kind() == CriterionKind::ProportionalFairness && net.min_rates().iter().any(|&r| r <= 0.0) {
            return Err(Error::Config(
                "proportional fairness needs positive minimum rates".into(),
            ));
        }
        Ok(())
    }

    /// Left-hand side `phi_i(r)` of the KKT equation `phi_i(r) = lambda`.
    ///
    /// `phi_i(r) = -dE/dP_i * (2^r - 1 - ln2 r 2^r) * sigma_i^2 / g_ii`,
    /// increasing in `r` with `phi_i(0) = 0`.
    pub fn kkt_lhs(&self, net: &NetworkInstance, i: usize, r: f64) -> f64 {
        let a = r * LN_2;
        let scale = net.noise(i) / net.gain(i, i);
        let bend = a * a.exp() - a.exp_m1();
        match self {
            Criterion::WeightedSum { weights } => weights[i] * scale * bend,
            Criterion::ProportionalFairness { weights } => {
                if a == 0.0 {
                    return 0.0;
                }
                weights[i] / net.min_rate(i) * r * bend / a.exp_m1()
            }
        }
    }

    /// `d phi_i / d r`.
    fn kkt_slope(&self, net: &NetworkInstance, i: usize, r: f64) -> f64 {
        let a = r * LN_2;
        let ea = a.exp();
        match self {
            Criterion::WeightedSum { weights } => weights[i] * net.noise(i) / net.gain(i, i) * LN_2 * a * ea,
            Criterion::ProportionalFairness { weights } => {
                if a == 0.0 {
                    return weights[i] / net.min_rate(i) * 0.5;
                }
                let em1 = a.exp_m1();
                let q = a * ea / em1 - 1.0;
                let dq = ea * ((1.0 + a) * em1 - a * ea) / (em1 * em1);
                weights[i] / net.min_rate(i) * (q + a * dq)
            }
        }
    }

    /// Criterion value at the discounted powers implied by `rates`.
    pub fn objective(&self, net: &NetworkInstance, rates: &[f64]) -> f64 {
        let power = |i: usize| {
            net.noise(i) / net.gain(i, i) * (rates[i] * LN_2).exp_m1() / rates[i] * net.min_rate(i)
        };
        match self {
            Criterion::WeightedSum { weights } => (0..rates.len()).map(|i| weights[i] * power(i)).sum(),
            Criterion::ProportionalFairness { weights } => {
                (0..rates.len()).map(|i| weights[i] * power(i).ln()).sum()
            }
        }
    }
}

/// Profile in which only user `i` transmits, at the power that gives rate `r`.
pub fn tdma_profile(net: &NetworkInstance, i: usize, r: f64) -> Result<PowerProfile> {
    net.check_index(i)?;
    if r < 0.0 || !r.is_finite() {
        return Err(Error::NonPositiveRate(r));
    }
    let n = net.users();
    if r == 0.0 {
        return Ok(PowerProfile::silent(n));
    }
    let power = net.solo_power(i, r);
    let max = net.grid(i).max;
    if !net.grid(i).contains(power) {
        return Err(Error::RateInfeasible {
            user: i,
            rate: r,
            power,
            max,
        });
    }
    Ok(PowerProfile::solo(n, i, power.min(max)))
}

/// Outcome of the feasibility test on the deviation constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FeasibilityStatus {
    Feasible,
    /// The lower bounds on the continuation shares add up to at least one.
    Infeasible { mu_sum: f64 },
    /// Some deviation does not raise the distress probability.
    OutsideRegime { pairs: Vec<(usize, usize)> },
}

/// Deviation-deterrence constants and the minimum discount factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityConstants {
    pub monitoring: Monitoring,
    /// `b[i][j]`: worst-case trade-off between the distress probability and the
    /// normalized rate user `j` gets by transmitting in user `i`'s slot.
    /// Diagonal entries are unused; `-inf` when deviations are not considered.
    pub b: Vec<Vec<f64>>,
    pub mu_lower: Vec<f64>,
    pub rate_cap: Vec<f64>,
    pub delta_min: f64,
    /// Distress probability when user `i` transmits alone at its operating power.
    pub rho_tdma: Vec<f64>,
    /// Passes of the `b` / rate-cap fixed point.
    pub passes: usize,
    pub status: FeasibilityStatus,
}

impl FeasibilityConstants {
    /// Constants for obedient users: no deviation terms, so the only
    /// requirement is `delta >= 1 - 1/n`.
    pub fn obedient(net: &NetworkInstance, sensing: &SensingModel, rates: &[f64]) -> Result<Self> {
        let n = net.users();
        let rho_tdma = sole_distress(net, sensing, rates)?;
        let b = vec![vec![f64::NEG_INFINITY; n]; n];
        let mu_lower = vec![0.0; n];
        let delta_min = min_discount(&b, &mu_lower, &rho_tdma);
        Ok(FeasibilityConstants {
            monitoring: Monitoring::Perfect,
            b,
            mu_lower,
            rate_cap: (0..n).map(|i| net.max_rate(i)).collect(),
            delta_min,
            rho_tdma,
            passes: 0,
            status: FeasibilityStatus::Feasible,
        })
    }

    pub fn is_feasible(&self) -> bool {
        self.status == FeasibilityStatus::Feasible
    }

    pub fn require_feasible(&self) -> Result<()> {
        match &self.status {
            FeasibilityStatus::Feasible => Ok(()),
            FeasibilityStatus::Infeasible { mu_sum } => Err(Error::Infeasible(format!(
                "continuation lower bounds sum to {mu_sum} >= 1"
            ))),
            FeasibilityStatus::OutsideRegime { pairs } => Err(Error::Infeasible(format!(
                "deviations by {pairs:?} do not raise the distress probability"
            ))),
        }
    }

    /// Whether `discount` is large enough for the schedule to exist.
    pub fn admits_discount(&self, discount: f64) -> bool {
        self.is_feasible() && discount >= self.delta_min
    }

    /// `rho_i / (-b_ij)`, the continuation share moved to `j` after a quiet slot of `i`.
    pub fn quiet_transfer(&self, i: usize, j: usize) -> f64 {
        self.rho_tdma[i] / -self.b[i][j]
    }

    /// `(1 - rho_i) / (-b_ij)`, the share moved away from `j` after a distress signal.
    pub fn distress_transfer(&self, i: usize, j: usize) -> f64 {
        (1.0 - self.rho_tdma[i]) / -self.b[i][j]
    }
}

fn sole_distress(net: &NetworkInstance, sensing: &SensingModel, rates: &[f64]) -> Result<Vec<f64>> {
    let n = net.users();
    if rates.len() != n {
        return Err(Error::InvalidInstance(format!("{} rates for {n} users", rates.len())));
    }
    if sensing.len() != n {
        return Err(Error::InvalidInstance(format!("sensing covers {} of {n} users", sensing.len())));
    }
    // Alone, a user's interference temperature is its noise floor whatever its power.
    (0..n)
        .map(|i| {
            let p = PowerProfile::solo(n, i, net.grid(i).max);
            distress_prob(net, sensing, &p, i)
        })
        .collect()
}

fn min_discount(b: &[Vec<f64>], mu_lower: &[f64], rho: &[f64]) -> f64 {
    let n = mu_lower.len();
    let mut transfer = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                transfer += rho[i] / -b[i][j];
            }
        }
    }
    let slack = 1.0 - mu_lower.iter().sum::<f64>();
    1.0 / (1.0 + slack / ((n - 1) as f64 + transfer))
}

/// Deviation constants for self-interested users with signal-dependent detection.
///
/// `b_ij` maximizes, over the positive grid powers of `j`, the drop in the
/// probability of a quiet slot per unit of normalized rate that `j` steals by
/// transmitting in `i`'s slot. The normalizer depends on the rate caps, which
/// depend on `b` in turn; the caps start at the grid maxima and the pair is
/// evaluated twice.
pub fn feasibility_constants(net: &NetworkInstance, sensing: &SensingModel, rates: &[f64]) -> Result<FeasibilityConstants> {
    let n = net.users();
    let rho_tdma = sole_distress(net, sensing, rates)?;
    let profiles = (0..n)
        .map(|i| tdma_profile(net, i, rates[i]))
        .collect::<Result<Vec<_>>>()?;
    let grid_caps: Vec<f64> = (0..n).map(|i| net.max_rate(i)).collect();
    let mut caps = grid_caps.clone();
    let mut b = vec![vec![f64::NEG_INFINITY; n]; n];
    let mut mu_lower = vec![0.0; n];
    const PASSES: usize = 2;
    for _ in 0..PASSES {
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut best = f64::NEG_INFINITY;
                for p_j in net.grid(j).levels().skip(1) {
                    let mut dev = profiles[i].clone();
                    dev.set(j, p_j);
                    let rho = system_distress_prob(net, sensing, &dev)?;
                    let gain = net.throughput(&dev, j)? / caps[j];
                    best = best.max((rho_tdma[i] - rho) / gain);
                }
                b[i][j] = best;
            }
        }
        for i in 0..n {
            mu_lower[i] = (0..n)
                .filter(|&j| j != i)
                .map(|j| (1.0 - rho_tdma[i]) / -b[i][j])
                .fold(0.0, f64::max);
            caps[i] = (net.min_rate(i) / mu_lower[i]).min(grid_caps[i]);
        }
    }

    let outside: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && !(b[i][j] < 0.0))
        .collect();
    let mu_sum: f64 = mu_lower.iter().sum();
    let status = if !outside.is_empty() {
        FeasibilityStatus::OutsideRegime { pairs: outside }
    } else if mu_sum >= 1.0 {
        FeasibilityStatus::Infeasible { mu_sum }
    } else {
        FeasibilityStatus::Feasible
    };
    let delta_min = min_discount(&b, &mu_lower, &rho_tdma);
    Ok(FeasibilityConstants {
        monitoring: Monitoring::SignalDependent,
        b,
        mu_lower,
        rate_cap: caps,
        delta_min,
        rho_tdma,
        passes: PASSES,
        status,
    })
}

/// Solution of one user's KKT equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerSolution {
    pub rate: f64,
    /// The equation has no root below the cap and the cap was returned.
    pub capped: bool,
}

/// Solves `phi_i(r) = lambda` on `(0, cap]` by Newton steps safeguarded with bisection.
pub fn kkt_inner_solve(net: &NetworkInstance, criterion: &Criterion, i: usize, lambda: f64, cap: f64) -> Result<InnerSolution> {
    net.check_index(i)?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInstance(format!("multiplier must be nonnegative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(InnerSolution { rate: 0.0, capped: false });
    }
    let f = |r: f64| criterion.kkt_lhs(net, i, r) - lambda;
    if f(cap) <= 0.0 {
        return Ok(InnerSolution { rate: cap, capped: true });
    }
    let (mut lo, mut hi) = (0.0, cap);
    let mut r = 0.5 * cap.min(8.0);
    for _ in 0..400 {
        let v = f(r);
        if v.abs() <= INNER_TOL {
            break;
        }
        if v < 0.0 {
            lo = r;
        } else {
            hi = r;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        let next = r - v / criterion.kkt_slope(net, i, r);
        r = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
    }
    Ok(InnerSolution { rate: r, capped: false })
}

/// Result of the bisection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItsSolution {
    /// Throughput targets the rates were chosen for.
    pub targets: Vec<f64>,
    pub rates: Vec<f64>,
    pub powers: Vec<f64>,
    pub lambda: f64,
    /// Multipliers of the rate caps (zero for users below their cap).
    pub kkt_multipliers: Vec<f64>,
    pub capped: Vec<bool>,
    pub doubling_steps: usize,
    pub bisection_steps: usize,
    pub iterations: usize,
    /// Upper end of the multiplier bracket when bisection started.
    pub lambda_bracket: f64,
    /// `|sum R/r - 1|` when the loop stopped.
    pub loop_residual: f64,
    /// `|sum R/r - 1|` after normalization.
    pub residual: f64,
    pub messages_broadcast: usize,
}

impl ItsSolution {
    /// Bisection steps that halving the starting bracket down to width `tol` would take.
    pub fn halving_budget(&self, tol: f64) -> usize {
        (self.lambda_bracket / tol).log2().ceil().max(0.0) as usize
    }
}

/// In-process broadcast medium. Every round each agent posts one value; the
/// round is delivered to everybody at once.
#[derive(Debug, Clone)]
pub struct BroadcastBus {
    pending: Vec<Option<f64>>,
    messages: usize,
    rounds: usize,
}

impl BroadcastBus {
    pub fn new(agents: usize) -> Self {
        BroadcastBus {
            pending: vec![None; agents],
            messages: 0,
            rounds: 0,
        }
    }

    pub fn publish(&mut self, agent: usize, value: f64) -> Result<()> {
        if self.pending[agent].replace(value).is_some() {
            return Err(Error::Invariant(format!("agent {agent} broadcast twice in one round")));
        }
        self.messages += 1;
        Ok(())
    }

    /// Closes the round and returns the sum of all broadcasts, in agent order.
    pub fn deliver(&mut self) -> Result<f64> {
        let mut sum = 0.0;
        for (agent, slot) in self.pending.iter_mut().enumerate() {
            sum += slot
                .take()
                .ok_or_else(|| Error::Invariant(format!("agent {agent} missed round {}", self.rounds)))?;
        }
        self.rounds += 1;
        Ok(sum)
    }

    pub fn messages(&self) -> usize {
        self.messages
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Doubling,
    Bisecting,
    Done,
}

/// One user's side of the bisection. All agents see the same broadcasts and so
/// keep identical copies of the bracket.
#[derive(Debug, Clone)]
struct Agent {
    user: usize,
    target: f64,
    cap: f64,
    lambda: f64,
    low: f64,
    high: f64,
    phase: Phase,
    rate: f64,
    capped: bool,
    doublings: usize,
    bisections: usize,
    bracket: f64,
}

impl Agent {
    fn new(user: usize, target: f64, cap: f64) -> Self {
        Agent {
            user,
            target,
            cap,
            lambda: 1.0,
            low: 0.0,
            high: 1.0,
            phase: Phase::Doubling,
            rate: 0.0,
            capped: false,
            doublings: 0,
            bisections: 0,
            bracket: 1.0,
        }
    }

    fn share(&mut self, net: &NetworkInstance, criterion: &Criterion) -> Result<f64> {
        let s = kkt_inner_solve(net, criterion, self.user, self.lambda, self.cap)?;
        self.rate = s.rate;
        self.capped = s.capped;
        Ok(self.target / self.rate)
    }

    fn receive(&mut self, total: f64, precision: f64) -> Result<()> {
        let residual = (total - 1.0).abs();
        match self.phase {
            Phase::Doubling if total > 1.0 => {
                self.high *= 2.0;
                self.lambda = self.high;
                self.doublings += 1;
                if self.high > LAMBDA_CAP {
                    return Err(Error::Infeasible(format!(
                        "multiplier passed {LAMBDA_CAP:e}: the throughput targets cannot be met within the rate caps"
                    )));
                }
                return Ok(());
            }
            Phase::Doubling => {
                self.phase = Phase::Bisecting;
                self.bracket = self.high;
            }
            Phase::Bisecting => {
                if total < 1.0 {
                    self.high = self.lambda;
                } else {
                    self.low = self.lambda;
                }
            }
            Phase::Done => return Ok(()),
        }
        if residual <= precision {
            self.phase = Phase::Done;
            return Ok(());
        }
        let mid = 0.5 * (self.low + self.high);
        if mid <= self.low || mid >= self.high {
            return Err(Error::Stalled {
                lambda: self.lambda,
                residual,
            });
        }
        self.lambda = mid;
        self.bisections += 1;
        Ok(())
    }
}

/// Bisection over `lambda` with per-user rate caps.
pub fn its_solve_capped(net: &NetworkInstance, criterion: &Criterion, caps: &[f64], precision: f64) -> Result<ItsSolution> {
    let n = net.users();
    criterion.validate(net)?;
    if caps.len() != n || caps.iter().any(|&c| !(c > 0.0)) {
        return Err(Error::InvalidInstance("need one positive rate cap per user".into()));
    }
    if !(precision > 0.0) {
        return Err(Error::Config(format!("precision must be positive, got {precision}")));
    }
    if net.min_rates().iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidInstance("at least one user needs a positive target".into()));
    }
    let mut agents: Vec<Agent> = (0..n).map(|i| Agent::new(i, net.min_rate(i), caps[i])).collect();
    let mut bus = BroadcastBus::new(n);
    let mut total;
    loop {
        for a in agents.iter_mut() {
            let share = a.share(net, criterion)?;
            bus.publish(a.user, share)?;
        }
        total = bus.deliver()?;
        log::debug!("round {}: lambda = {:e}, shares sum to {total}", bus.rounds(), agents[0].lambda);
        for a in agents.iter_mut() {
            a.receive(total, precision)?;
        }
        if agents.iter().any(|a| a.phase != agents[0].phase || a.lambda != agents[0].lambda) {
            return Err(Error::Invariant("agents disagree on the multiplier".into()));
        }
        if agents[0].phase == Phase::Done {
            break;
        }
    }

    let lead = &agents[0];
    let lambda = lead.lambda;
    let kkt_multipliers = agents
        .iter()
        .map(|a| {
            if a.capped {
                (a.target * (lambda - criterion.kkt_lhs(net, a.user, a.rate))).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    let rates: Vec<f64> = agents.iter().map(|a| (a.rate * total).min(caps[a.user])).collect();
    let powers = rates
        .iter()
        .enumerate()
        .map(|(i, &r)| tdma_profile(net, i, r).map(|p| p.power(i)))
        .collect::<Result<_>>()?;
    let residual = (net.min_rates().iter().zip(&rates).map(|(t, r)| t / r).sum::<f64>() - 1.0).abs();
    Ok(ItsSolution {
        targets: net.min_rates().to_vec(),
        rates,
        powers,
        lambda,
        kkt_multipliers,
        capped: agents.iter().map(|a| a.capped).collect(),
        doubling_steps: lead.doublings,
        bisection_steps: lead.bisections,
        iterations: lead.doublings + lead.bisections,
        lambda_bracket: lead.bracket,
        loop_residual: (total - 1.0).abs(),
        residual,
        messages_broadcast: bus.messages(),
    })
}

/// Rates together with the deviation constants they were certified against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItsReport {
    pub solution: ItsSolution,
    pub constants: FeasibilityConstants,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    r_star: &'a [f64],
    p_star: &'a [f64],
    lambda: f64,
    iterations: usize,
    doubling_steps: usize,
    bisection_steps: usize,
    loop_residual: f64,
    residual: f64,
    delta_min: f64,
    mu_lower: &'a [f64],
    b_matrix: &'a [Vec<f64>],
    rho_tdma: &'a [f64],
    rate_cap: &'a [f64],
    kkt_multipliers: &'a [f64],
    messages_broadcast: usize,
    monitoring: Monitoring,
}

impl ItsReport {
    /// Flat JSON summary; non-finite entries of `b` serialize as `null`.
    pub fn to_json(&self) -> serde_json::Value {
        let s = &self.solution;
        let c = &self.constants;
        serde_json::to_value(ReportJson {
            r_star: &s.rates,
            p_star: &s.powers,
            lambda: s.lambda,
            iterations: s.iterations,
            doubling_steps: s.doubling_steps,
            bisection_steps: s.bisection_steps,
            loop_residual: s.loop_residual,
            residual: s.residual,
            delta_min: c.delta_min,
            mu_lower: &c.mu_lower,
            b_matrix: &c.b,
            rho_tdma: &c.rho_tdma,
            rate_cap: &c.rate_cap,
            kkt_multipliers: &s.kkt_multipliers,
            messages_broadcast: s.messages_broadcast,
            monitoring: c.monitoring,
        })
        .expect("report serializes")
    }
}

/// Optimal instantaneous rates for `criterion`, capped as the monitoring model requires.
///
/// Under perfect monitoring the caps are the grid maxima. Under signal-dependent
/// monitoring the deviation constants are computed at the uncapped solution,
/// their rate caps are imposed, and the constants are recomputed at the final rates.
pub fn its_solve(
    net: &NetworkInstance,
    sensing: &SensingModel,
    criterion: &Criterion,
    precision: f64,
    monitoring: Monitoring,
) -> Result<ItsReport> {
    let grid_caps: Vec<f64> = (0..net.users()).map(|i| net.max_rate(i)).collect();
    let first = its_solve_capped(net, criterion, &grid_caps, precision)?;
    match monitoring {
        Monitoring::Perfect => {
            let constants = FeasibilityConstants::obedient(net, sensing, &first.rates)?;
            Ok(ItsReport {
                solution: first,
                constants,
            })
        }
        Monitoring::SignalDependent => {
            let pre = feasibility_constants(net, sensing, &first.rates)?;
            pre.require_feasible()?;
            let solution = its_solve_capped(net, criterion, &pre.rate_cap, precision)?;
            let constants = feasibility_constants(net, sensing, &solution.rates)?;
            constants.require_feasible()?;
            Ok(ItsReport { solution, constants })
        }
    }
}

/// Second-order check of the criterion in the coordinates `x_i = 1/r_i`, where
/// the rate-selection problem is convex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub kind: CriterionKind,
    pub points: usize,
    pub min_second_difference: f64,
    pub min_analytic: f64,
    pub violations: usize,
}

impl ConvexityReport {
    pub fn is_convex(&self) -> bool {
        self.violations == 0
    }
}

/// `f(x) = (2^{1/x} - 1) x` and its first two derivatives.
fn share_energy(x: f64) -> (f64, f64, f64) {
    let a = LN_2 / x;
    let e = a.exp();
    let f = a.exp_m1() * x;
    let d1 = a.exp_m1() - a * e;
    let d2 = LN_2 * e / (x * x * x);
    (f, d1, d2)
}

/// Checks convexity of every user's term of `criterion` in `x` at `samples`:
/// numerically by central second differences and through the closed-form
/// second derivative.
pub fn convexity_check(net: &NetworkInstance, criterion: &Criterion, samples: &[f64]) -> ConvexityReport {
    let weights = criterion.weights();
    let kind = criterion.kind();
    let term = |i: usize, x: f64| {
        let scale = net.noise(i) / net.gain(i, i) * net.min_rate(i);
        let (f, _, _) = share_energy(x);
        match kind {
            CriterionKind::WeightedSum => weights[i] * scale * f,
            CriterionKind::ProportionalFairness => weights[i] * (scale * f).ln(),
        }
    };
    let analytic = |i: usize, x: f64| {
        let scale = net.noise(i) / net.gain(i, i) * net.min_rate(i);
        let (f, d1, d2) = share_energy(x);
        match kind {
            CriterionKind::WeightedSum => weights[i] * scale * d2,
            CriterionKind::ProportionalFairness => weights[i] * (d2 * f - d1 * d1) / (f * f),
        }
    };
    let mut report = ConvexityReport {
        kind,
        points: 0,
        min_second_difference: f64::INFINITY,
        min_analytic: f64::INFINITY,
        violations: 0,
    };
    for &x in samples {
        for i in 0..net.users() {
            let h = 1e-3 * x;
            let second = (term(i, x + h) - 2.0 * term(i, x) + term(i, x - h)) / (h * h);
            let exact = analytic(i, x);
            report.points += 1;
            report.min_second_difference = report.min_second_difference.min(second);
            report.min_analytic = report.min_analytic.min(exact);
            if !(second > 0.0 && exact > 0.0) {
                report.violations += 1;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ErrorDist, PowerGrid};

    fn sym(n: usize, cross: f64, rate: f64) -> NetworkInstance {
        NetworkInstance::symmetric(n, 1.0, cross, 0.05, PowerGrid::new(100.0, 512).unwrap(), rate, 0.9).unwrap()
    }

    #[test]
    fn tdma_profile_examples() {
        let net = sym(3, 0.1, 1.0);
        let p = tdma_profile(&net, 1, 1.0).unwrap();
        assert_eq!(p.as_slice()[0], 0.0);
        assert!((p.power(1) - 0.05).abs() < 1e-15);
        assert!((tdma_profile(&net, 0, 2.0).unwrap().power(0) - 0.15).abs() < 1e-15);
        assert_eq!(tdma_profile(&net, 0, 0.0).unwrap().transmitter_count(), 0);
        assert!(matches!(tdma_profile(&net, 0, 20.0), Err(Error::RateInfeasible { .. })));
    }

    #[test]
    fn inner_solve_examples() {
        let net = NetworkInstance::symmetric(1, 1.0, 0.0, 1.0, PowerGrid::new(1e6, 16).unwrap(), 1.0, 0.5).unwrap();
        let ws = Criterion::WeightedSum { weights: vec![1.0] };
        let cap = net.max_rate(0);
        let one = kkt_inner_solve(&net, &ws, 0, 2.0 * LN_2 - 1.0, cap).unwrap();
        assert!((one.rate - 1.0).abs() < 1e-12, "{one:?}");
        let two = kkt_inner_solve(&net, &ws, 0, 8.0 * LN_2 - 3.0, cap).unwrap();
        assert!((two.rate - 2.0).abs() < 1e-12, "{two:?}");
        assert_eq!(kkt_inner_solve(&net, &ws, 0, 0.0, cap).unwrap().rate, 0.0);
        let capped = kkt_inner_solve(&net, &ws, 0, 1e30, cap).unwrap();
        assert!(capped.capped);
        assert_eq!(capped.rate, cap);
    }

    #[test]
    fn kkt_slopes_match_finite_differences() {
        let net = sym(2, 0.1, 0.7);
        for c in [
            Criterion::WeightedSum { weights: vec![0.3, 2.0] },
            Criterion::ProportionalFairness { weights: vec![0.3, 2.0] },
        ] {
            for r in [0.05, 0.7, 3.0, 11.0] {
                let h = 1e-6 * r;
                let fd = (c.kkt_lhs(&net, 1, r + h) - c.kkt_lhs(&net, 1, r - h)) / (2.0 * h);
                let s = c.kkt_slope(&net, 1, r);
                assert!((fd - s).abs() <= 1e-6 * s.abs(), "{c:?} r={r}: {fd} vs {s}");
            }
        }
    }

    #[test]
    fn symmetric_pair_splits_evenly() {
        let net = sym(2, 0.5, 1.0);
        let sensing = SensingModel::uniform(&net, ErrorDist::Exact, 1.0).unwrap();
        let report = its_solve(&net, &sensing, &Criterion::equal_sum(2), 1e-9, Monitoring::Perfect).unwrap();
        let s = &report.solution;
        for i in 0..2 {
            assert!((s.rates[i] - 2.0).abs() < 1e-8, "{s:?}");
            assert!((s.powers[i] - 0.15).abs() < 1e-8);
        }
        assert!(s.loop_residual <= 1e-9);
        assert!(s.residual <= 4.0 * f64::EPSILON);
        assert_eq!(s.messages_broadcast, 2 * (s.iterations + 1));
        assert_eq!(report.constants.delta_min, 0.5);
    }

    #[test]
    fn single_user_rate_equals_target() {
        let net = sym(1, 0.0, 1.3);
        let s = its_solve_capped(&net, &Criterion::equal_sum(1), &[net.max_rate(0)], 1e-10).unwrap();
        assert!((s.rates[0] - 1.3).abs() < 1e-9);
    }

    #[test]
    fn infeasible_targets_hit_the_multiplier_cap() {
        let net = sym(2, 0.1, 1.0);
        let err = its_solve_capped(&net, &Criterion::equal_sum(2), &[1.5, 1.5], 1e-9).unwrap_err();
        assert!(err.is_infeasible(), "{err}");
    }

    #[test]
    fn binding_cap_gets_a_multiplier() {
        let net = NetworkInstance::new(
            0,
            vec![vec![1.0, 0.1], vec![0.1, 10.0]],
            vec![0.05; 2],
            vec![PowerGrid::new(100.0, 64).unwrap(); 2],
            vec![1.0, 1.0],
            0.9,
        )
        .unwrap();
        let s = its_solve_capped(&net, &Criterion::equal_sum(2), &[10.0, 2.2], 1e-10).unwrap();
        assert!(s.capped[1]);
        assert!(s.kkt_multipliers[1] > 0.0);
        assert_eq!(s.kkt_multipliers[0], 0.0);
        assert!((s.rates[1] - 2.2).abs() < 1e-8);
    }

    #[test]
    fn obedient_discount_bound() {
        for n in 2..=10 {
            let net = sym(n, 0.1, 1.0);
            let sensing = SensingModel::uniform(&net, ErrorDist::Exact, 1.0).unwrap();
            let c = FeasibilityConstants::obedient(&net, &sensing, &vec![n as f64; n]).unwrap();
            assert!((c.delta_min - (1.0 - 1.0 / n as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn certain_detection_keeps_bound_above_obedient() {
        // Any deviation lifts the interference far beyond the threshold.
        let n = 2;
        let net = NetworkInstance::new(
            0,
            vec![vec![1.0, 1e6], vec![1e6, 1.0]],
            vec![0.05; n],
            vec![PowerGrid::new(10.0, 64).unwrap(); n],
            vec![0.05; n],
            0.9,
        )
        .unwrap();
        let sensing = SensingModel::uniform(&net, ErrorDist::Uniform { half_width: 0.01 }, 1.0).unwrap();
        let c = feasibility_constants(&net, &sensing, &[0.1, 0.1]).unwrap();
        assert_eq!(c.rho_tdma, vec![0.0, 0.0]);
        assert!(c.is_feasible(), "{c:?}");
        assert!(c.b[0][1] < 0.0 && c.b[1][0] < 0.0);
        assert!(c.delta_min >= 0.5);
        assert!(c.delta_min < 0.52, "{}", c.delta_min);
    }

    #[test]
    fn convexity_at_known_points() {
        let net = sym(1, 0.0, 1.0);
        let r = convexity_check(&net, &Criterion::WeightedSum { weights: vec![1.0] }, &[1.0]);
        assert!((r.min_analytic - 0.05 * 2.0 * LN_2).abs() < 1e-12);
        let (_, _, d2) = share_energy(0.5);
        assert!((d2 - 22.18).abs() < 0.01);
        let pf = convexity_check(&net, &Criterion::ProportionalFairness { weights: vec![1.0] }, &[0.05, 1.0, 20.0]);
        assert!(pf.is_convex());
    }
}
