//! Reference policies: constant-power sharing, round-robin TDMA and
//! punish-forgive, plus the closed forms for the symmetric two-user case.

use std::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::its::{FeasibilityConstants, ItsSolution};
use crate::ldf::{DistanceForm, LdfScheduler, ScheduleDecision};
use crate::model::{NetworkInstance, PowerProfile};
use crate::policy::{discounted_metrics, evaluate_with, DiscountedMetrics, Policy};

/// Constant powers that meet every throughput floor simultaneously.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarySolution {
    pub powers: Vec<f64>,
    pub feasible: bool,
    /// Why the solution is infeasible, if it is.
    pub reason: Option<String>,
}

impl StationarySolution {
    fn infeasible(n: usize, reason: String) -> Self {
        StationarySolution {
            powers: vec![f64::NAN; n],
            feasible: false,
            reason: Some(reason),
        }
    }

    pub fn profile(&self) -> PowerProfile {
        PowerProfile::new(self.powers.clone())
    }

    pub fn require_feasible(&self) -> Result<()> {
        if self.feasible {
            Ok(())
        } else {
            Err(Error::Infeasible(format!(
                "no constant power profile meets the floors: {}",
                self.reason.as_deref().unwrap_or("unknown")
            )))
        }
    }
}

/// Minimal constant powers with every user exactly at its floor.
///
/// The floors hold with equality when `p = F p + c`, with
/// `F_ij = (2^{R_i} - 1) g_ji / g_ii` and `c_i = (2^{R_i} - 1) sigma_i^2 / g_ii`.
/// Because `F >= 0` and `c > 0`, a strictly positive solution exists exactly
/// when the spectral radius of `F` is below one, and it is then the least
/// fixed point of the best-response iteration. The system is solved directly;
/// the solution must also fit under every grid maximum.
pub fn stationary_solve(net: &NetworkInstance) -> StationarySolution {
    let n = net.users();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut c = DVector::<f64>::zeros(n);
    for i in 0..n {
        let excess = (net.min_rate(i) * LN_2).exp_m1();
        let gii = net.gain(i, i);
        a[(i, i)] = 1.0;
        for j in (0..n).filter(|&j| j != i) {
            a[(i, j)] = -excess * net.gain(j, i) / gii;
        }
        c[i] = excess * net.noise(i) / gii;
    }
    let coupling = || {
        let f = DMatrix::<f64>::identity(n, n) - &a;
        let radius = f.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        format!("interference coupling has spectral radius {radius:.6}, not below 1")
    };
    let Some(p) = a.clone().lu().solve(&c) else {
        return StationarySolution::infeasible(n, coupling());
    };
    let powers: Vec<f64> = p.iter().copied().collect();
    for (i, &pi) in powers.iter().enumerate() {
        let needs = net.min_rate(i) > 0.0;
        if !pi.is_finite() || pi < 0.0 || (needs && pi <= 0.0) {
            return StationarySolution::infeasible(n, coupling());
        }
        if !net.grid(i).contains(pi) {
            return StationarySolution::infeasible(
                n,
                format!("user {i} would need {pi} W, above its maximum {} W", net.grid(i).max),
            );
        }
    }
    StationarySolution {
        powers,
        feasible: true,
        reason: None,
    }
}

/// Synchronous best response from zero power: `p_i <- (2^{R_i} - 1) I_i(p) / g_ii`.
///
/// Declares infeasibility when a power leaves the grid or the iteration does
/// not settle within `max_iter` rounds.
pub fn stationary_iterate(net: &NetworkInstance, max_iter: usize, tol: f64) -> StationarySolution {
    let n = net.users();
    let mut p = PowerProfile::silent(n);
    for _ in 0..max_iter {
        let mut next = PowerProfile::silent(n);
        let mut change: f64 = 0.0;
        for i in 0..n {
            let excess = (net.min_rate(i) * LN_2).exp_m1();
            let interference = net.interference_temperature(&p, i).expect("valid index");
            let v = excess * interference / net.gain(i, i);
            if !net.grid(i).contains(v) {
                return StationarySolution::infeasible(n, format!("user {i} exceeded its maximum power"));
            }
            change = change.max((v - p.power(i)).abs() / v.max(f64::MIN_POSITIVE));
            next.set(i, v);
        }
        p = next;
        if change <= tol {
            return StationarySolution {
                powers: p.into_vec(),
                feasible: true,
                reason: None,
            };
        }
    }
    StationarySolution::infeasible(n, format!("no convergence in {max_iter} rounds"))
}

/// Constant power of each of two symmetric users with unit direct gain and
/// cross gain `alpha`; `None` when `alpha >= 1/(2^r - 1)`.
pub fn symmetric_stationary_power(noise: f64, rate: f64, alpha: f64) -> Option<f64> {
    let excess = (rate * LN_2).exp_m1();
    let denom = 1.0 - excess * alpha;
    (denom > 0.0).then(|| excess * noise / denom)
}

/// Discounted powers `(P_1, P_2)` of the alternating two-user schedule with
/// user 1 in even slots, each user meeting throughput `rate`; `noise_over_gain`
/// is `sigma^2 / g`.
pub fn round_robin_closed_form(noise_over_gain: f64, rate: f64, discount: f64) -> (f64, f64) {
    let d = discount;
    let first = noise_over_gain / (1.0 + d) * (rate * (1.0 + d) * LN_2).exp_m1();
    let second = noise_over_gain * d / (1.0 + d) * (rate * (1.0 + 1.0 / d) * LN_2).exp_m1();
    (first, second)
}

/// Cross gain at which the symmetric constant-power total `2 p(alpha)` equals
/// the round-robin total.
pub fn round_robin_crossover(noise: f64, rate: f64, discount: f64) -> f64 {
    let (p1, p2) = round_robin_closed_form(noise, rate, discount);
    let excess = (rate * LN_2).exp_m1();
    (1.0 - 2.0 * excess * noise / (p1 + p2)) / excess
}

/// Users transmit in a fixed cyclic order, each alone, at powers that give
/// every user exactly its floor.
#[derive(Debug, Clone)]
pub struct RoundRobinPolicy {
    order: Vec<usize>,
    powers: Vec<f64>,
}

impl RoundRobinPolicy {
    pub fn new(net: &NetworkInstance, order: &[usize], discount: f64) -> Result<Self> {
        let n = net.users();
        if order.is_empty() {
            return Err(Error::Config("round-robin order is empty".into()));
        }
        let cycle = order.len() as i32;
        let mut share = vec![0.0; n];
        for (k, &u) in order.iter().enumerate() {
            net.check_index(u)?;
            share[u] += (1.0 - discount) * discount.powi(k as i32) / (1.0 - discount.powi(cycle));
        }
        let mut powers = vec![0.0; n];
        for i in 0..n {
            if net.min_rate(i) == 0.0 {
                continue;
            }
            if share[i] == 0.0 {
                return Err(Error::Infeasible(format!("user {i} never transmits in the cycle")));
            }
            let rate = net.min_rate(i) / share[i];
            powers[i] = net.solo_power(i, rate);
            if !net.grid(i).contains(powers[i]) {
                return Err(Error::RateInfeasible {
                    user: i,
                    rate,
                    power: powers[i],
                    max: net.grid(i).max,
                });
            }
        }
        Ok(RoundRobinPolicy {
            order: order.to_vec(),
            powers,
        })
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }
}

impl Policy for RoundRobinPolicy {
    fn is_tdma(&self) -> bool {
        true
    }

    fn profile(&mut self, t: usize, _history: &[bool]) -> Result<PowerProfile> {
        let u = self.order[t % self.order.len()];
        Ok(PowerProfile::solo(self.powers.len(), u, self.powers[u]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRobinReport {
    pub powers: Vec<f64>,
    /// Closed-form `(P_1, P_2)` for the two-user alternating schedule.
    pub closed_form: Option<(f64, f64)>,
    pub simulated: DiscountedMetrics,
}

/// Discounted metrics of round-robin with the given order, simulated for
/// `horizon` slots, plus the closed form when it applies.
pub fn round_robin_metrics(net: &NetworkInstance, order: &[usize], discount: f64, horizon: usize) -> Result<RoundRobinReport> {
    let mut policy = RoundRobinPolicy::new(net, order, discount)?;
    let trace = evaluate_with(&mut policy, net, horizon, |_, _| Ok(false))?;
    let simulated = discounted_metrics(&trace, discount)?;
    let closed_form = (net.users() == 2 && order == [0, 1] && net.min_rate(0) == net.min_rate(1))
        .then(|| {
            let (a, _) = round_robin_closed_form(net.noise(0) / net.gain(0, 0), net.min_rate(0), discount);
            let (_, b) = round_robin_closed_form(net.noise(1) / net.gain(1, 1), net.min_rate(1), discount);
            (a, b)
        });
    Ok(RoundRobinReport {
        powers: policy.powers,
        closed_form,
        simulated,
    })
}

/// Punish-forgive: cooperate with the scheduler until a distress signal is
/// observed after a cooperative slot, then everybody transmits at the
/// constant powers for `duration` slots, then cooperation resumes.
///
/// Punishment slots deliver each user exactly its floor; the scheduler is
/// told about them so that the promised continuation shares stay consistent.
#[derive(Debug, Clone)]
pub struct PunishForgivePolicy {
    scheduler: LdfScheduler,
    stationary: PowerProfile,
    stationary_rates: Vec<f64>,
    duration: usize,
    remaining: usize,
    last: Option<Slot>,
    punished_slots: usize,
}

#[derive(Debug, Clone)]
enum Slot {
    Cooperative(ScheduleDecision),
    Punishment,
}

impl PunishForgivePolicy {
    pub fn new(
        net: &NetworkInstance,
        solution: &ItsSolution,
        constants: &FeasibilityConstants,
        stationary: &StationarySolution,
        duration: usize,
        form: DistanceForm,
    ) -> Result<Self> {
        if !stationary.feasible {
            return Err(Error::Infeasible(format!(
                "punishment undefined: {}",
                stationary.reason.as_deref().unwrap_or("no feasible constant powers")
            )));
        }
        let profile = stationary.profile();
        Ok(PunishForgivePolicy {
            scheduler: LdfScheduler::new(solution, constants, net.discount(), form)?,
            stationary_rates: net.rates(&profile)?,
            stationary: profile,
            duration,
            remaining: 0,
            last: None,
            punished_slots: 0,
        })
    }

    pub fn punished_slots(&self) -> usize {
        self.punished_slots
    }

    pub fn scheduler(&self) -> &LdfScheduler {
        &self.scheduler
    }
}

impl Policy for PunishForgivePolicy {
    fn is_tdma(&self) -> bool {
        false
    }

    fn profile(&mut self, t: usize, history: &[bool]) -> Result<PowerProfile> {
        match self.last.take() {
            Some(Slot::Cooperative(decision)) => {
                let y = history[t - 1];
                self.scheduler.advance(&decision, y)?;
                if y {
                    self.remaining = self.duration;
                }
            }
            Some(Slot::Punishment) => self.scheduler.absorb_slot(&self.stationary_rates)?,
            None => {}
        }
        if self.remaining > 0 {
            self.remaining -= 1;
            self.punished_slots += 1;
            self.last = Some(Slot::Punishment);
            return Ok(self.stationary.clone());
        }
        let n = self.stationary.len();
        let decision = self.scheduler.decide();
        let profile = match decision.transmitter {
            Some(i) => PowerProfile::solo(n, i, decision.power),
            None => PowerProfile::silent(n),
        };
        self.last = Some(Slot::Cooperative(decision));
        Ok(profile)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PowerGrid;

    fn sym(alpha: f64, rate: f64) -> NetworkInstance {
        NetworkInstance::symmetric(2, 1.0, alpha, 0.05, PowerGrid::new(1e3, 64).unwrap(), rate, 0.9).unwrap()
    }

    #[test]
    fn symmetric_closed_form() {
        assert!((symmetric_stationary_power(0.05, 1.0, 0.5).unwrap() - 0.1).abs() < 1e-15);
        assert!(symmetric_stationary_power(0.05, 1.0, 1.0).is_none());
        let s = stationary_solve(&sym(0.5, 1.0));
        assert!(s.feasible);
        for p in &s.powers {
            assert!((p - 0.1).abs() < 1e-12);
        }
        assert!(!stationary_solve(&sym(1.0, 1.0)).feasible);
        assert!(!stationary_solve(&sym(1.5, 1.0)).feasible);
        assert!(stationary_solve(&sym(0.999, 1.0)).feasible);
    }

    #[test]
    fn single_user_needs_no_interference_margin() {
        let net = NetworkInstance::symmetric(1, 2.0, 0.0, 0.05, PowerGrid::new(10.0, 8).unwrap(), 1.5, 0.9).unwrap();
        let s = stationary_solve(&net);
        let expected = (2f64.powf(1.5) - 1.0) * 0.05 / 2.0;
        assert!((s.powers[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn iteration_agrees_with_direct_solve() {
        let net = sym(0.7, 1.0);
        let a = stationary_solve(&net);
        let b = stationary_iterate(&net, 100_000, 1e-14);
        for (x, y) in a.powers.iter().zip(&b.powers) {
            assert!((x - y).abs() < 1e-10 * x);
        }
        assert!(!stationary_iterate(&sym(1.2, 1.0), 100_000, 1e-14).feasible);
    }

    #[test]
    fn round_robin_values() {
        let (p1, p2) = round_robin_closed_form(0.05, 1.0, 0.9);
        assert!((p1 - 0.07190).abs() < 5e-6, "{p1}");
        assert!((p2 - 0.07864).abs() < 5e-6, "{p2}");
        let alpha = round_robin_crossover(0.05, 1.0, 0.9);
        assert!((0.33..=0.34).contains(&alpha), "{alpha}");
    }

    #[test]
    fn round_robin_simulation_matches_closed_form() {
        let net = sym(0.3, 1.0);
        let report = round_robin_metrics(&net, &[0, 1], 0.9, 400).unwrap();
        let (p1, p2) = report.closed_form.unwrap();
        let tail = 0.9f64.powi(400) * report.powers[1];
        assert!((report.simulated.power[0] - p1).abs() <= tail + 1e-15);
        assert!((report.simulated.power[1] - p2).abs() <= tail + 1e-15);
    }
}
