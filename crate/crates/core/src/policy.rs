//! Policies, simulated traces, discounted metrics and unilateral-deviation checks.

use std::f64::consts::LN_2;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{system_distress, NetworkInstance, PowerProfile, SensingModel};
use crate::rng::UserStreams;

/// A joint strategy: maps the slot index and the history of system distress
/// signals to a power profile.
pub trait Policy {
    /// Whether at most one user transmits in any slot.
    fn is_tdma(&self) -> bool;

    /// Profile for slot `t`; `history` holds the signals of slots `0..t`.
    fn profile(&mut self, t: usize, history: &[bool]) -> Result<PowerProfile>;
}

/// Nobody ever transmits.
#[derive(Debug, Clone)]
pub struct SilentPolicy {
    pub users: usize,
}

impl Policy for SilentPolicy {
    fn is_tdma(&self) -> bool {
        true
    }

    fn profile(&mut self, _t: usize, _history: &[bool]) -> Result<PowerProfile> {
        Ok(PowerProfile::silent(self.users))
    }
}

/// The same profile in every slot.
#[derive(Debug, Clone)]
pub struct FixedPolicy {
    pub profile: PowerProfile,
}

impl Policy for FixedPolicy {
    fn is_tdma(&self) -> bool {
        self.profile.transmitter_count() <= 1
    }

    fn profile(&mut self, _t: usize, _history: &[bool]) -> Result<PowerProfile> {
        Ok(self.profile.clone())
    }
}

/// What happened in each simulated slot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrace {
    pub profiles: Vec<PowerProfile>,
    pub signals: Vec<bool>,
    pub rates: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct SlotRecord<'a> {
    t: usize,
    p: &'a [f64],
    y: u8,
    r: &'a [f64],
}

impl PolicyTrace {
    pub fn horizon(&self) -> usize {
        self.signals.len()
    }

    /// The unique transmitter of slot `t`, if exactly one user transmits.
    pub fn transmitter(&self, t: usize) -> Option<usize> {
        let mut it = self.profiles[t].transmitters();
        match (it.next(), it.next()) {
            (Some(i), None) => Some(i),
            _ => None,
        }
    }

    /// One JSON object per slot: `{t, p, y, r}`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for t in 0..self.horizon() {
            let rec = SlotRecord {
                t,
                p: self.profiles[t].as_slice(),
                y: self.signals[t] as u8,
                r: &self.rates[t],
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Runs `policy` for `horizon` slots, sampling distress signals from `streams`.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &mut P,
    net: &NetworkInstance,
    sensing: &SensingModel,
    horizon: usize,
    streams: &mut UserStreams,
) -> Result<PolicyTrace> {
    evaluate_with(policy, net, horizon, |_, p| {
        system_distress(net, sensing, p, streams)
    })
}

/// Runs `policy` with signals supplied by `signal(t, profile)`.
pub fn evaluate_with<P, S>(
    policy: &mut P,
    net: &NetworkInstance,
    horizon: usize,
    mut signal: S,
) -> Result<PolicyTrace>
where
    P: Policy + ?Sized,
    S: FnMut(usize, &PowerProfile) -> Result<bool>,
{
    let mut trace = PolicyTrace {
        profiles: Vec::with_capacity(horizon),
        signals: Vec::with_capacity(horizon),
        rates: Vec::with_capacity(horizon),
    };
    let tdma = policy.is_tdma();
    for t in 0..horizon {
        let p = policy.profile(t, &trace.signals)?;
        if p.len() != net.users() {
            return Err(Error::InvalidInstance(format!(
                "policy produced {} powers for {} users",
                p.len(),
                net.users()
            )));
        }
        if let Some((user, power)) = net.profile_violation(&p) {
            return Err(Error::PowerOutOfSet { t, user, power });
        }
        let count = p.transmitter_count();
        if tdma && count > 1 {
            return Err(Error::NotTdma { t, count });
        }
        let y = signal(t, &p)?;
        trace.rates.push(net.rates(&p)?);
        trace.signals.push(y);
        trace.profiles.push(p);
    }
    Ok(trace)
}

/// Discounted average throughput and power of each user over a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountedMetrics {
    pub throughput: Vec<f64>,
    pub power: Vec<f64>,
    /// Largest contribution the slots after the horizon could still make.
    pub tail_residual: f64,
}

impl DiscountedMetrics {
    pub fn mean_power(&self) -> f64 {
        self.power.iter().sum::<f64>() / self.power.len() as f64
    }

    pub fn mean_throughput(&self) -> f64 {
        self.throughput.iter().sum::<f64>() / self.throughput.len() as f64
    }
}

/// `R_i = (1-d) sum_t d^t r_i(t)` and `P_i = (1-d) sum_t d^t p_i(t)` over the realized trace.
pub fn discounted_metrics(trace: &PolicyTrace, discount: f64) -> Result<DiscountedMetrics> {
    if trace.horizon() == 0 {
        return Err(Error::InvalidInstance("empty trace".into()));
    }
    let n = trace.profiles[0].len();
    let mut throughput = vec![0.0; n];
    let mut power = vec![0.0; n];
    let mut weight = 1.0 - discount;
    let mut scale: f64 = 0.0;
    for t in 0..trace.horizon() {
        for i in 0..n {
            let r = trace.rates[t][i];
            let p = trace.profiles[t].power(i);
            throughput[i] += weight * r;
            power[i] += weight * p;
            scale = scale.max(r).max(p);
        }
        weight *= discount;
    }
    Ok(DiscountedMetrics {
        throughput,
        power,
        tail_residual: discount.powi(trace.horizon() as i32) * scale,
    })
}

/// Watts of discounted power per bit/s/Hz of discounted throughput for a TDMA
/// user that always transmits at instantaneous rate `rate`.
pub fn throughput_energy_ratio(net: &NetworkInstance, i: usize, rate: f64) -> Result<f64> {
    net.check_index(i)?;
    if !(rate > 0.0) {
        return Err(Error::NonPositiveRate(rate));
    }
    Ok(net.noise(i) / net.gain(i, i) * (rate * LN_2).exp_m1() / rate)
}

/// Whether user `j` gains by also transmitting, at power `p_j`, in a slot
/// where user `i` transmits at `p_i`: true iff `p_j g_jj > p_i g_ij`.
pub fn deviation_profitable(net: &NetworkInstance, i: usize, p_i: f64, j: usize, p_j: f64) -> bool {
    p_j * net.gain(j, j) > p_i * net.gain(i, j)
}

/// A scheduled user and a user who profits from transmitting in its slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfitableDeviation {
    pub slot_owner: usize,
    pub deviator: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub profitable: Vec<ProfitableDeviation>,
}

impl DeviationReport {
    pub fn is_deviation_proof(&self) -> bool {
        self.profitable.is_empty()
    }
}

/// Applies the pairwise deviation test to every slot of a TDMA schedule, using
/// each user's scheduled power as its deviation power.
pub fn certify_deviation_proof(net: &NetworkInstance, schedule: &[PowerProfile]) -> Result<DeviationReport> {
    let n = net.users();
    let mut power: Vec<Option<f64>> = vec![None; n];
    for (t, p) in schedule.iter().enumerate() {
        let count = p.transmitter_count();
        if count > 1 {
            return Err(Error::NotTdma { t, count });
        }
        for i in p.transmitters() {
            power[i].get_or_insert(p.power(i));
        }
    }
    let mut report = DeviationReport::default();
    for (t, p) in schedule.iter().enumerate() {
        let Some(i) = p.transmitters().next() else { continue };
        for (j, pj) in power.iter().enumerate() {
            let Some(pj) = *pj else { continue };
            if j == i {
                continue;
            }
            let pair = ProfitableDeviation {
                slot_owner: i,
                deviator: j,
            };
            if deviation_profitable(net, i, schedule[t].power(i), j, pj) && !report.profitable.contains(&pair) {
                report.profitable.push(pair);
            }
        }
    }
    Ok(report)
}

/// Deviator's discounted throughput and energy with and without a deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationOutcome {
    pub baseline_throughput: f64,
    pub baseline_energy: f64,
    pub deviated_throughput: f64,
    pub deviated_energy: f64,
}

impl DeviationOutcome {
    pub fn energy_saved(&self) -> f64 {
        self.baseline_energy - self.deviated_energy
    }
}

/// Two-slot deviation by user `j`.
///
/// Slot 0 belongs to user `i` (power `p_i`), slot `gap` to user `j` (power
/// `p_j`). The deviator also transmits at power `q` in slot 0 and lowers its
/// power in its own slot just enough to keep its discounted throughput.
pub fn two_slot_deviation(
    net: &NetworkInstance,
    i: usize,
    p_i: f64,
    j: usize,
    p_j: f64,
    gap: usize,
    q: f64,
) -> Result<DeviationOutcome> {
    net.check_index(i)?;
    net.check_index(j)?;
    if i == j || gap == 0 {
        return Err(Error::InvalidInstance("deviation needs two users and two slots".into()));
    }
    let n = net.users();
    let d = net.discount();
    let later = d.powi(gap as i32);
    let own_rate = net.solo_rate(j, p_j);

    let mut shared = PowerProfile::solo(n, i, p_i);
    shared.set(j, q);
    let stolen = net.throughput(&shared, j)?;
    let remaining = (own_rate - stolen / later).max(0.0);
    let own_power = net.solo_power(j, remaining);
    let kept = net.throughput(&PowerProfile::solo(n, j, own_power), j)?;

    Ok(DeviationOutcome {
        baseline_throughput: (1.0 - d) * later * own_rate,
        baseline_energy: (1.0 - d) * later * p_j,
        deviated_throughput: (1.0 - d) * (stolen + later * kept),
        deviated_energy: (1.0 - d) * (q + later * own_power),
    })
}

/// Effect of moving power between two transmissions of one user while keeping
/// its discounted throughput.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub eps2: f64,
    pub energy_change: f64,
    pub throughput_change: f64,
}

/// User `i` transmits alone at `p1` in slot `t1` and at `p2` in slot `t2`.
/// Raising the first power by `eps1` and lowering the second by the amount
/// `eps2` that keeps discounted throughput unchanged changes discounted energy
/// by `energy_change`. Returns `None` when the second power would go negative.
pub fn rate_preserving_perturbation(
    net: &NetworkInstance,
    i: usize,
    (t1, p1): (usize, f64),
    (t2, p2): (usize, f64),
    eps1: f64,
) -> Result<Option<Perturbation>> {
    net.check_index(i)?;
    let d = net.discount();
    let s = net.noise(i);
    let g = net.gain(i, i);
    let exponent = d.powi(t1 as i32 - t2 as i32);
    let ratio = (s + g * p1) / (s + g * (p1 + eps1));
    let eps2 = (s + g * p2) / g * -(exponent * ratio.ln()).exp_m1();
    if eps2 > p2 {
        return Ok(None);
    }
    let w1 = (1.0 - d) * d.powi(t1 as i32);
    let w2 = (1.0 - d) * d.powi(t2 as i32);
    let r = |p: f64| net.solo_rate(i, p);
    Ok(Some(Perturbation {
        eps2,
        energy_change: w1 * eps1 - w2 * eps2,
        throughput_change: w1 * (r(p1 + eps1) - r(p1)) + w2 * (r(p2 - eps2) - r(p2)),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ErrorDist, PowerGrid};

    fn net(cross: f64, discount: f64) -> NetworkInstance {
        NetworkInstance::symmetric(2, 1.0, cross, 0.05, PowerGrid::new(10.0, 512).unwrap(), 1.0, discount).unwrap()
    }

    struct Alternating {
        powers: [f64; 2],
    }

    impl Policy for Alternating {
        fn is_tdma(&self) -> bool {
            true
        }
        fn profile(&mut self, t: usize, _h: &[bool]) -> Result<PowerProfile> {
            Ok(PowerProfile::solo(2, t % 2, self.powers[t % 2]))
        }
    }

    #[test]
    fn silent_policy_gives_zero_trace() {
        let net = net(0.1, 0.9);
        let sensing = SensingModel::uniform(&net, ErrorDist::Gaussian { variance: 0.1 }, 1.0).unwrap();
        let trace = evaluate(&mut SilentPolicy { users: 2 }, &net, &sensing, 50, &mut UserStreams::new(1, &[])).unwrap();
        assert_eq!(trace.horizon(), 50);
        assert!(trace.rates.iter().flatten().all(|&r| r == 0.0));
        assert!(trace.signals.iter().all(|&y| !y));
        let m = discounted_metrics(&trace, 0.9).unwrap();
        assert_eq!(m.power, vec![0.0, 0.0]);
    }

    #[test]
    fn alternating_schedule_series() {
        let net = net(0.1, 0.9);
        let sensing = SensingModel::uniform(&net, ErrorDist::Exact, 1.0).unwrap();
        let p = net.solo_power(0, 2.0);
        let mut policy = Alternating { powers: [p, p] };
        let trace = evaluate(&mut policy, &net, &sensing, 400, &mut UserStreams::new(1, &[])).unwrap();
        let m = discounted_metrics(&trace, 0.9).unwrap();
        assert!((m.throughput[0] - 2.0 / 1.9).abs() < 1e-12);
        assert!((m.throughput[0] - 1.0526).abs() < 1e-4);
        assert!((m.throughput[1] - 2.0 * 0.9 / 1.9).abs() < 1e-12);
        for i in 0..2 {
            let ratio = throughput_energy_ratio(&net, i, 2.0).unwrap();
            assert!((m.power[i] - ratio * m.throughput[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_power_truncated_series() {
        let net = net(0.1, 0.95);
        let sensing = SensingModel::uniform(&net, ErrorDist::Exact, 1.0).unwrap();
        let mut policy = FixedPolicy {
            profile: PowerProfile::new(vec![0.1, 0.0]),
        };
        let trace = evaluate(&mut policy, &net, &sensing, 30, &mut UserStreams::new(1, &[])).unwrap();
        let m = discounted_metrics(&trace, 0.95).unwrap();
        assert!((m.power[0] - 0.1 * (1.0 - 0.95f64.powi(30))).abs() < 1e-15);
    }

    #[test]
    fn out_of_set_power_aborts() {
        let net = net(0.1, 0.9);
        let mut policy = FixedPolicy {
            profile: PowerProfile::new(vec![11.0, 0.0]),
        };
        let err = evaluate_with(&mut policy, &net, 5, |_, _| Ok(false)).unwrap_err();
        assert!(matches!(err, Error::PowerOutOfSet { t: 0, user: 0, .. }));
    }

    #[test]
    fn ratio_examples() {
        let net = net(0.1, 0.9);
        assert!((throughput_energy_ratio(&net, 0, 1.0).unwrap() - 0.05).abs() < 1e-15);
        assert!((throughput_energy_ratio(&net, 0, 2.0).unwrap() - 0.075).abs() < 1e-15);
        let small = throughput_energy_ratio(&net, 0, 1e-9).unwrap();
        assert!((small - 0.05 * LN_2).abs() < 1e-9);
        assert!(throughput_energy_ratio(&net, 0, 0.0).is_err());
    }

    #[test]
    fn deviation_examples() {
        let net = net(1.0, 0.9);
        assert!(deviation_profitable(&net, 0, 1.0, 1, 2.0));
        assert!(!deviation_profitable(&net, 0, 1.0, 1, 1.0));
        let strong = NetworkInstance::new(
            0,
            vec![vec![1.0, 1e12], vec![0.5, 1.0]],
            vec![0.05; 2],
            vec![PowerGrid::new(10.0, 16).unwrap(); 2],
            vec![1.0; 2],
            0.9,
        )
        .unwrap();
        assert!(!deviation_profitable(&strong, 0, 1.0, 1, 5.0));
    }

    #[test]
    fn certification_examples() {
        let weak = net(0.1, 0.9);
        let schedule = vec![PowerProfile::solo(2, 0, 0.15), PowerProfile::solo(2, 1, 0.15)];
        let report = certify_deviation_proof(&weak, &schedule).unwrap();
        assert_eq!(report.profitable.len(), 2);

        let strong = net(1.0, 0.9);
        assert!(certify_deviation_proof(&strong, &schedule).unwrap().is_deviation_proof());

        let single = NetworkInstance::symmetric(1, 1.0, 0.0, 0.05, PowerGrid::new(1.0, 8).unwrap(), 1.0, 0.5).unwrap();
        let report = certify_deviation_proof(&single, &[PowerProfile::solo(1, 0, 0.05)]).unwrap();
        assert!(report.is_deviation_proof());

        let concurrent = vec![PowerProfile::new(vec![0.1, 0.1])];
        assert!(certify_deviation_proof(&weak, &concurrent).is_err());
    }

    #[test]
    fn perturbation_preserves_throughput() {
        let net = net(0.1, 0.9);
        let p = net.solo_power(0, 2.0);
        let out = rate_preserving_perturbation(&net, 0, (0, p), (3, p), 0.01).unwrap().unwrap();
        assert!(out.throughput_change.abs() < 1e-14);
        assert!(out.energy_change > 0.0);
        assert!(rate_preserving_perturbation(&net, 0, (0, p), (3, p), 100.0).unwrap().is_none());
    }
}
