//! Exhaustive search over short TDMA schedule prefixes.
//!
//! A TDMA schedule gives user `i` a discounted slot mass
//! `a_i = (1 - delta) sum_{t in S_i} delta^t`. With the mass fixed, the cheapest
//! way to meet `R_i` is a constant rate `R_i / a_i` in every owned slot, so the
//! discounted energy is `F_i(a_i) = (sigma_i^2 / g_ii) a_i (2^{R_i / a_i} - 1)`.
//! A prefix fixes a lower bound on each mass and the tail after it is a scaled
//! copy of the whole problem. When `delta >= 1 - 1/n` every mass vector of the
//! tail is realizable, so the best completion of a prefix is the convex
//! water-filling over masses bounded below by the prefix masses.

use std::f64::consts::LN_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NetworkInstance;

pub const MAX_HORIZON: usize = 12;
pub const MAX_USERS: usize = 3;
const SHARE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Lexicographically least optimal prefix, users numbered from 1.
    pub best: String,
    /// Discounted total energy of any optimal schedule.
    pub energy: f64,
    /// Every optimal prefix in lexicographic order.
    pub optimal: Vec<String>,
    pub evaluated: usize,
    /// Energy-minimizing slot masses.
    pub shares: Vec<f64>,
    /// Whether every mass vector is realizable by a TDMA schedule, so the
    /// water-filling bound is attained.
    pub relaxation_exact: bool,
}

impl OracleResult {
    /// Whether some relabeling of the users turns `prefix` into an optimal one.
    pub fn contains_up_to_relabeling(&self, prefix: &str) -> bool {
        let Ok(p) = parse_prefix(prefix) else {
            return false;
        };
        let n = self.shares.len();
        permutations(n).into_iter().any(|perm| {
            p.iter().all(|&u| u < n) && {
                let relabeled: Vec<usize> = p.iter().map(|&u| perm[u]).collect();
                self.optimal.binary_search(&format_prefix(&relabeled)).is_ok()
            }
        })
    }

    /// Number of optimal prefixes that remain distinct after relabeling users.
    pub fn classes(&self) -> usize {
        let mut seen: Vec<String> = self.optimal.iter().map(|s| canonical(s)).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// Optimal prefix classes beyond the first; zero when the optimum is unique.
    pub fn ambiguity(&self) -> usize {
        self.classes().saturating_sub(1)
    }
}

/// Relabels users in order of first appearance.
fn canonical(prefix: &str) -> String {
    let mut map: Vec<(char, char)> = Vec::new();
    prefix
        .chars()
        .map(|c| match map.iter().find(|(from, _)| *from == c) {
            Some(&(_, to)) => to,
            None => {
                let to = char::from_digit(map.len() as u32 + 1, 10).unwrap_or('?');
                map.push((c, to));
                to
            }
        })
        .collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

/// Renders zero-based users as the digits `1..=9`.
pub fn format_prefix(users: &[usize]) -> String {
    users.iter().map(|&u| char::from_digit(u as u32 + 1, 10).unwrap_or('?')).collect()
}

pub fn parse_prefix(s: &str) -> Result<Vec<usize>> {
    s.chars()
        .map(|c| match c.to_digit(10) {
            Some(d) if d >= 1 => Ok(d as usize - 1),
            _ => Err(Error::Config(format!("bad schedule character {c:?}"))),
        })
        .collect()
}

fn cost_scale(net: &NetworkInstance, i: usize) -> f64 {
    net.noise(i) / net.gain(i, i)
}

/// Discounted energy of user `i` owning slot mass `a`.
pub fn share_energy(net: &NetworkInstance, i: usize, a: f64) -> f64 {
    let r = net.min_rate(i);
    if r == 0.0 {
        return 0.0;
    }
    if a <= 0.0 {
        return f64::INFINITY;
    }
    cost_scale(net, i) * a * (r / a * LN_2).exp_m1()
}

/// Mass at which the marginal saving `-F_i'(a)` equals `nu`.
fn share_at_price(net: &NetworkInstance, i: usize, nu: f64) -> f64 {
    let r = net.min_rate(i);
    if r == 0.0 {
        return 0.0;
    }
    // -F'(a) = c (x e^x - expm1 x) with x = r ln2 / a, increasing in x.
    let c = cost_scale(net, i);
    let h = |x: f64| c * (x * x.exp() - x.exp_m1());
    let (mut lo, mut hi) = (0.0, 1.0);
    while h(hi) < nu {
        hi *= 2.0;
        if hi > 700.0 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) < nu {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    r * LN_2 / (0.5 * (lo + hi))
}

/// Energy-minimizing masses with `a_i >= lower_i` and `sum a_i = 1`.
pub fn water_fill(net: &NetworkInstance, lower: &[f64]) -> Vec<f64> {
    let n = net.users();
    let fill = |nu: f64| -> Vec<f64> { (0..n).map(|i| share_at_price(net, i, nu).max(lower[i])).collect() };
    let total = |a: &[f64]| a.iter().sum::<f64>();
    if total(&fill(f64::MAX)) >= 1.0 || (0..n).all(|i| net.min_rate(i) == 0.0) {
        let mut a = lower.to_vec();
        let slack = 1.0 - total(&a);
        if slack > 0.0 {
            a[0] += slack;
        }
        return a;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while total(&fill(hi)) > 1.0 {
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if total(&fill(mid)) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    fill(0.5 * (lo + hi))
}

/// Slot masses of a prefix, scaled so the whole schedule has mass one.
pub fn prefix_shares(users: usize, prefix: &[usize], discount: f64) -> Vec<f64> {
    let mut shares = vec![0.0; users];
    let mut weight = 1.0 - discount;
    for &u in prefix {
        shares[u] += weight;
        weight *= discount;
    }
    shares
}

/// Least total energy of any schedule starting with `prefix`.
pub fn prefix_energy(net: &NetworkInstance, prefix: &[usize]) -> f64 {
    let lower = prefix_shares(net.users(), prefix, net.discount());
    let a = water_fill(net, &lower);
    (0..net.users()).map(|i| share_energy(net, i, a[i])).sum()
}

/// Enumerates every TDMA prefix of length `horizon` and keeps those that
/// extend to an energy-minimizing schedule.
pub fn optimal_schedule_oracle(net: &NetworkInstance, horizon: usize) -> Result<OracleResult> {
    let n = net.users();
    if horizon > MAX_HORIZON {
        return Err(Error::TooLarge(format!("horizon {horizon} exceeds {MAX_HORIZON}")));
    }
    if n > MAX_USERS {
        return Err(Error::TooLarge(format!("{n} users exceed {MAX_USERS}")));
    }
    let delta = net.discount();
    let shares = water_fill(net, &vec![0.0; n]);
    for (i, &a) in shares.iter().enumerate() {
        if net.min_rate(i) > 0.0 {
            let rate = net.min_rate(i) / a;
            let power = net.solo_power(i, rate);
            if !net.grid(i).contains(power) {
                return Err(Error::RateInfeasible {
                    user: i,
                    rate,
                    power,
                    max: net.grid(i).max,
                });
            }
        }
    }
    let energy = (0..n).map(|i| share_energy(net, i, shares[i])).sum();
    let count = n.pow(horizon as u32);
    let decode = |mut k: usize| -> Vec<usize> {
        let mut p = vec![0; horizon];
        for slot in (0..horizon).rev() {
            p[slot] = k % n;
            k /= n;
        }
        p
    };
    let optimal: Vec<String> = (0..count)
        .into_par_iter()
        .filter_map(|k| {
            let p = decode(k);
            let lower = prefix_shares(n, &p, delta);
            lower
                .iter()
                .zip(&shares)
                .all(|(l, a)| *l <= a + SHARE_TOL)
                .then(|| format_prefix(&p))
        })
        .collect();
    let best = optimal.first().cloned().unwrap_or_default();
    Ok(OracleResult {
        best,
        energy,
        optimal,
        evaluated: count,
        shares,
        relaxation_exact: n <= 1 || delta >= 1.0 - 1.0 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PowerGrid;

    fn sym(delta: f64) -> NetworkInstance {
        NetworkInstance::symmetric(2, 1.0, 0.5, 0.05, PowerGrid::new(1e3, 64).unwrap(), 1.0, delta).unwrap()
    }

    #[test]
    fn symmetric_horizon_ten() {
        let res = optimal_schedule_oracle(&sym(0.9), 10).unwrap();
        assert!(res.contains_up_to_relabeling("1221122112"));
        assert!(res.contains_up_to_relabeling("2112211221"));
        assert_eq!(res.best, "1111112222");
        assert!(res.relaxation_exact);
        assert!((res.shares[0] - 0.5).abs() < 1e-12);
        let expected = 2.0 * 0.05 * 0.5 * 3.0;
        assert!((res.energy - expected).abs() < 1e-12);
        assert!(!res.contains_up_to_relabeling("1111111111"));
        assert_eq!(res.optimal.len(), 914);
        assert_eq!(res.classes(), 457);
    }

    #[test]
    fn suboptimal_prefixes_cost_more() {
        let net = sym(0.9);
        let res = optimal_schedule_oracle(&net, 6).unwrap();
        for k in 0..64usize {
            let p: Vec<usize> = (0..6).map(|b| (k >> (5 - b)) & 1).collect();
            let e = prefix_energy(&net, &p);
            if res.optimal.binary_search(&format_prefix(&p)).is_ok() {
                assert!((e - res.energy).abs() < 1e-9, "{p:?}");
            } else {
                assert!(e > res.energy + 1e-9, "{p:?}");
            }
        }
    }

    #[test]
    fn single_user_and_half_discount() {
        let one = NetworkInstance::symmetric(1, 1.0, 0.0, 0.05, PowerGrid::new(1.0, 8).unwrap(), 1.0, 0.9).unwrap();
        assert_eq!(optimal_schedule_oracle(&one, 5).unwrap().optimal, vec!["11111"]);
        let res = optimal_schedule_oracle(&sym(0.5), 5).unwrap();
        assert_eq!(res.optimal, vec!["12222", "21111"]);
    }

    #[test]
    fn refuses_large_searches() {
        assert!(optimal_schedule_oracle(&sym(0.9), 13).is_err());
    }
}
