//! The static world: users, channel gains, power sets, SINR throughput and
//! interference-temperature sensing with binary distress signals.

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::quad::adaptive_simpson;
use crate::rng::UserStreams;

/// Absolute tolerance used by the quantizer integrals.
pub const QUADRATURE_TOL: f64 = 1e-10;

/// Width, in standard deviations, of the integration window for Gaussian errors.
const GAUSSIAN_WINDOW: f64 = 12.0;

/// A uniform ascending grid of transmit powers `{0, max/(points-1), ..., max}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerGrid {
    pub max: f64,
    pub points: usize,
}

impl PowerGrid {
    pub fn new(max: f64, points: usize) -> Result<Self> {
        let grid = PowerGrid { max, points };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> Result<()> {
        if !(self.max.is_finite() && self.max > 0.0) {
            return Err(Error::InvalidInstance(format!(
                "power grid maximum must be positive and finite, got {}",
                self.max
            )));
        }
        if self.points < 2 {
            return Err(Error::InvalidInstance(
                "power grid needs at least two points".into(),
            ));
        }
        Ok(())
    }

    pub fn level(&self, k: usize) -> f64 {
        self.max * k as f64 / (self.points - 1) as f64
    }

    pub fn levels(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.points).map(|k| self.level(k))
    }

    pub fn step(&self) -> f64 {
        self.max / (self.points - 1) as f64
    }

    /// Whether `p` is an admissible transmit power.
    ///
    /// Operating powers are computed exactly from target rates, so any power in
    /// `[0, max]` is admitted; the grid levels are used where a search over the
    /// set is needed.
    pub fn contains(&self, p: f64) -> bool {
        p.is_finite() && p >= 0.0 && p <= self.max * (1.0 + 1e-12)
    }

    pub fn nearest(&self, p: f64) -> f64 {
        let k = (p / self.step()).round().clamp(0.0, (self.points - 1) as f64);
        self.level(k as usize)
    }
}

/// A joint power profile, one entry per user, in watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PowerProfile(Vec<f64>);

impl PowerProfile {
    pub fn new(powers: Vec<f64>) -> Self {
        PowerProfile(powers)
    }

    pub fn silent(users: usize) -> Self {
        PowerProfile(vec![0.0; users])
    }

    /// Only `user` transmits, at power `p`.
    pub fn solo(users: usize, user: usize, p: f64) -> Self {
        let mut v = vec![0.0; users];
        v[user] = p;
        PowerProfile(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn power(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, p: f64) {
        self.0[i] = p;
    }

    pub fn transmitters(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| i)
    }

    pub fn transmitter_count(&self) -> usize {
        self.transmitters().count()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Users, channels, power sets, throughput floors and the common discount factor.
///
/// Users `0..num_primary` are primary users, the rest secondary. `gain(i, j)` is
/// the power gain from transmitter `i` to receiver `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInstance {
    num_primary: usize,
    gains: Vec<f64>,
    noise: Vec<f64>,
    grids: Vec<PowerGrid>,
    min_rates: Vec<f64>,
    discount: f64,
}

impl NetworkInstance {
    pub fn new(
        num_primary: usize,
        gains: Vec<Vec<f64>>,
        noise: Vec<f64>,
        grids: Vec<PowerGrid>,
        min_rates: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        let n = noise.len();
        if gains.len() != n || gains.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidInstance(format!(
                "gain matrix must be {n}x{n}"
            )));
        }
        Self::from_flat(
            num_primary,
            gains.into_iter().flatten().collect(),
            noise,
            grids,
            min_rates,
            discount,
        )
    }

    /// Builds an instance from a row-major gain matrix.
    pub fn from_flat(
        num_primary: usize,
        gains: Vec<f64>,
        noise: Vec<f64>,
        grids: Vec<PowerGrid>,
        min_rates: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        let net = NetworkInstance {
            num_primary,
            gains,
            noise,
            grids,
            min_rates,
            discount,
        };
        net.validate()?;
        Ok(net)
    }

    /// `n` statistically identical users: direct gain `direct`, every cross gain `cross`.
    pub fn symmetric(
        n: usize,
        direct: f64,
        cross: f64,
        noise: f64,
        grid: PowerGrid,
        min_rate: f64,
        discount: f64,
    ) -> Result<Self> {
        let gains = (0..n * n)
            .map(|k| if k / n == k % n { direct } else { cross })
            .collect();
        Self::from_flat(
            0,
            gains,
            vec![noise; n],
            vec![grid; n],
            vec![min_rate; n],
            discount,
        )
    }

    fn validate(&self) -> Result<()> {
        let n = self.noise.len();
        let bad = |msg: String| Err(Error::InvalidInstance(msg));
        if n == 0 {
            return bad("no users".into());
        }
        if self.gains.len() != n * n {
            return bad(format!("expected {} gains, got {}", n * n, self.gains.len()));
        }
        if self.grids.len() != n || self.min_rates.len() != n {
            return bad("per-user vectors must all have one entry per user".into());
        }
        if self.num_primary > n {
            return bad(format!("{} primary users but only {n} users", self.num_primary));
        }
        for i in 0..n {
            for j in 0..n {
                let g = self.gain(i, j);
                if !(g.is_finite() && g >= 0.0) {
                    return bad(format!("gain[{i}][{j}] = {g} must be finite and nonnegative"));
                }
            }
            if self.gain(i, i) <= 0.0 {
                return bad(format!("direct gain of user {i} must be positive"));
            }
            if !(self.noise[i].is_finite() && self.noise[i] > 0.0) {
                return bad(format!("noise of user {i} must be positive"));
            }
            if !(self.min_rates[i].is_finite() && self.min_rates[i] >= 0.0) {
                return bad(format!("minimum rate of user {i} must be finite and nonnegative"));
            }
            self.grids[i].validate()?;
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount factor {} outside [0, 1)", self.discount));
        }
        Ok(())
    }

    pub fn users(&self) -> usize {
        self.noise.len()
    }

    pub fn num_primary(&self) -> usize {
        self.num_primary
    }

    pub fn num_secondary(&self) -> usize {
        self.users() - self.num_primary
    }

    pub fn gain(&self, from: usize, to: usize) -> f64 {
        self.gains[from * self.users() + to]
    }

    pub fn gains_row_major(&self) -> &[f64] {
        &self.gains
    }

    pub fn noise(&self, i: usize) -> f64 {
        self.noise[i]
    }

    pub fn noise_powers(&self) -> &[f64] {
        &self.noise
    }

    pub fn grid(&self, i: usize) -> &PowerGrid {
        &self.grids[i]
    }

    pub fn min_rate(&self, i: usize) -> f64 {
        self.min_rates[i]
    }

    pub fn min_rates(&self) -> &[f64] {
        &self.min_rates
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        self.discount = discount;
        self.validate()?;
        Ok(self)
    }

    pub fn with_min_rates(mut self, min_rates: Vec<f64>) -> Result<Self> {
        self.min_rates = min_rates;
        self.validate()?;
        Ok(self)
    }

    /// The instance restricted to `users`, in the given order.
    pub fn subset(&self, users: &[usize]) -> Result<Self> {
        for &u in users {
            self.check_index(u)?;
        }
        let gains = users
            .iter()
            .flat_map(|&i| users.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.gain(i, j))
            .collect();
        let num_primary = users.iter().filter(|&&u| u < self.num_primary).count();
        Self::from_flat(
            num_primary,
            gains,
            users.iter().map(|&u| self.noise[u]).collect(),
            users.iter().map(|&u| self.grids[u]).collect(),
            users.iter().map(|&u| self.min_rates[u]).collect(),
            self.discount,
        )
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i < self.users() {
            Ok(())
        } else {
            Err(Error::UserOutOfRange {
                index: i,
                users: self.users(),
            })
        }
    }

    fn check_profile_len(&self, p: &PowerProfile) -> Result<()> {
        if p.len() != self.users() {
            return Err(Error::InvalidInstance(format!(
                "profile has {} entries for {} users",
                p.len(),
                self.users()
            )));
        }
        Ok(())
    }

    /// `I_i = sum_{j != i} p_j g_ji + sigma_i^2`.
    pub fn interference_temperature(&self, p: &PowerProfile, i: usize) -> Result<f64> {
        self.check_index(i)?;
        self.check_profile_len(p)?;
        Ok(self.interference_unchecked(p, i))
    }

    fn interference_unchecked(&self, p: &PowerProfile, i: usize) -> f64 {
        let n = self.users();
        (0..n)
            .filter(|&j| j != i)
            .map(|j| p.power(j) * self.gain(j, i))
            .sum::<f64>()
            + self.noise[i]
    }

    /// Shannon rate of user `i` under profile `p`, in bits/s/Hz.
    pub fn throughput(&self, p: &PowerProfile, i: usize) -> Result<f64> {
        self.check_index(i)?;
        self.check_profile_len(p)?;
        Ok(self.throughput_unchecked(p, i))
    }

    fn throughput_unchecked(&self, p: &PowerProfile, i: usize) -> f64 {
        let pi = p.power(i);
        if pi <= 0.0 {
            return 0.0;
        }
        let sinr = pi * self.gain(i, i) / self.interference_unchecked(p, i);
        sinr.ln_1p() / LN_2
    }

    /// Rates of every user under `p`.
    pub fn rates(&self, p: &PowerProfile) -> Result<Vec<f64>> {
        self.check_profile_len(p)?;
        Ok((0..self.users())
            .map(|i| self.throughput_unchecked(p, i))
            .collect())
    }

    /// Rate of user `i` transmitting alone at power `p`.
    pub fn solo_rate(&self, i: usize, p: f64) -> f64 {
        (p * self.gain(i, i) / self.noise[i]).ln_1p() / LN_2
    }

    /// Power user `i` needs to reach rate `r` when transmitting alone.
    pub fn solo_power(&self, i: usize, r: f64) -> f64 {
        self.noise[i] / self.gain(i, i) * (r * LN_2).exp_m1()
    }

    /// Highest rate user `i` can reach alone on its power grid.
    pub fn max_rate(&self, i: usize) -> f64 {
        self.solo_rate(i, self.grids[i].max)
    }

    /// The first user whose power lies outside its power set, if any.
    pub fn profile_violation(&self, p: &PowerProfile) -> Option<(usize, f64)> {
        (0..self.users().min(p.len()))
            .find(|&i| !self.grids[i].contains(p.power(i)))
            .map(|i| (i, p.power(i)))
    }
}

/// Zero-mean additive error of a user's interference-temperature estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum ErrorDist {
    /// Noiseless sensing.
    Exact,
    Gaussian { variance: f64 },
    Uniform { half_width: f64 },
}

impl ErrorDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ErrorDist::Exact => true,
            ErrorDist::Gaussian { variance } => variance.is_finite() && variance > 0.0,
            ErrorDist::Uniform { half_width } => half_width.is_finite() && half_width > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInstance(format!(
                "error distribution {self:?} needs a positive finite parameter"
            )))
        }
    }

    /// `P(eps > x)`.
    pub fn tail(&self, x: f64) -> f64 {
        match *self {
            ErrorDist::Exact => {
                if x < 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ErrorDist::Gaussian { variance } => 0.5 * erfc(x / (2.0 * variance).sqrt()),
            ErrorDist::Uniform { half_width: a } => ((a - x) / (2.0 * a)).clamp(0.0, 1.0),
        }
    }

    /// Density; zero for the degenerate distribution.
    pub fn pdf(&self, x: f64) -> f64 {
        match *self {
            ErrorDist::Exact => 0.0,
            ErrorDist::Gaussian { variance } => {
                (-0.5 * x * x / variance).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
            }
            ErrorDist::Uniform { half_width: a } => {
                if x.abs() <= a {
                    0.5 / a
                } else {
                    0.0
                }
            }
        }
    }

    /// Interval outside of which the density is zero or negligible.
    fn window(&self) -> (f64, f64) {
        match *self {
            ErrorDist::Exact => (0.0, 0.0),
            ErrorDist::Gaussian { variance } => {
                let w = GAUSSIAN_WINDOW * variance.sqrt();
                (-w, w)
            }
            ErrorDist::Uniform { half_width: a } => (-a, a),
        }
    }
}

/// Sensing parameters of one user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserSensing {
    pub error: ErrorDist,
    pub threshold: f64,
    pub recon_low: f64,
    pub recon_high: f64,
}

/// Per-user sensing: error distributions, thresholds and the derived two-level quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingModel {
    users: Vec<UserSensing>,
}

impl SensingModel {
    pub fn new(net: &NetworkInstance, errors: Vec<ErrorDist>, thresholds: Vec<f64>) -> Result<Self> {
        let n = net.users();
        if errors.len() != n || thresholds.len() != n {
            return Err(Error::InvalidInstance(format!(
                "sensing needs one error distribution and threshold per user ({n})"
            )));
        }
        let users = errors
            .into_iter()
            .zip(thresholds)
            .enumerate()
            .map(|(i, (error, threshold))| {
                if !threshold.is_finite() {
                    return Err(Error::InvalidInstance(format!(
                        "threshold of user {i} must be finite"
                    )));
                }
                let (recon_low, recon_high) = quantizer_levels(error, threshold, net.noise(i))?;
                Ok(UserSensing {
                    error,
                    threshold,
                    recon_low,
                    recon_high,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SensingModel { users })
    }

    /// Same error distribution and threshold for every user.
    pub fn uniform(net: &NetworkInstance, error: ErrorDist, threshold: f64) -> Result<Self> {
        let n = net.users();
        Self::new(net, vec![error; n], vec![threshold; n])
    }

    pub fn user(&self, i: usize) -> &UserSensing {
        &self.users[i]
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn subset(&self, users: &[usize]) -> Self {
        SensingModel {
            users: users.iter().map(|&u| self.users[u]).collect(),
        }
    }
}

/// Reconstruction values `(low, high)` of the two-level quantizer for the
/// interference-free estimate `sigma^2 + eps`, split at `threshold`.
///
/// Each value is the conditional mean of the estimate on its side of the
/// threshold, so the quantizer is mean-preserving. A branch with no
/// probability mass reconstructs to the noise floor.
pub fn quantizer_levels(error: ErrorDist, threshold: f64, noise: f64) -> Result<(f64, f64)> {
    error.validate()?;
    if error == ErrorDist::Exact {
        return Ok((noise, noise));
    }
    // Integrate over the error itself so that the support edges are hit exactly.
    let (lo, hi) = error.window();
    let moment = |e: f64| (noise + e) * error.pdf(e);
    let high_mass = error.tail(threshold - noise);
    let low_mass = 1.0 - high_mass;

    let cut = (threshold - noise).clamp(lo, hi);
    let low_moment = adaptive_simpson(moment, lo, cut, QUADRATURE_TOL)?;
    let high_moment = adaptive_simpson(moment, cut, hi, QUADRATURE_TOL)?;

    let level = |moment: f64, mass: f64, empty: bool| {
        if empty || mass <= f64::MIN_POSITIVE {
            noise
        } else {
            moment / mass
        }
    };
    let low = level(low_moment, low_mass, cut <= lo);
    let high = level(high_moment, high_mass, cut >= hi);
    Ok((low, high))
}

/// Probability that transmitting user `i` raises a distress signal under `p`.
pub fn distress_prob(net: &NetworkInstance, sensing: &SensingModel, p: &PowerProfile, i: usize) -> Result<f64> {
    let interference = net.interference_temperature(p, i)?;
    if p.power(i) <= 0.0 {
        return Err(Error::SilentUser(i));
    }
    let s = sensing.user(i);
    Ok(s.error.tail(s.threshold - interference))
}

/// Probability that at least one transmitting user raises a distress signal.
pub fn system_distress_prob(net: &NetworkInstance, sensing: &SensingModel, p: &PowerProfile) -> Result<f64> {
    let mut quiet = 1.0;
    for j in p.transmitters() {
        quiet *= 1.0 - distress_prob(net, sensing, p, j)?;
    }
    Ok(1.0 - quiet)
}

/// Samples the system distress signal: every transmitting user draws its own
/// signal from its stream, and the system signal is their logical OR.
pub fn system_distress(
    net: &NetworkInstance,
    sensing: &SensingModel,
    p: &PowerProfile,
    streams: &mut UserStreams,
) -> Result<bool> {
    let mut y = false;
    for j in p.transmitters() {
        let rho = distress_prob(net, sensing, p, j)?;
        let u: f64 = streams.stream(j).random();
        y |= u < rho;
    }
    Ok(y)
}
