// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stopping-problem kernel: states with cemetery points, binary actions,
//! composite rewards, soft values and the Boltzmann stop/continue policy.
//!
//! Action encoding follows the stopped-MDP convention used everywhere in the
//! crate: `0 = stop`, `1 = continue`. Q pairs are always ordered
//! `(stop, continue)`.

use crate::error::{invalid, Result};

/// A point of the state space, or the zero-valued cemetery entered after stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePoint {
    coords: Vec<f64>,
    is_cemetery: bool,
}

impl StatePoint {
    pub fn new(coords: Vec<f64>) -> Self {
        assert!(!coords.is_empty(), "state dimension must be >= 1");
        Self {
            coords,
            is_cemetery: false,
        }
    }

    /// The cemetery point of a `dim`-dimensional problem (all coordinates zero).
    pub fn cemetery(dim: usize) -> Self {
        assert!(dim >= 1, "state dimension must be >= 1");
        Self {
            coords: vec![0.0; dim],
            is_cemetery: true,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn is_cemetery(&self) -> bool {
        self.is_cemetery
    }

    pub fn norm(&self) -> f64 {
        self.coords.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Stop = 0,
    Continue = 1,
}

impl Action {
    pub fn from_bit(bit: u8) -> Result<Self> {
        match bit {
            0 => Ok(Action::Stop),
            1 => Ok(Action::Continue),
            other => Err(invalid(format!("action must be 0 or 1, got {other}"))),
        }
    }

    pub fn bit(self) -> u8 {
        self as u8
    }

    /// `a` as a real number, used as the continuation mask `(1 - a)` complement.
    pub fn as_f64(self) -> f64 {
        f64::from(self.bit())
    }

    pub fn is_stop(self) -> bool {
        self == Action::Stop
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QPair {
    pub q_stop: f64,
    pub q_continue: f64,
}

impl QPair {
    pub fn new(q_stop: f64, q_continue: f64) -> Self {
        Self { q_stop, q_continue }
    }

    pub fn max(&self) -> f64 {
        self.q_stop.max(self.q_continue)
    }

    pub fn get(&self, a: Action) -> f64 {
        match a {
            Action::Stop => self.q_stop,
            Action::Continue => self.q_continue,
        }
    }
}

/// A state extended with the running discounted continuation gain.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub base: StatePoint,
    pub y: f64,
}

impl AugmentedState {
    /// Flattened `(s, y)` feature vector.
    pub fn features(&self) -> Vec<f64> {
        let mut v = self.base.coords().to_vec();
        v.push(self.y);
        v
    }
}

/// Continuation gain `g`, stopping gain `G` and discount of a stopping problem.
pub trait GainSpec {
    fn continuation_gain(&self, s: &StatePoint) -> f64;
    fn stopping_gain(&self, s: &StatePoint) -> f64;
    fn gamma(&self) -> f64;

    fn gains(&self, s: &StatePoint) -> (f64, f64) {
        if s.is_cemetery() {
            return (0.0, 0.0);
        }
        (self.continuation_gain(s), self.stopping_gain(s))
    }
}

/// `r(s, a) = g(s)·a + G(s)·(1 − a)`.
pub fn composite_reward(g_val: f64, big_g_val: f64, a: Action) -> f64 {
    match a {
        Action::Continue => g_val,
        Action::Stop => big_g_val,
    }
}

fn check_temperature(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("temperature must be positive, got {epsilon}")))
    }
}

/// Soft maximum `ε·log(exp(q0/ε) + exp(q1/ε))` evaluated with max subtraction.
pub fn soft_value(q: QPair, epsilon: f64) -> Result<f64> {
    check_temperature(epsilon)?;
    Ok(soft_value_unchecked(q.q_stop, q.q_continue, epsilon))
}

#[inline]
pub fn soft_value_unchecked(q0: f64, q1: f64, epsilon: f64) -> f64 {
    let m = q0.max(q1);
    let lo = q0.min(q1);
    m + epsilon * ((lo - m) / epsilon).exp().ln_1p()
}

/// Natural log of the soft-value excess `soft_value(q, ε) − max(q)`.
///
/// The excess `ε·ln(1 + e^{−|Δq|/ε})` is strictly positive but drops below
/// one ulp of `max(q)` once `|Δq|/ε` is large; its logarithm stays finite.
pub fn soft_value_log_excess(q: QPair, epsilon: f64) -> Result<f64> {
    check_temperature(epsilon)?;
    let z = (q.q_stop - q.q_continue).abs() / epsilon;
    let inner = if z > 40.0 {
        // ln(ln1p(e^{-z})) = -z + ln(1 - e^{-z}/2 + ...) and e^{-40} is below f64 resolution
        -z
    } else {
        (-z).exp().ln_1p().ln()
    };
    Ok(epsilon.ln() + inner)
}

/// Softargmax of the pair at temperature `ε`, returned as `(p_stop, p_continue)`.
pub fn boltzmann_policy(q: QPair, epsilon: f64) -> Result<(f64, f64)> {
    check_temperature(epsilon)?;
    Ok(boltzmann_unchecked(q.q_stop, q.q_continue, epsilon))
}

#[inline]
pub fn boltzmann_unchecked(q0: f64, q1: f64, epsilon: f64) -> (f64, f64) {
    // logistic of the scaled difference, evaluated on the side that cannot overflow
    let z = (q0 - q1) / epsilon;
    if z >= 0.0 {
        let e = (-z).exp();
        let p_stop = 1.0 / (1.0 + e);
        (p_stop, e / (1.0 + e))
    } else {
        let e = z.exp();
        let p_cont = 1.0 / (1.0 + e);
        (e / (1.0 + e), p_cont)
    }
}

/// Greedy stop rule; ties stop.
pub fn stop_decision(q: QPair) -> bool {
    q.q_stop >= q.q_continue
}

/// Appends `γ^t · g_new` to a running discounted gain.
pub fn y_update(y_prev: f64, g_new: f64, t: usize, gamma: f64) -> f64 {
    y_prev + discount_pow(gamma, t) * g_new
}

pub fn discount_pow(gamma: f64, t: usize) -> f64 {
    gamma.powi(i32::try_from(t).expect("time index fits in i32"))
}
