// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic stopping problems: 2-D Brownian motion with quadratic stopping
//! gain (`bmG`, `bmgG`), sinusoidal change-point series (`cp1`..`cp3`) and
//! Brownian motion inside time-growing radial or star-shaped continuation
//! regions.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;
use crate::smdp::{GainSpec, StatePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EnvKind {
    BmG,
    BmgG,
    Cp1,
    Cp2,
    Cp3,
    Radial,
    Star,
}

impl EnvKind {
    pub const ALL: [EnvKind; 7] = [
        EnvKind::BmG,
        EnvKind::BmgG,
        EnvKind::Cp1,
        EnvKind::Cp2,
        EnvKind::Cp3,
        EnvKind::Radial,
        EnvKind::Star,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            EnvKind::BmG => "bmG",
            EnvKind::BmgG => "bmgG",
            EnvKind::Cp1 => "cp1",
            EnvKind::Cp2 => "cp2",
            EnvKind::Cp3 => "cp3",
            EnvKind::Radial => "radial",
            EnvKind::Star => "star",
        }
    }

    pub fn is_bm(self) -> bool {
        matches!(self, EnvKind::BmG | EnvKind::BmgG)
    }

    pub fn is_cp(self) -> bool {
        matches!(self, EnvKind::Cp1 | EnvKind::Cp2 | EnvKind::Cp3)
    }

    pub fn is_region(self) -> bool {
        matches!(self, EnvKind::Radial | EnvKind::Star)
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EnvKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown environment '{s}'")))
    }
}

impl TryFrom<String> for EnvKind {
    type Error = crate::Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EnvKind> for String {
    fn from(k: EnvKind) -> String {
        k.tag().to_string()
    }
}

/// Regime parameters of the change-point series, before and after the change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpParams {
    pub omega: f64,
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    /// AR(1), AR(2) coefficients before (`[0]`) and after (`[1]`) the change.
    pub ar: [[f64; 2]; 2],
}

impl CpParams {
    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Cp2 => CpParams {
                omega: 1.0,
                mu: [0.5, 0.5],
                sigma: [1.0, 1.0],
                ar: [[0.25, 0.05], [0.75, 0.5]],
            },
            EnvKind::Cp3 => CpParams {
                omega: 1.0,
                mu: [0.5, 0.5],
                sigma: [1.0, 5.0],
                ar: [[0.0; 2]; 2],
            },
            _ => CpParams {
                omega: 1.0,
                mu: [0.5, 5.0],
                sigma: [1.0, 1.0],
                ar: [[0.0; 2]; 2],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// Dimension of the raw process (before any time feature).
    pub dim: usize,
    pub horizon: usize,
    pub dt: f64,
    pub gamma: f64,
    pub include_time_in_state: bool,
    pub n_angles: usize,
    pub r0: f64,
    pub r_rate: f64,
    pub step_std: f64,
    pub cp: CpParams,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::for_kind(EnvKind::BmG)
    }
}

impl EnvSpec {
    pub fn for_kind(kind: EnvKind) -> Self {
        let (dim, horizon) = match kind {
            EnvKind::BmG | EnvKind::BmgG => (2, 50),
            EnvKind::Cp1 | EnvKind::Cp2 | EnvKind::Cp3 => (1, 51),
            EnvKind::Radial | EnvKind::Star => (2, 50),
        };
        EnvSpec {
            kind,
            dim,
            horizon,
            dt: 1.0 / 50.0,
            gamma: 0.99,
            include_time_in_state: !kind.is_bm(),
            n_angles: 5,
            r0: 0.5,
            r_rate: 0.05,
            step_std: 1.0,
            cp: CpParams::for_kind(kind),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(invalid("horizon must be >= 2"));
        }
        if self.dim == 0 {
            return Err(invalid("dim must be >= 1"));
        }
        if self.kind.is_bm() {
            if !(self.dt > 0.0 && self.dt.is_finite()) {
                return Err(invalid(format!("dt must be > 0, got {}", self.dt)));
            }
            if self.dim != 2 {
                return Err(invalid("Brownian gain problems are two-dimensional"));
            }
        }
        if self.kind.is_region() {
            if self.dim != 2 {
                return Err(invalid("region problems are two-dimensional"));
            }
            if self.kind == EnvKind::Star && self.n_angles < 3 {
                return Err(invalid("star needs n_angles >= 3"));
            }
            if self.r0 <= 0.0 || self.r_rate < 0.0 {
                return Err(invalid("region radius must be positive and non-shrinking"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("gamma must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Width of the learner-visible state vector.
    pub fn state_dim(&self) -> usize {
        self.dim + usize::from(self.include_time_in_state)
    }

    /// Learner-visible state at time `t`: raw coordinates plus `t / horizon` when enabled.
    pub fn featurize(&self, raw: &StatePoint, t: usize) -> StatePoint {
        if self.include_time_in_state {
            let mut c = raw.coords().to_vec();
            c.push(t as f64 / self.horizon as f64);
            StatePoint::new(c)
        } else {
            raw.clone()
        }
    }

    /// Gains the expert optimizes. `bmG` experts use the stopping gain only.
    pub fn expert_gains(&self) -> BmGains {
        BmGains {
            dt: self.dt,
            gamma: self.gamma,
            with_continuation: self.kind == EnvKind::BmgG,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPath {
    pub states: Vec<StatePoint>,
    pub event_time: Option<usize>,
    pub rng_seed: u64,
}

impl RawPath {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// `(g, G)` of the Brownian examples: `G = |s|²`, `g = 5Δt` inside the unit disc, `−400Δt` outside.
pub fn bm_gains(s: &StatePoint, dt: f64) -> (f64, f64) {
    let c = s.coords();
    let big_g = c[0] * c[0] + c[1] * c[1];
    let g = if big_g.sqrt() < 1.0 { 5.0 * dt } else { -400.0 * dt };
    (g, big_g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BmGains {
    pub dt: f64,
    pub gamma: f64,
    pub with_continuation: bool,
}

impl GainSpec for BmGains {
    fn continuation_gain(&self, s: &StatePoint) -> f64 {
        if self.with_continuation {
            bm_gains(s, self.dt).0
        } else {
            0.0
        }
    }

    fn stopping_gain(&self, s: &StatePoint) -> f64 {
        bm_gains(s, self.dt).1
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }
}

pub fn simulate_bm_path(spec: &EnvSpec, seed: u64) -> Result<RawPath> {
    if !spec.kind.is_bm() {
        return Err(invalid(format!("{} is not a Brownian gain problem", spec.kind)));
    }
    spec.validate()?;
    let mut rng = rng::stream(seed);
    let scale = spec.dt.sqrt();
    let states = brownian(&mut rng, spec.dim, spec.horizon, scale);
    Ok(RawPath {
        states,
        event_time: None,
        rng_seed: seed,
    })
}

fn brownian(rng: &mut rng::Stream, dim: usize, len: usize, scale: f64) -> Vec<StatePoint> {
    let mut cur = vec![0.0; dim];
    let mut states = Vec::with_capacity(len);
    states.push(StatePoint::new(cur.clone()));
    for _ in 1..len {
        for c in cur.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *c += scale * z;
        }
        states.push(StatePoint::new(cur.clone()));
    }
    states
}

/// Change-point index bounds (inclusive) inside a series of `n` points.
pub fn cp_window(n: usize) -> (usize, usize) {
    let lo = (0.7 * n as f64).ceil() as usize;
    let hi = ((0.9 * n as f64).floor() as usize).min(n - 1);
    (lo, hi.max(lo))
}

pub fn simulate_cp_path(spec: &EnvSpec, seed: u64) -> Result<RawPath> {
    if !spec.kind.is_cp() {
        return Err(invalid(format!("{} is not a change-point problem", spec.kind)));
    }
    spec.validate()?;
    let n = spec.horizon;
    let p = &spec.cp;
    let mut rng = rng::stream(seed);
    let (lo, hi) = cp_window(n);
    let change = rng.random_range(lo..=hi);
    let start = rng.random_range(0..=n / 2);

    let mut x = Vec::with_capacity(n);
    for t in 0..n {
        let regime = usize::from(t >= change);
        let lag1 = if t >= 1 { x[t - 1] } else { 0.0 };
        let lag2 = if t >= 2 { x[t - 2] } else { 0.0 };
        let z: f64 = rng.sample(StandardNormal);
        let v = (p.omega * t as f64).sin()
            + p.ar[regime][0] * lag1
            + p.ar[regime][1] * lag2
            + p.mu[regime]
            + p.sigma[regime] * z;
        x.push(v);
    }
    let states = x[start..]
        .iter()
        .map(|&v| StatePoint::new(vec![v]))
        .collect();
    Ok(RawPath {
        states,
        event_time: Some(change - start),
        rng_seed: seed,
    })
}

/// Offset of the series start removed by truncation, recovered from the path length.
pub fn cp_truncation_offset(spec: &EnvSpec, path: &RawPath) -> usize {
    spec.horizon - path.len()
}

pub fn region_radius(spec: &EnvSpec, t: usize) -> f64 {
    spec.r0 + spec.r_rate * t as f64
}

/// Star outline at time `t`: `2·n_angles` vertices alternating outer/inner radius,
/// starting with an outer vertex on the positive x axis.
pub fn star_vertices(spec: &EnvSpec, t: usize) -> Vec<[f64; 2]> {
    let outer = region_radius(spec, t);
    let inner = 0.5 * outer;
    let n = 2 * spec.n_angles;
    (0..n)
        .map(|k| {
            let theta = PI * k as f64 / spec.n_angles as f64;
            let r = if k % 2 == 0 { outer } else { inner };
            [r * theta.cos(), r * theta.sin()]
        })
        .collect()
}

/// Even-odd ray casting.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x_cross = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Whether `s` lies strictly inside the continuation region at time `t`.
/// Points on the boundary are outside (closed stopping sets).
pub fn region_membership(spec: &EnvSpec, s: &StatePoint, t: usize) -> Result<bool> {
    let c = s.coords();
    if c.len() < 2 {
        return Err(invalid("region membership needs a 2-D point"));
    }
    match spec.kind {
        EnvKind::Radial => Ok(c[0].hypot(c[1]) < region_radius(spec, t)),
        EnvKind::Star => {
            let poly = star_vertices(spec, t);
            let p = [c[0], c[1]];
            Ok(point_in_polygon(p, &poly) && !on_polygon_boundary(p, &poly))
        }
        other => Err(invalid(format!("{other} has no geometric region"))),
    }
}

fn on_polygon_boundary(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    (0..n).any(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let scale = (b[0] - a[0]).hypot(b[1] - a[1]);
        cross.abs() <= 1e-12 * scale
            && p[0] >= a[0].min(b[0]) - 1e-12
            && p[0] <= a[0].max(b[0]) + 1e-12
            && p[1] >= a[1].min(b[1]) - 1e-12
            && p[1] <= a[1].max(b[1]) + 1e-12
    })
}

pub fn simulate_region_path(spec: &EnvSpec, seed: u64) -> Result<RawPath> {
    if !spec.kind.is_region() {
        return Err(invalid(format!("{} has no geometric region", spec.kind)));
    }
    spec.validate()?;
    let mut rng = rng::stream(seed);
    let states = brownian(&mut rng, spec.dim, spec.horizon, spec.step_std);
    let mut event_time = None;
    for (t, s) in states.iter().enumerate() {
        if !region_membership(spec, s, t)? {
            event_time = Some(t);
            break;
        }
    }
    Ok(RawPath {
        states,
        event_time,
        rng_seed: seed,
    })
}

/// Dispatches on the problem kind.
pub fn simulate_path(spec: &EnvSpec, seed: u64) -> Result<RawPath> {
    match spec.kind {
        k if k.is_bm() => simulate_bm_path(spec, seed),
        k if k.is_cp() => simulate_cp_path(spec, seed),
        _ => simulate_region_path(spec, seed),
    }
}

/// `count` paths with per-path seeds derived from `base_seed`.
pub fn simulate_paths(spec: &EnvSpec, count: usize, base_seed: u64) -> Result<Vec<RawPath>> {
    (0..count as u64)
        .map(|i| simulate_path(spec, rng::derive_seed(base_seed, i)))
        .collect()
}
