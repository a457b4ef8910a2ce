// SPDX-License-Identifier: MIT OR Apache-2.0

//! Expert stopping rules.
//!
//! Three routes produce expert stopping times:
//! - exact backward induction on finite chains (`V_t = max(G, g + γ·P·V_{t+1})`),
//! - approximate backward induction over a cross-section of simulated paths,
//!   with the continuation value estimated by k-nearest-neighbour averaging,
//! - geometric / event rules for the change-point and region problems.

use crate::env::{region_membership, EnvSpec, RawPath};
use crate::error::{invalid, Result};
use crate::smdp::{Action, GainSpec, StatePoint};

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteOSProblem {
    /// Row-stochastic transition matrix of the continue action.
    pub transition: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub big_g: Vec<f64>,
    pub gamma: f64,
    /// Number of decision epochs; the value at `t = horizon` is `G`.
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    /// `values[t][s]` for `t = 0..=horizon`.
    pub values: Vec<Vec<f64>>,
    /// `stop_set[t][s]` for `t = 0..=horizon`; always true at the horizon.
    pub stop_set: Vec<Vec<bool>>,
    /// `continuation[t][s] = g[s] + γ·(P·V_{t+1})[s]` for `t < horizon`.
    pub continuation: Vec<Vec<f64>>,
}

impl FiniteOSProblem {
    pub fn n_states(&self) -> usize {
        self.g.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        if n == 0 || self.big_g.len() != n || self.transition.len() != n {
            return Err(invalid("inconsistent finite problem dimensions"));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != n {
                return Err(invalid(format!("transition row {i} has wrong length")));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(invalid(format!("transition row {i} has entries outside [0,1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("transition row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Expected next-step value `(P·v)[s]`.
    pub fn expect(&self, s: usize, v: &[f64]) -> f64 {
        self.transition[s].iter().zip(v).map(|(p, x)| p * x).sum()
    }
}

pub fn backward_induction_exact(p: &FiniteOSProblem) -> Result<ExactSolution> {
    p.validate()?;
    let n = p.n_states();
    let h = p.horizon;
    let mut values = vec![vec![0.0; n]; h + 1];
    let mut stop_set = vec![vec![true; n]; h + 1];
    let mut continuation = vec![vec![0.0; n]; h];
    values[h].clone_from(&p.big_g);
    for t in (0..h).rev() {
        for s in 0..n {
            let cont = p.g[s] + p.gamma * p.expect(s, &values[t + 1]);
            continuation[t][s] = cont;
            let stop = p.big_g[s] >= cont;
            stop_set[t][s] = stop;
            values[t][s] = if stop { p.big_g[s] } else { cont };
        }
    }
    Ok(ExactSolution {
        values,
        stop_set,
        continuation,
    })
}

/// Expert stopping time of one path. States after `tau` are not part of the labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertLabel {
    pub tau: Option<usize>,
    /// Number of labeled states (`tau + 1` for stopped paths, the path length otherwise).
    pub len: usize,
}

impl ExpertLabel {
    pub fn new(tau: Option<usize>, path_len: usize) -> Self {
        let len = tau.map_or(path_len, |t| t + 1);
        ExpertLabel { tau, len }
    }

    pub fn actions(&self) -> Vec<Action> {
        (0..self.len)
            .map(|t| {
                if Some(t) == self.tau {
                    Action::Stop
                } else {
                    Action::Continue
                }
            })
            .collect()
    }
}

pub type ExpertLabeling = Vec<ExpertLabel>;

/// Continuation values estimated by nearest-neighbour averaging over cross-sections
/// of reference paths.
#[derive(Debug, Clone)]
pub struct KnnContinuation {
    k: usize,
    /// `points[t]` — reference states at time `t`.
    points: Vec<Vec<Vec<f64>>>,
    /// `targets[t][j] = γ·V̂_{t+1}` along reference path `j`.
    targets: Vec<Vec<f64>>,
}

impl KnnContinuation {
    /// Continuation estimate `Ĉ_t(s)`: mean target over the `k` nearest
    /// reference points, ties at the k-th distance included.
    pub fn estimate(&self, t: usize, s: &[f64]) -> f64 {
        knn_mean(&self.points[t], &self.targets[t], s, self.k)
    }

    /// Last time index with a continuation estimate.
    pub fn last_decision_time(&self) -> usize {
        self.points.len().saturating_sub(1)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn knn_mean(points: &[Vec<f64>], targets: &[f64], q: &[f64], k: usize) -> f64 {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(j, p)| (sq_dist(p, q), j))
        .collect();
    let k = k.min(d.len());
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
    let radius = d[k - 1].0;
    let (mut sum, mut count) = (0.0, 0usize);
    for &(dist, j) in &d {
        if dist <= radius {
            sum += targets[j];
            count += 1;
        }
    }
    sum / count as f64
}

/// Expert that stops the first time `G ≥ g + Ĉ_t` on the observed state.
#[derive(Debug, Clone)]
pub struct RegressionExpert<G> {
    gains: G,
    continuation: KnnContinuation,
}

impl<G: GainSpec> RegressionExpert<G> {
    /// Runs the approximate dynamic program backward over the reference cross-sections.
    pub fn fit(paths: &[RawPath], gains: G, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        if paths.len() < k {
            return Err(invalid(format!(
                "need at least k = {k} paths, got {}",
                paths.len()
            )));
        }
        let horizon = paths[0].len();
        if horizon < 2 || paths.iter().any(|p| p.len() != horizon) {
            return Err(invalid("all paths must share one horizon >= 2"));
        }
        let gamma = gains.gamma();
        let m = paths.len();
        let last = horizon - 1;
        let mut values: Vec<f64> = paths
            .iter()
            .map(|p| gains.stopping_gain(&p.states[last]))
            .collect();
        let mut points = vec![Vec::new(); last];
        let mut targets = vec![Vec::new(); last];
        for t in (0..last).rev() {
            let pts: Vec<Vec<f64>> = paths.iter().map(|p| p.states[t].coords().to_vec()).collect();
            let tg: Vec<f64> = values.iter().map(|v| gamma * v).collect();
            let mut next = vec![0.0; m];
            for (j, p) in paths.iter().enumerate() {
                let s = &p.states[t];
                let (g, big_g) = gains.gains(s);
                let cont = g + knn_mean(&pts, &tg, s.coords(), k);
                next[j] = big_g.max(cont);
            }
            points[t] = pts;
            targets[t] = tg;
            values = next;
        }
        Ok(RegressionExpert {
            gains,
            continuation: KnnContinuation {
                k,
                points,
                targets,
            },
        })
    }

    pub fn continuation(&self) -> &KnnContinuation {
        &self.continuation
    }

    /// Whether the expert stops in state `s` at time `t`.
    pub fn stops(&self, t: usize, s: &StatePoint) -> bool {
        if t >= self.continuation.points.len() {
            return false;
        }
        let (g, big_g) = self.gains.gains(s);
        big_g >= g + self.continuation.estimate(t, s.coords())
    }

    pub fn label(&self, path: &RawPath) -> ExpertLabel {
        let decisions = path.len().min(self.continuation.points.len());
        let tau = (0..decisions).find(|&t| self.stops(t, &path.states[t]));
        ExpertLabel::new(tau, path.len())
    }
}

/// Approximate backward induction over the paths' own cross-sections.
pub fn backward_induction_regression<G: GainSpec>(
    paths: &[RawPath],
    gains: G,
    k: usize,
) -> Result<ExpertLabeling> {
    let expert = RegressionExpert::fit(paths, gains, k)?;
    Ok(paths.iter().map(|p| expert.label(p)).collect())
}

/// Exact backward induction for a planar Gaussian random walk whose gains
/// depend on `|s|` only. The radius of such a walk is itself Markov, so the
/// dynamic program runs on a one-dimensional radial grid; the transition
/// kernel integrates the Gaussian step density over the angle.
#[derive(Debug, Clone)]
pub struct RadialGridExpert<G> {
    gains: G,
    step: f64,
    /// `expected[t][i] = γ·E[V_{t+1}(r') | r = i·step]`.
    expected: Vec<Vec<f64>>,
}

const GRID_PER_STD: f64 = 25.0;
const KERNEL_HALF_WIDTH: f64 = 8.0;
const ANGLES: usize = 64;

/// Row-stochastic radial kernel of one step with standard deviation `sigma`
/// per coordinate, stored as `(first column, weights)` bands.
pub fn radial_kernel(n: usize, step: f64, sigma: f64) -> Vec<(usize, Vec<f64>)> {
    let band = (KERNEL_HALF_WIDTH * sigma / step).ceil() as usize;
    let cos: Vec<f64> = (0..ANGLES)
        .map(|k| (std::f64::consts::PI * (k as f64 + 0.5) / ANGLES as f64).cos())
        .collect();
    let two_var = 2.0 * sigma * sigma;
    (0..n)
        .map(|i| {
            let a = i as f64 * step;
            let lo = i.saturating_sub(band);
            let hi = (i + band).min(n - 1);
            let mut w: Vec<f64> = (lo..=hi)
                .map(|j| {
                    let b = j as f64 * step;
                    // density of r' = b: b · ∫ exp(−|b·e^{iθ} − a|² / 2σ²) dθ
                    b * cos
                        .iter()
                        .map(|c| (-(a * a + b * b - 2.0 * a * b * c) / two_var).exp())
                        .sum::<f64>()
                })
                .collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                w.iter_mut().for_each(|x| *x /= total);
            }
            (lo, w)
        })
        .collect()
}

impl<G: GainSpec> RadialGridExpert<G> {
    /// `sigma` is the per-coordinate step standard deviation; decisions are
    /// made at `t < horizon − 1` and the value at the last state is `G`.
    pub fn fit(gains: G, sigma: f64, horizon: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("step deviation must be positive, got {sigma}")));
        }
        if horizon < 2 {
            return Err(invalid("horizon must be >= 2"));
        }
        let step = sigma / GRID_PER_STD;
        // a radius beyond the walk's reach with overwhelming probability
        let r_max = 8.0 * sigma * (horizon as f64).sqrt() + KERNEL_HALF_WIDTH * sigma;
        let n = (r_max / step).ceil() as usize + 1;
        let kernel = radial_kernel(n, step, sigma);
        let at = |i: usize| StatePoint::new(vec![i as f64 * step, 0.0]);
        let (g, big_g): (Vec<f64>, Vec<f64>) = (0..n).map(|i| gains.gains(&at(i))).unzip();
        let gamma = gains.gamma();
        let mut value = big_g.clone();
        let mut expected = vec![Vec::new(); horizon - 1];
        for t in (0..horizon - 1).rev() {
            let e: Vec<f64> = kernel
                .iter()
                .map(|(lo, w)| gamma * w.iter().zip(&value[*lo..]).map(|(p, v)| p * v).sum::<f64>())
                .collect();
            value = (0..n).map(|i| big_g[i].max(g[i] + e[i])).collect();
            expected[t] = e;
        }
        Ok(RadialGridExpert { gains, step, expected })
    }

    /// Discounted expected next value at radius `r`, linear in between nodes.
    pub fn expected_next(&self, t: usize, r: f64) -> f64 {
        let e = &self.expected[t];
        let x = (r / self.step).max(0.0);
        let i = (x.floor() as usize).min(e.len() - 2);
        let u = (x - i as f64).min(1.0);
        e[i] + u * (e[i + 1] - e[i])
    }

    pub fn stops(&self, t: usize, s: &StatePoint) -> bool {
        if t >= self.expected.len() {
            return false;
        }
        let (g, big_g) = self.gains.gains(s);
        big_g >= g + self.expected_next(t, s.norm())
    }

    pub fn label(&self, path: &RawPath) -> ExpertLabel {
        let decisions = path.len().min(self.expected.len());
        let tau = (0..decisions).find(|&t| self.stops(t, &path.states[t]));
        ExpertLabel::new(tau, path.len())
    }
}

/// Stopping rule of the change-point and region problems: two steps after the
/// change point (clamped to the path end), or the first exit from the region.
pub fn rule_based_stop(path: &RawPath, spec: &EnvSpec) -> Result<ExpertLabel> {
    if path.is_empty() {
        return Err(invalid("empty path"));
    }
    let kind = spec.kind;
    if kind.is_cp() {
        let tau = path.event_time.map(|e| (e + 2).min(path.len() - 1));
        Ok(ExpertLabel::new(tau, path.len()))
    } else if kind.is_region() {
        let mut tau = None;
        for (t, s) in path.states.iter().enumerate() {
            if !region_membership(spec, s, t)? {
                tau = Some(t);
                break;
            }
        }
        Ok(ExpertLabel::new(tau, path.len()))
    } else {
        Err(invalid(format!("{kind} has no rule-based expert")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvKind, EnvSpec};

    struct Table {
        g: Vec<f64>,
        big_g: Vec<f64>,
        gamma: f64,
    }

    impl GainSpec for Table {
        fn continuation_gain(&self, s: &StatePoint) -> f64 {
            self.g[s.coords()[0].round() as usize]
        }
        fn stopping_gain(&self, s: &StatePoint) -> f64 {
            self.big_g[s.coords()[0].round() as usize]
        }
        fn gamma(&self) -> f64 {
            self.gamma
        }
    }

    fn right_shift(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut row = vec![0.0; n];
                row[(i + 1).min(n - 1)] = 1.0;
                row
            })
            .collect()
    }

    #[test]
    fn radial_kernel_moments() {
        // E|s'|² = |s|² + 2σ² for a planar Gaussian step
        let sigma = 0.2;
        let step = sigma / GRID_PER_STD;
        let k = radial_kernel(600, step, sigma);
        for i in [0usize, 40, 150, 300] {
            let (lo, w) = &k[i];
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let m2: f64 = w.iter().enumerate().map(|(j, p)| p * ((lo + j) as f64 * step).powi(2)).sum();
            let want = (i as f64 * step).powi(2) + 2.0 * sigma * sigma;
            assert!((m2 - want).abs() < 2e-3 * want.max(0.1), "i={i} m2={m2} want={want}");
        }
    }

    #[test]
    fn radial_grid_last_step_threshold() {
        // G = |s|², g = 0: at the last decision stop iff r² ≥ γ(r² + 2Δt)
        let spec = EnvSpec::for_kind(EnvKind::BmG);
        let ex = RadialGridExpert::fit(spec.expert_gains(), spec.dt.sqrt(), spec.horizon).unwrap();
        let t = spec.horizon - 2;
        let r_star = (spec.gamma * 2.0 * spec.dt / (1.0 - spec.gamma)).sqrt();
        assert!(!ex.stops(t, &StatePoint::new(vec![r_star - 0.01, 0.0])));
        assert!(ex.stops(t, &StatePoint::new(vec![0.0, r_star + 0.01])));
        // earlier decisions keep more option value
        assert!(!ex.stops(0, &StatePoint::new(vec![r_star + 0.01, 0.0])));
    }

    #[test]
    fn radial_grid_is_rotation_invariant() {
        let spec = EnvSpec::for_kind(EnvKind::BmgG);
        let ex = RadialGridExpert::fit(spec.expert_gains(), spec.dt.sqrt(), spec.horizon).unwrap();
        for t in [0, 10, 30] {
            for r in [0.3, 0.99, 1.01, 1.7] {
                let a = ex.stops(t, &StatePoint::new(vec![r, 0.0]));
                let b = ex.stops(t, &StatePoint::new(vec![r * 0.6, -r * 0.8]));
                assert_eq!(a, b, "t={t} r={r}");
            }
        }
    }

    #[test]
    fn dominated_stopping_never_stops() {
        let p = FiniteOSProblem {
            transition: right_shift(3),
            g: vec![1.0; 3],
            big_g: vec![0.0; 3],
            gamma: 0.9,
            horizon: 3,
        };
        let sol = backward_induction_exact(&p).unwrap();
        for s in 0..3 {
            assert!((sol.values[0][s] - 2.71).abs() < 1e-12);
            assert!((0..3).all(|t| !sol.stop_set[t][s]));
        }
    }

    #[test]
    fn dominant_stopping_stops_immediately() {
        let p = FiniteOSProblem {
            transition: right_shift(3),
            g: vec![0.0; 3],
            big_g: vec![10.0; 3],
            gamma: 0.9,
            horizon: 3,
        };
        let sol = backward_induction_exact(&p).unwrap();
        assert!(sol.values[0].iter().all(|&v| v == 10.0));
        assert!(sol.stop_set[0].iter().all(|&b| b));
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let p = FiniteOSProblem {
            transition: vec![vec![0.5, 0.4], vec![0.0, 1.0]],
            g: vec![0.0; 2],
            big_g: vec![0.0; 2],
            gamma: 0.9,
            horizon: 2,
        };
        assert!(backward_induction_exact(&p).is_err());
    }

    #[test]
    fn regression_with_dominant_stop_stops_at_zero() {
        let spec = EnvSpec::for_kind(EnvKind::BmG);
        let paths = crate::env::simulate_paths(&spec, 60, 3).unwrap();
        struct Huge;
        impl GainSpec for Huge {
            fn continuation_gain(&self, _: &StatePoint) -> f64 {
                0.0
            }
            fn stopping_gain(&self, _: &StatePoint) -> f64 {
                1e6
            }
            fn gamma(&self) -> f64 {
                0.99
            }
        }
        let labels = backward_induction_regression(&paths, Huge, 50).unwrap();
        assert!(labels.iter().all(|l| l.tau == Some(0) && l.len == 1));
        assert!(backward_induction_regression(&paths[..10], Huge, 50).is_err());
    }

    #[test]
    fn regression_on_deterministic_chain_is_exact() {
        let g = vec![0.1; 3];
        let big_g = vec![0.0, 1.0, 4.0];
        let p = FiniteOSProblem {
            transition: right_shift(3),
            g: g.clone(),
            big_g: big_g.clone(),
            gamma: 0.5,
            horizon: 3,
        };
        let sol = backward_induction_exact(&p).unwrap();
        // replay every start state many times; right-shift dynamics are deterministic
        let paths: Vec<RawPath> = (0..60)
            .map(|j| {
                let s0 = j % 3;
                let states = (0..=3)
                    .map(|t| StatePoint::new(vec![(s0 + t).min(2) as f64]))
                    .collect();
                RawPath {
                    states,
                    event_time: None,
                    rng_seed: 0,
                }
            })
            .collect();
        let expert = RegressionExpert::fit(&paths, Table { g, big_g, gamma: 0.5 }, 5).unwrap();
        for t in 0..3 {
            for s in 0..3 {
                let visited = paths.iter().any(|p| p.states[t].coords()[0] == s as f64);
                if visited {
                    assert_eq!(
                        expert.stops(t, &StatePoint::new(vec![s as f64])),
                        sol.stop_set[t][s],
                        "t={t} s={s}"
                    );
                }
            }
        }
    }

    #[test]
    fn cp_rule_is_two_after_event() {
        let spec = EnvSpec::for_kind(EnvKind::Cp1);
        let path = RawPath {
            states: (0..40).map(|x| StatePoint::new(vec![x as f64])).collect(),
            event_time: Some(30),
            rng_seed: 0,
        };
        let l = rule_based_stop(&path, &spec).unwrap();
        assert_eq!(l.tau, Some(32));
        let short = RawPath {
            states: path.states[..31].to_vec(),
            ..path
        };
        assert_eq!(rule_based_stop(&short, &spec).unwrap().tau, Some(30));
    }

    #[test]
    fn region_rules() {
        let spec = EnvSpec::for_kind(EnvKind::Radial);
        let inside = RawPath {
            states: vec![StatePoint::new(vec![0.0, 0.0]); 50],
            event_time: None,
            rng_seed: 0,
        };
        let l = rule_based_stop(&inside, &spec).unwrap();
        assert_eq!(l.tau, None);
        assert!(l.actions().iter().all(|a| *a == Action::Continue));

        let star = EnvSpec::for_kind(EnvKind::Star);
        let mut states = vec![StatePoint::new(vec![0.0, 0.0]); 20];
        states[7] = StatePoint::new(vec![5.0, 5.0]);
        let path = RawPath {
            states,
            event_time: Some(7),
            rng_seed: 0,
        };
        let l = rule_based_stop(&path, &star).unwrap();
        assert_eq!(l.tau, Some(7));
        let acts = l.actions();
        assert_eq!(acts.len(), 8);
        assert!(acts[..7].iter().all(|a| *a == Action::Continue));
        assert_eq!(acts[7], Action::Stop);
    }
}
