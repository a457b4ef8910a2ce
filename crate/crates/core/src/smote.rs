// SPDX-License-Identifier: MIT OR Apache-2.0

//! SMOTE oversampling of the stop class and the confidence schedule of
//! CS-SMOTE.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TransitionRecord;
use crate::error::{invalid, Result};
use crate::rng;
use crate::smdp::{Action, StatePoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticCount {
    /// Generate until the stop class matches the continue class.
    Balance,
    Exact(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoteConfig {
    pub k_neighbors: usize,
    pub n_synthetic: SyntheticCount,
    pub alpha0: f64,
    pub alpha_decay: f64,
    /// Also synthesize continuation transitions (off by default).
    pub synthesize_continuation: bool,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        SmoteConfig {
            k_neighbors: 12,
            n_synthetic: SyntheticCount::Balance,
            alpha0: 0.99,
            alpha_decay: 0.95,
            synthesize_continuation: false,
        }
    }
}

impl SmoteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(invalid("k_neighbors must be >= 1"));
        }
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return Err(invalid("alpha0 must lie in (0,1]"));
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay <= 1.0) {
            return Err(invalid("alpha_decay must lie in (0,1]"));
        }
        Ok(())
    }

    /// Confidence of synthetic records at `epoch`: `α₀·decay^epoch`.
    pub fn alpha(&self, epoch: usize) -> f64 {
        self.alpha0 * self.alpha_decay.powi(epoch as i32)
    }

    /// Number of stop records to add given the class counts.
    pub fn synthetic_count(&self, n_stop: usize, n_continue: usize) -> usize {
        match self.n_synthetic {
            SyntheticCount::Balance => n_continue.saturating_sub(n_stop),
            SyntheticCount::Exact(n) => n,
        }
    }
}

/// Minority points with their `k` nearest minority neighbours (Euclidean).
#[derive(Debug, Clone)]
pub struct Smote<'a> {
    points: &'a [Vec<f64>],
    neighbors: Vec<Vec<usize>>,
}

impl<'a> Smote<'a> {
    pub fn new(points: &'a [Vec<f64>], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        if points.len() <= k {
            return Err(invalid(format!(
                "SMOTE needs more than k = {k} minority points, got {}",
                points.len()
            )));
        }
        let neighbors = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut d: Vec<(f64, usize)> = points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, q)| (p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(), j))
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect();
        Ok(Smote { points, neighbors })
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// `x_i + u·(x_j − x_i)`.
    pub fn interpolate(&self, i: usize, j: usize, u: f64) -> Vec<f64> {
        lerp(&self.points[i], &self.points[j], u)
    }

    /// Draws `(base, neighbour, u)` triples.
    pub fn draw(&self, rng: &mut rng::Stream) -> (usize, usize, f64) {
        let i = rng.random_range(0..self.points.len());
        let nb = &self.neighbors[i];
        let j = nb[rng.random_range(0..nb.len())];
        let u: f64 = rng.random();
        (i, j, u)
    }

    pub fn generate(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(seed);
        (0..count)
            .map(|_| {
                let (i, j, u) = self.draw(&mut rng);
                self.interpolate(i, j, u)
            })
            .collect()
    }
}

fn lerp(a: &[f64], b: &[f64], u: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + u * (y - x)).collect()
}

/// Synthetic minority states interpolated between stop-class neighbours.
pub fn smote_generate(minority: &[StatePoint], cfg: &SmoteConfig, count: usize, seed: u64) -> Result<Vec<StatePoint>> {
    cfg.validate()?;
    let pts: Vec<Vec<f64>> = minority.iter().map(|s| s.coords().to_vec()).collect();
    let smote = Smote::new(&pts, cfg.k_neighbors)?;
    Ok(smote
        .generate(count, seed)
        .into_iter()
        .map(StatePoint::new)
        .collect())
}

/// Stop records `(x, 0, Δ)` carrying confidence `alpha`.
pub fn build_synthetic_records(points: &[StatePoint], alpha: f64) -> Vec<TransitionRecord> {
    points
        .iter()
        .map(|p| TransitionRecord {
            s: p.clone(),
            a: Action::Stop,
            s_next: StatePoint::cemetery(p.dim()),
            path_id: usize::MAX,
            time_index: 0,
            confidence: alpha,
            synthetic: true,
        })
        .collect()
}

/// Continue records interpolated jointly in `(s, s')` between neighbouring
/// expert continuation transitions.
pub fn smote_continuation_records(
    records: &[&TransitionRecord],
    k: usize,
    count: usize,
    seed: u64,
    alpha: f64,
) -> Result<Vec<TransitionRecord>> {
    let pts: Vec<Vec<f64>> = records.iter().map(|r| r.s.coords().to_vec()).collect();
    let smote = Smote::new(&pts, k)?;
    let mut rng = rng::stream(seed);
    Ok((0..count)
        .map(|_| {
            let (i, j, u) = smote.draw(&mut rng);
            TransitionRecord {
                s: StatePoint::new(smote.interpolate(i, j, u)),
                a: Action::Continue,
                s_next: StatePoint::new(lerp(records[i].s_next.coords(), records[j].s_next.coords(), u)),
                path_id: usize::MAX,
                time_index: records[i].time_index,
                confidence: alpha,
                synthetic: true,
            }
        })
        .collect())
}
