// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stopping-region recovery, balanced accuracy, time-to-event trade-off
//! metrics, and Q-surface / decision-boundary exports.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{LabeledPath, TrajectorySet};
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::smdp::{stop_decision, QPair, StatePoint};

/// Confusion counts with stop as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.is_empty() {
            return Err(invalid("no labels to score"));
        }
        if pred.len() != truth.len() {
            return Err(invalid(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// `(TPR + TNR) / 2`; a rate with an empty denominator counts as 0.
    pub fn balanced_accuracy(&self) -> f64 {
        let rate = |hit: usize, miss: usize| {
            if hit + miss == 0 {
                0.0
            } else {
                hit as f64 / (hit + miss) as f64
            }
        };
        (rate(self.tp, self.fn_) + rate(self.tn, self.fp)) / 2.0
    }
}

pub fn balanced_accuracy(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Ok(Confusion::from_labels(pred, truth)?.balanced_accuracy())
}

/// Index of the first stop label.
pub fn first_stop(labels: &[bool]) -> Option<usize> {
    labels.iter().position(|&s| s)
}

/// `(m_tte, m_emr)`: a path is missed when `τ̂` is absent or later than its
/// reference; `m_tte` averages `T_ref − τ̂` over the rest and is `None` when
/// every path is missed.
pub fn tradeoff_metrics(reference: &[usize], predicted: &[Option<usize>]) -> Result<(Option<f64>, f64)> {
    if reference.is_empty() {
        return Err(invalid("no paths for trade-off metrics"));
    }
    if reference.len() != predicted.len() {
        return Err(invalid("reference and prediction counts differ"));
    }
    let mut lead = Vec::new();
    for (&r, p) in reference.iter().zip(predicted) {
        if let Some(t) = *p {
            if t <= r {
                lead.push((r - t) as f64);
            }
        }
    }
    let misses = reference.len() - lead.len();
    let m_tte = (!lead.is_empty()).then(|| lead.iter().sum::<f64>() / lead.len() as f64);
    Ok((m_tte, misses as f64 / reference.len() as f64))
}

/// Greedy stop labels of a bare-state model at arbitrary states.
pub fn recover_region(model: &Model, states: &[StatePoint]) -> Result<Vec<bool>> {
    let rows: Vec<Vec<f64>> = states.iter().map(|s| s.coords().to_vec()).collect();
    Ok(model.q_pairs(&rows)?.into_iter().map(stop_decision).collect())
}

/// Greedy stop labels along a path from `t = 0`, rolling `y` for augmented models.
pub fn recover_path(model: &Model, states: &[StatePoint]) -> Result<Vec<bool>> {
    model.path_decisions(states)
}

/// Predicted labels for every record of a trajectory set, in record order.
pub fn predict_set(model: &Model, set: &TrajectorySet) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(set.len());
    for i in 0..set.n_paths() {
        let states: Vec<StatePoint> = set.path_records(i).iter().map(|r| r.s.clone()).collect();
        out.extend(recover_path(model, &states)?);
    }
    Ok(out)
}

pub fn set_balanced_accuracy(model: &Model, set: &TrajectorySet) -> Result<f64> {
    let pred = predict_set(model, set)?;
    let truth: Vec<bool> = set.records().iter().map(|r| r.a.is_stop()).collect();
    balanced_accuracy(&pred, &truth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub balanced_accuracy: f64,
    pub m_tte: Option<f64>,
    pub m_emr: f64,
    /// Paths that entered the trade-off metrics (those with a reference time).
    pub n_reference_paths: usize,
}

/// Scores a model on labeled paths. Decisions cover the states that carry a
/// transition record; the reference time of a path is its event index when
/// present, otherwise the expert stop.
pub fn evaluate_paths(model: &Model, paths: &[LabeledPath]) -> Result<EvalReport> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut refs = Vec::new();
    let mut taus = Vec::new();
    for p in paths {
        let n = match p.stop_time() {
            Some(t) => t + 1,
            None => p.len().saturating_sub(1),
        };
        if n == 0 {
            continue;
        }
        let labels = recover_path(model, &p.states[..n])?;
        if let Some(r) = p.event_time.or(p.stop_time()) {
            refs.push(r);
            taus.push(first_stop(&labels));
        }
        pred.extend_from_slice(&labels);
        truth.extend(p.actions[..n].iter().map(|a| a.is_stop()));
    }
    let confusion = Confusion::from_labels(&pred, &truth)?;
    let (m_tte, m_emr) = if refs.is_empty() {
        (None, 0.0)
    } else {
        tradeoff_metrics(&refs, &taus)?
    };
    Ok(EvalReport {
        confusion,
        balanced_accuracy: confusion.balanced_accuracy(),
        m_tte,
        m_emr,
        n_reference_paths: refs.len(),
    })
}

// ---------------------------------------------------------------------------
// Surfaces

/// Anything that can produce Q pairs on a 2-D grid at time `t`.
pub trait QFunction {
    fn state_dim(&self) -> usize;
    fn q_at(&self, points: &[[f64; 2]], t: usize) -> Result<Vec<QPair>>;
}

/// Adapts a trained model to the grid: optional `t / horizon` feature, and a
/// fixed `y` input for augmented models.
#[derive(Debug, Clone)]
pub struct ModelSurface<'a> {
    pub model: &'a Model,
    pub time_horizon: Option<usize>,
    pub fixed_y: f64,
}

impl QFunction for ModelSurface<'_> {
    fn state_dim(&self) -> usize {
        let extra = usize::from(self.time_horizon.is_some()) + usize::from(self.model.is_augmented());
        self.model.net.input_dim().saturating_sub(extra)
    }

    fn q_at(&self, points: &[[f64; 2]], t: usize) -> Result<Vec<QPair>> {
        let rows: Vec<Vec<f64>> = points
            .iter()
            .map(|p| {
                let mut r = p.to_vec();
                if let Some(h) = self.time_horizon {
                    r.push(t as f64 / h as f64);
                }
                if self.model.is_augmented() {
                    r.push(self.fixed_y);
                }
                r
            })
            .collect();
        let c = self.model.net.forward_rows(&rows)?;
        Ok(c.q.rows().into_iter().map(|r| QPair::new(r[0], r[1])).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn square(half_width: f64, n: usize) -> Self {
        GridSpec {
            x_min: -half_width,
            x_max: half_width,
            y_min: -half_width,
            y_max: half_width,
            nx: n,
            ny: n,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 || !(self.x_max > self.x_min) || !(self.y_max > self.y_min) {
            return Err(invalid("grid needs at least 2×2 nodes over a non-empty box"));
        }
        Ok(())
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + (self.x_max - self.x_min) * i as f64 / (self.nx - 1) as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        self.y_min + (self.y_max - self.y_min) * j as f64 / (self.ny - 1) as f64
    }

    /// Larger of the two node spacings.
    pub fn cell(&self) -> f64 {
        ((self.x_max - self.x_min) / (self.nx - 1) as f64).max((self.y_max - self.y_min) / (self.ny - 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceRow {
    pub x: f64,
    pub y: f64,
    pub q_stop: f64,
    pub q_continue: f64,
}

impl SurfaceRow {
    pub fn diff(&self) -> f64 {
        self.q_stop - self.q_continue
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub t: usize,
    /// Row-major over `(j, i)`: `y` outer, `x` inner.
    pub rows: Vec<SurfaceRow>,
    pub boundary: Vec<Vec<[f64; 2]>>,
}

/// Evaluates Q on the grid at each time and extracts the `Q₀ − Q₁ = 0`
/// contour. `normalize` shifts both heads by a common centre and divides by a
/// common positive scale, which leaves the sign of `Q₀ − Q₁` untouched.
pub fn export_surfaces(q: &dyn QFunction, grid: &GridSpec, times: &[usize], normalize: bool) -> Result<Vec<Surface>> {
    if q.state_dim() != 2 {
        return Err(invalid(format!(
            "surface export needs a 2-D state space, got {}",
            q.state_dim()
        )));
    }
    grid.validate()?;
    let mut points = Vec::with_capacity(grid.nx * grid.ny);
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            points.push([grid.x(i), grid.y(j)]);
        }
    }
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let qs = q.q_at(&points, t)?;
        let mut rows: Vec<SurfaceRow> = points
            .iter()
            .zip(&qs)
            .map(|(p, q)| SurfaceRow {
                x: p[0],
                y: p[1],
                q_stop: q.q_stop,
                q_continue: q.q_continue,
            })
            .collect();
        if normalize {
            centre_normalize(&mut rows);
        }
        let field: Vec<f64> = rows.iter().map(SurfaceRow::diff).collect();
        let boundary = marching_squares(&field, grid);
        out.push(Surface { t, rows, boundary });
    }
    Ok(out)
}

fn centre_normalize(rows: &mut [SurfaceRow]) {
    let n = (2 * rows.len()) as f64;
    let centre = rows.iter().map(|r| r.q_stop + r.q_continue).sum::<f64>() / n;
    let scale = rows
        .iter()
        .flat_map(|r| [(r.q_stop - centre).abs(), (r.q_continue - centre).abs()])
        .fold(0.0, f64::max);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    for r in rows {
        r.q_stop = (r.q_stop - centre) / scale;
        r.q_continue = (r.q_continue - centre) / scale;
    }
}

/// Edge identity: `(0, i, j)` joins nodes `(i,j)`–`(i+1,j)`, `(1, i, j)` joins `(i,j)`–`(i,j+1)`.
type EdgeId = (u8, usize, usize);

/// Zero-level polylines of a scalar field sampled on the grid (row-major,
/// `y` outer). Saddle cells are resolved by the cell-centre average.
pub fn marching_squares(field: &[f64], grid: &GridSpec) -> Vec<Vec<[f64; 2]>> {
    let (nx, ny) = (grid.nx, grid.ny);
    let f = |i: usize, j: usize| field[j * nx + i];
    let inside = |v: f64| v >= 0.0;
    let crossing = |e: EdgeId| -> [f64; 2] {
        let (a, b, pa, pb) = match e {
            (0, i, j) => (f(i, j), f(i + 1, j), [grid.x(i), grid.y(j)], [grid.x(i + 1), grid.y(j)]),
            (_, i, j) => (f(i, j), f(i, j + 1), [grid.x(i), grid.y(j)], [grid.x(i), grid.y(j + 1)]),
        };
        let u = if a == b { 0.5 } else { a / (a - b) };
        [pa[0] + u * (pb[0] - pa[0]), pa[1] + u * (pb[1] - pa[1])]
    };
    let mut segments: Vec<(EdgeId, EdgeId)> = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let v = [f(i, j), f(i + 1, j), f(i + 1, j + 1), f(i, j + 1)];
            let code = v.iter().enumerate().fold(0u8, |acc, (k, &x)| acc | (u8::from(inside(x)) << k));
            // cell edges: bottom, right, top, left
            let bottom = (0, i, j);
            let right = (1, i + 1, j);
            let top = (0, i, j + 1);
            let left = (1, i, j);
            let centre_in = inside(v.iter().sum::<f64>() / 4.0);
            let segs: &[(EdgeId, EdgeId)] = match code {
                0 | 15 => &[],
                1 | 14 => &[(left, bottom)],
                2 | 13 => &[(bottom, right)],
                3 | 12 => &[(left, right)],
                4 | 11 => &[(right, top)],
                6 | 9 => &[(bottom, top)],
                7 | 8 => &[(left, top)],
                5 => {
                    if centre_in {
                        &[(left, top), (bottom, right)]
                    } else {
                        &[(left, bottom), (right, top)]
                    }
                }
                10 => {
                    if centre_in {
                        &[(left, bottom), (right, top)]
                    } else {
                        &[(left, top), (bottom, right)]
                    }
                }
                _ => unreachable!("4-bit code"),
            };
            segments.extend_from_slice(segs);
        }
    }
    chain_segments(&segments)
        .into_iter()
        .map(|edges| edges.into_iter().map(crossing).collect())
        .collect()
}

/// Joins segments sharing an edge crossing into polylines (closed loops
/// repeat their first vertex at the end).
fn chain_segments(segments: &[(EdgeId, EdgeId)]) -> Vec<Vec<EdgeId>> {
    let mut adj: HashMap<EdgeId, Vec<usize>> = HashMap::new();
    for (k, (a, b)) in segments.iter().enumerate() {
        adj.entry(*a).or_default().push(k);
        adj.entry(*b).or_default().push(k);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let other = |k: usize, e: EdgeId| if segments[k].0 == e { segments[k].1 } else { segments[k].0 };
    let walk = |start: EdgeId, used: &mut Vec<bool>| {
        let mut line = vec![start];
        let mut cur = start;
        while let Some(&k) = adj[&cur].iter().find(|&&k| !used[k]) {
            used[k] = true;
            cur = other(k, cur);
            line.push(cur);
        }
        line
    };
    // open chains first, starting from endpoints of degree one, in segment order
    for (a, b) in segments {
        for e in [*a, *b] {
            if adj[&e].len() == 1 && adj[&e].iter().any(|&k| !used[k]) {
                lines.push(walk(e, &mut used));
            }
        }
    }
    for k in 0..segments.len() {
        if !used[k] {
            lines.push(walk(segments[k].0, &mut used));
        }
    }
    lines
}

pub fn write_surface_csv(path: &Path, s: &Surface) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", "y", "q_stop", "q_continue", "q_diff"])?;
    for r in &s.rows {
        w.write_record([
            s.t.to_string(),
            r.x.to_string(),
            r.y.to_string(),
            r.q_stop.to_string(),
            r.q_continue.to_string(),
            r.diff().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long format: one vertex per row.
pub fn write_boundaries_csv(path: &Path, surfaces: &[Surface]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "polyline", "vertex", "x", "y"])?;
    for s in surfaces {
        for (k, line) in s.boundary.iter().enumerate() {
            for (v, p) in line.iter().enumerate() {
                w.write_record([
                    s.t.to_string(),
                    k.to_string(),
                    v.to_string(),
                    p[0].to_string(),
                    p[1].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
