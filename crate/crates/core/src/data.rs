// SPDX-License-Identifier: MIT OR Apache-2.0

//! Expert transition datasets: stacking labeled paths into `(s, a, s')`
//! records with cemetery successors for stop actions, path-atomic splits,
//! CSV ingestion, and history-aware batch sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::env::{EnvSpec, RawPath};
use crate::error::{invalid, Error, Result};
use crate::oracle::ExpertLabel;
use crate::rng::{self, Stream};
use crate::smdp::{Action, StatePoint};

/// A path of learner-visible states with its expert actions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPath {
    pub path_id: usize,
    pub states: Vec<StatePoint>,
    pub actions: Vec<Action>,
    /// Reference event index (change point, ingested hazard row), if any.
    pub event_time: Option<usize>,
}

impl LabeledPath {
    pub fn from_raw(path_id: usize, raw: &RawPath, label: &ExpertLabel, spec: &EnvSpec) -> Result<Self> {
        if label.len > raw.len() {
            return Err(invalid(format!(
                "label covers {} states but path {path_id} has {}",
                label.len,
                raw.len()
            )));
        }
        let states = raw.states[..label.len]
            .iter()
            .enumerate()
            .map(|(t, s)| spec.featurize(s, t))
            .collect();
        Ok(LabeledPath {
            path_id,
            states,
            actions: label.actions(),
            event_time: raw.event_time,
        })
    }

    pub fn stop_time(&self) -> Option<usize> {
        self.actions.iter().position(|a| a.is_stop())
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub s: StatePoint,
    pub a: Action,
    pub s_next: StatePoint,
    pub path_id: usize,
    pub time_index: usize,
    pub confidence: f64,
    pub synthetic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    All,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::All => "all",
        })
    }
}

/// Stacked records of many paths with an offset table so that any record's
/// history prefix is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    records: Vec<TransitionRecord>,
    /// `offsets[i]..offsets[i + 1]` are the records of the `i`-th path.
    offsets: Vec<usize>,
    /// Index of the path owning each record.
    owner: Vec<usize>,
    pub split: SplitTag,
    dim: usize,
}

impl TrajectorySet {
    pub fn records(&self) -> &[TransitionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_paths(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn path_records(&self, i: usize) -> &[TransitionRecord] {
        &self.records[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn path_ids(&self) -> Vec<usize> {
        (0..self.n_paths())
            .map(|i| self.path_records(i)[0].path_id)
            .collect()
    }

    /// States `s_0..=s_t` of the record's path followed by its successor `s_{t+1}`
    /// (the cemetery for stop records).
    pub fn history(&self, idx: usize) -> Vec<&StatePoint> {
        let start = self.offsets[self.owner[idx]];
        let mut h: Vec<&StatePoint> = self.records[start..=idx].iter().map(|r| &r.s).collect();
        h.push(&self.records[idx].s_next);
        h
    }

    pub fn stop_count(&self) -> usize {
        self.records.iter().filter(|r| r.a.is_stop()).count()
    }

    fn from_groups(groups: Vec<Vec<TransitionRecord>>, split: SplitTag, dim: usize) -> Self {
        let mut records = Vec::new();
        let mut offsets = vec![0];
        let mut owner = Vec::new();
        for (i, g) in groups.into_iter().enumerate() {
            owner.extend(std::iter::repeat_n(i, g.len()));
            records.extend(g);
            offsets.push(records.len());
        }
        TrajectorySet {
            records,
            offsets,
            owner,
            split,
            dim,
        }
    }

    fn groups(&self) -> Vec<Vec<TransitionRecord>> {
        (0..self.n_paths())
            .map(|i| self.path_records(i).to_vec())
            .collect()
    }
}

/// Stacks labeled paths into transition records. Stop actions lead to the
/// zero cemetery; a trailing continue action without a successor is dropped.
pub fn preprocess(paths: &[LabeledPath]) -> Result<TrajectorySet> {
    let dim = paths
        .first()
        .map(LabeledPath::dim)
        .ok_or_else(|| invalid("no paths to preprocess"))?;
    let mut groups = Vec::with_capacity(paths.len());
    for p in paths {
        if p.states.len() != p.actions.len() {
            return Err(invalid(format!(
                "path {} has {} states but {} actions",
                p.path_id,
                p.states.len(),
                p.actions.len()
            )));
        }
        if p.states.iter().any(|s| s.dim() != dim) {
            return Err(invalid(format!("path {} changes state dimension", p.path_id)));
        }
        if let Some(stop) = p.stop_time() {
            if stop + 1 != p.len() {
                return Err(invalid(format!("path {} has labels after its stop", p.path_id)));
            }
        }
        let mut recs = Vec::with_capacity(p.len());
        for (t, (s, &a)) in p.states.iter().zip(&p.actions).enumerate() {
            let s_next = match a {
                Action::Stop => StatePoint::cemetery(dim),
                Action::Continue => match p.states.get(t + 1) {
                    Some(n) => n.clone(),
                    None => break,
                },
            };
            recs.push(TransitionRecord {
                s: s.clone(),
                a,
                s_next,
                path_id: p.path_id,
                time_index: t,
                confidence: 1.0,
                synthetic: false,
            });
        }
        if !recs.is_empty() {
            groups.push(recs);
        }
    }
    if groups.is_empty() {
        return Err(invalid("no transitions after preprocessing"));
    }
    Ok(TrajectorySet::from_groups(groups, SplitTag::All, dim))
}

/// Number of validation paths for a fraction (ties round to even).
pub fn val_count(n_paths: usize, val_frac: f64) -> usize {
    (n_paths as f64 * val_frac).round_ties_even() as usize
}

/// Seeded shuffle of path indices, then the first `val_count` go to validation.
pub fn split_indices(n_paths: usize, val_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(invalid(format!("val_frac must lie in (0,1), got {val_frac}")));
    }
    let n_val = val_count(n_paths, val_frac);
    if n_paths < 2 || n_val == 0 || n_val == n_paths {
        return Err(invalid(format!(
            "cannot split {n_paths} paths with val_frac {val_frac}"
        )));
    }
    let mut idx: Vec<usize> = (0..n_paths).collect();
    idx.shuffle(&mut rng::stream(seed));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    Ok((train, val))
}

/// Path-atomic train/validation split.
pub fn split(ts: &TrajectorySet, val_frac: f64, seed: u64) -> Result<(TrajectorySet, TrajectorySet)> {
    let (train_idx, val_idx) = split_indices(ts.n_paths(), val_frac, seed)?;
    let groups = ts.groups();
    let pick = |idx: &[usize]| idx.iter().map(|&i| groups[i].clone()).collect::<Vec<_>>();
    Ok((
        TrajectorySet::from_groups(pick(&train_idx), SplitTag::Train, ts.dim),
        TrajectorySet::from_groups(pick(&val_idx), SplitTag::Val, ts.dim),
    ))
}

/// Records used for training: the expert trajectories plus optional synthetic records.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub expert: TrajectorySet,
    pub synthetic: Vec<TransitionRecord>,
}

impl TrainingSet {
    pub fn new(expert: TrajectorySet) -> Self {
        TrainingSet {
            expert,
            synthetic: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.expert.len() + self.synthetic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn record(&self, i: usize) -> &TransitionRecord {
        let n = self.expert.len();
        if i < n {
            &self.expert.records[i]
        } else {
            &self.synthetic[i - n]
        }
    }

    pub fn history(&self, i: usize) -> Option<Vec<&StatePoint>> {
        (i < self.expert.len()).then(|| self.expert.history(i))
    }
}

/// A batch of record indices into a [`TrainingSet`], with optional histories.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub histories: Option<Vec<Vec<StatePoint>>>,
}

/// Uniform sample of `size` distinct records.
pub fn sample_batch(set: &TrainingSet, size: usize, need_history: bool, stream: &mut Stream) -> Result<Batch> {
    if size == 0 || size > set.len() {
        return Err(invalid(format!(
            "batch size {size} outside 1..={}",
            set.len()
        )));
    }
    let indices = rand::seq::index::sample(stream, set.len(), size).into_vec();
    make_batch(set, indices, need_history)
}

fn make_batch(set: &TrainingSet, indices: Vec<usize>, need_history: bool) -> Result<Batch> {
    let histories = if need_history {
        let mut hs = Vec::with_capacity(indices.len());
        for &i in &indices {
            let h = set
                .history(i)
                .ok_or_else(|| invalid("synthetic records carry no history"))?;
            hs.push(h.into_iter().cloned().collect());
        }
        Some(hs)
    } else {
        None
    };
    Ok(Batch { indices, histories })
}

/// Epoch-wise sampler: each epoch is one pass over a fresh permutation,
/// cut into `ceil(len / batch)` batches.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    stream: Stream,
    batch_size: usize,
}

impl EpochSampler {
    pub fn new(seed: u64, batch_size: usize) -> Self {
        EpochSampler {
            stream: rng::stream(seed),
            batch_size: batch_size.max(1),
        }
    }

    pub fn epoch(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut self.stream);
        perm.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

pub fn batch_from_indices(set: &TrainingSet, indices: Vec<usize>, need_history: bool) -> Result<Batch> {
    make_batch(set, indices, need_history)
}

// ---------------------------------------------------------------------------
// CSV

fn state_headers(dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("s_{i}")).collect()
}

/// Writes raw simulated paths: `path_id, t, s_0..s_{d-1}, event_time`.
pub fn write_paths_csv(path: &Path, paths: &[(usize, &RawPath)]) -> Result<()> {
    let dim = paths.first().map_or(1, |(_, p)| p.states[0].dim());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["path_id".to_string(), "t".to_string()];
    header.extend(state_headers(dim));
    header.push("event_time".into());
    w.write_record(&header)?;
    for (id, p) in paths {
        let ev = p.event_time.map(|e| e.to_string()).unwrap_or_default();
        for (t, s) in p.states.iter().enumerate() {
            let mut row = vec![id.to_string(), t.to_string()];
            row.extend(s.coords().iter().map(|c| format!("{c:?}")));
            row.push(ev.clone());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes labeled paths: `path_id, t, s_0..s_{d-1}, a, event_time`.
pub fn write_labeled_csv(path: &Path, paths: &[LabeledPath]) -> Result<()> {
    let dim = paths.first().map_or(1, LabeledPath::dim);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["path_id".to_string(), "t".to_string()];
    header.extend(state_headers(dim));
    header.push("a".into());
    header.push("event_time".into());
    w.write_record(&header)?;
    for p in paths {
        let ev = p.event_time.map(|e| e.to_string()).unwrap_or_default();
        for (t, (s, a)) in p.states.iter().zip(&p.actions).enumerate() {
            let mut row = vec![p.path_id.to_string(), t.to_string()];
            row.extend(s.coords().iter().map(|c| format!("{c:?}")));
            row.push(a.bit().to_string());
            row.push(ev.clone());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes synthetic records for audit: `s_*, a, confidence, synthetic`.
pub fn write_synthetic_csv(path: &Path, records: &[TransitionRecord]) -> Result<()> {
    let dim = records.first().map_or(1, |r| r.s.dim());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = state_headers(dim);
    header.extend(["a", "confidence", "synthetic"].map(String::from));
    w.write_record(&header)?;
    for r in records {
        let mut row: Vec<String> = r.s.coords().iter().map(|c| format!("{c:?}")).collect();
        row.push(r.a.bit().to_string());
        row.push(format!("{:?}", r.confidence));
        row.push(u8::from(r.synthetic).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| invalid(format!("bad number '{s}' in column {what}")))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| invalid(format!("bad integer '{s}' in column {what}")))
}

/// Reads a labeled-path CSV written by [`write_labeled_csv`].
pub fn read_labeled_csv(path: &Path) -> Result<Vec<LabeledPath>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid(format!("{}: missing column {name}", path.display())))
    };
    let (pid, tcol, acol) = (col("path_id")?, col("t")?, col("a")?);
    let ev_col = headers.iter().position(|h| h == "event_time");
    let s_cols: Vec<usize> = (0..)
        .map_while(|i| headers.iter().position(|h| h == format!("s_{i}")))
        .collect();
    if s_cols.is_empty() {
        return Err(invalid(format!("{}: no state columns", path.display())));
    }
    let mut out: Vec<LabeledPath> = Vec::new();
    for row in r.records() {
        let row = row?;
        let id = parse_usize(&row[pid], "path_id")?;
        let t = parse_usize(&row[tcol], "t")?;
        let coords = s_cols
            .iter()
            .map(|&c| parse_f64(&row[c], "s_*"))
            .collect::<Result<Vec<_>>>()?;
        let a = Action::from_bit(parse_usize(&row[acol], "a")? as u8)?;
        let ev = match ev_col.map(|c| row[c].trim().to_string()) {
            Some(s) if !s.is_empty() => Some(parse_usize(&s, "event_time")?),
            _ => None,
        };
        match out.last_mut() {
            Some(p) if p.path_id == id => {
                if t != p.len() {
                    return Err(invalid(format!("path {id}: time index {t} out of sequence")));
                }
                p.states.push(StatePoint::new(coords));
                p.actions.push(a);
            }
            _ => {
                if t != 0 {
                    return Err(invalid(format!("path {id} does not start at t=0")));
                }
                out.push(LabeledPath {
                    path_id: id,
                    states: vec![StatePoint::new(coords)],
                    actions: vec![a],
                    event_time: ev,
                });
            }
        }
    }
    Ok(out)
}

/// Column mapping of an external dataset.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
pub struct IngestSchema {
    pub file: std::path::PathBuf,
    pub path_column: String,
    pub time_column: String,
    pub feature_columns: Vec<String>,
    /// Non-zero on the row of the hazardous event.
    pub event_column: String,
    #[serde(default = "one")]
    pub downsample_every: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub paths: Vec<LabeledPath>,
    pub diagnostics: Vec<String>,
}

struct RawRow {
    time: f64,
    features: Vec<f64>,
    event: bool,
}

/// Reads an external path dataset, keeps every `downsample_every`-th row and
/// places the stop label on the last kept row at or before the event.
pub fn ingest_csv(schema: &IngestSchema) -> Result<IngestOutcome> {
    let fail = |reason: String| Error::Ingest {
        path: schema.file.clone(),
        reason,
    };
    if schema.downsample_every == 0 {
        return Err(fail("downsample_every must be >= 1".into()));
    }
    let mut r = csv::Reader::from_path(&schema.file)?;
    let headers = r.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| fail(format!("missing column '{name}'")))
    };
    let pid = find(&schema.path_column)?;
    let tcol = find(&schema.time_column)?;
    let ecol = find(&schema.event_column)?;
    let fcols = schema
        .feature_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    if fcols.is_empty() {
        return Err(fail("no feature columns".into()));
    }

    let mut groups: BTreeMap<String, Vec<RawRow>> = BTreeMap::new();
    let mut bad: BTreeMap<String, String> = BTreeMap::new();
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let key = row[pid].trim().to_string();
        let parsed = (|| -> Result<RawRow> {
            Ok(RawRow {
                time: parse_f64(&row[tcol], &schema.time_column)?,
                features: fcols
                    .iter()
                    .map(|&c| parse_f64(&row[c], &headers[c]))
                    .collect::<Result<_>>()?,
                event: parse_f64(&row[ecol], &schema.event_column)? != 0.0,
            })
        })();
        match parsed {
            Ok(rr) => groups.entry(key).or_default().push(rr),
            Err(e) => {
                bad.entry(key).or_insert(format!("row {}: {e}", line + 2));
            }
        }
    }

    let mut diagnostics = Vec::new();
    let mut paths = Vec::new();
    for (key, rows) in groups {
        if let Some(reason) = bad.get(&key) {
            diagnostics.push(format!("path {key}: skipped, {reason}"));
            continue;
        }
        if rows.windows(2).any(|w| w[1].time <= w[0].time) {
            diagnostics.push(format!("path {key}: skipped, time is not increasing"));
            continue;
        }
        let event = rows.iter().position(|r| r.event);
        let kept: Vec<usize> = (0..rows.len())
            .step_by(schema.downsample_every)
            .filter(|&i| event.is_none_or(|e| i <= e))
            .collect();
        if kept.is_empty() {
            diagnostics.push(format!("path {key}: skipped, no rows"));
            continue;
        }
        let states: Vec<StatePoint> = kept
            .iter()
            .map(|&i| StatePoint::new(rows[i].features.clone()))
            .collect();
        let mut actions = vec![Action::Continue; states.len()];
        if event.is_some() {
            *actions.last_mut().expect("non-empty") = Action::Stop;
        }
        let event_time = event.map(|_| states.len() - 1);
        paths.push(LabeledPath {
            path_id: paths.len(),
            states,
            actions,
            event_time,
        });
    }
    for key in bad.keys() {
        if !diagnostics.iter().any(|d| d.starts_with(&format!("path {key}:"))) {
            diagnostics.push(format!("path {key}: skipped, {}", bad[key]));
        }
    }
    if paths.is_empty() {
        return Err(fail(format!("no valid paths ({})", diagnostics.join("; "))));
    }
    Ok(IngestOutcome { paths, diagnostics })
}

/// Per-feature affine standardization fitted on a set of paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(paths: &[LabeledPath]) -> Result<Self> {
        let dim = paths.first().map(LabeledPath::dim).ok_or_else(|| invalid("no paths"))?;
        let all: Vec<&StatePoint> = paths.iter().flat_map(|p| &p.states).collect();
        let n = all.len() as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|j| all.iter().map(|s| s.coords()[j]).sum::<f64>() / n)
            .collect();
        let std = (0..dim)
            .map(|j| {
                let v = all.iter().map(|s| (s.coords()[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, paths: &mut [LabeledPath]) {
        for p in paths {
            for s in &mut p.states {
                let c = s
                    .coords()
                    .iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(x, (m, sd))| (x - m) / sd)
                    .collect();
                *s = StatePoint::new(c);
            }
        }
    }
}
