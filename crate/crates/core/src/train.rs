// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training loops for every algorithm variant, with per-epoch curves and
//! best-validation model selection.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{batch_from_indices, EpochSampler, TrainingSet, TrajectorySet, TransitionRecord};
use crate::error::{invalid, Error, Result};
use crate::eval::set_balanced_accuracy;
use crate::losses::{
    cross_entropy_loss, dynamics_loss, g_loss, iq_loss, IqBatch, IqParams, LossBreakdown, Phi,
};
use crate::model::{Algorithm, Model};
use crate::nn::{rows_to_array, Adam, GNet, MultiHeadNet, NetConfig, Schedule};
use crate::rng::derive_seed;
use crate::smdp::{discount_pow, soft_value_unchecked, Action, StatePoint};
use crate::smote::{build_synthetic_records, smote_continuation_records, smote_generate, SmoteConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub epsilon: Schedule,
    pub lr: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub c_reg: f64,
    pub smote: SmoteConfig,
    pub net: NetConfig,
    /// Keep the shared trunk fixed during the dynamics sub-step.
    pub freeze_trunk_in_dyn_step: bool,
    /// Model-based variants: predicted successors and the dynamics sub-step.
    /// Off reproduces the plain variant.
    pub dynamics_enabled: bool,
    /// Update `g_φ`; off keeps it at its initial parameters.
    pub train_g: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Iqs,
            gamma: 0.99,
            epsilon: Schedule { initial: 0.1, factor: 0.9999 },
            lr: Schedule { initial: 0.01, factor: 0.9999 },
            epochs: 200,
            batch_size: 128,
            c_reg: 0.5,
            smote: SmoteConfig::default(),
            net: NetConfig::default(),
            freeze_trunk_in_dyn_step: true,
            dynamics_enabled: true,
            train_g: true,
        }
    }
}

impl TrainConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        TrainConfig {
            algorithm,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        if !(self.epsilon.initial > 0.0 && self.epsilon.factor > 0.0) {
            return Err(invalid("epsilon schedule must be positive"));
        }
        if !(self.lr.initial > 0.0 && self.lr.factor > 0.0) {
            return Err(invalid("learning-rate schedule must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.c_reg > 0.0) {
            return Err(invalid("c_reg must be positive"));
        }
        self.smote.validate()
    }

    fn iq_params(&self, epsilon: f64) -> IqParams {
        IqParams {
            gamma: self.gamma,
            epsilon,
            phi: Phi { c_reg: self.c_reg },
        }
    }
}

/// Train and validation splits of the expert trajectories.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: TrajectorySet,
    pub val: TrajectorySet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochCurve {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_ba: f64,
    pub lr: f64,
    pub epsilon: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot of the epoch with the best validation balanced accuracy
    /// (earliest on ties), or the initial networks when no epoch ran.
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub best_val_ba: Option<f64>,
    pub curves: Vec<EpochCurve>,
}

/// A diverged run: the error plus the curves of the completed epochs.
#[derive(Debug)]
pub struct Diverged {
    pub error: Error,
    pub curves: Vec<EpochCurve>,
}

const SEED_NET: u64 = 1;
const SEED_GNET: u64 = 2;
const SEED_SAMPLER: u64 = 3;
const SEED_SMOTE: u64 = 4;

/// One training run: networks, optimizers and sampler owned together.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    cfg: TrainConfig,
    seed: u64,
    set: TrainingSet,
    val: &'a TrajectorySet,
    pub net: MultiHeadNet,
    pub gnet: Option<GNet>,
    opt_q: Adam,
    opt_p: Adam,
    opt_g: Option<Adam>,
    sampler: EpochSampler,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a TrainData, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let algo = cfg.algorithm;
        if data.train.is_empty() || data.val.is_empty() {
            return Err(invalid("training and validation sets must be non-empty"));
        }
        let d = data.train.dim();
        let input = d + usize::from(algo.augmented());
        let dyn_out = algo.model_based().then_some(input);
        let net = MultiHeadNet::new(input, &cfg.net.hidden, dyn_out, cfg.net.share_trunk, derive_seed(seed, SEED_NET))?;
        let gnet = if algo.augmented() {
            Some(GNet::new(d, &cfg.net.g_hidden, derive_seed(seed, SEED_GNET))?)
        } else {
            None
        };
        let mut set = TrainingSet::new(data.train.clone());
        if algo.uses_smote() {
            set.synthetic = synthesize(&data.train, cfg, derive_seed(seed, SEED_SMOTE))?;
        }
        let n = net.n_params();
        Ok(Trainer {
            cfg: cfg.clone(),
            seed,
            set,
            val: &data.val,
            opt_q: Adam::new(n),
            opt_p: Adam::new(n),
            opt_g: gnet.as_ref().map(|g| Adam::new(g.params.len())),
            net,
            gnet,
            sampler: EpochSampler::new(derive_seed(seed, SEED_SAMPLER), cfg.batch_size),
        })
    }

    pub fn synthetic(&self) -> &[TransitionRecord] {
        &self.set.synthetic
    }

    fn snapshot(&self, epoch: usize) -> Model {
        Model {
            algorithm: self.cfg.algorithm,
            net: self.net.clone(),
            gnet: self.gnet.clone(),
            gamma: self.cfg.gamma,
            seed: self.seed,
            epoch,
            lr: self.cfg.lr.at(epoch),
            epsilon: self.cfg.epsilon.at(epoch),
            alpha: self.alpha(epoch),
        }
    }

    fn alpha(&self, epoch: usize) -> f64 {
        if self.cfg.algorithm.confidence_weighted() {
            self.cfg.smote.alpha(epoch)
        } else {
            1.0
        }
    }

    pub fn run(mut self) -> std::result::Result<TrainOutcome, Box<Diverged>> {
        let mut curves = Vec::with_capacity(self.cfg.epochs);
        let mut best = self.snapshot(0);
        let mut best_epoch = None;
        let mut best_val = None;
        for epoch in 0..self.cfg.epochs {
            let result = self.epoch(epoch).and_then(|loss| {
                let model = self.snapshot(epoch);
                let val_ba = set_balanced_accuracy(&model, self.val)?;
                Ok((loss, model, val_ba))
            });
            let (loss, model, val_ba) = match result {
                Ok(r) => r,
                Err(error) => return Err(Box::new(Diverged { error, curves })),
            };
            curves.push(EpochCurve {
                epoch,
                loss,
                val_ba,
                lr: model.lr,
                epsilon: model.epsilon,
                alpha: model.alpha,
            });
            if best_val.is_none_or(|b| val_ba > b) {
                best_val = Some(val_ba);
                best_epoch = Some(epoch);
                best = model;
            }
        }
        Ok(TrainOutcome {
            best,
            best_epoch,
            best_val_ba: best_val,
            curves,
        })
    }

    /// One pass over the training records; returns batch-mean loss terms.
    pub fn epoch(&mut self, epoch: usize) -> Result<LossBreakdown> {
        let lr = self.cfg.lr.at(epoch);
        let eps = self.cfg.epsilon.at(epoch);
        let alpha = self.alpha(epoch);
        for r in &mut self.set.synthetic {
            r.confidence = alpha;
        }
        let batches = self.sampler.epoch(self.set.len());
        let mut sum = LossBreakdown::default();
        let n_batches = batches.len();
        for (b, idx) in batches.into_iter().enumerate() {
            let at = (epoch, b);
            let loss = match self.cfg.algorithm {
                a if a.is_classifier() => self.classifier_step(&idx, lr, at)?,
                a if a.augmented() => self.do_iqs_step(idx, eps, lr, at)?,
                a if a.model_based() && self.cfg.dynamics_enabled => {
                    let (batch, target) = self.iq_batch(&idx);
                    self.bilevel_step(&batch, &target, eps, lr, at)?
                }
                _ => {
                    let (batch, _) = self.iq_batch(&idx);
                    let mut grads = self.net.zero_grads();
                    let loss = iq_loss(&self.net, &batch, &self.cfg.iq_params(eps), &mut grads)?;
                    check_finite(&loss, at)?;
                    let ranges = self.net.q_ranges();
        self.opt_q.step(&mut self.net.params, &grads, lr, &ranges, at)?;
                    loss
                }
            };
            sum.add(&loss);
        }
        Ok(sum.scaled(1.0 / n_batches.max(1) as f64))
    }

    fn classifier_step(&mut self, idx: &[usize], lr: f64, at: (usize, usize)) -> Result<LossBreakdown> {
        let recs: Vec<&TransitionRecord> = idx.iter().map(|&i| self.set.record(i)).collect();
        let x = rows_to_array(&recs.iter().map(|r| r.s.coords().to_vec()).collect::<Vec<_>>());
        let actions: Vec<Action> = recs.iter().map(|r| r.a).collect();
        let weights = vec![1.0; recs.len()];
        let mut grads = self.net.zero_grads();
        let ce = cross_entropy_loss(&self.net, &x, &actions, &weights, &mut grads)?;
        let loss = LossBreakdown {
            total: ce,
            ..LossBreakdown::default()
        };
        check_finite(&loss, at)?;
        let ranges = self.net.q_ranges();
        self.opt_q.step(&mut self.net.params, &grads, lr, &ranges, at)?;
        Ok(loss)
    }

    /// IQ inputs of plain records plus the observed successors as dynamics targets.
    fn iq_batch(&self, idx: &[usize]) -> (IqBatch, Array2<f64>) {
        let recs: Vec<&TransitionRecord> = idx.iter().map(|&i| self.set.record(i)).collect();
        let x = rows_to_array(&recs.iter().map(|r| r.s.coords().to_vec()).collect::<Vec<_>>());
        let x_next = rows_to_array(&recs.iter().map(|r| r.s_next.coords().to_vec()).collect::<Vec<_>>());
        let synthetic: Vec<bool> = recs.iter().map(|r| r.synthetic).collect();
        let batch = IqBatch {
            x,
            x_next: x_next.clone(),
            actions: recs.iter().map(|r| r.a).collect(),
            weights: recs.iter().map(|r| r.confidence).collect(),
            norm: IqBatch::default_norm(&synthetic),
            synthetic,
        };
        (batch, x_next)
    }

    /// Q-step on the IQ objective with successors replaced by detached
    /// dynamics predictions, then the dynamics step on observed successors.
    fn bilevel_step(&mut self, batch: &IqBatch, target: &Array2<f64>, eps: f64, lr: f64, at: (usize, usize)) -> Result<LossBreakdown> {
        let predicted = self.predicted_successors(batch)?;
        let iq_batch = IqBatch {
            x_next: predicted,
            ..batch.clone()
        };
        let mut grads = self.net.zero_grads();
        let mut loss = iq_loss(&self.net, &iq_batch, &self.cfg.iq_params(eps), &mut grads)?;
        check_finite(&loss, at)?;
        let ranges = self.net.q_ranges();
        self.opt_q.step(&mut self.net.params, &grads, lr, &ranges, at)?;

        let mut grads = self.net.zero_grads();
        let dyn_loss = dynamics_loss(&self.net, &batch.x, target, &batch.actions, &mut grads)?;
        if !dyn_loss.is_finite() {
            return Err(divergence(at, "dynamics loss"));
        }
        if batch.actions.iter().any(|a| !a.is_stop()) {
            let ranges = self.net.dyn_ranges(!self.cfg.freeze_trunk_in_dyn_step);
            self.opt_p.step(&mut self.net.params, &grads, lr, &ranges, at)?;
        }
        loss.dyn_loss = dyn_loss;
        loss.total += dyn_loss;
        Ok(loss)
    }

    /// Dynamics-head outputs for continue rows, zero rows for stops.
    fn predicted_successors(&self, batch: &IqBatch) -> Result<Array2<f64>> {
        let c = self.net.forward(batch.x.clone())?;
        let mut pred = c
            .dynamics
            .ok_or_else(|| invalid("model-based step without a dynamics head"))?;
        for (i, a) in batch.actions.iter().enumerate() {
            if a.is_stop() {
                pred.row_mut(i).fill(0.0);
            }
        }
        Ok(pred)
    }

    fn do_iqs_step(&mut self, idx: Vec<usize>, eps: f64, lr: f64, at: (usize, usize)) -> Result<LossBreakdown> {
        let gamma = self.cfg.gamma;
        let gnet = self.gnet.as_ref().ok_or_else(|| invalid("augmented step without g network"))?;
        let batch = batch_from_indices(&self.set, idx, true)?;
        let histories = batch.histories.as_ref().ok_or_else(|| invalid("batch without histories"))?;
        let aug = augment(gnet, histories, gamma)?;
        let n = batch.indices.len();
        let recs: Vec<&TransitionRecord> = batch.indices.iter().map(|&i| self.set.record(i)).collect();
        let actions: Vec<Action> = recs.iter().map(|r| r.a).collect();
        let base = rows_to_array(&recs.iter().map(|r| r.s.coords().to_vec()).collect::<Vec<_>>());

        let mut rows: Vec<usize> = (0..n).collect();
        if self.cfg.algorithm.local_bootstrap() {
            rows = local_bootstrap(&actions);
        }
        let x = rows_to_array(&rows.iter().map(|&i| aug.s[i].clone()).collect::<Vec<_>>());
        let x_next = rows_to_array(&rows.iter().map(|&i| aug.s_next[i].clone()).collect::<Vec<_>>());
        let full = IqBatch {
            x,
            x_next: x_next.clone(),
            actions: rows.iter().map(|&i| actions[i]).collect(),
            weights: vec![1.0; rows.len()],
            synthetic: vec![false; rows.len()],
            norm: rows.len() as f64,
        };

        // g targets from the pre-update networks on the original rows
        let orig = rows_to_array(&aug.s);
        let c = self.net.forward(orig)?;
        let pred = c.dynamics.as_ref().ok_or_else(|| invalid("augmented step without dynamics head"))?;
        let cn = self.net.forward(pred.clone())?;
        let g_target: Vec<f64> = (0..n)
            .map(|i| c.q[[i, 1]] - gamma * soft_value_unchecked(cn.q[[i, 0]], cn.q[[i, 1]], eps) - aug.y_minus[i])
            .collect();

        let mut loss = self.bilevel_step(&full, &x_next, eps, lr, at)?;

        if self.cfg.train_g {
            let gnet = self.gnet.as_mut().expect("checked above");
            let mut grads = vec![0.0; gnet.params.len()];
            let gl = g_loss(gnet, &base, &g_target, &mut grads)?;
            if !gl.is_finite() {
                return Err(divergence(at, "g loss"));
            }
            let all = 0..gnet.params.len();
            self.opt_g
                .as_mut()
                .expect("g optimizer")
                .step(&mut gnet.params, &grads, lr, &[all], at)?;
            loss.g_loss = gl;
            loss.total += gl;
        }
        Ok(loss)
    }
}

/// Runs one configured training job.
pub fn train(cfg: &TrainConfig, data: &TrainData, seed: u64) -> std::result::Result<TrainOutcome, Box<Diverged>> {
    match Trainer::new(cfg, data, seed) {
        Ok(t) => t.run(),
        Err(error) => Err(Box::new(Diverged { error, curves: Vec::new() })),
    }
}

fn check_finite(loss: &LossBreakdown, at: (usize, usize)) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(divergence(at, "non-finite loss"))
    }
}

fn divergence(at: (usize, usize), what: &str) -> Error {
    Error::Divergence {
        epoch: at.0,
        batch: at.1,
        what: what.to_string(),
    }
}

/// Synthetic stop records (and optionally continue records) from the train split.
fn synthesize(train: &TrajectorySet, cfg: &TrainConfig, seed: u64) -> Result<Vec<TransitionRecord>> {
    let stops: Vec<StatePoint> = train
        .records()
        .iter()
        .filter(|r| r.a.is_stop())
        .map(|r| r.s.clone())
        .collect();
    let n_cont = train.len() - stops.len();
    let count = cfg.smote.synthetic_count(stops.len(), n_cont);
    let alpha0 = if cfg.algorithm.confidence_weighted() { cfg.smote.alpha0 } else { 1.0 };
    let mut out = build_synthetic_records(&smote_generate(&stops, &cfg.smote, count, seed)?, alpha0);
    if cfg.smote.synthesize_continuation {
        let conts: Vec<&TransitionRecord> = train.records().iter().filter(|r| !r.a.is_stop()).collect();
        out.extend(smote_continuation_records(
            &conts,
            cfg.smote.k_neighbors,
            count,
            derive_seed(seed, 1),
            alpha0,
        )?);
    }
    Ok(out)
}

/// Augmented inputs of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub s: Vec<Vec<f64>>,
    pub s_next: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub y_minus: Vec<f64>,
}

/// Builds `(s, y)` and `(s', y')` from each record's history
/// `s_0..=s_t, s_{t+1}` with `y = Σ_{k≤t} γ^k g(s_k)`,
/// `y⁻ = y − γ^t g(s_t)` and `y' = y + γ^{t+1} g(s_{t+1})`. Cemetery
/// successors stay all-zero.
pub fn augment(gnet: &GNet, histories: &[Vec<StatePoint>], gamma: f64) -> Result<Augmented> {
    let all: Vec<&StatePoint> = histories.iter().flatten().collect();
    let gains = gnet.gains(&all)?;
    let mut out = Augmented {
        s: Vec::with_capacity(histories.len()),
        s_next: Vec::with_capacity(histories.len()),
        y: Vec::with_capacity(histories.len()),
        y_minus: Vec::with_capacity(histories.len()),
    };
    let mut off = 0;
    for h in histories {
        if h.len() < 2 {
            return Err(invalid("history must hold at least the state and its successor"));
        }
        let t = h.len() - 2;
        let g = &gains[off..off + h.len()];
        off += h.len();
        let mut y = 0.0;
        for (k, v) in g[..=t].iter().enumerate() {
            y += discount_pow(gamma, k) * v;
        }
        let y_minus = if t == 0 { 0.0 } else { y - discount_pow(gamma, t) * g[t] };
        let mut s = h[t].coords().to_vec();
        s.push(y);
        let succ = &h[t + 1];
        let s_next = if succ.is_cemetery() {
            vec![0.0; s.len()]
        } else {
            let mut v = succ.coords().to_vec();
            v.push(y + discount_pow(gamma, t + 1) * g[t + 1]);
            v
        };
        out.s.push(s);
        out.s_next.push(s_next);
        out.y.push(y);
        out.y_minus.push(y_minus);
    }
    Ok(out)
}

/// Row order after duplicating stop rows cyclically until they are at least
/// as many as the continue rows. Batches without stops are left unchanged.
pub fn local_bootstrap(actions: &[Action]) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..actions.len()).collect();
    let stops: Vec<usize> = rows.iter().copied().filter(|&i| actions[i].is_stop()).collect();
    if stops.is_empty() {
        return rows;
    }
    let n_cont = actions.len() - stops.len();
    let mut k = 0;
    while stops.len() + k < n_cont {
        rows.push(stops[k % stops.len()]);
        k += 1;
    }
    rows
}
