// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training objectives with their gradients wrt the network outputs.
//!
//! Each objective comes in two layers: a pure function of output tables
//! (`*_terms`) returning the loss and `∂loss/∂outputs`, and a wrapper that runs
//! the network forward, backpropagates, and accumulates parameter gradients.
//! All losses are minimized, so the IQ objective is returned negated.

use ndarray::{Array2, ArrayView2};

use crate::error::{invalid, Result};
use crate::nn::{GNet, MultiHeadNet};
use crate::smdp::{boltzmann_unchecked, soft_value_unchecked, Action};

/// χ²-regularized concave link `φ(x) = x − x²/(4c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phi {
    pub c_reg: f64,
}

impl Phi {
    pub fn value(&self, x: f64) -> f64 {
        x - x * x / (4.0 * self.c_reg)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        1.0 - x / (2.0 * self.c_reg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IqParams {
    pub gamma: f64,
    pub epsilon: f64,
    pub phi: Phi,
}

/// Per-batch loss terms. `total` is the minimized quantity.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub iq_term: f64,
    pub value_term: f64,
    pub fake_term: f64,
    pub dyn_loss: f64,
    pub g_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.iq_term, self.value_term, self.fake_term, self.dyn_loss, self.g_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.iq_term += o.iq_term;
        self.value_term += o.value_term;
        self.fake_term += o.fake_term;
        self.dyn_loss += o.dyn_loss;
        self.g_loss += o.g_loss;
        self.total += o.total;
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            iq_term: self.iq_term * k,
            value_term: self.value_term * k,
            fake_term: self.fake_term * k,
            dyn_loss: self.dyn_loss * k,
            g_loss: self.g_loss * k,
            total: self.total * k,
        }
    }
}

/// Inputs of the IQ objective for one batch. `x_next` rows of stop records
/// are ignored (cemetery successors have zero value).
#[derive(Debug, Clone)]
pub struct IqBatch {
    pub x: Array2<f64>,
    pub x_next: Array2<f64>,
    pub actions: Vec<Action>,
    /// 1 for expert records, the confidence α for synthetic ones.
    pub weights: Vec<f64>,
    pub synthetic: Vec<bool>,
    /// Divisor of both sums: the number of expert records in the batch.
    pub norm: f64,
}

impl IqBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Expert count, or the batch size when the batch holds only synthetics.
    pub fn default_norm(synthetic: &[bool]) -> f64 {
        let n = synthetic.iter().filter(|s| !**s).count();
        if n == 0 {
            synthetic.len() as f64
        } else {
            n as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct IqEval {
    pub loss: LossBreakdown,
    pub d_q: Array2<f64>,
    pub d_q_next: Array2<f64>,
}

/// Negated IQ objective over Q tables at `s` and `s'`:
///
/// `J = (1/N) Σ w·[φ(Q(s,a) − γ·m·V(s')) − (V(s) − γ·m·V(s'))]`
///
/// with `m = 0` for stop records, `V` the soft value at temperature ε, and
/// the synthetic part of the sum reported as `fake_term`.
pub fn iq_terms(q: ArrayView2<f64>, q_next: ArrayView2<f64>, batch: &IqBatch, p: &IqParams) -> Result<IqEval> {
    let n = batch.len();
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    if q.nrows() != n || q_next.nrows() != n || batch.weights.len() != n || batch.synthetic.len() != n {
        return Err(invalid("batch arrays have inconsistent lengths"));
    }
    if !(batch.norm > 0.0) {
        return Err(invalid("batch normalizer must be positive"));
    }
    let mut d_q = Array2::zeros((n, 2));
    let mut d_q_next = Array2::zeros((n, 2));
    let (mut iq, mut val, mut fake) = (0.0, 0.0, 0.0);
    let eps = p.epsilon;
    for i in 0..n {
        let a = batch.actions[i];
        let w = batch.weights[i] / batch.norm;
        let (q0, q1) = (q[[i, 0]], q[[i, 1]]);
        let v = soft_value_unchecked(q0, q1, eps);
        let cont = !a.is_stop();
        let v_next = if cont {
            soft_value_unchecked(q_next[[i, 0]], q_next[[i, 1]], eps)
        } else {
            0.0
        };
        let m = if cont { p.gamma } else { 0.0 };
        let q_sa = if cont { q1 } else { q0 };
        let r = q_sa - m * v_next;
        let phi = p.phi.value(r);
        let dphi = p.phi.derivative(r);
        let value = v - m * v_next;
        if batch.synthetic[i] {
            fake += w * (phi - value);
        } else {
            iq += w * phi;
            val += w * value;
        }
        // J-gradients, negated below for the minimized loss
        let col = usize::from(cont);
        d_q[[i, col]] -= w * dphi;
        let (p0, p1) = boltzmann_unchecked(q0, q1, eps);
        d_q[[i, 0]] += w * p0;
        d_q[[i, 1]] += w * p1;
        if cont {
            let (n0, n1) = boltzmann_unchecked(q_next[[i, 0]], q_next[[i, 1]], eps);
            let dv = -w * m * (1.0 - dphi);
            d_q_next[[i, 0]] = dv * n0;
            d_q_next[[i, 1]] = dv * n1;
        }
    }
    let total = -(iq - val + fake);
    Ok(IqEval {
        loss: LossBreakdown {
            iq_term: iq,
            value_term: val,
            fake_term: fake,
            total,
            ..LossBreakdown::default()
        },
        d_q,
        d_q_next,
    })
}

/// Runs the net on `x` and `x_next`, accumulates the IQ gradient into `grads`.
/// `x_next` is treated as a constant input (for model-based variants it holds
/// detached dynamics predictions).
pub fn iq_loss(net: &MultiHeadNet, batch: &IqBatch, p: &IqParams, grads: &mut [f64]) -> Result<LossBreakdown> {
    let c = net.forward(batch.x.clone())?;
    let cn = net.forward(batch.x_next.clone())?;
    let e = iq_terms(c.q.view(), cn.q.view(), batch, p)?;
    net.backward(&c, Some(&e.d_q), None, grads);
    net.backward(&cn, Some(&e.d_q_next), None, grads);
    Ok(e.loss)
}

/// Mean over continue records of `‖pred − target‖²`; zero with no continue records.
pub fn dynamics_terms(pred: ArrayView2<f64>, target: ArrayView2<f64>, actions: &[Action]) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() || pred.nrows() != actions.len() {
        return Err(invalid("dynamics arrays have inconsistent shapes"));
    }
    let mut d = Array2::zeros(pred.dim());
    let n_cont = actions.iter().filter(|a| !a.is_stop()).count();
    if n_cont == 0 {
        return Ok((0.0, d));
    }
    let k = 1.0 / n_cont as f64;
    let mut loss = 0.0;
    for (i, a) in actions.iter().enumerate() {
        if a.is_stop() {
            continue;
        }
        for j in 0..pred.ncols() {
            let r = pred[[i, j]] - target[[i, j]];
            loss += k * r * r;
            d[[i, j]] = 2.0 * k * r;
        }
    }
    Ok((loss, d))
}

pub fn dynamics_loss(net: &MultiHeadNet, x: &Array2<f64>, target: &Array2<f64>, actions: &[Action], grads: &mut [f64]) -> Result<f64> {
    let c = net.forward(x.clone())?;
    let pred = c
        .dynamics
        .as_ref()
        .ok_or_else(|| invalid("network has no dynamics head"))?;
    let (loss, d) = dynamics_terms(pred.view(), target.view(), actions)?;
    if actions.iter().any(|a| !a.is_stop()) {
        net.backward(&c, None, Some(&d), grads);
    }
    Ok(loss)
}

/// Weighted mean cross-entropy of `softmax(logits)` against action labels;
/// logits are ordered `(stop, continue)`.
pub fn cross_entropy_terms(logits: ArrayView2<f64>, actions: &[Action], weights: &[f64]) -> Result<(f64, Array2<f64>)> {
    let n = actions.len();
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    if logits.nrows() != n || weights.len() != n {
        return Err(invalid("cross-entropy arrays have inconsistent lengths"));
    }
    let wsum: f64 = weights.iter().sum();
    let mut d = Array2::zeros((n, 2));
    let mut loss = 0.0;
    for i in 0..n {
        let (l0, l1) = (logits[[i, 0]], logits[[i, 1]]);
        let lse = soft_value_unchecked(l0, l1, 1.0);
        let (p0, p1) = boltzmann_unchecked(l0, l1, 1.0);
        let w = weights[i] / wsum;
        let (target, y0) = if actions[i].is_stop() { (l0, 1.0) } else { (l1, 0.0) };
        loss += w * (lse - target);
        d[[i, 0]] = w * (p0 - y0);
        d[[i, 1]] = w * (p1 - (1.0 - y0));
    }
    Ok((loss, d))
}

pub fn cross_entropy_loss(net: &MultiHeadNet, x: &Array2<f64>, actions: &[Action], weights: &[f64], grads: &mut [f64]) -> Result<f64> {
    let c = net.forward(x.clone())?;
    let (loss, d) = cross_entropy_terms(c.q.view(), actions, weights)?;
    net.backward(&c, Some(&d), None, grads);
    Ok(loss)
}

/// Mean squared error of `g_φ(s)` against detached targets.
pub fn g_terms(pred: ArrayView2<f64>, target: &[f64]) -> Result<(f64, Array2<f64>)> {
    let n = target.len();
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    if pred.nrows() != n || pred.ncols() != 1 {
        return Err(invalid("g predictions must be an n×1 column"));
    }
    let k = 1.0 / n as f64;
    let mut d = Array2::zeros((n, 1));
    let mut loss = 0.0;
    for i in 0..n {
        let r = pred[[i, 0]] - target[i];
        loss += k * r * r;
        d[[i, 0]] = 2.0 * k * r;
    }
    Ok((loss, d))
}

pub fn g_loss(gnet: &GNet, x: &Array2<f64>, target: &[f64], grads: &mut [f64]) -> Result<f64> {
    let c = gnet.forward(x.clone())?;
    let (loss, d) = g_terms(c.out.view(), target)?;
    gnet.backward(&c, &d, grads);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn params(gamma: f64) -> IqParams {
        IqParams {
            gamma,
            epsilon: 0.1,
            phi: Phi { c_reg: 0.5 },
        }
    }

    fn batch(actions: Vec<Action>, synthetic: Vec<bool>, weights: Vec<f64>) -> IqBatch {
        let n = actions.len();
        IqBatch {
            x: Array2::zeros((n, 1)),
            x_next: Array2::zeros((n, 1)),
            norm: IqBatch::default_norm(&synthetic),
            actions,
            weights,
            synthetic,
        }
    }

    fn lse(a: f64, b: f64, eps: f64) -> f64 {
        eps * ((a / eps).exp() + (b / eps).exp()).ln()
    }

    #[test]
    fn single_stop_record_contributes_phi_of_q_stop() {
        let b = batch(vec![Action::Stop], vec![false], vec![1.0]);
        let q = array![[0.7, 0.2]];
        let qn = array![[100.0, -50.0]];
        let e = iq_terms(q.view(), qn.view(), &b, &params(0.99)).unwrap();
        assert_eq!(e.loss.iq_term, Phi { c_reg: 0.5 }.value(0.7));
        assert_eq!(e.d_q_next, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn three_record_batch_matches_direct_formula() {
        let b = batch(
            vec![Action::Continue, Action::Stop, Action::Continue],
            vec![false; 3],
            vec![1.0; 3],
        );
        let q = array![[0.3, 0.5], [1.2, -0.4], [-0.1, 0.0]];
        let qn = array![[0.2, 0.6], [9.0, 9.0], [0.4, 0.1]];
        let (g, eps) = (0.99, 0.1);
        let phi = |x: f64| x - x * x / 2.0;
        let v = |r: usize, t: &Array2<f64>| lse(t[[r, 0]], t[[r, 1]], eps);
        let j = (phi(0.5 - g * v(0, &qn)) + phi(1.2) + phi(0.0 - g * v(2, &qn))) / 3.0
            - ((v(0, &q) - g * v(0, &qn)) + v(1, &q) + (v(2, &q) - g * v(2, &qn))) / 3.0;
        let e = iq_terms(q.view(), qn.view(), &b, &params(g)).unwrap();
        assert!((e.loss.total + j).abs() < 1e-12, "{} vs {}", e.loss.total, -j);
    }

    #[test]
    fn discount_free_objective() {
        let b = batch(vec![Action::Continue, Action::Stop], vec![false; 2], vec![1.0; 2]);
        let q = array![[0.3, 0.5], [1.2, -0.4]];
        let qn = array![[5.0, 6.0], [0.0, 0.0]];
        let phi = Phi { c_reg: 0.5 };
        let j = (phi.value(0.5) + phi.value(1.2)) / 2.0 - (lse(0.3, 0.5, 0.1) + lse(1.2, -0.4, 0.1)) / 2.0;
        let e = iq_terms(q.view(), qn.view(), &b, &params(0.0)).unwrap();
        assert!((e.loss.total + j).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let b = batch(vec![], vec![], vec![]);
        let z = Array2::zeros((0, 2));
        assert!(iq_terms(z.view(), z.view(), &b, &params(0.9)).is_err());
    }

    #[test]
    fn confidence_weighting_is_linear() {
        let q = array![[0.3, 0.5], [0.8, 0.1], [0.2, 0.9]];
        let qn = array![[0.2, 0.6], [0.0, 0.0], [0.0, 0.0]];
        let acts = vec![Action::Continue, Action::Stop, Action::Stop];
        let syn = vec![false, false, true];
        let run = |alpha: f64| {
            let b = batch(acts.clone(), syn.clone(), vec![1.0, 1.0, alpha]);
            iq_terms(q.view(), qn.view(), &b, &params(0.99)).unwrap().loss
        };
        let expert_only = {
            let b = batch(acts[..2].to_vec(), syn[..2].to_vec(), vec![1.0; 2]);
            iq_terms(q.select(ndarray::Axis(0), &[0, 1]).view(), qn.select(ndarray::Axis(0), &[0, 1]).view(), &b, &params(0.99))
                .unwrap()
                .loss
        };
        assert_eq!(run(0.0).total, expert_only.total);
        assert!((run(0.5).fake_term - 0.5 * run(1.0).fake_term).abs() < 1e-15);
        // α = 1 equals treating the synthetic record as an expert one under the same normalizer
        let mut pooled = batch(acts.clone(), vec![false; 3], vec![1.0; 3]);
        pooled.norm = 2.0;
        let p = iq_terms(q.view(), qn.view(), &pooled, &params(0.99)).unwrap().loss;
        assert!((p.total - run(1.0).total).abs() < 1e-15);
    }

    #[test]
    fn order_invariance() {
        let q = array![[0.3, 0.5], [0.8, 0.1], [0.2, 0.9]];
        let qn = array![[0.2, 0.6], [0.0, 0.0], [0.4, -0.3]];
        let acts = vec![Action::Continue, Action::Stop, Action::Continue];
        let b = batch(acts.clone(), vec![false; 3], vec![1.0; 3]);
        let a = iq_terms(q.view(), qn.view(), &b, &params(0.99)).unwrap().loss.total;
        let perm = [2, 0, 1];
        let qp = ndarray::stack(ndarray::Axis(0), &perm.map(|i| q.row(i))).unwrap();
        let qnp = ndarray::stack(ndarray::Axis(0), &perm.map(|i| qn.row(i))).unwrap();
        let bp = batch(perm.iter().map(|&i| acts[i]).collect(), vec![false; 3], vec![1.0; 3]);
        let c = iq_terms(qp.view(), qnp.view(), &bp, &params(0.99)).unwrap().loss.total;
        assert!((a - c).abs() < 1e-15);
    }

    #[test]
    fn dynamics_conventions() {
        let acts = [Action::Stop, Action::Stop];
        let p = array![[1.0, 2.0], [3.0, 4.0]];
        let t = array![[0.0, 0.0], [0.0, 0.0]];
        let (l, d) = dynamics_terms(p.view(), t.view(), &acts).unwrap();
        assert_eq!(l, 0.0);
        assert!(d.iter().all(|&v| v == 0.0));
        let (l, _) = dynamics_terms(p.view(), p.view(), &[Action::Continue; 2]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let z = Array2::zeros((4, 2));
        let acts = [Action::Stop, Action::Continue, Action::Continue, Action::Stop];
        let (l, _) = cross_entropy_terms(z.view(), &acts, &[1.0; 4]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
