// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small feed-forward approximators with hand-written reverse-mode gradients.
//!
//! Every network keeps its parameters in one flat `Vec<f64>`; layers are
//! described by offsets into it. Weights are stored row-major as
//! `n_in × n_out` so a batch forward is `X·W + b`. Gradients use the same
//! layout, which lets the optimizer, checkpoints and finite-difference checks
//! treat a network as a plain vector.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    w: usize,
    b: usize,
}

impl Layer {
    fn alloc(n_in: usize, n_out: usize, cursor: &mut usize) -> Self {
        let w = *cursor;
        let b = w + n_in * n_out;
        *cursor = b + n_out;
        Layer { n_in, n_out, w, b }
    }

    pub fn range(&self) -> Range<usize> {
        self.w..self.b + self.n_out
    }

    fn weights<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.n_in, self.n_out), &p[self.w..self.b]).expect("layer shape")
    }

    fn bias<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.b..self.b + self.n_out])
    }

    fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights(p));
        z += &self.bias(p);
        z
    }

    /// Accumulates `∂L/∂W`, `∂L/∂b` into `grads` and returns `∂L/∂x`.
    fn backward(&self, p: &[f64], grads: &mut [f64], x: ArrayView2<f64>, dz: ArrayView2<f64>, need_dx: bool) -> Option<Array2<f64>> {
        {
            let (gw, gb) = grads[self.w..self.b + self.n_out].split_at_mut(self.n_in * self.n_out);
            let mut gw = ArrayViewMut2::from_shape((self.n_in, self.n_out), gw).expect("layer shape");
            general_mat_mul(1.0, &x.t(), &dz, 1.0, &mut gw);
            for (g, s) in gb.iter_mut().zip(dz.sum_axis(Axis(0))) {
                *g += s;
            }
        }
        need_dx.then(|| dz.dot(&self.weights(p).t()))
    }

    fn init(&self, p: &mut [f64], rng: &mut rng::Stream) {
        let bound = (6.0 / self.n_in as f64).sqrt();
        for w in &mut p[self.w..self.b] {
            *w = rng.random_range(-bound..bound);
        }
        p[self.b..self.b + self.n_out].fill(0.0);
    }
}

/// ReLU stack; keeps every layer input and pre-activation for backprop.
#[derive(Debug, Clone)]
struct StackCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    out: Array2<f64>,
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

fn stack_forward(layers: &[Layer], p: &[f64], x: Array2<f64>) -> StackCache {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut h = x;
    for l in layers {
        let z = l.forward(p, h.view());
        let next = relu(&z);
        inputs.push(h);
        pre.push(z);
        h = next;
    }
    StackCache { inputs, pre, out: h }
}

fn stack_backward(layers: &[Layer], p: &[f64], grads: &mut [f64], cache: &StackCache, d_out: Array2<f64>) {
    let mut d = d_out;
    for (i, l) in layers.iter().enumerate().rev() {
        let mut dz = d;
        ndarray::Zip::from(&mut dz)
            .and(&cache.pre[i])
            .for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        match l.backward(p, grads, cache.inputs[i].view(), dz.view(), i > 0) {
            Some(dx) => d = dx,
            None => return,
        }
    }
}

pub fn rows_to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let n_in = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), n_in), flat).expect("rectangular rows")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub g_hidden: Vec<usize>,
    /// Q and dynamics heads read one shared trunk.
    pub share_trunk: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![64, 64],
            g_hidden: vec![32, 32],
            share_trunk: true,
        }
    }
}

/// Trunk MLP with a 2-output Q head `(stop, continue)` and an optional
/// next-state head.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadNet {
    input_dim: usize,
    hidden: Vec<usize>,
    trunk: Vec<Layer>,
    q_head: Layer,
    dyn_trunk: Option<Vec<Layer>>,
    dyn_head: Option<Layer>,
    pub params: Vec<f64>,
}

/// Cached intermediates of one batch forward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    trunk: StackCache,
    dyn_trunk: Option<StackCache>,
    pub q: Array2<f64>,
    pub dynamics: Option<Array2<f64>>,
}

impl MultiHeadNet {
    /// `dyn_out = Some(d)` adds a next-state head of width `d`.
    pub fn new(input_dim: usize, hidden: &[usize], dyn_out: Option<usize>, share_trunk: bool, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(invalid("network widths must be positive with at least one hidden layer"));
        }
        let mut cursor = 0;
        let trunk = build_stack(input_dim, hidden, &mut cursor);
        let width = *hidden.last().expect("non-empty");
        let q_head = Layer::alloc(width, 2, &mut cursor);
        let (dyn_trunk, dyn_head) = match dyn_out {
            Some(d) => {
                let t = (!share_trunk).then(|| build_stack(input_dim, hidden, &mut cursor));
                (t, Some(Layer::alloc(width, d, &mut cursor)))
            }
            None => (None, None),
        };
        let mut net = MultiHeadNet {
            input_dim,
            hidden: hidden.to_vec(),
            trunk,
            q_head,
            dyn_trunk,
            dyn_head,
            params: vec![0.0; cursor],
        };
        let mut r = rng::stream(seed);
        // Q-side layers draw first so dynamics-free nets share their initialization
        for l in net.trunk.iter().chain([&net.q_head]) {
            l.init(&mut net.params, &mut r);
        }
        for l in net.dyn_trunk.iter().flatten().chain(net.dyn_head.iter()) {
            l.init(&mut net.params, &mut r);
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn dyn_out(&self) -> Option<usize> {
        self.dyn_head.map(|l| l.n_out)
    }

    pub fn shares_trunk(&self) -> bool {
        self.dyn_trunk.is_none()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn trunk_range(&self) -> Range<usize> {
        self.trunk[0].range().start..self.trunk.last().expect("trunk").range().end
    }

    /// Parameters trained by the Q objective (trunk and Q head).
    pub fn q_ranges(&self) -> Vec<Range<usize>> {
        vec![self.trunk_range().start..self.q_head.range().end]
    }

    /// Parameters trained by the dynamics loss; includes the shared trunk
    /// only when `with_trunk` is set.
    pub fn dyn_ranges(&self, with_trunk: bool) -> Vec<Range<usize>> {
        let mut r = Vec::new();
        if let Some(h) = self.dyn_head {
            match &self.dyn_trunk {
                Some(t) => r.push(t[0].range().start..h.range().end),
                None => {
                    if with_trunk {
                        r.push(self.trunk_range());
                    }
                    r.push(h.range());
                }
            }
        }
        r
    }

    pub fn forward(&self, x: Array2<f64>) -> Result<NetCache> {
        if x.ncols() != self.input_dim {
            return Err(invalid(format!(
                "input width {} does not match network input {}",
                x.ncols(),
                self.input_dim
            )));
        }
        let dyn_trunk = self
            .dyn_trunk
            .as_ref()
            .map(|layers| stack_forward(layers, &self.params, x.clone()));
        let trunk = stack_forward(&self.trunk, &self.params, x);
        let q = self.q_head.forward(&self.params, trunk.out.view());
        let dynamics = self.dyn_head.map(|h| {
            let feats = dyn_trunk.as_ref().map_or(&trunk.out, |c| &c.out);
            h.forward(&self.params, feats.view())
        });
        Ok(NetCache {
            trunk,
            dyn_trunk,
            q,
            dynamics,
        })
    }

    pub fn forward_rows(&self, rows: &[Vec<f64>]) -> Result<NetCache> {
        self.forward(rows_to_array(rows))
    }

    /// Q pair of one input vector.
    pub fn q_values(&self, x: &[f64]) -> Result<[f64; 2]> {
        let c = self.forward(rows_to_array(&[x.to_vec()]))?;
        Ok([c.q[[0, 0]], c.q[[0, 1]]])
    }

    /// Backpropagates head gradients of one forward pass, accumulating into `grads`.
    pub fn backward(&self, cache: &NetCache, d_q: Option<&Array2<f64>>, d_dyn: Option<&Array2<f64>>, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer shape");
        let p = &self.params;
        let width = *self.hidden.last().expect("trunk");
        let rows = cache.q.nrows();
        let mut d_trunk: Option<Array2<f64>> = None;
        if let Some(dq) = d_q {
            d_trunk = self.q_head.backward(p, grads, cache.trunk.out.view(), dq.view(), true);
        }
        if let (Some(dd), Some(h)) = (d_dyn, self.dyn_head) {
            match (&self.dyn_trunk, &cache.dyn_trunk) {
                (Some(layers), Some(c)) => {
                    let dh = h.backward(p, grads, c.out.view(), dd.view(), true).expect("dx");
                    stack_backward(layers, p, grads, c, dh);
                }
                _ => {
                    let dh = h.backward(p, grads, cache.trunk.out.view(), dd.view(), true).expect("dx");
                    d_trunk = Some(match d_trunk {
                        Some(acc) => acc + dh,
                        None => dh,
                    });
                }
            }
        }
        let d = d_trunk.unwrap_or_else(|| Array2::zeros((rows, width)));
        stack_backward(&self.trunk, p, grads, &cache.trunk, d);
    }
}

fn build_stack(input: usize, hidden: &[usize], cursor: &mut usize) -> Vec<Layer> {
    let mut prev = input;
    hidden
        .iter()
        .map(|&h| {
            let l = Layer::alloc(prev, h, cursor);
            prev = h;
            l
        })
        .collect()
}

/// Scalar-output ReLU MLP used for the pointwise continuation gain.
#[derive(Debug, Clone, PartialEq)]
pub struct GNet {
    input_dim: usize,
    hidden: Vec<usize>,
    stack: Vec<Layer>,
    out: Layer,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GCache {
    stack: StackCache,
    pub out: Array2<f64>,
}

impl GNet {
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(invalid("network widths must be positive with at least one hidden layer"));
        }
        let mut cursor = 0;
        let stack = build_stack(input_dim, hidden, &mut cursor);
        let out = Layer::alloc(*hidden.last().expect("hidden"), 1, &mut cursor);
        let mut net = GNet {
            input_dim,
            hidden: hidden.to_vec(),
            stack,
            out,
            params: vec![0.0; cursor],
        };
        let mut r = rng::stream(seed);
        for l in net.stack.iter().chain([&net.out]) {
            l.init(&mut net.params, &mut r);
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn forward(&self, x: Array2<f64>) -> Result<GCache> {
        if x.ncols() != self.input_dim {
            return Err(invalid(format!(
                "input width {} does not match g-network input {}",
                x.ncols(),
                self.input_dim
            )));
        }
        let stack = stack_forward(&self.stack, &self.params, x);
        let out = self.out.forward(&self.params, stack.out.view());
        Ok(GCache { stack, out })
    }

    pub fn backward(&self, cache: &GCache, d_out: &Array2<f64>, grads: &mut [f64]) {
        let d = self
            .out
            .backward(&self.params, grads, cache.stack.out.view(), d_out.view(), true)
            .expect("dx");
        stack_backward(&self.stack, &self.params, grads, &cache.stack, d);
    }

    /// Pointwise gains; the cemetery is masked to exactly zero.
    pub fn gains(&self, states: &[&crate::smdp::StatePoint]) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<f64>> = states.iter().map(|s| s.coords().to_vec()).collect();
        let c = self.forward(rows_to_array(&rows))?;
        Ok(states
            .iter()
            .zip(c.out.column(0))
            .map(|(s, &g)| if s.is_cemetery() { 0.0 } else { g })
            .collect())
    }
}

/// Exponential schedule `initial · factor^epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub initial: f64,
    pub factor: f64,
}

impl Schedule {
    pub fn at(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi(epoch as i32)
    }
}

/// Adam moments over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update restricted to `ranges`.
    /// Non-finite gradients abort with a divergence error before anything changes.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, ranges: &[Range<usize>], at: (usize, usize)) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "flat-view shapes differ");
        assert_eq!(params.len(), self.m.len(), "optimizer sized for another network");
        for r in ranges {
            if let Some(i) = grads[r.clone()].iter().position(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch: at.0,
                    batch: at.1,
                    what: format!("non-finite gradient at parameter {}", r.start + i),
                });
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for r in ranges {
            for i in r.clone() {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                params[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(f: &dyn Fn(&[f64]) -> f64, params: &[f64], grad: &[f64]) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut p = params.to_vec();
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let dn = f(&p);
            p[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max((fd - grad[i]).abs() / denom);
        }
        worst
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut net = MultiHeadNet::new(3, &[4, 4], Some(3), true, 1).unwrap();
        net.params.fill(0.0);
        let c = net.forward(array![[1.0, -2.0, 3.0]]).unwrap();
        assert!(c.q.iter().all(|&v| v == 0.0));
        assert!(c.dynamics.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let net = MultiHeadNet::new(3, &[4], None, true, 1).unwrap();
        assert!(net.forward(array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn identity_trunk_then_head() {
        let mut net = MultiHeadNet::new(2, &[2], None, true, 1).unwrap();
        net.params.fill(0.0);
        let l = net.trunk[0];
        net.params[l.w] = 1.0;
        net.params[l.w + 3] = 1.0;
        let h = net.q_head;
        // q = (2·x0 + 1, -x1) on positive inputs
        net.params[h.w] = 2.0;
        net.params[h.w + 3] = -1.0;
        net.params[h.b] = 1.0;
        let c = net.forward(array![[0.5, 3.0]]).unwrap();
        assert_eq!(c.q, array![[2.0, -3.0]]);
    }

    #[test]
    fn forward_is_reproducible() {
        let a = MultiHeadNet::new(2, &[16, 16], Some(2), true, 9).unwrap();
        let b = MultiHeadNet::new(2, &[16, 16], Some(2), true, 9).unwrap();
        assert_eq!(a, b);
        let x = array![[0.3, -0.7], [1.1, 0.2]];
        assert_eq!(a.forward(x.clone()).unwrap().q, b.forward(x).unwrap().q);
    }

    #[test]
    fn dynamics_free_net_shares_q_initialization() {
        let plain = MultiHeadNet::new(2, &[8, 8], None, true, 4).unwrap();
        let mb = MultiHeadNet::new(2, &[8, 8], Some(2), true, 4).unwrap();
        assert_eq!(plain.params[..], mb.params[..plain.n_params()]);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let net = MultiHeadNet::new(2, &[8], Some(2), true, 2).unwrap();
        let c = net.forward(array![[0.1, 0.2]]).unwrap();
        let mut g = net.zero_grads();
        net.backward(&c, Some(&Array2::zeros((1, 2))), Some(&Array2::zeros((1, 2))), &mut g);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn squared_error_gradient_matches_closed_form() {
        // one hidden unit with identity-like behaviour on positive inputs
        let mut net = MultiHeadNet::new(1, &[1], None, true, 0).unwrap();
        net.params.fill(0.0);
        net.params[net.trunk[0].w] = 1.0;
        let h = net.q_head;
        net.params[h.w] = 0.7;
        net.params[h.b] = 0.2;
        let x = 2.0;
        let target = 1.0;
        let c = net.forward(array![[x]]).unwrap();
        let resid = c.q[[0, 0]] - target;
        let mut g = net.zero_grads();
        net.backward(&c, Some(&array![[2.0 * resid, 0.0]]), None, &mut g);
        assert!((g[h.w] - 2.0 * resid * x).abs() < 1e-15);
        assert!((g[h.b] - 2.0 * resid).abs() < 1e-15);
    }

    #[test]
    fn multihead_gradient_matches_finite_differences() {
        for share in [true, false] {
            let net = MultiHeadNet::new(2, &[16, 16], Some(2), share, 5).unwrap();
            let x = array![[0.3, -0.4], [1.2, 0.5], [-0.8, 0.9]];
            let wq = array![[0.3, -1.1], [0.7, 0.2], [-0.5, 0.9]];
            let wd = array![[1.0, -0.2], [0.1, 0.4], [0.3, 0.3]];
            let loss = |p: &[f64]| {
                let mut n = net.clone();
                n.params.copy_from_slice(p);
                let c = n.forward(x.clone()).unwrap();
                (&c.q * &c.q * &wq).sum() + (&c.dynamics.unwrap() * &wd).sum()
            };
            let c = net.forward(x.clone()).unwrap();
            let dq = 2.0 * &c.q * &wq;
            let mut g = net.zero_grads();
            net.backward(&c, Some(&dq), Some(&wd), &mut g);
            let err = fd_check(&loss, &net.params, &g);
            assert!(err < 1e-4, "share={share} err={err}");
        }
    }

    #[test]
    fn gnet_gradient_matches_finite_differences() {
        let net = GNet::new(3, &[8, 8], 3).unwrap();
        let x = array![[0.3, -0.4, 0.1], [1.2, 0.5, -0.3]];
        let loss = |p: &[f64]| {
            let mut n = net.clone();
            n.params.copy_from_slice(p);
            n.forward(x.clone()).unwrap().out.mapv(|v| v * v).sum()
        };
        let c = net.forward(x.clone()).unwrap();
        let d = 2.0 * &c.out;
        let mut g = vec![0.0; net.params.len()];
        net.backward(&c, &d, &mut g);
        assert!(fd_check(&loss, &net.params, &g) < 1e-4);
    }

    #[test]
    fn adam_behaviour() {
        let mut p = vec![1.0, -1.0];
        let mut opt = Adam::new(2);
        opt.step(&mut p, &[0.0, 0.0], 0.01, &[0..2], (0, 0)).unwrap();
        assert_eq!(p, vec![1.0, -1.0]);
        for _ in 0..100 {
            opt.step(&mut p, &[0.5, -2.0], 0.01, &[0..2], (0, 0)).unwrap();
        }
        assert!(p[0] < 1.0 && p[1] > -1.0);
        let before = p.clone();
        let err = opt.step(&mut p, &[f64::NAN, 0.0], 0.01, &[0..2], (3, 17)).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 3, batch: 17, .. }));
        assert_eq!(p, before);
    }

    #[test]
    fn lr_schedule() {
        let s = Schedule { initial: 0.01, factor: 0.9999 };
        assert!((s.at(100) - 0.009_900_493_386_913_72).abs() < 1e-15);
    }
}
