// SPDX-License-Identifier: MIT OR Apache-2.0

//! Property checks shared by the dedicated integration tests and the
//! acceptance target. Each check returns `Ok(detail)` or `Err(reason)`.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use ios_lab::data::{preprocess, split, LabeledPath};
use ios_lab::env::RawPath;
use ios_lab::losses::{
    cross_entropy_loss, dynamics_loss, g_loss, iq_loss, IqBatch, IqParams, Phi,
};
use ios_lab::nn::{GNet, MultiHeadNet};
use ios_lab::oracle::{backward_induction_exact, FiniteOSProblem, RegressionExpert};
use ios_lab::rng;
use ios_lab::smdp::{
    boltzmann_policy, soft_value, soft_value_log_excess, Action, GainSpec, QPair, StatePoint,
};
use ios_lab::smote::Smote;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Check = Result<String, String>;

// ---------------------------------------------------------------- oracles

/// Value of a fixed stopping rule: `W_H = G`, `W_t = G` where the rule stops,
/// `g + γ·P·W_{t+1}` elsewhere. `rule` bit `t·n + s` marks a stop at `(t, s)`.
pub fn rule_value(p: &FiniteOSProblem, rule: u64) -> Vec<Vec<f64>> {
    let n = p.g.len();
    let h = p.horizon;
    let mut w = vec![vec![0.0; n]; h + 1];
    w[h].clone_from(&p.big_g);
    for t in (0..h).rev() {
        for s in 0..n {
            w[t][s] = if rule >> (t * n + s) & 1 == 1 {
                p.big_g[s]
            } else {
                p.g[s] + p.gamma * p.expect(s, &w[t + 1])
            };
        }
    }
    w
}

/// Pointwise supremum of `rule_value` over every stopping rule.
pub fn enumerate_best(p: &FiniteOSProblem) -> Vec<Vec<f64>> {
    let n = p.g.len();
    let h = p.horizon;
    let bits = n * h;
    assert!(bits < 32, "enumeration too large");
    let mut best = vec![vec![f64::NEG_INFINITY; n]; h + 1];
    for rule in 0..(1u64 << bits) {
        let w = rule_value(p, rule);
        for t in 0..=h {
            for s in 0..n {
                best[t][s] = best[t][s].max(w[t][s]);
            }
        }
    }
    best
}

pub fn random_problem(n: usize, horizon: usize, gamma: f64, seed: u64) -> FiniteOSProblem {
    let mut r = rng::stream(seed);
    let transition = (0..n)
        .map(|_| {
            let row: Vec<f64> = (0..n).map(|_| r.random::<f64>() + 0.05).collect();
            let sum: f64 = row.iter().sum();
            row.into_iter().map(|x| x / sum).collect()
        })
        .collect();
    FiniteOSProblem {
        transition,
        g: (0..n).map(|_| r.random_range(-0.5..0.5)).collect(),
        big_g: (0..n).map(|_| r.random_range(0.0..4.0)).collect(),
        gamma,
        horizon,
    }
}

/// Gains of a finite chain embedded in `ℝ` by its state index.
#[derive(Debug, Clone)]
pub struct ChainGains(pub FiniteOSProblem);

impl GainSpec for ChainGains {
    fn continuation_gain(&self, s: &StatePoint) -> f64 {
        self.0.g[s.coords()[0] as usize]
    }

    fn stopping_gain(&self, s: &StatePoint) -> f64 {
        self.0.big_g[s.coords()[0] as usize]
    }

    fn gamma(&self) -> f64 {
        self.0.gamma
    }
}

pub fn simulate_chain(p: &FiniteOSProblem, n_paths: usize, seed: u64) -> Vec<RawPath> {
    let mut r = rng::stream(seed);
    let n = p.g.len();
    (0..n_paths)
        .map(|_| {
            let mut s = r.random_range(0..n);
            let mut states = vec![StatePoint::new(vec![s as f64])];
            for _ in 0..p.horizon {
                let u: f64 = r.random();
                let mut acc = 0.0;
                let mut next = n - 1;
                for (j, &q) in p.transition[s].iter().enumerate() {
                    acc += q;
                    if u < acc {
                        next = j;
                        break;
                    }
                }
                s = next;
                states.push(StatePoint::new(vec![s as f64]));
            }
            RawPath {
                states,
                event_time: None,
                rng_seed: 0,
            }
        })
        .collect()
}

// ---------------------------------------------------------------- P1

pub fn p1_exhaustive() -> Check {
    let p = random_problem(5, 4, 0.9, 7);
    let exact = backward_induction_exact(&p).map_err(|e| e.to_string())?;
    let best = enumerate_best(&p);
    let mut worst: f64 = 0.0;
    for t in 0..=p.horizon {
        for s in 0..5 {
            worst = worst.max((best[t][s] - exact.values[t][s]).abs());
        }
    }
    // the rule read off the stop set attains the supremum everywhere
    let mut rule = 0u64;
    for t in 0..p.horizon {
        for s in 0..5 {
            if exact.stop_set[t][s] {
                rule |= 1 << (t * 5 + s);
            }
        }
    }
    let attained = rule_value(&p, rule) == exact.values;
    if worst == 0.0 && attained {
        Ok(format!("2^20 rules, max |V - sup| = {worst:e}, stop-set rule optimal"))
    } else {
        Err(format!("max |V - sup| = {worst:e}, stop-set rule attains = {attained}"))
    }
}

pub fn p1_regression() -> Check {
    let p = random_problem(30, 10, 0.95, 11);
    let exact = backward_induction_exact(&p).map_err(|e| e.to_string())?;
    let paths = simulate_chain(&p, 9000, 12);
    // k = 1 with ties averages over every path sharing the state
    let expert = RegressionExpert::fit(&paths, ChainGains(p.clone()), 1).map_err(|e| e.to_string())?;
    let (mut agree, mut total) = (0usize, 0usize);
    let mut margins = Vec::new();
    for t in 0..p.horizon {
        for s in 0..p.g.len() {
            let present = paths.iter().any(|q| q.states[t].coords()[0] as usize == s);
            if !present {
                continue;
            }
            total += 1;
            if expert.stops(t, &StatePoint::new(vec![s as f64])) == exact.stop_set[t][s] {
                agree += 1;
            } else {
                margins.push((p.big_g[s] - exact.continuation[t][s]).abs());
            }
        }
    }
    let frac = agree as f64 / total as f64;
    let detail = format!(
        "{agree}/{total} state-time pairs agree ({:.2}%), exact |G - C| at disagreements {margins:.3?}",
        100.0 * frac
    );
    if frac >= 0.99 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- P2

/// Largest relative error between central differences of `f` and `grad`.
pub fn fd_max_rel_error(f: &dyn Fn(&[f64]) -> f64, params: &[f64], grad: &[f64]) -> f64 {
    let h = 1e-6;
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
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

fn gaussian_rows(n: usize, d: usize, r: &mut rng::Stream) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(r))
}

fn mixed_batch(n: usize, d: usize, alpha: f64, with_synthetic: bool, seed: u64) -> IqBatch {
    let mut r = rng::stream(seed);
    let x = gaussian_rows(n, d, &mut r);
    let x_next = gaussian_rows(n, d, &mut r);
    let actions: Vec<Action> = (0..n)
        .map(|i| if i % 3 == 0 { Action::Stop } else { Action::Continue })
        .collect();
    let synthetic: Vec<bool> = (0..n).map(|i| with_synthetic && i % 4 == 0).collect();
    let weights = synthetic.iter().map(|&s| if s { alpha } else { 1.0 }).collect();
    let norm = IqBatch::default_norm(&synthetic);
    IqBatch {
        x,
        x_next,
        actions,
        weights,
        synthetic,
        norm,
    }
}

/// Named finite-difference results for every training loss.
pub fn gradient_errors() -> Vec<(&'static str, f64)> {
    let p = IqParams {
        gamma: 0.99,
        epsilon: 0.3,
        phi: Phi { c_reg: 0.5 },
    };
    let mut out = Vec::new();
    let net = MultiHeadNet::new(3, &[6, 5], None, true, 21).unwrap();
    for (name, batch) in [
        ("iq", mixed_batch(9, 3, 1.0, false, 1)),
        ("iq+fake", mixed_batch(9, 3, 0.6, true, 2)),
    ] {
        let f = |q: &[f64]| {
            let mut n = net.clone();
            n.params.copy_from_slice(q);
            let mut g = n.zero_grads();
            iq_loss(&n, &batch, &p, &mut g).unwrap().total
        };
        let mut g = net.zero_grads();
        iq_loss(&net, &batch, &p, &mut g).unwrap();
        out.push((name, fd_max_rel_error(&f, &net.params, &g)));
    }
    // synthetic-only batch isolates the fake term
    let mut fake = mixed_batch(8, 3, 0.4, true, 3);
    fake.synthetic = vec![true; 8];
    fake.weights = vec![0.4; 8];
    fake.norm = IqBatch::default_norm(&fake.synthetic);
    {
        let f = |q: &[f64]| {
            let mut n = net.clone();
            n.params.copy_from_slice(q);
            let mut g = n.zero_grads();
            iq_loss(&n, &fake, &p, &mut g).unwrap().fake_term
        };
        let mut g = net.zero_grads();
        let l = iq_loss(&net, &fake, &p, &mut g).unwrap();
        // total = -fake_term on a synthetic-only batch
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert!((l.total + l.fake_term).abs() < 1e-12);
        out.push(("fake", fd_max_rel_error(&f, &net.params, &neg)));
    }
    for share in [true, false] {
        let mb = MultiHeadNet::new(3, &[6, 5], Some(3), share, 22).unwrap();
        let batch = mixed_batch(9, 3, 1.0, false, 4);
        let f = |q: &[f64]| {
            let mut n = mb.clone();
            n.params.copy_from_slice(q);
            let mut g = n.zero_grads();
            dynamics_loss(&n, &batch.x, &batch.x_next, &batch.actions, &mut g).unwrap()
        };
        let mut g = mb.zero_grads();
        dynamics_loss(&mb, &batch.x, &batch.x_next, &batch.actions, &mut g).unwrap();
        out.push((
            if share { "dynamics(shared)" } else { "dynamics(separate)" },
            fd_max_rel_error(&f, &mb.params, &g),
        ));
        // model-based IQ step: detached predicted successors are constants
        let pred = mb.forward(batch.x.clone()).unwrap().dynamics.unwrap();
        let held = IqBatch {
            x_next: pred,
            ..batch.clone()
        };
        let f = |q: &[f64]| {
            let mut n = mb.clone();
            n.params.copy_from_slice(q);
            let mut g = n.zero_grads();
            iq_loss(&n, &held, &p, &mut g).unwrap().total
        };
        let mut g = mb.zero_grads();
        iq_loss(&mb, &held, &p, &mut g).unwrap();
        out.push((
            if share { "iq(model-based,shared)" } else { "iq(model-based,separate)" },
            fd_max_rel_error(&f, &mb.params, &g),
        ));
    }
    {
        let gnet = GNet::new(4, &[5, 4], 23).unwrap();
        let mut r = rng::stream(5);
        let x = gaussian_rows(7, 4, &mut r);
        let target: Vec<f64> = (0..7).map(|_| r.random_range(-1.0..1.0)).collect();
        let f = |q: &[f64]| {
            let mut n = gnet.clone();
            n.params.copy_from_slice(q);
            let mut g = vec![0.0; q.len()];
            g_loss(&n, &x, &target, &mut g).unwrap()
        };
        let mut g = vec![0.0; gnet.params.len()];
        g_loss(&gnet, &x, &target, &mut g).unwrap();
        out.push(("g", fd_max_rel_error(&f, &gnet.params, &g)));
    }
    {
        let batch = mixed_batch(9, 3, 1.0, false, 6);
        let weights: Vec<f64> = (0..9).map(|i| if i % 2 == 0 { 1.0 } else { 0.5 }).collect();
        let f = |q: &[f64]| {
            let mut n = net.clone();
            n.params.copy_from_slice(q);
            let mut g = n.zero_grads();
            cross_entropy_loss(&n, &batch.x, &batch.actions, &weights, &mut g).unwrap()
        };
        let mut g = net.zero_grads();
        cross_entropy_loss(&net, &batch.x, &batch.actions, &weights, &mut g).unwrap();
        out.push(("cross-entropy", fd_max_rel_error(&f, &net.params, &g)));
    }
    out
}

pub fn p2_gradients() -> Check {
    let errs = gradient_errors();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n}={e:.1e}"))
        .collect::<Vec<_>>()
        .join(" ");
    if worst <= 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- P3

pub fn p3_soft_value() -> Check {
    let mut r = rng::stream(31);
    let mut strict_checked = 0usize;
    for &eps in &[1e-3, 0.1, 1.0] {
        for _ in 0..100_000 {
            let scale = [0.01, 1.0, 100.0][r.random_range(0..3)];
            let q = QPair::new(r.random_range(-1.0..1.0) * scale, r.random_range(-1.0..1.0) * scale);
            let m = q.max();
            let v = soft_value(q, eps).map_err(|e| e.to_string())?;
            let bound = m + eps * std::f64::consts::LN_2;
            if !(v >= m && v <= bound) {
                return Err(format!("soft value {v} outside [{m}, {bound}] at eps={eps}"));
            }
            // strict lower bound: the excess is positive even when it underflows m's ulp
            let le = soft_value_log_excess(q, eps).map_err(|e| e.to_string())?;
            if !(le.is_finite() && le <= eps.ln() + std::f64::consts::LN_2.ln() + 1e-12) {
                return Err(format!("log excess {le} invalid for {q:?} at eps={eps}"));
            }
            let excess = le.exp();
            if excess > 4.0 * f64::EPSILON * m.abs().max(f64::MIN_POSITIVE) {
                strict_checked += 1;
                if v <= m {
                    return Err(format!("soft value not strictly above max for {q:?} at eps={eps}"));
                }
            }
        }
    }
    for _ in 0..100_000 {
        let a: f64 = r.random_range(-10.0..10.0);
        let gap = r.random_range(0.1..5.0) * if r.random::<bool>() { 1.0 } else { -1.0 };
        let q = QPair::new(a, a + gap);
        let (ps, pc) = boltzmann_policy(q, 1e-6).map_err(|e| e.to_string())?;
        let mass = if gap > 0.0 { pc } else { ps };
        if mass < 1.0 - 1e-10 {
            return Err(format!("argmax mass {mass} at {q:?}"));
        }
    }
    Ok(format!(
        "3x1e5 pairs within bound, {strict_checked} strictness checks, 1e5 Boltzmann limits"
    ))
}

// ---------------------------------------------------------------- P4

pub fn random_labeled_paths(n: usize, dim: usize, seed: u64) -> Vec<LabeledPath> {
    let mut r = rng::stream(seed);
    (0..n)
        .map(|id| {
            let len = r.random_range(1..40);
            let states = (0..len)
                .map(|_| {
                    StatePoint::new((0..dim).map(|_| r.random_range(-3.0..3.0)).collect())
                })
                .collect();
            let stop = if r.random_bool(0.6) { Some(len - 1) } else { None };
            let actions = (0..len)
                .map(|t| if Some(t) == stop { Action::Stop } else { Action::Continue })
                .collect();
            LabeledPath {
                path_id: id,
                states,
                actions,
                event_time: None,
            }
        })
        .collect()
}

pub fn p4_preprocessing() -> Check {
    let paths = random_labeled_paths(1000, 3, 41);
    let ts = preprocess(&paths).map_err(|e| e.to_string())?;
    let stopped = paths.iter().filter(|p| p.stop_time().is_some()).count();
    for rec in ts.records() {
        if rec.a.is_stop() && !(rec.s_next.is_cemetery() && rec.s_next.coords().iter().all(|&c| c == 0.0)) {
            return Err(format!("stop record of path {} has a live successor", rec.path_id));
        }
    }
    if ts.stop_count() != stopped {
        return Err(format!("{} stop records for {stopped} stopped paths", ts.stop_count()));
    }
    for frac in [0.1, 0.3, 0.5] {
        let (train, val) = split(&ts, frac, 42).map_err(|e| e.to_string())?;
        let ids_t: std::collections::BTreeSet<usize> = train.records().iter().map(|r| r.path_id).collect();
        let ids_v: std::collections::BTreeSet<usize> = val.records().iter().map(|r| r.path_id).collect();
        if ids_t.intersection(&ids_v).next().is_some() {
            return Err(format!("a path straddles the split at val_frac={frac}"));
        }
        if train.len() + val.len() != ts.len() {
            return Err("split loses records".into());
        }
        for part in [&train, &val] {
            for i in 0..part.n_paths() {
                let recs = part.path_records(i);
                let id = recs[0].path_id;
                let orig: Vec<_> = ts.records().iter().filter(|r| r.path_id == id).collect();
                if orig.len() != recs.len() || orig.iter().zip(recs).any(|(a, b)| *a != b) {
                    return Err(format!("path {id} changed by the split"));
                }
            }
        }
    }
    Ok(format!("1000 paths, {} records, {stopped} stops; splits path-atomic", ts.len()))
}

// ---------------------------------------------------------------- P5

/// Andrew's monotone chain; counter-clockwise hull.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::new();
    for (pass, pts) in [p.clone(), p.iter().rev().cloned().collect()].into_iter().enumerate() {
        // the upper chain may not pop vertices of the finished lower chain
        let floor = if pass == 0 { 2 } else { hull.len() + 1 };
        for pt in pts.into_iter().skip(pass) {
            while hull.len() >= floor && cross(hull[hull.len() - 2], hull[hull.len() - 1], pt) <= 0.0 {
                hull.pop();
            }
            hull.push(pt);
        }
    }
    hull.pop();
    hull
}

pub fn inside_hull(hull: &[[f64; 2]], q: [f64; 2], tol: f64) -> bool {
    (0..hull.len()).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let cross = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        cross >= -tol * len
    })
}

pub fn p5_smote() -> Check {
    let mut r = rng::stream(51);
    let minority: Vec<Vec<f64>> = (0..200)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut r);
            let y: f64 = StandardNormal.sample(&mut r);
            vec![1.5 + x, -0.5 + 0.5 * y]
        })
        .collect();
    let k = 5;
    let smote = Smote::new(&minority, k).map_err(|e| e.to_string())?;
    let n = 10_000;
    let synth = smote.generate(n, 52);
    let mut worst_z: f64 = 0.0;
    for d in 0..2 {
        let mu_min = minority.iter().map(|p| p[d]).sum::<f64>() / minority.len() as f64;
        let mu = synth.iter().map(|p| p[d]).sum::<f64>() / n as f64;
        let var = synth.iter().map(|p| (p[d] - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        worst_z = worst_z.max((mu - mu_min).abs() / se);
    }
    // replay the draws: each synthetic lies on a segment to one of its base's neighbours
    let mut replay = rng::stream(52);
    for s in &synth {
        let (i, j, u) = smote.draw(&mut replay);
        if !smote.neighbors(i).contains(&j) || !(0.0..=1.0).contains(&u) {
            return Err(format!("draw ({i}, {j}, {u}) is not a neighbour segment"));
        }
        let a = &minority[i];
        let b = &minority[j];
        let cross = (b[0] - a[0]) * (s[1] - a[1]) - (b[1] - a[1]) * (s[0] - a[0]);
        let dot = (s[0] - a[0]) * (b[0] - a[0]) + (s[1] - a[1]) * (b[1] - a[1]);
        let len2 = (b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2);
        if cross.abs() > 1e-9 * (1.0 + len2) || dot < -1e-12 || dot > len2 * (1.0 + 1e-12) {
            return Err(format!("synthetic {s:?} off the segment {a:?}-{b:?}"));
        }
    }
    let hull = convex_hull(&minority.iter().map(|p| [p[0], p[1]]).collect::<Vec<_>>());
    if let Some(s) = synth.iter().find(|s| !inside_hull(&hull, [s[0], s[1]], 1e-9)) {
        return Err(format!("synthetic {s:?} outside the minority hull"));
    }
    let detail = format!("n=1e4, max |mean diff|/SE = {worst_z:.2}, all on neighbour segments inside hull");
    if worst_z <= 3.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- P6

pub fn determinism_config(out: &Path) -> String {
    format!(
        "algorithms = [\"classifier-smote\", \"iqs-cs-smote\", \"mb-iqs-smote\", \"do-iqs-lb\"]\n\
         seeds = [3]\n\
         out_dir = \"{}\"\n\
         jobs = 2\n\
         [env]\nkind = \"bmgG\"\n\
         [data]\ntrain_paths = 80\ntest_paths = 10\nreference_paths = 200\n\
         [train]\nepochs = 4\nbatch_size = 64\n",
        out.display()
    )
}

pub fn p6_determinism(root: &Path) -> Check {
    use ios_lab::config::RunConfig;
    use ios_lab::harness::{cmd_gen_data, cmd_train};
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let dir = root.join(name);
        let _ = fs::remove_dir_all(&dir);
        let cfg = RunConfig::from_toml_str(&determinism_config(&dir)).map_err(|e| e.to_string())?;
        cmd_gen_data(&cfg).map_err(|e| e.to_string())?;
        let reports = cmd_train(&cfg, false).map_err(|e| e.to_string())?;
        if let Some(r) = reports.iter().find(|r| r.failed()) {
            return Err(format!("{} failed: {:?}", r.algorithm, r.status));
        }
        let mut files = Vec::new();
        for (algo, seed) in cfg.runs() {
            let d = cfg.run_dir(algo, seed);
            for f in ["curves.csv", "checkpoint.bin", "run.txt"] {
                files.push((format!("{algo}/{f}"), fs::read(d.join(f)).map_err(|e| e.to_string())?));
            }
        }
        outputs.push(files);
    }
    let n = outputs[0].len();
    for (a, b) in outputs[0].iter().zip(&outputs[1]) {
        if a != b {
            return Err(format!("{} differs between runs", a.0));
        }
    }
    Ok(format!("{n} files bit-identical across two runs"))
}
