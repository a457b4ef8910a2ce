// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven commands: data generation, training sweeps, evaluation,
//! surface exports.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! data/{paths,train,val,test}.csv, data/manifest.txt
//! <algo>/<seed>/{checkpoint.bin,curves.csv,run.txt}
//! <algo>/<seed>/{surfaces_t<T>.csv,boundaries.csv}
//! metrics.csv, table.txt
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{ExpertKind, RunConfig};
use crate::data::{
    ingest_csv, preprocess, read_labeled_csv, split_indices, write_labeled_csv, write_paths_csv, LabeledPath,
    Standardizer,
};
use crate::env::{simulate_paths, RawPath};
use crate::error::{Error, Result};
use crate::eval::{evaluate_paths, export_surfaces, write_boundaries_csv, write_surface_csv, GridSpec, ModelSurface};
use crate::model::{Algorithm, Model};
use crate::oracle::{rule_based_stop, ExpertLabel, RadialGridExpert, RegressionExpert};
use crate::rng::derive_seed;
use crate::train::{train, EpochCurve, TrainConfig, TrainData};

const SEED_PATHS: u64 = 10;
const SEED_REFERENCE: u64 = 11;
const SEED_SPLIT: u64 = 12;
const SEED_TEST_SPLIT: u64 = 13;

/// Labeled train/validation/test paths of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub train: Vec<LabeledPath>,
    pub val: Vec<LabeledPath>,
    pub test: Vec<LabeledPath>,
}

impl DataBundle {
    pub fn train_data(&self) -> Result<TrainData> {
        Ok(TrainData {
            train: preprocess(&self.train)?,
            val: preprocess(&self.val)?,
        })
    }
}

/// Simulates (or ingests) and labels the experiment paths.
pub fn generate_data(cfg: &RunConfig) -> Result<(DataBundle, Vec<RawPath>, Vec<String>)> {
    let d = &cfg.data;
    let (mut pool, mut test, raw, diagnostics) = match &cfg.ingest {
        Some(schema) => {
            let outcome = ingest_csv(schema)?;
            let n = outcome.paths.len();
            let (rest, test_idx) = split_indices(n, d.test_frac, derive_seed(d.seed, SEED_TEST_SPLIT))?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| outcome.paths[i].clone()).collect::<Vec<_>>();
            (pick(&rest), pick(&test_idx), Vec::new(), outcome.diagnostics)
        }
        None => {
            let n = d.train_paths + d.test_paths;
            let raw = simulate_paths(&cfg.env, n, derive_seed(d.seed, SEED_PATHS))?;
            let labels = expert_labels(cfg, &raw)?;
            let labeled = raw
                .iter()
                .zip(&labels)
                .enumerate()
                .map(|(i, (r, l))| LabeledPath::from_raw(i, r, l, &cfg.env))
                .collect::<Result<Vec<_>>>()?;
            let test = labeled[d.train_paths..].to_vec();
            let mut pool = labeled;
            pool.truncate(d.train_paths);
            (pool, test, raw, Vec::new())
        }
    };
    let (train_idx, val_idx) = split_indices(pool.len(), d.val_frac, derive_seed(d.seed, SEED_SPLIT))?;
    let mut train: Vec<LabeledPath> = train_idx.iter().map(|&i| pool[i].clone()).collect();
    let mut val: Vec<LabeledPath> = val_idx.iter().map(|&i| pool[i].clone()).collect();
    if d.standardize || cfg.ingest.is_some() {
        let st = Standardizer::fit(&train)?;
        for set in [&mut train, &mut val, &mut test] {
            st.apply(set);
        }
    }
    pool.clear();
    Ok((DataBundle { train, val, test }, raw, diagnostics))
}

fn expert_labels(cfg: &RunConfig, raw: &[RawPath]) -> Result<Vec<ExpertLabel>> {
    if cfg.env.kind.is_bm() {
        let gains = cfg.env.expert_gains();
        match cfg.data.expert {
            ExpertKind::Grid => {
                let expert = RadialGridExpert::fit(gains, cfg.env.dt.sqrt(), cfg.env.horizon)?;
                Ok(raw.iter().map(|p| expert.label(p)).collect())
            }
            ExpertKind::Knn => {
                let reference =
                    simulate_paths(&cfg.env, cfg.data.reference_paths, derive_seed(cfg.data.seed, SEED_REFERENCE))?;
                let expert = RegressionExpert::fit(&reference, gains, cfg.data.knn_k)?;
                Ok(raw.iter().map(|p| expert.label(p)).collect())
            }
        }
    } else {
        raw.iter().map(|p| rule_based_stop(p, &cfg.env)).collect()
    }
}

fn count_stops(paths: &[LabeledPath]) -> usize {
    paths.iter().filter(|p| p.stop_time().is_some()).count()
}

fn manifest(cfg: &RunConfig, b: &DataBundle, diagnostics: &[String]) -> Result<String> {
    let mut m = String::new();
    let env = toml::to_string(&cfg.env).map_err(|e| Error::Config(e.to_string()))?;
    let data = toml::to_string(&cfg.data).map_err(|e| Error::Config(e.to_string()))?;
    let _ = writeln!(m, "# ios-lab data manifest");
    let _ = writeln!(m, "seed = {}", cfg.data.seed);
    let _ = writeln!(m, "ingested = {}", cfg.ingest.is_some());
    for (name, set) in [("train", &b.train), ("val", &b.val), ("test", &b.test)] {
        let _ = writeln!(m, "{name}_paths = {}", set.len());
        let _ = writeln!(m, "{name}_stopped_paths = {}", count_stops(set));
        let _ = writeln!(m, "{name}_states = {}", set.iter().map(LabeledPath::len).sum::<usize>());
    }
    let _ = writeln!(m, "\n[env]\n{env}\n[data]\n{data}");
    for d in diagnostics {
        let _ = writeln!(m, "# {d}");
    }
    Ok(m)
}

/// Writes labeled CSVs and the manifest under `out_dir/data`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DataBundle> {
    let (bundle, raw, diagnostics) = generate_data(cfg)?;
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir)?;
    if !raw.is_empty() {
        let indexed: Vec<(usize, &RawPath)> = raw.iter().enumerate().collect();
        write_paths_csv(&dir.join("paths.csv"), &indexed)?;
    }
    write_labeled_csv(&dir.join("train.csv"), &bundle.train)?;
    write_labeled_csv(&dir.join("val.csv"), &bundle.val)?;
    write_labeled_csv(&dir.join("test.csv"), &bundle.test)?;
    fs::write(dir.join("manifest.txt"), manifest(cfg, &bundle, &diagnostics)?)?;
    Ok(bundle)
}

/// Reads the CSVs written by [`cmd_gen_data`].
pub fn load_data(cfg: &RunConfig) -> Result<DataBundle> {
    let dir = cfg.data_dir();
    let read = |name: &str| {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::InvalidArgument(format!(
                "{} is missing; run gen-data first",
                p.display()
            )));
        }
        read_labeled_csv(&p)
    };
    Ok(DataBundle {
        train: read("train.csv")?,
        val: read("val.csv")?,
        test: read("test.csv")?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Trained {
        best_epoch: Option<usize>,
        best_val_ba: Option<f64>,
        seconds: f64,
    },
    Skipped,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub status: RunStatus,
}

impl RunReport {
    pub fn failed(&self) -> bool {
        matches!(self.status, RunStatus::Failed(_))
    }
}

pub fn write_curves_csv(path: &Path, curves: &[EpochCurve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch", "iq_term", "value_term", "fake_term", "dyn_loss", "g_loss", "total", "val_ba", "lr", "eps", "alpha",
    ])?;
    for c in curves {
        let l = &c.loss;
        let mut row = vec![c.epoch.to_string()];
        row.extend(
            [l.iq_term, l.value_term, l.fake_term, l.dyn_loss, l.g_loss, l.total, c.val_ba, c.lr, c.epsilon, c.alpha]
                .iter()
                .map(|v| format!("{v:?}")),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn train_one(cfg: &RunConfig, data: &TrainData, algo: Algorithm, seed: u64, resume: bool) -> RunReport {
    let dir = cfg.run_dir(algo, seed);
    let ckpt = dir.join("checkpoint.bin");
    let report = |status| RunReport {
        algorithm: algo,
        seed,
        status,
    };
    if resume && ckpt.exists() && Model::load(&ckpt).is_ok() {
        return report(RunStatus::Skipped);
    }
    let started = Instant::now();
    let result = (|| -> Result<RunStatus> {
        fs::create_dir_all(&dir)?;
        let tc = TrainConfig {
            algorithm: algo,
            ..cfg.train.clone()
        };
        match train(&tc, data, seed) {
            Ok(out) => {
                write_curves_csv(&dir.join("curves.csv"), &out.curves)?;
                out.best.save(&ckpt)?;
                let info = format!(
                    "algorithm = {algo}\nseed = {seed}\nstatus = ok\nbest_epoch = {}\nbest_val_ba = {}\n",
                    opt_text(out.best_epoch),
                    opt_text(out.best_val_ba)
                );
                fs::write(dir.join("run.txt"), info)?;
                Ok(RunStatus::Trained {
                    best_epoch: out.best_epoch,
                    best_val_ba: out.best_val_ba,
                    seconds: started.elapsed().as_secs_f64(),
                })
            }
            Err(div) => {
                write_curves_csv(&dir.join("curves.csv"), &div.curves)?;
                fs::write(
                    dir.join("run.txt"),
                    format!("algorithm = {algo}\nseed = {seed}\nstatus = failed\nerror = {}\n", div.error),
                )?;
                Ok(RunStatus::Failed(div.error.to_string()))
            }
        }
    })();
    report(result.unwrap_or_else(|e| RunStatus::Failed(e.to_string())))
}

fn opt_text<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trains every `(algorithm, seed)` pair on a worker pool; failures stay per run.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<Vec<RunReport>> {
    let data = load_data(cfg)?.train_data()?;
    let runs = cfg.runs();
    let jobs = if cfg.jobs == 0 { rayon::current_num_threads() } else { cfg.jobs };
    let reports = pool(jobs.min(runs.len()).max(1))?.install(|| {
        runs.par_iter()
            .map(|&(a, s)| train_one(cfg, &data, a, s, resume))
            .collect()
    });
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub algorithm: Algorithm,
    pub env: String,
    pub seed: u64,
    pub balanced_accuracy: f64,
    pub m_tte: Option<f64>,
    pub m_emr: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<MetricsRow>,
    pub missing: Vec<(Algorithm, u64)>,
    pub table: String,
}

/// Scores every available checkpoint on the test paths, writes
/// `metrics.csv` and the aggregated `table.txt`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    let data = load_data(cfg)?;
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (algo, seed) in cfg.runs() {
        let ckpt = cfg.run_dir(algo, seed).join("checkpoint.bin");
        if !ckpt.exists() {
            missing.push((algo, seed));
            continue;
        }
        let model = Model::load(&ckpt)?;
        let r = evaluate_paths(&model, &data.test)?;
        rows.push(MetricsRow {
            algorithm: algo,
            env: cfg.env.kind.tag().to_string(),
            seed,
            balanced_accuracy: r.balanced_accuracy,
            m_tte: r.m_tte,
            m_emr: r.m_emr,
            best_epoch: model.epoch,
        });
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_metrics_csv(&cfg.out_dir.join("metrics.csv"), &rows)?;
    let table = render_table(&rows);
    fs::write(cfg.out_dir.join("table.txt"), &table)?;
    Ok(Evaluation { rows, missing, table })
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["algo", "env", "seed", "BA", "m_tte", "m_emr", "best_epoch"])?;
    for r in rows {
        w.write_record([
            r.algorithm.tag().to_string(),
            r.env.clone(),
            r.seed.to_string(),
            format!("{:?}", r.balanced_accuracy),
            r.m_tte.map(|v| format!("{v:?}")).unwrap_or_else(|| "NA".into()),
            format!("{:?}", r.m_emr),
            r.best_epoch.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Balanced accuracy as `mean ± 2·std` over seeds, algorithms as rows and
/// environments as columns.
pub fn render_table(rows: &[MetricsRow]) -> String {
    let mut envs: Vec<&str> = Vec::new();
    let mut algos: Vec<Algorithm> = Vec::new();
    let mut cells: BTreeMap<(Algorithm, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if !envs.contains(&r.env.as_str()) {
            envs.push(&r.env);
        }
        if !algos.contains(&r.algorithm) {
            algos.push(r.algorithm);
        }
        cells.entry((r.algorithm, &r.env)).or_default().push(r.balanced_accuracy);
    }
    algos.sort();
    let width = 17;
    let mut out = format!("{:<18}", "algorithm");
    for e in &envs {
        let _ = write!(out, "{e:>width$}");
    }
    out.push('\n');
    for a in algos {
        let _ = write!(out, "{:<18}", a.tag());
        for e in &envs {
            let cell = match cells.get(&(a, *e)) {
                Some(v) => {
                    let (m, s) = mean_std(v);
                    format!("{m:.4} ± {:.4}", 2.0 * s)
                }
                None => "-".into(),
            };
            let _ = write!(out, "{cell:>width$}");
        }
        out.push('\n');
    }
    out
}

/// Q grids and zero-level boundaries for every checkpoint of a 2-D problem.
/// Returns the number of runs exported.
pub fn cmd_export_heatmaps(cfg: &RunConfig) -> Result<usize> {
    if cfg.env.dim != 2 {
        return Err(Error::InvalidArgument(format!(
            "surface export needs a 2-D state space; {} is {}-dimensional",
            cfg.env.kind, cfg.env.dim
        )));
    }
    let ex = &cfg.export;
    let grid = GridSpec::square(ex.half_width, ex.grid_points);
    let boundary_times: Vec<usize> = if ex.boundary_times.is_empty() {
        (0..cfg.env.horizon.saturating_sub(1)).collect()
    } else {
        ex.boundary_times.clone()
    };
    let mut done = 0;
    for (algo, seed) in cfg.runs() {
        let dir = cfg.run_dir(algo, seed);
        let ckpt = dir.join("checkpoint.bin");
        if !ckpt.exists() {
            continue;
        }
        let model = Model::load(&ckpt)?;
        let q = ModelSurface {
            model: &model,
            time_horizon: cfg.env.include_time_in_state.then_some(cfg.env.horizon),
            fixed_y: ex.fixed_y,
        };
        for s in export_surfaces(&q, &grid, &ex.surface_times, ex.normalize)? {
            write_surface_csv(&dir.join(format!("surfaces_t{}.csv", s.t)), &s)?;
        }
        let bounds = export_surfaces(&q, &grid, &boundary_times, ex.normalize)?;
        write_boundaries_csv(&dir.join("boundaries.csv"), &bounds)?;
        done += 1;
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
