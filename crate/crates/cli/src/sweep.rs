//! Hyperparameter grids over the adaptation loss weights.

use crate::config::ExperimentConfig;
use crate::pipeline::Datasets;
use anyhow::{bail, Context, Result};
use falcon_lab::adaptation::{adapt, evaluate_map, pretrain_source, TrainConfig};
use falcon_lab::detector::DetectorParams;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SUMMARY_CSV: &str = "sweep_summary.csv";
pub const THREADS_ENV: &str = "FALCON_LAB_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SweepParam {
    Lambda1,
    Lambda2,
    M,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Lambda2 => "lambda2",
            SweepParam::M => "m",
        }
    }

    fn apply(self, cfg: &mut TrainConfig, value: f64) {
        match self {
            SweepParam::Lambda1 => cfg.spar.lambda1 = value,
            SweepParam::Lambda2 => cfg.spar.lambda2 = value,
            SweepParam::M => cfg.irpl.m = value,
        }
    }

    fn admits(self, value: f64) -> bool {
        match self {
            SweepParam::Lambda1 | SweepParam::Lambda2 => value.is_finite() && value >= 0.0,
            SweepParam::M => value.is_finite() && value > 0.0,
        }
    }
}

/// One axis of a grid, written `name=v1,v2,...`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl FromStr for SweepAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, list) = s.split_once('=').with_context(|| format!("grid {s:?} is not name=v1,v2,..."))?;
        let param = match name.trim() {
            "lambda1" => SweepParam::Lambda1,
            "lambda2" => SweepParam::Lambda2,
            "m" => SweepParam::M,
            other => bail!("unknown sweep parameter {other:?} (expected lambda1, lambda2 or m)"),
        };
        let values = list
            .split(',')
            .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad grid value {v:?}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepAxis { param, values })
    }
}

/// The cartesian product of the axes, run once per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axes: Vec<SweepAxis>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            bail!("sweep needs at least one --grid axis");
        }
        if self.seeds.is_empty() {
            bail!("sweep needs at least one seed");
        }
        for (i, axis) in self.axes.iter().enumerate() {
            if self.axes[..i].iter().any(|a| a.param == axis.param) {
                bail!("sweep parameter {} given twice", axis.param.name());
            }
            if axis.values.is_empty() {
                bail!("grid for {} is empty", axis.param.name());
            }
            if let Some(v) = axis.values.iter().find(|v| !axis.param.admits(**v)) {
                bail!("grid value {v} is out of range for {}", axis.param.name());
            }
        }
        Ok(())
    }

    /// Grid points in row-major order over the axes.
    pub fn points(&self) -> Vec<Vec<f64>> {
        self.axes.iter().fold(vec![vec![]], |acc, axis| {
            acc.iter()
                .flat_map(|p| axis.values.iter().map(move |&v| [p.as_slice(), &[v]].concat()))
                .collect()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub point: Vec<f64>,
    pub seed: u64,
    /// Teacher mAP on the target validation split, in [0, 1].
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub point: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over seeds; zero for a single seed.
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub params: Vec<SweepParam>,
    /// Sorted by grid point, then seed.
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

/// Thread cap from the environment, falling back to the core count.
pub fn thread_limit() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_ENV} must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn ordered(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

/// Pretrains once per seed (per point too when pretraining reads the SPAR
/// weights), then adapts and evaluates every grid point.
pub fn run_sweep(cfg: &ExperimentConfig, spec: &SweepSpec, data: &Datasets, threads: usize) -> Result<SweepResult> {
    spec.validate()?;
    let points = spec.points();
    let configure = |point: &[f64], seed: u64| {
        let mut train = cfg.train.clone();
        train.seed = seed;
        for (axis, &v) in spec.axes.iter().zip(point) {
            axis.param.apply(&mut train, v);
        }
        train
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(|| -> Result<SweepResult> {
        let pretrain_per_point = cfg.train.pretrain_spar && spec.axes.iter().any(|a| a.param != SweepParam::M);
        let sources: BTreeMap<u64, DetectorParams> = if pretrain_per_point {
            BTreeMap::new()
        } else {
            spec.seeds
                .par_iter()
                .map(|&seed| {
                    let train = TrainConfig { seed, ..cfg.train.clone() };
                    Ok((seed, pretrain_source(&train, &data.source_train, &mut |_| {})?))
                })
                .collect::<Result<_>>()?
        };
        let jobs: Vec<(&Vec<f64>, u64)> = points.iter().flat_map(|p| spec.seeds.iter().map(move |&s| (p, s))).collect();
        let mut rows = jobs
            .par_iter()
            .map(|&(point, seed)| {
                let train = configure(point, seed);
                let source = match sources.get(&seed) {
                    Some(s) => s.clone(),
                    None => pretrain_source(&train, &data.source_train, &mut |_| {})?,
                };
                let outcome = adapt(&source, &train, &cfg.switches, &data.target_train, &mut |_| {})?;
                let map = evaluate_map(&outcome.teacher, &data.target_val, cfg.eval_iou).map;
                Ok(SweepRow { point: point.clone(), seed, map })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.sort_by(|a, b| ordered(&a.point, &b.point).then(a.seed.cmp(&b.seed)));
        let mut summary = points
            .iter()
            .map(|p| {
                let maps: Vec<f64> = rows.iter().filter(|r| &r.point == p).map(|r| r.map).collect();
                let (mean, std) = mean_std(&maps);
                SweepSummary { point: p.clone(), mean, std, n: maps.len() }
            })
            .collect::<Vec<_>>();
        summary.sort_by(|a, b| ordered(&a.point, &b.point));
        Ok(SweepResult { params: spec.axes.iter().map(|a| a.param).collect(), rows, summary })
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn header(params: &[SweepParam]) -> String {
    params.iter().map(|p| p.name()).collect::<Vec<_>>().join(",")
}

fn point_cells(point: &[f64]) -> String {
    point.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

impl SweepResult {
    pub fn rows_csv(&self) -> String {
        let mut s = format!("{},seed,map\n", header(&self.params));
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6}", point_cells(&r.point), r.seed, r.map);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{},mean,std,n\n", header(&self.params));
        for r in &self.summary {
            let _ = writeln!(s, "{},{:.6},{:.6},{}", point_cells(&r.point), r.mean, r.std, r.n);
        }
        s
    }

    pub fn write(&self, cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(&cfg.out_dir)?;
        let rows = cfg.out_dir.join(SWEEP_CSV);
        let summary = cfg.out_dir.join(SWEEP_SUMMARY_CSV);
        std::fs::write(&rows, self.rows_csv()).with_context(|| format!("writing {}", rows.display()))?;
        std::fs::write(&summary, self.summary_csv()).with_context(|| format!("writing {}", summary.display()))?;
        Ok((rows, summary))
    }
}
