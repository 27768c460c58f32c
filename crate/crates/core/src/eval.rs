//! Metrics and experiment orchestration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::config::{ExperimentConfig, Method};
use crate::data::{CityDataset, DataError, NormStats, INFLOW, OUTFLOW};
use crate::matching::{match_auxiliary, match_service, MatchingError, RegionMatching};
use crate::network::{predict_values, NetworkError, NetworkParams};
use crate::synthgen::{generate, Scenario, ScenarioSpec, SynthError};
use crate::transfer::{finetune, pretrain_source, regiontrans_train, train_target_only, TrainConfig, TransferError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("missing channel '{0}'")]
    MissingChannel(String),
    #[error("{0} has no auxiliary data; A-Match is unavailable")]
    MissingAuxiliary(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Root mean squared error over every entry.
pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<f64, EvalError> {
    if pred.shape() != truth.shape() {
        return Err(EvalError::Shape(pred.shape().to_vec(), truth.shape().to_vec()));
    }
    let sse: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Mean of the inflow and outflow RMSEs.
pub fn avg_flow_rmse(per_channel: &[(String, f64)]) -> Result<f64, EvalError> {
    let get = |name: &str| {
        per_channel
            .iter()
            .find(|(c, _)| c == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| EvalError::MissingChannel(name.to_string()))
    };
    Ok((get(INFLOW)? + get(OUTFLOW)?) / 2.0)
}

/// Teacher-forced one-step predictions in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub timestamps: Vec<i64>,
    /// Per service channel: `(name, predictions [T, W, H], truth [T, W, H])`.
    pub channels: Vec<(String, Tensor, Tensor)>,
}

impl Evaluation {
    pub fn per_channel_rmse(&self) -> Result<Vec<(String, f64)>, EvalError> {
        self.channels
            .iter()
            .map(|(c, p, t)| Ok((c.clone(), rmse(p, t)?)))
            .collect()
    }

    pub fn avg_rmse(&self) -> Result<f64, EvalError> {
        avg_flow_rmse(&self.per_channel_rmse()?)
    }
}

/// Predicts every window of `data` whose input ends at a timestamp in
/// `ends` (all windows when `None`), normalizing with `stats` and
/// denormalizing predictions before comparison with the raw frames.
pub fn evaluate(
    params: &NetworkParams,
    data: &CityDataset,
    stats: &NormStats,
    k: usize,
    ends: Option<&[i64]>,
) -> Result<Evaluation, EvalError> {
    let samples = data.samples(stats, k)?;
    let samples: Vec<_> = match ends {
        Some(ends) => samples.into_iter().filter(|s| ends.contains(&s.t)).collect(),
        None => samples,
    };
    if samples.is_empty() {
        return Err(EvalError::Invalid(format!(
            "no evaluation windows in {} for k = {k}",
            data.name
        )));
    }
    let grid = data.grid();
    let (w, h) = (grid.width(), grid.height());
    let c = data.service.len();
    let n = samples.len();
    let mut preds = vec![vec![0.0; n * w * h]; c];
    let mut truths = vec![vec![0.0; n * w * h]; c];
    for (si, s) in samples.iter().enumerate() {
        let out = predict_values(params, &s.input, &s.external)?;
        if out.shape() != [w, h, c] {
            return Err(EvalError::Shape(out.shape().to_vec(), vec![w, h, c]));
        }
        for (ci, series) in data.service.iter().enumerate() {
            let frame = series.frame(s.t + 1)?;
            for p in 0..w * h {
                preds[ci][si * w * h + p] = stats.denormalize_value(series.channel(), out.data()[p * c + ci])?;
                truths[ci][si * w * h + p] = frame[p];
            }
        }
    }
    let channels = data
        .service
        .iter()
        .zip(preds.into_iter().zip(truths))
        .map(|(series, (p, t))| {
            Ok((
                series.channel().to_string(),
                Tensor::new(vec![n, w, h], p)?,
                Tensor::new(vec![n, w, h], t)?,
            ))
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(Evaluation {
        timestamps: samples.iter().map(|s| s.t).collect(),
        channels,
    })
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub scenario: String,
    /// `method` for the method comparison, `w-sweep` for the sweep.
    pub kind: String,
    pub method: String,
    pub history: usize,
    pub w: f64,
    pub seed: u64,
    pub rmse: f64,
    pub inflow_rmse: f64,
    pub outflow_rmse: f64,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Run {
    TargetOnly,
    Transfer { amatch: bool, w_bits: u64 },
}

struct Outcome {
    rmse: f64,
    inflow: f64,
    outflow: f64,
    secs: f64,
}

/// Runs experiments while caching pre-trained source parameters, so
/// scenarios that share a source city and seed pre-train once.
pub struct Runner {
    pub config: ExperimentConfig,
    pretrained: BTreeMap<(String, u64), NetworkParams>,
    /// Progress lines go here when set.
    pub verbose: bool,
}

fn source_key(spec: &ScenarioSpec) -> String {
    format!(
        "{}x{} {:?} {:?} {} {} {} {} {:?}",
        spec.source_width,
        spec.source_height,
        spec.source_mix,
        spec.source_layout,
        spec.noise,
        spec.aux_noise,
        spec.source_len,
        spec.ext_len,
        spec.amplitude_spread
    )
}

impl Runner {
    pub fn new(config: ExperimentConfig) -> Self {
        Runner {
            config,
            pretrained: BTreeMap::new(),
            verbose: false,
        }
    }

    fn log(&self, msg: impl FnOnce() -> String) {
        if self.verbose {
            eprintln!("{}", msg());
        }
    }

    /// Source parameters for `seed`, trained on first use.
    pub fn pretrained(
        &mut self,
        spec: &ScenarioSpec,
        scenario: &Scenario,
        seed: u64,
    ) -> Result<NetworkParams, EvalError> {
        let key = (source_key(spec), seed);
        if let Some(p) = self.pretrained.get(&key) {
            return Ok(p.clone());
        }
        let started = Instant::now();
        let cfg = TrainConfig {
            seed,
            ..self.config.pretrain.clone()
        };
        let report = pretrain_source(&scenario.source, &self.config.network, &cfg)?;
        self.log(|| {
            format!(
                "pretrain seed {seed}: {} epochs, loss {:.5}, {:.1}s",
                report.epochs.len(),
                report.final_loss().unwrap_or(f64::NAN),
                started.elapsed().as_secs_f64()
            )
        });
        self.pretrained.insert(key, report.params.clone());
        Ok(report.params)
    }

    fn run_one(
        &mut self,
        spec: &ScenarioSpec,
        scenario: &Scenario,
        seed: u64,
        run: Run,
        matchings: &mut BTreeMap<bool, RegionMatching>,
    ) -> Result<Outcome, EvalError> {
        let cfg = TrainConfig {
            seed,
            ..self.config.transfer.clone()
        };
        let stats = &scenario.source.norm;
        let started = Instant::now();
        let params = match run {
            Run::TargetOnly => train_target_only(&scenario.target, stats, &self.config.network, &cfg)?.params,
            Run::Transfer { amatch, w_bits } => {
                let w = f64::from_bits(w_bits);
                let init = self.pretrained(spec, scenario, seed)?;
                let started = Instant::now();
                let params = if w == 0.0 {
                    finetune(&init, &scenario.target, stats, &cfg)?.params
                } else {
                    if !matchings.contains_key(&amatch) {
                        let m = if amatch {
                            if scenario.target.auxiliary.is_none() || scenario.source.auxiliary.is_none() {
                                return Err(EvalError::MissingAuxiliary(spec.name.clone()));
                            }
                            match_auxiliary(&scenario.target, &scenario.source)?
                        } else {
                            match_service(&scenario.target, &scenario.source)?
                        };
                        matchings.insert(amatch, m);
                    }
                    let cfg = TrainConfig { w, ..cfg };
                    regiontrans_train(&init, &scenario.target, &scenario.source, &matchings[&amatch], &cfg)?.params
                };
                let secs = started.elapsed().as_secs_f64();
                return self.score(&params, scenario, secs);
            }
        };
        self.score(&params, scenario, started.elapsed().as_secs_f64())
    }

    fn score(&self, params: &NetworkParams, scenario: &Scenario, secs: f64) -> Result<Outcome, EvalError> {
        let ev = evaluate(
            params,
            &scenario.target_test,
            &scenario.source.norm,
            self.config.transfer.k,
            None,
        )?;
        let per = ev.per_channel_rmse()?;
        let get = |c: &str| per.iter().find(|(n, _)| n == c).map(|(_, v)| *v).unwrap_or(f64::NAN);
        Ok(Outcome {
            rmse: avg_flow_rmse(&per)?,
            inflow: get(INFLOW),
            outflow: get(OUTFLOW),
            secs,
        })
    }

    /// Every configured seed × method, plus the w sweep when `sweep` is set.
    /// Rows are sorted by (kind, method, w, seed).
    pub fn run(
        &mut self,
        spec: &ScenarioSpec,
        methods: &[Method],
        seeds: &[u64],
        sweep: &[f64],
    ) -> Result<Vec<EvalResult>, EvalError> {
        if methods.is_empty() && sweep.is_empty() {
            return Err(EvalError::Invalid("no methods requested".into()));
        }
        if seeds.is_empty() {
            return Err(EvalError::Invalid("no seeds requested".into()));
        }
        let mut rows = Vec::new();
        for &seed in seeds {
            let seeded = spec.with_seed(seed);
            let scenario = generate(&seeded)?;
            let has_aux = scenario.target.auxiliary.is_some() && scenario.source.auxiliary.is_some();
            if methods.contains(&Method::RegiontransAmatch) && !has_aux {
                return Err(EvalError::MissingAuxiliary(spec.name.clone()));
            }
            let w_default = self.config.transfer.w;
            let mut cache: BTreeMap<Run, Outcome> = BTreeMap::new();
            let mut matchings = BTreeMap::new();
            let mut jobs: Vec<(String, String, f64, Run)> = methods
                .iter()
                .map(|&m| {
                    let run = match m {
                        Method::TargetOnly => Run::TargetOnly,
                        Method::Finetune => Run::Transfer {
                            amatch: false,
                            w_bits: 0.0f64.to_bits(),
                        },
                        Method::RegiontransSmatch => Run::Transfer {
                            amatch: false,
                            w_bits: w_default.to_bits(),
                        },
                        Method::RegiontransAmatch => Run::Transfer {
                            amatch: true,
                            w_bits: w_default.to_bits(),
                        },
                    };
                    let w = if m == Method::Finetune {
                        0.0
                    } else if m == Method::TargetOnly {
                        f64::NAN
                    } else {
                        w_default
                    };
                    ("method".to_string(), m.name().to_string(), w, run)
                })
                .collect();
            let sweep_method = if has_aux {
                Method::RegiontransAmatch
            } else {
                Method::RegiontransSmatch
            };
            for &w in sweep {
                let run = Run::Transfer {
                    amatch: has_aux && w != 0.0,
                    w_bits: w.to_bits(),
                };
                jobs.push(("w-sweep".into(), sweep_method.name().into(), w, run));
            }
            for (kind, method, w, run) in jobs {
                // Fine-tuning is transfer at w = 0 whatever the matching.
                let key = match run {
                    Run::Transfer { w_bits, .. } if f64::from_bits(w_bits) == 0.0 => Run::Transfer {
                        amatch: false,
                        w_bits: 0.0f64.to_bits(),
                    },
                    r => r,
                };
                if !cache.contains_key(&key) {
                    let out = self.run_one(&seeded, &scenario, seed, key, &mut matchings)?;
                    let wtxt = if w.is_nan() { String::new() } else { format!(" w={w}") };
                    self.log(|| {
                        format!(
                            "{} seed {seed} {method}{wtxt}: rmse {:.4} ({:.1}s)",
                            spec.name, out.rmse, out.secs
                        )
                    });
                    cache.insert(key, out);
                }
                let out = &cache[&key];
                rows.push(EvalResult {
                    scenario: spec.name.clone(),
                    kind,
                    method,
                    history: spec.target_len,
                    w: if w.is_nan() { 0.0 } else { w },
                    seed,
                    rmse: out.rmse,
                    inflow_rmse: out.inflow,
                    outflow_rmse: out.outflow,
                    runtime_secs: out.secs,
                });
            }
        }
        rows.sort_by(|a, b| {
            (a.kind.as_str(), method_rank(&a.method), a.w.to_bits(), a.seed).cmp(&(
                b.kind.as_str(),
                method_rank(&b.method),
                b.w.to_bits(),
                b.seed,
            ))
        });
        Ok(rows)
    }
}

fn method_rank(name: &str) -> usize {
    Method::ALL.iter().position(|m| m.name() == name).unwrap_or(usize::MAX)
}

/// One-shot form of [`Runner::run`] with no w sweep.
pub fn run_experiment(
    spec: &ScenarioSpec,
    methods: &[Method],
    seeds: &[u64],
    config: &ExperimentConfig,
) -> Result<Vec<EvalResult>, EvalError> {
    Runner::new(config.clone()).run(spec, methods, seeds, &[])
}

/// Mean RMSE per method over the rows of one kind.
pub fn mean_by_method(rows: &[EvalResult], kind: &str) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.kind == kind) {
        let key = if kind == "w-sweep" {
            format!("{}", r.w)
        } else {
            r.method.clone()
        };
        let e = acc.entry(key).or_default();
        e.0 += r.rmse;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

pub fn write_results(rows: &[EvalResult], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<EvalResult>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<EvalResult>, _>>()?)
}

struct Stat {
    sum: f64,
    sq: f64,
    n: usize,
}

impl Stat {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.sq += x * x;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    fn std(&self) -> f64 {
        let m = self.mean();
        (self.sq / self.n as f64 - m * m).max(0.0).sqrt()
    }
}

/// Writes `table1.csv` (one row per scenario, method and history length)
/// and `fig3.csv` (one row per scenario, history length and w) into `dir`.
/// Runtimes are left out so reruns give identical files.
pub fn emit_plot_data(rows: &[EvalResult], dir: &Path) -> Result<(), EvalError> {
    if rows.is_empty() {
        return Err(EvalError::Invalid("no results to summarize".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut table: BTreeMap<(String, usize, usize, String), Stat> = BTreeMap::new();
    let mut fig: BTreeMap<(String, usize, u64), Stat> = BTreeMap::new();
    for r in rows {
        if r.kind == "w-sweep" {
            fig.entry((r.scenario.clone(), r.history, r.w.to_bits()))
                .or_insert(Stat {
                    sum: 0.0,
                    sq: 0.0,
                    n: 0,
                })
                .push(r.rmse);
        } else {
            table
                .entry((r.scenario.clone(), r.history, method_rank(&r.method), r.method.clone()))
                .or_insert(Stat {
                    sum: 0.0,
                    sq: 0.0,
                    n: 0,
                })
                .push(r.rmse);
        }
    }
    let path = dir.join("table1.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["scenario", "method", "history", "mean_rmse", "std_rmse", "seeds"])?;
    for ((scenario, history, _, method), s) in &table {
        w.write_record([
            scenario.clone(),
            method.clone(),
            history.to_string(),
            s.mean().to_string(),
            s.std().to_string(),
            s.n.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;
    let path = dir.join("fig3.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["scenario", "history", "w", "mean_rmse", "std_rmse", "seeds"])?;
    for ((scenario, history, wb), s) in &fig {
        w.write_record([
            scenario.clone(),
            history.to_string(),
            f64::from_bits(*wb).to_string(),
            s.mean().to_string(),
            s.std().to_string(),
            s.n.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}
