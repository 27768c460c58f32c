//! Training regimes: source pre-training, target-only training, fine-tuning
//! and region-matched transfer.
//!
//! Every regime runs the same epoch loop. Each window gets its own tape,
//! gradients are averaged over a batch (all windows by default) and one ADAM
//! step is taken per batch.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamConfig, AdamState, AutodiffError, Tape, Tensor, Var};
use crate::data::{CityDataset, DataError, NormStats, Sample};
use crate::matching::RegionMatching;
use crate::network::{encode, encode_values, init_params, predict, NetworkConfig, NetworkError, NetworkParams};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("trade-off weight w = {0} is outside [0, 1]")]
    Weight(f64),
    #[error("{0} has no usable windows for k = {1}")]
    TooFewFrames(String, usize),
    #[error("source has no window ending at target timestamp {0}")]
    Misaligned(i64),
    #[error("matching does not fit the cities: {0}")]
    Matching(String),
    #[error("non-finite loss or gradient in epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Optimizer schedule and transfer knobs shared by all regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub k: usize,
    /// Weight of the representation term; ignored outside transfer.
    pub w: f64,
    /// Windows per optimizer step; `0` means all windows of the epoch.
    pub batch_size: usize,
    /// Stop after this many epochs without sufficient improvement; `0` disables.
    pub patience: usize,
    pub min_improvement: f64,
    /// Compute source representations once from the initial parameters.
    pub frozen_anchor: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            adam: AdamConfig::default(),
            seed: 1,
            k: 6,
            w: 0.75,
            batch_size: 0,
            patience: 10,
            min_improvement: 1e-6,
            frozen_anchor: false,
        }
    }
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(TransferError::Weight(self.w));
        }
        if self.k == 0 {
            return Err(TransferError::Config("k must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(TransferError::Config(format!("lr must be positive, got {}", a.lr)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(TransferError::Config("betas must lie in [0, 1)".into()));
        }
        if !(a.epsilon > 0.0) {
            return Err(TransferError::Config("epsilon must be positive".into()));
        }
        if !(self.min_improvement >= 0.0) {
            return Err(TransferError::Config("min_improvement must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub pred_loss: f64,
    pub rep_loss: f64,
    pub combined_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean losses over the epoch's windows, measured before each update.
    pub epochs: Vec<EpochLoss>,
    pub params: NetworkParams,
    /// Parameters after every optimizer step, when requested.
    pub trajectory: Vec<NetworkParams>,
    pub windows: usize,
    pub wall_clock: Duration,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,pred_loss,rep_loss,combined_loss\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.pred_loss, e.rep_loss, e.combined_loss);
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.combined_loss)
    }
}

/// Mean squared error over every entry.
pub fn prediction_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var, TransferError> {
    let diff = tape.sub(pred, truth)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

/// Mean over target regions of `ρ · ‖x_r − x_{M(r)}‖²`.
///
/// `target_rep` is `[W, H, L]`, `source_rep` is `[W', H', L]`; `rows[p]` is
/// the source position matched to target position `p` and `weights[p]` its
/// clamped correlation.
pub fn representation_loss(
    tape: &mut Tape,
    target_rep: Var,
    source_rep: Var,
    rows: &[usize],
    weights: &[f64],
) -> Result<Var, TransferError> {
    let shape = tape.shape(target_rep).to_vec();
    let width = *shape.last().ok_or(AutodiffError::Empty("representation"))?;
    let n = tape.value(target_rep).len() / width;
    if rows.len() != n || weights.len() != n {
        return Err(TransferError::Matching(format!(
            "{} matched regions for {n} target regions",
            rows.len()
        )));
    }
    let matched = tape.gather_rows(source_rep, rows)?;
    let flat = tape.reshape(target_rep, vec![n, width])?;
    let diff = tape.sub(flat, matched)?;
    let sq = tape.mul(diff, diff)?;
    let w: Vec<f64> = weights.iter().flat_map(|&r| std::iter::repeat_n(r, width)).collect();
    let weighted = tape.mul_const(sq, Tensor::new(vec![n, width], w)?)?;
    let total = tape.sum(weighted)?;
    Ok(tape.scale(total, 1.0 / n as f64)?)
}

/// `(1 − w)·pred + w·rep` on the tape.
pub fn combined_loss(tape: &mut Tape, pred: Var, rep: Var, w: f64) -> Result<Var, TransferError> {
    check_weight(w)?;
    let a = tape.scale(pred, 1.0 - w)?;
    let b = tape.scale(rep, w)?;
    Ok(tape.add(a, b)?)
}

/// Scalar form of [`combined_loss`].
pub fn combine(pred: f64, rep: f64, w: f64) -> Result<f64, TransferError> {
    check_weight(w)?;
    Ok((1.0 - w) * pred + w * rep)
}

fn check_weight(w: f64) -> Result<(), TransferError> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(TransferError::Weight(w))
    }
}

struct Window {
    sample: Sample,
    source: Option<Tensor>,
}

enum Anchor {
    None,
    Live {
        rows: Vec<usize>,
        weights: Vec<f64>,
    },
    Frozen {
        rows: Vec<usize>,
        weights: Vec<f64>,
        reps: Vec<Tensor>,
    },
}

/// Options that only the test suite and CLI need.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub record_trajectory: bool,
}

fn train_loop(
    init: NetworkParams,
    windows: &[Window],
    anchor: &Anchor,
    w: f64,
    config: &TrainConfig,
    options: RunOptions,
) -> Result<TrainReport, TransferError> {
    let started = Instant::now();
    let mut params = init.to_tensors();
    let mut adam = AdamState::new(config.adam, &params);
    let mut current = init;
    let mut epochs = Vec::new();
    let mut trajectory = Vec::new();
    let batch = if config.batch_size == 0 {
        windows.len()
    } else {
        config.batch_size.min(windows.len())
    };
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 0..config.epochs {
        if batch < windows.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.sort_unstable();
            order.shuffle(&mut rng);
        }
        let (mut sum_p, mut sum_r, mut sum_c) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(batch) {
            let mut acc: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            for &wi in chunk {
                let win = &windows[wi];
                let mut tape = Tape::new();
                let vars = current.register(&mut tape, true);
                let (rep, pred) = predict(&mut tape, &vars, &win.sample.input, &win.sample.external)?;
                let truth = tape.constant(win.sample.target.clone());
                let p = prediction_loss(&mut tape, pred, truth)?;
                let (loss, r) = if w == 0.0 {
                    (p, None)
                } else {
                    let (source_rep, rows, weights) = match anchor {
                        Anchor::None => return Err(TransferError::Matching("transfer without matching".into())),
                        Anchor::Live { rows, weights } => {
                            let input = win.source.as_ref().expect("live anchor windows carry source input");
                            (encode(&mut tape, &vars, input)?, rows, weights)
                        }
                        Anchor::Frozen { rows, weights, reps } => (tape.constant(reps[wi].clone()), rows, weights),
                    };
                    let r = representation_loss(&mut tape, rep, source_rep, rows, weights)?;
                    (combined_loss(&mut tape, p, r, w)?, Some(r))
                };
                let pv = tape.value(p).item();
                let rv = r.map_or(0.0, |r| tape.value(r).item());
                let cv = tape.value(loss).item();
                if !cv.is_finite() {
                    return Err(TransferError::NonFinite { epoch });
                }
                sum_p += pv;
                sum_r += rv;
                sum_c += cv;
                tape.backward(loss)?;
                for (a, g) in acc.iter_mut().zip(vars.grads(&tape)) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for a in &mut acc {
                a.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            adam.step(&mut params, &acc, true)
                .map_err(|_| TransferError::NonFinite { epoch })?;
            current = current.with_tensors(params.clone())?;
            if options.record_trajectory {
                trajectory.push(current.clone());
            }
        }
        let n = windows.len() as f64;
        let combined = sum_c / n;
        epochs.push(EpochLoss {
            epoch,
            pred_loss: sum_p / n,
            rep_loss: sum_r / n,
            combined_loss: combined,
        });
        if config.patience > 0 {
            if combined < best - config.min_improvement {
                best = combined;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
    }
    Ok(TrainReport {
        epochs,
        params: current,
        trajectory,
        windows: windows.len(),
        wall_clock: started.elapsed(),
    })
}

fn target_windows(city: &CityDataset, stats: &NormStats, k: usize) -> Result<Vec<Window>, TransferError> {
    let samples = city.samples(stats, k)?;
    if samples.is_empty() {
        return Err(TransferError::TooFewFrames(city.name.clone(), k));
    }
    Ok(samples
        .into_iter()
        .map(|sample| Window { sample, source: None })
        .collect())
}

/// Trains `init` on every window of `city`, prediction loss only.
pub fn train_prediction(
    init: NetworkParams,
    city: &CityDataset,
    stats: &NormStats,
    config: &TrainConfig,
    options: RunOptions,
) -> Result<TrainReport, TransferError> {
    config.validate()?;
    let windows = target_windows(city, stats, config.k)?;
    train_loop(init, &windows, &Anchor::None, 0.0, config, options)
}

/// Fresh initialization from `config.seed`, then prediction-only training on
/// the source city.
pub fn pretrain_source(
    source: &CityDataset,
    network: &NetworkConfig,
    config: &TrainConfig,
) -> Result<TrainReport, TransferError> {
    let init = init_params(network, config.seed)?;
    train_prediction(init, source, &source.norm, config, RunOptions::default())
}

/// The same regime as [`pretrain_source`], applied to the target's short history.
pub fn train_target_only(
    target: &CityDataset,
    stats: &NormStats,
    network: &NetworkConfig,
    config: &TrainConfig,
) -> Result<TrainReport, TransferError> {
    let init = init_params(network, config.seed)?;
    train_prediction(init, target, stats, config, RunOptions::default())
}

/// Continues training source parameters on target data without the
/// representation term.
pub fn finetune(
    pretrained: &NetworkParams,
    target: &CityDataset,
    stats: &NormStats,
    config: &TrainConfig,
) -> Result<TrainReport, TransferError> {
    finetune_with(pretrained, target, stats, config, RunOptions::default())
}

pub fn finetune_with(
    pretrained: &NetworkParams,
    target: &CityDataset,
    stats: &NormStats,
    config: &TrainConfig,
    options: RunOptions,
) -> Result<TrainReport, TransferError> {
    train_prediction(pretrained.clone(), target, stats, config, options)
}

/// Region-matched transfer. Both cities are normalized with `source.norm`;
/// source windows are taken at the target's timestamps.
pub fn regiontrans_train(
    pretrained: &NetworkParams,
    target: &CityDataset,
    source: &CityDataset,
    matching: &RegionMatching,
    config: &TrainConfig,
) -> Result<TrainReport, TransferError> {
    regiontrans_train_with(pretrained, target, source, matching, config, RunOptions::default())
}

pub fn regiontrans_train_with(
    pretrained: &NetworkParams,
    target: &CityDataset,
    source: &CityDataset,
    matching: &RegionMatching,
    config: &TrainConfig,
    options: RunOptions,
) -> Result<TrainReport, TransferError> {
    config.validate()?;
    if config.w == 0.0 {
        return finetune_with(pretrained, target, &source.norm, config, options);
    }
    if matching.target_grid != target.grid() || matching.source_grid != source.grid() {
        return Err(TransferError::Matching(format!(
            "matching is {}x{} -> {}x{}, cities are {}x{} -> {}x{}",
            matching.target_grid.width(),
            matching.target_grid.height(),
            matching.source_grid.width(),
            matching.source_grid.height(),
            target.grid().width(),
            target.grid().height(),
            source.grid().width(),
            source.grid().height()
        )));
    }
    let stats = &source.norm;
    let mut windows = target_windows(target, stats, config.k)?;
    for win in &mut windows {
        let t = win.sample.t;
        if t - config.k as i64 + 1 < source.t_start() || t + 1 > source.t_end() {
            return Err(TransferError::Misaligned(t));
        }
        win.source = Some(source.sample_at(stats, config.k, t)?.input);
    }
    let (rows, weights) = matching.position_pairs();
    let anchor = if config.frozen_anchor {
        let reps = windows
            .iter()
            .map(|w| encode_values(pretrained, w.source.as_ref().unwrap()))
            .collect::<Result<Vec<_>, _>>()?;
        Anchor::Frozen { rows, weights, reps }
    } else {
        Anchor::Live { rows, weights }
    };
    train_loop(pretrained.clone(), &windows, &anchor, config.w, config, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RegionGrid, UrbanImageTimeSeries, INFLOW, OUTFLOW};

    fn scalar_loss(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).item()
    }

    #[test]
    fn prediction_loss_hand_cases() {
        let v = scalar_loss(|t| {
            let p = t.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
            let y = t.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
            prediction_loss(t, p, y).unwrap()
        });
        assert_eq!(v, 12.5);
        let v = scalar_loss(|t| {
            let p = t.constant(Tensor::zeros(&[2, 3, 2]));
            let y = t.constant(Tensor::filled(&[2, 3, 2], 1.0));
            prediction_loss(t, p, y).unwrap()
        });
        assert_eq!(v, 1.0);
    }

    #[test]
    fn representation_loss_hand_cases() {
        let v = scalar_loss(|t| {
            let a = t.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
            let b = t.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap());
            representation_loss(t, a, b, &[0], &[0.5]).unwrap()
        });
        assert_eq!(v, 1.0);
        let v = scalar_loss(|t| {
            let a = t.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
            let b = t.constant(Tensor::new(vec![1, 1, 2], vec![9.0, -9.0]).unwrap());
            representation_loss(t, a, b, &[0, 0], &[0.0, 0.0]).unwrap()
        });
        assert_eq!(v, 0.0);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 1, 2]));
        assert!(representation_loss(&mut tape, a, a, &[0], &[1.0]).is_err());
    }

    #[test]
    fn combined_loss_weights() {
        assert_eq!(combine(0.4, 0.2, 0.75).unwrap(), 0.25 * 0.4 + 0.75 * 0.2);
        assert_eq!(combine(0.4, 0.2, 0.0).unwrap(), 0.4);
        assert_eq!(combine(0.4, 0.2, 1.0).unwrap(), 0.2);
        assert!(matches!(combine(1.0, 1.0, 1.5), Err(TransferError::Weight(_))));
        assert!(combine(1.0, 1.0, -0.1).is_err());
        let v = scalar_loss(|t| {
            let p = t.constant(Tensor::scalar(0.4));
            let r = t.constant(Tensor::scalar(0.2));
            combined_loss(t, p, r, 0.75).unwrap()
        });
        assert!((v - 0.25).abs() < 1e-15);
    }

    fn city(name: &str, t_start: i64, len: usize, f: impl Fn(i64, usize, usize, usize) -> f64) -> CityDataset {
        let grid = RegionGrid::new(3, 2).unwrap();
        let service = [INFLOW, OUTFLOW]
            .iter()
            .enumerate()
            .map(|(c, ch)| {
                let mut v = Vec::new();
                for t in 0..len as i64 {
                    for i in 0..3 {
                        for j in 0..2 {
                            v.push(f(t_start + t, i, j, c));
                        }
                    }
                }
                UrbanImageTimeSeries::new(grid, t_start, Tensor::new(vec![len, 3, 2], v).unwrap(), *ch).unwrap()
            })
            .collect::<Vec<_>>();
        let ext = Tensor::new(
            vec![len, 2],
            (0..len).flat_map(|t| [(t % 2) as f64, 1.0 - (t % 2) as f64]).collect(),
        )
        .unwrap();
        let norm = NormStats::from_series(&service);
        CityDataset::new(name, service, None, Some(ext), norm).unwrap()
    }

    fn wave(t: i64, i: usize, j: usize, c: usize) -> f64 {
        5.0 + 3.0 * ((t as f64) * 0.7 + i as f64 + 2.0 * j as f64 + c as f64).sin()
    }

    fn net() -> NetworkConfig {
        NetworkConfig {
            input_channels: 2,
            hidden_channels: vec![3],
            kernel_size: 3,
            head_hidden: 4,
            output_channels: 2,
            ext_len: 2,
        }
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            k: 3,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            patience: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn window_count_and_report_length() {
        let target = city("t", 0, 24, wave);
        let cfg = TrainConfig {
            epochs: 2,
            k: 6,
            ..quick(2)
        };
        let rep = train_target_only(&target, &target.norm, &net(), &cfg).unwrap();
        assert_eq!(rep.windows, 18);
        assert_eq!(rep.epochs.len(), 2);
        let csv = rep.to_csv();
        assert!(csv.starts_with("epoch,pred_loss,rep_loss,combined_loss\n0,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn constant_source_is_learned() {
        let source = city("s", 0, 20, |_, _, _, c| 2.0 + c as f64);
        let mut norm = NormStats::new();
        norm.insert(INFLOW, 0.0, 4.0);
        norm.insert(OUTFLOW, 0.0, 4.0);
        let source = source.with_norm(norm);
        let cfg = TrainConfig {
            epochs: 50,
            adam: AdamConfig {
                lr: 0.02,
                beta1: 0.5,
                ..AdamConfig::default()
            },
            ..quick(50)
        };
        let rep = pretrain_source(&source, &net(), &cfg).unwrap();
        assert!(rep.final_loss().unwrap() < 1e-4, "{:?}", rep.final_loss());
    }

    #[test]
    fn deterministic_and_loss_decreases() {
        let target = city("t", 0, 30, wave);
        let a = train_target_only(&target, &target.norm, &net(), &quick(30)).unwrap();
        let b = train_target_only(&target, &target.norm, &net(), &quick(30)).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.epochs.last().unwrap().pred_loss < a.epochs[0].pred_loss);
    }

    #[test]
    fn zero_epochs_keep_parameters() {
        let target = city("t", 0, 10, wave);
        let init = init_params(&net(), 4).unwrap();
        let rep = finetune(&init, &target, &target.norm, &quick(0)).unwrap();
        assert_eq!(rep.params, init);
        assert!(rep.epochs.is_empty());
    }

    #[test]
    fn w_zero_matches_finetune_trajectory() {
        let source = city("s", 0, 40, wave);
        let target = city("t", 30, 10, |t, i, j, c| wave(t, 2 - i, j, c) * 1.3);
        let init = init_params(&net(), 9).unwrap();
        let m = RegionMatching::identity(target.grid(), 0.8);
        let opts = RunOptions {
            record_trajectory: true,
        };
        let cfg = TrainConfig { w: 0.0, ..quick(5) };
        let a = regiontrans_train_with(&init, &target, &source, &m, &cfg, opts).unwrap();
        let b = finetune_with(&init, &target, &source.norm, &cfg, opts).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.trajectory.len(), 5);
    }

    #[test]
    fn self_transfer_has_zero_representation_loss() {
        let source = city("s", 0, 12, wave);
        let init = init_params(&net(), 2).unwrap();
        let m = RegionMatching::identity(source.grid(), 1.0);
        let cfg = TrainConfig { w: 0.5, ..quick(4) };
        let rep = regiontrans_train(&init, &source, &source, &m, &cfg).unwrap();
        assert!(rep.epochs.iter().all(|e| e.rep_loss == 0.0));
        let frozen = TrainConfig {
            frozen_anchor: true,
            ..cfg
        };
        let rep = regiontrans_train(&init, &source, &source, &m, &frozen).unwrap();
        assert_eq!(rep.epochs[0].rep_loss, 0.0);
        assert!(rep.epochs[3].rep_loss > 0.0);
    }

    #[test]
    fn transfer_rejects_misaligned_and_bad_weight() {
        let source = city("s", 0, 20, wave);
        let target = city("t", 18, 10, wave);
        let init = init_params(&net(), 2).unwrap();
        let m = RegionMatching::identity(target.grid(), 1.0);
        let err = regiontrans_train(&init, &target, &source, &m, &quick(1)).unwrap_err();
        assert!(matches!(err, TransferError::Misaligned(_)), "{err}");
        let cfg = TrainConfig { w: 2.0, ..quick(1) };
        assert!(matches!(
            regiontrans_train(&init, &target, &source, &m, &cfg),
            Err(TransferError::Weight(_))
        ));
    }

    #[test]
    fn non_finite_aborts_with_epoch() {
        let target = city("t", 0, 10, wave);
        let mut init = init_params(&net(), 2).unwrap();
        init.head[1].bias.data_mut()[0] = f64::NAN;
        let err = finetune(&init, &target, &target.norm, &quick(3)).unwrap_err();
        assert!(matches!(err, TransferError::NonFinite { epoch: 0 }));
    }

    #[test]
    fn early_stop_on_plateau() {
        let target = city("t", 0, 10, wave);
        let init = init_params(&net(), 2).unwrap();
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 1e-12,
                ..AdamConfig::default()
            },
            patience: 3,
            ..quick(50)
        };
        let rep = finetune(&init, &target, &target.norm, &cfg).unwrap();
        assert_eq!(rep.epochs.len(), 4);
    }

    #[test]
    fn mini_batches_take_more_steps() {
        let target = city("t", 0, 13, wave);
        let init = init_params(&net(), 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            ..quick(2)
        };
        let opts = RunOptions {
            record_trajectory: true,
        };
        let a = finetune_with(&init, &target, &target.norm, &cfg, opts).unwrap();
        assert_eq!(a.trajectory.len(), 2 * 3);
        let b = finetune_with(&init, &target, &target.norm, &cfg, opts).unwrap();
        assert_eq!(a.params, b.params);
    }
}
