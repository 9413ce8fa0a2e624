//! Training loop: adaptive-moment updates of the MAE objective with weight
//! decay, dropout, per-epoch validation, best-checkpoint retention, and
//! early stopping. Deterministic given the config seed.

use super::{Forecaster, ModelConfig, ModelError, Result};
use crate::dataio::{time_features, Normalizer, TrafficWindow};
use crate::diffcore::Tape;
use crate::graphops::GraphBundle;
use crate::rngutil;
use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// MAE over the fixed train evaluation subset, original units.
    pub train_mae: f64,
    /// MAE over the validation subset, original units.
    pub val_mae: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    /// Entry 0 is the pre-training evaluation; entry `e` follows epoch `e`.
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mae,val_mae\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_mae, e.val_mae));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub forecaster: Forecaster,
    pub history: TrainHistory,
    pub best_val_mae: f64,
    pub best_epoch: usize,
}

pub(crate) struct PreparedWindow {
    pub x_norm: Array2<f64>,
    pub y_norm: Array2<f64>,
    pub y_raw: Array2<f64>,
    pub tfeat: Array2<f64>,
}

pub(crate) fn prepare(window: &TrafficWindow, normalizer: &Normalizer) -> PreparedWindow {
    let mut x_norm = window.x.clone();
    normalizer.normalize(&mut x_norm);
    let mut y_norm = window.y.clone();
    normalizer.normalize(&mut y_norm);
    PreparedWindow {
        x_norm,
        y_norm,
        y_raw: window.y.clone(),
        tfeat: time_features(&window.input_times),
    }
}

/// Evenly spaced subset of `0..len`, at most `cap` indices, always including
/// index 0. Fixed across epochs so training curves are comparable.
pub(crate) fn evenly_spaced(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c > 0 && c < len => {
            (0..c).map(|i| i * len / c).collect()
        }
        _ => (0..len).collect(),
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    lr: f64,
    weight_decay: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(sizes: &[usize], lr: f64, weight_decay: f64) -> Adam {
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
            lr,
            weight_decay,
        }
    }

    fn step(&mut self, forecaster: &mut Forecaster, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        let mut idx = 0usize;
        let (m, v, lr, wd, t_now) = (&mut self.m, &mut self.v, self.lr, self.weight_decay, self.t);
        let _ = t_now;
        forecaster.params.visit_mut(&mut |_name, tensor| {
            let g = &grads[idx];
            let mi = &mut m[idx];
            let vi = &mut v[idx];
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let grad = g[j] + wd * data[j];
                mi[j] = Self::BETA1 * mi[j] + (1.0 - Self::BETA1) * grad;
                vi[j] = Self::BETA2 * vi[j] + (1.0 - Self::BETA2) * grad * grad;
                let m_hat = mi[j] / bc1;
                let v_hat = vi[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
            idx += 1;
        });
    }
}

/// Denormalized MAE of the forecaster over prepared windows.
fn eval_mae(
    forecaster: &Forecaster,
    bundle: &GraphBundle,
    windows: &[&PreparedWindow],
    normalizer: &Normalizer,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        let mut pred = forecaster.predict_normalized(bundle, &w.x_norm, &w.tfeat)?;
        normalizer.denormalize(&mut pred);
        for (p, y) in pred.iter().zip(w.y_raw.iter()) {
            total += (p - y).abs();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Train a freshly-initialized forecaster; the returned model carries the
/// best-validation parameters and the full epoch history.
pub fn train(
    config: ModelConfig,
    bundle: &GraphBundle,
    train_windows: &[TrafficWindow],
    val_windows: &[TrafficWindow],
    normalizer: &Normalizer,
) -> Result<TrainedModel> {
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(ModelError::Contract("train and validation windows must be nonempty".into()));
    }
    let n_nodes = train_windows[0].x.nrows();
    let m_in = train_windows[0].x.ncols();
    let mut forecaster = Forecaster::init(config.clone(), n_nodes, m_in)?;
    let horizon = forecaster.horizon();
    if train_windows[0].y.ncols() != horizon {
        return Err(ModelError::Contract(format!(
            "windows carry H={} targets but head ends at {horizon}",
            train_windows[0].y.ncols()
        )));
    }

    let prepared_train: Vec<PreparedWindow> =
        train_windows.iter().map(|w| prepare(w, normalizer)).collect();
    let prepared_val: Vec<PreparedWindow> =
        val_windows.iter().map(|w| prepare(w, normalizer)).collect();

    let train_idx = evenly_spaced(prepared_train.len(), config.windows_per_epoch);
    let train_subset: Vec<&PreparedWindow> = train_idx.iter().map(|&i| &prepared_train[i]).collect();
    let train_eval_idx = evenly_spaced(train_subset.len(), Some(64));
    let train_eval: Vec<&PreparedWindow> =
        train_eval_idx.iter().map(|&i| train_subset[i]).collect();
    let val_idx = evenly_spaced(prepared_val.len(), config.val_windows);
    let val_subset: Vec<&PreparedWindow> = val_idx.iter().map(|&i| &prepared_val[i]).collect();

    let sizes: Vec<usize> = forecaster.params.flat().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(&sizes, config.lr, config.weight_decay);
    let mut dropout_rng = rngutil::stream(config.seed, "dropout");

    let mut history = TrainHistory::default();
    let mae0_train = eval_mae(&forecaster, bundle, &train_eval, normalizer)?;
    let mae0_val = eval_mae(&forecaster, bundle, &val_subset, normalizer)?;
    history.epochs.push(EpochStats { epoch: 0, train_mae: mae0_train, val_mae: mae0_val });

    let mut best_val = mae0_val;
    let mut best_epoch = 0usize;
    let mut best_params = forecaster.params.clone();
    let mut stagnant = 0usize;

    for epoch in 1..=config.epochs {
        for batch in train_subset.chunks(config.batch_size.max(1)) {
            let mut grad_acc: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
            for w in batch {
                let mut tape = Tape::new();
                let (pred, pv) = forecaster.forward_tape(
                    &mut tape,
                    bundle,
                    &w.x_norm,
                    &w.tfeat,
                    Some(&mut dropout_rng),
                )?;
                let loss = forecaster.mae_loss(&mut tape, pred, &w.y_norm)?;
                let loss_val = tape.value(loss).data()[0];
                if !loss_val.is_finite() {
                    return Err(ModelError::Diverged {
                        epoch,
                        detail: format!("training loss became {loss_val}"),
                    });
                }
                let grads = tape.backward(loss)?;
                for (idx, var) in pv.vars.iter().enumerate() {
                    if let Some(g) = grads.wrt(*var) {
                        for (acc, gi) in grad_acc[idx].iter_mut().zip(g) {
                            *acc += gi;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad_acc {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            adam.step(&mut forecaster, &grad_acc);
        }

        let train_mae = eval_mae(&forecaster, bundle, &train_eval, normalizer)?;
        let val_mae = eval_mae(&forecaster, bundle, &val_subset, normalizer)?;
        if !val_mae.is_finite() {
            return Err(ModelError::Diverged { epoch, detail: format!("validation MAE {val_mae}") });
        }
        history.epochs.push(EpochStats { epoch, train_mae, val_mae });
        if val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            best_params = forecaster.params.clone();
            stagnant = 0;
        } else {
            stagnant += 1;
            if stagnant >= config.early_stop_patience {
                break;
            }
        }
    }

    forecaster.params = best_params;
    Ok(TrainedModel { forecaster, history, best_val_mae: best_val, best_epoch })
}

impl Forecaster {
    /// Predict one window in original units.
    pub fn predict_denormalized(
        &self,
        bundle: &GraphBundle,
        window: &TrafficWindow,
        normalizer: &Normalizer,
    ) -> Result<Array2<f64>> {
        let w = prepare(window, normalizer);
        let mut pred = self.predict_normalized(bundle, &w.x_norm, &w.tfeat)?;
        normalizer.denormalize(&mut pred);
        Ok(pred)
    }
}
