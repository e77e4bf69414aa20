//! Training loop: Adam with weight decay, stepped LR decay, early
//! stopping on validation MAE, plus evaluation and a small grid search.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    extract_window, make_windows, metric_mae, metric_mape, metric_rmse, naive_predict,
    split_622, DataError, StgDataset, Window,
};
use crate::graph::{generate_walks, WalkSet};
use crate::model::{FwdCtx, ModelConfig, ModelError, SpoTModel};
use crate::numerics::{NumericsError, ParamSet, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("no gradient reached parameter {0}")]
    MissingGrad(String),
    #[error("non-finite value {value} in {what} at {param}[{coord}] (epoch {epoch})")]
    NonFinite {
        what: &'static str,
        param: String,
        coord: usize,
        value: f64,
        epoch: usize,
    },
    #[error("training loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("no training windows: the split is too short for t_in + t_out")]
    NoWindows,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_rate: f64,
    pub decay_epochs: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            weight_decay: 0.0001,
            lr_decay_rate: 0.5,
            decay_epochs: vec![20, 40, 60],
            max_epochs: 300,
            patience: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Learning rate in effect for a 1-based epoch number: the base rate
/// multiplied by the decay factor once per passed milestone.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let hits = cfg.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.lr * cfg.lr_decay_rate.powi(hits as i32)
}

/// First and second moment estimates, one slot per parameter scalar.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One optimizer step. `grads` holds one gradient tensor per parameter in
/// ParamSet order; weight decay is added into the gradient (L2 style).
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainerError> {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (idx, (name, value)) in params.iter_mut().enumerate() {
        let grad = grads[idx]
            .as_ref()
            .ok_or_else(|| TrainerError::MissingGrad(name.to_string()))?;
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for (c, w) in value.data.iter_mut().enumerate() {
            let g = grad.data[c] + weight_decay * *w;
            m[c] = ADAM_BETA1 * m[c] + (1.0 - ADAM_BETA1) * g;
            v[c] = ADAM_BETA2 * v[c] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[c] / bc1;
            let v_hat = v[c] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

fn check_finite(
    params: &ParamSet,
    what: &'static str,
    epoch: usize,
) -> Result<(), TrainerError> {
    for (name, value) in params.iter() {
        for (c, &x) in value.data.iter().enumerate() {
            if !x.is_finite() {
                return Err(TrainerError::NonFinite {
                    what,
                    param: name.to_string(),
                    coord: c,
                    value: x,
                    epoch,
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
}

fn batch_loss(
    model: &SpoTModel,
    tape: &mut Tape,
    pv: &[crate::numerics::Var],
    windows: &[&Window],
    walkset: &WalkSet,
    ctx: &mut FwdCtx,
) -> Result<crate::numerics::Var, TrainerError> {
    let w_embed = model.embed_walks(tape, pv, walkset, ctx)?;
    let mut total: Option<crate::numerics::Var> = None;
    for win in windows {
        let pred = model.forecast_from_embeddings(
            tape,
            pv,
            w_embed,
            &win.inputs,
            &win.tod_idx,
            &win.dow_idx,
            ctx,
        )?;
        let target = tape.constant(model.target_matrix(&win.targets_norm));
        let loss = tape.huber(pred, target, model.cfg.huber_delta)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    let total = total.expect("batch must be non-empty");
    Ok(tape.scale(total, 1.0 / windows.len() as f64))
}

fn denorm_tensor(ds: &StgDataset, t: &Tensor) -> Result<Tensor, TrainerError> {
    let d = *t.shape.last().unwrap();
    let mut out = t.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v = ds.denormalize(*v, i % d)?;
    }
    Ok(out)
}

/// Denormalized validation MAE using the dataset's train statistics.
pub fn validation_mae_denorm(
    model: &SpoTModel,
    ds: &StgDataset,
    walkset: &WalkSet,
    windows: &[Window],
) -> Result<f64, TrainerError> {
    let mut abs_sum = 0.0;
    let mut count = 0usize;
    for win in windows {
        let pred = model.predict(walkset, &win.inputs, &win.tod_idx, &win.dow_idx)?;
        let pred = denorm_tensor(ds, &pred)?;
        for (p, t) in pred.data.iter().zip(&win.targets_raw.data) {
            abs_sum += (p - t).abs();
            count += 1;
        }
    }
    Ok(abs_sum / count as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut SpoTModel,
    ds: &StgDataset,
    walkset: &WalkSet,
    train_anchors: &[usize],
    val_anchors: &[usize],
    cfg: &TrainConfig,
    history_path: Option<&Path>,
) -> Result<TrainResult, TrainerError> {
    if train_anchors.is_empty() || val_anchors.is_empty() {
        return Err(TrainerError::NoWindows);
    }
    let t_in = model.cfg.t_in;
    let t_out = model.cfg.t_out;
    let train_windows: Vec<Window> = train_anchors
        .iter()
        .map(|&a| extract_window(ds, a, t_in, t_out))
        .collect::<Result<_, _>>()?;
    let val_windows: Vec<Window> = val_anchors
        .iter()
        .map(|&a| extract_window(ds, a, t_in, t_out))
        .collect::<Result<_, _>>()?;

    let mut adam = AdamState::new(&model.params);
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot: Vec<Tensor> =
        model.params.iter().map(|(_, t)| t.clone()).collect();
    let mut bad_epochs = 0usize;

    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut epochs_run = 0usize;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let lr = lr_at(cfg, epoch);
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut window_count = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let pv = model.params.leaves(&mut tape);
            let mut ctx = FwdCtx::train(
                model.cfg.dropout,
                cfg.seed
                    .wrapping_add((epoch as u64) << 20)
                    .wrapping_add(batch_idx as u64),
            );
            let batch: Vec<&Window> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let loss = batch_loss(model, &mut tape, &pv, &batch, walkset, &mut ctx)?;
            let loss_val = tape.value(loss).data[0];
            if !loss_val.is_finite() {
                return Err(TrainerError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += loss_val * batch.len() as f64;
            window_count += batch.len();
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> =
                pv.iter().map(|&v| tape.grad_tensor(v)).collect();
            adam_step(&mut model.params, &grads, &mut adam, lr, cfg.weight_decay)?;
            check_finite(&model.params, "parameters", epoch)?;
        }
        let train_loss = loss_sum / window_count as f64;
        let val_mae = validation_mae_denorm(model, ds, walkset, &val_windows)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mae,
            lr,
        });

        if val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            best_snapshot = model.params.iter().map(|(_, t)| t.clone()).collect();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }

    for ((_, value), saved) in model.params.iter_mut().zip(best_snapshot) {
        *value = saved;
    }

    if let Some(path) = history_path {
        write_history_csv(path, &history)?;
    }
    Ok(TrainResult {
        best_epoch,
        best_val_mae: best_val,
        epochs_run,
        history,
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<(), TrainerError> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_loss,val_mae,lr")?;
    for rec in history {
        writeln!(f, "{},{},{},{}", rec.epoch, rec.train_loss, rec.val_mae, rec.lr)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

#[derive(Debug)]
pub struct EvalReport {
    /// Model metrics for horizons 1..=t_out, raw scale.
    pub horizons: Vec<HorizonMetrics>,
    /// Pooled over every horizon.
    pub avg: HorizonMetrics,
    pub naive_horizons: Vec<HorizonMetrics>,
    pub naive_avg: HorizonMetrics,
}

impl EvalReport {
    /// Rows for the metrics CSV: (metric, horizon, value).
    pub fn csv_rows(&self) -> Vec<(String, String, f64)> {
        let mut rows = Vec::new();
        let mut push = |name: &str, horizon: String, m: &HorizonMetrics| {
            rows.push((format!("{name}_mae"), horizon.clone(), m.mae));
            rows.push((format!("{name}_rmse"), horizon.clone(), m.rmse));
            rows.push((format!("{name}_mape"), horizon, m.mape));
        };
        for (h, m) in self.horizons.iter().enumerate() {
            push("model", (h + 1).to_string(), m);
        }
        push("model", "avg".to_string(), &self.avg);
        for (h, m) in self.naive_horizons.iter().enumerate() {
            push("naive", (h + 1).to_string(), m);
        }
        push("naive", "avg".to_string(), &self.naive_avg);
        rows
    }
}

fn metrics_of(pred: &[f64], truth: &[f64]) -> Result<HorizonMetrics, TrainerError> {
    Ok(HorizonMetrics {
        mae: metric_mae(pred, truth),
        rmse: metric_rmse(pred, truth),
        mape: metric_mape(pred, truth)?,
    })
}

/// Raw-scale input block (T, N, D) for the window anchored at `anchor`.
pub fn raw_inputs(ds: &StgDataset, anchor: usize, t_in: usize) -> Tensor {
    let (n, d) = (ds.n_nodes(), ds.d_in());
    let mut data = Vec::with_capacity(t_in * n * d);
    for t in anchor + 1 - t_in..=anchor {
        for i in 0..n {
            for ch in 0..d {
                data.push(ds.value(t, i, ch));
            }
        }
    }
    Tensor::new(vec![t_in, n, d], data)
}

/// Raw-scale test metrics for the model and the repeat-last-steps
/// baseline, per horizon and pooled.
pub fn evaluate(
    model: &SpoTModel,
    ds: &StgDataset,
    walkset: &WalkSet,
    anchors: &[usize],
) -> Result<EvalReport, TrainerError> {
    if anchors.is_empty() {
        return Err(TrainerError::NoWindows);
    }
    let t_in = model.cfg.t_in;
    let t_out = model.cfg.t_out;
    let per_step = ds.n_nodes() * model.cfg.d_out;
    let mut pred_h: Vec<Vec<f64>> = vec![Vec::new(); t_out];
    let mut naive_h: Vec<Vec<f64>> = vec![Vec::new(); t_out];
    let mut truth_h: Vec<Vec<f64>> = vec![Vec::new(); t_out];
    for &anchor in anchors {
        let win = extract_window(ds, anchor, t_in, t_out)?;
        let pred = model.predict(walkset, &win.inputs, &win.tod_idx, &win.dow_idx)?;
        let pred = denorm_tensor(ds, &pred)?;
        let naive = naive_predict(&raw_inputs(ds, anchor, t_in), t_out);
        for t in 0..t_out {
            let lo = t * per_step;
            let hi = lo + per_step;
            pred_h[t].extend_from_slice(&pred.data[lo..hi]);
            naive_h[t].extend_from_slice(&naive.data[lo..hi]);
            truth_h[t].extend_from_slice(&win.targets_raw.data[lo..hi]);
        }
    }
    let mut horizons = Vec::with_capacity(t_out);
    let mut naive_horizons = Vec::with_capacity(t_out);
    for t in 0..t_out {
        horizons.push(metrics_of(&pred_h[t], &truth_h[t])?);
        naive_horizons.push(metrics_of(&naive_h[t], &truth_h[t])?);
    }
    let all_pred: Vec<f64> = pred_h.concat();
    let all_naive: Vec<f64> = naive_h.concat();
    let all_truth: Vec<f64> = truth_h.concat();
    Ok(EvalReport {
        horizons,
        avg: metrics_of(&all_pred, &all_truth)?,
        naive_horizons,
        naive_avg: metrics_of(&all_naive, &all_truth)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub m: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_rate: f64,
}

/// The 2x2x2x2 search over walk repetitions, learning rate, weight decay,
/// and decay factor.
pub fn default_grid() -> Vec<GridPoint> {
    let mut grid = Vec::with_capacity(16);
    for &m in &[2usize, 4] {
        for &lr in &[0.001, 0.0005] {
            for &weight_decay in &[0.001, 0.0001] {
                for &lr_decay_rate in &[0.1, 0.5] {
                    grid.push(GridPoint {
                        m,
                        lr,
                        weight_decay,
                        lr_decay_rate,
                    });
                }
            }
        }
    }
    grid
}

#[derive(Debug)]
pub struct GridOutcome {
    pub point: GridPoint,
    pub best_val_mae: f64,
    pub best_epoch: usize,
}

/// Train one model per grid point and rank by validation MAE (ascending).
/// Windows are rebuilt per point only through M; the data split is fixed.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    model_cfg: &ModelConfig,
    ds: &StgDataset,
    train_cfg: &TrainConfig,
    grid: &[GridPoint],
    train_range: &Range<usize>,
    val_range: &Range<usize>,
    leaderboard_path: Option<&Path>,
) -> Result<Vec<GridOutcome>, TrainerError> {
    let train_anchors = make_windows(train_range, model_cfg.t_in, model_cfg.t_out);
    let val_anchors = make_windows(val_range, model_cfg.t_in, model_cfg.t_out);
    let mut outcomes = Vec::with_capacity(grid.len());
    for point in grid {
        let cfg = ModelConfig {
            m: point.m,
            ..model_cfg.clone()
        };
        let walkset = generate_walks(&ds.graph, cfg.k, cfg.m, train_cfg.seed);
        let mut model = SpoTModel::new(cfg, ds.n_nodes(), train_cfg.seed)?;
        let tc = TrainConfig {
            lr: point.lr,
            weight_decay: point.weight_decay,
            lr_decay_rate: point.lr_decay_rate,
            ..train_cfg.clone()
        };
        let result = train(
            &mut model,
            ds,
            &walkset,
            &train_anchors,
            &val_anchors,
            &tc,
            None,
        )?;
        outcomes.push(GridOutcome {
            point: *point,
            best_val_mae: result.best_val_mae,
            best_epoch: result.best_epoch,
        });
    }
    outcomes.sort_by(|a, b| a.best_val_mae.total_cmp(&b.best_val_mae));
    if let Some(path) = leaderboard_path {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "rank,m,lr,weight_decay,lr_decay_rate,best_val_mae,best_epoch")?;
        for (rank, o) in outcomes.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                rank + 1,
                o.point.m,
                o.point.lr,
                o.point.weight_decay,
                o.point.lr_decay_rate,
                o.best_val_mae,
                o.best_epoch
            )?;
        }
        f.flush()?;
    }
    Ok(outcomes)
}

/// Convenience: the 6:2:2 anchor lists for a dataset and window sizes.
pub fn split_anchors(
    ds: &StgDataset,
    t_in: usize,
    t_out: usize,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (train, val, test) = split_622(ds.tau());
    (
        make_windows(&train, t_in, t_out),
        make_windows(&val, t_in, t_out),
        make_windows(&test, t_in, t_out),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, normalize};
    use crate::model::ScanKind;

    #[test]
    fn lr_schedule_steps_at_milestones() {
        let cfg = TrainConfig::default();
        assert!((lr_at(&cfg, 1) - 0.001).abs() < 1e-15);
        assert!((lr_at(&cfg, 19) - 0.001).abs() < 1e-15);
        assert!((lr_at(&cfg, 20) - 0.0005).abs() < 1e-15);
        assert!((lr_at(&cfg, 40) - 0.00025).abs() < 1e-15);
        assert!((lr_at(&cfg, 60) - 0.000125).abs() < 1e-15);
        assert!((lr_at(&cfg, 300) - 0.000125).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // with zero moments, one step moves by lr * g / (|g| + eps)
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::new(vec![1], vec![2.0]));
        let mut adam = AdamState::new(&ps);
        let g = 0.3;
        adam_step(
            &mut ps,
            &[Some(Tensor::new(vec![1], vec![g]))],
            &mut adam,
            0.01,
            0.0,
        )
        .unwrap();
        let expected = 2.0 - 0.01 * g / (g.abs() + ADAM_EPS);
        assert!((ps.value(id).data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_missing_grad_names_parameter() {
        let mut ps = ParamSet::new();
        ps.add("fusion.w1", Tensor::zeros(&[2]));
        let mut adam = AdamState::new(&ps);
        let err = adam_step(&mut ps, &[None], &mut adam, 0.01, 0.0).unwrap_err();
        assert!(err.to_string().contains("fusion.w1"));
    }

    #[test]
    fn adam_weight_decay_shrinks_weights() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::new(vec![1], vec![5.0]));
        let mut adam = AdamState::new(&ps);
        for _ in 0..50 {
            adam_step(
                &mut ps,
                &[Some(Tensor::zeros(&[1]))],
                &mut adam,
                0.05,
                0.01,
            )
            .unwrap();
        }
        assert!(ps.value(id).data[0] < 4.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::new(vec![1], vec![-4.0]));
        let mut adam = AdamState::new(&ps);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let pv = ps.leaves(&mut tape);
            let target = tape.constant(Tensor::new(vec![1], vec![3.0]));
            let diff = tape.sub(pv[0], target).unwrap();
            let sq = tape.mul(diff, diff).unwrap();
            let loss = tape.reduce_mean(sq, None).unwrap();
            tape.backward(loss).unwrap();
            let grads = vec![tape.grad_tensor(pv[0])];
            adam_step(&mut ps, &grads, &mut adam, 0.05, 0.0).unwrap();
        }
        assert!((ps.value(id).data[0] - 3.0).abs() < 1e-3);
    }

    fn tiny_setup() -> (ModelConfig, StgDataset) {
        let cfg = ModelConfig {
            d: 4,
            k: 4,
            m: 1,
            t_in: 3,
            t_out: 3,
            n_layers: 1,
            ff_dim: 8,
            dropout: 0.0,
            d_state: 4,
            n_heads: 2,
            walk_scan_kind: ScanKind::Mamba,
            temporal_scan_kind: ScanKind::Mamba,
            ..ModelConfig::default()
        };
        let mut ds = generate_synthetic(3, 120, 9);
        let (train, _, _) = split_622(ds.tau());
        normalize(&mut ds, &train).unwrap();
        (cfg, ds)
    }

    #[test]
    fn train_runs_and_is_deterministic() {
        let (cfg, ds) = tiny_setup();
        let walks = generate_walks(&ds.graph, cfg.k, cfg.m, 5);
        let (train_a, val_a, _) = split_anchors(&ds, cfg.t_in, cfg.t_out);
        let train_a = &train_a[..8];
        let val_a = &val_a[..4];
        let tc = TrainConfig {
            max_epochs: 2,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = SpoTModel::new(cfg.clone(), ds.n_nodes(), 5).unwrap();
            let r = train(&mut model, &ds, &walks, train_a, val_a, &tc, None).unwrap();
            (r, model)
        };
        let (r1, m1) = run();
        let (r2, m2) = run();
        assert_eq!(r1.history.len(), 2);
        assert!(r1.history.iter().all(|h| h.train_loss.is_finite()));
        assert_eq!(r1.best_val_mae.to_bits(), r2.best_val_mae.to_bits());
        for ((_, a), (_, b)) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn history_csv_written() {
        let (cfg, ds) = tiny_setup();
        let walks = generate_walks(&ds.graph, cfg.k, cfg.m, 5);
        let (train_a, val_a, _) = split_anchors(&ds, cfg.t_in, cfg.t_out);
        let tc = TrainConfig {
            max_epochs: 1,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let mut model = SpoTModel::new(cfg.clone(), ds.n_nodes(), 5).unwrap();
        train(
            &mut model,
            &ds,
            &walks,
            &train_a[..4],
            &val_a[..2],
            &tc,
            Some(&path),
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,train_loss,val_mae,lr");
        assert_eq!(lines.count(), 1);
    }

    #[test]
    fn evaluate_reports_all_horizons_and_naive() {
        let (cfg, ds) = tiny_setup();
        let walks = generate_walks(&ds.graph, cfg.k, cfg.m, 5);
        let model = SpoTModel::new(cfg.clone(), ds.n_nodes(), 5).unwrap();
        let (_, _, test_a) = split_anchors(&ds, cfg.t_in, cfg.t_out);
        let report = evaluate(&model, &ds, &walks, &test_a[..5]).unwrap();
        assert_eq!(report.horizons.len(), cfg.t_out);
        assert_eq!(report.naive_horizons.len(), cfg.t_out);
        for m in report.horizons.iter().chain(&report.naive_horizons) {
            assert!(m.mae.is_finite() && m.rmse.is_finite() && m.mape.is_finite());
            assert!(m.mae <= m.rmse + 1e-12);
        }
        // naive baseline hand-check on the first window
        let anchor = test_a[0];
        let win = extract_window(&ds, anchor, cfg.t_in, cfg.t_out).unwrap();
        let naive = naive_predict(&raw_inputs(&ds, anchor, cfg.t_in), cfg.t_out);
        let hand = metric_mae(&naive.data, &win.targets_raw.data);
        let report1 = evaluate(&model, &ds, &walks, &test_a[..1]).unwrap();
        assert!((report1.naive_avg.mae - hand).abs() < 1e-12);
    }

    #[test]
    fn default_grid_has_sixteen_points() {
        let grid = default_grid();
        assert_eq!(grid.len(), 16);
        let mut seen = std::collections::HashSet::new();
        for p in &grid {
            seen.insert(format!(
                "{}|{}|{}|{}",
                p.m, p.lr, p.weight_decay, p.lr_decay_rate
            ));
        }
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn grid_search_writes_sorted_leaderboard() {
        let (cfg, ds) = tiny_setup();
        let tc = TrainConfig {
            max_epochs: 1,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let grid = [
            GridPoint {
                m: 1,
                lr: 0.001,
                weight_decay: 0.0001,
                lr_decay_rate: 0.5,
            },
            GridPoint {
                m: 2,
                lr: 0.0005,
                weight_decay: 0.0001,
                lr_decay_rate: 0.5,
            },
        ];
        let (train_r, val_r, _) = split_622(ds.tau());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("leaderboard.csv");
        let outcomes = grid_search(&cfg, &ds, &tc, &grid, &train_r, &val_r, Some(&path)).unwrap();
        assert_eq!(outcomes.len(), 2);
        assert!(outcomes[0].best_val_mae <= outcomes[1].best_val_mae);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("rank,m,lr,weight_decay,lr_decay_rate,best_val_mae,best_epoch"));
        assert_eq!(text.lines().count(), 3);
    }
}
