//! Dataset ingestion, splitting, windowing, normalization, calendar
//! indexing, evaluation metrics, and the naive reference predictor.

use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError};
use crate::numerics::Tensor;

/// Shortest input-plus-target horizon the pipeline supports (T = T' = 12).
pub const MIN_STEPS: usize = 24;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("signals file {path}: row {row}, column {col}: non-numeric cell {cell:?}")]
    NonNumeric {
        path: String,
        row: usize,
        col: usize,
        cell: String,
    },
    #[error("signals have {signal_nodes} columns but the edge list implies {graph_nodes} nodes")]
    NodeCountMismatch {
        signal_nodes: usize,
        graph_nodes: usize,
    },
    #[error("dataset has {0} time steps; at least {MIN_STEPS} required")]
    TooShort(usize),
    #[error("channel {0} has zero standard deviation on the training split")]
    ZeroStd(usize),
    #[error("normalization statistics not computed; call normalize first")]
    NotNormalized,
    #[error("interval of {0} minutes does not divide a day evenly")]
    BadInterval(u32),
    #[error("MAPE undefined: every ground-truth entry is zero")]
    AllZeroTruth,
    #[error("meta file {path}: {reason}")]
    BadMeta { path: String, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-channel z-score statistics, computed on the training split only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub start_time: String,
    pub interval_minutes: u32,
}

/// Signal matrix (tau x N x D_in), timestamps, graph, and normalization
/// statistics.
#[derive(Debug, Clone)]
pub struct StgDataset {
    /// Row-major (tau, n_nodes, d_in).
    pub signals: Tensor,
    pub start_time: NaiveDateTime,
    pub interval_minutes: u32,
    pub graph: Graph,
    pub stats: Option<NormStats>,
}

impl StgDataset {
    pub fn tau(&self) -> usize {
        self.signals.shape[0]
    }

    pub fn n_nodes(&self) -> usize {
        self.signals.shape[1]
    }

    pub fn d_in(&self) -> usize {
        self.signals.shape[2]
    }

    pub fn value(&self, t: usize, node: usize, ch: usize) -> f64 {
        let (n, d) = (self.n_nodes(), self.d_in());
        self.signals.data[(t * n + node) * d + ch]
    }

    pub fn steps_per_day(&self) -> usize {
        1440 / self.interval_minutes as usize
    }
}

fn parse_meta(path: &Path) -> Result<(NaiveDateTime, u32), DataError> {
    let text = std::fs::read_to_string(path)?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| DataError::BadMeta {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let start = NaiveDateTime::parse_from_str(&meta.start_time, "%Y-%m-%dT%H:%M:%S").map_err(
        |e| DataError::BadMeta {
            path: path.display().to_string(),
            reason: format!("start_time {:?}: {e}", meta.start_time),
        },
    )?;
    if meta.interval_minutes == 0 || 1440 % meta.interval_minutes != 0 {
        return Err(DataError::BadInterval(meta.interval_minutes));
    }
    Ok((start, meta.interval_minutes))
}

fn read_signal_csv(path: &Path) -> Result<(usize, usize, Vec<f64>), DataError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut data = Vec::new();
    let mut n_cols = 0usize;
    let mut rows = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if rows == 0 && lineno == 0 && cells.iter().any(|c| c.parse::<f64>().is_err()) {
            continue; // header row
        }
        if n_cols == 0 {
            n_cols = cells.len();
        }
        for (col, cell) in cells.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) => data.push(v),
                Err(_) => {
                    return Err(DataError::NonNumeric {
                        path: path.display().to_string(),
                        row: lineno + 1,
                        col: col + 1,
                        cell: cell.to_string(),
                    });
                }
            }
        }
        rows += 1;
    }
    Ok((rows, n_cols, data))
}

/// Load a PEMS-style dataset: signals CSV (tau rows x N columns), edge-list
/// CSV, and a meta JSON with the start timestamp and sampling interval.
pub fn load_dataset(
    signals_path: &Path,
    edges_path: &Path,
    meta_path: &Path,
) -> Result<StgDataset, DataError> {
    let (tau, n_cols, data) = read_signal_csv(signals_path)?;
    if tau < MIN_STEPS {
        return Err(DataError::TooShort(tau));
    }
    let graph = Graph::load_edge_csv(edges_path, Some(n_cols))?;
    if graph.n_nodes() != n_cols {
        return Err(DataError::NodeCountMismatch {
            signal_nodes: n_cols,
            graph_nodes: graph.n_nodes(),
        });
    }
    let (start_time, interval_minutes) = parse_meta(meta_path)?;
    Ok(StgDataset {
        signals: Tensor::new(vec![tau, n_cols, 1], data),
        start_time,
        interval_minutes,
        graph,
        stats: None,
    })
}

/// Write the three dataset files into `dir` (signals.csv, edges.csv,
/// meta.json). Float formatting is shortest-roundtrip, so a reload is
/// bit-exact.
pub fn save_dataset(ds: &StgDataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("signals.csv"))?);
    let (tau, n) = (ds.tau(), ds.n_nodes());
    for t in 0..tau {
        let row: Vec<String> = (0..n).map(|i| ds.value(t, i, 0).to_string()).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    ds.graph.save_edge_csv(&dir.join("edges.csv"))?;
    let meta = DatasetMeta {
        start_time: ds.start_time.format("%Y-%m-%dT%H:%M:%S").to_string(),
        interval_minutes: ds.interval_minutes,
    };
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).unwrap(),
    )?;
    Ok(())
}

/// Temporal 6:2:2 split: train [0, 0.6tau), val the next 0.2tau, test the
/// remainder.
pub fn split_622(tau: usize) -> (Range<usize>, Range<usize>, Range<usize>) {
    let train_end = (tau as f64 * 0.6).floor() as usize;
    let val_end = train_end + (tau as f64 * 0.2).floor() as usize;
    (0..train_end, train_end..val_end, val_end..tau)
}

/// Anchors t such that inputs [t-T+1, t] and targets [t+1, t+T_out] both
/// fit inside `range`. An anchor is the index of the last input step.
pub fn make_windows(range: &Range<usize>, t_in: usize, t_out: usize) -> Vec<usize> {
    let len = range.end.saturating_sub(range.start);
    if len < t_in + t_out {
        return Vec::new();
    }
    (range.start + t_in - 1..range.end - t_out).collect()
}

/// Compute per-channel statistics on `train_range` and store them on the
/// dataset. Values elsewhere keep their raw scale; consumers normalize via
/// the stored stats.
pub fn normalize(ds: &mut StgDataset, train_range: &Range<usize>) -> Result<(), DataError> {
    let (n, d) = (ds.n_nodes(), ds.d_in());
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    let count = (train_range.len() * n) as f64;
    for ch in 0..d {
        let mut sum = 0.0;
        for t in train_range.clone() {
            for i in 0..n {
                sum += ds.value(t, i, ch);
            }
        }
        mean[ch] = sum / count;
        let mut sq = 0.0;
        for t in train_range.clone() {
            for i in 0..n {
                let e = ds.value(t, i, ch) - mean[ch];
                sq += e * e;
            }
        }
        std[ch] = (sq / count).sqrt();
        if std[ch] < 1e-12 {
            return Err(DataError::ZeroStd(ch));
        }
    }
    ds.stats = Some(NormStats { mean, std });
    Ok(())
}

impl StgDataset {
    pub fn normalized_value(&self, t: usize, node: usize, ch: usize) -> Result<f64, DataError> {
        let stats = self.stats.as_ref().ok_or(DataError::NotNormalized)?;
        Ok((self.value(t, node, ch) - stats.mean[ch]) / stats.std[ch])
    }

    pub fn denormalize(&self, v: f64, ch: usize) -> Result<f64, DataError> {
        let stats = self.stats.as_ref().ok_or(DataError::NotNormalized)?;
        Ok(v * stats.std[ch] + stats.mean[ch])
    }

    /// (timestamp-of-day slot, day-of-week with Monday = 0) at step t.
    pub fn calendar_indices(&self, t: usize) -> (usize, usize) {
        let when = self.start_time
            + chrono::Duration::minutes(t as i64 * self.interval_minutes as i64);
        let minutes_into_day = (when.hour() * 60 + when.minute()) as usize;
        let tod = minutes_into_day / self.interval_minutes as usize;
        let dow = when.weekday().num_days_from_monday() as usize;
        (tod, dow)
    }
}

/// One training/evaluation window extracted at an anchor.
#[derive(Debug, Clone)]
pub struct Window {
    pub anchor: usize,
    /// Normalized inputs, (T, N, D_in).
    pub inputs: Tensor,
    /// Normalized targets, (T_out, N, D_out).
    pub targets_norm: Tensor,
    /// Raw-scale targets, (T_out, N, D_out).
    pub targets_raw: Tensor,
    pub tod_idx: Vec<usize>,
    pub dow_idx: Vec<usize>,
    pub target_tod_idx: Vec<usize>,
    pub target_dow_idx: Vec<usize>,
}

/// Extract the window anchored at t (normalized inputs/targets plus the
/// calendar indices of every step).
pub fn extract_window(
    ds: &StgDataset,
    anchor: usize,
    t_in: usize,
    t_out: usize,
) -> Result<Window, DataError> {
    let n = ds.n_nodes();
    let d = ds.d_in();
    let mut inputs = Vec::with_capacity(t_in * n * d);
    let mut tod_idx = Vec::with_capacity(t_in);
    let mut dow_idx = Vec::with_capacity(t_in);
    for t in anchor + 1 - t_in..=anchor {
        for i in 0..n {
            for ch in 0..d {
                inputs.push(ds.normalized_value(t, i, ch)?);
            }
        }
        let (tod, dow) = ds.calendar_indices(t);
        tod_idx.push(tod);
        dow_idx.push(dow);
    }
    let mut targets_norm = Vec::with_capacity(t_out * n * d);
    let mut targets_raw = Vec::with_capacity(t_out * n * d);
    let mut target_tod_idx = Vec::with_capacity(t_out);
    let mut target_dow_idx = Vec::with_capacity(t_out);
    for t in anchor + 1..=anchor + t_out {
        for i in 0..n {
            for ch in 0..d {
                targets_norm.push(ds.normalized_value(t, i, ch)?);
                targets_raw.push(ds.value(t, i, ch));
            }
        }
        let (tod, dow) = ds.calendar_indices(t);
        target_tod_idx.push(tod);
        target_dow_idx.push(dow);
    }
    Ok(Window {
        anchor,
        inputs: Tensor::new(vec![t_in, n, d], inputs),
        targets_norm: Tensor::new(vec![t_out, n, d], targets_norm),
        targets_raw: Tensor::new(vec![t_out, n, d], targets_raw),
        tod_idx,
        dow_idx,
        target_tod_idx,
        target_dow_idx,
    })
}

pub fn metric_mae(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64
}

pub fn metric_rmse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    (pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
        .sqrt()
}

/// Mean absolute percentage error in percent; entries with zero truth are
/// excluded from the mean.
pub fn metric_mape(pred: &[f64], truth: &[f64]) -> Result<f64, DataError> {
    assert_eq!(pred.len(), truth.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if *t != 0.0 {
            sum += ((p - t) / t).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(DataError::AllZeroTruth);
    }
    Ok(100.0 * sum / count as f64)
}

/// Historical-inertia reference: copy the last `t_out` observed steps of
/// the input window forward. `inputs` is (T, N, D) raw-scale.
pub fn naive_predict(inputs: &Tensor, t_out: usize) -> Tensor {
    let (t_in, n, d) = (inputs.shape[0], inputs.shape[1], inputs.shape[2]);
    assert!(t_out <= t_in, "naive predictor needs t_out <= t_in");
    let start = (t_in - t_out) * n * d;
    Tensor::new(vec![t_out, n, d], inputs.data[start..].to_vec())
}

/// Ring-graph synthetic fixture: per-node phase-shifted daily sinusoid
/// with a second harmonic and seeded Gaussian noise, 5-minute sampling
/// starting Monday 2018-01-01 00:00.
pub fn generate_synthetic(n_nodes: usize, tau: usize, seed: u64) -> StgDataset {
    assert!(n_nodes >= 2, "synthetic dataset needs at least 2 nodes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(tau * n_nodes);
    for t in 0..tau {
        for i in 0..n_nodes {
            let phase = 2.0 * std::f64::consts::PI * (t as f64 + 12.0 * i as f64) / 288.0;
            let base = 50.0 + 20.0 * phase.sin() + 5.0 * (2.0 * phase + 0.5).sin();
            // Box-Muller, sigma = 1
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let noise =
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            data.push(base + noise);
        }
    }
    StgDataset {
        signals: Tensor::new(vec![tau, n_nodes, 1], data),
        start_time: NaiveDateTime::parse_from_str("2018-01-01T00:00:00", "%Y-%m-%dT%H:%M:%S")
            .unwrap(),
        interval_minutes: 5,
        graph: Graph::ring(n_nodes),
        stats: None,
    }
}

/// Metrics report rows: `metric,horizon,value` with horizon 1..T_out and
/// `avg`.
pub fn write_metrics_csv(
    path: &Path,
    rows: &[(String, String, f64)],
) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "metric,horizon,value")?;
    for (metric, horizon, value) in rows {
        writeln!(f, "{metric},{horizon},{value}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_ratios() {
        let (tr, va, te) = split_622(10);
        assert_eq!((tr.len(), va.len(), te.len()), (6, 2, 2));
        let (tr, va, te) = split_622(16992);
        assert_eq!((tr.len(), va.len(), te.len()), (10195, 3398, 3399));
        assert_eq!(tr.end, va.start);
        assert_eq!(va.end, te.start);
        assert_eq!(te.end, 16992);
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&(0..24), 12, 12).len(), 1);
        assert_eq!(make_windows(&(0..23), 12, 12).len(), 0);
        assert_eq!(make_windows(&(0..3398), 12, 12).len(), 3375);
    }

    #[test]
    fn normalize_and_inverse() {
        let mut ds = generate_synthetic(4, 100, 0);
        normalize(&mut ds, &(0..60)).unwrap();
        for t in [0, 50, 99] {
            let z = ds.normalized_value(t, 2, 0).unwrap();
            let back = ds.denormalize(z, 0).unwrap();
            assert!((back - ds.value(t, 2, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_std_rejected() {
        let mut ds = generate_synthetic(4, 100, 0);
        for v in &mut ds.signals.data {
            *v = 3.0;
        }
        assert!(matches!(
            normalize(&mut ds, &(0..60)),
            Err(DataError::ZeroStd(0))
        ));
    }

    #[test]
    fn calendar_arithmetic() {
        let ds = generate_synthetic(2, 1000, 0);
        assert_eq!(ds.steps_per_day(), 288);
        assert_eq!(ds.calendar_indices(0), (0, 0));
        let (tod0, dow0) = ds.calendar_indices(17);
        let (tod1, dow1) = ds.calendar_indices(17 + 288);
        assert_eq!(tod0, tod1);
        assert_eq!((dow0 + 1) % 7, dow1);
    }

    #[test]
    fn metric_hand_values() {
        let pred = [11.0, 18.0];
        let truth = [10.0, 20.0];
        assert!((metric_mae(&pred, &truth) - 1.5).abs() < 1e-15);
        assert!((metric_rmse(&pred, &truth) - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((metric_mape(&pred, &truth).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(metric_mae(&truth, &truth), 0.0);
        assert_eq!(metric_rmse(&truth, &truth), 0.0);
        assert_eq!(metric_mape(&truth, &truth).unwrap(), 0.0);
    }

    #[test]
    fn mape_masks_zero_truth() {
        let got = metric_mape(&[5.0, 11.0], &[0.0, 10.0]).unwrap();
        assert!((got - 10.0).abs() < 1e-12);
        assert!(matches!(
            metric_mape(&[1.0], &[0.0]),
            Err(DataError::AllZeroTruth)
        ));
    }

    #[test]
    fn naive_copies_tail() {
        let inputs = Tensor::new(vec![3, 1, 1], vec![1.0, 2.0, 3.0]);
        let pred = naive_predict(&inputs, 2);
        assert_eq!(pred.data, vec![2.0, 3.0]);
        let full = naive_predict(&inputs, 3);
        assert_eq!(full.data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn synthetic_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(5, 50, 123);
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(
            &dir.path().join("signals.csv"),
            &dir.path().join("edges.csv"),
            &dir.path().join("meta.json"),
        )
        .unwrap();
        assert_eq!(back.signals.shape, ds.signals.shape);
        for (a, b) in back.signals.data.iter().zip(&ds.signals.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.start_time, ds.start_time);
    }

    #[test]
    fn synthetic_determinism_and_ring() {
        let a = generate_synthetic(6, 100, 9);
        let b = generate_synthetic(6, 100, 9);
        assert_eq!(a.signals.data, b.signals.data);
        for i in 0..6 {
            assert_eq!(a.graph.degree(i), 2);
        }
    }

    #[test]
    fn synthetic_daily_autocorrelation_peak() {
        let ds = generate_synthetic(2, 288 * 4, 5);
        let series: Vec<f64> = (0..ds.tau()).map(|t| ds.value(t, 0, 0)).collect();
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
        let acf = |lag: usize| -> f64 {
            let n = centered.len() - lag;
            let num: f64 =
                (0..n).map(|t| centered[t] * centered[t + lag]).sum::<f64>() / n as f64;
            let den: f64 =
                centered.iter().map(|v| v * v).sum::<f64>() / centered.len() as f64;
            num / den
        };
        assert!(acf(288) > 0.8, "daily peak {}", acf(288));
        assert!(acf(288) > acf(144) + 0.3);
    }

    #[test]
    fn short_dataset_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(3, 30, 0);
        save_dataset(&ds, dir.path()).unwrap();
        std::fs::write(dir.path().join("signals.csv"), "1.0,2.0,3.0\n").unwrap();
        let err = load_dataset(
            &dir.path().join("signals.csv"),
            &dir.path().join("edges.csv"),
            &dir.path().join("meta.json"),
        )
        .unwrap_err();
        assert!(matches!(err, DataError::TooShort(1)));
    }

    #[test]
    fn non_numeric_cell_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(3, 30, 0);
        save_dataset(&ds, dir.path()).unwrap();
        let mut rows: Vec<String> = (0..30).map(|t| format!("{t}.0,1.0,2.0")).collect();
        rows[4] = "1.0,oops,2.0".to_string();
        std::fs::write(dir.path().join("signals.csv"), rows.join("\n")).unwrap();
        let err = load_dataset(
            &dir.path().join("signals.csv"),
            &dir.path().join("edges.csv"),
            &dir.path().join("meta.json"),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 5") && msg.contains("column 2"), "{msg}");
    }

    #[test]
    fn windows_do_not_leak_across_splits() {
        let (train, val, _) = split_622(200);
        let anchors = make_windows(&train, 12, 12);
        let max_target = anchors.iter().max().unwrap() + 12;
        assert!(max_target < val.start);
    }
}
