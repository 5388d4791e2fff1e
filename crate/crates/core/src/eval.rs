//! Naive benchmark, forecast metrics, per-day errors and state ranking.

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::cleirnet::{loss_weights, FrameMeta, ForecastFrame};
use crate::error::{Error, Result};
use crate::geo::CountyTable;

/// Predicts the base-day cumulative value for every horizon day.
pub fn naive_no_change(cumulative: &Array2<f64>, base_day: usize, horizon: usize) -> Result<ForecastFrame> {
    if base_day >= cumulative.ncols() {
        return Err(Error::Domain(format!(
            "base day {base_day} is outside a series of {} days",
            cumulative.ncols()
        )));
    }
    let base = cumulative.column(base_day).to_vec();
    let predictions = Array2::from_shape_fn((base.len(), horizon), |(c, _)| base[c]);
    let meta = FrameMeta {
        model: "naive".into(),
        seed: 0,
        config_hash: String::new(),
    };
    ForecastFrame::new(base_day, base, predictions, meta)
}

/// The `horizon` observed days after `base_day`.
pub fn truth_window(cumulative: &Array2<f64>, base_day: usize, horizon: usize) -> Result<Array2<f64>> {
    if base_day + horizon >= cumulative.ncols() {
        return Err(Error::Domain(format!(
            "need {horizon} observed days after day {base_day}, series has {}",
            cumulative.ncols()
        )));
    }
    Ok(cumulative.slice(s![.., base_day + 1..=base_day + horizon]).to_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub weighted_mse: f64,
    pub msle: f64,
    pub mae: f64,
    /// Predicted national increase from the base day to the last horizon day.
    pub pcci: f64,
    pub per_day_mse: Vec<f64>,
    /// Per-day half-width: standard error / 5.
    pub se_band: Vec<f64>,
}

fn check_shape(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(Error::dim(
            "forecast vs truth",
            format!("{:?}", truth.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    Ok(())
}

pub fn mse(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    check_shape(pred, truth)?;
    let n = pred.len().max(1) as f64;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n)
}

pub fn compute_metrics(forecast: &ForecastFrame, truth: &Array2<f64>, populations: &[f64]) -> Result<MetricReport> {
    let pred = &forecast.predictions;
    check_shape(pred, truth)?;
    if populations.len() != pred.nrows() {
        return Err(Error::dim("populations", pred.nrows(), populations.len()));
    }
    let n = pred.len().max(1) as f64;
    let weights = loss_weights(populations, pred.ncols());
    let (mut se, mut wse, mut sle, mut ae) = (0.0, 0.0, 0.0, 0.0);
    for ((p, t), w) in pred.iter().zip(truth).zip(&weights) {
        let e = p - t;
        se += e * e;
        wse += w * e * e;
        ae += e.abs();
        sle += (p.max(0.0).ln_1p() - t.max(0.0).ln_1p()).powi(2);
    }
    let last = pred.ncols().saturating_sub(1);
    let pcci = if pred.ncols() == 0 {
        0.0
    } else {
        (0..pred.nrows()).map(|c| pred[[c, last]] - forecast.base[c]).sum()
    };
    let per_day = per_day_series(pred, truth)?;
    Ok(MetricReport {
        mse: se / n,
        weighted_mse: wse / n,
        msle: sle / n,
        mae: ae / n,
        pcci,
        per_day_mse: per_day.mse,
        se_band: per_day.band,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerDaySeries {
    pub mse: Vec<f64>,
    pub se: Vec<f64>,
    pub band: Vec<f64>,
}

impl PerDaySeries {
    pub fn band_lo(&self, d: usize) -> f64 {
        self.mse[d] - self.band[d]
    }

    pub fn band_hi(&self, d: usize) -> f64 {
        self.mse[d] + self.band[d]
    }
}

/// Per-day MSE across counties with standard error of the squared errors.
pub fn per_day_series(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<PerDaySeries> {
    check_shape(pred, truth)?;
    let n = pred.nrows() as f64;
    let mut out = PerDaySeries { mse: vec![], se: vec![], band: vec![] };
    for d in 0..pred.ncols() {
        let sq: Vec<f64> = (0..pred.nrows()).map(|c| (pred[[c, d]] - truth[[c, d]]).powi(2)).collect();
        let mean = if sq.is_empty() { 0.0 } else { sq.iter().sum::<f64>() / n };
        let var = if sq.is_empty() { 0.0 } else { sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n };
        let se = if sq.is_empty() { 0.0 } else { var.sqrt() / n.sqrt() };
        out.mse.push(mean);
        out.se.push(se);
        out.band.push(se / 5.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRatio {
    pub state: String,
    pub model_mse: f64,
    pub naive_mse: f64,
    /// `+inf` when the naive MSE is zero.
    pub ratio: f64,
    pub rank: usize,
}

/// Per-state MSE(model) / MSE(naive), sorted ascending.
pub fn rank_states(
    forecast: &ForecastFrame,
    truth: &Array2<f64>,
    table: &CountyTable,
    naive: &ForecastFrame,
) -> Result<Vec<StateRatio>> {
    check_shape(&forecast.predictions, truth)?;
    check_shape(&naive.predictions, truth)?;
    if table.len() != truth.nrows() {
        return Err(Error::dim("county table", truth.nrows(), table.len()));
    }
    let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for (c, rec) in table.records().iter().enumerate() {
        let e = acc.entry(rec.state.as_str()).or_default();
        for d in 0..truth.ncols() {
            e.0 += (forecast.predictions[[c, d]] - truth[[c, d]]).powi(2);
            e.1 += (naive.predictions[[c, d]] - truth[[c, d]]).powi(2);
            e.2 += 1;
        }
    }
    let mut rows: Vec<StateRatio> = acc
        .into_iter()
        .map(|(state, (m, n, count))| {
            let count = count.max(1) as f64;
            let (model_mse, naive_mse) = (m / count, n / count);
            let ratio = if naive_mse == 0.0 {
                if model_mse == 0.0 { 1.0 } else { f64::INFINITY }
            } else {
                model_mse / naive_mse
            };
            StateRatio {
                state: state.to_string(),
                model_mse,
                naive_mse,
                ratio,
                rank: 0,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.ratio.total_cmp(&b.ratio).then_with(|| a.state.cmp(&b.state)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(rows)
}

/// Best, median and worst states of a ranking sorted ascending.
pub fn best_median_worst(ranking: &[StateRatio]) -> Option<(&StateRatio, &StateRatio, &StateRatio)> {
    let first = ranking.first()?;
    Some((first, &ranking[(ranking.len() - 1) / 2], ranking.last()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::CountyRecord;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn frame(base: Vec<f64>, pred: Array2<f64>) -> ForecastFrame {
        ForecastFrame::new(0, base, pred, FrameMeta { model: "m".into(), seed: 0, config_hash: String::new() }).unwrap()
    }

    #[test]
    fn single_entry_metrics_by_hand() {
        let f = frame(vec![1.0], arr2(&[[3.0]]));
        let m = compute_metrics(&f, &arr2(&[[1.0]]), &[100.0]).unwrap();
        assert_eq!(m.mse, 4.0);
        assert_eq!(m.mae, 2.0);
        assert!((m.msle - 2f64.ln().powi(2)).abs() < 1e-15);
        assert_eq!(m.pcci, 2.0);
        let w = 1.0 / (101f64.ln() * 2f64.ln());
        assert!((m.weighted_mse - 4.0 * w).abs() < 1e-12);
    }

    #[test]
    fn naive_is_flat_and_has_zero_pcci() {
        let cum = arr2(&[[0.0, 1.0, 4.0, 6.0, 9.0], [2.0, 2.0, 5.0, 5.0, 7.0]]);
        let f = naive_no_change(&cum, 2, 2).unwrap();
        assert_eq!(f.predictions, arr2(&[[4.0, 4.0], [5.0, 5.0]]));
        assert!(f.deltas.iter().all(|d| *d == 0.0));
        let truth = truth_window(&cum, 2, 2).unwrap();
        assert_eq!(truth, arr2(&[[6.0, 9.0], [5.0, 7.0]]));
        assert_eq!(compute_metrics(&f, &truth, &[10.0, 20.0]).unwrap().pcci, 0.0);
        assert!(naive_no_change(&cum, 5, 1).is_err());
        assert!(truth_window(&cum, 3, 2).is_err());
        let flat = arr2(&[[3.0; 6]]);
        let f = naive_no_change(&flat, 1, 4).unwrap();
        assert_eq!(compute_metrics(&f, &truth_window(&flat, 1, 4).unwrap(), &[5.0]).unwrap().mse, 0.0);
    }

    #[test]
    fn per_day_band_by_hand() {
        let p = per_day_series(&arr2(&[[1.0], [3.0]]), &arr2(&[[1.0], [1.0]])).unwrap();
        assert_eq!(p.mse, vec![2.0]);
        assert!((p.se[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((p.band_hi(0) - (2.0 + 2f64.sqrt() / 5.0)).abs() < 1e-15);
        assert!((p.band_lo(0) - 1.7171572875253810).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let f = frame(vec![1.0], arr2(&[[3.0, 4.0]]));
        assert!(compute_metrics(&f, &arr2(&[[1.0]]), &[1.0]).is_err());
    }

    fn record(id: &str, state: &str) -> CountyRecord {
        CountyRecord {
            id: id.into(),
            name: id.into(),
            state: state.into(),
            lat: 40.0,
            lon: -90.0,
            population: 1000,
            density: 10.0,
        }
    }

    #[test]
    fn three_state_ranking() {
        let table =
            CountyTable::new(vec![record("01001", "AA"), record("02001", "BB"), record("03001", "CC"), record("03002", "CC")]).unwrap();
        let truth = arr2(&[[10.0], [10.0], [10.0], [10.0]]);
        let naive = frame(vec![8.0; 4], arr2(&[[8.0], [8.0], [8.0], [10.0]]));
        let model = frame(vec![8.0; 4], arr2(&[[9.0], [12.0], [10.0], [10.5]]));
        let r = rank_states(&model, &truth, &table, &naive).unwrap();
        let names: Vec<&str> = r.iter().map(|s| s.state.as_str()).collect();
        assert_eq!(names, vec!["CC", "AA", "BB"]);
        assert_eq!(r[0].ratio, 0.0625);
        assert_eq!(r[1].ratio, 0.25);
        assert_eq!(r[2].ratio, 1.0);
        let (best, median, worst) = best_median_worst(&r).unwrap();
        assert_eq!((best.state.as_str(), median.state.as_str(), worst.state.as_str()), ("CC", "AA", "BB"));
        let same = rank_states(&naive, &truth, &table, &naive).unwrap();
        assert!(same.iter().all(|s| s.ratio == 1.0));
        let zero = frame(vec![10.0; 4], arr2(&[[10.0], [10.0], [10.0], [10.0]]));
        let inf = rank_states(&model, &truth, &table, &zero).unwrap();
        assert!(inf.iter().any(|s| s.ratio.is_infinite()));
    }

    proptest! {
        #[test]
        fn metric_invariants(
            vals in proptest::collection::vec((0.0f64..1e4, 0.0f64..1e4), 12),
            pops in proptest::collection::vec(10.0f64..1e6, 3),
            shift in 0usize..3,
        ) {
            let pred = Array2::from_shape_fn((3, 4), |(c, d)| vals[c * 4 + d].0);
            let truth = Array2::from_shape_fn((3, 4), |(c, d)| vals[c * 4 + d].1);
            let f = frame(vec![1.0, 2.0, 3.0], pred.clone());
            let m = compute_metrics(&f, &truth, &pops).unwrap();
            prop_assert!(m.mse >= 0.0 && m.msle >= 0.0 && m.mae >= 0.0 && m.weighted_mse >= 0.0);
            let w = loss_weights(&pops, 4);
            let wmax = w.iter().copied().fold(f64::MIN, f64::max);
            let wmin = w.iter().copied().fold(f64::MAX, f64::min);
            prop_assert!(m.weighted_mse <= m.mse * wmax * (1.0 + 1e-12));
            prop_assert!(m.weighted_mse >= m.mse * wmin * (1.0 - 1e-12));

            let perm: Vec<usize> = (0..3).map(|i| (i + shift) % 3).collect();
            let pp = Array2::from_shape_fn((3, 4), |(c, d)| pred[[perm[c], d]]);
            let tp = Array2::from_shape_fn((3, 4), |(c, d)| truth[[perm[c], d]]);
            let base: Vec<f64> = perm.iter().map(|&c| [1.0, 2.0, 3.0][c]).collect();
            let popp: Vec<f64> = perm.iter().map(|&c| pops[c]).collect();
            let m2 = compute_metrics(&frame(base, pp), &tp, &popp).unwrap();
            for (a, b) in [(m.mse, m2.mse), (m.weighted_mse, m2.weighted_mse), (m.msle, m2.msle), (m.mae, m2.mae), (m.pcci, m2.pcci)] {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }
}
