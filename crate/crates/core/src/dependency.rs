//! County interdependence from mutual information with adjacent counties,
//! score normalization and threshold-based county selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{AdjacencyList, CaseSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeriesTransform {
    Raw,
    DailyDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiConfig {
    pub bins: usize,
    pub min_length: usize,
    pub transform: SeriesTransform,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            min_length: 30,
            transform: SeriesTransform::DailyDifference,
        }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Domain(format!("bins must be at least 2, got {}", self.bins)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    pub nats: f64,
    /// At least one input was constant.
    pub degenerate: bool,
}

pub trait MiEstimator: Sync {
    fn estimate(&self, x: &[f64], y: &[f64]) -> Result<MiEstimate>;
}

/// Plug-in estimate on an equal-frequency 2-D histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginEstimator {
    pub config: MiConfig,
}

impl MiEstimator for PluginEstimator {
    fn estimate(&self, x: &[f64], y: &[f64]) -> Result<MiEstimate> {
        estimate_mi(x, y, &self.config)
    }
}

/// Equal-frequency bin labels. Ties share the bin of their lowest rank, so
/// equal values never straddle a boundary.
pub fn equal_frequency_bins(x: &[f64], bins: usize) -> Vec<usize> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut labels = vec![0; n];
    let mut r = 0;
    while r < n {
        let bin = r * bins / n;
        let mut end = r;
        while end < n && x[order[end]] == x[order[r]] {
            labels[order[end]] = bin;
            end += 1;
        }
        r = end;
    }
    labels
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

/// Σ p(a,b) ln(p(a,b) / (p(a) p(b))) over pre-binned labels.
pub fn plugin_mi(a: &[usize], b: &[usize], bins: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0usize; bins * bins];
    let mut pa = vec![0usize; bins];
    let mut pb = vec![0usize; bins];
    for (&i, &j) in a.iter().zip(b) {
        joint[i * bins + j] += 1;
        pa[i] += 1;
        pb[j] += 1;
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (pa[i] as f64 * pb[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

pub fn estimate_mi(x: &[f64], y: &[f64], config: &MiConfig) -> Result<MiEstimate> {
    config.validate()?;
    if x.len() != y.len() {
        return Err(Error::dim("mutual information series", x.len(), y.len()));
    }
    if x.len() < config.min_length {
        return Err(Error::Domain(format!(
            "series of length {} is shorter than the minimum {}",
            x.len(),
            config.min_length
        )));
    }
    if is_constant(x) || is_constant(y) {
        return Ok(MiEstimate { nats: 0.0, degenerate: true });
    }
    let a = equal_frequency_bins(x, config.bins);
    let b = equal_frequency_bins(y, config.bins);
    // Sum in a canonical argument order so the estimate is exactly symmetric.
    let nats = if (x, &a) <= (y, &b) { plugin_mi(&a, &b, config.bins) } else { plugin_mi(&b, &a, config.bins) };
    Ok(MiEstimate { nats, degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborScores {
    /// ρ̄: mean neighbour MI per county.
    pub raw: Vec<f64>,
    pub n_neighbors: Vec<usize>,
    /// No neighbours, or every neighbour pair degenerate.
    pub degenerate: Vec<bool>,
}

/// County series after the configured transform, one row per county.
pub fn transformed_series(series: &CaseSeries, transform: SeriesTransform) -> Vec<Vec<f64>> {
    match transform {
        SeriesTransform::Raw => series.cumulative.rows().into_iter().map(|r| r.to_vec()).collect(),
        SeriesTransform::DailyDifference => series.daily_increase().rows().into_iter().map(|r| r.to_vec()).collect(),
    }
}

pub fn neighbor_dependency(series: &CaseSeries, adjacency: &AdjacencyList, config: &MiConfig) -> Result<NeighborScores> {
    neighbor_dependency_with(series, adjacency, config.transform, &PluginEstimator { config: config.clone() })
}

pub fn neighbor_dependency_with(
    series: &CaseSeries,
    adjacency: &AdjacencyList,
    transform: SeriesTransform,
    estimator: &dyn MiEstimator,
) -> Result<NeighborScores> {
    if adjacency.len() != series.n_counties() {
        return Err(Error::dim("adjacency counties", series.n_counties(), adjacency.len()));
    }
    let rows = transformed_series(series, transform);
    let edges: Vec<(usize, usize)> = adjacency.edges().collect();
    let pair_mi: Vec<MiEstimate> = edges
        .par_iter()
        .map(|&(i, j)| estimator.estimate(&rows[i], &rows[j]))
        .collect::<Result<_>>()?;
    let n = series.n_counties();
    let mut sum = vec![0.0; n];
    let mut live = vec![0usize; n];
    for (&(i, j), est) in edges.iter().zip(&pair_mi) {
        for c in [i, j] {
            sum[c] += est.nats;
            if !est.degenerate {
                live[c] += 1;
            }
        }
    }
    let n_neighbors: Vec<usize> = (0..n).map(|i| adjacency.neighbors(i).len()).collect();
    Ok(NeighborScores {
        raw: (0..n).map(|i| if n_neighbors[i] == 0 { 0.0 } else { sum[i] / n_neighbors[i] as f64 }).collect(),
        degenerate: (0..n).map(|i| live[i] == 0).collect(),
        n_neighbors,
    })
}

/// (ρ̄ − min) / (max − min); all zeros with the flag set when max == min.
pub fn normalize_scores(raw: &[f64]) -> Result<(Vec<f64>, bool)> {
    if raw.is_empty() {
        return Err(Error::Domain("no scores to normalize".into()));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok((vec![0.0; raw.len()], true));
    }
    Ok((raw.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect(), false))
}

/// Keep mask: a county is dropped iff its normalized score is below δ.
pub fn select_counties(normalized: &[f64], delta: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Domain(format!("delta must lie in [0, 1], got {delta}")));
    }
    Ok(normalized.iter().map(|v| *v >= delta).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyScores {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub n_neighbors: Vec<usize>,
    pub degenerate: Vec<bool>,
    /// Every county had the same raw score.
    pub flat: bool,
}

pub fn dependency_scores(series: &CaseSeries, adjacency: &AdjacencyList, config: &MiConfig) -> Result<DependencyScores> {
    let s = neighbor_dependency(series, adjacency, config)?;
    let (normalized, flat) = normalize_scores(&s.raw)?;
    Ok(DependencyScores {
        raw: s.raw,
        normalized,
        n_neighbors: s.n_neighbors,
        degenerate: s.degenerate,
        flat,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub removed_fraction: f64,
    pub mse: Option<f64>,
    pub weighted_mse: Option<f64>,
    pub error: Option<String>,
}

/// Evaluates `evaluate(keep_mask)` at each δ. A failing evaluation is
/// recorded in its row and the sweep moves on.
pub fn delta_sweep(
    scores: &DependencyScores,
    deltas: &[f64],
    mut evaluate: impl FnMut(f64, &[bool]) -> Result<(f64, f64)>,
) -> Result<Vec<SweepRow>> {
    if deltas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Domain("deltas must be sorted ascending".into()));
    }
    let n = scores.normalized.len().max(1) as f64;
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let keep = select_counties(&scores.normalized, delta)?;
        let removed = keep.iter().filter(|k| !**k).count() as f64 / n;
        let (mse, weighted_mse, error) = match evaluate(delta, &keep) {
            Ok((m, w)) => (Some(m), Some(w), None),
            Err(e) => {
                log::warn!("delta {delta}: evaluation failed: {e}");
                (None, None, Some(e.to_string()))
            }
        };
        rows.push(SweepRow {
            delta,
            removed_fraction: removed,
            mse,
            weighted_mse,
            error,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn cfg() -> MiConfig {
        MiConfig { bins: 4, min_length: 4, transform: SeriesTransform::Raw }
    }

    /// Entropy of the binned series, computed from label counts.
    fn binned_entropy(x: &[f64], bins: usize) -> f64 {
        let labels = equal_frequency_bins(x, bins);
        let mut counts = vec![0.0; bins];
        for l in labels {
            counts[l] += 1.0;
        }
        let n = x.len() as f64;
        counts.iter().filter(|c| **c > 0.0).map(|c| -(c / n) * (c / n).ln()).sum()
    }

    #[test]
    fn self_mi_is_binned_entropy() {
        let x: Vec<f64> = (0..40).map(|i| ((i * 37) % 17) as f64).collect();
        let mi = estimate_mi(&x, &x, &cfg()).unwrap();
        assert!((mi.nats - binned_entropy(&x, 4)).abs() < 1e-12);
        let balanced: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert!((estimate_mi(&balanced, &balanced, &cfg()).unwrap().nats - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_series_is_degenerate() {
        let x = vec![3.0; 10];
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let e = estimate_mi(&x, &y, &cfg()).unwrap();
        assert_eq!(e, MiEstimate { nats: 0.0, degenerate: true });
        assert!(estimate_mi(&y[..5], &y, &cfg()).is_err());
        assert!(estimate_mi(&y[..3], &y[..3], &cfg()).is_err());
    }

    #[test]
    fn ties_share_a_bin() {
        let labels = equal_frequency_bins(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0], 4);
        assert_eq!(&labels[..5], &[0; 5]);
        assert_eq!(&labels[5..], &[2, 3, 3]);
    }

    #[test]
    fn normalization_by_hand() {
        assert_eq!(normalize_scores(&[1.0, 3.0]).unwrap(), (vec![0.0, 1.0], false));
        assert_eq!(normalize_scores(&[2.0, 2.0, 2.0]).unwrap(), (vec![0.0; 3], true));
        assert!(normalize_scores(&[]).is_err());
    }

    #[test]
    fn selection_boundaries() {
        let s = [0.0, 0.3, 1.0];
        assert_eq!(select_counties(&s, 0.0).unwrap(), vec![true; 3]);
        assert_eq!(select_counties(&s, 1.0).unwrap(), vec![false, false, true]);
        assert_eq!(select_counties(&s, 0.3).unwrap(), vec![false, true, true]);
        assert!(select_counties(&s, 1.5).is_err());
    }

    fn series(rows: Vec<Vec<f64>>) -> CaseSeries {
        let n = rows.len();
        let t = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        CaseSeries::new(
            (0..n).map(|i| format!("{:05}", i + 1)).collect(),
            (0..t).map(|d| format!("d{d}")).collect(),
            Array2::from_shape_vec((n, t), flat).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn copies_give_self_mi_and_isolated_counties_are_flagged() {
        let x: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 + i as f64).collect();
        let s = series(vec![x.clone(), x.clone(), x.clone(), vec![1.0; 30]]);
        let adj = AdjacencyList::from_edges(4, [(0, 1), (0, 2)]).unwrap();
        let config = cfg();
        let scores = neighbor_dependency(&s, &adj, &config).unwrap();
        let self_mi = estimate_mi(&x, &x, &config).unwrap().nats;
        assert!((scores.raw[0] - self_mi).abs() < 1e-12);
        assert_eq!(scores.raw[3], 0.0);
        assert!(scores.degenerate[3] && !scores.degenerate[0]);
        assert_eq!(scores.n_neighbors, vec![2, 1, 1, 0]);
    }

    #[test]
    fn zero_cases_everywhere_give_zero_scores() {
        let s = series(vec![vec![0.0; 40]; 5]);
        let adj = AdjacencyList::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let scores = dependency_scores(&s, &adj, &MiConfig::default()).unwrap();
        assert!(scores.raw.iter().all(|v| *v == 0.0));
        assert!(scores.flat);
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let scores = DependencyScores {
            raw: vec![0.0, 1.0, 2.0, 4.0],
            normalized: vec![0.0, 0.25, 0.5, 1.0],
            n_neighbors: vec![1; 4],
            degenerate: vec![false; 4],
            flat: false,
        };
        let rows = delta_sweep(&scores, &[0.0, 0.3, 0.6], |d, keep| {
            if d == 0.3 {
                Err(Error::Domain("boom".into()))
            } else {
                Ok((keep.len() as f64, 1.0))
            }
        })
        .unwrap();
        assert_eq!(rows.iter().map(|r| r.removed_fraction).collect::<Vec<_>>(), vec![0.0, 0.5, 0.75]);
        assert!(rows[1].error.is_some() && rows[2].mse == Some(4.0));
        assert!(delta_sweep(&scores, &[0.5, 0.1], |_, _| Ok((0.0, 0.0))).is_err());
    }

    proptest! {
        #[test]
        fn mi_symmetric_nonnegative_and_bounded_by_self(
            x in proptest::collection::vec(-5.0f64..5.0, 30),
            y in proptest::collection::vec(-5.0f64..5.0, 30),
        ) {
            let c = MiConfig { bins: 5, min_length: 30, transform: SeriesTransform::Raw };
            let xy = estimate_mi(&x, &y, &c).unwrap().nats;
            let yx = estimate_mi(&y, &x, &c).unwrap().nats;
            prop_assert!((xy - yx).abs() <= 1e-12);
            prop_assert!(xy >= 0.0);
            prop_assert!(estimate_mi(&x, &x, &c).unwrap().nats + 1e-12 >= xy);
        }

        #[test]
        fn removals_are_nested(scores in proptest::collection::vec(0.0f64..=1.0, 1..40), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let k_lo = select_counties(&scores, lo).unwrap();
            let k_hi = select_counties(&scores, hi).unwrap();
            for (l, h) in k_lo.iter().zip(&k_hi) {
                prop_assert!(*l || !*h);
            }
        }
    }
}
