//! Single-county SEIR dynamics, the flow-coupled county mixing model, Euler
//! integration and scenario corpus generation.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::CountyTable;
use crate::rng::{derive_seed, rng_from_seed};

pub const S: usize = 0;
pub const E: usize = 1;
pub const I: usize = 2;
pub const R: usize = 3;

pub const DEFAULT_STEP: f64 = 0.25;
const MAX_INIT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeirParams {
    pub beta: f64,
    pub sigma: f64,
    pub gamma: f64,
}

impl SeirParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.sigma >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Domain(format!("SEIR rates must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixParams {
    pub mu_flow: f64,
    pub mu_spread: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub lambda_e: f64,
    pub lambda_i: f64,
}

impl Default for MixParams {
    fn default() -> Self {
        Self {
            mu_flow: 100.0,
            mu_spread: 500.0,
            sigma: 0.25,
            gamma: 0.12,
            lambda_e: 2e-4,
            lambda_i: 0.3,
        }
    }
}

impl MixParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mu_flow > 0.0
            && self.mu_spread > 0.0
            && self.sigma >= 0.0
            && self.gamma >= 0.0
            && (0.0..=1.0).contains(&self.lambda_e)
            && (0.0..=1.0).contains(&self.lambda_i)
            && self.lambda_e * self.lambda_i <= 1.0;
        if !ok {
            return Err(Error::Domain(format!("invalid mixing parameters: {self:?}")));
        }
        Ok(())
    }
}

/// Persons per compartment, one row per county, columns (S, E, I, R).
#[derive(Debug, Clone, PartialEq)]
pub struct CompartmentMatrix {
    values: Array2<f64>,
    populations: Array1<f64>,
}

impl CompartmentMatrix {
    /// Checks non-negativity and that each row sums to its county population.
    pub fn new(values: Array2<f64>, populations: Array1<f64>) -> Result<Self> {
        if values.ncols() != 4 {
            return Err(Error::dim("compartment columns", 4, values.ncols()));
        }
        if values.nrows() != populations.len() {
            return Err(Error::dim("compartment rows", populations.len(), values.nrows()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("compartment value {v} is not a non-negative finite number")));
        }
        for (i, row) in values.rows().into_iter().enumerate() {
            let p = populations[i];
            if !(p > 0.0) || (row.sum() - p).abs() > 1e-6 * p {
                return Err(Error::Domain(format!(
                    "county row {i}: compartments sum to {} but population is {p}",
                    row.sum()
                )));
            }
        }
        Ok(Self { values, populations })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn populations(&self) -> &Array1<f64> {
        &self.populations
    }

    pub fn n_counties(&self) -> usize {
        self.values.nrows()
    }

    /// Recorded cumulative cases per county: I + R.
    pub fn recorded(&self) -> Array1<f64> {
        self.values.column(I).to_owned() + self.values.column(R)
    }

    /// Largest |row sum − population| relative to population.
    pub fn max_conservation_error(&self) -> f64 {
        self.values
            .rows()
            .into_iter()
            .zip(self.populations.iter())
            .map(|(row, p)| (row.sum() - p).abs() / p)
            .fold(0.0, f64::max)
    }
}

/// Time derivative of one county's closed SEIR system.
pub fn seir_derivative(state: [f64; 4], params: &SeirParams, n: f64) -> Result<[f64; 4]> {
    if !(n > 0.0) {
        return Err(Error::Domain(format!("population N must be positive, got {n}")));
    }
    let [s, e, i, _] = state;
    let infection = params.beta * i * (s / n);
    Ok([
        -infection,
        infection - params.sigma * e,
        params.sigma * e - params.gamma * i,
        params.gamma * i,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrix {
    pub raw: Array2<f64>,
    pub balanced: Array2<f64>,
}

impl FlowMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            raw: Array2::zeros((n, n)),
            balanced: Array2::zeros((n, n)),
        }
    }

    pub fn n_counties(&self) -> usize {
        self.raw.nrows()
    }

    /// Zeroes raw flows below `epsilon` and rebalances.
    pub fn sparsify(&self, epsilon: f64) -> Result<Self> {
        let raw = self.raw.mapv(|f| if f < epsilon { 0.0 } else { f });
        let balanced = balance_flow(&raw)?;
        Ok(Self { raw, balanced })
    }
}

/// f_ij = min(p_i, p_j) / (d_ij · mu_flow) off the diagonal, zero on it.
pub fn build_flow_matrix(table: &CountyTable, distances: &Array2<f64>, mu_flow: f64) -> Result<FlowMatrix> {
    let n = table.len();
    if distances.dim() != (n, n) {
        return Err(Error::dim("distance matrix", format!("{n}x{n}"), format!("{:?}", distances.dim())));
    }
    if !(mu_flow > 0.0) {
        return Err(Error::Domain(format!("mu_flow must be positive, got {mu_flow}")));
    }
    let pops = table.populations();
    let ids = table.ids();
    let mut raw = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = distances[[i, j]];
            if !(d > 0.0) {
                return Err(Error::DegenerateDistance {
                    a: ids[i].clone(),
                    b: ids[j].clone(),
                });
            }
            let f = pops[i].min(pops[j]) / (d * mu_flow);
            raw[[i, j]] = f;
            raw[[j, i]] = f;
        }
    }
    let balanced = balance_flow(&raw)?;
    Ok(FlowMatrix { raw, balanced })
}

/// F − diag(1ᵀF). Rejects matrices that are not symmetric.
pub fn balance_flow(raw: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, m) = raw.dim();
    if n != m {
        return Err(Error::dim("flow matrix", "square", format!("{n}x{m}")));
    }
    let scale = raw.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut max_deviation = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_deviation = max_deviation.max((raw[[i, j]] - raw[[j, i]]).abs());
        }
    }
    if max_deviation > 1e-12 * scale {
        return Err(Error::Asymmetric { max_deviation });
    }
    let col_sums = raw.sum_axis(Axis(0));
    let mut balanced = raw.clone();
    for i in 0..n {
        balanced[[i, i]] -= col_sums[i];
    }
    Ok(balanced)
}

/// Derivative of the flow-coupled system, `counties × 4`.
///
/// Row i: F^bal·x_k plus the county's own SEIR transitions with β_i.
pub fn mixing_derivative(
    state: &CompartmentMatrix,
    flow: &FlowMatrix,
    beta: &[f64],
    sigma: f64,
    gamma: f64,
) -> Result<Array2<f64>> {
    let n = state.n_counties();
    if flow.n_counties() != n {
        return Err(Error::dim("flow matrix", n, flow.n_counties()));
    }
    if beta.len() != n {
        return Err(Error::dim("beta vector", n, beta.len()));
    }
    let p = state.values();
    let pops = state.populations();
    let mut x = p.clone();
    for (mut row, pop) in x.rows_mut().into_iter().zip(pops.iter()) {
        row.mapv_inplace(|v| v / pop);
    }
    let moved = flow.balanced.dot(&x);
    let mut out = Array2::zeros((n, 4));
    for i in 0..n {
        let (s, e, inf) = (p[[i, S]], p[[i, E]], p[[i, I]]);
        let infection = beta[i] * inf * (s / pops[i]);
        out[[i, S]] = moved[[i, S]] - infection;
        out[[i, E]] = moved[[i, E]] + infection - sigma * e;
        out[[i, I]] = moved[[i, I]] + sigma * e - gamma * inf;
        out[[i, R]] = moved[[i, R]] + gamma * inf;
    }
    Ok(out)
}

/// One explicit Euler step. Negative entries are clamped to zero and the
/// deficit is taken from the county's largest compartment. Returns the new
/// state and the number of clamped entries.
pub fn euler_step(state: &CompartmentMatrix, derivative: &Array2<f64>, h: f64) -> Result<(CompartmentMatrix, usize)> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {h}")));
    }
    if derivative.dim() != state.values.dim() {
        return Err(Error::dim(
            "derivative",
            format!("{:?}", state.values.dim()),
            format!("{:?}", derivative.dim()),
        ));
    }
    if derivative.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SEIR derivative".into()));
    }
    let mut next = &state.values + &(derivative * h);
    let mut clamps = 0;
    for mut row in next.rows_mut() {
        let mut deficit = 0.0;
        for v in row.iter_mut() {
            if *v < 0.0 {
                deficit -= *v;
                *v = 0.0;
                clamps += 1;
            }
        }
        if deficit > 0.0 {
            let largest = (0..4).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            row[largest] = (row[largest] - deficit).max(0.0);
        }
    }
    Ok((
        CompartmentMatrix {
            values: next,
            populations: state.populations.clone(),
        },
        clamps,
    ))
}

fn poisson(rng: &mut impl Rng, mean: f64) -> Result<f64> {
    if mean == 0.0 {
        return Ok(0.0);
    }
    let dist = Poisson::new(mean).map_err(|e| Error::Domain(format!("Poisson mean {mean}: {e}")))?;
    Ok(dist.sample(rng))
}

/// E(0) ~ Poisson(p·λ_E), I(0) ~ Poisson(p·λ_E·λ_I), R(0) = 0, S = p − E − I.
/// Draws with E + I > p are rejected and redrawn.
pub fn sample_initial_state(table: &CountyTable, params: &MixParams, seed: u64) -> Result<CompartmentMatrix> {
    params.validate()?;
    let mut rng = rng_from_seed(seed);
    let pops = Array1::from(table.populations());
    let mut values = Array2::zeros((table.len(), 4));
    for (i, &p) in pops.iter().enumerate() {
        let mut attempt = 0;
        let (e, inf) = loop {
            let e = poisson(&mut rng, p * params.lambda_e)?;
            let inf = poisson(&mut rng, p * params.lambda_e * params.lambda_i)?;
            if e + inf <= p {
                break (e, inf);
            }
            attempt += 1;
            if attempt >= MAX_INIT_ATTEMPTS {
                return Err(Error::Domain(format!(
                    "county {}: initial draw exceeded population {MAX_INIT_ATTEMPTS} times",
                    table.records()[i].id
                )));
            }
        };
        values[[i, S]] = p - e - inf;
        values[[i, E]] = e;
        values[[i, I]] = inf;
    }
    CompartmentMatrix::new(values, pops)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// State at each day boundary t = 0..days-1.
    pub states: Vec<CompartmentMatrix>,
    /// Recorded cumulative cases (I + R), `counties × days`.
    pub cumulative: Array2<f64>,
    /// Day-over-day increase of `cumulative` floored at zero; column 0 is zero.
    pub incidence: Array2<f64>,
    pub clamp_events: usize,
}

/// Integer number of Euler steps per day; `h` must be 1/m.
pub fn steps_per_day(h: f64) -> Result<usize> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::Domain(format!("step size must lie in (0, 1], got {h}")));
    }
    let m = (1.0 / h).round();
    if (m * h - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("step size {h} does not divide one day")));
    }
    Ok(m as usize)
}

pub fn incidence_from_cumulative(cumulative: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(cumulative.dim());
    for d in 1..cumulative.ncols() {
        for i in 0..cumulative.nrows() {
            out[[i, d]] = (cumulative[[i, d]] - cumulative[[i, d - 1]]).max(0.0);
        }
    }
    out
}

/// β_i = ρ_i / μ_spread.
pub fn spread_rates(table: &CountyTable, mu_spread: f64) -> Vec<f64> {
    table.densities().into_iter().map(|rho| rho / mu_spread).collect()
}

/// Runs the mixing model from an initial state for `days` sampled days.
pub fn simulate_from(
    initial: CompartmentMatrix,
    flow: &FlowMatrix,
    beta: &[f64],
    sigma: f64,
    gamma: f64,
    days: usize,
    h: f64,
) -> Result<Trajectory> {
    if days == 0 {
        return Err(Error::Domain("simulation needs at least one day".into()));
    }
    let m = steps_per_day(h)?;
    let n = initial.n_counties();
    let mut cumulative = Array2::zeros((n, days));
    cumulative.column_mut(0).assign(&initial.recorded());
    let mut states = Vec::with_capacity(days);
    let mut state = initial;
    let mut clamp_events = 0;
    states.push(state.clone());
    for d in 1..days {
        for _ in 0..m {
            let deriv = mixing_derivative(&state, flow, beta, sigma, gamma)?;
            let (next, clamps) = euler_step(&state, &deriv, h)?;
            clamp_events += clamps;
            state = next;
        }
        cumulative.column_mut(d).assign(&state.recorded());
        states.push(state.clone());
    }
    if clamp_events > 0 {
        log::debug!("{clamp_events} negative compartment entries clamped");
    }
    let incidence = incidence_from_cumulative(&cumulative);
    Ok(Trajectory {
        states,
        cumulative,
        incidence,
        clamp_events,
    })
}

pub fn simulate_scenario(
    table: &CountyTable,
    flow: &FlowMatrix,
    params: &MixParams,
    days: usize,
    h: f64,
    seed: u64,
) -> Result<Trajectory> {
    params.validate()?;
    let initial = sample_initial_state(table, params, seed)?;
    let beta = spread_rates(table, params.mu_spread);
    simulate_from(initial, flow, &beta, params.sigma, params.gamma, days, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamRanges {
    pub sigma: (f64, f64),
    pub gamma: (f64, f64),
    pub mu_spread: (f64, f64),
    pub mu_flow: (f64, f64),
    pub lambda_e: (f64, f64),
    pub lambda_i: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            sigma: (0.1, 0.5),
            gamma: (0.05, 0.3),
            mu_spread: (1e3, 1e5),
            mu_flow: (1e4, 1e7),
            lambda_e: (1e-6, 1e-4),
            lambda_i: (0.1, 0.5),
        }
    }
}

impl ParamRanges {
    fn named(&self) -> [(&'static str, (f64, f64)); 6] {
        [
            ("sigma", self.sigma),
            ("gamma", self.gamma),
            ("mu_spread", self.mu_spread),
            ("mu_flow", self.mu_flow),
            ("lambda_e", self.lambda_e),
            ("lambda_i", self.lambda_i),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in self.named() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Domain(format!("range for {name} must satisfy lo <= hi, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    /// Draws every parameter independently and uniformly from its range.
    pub fn sample(&self, rng: &mut impl Rng) -> MixParams {
        let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        MixParams {
            sigma: draw(self.sigma),
            gamma: draw(self.gamma),
            mu_spread: draw(self.mu_spread),
            mu_flow: draw(self.mu_flow),
            lambda_e: draw(self.lambda_e),
            lambda_i: draw(self.lambda_i),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub index: usize,
    pub split: Split,
    pub seed: u64,
    pub params: MixParams,
    /// `counties × days` recorded cumulative cases.
    pub cumulative: Array2<f64>,
}

impl Scenario {
    pub fn incidence(&self) -> Array2<f64> {
        incidence_from_cumulative(&self.cumulative)
    }

    pub fn national_totals(&self) -> Vec<f64> {
        self.cumulative.sum_axis(Axis(0)).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub days: usize,
    pub h: f64,
    pub n_train: usize,
    pub n_valid: usize,
    pub ranges: ParamRanges,
    pub county_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioCorpus {
    pub header: CorpusHeader,
    pub scenarios: Vec<Scenario>,
}

impl ScenarioCorpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Scenario> {
        self.scenarios.iter().filter(move |s| s.split == split)
    }
}

const CORPUS_FORMAT: &str = "epiforge-corpus";

#[allow(clippy::too_many_arguments)]
pub fn generate_corpus(
    table: &CountyTable,
    distances: &Array2<f64>,
    ranges: &ParamRanges,
    n_train: usize,
    n_valid: usize,
    days: usize,
    h: f64,
    seed: u64,
) -> Result<ScenarioCorpus> {
    ranges.validate()?;
    steps_per_day(h)?;
    let total = n_train + n_valid;
    let scenarios = (0..total)
        .into_par_iter()
        .map(|index| {
            let scenario_seed = derive_seed(seed, &format!("scenario/{index}"));
            let mut rng = rng_from_seed(derive_seed(scenario_seed, "params"));
            let params = ranges.sample(&mut rng);
            let flow = build_flow_matrix(table, distances, params.mu_flow)?;
            let traj = simulate_scenario(table, &flow, &params, days, h, derive_seed(scenario_seed, "init"))?;
            Ok(Scenario {
                index,
                split: if index < n_train { Split::Train } else { Split::Valid },
                seed: scenario_seed,
                params,
                cumulative: traj.cumulative,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioCorpus {
        header: CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: 1,
            seed,
            days,
            h,
            n_train,
            n_valid,
            ranges: *ranges,
            county_ids: table.ids(),
        },
        scenarios,
    })
}

#[derive(Serialize, Deserialize)]
struct ScenarioLine {
    index: usize,
    split: Split,
    seed: u64,
    params: MixParams,
    cumulative: Vec<Vec<f64>>,
}

/// JSON Lines: a header line, then one scenario per line.
pub fn write_corpus(path: &Path, corpus: &ScenarioCorpus) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &corpus.header)?;
    w.write_all(b"\n").map_err(io)?;
    for s in &corpus.scenarios {
        let line = ScenarioLine {
            index: s.index,
            split: s.split,
            seed: s.seed,
            params: s.params,
            cumulative: s.cumulative.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_corpus(path: &Path) -> Result<ScenarioCorpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty corpus file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: CorpusHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != CORPUS_FORMAT {
        return Err(parse_err(1, format!("unexpected format `{}`", header.format)));
    }
    let n = header.county_ids.len();
    let mut scenarios = Vec::with_capacity(header.n_train + header.n_valid);
    for (k, line) in lines.enumerate() {
        let lineno = k as u64 + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ScenarioLine = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if s.cumulative.len() != n || s.cumulative.iter().any(|r| r.len() != header.days) {
            return Err(parse_err(lineno, format!("expected a {n}x{} matrix", header.days)));
        }
        let flat: Vec<f64> = s.cumulative.into_iter().flatten().collect();
        scenarios.push(Scenario {
            index: s.index,
            split: s.split,
            seed: s.seed,
            params: s.params,
            cumulative: Array2::from_shape_vec((n, header.days), flat).expect("shape checked"),
        });
    }
    if scenarios.len() != header.n_train + header.n_valid {
        return Err(parse_err(0, format!("header announces {} scenarios, found {}", header.n_train + header.n_valid, scenarios.len())));
    }
    Ok(ScenarioCorpus { header, scenarios })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{distance_matrix, synthetic_table, CountyRecord};
    use proptest::prelude::*;
    use rand::Rng;

    fn table(pops: &[u64]) -> CountyTable {
        CountyTable::new(
            pops.iter()
                .enumerate()
                .map(|(k, &p)| CountyRecord {
                    id: format!("{:05}", k + 1),
                    name: format!("c{k}"),
                    state: "S".into(),
                    lat: 40.0 + k as f64 * 0.5,
                    lon: -90.0 + k as f64 * 0.3,
                    population: p,
                    density: 50.0 + 10.0 * k as f64,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn seir_derivative_by_hand() {
        let p = SeirParams { beta: 0.5, sigma: 0.2, gamma: 0.1 };
        let d = seir_derivative([900.0, 0.0, 100.0, 0.0], &p, 1000.0).unwrap();
        let expect = [-45.0, 45.0, -10.0, 10.0];
        for k in 0..4 {
            assert!((d[k] - expect[k]).abs() < 1e-12);
        }
        assert_eq!(seir_derivative([1000.0, 0.0, 0.0, 0.0], &p, 1000.0).unwrap(), [0.0; 4]);
        assert!(seir_derivative([0.0; 4], &p, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn seir_derivative_conserves(s in 0.0..1e6f64, e in 0.0..1e6f64, i in 0.0..1e6f64, r in 0.0..1e6f64,
                                     beta in 0.0..2.0f64, sigma in 0.0..1.0f64, gamma in 0.0..1.0f64) {
            let n = s + e + i + r;
            prop_assume!(n > 0.0);
            let d = seir_derivative([s, e, i, r], &SeirParams { beta, sigma, gamma }, n).unwrap();
            prop_assert!(d.iter().sum::<f64>().abs() <= 1e-12 * n.max(1.0) * 4.0);
        }
    }

    #[test]
    fn flow_matrix_two_counties() {
        let t = table(&[100, 200]);
        let d = ndarray::arr2(&[[0.0, 10.0], [10.0, 0.0]]);
        let f = build_flow_matrix(&t, &d, 1.0).unwrap();
        assert_eq!(f.raw, ndarray::arr2(&[[0.0, 10.0], [10.0, 0.0]]));
        let far = build_flow_matrix(&t, &d, 1e12).unwrap();
        assert!(far.raw.iter().all(|v| *v < 1e-9));
        let zero = ndarray::arr2(&[[0.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(build_flow_matrix(&t, &zero, 1.0), Err(Error::DegenerateDistance { .. })));
    }

    #[test]
    fn balance_by_hand() {
        let b = balance_flow(&ndarray::arr2(&[[0.0, 2.0], [2.0, 0.0]])).unwrap();
        assert_eq!(b, ndarray::arr2(&[[-2.0, 2.0], [2.0, -2.0]]));
        assert_eq!(balance_flow(&Array2::zeros((3, 3))).unwrap(), Array2::<f64>::zeros((3, 3)));
        match balance_flow(&ndarray::arr2(&[[0.0, 2.0], [1.5, 0.0]])) {
            Err(Error::Asymmetric { max_deviation }) => assert_eq!(max_deviation, 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn state(rows: &[[f64; 4]]) -> CompartmentMatrix {
        let values = Array2::from_shape_fn((rows.len(), 4), |(i, k)| rows[i][k]);
        let pops = values.sum_axis(Axis(1));
        CompartmentMatrix::new(values, pops).unwrap()
    }

    #[test]
    fn decoupled_mixing_equals_seir_bitwise() {
        let st = state(&[[900.0, 30.0, 50.0, 20.0], [5000.0, 1.0, 7.0, 0.0]]);
        let beta = [0.37, 0.81];
        let d = mixing_derivative(&st, &FlowMatrix::zeros(2), &beta, 0.21, 0.13).unwrap();
        for i in 0..2 {
            let row = st.values().row(i);
            let p = SeirParams { beta: beta[i], sigma: 0.21, gamma: 0.13 };
            let single = seir_derivative([row[0], row[1], row[2], row[3]], &p, st.populations()[i]).unwrap();
            for k in 0..4 {
                assert_eq!(d[[i, k]].to_bits(), single[k].to_bits());
            }
        }
    }

    #[test]
    fn identical_fractions_have_no_net_flow() {
        let st = state(&[[800.0, 100.0, 60.0, 40.0], [800.0, 100.0, 60.0, 40.0]]);
        let raw = ndarray::arr2(&[[0.0, 37.0], [37.0, 0.0]]);
        let flow = FlowMatrix { balanced: balance_flow(&raw).unwrap(), raw };
        let with = mixing_derivative(&st, &flow, &[0.2, 0.2], 0.1, 0.1).unwrap();
        let without = mixing_derivative(&st, &FlowMatrix::zeros(2), &[0.2, 0.2], 0.1, 0.1).unwrap();
        for (a, b) in with.iter().zip(without.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_form_matches_per_county_sums() {
        let mut rng = rng_from_seed(11);
        let rows: Vec<[f64; 4]> = (0..3)
            .map(|_| [rng.random_range(1e3..1e5), rng.random_range(0.0..500.0), rng.random_range(0.0..500.0), rng.random_range(0.0..500.0)])
            .collect();
        let st = state(&rows);
        let mut raw = Array2::zeros((3, 3));
        for i in 0..3 {
            for j in (i + 1)..3 {
                let f = rng.random_range(0.0..100.0);
                raw[[i, j]] = f;
                raw[[j, i]] = f;
            }
        }
        let flow = FlowMatrix { balanced: balance_flow(&raw).unwrap(), raw: raw.clone() };
        let beta = [0.3, 0.5, 0.7];
        let (sigma, gamma) = (0.2, 0.1);
        let got = mixing_derivative(&st, &flow, &beta, sigma, gamma).unwrap();
        let p = st.values();
        let pop = st.populations();
        for i in 0..3 {
            let x = |k: usize, j: usize| p[[j, k]] / pop[j];
            let mut expect = [0.0; 4];
            for (k, slot) in expect.iter_mut().enumerate() {
                let mut inflow = 0.0;
                let mut out = 0.0;
                for j in 0..3 {
                    inflow += raw[[i, j]] * x(k, j);
                    out += raw[[j, i]];
                }
                *slot = inflow - x(k, i) * out;
            }
            let inf = beta[i] * p[[i, I]] * x(S, i);
            expect[S] -= inf;
            expect[E] += inf - sigma * p[[i, E]];
            expect[I] += sigma * p[[i, E]] - gamma * p[[i, I]];
            expect[R] += gamma * p[[i, I]];
            for k in 0..4 {
                assert!((got[[i, k]] - expect[k]).abs() < 1e-10, "county {i} compartment {k}");
            }
            assert!(got.row(i).sum().abs() < 1e-9 * pop[i]);
        }
    }

    #[test]
    fn euler_scalar_and_errors() {
        let st = state(&[[100.0, 0.0, 0.0, 0.0]]);
        let mut d = Array2::zeros((1, 4));
        let (same, _) = euler_step(&st, &d, 0.3).unwrap();
        assert_eq!(same, st);
        d[[0, 0]] = 10.0;
        d[[0, 3]] = -10.0;
        let st2 = state(&[[100.0, 0.0, 0.0, 50.0]]);
        let (next, clamps) = euler_step(&st2, &d, 0.1).unwrap();
        assert_eq!(next.values()[[0, 0]], 101.0);
        assert_eq!(clamps, 0);
        assert!(euler_step(&st, &d, 0.0).is_err());
    }

    #[test]
    fn euler_clamp_preserves_total() {
        let st = state(&[[900.0, 5.0, 80.0, 15.0]]);
        let d = ndarray::arr2(&[[0.0, -20.0, 20.0, 0.0]]);
        let (next, clamps) = euler_step(&st, &d, 1.0).unwrap();
        assert_eq!(clamps, 1);
        assert_eq!(next.values()[[0, E]], 0.0);
        assert!((next.values().row(0).sum() - 1000.0).abs() < 1e-9);
        assert_eq!(next.values()[[0, S]], 885.0);
    }

    #[test]
    fn euler_first_order_on_decay() {
        let gamma = 0.1;
        let t_end = 10.0;
        let error = |h: f64| {
            let mut p = 100.0;
            let n = (t_end / h).round() as usize;
            for _ in 0..n {
                p += h * (-gamma * p);
            }
            (p - 100.0 * (-gamma * t_end).exp()).abs()
        };
        let ratio = error(0.5) / error(0.25);
        assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_prevalence_initial_state() {
        let t = table(&[1000, 2000]);
        let params = MixParams { mu_flow: 1e5, mu_spread: 1e4, sigma: 0.2, gamma: 0.1, lambda_e: 0.0, lambda_i: 0.3 };
        let st = sample_initial_state(&t, &params, 3).unwrap();
        assert_eq!(st.values().column(S).to_vec(), vec![1000.0, 2000.0]);
        assert!(st.values().column(R).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn initial_state_is_seeded() {
        let t = synthetic_table(10, 2, (1e4, 1e6), (10.0, 2000.0), 1).unwrap();
        let params = MixParams { mu_flow: 1e5, mu_spread: 1e4, sigma: 0.2, gamma: 0.1, lambda_e: 1e-3, lambda_i: 0.3 };
        let a = sample_initial_state(&t, &params, 42).unwrap();
        assert_eq!(a, sample_initial_state(&t, &params, 42).unwrap());
        assert_ne!(a, sample_initial_state(&t, &params, 43).unwrap());
        assert!(a.values().column(R).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_county_matches_scalar_loop() {
        let t = table(&[50_000]);
        let params = MixParams { mu_flow: 1e5, mu_spread: 200.0, sigma: 0.3, gamma: 0.12, lambda_e: 1e-3, lambda_i: 0.4 };
        let flow = build_flow_matrix(&t, &distance_matrix(&t), params.mu_flow).unwrap();
        let traj = simulate_scenario(&t, &flow, &params, 40, 0.25, 5).unwrap();
        let init = traj.states[0].values().row(0).to_vec();
        let beta = t.records()[0].density / params.mu_spread;
        let n = 50_000.0;
        let (mut s, mut e, mut i, mut r) = (init[0], init[1], init[2], init[3]);
        for day in 1..40 {
            for _ in 0..4 {
                let inf = beta * i * s / n;
                let (ds, de, di, dr) = (-inf, inf - params.sigma * e, params.sigma * e - params.gamma * i, params.gamma * i);
                s += 0.25 * ds;
                e += 0.25 * de;
                i += 0.25 * di;
                r += 0.25 * dr;
            }
            assert!((traj.cumulative[[0, day]] - (i + r)).abs() < 1e-10 * n, "day {day}");
        }
        assert_eq!(traj.clamp_events, 0);
    }

    #[test]
    fn no_dynamics_gives_zero_cases() {
        let t = synthetic_table(4, 2, (1e3, 1e4), (10.0, 2000.0), 2).unwrap();
        let params = MixParams { mu_flow: 1e5, mu_spread: 1e4, sigma: 0.0, gamma: 0.0, lambda_e: 0.0, lambda_i: 0.2 };
        let flow = build_flow_matrix(&t, &distance_matrix(&t), params.mu_flow).unwrap();
        let traj = simulate_scenario(&t, &flow, &params, 10, 0.5, 1).unwrap();
        assert!(traj.cumulative.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step_size_must_divide_day() {
        assert_eq!(steps_per_day(0.25).unwrap(), 4);
        assert!(steps_per_day(0.3).is_err());
        assert!(steps_per_day(0.0).is_err());
    }

    #[test]
    fn corpus_is_reproducible_and_round_trips() {
        let t = synthetic_table(6, 2, (1e4, 1e5), (10.0, 2000.0), 8).unwrap();
        let d = distance_matrix(&t);
        let ranges = ParamRanges { lambda_e: (1e-4, 1e-3), ..ParamRanges::default() };
        let a = generate_corpus(&t, &d, &ranges, 3, 2, 15, 0.5, 77).unwrap();
        let b = generate_corpus(&t, &d, &ranges, 3, 2, 15, 0.5, 77).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.split(Split::Train).count(), 3);
        assert_eq!(a.split(Split::Valid).count(), 2);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_corpus(&p1, &a).unwrap();
        write_corpus(&p2, &b).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back = read_corpus(&p1).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn degenerate_ranges_share_parameters() {
        let t = synthetic_table(3, 1, (1e4, 1e5), (10.0, 2000.0), 8).unwrap();
        let r = ParamRanges {
            sigma: (0.2, 0.2),
            gamma: (0.1, 0.1),
            mu_spread: (1e4, 1e4),
            mu_flow: (1e5, 1e5),
            lambda_e: (1e-4, 1e-4),
            lambda_i: (0.3, 0.3),
        };
        let c = generate_corpus(&t, &distance_matrix(&t), &r, 4, 0, 5, 1.0, 1).unwrap();
        assert!(c.scenarios.iter().all(|s| s.params == c.scenarios[0].params));
        let bad = ParamRanges { sigma: (0.5, 0.1), ..r };
        assert!(generate_corpus(&t, &distance_matrix(&t), &bad, 1, 0, 5, 1.0, 1).is_err());
    }
}
