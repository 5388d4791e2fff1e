//! Stacked-LSTM national-sequence model with a (national + per-county)
//! output head, trained on simulated scenario corpora.
//!
//! The input is the log national daily incidence y_t. Each step predicts
//! z_{t+1} = (y_{t+1}, y'_{t+1}), where y' is the min-max normalized county
//! incidence. Optional penalties push county outputs to be non-negative and
//! to add up to the national prediction.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    dense_forward, lstm_cell_forward, Activation, Checkpoint, DenseParams, LstmCellParams, Mat, Nadam,
    ParameterStore, Tape, Var,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::seir::{incidence_from_cumulative, ScenarioCorpus, Split};

pub const MODEL_TAG: &str = "tdefsi-lonly-v1";

/// How the spatial penalty compares county outputs to the national output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiScale {
    /// County outputs are denormalized to raw counts before summing.
    Raw,
    /// Normalized county outputs are summed as they are.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdefsiConfig {
    /// Number of stacked LSTM layers.
    pub k: usize,
    /// Hidden width of each LSTM layer.
    pub hidden: usize,
    /// Width of the hidden dense layer.
    pub dense: usize,
    /// Number of counties.
    pub n_counties: usize,
    /// Weight of the non-negativity penalty.
    pub lambda: f64,
    /// Weight of the spatial-consistency penalty.
    pub mu: f64,
    pub dropout: f64,
    pub phi_scale: PhiScale,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TdefsiConfig {
    fn default() -> Self {
        Self {
            k: 2,
            hidden: 16,
            dense: 32,
            n_counties: 20,
            lambda: 0.01,
            mu: 1e-4,
            dropout: 0.1,
            phi_scale: PhiScale::Raw,
            lr: 0.001,
            max_epochs: 300,
            patience: 50,
        }
    }
}

impl TdefsiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.hidden == 0 || self.dense == 0 {
            return Err(Error::Domain("k, hidden and dense must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.lambda < 0.0 || self.mu < 0.0 || !(self.lr > 0.0) {
            return Err(Error::Domain("invalid dropout, penalty weight or learning rate".into()));
        }
        Ok(())
    }
}

/// Which regularizers are active; the four experiment arms add them in turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegFlags {
    pub dropout: bool,
    pub nonneg: bool,
    pub spatial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    None,
    Dropout,
    DropoutNonneg,
    DropoutNonnegSpatial,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::None, Arm::Dropout, Arm::DropoutNonneg, Arm::DropoutNonnegSpatial];

    pub fn flags(self) -> RegFlags {
        let rank = self as usize;
        RegFlags {
            dropout: rank >= 1,
            nonneg: rank >= 2,
            spatial: rank >= 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::None => "none",
            Arm::Dropout => "dropout",
            Arm::DropoutNonneg => "dropout+nonneg",
            Arm::DropoutNonnegSpatial => "dropout+nonneg+spatial",
        }
    }
}

pub fn count_tdefsi_parameters(config: &TdefsiConfig) -> usize {
    let h = config.hidden;
    let mut total = 0;
    let mut input = 1;
    for _ in 0..config.k {
        total += 4 * (input + h + 1) * h;
        input = h;
    }
    total + (input + 1) * config.dense + (config.dense + 1) * (config.n_counties + 1)
}

/// Per-county min/max of the raw incidence used for normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Counties with max == min; their normalized values are pinned to 0.
    pub degenerate: Vec<bool>,
}

impl NormStats {
    pub fn range(&self, c: usize) -> f64 {
        self.max[c] - self.min[c]
    }

    pub fn denormalize(&self, c: usize, v: f64) -> f64 {
        v * self.range(c) + self.min[c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSeries {
    /// y_t = ln(1 + Σ_c raw_t^c).
    pub y: Vec<f64>,
    /// `counties × T`, min-max scaled per county.
    pub y_prime: Array2<f64>,
    pub stats: NormStats,
}

/// Normalizes raw county incidence (`counties × T`).
pub fn normalize_dataset(raw: &Array2<f64>) -> Result<NormalizedSeries> {
    let (k, t) = raw.dim();
    if t == 0 {
        return Err(Error::Domain("normalization needs at least one day".into()));
    }
    let y = (0..t).map(|d| raw.column(d).sum().max(0.0).ln_1p()).collect();
    let mut stats = NormStats {
        min: vec![0.0; k],
        max: vec![0.0; k],
        degenerate: vec![false; k],
    };
    let mut y_prime = Array2::zeros((k, t));
    for c in 0..k {
        let row = raw.row(c);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        stats.min[c] = lo;
        stats.max[c] = hi;
        if hi - lo <= 0.0 {
            stats.degenerate[c] = true;
            continue;
        }
        for d in 0..t {
            y_prime[[c, d]] = (raw[[c, d]] - lo) / (hi - lo);
        }
    }
    Ok(NormalizedSeries { y, y_prime, stats })
}

pub fn denormalize(y_prime: &Array2<f64>, stats: &NormStats) -> Array2<f64> {
    Array2::from_shape_fn(y_prime.dim(), |(c, d)| stats.denormalize(c, y_prime[[c, d]]))
}

/// |exp(ŷ) − Σ_c county_c| for one output vector (national first).
pub fn phi_regularizer(z_hat: &[f64], stats: &NormStats, scale: PhiScale) -> f64 {
    let national = z_hat[0].min(crate::nn::tape::EXP_CLIP).exp();
    let counties: f64 = z_hat[1..]
        .iter()
        .enumerate()
        .map(|(c, v)| match scale {
            PhiScale::Raw => stats.denormalize(c, *v),
            PhiScale::Normalized => *v,
        })
        .sum();
    (national - counties).abs()
}

/// Σ_i max(0, −ẑ_i).
pub fn nonneg_regularizer(z_hat: &[f64]) -> f64 {
    z_hat.iter().map(|v| (-v).max(0.0)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdefsiNet {
    pub config: TdefsiConfig,
    pub store: ParameterStore,
    layers: Vec<LstmCellParams>,
    hidden_dense: DenseParams,
    out: DenseParams,
}

/// Dropout masks for one forward pass, drawn per time step.
struct DropoutPlan {
    rate: f64,
    rng: rand_chacha::ChaCha8Rng,
}

impl DropoutPlan {
    fn mask(&mut self, rows: usize, cols: usize) -> Mat {
        let keep = 1.0 / (1.0 - self.rate);
        let data = (0..rows * cols)
            .map(|_| if self.rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        Mat::from_vec(rows, cols, data).expect("sized")
    }
}

impl TdefsiNet {
    pub fn new(config: TdefsiConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut layers = Vec::with_capacity(config.k);
        let mut input = 1;
        for l in 0..config.k {
            layers.push(LstmCellParams::register(&mut store, &format!("lstm_{l}"), input, config.hidden, seed)?);
            input = config.hidden;
        }
        let hidden_dense = DenseParams::register(&mut store, "dense_hidden", input, config.dense, seed)?;
        let out = DenseParams::register(&mut store, "dense_out", config.dense, config.n_counties + 1, seed)?;
        Ok(Self {
            config,
            store,
            layers,
            hidden_dense,
            out,
        })
    }

    /// Runs the stacked LSTMs over `inputs` and returns the `T × (K+1)`
    /// outputs for every step. Dropout between consecutive layers is applied
    /// when `dropout_seed` is given.
    pub fn forward_sequence(&self, tape: &mut Tape, inputs: &[f64], dropout_seed: Option<u64>) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Domain("input sequence is empty".into()));
        }
        let mut plan = dropout_seed
            .filter(|_| self.config.dropout > 0.0)
            .map(|s| DropoutPlan {
                rate: self.config.dropout,
                rng: rng_from_seed(s),
            });
        let h = self.config.hidden;
        let mut states: Vec<(Var, Var)> = (0..self.config.k)
            .map(|_| (tape.constant(Mat::zeros(1, h)), tape.constant(Mat::zeros(1, h))))
            .collect();
        let mut tops = Vec::with_capacity(inputs.len());
        for &y in inputs {
            let mut x = tape.constant(Mat::scalar(y));
            for (l, layer) in self.layers.iter().enumerate() {
                let (hp, cp) = states[l];
                let (hn, cn) = lstm_cell_forward(tape, &self.store, x, hp, cp, layer)?;
                states[l] = (hn, cn);
                x = hn;
                if let Some(p) = plan.as_mut() {
                    if l + 1 < self.layers.len() {
                        let m = tape.constant(p.mask(1, h));
                        x = tape.mul(x, m)?;
                    }
                }
            }
            tops.push(x);
        }
        let mut top = tape.concat_rows(&tops)?;
        if !tape.value(top).is_finite() {
            return Err(Error::NonFinite("LSTM stack activation".into()));
        }
        let t = inputs.len();
        if let Some(p) = plan.as_mut() {
            let m = tape.constant(p.mask(t, h));
            top = tape.mul(top, m)?;
        }
        let mut hidden = dense_forward(tape, &self.store, top, &self.hidden_dense, Activation::Relu)?;
        if let Some(p) = plan.as_mut() {
            let m = tape.constant(p.mask(t, self.config.dense));
            hidden = tape.mul(hidden, m)?;
        }
        let out = dense_forward(tape, &self.store, hidden, &self.out, Activation::Linear)?;
        if !tape.value(out).is_finite() {
            return Err(Error::NonFinite("output layer".into()));
        }
        Ok(out)
    }

    /// Output after consuming the whole window: (ŷ, ŷ'_1..ŷ'_K).
    pub fn lonly_forward(&self, window: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward_sequence(&mut tape, window, None)?;
        let v = tape.value(out);
        Ok(v.row(v.rows - 1).to_vec())
    }

    pub fn checkpoint(&self, seed: u64, arm: Arm) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "arm": arm,
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
        });
        Checkpoint::from_store(MODEL_TAG, meta, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.tag != MODEL_TAG {
            return Err(Error::Checkpoint(format!("expected model tag {MODEL_TAG}, found {}", ck.tag)));
        }
        let config: TdefsiConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut net = Self::new(config, 0)?;
        ck.restore_into(&mut net.store)?;
        Ok(net)
    }
}

/// One training sequence: inputs y_0..y_{T-2} and targets z_1..z_{T-1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub inputs: Vec<f64>,
    /// `(T-1) × (K+1)`.
    pub targets: Mat,
    pub stats: NormStats,
}

impl Sequence {
    pub fn from_incidence(raw: &Array2<f64>) -> Result<Self> {
        let norm = normalize_dataset(raw)?;
        let (k, t) = norm.y_prime.dim();
        if t < 2 {
            return Err(Error::Domain("a training sequence needs at least two days".into()));
        }
        let mut targets = Mat::zeros(t - 1, k + 1);
        for d in 1..t {
            targets.set(d - 1, 0, norm.y[d]);
            for c in 0..k {
                targets.set(d - 1, c + 1, norm.y_prime[[c, d]]);
            }
        }
        Ok(Self {
            inputs: norm.y[..t - 1].to_vec(),
            targets,
            stats: norm.stats,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub mse: f64,
    pub phi: f64,
    pub delta: f64,
    pub total: f64,
}

/// Builds the per-sequence loss on the tape:
/// mean_t[‖z−ẑ‖²/(K+1) + μ·φ + λ·δ] with the enabled penalties.
pub fn sequence_loss(
    net: &TdefsiNet,
    tape: &mut Tape,
    seq: &Sequence,
    flags: RegFlags,
    dropout_seed: Option<u64>,
) -> Result<(Var, LossParts)> {
    let cfg = &net.config;
    let out = net.forward_sequence(tape, &seq.inputs, if flags.dropout { dropout_seed } else { None })?;
    let (t, width) = tape.value(out).shape();
    if seq.targets.shape() != (t, width) {
        return Err(Error::dim("targets", format!("({t}, {width})"), format!("{:?}", seq.targets.shape())));
    }
    let target = tape.constant(seq.targets.clone());
    let e = tape.sub(out, target)?;
    let e2 = tape.mul(e, e)?;
    let s = tape.sum(e2);
    let mse = tape.scale(s, 1.0 / (t * width) as f64);
    let mut parts = LossParts {
        mse: tape.scalar(mse),
        ..LossParts::default()
    };
    let mut total = mse;
    if flags.nonneg && cfg.lambda > 0.0 {
        let neg = tape.scale(out, -1.0);
        let hinge = tape.relu(neg);
        let s = tape.sum(hinge);
        let mean = tape.scale(s, 1.0 / t as f64);
        parts.delta = tape.scalar(mean);
        let term = tape.scale(mean, cfg.lambda);
        total = tape.add(total, term)?;
    }
    if flags.spatial && cfg.mu > 0.0 && width > 1 {
        let k = width - 1;
        let national = tape.slice_cols(out, 0, 1)?;
        let national = tape.exp(national);
        let counties = tape.slice_cols(out, 1, k)?;
        let counties = match cfg.phi_scale {
            PhiScale::Raw => {
                let range = Mat::from_vec(t, k, (0..t * k).map(|i| seq.stats.range(i % k)).collect())?;
                let min = Mat::from_vec(t, k, (0..t * k).map(|i| seq.stats.min[i % k]).collect())?;
                let range = tape.constant(range);
                let min = tape.constant(min);
                let scaled = tape.mul(counties, range)?;
                tape.add(scaled, min)?
            }
            PhiScale::Normalized => counties,
        };
        let ones = tape.constant(Mat::filled(1, k, 1.0));
        let county_sum = tape.linear(counties, ones, None)?;
        let gap = tape.sub(national, county_sum)?;
        let gap = tape.abs(gap);
        let s = tape.sum(gap);
        let mean = tape.scale(s, 1.0 / t as f64);
        parts.phi = tape.scalar(mean);
        let term = tape.scale(mean, cfg.mu);
        total = tape.add(total, term)?;
    }
    parts.total = tape.scalar(total);
    Ok((total, parts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdefsiEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub train_mse: f64,
    pub valid_mse: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedTdefsi {
    pub net: TdefsiNet,
    pub arm: Arm,
    pub log: Vec<TdefsiEpochLog>,
    pub report: ArmReport,
}

pub fn corpus_sequences(corpus: &ScenarioCorpus, split: Split) -> Result<Vec<Sequence>> {
    corpus
        .split(split)
        .map(|s| Sequence::from_incidence(&incidence_from_cumulative(&s.cumulative)))
        .collect()
}

fn mean_loss(net: &TdefsiNet, seqs: &[Sequence], flags: RegFlags, dropout_seed: Option<u64>) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for (i, s) in seqs.iter().enumerate() {
        let mut tape = Tape::new();
        let (_, p) = sequence_loss(net, &mut tape, s, flags, dropout_seed.map(|d| derive_seed(d, &i.to_string())))?;
        acc.mse += p.mse;
        acc.phi += p.phi;
        acc.delta += p.delta;
        acc.total += p.total;
    }
    let n = seqs.len().max(1) as f64;
    Ok(LossParts {
        mse: acc.mse / n,
        phi: acc.phi / n,
        delta: acc.delta / n,
        total: acc.total / n,
    })
}

/// Trains one arm: one NAdam step per training scenario, early stopping on
/// the validation loss (dropout off) with best weights restored.
pub fn tdefsi_train(corpus: &ScenarioCorpus, config: &TdefsiConfig, arm: Arm, seed: u64) -> Result<TrainedTdefsi> {
    let train = corpus_sequences(corpus, Split::Train)?;
    let valid = corpus_sequences(corpus, Split::Valid)?;
    tdefsi_train_sequences(&train, &valid, config, arm, seed)
}

pub fn tdefsi_train_sequences(
    train: &[Sequence],
    valid: &[Sequence],
    config: &TdefsiConfig,
    arm: Arm,
    seed: u64,
) -> Result<TrainedTdefsi> {
    if train.is_empty() {
        return Err(Error::Domain("training corpus is empty".into()));
    }
    let flags = arm.flags();
    let mut net = TdefsiNet::new(config.clone(), derive_seed(seed, "init"))?;
    let opt = Nadam::with_lr(config.lr);
    let eval_flags = RegFlags { dropout: false, ..flags };
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, net.store.clone());
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = rng_from_seed(derive_seed(seed, &format!("order/{epoch}")));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        for (b, &idx) in order.iter().enumerate() {
            let mut tape = Tape::new();
            let drop_seed = derive_seed(seed, &format!("dropout/{epoch}/{b}"));
            let (loss, parts) = sequence_loss(&net, &mut tape, &train[idx], flags, Some(drop_seed))?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            tape.backward(loss, &mut net.store)?;
            net.store.nadam_update(&opt).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, batch: b },
                other => other,
            })?;
            total += parts.total;
        }
        let v = if valid.is_empty() { mean_loss(&net, train, eval_flags, None)? } else { mean_loss(&net, valid, eval_flags, None)? };
        if !v.total.is_finite() {
            return Err(Error::Diverged { epoch, batch: train.len() });
        }
        log.push(TdefsiEpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            valid_loss: v.total,
            valid_mse: v.mse,
        });
        if v.total < best.0 {
            best = (v.total, net.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    net.store.copy_values_from(&best.1)?;
    let report = arm_report(&net, arm, train, valid, seed)?;
    Ok(TrainedTdefsi { net, arm, log, report })
}

/// Final metrics with the restored weights. Training loss is measured the
/// way the arm was trained (dropout active with a fixed seed); MSE and the
/// validation loss use the deterministic network.
pub fn arm_report(net: &TdefsiNet, arm: Arm, train: &[Sequence], valid: &[Sequence], seed: u64) -> Result<ArmReport> {
    let flags = arm.flags();
    let eval_flags = RegFlags { dropout: false, ..flags };
    let train_eval = mean_loss(net, train, eval_flags, None)?;
    let train_loss = mean_loss(net, train, flags, Some(derive_seed(seed, "final-train-loss")))?;
    let valid_eval = mean_loss(net, valid, eval_flags, None)?;
    Ok(ArmReport {
        arm: arm.name().into(),
        train_mse: train_eval.mse,
        valid_mse: valid_eval.mse,
        train_loss: train_loss.total,
        valid_loss: valid_eval.total,
    })
}

/// National (log scale) and county (raw scale) forecasts, `K × horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdefsiForecast {
    pub national: Vec<f64>,
    pub counties: Array2<f64>,
}

/// Feeds each predicted national value back as the next input.
pub fn autoregressive_forecast(net: &TdefsiNet, y_history: &[f64], horizon: usize, stats: &NormStats) -> Result<TdefsiForecast> {
    if horizon == 0 {
        return Err(Error::Domain("horizon must be at least 1".into()));
    }
    let k = net.config.n_counties;
    if stats.min.len() != k {
        return Err(Error::dim("normalization stats", k, stats.min.len()));
    }
    let mut seq = y_history.to_vec();
    let mut national = Vec::with_capacity(horizon);
    let mut counties = Array2::zeros((k, horizon));
    for step in 0..horizon {
        let z = net.lonly_forward(&seq)?;
        national.push(z[0]);
        for c in 0..k {
            counties[[c, step]] = stats.denormalize(c, z[c + 1]);
        }
        seq.push(z[0]);
    }
    Ok(TdefsiForecast { national, counties })
}

/// Turns county incidence forecasts into cumulative predictions on top of
/// the last observed cumulative values.
pub fn cumulative_from_incidence(last: &[f64], incidence: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(incidence.dim());
    for c in 0..incidence.nrows() {
        let mut acc = last[c];
        for d in 0..incidence.ncols() {
            acc += incidence[[c, d]];
            out[[c, d]] = acc;
        }
    }
    out
}
