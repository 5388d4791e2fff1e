//! Hierarchical recurrent county forecaster.
//!
//! An LSTM backbone (encode, remember and a repeated forecast cell) turns the
//! national case total and elapsed time into a low-dimensional time pattern.
//! A time-distributed linear layer expands each forecast step to one value
//! per county; variant II then runs a small per-county dense head over that
//! value and the static county features to produce daily increases.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    dense_forward, lstm_cell_forward, regularized, Activation, Checkpoint, DenseParams, LstmCellParams, Mat, Nadam,
    ParameterStore, Tape, Var,
};
use crate::rng::{derive_seed, rng_from_seed};

pub const MODEL_TAG: &str = "cleirnet-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// The time-distributed output is the daily increase.
    I,
    /// A county-distributed dense head maps (time feature, county features)
    /// to the daily increase.
    II,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleirConfig {
    pub n_c: usize,
    pub n_tf: usize,
    pub n_d: usize,
    pub n_x: usize,
    pub n_f: usize,
    pub variant: Variant,
    pub target_dropout: f64,
    pub l1: f64,
    pub l2: f64,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Carry encode/remember states between consecutive batches.
    pub carry_state: bool,
}

impl Default for CleirConfig {
    fn default() -> Self {
        Self {
            n_c: 1,
            n_tf: 2,
            n_d: 24,
            n_x: 6,
            n_f: 14,
            variant: Variant::II,
            target_dropout: 0.25,
            l1: 5e-5,
            l2: 5e-5,
            lr: 0.001,
            patience: 30,
            max_epochs: 300,
            carry_state: true,
        }
    }
}

impl CleirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 || self.n_tf == 0 || self.n_d == 0 || self.n_f == 0 {
            return Err(Error::Domain("n_c, n_tf, n_d and n_f must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.target_dropout) {
            return Err(Error::Domain(format!("target dropout must lie in [0, 1), got {}", self.target_dropout)));
        }
        if !(self.l1 >= 0.0 && self.l2 >= 0.0 && self.lr > 0.0) {
            return Err(Error::Domain("penalties must be non-negative and lr positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Closed-form trainable parameter count.
pub fn count_parameters(config: &CleirConfig) -> usize {
    let tf = config.n_tf;
    let lstm = |input: usize| 4 * (input + tf + 1) * tf;
    let backbone = lstm(2) + 2 * lstm(tf);
    let td = (tf + 1) * config.n_c;
    let cd = match config.variant {
        Variant::I => 0,
        Variant::II => (config.n_x + 2) * config.n_d + (config.n_d + 1) * config.n_d + (config.n_d + 1),
    };
    backbone + td + cd
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneState {
    pub h0: Vec<f64>,
    pub c0: Vec<f64>,
    pub h1: Vec<f64>,
    pub c1: Vec<f64>,
}

impl BackboneState {
    pub fn zeros(n_tf: usize) -> Self {
        Self {
            h0: vec![0.0; n_tf],
            c0: vec![0.0; n_tf],
            h1: vec![0.0; n_tf],
            c1: vec![0.0; n_tf],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleirNet {
    pub config: CleirConfig,
    pub store: ParameterStore,
    encode: LstmCellParams,
    remember: LstmCellParams,
    forecast: LstmCellParams,
    td: DenseParams,
    cd: Option<[DenseParams; 3]>,
}

/// Tape nodes of one forward pass.
pub struct HorizonVars {
    /// `n_c × n_f` cumulative predictions.
    pub predictions: Var,
    /// `n_c × n_f` daily increases.
    pub deltas: Var,
    pub state: BackboneState,
}

impl CleirNet {
    pub fn new(config: CleirConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let tf = config.n_tf;
        let encode = LstmCellParams::register(&mut store, "lstm_encode", 2, tf, seed)?;
        let remember = LstmCellParams::register(&mut store, "lstm_remember", tf, tf, seed)?;
        let forecast = LstmCellParams::register(&mut store, "lstm_forecast", tf, tf, seed)?;
        let td = DenseParams::register(&mut store, "time_distributed", tf, config.n_c, seed)?;
        let cd = match config.variant {
            Variant::I => None,
            Variant::II => Some([
                DenseParams::register(&mut store, "county_dense1", config.n_x + 1, config.n_d, seed)?,
                DenseParams::register(&mut store, "county_dense2", config.n_d, config.n_d, seed)?,
                DenseParams::register(&mut store, "county_out", config.n_d, 1, seed)?,
            ]),
        };
        Ok(Self {
            config,
            store,
            encode,
            remember,
            forecast,
            td,
            cd,
        })
    }

    /// Builds one horizon on `tape`: encode the national signal, update the
    /// remember cell, then iterate the forecast cell `n_f` times.
    pub fn forward_horizon(
        &self,
        tape: &mut Tape,
        current: &[f64],
        t: f64,
        state: &BackboneState,
        features: &Mat,
    ) -> Result<HorizonVars> {
        let cfg = &self.config;
        if current.len() != cfg.n_c {
            return Err(Error::dim("county case vector", cfg.n_c, current.len()));
        }
        if features.shape() != (cfg.n_c, cfg.n_x) {
            return Err(Error::dim(
                "county features",
                format!("({}, {})", cfg.n_c, cfg.n_x),
                format!("{:?}", features.shape()),
            ));
        }
        if state.h0.len() != cfg.n_tf || state.c0.len() != cfg.n_tf || state.h1.len() != cfg.n_tf || state.c1.len() != cfg.n_tf {
            return Err(Error::dim("backbone state", cfg.n_tf, state.h0.len()));
        }
        let total: f64 = current.iter().sum();
        let enc_in = tape.constant(Mat::row_vector(vec![total.max(0.0).ln_1p(), t / 365.0]));
        let h0 = tape.constant(Mat::row_vector(state.h0.clone()));
        let c0 = tape.constant(Mat::row_vector(state.c0.clone()));
        let h1 = tape.constant(Mat::row_vector(state.h1.clone()));
        let c1 = tape.constant(Mat::row_vector(state.c1.clone()));
        let store = &self.store;
        let (h_enc, c_enc) = lstm_cell_forward(tape, store, enc_in, h0, c0, &self.encode)?;
        check_finite(tape, h_enc, "encode cell")?;
        let (h_rem, c_rem) = lstm_cell_forward(tape, store, h_enc, h1, c1, &self.remember)?;
        check_finite(tape, h_rem, "remember cell")?;
        let new_state = BackboneState {
            h0: tape.value(h_enc).data.clone(),
            c0: tape.value(c_enc).data.clone(),
            h1: tape.value(h_rem).data.clone(),
            c1: tape.value(c_rem).data.clone(),
        };

        let x_const = (cfg.n_x > 0).then(|| tape.constant(features.clone()));
        let mut prev = tape.constant(Mat::from_vec(cfg.n_c, 1, current.to_vec())?);
        let (mut h, mut c) = (h_rem, c_rem);
        let mut preds = Vec::with_capacity(cfg.n_f);
        let mut deltas = Vec::with_capacity(cfg.n_f);
        for step in 0..cfg.n_f {
            let (hn, cn) = lstm_cell_forward(tape, store, h, h, c, &self.forecast)?;
            check_finite(tape, hn, "forecast cell")?;
            h = hn;
            c = cn;
            let hc = dense_forward(tape, store, h, &self.td, Activation::Linear)?;
            let column = tape.transpose(hc);
            let delta = match &self.cd {
                None => column,
                Some([d1, d2, out]) => {
                    let z = match x_const {
                        Some(x) => tape.concat_cols(&[column, x])?,
                        None => column,
                    };
                    let a1 = dense_forward(tape, store, z, d1, Activation::Relu)?;
                    let a2 = dense_forward(tape, store, a1, d2, Activation::Relu)?;
                    dense_forward(tape, store, a2, out, Activation::Linear)?
                }
            };
            if !tape.value(delta).is_finite() {
                return Err(Error::NonFinite(format!("county output at forecast step {}", step + 1)));
            }
            let pred = tape.add(prev, delta)?;
            preds.push(pred);
            deltas.push(delta);
            prev = pred;
        }
        Ok(HorizonVars {
            predictions: tape.concat_cols(&preds)?,
            deltas: tape.concat_cols(&deltas)?,
            state: new_state,
        })
    }

    /// Forward pass without gradient bookkeeping beyond the throwaway tape.
    pub fn predict(&self, current: &[f64], t: f64, state: &BackboneState, features: &Mat) -> Result<(Array2<f64>, BackboneState)> {
        let mut tape = Tape::new();
        let out = self.forward_horizon(&mut tape, current, t, state, features)?;
        Ok((tape.value(out.predictions).to_array(), out.state))
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "config_hash": self.config.hash(),
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
        });
        Checkpoint::from_store(MODEL_TAG, meta, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.tag != MODEL_TAG {
            return Err(Error::Checkpoint(format!("expected model tag {MODEL_TAG}, found {}", ck.tag)));
        }
        let config: CleirConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut net = Self::new(config, 0)?;
        ck.restore_into(&mut net.store)?;
        Ok(net)
    }
}

fn check_finite(tape: &Tape, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{layer} activation")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
}

/// County forecast made from one base day.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastFrame {
    pub base_day: usize,
    /// Observed cumulative cases on the base day.
    pub base: Vec<f64>,
    /// `n_c × n_f` cumulative predictions.
    pub predictions: Array2<f64>,
    /// `n_c × n_f`; column 0 is relative to `base`, later columns to the
    /// previous prediction.
    pub deltas: Array2<f64>,
    pub meta: FrameMeta,
}

impl ForecastFrame {
    /// Derives deltas as differences of the predictions.
    pub fn new(base_day: usize, base: Vec<f64>, predictions: Array2<f64>, meta: FrameMeta) -> Result<Self> {
        if predictions.nrows() != base.len() {
            return Err(Error::dim("forecast rows", base.len(), predictions.nrows()));
        }
        let mut deltas = Array2::zeros(predictions.dim());
        for i in 0..predictions.nrows() {
            let mut prev = base[i];
            for d in 0..predictions.ncols() {
                deltas[[i, d]] = predictions[[i, d]] - prev;
                prev = predictions[[i, d]];
            }
        }
        Ok(Self {
            base_day,
            base,
            predictions,
            deltas,
            meta,
        })
    }

    pub fn n_counties(&self) -> usize {
        self.predictions.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.predictions.ncols()
    }
}

/// w = 1 / (ln(p + 1) · ln(i + 1)) for 1-based horizon day `day`.
pub fn loss_weight(population: f64, day: f64) -> f64 {
    1.0 / ((population + 1.0).ln() * (day + 1.0).ln())
}

/// `n_c × n_f` weights for horizon days 1..=n_f.
pub fn loss_weights(populations: &[f64], n_f: usize) -> Array2<f64> {
    Array2::from_shape_fn((populations.len(), n_f), |(j, i)| loss_weight(populations[j], (i + 1) as f64))
}

/// Masked weighted mean squared error Σ m·w·e² / Σ m. `None` when every
/// term is masked.
pub fn weighted_mse_loss(
    predictions: &Array2<f64>,
    targets: &Array2<f64>,
    populations: &[f64],
    mask: &Array2<f64>,
) -> Result<Option<f64>> {
    let w = loss_weights(populations, predictions.ncols());
    weighted_mse_with_weights(predictions, targets, &w, mask)
}

pub fn weighted_mse_with_weights(
    predictions: &Array2<f64>,
    targets: &Array2<f64>,
    weights: &Array2<f64>,
    mask: &Array2<f64>,
) -> Result<Option<f64>> {
    let dim = predictions.dim();
    for (name, other) in [("targets", targets), ("weights", weights), ("mask", mask)] {
        if other.dim() != dim {
            return Err(Error::dim(name, format!("{dim:?}"), format!("{:?}", other.dim())));
        }
    }
    let denom: f64 = mask.sum();
    if denom == 0.0 {
        return Ok(None);
    }
    let mut num = 0.0;
    for ((p, t), (w, m)) in predictions.iter().zip(targets).zip(weights.iter().zip(mask)) {
        num += m * w * (p - t).powi(2);
    }
    Ok(Some(num / denom))
}

fn weighted_mse_on_tape(tape: &mut Tape, predictions: Var, targets: &Mat, weighted_mask: &Mat, denom: f64) -> Result<Var> {
    let t = tape.constant(targets.clone());
    let wm = tape.constant(weighted_mask.clone());
    let e = tape.sub(predictions, t)?;
    let e2 = tape.mul(e, e)?;
    let we = tape.mul(e2, wm)?;
    let s = tape.sum(we);
    Ok(tape.scale(s, 1.0 / denom))
}

/// Independent Bernoulli keep mask: each entry is 0 with probability `rate`.
pub fn target_dropout_mask(n_c: usize, n_f: usize, rate: f64, seed: u64) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(Array2::ones((n_c, n_f)));
    }
    let mut rng = rng_from_seed(seed);
    Ok(Array2::from_shape_fn((n_c, n_f), |_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 }))
}

/// Days since the first day with a positive national total; zero before it.
pub fn elapsed_days(cumulative: &Array2<f64>) -> Vec<f64> {
    let days = cumulative.ncols();
    let first = (0..days).find(|&d| cumulative.column(d).sum() > 0.0).unwrap_or(0);
    (0..days).map(|d| d.saturating_sub(first) as f64).collect()
}

/// Observed training inputs: cumulative cases and static features.
#[derive(Debug, Clone)]
pub struct CleirData<'a> {
    /// `n_c × days` cumulative cases.
    pub cumulative: &'a Array2<f64>,
    pub populations: &'a [f64],
    /// `n_c × n_x` standardized county features.
    pub features: &'a Mat,
    /// Counties excluded from the training loss (false = excluded).
    pub county_mask: Option<&'a [bool]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedCleir {
    pub net: CleirNet,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub seed: u64,
}

fn column_mat(a: &Array2<f64>, d: usize) -> Vec<f64> {
    a.column(d).to_vec()
}

fn targets_mat(cumulative: &Array2<f64>, base: usize, n_f: usize) -> Mat {
    let n = cumulative.nrows();
    let mut m = Mat::zeros(n, n_f);
    for j in 0..n {
        for i in 0..n_f {
            m.set(j, i, cumulative[[j, base + 1 + i]]);
        }
    }
    m
}

/// Replays days `0..=last` from a zero state and returns the state after
/// `last` together with its predictions.
fn replay(net: &CleirNet, data: &CleirData, t: &[f64], last: usize) -> Result<(Array2<f64>, BackboneState)> {
    let mut state = BackboneState::zeros(net.config.n_tf);
    let mut preds = None;
    for d in 0..=last {
        let (p, s) = net.predict(&column_mat(data.cumulative, d), t[d], &state, data.features)?;
        preds = Some(p);
        state = s;
    }
    Ok((preds.expect("at least one day"), state))
}

fn validation_loss(net: &CleirNet, data: &CleirData, t: &[f64], base: usize, weights: &Array2<f64>, mask: &Array2<f64>) -> Result<f64> {
    let (preds, _) = replay(net, data, t, base)?;
    let targets = targets_mat(data.cumulative, base, net.config.n_f).to_array();
    Ok(weighted_mse_with_weights(&preds, &targets, weights, mask)?.unwrap_or(0.0))
}

fn county_mask_matrix(mask: Option<&[bool]>, n_c: usize, n_f: usize) -> Result<Array2<f64>> {
    match mask {
        None => Ok(Array2::ones((n_c, n_f))),
        Some(m) if m.len() == n_c => Ok(Array2::from_shape_fn((n_c, n_f), |(j, _)| if m[j] { 1.0 } else { 0.0 })),
        Some(m) => Err(Error::dim("county mask", n_c, m.len())),
    }
}

/// Stateful sequential training with early stopping.
///
/// Base days `0..=L-n_f-1` are training batches (batch size one, in day
/// order); the validation batch forecasts the last `n_f` observed days from
/// a fresh replay. States are carried between batches and detached.
pub fn train_cleirnet(data: &CleirData, config: &CleirConfig, seed: u64) -> Result<TrainedCleir> {
    train_cleirnet_with(data, config, seed, |_| {})
}

pub fn train_cleirnet_with(
    data: &CleirData,
    config: &CleirConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedCleir> {
    config.validate()?;
    let (n_c, days) = data.cumulative.dim();
    if n_c != config.n_c {
        return Err(Error::dim("counties in series", config.n_c, n_c));
    }
    if data.populations.len() != n_c {
        return Err(Error::dim("population vector", n_c, data.populations.len()));
    }
    if days < config.n_f + 2 {
        return Err(Error::Domain(format!("series of {days} days is shorter than n_f + 2 = {}", config.n_f + 2)));
    }
    let mut net = CleirNet::new(config.clone(), derive_seed(seed, "init"))?;
    let t = elapsed_days(data.cumulative);
    let last = days - 1;
    let valid_base = last - config.n_f;
    let weights = loss_weights(data.populations, config.n_f);
    let county_mask = county_mask_matrix(data.county_mask, n_c, config.n_f)?;
    let opt = Nadam::with_lr(config.lr);

    let mut best = (f64::INFINITY, 0usize, net.store.clone());
    let mut log = Vec::new();
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        let mut state = BackboneState::zeros(config.n_tf);
        let mut total = 0.0;
        let mut batches = 0usize;
        for base in 0..valid_base {
            let drop = target_dropout_mask(n_c, config.n_f, config.target_dropout, derive_seed(seed, &format!("dropout/{epoch}/{base}")))?;
            let mask = &drop * &county_mask;
            let denom = mask.sum();
            let mut tape = Tape::new();
            let out = net.forward_horizon(&mut tape, &column_mat(data.cumulative, base), t[base], &state, data.features)?;
            state = if config.carry_state { out.state } else { BackboneState::zeros(config.n_tf) };
            if denom == 0.0 {
                continue;
            }
            let wm = Mat::from_array(&(&mask * &weights));
            let targets = targets_mat(data.cumulative, base, config.n_f);
            let loss = weighted_mse_on_tape(&mut tape, out.predictions, &targets, &wm, denom)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: base });
            }
            tape.backward(loss, &mut net.store)?;
            net.store.regularization_penalty(config.l1, config.l2, regularized);
            net.store.nadam_update(&opt).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, batch: base },
                other => other,
            })?;
            total += value;
            batches += 1;
        }
        let valid_loss = validation_loss(&net, data, &t, valid_base, &weights, &county_mask)?;
        if !valid_loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: valid_base });
        }
        let entry = EpochLog {
            epoch,
            train_loss: if batches > 0 { total / batches as f64 } else { 0.0 },
            valid_loss,
        };
        on_epoch(&entry);
        log.push(entry);
        if valid_loss < best.0 {
            best = (valid_loss, epoch, net.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    net.store.copy_values_from(&best.2)?;
    Ok(TrainedCleir {
        net,
        log,
        best_epoch: best.1,
        best_valid: best.0,
        seed,
    })
}

/// Replays every observed day from a zero state and returns the forecast
/// made on the final day.
pub fn forecast_cleirnet(net: &CleirNet, cumulative: &Array2<f64>, features: &Mat, seed: u64) -> Result<ForecastFrame> {
    let days = cumulative.ncols();
    if days == 0 {
        return Err(Error::Domain("forecast needs at least one observed day".into()));
    }
    let pops = vec![1.0; cumulative.nrows()];
    let data = CleirData {
        cumulative,
        populations: &pops,
        features,
        county_mask: None,
    };
    let t = elapsed_days(cumulative);
    let (preds, _) = replay(net, &data, &t, days - 1)?;
    ForecastFrame::new(
        days - 1,
        column_mat(cumulative, days - 1),
        preds,
        FrameMeta {
            model: MODEL_TAG.into(),
            seed,
            config_hash: net.config.hash(),
        },
    )
}

/// Element-wise mean of the predictions; deltas recomputed.
pub fn ensemble_forecasts(frames: &[ForecastFrame]) -> Result<ForecastFrame> {
    let first = frames.first().ok_or_else(|| Error::Domain("ensemble needs at least one frame".into()))?;
    for f in frames {
        if f.predictions.dim() != first.predictions.dim() || f.base_day != first.base_day {
            return Err(Error::dim(
                "ensemble member",
                format!("{:?} at day {}", first.predictions.dim(), first.base_day),
                format!("{:?} at day {}", f.predictions.dim(), f.base_day),
            ));
        }
    }
    let mut sum = Array2::zeros(first.predictions.dim());
    for f in frames {
        sum += &f.predictions;
    }
    let mean = sum / frames.len() as f64;
    let mut hasher = Sha256::new();
    for f in frames {
        hasher.update(f.meta.config_hash.as_bytes());
    }
    let hash: String = hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
    ForecastFrame::new(
        first.base_day,
        first.base.clone(),
        mean,
        FrameMeta {
            model: format!("ensemble-of-{}", frames.len()),
            seed: first.meta.seed,
            config_hash: hash,
        },
    )
}
