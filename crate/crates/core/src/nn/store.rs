use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
    pub m: Mat,
    pub v: Mat,
}

/// Named trainable arrays with gradient and NAdam moment slots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nadam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Nadam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Nadam {
    fn default() -> Self {
        Self::with_lr(0.001)
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Domain(format!("parameter `{name}` registered twice")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("initial value of `{name}`")));
        }
        let id = ParamId(self.entries.len());
        let (r, c) = value.shape();
        self.entries.push(ParamEntry {
            name: name.clone(),
            value,
            grad: Mat::zeros(r, c),
            m: Mat::zeros(r, c),
            v: Mat::zeros(r, c),
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].grad
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Mat) {
        self.entries[id.0].grad.add_assign(g);
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn n_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn set_all(&mut self, v: f64) {
        for e in &mut self.entries {
            e.value.data.iter_mut().for_each(|x| *x = v);
        }
    }

    /// Copies parameter values (not optimizer state) from another store
    /// with the same layout.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::dim("parameter count", self.entries.len(), other.entries.len()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!("layout mismatch at `{}`", a.name)));
            }
            a.value.data.copy_from_slice(&b.value.data);
        }
        Ok(())
    }

    /// One NAdam step on every entry, then gradients are zeroed.
    pub fn nadam_update(&mut self, opt: &Nadam) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| !e.grad.is_finite()) {
            let bad = e.grad.data.iter().filter(|g| !g.is_finite()).count();
            return Err(Error::NonFinite(format!("gradient of `{}` ({bad} entries); update refused", e.name)));
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (opt.beta1, opt.beta2);
        let m_corr = 1.0 - b1.powf(t + 1.0);
        let v_corr = 1.0 - b2.powf(t);
        for e in &mut self.entries {
            for k in 0..e.value.data.len() {
                let g = e.grad.data[k];
                let m = b1 * e.m.data[k] + (1.0 - b1) * g;
                let v = b2 * e.v.data[k] + (1.0 - b2) * g * g;
                e.m.data[k] = m;
                e.v.data[k] = v;
                let m_hat = (b1 * m + (1.0 - b1) * g) / m_corr;
                let v_hat = v / v_corr;
                e.value.data[k] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
                e.grad.data[k] = 0.0;
            }
        }
        Ok(())
    }

    /// l1·Σ|θ| + l2·Σθ² over entries whose name passes `filter`; the
    /// gradient of the penalty is added to those entries in place.
    pub fn regularization_penalty(&mut self, l1: f64, l2: f64, filter: impl Fn(&str) -> bool) -> f64 {
        let mut penalty = 0.0;
        if l1 == 0.0 && l2 == 0.0 {
            return penalty;
        }
        for e in self.entries.iter_mut().filter(|e| filter(&e.name)) {
            for (theta, g) in e.value.data.iter().zip(e.grad.data.iter_mut()) {
                penalty += l1 * theta.abs() + l2 * theta * theta;
                let sign = if *theta > 0.0 {
                    1.0
                } else if *theta < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *g += l1 * sign + 2.0 * l2 * theta;
            }
        }
        penalty
    }

    /// Penalty value only, no gradient side effect.
    pub fn penalty_value(&self, l1: f64, l2: f64, filter: impl Fn(&str) -> bool) -> f64 {
        self.entries
            .iter()
            .filter(|e| filter(&e.name))
            .flat_map(|e| e.value.data.iter())
            .map(|t| l1 * t.abs() + l2 * t * t)
            .sum()
    }
}

/// Uniform on ±√(6/(fan_in+fan_out)) for a `rows × cols` weight with
/// fan_out = rows and fan_in = cols.
pub fn glorot_init(rows: usize, cols: usize, seed: u64) -> Result<Mat> {
    if rows == 0 || cols == 0 {
        return Err(Error::Domain(format!("glorot init needs positive dimensions, got {rows}x{cols}")));
    }
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = rng_from_seed(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Mat::from_vec(rows, cols, data)
}
