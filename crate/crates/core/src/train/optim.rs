//! Adam and the reduce-on-plateau learning-rate schedule.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Moment buffers of the Adam optimizer, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: IndexMap<String, Vec<f32>>,
    second: IndexMap<String, Vec<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Parameters without a gradient are treated
    /// as having a zero gradient. Any non-finite gradient aborts the update
    /// before anything is modified.
    pub fn step(
        &mut self,
        params: &mut ParamSet<f32>,
        grads: &IndexMap<String, Tensor<f32>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter {name:?}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                let bad = g.data().iter().filter(|v| !v.is_finite()).count();
                return Err(Error::Training(format!(
                    "non-finite gradient for {name} at step {}: {bad} of {} entries (first at {pos}, value {})",
                    self.step + 1,
                    g.len(),
                    g.data()[pos]
                )));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).map(Tensor::data);
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i] as f64);
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauConfig {
    /// Epochs without sufficient improvement before a reduction.
    pub patience: usize,
    pub factor: f64,
    /// Minimum relative improvement of the best loss.
    pub threshold: f64,
    /// Minimum number of epochs between reductions.
    pub cooldown: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            patience: 5,
            factor: 0.8,
            threshold: 1e-3,
            cooldown: 5,
        }
    }
}

/// Epoch indices (into `history`) at which the schedule reduces the rate.
///
/// An epoch counts as stagnant unless its loss beats the best loss so far by
/// at least `threshold` relative. The first epoch sets the reference and
/// counts as stagnant, so `patience` flat epochs trigger a reduction.
/// A reduction fires once `patience` consecutive stagnant epochs have been
/// seen and at least `cooldown` epochs have passed since the last one.
pub fn plateau_reductions(history: &[f64], cfg: &PlateauConfig) -> Vec<usize> {
    let mut out = Vec::new();
    let Some(&first) = history.first() else {
        return out;
    };
    let mut best = first;
    let mut stagnant = 0usize;
    let mut since_reduction = usize::MAX;
    for (e, &loss) in history.iter().enumerate() {
        if loss < best * (1.0 - cfg.threshold) {
            best = loss;
            stagnant = 0;
        } else {
            stagnant += 1;
        }
        since_reduction = since_reduction.saturating_add(1);
        if stagnant >= cfg.patience && since_reduction >= cfg.cooldown {
            out.push(e);
            stagnant = 0;
            since_reduction = 0;
        }
    }
    out
}

/// The rate to use after the last epoch of `history`.
pub fn lr_schedule_update(history: &[f64], current_lr: f64, cfg: &PlateauConfig) -> f64 {
    match plateau_reductions(history, cfg).last() {
        Some(&e) if e + 1 == history.len() => current_lr * cfg.factor,
        _ => current_lr,
    }
}
