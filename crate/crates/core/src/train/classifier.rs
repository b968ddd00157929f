//! Kernel-size classifier: a single-scale analysis trunk followed by one
//! fully connected layer with three outputs.

use rand::Rng;

use crate::analysis::{correlation_features, AnalysisConfig};
use crate::error::{Error, Result};
use crate::params::{self, Bound, ParamSet};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierNet<T: Scalar = f32> {
    trunk: AnalysisConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> ClassifierNet<T> {
    /// Uses the first pyramid level of `analysis` (feature convolutions,
    /// reduction, correlation over radius m/2 and its 1×1 reduction).
    pub fn build(analysis: &AnalysisConfig, rng: &mut impl Rng) -> Result<Self> {
        let trunk = AnalysisConfig {
            levels: 1,
            ..analysis.clone()
        };
        trunk.validate()?;
        let (f, r) = (trunk.feat_channels, trunk.reduced_channels);
        let mut ps = ParamSet::new();
        for j in 0..trunk.convs_per_level {
            let inp = if j == 0 { 1 } else { f };
            params::conv_layer(&mut ps, &format!("level0.feat{j}"), inp, f, trunk.feat_kernel, rng)?;
        }
        params::conv_layer(&mut ps, "level0.reduce", f, r, 1, rng)?;
        params::conv_layer(&mut ps, "level0.corr_reduce", trunk.pair_count(), r, 1, rng)?;
        let e = trunk.radii()[0] * 2 + 1;
        params::linear_layer(&mut ps, "fc", r * e * e, CLASSES, rng)?;
        Ok(ClassifierNet { trunk, params: ps })
    }

    pub fn from_params(analysis: &AnalysisConfig, params: ParamSet<T>) -> Result<Self> {
        let mut net = Self::build(analysis, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        net.params.assign_from(&params)?;
        Ok(net)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn trunk_config(&self) -> &AnalysisConfig {
        &self.trunk
    }

    /// N×1×H×W normalized luminance to N×3 logits.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, y: Var) -> Result<Var> {
        let [n, c, h, w] = tape.value(y).dims4("classify")?;
        if c != 1 {
            return Err(Error::shape("classify", format!("expected 1 channel, got {c}")));
        }
        self.trunk.check_input(h, w)?;
        let corr = correlation_features(&self.trunk, tape, bound, y, 1)?[0];
        let len = tape.value(corr).len() / n;
        let flat = tape.reshape(corr, [n, len])?;
        params::linear(tape, bound, "fc", flat)
    }

    pub fn logits(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let y = tape.constant(y.clone());
        let out = self.forward(&mut tape, &bound, y)?;
        Ok(tape.value(out).clone())
    }
}

/// Index of the largest logit, ties going to the smaller class.
pub fn argmax_class<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Predicted size class for every sample of an N×1×H×W batch.
pub fn classify_kernel_size<T: Scalar>(net: &ClassifierNet<T>, y_norm: &Tensor<T>) -> Result<Vec<usize>> {
    let logits = net.logits(y_norm)?;
    Ok(logits.data().chunks(CLASSES).map(argmax_class).collect())
}
