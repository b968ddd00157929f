//! Kernel-guided U-Net.
//!
//! Every encoder block, the bottleneck and every decoder block starts with
//! a guided modulation `r·(1+m(k)) + b(k)` of its input activations, where
//! `m(k)` and `b(k)` are produced from the flattened blur kernel by that
//! block's own guiding unit (three fully connected layers, ReLU between
//! them). The modulated activations then pass through `convs_per_block`
//! 3×3 ReLU convolutions.
//!
//! Decoder blocks receive the ×2 up-sampled coarser activations convolved
//! by a 5×5 layer, concatenated with the matching encoder activations
//! convolved by a 3×3 layer, and fused back to `channels` by a 1×1 layer.
//! A final 3×3 convolution produces RGB, optionally added to the input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{self, Bound, ParamSet};
use crate::tensor::{GuidanceMode, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthesisConfig {
    pub depth: usize,
    pub channels: usize,
    pub guide_hidden: usize,
    pub convs_per_block: usize,
    /// Side of the kernel grid the guiding units read.
    pub m: usize,
    pub guidance: GuidanceMode,
    /// Add the blurry input to the network output.
    pub residual: bool,
}

impl SynthesisConfig {
    /// 128 channels everywhere, 128 hidden units per guiding unit, m = 85.
    pub fn paper() -> Self {
        SynthesisConfig {
            depth: 4,
            channels: 128,
            guide_hidden: 128,
            convs_per_block: 3,
            m: 85,
            guidance: GuidanceMode::Both,
            residual: true,
        }
    }

    /// Desk-scale variant: widths divided by 8, m = 17.
    pub fn toy() -> Self {
        SynthesisConfig {
            channels: 16,
            guide_hidden: 16,
            m: 17,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.channels == 0 || self.guide_hidden == 0 || self.convs_per_block == 0 {
            return Err(Error::Config(
                "synthesis: depth, channels, guide_hidden and convs_per_block must be at least 1".into(),
            ));
        }
        if self.m.is_multiple_of(2) {
            return Err(Error::Config(format!("synthesis: kernel size m = {} must be odd", self.m)));
        }
        Ok(())
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Names of the modulated sites, in forward order.
    pub fn sites(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.depth).map(|i| format!("enc{i}")).collect();
        out.push("mid".into());
        out.extend((0..self.depth).rev().map(|i| format!("dec{i}")));
        out
    }
}

/// The fully connected map from a flattened kernel to per-channel
/// multipliers and biases. The m² kernel entries are multiplied by m before
/// the first layer, which puts a delta kernel at norm m.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidingUnit<T: Scalar = f32> {
    params: ParamSet<T>,
    channels: usize,
}

impl<T: Scalar> GuidingUnit<T> {
    /// Layers `m² → hidden → hidden → 2·channels`. With `zero_last` the
    /// final layer starts at zero so the unit initially emits `m = b = 0`.
    pub fn build(kernel_len: usize, hidden: usize, channels: usize, zero_last: bool, rng: &mut impl Rng) -> Result<Self> {
        let mut ps = ParamSet::new();
        add_guide(&mut ps, "", kernel_len, hidden, channels, zero_last, rng)?;
        Ok(GuidingUnit { params: ps, channels })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Record the unit on `tape` for an N×m² kernel batch.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, kernel: Var) -> Result<(Var, Var)> {
        guide_forward(tape, bound, "", self.channels, kernel)
    }

    /// Evaluate for an N×m² (or N×1×m×m) kernel batch, returning N×C multipliers and biases.
    pub fn evaluate(&self, kernel: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let n = kernel.shape()[0];
        let k = tape.constant(kernel.clone().reshape([n, kernel.len() / n.max(1)])?);
        let (m, b) = self.forward(&mut tape, &bound, k)?;
        Ok((tape.value(m).clone(), tape.value(b).clone()))
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn add_guide<T: Scalar>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    kernel_len: usize,
    hidden: usize,
    channels: usize,
    zero_last: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    params::linear_layer(ps, &join(prefix, "fc0"), kernel_len, hidden, rng)?;
    params::linear_layer(ps, &join(prefix, "fc1"), hidden, hidden, rng)?;
    if zero_last {
        ps.insert(join(prefix, "fc2.weight"), Tensor::zeros([2 * channels, hidden]))?;
        ps.insert(join(prefix, "fc2.bias"), Tensor::zeros([2 * channels]))
    } else {
        params::linear_layer(ps, &join(prefix, "fc2"), hidden, 2 * channels, rng)
    }
}

fn guide_forward<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, prefix: &str, channels: usize, kernel: Var) -> Result<(Var, Var)> {
    let len = tape.value(kernel).shape().get(1).copied().unwrap_or(1);
    let k = tape.scale(kernel, T::from_f64_lossy((len as f64).sqrt()));
    let h = params::linear(tape, bound, &join(prefix, "fc0"), k)?;
    let h = tape.relu(h);
    let h = params::linear(tape, bound, &join(prefix, "fc1"), h)?;
    let h = tape.relu(h);
    let out = params::linear(tape, bound, &join(prefix, "fc2"), h)?;
    let mult = tape.columns(out, 0, channels)?;
    let bias = tape.columns(out, channels, channels)?;
    Ok((mult, bias))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisNet<T: Scalar = f32> {
    config: SynthesisConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> SynthesisNet<T> {
    /// He-initialized convolutions, zero biases, and guiding units whose
    /// last layer is zero so every modulation starts as the identity.
    pub fn build(config: SynthesisConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let klen = config.m * config.m;
        let mut ps = ParamSet::new();
        params::conv_layer(&mut ps, "in", 3, c, 3, rng)?;
        for site in config.sites() {
            if config.guidance != GuidanceMode::None {
                add_guide(&mut ps, &format!("{site}.guide"), klen, config.guide_hidden, c, true, rng)?;
            }
            if site.starts_with("dec") {
                params::conv_layer(&mut ps, &format!("{site}.up"), c, c, 5, rng)?;
                params::conv_layer(&mut ps, &format!("{site}.skip"), c, c, 3, rng)?;
                params::conv_layer(&mut ps, &format!("{site}.fuse"), 2 * c, c, 1, rng)?;
            }
            for j in 0..config.convs_per_block {
                params::conv_layer(&mut ps, &format!("{site}.conv{j}"), c, c, 3, rng)?;
            }
        }
        params::conv_layer(&mut ps, "out", c, 3, 3, rng)?;
        // small output head: the residual path starts close to the identity
        for v in ps.get_mut("out.weight").expect("just inserted").data_mut() {
            *v *= T::from_f64_lossy(0.1);
        }
        Ok(SynthesisNet { config, params: ps })
    }

    pub fn from_params(config: SynthesisConfig, params: ParamSet<T>) -> Result<Self> {
        let mut net = Self::build(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        net.params.assign_from(&params)?;
        Ok(net)
    }

    pub fn config(&self) -> &SynthesisConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> SynthesisNet<U> {
        SynthesisNet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Number of guiding units (one per modulated site).
    pub fn guiding_unit_count(&self) -> usize {
        if self.config.guidance == GuidanceMode::None {
            0
        } else {
            self.config.sites().len()
        }
    }

    /// Same network with a different guidance mode; the guiding units are
    /// kept, so switching to `None` and back is lossless.
    pub fn with_guidance(&self, mode: GuidanceMode) -> Result<Self> {
        if self.config.guidance == GuidanceMode::None && mode != GuidanceMode::None {
            return Err(Error::Config("network was built without guiding units".into()));
        }
        let mut out = self.clone();
        out.config.guidance = mode;
        Ok(out)
    }

    fn block(&self, tape: &mut Tape<T>, bound: &Bound, site: &str, x: Var, kernel: Var) -> Result<Var> {
        let mut x = x;
        if self.config.guidance != GuidanceMode::None {
            let (m, b) = guide_forward(tape, bound, &format!("{site}.guide"), self.config.channels, kernel)?;
            x = tape.guided_modulation(x, m, b, self.config.guidance)?;
        }
        for j in 0..self.config.convs_per_block {
            x = params::conv_relu(tape, bound, &format!("{site}.conv{j}"), x)?;
        }
        Ok(x)
    }

    /// Record the forward pass: N×3×H×W blurry images and N×1×m×m kernels
    /// to N×3×H×W sharp estimates.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, blurry: Var, kernel: Var) -> Result<Var> {
        let cfg = &self.config;
        let [n, c, h, w] = tape.value(blurry).dims4("synthesize")?;
        if c != 3 {
            return Err(Error::shape("synthesize", format!("expected 3 channels, got {c}")));
        }
        let mult = cfg.size_multiple();
        if h % mult != 0 || w % mult != 0 {
            return Err(Error::shape(
                "synthesize",
                format!("{h}x{w} image is not divisible by {mult}"),
            ));
        }
        let klen = cfg.m * cfg.m;
        if tape.value(kernel).len() != n * klen {
            return Err(Error::shape(
                "synthesize",
                format!(
                    "kernel batch {:?} does not hold {n} kernels of {}x{}",
                    tape.value(kernel).shape(),
                    cfg.m,
                    cfg.m
                ),
            ));
        }
        let kflat = tape.reshape(kernel, [n, klen])?;

        let mut x = params::conv_relu(tape, bound, "in", blurry)?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            x = self.block(tape, bound, &format!("enc{i}"), x, kflat)?;
            skips.push(x);
            x = tape.maxpool2(x)?;
        }
        x = self.block(tape, bound, "mid", x, kflat)?;
        for i in (0..cfg.depth).rev() {
            let site = format!("dec{i}");
            let up = tape.upsample2(x)?;
            let up = params::conv_relu(tape, bound, &format!("{site}.up"), up)?;
            let skip = params::conv_relu(tape, bound, &format!("{site}.skip"), skips[i])?;
            let joined = tape.concat_channels(up, skip)?;
            let fused = params::conv(tape, bound, &format!("{site}.fuse"), joined)?;
            x = self.block(tape, bound, &site, fused, kflat)?;
        }
        let out = params::conv(tape, bound, "out", x)?;
        if cfg.residual {
            tape.add(out, blurry)
        } else {
            Ok(out)
        }
    }

    /// Inference on N×3×H×W images with N×1×m×m kernels.
    pub fn synthesize(&self, blurry: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let b = tape.constant(blurry.clone());
        let k = tape.constant(kernel.clone());
        let out = self.forward(&mut tape, &bound, b, k)?;
        Ok(tape.value(out).clone())
    }
}
