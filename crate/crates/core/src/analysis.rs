//! Kernel-estimation network.
//!
//! Three stages:
//! 1. a feature pyramid: at every level `convs_per_level` ReLU convolutions
//!    (the first level reads the luminance image, later levels read the
//!    ×2 max-pooled features of the level above), followed by a 1×1
//!    reduction to `reduced_channels` maps;
//! 2. per level, the pairwise cross-correlation of the reduced maps over a
//!    radius of `floor(2^-l·m/2)`, reduced again by a 1×1 ReLU convolution;
//! 3. coarse-to-fine integration: starting from the coarsest correlation
//!    map, repeatedly up-sample ×2, align onto the next finer (2r+1)² grid,
//!    concatenate with that level's correlation features and convolve.
//!
//! A small convolutional head maps the finest m×m grid to one channel,
//! which is clamped and normalized into an admissible kernel.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{self, Bound, ParamSet};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::xcorr::{level_radius, pair_count, CorrelationSpec, PairMode};

/// Mass floor below which the head falls back to a delta kernel.
pub const KERNEL_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnalysisConfig {
    pub levels: usize,
    pub feat_channels: usize,
    pub reduced_channels: usize,
    pub feat_kernel: usize,
    pub convs_per_level: usize,
    pub integrate_kernel: usize,
    pub head_channels: Vec<usize>,
    pub head_kernel: usize,
    /// Side of the estimated kernel grid (odd).
    pub m: usize,
    pub pair_mode: PairMode,
}

impl AnalysisConfig {
    /// Full-size architecture: 3 levels, 64 → 32 channels, 7×7 features, m = 85.
    pub fn paper() -> Self {
        AnalysisConfig {
            levels: 3,
            feat_channels: 64,
            reduced_channels: 32,
            feat_kernel: 7,
            convs_per_level: 3,
            integrate_kernel: 5,
            head_channels: vec![24, 16, 8, 1],
            head_kernel: 3,
            m: 85,
            pair_mode: PairMode::Unordered,
        }
    }

    /// Desk-scale variant: channel widths divided by 8, m = 17.
    pub fn toy() -> Self {
        AnalysisConfig {
            feat_channels: 8,
            reduced_channels: 4,
            m: 17,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("analysis: {msg}")));
        if self.m.is_multiple_of(2) || self.m == 0 {
            return fail(format!("kernel size m = {} must be odd", self.m));
        }
        if self.levels == 0 {
            return fail("levels must be at least 1".into());
        }
        if self.feat_channels == 0 || self.reduced_channels == 0 || self.convs_per_level == 0 {
            return fail("channel and layer counts must be at least 1".into());
        }
        for (name, k) in [
            ("feat_kernel", self.feat_kernel),
            ("integrate_kernel", self.integrate_kernel),
            ("head_kernel", self.head_kernel),
        ] {
            if k % 2 == 0 {
                return fail(format!("{name} = {k} must be odd"));
            }
        }
        match self.head_channels.last() {
            Some(1) if self.head_channels.iter().all(|&c| c > 0) => Ok(()),
            _ => fail(format!(
                "head channels {:?} must be positive and end in 1",
                self.head_channels
            )),
        }
    }

    /// Correlation radius at every level, finest first.
    pub fn radii(&self) -> Vec<usize> {
        (0..self.levels).map(|l| level_radius(self.m, l)).collect()
    }

    pub fn pair_count(&self) -> usize {
        pair_count(self.reduced_channels, self.pair_mode)
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Check that an H×W luminance input is admissible and return the
    /// kernel grid shape the network will emit.
    pub fn check_input(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let mult = self.size_multiple();
        if !h.is_multiple_of(mult) || !w.is_multiple_of(mult) {
            return Err(Error::shape(
                "estimate_kernel",
                format!("{h}x{w} input is not divisible by {mult}"),
            ));
        }
        for (l, r) in self.radii().into_iter().enumerate() {
            let (hl, wl) = (h >> l, w >> l);
            if r >= hl.min(wl) {
                return Err(Error::shape(
                    "estimate_kernel",
                    format!("level {l} is {hl}x{wl}, too small for correlation radius {r}"),
                ));
            }
        }
        Ok((self.m, self.m))
    }

    /// Number of scalar parameters, by shape arithmetic.
    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let (f, r, p) = (self.feat_channels, self.reduced_channels, self.pair_count());
        let mut total = 0;
        for l in 0..self.levels {
            for j in 0..self.convs_per_level {
                let inp = if l == 0 && j == 0 { 1 } else { f };
                total += conv(inp, f, self.feat_kernel);
            }
            total += conv(f, r, 1) + conv(p, r, 1);
            let inp = if l + 1 == self.levels { r } else { 2 * r };
            total += conv(inp, r, self.integrate_kernel);
        }
        let mut inp = r;
        for &c in &self.head_channels {
            total += conv(inp, c, self.head_kernel);
            inp = c;
        }
        total
    }
}

/// Output of [`AnalysisNet::forward`].
#[derive(Clone, Copy, Debug)]
pub struct KernelEstimate {
    /// N×1×m×m admissible kernels.
    pub kernel: Var,
    /// Head output before clamping and normalization.
    pub raw: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisNet<T: Scalar = f32> {
    config: AnalysisConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> AnalysisNet<T> {
    /// Build with He-initialized weights and zero biases.
    pub fn build(config: AnalysisConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (f, r, p) = (config.feat_channels, config.reduced_channels, config.pair_count());
        let mut ps = ParamSet::new();
        for l in 0..config.levels {
            for j in 0..config.convs_per_level {
                let inp = if l == 0 && j == 0 { 1 } else { f };
                params::conv_layer(&mut ps, &format!("level{l}.feat{j}"), inp, f, config.feat_kernel, rng)?;
            }
            params::conv_layer(&mut ps, &format!("level{l}.reduce"), f, r, 1, rng)?;
            params::conv_layer(&mut ps, &format!("level{l}.corr_reduce"), p, r, 1, rng)?;
            let inp = if l + 1 == config.levels { r } else { 2 * r };
            params::conv_layer(&mut ps, &format!("level{l}.integrate"), inp, r, config.integrate_kernel, rng)?;
        }
        let mut inp = r;
        for (j, &c) in config.head_channels.iter().enumerate() {
            params::conv_layer(&mut ps, &format!("head{j}"), inp, c, config.head_kernel, rng)?;
            inp = c;
        }
        Ok(AnalysisNet { config, params: ps })
    }

    pub fn from_params(config: AnalysisConfig, params: ParamSet<T>) -> Result<Self> {
        let mut net = Self::build(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        net.params.assign_from(&params)?;
        Ok(net)
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> AnalysisNet<U> {
        AnalysisNet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Record the forward pass for an N×1×H×W normalized luminance batch.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, y: Var) -> Result<KernelEstimate> {
        let cfg = &self.config;
        let [_, c, h, w] = tape.value(y).dims4("estimate_kernel")?;
        if c != 1 {
            return Err(Error::shape("estimate_kernel", format!("expected 1 channel, got {c}")));
        }
        cfg.check_input(h, w)?;
        let corr = correlation_features(cfg, tape, bound, y, cfg.levels)?;
        let radii = cfg.radii();
        let coarsest = cfg.levels - 1;
        let mut x = params::conv_relu(tape, bound, &format!("level{coarsest}.integrate"), corr[coarsest])?;
        for l in (0..coarsest).rev() {
            let up = tape.upsample2(x)?;
            // coarse cell c covers shifts ≈ 2(c − r_{l+1}); fine cell f is shift + r_l
            let offset = (radii[l] - 2 * radii[l + 1]) as isize;
            let e = 2 * radii[l] + 1;
            let aligned = tape.fit_window(up, e, e, (offset, offset))?;
            let joined = tape.concat_channels(aligned, corr[l])?;
            x = params::conv_relu(tape, bound, &format!("level{l}.integrate"), joined)?;
        }
        let last = cfg.head_channels.len() - 1;
        for j in 0..=last {
            x = if j == last {
                params::conv(tape, bound, &format!("head{j}"), x)?
            } else {
                params::conv_relu(tape, bound, &format!("head{j}"), x)?
            };
        }
        let kernel = tape.normalize_kernel(x, T::from_f64_lossy(KERNEL_EPS))?;
        Ok(KernelEstimate { kernel, raw: x })
    }

    /// Inference: N×1×H×W luminance to N×1×m×m kernels.
    pub fn estimate_kernel(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let y = tape.constant(y.clone());
        let est = self.forward(&mut tape, &bound, y)?;
        Ok(tape.value(est.kernel).clone())
    }
}

/// Per-level correlation features after the 1×1 reduction, finest first.
pub(crate) fn correlation_features<T: Scalar>(
    cfg: &AnalysisConfig,
    tape: &mut Tape<T>,
    bound: &Bound,
    y: Var,
    levels: usize,
) -> Result<Vec<Var>> {
    let mut feats = y;
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        if l > 0 {
            feats = tape.maxpool2(feats)?;
        }
        for j in 0..cfg.convs_per_level {
            feats = params::conv_relu(tape, bound, &format!("level{l}.feat{j}"), feats)?;
        }
        let reduced = params::conv(tape, bound, &format!("level{l}.reduce"), feats)?;
        let spec = CorrelationSpec::new(level_radius(cfg.m, l), cfg.reduced_channels, cfg.pair_mode);
        let corr = tape.cross_correlate(reduced, spec)?;
        out.push(params::conv_relu(tape, bound, &format!("level{l}.corr_reduce"), corr)?);
    }
    Ok(out)
}

/// Clamp negatives and normalize each sample of an N×1×m×m map to unit sum.
///
/// Samples whose positive mass is below [`KERNEL_EPS`] are replaced by the
/// centered delta; the returned flags mark them.
pub fn normalize_kernel_head<T: Scalar>(raw: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
    let mut tape = Tape::new();
    let x = tape.constant(raw.clone());
    let k = tape.normalize_kernel(x, T::from_f64_lossy(KERNEL_EPS))?;
    let flags = tape.kernel_degenerate_flags(k).unwrap_or_default().to_vec();
    Ok((tape.value(k).clone(), flags))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny() -> AnalysisConfig {
        AnalysisConfig {
            levels: 2,
            feat_channels: 3,
            reduced_channels: 2,
            feat_kernel: 3,
            convs_per_level: 1,
            integrate_kernel: 3,
            head_channels: vec![3, 1],
            head_kernel: 3,
            m: 7,
            pair_mode: PairMode::Unordered,
        }
    }

    #[test]
    fn head_normalization_examples() {
        let (k, flags) = normalize_kernel_head(&Tensor::<f64>::full([1, 1, 3, 3], 3.0)).unwrap();
        assert!(k.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
        assert_eq!(flags, [false]);

        let (k, _) = normalize_kernel_head(&Tensor::<f64>::new([1, 3], vec![-1.0, 2.0, 2.0]).unwrap()).unwrap();
        assert_eq!(k.data(), &[0.0, 0.5, 0.5]);

        let (k, flags) = normalize_kernel_head(&Tensor::<f32>::full([1, 1, 3, 3], -1.0)).unwrap();
        assert_eq!(flags, [true]);
        assert_eq!(k.data()[4], 1.0);
        assert_eq!(k.sum(), 1.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny();
        c.m = 8;
        assert!(matches!(AnalysisNet::<f32>::build(c, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
        let mut c = tiny();
        c.levels = 0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.head_channels = vec![4, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn indivisible_input_rejected() {
        let net = AnalysisNet::<f32>::build(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let y = Tensor::zeros([1, 1, 15, 16]);
        assert!(matches!(net.estimate_kernel(&y), Err(Error::Shape { .. })));
    }

    #[test]
    fn parameter_count_matches_built_net() {
        for cfg in [tiny(), AnalysisConfig::toy(), AnalysisConfig::paper()] {
            let net = AnalysisNet::<f32>::build(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(net.params().element_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn output_is_admissible() {
        let net = AnalysisNet::<f32>::build(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = Tensor::from_fn([2, 1, 16, 16], |_| rng.gen_range(-1.0..1.0));
        let k = net.estimate_kernel(&y).unwrap();
        assert_eq!(k.shape(), &[2, 1, 7, 7]);
        for i in 0..2 {
            let s = k.item(i);
            assert!((s.sum() - 1.0).abs() < 1e-5);
            assert!(s.data().iter().all(|&v| v >= 0.0));
        }
    }
}
