//! Inference: blurry RGB image in, kernel estimate and sharp image out.

use crate::analysis::AnalysisNet;
use crate::data::{normalize_y, rgb_to_y};
use crate::error::{Error, Result};
use crate::synthesis::SynthesisNet;
use crate::tensor::Tensor;
use crate::train::{classify_kernel_size, ClassifierNet};

#[derive(Clone, Debug, PartialEq)]
pub struct Deblurred {
    /// 3×H×W, unclipped.
    pub image: Tensor<f32>,
    /// 1×1×m×m
    pub kernel: Tensor<f32>,
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Replicate the last row and column until both sides are multiples of `mult`.
pub fn pad_to_multiple(image: &Tensor<f32>, mult: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = match image.shape() {
        [c, h, w] => [*c, *h, *w],
        other => return Err(Error::shape("pad", format!("expected C×H×W, got {other:?}"))),
    };
    let (ph, pw) = (h.div_ceil(mult) * mult, w.div_ceil(mult) * mult);
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let d = image.data();
    Ok(Tensor::from_fn([c, ph, pw], |i| {
        let (ch, r, col) = (i / (ph * pw), (i / pw) % ph, i % pw);
        d[(ch * h + r.min(h - 1)) * w + col.min(w - 1)]
    }))
}

pub fn crop_to(image: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let [c, ph, pw] = match image.shape() {
        [c, ph, pw] => [*c, *ph, *pw],
        other => return Err(Error::shape("crop", format!("expected C×H×W, got {other:?}"))),
    };
    if h > ph || w > pw {
        return Err(Error::shape("crop", "target exceeds image"));
    }
    let d = image.data();
    Ok(Tensor::from_fn([c, h, w], |i| {
        let (ch, r, col) = (i / (h * w), (i / w) % h, i % w);
        d[(ch * ph + r) * pw + col]
    }))
}

/// Network input for a 3×H×W image: padded RGB and its normalized luminance,
/// both with a leading batch axis.
fn inputs(blurred: &Tensor<f32>, mult: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let padded = pad_to_multiple(blurred, mult)?;
    let (y, _, _) = normalize_y(&rgb_to_y(&padded)?);
    let mut rgb_shape = vec![1];
    rgb_shape.extend_from_slice(padded.shape());
    let mut y_shape = vec![1];
    y_shape.extend_from_slice(y.shape());
    Ok((padded.reshape(rgb_shape)?, y.reshape(y_shape)?))
}

/// Estimate the kernel from the luminance, then synthesize.
pub fn deblur(analysis: &AnalysisNet, synthesis: &SynthesisNet, blurred: &Tensor<f32>) -> Result<Deblurred> {
    if analysis.config().m != synthesis.config().m {
        return Err(Error::Config(format!(
            "analysis m = {} but synthesis m = {}",
            analysis.config().m,
            synthesis.config().m
        )));
    }
    let [_, h, w] = match blurred.shape() {
        [3, h, w] => [3, *h, *w],
        other => return Err(Error::shape("deblur", format!("expected 3×H×W, got {other:?}"))),
    };
    let mult = lcm(analysis.config().size_multiple(), synthesis.config().size_multiple());
    let (rgb, y) = inputs(blurred, mult)?;
    let kernel = analysis.estimate_kernel(&y)?;
    let out = synthesis.synthesize(&rgb, &kernel)?;
    let [_, _, ph, pw] = out.dims4("deblur")?;
    let image = crop_to(&out.reshape([3, ph, pw])?, h, w)?;
    Ok(Deblurred { image, kernel })
}

/// Synthesize with a known kernel (1×1×m×m or m×m).
pub fn deblur_with_kernel(synthesis: &SynthesisNet, blurred: &Tensor<f32>, kernel: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [_, h, w] = match blurred.shape() {
        [3, h, w] => [3, *h, *w],
        other => return Err(Error::shape("deblur", format!("expected 3×H×W, got {other:?}"))),
    };
    let (rgb, _) = inputs(blurred, synthesis.config().size_multiple())?;
    let m = synthesis.config().m;
    let out = synthesis.synthesize(&rgb, &kernel.clone().reshape([1, 1, m, m])?)?;
    let [_, _, ph, pw] = out.dims4("deblur")?;
    crop_to(&out.reshape([3, ph, pw])?, h, w)
}

/// Three analysis/synthesis pairs specialised to small, medium and large
/// kernels, selected per image by the size classifier.
#[derive(Clone, Debug)]
pub struct ScaleOptimized {
    pub classifier: ClassifierNet,
    pub pairs: Vec<(AnalysisNet, SynthesisNet)>,
}

impl ScaleOptimized {
    pub fn new(classifier: ClassifierNet, pairs: Vec<(AnalysisNet, SynthesisNet)>) -> Result<Self> {
        if pairs.len() != crate::train::CLASSES {
            return Err(Error::Config(format!("expected 3 network pairs, got {}", pairs.len())));
        }
        Ok(ScaleOptimized { classifier, pairs })
    }

    pub fn classify(&self, blurred: &Tensor<f32>) -> Result<usize> {
        let (_, y) = inputs(blurred, self.classifier.trunk_config().size_multiple())?;
        Ok(classify_kernel_size(&self.classifier, &y)?[0])
    }

    pub fn deblur(&self, blurred: &Tensor<f32>) -> Result<(usize, Deblurred)> {
        let class = self.classify(blurred)?;
        let (a, s) = &self.pairs[class];
        Ok((class, deblur(a, s, blurred)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_then_crop_is_identity() {
        let img = Tensor::from_fn([3, 5, 7], |i| i as f32);
        let padded = pad_to_multiple(&img, 4).unwrap();
        assert_eq!(padded.shape(), &[3, 8, 8]);
        assert_eq!(padded.data()[7], img.data()[6]);
        assert_eq!(crop_to(&padded, 5, 7).unwrap(), img);
    }
}
