//! Image I/O, color transforms, cropping and on-the-fly sample generation.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blur::{self, BlurKernel, TrajectoryConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Luminance weights for R, G, B (BT.601).
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

const STD_FLOOR: f64 = 1e-6;

pub const MANIFEST: &str = "manifest.txt";

/// Decode an 8-bit RGB PNG into a 3×H×W tensor in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::Decode(format!(
                "expected 8-bit RGB, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Encode a 3×H×W tensor as an 8-bit RGB PNG (clipped to `[0, 1]`,
/// rounded half away from zero).
pub fn encode_image(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        other => return Err(Error::shape("encode_image", format!("expected 3×H×W, got {other:?}"))),
    };
    let d = image.data();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = d[(c * h + y as usize) * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_image(image)?).map_err(|e| Error::io(path, e))
}

/// Y = 0.299 R + 0.587 G + 0.114 B, for a 3×H×W (or N×3×H×W) image.
pub fn rgb_to_y(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, h, w) = match image.shape() {
        [3, h, w] => (0, *h, *w),
        [n, 3, h, w] => (*n, *h, *w),
        other => return Err(Error::shape("rgb_to_y", format!("expected 3 channels, got {other:?}"))),
    };
    let plane = h * w;
    let d = image.data();
    let y: Vec<f32> = (0..n.max(1))
        .flat_map(|i| {
            let base = i * 3 * plane;
            (0..plane).map(move |p| {
                LUMA[0] * d[base + p] + LUMA[1] * d[base + plane + p] + LUMA[2] * d[base + 2 * plane + p]
            })
        })
        .collect();
    if n == 0 {
        Tensor::new([1, h, w], y)
    } else {
        Tensor::new([n, 1, h, w], y)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f32]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Shift to zero mean and scale to unit variance; constant images map to zero.
pub fn normalize_y(y: &Tensor<f32>) -> (Tensor<f32>, f64, f64) {
    let (mean, std) = mean_std(y.data());
    let scale = 1.0 / std.max(STD_FLOOR);
    let out = y.map(|v| ((v as f64 - mean) * scale) as f32);
    (out, mean, std)
}

/// Uniformly placed S×S crop of a C×H×W image.
pub fn random_crop(image: &Tensor<f32>, size: usize, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let [_, h, w] = match image.shape() {
        [c, h, w] => [*c, *h, *w],
        other => return Err(Error::shape("random_crop", format!("expected C×H×W, got {other:?}"))),
    };
    if h < size || w < size {
        return Err(Error::shape(
            "random_crop",
            format!("{h}x{w} image is smaller than the {size}x{size} crop"),
        ));
    }
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    crop(image, top, left, size)
}

pub fn crop(image: &Tensor<f32>, top: usize, left: usize, size: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = match image.shape() {
        [c, h, w] => [*c, *h, *w],
        other => return Err(Error::shape("crop", format!("expected C×H×W, got {other:?}"))),
    };
    if top + size > h || left + size > w {
        return Err(Error::shape("crop", "window exceeds image"));
    }
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for r in top..top + size {
            let row = (ch * h + r) * w;
            out.extend_from_slice(&image.data()[row + left..row + left + size]);
        }
    }
    Tensor::new([c, size, size], out)
}

/// How training samples are synthesized from sharp images.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub crop: usize,
    pub trajectory: TrajectoryConfig,
    pub noise_sigma: f64,
    /// Upper support sizes of size classes 0 and 1.
    pub class_bounds: [usize; 2],
    /// Mass fraction used to measure kernel support.
    pub support_mass: f64,
    /// Draw the size class uniformly first, then reject kernels of other classes.
    pub balance_classes: bool,
}

impl SampleConfig {
    pub fn paper() -> Self {
        SampleConfig {
            crop: 512,
            trajectory: TrajectoryConfig::paper(),
            noise_sigma: blur::DEFAULT_NOISE_SIGMA,
            class_bounds: [31, 61],
            support_mass: 0.99,
            balance_classes: false,
        }
    }

    pub fn toy() -> Self {
        SampleConfig {
            crop: 64,
            trajectory: TrajectoryConfig::toy(),
            class_bounds: [5, 11],
            balance_classes: true,
            ..Self::paper()
        }
    }
}

/// A sharp crop, its kernel, the degraded image and the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub sharp: Tensor<f32>,
    pub kernel: BlurKernel,
    pub blurred: Tensor<f32>,
    /// Normalized luminance of `blurred`, 1×S×S.
    pub y_norm: Tensor<f32>,
    /// Mean and standard deviation removed from the luminance.
    pub y_stats: (f64, f64),
    pub size_class: usize,
}

/// Crop, draw a kernel, blur, add noise and derive the network input.
pub fn make_sample(rng: &mut impl Rng, sharp_image: &Tensor<f32>, config: &SampleConfig) -> Result<TrainingSample> {
    let sharp = random_crop(sharp_image, config.crop, rng)?;
    let kernel = sample_kernel(rng, config)?;
    sample_from_parts(rng, sharp, kernel, config)
}

const CLASS_ATTEMPTS: usize = 256;

/// A simulated kernel. With `balance_classes` the size class is drawn
/// uniformly first and kernels are redrawn until one lands in it; after
/// `CLASS_ATTEMPTS` draws the one nearest the target class is kept.
pub fn sample_kernel(rng: &mut impl Rng, config: &SampleConfig) -> Result<BlurKernel> {
    let first = blur::sample_kernel(rng, &config.trajectory)?;
    if !config.balance_classes {
        return Ok(first);
    }
    let target = rng.gen_range(0..3usize);
    let mut best = (kernel_class(&first, config).abs_diff(target), first);
    for _ in 1..CLASS_ATTEMPTS {
        if best.0 == 0 {
            break;
        }
        let k = blur::sample_kernel(rng, &config.trajectory)?;
        let d = kernel_class(&k, config).abs_diff(target);
        if d < best.0 {
            best = (d, k);
        }
    }
    Ok(best.1)
}

pub fn kernel_class(k: &BlurKernel, config: &SampleConfig) -> usize {
    blur::size_class(blur::kernel_support_size(k, config.support_mass), config.class_bounds)
}

/// Build a sample from a given crop and kernel.
pub fn sample_from_parts(
    rng: &mut impl Rng,
    sharp: Tensor<f32>,
    kernel: BlurKernel,
    config: &SampleConfig,
) -> Result<TrainingSample> {
    let blurred = blur::apply_blur(&sharp, &kernel, config.noise_sigma, rng)?;
    let (y_norm, mean, std) = normalize_y(&rgb_to_y(&blurred)?);
    let size_class = kernel_class(&kernel, config);
    Ok(TrainingSample {
        sharp,
        kernel,
        blurred,
        y_norm,
        y_stats: (mean, std),
        size_class,
    })
}

/// Mix a base seed with two counters (splitmix64 finalizer).
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic producer of training samples: the same seed yields the
/// same sample.
pub trait SampleSource: Sync {
    fn sample(&self, seed: u64) -> Result<TrainingSample>;

    fn config(&self) -> &SampleConfig;
}

/// Samples cut from a fixed pool of sharp images.
#[derive(Clone, Debug)]
pub struct ImagePool {
    images: Vec<Tensor<f32>>,
    config: SampleConfig,
}

impl ImagePool {
    pub fn new(images: Vec<Tensor<f32>>, config: SampleConfig) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("image pool is empty".into()));
        }
        for img in &images {
            let s = img.shape();
            if s.len() != 3 || s[0] != 3 || s[1] < config.crop || s[2] < config.crop {
                return Err(Error::shape(
                    "image_pool",
                    format!("image {s:?} cannot provide {0}x{0} crops", config.crop),
                ));
            }
        }
        Ok(ImagePool { images, config })
    }

    /// Load every image listed by [`list_images`].
    pub fn from_dir(dir: &Path, config: SampleConfig) -> Result<Self> {
        let paths = list_images(dir)?;
        let images = paths.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
        Self::new(images, config)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl SampleSource for ImagePool {
    fn sample(&self, seed: u64) -> Result<TrainingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = rng.gen_range(0..self.images.len());
        make_sample(&mut rng, &self.images[idx], &self.config)
    }

    fn config(&self) -> &SampleConfig {
        &self.config
    }
}

/// Samples cut from procedurally generated sharp images (see [`procedural_image`]).
#[derive(Clone, Debug)]
pub struct ProceduralSource {
    config: SampleConfig,
}

impl ProceduralSource {
    pub fn new(config: SampleConfig) -> Self {
        ProceduralSource { config }
    }
}

impl SampleSource for ProceduralSource {
    fn sample(&self, seed: u64) -> Result<TrainingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = procedural_image(&mut rng, self.config.crop);
        make_sample(&mut rng, &img, &self.config)
    }

    fn config(&self) -> &SampleConfig {
        &self.config
    }
}

/// A synthetic "natural-looking" RGB scene: smooth background, overlapping
/// flat and shaded shapes whose edges range from crisp to soft, thin strokes
/// and a little texture.
pub fn procedural_image(rng: &mut impl Rng, size: usize) -> Tensor<f32> {
    let s = size as f32;
    let mut img = vec![0.0f32; 3 * size * size];
    let color = |rng: &mut dyn rand::RngCore| [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];

    let c0 = color(rng);
    let c1 = color(rng);
    let angle = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f32 - s / 2.0) * ca + (y as f32 - s / 2.0) * sa) / s + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                img[(c * size + y) * size + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let shapes = rng.gen_range(6..14);
    for _ in 0..shapes {
        let col = color(rng);
        let cx = rng.gen_range(0.0..s);
        let cy = rng.gen_range(0.0..s);
        let rx = rng.gen_range(s * 0.05..s * 0.35);
        let ry = rng.gen_range(s * 0.05..s * 0.35);
        let kind = rng.gen_range(0..3);
        let shade = rng.gen_range(-0.3f32..0.3);
        // edge width in pixels, from crisp to defocused
        let soft = rng.gen_range(0.5f32..3.0);
        let scale = rx.min(ry) / soft;
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                let r = match kind {
                    0 => dx.abs().max(dy.abs()),
                    1 => (dx * dx + dy * dy).sqrt(),
                    _ => dx.abs() + dy.abs(),
                };
                let alpha = (0.5 + (1.0 - r) * scale).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for c in 0..3 {
                        let v = &mut img[(c * size + y) * size + x];
                        *v = alpha * (col[c] + shade * dy).clamp(0.0, 1.0) + (1.0 - alpha) * *v;
                    }
                }
            }
        }
    }

    let strokes = rng.gen_range(2..6);
    for _ in 0..strokes {
        let col = color(rng);
        let (x0, y0) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let a = rng.gen_range(0.0..std::f32::consts::TAU);
        let len = rng.gen_range(s * 0.2..s * 0.8);
        let width = rng.gen_range(0.5f32..1.5);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f32 - x0, y as f32 - y0);
                let along = px * a.cos() + py * a.sin();
                let across = -px * a.sin() + py * a.cos();
                if (0.0..len).contains(&along) && across.abs() <= width {
                    for c in 0..3 {
                        img[(c * size + y) * size + x] = col[c];
                    }
                }
            }
        }
    }

    let freq = rng.gen_range(0.3f32..1.2);
    let amp = rng.gen_range(0.0f32..0.06);
    for y in 0..size {
        for x in 0..size {
            let t = amp * ((x as f32 * freq).sin() * (y as f32 * freq * 0.7).cos());
            for c in 0..3 {
                let v = &mut img[(c * size + y) * size + x];
                *v = (*v + t).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([3, size, size], img).expect("3×size×size")
}

/// A minibatch in network layout.
#[derive(Clone, Debug)]
pub struct Batch {
    /// N×3×S×S
    pub sharp: Tensor<f32>,
    /// N×3×S×S
    pub blurred: Tensor<f32>,
    /// N×1×S×S
    pub y_norm: Tensor<f32>,
    /// N×1×m×m
    pub kernels: Tensor<f32>,
    pub classes: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[TrainingSample]) -> Result<Batch> {
        let stack = |f: &dyn Fn(&TrainingSample) -> Tensor<f32>| -> Result<Tensor<f32>> {
            let items: Vec<Tensor<f32>> = samples.iter().map(|s| {
                let t = f(s);
                let mut shape = vec![1];
                shape.extend_from_slice(t.shape());
                t.reshape(shape).expect("same length")
            }).collect();
            Tensor::stack(&items)
        };
        Ok(Batch {
            sharp: stack(&|s| s.sharp.clone())?,
            blurred: stack(&|s| s.blurred.clone())?,
            y_norm: stack(&|s| s.y_norm.clone())?,
            kernels: stack(&|s| {
                let m = s.kernel.size();
                Tensor::new([m, m], s.kernel.grid().to_vec()).expect("m×m")
            })?
            .reshape({
                let m = samples[0].kernel.size();
                vec![samples.len(), 1, m, m]
            })?,
            classes: samples.iter().map(|s| s.size_class).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Samples `seed(base, index, 0..n)` generated in parallel.
pub fn make_batch(source: &dyn SampleSource, base_seed: u64, index: u64, n: usize) -> Result<Batch> {
    let samples = (0..n)
        .into_par_iter()
        .map(|i| source.sample(derive_seed(base_seed, index, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Batch::from_samples(&samples)
}

/// PNG files of a directory: the entries of its manifest if present,
/// otherwise every `*.png` below it in sorted order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = dir.join(MANIFEST);
    if manifest.exists() {
        return read_manifest(dir);
    }
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                out.push(path);
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Config(format!("no PNG images under {}", dir.display())));
    }
    Ok(out)
}

/// Newline-separated relative paths, resolved against `dir`.
pub fn read_manifest(dir: &Path) -> Result<Vec<PathBuf>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| dir.join(l))
        .collect())
}

pub fn write_manifest(dir: &Path, entries: &[String]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut text = entries.join("\n");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_extremes_decode() {
        let img = Tensor::new([3, 1, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let back = decode_image(&encode_image(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn luminance_of_primaries() {
        let white = Tensor::full([3, 2, 2], 1.0);
        assert!(rgb_to_y(&white).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let red = Tensor::new([3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        assert!((rgb_to_y(&red).unwrap().data()[0] - 0.299).abs() < 1e-7);
        let black = Tensor::zeros([3, 1, 1]);
        assert_eq!(rgb_to_y(&black).unwrap().data()[0], 0.0);
    }

    #[test]
    fn constant_luminance_normalizes_to_zero() {
        let (y, mean, std) = normalize_y(&Tensor::full([1, 4, 4], 0.7));
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!((mean - 0.7).abs() < 1e-6);
        assert!(std < 1e-6);
    }

    #[test]
    fn crop_larger_than_image_fails() {
        let img = Tensor::zeros([3, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(random_crop(&img, 9, &mut rng), Err(Error::Shape { .. })));
        assert_eq!(random_crop(&img, 8, &mut rng).unwrap(), img);
    }

    #[test]
    fn decode_rejects_non_png_and_rgba() {
        assert!(matches!(decode_image(b"not an image"), Err(Error::Decode(_))));
        let rgba = ImageBuffer::from_pixel(2, 2, image::Rgba([1u8, 2, 3, 4]));
        let mut out = Cursor::new(Vec::new());
        rgba.write_to(&mut out, ImageFormat::Png).unwrap();
        assert!(matches!(decode_image(&out.into_inner()), Err(Error::Decode(_))));
    }
}
