//! PSNR, mean SSIM, evaluation reports and the guidance ablation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::AnalysisNet;
use crate::config::RunConfig;
use crate::data::{self, SampleSource, TrainingSample};
use crate::error::{Error, Result};
use crate::pipeline;
use crate::synthesis::SynthesisNet;
use crate::tensor::{GuidanceMode, Tensor};
use crate::train::{self, Models, Stage, StageIo};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// 10·log10(peak²/MSE); identical images give `f64::INFINITY`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    let mse = se / a.len().max(1) as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (peak * peak / mse).log10())
    }
}

/// Normalized 11×11 Gaussian weights (σ = 1.5), row-major.
pub fn ssim_window() -> Vec<f64> {
    let g = gaussian_1d();
    let mut out = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            out.push(a * b);
        }
    }
    out
}

fn gaussian_1d() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Luminance plane of a 3×H×W or 1×H×W image (leading batch axis of 1 allowed).
fn luminance(img: &Tensor<f32>) -> Result<(usize, usize, Vec<f64>)> {
    let shape: Vec<usize> = match img.shape() {
        [1, rest @ ..] if rest.len() == 3 => rest.to_vec(),
        s => s.to_vec(),
    };
    match shape[..] {
        [1, h, w] => Ok((h, w, img.data().iter().map(|&v| v as f64).collect())),
        [3, h, w] => {
            let plane = h * w;
            let d = img.data();
            let l = data::LUMA;
            Ok((
                h,
                w,
                (0..plane)
                    .map(|p| l[0] as f64 * d[p] as f64 + l[1] as f64 * d[plane + p] as f64 + l[2] as f64 * d[2 * plane + p] as f64)
                    .collect(),
            ))
        }
        _ => Err(Error::shape("mssim", format!("expected 1 or 3 channels, got {:?}", img.shape()))),
    }
}

/// Separable "valid" Gaussian filtering of an h×w plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|k| g[k] * x[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|k| g[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity on the luminance channel over all fully
/// contained 11×11 Gaussian windows, for images in `[0, 1]`.
pub fn mssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mssim", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w, x) = luminance(a)?;
    let (_, _, y) = luminance(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "mssim",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let g1 = gaussian_1d();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&x, h, w, &g1);
    let my = filter_valid(&y, h, w, &g1);
    let sxx = filter_valid(&xx, h, w, &g1);
    let syy = filter_valid(&yy, h, w, &g1);
    let sxy = filter_valid(&xy, h, w, &g1);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub path: String,
    pub psnr_db: f64,
    pub mssim: f64,
}

/// Per-image scores plus their means. `fingerprint` identifies the
/// configuration and weights; `runtime_secs` is kept out of the CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_mssim: f64,
    pub fingerprint: String,
    pub runtime_secs: f64,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:?}")
    }
}

/// Parse a PSNR field written by [`EvalReport::to_csv`].
pub fn parse_db(s: &str) -> Option<f64> {
    if s == "inf" {
        Some(f64::INFINITY)
    } else {
        s.parse().ok()
    }
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, fingerprint: String, runtime_secs: f64) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let mean_mssim = rows.iter().map(|r| r.mssim).sum::<f64>() / n;
        EvalReport {
            rows,
            mean_psnr,
            mean_mssim,
            fingerprint,
            runtime_secs,
        }
    }

    /// Rows whose PSNR is the infinite sentinel.
    pub fn infinite_count(&self) -> usize {
        self.rows.iter().filter(|r| r.psnr_db.is_infinite()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,psnr_db,mssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:?}", r.path, fmt_db(r.psnr_db), r.mssim);
        }
        let _ = writeln!(out, "MEAN,{},{:?}", fmt_db(self.mean_psnr), self.mean_mssim);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Score predictions against references. Predictions are clipped to `[0, 1]`.
pub fn score(path: String, prediction: &Tensor<f32>, sharp: &Tensor<f32>) -> Result<EvalRow> {
    let clipped = prediction.map(|v| v.clamp(0.0, 1.0));
    Ok(EvalRow {
        path,
        psnr_db: psnr(&clipped, sharp, 1.0)?,
        mssim: mssim(&clipped, sharp)?,
    })
}

/// Evaluate `predict` on in-memory samples, named by index.
pub fn evaluate_samples<F>(samples: &[TrainingSample], fingerprint: String, predict: F) -> Result<EvalReport>
where
    F: Fn(&TrainingSample) -> Result<Tensor<f32>> + Sync,
{
    let start = Instant::now();
    let rows = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| score(format!("sample{i:05}"), &predict(s)?, &s.sharp))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows, fingerprint, start.elapsed().as_secs_f64()))
}

/// FNV-1a over the given byte strings, as 16 hex digits.
pub fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    format!("{h:016x}")
}

fn net_fingerprint(analysis: &AnalysisNet, synthesis: &SynthesisNet) -> String {
    let mut bytes = Vec::new();
    for (name, t) in analysis.params().iter().chain(synthesis.params().iter()) {
        bytes.extend_from_slice(name.as_bytes());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let cfg = format!("{:?}{:?}", analysis.config(), synthesis.config());
    fingerprint(&[cfg.as_bytes(), &bytes])
}

/// Sharp/blurred file pairs of a dataset directory: every manifest (or
/// listed) `*_sharp.png` with its `*_blurred.png` sibling.
pub fn dataset_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    data::list_images(dir)?
        .into_iter()
        .filter(|p| p.to_string_lossy().ends_with("_sharp.png"))
        .map(|sharp| {
            let s = sharp.to_string_lossy();
            let blurred = PathBuf::from(format!("{}_blurred.png", &s[..s.len() - "_sharp.png".len()]));
            if blurred.exists() {
                Ok((sharp, blurred))
            } else {
                Err(Error::Config(format!("{} has no blurred counterpart", sharp.display())))
            }
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|pairs| {
            if pairs.is_empty() {
                Err(Error::Config(format!("no *_sharp.png images in {}", dir.display())))
            } else {
                Ok(pairs)
            }
        })
}

/// Deblur every pair of a dataset directory and score it. When `out_dir`
/// is given, predictions are written there as PNGs.
pub fn evaluate_set(
    analysis: &AnalysisNet,
    synthesis: &SynthesisNet,
    dir: &Path,
    report: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let start = Instant::now();
    let pairs = dataset_pairs(dir)?;
    if let Some(out) = out_dir {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let rows = pairs
        .par_iter()
        .map(|(sharp_path, blurred_path)| {
            let sharp = data::read_image(sharp_path)?;
            let blurred = data::read_image(blurred_path)?;
            let pred = pipeline::deblur(analysis, synthesis, &blurred)?.image;
            let rel = sharp_path.strip_prefix(dir).unwrap_or(sharp_path).to_string_lossy().into_owned();
            if let Some(out) = out_dir {
                let name = sharp_path.file_name().map(|f| f.to_string_lossy().replace("_sharp", "_deblurred"));
                let target = out.join(name.unwrap_or_else(|| "deblurred.png".into()));
                data::write_image(&target, &pred.map(|v| v.clamp(0.0, 1.0)))?;
            }
            score(rel, &pred, &sharp)
        })
        .collect::<Result<Vec<_>>>()?;
    let report_out = EvalReport::from_rows(rows, net_fingerprint(analysis, synthesis), start.elapsed().as_secs_f64());
    if let Some(path) = report {
        report_out.write_csv(path)?;
    }
    Ok(report_out)
}

/// Salt separating held-out sample seeds from training batch seeds.
pub const HELD_OUT_STREAM: u64 = u64::MAX;

/// `n` samples from a stream disjoint from every training batch of `seed`.
pub fn held_out_samples(source: &dyn SampleSource, seed: u64, n: usize) -> Result<Vec<TrainingSample>> {
    (0..n)
        .into_par_iter()
        .map(|i| source.sample(data::derive_seed(seed, HELD_OUT_STREAM, i as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: GuidanceMode,
    pub mean_psnr: f64,
    pub final_loss: f64,
}

/// Train the synthesis network with ground-truth kernels once per guidance
/// mode and report mean PSNR on held-out samples.
///
/// Every mode starts from the same initialization (built with both terms,
/// unused guiding units are simply never read).
pub fn ablation_run(modes: &[GuidanceMode], config: &RunConfig, source: &dyn SampleSource) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let plan = config.plan(Stage::PretrainSynthesis);
    let held_out = held_out_samples(source, plan.seed, config.eval_samples)?;
    let base_cfg = crate::synthesis::SynthesisConfig {
        guidance: GuidanceMode::Both,
        ..config.synthesis.clone()
    };
    let base = SynthesisNet::build(base_cfg, &mut ChaCha8Rng::seed_from_u64(plan.seed))?;
    let mut out = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut models = Models {
            synthesis: Some(base.with_guidance(mode)?),
            ..Models::default()
        };
        let report = train::run_stage(&plan, source, &mut models, &mut StageIo::default())?;
        let net = models.synthesis.expect("still present");
        let eval = evaluate_samples(&held_out, String::new(), |s| {
            pipeline::deblur_with_kernel(&net, &s.blurred, &s.kernel.to_tensor())
        })?;
        let tail = report.losses.len().min(100);
        let final_loss = report.losses[report.losses.len() - tail..].iter().sum::<f64>() / tail.max(1) as f64;
        log::info!("ablation {mode}: mean PSNR {:.3} dB", eval.mean_psnr);
        out.push(AblationRow {
            mode,
            mean_psnr: eval.mean_psnr,
            final_loss,
        });
    }
    Ok(out)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode,mean_psnr_db,final_loss\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:?}", r.mode, fmt_db(r.mean_psnr), r.final_loss);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Tensor::zeros([3, 4, 4]);
        let b = Tensor::full([3, 4, 4], 0.5);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
        assert!((psnr(&a, &b, 1.0).unwrap() - 6.020_599_913_279_624).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_window_sums_to_one() {
        assert!((ssim_window().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mssim_identity_and_negative() {
        let img = Tensor::from_fn([3, 16, 16], |i| ((i * 37 % 101) as f32) / 100.0);
        assert_eq!(mssim(&img, &img).unwrap(), 1.0);
        let neg = img.map(|v| 1.0 - v);
        assert!(mssim(&img, &neg).unwrap() < 1.0);
        let small = Tensor::zeros([1, 10, 12]);
        assert!(matches!(mssim(&small, &small), Err(Error::Shape { .. })));
    }

    #[test]
    fn csv_has_mean_row_and_inf() {
        let rows = vec![
            EvalRow { path: "a".into(), psnr_db: f64::INFINITY, mssim: 1.0 },
            EvalRow { path: "b".into(), psnr_db: 20.0, mssim: 0.5 },
        ];
        let rep = EvalReport::from_rows(rows, String::new(), 0.0);
        let csv = rep.to_csv();
        assert!(csv.starts_with("path,psnr_db,mssim\na,inf,1.0\n"));
        assert!(csv.ends_with("MEAN,inf,0.75\n"));
    }
}
