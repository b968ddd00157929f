//! Simulate camera-shake kernels, measure their support class, blur a scene
//! and round-trip a kernel through the BKRN format.

use guided_deblur::blur::{self, BlurKernel};
use guided_deblur::config::RunConfig;
use guided_deblur::data;
use guided_deblur::metrics;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> guided_deblur::Result<()> {
    let cfg = RunConfig::toy();
    let mut counts = [0usize; 3];
    for i in 0..300 {
        let mut rng = ChaCha8Rng::seed_from_u64(data::derive_seed(7, 0, i));
        let k = data::sample_kernel(&mut rng, &cfg.sample)?;
        counts[data::kernel_class(&k, &cfg.sample)] += 1;
    }
    println!("size classes over 300 kernels: {counts:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = blur::sample_kernel(&mut rng, &cfg.sample.trajectory)?;
    let support = blur::kernel_support_size(&k, cfg.sample.support_mass);
    println!("one kernel: m = {}, sum = {:.6}, support {support}", k.size(), k.grid().iter().sum::<f32>());
    for r in 0..k.size() {
        let row: String = (0..k.size())
            .map(|c| match k.at(r, c) {
                v if v > 0.02 => '#',
                v if v > 0.005 => '+',
                v if v > 0.0 => '.',
                _ => ' ',
            })
            .collect();
        println!("  |{row}|");
    }

    let bytes = k.to_bytes();
    let back = BlurKernel::from_bytes(&bytes)?;
    println!("BKRN: {} bytes, round trip exact: {}", bytes.len(), back == k);

    let scene = data::procedural_image(&mut rng, 64);
    let blurred = blur::apply_blur(&scene, &k, 0.0, &mut rng)?;
    let noisy = blur::apply_blur(&scene, &k, blur::DEFAULT_NOISE_SIGMA, &mut rng)?;
    println!(
        "PSNR blurred {:.2} dB, blurred + noise {:.2} dB",
        metrics::psnr(&blurred, &scene, 1.0)?,
        metrics::psnr(&noisy, &scene, 1.0)?
    );
    Ok(())
}
