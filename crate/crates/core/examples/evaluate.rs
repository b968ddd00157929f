//! Write a small paired dataset, score a network on it with PSNR / MSSIM and
//! print the CSV report, then run a short guidance ablation.

use guided_deblur::config::RunConfig;
use guided_deblur::data::{self, ProceduralSource, SampleSource};
use guided_deblur::metrics;
use guided_deblur::tensor::GuidanceMode;
use guided_deblur::train::{Models, Net};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> guided_deblur::Result<()> {
    env_logger::init();
    let mut cfg = RunConfig::toy();
    let source = ProceduralSource::new(cfg.sample.clone());
    let dir = std::env::temp_dir().join(format!("guided-deblur-eval-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| guided_deblur::Error::Config(e.to_string()))?;
    let mut names = Vec::new();
    for i in 0..4u64 {
        let s = source.sample(data::derive_seed(3, 0, i))?;
        data::write_image(&dir.join(format!("{i:05}_sharp.png")), &s.sharp)?;
        data::write_image(&dir.join(format!("{i:05}_blurred.png")), &s.blurred)?;
        names.push(format!("{i:05}_sharp.png"));
    }
    data::write_manifest(&dir, &names)?;

    let mut models = Models::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    models.build(Net::Analysis, &cfg, &mut rng)?;
    models.build(Net::Synthesis, &cfg, &mut rng)?;
    let report = metrics::evaluate_set(
        models.analysis.as_ref().unwrap(),
        models.synthesis.as_ref().unwrap(),
        &dir,
        None,
        None,
    )?;
    print!("{}", report.to_csv());
    println!("fingerprint {}", report.fingerprint);

    cfg.train.iterations = 20;
    cfg.eval_samples = 8;
    let rows = metrics::ablation_run(&[GuidanceMode::None, GuidanceMode::Both], &cfg, &source)?;
    print!("{}", metrics::ablation_csv(&rows));
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
