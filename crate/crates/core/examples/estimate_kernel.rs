//! Pre-train the toy analysis network for a few hundred iterations on
//! procedural scenes and compare its kernel estimates with the truth.

use guided_deblur::config::RunConfig;
use guided_deblur::data::ProceduralSource;
use guided_deblur::metrics;
use guided_deblur::train::{self, Models, Net, Stage, StageIo};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> guided_deblur::Result<()> {
    env_logger::init();
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut cfg = RunConfig::toy();
    cfg.train.iterations = iterations;
    let source = ProceduralSource::new(cfg.sample.clone());
    let held_out = metrics::held_out_samples(&source, cfg.train.seed, 8)?;

    let mut models = Models::default();
    models.build(Net::Analysis, &cfg, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let l1 = |models: &Models| -> guided_deblur::Result<f64> {
        let net = models.analysis.as_ref().expect("built above");
        let mut total = 0.0;
        for s in &held_out {
            let m = cfg.m();
            let y = s.y_norm.clone().reshape([1, 1, s.y_norm.shape()[1], s.y_norm.shape()[2]])?;
            let k = net.estimate_kernel(&y)?;
            let truth = s.kernel.to_tensor().reshape([1, 1, m, m])?;
            total += k.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        }
        Ok(total / held_out.len() as f64)
    };

    println!("kernel L1 before training: {:.4}", l1(&models)?);
    let report = train::run_stage(&cfg.plan(Stage::PretrainAnalysis), &source, &mut models, &mut StageIo::default())?;
    println!("final training loss: {:.4e}", report.losses.last().copied().unwrap_or(f64::NAN));
    println!("kernel L1 after {iterations} iterations: {:.4}", l1(&models)?);
    Ok(())
}
