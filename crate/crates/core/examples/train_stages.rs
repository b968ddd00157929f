//! The staged training strategy in miniature: pre-train both networks, save
//! them, resume them into joint training on the image loss and deblur.

use guided_deblur::checkpoint::Checkpoint;
use guided_deblur::config::RunConfig;
use guided_deblur::data::ProceduralSource;
use guided_deblur::metrics;
use guided_deblur::pipeline;
use guided_deblur::train::{self, Stage, StageIo};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> guided_deblur::Result<()> {
    env_logger::init();
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let mut cfg = RunConfig::toy();
    cfg.train.iterations = iterations;
    let source = ProceduralSource::new(cfg.sample.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);

    let mut saved = Vec::new();
    for stage in [Stage::PretrainAnalysis, Stage::PretrainSynthesis] {
        let (mut models, _) = train::prepare_models(stage, &cfg, &[], &mut rng)?;
        let mut log = Vec::new();
        let report = train::run_stage(
            &cfg.plan(stage),
            &source,
            &mut models,
            &mut StageIo {
                log: Some(&mut log),
                checkpoint: None,
            },
        )?;
        let last = String::from_utf8_lossy(&log).lines().last().unwrap_or("").to_string();
        println!("{stage}: last log line \"{last}\", final lr {:.1e}", report.final_lr);
        let bytes = models.to_checkpoint(&cfg).to_bytes();
        saved.push(Checkpoint::from_bytes(&bytes)?);
    }

    let (mut models, random_init) = train::prepare_models(Stage::E2e, &cfg, &saved, &mut rng)?;
    println!("e2e resumed from {} checkpoints (random init: {random_init})", saved.len());
    let report = train::run_stage(&cfg.plan(Stage::E2e), &source, &mut models, &mut StageIo::default())?;
    println!("e2e final image loss {:.4e}", report.losses.last().copied().unwrap_or(f64::NAN));

    let (a, s) = (models.analysis.as_ref().unwrap(), models.synthesis.as_ref().unwrap());
    let held_out = metrics::held_out_samples(&source, cfg.train.seed, 8)?;
    let out = metrics::evaluate_samples(&held_out, String::new(), |x| Ok(pipeline::deblur(a, s, &x.blurred)?.image))?;
    let blurry = metrics::evaluate_samples(&held_out, String::new(), |x| Ok(x.blurred.clone()))?;
    println!("blind deblurring: {:.2} dB (blurry input {:.2} dB)", out.mean_psnr, blurry.mean_psnr);
    Ok(())
}
