//! Route blurry inputs through three analysis/synthesis pairs picked by the
//! kernel-size classifier after a short classifier training run.

use guided_deblur::config::RunConfig;
use guided_deblur::data::ProceduralSource;
use guided_deblur::metrics;
use guided_deblur::pipeline::ScaleOptimized;
use guided_deblur::train::{self, Models, Net, Stage, StageIo};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> guided_deblur::Result<()> {
    env_logger::init();
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let mut cfg = RunConfig::toy();
    cfg.train.iterations = iterations;
    let source = ProceduralSource::new(cfg.sample.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);

    let mut models = Models::default();
    models.build(Net::Classifier, &cfg, &mut rng)?;
    train::run_stage(&cfg.plan(Stage::Classifier), &source, &mut models, &mut StageIo::default())?;

    let mut pairs = Vec::new();
    for m in [5, 11, 17] {
        let mut class_cfg = cfg.clone();
        class_cfg.set("m", &m.to_string())?;
        let mut pair = Models::default();
        pair.build(Net::Analysis, &class_cfg, &mut rng)?;
        pair.build(Net::Synthesis, &class_cfg, &mut rng)?;
        pairs.push((pair.analysis.unwrap(), pair.synthesis.unwrap()));
    }
    let router = ScaleOptimized::new(models.classifier.unwrap(), pairs)?;

    let held_out = metrics::held_out_samples(&source, cfg.train.seed, 24)?;
    let mut correct = 0;
    for s in &held_out {
        let (class, out) = router.deblur(&s.blurred)?;
        correct += usize::from(class == s.size_class);
        assert_eq!(out.image.shape(), s.blurred.shape());
    }
    println!("routed {} images, classifier agreed with the true size class on {correct}", held_out.len());
    Ok(())
}
