//! Command-line front end. Logs go to stderr; artifacts go to files.
//!
//! Exit codes: 0 on success, 1 when inputs or configuration are invalid,
//! 2 when the work itself fails.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use guided_deblur::analysis::AnalysisNet;
use guided_deblur::blur::{self, BlurKernel};
use guided_deblur::checkpoint::Checkpoint;
use guided_deblur::config::RunConfig;
use guided_deblur::data::{self, ImagePool, ProceduralSource, SampleSource};
use guided_deblur::metrics;
use guided_deblur::pipeline::{self, ScaleOptimized};
use guided_deblur::synthesis::SynthesisNet;
use guided_deblur::tensor::GuidanceMode;
use guided_deblur::train::{self, ClassifierNet, Models, Stage, StageIo};
use guided_deblur::{gradsuite, Error, Result};

#[derive(Parser)]
#[command(name = "guided-deblur", version, about = "Blind deblurring with kernel-guided synthesis")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded random blur kernels as BKRN files.
    GenKernels {
        /// Preset name (toy, paper) or config file.
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write sharp/blurred PNG pairs, their kernels and a manifest.
    GenDataset {
        /// Directory of sharp PNGs; procedural scenes when omitted.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the analysis network on kernel L1 loss.
    PretrainAnalysis(TrainArgs),
    /// Train the synthesis network with ground-truth kernels.
    PretrainSynthesis(TrainArgs),
    /// Train both networks jointly on image loss only.
    TrainE2e(TrainArgs),
    /// Train the kernel-size classifier.
    TrainClassifier(TrainArgs),
    /// Deblur one PNG.
    Deblur {
        #[arg(long)]
        analysis: PathBuf,
        #[arg(long)]
        synthesis: PathBuf,
        /// Classifier checkpoint; routes the image to one of three pairs.
        #[arg(long, requires = "pairs")]
        classifier: Option<PathBuf>,
        /// Directory holding class0.dblf, class1.dblf and class2.dblf.
        #[arg(long, requires = "classifier")]
        pairs: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the estimated kernel.
        #[arg(long)]
        kernel_out: Option<PathBuf>,
    },
    /// Score a dataset written by gen-dataset.
    Evaluate {
        #[arg(long)]
        analysis: PathBuf,
        #[arg(long)]
        synthesis: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Write the deblurred images here.
        #[arg(long)]
        images_out: Option<PathBuf>,
    },
    /// Train the synthesis network under each guidance mode and compare.
    Ablate {
        #[arg(long, default_value = "toy")]
        config: String,
        /// Sharp PNG directory; procedural scenes when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated subset of none,additive,multiplicative,both.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// One of tensor, xcorr, analysis, synthesis, train.
        #[arg(long)]
        module: Option<String>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "toy")]
    config: String,
    /// Sharp PNG directory; procedural scenes when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Start from these checkpoints (repeatable).
    #[arg(long)]
    resume: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Loss log path (default: OUT with `.loss.txt` appended).
    #[arg(long)]
    log: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenKernels { config, count, seed, out } => gen_kernels(&config, count, seed, &out),
        Command::GenDataset { images, config, count, seed, out } => {
            gen_dataset(images.as_deref(), &config, count, seed, &out)
        }
        Command::PretrainAnalysis(a) => train_command(Stage::PretrainAnalysis, a),
        Command::PretrainSynthesis(a) => train_command(Stage::PretrainSynthesis, a),
        Command::TrainE2e(a) => train_command(Stage::E2e, a),
        Command::TrainClassifier(a) => train_command(Stage::Classifier, a),
        Command::Deblur { analysis, synthesis, classifier, pairs, input, out, kernel_out } => deblur(
            &analysis,
            &synthesis,
            classifier.as_deref().zip(pairs.as_deref()),
            &input,
            &out,
            kernel_out.as_deref(),
        ),
        Command::Evaluate { analysis, synthesis, data, report, images_out } => {
            evaluate(&analysis, &synthesis, &data, &report, images_out.as_deref())
        }
        Command::Ablate { config, data, modes, out } => ablate(&config, data.as_deref(), modes.as_deref(), &out),
        Command::Gradcheck { module } => gradcheck(module.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", path.display())))
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is not a directory", path.display())))
    }
}

fn gen_kernels(config: &str, count: usize, seed: u64, out: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(config)?;
    cfg.validate()?;
    create_dir(out)?;
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(data::derive_seed(seed, 0, i as u64));
        let k = blur::sample_kernel(&mut rng, &cfg.sample.trajectory)?;
        k.save(&out.join(format!("{i:05}.bkrn")))?;
    }
    log::info!("wrote {count} kernels to {}", out.display());
    Ok(())
}

fn source_for(cfg: &RunConfig, dir: Option<&Path>) -> Result<Box<dyn SampleSource>> {
    Ok(match dir {
        Some(dir) => {
            require_dir(dir)?;
            let pool = ImagePool::from_dir(dir, cfg.sample.clone())?;
            log::info!("{} sharp images from {}", pool.len(), dir.display());
            Box::new(pool)
        }
        None => {
            log::info!("using procedural scenes");
            Box::new(ProceduralSource::new(cfg.sample.clone()))
        }
    })
}

fn gen_dataset(images: Option<&Path>, config: &str, count: usize, seed: u64, out: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(config)?;
    cfg.validate()?;
    let source = source_for(&cfg, images)?;
    create_dir(out)?;
    let mut manifest = Vec::with_capacity(count);
    for i in 0..count {
        let s = source.sample(data::derive_seed(seed, 0, i as u64))?;
        let stem = format!("{i:05}");
        data::write_image(&out.join(format!("{stem}_sharp.png")), &s.sharp)?;
        data::write_image(&out.join(format!("{stem}_blurred.png")), &s.blurred)?;
        s.kernel.save(&out.join(format!("{stem}.bkrn")))?;
        manifest.push(format!("{stem}_sharp.png"));
    }
    data::write_manifest(out, &manifest)?;
    log::info!("wrote {count} pairs to {}", out.display());
    Ok(())
}

fn train_command(stage: Stage, args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(it) = args.iterations {
        cfg.train.iterations = it;
    }
    cfg.validate()?;
    for p in &args.resume {
        require_file(p)?;
    }
    let resumed = args.resume.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    let source = source_for(&cfg, args.data.as_deref())?;
    let plan = cfg.plan(stage);
    let mut rng = ChaCha8Rng::seed_from_u64(data::derive_seed(plan.seed, u64::MAX - 1, 0));
    let (mut models, random_init) = train::prepare_models(stage, &cfg, &resumed, &mut rng)?;
    if random_init {
        log::warn!("flag: e2e from random initialization (no --resume given)");
    }
    let log_path = args.log.unwrap_or_else(|| {
        let mut s = args.out.clone().into_os_string();
        s.push(".loss.txt");
        PathBuf::from(s)
    });
    let log_file = File::create(&log_path).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
    let mut log_writer = BufWriter::new(log_file);
    let out = args.out.clone();
    let cfg_ck = cfg.clone();
    let mut save = |it: usize, m: &Models| -> Result<()> {
        m.to_checkpoint(&cfg_ck).save(&out)?;
        log::info!("iteration {it}: checkpoint {}", out.display());
        Ok(())
    };
    log::info!("{stage}: {} iterations, batch {}, lr {:e}", plan.iterations, plan.batch_size, plan.lr);
    let report = train::run_stage(
        &plan,
        source.as_ref(),
        &mut models,
        &mut StageIo {
            log: Some(&mut log_writer),
            checkpoint: Some(&mut save),
        },
    )?;
    log_writer.flush().map_err(|e| Error::Io { path: log_path, source: e })?;
    if plan.iterations == 0 {
        models.to_checkpoint(&cfg).save(&args.out)?;
    }
    if let Some(last) = report.losses.last() {
        log::info!("{stage} finished: final loss {last:.6}, lr {:.3e}", report.final_lr);
    }
    Ok(())
}

/// Load a network pair; both paths may name the same checkpoint.
fn load_pair(analysis: &Path, synthesis: &Path) -> Result<(AnalysisNet, SynthesisNet)> {
    require_file(analysis)?;
    require_file(synthesis)?;
    let ak = Checkpoint::load(analysis)?;
    let sk = Checkpoint::load(synthesis)?;
    let acfg = RunConfig::parse(&ak.config)?;
    let scfg = RunConfig::parse(&sk.config)?;
    let a = Models::from_checkpoint(&ak, &acfg)?
        .analysis
        .ok_or_else(|| Error::Config(format!("{} holds no analysis network", analysis.display())))?;
    let s = Models::from_checkpoint(&sk, &scfg)?
        .synthesis
        .ok_or_else(|| Error::Config(format!("{} holds no synthesis network", synthesis.display())))?;
    if a.config().m != s.config().m {
        return Err(Error::Config("analysis and synthesis checkpoints use different kernel sizes".into()));
    }
    Ok((a, s))
}

fn deblur(
    analysis: &Path,
    synthesis: &Path,
    routing: Option<(&Path, &Path)>,
    input: &Path,
    out: &Path,
    kernel_out: Option<&Path>,
) -> Result<()> {
    require_file(input)?;
    let blurred = data::read_image(input)?;
    let result = match routing {
        None => {
            let (a, s) = load_pair(analysis, synthesis)?;
            pipeline::deblur(&a, &s, &blurred)?
        }
        Some((classifier, pairs)) => {
            require_file(classifier)?;
            require_dir(pairs)?;
            let ck = Checkpoint::load(classifier)?;
            let cfg = RunConfig::parse(&ck.config)?;
            let net = ClassifierNet::from_params(&cfg.analysis, ck.network("classifier"))?;
            let pair_nets = (0..train::CLASSES)
                .map(|c| {
                    let p = pairs.join(format!("class{c}.dblf"));
                    load_pair(&p, &p)
                })
                .collect::<Result<Vec<_>>>()?;
            let (class, result) = ScaleOptimized::new(net, pair_nets)?.deblur(&blurred)?;
            log::info!("kernel size class {class}");
            result
        }
    };
    data::write_image(out, &result.image.map(|v| v.clamp(0.0, 1.0)))?;
    if let Some(path) = kernel_out {
        let m = result.kernel.shape()[3];
        BlurKernel::from_tensor(&result.kernel, 0).and_then(|k| k.save(path)).inspect_err(|_e| {
            log::error!("kernel of size {m} could not be written");
        })?;
    }
    log::info!("wrote {}", out.display());
    Ok(())
}

fn evaluate(analysis: &Path, synthesis: &Path, data: &Path, report: &Path, images_out: Option<&Path>) -> Result<()> {
    require_dir(data)?;
    let (a, s) = load_pair(analysis, synthesis)?;
    let rep = metrics::evaluate_set(&a, &s, data, Some(report), images_out)?;
    log::info!(
        "{} images: mean PSNR {:.3} dB, mean SSIM {:.4} ({:.1}s, fingerprint {})",
        rep.rows.len(),
        rep.mean_psnr,
        rep.mean_mssim,
        rep.runtime_secs,
        rep.fingerprint
    );
    Ok(())
}

fn ablate(config: &str, data: Option<&Path>, modes: Option<&str>, out: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(config)?;
    cfg.validate()?;
    let modes: Vec<GuidanceMode> = match modes {
        None => GuidanceMode::ALL.to_vec(),
        Some(list) => list.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?,
    };
    let source = source_for(&cfg, data)?;
    let rows = metrics::ablation_run(&modes, &cfg, source.as_ref())?;
    std::fs::write(out, metrics::ablation_csv(&rows)).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    for r in &rows {
        log::info!("{:>14}: {:.3} dB", r.mode.as_str(), r.mean_psnr);
    }
    Ok(())
}

fn gradcheck(module: Option<&str>) -> Result<()> {
    if let Some(m) = module {
        if !gradsuite::MODULES.contains(&m) {
            return Err(Error::Usage(format!(
                "unknown module {m:?}; expected one of {}",
                gradsuite::MODULES.join(", ")
            )));
        }
    }
    let results = gradsuite::run(module)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        log::info!("{status:>4}  {:<10} {:<36} {:.3e}", r.module, r.name, r.max_rel_error);
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Training(format!("{failed} of {} gradient checks failed", results.len())));
    }
    log::info!("all {} gradient checks passed", results.len());
    Ok(())
}
