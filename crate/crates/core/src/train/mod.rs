//! Losses, optimization and the staged training procedure.
//!
//! Stages:
//! - `pretrain-analysis`: L1 between estimated and true kernels;
//! - `pretrain-synthesis`: L2 between the synthesized and sharp images,
//!   with the true kernels fed to the guiding units;
//! - `e2e`: both networks jointly, L2 image loss only;
//! - `classifier`: cross entropy over the three kernel-size classes.

mod classifier;
mod optim;

use std::io::Write;

use indexmap::IndexMap;
use rand::Rng;

pub use classifier::{argmax_class, classify_kernel_size, ClassifierNet, CLASSES};
pub use optim::{lr_schedule_update, plateau_reductions, AdamState, PlateauConfig};

use crate::analysis::AnalysisNet;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{make_batch, Batch, SampleSource};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::synthesis::SynthesisNet;
use crate::tensor::{Tape, Tensor, Var};

/// Mean absolute difference over the kernel grid cells.
pub fn l1_kernel_loss<T: crate::tensor::Scalar>(tape: &mut Tape<T>, k_hat: Var, k_true: Var) -> Result<Var> {
    tape.l1_loss(k_hat, k_true)
}

/// Mean squared difference over all pixels and channels.
pub fn l2_image_loss<T: crate::tensor::Scalar>(tape: &mut Tape<T>, image: Var, target: Var) -> Result<Var> {
    tape.mse_loss(image, target)
}

/// Softmax cross entropy over N×3 logits, averaged over the batch.
pub fn cross_entropy3<T: crate::tensor::Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape();
    if shape.len() != 2 || shape[1] != CLASSES {
        return Err(Error::shape("cross_entropy3", format!("expected N×3 logits, got {shape:?}")));
    }
    tape.cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    PretrainAnalysis,
    PretrainSynthesis,
    E2e,
    Classifier,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainAnalysis => "pretrain-analysis",
            Stage::PretrainSynthesis => "pretrain-synthesis",
            Stage::E2e => "e2e",
            Stage::Classifier => "classifier",
        }
    }

    pub fn networks(self) -> &'static [Net] {
        match self {
            Stage::PretrainAnalysis => &[Net::Analysis],
            Stage::PretrainSynthesis => &[Net::Synthesis],
            Stage::E2e => &[Net::Analysis, Net::Synthesis],
            Stage::Classifier => &[Net::Classifier],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain-analysis" => Ok(Stage::PretrainAnalysis),
            "pretrain-synthesis" => Ok(Stage::PretrainSynthesis),
            "e2e" => Ok(Stage::E2e),
            "classifier" => Ok(Stage::Classifier),
            other => Err(Error::Config(format!("unknown training stage {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Net {
    Analysis,
    Synthesis,
    Classifier,
}

impl Net {
    /// Parameter-name prefix inside checkpoints.
    pub fn prefix(self) -> &'static str {
        match self {
            Net::Analysis => "analysis",
            Net::Synthesis => "synthesis",
            Net::Classifier => "classifier",
        }
    }
}

/// Optimizer and schedule settings of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub stage: Stage,
    pub lr: f64,
    pub lr_decay: f64,
    /// Stagnant epochs before a reduction; also the cooldown between reductions.
    pub plateau_epochs: usize,
    /// Minimum relative improvement that does not count as stagnation.
    pub stagnation: f64,
    /// Iterations per schedule epoch.
    pub epoch_iterations: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

impl TrainPlan {
    pub fn paper(stage: Stage) -> Self {
        TrainPlan {
            stage,
            lr: 1e-4,
            lr_decay: 0.8,
            plateau_epochs: 5,
            stagnation: 1e-3,
            epoch_iterations: 5000,
            batch_size: 4,
            iterations: 1_000_000,
            seed: 0,
            checkpoint_every: 10_000,
        }
    }

    pub fn toy(stage: Stage) -> Self {
        TrainPlan {
            lr: 1e-3,
            epoch_iterations: 500,
            iterations: 2000,
            checkpoint_every: 500,
            ..Self::paper(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1), got {}", self.lr_decay)));
        }
        if self.batch_size == 0 || self.epoch_iterations == 0 || self.plateau_epochs == 0 {
            return Err(Error::Config(
                "batch_size, epoch_iterations and plateau_epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            patience: self.plateau_epochs,
            factor: self.lr_decay,
            threshold: self.stagnation,
            cooldown: self.plateau_epochs,
        }
    }
}

/// The networks a training run works on; absent ones are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Models {
    pub analysis: Option<AnalysisNet>,
    pub synthesis: Option<SynthesisNet>,
    pub classifier: Option<ClassifierNet>,
}

impl Models {
    pub fn has(&self, net: Net) -> bool {
        match net {
            Net::Analysis => self.analysis.is_some(),
            Net::Synthesis => self.synthesis.is_some(),
            Net::Classifier => self.classifier.is_some(),
        }
    }

    fn params_of(&self, net: Net) -> Option<&ParamSet<f32>> {
        match net {
            Net::Analysis => self.analysis.as_ref().map(AnalysisNet::params),
            Net::Synthesis => self.synthesis.as_ref().map(SynthesisNet::params),
            Net::Classifier => self.classifier.as_ref().map(ClassifierNet::params),
        }
    }

    fn params_of_mut(&mut self, net: Net) -> Option<&mut ParamSet<f32>> {
        match net {
            Net::Analysis => self.analysis.as_mut().map(AnalysisNet::params_mut),
            Net::Synthesis => self.synthesis.as_mut().map(SynthesisNet::params_mut),
            Net::Classifier => self.classifier.as_mut().map(ClassifierNet::params_mut),
        }
    }

    /// All present networks' parameters under their checkpoint prefixes.
    pub fn to_params(&self) -> ParamSet<f32> {
        let mut out = ParamSet::new();
        for net in [Net::Analysis, Net::Synthesis, Net::Classifier] {
            if let Some(ps) = self.params_of(net) {
                out.extend(ps.prefixed(net.prefix())).expect("prefixes are distinct");
            }
        }
        out
    }

    pub fn to_checkpoint(&self, config: &RunConfig) -> Checkpoint {
        Checkpoint::new(config.to_text(), self.to_params())
    }

    /// Networks found in a checkpoint, built with the architectures of `config`.
    pub fn from_checkpoint(ck: &Checkpoint, config: &RunConfig) -> Result<Self> {
        let mut out = Models::default();
        if ck.has_network(Net::Analysis.prefix()) {
            out.analysis = Some(AnalysisNet::from_params(config.analysis.clone(), ck.network("analysis"))?);
        }
        if ck.has_network(Net::Synthesis.prefix()) {
            out.synthesis = Some(SynthesisNet::from_params(config.synthesis.clone(), ck.network("synthesis"))?);
        }
        if ck.has_network(Net::Classifier.prefix()) {
            out.classifier = Some(ClassifierNet::from_params(&config.analysis, ck.network("classifier"))?);
        }
        Ok(out)
    }

    /// Add a freshly initialized network.
    pub fn build(&mut self, net: Net, config: &RunConfig, rng: &mut impl Rng) -> Result<()> {
        match net {
            Net::Analysis => self.analysis = Some(AnalysisNet::build(config.analysis.clone(), rng)?),
            Net::Synthesis => self.synthesis = Some(SynthesisNet::build(config.synthesis.clone(), rng)?),
            Net::Classifier => self.classifier = Some(ClassifierNet::build(&config.analysis, rng)?),
        }
        Ok(())
    }
}

/// Networks for `stage`: the merged `resumed` checkpoints, with any network
/// the stage needs and they lack built from `rng`.
///
/// For `e2e`, resumed checkpoints must supply both networks. Without any
/// checkpoint `e2e` starts from random initialization, reported by the
/// returned flag.
pub fn prepare_models(
    stage: Stage,
    config: &RunConfig,
    resumed: &[Checkpoint],
    rng: &mut impl Rng,
) -> Result<(Models, bool)> {
    let mut params = ParamSet::new();
    for ck in resumed {
        params.extend(ck.params.clone()).map_err(|e| Error::Config(format!("resumed checkpoints overlap: {e}")))?;
    }
    let merged = Checkpoint::new(String::new(), params);
    let mut models = Models::from_checkpoint(&merged, config)?;
    let mut random_init = false;
    for &net in stage.networks() {
        if models.has(net) {
            continue;
        }
        if stage == Stage::E2e {
            if !resumed.is_empty() {
                return Err(Error::Config(format!(
                    "e2e resume: no {} network in the given checkpoints",
                    net.prefix()
                )));
            }
            random_init = true;
        }
        models.build(net, config, rng)?;
    }
    if random_init {
        log::warn!("e2e training starts from random initialization");
    }
    Ok((models, random_init))
}

/// Loss value and per-network parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub loss: f64,
    pub grads: Vec<(Net, IndexMap<String, Tensor<f32>>)>,
}

fn missing(net: Net) -> Error {
    Error::Usage(format!("stage needs the {} network", net.prefix()))
}

/// Record the stage loss for `batch`, with the stage's networks trainable.
pub fn stage_step(stage: Stage, models: &Models, batch: &Batch) -> Result<StepResult> {
    let mut tape = Tape::new();
    let mut bounds = Vec::new();
    for &net in stage.networks() {
        let ps = models.params_of(net).ok_or_else(|| missing(net))?;
        bounds.push((net, ps.bind(&mut tape)));
    }
    let bound = |net: Net| &bounds.iter().find(|(n, _)| *n == net).expect("bound above").1;
    let loss = match stage {
        Stage::PretrainAnalysis => {
            let a = models.analysis.as_ref().ok_or_else(|| missing(Net::Analysis))?;
            let y = tape.constant(batch.y_norm.clone());
            let est = a.forward(&mut tape, bound(Net::Analysis), y)?;
            let truth = tape.constant(batch.kernels.clone());
            l1_kernel_loss(&mut tape, est.kernel, truth)?
        }
        Stage::PretrainSynthesis => {
            let s = models.synthesis.as_ref().ok_or_else(|| missing(Net::Synthesis))?;
            let b = tape.constant(batch.blurred.clone());
            let k = tape.constant(batch.kernels.clone());
            let out = s.forward(&mut tape, bound(Net::Synthesis), b, k)?;
            let target = tape.constant(batch.sharp.clone());
            l2_image_loss(&mut tape, out, target)?
        }
        Stage::E2e => {
            let a = models.analysis.as_ref().ok_or_else(|| missing(Net::Analysis))?;
            let s = models.synthesis.as_ref().ok_or_else(|| missing(Net::Synthesis))?;
            let y = tape.constant(batch.y_norm.clone());
            let est = a.forward(&mut tape, bound(Net::Analysis), y)?;
            let b = tape.constant(batch.blurred.clone());
            let out = s.forward(&mut tape, bound(Net::Synthesis), b, est.kernel)?;
            let target = tape.constant(batch.sharp.clone());
            l2_image_loss(&mut tape, out, target)?
        }
        Stage::Classifier => {
            let c = models.classifier.as_ref().ok_or_else(|| missing(Net::Classifier))?;
            let y = tape.constant(batch.y_norm.clone());
            let logits = c.forward(&mut tape, bound(Net::Classifier), y)?;
            cross_entropy3(&mut tape, logits, &batch.classes)?
        }
    };
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    Ok(StepResult {
        loss: value,
        grads: bounds.iter().map(|(net, b)| (*net, b.gradients(&grads))).collect(),
    })
}

/// Receives the iteration count and the networks at checkpoint time.
pub type CheckpointFn<'a> = dyn FnMut(usize, &Models) -> Result<()> + 'a;

/// Where a stage reports progress.
#[derive(Default)]
pub struct StageIo<'a> {
    /// Receives one `iter loss lr` line per iteration, counted from 1.
    pub log: Option<&'a mut dyn Write>,
    /// Called every `checkpoint_every` iterations and after the last one.
    pub checkpoint: Option<&'a mut CheckpointFn<'a>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub final_lr: f64,
}

/// Train the stage's networks in place on batches drawn from `source`.
pub fn run_stage(plan: &TrainPlan, source: &dyn SampleSource, models: &mut Models, io: &mut StageIo) -> Result<StageReport> {
    plan.validate()?;
    let nets = plan.stage.networks();
    let mut optim: Vec<(Net, AdamState)> = nets.iter().map(|&n| (n, AdamState::new())).collect();
    let schedule = plan.plateau();
    let mut lr = plan.lr;
    let mut losses = Vec::with_capacity(plan.iterations);
    let mut epoch_losses = Vec::new();
    for it in 0..plan.iterations {
        let batch = make_batch(source, plan.seed, it as u64, plan.batch_size)?;
        let step = stage_step(plan.stage, models, &batch)?;
        if !step.loss.is_finite() {
            return Err(Error::Training(format!("{} loss became {} at iteration {it}", plan.stage, step.loss)));
        }
        for (net, grads) in &step.grads {
            let state = &mut optim.iter_mut().find(|(n, _)| n == net).expect("one state per network").1;
            let ps = models.params_of_mut(*net).ok_or_else(|| missing(*net))?;
            state
                .step(ps, grads, lr)
                .map_err(|e| Error::Training(format!("{} iteration {it}: {e}", plan.stage)))?;
        }
        if let Some(log) = io.log.as_deref_mut() {
            writeln!(log, "{} {:.6e} {lr:.6e}", it + 1, step.loss).map_err(|e| Error::Training(format!("loss log: {e}")))?;
        }
        losses.push(step.loss);
        if (it + 1) % plan.epoch_iterations == 0 {
            let epoch = &losses[it + 1 - plan.epoch_iterations..];
            epoch_losses.push(epoch.iter().sum::<f64>() / epoch.len() as f64);
            let next = lr_schedule_update(&epoch_losses, lr, &schedule);
            if next != lr {
                log::info!("{}: epoch {} stagnated, lr {lr:.3e} -> {next:.3e}", plan.stage, epoch_losses.len());
            }
            lr = next;
        }
        let last = it + 1 == plan.iterations;
        if let Some(cb) = io.checkpoint.as_deref_mut() {
            if last || (plan.checkpoint_every > 0 && (it + 1) % plan.checkpoint_every == 0) {
                cb(it + 1, models)?;
            }
        }
        if (it + 1) % 100 == 0 || last {
            log::debug!("{} iteration {} loss {:.5}", plan.stage, it + 1, step.loss);
        }
    }
    Ok(StageReport {
        losses,
        epoch_losses,
        final_lr: lr,
    })
}

/// Mean stage loss over batches drawn with `seed` (no parameter updates).
pub fn mean_stage_loss(stage: Stage, models: &Models, source: &dyn SampleSource, seed: u64, batches: usize, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..batches {
        let batch = make_batch(source, seed, i as u64, batch_size)?;
        total += stage_step(stage, models, &batch)?.loss;
    }
    Ok(total / batches.max(1) as f64)
}
