//! Finite-difference checks of every differentiable operation and of the
//! toy networks, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analysis::{AnalysisConfig, AnalysisNet};
use crate::error::Result;
use crate::params::{Bound, ParamSet};
use crate::synthesis::{GuidingUnit, SynthesisConfig, SynthesisNet};
use crate::tensor::{grad_check_with, GradCheckOptions, GuidanceMode, Tape, Tensor, Var};
use crate::train::{cross_entropy3, l1_kernel_loss, l2_image_loss};
use crate::xcorr::{CorrelationSpec, PairMode};

/// Largest relative error accepted by [`run`].
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub const MODULES: [&str; 5] = ["tensor", "xcorr", "analysis", "synthesis", "train"];

fn normal(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Values bounded away from zero, for ReLU-like kinks.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen() {
            v
        } else {
            -v
        }
    })
}

/// Contract `y` with a fixed random tensor so every output gets a distinct
/// upstream gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let r = tape.constant(normal(&shape, 1.0, &mut rng));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-6,
        max_coords: 24,
        seed,
    }
}

type Check = (&'static str, String, Box<dyn Fn() -> Result<f64>>);

fn op_checks() -> Vec<Check> {
    let mut out: Vec<Check> = Vec::new();
    for (stride, pad) in [(1usize, 1usize), (2, 0), (1, 2)] {
        out.push((
            "tensor",
            format!("conv2d stride {stride} pad {pad}"),
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(11 + stride as u64);
                let x = normal(&[2, 3, 7, 6], 1.0, &mut rng);
                let w = normal(&[4, 3, 3, 3], 0.5, &mut rng);
                let b = normal(&[4], 0.5, &mut rng);
                grad_check_with(
                    |t, v| {
                        let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                        project(t, y, 1)
                    },
                    &[x, w, b],
                    opts(1),
                )
            }),
        ));
    }
    out.push((
        "tensor",
        "maxpool2".into(),
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x = normal(&[2, 2, 6, 8], 1.0, &mut rng);
            grad_check_with(
                |t, v| {
                    let y = t.maxpool2(v[0])?;
                    project(t, y, 2)
                },
                &[x],
                opts(2),
            )
        }),
    ));
    out.push((
        "tensor",
        "upsample2".into(),
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = normal(&[2, 2, 3, 4], 1.0, &mut rng);
            grad_check_with(
                |t, v| {
                    let y = t.upsample2(v[0])?;
                    project(t, y, 3)
                },
                &[x],
                opts(3),
            )
        }),
    ));
    out.push((
        "tensor",
        "relu".into(),
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let x = off_zero(&[3, 5, 4], &mut rng);
            grad_check_with(
                |t, v| {
                    let y = t.relu(v[0]);
                    project(t, y, 4)
                },
                &[x],
                opts(4),
            )
        }),
    ));
    out.push((
        "tensor",
        "linear".into(),
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = normal(&[3, 6], 1.0, &mut rng);
            let w = normal(&[4, 6], 0.5, &mut rng);
            let b = normal(&[4], 0.5, &mut rng);
            grad_check_with(
                |t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    project(t, y, 5)
                },
                &[x, w, b],
                opts(5),
            )
        }),
    ));
    out.push((
        "tensor",
        "concat_channels".into(),
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let a = normal(&[2, 2, 3, 3], 1.0, &mut rng);
            let b = normal(&[2, 3, 3, 3], 1.0, &mut rng);
            grad_check_with(
                |t, v| {
                    let y = t.concat_channels(v[0], v[1])?;
                    project(t, y, 6)
                },
                &[a, b],
                opts(6),
            )
        }),
    ));
    out.push((
        "tensor",
        "fit_window".into(),
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x = normal(&[1, 2, 6, 6], 1.0, &mut rng);
            grad_check_with(
                |t, v| {
                    let y = t.fit_window(v[0], 5, 5, (1, -1))?;
                    project(t, y, 7)
                },
                &[x],
                opts(7),
            )
        }),
    ));
    out.push((
        "tensor",
        "normalize_kernel".into(),
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let x = off_zero(&[2, 1, 5, 5], &mut rng);
            grad_check_with(
                |t, v| {
                    let y = t.normalize_kernel(v[0], 1e-8)?;
                    project(t, y, 8)
                },
                &[x],
                opts(8),
            )
        }),
    ));
    for mode in [PairMode::Unordered, PairMode::OrderedOffDiagonal, PairMode::Ordered] {
        out.push((
            "xcorr",
            format!("cross_correlate {mode}"),
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let x = normal(&[2, 3, 6, 5], 1.0, &mut rng);
                grad_check_with(
                    |t, v| {
                        let y = t.cross_correlate(v[0], CorrelationSpec::new(2, 3, mode))?;
                        project(t, y, 9)
                    },
                    &[x],
                    opts(9),
                )
            }),
        ));
    }
    out.push((
        "synthesis",
        "guiding_unit_forward".into(),
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let unit: GuidingUnit<f64> = GuidingUnit::build(9, 6, 4, false, &mut rng)?;
            let k = Tensor::from_fn([2, 9], |i| 0.05 + (i % 7) as f64 * 0.03);
            let names: Vec<String> = unit.params().names().map(String::from).collect();
            let mut inputs = vec![k];
            inputs.extend(unit.params().iter().map(|(_, t)| t.clone()));
            grad_check_with(
                |t, v| {
                    let bound = Bound::from_vars(names.clone(), v[1..].iter().copied());
                    let (m, b) = unit.forward(t, &bound, v[0])?;
                    let pm = project(t, m, 10)?;
                    let pb = project(t, b, 11)?;
                    t.add(pm, pb)
                },
                &inputs,
                opts(10),
            )
        }),
    ));
    for mode in GuidanceMode::ALL {
        out.push((
            "synthesis",
            format!("guided_modulation {mode}"),
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(12);
                let r = normal(&[2, 3, 4, 4], 1.0, &mut rng);
                let m = normal(&[2, 3], 0.5, &mut rng);
                let b = normal(&[2, 3], 0.5, &mut rng);
                grad_check_with(
                    |t, v| {
                        let y = t.guided_modulation(v[0], v[1], v[2], mode)?;
                        project(t, y, 12)
                    },
                    &[r, m, b],
                    opts(12),
                )
            }),
        ));
    }
    out.push((
        "train",
        "l1_kernel_loss".into(),
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let a = off_zero(&[2, 1, 3, 3], &mut rng);
            let b = Tensor::zeros([2, 1, 3, 3]);
            grad_check_with(|t, v| l1_kernel_loss(t, v[0], v[1]), &[a, b], opts(13))
        }),
    ));
    out.push((
        "train",
        "l2_image_loss".into(),
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let a = normal(&[2, 3, 4, 4], 1.0, &mut rng);
            let b = normal(&[2, 3, 4, 4], 1.0, &mut rng);
            grad_check_with(|t, v| l2_image_loss(t, v[0], v[1]), &[a, b], opts(14))
        }),
    ));
    out.push((
        "train",
        "cross_entropy3".into(),
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let logits = normal(&[4, 3], 2.0, &mut rng);
            grad_check_with(|t, v| cross_entropy3(t, v[0], &[0, 2, 1, 2]), &[logits], opts(15))
        }),
    ));
    out
}

/// Inputs `[x, params...]` for a network check and the matching names.
fn with_params(x: Vec<Tensor<f64>>, ps: &ParamSet<f64>) -> (Vec<Tensor<f64>>, Vec<String>) {
    let names = ps.names().map(String::from).collect();
    let mut inputs = x;
    inputs.extend(ps.iter().map(|(_, t)| t.clone()));
    (inputs, names)
}

// Kernel entries are O(1/m²), so raw gradients are tiny next to the unit
// floor of the error measure; scaling the objective brings them to O(1).
const ANALYSIS_LOSS_SCALE: f64 = 1e5;
const SYNTHESIS_LOSS_SCALE: f64 = 1e2;

fn net_opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-6,
        max_coords: 6,
        seed,
    }
}

fn network_checks() -> Vec<Check> {
    let mut out: Vec<Check> = Vec::new();
    out.push((
        "analysis",
        "toy analysis forward".into(),
        Box::new(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(20);
            let net: AnalysisNet<f64> = AnalysisNet::build(AnalysisConfig::toy(), &mut rng)?;
            let y = normal(&[1, 1, 16, 16], 1.0, &mut rng);
            let target = Tensor::from_fn([1, 1, 17, 17], |i| if i == 144 { 1.0 } else { 0.0 });
            let (inputs, names) = with_params(vec![y], net.params());
            grad_check_with(
                |t, v| {
                    let bound = Bound::from_vars(names.clone(), v[1..].iter().copied());
                    let est = net.forward(t, &bound, v[0])?;
                    let k = t.constant(target.clone());
                    let loss = l2_image_loss(t, est.kernel, k)?;
                    Ok(t.scale(loss, ANALYSIS_LOSS_SCALE))
                },
                &inputs,
                net_opts(20),
            )
        }),
    ));
    let synth = |name: &'static str, wrt_kernel_only: bool| -> Check {
        (
            "synthesis",
            name.into(),
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(21);
                let mut net: SynthesisNet<f64> = SynthesisNet::build(SynthesisConfig::toy(), &mut rng)?;
                // leave the zero-initialized guide heads: give them weights so every path is exercised
                for (name, t) in net.params_mut().iter_mut() {
                    if name.contains("fc2") {
                        *t = normal(t.shape(), 0.3, &mut rng);
                    }
                }
                let b = Tensor::from_fn([1, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
                let k = Tensor::from_fn([1, 1, 17, 17], |_| rng.gen_range(0.0..1.0) / 144.5);
                let sharp = Tensor::from_fn([1, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
                if wrt_kernel_only {
                    let frozen = net.params().clone();
                    return grad_check_with(
                        |t, v| {
                            let bound = frozen.bind_frozen(t);
                            let blurry = t.constant(b.clone());
                            let out = net.forward(t, &bound, blurry, v[0])?;
                            let target = t.constant(sharp.clone());
                            let loss = l2_image_loss(t, out, target)?;
                            Ok(t.scale(loss, SYNTHESIS_LOSS_SCALE))
                        },
                        &[k],
                        GradCheckOptions {
                            max_coords: 40,
                            ..net_opts(22)
                        },
                    );
                }
                let (inputs, names) = with_params(vec![b, k], net.params());
                grad_check_with(
                    |t, v| {
                        let bound = Bound::from_vars(names.clone(), v[2..].iter().copied());
                        let out = net.forward(t, &bound, v[0], v[1])?;
                        let target = t.constant(sharp.clone());
                        let loss = l2_image_loss(t, out, target)?;
                        Ok(t.scale(loss, SYNTHESIS_LOSS_SCALE))
                    },
                    &inputs,
                    net_opts(21),
                )
            }),
        )
    };
    out.push(synth("toy synthesis forward", false));
    out.push(synth("toy synthesis, kernel path", true));
    out
}

/// Run every check whose module matches `module` (all when `None`).
pub fn run(module: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (m, name, check) in op_checks().into_iter().chain(network_checks()) {
        if module.is_some_and(|want| want != m) {
            continue;
        }
        let err = check()?;
        out.push(CheckResult {
            module: m,
            name,
            max_rel_error: err,
        });
    }
    Ok(out)
}
