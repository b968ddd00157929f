//! Reverse-mode tape: every op appends a node holding its value and the
//! context its backward rule needs. Nodes are only ever appended, so the
//! node order is a topological order and one reverse sweep visits each
//! node once.

use super::conv::{self, ConvAlgo};
use super::ops::{self, GuidanceMode, PoolIndices};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::xcorr::{self, CorrelationSpec};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        algo: ConvAlgo,
    },
    MaxPool2 {
        input: Var,
        argmax: PoolIndices,
    },
    Upsample2 {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Correlate {
        input: Var,
        spec: CorrelationSpec,
    },
    Modulate {
        input: Var,
        mult: Option<Var>,
        shift: Option<Var>,
    },
    NormalizeKernel {
        input: Var,
        masses: Vec<T>,
        degenerate: Vec<bool>,
    },
    Fit {
        input: Var,
        offset: (isize, isize),
    },
    Reshape {
        input: Var,
    },
    Columns {
        input: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    L1 {
        a: Var,
        b: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    conv_algo: ConvAlgo,
}

/// Gradients of a scalar with respect to the tape's trainable leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::param`], or `None` when the
    /// loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            conv_algo: ConvAlgo::default(),
        }
    }

    pub fn with_conv_algo(conv_algo: ConvAlgo) -> Self {
        Tape {
            nodes: Vec::new(),
            conv_algo,
        }
    }

    pub fn conv_algo(&self) -> ConvAlgo {
        self.conv_algo
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant input (no gradient is tracked).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a trainable leaf whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Degeneracy flags recorded by [`Tape::normalize_kernel`], if `var` is one.
    pub fn kernel_degenerate_flags(&self, var: Var) -> Option<&[bool]> {
        match &self.nodes[var.0].op {
            Op::NormalizeKernel { degenerate, .. } => Some(degenerate),
            _ => None,
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let algo = self.conv_algo;
        let out = conv::forward(algo, self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                algo,
            },
            &[input, weight, bias],
        ))
    }

    /// Convolution with zero "same" padding, `(K − 1)/2`, at stride 1.
    pub fn conv2d_same(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let k = self.value(weight).shape().get(2).copied().unwrap_or(1);
        self.conv2d(input, weight, bias, 1, k / 2)
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2_forward(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, &[input]))
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let out = ops::upsample2_forward(self.value(input))?;
        Ok(self.push(out, Op::Upsample2 { input }, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu { input }, &[input])
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_forward(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    pub fn cross_correlate(&mut self, input: Var, spec: CorrelationSpec) -> Result<Var> {
        let out = xcorr::correlate_forward(self.value(input), &spec)?;
        Ok(self.push(out, Op::Correlate { input, spec }, &[input]))
    }

    /// Kernel-guided modulation `r·(1+m) + b`. The terms `mode` disables are
    /// treated as zero; [`GuidanceMode::None`] returns `r` unchanged.
    pub fn guided_modulation(&mut self, r: Var, mult: Var, shift: Var, mode: GuidanceMode) -> Result<Var> {
        let mult = mode.uses_multiplier().then_some(mult);
        let shift = mode.uses_bias().then_some(shift);
        if mult.is_none() && shift.is_none() {
            // validate shapes anyway so a misconfigured unit is caught early
            ops::modulate_forward(self.value(r), None, None)?;
            return Ok(r);
        }
        self.modulate(r, mult, shift)
    }

    /// Per-channel affine modulation with optional terms.
    pub fn modulate(&mut self, r: Var, mult: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let out = ops::modulate_forward(
            self.value(r),
            mult.map(|m| self.value(m)),
            shift.map(|b| self.value(b)),
        )?;
        let mut inputs = vec![r];
        inputs.extend(mult);
        inputs.extend(shift);
        Ok(self.push(out, Op::Modulate { input: r, mult, shift }, &inputs))
    }

    /// Clamp negatives and rescale every sample to unit sum; samples with
    /// positive mass below `eps` become a centered delta.
    pub fn normalize_kernel(&mut self, input: Var, eps: T) -> Result<Var> {
        let (out, masses, degenerate) = ops::normalize_kernel_forward(self.value(input), eps)?;
        Ok(self.push(
            out,
            Op::NormalizeKernel {
                input,
                masses,
                degenerate,
            },
            &[input],
        ))
    }

    /// Shift a map into an `h`×`w` window (positive offsets pad, negative crop).
    pub fn fit_window(&mut self, input: Var, h: usize, w: usize, offset: (isize, isize)) -> Result<Var> {
        let out = ops::fit_forward(self.value(input), h, w, offset)?;
        Ok(self.push(out, Op::Fit { input, offset }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { input }, &[input]))
    }

    /// Columns `start..start+len` of an N×D matrix.
    pub fn columns(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let [n, d] = self.value(input).dims2("columns")?;
        if start + len > d {
            return Err(Error::shape("columns", format!("{start}+{len} exceeds width {d}")));
        }
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(n * len);
        for row in src.chunks(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new([n, len], out)?;
        Ok(self.push(out, Op::Columns { input, start }, &[input]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
        .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        self.push(out, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = T::from_usize(self.value(input).len().max(1)).unwrap();
        let s = self.sum(input);
        self.scale(s, T::one() / n)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let total: T = x.data().iter().zip(y.data()).map(|(&p, &q)| (p - q).abs()).sum();
        let out = Tensor::scalar(total / T::from_usize(x.len().max(1)).unwrap());
        Ok(self.push(out, Op::L1 { a, b }, &[a, b]))
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let total: T = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        let out = Tensor::scalar(total / T::from_usize(x.len().max(1)).unwrap());
        Ok(self.push(out, Op::Mse { a, b }, &[a, b]))
    }

    /// Mean softmax cross-entropy of N×K logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Usage(format!("label {bad} out of range for {k} classes")));
        }
        let value = ops::cross_entropy_value(self.value(logits).data(), k, labels);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        // only trainable leaves keep their gradient
        for (id, node) in self.nodes.iter().enumerate() {
            if !(node.needs_grad && matches!(node.op, Op::Leaf)) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, data: Vec<T>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(
                    Tensor::new(self.value(var).shape().to_vec(), data).expect("gradient matches value shape"),
                );
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                algo,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let geom = conv::conv_geometry(x, w, self.value(*bias), *stride, *padding)
                    .expect("geometry validated in forward");
                let cg = conv::backward(*algo, &geom, x.data(), w.data(), gd, self.nodes[input.0].needs_grad);
                if let Some(gx) = cg.input {
                    self.accumulate(grads, *input, gx.into_data());
                }
                self.accumulate(grads, *weight, cg.weight.into_data());
                self.accumulate(grads, *bias, cg.bias.into_data());
            }
            Op::MaxPool2 { input, argmax } => {
                let gx = ops::maxpool2_backward(self.value(*input).len(), argmax, gd);
                self.accumulate(grads, *input, gx);
            }
            Op::Upsample2 { input } => {
                let gx = ops::upsample2_backward(self.value(*input).shape(), gd);
                self.accumulate(grads, *input, gx);
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let gx = x
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, gx);
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let [n, din] = x.dims2("linear").expect("validated");
                let dout = self.value(*bias).len();
                let (gx, gw, gb) = ops::linear_backward(x.data(), self.value(*weight).data(), gd, n, din, dout);
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *weight, gw);
                self.accumulate(grads, *bias, gb);
            }
            Op::Concat { a, b } => {
                let s = self.value(*a).shape();
                let c2 = self.value(*b).shape()[1];
                let (ga, gb) = ops::concat_backward(gd, s[0], s[1], c2, s[2] * s[3]);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Correlate { input, spec } => {
                let gx = xcorr::correlate_backward(self.value(*input), spec, gd);
                self.accumulate(grads, *input, gx);
            }
            Op::Modulate { input, mult, shift } => {
                let mg = ops::modulate_backward(
                    self.value(*input),
                    mult.map(|m| self.value(m)),
                    shift.map(|b| self.value(b)),
                    gd,
                );
                self.accumulate(grads, *input, mg.input);
                if let (Some(m), Some(gm)) = (mult, mg.mult) {
                    self.accumulate(grads, *m, gm);
                }
                if let (Some(b), Some(gb)) = (shift, mg.shift) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::NormalizeKernel {
                input,
                masses,
                degenerate,
            } => {
                let gx = ops::normalize_kernel_backward(
                    self.value(*input).data(),
                    node.value.data(),
                    masses,
                    degenerate,
                    gd,
                );
                self.accumulate(grads, *input, gx);
            }
            Op::Fit { input, offset } => {
                let s = node.value.shape();
                let gx = ops::fit_backward(self.value(*input).shape(), s[2], s[3], *offset, gd);
                self.accumulate(grads, *input, gx);
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, gd.to_vec());
            }
            Op::Columns { input, start } => {
                let d = self.value(*input).shape()[1];
                let len = node.value.shape()[1];
                let mut gx = vec![T::zero(); self.value(*input).len()];
                for (dst, src) in gx.chunks_mut(d).zip(gd.chunks(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, gd.iter().zip(y).map(|(&gv, &q)| gv * q).collect());
                self.accumulate(grads, *b, gd.iter().zip(x).map(|(&gv, &p)| gv * p).collect());
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, gd.iter().map(|&v| v * *factor).collect());
            }
            Op::Sum { input } => {
                self.accumulate(grads, *input, vec![gd[0]; self.value(*input).len()]);
            }
            Op::L1 { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let k = gd[0] / T::from_usize(x.len().max(1)).unwrap();
                let ga: Vec<T> = x
                    .iter()
                    .zip(y)
                    .map(|(&p, &q)| {
                        if p > q {
                            k
                        } else if p < q {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *b, ga.iter().map(|&v| -v).collect());
                self.accumulate(grads, *a, ga);
            }
            Op::Mse { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let k = gd[0] * T::from_f64_lossy(2.0) / T::from_usize(x.len().max(1)).unwrap();
                let ga: Vec<T> = x.iter().zip(y).map(|(&p, &q)| (p - q) * k).collect();
                self.accumulate(grads, *b, ga.iter().map(|&v| -v).collect());
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropy { logits, labels } => {
                let z = self.value(*logits);
                let k = z.shape()[1];
                let mut probs = ops::softmax_rows(z.data(), k);
                let scale = gd[0] / T::from_usize(labels.len()).unwrap();
                for (row, &label) in probs.chunks_mut(k).zip(labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, probs);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new([2, 3], vec![1., -2., 3., 0.5, 7., -1.]).unwrap());
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data = vec![1., -2., 3., 0.5];
        let x = tape.param(Tensor::new([4], data.clone()).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &data[..]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn unreached_params_have_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::full([3], 1.0));
        let unused = tape.param(Tensor::full([3], 1.0));
        let c = tape.constant(Tensor::full([3], 2.0));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_and_upsample_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let p = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0]);
        let u = tape.upsample2(x).unwrap();
        assert_eq!(
            tape.value(u).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn odd_pool_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 1, 3, 4]));
        assert!(matches!(tape.maxpool2(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let mut tape = Tape::<f32>::new();
        let a = Tensor::from_fn([2, 3, 2, 2], |i| i as f32);
        let x = tape.constant(a.clone());
        let e = tape.constant(Tensor::zeros([2, 0, 2, 2]));
        let y = tape.concat_channels(x, e).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([2, 2], vec![1., 2., 3., 4.]).unwrap());
        let eye = tape.constant(Tensor::new([2, 2], vec![1., 0., 0., 1.]).unwrap());
        let zero_b = tape.constant(Tensor::zeros([2]));
        let y = tape.linear(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
        let zw = tape.constant(Tensor::zeros([3, 2]));
        let b = tape.constant(Tensor::new([3], vec![5., 6., 7.]).unwrap());
        let y = tape.linear(x, zw, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5., 6., 7., 5., 6., 7.]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new([1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let l = tape.cross_entropy(z, &[1]).unwrap();
        assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
        let z = tape.constant(Tensor::new([1, 3], vec![20.0, 0.0, 0.0]).unwrap());
        let l = tape.cross_entropy(z, &[0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-8);
        assert!(matches!(tape.cross_entropy(z, &[3]), Err(Error::Usage(_))));
    }
}
