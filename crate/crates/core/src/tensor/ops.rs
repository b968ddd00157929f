//! Forward/backward kernels for the non-convolution layer primitives.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Which terms of the kernel-guided affine modulation are active:
/// `r·(1+m) + b`, with the disabled term replaced by zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum GuidanceMode {
    None,
    Additive,
    Multiplicative,
    #[default]
    Both,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 4] = [
        GuidanceMode::None,
        GuidanceMode::Additive,
        GuidanceMode::Multiplicative,
        GuidanceMode::Both,
    ];

    pub fn uses_multiplier(self) -> bool {
        matches!(self, GuidanceMode::Multiplicative | GuidanceMode::Both)
    }

    pub fn uses_bias(self) -> bool {
        matches!(self, GuidanceMode::Additive | GuidanceMode::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Additive => "additive",
            GuidanceMode::Multiplicative => "multiplicative",
            GuidanceMode::Both => "both",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => GuidanceMode::None,
            "additive" => GuidanceMode::Additive,
            "multiplicative" => GuidanceMode::Multiplicative,
            "both" => GuidanceMode::Both,
            other => return Err(Error::Config(format!("unknown guidance mode {other:?}"))),
        })
    }
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Flat input index of the maximum of every pooling window.
pub type PoolIndices = Vec<usize>;

pub(crate) fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let [n, c, h, w] = x.dims4("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial size {h}x{w} must be even"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for cand in [
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ] {
                    // strict comparison: ties keep the first cell in row-major order
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out.push(src[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, ho, wo], out)?, idx))
}

pub(crate) fn maxpool2_backward<T: Scalar>(input_len: usize, argmax: &[usize], g: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); input_len];
    for (&i, &gv) in argmax.iter().zip(g) {
        gx[i] += gv;
    }
    gx
}

pub(crate) fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("upsample2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        for i in 0..ho {
            let srow = &src[(plane * h + i / 2) * w..(plane * h + i / 2 + 1) * w];
            let drow = &mut out[(plane * ho + i) * wo..(plane * ho + i + 1) * wo];
            for (j, d) in drow.iter_mut().enumerate() {
                *d = srow[j / 2];
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

pub(crate) fn upsample2_backward<T: Scalar>(shape: &[usize], g: &[T]) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let wo = 2 * w;
    let mut gx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for i in 0..2 * h {
            for j in 0..wo {
                gx[(plane * h + i / 2) * w + j / 2] += g[(plane * 2 * h + i) * wo + j];
            }
        }
    }
    gx
}

pub(crate) fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, din] = x.dims2("linear")?;
    let [dout, wdin] = w.dims2("linear")?;
    if din != wdin {
        return Err(Error::shape(
            "linear",
            format!("input width {din} does not match weight width {wdin}"),
        ));
    }
    if b.shape() != [dout] {
        return Err(Error::shape(
            "linear",
            format!("bias shape {:?} does not match {dout} outputs", b.shape()),
        ));
    }
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    T::gemm(
        n,
        din,
        dout,
        T::one(),
        x.data(),
        (din as isize, 1),
        w.data(),
        (1, din as isize),
        T::one(),
        &mut out,
        (dout as isize, 1),
    );
    Tensor::new([n, dout], out)
}

/// Gradients of `y = x·Wᵀ + b` for x (n×din) and W (dout×din).
pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    n: usize,
    din: usize,
    dout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); n * din];
    T::gemm(n, dout, din, T::one(), g, (dout as isize, 1), w, (din as isize, 1), T::zero(), &mut gx, (din as isize, 1));
    let mut gw = vec![T::zero(); dout * din];
    T::gemm(dout, n, din, T::one(), g, (1, dout as isize), x, (din as isize, 1), T::zero(), &mut gw, (din as isize, 1));
    let mut gb = vec![T::zero(); dout];
    for row in g.chunks(dout) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (gx, gw, gb)
}

pub(crate) fn concat_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c1, h, w] = a.dims4("concat_channels")?;
    let [n2, c2, h2, w2] = b.dims4("concat_channels")?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::shape(
            "concat_channels",
            format!("cannot stack {:?} with {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (c1 + c2) * plane);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * c1 * plane..(i + 1) * c1 * plane]);
        out.extend_from_slice(&b.data()[i * c2 * plane..(i + 1) * c2 * plane]);
    }
    Tensor::new([n, c1 + c2, h, w], out)
}

pub(crate) fn concat_backward<T: Scalar>(g: &[T], n: usize, c1: usize, c2: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let mut ga = Vec::with_capacity(n * c1 * plane);
    let mut gb = Vec::with_capacity(n * c2 * plane);
    let per = (c1 + c2) * plane;
    for i in 0..n {
        ga.extend_from_slice(&g[i * per..i * per + c1 * plane]);
        gb.extend_from_slice(&g[i * per + c1 * plane..(i + 1) * per]);
    }
    (ga, gb)
}

/// Per-sample, per-channel coefficient vector; one row broadcasts over the batch.
fn coeff_rows<T: Scalar>(v: &Tensor<T>, n: usize, c: usize) -> Result<usize> {
    let (rows, cols) = match v.shape() {
        [cols] => (1, *cols),
        [rows, cols] => (*rows, *cols),
        other => {
            return Err(Error::shape(
                "guided_modulation",
                format!("coefficient shape {other:?} is not a vector or matrix"),
            ))
        }
    };
    if cols != c || (rows != 1 && rows != n) {
        return Err(Error::shape(
            "guided_modulation",
            format!("coefficients {:?} do not match {n} samples of {c} channels", v.shape()),
        ));
    }
    Ok(rows)
}

/// `r·(1+m) + b` per channel, broadcast over the spatial domain.
pub(crate) fn modulate_forward<T: Scalar>(
    r: &Tensor<T>,
    mult: Option<&Tensor<T>>,
    shift: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = r.dims4("guided_modulation")?;
    let mrows = mult.map(|m| coeff_rows(m, n, c)).transpose()?;
    let brows = shift.map(|b| coeff_rows(b, n, c)).transpose()?;
    let plane = h * w;
    let mut out = r.data().to_vec();
    for i in 0..n {
        for ch in 0..c {
            let scale = match (mult, mrows) {
                (Some(m), Some(rows)) => T::one() + m.data()[(i % rows) * c + ch],
                _ => T::one(),
            };
            let offset = match (shift, brows) {
                (Some(b), Some(rows)) => b.data()[(i % rows) * c + ch],
                _ => T::zero(),
            };
            for v in &mut out[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                *v = *v * scale + offset;
            }
        }
    }
    Tensor::new(r.shape().to_vec(), out)
}

pub(crate) struct ModulationGrads<T> {
    pub input: Vec<T>,
    pub mult: Option<Vec<T>>,
    pub shift: Option<Vec<T>>,
}

pub(crate) fn modulate_backward<T: Scalar>(
    r: &Tensor<T>,
    mult: Option<&Tensor<T>>,
    shift: Option<&Tensor<T>>,
    g: &[T],
) -> ModulationGrads<T> {
    let s = r.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let rows_of = |v: &Tensor<T>| if v.rank() == 1 { 1 } else { v.shape()[0] };
    let mut gx = vec![T::zero(); r.len()];
    let mut gm = mult.map(|m| vec![T::zero(); m.len()]);
    let mut gb = shift.map(|b| vec![T::zero(); b.len()]);
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * plane..(i * c + ch + 1) * plane;
            let scale = mult.map_or(T::one(), |m| T::one() + m.data()[(i % rows_of(m)) * c + ch]);
            let gs = &g[range.clone()];
            for (dst, &gv) in gx[range.clone()].iter_mut().zip(gs) {
                *dst = gv * scale;
            }
            if let (Some(m), Some(gm)) = (mult, gm.as_mut()) {
                let dot: T = gs.iter().zip(&r.data()[range.clone()]).map(|(&a, &b)| a * b).sum();
                gm[(i % rows_of(m)) * c + ch] += dot;
            }
            if let (Some(b), Some(gb)) = (shift, gb.as_mut()) {
                gb[(i % rows_of(b)) * c + ch] += gs.iter().copied().sum::<T>();
            }
        }
    }
    ModulationGrads {
        input: gx,
        mult: gm,
        shift: gb,
    }
}

/// Per-sample clamp-and-renormalize onto the probability simplex.
/// Returns the normalized tensor, the positive mass of each sample and a
/// flag for samples whose mass fell below `eps` (those become a centered delta).
pub(crate) fn normalize_kernel_forward<T: Scalar>(
    x: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<bool>)> {
    let n = *x.shape().first().ok_or_else(|| Error::shape("normalize_kernel_head", "empty shape"))?;
    let per = x.len().checked_div(n).unwrap_or(0);
    let mut out = Vec::with_capacity(x.len());
    let mut masses = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for sample in x.data().chunks(per.max(1)).take(n) {
        let mass: T = sample.iter().map(|&v| v.max(T::zero())).sum();
        if mass < eps || !mass.is_finite() {
            let mut delta = vec![T::zero(); per];
            delta[per / 2] = T::one();
            out.extend(delta);
            flags.push(true);
        } else {
            out.extend(sample.iter().map(|&v| v.max(T::zero()) / mass));
            flags.push(false);
        }
        masses.push(mass);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, masses, flags))
}

pub(crate) fn normalize_kernel_backward<T: Scalar>(
    x: &[T],
    y: &[T],
    masses: &[T],
    flags: &[bool],
    g: &[T],
) -> Vec<T> {
    let n = masses.len();
    let per = x.len().checked_div(n).unwrap_or(0);
    let mut gx = vec![T::zero(); x.len()];
    for i in 0..n {
        if flags[i] {
            continue;
        }
        let r = i * per..(i + 1) * per;
        let dot: T = g[r.clone()].iter().zip(&y[r.clone()]).map(|(&a, &b)| a * b).sum();
        for j in r {
            if x[j] > T::zero() {
                gx[j] = (g[j] - dot) / masses[i];
            }
        }
    }
    gx
}

/// Place a map into an `out_h`×`out_w` window, shifted by `offset`
/// (positive pads at the top/left, negative crops). Cells with no source are zero.
pub(crate) fn fit_forward<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize, offset: (isize, isize)) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("fit_window")?;
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for plane in 0..n * c {
        for oy in 0..out_h {
            let sy = oy as isize - offset.0;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for ox in 0..out_w {
                let sx = ox as isize - offset.1;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(plane * out_h + oy) * out_w + ox] = x.data()[(plane * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

pub(crate) fn fit_backward<T: Scalar>(shape: &[usize], out_h: usize, out_w: usize, offset: (isize, isize), g: &[T]) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut gx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for oy in 0..out_h {
            let sy = oy as isize - offset.0;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for ox in 0..out_w {
                let sx = ox as isize - offset.1;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                gx[(plane * h + sy as usize) * w + sx as usize] += g[(plane * out_h + oy) * out_w + ox];
            }
        }
    }
    gx
}

/// Softmax probabilities of each row, stabilized by max subtraction.
pub(crate) fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

/// Mean negative log-likelihood, computed with log-sum-exp.
pub(crate) fn cross_entropy_value<T: Scalar>(logits: &[T], k: usize, labels: &[usize]) -> T {
    let mut total = T::zero();
    for (row, &label) in logits.chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += lse - row[label];
    }
    total / T::from_usize(labels.len()).unwrap()
}
