#![allow(dead_code)]

//! Brute-force references for the layer primitives, written independently
//! of the library. Each `*_worst` function draws `instances` random small
//! problems and returns the largest absolute deviation it saw.

use guided_deblur::metrics;
use guided_deblur::tensor::{ConvAlgo, Tape, Tensor};
use guided_deblur::xcorr::{self, CorrelationSpec, PairMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;


fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

fn conv_oracle(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for s in 0..n {
        for o in 0..co {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = b.data()[o] as f64;
                    for i in 0..ci {
                        for u in 0..k {
                            for v in 0..k {
                                let (y, xx) = ((r * stride + u) as isize - pad as isize, (c * stride + v) as isize - pad as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * ci + i) * h + y as usize) * wd + xx as usize] as f64;
                                let wv = w.data()[((o * ci + i) * k + u) * k + v] as f64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![n, co, oh, ow], out)
}

pub fn conv2d_worst(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0f64;
    for inst in 0..instances {
        let n = rng.gen_range(1..=2);
        let ci = rng.gen_range(1..=3);
        let co = rng.gen_range(1..=3);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2);
        let h = rng.gen_range(k.max(2)..=8);
        let w = rng.gen_range(k.max(2)..=8);
        let x = random(&mut rng, &[n, ci, h, w], 0.5);
        let wt = random(&mut rng, &[co, ci, k, k], 0.5);
        let b = random(&mut rng, &[co], 0.5);
        let (shape, want) = conv_oracle(&x, &wt, &b, stride, pad);
        for algo in [ConvAlgo::Naive, ConvAlgo::Im2col] {
            let mut tape = Tape::<f32>::with_conv_algo(algo);
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
            let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
            assert_eq!(tape.value(y).shape(), &shape[..], "instance {inst}");
            worst = worst.max(max_diff(tape.value(y).data(), &want));
        }
    }
    worst
}

pub fn maxpool2_worst(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0f64;
    for _ in 0..instances {
        let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let (h, w) = (2 * rng.gen_range(1..=5), 2 * rng.gen_range(1..=5));
        let x = random(&mut rng, &[n, c, h, w], 1.0);
        let mut want = Vec::new();
        for p in 0..n * c {
            for r in 0..h / 2 {
                for q in 0..w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for (u, v) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        m = m.max(x.data()[p * h * w + (2 * r + u) * w + 2 * q + v] as f64);
                    }
                    want.push(m);
                }
            }
        }
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(x);
        let y = tape.maxpool2(v).unwrap();
        assert_eq!(tape.value(y).shape(), &[n, c, h / 2, w / 2]);
        worst = worst.max(max_diff(tape.value(y).data(), &want));
    }
    worst
}

pub fn linear_worst(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0f64;
    for _ in 0..instances {
        let (n, din, dout) = (rng.gen_range(1..=4), rng.gen_range(1..=24), rng.gen_range(1..=6));
        let x = random(&mut rng, &[n, din], 0.5);
        let w = random(&mut rng, &[dout, din], 0.5);
        let b = random(&mut rng, &[dout], 0.5);
        let mut want = Vec::new();
        for s in 0..n {
            for o in 0..dout {
                let dot: f64 = (0..din).map(|i| x.data()[s * din + i] as f64 * w.data()[o * din + i] as f64).sum();
                want.push(dot + b.data()[o] as f64);
            }
        }
        let mut tape = Tape::<f32>::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let y = tape.linear(xv, wv, bv).unwrap();
        assert_eq!(tape.value(y).shape(), &[n, dout]);
        worst = worst.max(max_diff(tape.value(y).data(), &want));
    }
    worst
}

pub fn xcorr_oracle(x: &Tensor<f32>, r: usize, mode: PairMode) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let at = |s: usize, ch: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x.data()[((s * c + ch) * h + i as usize) * w + j as usize] as f64
        }
    };
    let ri = r as isize;
    let mut out = Vec::new();
    for s in 0..n {
        for (a, b) in xcorr::pairs(c, mode) {
            for sh in -ri..=ri {
                for t in -ri..=ri {
                    let mut acc = 0.0;
                    for i in 0..h as isize {
                        for j in 0..w as isize {
                            acc += at(s, a, i - sh, j - t) * at(s, b, i, j);
                        }
                    }
                    out.push(acc / (h * w) as f64);
                }
            }
        }
    }
    out
}

pub fn cross_correlate_worst(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let modes = [PairMode::Unordered, PairMode::OrderedOffDiagonal, PairMode::Ordered];
    let mut worst = 0f64;
    for inst in 0..instances {
        let mode = modes[inst % 3];
        let c = rng.gen_range(if mode == PairMode::OrderedOffDiagonal { 2 } else { 1 }..=3);
        let (h, w) = (rng.gen_range(3..=7), rng.gen_range(3..=7));
        let r = rng.gen_range(0..h.min(w));
        let n = rng.gen_range(1..=2);
        let x = random(&mut rng, &[n, c, h, w], 1.0);
        let want = xcorr_oracle(&x, r, mode);
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(x);
        let y = tape.cross_correlate(v, CorrelationSpec::new(r, c, mode)).unwrap();
        worst = worst.max(max_diff(tape.value(y).data(), &want));
    }
    worst
}

fn mssim_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let luma = |t: &Tensor<f32>, i: usize, j: usize| -> f64 {
        let p = h * w;
        0.299 * t.data()[i * w + j] as f64 + 0.587 * t.data()[p + i * w + j] as f64 + 0.114 * t.data()[2 * p + i * w + j] as f64
    };
    let mut g = [0f64; 11];
    for (k, v) in g.iter_mut().enumerate() {
        let d = k as f64 - 5.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = g.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - 11 {
        for j in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let wt = g[u] * g[v] / (s * s);
                    let (x, y) = (luma(a, i + u, j + v), luma(b, i + u, j + v));
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn mssim_worst(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst = 0f64;
    for inst in 0..instances {
        let (h, w) = (rng.gen_range(11..=16), rng.gen_range(11..=16));
        let a = Tensor::from_fn([3, h, w], |_| rng.gen::<f32>());
        let b = if inst % 4 == 0 {
            a.clone()
        } else {
            let noise = rng.gen_range(0.0..0.5f32);
            a.map(|v| (v + noise * (rng_hash(v) - 0.5)).clamp(0.0, 1.0))
        };
        let got = metrics::mssim(&a, &b).unwrap();
        worst = worst.max((got - mssim_oracle(&a, &b)).abs());
    }
    worst
}

fn rng_hash(v: f32) -> f32 {
    let bits = v.to_bits().wrapping_mul(2_654_435_761);
    (bits >> 8) as f32 / (1u32 << 24) as f32
}
