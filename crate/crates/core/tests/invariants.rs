//! Property tests over randomly generated inputs.

use guided_deblur::blur::{self, BlurKernel, TrajectoryConfig};
use guided_deblur::checkpoint::Checkpoint;
use guided_deblur::config::RunConfig;
use guided_deblur::data::{self, ProceduralSource, SampleConfig, SampleSource};
use guided_deblur::metrics;
use guided_deblur::params::ParamSet;
use guided_deblur::tensor::{GuidanceMode, Tape, Tensor};
use guided_deblur::train::{argmax_class, lr_schedule_update, plateau_reductions, PlateauConfig};
use guided_deblur::xcorr::{self, CorrelationSpec, PairMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Vec<usize>, seed: u64, lo: f32, hi: f32) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn correlation_is_mirror_symmetric(seed in any::<u64>(), c in 1usize..4, h in 3usize..8, w in 3usize..8, r in 0usize..3) {
        prop_assume!(r < h.min(w));
        let x = tensor(vec![2, c, h, w], seed, -1.0, 1.0);
        let spec = CorrelationSpec::new(r, c, PairMode::Ordered);
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(x);
        let out = tape.cross_correlate(v, spec).unwrap();
        let out = tape.value(out);
        let e = spec.extent();
        for n in 0..2 {
            for i in 0..c {
                for j in 0..c {
                    let a = xcorr::pair_index(i, j, c, PairMode::Ordered).unwrap();
                    let b = xcorr::pair_index(j, i, c, PairMode::Ordered).unwrap();
                    for s in 0..e {
                        for t in 0..e {
                            prop_assert_eq!(out.at4(n, a, s, t).to_bits(), out.at4(n, b, e - 1 - s, e - 1 - t).to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pair_index_is_injective(c in 1usize..9) {
        for mode in [PairMode::Unordered, PairMode::OrderedOffDiagonal, PairMode::Ordered] {
            let mut seen = std::collections::HashSet::new();
            for (i, j) in xcorr::pairs(c, mode) {
                prop_assert!(seen.insert(xcorr::pair_index(i, j, c, mode).unwrap()));
            }
            prop_assert_eq!(seen.len(), xcorr::pair_count(c, mode));
        }
    }

    #[test]
    fn simulated_kernels_are_admissible(seed in any::<u64>()) {
        let cfg = TrajectoryConfig::toy();
        let k = blur::sample_kernel(&mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
        let total: f64 = k.grid().iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(k.grid().iter().all(|&v| v >= 0.0 && v.is_finite()));
        prop_assert_eq!(k.size(), cfg.m);
        let again = blur::sample_kernel(&mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
        prop_assert_eq!(k, again);
    }

    #[test]
    fn bkrn_round_trip(seed in any::<u64>()) {
        let k = blur::sample_kernel(&mut ChaCha8Rng::seed_from_u64(seed), &TrajectoryConfig::toy()).unwrap();
        let bytes = k.to_bytes();
        prop_assert_eq!(bytes.len(), 8 + 4 * 17 * 17);
        let back = BlurKernel::from_bytes(&bytes).unwrap();
        prop_assert!(back.grid().iter().zip(k.grid()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn blur_preserves_constant_interior(seed in any::<u64>(), level in 0.0f32..1.0) {
        let k = blur::sample_kernel(&mut ChaCha8Rng::seed_from_u64(seed), &TrajectoryConfig::toy()).unwrap();
        let img = Tensor::full([3, 40, 40], level);
        let out = blur::apply_blur(&img, &k, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = k.size() / 2;
        for ch in 0..3 {
            for y in r..40 - r {
                for x in r..40 - r {
                    prop_assert!((out.data()[(ch * 40 + y) * 40 + x] - level).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn normalized_luminance_has_zero_mean_unit_std(seed in any::<u64>(), h in 4usize..24, w in 4usize..24) {
        let y = tensor(vec![1, h, w], seed, 0.0, 1.0);
        let (n, _, std) = data::normalize_y(&y);
        prop_assume!(std > 1e-3);
        let (mean, s) = data::mean_std(n.data());
        prop_assert!(mean.abs() < 1e-5);
        prop_assert!((s - 1.0).abs() < 1e-3);
    }

    #[test]
    fn png_round_trip_of_quantized_images(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn([3, h, w], |_| rng.gen_range(0u8..=255) as f32 / 255.0);
        let back = data::decode_image(&data::encode_image(&img).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        prop_assert!(back.max_abs_diff(&img) < 1e-7);
    }

    #[test]
    fn config_text_round_trips(lr in 1e-6f64..1e-1, it in 1usize..100_000, seed in any::<u64>(), noise in 0.0f64..0.1) {
        let mut cfg = RunConfig::toy();
        cfg.train.lr = lr;
        cfg.train.iterations = it;
        cfg.train.seed = seed;
        cfg.sample.noise_sigma = noise;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly(seed in any::<u64>(), count in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        for i in 0..count {
            let rank = rng.gen_range(0..4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5)).collect();
            let t = Tensor::from_fn(shape, |_| f32::from_bits(rng.gen::<u32>() & 0xBF7F_FFFF));
            ps.insert(format!("net.layer{i}.w"), t).unwrap();
        }
        let ck = Checkpoint::new(RunConfig::toy().to_text(), ps);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.config, ck.config);
    }

    #[test]
    fn argmax_ignores_common_shifts(a in -1000i32..1000, b in -1000i32..1000, c in -1000i32..1000, shift in -1000i32..1000) {
        // quarter steps keep every sum exact in f32
        let logits = [a, b, c].map(|v| v as f32 / 4.0);
        let shifted = logits.map(|v| v + shift as f32 / 4.0);
        prop_assert_eq!(argmax_class(&shifted), argmax_class(&logits));
    }

    #[test]
    fn psnr_is_symmetric(seed in any::<u64>()) {
        let a = tensor(vec![3, 8, 8], seed, 0.0, 1.0);
        let b = tensor(vec![3, 8, 8], seed ^ 1, 0.0, 1.0);
        prop_assert_eq!(metrics::psnr(&a, &b, 1.0).unwrap(), metrics::psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn mssim_is_bounded(seed in any::<u64>(), h in 11usize..18, w in 11usize..18) {
        let a = tensor(vec![3, h, w], seed, 0.0, 1.0);
        let b = tensor(vec![3, h, w], seed.wrapping_add(1), 0.0, 1.0);
        let v = metrics::mssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v));
        prop_assert!((metrics::mssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(v < 1.0 - 1e-12);
    }

    #[test]
    fn samples_are_seed_deterministic(seed in any::<u64>()) {
        let src = ProceduralSource::new(SampleConfig::toy());
        let a = src.sample(seed).unwrap();
        let b = src.sample(seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.size_class, data::kernel_class(&a.kernel, src.config()));
    }

    #[test]
    fn modulation_modes_reduce_to_both(seed in any::<u64>(), n in 1usize..3, c in 1usize..4) {
        let r = tensor(vec![n, c, 4, 4], seed, -1.0, 1.0);
        let m = tensor(vec![n, c], seed ^ 2, -1.0, 1.0);
        let b = tensor(vec![n, c], seed ^ 3, -1.0, 1.0);
        let zeros = Tensor::zeros([n, c]);
        let run = |mult: &Tensor<f32>, shift: &Tensor<f32>, mode| {
            let mut tape = Tape::<f32>::new();
            let (rv, mv, bv) = (tape.constant(r.clone()), tape.constant(mult.clone()), tape.constant(shift.clone()));
            let out = tape.guided_modulation(rv, mv, bv, mode).unwrap();
            tape.value(out).clone()
        };
        prop_assert_eq!(run(&m, &b, GuidanceMode::Additive), run(&zeros, &b, GuidanceMode::Both));
        prop_assert_eq!(run(&m, &b, GuidanceMode::Multiplicative), run(&m, &zeros, GuidanceMode::Both));
        prop_assert_eq!(run(&zeros, &zeros, GuidanceMode::Both), r.clone());
        prop_assert_eq!(run(&m, &b, GuidanceMode::None), r.clone());
    }

    #[test]
    fn flat_history_never_raises_lr(epochs in 1usize..30, lr in 1e-5f64..1e-2) {
        let cfg = PlateauConfig::default();
        let history = vec![1.0; epochs];
        let next = lr_schedule_update(&history, lr, &cfg);
        prop_assert!(next <= lr);
        prop_assert_eq!(plateau_reductions(&history, &cfg).len(), epochs / 5);
    }
}

#[test]
fn psnr_decreases_with_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = Tensor::from_fn([3, 32, 32], |_| rng.gen_range(0.2f32..0.8));
    let sigmas: Vec<f32> = (1..=10).map(|i| i as f32 * 0.01).collect();
    let mean_psnr: Vec<f64> = sigmas
        .iter()
        .map(|&s| {
            (0..10)
                .map(|t| {
                    let mut r = ChaCha8Rng::seed_from_u64(1000 + t);
                    let noisy = Tensor::from_fn(img.shape().to_vec(), |i| img.data()[i] + s * (r.gen::<f32>() - 0.5) * 3.464);
                    metrics::psnr(&img, &noisy, 1.0).unwrap()
                })
                .sum::<f64>()
                / 10.0
        })
        .collect();
    assert!(mean_psnr.windows(2).all(|p| p[1] < p[0]), "{mean_psnr:?}");
}

#[test]
fn random_crop_positions_are_uniform() {
    // tag each pixel with its position so the crop origin can be read back
    let (h, w, s) = (6usize, 5usize, 3usize);
    let img = Tensor::from_fn([1, h, w], |i| i as f32);
    let cells = (h - s + 1) * (w - s + 1);
    let draws = 6000;
    let mut counts = vec![0usize; cells];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..draws {
        let c = data::random_crop(&img, s, &mut rng).unwrap();
        let origin = c.data()[0] as usize;
        let (top, left) = (origin / w, origin % w);
        counts[top * (w - s + 1) + left] += 1;
    }
    let expected = draws as f64 / cells as f64;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    // 11 degrees of freedom, p = 0.001 critical value
    assert!(chi2 < 31.26, "chi-square {chi2} for {counts:?}");
}

#[test]
fn too_small_crop_is_a_shape_error() {
    let img = Tensor::zeros([3, 4, 4]);
    let err = data::random_crop(&img, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, guided_deblur::Error::Shape { .. }));
}
