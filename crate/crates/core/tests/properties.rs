use proptest::prelude::*;

use dsrn::data::{self, Direction, FilenamePattern, IlluminationSetting, SceneIndex};
use dsrn::kernels::{self, ConvSpec};
use dsrn::losses::{self, SsimConfig};
use dsrn::metrics;
use dsrn::synth;
use dsrn::training::{lr_at, TrainConfig};
use dsrn::{ImageTensor, Shape, Tensor};

fn tensor(shape: Shape, vals: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, vals).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

prop_compose! {
    fn image(c: usize, h: usize, w: usize)(v in prop::collection::vec(0.0f64..1.0, c * h * w)) -> Tensor<f64> {
        tensor(Shape::new(c, h, w), v)
    }
}

fn naive_conv(x: &Tensor<f64>, s: &ConvSpec, w: &[f64], b: &[f64]) -> Tensor<f64> {
    let (oh, ow) = s.output_dims(x.height(), x.width()).unwrap();
    Tensor::from_fn(Shape::new(s.out_ch, oh, ow), |co, oy, ox| {
        let mut acc = b[co];
        for ci in 0..s.in_ch {
            for ky in 0..s.kernel {
                for kx in 0..s.kernel {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < x.height() && (ix as usize) < x.width() {
                        acc += w[((co * s.in_ch + ci) * s.kernel + ky) * s.kernel + kx] * x.at(ci, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

fn conv_case() -> impl Strategy<Value = (ConvSpec, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..4, 1usize..4, 1usize..5, 1usize..3, 0usize..2, 4usize..9).prop_flat_map(|(ci, co, k, s, p, hw)| {
        let spec = ConvSpec::conv(ci, co, k, s, p);
        (
            Just(spec),
            Just(hw),
            prop::collection::vec(-1.0f64..1.0, ci * hw * hw),
            prop::collection::vec(-1.0f64..1.0, spec.weight_len()),
            prop::collection::vec(-1.0f64..1.0, co),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_loops((spec, hw, xv, w, b) in conv_case()) {
        let x = tensor(Shape::new(spec.in_ch, hw, hw), xv);
        let got = kernels::conv_forward(&x, &spec, &w, &b).unwrap();
        let want = naive_conv(&x, &spec, &w, &b);
        prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn conv_backward_is_the_adjoint((spec, hw, xv, w, _b) in conv_case(), seed in any::<u64>()) {
        let x = tensor(Shape::new(spec.in_ch, hw, hw), xv);
        let zero = vec![0.0; spec.out_ch];
        let y = kernels::conv_forward(&x, &spec, &w, &zero).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dy = Tensor::from_fn(y.shape(), |_, _, _| rng.gen_range(-1.0..1.0));
        let g = kernels::conv_backward(&x, &spec, &w, &dy, true).unwrap();
        let lhs = dot(&y, &dy);
        prop_assert!((lhs - dot(&x, g.dx.as_ref().unwrap())).abs() < 1e-9 * (1.0 + lhs.abs()));
        let wdot: f64 = w.iter().zip(&g.dw).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - wdot).abs() < 1e-9 * (1.0 + lhs.abs()));
        let dysum: Vec<f64> = (0..spec.out_ch).map(|c| dy.plane(c).iter().sum()).collect();
        for (a, b) in g.db.iter().zip(&dysum) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv(
        ci in 1usize..4, co in 1usize..4, hw in 2usize..7, seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = ConvSpec::transposed(ci, co, 4, 2, 1);
        let w: Vec<f64> = (0..t.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_fn(Shape::new(ci, hw, hw), |_, _, _| rng.gen_range(-1.0..1.0));
        let y = kernels::conv_forward(&x, &t, &w, &vec![0.0; co]).unwrap();
        prop_assert_eq!((y.height(), y.width()), (2 * hw, 2 * hw));
        let z = Tensor::from_fn(y.shape(), |_, _, _| rng.gen_range(-1.0..1.0));
        let forward = ConvSpec::conv(co, ci, 4, 2, 1);
        let back = kernels::conv_forward(&z, &forward, &w, &vec![0.0; ci]).unwrap();
        let (a, b) = (dot(&y, &z), dot(&x, &back));
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn resampling_backward_is_the_adjoint(x in image(2, 4, 6), y in image(2, 8, 12)) {
        let up = kernels::upsample2x(&x);
        let lhs = dot(&up, &y);
        prop_assert!((lhs - dot(&x, &kernels::upsample2x_backward(&y).unwrap())).abs() < 1e-10);
        let down = kernels::downsample2x(&y).unwrap();
        prop_assert!((dot(&down, &x) - dot(&y, &kernels::downsample2x_backward(&x))).abs() < 1e-10);
    }

    #[test]
    fn upsampling_preserves_constants(v in 0.0f64..1.0) {
        let x = Tensor::filled(Shape::new(3, 4, 4), v);
        let up = kernels::upsample2x(&x);
        prop_assert!(up.data().iter().all(|u| (u - v).abs() < 1e-12));
        let down = kernels::downsample2x(&up).unwrap();
        prop_assert!(down.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn pixel_losses_are_symmetric_and_nonnegative(a in image(3, 12, 12), b in image(3, 12, 12)) {
        for f in [losses::l1_loss::<f64>, losses::l2_loss::<f64>] {
            let (ab, ba) = (f(&a, &b).unwrap(), f(&b, &a).unwrap());
            prop_assert!(ab >= 0.0 && (ab - ba).abs() < 1e-15);
            prop_assert_eq!(f(&a, &a).unwrap(), 0.0);
        }
        let (s_ab, s_ba) = (losses::ssim_loss(&a, &b).unwrap(), losses::ssim_loss(&b, &a).unwrap());
        prop_assert!((s_ab - s_ba).abs() < 1e-12);
        prop_assert!(losses::ssim_loss(&a, &a).unwrap().abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&s_ab));
    }

    #[test]
    fn tv_is_nonnegative_and_zero_on_flat_images(a in image(3, 6, 6), v in 0.0f64..1.0) {
        prop_assert!(losses::tv_loss(&a).unwrap() >= 0.0);
        prop_assert_eq!(losses::tv_loss(&Tensor::filled(Shape::new(3, 6, 6), v)).unwrap(), 0.0);
    }

    #[test]
    fn psnr_tracks_mse(a in image(3, 8, 8), d in 0.001f64..0.5) {
        let b = a.map(|v| v + d);
        let p = metrics::psnr(&a, &b).unwrap();
        prop_assert!((p - 10.0 * (1.0 / (d * d)).log10()).abs() < 1e-6);
        prop_assert_eq!(metrics::psnr(&a, &a).unwrap(), metrics::PSNR_CAP_DB);
    }

    #[test]
    fn ssim_is_bounded(a in image(1, 11, 11), b in image(1, 11, 11)) {
        let s = losses::ssim_with(&a, &b, &SsimConfig::default()).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
    }

    #[test]
    fn lr_schedule_is_monotone(total in 1usize..500, a in 0usize..500, b in 0usize..500) {
        let cfg = TrainConfig::default();
        let (a, b) = (a.min(total), b.min(total));
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(lo, total, &cfg).unwrap() >= lr_at(hi, total, &cfg).unwrap());
        prop_assert!((lr_at(0, total, &cfg).unwrap() - cfg.lr_init).abs() < 1e-15);
        prop_assert!((lr_at(total, total, &cfg).unwrap() - cfg.lr_final).abs() < 1e-15);
        prop_assert!(lr_at(total + 1, total, &cfg).is_err());
    }

    #[test]
    fn custom_split_is_a_disjoint_cover(n in 2usize..40, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let mut index = SceneIndex::default();
        let s = IlluminationSetting::new(Direction::N, 6500).unwrap();
        for i in 0..n {
            index.insert(format!("s{i:03}"), s, format!("s{i:03}.png").into());
        }
        let n_test = ((n - 1) as f64 * frac) as usize;
        let (train, test, file) = data::split_custom(&index, n_test, seed).unwrap();
        prop_assert_eq!(test.scene_count(), n_test);
        prop_assert_eq!(train.scene_count() + test.scene_count(), n);
        prop_assert!(test.scene_ids().all(|id| train.settings(id).is_none()));
        let (_, _, again) = data::split_custom(&index, n_test, seed).unwrap();
        prop_assert_eq!(file, again);
    }

    #[test]
    fn fusion_stays_in_unit_range(a in image(3, 4, 4), b in image(3, 4, 4), w in 0.0f32..1.0) {
        let (ia, ib) = (ImageTensor::new(a.cast()).unwrap(), ImageTensor::new(b.cast()).unwrap());
        let f = data::fuse_opposite(&ia, &ib, w, 1.0 - w).unwrap();
        prop_assert!(f.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let same = data::fuse_opposite(&ia, &ia, w, 1.0 - w).unwrap();
        prop_assert!(same.tensor().max_abs_diff(ia.tensor()).unwrap() < 1e-6);
    }

    #[test]
    fn kelvin_blue_rises_with_temperature(t1 in 1000.0f64..12000.0, t2 in 1000.0f64..12000.0) {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let (a, b) = (synth::kelvin_to_rgb(lo).unwrap(), synth::kelvin_to_rgb(hi).unwrap());
        prop_assert!(a[2] <= b[2]);
        prop_assert!(a.iter().chain(&b).all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn filename_pattern_round_trips(
        scene in "[a-z][a-z0-9_]{0,8}",
        d in prop::sample::select(Direction::ALL.to_vec()),
        t in prop::sample::select(data::TEMPERATURES_K.to_vec()),
    ) {
        let setting = IlluminationSetting::new(d, t).unwrap();
        for pat in [data::DEFAULT_PATTERN, "{direction}-{temp}K/{scene}.png"] {
            let p = FilenamePattern::new(pat).unwrap();
            let (s, got) = p.parse(&p.format(&scene, &setting)).unwrap();
            prop_assert_eq!(&s, &scene);
            prop_assert_eq!(got, setting);
        }
    }
}

#[test]
fn ssim_window_must_fit() {
    let a = Tensor::<f64>::filled(Shape::new(3, 8, 8), 0.5);
    assert!(losses::ssim_loss(&a, &a).is_err());
    let small = SsimConfig { window: 7, ..SsimConfig::default() };
    assert!(losses::ssim_loss_with(&a, &a, &small).unwrap().abs() < 1e-12);
}
