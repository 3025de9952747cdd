use proptest::prelude::*;
use rand::SeedableRng;
use sfc_core::bitstream::{demux, demux_base, mux, strip_enhancement};
use sfc_core::eval::{count_inversions, ms_ssim, psnr, roc_auc};
use sfc_core::feature_codec::{entropy_decode, entropy_encode, fit_symbol_model, quantize_infer, quantize_train, LatentCode};
use sfc_core::nn::{gdn, gdn_inverse, LrSchedule};
use sfc_core::transforms::{minmax_denormalize, minmax_normalize, pyramid_build, pyramid_collapse, satd};
use sfc_core::Image64;

fn image(h: usize, w: usize, c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Image64> {
    proptest::collection::vec(lo..hi, h * w * c).prop_map(move |v| Image64::from_vec(h, w, c, v).unwrap())
}

fn image_pair() -> impl Strategy<Value = (Image64, Image64)> {
    (1usize..20, 1usize..20, 1usize..4).prop_flat_map(|(h, w, c)| (image(h, w, c, 0.0, 1.0), image(h, w, c, 0.0, 1.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn satd_is_a_symmetric_seminorm((a, b) in image_pair(), k in 0.1f64..4.0) {
        let d = satd(&a, &b).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - satd(&b, &a).unwrap()).abs() <= 1e-12 * d.max(1.0));
        prop_assert_eq!(satd(&a, &a).unwrap(), 0.0);
        // scaling the difference scales SATD
        let zero = Image64::zeros(a.height(), a.width(), a.channels());
        let scaled = a.map(|v| v * k);
        let lhs = satd(&scaled, &zero).unwrap();
        prop_assert!((lhs - k * satd(&a, &zero).unwrap()).abs() <= 1e-9 * lhs.max(1.0));
    }

    #[test]
    fn minmax_maps_into_unit_interval_and_back(x in (1usize..16, 1usize..16).prop_flat_map(|(h, w)| image(h, w, 3, -5.0, 5.0))) {
        let (n, side) = minmax_normalize(&x).unwrap();
        prop_assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(side.r_min <= side.r_max);
        let back = minmax_denormalize(&n, &side);
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn pyramid_collapse_inverts_build(
        x in (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(h, w, c)| image(8 * h, 8 * w, c, 0.0, 1.0)),
        levels in 1usize..4,
    ) {
        let (p, details) = pyramid_build(&x, levels).unwrap();
        prop_assert_eq!(p.len(), levels);
        prop_assert_eq!(details.len(), levels - 1);
        prop_assert_eq!(p.finest(), &x);
        let back = pyramid_collapse(&p, &details).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn quantized_symbols_stay_within_the_clip(latent in proptest::collection::vec(-100.0f64..100.0, 0..64), r_clip in 0.5f64..30.0) {
        let code = quantize_infer(&latent, r_clip);
        prop_assert_eq!(code.len(), latent.len());
        prop_assert!(code.symbols.iter().all(|s| (*s as f64).abs() <= r_clip));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noisy = quantize_train(&latent, r_clip, 0.5, &mut rng);
        prop_assert!(noisy.iter().all(|v| v.abs() <= r_clip + 0.5));
    }

    #[test]
    fn fitted_symbol_models_round_trip(
        codes in proptest::collection::vec(proptest::collection::vec(-6i32..=6, 12), 1..20),
        shared in any::<bool>(),
    ) {
        let codes: Vec<LatentCode> = codes.into_iter().map(LatentCode::new).collect();
        let model = fit_symbol_model(&codes, 6, shared).unwrap();
        for c in &codes {
            let bytes = entropy_encode(c, &model).unwrap();
            prop_assert_eq!(&entropy_decode(&bytes, &model, c.len()).unwrap(), c);
        }
    }

    #[test]
    fn container_layers_are_independent(
        base in proptest::collection::vec(any::<u8>(), 0..100),
        enh in proptest::option::of(proptest::collection::vec(any::<u8>(), 0..300)),
        h in 1usize..1000,
        w in 1usize..1000,
    ) {
        let full = mux(&base, enh.as_deref(), h, w).unwrap();
        let s = demux(&full).unwrap();
        prop_assert_eq!(&s.base, &base);
        prop_assert_eq!(&s.enhancement, &enh);
        prop_assert_eq!(s.encoded_len(), full.len());
        let stripped = strip_enhancement(&full).unwrap();
        prop_assert_eq!(&stripped, &mux(&base, None, h, w).unwrap());
        prop_assert_eq!(strip_enhancement(&stripped).unwrap(), stripped.clone());
        prop_assert_eq!(demux_base(&full).unwrap().base, demux_base(&stripped).unwrap().base);
    }

    #[test]
    fn lr_schedule_decays_to_its_floor(base in 1e-5f64..1e-1, decay in 0.1f64..1.0, every in 1usize..10, epoch in 0usize..200) {
        let s = LrSchedule { base, decay, every, floor: base * 0.1 };
        prop_assert!(s.at(epoch + 1) <= s.at(epoch));
        prop_assert!(s.at(epoch) >= s.floor && s.at(epoch) <= base);
    }

    #[test]
    fn gdn_inverse_undoes_gdn(x in proptest::collection::vec(-2.0f64..2.0, 1..6), b in 0.5f64..2.0, g in 0.0f64..0.2) {
        let n = x.len();
        let beta = vec![b; n];
        let gamma: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { g } else { g / 4.0 }).collect();
        let y = gdn(&x, &beta, &gamma).unwrap();
        let back = gdn_inverse(&y, &beta, &gamma).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-8);
        }
        let id = gdn(&x, &vec![1.0; n], &vec![0.0; n * n]).unwrap();
        prop_assert_eq!(id, x);
    }

    #[test]
    fn quality_metrics_are_bounded((a, b) in image_pair()) {
        prop_assert_eq!(psnr(&a, &a).unwrap(), sfc_core::eval::PSNR_CAP_DB);
        let p = psnr(&a, &b).unwrap();
        prop_assert!(p > 0.0 && p <= sfc_core::eval::PSNR_CAP_DB);
        if a.height() >= 2 && a.width() >= 2 {
            prop_assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
            prop_assert!(ms_ssim(&a, &b).unwrap() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn auc_is_a_probability(samples in proptest::collection::vec((-1.0f64..1.0, any::<bool>()), 2..100)) {
        let auc = roc_auc(&samples);
        prop_assert!((0.0..=1.0).contains(&auc));
        let flipped: Vec<(f64, bool)> = samples.iter().map(|&(s, l)| (-s, l)).collect();
        let pos = samples.iter().filter(|s| s.1).count();
        if pos > 0 && pos < samples.len() {
            prop_assert!((auc + roc_auc(&flipped) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sorted_values_have_no_inversions(mut v in proptest::collection::vec(-10.0f64..10.0, 0..50)) {
        v.sort_by(f64::total_cmp);
        prop_assert_eq!(count_inversions(&v), 0);
    }
}
