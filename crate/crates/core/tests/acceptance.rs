//! Acceptance suite: one pass/fail line per criterion, then a single assert.
//!
//! Run with `cargo test -p sfc-core --test acceptance -- --nocapture` to see
//! the report. The staged toy run dominates the wall time.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfc_core::base_extractor::{multitask_loss, multitask_loss_with_grad};
use sfc_core::bitstream::{demux, demux_base, mux};
use sfc_core::enhancement_codec::rd_loss;
use sfc_core::eval::count_inversions;
use sfc_core::feature_codec::{entropy_decode, entropy_encode, feature_codec_loss, LatentCode, SymbolModel};
use sfc_core::image_io::save_png;
use sfc_core::nn::LrSchedule;
use sfc_core::pipeline::{EvalReport, ExperimentConfig, Pipeline, Split, Stage};
use sfc_core::synth::synth_faces;
use sfc_core::texture_generator::{generator_loss, generator_loss_with_grad};
use sfc_core::transforms::{minmax_denormalize, minmax_normalize, pyramid_build, pyramid_collapse, resize_bicubic, satd};
use sfc_core::{Image64, Tensor64};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image64 {
    Image64::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

// ---- dense Hadamard oracle ----

fn sylvester(n: usize) -> Vec<Vec<f64>> {
    let mut h = vec![vec![1.0]];
    while h.len() < n {
        let m = h.len();
        let mut next = vec![vec![0.0; 2 * m]; 2 * m];
        for i in 0..m {
            for j in 0..m {
                next[i][j] = h[i][j];
                next[i][j + m] = h[i][j];
                next[i + m][j] = h[i][j];
                next[i + m][j + m] = -h[i][j];
            }
        }
        h = next;
    }
    h
}

/// All 8x8 Hadamard coefficients of `a - b`, per channel, zero-padded.
fn hadamard_coefficients(a: &Image64, b: &Image64) -> Vec<f64> {
    let h8 = sylvester(8);
    let (h, w, c) = (a.height(), a.width(), a.channels());
    let mut out = Vec::new();
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut blk = [[0.0; 8]; 8];
                for (y, row) in blk.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        if by + y < h && bx + x < w {
                            *v = a.get(by + y, bx + x, ch) - b.get(by + y, bx + x, ch);
                        }
                    }
                }
                // H * B * H^T
                let mut t = [[0.0; 8]; 8];
                for i in 0..8 {
                    for j in 0..8 {
                        t[i][j] = (0..8).map(|k| h8[i][k] * blk[k][j]).sum();
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        out.push((0..8).map(|k| t[i][k] * h8[j][k]).sum());
                    }
                }
            }
        }
    }
    out
}

fn satd_oracle(a: &Image64, b: &Image64) -> f64 {
    let n = (a.height() * a.width() * a.channels()) as f64;
    hadamard_coefficients(a, b).iter().map(|v| v.abs()).sum::<f64>() / n
}

fn min_abs_coefficient(a: &Image64, b: &Image64) -> f64 {
    hadamard_coefficients(a, b).iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

// ---- criteria ----

fn c1_satd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = Instant::now();
    let mut worst = 0.0f64;
    let shapes = [(8, 8, 1), (17, 23, 3), (64, 64, 3)];
    for &(h, w, c) in &shapes {
        for _ in 0..100 {
            let a = random_image(&mut rng, h, w, c);
            let b = random_image(&mut rng, h, w, c);
            let got = satd(&a, &b).map_err(|e| e.to_string())?;
            let want = satd_oracle(&a, &b);
            let rel = (got - want).abs() / want.abs().max(1e-300);
            worst = worst.max(rel);
        }
    }
    let elapsed = t.elapsed();
    check(worst <= 1e-5, format!("relative error {worst:e}"))?;
    check(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!("300 inputs over {} shapes, max rel err {worst:.1e}, {elapsed:.2?}", shapes.len()))
}

fn c2_transport() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for case in 0..10_000 {
        let radius = rng.random_range(0..24);
        let dims = rng.random_range(1..64usize);
        let a = (2 * radius + 1) as usize;
        let weights: Vec<Vec<f64>> = (0..dims)
            .map(|_| (0..a).map(|_| rng.random_range(0.0f64..1.0).powi(3)).collect())
            .collect();
        let model = SymbolModel::from_weights(radius, &weights).map_err(|e| e.to_string())?;
        let len = rng.random_range(0..=dims);
        let code = LatentCode::new((0..len).map(|_| rng.random_range(-radius..=radius)).collect());
        let bytes = entropy_encode(&code, &model).map_err(|e| e.to_string())?;
        let back = entropy_decode(&bytes, &model, len).map_err(|e| format!("case {case}: {e}"))?;
        check(back == code, format!("case {case}: latent code changed"))?;
        // any damage to the payload is caught
        let mut bad = bytes.clone();
        let i = rng.random_range(0..bad.len());
        bad[i] ^= 1 << rng.random_range(0..8);
        check(entropy_decode(&bad, &model, len).is_err(), format!("case {case}: corrupted payload accepted"))?;
        check(entropy_decode(&bytes[..bytes.len() - 1], &model, len).is_err(), format!("case {case}: truncation accepted"))?;
    }
    for case in 0..1_000 {
        let base: Vec<u8> = (0..rng.random_range(0..200)).map(|_| rng.random()).collect();
        let enh: Option<Vec<u8>> = rng
            .random_bool(0.5)
            .then(|| (0..rng.random_range(0..2000)).map(|_| rng.random()).collect());
        let (h, w) = (rng.random_range(1..4096), rng.random_range(1..4096));
        let bytes = mux(&base, enh.as_deref(), h, w).map_err(|e| e.to_string())?;
        let s = demux(&bytes).map_err(|e| format!("case {case}: {e}"))?;
        check(s.base == base && s.enhancement == enh && (s.height, s.width) == (h, w), format!("case {case}: fields changed"))?;
        check(demux_base(&bytes).is_ok_and(|v| v.base == &base[..]), format!("case {case}: base view differs"))?;
        // bit flips, byte bursts, truncation and extension
        for _ in 0..4 {
            let mut bad = bytes.clone();
            match rng.random_range(0..4) {
                0 => {
                    let i = rng.random_range(0..bad.len());
                    bad[i] ^= 1 << rng.random_range(0..8);
                }
                1 => {
                    let i = rng.random_range(0..bad.len());
                    let n = rng.random_range(1..=4).min(bad.len() - i);
                    for b in &mut bad[i..i + n] {
                        *b = b.wrapping_add(rng.random_range(1..=255));
                    }
                }
                2 => bad.truncate(rng.random_range(0..bad.len())),
                _ => bad.push(rng.random()),
            }
            check(demux(&bad).is_err(), format!("case {case}: corrupted container accepted"))?;
        }
    }
    Ok("10000 latent codes and 1000 containers round-trip; every corruption rejected".into())
}

fn c3_pyramid() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let classes = [(64, 64, 3, 3), (32, 48, 1, 2), (96, 128, 3, 4)];
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (h, w, c, levels) = classes[i % classes.len()];
        let x = random_image(&mut rng, h, w, c);
        let (p, details) = pyramid_build(&x, levels).map_err(|e| e.to_string())?;
        let back = pyramid_collapse(&p, &details).map_err(|e| e.to_string())?;
        let err = x.data().iter().zip(back.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err);
    }
    check(worst < 1e-6, format!("max error {worst:e}"))?;
    Ok(format!("100 images over {} shape classes, max error {worst:.1e}", classes.len()))
}

fn c4_minmax() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
        let scale = rng.random_range(0.01..2.0);
        let x = Image64::from_vec(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
        let (n, side) = minmax_normalize(&x).map_err(|e| e.to_string())?;
        check(n.data().iter().all(|v| (0.0..=1.0).contains(v)), "normalized value outside [0, 1]")?;
        let back = minmax_denormalize(&n, &side);
        worst = x.data().iter().zip(back.data()).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    for v in [0.0, 0.25, -0.75, 1.0] {
        let x = Image64::filled(5, 7, 3, v);
        let (n, side) = minmax_normalize(&x).map_err(|e| e.to_string())?;
        check(n.data().iter().all(|&v| v == 0.0), "constant residual did not normalize to zero")?;
        let back = minmax_denormalize(&n, &side);
        worst = x.data().iter().zip(back.data()).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    check(worst <= 1e-6, format!("max error {worst:e}"))?;
    Ok(format!("200 random and 4 constant residuals, max error {worst:.1e}"))
}

fn softmax_ce(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn c8_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let err = |e: sfc_core::Error| e.to_string();
    let mut worst = 0.0f64;
    let mut track = |got: f64, want: f64| {
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    };
    for _ in 0..20 {
        // multitask
        let (n, k) = (3, 5);
        let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let xt: Vec<Image64> = (0..n).map(|_| random_image(&mut rng, 16, 16, 3)).collect();
        let xs: Vec<Image64> = (0..n).map(|_| random_image(&mut rng, 16, 16, 3)).collect();
        let t = Tensor64::from_vec(&[n, k], logits.clone()).map_err(err)?;
        let got = multitask_loss(&t, &labels, &xt, &xs, 50.0).map_err(err)?;
        let want: f64 = (0..n)
            .map(|i| softmax_ce(&logits[i * k..(i + 1) * k], labels[i]) + 50.0 * satd_oracle(&xs[i], &xt[i]))
            .sum();
        track(got, want);

        // feature codec
        let d = 8;
        let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
        };
        let (fr, fh, cf) = (rows(&mut rng), rows(&mut rng), rows(&mut rng));
        let (l1, l2) = (rng.random_range(1e-8..1e-4), rng.random_range(1e-7..7e-2));
        let got = feature_codec_loss(&fr, &fh, &cf, &xs, &xt, l1, l2).map_err(err)?;
        let dist: f64 = fr.iter().flatten().zip(fh.iter().flatten()).map(|(a, b)| (a - b) * (a - b)).sum();
        let rate: f64 = cf.iter().flatten().map(|v| v.abs()).sum();
        let structure: f64 = (0..n).map(|i| satd_oracle(&xs[i], &xt[i])).sum();
        track(got.total, dist + l1 * rate + l2 * structure);
        track(got.distortion, dist);
        track(got.rate, rate);
        track(got.structure, structure);

        // generator
        let x = random_image(&mut rng, 32, 32, 3);
        let levels: Vec<Image64> = [8, 16, 32].iter().map(|&s| random_image(&mut rng, s, s, 3)).collect();
        let got = generator_loss(&levels, &x).map_err(err)?;
        let want: f64 = levels
            .iter()
            .map(|l| {
                let t = if l.height() == 32 { x.clone() } else { resize_bicubic(&x, l.height(), l.width()) };
                satd_oracle(l, &t)
            })
            .sum();
        track(got, want);

        // rate-distortion
        let a = random_image(&mut rng, 16, 24, 3);
        let b = random_image(&mut rng, 16, 24, 3);
        let mut p: Vec<f64> = (0..200).map(|_| rng.random_range(1e-4..1.0)).collect();
        p[0] = 0.0;
        p[1] = 1e-12;
        let rw = rng.random_range(1e-4..1e-1);
        let got = rd_loss(&a, &b, &p, rw).map_err(err)?;
        let bits: f64 = p.iter().map(|&v| -(v.max(1e-9)).log2()).sum();
        track(got, rw * bits / (16.0 * 24.0) + satd_oracle(&a, &b));
    }
    check(worst <= 1e-6, format!("max rel error {worst:e}"))?;
    Ok(format!("multitask, feature codec, generator and rate-distortion losses, max rel error {worst:.1e}"))
}

/// Central difference with step `h`.
fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn c9_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let err = |e: sfc_core::Error| e.to_string();
    let h = 1e-6;
    let margin = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut note = |a: f64, b: f64| {
        worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
    };

    // multitask: logits and x_trans
    let (n, k) = (2, 4);
    let (xt, xs) = loop {
        let xt: Vec<Image64> = (0..n).map(|_| random_image(&mut rng, 8, 16, 3)).collect();
        let xs: Vec<Image64> = (0..n).map(|_| random_image(&mut rng, 8, 16, 3)).collect();
        if (0..n).all(|i| min_abs_coefficient(&xs[i], &xt[i]) > margin) {
            break (xt, xs);
        }
    };
    let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = vec![1, 3];
    let lt = Tensor64::from_vec(&[n, k], logits.clone()).map_err(err)?;
    let g = multitask_loss_with_grad(&lt, &labels, &xt, &xs, 50.0).map_err(err)?;
    for j in 0..n * k {
        let f = |v: f64| {
            let mut l = logits.clone();
            l[j] = v;
            multitask_loss(&Tensor64::from_vec(&[n, k], l).unwrap(), &labels, &xt, &xs, 50.0).unwrap()
        };
        note(g.d_logits.data()[j], fd(f, logits[j], h));
        checked += 1;
    }
    for _ in 0..60 {
        let (i, y, x, c) = (rng.random_range(0..n), rng.random_range(0..8), rng.random_range(0..16), rng.random_range(0..3));
        let f = |v: f64| {
            let mut t = xt.clone();
            t[i].set(y, x, c, v);
            multitask_loss(&lt, &labels, &t, &xs, 50.0).unwrap()
        };
        note(g.d_x_trans[i].get(y, x, c), fd(f, xt[i].get(y, x, c), h));
        checked += 1;
    }

    // generator: every level
    let x = random_image(&mut rng, 32, 32, 3);
    let sizes = [8usize, 16, 32];
    let targets: Vec<Image64> = sizes
        .iter()
        .map(|&s| if s == 32 { x.clone() } else { resize_bicubic(&x, s, s) })
        .collect();
    let levels = loop {
        let levels: Vec<Image64> = sizes.iter().map(|&s| random_image(&mut rng, s, s, 3)).collect();
        if levels.iter().zip(&targets).all(|(l, t)| min_abs_coefficient(l, t) > margin) {
            break levels;
        }
    };
    let (_, grads) = generator_loss_with_grad(&levels, &x).map_err(err)?;
    for _ in 0..60 {
        let l = rng.random_range(0..sizes.len());
        let s = sizes[l];
        let (y, xx, c) = (rng.random_range(0..s), rng.random_range(0..s), rng.random_range(0..3));
        let f = |v: f64| {
            let mut lv = levels.clone();
            lv[l].set(y, xx, c, v);
            generator_loss(&lv, &x).unwrap()
        };
        note(grads[l].get(y, xx, c), fd(f, levels[l].get(y, xx, c), h));
        checked += 1;
    }
    check(worst <= 1e-3, format!("max rel error {worst:e}"))?;
    Ok(format!("{checked} coordinates, max rel error {worst:.1e}"))
}

fn c10_config() -> Outcome {
    let c = ExperimentConfig::paper();
    let fc = &c.feature_codec.model;
    check(c.extractor.model.lambda_s == 50.0, "lambda_s")?;
    check(fc.r_clip == 20.0, "r_clip")?;
    check(fc.noise_half_width == 0.5, "noise half width")?;
    let want = LrSchedule {
        base: 1e-4,
        decay: 0.9,
        every: 5,
        floor: 1e-5,
    };
    check(c.generator.train.lr == want, format!("generator lr schedule {:?}", c.generator.train.lr))?;
    let lr = c.generator.train.lr;
    check(close(lr.at(0), 1e-4, 1e-12) && close(lr.at(4), 1e-4, 1e-12), "lr before the first decay")?;
    check(close(lr.at(5), 9e-5, 1e-12) && close(lr.at(10), 8.1e-5, 1e-12), "lr decay")?;
    check(lr.at(500) == 1e-5, "lr floor")?;
    for t in [&c.extractor.train, &c.feature_codec.train, &c.enhancement.train] {
        check(t.lr.base == 1e-4, "stage base lr")?;
    }
    let range = |v: &[f64], lo: f64, hi: f64, name: &str| -> Result<(), String> {
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        check(close(min, lo, 1e-9) && close(max, hi, 1e-9), format!("{name} spans [{min:e}, {max:e}]"))
    };
    range(&c.sweeps.lambda_1, 1e-8, 1e-4, "lambda_1")?;
    range(&c.sweeps.lambda_2, 1e-7, 7e-2, "lambda_2")?;
    range(&c.sweeps.rate_weight, 1e-4, 1e-1, "rate_weight")?;
    check(c.sweeps.rate_weight.len() >= 4 && c.sweeps.lambda_1.len() >= 4, "sweep sizes")?;
    Ok("lambda_s 50, r_clip 20, noise +-0.5, lr 1e-4 x0.9/5 epochs floor 1e-5, sweep ranges".into())
}

// ---- staged toy run ----

struct Staged {
    pipeline: Pipeline<f32>,
    report: EvalReport,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn staged_run() -> Result<Staged, String> {
    let err = |e: sfc_core::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    for (label, images) in synth_faces::<f32>(30, 50, 64, 7) {
        for (i, img) in images.iter().enumerate() {
            save_png(img, &data.join(format!("id{label:04}")).join(format!("{i:04}.png"))).map_err(err)?;
        }
    }
    let mut cfg = ExperimentConfig::toy();
    cfg.output_dir = dir.path().join("out");
    std::env::remove_var(sfc_core::pipeline::OUTPUT_ENV);
    let p = Pipeline::<f32>::new(cfg).map_err(err)?;
    let t = Instant::now();
    p.ingest(Some(&data)).map_err(err)?;
    p.run_stage(Stage::Extractor, false).map_err(err)?;
    p.run_stage(Stage::FeatureCodec, true).map_err(err)?;
    p.run_stage(Stage::Generator, false).map_err(err)?;
    p.run_stage(Stage::Enhancement, true).map_err(err)?;
    let report = p.evaluate(None).map_err(err)?;
    let elapsed = t.elapsed();
    Ok(Staged {
        pipeline: p,
        report,
        elapsed,
        _dir: dir,
    })
}

fn c5_layering(s: &Staged) -> Outcome {
    let err = |e: sfc_core::Error| e.to_string();
    let models = s.pipeline.models().map_err(err)?;
    let test = s.pipeline.split(Split::Test).map_err(err)?;
    let member = models.enhancement_for(s.pipeline.cfg.enhancement.model.rate_weight);
    for (i, x) in test.images.iter().enumerate() {
        let full = models.encode_image(x, member).map_err(err)?;
        let base_only = sfc_core::bitstream::strip_enhancement(&full).map_err(err)?;
        let a = models.decode_feature(&full).map_err(err)?;
        let b = models.decode_feature(&base_only).map_err(err)?;
        let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        check(bits(&a) == bits(&b), format!("test image {i}: base features differ"))?;
    }
    Ok(format!("{} test images decode identical base features from full and base-only streams", test.images.len()))
}

fn c6_base_sweep(s: &Staged) -> Outcome {
    let r = &s.report;
    check(r.codecs.len() >= 4, "fewer than 4 sweep points")?;
    let mut pts: Vec<_> = r.codecs.iter().collect();
    pts.sort_by(|a, b| a.base_bpp.total_cmp(&b.base_bpp));
    let sat_id = &r.codecs[r.test_saturation].id;
    let sat = pts.iter().position(|p| &p.id == sat_id).expect("saturation point is in the sweep");
    let acc: Vec<f64> = pts.iter().map(|p| p.accuracy).collect();
    let curve = acc.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ");
    check(
        acc[..=sat].windows(2).all(|w| w[1] >= w[0]),
        format!("accuracy decreases before saturation: {curve}"),
    )?;
    let gap = (r.uncompressed.accuracy - acc[sat]).abs();
    check(gap <= 0.005, format!("saturation accuracy {:.4} vs uncompressed {:.4}", acc[sat], r.uncompressed.accuracy))?;
    check(s.elapsed < Duration::from_secs(30 * 60), format!("staged run took {:.0?}", s.elapsed))?;
    Ok(format!(
        "accuracy by bpp [{curve}], saturation {:.4} vs uncompressed {:.4}, staged run {:.0?}",
        acc[sat], r.uncompressed.accuracy, s.elapsed
    ))
}

fn c7_enhancement_sweep(s: &Staged) -> Outcome {
    let r = &s.report;
    check(r.enhancement.len() >= 4, "fewer than 4 sweep points")?;
    let mut pts: Vec<_> = r.enhancement.iter().collect();
    pts.sort_by(|a, b| a.total_bpp.total_cmp(&b.total_bpp));
    let psnr: Vec<f64> = pts.iter().map(|p| p.psnr).collect();
    let ssim: Vec<f64> = pts.iter().map(|p| p.ms_ssim).collect();
    let (ip, is) = (count_inversions(&psnr), count_inversions(&ssim));
    check(ip <= 1 && is <= 1, format!("{ip} PSNR and {is} MS-SSIM inversions"))?;
    for p in &pts {
        check(
            p.min_psnr_gain > 0.0,
            format!("{}: full decode not above base-only on some image (min gain {:.3} dB)", p.id, p.min_psnr_gain),
        )?;
    }
    let summary = pts
        .iter()
        .map(|p| format!("{:.3}bpp/{:.2}dB/{:.4}", p.total_bpp, p.psnr, p.ms_ssim))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(format!("{summary}; base-only {:.2} dB; {ip}+{is} inversions", r.base.psnr))
}

/// Not a numbered criterion: test-split enhancement rate against validation.
fn enhancement_rate_matches_validation(s: &Staged) -> Outcome {
    let members = s.pipeline.enhancement_members().map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for ((_, stats), p) in members.iter().zip(&s.report.enhancement) {
        worst = worst.max((p.enhancement_bpp / stats.bpp - 1.0).abs());
    }
    check(worst <= 0.2, format!("enhancement bpp off validation by {:.1}%", 100.0 * worst))?;
    Ok(format!("enhancement bpp within {:.1}% of validation", 100.0 * worst))
}

#[test]
fn acceptance() {
    let staged = staged_run();
    let on_staged = |f: fn(&Staged) -> Outcome| match &staged {
        Ok(s) => f(s),
        Err(e) => Err(format!("staged run failed: {e}")),
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("1 satd vs dense hadamard", c1_satd()),
        ("2 lossless transport", c2_transport()),
        ("3 pyramid round trip", c3_pyramid()),
        ("4 minmax round trip", c4_minmax()),
        ("5 base layer independence", on_staged(c5_layering)),
        ("6 base rate sweep", on_staged(c6_base_sweep)),
        ("7 enhancement rate sweep", on_staged(c7_enhancement_sweep)),
        ("8 loss oracles", c8_losses()),
        ("9 finite-difference gradients", c9_gradients()),
        ("10 configuration constants", c10_config()),
    ];
    let mut failed = Vec::new();
    for (name, r) in &results {
        match r {
            Ok(m) => println!("[PASS] {name}: {m}"),
            Err(m) => {
                println!("[FAIL] {name}: {m}");
                failed.push(*name);
            }
        }
    }
    match on_staged(enhancement_rate_matches_validation) {
        Ok(m) => println!("[info] {m}"),
        Err(m) => println!("[info] {m}"),
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
