mod common;

use cbpfa::eval::{baseline_upscale, psnr, run_benchmark, BenchmarkConfig, Method, Psnr};
use cbpfa::patches::{extract_patches, reassemble};
use cbpfa::resample::{downsample, resize, upscale, Filter};
use cbpfa::synthetic::scene;
use cbpfa::{save_image, ImagePlane, YCbCrImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn plane(w: usize, h: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImagePlane::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reassemble_inverts_extract(w in 4usize..40, h in 4usize..40, ps in 1usize..9, stride in 1usize..9, seed in any::<u64>()) {
        prop_assume!(ps <= w.min(h) && stride <= ps);
        let img = plane(w, h, seed);
        let back = reassemble(&extract_patches(&img, ps, stride).unwrap(), w, h).unwrap();
        prop_assert_eq!(back.data(), img.data());
    }

    #[test]
    fn psnr_is_symmetric(w in 1usize..20, h in 1usize..20, a in any::<u64>(), b in any::<u64>()) {
        let (x, y) = (plane(w, h, a), plane(w, h, b));
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
    }

    #[test]
    fn resamplers_keep_constant_planes(w in 2usize..24, h in 2usize..24, v in 0.0f64..255.0, ratio in 2usize..4) {
        let flat = ImagePlane::filled(w * ratio, h * ratio, v);
        for f in [Filter::Nearest, Filter::Bilinear, Filter::Bicubic] {
            let up = upscale(&ImagePlane::filled(w, h, v), ratio, f).unwrap();
            prop_assert!(up.data().iter().all(|p| (p - v).abs() < 1e-9));
            let r = resize(&flat, w + 1, h + 3, f).unwrap();
            prop_assert!(r.data().iter().all(|p| (p - v).abs() < 1e-9));
        }
        let down = downsample(&flat, ratio).unwrap();
        prop_assert!(down.data().iter().all(|p| (p - v).abs() < 1e-9));
    }
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..200 {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(n..=6);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let assign = common::hungarian(&cost);
        let mut seen = assign.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), n);
        let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        let best = common::brute_force_assignment(&cost);
        assert!((total - best).abs() < 1e-12, "trial {trial}: {total} vs {best}");
    }
}

#[test]
fn checkerboard_reduces_to_mid_gray() {
    let board = ImagePlane::from_fn(32, 32, |r, c| if (r + c) % 2 == 0 { 255.0 } else { 0.0 });
    let small = downsample(&board, 2).unwrap();
    for r in 2..14 {
        for c in 2..14 {
            assert!(
                (small.get(r, c) - 127.5).abs() < 1.0,
                "({r}, {c}) = {}",
                small.get(r, c)
            );
        }
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let img = scene(48, 48, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let unit: Vec<f64> = (0..48 * 48).map(|_| rng.sample(StandardNormal)).collect();
    let mut last = f64::INFINITY;
    for sigma in [1.0, 4.0, 16.0] {
        let noisy = ImagePlane::new(
            48,
            48,
            img.data().iter().zip(&unit).map(|(v, e)| v + sigma * e).collect(),
        )
        .unwrap();
        let p = psnr(&img, &noisy).unwrap().db().unwrap();
        assert!(p < last, "sigma {sigma}: {p} not below {last}");
        last = p;
    }
    assert_eq!(psnr(&img, &img).unwrap(), Psnr::Identical);
}

#[test]
fn interpolation_ranking_on_scenes() {
    let mut totals = [0.0; 3];
    let methods = [Method::Nearest, Method::Bilinear, Method::Bicubic];
    for seed in 0..12 {
        let hr = scene(64, 64, 100 + seed);
        let lr = downsample(&hr, 2).unwrap();
        for (t, m) in totals.iter_mut().zip(methods) {
            *t += psnr(&hr, &baseline_upscale(&lr, 2, m).unwrap()).unwrap().db().unwrap();
        }
    }
    assert!(
        totals[2] >= totals[1] && totals[1] >= totals[0],
        "nearest, bilinear, bicubic: {totals:?}"
    );
}

#[test]
fn benchmark_rows_cover_every_image_and_method() {
    let tmp = tempfile::tempdir().unwrap();
    for s in 0..3 {
        save_image(
            &YCbCrImage::from_luma(scene(30, 26, s)),
            tmp.path().join(format!("s{s}.png")),
        )
        .unwrap();
    }
    std::fs::write(tmp.path().join("broken.png"), b"not an image").unwrap();
    let methods = [Method::Bicubic, Method::Nearest];
    let out = tmp.path().join("report.csv");
    let report = run_benchmark(tmp.path(), None, &methods, &BenchmarkConfig::default(), Some(&out)).unwrap();
    assert_eq!(report.rows.len(), 4 * methods.len());
    assert_eq!(
        report.rows.iter().filter(|r| r.warning.is_some()).count(),
        methods.len()
    );
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1 + 8);
    let only = run_benchmark(tmp.path(), None, &[Method::Bicubic], &BenchmarkConfig::default(), None).unwrap();
    let again = run_benchmark(tmp.path(), None, &[Method::Bicubic], &BenchmarkConfig::default(), None).unwrap();
    let p: Vec<_> = only.rows.iter().map(|r| r.psnr).collect();
    assert_eq!(p, again.rows.iter().map(|r| r.psnr).collect::<Vec<_>>());
}
