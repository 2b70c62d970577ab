use emr_core::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
}

#[test]
fn uniform_tenth_difference_is_twenty_db() {
    for n in [1, 64, 256 * 256] {
        let a = random_image(n, 1).iter().map(|v| v * 0.5).collect::<Vec<_>>();
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }
}

#[test]
fn psnr_matches_direct_formula() {
    for seed in 0..20 {
        let (a, b) = (random_image(300, seed), random_image(300, seed + 100));
        let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 300.0;
        assert!((psnr(&a, &b).unwrap() - (-10.0 * mse.log10())).abs() < 1e-9);
    }
}

#[test]
fn psnr_grows_as_error_shrinks() {
    let a = random_image(100, 3);
    let e = random_image(100, 4);
    let mut last = f64::NEG_INFINITY;
    for scale in [1.0, 0.5, 0.1, 0.01] {
        let b: Vec<f64> = a.iter().zip(&e).map(|(x, d)| x + scale * d).collect();
        let p = psnr(&a, &b).unwrap();
        assert!(p > last);
        last = p;
    }
}

#[test]
fn ssim_identical_is_one() {
    for &(h, w) in &[(32, 32), (11, 11), (40, 17), (5, 9)] {
        let a = random_image(h * w, (h * w) as u64);
        assert_eq!(ssim(&a, &a, h, w).unwrap(), 1.0);
    }
}

#[test]
fn ssim_constant_images_closed_form() {
    // Zero variances: the contrast-structure factor is C2 / C2 = 1.
    let c1 = (0.01f64).powi(2);
    for &(mx, my) in &[(0.2, 0.7), (0.0, 1.0), (0.5, 0.5), (0.9, 0.1)] {
        let (h, w) = (24, 19);
        let a = vec![mx; h * w];
        let b = vec![my; h * w];
        let closed = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        for v in ssim_map(&a, &b, h, w).unwrap() {
            assert!((v - closed).abs() < 1e-9, "{v} vs {closed}");
        }
        assert!((ssim(&a, &b, h, w).unwrap() - closed).abs() < 1e-9);
    }
}

#[test]
fn magnitude_matches_elementwise_oracle() {
    let re = random_image(50, 5);
    let im: Vec<f64> = random_image(50, 6).iter().map(|v| v - 0.5).collect();
    let img = emr_core::ComplexImage::from_parts(5, 10, &re, &im).unwrap();
    for ((m, r), i) in magnitude(&img).iter().zip(&re).zip(&im) {
        assert!((m - (r * r + i * i).sqrt()).abs() < 1e-15);
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    assert!(psnr(&[0.0; 4], &[0.0; 5]).is_err());
    assert!(ssim(&[0.0; 16], &[0.0; 16], 4, 5).is_err());
}

#[test]
fn fold_aggregation_matches_two_pass() {
    let folds: Vec<MetricReport> = (0..3)
        .map(|f| {
            let pairs: Vec<(f64, f64)> = (0..4).map(|i| (30.0 + f as f64 + i as f64 * 0.1, 0.9 - 0.01 * f as f64)).collect();
            MetricReport::from_pairs(&pairs).unwrap()
        })
        .collect();
    let cv = CrossValidationReport::from_folds(&folds).unwrap();
    let means: Vec<f64> = folds.iter().map(|f| f.psnr.mean).collect();
    let m = means.iter().sum::<f64>() / 3.0;
    let s = (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((cv.psnr.mean - m).abs() < 1e-12 && (cv.psnr.std - s).abs() < 1e-12);
    assert_eq!(cv.psnr.per_fold, means);
    let json: serde_json::Value = serde_json::to_value(&cv).unwrap();
    for key in ["psnr", "ssim"] {
        for field in ["per_fold", "mean", "std"] {
            assert!(json[key].get(field).is_some(), "{key}.{field}");
        }
    }
    let report = serde_json::to_value(&folds[0]).unwrap();
    for key in ["psnr", "ssim"] {
        for field in ["mean", "std", "per_image"] {
            assert!(report[key].get(field).is_some());
        }
    }
}

#[test]
fn reference_targets_are_shipped() {
    assert_eq!(REFERENCE_TARGETS[0].psnr_mean, 34.8653);
    assert_eq!(REFERENCE_TARGETS[1].ssim_std, 0.0011);
}

proptest! {
    #[test]
    fn prop_ssim_bounded_and_symmetric(seed in any::<u64>(), h in 1usize..30, w in 1usize..30) {
        let a = random_image(h * w, seed);
        let b = random_image(h * w, seed ^ 0xabc);
        let s = ssim(&a, &b, h, w).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&b, &a, h, w).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn prop_std_nonnegative(values in proptest::collection::vec(-1e3f64..1e3, 1..50)) {
        let (_, std) = mean_std(&values);
        prop_assert!(std >= 0.0);
    }
}
