use std::fs;

use emr_core::data::*;
use emr_core::kspace::fft2c;
use emr_core::metrics::{magnitude, psnr};
use emr_core::{ComplexImage, Error};

fn dyadic_dataset() -> Dataset {
    // Values exactly representable in f32 with a per-subject max of 1, so
    // export + load must be lossless.
    let subjects = (0..3)
        .map(|s| Subject {
            id: format!("p{s}"),
            slices: (0..2)
                .map(|k| (0..64).map(|i| ((i * 7 + s * 3 + k) % 17) as f64 / 16.0).map(|v: f64| v.min(1.0)).collect())
                .collect(),
        })
        .collect();
    Dataset { name: "dyadic".into(), height: 8, width: 8, subjects }
}

#[test]
fn export_then_load_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dyadic_dataset();
    let manifest = export_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back, ds);
    assert!(dir.path().join(slice_file_name("p1", 1)).exists());

    // Arbitrary data: a second round trip reproduces the first exactly.
    let ph = phantom_dataset(2, 2, 16, 3);
    let d2 = tempfile::tempdir().unwrap();
    let once = load_dataset(&export_dataset(&ph, d2.path()).unwrap()).unwrap();
    let d3 = tempfile::tempdir().unwrap();
    let twice = load_dataset(&export_dataset(&once, d3.path()).unwrap()).unwrap();
    assert_eq!(once, twice);
    for s in &once.subjects {
        let max = s.slices.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
        assert_eq!(max, 1.0);
        assert!(s.slices.iter().flatten().all(|&v| v >= 0.0));
    }
}

#[test]
fn cardiac_sized_manifest_loads_with_its_counts() {
    // 33 subjects, 4480 slices in total; tiny 4x4 slices keep this quick.
    let dir = tempfile::tempdir().unwrap();
    let per_subject: Vec<usize> = (0..33).map(|s| if s < 25 { 136 } else { 135 }).collect();
    assert_eq!(per_subject.iter().sum::<usize>(), 4480);
    let ds = Dataset {
        name: "cardiac-shaped".into(),
        height: 4,
        width: 4,
        subjects: per_subject
            .iter()
            .enumerate()
            .map(|(s, &n)| Subject { id: format!("{s:02}"), slices: vec![vec![0.5; 16]; n] })
            .collect(),
    };
    let back = load_dataset(&export_dataset(&ds, dir.path()).unwrap()).unwrap();
    assert_eq!(back.subjects.len(), 33);
    assert_eq!(back.slice_count(), 4480);
}

fn ingest_path(e: Error) -> std::path::PathBuf {
    match e {
        Error::Ingest { path, .. } => path,
        other => panic!("expected an ingest error, got {other:?}"),
    }
}

#[test]
fn corrupted_inputs_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = export_dataset(&dyadic_dataset(), dir.path()).unwrap();
    let victim = dir.path().join(slice_file_name("p2", 0));

    fs::write(&victim, [0u8; 10]).unwrap();
    assert_eq!(ingest_path(load_dataset(&manifest).unwrap_err()), victim);

    let mut nan = vec![0u8; 256];
    nan[..4].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&victim, &nan).unwrap();
    assert_eq!(ingest_path(load_dataset(&manifest).unwrap_err()), victim);

    let mut neg = vec![0u8; 256];
    neg[8..12].copy_from_slice(&(-1.0f32).to_le_bytes());
    fs::write(&victim, &neg).unwrap();
    assert_eq!(ingest_path(load_dataset(&manifest).unwrap_err()), victim);

    fs::remove_file(&victim).unwrap();
    let err = load_dataset(&manifest).unwrap_err();
    assert!(err.to_string().contains(&victim.display().to_string()));

    let missing = dir.path().join("nope.json");
    assert_eq!(ingest_path(load_dataset(&missing).unwrap_err()), missing);

    let text = fs::read_to_string(&manifest).unwrap().replacen('{', "{\"extra\": 1,", 1);
    fs::write(&manifest, text).unwrap();
    assert!(load_dataset(&manifest).is_err());
}

#[test]
fn zero_filled_baseline_golden_value() {
    let img = ComplexImage::from_real(256, 256, &shepp_logan(256, 256).unwrap()).unwrap();
    let pair = simulate_pair(&img, 0.15, 2024).unwrap();
    let p = psnr(&magnitude(&pair.y), &magnitude(&pair.x)).unwrap();
    assert!(p.is_finite() && p < 40.0);
    assert!((p - GOLDEN).abs() < 1e-9, "{p}");
    // Deterministic in the seed.
    let again = simulate_pair(&img, 0.15, 2024).unwrap();
    assert_eq!(again, pair);
    assert_eq!(pair.mask.lines().len(), 38);
    let k = fft2c(&pair.x).unwrap();
    for i in (0..256).filter(|&i| !pair.mask.is_sampled(i)) {
        assert!((0..256).all(|j| k.at(i, j).0.abs() < 1e-12 && k.at(i, j).1.abs() < 1e-12));
    }
}

/// Zero-filled PSNR of the 256x256 phantom at 15% sampling, mask seed 2024.
const GOLDEN: f64 = 13.808435232725287;
