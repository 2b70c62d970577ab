mod common;

use common::*;
use emr_core::checkpoint;
use emr_core::network::{Genotype, ModelWeights, NetworkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn p(path: &std::path::Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn desk_search_writes_a_full_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("s0");
    let out = emr(&["search", "--preset", "desk", "--fold", "0", "--seed", "7", "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(genotype_indices(&run).len(), 6);
    for f in ["config.json", "folds.json", "search.log.jsonl", "alpha.json", "genotype.json", "checkpoint.bin", "timing.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert!(!run.join(".lock").exists());
    let alpha = read_json(&run.join("alpha.json"));
    assert_eq!(alpha["seed"], 7);
    assert_eq!(alpha["probs"].as_array().unwrap().len(), 6);
    let log = std::fs::read_to_string(run.join("search.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);

    // The snapshot alone reproduces the run.
    let again = tmp.path().join("again");
    let out = emr(&["search", "--config", p(&run.join("config.json")), "--out", p(&again)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["alpha.json", "genotype.json", "search.log.jsonl", "checkpoint.bin"] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_paths_exit_two_and_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let out = emr(&["search", "--dataset", "/nowhere/manifest.json", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/nowhere/manifest.json"));
    let out = emr(&["search", "--config", "/nowhere/cfg.json"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/nowhere/cfg.json"));
    let out = emr(&["eval", "--weights", "/nowhere/checkpoint.bin", "--out", p(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/nowhere/checkpoint.bin"));
    assert_eq!(code(&emr(&["search", "--fold", "3"])), 2);
    assert_eq!(code(&emr(&["frobnicate"])), 2);
}

#[test]
fn homogeneous_flag_skips_search() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("h");
    let out = emr(&["search", "--homogeneous", "O8", "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(genotype_indices(&run), vec![8; 6]);
    assert!(!run.join("alpha.json").exists());
}

#[test]
fn ensemble_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = |rng: &mut ChaCha8Rng| -> Vec<[f64; 8]> {
        (0..6)
            .map(|_| {
                let r: [f64; 8] = std::array::from_fn(|_| rng.gen_range(0.01..1.0));
                let s: f64 = r.iter().sum();
                r.map(|v| v / s)
            })
            .collect()
    };
    // Identical inputs: each input's argmax.
    let same = rows(&mut rng);
    for name in ["a", "b", "c"] {
        fake_search_run(&tmp.path().join(name), &same, 3);
    }
    let out = emr(&["ensemble", p(&tmp.path().join("a")), p(&tmp.path().join("b")), p(&tmp.path().join("c")), "--out", p(&tmp.path().join("e1"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(genotype_indices(&tmp.path().join("e1")), brute_force_ensemble(&[same.clone()]));

    // Argument order does not change the output file.
    let sets: Vec<Vec<[f64; 8]>> = (0..3).map(|_| rows(&mut rng)).collect();
    for (i, s) in sets.iter().enumerate() {
        fake_search_run(&tmp.path().join(format!("r{i}")), s, 3);
    }
    let r = |i: usize| tmp.path().join(format!("r{i}"));
    assert_eq!(code(&emr(&["ensemble", p(&r(0)), p(&r(1)), p(&r(2)), "--out", p(&tmp.path().join("o1"))])), 0);
    assert_eq!(code(&emr(&["ensemble", p(&r(2)), p(&r(0)), p(&r(1)), "--out", p(&tmp.path().join("o2"))])), 0);
    let g1 = std::fs::read(tmp.path().join("o1/genotype.json")).unwrap();
    assert_eq!(g1, std::fs::read(tmp.path().join("o2/genotype.json")).unwrap());
    assert_eq!(genotype_indices(&tmp.path().join("o1")), brute_force_ensemble(&sets));
    let prov = read_json(&tmp.path().join("o1/genotype.json"));
    assert_eq!(prov["sources"].as_array().unwrap().len(), 3);

    // Mismatched T is a data error; a missing alpha file names its path.
    fake_search_run(&tmp.path().join("short"), &sets[0][..3], 3);
    let out = emr(&["ensemble", p(&r(0)), p(&r(1)), p(&tmp.path().join("short")), "--out", p(&tmp.path().join("o3"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let out = emr(&["ensemble", p(&r(0)), p(&r(1)), p(&tmp.path().join("none")), "--out", p(&tmp.path().join("o4"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("none/alpha.json"));
}

#[test]
fn eval_of_full_sampling_passthrough_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let net = NetworkConfig::desk();
    let g = Genotype::parse("O1 O2 O3|O4 O5 O6").unwrap();
    let mut model = ModelWeights::new_fixed(&net, &g, 0).unwrap();
    model.store_mut().fill(0.0);
    let ckpt = tmp.path().join("checkpoint.bin");
    checkpoint::save(&ckpt, &model, 0, 0).unwrap();
    let run = tmp.path().join("eval");
    let out = emr(&["eval", "--rate", "1.0", "--weights", p(&ckpt), "--emit-images", "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = read_json(&run.join("metrics.json"));
    assert!((m["network"]["ssim"]["mean"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(m["network"]["psnr"]["mean"].as_f64().unwrap() > 90.0);
    let pngs = std::fs::read_dir(run.join("images")).unwrap().count();
    assert_eq!(pngs, 4 * m["network"]["ssim"]["per_image"].as_array().unwrap().len());
}

#[test]
fn retrain_with_images_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("r");
    let out = emr(&["retrain", "--genotype", "O5 O8 O8|O8 O8 O8", "--emit-images", "--seed", "3", "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = read_json(&run.join("metrics.json"));
    assert_eq!(m["seed"], 3);
    assert!(m["config_hash"].as_str().unwrap().len() == 64);
    assert!(run.join("images").read_dir().unwrap().count() > 0);
    let eval_run = tmp.path().join("e");
    let out = emr(&["eval", "--seed", "3", "--weights", p(&run.join("checkpoint.bin")), "--out", p(&eval_run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // Checkpoints hold f32 weights, so reloaded metrics agree to rounding.
    let e = read_json(&eval_run.join("metrics.json"));
    for k in ["psnr", "ssim"] {
        let (a, b) = (e["network"][k]["mean"].as_f64().unwrap(), m["network"][k]["mean"].as_f64().unwrap());
        assert!((a - b).abs() < 1e-6, "{k}: {a} vs {b}");
    }
    let out = emr(&["report", p(&run), "--out", p(&tmp.path().join("rep"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("timing total"));
    let rep = read_json(&tmp.path().join("rep/report.json"));
    assert!(rep["network"]["psnr"]["mean"].is_number());
    // Retrain without an architecture is a usage error.
    assert_eq!(code(&emr(&["retrain", "--out", p(&tmp.path().join("n"))])), 2);
}

#[test]
fn audit_params_on_reference_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run");
    assert_eq!(code(&emr(&["mask", "--preset", "paper", "--height", "32", "--width", "32", "--out", p(&cfg)])), 0);
    let out = emr(&["audit-params", "--config", p(&cfg.join("config.json"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let totals: Vec<usize> = stdout(&out)
        .lines()
        .filter_map(|l| l.split("total ").nth(1))
        .map(|t| t.split_whitespace().next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 2);
    assert!(totals.iter().all(|n| (300_000..=360_000).contains(n)), "{totals:?}");
}

#[test]
fn mask_and_phantom_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tmp.path().join("m");
    assert_eq!(code(&emr(&["mask", "--height", "64", "--width", "48", "--seed", "5", "--out", p(&m)])), 0);
    let mask = emr_core::SamplingMask::from_json(&std::fs::read_to_string(m.join("mask.json")).unwrap()).unwrap();
    assert_eq!(mask.lines().len(), 10);
    assert!(m.join("mask.png").exists());
    let ph = tmp.path().join("ph");
    let out = emr(&["phantom", "--emit-images", "--out", p(&ph)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ds = emr_core::data::load_dataset(&ph.join("manifest.json")).unwrap();
    assert_eq!((ds.subjects.len(), ds.slice_count()), (12, 96));
}

#[test]
fn locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join(".lock"), "1").unwrap();
    let out = emr(&["mask", "--out", p(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("locked"));
}

#[test]
fn worker_count_and_training_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let out = emr_env(&["mask", "--out", p(&tmp.path().join("a"))], &[("EMR_NUM_WORKERS", "0")]);
    assert_eq!(code(&out), 2);
    let out = emr_env(&["mask", "--out", p(&tmp.path().join("b"))], &[("EMR_NUM_WORKERS", "1")]);
    assert_eq!(code(&out), 0);

    // A diverging learning rate surfaces as a training failure.
    let mut cfg = read_json(&tmp.path().join("b/config.json"));
    cfg["train"]["lr_w"] = 1e12.into();
    cfg["train"]["retrain_epochs"] = 3.into();
    let path = tmp.path().join("diverge.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = emr(&["retrain", "--config", p(&path), "--genotype", "O1 O1 O1|O1 O1 O1", "--out", p(&tmp.path().join("c"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}
