use std::collections::HashSet;

use emr_core::checkpoint;
use emr_core::data::{phantom_dataset, simulate_subjects};
use emr_core::network::{Genotype, ModelWeights, NetworkConfig};
use emr_core::optim::Adam;
use emr_core::presets;
use emr_core::searchspace::OperationSpec;
use emr_core::training::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{i:03}")).collect()
}

/// `train` is the train count of a fold whose test fold is the largest.
fn check_partition(n: usize, test_sizes: [usize; 3], train: usize, val: usize) {
    let all = ids(n);
    for seed in [0, 1, 7, 2024] {
        let mut union = HashSet::new();
        let mut sizes = Vec::new();
        for fold in 0..3 {
            let s = split_folds(&all, fold, seed).unwrap();
            assert_eq!(s.fold_id, fold);
            assert_eq!(s.val.len(), val, "n={n} fold {fold}");
            assert_eq!(s.train.len(), train + test_sizes[0] - s.test.len());
            let (tr, va, te): (HashSet<_>, HashSet<_>, HashSet<_>) =
                (s.train.iter().collect(), s.val.iter().collect(), s.test.iter().collect());
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            assert_eq!(tr.len() + va.len() + te.len(), n);
            sizes.push(s.test.len());
            for id in &s.test {
                assert!(union.insert(id.clone()), "{id} tested twice");
            }
        }
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, test_sizes);
        assert_eq!(union.len(), n);
    }
}

#[test]
fn fold_partitions_without_leakage() {
    check_partition(33, [11, 11, 11], 18, 4);
    // A 12-subject test fold leaves 23 = 19 + 4; the 11-subject one leaves 24 = 20 + 4.
    check_partition(35, [12, 12, 11], 19, 4);
    assert!(split_folds(&ids(33), 3, 0).is_err());
    assert!(split_folds(&ids(2), 0, 0).is_err());
    assert_ne!(split_folds(&ids(33), 0, 1).unwrap().test, split_folds(&ids(33), 0, 2).unwrap().test);
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let ds = phantom_dataset(1, 2, 16, 1);
    let samples = simulate_subjects(&ds, &ds.subject_ids(), 0.3, 1).unwrap();
    let net = NetworkConfig { components: 1, channels: 3, use_bn: false, ..NetworkConfig::desk() };
    let g = Genotype::parse("O1 O4 O8").unwrap();
    let cfg = TrainConfig::default();
    let mut model = ModelWeights::new_fixed(&net, &g, 3).unwrap();
    let before = model.store().clone();
    let mut adam = Adam::new(cfg.weight_adam(), model.store());
    let batch = Batch::gather(&samples, &[0, 1]).unwrap();
    for _ in 0..3 {
        weight_step(&mut model, &mut adam, &batch, g.ops(), 0.0, 0).unwrap();
    }
    assert_eq!(model.store(), &before);
}

#[test]
fn cosine_schedule_decays_to_zero() {
    let g = Genotype::parse("O1 O4 O8").unwrap();
    let net = NetworkConfig { components: 1, ..NetworkConfig::desk() };
    let cfg = TrainConfig { lr_w: 3e-3, batch_size: 3, ..TrainConfig::default() };
    let t = Trainer::new(&net, &g, &cfg, 10, 5).unwrap();
    let s = t.schedule();
    assert_eq!(s.total_steps, 20);
    assert_eq!(s.lr(0), 3e-3);
    assert!(s.lr(s.total_steps - 1) <= 1e-6 * cfg.lr_w);
    let lrs: Vec<f64> = (0..s.total_steps).map(|i| s.lr(i)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn genotype_length_mismatch_is_an_error() {
    let ds = phantom_dataset(1, 1, 16, 2);
    let samples = simulate_subjects(&ds, &ds.subject_ids(), 0.3, 2).unwrap();
    let net = NetworkConfig::desk();
    let short = Genotype::parse("O1 O2 O3").unwrap();
    assert!(retrain(&short, &samples, &net, &TrainConfig::default(), |_, _| {}).is_err());
    assert!(TrainConfig { lr_w: -1e-3, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let ds = phantom_dataset(2, 2, 16, 3);
    let samples = simulate_subjects(&ds, &ds.subject_ids(), 0.3, 3).unwrap();
    let net = NetworkConfig { components: 1, channels: 3, ..NetworkConfig::desk() };
    let g = Genotype::parse("O2 O6 O8").unwrap();
    let cfg = TrainConfig { batch_size: 2, retrain_epochs: 2, seed: 5, ..TrainConfig::default() };
    let run = || checkpoint::encode(&retrain(&g, &samples, &net, &cfg, |_, _| {}).unwrap(), cfg.seed, 2).unwrap();
    assert_eq!(run(), run());
    let other = TrainConfig { seed: 6, ..cfg.clone() };
    let c = checkpoint::encode(&retrain(&g, &samples, &net, &other, |_, _| {}).unwrap(), 6, 2).unwrap();
    assert_ne!(run(), c);
}

#[test]
fn evaluating_the_truth_is_perfect() {
    let ds = phantom_dataset(2, 2, 32, 4);
    let samples = simulate_subjects(&ds, &ds.subject_ids(), 0.3, 4).unwrap();
    let truth: Vec<_> = samples.iter().map(|s| s.pair.y.clone()).collect();
    let report = metrics_for(&samples, &truth).unwrap();
    assert_eq!(report.ssim.mean, 1.0);
    assert_eq!(report.psnr.mean, 100.0);
    let zf = zero_filled_metrics(&samples).unwrap();
    assert!(zf.psnr.mean < 40.0);
}

#[test]
fn tiny_overfit_exceeds_forty_db() {
    // 16x16 at half sampling: >44 dB on every phantom seed in 0..6.
    let ds = phantom_dataset(4, 1, 16, 0);
    let samples = simulate_subjects(&ds, &ds.subject_ids(), 0.5, 0).unwrap();
    let net = NetworkConfig { components: 2, channels: 8, ..NetworkConfig::desk() };
    let g = Genotype::homogeneous(OperationSpec::get(4).unwrap(), 2, net.cells_per_block).unwrap();
    let cfg = TrainConfig { lr_w: 1e-2, batch_size: 4, retrain_epochs: 300, seed: 0, ..TrainConfig::default() };
    let model = retrain(&g, &samples, &net, &cfg, |_, _| {}).unwrap();
    let psnr = evaluate(&model, &g, &samples, 4).unwrap().psnr.mean;
    assert!(psnr > 40.0, "train PSNR {psnr:.2} dB");
}

#[test]
fn desk_retrain_beats_zero_filled_by_three_db() {
    let p = presets::desk();
    let ds = phantom_dataset(p.phantoms.subjects, p.phantoms.slices_per_subject, p.phantoms.size, 7);
    let split = split_folds(&ds.subject_ids(), 0, 7).unwrap();
    let trainval = simulate_subjects(&ds, &split.trainval(), p.rate, 7).unwrap();
    let test = simulate_subjects(&ds, &split.test, p.rate, 7).unwrap();
    let g = Genotype::parse("O5 O8 O8|O8 O8 O8").unwrap();
    let cfg = TrainConfig { seed: 7, ..p.train };
    let model = retrain(&g, &trainval, &p.network, &cfg, |_, _| {}).unwrap();
    let zf = zero_filled_metrics(&test).unwrap().psnr.mean;
    let net = evaluate(&model, &g, &test, 8).unwrap().psnr.mean;
    assert!(net - zf >= 3.0, "zero-filled {zf:.2} dB, network {net:.2} dB");
}
