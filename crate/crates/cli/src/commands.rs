use std::path::{Path, PathBuf};
use std::time::Instant;

use emr_core::checkpoint;
use emr_core::data::{export_dataset, load_dataset, phantom_dataset, simulate_subjects, Dataset, Sample};
use emr_core::kspace::make_cartesian_mask;
use emr_core::metrics::{CrossValidationReport, MetricReport, REFERENCE_TARGETS};
use emr_core::nas::{self, ProbRow};
use emr_core::network::{param_count, Genotype, NetworkConfig, BRAIN_GENOTYPE, CARDIAC_GENOTYPE};
use emr_core::training::{self, split_folds, FoldSplit};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{sha256_hex, RunConfig};
use crate::error::{CliError, CliResult};
use crate::images;
use crate::rundir::{read_json, RunDir};

/// Wall-clock seconds per phase, written as `timing.json`.
#[derive(Default, Serialize, Deserialize)]
pub struct Timing {
    pub phases: Vec<(String, f64)>,
}

impl Timing {
    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
        let t = Instant::now();
        let out = f()?;
        self.phases.push((phase.to_string(), t.elapsed().as_secs_f64()));
        Ok(out)
    }

    pub fn total(&self) -> f64 {
        self.phases.iter().map(|p| p.1).sum()
    }
}

fn dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    match &cfg.dataset {
        Some(p) => Ok(load_dataset(p)?),
        None => {
            let p = cfg.phantoms;
            Ok(phantom_dataset(p.subjects, p.slices_per_subject, p.size, cfg.seed()))
        }
    }
}

struct FoldData {
    split: FoldSplit,
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

fn fold_data(cfg: &RunConfig) -> CliResult<FoldData> {
    let ds = dataset(cfg)?;
    let split = split_folds(&ds.subject_ids(), cfg.fold, cfg.seed())?;
    let sim = |ids: &[String]| simulate_subjects(&ds, ids, cfg.rate, cfg.seed());
    Ok(FoldData {
        train: sim(&split.train)?,
        val: sim(&split.val)?,
        test: sim(&split.test)?,
        split,
    })
}

#[derive(Serialize)]
struct GenotypeRecord<'a> {
    source: &'a str,
    genotype: &'a Genotype,
    pretty: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    sources: Vec<Provenance>,
}

#[derive(Clone, Serialize, PartialEq, Eq, PartialOrd, Ord)]
struct Provenance {
    alpha_sha256: String,
    config_hash: String,
}

fn write_genotype(dir: &RunDir, source: &str, g: &Genotype, sources: Vec<Provenance>) -> CliResult<()> {
    dir.write_json("genotype.json", GenotypeRecord { source, genotype: g, pretty: g.pretty(), sources })
}

/// Reads a genotype string, a genotype.json written by search/ensemble, or a
/// bare serialized genotype.
pub fn read_genotype(spec: &str) -> CliResult<Genotype> {
    let path = Path::new(spec);
    if spec.ends_with(".json") || path.is_dir() {
        let file = if path.is_dir() { path.join("genotype.json") } else { path.to_path_buf() };
        let v = read_json(&file)?;
        let inner = v.get("genotype").cloned().unwrap_or(v);
        return serde_json::from_value(inner).map_err(|e| CliError::Data(format!("{}: {e}", file.display())));
    }
    Ok(Genotype::parse(spec)?)
}

fn genotype_for(cfg: &RunConfig) -> CliResult<Genotype> {
    let net = &cfg.network;
    let g = match (net.homogeneous_op, &cfg.genotype) {
        (Some(op), _) => Genotype::homogeneous(op, net.components, net.cells_per_block)?,
        (None, Some(spec)) => read_genotype(spec)?,
        (None, None) => return Err(CliError::Usage("no architecture: pass --genotype or --homogeneous".into())),
    };
    g.check_against(net)?;
    Ok(g)
}

pub fn mask(cfg: &RunConfig, height: usize, width: usize, out: &Path) -> CliResult<()> {
    let dir = RunDir::open(out, cfg)?;
    let m = make_cartesian_mask(height, width, cfg.rate, cfg.seed())?;
    dir.write_text("mask.json", &m.to_json()?)?;
    let values: Vec<f64> = (0..height * width).map(|i| m.value(i / width, i % width)).collect();
    images::write_gray(&dir.file("mask.png"), &values, height, width)?;
    println!("{} of {height} lines sampled -> {}", m.lines().len(), dir.file("mask.json").display());
    Ok(())
}

pub fn phantom(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let p = cfg.phantoms;
    let ds = phantom_dataset(p.subjects, p.slices_per_subject, p.size, cfg.seed());
    let dir = RunDir::open(out, cfg)?;
    let manifest = export_dataset(&ds, dir.path())?;
    if cfg.emit_images {
        let img_dir = dir.file("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| CliError::io(&img_dir, e))?;
        for s in &ds.subjects {
            for (k, slice) in s.slices.iter().enumerate() {
                images::write_gray(&img_dir.join(format!("{}_{k:04}.png", s.id)), slice, ds.height, ds.width)?;
            }
        }
    }
    println!("{} subjects, {} slices -> {}", ds.subjects.len(), ds.slice_count(), manifest.display());
    Ok(())
}

pub fn search(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let dir = RunDir::open(out, cfg)?;
    let mut timing = Timing::default();
    let net = &cfg.network;
    if let Some(op) = net.homogeneous_op {
        // Ablation: no search, the same operation in every cell.
        let g = Genotype::homogeneous(op, net.components, net.cells_per_block)?;
        write_genotype(&dir, "homogeneous", &g, Vec::new())?;
        println!("homogeneous genotype {}", g.pretty());
        return Ok(());
    }
    let data = timing.time("load", || fold_data(cfg))?;
    dir.write_json("folds.json", &data.split)?;
    let mut log = dir.jsonl("search.log.jsonl")?;
    let mut log_err = None;
    let outcome = timing.time("search", || {
        Ok(nas::search(&data.train, &data.val, net, &cfg.train, |line| {
            eprintln!(
                "epoch {:>3} {:<6} train {:.5} val {}",
                line.epoch,
                line.phase,
                line.train_loss,
                line.val_loss.map_or("-".into(), |v| format!("{v:.5}"))
            );
            if let Err(e) = log.push(&dir.stamp(line)) {
                log_err.get_or_insert(e);
            }
        })?)
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let g = nas::discretize(&outcome.arch, net.cells_per_block)?;
    dir.write_json(
        "alpha.json",
        json!({
            "cells_per_block": net.cells_per_block,
            "alpha": outcome.arch.alpha(),
            "probs": outcome.arch.probs(),
        }),
    )?;
    write_genotype(&dir, "search", &g, Vec::new())?;
    dir.write_bytes("checkpoint.bin", &checkpoint::encode(&outcome.model, cfg.seed(), outcome.log.len())?)?;
    dir.write_json("timing.json", &timing)?;
    println!("fold {} genotype {}", cfg.fold, g.pretty());
    Ok(())
}

#[derive(Deserialize)]
struct AlphaFile {
    cells_per_block: usize,
    probs: Vec<ProbRow>,
    seed: u64,
    config_hash: String,
}

pub fn ensemble(runs: &[PathBuf], out: &Path) -> CliResult<()> {
    if runs.len() != 3 {
        return Err(CliError::Usage(format!("ensemble takes three search runs, got {}", runs.len())));
    }
    let mut inputs = Vec::new();
    for run in runs {
        let path = run.join("alpha.json");
        if !path.exists() {
            return Err(CliError::missing(&path));
        }
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let a: AlphaFile = serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let prov = Provenance { alpha_sha256: sha256_hex(&bytes), config_hash: a.config_hash.clone() };
        inputs.push((prov, a));
    }
    // Sorted by content hash so argument order cannot change the output.
    inputs.sort_by(|a, b| a.0.cmp(&b.0));
    let cpb = inputs[0].1.cells_per_block;
    let cells = inputs[0].1.probs.len();
    for (p, a) in &inputs {
        if a.cells_per_block != cpb || a.probs.len() != cells {
            return Err(CliError::Data(format!(
                "alpha {} has {} cells in blocks of {}, expected {cells} in blocks of {cpb}",
                p.alpha_sha256,
                a.probs.len(),
                a.cells_per_block
            )));
        }
    }
    let probs: Vec<Vec<ProbRow>> = inputs.iter().map(|(_, a)| a.probs.clone()).collect();
    let g = nas::ensemble(&probs, cpb)?;
    let sources: Vec<Provenance> = inputs.iter().map(|(p, _)| p.clone()).collect();
    let joint = sha256_hex(sources.iter().map(|s| s.alpha_sha256.as_str()).collect::<String>().as_bytes());
    let dir = RunDir::lock(out, inputs[0].1.seed, joint)?;
    write_genotype(&dir, "ensemble", &g, sources)?;
    println!("ensembled genotype {}", g.pretty());
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub genotype: String,
    pub param_count: usize,
    pub network: MetricReport,
    pub zero_filled: MetricReport,
}

fn evaluate_into(dir: &RunDir, cfg: &RunConfig, model: &emr_core::ModelWeights, g: &Genotype, test: &[Sample], timing: &mut Timing) -> CliResult<()> {
    let bs = cfg.train.batch_size;
    let recs = timing.time("eval", || Ok(training::reconstruct(model, g, test, bs)?))?;
    let m = FoldMetrics {
        fold: cfg.fold,
        genotype: g.pretty(),
        param_count: model.trainable_param_count(),
        network: training::metrics_for(test, &recs)?,
        zero_filled: training::zero_filled_metrics(test)?,
    };
    dir.write_json("metrics.json", &m)?;
    if cfg.emit_images {
        images::emit(&dir.file("images"), test, &recs)?;
    }
    println!(
        "fold {} PSNR {:.3} ± {:.3} dB (zero-filled {:.3}), SSIM {:.4} ± {:.4} (zero-filled {:.4})",
        cfg.fold, m.network.psnr.mean, m.network.psnr.std, m.zero_filled.psnr.mean, m.network.ssim.mean, m.network.ssim.std, m.zero_filled.ssim.mean
    );
    Ok(())
}

pub fn retrain(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let g = genotype_for(cfg)?;
    let dir = RunDir::open(out, cfg)?;
    let mut timing = Timing::default();
    let data = timing.time("load", || fold_data(cfg))?;
    dir.write_json("folds.json", &data.split)?;
    let trainval: Vec<Sample> = data.train.into_iter().chain(data.val).collect();
    let mut log = dir.jsonl("train.log.jsonl")?;
    let mut log_err = None;
    let model = timing.time("retrain", || {
        Ok(training::retrain(&g, &trainval, &cfg.network, &cfg.train, |epoch, loss| {
            eprintln!("epoch {epoch:>3} train {loss:.5}");
            if let Err(e) = log.push(&dir.stamp(json!({"epoch": epoch, "train_loss": loss}))) {
                log_err.get_or_insert(e);
            }
        })?)
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    dir.write_bytes("checkpoint.bin", &checkpoint::encode(&model, cfg.seed(), cfg.train.retrain_epochs)?)?;
    write_genotype(&dir, "retrain", &g, Vec::new())?;
    evaluate_into(&dir, cfg, &model, &g, &data.test, &mut timing)?;
    dir.write_json("timing.json", &timing)
}

pub fn eval(cfg: &RunConfig, weights: &Path, out: &Path) -> CliResult<()> {
    if !weights.exists() {
        return Err(CliError::missing(weights));
    }
    let (model, header) = checkpoint::load(weights)?;
    let g = header
        .genotype
        .ok_or_else(|| CliError::Usage(format!("{} holds a search supernet, not a retrained network", weights.display())))?;
    let dir = RunDir::open(out, cfg)?;
    let mut timing = Timing::default();
    let data = timing.time("load", || fold_data(cfg))?;
    dir.write_json("folds.json", &data.split)?;
    evaluate_into(&dir, cfg, &model, &g, &data.test, &mut timing)?;
    dir.write_json("timing.json", &timing)
}

pub fn audit_params(cfg: &RunConfig) -> CliResult<()> {
    let net: &NetworkConfig = &cfg.network;
    let targets: Vec<(String, Genotype)> = if net.homogeneous_op.is_some() || cfg.genotype.is_some() {
        vec![("configured".into(), genotype_for(cfg)?)]
    } else {
        let mut v = Vec::new();
        for (name, text) in [("cardiac", CARDIAC_GENOTYPE), ("brain", BRAIN_GENOTYPE)] {
            let g = Genotype::parse(text)?;
            if g.check_against(net).is_ok() {
                v.push((name.to_string(), g));
            }
        }
        if v.is_empty() {
            return Err(CliError::Usage("reference genotypes do not fit this network; pass --genotype".into()));
        }
        v
    };
    println!("N = {}, {} cells per block, c = {}", net.components, net.cells_per_block, net.channels);
    for (name, g) in &targets {
        let n = param_count(net, g);
        println!("{name:<10} {}  total {n} ({:.3}M)", g.pretty(), n as f64 / 1e6);
    }
    Ok(())
}

pub fn report(runs: &[PathBuf], out: Option<&Path>) -> CliResult<()> {
    let mut folds = Vec::new();
    let mut timings = Vec::new();
    for run in runs {
        if !run.exists() {
            return Err(CliError::missing(run));
        }
        let t = run.join("timing.json");
        if t.exists() {
            let v = read_json(&t)?;
            let timing: Timing = serde_json::from_value(v["phases"].clone())
                .map(|phases| Timing { phases })
                .map_err(|e| CliError::Data(format!("{}: {e}", t.display())))?;
            timings.push((run.display().to_string(), timing));
        }
        let m = run.join("metrics.json");
        if m.exists() {
            let v = read_json(&m)?;
            let fm: FoldMetrics = serde_json::from_value(v).map_err(|e| CliError::Data(format!("{}: {e}", m.display())))?;
            folds.push(fm);
        }
    }
    if folds.is_empty() {
        return Err(CliError::Usage("no metrics.json in the given run directories".into()));
    }
    folds.sort_by_key(|f| f.fold);
    let net: Vec<MetricReport> = folds.iter().map(|f| f.network.clone()).collect();
    let zf: Vec<MetricReport> = folds.iter().map(|f| f.zero_filled.clone()).collect();
    let cv = CrossValidationReport::from_folds(&net)?;
    let cv_zf = CrossValidationReport::from_folds(&zf)?;

    println!("{:<6} {:>10} {:>8} {:>12} {:>8}", "fold", "PSNR", "SSIM", "ZF PSNR", "ZF SSIM");
    for f in &folds {
        println!(
            "{:<6} {:>10.3} {:>8.4} {:>12.3} {:>8.4}",
            f.fold, f.network.psnr.mean, f.network.ssim.mean, f.zero_filled.psnr.mean, f.zero_filled.ssim.mean
        );
    }
    println!("{:<6} {:>5.3}±{:.3} {:.4}±{:.4}", "mean", cv.psnr.mean, cv.psnr.std, cv.ssim.mean, cv.ssim.std);
    for r in &REFERENCE_TARGETS {
        println!(
            "reference {} (full scale): {:.4}±{:.4} dB, {:.4}±{:.4}",
            r.dataset, r.psnr_mean, r.psnr_std, r.ssim_mean, r.ssim_std
        );
    }
    let total: f64 = timings.iter().map(|t| t.1.total()).sum();
    for (run, t) in &timings {
        let phases: Vec<String> = t.phases.iter().map(|(p, s)| format!("{p} {s:.1}s")).collect();
        println!("timing {run}: {}", phases.join(", "));
    }
    println!("timing total {total:.1}s");

    if let Some(out) = out {
        let hashes: String = folds.iter().map(|f| f.genotype.clone()).collect();
        let dir = RunDir::lock(out, 0, sha256_hex(hashes.as_bytes()))?;
        dir.write_json(
            "report.json",
            json!({
                "network": cv,
                "zero_filled": cv_zf,
                "folds": folds.iter().map(|f| f.fold).collect::<Vec<_>>(),
                "timing": {
                    "runs": timings.iter().map(|(r, t)| json!({"run": r, "phases": t.phases, "total": t.total()})).collect::<Vec<_>>(),
                    "total_seconds": total,
                },
                "reference": REFERENCE_TARGETS,
            }),
        )?;
    }
    Ok(())
}
