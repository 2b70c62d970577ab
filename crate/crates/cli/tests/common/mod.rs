#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn emr(args: &[&str]) -> Output {
    emr_env(args, &[])
}

pub fn emr_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_emr"));
    cmd.args(args).env_remove("EMR_NUM_WORKERS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("emr runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn genotype_indices(run: &Path) -> Vec<usize> {
    read_json(&run.join("genotype.json"))["genotype"]["ops"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o.as_str().unwrap()[1..].parse().unwrap())
        .collect()
}

/// A search-run directory holding only an alpha.json with the given probabilities.
pub fn fake_search_run(dir: &Path, probs: &[[f64; 8]], cells_per_block: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let v = json!({"cells_per_block": cells_per_block, "alpha": probs, "probs": probs, "seed": 0, "config_hash": "test"});
    std::fs::write(dir.join("alpha.json"), v.to_string()).unwrap();
}

/// Index (1-based) maximizing the summed probabilities, per row.
pub fn brute_force_ensemble(sets: &[Vec<[f64; 8]>]) -> Vec<usize> {
    (0..sets[0].len())
        .map(|r| {
            let sums: Vec<f64> = (0..8).map(|i| sets.iter().map(|s| s[r][i]).sum()).collect();
            (0..8).fold(0, |b, i| if sums[i] > sums[b] { i } else { b }) + 1
        })
        .collect()
}
