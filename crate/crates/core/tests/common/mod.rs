#![allow(dead_code)]

use std::path::Path;

use placerec::config::RunConfig;

/// Two training sessions and a short schedule; seconds to run.
pub fn small_config_json() -> serde_json::Value {
    serde_json::json!({
        "seed": 7,
        "sessions": { "train": [0, 1], "test": 2 },
        "train": { "epochs": 5, "batches_per_epoch": 4 },
        "eval": { "sweep_steps": 40, "bins": 20 }
    })
}

pub fn small_config() -> RunConfig {
    RunConfig::from_json(&small_config_json().to_string()).unwrap()
}

pub fn write_config(dir: &Path, value: &serde_json::Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

/// Every regular file under `dir`, as (relative path, bytes), sorted.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn wrapped_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}
