#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use drivescale_cli::config::DataVariant;
use drivescale_cli::store::StoreRow;
use drivescale_core::fit::RunRecord;
use drivescale_core::ledger::ModelShape;
use drivescale_core::synth::stream_rng;
use rand_distr::{Distribution, Normal};

/// Iso-FLOP runs on `L = 1 + 2 / sqrt(N) + 3 / sqrt(D) + noise` with
/// `C = 6 N D`: seven budgets doubling `sqrt(C / 6)` from 30, twelve runs
/// per band log-spaced over `e^-1.5 .. e^1.5` around `sqrt(C / 6)`.
pub fn surface_fixture(noise_sd: f64, seed: u64) -> Vec<StoreRow> {
    let noise = Normal::new(0.0, noise_sd).unwrap();
    let mut rng = stream_rng(seed, 0);
    let shape = ModelShape::new(1, 1, 1, 1, 1).unwrap();
    let mut rows = Vec::new();
    for k in 0..7 {
        let center = 30.0 * 2f64.powi(k);
        let budget = 6.0 * center * center;
        for i in 0..12 {
            let z = -1.5 + 3.0 * i as f64 / 11.0;
            let n = (center * z.exp()).round();
            let d = (budget / (6.0 * n)).round();
            let loss = 1.0 + 2.0 / n.sqrt() + 3.0 / d.sqrt() + noise.sample(&mut rng);
            let record = RunRecord {
                run_id: format!("b{k}-{i}"),
                seed,
                shape,
                params: n as u64,
                examples: d as u64,
                flops: (6.0 * n * d) as u64,
                eval_loss: loss,
                per_type_losses: BTreeMap::new(),
                min_ade: None,
                w_ade: None,
                miles: 0.0,
            };
            rows.push(StoreRow::Run {
                job: format!("b{k}-{i}"),
                budget: Some(budget),
                variant: DataVariant::Full,
                record,
            });
        }
    }
    rows
}

/// A four-job-per-seed grid of tiny models that trains in seconds.
pub const TINY_GRID: &str = r#"
[data]
train_segments = 20
eval_segments = 4

[plan]
mode = "grid"
seeds = [0, 1, 2]
shapes = [[1, 1, 16], [1, 1, 32]]
dataset_sizes = [64, 128]

[metrics]
scenes = 2
rollouts = 8
k = 3
"#;

pub fn drivescale(args: &[&str], store: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_drivescale"));
    cmd.args(args).env_remove("DRIVESCALE_STORE");
    if let Some(s) = store {
        cmd.env("DRIVESCALE_STORE", s);
    }
    cmd.output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file under `dir` with its bytes, sorted by name.
pub fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}
