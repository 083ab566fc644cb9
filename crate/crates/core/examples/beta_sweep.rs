//! Trains GBD-v2 at several message scales and the three gating variants.
//!
//! cargo run --release --example beta_sweep -- [epochs]

use gbdnet::pipeline::ablation::{beta_variants, format_table, gate_variants, run_variants};
use gbdnet::pipeline::{gen_synthetic_dataset, DatasetSpec, PoolSource, RunConfig};

fn main() -> gbdnet::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let spec = DatasetSpec::default();
    let train_set = gen_synthetic_dataset(&spec, 100, 31)?;
    let test_set = gen_synthetic_dataset(&spec, 30, 32)?;
    let base = RunConfig {
        pool_source: PoolSource::Pixels,
        roi_out: 4,
        channels: [8, 8],
        lr: 0.02,
        momentum: 0.9,
        epochs,
        ..RunConfig::default()
    };
    let rows = run_variants(&beta_variants(&base), &train_set, &test_set)?;
    print!("{}", format_table("message scale", &rows));
    let rows = run_variants(&gate_variants(&base), &train_set, &test_set)?;
    print!("{}", format_table("gating", &rows));
    Ok(())
}
