//! Trains every single-pad model and the four-pad GBD-v2 model on raw-pixel
//! crops of the context-dependent synthetic task and compares test mAP.
//!
//! cargo run --release --example context_experiment -- [seed] [epochs]

use gbdnet::pipeline::ablation::{format_table, pad_variants, pixel_context_config, run_variants, CONTEXT_EPOCHS};
use gbdnet::pipeline::{gen_synthetic_dataset, DatasetSpec, RunConfig};
use std::time::Instant;

fn main() -> gbdnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(CONTEXT_EPOCHS);
    let spec = DatasetSpec::default();
    let train_set = gen_synthetic_dataset(&spec, 500, 1000 + seed)?;
    let test_set = gen_synthetic_dataset(&spec, 100, 2000 + seed)?;
    let base = RunConfig {
        epochs,
        lr_steps: vec![epochs * 2 / 3],
        ..pixel_context_config(seed)
    };
    let t = Instant::now();
    let rows = run_variants(&pad_variants(&base), &train_set, &test_set)?;
    print!("{}", format_table(&format!("context pads, seed {seed}"), &rows));
    println!("ambiguous pair: classes {:?}; total {:.0}s", spec.ambiguous_pair(), t.elapsed().as_secs_f64());
    Ok(())
}
