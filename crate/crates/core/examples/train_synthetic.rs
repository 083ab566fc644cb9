//! End to end: generate scenes, train a small GBD-v2 detector, evaluate it
//! with flip fusion and box voting, and round-trip the checkpoint.
//!
//! cargo run --release --example train_synthetic -- [epochs]

use gbdnet::pipeline::infer::{evaluate_model, InferOptions};
use gbdnet::pipeline::{gen_synthetic_dataset, train, DatasetSpec, Model, PoolSource, RunConfig};

fn main() -> gbdnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let spec = DatasetSpec::default();
    let train_set = gen_synthetic_dataset(&spec, 120, 11)?;
    let test_set = gen_synthetic_dataset(&spec, 40, 12)?;
    let config = RunConfig {
        pool_source: PoolSource::Pixels,
        roi_out: 4,
        channels: [8, 8],
        lr: 0.02,
        momentum: 0.9,
        epochs,
        ..RunConfig::default()
    };
    let outcome = train(&config, &train_set)?;
    println!("epoch losses {:?}", outcome.epoch_losses);

    for (name, opts) in [
        ("nms only", InferOptions::raw(config.nms_thresh)),
        ("nms + voting", InferOptions::from_config(&config)),
        ("nms + voting + flip", InferOptions { flip: true, ..InferOptions::from_config(&config) }),
    ] {
        let (res, _) = evaluate_model(&outcome.model, &test_set, &opts)?;
        println!("{name:<20} mAP {:.3}  fp loc/other/bg {:.2}/{:.2}/{:.2}", res.map, res.fp_fractions.loc, res.fp_fractions.other, res.fp_fractions.bg);
    }

    let path = std::env::temp_dir().join("gbdnet_example.ckpt");
    outcome.model.save(&path)?;
    let reloaded = Model::load(&path)?;
    println!("checkpoint {} reloads identically: {}", path.display(), reloaded == outcome.model);
    Ok(())
}
