//! Trains three small detectors with different seeds and picks an ensemble
//! greedily by validation mAP of the averaged outputs.

use gbdnet::eval::evaluate_map;
use gbdnet::gbd::GbdVersion;
use gbdnet::pipeline::infer::model_output;
use gbdnet::pipeline::{gen_synthetic_dataset, train, DatasetSpec, PoolSource, RunConfig};
use gbdnet::postprocess::{ensemble_average, greedy_model_select};

fn main() -> gbdnet::Result<()> {
    let spec = DatasetSpec::default();
    let train_set = gen_synthetic_dataset(&spec, 80, 21)?;
    let val = gen_synthetic_dataset(&spec, 30, 22)?;
    let gts = val.ground_truth();
    let mut outputs = Vec::new();
    for seed in 0..3 {
        let config = RunConfig {
            pads: vec![0.2],
            gbd_version: GbdVersion::None,
            pool_source: PoolSource::Pixels,
            roi_out: 4,
            channels: [6, 8],
            lr: 0.02,
            momentum: 0.9,
            epochs: 3,
            seed,
            ..RunConfig::default()
        };
        let model = train(&config, &train_set)?.model;
        let out = model_output(&model, &val)?;
        println!("model {seed}: val mAP {:.3}", evaluate_map(&out.detections(0.4)?, &gts, 0.5).map);
        outputs.push(out);
    }
    let chosen = greedy_model_select(&outputs, &gts, 3, 0.4)?;
    let members: Vec<_> = chosen.iter().map(|&i| &outputs[i]).collect();
    let avg = ensemble_average(&members)?;
    println!("greedy picks {chosen:?}: val mAP {:.3}", evaluate_map(&avg.detections(0.4)?, &gts, 0.5).map);
    Ok(())
}
