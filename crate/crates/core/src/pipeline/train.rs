//! Minibatch SGD over synthetic scenes.

use super::config::RunConfig;
use super::data::{Dataset, SyntheticScene};
use super::infer::{search_context_weight, InferOptions};
use super::model::{normalize, Model};
use super::proposals::{gen_proposals, Proposal};
use crate::autograd::{Graph, Sgd};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::head::{detection_loss_node, DetectionTargets};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn mix(seed: u64, epoch: usize, id: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (id as u64 + 1).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Mirrors an image and its annotations.
fn mirrored(scene: &SyntheticScene) -> SyntheticScene {
    let w = scene.image.shape().w as f64;
    SyntheticScene {
        id: scene.id,
        image: scene.image.flip_horizontal(),
        objects: scene
            .objects
            .iter()
            .map(|o| super::data::ObjectAnn {
                bbox: BBox { x: w - o.bbox.x, ..o.bbox },
                ..*o
            })
            .collect(),
    }
}

/// One minibatch: stacked normalised images, rois and targets.
pub struct Batch {
    pub images: Tensor,
    pub rois: Vec<(usize, BBox)>,
    pub targets: Vec<DetectionTargets>,
}

pub fn make_batch(config: &RunConfig, scenes: &[&SyntheticScene], epoch: usize, rng: &mut impl Rng) -> Result<Batch> {
    let mut images = Vec::with_capacity(scenes.len());
    let mut rois = Vec::new();
    let mut targets = Vec::new();
    for (item, scene) in scenes.iter().enumerate() {
        let flipped;
        let scene: &SyntheticScene = if config.flip_augment && rng.gen_bool(0.5) {
            flipped = mirrored(scene);
            &flipped
        } else {
            scene
        };
        let s = scene.image.shape();
        let proposals: Vec<Proposal> =
            gen_proposals(&scene.objects, &config.proposals, s.w, s.h, mix(config.seed, epoch, scene.id))?;
        for p in proposals {
            rois.push((item, p.bbox));
            targets.push(DetectionTargets { y: p.label, v: p.target });
        }
        images.push(normalize(&scene.image));
    }
    Ok(Batch {
        images: Tensor::stack(&images)?,
        rois,
        targets,
    })
}

/// Loss of one batch; gradients are accumulated into the model's stores.
pub fn batch_step(model: &mut Model, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(batch.images.clone());
    let bound = model.bind(&mut g);
    let out = model.forward(&mut g, &bound, x, &batch.rois)?;
    let loss = detection_loss_node(&mut g, &out.head, &batch.targets, model.config.lambda)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Training {
            param: "loss".into(),
            msg: format!("non-finite loss {value}"),
        });
    }
    g.backward(loss)?;
    model.trunk.store.pull_grads(&g, &bound.trunk);
    model.gbd.store.pull_grads(&g, &bound.gbd.params);
    Ok(value)
}

fn check_parameters(model: &Model, epoch: usize, batch: usize) -> Result<()> {
    for (name, p) in model.trunk.store.iter().chain(model.gbd.store.iter()) {
        if !p.weights().all_finite() || !p.bias().all_finite() {
            return Err(Error::Training {
                param: name.clone(),
                msg: format!("non-finite value after update (epoch {epoch}, batch {batch})"),
            });
        }
    }
    Ok(())
}

/// Trains from `config.seed`; deterministic. Parameters are rounded to the
/// checkpoint precision at the end, and the context weight is searched on
/// the training scenes when requested.
pub fn train(config: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if config.proposals.per_gt + config.proposals.random == 0 {
        return Err(Error::Config("no proposals per image".into()));
    }
    let mut model = Model::init(config, data.num_classes())?;
    let mut trunk_opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let mut gbd_opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.scenes.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.lr_steps.contains(&epoch) {
            trunk_opt.lr *= 0.1;
            gbd_opt.lr *= 0.1;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let scenes: Vec<&SyntheticScene> = chunk.iter().map(|&i| &data.scenes[i]).collect();
            let batch = make_batch(config, &scenes, epoch, &mut rng)?;
            let loss = batch_step(&mut model, &batch).map_err(|e| match e {
                Error::Training { param, msg } => Error::Training {
                    param,
                    msg: format!("{msg} (epoch {epoch}, batch {batches})"),
                },
                other => other,
            })?;
            trunk_opt.step(&mut model.trunk.store)?;
            gbd_opt.step(&mut model.gbd.store)?;
            check_parameters(&model, epoch, batches)?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    model.round_to_f32();
    check_parameters(&model, config.epochs, 0)?;
    if config.context_weight_search {
        let w = search_context_weight(&model, data, &InferOptions::from_config(config))?;
        log::info!("context weight {w}");
        model.config.context_weight = w;
    }
    Ok(TrainOutcome { model, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbd::GbdVersion;
    use crate::pipeline::config::PoolSource;
    use crate::pipeline::data::{gen_synthetic_dataset, DatasetSpec};

    fn tiny() -> RunConfig {
        RunConfig {
            pads: vec![0.2],
            gbd_version: GbdVersion::None,
            pool_source: PoolSource::Pixels,
            roi_out: 3,
            channels: [4, 6],
            lr: 0.05,
            momentum: 0.9,
            epochs: 3,
            batch_size: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn divergence_is_reported() {
        let data = gen_synthetic_dataset(&DatasetSpec::default(), 4, 0).unwrap();
        let c = RunConfig { lr: 1e12, ..tiny() };
        match train(&c, &data) {
            Err(Error::Training { .. }) => {}
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn empty_data_is_rejected() {
        let data = gen_synthetic_dataset(&DatasetSpec::default(), 0, 0).unwrap();
        assert!(matches!(train(&tiny(), &data), Err(Error::Config(_))));
    }
}
