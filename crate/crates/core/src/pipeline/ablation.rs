//! Ablation harnesses: context pads, beta, gates.

use super::config::{PoolSource, RunConfig};
use super::data::Dataset;
use super::infer::{evaluate_model, InferOptions};
use super::train::train;
use crate::error::Result;
use crate::eval::EvalResult;
use crate::gbd::GbdVersion;
use serde::{Deserialize, Serialize};
use std::fmt::Write;

pub const BETA_SWEEP: [f64; 4] = [0.0, 0.1, 0.5, 1.0];
/// Training epochs of [`pixel_context_config`].
pub const CONTEXT_EPOCHS: usize = 20;

/// Four-pad GBD-v2 on raw-pixel crops, sized to train in minutes on one core.
pub fn pixel_context_config(seed: u64) -> RunConfig {
    RunConfig {
        pool_source: PoolSource::Pixels,
        gbd_version: GbdVersion::V2,
        beta: 0.5,
        roi_out: 4,
        channels: [8, 8],
        lr: 0.02,
        momentum: 0.9,
        epochs: CONTEXT_EPOCHS,
        lr_steps: vec![CONTEXT_EPOCHS * 2 / 3],
        seed,
        ..RunConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub map: f64,
    /// Mean AP over the context-dependent class pair.
    pub pair_map: f64,
    pub final_loss: f64,
}

/// Mean AP over `classes` that have ground truth.
pub fn subset_map(result: &EvalResult, classes: &[usize]) -> f64 {
    let aps: Vec<f64> = classes.iter().filter_map(|c| result.per_class_ap.get(c).copied()).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Each single pad of `base.pads`, then all of them together.
pub fn pad_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut out: Vec<(String, RunConfig)> = base
        .pads
        .iter()
        .map(|&p| {
            (
                format!("pad {p}"),
                RunConfig {
                    pads: vec![p],
                    ..base.clone()
                },
            )
        })
        .collect();
    let all = base.pads.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(", ");
    out.push((format!("pads [{all}]"), base.clone()));
    out
}

pub fn beta_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    BETA_SWEEP
        .iter()
        .map(|&beta| {
            (
                format!("beta {beta}"),
                RunConfig {
                    gbd_version: GbdVersion::V2,
                    beta,
                    ..base.clone()
                },
            )
        })
        .collect()
}

/// No GBD layer, ungated v1 and gated v1.
pub fn gate_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    [GbdVersion::None, GbdVersion::V1, GbdVersion::V1Gated]
        .into_iter()
        .map(|v| {
            (
                format!("gbd {}", serde_json::to_value(v).expect("enum").as_str().unwrap_or("?")),
                RunConfig {
                    gbd_version: v,
                    ..base.clone()
                },
            )
        })
        .collect()
}

/// Trains and evaluates each variant.
pub fn run_variants(variants: &[(String, RunConfig)], train_set: &Dataset, test_set: &Dataset) -> Result<Vec<AblationRow>> {
    let pair = train_set.spec.ambiguous_pair();
    variants
        .iter()
        .map(|(label, config)| {
            let outcome = train(config, train_set)?;
            let (result, _) = evaluate_model(&outcome.model, test_set, &InferOptions::from_config(config))?;
            let row = AblationRow {
                label: label.clone(),
                map: result.map,
                pair_map: subset_map(&result, &pair),
                final_loss: outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
            };
            log::info!("{}: mAP {:.4}, pair mAP {:.4}", row.label, row.map, row.pair_map);
            Ok(row)
        })
        .collect()
}

pub fn format_table(title: &str, rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "{:<width$}  {:>7}  {:>8}  {:>10}", "variant", "mAP", "pair mAP", "final loss");
    for r in rows {
        let _ = writeln!(s, "{:<width$}  {:>7.4}  {:>8.4}  {:>10.5}", r.label, r.map, r.pair_map, r.final_loss);
    }
    s
}
