//! Stage 1: unsupervised Hebbian pre-training of every layer except the
//! classifier head.
//!
//! All layers learn simultaneously from one forward pass per batch; each
//! layer's rule sees only its own input and pre-activation output.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    apply_update_in_place, conv_step_with_output, tconv_hebbian_step_s, tsa_step_with_output,
    HebbianStepReport, LayerKind,
};
use crate::rules::{HebbianConfig, StepDecay, TconvVariant};
use crate::segnet::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional multi-step decay of the Hebbian learning rate.
    pub decay: Option<StepDecay>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            seed: 0,
            decay: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub epoch: usize,
    pub layer: String,
    pub mean_update_norm: f64,
    pub mean_gate_entropy: f64,
}

/// Hebbian updates for every non-head layer, computed from one forward pass.
pub fn hebbian_updates(
    net: &Network,
    batch: &Tensor,
    cfg: &HebbianConfig,
) -> Result<Vec<(usize, HebbianStepReport)>> {
    let (_, cache) = net.forward(batch)?;
    let head = net.spec().head_index();
    let mut reports = Vec::with_capacity(head);
    for (idx, layer) in net.layers().iter().enumerate() {
        if idx == head {
            continue;
        }
        let lc = cache.layer(idx);
        let report = match (layer.kind, cfg.tconv_variant) {
            (LayerKind::Conv, _) => conv_step_with_output(&lc.input, &lc.pre, layer, cfg)?,
            (LayerKind::TConv, TconvVariant::S) => {
                tconv_hebbian_step_s(&lc.input, &lc.pre, layer, cfg)?
            }
            (LayerKind::TConv, TconvVariant::Tsa) => {
                tsa_step_with_output(&lc.input, &lc.pre, layer, cfg)?
            }
        };
        reports.push((idx, report));
    }
    Ok(reports)
}

/// Pre-train `net` on unlabelled images (each `[1, C, H, W]`). Returns one
/// telemetry row per epoch and layer, averaged over the epoch's batches.
pub fn pretrain(
    net: &mut Network,
    unlabeled: &[Tensor],
    cfg: &HebbianConfig,
    opts: &PretrainOptions,
) -> Result<Vec<TelemetryRow>> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::Config("pre-training needs at least one unlabelled image".into()));
    }
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    let head = net.spec().head_index();
    let names: Vec<String> = net.layers().iter().map(|l| l.name.clone()).collect();
    let mut telemetry = Vec::with_capacity(opts.epochs * head);
    for epoch in 0..opts.epochs {
        let mut step_cfg = *cfg;
        step_cfg.eta = StepDecay::rate(cfg.eta, opts.decay, epoch);
        order.shuffle(&mut rng);
        let mut norms = vec![0.0f64; head];
        let mut entropies = vec![0.0f64; head];
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let items: Vec<Tensor> = chunk.iter().map(|&i| unlabeled[i].clone()).collect();
            let batch = Tensor::stack(&items)?;
            let reports = hebbian_updates(net, &batch, &step_cfg)?;
            let layers = net.layers_mut();
            for (idx, report) in reports {
                apply_update_in_place(&mut layers[idx], &report).map_err(|e| match e {
                    Error::NonFinite { layer, .. } => Error::NonFinite {
                        layer,
                        epoch: Some(epoch),
                    },
                    other => other,
                })?;
                norms[idx] += report.mean_update_norm;
                entropies[idx] += report.mean_gate_entropy;
            }
            batches += 1;
        }
        for idx in 0..head {
            telemetry.push(TelemetryRow {
                epoch,
                layer: names[idx].clone(),
                mean_update_norm: norms[idx] / batches as f64,
                mean_gate_entropy: entropies[idx] / batches as f64,
            });
        }
    }
    Ok(telemetry)
}

pub fn write_telemetry_csv(rows: &[TelemetryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-layer update norms in epoch order.
pub fn norms_by_layer(rows: &[TelemetryRow]) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for row in rows {
        match out.iter_mut().find(|(name, _)| *name == row.layer) {
            Some((_, v)) => v.push(row.mean_update_norm),
            None => out.push((row.layer.clone(), vec![row.mean_update_norm])),
        }
    }
    out
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
