//! Hebbian rules for a dense (fully-connected) layer, decomposed into a
//! gating block, a reconstruction block and a plasticity function:
//!
//! ```text
//! dw[j, i] = eta * g[j] * (s[i] - s*[j, i])
//! ```
//!
//! SWTA uses `g = softmax(y / t)` and `s*[j] = w[j]`; HPCA uses `g = y` and
//! `s*[j] = sum_{k <= j} y[k] * w[k]`. Weights are stored `[K, D]`, one row
//! per neuron; `y = x . w^T` is the raw linear response. Batches are
//! aggregated by their arithmetic mean.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_nt, softmax_into, softmax_t, to_f32, transpose, Tensor};

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Swta,
    Hpca,
}

/// How a transpose-convolution layer is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TconvVariant {
    /// Role swap: upsampled patches are the target, the downsampled
    /// activations drive gate and reconstruction.
    S,
    /// Transposed-structure-aware: the downsampled map is the target and is
    /// reconstructed from the upsampled map.
    Tsa,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HebbianConfig {
    pub rule: Rule,
    pub tconv_variant: TconvVariant,
    pub eta: f32,
    /// Softmax temperature; ignored by HPCA.
    pub temperature: f32,
}

impl HebbianConfig {
    pub fn swta(eta: f32, temperature: f32) -> Self {
        Self {
            rule: Rule::Swta,
            tconv_variant: TconvVariant::Tsa,
            eta,
            temperature,
        }
    }

    pub fn hpca(eta: f32) -> Self {
        Self {
            rule: Rule::Hpca,
            tconv_variant: TconvVariant::Tsa,
            eta,
            temperature: 1.0,
        }
    }

    pub fn with_variant(mut self, variant: TconvVariant) -> Self {
        self.tconv_variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Reconstruction signal `s*`, in one of three equivalent representations.
#[derive(Clone, Debug)]
pub enum Reconstruction {
    /// `[K, D]`: one reconstruction per neuron, shared by every sample (SWTA).
    PerNeuron(Tensor),
    /// Cumulative lateral reconstruction `sum_{k <= j} y[b, k] * w[k]`,
    /// kept factored: `responses: [B, K]`, `weights: [K, D]` (HPCA).
    Cumulative { responses: Tensor, weights: Tensor },
    /// `[B, K, D]`: explicit per-sample, per-neuron reconstructions.
    PerSample(Tensor),
}

/// The triplet fed to the plasticity function.
#[derive(Clone, Debug)]
pub struct UpdateSignals {
    /// `s`: `[B, D]`.
    pub target: Tensor,
    pub reconstruction: Reconstruction,
    /// `g`: `[B, K]`.
    pub gate: Tensor,
}

impl UpdateSignals {
    /// Returns `(B, K, D)` after checking that the pieces agree.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let [b, d] = self.target.dims2()?;
        let [gb, k] = self.gate.dims2()?;
        if gb != b {
            return Err(shape_err(format!("gate has {gb} samples, target has {b}")));
        }
        let check_kd = |t: &Tensor, what: &str| -> Result<()> {
            if t.shape() != [k, d] {
                return Err(shape_err(format!(
                    "{what} has shape {:?}, expected [{k}, {d}]",
                    t.shape()
                )));
            }
            Ok(())
        };
        match &self.reconstruction {
            Reconstruction::PerNeuron(r) => check_kd(r, "reconstruction")?,
            Reconstruction::Cumulative { responses, weights } => {
                check_kd(weights, "reconstruction weights")?;
                if responses.shape() != [b, k] {
                    return Err(shape_err(format!(
                        "reconstruction responses have shape {:?}, expected [{b}, {k}]",
                        responses.shape()
                    )));
                }
            }
            Reconstruction::PerSample(r) => {
                if r.shape() != [b, k, d] {
                    return Err(shape_err(format!(
                        "reconstruction has shape {:?}, expected [{b}, {k}, {d}]",
                        r.shape()
                    )));
                }
            }
        }
        Ok((b, k, d))
    }
}

/// Softmax with temperature over the last (neuron) axis.
pub fn gate_swta(y: &Tensor, t: f32) -> Result<Tensor> {
    softmax_t(&[0.0], t)?;
    let k = *y.shape().last().expect("tensor rank >= 1");
    let mut out = y.clone();
    let mut buf = vec![0.0; k];
    for (src, dst) in y.data().chunks_exact(k).zip(out.data_mut().chunks_exact_mut(k)) {
        softmax_into(src, t, &mut buf);
        dst.copy_from_slice(&buf);
    }
    Ok(out)
}

pub fn gate_hpca(y: &Tensor) -> Tensor {
    y.clone()
}

/// SWTA reconstruction: neuron `j` reconstructs the input with its own weight row.
pub fn reconstruct_swta(weights: &Tensor) -> Tensor {
    weights.clone()
}

/// HPCA reconstruction for one sample: row `j` is `sum_{k <= j} y[k] * w[k]`.
pub fn reconstruct_hpca(y: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let [k, d] = weights.dims2()?;
    if y.len() != k {
        return Err(shape_err(format!(
            "response vector has {} entries but the layer has {k} neurons",
            y.len()
        )));
    }
    let mut out = vec![0.0f32; k * d];
    let mut acc = vec![0.0f64; d];
    for j in 0..k {
        let yj = y.data()[j] as f64;
        for (a, &w) in acc.iter_mut().zip(&weights.data()[j * d..(j + 1) * d]) {
            *a += yj * w as f64;
        }
        for (o, &a) in out[j * d..(j + 1) * d].iter_mut().zip(&acc) {
            *o = a as f32;
        }
    }
    Tensor::new(vec![k, d], out)
}

/// `dW[j, i] = eta * mean_b g[b, j] * (s[b, i] - s*[b, j, i])`.
pub fn plasticity(signals: &UpdateSignals, eta: f32) -> Result<Tensor> {
    let (b, k, d) = signals.dims()?;
    let gt = transpose(signals.gate.data(), b, k);
    let st = transpose(signals.target.data(), b, d);
    // sum_b g[b, j] * s[b, i]
    let mut acc = matmul_nt(&gt, &st, k, d, b);
    match &signals.reconstruction {
        Reconstruction::PerNeuron(r) => {
            for j in 0..k {
                let gsum: f64 = gt[j * b..(j + 1) * b].iter().map(|&g| g as f64).sum();
                for i in 0..d {
                    acc[j * d + i] -= gsum * r.data()[j * d + i] as f64;
                }
            }
        }
        Reconstruction::Cumulative { responses, weights } => {
            // sum_b g[b, j] * y[b, k] for k <= j
            let yt = transpose(responses.data(), b, k);
            let m = matmul_nt(&gt, &yt, k, k, b);
            for j in 0..k {
                for kk in 0..=j {
                    let c = m[j * k + kk];
                    for i in 0..d {
                        acc[j * d + i] -= c * weights.data()[kk * d + i] as f64;
                    }
                }
            }
        }
        Reconstruction::PerSample(r) => {
            let g = signals.gate.data();
            for s in 0..b {
                for j in 0..k {
                    let gj = g[s * k + j] as f64;
                    if gj == 0.0 {
                        continue;
                    }
                    let row = &r.data()[(s * k + j) * d..][..d];
                    for i in 0..d {
                        acc[j * d + i] -= gj * row[i] as f64;
                    }
                }
            }
        }
    }
    let inv_b = 1.0 / b as f64;
    let eta = eta as f64;
    let delta = acc.into_iter().map(|v| v * inv_b * eta).collect();
    Tensor::new(vec![k, d], to_f32(delta))
}

/// Linear responses `y = x . w^T`: `[B, D] x [K, D] -> [B, K]`.
pub fn responses(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let [b, d] = x.dims2()?;
    let [k, dw] = weights.dims2()?;
    if d != dw {
        return Err(shape_err(format!(
            "inputs have {d} features but weight rows have {dw}"
        )));
    }
    Tensor::new(vec![b, k], to_f32(matmul_nt(x.data(), weights.data(), b, k, d)))
}

/// Assemble the update signals for `target` given precomputed responses.
pub fn build_signals(
    cfg: &HebbianConfig,
    target: Tensor,
    y: &Tensor,
    weights: &Tensor,
) -> Result<UpdateSignals> {
    let (gate, reconstruction) = match cfg.rule {
        Rule::Swta => (
            gate_swta(y, cfg.temperature)?,
            Reconstruction::PerNeuron(reconstruct_swta(weights)),
        ),
        Rule::Hpca => (
            gate_hpca(y),
            Reconstruction::Cumulative {
                responses: y.clone(),
                weights: weights.clone(),
            },
        ),
    };
    Ok(UpdateSignals {
        target,
        reconstruction,
        gate,
    })
}

/// One batch update for the configured rule. `x: [B, D]`, `weights: [K, D]`.
pub fn hebbian_step(x: &Tensor, weights: &Tensor, cfg: &HebbianConfig) -> Result<Tensor> {
    cfg.validate()?;
    let y = responses(x, weights)?;
    let signals = build_signals(cfg, x.clone(), &y, weights)?;
    plasticity(&signals, cfg.eta)
}

pub fn swta_step(x: &Tensor, weights: &Tensor, cfg: &HebbianConfig) -> Result<Tensor> {
    if cfg.rule != Rule::Swta {
        return Err(Error::Config("swta_step called with a non-SWTA config".into()));
    }
    hebbian_step(x, weights, cfg)
}

pub fn hpca_step(x: &Tensor, weights: &Tensor, cfg: &HebbianConfig) -> Result<Tensor> {
    if cfg.rule != Rule::Hpca {
        return Err(Error::Config("hpca_step called with a non-HPCA config".into()));
    }
    hebbian_step(x, weights, cfg)
}

/// Mean Shannon entropy (nats) of the per-sample gate profile `|g| / sum |g|`.
/// All-zero rows count as zero entropy.
pub fn mean_gate_entropy(gate: &Tensor) -> f64 {
    let k = *gate.shape().last().expect("tensor rank >= 1");
    let rows = gate.len() / k;
    let mut total = 0.0;
    for row in gate.data().chunks_exact(k) {
        let norm: f64 = row.iter().map(|g| g.abs() as f64).sum();
        if norm <= 0.0 {
            continue;
        }
        total -= row
            .iter()
            .map(|g| g.abs() as f64 / norm)
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
    }
    total / rows as f64
}

pub fn init_weights<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, INIT_STD, rng)
}

/// Multi-step learning-rate decay: `eta * factor^(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f32,
}

impl StepDecay {
    pub fn rate(base: f32, decay: Option<StepDecay>, epoch: usize) -> f32 {
        match decay {
            Some(d) if d.every > 0 => base * d.factor.powi((epoch / d.every) as i32),
            _ => base,
        }
    }
}

/// Mini-batch training of a dense Hebbian layer.
#[derive(Clone, Copy, Debug)]
pub struct DenseTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub decay: Option<StepDecay>,
}

/// Train `weights` in place on `samples: [N, D]`; returns the mean
/// per-epoch Frobenius norm of the applied updates.
pub fn train_dense<R: Rng + ?Sized>(
    samples: &Tensor,
    weights: &mut Tensor,
    cfg: &HebbianConfig,
    plan: &DenseTraining,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let [n, d] = samples.dims2()?;
    if plan.epochs == 0 || plan.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let mut step_cfg = *cfg;
        step_cfg.eta = StepDecay::rate(cfg.eta, plan.decay, epoch);
        order.shuffle(rng);
        let mut norm_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(plan.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                batch.extend_from_slice(&samples.data()[i * d..(i + 1) * d]);
            }
            let x = Tensor::new(vec![chunk.len(), d], batch)?;
            let delta = hebbian_step(&x, weights, &step_cfg)?;
            norm_sum += delta.frobenius_norm();
            steps += 1;
            weights.add_assign(&delta)?;
            if !weights.is_finite() {
                return Err(Error::NonFinite {
                    layer: "dense".into(),
                    epoch: Some(epoch),
                });
            }
        }
        history.push(norm_sum / steps as f64);
    }
    Ok(history)
}
