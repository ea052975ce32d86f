//! Patch-wise Hebbian updates for convolution and transpose-convolution
//! layers.
//!
//! A convolution is a dense layer applied to every unfolded patch, so its
//! update is the dense rule on the patch matrix (patches and batch items are
//! samples, channels are the competing neurons). Transpose convolutions have
//! two strategies: [`tconv_hebbian_step_s`] swaps the roles of the two maps,
//! and [`tconv_hebbian_step_tsa`] keeps the downsampled map as the target and
//! reconstructs it from the upsampled map with a dedicated block
//! ([`tsa_reconstruction`]).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rules::{
    build_signals, gate_hpca, gate_swta, mean_gate_entropy, plasticity, responses, HebbianConfig,
    Reconstruction, Rule, UpdateSignals,
};
use crate::tensor::{tconv2d_forward, unfold, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    TConv,
}

/// Weights of one layer. Conv weights are `[Cout, Cin, kh, kw]`, t-conv
/// weights `[Cin, Cout, kh, kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub name: String,
    pub kind: LayerKind,
    pub weights: Tensor,
    pub geom: ConvGeometry,
}

impl LayerWeights {
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        weights: Tensor,
        geom: ConvGeometry,
    ) -> Result<Self> {
        geom.validate()?;
        let expected = match kind {
            LayerKind::Conv => geom.conv_weight_shape(),
            LayerKind::TConv => geom.tconv_weight_shape(),
        };
        let name = name.into();
        if weights.shape() != expected {
            return Err(shape_err(format!(
                "layer `{name}`: weights {:?} do not match {kind:?} geometry {expected:?}",
                weights.shape()
            )));
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite {
                layer: name,
                epoch: None,
            });
        }
        Ok(Self {
            name,
            kind,
            weights,
            geom,
        })
    }

    /// Neuron count and weight-row length of the dense view used by the rules.
    fn matrix_dims(&self) -> (usize, usize) {
        let [a, b, kh, kw] = self.weights.dims4().expect("4-D weights");
        (a, b * kh * kw)
    }

    fn as_matrix(&self) -> Tensor {
        let (rows, cols) = self.matrix_dims();
        Tensor::new(vec![rows, cols], self.weights.data().to_vec()).expect("same element count")
    }
}

/// Update proposed by one Hebbian step, plus telemetry.
#[derive(Clone, Debug, PartialEq)]
pub struct HebbianStepReport {
    pub delta: Tensor,
    /// Frobenius norm of `delta` divided by the number of weights.
    pub mean_update_norm: f64,
    pub mean_gate_entropy: f64,
}

impl HebbianStepReport {
    fn new(delta: Tensor, gate: &Tensor) -> Self {
        let mean_update_norm = delta.frobenius_norm() / delta.len() as f64;
        Self {
            delta,
            mean_update_norm,
            mean_gate_entropy: mean_gate_entropy(gate),
        }
    }
}

/// `[N, C, H, W]` -> `[N*H*W, C]`: one row per spatial location.
pub(crate) fn nchw_to_rows(t: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = t.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0f32; t.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &t.data()[(b * c + ch) * hw..][..hw];
            for (p, &v) in src.iter().enumerate() {
                out[(b * hw + p) * c + ch] = v;
            }
        }
    }
    Tensor::new(vec![n * hw, c], out)
}

fn require_kind(layer: &LayerWeights, kind: LayerKind) -> Result<()> {
    if layer.kind != kind {
        return Err(shape_err(format!(
            "layer `{}` is {:?}, expected {kind:?}",
            layer.name, layer.kind
        )));
    }
    Ok(())
}

/// Hebbian step for a convolution layer: the dense rule applied to every
/// unfolded input patch, averaged over patches and batch items.
pub fn conv_hebbian_step(
    input: &Tensor,
    layer: &LayerWeights,
    cfg: &HebbianConfig,
) -> Result<HebbianStepReport> {
    require_kind(layer, LayerKind::Conv)?;
    cfg.validate()?;
    let [_, c, _, _] = input.dims4()?;
    if c != layer.geom.in_channels {
        return Err(shape_err(format!(
            "layer `{}`: input has {c} channels, expected {}",
            layer.name, layer.geom.in_channels
        )));
    }
    let patches = unfold(input, &layer.geom)?;
    let [n, p, d] = [patches.shape()[0], patches.shape()[1], patches.shape()[2]];
    let x = patches.reshape(&[n * p, d])?;
    let w = layer.as_matrix();
    let y = responses(&x, &w)?;
    conv_step_from_patches(x, &y, layer, cfg)
}

/// Conv step reusing the layer's cached pre-activation output as the responses.
pub(crate) fn conv_step_with_output(
    input: &Tensor,
    output: &Tensor,
    layer: &LayerWeights,
    cfg: &HebbianConfig,
) -> Result<HebbianStepReport> {
    require_kind(layer, LayerKind::Conv)?;
    cfg.validate()?;
    let patches = unfold(input, &layer.geom)?;
    let [n, p, d] = [patches.shape()[0], patches.shape()[1], patches.shape()[2]];
    let y = nchw_to_rows(output)?;
    if y.shape() != [n * p, layer.geom.out_channels] {
        return Err(shape_err(format!(
            "layer `{}`: cached output {:?} does not match the input patches",
            layer.name,
            output.shape()
        )));
    }
    conv_step_from_patches(patches.reshape(&[n * p, d])?, &y, layer, cfg)
}

fn conv_step_from_patches(
    x: Tensor,
    y: &Tensor,
    layer: &LayerWeights,
    cfg: &HebbianConfig,
) -> Result<HebbianStepReport> {
    let w = layer.as_matrix();
    let signals = build_signals(cfg, x, y, &w)?;
    let delta = plasticity(&signals, cfg.eta)?.reshape(layer.weights.shape())?;
    Ok(HebbianStepReport::new(delta, &signals.gate))
}

/// Transpose-convolution step, role-swapped strategy. `output` must be the
/// layer's (pre-activation) output for `input`.
///
/// Each downsampled location is paired with the upsampled patch it
/// generated; that patch is the target, and the downsampled activation
/// vector drives gate and reconstruction. Neurons are the input channels.
pub fn tconv_hebbian_step_s(
    input: &Tensor,
    output: &Tensor,
    layer: &LayerWeights,
    cfg: &HebbianConfig,
) -> Result<HebbianStepReport> {
    require_kind(layer, LayerKind::TConv)?;
    cfg.validate()?;
    let [n, c, h, w] = input.dims4()?;
    if c != layer.geom.in_channels {
        return Err(shape_err(format!(
            "layer `{}`: input has {c} channels, expected {}",
            layer.name, layer.geom.in_channels
        )));
    }
    let (oh, ow) = layer.geom.tconv_output_hw(h, w)?;
    let expected = [n, layer.geom.out_channels, oh, ow];
    if output.shape() != expected {
        return Err(shape_err(format!(
            "layer `{}`: output map {:?} does not match t-conv output {expected:?}",
            layer.name,
            output.shape()
        )));
    }
    let patches = unfold(output, &layer.geom.swapped())?;
    let [_, p, d] = [patches.shape()[0], patches.shape()[1], patches.shape()[2]];
    debug_assert_eq!(p, h * w);
    let target = patches.reshape(&[n * p, d])?;
    let y = nchw_to_rows(input)?;
    let wm = layer.as_matrix();
    let signals = build_signals(cfg, target, &y, &wm)?;
    let delta = plasticity(&signals, cfg.eta)?.reshape(layer.weights.shape())?;
    Ok(HebbianStepReport::new(delta, &signals.gate))
}

fn tsa_dims(upsampled: &Tensor, weights: &Tensor, geom: &ConvGeometry) -> Result<[usize; 7]> {
    let [n, cout, hh, ww] = upsampled.dims4()?;
    if weights.shape() != geom.tconv_weight_shape() {
        return Err(shape_err(format!(
            "t-conv weights {:?} do not match geometry {:?}",
            weights.shape(),
            geom.tconv_weight_shape()
        )));
    }
    if cout != geom.out_channels {
        return Err(shape_err(format!(
            "upsampled map has {cout} channels, geometry expects {}",
            geom.out_channels
        )));
    }
    let (h, w) = geom.swapped().conv_output_hw(hh, ww)?;
    Ok([n, cout, hh, ww, geom.in_channels, h, w])
}

/// Reconstruction block for the transposed-structure-aware strategy.
///
/// For each output neuron `j` the upsampled map is transformed (SWTA: channel
/// `j` set to one, the rest to zero; HPCA: channels `0..=j` kept, the rest
/// zeroed), unfolded with the layer geometry and multiplied by the weight
/// matrix. The result for neuron `j` has exactly the downsampled map's shape;
/// the returned tensor is `[Cout, N, Cin, h, w]`.
///
/// This is the single-pass form: one unfold of the upsampled map, with the
/// per-neuron sums read off a running accumulator.
pub fn tsa_reconstruction(
    upsampled: &Tensor,
    weights: &Tensor,
    geom: &ConvGeometry,
    rule: Rule,
) -> Result<Tensor> {
    let [n, cout, _, _, cin, h, w] = tsa_dims(upsampled, weights, geom)?;
    let kk = geom.kernel_h * geom.kernel_w;
    let row = cout * kk;
    let p = h * w;
    let wd = weights.data();
    let mut out = vec![0.0f32; cout * n * cin * p];
    let at = |j: usize, b: usize, c: usize, loc: usize| ((j * n + b) * cin + c) * p + loc;
    match rule {
        Rule::Hpca => {
            let cols = unfold(upsampled, &geom.swapped())?;
            for b in 0..n {
                for loc in 0..p {
                    let patch = &cols.data()[(b * p + loc) * row..][..row];
                    for c in 0..cin {
                        let wrow = &wd[c * row..(c + 1) * row];
                        let mut acc = 0.0f64;
                        for j in 0..cout {
                            for t in j * kk..(j + 1) * kk {
                                acc += patch[t] as f64 * wrow[t] as f64;
                            }
                            out[at(j, b, c, loc)] = acc as f32;
                        }
                    }
                }
            }
        }
        Rule::Swta => {
            // The transformed map is a constant one on channel j, so only the
            // in-bounds taps at each location contribute.
            let ones = Tensor::full(&[1, 1, upsampled.shape()[2], upsampled.shape()[3]], 1.0);
            let single = ConvGeometry {
                in_channels: 1,
                out_channels: 1,
                ..*geom
            };
            let mask = unfold(&ones, &single)?;
            for loc in 0..p {
                let valid = &mask.data()[loc * kk..(loc + 1) * kk];
                for c in 0..cin {
                    for j in 0..cout {
                        let taps = &wd[c * row + j * kk..][..kk];
                        let mut acc = 0.0f64;
                        for (m, &wv) in valid.iter().zip(taps) {
                            acc += *m as f64 * wv as f64;
                        }
                        for b in 0..n {
                            out[at(j, b, c, loc)] = acc as f32;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, n, cin, h, w], out)
}

/// Step-by-step form of [`tsa_reconstruction`]: materialise each transformed
/// map, unfold it, multiply by the weight matrix.
pub fn tsa_reconstruction_literal(
    upsampled: &Tensor,
    weights: &Tensor,
    geom: &ConvGeometry,
    rule: Rule,
) -> Result<Tensor> {
    let [n, cout, hh, ww, cin, h, w] = tsa_dims(upsampled, weights, geom)?;
    let row = cout * geom.kernel_h * geom.kernel_w;
    let p = h * w;
    let plane = hh * ww;
    let mut out = Vec::with_capacity(cout * n * cin * p);
    for j in 0..cout {
        // (i) channel transform
        let mut transformed = upsampled.clone();
        for b in 0..n {
            for k in 0..cout {
                let dst = &mut transformed.data_mut()[(b * cout + k) * plane..][..plane];
                match rule {
                    Rule::Swta => dst.fill(if k == j { 1.0 } else { 0.0 }),
                    Rule::Hpca if k > j => dst.fill(0.0),
                    Rule::Hpca => {}
                }
            }
        }
        // (ii) unfold
        let cols = unfold(&transformed, &geom.swapped())?;
        // (iii) patches x weight matrix^T
        for b in 0..n {
            for c in 0..cin {
                let wrow = &weights.data()[c * row..(c + 1) * row];
                for loc in 0..p {
                    let patch = &cols.data()[(b * p + loc) * row..][..row];
                    let mut acc = 0.0f64;
                    for (x, wv) in patch.iter().zip(wrow) {
                        acc += *x as f64 * *wv as f64;
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor::new(vec![cout, n, cin, h, w], out)
}

/// Gate for the TSA strategy: the gating block applied to the upsampled
/// activation vector at every output pixel, averaged over the in-bounds
/// pixels generated by each downsampled location. Returns `[N*h*w, Cout]`.
pub(crate) fn tsa_gate(
    upsampled: &Tensor,
    geom: &ConvGeometry,
    cfg: &HebbianConfig,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let [n, cout, hh, ww] = upsampled.dims4()?;
    let per_pixel = match cfg.rule {
        Rule::Swta => gate_swta(&nchw_to_rows(upsampled)?, cfg.temperature)?,
        Rule::Hpca => gate_hpca(&nchw_to_rows(upsampled)?),
    };
    let mut out = vec![0.0f32; n * h * w * cout];
    let mut acc = vec![0.0f64; cout];
    for b in 0..n {
        for a in 0..h {
            for c in 0..w {
                acc.fill(0.0);
                let mut count = 0usize;
                for u in 0..geom.kernel_h {
                    let Some(oy) = geom.source(a, u, hh) else { continue };
                    for v in 0..geom.kernel_w {
                        let Some(ox) = geom.source(c, v, ww) else { continue };
                        let g = &per_pixel.data()[((b * hh + oy) * ww + ox) * cout..][..cout];
                        for (s, &gv) in acc.iter_mut().zip(g) {
                            *s += gv as f64;
                        }
                        count += 1;
                    }
                }
                let dst = &mut out[((b * h + a) * w + c) * cout..][..cout];
                if count > 0 {
                    for (d, s) in dst.iter_mut().zip(&acc) {
                        *d = (s / count as f64) as f32;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * h * w, cout], out)
}

/// Transpose-convolution step, transposed-structure-aware strategy.
///
/// The downsampled input map is the target; gate and reconstruction come
/// from the upsampled output through [`tsa_gate`] and
/// [`tsa_reconstruction`]. The plasticity update for neuron `j` and input
/// channel `c` is spread evenly over the `kh * kw` taps of `w[c, j]`, so
/// the tap sum used by the reconstruction moves by exactly that update.
pub fn tconv_hebbian_step_tsa(
    input: &Tensor,
    layer: &LayerWeights,
    cfg: &HebbianConfig,
) -> Result<HebbianStepReport> {
    require_kind(layer, LayerKind::TConv)?;
    let upsampled = tconv2d_forward(input, &layer.weights, &layer.geom)?;
    tsa_step_with_output(input, &upsampled, layer, cfg)
}

pub(crate) fn tsa_step_with_output(
    input: &Tensor,
    upsampled: &Tensor,
    layer: &LayerWeights,
    cfg: &HebbianConfig,
) -> Result<HebbianStepReport> {
    cfg.validate()?;
    let [n, cin, h, w] = input.dims4()?;
    if cin != layer.geom.in_channels {
        return Err(shape_err(format!(
            "layer `{}`: input has {cin} channels, expected {}",
            layer.name, layer.geom.in_channels
        )));
    }
    let recon = tsa_reconstruction(upsampled, &layer.weights, &layer.geom, cfg.rule)?;
    let cout = layer.geom.out_channels;
    if recon.shape()[2..] != [cin, h, w] {
        return Err(shape_err(format!(
            "layer `{}`: reconstruction {:?} does not match the input map {:?}",
            layer.name,
            &recon.shape()[2..],
            input.shape()
        )));
    }
    let p = h * w;
    // [Cout, N, Cin, h, w] -> [N*h*w, Cout, Cin]
    let mut per_sample = vec![0.0f32; n * p * cout * cin];
    for j in 0..cout {
        for b in 0..n {
            for c in 0..cin {
                let src = &recon.data()[((j * n + b) * cin + c) * p..][..p];
                for (loc, &v) in src.iter().enumerate() {
                    per_sample[((b * p + loc) * cout + j) * cin + c] = v;
                }
            }
        }
    }
    let signals = UpdateSignals {
        target: nchw_to_rows(input)?,
        reconstruction: Reconstruction::PerSample(Tensor::new(
            vec![n * p, cout, cin],
            per_sample,
        )?),
        gate: tsa_gate(upsampled, &layer.geom, cfg, h, w)?,
    };
    let dense = plasticity(&signals, cfg.eta)?; // [Cout, Cin]
    let kk = layer.geom.kernel_h * layer.geom.kernel_w;
    let mut delta = Tensor::zeros(layer.weights.shape());
    for c in 0..cin {
        for j in 0..cout {
            let v = dense.data()[j * cin + c] / kk as f32;
            delta.data_mut()[(c * cout + j) * kk..][..kk].fill(v);
        }
    }
    Ok(HebbianStepReport::new(delta, &signals.gate))
}

/// `weights += delta`, rejecting shape mismatches and non-finite results.
pub fn apply_update(layer: &LayerWeights, report: &HebbianStepReport) -> Result<LayerWeights> {
    let mut next = layer.clone();
    apply_update_in_place(&mut next, report)?;
    Ok(next)
}

pub fn apply_update_in_place(layer: &mut LayerWeights, report: &HebbianStepReport) -> Result<()> {
    if report.delta.shape() != layer.weights.shape() {
        return Err(shape_err(format!(
            "layer `{}`: update {:?} does not match weights {:?}",
            layer.name,
            report.delta.shape(),
            layer.weights.shape()
        )));
    }
    let mut updated = layer.weights.clone();
    updated.add_assign(&report.delta)?;
    if !updated.is_finite() {
        return Err(Error::NonFinite {
            layer: layer.name.clone(),
            epoch: None,
        });
    }
    layer.weights = updated;
    Ok(())
}
