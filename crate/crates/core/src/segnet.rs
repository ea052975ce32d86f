//! A small UNet-like encoder-decoder built from Hebbian-capable layers.
//!
//! With `S` stages and widths `w[0..S]` the network is
//!
//! ```text
//! enc_i : conv3x3 (pad 1) -> ReLU -> norm      (skip_i), then 2x2 max-pool
//! up_i  : t-conv 2x2 stride 2 -> ReLU -> norm   (for i = S-1 .. 0)
//! dec_i : concat(up_i, skip_i) -> conv3x3 -> ReLU -> norm
//! head  : concat(dec_0, 1) -> conv1x1 -> logits
//! ```
//!
//! `norm` divides each sample's feature map by its root-mean-square value
//! (no learned parameters, no batch statistics). It can be switched off
//! with [`NetworkSpec::feature_norm`]. Hebbian layers carry no bias; the
//! head's constant input channel acts as its bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{LayerKind, LayerWeights};
use crate::rules::{init_weights, INIT_STD};
use crate::tensor::{conv2d_forward, tconv2d_forward, ConvGeometry, Tensor};

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    /// Channel width of each stage, shallowest first.
    pub widths: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_true")]
    pub feature_norm: bool,
}

fn default_true() -> bool {
    true
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![16, 32, 64],
            classes: 2,
            feature_norm: true,
        }
    }
}

impl NetworkSpec {
    pub fn new(in_channels: usize, widths: Vec<usize>, classes: usize) -> Self {
        Self {
            in_channels,
            widths,
            classes,
            feature_norm: true,
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("network needs at least one stage".into()));
        }
        if self.in_channels == 0 || self.classes == 0 || self.widths.contains(&0) {
            return Err(Error::Config(
                "channel widths, input channels and class count must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Name, kind and geometry of every layer in forward order.
    pub fn layer_plan(&self) -> Vec<(String, LayerKind, ConvGeometry)> {
        let s = self.stages();
        let w = &self.widths;
        let mut plan = Vec::with_capacity(3 * s + 1);
        for i in 0..s {
            let cin = if i == 0 { self.in_channels } else { w[i - 1] };
            plan.push((format!("enc{i}"), LayerKind::Conv, ConvGeometry::new(cin, w[i], 3, 1, 1)));
        }
        for i in (0..s).rev() {
            let cin = if i == s - 1 { w[s - 1] } else { w[i + 1] };
            plan.push((format!("up{i}"), LayerKind::TConv, ConvGeometry::new(cin, w[i], 2, 2, 0)));
            plan.push((format!("dec{i}"), LayerKind::Conv, ConvGeometry::new(2 * w[i], w[i], 3, 1, 1)));
        }
        plan.push(("head".into(), LayerKind::Conv, ConvGeometry::new(w[0] + 1, self.classes, 1, 1, 0)));
        plan
    }

    pub(crate) fn enc_index(&self, i: usize) -> usize {
        i
    }

    pub(crate) fn up_index(&self, i: usize) -> usize {
        self.stages() + 2 * (self.stages() - 1 - i)
    }

    pub(crate) fn dec_index(&self, i: usize) -> usize {
        self.up_index(i) + 1
    }

    pub fn head_index(&self) -> usize {
        3 * self.stages()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(shape_err(format!("network input must be NCHW, got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(shape_err(format!(
                "network input has {c} channels, expected {}",
                self.in_channels
            )));
        }
        let div = 1usize << self.stages();
        if h % div != 0 || w % div != 0 {
            return Err(shape_err(format!(
                "input {h}x{w} is not divisible by 2^{} = {div}",
                self.stages()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerWeights>,
    generation: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

impl Network {
    /// Gaussian initialisation (std 0.1) of every layer, seeded.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_plan()
            .into_iter()
            .map(|(name, kind, geom)| {
                let shape = match kind {
                    LayerKind::Conv => geom.conv_weight_shape(),
                    LayerKind::TConv => geom.tconv_weight_shape(),
                };
                LayerWeights::new(name, kind, init_weights(&shape, &mut rng), geom)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            layers,
            generation: 0,
        })
    }

    pub fn from_layers(spec: NetworkSpec, layers: Vec<LayerWeights>) -> Result<Self> {
        spec.validate()?;
        let plan = spec.layer_plan();
        if plan.len() != layers.len() {
            return Err(shape_err(format!(
                "spec has {} layers, got {}",
                plan.len(),
                layers.len()
            )));
        }
        for ((name, kind, geom), layer) in plan.iter().zip(&layers) {
            if &layer.name != name || layer.kind != *kind || layer.geom != *geom {
                return Err(shape_err(format!(
                    "layer `{}` does not match the spec's `{name}`",
                    layer.name
                )));
            }
        }
        Ok(Self {
            spec,
            layers,
            generation: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerWeights> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn head(&self) -> &LayerWeights {
        &self.layers[self.spec.head_index()]
    }

    /// Counter bumped on every weight mutation; forward caches record it.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Mutable access to the weights; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [LayerWeights] {
        self.generation += 1;
        &mut self.layers
    }

    /// Scale every non-head layer to the Frobenius norm of a fresh
    /// initialisation. With feature normalisation on, the logits are
    /// unchanged; only the effective SGD step per layer changes. Without it
    /// this is a no-op. Returns whether weights were rescaled.
    pub fn rescale_backbone(&mut self) -> bool {
        if !self.spec.feature_norm {
            return false;
        }
        let head = self.spec.head_index();
        for layer in &mut self.layers[..head] {
            let norm = layer.weights.frobenius_norm();
            if norm > 0.0 {
                let target = f64::from(INIT_STD) * (layer.weights.len() as f64).sqrt();
                layer.weights.scale((target / norm) as f32);
            }
        }
        self.generation += 1;
        true
    }

    pub fn set_head(&mut self, head: LayerWeights) -> Result<()> {
        let idx = self.spec.head_index();
        let current = &self.layers[idx];
        if head.geom != current.geom || head.kind != current.kind {
            return Err(shape_err("replacement head does not match the network geometry"));
        }
        self.generation += 1;
        self.layers[idx] = LayerWeights { name: current.name.clone(), ..head };
        Ok(())
    }

    /// Logits `[N, classes, H, W]` and the activations needed for Hebbian
    /// steps and backward passes.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.spec.check_input(input.shape())?;
        let s = self.spec.stages();
        let mut layers: Vec<Option<LayerCache>> = vec![None; self.layers.len()];
        let mut pools = Vec::with_capacity(s);
        let mut skips = Vec::with_capacity(s);
        let mut x = input.clone();
        for i in 0..s {
            let idx = self.spec.enc_index(i);
            let (out, cache) = self.block(idx, x)?;
            let (pooled, pool) = max_pool2(&out)?;
            skips.push(out);
            pools.push(pool);
            layers[idx] = Some(cache);
            x = pooled;
        }
        for i in (0..s).rev() {
            let up = self.spec.up_index(i);
            let (u, cache) = self.block(up, x)?;
            layers[up] = Some(cache);
            let cat = concat_channels(&u, &skips[i])?;
            let dec = self.spec.dec_index(i);
            let (d, cache) = self.block(dec, cat)?;
            layers[dec] = Some(cache);
            x = d;
        }
        let head = self.spec.head_index();
        let x = with_constant_channel(&x)?;
        let logits = conv2d_forward(&x, &self.layers[head].weights, &self.layers[head].geom)?;
        layers[head] = Some(LayerCache {
            input: x,
            pre: logits.clone(),
            post: None,
        });
        let cache = ForwardCache {
            generation: self.generation,
            layers: layers.into_iter().map(|c| c.expect("every layer ran")).collect(),
            pools,
        };
        Ok((logits, cache))
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input)?.0)
    }

    /// Features seen by the classifier head: the shallowest decoder block's
    /// output plus the constant channel.
    pub fn features(&self, input: &Tensor) -> Result<Tensor> {
        let (_, cache) = self.forward(input)?;
        Ok(cache.layers[self.spec.head_index()].input.clone())
    }

    fn block(&self, idx: usize, input: Tensor) -> Result<(Tensor, LayerCache)> {
        let layer = &self.layers[idx];
        let pre = match layer.kind {
            LayerKind::Conv => conv2d_forward(&input, &layer.weights, &layer.geom)?,
            LayerKind::TConv => tconv2d_forward(&input, &layer.weights, &layer.geom)?,
        };
        let relu = pre.map(|v| v.max(0.0));
        let (out, inv_rms) = if self.spec.feature_norm {
            rms_normalize(&relu)?
        } else {
            let n = relu.shape()[0];
            (relu, vec![1.0; n])
        };
        let cache = LayerCache {
            input,
            pre,
            post: Some(PostCache {
                inv_rms,
                out: out.clone(),
            }),
        };
        Ok((out, cache))
    }
}

/// Per-layer activations from one forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub input: Tensor,
    /// Linear response before any nonlinearity.
    pub pre: Tensor,
    pub(crate) post: Option<PostCache>,
}

#[derive(Clone, Debug)]
pub(crate) struct PostCache {
    pub(crate) inv_rms: Vec<f64>,
    pub(crate) out: Tensor,
}

#[derive(Clone, Debug)]
pub(crate) struct PoolCache {
    pub(crate) in_shape: [usize; 4],
    pub(crate) argmax: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub(crate) generation: u64,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) pools: Vec<PoolCache>,
}

impl ForwardCache {
    pub fn layer(&self, idx: usize) -> &LayerCache {
        &self.layers[idx]
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// ReLU on/off state of every hidden unit and every pooling argmax.
    /// Two forward passes with equal patterns lie in the same linear piece
    /// of the network, which is what finite-difference checks need.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in self.layers.iter().filter(|l| l.post.is_some()) {
            out.extend(l.pre.data().iter().map(|&v| (v > 0.0) as usize));
        }
        for p in &self.pools {
            out.extend_from_slice(&p.argmax);
        }
        out
    }
}

/// Divide each sample by the RMS of its feature map. Returns the
/// per-sample inverse scale.
pub(crate) fn rms_normalize(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let n = x.shape()[0];
    let per = x.len() / n;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(n);
    for chunk in out.data_mut().chunks_exact_mut(per) {
        let ms = chunk.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / per as f64;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        for v in chunk.iter_mut() {
            *v = (*v as f64 * r) as f32;
        }
        inv.push(r);
    }
    Ok((out, inv))
}

/// 2x2 max-pool, stride 2. Ties go to the first element in scan order.
pub(crate) fn max_pool2(x: &Tensor) -> Result<(Tensor, PoolCache)> {
    let [n, c, h, w] = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for a in 0..oh {
            for b in 0..ow {
                let mut best = base + 2 * a * w + 2 * b;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * a + dy) * w + 2 * b + dx;
                    if x.data()[idx] > x.data()[best] {
                        best = idx;
                    }
                }
                out.push(x.data()[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, oh, ow], out)?,
        PoolCache {
            in_shape: [n, c, h, w],
            argmax,
        },
    ))
}

/// Append a channel of ones.
pub(crate) fn with_constant_channel(x: &Tensor) -> Result<Tensor> {
    let [n, _, h, w] = x.dims4()?;
    concat_channels(x, &Tensor::full(&[n, 1, h, w], 1.0))
}

pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err(format!(
            "cannot concatenate {:?} and {:?} along channels",
            a.shape(),
            b.shape()
        )));
    }
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(n * (pa + pb));
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
        data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
    }
    Tensor::new(vec![n, ca + cb, h, w], data)
}
