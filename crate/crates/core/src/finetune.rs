//! Stage 2: supervised training with hand-written backward passes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Mask, Sample};
use crate::error::{shape_err, Error, Result};
use crate::layers::{LayerKind, LayerWeights};
use crate::metrics::{dice, BinaryMask};
use crate::rules::init_weights;
use crate::segnet::{ForwardCache, Network, PoolCache};
use crate::tensor::{
    conv2d_forward, matmul_nt, tconv2d_forward_to, transpose, unfold_image, ConvGeometry, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SGDConfig {
    pub lr0: f32,
    pub decay_every: usize,
    pub decay_factor: f32,
    pub epochs: usize,
    pub momentum: f32,
    pub batch_size: usize,
}

impl Default for SGDConfig {
    fn default() -> Self {
        Self {
            lr0: 0.5,
            decay_every: 50,
            decay_factor: 0.1,
            epochs: 200,
            momentum: 0.9,
            batch_size: 4,
        }
    }
}

impl SGDConfig {
    pub fn validate(&self) -> Result<()> {
        self.validate_schedule()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }

    fn validate_schedule(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    /// `lr0 * decay_factor^floor(epoch / decay_every)`.
    pub fn lr(&self, epoch: usize) -> f64 {
        let steps = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.lr0 as f64 * (self.decay_factor as f64).powi(steps as i32)
    }
}

/// Weight gradients, one per network layer in forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub names: Vec<String>,
    pub grads: Vec<Tensor>,
}

impl GradientSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }
}

/// Mean pixel-wise cross-entropy of `logits: [N, K, H, W]` against class
/// labels `target` (`N*H*W`, row-major). Returns the loss and its gradient.
pub fn softmax_ce_loss(logits: &Tensor, target: &[u8]) -> Result<(f64, Tensor)> {
    let [n, k, h, w] = logits.dims4()?;
    let hw = h * w;
    if target.len() != n * hw {
        return Err(shape_err(format!(
            "target has {} labels, logits {:?} need {}",
            target.len(),
            logits.shape(),
            n * hw
        )));
    }
    if let Some(&bad) = target.iter().find(|&&c| c as usize >= k) {
        return Err(Error::Data(format!("class label {bad} out of range for {k} classes")));
    }
    let total = (n * hw) as f64;
    let mut grad = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    let x = logits.data();
    let mut p = vec![0.0f64; k];
    for b in 0..n {
        for pix in 0..hw {
            let at = |c: usize| b * k * hw + c * hw + pix;
            let m = (0..k).map(|c| x[at(c)] as f64).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, pc) in p.iter_mut().enumerate() {
                *pc = (x[at(c)] as f64 - m).exp();
                z += *pc;
            }
            let label = target[b * hw + pix] as usize;
            loss += z.ln() + m - x[at(label)] as f64;
            for (c, pc) in p.iter().enumerate() {
                let onehot = if c == label { 1.0 } else { 0.0 };
                grad[at(c)] = ((pc / z - onehot) / total) as f32;
            }
        }
    }
    Ok((loss / total, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Reverse-mode gradients of the loss with respect to every layer's weights.
pub fn backward(net: &Network, cache: &ForwardCache, dlogits: &Tensor) -> Result<GradientSet> {
    if cache.generation() != net.generation() {
        return Err(Error::StaleCache(format!(
            "cache from generation {}, network is at generation {}",
            cache.generation(),
            net.generation()
        )));
    }
    let spec = net.spec();
    let s = spec.stages();
    let head = spec.head_index();
    let hc = cache.layer(head);
    if dlogits.shape() != hc.pre.shape() {
        return Err(shape_err(format!(
            "logit gradient {:?} does not match logits {:?}",
            dlogits.shape(),
            hc.pre.shape()
        )));
    }
    let layers = net.layers();
    let mut grads: Vec<Option<Tensor>> = vec![None; layers.len()];
    let (gw, gx) = conv_backward(&hc.input, dlogits, &layers[head], true)?;
    grads[head] = Some(gw);
    let gx = gx.expect("input gradient requested");
    let mut g = split_channels(&gx, gx.shape()[1] - 1)?.0;
    let mut skip_grads: Vec<Option<Tensor>> = vec![None; s];
    for (i, skip) in skip_grads.iter_mut().enumerate() {
        let dec = spec.dec_index(i);
        let (gw, gcat) = block_backward(net, cache, dec, g, true)?;
        grads[dec] = Some(gw);
        let up = spec.up_index(i);
        let (gu, gskip) = split_channels(&gcat.expect("requested"), layers[up].geom.out_channels)?;
        *skip = Some(gskip);
        let (gw, gin) = block_backward(net, cache, up, gu, true)?;
        grads[up] = Some(gw);
        g = gin.expect("requested");
    }
    for i in (0..s).rev() {
        let mut gout = skip_grads[i].take().expect("filled above");
        gout.add_assign(&unpool(&g, &cache.pools[i])?)?;
        let enc = spec.enc_index(i);
        let (gw, gin) = block_backward(net, cache, enc, gout, i > 0)?;
        grads[enc] = Some(gw);
        if let Some(gin) = gin {
            g = gin;
        }
    }
    let grads: Vec<Tensor> = grads.into_iter().map(|t| t.expect("every layer")).collect();
    for (t, l) in grads.iter().zip(layers) {
        if !t.is_finite() {
            return Err(Error::NonFinite {
                layer: format!("gradient of {}", l.name),
                epoch: None,
            });
        }
    }
    Ok(GradientSet {
        names: layers.iter().map(|l| l.name.clone()).collect(),
        grads,
    })
}

/// Back through norm and ReLU, then the layer itself.
fn block_backward(
    net: &Network,
    cache: &ForwardCache,
    idx: usize,
    gout: Tensor,
    need_input: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let lc = cache.layer(idx);
    let post = lc
        .post
        .as_ref()
        .ok_or_else(|| shape_err("block without post-activation cache"))?;
    if gout.shape() != post.out.shape() {
        return Err(shape_err(format!(
            "gradient {:?} does not match block output {:?}",
            gout.shape(),
            post.out.shape()
        )));
    }
    let mut g = if net.spec().feature_norm {
        norm_backward(&gout, &post.out, &post.inv_rms)
    } else {
        gout
    };
    for (gv, &pre) in g.data_mut().iter_mut().zip(lc.pre.data()) {
        if pre <= 0.0 {
            *gv = 0.0;
        }
    }
    let layer = &net.layers()[idx];
    match layer.kind {
        LayerKind::Conv => conv_backward(&lc.input, &g, layer, need_input),
        LayerKind::TConv => tconv_backward(&lc.input, &g, layer, need_input),
    }
}

/// `out = a * r`, `r = (mean(a^2) + eps)^-1/2` per sample:
/// `da = r * (dout - out * mean(dout * out))`.
fn norm_backward(gout: &Tensor, out: &Tensor, inv_rms: &[f64]) -> Tensor {
    let n = inv_rms.len();
    let per = out.len() / n;
    let mut g = gout.clone();
    for ((gc, oc), &r) in g
        .data_mut()
        .chunks_exact_mut(per)
        .zip(out.data().chunks_exact(per))
        .zip(inv_rms)
    {
        let m = gc.iter().zip(oc).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / per as f64;
        for (gv, &ov) in gc.iter_mut().zip(oc) {
            *gv = (r * (*gv as f64 - ov as f64 * m)) as f32;
        }
    }
    g
}

/// Weight gradient of a convolution: correlation of the input with the
/// output gradient, summed over the batch.
pub fn conv_weight_grad(input: &Tensor, gout: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let [gn, gc, oh, ow] = gout.dims4()?;
    if gn != n || gc != geom.out_channels || geom.conv_output_hw(h, w)? != (oh, ow) {
        return Err(shape_err(format!(
            "conv gradient {:?} does not match input {:?}",
            gout.shape(),
            input.shape()
        )));
    }
    let (p, d) = (oh * ow, c * geom.kernel_h * geom.kernel_w);
    let mut acc = vec![0.0f64; gc * d];
    for (img, g) in input
        .data()
        .chunks_exact(c * h * w)
        .zip(gout.data().chunks_exact(gc * p))
    {
        let cols = transpose(&unfold_image(img, c, h, w, geom, oh, ow), p, d);
        for (a, v) in acc.iter_mut().zip(matmul_nt(g, &cols, gc, d, p)) {
            *a += v;
        }
    }
    Tensor::new(
        geom.conv_weight_shape().to_vec(),
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

fn conv_backward(
    input: &Tensor,
    gout: &Tensor,
    layer: &LayerWeights,
    need_input: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let gw = conv_weight_grad(input, gout, &layer.geom)?;
    let gx = if need_input {
        let [_, _, h, w] = input.dims4()?;
        Some(tconv2d_forward_to(gout, &layer.weights, &layer.geom.swapped(), h, w)?)
    } else {
        None
    };
    Ok((gw, gx))
}

fn tconv_backward(
    input: &Tensor,
    gout: &Tensor,
    layer: &LayerWeights,
    need_input: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let geom = &layer.geom;
    let [n, cin, h, w] = input.dims4()?;
    let [gn, cout, oh, ow] = gout.dims4()?;
    if gn != n || cout != geom.out_channels || geom.tconv_output_hw(h, w)? != (oh, ow) {
        return Err(shape_err(format!(
            "t-conv gradient {:?} does not match input {:?}",
            gout.shape(),
            input.shape()
        )));
    }
    let (p, r) = (h * w, cout * geom.kernel_h * geom.kernel_w);
    let mut acc = vec![0.0f64; cin * r];
    for (img, g) in input
        .data()
        .chunks_exact(cin * p)
        .zip(gout.data().chunks_exact(cout * oh * ow))
    {
        let cols = transpose(&unfold_image(g, cout, oh, ow, geom, h, w), p, r);
        for (a, v) in acc.iter_mut().zip(matmul_nt(img, &cols, cin, r, p)) {
            *a += v;
        }
    }
    let gw = Tensor::new(
        geom.tconv_weight_shape().to_vec(),
        acc.into_iter().map(|v| v as f32).collect(),
    )?;
    let gx = if need_input {
        Some(conv2d_forward(gout, &layer.weights, &geom.swapped())?)
    } else {
        None
    };
    Ok((gw, gx))
}

fn split_channels(x: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = x.dims4()?;
    if first > c {
        return Err(shape_err(format!("cannot split {c} channels at {first}")));
    }
    let (pa, pb) = (first * h * w, (c - first) * h * w);
    let mut a = Vec::with_capacity(n * pa);
    let mut b = Vec::with_capacity(n * pb);
    for item in x.data().chunks_exact(pa + pb) {
        a.extend_from_slice(&item[..pa]);
        b.extend_from_slice(&item[pa..]);
    }
    Ok((
        Tensor::new(vec![n, first, h, w], a)?,
        Tensor::new(vec![n, c - first, h, w], b)?,
    ))
}

fn unpool(g: &Tensor, pool: &PoolCache) -> Result<Tensor> {
    if g.len() != pool.argmax.len() {
        return Err(shape_err("pooled gradient does not match the pooling cache"));
    }
    let mut out = Tensor::zeros(&pool.in_shape);
    let data = out.data_mut();
    for (&gv, &src) in g.data().iter().zip(&pool.argmax) {
        data[src] += gv;
    }
    Ok(out)
}

/// Per-pixel argmax class (ties to the lowest index) of `[N, K, H, W]` logits.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<Mask>> {
    let [n, k, h, w] = logits.dims4()?;
    let hw = h * w;
    let x = logits.data();
    Ok((0..n)
        .map(|b| {
            let labels = (0..hw)
                .map(|pix| {
                    let mut best = 0;
                    for c in 1..k {
                        if x[(b * k + c) * hw + pix] > x[(b * k + best) * hw + pix] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            Mask::new(h, w, labels).expect("sizes match")
        })
        .collect())
}

/// Dice of the predicted against the true mask, averaged over the
/// foreground classes `1..classes`.
pub fn foreground_dice(pred: &Mask, target: &Mask, classes: usize) -> Result<f64> {
    let fg = classes.max(2) - 1;
    let mut sum = 0.0;
    for c in 1..=fg {
        sum += dice(&BinaryMask::of_class(pred, c as u8), &BinaryMask::of_class(target, c as u8))?;
    }
    Ok(sum / fg as f64)
}

fn require_mask(s: &Sample) -> Result<&Mask> {
    s.mask
        .as_ref()
        .ok_or_else(|| Error::Data(format!("sample `{}` has no mask", s.id)))
}

/// Mean foreground Dice of `net` over a labelled set.
pub fn mean_dice(net: &Network, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut sum = 0.0;
    for chunk in samples.chunks(8) {
        let batch = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let preds = argmax_labels(&net.predict(&batch)?)?;
        for (p, s) in preds.iter().zip(chunk) {
            sum += foreground_dice(p, require_mask(s)?, net.spec().classes)?;
        }
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dc: f64,
}

pub fn write_history_csv(rows: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub augment: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    /// Weights from the epoch with the highest validation Dice.
    pub net: Network,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_val_dc: f64,
}

struct Momentum {
    velocity: Vec<Vec<f32>>,
}

impl Momentum {
    fn new(shapes: impl Iterator<Item = usize>) -> Self {
        Self {
            velocity: shapes.map(|n| vec![0.0; n]).collect(),
        }
    }

    /// `v = m v + g; w -= lr v` for the selected weight tensors.
    fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (usize, &'a mut Tensor, &'a Tensor)>,
        lr: f64,
        momentum: f32,
    ) {
        for (slot, w, g) in params {
            for ((wv, vv), &gv) in w
                .data_mut()
                .iter_mut()
                .zip(self.velocity[slot].iter_mut())
                .zip(g.data())
            {
                *vv = momentum * *vv + gv;
                *wv = (*wv as f64 - lr * *vv as f64) as f32;
            }
        }
    }
}

fn batch_of(items: &[(Tensor, Mask)]) -> Result<(Tensor, Vec<u8>)> {
    let images: Vec<Tensor> = items.iter().map(|(t, _)| t.clone()).collect();
    let labels = items.iter().flat_map(|(_, m)| m.labels.iter().copied()).collect();
    Ok((Tensor::stack(&images)?, labels))
}

fn check_sets(labeled: &[Sample], val: &[Sample]) -> Result<()> {
    if labeled.is_empty() {
        return Err(Error::Data("the labelled regime is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("the validation set is empty".into()));
    }
    for s in labeled.iter().chain(val) {
        require_mask(s)?;
    }
    Ok(())
}

/// Full fine-tuning with momentum SGD and multi-step decay. Every epoch is
/// followed by a validation pass; the best epoch's weights are returned.
/// The backbone is first rescaled with [`Network::rescale_backbone`].
pub fn finetune(
    mut net: Network,
    labeled: &[Sample],
    val: &[Sample],
    cfg: &SGDConfig,
    opts: &FinetuneOptions,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    check_sets(labeled, val)?;
    net.rescale_backbone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut momentum = Momentum::new(net.layers().iter().map(|l| l.weights.len()));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Network)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<(Tensor, Mask)> = chunk
                .iter()
                .map(|&i| {
                    let s = &labeled[i];
                    let mask = require_mask(s)?;
                    if opts.augment {
                        augment(&s.image, mask, rng.random())
                    } else {
                        Ok((s.image.clone(), mask.clone()))
                    }
                })
                .collect::<Result<_>>()?;
            let (batch, labels) = batch_of(&items)?;
            let (logits, cache) = net.forward(&batch)?;
            let (loss, dlogits) = softmax_ce_loss(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    layer: "loss".into(),
                    epoch: Some(epoch),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            let grads = backward(&net, &cache, &dlogits)?;
            momentum.step(
                net.layers_mut()
                    .iter_mut()
                    .zip(&grads.grads)
                    .enumerate()
                    .map(|(i, (l, g))| (i, &mut l.weights, g)),
                lr,
                cfg.momentum,
            );
        }
        for l in net.layers() {
            if !l.weights.is_finite() {
                return Err(Error::NonFinite {
                    layer: l.name.clone(),
                    epoch: Some(epoch),
                });
            }
        }
        let val_dc = mean_dice(&net, val)?;
        history.push(HistoryRow {
            epoch,
            lr,
            train_loss: loss_sum / labeled.len() as f64,
            val_dc,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_dc > *b) {
            best = Some((epoch, val_dc, net.clone()));
        }
    }
    let (best_epoch, best_val_dc, net) = best.expect("at least one epoch");
    Ok(FinetuneResult {
        net,
        history,
        best_epoch,
        best_val_dc,
    })
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    /// The probe head (best validation epoch, or the initialisation when
    /// no epochs were run).
    pub head: LayerWeights,
    pub val_dc: f64,
    pub history: Vec<HistoryRow>,
}

fn head_dice(head: &LayerWeights, feats: &[Tensor], val: &[Sample], classes: usize) -> Result<f64> {
    let mut sum = 0.0;
    for (f, s) in feats.iter().zip(val) {
        let logits = conv2d_forward(f, &head.weights, &head.geom)?;
        let pred = &argmax_labels(&logits)?[0];
        sum += foreground_dice(pred, require_mask(s)?, classes)?;
    }
    Ok(sum / val.len() as f64)
}

/// Train a fresh 1x1 head on the frozen features of `net`. Zero epochs is
/// allowed and evaluates the initial head.
pub fn linear_probe(
    net: &Network,
    labeled: &[Sample],
    val: &[Sample],
    cfg: &SGDConfig,
    seed: u64,
) -> Result<ProbeResult> {
    cfg.validate_schedule()?;
    check_sets(labeled, val)?;
    let template = net.head();
    let geom = template.geom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = LayerWeights::new(
        template.name.clone(),
        LayerKind::Conv,
        init_weights(&geom.conv_weight_shape(), &mut rng),
        geom,
    )?;
    let classes = net.spec().classes;
    let train_feats: Vec<Tensor> = labeled
        .iter()
        .map(|s| net.features(&s.image))
        .collect::<Result<_>>()?;
    let val_feats: Vec<Tensor> = val
        .iter()
        .map(|s| net.features(&s.image))
        .collect::<Result<_>>()?;
    let mut momentum = Momentum::new(std::iter::once(head.weights.len()));
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (head_dice(&head, &val_feats, val, classes)?, head.clone());
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let feats =
                Tensor::stack(&chunk.iter().map(|&i| train_feats[i].clone()).collect::<Vec<_>>())?;
            let labels: Vec<u8> = chunk
                .iter()
                .map(|&i| require_mask(&labeled[i]).map(|m| m.labels.clone()))
                .collect::<Result<Vec<_>>>()?
                .concat();
            let logits = conv2d_forward(&feats, &head.weights, &geom)?;
            let (loss, dlogits) = softmax_ce_loss(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    layer: "loss".into(),
                    epoch: Some(epoch),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            let g = conv_weight_grad(&feats, &dlogits, &geom)?;
            momentum.step(std::iter::once((0, &mut head.weights, &g)), lr, cfg.momentum);
        }
        if !head.weights.is_finite() {
            return Err(Error::NonFinite {
                layer: head.name.clone(),
                epoch: Some(epoch),
            });
        }
        let val_dc = head_dice(&head, &val_feats, val, classes)?;
        history.push(HistoryRow {
            epoch,
            lr,
            train_loss: loss_sum / labeled.len() as f64,
            val_dc,
        });
        if epoch == 0 || val_dc > best.0 {
            best = (val_dc, head.clone());
        }
    }
    Ok(ProbeResult {
        head: best.1,
        val_dc: best.0,
        history,
    })
}
