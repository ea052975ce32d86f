//! Dense f32 tensors and the numerical kernels shared by every layer:
//! cross-correlation, transpose convolution, unfold/fold and the
//! temperature softmax.
//!
//! Feature maps are NCHW. Convolution weights are `[Cout, Cin, kh, kw]`,
//! transpose-convolution weights are `[Cin, Cout, kh, kw]`. Reductions are
//! carried out in f64 in a fixed order and cast back to f32, so every
//! kernel is deterministic.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(format!("every dimension must be >= 1, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics if any dimension is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "zero-sized tensor {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// I.i.d. zero-mean Gaussian entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std.max(0.0)).expect("std is finite");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            s => Err(shape_err(format!("expected a 4-D NCHW tensor, got shape {s:?}"))),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[r, c] => Ok([r, c]),
            s => Err(shape_err(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                layer: what.to_string(),
                epoch: None,
            })
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(dot_f64(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot_f64(&self.data, &self.data).sqrt()
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.check_same_shape(other, "compare")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Slice out item `n` of the leading (batch) axis, keeping a batch of one.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        let lead = self.shape[0];
        if n >= lead {
            return Err(shape_err(format!("batch index {n} out of range {lead}")));
        }
        let stride = self.data.len() / lead;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(shape, self.data[n * stride..(n + 1) * stride].to_vec())
    }

    /// Concatenate along the leading (batch) axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| shape_err("cannot stack an empty list"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut lead = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(shape_err(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Tensor::new(shape, data)
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Geometry of a 2-D (transpose) convolution. Padding is symmetric zero-fill.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Geometry("channel counts must be >= 1".into()));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Geometry("kernel size must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Geometry("stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial size of a convolution output; errors if no patch fits.
    pub fn conv_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if self.kernel_h > ph || self.kernel_w > pw {
            return Err(Error::Geometry(format!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Spatial size of a transpose-convolution output.
    pub fn tconv_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let full_h = (h - 1) * self.stride + self.kernel_h;
        let full_w = (w - 1) * self.stride + self.kernel_w;
        if full_h <= 2 * self.padding || full_w <= 2 * self.padding {
            return Err(Error::Geometry(format!(
                "padding {} leaves no output for a {h}x{w} input",
                self.padding
            )));
        }
        Ok((full_h - 2 * self.padding, full_w - 2 * self.padding))
    }

    pub fn conv_weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn tconv_weight_shape(&self) -> [usize; 4] {
        [self.in_channels, self.out_channels, self.kernel_h, self.kernel_w]
    }

    /// The same kernel/stride/padding with the channel roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            ..*self
        }
    }

    /// Input pixel read by kernel tap `k` at output offset `o`, if inside the image.
    #[inline]
    pub(crate) fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Dot product with f64 accumulation in four fixed lanes.
#[inline]
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] as f64 * y[0] as f64;
        acc[1] += x[1] as f64 * y[1] as f64;
        acc[2] += x[2] as f64 * y[2] as f64;
        acc[3] += x[3] as f64 * y[3] as f64;
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[i, j] = sum_k a[i, k] * b[j, k]` for row-major `a: [m, k]`, `b: [n, k]`.
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f64; m * n];
    if k == 0 {
        return out;
    }
    for (row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (col, o) in b.chunks_exact(k).zip(out_row.iter_mut()) {
            *o = dot_f64(row, col);
        }
    }
    out
}

/// `a · bᵀ` for `a: [M, K]`, `b: [N, K]`, accumulated in f64 exactly as the
/// convolution kernels do.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2()?;
    let [n, kb] = b.dims2()?;
    if k != kb {
        return Err(shape_err(format!("matmul inner dimensions differ: {k} vs {kb}")));
    }
    Tensor::new(vec![m, n], to_f32(matmul_nt(a.data(), b.data(), m, n, k)))
}

pub(crate) fn transpose(data: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

pub(crate) fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// Unfold one `[C, H, W]` image into `[P, C*kh*kw]` rows (channel-major, then row-major).
pub(crate) fn unfold_image(
    img: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let row_len = channels * kh * kw;
    let mut out = vec![0.0f32; oh * ow * row_len];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * row_len..][..row_len];
            for u in 0..kh {
                let Some(iy) = geom.source(oy, u, h) else { continue };
                for v in 0..kw {
                    let Some(ix) = geom.source(ox, v, w) else { continue };
                    for c in 0..channels {
                        row[(c * kh + u) * kw + v] = img[(c * h + iy) * w + ix];
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add `[P, C*kh*kw]` rows back onto a `[C, H, W]` canvas (adjoint of unfold).
pub(crate) fn fold_image(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let row_len = channels * kh * kw;
    let mut out = vec![0.0f64; channels * h * w];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * row_len..][..row_len];
            for u in 0..kh {
                let Some(iy) = geom.source(oy, u, h) else { continue };
                for v in 0..kw {
                    let Some(ix) = geom.source(ox, v, w) else { continue };
                    for c in 0..channels {
                        out[(c * h + iy) * w + ix] += row[(c * kh + u) * kw + v];
                    }
                }
            }
        }
    }
    out
}

/// Extract sliding patches: `[N, C, H, W]` -> `[N, P, C*kh*kw]`, `P = H' * W'`.
pub fn unfold(input: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let (oh, ow) = geom.conv_output_hw(h, w)?;
    let row_len = c * geom.kernel_h * geom.kernel_w;
    let mut data = Vec::with_capacity(n * oh * ow * row_len);
    for img in input.data().chunks_exact(c * h * w) {
        data.extend(unfold_image(img, c, h, w, geom, oh, ow));
    }
    Tensor::new(vec![n, oh * ow, row_len], data)
}

fn check_weights(weights: &Tensor, expected: [usize; 4], what: &str) -> Result<()> {
    if weights.shape() != expected {
        return Err(shape_err(format!(
            "{what} weights have shape {:?}, geometry requires {expected:?}",
            weights.shape()
        )));
    }
    Ok(())
}

fn check_channels(got: usize, expected: usize, what: &str) -> Result<()> {
    if got != expected {
        return Err(shape_err(format!(
            "{what}: input has {got} channels, geometry expects in_channels = {expected}"
        )));
    }
    Ok(())
}

/// Cross-correlation without bias: `[N, Cin, H, W] * [Cout, Cin, kh, kw] -> [N, Cout, H', W']`.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    check_channels(c, geom.in_channels, "conv2d")?;
    check_weights(weights, geom.conv_weight_shape(), "conv2d")?;
    let (oh, ow) = geom.conv_output_hw(h, w)?;
    let (p, d, cout) = (oh * ow, c * geom.kernel_h * geom.kernel_w, geom.out_channels);
    let mut data = Vec::with_capacity(n * cout * p);
    for img in input.data().chunks_exact(c * h * w) {
        let cols = unfold_image(img, c, h, w, geom, oh, ow);
        data.extend(to_f32(matmul_nt(weights.data(), &cols, cout, p, d)));
    }
    Tensor::new(vec![n, cout, oh, ow], data)
}

/// Transpose (fractionally-strided) convolution:
/// `[N, Cin, h, w] * [Cin, Cout, kh, kw] -> [N, Cout, H, W]`, `H = (h-1)*s - 2p + kh`.
/// This is the adjoint of [`conv2d_forward`] with the same geometry.
pub fn tconv2d_forward(input: &Tensor, weights: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let [_, _, h, w] = input.dims4()?;
    let (oh, ow) = geom.tconv_output_hw(h, w)?;
    tconv2d_forward_to(input, weights, geom, oh, ow)
}

/// Transpose convolution onto an explicit output canvas. Output pixels not
/// reached by any kernel tap stay zero.
pub(crate) fn tconv2d_forward_to(
    input: &Tensor,
    weights: &Tensor,
    geom: &ConvGeometry,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    check_channels(c, geom.in_channels, "tconv2d")?;
    check_weights(weights, geom.tconv_weight_shape(), "tconv2d")?;
    let row_len = geom.out_channels * geom.kernel_h * geom.kernel_w;
    // The output canvas, viewed as a conv input, must produce exactly h x w patches.
    let fwd = ConvGeometry {
        in_channels: geom.out_channels,
        out_channels: geom.in_channels,
        ..*geom
    };
    if fwd.conv_output_hw(out_h, out_w)? != (h, w) {
        return Err(shape_err(format!(
            "tconv2d: output canvas {out_h}x{out_w} is not consistent with a {h}x{w} input"
        )));
    }
    let wt = transpose(weights.data(), c, row_len);
    let mut data = Vec::with_capacity(n * geom.out_channels * out_h * out_w);
    for img in input.data().chunks_exact(c * h * w) {
        let xt = transpose(img, c, h * w);
        let cols = matmul_nt(&xt, &wt, h * w, row_len, c);
        let canvas = fold_image(&cols, geom.out_channels, out_h, out_w, geom, h, w);
        data.extend(to_f32(canvas));
    }
    Tensor::new(vec![n, geom.out_channels, out_h, out_w], data)
}

/// Temperature softmax of one vector, with max-subtraction.
pub fn softmax_t(v: &[f32], t: f32) -> Result<Vec<f32>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Config(format!("softmax temperature must be > 0, got {t}")));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, t, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(v: &[f32], t: f32, out: &mut [f32]) {
    let inv_t = 1.0 / t as f64;
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut total = 0.0f64;
    let exps: Vec<f64> = v
        .iter()
        .map(|&x| {
            let e = ((x as f64 - max) * inv_t).exp();
            total += e;
            e
        })
        .collect();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = (e / total) as f32;
    }
}

/// Softmax over axis 1 of a `[N, K, ...]` tensor, independently at every
/// other index.
pub fn softmax_channels(x: &Tensor, t: f32) -> Result<Tensor> {
    softmax_t(&[0.0], t)?;
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(shape_err(format!("softmax over channels needs rank >= 2, got {shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut out = Tensor::zeros(shape);
    let mut buf = vec![0.0f32; k];
    let mut res = vec![0.0f32; k];
    for b in 0..n {
        let base = b * k * inner;
        for s in 0..inner {
            for j in 0..k {
                buf[j] = x.data()[base + j * inner + s];
            }
            softmax_into(&buf, t, &mut res);
            for j in 0..k {
                out.data_mut()[base + j * inner + s] = res[j];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Nested-loop cross-correlation, independent of unfold/matmul.
    fn conv_reference(x: &Tensor, wt: &Tensor, g: &ConvGeometry) -> Tensor {
        let [n, cin, h, w] = x.dims4().unwrap();
        let (oh, ow) = g.conv_output_hw(h, w).unwrap();
        let mut out = Tensor::zeros(&[n, g.out_channels, oh, ow]);
        for b in 0..n {
            for o in 0..g.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for c in 0..cin {
                            for u in 0..g.kernel_h {
                                for v in 0..g.kernel_w {
                                    let iy = (oy * g.stride + u) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + v) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * cin + c) * h + iy as usize) * w + ix as usize];
                                    let wv = wt.data()[((o * cin + c) * g.kernel_h + u) * g.kernel_w + v];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out.data_mut()[((b * g.out_channels + o) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    /// Scatter-add transpose convolution, independent of fold/matmul.
    fn tconv_reference(x: &Tensor, wt: &Tensor, g: &ConvGeometry) -> Tensor {
        let [n, cin, h, w] = x.dims4().unwrap();
        let (oh, ow) = g.tconv_output_hw(h, w).unwrap();
        let cout = g.out_channels;
        let mut acc = vec![0.0f64; n * cout * oh * ow];
        for b in 0..n {
            for c in 0..cin {
                for a in 0..h {
                    for bb in 0..w {
                        let xv = x.data()[((b * cin + c) * h + a) * w + bb] as f64;
                        for j in 0..cout {
                            for u in 0..g.kernel_h {
                                for v in 0..g.kernel_w {
                                    let oy = (a * g.stride + u) as isize - g.padding as isize;
                                    let ox = (bb * g.stride + v) as isize - g.padding as isize;
                                    if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                        continue;
                                    }
                                    let wv = wt.data()[((c * cout + j) * g.kernel_h + u) * g.kernel_w + v];
                                    acc[((b * cout + j) * oh + oy as usize) * ow + ox as usize] +=
                                        xv * wv as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, cout, oh, ow], to_f32(acc)).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let g = ConvGeometry::new(1, 1, 3, 1, 0);
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, &g).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let g = ConvGeometry::new(1, 1, 3, 1, 1);
        let x = Tensor::randn(&[2, 1, 6, 5], 1.0, &mut rng(1));
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d_forward(&x, &w, &g).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut r = rng(2);
        let g = ConvGeometry::new(2, 3, 3, 1, 0);
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let y = conv2d_forward(&x, &w, &g).unwrap();
        assert!(y.max_abs_diff(&conv_reference(&x, &w, &g)).unwrap() <= 1e-6);
    }

    #[test]
    fn conv_shape_errors_name_the_dimension() {
        let g = ConvGeometry::new(2, 3, 3, 1, 0);
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let err = conv2d_forward(&x, &w, &g).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let w = Tensor::zeros(&[3, 2, 2, 3]);
        let err = conv2d_forward(&x, &w, &g).unwrap_err().to_string();
        assert!(err.contains("weights"), "{err}");
    }

    #[test]
    fn tconv_single_pixel_broadcast() {
        let g = ConvGeometry::new(1, 1, 2, 2, 0);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = tconv2d_forward(&x, &w, &g).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.0; 4]);
    }

    #[test]
    fn tconv_matches_scatter_add() {
        let mut r = rng(3);
        for (k, s, p) in [(2, 2, 0), (3, 2, 1), (3, 1, 1), (4, 3, 1)] {
            let g = ConvGeometry::new(2, 3, k, s, p);
            let x = Tensor::randn(&[2, 2, 3, 4], 1.0, &mut r);
            let w = Tensor::randn(&[2, 3, k, k], 1.0, &mut r);
            let y = tconv2d_forward(&x, &w, &g).unwrap();
            assert!(y.max_abs_diff(&tconv_reference(&x, &w, &g)).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn tconv_is_adjoint_of_conv() {
        let mut r = rng(4);
        for (k, s, p) in [(3, 1, 1), (2, 2, 0), (3, 2, 1), (5, 3, 2)] {
            // conv: [Cin=2 -> Cout=3]; tconv with the same weight array maps back.
            let g = ConvGeometry::new(2, 3, k, s, p);
            let h = (7 - 1) * s + k - 2 * p;
            let x = Tensor::randn(&[1, 2, h, h], 1.0, &mut r);
            let w = Tensor::randn(&[3, 2, k, k], 1.0, &mut r);
            let cx = conv2d_forward(&x, &w, &g).unwrap();
            let y = Tensor::randn(cx.shape(), 1.0, &mut r);
            let ty = tconv2d_forward(&y, &w, &g.swapped()).unwrap();
            assert_eq!(ty.shape(), x.shape());
            let lhs = cx.dot(&y).unwrap();
            let rhs = x.dot(&ty).unwrap();
            assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()).max(1.0));
        }
    }

    #[test]
    fn unfold_whole_image_patch() {
        let g = ConvGeometry::new(1, 1, 2, 1, 0);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = unfold(&x, &g).unwrap();
        assert_eq!(u.shape(), &[1, 1, 4]);
        assert_eq!(u.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unfold_enumerates_patches_by_hand() {
        let g = ConvGeometry::new(1, 1, 2, 1, 0);
        // 3x3 identity-like image
        let x = Tensor::new(
            vec![1, 1, 3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let u = unfold(&x, &g).unwrap();
        assert_eq!(u.shape(), &[1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 0.0, 0.0, 1.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            1.0, 0.0, 0.0, 1.0,
        ];
        assert_eq!(u.data(), &expected);
    }

    #[test]
    fn unfold_rejects_oversized_kernel() {
        let g = ConvGeometry::new(1, 1, 4, 1, 0);
        assert!(unfold(&Tensor::zeros(&[1, 1, 3, 3]), &g).is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_t(&[2.0, 2.0, 2.0], 0.3).unwrap();
        for v in u {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let s = softmax_t(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s[0] as f64 - e / (e + 1.0)).abs() < 1e-4);
        assert!((s[0] - 0.7311).abs() < 1e-4 && (s[1] - 0.2689).abs() < 1e-4);
        let sharp = softmax_t(&[1.0, 0.0], 0.01).unwrap();
        assert!(sharp[0] >= 0.999);
        assert!(softmax_t(&[1.0], 0.0).is_err());
        assert!(softmax_t(&[1.0], -1.0).is_err());
    }

    #[test]
    fn softmax_channels_sums_to_one_per_location() {
        let x = Tensor::randn(&[2, 4, 3, 3], 3.0, &mut rng(5));
        let s = softmax_channels(&x, 0.7).unwrap();
        for n in 0..2 {
            for p in 0..9 {
                let total: f64 = (0..4).map(|k| s.data()[(n * 4 + k) * 9 + p] as f64).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }
}
