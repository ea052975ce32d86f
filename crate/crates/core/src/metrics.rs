//! Overlap and boundary-distance metrics for binary segmentation masks.
//!
//! Boundary pixels are foreground pixels with at least one background
//! 4-neighbour; pixels outside the image count as background. Distances
//! are in pixels. The 95th percentile uses the nearest-rank definition.

use std::path::Path;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::Mask;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(format!(
                "mask data has {} values, {height}x{width} needs {}",
                data.len(),
                height * width
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Data("binary mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    /// Foreground = pixels labelled `class`.
    pub fn of_class(mask: &Mask, class: u8) -> Self {
        Self {
            height: mask.height,
            width: mask.width,
            data: mask.labels.iter().map(|&v| (v == class) as u8).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.data[y as usize * self.width + x as usize] == 1
    }

    /// Foreground pixels with a background 4-neighbour, as `(y, x)`.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let (yi, xi) = (y as isize, x as isize);
                if self.at(yi, xi)
                    && !(self.at(yi - 1, xi)
                        && self.at(yi + 1, xi)
                        && self.at(yi, xi - 1)
                        && self.at(yi, xi + 1))
                {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(shape_err(format!(
            "masks are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    check_shapes(a, b)?;
    let inter = a.data.iter().zip(&b.data).filter(|(&x, &y)| x == 1 && y == 1).count();
    Ok((inter, a.count(), b.count()))
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    let (i, a, b) = overlap(pred, target)?;
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (a + b) as f64)
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn jaccard(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    let (i, a, b) = overlap(pred, target)?;
    let union = a + b - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

const FAR: f64 = 1e20;

/// 1-D squared distance transform of a sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
pub fn squared_edt(height: usize, width: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; height * width];
    for &(y, x) in seeds {
        grid[y * width + x] = 0.0;
    }
    let n = height.max(width);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for row in grid.chunks_exact_mut(width) {
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    grid
}

/// Pooled boundary-to-boundary distances in both directions, or `None`
/// when exactly one mask is empty.
pub fn surface_distances(pred: &BinaryMask, target: &BinaryMask) -> Result<Option<Vec<f64>>> {
    check_shapes(pred, target)?;
    let (bp, bt) = (pred.boundary(), target.boundary());
    match (bp.is_empty(), bt.is_empty()) {
        (true, true) => return Ok(Some(Vec::new())),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let (h, w) = (pred.height, pred.width);
    let to_target = squared_edt(h, w, &bt);
    let to_pred = squared_edt(h, w, &bp);
    let mut d: Vec<f64> = bp.iter().map(|&(y, x)| to_target[y * w + x].sqrt()).collect();
    d.extend(bt.iter().map(|&(y, x)| to_pred[y * w + x].sqrt()));
    Ok(Some(d))
}

/// Nearest-rank percentile of an unsorted sample (`q` in (0, 100]).
pub fn nearest_rank(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

fn diagonal(m: &BinaryMask) -> f64 {
    ((m.height * m.height + m.width * m.width) as f64).sqrt()
}

pub fn hd95(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    Ok(match surface_distances(pred, target)? {
        Some(d) => nearest_rank(&d, 95.0),
        None => diagonal(pred),
    })
}

pub fn asd(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    Ok(match surface_distances(pred, target)? {
        Some(d) if d.is_empty() => 0.0,
        Some(d) => d.iter().sum::<f64>() / d.len() as f64,
        None => diagonal(pred),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub dc: f64,
    pub ji: f64,
    pub hd95: f64,
    pub asd: f64,
    /// Distances are the image-diagonal sentinel (exactly one mask empty).
    pub sentinel: bool,
}

pub fn evaluate(pred: &BinaryMask, target: &BinaryMask) -> Result<MetricsReport> {
    let dists = surface_distances(pred, target)?;
    let (hd, sd, sentinel) = match &dists {
        Some(d) if d.is_empty() => (0.0, 0.0, false),
        Some(d) => (nearest_rank(d, 95.0), d.iter().sum::<f64>() / d.len() as f64, false),
        None => (diagonal(pred), diagonal(pred), true),
    };
    Ok(MetricsReport {
        dc: dice(pred, target)?,
        ji: jaccard(pred, target)?,
        hd95: hd,
        asd: sd,
        sentinel,
    })
}

/// Sample mean and half-width of the two-sided confidence interval based
/// on Student's t. The half-width is NaN for fewer than two values.
pub fn mean_ci(values: &[f64], level: f64) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.5 + level / 2.0);
    (mean, t * (var / n as f64).sqrt())
}

/// Per-image rows `image_id,dc,ji,hd95,asd` and a final `mean±ci90` row.
pub fn write_metrics_csv(rows: &[(String, MetricsReport)], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "dc", "ji", "hd95", "asd"])?;
    for (id, r) in rows {
        w.write_record([
            id.clone(),
            format!("{:.6}", r.dc),
            format!("{:.6}", r.ji),
            format!("{:.6}", r.hd95),
            format!("{:.6}", r.asd),
        ])?;
    }
    let column = |f: fn(&MetricsReport) -> f64| {
        let v: Vec<f64> = rows.iter().map(|(_, r)| f(r)).collect();
        let (m, hw) = mean_ci(&v, 0.90);
        format!("{m:.6}±{hw:.6}")
    };
    w.write_record([
        "mean±ci90".to_string(),
        column(|r| r.dc),
        column(|r| r.ji),
        column(|r| r.hd95),
        column(|r| r.asd),
    ])?;
    w.flush()?;
    Ok(())
}
