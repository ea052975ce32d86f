//! Datasets: image loading, label-regime splits, synthetic generators and
//! training augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageReader, Luma, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Per-pixel class labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err(format!(
                "mask has {} labels, {height}x{width} needs {}",
                labels.len(),
                height * width
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn foreground(&self) -> usize {
        self.labels.iter().filter(|&&v| v != 0).count()
    }
}

/// One image `[1, C, H, W]` with an optional mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Option<Mask>,
}

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "pgm", "pnm"];

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.display().to_string(),
        source,
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| image_err(path, e))
}

fn image_tensor(img: image::DynamicImage, channels: usize, h: usize, w: usize) -> Result<Tensor> {
    let scale = |v: u8| v as f32 / 255.0;
    let data: Vec<f32> = match channels {
        1 => {
            let g = img.to_luma8();
            let g = if g.dimensions() == (w as u32, h as u32) {
                g
            } else {
                imageops::resize(&g, w as u32, h as u32, FilterType::Triangle)
            };
            g.into_raw().into_iter().map(scale).collect()
        }
        3 => {
            let c = img.to_rgb8();
            let c: RgbImage = if c.dimensions() == (w as u32, h as u32) {
                c
            } else {
                imageops::resize(&c, w as u32, h as u32, FilterType::Triangle)
            };
            let raw = c.into_raw();
            (0..3)
                .flat_map(|ch| raw.iter().skip(ch).step_by(3).map(|&v| scale(v)).collect::<Vec<_>>())
                .collect()
        }
        other => return Err(Error::Config(format!("unsupported channel count {other}"))),
    };
    Tensor::new(vec![1, channels, h, w], data)
}

fn mask_from(img: image::DynamicImage, h: usize, w: usize) -> Result<Mask> {
    let g = img.to_luma8();
    let g: GrayImage = if g.dimensions() == (w as u32, h as u32) {
        g
    } else {
        imageops::resize(&g, w as u32, h as u32, FilterType::Nearest)
    };
    Mask::new(h, w, g.into_raw().into_iter().map(|v| (v != 0) as u8).collect())
}

/// A mask file at its native size; non-zero pixels are foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let img = open(path.as_ref())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    mask_from(img, h, w)
}

/// Write `mask` as an 8-bit image, foreground 255.
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if mask.labels[y as usize * mask.width + x as usize] != 0 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Load every image in `dir` (sorted by file name), resized to `size`
/// (height, width). A file `<stem>_mask.<ext>` next to `<stem>.<ext>` is its
/// mask; non-zero mask pixels are foreground. Images without a mask are
/// returned unlabelled.
pub fn load_images(dir: impl AsRef<Path>, size: (usize, usize), channels: usize) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut masks: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else { continue };
        if !IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        match stem.strip_suffix("_mask") {
            Some(base) => masks.insert(base.to_string(), path),
            None => images.insert(stem, path),
        };
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no images found in {}", dir.display())));
    }
    if let Some(orphan) = masks.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::Data(format!("mask `{orphan}_mask` has no matching image")));
    }
    let (h, w) = size;
    images
        .into_iter()
        .map(|(id, path)| {
            let img = open(&path)?;
            let mask = match masks.get(&id) {
                Some(mpath) => {
                    let m = open(mpath)?;
                    if (m.width(), m.height()) != (img.width(), img.height()) {
                        return Err(shape_err(format!(
                            "mask for `{id}` is {}x{}, image is {}x{}",
                            m.height(),
                            m.width(),
                            img.height(),
                            img.width()
                        )));
                    }
                    Some(mask_from(m, h, w)?)
                }
                None => None,
            };
            Ok(Sample {
                id,
                image: image_tensor(img, channels, h, w)?,
                mask,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    /// Percentage of the labelled pool used for supervision, in (0, 100].
    pub r: f64,
    pub seed: u64,
}

/// Indices into the labelled pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

pub fn regime_size(pool: usize, r: f64) -> usize {
    ((r / 100.0 * pool as f64).floor() as usize).clamp(1, pool)
}

/// Seeded shuffle, then the first `max(1, floor(r/100 * n))` items are labelled.
pub fn split_regime(pool: usize, spec: &RegimeSpec) -> Result<RegimeSplit> {
    if !(spec.r > 0.0 && spec.r <= 100.0) {
        return Err(Error::Config(format!("regime r must be in (0, 100], got {}", spec.r)));
    }
    if pool == 0 {
        return Err(Error::Data("the labelled pool is empty".into()));
    }
    let mut order: Vec<usize> = (0..pool).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n = regime_size(pool, spec.r);
    let unlabeled = order.split_off(n);
    Ok(RegimeSplit {
        labeled: order,
        unlabeled,
    })
}

/// Seeded split into training and validation indices; at least one of each
/// when `n >= 2`.
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if n < 2 {
        0
    } else {
        ((val_fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let val = order.split_off(n - n_val);
    (order, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// `k` isotropic clusters on a circle; `separation` is the distance between
    /// neighbouring centroids.
    GaussianClusters {
        k: usize,
        dim: usize,
        separation: f64,
        sigma: f64,
    },
    /// Zero-mean data whose covariance has eigenvalues `spectrum` along a
    /// random orthonormal basis.
    CovarianceData { dim: usize, spectrum: Vec<f64> },
    /// Bright elliptical blobs on a darker background.
    BlobSegmentation {
        size: usize,
        min_blobs: usize,
        max_blobs: usize,
        contrast: f64,
        noise: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub samples: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn blobs(samples: usize, size: usize, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::BlobSegmentation {
                size,
                min_blobs: 1,
                max_blobs: 3,
                contrast: 0.15,
                noise: 0.3,
            },
            samples,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.samples == 0 {
            return bad("sample count must be >= 1");
        }
        match &self.kind {
            SyntheticKind::GaussianClusters { k, dim, separation, sigma } => {
                if *k == 0 || *dim == 0 {
                    return bad("clusters need k >= 1 and dim >= 1");
                }
                if *k > 2 && *dim < 2 {
                    return bad("more than two clusters need dim >= 2");
                }
                if !(*separation >= 0.0 && *sigma > 0.0) {
                    return bad("clusters need separation >= 0 and sigma > 0");
                }
            }
            SyntheticKind::CovarianceData { dim, spectrum } => {
                if *dim == 0 || spectrum.len() != *dim {
                    return bad("the spectrum must have exactly `dim` entries");
                }
                if spectrum.iter().any(|&l| !(l >= 0.0)) {
                    return bad("eigenvalues must be >= 0");
                }
            }
            SyntheticKind::BlobSegmentation { size, min_blobs, max_blobs, contrast, noise } => {
                if *size < 4 || *min_blobs == 0 || min_blobs > max_blobs {
                    return bad("blobs need size >= 4 and 1 <= min_blobs <= max_blobs");
                }
                if !(*contrast > 0.0 && *noise >= 0.0) {
                    return bad("blobs need contrast > 0 and noise >= 0");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticData {
    Clusters {
        samples: Tensor,
        centroids: Tensor,
        assignments: Vec<usize>,
    },
    Covariance {
        samples: Tensor,
        /// Descending.
        eigenvalues: Vec<f64>,
        /// One unit eigenvector per row, matching `eigenvalues`.
        eigenvectors: Tensor,
    },
    Blobs { samples: Vec<Sample> },
}

pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.samples;
    Ok(match &spec.kind {
        &SyntheticKind::GaussianClusters { k, dim, separation, sigma } => {
            let radius = if k < 2 {
                0.0
            } else {
                separation / (2.0 * (std::f64::consts::PI / k as f64).sin())
            };
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mut centroids = vec![0.0f32; k * dim];
            for c in 0..k {
                let a = phase + std::f64::consts::TAU * c as f64 / k as f64;
                centroids[c * dim] = (radius * a.cos()) as f32;
                if dim > 1 {
                    centroids[c * dim + 1] = (radius * a.sin()) as f32;
                }
            }
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            let mut samples = Vec::with_capacity(n * dim);
            let mut assignments = Vec::with_capacity(n);
            for _ in 0..n {
                let c = rng.random_range(0..k);
                assignments.push(c);
                for d in 0..dim {
                    samples.push(centroids[c * dim + d] + noise.sample(&mut rng) as f32);
                }
            }
            SyntheticData::Clusters {
                samples: Tensor::new(vec![n, dim], samples)?,
                centroids: Tensor::new(vec![k, dim], centroids)?,
                assignments,
            }
        }
        SyntheticKind::CovarianceData { dim, spectrum } => {
            let dim = *dim;
            let basis = random_orthonormal(dim, &mut rng);
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| spectrum[b].total_cmp(&spectrum[a]));
            let mut samples = vec![0.0f64; n * dim];
            for row in samples.chunks_exact_mut(dim) {
                for (i, b) in basis.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let a = spectrum[i].sqrt() * z;
                    for (x, e) in row.iter_mut().zip(b) {
                        *x += a * e;
                    }
                }
            }
            for d in 0..dim {
                let mean = samples.iter().skip(d).step_by(dim).sum::<f64>() / n as f64;
                for v in samples.iter_mut().skip(d).step_by(dim) {
                    *v -= mean;
                }
            }
            SyntheticData::Covariance {
                samples: Tensor::new(vec![n, dim], samples.into_iter().map(|v| v as f32).collect())?,
                eigenvalues: order.iter().map(|&i| spectrum[i]).collect(),
                eigenvectors: Tensor::new(
                    vec![dim, dim],
                    order.iter().flat_map(|&i| basis[i].iter().map(|&v| v as f32)).collect(),
                )?,
            }
        }
        &SyntheticKind::BlobSegmentation { size, min_blobs, max_blobs, contrast, noise } => {
            let samples = (0..n)
                .map(|i| blob_image(&mut rng, i, size, min_blobs, max_blobs, contrast, noise))
                .collect::<Result<_>>()?;
            SyntheticData::Blobs { samples }
        }
    })
}

/// Gram-Schmidt on a Gaussian matrix.
fn random_orthonormal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn blob_image<R: Rng + ?Sized>(
    rng: &mut R,
    index: usize,
    size: usize,
    min_blobs: usize,
    max_blobs: usize,
    contrast: f64,
    noise: f64,
) -> Result<Sample> {
    let s = size as f64;
    let background = 0.5 - contrast / 2.0;
    let mut labels = vec![0u8; size * size];
    let count = rng.random_range(min_blobs..=max_blobs);
    for _ in 0..count {
        let cy = rng.random_range(0.2 * s..0.8 * s);
        let cx = rng.random_range(0.2 * s..0.8 * s);
        let ry = rng.random_range(0.08 * s..0.2 * s);
        let rx = rng.random_range(0.08 * s..0.2 * s);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (st, ct) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let (u, v) = (dx * ct + dy * st, -dx * st + dy * ct);
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    labels[y * size + x] = 1;
                }
            }
        }
    }
    // At least one pixel of each class.
    labels[0] = 0;
    if !labels.contains(&1) {
        labels[(size / 2) * size + size / 2] = 1;
    }
    let data = labels
        .iter()
        .map(|&l| {
            let z: f64 = StandardNormal.sample(rng);
            let v = background + contrast * l as f64 + noise * z;
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(Sample {
        id: format!("img{index:04}"),
        image: Tensor::new(vec![1, 1, size, size], data)?,
        mask: Some(Mask::new(size, size, labels)?),
    })
}

/// Flips and a rotation by `quarter_turns * 90` degrees (counter-clockwise).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
}

fn transform_plane<T: Copy>(src: &[T], h: usize, w: usize, t: Transform) -> (Vec<T>, usize, usize) {
    let mut cur = src.to_vec();
    if t.flip_h {
        for row in cur.chunks_exact_mut(w) {
            row.reverse();
        }
    }
    if t.flip_v {
        let flipped: Vec<T> = cur.chunks_exact(w).rev().flatten().copied().collect();
        cur = flipped;
    }
    let (mut h, mut w) = (h, w);
    for _ in 0..t.quarter_turns % 4 {
        // out[y'][x'] with y' = w-1-x, x' = y.
        let mut out = Vec::with_capacity(cur.len());
        for yp in 0..w {
            for xp in 0..h {
                out.push(cur[xp * w + (w - 1 - yp)]);
            }
        }
        cur = out;
        std::mem::swap(&mut h, &mut w);
    }
    (cur, h, w)
}

pub fn apply_transform(image: &Tensor, mask: &Mask, t: Transform) -> Result<(Tensor, Mask)> {
    let [n, c, h, w] = image.dims4()?;
    if (mask.height, mask.width) != (h, w) {
        return Err(shape_err(format!(
            "mask {}x{} does not match image {h}x{w}",
            mask.height, mask.width
        )));
    }
    let mut data = Vec::with_capacity(image.len());
    let (mut oh, mut ow) = (h, w);
    for plane in image.data().chunks_exact(h * w) {
        let (p, ph, pw) = transform_plane(plane, h, w, t);
        data.extend(p);
        (oh, ow) = (ph, pw);
    }
    let (labels, mh, mw) = transform_plane(&mask.labels, h, w, t);
    Ok((Tensor::new(vec![n, c, oh, ow], data)?, Mask::new(mh, mw, labels)?))
}

/// Independent 50% horizontal and vertical flips and a uniformly chosen
/// multiple of 90 degrees (only 0 or 180 for non-square images).
pub fn augment(image: &Tensor, mask: &Mask, seed: u64) -> Result<(Tensor, Mask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let square = mask.height == mask.width;
    let t = Transform {
        flip_h: rng.random_bool(0.5),
        flip_v: rng.random_bool(0.5),
        quarter_turns: if square {
            rng.random_range(0..4)
        } else {
            2 * rng.random_range(0..2)
        },
    };
    apply_transform(image, mask, t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: Option<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write single-channel samples as 8-bit PNGs plus `manifest.json`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample], splits: &[Split]) -> Result<Manifest> {
    let dir = dir.as_ref();
    if samples.len() != splits.len() {
        return Err(shape_err("one split label per sample is required"));
    }
    let first = samples.first().ok_or_else(|| Error::Data("no samples to write".into()))?;
    let [_, c, h, w] = first.image.dims4()?;
    if c != 1 {
        return Err(Error::Config("only single-channel datasets can be written".into()));
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (s, &split) in samples.iter().zip(splits) {
        if s.image.shape() != [1, 1, h, w] {
            return Err(shape_err(format!("sample `{}` differs in shape", s.id)));
        }
        let image_name = format!("{}.png", s.id);
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([to_u8(s.image.data()[y as usize * w + x as usize])])
        });
        let path = dir.join(&image_name);
        img.save(&path).map_err(|e| image_err(&path, e))?;
        let mask_name = match &s.mask {
            Some(m) => {
                let name = format!("{}_mask.png", s.id);
                save_mask(m, dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image: image_name,
            mask: mask_name,
            split,
        });
    }
    let manifest = Manifest {
        height: h,
        width: w,
        channels: 1,
        entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Samples of a dataset directory, split into training and validation
/// sets. Uses `manifest.json` when present; otherwise every image in the
/// directory at `size`, with a seeded 80/20 split.
pub fn load_dataset(
    dir: impl AsRef<Path>,
    size: Option<(usize, usize)>,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let (h, w) = size.unwrap_or((manifest.height, manifest.width));
        let mut train = Vec::new();
        let mut val = Vec::new();
        for e in &manifest.entries {
            let img = image_tensor(open(&dir.join(&e.image))?, manifest.channels, h, w)?;
            let mask = match &e.mask {
                Some(m) => Some(mask_from(open(&dir.join(m))?, h, w)?),
                None => None,
            };
            let s = Sample {
                id: e.id.clone(),
                image: img,
                mask,
            };
            match e.split {
                Split::Train => train.push(s),
                Split::Val => val.push(s),
            }
        }
        if train.is_empty() {
            return Err(Error::Data("manifest has no training images".into()));
        }
        return Ok((train, val));
    }
    let size = size.ok_or_else(|| {
        Error::Config("an image size is required for directories without a manifest".into())
    })?;
    let all = load_images(dir, size, 1)?;
    let (tr, va) = train_val_split(all.len(), 0.2, seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| all[i].clone()).collect::<Vec<_>>();
    Ok((pick(&tr), pick(&va)))
}
