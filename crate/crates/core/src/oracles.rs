//! Convergence oracles for dense Hebbian layers: SWTA neurons settle on
//! cluster centroids and HPCA neurons on the leading covariance
//! eigenvectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{gen_synthetic, SyntheticData, SyntheticKind, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::rules::{init_weights, train_dense, DenseTraining, HebbianConfig, StepDecay};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HpcaOracle {
    pub neurons: usize,
    pub dim: usize,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f32,
    pub min_abs_cos: f64,
}

impl Default for HpcaOracle {
    fn default() -> Self {
        Self {
            neurons: 3,
            dim: 8,
            samples: 10_000,
            epochs: 200,
            batch_size: 100,
            eta: 0.01,
            min_abs_cos: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HpcaOutcome {
    pub seed: u64,
    /// `|cos|` between neuron `j` and eigenvector `j`.
    pub abs_cos: Vec<f64>,
    pub passed: bool,
}

/// Halving spectrum `8, 4, 2, 1, ...` of length `dim`.
pub fn halving_spectrum(dim: usize) -> Vec<f64> {
    (0..dim).map(|i| 8.0 * 0.5f64.powi(i as i32)).collect()
}

fn abs_cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).abs()
}

impl HpcaOracle {
    /// Covariance data with the halving spectrum for `seed`.
    pub fn data(&self, seed: u64) -> Result<(Tensor, Tensor)> {
        let spec = SyntheticTaskSpec {
            kind: SyntheticKind::CovarianceData {
                dim: self.dim,
                spectrum: halving_spectrum(self.dim),
            },
            samples: self.samples,
            seed,
        };
        match gen_synthetic(&spec)? {
            SyntheticData::Covariance { samples, eigenvectors, .. } => Ok((samples, eigenvectors)),
            _ => Err(Error::Data("covariance generator returned another kind".into())),
        }
    }

    /// Trained weights `[neurons, dim]` on `samples`.
    pub fn train(&self, samples: &Tensor, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut w = init_weights(&[self.neurons, self.dim], &mut rng);
        let plan = DenseTraining {
            epochs: self.epochs,
            batch_size: self.batch_size,
            decay: Some(StepDecay {
                every: (self.epochs / 4).max(1),
                factor: 0.5,
            }),
        };
        train_dense(samples, &mut w, &HebbianConfig::hpca(self.eta), &plan, &mut rng)?;
        Ok(w)
    }

    /// Compare each trained row with the matching row of `eigenvectors`.
    pub fn score(&self, seed: u64, weights: &Tensor, eigenvectors: &Tensor) -> HpcaOutcome {
        let d = self.dim;
        let abs_cos: Vec<f64> = (0..self.neurons)
            .map(|j| {
                abs_cos(
                    &weights.data()[j * d..(j + 1) * d],
                    &eigenvectors.data()[j * d..(j + 1) * d],
                )
            })
            .collect();
        let passed = abs_cos.iter().all(|&c| c >= self.min_abs_cos);
        HpcaOutcome { seed, abs_cos, passed }
    }

    pub fn run(&self, seed: u64) -> Result<HpcaOutcome> {
        let (samples, eigenvectors) = self.data(seed)?;
        let w = self.train(&samples, seed)?;
        Ok(self.score(seed, &w, &eigenvectors))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwtaOracle {
    pub clusters: usize,
    pub dim: usize,
    pub sigma: f64,
    /// Distance between neighbouring centroids, in units of `sigma`.
    pub separation: f64,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f32,
    /// Temperature as a fraction of the mean squared sample norm.
    pub temperature_fraction: f64,
    /// Largest matched centroid error, in units of `sigma`.
    pub max_error: f64,
}

impl Default for SwtaOracle {
    fn default() -> Self {
        Self {
            clusters: 3,
            dim: 2,
            sigma: 1.0,
            separation: 10.0,
            samples: 3000,
            epochs: 30,
            batch_size: 10,
            eta: 0.1,
            temperature_fraction: 0.05,
            max_error: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwtaOutcome {
    pub seed: u64,
    /// Distance of each centroid to its matched neuron, in units of `sigma`.
    pub errors: Vec<f64>,
    pub temperature: f64,
    pub passed: bool,
}

/// Assignment of rows to columns minimising the summed cost, by exhaustive
/// search over permutations (`n <= 8`).
pub fn min_cost_matching(cost: &[Vec<f64>]) -> Vec<usize> {
    fn search(row: usize, cost: &[Vec<f64>], used: &mut [bool], cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>), acc: f64) {
        if acc >= best.0 {
            return;
        }
        if row == cost.len() {
            *best = (acc, cur.clone());
            return;
        }
        for col in 0..used.len() {
            if !used[col] {
                used[col] = true;
                cur.push(col);
                search(row + 1, cost, used, cur, best, acc + cost[row][col]);
                cur.pop();
                used[col] = false;
            }
        }
    }
    let cols = cost.first().map_or(0, Vec::len);
    let mut best = (f64::INFINITY, Vec::new());
    search(0, cost, &mut vec![false; cols], &mut Vec::new(), &mut best, 0.0);
    best.1
}

impl SwtaOracle {
    pub fn run(&self, seed: u64) -> Result<SwtaOutcome> {
        let spec = SyntheticTaskSpec {
            kind: SyntheticKind::GaussianClusters {
                k: self.clusters,
                dim: self.dim,
                separation: self.separation * self.sigma,
                sigma: self.sigma,
            },
            samples: self.samples,
            seed,
        };
        let SyntheticData::Clusters { samples, centroids, .. } = gen_synthetic(&spec)? else {
            return Err(Error::Data("cluster generator returned another kind".into()));
        };
        let scale = samples.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / self.samples as f64;
        let temperature = self.temperature_fraction * scale;
        let cfg = HebbianConfig::swta(self.eta, temperature as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut w = init_weights(&[self.clusters, self.dim], &mut rng);
        let plan = DenseTraining {
            epochs: self.epochs,
            batch_size: self.batch_size,
            decay: Some(StepDecay {
                every: (self.epochs / 3).max(1),
                factor: 0.3,
            }),
        };
        train_dense(&samples, &mut w, &cfg, &plan, &mut rng)?;
        let d = self.dim;
        let dist = |c: usize, j: usize| {
            let a = &centroids.data()[c * d..(c + 1) * d];
            let b = &w.data()[j * d..(j + 1) * d];
            a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
        };
        let cost: Vec<Vec<f64>> = (0..self.clusters)
            .map(|c| (0..self.clusters).map(|j| dist(c, j)).collect())
            .collect();
        let matching = min_cost_matching(&cost);
        let errors: Vec<f64> = matching.iter().enumerate().map(|(c, &j)| cost[c][j] / self.sigma).collect();
        let passed = errors.iter().all(|&e| e <= self.max_error);
        Ok(SwtaOutcome {
            seed,
            errors,
            temperature,
            passed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_finds_the_cheapest_permutation() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        assert_eq!(min_cost_matching(&cost), vec![1, 0, 2]);
    }

    #[test]
    fn halving_spectrum_starts_at_eight() {
        assert_eq!(halving_spectrum(4), vec![8.0, 4.0, 2.0, 1.0]);
    }

    #[test]
    fn cosine_ignores_sign() {
        assert!((abs_cos(&[1.0, 0.0], &[-2.0, 0.0]) - 1.0).abs() < 1e-12);
    }
}
