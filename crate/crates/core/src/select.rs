//! One-shot stimulus selection.
//!
//! Each class's pooled voxel samples are projected to one dimension, a
//! Gaussian is fitted to the coordinates, and a single representative
//! stimulus is picked by its density under that Gaussian.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ProjectionMethod, SelectionStrategy};
use crate::error::{Error, Result};
use crate::spectral::PooledVoxels;
use crate::synthgen::rng;

pub const EPS_STD: f64 = 1e-9;

const TSNE_ITERS: usize = 500;
const TSNE_EXAGGERATION_ITERS: usize = 100;
const TSNE_EXAGGERATION: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDensityModel {
    pub class_id: usize,
    pub method: ProjectionMethod,
    pub coordinates: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ClassDensityModel {
    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        (-0.5 * z * z).exp() / (self.std * (2.0 * std::f64::consts::PI).sqrt())
    }
}

fn sample_matrix(samples: &[PooledVoxels]) -> Result<DMatrix<f64>> {
    let l = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != l) {
        return Err(Error::shape("project_1d", l, bad.len()));
    }
    Ok(DMatrix::from_fn(samples.len(), l, |i, j| {
        samples[i].values[j]
    }))
}

/// Coordinates along the first principal component.
///
/// The loading vector's first non-negligible entry is made nonnegative.
fn pca_1d(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    if n < 2 || centered.iter().all(|v| v.abs() < 1e-300) {
        return vec![0.0; n];
    }
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (k, _) =
        svd.singular_values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &s)| {
                if s > best.1 {
                    (i, s)
                } else {
                    best
                }
            });
    let mut loading: Vec<f64> = v_t.row(k).iter().copied().collect();
    let scale = loading.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(first) = loading.iter().find(|v| v.abs() > 1e-9 * scale) {
        if *first < 0.0 {
            loading.iter_mut().for_each(|v| *v = -*v);
        }
    }
    (0..n)
        .map(|i| {
            centered
                .row(i)
                .iter()
                .zip(&loading)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

pub fn tsne_perplexity(n: usize) -> f64 {
    (((n as f64) - 1.0) / 3.0).clamp(1.0, 30.0)
}

/// Conditional affinities with the bandwidth of each row tuned to `perplexity`.
fn tsne_affinities(d2: &[Vec<f64>], perplexity: f64) -> Vec<Vec<f64>> {
    let n = d2.len();
    let target = perplexity.ln();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let dmin = (0..n)
            .filter(|&j| j != i)
            .map(|j| d2[i][j])
            .fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let w = (-(d2[i][j] - dmin) * beta).exp();
                p[i][j] = w;
                sum += w;
                weighted += w * (d2[i][j] - dmin);
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for j in 0..n {
                p[i][j] /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < 1e-10 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    p
}

/// Exact one-dimensional t-SNE.
fn tsne_1d(x: &DMatrix<f64>, seed: u64) -> Vec<f64> {
    let n = x.nrows();
    let mut d2 = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (x.row(i) - x.row(j)).norm_squared();
            d2[i][j] = d;
            d2[j][i] = d;
        }
    }
    let cond = tsne_affinities(&d2, tsne_perplexity(n));
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i][j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }

    let mut r = rng(seed, 0);
    let mut y: Vec<f64> = (0..n)
        .map(|_| 1e-4 * r.sample::<f64, _>(StandardNormal))
        .collect();
    let mut velocity = vec![0.0; n];
    let mut gains = vec![1.0; n];
    let mut num = vec![vec![0.0; n]; n];
    let lr = (n as f64 / TSNE_EXAGGERATION / 4.0).max(1.0);
    for it in 0..TSNE_ITERS {
        let exaggeration = if it < TSNE_EXAGGERATION_ITERS {
            TSNE_EXAGGERATION
        } else {
            1.0
        };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = y[i] - y[j];
                    num[i][j] = 1.0 / (1.0 + d * d);
                    z += num[i][j];
                }
            }
        }
        for i in 0..n {
            let mut g = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let q = (num[i][j] / z).max(1e-12);
                g += 4.0 * (exaggeration * p[i][j] - q) * num[i][j] * (y[i] - y[j]);
            }
            gains[i] = if (g > 0.0) != (velocity[i] > 0.0) {
                gains[i] + 0.2
            } else {
                (gains[i] * 0.8f64).max(0.01)
            };
            velocity[i] = momentum * velocity[i] - lr * gains[i] * g;
        }
        for i in 0..n {
            y[i] += velocity[i];
        }
        let m = y.iter().sum::<f64>() / n as f64;
        y.iter_mut().for_each(|v| *v -= m);
    }
    y
}

/// One coordinate per sample. Fewer than four samples always use PCA.
pub fn project_1d(
    samples: &[PooledVoxels],
    method: ProjectionMethod,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput(
            "project_1d needs at least one sample".into(),
        ));
    }
    let x = sample_matrix(samples)?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("project_1d input".into()));
    }
    let coords = match method {
        _ if samples.len() <= 3 => pca_1d(&x),
        ProjectionMethod::Pca => pca_1d(&x),
        ProjectionMethod::Tsne => tsne_1d(&x, seed),
    };
    if !coords.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("projected coordinates".into()));
    }
    Ok(coords)
}

/// Maximum-likelihood Gaussian (population standard deviation).
pub fn fit_gaussian(
    class_id: usize,
    method: ProjectionMethod,
    coordinates: Vec<f64>,
) -> Result<ClassDensityModel> {
    if coordinates.is_empty() {
        return Err(Error::InvalidInput(format!(
            "class {class_id} has no coordinates"
        )));
    }
    if !coordinates.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("coordinates of class {class_id}")));
    }
    let n = coordinates.len() as f64;
    let mean = coordinates.iter().sum::<f64>() / n;
    let var = coordinates.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    Ok(ClassDensityModel {
        class_id,
        method,
        coordinates,
        mean,
        std: var.sqrt().max(EPS_STD),
    })
}

/// Picks one stimulus from the class. `samples` align with the model's coordinates.
pub fn select_stimulus(
    model: &ClassDensityModel,
    samples: &[PooledVoxels],
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<String> {
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!(
            "class {} is empty",
            model.class_id
        )));
    }
    if samples.len() != model.coordinates.len() {
        return Err(Error::shape(
            "select_stimulus",
            model.coordinates.len(),
            samples.len(),
        ));
    }
    let ids: Vec<&str> = samples.iter().map(|s| s.stimulus_id.as_str()).collect();
    let dist: Vec<f64> = model
        .coordinates
        .iter()
        .map(|c| (c - model.mean).abs())
        .collect();
    let pick = |better: fn(f64, f64) -> bool| {
        (1..samples.len()).fold(0, |best, i| {
            if better(dist[i], dist[best]) || (dist[i] == dist[best] && ids[i] < ids[best]) {
                i
            } else {
                best
            }
        })
    };
    let idx = match strategy {
        SelectionStrategy::KdaMax => pick(|a, b| a < b),
        SelectionStrategy::KdaMin => pick(|a, b| a > b),
        SelectionStrategy::Random => {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.sort_by(|&a, &b| ids[a].cmp(ids[b]));
            order[rng(seed, 0).random_range(0..order.len())]
        }
    };
    Ok(ids[idx].to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class_id: usize,
    pub method: ProjectionMethod,
    pub strategy: SelectionStrategy,
    pub stimulus_id: String,
    pub mean: f64,
    pub std: f64,
    pub stimulus_ids: Vec<String>,
    pub coordinates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub subject_id: String,
    pub method: ProjectionMethod,
    pub strategy: SelectionStrategy,
    pub classes: Vec<ClassSelection>,
}

impl SelectionFile {
    pub fn chosen_ids(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.stimulus_id.clone()).collect()
    }
}

/// Runs selection for every class of one subject's pooled training samples.
pub fn select_all(
    subject_id: &str,
    samples: &[PooledVoxels],
    method: ProjectionMethod,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<SelectionFile> {
    let mut classes: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let classes = classes
        .par_iter()
        .map(|&c| {
            let mut members: Vec<PooledVoxels> = samples
                .iter()
                .filter(|s| s.class_id == c)
                .cloned()
                .collect();
            members.sort_by(|a, b| a.stimulus_id.cmp(&b.stimulus_id));
            let class_seed = seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let coords = project_1d(&members, method, class_seed)?;
            let model = fit_gaussian(c, method, coords)?;
            let chosen = select_stimulus(&model, &members, strategy, class_seed)?;
            Ok(ClassSelection {
                class_id: c,
                method,
                strategy,
                stimulus_id: chosen,
                mean: model.mean,
                std: model.std,
                stimulus_ids: members.iter().map(|m| m.stimulus_id.clone()).collect(),
                coordinates: model.coordinates,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectionFile {
        subject_id: subject_id.to_string(),
        method,
        strategy,
        classes,
    })
}
