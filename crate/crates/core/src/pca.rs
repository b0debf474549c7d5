//! Principal components by deflated power iteration on the covariance.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PCA_MAX_ITERS: usize = 1000;
pub const PCA_TOL: f64 = 1e-8;

/// Fixed affine map from teacher latents to the top `k` principal directions.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `dim`, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub explained: Vec<f64>,
}

impl PcaProjection {
    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.components.len()
    }

    /// `(x − mean) · Cᵀ` for each packed row of `x`.
    pub fn project(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let d = self.in_dim();
        let mut out = Vec::with_capacity(rows * self.out_dim());
        let mut centered = vec![0.0; d];
        for r in 0..rows {
            for (c, (v, m)) in centered.iter_mut().zip(x[r * d..(r + 1) * d].iter().zip(&self.mean)) {
                *c = v - m;
            }
            for comp in &self.components {
                out.push(comp.iter().zip(&centered).map(|(a, b)| a * b).sum());
            }
        }
        out
    }

    /// Maps projected rows back to the input space.
    pub fn reconstruct(&self, y: &[f64], rows: usize) -> Vec<f64> {
        let (d, k) = (self.in_dim(), self.out_dim());
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            for j in 0..d {
                let mut v = self.mean[j];
                for (i, comp) in self.components.iter().enumerate() {
                    v += y[r * k + i] * comp[j];
                }
                out.push(v);
            }
        }
        out
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
}

/// Fits the top `k` components of `rows × dim` data. Deterministic given the
/// rng state.
pub fn fit_pca(data: &[f64], rows: usize, dim: usize, k: usize, rng: &mut Rng) -> Result<PcaProjection> {
    if data.len() != rows * dim {
        return Err(Error::shape("pca data", &[rows, dim], &[data.len()]));
    }
    if k == 0 || k > dim {
        return Err(Error::Pca(format!("k = {k} must lie in 1..={dim}")));
    }
    if rows < 2 {
        return Err(Error::Pca("need at least two samples".into()));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pca input".into()));
    }
    let mut mean = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut cov = vec![0.0; dim * dim];
    let mut c = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        c.iter_mut().zip(row.iter().zip(&mean)).for_each(|(c, (x, m))| *c = x - m);
        for i in 0..dim {
            let ci = c[i];
            for j in i..dim {
                cov[i * dim + j] += ci * c[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / rows as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    if trace <= 0.0 {
        return Err(Error::Pca(format!("zero variance in all {dim} dimensions")));
    }

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    let mut deflated = cov.clone();
    for comp in 0..k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        orthogonalize(&mut v, &components);
        normalize(&mut v);
        let mut next = vec![0.0; dim];
        for _ in 0..PCA_MAX_ITERS {
            for i in 0..dim {
                next[i] = deflated[i * dim..(i + 1) * dim].iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            orthogonalize(&mut next, &components);
            if normalize(&mut next) == 0.0 {
                break;
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            std::mem::swap(&mut v, &mut next);
            if delta < PCA_TOL {
                break;
            }
        }
        let lambda: f64 = (0..dim)
            .map(|i| v[i] * cov[i * dim..(i + 1) * dim].iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        if !(lambda > 1e-12 * trace) {
            return Err(Error::Pca(format!(
                "zero variance along component {} of {dim}-dim data",
                comp + 1
            )));
        }
        // Sign convention: largest-magnitude entry positive.
        let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..dim {
            for j in 0..dim {
                deflated[i * dim + j] -= lambda * v[i] * v[j];
            }
        }
        explained.push(lambda);
        components.push(v);
    }
    Ok(PcaProjection {
        mean,
        components,
        explained,
    })
}
