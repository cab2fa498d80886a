//! Two-stage directed latent connectivity.
//!
//! Stage one estimates the loading matrix with the score-matching fit.
//! Stage two projects every class onto the estimated modules and recovers a
//! linear non-Gaussian acyclic structural model per class with a
//! DirectLiNGAM-style search: the most exogenous remaining variable is picked
//! by a pairwise likelihood-ratio contrast built from a maximum-entropy
//! approximation of differential entropy, regressed out of the others, and
//! appended to the causal order. Weights are then fitted by ordered least
//! squares and small coefficients pruned.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{center_with, column_means, MultiClassDataset, SampleMoments};
use crate::estimation::{fit_moments, Estimator, FitConfig, FitDiagnostics};
use crate::linalg::Spectrum;
use crate::model::ModelParams;
use crate::{Error, Mat, Result};

/// Standardized coefficients smaller than this are set to zero.
pub const PRUNE_TOL: f64 = 0.05;
/// Below this mean negentropy the latents look Gaussian and the order is
/// flagged as unreliable.
pub const LOW_CONFIDENCE_NEGENTROPY: f64 = 1e-3;

const RANK_TOL: f64 = 1e-10;

/// Causal order and structural weights of one class, in standardized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralModel {
    /// Latent indices from most upstream to most downstream.
    pub order: Vec<usize>,
    /// `B[(j, r)]` is the weight of latent `r` in the equation of latent `j`.
    #[serde(rename = "B", with = "crate::io::rows")]
    pub b: Mat,
    pub disturbance_variances: Vec<f64>,
    pub low_confidence: bool,
}

impl StructuralModel {
    /// True when `B` only has edges from earlier to later positions.
    pub fn is_acyclic(&self) -> bool {
        let pos = crate::metrics::order_positions(&self.order);
        let k = self.b.nrows();
        (0..k).all(|j| (0..k).all(|r| self.b[(j, r)] == 0.0 || pos[r] < pos[j]))
    }
}

/// Shared measurement model plus one structural model per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectedFit {
    pub params: ModelParams,
    pub structural: Vec<StructuralModel>,
    pub diagnostics: FitDiagnostics,
}

/// `Z = X W`.
pub fn project_latents(w: &Mat, x: &Mat) -> Result<Mat> {
    if x.ncols() != w.nrows() {
        return Err(Error::Dimension(format!(
            "data has {} columns, loading has {} rows",
            x.ncols(),
            w.nrows()
        )));
    }
    Ok(x * w)
}

/// Centers and scales every column to unit (population) variance.
pub fn standardize(z: &Mat) -> Result<Mat> {
    let n = z.nrows() as f64;
    let mut out = center_with(z, &column_means(z));
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let sd = (col.norm_squared() / n).sqrt();
        if !(sd > 0.0) {
            return Err(Error::RankDeficient(format!(
                "latent {j} has zero variance"
            )));
        }
        col /= sd;
    }
    Ok(out)
}

const ENTROPY_K1: f64 = 79.047;
const ENTROPY_K2: f64 = 7.4129;
const ENTROPY_GAMMA: f64 = 0.37457;

/// Maximum-entropy approximation of the differential entropy of a
/// standardized sample.
fn entropy(u: &[f64]) -> f64 {
    let n = u.len() as f64;
    let (mut lc, mut ge) = (0.0, 0.0);
    for &x in u {
        // ln cosh x, stable for large |x|
        let a = x.abs();
        lc += a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2;
        ge += x * (-0.5 * x * x).exp();
    }
    let (lc, ge) = (lc / n, ge / n);
    0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln())
        - ENTROPY_K1 * (lc - ENTROPY_GAMMA).powi(2)
        - ENTROPY_K2 * ge.powi(2)
}

fn gaussian_entropy() -> f64 {
    0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / x.len() as f64
}

fn std_scaled(x: &[f64]) -> Vec<f64> {
    let m = mean(x);
    let sd = var(x).sqrt().max(f64::MIN_POSITIVE);
    x.iter().map(|a| (a - m) / sd).collect()
}

/// `x_i - cov(x_i, x_j) / var(x_j) * x_j`.
fn residual(xi: &[f64], xj: &[f64]) -> Vec<f64> {
    let (mi, mj) = (mean(xi), mean(xj));
    let cov = xi
        .iter()
        .zip(xj)
        .map(|(a, b)| (a - mi) * (b - mj))
        .sum::<f64>()
        / xi.len() as f64;
    let beta = cov / var(xj).max(f64::MIN_POSITIVE);
    xi.iter().zip(xj).map(|(a, b)| a - beta * b).collect()
}

/// Positive when `x_i -> x_j` is the more likely direction.
fn diff_mutual_info(xi: &[f64], xj: &[f64]) -> f64 {
    let ri = std_scaled(&residual(xi, xj));
    let rj = std_scaled(&residual(xj, xi));
    (entropy(xj) + entropy(&ri)) - (entropy(xi) + entropy(&rj))
}

fn columns(z: &Mat) -> Vec<Vec<f64>> {
    z.column_iter()
        .map(|c| c.iter().copied().collect())
        .collect()
}

/// Causal order by repeated selection of the most exogenous variable.
fn causal_order(z: &Mat) -> Vec<usize> {
    let k = z.ncols();
    let mut x = columns(z);
    let mut remaining: Vec<usize> = (0..k).collect();
    let mut order = Vec::with_capacity(k);
    while remaining.len() > 1 {
        let std: Vec<Vec<f64>> = x.iter().map(|c| std_scaled(c)).collect();
        let mut best = (f64::NEG_INFINITY, remaining[0]);
        for &i in &remaining {
            let mut m = 0.0;
            for &j in &remaining {
                if i != j {
                    m += diff_mutual_info(&std[i], &std[j]).min(0.0).powi(2);
                }
            }
            if -m > best.0 {
                best = (-m, i);
            }
        }
        let root = best.1;
        order.push(root);
        remaining.retain(|&j| j != root);
        let xr = x[root].clone();
        for &j in &remaining {
            x[j] = residual(&x[j], &xr);
        }
    }
    order.extend(remaining);
    order
}

/// Least-squares weights of every variable on its predecessors in `order`,
/// with coefficients below `prune_tol` removed and the rest refitted.
fn ordered_regression(z: &Mat, order: &[usize], prune_tol: f64) -> Result<(Mat, Vec<f64>)> {
    let k = z.ncols();
    let n = z.nrows() as f64;
    let cov = z.tr_mul(z) / n;
    let mut b = Mat::zeros(k, k);
    let mut dist = vec![0.0; k];
    for (t, &j) in order.iter().enumerate() {
        let mut parents: Vec<usize> = order[..t].to_vec();
        loop {
            let coef = regress(&cov, j, &parents)?;
            let keep: Vec<usize> = parents
                .iter()
                .zip(&coef)
                .filter(|(_, c)| c.abs() >= prune_tol)
                .map(|(&r, _)| r)
                .collect();
            if keep.len() == parents.len() {
                let mut resid = cov[(j, j)];
                for (a, &r) in parents.iter().enumerate() {
                    b[(j, r)] = coef[a];
                    resid -= coef[a] * cov[(r, j)];
                }
                dist[j] = resid.max(0.0);
                break;
            }
            parents = keep;
        }
    }
    Ok((b, dist))
}

fn regress(cov: &Mat, j: usize, parents: &[usize]) -> Result<Vec<f64>> {
    if parents.is_empty() {
        return Ok(Vec::new());
    }
    let m = parents.len();
    let sxx = Mat::from_fn(m, m, |a, c| cov[(parents[a], parents[c])]);
    let sxy = crate::Vector::from_fn(m, |a, _| cov[(parents[a], j)]);
    let sol = sxx
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("collinear latent variables".into()))?
        .solve(&sxy);
    Ok(sol.iter().copied().collect())
}

/// DirectLiNGAM on `z` (`n x k`): the columns are standardized first, so the
/// weights are in standardized units.
pub fn lingam(z: &Mat) -> Result<StructuralModel> {
    lingam_with(z, PRUNE_TOL)
}

pub fn lingam_with(z: &Mat, prune_tol: f64) -> Result<StructuralModel> {
    let k = z.ncols();
    if k == 0 || z.nrows() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 observations of at least 1 latent, got {}x{k}",
            z.nrows()
        )));
    }
    let zs = standardize(z)?;
    let corr = zs.tr_mul(&zs) / z.nrows() as f64;
    if Spectrum::of(&corr).min() < RANK_TOL {
        return Err(Error::RankDeficient(
            "projected latents are linearly dependent".into(),
        ));
    }
    let negentropy = columns(&zs)
        .iter()
        .map(|c| gaussian_entropy() - entropy(c))
        .sum::<f64>()
        / k as f64;
    let order = causal_order(&zs);
    let (b, disturbance_variances) = ordered_regression(&zs, &order, prune_tol)?;
    Ok(StructuralModel {
        order,
        b,
        disturbance_variances,
        low_confidence: negentropy < LOW_CONFIDENCE_NEGENTROPY,
    })
}

fn class_latents(w: &Mat, x: &Mat) -> Result<Mat> {
    project_latents(w, &center_with(x, &column_means(x)))
}

/// Stage one: score-matching loading; stage two: LiNGAM on every class's
/// projected observations, independently and in parallel.
pub fn two_stage_fit(dataset: &MultiClassDataset, cfg: &FitConfig) -> Result<DirectedFit> {
    let cfg = cfg.clone().with_estimator(Estimator::ScoreMatching);
    let moments = SampleMoments::from_dataset(dataset)?;
    let (params, diagnostics) = fit_moments(&moments, &cfg, None)?;
    let structural = structural_models(dataset, &params.loading)?;
    Ok(DirectedFit {
        params,
        structural,
        diagnostics,
    })
}

/// Per-class structural models for a given loading.
pub fn structural_models(dataset: &MultiClassDataset, w: &Mat) -> Result<Vec<StructuralModel>> {
    dataset
        .classes
        .par_iter()
        .map(|x| lingam(&class_latents(w, x)?))
        .collect()
}

/// A single structural model fitted to the latents of all classes stacked
/// together (each class centered first) -- the naive pooled alternative.
pub fn pooled_structural_model(dataset: &MultiClassDataset, w: &Mat) -> Result<StructuralModel> {
    let blocks = dataset
        .classes
        .iter()
        .map(|x| class_latents(w, x))
        .collect::<Result<Vec<_>>>()?;
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut z = Mat::zeros(rows, w.ncols());
    let mut at = 0;
    for b in &blocks {
        z.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    lingam(&z)
}
