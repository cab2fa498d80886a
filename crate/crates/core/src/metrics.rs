//! Permutation-aware evaluation against ground truth and held-out data.
//!
//! Loadings are only identified up to a column permutation, so every
//! comparison with a true model first aligns columns by solving a linear
//! assignment problem. Non-negativity removes sign ambiguity, so no sign
//! flips are searched.

use serde::{Deserialize, Serialize};

use crate::dataset::MultiClassDataset;
use crate::directed::DirectedFit;
use crate::model::{negative_log_likelihood, ModelParams};
use crate::simulation::GroundTruth;
use crate::{Error, Mat, Result, Vector};

/// Minimum-cost perfect matching on a square cost matrix (Kuhn-Munkres with
/// potentials, `O(n^3)`). Returns `assign[row] = column`.
pub fn hungarian(cost: &Mat) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[matched_row[j] - 1] = j - 1;
    }
    assign
}

/// Column permutation minimizing `||W_hat P - W_true||_F`: `perm[j]` is the
/// column of `w_hat` matched to true column `j`.
pub fn align_columns(w_hat: &Mat, w_true: &Mat) -> Result<Vec<usize>> {
    if w_hat.shape() != w_true.shape() {
        return Err(Error::Dimension(format!(
            "estimated loading is {:?}, true loading is {:?}",
            w_hat.shape(),
            w_true.shape()
        )));
    }
    let k = w_true.ncols();
    let cost = Mat::from_fn(k, k, |j, a| {
        (w_hat.column(a) - w_true.column(j)).norm_squared()
    });
    Ok(hungarian(&cost))
}

pub fn permute_columns(w: &Mat, perm: &[usize]) -> Mat {
    Mat::from_fn(w.nrows(), perm.len(), |r, j| w[(r, perm[j])])
}

/// `P^T M P` for a square matrix indexed by modules.
pub fn permute_square(m: &Mat, perm: &[usize]) -> Mat {
    Mat::from_fn(perm.len(), perm.len(), |a, b| m[(perm[a], perm[b])])
}

fn mse(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm_squared() / (a.nrows() * a.ncols()).max(1) as f64
}

/// Mean squared entrywise error after column alignment.
pub fn loading_mse(w_hat: &Mat, w_true: &Mat) -> Result<f64> {
    let perm = align_columns(w_hat, w_true)?;
    Ok(mse(&permute_columns(w_hat, &perm), w_true))
}

/// Per-class MSE of the aligned latent covariances.
pub fn latent_conn_mse(g_hat: &[Mat], g_true: &[Mat], perm: &[usize]) -> Result<Vec<f64>> {
    if g_hat.len() != g_true.len() {
        return Err(Error::Dimension(format!(
            "{} estimated vs {} true latent covariances",
            g_hat.len(),
            g_true.len()
        )));
    }
    g_hat
        .iter()
        .zip(g_true)
        .map(|(gh, gt)| {
            if gh.shape() != gt.shape() || gt.nrows() != perm.len() {
                return Err(Error::Dimension("latent covariance shapes differ".into()));
            }
            Ok(mse(&permute_square(gh, perm), gt))
        })
        .collect()
}

/// Module label per row (argmax of the row); all-zero rows get the extra
/// label `k` ("unassigned").
pub fn row_labels(w: &Mat) -> Vec<usize> {
    let k = w.ncols();
    (0..w.nrows())
        .map(|r| {
            let (c, v) = crate::linalg::row_argmax(w, r);
            if v > 0.0 {
                c
            } else {
                k
            }
        })
        .collect()
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::Dimension(format!(
            "labelings have lengths {} and {}",
            labels_a.len(),
            labels_b.len()
        )));
    }
    let n = labels_a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let ka = labels_a.iter().max().map_or(0, |m| m + 1);
    let kb = labels_b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        table[a][b] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let expected = rows * cols / choose2(n);
    let max_index = 0.5 * (rows + cols);
    let denom = max_index - expected;
    if denom.abs() < f64::EPSILON {
        // Both partitions trivial (all singletons or one block).
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Position of every variable within a causal order.
pub fn order_positions(order: &[usize]) -> Vec<usize> {
    let mut pos = vec![0; order.len()];
    for (t, &j) in order.iter().enumerate() {
        pos[j] = t;
    }
    pos
}

fn is_permutation(order: &[usize]) -> bool {
    let mut seen = vec![false; order.len()];
    order
        .iter()
        .all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
}

/// Spearman rank correlation between the positions variables occupy in two
/// causal orders.
pub fn order_spearman(order_hat: &[usize], order_true: &[usize]) -> Result<f64> {
    if order_hat.len() != order_true.len()
        || !is_permutation(order_hat)
        || !is_permutation(order_true)
    {
        return Err(Error::InvalidArgument(
            "orders must be permutations of the same index set".into(),
        ));
    }
    let k = order_hat.len();
    if k < 2 {
        return Ok(1.0);
    }
    let ph = order_positions(order_hat);
    let pt = order_positions(order_true);
    let d2: f64 = ph
        .iter()
        .zip(&pt)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let kf = k as f64;
    Ok(1.0 - 6.0 * d2 / (kf * (kf * kf - 1.0)))
}

/// Per-class and mean held-out NLL; `means` are the training means used to
/// center each class.
pub fn heldout_nll_eval(
    params: &ModelParams,
    heldout: &MultiClassDataset,
    means: &[Vector],
) -> Result<(Vec<f64>, f64)> {
    if heldout.n_classes() != params.n_classes() || means.len() != params.n_classes() {
        return Err(Error::Dimension(format!(
            "model has {} classes, held-out data {}, means {}",
            params.n_classes(),
            heldout.n_classes(),
            means.len()
        )));
    }
    let per_class = (0..params.n_classes())
        .map(|i| negative_log_likelihood(params, &heldout.centered_with(i, &means[i]), i))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok((per_class, mean))
}

/// One row of a held-out likelihood comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllRow {
    pub method: String,
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Evaluation summary; fields absent when the needed input was not given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loading_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_conn_mse: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_conn_mse_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_nll: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_nll_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order_spearman: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order_spearman_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structural_mse: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structural_mse_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nll_table: Vec<NllRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

impl EvalReport {
    /// Loading MSE, latent-connectivity MSE and ARI against a ground truth.
    pub fn against_truth(params: &ModelParams, truth: &GroundTruth) -> Result<Self> {
        let perm = align_columns(&params.loading, &truth.loading)?;
        let aligned = permute_columns(&params.loading, &perm);
        let g = latent_conn_mse(&params.latent_cov, &truth.latent_cov, &perm)?;
        let ari = adjusted_rand(&row_labels(&params.loading), &truth.labels())?;
        Ok(EvalReport {
            loading_mse: Some(mse(&aligned, &truth.loading)),
            latent_conn_mse_mean: Some(mean(&g)),
            latent_conn_mse: Some(g),
            ari: Some(ari),
            alignment: Some(perm),
            ..Default::default()
        })
    }

    pub fn with_heldout(
        mut self,
        params: &ModelParams,
        heldout: &MultiClassDataset,
        means: &[Vector],
    ) -> Result<Self> {
        let (per, m) = heldout_nll_eval(params, heldout, means)?;
        self.nll_table.push(NllRow {
            method: "modular".into(),
            per_class: per.clone(),
            mean: m,
        });
        self.heldout_nll = Some(per);
        self.heldout_nll_mean = Some(m);
        Ok(self)
    }

    /// Order correlation and structural-weight MSE of a directed fit.
    pub fn with_directed(mut self, fit: &DirectedFit, truth: &GroundTruth) -> Result<Self> {
        let (rho, bmse) = directed_scores(fit, truth)?;
        self.order_spearman_mean = Some(mean(&rho));
        self.order_spearman = Some(rho);
        self.structural_mse_mean = Some(mean(&bmse));
        self.structural_mse = Some(bmse);
        Ok(self)
    }
}

/// Per-class Spearman order correlation and MSE of standardized structural
/// weights, after aligning estimated latents to the true ones.
pub fn directed_scores(fit: &DirectedFit, truth: &GroundTruth) -> Result<(Vec<f64>, Vec<f64>)> {
    let structs = truth
        .structural
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("ground truth has no structural model".into()))?;
    if structs.len() != fit.structural.len() {
        return Err(Error::Dimension("class counts differ".into()));
    }
    let perm = align_columns(&fit.params.loading, &truth.loading)?;
    let mut inverse = vec![0; perm.len()];
    for (j, &a) in perm.iter().enumerate() {
        inverse[a] = j;
    }
    let mut rho = Vec::with_capacity(structs.len());
    let mut bmse = Vec::with_capacity(structs.len());
    for (est, tru) in fit.structural.iter().zip(structs) {
        let mapped: Vec<usize> = est.order.iter().map(|&a| inverse[a]).collect();
        rho.push(order_spearman(&mapped, &tru.order)?);
        let b_al = permute_square(&est.b, &perm);
        bmse.push(mse(&b_al, &tru.standardized_b()?));
    }
    Ok((rho, bmse))
}
