//! Unstructured covariance baselines for held-out likelihood comparisons.

use serde::{Deserialize, Serialize};

use crate::dataset::{center_with, column_means, MultiClassDataset};
use crate::linalg::{sym, Spectrum};
use crate::metrics::NllRow;
use crate::{Error, Mat, Result, Vector};

/// Eigenvalue floor applied before evaluating a baseline likelihood.
pub const NLL_EIGEN_FLOOR: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SampleCovariance,
    LedoitWolf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SampleCovariance => "sample_covariance",
            Method::LedoitWolf => "ledoit_wolf",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CovEstimate {
    pub sigma: Mat,
    pub method: Method,
    /// Shrinkage intensity (Ledoit-Wolf only).
    pub shrinkage: Option<f64>,
}

fn centered(x: &Mat) -> Result<Mat> {
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} observation(s); at least 2 required",
            x.nrows()
        )));
    }
    Ok(center_with(x, &column_means(x)))
}

/// `X^T X / n` of column-centered data.
pub fn sample_cov(x: &Mat) -> Result<CovEstimate> {
    let xc = centered(x)?;
    Ok(CovEstimate {
        sigma: sym(&(xc.tr_mul(&xc) / x.nrows() as f64)),
        method: Method::SampleCovariance,
        shrinkage: None,
    })
}

/// Linear shrinkage `(1 - a) S + a (tr S / p) I` with the Ledoit-Wolf
/// estimate of the optimal intensity `a`, clamped to `[0, 1]`.
pub fn ledoit_wolf(x: &Mat) -> Result<CovEstimate> {
    let xc = centered(x)?;
    let n = x.nrows() as f64;
    let p = x.ncols();
    let s = sym(&(xc.tr_mul(&xc) / n));
    let mu = s.trace() / p as f64;
    let mut target_gap = s.clone();
    for j in 0..p {
        target_gap[(j, j)] -= mu;
    }
    let delta = target_gap.norm_squared();
    // (1/n^2) sum_r ||x_r x_r^T - S||_F^2 = (sum_r ||x_r||^4 / n - ||S||_F^2) / n
    let fourth: f64 = xc.row_iter().map(|r| r.norm_squared().powi(2)).sum::<f64>() / n;
    let beta = ((fourth - s.norm_squared()) / n).max(0.0);
    let alpha = if delta > 0.0 {
        (beta.min(delta) / delta).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut sigma = s * (1.0 - alpha);
    for j in 0..p {
        sigma[(j, j)] += alpha * mu;
    }
    Ok(CovEstimate {
        sigma,
        method: Method::LedoitWolf,
        shrinkage: Some(alpha),
    })
}

/// Mean per-observation Gaussian NLL of centered rows `data` under `sigma`,
/// with eigenvalues floored at [`NLL_EIGEN_FLOOR`].
pub fn cov_nll(sigma: &Mat, data: &Mat) -> Result<f64> {
    if sigma.nrows() != data.ncols() {
        return Err(Error::Dimension(format!(
            "covariance is {}x{}, data has {} columns",
            sigma.nrows(),
            sigma.ncols(),
            data.ncols()
        )));
    }
    if data.nrows() == 0 {
        return Err(Error::InvalidArgument("no observations".into()));
    }
    let spec = Spectrum::of(sigma);
    let d = spec.values.map(|x| x.max(NLL_EIGEN_FLOOR));
    let y = data * &spec.vectors;
    let mut quad = 0.0;
    for r in 0..y.nrows() {
        quad += y
            .row(r)
            .iter()
            .zip(d.iter())
            .map(|(a, l)| a * a / l)
            .sum::<f64>();
    }
    let ln_det: f64 = d.iter().map(|x| x.ln()).sum();
    let p = sigma.nrows() as f64;
    Ok(0.5 * (p * LN_2PI + ln_det + quad / data.nrows() as f64))
}

/// Held-out NLL table rows for both baselines: each class is estimated from
/// `train` and scored on `heldout` centered with the training means.
pub fn baseline_rows(
    train: &MultiClassDataset,
    heldout: &MultiClassDataset,
) -> Result<Vec<NllRow>> {
    if train.n_classes() != heldout.n_classes() || train.p() != heldout.p() {
        return Err(Error::Dimension(
            "training and held-out data differ in shape".into(),
        ));
    }
    let means: Vec<Vector> = train.means();
    let mut rows = Vec::new();
    for method in [Method::SampleCovariance, Method::LedoitWolf] {
        let per_class = (0..train.n_classes())
            .map(|i| {
                let est = match method {
                    Method::SampleCovariance => sample_cov(&train.classes[i])?,
                    Method::LedoitWolf => ledoit_wolf(&train.classes[i])?,
                };
                cov_nll(&est.sigma, &heldout.centered_with(i, &means[i]))
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
        rows.push(NllRow {
            method: method.name().into(),
            per_class,
            mean,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Mat {
        Mat::from_fn(n, p, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn repeated_row_gives_rank_one() {
        let mut x = Mat::from_fn(6, 4, |_, j| (j + 1) as f64);
        x.set_row(5, &Mat::from_row_slice(1, 4, &[0.0, 1.0, -1.0, 2.0]).row(0));
        let s = sample_cov(&x).unwrap().sigma;
        let spec = Spectrum::of(&s);
        let big = spec.values.iter().filter(|&&d| d > 1e-12).count();
        assert_eq!(big, 1);
    }

    #[test]
    fn sample_cov_of_standard_normal_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normal(&mut rng, 1_000_000, 5);
        let s = sample_cov(&x).unwrap().sigma;
        assert!((s - Mat::identity(5, 5)).norm() < 1e-2);
    }

    #[test]
    fn ledoit_wolf_tends_to_sample_cov() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scale = Mat::from_fn(5, 5, |i, j| if i == j { (i + 1) as f64 } else { 0.0 });
        let x = normal(&mut rng, 200_000, 5) * scale;
        let s = sample_cov(&x).unwrap();
        let lw = ledoit_wolf(&x).unwrap();
        assert!(lw.shrinkage.unwrap() < 1e-3);
        assert!((&lw.sigma - &s.sigma).norm() / s.sigma.norm() < 1e-3);
    }

    #[test]
    fn shrinkage_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2, 3, 5, 50] {
            let x = normal(&mut rng, n, 20);
            let a = ledoit_wolf(&x).unwrap().shrinkage.unwrap();
            assert!((0.0..=1.0).contains(&a));
        }
        // isotropic sample: the target equals S
        let x = Mat::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let lw = ledoit_wolf(&x).unwrap();
        assert_eq!(lw.shrinkage, Some(0.0));
    }

    #[test]
    fn ledoit_wolf_beats_sample_cov_when_n_below_p() {
        let mut wins = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let train = normal(&mut rng, 30, 40);
            let test = normal(&mut rng, 500, 40);
            let s = cov_nll(&sample_cov(&train).unwrap().sigma, &test).unwrap();
            let l = cov_nll(&ledoit_wolf(&train).unwrap().sigma, &test).unwrap();
            if l < s {
                wins += 1;
            }
        }
        assert_eq!(wins, 20);
    }

    #[test]
    fn nll_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = normal(&mut rng, 4, 4);
        let sigma = &l * l.transpose() + Mat::identity(4, 4);
        let data = normal(&mut rng, 30, 4);
        let inv = sigma.clone().try_inverse().unwrap();
        let det = sigma.determinant();
        let quad: f64 = (0..30)
            .map(|r| {
                let x = data.row(r).transpose();
                (x.transpose() * &inv * &x)[(0, 0)]
            })
            .sum::<f64>()
            / 30.0;
        let want = 0.5 * (4.0 * (2.0 * std::f64::consts::PI).ln() + det.ln() + quad);
        assert!((cov_nll(&sigma, &data).unwrap() - want).abs() < 1e-10);
    }
}
