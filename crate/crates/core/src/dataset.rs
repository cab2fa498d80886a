//! Multi-class observation data and the per-class second moments the
//! estimators consume.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Mat, Result, Vector};

/// Provenance recorded with a dataset (filled in by the simulators).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

/// `N` observation matrices (`n_i x p`) over a common set of variables.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiClassDataset {
    pub classes: Vec<Mat>,
    pub variable_names: Vec<String>,
    pub meta: DatasetMeta,
}

impl MultiClassDataset {
    /// Builds a dataset with generated variable names `x0, x1, ...`.
    pub fn new(classes: Vec<Mat>) -> Result<Self> {
        let p = classes.first().map_or(0, |c| c.ncols());
        let names = (0..p).map(|j| format!("x{j}")).collect();
        Self::with_names(classes, names)
    }

    pub fn with_names(classes: Vec<Mat>, variable_names: Vec<String>) -> Result<Self> {
        let ds = MultiClassDataset {
            classes,
            variable_names,
            meta: DatasetMeta::default(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("dataset has no classes".into()));
        }
        let p = self.variable_names.len();
        for (i, x) in self.classes.iter().enumerate() {
            if x.ncols() != p {
                return Err(Error::Dimension(format!(
                    "class {i} has {} variables, expected {p}",
                    x.ncols()
                )));
            }
            if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
                let (r, c) = (pos % x.nrows(), pos / x.nrows());
                return Err(Error::NonFinite(format!("class {i}, row {r}, column {c}")));
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.variable_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.classes.iter().map(|x| x.nrows()).collect()
    }

    /// Column means of every class.
    pub fn means(&self) -> Vec<Vector> {
        self.classes.iter().map(column_means).collect()
    }

    /// Splits every class into a leading training block and a trailing
    /// held-out block of `round(frac * n_i)` rows.
    pub fn tail_split(&self, frac: f64) -> Result<(MultiClassDataset, MultiClassDataset)> {
        if !(frac > 0.0 && frac < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "holdout fraction must lie in (0, 1), got {frac}"
            )));
        }
        let mut train = Vec::with_capacity(self.n_classes());
        let mut test = Vec::with_capacity(self.n_classes());
        for (i, x) in self.classes.iter().enumerate() {
            let n = x.nrows();
            let h = (frac * n as f64).round() as usize;
            if h < 2 || n - h < 2 {
                return Err(Error::InvalidArgument(format!(
                    "class {i} with {n} rows cannot be split at fraction {frac}"
                )));
            }
            train.push(x.rows(0, n - h).into_owned());
            test.push(x.rows(n - h, h).into_owned());
        }
        let wrap = |classes| MultiClassDataset {
            classes,
            variable_names: self.variable_names.clone(),
            meta: self.meta.clone(),
        };
        Ok((wrap(train), wrap(test)))
    }

    /// Observations of class `i` centered with the supplied means.
    pub fn centered_with(&self, i: usize, means: &Vector) -> Mat {
        center_with(&self.classes[i], means)
    }
}

pub fn column_means(x: &Mat) -> Vector {
    let n = x.nrows().max(1) as f64;
    Vector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

pub fn center_with(x: &Mat, means: &Vector) -> Mat {
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    out
}

/// Per-class sample covariances `K_i = X_i^T X_i / n_i` of centered data.
#[derive(Clone, Debug)]
pub struct SampleMoments {
    pub cov: Vec<Mat>,
    pub counts: Vec<usize>,
}

impl SampleMoments {
    /// Centers each class at its own mean and forms `K_i`. Classes are
    /// processed in parallel; the result does not depend on thread count.
    pub fn from_dataset(ds: &MultiClassDataset) -> Result<Self> {
        ds.validate()?;
        let cov: Vec<Mat> = ds
            .classes
            .par_iter()
            .map(|x| {
                let xc = center_with(x, &column_means(x));
                xc.tr_mul(&xc) / x.nrows().max(1) as f64
            })
            .collect();
        Ok(SampleMoments {
            cov,
            counts: ds.class_sizes(),
        })
    }

    pub fn from_covariances(cov: Vec<Mat>, counts: Vec<usize>) -> Result<Self> {
        if cov.len() != counts.len() || cov.is_empty() {
            return Err(Error::Dimension(
                "need one sample count per covariance and at least one class".into(),
            ));
        }
        let p = cov[0].nrows();
        for (i, k) in cov.iter().enumerate() {
            if k.nrows() != p || k.ncols() != p {
                return Err(Error::Dimension(format!(
                    "covariance {i} is {}x{}, expected {p}x{p}",
                    k.nrows(),
                    k.ncols()
                )));
            }
        }
        Ok(SampleMoments { cov, counts })
    }

    pub fn p(&self) -> usize {
        self.cov[0].nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.cov.len()
    }

    pub fn trace(&self, i: usize) -> f64 {
        self.cov[i].trace()
    }

    /// Rejects classes the estimators cannot work with.
    pub fn check_usable(&self) -> Result<()> {
        for (i, k) in self.cov.iter().enumerate() {
            if self.counts[i] < 2 {
                return Err(Error::DegenerateClass {
                    class: i,
                    reason: format!("{} observation(s); at least 2 required", self.counts[i]),
                });
            }
            let tr = k.trace();
            if !(tr > f64::EPSILON * k.nrows() as f64) {
                return Err(Error::DegenerateClass {
                    class: i,
                    reason: "zero-variance data".into(),
                });
            }
        }
        Ok(())
    }
}
