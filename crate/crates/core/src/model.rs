//! Model parameterization, covariance evaluation, objectives and their
//! analytic gradients.
//!
//! The score-matching objective for class `i` is
//!
//! ```text
//! J_i = -tr(Omega_i) + 1/2 tr(Omega_i Omega_i K_i),
//! Omega_i = v_i^{-1} (I - W A_i W^T),   A_i = G_i (G_i + v_i I)^{-1}
//! ```
//!
//! and is evaluated entirely through `k x k` quantities:
//!
//! ```text
//! J_i = -p/v + tr(A S)/v + tr(K)/(2 v^2) - tr(C A)/v^2 + tr(C A S A)/(2 v^2)
//! ```
//!
//! with `C = W^T K W` and `S = W^T W`. Keeping `S` (rather than substituting
//! the identity) makes the expansion equal to the `p x p` form for every `W`,
//! so the gradients below are exact derivatives off the orthonormal manifold
//! too. The cost per class is `O(p^2 k)`, dominated by `K W`.

use serde::{Deserialize, Serialize};

use crate::dataset::SampleMoments;
use crate::linalg::{self, sym, trace_product, Spectrum};
use crate::{Error, Mat, Result};

/// Eigenvalue floor kept on every latent covariance.
pub const PSD_FLOOR: f64 = 1e-8;
/// Lower bound on the observation noise variance.
pub const V_MIN: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Loading matrix `W` (`p x k`), per-class latent covariances `G_i` (`k x k`)
/// and per-class noise variances `v_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    #[serde(rename = "W", with = "crate::io::rows")]
    pub loading: Mat,
    #[serde(rename = "G", with = "crate::io::rows_list")]
    pub latent_cov: Vec<Mat>,
    #[serde(rename = "v")]
    pub noise_var: Vec<f64>,
}

impl ModelParams {
    pub fn new(loading: Mat, latent_cov: Vec<Mat>, noise_var: Vec<f64>) -> Result<Self> {
        let params = ModelParams {
            loading,
            latent_cov,
            noise_var,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.latent_cov.len() != self.noise_var.len() || self.latent_cov.is_empty() {
            return Err(Error::Dimension(format!(
                "{} latent covariances but {} noise variances",
                self.latent_cov.len(),
                self.noise_var.len()
            )));
        }
        for (i, g) in self.latent_cov.iter().enumerate() {
            if g.nrows() != k || g.ncols() != k {
                return Err(Error::Dimension(format!(
                    "G[{i}] is {}x{}, expected {k}x{k}",
                    g.nrows(),
                    g.ncols()
                )));
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.loading.nrows()
    }

    pub fn k(&self) -> usize {
        self.loading.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.latent_cov.len()
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.n_classes() {
            return Err(Error::ClassOutOfRange {
                index: class,
                classes: self.n_classes(),
            });
        }
        Ok(())
    }

    fn check_moments(&self, moments: &SampleMoments) -> Result<()> {
        if moments.n_classes() != self.n_classes() || moments.p() != self.p() {
            return Err(Error::Dimension(format!(
                "parameters describe {} classes over {} variables, moments {} over {}",
                self.n_classes(),
                self.p(),
                moments.n_classes(),
                moments.p()
            )));
        }
        Ok(())
    }

    /// Same parameters with the latent modules reordered: column `j` of the
    /// result is column `perm[j]` of `self`.
    pub fn permute_modules(&self, perm: &[usize]) -> ModelParams {
        let k = self.k();
        let w = Mat::from_fn(self.p(), k, |r, j| self.loading[(r, perm[j])]);
        let g = self
            .latent_cov
            .iter()
            .map(|g| Mat::from_fn(k, k, |a, b| g[(perm[a], perm[b])]))
            .collect();
        ModelParams {
            loading: w,
            latent_cov: g,
            noise_var: self.noise_var.clone(),
        }
    }
}

/// `Sigma_i = W G_i W^T + v_i I`.
pub fn model_covariance(params: &ModelParams, class: usize) -> Result<Mat> {
    params.check_class(class)?;
    let w = &params.loading;
    let mut sigma = w * &params.latent_cov[class] * w.transpose();
    for j in 0..params.p() {
        sigma[(j, j)] += params.noise_var[class];
    }
    Ok(sym(&sigma))
}

/// `v^{-1} (I - W G (G + v I)^{-1} W^T)`, the Woodbury form of the precision.
/// Exact inverse of [`model_covariance`] whenever `W` is column-orthonormal.
pub fn model_precision(params: &ModelParams, class: usize) -> Result<Mat> {
    params.check_class(class)?;
    let v = params.noise_var[class];
    if !(v > 0.0) {
        return Err(Error::IllConditioned(format!(
            "noise variance {v} is not positive"
        )));
    }
    let g = &params.latent_cov[class];
    let shifted = g + Mat::identity(params.k(), params.k()) * v;
    let a = sym(&(g * linalg::inverse(&shifted)?));
    let w = &params.loading;
    let mut omega = -(w * a * w.transpose());
    for j in 0..params.p() {
        omega[(j, j)] += 1.0;
    }
    Ok(omega / v)
}

/// Elementwise `max(0, .)`.
pub fn project_nonneg(w: &Mat) -> Mat {
    w.map(|x| x.max(0.0))
}

/// `psd_project(W^T K_i W - v I)` with eigenvalues clipped at [`PSD_FLOOR`].
pub fn closed_form_g(w: &Mat, moments: &SampleMoments, class: usize, v: f64) -> Result<Mat> {
    if class >= moments.n_classes() {
        return Err(Error::ClassOutOfRange {
            index: class,
            classes: moments.n_classes(),
        });
    }
    let c = w.tr_mul(&(&moments.cov[class] * w));
    Ok(closed_form_g_from_c(&c, v).0)
}

/// Closed-form update from a precomputed `C = W^T K W`; the flag reports
/// whether any eigenvalue was clipped.
pub(crate) fn closed_form_g_from_c(c: &Mat, v: f64) -> (Mat, Spectrum, bool) {
    let mut raw = c.clone();
    for j in 0..raw.nrows() {
        raw[(j, j)] -= v;
    }
    linalg::psd_project_spectrum(&raw, PSD_FLOOR)
}

/// Per-class quantities shared by the score-matching objective and its
/// gradients. All matrices are `k x k` except `kw` (`p x k`).
#[derive(Clone, Debug)]
pub struct ClassTerms {
    pub kw: Mat,
    pub c: Mat,
    pub trace_k: f64,
    pub v: f64,
    /// Eigendecomposition `G = V diag(d) V^T`.
    pub spectrum: Spectrum,
    /// `A = G (G + v I)^{-1}`.
    pub a: Mat,
    /// `(G + v I)^{-1}`.
    pub resolvent: Mat,
    /// `dA/dv = V diag(-d / (d + v)^2) V^T`.
    pub d_tilde: Mat,
    /// `d(A A)/dv = V diag(-2 d^2 / (d + v)^3) V^T`.
    pub d_tilde2: Mat,
}

impl ClassTerms {
    pub fn new(kw: Mat, c: Mat, trace_k: f64, g: &Mat, v: f64) -> Result<Self> {
        Self::from_spectrum(kw, c, trace_k, Spectrum::of(g), v)
    }

    pub(crate) fn from_spectrum(
        kw: Mat,
        c: Mat,
        trace_k: f64,
        spectrum: Spectrum,
        v: f64,
    ) -> Result<Self> {
        check_shift(&spectrum, v)?;
        let a = spectrum.map(|d| d / (d + v));
        let resolvent = spectrum.map(|d| 1.0 / (d + v));
        let d_tilde = spectrum.map(|d| -d / ((d + v) * (d + v)));
        let d_tilde2 = spectrum.map(|d| -2.0 * d * d / ((d + v) * (d + v) * (d + v)));
        Ok(ClassTerms {
            kw,
            c,
            trace_k,
            v,
            spectrum,
            a,
            resolvent,
            d_tilde,
            d_tilde2,
        })
    }

    /// Score-matching value for this class given `S = W^T W`.
    pub fn value(&self, s: &Mat, p: usize) -> f64 {
        sm_value(&self.a, &self.c, s, self.trace_k, self.v, p)
    }

    /// `H1 = 2A - v D~ - A S A + v sym(D~ S A)`; reduces to
    /// `2A - v D~ - A A + v D~~ / 2` when `S = I`.
    pub fn h1(&self, s: &Mat) -> Mat {
        let v = self.v;
        let asa = &self.a * s * &self.a;
        let dsa = sym(&(&self.d_tilde * s * &self.a));
        &self.a * 2.0 - &self.d_tilde * v - asa + dsa * v
    }

    /// `H2 = -v^{-2} tr((A - v D~) S)`.
    pub fn h2(&self, s: &Mat) -> f64 {
        let m = &self.a - &self.d_tilde * self.v;
        -trace_product(&m, s) / (self.v * self.v)
    }

    pub fn grad_v(&self, s: &Mat, p: usize) -> f64 {
        sm_grad_v(&self.a, &self.d_tilde, &self.c, s, self.trace_k, self.v, p)
    }

    /// `dJ/dA` restricted to symmetric directions.
    fn grad_a(&self, s: &Mat) -> Mat {
        let v = self.v;
        let cas = &self.c * &self.a * s;
        let mut m = s / v - &self.c / (v * v);
        m += (&cas + cas.transpose()) * (0.5 / (v * v));
        m
    }

    /// `dJ/dG = v R (dJ/dA) R` with `R = (G + v I)^{-1}`; symmetric.
    pub fn grad_g(&self, s: &Mat) -> Mat {
        let r = &self.resolvent;
        sym(&(r * self.grad_a(s) * r * self.v))
    }

    /// `dJ/dW` for this class:
    /// `W (2A/v + A C A / v^2) + K W (A S A - 2A) / v^2`.
    pub fn grad_w(&self, w: &Mat, s: &Mat) -> Mat {
        sm_grad_w(w, &self.kw, &self.a, &self.c, s, self.v)
    }

    /// Same terms at a different noise level (reuses the spectrum of `G`).
    pub fn with_v(&self, v: f64) -> Result<Self> {
        Self::from_spectrum(
            self.kw.clone(),
            self.c.clone(),
            self.trace_k,
            self.spectrum.clone(),
            v,
        )
    }
}

/// Errors unless `G + v I` is positive definite.
pub(crate) fn check_shift(spectrum: &Spectrum, v: f64) -> Result<()> {
    if !(v > 0.0) || !(spectrum.min() + v > 0.0) {
        return Err(Error::IllConditioned(format!(
            "G + vI is not positive definite (v = {v}, min eig(G) = {})",
            spectrum.min()
        )));
    }
    Ok(())
}

/// `A = G (G + v I)^{-1}` from the spectrum of `G`.
pub(crate) fn shrinkage_matrix(spectrum: &Spectrum, v: f64) -> Mat {
    spectrum.map(|d| d / (d + v))
}

/// Score-matching value of one class from `A`, `C = W^T K W` and `S = W^T W`.
pub(crate) fn sm_value(a: &Mat, c: &Mat, s: &Mat, trace_k: f64, v: f64, p: usize) -> f64 {
    let asa = a * s * a;
    -(p as f64) / v + trace_product(a, s) / v + 0.5 * trace_k / (v * v)
        - trace_product(c, a) / (v * v)
        + 0.5 * trace_product(c, &asa) / (v * v)
}

/// `W (2A/v + A C A / v^2) + K W (A S A - 2A) / v^2`.
pub(crate) fn sm_grad_w(w: &Mat, kw: &Mat, a: &Mat, c: &Mat, s: &Mat, v: f64) -> Mat {
    let left = a * (2.0 / v) + a * c * a / (v * v);
    let right = (a * s * a - a * 2.0) / (v * v);
    w * left + kw * right
}

/// `v^{-3} (p v - tr K) + v^{-3} tr(C H1) + H2` with
/// `H1 = 2A - v D~ - A S A + v sym(D~ S A)`, `H2 = -v^{-2} tr((A - v D~) S)`.
pub(crate) fn sm_grad_v(
    a: &Mat,
    d_tilde: &Mat,
    c: &Mat,
    s: &Mat,
    trace_k: f64,
    v: f64,
    p: usize,
) -> f64 {
    let v3 = v * v * v;
    let h1 = a * 2.0 - d_tilde * v - a * s * a + sym(&(d_tilde * s * a)) * v;
    let h2 = -trace_product(&(a - d_tilde * v), s) / (v * v);
    (p as f64 * v - trace_k) / v3 + trace_product(c, &h1) / v3 + h2
}

/// Evaluation cache for one parameter point: `S = W^T W`, per-class terms,
/// and the augmented-Lagrangian state (multipliers and penalty).
#[derive(Clone, Debug)]
pub struct Workspace {
    pub gram: Mat,
    pub classes: Vec<ClassTerms>,
    pub multipliers: Mat,
    pub rho: f64,
}

impl Workspace {
    pub fn new(params: &ModelParams, moments: &SampleMoments) -> Result<Self> {
        params.validate()?;
        params.check_moments(moments)?;
        let w = &params.loading;
        let classes = (0..params.n_classes())
            .map(|i| {
                let kw = &moments.cov[i] * w;
                let c = w.tr_mul(&kw);
                ClassTerms::new(
                    kw,
                    c,
                    moments.trace(i),
                    &params.latent_cov[i],
                    params.noise_var[i],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let k = params.k();
        Ok(Workspace {
            gram: w.tr_mul(w),
            classes,
            multipliers: Mat::zeros(k, k),
            rho: 1.0,
        })
    }
}

/// `sum_i -tr(Omega_i) + 1/2 tr(Omega_i Omega_i K_i)` via the `k x k` expansion.
pub fn score_matching_objective(params: &ModelParams, moments: &SampleMoments) -> Result<f64> {
    let ws = Workspace::new(params, moments)?;
    Ok(ws
        .classes
        .iter()
        .map(|t| t.value(&ws.gram, params.p()))
        .sum())
}

/// Gradient of the score-matching objective with respect to `W`.
pub fn grad_w(params: &ModelParams, ws: &Workspace) -> Mat {
    let mut g = Mat::zeros(params.p(), params.k());
    for t in &ws.classes {
        g += t.grad_w(&params.loading, &ws.gram);
    }
    g
}

/// Per-class gradients with respect to the (symmetric) latent covariances.
pub fn grad_g(ws: &Workspace) -> Vec<Mat> {
    ws.classes.iter().map(|t| t.grad_g(&ws.gram)).collect()
}

/// Per-class derivatives with respect to the noise variances.
pub fn grad_v(params: &ModelParams, ws: &Workspace) -> Vec<f64> {
    ws.classes
        .iter()
        .map(|t| t.grad_v(&ws.gram, params.p()))
        .collect()
}

/// Maximum-likelihood quantities for one class.
///
/// `A~ = G (v I + S G)^{-1}` generalizes `A` so that
/// `Sigma^{-1} = v^{-1} (I - W A~ W^T)` holds for any `W`.
#[derive(Clone, Debug)]
pub struct MlClassTerms {
    pub c: Mat,
    pub trace_k: f64,
    pub v: f64,
    pub a: Mat,
    pub ln_det_sigma: f64,
}

impl MlClassTerms {
    pub fn new(c: Mat, trace_k: f64, s: &Mat, g: &Mat, v: f64, p: usize) -> Result<Self> {
        if !(v > 0.0) {
            return Err(Error::IllConditioned(format!(
                "noise variance {v} is not positive"
            )));
        }
        let k = g.nrows();
        let sg = s * g;
        let shifted = &sg + Mat::identity(k, k) * v;
        let a = sym(&(g * linalg::inverse(&shifted)?));
        let ln_det_sigma =
            p as f64 * v.ln() + linalg::ln_det_positive(&(Mat::identity(k, k) + sg / v))?;
        Ok(MlClassTerms {
            c,
            trace_k,
            v,
            a,
            ln_det_sigma,
        })
    }

    /// `p ln 2 pi + ln det Sigma + tr(Sigma^{-1} K)`.
    pub fn value(&self, p: usize) -> f64 {
        p as f64 * LN_2PI
            + self.ln_det_sigma
            + (self.trace_k - trace_product(&self.a, &self.c)) / self.v
    }

    /// `-tr(M)` evaluated with `k x k` products only.
    pub fn grad_v(&self, s: &Mat, p: usize) -> f64 {
        let v = self.v;
        let tr_inv = (p as f64 - trace_product(&self.a, s)) / v;
        let asa = &self.a * s * &self.a;
        let tr_sks = (self.trace_k - 2.0 * trace_product(&self.a, &self.c)
            + trace_product(&asa, &self.c))
            / (v * v);
        tr_inv - tr_sks
    }

    /// `M = -Sigma^{-1} + Sigma^{-1} K Sigma^{-1}` assembled from the
    /// Woodbury expansion with dense `p x p` products; `O(p^3)`.
    pub fn m_matrix(&self, w: &Mat, k_mat: &Mat) -> Mat {
        let v = self.v;
        let p = w.nrows();
        let proj = w * &self.a * w.transpose();
        let pk = &proj * k_mat;
        let pkp = &pk * &proj;
        let mut m = &proj / v + k_mat / (v * v) - (&pk + pk.transpose()) / (v * v) + pkp / (v * v);
        for j in 0..p {
            m[(j, j)] -= 1.0 / v;
        }
        m
    }
}

/// Per-class ML terms at `params`.
pub fn ml_terms(params: &ModelParams, moments: &SampleMoments) -> Result<Vec<MlClassTerms>> {
    params.validate()?;
    params.check_moments(moments)?;
    let w = &params.loading;
    let s = w.tr_mul(w);
    (0..params.n_classes())
        .map(|i| {
            let c = w.tr_mul(&(&moments.cov[i] * w));
            MlClassTerms::new(
                c,
                moments.trace(i),
                &s,
                &params.latent_cov[i],
                params.noise_var[i],
                params.p(),
            )
        })
        .collect()
}

/// `sum_i p ln 2 pi + ln det Sigma_i + tr(Sigma_i^{-1} K_i)`.
pub fn ml_objective(params: &ModelParams, moments: &SampleMoments) -> Result<f64> {
    Ok(ml_terms(params, moments)?
        .iter()
        .map(|t| t.value(params.p()))
        .sum())
}

/// `dL/dW = sum_i -2 M_i W G_i`.
pub fn ml_grad_w(params: &ModelParams, moments: &SampleMoments) -> Result<Mat> {
    let terms = ml_terms(params, moments)?;
    Ok(ml_grad_w_from(params, moments, &terms))
}

pub(crate) fn ml_grad_w_from(
    params: &ModelParams,
    moments: &SampleMoments,
    terms: &[MlClassTerms],
) -> Mat {
    let w = &params.loading;
    let mut grad = Mat::zeros(params.p(), params.k());
    for (i, t) in terms.iter().enumerate() {
        let m = t.m_matrix(w, &moments.cov[i]);
        grad -= (m * w * &params.latent_cov[i]) * 2.0;
    }
    grad
}

/// `dL/dG_i = -W^T M_i W`.
pub fn ml_grad_g(params: &ModelParams, moments: &SampleMoments) -> Result<Vec<Mat>> {
    let w = &params.loading;
    Ok(ml_terms(params, moments)?
        .iter()
        .enumerate()
        .map(|(i, t)| -sym(&w.tr_mul(&(t.m_matrix(w, &moments.cov[i]) * w))))
        .collect())
}

pub fn ml_grad_v(params: &ModelParams, moments: &SampleMoments) -> Result<Vec<f64>> {
    let w = &params.loading;
    let s = w.tr_mul(w);
    Ok(ml_terms(params, moments)?
        .iter()
        .map(|t| t.grad_v(&s, params.p()))
        .collect())
}

/// Mean per-observation Gaussian negative log-likelihood of centered rows
/// `data` (`n x p`) under class `class`:
/// `1/2 mean_x [p ln 2 pi + ln det Sigma + x^T Sigma^{-1} x]`.
///
/// Uses the determinant lemma and the Woodbury identity, `O(n p k + k^3)`.
pub fn negative_log_likelihood(params: &ModelParams, data: &Mat, class: usize) -> Result<f64> {
    params.check_class(class)?;
    if data.ncols() != params.p() {
        return Err(Error::Dimension(format!(
            "data has {} columns, model has {} variables",
            data.ncols(),
            params.p()
        )));
    }
    if data.nrows() == 0 {
        return Err(Error::InvalidArgument("no observations".into()));
    }
    let w = &params.loading;
    let s = w.tr_mul(w);
    let v = params.noise_var[class];
    let terms = MlClassTerms::new(
        Mat::zeros(params.k(), params.k()),
        0.0,
        &s,
        &params.latent_cov[class],
        v,
        params.p(),
    )?;
    let y = data * w;
    let ya = &y * &terms.a;
    let mut quad = 0.0;
    for r in 0..data.nrows() {
        let xx = data.row(r).norm_squared();
        let yay = y.row(r).dot(&ya.row(r));
        quad += (xx - yay) / v;
    }
    let n = data.nrows() as f64;
    let nll = 0.5 * (params.p() as f64 * LN_2PI + terms.ln_det_sigma + quad / n);
    if !nll.is_finite() {
        return Err(Error::NonFinite(format!(
            "negative log-likelihood of class {class} (degenerate covariance)"
        )));
    }
    Ok(nll)
}
