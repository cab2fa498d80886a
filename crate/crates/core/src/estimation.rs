//! Constrained estimation of the loading matrix, latent covariances and noise
//! variances.
//!
//! Orthonormality of `W` is enforced with an augmented Lagrangian
//!
//! ```text
//! J~(W) = J(W, G, v) + tr(Lambda (W^T W - I)) + rho/2 ||W^T W - I||_F^2
//! ```
//!
//! Each inner iteration takes a projected (non-negative) Armijo gradient
//! step on `W`, resets every `G_i` to its closed form `psd(W^T K_i W - v_i I)`
//! and takes a projected Armijo step on every `v_i`. After each inner loop the
//! multipliers move by `rho (W^T W - I)`.
//!
//! `J` is either the score-matching objective (`O(p^2 k)` per iteration) or
//! the Gaussian negative log-likelihood (`O(p^3)` per iteration, through the
//! dense `p x p` matrices `M_i`).

use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{MultiClassDataset, SampleMoments};
use crate::linalg::{ortho_residual, Spectrum};
use crate::metrics::heldout_nll_eval;
use crate::model::{
    check_shift, closed_form_g_from_c, project_nonneg, shrinkage_matrix, sm_grad_v, sm_grad_w,
    sm_value, MlClassTerms, ModelParams, V_MIN,
};
use crate::{Error, Mat, Result, Vector};

/// Objective minimized by the fit loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    #[default]
    #[serde(rename = "sm")]
    ScoreMatching,
    #[serde(rename = "mle")]
    Mle,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::ScoreMatching => "sm",
            Estimator::Mle => "mle",
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sm" | "score_matching" => Ok(Estimator::ScoreMatching),
            "mle" | "ml" => Ok(Estimator::Mle),
            other => Err(Error::InvalidArgument(format!(
                "unknown estimator {other:?} (expected sm or mle)"
            ))),
        }
    }
}

/// Sufficient-decrease line search parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Armijo {
    pub c: f64,
    pub backtrack: f64,
    /// First trial step; later trials start from the previous accepted step.
    pub eta0: f64,
}

impl Default for Armijo {
    fn default() -> Self {
        Armijo {
            c: 1e-4,
            backtrack: 0.5,
            eta0: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub k: usize,
    pub rho0: f64,
    pub rho_growth: f64,
    pub rho_max: f64,
    pub inner_max: usize,
    pub outer_max: usize,
    pub grad_tol: f64,
    pub ortho_tol: f64,
    pub armijo: Armijo,
    pub seed: u64,
    pub estimator: Estimator,
    pub init: Init,
    /// Additional random starting points; the fit with the lowest final
    /// objective is kept.
    pub restarts: usize,
}

/// Starting point of the loading matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Spectral clustering of the variables on the pooled correlation matrix.
    #[default]
    Spectral,
    /// `|Z|` with standard-normal `Z`, columns scaled to unit norm.
    Random,
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(Init::Spectral),
            "random" => Ok(Init::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown initialization {other:?} (expected spectral or random)"
            ))),
        }
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k: 2,
            rho0: 1.0,
            rho_growth: 2.0,
            rho_max: 1e6,
            inner_max: 100,
            outer_max: 200,
            grad_tol: 1e-6,
            ortho_tol: 1e-4,
            armijo: Armijo::default(),
            seed: 0,
            estimator: Estimator::ScoreMatching,
            init: Init::Spectral,
            restarts: 0,
        }
    }
}

impl FitConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        FitConfig {
            k,
            seed,
            ..Default::default()
        }
    }

    pub fn with_estimator(mut self, estimator: Estimator) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rho0", self.rho0),
            ("rho_max", self.rho_max),
            ("grad_tol", self.grad_tol),
            ("ortho_tol", self.ortho_tol),
            ("armijo.c", self.armijo.c),
            ("armijo.eta0", self.armijo.eta0),
        ];
        for (name, x) in positive {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {x}"
                )));
            }
        }
        if !(self.rho_growth > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rho_growth must exceed 1, got {}",
                self.rho_growth
            )));
        }
        if !(self.armijo.backtrack > 0.0 && self.armijo.backtrack < 1.0) {
            return Err(Error::InvalidArgument(
                "armijo.backtrack must lie in (0, 1)".into(),
            ));
        }
        if self.k == 0 || self.inner_max == 0 || self.outer_max == 0 {
            return Err(Error::InvalidArgument(
                "k, inner_max and outer_max must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-outer-iteration traces of a fit.
///
/// Wall times are not serialized so that saved models are reproducible byte
/// for byte.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Objective `J` (without the constraint terms).
    pub objective: Vec<f64>,
    /// `||W^T W - I||_F` before the multiplier update.
    pub ortho_residual: Vec<f64>,
    /// Norm of the projected gradient of `J~` at the last inner iteration,
    /// relative to `max(1, |J~|)`.
    pub grad_norm: Vec<f64>,
    pub rho: Vec<f64>,
    pub inner_iterations: Vec<usize>,
    #[serde(skip)]
    pub wall_time: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Whether the final `W` was retracted onto the non-negative Stiefel
    /// manifold (one entry per row, unit columns).
    pub retracted: bool,
    /// Residual and objective of the returned parameters.
    pub final_ortho_residual: f64,
    pub final_objective: f64,
    /// Whether any returned latent covariance needed eigenvalue clipping.
    pub clipped: bool,
    /// Index of the starting point that produced the result, and the final
    /// objective reached from every start (NaN for failed starts).
    pub start: usize,
    pub start_objectives: Vec<f64>,
}

impl FitDiagnostics {
    pub fn total_inner(&self) -> usize {
        self.inner_iterations.iter().sum()
    }

    /// Mean wall time of one inner iteration, in seconds.
    pub fn seconds_per_iteration(&self) -> f64 {
        self.wall_time.iter().sum::<f64>() / self.total_inner().max(1) as f64
    }
}

/// A fitted model together with what is needed to score new data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub estimator: Estimator,
    pub k: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub params: ModelParams,
    /// Per-class training means used to center new observations.
    #[serde(with = "vectors")]
    pub means: Vec<Vector>,
    /// Fraction of each class held out (tail) from training, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<f64>,
    pub diagnostics: FitDiagnostics,
}

mod vectors {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(vs: &[Vector], ser: S) -> Result<S::Ok, S::Error> {
        vs.iter()
            .map(|v| v.iter().copied().collect::<Vec<f64>>())
            .collect::<Vec<_>>()
            .serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<Vector>, D::Error> {
        Ok(Vec::<Vec<f64>>::deserialize(de)?
            .into_iter()
            .map(Vector::from_vec)
            .collect())
    }
}

/// `W_0 = |Z|` with standard-normal `Z`, columns scaled to unit norm.
pub fn initial_loading(p: usize, k: usize, seed: u64) -> Mat {
    let mut rng = crate::simulation::stream(seed, INIT_STREAM);
    let mut w = Mat::from_fn(p, k, |_, _| rng.sample::<f64, _>(StandardNormal).abs());
    for mut col in w.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    w
}

/// Clusters the variables by the direction of their rows of the
/// class-averaged correlation matrix (diagonal removed): off the diagonal,
/// rows of variables in the same module are positive multiples of each other
/// in the population. Each variable then loads on its cluster with weight
/// proportional to its row norm.
pub fn correlation_loading(moments: &SampleMoments, k: usize, seed: u64) -> Mat {
    let p = moments.p();
    let corr = mean_correlation(moments, false);
    let norms: Vec<f64> = corr.row_iter().map(|r| r.norm()).collect();
    let dirs = Mat::from_fn(p, p, |r, c| corr[(r, c)] / norms[r].max(f64::MIN_POSITIVE));
    cluster_loading(&dirs, &norms, k, seed)
}

/// Spectral clustering of the variables: rows of the leading `k`
/// eigenvectors of the class-averaged correlation matrix, compared by
/// direction.
pub fn eigen_loading(moments: &SampleMoments, k: usize, seed: u64) -> Mat {
    let p = moments.p();
    let spec = Spectrum::of(&mean_correlation(moments, true));
    // ascending order: the leading eigenvectors are the last k columns
    let u = spec.vectors.columns(p - k, k).into_owned();
    let norms: Vec<f64> = u.row_iter().map(|r| r.norm()).collect();
    let dirs = Mat::from_fn(p, k, |r, c| u[(r, c)] / norms[r].max(f64::MIN_POSITIVE));
    cluster_loading(&dirs, &norms, k, seed)
}

fn mean_correlation(moments: &SampleMoments, with_diagonal: bool) -> Mat {
    let p = moments.p();
    let mut corr = Mat::zeros(p, p);
    for cov in &moments.cov {
        let d: Vec<f64> = (0..p)
            .map(|j| cov[(j, j)].max(f64::MIN_POSITIVE).sqrt())
            .collect();
        corr += Mat::from_fn(p, p, |a, b| {
            if a == b && !with_diagonal {
                0.0
            } else {
                cov[(a, b)] / (d[a] * d[b])
            }
        });
    }
    corr / moments.n_classes() as f64
}

/// Loads every variable on its k-means cluster of `dirs` with weight
/// `weights[r]`, then normalizes the columns.
fn cluster_loading(dirs: &Mat, weights: &[f64], k: usize, seed: u64) -> Mat {
    let mut rng = crate::simulation::stream(seed, INIT_STREAM);
    let labels = crate::cluster::cosine_kmeans(dirs, k, KMEANS_STARTS, &mut rng);
    let mut w = Mat::zeros(dirs.nrows(), k);
    for (r, &c) in labels.iter().enumerate() {
        w[(r, c)] = weights[r].max(f64::EPSILON);
    }
    for mut col in w.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    w
}

/// Starting loadings tried by a fit without an explicit initialization.
pub fn starting_loadings(moments: &SampleMoments, cfg: &FitConfig) -> Vec<Mat> {
    let (p, k) = (moments.p(), cfg.k);
    let mut starts = match cfg.init {
        Init::Spectral => vec![
            correlation_loading(moments, k, cfg.seed),
            eigen_loading(moments, k, cfg.seed),
        ],
        Init::Random => vec![initial_loading(p, k, cfg.seed)],
    };
    for r in 0..cfg.restarts as u64 {
        let seed = cfg.seed.wrapping_add(RESTART_SEED_STEP.wrapping_mul(r + 1));
        starts.push(initial_loading(p, k, seed));
    }
    starts
}

const RESTART_SEED_STEP: u64 = 0x9E37_79B9_7F4A_7C15;

const INIT_STREAM: u64 = 0x1417;
const KMEANS_STARTS: usize = 10;
const MAX_BACKTRACKS: usize = 60;
const STEP_MIN: f64 = 1e-14;
const STEP_MAX: f64 = 1e12;
const MAX_RELATIVE_MOVE: f64 = 0.5;

/// Quantities that depend on `W` only.
struct Point {
    w: Mat,
    gram: Mat,
    kw: Vec<Mat>,
    c: Vec<Mat>,
}

impl Point {
    fn new(w: Mat, moments: &SampleMoments) -> Self {
        let kw: Vec<Mat> = moments.cov.iter().map(|k| k * &w).collect();
        let c = kw.iter().map(|kw| w.tr_mul(kw)).collect();
        Point {
            gram: w.tr_mul(&w),
            w,
            kw,
            c,
        }
    }

    fn residual(&self) -> Mat {
        let mut r = self.gram.clone();
        for j in 0..r.nrows() {
            r[(j, j)] -= 1.0;
        }
        r
    }
}

/// Latent covariances with cached spectra.
struct Latent {
    g: Mat,
    spectrum: Spectrum,
}

impl Latent {
    fn new(g: Mat) -> Self {
        Latent {
            spectrum: Spectrum::of(&g),
            g,
        }
    }
}

struct Problem<'a> {
    moments: &'a SampleMoments,
    estimator: Estimator,
    p: usize,
}

impl Problem<'_> {
    fn class_value(&self, pt: &Point, i: usize, lat: &Latent, v: f64) -> Result<f64> {
        let tr = self.moments.trace(i);
        match self.estimator {
            Estimator::ScoreMatching => {
                check_shift(&lat.spectrum, v)?;
                let a = shrinkage_matrix(&lat.spectrum, v);
                Ok(sm_value(&a, &pt.c[i], &pt.gram, tr, v, self.p))
            }
            Estimator::Mle => {
                let t = MlClassTerms::new(pt.c[i].clone(), tr, &pt.gram, &lat.g, v, self.p)?;
                Ok(t.value(self.p))
            }
        }
    }

    fn class_grad_v(&self, pt: &Point, i: usize, lat: &Latent, v: f64) -> Result<f64> {
        let tr = self.moments.trace(i);
        match self.estimator {
            Estimator::ScoreMatching => {
                check_shift(&lat.spectrum, v)?;
                let a = shrinkage_matrix(&lat.spectrum, v);
                let d_tilde = lat.spectrum.map(|d| -d / ((d + v) * (d + v)));
                Ok(sm_grad_v(&a, &d_tilde, &pt.c[i], &pt.gram, tr, v, self.p))
            }
            Estimator::Mle => {
                let t = MlClassTerms::new(pt.c[i].clone(), tr, &pt.gram, &lat.g, v, self.p)?;
                Ok(t.grad_v(&pt.gram, self.p))
            }
        }
    }

    fn objective(&self, pt: &Point, lat: &[Latent], v: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (i, (l, &vi)) in lat.iter().zip(v).enumerate() {
            total += self.class_value(pt, i, l, vi)?;
        }
        Ok(total)
    }

    /// `(J, J~)` at `pt`.
    fn augmented(&self, pt: &Point, lat: &[Latent], v: &[f64], al: &AlState) -> Result<(f64, f64)> {
        let j = self.objective(pt, lat, v)?;
        let r = pt.residual();
        let pen = crate::linalg::trace_product(&al.lambda, &r) + 0.5 * al.rho * r.norm_squared();
        Ok((j, j + pen))
    }

    /// Gradient of `J~` with respect to `W`.
    fn grad_w(&self, pt: &Point, lat: &[Latent], v: &[f64], al: &AlState) -> Result<Mat> {
        let w = &pt.w;
        let mut grad = match self.estimator {
            Estimator::ScoreMatching => {
                let mut g = Mat::zeros(w.nrows(), w.ncols());
                for (i, (l, &vi)) in lat.iter().zip(v).enumerate() {
                    check_shift(&l.spectrum, vi)?;
                    let a = shrinkage_matrix(&l.spectrum, vi);
                    g += sm_grad_w(w, &pt.kw[i], &a, &pt.c[i], &pt.gram, vi);
                }
                g
            }
            Estimator::Mle => {
                let mut g = Mat::zeros(w.nrows(), w.ncols());
                for (i, (l, &vi)) in lat.iter().zip(v).enumerate() {
                    let t = MlClassTerms::new(
                        pt.c[i].clone(),
                        self.moments.trace(i),
                        &pt.gram,
                        &l.g,
                        vi,
                        self.p,
                    )?;
                    let m = t.m_matrix(w, &self.moments.cov[i]);
                    g -= (m * w * &l.g) * 2.0;
                }
                g
            }
        };
        let r = pt.residual();
        grad += w * (r * (2.0 * al.rho) + &al.lambda * 2.0);
        Ok(grad)
    }
}

struct AlState {
    lambda: Mat,
    rho: f64,
}

/// Mutable optimizer state: current iterate plus remembered step sizes.
struct State {
    pt: Point,
    lat: Vec<Latent>,
    v: Vec<f64>,
    clipped: bool,
    eta_w: f64,
    eta_v: Vec<f64>,
    prev: Option<(Mat, Mat)>,
    prev_v: Vec<Option<(f64, f64)>>,
}

impl State {
    fn params(&self) -> ModelParams {
        ModelParams {
            loading: self.pt.w.clone(),
            latent_cov: self.lat.iter().map(|l| l.g.clone()).collect(),
            noise_var: self.v.clone(),
        }
    }

    fn reset_latent(&mut self) {
        let mut clipped = false;
        self.lat = self
            .pt
            .c
            .iter()
            .zip(&self.v)
            .map(|(c, &v)| {
                let (g, spectrum, cl) = closed_form_g_from_c(c, v);
                clipped |= cl;
                Latent { g, spectrum }
            })
            .collect();
        self.clipped = clipped;
    }
}

fn has_empty_column(w: &Mat) -> bool {
    w.column_iter().any(|c| c.iter().all(|&x| x == 0.0))
}

fn projected_norm(x: &Mat, grad: &Mat) -> f64 {
    x.iter()
        .zip(grad.iter())
        .map(|(&xi, &gi)| {
            let d = xi - (xi - gi).max(0.0);
            d * d
        })
        .sum::<f64>()
}

impl Problem<'_> {
    /// Projected Armijo step on `W`; returns the squared projected-gradient
    /// norm and the value of `J~` at the starting point.
    fn step_w(&self, st: &mut State, al: &AlState, armijo: &Armijo) -> Result<(f64, f64)> {
        let (_, f0) = self.augmented(&st.pt, &st.lat, &st.v, al)?;
        let grad = self.grad_w(&st.pt, &st.lat, &st.v, al)?;
        let pg = projected_norm(&st.pt.w, &grad);
        // Barzilai-Borwein trial step from the last accepted move.
        let mut eta = match &st.prev {
            Some((w_prev, g_prev)) => {
                let s = &st.pt.w - w_prev;
                let y = &grad - g_prev;
                let sy = s.dot(&y);
                if sy > 0.0 {
                    (s.norm_squared() / sy).clamp(STEP_MIN, STEP_MAX)
                } else {
                    (st.eta_w * 2.0).min(STEP_MAX)
                }
            }
            None => st.eta_w,
        };
        // Never move further than a fraction of the current loading in one
        // trial: a long projected step can zero whole columns, and W = 0 is a
        // stationary point the iteration cannot leave.
        let gnorm = grad.norm();
        if gnorm > 0.0 {
            eta = eta.min(MAX_RELATIVE_MOVE * st.pt.w.norm() / gnorm);
        }
        for _ in 0..MAX_BACKTRACKS {
            let w_new = project_nonneg(&(&st.pt.w - &grad * eta));
            let dir = &w_new - &st.pt.w;
            let decrease = grad.dot(&dir);
            if dir.norm_squared() == 0.0 {
                break;
            }
            if has_empty_column(&w_new) {
                eta *= armijo.backtrack;
                continue;
            }
            let pt = Point::new(w_new, self.moments);
            if let Ok((_, f)) = self.augmented(&pt, &st.lat, &st.v, al) {
                if f <= f0 + armijo.c * decrease {
                    st.prev = Some((st.pt.w.clone(), grad));
                    st.pt = pt;
                    st.eta_w = eta;
                    return Ok((pg, f0));
                }
            }
            eta *= armijo.backtrack;
            if eta < STEP_MIN {
                break;
            }
        }
        Ok((pg, f0))
    }

    /// Projected Armijo step on every `v_i` onto `[V_MIN, inf)`; returns the
    /// squared projected-gradient norm at the starting point.
    fn step_v(&self, st: &mut State, armijo: &Armijo) -> Result<f64> {
        let mut pg = 0.0;
        for i in 0..st.v.len() {
            let v0 = st.v[i];
            let f0 = self.class_value(&st.pt, i, &st.lat[i], v0)?;
            let g = self.class_grad_v(&st.pt, i, &st.lat[i], v0)?;
            let d0 = v0 - (v0 - g).max(V_MIN);
            pg += d0 * d0;
            // secant trial step from the previous move of this class
            let mut eta = match st.prev_v[i] {
                Some((vp, gp)) if (g - gp) * (v0 - vp) > 0.0 => {
                    ((v0 - vp) / (g - gp)).clamp(STEP_MIN, STEP_MAX)
                }
                _ => (st.eta_v[i] * 2.0).min(STEP_MAX),
            };
            st.prev_v[i] = Some((v0, g));
            for _ in 0..MAX_BACKTRACKS {
                let v1 = (v0 - eta * g).max(V_MIN);
                if v1 == v0 {
                    break;
                }
                if let Ok(f1) = self.class_value(&st.pt, i, &st.lat[i], v1) {
                    if f1 <= f0 + armijo.c * g * (v1 - v0) {
                        st.v[i] = v1;
                        st.eta_v[i] = eta;
                        break;
                    }
                }
                eta *= armijo.backtrack;
                if eta < STEP_MIN {
                    break;
                }
            }
        }
        Ok(pg)
    }
}

/// Keeps the largest entry of every row, zeroes the rest and rescales
/// columns to unit norm. Returns `None` if a column would be empty.
pub fn retract(w: &Mat) -> Option<Mat> {
    let mut out = Mat::zeros(w.nrows(), w.ncols());
    for r in 0..w.nrows() {
        let (c, x) = crate::linalg::row_argmax(w, r);
        if x > 0.0 {
            out[(r, c)] = x;
        }
    }
    for mut col in out.column_iter_mut() {
        let norm = col.norm();
        if norm == 0.0 {
            return None;
        }
        col /= norm;
    }
    Some(out)
}

/// Fits from precomputed moments. Without an explicit initial loading every
/// start from [`starting_loadings`] is run (in parallel) and the result with
/// the lowest final objective is returned, ties going to the earlier start.
pub fn fit_moments(
    moments: &SampleMoments,
    cfg: &FitConfig,
    init: Option<Mat>,
) -> Result<(ModelParams, FitDiagnostics)> {
    cfg.validate()?;
    moments.check_usable()?;
    let p = moments.p();
    if cfg.k > p {
        return Err(Error::InvalidArgument(format!(
            "k = {} exceeds the number of variables p = {p}",
            cfg.k
        )));
    }
    if let Some(w) = init {
        if w.shape() != (p, cfg.k) {
            return Err(Error::Dimension(format!(
                "initial loading is {:?}, expected ({p}, {})",
                w.shape(),
                cfg.k
            )));
        }
        return fit_from(moments, cfg, project_nonneg(&w));
    }
    let starts = starting_loadings(moments, cfg);
    let fits = starts
        .into_par_iter()
        .map(|w0| fit_from(moments, cfg, w0))
        .collect::<Vec<_>>();
    let mut best: Option<(usize, ModelParams, FitDiagnostics)> = None;
    let mut objectives = Vec::with_capacity(fits.len());
    let mut first_err = None;
    for (i, r) in fits.into_iter().enumerate() {
        match r {
            Ok((params, diag)) => {
                objectives.push(diag.final_objective);
                let better = best
                    .as_ref()
                    .is_none_or(|(_, _, b)| diag.final_objective < b.final_objective);
                if better {
                    best = Some((i, params, diag));
                }
            }
            Err(e) => {
                objectives.push(f64::NAN);
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some((i, params, mut diag)) => {
            diag.start = i;
            diag.start_objectives = objectives;
            Ok((params, diag))
        }
        None => Err(first_err.expect("at least one start")),
    }
}

/// One constrained fit from the starting loading `w0`.
fn fit_from(
    moments: &SampleMoments,
    cfg: &FitConfig,
    w0: Mat,
) -> Result<(ModelParams, FitDiagnostics)> {
    let p = moments.p();
    let problem = Problem {
        moments,
        estimator: cfg.estimator,
        p,
    };
    let n = moments.n_classes();
    let v0: Vec<f64> = (0..n)
        .map(|i| (0.1 * moments.trace(i) / p as f64).max(V_MIN))
        .collect();
    let mut st = State {
        pt: Point::new(w0, moments),
        lat: (0..n)
            .map(|_| Latent::new(Mat::identity(cfg.k, cfg.k)))
            .collect(),
        v: v0,
        clipped: false,
        eta_w: cfg.armijo.eta0,
        eta_v: vec![cfg.armijo.eta0; n],
        prev: None,
        prev_v: vec![None; n],
    };
    let mut al = AlState {
        lambda: Mat::zeros(cfg.k, cfg.k),
        rho: cfg.rho0,
    };
    let mut diag = FitDiagnostics::default();
    let mut best: Option<(ModelParams, f64, f64)> = None;
    let mut prev_residual = f64::INFINITY;
    for _ in 0..cfg.outer_max {
        let start = Instant::now();
        let mut inner = 0;
        let mut pg = f64::INFINITY;
        while inner < cfg.inner_max {
            let (pg_w, f) = problem.step_w(&mut st, &al, &cfg.armijo)?;
            st.reset_latent();
            let pg_v = problem.step_v(&mut st, &cfg.armijo)?;
            inner += 1;
            pg = (pg_w + pg_v).sqrt() / f.abs().max(1.0);
            if !pg.is_finite() {
                return Err(Error::NonFinite("gradient of the fit objective".into()));
            }
            if pg <= cfg.grad_tol {
                break;
            }
        }
        let j = problem.objective(&st.pt, &st.lat, &st.v)?;
        let r = st.pt.residual();
        let res = r.norm();
        diag.objective.push(j);
        diag.ortho_residual.push(res);
        diag.grad_norm.push(pg);
        diag.rho.push(al.rho);
        diag.inner_iterations.push(inner);
        diag.wall_time.push(start.elapsed().as_secs_f64());
        diag.iterations += 1;

        let feasible = res <= cfg.ortho_tol;
        let better = match &best {
            None => true,
            Some((_, bres, bj)) => {
                let bfeas = *bres <= cfg.ortho_tol;
                match (feasible, bfeas) {
                    (true, true) => j < *bj,
                    (true, false) => true,
                    (false, true) => false,
                    (false, false) => res < *bres,
                }
            }
        };
        if better {
            best = Some((st.params(), res, j));
        }
        if feasible && pg <= cfg.grad_tol {
            diag.converged = true;
            break;
        }
        al.lambda += &r * al.rho;
        if res > cfg.ortho_tol && res > 0.25 * prev_residual {
            al.rho = (al.rho * cfg.rho_growth).min(cfg.rho_max);
        }
        prev_residual = res;
        // Multiplier moves change the objective; restart the step memory.
        st.prev = None;
        st.prev_v.iter_mut().for_each(|x| *x = None);
    }
    let params = if diag.converged {
        st.params()
    } else {
        best.map(|b| b.0).unwrap_or_else(|| st.params())
    };
    finish(&problem, params, cfg, diag)
}

/// Retracts `W` onto the non-negative Stiefel manifold when that keeps every
/// module non-empty, then re-solves `(G, v)` for the final loading.
fn finish(
    problem: &Problem,
    params: ModelParams,
    cfg: &FitConfig,
    mut diag: FitDiagnostics,
) -> Result<(ModelParams, FitDiagnostics)> {
    let (w, retracted) = match retract(&params.loading) {
        Some(w) => (w, true),
        None => (params.loading.clone(), false),
    };
    let n = params.n_classes();
    let mut st = State {
        pt: Point::new(w, problem.moments),
        lat: Vec::new(),
        v: params.noise_var.clone(),
        clipped: false,
        eta_w: cfg.armijo.eta0,
        eta_v: vec![cfg.armijo.eta0; n],
        prev: None,
        prev_v: vec![None; n],
    };
    st.reset_latent();
    for _ in 0..cfg.inner_max {
        let pg = problem.step_v(&mut st, &cfg.armijo)?;
        st.reset_latent();
        let f = problem.objective(&st.pt, &st.lat, &st.v)?;
        if pg.sqrt() / f.abs().max(1.0) <= cfg.grad_tol {
            break;
        }
    }
    diag.retracted = retracted;
    diag.clipped = st.clipped;
    diag.final_ortho_residual = ortho_residual(&st.pt.w);
    diag.final_objective = problem.objective(&st.pt, &st.lat, &st.v)?;
    Ok((st.params(), diag))
}

/// Fits the model to `dataset` with the configured estimator.
pub fn fit(dataset: &MultiClassDataset, cfg: &FitConfig) -> Result<(ModelParams, FitDiagnostics)> {
    let moments = SampleMoments::from_dataset(dataset)?;
    fit_moments(&moments, cfg, None)
}

pub fn fit_score_matching(
    dataset: &MultiClassDataset,
    cfg: &FitConfig,
) -> Result<(ModelParams, FitDiagnostics)> {
    fit(
        dataset,
        &cfg.clone().with_estimator(Estimator::ScoreMatching),
    )
}

pub fn fit_mle(
    dataset: &MultiClassDataset,
    cfg: &FitConfig,
) -> Result<(ModelParams, FitDiagnostics)> {
    fit(dataset, &cfg.clone().with_estimator(Estimator::Mle))
}

/// Fits on the leading `1 - holdout` of every class (or all data) and keeps
/// the training means for scoring new observations.
pub fn fit_model(
    dataset: &MultiClassDataset,
    cfg: &FitConfig,
    holdout: Option<f64>,
) -> Result<FittedModel> {
    let train = match holdout {
        Some(f) => dataset.tail_split(f)?.0,
        None => dataset.clone(),
    };
    let (params, diagnostics) = fit(&train, cfg)?;
    Ok(FittedModel {
        estimator: cfg.estimator,
        k: cfg.k,
        seed: cfg.seed,
        params,
        means: train.means(),
        holdout,
        diagnostics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub k: usize,
    pub heldout_nll_mean: f64,
    pub heldout_nll: Vec<f64>,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best_k: usize,
    pub holdout: f64,
    pub table: Vec<TuneRow>,
}

/// NLL differences below this are treated as ties (smallest `k` wins).
pub const TUNE_TIE_TOL: f64 = 1e-6;

/// Selects `k` by mean held-out NLL on a tail split of every class.
pub fn tune_k(
    dataset: &MultiClassDataset,
    k_grid: &[usize],
    cfg: &FitConfig,
    holdout_frac: f64,
) -> Result<TuneResult> {
    if k_grid.is_empty() {
        return Err(Error::InvalidArgument("empty k grid".into()));
    }
    if let Some(&k) = k_grid.iter().find(|&&k| k == 0 || k > dataset.p()) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} in grid is outside 1..={}",
            dataset.p()
        )));
    }
    let (train, heldout) = dataset.tail_split(holdout_frac)?;
    let moments = SampleMoments::from_dataset(&train)?;
    let means = train.means();
    let mut table = k_grid
        .par_iter()
        .map(|&k| {
            let cfg = FitConfig { k, ..cfg.clone() };
            let (params, diag) = fit_moments(&moments, &cfg, None)?;
            let (per, mean) = heldout_nll_eval(&params, &heldout, &means)?;
            Ok(TuneRow {
                k,
                heldout_nll_mean: mean,
                heldout_nll: per,
                converged: diag.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    table.sort_by_key(|r| r.k);
    table.dedup_by_key(|r| r.k);
    let min = table
        .iter()
        .map(|r| r.heldout_nll_mean)
        .fold(f64::INFINITY, f64::min);
    let best_k = table
        .iter()
        .find(|r| r.heldout_nll_mean <= min + TUNE_TIE_TOL)
        .map(|r| r.k)
        .expect("non-empty table");
    Ok(TuneResult {
        best_k,
        holdout: holdout_frac,
        table,
    })
}
