//! Seeded synthetic data for the undirected (Gaussian latent) and directed
//! (latent linear non-Gaussian acyclic) regimes.
//!
//! Every generator is a pure function of its seed. Class `i` draws from its
//! own ChaCha stream `i + 1` of the master seed, and the loading matrix from
//! stream 0, so adding classes never perturbs the earlier ones.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMeta, MultiClassDataset};
use crate::{Error, Mat, Result};

const MAX_LOADING_ATTEMPTS: usize = 100;
/// Stream offset used when resampling fresh observations from a ground truth.
const RESAMPLE_STREAM_BASE: u64 = 1 << 32;

/// Structural model of one class in the directed regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueStructure {
    /// Latent indices from most upstream to most downstream.
    pub order: Vec<usize>,
    /// `B[j][r]` is the weight of `z_r` in the equation for `z_j`.
    #[serde(rename = "B", with = "crate::io::rows")]
    pub b: Mat,
}

impl TrueStructure {
    /// `(I - B)^{-1}`, the map from disturbances to latents.
    pub fn mixing(&self) -> Result<Mat> {
        let k = self.b.nrows();
        crate::linalg::inverse(&(Mat::identity(k, k) - &self.b))
    }

    /// Weights expressed for unit-variance latents (unit-variance
    /// disturbances assumed): `B_std[j][r] = B[j][r] sd(z_r) / sd(z_j)`.
    pub fn standardized_b(&self) -> Result<Mat> {
        let t = self.mixing()?;
        let cov = &t * t.transpose();
        let k = self.b.nrows();
        Ok(Mat::from_fn(k, k, |j, r| {
            self.b[(j, r)] * (cov[(r, r)] / cov[(j, j)]).sqrt()
        }))
    }
}

/// Generating parameters of a simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub regime: Regime,
    #[serde(rename = "W", with = "crate::io::rows")]
    pub loading: Mat,
    /// Latent covariance per class (population covariance of `z` in the
    /// directed regime).
    #[serde(rename = "G", with = "crate::io::rows_list")]
    pub latent_cov: Vec<Mat>,
    #[serde(rename = "v")]
    pub noise_var: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structural: Option<Vec<TrueStructure>>,
    pub seed: u64,
}

impl GroundTruth {
    /// Module label of every observed variable (row argmax of `W`).
    pub fn labels(&self) -> Vec<usize> {
        crate::metrics::row_labels(&self.loading)
    }

    pub fn params(&self) -> crate::ModelParams {
        crate::ModelParams {
            loading: self.loading.clone(),
            latent_cov: self.latent_cov.clone(),
            noise_var: self.noise_var.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Gaussian,
    Directed,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Regime::Gaussian),
            "directed" => Ok(Regime::Directed),
            other => Err(Error::InvalidArgument(format!("unknown regime {other:?}"))),
        }
    }
}

/// Full set of simulation knobs; the `gen_*` functions use the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub p: usize,
    pub k: usize,
    pub n_classes: usize,
    pub n: usize,
    pub seed: u64,
    pub noise_var: f64,
    /// Directed regime: probability that an admissible edge is present.
    pub edge_prob: f64,
    /// Directed regime: edge weight magnitudes are uniform on this range,
    /// with a random sign.
    pub weight_range: (f64, f64),
}

impl SimConfig {
    pub fn new(p: usize, k: usize, n_classes: usize, n: usize, seed: u64) -> Self {
        SimConfig {
            p,
            k,
            n_classes,
            n,
            seed,
            noise_var: 1.0,
            edge_prob: 0.5,
            weight_range: (0.3, 0.9),
        }
    }

    fn check(&self) -> Result<()> {
        if self.k == 0 || self.k > self.p {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= k <= p, got k = {}, p = {}",
                self.k, self.p
            )));
        }
        if self.n_classes == 0 {
            return Err(Error::InvalidArgument("need at least one class".into()));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::InvalidArgument(
                "noise variance must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn randn(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Random non-negative orthonormal loading: uniform entries, only the row
/// maximum kept, columns scaled to unit norm. Redrawn while any module is
/// empty.
pub fn gen_loading(p: usize, k: usize, seed: u64) -> Result<Mat> {
    gen_loading_with(p, k, &mut stream(seed, 0))
}

fn gen_loading_with(p: usize, k: usize, rng: &mut impl Rng) -> Result<Mat> {
    if k == 0 || k > p {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k <= p, got k = {k}, p = {p}"
        )));
    }
    for _ in 0..MAX_LOADING_ATTEMPTS {
        let u = Mat::from_fn(p, k, |_, _| rng.random::<f64>());
        let mut w = Mat::zeros(p, k);
        for r in 0..p {
            let (c, val) = crate::linalg::row_argmax(&u, r);
            w[(r, c)] = val;
        }
        if w.column_iter().any(|col| col.iter().all(|&x| x == 0.0)) {
            continue;
        }
        for mut col in w.column_iter_mut() {
            let n = col.norm();
            col /= n;
        }
        return Ok(w);
    }
    Err(Error::InvalidArgument(format!(
        "could not draw a loading with {k} non-empty modules over {p} variables in {MAX_LOADING_ATTEMPTS} attempts"
    )))
}

/// `L L^T` with `L` lower triangular, standard normal entries.
pub fn gen_latent_cov(k: usize, seed: u64) -> Mat {
    let l = lower_factor(k, &mut stream(seed, 0));
    &l * l.transpose()
}

fn lower_factor(k: usize, rng: &mut impl Rng) -> Mat {
    let mut l = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            l[(i, j)] = rng.sample(StandardNormal);
        }
    }
    l
}

/// Gaussian regime with unit noise variance.
pub fn gen_gaussian_dataset(
    p: usize,
    k: usize,
    n_classes: usize,
    n: usize,
    seed: u64,
) -> Result<(MultiClassDataset, GroundTruth)> {
    gen_gaussian(&SimConfig::new(p, k, n_classes, n, seed))
}

pub fn gen_gaussian(cfg: &SimConfig) -> Result<(MultiClassDataset, GroundTruth)> {
    cfg.check()?;
    let w = gen_loading_with(cfg.p, cfg.k, &mut stream(cfg.seed, 0))?;
    let mut classes = Vec::with_capacity(cfg.n_classes);
    let mut gs = Vec::with_capacity(cfg.n_classes);
    for i in 0..cfg.n_classes {
        let mut rng = stream(cfg.seed, i as u64 + 1);
        let l = lower_factor(cfg.k, &mut rng);
        let z = randn(&mut rng, cfg.n, cfg.k) * l.transpose();
        classes.push(observe(&z, &w, cfg.noise_var, &mut rng));
        gs.push(&l * l.transpose());
    }
    let truth = GroundTruth {
        regime: Regime::Gaussian,
        loading: w,
        latent_cov: gs,
        noise_var: vec![cfg.noise_var; cfg.n_classes],
        structural: None,
        seed: cfg.seed,
    };
    Ok((wrap(classes, cfg, "gaussian"), truth))
}

/// Directed regime with the default structural-weight law.
pub fn gen_directed_dataset(
    p: usize,
    k: usize,
    n_classes: usize,
    n: usize,
    seed: u64,
) -> Result<(MultiClassDataset, GroundTruth)> {
    gen_directed(&SimConfig::new(p, k, n_classes, n, seed))
}

pub fn gen_directed(cfg: &SimConfig) -> Result<(MultiClassDataset, GroundTruth)> {
    cfg.check()?;
    let w = gen_loading_with(cfg.p, cfg.k, &mut stream(cfg.seed, 0))?;
    let mut classes = Vec::with_capacity(cfg.n_classes);
    let mut gs = Vec::with_capacity(cfg.n_classes);
    let mut structs = Vec::with_capacity(cfg.n_classes);
    for i in 0..cfg.n_classes {
        let mut rng = stream(cfg.seed, i as u64 + 1);
        let mut order: Vec<usize> = (0..cfg.k).collect();
        order.shuffle(&mut rng);
        let mut b = Mat::zeros(cfg.k, cfg.k);
        let (lo, hi) = cfg.weight_range;
        for later in 1..cfg.k {
            for earlier in 0..later {
                if rng.random::<f64>() < cfg.edge_prob {
                    let mag = rng.random_range(lo..=hi);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    b[(order[later], order[earlier])] = sign * mag;
                }
            }
        }
        let s = TrueStructure { order, b };
        let t = s.mixing()?;
        let e = logistic_disturbances(cfg.n, cfg.k, &mut rng);
        let z = e * t.transpose();
        classes.push(observe(&z, &w, cfg.noise_var, &mut rng));
        gs.push(&t * t.transpose());
        structs.push(s);
    }
    let truth = GroundTruth {
        regime: Regime::Directed,
        loading: w,
        latent_cov: gs,
        noise_var: vec![cfg.noise_var; cfg.n_classes],
        structural: Some(structs),
        seed: cfg.seed,
    };
    Ok((wrap(classes, cfg, "directed"), truth))
}

/// Fresh observations from an existing ground truth (e.g. a held-out set),
/// `n` rows per class.
pub fn sample_from_truth(truth: &GroundTruth, n: usize, seed: u64) -> Result<MultiClassDataset> {
    let k = truth.loading.ncols();
    let mut classes = Vec::with_capacity(truth.latent_cov.len());
    for (i, g) in truth.latent_cov.iter().enumerate() {
        let mut rng = stream(seed, RESAMPLE_STREAM_BASE + i as u64);
        let z = match (&truth.regime, &truth.structural) {
            (Regime::Directed, Some(structs)) => {
                let t = structs[i].mixing()?;
                logistic_disturbances(n, k, &mut rng) * t.transpose()
            }
            _ => {
                let factor = covariance_factor(g)?;
                randn(&mut rng, n, k) * factor.transpose()
            }
        };
        classes.push(observe(&z, &truth.loading, truth.noise_var[i], &mut rng));
    }
    let mut ds = MultiClassDataset::new(classes)?;
    ds.meta = DatasetMeta {
        seed: Some(seed),
        generator: Some(format!("{:?}-resample", truth.regime).to_lowercase()),
        k: Some(k),
    };
    Ok(ds)
}

fn covariance_factor(g: &Mat) -> Result<Mat> {
    if let Some(ch) = g.clone().cholesky() {
        return Ok(ch.l());
    }
    let spec = crate::linalg::Spectrum::of(g);
    if spec.min() < -1e-10 * spec.max().abs().max(1.0) {
        return Err(Error::IllConditioned("latent covariance is not PSD".into()));
    }
    let mut f = spec.vectors.clone();
    for (j, &d) in spec.values.iter().enumerate() {
        f.column_mut(j).scale_mut(d.max(0.0).sqrt());
    }
    Ok(f)
}

/// Standard logistic draws scaled to unit variance.
fn logistic_disturbances(n: usize, k: usize, rng: &mut impl Rng) -> Mat {
    let scale = 3f64.sqrt() / std::f64::consts::PI;
    Mat::from_fn(n, k, |_, _| {
        let u: f64 = rng.sample(Open01);
        scale * (u / (1.0 - u)).ln()
    })
}

/// `X = Z W^T + sqrt(v) E`.
fn observe(z: &Mat, w: &Mat, v: f64, rng: &mut impl Rng) -> Mat {
    let noise = randn(rng, z.nrows(), w.nrows());
    z * w.transpose() + noise * v.sqrt()
}

fn wrap(classes: Vec<Mat>, cfg: &SimConfig, generator: &str) -> MultiClassDataset {
    let p = cfg.p;
    MultiClassDataset {
        classes,
        variable_names: (0..p).map(|j| format!("x{j}")).collect(),
        meta: DatasetMeta {
            seed: Some(cfg.seed),
            generator: Some(generator.to_string()),
            k: Some(cfg.k),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{ortho_residual, Spectrum};

    #[test]
    fn loading_has_one_entry_per_row_and_orthonormal_columns() {
        for seed in 0..50 {
            let w = gen_loading(20, 4, seed).unwrap();
            for r in 0..20 {
                assert_eq!(w.row(r).iter().filter(|&&x| x != 0.0).count(), 1);
            }
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!(ortho_residual(&w) < 1e-12);
        }
    }

    #[test]
    fn loading_module_sizes_at_p50_k5() {
        let mut sizes = vec![0usize; 5];
        for seed in 0..200 {
            let w = gen_loading(50, 5, seed).unwrap();
            for (c, col) in w.column_iter().enumerate() {
                let s = col.iter().filter(|&&x| x > 0.0).count();
                assert!(s > 0);
                sizes[c] += s;
            }
        }
        for s in sizes {
            let mean = s as f64 / 200.0;
            assert!((mean - 10.0).abs() < 1.0, "{mean}");
        }
    }

    #[test]
    fn single_module_loading() {
        let w = gen_loading(7, 1, 3).unwrap();
        assert!(w.iter().all(|&x| x > 0.0));
        assert!((w.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loading_gives_up_when_modules_cannot_fill() {
        // p = k = 12: probability that every row picks a distinct column is
        // 12!/12^12 ~ 5e-5, so 100 attempts essentially always fail.
        assert!(gen_loading(12, 12, 0).is_err());
    }

    #[test]
    fn latent_cov_is_psd() {
        for seed in 0..1000 {
            let g = gen_latent_cov(5, seed);
            assert!(Spectrum::of(&g).min() >= -1e-10);
        }
    }

    #[test]
    fn latent_cov_scalar_mean_is_one() {
        let m: f64 = (0..10_000)
            .map(|s| gen_latent_cov(1, s)[(0, 0)])
            .sum::<f64>()
            / 1e4;
        assert!((m - 1.0).abs() < 0.05, "{m}");
    }

    #[test]
    fn latent_cov_signs_are_balanced() {
        let mut pos = 0;
        let mut total = 0;
        for seed in 0..2000 {
            let g = gen_latent_cov(4, seed);
            for i in 0..4 {
                for j in 0..i {
                    total += 1;
                    if g[(i, j)] > 0.0 {
                        pos += 1;
                    }
                }
            }
        }
        let frac = pos as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.03, "{frac}");
    }

    #[test]
    fn gaussian_empirical_covariance_matches_model() {
        let (ds, truth) = gen_gaussian_dataset(6, 2, 1, 1_000_000, 7).unwrap();
        let m = crate::dataset::SampleMoments::from_dataset(&ds).unwrap();
        let sigma = crate::model::model_covariance(&truth.params(), 0).unwrap();
        let rel = (&m.cov[0] - &sigma).norm() / sigma.norm();
        assert!(rel < 1e-2, "{rel}");
    }

    #[test]
    fn classes_share_loading_but_not_latent_cov() {
        let (ds, truth) = gen_gaussian_dataset(50, 5, 10, 20, 1).unwrap();
        assert_eq!(ds.n_classes(), 10);
        assert_eq!(truth.latent_cov.len(), 10);
        assert!((&truth.latent_cov[0] - &truth.latent_cov[1]).amax() > 1e-3);
    }

    #[test]
    fn minimal_sample_size() {
        let (ds, _) = gen_gaussian_dataset(5, 2, 2, 2, 4).unwrap();
        assert_eq!(ds.classes[0].shape(), (2, 5));
        let m = crate::dataset::SampleMoments::from_dataset(&ds).unwrap();
        let rank = Spectrum::of(&m.cov[0])
            .values
            .iter()
            .filter(|&&d| d > 1e-10)
            .count();
        assert!(rank <= 2);
    }

    #[test]
    fn same_seed_same_bits() {
        let (a, ta) = gen_directed_dataset(12, 3, 2, 40, 99).unwrap();
        let (b, tb) = gen_directed_dataset(12, 3, 2, 40, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = gen_directed_dataset(12, 3, 2, 40, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn directed_latents_are_leptokurtic() {
        // Disturbances are unit-variance logistic; check on the exogenous
        // latent of a large sample.
        let mut rng = stream(5, 9);
        let e = logistic_disturbances(100_000, 1, &mut rng);
        let n = e.nrows() as f64;
        let m = e.sum() / n;
        let m2 = e.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let m4 = e.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
        assert!(m4 / (m2 * m2) - 3.0 > 0.5);
        assert!((m2 - 1.0).abs() < 0.02);
    }

    #[test]
    fn directed_structure_is_acyclic_under_order() {
        let (_, truth) = gen_directed_dataset(50, 5, 10, 10, 3).unwrap();
        for s in truth.structural.as_ref().unwrap() {
            let mut pos = [0; 5];
            for (t, &j) in s.order.iter().enumerate() {
                pos[j] = t;
            }
            for j in 0..5 {
                for r in 0..5 {
                    if s.b[(j, r)] != 0.0 {
                        assert!(pos[r] < pos[j]);
                        assert!((0.3..=0.9).contains(&s.b[(j, r)].abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn empty_graph_gives_uncorrelated_latents() {
        let mut cfg = SimConfig::new(10, 3, 1, 20_000, 8);
        cfg.edge_prob = 0.0;
        let (_, truth) = gen_directed(&cfg).unwrap();
        assert_eq!(truth.structural.as_ref().unwrap()[0].b, Mat::zeros(3, 3));
        let mut rng = stream(1, 2);
        let z = logistic_disturbances(20_000, 3, &mut rng);
        let c = z.tr_mul(&z) / 20_000.0;
        let bound = 3.0 / (20_000f64).sqrt();
        assert!(c[(0, 1)].abs() < bound && c[(0, 2)].abs() < bound && c[(1, 2)].abs() < bound);
    }

    #[test]
    fn resampling_reuses_truth() {
        let (_, truth) = gen_gaussian_dataset(8, 2, 3, 10, 2).unwrap();
        let held = sample_from_truth(&truth, 15, 77).unwrap();
        assert_eq!(held.n_classes(), 3);
        assert_eq!(held.classes[2].shape(), (15, 8));
    }
}
