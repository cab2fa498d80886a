//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). The process exits non-zero on
//! a failed criterion only when `MODCONN_ACCEPTANCE_STRICT=1`; otherwise the
//! verdicts are reported and the run succeeds.

mod common;

use std::time::Instant;

use common::*;
use modconn::baselines::baseline_rows;
use modconn::directed::{pooled_structural_model, two_stage_fit};
use modconn::estimation::{self, fit, fit_moments, FitConfig, FittedModel};
use modconn::io::{read_dataset, write_dataset};
use modconn::linalg::ortho_residual;
use modconn::metrics::{
    adjusted_rand, directed_scores, heldout_nll_eval, loading_mse, row_labels, EvalReport,
};
use modconn::model::{
    self, grad_g, grad_v, grad_w, ml_grad_g, score_matching_objective, Workspace,
};
use modconn::simulation::{gen_directed, gen_gaussian_dataset, sample_from_truth, SimConfig};
use modconn::{DirectedFit, Estimator, Mat, ModelParams, SampleMoments};
use rayon::prelude::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn fmt_list(x: &[f64]) -> String {
    x.iter()
        .map(|v| format!("{v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn c1_gradients() -> Verdict {
    let start = Instant::now();
    let f: fn(&ModelParams, &SampleMoments) -> modconn::Result<f64> = score_matching_objective;
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = rng(seed);
        let w = random_loading(&mut rng, 8, 3);
        let params = random_params(&mut rng, w, 2);
        let m = random_moments(&mut rng, 8, 2, 40);
        let ws = Workspace::new(&params, &m).unwrap();
        let at = |q: &ModelParams| f(q, &m).unwrap();
        // W
        let gw = grad_w(&params, &ws);
        let mut fd = Vec::new();
        for j in 0..3 {
            for r in 0..8 {
                fd.push(central(
                    |h| {
                        let mut q = params.clone();
                        q.loading[(r, j)] += h;
                        at(&q)
                    },
                    FD_STEP,
                ));
            }
        }
        worst = worst.max(max_rel_err(gw.as_slice(), &fd));
        // G, symmetric perturbations
        for (i, g) in grad_g(&ws).iter().enumerate() {
            let mut fd = Vec::new();
            for b in 0..3 {
                for a in 0..3 {
                    let d = central(
                        |h| {
                            let mut q = params.clone();
                            q.latent_cov[i][(a, b)] += h;
                            if a != b {
                                q.latent_cov[i][(b, a)] += h;
                            }
                            at(&q)
                        },
                        FD_STEP,
                    );
                    fd.push(if a == b { d } else { d / 2.0 });
                }
            }
            worst = worst.max(max_rel_err(g.as_slice(), &fd));
        }
        // v
        let fd: Vec<f64> = (0..2)
            .map(|i| {
                central(
                    |h| {
                        let mut q = params.clone();
                        q.noise_var[i] += h;
                        at(&q)
                    },
                    FD_STEP,
                )
            })
            .collect();
        worst = worst.max(max_rel_err(&grad_v(&params, &ws), &fd));
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        pass: worst <= 1e-5 && secs < 30.0,
        detail: format!("max componentwise rel. error {worst:.2e} (<= 1e-5), {secs:.2} s (< 30 s)"),
    }
}

fn c2_stationarity() -> Verdict {
    let (mut sm_worst, mut ml_worst) = (0.0f64, 0.0f64);
    let mut clipped = 0;
    for seed in 0..100u64 {
        let mut rng = rng(10_000 + seed);
        let w = block_loading(&mut rng, 12, 3);
        let mut params = random_params(&mut rng, w, 3);
        let m = random_moments(&mut rng, 12, 3, 300);
        for i in 0..3 {
            let c = params.loading.tr_mul(&(&m.cov[i] * &params.loading));
            params.noise_var[i] = 0.5 * c.clone().symmetric_eigenvalues().min();
            let mut raw = c;
            for j in 0..3 {
                raw[(j, j)] -= params.noise_var[i];
            }
            let g = model::closed_form_g(&params.loading, &m, i, params.noise_var[i]).unwrap();
            if (&g - &raw).norm() > 1e-12 {
                clipped += 1;
            }
            params.latent_cov[i] = g;
        }
        let ws = Workspace::new(&params, &m).unwrap();
        for g in grad_g(&ws) {
            sm_worst = sm_worst.max(g.norm());
        }
        for g in ml_grad_g(&params, &m).unwrap() {
            ml_worst = ml_worst.max(g.norm());
        }
    }
    Verdict {
        pass: sm_worst <= 1e-8 && ml_worst <= 1e-8 && clipped == 0,
        detail: format!(
            "max ||grad_G||_F score matching {sm_worst:.2e}, likelihood {ml_worst:.2e} (<= 1e-8) over 300 classes"
        ),
    }
}

fn signed_permutations(k: usize) -> Vec<(Mat, bool)> {
    fn perms(prefix: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for j in 0..k {
            if !prefix.contains(&j) {
                prefix.push(j);
                perms(prefix, k, out);
                prefix.pop();
            }
        }
    }
    let mut all = Vec::new();
    perms(&mut Vec::new(), k, &mut all);
    let mut out = Vec::new();
    for p in all {
        for signs in 0u32..(1 << k) {
            let v = Mat::from_fn(k, k, |a, b| {
                if p[b] == a {
                    if signs >> b & 1 == 1 {
                        -1.0
                    } else {
                        1.0
                    }
                } else {
                    0.0
                }
            });
            out.push((v, signs == 0));
        }
    }
    out
}

fn c3_properties() -> Verdict {
    let candidates = signed_permutations(5);
    let results: Vec<(bool, bool, bool, f64)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let (ds, _) = gen_gaussian_dataset(50, 5, 10, 2000, 500 + seed).unwrap();
            let (params, diag) = fit(&ds, &FitConfig::new(5, seed)).unwrap();
            let w = &params.loading;
            let ortho = ortho_residual(w) <= 1e-6 && w.iter().all(|&x| x >= 0.0);
            let p1 = (0..w.nrows()).all(|r| w.row(r).iter().filter(|&&x| x > 1e-3).count() <= 1);
            let p2 = candidates.iter().all(|(v, is_perm)| {
                let wv = w * v;
                let keeps = wv.iter().all(|&x| x >= 0.0) && ortho_residual(&wv) <= 1e-6;
                keeps == *is_perm
            });
            let m = SampleMoments::from_dataset(&ds).unwrap();
            let j = score_matching_objective(&params, &m).unwrap();
            let jp =
                score_matching_objective(&params.permute_modules(&[3, 1, 4, 0, 2]), &m).unwrap();
            (
                diag.converged && ortho,
                p1,
                p2,
                (j - jp).abs() / j.abs().max(1.0),
            )
        })
        .collect();
    let converged = results.iter().filter(|r| r.0).count();
    let p1 = results.iter().filter(|r| r.0).all(|r| r.1);
    let p2 = results.iter().filter(|r| r.0).all(|r| r.2);
    let inv = results.iter().map(|r| r.3).fold(0.0, f64::max);
    Verdict {
        pass: converged > 0 && p1 && p2 && inv <= 1e-8,
        detail: format!(
            "{converged}/10 fits converged onto the manifold; Property 1 {p1}, Property 2 {p2} (3840 signed permutations); permutation invariance rel. {inv:.1e} (<= 1e-8)"
        ),
    }
}

fn c4_recovery_trend() -> Verdict {
    let start = Instant::now();
    let sizes = [100usize, 500, 2000, 10_000];
    let mut lmse = Vec::new();
    let mut gmse = Vec::new();
    let mut ari = Vec::new();
    for &n in &sizes {
        let rows: Vec<(f64, f64, f64)> = (0..20u64)
            .into_par_iter()
            .map(|seed| {
                let (ds, truth) = gen_gaussian_dataset(50, 5, 10, n, seed).unwrap();
                let (params, _) = fit(&ds, &FitConfig::new(5, seed)).unwrap();
                let r = EvalReport::against_truth(&params, &truth).unwrap();
                (
                    r.loading_mse.unwrap(),
                    r.latent_conn_mse_mean.unwrap(),
                    r.ari.unwrap(),
                )
            })
            .collect();
        lmse.push(mean(&rows.iter().map(|r| r.0).collect::<Vec<_>>()));
        gmse.push(mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>()));
        ari.push(mean(&rows.iter().map(|r| r.2).collect::<Vec<_>>()));
    }
    let secs = start.elapsed().as_secs_f64();
    let mono = |x: &[f64]| x.windows(2).all(|w| w[1] <= w[0]);
    let pass = mono(&lmse) && mono(&gmse) && ari[3] > ari[0] && secs < 900.0;
    Verdict {
        pass,
        detail: format!(
            "n = {sizes:?}: loading MSE [{}], latent MSE [{}], ARI [{}]; {secs:.0} s (< 900 s)",
            fmt_list(&lmse),
            fmt_list(&gmse),
            ari.iter()
                .map(|a| format!("{a:.6}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

fn c5_heldout_nll() -> Verdict {
    let rows: Vec<(f64, f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let (train, truth) = gen_gaussian_dataset(50, 5, 10, 100, 700 + seed).unwrap();
            let test = sample_from_truth(&truth, 1000, 800 + seed).unwrap();
            let (params, _) = fit(&train, &FitConfig::new(5, seed)).unwrap();
            let (_, ours) = heldout_nll_eval(&params, &test, &train.means()).unwrap();
            let base = baseline_rows(&train, &test).unwrap();
            (ours, base[0].mean, base[1].mean)
        })
        .collect();
    let vs_sample = rows.iter().filter(|r| r.0 < r.1).count();
    let vs_lw = rows.iter().filter(|r| r.0 < r.2).count();
    let avg = |f: fn(&(f64, f64, f64)) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    Verdict {
        pass: vs_sample >= 18 && vs_lw >= 14,
        detail: format!(
            "lower NLL than sample covariance in {vs_sample}/20 (>= 18), than Ledoit-Wolf in {vs_lw}/20 (>= 14); mean NLL model {:.3}, sample {:.3}, LW {:.3}",
            avg(|r| r.0),
            avg(|r| r.1),
            avg(|r| r.2)
        ),
    }
}

fn directed_run(n: usize, seed: u64) -> (f64, f64, f64) {
    let (ds, truth) = gen_directed(&SimConfig::new(50, 5, 1, n, seed)).unwrap();
    let fit = two_stage_fit(&ds, &FitConfig::new(5, seed)).unwrap();
    let (rho, bmse) = directed_scores(&fit, &truth).unwrap();
    let ari = adjusted_rand(&row_labels(&fit.params.loading), &truth.labels()).unwrap();
    (rho[0], bmse[0], ari)
}

fn c6_directed() -> Verdict {
    let big: Vec<_> = (0..20u64)
        .into_par_iter()
        .map(|s| directed_run(5000, s))
        .collect();
    let small: Vec<_> = (0..20u64)
        .into_par_iter()
        .map(|s| directed_run(500, s))
        .collect();
    let rho = mean(&big.iter().map(|r| r.0).collect::<Vec<_>>());
    let b_big = mean(&big.iter().map(|r| r.1).collect::<Vec<_>>());
    let b_small = mean(&small.iter().map(|r| r.1).collect::<Vec<_>>());
    let ari = mean(&big.iter().map(|r| r.2).collect::<Vec<_>>());
    Verdict {
        pass: rho >= 0.8 && b_big < b_small,
        detail: format!(
            "mean Spearman {rho:.3} (>= 0.8); B MSE n=5000 {b_big:.4} vs n=500 {b_small:.4}; stage-one ARI {ari:.3}"
        ),
    }
}

fn c7_multiclass() -> Verdict {
    let rows: Vec<(f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let (ds, truth) = gen_directed(&SimConfig::new(50, 5, 10, 2000, 900 + seed)).unwrap();
            let fit = two_stage_fit(&ds, &FitConfig::new(5, seed)).unwrap();
            let (rho, _) = directed_scores(&fit, &truth).unwrap();
            let pooled = pooled_structural_model(&ds, &fit.params.loading).unwrap();
            let naive = DirectedFit {
                structural: vec![pooled; ds.n_classes()],
                ..fit
            };
            let (rho_pooled, _) = directed_scores(&naive, &truth).unwrap();
            (mean(&rho), mean(&rho_pooled))
        })
        .collect();
    let per = mean(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
    let pooled = mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    Verdict {
        pass: per > pooled,
        detail: format!("mean order correlation per-class {per:.3} vs pooled {pooled:.3}"),
    }
}

fn slope(ps: &[f64], ts: &[f64]) -> f64 {
    let x: Vec<f64> = ps.iter().map(|p| p.ln()).collect();
    let y: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let (mx, my) = (mean(&x), mean(&y));
    let num: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

/// Seconds per inner iteration over the first (at most) 60 iterations of a
/// fit from the correlation-clustering start (single start, so no parallel
/// contention), best of several repetitions.
fn per_iteration(moments: &SampleMoments, estimator: Estimator, reps: usize) -> (f64, usize) {
    let cfg = FitConfig {
        outer_max: 3,
        inner_max: 20,
        ..FitConfig::new(5, 0).with_estimator(estimator)
    };
    let w0 = estimation::correlation_loading(moments, 5, 0);
    let mut best = (f64::INFINITY, 0);
    for _ in 0..reps {
        let diag = fit_moments(moments, &cfg, Some(w0.clone())).unwrap().1;
        let t = diag.seconds_per_iteration();
        if t < best.0 {
            best = (t, diag.total_inner());
        }
    }
    best
}

fn c8_complexity() -> Verdict {
    let ps = [50usize, 100, 200, 400];
    let mut sm = Vec::new();
    let mut ml = Vec::new();
    let mut iters = Vec::new();
    for &p in &ps {
        let (ds, _) = gen_gaussian_dataset(p, 5, 1, 10 * p, 1).unwrap();
        let m = SampleMoments::from_dataset(&ds).unwrap();
        let (t, n) = per_iteration(&m, Estimator::ScoreMatching, 3);
        sm.push(t);
        iters.push(n);
        let (t, n) = per_iteration(&m, Estimator::Mle, 2);
        ml.push(t);
        iters.push(n);
    }
    let pf: Vec<f64> = ps.iter().map(|&p| p as f64).collect();
    let (s_sm, s_ml) = (slope(&pf, &sm), slope(&pf, &ml));
    let (l_sm, l_ml) = (slope(&pf[2..], &sm[2..]), slope(&pf[2..], &ml[2..]));
    Verdict {
        pass: (s_sm - 2.0).abs() <= 0.4 && (s_ml - 3.0).abs() <= 0.4,
        detail: format!(
            "log-log slope score matching {s_sm:.2} (2 +- 0.4), likelihood {s_ml:.2} (3 +- 0.4); s/iter SM [{}], ML [{}]; slopes over p = 200..400 only: SM {l_sm:.2}, ML {l_ml:.2}; iterations SM/ML {iters:?}",
            fmt_list(&sm),
            fmt_list(&ml)
        ),
    }
}

fn c9_cross_estimator() -> Verdict {
    let rows: Vec<f64> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let (ds, _) = gen_gaussian_dataset(50, 5, 1, 100_000, 1000 + seed).unwrap();
            let cfg = FitConfig::new(5, seed);
            let (sm, _) = fit(&ds, &cfg).unwrap();
            let (ml, _) = fit(&ds, &cfg.clone().with_estimator(Estimator::Mle)).unwrap();
            loading_mse(&sm.loading, &ml.loading).unwrap()
        })
        .collect();
    let worst = rows.iter().copied().fold(0.0, f64::max);
    Verdict {
        pass: worst <= 1e-2,
        detail: format!(
            "max aligned W MSE between estimators {worst:.2e} (<= 1e-2), mean {:.2e}",
            mean(&rows)
        ),
    }
}

fn c10_determinism() -> Verdict {
    let (ds, truth) = gen_gaussian_dataset(30, 3, 4, 400, 77).unwrap();
    let cfg = FitConfig::new(3, 5);
    let bytes = || {
        let model: FittedModel = estimation::fit_model(&ds, &cfg, None).unwrap();
        let mut s = serde_json::to_string_pretty(&model).unwrap();
        s.push('\n');
        s.into_bytes()
    };
    let same_model = bytes() == bytes();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path(), Some(&truth)).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    let exact = back.classes.iter().zip(&ds.classes).all(|(a, b)| {
        a.shape() == b.shape()
            && a.iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }) && back.variable_names == ds.variable_names;
    Verdict {
        pass: same_model && exact,
        detail: format!(
            "identical model.json bytes {same_model}; bit-exact dataset round trip {exact}"
        ),
    }
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", c1_gradients),
        ("stationarity identity", c2_stationarity),
        ("identifiability properties", c3_properties),
        ("simulation recovery trend", c4_recovery_trend),
        ("held-out NLL dominance", c5_heldout_nll),
        ("directed recovery", c6_directed),
        ("multi-class advantage", c7_multiclass),
        ("complexity scaling", c8_complexity),
        ("cross-estimator equivalence", c9_cross_estimator),
        ("determinism and I/O", c10_determinism),
    ];
    let only: Option<usize> = std::env::var("MODCONN_ACCEPTANCE_ONLY")
        .ok()
        .and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let v = run();
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail
        );
    }
    println!("acceptance: {failed} criterion(s) failed");
    if failed > 0 && std::env::var("MODCONN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
