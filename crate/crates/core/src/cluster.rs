//! Small k-means on unit vectors, used to seed the loading matrix.

use rand::Rng;

use crate::Mat;

/// Best of `starts` k-means runs (k-means++ seeding, Lloyd iterations) on
/// the rows of `x`, with squared Euclidean distance. Every cluster is
/// non-empty when `k <= rows`. Returns a label per row.
pub fn cosine_kmeans(x: &Mat, k: usize, starts: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = x.nrows();
    assert!(k >= 1 && k <= n, "need 1 <= k <= rows");
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..starts.max(1) {
        let (cost, labels) = lloyd(x, k, rng);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, labels));
        }
    }
    best.expect("at least one start").1
}

fn dist2(x: &Mat, r: usize, centers: &Mat, c: usize) -> f64 {
    x.row(r)
        .iter()
        .zip(centers.row(c).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn nearest(x: &Mat, r: usize, centers: &Mat) -> (usize, f64) {
    (0..centers.nrows())
        .map(|c| (c, dist2(x, r, centers, c)))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
}

fn lloyd(x: &Mat, k: usize, rng: &mut impl Rng) -> (f64, Vec<usize>) {
    let (n, d) = x.shape();
    let mut centers = Mat::zeros(k, d);
    centers.set_row(0, &x.row(rng.random_range(0..n)));
    for c in 1..k {
        let w: Vec<f64> = (0..n)
            .map(|r| {
                (0..c)
                    .map(|j| dist2(x, r, &centers, j))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (r, &wr) in w.iter().enumerate() {
                if t < wr {
                    idx = r;
                    break;
                }
                t -= wr;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.set_row(c, &x.row(pick));
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (r, label) in labels.iter_mut().enumerate() {
            let (c, _) = nearest(x, r, &centers);
            if *label != c {
                *label = c;
                changed = true;
            }
        }
        // refill empty clusters with the point farthest from its center
        for c in 0..k {
            if !labels.contains(&c) {
                let far = (0..n)
                    .filter(|&r| labels.iter().filter(|&&l| l == labels[r]).count() > 1)
                    .map(|r| (r, dist2(x, r, &centers, labels[r])))
                    .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
                    .0;
                labels[far] = c;
                centers.set_row(c, &x.row(far));
                changed = true;
            }
        }
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&r| labels[r] == c).collect();
            let mut mean = Mat::zeros(1, d);
            for &r in &members {
                mean += x.row(r);
            }
            centers.set_row(c, &(mean / members.len() as f64).row(0));
        }
        if !changed {
            break;
        }
    }
    let cost = (0..n).map(|r| dist2(x, r, &centers, labels[r])).sum();
    (cost, labels)
}
