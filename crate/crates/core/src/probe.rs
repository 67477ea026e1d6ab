//! Multinomial logistic-regression probe for measuring how linearly separable a set of
//! features is.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// L2 penalty on the weights.
    pub l2: f64,
    /// Fraction of rows used for fitting; the rest are held out.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 0.5, l2: 1e-4, train_fraction: 0.7 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    /// Accuracy of always predicting the most frequent training class on held-out rows.
    pub majority_accuracy: f64,
}

/// Fit a softmax classifier on the leading rows by full-batch gradient descent and
/// score it on the rest. Features are standardized with training-row statistics.
pub fn linear_probe(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = features.len();
    if n != labels.len() || n < 2 || classes == 0 {
        return Err(Error::Validation("probe needs matching, non-trivial features and labels".into()));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::Validation("probe label out of range".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Validation("probe rows differ in width".into()));
    }
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for f in &features[..n_train] {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / n_train as f64;
        }
    }
    for f in &features[..n_train] {
        for ((s, x), m) in sd.iter_mut().zip(f).zip(&mean) {
            *s += (x - m) * (x - m) / n_train as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let x: Vec<Vec<f64>> =
        features.iter().map(|f| f.iter().zip(&mean).zip(&sd).map(|((x, m), s)| (x - m) / s).collect()).collect();

    let mut w = vec![vec![0.0; classes]; d];
    let mut b = vec![0.0; classes];
    let scores = |w: &[Vec<f64>], b: &[f64], row: &[f64]| -> Vec<f64> {
        let mut z = b.to_vec();
        for (xi, wi) in row.iter().zip(w) {
            for (zk, wk) in z.iter_mut().zip(wi) {
                *zk += xi * wk;
            }
        }
        z
    };
    for _ in 0..cfg.epochs {
        let mut gw = vec![vec![0.0; classes]; d];
        let mut gb = vec![0.0; classes];
        for (row, &y) in x[..n_train].iter().zip(labels) {
            let z = scores(&w, &b, row);
            let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
            let total: f64 = e.iter().sum();
            for k in 0..classes {
                let delta = e[k] / total - if k == y { 1.0 } else { 0.0 };
                gb[k] += delta / n_train as f64;
                for (gwi, xi) in gw.iter_mut().zip(row) {
                    gwi[k] += delta * xi / n_train as f64;
                }
            }
        }
        for (wi, gwi) in w.iter_mut().zip(&gw) {
            for (wk, gk) in wi.iter_mut().zip(gwi) {
                *wk -= cfg.lr * (gk + cfg.l2 * *wk);
            }
        }
        for (bk, gk) in b.iter_mut().zip(&gb) {
            *bk -= cfg.lr * gk;
        }
    }
    let predict = |row: &[f64]| {
        let z = scores(&w, &b, row);
        (0..classes).fold(0, |best, k| if z[k] > z[best] { k } else { best })
    };
    let accuracy = |range: std::ops::Range<usize>| {
        let len = range.len() as f64;
        range.filter(|&i| predict(&x[i]) == labels[i]).count() as f64 / len
    };
    let mut counts = vec![0usize; classes];
    for &l in &labels[..n_train] {
        counts[l] += 1;
    }
    let majority = (0..classes).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap_or(0);
    let majority_accuracy = labels[n_train..].iter().filter(|&&l| l == majority).count() as f64 / (n - n_train) as f64;
    Ok(ProbeResult { train_accuracy: accuracy(0..n_train), heldout_accuracy: accuracy(n_train..n), majority_accuracy })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn separable_clusters_are_classified() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers = [[3.0, 0.0], [0.0, 3.0], [-3.0, -3.0]];
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..300 {
            let k = i % 3;
            features.push(vec![centers[k][0] + rng.gen_range(-1.0..1.0), centers[k][1] + rng.gen_range(-1.0..1.0), 5.0]);
            labels.push(k);
        }
        let r = linear_probe(&features, &labels, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(r.heldout_accuracy, 1.0);
    }

    #[test]
    fn uninformative_features_stay_near_chance() {
        let features = vec![vec![1.0, 2.0]; 200];
        let labels: Vec<usize> = (0..200).map(|i| usize::from(i % 4 == 0)).collect();
        let r = linear_probe(&features, &labels, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(r.heldout_accuracy, r.majority_accuracy);
    }
}
