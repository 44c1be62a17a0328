//! Linear softmax probe for accent information in frozen embeddings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::softmax_rows;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};
use crate::training::adam::Adam;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Fraction of groups (utterances) held out for testing.
    pub test_fraction: f64,
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            test_fraction: 0.3,
            iterations: 300,
            lr: 0.05,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = ProbeConfig::default();
        let p = ProbeConfig {
            test_fraction: cfg.get_or("probe_test_fraction", d.test_fraction)?,
            iterations: cfg.get_or("probe_iterations", d.iterations)?,
            lr: cfg.get_or("probe_lr", d.lr)?,
            l2: cfg.get_or("probe_l2", d.l2)?,
            seed: cfg.get_or("probe_seed", d.seed)?,
        };
        if !(p.test_fraction > 0.0 && p.test_fraction < 1.0) {
            return Err(Error::validation("probe_test_fraction", "must lie strictly between 0 and 1"));
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Largest class prior on the test rows.
    pub chance: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Trains a linear softmax classifier on `features` (one row per frame or
/// utterance) and reports held-out accuracy. Rows sharing a `group` id
/// (typically an utterance) always land on the same side of the split.
pub fn probe_accent(features: &Tensor, labels: &[usize], groups: &[usize], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = features.rows();
    if labels.len() != n || groups.len() != n {
        return Err(Error::shape("probe labels", n, labels.len()));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Data("probe needs at least two classes".into()));
    }

    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Data("probe needs at least two groups".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_test_groups = ((ids.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, ids.len() - 1);
    let test_groups: std::collections::HashSet<usize> = ids[..n_test_groups].iter().copied().collect();
    let (train, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|&r| !test_groups.contains(&groups[r]));

    let dim = features.cols();
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for &r in &train {
        for (m, v) in mean.iter_mut().zip(features.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &r in &train {
        for ((s, v), m) in std.iter_mut().zip(features.row(r)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-8));
    let gather = |rows: &[usize]| {
        let mut t = Tensor::zeros(rows.len(), dim + 1);
        for (i, &r) in rows.iter().enumerate() {
            let out = t.row_mut(i);
            for k in 0..dim {
                out[k] = (features.get(r, k) - mean[k]) / std[k];
            }
            out[dim] = 1.0;
        }
        t
    };
    let xtr = gather(&train);
    let xte = gather(&test);
    let ytr: Vec<usize> = train.iter().map(|&r| labels[r]).collect();
    let yte: Vec<usize> = test.iter().map(|&r| labels[r]).collect();

    let mut store = ParamStore::new();
    let w = store.add("probe.w", Tensor::zeros(dim + 1, classes));
    let mut opt = Adam::default();
    let inv_n = 1.0 / train.len() as f64;
    for _ in 0..cfg.iterations {
        let mut p = softmax_rows(&xtr.matmul(store.get(w)));
        for (i, &y) in ytr.iter().enumerate() {
            let row = p.row_mut(i);
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v *= inv_n);
        }
        let mut grad = Tensor::zeros(dim + 1, classes);
        gemm(&xtr, true, &p, false, &mut grad, 0.0);
        grad.add_scaled(store.get(w), cfg.l2);
        opt.step(&mut store, &[(w, grad)], cfg.lr)?;
    }

    let accuracy_of = |x: &Tensor, y: &[usize]| {
        let s = x.matmul(store.get(w));
        let hits = y.iter().enumerate().filter(|&(i, &l)| argmax(s.row(i)) == l).count();
        hits as f64 / y.len() as f64
    };
    let mut prior = vec![0usize; classes];
    yte.iter().for_each(|&l| prior[l] += 1);
    Ok(ProbeResult {
        accuracy: accuracy_of(&xte, &yte),
        chance: *prior.iter().max().unwrap() as f64 / yte.len() as f64,
        train_accuracy: accuracy_of(&xtr, &ytr),
        n_train: train.len(),
        n_test: test.len(),
    })
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};

    #[test]
    fn raw_synthetic_features_reveal_the_accent() {
        let c = generate_synthetic_corpus(&SyntheticSpec::default(), 300).unwrap();
        let rows: usize = c.utterances.iter().map(|u| u.features.len()).sum();
        let mut x = Tensor::zeros(rows, 16);
        let (mut labels, mut groups) = (Vec::new(), Vec::new());
        let mut r = 0;
        for (i, u) in c.utterances.iter().enumerate() {
            for t in 0..u.features.len() {
                x.row_mut(r).copy_from_slice(u.features.frames.row(t));
                labels.push(u.accent);
                groups.push(i);
                r += 1;
            }
        }
        let res = probe_accent(&x, &labels, &groups, &ProbeConfig::default()).unwrap();
        assert!(res.accuracy >= 0.9, "{res:?}");

        // Destroying the label signal drops accuracy to chance.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut shuffled: Vec<usize> = (0..c.utterances.len()).map(|_| rng.gen_range(0..3)).collect();
        shuffled.shuffle(&mut rng);
        let per_frame: Vec<usize> = groups.iter().map(|&g| shuffled[g]).collect();
        let res = probe_accent(&x, &per_frame, &groups, &ProbeConfig::default()).unwrap();
        assert!((res.accuracy - res.chance).abs() <= 0.1, "{res:?}");
    }

    #[test]
    fn chance_is_the_largest_test_prior() {
        let x = Tensor::from_vec(8, 1, vec![0.0; 8]);
        let labels = [0, 0, 0, 1, 0, 0, 0, 1];
        let groups = [0, 1, 2, 3, 4, 5, 6, 7];
        let cfg = ProbeConfig {
            test_fraction: 0.5,
            ..ProbeConfig::default()
        };
        let res = probe_accent(&x, &labels, &groups, &cfg).unwrap();
        assert_eq!(res.n_test, 4);
        assert!(res.chance >= 0.5);
    }

    #[test]
    fn single_class_input_is_rejected() {
        let x = Tensor::zeros(4, 2);
        assert!(probe_accent(&x, &[1, 1, 1, 1], &[0, 1, 2, 3], &ProbeConfig::default()).is_err());
    }
}
