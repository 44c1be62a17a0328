use crate::error::{Error, Result};

/// Edit counts from a minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    /// Reference length.
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.ins + self.del
    }

    /// `(S + I + D) / N`; may exceed 1.
    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            f64::NAN
        } else {
            self.errors() as f64 / self.ref_len as f64
        }
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.sub += o.sub;
        self.ins += o.ins;
        self.del += o.del;
        self.ref_len += o.ref_len;
    }
}

/// Unnormalized Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (diag + usize::from(x != y)).min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

/// Word error rate of `hyp` against `reference` with the S/I/D breakdown of
/// one minimum-cost alignment (substitutions preferred on ties).
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<(f64, EditCounts)> {
    if reference.is_empty() {
        return Err(Error::validation("reference", "must contain at least one token"));
    }
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = (d[(i - 1) * w + j - 1] + cost)
                .min(d[(i - 1) * w + j] + 1)
                .min(d[i * w + j - 1] + 1);
        }
    }
    let mut counts = EditCounts {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[i * w + j] == d[(i - 1) * w + j - 1] + cost {
                counts.sub += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i * w + j] == d[(i - 1) * w + j] + 1 {
            counts.del += 1;
            i -= 1;
        } else {
            counts.ins += 1;
            j -= 1;
        }
    }
    debug_assert_eq!(counts.errors(), d[n * w + m]);
    Ok((counts.rate(), counts))
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Minimum edits by top-down recursion over every alignment choice.
    fn brute(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let keep = brute(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
        let del = brute(&a[1..], b, memo) + 1;
        let ins = brute(a, &b[1..], memo) + 1;
        let v = keep.min(del).min(ins);
        memo.insert((a.len(), b.len()), v);
        v
    }

    fn random_seq(rng: &mut ChaCha8Rng) -> Vec<u8> {
        let len = rng.gen_range(0..=8);
        (0..len).map(|_| rng.gen_range(0..4)).collect()
    }

    #[test]
    fn identical_sequences_score_zero() {
        let r = ["a", "b", "c"];
        assert_eq!(wer(&r, &r).unwrap().0, 0.0);
    }

    #[test]
    fn one_substitution_in_three() {
        let (rate, c) = wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap();
        assert!((rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((c.sub, c.ins, c.del), (1, 0, 0));
    }

    #[test]
    fn insertions_and_deletions_are_counted() {
        let (_, c) = wer(&["a", "b"], &["a", "b", "c", "d"]).unwrap();
        assert_eq!((c.sub, c.ins, c.del), (0, 2, 0));
        let (rate, c) = wer(&["a", "b", "c"], &[] as &[&str]).unwrap();
        assert_eq!((c.del, rate), (3, 1.0));
        let (rate, _) = wer(&["a"], &["x", "y", "z"]).unwrap();
        assert_eq!(rate, 3.0);
        assert!(wer(&[] as &[&str], &["a"]).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let a = random_seq(&mut rng);
            let b = random_seq(&mut rng);
            let expect = brute(&a, &b, &mut HashMap::new());
            assert_eq!(edit_distance(&a, &b), expect);
            if !a.is_empty() {
                let (_, c) = wer(&a, &b).unwrap();
                assert_eq!(c.errors(), expect);
                assert_eq!(c.ref_len, a.len());
                // Hypothesis length is consistent with the breakdown.
                assert_eq!(a.len() + c.ins - c.del, b.len());
            }
        }
    }

    #[test]
    fn distance_is_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let (a, b, c) = (random_seq(&mut rng), random_seq(&mut rng), random_seq(&mut rng));
            assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            assert_eq!(edit_distance(&a, &a), 0);
        }
    }
}
