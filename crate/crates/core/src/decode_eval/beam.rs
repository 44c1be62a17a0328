//! Beam search over any autoregressive scorer.

use crate::error::{Error, Result};

/// An autoregressive model queried one step at a time.
pub trait StepScorer {
    type State: Clone;

    fn initial_state(&self) -> Self::State;
    /// Size of the output distribution.
    fn vocab(&self) -> usize;
    fn sos(&self) -> usize;
    fn eos(&self) -> usize;
    /// For each `(prev[k], states[k])`, the next-token log-probabilities and
    /// the successor state.
    fn step(&self, prev: &[usize], states: &[&Self::State]) -> (Vec<Vec<f64>>, Vec<Self::State>);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Rank by score divided by length instead of the raw score.
    pub length_norm: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 20,
            max_len: 64,
            length_norm: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::validation("beam_size", "must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::validation("max_len", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids after `<sos>`; ends with `<eos>` when complete.
    pub tokens: Vec<usize>,
    /// Sum of the chosen log-probabilities.
    pub score: f64,
    pub complete: bool,
}

impl Hypothesis {
    fn rank_key(&self, norm: bool) -> f64 {
        if norm && !self.tokens.is_empty() {
            self.score / self.tokens.len() as f64
        } else {
            self.score
        }
    }

    /// Tokens without the trailing `<eos>`.
    pub fn labels(&self) -> &[usize] {
        if self.complete {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// Best first.
    pub hypotheses: Vec<Hypothesis>,
    /// No hypothesis reached `<eos>`; the list holds the best partial ones.
    pub partial: bool,
}

impl BeamResult {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }
}

/// Higher rank first; equal ranks fall back to lexicographic token order.
fn better(a: &Hypothesis, b: &Hypothesis, norm: bool) -> std::cmp::Ordering {
    b.rank_key(norm)
        .total_cmp(&a.rank_key(norm))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Standard beam search from `<sos>`; `<sos>` is never emitted.
///
/// At every step the `beam_size` best extensions of the live hypotheses are
/// kept; those ending in `<eos>` are set aside as finished. Search stops at
/// `max_len` or when no live hypothesis can still outrank the best finished
/// one (only possible without length normalization, since scores never
/// increase).
pub fn beam_search<S: StepScorer>(scorer: &S, cfg: &BeamConfig) -> Result<BeamResult> {
    cfg.validate()?;
    let (sos, eos, vocab) = (scorer.sos(), scorer.eos(), scorer.vocab());
    let norm = cfg.length_norm;
    let mut live: Vec<(Hypothesis, S::State, usize)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            complete: false,
        },
        scorer.initial_state(),
        sos,
    )];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let prev: Vec<usize> = live.iter().map(|l| l.2).collect();
        let states: Vec<&S::State> = live.iter().map(|l| &l.1).collect();
        let (scores, next_states) = scorer.step(&prev, &states);
        let mut cands: Vec<(Hypothesis, usize)> = Vec::with_capacity(live.len() * vocab);
        for (k, (hyp, _, _)) in live.iter().enumerate() {
            for (y, &lp) in scores[k].iter().enumerate() {
                if y == sos || lp == f64::NEG_INFINITY || lp.is_nan() {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(y);
                cands.push((
                    Hypothesis {
                        tokens,
                        score: hyp.score + lp,
                        complete: y == eos,
                    },
                    k,
                ));
            }
        }
        cands.sort_by(|a, b| better(&a.0, &b.0, norm));
        cands.truncate(cfg.beam_size);
        let mut next_live = Vec::new();
        for (hyp, k) in cands {
            if hyp.complete {
                finished.push(hyp);
            } else {
                let y = *hyp.tokens.last().unwrap();
                next_live.push((hyp, next_states[k].clone(), y));
            }
        }
        live = next_live;
        if !norm {
            let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|l| l.0.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }
    if finished.is_empty() {
        let mut partial: Vec<Hypothesis> = live.into_iter().map(|l| l.0).collect();
        if partial.is_empty() {
            return Err(Error::Data("beam search produced no hypothesis".into()));
        }
        partial.sort_by(|a, b| better(a, b, norm));
        return Ok(BeamResult {
            hypotheses: partial,
            partial: true,
        });
    }
    finished.sort_by(|a, b| better(a, b, norm));
    finished.truncate(cfg.beam_size);
    Ok(BeamResult {
        hypotheses: finished,
        partial: false,
    })
}

/// Greedy decoding, for reference.
pub fn greedy<S: StepScorer>(scorer: &S, max_len: usize) -> Hypothesis {
    let mut state = scorer.initial_state();
    let mut prev = scorer.sos();
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        complete: false,
    };
    for _ in 0..max_len {
        let (scores, mut next) = scorer.step(&[prev], &[&state]);
        let (y, lp) = scores[0]
            .iter()
            .enumerate()
            .filter(|&(y, _)| y != scorer.sos())
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (y, &lp)| if lp > best.1 { (y, lp) } else { best });
        if y == usize::MAX {
            break;
        }
        hyp.tokens.push(y);
        hyp.score += lp;
        state = next.remove(0);
        prev = y;
        if y == scorer.eos() {
            hyp.complete = true;
            break;
        }
    }
    hyp
}

#[cfg(test)]
pub(crate) mod tests {
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// A random autoregressive model over `{0, 1, eos = 2}` with `sos = 3`:
    /// the next-token distribution is a seeded function of the prefix.
    pub(crate) struct ToyModel {
        pub seed: u64,
    }

    impl ToyModel {
        pub(crate) fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
            let mut h = DefaultHasher::new();
            (self.seed, prefix).hash(&mut h);
            let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
            let logits: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
            let mut lp: Vec<f64> = logits.iter().map(|v| v - lse).collect();
            lp.push(f64::NEG_INFINITY);
            lp
        }
    }

    impl StepScorer for ToyModel {
        type State = Vec<usize>;

        fn initial_state(&self) -> Vec<usize> {
            Vec::new()
        }
        fn vocab(&self) -> usize {
            4
        }
        fn sos(&self) -> usize {
            3
        }
        fn eos(&self) -> usize {
            2
        }
        fn step(&self, prev: &[usize], states: &[&Vec<usize>]) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
            let mut out = Vec::new();
            let mut next = Vec::new();
            for (&p, s) in prev.iter().zip(states) {
                let mut prefix = (*s).clone();
                if p != 3 {
                    prefix.push(p);
                }
                out.push(self.log_probs(&prefix));
                next.push(prefix);
            }
            (out, next)
        }
    }

    /// Best complete sequence of at most `max_len` emissions, by enumeration.
    pub(crate) fn exhaustive_best(m: &ToyModel, max_len: usize) -> (Vec<usize>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut frontier = vec![(Vec::new(), 0.0)];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for (prefix, score) in &frontier {
                let lp = m.log_probs(prefix);
                for y in 0..3 {
                    let mut s = prefix.clone();
                    s.push(y);
                    let sc = score + lp[y];
                    if y == 2 {
                        if sc > best.1 {
                            best = (s, sc);
                        }
                    } else {
                        next.push((s, sc));
                    }
                }
            }
            frontier = next;
        }
        best
    }

    #[test]
    fn wide_beam_equals_exhaustive_search() {
        for seed in 0..50 {
            let m = ToyModel { seed };
            let (tokens, score) = exhaustive_best(&m, 3);
            let r = beam_search(
                &m,
                &BeamConfig {
                    beam_size: 27,
                    max_len: 3,
                    length_norm: false,
                },
            )
            .unwrap();
            assert!(!r.partial);
            assert_eq!(r.best().tokens, tokens);
            assert_eq!(r.best().score, score);
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..30 {
            let m = ToyModel { seed };
            let g = greedy(&m, 6);
            let r = beam_search(
                &m,
                &BeamConfig {
                    beam_size: 1,
                    max_len: 6,
                    length_norm: false,
                },
            )
            .unwrap();
            assert_eq!(r.best().tokens, g.tokens);
            assert_eq!(r.partial, !g.complete);
        }
    }

    #[test]
    fn wider_beam_never_scores_worse() {
        for seed in 0..30 {
            let m = ToyModel { seed };
            let mut last = f64::NEG_INFINITY;
            for beam in [1, 2, 3, 5, 9, 27] {
                let r = beam_search(
                    &m,
                    &BeamConfig {
                        beam_size: beam,
                        max_len: 3,
                        length_norm: false,
                    },
                )
                .unwrap();
                if !r.partial {
                    assert!(r.best().score >= last - 1e-12);
                    last = r.best().score;
                }
            }
        }
    }

    /// Puts all mass on 0, 1, 0, eos.
    struct Forced;

    impl StepScorer for Forced {
        type State = usize;
        fn initial_state(&self) -> usize {
            0
        }
        fn vocab(&self) -> usize {
            4
        }
        fn sos(&self) -> usize {
            3
        }
        fn eos(&self) -> usize {
            2
        }
        fn step(&self, _prev: &[usize], states: &[&usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
            let seq = [0, 1, 0, 2];
            let out = states
                .iter()
                .map(|&&s| {
                    let mut lp = vec![f64::NEG_INFINITY; 4];
                    lp[seq[s.min(3)]] = 0.0;
                    lp
                })
                .collect();
            (out, states.iter().map(|&&s| s + 1).collect())
        }
    }

    #[test]
    fn forced_model_returns_its_sequence_with_zero_score() {
        let r = beam_search(&Forced, &BeamConfig::default()).unwrap();
        assert_eq!(r.best().tokens, vec![0, 1, 0, 2]);
        assert_eq!(r.best().score, 0.0);
        assert_eq!(r.best().labels(), &[0, 1, 0]);
    }

    #[test]
    fn unfinished_search_returns_flagged_partial() {
        let r = beam_search(
            &Forced,
            &BeamConfig {
                beam_size: 4,
                max_len: 2,
                length_norm: false,
            },
        )
        .unwrap();
        assert!(r.partial);
        assert_eq!(r.best().tokens, vec![0, 1]);
        assert!(!r.best().complete);
    }

    #[test]
    fn ties_break_lexicographically() {
        struct Flat;
        impl StepScorer for Flat {
            type State = ();
            fn initial_state(&self) {}
            fn vocab(&self) -> usize {
                4
            }
            fn sos(&self) -> usize {
                3
            }
            fn eos(&self) -> usize {
                2
            }
            fn step(&self, prev: &[usize], _: &[&()]) -> (Vec<Vec<f64>>, Vec<()>) {
                (prev.iter().map(|_| vec![-1.0; 4]).collect(), vec![(); prev.len()])
            }
        }
        // All continuations score the same, so pruning keeps the
        // lexicographically smallest prefixes and <eos> (id 2) never survives.
        let r = beam_search(
            &Flat,
            &BeamConfig {
                beam_size: 2,
                max_len: 3,
                length_norm: false,
            },
        )
        .unwrap();
        assert!(r.partial);
        let tokens: Vec<&[usize]> = r.hypotheses.iter().map(|h| h.tokens.as_slice()).collect();
        assert_eq!(tokens, [&[0, 0, 0][..], &[0, 0, 1][..]]);
    }

    #[test]
    fn rejects_zero_beam_or_length() {
        let m = ToyModel { seed: 0 };
        for (b, l) in [(0, 3), (3, 0)] {
            let cfg = BeamConfig {
                beam_size: b,
                max_len: l,
                length_norm: false,
            };
            assert!(beam_search(&m, &cfg).is_err());
        }
    }
}
