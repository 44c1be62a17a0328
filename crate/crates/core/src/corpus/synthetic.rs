//! Synthetic accented corpus with known ground truth.
//!
//! Each token owns a prototype frame. An utterance is a token sequence where
//! every token repeats its prototype for a sampled number of frames. Accent `c`
//! then applies a fixed affine map `x -> A_c x + b_c` to every frame, followed
//! by Gaussian noise. Accent 0 is the reference accent (`A_0 = I`, `b_0 = 0`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Corpus, FeatureSequence, Utterance};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_accents: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Inclusive range of frames each token occupies.
    pub frames_per_token: (usize, usize),
    /// Inclusive range of tokens per utterance.
    pub tokens_per_utterance: (usize, usize),
    /// Scale of the accent map's deviation from identity and of its bias.
    pub accent_strength: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_accents: 3,
            vocab_size: 20,
            feature_dim: 16,
            frames_per_token: (2, 4),
            tokens_per_utterance: (3, 6),
            accent_strength: 1.0,
            noise: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::validation(name, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("num_accents", self.num_accents)?;
        positive("vocab_size", self.vocab_size)?;
        positive("feature_dim", self.feature_dim)?;
        positive("frames_per_token_min", self.frames_per_token.0)?;
        positive("tokens_min", self.tokens_per_utterance.0)?;
        if self.frames_per_token.1 < self.frames_per_token.0 {
            return Err(Error::validation("frames_per_token_max", "below the minimum"));
        }
        if self.tokens_per_utterance.1 < self.tokens_per_utterance.0 {
            return Err(Error::validation("tokens_max", "below the minimum"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::validation("noise", "must be finite and non-negative"));
        }
        if !(self.accent_strength >= 0.0 && self.accent_strength.is_finite()) {
            return Err(Error::validation("accent_strength", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = SyntheticSpec::default();
        let spec = SyntheticSpec {
            num_accents: cfg.get_or("num_accents", d.num_accents)?,
            vocab_size: cfg.get_or("vocab_size", d.vocab_size)?,
            feature_dim: cfg.get_or("feature_dim", d.feature_dim)?,
            frames_per_token: (
                cfg.get_or("frames_per_token_min", d.frames_per_token.0)?,
                cfg.get_or("frames_per_token_max", d.frames_per_token.1)?,
            ),
            tokens_per_utterance: (
                cfg.get_or("tokens_min", d.tokens_per_utterance.0)?,
                cfg.get_or("tokens_max", d.tokens_per_utterance.1)?,
            ),
            accent_strength: cfg.get_or("accent_strength", d.accent_strength)?,
            noise: cfg.get_or("noise", d.noise)?,
            seed: cfg.get_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn token_name(k: usize) -> String {
        format!("w{k}")
    }

    pub fn accent_name(c: usize) -> String {
        format!("A{c}")
    }
}

/// The fixed prototypes and accent maps shared by every utterance.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    /// `V x F`.
    pub prototypes: Tensor,
    /// Per accent, `F x F` applied as `A x`.
    pub transforms: Vec<Tensor>,
    /// Per accent, length `F`.
    pub biases: Vec<Vec<f64>>,
}

impl SyntheticWorld {
    pub fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let f = spec.feature_dim;
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let prototypes = Tensor::from_vec(
            spec.vocab_size,
            f,
            (0..spec.vocab_size * f).map(|_| normal()).collect(),
        );
        let mut transforms = Vec::with_capacity(spec.num_accents);
        let mut biases = Vec::with_capacity(spec.num_accents);
        let s = spec.accent_strength;
        for c in 0..spec.num_accents {
            let mut a = Tensor::zeros(f, f);
            let mut b = vec![0.0; f];
            for i in 0..f {
                a.set(i, i, 1.0);
            }
            let dev: Vec<f64> = (0..f * f).map(|_| normal() / (f as f64).sqrt()).collect();
            let bias: Vec<f64> = (0..f).map(|_| normal()).collect();
            if c > 0 {
                for (x, d) in a.data_mut().iter_mut().zip(&dev) {
                    *x += s * d;
                }
                for (x, d) in b.iter_mut().zip(&bias) {
                    *x = s * d;
                }
            }
            transforms.push(a);
            biases.push(b);
        }
        SyntheticWorld {
            prototypes,
            transforms,
            biases,
        }
    }

    /// Clean (noise-free) frame for `token` in `accent`.
    pub fn frame(&self, token: usize, accent: usize) -> Vec<f64> {
        let p = self.prototypes.row(token);
        let a = &self.transforms[accent];
        let b = &self.biases[accent];
        (0..p.len())
            .map(|i| a.row(i).iter().zip(p).map(|(x, y)| x * y).sum::<f64>() + b[i])
            .collect()
    }
}

/// Generates `n_utts` utterances with ids `utt000000...`.
///
/// The prototypes and accent maps depend only on `spec.seed`, so corpora of
/// different sizes drawn from one spec share the same world.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, n_utts: usize) -> Result<Corpus> {
    spec.validate()?;
    if n_utts == 0 {
        return Err(Error::validation("n_utts", "must be at least 1"));
    }
    let world = SyntheticWorld::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let f = spec.feature_dim;
    let mut utterances = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let accent = rng.gen_range(0..spec.num_accents);
        let n_tokens = rng.gen_range(spec.tokens_per_utterance.0..=spec.tokens_per_utterance.1);
        let mut tokens = Vec::with_capacity(n_tokens);
        let mut data = Vec::new();
        let mut alignment = Vec::new();
        for j in 0..n_tokens {
            let tok = rng.gen_range(0..spec.vocab_size);
            tokens.push(SyntheticSpec::token_name(tok));
            let dur = rng.gen_range(spec.frames_per_token.0..=spec.frames_per_token.1);
            let clean = world.frame(tok, accent);
            for _ in 0..dur {
                for &v in &clean {
                    let n: f64 = if spec.noise > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        spec.noise * z
                    } else {
                        0.0
                    };
                    // Stored as f32 on disk; keep memory and disk identical.
                    data.push((v + n) as f32 as f64);
                }
                alignment.push(j as u32);
            }
        }
        let t = alignment.len();
        utterances.push(Utterance {
            id: format!("utt{i:06}"),
            features: FeatureSequence::new(Tensor::from_vec(t, f, data)),
            accent,
            transcript: Some(tokens),
            pseudo: false,
            alignment: Some(alignment),
        });
    }
    Ok(Corpus {
        accent_names: (0..spec.num_accents).map(SyntheticSpec::accent_name).collect(),
        feature_dim: f,
        utterances,
        feature_paths: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_corpus_repeats_the_prototype() {
        let spec = SyntheticSpec {
            num_accents: 1,
            vocab_size: 1,
            feature_dim: 4,
            tokens_per_utterance: (1, 1),
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic_corpus(&spec, 3).unwrap();
        let world = SyntheticWorld::new(&spec);
        let proto: Vec<f64> = world.prototypes.row(0).iter().map(|&v| v as f32 as f64).collect();
        for u in &c.utterances {
            for t in 0..u.features.len() {
                assert_eq!(u.features.frames.row(t), proto.as_slice());
            }
            assert_eq!(u.transcript.as_deref(), Some(&["w0".to_string()][..]));
        }
    }

    #[test]
    fn same_seed_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic_corpus(&spec, 20).unwrap();
        let b = generate_synthetic_corpus(&spec, 20).unwrap();
        assert_eq!(a, b);
        let other = SyntheticSpec { seed: 8, ..spec };
        assert_ne!(a, generate_synthetic_corpus(&other, 20).unwrap());
    }

    #[test]
    fn world_is_independent_of_corpus_size() {
        let spec = SyntheticSpec::default();
        let small = generate_synthetic_corpus(&spec, 5).unwrap();
        let large = generate_synthetic_corpus(&spec, 50).unwrap();
        assert_eq!(small.utterances[..], large.utterances[..5]);
    }

    #[test]
    fn invalid_spec_names_the_field() {
        let spec = SyntheticSpec {
            vocab_size: 0,
            ..SyntheticSpec::default()
        };
        match generate_synthetic_corpus(&spec, 1) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "vocab_size"),
            other => panic!("unexpected {other:?}"),
        }
        let spec = SyntheticSpec {
            noise: -1.0,
            ..SyntheticSpec::default()
        };
        assert!(matches!(
            generate_synthetic_corpus(&spec, 1),
            Err(Error::Validation { field, .. }) if field == "noise"
        ));
        assert!(generate_synthetic_corpus(&SyntheticSpec::default(), 0).is_err());
    }

    #[test]
    fn alignment_indexes_the_transcript() {
        let c = generate_synthetic_corpus(&SyntheticSpec::default(), 10).unwrap();
        for u in &c.utterances {
            let a = u.alignment.as_ref().unwrap();
            assert_eq!(a.len(), u.features.len());
            assert_eq!(*a.last().unwrap() as usize + 1, u.transcript.as_ref().unwrap().len());
            assert!(a.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        }
    }
}
