//! Accent-stratified train/validation splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{AccentId, Corpus, CorpusManifest};

/// Index sets `(train, valid)` for a list of per-item accents.
///
/// Every accent with at least two members contributes
/// `clamp(round(n * fraction), 1, n - 1)` items to the validation side.
pub fn stratified_indices(
    accents: &[AccentId],
    valid_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::validation("valid_fraction", "must lie strictly between 0 and 1"));
    }
    let num_accents = accents.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for c in 0..num_accents {
        let mut members: Vec<usize> = (0..accents.len()).filter(|&i| accents[i] == c).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let k = if n >= 2 {
            ((n as f64 * valid_fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        valid.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::validation(
            "valid_fraction",
            format!(
                "split of {} items yields {} train / {} valid",
                accents.len(),
                train.len(),
                valid.len()
            ),
        ));
    }
    train.sort_unstable();
    valid.sort_unstable();
    Ok((train, valid))
}

pub fn split_corpus(corpus: &Corpus, valid_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    let accents: Vec<AccentId> = corpus.utterances.iter().map(|u| u.accent).collect();
    let (tr, va) = stratified_indices(&accents, valid_fraction, seed)?;
    Ok((corpus.subset(&tr), corpus.subset(&va)))
}

pub fn split_manifest(
    manifest: &CorpusManifest,
    valid_fraction: f64,
    seed: u64,
) -> Result<(CorpusManifest, CorpusManifest)> {
    let accents: Vec<AccentId> = manifest.records.iter().map(|r| r.accent).collect();
    let (tr, va) = stratified_indices(&accents, valid_fraction, seed)?;
    let pick = |idx: &[usize]| CorpusManifest {
        accent_names: manifest.accent_names.clone(),
        feature_dim: manifest.feature_dim,
        records: idx.iter().map(|&i| manifest.records[i].clone()).collect(),
    };
    Ok((pick(&tr), pick(&va)))
}
