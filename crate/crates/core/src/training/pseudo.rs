//! Pseudo-labelling of untranscribed utterances with the current recognizer.

use crate::corpus::Corpus;
use crate::decode_eval::{decode_utterance, BeamConfig, HypStatus};
use crate::error::Result;
use crate::model::ModelBundle;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PseudoReport {
    /// Utterances that received a pseudo transcript, per accent.
    pub labeled: Vec<usize>,
    /// Ids dropped because decoding produced nothing usable.
    pub empty: Vec<String>,
    pub partial: Vec<String>,
}

impl PseudoReport {
    pub fn total_labeled(&self) -> usize {
        self.labeled.iter().sum()
    }
}

/// Decodes every utterance without a transcript and stores the best
/// hypothesis as a pseudo transcript. Transcribed utterances pass through
/// unchanged. Empty hypotheses and hypotheses that hit `max_len` are
/// dropped from the returned corpus and listed in the report.
pub fn pseudo_label(bundle: &ModelBundle, corpus: &Corpus, cfg: &BeamConfig) -> Result<(Corpus, PseudoReport)> {
    let mut report = PseudoReport {
        labeled: vec![0; corpus.num_accents()],
        ..Default::default()
    };
    let mut keep = Vec::new();
    let mut labels = Vec::new();
    for (i, u) in corpus.utterances.iter().enumerate() {
        if u.transcript.is_some() {
            keep.push(i);
            labels.push(None);
            continue;
        }
        let hyp = decode_utterance(bundle, u, cfg)?;
        if hyp.status == HypStatus::Partial {
            report.partial.push(u.id.clone());
        } else if hyp.tokens.is_empty() {
            report.empty.push(u.id.clone());
        } else {
            report.labeled[u.accent] += 1;
            keep.push(i);
            labels.push(Some(hyp.tokens));
        }
    }
    // `subset` keeps the on-disk feature paths aligned.
    let mut out = corpus.subset(&keep);
    for (u, l) in out.utterances.iter_mut().zip(labels) {
        if let Some(t) = l {
            u.transcript = Some(t);
            u.pseudo = true;
        }
    }
    Ok((out, report))
}
