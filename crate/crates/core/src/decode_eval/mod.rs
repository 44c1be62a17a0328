//! Decoding, scoring and embedding diagnostics.

pub mod beam;
pub mod probe;
pub mod wer;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::Graph;
use crate::config::KvConfig;
use crate::corpus::{features, Corpus, Utterance};
use crate::error::{Error, Result};
use crate::model::las::DecSnapshot;
use crate::model::{Batch, ForwardCtx, ModelBundle, TokenInventory};
use crate::tensor::Tensor;
use crate::training::batching::sorted_batches;

pub use beam::{beam_search, BeamConfig, BeamResult, Hypothesis, StepScorer};
pub use probe::{argmax, probe_accent, ProbeConfig, ProbeResult};
pub use wer::{edit_distance, wer, EditCounts};

/// Frames per inference batch.
pub const INFERENCE_BATCH_FRAMES: usize = 2048;

/// Label ids for `utt`, with the accent unit appended when the inventory
/// carries accent units. `None` when the utterance has no transcript.
pub fn target_ids(inv: &TokenInventory, utt: &Utterance) -> Result<Option<Vec<usize>>> {
    let Some(t) = &utt.transcript else {
        return Ok(None);
    };
    let mut ids = inv.encode(t)?;
    if inv.accent_unit_count() > 0 {
        let a = inv
            .accent_id(utt.accent)
            .ok_or_else(|| Error::validation("accent", format!("no accent unit for accent {}", utt.accent)))?;
        ids.push(a);
    }
    Ok(Some(ids))
}

/// The recognizer as a [`StepScorer`] for one utterance.
pub struct LasScorer<'a> {
    pub bundle: &'a ModelBundle,
    pub memory: Tensor,
}

impl<'a> LasScorer<'a> {
    pub fn new(bundle: &'a ModelBundle, utt: &Utterance) -> Result<Self> {
        Ok(LasScorer {
            bundle,
            memory: bundle.encode_for_decoding(&utt.features, utt.accent)?,
        })
    }
}

impl StepScorer for LasScorer<'_> {
    type State = DecSnapshot;

    fn initial_state(&self) -> DecSnapshot {
        self.bundle.las_dec.initial_snapshot()
    }

    fn vocab(&self) -> usize {
        self.bundle.inventory().size()
    }

    fn sos(&self) -> usize {
        self.bundle.inventory().sos()
    }

    fn eos(&self) -> usize {
        self.bundle.inventory().eos()
    }

    fn step(&self, prev: &[usize], states: &[&DecSnapshot]) -> (Vec<Vec<f64>>, Vec<DecSnapshot>) {
        let (lp, next) = self.bundle.las_dec.beam_step(&self.bundle.store, &self.memory, prev, states);
        ((0..lp.rows()).map(|r| lp.row(r).to_vec()).collect(), next)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HypStatus {
    Complete,
    /// No hypothesis reached `<eos>`; the best prefix is reported.
    Partial,
}

/// One decoded utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct HypRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub score: f64,
    pub status: HypStatus,
}

pub fn decode_utterance(bundle: &ModelBundle, utt: &Utterance, cfg: &BeamConfig) -> Result<HypRecord> {
    let scorer = LasScorer::new(bundle, utt)?;
    let r = beam_search(&scorer, cfg)?;
    let best = r.best();
    Ok(HypRecord {
        id: utt.id.clone(),
        tokens: bundle.inventory().decode(best.labels()),
        score: best.score,
        status: if r.partial { HypStatus::Partial } else { HypStatus::Complete },
    })
}

pub fn decode_corpus(bundle: &ModelBundle, corpus: &Corpus, cfg: &BeamConfig) -> Result<Vec<HypRecord>> {
    corpus.utterances.iter().map(|u| decode_utterance(bundle, u, cfg)).collect()
}

/// `id \t score \t complete|partial \t space-separated tokens`.
pub fn render_hyps(hyps: &[HypRecord]) -> String {
    let mut out = String::new();
    for h in hyps {
        let status = match h.status {
            HypStatus::Complete => "complete",
            HypStatus::Partial => "partial",
        };
        let _ = writeln!(out, "{}\t{}\t{}\t{}", h.id, h.score, status, h.tokens.join(" "));
    }
    out
}

pub fn parse_hyps(text: &str, origin: &str) -> Result<Vec<HypRecord>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() {
            return Err(err("empty id".into()));
        }
        let score: f64 = fields[1].parse().map_err(|_| err(format!("bad score `{}`", fields[1])))?;
        if score.is_nan() {
            return Err(err("score is NaN".into()));
        }
        let status = match fields[2] {
            "complete" => HypStatus::Complete,
            "partial" => HypStatus::Partial,
            s => return Err(err(format!("bad status `{s}`"))),
        };
        if !seen.insert(fields[0]) {
            return Err(err(format!("duplicate id `{}`", fields[0])));
        }
        out.push(HypRecord {
            id: fields[0].to_string(),
            tokens: fields[3].split_whitespace().map(str::to_string).collect(),
            score,
            status,
        });
    }
    Ok(out)
}

pub fn save_hyps(path: &Path, hyps: &[HypRecord]) -> Result<()> {
    fs::write(path, render_hyps(hyps)).map_err(|e| Error::io(path, e))
}

pub fn load_hyps(path: &Path) -> Result<Vec<HypRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_hyps(&text, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccentScore {
    pub accent: usize,
    pub name: String,
    pub utterances: usize,
    pub counts: EditCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// System name shown in report rows.
    pub system: String,
    /// What the error rate counts.
    pub units: String,
    pub accents: Vec<AccentScore>,
    /// Pooled over every scored utterance.
    pub overall: EditCounts,
    pub labeled_accents: Vec<usize>,
    /// Pooled over `labeled_accents` and over the remaining accents.
    pub labeled: Option<EditCounts>,
    pub rest: Option<EditCounts>,
    pub partial: usize,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn accent_rate(&self, accent: usize) -> Option<f64> {
        self.accents.iter().find(|a| a.accent == accent).map(|a| a.counts.rate())
    }
}

pub const UNITS: &str = "tokens (inventory units, accent units removed)";

/// Scores hypotheses against the transcripts of `refs`.
pub fn score_hyps(refs: &Corpus, hyps: &[HypRecord], labeled_accents: &[usize], system: &str) -> Result<EvalReport> {
    let by_id: HashMap<&str, &HypRecord> = hyps.iter().map(|h| (h.id.as_str(), h)).collect();
    let c = refs.num_accents();
    let mut per = vec![(0usize, EditCounts::default()); c];
    let mut partial = 0;
    for u in &refs.utterances {
        let reference = u
            .transcript
            .as_ref()
            .ok_or_else(|| Error::Data(format!("utterance `{}` has no reference transcript", u.id)))?;
        let h = by_id
            .get(u.id.as_str())
            .ok_or_else(|| Error::Data(format!("no hypothesis for utterance `{}`", u.id)))?;
        if h.status == HypStatus::Partial {
            partial += 1;
        }
        let (_, counts) = wer(reference, &h.tokens)?;
        per[u.accent].0 += 1;
        per[u.accent].1.add(&counts);
    }
    let mut warnings = Vec::new();
    let mut accents = Vec::new();
    let mut overall = EditCounts::default();
    let (mut labeled, mut rest) = (None::<EditCounts>, None::<EditCounts>);
    for (a, (n, counts)) in per.into_iter().enumerate() {
        let name = refs.accent_names[a].clone();
        if n == 0 {
            warnings.push(format!("accent `{name}` has no test utterances; omitted"));
            continue;
        }
        overall.add(&counts);
        let group = if labeled_accents.contains(&a) { &mut labeled } else { &mut rest };
        group.get_or_insert_with(EditCounts::default).add(&counts);
        accents.push(AccentScore {
            accent: a,
            name,
            utterances: n,
            counts,
        });
    }
    Ok(EvalReport {
        system: system.to_string(),
        units: UNITS.to_string(),
        accents,
        overall,
        labeled_accents: labeled_accents.to_vec(),
        labeled,
        rest,
        partial,
        warnings,
    })
}

/// Decodes and scores `corpus`.
pub fn evaluate(
    bundle: &ModelBundle,
    corpus: &Corpus,
    cfg: &BeamConfig,
    labeled_accents: &[usize],
    system: &str,
) -> Result<(EvalReport, Vec<HypRecord>)> {
    let hyps = decode_corpus(bundle, corpus, cfg)?;
    Ok((score_hyps(corpus, &hyps, labeled_accents, system)?, hyps))
}

/// Teacher-forced top-1 accuracy over every decoder step (including the
/// final `<eos>` step). Utterances without transcripts are ignored.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

pub fn validation_accuracy(bundle: &ModelBundle, corpus: &Corpus) -> Result<Accuracy> {
    let inv = bundle.inventory();
    let mut items: Vec<(&Utterance, Vec<usize>)> = Vec::new();
    for u in &corpus.utterances {
        if let Some(ids) = target_ids(inv, u)? {
            items.push((u, ids));
        }
    }
    let lens: Vec<usize> = items.iter().map(|(u, _)| u.features.len()).collect();
    let mut acc = Accuracy::default();
    for idx in sorted_batches(&lens, INFERENCE_BATCH_FRAMES) {
        let utts: Vec<&Utterance> = idx.iter().map(|&i| items[i].0).collect();
        let labels: Vec<Vec<usize>> = idx.iter().map(|&i| items[i].1.clone()).collect();
        let batch = Batch::new(&utts, Some(&labels), inv)?;
        let mut g = Graph::inference();
        let (_, out) = bundle.asr_forward(&mut g, &batch, &ForwardCtx::eval())?;
        let logits = g.value(out.logits);
        let t = batch.targets.as_ref().unwrap();
        let b = batch.batch;
        for (bi, &len) in t.lens.iter().enumerate() {
            for j in 0..len {
                let r = j * b + bi;
                acc.total += 1;
                if argmax(logits.row(r)) == t.outputs[r] {
                    acc.correct += 1;
                }
            }
        }
    }
    Ok(acc)
}

/// Which generator's embeddings to extract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Embedding {
    Invariant,
    Specific,
}

impl std::str::FromStr for Embedding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g_ai" => Ok(Embedding::Invariant),
            "g_as" => Ok(Embedding::Specific),
            _ => Err(Error::validation("which", format!("`{s}` is not g_ai or g_as"))),
        }
    }
}

/// Frame embeddings stacked over the corpus, with accent label and
/// utterance index per row.
pub struct FrameEmbeddings {
    pub frames: Tensor,
    pub accents: Vec<usize>,
    pub utterance: Vec<usize>,
}

pub fn frame_embeddings(bundle: &ModelBundle, corpus: &Corpus, which: Embedding) -> Result<FrameEmbeddings> {
    let lens: Vec<usize> = corpus.utterances.iter().map(|u| u.features.len()).collect();
    let width = match which {
        Embedding::Invariant => bundle.config.g_ai_hidden,
        Embedding::Specific => bundle.config.g_as_hidden,
    };
    let mut offsets = Vec::with_capacity(lens.len());
    let mut total = 0;
    for &l in &lens {
        offsets.push(total);
        total += l;
    }
    let mut frames = Tensor::zeros(total, width);
    let mut accents = vec![0; total];
    let mut utterance = vec![0; total];
    let ctx = ForwardCtx::eval();
    for idx in sorted_batches(&lens, INFERENCE_BATCH_FRAMES) {
        let utts: Vec<&Utterance> = idx.iter().map(|&i| &corpus.utterances[i]).collect();
        let batch = Batch::new(&utts, None, bundle.inventory())?;
        let mut g = Graph::inference();
        let x = bundle.input(&mut g, &batch)?;
        let h = match which {
            Embedding::Invariant => bundle.g_ai_forward(&mut g, x, &batch, &ctx),
            Embedding::Specific => bundle.g_as_forward(&mut g, x, &batch, &ctx),
        };
        let hv = g.value(h);
        for (bi, &i) in idx.iter().enumerate() {
            for t in 0..lens[i] {
                let r = offsets[i] + t;
                frames.row_mut(r).copy_from_slice(hv.row(t * batch.batch + bi));
                accents[r] = corpus.utterances[i].accent;
                utterance[r] = i;
            }
        }
    }
    Ok(FrameEmbeddings {
        frames,
        accents,
        utterance,
    })
}

/// Per-utterance mean of the frame embeddings, one row per utterance.
pub fn pooled_embeddings(bundle: &ModelBundle, corpus: &Corpus, which: Embedding) -> Result<Tensor> {
    let fe = frame_embeddings(bundle, corpus, which)?;
    let n = corpus.len();
    let mut out = Tensor::zeros(n, fe.frames.cols());
    let mut counts = vec![0usize; n];
    for r in 0..fe.frames.rows() {
        let u = fe.utterance[r];
        counts[u] += 1;
        for (o, v) in out.row_mut(u).iter_mut().zip(fe.frames.row(r)) {
            *o += v;
        }
    }
    for (u, &c) in counts.iter().enumerate() {
        out.row_mut(u).iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(out)
}

pub fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

/// Writes pooled embeddings as an AIPF matrix (one row per utterance) and a
/// `<path>.labels` sidecar with `id \t accent_id` lines.
pub fn export_embeddings(bundle: &ModelBundle, corpus: &Corpus, which: Embedding, path: &Path) -> Result<PathBuf> {
    let pooled = pooled_embeddings(bundle, corpus, which)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, features::encode_matrix(&pooled, 0.0, 0.0)).map_err(|e| Error::io(path, e))?;
    let mut labels = String::new();
    for u in &corpus.utterances {
        let _ = writeln!(labels, "{}\t{}", u.id, u.accent);
    }
    let lp = labels_path(path);
    fs::write(&lp, labels).map_err(|e| Error::io(&lp, e))?;
    Ok(lp)
}

/// Decoding settings read from `beam_size`, `max_len`, `length_norm`.
pub fn beam_config(cfg: &KvConfig) -> Result<BeamConfig> {
    let d = BeamConfig::default();
    let b = BeamConfig {
        beam_size: cfg.get_or("beam_size", d.beam_size)?,
        max_len: cfg.get_or("max_len", d.max_len)?,
        length_norm: cfg.get_or("length_norm", d.length_norm)?,
    };
    b.validate()?;
    Ok(b)
}

#[cfg(test)]
mod tests;
