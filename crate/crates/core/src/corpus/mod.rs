//! Accented corpora: synthetic generation, feature extraction and on-disk I/O.

pub mod features;
pub mod logmel;
pub mod manifest;
pub mod split;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use logmel::{extract_logmel, LogMelConfig};
pub use manifest::{CorpusManifest, Record};
pub use split::{split_corpus, split_manifest};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};

/// Index into a corpus' accent list.
pub type AccentId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    /// `T x F` frame matrix.
    pub frames: Tensor,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
}

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Self {
        FeatureSequence {
            frames,
            frame_shift_ms: 10.0,
            frame_length_ms: 25.0,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.rows() == 0 {
            return Err(Error::validation("features", "at least one frame is required"));
        }
        if !self.frames.is_finite() {
            return Err(Error::NonFinite("feature frames".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureSequence,
    pub accent: AccentId,
    pub transcript: Option<Vec<String>>,
    pub pseudo: bool,
    /// Frame-level index into the transcript (synthetic corpora only).
    pub alignment: Option<Vec<u32>>,
}

/// Utterances held in memory together with their corpus-wide metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub accent_names: Vec<String>,
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
    /// Feature file per utterance, known once the corpus is on disk.
    pub feature_paths: Vec<PathBuf>,
}

impl Corpus {
    pub fn num_accents(&self) -> usize {
        self.accent_names.len()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for u in &self.utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::DuplicateId(u.id.clone()));
            }
            u.features.validate()?;
            if u.features.dim() != self.feature_dim {
                return Err(Error::shape("utterance feature dim", self.feature_dim, u.features.dim()));
            }
            if u.accent >= self.num_accents() {
                return Err(Error::validation("accent", format!("`{}` has accent {}", u.id, u.accent)));
            }
            if u.pseudo && u.transcript.is_none() {
                return Err(Error::validation("pseudo", format!("`{}` has no transcript", u.id)));
            }
        }
        Ok(())
    }

    /// Keeps the utterances at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            accent_names: self.accent_names.clone(),
            feature_dim: self.feature_dim,
            utterances: indices.iter().map(|&i| self.utterances[i].clone()).collect(),
            feature_paths: if self.feature_paths.len() == self.utterances.len() {
                indices.iter().map(|&i| self.feature_paths[i].clone()).collect()
            } else {
                Vec::new()
            },
        }
    }

    /// The records describing this corpus, when its features live on disk.
    pub fn manifest(&self) -> Option<CorpusManifest> {
        if self.feature_paths.len() != self.utterances.len() {
            return None;
        }
        Some(CorpusManifest {
            accent_names: self.accent_names.clone(),
            feature_dim: self.feature_dim,
            records: self
                .utterances
                .iter()
                .zip(&self.feature_paths)
                .map(|(u, p)| Record {
                    id: u.id.clone(),
                    feature_path: p.clone(),
                    accent: u.accent,
                    transcript: u.transcript.clone(),
                    pseudo: u.pseudo,
                })
                .collect(),
        })
    }

    /// Writes `dir/features/<id>.aipf` for every utterance plus the manifest
    /// at `manifest_path`; alignments go to a sidecar next to the manifest.
    pub fn save(&mut self, dir: &Path, manifest_path: &Path) -> Result<CorpusManifest> {
        self.validate()?;
        let feat_dir = manifest::absolute(&dir.join("features"));
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let mut paths = Vec::with_capacity(self.utterances.len());
        for u in &self.utterances {
            let p = feat_dir.join(format!("{}.aipf", u.id));
            features::write(&p, &u.features)?;
            paths.push(p);
        }
        self.feature_paths = paths;
        let m = self.manifest().expect("paths were just assigned");
        m.save(manifest_path)?;
        if self.utterances.iter().any(|u| u.alignment.is_some()) {
            write_alignments(&alignment_path(manifest_path), &self.utterances)?;
        }
        Ok(m)
    }

    /// Loads a manifest, its feature files and any alignment sidecar.
    pub fn load(manifest_path: &Path) -> Result<Corpus> {
        let m = CorpusManifest::load(manifest_path)?;
        let mut c = m.load_corpus()?;
        let side = alignment_path(manifest_path);
        if side.is_file() {
            read_alignments(&side, &mut c.utterances)?;
        }
        Ok(c)
    }

    /// Token inventory units appearing in transcripts, sorted.
    pub fn transcript_units(&self) -> Vec<String> {
        let mut set = std::collections::BTreeSet::new();
        for u in &self.utterances {
            if let Some(t) = &u.transcript {
                set.extend(t.iter().cloned());
            }
        }
        set.into_iter().collect()
    }
}

pub fn alignment_path(manifest_path: &Path) -> PathBuf {
    let mut s = manifest_path.as_os_str().to_owned();
    s.push(".align");
    PathBuf::from(s)
}

fn write_alignments(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut out = String::new();
    for u in utts {
        if let Some(a) = &u.alignment {
            out.push_str(&u.id);
            out.push('\t');
            let parts: Vec<String> = a.iter().map(u32::to_string).collect();
            out.push_str(&parts.join(" "));
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_alignments(path: &Path, utts: &mut [Utterance]) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let index: std::collections::HashMap<String, usize> =
        utts.iter().enumerate().map(|(i, u)| (u.id.clone(), i)).collect();
    for (n, line) in text.lines().enumerate() {
        let bad = |reason: &str| Error::Parse {
            path: path.display().to_string(),
            line: n + 1,
            reason: reason.to_string(),
        };
        let (id, rest) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let Some(&i) = index.get(id) else { continue };
        let a: Vec<u32> = rest
            .split(' ')
            .map(|s| s.parse().map_err(|_| bad("bad alignment index")))
            .collect::<Result<_>>()?;
        if a.len() != utts[i].features.len() {
            return Err(bad("alignment length differs from frame count"));
        }
        utts[i].alignment = Some(a);
    }
    Ok(())
}
