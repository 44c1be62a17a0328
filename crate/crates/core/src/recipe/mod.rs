//! Plain-text experiment recipes: an ordered list of stages whose file
//! artifacts feed later stages.
//!
//! ```text
//! # comment
//! recipe = supervised
//! seed = 1
//!
//! [defaults]
//! batch_frames = 150
//!
//! [stage pretrain]
//! kind = train
//! mode = pretrain
//! train = @corpus/train.manifest
//! ```
//!
//! `@<stage>/<file>` names an artifact of an earlier stage; those references
//! are the edges of the stage graph. `config = <path>` in a stage imports a
//! key file (relative to the recipe) below the stage's own keys. Defaults
//! apply to every stage that accepts the key.

mod run;
pub mod stages;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::KvConfig;
use crate::error::{Error, Result};

pub use stages::{execute, StageCtx};
pub use run::{run_recipe, stage_hash, RunOptions, RunSummary, StageOutcome, STAGE_LOG, STAGE_MANIFEST};

pub const SUPERVISED: &str = include_str!("../../recipes/supervised.recipe");
pub const SEMI_SUPERVISED: &str = include_str!("../../recipes/semi_supervised.recipe");

/// A bundled recipe by name (`supervised`, `semi_supervised`).
pub fn bundled(name: &str) -> Option<&'static str> {
    match name.trim_end_matches(".recipe") {
        "supervised" => Some(SUPERVISED),
        "semi_supervised" | "semi-supervised" => Some(SEMI_SUPERVISED),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Corpus,
    Train,
    PseudoLabel,
    Evaluate,
    Probe,
    Report,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Corpus => "corpus",
            StageKind::Train => "train",
            StageKind::PseudoLabel => "pseudo-label",
            StageKind::Evaluate => "evaluate",
            StageKind::Probe => "probe",
            StageKind::Report => "report",
        }
    }

    /// Files the stage writes into its directory (besides the stage
    /// manifest and log), which later stages may reference.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            StageKind::Corpus => &["train.manifest", "valid.manifest", "test.manifest", "units.txt"],
            StageKind::Train => &["model.ackp", "train.log"],
            StageKind::PseudoLabel => &["corpus.manifest", "pseudo.tsv"],
            StageKind::Evaluate => &["report.tsv", "hyps.txt"],
            StageKind::Probe => &["probe.tsv"],
            StageKind::Report => &["table.txt", "table.tsv", "curves.tsv", "curves.svg"],
        }
    }

    /// Keys whose values are artifact references.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            StageKind::Corpus => &[],
            StageKind::Train => &["train", "valid", "init", "units", "resume"],
            StageKind::PseudoLabel => &["model", "corpus"],
            StageKind::Evaluate => &["model", "test"],
            StageKind::Probe => &["model", "corpus"],
            StageKind::Report => &["reports", "logs"],
        }
    }

    pub fn required(self) -> &'static [&'static str] {
        match self {
            StageKind::Corpus => &[],
            StageKind::Train => &["mode", "train"],
            StageKind::PseudoLabel => &["model", "corpus"],
            StageKind::Evaluate => &["model", "test"],
            StageKind::Probe => &["model", "corpus"],
            StageKind::Report => &["reports"],
        }
    }

    /// Every key the stage accepts.
    pub fn keys(self) -> Vec<&'static str> {
        let mut k: Vec<&'static str> = self.inputs().to_vec();
        match self {
            StageKind::Corpus => {
                k.extend(stages::SYNTHETIC_KEYS);
                k.extend(["n_train", "n_valid", "n_test", "labeled_accents"]);
            }
            StageKind::Train => {
                k.extend(crate::model::ModelConfig::KEYS.iter().filter(|&&k| k != "feature_dim" && k != "num_accents"));
                k.extend(crate::training::TrainConfig::KEYS);
                k.push("accent_units");
            }
            StageKind::PseudoLabel => k.extend(stages::BEAM_KEYS),
            StageKind::Evaluate => {
                k.extend(stages::BEAM_KEYS);
                k.extend(["system", "section", "labeled_accents"]);
            }
            StageKind::Probe => {
                k.extend(stages::PROBE_KEYS);
                k.push("which");
            }
            StageKind::Report => k.push("format"),
        }
        k.push("seed");
        k.sort_unstable();
        k.dedup();
        k
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            StageKind::Corpus,
            StageKind::Train,
            StageKind::PseudoLabel,
            StageKind::Evaluate,
            StageKind::Probe,
            StageKind::Report,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::validation("kind", format!("unknown stage kind `{s}`")))
    }
}

/// `@stage/file`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtifactRef {
    pub stage: String,
    pub file: String,
}

impl ArtifactRef {
    pub fn parse(v: &str) -> Option<ArtifactRef> {
        let rest = v.strip_prefix('@')?;
        let (stage, file) = rest.split_once('/')?;
        if !valid_name(stage) || file.is_empty() {
            return None;
        }
        Some(ArtifactRef {
            stage: stage.to_string(),
            file: file.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: String,
    pub kind: StageKind,
    /// Stage keys merged over any imported `config` file.
    pub params: KvConfig,
    /// Contents of the imported config file, if any (kept for hashing).
    pub imported: Option<String>,
    pub line: usize,
}

impl Stage {
    /// Artifact references of this stage, in key order.
    pub fn references(&self) -> Vec<(String, ArtifactRef)> {
        let mut out = Vec::new();
        for &k in self.kind.inputs() {
            if let Some(v) = self.params.raw(k) {
                for item in split_list(v) {
                    if let Some(r) = ArtifactRef::parse(item) {
                        out.push((k.to_string(), r));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub name: String,
    pub seed: u64,
    pub defaults: KvConfig,
    pub stages: Vec<Stage>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// Splits a comma-separated list, trimming items and dropping empties.
pub fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

enum Section {
    Header,
    Defaults,
    Stage(usize),
}

impl Recipe {
    /// Parses and validates. `base_dir` resolves `config = <path>` imports;
    /// with `None`, imports are rejected.
    pub fn parse(text: &str, origin: &str, base_dir: Option<&Path>) -> Result<Recipe> {
        let err = |line: usize, reason: String| Error::Parse {
            path: origin.to_string(),
            line,
            reason,
        };
        let mut name = None;
        let mut seed = None;
        let mut defaults = KvConfig::new();
        let mut stages: Vec<(String, usize, Vec<(String, String, usize)>)> = Vec::new();
        let mut section = Section::Header;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let inner = inner
                    .strip_suffix(']')
                    .ok_or_else(|| err(n, "unterminated section header".into()))?
                    .trim();
                if inner == "defaults" {
                    section = Section::Defaults;
                } else if let Some(s) = inner.strip_prefix("stage ") {
                    let s = s.trim();
                    if !valid_name(s) {
                        return Err(err(n, format!("invalid stage name `{s}`")));
                    }
                    if stages.iter().any(|(x, ..)| x == s) {
                        return Err(err(n, format!("duplicate stage `{s}`")));
                    }
                    stages.push((s.to_string(), n, Vec::new()));
                    section = Section::Stage(stages.len() - 1);
                } else {
                    return Err(err(n, format!("unknown section `[{inner}]`")));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(n, "expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_') {
                return Err(err(n, format!("invalid key `{k}`")));
            }
            match section {
                Section::Header => match k {
                    "recipe" => name = Some(v.to_string()),
                    "seed" => {
                        seed = Some(v.parse::<u64>().map_err(|_| err(n, format!("bad seed `{v}`")))?);
                    }
                    _ => return Err(err(n, format!("unknown header key `{k}`"))),
                },
                Section::Defaults => {
                    if v.starts_with('@') {
                        return Err(err(n, "defaults cannot reference artifacts".into()));
                    }
                    if defaults.contains(k) {
                        return Err(err(n, format!("duplicate key `{k}`")));
                    }
                    defaults.set(k, v);
                }
                Section::Stage(s) => {
                    let entries = &mut stages[s].2;
                    if entries.iter().any(|(x, ..)| x == k) {
                        return Err(err(n, format!("duplicate key `{k}`")));
                    }
                    entries.push((k.to_string(), v.to_string(), n));
                }
            }
        }
        if stages.is_empty() {
            return Err(err(0, "a recipe needs at least one stage".into()));
        }

        let mut built: Vec<Stage> = Vec::with_capacity(stages.len());
        for (sname, line, entries) in stages {
            let kind_raw = entries
                .iter()
                .find(|(k, ..)| k == "kind")
                .map(|(_, v, _)| v.clone())
                .ok_or_else(|| err(line, format!("stage `{sname}` has no `kind`")))?;
            let kind: StageKind = kind_raw.parse().map_err(|e: Error| err(line, e.to_string()))?;
            let mut params = KvConfig::new();
            let mut imported = None;
            if let Some((_, path, n)) = entries.iter().find(|(k, ..)| k == "config") {
                let base = base_dir.ok_or_else(|| err(*n, "config imports need a recipe file on disk".into()))?;
                let p = base.join(path);
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let file = KvConfig::parse(&text, &p.display().to_string())?;
                for k in file.keys() {
                    params.set(k, file.raw(k).unwrap_or_default());
                }
                imported = Some(text);
            }
            let allowed = kind.keys();
            for (k, v, n) in &entries {
                if k == "kind" || k == "config" {
                    continue;
                }
                params.set(k, v);
                let _ = n;
            }
            for k in params.keys() {
                if !allowed.contains(&k) {
                    let n = entries.iter().find(|(x, ..)| x == k).map_or(line, |e| e.2);
                    return Err(err(n, format!("stage `{sname}` ({}) does not accept `{k}`", kind.name())));
                }
            }
            // Defaults fill keys the stage accepts but does not set.
            for k in defaults.keys() {
                if allowed.contains(&k) && !params.contains(k) && !kind.inputs().contains(&k) {
                    params.set(k, defaults.raw(k).unwrap_or_default());
                }
            }
            for &k in kind.required() {
                if !params.contains(k) {
                    return Err(err(line, format!("stage `{sname}` needs `{k}`")));
                }
            }
            let stage = Stage {
                name: sname.clone(),
                kind,
                params,
                imported,
                line,
            };
            for (key, r) in stage.references() {
                let Some(src) = built.iter().find(|s| s.name == r.stage) else {
                    return Err(err(
                        line,
                        format!("`{key}` in stage `{sname}` refers to `{}`, which is not an earlier stage", r.stage),
                    ));
                };
                if !src.kind.outputs().contains(&r.file.as_str()) {
                    return Err(err(
                        line,
                        format!("stage `{}` ({}) does not produce `{}`", r.stage, src.kind.name(), r.file),
                    ));
                }
            }
            for &k in kind.inputs() {
                if let Some(v) = stage.params.raw(k) {
                    if let Some(bad) = split_list(v).find(|i| ArtifactRef::parse(i).is_none()) {
                        return Err(err(line, format!("`{k}` must name artifacts as `@stage/file`, got `{bad}`")));
                    }
                }
            }
            built.push(stage);
        }
        Ok(Recipe {
            name: name.unwrap_or_else(|| "recipe".to_string()),
            seed: seed.unwrap_or(1),
            defaults,
            stages: built,
        })
    }

    pub fn load(path: &Path) -> Result<Recipe> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Recipe::parse(&text, &path.display().to_string(), path.parent())
    }

    /// A file path, or the name of a bundled recipe.
    pub fn load_named(spec: &str) -> Result<Recipe> {
        let p = PathBuf::from(spec);
        if p.is_file() {
            return Recipe::load(&p);
        }
        match bundled(spec) {
            Some(text) => Recipe::parse(text, spec, None),
            None => Err(Error::Config(format!("`{spec}` is neither a recipe file nor a bundled recipe"))),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.name == name)
    }
}
