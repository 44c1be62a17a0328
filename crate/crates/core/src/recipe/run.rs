use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::config::KvConfig;
use crate::error::{Error, Result};

use super::stages::{execute, resolve_inputs, StageCtx};
use super::{Recipe, Stage};

pub const STAGE_MANIFEST: &str = "stage.manifest";
pub const STAGE_LOG: &str = "stage.log";
const MANIFEST_HEADER: &str = "#accinv-stage v1";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Replaces the recipe's global seed.
    pub seed: Option<u64>,
    /// `key` applies to every stage accepting it; `<stage>.key` to one stage.
    pub overrides: KvConfig,
    /// Re-run stages even when their hash matches.
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub stages: Vec<(String, StageOutcome)>,
}

impl RunSummary {
    pub fn all_skipped(&self) -> bool {
        self.stages.iter().all(|(_, o)| *o == StageOutcome::Skipped)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn sha_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Effective parameters: stage keys, then overrides, then the global seed.
fn effective_params(stage: &Stage, recipe_seed: u64, opts: &RunOptions) -> Result<KvConfig> {
    let mut p = stage.params.clone();
    let allowed = stage.kind.keys();
    for k in opts.overrides.keys() {
        let v = opts.overrides.raw(k).unwrap_or_default();
        let target = match k.split_once('.') {
            Some((s, key)) if s == stage.name.replace('-', "_") || s == stage.name => Some(key),
            Some(_) => None,
            None => allowed.contains(&k).then_some(k),
        };
        if let Some(key) = target {
            if !allowed.contains(&key) {
                return Err(Error::Config(format!("override `{k}`: stage `{}` does not accept `{key}`", stage.name)));
            }
            if stage.kind.inputs().contains(&key) {
                return Err(Error::Config(format!("override `{k}`: artifact inputs cannot be overridden")));
            }
            p.set(key, v);
        }
    }
    if !p.contains("seed") {
        p.set("seed", opts.seed.unwrap_or(recipe_seed));
    }
    Ok(p)
}

/// Hash over the stage definition and the manifests of the stages it reads.
pub fn stage_hash(stage: &Stage, params: &KvConfig, out: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(concat!("accinv ", env!("CARGO_PKG_VERSION"), "\n"));
    h.update(format!("stage {}\nkind {}\n", stage.name, stage.kind.name()));
    h.update(params.render());
    let refs = stage.references();
    let mut deps: Vec<&str> = refs.iter().map(|(_, r)| r.stage.as_str()).collect();
    deps.sort_unstable();
    deps.dedup();
    for d in deps {
        let m = out.join(d).join(STAGE_MANIFEST);
        let bytes = fs::read(&m).map_err(|e| Error::io(&m, e))?;
        h.update(format!("dep {d}\n"));
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

/// Files under `dir` other than the stage manifest and log, sorted,
/// relative to `dir` with `/` separators.
fn produced_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let p = entry.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                let rel = p.strip_prefix(base).expect("walk stays below base");
                let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(rel.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.retain(|f| f != STAGE_MANIFEST && f != STAGE_LOG);
    out.sort();
    Ok(out)
}

fn render_manifest(stage: &Stage, hash: &str, files: &[(String, String)]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\nstage\t{}\nkind\t{}\nhash\t{hash}\n", stage.name, stage.kind.name());
    for (f, sha) in files {
        let _ = writeln!(s, "file\t{sha}\t{f}");
    }
    s
}

/// Whether `dir` holds a complete run of a stage with `hash`.
fn up_to_date(dir: &Path, hash: &str) -> bool {
    let Ok(text) = fs::read_to_string(dir.join(STAGE_MANIFEST)) else {
        return false;
    };
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return false;
    }
    let mut hash_ok = false;
    let mut listed = Vec::new();
    for l in lines {
        let f: Vec<&str> = l.split('\t').collect();
        match f.as_slice() {
            ["hash", h] => hash_ok = *h == hash,
            ["file", sha, name] => {
                if sha_file(&dir.join(name)).ok().as_deref() != Some(*sha) {
                    return false;
                }
                listed.push(name.to_string());
            }
            _ => {}
        }
    }
    hash_ok && produced_files(dir).map(|f| f == listed).unwrap_or(false)
}

/// Runs every stage in order, skipping stages whose inputs and settings
/// are unchanged since their last completed run.
pub fn run_recipe(recipe: &Recipe, opts: &RunOptions) -> Result<RunSummary> {
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let mut summary = RunSummary::default();
    for stage in &recipe.stages {
        let params = effective_params(stage, recipe.seed, opts)?;
        let dir = opts.out.join(&stage.name);
        let hash = stage_hash(stage, &params, &opts.out)?;
        if !opts.force && up_to_date(&dir, &hash) {
            summary.stages.push((stage.name.clone(), StageOutcome::Skipped));
            continue;
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let log = dir.join(STAGE_LOG);
        let started = Instant::now();
        let mut ctx = StageCtx {
            name: &stage.name,
            kind: stage.kind,
            params: &params,
            inputs: resolve_inputs(stage, &opts.out),
            dir: &dir,
            notes: Vec::new(),
        };
        let result = execute(&mut ctx);
        let mut text = format!("stage {} ({})\n", stage.name, stage.kind.name());
        text.push_str(&params.render());
        for n in &ctx.notes {
            let _ = writeln!(text, "note: {n}");
        }
        let _ = writeln!(text, "elapsed_s: {:.1}", started.elapsed().as_secs_f64());
        if let Err(e) = &result {
            let _ = writeln!(text, "error[{}]: {e}", e.code());
        }
        fs::write(&log, text).map_err(|e| Error::io(&log, e))?;
        if let Err(e) = result {
            return Err(Error::Stage {
                stage: stage.name.clone(),
                log,
                reason: e.to_string(),
            });
        }
        let files = produced_files(&dir)?
            .into_iter()
            .map(|f| sha_file(&dir.join(&f)).map(|s| (f, s)))
            .collect::<Result<Vec<_>>>()?;
        let m = dir.join(STAGE_MANIFEST);
        fs::write(&m, render_manifest(stage, &hash, &files)).map_err(|e| Error::io(&m, e))?;
        summary.stages.push((stage.name.clone(), StageOutcome::Ran));
    }
    Ok(summary)
}
