//! Stage bodies. Each reads its inputs through [`StageCtx::input`] and writes
//! only inside its own directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::KvConfig;
use crate::corpus::{generate_synthetic_corpus, Corpus, SyntheticSpec};
use crate::decode_eval::{beam_config, evaluate, frame_embeddings, probe_accent, save_hyps, Embedding, ProbeConfig};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ModelBundle, ModelConfig, TokenInventory};
use crate::report::{self, curve_from_log, emit_report, parse_formats, ReportEntry};
use crate::tensor::Tensor;
use crate::training::{pseudo_label, Mode, TrainConfig, Trainer};

use super::{split_list, Stage, StageKind};

pub const SYNTHETIC_KEYS: &[&str] = &[
    "num_accents",
    "vocab_size",
    "feature_dim",
    "frames_per_token_min",
    "frames_per_token_max",
    "tokens_min",
    "tokens_max",
    "accent_strength",
    "noise",
];
pub const BEAM_KEYS: &[&str] = &["beam_size", "max_len", "length_norm"];
pub const PROBE_KEYS: &[&str] = &["probe_test_fraction", "probe_iterations", "probe_lr", "probe_l2", "probe_seed"];

/// What a stage body sees: its settings, resolved input paths and the
/// directory it owns.
pub struct StageCtx<'a> {
    pub name: &'a str,
    pub kind: StageKind,
    pub params: &'a KvConfig,
    /// Input key to `(label, path)` pairs; labels name curves in reports.
    pub inputs: BTreeMap<String, Vec<(String, PathBuf)>>,
    pub dir: &'a Path,
    /// Human-readable notes collected for the stage log.
    pub notes: Vec<String>,
}

impl StageCtx<'_> {
    pub fn input(&self, key: &str) -> Option<PathBuf> {
        self.inputs.get(key).and_then(|v| v.first()).map(|(_, p)| p.clone())
    }

    fn required(&self, key: &str) -> Result<PathBuf> {
        self.input(key)
            .ok_or_else(|| Error::Config(format!("stage `{}` needs `{key}`", self.name)))
    }

    fn out(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }
}

/// Input paths of a recipe stage under the run directory `root`.
pub fn resolve_inputs(stage: &Stage, root: &Path) -> BTreeMap<String, Vec<(String, PathBuf)>> {
    let mut m: BTreeMap<String, Vec<(String, PathBuf)>> = BTreeMap::new();
    for (k, r) in stage.references() {
        let p = root.join(&r.stage).join(&r.file);
        m.entry(k).or_default().push((r.stage, p));
    }
    m
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn execute(ctx: &mut StageCtx) -> Result<()> {
    match ctx.kind {
        StageKind::Corpus => corpus(ctx),
        StageKind::Train => train(ctx),
        StageKind::PseudoLabel => pseudo(ctx),
        StageKind::Evaluate => eval(ctx),
        StageKind::Probe => probe(ctx),
        StageKind::Report => report_stage(ctx),
    }
}

/// Accent indices from a list of names or indices.
pub fn resolve_accents(list: &str, names: &[String]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for item in split_list(list) {
        let idx = match names.iter().position(|n| n == item) {
            Some(i) => i,
            None => item
                .parse::<usize>()
                .ok()
                .filter(|&i| i < names.len())
                .ok_or_else(|| Error::validation("labeled_accents", format!("unknown accent `{item}`")))?,
        };
        if !out.contains(&idx) {
            out.push(idx);
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn corpus(ctx: &mut StageCtx) -> Result<()> {
    let p = ctx.params;
    let spec = SyntheticSpec::from_config(p)?;
    let n_train: usize = p.get_or("n_train", 600)?;
    let n_valid: usize = p.get_or("n_valid", 60)?;
    let n_test: usize = p.get_or("n_test", 120)?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::validation("n_train", "train and test splits must be non-empty"));
    }
    let all = generate_synthetic_corpus(&spec, n_train + n_valid + n_test)?;
    let labeled = match p.raw("labeled_accents") {
        Some(v) => Some(resolve_accents(v, &all.accent_names)?),
        None => None,
    };
    let idx: Vec<usize> = (0..all.len()).collect();
    let parts = [
        ("train", &idx[..n_train]),
        ("valid", &idx[n_train..n_train + n_valid]),
        ("test", &idx[n_train + n_valid..]),
    ];
    for (name, range) in parts {
        let mut c = all.subset(range);
        // Transcripts outside the labeled accents are withheld from the
        // training side only; the test set stays fully transcribed.
        if let (Some(l), true) = (&labeled, name != "test") {
            for u in &mut c.utterances {
                if !l.contains(&u.accent) {
                    u.transcript = None;
                }
            }
        }
        let transcribed = c.utterances.iter().filter(|u| u.transcript.is_some()).count();
        c.save(ctx.dir, &ctx.out(&format!("{name}.manifest")))?;
        ctx.note(format!("{name}: {} utterances, {transcribed} transcribed", c.len()));
    }
    let units: String = (0..spec.vocab_size).map(|k| SyntheticSpec::token_name(k) + "\n").collect();
    write(&ctx.out("units.txt"), &units)
}

fn read_units(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn model_keys() -> impl Iterator<Item = &'static str> {
    ModelConfig::KEYS.iter().copied().filter(|&k| k != "feature_dim" && k != "num_accents")
}

fn train(ctx: &mut StageCtx) -> Result<()> {
    let p = ctx.params;
    let mode: Mode = p.raw("mode").unwrap_or_default().parse()?;
    let train = Corpus::load(&ctx.required("train")?)?;
    let valid = ctx.input("valid").map(|v| Corpus::load(&v)).transpose()?;
    let mut model_kv = KvConfig::new();
    for k in model_keys() {
        if let Some(v) = p.raw(k) {
            model_kv.set(k, v);
        }
    }
    let resume = ctx.input("resume").map(|r| Checkpoint::load(&r)).transpose()?;
    let bundle = if resume.is_some() {
        None
    } else if let Some(init) = ctx.input("init") {
        let ck = Checkpoint::load(&init)?;
        let base = ck.model_config()?;
        let mut cfg = base.clone();
        cfg.apply(&model_kv)?;
        cfg.init_seed = base.init_seed;
        if cfg != base {
            return Err(Error::Config(format!(
                "stage `{}` sets model keys that differ from its init checkpoint",
                ctx.name
            )));
        }
        Some(ck.to_bundle()?)
    } else {
        let units = match ctx.input("units") {
            Some(u) => read_units(&u)?,
            None => train.transcript_units(),
        };
        let mut inv = TokenInventory::new(units)?;
        if p.get_or("accent_units", false)? {
            inv = inv.with_accent_units(&train.accent_names)?;
        }
        let mut cfg = ModelConfig::desk(train.feature_dim, train.num_accents(), inv);
        cfg.init_seed = p.get_or("seed", cfg.init_seed)?;
        cfg.apply(&model_kv)?;
        Some(ModelBundle::new(cfg)?)
    };
    let mut tcfg_kv = KvConfig::new();
    for &k in TrainConfig::KEYS {
        if let Some(v) = p.raw(k) {
            tcfg_kv.set(k, v);
        }
    }
    let cfg = TrainConfig::from_config(mode, &tcfg_kv)?;
    let mut t = match (&resume, bundle) {
        (Some(ck), _) => Trainer::resume(ck, cfg)?,
        (None, Some(b)) => Trainer::new(b, cfg)?,
        (None, None) => unreachable!("a bundle is built whenever there is no resume checkpoint"),
    };
    t.log_to(&ctx.out("train.log"))?;
    let state = t.run(&train, valid.as_ref(), None)?;
    t.checkpoint().save(&ctx.out("model.ackp"))?;
    ctx.note(format!(
        "mode {mode}: {} steps over {} epochs, {} utterances skipped{}",
        state.cursor.step,
        state.cursor.epoch,
        state.skipped,
        state.best_valid.map_or(String::new(), |b| format!(", best valid {b:.4}"))
    ));
    Ok(())
}

fn load_model(ctx: &StageCtx) -> Result<ModelBundle> {
    Checkpoint::load(&ctx.required("model")?)?.to_bundle()
}

fn pseudo(ctx: &mut StageCtx) -> Result<()> {
    let bundle = load_model(ctx)?;
    let corpus = Corpus::load(&ctx.required("corpus")?)?;
    let beam = beam_config(ctx.params)?;
    let (mut out, rep) = pseudo_label(&bundle, &corpus, &beam)?;
    out.save(ctx.dir, &ctx.out("corpus.manifest"))?;
    let mut tsv = String::from("id\tstatus\ttranscript\n");
    for u in out.utterances.iter().filter(|u| u.pseudo) {
        let _ = writeln!(tsv, "{}\tlabeled\t{}", u.id, u.transcript.as_deref().unwrap_or_default().join(" "));
    }
    for id in &rep.empty {
        let _ = writeln!(tsv, "{id}\tempty\t");
    }
    for id in &rep.partial {
        let _ = writeln!(tsv, "{id}\tpartial\t");
    }
    write(&ctx.out("pseudo.tsv"), &tsv)?;
    ctx.note(format!(
        "pseudo-labeled {} utterances, dropped {} empty and {} partial",
        rep.total_labeled(),
        rep.empty.len(),
        rep.partial.len()
    ));
    Ok(())
}

fn eval(ctx: &mut StageCtx) -> Result<()> {
    let bundle = load_model(ctx)?;
    let test = Corpus::load(&ctx.required("test")?)?;
    let beam = beam_config(ctx.params)?;
    let labeled = match ctx.params.raw("labeled_accents") {
        Some(v) => resolve_accents(v, &test.accent_names)?,
        None => Vec::new(),
    };
    let system = ctx.params.raw("system").unwrap_or(&ctx.name).to_string();
    let (rep, hyps) = evaluate(&bundle, &test, &beam, &labeled, &system)?;
    save_hyps(&ctx.out("hyps.txt"), &hyps)?;
    let entry = ReportEntry {
        section: ctx.params.raw("section").unwrap_or_default().to_string(),
        report: rep,
    };
    write(&ctx.out("report.tsv"), &report::render_delimited(std::slice::from_ref(&entry)))?;
    ctx.note(format!("{system}: token error rate {:.4}", entry.report.overall.rate()));
    Ok(())
}

/// Frames of every utterance stacked, with accent labels and group ids.
fn raw_frames(corpus: &Corpus) -> (Tensor, Vec<usize>, Vec<usize>) {
    let total: usize = corpus.utterances.iter().map(|u| u.features.len()).sum();
    let mut x = Tensor::zeros(total, corpus.feature_dim);
    let (mut labels, mut groups) = (Vec::with_capacity(total), Vec::with_capacity(total));
    let mut r = 0;
    for (i, u) in corpus.utterances.iter().enumerate() {
        for t in 0..u.features.len() {
            x.row_mut(r).copy_from_slice(u.features.frames.row(t));
            labels.push(u.accent);
            groups.push(i);
            r += 1;
        }
    }
    (x, labels, groups)
}

fn probe(ctx: &mut StageCtx) -> Result<()> {
    let bundle = load_model(ctx)?;
    let corpus = Corpus::load(&ctx.required("corpus")?)?;
    let mut pcfg = ProbeConfig::from_config(ctx.params)?;
    if !ctx.params.contains("probe_seed") {
        pcfg.seed = ctx.params.get_or("seed", pcfg.seed)?;
    }
    let which = ctx.params.raw("which").unwrap_or("g_ai,g_as,raw").to_string();
    let mut tsv = String::from("embedding\taccuracy\tchance\ttrain_accuracy\tn_train\tn_test\n");
    for w in split_list(&which) {
        let res = if w == "raw" {
            let (x, l, g) = raw_frames(&corpus);
            probe_accent(&x, &l, &g, &pcfg)?
        } else {
            let fe = frame_embeddings(&bundle, &corpus, w.parse::<Embedding>()?)?;
            probe_accent(&fe.frames, &fe.accents, &fe.utterance, &pcfg)?
        };
        let _ = writeln!(
            tsv,
            "{w}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            res.accuracy, res.chance, res.train_accuracy, res.n_train, res.n_test
        );
        ctx.note(format!("{w}: probe accuracy {:.4} (chance {:.4})", res.accuracy, res.chance));
    }
    write(&ctx.out("probe.tsv"), &tsv)
}

fn report_stage(ctx: &mut StageCtx) -> Result<()> {
    let formats = parse_formats(ctx.params.raw("format").unwrap_or("text-table,delimited,plot"))?;
    let mut entries = Vec::new();
    for (_, path) in ctx.inputs.get("reports").cloned().unwrap_or_default() {
        entries.extend(report::load_reports(&path)?);
    }
    let mut curves = Vec::new();
    for (label, path) in ctx.inputs.get("logs").cloned().unwrap_or_default() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        curves.push(curve_from_log(&label, &text)?);
    }
    for (name, text) in emit_report(&entries, &curves, &formats)? {
        write(&ctx.out(name), &text)?;
    }
    ctx.note(format!("{} report rows", entries.len()));
    Ok(())
}
