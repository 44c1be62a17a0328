//! `accinv`: corpus preparation, training, decoding, scoring and recipes.
//!
//! Settings come from `--config <file>` (`key = value` lines), then
//! `ACCINV_<KEY>` environment variables (`__` maps to `.`), then `--set
//! key=value` flags, then `--seed`. Failures print one line,
//! `error[<CODE>]: <message>`, and exit nonzero.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use accinv::config::{KvConfig, ENV_PREFIX};
use accinv::corpus::{extract_logmel, split_manifest, Corpus, LogMelConfig, Utterance};
use accinv::decode_eval::{beam_config, decode_corpus, export_embeddings, load_hyps, save_hyps, score_hyps, Embedding};
use accinv::model::checkpoint::Checkpoint;
use accinv::recipe::stages::resolve_accents;
use accinv::recipe::{execute, run_recipe, Recipe, RunOptions, StageCtx, StageKind, StageOutcome};
use accinv::report::{render_delimited, ReportEntry};
use accinv::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "accinv", version, about = "Accent-invariant recognizer training and evaluation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Global random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (or file, for `decode` and `export-embeddings`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build, extract or split corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train one model in a given mode.
    Train {
        /// pretrain, f1, f2, b1, b2, b3 or b4.
        #[arg(long)]
        mode: String,
        /// Training corpus manifest.
        #[arg(long)]
        train: PathBuf,
        /// Validation corpus manifest, scored after every epoch.
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Start from this checkpoint's parameters.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run from its checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Unit list, one per line; defaults to the transcript units.
        #[arg(long)]
        units: Option<PathBuf>,
    },
    /// Transcribe untranscribed utterances with a model.
    PseudoLabel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Beam-search decode a corpus into a hypothesis file.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Score a model (or an existing hypothesis file) against a test corpus.
    Evaluate {
        #[arg(long)]
        test: PathBuf,
        #[arg(long, required_unless_present = "hyps")]
        model: Option<PathBuf>,
        #[arg(long, conflicts_with = "model")]
        hyps: Option<PathBuf>,
        #[arg(long)]
        system: Option<String>,
        #[arg(long)]
        section: Option<String>,
        /// Comma-separated accent names or indices forming the labeled group.
        #[arg(long)]
        labeled_accents: Option<String>,
    },
    /// Linear-probe accent accuracy of embeddings.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated subset of g_ai, g_as, raw.
        #[arg(long)]
        which: Option<String>,
    },
    /// Write pooled per-utterance embeddings as a feature matrix.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "g_ai")]
        which: String,
    },
    /// Tables and learning curves from evaluation reports and training logs.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        logs: Vec<PathBuf>,
        /// Comma-separated: text-table, delimited, plot.
        #[arg(long)]
        format: Option<String>,
    },
    /// Experiment recipes.
    #[command(subcommand)]
    Recipe(RecipeCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Generate a synthetic corpus with train/valid/test splits.
    Gen,
    /// Compute log-mel features for a list of `id<TAB>wav<TAB>accent[<TAB>transcript]` lines.
    Extract {
        #[arg(long)]
        list: PathBuf,
    },
    /// Accent-stratified train/valid split of a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        valid_fraction: f64,
    },
}

#[derive(Subcommand)]
enum RecipeCmd {
    /// Run a recipe file or a bundled recipe (`supervised`, `semi_supervised`).
    Run {
        recipe: String,
        /// Re-run stages whose inputs are unchanged.
        #[arg(long)]
        force: bool,
    },
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Merged settings in precedence order.
fn settings(g: &Global) -> Result<KvConfig> {
    let mut kv = match &g.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::new(),
    };
    kv.apply_env(ENV_PREFIX, std::env::vars());
    for s in &g.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("`--set {s}` is not key=value")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = g.seed {
        kv.set("seed", seed);
    }
    Ok(kv)
}

fn out_dir(g: &Global) -> Result<PathBuf> {
    let out = g.out.clone().ok_or_else(|| usage("this command needs --out"))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

/// Keeps the keys `kind` accepts; any other key is an error.
fn stage_params(kv: &KvConfig, kind: StageKind) -> Result<KvConfig> {
    let allowed = kind.keys();
    let mut p = KvConfig::new();
    for k in kv.keys() {
        if !allowed.contains(&k) || kind.inputs().contains(&k) {
            return Err(Error::validation(k, format!("not a setting of `{}`", kind.name())));
        }
        p.set(k, kv.raw(k).unwrap_or_default());
    }
    Ok(p)
}

/// Runs one stage body directly on explicit paths.
fn run_stage(g: &Global, kind: StageKind, inputs: &[(&str, Option<&PathBuf>)], extra: &[(&str, Option<String>)]) -> Result<()> {
    let mut params = stage_params(&settings(g)?, kind)?;
    for (k, v) in extra {
        if let Some(v) = v {
            params.set(k, v);
        }
    }
    let dir = out_dir(g)?;
    let mut map: BTreeMap<String, Vec<(String, PathBuf)>> = BTreeMap::new();
    for (k, p) in inputs {
        if let Some(p) = p {
            map.entry(k.to_string()).or_default().push((run_label(p), p.to_path_buf()));
        }
    }
    run_ctx(kind, &params, map, &dir)
}

fn run_ctx(kind: StageKind, params: &KvConfig, inputs: BTreeMap<String, Vec<(String, PathBuf)>>, dir: &Path) -> Result<()> {
    let mut ctx = StageCtx {
        name: kind.name(),
        kind,
        params,
        inputs,
        dir,
        notes: Vec::new(),
    };
    execute(&mut ctx)?;
    for n in ctx.notes {
        println!("{n}");
    }
    Ok(())
}

/// Name of the directory holding `p`, used to label curves.
fn run_label(p: &Path) -> String {
    p.parent()
        .and_then(Path::file_name)
        .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned())
}

fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let bad = |e: hound::Error| Error::Format {
        kind: "wav",
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut r = hound::WavReader::open(path).map_err(bad)?;
    let spec = r.spec();
    let ch = spec.channels.max(1) as usize;
    let raw: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>().map_err(bad)?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(bad)?
        }
    };
    // Down-mix to mono.
    let mono = raw.chunks(ch).map(|c| c.iter().sum::<f32>() / c.len() as f32).collect();
    Ok((mono, spec.sample_rate))
}

fn corpus_extract(g: &Global, list: &Path) -> Result<()> {
    let kv = settings(g)?;
    let d = LogMelConfig::default();
    let mut cfg = LogMelConfig {
        window_ms: kv.get_or("window_ms", d.window_ms)?,
        hop_ms: kv.get_or("hop_ms", d.hop_ms)?,
        num_mels: kv.get_or("num_mels", d.num_mels)?,
        low_hz: kv.get_or("low_hz", d.low_hz)?,
        high_hz: kv.get("high_hz")?,
        ..d
    };
    let text = fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
    let base = list.parent().unwrap_or(Path::new("."));
    let mut accents: Vec<String> = Vec::new();
    let mut utterances = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&f.len()) {
            return Err(Error::Parse {
                path: list.display().to_string(),
                line: i + 1,
                reason: "expected id, wav path, accent and an optional transcript".into(),
            });
        }
        let (wave, rate) = read_wav(&base.join(f[1]))?;
        cfg.sample_rate = rate;
        let features = extract_logmel(&wave, &cfg)?;
        let accent = match accents.iter().position(|a| a == f[2]) {
            Some(a) => a,
            None => {
                accents.push(f[2].to_string());
                accents.len() - 1
            }
        };
        let transcript = f
            .get(3)
            .map(|t| t.split_whitespace().map(String::from).collect::<Vec<_>>())
            .filter(|t| !t.is_empty());
        utterances.push(Utterance {
            id: f[0].to_string(),
            features,
            accent,
            transcript,
            pseudo: false,
            alignment: None,
        });
    }
    let mut corpus = Corpus {
        accent_names: accents,
        feature_dim: cfg.num_mels,
        utterances,
        feature_paths: Vec::new(),
    };
    let dir = out_dir(g)?;
    corpus.save(&dir, &dir.join("corpus.manifest"))?;
    println!("extracted {} utterances", corpus.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.cmd {
        Cmd::Corpus(CorpusCmd::Gen) => run_stage(g, StageKind::Corpus, &[], &[]),
        Cmd::Corpus(CorpusCmd::Extract { list }) => corpus_extract(g, &list),
        Cmd::Corpus(CorpusCmd::Split { manifest, valid_fraction }) => {
            let m = accinv::corpus::CorpusManifest::load(&manifest)?;
            let seed = settings(g)?.get_or("seed", 1u64)?;
            let (tr, va) = split_manifest(&m, valid_fraction, seed)?;
            let dir = out_dir(g)?;
            tr.save(&dir.join("train.manifest"))?;
            va.save(&dir.join("valid.manifest"))?;
            println!("train {} / valid {}", tr.records.len(), va.records.len());
            Ok(())
        }
        Cmd::Train {
            mode,
            train,
            valid,
            init,
            resume,
            units,
        } => run_stage(
            g,
            StageKind::Train,
            &[
                ("train", Some(&train)),
                ("valid", valid.as_ref()),
                ("init", init.as_ref()),
                ("resume", resume.as_ref()),
                ("units", units.as_ref()),
            ],
            &[("mode", Some(mode))],
        ),
        Cmd::PseudoLabel { model, corpus } => run_stage(
            g,
            StageKind::PseudoLabel,
            &[("model", Some(&model)), ("corpus", Some(&corpus))],
            &[],
        ),
        Cmd::Decode { model, corpus } => {
            let params = stage_params(&settings(g)?, StageKind::PseudoLabel)?;
            let out = g.out.clone().ok_or_else(|| usage("decode needs --out <file>"))?;
            let bundle = Checkpoint::load(&model)?.to_bundle()?;
            let c = Corpus::load(&corpus)?;
            let hyps = decode_corpus(&bundle, &c, &beam_config(&params)?)?;
            save_hyps(&out, &hyps)?;
            println!("decoded {} utterances", hyps.len());
            Ok(())
        }
        Cmd::Evaluate {
            test,
            model,
            hyps,
            system,
            section,
            labeled_accents,
        } => {
            if let Some(h) = hyps {
                let refs = Corpus::load(&test)?;
                let labeled = match &labeled_accents {
                    Some(l) => resolve_accents(l, &refs.accent_names)?,
                    None => Vec::new(),
                };
                let system = system.unwrap_or_else(|| "hyps".into());
                let rep = score_hyps(&refs, &load_hyps(&h)?, &labeled, &system)?;
                let dir = out_dir(g)?;
                let entry = ReportEntry {
                    section: section.unwrap_or_default(),
                    report: rep,
                };
                let p = dir.join("report.tsv");
                fs::write(&p, render_delimited(std::slice::from_ref(&entry))).map_err(|e| Error::io(&p, e))?;
                println!("{system}: token error rate {:.4}", entry.report.overall.rate());
                Ok(())
            } else {
                run_stage(
                    g,
                    StageKind::Evaluate,
                    &[("model", model.as_ref()), ("test", Some(&test))],
                    &[("system", system), ("section", section), ("labeled_accents", labeled_accents)],
                )
            }
        }
        Cmd::Probe { model, corpus, which } => run_stage(
            g,
            StageKind::Probe,
            &[("model", Some(&model)), ("corpus", Some(&corpus))],
            &[("which", which)],
        ),
        Cmd::ExportEmbeddings { model, corpus, which } => {
            let out = g.out.clone().ok_or_else(|| usage("export-embeddings needs --out <file>"))?;
            let which: Embedding = which.parse()?;
            let bundle = Checkpoint::load(&model)?.to_bundle()?;
            let labels = export_embeddings(&bundle, &Corpus::load(&corpus)?, which, &out)?;
            println!("wrote {} and {}", out.display(), labels.display());
            Ok(())
        }
        Cmd::Report { reports, logs, format } => {
            let mut params = stage_params(&settings(g)?, StageKind::Report)?;
            if let Some(f) = format {
                params.set("format", f);
            }
            let mut map: BTreeMap<String, Vec<(String, PathBuf)>> = BTreeMap::new();
            for (key, paths) in [("reports", reports), ("logs", logs)] {
                map.insert(key.to_string(), paths.into_iter().map(|p| (run_label(&p), p)).collect());
            }
            run_ctx(StageKind::Report, &params, map, &out_dir(g)?)
        }
        Cmd::Recipe(RecipeCmd::Run { recipe, force }) => {
            let r = Recipe::load_named(&recipe)?;
            let mut overrides = settings(g)?;
            let seed = overrides.get::<u64>("seed")?;
            // The seed travels separately so stages that pin theirs keep it.
            let mut o = KvConfig::new();
            for k in overrides.keys().filter(|&k| k != "seed") {
                o.set(k, overrides.raw(k).unwrap_or_default());
            }
            overrides = o;
            let opts = RunOptions {
                out: out_dir(g)?,
                seed,
                overrides,
                force,
            };
            let summary = run_recipe(&r, &opts)?;
            for (name, outcome) in &summary.stages {
                let tag = match outcome {
                    StageOutcome::Ran => "ran",
                    StageOutcome::Skipped => "skipped",
                };
                println!("{name}\t{tag}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[E_USAGE]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
