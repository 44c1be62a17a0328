//! Optimization loops for adversarial pre-training, fine-tuning and the
//! baselines.
//!
//! Every update draws its dropout masks from `(seed, step, component)` and
//! every epoch's batch order from `(seed, epoch)`, so a run is a pure
//! function of its configuration, initial parameters and data. Resuming
//! needs only the step cursor and optimizer moments, both stored in the
//! checkpoint.

pub mod adam;
pub mod batching;
pub mod pseudo;

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::config::KvConfig;
use crate::corpus::{Corpus, Utterance};
use crate::decode_eval::{self, argmax, target_ids};
use crate::error::{Error, Result};
use crate::losses::{
    self, compose_l_g_prime_var, compose_l_g_var, part_values, LossParts, LossReport, LossWeights,
};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Batch, Branch, Component, ForwardCtx, ModelBundle};

pub use adam::Adam;
pub use pseudo::{pseudo_label, PseudoReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Pretrain,
    F1,
    F2,
    B1,
    B2,
    B3,
    B4,
}

impl Mode {
    pub const ALL: [Mode; 7] = [Mode::Pretrain, Mode::F1, Mode::F2, Mode::B1, Mode::B2, Mode::B3, Mode::B4];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::F1 => "f1",
            Mode::F2 => "f2",
            Mode::B1 => "b1",
            Mode::B2 => "b2",
            Mode::B3 => "b3",
            Mode::B4 => "b4",
        }
    }

    pub fn needs_transcripts(self) -> bool {
        self != Mode::Pretrain
    }

    /// Alternating discriminator/generator updates.
    pub fn is_adversarial(self) -> bool {
        matches!(self, Mode::Pretrain | Mode::F2)
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Mode::B1 | Mode::B2 | Mode::B3 | Mode::B4)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::validation("mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Used by pre-training and by the baselines, which train from scratch.
    pub lr_pretrain: f64,
    /// Used by F1 and F2.
    pub lr_finetune: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Padded frames per batch.
    pub batch_frames: usize,
    pub d_steps: usize,
    pub g_steps: usize,
    /// Multiplies the learning rate of discriminator updates.
    pub d_lr_scale: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Gradient reversal scale for B4.
    pub reversal_scale: f64,
    /// Stop after this many updates in total (a resumed run counts the
    /// updates before the checkpoint).
    pub max_steps: Option<u64>,
}

impl TrainConfig {
    pub fn new(mode: Mode) -> Self {
        TrainConfig {
            mode,
            lr_pretrain: 5e-4,
            lr_finetune: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: if mode == Mode::Pretrain { 15 } else { 20 },
            batch_frames: 400,
            d_steps: 1,
            g_steps: 1,
            d_lr_scale: 1.0,
            seed: 1,
            weights: LossWeights::default(),
            reversal_scale: 1.0,
            max_steps: None,
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "lr_pretrain",
        "lr_finetune",
        "beta1",
        "beta2",
        "eps",
        "epochs",
        "batch_frames",
        "d_steps",
        "g_steps",
        "d_lr_scale",
        "seed",
        "lambda1",
        "lambda2",
        "lambda3",
        "lambda4",
        "reversal_scale",
        "max_steps",
    ];

    /// Reads training keys from `cfg`; `mode` there, if present, must agree
    /// with `mode`.
    pub fn from_config(mode: Mode, cfg: &KvConfig) -> Result<Self> {
        if let Some(m) = cfg.raw("mode") {
            if m.parse::<Mode>()? != mode {
                return Err(Error::validation("mode", format!("config says `{m}` but `{mode}` was requested")));
            }
        }
        let d = TrainConfig::new(mode);
        let w = d.weights;
        let c = TrainConfig {
            mode,
            lr_pretrain: cfg.get_or("lr_pretrain", d.lr_pretrain)?,
            lr_finetune: cfg.get_or("lr_finetune", d.lr_finetune)?,
            beta1: cfg.get_or("beta1", d.beta1)?,
            beta2: cfg.get_or("beta2", d.beta2)?,
            eps: cfg.get_or("eps", d.eps)?,
            epochs: cfg.get_or("epochs", d.epochs)?,
            batch_frames: cfg.get_or("batch_frames", d.batch_frames)?,
            d_steps: cfg.get_or("d_steps", d.d_steps)?,
            g_steps: cfg.get_or("g_steps", d.g_steps)?,
            d_lr_scale: cfg.get_or("d_lr_scale", d.d_lr_scale)?,
            seed: cfg.get_or("seed", d.seed)?,
            weights: LossWeights {
                lambda1: cfg.get_or("lambda1", w.lambda1)?,
                lambda2: cfg.get_or("lambda2", w.lambda2)?,
                lambda3: cfg.get_or("lambda3", w.lambda3)?,
                lambda4: cfg.get_or("lambda4", w.lambda4)?,
            },
            reversal_scale: cfg.get_or("reversal_scale", d.reversal_scale)?,
            max_steps: cfg.get("max_steps")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed (it freezes training, which the tests rely on).
        for (name, v) in [("lr_pretrain", self.lr_pretrain), ("lr_finetune", self.lr_finetune)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::validation("beta1", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::validation("eps", "must be positive"));
        }
        if self.batch_frames == 0 {
            return Err(Error::validation("batch_frames", "must be at least 1"));
        }
        if self.d_steps == 0 {
            return Err(Error::validation("d_steps", "must be at least 1"));
        }
        if self.g_steps == 0 {
            return Err(Error::validation("g_steps", "must be at least 1"));
        }
        if !(self.d_lr_scale >= 0.0 && self.d_lr_scale.is_finite()) {
            return Err(Error::validation("d_lr_scale", "must be finite and non-negative"));
        }
        if !(self.reversal_scale >= 0.0 && self.reversal_scale.is_finite()) {
            return Err(Error::validation("reversal_scale", "must be finite and non-negative"));
        }
        self.weights.validate()
    }

    pub fn lr(&self) -> f64 {
        match self.mode {
            Mode::F1 | Mode::F2 => self.lr_finetune,
            _ => self.lr_pretrain,
        }
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("mode", self.mode);
        kv.set("lr_pretrain", self.lr_pretrain);
        kv.set("lr_finetune", self.lr_finetune);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv.set("epochs", self.epochs);
        kv.set("batch_frames", self.batch_frames);
        kv.set("d_steps", self.d_steps);
        kv.set("g_steps", self.g_steps);
        kv.set("d_lr_scale", self.d_lr_scale);
        kv.set("seed", self.seed);
        kv.set("lambda1", self.weights.lambda1);
        kv.set("lambda2", self.weights.lambda2);
        kv.set("lambda3", self.weights.lambda3);
        kv.set("lambda4", self.weights.lambda4);
        kv.set("reversal_scale", self.reversal_scale);
        if let Some(m) = self.max_steps {
            kv.set("max_steps", m);
        }
        kv
    }
}

/// Kind of a logged record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Discriminator update.
    D,
    /// Generator update.
    G,
    /// Recognition update (fine-tuning and baselines).
    Asr,
    /// End-of-epoch validation.
    Valid,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::D => "D",
            Phase::G => "G",
            Phase::Asr => "ASR",
            Phase::Valid => "valid",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub phase: Phase,
    pub report: Option<LossReport>,
    /// Validation metrics by name.
    pub metrics: Vec<(String, f64)>,
}

impl LogRecord {
    /// One tab-separated `key=value` line (no trailing newline).
    pub fn render(&self) -> String {
        let mut s = format!("step={}\tepoch={}\tphase={}", self.step, self.epoch, self.phase.name());
        if let Some(r) = &self.report {
            s.push('\t');
            s.push_str(&r.fields());
        }
        for (k, v) in &self.metrics {
            s.push_str(&format!("\t{k}={v:.10e}"));
        }
        s
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

/// Parses a training log line back into `key -> value` fields.
pub fn parse_log_line(line: &str) -> Result<Vec<(String, String)>> {
    line.split('\t')
        .map(|f| {
            f.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Data(format!("bad log field `{f}`")))
        })
        .collect()
}

/// Position of a run: `batch` and `sub` index into the current epoch's
/// batch list and the per-batch update schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cursor {
    pub step: u64,
    pub epoch: u64,
    pub batch: usize,
    pub sub: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub cursor: Cursor,
    pub best_valid: Option<f64>,
    /// Utterances skipped for lack of a transcript.
    pub skipped: usize,
    /// The run ended because of `max_steps`.
    pub stopped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Update {
    D,
    G,
    Asr,
}

/// Owns the model and optimizer state for one training phase.
pub struct Trainer {
    pub bundle: ModelBundle,
    pub cfg: TrainConfig,
    opt_d: Adam,
    opt_g: Adam,
    pub cursor: Cursor,
    pub best_valid: Option<f64>,
    pub log: Vec<LogRecord>,
    log_file: Option<File>,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_mode_architecture(&bundle, cfg.mode)?;
        let opt = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Trainer {
            bundle,
            cfg,
            opt_d: opt.clone(),
            opt_g: opt,
            cursor: Cursor::default(),
            best_valid: None,
            log: Vec::new(),
            log_file: None,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let mode: Mode = ck
            .meta
            .raw("train.mode")
            .ok_or_else(|| Error::Config("checkpoint has no training state".into()))?
            .parse()?;
        if mode != cfg.mode {
            return Err(Error::Config(format!("checkpoint was written by `{mode}`, not `{}`", cfg.mode)));
        }
        let bundle = ck.to_bundle()?;
        let mut t = Trainer::new(bundle, cfg)?;
        let get = |k: &str| -> Result<u64> {
            ck.meta
                .get::<u64>(k)?
                .ok_or_else(|| Error::Config(format!("checkpoint is missing `{k}`")))
        };
        t.cursor = Cursor {
            step: ck.step,
            epoch: ck.epoch,
            batch: get("train.batch")? as usize,
            sub: get("train.sub")? as usize,
        };
        t.best_valid = ck.meta.get("train.best_valid")?;
        let store = &t.bundle.store;
        t.opt_d.import(store, get("opt.d.t")?, ck.with_prefix("opt.d."))?;
        t.opt_g.import(store, get("opt.g.t")?, ck.with_prefix("opt.g."))?;
        Ok(t)
    }

    /// Parameters, optimizer moments and cursor.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = self.cfg.to_kv();
        meta.set("train.mode", self.cfg.mode);
        meta.set("train.batch", self.cursor.batch);
        meta.set("train.sub", self.cursor.sub);
        meta.set("opt.d.t", self.opt_d.t);
        meta.set("opt.g.t", self.opt_g.t);
        if let Some(b) = self.best_valid {
            meta.set("train.best_valid", b);
        }
        let mut ck = Checkpoint::from_bundle(&self.bundle, &meta, self.cursor.step, self.cursor.epoch);
        for (prefix, opt) in [("opt.d.", &self.opt_d), ("opt.g.", &self.opt_g)] {
            for (k, t) in opt.export(&self.bundle.store) {
                ck.tensors.push((format!("{prefix}{k}"), t));
            }
        }
        ck
    }

    /// Appends log lines to `path` as they are produced.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.log_file = Some(f);
        Ok(())
    }

    fn record(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.log_file {
            writeln!(f, "{}", rec.render()).map_err(|e| Error::io("training log", e))?;
        }
        self.log.push(rec);
        Ok(())
    }

    fn schedule(&self) -> Vec<Update> {
        if self.cfg.mode.is_adversarial() {
            let mut s = vec![Update::D; self.cfg.d_steps];
            s.extend(vec![Update::G; self.cfg.g_steps]);
            s
        } else {
            vec![Update::Asr]
        }
    }

    /// Runs until `cfg.epochs` complete or `max_steps` is reached. With
    /// `out`, writes `epoch-<n>.ackp` after every epoch and `last.ackp` at
    /// the end.
    pub fn run(&mut self, train: &Corpus, valid: Option<&Corpus>, out: Option<&Path>) -> Result<TrainState> {
        let data = Prepared::new(&self.bundle, train, self.cfg.mode)?;
        if self.cfg.epochs > 0 && data.utts.is_empty() {
            return Err(Error::Data(format!("no usable training utterances for `{}`", self.cfg.mode)));
        }
        let schedule = self.schedule();
        let mut stopped = false;
        'epochs: while (self.cursor.epoch as usize) < self.cfg.epochs {
            let batches = batching::epoch_batches(&data.lens(), self.cfg.batch_frames, self.cfg.seed, self.cursor.epoch);
            while self.cursor.batch < batches.len() {
                let batch = data.batch(&self.bundle, &batches[self.cursor.batch])?;
                while self.cursor.sub < schedule.len() {
                    if self.cfg.max_steps.is_some_and(|m| self.cursor.step >= m) {
                        stopped = true;
                        break 'epochs;
                    }
                    let report = match schedule[self.cursor.sub] {
                        Update::D => self.d_step(&batch)?,
                        Update::G => self.g_step(&batch)?,
                        Update::Asr => self.asr_step(&batch)?,
                    };
                    let phase = match schedule[self.cursor.sub] {
                        Update::D => Phase::D,
                        Update::G => Phase::G,
                        Update::Asr => Phase::Asr,
                    };
                    self.cursor.step += 1;
                    self.cursor.sub += 1;
                    self.record(LogRecord {
                        step: self.cursor.step,
                        epoch: self.cursor.epoch,
                        phase,
                        report: Some(report),
                        metrics: Vec::new(),
                    })?;
                }
                self.cursor.sub = 0;
                self.cursor.batch += 1;
            }
            if let Some(v) = valid {
                self.validate_epoch(v)?;
            }
            self.cursor.epoch += 1;
            self.cursor.batch = 0;
            if let Some(dir) = out {
                self.checkpoint().save(&dir.join(format!("epoch-{}.ackp", self.cursor.epoch)))?;
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("last.ackp"))?;
        }
        Ok(TrainState {
            cursor: self.cursor,
            best_valid: self.best_valid,
            skipped: data.skipped,
            stopped,
        })
    }

    fn validate_epoch(&mut self, valid: &Corpus) -> Result<()> {
        let mut metrics = Vec::new();
        if self.cfg.mode.is_adversarial() {
            metrics.push(("d_ai_acc".to_string(), discriminator_accuracy(&self.bundle, valid)?));
        }
        if self.cfg.mode.needs_transcripts() {
            let acc = decode_eval::validation_accuracy(&self.bundle, valid)?;
            if acc.total > 0 {
                let f = acc.fraction();
                metrics.push(("token_acc".to_string(), f));
                self.best_valid = Some(self.best_valid.map_or(f, |b| b.max(f)));
            }
        }
        self.record(LogRecord {
            step: self.cursor.step,
            epoch: self.cursor.epoch,
            phase: Phase::Valid,
            report: None,
            metrics,
        })
    }

    fn ctx(&self) -> ForwardCtx {
        ForwardCtx::train(self.bundle.config.dropout, self.cfg.seed, self.cursor.step)
    }

    fn graph_for(&self, comps: &[Component]) -> Graph {
        Graph::with_trainable(self.bundle.trainable(comps))
    }

    fn apply(&mut self, g: &Graph, loss: Var, use_d: bool, comps: &[Component]) -> Result<()> {
        let grads = g.backward(loss).for_params(g);
        let lr = if use_d { self.cfg.lr() * self.cfg.d_lr_scale } else { self.cfg.lr() };
        let opt = if use_d { &mut self.opt_d } else { &mut self.opt_g };
        opt.step(&mut self.bundle.store, &grads, lr).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged {
                component: format!("gradient ({e})"),
                step: self.cursor.step,
            },
            e => e,
        })?;
        for &c in comps {
            if self.bundle.params_of(c).iter().any(|&id| !self.bundle.store.get(id).is_finite()) {
                return Err(Error::Diverged {
                    component: c.name().to_string(),
                    step: self.cursor.step,
                });
            }
        }
        Ok(())
    }

    fn diverged(&self, report: &LossReport, component_of: impl Fn(&str) -> &'static str) -> Result<()> {
        match report.non_finite_part() {
            None => Ok(()),
            Some(part) => Err(Error::Diverged {
                component: format!("{} ({part})", component_of(part)),
                step: self.cursor.step,
            }),
        }
    }

    /// Updates `D_AI` on `L_D = CE_AI`; everything else is frozen.
    pub fn d_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let comps = [Component::DAi];
        let mut g = self.graph_for(&comps);
        let ctx = self.ctx();
        let x = self.bundle.input(&mut g, batch)?;
        let h_ai = self.bundle.g_ai_forward(&mut g, x, batch, &ctx);
        let p = self.bundle.discriminate(&mut g, Branch::Invariant, h_ai, batch, &ctx)?;
        let ce = losses::weighted_nll(&mut g, p, &batch.frame_accents(), batch.frame_weights());
        let parts = LossParts {
            ce_ai: Some(g.value(ce.value).item()),
            ..Default::default()
        };
        let report = LossReport::new(parts, losses::compose_l_d(&parts)?, batch.total_frames(), 0, 0, ce.clamped);
        self.diverged(&report, |_| "d_ai")?;
        self.apply(&g, ce.value, true, &comps)?;
        Ok(report)
    }

    /// Updates the generators, `D_AS` and the reconstruction decoder on
    /// `L_G` (F2: `L'_G`, also updating the recognizer); `D_AI` is frozen.
    pub fn g_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let with_asr = self.cfg.mode == Mode::F2;
        let mut comps = vec![Component::GAi, Component::GAs, Component::DAs, Component::Recon];
        if with_asr {
            comps.extend([Component::LasEncoder, Component::LasDecoder, Component::AccentEmbedding]);
        }
        let mut g = self.graph_for(&comps);
        let ctx = self.ctx();
        let b = &self.bundle;
        let x = b.input(&mut g, batch)?;
        let h_ai = b.g_ai_forward(&mut g, x, batch, &ctx);
        let h_as = b.g_as_forward(&mut g, x, batch, &ctx);
        let accents = batch.frame_accents();
        let p_ai = b.discriminate(&mut g, Branch::Invariant, h_ai, batch, &ctx)?;
        let ce_ai = losses::weighted_nll(&mut g, p_ai, &accents, batch.frame_weights());
        let p_as = b.discriminate(&mut g, Branch::Specific, h_as, batch, &ctx)?;
        let ce_as = losses::weighted_nll(&mut g, p_as, &accents, batch.frame_weights());
        let x_rec = b.reconstruct(&mut g, h_ai, h_as, batch, &ctx)?;
        let recon = losses::weighted_sq_error(&mut g, x_rec, x, batch.frame_weights());
        let cons = losses::weighted_consistency(&mut g, h_as, batch.batch, batch.pair_weights());
        let mut clamped = ce_ai.clamped + ce_as.clamped;
        let mut parts = LossParts {
            ce_ai: Some(ce_ai.value),
            ce_as: Some(ce_as.value),
            recon: Some(recon),
            consistency: Some(cons),
            asr: None,
        };
        let mut steps = 0;
        let total = if with_asr {
            let targets = batch.targets.as_ref().ok_or_else(|| Error::Data("F2 batch without targets".into()))?;
            let mem = b.las_encode(&mut g, h_ai, batch, &ctx)?;
            let out = b.las_forward(&mut g, &mem, targets, &ctx)?;
            let asr = losses::weighted_nll(&mut g, out.probs, &targets.outputs, targets.weights());
            clamped += asr.clamped;
            steps = targets.total();
            parts.asr = Some(asr.value);
            compose_l_g_prime_var(&mut g, &parts, &self.cfg.weights)?
        } else {
            compose_l_g_var(&mut g, &parts, &self.cfg.weights)?
        };
        let values = part_values(&g, &parts);
        let report = LossReport::new(
            values,
            g.value(total).item(),
            batch.total_frames(),
            batch.pair_count(),
            steps,
            clamped,
        );
        self.diverged(&report, |p| match p {
            "ce_ai" => "g_ai",
            "ce_as" => "g_as/d_as",
            "recon" => "recon",
            "consistency" => "g_as",
            "asr" => "las",
            _ => "generators",
        })?;
        self.apply(&g, total, false, &comps)?;
        Ok(report)
    }

    /// One recognition update for F1 and the baselines.
    pub fn asr_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let mode = self.cfg.mode;
        let mut comps = vec![Component::GAi, Component::LasEncoder, Component::LasDecoder];
        if mode == Mode::B3 {
            comps.push(Component::AccentEmbedding);
        }
        if mode == Mode::B4 {
            comps.push(Component::DAi);
        }
        let mut g = self.graph_for(&comps);
        let ctx = self.ctx();
        let b = &self.bundle;
        let targets = batch.targets.as_ref().ok_or_else(|| Error::Data("recognition batch without targets".into()))?;
        let x = b.input(&mut g, batch)?;
        let h_ai = b.g_ai_forward(&mut g, x, batch, &ctx);
        let mem = b.las_encode(&mut g, h_ai, batch, &ctx)?;
        let out = b.las_forward(&mut g, &mem, targets, &ctx)?;
        let asr = losses::weighted_nll(&mut g, out.probs, &targets.outputs, targets.weights());
        let mut parts = LossParts {
            ce_ai: None,
            ce_as: None,
            recon: None,
            consistency: None,
            asr: Some(asr.value),
        };
        let mut clamped = asr.clamped;
        let total = if mode == Mode::B4 {
            let rev = g.grad_reverse(h_ai, self.cfg.reversal_scale);
            let p = b.discriminate(&mut g, Branch::Invariant, rev, batch, &ctx)?;
            let ce = losses::weighted_nll(&mut g, p, &batch.frame_accents(), batch.frame_weights());
            clamped += ce.clamped;
            parts.ce_ai = Some(ce.value);
            g.lincomb(&[(asr.value, 1.0), (ce.value, 1.0)])
        } else {
            asr.value
        };
        let values = part_values(&g, &parts);
        let report = LossReport::new(values, g.value(total).item(), batch.total_frames(), 0, targets.total(), clamped);
        self.diverged(&report, |p| if p == "ce_ai" { "d_ai" } else { "las" })?;
        self.apply(&g, total, false, &comps)?;
        Ok(report)
    }
}

fn check_mode_architecture(bundle: &ModelBundle, mode: Mode) -> Result<()> {
    let inv = bundle.inventory();
    if mode == Mode::B2 && inv.accent_unit_count() != bundle.config.num_accents {
        return Err(Error::Config("b2 needs an inventory with one accent unit per accent".into()));
    }
    if mode != Mode::B2 && inv.accent_unit_count() > 0 {
        return Err(Error::Config(format!("accent units in the inventory are only meaningful for b2, not `{mode}`")));
    }
    if mode == Mode::B3 && bundle.accent_table.is_none() {
        return Err(Error::Config("b3 needs accent_embed > 0".into()));
    }
    if mode != Mode::B3 && bundle.accent_table.is_some() {
        return Err(Error::Config(format!("accent embeddings are only used by b3, not `{mode}`")));
    }
    Ok(())
}

/// Frame-level `D_AI` accuracy.
pub fn discriminator_accuracy(bundle: &ModelBundle, corpus: &Corpus) -> Result<f64> {
    let lens: Vec<usize> = corpus.utterances.iter().map(|u| u.features.len()).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for idx in batching::sorted_batches(&lens, decode_eval::INFERENCE_BATCH_FRAMES) {
        let utts: Vec<&Utterance> = idx.iter().map(|&i| &corpus.utterances[i]).collect();
        let batch = Batch::new(&utts, None, bundle.inventory())?;
        let mut g = Graph::inference();
        let ctx = ForwardCtx::eval();
        let x = bundle.input(&mut g, &batch)?;
        let h = bundle.g_ai_forward(&mut g, x, &batch, &ctx);
        let p = bundle.discriminate(&mut g, Branch::Invariant, h, &batch, &ctx)?;
        let pv = g.value(p);
        for (bi, &len) in batch.lens.iter().enumerate() {
            for t in 0..len {
                total += 1;
                if argmax(pv.row(t * batch.batch + bi)) == batch.accents[bi] {
                    hits += 1;
                }
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Training utterances with their label ids.
struct Prepared<'a> {
    utts: Vec<&'a Utterance>,
    labels: Option<Vec<Vec<usize>>>,
    skipped: usize,
}

impl<'a> Prepared<'a> {
    fn new(bundle: &ModelBundle, corpus: &'a Corpus, mode: Mode) -> Result<Self> {
        if corpus.feature_dim != bundle.config.feature_dim {
            return Err(Error::shape("corpus feature dim", bundle.config.feature_dim, corpus.feature_dim));
        }
        if corpus.num_accents() != bundle.config.num_accents {
            return Err(Error::shape("corpus accent count", bundle.config.num_accents, corpus.num_accents()));
        }
        if !mode.needs_transcripts() {
            return Ok(Prepared {
                utts: corpus.utterances.iter().collect(),
                labels: None,
                skipped: 0,
            });
        }
        let mut utts = Vec::new();
        let mut labels = Vec::new();
        let mut skipped = 0;
        for u in &corpus.utterances {
            match target_ids(bundle.inventory(), u)? {
                Some(ids) => {
                    utts.push(u);
                    labels.push(ids);
                }
                None => skipped += 1,
            }
        }
        Ok(Prepared {
            utts,
            labels: Some(labels),
            skipped,
        })
    }

    fn lens(&self) -> Vec<usize> {
        self.utts.iter().map(|u| u.features.len()).collect()
    }

    fn batch(&self, bundle: &ModelBundle, idx: &[usize]) -> Result<Batch> {
        let utts: Vec<&Utterance> = idx.iter().map(|&i| self.utts[i]).collect();
        let labels: Option<Vec<Vec<usize>>> = self
            .labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i].clone()).collect());
        Batch::new(&utts, labels.as_deref(), bundle.inventory())
    }
}

/// Convenience wrapper: trains `bundle` in `cfg.mode` and returns the
/// updated bundle with the final state.
pub fn train(bundle: ModelBundle, train: &Corpus, valid: Option<&Corpus>, cfg: TrainConfig, out: Option<&Path>) -> Result<(ModelBundle, TrainState, Vec<LogRecord>)> {
    let mut t = Trainer::new(bundle, cfg)?;
    if let Some(dir) = out {
        t.log_to(&dir.join("train.log"))?;
    }
    let state = t.run(train, valid, out)?;
    Ok((t.bundle, state, t.log))
}

pub fn pretrain(bundle: ModelBundle, corpus: &Corpus, valid: Option<&Corpus>, mut cfg: TrainConfig) -> Result<(ModelBundle, TrainState, Vec<LogRecord>)> {
    cfg.mode = Mode::Pretrain;
    train(bundle, corpus, valid, cfg, None)
}

pub fn finetune_f1(bundle: ModelBundle, corpus: &Corpus, valid: Option<&Corpus>, mut cfg: TrainConfig) -> Result<(ModelBundle, TrainState, Vec<LogRecord>)> {
    cfg.mode = Mode::F1;
    train(bundle, corpus, valid, cfg, None)
}

pub fn finetune_f2(bundle: ModelBundle, corpus: &Corpus, valid: Option<&Corpus>, mut cfg: TrainConfig) -> Result<(ModelBundle, TrainState, Vec<LogRecord>)> {
    cfg.mode = Mode::F2;
    train(bundle, corpus, valid, cfg, None)
}

pub fn train_baseline(bundle: ModelBundle, corpus: &Corpus, valid: Option<&Corpus>, cfg: TrainConfig) -> Result<(ModelBundle, TrainState, Vec<LogRecord>)> {
    if !cfg.mode.is_baseline() {
        return Err(Error::validation("mode", format!("`{}` is not a baseline", cfg.mode)));
    }
    train(bundle, corpus, valid, cfg, None)
}

/// Path of the final checkpoint written by [`Trainer::run`] under `out`.
pub fn last_checkpoint(out: &Path) -> PathBuf {
    out.join("last.ackp")
}
