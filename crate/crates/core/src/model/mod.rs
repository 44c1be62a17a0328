//! Trainable components and their forward passes.
//!
//! All sequence tensors are time-major: row `t * B + b` is frame `t` of batch
//! element `b`. Padding frames past an utterance's length are zero on input
//! and masked out of every loss and attention distribution.

pub mod checkpoint;
pub mod inventory;
pub mod las;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::KvConfig;
use crate::corpus::{FeatureSequence, Utterance};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub use inventory::TokenInventory;
pub use las::{DecState, LasDecoder, LasOutput};
pub use layers::{Dropout, Linear, LstmLayer, LstmStack};

/// Trainable parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    GAi,
    GAs,
    DAi,
    DAs,
    Recon,
    LasEncoder,
    LasDecoder,
    AccentEmbedding,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::GAi,
        Component::GAs,
        Component::DAi,
        Component::DAs,
        Component::Recon,
        Component::LasEncoder,
        Component::LasDecoder,
        Component::AccentEmbedding,
    ];

    /// Stable per-component key for initialization and dropout streams.
    pub fn tag(self) -> u64 {
        self as u64 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::GAi => "g_ai",
            Component::GAs => "g_as",
            Component::DAi => "d_ai",
            Component::DAs => "d_as",
            Component::Recon => "recon",
            Component::LasEncoder => "las_enc",
            Component::LasDecoder => "las_dec",
            Component::AccentEmbedding => "accent_emb",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_accents: usize,
    pub g_ai_hidden: usize,
    pub g_ai_layers: usize,
    pub g_as_hidden: usize,
    pub g_as_layers: usize,
    pub disc_hidden: usize,
    pub recon_hidden: usize,
    pub recon_layers: usize,
    pub las_enc_hidden: usize,
    pub las_enc_layers: usize,
    pub las_dec_hidden: usize,
    pub las_dec_layers: usize,
    pub token_embed: usize,
    /// Width of the accent embedding fed to the recognizer; 0 disables it.
    pub accent_embed: usize,
    pub frame_stack: usize,
    pub dropout: f64,
    pub init_seed: u64,
    pub inventory: TokenInventory,
}

impl ModelConfig {
    /// Desk-scale sizes.
    pub fn desk(feature_dim: usize, num_accents: usize, inventory: TokenInventory) -> Self {
        ModelConfig {
            feature_dim,
            num_accents,
            g_ai_hidden: 8,
            g_ai_layers: 2,
            g_as_hidden: 32,
            g_as_layers: 2,
            disc_hidden: 64,
            recon_hidden: 128,
            recon_layers: 2,
            las_enc_hidden: 64,
            las_enc_layers: 2,
            las_dec_hidden: 64,
            las_dec_layers: 2,
            token_embed: 32,
            accent_embed: 0,
            frame_stack: 1,
            dropout: 0.1,
            init_seed: 1,
            inventory,
        }
    }

    /// The full-size architecture: 80-dim input, 200 word pieces.
    pub fn full_scale(num_accents: usize) -> Self {
        ModelConfig {
            g_ai_hidden: 768,
            g_as_hidden: 256,
            disc_hidden: 64,
            recon_hidden: 1024,
            las_enc_hidden: 1024,
            las_enc_layers: 4,
            las_dec_hidden: 1024,
            token_embed: 256,
            ..Self::desk(80, num_accents, TokenInventory::with_size(200))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("feature_dim", self.feature_dim),
            ("num_accents", self.num_accents),
            ("g_ai_hidden", self.g_ai_hidden),
            ("g_ai_layers", self.g_ai_layers),
            ("g_as_hidden", self.g_as_hidden),
            ("g_as_layers", self.g_as_layers),
            ("disc_hidden", self.disc_hidden),
            ("recon_hidden", self.recon_hidden),
            ("recon_layers", self.recon_layers),
            ("las_enc_hidden", self.las_enc_hidden),
            ("las_enc_layers", self.las_enc_layers),
            ("las_dec_hidden", self.las_dec_hidden),
            ("las_dec_layers", self.las_dec_layers),
            ("token_embed", self.token_embed),
            ("frame_stack", self.frame_stack),
        ];
        for (name, v) in checks {
            if v == 0 {
                return Err(Error::validation(name, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Width the recognizer encoder consumes per (stacked) frame.
    pub fn las_input_dim(&self) -> usize {
        self.g_ai_hidden * self.frame_stack + self.accent_embed
    }

    /// Parameter count implied by the architecture.
    pub fn expected_param_count(&self) -> usize {
        let stack = |input: usize, hidden: usize, depth: usize| -> usize {
            (0..depth)
                .map(|l| LstmLayer::param_count(if l == 0 { input } else { hidden }, hidden))
                .sum()
        };
        let v = self.inventory.size();
        let c = self.num_accents;
        stack(self.feature_dim, self.g_ai_hidden, self.g_ai_layers)
            + stack(self.feature_dim, self.g_as_hidden, self.g_as_layers)
            + LstmLayer::param_count(self.g_ai_hidden, self.disc_hidden)
            + Linear::param_count(self.disc_hidden, c)
            + LstmLayer::param_count(self.g_as_hidden, self.disc_hidden)
            + Linear::param_count(self.disc_hidden, c)
            + stack(self.g_ai_hidden + self.g_as_hidden, self.recon_hidden, self.recon_layers)
            + Linear::param_count(self.recon_hidden, self.feature_dim)
            + stack(self.las_input_dim(), self.las_enc_hidden, self.las_enc_layers)
            + v * self.token_embed
            + stack(self.token_embed + self.las_enc_hidden, self.las_dec_hidden, self.las_dec_layers)
            + self.las_dec_hidden * self.las_enc_hidden
            + Linear::param_count(self.las_dec_hidden + self.las_enc_hidden, v)
            + c * self.accent_embed
    }

    pub const KEYS: &'static [&'static str] = &[
        "feature_dim",
        "num_accents",
        "g_ai_hidden",
        "g_ai_layers",
        "g_as_hidden",
        "g_as_layers",
        "disc_hidden",
        "recon_hidden",
        "recon_layers",
        "las_enc_hidden",
        "las_enc_layers",
        "las_dec_hidden",
        "las_dec_layers",
        "token_embed",
        "accent_embed",
        "frame_stack",
        "dropout",
        "init_seed",
    ];

    /// Overrides sizes from `cfg`; absent keys keep the current values.
    pub fn apply(&mut self, cfg: &KvConfig) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => { $( self.$f = cfg.get_or(stringify!($f), self.$f)?; )* };
        }
        set!(
            feature_dim, num_accents, g_ai_hidden, g_ai_layers, g_as_hidden, g_as_layers,
            disc_hidden, recon_hidden, recon_layers, las_enc_hidden, las_enc_layers,
            las_dec_hidden, las_dec_layers, token_embed, accent_embed, frame_stack, dropout,
            init_seed
        );
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        macro_rules! put {
            ($($f:ident),*) => { $( kv.set(stringify!($f), self.$f); )* };
        }
        put!(
            feature_dim, num_accents, g_ai_hidden, g_ai_layers, g_as_hidden, g_as_layers,
            disc_hidden, recon_hidden, recon_layers, las_enc_hidden, las_enc_layers,
            las_dec_hidden, las_dec_layers, token_embed, accent_embed, frame_stack, dropout,
            init_seed
        );
        let (units, accent_units) = self.inventory.serialize();
        kv.set("inventory", units);
        kv.set("inventory_accent_units", accent_units);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let units = kv
            .raw("inventory")
            .ok_or_else(|| Error::Config("missing inventory".into()))?;
        let inventory = TokenInventory::deserialize(units, kv.get_or("inventory_accent_units", 0)?)?;
        let mut cfg = ModelConfig::desk(1, 1, inventory);
        for key in ["feature_dim", "num_accents"] {
            if !kv.contains(key) {
                return Err(Error::Config(format!("missing `{key}`")));
            }
        }
        cfg.apply(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub lstm: LstmLayer,
    pub out: Linear,
}

impl Discriminator {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Discriminator {
            lstm: LstmLayer::new(store, &format!("{name}.lstm"), input, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, classes, rng),
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.lstm.param_ids().to_vec();
        v.extend(self.out.param_ids());
        v
    }

    /// Per-frame accent logits, `(T*B) x C`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, h: Var, steps: usize, batch: usize, drop: &mut Dropout) -> Var {
        let s = self.lstm.forward_seq(g, store, h, steps, batch);
        let s = drop.apply(g, s);
        self.out.forward(g, store, s)
    }

    /// Per-frame accent distributions, `(T*B) x C`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, steps: usize, batch: usize, drop: &mut Dropout) -> Var {
        let l = self.logits(g, store, h, steps, batch, drop);
        g.softmax(l)
    }
}

#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub lstm: LstmStack,
    pub out: Linear,
}

/// Which discriminator to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Invariant,
    Specific,
}

/// Dropout schedule for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardCtx {
    pub dropout: f64,
    pub seed: u64,
    pub step: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            dropout: 0.0,
            seed: 0,
            step: 0,
        }
    }

    pub fn train(dropout: f64, seed: u64, step: u64) -> Self {
        ForwardCtx { dropout, seed, step }
    }

    pub fn dropout(&self, c: Component, phase: u64) -> Dropout {
        if self.dropout <= 0.0 {
            Dropout::disabled()
        } else {
            Dropout::new(self.dropout, self.seed, self.step, c.tag() * 16 + phase)
        }
    }
}

/// Decoder targets with `<sos>` prepended to inputs and `<eos>` appended to outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub steps: usize,
    /// Per step, the `B` previous-token ids fed to the decoder.
    pub inputs: Vec<Vec<usize>>,
    /// Time-major `(U*B)` gold ids.
    pub outputs: Vec<usize>,
    /// Per element, number of scored steps (label length + 1).
    pub lens: Vec<usize>,
}

impl TargetBatch {
    pub fn new(labels: &[Vec<usize>], sos: usize, eos: usize) -> Self {
        let batch = labels.len();
        let lens: Vec<usize> = labels.iter().map(|l| l.len() + 1).collect();
        let steps = lens.iter().copied().max().unwrap_or(1);
        let mut inputs = vec![vec![eos; batch]; steps];
        let mut outputs = vec![eos; steps * batch];
        for (b, l) in labels.iter().enumerate() {
            for j in 0..=l.len() {
                inputs[j][b] = if j == 0 { sos } else { l[j - 1] };
                outputs[j * batch + b] = if j < l.len() { l[j] } else { eos };
            }
        }
        TargetBatch {
            steps,
            inputs,
            outputs,
            lens,
        }
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    /// `1 / N` on scored rows, 0 on padding, time-major.
    pub fn weights(&self) -> Vec<f64> {
        let batch = self.lens.len();
        let n = self.total() as f64;
        let mut w = vec![0.0; self.steps * batch];
        for (b, &len) in self.lens.iter().enumerate() {
            for j in 0..len {
                w[j * batch + b] = 1.0 / n;
            }
        }
        w
    }
}

/// A padded minibatch of utterances.
#[derive(Clone, Debug)]
pub struct Batch {
    pub batch: usize,
    pub steps: usize,
    /// Time-major `(T*B) x F`.
    pub features: Tensor,
    pub lens: Vec<usize>,
    pub accents: Vec<usize>,
    pub targets: Option<TargetBatch>,
}

impl Batch {
    /// `labels`, when given, are raw label ids without specials.
    pub fn new(utts: &[&Utterance], labels: Option<&[Vec<usize>]>, inventory: &TokenInventory) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let batch = utts.len();
        let dim = utts[0].features.dim();
        let lens: Vec<usize> = utts.iter().map(|u| u.features.len()).collect();
        if lens.contains(&0) {
            return Err(Error::Data("utterance without frames".into()));
        }
        let steps = *lens.iter().max().unwrap();
        let mut features = Tensor::zeros(steps * batch, dim);
        for (b, u) in utts.iter().enumerate() {
            if u.features.dim() != dim {
                return Err(Error::shape("batch feature dim", dim, u.features.dim()));
            }
            for t in 0..u.features.len() {
                features
                    .row_mut(t * batch + b)
                    .copy_from_slice(u.features.frames.row(t));
            }
        }
        let targets = labels.map(|l| {
            debug_assert_eq!(l.len(), batch);
            TargetBatch::new(l, inventory.sos(), inventory.eos())
        });
        Ok(Batch {
            batch,
            steps,
            features,
            lens,
            accents: utts.iter().map(|u| u.accent).collect(),
            targets,
        })
    }

    /// A one-utterance batch without targets.
    pub fn single(features: &FeatureSequence, accent: usize) -> Self {
        Batch {
            batch: 1,
            steps: features.len(),
            features: features.frames.clone(),
            lens: vec![features.len()],
            accents: vec![accent],
            targets: None,
        }
    }

    pub fn total_frames(&self) -> usize {
        self.lens.iter().sum()
    }

    /// `1 / N` on valid frames, 0 on padding, time-major.
    pub fn frame_weights(&self) -> Vec<f64> {
        let n = self.total_frames() as f64;
        self.time_major(|t, b| if t < self.lens[b] { 1.0 / n } else { 0.0 })
    }

    pub fn pair_count(&self) -> usize {
        self.lens.iter().map(|&l| l - 1).sum()
    }

    /// Weights over the `(T-1)*B` consecutive-frame pairs; zero when no
    /// utterance has more than one frame.
    pub fn pair_weights(&self) -> Vec<f64> {
        let n = self.pair_count();
        let mut w = vec![0.0; (self.steps - 1) * self.batch];
        if n == 0 {
            return w;
        }
        for (b, &len) in self.lens.iter().enumerate() {
            for t in 0..len - 1 {
                w[t * self.batch + b] = 1.0 / n as f64;
            }
        }
        w
    }

    /// Accent label for every time-major row.
    pub fn frame_accents(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.steps * self.batch);
        for _ in 0..self.steps {
            v.extend_from_slice(&self.accents);
        }
        v
    }

    fn time_major(&self, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.steps * self.batch);
        for t in 0..self.steps {
            for b in 0..self.batch {
                w.push(f(t, b));
            }
        }
        w
    }
}

/// Encoder memory attended by the recognizer decoder.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub var: Var,
    pub steps: usize,
    /// Additive `B x steps` mask (0 or a large negative value).
    pub mask: Var,
}

pub const MASK_NEG: f64 = -1e30;

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub g_ai: LstmStack,
    pub g_as: LstmStack,
    pub d_ai: Discriminator,
    pub d_as: Discriminator,
    pub recon: Reconstructor,
    pub las_enc: LstmStack,
    pub las_dec: LasDecoder,
    pub accent_table: Option<ParamId>,
    groups: Vec<(Component, Vec<ParamId>)>,
}

impl ModelBundle {
    /// Builds and initializes every component. Each component draws its
    /// initial values from its own stream of `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let rng = |comp: Component| {
            let mut r = ChaCha8Rng::seed_from_u64(c.init_seed);
            r.set_stream(comp.tag());
            r
        };
        let mut groups = Vec::new();
        let mut track = |comp: Component, ids: Vec<ParamId>| groups.push((comp, ids));

        let g_ai = LstmStack::new(&mut store, "g_ai", c.feature_dim, c.g_ai_hidden, c.g_ai_layers, &mut rng(Component::GAi));
        track(Component::GAi, g_ai.param_ids());
        let g_as = LstmStack::new(&mut store, "g_as", c.feature_dim, c.g_as_hidden, c.g_as_layers, &mut rng(Component::GAs));
        track(Component::GAs, g_as.param_ids());
        let d_ai = Discriminator::new(&mut store, "d_ai", c.g_ai_hidden, c.disc_hidden, c.num_accents, &mut rng(Component::DAi));
        track(Component::DAi, d_ai.param_ids());
        let d_as = Discriminator::new(&mut store, "d_as", c.g_as_hidden, c.disc_hidden, c.num_accents, &mut rng(Component::DAs));
        track(Component::DAs, d_as.param_ids());
        let mut r = rng(Component::Recon);
        let recon = Reconstructor {
            lstm: LstmStack::new(&mut store, "recon", c.g_ai_hidden + c.g_as_hidden, c.recon_hidden, c.recon_layers, &mut r),
            out: Linear::new(&mut store, "recon.out", c.recon_hidden, c.feature_dim, &mut r),
        };
        let mut ids = recon.lstm.param_ids();
        ids.extend(recon.out.param_ids());
        track(Component::Recon, ids);
        let las_enc = LstmStack::new(
            &mut store,
            "las_enc",
            c.las_input_dim(),
            c.las_enc_hidden,
            c.las_enc_layers,
            &mut rng(Component::LasEncoder),
        );
        track(Component::LasEncoder, las_enc.param_ids());
        let las_dec = LasDecoder::new(&mut store, c, &mut rng(Component::LasDecoder));
        track(Component::LasDecoder, las_dec.param_ids());
        let accent_table = (c.accent_embed > 0).then(|| {
            let mut r = rng(Component::AccentEmbedding);
            store.add("accent_emb", layers::uniform(&mut r, c.num_accents, c.accent_embed, 1.0))
        });
        track(Component::AccentEmbedding, accent_table.into_iter().collect());

        if las_enc.input_dim() != c.las_input_dim() || g_ai.output_dim() * c.frame_stack + c.accent_embed != las_enc.input_dim() {
            return Err(Error::Config("G_AI output width does not match the recognizer input".into()));
        }
        Ok(ModelBundle {
            config,
            store,
            g_ai,
            g_as,
            d_ai,
            d_as,
            recon,
            las_enc,
            las_dec,
            accent_table,
            groups,
        })
    }

    pub fn inventory(&self) -> &TokenInventory {
        &self.config.inventory
    }

    pub fn params_of(&self, comp: Component) -> &[ParamId] {
        self.groups
            .iter()
            .find(|(c, _)| *c == comp)
            .map(|(_, ids)| ids.as_slice())
            .unwrap_or(&[])
    }

    /// Trainable mask for the given components, indexed by `ParamId`.
    pub fn trainable(&self, comps: &[Component]) -> Vec<bool> {
        let mut mask = vec![false; self.store.len()];
        for &c in comps {
            for id in self.params_of(c) {
                mask[id.0] = true;
            }
        }
        mask
    }

    pub fn component_values(&self, comp: Component) -> Vec<Tensor> {
        self.params_of(comp).iter().map(|&id| self.store.get(id).clone()).collect()
    }

    fn check_input(&self, batch: &Batch) -> Result<()> {
        if batch.features.cols() != self.config.feature_dim {
            return Err(Error::shape("model input", self.config.feature_dim, batch.features.cols()));
        }
        for &a in &batch.accents {
            if a >= self.config.num_accents {
                return Err(Error::validation("accent", format!("{a} out of range")));
            }
        }
        Ok(())
    }

    pub fn input(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        self.check_input(batch)?;
        Ok(g.constant(batch.features.clone()))
    }

    /// `G_AI(x)` as a `(T*B) x H_ai` sequence.
    pub fn g_ai_forward(&self, g: &mut Graph, x: Var, batch: &Batch, ctx: &ForwardCtx) -> Var {
        let mut d = ctx.dropout(Component::GAi, 0);
        self.g_ai.forward_seq(g, &self.store, x, batch.steps, batch.batch, &mut d)
    }

    pub fn g_as_forward(&self, g: &mut Graph, x: Var, batch: &Batch, ctx: &ForwardCtx) -> Var {
        let mut d = ctx.dropout(Component::GAs, 0);
        self.g_as.forward_seq(g, &self.store, x, batch.steps, batch.batch, &mut d)
    }

    pub fn forward_generators(&self, g: &mut Graph, batch: &Batch, ctx: &ForwardCtx) -> Result<(Var, Var)> {
        let x = self.input(g, batch)?;
        Ok((self.g_ai_forward(g, x, batch, ctx), self.g_as_forward(g, x, batch, ctx)))
    }

    pub fn discriminate(&self, g: &mut Graph, which: Branch, h: Var, batch: &Batch, ctx: &ForwardCtx) -> Result<Var> {
        let (disc, comp) = match which {
            Branch::Invariant => (&self.d_ai, Component::DAi),
            Branch::Specific => (&self.d_as, Component::DAs),
        };
        let width = g.value(h).cols();
        if width != disc.lstm.input || g.value(h).rows() != batch.steps * batch.batch {
            return Err(Error::shape("discriminator input", disc.lstm.input, width));
        }
        let mut d = ctx.dropout(comp, 0);
        Ok(disc.forward(g, &self.store, h, batch.steps, batch.batch, &mut d))
    }

    /// Reconstructed frames `x'` from concatenated generator outputs.
    pub fn reconstruct(&self, g: &mut Graph, h_ai: Var, h_as: Var, batch: &Batch, ctx: &ForwardCtx) -> Result<Var> {
        if g.value(h_ai).rows() != g.value(h_as).rows() {
            return Err(Error::shape("reconstruct frame count", g.value(h_ai).rows(), g.value(h_as).rows()));
        }
        let joined = g.concat_cols(&[h_ai, h_as]);
        let mut d = ctx.dropout(Component::Recon, 0);
        let s = self.recon.lstm.forward_seq(g, &self.store, joined, batch.steps, batch.batch, &mut d);
        Ok(self.recon.out.forward(g, &self.store, s))
    }

    /// Recognizer encoder over `G_AI` outputs (frame stacking and accent
    /// embedding applied when configured).
    pub fn las_encode(&self, g: &mut Graph, h_ai: Var, batch: &Batch, ctx: &ForwardCtx) -> Result<Memory> {
        let k = self.config.frame_stack;
        let (b, t) = (batch.batch, batch.steps);
        let t_out = t.div_ceil(k);
        let mut x = h_ai;
        if k > 1 {
            let width = g.value(h_ai).cols();
            let zeros = g.constant(Tensor::zeros(b, width));
            let mut pieces = Vec::with_capacity(k);
            for j in 0..k {
                let blocks: Vec<Var> = (0..t_out)
                    .map(|tt| {
                        let src = tt * k + j;
                        if src < t {
                            g.slice_rows(h_ai, src * b, b)
                        } else {
                            zeros
                        }
                    })
                    .collect();
                pieces.push(g.concat_rows(&blocks));
            }
            x = g.concat_cols(&pieces);
        }
        if let Some(table) = self.accent_table {
            let tv = g.param(&self.store, table);
            let emb = g.embed_rows(tv, &batch.accents);
            let tiled = g.tile_rows(emb, t_out);
            x = g.concat_cols(&[x, tiled]);
        }
        let mut d = ctx.dropout(Component::LasEncoder, 0);
        let enc = self.las_enc.forward_seq(g, &self.store, x, t_out, b, &mut d);
        let mut mask = Tensor::zeros(b, t_out);
        for (bi, &len) in batch.lens.iter().enumerate() {
            for tt in len.div_ceil(k)..t_out {
                mask.set(bi, tt, MASK_NEG);
            }
        }
        let mask = g.constant(mask);
        Ok(Memory {
            var: enc,
            steps: t_out,
            mask,
        })
    }

    /// Teacher-forced decoder posteriors for `targets`.
    pub fn las_forward(&self, g: &mut Graph, memory: &Memory, targets: &TargetBatch, ctx: &ForwardCtx) -> Result<LasOutput> {
        if targets.steps == 0 {
            return Err(Error::Data("empty target sequence".into()));
        }
        let mut d = ctx.dropout(Component::LasDecoder, 0);
        Ok(self.las_dec.teacher_forced(g, &self.store, memory, targets, &mut d))
    }

    /// Convenience forward through `G_AI`, the encoder and the decoder.
    pub fn asr_forward(&self, g: &mut Graph, batch: &Batch, ctx: &ForwardCtx) -> Result<(Var, LasOutput)> {
        let targets = batch
            .targets
            .as_ref()
            .ok_or_else(|| Error::Data("batch has no targets".into()))?;
        let x = self.input(g, batch)?;
        let h_ai = self.g_ai_forward(g, x, batch, ctx);
        let mem = self.las_encode(g, h_ai, batch, ctx)?;
        let out = self.las_forward(g, &mem, targets, ctx)?;
        Ok((h_ai, out))
    }

    /// Encoder memory (`steps x H_enc`) for a single utterance, dropout off.
    pub fn encode_for_decoding(&self, features: &FeatureSequence, accent: usize) -> Result<Tensor> {
        let batch = Batch::single(features, accent);
        let mut g = Graph::inference();
        let ctx = ForwardCtx::eval();
        let x = self.input(&mut g, &batch)?;
        let h = self.g_ai_forward(&mut g, x, &batch, &ctx);
        let mem = self.las_encode(&mut g, h, &batch, &ctx)?;
        Ok(g.value(mem.var).clone())
    }

    /// Row `accent` of the accent embedding table.
    pub fn accent_embed(&self, g: &mut Graph, accent: usize) -> Result<Var> {
        let table = self
            .accent_table
            .ok_or_else(|| Error::Config("model has no accent embedding".into()))?;
        if accent >= self.config.num_accents {
            return Err(Error::validation("accent", format!("{accent} out of range")));
        }
        let tv = g.param(&self.store, table);
        Ok(g.embed_rows(tv, &[accent]))
    }
}

#[cfg(test)]
pub(crate) mod tests;
