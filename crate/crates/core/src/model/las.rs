//! Attention decoder of the recognizer.
//!
//! Each step embeds the previous token, concatenates the previous attention
//! context, runs the decoder LSTM stack, attends over the encoder memory with
//! a bilinear score `h W_q m_t`, and predicts the next token from
//! `[h; context]`.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::layers::{uniform, Dropout, Linear, LstmLayer};
use super::{Memory, ModelConfig, TargetBatch};

#[derive(Clone, Debug)]
pub struct LasDecoder {
    pub embed: ParamId,
    pub layers: Vec<LstmLayer>,
    pub query: ParamId,
    pub out: Linear,
    pub hidden: usize,
    pub enc_hidden: usize,
    pub vocab: usize,
}

/// Recurrent decoder state inside a graph.
#[derive(Clone, Debug)]
pub struct DecState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    pub context: Var,
}

/// Per-beam decoder state as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct DecSnapshot {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub context: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LasOutput {
    /// Time-major `(U*B) x V` logits.
    pub logits: Var,
    /// Row-wise softmax of `logits`.
    pub probs: Var,
    /// Per step, the `B x T` attention weights.
    pub attention: Vec<Var>,
}

impl LasDecoder {
    pub fn new(store: &mut ParamStore, c: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let vocab = c.inventory.size();
        let embed = store.add("las_dec.embed", uniform(rng, vocab, c.token_embed, 1.0));
        let layers = (0..c.las_dec_layers)
            .map(|l| {
                let inp = if l == 0 { c.token_embed + c.las_enc_hidden } else { c.las_dec_hidden };
                LstmLayer::new(store, &format!("las_dec.l{l}"), inp, c.las_dec_hidden, rng)
            })
            .collect();
        let bound = 1.0 / (c.las_enc_hidden as f64).sqrt();
        let query = store.add("las_dec.query", uniform(rng, c.las_dec_hidden, c.las_enc_hidden, bound));
        let out = Linear::new(store, "las_dec.out", c.las_dec_hidden + c.las_enc_hidden, vocab, rng);
        LasDecoder {
            embed,
            layers,
            query,
            out,
            hidden: c.las_dec_hidden,
            enc_hidden: c.las_enc_hidden,
            vocab,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.embed];
        for l in &self.layers {
            v.extend(l.param_ids());
        }
        v.push(self.query);
        v.extend(self.out.param_ids());
        v
    }

    pub fn initial_state(&self, g: &mut Graph, batch: usize) -> DecState {
        let zero_h = g.constant(Tensor::zeros(batch, self.hidden));
        let zero_ctx = g.constant(Tensor::zeros(batch, self.enc_hidden));
        DecState {
            h: vec![zero_h; self.layers.len()],
            c: vec![zero_h; self.layers.len()],
            context: zero_ctx,
        }
    }

    pub fn initial_snapshot(&self) -> DecSnapshot {
        DecSnapshot {
            h: vec![vec![0.0; self.hidden]; self.layers.len()],
            c: vec![vec![0.0; self.hidden]; self.layers.len()],
            context: vec![0.0; self.enc_hidden],
        }
    }

    /// One decoder step for `prev.len()` parallel sequences.
    /// Returns `(logits, attention, next_state)`.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mem: &Memory,
        prev: &[usize],
        state: &DecState,
        drop: &mut Dropout,
    ) -> (Var, Var, DecState) {
        let table = g.param(store, self.embed);
        let emb = g.embed_rows(table, prev);
        let mut x = g.concat_cols(&[emb, state.context]);
        let mut hs = Vec::with_capacity(self.layers.len());
        let mut cs = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (h, c) = layer.step(g, store, x, state.h[l], state.c[l]);
            hs.push(h);
            cs.push(c);
            x = drop.apply(g, h);
        }
        let wq = g.param(store, self.query);
        let q = g.matmul(x, wq);
        let scores = g.attn_scores(q, mem.var, mem.steps);
        let masked = g.add(scores, mem.mask);
        let alpha = g.softmax(masked);
        let context = g.attn_context(alpha, mem.var, mem.steps);
        let joined = g.concat_cols(&[x, context]);
        let logits = self.out.forward(g, store, joined);
        (
            logits,
            alpha,
            DecState {
                h: hs,
                c: cs,
                context,
            },
        )
    }

    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mem: &Memory,
        targets: &TargetBatch,
        drop: &mut Dropout,
    ) -> LasOutput {
        let batch = targets.lens.len();
        let mut state = self.initial_state(g, batch);
        let mut logits = Vec::with_capacity(targets.steps);
        let mut attention = Vec::with_capacity(targets.steps);
        for j in 0..targets.steps {
            let (l, a, next) = self.step(g, store, mem, &targets.inputs[j], &state, drop);
            logits.push(l);
            attention.push(a);
            state = next;
        }
        let logits = g.concat_rows(&logits);
        let probs = g.softmax(logits);
        LasOutput {
            logits,
            probs,
            attention,
        }
    }

    /// Inference step over `K` hypotheses sharing one utterance's memory
    /// (`steps x H_enc`). Returns `K x V` log-posteriors and next states.
    pub fn beam_step(
        &self,
        store: &ParamStore,
        memory: &Tensor,
        prev: &[usize],
        states: &[&DecSnapshot],
    ) -> (Tensor, Vec<DecSnapshot>) {
        let k = prev.len();
        let steps = memory.rows();
        let mut g = Graph::inference();
        let mut rep = Tensor::zeros(steps * k, memory.cols());
        for t in 0..steps {
            for b in 0..k {
                rep.row_mut(t * k + b).copy_from_slice(memory.row(t));
            }
        }
        let mem = Memory {
            var: g.constant(rep),
            steps,
            mask: g.constant(Tensor::zeros(k, steps)),
        };
        let stack = |rows: Vec<&[f64]>| {
            let cols = rows[0].len();
            Tensor::from_vec(rows.len(), cols, rows.concat())
        };
        let state = DecState {
            h: (0..self.layers.len())
                .map(|l| g.constant(stack(states.iter().map(|s| s.h[l].as_slice()).collect())))
                .collect(),
            c: (0..self.layers.len())
                .map(|l| g.constant(stack(states.iter().map(|s| s.c[l].as_slice()).collect())))
                .collect(),
            context: g.constant(stack(states.iter().map(|s| s.context.as_slice()).collect())),
        };
        let (logits, _, next) = self.step(&mut g, store, &mem, prev, &state, &mut Dropout::disabled());
        let lp = g.log_softmax(logits);
        let snaps = (0..k)
            .map(|b| DecSnapshot {
                h: next.h.iter().map(|&v| g.value(v).row(b).to_vec()).collect(),
                c: next.c.iter().map(|&v| g.value(v).row(b).to_vec()).collect(),
                context: g.value(next.context).row(b).to_vec(),
            })
            .collect();
        (g.value(lp).clone(), snaps)
    }
}
