use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect(),
    )
}

/// A single LSTM layer; gate order i, f, g, o.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub input: usize,
    pub hidden: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

impl LstmLayer {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_x = store.add(format!("{name}.w_x"), uniform(rng, input, 4 * hidden, bound));
        let w_h = store.add(format!("{name}.w_h"), uniform(rng, hidden, 4 * hidden, bound));
        let mut b = uniform(rng, 1, 4 * hidden, bound);
        for k in hidden..2 * hidden {
            b.data_mut()[k] += 1.0;
        }
        let bias = store.add(format!("{name}.b"), b);
        LstmLayer {
            input,
            hidden,
            w_x,
            w_h,
            bias,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.w_x, self.w_h, self.bias]
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden) + 4 * hidden
    }

    /// Runs over a time-major `(T*B) x input` sequence.
    pub fn forward_seq(&self, g: &mut Graph, store: &ParamStore, x: Var, steps: usize, batch: usize) -> Var {
        let wx = g.param(store, self.w_x);
        let wh = g.param(store, self.w_h);
        let b = g.param(store, self.bias);
        let proj = g.matmul(x, wx);
        let pre_all = g.add_bias(proj, b);
        let mut c = g.constant(Tensor::zeros(batch, self.hidden));
        let mut h: Option<Var> = None;
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut pre = g.slice_rows(pre_all, t * batch, batch);
            if let Some(hp) = h {
                let rec = g.matmul(hp, wh);
                pre = g.add(pre, rec);
            }
            let cell = g.lstm_cell(pre, c);
            let ht = g.slice_cols(cell, 0, self.hidden);
            c = g.slice_cols(cell, self.hidden, self.hidden);
            h = Some(ht);
            outs.push(ht);
        }
        g.concat_rows(&outs)
    }

    /// One step from explicit state; returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> (Var, Var) {
        let wx = g.param(store, self.w_x);
        let wh = g.param(store, self.w_h);
        let b = g.param(store, self.bias);
        let px = g.matmul(x, wx);
        let ph = g.matmul(h, wh);
        let sum = g.add(px, ph);
        let pre = g.add_bias(sum, b);
        let cell = g.lstm_cell(pre, c);
        (
            g.slice_cols(cell, 0, self.hidden),
            g.slice_cols(cell, self.hidden, self.hidden),
        )
    }
}

/// Stacked LSTM layers with dropout on every layer output.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

impl LstmStack {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let inp = if l == 0 { input } else { hidden };
                LstmLayer::new(store, &format!("{name}.l{l}"), inp, hidden, rng)
            })
            .collect();
        LstmStack { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(LstmLayer::param_ids).collect()
    }

    pub fn forward_seq(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        steps: usize,
        batch: usize,
        dropout: &mut Dropout,
    ) -> Var {
        for layer in &self.layers {
            x = layer.forward_seq(g, store, x, steps, batch);
            x = dropout.apply(g, x);
        }
        x
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.add(format!("{name}.w"), uniform(rng, input, output, bound));
        let bias = store.add(format!("{name}.b"), uniform(rng, 1, output, bound));
        Linear {
            input,
            output,
            weight,
            bias,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn param_count(input: usize, output: usize) -> usize {
        input * output + output
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Inverted dropout whose masks depend only on `(seed, step, tag, call)`.
///
/// Masks are keyed rather than drawn from a shared stream, so components can
/// be added to or removed from a forward pass without shifting the masks of
/// the others, and resuming from a checkpoint needs no generator state.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    key: u64,
    calls: u64,
}

impl Dropout {
    pub fn disabled() -> Self {
        Dropout {
            rate: 0.0,
            key: 0,
            calls: 0,
        }
    }

    pub fn new(rate: f64, seed: u64, step: u64, tag: u64) -> Self {
        Dropout {
            rate,
            key: splitmix(splitmix(splitmix(seed) ^ step) ^ tag),
            calls: 0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let (r, c) = g.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.key ^ self.calls));
        self.calls += 1;
        let keep = 1.0 - self.rate;
        let mask = Tensor::from_vec(
            r,
            c,
            (0..r * c)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        );
        let m = g.constant(mask);
        g.mul(x, m)
    }
}
