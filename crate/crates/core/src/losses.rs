//! Training objectives.
//!
//! Every per-frame or per-step term is a mean rather than a sum: a batch loss
//! is the frame-weighted (or step-weighted) mean over all valid positions in
//! the batch, so it equals the length-weighted mean of per-utterance losses.
//! All log terms use `ln(max(p, LOG_FLOOR))`.

use std::fmt::Write as _;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-12;

/// How batch terms are normalized; recorded in every report.
pub const NORMALIZATION: &str = "mean over valid frames/steps";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Accent-specific classification.
    pub lambda1: f64,
    /// Reconstruction.
    pub lambda2: f64,
    /// Consistency.
    pub lambda3: f64,
    /// Recognition.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 10.0,
            lambda4: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// A loss value plus how many log terms hit the floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term<T> {
    pub value: T,
    pub clamped: usize,
}

fn count_clamped(t: &Tensor) -> usize {
    t.data().iter().filter(|&&p| p < LOG_FLOOR).count()
}

/// `-sum_r w_r ln p[r, label_r]` for row distributions `probs`.
pub fn weighted_nll(g: &mut Graph, probs: Var, labels: &[usize], weights: Vec<f64>) -> Term<Var> {
    let picked = g.pick_cols(probs, labels);
    let clamped = count_clamped(g.value(picked));
    let logp = g.log_clamp(picked, LOG_FLOOR);
    let s = g.weighted_sum(logp, weights);
    Term {
        value: g.scale(s, -1.0),
        clamped,
    }
}

/// `sum_r w_r ||a_r - b_r||^2`.
pub fn weighted_sq_error(g: &mut Graph, a: Var, b: Var, weights: Vec<f64>) -> Var {
    let d = g.sub(a, b);
    let n = g.row_sq_norm(d);
    g.weighted_sum(n, weights)
}

/// Consistency over a time-major `(T*B) x H` sequence with `pair_weights`
/// over the `(T-1)*B` consecutive pairs.
pub fn weighted_consistency(g: &mut Graph, h: Var, batch: usize, pair_weights: Vec<f64>) -> Var {
    let rows = g.value(h).rows();
    if rows <= batch {
        return g.constant(Tensor::scalar(0.0));
    }
    let n = rows - batch;
    let later = g.slice_rows(h, batch, n);
    let earlier = g.slice_rows(h, 0, n);
    weighted_sq_error(g, later, earlier, pair_weights)
}

fn check_probs(probs: &Tensor, classes: usize, what: &'static str) -> Result<()> {
    if probs.rows() == 0 {
        return Err(Error::shape(what, "at least one row", 0));
    }
    if probs.cols() <= classes {
        return Err(Error::validation("label", format!("{classes} is out of range for {} classes", probs.cols())));
    }
    Ok(())
}

fn eval_scalar(build: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::inference();
    let v = build(&mut g);
    g.value(v).item()
}

/// Mean over frames of `-ln P(accent | frame)` for one utterance.
pub fn ce_accent(probs: &Tensor, accent: usize) -> Result<Term<f64>> {
    check_probs(probs, accent, "ce_accent")?;
    let t = probs.rows();
    let mut clamped = 0;
    let value = eval_scalar(|g| {
        let p = g.constant(probs.clone());
        let term = weighted_nll(g, p, &vec![accent; t], vec![1.0 / t as f64; t]);
        clamped = term.clamped;
        term.value
    });
    Ok(Term { value, clamped })
}

pub fn neg_ce_accent(probs: &Tensor, accent: usize) -> Result<Term<f64>> {
    let t = ce_accent(probs, accent)?;
    Ok(Term {
        value: -t.value,
        clamped: t.clamped,
    })
}

/// Mean over frames of `||x'_t - x_t||^2`.
pub fn recon_loss(x: &Tensor, x_rec: &Tensor) -> Result<f64> {
    if x.shape() != x_rec.shape() {
        return Err(Error::shape("recon_loss", format!("{:?}", x.shape()), format!("{:?}", x_rec.shape())));
    }
    if x.rows() == 0 {
        return Err(Error::shape("recon_loss", "at least one frame", 0));
    }
    let t = x.rows();
    Ok(eval_scalar(|g| {
        let a = g.constant(x_rec.clone());
        let b = g.constant(x.clone());
        weighted_sq_error(g, a, b, vec![1.0 / t as f64; t])
    }))
}

/// Mean over `t = 1..T-1` of `||h_{t+1} - h_t||^2`; 0 for a single frame.
pub fn consistency_loss(h: &Tensor) -> Result<f64> {
    let t = h.rows();
    if t == 0 {
        return Err(Error::shape("consistency_loss", "at least one frame", 0));
    }
    if t == 1 {
        return Ok(0.0);
    }
    Ok(eval_scalar(|g| {
        let v = g.constant(h.clone());
        weighted_consistency(g, v, 1, vec![1.0 / (t - 1) as f64; t - 1])
    }))
}

/// Mean over steps of `-ln P(y_j | ...)`; `targets` end with `<eos>`.
pub fn asr_loss(posteriors: &Tensor, targets: &[usize]) -> Result<Term<f64>> {
    if posteriors.rows() != targets.len() || targets.is_empty() {
        return Err(Error::shape("asr_loss steps", posteriors.rows(), targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= posteriors.cols()) {
        return Err(Error::validation("target", format!("{bad} is out of range")));
    }
    let n = targets.len();
    let mut clamped = 0;
    let value = eval_scalar(|g| {
        let p = g.constant(posteriors.clone());
        let term = weighted_nll(g, p, targets, vec![1.0 / n as f64; n]);
        clamped = term.clamped;
        term.value
    });
    Ok(Term { value, clamped })
}

/// Individually computed loss terms on one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts<T> {
    pub ce_ai: Option<T>,
    pub ce_as: Option<T>,
    pub recon: Option<T>,
    pub consistency: Option<T>,
    pub asr: Option<T>,
}

fn need<T: Copy>(v: Option<T>, name: &'static str) -> Result<T> {
    v.ok_or(Error::MissingPart(name))
}

/// `L_D = CE_AI`.
pub fn compose_l_d(parts: &LossParts<f64>) -> Result<f64> {
    need(parts.ce_ai, "ce_ai")
}

/// `L_G = -CE_AI + l1 CE_AS + l2 L_R + l3 L_CR`.
pub fn compose_l_g(parts: &LossParts<f64>, w: &LossWeights) -> Result<f64> {
    let ce_ai = need(parts.ce_ai, "ce_ai")?;
    let ce_as = need(parts.ce_as, "ce_as")?;
    let recon = need(parts.recon, "recon")?;
    let cons = need(parts.consistency, "consistency")?;
    Ok(-ce_ai + w.lambda1 * ce_as + w.lambda2 * recon + w.lambda3 * cons)
}

/// `L'_G = L_G + l4 L_ASR`.
pub fn compose_l_g_prime(parts: &LossParts<f64>, w: &LossWeights) -> Result<f64> {
    let asr = need(parts.asr, "asr")?;
    Ok(compose_l_g(parts, w)? + w.lambda4 * asr)
}

/// Graph counterparts of the composites, for backpropagation.
pub fn compose_l_g_var(g: &mut Graph, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    let terms = [
        (need(parts.ce_ai, "ce_ai")?, -1.0),
        (need(parts.ce_as, "ce_as")?, w.lambda1),
        (need(parts.recon, "recon")?, w.lambda2),
        (need(parts.consistency, "consistency")?, w.lambda3),
    ];
    Ok(g.lincomb(&terms))
}

pub fn compose_l_g_prime_var(g: &mut Graph, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    let asr = need(parts.asr, "asr")?;
    let lg = compose_l_g_var(g, parts, w)?;
    Ok(g.lincomb(&[(lg, 1.0), (asr, w.lambda4)]))
}

/// Reads the scalar values of graph parts.
pub fn part_values(g: &Graph, parts: &LossParts<Var>) -> LossParts<f64> {
    let v = |p: Option<Var>| p.map(|v| g.value(v).item());
    LossParts {
        ce_ai: v(parts.ce_ai),
        ce_as: v(parts.ce_as),
        recon: v(parts.recon),
        consistency: v(parts.consistency),
        asr: v(parts.asr),
    }
}

/// Per-step summary written to the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub parts: LossParts<f64>,
    /// `-ce_ai` when `ce_ai` is present.
    pub neg_ce_ai: Option<f64>,
    pub total: f64,
    /// Valid frames and consecutive-frame pairs the frame terms average over.
    pub frames: usize,
    pub pairs: usize,
    /// Decoder steps the recognition term averages over.
    pub steps: usize,
    /// Log terms that hit the floor.
    pub clamped: usize,
}

impl LossReport {
    pub fn new(parts: LossParts<f64>, total: f64, frames: usize, pairs: usize, steps: usize, clamped: usize) -> Self {
        LossReport {
            neg_ce_ai: parts.ce_ai.map(|v| -v),
            parts,
            total,
            frames,
            pairs,
            steps,
            clamped,
        }
    }

    pub fn is_finite(&self) -> bool {
        let p = &self.parts;
        self.total.is_finite()
            && [p.ce_ai, p.ce_as, p.recon, p.consistency, p.asr]
                .iter()
                .all(|v| v.map_or(true, f64::is_finite))
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_part(&self) -> Option<&'static str> {
        let p = &self.parts;
        let named = [
            ("ce_ai", p.ce_ai),
            ("ce_as", p.ce_as),
            ("recon", p.recon),
            ("consistency", p.consistency),
            ("asr", p.asr),
            ("total", Some(self.total)),
        ];
        named
            .iter()
            .find(|(_, v)| v.is_some_and(|x| !x.is_finite()))
            .map(|(n, _)| *n)
    }

    /// Tab-separated `key=value` fields, absent parts omitted.
    pub fn fields(&self) -> String {
        let mut s = String::new();
        let p = &self.parts;
        for (name, v) in [
            ("ce_ai", p.ce_ai),
            ("neg_ce_ai", self.neg_ce_ai),
            ("ce_as", p.ce_as),
            ("recon", p.recon),
            ("consistency", p.consistency),
            ("asr", p.asr),
        ] {
            if let Some(v) = v {
                let _ = write!(s, "{name}={v:.10e}\t");
            }
        }
        let _ = write!(
            s,
            "total={:.10e}\tframes={}\tpairs={}\tsteps={}\tclamped={}\tnorm=mean",
            self.total, self.frames, self.pairs, self.steps, self.clamped
        );
        s
    }
}
