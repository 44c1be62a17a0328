use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of the parameters named in `grads`; others are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", store.name(*id))));
            }
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape("adam gradient", format!("{:?}", store.get(*id).shape()), format!("{:?}", g.shape())));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (id, g) in grads {
            let i = id.0;
            if self.m.len() <= i {
                self.m.resize(i + 1, None);
                self.v.resize(i + 1, None);
            }
            let (r, c) = g.shape();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(r, c));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(r, c));
            let p = store.get_mut(*id);
            for (((pk, mk), vk), gk) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mk = b1 * *mk + (1.0 - b1) * gk;
                *vk = b2 * *vk + (1.0 - b2) * gk * gk;
                let mhat = *mk / c1;
                let vhat = *vk / c2;
                *pk -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment tensors keyed by parameter name, for checkpointing.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            if let (Some(m), Some(v)) = (m, v) {
                let name = store.name(ParamId(i));
                out.push((format!("m.{name}"), m.clone()));
                out.push((format!("v.{name}"), v.clone()));
            }
        }
        out
    }

    /// Restores moments exported by [`Adam::export`].
    pub fn import<'a>(&mut self, store: &ParamStore, t: u64, tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        self.t = t;
        self.m = vec![None; store.len()];
        self.v = vec![None; store.len()];
        for (key, tensor) in tensors {
            let (kind, name) = key
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("bad optimizer entry `{key}`")))?;
            let id = store
                .find(name)
                .ok_or_else(|| Error::Config(format!("optimizer state for unknown parameter `{name}`")))?;
            if tensor.shape() != store.get(id).shape() {
                return Err(Error::shape("optimizer state", format!("{:?}", store.get(id).shape()), format!("{:?}", tensor.shape())));
            }
            match kind {
                "m" => self.m[id.0] = Some(tensor.clone()),
                "v" => self.v[id.0] = Some(tensor.clone()),
                _ => return Err(Error::Config(format!("bad optimizer entry `{key}`"))),
            }
        }
        Ok(())
    }
}
