//! Token-wise residual adapter g_phi(v_base, tau_a).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{linear_uniform_init, linear_zero_init, sinusoid_values, Bound, Linear, ParamStore, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub width: usize,
    pub tau_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { width: 64, tau_dim: 16 }
    }
}

impl AdapterConfig {
    /// Width used by the full-size model.
    pub fn full_size() -> Self {
        Self { width: 512, tau_dim: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidConfig("adapter width must be positive".into()));
        }
        if self.tau_dim < 2 || !self.tau_dim.is_multiple_of(2) {
            return Err(Error::OddEmbeddingDim(self.tau_dim));
        }
        Ok(())
    }
}

/// Input projection, then two SiLU layers over `[projection, tau embedding]`,
/// then a zero-initialized output projection.
#[derive(Clone, Debug)]
pub struct Adapter {
    cfg: AdapterConfig,
    action_dim: usize,
    store: ParamStore,
    input: Linear,
    hidden: [Linear; 2],
    out: Linear,
}

impl Adapter {
    pub fn new(cfg: AdapterConfig, action_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let mut store = ParamStore::new();
        let input = Linear::register(&mut store, "input", linear_uniform_init(action_dim, w, rng));
        let h0 = Linear::register(&mut store, "hidden.0", linear_uniform_init(w + cfg.tau_dim, w, rng));
        let h1 = Linear::register(&mut store, "hidden.1", linear_uniform_init(w, w, rng));
        let out = Linear::register(&mut store, "out", linear_zero_init(w, action_dim));
        Ok(Self {
            cfg,
            action_dim,
            store,
            input,
            hidden: [h0, h1],
            out,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn output_layer(&self) -> Linear {
        self.out
    }

    /// delta_hat for `v_base` rows `[batch * tokens, action_dim]`, one tau per sample.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, v_base: Var, tau_action: &[f64]) -> Result<Var> {
        let shape = tape.value(v_base).shape().to_vec();
        let batch = tau_action.len();
        if shape.len() != 2 || shape[1] != self.action_dim || batch == 0 || !shape[0].is_multiple_of(batch) {
            return Err(shape_err("adapter", format!("{shape:?} for {batch} timesteps")));
        }
        let tokens = shape[0] / batch;
        let mut emb = Vec::with_capacity(shape[0] * self.cfg.tau_dim);
        for &tau in tau_action {
            let e = sinusoid_values(tau, self.cfg.tau_dim)?;
            for _ in 0..tokens {
                emb.extend_from_slice(&e);
            }
        }
        let emb = tape.constant(Tensor::matrix(shape[0], self.cfg.tau_dim, emb)?);
        let x = self.input.forward(tape, p, v_base)?;
        let mut x = tape.concat_cols(x, emb)?;
        for layer in &self.hidden {
            x = layer.forward(tape, p, x)?;
            x = tape.silu(x)?;
        }
        self.out.forward(tape, p, x)
    }

    /// Value-only delta_hat.
    pub fn delta(&self, v_base: &Tensor, tau_action: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, |_| false);
        let v = tape.constant(v_base.clone());
        let d = self.forward(&mut tape, &p, v, tau_action)?;
        Ok(tape.value(d).clone())
    }
}

/// Returns `(delta_hat, v_final)` with `v_final = v_base + delta_hat`.
pub fn adapter_apply(tape: &mut Tape, adapter: &Adapter, p: &Bound, v_base: Var, tau_action: &[f64]) -> Result<(Var, Var)> {
    let delta = adapter.forward(tape, p, v_base, tau_action)?;
    let v_final = tape.add(v_base, delta)?;
    Ok((delta, v_final))
}
