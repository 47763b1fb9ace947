//! Parameter-id bundles for the layers both models use. Each layer is
//! registered once in a [`ParamStore`] and bound to tape variables per
//! forward pass.

use cslid_tensor::{init_tensor, BnMode, BnStats, Float, GruWeights, Init, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub(crate) struct Builder<'a, S: Float, R: Rng + ?Sized> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut R,
}

impl<S: Float, R: Rng + ?Sized> Builder<'_, S, R> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<ParamId> {
        let value: Tensor<S> = init_tensor(shape, init, self.rng);
        Ok(self.store.add(name, value, trainable)?)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.param(&format!("{name}.w"), &[d_in, d_out], Init::KaimingUniform { fan_in: d_in }, true)?,
            b: self.param(&format!("{name}.b"), &[d_out], Init::Zeros, true)?,
        })
    }

    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<ParamId> {
        self.param(
            &format!("{name}.w"),
            &[c_out, c_in, k, k],
            Init::KaimingUniform { fan_in: c_in * k * k },
            true,
        )
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.param(&format!("{name}.gamma"), &[channels], Init::Constant(1.0), true)?,
            beta: self.param(&format!("{name}.beta"), &[channels], Init::Zeros, true)?,
            running_mean: self.param(&format!("{name}.running_mean"), &[channels], Init::Zeros, false)?,
            running_var: self.param(&format!("{name}.running_var"), &[channels], Init::Constant(1.0), false)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.param(&format!("{name}.gamma"), &[dim], Init::Constant(1.0), true)?,
            beta: self.param(&format!("{name}.beta"), &[dim], Init::Zeros, true)?,
        })
    }

    pub fn gru(&mut self, name: &str, d_in: usize, hidden: usize) -> Result<Gru> {
        let bound = Init::Uniform(1.0 / (hidden as f64).sqrt());
        Ok(Gru {
            w_ih: self.param(&format!("{name}.w_ih"), &[d_in, 3 * hidden], bound, true)?,
            w_hh: self.param(&format!("{name}.w_hh"), &[hidden, 3 * hidden], bound, true)?,
            b_ih: self.param(&format!("{name}.b_ih"), &[3 * hidden], bound, true)?,
            b_hh: self.param(&format!("{name}.b_hh"), &[3 * hidden], bound, true)?,
        })
    }

    pub fn lstm(&mut self, name: &str, d_in: usize, hidden: usize) -> Result<Lstm> {
        let bound = Init::Uniform(1.0 / (hidden as f64).sqrt());
        Ok(Lstm {
            w_ih: self.param(&format!("{name}.w_ih"), &[d_in, 4 * hidden], bound, true)?,
            w_hh: self.param(&format!("{name}.w_hh"), &[hidden, 4 * hidden], bound, true)?,
            b: self.param(&format!("{name}.b"), &[4 * hidden], bound, true)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<S: Float>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        Ok(tape.linear(x, w, Some(b))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Running statistics measured by one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BnStats<f64>,
}

impl BatchNorm {
    pub fn mode<'s, S: Float>(&self, store: &'s ParamStore<S>, training: bool) -> BnMode<'s, S> {
        if training {
            BnMode::Batch
        } else {
            BnMode::Running {
                mean: store.get(self.running_mean).value.data(),
                var: store.get(self.running_var).value.data(),
            }
        }
    }

    pub fn update<S: Float>(&self, stats: Option<BnStats<S>>) -> Option<BnUpdate> {
        stats.map(|s| BnUpdate {
            mean: self.running_mean,
            var: self.running_var,
            stats: BnStats {
                mean: s.mean.iter().map(|v| v.as_f64()).collect(),
                var: s.var.iter().map(|v| v.as_f64()).collect(),
            },
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<S: Float>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        Ok(tape.layer_norm(x, g, b)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

impl Gru {
    pub fn bind<S: Float>(&self, tape: &mut Tape<S>, store: &ParamStore<S>) -> GruWeights {
        GruWeights {
            w_ih: tape.param(store, self.w_ih),
            w_hh: tape.param(store, self.w_hh),
            b_ih: tape.param(store, self.b_ih),
            b_hh: tape.param(store, self.b_hh),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

impl Lstm {
    pub fn forward<S: Float>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let (a, b, c) = (tape.param(store, self.w_ih), tape.param(store, self.w_hh), tape.param(store, self.b));
        Ok(tape.lstm(x, a, b, c)?)
    }
}
