//! Language-identification models: a residual CRNN and a multitask
//! encoder with CTC and language heads.

pub mod checkpoint;
mod crnn;
mod layers;
mod mtl;

use cslid_tensor::{Float, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crnn::{residual_block, Crnn, CrnnConfig, ResidualVars};
pub use layers::BnUpdate;
pub use mtl::{positional_encoding, EncoderKind, Mtl, MtlConfig, MtlOutputs};

use crate::dsp::FeatureMatrix;
use crate::error::{CoreError, Result};
use crate::Language;

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Crnn(CrnnConfig),
    Mtl(MtlConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Crnn(c) => c.validate(),
            Self::Mtl(c) => c.validate(),
        }
    }

    pub fn n_mels(&self) -> usize {
        match self {
            Self::Crnn(c) => c.n_mels,
            Self::Mtl(c) => c.n_mels,
        }
    }

    /// Fewest input frames a forward pass accepts.
    pub fn min_frames(&self) -> usize {
        match self {
            Self::Crnn(c) => c.min_frames(),
            Self::Mtl(c) => c.stack,
        }
    }
}

/// Per-forward state: mode, dropout randomness and collected batch-norm
/// statistics.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> ForwardCtx<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng: Some(rng),
            bn_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            rng: None,
            bn_updates: Vec::new(),
        }
    }

    pub(crate) fn dropout<S: Float>(&mut self, tape: &mut Tape<S>, x: Var, p: f64) -> Result<Var> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => Ok(tape.dropout(x, p, &mut **rng, true)?),
            _ => Ok(x),
        }
    }
}

/// Features as a tensor, shifted to zero mean over the whole utterance;
/// `[1, T, F]` with a channel axis, `[T, F]` without.
pub fn feature_tensor<S: Float>(feat: &FeatureMatrix, channel: bool) -> Tensor<S> {
    let n = feat.data.len().max(1) as f64;
    let mean = feat.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let data = feat.data.iter().map(|&v| S::of(v as f64 - mean)).collect();
    let shape = if channel { vec![1, feat.frames, feat.bins] } else { vec![feat.frames, feat.bins] };
    Tensor::new(shape, data).expect("feature matrix is consistent")
}

pub(crate) fn check_loss_weights(lambda: f64, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::Config(format!("lambda {lambda} not in [0, 1]")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(CoreError::Config(format!("alpha {alpha} must be positive")));
    }
    Ok(())
}

/// `(1 - lambda) * ctc + lambda * alpha * lid`.
pub fn joint_loss(l_ctc: f64, l_lid: f64, lambda: f64, alpha: f64) -> Result<f64> {
    check_loss_weights(lambda, alpha)?;
    Ok((1.0 - lambda) * l_ctc + lambda * l_lid * alpha)
}

/// [`joint_loss`] on tape scalars.
pub fn joint_loss_tape<S: Float>(tape: &mut Tape<S>, l_ctc: Var, l_lid: Var, lambda: f64, alpha: f64) -> Result<Var> {
    check_loss_weights(lambda, alpha)?;
    let a = tape.scale(l_ctc, S::of(1.0 - lambda));
    let b = tape.scale(l_lid, S::of(lambda * alpha));
    Ok(tape.add(a, b)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub language: Language,
    /// Posterior of the predicted language.
    pub score: f64,
    /// Posterior of Mandarin, used for threshold sweeps.
    pub zh_score: f64,
}

/// Decision from one row of two logits. Ties go to English.
pub fn predict_language(logits: &[f64]) -> Result<Prediction> {
    let &[en, zh] = logits else {
        return Err(CoreError::InvalidArgument(format!("expected 2 logits, got {}", logits.len())));
    };
    if !(en.is_finite() && zh.is_finite()) {
        return Err(CoreError::InvalidArgument(format!("non-finite logits {en}, {zh}")));
    }
    let zh_score = 1.0 / (1.0 + (en - zh).exp());
    let language = if zh > en { Language::Zh } else { Language::En };
    let score = match language {
        Language::Zh => zh_score,
        Language::En => 1.0 - zh_score,
    };
    Ok(Prediction {
        language,
        score,
        zh_score,
    })
}

#[derive(Clone, Debug)]
pub enum Model<S: Float> {
    Crnn(Crnn<S>),
    Mtl(Mtl<S>),
}

impl<S: Float> Model<S> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(match config {
            ModelConfig::Crnn(c) => Self::Crnn(Crnn::new(c, rng)?),
            ModelConfig::Mtl(c) => Self::Mtl(Mtl::new(c, rng)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Self::Crnn(m) => ModelConfig::Crnn(m.config().clone()),
            Self::Mtl(m) => ModelConfig::Mtl(m.config().clone()),
        }
    }

    pub fn store(&self) -> &ParamStore<S> {
        match self {
            Self::Crnn(m) => &m.store,
            Self::Mtl(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        match self {
            Self::Crnn(m) => &mut m.store,
            Self::Mtl(m) => &mut m.store,
        }
    }

    /// Language logits `[B, 2]`.
    pub fn lid_logits(&self, tape: &mut Tape<S>, feats: &[&FeatureMatrix], ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        if feats.is_empty() {
            return Err(CoreError::EmptyInput("no utterances in batch".into()));
        }
        match self {
            Self::Crnn(m) => m.forward(tape, feats, ctx),
            Self::Mtl(m) => m.lid_logits(tape, feats, ctx),
        }
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let store = self.store_mut();
        for u in updates {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                for (r, &b) in store.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                    *r = S::of(BN_MOMENTUM * r.as_f64() + (1.0 - BN_MOMENTUM) * b);
                }
            }
        }
    }

    /// Evaluation-mode predictions, one utterance at a time.
    pub fn predict(&self, feats: &[&FeatureMatrix]) -> Result<Vec<Prediction>> {
        feats
            .iter()
            .map(|f| {
                let mut tape = Tape::new();
                let mut ctx = ForwardCtx::eval();
                let logits = self.lid_logits(&mut tape, &[f], &mut ctx)?;
                let row: Vec<f64> = tape.value(logits).data().iter().map(|v| v.as_f64()).collect();
                predict_language(&row)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
