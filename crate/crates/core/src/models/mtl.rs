use cslid_tensor::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Builder, Gru, LayerNorm, Linear, Lstm};
use super::ForwardCtx;
use crate::dsp::FeatureMatrix;
use crate::error::{CoreError, Result};

/// Shared encoder of the multitask model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Conformer,
    /// Stacked bidirectional GRUs with `d_model / 2` units per direction.
    Recurrent,
}

/// Shared encoder with a CTC head over a joint vocabulary and an LSTM
/// language head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtlConfig {
    pub n_mels: usize,
    /// Consecutive frames stacked into one encoder step.
    pub stack: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub conv_kernel: usize,
    pub blocks: usize,
    pub encoder: EncoderKind,
    pub lid_hidden: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for MtlConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            stack: 4,
            d_model: 256,
            heads: 4,
            ff_mult: 4,
            conv_kernel: 15,
            blocks: 4,
            encoder: EncoderKind::Conformer,
            lid_hidden: 256,
            vocab_size: 2,
            dropout: 0.1,
        }
    }
}

impl MtlConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 32,
            heads: 2,
            ff_mult: 2,
            conv_kernel: 7,
            blocks: 2,
            lid_hidden: 32,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(format!("mtl: {msg}")));
        if self.stack == 0 || self.n_mels == 0 || self.blocks == 0 || self.lid_hidden == 0 {
            return bad("stack, n_mels, blocks and lid_hidden must be positive".into());
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 || self.d_model % 2 != 0 {
            return bad(format!(
                "d_model {} must be even and divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.ff_mult == 0 || self.conv_kernel % 2 == 0 {
            return bad("ff_mult must be positive and conv_kernel odd".into());
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} leaves no room beside the blank", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct ConformerBlock {
    ff1: FeedForward,
    attn_norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    conv_norm: LayerNorm,
    pointwise1: Linear,
    depthwise_w: ParamId,
    depthwise_b: ParamId,
    conv_norm2: LayerNorm,
    pointwise2: Linear,
    ff2: FeedForward,
    out_norm: LayerNorm,
}

#[derive(Clone, Debug)]
enum Encoder {
    Conformer(Vec<ConformerBlock>),
    Recurrent(Vec<(Gru, Gru)>),
}

/// Outputs of one utterance.
#[derive(Clone, Copy, Debug)]
pub struct MtlOutputs {
    /// CTC log-probabilities `[T', V]`, absent when the CTC head is skipped.
    pub ctc_log_probs: Option<Var>,
    /// Language logits `[1, 2]`.
    pub lid_logits: Var,
}

#[derive(Clone, Debug)]
pub struct Mtl<S: Float> {
    config: MtlConfig,
    pub(crate) store: ParamStore<S>,
    input: Linear,
    encoder: Encoder,
    ctc_head: Linear,
    lid_lstm: Lstm,
    lid_out: Linear,
}

fn feed_forward<S: Float, R: Rng + ?Sized>(b: &mut Builder<'_, S, R>, name: &str, d: usize, mult: usize) -> Result<FeedForward> {
    Ok(FeedForward {
        norm: b.layer_norm(&format!("{name}.norm"), d)?,
        up: b.linear(&format!("{name}.up"), d, mult * d)?,
        down: b.linear(&format!("{name}.down"), mult * d, d)?,
    })
}

/// Sinusoidal position table `[t, d]`.
pub fn positional_encoding<S: Float>(t: usize, d: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); t * d];
    for pos in 0..t {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            data[pos * d + i] = S::of(angle.sin());
            if i + 1 < d {
                data[pos * d + i + 1] = S::of(angle.cos());
            }
        }
    }
    Tensor::new(vec![t, d], data).expect("shape matches data")
}

impl<S: Float> Mtl<S> {
    pub fn new<R: Rng + ?Sized>(config: &MtlConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng };
        let input = b.linear("mtl.input", config.stack * config.n_mels, d)?;
        let encoder = match config.encoder {
            EncoderKind::Conformer => {
                let mut blocks = Vec::new();
                for i in 0..config.blocks {
                    let n = format!("mtl.enc.block{i}");
                    blocks.push(ConformerBlock {
                        ff1: feed_forward(&mut b, &format!("{n}.ff1"), d, config.ff_mult)?,
                        attn_norm: b.layer_norm(&format!("{n}.attn.norm"), d)?,
                        q: b.linear(&format!("{n}.attn.q"), d, d)?,
                        k: b.linear(&format!("{n}.attn.k"), d, d)?,
                        v: b.linear(&format!("{n}.attn.v"), d, d)?,
                        o: b.linear(&format!("{n}.attn.o"), d, d)?,
                        conv_norm: b.layer_norm(&format!("{n}.conv.norm"), d)?,
                        pointwise1: b.linear(&format!("{n}.conv.pw1"), d, 2 * d)?,
                        depthwise_w: b.param(
                            &format!("{n}.conv.dw.w"),
                            &[config.conv_kernel, d],
                            cslid_tensor::Init::KaimingUniform { fan_in: config.conv_kernel },
                            true,
                        )?,
                        depthwise_b: b.param(&format!("{n}.conv.dw.b"), &[d], cslid_tensor::Init::Zeros, true)?,
                        conv_norm2: b.layer_norm(&format!("{n}.conv.norm2"), d)?,
                        pointwise2: b.linear(&format!("{n}.conv.pw2"), d, d)?,
                        ff2: feed_forward(&mut b, &format!("{n}.ff2"), d, config.ff_mult)?,
                        out_norm: b.layer_norm(&format!("{n}.out_norm"), d)?,
                    });
                }
                Encoder::Conformer(blocks)
            }
            EncoderKind::Recurrent => {
                let mut layers = Vec::new();
                for i in 0..config.blocks {
                    layers.push((
                        b.gru(&format!("mtl.enc.gru{i}.fwd"), d, d / 2)?,
                        b.gru(&format!("mtl.enc.gru{i}.bwd"), d, d / 2)?,
                    ));
                }
                Encoder::Recurrent(layers)
            }
        };
        let ctc_head = b.linear(&format!("{}.out", Self::CTC_PREFIX), d, config.vocab_size)?;
        let lid_lstm = b.lstm("mtl.lid_head.lstm", d, config.lid_hidden)?;
        let lid_out = b.linear("mtl.lid_head.out", config.lid_hidden, 2)?;
        Ok(Self {
            config: config.clone(),
            store,
            input,
            encoder,
            ctc_head,
            lid_lstm,
            lid_out,
        })
    }

    /// Name prefix of every CTC head parameter.
    pub const CTC_PREFIX: &'static str = "mtl.ctc_head";

    pub fn config(&self) -> &MtlConfig {
        &self.config
    }

    /// Encoder steps produced from `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        frames / self.config.stack
    }

    fn ff(&self, tape: &mut Tape<S>, f: &FeedForward, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let h = f.norm.forward(tape, &self.store, x)?;
        let h = f.up.forward(tape, &self.store, h)?;
        let h = tape.swish(h);
        let h = ctx.dropout(tape, h, self.config.dropout)?;
        let h = f.down.forward(tape, &self.store, h)?;
        let h = ctx.dropout(tape, h, self.config.dropout)?;
        let h = tape.scale(h, S::of(0.5));
        Ok(tape.add(x, h)?)
    }

    fn attention(&self, tape: &mut Tape<S>, blk: &ConformerBlock, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let st = &self.store;
        let h = blk.attn_norm.forward(tape, st, x)?;
        let q = blk.q.forward(tape, st, h)?;
        let k = blk.k.forward(tape, st, h)?;
        let v = blk.v.forward(tape, st, h)?;
        let dh = self.config.d_model / self.config.heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.heads);
        for i in 0..self.config.heads {
            let qh = tape.narrow(q, 1, i * dh, dh)?;
            let kh = tape.narrow(k, 1, i * dh, dh)?;
            let vh = tape.narrow(v, 1, i * dh, dh)?;
            let scores = tape.matmul(qh, kh, false, true)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(probs, vh, false, false)?);
        }
        let joined = tape.concat(&heads, 1)?;
        let out = blk.o.forward(tape, st, joined)?;
        let out = ctx.dropout(tape, out, self.config.dropout)?;
        Ok(tape.add(x, out)?)
    }

    fn conv_module(&self, tape: &mut Tape<S>, blk: &ConformerBlock, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let st = &self.store;
        let h = blk.conv_norm.forward(tape, st, x)?;
        let h = blk.pointwise1.forward(tape, st, h)?;
        let h = tape.glu(h)?;
        let (w, b) = (tape.param(st, blk.depthwise_w), tape.param(st, blk.depthwise_b));
        let h = tape.depthwise_conv1d(h, w, Some(b))?;
        let h = blk.conv_norm2.forward(tape, st, h)?;
        let h = tape.swish(h);
        let h = blk.pointwise2.forward(tape, st, h)?;
        let h = ctx.dropout(tape, h, self.config.dropout)?;
        Ok(tape.add(x, h)?)
    }

    /// Encoder output `[T', d_model]` for one utterance.
    pub fn encode(&self, tape: &mut Tape<S>, feat: &FeatureMatrix, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let cfg = &self.config;
        if feat.bins != cfg.n_mels {
            return Err(CoreError::InvalidArgument(format!(
                "expected {} mel bins, got {}",
                cfg.n_mels, feat.bins
            )));
        }
        let steps = self.output_frames(feat.frames);
        if steps == 0 {
            return Err(CoreError::InputTooShort {
                frames: feat.frames,
                needed: cfg.stack,
            });
        }
        let x = tape.constant(super::feature_tensor::<S>(feat, false));
        let x = tape.narrow(x, 0, 0, steps * cfg.stack)?;
        let x = tape.reshape(x, vec![steps, cfg.stack * cfg.n_mels])?;
        let x = self.input.forward(tape, &self.store, x)?;
        let pe = tape.constant(positional_encoding(steps, cfg.d_model));
        let mut x = tape.add(x, pe)?;
        x = ctx.dropout(tape, x, cfg.dropout)?;
        match &self.encoder {
            Encoder::Conformer(blocks) => {
                for blk in blocks {
                    x = self.ff(tape, &blk.ff1, x, ctx)?;
                    x = self.attention(tape, blk, x, ctx)?;
                    x = self.conv_module(tape, blk, x, ctx)?;
                    x = self.ff(tape, &blk.ff2, x, ctx)?;
                    x = blk.out_norm.forward(tape, &self.store, x)?;
                }
            }
            Encoder::Recurrent(layers) => {
                for (i, (fwd, bwd)) in layers.iter().enumerate() {
                    if i > 0 {
                        x = ctx.dropout(tape, x, cfg.dropout)?;
                    }
                    let (wf, wb) = (fwd.bind(tape, &self.store), bwd.bind(tape, &self.store));
                    x = tape.bi_gru(x, wf, wb)?;
                }
            }
        }
        Ok(x)
    }

    /// Runs the encoder and both heads; `with_ctc = false` skips the CTC head.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        feat: &FeatureMatrix,
        with_ctc: bool,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<MtlOutputs> {
        let enc = self.encode(tape, feat, ctx)?;
        let ctc_log_probs = if with_ctc {
            let logits = self.ctc_head.forward(tape, &self.store, enc)?;
            Some(tape.log_softmax_rows(logits)?)
        } else {
            None
        };
        let seq = self.lid_lstm.forward(tape, &self.store, enc)?;
        let t = tape.shape(seq)[0];
        let last = tape.narrow(seq, 0, t - 1, 1)?;
        let last = ctx.dropout(tape, last, self.config.dropout)?;
        let lid_logits = self.lid_out.forward(tape, &self.store, last)?;
        Ok(MtlOutputs {
            ctc_log_probs,
            lid_logits,
        })
    }

    /// Language logits `[B, 2]` for a batch.
    pub fn lid_logits(&self, tape: &mut Tape<S>, feats: &[&FeatureMatrix], ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let mut rows = Vec::with_capacity(feats.len());
        for f in feats {
            rows.push(self.forward(tape, f, false, ctx)?.lid_logits);
        }
        Ok(tape.concat(&rows, 0)?)
    }
}
