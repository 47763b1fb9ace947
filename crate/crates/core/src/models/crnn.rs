use cslid_tensor::{BnMode, BnStats, Float, ParamId, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Builder, Gru, Linear};
use super::ForwardCtx;
use crate::dsp::FeatureMatrix;
use crate::error::{CoreError, Result};

/// Residual CNN front end followed by stacked bidirectional GRUs and a
/// linear classifier on the final states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrnnConfig {
    pub n_mels: usize,
    /// Output channels of each residual stage.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Frequency stride of every stage.
    pub freq_stride: usize,
    /// Time stride of each stage.
    pub time_strides: Vec<usize>,
    pub gru_layers: usize,
    /// Hidden size per direction.
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl Default for CrnnConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            channels: vec![32, 64, 128],
            kernel: 3,
            freq_stride: 2,
            time_strides: vec![1, 1, 1],
            gru_layers: 5,
            hidden: 512,
            classes: 2,
            dropout: 0.1,
        }
    }
}

impl CrnnConfig {
    /// Small enough to train in minutes on one core.
    pub fn desk() -> Self {
        Self {
            channels: vec![8, 16, 32],
            time_strides: vec![2, 1, 1],
            gru_layers: 2,
            hidden: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(format!("crnn: {msg}")));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channels {:?} must be non-empty and positive", self.channels));
        }
        if self.time_strides.len() != self.channels.len() || self.time_strides.contains(&0) {
            return bad(format!(
                "time_strides {:?} must give one positive stride per stage",
                self.time_strides
            ));
        }
        if self.kernel % 2 == 0 || self.freq_stride == 0 {
            return bad("kernel must be odd and freq_stride positive".into());
        }
        if self.gru_layers == 0 || self.hidden == 0 {
            return bad("gru_layers and hidden must be at least 1".into());
        }
        if self.classes != 2 {
            return bad(format!("classes must be 2, got {}", self.classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.freq_bins_out() == 0 {
            return bad(format!("{} mel bins vanish under the stage strides", self.n_mels));
        }
        Ok(())
    }

    fn stage_out(&self, n: usize, stride: usize) -> usize {
        let pad = self.kernel / 2;
        if n + 2 * pad < self.kernel {
            0
        } else {
            (n + 2 * pad - self.kernel) / stride + 1
        }
    }

    pub fn freq_bins_out(&self) -> usize {
        self.channels.iter().fold(self.n_mels, |f, _| self.stage_out(f, self.freq_stride))
    }

    /// Frames needed so every time stride still has input.
    pub fn min_frames(&self) -> usize {
        self.time_strides.iter().product()
    }
}

/// Tape variables of one residual block.
#[derive(Clone, Copy, Debug)]
pub struct ResidualVars {
    pub conv1: Var,
    pub gamma1: Var,
    pub beta1: Var,
    pub conv2: Var,
    pub gamma2: Var,
    pub beta2: Var,
    /// 1x1 projection, present when channels or stride change.
    pub shortcut: Option<Var>,
}

/// Batch norm over a list of `[C, T_i, F]` maps as one batch: the maps are
/// joined along time, normalized, and split again.
fn batch_norm_list<S: Float>(
    tape: &mut Tape<S>,
    xs: &[Var],
    gamma: Var,
    beta: Var,
    mode: BnMode<'_, S>,
) -> Result<(Vec<Var>, Option<BnStats<S>>)> {
    if xs.len() == 1 {
        let (y, stats) = tape.batch_norm(xs[0], gamma, beta, mode)?;
        return Ok((vec![y], stats));
    }
    let lens: Vec<usize> = xs.iter().map(|&x| tape.shape(x)[1]).collect();
    let joined = tape.concat(xs, 1)?;
    let (y, stats) = tape.batch_norm(joined, gamma, beta, mode)?;
    let mut out = Vec::with_capacity(xs.len());
    let mut start = 0;
    for len in lens {
        out.push(tape.narrow(y, 1, start, len)?);
        start += len;
    }
    Ok((out, stats))
}

/// `relu(bn(conv(relu(bn(conv(x)))))) + shortcut(x)` for each map of a
/// batch. Returns the outputs and the statistics of both norms.
pub fn residual_block<S: Float>(
    tape: &mut Tape<S>,
    xs: &[Var],
    v: &ResidualVars,
    stride: (usize, usize),
    modes: [BnMode<'_, S>; 2],
) -> Result<(Vec<Var>, [Option<BnStats<S>>; 2])> {
    let k = tape.shape(v.conv1)[2];
    let pad = (k / 2, k / 2);
    let h: Vec<Var> = xs
        .iter()
        .map(|&x| tape.conv2d(x, v.conv1, None, stride, pad))
        .collect::<Result<_, _>>()?;
    let (h, s1) = batch_norm_list(tape, &h, v.gamma1, v.beta1, modes[0])?;
    let h: Vec<Var> = h
        .into_iter()
        .map(|x| {
            let r = tape.relu(x);
            tape.conv2d(r, v.conv2, None, (1, 1), pad)
        })
        .collect::<Result<_, _>>()?;
    let (h, s2) = batch_norm_list(tape, &h, v.gamma2, v.beta2, modes[1])?;
    let mut out = Vec::with_capacity(xs.len());
    for (&x, y) in xs.iter().zip(h) {
        let y = tape.relu(y);
        let skip = match v.shortcut {
            Some(w) => tape.conv2d(x, w, None, stride, (0, 0))?,
            None => x,
        };
        out.push(tape.add(y, skip)?);
    }
    Ok((out, [s1, s2]))
}

#[derive(Clone, Debug)]
struct Block {
    conv1: ParamId,
    bn1: BatchNorm,
    conv2: ParamId,
    bn2: BatchNorm,
    shortcut: Option<ParamId>,
    stride: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Crnn<S: Float> {
    config: CrnnConfig,
    pub(crate) store: ParamStore<S>,
    blocks: Vec<Block>,
    grus: Vec<(Gru, Gru)>,
    classifier: Linear,
}

impl<S: Float> Crnn<S> {
    pub fn new<R: Rng + ?Sized>(config: &CrnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng };
        let mut blocks = Vec::new();
        let mut c_in = 1;
        for (i, (&c_out, &ts)) in config.channels.iter().zip(&config.time_strides).enumerate() {
            let name = format!("crnn.block{i}");
            let stride = (ts, config.freq_stride);
            let needs_projection = c_in != c_out || stride != (1, 1);
            blocks.push(Block {
                conv1: b.conv(&format!("{name}.conv1"), c_out, c_in, config.kernel)?,
                bn1: b.batch_norm(&format!("{name}.bn1"), c_out)?,
                conv2: b.conv(&format!("{name}.conv2"), c_out, c_out, config.kernel)?,
                bn2: b.batch_norm(&format!("{name}.bn2"), c_out)?,
                shortcut: if needs_projection {
                    Some(b.conv(&format!("{name}.shortcut"), c_out, c_in, 1)?)
                } else {
                    None
                },
                stride,
            });
            c_in = c_out;
        }
        let mut d_in = c_in * config.freq_bins_out();
        let mut grus = Vec::new();
        for l in 0..config.gru_layers {
            grus.push((
                b.gru(&format!("crnn.gru{l}.fwd"), d_in, config.hidden)?,
                b.gru(&format!("crnn.gru{l}.bwd"), d_in, config.hidden)?,
            ));
            d_in = 2 * config.hidden;
        }
        let classifier = b.linear("crnn.classifier", 2 * config.hidden, config.classes)?;
        Ok(Self {
            config: config.clone(),
            store,
            blocks,
            grus,
            classifier,
        })
    }

    pub fn config(&self) -> &CrnnConfig {
        &self.config
    }

    /// Logits `[B, classes]` for a batch of feature matrices.
    pub fn forward(&self, tape: &mut Tape<S>, feats: &[&FeatureMatrix], ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let cfg = &self.config;
        let mut xs = Vec::with_capacity(feats.len());
        for f in feats {
            if f.bins != cfg.n_mels {
                return Err(CoreError::InvalidArgument(format!("expected {} mel bins, got {}", cfg.n_mels, f.bins)));
            }
            if f.frames < cfg.min_frames() {
                return Err(CoreError::InputTooShort {
                    frames: f.frames,
                    needed: cfg.min_frames(),
                });
            }
            xs.push(tape.constant(super::feature_tensor(f, true)));
        }
        for block in &self.blocks {
            let store = &self.store;
            let vars = ResidualVars {
                conv1: tape.param(store, block.conv1),
                gamma1: tape.param(store, block.bn1.gamma),
                beta1: tape.param(store, block.bn1.beta),
                conv2: tape.param(store, block.conv2),
                gamma2: tape.param(store, block.bn2.gamma),
                beta2: tape.param(store, block.bn2.beta),
                shortcut: block.shortcut.map(|id| tape.param(store, id)),
            };
            let modes = [block.bn1.mode(store, ctx.training), block.bn2.mode(store, ctx.training)];
            let (out, [s1, s2]) = residual_block(tape, &xs, &vars, block.stride, modes)?;
            ctx.bn_updates.extend(block.bn1.update(s1));
            ctx.bn_updates.extend(block.bn2.update(s2));
            xs = out;
        }
        let h = cfg.hidden;
        let mut finals = Vec::with_capacity(xs.len());
        for x in xs {
            let mut seq = tape.channels_to_seq(x)?;
            for (l, (fwd, bwd)) in self.grus.iter().enumerate() {
                if l > 0 {
                    seq = ctx.dropout(tape, seq, cfg.dropout)?;
                }
                let (wf, wb) = (fwd.bind(tape, &self.store), bwd.bind(tape, &self.store));
                seq = tape.bi_gru(seq, wf, wb)?;
            }
            let t = tape.shape(seq)[0];
            let last = tape.narrow(seq, 0, t - 1, 1)?;
            let last_fwd = tape.narrow(last, 1, 0, h)?;
            let first = tape.narrow(seq, 0, 0, 1)?;
            let first_bwd = tape.narrow(first, 1, h, h)?;
            finals.push(tape.concat(&[last_fwd, first_bwd], 1)?);
        }
        let joined = tape.concat(&finals, 0)?;
        let joined = ctx.dropout(tape, joined, cfg.dropout)?;
        self.classifier.forward(tape, &self.store, joined)
    }
}
