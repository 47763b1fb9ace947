//! Batch normalization (per channel) and layer normalization (per row).

use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

/// Which statistics a batch-norm call normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, S> {
    /// Statistics of the current input (training).
    Batch,
    /// Stored running statistics (evaluation).
    Running { mean: &'a [S], var: &'a [S] },
}

/// Per-channel statistics measured by a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

struct BatchNormOp<S> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<S>,
    inv_std: Vec<S>,
    per_channel: usize,
    batch_stats: bool,
}

impl<S: Float> Backward<S> for BatchNormOp<S> {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let n = self.per_channel;
        let gv = sink.value(self.gamma).data();
        let xhat = &self.xhat;
        sink.with(self.gamma, |gg| {
            for (c, a) in gg.iter_mut().enumerate() {
                let r = c * n..(c + 1) * n;
                *a += grad[r.clone()].iter().zip(&xhat[r]).map(|(&d, &h)| d * h).sum::<S>();
            }
        });
        sink.with(self.beta, |gb| {
            for (c, a) in gb.iter_mut().enumerate() {
                *a += grad[c * n..(c + 1) * n].iter().copied().sum::<S>();
            }
        });
        let batch_stats = self.batch_stats;
        let inv_std = &self.inv_std;
        sink.with(self.x, |gx| {
            let nf = S::of(n as f64);
            for c in 0..gv.len() {
                let r = c * n..(c + 1) * n;
                let scale = gv[c] * inv_std[c];
                if batch_stats {
                    let dy = &grad[r.clone()];
                    let xh = &xhat[r.clone()];
                    let sum_dy: S = dy.iter().copied().sum();
                    let sum_dy_xh: S = dy.iter().zip(xh).map(|(&d, &h)| d * h).sum();
                    for (i, gi) in gx[r].iter_mut().enumerate() {
                        *gi += scale / nf * (nf * dy[i] - sum_dy - xh[i] * sum_dy_xh);
                    }
                } else {
                    for (gi, &d) in gx[r.clone()].iter_mut().zip(&grad[r]) {
                        *gi += scale * d;
                    }
                }
            }
        });
    }
}

struct LayerNormOp<S> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<S>,
    inv_std: Vec<S>,
    d: usize,
}

impl<S: Float> Backward<S> for LayerNormOp<S> {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let d = self.d;
        let gv = sink.value(self.gamma).data();
        let xhat = &self.xhat;
        sink.with(self.gamma, |gg| {
            for (dy, xh) in grad.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                for j in 0..d {
                    gg[j] += dy[j] * xh[j];
                }
            }
        });
        sink.with(self.beta, |gb| {
            for dy in grad.chunks_exact(d) {
                for j in 0..d {
                    gb[j] += dy[j];
                }
            }
        });
        let inv_std = &self.inv_std;
        sink.with(self.x, |gx| {
            let df = S::of(d as f64);
            for (r, ((dy, xh), gxr)) in grad
                .chunks_exact(d)
                .zip(xhat.chunks_exact(d))
                .zip(gx.chunks_exact_mut(d))
                .enumerate()
            {
                let mut sum = S::zero();
                let mut sum_h = S::zero();
                for j in 0..d {
                    let dxh = dy[j] * gv[j];
                    sum += dxh;
                    sum_h += dxh * xh[j];
                }
                for j in 0..d {
                    let dxh = dy[j] * gv[j];
                    gxr[j] += inv_std[r] / df * (df * dxh - sum - xh[j] * sum_h);
                }
            }
        });
    }
}

impl<S: Float> Tape<S> {
    /// Batch normalization of `x: [C, ...]` over everything but the leading
    /// channel axis. Returns the measured statistics in [`BnMode::Batch`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, S>,
    ) -> Result<(Var, Option<BnStats<S>>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.first().ok_or_else(|| shape_err("batch_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!("input {shape:?} with affine {:?}/{:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let n = self.value(x).numel() / c.max(1);
        if n == 0 {
            return Err(shape_err("batch_norm", format!("empty input {shape:?}")));
        }
        let xv = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Batch => {
                let nf = S::of(n as f64);
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for ch in 0..c {
                    let vals = &xv[ch * n..(ch + 1) * n];
                    let m = vals.iter().copied().sum::<S>() / nf;
                    let v = vals.iter().map(|&v| (v - m) * (v - m)).sum::<S>() / nf;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let stats = BnStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            BnMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", "running statistics size"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + S::of(EPS)).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for ch in 0..c {
            for i in ch * n..(ch + 1) * n {
                xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }
        }
        let out = Tensor::new(shape, out)?;
        let batch_stats = stats.is_some();
        let y = self.push_op(
            out,
            &[x, gamma, beta],
            BatchNormOp {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                per_channel: n,
                batch_stats,
            },
        );
        Ok((y, stats))
    }

    /// Normalizes every row of `x: [..., D]` and applies `gamma, beta: [D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] || d == 0 {
            return Err(shape_err(
                "layer_norm",
                format!("input {shape:?} with affine {:?}", self.shape(gamma)),
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let df = S::of(d as f64);
        let rows = xv.len() / d;
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().copied().sum::<S>() / df;
            let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<S>() / df;
            let is = S::one() / (v + S::of(EPS)).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - m) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push_op(
            out,
            &[x, gamma, beta],
            LayerNormOp {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                d,
            },
        ))
    }
}
