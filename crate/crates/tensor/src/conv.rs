//! 2-D cross-correlation (im2col + GEMM) and depthwise 1-D convolution.

use crate::error::{shape_err, Result};
use crate::float::{gemm, Float};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<S: Float>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let (k, p) = (g.k(), g.p());
    let mut cols = vec![S::zero(); k * p];
    for c in 0..g.ci {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let row = &mut cols[r * p..(r + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + i) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + ih as usize) * g.w..(c * g.h + ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.sw + j) as isize - g.pw as isize;
                        if iw >= 0 && iw < g.w as isize {
                            row[oh * g.wo + ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<S: Float>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let p = g.p();
    for c in 0..g.ci {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let row = &cols[r * p..(r + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + i) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ih as usize) * g.w;
                    for ow in 0..g.wo {
                        let iw = (ow * g.sw + j) as isize - g.pw as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dx[base + iw as usize] += row[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp<S> {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
    co: usize,
    cols: Vec<S>,
}

impl<S: Float> Backward<S> for Conv2dOp<S> {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let g = self.geom;
        let (co, k, p) = (self.co, g.k(), g.p());
        let wv = sink.value(self.w).data();
        let cols = &self.cols;
        sink.with(self.w, |gw| gemm(false, true, co, k, p, S::one(), grad, cols, S::one(), gw));
        if let Some(b) = self.b {
            sink.with(b, |gb| {
                for (o, row) in grad.chunks_exact(p).enumerate() {
                    gb[o] += row.iter().copied().sum::<S>();
                }
            });
        }
        if sink.wants(self.x) {
            let mut dcols = vec![S::zero(); k * p];
            gemm(true, false, k, p, co, S::one(), wv, grad, S::zero(), &mut dcols);
            sink.with(self.x, |gx| col2im_add(&dcols, &g, gx));
        }
    }
}

struct DepthwiseConv1dOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    t: usize,
    c: usize,
    k: usize,
}

impl<S: Float> Backward<S> for DepthwiseConv1dOp {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let (t, c, k) = (self.t, self.c, self.k);
        let pad = k / 2;
        let xv = sink.value(self.x).data();
        let wv = sink.value(self.w).data();
        let taps = |ti: usize, ki: usize| -> Option<usize> {
            let src = ti as isize + ki as isize - pad as isize;
            (src >= 0 && (src as usize) < t).then_some(src as usize)
        };
        sink.with(self.x, |gx| {
            for ti in 0..t {
                for ki in 0..k {
                    if let Some(si) = taps(ti, ki) {
                        for ci in 0..c {
                            gx[si * c + ci] += grad[ti * c + ci] * wv[ki * c + ci];
                        }
                    }
                }
            }
        });
        sink.with(self.w, |gw| {
            for ti in 0..t {
                for ki in 0..k {
                    if let Some(si) = taps(ti, ki) {
                        for ci in 0..c {
                            gw[ki * c + ci] += grad[ti * c + ci] * xv[si * c + ci];
                        }
                    }
                }
            }
        });
        if let Some(b) = self.b {
            sink.with(b, |gb| {
                for row in grad.chunks_exact(c) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
            });
        }
    }
}

impl<S: Float> Tape<S> {
    /// Cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, kh, kw]`
    /// plus optional bias `[C_out]`. Output `[C_out, H', W']` with
    /// `H' = (H + 2 ph - kh) / sh + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let swt = self.shape(w).to_vec();
        let (&[ci, h, wd], &[co, wci, kh, kw]) = (&sx[..], &swt[..]) else {
            return Err(shape_err(
                "conv2d",
                format!("input {sx:?} must be [C, H, W] and weight {swt:?} [O, C, kh, kw]"),
            ));
        };
        if ci != wci {
            return Err(shape_err("conv2d", format!("input {sx:?} vs weight {swt:?}")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err("conv2d", "zero stride"));
        }
        let (ph, pw) = padding;
        if h + 2 * ph < kh || wd + 2 * pw < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * ph, wd + 2 * pw),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err("conv2d", format!("bias {:?} for {co} channels", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            ci,
            h,
            w: wd,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / stride.0 + 1,
            wo: (wd + 2 * pw - kw) / stride.1 + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let (k, p) = (geom.k(), geom.p());
        let mut out = vec![S::zero(); co * p];
        if let Some(b) = b {
            for (o, row) in out.chunks_exact_mut(p).enumerate() {
                row.fill(self.value(b).data()[o]);
            }
        }
        gemm(false, false, co, p, k, S::one(), self.value(w).data(), &cols, S::one(), &mut out);
        let out = Tensor::new(vec![co, geom.ho, geom.wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let keep_cols = self.requires_grad(w) || self.requires_grad(x);
        Ok(self.push_op(
            out,
            &parents,
            Conv2dOp {
                x,
                w,
                b,
                geom,
                co,
                cols: if keep_cols { cols } else { Vec::new() },
            },
        ))
    }

    /// Per-channel convolution over time with "same" padding:
    /// `x: [T, C]`, `w: [K, C]` (odd `K`), `b: [C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let swt = self.shape(w).to_vec();
        let (&[t, c], &[k, wc]) = (&sx[..], &swt[..]) else {
            return Err(shape_err("depthwise_conv1d", format!("input {sx:?}, weight {swt:?}")));
        };
        if c != wc || k % 2 == 0 {
            return Err(shape_err(
                "depthwise_conv1d",
                format!("input {sx:?} vs weight {swt:?} (kernel must be odd)"),
            ));
        }
        let pad = k / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![S::zero(); t * c];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(c) {
                row.copy_from_slice(bv);
            }
        }
        for ti in 0..t {
            for ki in 0..k {
                let src = ti as isize + ki as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let si = src as usize;
                for ci in 0..c {
                    out[ti * c + ci] += wv[ki * c + ci] * xv[si * c + ci];
                }
            }
        }
        let out = Tensor::new(vec![t, c], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push_op(out, &parents, DepthwiseConv1dOp { x, w, b, t, c, k }))
    }
}
