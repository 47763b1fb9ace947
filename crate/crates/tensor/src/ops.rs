//! Elementwise, linear-algebra and shape ops.

use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::float::{gemm, sigmoid, Float};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::{split_axis, Tensor};

struct AddOp {
    parts: Vec<Var>,
}

impl<S: Float> Backward<S> for AddOp {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        for &p in &self.parts {
            sink.add(p, grad);
        }
    }
}

struct MulOp {
    a: Var,
    b: Var,
}

impl<S: Float> Backward<S> for MulOp {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let av = sink.value(self.a).data();
        let bv = sink.value(self.b).data();
        sink.with(self.a, |g| {
            for i in 0..g.len() {
                g[i] += grad[i] * bv[i];
            }
        });
        sink.with(self.b, |g| {
            for i in 0..g.len() {
                g[i] += grad[i] * av[i];
            }
        });
    }
}

struct ScaleOp<S> {
    x: Var,
    c: S,
}

impl<S: Float> Backward<S> for ScaleOp<S> {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let c = self.c;
        sink.with(self.x, |g| {
            for (a, &d) in g.iter_mut().zip(grad) {
                *a += c * d;
            }
        });
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Swish,
}

struct UnaryOp {
    x: Var,
    kind: Unary,
}

impl<S: Float> Backward<S> for UnaryOp {
    fn backward(&self, out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let xv = sink.value(self.x).data();
        let yv = out.data();
        let kind = self.kind;
        sink.with(self.x, |g| {
            for i in 0..g.len() {
                let d = match kind {
                    Unary::Relu => {
                        if xv[i] > S::zero() {
                            S::one()
                        } else {
                            S::zero()
                        }
                    }
                    Unary::Sigmoid => yv[i] * (S::one() - yv[i]),
                    Unary::Tanh => S::one() - yv[i] * yv[i],
                    Unary::Swish => {
                        let s = sigmoid(xv[i]);
                        s + xv[i] * s * (S::one() - s)
                    }
                };
                g[i] += grad[i] * d;
            }
        });
    }
}

struct SumAllOp {
    x: Var,
}

impl<S: Float> Backward<S> for SumAllOp {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let g0 = grad[0];
        sink.with(self.x, |g| {
            for a in g.iter_mut() {
                *a += g0;
            }
        });
    }
}

struct MatMulOp {
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
}

impl<S: Float> Backward<S> for MatMulOp {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let (m, n, k) = (self.m, self.n, self.k);
        let av = sink.value(self.a).data();
        let bv = sink.value(self.b).data();
        let (ta, tb) = (self.ta, self.tb);
        sink.with(self.a, |g| {
            if ta {
                // dA (k x m) = op(B) * dC^T
                gemm(tb, true, k, m, n, S::one(), bv, grad, S::one(), g);
            } else {
                // dA (m x k) = dC * op(B)^T
                gemm(false, !tb, m, k, n, S::one(), grad, bv, S::one(), g);
            }
        });
        sink.with(self.b, |g| {
            if tb {
                // dB (n x k) = dC^T * op(A)
                gemm(true, ta, n, k, m, S::one(), grad, av, S::one(), g);
            } else {
                // dB (k x n) = op(A)^T * dC
                gemm(!ta, false, k, n, m, S::one(), av, grad, S::one(), g);
            }
        });
    }
}

struct LinearOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    n: usize,
    d: usize,
    k: usize,
}

impl<S: Float> Backward<S> for LinearOp {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let (n, d, k) = (self.n, self.d, self.k);
        let xv = sink.value(self.x).data();
        let wv = sink.value(self.w).data();
        sink.with(self.x, |g| gemm(false, true, n, d, k, S::one(), grad, wv, S::one(), g));
        sink.with(self.w, |g| gemm(true, false, d, k, n, S::one(), xv, grad, S::one(), g));
        if let Some(b) = self.b {
            sink.with(b, |g| {
                for row in grad.chunks_exact(k) {
                    for (a, &v) in g.iter_mut().zip(row) {
                        *a += v;
                    }
                }
            });
        }
    }
}

struct ReshapeOp {
    x: Var,
}

impl<S: Float> Backward<S> for ReshapeOp {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        sink.add(self.x, grad);
    }
}

struct ConcatOp {
    parts: Vec<(Var, usize)>,
    outer: usize,
    inner: usize,
    total: usize,
}

impl<S: Float> Backward<S> for ConcatOp {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let mut offset = 0;
        for &(p, len) in &self.parts {
            let (outer, inner, total) = (self.outer, self.inner, self.total);
            sink.with(p, |g| {
                for o in 0..outer {
                    let src = &grad[(o * total + offset) * inner..(o * total + offset + len) * inner];
                    let dst = &mut g[o * len * inner..(o + 1) * len * inner];
                    for (a, &b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            });
            offset += len;
        }
    }
}

struct NarrowOp {
    x: Var,
    outer: usize,
    axis_len: usize,
    inner: usize,
    start: usize,
    len: usize,
}

impl<S: Float> Backward<S> for NarrowOp {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let (outer, axis_len, inner, start, len) =
            (self.outer, self.axis_len, self.inner, self.start, self.len);
        sink.with(self.x, |g| {
            for o in 0..outer {
                let dst = &mut g[(o * axis_len + start) * inner..(o * axis_len + start + len) * inner];
                let src = &grad[o * len * inner..(o + 1) * len * inner];
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        });
    }
}

struct ChannelsToSeqOp {
    x: Var,
    c: usize,
    t: usize,
    f: usize,
}

impl<S: Float> Backward<S> for ChannelsToSeqOp {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let (c, t, f) = (self.c, self.t, self.f);
        sink.with(self.x, |g| {
            for ci in 0..c {
                for ti in 0..t {
                    for fi in 0..f {
                        g[(ci * t + ti) * f + fi] += grad[ti * c * f + ci * f + fi];
                    }
                }
            }
        });
    }
}

struct MaskOp<S> {
    x: Var,
    mask: Vec<S>,
}

impl<S: Float> Backward<S> for MaskOp<S> {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let mask = &self.mask;
        sink.with(self.x, |g| {
            for i in 0..g.len() {
                g[i] += grad[i] * mask[i];
            }
        });
    }
}

struct GluOp {
    x: Var,
    half: usize,
}

impl<S: Float> Backward<S> for GluOp {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let xv = sink.value(self.x).data();
        let h = self.half;
        sink.with(self.x, |g| {
            for (r, grow) in grad.chunks_exact(h).enumerate() {
                let base = r * 2 * h;
                for j in 0..h {
                    let a = xv[base + j];
                    let s = sigmoid(xv[base + h + j]);
                    g[base + j] += grow[j] * s;
                    g[base + h + j] += grow[j] * a * s * (S::one() - s);
                }
            }
        });
    }
}

impl<S: Float> Tape<S> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("add_n of nothing".into()))?;
        for &p in &parts[1..] {
            self.same_shape("add", first, p)?;
        }
        let mut out = self.value(first).clone();
        for &p in &parts[1..] {
            for (a, &b) in out.data_mut().iter_mut().zip(self.value(p).data()) {
                *a += b;
            }
        }
        Ok(self.push_op(
            out,
            parts,
            AddOp {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(out, &[a, b], MulOp { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push_op(out, &[x], ScaleOp { x, c })
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let out = self.value(x).map(|v| match kind {
            Unary::Relu => v.max(S::zero()),
            Unary::Sigmoid => sigmoid(v),
            Unary::Tanh => v.tanh(),
            Unary::Swish => v * sigmoid(v),
        });
        self.push_op(out, &[x], UnaryOp { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Swish)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push_op(Tensor::scalar(s), &[x], SumAllOp { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.scale(s, S::one() / S::of(n as f64))
    }

    /// `op(a) * op(b)` for 2-D operands; `ta`/`tb` transpose the stored matrix.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?} are not matrices")));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(shape_err(
                "matmul",
                format!("{sa:?} (t={ta}) x {sb:?} (t={tb}) inner dims differ"),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(
            ta,
            tb,
            m,
            n,
            ka,
            S::one(),
            self.value(a).data(),
            self.value(b).data(),
            S::zero(),
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(
            out,
            &[a, b],
            MatMulOp {
                a,
                b,
                ta,
                tb,
                m,
                n,
                k: ka,
            },
        ))
    }

    /// `x W + b` for `x: [N, D]`, `W: [D, K]`, `b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(shape_err("linear", format!("input {sx:?} vs weight {sw:?}")));
        }
        let (n, d, k) = (sx[0], sx[1], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} vs weight {sw:?}", self.shape(b)),
                ));
            }
        }
        let mut out = vec![S::zero(); n * k];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(k) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            false,
            false,
            n,
            k,
            d,
            S::one(),
            self.value(x).data(),
            self.value(w).data(),
            S::one(),
            &mut out,
        );
        let out = Tensor::new(vec![n, k], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push_op(out, &parents, LinearOp { x, w, b, n, d, k }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(out, &[x], ReshapeOp { x }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(
            out,
            parts,
            ConcatOp {
                parts: parts.iter().copied().zip(lens).collect(),
                outer,
                inner,
                total,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * axis_len + start) * inner..(o * axis_len + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push_op(
            out,
            &[x],
            NarrowOp {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
        ))
    }

    /// `[C, T, F] -> [T, C * F]`: turns a conv feature map into a frame sequence.
    pub fn channels_to_seq(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [c, t, f] = shape[..] else {
            return Err(shape_err("channels_to_seq", format!("expected [C, T, F], got {shape:?}")));
        };
        let src = self.value(x).data();
        let mut data = vec![S::zero(); c * t * f];
        for ci in 0..c {
            for ti in 0..t {
                let from = &src[(ci * t + ti) * f..(ci * t + ti + 1) * f];
                data[ti * c * f + ci * f..ti * c * f + (ci + 1) * f].copy_from_slice(from);
            }
        }
        let out = Tensor::new(vec![t, c * f], data)?;
        Ok(self.push_op(out, &[x], ChannelsToSeqOp { x, c, t, f }))
    }

    /// Inverted dropout. Identity when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(out, &[x], MaskOp { x, mask }))
    }

    /// Gated linear unit over the last axis: `a * sigmoid(b)` with `[a, b]`
    /// the two halves.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last == 0 || last % 2 != 0 {
            return Err(shape_err("glu", format!("last axis of {shape:?} must be even")));
        }
        let half = last / 2;
        let data: Vec<S> = self
            .value(x)
            .data()
            .chunks_exact(last)
            .flat_map(|row| (0..half).map(move |j| row[j] * sigmoid(row[half + j])))
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = half;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push_op(out, &[x], GluOp { x, half }))
    }
}
