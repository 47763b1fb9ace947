//! GRU and LSTM layers with hand-written backpropagation through time.
//!
//! Row-vector convention throughout: `x_t W_ih` with `W_ih: [D, G*H]`.
//! GRU gate blocks are ordered `[r, z, n]`, LSTM blocks `[i, f, g, o]`.

use crate::error::{shape_err, Result};
use crate::float::{gemm, sigmoid, Float};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

/// Time index of processing step `s`.
#[inline]
fn time_at(s: usize, t: usize, reverse: bool) -> usize {
    if reverse {
        t - 1 - s
    } else {
        s
    }
}

/// `out += h W` for `h: [H]`, `w: [H, N]`.
fn vec_mat_add<S: Float>(h: &[S], w: &[S], out: &mut [S]) {
    let n = out.len();
    for (k, &hk) in h.iter().enumerate() {
        if hk == S::zero() {
            continue;
        }
        let row = &w[k * n..(k + 1) * n];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += hk * wv;
        }
    }
}

/// `out += g W^T` for `g: [N]`, `w: [H, N]`.
fn vec_mat_t_add<S: Float>(g: &[S], w: &[S], out: &mut [S]) {
    let n = g.len();
    for (k, o) in out.iter_mut().enumerate() {
        let row = &w[k * n..(k + 1) * n];
        *o += row.iter().zip(g).map(|(&a, &b)| a * b).sum::<S>();
    }
}

fn check_rnn_shapes(
    op: &'static str,
    x: &[usize],
    w_ih: &[usize],
    w_hh: &[usize],
    biases: &[&[usize]],
    gates: usize,
) -> Result<(usize, usize, usize)> {
    let ([t, d], [wd, wg], [hh, hg]) = (x, w_ih, w_hh) else {
        return Err(shape_err(op, format!("input {x:?}, w_ih {w_ih:?}, w_hh {w_hh:?}")));
    };
    let h = *hh;
    if *t == 0 {
        return Err(shape_err(op, "empty sequence"));
    }
    if d != wd || *wg != gates * h || *hg != gates * h {
        return Err(shape_err(op, format!("input {x:?}, w_ih {w_ih:?}, w_hh {w_hh:?}")));
    }
    for b in biases {
        if *b != [gates * h] {
            return Err(shape_err(op, format!("bias {b:?} for hidden size {h}")));
        }
    }
    Ok((*t, *d, h))
}

struct GruOp<S> {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    reverse: bool,
    t: usize,
    d: usize,
    h: usize,
    r: Vec<S>,
    z: Vec<S>,
    n: Vec<S>,
    /// `h_prev W_hn + b_hn`, needed for the reset-gate gradient.
    ghn: Vec<S>,
}

impl<S: Float> Backward<S> for GruOp<S> {
    fn backward(&self, out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let (t, d, h) = (self.t, self.d, self.h);
        let g3 = 3 * h;
        let hv = out.data();
        let w_hh = sink.value(self.w_hh).data();
        let mut d_gi = vec![S::zero(); t * g3];
        let mut d_gh = vec![S::zero(); t * g3];
        let mut h_prev_rows = vec![S::zero(); t * h];
        let mut carry = vec![S::zero(); h];
        for s in (0..t).rev() {
            let ti = time_at(s, t, self.reverse);
            let prev = (s > 0).then(|| time_at(s - 1, t, self.reverse));
            let h_prev = match prev {
                Some(p) => &hv[p * h..(p + 1) * h],
                None => &[][..],
            };
            if let Some(p) = prev {
                h_prev_rows[ti * h..(ti + 1) * h].copy_from_slice(&hv[p * h..(p + 1) * h]);
            }
            let mut next_carry = vec![S::zero(); h];
            for j in 0..h {
                let idx = ti * h + j;
                let dh = grad[idx] + carry[j];
                let (r, z, n) = (self.r[idx], self.z[idx], self.n[idx]);
                let hp = if h_prev.is_empty() { S::zero() } else { h_prev[j] };
                let dn = dh * (S::one() - z);
                let dz = dh * (hp - n);
                next_carry[j] = dh * z;
                let dan = dn * (S::one() - n * n);
                let dr = dan * self.ghn[idx];
                let dar = dr * r * (S::one() - r);
                let daz = dz * z * (S::one() - z);
                let gi = &mut d_gi[ti * g3..(ti + 1) * g3];
                gi[j] = dar;
                gi[h + j] = daz;
                gi[2 * h + j] = dan;
                let gh = &mut d_gh[ti * g3..(ti + 1) * g3];
                gh[j] = dar;
                gh[h + j] = daz;
                gh[2 * h + j] = dan * r;
            }
            vec_mat_t_add(&d_gh[ti * g3..(ti + 1) * g3], w_hh, &mut next_carry);
            carry = next_carry;
        }
        let xv = sink.value(self.x).data();
        let w_ih = sink.value(self.w_ih).data();
        sink.with(self.w_hh, |g| gemm(true, false, h, g3, t, S::one(), &h_prev_rows, &d_gh, S::one(), g));
        sink.with(self.b_hh, |g| {
            for row in d_gh.chunks_exact(g3) {
                for (a, &v) in g.iter_mut().zip(row) {
                    *a += v;
                }
            }
        });
        sink.with(self.w_ih, |g| gemm(true, false, d, g3, t, S::one(), xv, &d_gi, S::one(), g));
        sink.with(self.b_ih, |g| {
            for row in d_gi.chunks_exact(g3) {
                for (a, &v) in g.iter_mut().zip(row) {
                    *a += v;
                }
            }
        });
        sink.with(self.x, |g| gemm(false, true, t, d, g3, S::one(), &d_gi, w_ih, S::one(), g));
    }
}

struct LstmOp<S> {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    t: usize,
    d: usize,
    h: usize,
    /// Gate activations `[i, f, g, o]` per time step, `[T, 4H]`.
    gates: Vec<S>,
    c: Vec<S>,
}

impl<S: Float> Backward<S> for LstmOp<S> {
    fn backward(&self, out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let (t, d, h) = (self.t, self.d, self.h);
        let g4 = 4 * h;
        let hv = out.data();
        let w_hh = sink.value(self.w_hh).data();
        let mut d_a = vec![S::zero(); t * g4];
        let mut h_prev_rows = vec![S::zero(); t * h];
        let mut dh_carry = vec![S::zero(); h];
        let mut dc_carry = vec![S::zero(); h];
        for ti in (0..t).rev() {
            if ti > 0 {
                h_prev_rows[ti * h..(ti + 1) * h].copy_from_slice(&hv[(ti - 1) * h..ti * h]);
            }
            let gates = &self.gates[ti * g4..(ti + 1) * g4];
            let da = &mut d_a[ti * g4..(ti + 1) * g4];
            for j in 0..h {
                let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let c = self.c[ti * h + j];
                let c_prev = if ti > 0 { self.c[(ti - 1) * h + j] } else { S::zero() };
                let tc = c.tanh();
                let dh = grad[ti * h + j] + dh_carry[j];
                let d_o = dh * tc;
                let dc = dc_carry[j] + dh * o * (S::one() - tc * tc);
                da[j] = dc * g * i * (S::one() - i);
                da[h + j] = dc * c_prev * f * (S::one() - f);
                da[2 * h + j] = dc * i * (S::one() - g * g);
                da[3 * h + j] = d_o * o * (S::one() - o);
                dc_carry[j] = dc * f;
            }
            dh_carry.fill(S::zero());
            vec_mat_t_add(da, w_hh, &mut dh_carry);
        }
        let xv = sink.value(self.x).data();
        let w_ih = sink.value(self.w_ih).data();
        sink.with(self.w_hh, |g| gemm(true, false, h, g4, t, S::one(), &h_prev_rows, &d_a, S::one(), g));
        sink.with(self.w_ih, |g| gemm(true, false, d, g4, t, S::one(), xv, &d_a, S::one(), g));
        sink.with(self.b, |g| {
            for row in d_a.chunks_exact(g4) {
                for (a, &v) in g.iter_mut().zip(row) {
                    *a += v;
                }
            }
        });
        sink.with(self.x, |g| gemm(false, true, t, d, g4, S::one(), &d_a, w_ih, S::one(), g));
    }
}

/// Weights of one GRU direction, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

impl<S: Float> Tape<S> {
    /// Single-direction GRU over `x: [T, D]` from a zero initial state;
    /// `reverse` runs from the last frame to the first. Output `[T, H]`, row
    /// `t` holding the state after consuming frame `t`.
    pub fn gru(&mut self, x: Var, w: GruWeights, reverse: bool) -> Result<Var> {
        let (t, d, h) = check_rnn_shapes(
            "gru",
            self.shape(x),
            self.shape(w.w_ih),
            self.shape(w.w_hh),
            &[self.shape(w.b_ih), self.shape(w.b_hh)],
            3,
        )?;
        let g3 = 3 * h;
        let mut gi = vec![S::zero(); t * g3];
        for row in gi.chunks_exact_mut(g3) {
            row.copy_from_slice(self.value(w.b_ih).data());
        }
        gemm(false, false, t, g3, d, S::one(), self.value(x).data(), self.value(w.w_ih).data(), S::one(), &mut gi);
        let w_hh = self.value(w.w_hh).data();
        let b_hh = self.value(w.b_hh).data();
        let mut out = vec![S::zero(); t * h];
        let (mut r, mut z, mut n, mut ghn) =
            (vec![S::zero(); t * h], vec![S::zero(); t * h], vec![S::zero(); t * h], vec![S::zero(); t * h]);
        let mut h_prev = vec![S::zero(); h];
        let mut gh = vec![S::zero(); g3];
        for s in 0..t {
            let ti = time_at(s, t, reverse);
            gh.copy_from_slice(b_hh);
            vec_mat_add(&h_prev, w_hh, &mut gh);
            let gx = &gi[ti * g3..(ti + 1) * g3];
            for j in 0..h {
                let idx = ti * h + j;
                let rj = sigmoid(gx[j] + gh[j]);
                let zj = sigmoid(gx[h + j] + gh[h + j]);
                let nj = (gx[2 * h + j] + rj * gh[2 * h + j]).tanh();
                r[idx] = rj;
                z[idx] = zj;
                n[idx] = nj;
                ghn[idx] = gh[2 * h + j];
                out[idx] = (S::one() - zj) * nj + zj * h_prev[j];
            }
            h_prev.copy_from_slice(&out[ti * h..(ti + 1) * h]);
        }
        let out = Tensor::new(vec![t, h], out)?;
        Ok(self.push_op(
            out,
            &[x, w.w_ih, w.w_hh, w.b_ih, w.b_hh],
            GruOp {
                x,
                w_ih: w.w_ih,
                w_hh: w.w_hh,
                b_ih: w.b_ih,
                b_hh: w.b_hh,
                reverse,
                t,
                d,
                h,
                r,
                z,
                n,
                ghn,
            },
        ))
    }

    /// Bidirectional GRU: `[forward | backward]` concatenated to `[T, 2H]`.
    pub fn bi_gru(&mut self, x: Var, fwd: GruWeights, bwd: GruWeights) -> Result<Var> {
        let f = self.gru(x, fwd, false)?;
        let b = self.gru(x, bwd, true)?;
        self.concat(&[f, b], 1)
    }

    /// LSTM over `x: [T, D]` with zero initial hidden and cell state.
    /// `w_ih: [D, 4H]`, `w_hh: [H, 4H]`, `b: [4H]`; output `[T, H]`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        let (t, d, h) = check_rnn_shapes(
            "lstm",
            self.shape(x),
            self.shape(w_ih),
            self.shape(w_hh),
            &[self.shape(b)],
            4,
        )?;
        let g4 = 4 * h;
        let mut pre = vec![S::zero(); t * g4];
        for row in pre.chunks_exact_mut(g4) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(false, false, t, g4, d, S::one(), self.value(x).data(), self.value(w_ih).data(), S::one(), &mut pre);
        let w_hh_v = self.value(w_hh).data();
        let mut gates = vec![S::zero(); t * g4];
        let mut c = vec![S::zero(); t * h];
        let mut out = vec![S::zero(); t * h];
        let mut h_prev = vec![S::zero(); h];
        let mut c_prev = vec![S::zero(); h];
        for ti in 0..t {
            let a = &mut pre[ti * g4..(ti + 1) * g4];
            vec_mat_add(&h_prev, w_hh_v, a);
            let gt = &mut gates[ti * g4..(ti + 1) * g4];
            for j in 0..h {
                let i = sigmoid(a[j]);
                let f = sigmoid(a[h + j]);
                let g = a[2 * h + j].tanh();
                let o = sigmoid(a[3 * h + j]);
                gt[j] = i;
                gt[h + j] = f;
                gt[2 * h + j] = g;
                gt[3 * h + j] = o;
                let cj = f * c_prev[j] + i * g;
                c[ti * h + j] = cj;
                out[ti * h + j] = o * cj.tanh();
            }
            h_prev.copy_from_slice(&out[ti * h..(ti + 1) * h]);
            c_prev.copy_from_slice(&c[ti * h..(ti + 1) * h]);
        }
        let out = Tensor::new(vec![t, h], out)?;
        Ok(self.push_op(
            out,
            &[x, w_ih, w_hh, b],
            LstmOp {
                x,
                w_ih,
                w_hh,
                b,
                t,
                d,
                h,
                gates,
                c,
            },
        ))
    }
}
