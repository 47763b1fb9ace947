//! Row softmax / log-softmax, softmax cross-entropy and the CTC loss.

use crate::error::{shape_err, Result, TensorError};
use crate::float::{log_sum_exp, lse2, Float};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

fn softmax_row<S: Float>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&k) if k > 0 => Ok(k),
        _ => Err(shape_err(op, format!("bad shape {shape:?}"))),
    }
}

struct SoftmaxOp {
    x: Var,
    k: usize,
}

impl<S: Float> Backward<S> for SoftmaxOp {
    fn backward(&self, out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let k = self.k;
        sink.with(self.x, |g| {
            for ((y, dy), gx) in out.data().chunks_exact(k).zip(grad.chunks_exact(k)).zip(g.chunks_exact_mut(k)) {
                let dot: S = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                for j in 0..k {
                    gx[j] += y[j] * (dy[j] - dot);
                }
            }
        });
    }
}

struct LogSoftmaxOp {
    x: Var,
    k: usize,
}

impl<S: Float> Backward<S> for LogSoftmaxOp {
    fn backward(&self, out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let k = self.k;
        sink.with(self.x, |g| {
            for ((y, dy), gx) in out.data().chunks_exact(k).zip(grad.chunks_exact(k)).zip(g.chunks_exact_mut(k)) {
                let sum: S = dy.iter().copied().sum();
                for j in 0..k {
                    gx[j] += dy[j] - y[j].exp() * sum;
                }
            }
        });
    }
}

struct SoftmaxCeOp<S> {
    logits: Var,
    labels: Vec<usize>,
    probs: Vec<S>,
    k: usize,
}

impl<S: Float> Backward<S> for SoftmaxCeOp<S> {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let k = self.k;
        let n = self.labels.len();
        let scale = grad[0] / S::of(n as f64);
        sink.with(self.logits, |g| {
            for (i, &label) in self.labels.iter().enumerate() {
                for j in 0..k {
                    let onehot = if j == label { S::one() } else { S::zero() };
                    g[i * k + j] += scale * (self.probs[i * k + j] - onehot);
                }
            }
        });
    }
}

struct CtcOp<S> {
    log_probs: Var,
    grad: Vec<S>,
}

impl<S: Float> Backward<S> for CtcOp<S> {
    fn backward(&self, _out: &Tensor<S>, grad: &[S], sink: &mut GradSink<'_, S>) {
        let g0 = grad[0];
        sink.with(self.log_probs, |g| {
            for (a, &v) in g.iter_mut().zip(&self.grad) {
                *a += g0 * v;
            }
        });
    }
}

/// Number of frames a CTC target needs: one per label plus one blank between
/// each pair of equal neighbours.
fn ctc_min_frames(target: &[usize]) -> (usize, usize) {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    (target.len() + repeats, repeats)
}

/// Whether `target` can be aligned to `frames` frames.
pub fn ctc_feasible(target: &[usize], frames: usize) -> bool {
    ctc_min_frames(target).0 <= frames
}

/// CTC negative log-likelihood of `target` under per-frame log-probabilities
/// `log_probs: [T, V]` (blank = index 0), and its gradient w.r.t. every entry
/// of `log_probs`.
///
/// Runs the alpha recursion forward and the beta recursion backward entirely
/// in log space. `beta` here excludes the emission at its own frame, so that
/// `sum_s alpha_t(s) beta_t(s) = P` holds at every `t`.
pub fn ctc_loss_and_grad(log_probs: &[f64], frames: usize, vocab: usize, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    if log_probs.len() != frames * vocab || frames == 0 || vocab == 0 {
        return Err(shape_err("ctc", format!("{} log-probs for [{frames}, {vocab}]", log_probs.len())));
    }
    if let Some(&bad) = target.iter().find(|&&l| l == 0 || l >= vocab) {
        return Err(TensorError::LabelOutOfRange {
            op: "ctc",
            label: bad,
            classes: vocab,
        });
    }
    let (need, repeats) = ctc_min_frames(target);
    if need > frames {
        return Err(TensorError::InfeasibleTarget {
            target_len: target.len(),
            repeats,
            frames,
        });
    }
    let ninf = f64::NEG_INFINITY;
    let s_len = 2 * target.len() + 1;
    let ext = |s: usize| if s % 2 == 0 { 0 } else { target[s / 2] };
    let can_skip = |s: usize| s >= 2 && ext(s) != 0 && ext(s) != ext(s - 2);
    let lp = |t: usize, k: usize| log_probs[t * vocab + k];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, ext(1));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext(s)) };
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_p = if s_len > 1 { lse2(last[s_len - 1], last[s_len - 2]) } else { last[0] };
    if !log_p.is_finite() {
        return Err(TensorError::InvalidArgument("ctc: target has zero probability".into()));
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = ninf;
            for next in [s, s + 1, s + 2] {
                if next >= s_len || (next == s + 2 && !can_skip(next)) {
                    continue;
                }
                let b = beta[(t + 1) * s_len + next];
                if b > ninf {
                    acc = lse2(acc, b + lp(t + 1, ext(next)));
                }
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![0.0; frames * vocab];
    let mut per_symbol: Vec<Vec<f64>> = vec![Vec::new(); vocab];
    for t in 0..frames {
        for bucket in per_symbol.iter_mut() {
            bucket.clear();
        }
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            if v > ninf {
                per_symbol[ext(s)].push(v);
            }
        }
        for (k, bucket) in per_symbol.iter().enumerate() {
            if !bucket.is_empty() {
                grad[t * vocab + k] = -(log_sum_exp(bucket) - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

impl<S: Float> Tape<S> {
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let k = last_dim("softmax", self.shape(x))?;
        let mut out = Tensor::zeros(self.shape(x));
        for (row, o) in self.value(x).data().chunks_exact(k).zip(out.data_mut().chunks_exact_mut(k)) {
            softmax_row(row, o);
        }
        Ok(self.push_op(out, &[x], SoftmaxOp { x, k }))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let k = last_dim("log_softmax", self.shape(x))?;
        let mut out = Tensor::zeros(self.shape(x));
        for (row, o) in self.value(x).data().chunks_exact(k).zip(out.data_mut().chunks_exact_mut(k)) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            for (a, &v) in o.iter_mut().zip(row) {
                *a = v - lse;
            }
        }
        Ok(self.push_op(out, &[x], LogSoftmaxOp { x, k }))
    }

    /// Mean negative log-softmax of the true class over the rows of
    /// `logits: [N, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [n, k] = shape[..] else {
            return Err(shape_err("softmax_cross_entropy", format!("logits {shape:?} must be [N, K]")));
        };
        if labels.len() != n || n == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for logits {shape:?}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange {
                op: "softmax_cross_entropy",
                label: bad,
                classes: k,
            });
        }
        let mut probs = vec![S::zero(); n * k];
        let mut loss = 0.0;
        for (i, row) in self.value(logits).data().chunks_exact(k).enumerate() {
            softmax_row(row, &mut probs[i * k..(i + 1) * k]);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max).as_f64();
            let lse = max + row.iter().map(|&v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]].as_f64();
        }
        let out = Tensor::scalar(S::of(loss / n as f64));
        Ok(self.push_op(
            out,
            &[logits],
            SoftmaxCeOp {
                logits,
                labels: labels.to_vec(),
                probs,
                k,
            },
        ))
    }

    /// CTC loss of `target` (no blanks; blank is index 0) under
    /// `log_probs: [T, V]`.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize]) -> Result<Var> {
        let shape = self.shape(log_probs).to_vec();
        let [t, v] = shape[..] else {
            return Err(shape_err("ctc", format!("log-probs {shape:?} must be [T, V]")));
        };
        let lp: Vec<f64> = self.value(log_probs).data().iter().map(|x| x.as_f64()).collect();
        let (loss, grad) = ctc_loss_and_grad(&lp, t, v, target)?;
        let grad = grad.into_iter().map(S::of).collect();
        Ok(self.push_op(Tensor::scalar(S::of(loss)), &[log_probs], CtcOp { log_probs, grad }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_cross_entropy_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let l = tape.softmax_cross_entropy(x, &[0, 1, 1]).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_vanishes_with_growing_margin() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 100.0] {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::new(vec![1, 2], vec![margin, 0.0]).unwrap());
            let lv = tape.softmax_cross_entropy(x, &[0]).unwrap();
            let l = tape.scalar(lv);
            assert!(l < last && l >= 0.0);
            last = l;
        }
        assert!(last < 1e-40);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            tape.softmax_cross_entropy(x, &[2]),
            Err(TensorError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.3, -7.0, 2.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        assert!((tape.value(y).data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ctc_single_frame_single_label() {
        let lp = vec![0.5f64.ln(); 2];
        let (loss, _) = ctc_loss_and_grad(&lp, 1, 2, &[1]).unwrap();
        assert!((loss - (-(0.5f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn ctc_two_frames_three_alignments() {
        let lp = vec![0.5f64.ln(); 4];
        let (loss, _) = ctc_loss_and_grad(&lp, 2, 2, &[1]).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn ctc_rejects_infeasible_and_blank_targets() {
        let lp = vec![0.5f64.ln(); 4];
        assert!(matches!(
            ctc_loss_and_grad(&lp, 2, 2, &[1, 1]),
            Err(TensorError::InfeasibleTarget { repeats: 1, .. })
        ));
        assert!(ctc_loss_and_grad(&lp, 2, 2, &[0]).is_err());
        assert!(ctc_feasible(&[1, 1], 3));
        assert!(!ctc_feasible(&[1, 2, 1], 2));
    }

    #[test]
    fn ctc_empty_target_is_all_blank_path() {
        let lp: Vec<f64> = vec![0.2f64.ln(), 0.8f64.ln(), 0.6f64.ln(), 0.4f64.ln()];
        let (loss, _) = ctc_loss_and_grad(&lp, 2, 2, &[]).unwrap();
        assert!((loss - (-(0.2f64 * 0.6).ln())).abs() < 1e-12);
    }
}
