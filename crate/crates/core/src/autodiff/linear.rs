use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Accumulator, Op, Tape, Var};
use crate::linalg::{gemm, View};
use crate::tensor::numel;
use crate::{Error, Real, Result, Tensor};

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl<S: Real> Tape<S> {
    fn matmul_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<(MatDims, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || Error::shape("matmul", format!("{:?} x {:?} (trans_b = {})", sa, sb, trans_b));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(err());
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = sa[..r - 2].to_vec();
        out.extend([m, n]);
        Ok((MatDims { batch, m, k, n }, out))
    }

    /// Batched product over the last two axes; `b` is used transposed when
    /// `trans_b` is set. Leading axes must agree.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (d, out_shape) = self.matmul_dims(a, b, trans_b)?;
        let mut out = vec![S::zero(); d.batch * d.m * d.n];
        let (av, bv) = (self.data(a), self.data(b));
        for i in 0..d.batch {
            let ab = &av[i * d.m * d.k..(i + 1) * d.m * d.k];
            let bb = &bv[i * d.k * d.n..(i + 1) * d.k * d.n];
            let bview = if trans_b { View::transposed(bb, d.k) } else { View::rows(bb, d.n) };
            let cb = &mut out[i * d.m * d.n..(i + 1) * d.m * d.n];
            gemm(d.m, d.k, d.n, S::one(), View::rows(ab, d.k), bview, S::zero(), cb, d.n);
        }
        Ok(self.record(Tensor::from_parts(out_shape, out), &[a, b], || Op::MatMul { a, b, trans_b }))
    }

    /// Affine map over the trailing axis: `x @ w^T + b`, `w` is `d_out x d_in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let bad = sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[1];
        let bias_bad = b.is_some_and(|b| self.shape(b) != [sw[0]]);
        if bad || bias_bad {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", sx, sw, b.map(|b| self.shape(b).to_vec())),
            ));
        }
        let (d_out, d_in) = (sw[0], sw[1]);
        let rows = numel(sx) / d_in.max(1);
        let mut out_shape = sx.to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let mut out = vec![S::zero(); rows * d_out];
        if let Some(b) = b {
            let bias = self.data(b);
            for r in 0..rows {
                out[r * d_out..(r + 1) * d_out].copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        gemm(
            rows,
            d_in,
            d_out,
            S::one(),
            View::rows(self.data(x), d_in),
            View::transposed(self.data(w), d_in),
            beta,
            &mut out,
            d_out,
        );
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.record(Tensor::from_parts(out_shape, out), &inputs, || Op::Linear { x, w, b }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut out = self.data(a).to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        Ok(self.record(Tensor::from_parts(shape, out), &[a], || Op::Softmax(a)))
    }

    /// Scaled dot-product attention: `softmax(q k^T / sqrt(d)) v`.
    ///
    /// Shapes are `[.., L_q, d]`, `[.., L_k, d]` and `[.., L_k, d_v]`.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let weights = self.attention_probs(q, k)?;
        self.matmul(weights, v, false)
    }

    pub(crate) fn attention_probs(&mut self, q: Var, k: Var) -> Result<Var> {
        let d = *self.shape(q).last().ok_or_else(|| Error::shape("attention", "rank-0 query"))?;
        let scores = self.matmul(q, k, true)?;
        let scaled = self.scale(scores, S::one() / S::from_usize(d.max(1)).sqrt());
        self.softmax(scaled)
    }

    pub(super) fn backward_matmul(&self, a: Var, b: Var, trans_b: bool, g: &[S], acc: &mut Accumulator<'_, S>) {
        let (d, _) = self.matmul_dims(a, b, trans_b).expect("validated in forward");
        let (av, bv) = (self.data(a), self.data(b));
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        acc.add(a, |ga| {
            for i in 0..d.batch {
                let gb = &g[i * sc..(i + 1) * sc];
                let bb = &bv[i * sb..(i + 1) * sb];
                // dA = dC * op(B)^T
                let bview = if trans_b { View::rows(bb, d.k) } else { View::transposed(bb, d.n) };
                gemm(d.m, d.n, d.k, S::one(), View::rows(gb, d.n), bview, S::one(), &mut ga[i * sa..(i + 1) * sa], d.k);
            }
        });
        acc.add(b, |gbm| {
            for i in 0..d.batch {
                let gb = &g[i * sc..(i + 1) * sc];
                let ab = &av[i * sa..(i + 1) * sa];
                let out = &mut gbm[i * sb..(i + 1) * sb];
                if trans_b {
                    // B is n x k: dB = dC^T * A
                    gemm(d.n, d.m, d.k, S::one(), View::transposed(gb, d.n), View::rows(ab, d.k), S::one(), out, d.k);
                } else {
                    // dB = A^T * dC
                    gemm(d.k, d.m, d.n, S::one(), View::transposed(ab, d.k), View::rows(gb, d.n), S::one(), out, d.n);
                }
            }
        });
    }

    pub(super) fn backward_linear(&self, x: Var, w: Var, b: Option<Var>, g: &[S], acc: &mut Accumulator<'_, S>) {
        let sw = self.shape(w);
        let (d_out, d_in) = (sw[0], sw[1]);
        let rows = self.data(x).len() / d_in.max(1);
        let (xv, wv) = (self.data(x), self.data(w));
        acc.add(x, |gx| {
            gemm(rows, d_out, d_in, S::one(), View::rows(g, d_out), View::rows(wv, d_in), S::one(), gx, d_in);
        });
        acc.add(w, |gw| {
            gemm(d_out, rows, d_in, S::one(), View::transposed(g, d_out), View::rows(xv, d_in), S::one(), gw, d_in);
        });
        if let Some(b) = b {
            acc.add(b, |gb| {
                for row in g.chunks(d_out) {
                    gb.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
            });
        }
    }

    pub(super) fn backward_softmax(&self, a: Var, out: usize, g: &[S], acc: &mut Accumulator<'_, S>) {
        let y = self.nodes[out].value.data();
        let d = *self.shape(a).last().unwrap();
        if d == 0 {
            return;
        }
        acc.add(a, |ga| {
            for ((gr, yr), dr) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                let dot: S = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                    *d += y * (g - dot);
                }
            }
        });
    }
}

/// Attention weights for plain slices, `[L_q, d]` against `[L_k, d]`; each
/// row sums to one.
pub fn attention_weights<S: Real>(q: &Tensor<S>, k: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::inference();
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let w = tape.attention_probs(qv, kv)?;
    Ok(tape.value(w).clone())
}
