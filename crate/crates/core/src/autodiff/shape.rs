use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Accumulator, Op, Tape, Var};
use crate::tensor::{numel, strides};
use crate::{Error, Real, Result, Tensor};

/// Visits every element of a row-major `out_shape` together with the offset
/// of the element it reads from a source laid out with `src_strides`.
fn for_each_strided(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    if numel(out_shape) == 0 {
        return;
    }
    let last = out_shape[rank - 1];
    let last_st = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    let mut pos = 0usize;
    loop {
        for j in 0..last {
            f(pos, base + j * last_st);
            pos += 1;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn permute_data<S: Copy>(src: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let st = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_st: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    for_each_strided(&out_shape, &src_st, |_, off| out.push(src[off]));
    out
}

fn broadcast_strides(from: &[usize]) -> Vec<usize> {
    let st = strides(from);
    from.iter().zip(st).map(|(&d, s)| if d == 1 { 0 } else { s }).collect()
}

/// (outer, dim, inner) split around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<S: Real> Tape<S> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.record(value, &[a], || Op::Reshape(a)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !core::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", format!("{:?} is not a permutation of rank {}", perm, shape.len())));
        }
        let data = permute_data(self.data(a), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let perm = perm.to_vec();
        Ok(self.record(Tensor::from_parts(out_shape, data), &[a], || Op::Permute(a, perm)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Broadcasts size-1 axes to `shape` (same rank).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a).to_vec();
        let ok = from.len() == shape.len() && from.iter().zip(shape).all(|(&f, &t)| f == t || f == 1);
        if !ok {
            return Err(Error::shape("expand", format!("cannot broadcast {:?} to {:?}", from, shape)));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(numel(shape));
        for_each_strided(shape, &broadcast_strides(&from), |_, off| data.push(src[off]));
        Ok(self.record(Tensor::from_parts(shape.to_vec(), data), &[a], || Op::Expand(a)))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let (outer, dim, inner) = split(&shape, axis);
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.record(Tensor::from_parts(out_shape, data), &[a], || Op::Narrow { x: a, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let mut out_shape = self.shape(*first).to_vec();
        if axis >= out_shape.len() {
            return Err(Error::shape("concat", format!("axis {} out of range for {:?}", axis, out_shape)));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == out_shape.len()
                && s.iter().zip(&out_shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{:?} vs {:?} along axis {}", s, out_shape, axis)));
            }
            total += s[axis];
        }
        out_shape[axis] = total;
        let (outer, _, inner) = split(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let d = self.shape(x)[axis];
                data.extend_from_slice(&self.data(x)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let xs_owned = xs.to_vec();
        Ok(self.record(Tensor::from_parts(out_shape, data), xs, || Op::Concat { xs: xs_owned, axis }))
    }

    pub(super) fn backward_permute(&self, a: Var, perm: &[usize], out: usize, g: &[S], acc: &mut Accumulator<'_, S>) {
        let out_shape = self.nodes[out].value.shape();
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back = permute_data(g, out_shape, &inv);
        acc.add(a, |d| d.iter_mut().zip(back).for_each(|(d, g)| *d += g));
    }

    pub(super) fn backward_expand(&self, a: Var, out: usize, g: &[S], acc: &mut Accumulator<'_, S>) {
        let out_shape = self.nodes[out].value.shape();
        let bst = broadcast_strides(self.shape(a));
        acc.add(a, |d| for_each_strided(out_shape, &bst, |pos, off| d[off] += g[pos]));
    }

    pub(super) fn backward_narrow(&self, a: Var, axis: usize, start: usize, out: usize, g: &[S], acc: &mut Accumulator<'_, S>) {
        let (outer, dim, inner) = split(self.shape(a), axis);
        let len = self.nodes[out].value.shape()[axis];
        acc.add(a, |d| {
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                let gsrc = &g[o * len * inner..(o + 1) * len * inner];
                d[base..base + len * inner].iter_mut().zip(gsrc).for_each(|(d, &g)| *d += g);
            }
        });
    }

    pub(super) fn backward_concat(&self, xs: &[Var], axis: usize, g: &[S], acc: &mut Accumulator<'_, S>) {
        let total: usize = xs.iter().map(|&x| self.shape(x)[axis]).sum();
        let (outer, _, inner) = split(self.shape(xs[0]), axis);
        let mut offset = 0;
        for &x in xs {
            let dlen = self.shape(x)[axis];
            acc.add(x, |d| {
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    let gsrc = &g[src..src + dlen * inner];
                    d[o * dlen * inner..(o + 1) * dlen * inner]
                        .iter_mut()
                        .zip(gsrc)
                        .for_each(|(d, &g)| *d += g);
                }
            });
            offset += dlen;
        }
    }
}
