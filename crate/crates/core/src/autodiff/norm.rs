use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Accumulator, NormStats, Op, Tape, Var};
use crate::{Error, Real, Result, Tensor};

/// Normalizes each contiguous chunk of `group` values. Within a chunk,
/// runs of `run` values share an affine channel; chunk `i` starts at channel
/// `first(i)`.
fn normalize<S: Real>(
    x: &[S],
    group: usize,
    run: usize,
    eps: S,
    gain: &[S],
    offset: &[S],
    first: impl Fn(usize) -> usize,
) -> (Vec<S>, NormStats<S>) {
    let chunks = x.len() / group;
    let mut out = Vec::with_capacity(x.len());
    let mut mean = Vec::with_capacity(chunks);
    let mut rstd = Vec::with_capacity(chunks);
    let n = S::from_usize(group);
    for (i, chunk) in x.chunks(group).enumerate() {
        // a constant group must normalize to exactly zero; the rounded sum
        // would leave a residue that later norms amplify
        let mu = if chunk.iter().all(|&v| v == chunk[0]) { chunk[0] } else { chunk.iter().copied().sum::<S>() / n };
        let var = chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
        let r = S::one() / (var + eps).sqrt();
        let c0 = first(i);
        for (k, part) in chunk.chunks(run).enumerate() {
            let (gc, oc) = (gain[c0 + k] * r, offset[c0 + k]);
            out.extend(part.iter().map(|&v| (v - mu) * gc + oc));
        }
        mean.push(mu);
        rstd.push(r);
    }
    (out, NormStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
fn normalize_backward<S: Real>(
    x: &[S],
    g: &[S],
    group: usize,
    run: usize,
    gain: &[S],
    stats: &NormStats<S>,
    first: impl Fn(usize) -> usize,
    mut gx: Option<&mut [S]>,
    mut ggain: Option<&mut [S]>,
    mut goffset: Option<&mut [S]>,
) {
    let n = S::from_usize(group);
    for (i, (xc, gc)) in x.chunks(group).zip(g.chunks(group)).enumerate() {
        let (mu, r) = (stats.mean[i], stats.rstd[i]);
        let c0 = first(i);
        let mut sum_gh = S::zero();
        let mut sum_gh_xhat = S::zero();
        for (k, (xs, gs)) in xc.chunks(run).zip(gc.chunks(run)).enumerate() {
            let c = c0 + k;
            let mut sg = S::zero();
            let mut sgx = S::zero();
            for (&v, &gv) in xs.iter().zip(gs) {
                sg += gv;
                sgx += gv * (v - mu) * r;
            }
            sum_gh += sg * gain[c];
            sum_gh_xhat += sgx * gain[c];
            if let Some(gg) = ggain.as_deref_mut() {
                gg[c] += sgx;
            }
            if let Some(go) = goffset.as_deref_mut() {
                go[c] += sg;
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            let (m1, m2) = (sum_gh / n, sum_gh_xhat / n);
            let dst = &mut gx[i * group..(i + 1) * group];
            for (k, ((ds, xs), gs)) in dst.chunks_mut(run).zip(xc.chunks(run)).zip(gc.chunks(run)).enumerate() {
                let gain_c = gain[c0 + k];
                for ((d, &v), &gv) in ds.iter_mut().zip(xs).zip(gs) {
                    let xhat = (v - mu) * r;
                    *d += r * (gv * gain_c - m1 - xhat * m2);
                }
            }
        }
    }
}

impl<S: Real> Tape<S> {
    /// Normalizes over the trailing axis, then applies `gain` and `offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(offset) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gain {:?}, offset {:?}", shape, self.shape(gain), self.shape(offset)),
            ));
        }
        let (out, stats) = normalize(self.data(x), d, 1, eps, self.data(gain), self.data(offset), |_| 0);
        Ok(self.record(Tensor::from_parts(shape, out), &[x, gain, offset], || Op::LayerNorm {
            x,
            gain,
            offset,
            stats,
        }))
    }

    /// Group normalization of `[B, C, ...]` with a per-channel affine map.
    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, offset: Var, eps: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ok = shape.len() >= 2
            && groups > 0
            && shape[1].is_multiple_of(groups)
            && self.shape(gain) == [shape[1]]
            && self.shape(offset) == [shape[1]];
        if !ok {
            return Err(Error::shape(
                "group_norm",
                format!("input {:?} with {} groups, gain {:?}", shape, groups, self.shape(gain)),
            ));
        }
        let (c, spatial) = (shape[1], shape[2..].iter().product::<usize>());
        let per_group = c / groups * spatial;
        let first = move |i: usize| (i % groups) * (c / groups);
        let (out, stats) = normalize(self.data(x), per_group, spatial, eps, self.data(gain), self.data(offset), first);
        Ok(self.record(Tensor::from_parts(shape, out), &[x, gain, offset], || Op::GroupNorm {
            x,
            gain,
            offset,
            groups,
            stats,
        }))
    }

    fn norm_backward(
        &self,
        x: Var,
        gain: Var,
        offset: Var,
        group: usize,
        run: usize,
        stats: &NormStats<S>,
        first: impl Fn(usize) -> usize,
        g: &[S],
        acc: &mut Accumulator<'_, S>,
    ) {
        let (xv, gv) = (self.data(x), self.data(gain));
        let channels = gv.len();
        let mut gg = acc.wants(gain).then(|| vec![S::zero(); channels]);
        let mut go = acc.wants(offset).then(|| vec![S::zero(); channels]);
        if acc.wants(x) {
            acc.add(x, |gx| normalize_backward(xv, g, group, run, gv, stats, &first, Some(gx), gg.as_deref_mut(), go.as_deref_mut()));
        } else {
            normalize_backward(xv, g, group, run, gv, stats, &first, None, gg.as_deref_mut(), go.as_deref_mut());
        }
        if let Some(gg) = gg {
            acc.add(gain, |dst| dst.iter_mut().zip(gg).for_each(|(d, v)| *d += v));
        }
        if let Some(go) = go {
            acc.add(offset, |dst| dst.iter_mut().zip(go).for_each(|(d, v)| *d += v));
        }
    }

    pub(super) fn backward_layer_norm(&self, x: Var, gain: Var, offset: Var, stats: &NormStats<S>, g: &[S], acc: &mut Accumulator<'_, S>) {
        let d = self.shape(gain)[0];
        self.norm_backward(x, gain, offset, d, 1, stats, |_| 0, g, acc);
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn backward_group_norm(
        &self,
        x: Var,
        gain: Var,
        offset: Var,
        groups: usize,
        stats: &NormStats<S>,
        g: &[S],
        acc: &mut Accumulator<'_, S>,
    ) {
        let shape = self.shape(x);
        let (c, spatial) = (shape[1], shape[2..].iter().product::<usize>());
        self.norm_backward(x, gain, offset, c / groups * spatial, spatial, stats, |i| (i % groups) * (c / groups), g, acc);
    }
}
