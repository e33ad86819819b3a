use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Accumulator, Op, Tape, Var};
use crate::linalg::{gemm, View};
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_px(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `lo..hi` whose input column `ox*stride + kx - pad`
    /// lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = p.saturating_sub(kx).div_ceil(s).min(self.ow);
        let hi = if self.w + p > kx { ((self.w + p - kx - 1) / s + 1).min(self.ow) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Unfolds one image into a `(c_in*k*k) x (oh*ow)` patch matrix.
    fn im2col<S: Real>(&self, x: &[S], cols: &mut [S]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx);
                    let dst = &mut cols[row * self.out_px()..(row + 1) * self.out_px()];
                    for oy in 0..self.oh {
                        let iy = (oy * s + ky) as isize - p;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(S::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        line[..lo].fill(S::zero());
                        line[hi..].fill(S::zero());
                        if hi > lo {
                            let start = lo * s + kx - self.pad;
                            if s == 1 {
                                line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            } else {
                                for (v, &x) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(s)) {
                                    *v = x;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters patch gradients back onto the image.
    fn col2im<S: Real>(&self, cols: &[S], dx: &mut [S]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx);
                    let src = &cols[row * self.out_px()..(row + 1) * self.out_px()];
                    row += 1;
                    if hi == lo {
                        continue;
                    }
                    let start = lo * s + kx - self.pad;
                    for oy in 0..self.oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[oy * self.ow + lo..oy * self.ow + hi];
                        let dst = &mut plane[iy as usize * self.w + start..(iy as usize + 1) * self.w];
                        for (d, &v) in dst.iter_mut().step_by(s).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Leading batch size and trailing `[C, H, W]` of a rank-3 or rank-4 shape.
fn image_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((1, c, h, w)),
        [b, c, h, w] => Some((b, c, h, w)),
        _ => None,
    }
}

impl<S: Real> Tape<S> {
    fn conv_geom(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let report = || format!("input {:?}, kernel {:?}, stride {}, padding {}", sx, sw, stride, pad);
        let (batch, c_in, h, wd) = image_dims(sx).ok_or_else(|| Error::shape("conv2d", report()))?;
        if sw.len() != 4 || sw[1] != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} input channels, input has {} ({})", sw.get(1).copied().unwrap_or(0), c_in, report()),
            ));
        }
        let (c_out, k) = (sw[0], sw[2]);
        if sw[3] != k || k % 2 == 0 || stride == 0 {
            return Err(Error::invalid(format!("conv2d needs an odd square kernel and stride >= 1 ({})", report())));
        }
        if b.is_some_and(|b| self.shape(b) != [c_out]) {
            return Err(Error::shape("conv2d", format!("bias must have {} entries ({})", c_out, report())));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("kernel larger than padded input ({})", report())));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        Ok(ConvGeom { batch, c_in, h, w: wd, c_out, k, stride, pad, oh, ow })
    }

    /// 2-D cross-correlation with zero padding over `[C, H, W]` or `[B, C, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let gm = self.conv_geom(x, w, b, stride, pad)?;
        let (xv, wv) = (self.data(x), self.data(w));
        let in_sz = gm.c_in * gm.h * gm.w;
        let out_sz = gm.c_out * gm.out_px();
        let mut out = vec![S::zero(); gm.batch * out_sz];
        let mut cols = vec![S::zero(); gm.cols() * gm.out_px()];
        for bi in 0..gm.batch {
            gm.im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &mut cols);
            let ob = &mut out[bi * out_sz..(bi + 1) * out_sz];
            if let Some(b) = b {
                for (co, &bias) in self.data(b).iter().enumerate() {
                    ob[co * gm.out_px()..(co + 1) * gm.out_px()].iter_mut().for_each(|v| *v = bias);
                }
            }
            let beta = if b.is_some() { S::one() } else { S::zero() };
            gemm(gm.c_out, gm.cols(), gm.out_px(), S::one(), View::rows(wv, gm.cols()), View::rows(&cols, gm.out_px()), beta, ob, gm.out_px());
        }
        let mut shape = vec![gm.c_out, gm.oh, gm.ow];
        if self.shape(x).len() == 4 {
            shape.insert(0, gm.batch);
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.record(Tensor::from_parts(shape, out), &inputs, || Op::Conv2d { x, w, b, stride, pad }))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn backward_conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, g: &[S], acc: &mut Accumulator<'_, S>) {
        let gm = self.conv_geom(x, w, b, stride, pad).expect("validated in forward");
        let (xv, wv) = (self.data(x), self.data(w));
        let in_sz = gm.c_in * gm.h * gm.w;
        let out_sz = gm.c_out * gm.out_px();
        if let Some(b) = b {
            acc.add(b, |gb| {
                for bi in 0..gm.batch {
                    for (co, d) in gb.iter_mut().enumerate() {
                        let s = bi * out_sz + co * gm.out_px();
                        *d += g[s..s + gm.out_px()].iter().copied().sum::<S>();
                    }
                }
            });
        }
        let mut cols = vec![S::zero(); gm.cols() * gm.out_px()];
        if acc.wants(w) {
            acc.add(w, |gw| {
                for bi in 0..gm.batch {
                    gm.im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &mut cols);
                    let gb = &g[bi * out_sz..(bi + 1) * out_sz];
                    // dW += dY * cols^T
                    gemm(gm.c_out, gm.out_px(), gm.cols(), S::one(), View::rows(gb, gm.out_px()), View::transposed(&cols, gm.out_px()), S::one(), gw, gm.cols());
                }
            });
        }
        acc.add(x, |gx| {
            for bi in 0..gm.batch {
                let gb = &g[bi * out_sz..(bi + 1) * out_sz];
                // dcols = W^T * dY
                gemm(gm.cols(), gm.c_out, gm.out_px(), S::one(), View::transposed(wv, gm.cols()), View::rows(gb, gm.out_px()), S::zero(), &mut cols, gm.out_px());
                gm.col2im(&cols, &mut gx[bi * in_sz..(bi + 1) * in_sz]);
            }
        });
    }

    /// 2x2 mean pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (b, c, h, w) = image_dims(&shape).ok_or_else(|| Error::shape("avg_pool2", format!("{:?}", shape)))?;
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let quarter = S::from_f64(0.25);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in src.chunks(h * w).take(b * c) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, xx) = (2 * oy, 2 * ox);
                    let s = plane[y * w + xx] + plane[y * w + xx + 1] + plane[(y + 1) * w + xx] + plane[(y + 1) * w + xx + 1];
                    out.push(s * quarter);
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        Ok(self.record(Tensor::from_parts(out_shape, out), &[x], || Op::AvgPool2(x)))
    }

    pub(super) fn backward_avg_pool2(&self, x: Var, g: &[S], acc: &mut Accumulator<'_, S>) {
        let (b, c, h, w) = image_dims(self.shape(x)).unwrap();
        let (oh, ow) = (h / 2, w / 2);
        let quarter = S::from_f64(0.25);
        acc.add(x, |gx| {
            for p in 0..b * c {
                let plane = &mut gx[p * h * w..(p + 1) * h * w];
                let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = gp[oy * ow + ox] * quarter;
                        let (y, xx) = (2 * oy, 2 * ox);
                        plane[y * w + xx] += v;
                        plane[y * w + xx + 1] += v;
                        plane[(y + 1) * w + xx] += v;
                        plane[(y + 1) * w + xx + 1] += v;
                    }
                }
            }
        });
    }

    /// Bilinear lookup of `[B, C, H, W]` maps at `[B, P, 2]` pixel coordinates
    /// `(x, y)`, giving `[B, P, C]`. Rank-3 map with rank-2 coords is the
    /// unbatched form. Coordinates outside the map are clamped to its border.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let (sm, sc) = (self.shape(map).to_vec(), self.shape(coords).to_vec());
        let (b, c, h, w) = image_dims(&sm).ok_or_else(|| Error::shape("bilinear_sample", format!("map {:?}", sm)))?;
        let batched = sm.len() == 4;
        let ok = if batched { sc.len() == 3 && sc[0] == b && sc[2] == 2 } else { sc.len() == 2 && sc[1] == 2 };
        if !ok || h == 0 || w == 0 {
            return Err(Error::shape("bilinear_sample", format!("map {:?}, coords {:?}", sm, sc)));
        }
        let p = sc[sc.len() - 2];
        let (mv, cv) = (self.data(map), self.data(coords));
        let mut out = vec![S::zero(); b * p * c];
        for bi in 0..b {
            let maps = &mv[bi * c * h * w..(bi + 1) * c * h * w];
            for pi in 0..p {
                let cell = Cell::new(cv[(bi * p + pi) * 2], cv[(bi * p + pi) * 2 + 1], h, w);
                let dst = &mut out[(bi * p + pi) * c..(bi * p + pi + 1) * c];
                for (ch, d) in dst.iter_mut().enumerate() {
                    *d = cell.sample(&maps[ch * h * w..(ch + 1) * h * w], w);
                }
            }
        }
        let mut shape = vec![p, c];
        if batched {
            shape.insert(0, b);
        }
        Ok(self.record(Tensor::from_parts(shape, out), &[map, coords], || Op::Bilinear { map, coords }))
    }

    pub(super) fn backward_bilinear(&self, map: Var, coords: Var, g: &[S], acc: &mut Accumulator<'_, S>) {
        let (b, c, h, w) = image_dims(self.shape(map)).unwrap();
        let sc = self.shape(coords);
        let p = sc[sc.len() - 2];
        let (mv, cv) = (self.data(map), self.data(coords));
        acc.add(map, |gm| {
            for bi in 0..b {
                for pi in 0..p {
                    let cell = Cell::new(cv[(bi * p + pi) * 2], cv[(bi * p + pi) * 2 + 1], h, w);
                    let gsrc = &g[(bi * p + pi) * c..(bi * p + pi + 1) * c];
                    for (ch, &gv) in gsrc.iter().enumerate() {
                        let base = (bi * c + ch) * h * w;
                        cell.scatter(&mut gm[base..base + h * w], w, gv);
                    }
                }
            }
        });
        acc.add(coords, |gc| {
            for bi in 0..b {
                let maps = &mv[bi * c * h * w..(bi + 1) * c * h * w];
                for pi in 0..p {
                    let cell = Cell::new(cv[(bi * p + pi) * 2], cv[(bi * p + pi) * 2 + 1], h, w);
                    let gsrc = &g[(bi * p + pi) * c..(bi * p + pi + 1) * c];
                    let (mut dx, mut dy) = (S::zero(), S::zero());
                    for (ch, &gv) in gsrc.iter().enumerate() {
                        let (sx, sy) = cell.slope(&maps[ch * h * w..(ch + 1) * h * w], w);
                        dx += gv * sx;
                        dy += gv * sy;
                    }
                    gc[(bi * p + pi) * 2] += dx * cell.inside_x;
                    gc[(bi * p + pi) * 2 + 1] += dy * cell.inside_y;
                }
            }
        });
    }
}

/// The four lattice neighbours of a clamped sampling position.
struct Cell<S> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: S,
    fy: S,
    inside_x: S,
    inside_y: S,
}

impl<S: Real> Cell<S> {
    fn new(x: S, y: S, h: usize, w: usize) -> Self {
        let axis = |v: S, n: usize| {
            let hi = S::from_usize(n - 1);
            let inside = if v >= S::zero() && v <= hi { S::one() } else { S::zero() };
            let v = v.max(S::zero()).min(hi);
            let i0 = v.floor().to_usize().unwrap_or(0).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, v - S::from_usize(i0), inside)
        };
        let (x0, x1, fx, inside_x) = axis(x, w);
        let (y0, y1, fy, inside_y) = axis(y, h);
        Self { x0, x1, y0, y1, fx, fy, inside_x, inside_y }
    }

    fn sample(&self, plane: &[S], w: usize) -> S {
        let one = S::one();
        (one - self.fx) * (one - self.fy) * plane[self.y0 * w + self.x0]
            + self.fx * (one - self.fy) * plane[self.y0 * w + self.x1]
            + (one - self.fx) * self.fy * plane[self.y1 * w + self.x0]
            + self.fx * self.fy * plane[self.y1 * w + self.x1]
    }

    fn scatter(&self, plane: &mut [S], w: usize, g: S) {
        let one = S::one();
        plane[self.y0 * w + self.x0] += g * (one - self.fx) * (one - self.fy);
        plane[self.y0 * w + self.x1] += g * self.fx * (one - self.fy);
        plane[self.y1 * w + self.x0] += g * (one - self.fx) * self.fy;
        plane[self.y1 * w + self.x1] += g * self.fx * self.fy;
    }

    /// Partial derivatives of the interpolant in x and y.
    fn slope(&self, plane: &[S], w: usize) -> (S, S) {
        let one = S::one();
        let (a, b) = (plane[self.y0 * w + self.x0], plane[self.y0 * w + self.x1]);
        let (c, d) = (plane[self.y1 * w + self.x0], plane[self.y1 * w + self.x1]);
        let dx = (one - self.fy) * (b - a) + self.fy * (d - c);
        let dy = (one - self.fx) * (c - a) + self.fx * (d - b);
        (dx, dy)
    }
}
