//! Feature pyramid and correlation features around point estimates.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, ModelConfig, Real, Result, Tape, Tensor, Var};

/// Levels `[T, C, h_s, w_s]`; level 0 is the encoder output itself and
/// every further level is a 2×2 mean pool of the one before.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

pub fn build_pyramid<S: Real>(tape: &mut Tape<S>, features: Var, levels: usize) -> Result<FeaturePyramid> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("build_pyramid", format!("expected [T, C, h, w] features, got {shape:?}")));
    }
    let (h, w) = (shape[2] >> (levels.max(1) - 1), shape[3] >> (levels.max(1) - 1));
    if levels == 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "build_pyramid",
            format!(
                "{}x{} features cannot hold {levels} levels; the top level needs at least 1x1, so the map must be at least {}x{}",
                shape[2],
                shape[3],
                1usize << levels.saturating_sub(1),
                1usize << levels.saturating_sub(1)
            ),
        ));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(features);
    for _ in 1..levels {
        let prev = *out.last().unwrap();
        out.push(tape.avg_pool2(prev)?);
    }
    Ok(FeaturePyramid { levels: out })
}

/// Integer grid offsets `(dx, dy)` in row-major order, `k*k` of them.
pub fn grid_offsets(k: usize) -> Vec<(f64, f64)> {
    let r = (k / 2) as f64;
    (0..k * k).map(|i| ((i % k) as f64 - r, (i / k) as f64 - r)).collect()
}

/// Correlation features `[T, N, levels*k*k]`: for every frame, point and
/// level, the dot products of `Q[n]` with the level features sampled on a
/// k×k grid around `coords[t, n] / (stride * 2^s)`.
pub fn correlate<S: Real>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    q: Var,
    pyramid: &FeaturePyramid,
    coords: Var,
) -> Result<Var> {
    let cs = tape.shape(coords).to_vec();
    let qs = tape.shape(q).to_vec();
    let (t, n) = match cs.as_slice() {
        &[t, n, 2] => (t, n),
        _ => return Err(Error::shape("correlate", format!("coords must be [T, N, 2], got {cs:?}"))),
    };
    if qs.len() != 2 || qs[0] != n {
        return Err(Error::shape("correlate", format!("Q {qs:?} does not match {n} points")));
    }
    let c = qs[1];
    let k = config.kernel;
    let kk = k * k;
    let offsets = grid_offsets(k);
    let offset_grid = Tensor::from_fn(alloc::vec![t, n, kk, 2], |i| {
        let (dx, dy) = offsets[(i / 2) % kk];
        S::from_f64(if i % 2 == 0 { dx } else { dy })
    });
    let offset_grid = tape.constant(offset_grid);
    let centers = tape.reshape(coords, &[t, n, 1, 2])?;
    let centers = tape.expand(centers, &[t, n, kk, 2])?;
    let q_col = tape.reshape(q, &[1, n, c, 1])?;
    let q_col = tape.expand(q_col, &[t, n, c, 1])?;

    let mut parts = Vec::with_capacity(pyramid.levels.len());
    for (s, &level) in pyramid.levels.iter().enumerate() {
        let ls = tape.shape(level);
        if ls[0] != t || ls[1] != c {
            return Err(Error::shape(
                "correlate",
                format!("level {s} is {ls:?}, expected {t} frames of {c} channels"),
            ));
        }
        let scale = S::one() / S::from_usize(config.encoder_stride << s);
        let scaled = tape.scale(centers, scale);
        let grid = tape.add(scaled, offset_grid)?;
        let grid = tape.reshape(grid, &[t, n * kk, 2])?;
        let sampled = tape.bilinear_sample(level, grid)?;
        let sampled = tape.reshape(sampled, &[t, n, kk, c])?;
        let dots = tape.matmul(sampled, q_col, false)?;
        parts.push(tape.reshape(dots, &[t, n, kk])?);
    }
    tape.concat(&parts, 2)
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cfg(levels: usize, kernel: usize) -> ModelConfig {
        ModelConfig { pyramid_levels: levels, kernel, ..ModelConfig::default() }
    }

    #[test]
    fn pyramid_shapes_and_constant_maps() {
        let mut t = Tape::<f64>::inference();
        let f = t.constant(Tensor::full(vec![2, 3, 64, 64], 0.7));
        let p = build_pyramid(&mut t, f, 4).unwrap();
        assert_eq!(p.levels[0], f);
        let sides: Vec<usize> = p.levels.iter().map(|&l| t.shape(l)[2]).collect();
        assert_eq!(sides, vec![64, 32, 16, 8]);
        for &l in &p.levels {
            assert!(t.data(l).iter().all(|&v| v == 0.7));
        }
    }

    #[test]
    fn pyramid_rejects_maps_too_small() {
        let mut t = Tape::<f64>::inference();
        let f = t.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        let err = build_pyramid(&mut t, f, 4).unwrap_err();
        assert!(format!("{err}").contains("at least 8x8"), "{err}");
    }

    #[test]
    fn level_one_is_block_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = Tensor::from_fn(vec![1, 1, 6, 6], |_| rng.random_range(-1.0..1.0f64));
        let mut t = Tape::inference();
        let f = t.constant(map.clone());
        let p = build_pyramid(&mut t, f, 2).unwrap();
        let d = map.data();
        for y in 0..3 {
            for x in 0..3 {
                let m = (d[2 * y * 6 + 2 * x] + d[2 * y * 6 + 2 * x + 1] + d[(2 * y + 1) * 6 + 2 * x] + d[(2 * y + 1) * 6 + 2 * x + 1]) / 4.0;
                assert!((t.data(p.levels[1])[y * 3 + x] - m).abs() < 1e-15);
            }
        }
    }

    fn run(config: &ModelConfig, map: Tensor<f64>, q: Tensor<f64>, coords: Tensor<f64>) -> Tensor<f64> {
        let mut t = Tape::inference();
        let f = t.constant(map);
        let p = build_pyramid(&mut t, f, config.pyramid_levels).unwrap();
        let (q, c) = (t.constant(q), t.constant(coords));
        let y = correlate(&mut t, config, q, &p, c).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn zero_queries_give_zero_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = Tensor::from_fn(vec![2, 3, 16, 16], |_| rng.random_range(-1.0..1.0));
        let coords = Tensor::from_fn(vec![2, 4, 2], |_| rng.random_range(0.0..60.0));
        let y = run(&cfg(3, 5), map, Tensor::zeros(vec![4, 3]), coords);
        assert_eq!(y.shape(), &[2, 4, 75]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_pyramid_gives_q_dot_v() {
        let map = Tensor::from_fn(vec![1, 2, 32, 32], |i| if i < 1024 { 0.5 } else { -2.0 });
        let q = Tensor::new(vec![1, 2], vec![0.6, 0.8]).unwrap();
        let y = run(&cfg(4, 7), map, q, Tensor::new(vec![1, 1, 2], vec![40.0, 70.0]).unwrap());
        assert_eq!(y.len(), 196);
        assert!(y.data().iter().all(|&v| (v - (0.3 - 1.6)).abs() < 1e-12));
    }

    #[test]
    fn matches_direct_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = Tensor::from_fn(vec![1, 1, 8, 8], |_| rng.random_range(-1.0..1.0f64));
        let qv = rng.random_range(0.5..2.0);
        let (x, y) = (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0));
        let out = run(&cfg(4, 5), map.clone(), Tensor::new(vec![1, 1], vec![qv]).unwrap(), Tensor::new(vec![1, 1, 2], vec![x, y]).unwrap());
        assert_eq!(out.len(), 100);

        // independent pyramid and sampler
        let mut levels = vec![(8usize, map.data().to_vec())];
        for _ in 1..4 {
            let (side, prev) = levels.last().unwrap().clone();
            let h = side / 2;
            let mut next = vec![0.0; h * h];
            for yy in 0..h {
                for xx in 0..h {
                    next[yy * h + xx] = (prev[2 * yy * side + 2 * xx]
                        + prev[2 * yy * side + 2 * xx + 1]
                        + prev[(2 * yy + 1) * side + 2 * xx]
                        + prev[(2 * yy + 1) * side + 2 * xx + 1])
                        / 4.0;
                }
            }
            levels.push((h, next));
        }
        let sample = |side: usize, m: &[f64], px: f64, py: f64| {
            let hi = (side - 1) as f64;
            let (px, py) = (px.clamp(0.0, hi), py.clamp(0.0, hi));
            let (x0, y0) = (px.floor().min(hi - 1.0).max(0.0), py.floor().min(hi - 1.0).max(0.0));
            let (fx, fy) = (px - x0, py - y0);
            let at = |a: f64, b: f64| m[(b as usize).min(side - 1) * side + (a as usize).min(side - 1)];
            (1.0 - fx) * (1.0 - fy) * at(x0, y0)
                + fx * (1.0 - fy) * at(x0 + 1.0, y0)
                + (1.0 - fx) * fy * at(x0, y0 + 1.0)
                + fx * fy * at(x0 + 1.0, y0 + 1.0)
        };
        let mut i = 0;
        for (s, (side, m)) in levels.iter().enumerate() {
            let scale = 4.0 * (1u32 << s) as f64;
            for dy in -2..=2 {
                for dx in -2..=2 {
                    let e = qv * sample(*side, m, x / scale + dx as f64, y / scale + dy as f64);
                    assert!((out.data()[i] - e).abs() < 1e-12, "entry {i}: {} vs {e}", out.data()[i]);
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn linear_in_q_and_translation_invariant_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg(1, 5);
        let map = Tensor::from_fn(vec![1, 2, 24, 24], |_| rng.random_range(-1.0..1.0));
        let q = Tensor::from_fn(vec![1, 2], |_| rng.random_range(-1.0..1.0));
        let coords = Tensor::new(vec![1, 1, 2], vec![41.0, 37.0]).unwrap();
        let base = run(&c, map.clone(), q.clone(), coords.clone());
        let doubled = run(&c, map.clone(), q.map(|v| 2.0 * v), coords.clone());
        for (a, b) in base.data().iter().zip(doubled.data()) {
            assert_eq!(*b, 2.0 * a);
        }
        // shift the map by (3, 2) feature pixels and the point by 4x that
        let shifted = Tensor::from_fn(vec![1, 2, 24, 24], |i| {
            let (ch, y, x) = (i / 576, (i / 24) % 24, i % 24);
            if x >= 3 && y >= 2 { map.data()[ch * 576 + (y - 2) * 24 + x - 3] } else { 0.0 }
        });
        let moved = run(&c, shifted, q, Tensor::new(vec![1, 1, 2], vec![41.0 + 12.0, 37.0 + 8.0]).unwrap());
        assert_eq!(base, moved);
    }
}
