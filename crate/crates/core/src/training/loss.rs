use alloc::format;

use crate::{Error, Real, Result, Tape, TrajectorySet, Var};

/// Mean absolute coordinate error plus mean absolute error of the
/// frame-to-frame differences, for `[T, N, 2]` predictions and targets.
pub fn trajectory_loss<S: Real>(tape: &mut Tape<S>, pred: Var, target: Var) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != tape.shape(target) || shape.len() != 3 || shape[2] != 2 || shape[0] < 2 {
        return Err(Error::shape(
            "loss",
            format!("prediction {:?} and target {:?} must match as [T >= 2, N, 2]", shape, tape.shape(target)),
        ));
    }
    let t = shape[0];
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    let coord = tape.mean(abs);
    let later = tape.narrow(diff, 0, 1, t - 1)?;
    let earlier = tape.narrow(diff, 0, 0, t - 1)?;
    let flow = tape.sub(later, earlier)?;
    let flow = tape.abs(flow);
    let flow = tape.mean(flow);
    tape.add(coord, flow)
}

/// The two loss terms `(coordinate, flow)` evaluated directly.
pub fn loss_terms(reference: &TrajectorySet, predicted: &TrajectorySet) -> Result<(f64, f64)> {
    let (t, n) = (reference.frames(), reference.points());
    if (t, n) != (predicted.frames(), predicted.points()) || t < 2 {
        return Err(Error::shape(
            "loss",
            format!("{}x{} vs {}x{} trajectories", t, n, predicted.frames(), predicted.points()),
        ));
    }
    let (r, p) = (reference.data(), predicted.data());
    let coord = r.iter().zip(p).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / r.len() as f64;
    let w = n * 2;
    let mut flow = 0.0;
    for i in w..r.len() {
        let dr = r[i] as f64 - r[i - w] as f64;
        let dp = p[i] as f64 - p[i - w] as f64;
        flow += (dr - dp).abs();
    }
    Ok((coord, flow / (r.len() - w) as f64))
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use super::*;
    use crate::Tensor;

    fn tape_loss(p: &TrajectorySet, q: &TrajectorySet) -> f64 {
        let mut t = Tape::<f64>::inference();
        let a = t.constant(q.to_tensor().cast());
        let b = t.constant(p.to_tensor().cast());
        let l = trajectory_loss(&mut t, a, b).unwrap();
        t.data(l)[0]
    }

    #[test]
    fn hand_example() {
        let p = TrajectorySet::new(2, 1, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let q = TrajectorySet::new(2, 1, vec![0.0; 4]).unwrap();
        assert_eq!(loss_terms(&p, &q).unwrap(), (0.25, 0.5));
        assert_eq!(tape_loss(&p, &q), 0.75);
        assert_eq!(tape_loss(&p, &p), 0.0);
    }

    #[test]
    fn uniform_shift_only_costs_coordinates() {
        let p = TrajectorySet::new(3, 2, (0..12).map(|v| v as f32 * 0.5).collect()).unwrap();
        let mut q = p.clone();
        q.map_points(|[x, y]| [x + 0.75, y + 0.75]);
        assert_eq!(loss_terms(&p, &q).unwrap(), (0.75, 0.0));
        assert!((tape_loss(&p, &q) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatch() {
        let mut t = Tape::<f64>::inference();
        let a = t.constant(Tensor::zeros(vec![2, 1, 2]));
        let b = t.constant(Tensor::zeros(vec![2, 2, 2]));
        assert!(trajectory_loss(&mut t, a, b).is_err());
        let one = t.constant(Tensor::zeros(vec![1, 1, 2]));
        assert!(trajectory_loss(&mut t, one, one).is_err());
    }
}
