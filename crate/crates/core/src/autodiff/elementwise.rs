use alloc::format;
use alloc::vec::Vec;

use super::{Op, Tape, Var};
use crate::{Error, Real, Result, Tensor};

const GELU_C: f64 = 0.044_715;

fn sqrt_2_over_pi<S: Real>() -> S {
    (S::from_f64(2.0) / S::PI()).sqrt()
}

/// Tanh approximation of GELU.
pub(crate) fn gelu<S: Real>(x: S) -> S {
    let u = sqrt_2_over_pi::<S>() * (x + S::from_f64(GELU_C) * x * x * x);
    S::from_f64(0.5) * x * (S::one() + u.tanh())
}

pub(crate) fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = sqrt_2_over_pi::<S>();
    let t = (k * (x + c * x * x * x)).tanh();
    let half = S::from_f64(0.5);
    half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + S::from_f64(3.0) * c * x * x)
}

pub(crate) fn abs_grad<S: Real>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

impl<S: Real> Tape<S> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: fn(Var, Var) -> Op<S>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.record(value, &[a, b], || op(a, b)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: impl FnOnce() -> Op<S>) -> Var {
        let value = self.value(a).map(f);
        self.record(value, &[a], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.unary(a, |x| x * c, || Op::Scale(a, c))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), || Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(S::zero()), || Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, || Op::Gelu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), || Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.cos(), || Op::Cos(a))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.record(Tensor::scalar(s), &[a], || Op::Sum(a))
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len();
        let s: S = self.data(a).iter().copied().sum();
        let m = if n == 0 { S::zero() } else { s / S::from_usize(n) };
        self.record(Tensor::scalar(m), &[a], || Op::Mean(a))
    }
}
