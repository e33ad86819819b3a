//! Central finite-difference gradient checking in 64-bit precision.
//!
//! The numeric side only ever evaluates the function forward, so it is
//! independent of every backward rule it checks.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{track, ForwardStats};
use crate::training::trajectory_loss;
use crate::weights::Params;
use crate::{ModelConfig, Result, Tape, Tensor, Var, WeightStore};

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Magnitudes below this are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per input (randomly chosen).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-4, floor: 1e-3, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckOutcome {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the one-sided slopes disagree (a kink
    /// such as ReLU at zero lies inside the step).
    pub skipped: usize,
}

impl CheckOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }

    pub fn merge(&mut self, other: &CheckOutcome) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of a scalar function of `inputs` with
/// central differences.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, opts: &CheckOptions) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.parameter(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.data(o)[0])
    };
    let base = eval(inputs)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut outcome = CheckOutcome::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => sample(&mut rng, input.len(), m).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x0;

            let fwd = (plus - base) / opts.step;
            let bwd = (base - minus) / opts.step;
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(opts.floor) {
                outcome.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[i].data()[j], numeric, opts.floor);
            outcome.max_rel_error = outcome.max_rel_error.max(err);
            outcome.checked += 1;
        }
    }
    Ok(outcome)
}

/// Result of checking one operation on several random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub instances: usize,
    pub outcome: CheckOutcome,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.outcome.passed(self.tolerance)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// `sum(y * probe)` for a fixed random probe, so every output element
/// carries a distinct weight.
fn probe_sum(t: &mut Tape<f64>, y: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = t.constant(probe.clone());
    let m = t.mul(y, p)?;
    Ok(t.sum(m))
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let (a, b) = (rand_tensor(rng, &[3, 4]), rand_tensor(rng, &[3, 4]));
    let w = rand_tensor(rng, &[3, 4]);
    macro_rules! unary {
        ($name:literal, $input:expr, $op:expr) => {{
            let w = w.clone();
            cases.push(($name, vec![$input], Box::new(move |t, v| {
                let y = $op(t, v[0]);
                probe_sum(t, y, &w)
            })));
        }};
    }
    macro_rules! binary {
        ($name:literal, $op:ident) => {{
            let w = w.clone();
            cases.push(($name, vec![a.clone(), b.clone()], Box::new(move |t, v| {
                let y = t.$op(v[0], v[1])?;
                probe_sum(t, y, &w)
            })));
        }};
    }
    binary!("add", add);
    binary!("sub", sub);
    binary!("mul", mul);
    unary!("scale", a.clone(), |t: &mut Tape<f64>, x| t.scale(x, -1.7));
    unary!("gelu", a.clone(), |t: &mut Tape<f64>, x| t.gelu(x));
    unary!("sin", a.clone(), |t: &mut Tape<f64>, x| t.sin(x));
    unary!("cos", a.clone(), |t: &mut Tape<f64>, x| t.cos(x));
    unary!("abs", rand_away_from_zero(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.abs(x));
    unary!("relu", rand_away_from_zero(rng, &[3, 4]), |t: &mut Tape<f64>, x| t.relu(x));
    cases.push(("sum", vec![a.clone()], Box::new(|t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.sum(y))
    })));
    cases.push(("mean", vec![a.clone()], Box::new(|t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.mean(y))
    })));

    let x3 = rand_tensor(rng, &[2, 3, 4]);
    let w24 = rand_tensor(rng, &[4, 3, 2]);
    let w_exp = rand_tensor(rng, &[2, 3, 4]);
    let r = rand_tensor(rng, &[2, 5, 4]);
    {
        let w24 = w24.clone();
        cases.push(("reshape", vec![x3.clone()], Box::new(move |t, v| {
            let y = t.reshape(v[0], &[4, 3, 2])?;
            probe_sum(t, y, &w24)
        })));
    }
    cases.push(("permute", vec![x3.clone()], Box::new(move |t, v| {
        let y = t.permute(v[0], &[2, 1, 0])?;
        probe_sum(t, y, &w24)
    })));
    let w_t = rand_tensor(rng, &[2, 4, 3]);
    cases.push(("transpose", vec![x3.clone()], Box::new(move |t, v| {
        let y = t.transpose(v[0])?;
        probe_sum(t, y, &w_t)
    })));
    {
        let w_exp = w_exp.clone();
        cases.push(("expand", vec![rand_tensor(rng, &[2, 1, 4])], Box::new(move |t, v| {
            let y = t.expand(v[0], &[2, 3, 4])?;
            probe_sum(t, y, &w_exp)
        })));
    }
    cases.push(("narrow", vec![r.clone()], Box::new(move |t, v| {
        let y = t.narrow(v[0], 1, 1, 3)?;
        probe_sum(t, y, &w_exp)
    })));
    cases.push(("concat", vec![x3.clone(), rand_tensor(rng, &[2, 2, 4])], Box::new(move |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        probe_sum(t, y, &r)
    })));

    let x = rand_tensor(rng, &[2, 3, 5]);
    let probe = rand_tensor(rng, &[2, 3, 4]);
    macro_rules! dense {
        ($name:literal, $inputs:expr, $op:expr) => {{
            let probe = probe.clone();
            cases.push(($name, $inputs, Box::new(move |t, v| {
                let y = $op(t, v)?;
                probe_sum(t, y, &probe)
            })));
        }};
    }
    dense!("matmul", vec![x.clone(), rand_tensor(rng, &[2, 5, 4])], |t: &mut Tape<f64>, v: &[Var]| t.matmul(v[0], v[1], false));
    dense!("matmul_transposed", vec![x.clone(), rand_tensor(rng, &[2, 4, 5])], |t: &mut Tape<f64>, v: &[Var]| t.matmul(v[0], v[1], true));
    dense!("linear", vec![x.clone(), rand_tensor(rng, &[4, 5]), rand_tensor(rng, &[4])], |t: &mut Tape<f64>, v: &[Var]| t
        .linear(v[0], v[1], Some(v[2])));
    dense!("softmax", vec![rand_tensor(rng, &[2, 3, 4])], |t: &mut Tape<f64>, v: &[Var]| t.softmax(v[0]));
    dense!(
        "attention",
        vec![rand_tensor(rng, &[2, 3, 6]), rand_tensor(rng, &[2, 5, 6]), rand_tensor(rng, &[2, 5, 4])],
        |t: &mut Tape<f64>, v: &[Var]| t.softmax_attention(v[0], v[1], v[2])
    );

    let probe = rand_tensor(rng, &[3, 6]);
    cases.push(("layer_norm", vec![rand_tensor(rng, &[3, 6]), rand_tensor(rng, &[6]), rand_tensor(rng, &[6])], Box::new(
        move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe_sum(t, y, &probe)
        },
    )));
    let probe = rand_tensor(rng, &[2, 4, 3, 3]);
    cases.push(("group_norm", vec![rand_tensor(rng, &[2, 4, 3, 3]), rand_tensor(rng, &[4]), rand_tensor(rng, &[4])], Box::new(
        move |t, v| {
            let y = t.group_norm(v[0], 2, v[1], v[2], 1e-5)?;
            probe_sum(t, y, &probe)
        },
    )));

    let img = rand_tensor(rng, &[2, 2, 7, 6]);
    let probe = rand_tensor(rng, &[2, 3, 4, 3]);
    cases.push(("conv2d", vec![img.clone(), rand_tensor(rng, &[3, 2, 3, 3]), rand_tensor(rng, &[3])], Box::new(move |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        probe_sum(t, y, &probe)
    })));
    let probe = rand_tensor(rng, &[2, 2, 3, 3]);
    cases.push(("avg_pool2", vec![img], Box::new(move |t, v| {
        let y = t.avg_pool2(v[0])?;
        probe_sum(t, y, &probe)
    })));
    let map = rand_tensor(rng, &[2, 3, 5, 6]);
    let coords = Tensor::from_fn(vec![2, 4, 2], |i| {
        let hi = if i % 2 == 0 { 5.0 } else { 4.0 };
        // off the integer lattice, where the interpolant has kinks
        rng.random_range(0.0..hi - 1.0) + 0.05 + 0.9 * rng.random_range(0.0..1.0f64)
    });
    let probe = rand_tensor(rng, &[2, 4, 3]);
    cases.push(("bilinear_sample", vec![map, coords], Box::new(move |t, v| {
        let y = t.bilinear_sample(v[0], v[1])?;
        probe_sum(t, y, &probe)
    })));
    cases
}

/// Checks every differentiable tape operation on `instances` random inputs.
pub fn op_suite(seed: u64, instances: usize) -> Result<Vec<SuiteEntry>> {
    let opts = CheckOptions { seed, ..CheckOptions::default() };
    let mut entries: Vec<SuiteEntry> = Vec::new();
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(i as u64));
        for (k, (name, inputs, f)) in op_cases(&mut rng).into_iter().enumerate() {
            let outcome = check(&inputs, f, &opts)?;
            if i == 0 {
                entries.push(SuiteEntry { name, instances: 0, outcome: CheckOutcome::default(), tolerance: opts.tolerance });
            }
            entries[k].instances += 1;
            entries[k].outcome.merge(&outcome);
        }
    }
    Ok(entries)
}

/// A tiny tracker used for end-to-end loss checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        encoder_widths: vec![2, 3, 3, 4],
        pyramid_levels: 2,
        kernel: 3,
        d_model: 8,
        blocks: 1,
        heads: 2,
        ff_width: 8,
        coord_embed_width: 4,
        ..ModelConfig::default()
    }
}

/// Checks the trajectory loss of the whole tracker with respect to every
/// weight tensor (a random subset of coordinates per tensor). The output
/// head gets random weights so that gradients reach the whole network.
pub fn model_loss_check(config: &ModelConfig, seed: u64, coords_per_tensor: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig { seed, ..config.clone() };
    let mut store = WeightStore::<f32>::init(&config)?.cast::<f64>();
    for name in ["tracker.head.weight", "tracker.head.bias"] {
        store.get_mut(name)?.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let size = config.input_size;
    let frames = 3;
    let video = Tensor::from_fn(vec![frames, size, size], |_| rng.random_range(0.0..1.0));
    let points = 3;
    let hi = (size - 1) as f64;
    let queries = Tensor::from_fn(vec![points, 2], |_| rng.random_range(1.3..hi - 1.3));
    let target = Tensor::from_fn(vec![frames, points, 2], |_| rng.random_range(0.0..hi));
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    // a short step makes it unlikely that a ReLU input crosses zero inside it
    let opts = CheckOptions { seed, step: 1e-6, max_coords: Some(coords_per_tensor), ..CheckOptions::default() };
    check(
        store.tensors(),
        |t, vars| {
            let params = Params::from_vars(names.clone(), vars.to_vec());
            let v = t.constant(video.clone());
            let q = t.constant(queries.clone());
            let pred = track(t, &params, &config, v, q, &mut ForwardStats::default())?;
            let target = t.constant(target.clone());
            trajectory_loss(t, pred, target)
        },
        &opts,
    )
}
