//! Named parameter storage and initialization.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, ModelConfig, Real, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±1/sqrt(fan_in).
    FanIn(usize),
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.push(format!("{prefix}.weight"), vec![d_out, d_in], Init::FanIn(d_in));
        self.push(format!("{prefix}.bias"), vec![d_out], Init::FanIn(d_in));
    }

    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        let fan_in = c_in * 9;
        self.push(format!("{prefix}.weight"), vec![c_out, c_in, 3, 3], Init::FanIn(fan_in));
        self.push(format!("{prefix}.bias"), vec![c_out], Init::FanIn(fan_in));
    }

    fn norm(&mut self, prefix: &str, width: usize) {
        self.push(format!("{prefix}.gain"), vec![width], Init::Ones);
        self.push(format!("{prefix}.offset"), vec![width], Init::Zeros);
    }
}

/// Every trainable tensor of the network, in canonical order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Specs(Vec::new());
    let mut c_in = 1;
    for (b, &w) in config.encoder_widths.iter().enumerate() {
        s.conv(&format!("encoder.b{b}.conv0"), c_in, w);
        s.norm(&format!("encoder.b{b}.norm0"), w);
        s.conv(&format!("encoder.b{b}.conv1"), w, w);
        s.norm(&format!("encoder.b{b}.norm1"), w);
        c_in = w;
    }
    let d = config.d_model;
    s.linear("tracker.input", config.token_input_width(), d);
    for b in 0..config.blocks {
        for axis in ["time", "track"] {
            let p = format!("tracker.blocks.{b}.{axis}");
            s.norm(&format!("{p}.norm"), d);
            s.linear(&format!("{p}.qkv"), d, 3 * d);
            s.linear(&format!("{p}.out"), d, d);
            s.norm(&format!("{p}.ff_norm"), d);
            s.linear(&format!("{p}.ff1"), d, config.ff_width);
            s.linear(&format!("{p}.ff2"), config.ff_width, d);
        }
    }
    s.norm("tracker.final_norm", d);
    s.push("tracker.head.weight".into(), vec![2, d], Init::Zeros);
    s.push("tracker.head.bias".into(), vec![2], Init::Zeros);
    s.0
}

/// Exact number of trainable scalars.
pub fn count_parameters(config: &ModelConfig) -> usize {
    param_specs(config).iter().map(ParamSpec::numel).sum()
}

/// Named tensors of one network together with the fingerprint of the
/// configuration that laid them out.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore<S = f32> {
    fingerprint: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Real> WeightStore<S> {
    /// Fresh initialization drawn from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let specs = param_specs(config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = match spec.init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(spec.shape.clone(), |_| S::from_f64(rng.random_range(-bound..bound)))
                }
                Init::Ones => Tensor::full(spec.shape.clone(), S::one()),
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
            };
            names.push(spec.name);
            tensors.push(t);
        }
        Ok(Self { fingerprint: config.fingerprint(), names, tensors })
    }

    /// Assembles a store from named tensors, checking them against the
    /// layout `config` requires.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        let mut by_name: BTreeMap<String, Tensor<S>> = BTreeMap::new();
        for (name, t) in named {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::invalid(format!("duplicate tensor {name}")));
            }
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = by_name
                .remove(&spec.name)
                .ok_or_else(|| Error::invalid(format!("missing tensor {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "weights",
                    format!("{} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape),
                ));
            }
            names.push(spec.name);
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::UnknownParameter(extra.clone()));
        }
        Ok(Self { fingerprint: config.fingerprint(), names, tensors })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Fails unless the store was laid out by a configuration with the same
    /// fingerprint as `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.fingerprint();
        if expected != self.fingerprint {
            return Err(Error::Fingerprint { expected, found: self.fingerprint });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    fn position(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Real>(&self) -> WeightStore<T> {
        WeightStore {
            fingerprint: self.fingerprint,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Puts every tensor on `tape`, as trainable leaves if `trainable`.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Params {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        Params { names: self.names.clone(), vars }
    }
}

/// Tape handles of a bound [`WeightStore`], in the store's order.
#[derive(Clone, Debug)]
pub struct Params {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Params {
    /// Pairs `names` with tape handles bound elsewhere.
    pub fn from_vars(names: Vec<String>, vars: Vec<Var>) -> Self {
        Self { names, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_count_is_near_published_size() {
        let n = count_parameters(&ModelConfig::default());
        assert!((285_000..=349_000).contains(&n), "{n}");
    }

    #[test]
    fn wider_kernel_widens_only_the_input_projection() {
        let base = ModelConfig::default();
        let k7 = ModelConfig { kernel: 7, ..base.clone() };
        let delta = count_parameters(&k7) - count_parameters(&base);
        assert_eq!(delta, 4 * (49 - 25) * base.d_model);
    }

    #[test]
    fn doubling_d_model_grows_count() {
        let base = ModelConfig::default();
        let wide = ModelConfig { d_model: 128, ..base.clone() };
        assert!(count_parameters(&wide) > count_parameters(&base));
    }

    #[test]
    fn init_is_seeded_and_head_is_zero() {
        let c = ModelConfig::desk();
        let a = WeightStore::<f32>::init(&c).unwrap();
        assert_eq!(a, WeightStore::init(&c).unwrap());
        assert_ne!(a, WeightStore::init(&ModelConfig { seed: 1, ..c.clone() }).unwrap());
        assert!(a.get("tracker.head.weight").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.num_scalars(), count_parameters(&c));
    }

    #[test]
    fn from_named_checks_layout() {
        let c = ModelConfig::desk();
        let a = WeightStore::<f32>::init(&c).unwrap();
        let named: Vec<_> = a.iter().map(|(n, t)| (String::from(n), t.clone())).collect();
        assert_eq!(WeightStore::from_named(&c, named.clone()).unwrap(), a);
        let mut missing = named.clone();
        missing.pop();
        assert!(WeightStore::from_named(&c, missing).is_err());
        let wider = ModelConfig { kernel: 7, ..c.clone() };
        assert!(WeightStore::from_named(&wider, named).is_err());
        assert!(matches!(a.check(&wider), Err(Error::Fingerprint { .. })));
    }
}
