//! Named parameter storage, decoupled from any single graph. A store owns the
//! master copies; each forward pass lifts what it touches into that pass's
//! graph, and the optimizer writes updates back by name.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::elem::Elem;
use super::graph::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Gaussian with the given standard deviation.
    Normal(f64),
    Uniform(f64, f64),
}

#[derive(Clone)]
pub struct Param<E: Elem> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<E>>,
    pub trainable: bool,
}

impl<E: Elem> Param<E> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered collection of named parameters. Iteration order is registration
/// order, which is what makes optimizer state and checkpoints line up.
#[derive(Clone)]
pub struct ParamStore<E: Elem> {
    params: Vec<Param<E>>,
    index: HashMap<String, usize>,
    /// Seed the initializers derive from; kept for provenance.
    pub init_seed: u64,
}

impl<E: Elem> ParamStore<E> {
    pub fn new(init_seed: u64) -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new(), init_seed }
    }

    /// Register a parameter. Each parameter draws from its own RNG stream
    /// keyed by name, so registration order never changes initial values.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        let n: usize = shape.iter().product();
        let mut r = rng::stream(self.init_seed, &format!("init/{name}"));
        let data: Vec<E> = match init {
            Init::Zeros => vec![E::zero(); n],
            Init::Ones => vec![E::one(); n],
            Init::Const(v) => vec![E::from_f64(v); n],
            Init::Normal(std) => (0..n).map(|_| E::from_f64(gaussian(&mut r) * std)).collect(),
            Init::Uniform(a, b) => (0..n).map(|_| E::from_f64(r.gen_range(a..b))).collect(),
        };
        let idx = self.params.len();
        self.params.push(Param { name: name.to_string(), shape: shape.to_vec(), data: Arc::new(data), trainable: true });
        self.index.insert(name.to_string(), idx);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Param<E>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter: {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Replace a parameter's values (shape must match).
    pub fn set_data(&mut self, name: &str, data: Vec<E>) -> Result<()> {
        let idx = *self.index.get(name).ok_or_else(|| Error::Config(format!("unknown parameter: {name}")))?;
        let p = &mut self.params[idx];
        if data.len() != p.numel() {
            return Err(Error::shape("set_data", format!("{name}: {} elements vs shape {:?}", data.len(), p.shape)));
        }
        p.data = Arc::new(data);
        Ok(())
    }

    /// Mutable view for in-place updates (clones only if a graph still holds
    /// the old version).
    pub fn data_mut(&mut self, name: &str) -> Result<&mut Vec<E>> {
        let idx = *self.index.get(name).ok_or_else(|| Error::Config(format!("unknown parameter: {name}")))?;
        Ok(Arc::make_mut(&mut self.params[idx].data))
    }

    /// Mark parameters trainable or frozen according to a predicate on the
    /// parameter name. Returns how many ended up trainable.
    pub fn set_trainable_where<F: Fn(&str) -> bool>(&mut self, pred: F) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut() {
            p.trainable = pred(&p.name);
            if p.trainable {
                n += 1;
            }
        }
        n
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Lift a parameter into a graph (memoized per graph by name).
    pub fn lift(&self, g: &Graph<E>, name: &str) -> Result<Tensor<E>> {
        let p = self.get(name)?;
        Ok(g.lift_raw(&p.name, Arc::clone(&p.data), &p.shape, p.trainable))
    }

    /// Convert every parameter to another element type.
    pub fn cast<F: Elem>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new(self.init_seed);
        for p in &self.params {
            let data: Vec<F> = p.data.iter().map(|&v| F::from_f64(v.to_f64())).collect();
            let idx = out.params.len();
            out.params.push(Param { name: p.name.clone(), shape: p.shape.clone(), data: Arc::new(data), trainable: p.trainable });
            out.index.insert(p.name.clone(), idx);
        }
        out
    }

    /// Flat f64 snapshot of all parameters in store order (for checkpoints).
    pub fn snapshot(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.data.iter().map(|&v| v.to_f64()).collect()))
            .collect()
    }

    /// Load values from a snapshot; every entry must match an existing
    /// parameter in name and shape, and every parameter must be covered.
    pub fn restore(&mut self, snap: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        if snap.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, snapshot has {}", self.params.len(), snap.len())));
        }
        for (name, shape, values) in snap {
            let idx = *self
                .index
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("snapshot parameter {name} not present in model")))?;
            let p = &mut self.params[idx];
            if &p.shape != shape {
                return Err(Error::Checkpoint(format!("{name}: shape {:?} vs snapshot {:?}", p.shape, shape)));
            }
            if values.len() != p.numel() {
                return Err(Error::Checkpoint(format!("{name}: {} values vs shape {:?}", values.len(), shape)));
            }
            p.data = Arc::new(values.iter().map(|&v| E::from_f64(v)).collect());
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller (keeps us off rand_distr for one function).
pub fn gaussian(r: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = r.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = r.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
