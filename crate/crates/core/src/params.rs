//! Named parameter storage.
//!
//! Parameters are owned by a `ParamStore` outside any graph and bound into a
//! fresh graph per forward pass. Initial values are drawn from a dedicated
//! RNG stream keyed by the parameter's name, so adding, removing, or
//! reordering other parameters never changes a parameter's starting value.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::init;
use crate::rng::stream;
use crate::tensor::{Graph, Tensor, Var};

/// How to fill a freshly registered parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Fan-based uniform. Matrices use (rows, cols) as (fan_in, fan_out);
    /// vectors use their length for both.
    Glorot,
    /// Uniform over [-bound, bound).
    Uniform(f64),
    Zeros,
    Constant(f64),
    /// Random rows rescaled to unit l2 norm (rank 2 only).
    UnitNormRows,
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    order: Vec<String>,
    values: HashMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            order: Vec::new(),
            values: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Register a trainable parameter and draw its initial value. Names
    /// must be unique; they key the RNG stream and all downstream
    /// bookkeeping.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        self.insert(name, shape, init, true)
    }

    /// Register a frozen parameter: saved, loaded, and bound like any other
    /// but excluded from gradients and optimizer updates.
    pub fn register_frozen(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        self.insert(name, shape, init, false)
    }

    fn insert(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<()> {
        if self.values.contains_key(name) {
            return Err(Error::contract(
                "param_store",
                format!("parameter {name:?} registered twice"),
            ));
        }
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(Error::dim(
                "param_store",
                format!("parameter {name:?} has empty shape {shape:?}"),
            ));
        }
        let data = match init {
            Init::Glorot => {
                let (fan_in, fan_out) = match shape {
                    [rows, cols] => (*rows, *cols),
                    [n] => (*n, *n),
                    other => {
                        return Err(Error::dim(
                            "param_store",
                            format!("fan-based init needs rank 1 or 2, got {other:?}"),
                        ))
                    }
                };
                init::glorot(&mut stream(self.seed, name), fan_in, fan_out)
            }
            Init::Uniform(bound) => init::uniform(&mut stream(self.seed, name), n, bound),
            Init::Zeros => init::zeros(n),
            Init::Constant(v) => init::constant(n, v),
            Init::UnitNormRows => {
                let [rows, cols] = shape else {
                    return Err(Error::dim(
                        "param_store",
                        format!("unit-norm rows need rank 2, got {shape:?}"),
                    ));
                };
                let mut data = init::uniform(&mut stream(self.seed, name), n, 1.0);
                for r in 0..*rows {
                    let row = &mut data[r * cols..(r + 1) * cols];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                }
                data
            }
        };
        let mut t = Tensor::new(shape.to_vec(), data)?;
        t.requires_grad = trainable;
        self.order.push(name.to_string());
        self.values.insert(name.to_string(), t);
        Ok(())
    }

    /// Whether a parameter participates in training.
    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.get(name)?.requires_grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::contract("param_store", format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::contract("param_store", format!("unknown parameter {name:?}")))
    }

    /// Parameter names in registration order.
    pub fn names(&self) -> &[String] {
        &self.order
    }

    /// Pairs of (name, tensor) in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.order.iter().map(|n| (n.as_str(), &self.values[n]))
    }

    /// Total scalar count across all parameters.
    pub fn total_len(&self) -> usize {
        self.order.iter().map(|n| self.values[n].len()).sum()
    }

    /// Scalar count across trainable parameters only.
    pub fn trainable_len(&self) -> usize {
        self.order
            .iter()
            .filter(|n| self.values[*n].requires_grad)
            .map(|n| self.values[n].len())
            .sum()
    }

    /// Bind every parameter into `g` as a named leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let mut vars = HashMap::new();
        for name in &self.order {
            let v = g.leaf_named(self.values[name].clone(), name);
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }
}

/// Graph handles for one binding of a `ParamStore`.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Assemble a binding directly from (name, var) pairs. Lets gradient
    /// checks and tests drive module forwards with probe leaves instead of
    /// the store's own values.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("param_bind", format!("unknown parameter {name:?}")))
    }

    /// Pull accumulated gradients out of the graph, keyed by name. Missing
    /// gradients (parameters unused by this loss) come back as zeros.
    pub fn grads(&self, g: &mut Graph, store: &ParamStore) -> Result<HashMap<String, Vec<f64>>> {
        let mut out = HashMap::new();
        for name in store.names() {
            let v = self.var(name)?;
            let grad = g
                .take_grad(v)
                .unwrap_or_else(|| vec![0.0; store.values[name].len()]);
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }
}
