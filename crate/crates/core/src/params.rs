//! Named parameter storage shared by supernets and discrete networks.
//!
//! Parameters live outside the tape and are re-inserted as leaves on each
//! forward pass. [`ParamVars`] memoizes that insertion per pass, so a
//! binarized forward only materializes the parameters of active paths.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tape, Var};

/// Handle to one parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct Parameter<S: Scalar> {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<S>,
}

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)).
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

pub struct ParamStore<S: Scalar> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> ParamStore<S> {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    /// Register a parameter under a unique name, drawing initial values from
    /// the given stream.
    pub fn add(&mut self, name: impl Into<String>, shape: Shape, init: Init, rng: &mut Rng64) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let data = match init {
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..shape.numel()).map(|_| S::from_f64(rng.uniform(-bound, bound))).collect()
            }
            Init::Zeros => vec![S::ZERO; shape.numel()],
            Init::Ones => vec![S::ONE; shape.numel()],
        };
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, shape, data });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// FNV-1a hash over names and raw value bits; detects any mutation.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let fnv = |h: &mut u64, byte: u64| {
            *h ^= byte;
            *h = h.wrapping_mul(0x0000_0100_0000_01B3);
        };
        for p in &self.params {
            for b in p.name.as_bytes() {
                fnv(&mut h, *b as u64);
            }
            for &v in &p.data {
                fnv(&mut h, v.to_bits_u64());
            }
        }
        h
    }
}

/// Per-forward-pass cache mapping parameters to tape leaves.
pub struct ParamVars {
    vars: Vec<Option<Var>>,
    requires_grad: bool,
}

impl ParamVars {
    pub fn new<S: Scalar>(store: &ParamStore<S>, requires_grad: bool) -> ParamVars {
        ParamVars { vars: vec![None; store.len()], requires_grad }
    }

    /// Leaf the parameter onto the tape on first use.
    pub fn var<S: Scalar>(&mut self, tape: &mut Tape<S>, store: &ParamStore<S>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let p = store.get(id);
        let v = tape.leaf(p.data.clone(), p.shape, self.requires_grad)?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    /// Pin a parameter to an externally created leaf (verification hooks).
    pub fn preset(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    /// Parameters that were materialized on the tape this pass.
    pub fn materialized(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), var)))
    }

    pub fn lookup(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }
}
