//! Parameter storage, layers and optimisation built on [`crate::autograd`].

mod layers;
mod optim;

pub use layers::{Attention, Block, ChannelNorm, Conv, ConvTranspose, InstanceNorm, LayerNorm, Linear, Mlp};
pub use optim::{AdamW, AdamWConfig, GradBuffer};

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: ArrayD<f64>,
    decay: bool,
}

/// Named, ordered collection of learnable tensors.
///
/// Each entry carries a weight-decay flag; only transformer block weight
/// matrices are created with it set.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot uniform with the given fan-in and fan-out.
    XavierUniform { fan_in: usize, fan_out: usize },
    /// He normal with the given fan-in.
    KaimingNormal { fan_in: usize },
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, value: ArrayD<f64>, decay: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(Param { name: name.to_string(), value, decay });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn init<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, decay: bool, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("normal std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let d = Uniform::new(-a, a).expect("uniform bounds");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::KaimingNormal { fan_in } => {
                let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("normal std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("param shape");
        self.add(name, value, decay)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Copy every tensor whose name and shape match an entry of `other`.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.entries {
            if let Some(&id) = other.by_name.get(&p.name) {
                let src = &other.entries[id.0].value;
                if src.shape() == p.value.shape() {
                    p.value.assign(src);
                    copied += 1;
                }
            }
        }
        copied
    }
}
