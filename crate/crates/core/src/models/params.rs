use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backbone parameters get the reduced rate under two-stage schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Distance from the output: heads are 0, the input-most backbone
    /// layers are deepest.
    pub depth: usize,
    pub group: ParamGroup,
    /// Whether weight decay applies (off for biases and norm parameters).
    pub decay: bool,
}

pub(crate) enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-b, b]`.
    Uniform(f64),
}

/// Named parameters in creation order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub(crate) fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        depth: usize,
        group: ParamGroup,
        decay: bool,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
            Init::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b).expect("finite bound");
                (0..n).map(|_| self.rng.sample(d)).collect()
            }
        };
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate param {name}"
        );
        self.params.push(Param {
            name,
            value: Tensor::new(shape.to_vec(), data),
            trainable: true,
            depth,
            group,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn n_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn n_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn max_depth(&self) -> usize {
        self.params.iter().map(|p| p.depth).max().unwrap_or(0)
    }

    /// Copies out all values in creation order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Overwrites all values; shapes must match.
    pub fn restore(&mut self, values: &[Tensor]) {
        assert_eq!(values.len(), self.params.len(), "snapshot length mismatch");
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.value.shape(), v.shape(), "shape mismatch for {}", p.name);
            p.value = v.clone();
        }
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
pub type ParamGrads = Vec<Option<Tensor>>;

/// A tape bound to a parameter store. Parameters are placed on the tape the
/// first time they are used.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    grad: bool,
}

impl<'p> Graph<'p> {
    /// `grad` controls whether trainable parameters record gradients.
    pub fn new(params: &'p ParamStore, grad: bool) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            grad,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let v = self.tape.leaf(p.value.clone(), self.grad && p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Back-propagates `loss` and collects parameter gradients.
    pub fn param_grads(&self, loss: Var) -> ParamGrads {
        let mut grads = self.tape.backward(loss);
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}
