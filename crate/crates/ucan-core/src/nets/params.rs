//! Named parameter storage shared by the generator and discriminator.
//!
//! Parameters live outside any tape; each training step binds them into a
//! fresh [`Tape`] as leaves and reads gradients back by index after the
//! backward pass.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Node, Tape};

/// Index of a parameter inside its [`ParamStore`].
pub type PIdx = usize;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> PIdx {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Inserts every parameter into `tape` as a leaf. With
    /// `trainable = false` the leaves are frozen: gradients still flow
    /// through ops that consume them but none are accumulated for the
    /// parameters themselves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let nodes = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        Binding { nodes }
    }

    /// Reads the accumulated gradient for every parameter, in store order.
    /// Parameters untouched by the loss get zero gradients.
    pub fn gradients(&self, tape: &Tape, binding: &Binding) -> Vec<ArrayD<f64>> {
        self.params
            .iter()
            .zip(&binding.nodes)
            .map(|(p, &n)| match tape.grad(n) {
                Some(g) => g.clone(),
                None => ArrayD::zeros(p.value.raw_dim()),
            })
            .collect()
    }
}

/// Tape nodes for one bound parameter store.
pub struct Binding {
    nodes: Vec<Node>,
}

impl Binding {
    pub fn node(&self, idx: PIdx) -> Node {
        self.nodes[idx]
    }
}

/// Standard normal draw (Box-Muller over the seeded stream).
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// He-style initialization: normal with std `sqrt(2 / fan_in)`.
pub fn he_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| randn(rng) * std)
}
