//! Per-pass graph-building context shared by all encoders.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttnTarget, ParamStore};
use crate::error::Result;
use crate::{ParamId, Scalar, Tape, Tensor, Var};

/// Extra computation attached to an attention projection, such as a
/// low-rank delta. Returns a term added to the projection output.
pub trait ProjectionHook<T: Scalar> {
    fn delta(&self, fwd: &mut Forward<'_, T>, target: AttnTarget, input: Var) -> Result<Option<Var>>;
}

/// One forward pass: the tape, bound parameters, and train/eval mode.
///
/// In eval mode every parameter is bound as a constant and dropout is the
/// identity. In training mode parameters keep their `requires_grad` flag and
/// dropout masks are drawn from a seeded stream.
pub struct Forward<'h, T: Scalar> {
    pub tape: Tape<T>,
    bound: HashMap<String, Var>,
    rng: Option<ChaCha8Rng>,
    hook: Option<&'h dyn ProjectionHook<T>>,
}

impl<'h, T: Scalar> Forward<'h, T> {
    pub fn eval() -> Self {
        Self { tape: Tape::new(), bound: HashMap::new(), rng: None, hook: None }
    }

    pub fn train(seed: u64) -> Self {
        Self { tape: Tape::new(), bound: HashMap::new(), rng: Some(ChaCha8Rng::seed_from_u64(seed)), hook: None }
    }

    pub fn with_hook(mut self, hook: Option<&'h dyn ProjectionHook<T>>) -> Self {
        self.hook = hook;
        self
    }

    pub fn hook(&self) -> Option<&'h dyn ProjectionHook<T>> {
        self.hook
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Binds `tensor` under `name`, once per pass.
    pub fn bind(&mut self, name: &str, tensor: &Tensor<T>) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = if self.is_training() {
            self.tape.leaf(tensor.clone())
        } else {
            self.tape.constant(tensor.clone())
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.bind(store.name(id), store.get(id))
    }

    /// Variable bound under `name` in this pass, if any.
    pub fn var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// Dropout drawn from this pass's stream; identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) => self.tape.dropout(x, p, true, rng),
            None => {
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                self.tape.dropout(x, p, false, &mut unused)
            }
        }
    }
}
