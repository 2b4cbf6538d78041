use std::ops::{Deref, DerefMut};

use numerics::{ParamId, ParamStore, Scalar, Tape, Var};

/// A tape bound to a parameter store. Each parameter is recorded at most
/// once per graph, so gradients from every use accumulate on one node.
pub struct Graph<'a, T: Scalar> {
    tape: Tape<T>,
    store: &'a ParamStore<T>,
    cache: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            cache: vec![None; store.len()],
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cache[id.index()] {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.cache[id.index()] = Some(v);
        v
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}

impl<T: Scalar> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Scalar> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
