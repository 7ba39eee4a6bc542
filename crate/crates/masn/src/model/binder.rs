//! Bridges a [`ParamStore`] onto a [`Tape`] for one forward pass.

use std::collections::HashMap;

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, TensorId};

/// Binds parameters by path, caching so each path lands on the tape once per
/// pass. After backward, [`ParamBinder::bound`] yields the (path, node) pairs
/// whose gradients should flow back into the store.
pub struct ParamBinder<'s> {
    store: &'s ParamStore,
    cache: HashMap<String, TensorId>,
    order: Vec<(String, TensorId)>,
}

impl<'s> ParamBinder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        ParamBinder { store, cache: HashMap::new(), order: Vec::new() }
    }

    pub fn bind(&mut self, tape: &mut Tape, path: &str) -> Result<TensorId> {
        if let Some(&id) = self.cache.get(path) {
            return Ok(id);
        }
        let id = tape.leaf(self.store.value(path)?.clone())?;
        self.cache.insert(path.to_string(), id);
        self.order.push((path.to_string(), id));
        Ok(id)
    }

    /// Bound (path, node) pairs in binding order.
    pub fn bound(&self) -> &[(String, TensorId)] {
        &self.order
    }
}
