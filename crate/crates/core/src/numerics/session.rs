use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

use super::{Graph, ParamStore, Var};

/// A graph plus lazily bound parameters from a [`ParamStore`].
///
/// Each parameter is recorded on the graph once, the first time a model asks
/// for it. The store is borrowed immutably, so any number of sessions can run
/// concurrently against one store.
pub struct Session<'p> {
    graph: Graph,
    store: &'p ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'p> Session<'p> {
    /// Session whose parameters receive gradients.
    pub fn training(store: &'p ParamStore) -> Self {
        Self::new(store, true)
    }

    /// Session with parameters recorded as constants.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::new(store, false)
    }

    fn new(store: &'p ParamStore, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    /// Binds `name` to an existing var instead of the stored tensor.
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        let expected = self
            .store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        if expected.shape() != self.graph.shape(var) {
            return Err(Error::shape(
                "bind",
                format!("{name}: {:?} vs {:?}", expected.shape(), self.graph.shape(var)),
            ));
        }
        self.bound.insert(name.to_owned(), var);
        Ok(())
    }

    /// Gradients of every bound parameter that received one, by name.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.graph.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }
}

impl Deref for Session<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}
