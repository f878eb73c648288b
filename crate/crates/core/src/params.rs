use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The three model parts a freeze policy can address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    ImageEncoder,
    PromptEncoder,
    MaskDecoder,
}

impl Component {
    pub const ALL: [Component; 3] = [
        Component::ImageEncoder,
        Component::PromptEncoder,
        Component::MaskDecoder,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::ImageEncoder => "image_encoder",
            Component::PromptEncoder => "prompt_encoder",
            Component::MaskDecoder => "mask_decoder",
        }
    }

    pub fn of(name: &str) -> Option<Component> {
        Self::ALL.into_iter().find(|c| {
            name.strip_prefix(c.label())
                .is_some_and(|rest| rest.starts_with('.') && rest.len() > 1)
        })
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Named model tensors, each labelled with exactly one [`Component`] by its
/// name prefix. Constants are stored alongside but never optimised.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    constants: BTreeSet<String>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
            constants: BTreeSet::new(),
        }
    }

    fn check_name(name: &str) -> Result<Component> {
        Component::of(name).ok_or_else(|| {
            Error::Config(format!(
                "parameter name {name:?} lacks a component prefix (image_encoder./prompt_encoder./mask_decoder.)"
            ))
        })
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        Self::check_name(&name)?;
        if self.tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Config(format!("duplicate parameter {name:?}")));
        }
        Ok(())
    }

    pub fn insert_constant(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        self.insert(name.clone(), tensor)?;
        self.constants.insert(name);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn is_constant(&self, name: &str) -> bool {
        self.constants.contains(name)
    }

    pub fn component(&self, name: &str) -> Option<Component> {
        Component::of(name)
    }

    /// All names in store order (sorted).
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.names().filter(|n| !self.constants.contains(*n))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable_names()
            .map(|n| self.tensors[n].numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            constants: self.constants.clone(),
        }
    }

    /// Records every tensor in `graph`. Only names in `trainable` receive
    /// gradients; constants never do.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: &BTreeSet<String>) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let grad = trainable.contains(name) && !self.constants.contains(name);
                (name.clone(), graph.leaf(t.clone(), grad))
            })
            .collect();
        BoundParams { vars }
    }

    /// Records every tensor as a constant (inference).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> BoundParams {
        self.bind(graph, &BTreeSet::new())
    }
}

/// Parameter name → recorded variable for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound tensor that received one.
    pub fn collect_grads<T: Scalar>(&self, graph: &Graph<T>) -> BTreeMap<String, Vec<T>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| graph.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}
