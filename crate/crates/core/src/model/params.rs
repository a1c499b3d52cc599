use std::collections::HashMap;

use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Which part of the model a parameter belongs to, for size accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Embeddings and the fusion stack (`P`).
    Backbone,
    /// The shared masked-language-modeling head (`H`).
    MlmHead,
    /// One of the task-specific heads of the baseline.
    Baseline(BaselineKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// One logit: matched / not matched.
    VtmBinary,
    /// One logit per answer choice.
    McClassifier,
    /// One logit per answer in a closed answer vocabulary.
    OeClassifier,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [Self::VtmBinary, Self::McClassifier, Self::OeClassifier];

    pub fn name(self) -> &'static str {
        match self {
            Self::VtmBinary => "vtm",
            Self::McClassifier => "mc",
            Self::OeClassifier => "oe",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    /// Whether weight decay applies (false for biases and norm parameters).
    pub decay: bool,
    pub value: Tensor,
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, group: ParamGroup, decay: bool, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            decay,
            value,
        });
        self.index.insert(name.to_string(), id);
        id
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

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Copies parameters onto a tape on first use and remembers the variable.
pub struct Binder {
    vars: Vec<Option<Var>>,
}

impl Binder {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            vars: vec![None; store.len()],
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| tape.leaf(store.get(id).value.clone()))
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Gradients of every bound parameter, aligned with the store.
    pub fn collect(&self, store: &ParamStore, grads: &Gradients) -> ParamGrads {
        ParamGrads {
            grads: self
                .vars
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    v.and_then(|v| grads.get(v))
                        .map(|g| {
                            debug_assert_eq!(g.len(), store.params[i].value.len());
                            g.to_vec()
                        })
                })
                .collect(),
        }
    }
}

/// Per-parameter gradients; `None` where a parameter received no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            let dst = dst.get_or_insert_with(|| vec![0.0; src.len()]);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn set(&mut self, id: ParamId, grad: Vec<f64>) {
        self.grads[id.0] = Some(grad);
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.grads.iter_mut().flatten().flatten() {
            *v *= c;
        }
    }

    /// Euclidean norm over every gradient entry.
    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().flatten().all(|v| v.is_finite())
    }
}
