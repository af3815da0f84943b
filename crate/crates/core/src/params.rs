//! Named trainable arrays with freeze flags, EMA shadows and component tags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::tensor::{Real, Tensor};

/// Which part of the model a parameter belongs to; freeze masks are sets of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Encoder,
    Decoder,
    GenPooler,
    ConPooler,
    AdaptorExtra,
    Loss,
    TaskHead,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Encoder,
        Component::Decoder,
        Component::GenPooler,
        Component::ConPooler,
        Component::AdaptorExtra,
        Component::Loss,
        Component::TaskHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
            Component::GenPooler => "gen_pooler",
            Component::ConPooler => "con_pooler",
            Component::AdaptorExtra => "adaptor_extra",
            Component::Loss => "loss",
            Component::TaskHead => "task_head",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown component `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    pub frozen: bool,
    pub ema: Tensor<F>,
    pub component: Component,
}

/// Every model parameter, keyed by a dotted name.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<F> {
    params: BTreeMap<String, Parameter<F>>,
}

impl<F: Real> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>, component: Component) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(
            name.to_string(),
            Parameter {
                ema: value.clone(),
                value,
                grad: None,
                frozen: false,
                component,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<F>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Registers `name` on the graph as a leaf. Frozen parameters become
    /// leaves that never request a gradient.
    pub fn bind(&self, g: &mut Graph<F>, name: &str) -> Result<Var> {
        let p = self.get(name)?;
        Ok(g.named_leaf(name, || p.value.clone(), !p.frozen))
    }

    /// Like [`ParameterStore::bind`] but reads the EMA shadow.
    pub fn bind_ema(&self, g: &mut Graph<F>, name: &str) -> Result<Var> {
        let p = self.get(name)?;
        Ok(g.named_leaf(name, || p.ema.clone(), false))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<F>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn numel_by_component(&self) -> BTreeMap<Component, usize> {
        let mut out = BTreeMap::new();
        for p in self.params.values() {
            *out.entry(p.component).or_insert(0) += p.value.numel();
        }
        out
    }

    /// Freezes every parameter whose component is not in `trainable`.
    pub fn apply_trainable(&mut self, trainable: &BTreeSet<Component>) {
        for p in self.params.values_mut() {
            p.frozen = !trainable.contains(&p.component);
        }
    }

    pub fn trainable_components(&self) -> BTreeSet<Component> {
        self.params
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.component)
            .collect()
    }

    /// FNV-1a over the raw bytes of every parameter of each component.
    pub fn checksums(&self) -> BTreeMap<Component, u64> {
        let mut hashers: BTreeMap<Component, Fnv1a> = BTreeMap::new();
        for (name, p) in &self.params {
            let h = hashers.entry(p.component).or_default();
            h.write(name.as_bytes());
            for x in p.value.data() {
                h.write(&x.as_f64().to_le_bytes());
            }
        }
        hashers.into_iter().map(|(c, h)| (c, h.finish())).collect()
    }

    /// Copy whose values are the EMA shadows, for evaluation.
    pub fn ema_snapshot(&self) -> Self {
        let mut out = self.clone();
        for p in out.params.values_mut() {
            p.value = p.ema.clone();
        }
        out
    }

    /// Copy with a different element type; freeze flags and tags are kept.
    pub fn cast<G: Real>(&self) -> ParameterStore<G> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                            frozen: p.frozen,
                            ema: p.ema.cast(),
                            component: p.component,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Deterministic parameter initializer.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal<F: Real>(&mut self, shape: &[usize], std: f64) -> Result<Tensor<F>> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        Tensor::from_fn(shape.to_vec(), |_| F::of(dist.sample(self.rng)))
    }

    pub fn uniform<F: Real>(&mut self, shape: &[usize], bound: f64) -> Result<Tensor<F>> {
        Tensor::from_fn(shape.to_vec(), |_| F::of(self.rng.random_range(-bound..bound)))
    }
}
