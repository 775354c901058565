use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Real, Rng, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group. Fusion network, projections, heads and temperatures train
/// at the fusion learning rate; single-modality encoders at the encoder rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Fusion,
    Encoder,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    /// Excluded from weight decay (biases, norms, embeddings of size 1 row).
    pub no_decay: bool,
    pub tensor: Tensor<T>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        group: ParamGroup,
        no_decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return invalid(format!("duplicate parameter name `{name}`"));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            no_decay,
            tensor: tensor.with_requires_grad(true),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn accumulate(&mut self, grads: Vec<(ParamId, Vec<T>)>) -> Result<()> {
        for (id, g) in grads {
            self.params[id.0].tensor.accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Gradient of a parameter, zeros if it never received one.
    pub fn grad_or_zero(&self, id: ParamId) -> Vec<T> {
        let t = &self.params[id.0].tensor;
        t.grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); t.len()])
    }

    /// Same parameters converted to another element type (values only).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    no_decay: p.no_decay,
                    // cast values only; gradients are not carried over
                    tensor: Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().iter().map(|v| U::of(v.as_f64())).collect())
                        .expect("same shape")
                        .with_requires_grad(true),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Registers parameters under a dotted name prefix with seeded initialization.
/// Values are drawn in `f64` and then cast, so `f32` and `f64` models built
/// from the same seed start from the same point.
pub struct ParamBuilder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut Rng, group: ParamGroup) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            group,
        }
    }

    pub fn scope<R>(&mut self, name: &str, group: Option<ParamGroup>, f: impl FnOnce(&mut ParamBuilder<'_, T>) -> R) -> R {
        let prefix = if self.prefix.is_empty() || name.is_empty() {
            format!("{}{name}", self.prefix)
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut child = ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            group: group.unwrap_or(self.group),
        };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn register(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>, no_decay: bool) -> Result<ParamId> {
        let t = Tensor::from_f64(shape, &values)?;
        let full = self.full_name(name);
        self.store.add(full, t, self.group, no_decay)
    }

    /// Xavier-uniform `[fan_in, fan_out]` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| self.rng.uniform_range(-limit, limit))
            .collect();
        self.register(name, vec![fan_in, fan_out], values, false)
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64, no_decay: bool) -> Result<ParamId> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| std * self.rng.normal()).collect();
        self.register(name, shape, values, no_decay)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.register(name, shape, vec![value; n], true)
    }
}
