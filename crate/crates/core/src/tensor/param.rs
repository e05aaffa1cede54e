use std::collections::BTreeMap;
use std::rc::Rc;

use super::graph::Gradients;
use super::Tensor;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight, updated by the optimizer.
    Trainable,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

/// A named tensor with its gradient accumulator and AdamW moments.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub kind: ParamKind,
    value: Rc<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
    pub(crate) first_moment: Option<Tensor<T>>,
    pub(crate) second_moment: Option<Tensor<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    /// Mutable access; copies the storage if a live graph still shares it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.value)
    }

    pub(crate) fn shared_value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn moments(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.first_moment.as_ref().zip(self.second_moment.as_ref())
    }

    pub fn set_moments(&mut self, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        if m.shape() != self.value.shape() || v.shape() != self.value.shape() {
            return Err(TensorError::shape(
                "set_moments",
                format!("{}: moments must match {:?}", self.name, self.value.shape()),
            ));
        }
        self.first_moment = Some(m);
        self.second_moment = Some(v);
        Ok(())
    }
}

/// All tensors of a model, in registration order, addressable by
/// dot-separated name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        value: Tensor<T>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::invalid(
                "register",
                format!("duplicate parameter name `{name}`"),
            ));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            kind,
            value: Rc::new(value),
            grad: None,
            first_moment: None,
            second_moment: None,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        self.params[id.0].value()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.params[id.0].value_mut()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total element count of trainable tensors.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds the parameter gradients of a backward sweep to each `grad`.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Two distinct entries mutably at once (for batch-norm running stats).
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        assert_ne!(a, b, "pair_mut needs two distinct ids");
        let (lo, hi, swapped) = if a.0 < b.0 {
            (a.0, b.0, false)
        } else {
            (b.0, a.0, true)
        };
        let (left, right) = self.params.split_at_mut(hi);
        let (x, y) = (left[lo].value_mut(), right[0].value_mut());
        if swapped {
            (y, x)
        } else {
            (x, y)
        }
    }

    /// Copies every value into a store of another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: Rc::new(p.value.cast()),
                    grad: None,
                    first_moment: p.first_moment.as_ref().map(Tensor::cast),
                    second_moment: p.second_moment.as_ref().map(Tensor::cast),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
