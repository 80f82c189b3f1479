//! Trainable parameters: named tensors with an accumulated gradient slot.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

#[derive(Debug)]
pub struct ParamData {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Shared handle to one trainable tensor. Cloning shares the storage, so a
/// model and its optimizer can both hold the same parameter.
#[derive(Clone, Debug)]
pub struct Param {
    inner: Rc<RefCell<ParamData>>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            inner: Rc::new(RefCell::new(ParamData { name: name.into(), value, grad })),
        }
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn value(&self) -> Tensor {
        self.inner.borrow().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().value.numel()
    }

    pub fn grad(&self) -> Tensor {
        self.inner.borrow().grad.clone()
    }

    pub fn set_value(&self, value: Tensor) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.value.shape(), value.shape(), "set_value changes shape of '{}'", d.name);
        d.value = value;
    }

    pub fn zero_grad(&self) {
        let mut d = self.inner.borrow_mut();
        d.grad = Tensor::zeros(d.value.shape());
    }

    pub fn accumulate_grad(&self, delta: &Tensor) {
        let mut d = self.inner.borrow_mut();
        debug_assert_eq!(d.grad.shape(), delta.shape());
        d.grad.add_assign(delta);
    }

    /// In-place update `value += scale * direction`, used by optimizers.
    pub fn apply_step(&self, direction: &[f64], scale: f64) {
        let mut d = self.inner.borrow_mut();
        debug_assert_eq!(d.value.numel(), direction.len());
        for (v, &g) in d.value.data_mut().iter_mut().zip(direction.iter()) {
            *v += scale * g;
        }
    }

    /// Two handles referring to the same underlying storage.
    pub fn ptr_eq(&self, other: &Param) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Ordered collection of a model's parameters. Order is the registration
/// order, which makes optimizer state and checkpoints deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique within a set.
    pub fn register(&mut self, param: Param) -> Param {
        let name = param.name();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name '{}'",
            name
        );
        self.params.push(param.clone());
        param
    }

    /// Create, register, and return a parameter in one call.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Param {
        self.register(Param::new(name, value))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.inner.borrow().name == name)
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Extend with all parameters of another set (e.g. a submodule).
    pub fn absorb(&mut self, other: ParamSet) {
        for p in other.params {
            self.register(p);
        }
    }
}
