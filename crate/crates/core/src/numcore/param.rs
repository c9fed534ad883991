use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a trainable tensor. Clones of a [`Param`]
/// share the id, so a cloned model maps onto the same optimizer state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }
}

/// Anything owning trainable parameters.
///
/// Both methods must list parameters in the same, stable order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn params(&self) -> Vec<&Param> {
        self.iter().flat_map(|m| m.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.iter_mut().flat_map(|m| m.params_mut()).collect()
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn params(&self) -> Vec<&Param> {
        self.as_ref().map(|m| m.params()).unwrap_or_default()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.as_mut().map(|m| m.params_mut()).unwrap_or_default()
    }
}
