//! Dense-tensor layers with exact forward and backward passes.

pub mod activation;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod norm;
pub mod tape;

use std::collections::BTreeMap;

pub use activation::{elementwise, elementwise_backward, gelu, relu, Elementwise};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeom, ConvGrads, ConvParams};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use linear::{linear_backward, linear_forward, LinearGrads, LinearParams};
pub use norm::{
    normalize_channels, normalize_channels_backward, NormGrads, NormMode, NormParams, NormStats,
    NORM_EPS,
};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Trained by gradient descent.
    Learnable,
    /// Persisted state that is not trained (running statistics).
    Buffer,
}

/// A tree of named tensors. Names are dot-separated paths.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole));

    /// Number of learnable scalars.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, role| {
            if role == TensorRole::Learnable {
                n += t.len();
            }
        });
        n
    }

    /// Gradient of every learnable tensor, zeros where the sweep did not reach it.
    fn param_grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, role| {
            if role == TensorRole::Learnable {
                let g = grads
                    .wrt_param(t)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.dims()));
                out.push((name.to_string(), g));
            }
        });
        out
    }

    /// Every tensor (parameters and buffers) by name.
    fn state_dict(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, t, _| {
            out.insert(name.to_string(), t.clone());
        });
        out
    }

    /// Overwrite tensors from a name map; every name must be present with matching dims.
    fn load_state_dict(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut err = None;
        self.visit_mut("", &mut |name, t, _| {
            if err.is_some() {
                return;
            }
            match state.get(name) {
                Some(src) if src.dims() == t.dims() => *t = src.clone(),
                Some(src) => {
                    err = Some(Error::Shape(format!(
                        "{name}: checkpoint dims {:?}, model dims {:?}",
                        src.dims(),
                        t.dims()
                    )))
                }
                None => err = Some(Error::Format(format!("checkpoint is missing {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Module for Tensor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        f(prefix, self, TensorRole::Learnable)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        f(prefix, self, TensorRole::Learnable)
    }
}

impl<T: Module> Module for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Module> Module for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

impl Module for () {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Tensor, TensorRole)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {}
}

/// Implements [`Module`] for a struct by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Module for $ty {
            fn visit(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &$crate::tensor::Tensor, $crate::nn::TensorRole),
            ) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join_path(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor, $crate::nn::TensorRole),
            ) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join_path(prefix, stringify!($field)), f); )*
            }
        }
    };
}

#[doc(hidden)]
pub fn join_path(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

impl_module!(ConvParams { kernel, bias });
impl_module!(LinearParams { weight, bias });

impl Module for NormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        f(&join(prefix, "scale"), &self.scale, TensorRole::Learnable);
        f(&join(prefix, "shift"), &self.shift, TensorRole::Learnable);
        f(&join(prefix, "running_mean"), &self.running_mean, TensorRole::Buffer);
        f(&join(prefix, "running_var"), &self.running_var, TensorRole::Buffer);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        f(&join(prefix, "scale"), &mut self.scale, TensorRole::Learnable);
        f(&join(prefix, "shift"), &mut self.shift, TensorRole::Learnable);
        f(&join(prefix, "running_mean"), &mut self.running_mean, TensorRole::Buffer);
        f(&join(prefix, "running_var"), &mut self.running_var, TensorRole::Buffer);
    }
}
