//! Trainable tensors and the visitor used for optimisers, hashing and
//! checkpointing.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Mat, Real};

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub value: Mat<S>,
    pub grad: Mat<S>,
    /// When false, backward passes skip this tensor's gradient entirely.
    pub requires_grad: bool,
}

impl<S: Real> Param<S> {
    pub fn new(value: Mat<S>) -> Self {
        let grad = Mat::zeros(value.rows(), value.cols());
        Self {
            value,
            grad,
            requires_grad: true,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Mat::zeros(rows, cols))
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        let mut m = Mat::zeros(rows, cols);
        m.fill(v);
        Self::new(m)
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        Self::new(Mat::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            S::of(z * std)
        }))
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything owning named parameters.
pub trait Module<S: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.numel());
        n
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.requires_grad {
                n += p.numel()
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn set_requires_grad(&mut self, on: bool) {
        self.visit_mut("", &mut |_, p| p.requires_grad = on);
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n.to_string()));
        names
    }
}

impl<S: Real, M: Module<S>> Module<S> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<S>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join_name(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join_name(prefix, &i.to_string()), f);
        }
    }
}

impl<S: Real, M: Module<S>> Module<S> for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<S>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

impl<S: Real> Module<S> for Param<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<S>)) {
        f(prefix, self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(prefix, self);
    }
}

/// Expands to `visit`/`visit_mut` bodies over the listed fields.
#[macro_export]
macro_rules! impl_module {
    ($ty:ident, $($field:ident),+ $(,)?) => {
        impl<S: $crate::Real> $crate::Module<S> for $ty<S> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'a $crate::Param<S>),
            ) {
                $( $crate::Module::visit(&self.$field, &$crate::join_name(prefix, stringify!($field)), f); )+
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::Param<S>),
            ) {
                $( $crate::Module::visit_mut(&mut self.$field, &$crate::join_name(prefix, stringify!($field)), f); )+
            }
        }
    };
}
