//! Minimal CPU neural-network substrate: tensors, layers, and the two backbones.

pub mod layers;
pub mod resnet;
pub mod scalar;
pub mod tensor;
pub mod tiny;

pub use resnet::{ResNet18, RESNET18_FEATURE_DIM};
pub use scalar::{gemm, Dtype, Scalar};
pub use tensor::{Param, ParamKind, ParamVisitor, ParamVisitorMut, Tensor};
pub use tiny::{TinyConfig, TinyNet};

#[derive(Clone, Debug)]
pub enum Backbone<F> {
    ResNet18(Box<ResNet18<F>>),
    Tiny(TinyNet<F>),
}

pub enum BackboneCache<F> {
    ResNet18(resnet::ResNetCache<F>),
    Tiny(tiny::TinyCache<F>),
}

impl<F: Scalar> Backbone<F> {
    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::ResNet18(n) => n.feature_dim(),
            Backbone::Tiny(n) => n.feature_dim(),
        }
    }

    /// Inference-mode features, `[N, feature_dim]`.
    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        match self {
            Backbone::ResNet18(n) => n.forward(x),
            Backbone::Tiny(n) => n.forward(x),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> (Tensor<F>, BackboneCache<F>) {
        match self {
            Backbone::ResNet18(n) => {
                let (y, c) = n.forward_train(x);
                (y, BackboneCache::ResNet18(c))
            }
            Backbone::Tiny(n) => {
                let (y, c) = n.forward_train(x);
                (y, BackboneCache::Tiny(c))
            }
        }
    }

    pub fn backward(&mut self, cache: BackboneCache<F>, dfeat: &Tensor<F>) {
        match (self, cache) {
            (Backbone::ResNet18(n), BackboneCache::ResNet18(c)) => n.backward(c, dfeat),
            (Backbone::Tiny(n), BackboneCache::Tiny(c)) => n.backward(c, dfeat),
            _ => panic!("backbone cache does not match backbone"),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        match self {
            Backbone::ResNet18(n) => n.visit(prefix, f),
            Backbone::Tiny(n) => n.visit(prefix, f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, F>) {
        match self {
            Backbone::ResNet18(n) => n.visit_mut(prefix, f),
            Backbone::Tiny(n) => n.visit_mut(prefix, f),
        }
    }
}
