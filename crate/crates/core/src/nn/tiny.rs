//! Small three-stage convolutional backbone for CPU-scale runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv2d, MaxPool2d, MaxPoolCache};
use super::scalar::Scalar;
use super::tensor::{ParamVisitor, ParamVisitorMut, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyConfig {
    /// Channels of the first stage; the second stage doubles it.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_width() -> usize {
    16
}

fn default_feature_dim() -> usize {
    64
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            width: default_width(),
            feature_dim: default_feature_dim(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TinyNet<F> {
    pub config: TinyConfig,
    stages: Vec<Conv2d<F>>,
    pool: MaxPool2d,
}

struct StageCache<F> {
    input: Tensor<F>,
    activation: Tensor<F>,
    pool: MaxPoolCache,
}

pub struct TinyCache<F> {
    stages: Vec<StageCache<F>>,
    pooled_shape: Vec<usize>,
}

impl<F: Scalar> TinyNet<F> {
    pub fn new<R: Rng>(config: TinyConfig, rng: &mut R) -> Self {
        let chans = [3, config.width, config.width * 2, config.feature_dim];
        let stages = chans
            .windows(2)
            .map(|w| Conv2d::new(w[0], w[1], 3, 1, 1, true, rng))
            .collect();
        TinyNet {
            config,
            stages,
            pool: MaxPool2d {
                kernel: 2,
                stride: 2,
                pad: 0,
            },
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let mut h = x.clone();
        for conv in &self.stages {
            let a = relu(conv.forward(&h));
            h = self.pool.forward(&a).0;
        }
        global_avg_pool(&h)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> (Tensor<F>, TinyCache<F>) {
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let a = relu(conv.forward(&h));
            let (p, pool) = self.pool.forward(&a);
            stages.push(StageCache {
                input: h,
                activation: a,
                pool,
            });
            h = p;
        }
        let pooled_shape = h.shape().to_vec();
        (global_avg_pool(&h), TinyCache { stages, pooled_shape })
    }

    pub fn backward(&mut self, cache: TinyCache<F>, dfeat: &Tensor<F>) {
        let mut grad = global_avg_pool_backward(&cache.pooled_shape, dfeat);
        for (i, (conv, st)) in self.stages.iter_mut().zip(cache.stages.iter()).enumerate().rev() {
            let da = self.pool.backward(&st.pool, &grad);
            let dz = relu_backward(&st.activation, da);
            match conv.backward(&st.input, &dz, i > 0) {
                Some(dx) => grad = dx,
                None => break,
            }
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        for (i, conv) in self.stages.iter().enumerate() {
            conv.visit(&super::tensor::join(prefix, &format!("stage{}.conv", i + 1)), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, F>) {
        for (i, conv) in self.stages.iter_mut().enumerate() {
            conv.visit_mut(&super::tensor::join(prefix, &format!("stage{}.conv", i + 1)), f);
        }
    }
}
