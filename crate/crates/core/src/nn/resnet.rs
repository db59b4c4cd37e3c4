//! ResNet-18 feature extractor (He et al., 2016) with the classifier removed.
//!
//! Parameter names follow the torchvision layout (`conv1.weight`,
//! `layer2.0.downsample.1.running_var`, ...) so converted archives load directly.

use rand::Rng;

use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm2d, BatchNormCache, Conv2d, MaxPool2d,
    MaxPoolCache,
};
use super::scalar::Scalar;
use super::tensor::{join, ParamVisitor, ParamVisitorMut, Tensor};

pub const RESNET18_FEATURE_DIM: usize = 512;

#[derive(Clone, Debug)]
struct Downsample<F> {
    conv: Conv2d<F>,
    bn: BatchNorm2d<F>,
}

#[derive(Clone, Debug)]
struct BasicBlock<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    downsample: Option<Downsample<F>>,
}

struct BlockCache<F> {
    input: Tensor<F>,
    bn1: BatchNormCache<F>,
    act1: Tensor<F>,
    bn2: BatchNormCache<F>,
    ds_bn: Option<BatchNormCache<F>>,
    output: Tensor<F>,
}

impl<F: Scalar> BasicBlock<F> {
    fn new<R: Rng>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let downsample = (stride != 1 || c_in != c_out).then(|| Downsample {
            conv: Conv2d::new(c_in, c_out, 1, stride, 0, false, rng),
            bn: BatchNorm2d::new(c_out),
        });
        BasicBlock {
            conv1: Conv2d::new(c_in, c_out, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(c_out),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(c_out),
            downsample,
        }
    }

    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let h = relu(self.bn1.forward_eval(&self.conv1.forward(x)));
        let mut y = self.bn2.forward_eval(&self.conv2.forward(&h));
        match &self.downsample {
            Some(ds) => y.add_assign(&ds.bn.forward_eval(&ds.conv.forward(x))),
            None => y.add_assign(x),
        }
        relu(y)
    }

    fn forward_train(&mut self, x: Tensor<F>) -> BlockCache<F> {
        let (z1, bn1) = self.bn1.forward_train(&self.conv1.forward(&x));
        let act1 = relu(z1);
        let (mut y, bn2) = self.bn2.forward_train(&self.conv2.forward(&act1));
        let ds_bn = match &mut self.downsample {
            Some(ds) => {
                let (s, c) = ds.bn.forward_train(&ds.conv.forward(&x));
                y.add_assign(&s);
                Some(c)
            }
            None => {
                y.add_assign(&x);
                None
            }
        };
        BlockCache {
            input: x,
            bn1,
            act1,
            bn2,
            ds_bn,
            output: relu(y),
        }
    }

    fn backward(&mut self, cache: &BlockCache<F>, dout: Tensor<F>, need_dx: bool) -> Option<Tensor<F>> {
        let dsum = relu_backward(&cache.output, dout);
        let dz2 = self.bn2.backward(&cache.bn2, &dsum);
        let dact1 = self.conv2.backward(&cache.act1, &dz2, true).expect("requested");
        let dz1 = self.bn1.backward(&cache.bn1, &relu_backward(&cache.act1, dact1));
        let dx_main = self.conv1.backward(&cache.input, &dz1, need_dx);
        let dx_skip = match (&mut self.downsample, &cache.ds_bn) {
            (Some(ds), Some(bn_cache)) => {
                let ds_dz = ds.bn.backward(bn_cache, &dsum);
                ds.conv.backward(&cache.input, &ds_dz, need_dx)
            }
            _ => need_dx.then_some(dsum),
        };
        match (dx_main, dx_skip) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some(ds) = &self.downsample {
            ds.conv.visit(&join(prefix, "downsample.0"), f);
            ds.bn.visit(&join(prefix, "downsample.1"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, F>) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some(ds) = &mut self.downsample {
            ds.conv.visit_mut(&join(prefix, "downsample.0"), f);
            ds.bn.visit_mut(&join(prefix, "downsample.1"), f);
        }
    }
}

/// Stem (7×7 conv, BN, ReLU, 3×3 max pool), four stages of two basic blocks,
/// and global average pooling. The fully-connected classifier is not part of
/// the extractor.
#[derive(Clone, Debug)]
pub struct ResNet18<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    pool: MaxPool2d,
    layers: Vec<Vec<BasicBlock<F>>>,
}

pub struct ResNetCache<F> {
    stem_bn: BatchNormCache<F>,
    stem_act: Tensor<F>,
    stem_pool: MaxPoolCache,
    input: Tensor<F>,
    blocks: Vec<BlockCache<F>>,
    final_shape: Vec<usize>,
}

impl<F: Scalar> ResNet18<F> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let widths = [64, 128, 256, 512];
        let mut c_in = 64;
        let mut layers = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            layers.push(vec![BasicBlock::new(c_in, w, stride, rng), BasicBlock::new(w, w, 1, rng)]);
            c_in = w;
        }
        ResNet18 {
            conv1: Conv2d::new(3, 64, 7, 2, 3, false, rng),
            bn1: BatchNorm2d::new(64),
            pool: MaxPool2d {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            layers,
        }
    }

    pub fn feature_dim(&self) -> usize {
        RESNET18_FEATURE_DIM
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let h = relu(self.bn1.forward_eval(&self.conv1.forward(x)));
        let mut h = self.pool.forward(&h).0;
        for block in self.layers.iter().flatten() {
            h = block.forward(&h);
        }
        global_avg_pool(&h)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> (Tensor<F>, ResNetCache<F>) {
        let (z, stem_bn) = self.bn1.forward_train(&self.conv1.forward(x));
        let stem_act = relu(z);
        let (mut h, stem_pool) = self.pool.forward(&stem_act);
        let mut blocks = Vec::with_capacity(8);
        for block in self.layers.iter_mut().flatten() {
            let cache = block.forward_train(h);
            h = cache.output.clone();
            blocks.push(cache);
        }
        let final_shape = h.shape().to_vec();
        (
            global_avg_pool(&h),
            ResNetCache {
                stem_bn,
                stem_act,
                stem_pool,
                input: x.clone(),
                blocks,
                final_shape,
            },
        )
    }

    pub fn backward(&mut self, cache: ResNetCache<F>, dfeat: &Tensor<F>) {
        let mut grad = global_avg_pool_backward(&cache.final_shape, dfeat);
        let mut blocks: Vec<&mut BasicBlock<F>> = self.layers.iter_mut().flatten().collect();
        for (block, bc) in blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            grad = block.backward(bc, grad, true).expect("requested");
        }
        let dact = self.pool.backward(&cache.stem_pool, &grad);
        let dz = self.bn1.backward(&cache.stem_bn, &relu_backward(&cache.stem_act, dact));
        self.conv1.backward(&cache.input, &dz, false);
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        for (li, layer) in self.layers.iter().enumerate() {
            for (bi, block) in layer.iter().enumerate() {
                block.visit(&join(prefix, &format!("layer{}.{}", li + 1, bi)), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, F>) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (bi, block) in layer.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("layer{}.{}", li + 1, bi)), f);
            }
        }
    }
}
