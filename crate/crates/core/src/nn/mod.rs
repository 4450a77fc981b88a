//! A small CPU training engine for 2-D convolutional networks.
//!
//! Layers own their parameters and cache whatever their backward pass needs
//! from the most recent forward call, so every `backward` must follow the
//! matching `forward`. Tensors are standard-layout `Array4<f32>` in
//! (N, C, H, W) order. Parameter gradients accumulate until
//! [`zero_grad`] is called.
//!
//! Batch-parallel work is split per sample and reduced in sample order, so
//! results do not depend on the rayon thread count.

mod conv;
mod gemm;
mod layers;
mod norm;
mod pool;

use rand::Rng;

pub use conv::Conv2d;
pub use layers::{concat_channels, split_channels, GlobalAvgPool, LeakyRelu, Linear, Relu};
pub use norm::BatchNorm2d;
pub use pool::{
    max_pool2x2, max_pool2x2_backward, max_unpool2x2, max_unpool2x2_backward, PoolIndices,
};

/// A named tensor of weights with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
    /// Buffers such as running statistics are saved but never optimized.
    pub trainable: bool,
    moment1: Vec<f32>,
    moment2: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let n = value.len();
        Param {
            value,
            grad: vec![0.0; n],
            shape,
            trainable: true,
            moment1: Vec::new(),
            moment2: Vec::new(),
        }
    }

    pub fn buffer(value: Vec<f32>, shape: Vec<usize>) -> Self {
        Param {
            trainable: false,
            ..Param::new(value, shape)
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Param::new(vec![0.0; shape.iter().product()], shape)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: Vec<usize>, bound: f32, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Param::new(value, shape)
    }

    /// He-uniform initialization for a layer with the given fan-in.
    pub fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        Param::uniform(shape, (6.0 / fan_in as f32).sqrt(), rng)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters.
pub trait Module {
    /// Appends every parameter and buffer, named `prefix.<local name>`.
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    fn num_trainable(&mut self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.len())
            .sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grad(module: &mut impl Module) {
    for (_, p) in module.named_params() {
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Applies one update to every trainable parameter of `module`.
    pub fn step(&mut self, module: &mut impl Module) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = self.lr / c1;
        for (_, p) in module.named_params() {
            if !p.trainable {
                continue;
            }
            if p.moment1.len() != p.value.len() {
                p.moment1 = vec![0.0; p.value.len()];
                p.moment2 = vec![0.0; p.value.len()];
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.moment1[i] = self.beta1 * p.moment1[i] + (1.0 - self.beta1) * g;
                p.moment2[i] = self.beta2 * p.moment2[i] + (1.0 - self.beta2) * g * g;
                let denom = (p.moment2[i] / c2).sqrt() + self.eps;
                p.value[i] -= step_size * p.moment1[i] / denom;
            }
        }
    }
}
