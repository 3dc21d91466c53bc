//! Trainable convolution layers shared by the fuse, attention, and
//! classifier heads. Weights and biases are seeded normal with std
//! 1/sqrt(fan_in). Biases must not start at exactly zero: a dead relu
//! region upstream would pin downstream pre-activations exactly onto the
//! relu kink, where finite differences and the analytic derivative
//! legitimately disagree.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Graph, Tensor};

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn seeded(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let dist = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("positive std");
        let weight: Vec<f64> = (0..c_out * c_in * k * k)
            .map(|_| dist.sample(rng))
            .collect();
        let bias: Vec<f64> = (0..c_out).map(|_| dist.sample(rng)).collect();
        Conv2d {
            weight: Tensor::param(vec![c_out, c_in, k, k], weight).expect("shape consistent"),
            bias: Tensor::param(vec![c_out], bias).expect("shape consistent"),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        g.conv2d(x, &self.weight, &self.bias)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub(crate) fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}
