//! Layer building blocks over the tape engine.
//!
//! Layers own their parameters as plain [`Tensor`]s. On every forward pass
//! the parameters are re-inserted into the graph as leaves and their node
//! ids are appended to a [`Bindings`] list in the same order that
//! `collect_params` visits them, so gradients can be read back after
//! `backward` and applied by the optimizer.

use crate::error::Result;
use crate::tensor::{BatchNormMode, Graph, NodeId, RunningStats, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Node ids of parameter leaves for one forward pass, in `collect_params`
/// order.
#[derive(Default)]
pub struct Bindings {
    pub ids: Vec<NodeId>,
}

impl Bindings {
    pub fn bind(&mut self, g: &mut Graph, p: &Tensor) -> NodeId {
        let id = g.leaf(p);
        self.ids.push(id);
        id
    }
}

/// He-style fan-in scaled Gaussian init.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    gaussian(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).unwrap();
    let data: Vec<f64> = (0..n)
        .map(|_| if std == 0.0 { 0.0 } else { dist.sample(rng) })
        .collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Tensor::zeros(&[out_channels]).with_grad(),
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Bindings, x: NodeId) -> Result<NodeId> {
        let w = b.bind(g, &self.weight);
        let bias = b.bind(g, &self.bias);
        g.conv2d(x, w, bias, self.stride, self.padding)
    }

    pub fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Dense {
            weight: he_normal(&[out_features, in_features], in_features, rng),
            bias: Tensor::zeros(&[out_features]).with_grad(),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Bindings, x: NodeId) -> Result<NodeId> {
        let w = b.bind(g, &self.weight);
        let bias = b.bind(g, &self.bias);
        g.linear(x, w, bias)
    }

    pub fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Batch-norm layer with learned gamma/beta and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::new(&[channels], vec![1.0; channels]).unwrap().with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running: RunningStats::new(channels),
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        b: &mut Bindings,
        x: NodeId,
        mode: BatchNormMode,
    ) -> Result<NodeId> {
        let gamma = b.bind(g, &self.gamma);
        let beta = b.bind(g, &self.beta);
        g.batchnorm2d(
            x,
            gamma,
            beta,
            mode,
            &mut self.running,
            BATCHNORM_EPS,
            BATCHNORM_MOMENTUM,
        )
    }

    pub fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn he_init_is_deterministic_for_seed() {
        let a = he_normal(&[4, 3, 3, 3], 27, &mut stream_rng(9, "init"));
        let b = he_normal(&[4, 3, 3, 3], 27, &mut stream_rng(9, "init"));
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn conv_layer_binds_two_params() {
        let mut rng = stream_rng(1, "init");
        let layer = Conv2d::new(3, 8, 3, 1, 1, &mut rng);
        let mut g = Graph::new();
        let mut bind = Bindings::default();
        let x = g.leaf(&Tensor::zeros(&[1, 3, 8, 8]));
        let y = layer.forward(&mut g, &mut bind, x).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 8, 8]);
        assert_eq!(bind.ids.len(), 2);
    }
}
