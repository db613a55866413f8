//! Top-down saliency detector: conv/pool feature stack, 1x1 scoring
//! convolution producing a single-channel coarse map, bilinear upsampling
//! to the classifier input size.

use crate::error::{Error, Result};
use crate::nn::{Bindings, Conv2d};
use crate::rng::stream_rng;
use crate::tensor::{Graph, NodeId, Tensor};

/// Single-channel nonnegative-ish map; raw network scores are unbounded,
/// [`SaliencyMap::normalize`] brings them to [0,1] for metrics and export.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if h * w != values.len() {
            return Err(Error::Shape(format!(
                "saliency map {}x{} needs {} values, got {}",
                h,
                w,
                h * w,
                values.len()
            )));
        }
        Ok(SaliencyMap { h, w, values })
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Self {
        SaliencyMap {
            h,
            w,
            values: vec![v; h * w],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn is_constant(&self) -> bool {
        let (lo, hi) = self.min_max();
        lo == hi
    }

    /// Min-max normalization to [0,1]. A constant map maps to all zeros.
    pub fn normalize(&self) -> SaliencyMap {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        let values = if range == 0.0 {
            vec![0.0; self.values.len()]
        } else {
            self.values.iter().map(|v| (v - lo) / range).collect()
        };
        SaliencyMap {
            h: self.h,
            w: self.w,
            values,
        }
    }

    /// Bilinear (align-corners) resample, used to bring stored heatmaps to
    /// the loss or metric resolution.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<SaliencyMap> {
        let mut g = Graph::new();
        let t = Tensor::new(&[1, 1, self.h, self.w], self.values.clone())?;
        let id = g.leaf(&t);
        let up = g.bilinear_upsample(id, out_h, out_w)?;
        SaliencyMap::new(out_h, out_w, g.data(up).to_vec())
    }
}

/// Architecture of the saliency detector.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyNetConfig {
    /// Channel width of each conv stage; one 2x2/2 max pool closes each stage.
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
    /// Square input extent.
    pub input_size: usize,
    /// Expected pre-upsample extent, checked against the pooling arithmetic.
    pub coarse_size: usize,
    /// Round pooled extents up (clipped border windows). The full-scale
    /// preset needs this to reach 10x10 from 299x299.
    pub ceil_pool: bool,
}

impl SaliencyNetConfig {
    /// Desk-scale preset: trains in minutes on a CPU.
    pub fn desk() -> Self {
        SaliencyNetConfig {
            stage_channels: vec![16, 32, 64],
            convs_per_stage: vec![1, 1, 1],
            input_size: 64,
            coarse_size: 8,
            ceil_pool: false,
        }
    }

    /// Narrow variant of the desk preset for end-to-end training runs.
    pub fn desk_narrow() -> Self {
        SaliencyNetConfig {
            stage_channels: vec![8, 12, 16],
            convs_per_stage: vec![1, 1, 1],
            input_size: 64,
            coarse_size: 8,
            ceil_pool: false,
        }
    }

    /// Full-scale shape preset: 13 convs / 5 pools, 299x299 in, 10x10 coarse.
    /// Used for shape tests only; training it is out of scope.
    pub fn full_shapes() -> Self {
        SaliencyNetConfig {
            stage_channels: vec![64, 128, 256, 512, 512],
            convs_per_stage: vec![2, 2, 4, 4, 1],
            input_size: 299,
            coarse_size: 10,
            ceil_pool: true,
        }
    }

    /// Spatial extent after each pool stage.
    pub fn stage_extents(&self) -> Vec<usize> {
        let mut e = self.input_size;
        let mut out = Vec::with_capacity(self.stage_channels.len());
        for _ in &self.stage_channels {
            e = if self.ceil_pool { e.div_ceil(2) } else { e / 2 };
            out.push(e);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Config("saliency net needs at least one stage".into()));
        }
        if self.stage_channels.len() != self.convs_per_stage.len() {
            return Err(Error::Config(format!(
                "{} stage widths but {} conv counts",
                self.stage_channels.len(),
                self.convs_per_stage.len()
            )));
        }
        if self.convs_per_stage.iter().any(|&c| c == 0) {
            return Err(Error::Config("every stage needs at least one conv".into()));
        }
        let extents = self.stage_extents();
        for (i, &e) in extents.iter().enumerate() {
            if e == 0 {
                return Err(Error::Config(format!(
                    "pool stage {} collapses the spatial extent to zero (sequence {:?})",
                    i, extents
                )));
            }
        }
        let last = *extents.last().unwrap();
        if last != self.coarse_size {
            return Err(Error::Config(format!(
                "pooling arithmetic yields {}x{} after the last stage, config expects coarse_size {} (sequence {:?})",
                last, last, self.coarse_size, extents
            )));
        }
        Ok(())
    }
}

/// The saliency detector network.
#[derive(Debug, Clone)]
pub struct SaliencyNet {
    pub config: SaliencyNetConfig,
    pub stages: Vec<Vec<Conv2d>>,
    /// 1x1 scoring conv mapping the last feature block to one channel.
    /// No squashing nonlinearity follows it.
    pub score: Conv2d,
}

impl SaliencyNet {
    /// Builds a network with He-initialized conv weights and zero biases.
    pub fn build(config: SaliencyNetConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(rng_seed, "saliency-init");
        let mut stages = Vec::new();
        let mut in_c = 3;
        for (si, (&width, &n_convs)) in config
            .stage_channels
            .iter()
            .zip(&config.convs_per_stage)
            .enumerate()
        {
            let _ = si;
            let mut convs = Vec::new();
            for _ in 0..n_convs {
                convs.push(Conv2d::new(in_c, width, 3, 1, 1, &mut rng));
                in_c = width;
            }
            stages.push(convs);
        }
        let score = Conv2d::new(in_c, 1, 1, 1, 0, &mut rng);
        Ok(SaliencyNet {
            config,
            stages,
            score,
        })
    }

    /// Forward pass: `[N,3,S,S] -> (coarse [N,1,c,c], full [N,1,S,S])`.
    /// `full` is exactly `bilinear_upsample(coarse)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Bindings,
        images: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let shape = g.shape(images).to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!(
                "saliency net expects [N,3,{},{}] input, got {:?}",
                s, s, shape
            )));
        }
        let mut x = images;
        for convs in &self.stages {
            for conv in convs {
                x = conv.forward(g, b, x)?;
                x = g.relu(x);
            }
            x = g.maxpool2d(x, 2, 2, self.config.ceil_pool)?;
        }
        let coarse = self.score.forward(g, b, x)?;
        let full = g.bilinear_upsample(coarse, s, s)?;
        Ok((coarse, full))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (si, convs) in self.stages.iter().enumerate() {
            for (ci, conv) in convs.iter().enumerate() {
                conv.collect_params(&format!("saliency.stage{si}.conv{ci}"), &mut out);
            }
        }
        self.score.collect_params("saliency.score", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for convs in &mut self.stages {
            for conv in convs {
                conv.collect_params_mut(&mut out);
            }
        }
        self.score.collect_params_mut(&mut out);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_params().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let m = SaliencyMap::new(2, 2, vec![0.0, 5.0, 10.0, 5.0]).unwrap();
        assert_eq!(m.normalize().values, vec![0.0, 0.5, 1.0, 0.5]);

        let c = SaliencyMap::constant(3, 3, 4.2);
        assert_eq!(c.normalize().values, vec![0.0; 9]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let m = SaliencyMap::new(2, 3, vec![1.0, -2.0, 0.5, 7.0, 3.0, 3.0]).unwrap();
        let n1 = m.normalize();
        let n2 = n1.normalize();
        assert_eq!(n1.values, n2.values);
    }

    #[test]
    fn desk_preset_shape() {
        let cfg = SaliencyNetConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.stage_extents(), vec![32, 16, 8]);
    }

    #[test]
    fn full_preset_reaches_10x10() {
        let cfg = SaliencyNetConfig::full_shapes();
        cfg.validate().unwrap();
        assert_eq!(cfg.stage_extents(), vec![150, 75, 38, 19, 10]);
        assert_eq!(
            cfg.convs_per_stage.iter().sum::<usize>(),
            13,
            "13 convs, 5 pools"
        );
    }

    #[test]
    fn bad_coarse_size_rejected_at_build() {
        let mut cfg = SaliencyNetConfig::desk();
        cfg.coarse_size = 9;
        let err = SaliencyNet::build(cfg, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("coarse_size"), "{msg}");
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SaliencyNet::build(SaliencyNetConfig::desk(), 42).unwrap();
        let b = SaliencyNet::build(SaliencyNetConfig::desk(), 42).unwrap();
        for ((_, pa), (_, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(pa.data, pb.data);
        }
    }

    #[test]
    fn forward_full_equals_upsampled_coarse() {
        let net = SaliencyNet::build(SaliencyNetConfig::desk_narrow(), 5).unwrap();
        let mut rng = stream_rng(11, "data");
        let img = crate::nn::gaussian(&[1, 3, 64, 64], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut b = Bindings::default();
        let x = g.leaf(&img);
        let (coarse, full) = net.forward(&mut g, &mut b, x).unwrap();
        assert_eq!(g.shape(coarse), &[1, 1, 8, 8]);
        assert_eq!(g.shape(full), &[1, 1, 64, 64]);
        // corners of the full map equal the coarse corners (align-corners)
        let cm = g.data(coarse).to_vec();
        let fm = g.data(full).to_vec();
        assert_eq!(fm[0], cm[0]);
        assert_eq!(fm[63], cm[7]);
        assert_eq!(fm[63 * 64], cm[7 * 8]);
        assert_eq!(fm[64 * 64 - 1], cm[63]);
    }

    #[test]
    fn batch_independence() {
        let net = SaliencyNet::build(SaliencyNetConfig::desk_narrow(), 5).unwrap();
        let mut rng = stream_rng(12, "data");
        let a = crate::nn::gaussian(&[1, 3, 64, 64], 1.0, &mut rng);
        let b2 = crate::nn::gaussian(&[1, 3, 64, 64], 1.0, &mut rng);
        let mut batch = a.data.clone();
        batch.extend_from_slice(&b2.data);
        let both = Tensor::new(&[2, 3, 64, 64], batch).unwrap();

        let run = |img: &Tensor| {
            let mut g = Graph::new();
            let mut bnd = Bindings::default();
            let x = g.leaf(img);
            let (_, full) = net.forward(&mut g, &mut bnd, x).unwrap();
            g.data(full).to_vec()
        };
        let fa = run(&a);
        let fb = run(&b2);
        let fboth = run(&both);
        assert_eq!(&fboth[..64 * 64], &fa[..]);
        assert_eq!(&fboth[64 * 64..], &fb[..]);
    }
}
