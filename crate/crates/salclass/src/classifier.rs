//! Saliency-conditioned classifier over 4-channel RGBS input.
//!
//! The first-layer kernels are held as two tensors — an RGB slice and an
//! optional saliency slice — concatenated along the channel axis at
//! forward time. This makes the kernel extension exact (the RGB slice is
//! the donor model's tensor, untouched) and lets the saliency slice carry
//! its own learning-rate group.

use crate::error::{Error, Result};
use crate::nn::{gaussian, Bindings, Conv2d, Dense};
use crate::rng::stream_rng;
use crate::tensor::{Graph, NodeId, Tensor};

/// Extends `[K,3,kh,kw]` first-layer kernels to `[K,4,kh,kw]`: channels
/// 0-2 are bitwise copies, channel 3 is fresh zero-mean Gaussian noise of
/// the given scale.
pub fn extend_first_layer(kernels3: &Tensor, rng_seed: u64, init_scale: f64) -> Result<Tensor> {
    if kernels3.shape.len() != 4 || kernels3.shape[1] != 3 {
        return Err(Error::Contract(format!(
            "extend_first_layer expects [K,3,kh,kw] kernels, got {:?}",
            kernels3.shape
        )));
    }
    let (k, kh, kw) = (kernels3.shape[0], kernels3.shape[2], kernels3.shape[3]);
    let mut rng = stream_rng(rng_seed, "extend-first-layer");
    let fresh = gaussian(&[k, 1, kh, kw], init_scale, &mut rng);
    let plane = kh * kw;
    let mut data = Vec::with_capacity(k * 4 * plane);
    for ki in 0..k {
        data.extend_from_slice(&kernels3.data[ki * 3 * plane..(ki + 1) * 3 * plane]);
        data.extend_from_slice(&fresh.data[ki * plane..(ki + 1) * plane]);
    }
    Ok(Tensor::new(&[k, 4, kh, kw], data)?.with_grad())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub n_classes: usize,
    /// 3 for RGB, 4 for RGBS.
    pub input_channels: usize,
    pub input_size: usize,
    /// One conv per stage, each followed by relu and a 2x2/2 max pool.
    pub stage_channels: Vec<usize>,
    pub fc_width: usize,
    /// Global average pooling before the fully connected head instead of
    /// flattening the spatial grid; far fewer parameters and a
    /// translation-invariant head.
    pub global_pool: bool,
}

impl ClassifierConfig {
    pub fn desk(n_classes: usize, input_channels: usize) -> Self {
        ClassifierConfig {
            n_classes,
            input_channels,
            input_size: 64,
            stage_channels: vec![16, 32],
            fc_width: 64,
            global_pool: true,
        }
    }

    pub fn desk_narrow(n_classes: usize, input_channels: usize) -> Self {
        ClassifierConfig {
            n_classes,
            input_channels,
            input_size: 64,
            stage_channels: vec![8, 16],
            fc_width: 32,
            global_pool: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.input_channels != 3 && self.input_channels != 4 {
            return Err(Error::Config(format!(
                "input_channels must be 3 or 4, got {}",
                self.input_channels
            )));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::Config("classifier needs at least one stage".into()));
        }
        let mut e = self.input_size;
        for _ in &self.stage_channels {
            e /= 2;
            if e == 0 {
                return Err(Error::Config(
                    "classifier pooling collapses the spatial extent".into(),
                ));
            }
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        if self.global_pool {
            return *self.stage_channels.last().unwrap();
        }
        let mut e = self.input_size;
        for _ in &self.stage_channels {
            e /= 2;
        }
        self.stage_channels.last().unwrap() * e * e
    }
}

/// Softmax output of a classifier forward pass.
pub struct ClassifierOutput {
    pub logits: NodeId,
    pub probs: NodeId,
}

/// First conv layer with the kernel split into an RGB slice and an
/// optional saliency slice.
pub struct SplitConv {
    pub weight_rgb: Tensor,
    pub weight_s: Option<Tensor>,
    pub bias: Tensor,
}

impl SplitConv {
    fn forward(&self, g: &mut Graph, b: &mut Bindings, x: NodeId) -> Result<NodeId> {
        let wr = b.bind(g, &self.weight_rgb);
        let kernel = match &self.weight_s {
            Some(ws) => {
                let wsid = b.bind(g, ws);
                g.concat_channels(wr, wsid)?
            }
            None => wr,
        };
        let bias = b.bind(g, &self.bias);
        g.conv2d(x, kernel, bias, 1, 1)
    }
}

/// Which learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Pretrained,
    Fresh,
}

pub struct RgbsClassifier {
    pub config: ClassifierConfig,
    pub first: SplitConv,
    pub rest: Vec<Conv2d>,
    pub fc: Dense,
    pub out: Dense,
    /// True when the RGB slice of the first layer (and the rest of the
    /// stack) came from a pre-trained 3-channel model.
    pub rgb_pretrained: bool,
}

impl RgbsClassifier {
    /// From-scratch build; every parameter lands in the fresh group.
    pub fn build(config: ClassifierConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(rng_seed, "classifier-init");
        let k0 = config.stage_channels[0];
        let fan_in = config.input_channels * 9;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight_rgb = gaussian(&[k0, 3, 3, 3], std, &mut rng);
        let weight_s = if config.input_channels == 4 {
            Some(gaussian(&[k0, 1, 3, 3], std, &mut rng))
        } else {
            None
        };
        let first = SplitConv {
            weight_rgb,
            weight_s,
            bias: Tensor::zeros(&[k0]).with_grad(),
        };
        let mut rest = Vec::new();
        let mut in_c = k0;
        for &width in &config.stage_channels[1..] {
            rest.push(Conv2d::new(in_c, width, 3, 1, 1, &mut rng));
            in_c = width;
        }
        let fc = Dense::new(config.flat_features(), config.fc_width, &mut rng);
        let out = Dense::new(config.fc_width, config.n_classes, &mut rng);
        Ok(RgbsClassifier {
            config,
            first,
            rest,
            fc,
            out,
            rgb_pretrained: false,
        })
    }

    /// Converts a 3-channel classifier into a 4-channel one by extending
    /// its first-layer kernels; everything else is moved over untouched.
    /// The donor's parameters form the pretrained group, the new saliency
    /// slice the fresh group.
    pub fn from_rgb(mut donor: RgbsClassifier, rng_seed: u64, init_scale: f64) -> Result<Self> {
        if donor.config.input_channels != 3 || donor.first.weight_s.is_some() {
            return Err(Error::Contract(
                "from_rgb needs a 3-channel donor classifier".into(),
            ));
        }
        let k0 = donor.config.stage_channels[0];
        let mut rng = stream_rng(rng_seed, "extend-first-layer");
        donor.first.weight_s = Some(gaussian(&[k0, 1, 3, 3], init_scale, &mut rng));
        donor.config.input_channels = 4;
        donor.rgb_pretrained = true;
        Ok(donor)
    }

    /// `[N,C,S,S] -> ClassifierOutput` with softmax probabilities.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Bindings,
        input: NodeId,
    ) -> Result<ClassifierOutput> {
        let shape = g.shape(input).to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != self.config.input_channels || shape[2] != s || shape[3] != s
        {
            return Err(Error::Shape(format!(
                "classifier expects [N,{},{},{}] input, got {:?}",
                self.config.input_channels, s, s, shape
            )));
        }
        let mut x = self.first.forward(g, b, input)?;
        x = g.relu(x);
        x = g.maxpool2d(x, 2, 2, false)?;
        for conv in &self.rest {
            x = conv.forward(g, b, x)?;
            x = g.relu(x);
            x = g.maxpool2d(x, 2, 2, false)?;
        }
        let flat = if self.config.global_pool {
            g.global_avg_pool(x)?
        } else {
            g.flatten(x)
        };
        let h = self.fc.forward(g, b, flat)?;
        let h = g.relu(h);
        let logits = self.out.forward(g, b, h)?;
        let probs = g.softmax(logits)?;
        Ok(ClassifierOutput { logits, probs })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("classifier.first.weight_rgb".to_string(), &self.first.weight_rgb));
        if let Some(ws) = &self.first.weight_s {
            out.push(("classifier.first.weight_s".to_string(), ws));
        }
        out.push(("classifier.first.bias".to_string(), &self.first.bias));
        for (i, conv) in self.rest.iter().enumerate() {
            conv.collect_params(&format!("classifier.conv{}", i + 1), &mut out);
        }
        self.fc.collect_params("classifier.fc", &mut out);
        self.out.collect_params("classifier.out", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.first.weight_rgb);
        if let Some(ws) = &mut self.first.weight_s {
            out.push(ws);
        }
        out.push(&mut self.first.bias);
        for conv in &mut self.rest {
            conv.collect_params_mut(&mut out);
        }
        self.fc.collect_params_mut(&mut out);
        self.out.collect_params_mut(&mut out);
        out
    }

    /// Learning-rate group per parameter, aligned with `named_params`.
    ///
    /// When the RGB stack is pretrained, only the saliency slice of the
    /// first-layer kernels is fresh; a from-scratch model is all fresh.
    pub fn parameter_groups(&self) -> Vec<ParamGroup> {
        self.named_params()
            .iter()
            .map(|(name, _)| {
                if !self.rgb_pretrained || name == "classifier.first.weight_s" {
                    ParamGroup::Fresh
                } else {
                    ParamGroup::Pretrained
                }
            })
            .collect()
    }
}

/// Reference learning rates for the two groups (`fresh`, `pretrained`).
pub const REFERENCE_LR_FRESH: f64 = 0.05;
pub const REFERENCE_LR_PRETRAINED: f64 = 0.001;
