//! The joint model: saliency detector -> batch-norm bridge -> RGBS
//! classifier, trained end to end under `L = alpha * L_C + L_S`.

use crate::classifier::{ClassifierConfig, ParamGroup, RgbsClassifier};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Bindings};
use crate::saliency::{SaliencyNet, SaliencyNetConfig};
use crate::tensor::{BatchNormMode, Graph, NodeId, Tensor};

pub struct SalClassNet {
    pub saliency: SaliencyNet,
    /// Normalizes the predicted map to zero mean / unit std before it
    /// enters the classifier's saliency channel.
    pub bridge: BatchNorm2d,
    pub classifier: RgbsClassifier,
}

/// Node ids of interest from a joint forward pass.
pub struct ForwardOut {
    pub bindings: Bindings,
    pub coarse: NodeId,
    /// Raw upsampled map; the saliency loss is computed on this, before
    /// the bridge.
    pub full: NodeId,
    /// Bridge output that feeds the classifier's S channel.
    pub bridged: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

impl SalClassNet {
    pub fn build(
        sal_config: SaliencyNetConfig,
        cls_config: ClassifierConfig,
        rng_seed: u64,
    ) -> Result<Self> {
        if cls_config.input_channels != 4 {
            return Err(Error::Config(
                "SalClassNet requires a 4-channel classifier".into(),
            ));
        }
        if cls_config.input_size != sal_config.input_size {
            return Err(Error::Config(format!(
                "saliency input size {} != classifier input size {}",
                sal_config.input_size, cls_config.input_size
            )));
        }
        let saliency = SaliencyNet::build(sal_config, rng_seed)?;
        let classifier = RgbsClassifier::build(cls_config, rng_seed)?;
        Ok(SalClassNet {
            saliency,
            bridge: BatchNorm2d::new(1),
            classifier,
        })
    }

    /// Full forward: images `[N,3,S,S]` through detector, bridge and
    /// classifier. Parameter bindings cover all three parts in
    /// `named_params` order.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        images: NodeId,
        mode: BatchNormMode,
    ) -> Result<ForwardOut> {
        let mut b = Bindings::default();
        let (coarse, full) = self.saliency.forward(g, &mut b, images)?;
        let bridged = self.bridge.forward(g, &mut b, full, mode)?;
        let rgbs = g.concat_channels(images, bridged)?;
        let out = self.classifier.forward(g, &mut b, rgbs)?;
        Ok(ForwardOut {
            bindings: b,
            coarse,
            full,
            bridged,
            logits: out.logits,
            probs: out.probs,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.saliency.named_params();
        self.bridge.collect_params("bridge", &mut out);
        out.extend(self.classifier.named_params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.saliency.params_mut();
        self.bridge.collect_params_mut(&mut out);
        out.extend(self.classifier.params_mut());
        out
    }

    /// Learning-rate groups aligned with `named_params`. Saliency net and
    /// bridge follow the classifier's base group unless pretrained
    /// machinery is involved (out of scope at desk scale: all fresh).
    pub fn parameter_groups(&self) -> Vec<ParamGroup> {
        let n_sal = self.saliency.named_params().len();
        let mut out = vec![ParamGroup::Fresh; n_sal + 2];
        out.extend(self.classifier.parameter_groups());
        out
    }

    /// Index range of the saliency-detector parameters within
    /// `named_params` order.
    pub fn saliency_param_range(&self) -> std::ops::Range<usize> {
        0..self.saliency.named_params().len()
    }

    /// Index range of the classifier parameters within `named_params`.
    pub fn classifier_param_range(&self) -> std::ops::Range<usize> {
        let n_sal = self.saliency.named_params().len();
        let start = n_sal + 2; // skip bridge gamma/beta
        start..start + self.classifier.named_params().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;
    use crate::rng::stream_rng;

    fn desk_model(seed: u64) -> SalClassNet {
        SalClassNet::build(
            SaliencyNetConfig::desk_narrow(),
            ClassifierConfig::desk_narrow(4, 4),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn forward_shapes() {
        let mut m = desk_model(1);
        let mut rng = stream_rng(2, "data");
        let img = gaussian(&[2, 3, 64, 64], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(&img);
        let out = m.forward(&mut g, x, BatchNormMode::Train).unwrap();
        assert_eq!(g.shape(out.coarse), &[2, 1, 8, 8]);
        assert_eq!(g.shape(out.full), &[2, 1, 64, 64]);
        assert_eq!(g.shape(out.probs), &[2, 4]);
    }

    #[test]
    fn bridge_output_is_normalized_in_train_mode() {
        let mut m = desk_model(3);
        let mut rng = stream_rng(4, "data");
        let img = gaussian(&[2, 3, 64, 64], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(&img);
        let out = m.forward(&mut g, x, BatchNormMode::Train).unwrap();
        let v = g.data(out.bridged);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6, "bridge mean {mean}");
        assert!((std - 1.0).abs() < 1e-3, "bridge std {std}");
    }

    #[test]
    fn param_ranges_partition() {
        let m = desk_model(5);
        let total = m.named_params().len();
        let sr = m.saliency_param_range();
        let cr = m.classifier_param_range();
        assert_eq!(sr.start, 0);
        assert_eq!(sr.end + 2, cr.start);
        assert_eq!(cr.end, total);
    }
}
