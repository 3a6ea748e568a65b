//! Full classifier: encoder followed by the aggregation head.

use crate::aggregation::Csa;
use crate::config::ModelConfig;
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug)]
pub struct Hsvlt {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub csa: Csa,
}

impl Hsvlt {
    /// Parameters are drawn from `cfg.seed`, encoder first, so every head
    /// variant shares identical encoder weights.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(cfg.seed);
        let encoder = Encoder::new(&mut store, cfg, &mut rng)?;
        let csa = Csa::new(&mut store, &cfg.csa, &cfg.channels, cfg.seed, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), store, encoder, csa })
    }

    /// The whole vocabulary is always the linguistic input.
    pub fn label_ids(&self) -> Vec<usize> {
        (0..self.cfg.num_labels).collect()
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let [h, w] = self.cfg.image_size;
        let expect = [images.shape().first().copied().unwrap_or(0), self.cfg.input_channels, h, w];
        if images.rank() != 4 || images.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: images.shape().to_vec(),
                rhs: vec![self.cfg.input_channels, h, w],
            });
        }
        Ok(())
    }

    /// Logits and every intermediate stage feature.
    pub fn forward_features(&self, images: &Tensor, mode: Mode) -> Result<(Tensor, EncoderOutput)> {
        self.check_images(images)?;
        let enc = self.encoder.forward(images, &self.label_ids(), mode)?;
        let logits = self.csa.forward(&enc.multimodal, &enc.linguistic)?;
        Ok((logits, enc))
    }

    /// (B, T) logits.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_features(images, mode)?.0)
    }

    /// Sigmoid probabilities in eval mode, without recording a graph.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        no_grad(|| Ok(self.forward(images, Mode::Eval)?.sigmoid()))
    }
}

pub fn model_forward(model: &Hsvlt, images: &Tensor, mode: Mode) -> Result<Tensor> {
    model.forward(images, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{count_params_flops, CsaVariant};

    #[test]
    fn desk_logits_shape_and_determinism() {
        let cfg = ModelConfig::desk();
        let mut rng = Rng::new(5);
        let images = Tensor::new(rng.vec_uniform(2 * 3 * 32 * 32, 0.0, 1.0), &[2, 3, 32, 32]).unwrap();
        let a = Hsvlt::new(&cfg).unwrap().forward(&images, Mode::Train).unwrap();
        let b = Hsvlt::new(&cfg).unwrap().forward(&images, Mode::Train).unwrap();
        assert_eq!(a.shape(), &[2, 5]);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn head_variants_share_encoder_weights() {
        let mut cfg = ModelConfig::desk();
        let a = Hsvlt::new(&cfg).unwrap();
        cfg.csa.variant = CsaVariant::S4HeadMlp;
        let b = Hsvlt::new(&cfg).unwrap();
        let w = "stage3.block1.ivla.omega_l2.weight";
        assert_eq!(a.store.get(w).unwrap().value().data(), b.store.get(w).unwrap().value().data());
    }

    #[test]
    fn param_count_matches_counter() {
        for variant in CsaVariant::ALL {
            let mut cfg = ModelConfig::desk();
            cfg.csa.variant = variant;
            let model = Hsvlt::new(&cfg).unwrap();
            assert_eq!(model.store.num_trainable(), count_params_flops(&cfg).unwrap().params);
        }
    }

    #[test]
    fn wrong_image_shape_is_an_error() {
        let model = Hsvlt::new(&ModelConfig::desk()).unwrap();
        assert!(model.forward(&Tensor::zeros(&[1, 3, 16, 16]), Mode::Eval).is_err());
        assert!(model.forward(&Tensor::zeros(&[1, 1, 32, 32]), Mode::Eval).is_err());
    }
}
