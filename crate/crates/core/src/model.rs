//! Full segmentation network: backbone, pixel decoder, per-pixel embedding,
//! query decoder and prediction heads over one parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, PREFIX as BACKBONE_PREFIX};
use crate::error::{invalid, Result};
use crate::numerics::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use crate::seghead::{
    MaskPrediction, MaskPredictor, PixelDecoder, PixelEmbedding, QueryDecoder, SegHeadConfig, PREFIX as HEAD_PREFIX,
};

/// Name of the architecture descriptor stored alongside model weights.
pub const ARCH_TENSOR: &str = "meta.arch";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: SegHeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()
    }

    /// Architecture as a flat f64 tensor, so a checkpoint alone suffices to
    /// rebuild the network.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let b = &self.backbone;
        let h = &self.head;
        let mut v: Vec<f64> = Vec::with_capacity(15);
        v.extend(b.stage_channels.iter().map(|&c| c as f64));
        v.extend(b.blocks_per_stage.iter().map(|&c| c as f64));
        v.push(b.norm_groups as f64);
        for x in [h.n_queries, h.c_e, h.c_d, h.heads, h.encoder_layers, h.norm_groups] {
            v.push(x as f64);
        }
        let n = v.len();
        Tensor::new(vec![n], v).expect("arch vector")
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        let d = t.data();
        if d.len() != 15 || d.iter().any(|&x| x < 0.0 || x.fract() != 0.0) {
            return Err(invalid!("malformed {ARCH_TENSOR} tensor"));
        }
        let u = |i: usize| d[i] as usize;
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                stage_channels: [u(0), u(1), u(2), u(3)],
                blocks_per_stage: [u(4), u(5), u(6), u(7)],
                norm_groups: u(8),
            },
            head: SegHeadConfig {
                n_queries: u(9),
                c_e: u(10),
                c_d: u(11),
                heads: u(12),
                encoder_layers: u(13),
                norm_groups: u(14),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    config: ModelConfig,
    pub backbone: Backbone,
    pub pixel_decoder: PixelDecoder,
    pub pixel_embedding: PixelEmbedding,
    pub query_decoder: QueryDecoder,
    pub predictor: MaskPredictor,
}

impl Segmenter {
    pub fn new<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(&config.backbone, store, BACKBONE_PREFIX, rng)?;
        let h = &config.head;
        let pixel_decoder = PixelDecoder::new(
            h,
            config.backbone.stage_channels,
            store,
            &format!("{HEAD_PREFIX}.pixel_decoder"),
            rng,
        );
        let pixel_embedding = PixelEmbedding::new(h, store, &format!("{HEAD_PREFIX}.embed"), rng);
        let query_decoder = QueryDecoder::new(h, store, &format!("{HEAD_PREFIX}.decoder"), rng);
        let predictor = MaskPredictor::new(h, store, &format!("{HEAD_PREFIX}.predict"), rng);
        Ok(Segmenter {
            config: config.clone(),
            backbone,
            pixel_decoder,
            pixel_embedding,
            query_decoder,
            predictor,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Image `3 x H x W` to proposal masks and class logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<MaskPrediction> {
        let feats = self.backbone.forward(g, p, image)?;
        let enc = self.pixel_decoder.forward(g, p, &feats)?;
        let e_pixel = self.pixel_embedding.forward(g, p, enc.levels[0])?;
        let decoded = self.query_decoder.forward(g, p, &enc, e_pixel)?;
        self.predictor.forward(g, p, &decoded, e_pixel)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn arch_tensor_round_trip() {
        let cfg = ModelConfig {
            backbone: BackboneConfig { stage_channels: [8, 16, 32, 64], ..Default::default() },
            head: SegHeadConfig { n_queries: 5, ..Default::default() },
        };
        assert_eq!(ModelConfig::from_tensor(&cfg.to_tensor()).unwrap(), cfg);
    }

    #[test]
    fn forward_shapes() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::<f32>::new();
        let net = Segmenter::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let img = g.constant(Tensor::full([3, 64, 64], 0.3f32));
        let pred = net.forward(&mut g, &p, img).unwrap();
        assert_eq!(g.shape(pred.mask_logits), &[16, 64 * 64]);
        assert_eq!(g.shape(pred.class_logits), &[16]);
        assert_eq!(g.shape(pred.e_pixel), &[32, 64, 64]);
        assert_eq!(pred.consumed_levels, vec![3, 2, 1, 0]);
        assert!(g.value(pred.mask_logits).is_finite());
    }
}
