use rand::Rng;

use super::{sine_position_encoding, EncodedFeatures, MaskPrediction, SegHeadConfig};
use crate::error::Result;
use crate::layers::{Attention, LayerNorm, Mlp};
use crate::numerics::{kernels, sigmoid, Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const DECODER_LAYERS: usize = 4;

/// Boolean attention mask for one decoder layer.
///
/// `mask_logits` is `[N, H * W]`. Each query's sigmoid map is bilinearly
/// resampled to the `h x w` token grid and thresholded at 0.5.
pub fn attention_mask<T: Scalar>(
    mask_logits: &[T],
    n: usize,
    full: (usize, usize),
    grid: (usize, usize),
) -> Vec<bool> {
    let probs: Vec<T> = mask_logits.iter().map(|&v| sigmoid(v)).collect();
    let small = kernels::bilinear_resize(&probs, n, full, grid);
    let half = T::of(0.5);
    small.into_iter().map(|v| v >= half).collect()
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    cross: Attention,
    norm_cross: LayerNorm,
    self_attn: Attention,
    norm_self: LayerNorm,
    ffn: Mlp,
    norm_ffn: LayerNorm,
}

/// Result of running the query decoder.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub queries: Var,
    /// `M~_l = Q^(l) E_pixel` for l = 0..3, each `[N, H * W]`.
    pub intermediate: Vec<Var>,
    /// Index (0 = finest) of the encoded level consumed by each layer.
    pub consumed_levels: Vec<usize>,
    /// Number of token rows each query was allowed to attend to, per layer.
    pub allowed_tokens: Vec<Vec<usize>>,
}

/// Learnable queries refined by four masked-attention layers, coarsest
/// feature level first.
#[derive(Debug, Clone)]
pub struct QueryDecoder {
    queries: ParamId,
    layers: Vec<DecoderLayer>,
    c_d: usize,
    n_queries: usize,
}

impl QueryDecoder {
    pub fn new<T: Scalar>(cfg: &SegHeadConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut impl Rng) -> Self {
        let queries = store.add(format!("{prefix}.queries"), Tensor::randn([cfg.n_queries, cfg.c_e], 1.0, rng));
        let layers = (0..DECODER_LAYERS)
            .map(|l| {
                let name = format!("{prefix}.layer{l}");
                DecoderLayer {
                    cross: Attention::new(store, &format!("{name}.cross"), cfg.c_e, cfg.c_d, cfg.c_e, cfg.heads, rng),
                    norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), cfg.c_e),
                    self_attn: Attention::new(store, &format!("{name}.self"), cfg.c_e, cfg.c_e, cfg.c_e, cfg.heads, rng),
                    norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), cfg.c_e),
                    ffn: Mlp::new(store, &format!("{name}.ffn"), &[cfg.c_e, 2 * cfg.c_e, cfg.c_e], rng),
                    norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), cfg.c_e),
                }
            })
            .collect();
        QueryDecoder { queries, layers, c_d: cfg.c_d, n_queries: cfg.n_queries }
    }

    pub fn initial_queries(&self) -> ParamId {
        self.queries
    }

    /// Run all layers. `e_pixel` is `[C_e, H, W]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        enc: &EncodedFeatures,
        e_pixel: Var,
    ) -> Result<DecodeOutput> {
        let es = g.shape(e_pixel).to_vec();
        let (c_e, h, w) = (es[0], es[1], es[2]);
        let e_flat = g.reshape(e_pixel, &[c_e, h * w])?;
        let mut q = p[self.queries];
        let mut out = DecodeOutput {
            queries: q,
            intermediate: Vec::with_capacity(DECODER_LAYERS),
            consumed_levels: Vec::with_capacity(DECODER_LAYERS),
            allowed_tokens: Vec::with_capacity(DECODER_LAYERS),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let level = DECODER_LAYERS - 1 - l;
            let feat = enc.levels[level];
            let fs = g.shape(feat).to_vec();
            let (fh, fw) = (fs[1], fs[2]);

            let m_tilde = g.matmul(q, e_flat)?;
            let allowed = attention_mask(g.value(m_tilde).data(), self.n_queries, (h, w), (fh, fw));
            out.allowed_tokens.push(
                allowed
                    .chunks(fh * fw)
                    .map(|row| row.iter().filter(|&&a| a).count())
                    .collect(),
            );
            out.intermediate.push(m_tilde);
            out.consumed_levels.push(level);

            let flat = g.reshape(feat, &[self.c_d, fh * fw])?;
            let tokens = g.transpose(flat)?;
            let pos = g.constant(sine_position_encoding(fh, fw, self.c_d));
            let keys = g.add(tokens, pos)?;
            let a = layer.cross.forward(g, p, q, keys, tokens, Some(&allowed))?;
            let r = g.add(q, a)?;
            q = layer.norm_cross.forward(g, p, r)?;

            let a = layer.self_attn.forward(g, p, q, q, q, None)?;
            let r = g.add(q, a)?;
            q = layer.norm_self.forward(g, p, r)?;

            let f = layer.ffn.forward(g, p, q)?;
            let r = g.add(q, f)?;
            q = layer.norm_ffn.forward(g, p, r)?;
        }
        out.queries = q;
        Ok(out)
    }
}

/// Mask and class MLPs applied to the decoded queries.
#[derive(Debug, Clone)]
pub struct MaskPredictor {
    f_mask: Mlp,
    f_class: Mlp,
}

impl MaskPredictor {
    pub fn new<T: Scalar>(cfg: &SegHeadConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut impl Rng) -> Self {
        MaskPredictor {
            f_mask: Mlp::new(store, &format!("{prefix}.f_mask"), &[cfg.c_e, cfg.c_e, cfg.c_e], rng),
            f_class: Mlp::new(store, &format!("{prefix}.f_class"), &[cfg.c_e, cfg.c_e, 1], rng),
        }
    }

    /// `[N, C_e] x [C_e, H, W] -> [N, H * W]` dot products over channels.
    pub fn mask_logits<T: Scalar>(g: &mut Graph<T>, q_mask: Var, e_pixel: Var) -> Result<Var> {
        let es = g.shape(e_pixel).to_vec();
        let flat = g.reshape(e_pixel, &[es[0], es[1] * es[2]])?;
        g.matmul(q_mask, flat)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        decoded: &DecodeOutput,
        e_pixel: Var,
    ) -> Result<MaskPrediction> {
        let q = decoded.queries;
        let n = g.shape(q)[0];
        let es = g.shape(e_pixel).to_vec();
        let q_mask = self.f_mask.forward(g, p, q)?;
        let mask_logits = Self::mask_logits(g, q_mask, e_pixel)?;
        let c = self.f_class.forward(g, p, q)?;
        let class_logits = g.reshape(c, &[n])?;
        Ok(MaskPrediction {
            e_pixel,
            mask_logits,
            class_logits,
            intermediate: decoded.intermediate.clone(),
            consumed_levels: decoded.consumed_levels.clone(),
            height: es[1],
            width: es[2],
            n_queries: n,
        })
    }
}
