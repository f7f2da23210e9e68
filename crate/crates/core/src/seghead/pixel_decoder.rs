use rand::Rng;

use super::SegHeadConfig;
use crate::backbone::MultiScaleFeatures;
use crate::error::Result;
use crate::layers::{Attention, Conv2d, ConvTranspose2d, LayerNorm, Mlp};
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Fixed 2-D sine/cosine encoding of an `h x w` grid, `[h * w, dim]`.
///
/// The first half of the channels encodes the row, the second half the
/// column, each as interleaved sin/cos pairs over geometric frequencies of
/// the normalised coordinate.
pub fn sine_position_encoding<T: Scalar>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let pairs = half / 2;
    let mut out = Vec::with_capacity(h * w * dim);
    let two_pi = std::f64::consts::TAU;
    let freq = |i: usize| 10000f64.powf(-(2.0 * i as f64) / half as f64);
    for y in 0..h {
        let py = (y as f64 + 0.5) / h as f64 * two_pi;
        for x in 0..w {
            let px = (x as f64 + 0.5) / w as f64 * two_pi;
            for p in [py, px] {
                for i in 0..pairs {
                    let a = p * freq(i);
                    out.push(T::of(a.sin()));
                    out.push(T::of(a.cos()));
                }
            }
        }
    }
    Tensor::new(vec![h * w, dim], out).expect("encoding shape")
}

/// Enriched features `D1..D4`, same spatial extents as `F1..F4`, `C_d` wide.
#[derive(Debug, Clone, Copy)]
pub struct EncodedFeatures {
    pub levels: [Var; 4],
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: Mlp,
}

/// Dense self-attention over the joint token set of `F2..F4` plus a
/// feature-pyramid merge for `F1`.
///
/// Encoder layers are pre-normalised: position and level embeddings enter
/// only the attention queries and keys, so an encoder whose residual
/// branches are zero returns the input projections unchanged.
#[derive(Debug, Clone)]
pub struct PixelDecoder {
    input_proj: Vec<Conv2d>,
    level_embed: ParamId,
    layers: Vec<EncoderLayer>,
    lateral: Conv2d,
    c_d: usize,
}

impl PixelDecoder {
    pub fn new<T: Scalar>(
        cfg: &SegHeadConfig,
        in_channels: [usize; 4],
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Self {
        let c_d = cfg.c_d;
        let input_proj = (1..4)
            .map(|i| Conv2d::new(store, &format!("{prefix}.proj{}", i + 1), in_channels[i], c_d, 1, 1, 0, true, rng))
            .collect();
        let level_embed = store.add(format!("{prefix}.level_embed"), Tensor::randn([3, c_d], 0.02, rng));
        let layers = (0..cfg.encoder_layers)
            .map(|l| {
                let name = format!("{prefix}.layer{l}");
                EncoderLayer {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), c_d),
                    attn: Attention::new(store, &format!("{name}.attn"), c_d, c_d, c_d, cfg.heads, rng),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), c_d),
                    ffn: Mlp::new(store, &format!("{name}.ffn"), &[c_d, 2 * c_d, c_d], rng),
                }
            })
            .collect();
        let lateral = Conv2d::new(store, &format!("{prefix}.lateral"), in_channels[0], c_d, 1, 1, 0, true, rng);
        PixelDecoder { input_proj, level_embed, layers, lateral, c_d }
    }

    /// Number of tokens the encoder attends over for an `h x w` image.
    pub fn token_count(h: usize, w: usize) -> usize {
        (1..4).map(|i| (h >> (i + 2)) * (w >> (i + 2))).sum()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, f: &MultiScaleFeatures) -> Result<EncodedFeatures> {
        let c_d = self.c_d;
        let mut tokens = Vec::with_capacity(3);
        let mut sizes = Vec::with_capacity(3);
        let mut pos_parts = Vec::with_capacity(3);
        for (i, proj) in self.input_proj.iter().enumerate() {
            let x = proj.forward(g, p, f.levels[i + 1])?;
            let s = g.shape(x).to_vec();
            let (h, w) = (s[1], s[2]);
            let flat = g.reshape(x, &[c_d, h * w])?;
            tokens.push(g.transpose(flat)?);
            sizes.push((h, w));
            pos_parts.push(g.constant(sine_position_encoding(h, w, c_d)));
        }
        let mut x = g.concat_rows(&tokens)?;
        let pos = g.concat_rows(&pos_parts)?;
        // Broadcast level embeddings over each level's tokens.
        let mut lvl_rows = Vec::with_capacity(3);
        for (i, &(h, w)) in sizes.iter().enumerate() {
            let row = g.slice_rows(p[self.level_embed], i, 1)?;
            let ones = g.constant(Tensor::ones([h * w, 1]));
            lvl_rows.push(g.matmul(ones, row)?);
        }
        let lvl = g.concat_rows(&lvl_rows)?;
        let pos = g.add(pos, lvl)?;

        for layer in &self.layers {
            let xn = layer.norm1.forward(g, p, x)?;
            let qk = g.add(xn, pos)?;
            let a = layer.attn.forward(g, p, qk, qk, xn, None)?;
            x = g.add(x, a)?;
            let xn = layer.norm2.forward(g, p, x)?;
            let ff = layer.ffn.forward(g, p, xn)?;
            x = g.add(x, ff)?;
        }

        let mut levels = [x; 4];
        let mut start = 0;
        for (i, &(h, w)) in sizes.iter().enumerate() {
            let rows = g.slice_rows(x, start, h * w)?;
            let chw = g.transpose(rows)?;
            levels[i + 1] = g.reshape(chw, &[c_d, h, w])?;
            start += h * w;
        }
        let lat = self.lateral.forward(g, p, f.levels[0])?;
        let s = g.shape(lat).to_vec();
        let up = g.resize_bilinear(levels[1], s[1], s[2])?;
        levels[0] = g.add(lat, up)?;
        Ok(EncodedFeatures { levels })
    }
}

/// Two stride-2 transposed convolutions and a 1x1 projection taking `D1`
/// (stride 4) to full-resolution per-pixel embeddings.
#[derive(Debug, Clone)]
pub struct PixelEmbedding {
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
    proj: Conv2d,
}

impl PixelEmbedding {
    pub fn new<T: Scalar>(cfg: &SegHeadConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut impl Rng) -> Self {
        PixelEmbedding {
            up1: ConvTranspose2d::new(store, &format!("{prefix}.up1"), cfg.c_d, cfg.c_e, 2, rng),
            up2: ConvTranspose2d::new(store, &format!("{prefix}.up2"), cfg.c_e, cfg.c_e, 2, rng),
            proj: Conv2d::new(store, &format!("{prefix}.proj"), cfg.c_e, cfg.c_e, 1, 1, 0, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, d1: Var) -> Result<Var> {
        let x = self.up1.forward(g, p, d1)?;
        let x = g.relu(x);
        let x = self.up2.forward(g, p, x)?;
        self.proj.forward(g, p, x)
    }
}
