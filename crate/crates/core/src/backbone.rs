//! Residual convolutional feature extractor with outputs at strides 4, 8,
//! 16 and 32.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::layers::{Conv2d, GroupNorm};
use crate::numerics::{Bound, Graph, ParamStore, Scalar, Tensor, Var};

/// Parameter-name prefix of every backbone tensor.
pub const PREFIX: &str = "backbone";

/// Total downsampling of the deepest feature map.
pub const MAX_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    /// Group count of every group normalisation (clamped to the channel count).
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1],
            norm_groups: 8,
        }
    }
}

impl BackboneConfig {
    /// Output stride of stage `i` (0-based).
    pub fn stride(i: usize) -> usize {
        4 << i
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) {
            return Err(invalid!("backbone channels and block counts must be positive"));
        }
        if self.norm_groups == 0 {
            return Err(invalid!("norm_groups must be positive"));
        }
        for &c in &self.stage_channels {
            let g = self.norm_groups.min(c);
            if c % g != 0 {
                return Err(invalid!("{c} channels not divisible into {g} norm groups"));
            }
        }
        Ok(())
    }
}

/// The four backbone outputs, finest first.
#[derive(Debug, Clone, Copy)]
pub struct MultiScaleFeatures {
    pub levels: [Var; 4],
}

impl MultiScaleFeatures {
    pub fn f1(&self) -> Var {
        self.levels[0]
    }
    pub fn f4(&self) -> Var {
        self.levels[3]
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false, rng);
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), c_out, groups);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, rng);
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), c_out, groups);
        let shortcut = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(store, &format!("{name}.down"), c_in, c_out, 1, stride, 0, false, rng),
                GroupNorm::new(store, &format!("{name}.down_norm"), c_out, groups),
            )
        });
        BasicBlock { conv1, norm1, conv2, norm2, shortcut }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, p, x)?;
        let y = self.norm1.forward(g, p, y)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, p, y)?;
        let y = self.norm2.forward(g, p, y)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(g, p, x)?;
                norm.forward(g, p, s)?
            }
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }
}

/// Stem (7x7 stride-2 convolution, normalisation, 3x3 stride-2 max pool)
/// followed by four residual stages.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv2d,
    stem_norm: GroupNorm,
    stages: Vec<Vec<BasicBlock>>,
}

impl Backbone {
    /// Register freshly initialised parameters under `prefix`.
    pub fn new<T: Scalar>(
        config: &BackboneConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_channels;
        let groups = config.norm_groups;
        let stem = Conv2d::new(store, &format!("{prefix}.stem.conv"), 3, ch[0], 7, 2, 3, false, rng);
        let stem_norm = GroupNorm::new(store, &format!("{prefix}.stem.norm"), ch[0], groups);
        let mut stages = Vec::with_capacity(4);
        let mut c_in = ch[0];
        for (s, (&c_out, &blocks)) in ch.iter().zip(&config.blocks_per_stage).enumerate() {
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("{prefix}.stage{}.block{b}", s + 1);
                stage.push(BasicBlock::new(store, &name, c_in, c_out, stride, groups, rng));
                c_in = c_out;
            }
            stages.push(stage);
        }
        Ok(Backbone { config: config.clone(), stem, stem_norm, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Stride-4 stem output.
    pub fn stem<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let x = self.stem.forward(g, p, image)?;
        let x = self.stem_norm.forward(g, p, x)?;
        let x = g.relu(x);
        g.max_pool2d(x, 3, 2, 1)
    }

    /// `image` is `3 x H x W` with both extents divisible by 32.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<MultiScaleFeatures> {
        check_input_shape(g.shape(image))?;
        let mut x = self.stem(g, p, image)?;
        let mut levels = [x; 4];
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(g, p, x)?;
            }
            levels[s] = x;
        }
        Ok(MultiScaleFeatures { levels })
    }
}

pub fn check_input_shape(shape: &[usize]) -> Result<()> {
    match shape {
        [3, h, w] if h % MAX_STRIDE == 0 && w % MAX_STRIDE == 0 => Ok(()),
        [3, h, w] => Err(invalid!(
            "image extents {h}x{w} must be divisible by {MAX_STRIDE}; resize or pad first"
        )),
        _ => Err(invalid!("expected a 3 x H x W image, got {shape:?}")),
    }
}

/// Replace the backbone parameters of `store` with those found in
/// `checkpoint` (same names, same shapes).
pub fn load_backbone_weights<'a, T: Scalar>(
    store: &mut ParamStore<T>,
    checkpoint: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<usize> {
    store.load_prefix(&format!("{PREFIX}."), checkpoint)
}
