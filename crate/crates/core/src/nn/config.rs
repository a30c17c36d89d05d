use serde::{Deserialize, Serialize};

use super::NetworkError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScalePreset {
    Toy,
    Small,
    Paper,
}

impl std::str::FromStr for ScalePreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "toy" => Ok(Self::Toy),
            "small" => Ok(Self::Small),
            "paper" => Ok(Self::Paper),
            other => Err(format!("unknown preset {other:?} (toy, small, paper)")),
        }
    }
}

/// A 1x1 reduction followed by wider convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub reduce: usize,
    pub out: usize,
}

/// One inception block: four parallel branches concatenated on channels.
///
/// * `branch_1x1`: a single 1x1 convolution.
/// * `factorized`: 1x1 reduce, then 1xk and kx1 (k = `factorized_kernel`).
/// * `double_3x3`: 1x1 reduce, then two 3x3 convolutions.
/// * `pool_proj`: 3x3 pooling (average when `stride` is 1, max otherwise)
///   followed by a 1x1 projection.
///
/// With `stride` 2 the last convolution of every branch subsamples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub stride: usize,
    pub branch_1x1: usize,
    pub factorized: Chain,
    pub factorized_kernel: usize,
    pub double_3x3: Chain,
    pub pool_proj: usize,
}

impl BlockConfig {
    pub fn uniform(stride: usize, width: usize) -> Self {
        Self {
            stride,
            branch_1x1: width,
            factorized: Chain { reduce: width, out: width },
            factorized_kernel: 3,
            double_3x3: Chain { reduce: width, out: width },
            pool_proj: width,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.branch_1x1 + self.factorized.out + self.double_3x3.out + self.pool_proj
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (height, width) after preprocessing.
    pub input_size: (usize, usize),
    /// Width of the second stem convolution; the first has half as many.
    pub stem_channels: usize,
    pub inception_blocks: Vec<BlockConfig>,
    /// When it differs from the last block's width, a 1x1 projection is
    /// inserted before global average pooling.
    pub embedding_dim: usize,
    pub scale_preset: ScalePreset,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_epsilon")]
    pub bn_epsilon: f64,
}

fn default_momentum() -> f64 {
    0.99
}

fn default_epsilon() -> f64 {
    1e-3
}

impl ModelConfig {
    pub fn preset(preset: ScalePreset) -> Self {
        match preset {
            ScalePreset::Toy => Self::toy(),
            ScalePreset::Small => Self::small(),
            ScalePreset::Paper => Self::paper(),
        }
    }

    /// 128x128 input, three blocks, at most 32 channels per convolution.
    pub fn toy() -> Self {
        Self {
            input_size: (128, 128),
            stem_channels: 24,
            inception_blocks: vec![BlockConfig::uniform(1, 8), BlockConfig::uniform(2, 16), BlockConfig::uniform(1, 16)],
            embedding_dim: 64,
            scale_preset: ScalePreset::Toy,
            bn_momentum: default_momentum(),
            bn_epsilon: default_epsilon(),
        }
    }

    pub fn small() -> Self {
        Self {
            input_size: (160, 160),
            stem_channels: 32,
            inception_blocks: vec![
                BlockConfig::uniform(1, 16),
                BlockConfig::uniform(1, 16),
                BlockConfig::uniform(2, 32),
                BlockConfig::uniform(1, 32),
                BlockConfig { factorized_kernel: 5, ..BlockConfig::uniform(1, 32) },
                BlockConfig::uniform(2, 48),
                BlockConfig::uniform(1, 64),
            ],
            embedding_dim: 256,
            scale_preset: ScalePreset::Small,
            bn_momentum: default_momentum(),
            bn_epsilon: default_epsilon(),
        }
    }

    /// Inception-v3 proportions at 299x299: three 35x35-style blocks, a
    /// reduction, four 7x7-factorized blocks, a reduction, two wide blocks,
    /// a final reduction and a 2048-wide embedding.
    pub fn paper() -> Self {
        let b = |stride, one, fr, fo, k, dr, d_o, pool| BlockConfig {
            stride,
            branch_1x1: one,
            factorized: Chain { reduce: fr, out: fo },
            factorized_kernel: k,
            double_3x3: Chain { reduce: dr, out: d_o },
            pool_proj: pool,
        };
        Self {
            input_size: (299, 299),
            stem_channels: 192,
            inception_blocks: vec![
                b(1, 64, 48, 64, 5, 64, 96, 32),
                b(1, 64, 48, 64, 5, 64, 96, 64),
                b(1, 64, 48, 64, 5, 64, 96, 64),
                b(2, 96, 64, 96, 3, 64, 96, 96),
                b(1, 192, 128, 192, 7, 128, 192, 192),
                b(1, 192, 160, 192, 7, 160, 192, 192),
                b(1, 192, 160, 192, 7, 160, 192, 192),
                b(1, 192, 192, 192, 7, 192, 192, 192),
                b(2, 320, 192, 192, 7, 192, 192, 192),
                b(1, 320, 384, 768, 3, 448, 768, 192),
                b(1, 320, 384, 768, 3, 448, 768, 192),
                b(2, 320, 384, 768, 3, 448, 768, 192),
            ],
            embedding_dim: 2048,
            scale_preset: ScalePreset::Paper,
            bn_momentum: default_momentum(),
            bn_epsilon: default_epsilon(),
        }
    }

    pub fn stem_widths(&self) -> [usize; 2] {
        [self.stem_channels.div_ceil(2), self.stem_channels]
    }

    /// Spatial size of the final feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        let half = |v: usize| (v - 1) / 2 + 1;
        let (mut h, mut w) = (half(half(self.input_size.0)), half(half(self.input_size.1)));
        for b in &self.inception_blocks {
            if b.stride == 2 {
                h = half(h);
                w = half(w);
            }
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::Config(m));
        let (h, w) = self.input_size;
        if h < 32 || w < 32 {
            return bad(format!("input_size {h}x{w} is below 32x32"));
        }
        if self.stem_channels == 0 || self.embedding_dim == 0 {
            return bad("stem_channels and embedding_dim must be at least 1".into());
        }
        if self.inception_blocks.is_empty() {
            return bad("at least one inception block is required".into());
        }
        for (i, b) in self.inception_blocks.iter().enumerate() {
            let widths = [
                b.branch_1x1,
                b.factorized.reduce,
                b.factorized.out,
                b.double_3x3.reduce,
                b.double_3x3.out,
                b.pool_proj,
            ];
            if widths.contains(&0) {
                return bad(format!("block {i}: channel widths must be at least 1"));
            }
            if b.stride != 1 && b.stride != 2 {
                return bad(format!("block {i}: stride must be 1 or 2"));
            }
            if b.factorized_kernel % 2 == 0 {
                return bad(format!("block {i}: factorized_kernel must be odd"));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 {
            return bad("bn_momentum must lie in [0, 1) and bn_epsilon be positive".into());
        }
        Ok(())
    }
}
