use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConvSpec;

/// Number of ×2 resolution changes in the V-Net and the number of SFT blocks.
pub const LEVELS: usize = 4;
/// Conv-ReLU layers per prior/posterior encoder block.
pub const ENCODER_CONVS: usize = 4;

fn default_latent() -> usize {
    64
}

fn default_width() -> usize {
    8
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Cube extent `D` of the network input.
    pub input_size: usize,
    pub num_classes: usize,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_width")]
    pub base_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            num_classes: 4,
            latent_dim: default_latent(),
            base_width: default_width(),
        }
    }
}

/// One convolution layer of the model and how its parameters start out.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDef {
    pub name: String,
    pub spec: ConvSpec,
    pub spectral: bool,
    pub bias_init: f64,
}

impl LayerDef {
    fn plain(name: String, spec: ConvSpec) -> Self {
        Self {
            name,
            spec,
            spectral: false,
            bias_init: 0.0,
        }
    }
}

/// Which of the two input-decomposition encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoder {
    Prior,
    Posterior,
}

impl Encoder {
    pub fn prefix(self) -> &'static str {
        match self {
            Encoder::Prior => "prior_encoder",
            Encoder::Posterior => "posterior_encoder",
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let f = 1 << LEVELS;
        if self.input_size == 0 || !self.input_size.is_multiple_of(f) {
            return Err(Error::config(
                "input_size",
                format!("{} is not a positive multiple of {f}", self.input_size),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.num_classes > 256 {
            return Err(Error::config("num_classes", "labels are stored as u8"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be at least 1"));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width", "must be at least 1"));
        }
        Ok(())
    }

    /// V-Net encoder width at `level` (0 = full resolution, 4 = bottleneck).
    pub fn vnet_width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Channels of decoder block `i` (1-based, 1 = coarsest).
    pub fn decoder_width(&self, i: usize) -> usize {
        self.vnet_width(LEVELS - i)
    }

    /// Spatial extent of decoder block `i`.
    pub fn decoder_extent(&self, i: usize) -> usize {
        self.input_size >> (LEVELS - i)
    }

    /// Shape of decoder block `i` output (and of `α_i`, `β_i`).
    pub fn decoder_shape(&self, batch: usize, i: usize) -> [usize; 5] {
        let e = self.decoder_extent(i);
        [batch, self.decoder_width(i), e, e, e]
    }

    /// Channels of encoder block `b` of the prior/posterior encoders.
    pub fn encoder_width(&self, block: usize) -> usize {
        (self.base_width / 2).max(1) << block
    }

    /// Channel width of the SFT cascade at scale `i` (0 = tiled latent).
    pub fn sft_width(&self, i: usize) -> usize {
        if i == 0 {
            self.latent_dim
        } else {
            self.decoder_width(i)
        }
    }

    /// Every convolution in the model, in a fixed order.
    pub fn layers(&self) -> Vec<LayerDef> {
        let mut out = Vec::new();
        for enc in [Encoder::Prior, Encoder::Posterior] {
            let p = enc.prefix();
            let mut cin = match enc {
                Encoder::Prior => 1,
                Encoder::Posterior => 1 + self.num_classes,
            };
            for b in 0..LEVELS {
                let w = self.encoder_width(b);
                for j in 0..ENCODER_CONVS {
                    out.push(LayerDef::plain(
                        format!("{p}.block{b}.conv{j}"),
                        ConvSpec::conv(cin, w, 3, 1, 1),
                    ));
                    cin = w;
                }
            }
            out.push(LayerDef::plain(
                format!("{p}.head"),
                ConvSpec::conv(cin, 2 * self.latent_dim, 1, 1, 0),
            ));
        }

        let w0 = self.vnet_width(0);
        out.push(LayerDef::plain(
            "vnet.input".into(),
            ConvSpec::conv(1, w0, 3, 1, 1),
        ));
        for l in 0..LEVELS {
            let w = self.vnet_width(l);
            out.push(LayerDef::plain(
                format!("vnet.enc{l}.conv0"),
                ConvSpec::conv(w, w, 3, 1, 1),
            ));
            out.push(LayerDef::plain(
                format!("vnet.enc{l}.conv1"),
                ConvSpec::conv(w, w, 3, 1, 1),
            ));
            out.push(LayerDef::plain(
                format!("vnet.enc{l}.down"),
                ConvSpec::conv(w, 2 * w, 2, 2, 0),
            ));
        }
        let wb = self.vnet_width(LEVELS);
        out.push(LayerDef::plain(
            "vnet.bottleneck.conv0".into(),
            ConvSpec::conv(wb, wb, 3, 1, 1),
        ));
        out.push(LayerDef::plain(
            "vnet.bottleneck.conv1".into(),
            ConvSpec::conv(wb, wb, 3, 1, 1),
        ));
        for i in 1..=LEVELS {
            let w = self.decoder_width(i);
            let prev = self.vnet_width(LEVELS - i + 1);
            out.push(LayerDef::plain(
                format!("vnet.dec{i}.up"),
                ConvSpec::transposed(prev, w, 4, 2, 1),
            ));
            out.push(LayerDef::plain(
                format!("vnet.dec{i}.conv0"),
                ConvSpec::conv(2 * w, w, 3, 1, 1),
            ));
            out.push(LayerDef::plain(
                format!("vnet.dec{i}.conv1"),
                ConvSpec::conv(w, w, 3, 1, 1),
            ));
        }
        out.push(LayerDef::plain(
            "vnet.head".into(),
            ConvSpec::conv(w0, self.num_classes, 1, 1, 0),
        ));

        for i in 1..=LEVELS {
            let (cin, c) = (self.sft_width(i - 1), self.sft_width(i));
            for branch in ["value", "gate"] {
                out.push(LayerDef::plain(
                    format!("sft{i}.g.up.{branch}"),
                    ConvSpec::transposed(cin, c, 4, 2, 1),
                ));
            }
            for branch in ["value", "gate"] {
                out.push(LayerDef::plain(
                    format!("sft{i}.g.refine.{branch}"),
                    ConvSpec::transposed(c, c, 3, 1, 1),
                ));
            }
            for (head, last_bias) in [("f", 1.0), ("h", 0.0)] {
                for j in 0..2 {
                    out.push(LayerDef {
                        name: format!("sft{i}.{head}.conv{j}"),
                        spec: ConvSpec::conv(c, c, 1, 1, 0),
                        spectral: true,
                        bias_init: if j == 1 { last_bias } else { 0.0 },
                    });
                }
            }
        }
        out
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| {
                let w: usize = l.spec.weight_shape().iter().product();
                w + if l.spec.bias { l.spec.out_channels } else { 0 }
            })
            .sum()
    }
}
