//! Model hyperparameters, named presets and static shape inference.

use pyrad_tensor::kernels::{conv_out_extent, conv_transpose_out_extent};
use pyrad_tensor::Activation;

use crate::error::{Error, Result};

/// Channel width of the encoder's hidden convolution.
pub const ENCODER_HIDDEN: usize = 16;
/// Width of the shared upsampler's hidden layer.
pub const UPSAMPLE_HIDDEN: usize = 128;
/// Scale list used when the encoder count is varied; the first `k` entries
/// are taken.
pub const EXTENDED_SCALES: [usize; 6] = [1, 2, 3, 6, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// One residual stage of basic blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
    pub blocks: usize,
}

/// Stem conv (+BN+ReLU), optional max pool, then residual stages named
/// `layer1`, `layer2`, …
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pad: usize,
    pub pool: Option<PoolSpec>,
    pub stages: Vec<StageSpec>,
}

impl BackboneConfig {
    pub fn resnet18() -> Self {
        Self {
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pad: 3,
            pool: Some(PoolSpec { kernel: 3, stride: 2, pad: 1 }),
            stages: vec![
                StageSpec { channels: 64, stride: 1, blocks: 2 },
                StageSpec { channels: 128, stride: 2, blocks: 2 },
                StageSpec { channels: 256, stride: 2, blocks: 2 },
                StageSpec { channels: 512, stride: 2, blocks: 2 },
            ],
        }
    }

    /// Cut points in forward order.
    pub fn cut_names(&self) -> Vec<String> {
        let mut names = vec!["stem".to_string()];
        if self.pool.is_some() {
            names.push("pool".into());
        }
        names.extend((1..=self.stages.len()).map(|i| format!("layer{i}")));
        names
    }

    /// Number of residual stages kept for a cut, or `None` for an unknown
    /// cut name.
    pub fn stages_for_cut(&self, cut: &str) -> Option<usize> {
        match cut {
            "stem" => Some(0),
            "pool" if self.pool.is_some() => Some(0),
            _ => {
                let i: usize = cut.strip_prefix("layer")?.parse().ok()?;
                (1..=self.stages.len()).contains(&i).then_some(i)
            }
        }
    }

    /// `(stage name, [C, H, W])` after each kept stage.
    pub fn trace(&self, cut: &str, h: usize, w: usize) -> Result<Vec<(String, [usize; 3])>> {
        let kept = self
            .stages_for_cut(cut)
            .ok_or_else(|| Error::Config(format!("unknown backbone cut `{cut}` (expected one of {:?})", self.cut_names())))?;
        let ext = |what: &str, v: Option<usize>| v.ok_or_else(|| Error::Config(format!("backbone {what}: input too small")));
        let (mut h, mut w) = (
            ext("stem", conv_out_extent(h, self.stem_kernel, self.stem_stride, self.stem_pad))?,
            ext("stem", conv_out_extent(w, self.stem_kernel, self.stem_stride, self.stem_pad))?,
        );
        let mut c = self.stem_channels;
        let mut out = vec![("stem".to_string(), [c, h, w])];
        if cut == "stem" {
            return Ok(out);
        }
        if let Some(p) = self.pool {
            h = ext("pool", conv_out_extent(h, p.kernel, p.stride, p.pad))?;
            w = ext("pool", conv_out_extent(w, p.kernel, p.stride, p.pad))?;
            out.push(("pool".into(), [c, h, w]));
        }
        for (i, s) in self.stages.iter().take(kept).enumerate() {
            for b in 0..s.blocks {
                let stride = if b == 0 { s.stride } else { 1 };
                h = ext("stage", conv_out_extent(h, 3, stride, 1))?;
                w = ext("stage", conv_out_extent(w, 3, stride, 1))?;
            }
            c = s.channels;
            out.push((format!("layer{}", i + 1), [c, h, w]));
        }
        Ok(out)
    }
}

/// One transposed-convolution layer of the decoder. Every layer except the
/// last is followed by batch norm before its activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
}

const fn dl(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, activation: Activation) -> DecoderLayer {
    DecoderLayer { in_channels, out_channels, kernel, stride, pad, activation }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Input height and width; images always carry 3 channels.
    pub input_size: (usize, usize),
    pub backbone: BackboneConfig,
    pub backbone_cut: String,
    /// D, channel count of the backbone output.
    pub backbone_out_channels: usize,
    pub pyramid_scales: Vec<usize>,
    pub latent_dim: usize,
    /// Half the backbone output height.
    pub mf: usize,
    pub decoder_layers: Vec<DecoderLayer>,
    pub final_resize_to_input: bool,
}

pub const PRESETS: [&str; 4] = ["mvtec120", "mnist28", "mini16", "mini32"];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mvtec120" => Ok(Self::mvtec120()),
            "mnist28" => Ok(Self::mnist28()),
            _ => match name.strip_prefix("mini").and_then(|s| s.parse().ok()) {
                Some(size) => Self::miniature(size),
                None => Err(Error::Config(format!("unknown model preset `{name}` (expected one of {PRESETS:?})"))),
            },
        }
    }

    pub fn mvtec120() -> Self {
        use Activation::*;
        Self {
            input_size: (120, 120),
            backbone: BackboneConfig::resnet18(),
            backbone_cut: "layer4".into(),
            backbone_out_channels: 512,
            pyramid_scales: vec![1, 2, 3, 6],
            latent_dim: 8,
            mf: 2,
            decoder_layers: vec![
                dl(1024, 16, 3, 2, 1, Relu),
                dl(16, 32, 3, 2, 1, Relu),
                dl(32, 32, 4, 2, 0, Relu),
                dl(32, 3, 4, 2, 1, UnitRange),
            ],
            final_resize_to_input: true,
        }
    }

    /// 28×28 digits: stem + pool only (64 channels). The pool is 2×2 with
    /// padding 1 so the 8×8 feature map gives mf = 4 and the five-layer
    /// decoder lands exactly on 28.
    pub fn mnist28() -> Self {
        use Activation::*;
        let mut backbone = BackboneConfig::resnet18();
        backbone.pool = Some(PoolSpec { kernel: 2, stride: 2, pad: 1 });
        Self {
            input_size: (28, 28),
            backbone,
            backbone_cut: "pool".into(),
            backbone_out_channels: 64,
            pyramid_scales: vec![1, 2, 3, 6],
            latent_dim: 8,
            mf: 4,
            decoder_layers: vec![
                dl(128, 16, 5, 1, 1, Relu),
                dl(16, 32, 5, 1, 0, Relu),
                dl(32, 32, 6, 1, 0, Relu),
                dl(32, 32, 6, 1, 0, Relu),
                dl(32, 3, 5, 1, 0, UnitRange),
            ],
            final_resize_to_input: true,
        }
    }

    /// Desk-scale network for square inputs of side `size` (a power of two,
    /// 16 or more): D = 32, a 2×2 backbone map (mf = 1) and a stride-2
    /// decoder that doubles back to `size`.
    pub fn miniature(size: usize) -> Result<Self> {
        use Activation::*;
        if size < 16 || !size.is_power_of_two() {
            return Err(Error::Config(format!("miniature preset needs a power-of-two size ≥ 16, got {size}")));
        }
        let n_stages = (size / 8).trailing_zeros() as usize;
        let stages = (0..n_stages)
            .map(|i| StageSpec {
                channels: if i + 1 == n_stages { 32 } else { 16 },
                stride: 2,
                blocks: 1,
            })
            .collect();
        let backbone = BackboneConfig {
            stem_channels: 16,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pad: 1,
            pool: Some(PoolSpec { kernel: 3, stride: 2, pad: 1 }),
            stages,
        };
        let n_dec = (size / 2).trailing_zeros() as usize;
        let widths = |i: usize| if i < 2 { 16 } else { 8 };
        let decoder_layers = (0..n_dec)
            .map(|i| {
                let cin = if i == 0 { 64 } else { widths(i - 1) };
                if i + 1 == n_dec {
                    dl(cin, 3, 4, 2, 1, UnitRange)
                } else {
                    dl(cin, widths(i), 4, 2, 1, Relu)
                }
            })
            .collect();
        Ok(Self {
            input_size: (size, size),
            backbone,
            backbone_cut: format!("layer{n_stages}"),
            backbone_out_channels: 32,
            pyramid_scales: vec![1, 2, 3, 6],
            latent_dim: 8,
            mf: 1,
            decoder_layers,
            final_resize_to_input: true,
        })
    }

    /// Same model with `k` encoders, using the first `k` of
    /// [`EXTENDED_SCALES`].
    pub fn with_encoders(&self, k: usize) -> Result<Self> {
        if k == 0 || k > EXTENDED_SCALES.len() {
            return Err(Error::Config(format!("encoder count must be in 1..=6, got {k}")));
        }
        let mut c = self.clone();
        c.pyramid_scales = EXTENDED_SCALES[..k].to_vec();
        Ok(c)
    }

    pub fn branch_channels(&self) -> Vec<usize> {
        self.pyramid_scales.iter().map(|s| self.backbone_out_channels / s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.shape_trace().map(|_| ())
    }

    /// Static shape inference for one sample. Fails with a configuration
    /// error on any inconsistency, so a successful trace means the config
    /// is valid.
    pub fn shape_trace(&self) -> Result<ShapeTrace> {
        let cfg = |m: String| Err(Error::Config(m));
        let (h, w) = self.input_size;
        if h == 0 || w == 0 {
            return cfg("input size must be positive".into());
        }
        let d = self.backbone_out_channels;
        let backbone = self.backbone.trace(&self.backbone_cut, h, w)?;
        let [bc, bh, bw] = backbone.last().expect("trace has a stem").1;
        if bc != d {
            return cfg(format!("backbone cut `{}` yields {bc} channels but D = {d}", self.backbone_cut));
        }
        if bh != bw || bh % 2 != 0 {
            return cfg(format!("backbone output {bh}×{bw} must be square with even extent"));
        }
        if self.mf != bh / 2 {
            return cfg(format!("mf = {} but backbone output height {bh} requires mf = {}", self.mf, bh / 2));
        }
        if self.pyramid_scales.is_empty() {
            return cfg("pyramid_scales must not be empty".into());
        }
        if let Some(&s) = self.pyramid_scales.iter().find(|&&s| s == 0 || s > d) {
            return cfg(format!("pyramid scale {s} outside 1..={d}"));
        }
        if self.latent_dim == 0 {
            return cfg("latent_dim must be positive".into());
        }
        let Some(first) = self.decoder_layers.first() else {
            return cfg("decoder_layers must not be empty".into());
        };
        if first.in_channels != 2 * d {
            return cfg(format!("decoder first in-channels {} must equal 2·D = {}", first.in_channels, 2 * d));
        }
        let mut dec = Vec::new();
        let (mut c, mut dh, mut dw) = (2 * d, bh, bw);
        for (i, l) in self.decoder_layers.iter().enumerate() {
            if l.in_channels != c {
                return cfg(format!("decoder layer {i} expects {} channels, previous layer gives {c}", l.in_channels));
            }
            let ext = |e| conv_transpose_out_extent(e, l.kernel, l.stride, l.pad);
            let (Some(nh), Some(nw)) = (ext(dh), ext(dw)) else {
                return cfg(format!("decoder layer {i} has non-positive output extent"));
            };
            (c, dh, dw) = (l.out_channels, nh, nw);
            dec.push([c, dh, dw]);
        }
        if c != 3 {
            return cfg(format!("decoder must end with 3 channels, got {c}"));
        }
        if !self.final_resize_to_input && (dh, dw) != (h, w) {
            return cfg(format!("decoder output {dh}×{dw} differs from input {h}×{w} and final resize is off"));
        }
        Ok(ShapeTrace {
            input: [3, h, w],
            backbone,
            features: [d, bh, bw],
            pyramid_channels: self.branch_channels(),
            latents: vec![self.latent_dim; self.pyramid_scales.len()],
            upsampled: [d, self.mf, self.mf],
            assembled: [2 * d, 2 * self.mf, 2 * self.mf],
            decoder: dec,
            output: [3, h, w],
        })
    }
}

/// Per-sample shapes (C, H, W) through the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: [usize; 3],
    pub backbone: Vec<(String, [usize; 3])>,
    pub features: [usize; 3],
    pub pyramid_channels: Vec<usize>,
    pub latents: Vec<usize>,
    pub upsampled: [usize; 3],
    pub assembled: [usize; 3],
    pub decoder: Vec<[usize; 3]>,
    pub output: [usize; 3],
}

impl ShapeTrace {
    /// Spatial extent entering the decoder followed by each layer's output
    /// height.
    pub fn decoder_chain(&self) -> Vec<usize> {
        std::iter::once(self.assembled[1]).chain(self.decoder.iter().map(|s| s[1])).collect()
    }
}
