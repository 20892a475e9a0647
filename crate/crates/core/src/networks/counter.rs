use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Conv, Network};
use crate::autograd::{Graph, Var};
use crate::conv::ConvGeom;
use crate::data::DensityMap;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneBlock {
    pub channels: usize,
    pub convs: usize,
    /// 2x max-pool after the block.
    pub pool: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivisibilityPolicy {
    /// Reject inputs whose sides are not multiples of the output stride.
    #[default]
    Error,
    /// Zero-pad bottom/right up to the next multiple and record the padding.
    Pad,
}

/// Intermediate feature maps that can feed a feature discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureTap {
    Backbone,
    Dilation,
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterConfig {
    pub in_channels: usize,
    pub blocks: Vec<BackboneBlock>,
    pub dilation_channels: usize,
    pub dilation_rate: usize,
    pub spatial_channels: usize,
    pub spatial_kernel: usize,
    #[serde(default)]
    pub divisibility: DivisibilityPolicy,
}

impl Default for CounterConfig {
    fn default() -> Self {
        let block = |channels| BackboneBlock { channels, convs: 2, pool: true };
        Self {
            in_channels: 3,
            blocks: vec![block(32), block(64), block(128)],
            dilation_channels: 128,
            dilation_rate: 2,
            spatial_channels: 64,
            spatial_kernel: 9,
            divisibility: DivisibilityPolicy::Error,
        }
    }
}

impl CounterConfig {
    /// VGG-16 conv1_1..conv4_3 layout for full-scale runs.
    pub fn vgg16() -> Self {
        let block = |channels, convs, pool| BackboneBlock { channels, convs, pool };
        Self {
            in_channels: 3,
            blocks: vec![block(64, 2, true), block(128, 2, true), block(256, 3, true), block(512, 3, false)],
            dilation_channels: 512,
            dilation_rate: 2,
            spatial_channels: 128,
            spatial_kernel: 9,
            divisibility: DivisibilityPolicy::Error,
        }
    }

    /// Narrow variant for desk-scale experiments.
    pub fn small(width: usize) -> Self {
        let block = |channels| BackboneBlock { channels, convs: 2, pool: true };
        Self {
            in_channels: 3,
            blocks: vec![block(width), block(2 * width), block(2 * width)],
            dilation_channels: 2 * width,
            dilation_rate: 2,
            spatial_channels: 2 * width,
            spatial_kernel: 9,
            divisibility: DivisibilityPolicy::Error,
        }
    }

    /// Input side multiple required by the pooling stages.
    pub fn stride(&self) -> usize {
        1 << self.blocks.iter().filter(|b| b.pool).count()
    }

    pub fn output_scale(&self) -> f64 {
        1.0 / self.stride() as f64
    }

    pub fn tap_channels(&self, tap: FeatureTap) -> usize {
        match tap {
            FeatureTap::Backbone => self.blocks.last().map_or(self.in_channels, |b| b.channels),
            FeatureTap::Dilation => self.dilation_channels,
            FeatureTap::Spatial => self.spatial_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.blocks.is_empty() {
            return Err(Error::Config("counter needs input channels and at least one block".into()));
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.convs == 0) {
            return Err(Error::Config("backbone blocks need channels and convs".into()));
        }
        if self.dilation_channels == 0 || self.spatial_channels == 0 || self.dilation_rate == 0 {
            return Err(Error::Config("dilation/spatial modules need channels".into()));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::Config("spatial kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Graph handles for one counter forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TapVars {
    pub backbone: Var,
    pub f1: Var,
    pub f2: Var,
    pub density: Var,
}

impl TapVars {
    pub fn tap(&self, tap: FeatureTap) -> Var {
        match tap {
            FeatureTap::Backbone => self.backbone,
            FeatureTap::Dilation => self.f1,
            FeatureTap::Spatial => self.f2,
        }
    }
}

/// Plain-tensor result of [`Counter::counter_forward`].
#[derive(Clone, Debug)]
pub struct TapBundle {
    pub backbone: Tensor,
    /// Dilation-module output `(c1, h/8, w/8)`.
    pub f1: Tensor,
    /// Spatial-module output `(c2, h/8, w/8)`.
    pub f2: Tensor,
    /// Raw prediction at the native output scale; may contain negatives.
    pub density: DensityMap,
    /// Zero padding added at the bottom/right to reach a valid size.
    pub padding: (usize, usize),
    pub input_size: (usize, usize),
}

impl TapBundle {
    /// Prediction resized to the padded input resolution with its mass
    /// preserved.
    pub fn density_full(&self) -> Result<DensityMap> {
        let (h, w) = (self.input_size.0 + self.padding.0, self.input_size.1 + self.padding.1);
        crate::losses::semantic_reshape_to(&self.density, h, w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Counter {
    config: CounterConfig,
    params: ParamSet,
    backbone: Vec<(Conv, bool)>,
    dilation: Vec<Conv>,
    spatial: Vec<Conv>,
    head: Conv,
}

impl Counter {
    pub fn new(config: CounterConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut backbone = Vec::new();
        let mut cin = config.in_channels;
        for (bi, block) in config.blocks.iter().enumerate() {
            for ci in 0..block.convs {
                let conv = Conv::new(
                    &mut ps,
                    &format!("backbone.{bi}.{ci}"),
                    (cin, block.channels),
                    ConvGeom::same(3),
                    None,
                    rng,
                );
                cin = block.channels;
                backbone.push((conv, block.pool && ci + 1 == block.convs));
            }
        }
        let geom = ConvGeom::same(3).with_dilation(config.dilation_rate);
        let dilation = vec![
            Conv::new(&mut ps, "dilation.0", (cin, config.dilation_channels), geom, None, rng),
            Conv::new(&mut ps, "dilation.1", (config.dilation_channels, config.dilation_channels), geom, None, rng),
        ];
        let k = config.spatial_kernel;
        let spatial = vec![
            Conv::new(
                &mut ps,
                "spatial.0",
                (config.dilation_channels, config.spatial_channels),
                ConvGeom::rect(1, k),
                None,
                rng,
            ),
            Conv::new(
                &mut ps,
                "spatial.1",
                (config.spatial_channels, config.spatial_channels),
                ConvGeom::rect(k, 1),
                None,
                rng,
            ),
        ];
        let head = Conv::new(&mut ps, "head", (config.spatial_channels, 1), ConvGeom::same(1), Some(0.01), rng);
        Ok(Self { config, params: ps, backbone, dilation, spatial, head })
    }

    pub fn config(&self) -> &CounterConfig {
        &self.config
    }

    /// Check an input size against the output stride.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let s = self.config.stride();
        if !h.is_multiple_of(s) || !w.is_multiple_of(s) || h == 0 || w == 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by {s}")));
        }
        Ok(())
    }

    /// Forward an `(n, c, h, w)` batch on `g` using bound parameters `p`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<TapVars> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!("counter expects {} channels, got {c}", self.config.in_channels)));
        }
        self.check_size(h, w)?;
        let mut x = x;
        for (conv, pool) in &self.backbone {
            x = conv.forward(g, p, x)?;
            x = g.relu(x);
            if *pool {
                x = g.max_pool2(x)?;
            }
        }
        let backbone = x;
        for conv in &self.dilation {
            x = conv.forward(g, p, x)?;
            x = g.relu(x);
        }
        let f1 = x;
        for conv in &self.spatial {
            x = conv.forward(g, p, x)?;
            x = g.relu(x);
        }
        let f2 = x;
        let density = self.head.forward(g, p, x)?;
        Ok(TapVars { backbone, f1, f2, density })
    }

    /// Evaluate one `(c, h, w)` image with frozen weights.
    pub fn counter_forward(&self, image: &Tensor) -> Result<TapBundle> {
        let (c, h, w) = match image.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::Shape(format!("expected (c, h, w) image, got {s:?}"))),
        };
        let s = self.config.stride();
        let padding = match self.config.divisibility {
            DivisibilityPolicy::Error => {
                self.check_size(h, w)?;
                (0, 0)
            }
            DivisibilityPolicy::Pad => ((s - h % s) % s, (s - w % s) % s),
        };
        let input = if padding == (0, 0) {
            image.clone().reshape(&[1, c, h, w])?
        } else {
            let (ph, pw) = (h + padding.0, w + padding.1);
            let mut data = vec![0.0; c * ph * pw];
            for ch in 0..c {
                for y in 0..h {
                    let src = &image.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                    data[(ch * ph + y) * pw..(ch * ph + y) * pw + w].copy_from_slice(src);
                }
            }
            Tensor::new(vec![1, c, ph, pw], data)?
        };
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(input);
        let taps = self.forward(&mut g, &p, x)?;
        Ok(TapBundle {
            backbone: g.value(taps.backbone).index(0),
            f1: g.value(taps.f1).index(0),
            f2: g.value(taps.f2).index(0),
            density: DensityMap::from_tensor(g.value(taps.density).clone(), self.config.output_scale())?,
            padding,
            input_size: (h, w),
        })
    }

    /// Native-scale density prediction for an `(n, c, h, w)` batch.
    pub fn predict_batch(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let taps = self.forward(&mut g, &p, x)?;
        Ok(g.value(taps.density).clone())
    }
}

impl Network for Counter {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serialises")
    }
}
