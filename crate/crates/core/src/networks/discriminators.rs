use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Conv, Network};
use crate::autograd::{Graph, Var};
use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::params::{he_std, normal_tensor, Bound, ParamSet};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Per-pixel two-channel domain logits; channel 0 = source, 1 = target.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    /// `(n, 2, h, w)`.
    pub logits: Tensor,
}

/// Whole-map two-component domain logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    /// `(n, 2)`.
    pub logits: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDiscConfig {
    /// Output channels of the four 3x3 convolutions; the last must be 2.
    pub widths: Vec<usize>,
}

impl Default for FeatureDiscConfig {
    fn default() -> Self {
        Self { widths: vec![64, 64, 64, 2] }
    }
}

/// Fully convolutional pixel-wise domain classifier: four stride-1 padded
/// 3x3 convolutions with leaky ReLU between them and a linear last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDiscriminator {
    in_channels: usize,
    config: FeatureDiscConfig,
    params: ParamSet,
    convs: Vec<Conv>,
}

impl FeatureDiscriminator {
    pub fn new(in_channels: usize, config: FeatureDiscConfig, rng: &mut impl Rng) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::Config("feature discriminator needs input channels".into()));
        }
        if config.widths.len() != 4 || config.widths.last() != Some(&2) {
            return Err(Error::Config(format!(
                "feature discriminator needs four layers ending in 2 channels, got {:?}",
                config.widths
            )));
        }
        let mut ps = ParamSet::new();
        let mut cin = in_channels;
        let convs = config
            .widths
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let c = Conv::new(&mut ps, &format!("conv.{i}"), (cin, cout), ConvGeom::same(3), None, rng);
                cin = cout;
                c
            })
            .collect();
        Ok(Self { in_channels, config, params: ps, convs })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(f).dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!("discriminator built for {} channels got {c}", self.in_channels)));
        }
        let mut x = f;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(g, p, x)?;
            if i + 1 < self.convs.len() {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        Ok(x)
    }

    /// Score a `(c, h, w)` or `(n, c, h, w)` feature map with frozen weights.
    pub fn feature_disc_forward(&self, f: &Tensor) -> Result<ScoreMap> {
        let f = match f.shape() {
            [c, h, w] => f.clone().reshape(&[1, *c, *h, *w])?,
            _ => f.clone(),
        };
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(f);
        let y = self.forward(&mut g, &p, x)?;
        Ok(ScoreMap { logits: g.value(y).clone() })
    }
}

impl Network for FeatureDiscriminator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "in_channels": self.in_channels, "widths": self.config.widths })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapDiscConfig {
    /// Output channels of the 4x4 stride-2 convolutions.
    pub widths: Vec<usize>,
}

impl Default for MapDiscConfig {
    fn default() -> Self {
        Self { widths: vec![32, 64, 64] }
    }
}

/// Whole-map domain classifier: strided 4x4 convolutions with leaky ReLU,
/// global average pooling, then a fully-connected layer to two logits.
#[derive(Clone, Debug, PartialEq)]
pub struct MapDiscriminator {
    config: MapDiscConfig,
    params: ParamSet,
    convs: Vec<Conv>,
    fc_w: usize,
    fc_b: usize,
}

impl MapDiscriminator {
    pub fn new(config: MapDiscConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::Config("map discriminator needs non-empty widths".into()));
        }
        let geom = ConvGeom { kernel: (4, 4), stride: (2, 2), padding: (1, 1), dilation: (1, 1) };
        let mut ps = ParamSet::new();
        let mut cin = 1;
        let convs = config
            .widths
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let c = Conv::new(&mut ps, &format!("conv.{i}"), (cin, cout), geom, None, rng);
                cin = cout;
                c
            })
            .collect();
        let fc_w = ps.push("fc.weight", normal_tensor(rng, &[2, cin], he_std(cin) / 2.0));
        let fc_b = ps.push("fc.bias", Tensor::zeros(&[2]));
        Ok(Self { config, params: ps, convs, fc_w, fc_b })
    }

    /// Smallest accepted map side.
    pub fn min_size(&self) -> usize {
        1 << self.config.widths.len()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, density: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(density).dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("map discriminator takes 1 channel, got {c}")));
        }
        let min = self.min_size();
        if h < min || w < min {
            return Err(Error::Shape(format!("map discriminator needs at least {min}x{min} maps, got {h}x{w}")));
        }
        let mut x = density;
        for conv in &self.convs {
            x = conv.forward(g, p, x)?;
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
        let pooled = g.global_avg_pool(x)?;
        g.linear(pooled, p.var(self.fc_w), p.var(self.fc_b))
    }

    /// Score a `(h, w)`, `(1, h, w)` or `(n, 1, h, w)` map with frozen weights.
    pub fn map_disc_forward(&self, density: &Tensor) -> Result<ScoreVector> {
        let t = match density.shape() {
            [h, w] => density.clone().reshape(&[1, 1, *h, *w])?,
            [c, h, w] => density.clone().reshape(&[1, *c, *h, *w])?,
            _ => density.clone(),
        };
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(t);
        let y = self.forward(&mut g, &p, x)?;
        let logits = g.value(y).clone();
        if !logits.all_finite() {
            return Err(Error::InvalidArgument("map discriminator produced non-finite logits".into()));
        }
        Ok(ScoreVector { logits })
    }
}

impl Network for MapDiscriminator {
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
