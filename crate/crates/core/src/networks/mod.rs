//! The counter with named feature taps, the pixel-wise feature
//! discriminators, the density-map discriminator and the map refiner.

mod counter;
mod discriminators;
mod refiner;

pub use counter::{BackboneBlock, Counter, CounterConfig, DivisibilityPolicy, FeatureTap, TapBundle, TapVars};
pub use discriminators::{
    FeatureDiscConfig, FeatureDiscriminator, MapDiscConfig, MapDiscriminator, ScoreMap, ScoreVector, LEAKY_SLOPE,
};
pub use refiner::{Refiner, RefinerConfig};

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::conv::ConvGeom;
use crate::error::Result;
use crate::params::{he_std, normal_tensor, Bound, ParamSet};
use crate::tensor::Tensor;

/// A convolution whose weight and bias live in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        (cin, cout): (usize, usize),
        geom: ConvGeom,
        std: Option<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        let (kh, kw) = geom.kernel;
        let std = std.unwrap_or_else(|| he_std(cin * kh * kw));
        let w = ps.push(format!("{name}.weight"), normal_tensor(rng, &[cout, cin, kh, kw], std));
        let b = ps.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, geom }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.geom)
    }
}

/// Common surface of the five networks, used by checkpointing.
pub trait Network {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Architecture description stored alongside the weights.
    fn config_json(&self) -> serde_json::Value;
}
