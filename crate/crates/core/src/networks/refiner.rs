use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Conv, Network};
use crate::autograd::{Graph, Var};
use crate::conv::ConvGeom;
use crate::data::DensityMap;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// Channels of the three convolutions; the transposed convolution
    /// outputs `widths[1]` channels.
    pub widths: [usize; 3],
    /// Kernel sizes: conv, conv, strided conv, transposed conv, regression.
    pub kernels: [usize; 5],
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 32], kernels: [13, 9, 5, 9, 13] }
    }
}

/// Residual map refiner: coarse map in, coarse map plus a regressed
/// residual out, at the same resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Refiner {
    config: RefinerConfig,
    params: ParamSet,
    convs: Vec<Conv>,
    deconv_w: usize,
    deconv_b: usize,
    deconv_geom: ConvGeom,
    prelu: Vec<usize>,
    regression: Conv,
}

/// Smallest accepted map side.
pub const MIN_REFINER_SIZE: usize = 16;

impl Refiner {
    pub fn new(config: RefinerConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.widths.contains(&0) || config.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("invalid refiner config {config:?}")));
        }
        let [w0, w1, w2] = config.widths;
        let [k0, k1, k2, k3, k4] = config.kernels;
        let mut ps = ParamSet::new();
        let convs = vec![
            Conv::new(&mut ps, "conv.0", (1, w0), ConvGeom::same(k0), None, rng),
            Conv::new(&mut ps, "conv.1", (w0, w1), ConvGeom::same(k1), None, rng),
            Conv::new(&mut ps, "conv.2", (w1, w2), ConvGeom::same(k2).with_stride(2), None, rng),
        ];
        let deconv_geom = ConvGeom::same(k3).with_stride(2);
        let std = crate::params::he_std(w2 * k3 * k3 / 4);
        let deconv_w = ps.push("deconv.weight", crate::params::normal_tensor(rng, &[w2, w1, k3, k3], std));
        let deconv_b = ps.push("deconv.bias", Tensor::zeros(&[w1]));
        let prelu = [w0, w1, w2, w1]
            .iter()
            .enumerate()
            .map(|(i, &c)| ps.push(format!("prelu.{i}"), Tensor::full(&[c], 0.25)))
            .collect();
        let regression = Conv::new(&mut ps, "regression", (w1, 1), ConvGeom::same(k4), Some(1e-3), rng);
        Ok(Self { config, params: ps, convs, deconv_w, deconv_b, deconv_geom, prelu, regression })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    /// Zero the regression layer, turning the refiner into the identity.
    pub fn zero_regression(&mut self) {
        for slot in [self.regression.w, self.regression.b] {
            self.params.tensors_mut()[slot].data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, coarse: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(coarse).dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("refiner takes 1-channel maps, got {c}")));
        }
        if h < MIN_REFINER_SIZE || w < MIN_REFINER_SIZE {
            return Err(Error::Shape(format!(
                "refiner needs maps of at least {MIN_REFINER_SIZE}x{MIN_REFINER_SIZE}, got {h}x{w}"
            )));
        }
        let mut x = coarse;
        for (conv, &a) in self.convs.iter().zip(&self.prelu) {
            x = conv.forward(g, p, x)?;
            x = g.prelu(x, p.var(a))?;
        }
        x = g.conv_transpose2d(x, p.var(self.deconv_w), Some(p.var(self.deconv_b)), self.deconv_geom, (h, w))?;
        x = g.prelu(x, p.var(self.prelu[3]))?;
        let residual = self.regression.forward(g, p, x)?;
        g.add(coarse, residual)
    }

    /// Refine one map with frozen weights.
    pub fn refiner_forward(&self, coarse: &DensityMap) -> Result<DensityMap> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(coarse.to_nchw());
        let y = self.forward(&mut g, &p, x)?;
        DensityMap::from_tensor(g.value(y).clone(), coarse.scale)
    }

    /// Refine an `(n, 1, h, w)` batch with frozen weights.
    pub fn refine_batch(&self, coarse: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(coarse.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}

impl Network for Refiner {
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
