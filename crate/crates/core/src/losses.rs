//! Training objectives: counting MSE, pixel-wise and map-level domain
//! classification losses with their inverted-label adversarial forms, the
//! semantic reshaping of density maps, the pyramid consistency loss and
//! their weighted sum.
//!
//! Every loss exists in two forms: a graph form used during training and a
//! plain-value form over tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::DensityMap;
use crate::error::{Error, Result};
use crate::networks::{ScoreMap, ScoreVector};
use crate::tensor::resize_bilinear;

/// Probability floor inside the domain-classification logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Channel holding the source-domain logit.
pub const SOURCE: usize = 0;
/// Channel holding the target-domain logit.
pub const TARGET: usize = 1;

/// How the pixel axes of score maps are reduced. The batch axis is always
/// averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelReduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Feature-level adversarial weight.
    pub lambda: f64,
    /// Map-level adversarial weight.
    pub beta: f64,
    /// Pyramid consistency weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 1e-3, beta: 1e-3, gamma: 1e-1 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { lambda: 0.0, beta: 0.0, gamma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Down/up scale factors for the pyramid consistency loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidScales {
    pub m: f64,
    pub n: f64,
}

impl PyramidScales {
    pub fn new(m: f64, n: f64) -> Result<Self> {
        if !(0.8 < m && m < 1.0 && 1.0 < n && n < 1.2) {
            return Err(Error::InvalidArgument(format!("pyramid scales need 0.8 < m < 1 < n < 1.2, got m={m}, n={n}")));
        }
        Ok(Self { m, n })
    }

    /// `m ~ U(0.8, 1.0)`, `n ~ U(1.0, 1.2)`, open at the ends.
    pub fn sample(rng: &mut impl Rng) -> Self {
        loop {
            let m = rng.random_range(0.8..1.0);
            let n = rng.random_range(1.0..1.2);
            if let Ok(s) = Self::new(m, n) {
                return s;
            }
        }
    }
}

/// Scalar components of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cnt: f64,
    pub adv_feature: f64,
    pub adv_map: f64,
    pub spr: f64,
}

pub fn loss_total(c: &LossComponents, w: &LossWeights) -> f64 {
    c.cnt + w.lambda * c.adv_feature + w.beta * c.adv_map + w.gamma * c.spr
}

// ---------------------------------------------------------------------------
// graph forms

/// Mean squared error over every cell of equally shaped tensors.
pub fn mse_graph(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `sum_pixels log p(channel)` or its pixel mean, averaged over the batch.
fn reduced_log_prob(g: &mut Graph, logits: Var, channel: usize, red: PixelReduction) -> Result<Var> {
    let n = g.shape(logits)[0];
    let lp = g.log_softmax(logits)?;
    let lp = g.channel(lp, channel)?;
    let lp = g.clamp_min(lp, PROB_FLOOR.ln());
    Ok(match red {
        PixelReduction::Mean => g.mean(lp),
        PixelReduction::Sum => {
            let s = g.sum(lp);
            g.scale(s, 1.0 / n as f64)
        }
    })
}

/// Domain-classification loss for one discriminator: source samples
/// labelled source, target samples labelled target.
pub fn disc_loss_graph(g: &mut Graph, src: Var, tgt: Var, red: PixelReduction) -> Result<Var> {
    let a = reduced_log_prob(g, src, SOURCE, red)?;
    // log(1 - p_source) == log p_target for two-way softmax
    let b = reduced_log_prob(g, tgt, TARGET, red)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, -1.0))
}

/// Inverted-label loss that rewards target samples scored as source; one
/// term per score map, summed.
pub fn adv_loss_graph(g: &mut Graph, tgt_scores: &[Var], red: PixelReduction) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &s in tgt_scores {
        let t = reduced_log_prob(g, s, SOURCE, red)?;
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no score maps".into()))?;
    Ok(g.scale(total, -1.0))
}

/// Pyramid consistency on graph maps: `a1` is `(n, 1, h, w)`; each entry of
/// `others` is a map predicted from a resized copy together with its
/// realised area factor `y^2`.
pub fn spr_graph(g: &mut Graph, a1: Var, others: &[(Var, f64)]) -> Result<Var> {
    let (_, _, h, w) = g.value(a1).dims4()?;
    let mut total: Option<Var> = None;
    for &(a, area) in others {
        let r = g.resize(a, h, w)?;
        let r = g.scale(r, area);
        let t = mse_graph(g, a1, r)?;
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no pyramid levels".into()))
}

// ---------------------------------------------------------------------------
// plain forms

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item()
}

pub fn loss_count(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let mut g = Graph::new();
    let a = g.constant(pred.to_nchw());
    let b = g.constant(gt.to_nchw());
    let l = mse_graph(&mut g, a, b)?;
    Ok(scalar(&g, l))
}

fn check_score_map(s: &ScoreMap) -> Result<()> {
    match s.logits.shape() {
        [_, 2, _, _] if s.logits.all_finite() => Ok(()),
        [_, 2, _, _] => Err(Error::InvalidArgument("score map has non-finite logits".into())),
        other => Err(Error::Shape(format!("score map must be (n, 2, h, w), got {other:?}"))),
    }
}

fn check_score_vector(s: &ScoreVector) -> Result<()> {
    match s.logits.shape() {
        [_, 2] if s.logits.all_finite() => Ok(()),
        [_, 2] => Err(Error::InvalidArgument("score vector has non-finite logits".into())),
        other => Err(Error::Shape(format!("score vector must be (n, 2), got {other:?}"))),
    }
}

pub fn loss_feature_disc(src: &ScoreMap, tgt: &ScoreMap, red: PixelReduction) -> Result<f64> {
    check_score_map(src)?;
    check_score_map(tgt)?;
    let mut g = Graph::new();
    let a = g.constant(src.logits.clone());
    let b = g.constant(tgt.logits.clone());
    let l = disc_loss_graph(&mut g, a, b, red)?;
    Ok(scalar(&g, l))
}

pub fn loss_feature_adv(tgt_scores: &[&ScoreMap], red: PixelReduction) -> Result<f64> {
    let mut g = Graph::new();
    let mut vars = Vec::new();
    for s in tgt_scores {
        check_score_map(s)?;
        vars.push(g.constant(s.logits.clone()));
    }
    let l = adv_loss_graph(&mut g, &vars, red)?;
    Ok(scalar(&g, l))
}

pub fn loss_map_disc(src: &ScoreVector, tgt: &ScoreVector) -> Result<f64> {
    check_score_vector(src)?;
    check_score_vector(tgt)?;
    let mut g = Graph::new();
    let a = g.constant(src.logits.clone());
    let b = g.constant(tgt.logits.clone());
    let l = disc_loss_graph(&mut g, a, b, PixelReduction::Mean)?;
    Ok(scalar(&g, l))
}

pub fn loss_map_adv(tgt: &ScoreVector) -> Result<f64> {
    check_score_vector(tgt)?;
    let mut g = Graph::new();
    let a = g.constant(tgt.logits.clone());
    let l = adv_loss_graph(&mut g, &[a], PixelReduction::Mean)?;
    Ok(scalar(&g, l))
}

fn resize_map(map: &DensityMap, h: usize, w: usize, factor: f64, scale: f64) -> Result<DensityMap> {
    let t = if map.dims() == (h, w) { map.to_nchw() } else { resize_bilinear(&map.to_nchw(), h, w)? };
    DensityMap::from_tensor(t.scale(factor), scale)
}

/// Resize a density map from scale `p` to scale `q` and multiply by the
/// area factor `(p / q)^2`, so its total mass is approximately kept. The
/// factor is taken from the realised grid, which differs from `p / q` when
/// the target size has to be rounded.
pub fn semantic_reshape(map: &DensityMap, p: f64, q: f64) -> Result<DensityMap> {
    if !(p > 0.0 && q > 0.0) {
        return Err(Error::InvalidArgument(format!("scales must be positive, got {p} -> {q}")));
    }
    let ratio = q / p;
    let h = (map.height() as f64 * ratio).round() as usize;
    let w = (map.width() as f64 * ratio).round() as usize;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("reshaping {:?} from {p} to {q} leaves no cells", map.dims())));
    }
    let factor = (map.height() * map.width()) as f64 / (h * w) as f64;
    resize_map(map, h, w, factor, map.scale * ratio)
}

/// Resize to an explicit size with the area factor of the realised size
/// change, so mass is approximately kept.
pub fn semantic_reshape_to(map: &DensityMap, h: usize, w: usize) -> Result<DensityMap> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("target size must be at least 1x1".into()));
    }
    let factor = (map.height() * map.width()) as f64 / (h * w) as f64;
    let scale = map.scale * h as f64 / map.height() as f64;
    resize_map(map, h, w, factor, scale)
}

/// Pyramid consistency between the map of the original image and the maps
/// of its `m`- and `n`-scaled copies, each reshaped back to the original
/// resolution with area factor `y^2`.
pub fn loss_spr(a1: &DensityMap, am: &DensityMap, an: &DensityMap, scales: PyramidScales) -> Result<f64> {
    if !(scales.m > 0.0 && scales.n > 0.0) {
        return Err(Error::InvalidArgument("pyramid scales must be positive".into()));
    }
    let mut g = Graph::new();
    let v1 = g.constant(a1.to_nchw());
    let vm = g.constant(am.to_nchw());
    let vn = g.constant(an.to_nchw());
    let l = spr_graph(&mut g, v1, &[(vm, scales.m * scales.m), (vn, scales.n * scales.n)])?;
    Ok(scalar(&g, l))
}
