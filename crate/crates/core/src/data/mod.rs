//! Dataset ingestion, ground-truth density generation, scene filtering and
//! the procedural two-domain generator.

mod density;
mod io;
mod scene;
mod toy;

pub use density::{density_from_points, DensityMap, PointAnnotation, OUTPUT_SCALES, TRUNCATION_SIGMAS};
pub use io::{decode_image, encode_image, load_dataset, write_dataset, DatasetIndex};
pub use scene::{scene_filter, FilterRule, SceneMeta, TimeOfDay};
pub use toy::{gen_toy_domains, gen_toy_domains_with, toy_sample, Domain, GapConfig, ToyLayout, MIN_TOY_SIZE};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its head annotations. Images are `(c, h, w)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub points: PointAnnotation,
    pub meta: Option<SceneMeta>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    pub fn count(&self) -> usize {
        self.points.count()
    }
}

/// A sample with its ground truth rendered at the counter's output scale
/// and at full image resolution.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub name: String,
    pub image: Tensor,
    pub count: usize,
    pub gt: DensityMap,
    pub gt_full: DensityMap,
}

impl LabeledSample {
    pub fn prepare(sample: &Sample, sigma: f64, out_scale: f64) -> Result<Self> {
        let size = sample.size();
        Ok(Self {
            name: sample.name.clone(),
            image: sample.image.clone(),
            count: sample.count(),
            gt: density_from_points(&sample.points, size, sigma, out_scale)?,
            gt_full: density_from_points(&sample.points, size, sigma, 1.0)?,
        })
    }
}

pub fn prepare_all(samples: &[Sample], sigma: f64, out_scale: f64) -> Result<Vec<LabeledSample>> {
    samples.iter().map(|s| LabeledSample::prepare(s, sigma, out_scale)).collect()
}

/// One training iteration's input: a labelled source batch and an
/// unlabelled target batch.
#[derive(Clone, Debug)]
pub struct SamplePair {
    /// `(n, c, h, w)` images.
    pub source_images: Tensor,
    /// `(n, 1, h', w')` ground-truth densities matching `source_images`.
    pub source_gt: Tensor,
    pub target_images: Tensor,
}

impl SamplePair {
    pub fn new(source: &[&LabeledSample], target: &[&Tensor]) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::InvalidArgument("empty source batch".into()));
        }
        let images: Vec<Tensor> = source.iter().map(|s| s.image.clone()).collect();
        let gts: Vec<Tensor> = source.iter().map(|s| s.gt.to_nchw().index(0)).collect();
        let target: Vec<Tensor> = target.iter().map(|t| (*t).clone()).collect();
        Ok(Self {
            source_images: Tensor::stack(&images)?,
            source_gt: Tensor::stack(&gts)?,
            target_images: if target.is_empty() { Tensor::zeros(&[0]) } else { Tensor::stack(&target)? },
        })
    }
}

/// Keep the samples whose metadata passes `rule`; samples without metadata
/// are dropped.
pub fn filter_samples(samples: Vec<Sample>, rule: &FilterRule) -> Vec<Sample> {
    samples.into_iter().filter(|s| s.meta.as_ref().is_some_and(|m| scene_filter(m, rule))).collect()
}
