//! Count errors, map quality and the evaluation driver.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{DensityMap, LabeledSample};
use crate::error::{Error, Result};
use crate::losses::semantic_reshape_to;
use crate::networks::{Counter, Refiner};
use crate::tensor::Tensor;

/// Floor on the dynamic range used by PSNR and SSIM.
pub const MIN_DYNAMIC_RANGE: f64 = 1e-6;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_counts(gt: &[f64], pred: &[f64]) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::InvalidArgument(format!("{} ground-truth counts vs {} predictions", gt.len(), pred.len())));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("no counts to compare".into()));
    }
    Ok(())
}

/// Mean absolute count error.
pub fn mae(gt: &[f64], pred: &[f64]) -> Result<f64> {
    check_counts(gt, pred)?;
    Ok(gt.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / gt.len() as f64)
}

/// Root-mean-square count error, called MSE in the counting literature.
pub fn mse(gt: &[f64], pred: &[f64]) -> Result<f64> {
    check_counts(gt, pred)?;
    let ms = gt.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).sum::<f64>() / gt.len() as f64;
    Ok(ms.sqrt())
}

fn check_maps(pred: &DensityMap, gt: &DensityMap) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("maps differ in size: {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    Ok(())
}

/// Dynamic range of a ground-truth map: its maximum, floored.
pub fn dynamic_range(gt: &DensityMap) -> f64 {
    gt.max().max(MIN_DYNAMIC_RANGE)
}

/// PSNR in dB with range `max(gt)`; `+inf` when the maps are identical.
pub fn psnr(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    check_maps(pred, gt)?;
    let range = dynamic_range(gt);
    let n = pred.data().len() as f64;
    let err = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / err).log10())
}

/// SSIM with range `max(gt)`.
pub fn ssim(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    ssim_with_range(pred, gt, dynamic_range(gt))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter keeping only fully interior windows.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over all 11x11 Gaussian windows (sigma 1.5) lying fully inside
/// the maps, with stabilisers from the given dynamic range.
pub fn ssim_with_range(a: &DensityMap, b: &DensityMap, range: f64) -> Result<f64> {
    check_maps(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs maps of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::InvalidArgument(format!("dynamic range must be positive, got {range}")));
    }
    let k = gaussian_window();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..h * w).map(f).collect() };
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let mxx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &k);
    let myy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &k);
    let mxy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &k);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Anything that maps an image to a density map.
pub trait DensityPredictor {
    /// Predict for one `(c, h, w)` image. The map may be at any scale;
    /// evaluation resizes it to the image resolution.
    fn predict(&self, image: &Tensor) -> Result<DensityMap>;
}

impl DensityPredictor for Counter {
    fn predict(&self, image: &Tensor) -> Result<DensityMap> {
        let out = self.counter_forward(image)?;
        let full = out.density_full()?;
        if out.padding == (0, 0) {
            return Ok(full);
        }
        let (h, w) = out.input_size;
        let pw = full.width();
        let data = (0..h).flat_map(|y| full.data()[y * pw..y * pw + w].to_vec()).collect();
        DensityMap::new(h, w, data, full.scale)
    }
}

/// Serialises non-finite values as strings so JSON stays valid.
mod lossless_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub name: String,
    pub gt_count: f64,
    pub pred_count: f64,
    #[serde(with = "lossless_f64")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    /// Mean per-sample PSNR; `+inf` if any sample is reproduced exactly.
    #[serde(with = "lossless_f64")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_samples: usize,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn from_records(samples: Vec<SampleRecord>) -> Result<Self> {
        let gt: Vec<f64> = samples.iter().map(|s| s.gt_count).collect();
        let pred: Vec<f64> = samples.iter().map(|s| s.pred_count).collect();
        let n = samples.len();
        Ok(Self {
            mae: mae(&gt, &pred)?,
            mse: mse(&gt, &pred)?,
            psnr_db: samples.iter().map(|s| s.psnr_db).sum::<f64>() / n as f64,
            ssim: samples.iter().map(|s| s.ssim).sum::<f64>() / n as f64,
            n_samples: n,
            samples,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("bad report: {e}")))
    }

    /// Per-sample rows as CSV.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["name", "gt_count", "pred_count", "psnr_db", "ssim"]).map_err(csv_err)?;
        for s in &self.samples {
            w.write_record([
                s.name.clone(),
                s.gt_count.to_string(),
                s.pred_count.to_string(),
                s.psnr_db.to_string(),
                s.ssim.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Bring a prediction to ground-truth resolution, optionally refine it, and
/// clamp it at zero.
pub fn evaluation_map(pred: &DensityMap, gt_full: &DensityMap, refiner: Option<&Refiner>) -> Result<DensityMap> {
    let (h, w) = gt_full.dims();
    let mut map = if pred.dims() == (h, w) { pred.clone() } else { semantic_reshape_to(pred, h, w)? };
    if let Some(r) = refiner {
        map = r.refiner_forward(&map)?;
    }
    Ok(map.clamped())
}

/// Score one predicted map against a labelled sample.
pub fn score_sample(name: &str, gt_count: f64, map: &DensityMap, gt_full: &DensityMap) -> Result<SampleRecord> {
    Ok(SampleRecord {
        name: name.to_string(),
        gt_count,
        pred_count: map.sum(),
        psnr_db: psnr(map, gt_full)?,
        ssim: ssim(map, gt_full)?,
    })
}

/// Predict every sample, refine if asked, and aggregate count and map
/// quality. Samples are processed in order.
pub fn evaluate(
    predictor: &dyn DensityPredictor,
    samples: &[LabeledSample],
    refiner: Option<&Refiner>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let records = samples
        .iter()
        .map(|s| {
            let pred = predictor.predict(&s.image)?;
            let map = evaluation_map(&pred, &s.gt_full, refiner)?;
            score_sample(&s.name, s.count as f64, &map, &s.gt_full)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(records)
}
