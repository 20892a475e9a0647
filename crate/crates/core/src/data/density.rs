use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Head positions in image pixel coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub points: Vec<(f64, f64)>,
}

impl PointAnnotation {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self { points }
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Every point must lie in `[0, W) x [0, H)`.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for (index, &(x, y)) in self.points.iter().enumerate() {
            let inside =
                x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64;
            if !inside {
                return Err(Error::PointOutOfBounds { index, x, y, width, height });
            }
        }
        Ok(())
    }
}

/// A single-channel density grid. `scale` is grid resolution over image
/// resolution (1/8 for the counter's native output).
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    grid: Tensor,
    pub scale: f64,
}

impl DensityMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>, scale: f64) -> Result<Self> {
        Ok(Self { grid: Tensor::new(vec![height, width], data)?, scale })
    }

    pub fn zeros(height: usize, width: usize, scale: f64) -> Self {
        Self { grid: Tensor::zeros(&[height, width]), scale }
    }

    /// Accepts `(h, w)`, `(1, h, w)` or `(1, 1, h, w)` tensors.
    pub fn from_tensor(t: Tensor, scale: f64) -> Result<Self> {
        let shape = t.shape().to_vec();
        let (h, w) = match shape[..] {
            [h, w] | [1, h, w] | [1, 1, h, w] => (h, w),
            _ => {
                return Err(Error::Shape(format!("not a single density map: {shape:?}")));
            }
        };
        Ok(Self { grid: t.reshape(&[h, w])?, scale })
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &[f64] {
        self.grid.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.grid.data_mut()
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.grid.data()[y * self.width() + x]
    }

    pub fn sum(&self) -> f64 {
        self.grid.sum()
    }

    pub fn max(&self) -> f64 {
        self.grid.max()
    }

    pub fn argmax(&self) -> (usize, usize) {
        let (i, _) =
            self.data()
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        (i / self.width(), i % self.width())
    }

    /// Copy with every cell clamped at zero.
    pub fn clamped(&self) -> Self {
        Self { grid: self.grid.map(|v| v.max(0.0)), scale: self.scale }
    }

    /// `(1, 1, h, w)` view for feeding networks.
    pub fn to_nchw(&self) -> Tensor {
        self.grid.clone().reshape(&[1, 1, self.height(), self.width()]).expect("same numel")
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.grid
    }
}

/// Supported output scales for generated ground truth.
pub const OUTPUT_SCALES: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

/// Kernel truncation radius in units of sigma.
pub const TRUNCATION_SIGMAS: f64 = 4.0;

/// Ground-truth density from head points: every point contributes a fixed-σ
/// isotropic Gaussian sampled at cell centres, truncated at 4σ and
/// renormalised to unit mass, so the map sums to the point count.
pub fn density_from_points(
    points: &PointAnnotation,
    image_size: (usize, usize),
    sigma: f64,
    out_scale: f64,
) -> Result<DensityMap> {
    let (h, w) = image_size;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if !OUTPUT_SCALES.contains(&out_scale) {
        return Err(Error::InvalidArgument(format!("output scale {out_scale} is not one of {OUTPUT_SCALES:?}")));
    }
    points.validate(h, w)?;
    let oh = ((h as f64 * out_scale).round() as usize).max(1);
    let ow = ((w as f64 * out_scale).round() as usize).max(1);
    let mut grid = vec![0.0; oh * ow];

    let s = sigma * out_scale;
    let radius = TRUNCATION_SIGMAS * s;
    let mut weights: Vec<(usize, f64)> = Vec::new();
    for &(x, y) in &points.points {
        let (px, py) = (x * out_scale, y * out_scale);
        let home = ((py.floor() as usize).min(oh - 1), (px.floor() as usize).min(ow - 1));
        let y0 = ((py - radius).floor().max(0.0)) as usize;
        let y1 = ((py + radius).ceil() as usize).min(oh - 1);
        let x0 = ((px - radius).floor().max(0.0)) as usize;
        let x1 = ((px + radius).ceil() as usize).min(ow - 1);
        weights.clear();
        let mut total = 0.0;
        for cy in y0.min(home.0)..=y1.max(home.0) {
            for cx in x0.min(home.1)..=x1.max(home.1) {
                let dy = cy as f64 + 0.5 - py;
                let dx = cx as f64 + 0.5 - px;
                let d2 = dx * dx + dy * dy;
                if d2 <= radius * radius || (cy, cx) == home {
                    let v = (-d2 / (2.0 * s * s)).exp();
                    weights.push((cy * ow + cx, v));
                    total += v;
                }
            }
        }
        if total > 0.0 {
            for &(i, v) in &weights {
                grid[i] += v / total;
            }
        } else {
            grid[home.0 * ow + home.1] += 1.0;
        }
    }
    DensityMap::new(oh, ow, grid, out_scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_points_give_zero_map() {
        let m = density_from_points(&PointAnnotation::default(), (32, 48), 4.0, 0.25).unwrap();
        assert_eq!(m.dims(), (8, 12));
        assert_eq!(m.sum(), 0.0);
    }

    #[test]
    fn single_centred_point() {
        let pts = PointAnnotation::new(vec![(32.0, 32.0)]);
        let m = density_from_points(&pts, (64, 64), 4.0, 1.0).unwrap();
        assert!((m.sum() - 1.0).abs() < 1e-3);
        let (y, x) = m.argmax();
        // Cells 31 and 32 are equidistant from the point at 32.0.
        assert!((31..=32).contains(&y) && (31..=32).contains(&x));
    }

    #[test]
    fn border_points_keep_unit_mass() {
        let pts = PointAnnotation::new(vec![(0.0, 0.0), (63.99, 0.5), (10.0, 63.9)]);
        for scale in OUTPUT_SCALES {
            let m = density_from_points(&pts, (64, 64), 4.0, scale).unwrap();
            assert!((m.sum() - 3.0).abs() < 1e-9, "scale {scale}: {}", m.sum());
        }
    }

    #[test]
    fn out_of_bounds_point_is_named() {
        let pts = PointAnnotation::new(vec![(1.0, 1.0), (64.0, 3.0)]);
        match density_from_points(&pts, (64, 64), 4.0, 1.0) {
            Err(Error::PointOutOfBounds { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_sigma_and_scale() {
        let pts = PointAnnotation::default();
        assert!(density_from_points(&pts, (8, 8), 0.0, 1.0).is_err());
        assert!(density_from_points(&pts, (8, 8), 1.0, 0.3).is_err());
    }

    #[test]
    fn tiny_sigma_collapses_to_home_cell() {
        let pts = PointAnnotation::new(vec![(5.2, 9.7)]);
        let m = density_from_points(&pts, (16, 16), 1e-3, 0.5).unwrap();
        assert!((m.at(4, 2) - 1.0).abs() < 1e-12);
    }
}
