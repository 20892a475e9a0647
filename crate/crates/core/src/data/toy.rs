//! Procedural two-domain crowd images.
//!
//! Both domains share the crowd layout statistics (how many heads, where,
//! how big) and differ only in appearance, as controlled by [`GapConfig`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::density::PointAnnotation;
use super::scene::{SceneMeta, TimeOfDay};
use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Appearance shift applied to the target domain on top of the shared base
/// appearance. The zero value makes both domains identically distributed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    /// Extra amplitude of the smooth background texture.
    pub texture_amplitude: f64,
    /// Render heads darker than the background instead of brighter.
    pub invert_contrast: bool,
    /// Extra additive Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Additive brightness offset.
    pub brightness_offset: f64,
}

impl GapConfig {
    pub fn none() -> Self {
        Self { texture_amplitude: 0.0, invert_contrast: false, noise_sigma: 0.0, brightness_offset: 0.0 }
    }

    /// The gap used by the desk-scale experiments.
    pub fn standard() -> Self {
        Self { texture_amplitude: 0.15, invert_contrast: false, noise_sigma: 0.03, brightness_offset: 0.3 }
    }
}

impl Default for GapConfig {
    fn default() -> Self {
        Self::standard()
    }
}

/// Layout and base-appearance statistics shared by both domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyLayout {
    pub channels: usize,
    pub min_count: usize,
    pub max_count: usize,
    /// Head blob radius (Gaussian sigma, pixels).
    pub blob_sigma: f64,
    /// Spread of head clusters around their centres (pixels).
    pub cluster_sigma: f64,
    pub background: f64,
    pub contrast: f64,
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for ToyLayout {
    fn default() -> Self {
        Self {
            channels: 3,
            min_count: 0,
            max_count: 30,
            blob_sigma: 1.5,
            cluster_sigma: 10.0,
            background: 0.25,
            contrast: 0.5,
            texture_amplitude: 0.05,
            noise_sigma: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Per-image generator seed; images are independent so generation can be
/// split across workers by index.
fn image_seed(seed: u64, domain: Domain, index: usize) -> u64 {
    let d = match domain {
        Domain::Source => 0x5eed_0001u64,
        Domain::Target => 0x5eed_0002u64,
    };
    // splitmix64 finaliser over the packed inputs
    let mut z = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(d << 32).wrapping_add(index as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_layout(rng: &mut ChaCha8Rng, (h, w): (usize, usize), layout: &ToyLayout) -> Vec<(f64, f64)> {
    let count = rng.random_range(layout.min_count..=layout.max_count);
    let clusters: Vec<(f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    let spread = Normal::new(0.0, layout.cluster_sigma).expect("positive sigma");
    let mut points = Vec::with_capacity(count);
    while points.len() < count {
        let (x, y) = if rng.random_bool(0.25) {
            (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64))
        } else {
            let (cx, cy) = clusters[rng.random_range(0..clusters.len())];
            (cx + spread.sample(rng), cy + spread.sample(rng))
        };
        // keep blobs fully visible
        if x >= 1.0 && y >= 1.0 && x < w as f64 - 1.0 && y < h as f64 - 1.0 {
            points.push((x, y));
        }
    }
    points
}

fn render(
    rng: &mut ChaCha8Rng,
    (h, w): (usize, usize),
    points: &[(f64, f64)],
    layout: &ToyLayout,
    gap: &GapConfig,
    domain: Domain,
) -> Tensor {
    let (texture, contrast, noise, offset) = match domain {
        Domain::Source => (layout.texture_amplitude, layout.contrast, layout.noise_sigma, 0.0),
        Domain::Target => (
            layout.texture_amplitude + gap.texture_amplitude,
            if gap.invert_contrast { -layout.contrast } else { layout.contrast },
            layout.noise_sigma + gap.noise_sigma,
            gap.brightness_offset,
        ),
    };
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (rng.random_range(0.02..0.12), rng.random_range(0.02..0.12), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mut plane = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| (fx * x as f64 * std::f64::consts::TAU + fy * y as f64 * 3.0 + ph).sin())
                .sum::<f64>()
                / 3.0;
            plane[y * w + x] = layout.background + offset + texture * t;
        }
    }
    let r = (3.0 * layout.blob_sigma).ceil() as isize;
    let two_s2 = 2.0 * layout.blob_sigma * layout.blob_sigma;
    for &(px, py) in points {
        let (cx, cy) = (px.floor() as isize, py.floor() as isize);
        for y in (cy - r).max(0)..=(cy + r).min(h as isize - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
                let dx = x as f64 + 0.5 - px;
                let dy = y as f64 + 0.5 - py;
                plane[y as usize * w + x as usize] += contrast * (-(dx * dx + dy * dy) / two_s2).exp();
            }
        }
    }
    let gains = [1.0, 0.9, 0.8];
    let mut data = Vec::with_capacity(layout.channels * h * w);
    let noise = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("positive sigma"));
    for c in 0..layout.channels {
        let gain = gains[c % gains.len()];
        for &v in &plane {
            let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            data.push((v * gain + n).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![layout.channels, h, w], data).expect("shape matches")
}

/// Generate image `index` of `domain`.
pub fn toy_sample(
    seed: u64,
    domain: Domain,
    index: usize,
    size: (usize, usize),
    layout: &ToyLayout,
    gap: &GapConfig,
) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, domain, index));
    let points = sample_layout(&mut rng, size, layout);
    let image = render(&mut rng, size, &points, layout, gap, domain);
    let count = points.len() as u32;
    let meta = SceneMeta {
        level: match count {
            0..=10 => 0,
            11..=25 => 1,
            26..=50 => 2,
            51..=100 => 3,
            101..=300 => 4,
            301..=600 => 5,
            601..=1000 => 6,
            1001..=2000 => 7,
            _ => 8,
        },
        time: TimeOfDay(rng.random_range(0..1440)),
        weather: rng.random_range(0..=6),
        count,
        ratio: rng.random_range(0.0..=1.0),
    };
    let prefix = match domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    Sample { name: format!("{prefix}_{index:05}"), image, points: PointAnnotation::new(points), meta: Some(meta) }
}

/// Smallest accepted toy image side.
pub const MIN_TOY_SIZE: usize = 32;

pub fn gen_toy_domains_with(
    seed: u64,
    n_images: usize,
    size: (usize, usize),
    gap: &GapConfig,
    layout: &ToyLayout,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be at least 1".into()));
    }
    if size.0 < MIN_TOY_SIZE || size.1 < MIN_TOY_SIZE {
        return Err(Error::InvalidArgument(format!(
            "toy images must be at least {MIN_TOY_SIZE}x{MIN_TOY_SIZE}, got {}x{}",
            size.0, size.1
        )));
    }
    if layout.channels == 0 || layout.min_count > layout.max_count {
        return Err(Error::InvalidArgument("invalid toy layout".into()));
    }
    let gen = |domain| (0..n_images).map(|i| toy_sample(seed, domain, i, size, layout, gap)).collect::<Vec<_>>();
    Ok((gen(Domain::Source), gen(Domain::Target)))
}

pub fn gen_toy_domains(
    seed: u64,
    n_images: usize,
    size: (usize, usize),
    gap: &GapConfig,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    gen_toy_domains_with(seed, n_images, size, gap, &ToyLayout::default())
}
