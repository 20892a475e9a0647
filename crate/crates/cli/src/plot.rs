//! Static PNG figures drawn directly into pixel buffers.

use std::path::Path;

use crowdda::data::DensityMap;
use crowdda::{Error, Result, Tensor};
use image::{Rgb, RgbImage};

const PANEL_W: u32 = 480;
const PANEL_H: u32 = 140;
const MARGIN: u32 = 10;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GREY: Rgb<u8> = Rgb([170, 170, 170]);
const PALETTE: [Rgb<u8>; 4] = [Rgb([31, 119, 180]), Rgb([214, 39, 40]), Rgb([44, 160, 44]), Rgb([148, 103, 189])];

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// One stacked panel per named group of series, each panel with its own
/// y range. Non-finite points are skipped.
pub fn loss_curves(path: &Path, panels: &[Vec<Vec<(f64, f64)>>]) -> Result<()> {
    let height = (PANEL_H + MARGIN) * panels.len().max(1) as u32 + MARGIN;
    let mut img = RgbImage::from_pixel(PANEL_W + 2 * MARGIN, height, WHITE);
    for (k, series) in panels.iter().enumerate() {
        let top = MARGIN + k as u32 * (PANEL_H + MARGIN);
        let (l, r, t, b) = (MARGIN as f64, (MARGIN + PANEL_W) as f64, top as f64, (top + PANEL_H) as f64);
        for (p, q) in [((l, t), (r, t)), ((l, b), (r, b)), ((l, t), (l, b)), ((r, t), (r, b))] {
            line(&mut img, p, q, GREY);
        }
        let pts = series.iter().flatten().filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in pts {
            (x_lo, x_hi, y_lo, y_hi) = (x_lo.min(x), x_hi.max(x), y_lo.min(y), y_hi.max(y));
        }
        if x_lo > x_hi {
            continue;
        }
        let sx = if x_hi > x_lo { (r - l) / (x_hi - x_lo) } else { 0.0 };
        let sy = if y_hi > y_lo { (b - t) / (y_hi - y_lo) } else { 0.0 };
        let to_px = |(x, y): (f64, f64)| (l + (x - x_lo) * sx, b - (y - y_lo) * sy);
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let finite: Vec<_> = s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
            for w in finite.windows(2) {
                line(&mut img, to_px(w[0]), to_px(w[1]), color);
            }
            if let [only] = finite.as_slice() {
                let (x, y) = to_px(*only);
                line(&mut img, (x - 2.0, y), (x + 2.0, y), color);
            }
        }
    }
    save(&img, path)
}

/// Blue-to-yellow ramp over `[0, 1]`.
fn heat(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let c = |a: f64, b: f64| (255.0 * (a + (b - a) * v)).round() as u8;
    Rgb([c(0.05, 0.99), c(0.05, 0.91), c(0.35, 0.15)])
}

/// A grid cell: an image (grey or RGB) or a density map drawn against a
/// shared maximum.
pub enum Cell<'a> {
    Image(&'a Tensor),
    Map(&'a DensityMap, f64),
}

/// Rows of equally sized cells, e.g. image | ground truth | coarse |
/// refined, upscaled by `zoom`.
pub fn map_grid(path: &Path, rows: &[Vec<Cell<'_>>], zoom: u32) -> Result<()> {
    let size = |c: &Cell<'_>| match c {
        Cell::Image(t) => (t.shape()[2] as u32, t.shape()[1] as u32),
        Cell::Map(m, _) => (m.width() as u32, m.height() as u32),
    };
    let (cw, ch) = rows.iter().flatten().map(size).fold((1, 1), |(w, h), (a, b)| (w.max(a), h.max(b)));
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1).max(1) as u32;
    let gap = 4;
    let (w, h) = (cols * (cw * zoom + gap) + gap, rows.len().max(1) as u32 * (ch * zoom + gap) + gap);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let (x0, y0) = (gap + c as u32 * (cw * zoom + gap), gap + r as u32 * (ch * zoom + gap));
            let (sw, sh) = size(cell);
            for y in 0..sh * zoom {
                for x in 0..sw * zoom {
                    let (sx, sy) = ((x / zoom) as usize, (y / zoom) as usize);
                    let px = match cell {
                        Cell::Image(t) => {
                            let (chans, th, tw) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                            let at =
                                |k: usize| (t.data()[(k * th + sy) * tw + sx].clamp(0.0, 1.0) * 255.0).round() as u8;
                            if chans >= 3 {
                                Rgb([at(0), at(1), at(2)])
                            } else {
                                Rgb([at(0); 3])
                            }
                        }
                        Cell::Map(m, max) => heat(m.at(sy, sx) / max.max(1e-12)),
                    };
                    img.put_pixel(x0 + x, y0 + y, px);
                }
            }
        }
    }
    save(&img, path)
}
