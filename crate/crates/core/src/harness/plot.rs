//! Heatmap overlays for visual inspection.

use crate::detector::Heatmap;
use crate::raster::Raster;

/// Blends a min-max normalized heatmap over `img` in red, marking `points` in white.
pub fn overlay(img: &Raster, h: &Heatmap, cell: f64, points: &[[f64; 2]]) -> Raster {
    let lo = h.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = h.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (r, c) = ((y as f64 / cell) as usize, (x as f64 / cell) as usize);
            if r >= h.side || c >= h.side {
                continue;
            }
            let a = 0.7 * (h.at(r, c) - lo) / span;
            let [pr, pg, pb] = img.get(x, y);
            let mix = |v: u8, t: f64| ((1.0 - a) * v as f64 + a * t).round() as u8;
            out.set(x, y, [mix(pr, 255.0), mix(pg, 0.0), mix(pb, 0.0)]);
        }
    }
    for p in points {
        let (px, py) = (p[0].round() as i64, p[1].round() as i64);
        for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (x, y) = (px + dx, py + dy);
            if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
                out.set(x as usize, y as usize, [255, 255, 255]);
            }
        }
    }
    out
}
