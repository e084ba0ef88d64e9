//! Tiny raster plots written as binary PPM.

use std::path::Path;

use crate::bench::SweepReport;
use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GRID: Rgb = [220, 220, 220];
pub const BLUE: Rgb = [31, 119, 180];
pub const ORANGE: Rgb = [255, 127, 14];
pub const GREEN: Rgb = [44, 160, 44];
pub const RED: Rgb = [214, 39, 40];

#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    /// Out-of-bounds writes are clipped.
    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    /// Bresenham segment.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn thick_line(&mut self, a: (i64, i64), b: (i64, i64), c: Rgb) {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            self.line((a.0 + ox, a.1 + oy), (b.0 + ox, b.1 + oy), c);
        }
    }

    pub fn square(&mut self, (x, y): (i64, i64), half: i64, c: Rgb) {
        for yy in y - half..=y + half {
            for xx in x - half..=x + half {
                self.set(xx, yy, c);
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// A plot area inside a canvas mapping `[0, 1]²` data onto pixels.
#[derive(Debug, Clone, Copy)]
struct Panel {
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
}

impl Panel {
    fn at(&self, u: f64, v: f64) -> (i64, i64) {
        let u = u.clamp(0.0, 1.0);
        let v = v.clamp(0.0, 1.0);
        (
            self.x0 + (u * self.w as f64).round() as i64,
            self.y0 + self.h - (v * self.h as f64).round() as i64,
        )
    }

    fn frame(&self, c: &mut Canvas) {
        for k in 1..10 {
            let x = self.x0 + self.w * k / 10;
            c.line((x, self.y0), (x, self.y0 + self.h), GRID);
            let y = self.y0 + self.h * k / 10;
            c.line((self.x0, y), (self.x0 + self.w, y), GRID);
        }
        let (l, r, t, b) = (self.x0, self.x0 + self.w, self.y0, self.y0 + self.h);
        c.line((l, t), (l, b), BLACK);
        c.line((l, b), (r, b), BLACK);
        c.line((r, t), (r, b), BLACK);
        c.line((l, t), (r, t), BLACK);
    }

    fn series(&self, c: &mut Canvas, pts: &[(f64, f64)], color: Rgb) {
        let px: Vec<_> = pts.iter().map(|&(u, v)| self.at(u, v)).collect();
        for w in px.windows(2) {
            c.thick_line(w[0], w[1], color);
        }
        for &p in &px {
            c.square(p, 2, color);
        }
    }
}

/// Two stacked panels over the ratio axis `[0, 1]`. Top: mean IoU of the
/// predictor (blue), the finetuned head (green) and random masks (orange).
/// Bottom: remaining backbone cost as a fraction of full retention, for the
/// predictor (blue) and random masks (red). Both y axes span `[0, 1]`.
pub fn render_sweep(report: &SweepReport) -> Canvas {
    let (w, h) = (640, 480);
    let mut c = Canvas::new(w, h, WHITE);
    let top = Panel { x0: 40, y0: 20, w: 580, h: 200 };
    let bottom = Panel { x0: 40, y0: 260, w: 580, h: 200 };
    top.frame(&mut c);
    bottom.frame(&mut c);

    let mut rows: Vec<_> = report.rows.iter().collect();
    rows.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let pick = |f: &dyn Fn(&crate::bench::RatioRow) -> f64| -> Vec<(f64, f64)> {
        rows.iter().map(|r| (r.ratio, f(r))).collect()
    };
    top.series(&mut c, &pick(&|r| r.random_performance), ORANGE);
    if rows.iter().all(|r| r.performance_finetuned.is_some()) {
        top.series(&mut c, &pick(&|r| r.performance_finetuned.unwrap_or(0.0)), GREEN);
    }
    top.series(&mut c, &pick(&|r| r.performance), BLUE);
    bottom.series(&mut c, &pick(&|r| 1.0 - r.random_cost_reduction), RED);
    bottom.series(&mut c, &pick(&|r| 1.0 - r.cost_reduction), BLUE);
    c
}

/// Grayscale heat map of one value per cell, row 0 at the top, scaled so
/// the maximum is white.
pub fn heatmap(width: usize, height: usize, values: &[f64], scale: usize) -> Result<Canvas> {
    if values.len() != width * height {
        return Err(Error::Dimension(format!(
            "{} values for a {width}x{height} heat map",
            values.len()
        )));
    }
    let scale = scale.max(1);
    let max = values.iter().copied().fold(0.0_f64, f64::max);
    let mut c = Canvas::new(width * scale, height * scale, BLACK);
    for (i, &v) in values.iter().enumerate() {
        let g = if max > 0.0 { (255.0 * v.max(0.0) / max).round() as u8 } else { 0 };
        let (x, y) = (i % width, i / width);
        for dy in 0..scale {
            for dx in 0..scale {
                c.set((x * scale + dx) as i64, (y * scale + dy) as i64, [g, g, g]);
            }
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_hits_both_ends() {
        let mut c = Canvas::new(10, 10, WHITE);
        c.line((1, 8), (7, 2), RED);
        assert_eq!(c.get(1, 8), RED);
        assert_eq!(c.get(7, 2), RED);
        c.line((-5, -5), (20, 20), BLUE);
        assert_eq!(c.get(9, 9), BLUE);
    }

    #[test]
    fn ppm_header_and_size() {
        let c = Canvas::new(3, 2, GREEN);
        let b = c.to_ppm();
        assert!(b.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(b.len(), 11 + 18);
    }

    #[test]
    fn heatmap_scales_to_white() {
        let c = heatmap(2, 1, &[1.0, 4.0], 2).unwrap();
        assert_eq!((c.width, c.height), (4, 2));
        assert_eq!(c.get(3, 1), WHITE);
        assert_eq!(c.get(0, 0), [64, 64, 64]);
        assert!(heatmap(2, 2, &[0.0], 1).is_err());
    }
}
