//! A minimal RGB raster with binary PPM output, line plots and heat maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// Out-of-bounds writes are ignored.
    pub fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let x = x0 + (x1 - x0) * s / steps;
            let y = y0 + (y1 - y0) * s / steps;
            self.set(x, y, c);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

/// Plots each series against `xs` on shared axes scaled to the data range.
pub fn line_plot(xs: &[f64], series: &[&[f64]], width: usize, height: usize) -> Result<Image> {
    if xs.is_empty() || series.iter().any(|s| s.len() != xs.len()) {
        return Err(Error::Input("every series needs one value per x".into()));
    }
    let margin = 10i64;
    let mut img = Image::new(width, height, [255, 255, 255]);
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let span = |v: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = v
            .filter(|x| x.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        if lo < hi {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    };
    let (x_lo, x_hi) = span(&mut xs.iter().copied());
    let (y_lo, y_hi) = span(&mut series.iter().flat_map(|s| s.iter().copied()));
    let px = |x: f64| margin + ((x - x_lo) / (x_hi - x_lo) * w as f64).round() as i64;
    let py = |y: f64| margin + h - ((y - y_lo) / (y_hi - y_lo) * h as f64).round() as i64;
    let axis = [0, 0, 0];
    img.line((margin, margin + h), (margin + w, margin + h), axis);
    img.line((margin, margin), (margin, margin + h), axis);
    for (k, ys) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let points: Vec<(i64, i64)> = xs
            .iter()
            .zip(ys.iter())
            .filter(|(_, y)| y.is_finite())
            .map(|(&x, &y)| (px(x), py(y)))
            .collect();
        for pair in points.windows(2) {
            img.line(pair[0], pair[1], c);
        }
        for &(x, y) in &points {
            for dx in -2..=2 {
                for dy in -2..=2 {
                    img.set(x + dx, y + dy, c);
                }
            }
        }
    }
    Ok(img)
}

/// Row-major `rows × cols` grid as blocks of `cell` pixels, dark for low
/// values and bright for high. A constant grid renders in a single colour.
pub fn heat_map(values: &[f64], rows: usize, cols: usize, cell: usize) -> Result<Image> {
    if values.len() != rows * cols {
        return Err(Error::Input(format!("{} values for a {rows}x{cols} grid", values.len())));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut img = Image::new(cols * cell, rows * cell, [0, 0, 0]);
    for r in 0..rows {
        for c in 0..cols {
            let v = values[r * cols + c];
            let u = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let shade = [(255.0 * u) as u8, (80.0 * u) as u8, (255.0 * (1.0 - u)) as u8];
            for y in 0..cell {
                for x in 0..cell {
                    img.set((c * cell + x) as i64, (r * cell + y) as i64, shade);
                }
            }
        }
    }
    Ok(img)
}
