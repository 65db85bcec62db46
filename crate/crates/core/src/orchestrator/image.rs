//! Stitched density rasters, their encodings and the inter-cell continuity
//! metric.
//!
//! Pixels are stored row-major with row 0 at the bottom (y up). Both
//! encodings write the top row first. Masked cells hold NaN.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::grid::CartesianGrid;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("no raster for active cell {0}")]
    MissingCell(usize),
    #[error("raster of cell {cell} has {got} pixels, expected {expected}")]
    CellSize { cell: usize, got: usize, expected: usize },
    #[error("malformed CSV raster: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighResImage {
    pub cells_x: usize,
    pub cells_y: usize,
    /// Pixels per cell side.
    pub n: usize,
    pub data: Vec<f64>,
}

impl HighResImage {
    pub fn width(&self) -> usize {
        self.cells_x * self.n
    }

    pub fn height(&self) -> usize {
        self.cells_y * self.n
    }

    pub fn get(&self, px: usize, py: usize) -> f64 {
        self.data[py * self.width() + px]
    }

    /// Coarse cell `(ix, iy)` owning pixel `(px, py)`.
    pub fn cell_of(&self, px: usize, py: usize) -> (usize, usize) {
        (px / self.n, py / self.n)
    }

    /// Pixels of one cell, indexed `[ix * n + iy]` like fine element ids.
    pub fn cell_pixels(&self, cx: usize, cy: usize) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for ix in 0..n {
            for iy in 0..n {
                out[ix * n + iy] = self.get(cx * n + ix, cy * n + iy);
            }
        }
        out
    }

    /// Mean over unmasked pixels.
    pub fn mean(&self) -> f64 {
        let (s, c) = self.data.iter().filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        if c == 0 {
            f64::NAN
        } else {
            s / c as f64
        }
    }

    /// One pixel per coarse cell.
    pub fn coarse(grid: &CartesianGrid, rho: &[f64]) -> Self {
        let mut data = vec![f64::NAN; grid.nx() * grid.ny()];
        for e in grid.active_elements() {
            let (ix, iy) = grid.element_coords(e);
            data[iy * grid.nx() + ix] = rho[e];
        }
        HighResImage { cells_x: grid.nx(), cells_y: grid.ny(), n: 1, data }
    }

    /// Horizontal grayscale bar from 0 (left) to 1 (right).
    pub fn legend(width: usize, height: usize) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for _ in 0..height {
            for px in 0..width {
                data.push(if width > 1 { px as f64 / (width - 1) as f64 } else { 1.0 });
            }
        }
        HighResImage { cells_x: width, cells_y: height, n: 1, data }
    }
}

/// Place each cell raster (`rho[ix * n + iy]`) at its coarse position.
pub fn stitch(grid: &CartesianGrid, cells: &BTreeMap<usize, Vec<f64>>, n: usize) -> Result<HighResImage, ImageError> {
    let width = grid.nx() * n;
    let mut data = vec![f64::NAN; width * grid.ny() * n];
    for e in grid.active_elements() {
        let rho = cells.get(&e).ok_or(ImageError::MissingCell(e))?;
        if rho.len() != n * n {
            return Err(ImageError::CellSize { cell: e, got: rho.len(), expected: n * n });
        }
        let (cx, cy) = grid.element_coords(e);
        for ix in 0..n {
            for iy in 0..n {
                data[(cy * n + iy) * width + cx * n + ix] = rho[ix * n + iy];
            }
        }
    }
    Ok(HighResImage { cells_x: grid.nx(), cells_y: grid.ny(), n, data })
}

/// Single cell raster (`rho[ix * n + iy]`) as an image.
pub fn cell_image(rho: &[f64], n: usize) -> HighResImage {
    let mut data = vec![0.0; n * n];
    for ix in 0..n {
        for iy in 0..n {
            data[iy * n + ix] = rho[ix * n + iy];
        }
    }
    HighResImage { cells_x: 1, cells_y: 1, n, data }
}

/// Gray value of a density: 1 → 0 (black), 0 → 255 (white); masked → 255.
pub fn gray(rho: f64) -> u8 {
    if rho.is_nan() {
        255
    } else {
        (255.0 * (1.0 - rho.clamp(0.0, 1.0))).round() as u8
    }
}

/// Binary 8-bit portable graymap.
pub fn write_pgm(img: &HighResImage, mut w: impl Write) -> io::Result<()> {
    let (width, height) = (img.width(), img.height());
    write!(w, "P5\n{width} {height}\n255\n")?;
    let mut row = vec![0u8; width];
    for py in (0..height).rev() {
        for (px, b) in row.iter_mut().enumerate() {
            *b = gray(img.get(px, py));
        }
        w.write_all(&row)?;
    }
    Ok(())
}

/// Comma-separated densities, top row first, `nan` for masked pixels.
pub fn write_csv(img: &HighResImage, mut w: impl Write) -> io::Result<()> {
    let width = img.width();
    for py in (0..img.height()).rev() {
        let mut line = String::with_capacity(width * 8);
        for px in 0..width {
            if px > 0 {
                line.push(',');
            }
            let v = img.get(px, py);
            if v.is_nan() {
                line.push_str("nan");
            } else {
                line.push_str(&v.to_string());
            }
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Inverse of [`write_csv`] for a raster with `n` pixels per cell.
pub fn read_csv(text: &str, n: usize) -> Result<HighResImage, ImageError> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|f| match f.trim() {
                    "nan" => Ok(f64::NAN),
                    s => s.parse::<f64>().map_err(|e| ImageError::Csv(format!("`{s}`: {e}"))),
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if n == 0 || width % n != 0 || height % n != 0 || rows.iter().any(|r| r.len() != width) {
        return Err(ImageError::Csv(format!("{width}x{height} raster does not tile into {n}-pixel cells")));
    }
    let data = rows.into_iter().rev().flatten().collect();
    Ok(HighResImage { cells_x: width / n, cells_y: height / n, n, data })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryMismatch {
    /// Cell ids `ix * cells_y + iy` on either side.
    pub cells: [usize; 2],
    pub vertical: bool,
    pub mean_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityReport {
    pub boundaries: Vec<BoundaryMismatch>,
    pub mean: f64,
    pub max: f64,
}

/// Mean `|Δρ|` between the facing pixel columns/rows of every interior cell
/// boundary shared by two unmasked cells.
pub fn continuity_metric(img: &HighResImage) -> ContinuityReport {
    let n = img.n;
    let id = |cx: usize, cy: usize| cx * img.cells_y + cy;
    let masked = |cx: usize, cy: usize| img.get(cx * n, cy * n).is_nan();
    let mut boundaries = Vec::new();
    for cx in 0..img.cells_x {
        for cy in 0..img.cells_y {
            if masked(cx, cy) {
                continue;
            }
            if cx + 1 < img.cells_x && !masked(cx + 1, cy) {
                let x = cx * n + n - 1;
                let s: f64 = (0..n).map(|k| (img.get(x, cy * n + k) - img.get(x + 1, cy * n + k)).abs()).sum();
                boundaries.push(BoundaryMismatch { cells: [id(cx, cy), id(cx + 1, cy)], vertical: true, mean_abs_diff: s / n as f64 });
            }
            if cy + 1 < img.cells_y && !masked(cx, cy + 1) {
                let y = cy * n + n - 1;
                let s: f64 = (0..n).map(|k| (img.get(cx * n + k, y) - img.get(cx * n + k, y + 1)).abs()).sum();
                boundaries.push(BoundaryMismatch { cells: [id(cx, cy), id(cx, cy + 1)], vertical: false, mean_abs_diff: s / n as f64 });
            }
        }
    }
    let max = boundaries.iter().map(|b| b.mean_abs_diff).fold(0.0, f64::max);
    let mean = if boundaries.is_empty() {
        0.0
    } else {
        boundaries.iter().map(|b| b.mean_abs_diff).sum::<f64>() / boundaries.len() as f64
    };
    ContinuityReport { boundaries, mean, max }
}
