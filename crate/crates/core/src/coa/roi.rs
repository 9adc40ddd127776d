//! RoIAlign on a token lattice.
//!
//! Conventions: token `(i, j)` sits at continuous coordinate `(x = j, y = i)`
//! (no half-pixel offset), each output bin averages 2×2 bilinear samples at
//! its quarter points, samples past the last row/column clamp to it.

use crate::data_model::GridBox;
use crate::error::{Error, Result};

pub const SAMPLING_RATIO: usize = 2;

/// Interpolation corners of `(x, y)`: `(y0, y1, ly, x0, x1, lx)`, or `None`
/// for points outside `[-1, w] × [-1, h]` (which read zero).
fn corners(h: usize, w: usize, x: f64, y: f64) -> Option<(usize, usize, f64, usize, usize, f64)> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let axis = |v: f64, n: usize| -> (usize, usize, f64) {
        let v = v.max(0.0);
        let lo = v.floor() as usize;
        if lo >= n - 1 {
            (n - 1, n - 1, 0.0)
        } else {
            (lo, lo + 1, v - lo as f64)
        }
    };
    let (y0, y1, ly) = axis(y, h);
    let (x0, x1, lx) = axis(x, w);
    Some((y0, y1, ly, x0, x1, lx))
}

/// Bilinear weights of the point `(x, y)` on an `h × w` lattice as
/// `(cell index, weight)` pairs.
pub fn bilinear_weights(h: usize, w: usize, x: f64, y: f64) -> Vec<(usize, f64)> {
    let Some((y0, y1, ly, x0, x1, lx)) = corners(h, w, x, y) else {
        return Vec::new();
    };
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    vec![(y0 * w + x0, hy * hx), (y0 * w + x1, hy * lx), (y1 * w + x0, ly * hx), (y1 * w + x1, ly * lx)]
}

/// Sample points of output bin `(by, bx)`.
pub fn bin_samples(b: &GridBox, out_res: usize, by: usize, bx: usize) -> Vec<(f64, f64)> {
    let bh = (b.y2 - b.y1) / out_res as f64;
    let bw = (b.x2 - b.x1) / out_res as f64;
    let r = SAMPLING_RATIO as f64;
    let mut pts = Vec::with_capacity(SAMPLING_RATIO * SAMPLING_RATIO);
    for iy in 0..SAMPLING_RATIO {
        let y = b.y1 + by as f64 * bh + (iy as f64 + 0.5) * bh / r;
        for ix in 0..SAMPLING_RATIO {
            let x = b.x1 + bx as f64 * bw + (ix as f64 + 0.5) * bw / r;
            pts.push((x, y));
        }
    }
    pts
}

/// Dense `out_res² × (h·w)` matrix `P` with `roi = P · grid`.
///
/// RoIAlign is linear in the grid values, so the differentiable path is a
/// matrix product against this constant.
pub fn roi_matrix(h: usize, w: usize, b: &GridBox, out_res: usize) -> Result<Vec<f64>> {
    if !(b.x1 < b.x2 && b.y1 < b.y2) {
        return Err(Error::DegenerateBox { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 });
    }
    if out_res == 0 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!("out_res {out_res} on {h}x{w} grid")));
    }
    let n_samples = (SAMPLING_RATIO * SAMPLING_RATIO) as f64;
    let mut m = vec![0.0; out_res * out_res * h * w];
    for by in 0..out_res {
        for bx in 0..out_res {
            let row = &mut m[(by * out_res + bx) * h * w..][..h * w];
            for (x, y) in bin_samples(b, out_res, by, bx) {
                for (cell, wt) in bilinear_weights(h, w, x, y) {
                    row[cell] += wt / n_samples;
                }
            }
        }
    }
    Ok(m)
}

/// RoIAlign of one `h × w × d` slice (row-major cells, `d` contiguous).
/// Returns `out_res × out_res × d`.
///
/// Samples are interpolated in `a + (b - a)·t` form, so constant regions are
/// reproduced exactly; [`roi_matrix`] agrees to rounding.
pub fn roi_align(grid: &[f64], h: usize, w: usize, d: usize, b: &GridBox, out_res: usize) -> Result<Vec<f64>> {
    if grid.len() != h * w * d {
        return Err(Error::ShapeMismatch(format!("grid has {} values, expected {h}x{w}x{d}", grid.len())));
    }
    if !(b.x1 < b.x2 && b.y1 < b.y2) {
        return Err(Error::DegenerateBox { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 });
    }
    if out_res == 0 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!("out_res {out_res} on {h}x{w} grid")));
    }
    let cell = |y: usize, x: usize| &grid[(y * w + x) * d..(y * w + x + 1) * d];
    let n_samples = (SAMPLING_RATIO * SAMPLING_RATIO) as f64;
    let mut out = vec![0.0; out_res * out_res * d];
    for by in 0..out_res {
        for bx in 0..out_res {
            let acc = &mut out[(by * out_res + bx) * d..][..d];
            for (x, y) in bin_samples(b, out_res, by, bx) {
                let Some((y0, y1, ly, x0, x1, lx)) = corners(h, w, x, y) else {
                    continue;
                };
                let (a, b_, c, e) = (cell(y0, x0), cell(y0, x1), cell(y1, x0), cell(y1, x1));
                for k in 0..d {
                    let top = a[k] + (b_[k] - a[k]) * lx;
                    let bot = c[k] + (e[k] - c[k]) * lx;
                    acc[k] += top + (bot - top) * ly;
                }
            }
            for v in acc.iter_mut() {
                *v /= n_samples;
            }
        }
    }
    Ok(out)
}
