//! Average pooling of pixel grids down to the patch grid.

use super::PixelGrid;
use crate::error::{Error, Result};

/// Edge-replicates `grid` up to the next multiple of `grid_n` in each
/// dimension. Keeps every patch cell equal-area without discarding border
/// evidence.
pub(crate) fn pad_to_divisible(grid: &PixelGrid, grid_n: usize) -> PixelGrid {
    let h = grid.h.div_ceil(grid_n) * grid_n;
    let w = grid.w.div_ceil(grid_n) * grid_n;
    if h == grid.h && w == grid.w {
        return grid.clone();
    }
    let mut out = PixelGrid::zeros(h, w);
    for r in 0..h {
        let sr = r.min(grid.h - 1);
        for c in 0..w {
            let sc = c.min(grid.w - 1);
            out.set(r, c, grid.get(sr, sc));
        }
    }
    out
}

/// Pools an anomaly map to one mean value per patch cell, row-major,
/// returning a vector of length `grid_n²`.
pub fn pool_anomaly_map(map: &PixelGrid, grid_n: usize) -> Result<Vec<f64>> {
    if map.h == 0 || map.w == 0 || map.data.is_empty() {
        return Err(Error::invalid_argument("empty anomaly map"));
    }
    if grid_n == 0 {
        return Err(Error::invalid_argument("grid_n must be positive"));
    }
    let padded = pad_to_divisible(map, grid_n);
    let cell_h = padded.h / grid_n;
    let cell_w = padded.w / grid_n;
    let mut out = Vec::with_capacity(grid_n * grid_n);
    for pr in 0..grid_n {
        for pc in 0..grid_n {
            let mut sum = 0.0;
            for r in pr * cell_h..(pr + 1) * cell_h {
                for c in pc * cell_w..(pc + 1) * cell_w {
                    sum += padded.get(r, c);
                }
            }
            out.push(sum / (cell_h * cell_w) as f64);
        }
    }
    Ok(out)
}
