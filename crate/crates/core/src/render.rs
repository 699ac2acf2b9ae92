//! Gaussian kernel rendering of an off-grid scatterer field.

use crate::acquisition::ScattererField;
use crate::beamform::{log_compress, Image, PixelGrid};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Kernels are truncated at this many radii, where they fall below e^-64.
const CUTOFF: f64 = 8.0;

/// `I(p) = sum_i w_i exp(-|p - p_i|^2 / r^2)` with `w_i = a_i` when
/// `weight_by_amplitude` is set and 1 otherwise.
pub fn kde_image(field: &ScattererField, grid: &PixelGrid, r: f64, weight_by_amplitude: bool) -> Result<Image> {
    if !(r > 0.0) {
        return Err(Error::InvalidArgument("kernel radius must be positive".into()));
    }
    let reach = CUTOFF * r;
    let mut order: Vec<usize> = (0..field.len()).collect();
    order.sort_by(|&i, &j| field.positions[i][1].total_cmp(&field.positions[j][1]).then(i.cmp(&j)));
    let zs: Vec<f64> = order.iter().map(|&i| field.positions[i][1]).collect();
    let inv_r2 = 1.0 / (r * r);
    let rows: Vec<Vec<f64>> = (0..grid.nz)
        .into_par_iter()
        .map(|iz| {
            let z = grid.origin[1] + iz as f64 * grid.spacing[1];
            let lo = zs.partition_point(|v| *v < z - reach);
            let hi = zs.partition_point(|v| *v <= z + reach);
            let mut row = vec![0.0; grid.nx];
            for &s in &order[lo..hi] {
                let [px, pz] = field.positions[s];
                let w = if weight_by_amplitude { field.amplitudes[s] } else { 1.0 };
                let dz2 = (pz - z) * (pz - z);
                let first = ((px - reach - grid.origin[0]) / grid.spacing[0]).ceil().max(0.0) as usize;
                let last = ((px + reach - grid.origin[0]) / grid.spacing[0]).floor();
                if last < 0.0 {
                    continue;
                }
                let last = (last as usize).min(grid.nx - 1);
                for (ix, out) in row.iter_mut().enumerate().take(last + 1).skip(first) {
                    let dx = grid.origin[0] + ix as f64 * grid.spacing[0] - px;
                    *out += w * (-(dx * dx + dz2) * inv_r2).exp();
                }
            }
            row
        })
        .collect();
    Ok(Image { grid: *grid, data: rows.concat() })
}

/// KDE image log-compressed like the beamformed images.
pub fn kde_image_db(field: &ScattererField, grid: &PixelGrid, r: f64, weight_by_amplitude: bool, dynamic_range_db: f64) -> Result<Image> {
    let img = kde_image(field, grid, r, weight_by_amplitude)?;
    log_compress(&img.data, grid, dynamic_range_db)
}
