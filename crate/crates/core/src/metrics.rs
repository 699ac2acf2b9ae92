//! Image and RF quality metrics.

use crate::acquisition::{RFDataCube, TransducerGeometry, TransmitScheme};
use crate::beamform::{beamform_rf, compound_magnitude, log_compress, Image, Method, PipelineSettings, PixelGrid};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Boolean mask over a pixel grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    pub grid: PixelGrid,
    pub mask: Vec<bool>,
}

impl RegionMask {
    pub fn new(grid: PixelGrid, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!("mask has {} pixels, grid {}", mask.len(), grid.len())));
        }
        if !mask.iter().any(|m| *m) {
            return Err(Error::InvalidArgument("region is empty".into()));
        }
        Ok(Self { grid, mask })
    }

    /// Pixels with `r_inner <= |p - center| <= r_outer`.
    pub fn annulus(grid: PixelGrid, center: [f64; 2], r_inner: f64, r_outer: f64) -> Result<Self> {
        let mask = (0..grid.len())
            .map(|i| {
                let p = grid.position_of(i);
                let d = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
                d >= r_inner && d <= r_outer
            })
            .collect();
        Self::new(grid, mask)
    }

    pub fn disk(grid: PixelGrid, center: [f64; 2], radius: f64) -> Result<Self> {
        Self::annulus(grid, center, 0.0, radius)
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Number of pixels in both regions.
    pub fn overlap(&self, other: &RegionMask) -> usize {
        self.mask.iter().zip(&other.mask).filter(|(a, b)| **a && **b).count()
    }
}

/// gCNR between two samples: one minus the overlap of their histograms over
/// the common range. The overlap is accumulated in integers, so identical
/// samples give exactly 0 and separated ones exactly 1.
pub fn gcnr_values(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("gCNR needs two non-empty samples".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("gCNR needs at least one bin".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("gCNR input contains NaN".into()));
    }
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    let bin = |v: f64| -> usize {
        if hi > lo {
            (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
        } else {
            0
        }
    };
    let mut ha = vec![0u64; bins];
    let mut hb = vec![0u64; bins];
    for &v in a {
        ha[bin(v)] += 1;
    }
    for &v in b {
        hb[bin(v)] += 1;
    }
    let (na, nb) = (a.len() as u128, b.len() as u128);
    let overlap: u128 = ha.iter().zip(&hb).map(|(&x, &y)| (x as u128 * nb).min(y as u128 * na)).sum();
    let total = na * nb;
    Ok((total - overlap) as f64 / total as f64)
}

/// gCNR between two disjoint regions of `image`.
pub fn gcnr(image: &Image, region_a: &RegionMask, region_b: &RegionMask, bins: usize) -> Result<f64> {
    for r in [region_a, region_b] {
        if r.mask.len() != image.data.len() {
            return Err(Error::ShapeMismatch("region does not match the image".into()));
        }
    }
    let shared = region_a.overlap(region_b);
    if shared > 0 {
        return Err(Error::OverlappingRegions(shared));
    }
    let pick = |r: &RegionMask| -> Vec<f64> {
        image.data.iter().zip(&r.mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect()
    };
    gcnr_values(&pick(region_a), &pick(region_b), bins)
}

fn check_shapes(a: &RFDataCube, b: &RFDataCube) -> Result<()> {
    if (a.n_tx, a.n_ft, a.n_ch) != (b.n_tx, b.n_ft, b.n_ch) {
        return Err(Error::ShapeMismatch(format!(
            "cubes are {}x{}x{} and {}x{}x{}",
            a.n_tx, a.n_ft, a.n_ch, b.n_tx, b.n_ft, b.n_ch
        )));
    }
    Ok(())
}

/// Mean squared difference over the whole cube.
pub fn rf_mse(observed: &RFDataCube, predicted: &RFDataCube) -> Result<f64> {
    check_shapes(observed, predicted)?;
    if observed.samples.is_empty() {
        return Err(Error::InvalidArgument("empty cube".into()));
    }
    let sse: f64 = observed.samples.iter().zip(&predicted.samples).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / observed.samples.len() as f64)
}

/// Compounded DAS magnitude of `rf`, not normalized.
pub fn das_magnitude(
    rf: &RFDataCube,
    geometry: &TransducerGeometry,
    scheme: &TransmitScheme,
    c: f64,
    grid: &PixelGrid,
    settings: &PipelineSettings,
) -> Result<Vec<f64>> {
    let images = beamform_rf(rf, geometry, scheme, c, grid, &Method::Das, settings)?;
    Ok(compound_magnitude(&images, settings.incoherent))
}

/// Log-compressed DAS image of `observed - predicted`. A perfect fit has no
/// residual and reports [`Error::EmptyImage`].
pub fn residual_image(
    observed: &RFDataCube,
    predicted: &RFDataCube,
    geometry: &TransducerGeometry,
    scheme: &TransmitScheme,
    c: f64,
    grid: &PixelGrid,
    settings: &PipelineSettings,
) -> Result<Image> {
    check_shapes(observed, predicted)?;
    let mag = das_magnitude(&observed.difference(predicted), geometry, scheme, c, grid, settings)?;
    log_compress(&mag, grid, settings.dynamic_range_db)
}

/// Peak of the residual DAS image relative to the peak of the observed one, in dB.
pub fn residual_peak_db(
    observed: &RFDataCube,
    predicted: &RFDataCube,
    geometry: &TransducerGeometry,
    scheme: &TransmitScheme,
    c: f64,
    grid: &PixelGrid,
    settings: &PipelineSettings,
) -> Result<f64> {
    check_shapes(observed, predicted)?;
    let peak = |v: Vec<f64>| v.into_iter().fold(0.0f64, f64::max);
    let obs = peak(das_magnitude(observed, geometry, scheme, c, grid, settings)?);
    if !(obs > 0.0) {
        return Err(Error::EmptyImage);
    }
    let res = peak(das_magnitude(&observed.difference(predicted), geometry, scheme, c, grid, settings)?);
    Ok(20.0 * (res / obs).log10())
}
