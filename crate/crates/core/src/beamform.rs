//! IQ demodulation, time-of-flight correction and the DAS, MV and DMAS
//! beamformers.

use crate::acquisition::{RFDataCube, TransducerGeometry, TransmitScheme, Waveform};
use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Complex baseband samples, laid out like [`RFDataCube`].
#[derive(Debug, Clone, PartialEq)]
pub struct IQCube {
    pub n_tx: usize,
    pub n_ft: usize,
    pub n_ch: usize,
    pub samples: Vec<Complex64>,
    pub carrier: f64,
    pub sampling_frequency: f64,
    /// Time of fast-time sample 0.
    pub initial_time: f64,
}

impl IQCube {
    pub fn index(&self, tx: usize, ft: usize, ch: usize) -> usize {
        (tx * self.n_ft + ft) * self.n_ch + ch
    }

    pub fn get(&self, tx: usize, ft: usize, ch: usize) -> Complex64 {
        self.samples[self.index(tx, ft, ch)]
    }
}

/// TOF-corrected channel samples for one pixel and transmit.
#[derive(Debug, Clone, PartialEq)]
pub struct ApertureVector {
    pub u: Vec<Complex64>,
}

/// Regular pixel grid; pixel `(ix, iz)` sits at `origin + (ix, iz) * spacing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelGrid {
    pub nx: usize,
    pub nz: usize,
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
}

impl PixelGrid {
    pub fn new(nx: usize, nz: usize, origin: [f64; 2], spacing: [f64; 2]) -> Result<Self> {
        if nx == 0 || nz == 0 {
            return Err(Error::InvalidArgument("pixel grid must be non-empty".into()));
        }
        if !(spacing[0] > 0.0 && spacing[1] > 0.0) {
            return Err(Error::InvalidArgument("pixel spacing must be positive".into()));
        }
        Ok(Self { nx, nz, origin, spacing })
    }

    /// Grid spanning `[x_min, x_max] x [z_min, z_max]` with the given spacing.
    pub fn covering(x_min: f64, x_max: f64, z_min: f64, z_max: f64, dx: f64, dz: f64) -> Result<Self> {
        if !(x_max >= x_min && z_max >= z_min) {
            return Err(Error::InvalidArgument("empty grid extent".into()));
        }
        let nx = ((x_max - x_min) / dx).floor() as usize + 1;
        let nz = ((z_max - z_min) / dz).floor() as usize + 1;
        Self::new(nx, nz, [x_min, z_min], [dx, dz])
    }

    pub fn len(&self) -> usize {
        self.nx * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major index, depth-major: `iz * nx + ix`.
    pub fn index(&self, ix: usize, iz: usize) -> usize {
        iz * self.nx + ix
    }

    pub fn position(&self, ix: usize, iz: usize) -> [f64; 2] {
        [self.origin[0] + ix as f64 * self.spacing[0], self.origin[1] + iz as f64 * self.spacing[1]]
    }

    pub fn position_of(&self, i: usize) -> [f64; 2] {
        self.position(i % self.nx, i / self.nx)
    }

    /// Pixel nearest to `p`, clamped to the grid.
    pub fn nearest(&self, p: [f64; 2]) -> (usize, usize) {
        let f = |v: f64, o: f64, d: f64, n: usize| (((v - o) / d).round().max(0.0) as usize).min(n - 1);
        (f(p[0], self.origin[0], self.spacing[0], self.nx), f(p[1], self.origin[1], self.spacing[1], self.nz))
    }
}

/// Real image on a [`PixelGrid`], indexed like the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub grid: PixelGrid,
    pub data: Vec<f64>,
}

impl Image {
    pub fn get(&self, ix: usize, iz: usize) -> f64 {
        self.data[self.grid.index(ix, iz)]
    }

    /// Index and value of the largest pixel.
    pub fn argmax(&self) -> (usize, f64) {
        self.data
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
    }
}

/// Butterworth magnitude response.
pub fn butterworth_gain(f: f64, cutoff: f64, order: u32) -> f64 {
    1.0 / (1.0 + (f / cutoff).powi(2 * order as i32)).sqrt()
}

/// Analytic signal by frequency-domain Hilbert transform, shifted down by
/// `f_c` and low-pass filtered with a zero-phase Butterworth response of the
/// given order and cutoff `bandwidth`.
pub fn iq_demodulate(rf: &RFDataCube, f_c: f64, f_s: f64, initial_time: f64, filter_order: u32, bandwidth: f64) -> Result<IQCube> {
    if !(f_s > 2.0 * f_c) {
        return Err(Error::InvalidArgument("sampling frequency must exceed twice the carrier".into()));
    }
    if !(bandwidth > 0.0) || filter_order == 0 {
        return Err(Error::InvalidArgument("filter bandwidth and order must be positive".into()));
    }
    let (n_tx, n_ft, n_ch) = (rf.n_tx, rf.n_ft, rf.n_ch);
    let n = (2 * n_ft).next_power_of_two().max(2);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    // combined analytic mask and baseband filter, per bin
    let gain: Vec<f64> = (0..n)
        .map(|k| {
            let analytic = if k == 0 || k == n / 2 {
                1.0
            } else if k < n / 2 {
                2.0
            } else {
                0.0
            };
            let f = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 } * f_s / n as f64;
            analytic * butterworth_gain(f - f_c, bandwidth, filter_order)
        })
        .collect();
    let traces: Vec<Vec<Complex64>> = (0..n_tx * n_ch)
        .into_par_iter()
        .map(|trace| {
            let (tx, ch) = (trace / n_ch, trace % n_ch);
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            for ft in 0..n_ft {
                buf[ft] = Complex64::new(rf.get(tx, ft, ch), 0.0);
            }
            fwd.process(&mut buf);
            for (b, g) in buf.iter_mut().zip(&gain) {
                *b *= g / n as f64;
            }
            inv.process(&mut buf);
            (0..n_ft)
                .map(|ft| {
                    let t = initial_time + ft as f64 / f_s;
                    buf[ft] * Complex64::from_polar(1.0, -2.0 * PI * f_c * t)
                })
                .collect()
        })
        .collect();
    let mut samples = vec![Complex64::new(0.0, 0.0); n_tx * n_ft * n_ch];
    for (trace, v) in traces.into_iter().enumerate() {
        let (tx, ch) = (trace / n_ch, trace % n_ch);
        for (ft, s) in v.into_iter().enumerate() {
            samples[(tx * n_ft + ft) * n_ch + ch] = s;
        }
    }
    Ok(IQCube { n_tx, n_ft, n_ch, samples, carrier: f_c, sampling_frequency: f_s, initial_time })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Rectangular,
    Hann,
}

impl std::str::FromStr for Window {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangular" | "rect" => Ok(Window::Rectangular),
            "hann" => Ok(Window::Hann),
            _ => Err(Error::Config(format!("unknown apodization window '{s}'"))),
        }
    }
}

/// Receive-side settings of the TOF correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TofSettings {
    /// Acceptance cone: element `e` is used iff `|x_e - x_p| <= z_p / (2 f#)`.
    /// Zero disables the mask.
    pub f_number: f64,
    pub window: Window,
    /// Extra two-way delay of the lens.
    pub lens_delay: f64,
}

impl Default for TofSettings {
    fn default() -> Self {
        Self { f_number: 0.0, window: Window::Rectangular, lens_delay: 0.0 }
    }
}

/// Transmit delay to `p`: earliest arrival over the firing elements.
pub fn transmit_delay(p: [f64; 2], geometry: &TransducerGeometry, scheme: &TransmitScheme, tx: usize, c: f64) -> f64 {
    scheme.apodization[tx]
        .iter()
        .enumerate()
        .filter(|(_, w)| **w != 0.0)
        .map(|(e, _)| scheme.delays[tx][e] + distance(geometry.element_positions[e], p) / c)
        .fold(f64::INFINITY, f64::min)
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Receive weights at pixel `p`; zero outside the acceptance cone.
pub fn receive_weights(p: [f64; 2], geometry: &TransducerGeometry, settings: &TofSettings) -> Vec<f64> {
    let xs: Vec<f64> = geometry.element_positions.iter().map(|e| e[0]).collect();
    let half = if settings.f_number > 0.0 {
        p[1] / (2.0 * settings.f_number)
    } else {
        xs.iter().map(|x| (x - p[0]).abs()).fold(0.0, f64::max)
    };
    xs.iter()
        .map(|x| {
            let d = (x - p[0]).abs();
            if settings.f_number > 0.0 && d > half {
                return 0.0;
            }
            match settings.window {
                Window::Rectangular => 1.0,
                Window::Hann => {
                    if half > 0.0 {
                        0.5 * (1.0 + (PI * d / half).cos())
                    } else {
                        1.0
                    }
                }
            }
        })
        .collect()
}

/// Delays every channel to pixel `p`, interpolates linearly and restores the
/// carrier phase. Channels whose delay falls outside the recording are 0.
pub fn tof_correct(
    iq: &IQCube,
    p: [f64; 2],
    geometry: &TransducerGeometry,
    scheme: &TransmitScheme,
    tx: usize,
    c: f64,
    settings: &TofSettings,
) -> ApertureVector {
    let weights = receive_weights(p, geometry, settings);
    let t_tx = transmit_delay(p, geometry, scheme, tx, c) + settings.lens_delay;
    let u = (0..iq.n_ch)
        .map(|ch| {
            let w = weights[ch];
            if w == 0.0 {
                return Complex64::new(0.0, 0.0);
            }
            let tau = t_tx + distance(geometry.element_positions[ch], p) / c;
            let s = (tau - iq.initial_time) * iq.sampling_frequency;
            if !(s >= 0.0) || s > (iq.n_ft - 1) as f64 {
                return Complex64::new(0.0, 0.0);
            }
            let k = (s.floor() as usize).min(iq.n_ft.saturating_sub(2));
            let frac = s - k as f64;
            let v = if iq.n_ft == 1 {
                iq.get(tx, 0, ch)
            } else {
                iq.get(tx, k, ch) * (1.0 - frac) + iq.get(tx, k + 1, ch) * frac
            };
            v * Complex64::from_polar(w, 2.0 * PI * iq.carrier * tau)
        })
        .collect();
    ApertureVector { u }
}

pub fn das(u: &ApertureVector) -> Complex64 {
    u.u.iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MvParams {
    /// Subaperture length `L`.
    pub subaperture: usize,
    /// Loading `delta`; `delta * tr(R) / L` is added to the diagonal.
    pub loading: f64,
    /// Replace the covariance by the identity.
    pub identity_covariance: bool,
}

impl Default for MvParams {
    fn default() -> Self {
        Self { subaperture: 16, loading: 1e-4, identity_covariance: false }
    }
}

/// Minimum-variance weights for the spatially smoothed covariance of `u`.
pub fn mv_weights(u: &ApertureVector, params: &MvParams) -> Result<Vec<Complex64>> {
    let n = u.u.len();
    let l = params.subaperture;
    if l == 0 || l > n {
        return Err(Error::InvalidArgument(format!("subaperture length {l} outside 1..={n}")));
    }
    let a = DVector::from_element(l, Complex64::new(1.0, 0.0));
    let r = if params.identity_covariance {
        DMatrix::<Complex64>::identity(l, l)
    } else {
        let m = n - l + 1;
        let mut r = DMatrix::<Complex64>::zeros(l, l);
        for s in 0..m {
            let sub = DVector::from_column_slice(&u.u[s..s + l]);
            r += &sub * sub.adjoint();
        }
        r /= Complex64::new(m as f64, 0.0);
        let load = params.loading * r.trace().re / l as f64;
        for i in 0..l {
            r[(i, i)] += load;
        }
        r
    };
    let chol = Cholesky::new(r).ok_or(Error::IllConditioned)?;
    let x = chol.solve(&a);
    let denom = a.dotc(&x);
    if !(denom.norm() > 0.0) || !denom.re.is_finite() {
        return Err(Error::IllConditioned);
    }
    Ok(x.iter().map(|v| v / denom).collect())
}

/// Minimum-variance (Capon) output, averaged over the subapertures.
pub fn mv(u: &ApertureVector, params: &MvParams) -> Result<Complex64> {
    if u.u.iter().all(|v| *v == Complex64::new(0.0, 0.0)) {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let w = mv_weights(u, params)?;
    let l = w.len();
    let m = u.u.len() - l + 1;
    let mut z = Complex64::new(0.0, 0.0);
    for s in 0..m {
        for (wi, ui) in w.iter().zip(&u.u[s..s + l]) {
            z += wi.conj() * ui;
        }
    }
    Ok(z / m as f64)
}

/// Delay-multiply-and-sum over all channel pairs.
pub fn dmas(u: &ApertureVector) -> Complex64 {
    let scaled: Vec<Complex64> = u
        .u
        .iter()
        .map(|v| {
            let m = v.norm();
            if m > 0.0 {
                v / m.sqrt()
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    let mut z = Complex64::new(0.0, 0.0);
    for n in 0..scaled.len() {
        for m in n + 1..scaled.len() {
            z += scaled[n] * scaled[m];
        }
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Das,
    Mv(MvParams),
    Dmas,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Das => "das",
            Method::Mv(_) => "mv",
            Method::Dmas => "dmas",
        }
    }
}

/// Complex image per transmit, each laid out like `grid`.
pub fn beamform_image(
    iq: &IQCube,
    grid: &PixelGrid,
    geometry: &TransducerGeometry,
    scheme: &TransmitScheme,
    c: f64,
    method: &Method,
    settings: &TofSettings,
) -> Result<Vec<Vec<Complex64>>> {
    if iq.n_tx != scheme.n_transmits() || iq.n_ch != geometry.n_channels() {
        return Err(Error::ShapeMismatch(format!(
            "IQ cube is {}x{}, scheme and geometry are {}x{}",
            iq.n_tx,
            iq.n_ch,
            scheme.n_transmits(),
            geometry.n_channels()
        )));
    }
    (0..iq.n_tx)
        .map(|tx| {
            (0..grid.len())
                .into_par_iter()
                .map(|i| {
                    let u = tof_correct(iq, grid.position_of(i), geometry, scheme, tx, c, settings);
                    match method {
                        Method::Das => Ok(das(&u)),
                        Method::Mv(p) => mv(&u, p),
                        Method::Dmas => Ok(dmas(&u)),
                    }
                })
                .collect()
        })
        .collect()
}

/// Compounds per-transmit images, takes the magnitude and log-compresses to
/// `[-dynamic_range_db, 0]` relative to the peak.
pub fn compound_and_compress(images: &[Vec<Complex64>], grid: &PixelGrid, dynamic_range_db: f64, incoherent: bool) -> Result<Image> {
    let first = images.first().ok_or(Error::EmptyImage)?;
    if images.iter().any(|im| im.len() != first.len()) || first.len() != grid.len() {
        return Err(Error::ShapeMismatch("images do not match the grid".into()));
    }
    let mag = compound_magnitude(images, incoherent);
    log_compress(&mag, grid, dynamic_range_db)
}

/// `20 log10` of a magnitude image relative to its peak, clamped below.
pub fn log_compress(mag: &[f64], grid: &PixelGrid, dynamic_range_db: f64) -> Result<Image> {
    let peak = mag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::EmptyImage);
    }
    let data = mag
        .iter()
        .map(|v| {
            let db = 20.0 * (v.abs() / peak).log10();
            db.max(-dynamic_range_db)
        })
        .collect();
    Ok(Image { grid: *grid, data })
}

/// -6 dB bandwidth of a pulse, from its zero-padded spectrum.
pub fn waveform_bandwidth(waveform: &Waveform) -> f64 {
    let n = (8 * waveform.samples.len()).next_power_of_two().max(1024);
    let mut buf: Vec<Complex64> = waveform.samples.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mag: Vec<f64> = buf[..n / 2].iter().map(|v| v.norm()).collect();
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    let above: Vec<usize> = (0..mag.len()).filter(|&k| mag[k] >= 0.5 * peak).collect();
    match (above.first(), above.last()) {
        (Some(&lo), Some(&hi)) => ((hi - lo + 1) as f64 * waveform.sample_rate / n as f64).max(waveform.sample_rate / n as f64),
        _ => 0.0,
    }
}

/// Everything needed to turn RF data into an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub tof: TofSettings,
    pub filter_order: u32,
    /// Low-pass cutoff; `None` uses the -6 dB bandwidth of the first pulse.
    pub bandwidth: Option<f64>,
    pub dynamic_range_db: f64,
    pub incoherent: bool,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self { tof: TofSettings::default(), filter_order: 5, bandwidth: None, dynamic_range_db: 60.0, incoherent: false }
    }
}

/// Demodulates `rf` and beamforms every transmit.
pub fn beamform_rf(
    rf: &RFDataCube,
    geometry: &TransducerGeometry,
    scheme: &TransmitScheme,
    c: f64,
    grid: &PixelGrid,
    method: &Method,
    settings: &PipelineSettings,
) -> Result<Vec<Vec<Complex64>>> {
    let bw = match settings.bandwidth {
        Some(b) => b,
        None => scheme.waveforms.first().map(waveform_bandwidth).ok_or_else(|| Error::InvalidArgument("scheme has no transmits".into()))?,
    };
    let iq = iq_demodulate(rf, geometry.center_frequency, geometry.sampling_frequency, scheme.initial_time, settings.filter_order, bw)?;
    beamform_image(&iq, grid, geometry, scheme, c, method, &settings.tof)
}

/// Compounded linear magnitude of per-transmit images.
pub fn compound_magnitude(images: &[Vec<Complex64>], incoherent: bool) -> Vec<f64> {
    let n = images.len() as f64;
    let len = images.first().map_or(0, |im| im.len());
    (0..len)
        .map(|i| {
            if incoherent {
                images.iter().map(|im| im[i].norm()).sum::<f64>() / n
            } else {
                (images.iter().map(|im| im[i]).sum::<Complex64>() / n).norm()
            }
        })
        .collect()
}
