//! Acquisition domain types: transducer, transmit scheme, scatterers, model
//! parameters and the RF data cube.
//!
//! Everything here is plain data. Types are immutable once built and are
//! `Sync`, so they can be shared read-only across worker threads.
//!
//! Conventions used throughout the crate:
//! - positions are `[x, z]` in meters, `z` pointing into the medium;
//! - the RF cube is stored transmit-major, `(tx * n_ft + ft) * n_ch + ch`;
//! - time `t = 0` of a transmit is when its first element fires.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Scatterer radius used by the spherical-spread attenuation term.
pub const SCATTERER_RADIUS: f64 = 1e-6;

/// Linear (or arbitrary on-axis) array of elements lying on the x-axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransducerGeometry {
    /// Element centers `[x, z]`; `z` must be zero.
    pub element_positions: Vec<[f64; 2]>,
    pub element_width_nominal: f64,
    pub center_frequency: f64,
    pub sampling_frequency: f64,
}

impl TransducerGeometry {
    /// Uniform linear array centered on `x = 0`.
    pub fn linear(
        n_elements: usize,
        pitch: f64,
        element_width: f64,
        center_frequency: f64,
        sampling_frequency: f64,
    ) -> Self {
        let half = (n_elements as f64 - 1.0) / 2.0;
        let element_positions = (0..n_elements)
            .map(|i| [(i as f64 - half) * pitch, 0.0])
            .collect();
        Self {
            element_positions,
            element_width_nominal: element_width,
            center_frequency,
            sampling_frequency,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.element_positions.len()
    }

    /// Wavelength at the center frequency for a given speed of sound.
    pub fn wavelength(&self, speed_of_sound: f64) -> f64 {
        speed_of_sound / self.center_frequency
    }
}

/// A sampled, already two-way band-pass filtered transmit pulse.
///
/// Sample `k` sits at time `start_time + k / sample_rate` relative to the
/// moment the element fires. Outside the sampled support the pulse is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub start_time: f64,
}

impl Waveform {
    /// Gaussian-modulated cosine centered on `t = 0`, truncated at ±3σ of
    /// the envelope. `fractional_bandwidth` is the -6 dB bandwidth over the
    /// center frequency.
    pub fn gaussian_pulse(center_frequency: f64, fractional_bandwidth: f64, sample_rate: f64) -> Self {
        let bw = fractional_bandwidth * center_frequency;
        // -6 dB half-width of the spectrum is bw / 2.
        let sigma = (2.0 * 2f64.ln()).sqrt() / (PI * bw);
        let half = (3.0 * sigma * sample_rate).ceil() as i64;
        let samples = (-half..=half)
            .map(|k| {
                let t = k as f64 / sample_rate;
                (-t * t / (2.0 * sigma * sigma)).exp() * (2.0 * PI * center_frequency * t).cos()
            })
            .collect();
        Self {
            samples,
            sample_rate,
            start_time: -(half as f64) / sample_rate,
        }
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + (self.samples.len() as f64 - 1.0) / self.sample_rate
    }
}

/// Transmit delays, apodization and pulses for every transmit event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmitScheme {
    /// `delays[tx][ch]`, seconds.
    pub delays: Vec<Vec<f64>>,
    /// `apodization[tx][ch]`, zero for elements that do not fire.
    pub apodization: Vec<Vec<f64>>,
    /// One pulse per transmit.
    pub waveforms: Vec<Waveform>,
    /// Time between the first firing and the first recorded sample.
    pub initial_time: f64,
    pub n_fast_time: usize,
}

impl TransmitScheme {
    /// One transmit per listed element; only that element fires.
    pub fn single_element(
        n_channels: usize,
        firing: &[usize],
        waveform: &Waveform,
        initial_time: f64,
        n_fast_time: usize,
    ) -> Self {
        let apodization = firing
            .iter()
            .map(|&e| {
                let mut row = vec![0.0; n_channels];
                row[e] = 1.0;
                row
            })
            .collect();
        Self {
            delays: vec![vec![0.0; n_channels]; firing.len()],
            apodization,
            waveforms: vec![waveform.clone(); firing.len()],
            initial_time,
            n_fast_time,
        }
    }

    /// One transmit per group; every element of a group fires simultaneously.
    pub fn element_groups(
        n_channels: usize,
        groups: &[Vec<usize>],
        waveform: &Waveform,
        initial_time: f64,
        n_fast_time: usize,
    ) -> Self {
        let apodization = groups
            .iter()
            .map(|g| {
                let mut row = vec![0.0; n_channels];
                for &e in g {
                    row[e] = 1.0;
                }
                row
            })
            .collect();
        Self {
            delays: vec![vec![0.0; n_channels]; groups.len()],
            apodization,
            waveforms: vec![waveform.clone(); groups.len()],
            initial_time,
            n_fast_time,
        }
    }

    /// Steered plane waves over the full aperture, delays zero-anchored.
    pub fn plane_waves(
        geometry: &TransducerGeometry,
        angles: &[f64],
        speed_of_sound: f64,
        waveform: &Waveform,
        initial_time: f64,
        n_fast_time: usize,
    ) -> Self {
        let n_ch = geometry.n_channels();
        let delays = angles
            .iter()
            .map(|&a| {
                let raw: Vec<f64> = geometry
                    .element_positions
                    .iter()
                    .map(|p| p[0] * a.sin() / speed_of_sound)
                    .collect();
                let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
                raw.into_iter().map(|d| d - min).collect()
            })
            .collect();
        Self {
            delays,
            apodization: vec![vec![1.0; n_ch]; angles.len()],
            waveforms: vec![waveform.clone(); angles.len()],
            initial_time,
            n_fast_time,
        }
    }

    pub fn n_transmits(&self) -> usize {
        self.delays.len()
    }

    /// Indices of elements with nonzero apodization in transmit `tx`.
    pub fn firing_elements(&self, tx: usize) -> Vec<usize> {
        self.apodization[tx]
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// The unknown image: off-grid scatterer positions and amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScattererField {
    pub positions: Vec<[f64; 2]>,
    pub amplitudes: Vec<f64>,
}

impl ScattererField {
    pub fn new(positions: Vec<[f64; 2]>, amplitudes: Vec<f64>) -> Self {
        assert_eq!(positions.len(), amplitudes.len(), "positions/amplitudes length mismatch");
        Self { positions, amplitudes }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Concatenation of two fields.
    pub fn union(&self, other: &ScattererField) -> ScattererField {
        let mut out = self.clone();
        out.positions.extend_from_slice(&other.positions);
        out.amplitudes.extend_from_slice(&other.amplitudes);
        out
    }
}

/// Free physical parameters of the measurement model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// m/s
    pub speed_of_sound: f64,
    /// dB/cm/MHz
    pub attenuation_coeff: f64,
    /// Effective element width, meters.
    pub element_width: f64,
    /// Per-channel receive gain.
    pub element_gain: Vec<f64>,
    /// Adjustment added to the scheme's initial time, seconds.
    pub initial_time_offset: f64,
    /// Intercept of the travel-time dependent low-pass cutoff.
    pub lowpass_intercept: f64,
    /// Slope of the low-pass cutoff per second of travel time.
    pub lowpass_slope: f64,
    pub scatterer_radius: f64,
}

impl ModelParams {
    /// Plausible soft-tissue parameters for a given array.
    pub fn nominal(geometry: &TransducerGeometry) -> Self {
        Self {
            speed_of_sound: 1540.0,
            attenuation_coeff: 0.5,
            element_width: 0.9 * geometry.element_width_nominal,
            element_gain: vec![0.75; geometry.n_channels()],
            initial_time_offset: 0.0,
            lowpass_intercept: 0.9,
            lowpass_slope: 1000.0,
            scatterer_radius: SCATTERER_RADIUS,
        }
    }
}

/// Recorded (or simulated) RF samples with the TGC curve that was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RFDataCube {
    pub n_tx: usize,
    pub n_ft: usize,
    pub n_ch: usize,
    pub samples: Vec<f64>,
    pub tgc_curve: Vec<f64>,
}

impl RFDataCube {
    pub fn zeros(n_tx: usize, n_ft: usize, n_ch: usize) -> Self {
        Self {
            n_tx,
            n_ft,
            n_ch,
            samples: vec![0.0; n_tx * n_ft * n_ch],
            tgc_curve: vec![1.0; n_ft],
        }
    }

    #[inline]
    pub fn index(&self, tx: usize, ft: usize, ch: usize) -> usize {
        (tx * self.n_ft + ft) * self.n_ch + ch
    }

    #[inline]
    pub fn get(&self, tx: usize, ft: usize, ch: usize) -> f64 {
        self.samples[self.index(tx, ft, ch)]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Cube of the same shape and TGC holding `self - other`.
    pub fn difference(&self, other: &RFDataCube) -> RFDataCube {
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| a - b)
            .collect();
        RFDataCube {
            samples,
            ..self.clone()
        }
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len().max(1) as f64).sqrt()
    }
}

/// Exponential TGC ramp of `gain_db` decibels over the record.
pub fn tgc_ramp(n_ft: usize, gain_db: f64) -> Vec<f64> {
    (0..n_ft)
        .map(|ft| 10f64.powf(gain_db * ft as f64 / (n_ft.max(2) - 1) as f64 / 20.0))
        .collect()
}

/// Kinds of invariant violations reported by [`validate_acquisition`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IssueKind {
    EmptyArray,
    NonFinite,
    ElementOffAxis,
    NonPositiveElementWidth,
    Undersampled,
    DelaysNotZeroAnchored,
    NegativeApodization,
    NoFiringElement,
    ShortWaveform,
    ShapeMismatch,
    NonPositiveTgc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has(&self, kind: IssueKind) -> bool {
        self.issues.iter().any(|i| i.kind == kind)
    }

    fn push(&mut self, kind: IssueKind, message: impl Into<String>) {
        self.issues.push(Issue {
            kind,
            message: message.into(),
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}", issue.message)?;
        }
        Ok(())
    }
}

/// Checks every shape and range invariant of an acquisition. Never fails;
/// an empty report means the acquisition is usable.
pub fn validate_acquisition(
    geometry: &TransducerGeometry,
    scheme: &TransmitScheme,
    data: &RFDataCube,
) -> ValidationReport {
    let mut report = validate_setup(geometry, scheme);
    let n_ch = geometry.n_channels();

    if data.n_tx != scheme.n_transmits() || data.n_ft != scheme.n_fast_time || data.n_ch != n_ch {
        report.push(
            IssueKind::ShapeMismatch,
            format!(
                "shape mismatch: data is {}x{}x{} but acquisition expects {}x{}x{}",
                data.n_tx,
                data.n_ft,
                data.n_ch,
                scheme.n_transmits(),
                scheme.n_fast_time,
                n_ch
            ),
        );
    }
    if data.samples.len() != data.n_tx * data.n_ft * data.n_ch {
        report.push(
            IssueKind::ShapeMismatch,
            format!("shape mismatch: {} samples stored for declared shape", data.samples.len()),
        );
    }
    if data.tgc_curve.len() != data.n_ft {
        report.push(
            IssueKind::ShapeMismatch,
            format!("shape mismatch: TGC curve has {} entries, expected {}", data.tgc_curve.len(), data.n_ft),
        );
    }
    if data.tgc_curve.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        report.push(IssueKind::NonPositiveTgc, "TGC curve must be positive and finite");
    }
    if data.samples.iter().any(|v| !v.is_finite()) {
        report.push(IssueKind::NonFinite, "RF samples contain non-finite values");
    }
    report
}

/// Geometry and transmit-scheme checks that do not need recorded data.
pub fn validate_setup(geometry: &TransducerGeometry, scheme: &TransmitScheme) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n_ch = geometry.n_channels();

    if n_ch == 0 {
        report.push(IssueKind::EmptyArray, "transducer has no elements");
    }
    if geometry.element_positions.iter().flatten().any(|v| !v.is_finite()) {
        report.push(IssueKind::NonFinite, "element positions must be finite");
    }
    if geometry.element_positions.iter().any(|p| p[1] != 0.0) {
        report.push(IssueKind::ElementOffAxis, "elements must lie on the x-axis (z = 0)");
    }
    if !(geometry.element_width_nominal > 0.0) {
        report.push(IssueKind::NonPositiveElementWidth, "nominal element width must be positive");
    }
    if !(geometry.sampling_frequency > 2.0 * geometry.center_frequency) || !(geometry.center_frequency > 0.0) {
        report.push(
            IssueKind::Undersampled,
            "sampling frequency must exceed twice the center frequency",
        );
    }

    let n_tx = scheme.n_transmits();
    if n_tx == 0 {
        report.push(IssueKind::EmptyArray, "transmit scheme has no transmits");
    }
    if scheme.n_fast_time == 0 {
        report.push(IssueKind::EmptyArray, "transmit scheme records no samples");
    }
    if scheme.apodization.len() != n_tx || scheme.waveforms.len() != n_tx {
        report.push(
            IssueKind::ShapeMismatch,
            format!(
                "shape mismatch: {} delay rows, {} apodization rows, {} waveforms",
                n_tx,
                scheme.apodization.len(),
                scheme.waveforms.len()
            ),
        );
    }
    for (tx, row) in scheme.delays.iter().enumerate() {
        if row.len() != n_ch {
            report.push(
                IssueKind::ShapeMismatch,
                format!("shape mismatch: delay row {tx} has {} entries, expected {n_ch}", row.len()),
            );
            continue;
        }
        if row.iter().any(|d| !d.is_finite()) {
            report.push(IssueKind::NonFinite, format!("non-finite delay in transmit {tx}"));
            continue;
        }
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        if min != 0.0 {
            report.push(
                IssueKind::DelaysNotZeroAnchored,
                format!("delays not zero-anchored in transmit {tx} (min {min:e} s)"),
            );
        }
    }
    for (tx, row) in scheme.apodization.iter().enumerate() {
        if row.len() != n_ch {
            report.push(
                IssueKind::ShapeMismatch,
                format!("shape mismatch: apodization row {tx} has {} entries, expected {n_ch}", row.len()),
            );
            continue;
        }
        if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            report.push(IssueKind::NegativeApodization, format!("negative apodization in transmit {tx}"));
        }
        if row.iter().all(|&w| w == 0.0) {
            report.push(IssueKind::NoFiringElement, format!("no element fires in transmit {tx}"));
        }
    }
    for (tx, w) in scheme.waveforms.iter().enumerate() {
        if w.samples.len() < 2 || !(w.sample_rate > 0.0) {
            report.push(IssueKind::ShortWaveform, format!("waveform {tx} needs at least 2 samples and a positive rate"));
        }
        if w.samples.iter().any(|v| !v.is_finite()) || !w.start_time.is_finite() {
            report.push(IssueKind::NonFinite, format!("waveform {tx} has non-finite values"));
        }
    }
    if !scheme.initial_time.is_finite() {
        report.push(IssueKind::NonFinite, "initial time must be finite");
    }
    report
}
