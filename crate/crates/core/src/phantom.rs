//! Synthetic scenes and RF simulation.

use crate::acquisition::{ModelParams, RFDataCube, ScattererField, TransducerGeometry, TransmitScheme, Waveform};
use crate::error::{Error, Result};
use crate::forward::{Features, ForwardModel, ModelKind};
use crate::optim::Extent;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, Uniform};
use serde::{Deserialize, Serialize};

/// Disk with scaled echogenicity; 0 is anechoic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cyst {
    pub center: [f64; 2],
    pub radius: f64,
    pub echogenicity: f64,
}

impl Cyst {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let dx = p[0] - self.center[0];
        let dz = p[1] - self.center[1];
        dx * dx + dz * dz <= self.radius * self.radius
    }
}

/// Isolated point reflector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wire {
    pub position: [f64; 2],
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub extent: Extent,
    /// Background scatterers per square wavelength; 0 for no background.
    pub density_per_wavelength2: f64,
    pub wavelength: f64,
    pub amplitude_range: (f64, f64),
    pub cysts: Vec<Cyst>,
    pub wires: Vec<Wire>,
}

impl SceneSpec {
    pub fn new(extent: Extent, wavelength: f64) -> Self {
        Self {
            extent,
            density_per_wavelength2: 3.0,
            wavelength,
            amplitude_range: (0.5, 1.0),
            cysts: Vec::new(),
            wires: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let e = self.extent;
        if !(e.x_max > e.x_min && e.z_max > e.z_min && e.z_min > 0.0) {
            return Err(Error::InvalidArgument("scene extent must be non-empty at positive depth".into()));
        }
        if !(self.wavelength > 0.0) || self.density_per_wavelength2 < 0.0 {
            return Err(Error::InvalidArgument("scene wavelength and density must be positive".into()));
        }
        let (lo, hi) = self.amplitude_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument("amplitude range must satisfy 0 <= lo <= hi".into()));
        }
        let inside = |p: [f64; 2]| p[0] >= e.x_min && p[0] <= e.x_max && p[1] >= e.z_min && p[1] <= e.z_max;
        for c in &self.cysts {
            if !inside(c.center) || !(c.radius > 0.0) || c.echogenicity < 0.0 {
                return Err(Error::InvalidArgument("cyst must lie within the extent with positive radius".into()));
            }
        }
        for w in &self.wires {
            if !inside(w.position) || w.amplitude < 0.0 {
                return Err(Error::InvalidArgument("wire must lie within the extent".into()));
            }
        }
        Ok(())
    }
}

/// Draws a scatterer field for `spec`. Background scatterers are Poisson
/// distributed with uniform amplitudes; a scatterer inside several cysts takes
/// the echogenicity of the last one listed.
pub fn gen_phantom<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Result<ScattererField> {
    spec.validate()?;
    for (i, a) in spec.cysts.iter().enumerate() {
        for b in &spec.cysts[i + 1..] {
            let d = ((a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2)).sqrt();
            if d < a.radius + b.radius && a.echogenicity != b.echogenicity {
                log::warn!("overlapping cysts with different echogenicity; the later one wins");
            }
        }
    }
    let e = spec.extent;
    let area = (e.x_max - e.x_min) * (e.z_max - e.z_min);
    let mean = spec.density_per_wavelength2 * area / (spec.wavelength * spec.wavelength);
    let count = if mean > 0.0 {
        Poisson::new(mean)
            .map_err(|_| Error::InvalidArgument("invalid scatterer density".into()))?
            .sample(rng) as usize
    } else {
        0
    };
    let ux = Uniform::new_inclusive(e.x_min, e.x_max).map_err(|_| Error::InvalidArgument("bad extent".into()))?;
    let uz = Uniform::new_inclusive(e.z_min, e.z_max).map_err(|_| Error::InvalidArgument("bad extent".into()))?;
    let (lo, hi) = spec.amplitude_range;
    let ua = Uniform::new_inclusive(lo, hi).map_err(|_| Error::InvalidArgument("bad amplitude range".into()))?;
    let mut positions = Vec::with_capacity(count + spec.wires.len());
    let mut amplitudes = Vec::with_capacity(count + spec.wires.len());
    for _ in 0..count {
        let p = [ux.sample(rng), uz.sample(rng)];
        let mut a = ua.sample(rng);
        if let Some(c) = spec.cysts.iter().rev().find(|c| c.contains(p)) {
            a *= c.echogenicity;
        }
        positions.push(p);
        amplitudes.push(a);
    }
    for w in &spec.wires {
        positions.push(w.position);
        amplitudes.push(w.amplitude);
    }
    if positions.is_empty() {
        return Err(Error::InvalidArgument("scene produced no scatterers".into()));
    }
    Ok(ScattererField::new(positions, amplitudes))
}

/// Simulated recording: model prediction plus white Gaussian noise, both
/// scaled by the TGC curve.
#[allow(clippy::too_many_arguments)]
pub fn simulate_rf<R: Rng>(
    field: &ScattererField,
    params: &ModelParams,
    geometry: &TransducerGeometry,
    scheme: &TransmitScheme,
    tgc_curve: &[f64],
    noise_std: f64,
    rng: &mut R,
    kind: ModelKind,
) -> Result<RFDataCube> {
    if noise_std < 0.0 {
        return Err(Error::InvalidArgument("noise_std must be non-negative".into()));
    }
    let model = ForwardModel::new(geometry, scheme, Some(tgc_curve), kind, Features::all())?;
    let mut samples = model.predict_cube(field, params)?;
    let (n_tx, n_ft, n_ch) = (model.n_tx(), model.n_ft(), model.n_ch());
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|_| Error::InvalidArgument("bad noise level".into()))?;
        for (i, v) in samples.iter_mut().enumerate() {
            let ft = (i / n_ch) % n_ft;
            *v += tgc_curve[ft] * normal.sample(rng);
        }
    }
    Ok(RFDataCube { n_tx, n_ft, n_ch, samples, tgc_curve: tgc_curve.to_vec() })
}

/// Small linear-array acquisition used for desk-scale experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskAcquisition {
    pub n_channels: usize,
    pub pitch: f64,
    pub element_width: f64,
    pub center_frequency: f64,
    pub sampling_frequency: f64,
    pub fractional_bandwidth: f64,
    pub waveform_rate: f64,
    pub initial_time: f64,
    pub n_fast_time: usize,
}

impl Default for DeskAcquisition {
    fn default() -> Self {
        Self {
            n_channels: 32,
            pitch: 0.3e-3,
            element_width: 0.27e-3,
            center_frequency: 5e6,
            sampling_frequency: 20e6,
            fractional_bandwidth: 0.6,
            waveform_rate: 100e6,
            initial_time: 0.0,
            n_fast_time: 512,
        }
    }
}

impl DeskAcquisition {
    pub fn geometry(&self) -> TransducerGeometry {
        TransducerGeometry::linear(self.n_channels, self.pitch, self.element_width, self.center_frequency, self.sampling_frequency)
    }

    pub fn waveform(&self) -> Waveform {
        Waveform::gaussian_pulse(self.center_frequency, self.fractional_bandwidth, self.waveform_rate)
    }

    /// Steered plane waves; a single zero angle for one transmit.
    pub fn plane_waves(&self, angles: &[f64], speed_of_sound: f64) -> TransmitScheme {
        TransmitScheme::plane_waves(&self.geometry(), angles, speed_of_sound, &self.waveform(), self.initial_time, self.n_fast_time)
    }

    /// One transmit per listed element.
    pub fn single_element(&self, firing: &[usize]) -> TransmitScheme {
        TransmitScheme::single_element(self.n_channels, firing, &self.waveform(), self.initial_time, self.n_fast_time)
    }

    /// One transmit fired by all listed elements at once.
    pub fn element_group(&self, elements: &[usize]) -> TransmitScheme {
        TransmitScheme::element_groups(self.n_channels, &[elements.to_vec()], &self.waveform(), self.initial_time, self.n_fast_time)
    }
}
