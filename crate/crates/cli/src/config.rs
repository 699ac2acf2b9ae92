//! Run configuration: INI-style sections, one per module.
//!
//! Nested structures are addressed with dotted keys (`learning_rates.physics`).
//! Values are JSON literals; string-valued keys also accept bare words.
//! Keys that do not exist in the defaults are rejected.

use infer_core::beamform::{MvParams, PixelGrid, PipelineSettings, TofSettings, Window};
use infer_core::forward::ModelKind;
use infer_core::optim::{Extent, SolverConfig};
use infer_core::phantom::{Cyst, DeskAcquisition, Wire};
use infer_core::red::RedConfig;
use infer_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransmitKind {
    /// One transmit per listed element.
    Single,
    /// One transmit fired by all listed elements.
    Group,
    /// One plane wave per listed angle.
    Plane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSection {
    #[serde(flatten)]
    pub desk: DeskAcquisition,
    pub transmit: TransmitKind,
    pub elements: Vec<usize>,
    pub angles_deg: Vec<f64>,
    /// Depth ramp of the TGC curve over the record; 0 for a flat curve.
    pub tgc_db: f64,
}

impl Default for AcquisitionSection {
    fn default() -> Self {
        Self { desk: DeskAcquisition::default(), transmit: TransmitKind::Plane, elements: vec![], angles_deg: vec![0.0], tgc_db: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSection {
    pub extent: Extent,
    pub density_per_wavelength2: f64,
    pub amplitude_range: (f64, f64),
    pub cysts: Vec<Cyst>,
    pub wires: Vec<Wire>,
    /// Extra wires placed uniformly inside the extent shrunk by `wire_margin`.
    pub random_wires: usize,
    pub wire_margin: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            extent: Extent::new(-4.5e-3, 4.5e-3, 4e-3, 16e-3),
            density_per_wavelength2: 3.0,
            amplitude_range: (0.5, 1.0),
            cysts: vec![],
            wires: vec![],
            random_wires: 0,
            wire_margin: 0.5e-3,
        }
    }
}

/// Ground-truth physics and noise of the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSection {
    pub seed: u64,
    pub model_kind: ModelKind,
    pub speed_of_sound: f64,
    pub attenuation_coeff: f64,
    pub element_width_fraction: f64,
    pub element_gain: f64,
    pub initial_time_offset: f64,
    pub lowpass_intercept: f64,
    pub lowpass_slope: f64,
    /// Noise standard deviation relative to the clean peak, referred to the
    /// deepest sample when a TGC ramp is applied.
    pub noise: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            seed: 0,
            model_kind: ModelKind::Full,
            speed_of_sound: 1540.0,
            attenuation_coeff: 0.5,
            element_width_fraction: 0.9,
            element_gain: 0.75,
            initial_time_offset: 0.0,
            lowpass_intercept: 0.9,
            lowpass_slope: 1000.0,
            noise: 0.01,
        }
    }
}

/// Pixel grid shared by rendering, beamforming and RED.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSection {
    pub extent: Extent,
    pub nx: usize,
    pub nz: usize,
    pub dynamic_range_db: f64,
}

impl Default for ImageSection {
    fn default() -> Self {
        Self { extent: Extent::new(-4.5e-3, 4.5e-3, 4e-3, 16e-3), nx: 96, nz: 128, dynamic_range_db: 60.0 }
    }
}

impl ImageSection {
    pub fn grid(&self) -> Result<PixelGrid> {
        let e = self.extent;
        if self.nx < 2 || self.nz < 2 || !(e.x_max > e.x_min && e.z_max > e.z_min) {
            return Err(Error::Config("image needs at least 2x2 pixels over a non-empty extent".into()));
        }
        PixelGrid::new(
            self.nx,
            self.nz,
            [e.x_min, e.z_min],
            [(e.x_max - e.x_min) / (self.nx - 1) as f64, (e.z_max - e.z_min) / (self.nz - 1) as f64],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSection {
    /// Kernel radius in wavelengths at the solved speed of sound.
    pub radius_wavelengths: f64,
    pub weight_by_amplitude: bool,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self { radius_wavelengths: 0.5, weight_by_amplitude: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamformSection {
    pub speed_of_sound: f64,
    pub f_number: f64,
    pub window: Window,
    pub lens_delay: f64,
    pub filter_order: u32,
    /// `null` uses the -6 dB bandwidth of the pulse.
    pub bandwidth: Option<f64>,
    pub incoherent: bool,
    pub mv: MvParams,
}

impl Default for BeamformSection {
    fn default() -> Self {
        let p = PipelineSettings::default();
        Self {
            speed_of_sound: 1540.0,
            f_number: p.tof.f_number,
            window: p.tof.window,
            lens_delay: p.tof.lens_delay,
            filter_order: p.filter_order,
            bandwidth: p.bandwidth,
            incoherent: p.incoherent,
            mv: MvParams::default(),
        }
    }
}

impl BeamformSection {
    pub fn pipeline(&self, dynamic_range_db: f64) -> PipelineSettings {
        PipelineSettings {
            tof: TofSettings { f_number: self.f_number, window: self.window, lens_delay: self.lens_delay },
            filter_order: self.filter_order,
            bandwidth: self.bandwidth,
            dynamic_range_db,
            incoherent: self.incoherent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSection {
    pub bins: usize,
    /// Evaluate gCNR on linear magnitudes instead of the dB image.
    pub linear: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { bins: 256, linear: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub acquisition: AcquisitionSection,
    pub scene: SceneSection,
    pub simulate: SimulateSection,
    pub solver: SolverConfig,
    pub image: ImageSection,
    pub render: RenderSection,
    pub beamform: BeamformSection,
    pub red: RedConfig,
    pub metrics: MetricsSection,
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn lookup<'a>(root: &'a mut Value, path: &[&str]) -> Option<&'a mut Value> {
    let mut cur = root;
    for p in path {
        cur = cur.as_object_mut()?.get_mut(*p)?;
    }
    Some(cur)
}

fn parse_value(raw: &str, default: &Value, at: &str) -> Result<Value> {
    let raw = raw.trim();
    if let Value::String(_) = default {
        let bare = raw.trim_matches('"');
        return Ok(Value::String(bare.to_string()));
    }
    match raw {
        "none" | "null" => return Ok(Value::Null),
        _ => {}
    }
    serde_json::from_str(raw).or_else(|_| {
        if default.is_null() {
            Ok(Value::String(raw.to_string()))
        } else {
            Err(Error::Config(format!("{at}: cannot parse '{raw}'")))
        }
    })
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Defaults overridden by the INI text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut root = serde_json::to_value(RunConfig::default())?;
        let mut section: Option<String> = None;
        for (n, line) in text.lines().enumerate() {
            let at = format!("line {}", n + 1);
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if root.get(name).is_none() {
                    return Err(Error::Config(format!("{at}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| Error::Config(format!("{at}: expected key = value")))?;
            let sec = section.as_deref().ok_or_else(|| Error::Config(format!("{at}: key outside of a section")))?;
            let key = key.trim();
            let mut path = vec![sec];
            path.extend(key.split('.'));
            let slot = lookup(&mut root, &path).ok_or_else(|| Error::Config(format!("{at}: unknown key '{key}' in [{sec}]")))?;
            if slot.as_object().is_some_and(|m| !m.is_empty()) {
                return Err(Error::Config(format!("{at}: '{key}' is a group; set its fields")));
            }
            *slot = parse_value(raw, slot, &at)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p)?),
            None => Ok(Self::default()),
        }
    }

    /// Every key with its resolved value; parsing the result gives back `self`.
    pub fn to_ini(&self) -> Result<String> {
        let root = serde_json::to_value(self)?;
        let mut out = String::new();
        for (name, section) in root.as_object().expect("config is an object") {
            out.push_str(&format!("[{name}]\n"));
            let mut flat = Vec::new();
            flatten("", section, &mut flat);
            for (k, v) in flat {
                out.push_str(&format!("{k} = {}\n", render_value(&v)));
            }
            out.push('\n');
        }
        Ok(out)
    }
}
