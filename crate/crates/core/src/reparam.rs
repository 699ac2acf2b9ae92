//! Maps between unconstrained optimizer coordinates and physical parameters.

use crate::acquisition::{ModelParams, ScattererField, TransducerGeometry, SCATTERER_RADIUS};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Scalar transform families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Exp,
    /// `lo + (hi - lo) * sigmoid(xi)`
    ScaledSigmoid { lo: f64, hi: f64 },
    /// `scale * xi`
    Affine { scale: f64 },
}

impl Transform {
    pub fn forward(&self, xi: f64) -> f64 {
        match *self {
            Transform::Exp => xi.exp(),
            Transform::ScaledSigmoid { lo, hi } => lo + (hi - lo) * sigmoid(xi),
            Transform::Affine { scale } => scale * xi,
        }
    }

    /// Derivative of `forward` at `xi`.
    pub fn derivative(&self, xi: f64) -> f64 {
        match *self {
            Transform::Exp => xi.exp(),
            Transform::ScaledSigmoid { lo, hi } => {
                let s = sigmoid(xi);
                (hi - lo) * s * (1.0 - s)
            }
            Transform::Affine { scale } => scale,
        }
    }

    pub fn inverse(&self, name: &'static str, value: f64) -> Result<f64> {
        match *self {
            Transform::Exp => {
                if value > 0.0 && value.is_finite() {
                    Ok(value.ln())
                } else {
                    Err(Error::NotRepresentable { name, value, lo: 0.0, hi: f64::INFINITY })
                }
            }
            Transform::ScaledSigmoid { lo, hi } => {
                if value > lo && value < hi {
                    let u = (value - lo) / (hi - lo);
                    let xi = (u / (1.0 - u)).ln();
                    if xi.is_finite() {
                        return Ok(xi);
                    }
                }
                Err(Error::NotRepresentable { name, value, lo, hi })
            }
            Transform::Affine { scale } => {
                if value.is_finite() {
                    Ok(value / scale)
                } else {
                    Err(Error::NotRepresentable { name, value, lo: f64::NEG_INFINITY, hi: f64::INFINITY })
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Transform per variable group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReparamSpec {
    pub amplitude: Transform,
    pub position: Transform,
    pub element_width: Transform,
    pub speed_of_sound: Transform,
    pub attenuation: Transform,
    pub time_offset: Transform,
    pub element_gain: Transform,
    pub lowpass_intercept: Transform,
    pub lowpass_slope: Transform,
    /// When set, positions are measured in wavelengths at the current speed
    /// of sound, `p = xi * c / f_c`, instead of through `position`.
    pub positions_track_c: Option<f64>,
}

impl ReparamSpec {
    /// Default maps for a probe: positions in nominal wavelengths, speed of
    /// sound in [1400, 1600] m/s, time offset within two carrier periods.
    pub fn for_geometry(geometry: &TransducerGeometry) -> Self {
        Self::with_bounds(geometry, 1400.0, 1600.0, 2.0 / geometry.center_frequency)
    }

    pub fn with_bounds(geometry: &TransducerGeometry, c_min: f64, c_max: f64, t0_bound: f64) -> Self {
        Self {
            amplitude: Transform::Exp,
            position: Transform::Affine { scale: geometry.wavelength(1500.0) },
            element_width: Transform::ScaledSigmoid { lo: 0.0, hi: geometry.element_width_nominal },
            speed_of_sound: Transform::ScaledSigmoid { lo: c_min, hi: c_max },
            attenuation: Transform::Exp,
            time_offset: Transform::ScaledSigmoid { lo: -t0_bound, hi: t0_bound },
            element_gain: Transform::ScaledSigmoid { lo: 0.5, hi: 1.0 },
            lowpass_intercept: Transform::Exp,
            lowpass_slope: Transform::Exp,
            positions_track_c: None,
        }
    }

    /// Measure positions in wavelengths at the current speed of sound.
    pub fn tracking_c(mut self, center_frequency: f64) -> Self {
        self.positions_track_c = Some(center_frequency);
        self
    }

    /// Meters per unit of position coordinate at speed of sound `c`.
    pub fn position_scale(&self, c: f64) -> f64 {
        match (self.positions_track_c, self.position) {
            (Some(fc), _) => c / fc,
            (None, Transform::Affine { scale }) => scale,
            (None, _) => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("amplitude", self.amplitude),
            ("position", self.position),
            ("element_width", self.element_width),
            ("speed_of_sound", self.speed_of_sound),
            ("attenuation", self.attenuation),
            ("time_offset", self.time_offset),
            ("element_gain", self.element_gain),
            ("lowpass_intercept", self.lowpass_intercept),
            ("lowpass_slope", self.lowpass_slope),
        ];
        for (name, t) in all {
            match t {
                Transform::ScaledSigmoid { lo, hi } if !(hi > lo) => {
                    return Err(Error::InvalidArgument(format!("{name}: sigmoid bounds need hi > lo")))
                }
                Transform::Affine { scale } if !(scale > 0.0) => {
                    return Err(Error::InvalidArgument(format!("{name}: scale must be positive")))
                }
                _ => {}
            }
        }
        if !matches!(self.position, Transform::Affine { .. }) {
            return Err(Error::InvalidArgument("position map must be affine".into()));
        }
        if let Some(fc) = self.positions_track_c {
            if !(fc > 0.0) {
                return Err(Error::InvalidArgument("center frequency must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Unconstrained optimization variables. Also used as the gradient layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeVariables {
    pub xi_amplitudes: Vec<f64>,
    pub xi_positions: Vec<[f64; 2]>,
    pub xi_elw: f64,
    pub xi_c: f64,
    pub xi_mu: f64,
    pub xi_t0: f64,
    pub xi_gamma: Vec<f64>,
    pub xi_lp_a: f64,
    pub xi_lp_b: f64,
}

/// Variable groups, used for learning rates and freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Amplitudes,
    Positions,
    ElementWidth,
    SpeedOfSound,
    Attenuation,
    TimeOffset,
    ElementGain,
    Lowpass,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::Amplitudes,
        Group::Positions,
        Group::ElementWidth,
        Group::SpeedOfSound,
        Group::Attenuation,
        Group::TimeOffset,
        Group::ElementGain,
        Group::Lowpass,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Group::Amplitudes => "amplitudes",
            Group::Positions => "positions",
            Group::ElementWidth => "element_width",
            Group::SpeedOfSound => "speed_of_sound",
            Group::Attenuation => "attenuation",
            Group::TimeOffset => "time_offset",
            Group::ElementGain => "element_gain",
            Group::Lowpass => "lowpass",
        }
    }

    pub fn is_physics(&self) -> bool {
        !matches!(self, Group::Amplitudes | Group::Positions)
    }
}

impl FreeVariables {
    /// All-zero variables with the given sizes.
    pub fn zeros(n_scatterers: usize, n_channels: usize) -> Self {
        Self {
            xi_amplitudes: vec![0.0; n_scatterers],
            xi_positions: vec![[0.0; 2]; n_scatterers],
            xi_elw: 0.0,
            xi_c: 0.0,
            xi_mu: 0.0,
            xi_t0: 0.0,
            xi_gamma: vec![0.0; n_channels],
            xi_lp_a: 0.0,
            xi_lp_b: 0.0,
        }
    }

    pub fn n_scatterers(&self) -> usize {
        self.xi_amplitudes.len()
    }

    pub fn n_channels(&self) -> usize {
        self.xi_gamma.len()
    }

    /// Mutable view of the coordinates of one group.
    pub fn group_mut(&mut self, group: Group) -> Vec<&mut f64> {
        match group {
            Group::Amplitudes => self.xi_amplitudes.iter_mut().collect(),
            Group::Positions => self.xi_positions.iter_mut().flat_map(|p| p.iter_mut()).collect(),
            Group::ElementWidth => vec![&mut self.xi_elw],
            Group::SpeedOfSound => vec![&mut self.xi_c],
            Group::Attenuation => vec![&mut self.xi_mu],
            Group::TimeOffset => vec![&mut self.xi_t0],
            Group::ElementGain => self.xi_gamma.iter_mut().collect(),
            Group::Lowpass => vec![&mut self.xi_lp_a, &mut self.xi_lp_b],
        }
    }

    /// Coordinates of one group, in the order of [`FreeVariables::group_mut`].
    pub fn group(&self, group: Group) -> Vec<f64> {
        match group {
            Group::Amplitudes => self.xi_amplitudes.clone(),
            Group::Positions => self.xi_positions.iter().flat_map(|p| p.iter().copied()).collect(),
            Group::ElementWidth => vec![self.xi_elw],
            Group::SpeedOfSound => vec![self.xi_c],
            Group::Attenuation => vec![self.xi_mu],
            Group::TimeOffset => vec![self.xi_t0],
            Group::ElementGain => self.xi_gamma.clone(),
            Group::Lowpass => vec![self.xi_lp_a, self.xi_lp_b],
        }
    }

    /// Flattened coordinates, groups in [`Group::ALL`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        Group::ALL.iter().flat_map(|g| self.group(*g)).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for g in Group::ALL {
            for v in self.group_mut(g) {
                *v = *it.next().expect("flat vector too short");
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Zeroes every coordinate of `group`.
    pub fn clear_group(&mut self, group: Group) {
        for v in self.group_mut(group) {
            *v = 0.0;
        }
    }
}

/// Gradient with the same layout as [`FreeVariables`].
pub type GradientVector = FreeVariables;

/// Maps free variables to the scatterer field and model parameters.
pub fn constrain(xi: &FreeVariables, spec: &ReparamSpec) -> (ScattererField, ModelParams) {
    let c = spec.speed_of_sound.forward(xi.xi_c);
    let k = spec.position_scale(c);
    let field = ScattererField {
        positions: xi.xi_positions.iter().map(|p| [k * p[0], k * p[1]]).collect(),
        amplitudes: xi.xi_amplitudes.iter().map(|&v| spec.amplitude.forward(v)).collect(),
    };
    let params = ModelParams {
        speed_of_sound: c,
        attenuation_coeff: spec.attenuation.forward(xi.xi_mu),
        element_width: spec.element_width.forward(xi.xi_elw),
        element_gain: xi.xi_gamma.iter().map(|&v| spec.element_gain.forward(v)).collect(),
        initial_time_offset: spec.time_offset.forward(xi.xi_t0),
        lowpass_intercept: spec.lowpass_intercept.forward(xi.xi_lp_a),
        lowpass_slope: spec.lowpass_slope.forward(xi.xi_lp_b),
        scatterer_radius: SCATTERER_RADIUS,
    };
    (field, params)
}

/// Inverse of [`constrain`].
pub fn unconstrain(field: &ScattererField, params: &ModelParams, spec: &ReparamSpec) -> Result<FreeVariables> {
    let xi_amplitudes = field
        .amplitudes
        .iter()
        .map(|&a| spec.amplitude.inverse("amplitude", a))
        .collect::<Result<Vec<_>>>()?;
    let k = spec.position_scale(params.speed_of_sound);
    let xi_positions = field
        .positions
        .iter()
        .map(|p| {
            if p[0].is_finite() && p[1].is_finite() {
                Ok([p[0] / k, p[1] / k])
            } else {
                Err(Error::NotRepresentable { name: "position", value: f64::NAN, lo: f64::NEG_INFINITY, hi: f64::INFINITY })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let xi_gamma = params
        .element_gain
        .iter()
        .map(|&g| spec.element_gain.inverse("element_gain", g))
        .collect::<Result<Vec<_>>>()?;
    Ok(FreeVariables {
        xi_amplitudes,
        xi_positions,
        xi_elw: spec.element_width.inverse("element_width", params.element_width)?,
        xi_c: spec.speed_of_sound.inverse("speed_of_sound", params.speed_of_sound)?,
        xi_mu: spec.attenuation.inverse("attenuation_coeff", params.attenuation_coeff)?,
        xi_t0: spec.time_offset.inverse("initial_time_offset", params.initial_time_offset)?,
        xi_gamma,
        xi_lp_a: spec.lowpass_intercept.inverse("lowpass_intercept", params.lowpass_intercept)?,
        xi_lp_b: spec.lowpass_slope.inverse("lowpass_slope", params.lowpass_slope)?,
    })
}
