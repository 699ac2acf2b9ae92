//! Batch loss and its exact gradient with respect to the free variables.

use crate::acquisition::RFDataCube;
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, SampleIndex};
use crate::reparam::{constrain, FreeVariables, GradientVector, Group, ReparamSpec};
use serde::{Deserialize, Serialize};

/// Which variable groups are optimized. Frozen groups get a zero gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<Group>", from = "Vec<Group>")]
pub struct GroupMask {
    flags: [bool; 8],
}

impl Default for GroupMask {
    fn default() -> Self {
        Self::all()
    }
}

impl GroupMask {
    pub fn all() -> Self {
        Self { flags: [true; 8] }
    }

    pub fn none() -> Self {
        Self { flags: [false; 8] }
    }

    pub fn only(groups: &[Group]) -> Self {
        let mut m = Self::none();
        for &g in groups {
            m.set(g, true);
        }
        m
    }

    fn slot(g: Group) -> usize {
        Group::ALL.iter().position(|&x| x == g).unwrap()
    }

    pub fn set(&mut self, g: Group, free: bool) {
        self.flags[Self::slot(g)] = free;
    }

    pub fn without(mut self, g: Group) -> Self {
        self.set(g, false);
        self
    }

    pub fn contains(&self, g: Group) -> bool {
        self.flags[Self::slot(g)]
    }

    pub fn is_empty(&self) -> bool {
        self.flags.iter().all(|f| !f)
    }

    pub fn groups(&self) -> Vec<Group> {
        Group::ALL.iter().copied().filter(|&g| self.contains(g)).collect()
    }
}

impl From<GroupMask> for Vec<Group> {
    fn from(m: GroupMask) -> Self {
        m.groups()
    }
}

impl From<Vec<Group>> for GroupMask {
    fn from(v: Vec<Group>) -> Self {
        GroupMask::only(&v)
    }
}

fn observed_values(observed: &RFDataCube, batch: &[SampleIndex]) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|i| {
            if i.tx < observed.n_tx && i.ft < observed.n_ft && i.ch < observed.n_ch {
                Ok(observed.get(i.tx, i.ft, i.ch))
            } else {
                Err(Error::InvalidArgument(format!("sample ({}, {}, {}) outside observed cube", i.tx, i.ft, i.ch)))
            }
        })
        .collect()
}

/// Mean squared error between predictions and observations over a batch.
pub fn batch_loss(
    model: &ForwardModel,
    spec: &ReparamSpec,
    free: &FreeVariables,
    batch: &[SampleIndex],
    observed: &RFDataCube,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let y = observed_values(observed, batch)?;
    let (field, params) = constrain(free, spec);
    let pred = model.predict_batch(batch, &field, &params)?;
    let sse: f64 = pred.iter().zip(&y).map(|(p, o)| (p - o) * (p - o)).sum();
    Ok(sse / batch.len() as f64)
}

/// Loss and its gradient with respect to every free coordinate. Coordinates
/// of groups not in `mask` are reported as exactly zero.
pub fn batch_gradient(
    model: &ForwardModel,
    spec: &ReparamSpec,
    free: &FreeVariables,
    batch: &[SampleIndex],
    observed: &RFDataCube,
    mask: &GroupMask,
) -> Result<(f64, GradientVector)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let y = observed_values(observed, batch)?;
    let (field, params) = constrain(free, spec);
    let (sse, pg) = model.squared_error_gradient(batch, &y, &field, &params)?;
    let n = batch.len() as f64;

    let mut g = FreeVariables::zeros(free.n_scatterers(), free.n_channels());
    if mask.contains(Group::Amplitudes) {
        for (s, out) in g.xi_amplitudes.iter_mut().enumerate() {
            *out = pg.amplitudes[s] * spec.amplitude.derivative(free.xi_amplitudes[s]) / n;
        }
    }
    let k = spec.position_scale(params.speed_of_sound);
    if mask.contains(Group::Positions) {
        for (s, out) in g.xi_positions.iter_mut().enumerate() {
            out[0] = pg.positions[s][0] * k / n;
            out[1] = pg.positions[s][1] * k / n;
        }
    }
    if mask.contains(Group::ElementWidth) {
        g.xi_elw = pg.element_width * spec.element_width.derivative(free.xi_elw) / n;
    }
    if mask.contains(Group::SpeedOfSound) {
        let mut d_c = pg.speed_of_sound;
        if spec.positions_track_c.is_some() {
            // positions scale with c at fixed coordinates
            for (gp, p) in pg.positions.iter().zip(&field.positions) {
                d_c += (gp[0] * p[0] + gp[1] * p[1]) / params.speed_of_sound;
            }
        }
        g.xi_c = d_c * spec.speed_of_sound.derivative(free.xi_c) / n;
    }
    if mask.contains(Group::Attenuation) {
        g.xi_mu = pg.attenuation_coeff * spec.attenuation.derivative(free.xi_mu) / n;
    }
    if mask.contains(Group::TimeOffset) {
        g.xi_t0 = pg.initial_time_offset * spec.time_offset.derivative(free.xi_t0) / n;
    }
    if mask.contains(Group::ElementGain) {
        for (ch, out) in g.xi_gamma.iter_mut().enumerate() {
            *out = pg.element_gain[ch] * spec.element_gain.derivative(free.xi_gamma[ch]) / n;
        }
    }
    if mask.contains(Group::Lowpass) {
        g.xi_lp_a = pg.lowpass_intercept * spec.lowpass_intercept.derivative(free.xi_lp_a) / n;
        g.xi_lp_b = pg.lowpass_slope * spec.lowpass_slope.derivative(free.xi_lp_b) / n;
    }
    Ok((sse / n, g))
}

/// Central differences of an arbitrary scalar function of the free
/// variables. The step for coordinate `v` is `h * max(|v|, 1)`.
pub fn finite_difference_with<F>(loss: F, free: &FreeVariables, h: f64) -> Result<GradientVector>
where
    F: Fn(&FreeVariables) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let flat = free.to_flat();
    let mut grad = vec![0.0; flat.len()];
    let mut probe = free.clone();
    for i in 0..flat.len() {
        let step = h * flat[i].abs().max(1.0);
        let mut x = flat.clone();
        x[i] = flat[i] + step;
        probe.set_flat(&x);
        let up = loss(&probe)?;
        x[i] = flat[i] - step;
        probe.set_flat(&x);
        let down = loss(&probe)?;
        grad[i] = (up - down) / (2.0 * step);
    }
    let mut g = free.clone();
    g.set_flat(&grad);
    Ok(g)
}

/// Central-difference gradient of [`batch_loss`]; frozen groups are zeroed.
pub fn finite_difference_gradient(
    model: &ForwardModel,
    spec: &ReparamSpec,
    free: &FreeVariables,
    batch: &[SampleIndex],
    observed: &RFDataCube,
    mask: &GroupMask,
    h: f64,
) -> Result<GradientVector> {
    let mut g = finite_difference_with(|x| batch_loss(model, spec, x, batch, observed), free, h)?;
    for grp in Group::ALL {
        if !mask.contains(grp) {
            g.clear_group(grp);
        }
    }
    Ok(g)
}
