//! Stochastic solver: Adam over random batches of RF samples.

use crate::acquisition::{validate_acquisition, ModelParams, RFDataCube, ScattererField, TransducerGeometry, TransmitScheme, SCATTERER_RADIUS};
use crate::error::{Error, Result};
use crate::forward::{Features, ForwardModel, ModelKind, SampleIndex};
use crate::grad::{batch_gradient, batch_loss, GroupMask};
use crate::reparam::{constrain, FreeVariables, Group, ReparamSpec};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::time::Instant;

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Extent {
    pub fn new(x_min: f64, x_max: f64, z_min: f64, z_max: f64) -> Self {
        Self { x_min, x_max, z_min, z_max }
    }

    pub fn contains(&self, other: &Extent) -> bool {
        other.x_min >= self.x_min && other.x_max <= self.x_max && other.z_min >= self.z_min && other.z_max <= self.z_max
    }

    pub fn padded(&self, pad: f64) -> Self {
        Self::new(self.x_min - pad, self.x_max + pad, self.z_min - pad, self.z_max + pad)
    }
}

/// Learning rate per variable group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub amplitudes: f64,
    pub positions: f64,
    pub physics: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { amplitudes: 1e-2, positions: 1e-2, physics: 1e-3 }
    }
}

impl LearningRates {
    pub fn for_group(&self, g: Group) -> f64 {
        match g {
            Group::Amplitudes => self.amplitudes,
            Group::Positions => self.positions,
            _ => self.physics,
        }
    }
}

/// Starting values of the physics parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialPhysics {
    /// `None` starts at the middle of the allowed range.
    pub speed_of_sound: Option<f64>,
    pub attenuation_coeff: f64,
    /// Fraction of the nominal element width.
    pub element_width_fraction: f64,
    pub element_gain: f64,
    pub initial_time_offset: f64,
    pub lowpass_intercept: f64,
    pub lowpass_slope: f64,
}

impl Default for InitialPhysics {
    fn default() -> Self {
        Self {
            speed_of_sound: None,
            attenuation_coeff: 0.5,
            element_width_fraction: 0.9,
            element_gain: 0.75,
            initial_time_offset: 0.0,
            lowpass_intercept: 0.9,
            lowpass_slope: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub grid_nx: usize,
    pub grid_nz: usize,
    pub extent: Extent,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rates: LearningRates,
    /// Learning-rate multiplier reached at the last iteration, approached
    /// geometrically. 1 disables decay.
    pub lr_final_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub features: Features,
    pub free_groups: GroupMask,
    /// `None` pads the extent by two wavelengths with a 1 mm depth floor.
    pub position_box: Option<Extent>,
    pub c_min: f64,
    pub c_max: f64,
    /// Bound on the time offset, in carrier periods.
    pub time_offset_periods: f64,
    pub initial: InitialPhysics,
    /// `None` picks a_0 so that the first prediction has 10% of the data RMS.
    pub initial_amplitude: Option<f64>,
    /// Position coordinates in wavelengths at the current speed of sound
    /// rather than at a fixed nominal one.
    pub positions_track_c: bool,
    /// Physics parameters stay fixed before this iteration.
    pub physics_warmup: usize,
    pub holdout_size: usize,
    pub holdout_every: usize,
    pub checkpoint_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grid_nx: 384,
            grid_nz: 256,
            extent: Extent::new(-19e-3, 19e-3, 5e-3, 45e-3),
            batch_size: 4096,
            iterations: 30000,
            learning_rates: LearningRates::default(),
            lr_final_fraction: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            model_kind: ModelKind::Full,
            features: Features::all(),
            free_groups: GroupMask::all(),
            position_box: None,
            c_min: 1400.0,
            c_max: 1600.0,
            time_offset_periods: 2.0,
            initial: InitialPhysics::default(),
            initial_amplitude: None,
            positions_track_c: false,
            physics_warmup: 500,
            holdout_size: 1024,
            holdout_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.grid_nx == 0 || self.grid_nz == 0 {
            return bad("grid must have at least one scatterer");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        let lr = self.learning_rates;
        if !(lr.amplitudes > 0.0 && lr.positions > 0.0 && lr.physics > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return bad("lr_final_fraction must be in (0, 1]");
        }
        let e = self.extent;
        if !(e.x_max > e.x_min && e.z_max > e.z_min && e.z_min > 0.0) {
            return bad("extent must be non-empty and at positive depth");
        }
        if !(self.c_max > self.c_min && self.c_min > 0.0) {
            return bad("speed of sound bounds must satisfy 0 < c_min < c_max");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam constants out of range");
        }
        Ok(())
    }

    pub fn reparam_spec(&self, geometry: &TransducerGeometry) -> ReparamSpec {
        let spec = ReparamSpec::with_bounds(geometry, self.c_min, self.c_max, self.time_offset_periods / geometry.center_frequency);
        if self.positions_track_c {
            spec.tracking_c(geometry.center_frequency)
        } else {
            spec
        }
    }

    /// Box that scatterer positions are clamped to.
    pub fn resolved_box(&self, geometry: &TransducerGeometry) -> Extent {
        self.position_box.unwrap_or_else(|| {
            let mut b = self.extent.padded(2.0 * geometry.wavelength(1500.0));
            b.z_min = b.z_min.max(1e-3);
            b
        })
    }

    /// Learning-rate multiplier at `iteration`.
    pub fn lr_scale(&self, iteration: usize) -> f64 {
        if self.lr_final_fraction == 1.0 {
            1.0
        } else {
            self.lr_final_fraction.powf(iteration as f64 / self.iterations as f64)
        }
    }
}

/// Regular scatterer grid over the extent with amplitude `a_0` and the
/// configured initial physics.
pub fn init_grid(config: &SolverConfig, geometry: &TransducerGeometry, a_0: f64) -> Result<FreeVariables> {
    config.validate()?;
    let e = config.extent;
    let bx = config.resolved_box(geometry);
    if !bx.contains(&e) {
        return Err(Error::Config("extent lies outside the position box".into()));
    }
    let spec = config.reparam_spec(geometry);
    let dx = (e.x_max - e.x_min) / config.grid_nx as f64;
    let dz = (e.z_max - e.z_min) / config.grid_nz as f64;
    let mut positions = Vec::with_capacity(config.grid_nx * config.grid_nz);
    for iz in 0..config.grid_nz {
        for ix in 0..config.grid_nx {
            positions.push([e.x_min + (ix as f64 + 0.5) * dx, e.z_min + (iz as f64 + 0.5) * dz]);
        }
    }
    let n = positions.len();
    let field = ScattererField::new(positions, vec![a_0; n]);
    let init = &config.initial;
    let params = ModelParams {
        speed_of_sound: init.speed_of_sound.unwrap_or(0.5 * (config.c_min + config.c_max)),
        attenuation_coeff: init.attenuation_coeff,
        element_width: init.element_width_fraction * geometry.element_width_nominal,
        element_gain: vec![init.element_gain; geometry.n_channels()],
        initial_time_offset: init.initial_time_offset,
        lowpass_intercept: init.lowpass_intercept,
        lowpass_slope: init.lowpass_slope,
        scatterer_radius: SCATTERER_RADIUS,
    };
    crate::reparam::unconstrain(&field, &params, &spec)
}

/// `batch_size` distinct samples drawn uniformly from the cube.
pub fn sample_batch<R: Rng>(rng: &mut R, n_tx: usize, n_ft: usize, n_ch: usize, batch_size: usize) -> Result<Vec<SampleIndex>> {
    let n = n_tx * n_ft * n_ch;
    if batch_size > n {
        return Err(Error::InvalidArgument(format!("batch of {batch_size} from a cube of {n} samples")));
    }
    Ok(index::sample(rng, n, batch_size).into_iter().map(|i| unflatten(i, n_ft, n_ch)).collect())
}

/// Like [`sample_batch`] but never returns a flat index in `exclude`.
fn sample_batch_excluding<R: Rng>(
    rng: &mut R,
    n_tx: usize,
    n_ft: usize,
    n_ch: usize,
    batch_size: usize,
    exclude: &HashSet<usize>,
) -> Result<Vec<SampleIndex>> {
    let n = n_tx * n_ft * n_ch;
    let available = n - exclude.len();
    if batch_size > available {
        return Err(Error::InvalidArgument(format!("batch of {batch_size} from {available} training samples")));
    }
    if 2 * batch_size > available {
        let pool: Vec<usize> = (0..n).filter(|i| !exclude.contains(i)).collect();
        return Ok(index::sample(rng, pool.len(), batch_size)
            .into_iter()
            .map(|k| unflatten(pool[k], n_ft, n_ch))
            .collect());
    }
    let mut chosen = HashSet::with_capacity(batch_size);
    let mut out = Vec::with_capacity(batch_size);
    while out.len() < batch_size {
        let i = rng.random_range(0..n);
        if !exclude.contains(&i) && chosen.insert(i) {
            out.push(unflatten(i, n_ft, n_ch));
        }
    }
    Ok(out)
}

fn unflatten(i: usize, n_ft: usize, n_ch: usize) -> SampleIndex {
    SampleIndex { tx: i / (n_ft * n_ch), ft: (i / n_ch) % n_ft, ch: i % n_ch }
}

/// Adam moments with a step counter per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], steps: vec![0; n] }
    }
}

/// One bias-corrected Adam update of `x`. Coordinates with a learning rate
/// of zero are left untouched, moments included. `groups` names the group of
/// each coordinate for error reporting.
pub fn adam_step(
    state: &mut AdamState,
    x: &mut [f64],
    grad: &[f64],
    lr: &[f64],
    groups: &[Group],
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    let n = x.len();
    if state.m.len() != n || grad.len() != n || lr.len() != n || groups.len() != n {
        return Err(Error::ShapeMismatch("Adam state, variables and gradient differ in length".into()));
    }
    for i in 0..n {
        if !grad[i].is_finite() {
            return Err(Error::Divergence(groups[i].name()));
        }
    }
    for i in 0..n {
        if lr[i] == 0.0 {
            continue;
        }
        let g = grad[i];
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / (1.0 - beta1.powi(t));
        let v_hat = state.v[i] / (1.0 - beta2.powi(t));
        x[i] -= lr[i] * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Resumable solver state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub free: FreeVariables,
    pub adam: AdamState,
    pub loss_trace: Vec<f64>,
    pub holdout_trace: Vec<(usize, f64)>,
    pub a_0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub free: FreeVariables,
    pub field: ScattererField,
    pub params: ModelParams,
    /// Training-batch MSE per iteration.
    pub loss_trace: Vec<f64>,
    /// `(iteration, MSE)` on the held-out batch.
    pub holdout_trace: Vec<(usize, f64)>,
    pub a_0: f64,
    /// Excluded from serialization so that solution files are reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Everything the loop needs, derived once from the inputs.
struct Setup {
    model: ForwardModel,
    spec: ReparamSpec,
    holdout: Vec<SampleIndex>,
    holdout_set: HashSet<usize>,
    groups: Vec<Group>,
    data_power: f64,
    bx: Extent,
}

fn setup(observed: &RFDataCube, geometry: &TransducerGeometry, scheme: &TransmitScheme, config: &SolverConfig) -> Result<Setup> {
    config.validate()?;
    let report = validate_acquisition(geometry, scheme, observed);
    if !report.is_ok() {
        return Err(Error::Validation(report.to_string()));
    }
    let model = ForwardModel::new(geometry, scheme, Some(&observed.tgc_curve), config.model_kind, config.features)?;
    let spec = config.reparam_spec(geometry);
    let n = observed.len();
    let h = config.holdout_size.min(n / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let flat: Vec<usize> = index::sample(&mut rng, n, h).into_vec();
    let holdout_set: HashSet<usize> = flat.iter().copied().collect();
    let holdout = flat.iter().map(|&i| unflatten(i, observed.n_ft, observed.n_ch)).collect();
    let data_power = observed.samples.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(data_power > 0.0) && config.initial_amplitude.is_none() {
        return Err(Error::Validation("observed data is identically zero; set the initial amplitude".into()));
    }
    let template = FreeVariables::zeros(config.grid_nx * config.grid_nz, geometry.n_channels());
    let groups = Group::ALL.iter().flat_map(|&g| std::iter::repeat_n(g, template.group(g).len())).collect();
    Ok(Setup { model, spec, holdout, holdout_set, groups, data_power, bx: config.resolved_box(geometry) })
}

/// Amplitude at which the initial grid predicts 10% of the data RMS.
fn auto_amplitude(s: &Setup, observed: &RFDataCube, config: &SolverConfig, geometry: &TransducerGeometry) -> Result<f64> {
    let unit = init_grid(config, geometry, 1.0)?;
    let (field, params) = constrain(&unit, &s.spec);
    let pred = s.model.predict_batch(&s.holdout, &field, &params)?;
    let p_rms = (pred.iter().map(|v| v * v).sum::<f64>() / pred.len() as f64).sqrt();
    let y: Vec<f64> = s.holdout.iter().map(|i| observed.get(i.tx, i.ft, i.ch)).collect();
    let y_rms = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt();
    if p_rms > 0.0 && y_rms > 0.0 {
        Ok(0.1 * y_rms / p_rms)
    } else {
        Ok(0.1 * s.data_power.sqrt() / p_rms.max(f64::MIN_POSITIVE))
    }
}

/// Runs the solver from the grid initialization.
pub fn solve(observed: &RFDataCube, geometry: &TransducerGeometry, scheme: &TransmitScheme, config: &SolverConfig) -> Result<Solution> {
    solve_with(observed, geometry, scheme, config, None, |_| Ok(()))
}

/// Runs the solver, optionally resuming from a checkpoint. `on_checkpoint`
/// is called every `checkpoint_every` iterations when that is nonzero.
pub fn solve_with<F>(
    observed: &RFDataCube,
    geometry: &TransducerGeometry,
    scheme: &TransmitScheme,
    config: &SolverConfig,
    resume: Option<Checkpoint>,
    mut on_checkpoint: F,
) -> Result<Solution>
where
    F: FnMut(&Checkpoint) -> Result<()>,
{
    let start = Instant::now();
    let s = setup(observed, geometry, scheme, config)?;
    let mut cp = match resume {
        Some(cp) => {
            if cp.free.n_scatterers() != config.grid_nx * config.grid_nz || cp.free.n_channels() != geometry.n_channels() {
                return Err(Error::ShapeMismatch("checkpoint does not match the configured grid".into()));
            }
            cp
        }
        None => {
            let a_0 = match config.initial_amplitude {
                Some(a) => a,
                None => auto_amplitude(&s, observed, config, geometry)?,
            };
            let free = init_grid(config, geometry, a_0)?;
            let n = free.to_flat().len();
            Checkpoint { iteration: 0, free, adam: AdamState::new(n), loss_trace: Vec::new(), holdout_trace: Vec::new(), a_0 }
        }
    };
    log::info!(
        "solving {} scatterers, batch {}, {} iterations, a_0 = {:e}",
        cp.free.n_scatterers(),
        config.batch_size,
        config.iterations,
        cp.a_0
    );

    // silent data: normalize by the power of the starting prediction instead
    let power = if s.data_power > 0.0 {
        s.data_power
    } else {
        let (field, params) = constrain(&init_grid(config, geometry, cp.a_0)?, &s.spec);
        let pred = s.model.predict_batch(&s.holdout, &field, &params)?;
        pred.iter().map(|v| v * v).sum::<f64>() / pred.len() as f64
    };
    if !(power > 0.0) {
        return Err(Error::Validation("neither the data nor the initial prediction carries any signal".into()));
    }
    let scale = 1.0 / power;

    while cp.iteration < config.iterations {
        let it = cp.iteration;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(it as u64 + 1);
        let batch = sample_batch_excluding(&mut rng, observed.n_tx, observed.n_ft, observed.n_ch, config.batch_size, &s.holdout_set)?;

        let warm = it >= config.physics_warmup;
        let mut mask = config.free_groups;
        if !warm {
            for g in Group::ALL.iter().filter(|g| g.is_physics()) {
                mask.set(*g, false);
            }
        }
        let (loss, grad) = batch_gradient(&s.model, &s.spec, &cp.free, &batch, observed, &mask)?;
        let lr_scale = config.lr_scale(it);
        let lr: Vec<f64> = s
            .groups
            .iter()
            .map(|&g| if mask.contains(g) { config.learning_rates.for_group(g) * lr_scale } else { 0.0 })
            .collect();
        let g_flat: Vec<f64> = grad.to_flat().iter().map(|v| v * scale).collect();
        let mut x = cp.free.to_flat();
        adam_step(&mut cp.adam, &mut x, &g_flat, &lr, &s.groups, config.beta1, config.beta2, config.epsilon)?;
        cp.free.set_flat(&x);
        let k = s.spec.position_scale(s.spec.speed_of_sound.forward(cp.free.xi_c));
        let (lo, hi) = ([s.bx.x_min / k, s.bx.z_min / k], [s.bx.x_max / k, s.bx.z_max / k]);
        for p in cp.free.xi_positions.iter_mut() {
            p[0] = p[0].clamp(lo[0], hi[0]);
            p[1] = p[1].clamp(lo[1], hi[1]);
        }
        cp.loss_trace.push(loss);
        cp.iteration += 1;

        if config.holdout_every > 0 && (cp.iteration % config.holdout_every == 0 || cp.iteration == config.iterations) {
            let h = batch_loss(&s.model, &s.spec, &cp.free, &s.holdout, observed)?;
            log::debug!("iteration {}: batch {:.4e}, held-out {:.4e}", cp.iteration, loss * scale, h * scale);
            cp.holdout_trace.push((cp.iteration, h));
        }
        if config.checkpoint_every > 0 && cp.iteration % config.checkpoint_every == 0 {
            on_checkpoint(&cp)?;
        }
    }

    let (field, params) = constrain(&cp.free, &s.spec);
    Ok(Solution {
        free: cp.free,
        field,
        params,
        loss_trace: cp.loss_trace,
        holdout_trace: cp.holdout_trace,
        a_0: cp.a_0,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Held-out batch used by [`solve`] for a given config and cube shape.
pub fn holdout_batch(config: &SolverConfig, n_tx: usize, n_ft: usize, n_ch: usize) -> Vec<SampleIndex> {
    let n = n_tx * n_ft * n_ch;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    index::sample(&mut rng, n, config.holdout_size.min(n / 2))
        .into_iter()
        .map(|i| unflatten(i, n_ft, n_ch))
        .collect()
}
