//! Matrix-free measurement model: scatterers and model parameters in, RF
//! samples out.
//!
//! Two variants are provided. The full model sums the response over every
//! firing element; the wavefront-only model keeps only the earliest arrival
//! per scatterer. Every physical factor (directivity, element gain, spread,
//! absorption, pulse deformation, time offset, TGC) can be switched off
//! through [`Features`].
//!
//! Batch evaluation groups samples by `(tx, ch)` and skips scatterers whose
//! echo cannot reach the sample. Skipped terms are exactly zero, and the
//! remaining terms are summed in the same order (transmit element major,
//! then scatterer index) as the direct single-sample evaluation.

mod waveform;

pub use waveform::{lowpass_kernel, waveform_value, WaveSample, WaveformBank, DEFAULT_MIN_CUTOFF, DEFAULT_VARIANTS};

use crate::acquisition::{ModelParams, ScattererField, TransducerGeometry, TransmitScheme};
use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_10, PI};

/// Samples per evaluation chunk. Chunking is fixed so that reductions do not
/// depend on the thread count.
const CHUNK: usize = 256;
/// Slack on the support test used for culling; the exact test runs per term.
const CULL_SLACK: f64 = 1e-12;

/// Index of one RF sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleIndex {
    pub tx: usize,
    pub ft: usize,
    pub ch: usize,
}

impl SampleIndex {
    pub fn new(tx: usize, ft: usize, ch: usize) -> Self {
        Self { tx, ft, ch }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Full,
    Wavefront,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModelKind::Full),
            "wavefront" => Ok(ModelKind::Wavefront),
            other => Err(Error::InvalidArgument(format!("unknown model kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Full => "full",
            ModelKind::Wavefront => "wavefront",
        })
    }
}

/// Physical factors included in the model. `Features::default()` has all of
/// them enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Features {
    pub directivity: bool,
    pub element_gain: bool,
    pub spread: bool,
    pub absorption: bool,
    pub waveform_deformation: bool,
    pub time_offset: bool,
    pub tgc: bool,
}

impl Default for Features {
    fn default() -> Self {
        Self::all()
    }
}

impl Features {
    pub fn all() -> Self {
        Self {
            directivity: true,
            element_gain: true,
            spread: true,
            absorption: true,
            waveform_deformation: true,
            time_offset: true,
            tgc: true,
        }
    }

    /// Bare kernel: every factor off.
    pub fn none() -> Self {
        Self {
            directivity: false,
            element_gain: false,
            spread: false,
            absorption: false,
            waveform_deformation: false,
            time_offset: false,
            tgc: false,
        }
    }
}

/// One row of the ablation study: which single feature is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    None,
    ElementDirectivity,
    ElementGain,
    AttenuationFromSpread,
    AttenuationFromAbsorption,
    WaveformDeformation,
    InitialTimeOffset,
    TimeGainCompensation,
}

impl Ablation {
    /// Rows in reporting order.
    pub const ALL: [Ablation; 8] = [
        Ablation::None,
        Ablation::ElementDirectivity,
        Ablation::ElementGain,
        Ablation::AttenuationFromSpread,
        Ablation::AttenuationFromAbsorption,
        Ablation::WaveformDeformation,
        Ablation::InitialTimeOffset,
        Ablation::TimeGainCompensation,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Ablation::None => "None",
            Ablation::ElementDirectivity => "Element Directivity",
            Ablation::ElementGain => "Element Gain",
            Ablation::AttenuationFromSpread => "Attenuation from Spread",
            Ablation::AttenuationFromAbsorption => "Attenuation from Absorption",
            Ablation::WaveformDeformation => "Waveform Deformation",
            Ablation::InitialTimeOffset => "Initial Time Offset",
            Ablation::TimeGainCompensation => "Time Gain Compensation",
        }
    }

    pub fn features(&self) -> Features {
        let mut f = Features::all();
        match self {
            Ablation::None => {}
            Ablation::ElementDirectivity => f.directivity = false,
            Ablation::ElementGain => f.element_gain = false,
            Ablation::AttenuationFromSpread => f.spread = false,
            Ablation::AttenuationFromAbsorption => f.absorption = false,
            Ablation::WaveformDeformation => f.waveform_deformation = false,
            Ablation::InitialTimeOffset => f.time_offset = false,
            Ablation::TimeGainCompensation => f.tgc = false,
        }
        f
    }
}

/// Travel time between two points.
#[inline]
pub fn travel_time(a: [f64; 2], b: [f64; 2], c: f64) -> f64 {
    let dx = a[0] - b[0];
    let dz = a[1] - b[1];
    (dx * dx + dz * dz).sqrt() / c
}

/// Normalized sinc, `sin(pi x) / (pi x)`.
#[inline]
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Derivative of the normalized sinc.
#[inline]
pub fn sinc_derivative(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        // Taylor: -(pi^2/3) x + (pi^4/30) x^3
        let p2 = PI * PI;
        -p2 / 3.0 * x + p2 * p2 / 30.0 * x * x * x
    } else {
        ((PI * x).cos() - sinc(x)) / x
    }
}

/// Element sensitivity for a plane wave arriving at angle `theta` from the
/// element normal.
#[inline]
pub fn directivity(theta: f64, element_width: f64, wavelength: f64) -> f64 {
    sinc(element_width * theta.sin() / wavelength) * theta.cos()
}

/// Amplitude factor for absorption along a two-way path, `mu` in dB/cm/MHz.
#[inline]
pub fn attenuation_absorption(d_tx: f64, d_rx: f64, center_frequency: f64, mu: f64) -> f64 {
    10f64.powf(-(mu / 20.0) * center_frequency * 1e-6 * 100.0 * (d_tx + d_rx))
}

/// Spherical spread factor `r / d`.
pub fn attenuation_spread(distance: f64, radius: f64) -> Result<f64> {
    if distance == 0.0 {
        return Err(Error::SpreadSingularity { distance });
    }
    Ok(radius / distance)
}

/// Natural-log rate of the absorption factor per meter per (dB/cm/MHz).
#[inline]
fn absorption_rate(center_frequency: f64) -> f64 {
    LN_10 / 20.0 * center_frequency * 1e-4
}

/// Partial derivatives of one sample with respect to physical quantities.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhysicalGradient {
    pub amplitudes: Vec<f64>,
    pub positions: Vec<[f64; 2]>,
    pub speed_of_sound: f64,
    pub element_width: f64,
    pub attenuation_coeff: f64,
    pub initial_time_offset: f64,
    pub element_gain: Vec<f64>,
    pub lowpass_intercept: f64,
    pub lowpass_slope: f64,
}

impl PhysicalGradient {
    pub fn zeros(n_scatterers: usize, n_channels: usize) -> Self {
        Self {
            amplitudes: vec![0.0; n_scatterers],
            positions: vec![[0.0; 2]; n_scatterers],
            element_gain: vec![0.0; n_channels],
            ..Default::default()
        }
    }

    fn add(&mut self, other: &PhysicalGradient) {
        for (a, b) in self.amplitudes.iter_mut().zip(&other.amplitudes) {
            *a += b;
        }
        for (a, b) in self.positions.iter_mut().zip(&other.positions) {
            a[0] += b[0];
            a[1] += b[1];
        }
        for (a, b) in self.element_gain.iter_mut().zip(&other.element_gain) {
            *a += b;
        }
        self.speed_of_sound += other.speed_of_sound;
        self.element_width += other.element_width;
        self.attenuation_coeff += other.attenuation_coeff;
        self.initial_time_offset += other.initial_time_offset;
        self.lowpass_intercept += other.lowpass_intercept;
        self.lowpass_slope += other.lowpass_slope;
    }
}

/// Derivatives of a unit-amplitude term.
#[derive(Debug, Clone, Copy, Default)]
struct TermGrad {
    value: f64,
    x: f64,
    z: f64,
    c: f64,
    elw: f64,
    mu: f64,
    t0: f64,
    la: f64,
    lb: f64,
}

/// Per-sample constants shared by all of its terms.
#[derive(Debug, Clone, Copy)]
struct SampleCtx {
    tx: usize,
    ch: usize,
    /// Receive time measured from the first firing.
    t: f64,
    /// TGC times element gain.
    scale: f64,
    tgc: f64,
}

/// The measurement model bound to one acquisition setup.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub geometry: TransducerGeometry,
    pub scheme: TransmitScheme,
    pub banks: Vec<WaveformBank>,
    pub tgc_curve: Vec<f64>,
    pub kind: ModelKind,
    pub features: Features,
    firing: Vec<Vec<usize>>,
}

impl ForwardModel {
    /// `tgc_curve` of `None` means unit gain.
    pub fn new(
        geometry: &TransducerGeometry,
        scheme: &TransmitScheme,
        tgc_curve: Option<&[f64]>,
        kind: ModelKind,
        features: Features,
    ) -> Result<Self> {
        let report = crate::acquisition::validate_setup(geometry, scheme);
        if !report.is_ok() {
            return Err(Error::Validation(report.to_string()));
        }
        let tgc_curve = match tgc_curve {
            Some(c) => {
                if c.len() != scheme.n_fast_time {
                    return Err(Error::ShapeMismatch(format!(
                        "TGC curve has {} entries, expected {}",
                        c.len(),
                        scheme.n_fast_time
                    )));
                }
                c.to_vec()
            }
            None => vec![1.0; scheme.n_fast_time],
        };
        let banks = scheme
            .waveforms
            .iter()
            .map(|w| WaveformBank::new(w, geometry.sampling_frequency))
            .collect();
        let firing = (0..scheme.n_transmits()).map(|tx| scheme.firing_elements(tx)).collect();
        Ok(Self {
            geometry: geometry.clone(),
            scheme: scheme.clone(),
            banks,
            tgc_curve,
            kind,
            features,
            firing,
        })
    }

    pub fn with_kind(&self, kind: ModelKind) -> Self {
        Self { kind, ..self.clone() }
    }

    pub fn with_features(&self, features: Features) -> Self {
        Self { features, ..self.clone() }
    }

    pub fn n_tx(&self) -> usize {
        self.scheme.n_transmits()
    }

    pub fn n_ft(&self) -> usize {
        self.scheme.n_fast_time
    }

    pub fn n_ch(&self) -> usize {
        self.geometry.n_channels()
    }

    pub fn check_index(&self, idx: SampleIndex) -> Result<()> {
        if idx.tx >= self.n_tx() || idx.ft >= self.n_ft() || idx.ch >= self.n_ch() {
            return Err(Error::InvalidArgument(format!(
                "sample index ({}, {}, {}) outside {}x{}x{} cube",
                idx.tx,
                idx.ft,
                idx.ch,
                self.n_tx(),
                self.n_ft(),
                self.n_ch()
            )));
        }
        Ok(())
    }

    fn ctx(&self, idx: SampleIndex, params: &ModelParams) -> SampleCtx {
        let f_s = self.geometry.sampling_frequency;
        let mut t = idx.ft as f64 / f_s + self.scheme.initial_time;
        if self.features.time_offset {
            t += params.initial_time_offset;
        }
        let tgc = if self.features.tgc { self.tgc_curve[idx.ft] } else { 1.0 };
        let gain = if self.features.element_gain {
            params.element_gain[idx.ch]
        } else {
            1.0
        };
        SampleCtx {
            tx: idx.tx,
            ch: idx.ch,
            t,
            scale: tgc * gain,
            tgc,
        }
    }

    fn check_distance(d: f64) -> Result<()> {
        if d == 0.0 {
            Err(Error::SpreadSingularity { distance: d })
        } else {
            Ok(())
        }
    }

    /// Unit-amplitude response of scatterer `p` to element `txel` firing in
    /// transmit `tx`, received on `ch`.
    #[inline]
    fn term_value(&self, ctx: &SampleCtx, p: [f64; 2], txel: usize, params: &ModelParams) -> f64 {
        let e_t = self.geometry.element_positions[txel];
        let e_r = self.geometry.element_positions[ctx.ch];
        let c = params.speed_of_sound;
        let dxt = p[0] - e_t[0];
        let dzt = p[1] - e_t[1];
        let dt = (dxt * dxt + dzt * dzt).sqrt();
        let dxr = p[0] - e_r[0];
        let dzr = p[1] - e_r[1];
        let dr = (dxr * dxr + dzr * dzr).sqrt();
        let tau = (dt + dr) / c;
        let q = ctx.t - tau - self.scheme.delays[ctx.tx][txel];
        let bank = &self.banks[ctx.tx];
        if !(q >= bank.start_time && q <= bank.end_time()) {
            return 0.0;
        }
        let w = if self.features.waveform_deformation {
            bank.value(q, params.lowpass_intercept + params.lowpass_slope * tau)
        } else {
            bank.base_value(q)
        };
        let mut g = self.scheme.apodization[ctx.tx][txel];
        if self.features.directivity {
            let k = params.element_width * self.geometry.center_frequency / c;
            g *= sinc(k * dxt / dt) * (dzt / dt);
            g *= sinc(k * dxr / dr) * (dzr / dr);
        }
        if self.features.absorption {
            g *= (-absorption_rate(self.geometry.center_frequency) * params.attenuation_coeff * (dt + dr)).exp();
        }
        if self.features.spread {
            let r = params.scatterer_radius;
            g *= (r / dt) * (r / dr);
        }
        g * w
    }

    /// Unit-amplitude term and its partial derivatives.
    #[inline]
    fn term_grad(&self, ctx: &SampleCtx, p: [f64; 2], txel: usize, params: &ModelParams) -> TermGrad {
        let e_t = self.geometry.element_positions[txel];
        let e_r = self.geometry.element_positions[ctx.ch];
        let c = params.speed_of_sound;
        let fc = self.geometry.center_frequency;
        let dxt = p[0] - e_t[0];
        let dzt = p[1] - e_t[1];
        let dt = (dxt * dxt + dzt * dzt).sqrt();
        let dxr = p[0] - e_r[0];
        let dzr = p[1] - e_r[1];
        let dr = (dxr * dxr + dzr * dzr).sqrt();
        // sines and cosines of the angles to the element normals
        let (st, ct) = (dxt / dt, dzt / dt);
        let (sr, cr) = (dxr / dr, dzr / dr);
        let tau = (dt + dr) / c;
        let q = ctx.t - tau - self.scheme.delays[ctx.tx][txel];
        let bank = &self.banks[ctx.tx];
        if !(q >= bank.start_time && q <= bank.end_time()) {
            return TermGrad::default();
        }

        let tau_x = (st + sr) / c;
        let tau_z = (ct + cr) / c;
        let tau_c = -tau / c;

        let (ws, omega_x, omega_z, omega_c) = if self.features.waveform_deformation {
            let lb = params.lowpass_slope;
            let s = bank.sample(q, params.lowpass_intercept + lb * tau);
            (s, lb * tau_x, lb * tau_z, lb * tau_c)
        } else {
            (bank.base_sample(q), 0.0, 0.0, 0.0)
        };
        // q = t - tau - psi
        let w = ws.value;
        let w_x = -ws.d_time * tau_x + ws.d_cutoff * omega_x;
        let w_z = -ws.d_time * tau_z + ws.d_cutoff * omega_z;
        let w_c = -ws.d_time * tau_c + ws.d_cutoff * omega_c;
        let w_t0 = if self.features.time_offset { ws.d_time } else { 0.0 };
        let (w_la, w_lb) = if self.features.waveform_deformation {
            (ws.d_cutoff, ws.d_cutoff * tau)
        } else {
            (0.0, 0.0)
        };

        // Directivity product and its partials.
        let (mut dir, mut dir_x, mut dir_z, mut dir_c, mut dir_elw) = (1.0, 0.0, 0.0, 0.0, 0.0);
        if self.features.directivity {
            let k = params.element_width * fc / c;
            let side = |s: f64, co: f64, d: f64| {
                let u = k * s;
                let sn = sinc(u);
                let dsn = sinc_derivative(u);
                let b = sn * co;
                let s_x = co * co / d;
                let s_z = -s * co / d;
                let c_x = -s * co / d;
                let c_z = s * s / d;
                let b_x = dsn * k * s_x * co + sn * c_x;
                let b_z = dsn * k * s_z * co + sn * c_z;
                let b_elw = dsn * (fc / c) * s * co;
                let b_c = dsn * (-u / c) * co;
                (b, b_x, b_z, b_c, b_elw)
            };
            let (bt, bt_x, bt_z, bt_c, bt_e) = side(st, ct, dt);
            let (br, br_x, br_z, br_c, br_e) = side(sr, cr, dr);
            dir = bt * br;
            dir_x = bt_x * br + bt * br_x;
            dir_z = bt_z * br + bt * br_z;
            dir_c = bt_c * br + bt * br_c;
            dir_elw = bt_e * br + bt * br_e;
        }

        // Positive factors handled through log-derivatives.
        let mut pos = self.scheme.apodization[ctx.tx][txel];
        let (mut lx, mut lz, mut lmu) = (0.0, 0.0, 0.0);
        if self.features.absorption {
            let kappa = absorption_rate(fc);
            let mu = params.attenuation_coeff;
            pos *= (-kappa * mu * (dt + dr)).exp();
            lx += -kappa * mu * (st + sr);
            lz += -kappa * mu * (ct + cr);
            lmu = -kappa * (dt + dr);
        }
        if self.features.spread {
            let r = params.scatterer_radius;
            pos *= (r / dt) * (r / dr);
            lx += -(st / dt + sr / dr);
            lz += -(ct / dt + cr / dr);
        }

        let g = pos * dir;
        TermGrad {
            value: g * w,
            x: pos * ((dir_x + dir * lx) * w + dir * w_x),
            z: pos * ((dir_z + dir * lz) * w + dir * w_z),
            c: pos * (dir_c * w + dir * w_c),
            elw: pos * dir_elw * w,
            mu: g * lmu * w,
            t0: g * w_t0,
            la: g * w_la,
            lb: g * w_lb,
        }
    }

    /// Firing element that the wavefront reaches first (lowest index on ties).
    #[inline]
    fn first_arrival(&self, tx: usize, p: [f64; 2], c: f64) -> usize {
        let mut best = usize::MAX;
        let mut best_t = f64::INFINITY;
        for &e in &self.firing[tx] {
            let t = travel_time(self.geometry.element_positions[e], p, c) + self.scheme.delays[tx][e];
            if t < best_t {
                best_t = t;
                best = e;
            }
        }
        best
    }

    fn check_field(&self, field: &ScattererField, params: &ModelParams) -> Result<()> {
        if field.positions.len() != field.amplitudes.len() {
            return Err(Error::ShapeMismatch("scatterer positions and amplitudes differ in length".into()));
        }
        if params.element_gain.len() != self.n_ch() {
            return Err(Error::ShapeMismatch(format!(
                "{} element gains for {} channels",
                params.element_gain.len(),
                self.n_ch()
            )));
        }
        Ok(())
    }

    /// Direct evaluation of the full model for one sample, summing over
    /// every firing element and every scatterer.
    pub fn predict_sample_full(&self, idx: SampleIndex, field: &ScattererField, params: &ModelParams) -> Result<f64> {
        self.check_index(idx)?;
        self.check_field(field, params)?;
        let ctx = self.ctx(idx, params);
        let mut acc = 0.0;
        for &txel in &self.firing[idx.tx] {
            for (p, &a) in field.positions.iter().zip(&field.amplitudes) {
                Self::check_distance(dist(*p, self.geometry.element_positions[txel]))?;
                Self::check_distance(dist(*p, self.geometry.element_positions[idx.ch]))?;
                acc += a * self.term_value(&ctx, *p, txel, params);
            }
        }
        Ok(ctx.scale * acc)
    }

    /// Direct evaluation of the wavefront-only model for one sample.
    pub fn predict_sample_wavefront(
        &self,
        idx: SampleIndex,
        field: &ScattererField,
        params: &ModelParams,
    ) -> Result<f64> {
        self.check_index(idx)?;
        self.check_field(field, params)?;
        let ctx = self.ctx(idx, params);
        let mut acc = 0.0;
        for (p, &a) in field.positions.iter().zip(&field.amplitudes) {
            for &e in &self.firing[idx.tx] {
                Self::check_distance(dist(*p, self.geometry.element_positions[e]))?;
            }
            Self::check_distance(dist(*p, self.geometry.element_positions[idx.ch]))?;
            let txel = self.first_arrival(idx.tx, *p, params.speed_of_sound);
            acc += a * self.term_value(&ctx, *p, txel, params);
        }
        Ok(ctx.scale * acc)
    }

    /// Single-sample prediction with the configured model kind.
    pub fn predict_sample(&self, idx: SampleIndex, field: &ScattererField, params: &ModelParams) -> Result<f64> {
        match self.kind {
            ModelKind::Full => self.predict_sample_full(idx, field, params),
            ModelKind::Wavefront => self.predict_sample_wavefront(idx, field, params),
        }
    }

    /// Predictions for a list of samples, in input order.
    pub fn predict_batch(&self, indices: &[SampleIndex], field: &ScattererField, params: &ModelParams) -> Result<Vec<f64>> {
        self.check_field(field, params)?;
        for &idx in indices {
            self.check_index(idx)?;
        }
        let order = grouped_order(indices);
        let chunks: Vec<Result<Vec<(usize, f64)>>> = order
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut out = Vec::with_capacity(chunk.len());
                self.walk_groups(indices, chunk, field, params, |pos, ctx, pairs| {
                    let mut acc = 0.0;
                    for &(txel, s) in pairs {
                        acc += field.amplitudes[s] * self.term_value(ctx, field.positions[s], txel, params);
                    }
                    out.push((pos, ctx.scale * acc));
                })?;
                Ok(out)
            })
            .collect();
        let mut result = vec![0.0; indices.len()];
        for chunk in chunks {
            for (i, v) in chunk? {
                result[i] = v;
            }
        }
        Ok(result)
    }

    /// Full RF cube prediction in cube layout.
    pub fn predict_cube(&self, field: &ScattererField, params: &ModelParams) -> Result<Vec<f64>> {
        let indices = cube_indices(self.n_tx(), self.n_ft(), self.n_ch());
        self.predict_batch(&indices, field, params)
    }

    /// Sum over samples of `(prediction - observed)^2` and its gradient with
    /// respect to the physical quantities.
    pub fn squared_error_gradient(
        &self,
        indices: &[SampleIndex],
        observed: &[f64],
        field: &ScattererField,
        params: &ModelParams,
    ) -> Result<(f64, PhysicalGradient)> {
        self.check_field(field, params)?;
        if observed.len() != indices.len() {
            return Err(Error::ShapeMismatch("observed values and indices differ in length".into()));
        }
        for &idx in indices {
            self.check_index(idx)?;
        }
        let n_sc = field.len();
        let n_ch = self.n_ch();
        let order = grouped_order(indices);
        let partials: Vec<Result<(f64, PhysicalGradient)>> = order
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grad = PhysicalGradient::zeros(n_sc, n_ch);
                let mut sse = 0.0;
                let mut terms: Vec<(usize, TermGrad)> = Vec::new();
                self.walk_groups(indices, chunk, field, params, |pos, ctx, pairs| {
                    terms.clear();
                    let mut acc = 0.0;
                    for &(txel, s) in pairs {
                        let tg = self.term_grad(ctx, field.positions[s], txel, params);
                        acc += field.amplitudes[s] * tg.value;
                        terms.push((s, tg));
                    }
                    let r = ctx.scale * acc - observed[pos];
                    sse += r * r;
                    if self.features.element_gain {
                        grad.element_gain[ctx.ch] += 2.0 * r * ctx.tgc * acc;
                    }
                    let w = 2.0 * r * ctx.scale;
                    for (s, tg) in &terms {
                        let s = *s;
                        let wa = w * field.amplitudes[s];
                        grad.amplitudes[s] += w * tg.value;
                        grad.positions[s][0] += wa * tg.x;
                        grad.positions[s][1] += wa * tg.z;
                        grad.speed_of_sound += wa * tg.c;
                        grad.element_width += wa * tg.elw;
                        grad.attenuation_coeff += wa * tg.mu;
                        grad.initial_time_offset += wa * tg.t0;
                        grad.lowpass_intercept += wa * tg.la;
                        grad.lowpass_slope += wa * tg.lb;
                    }
                })?;
                Ok((sse, grad))
            })
            .collect();
        let mut total = PhysicalGradient::zeros(n_sc, n_ch);
        let mut sse = 0.0;
        for p in partials {
            let (s, g) = p?;
            sse += s;
            total.add(&g);
        }
        Ok((sse, total))
    }

    /// Visits the samples of `chunk` (positions into `indices`, already
    /// grouped by `(tx, ch)`). For each sample, `eval` receives its position
    /// in `indices`, its context, and the `(transmit element, scatterer)`
    /// pairs whose echo may reach it, in transmit-element-major order.
    fn walk_groups<F>(
        &self,
        indices: &[SampleIndex],
        chunk: &[usize],
        field: &ScattererField,
        params: &ModelParams,
        mut eval: F,
    ) -> Result<()>
    where
        F: FnMut(usize, &SampleCtx, &[(usize, usize)]),
    {
        let n_sc = field.len();
        let c = params.speed_of_sound;
        // per transmit: arrival per (scatterer, firing element), its range and argmin
        let mut tx_arr: Vec<f64> = Vec::new();
        let mut tx_lo = vec![0.0; n_sc];
        let mut tx_hi = vec![0.0; n_sc];
        let mut first = vec![0usize; n_sc];
        // per (tx, ch): receive travel time
        let mut rx = vec![0.0; n_sc];
        let mut cands: Vec<usize> = Vec::new();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut current_tx = usize::MAX;
        let mut current_group = (usize::MAX, usize::MAX);

        for &pos in chunk {
            let idx = indices[pos];
            let firing = &self.firing[idx.tx];
            let nf = firing.len();
            if idx.tx != current_tx {
                current_tx = idx.tx;
                tx_arr.resize(n_sc * nf, 0.0);
                for s in 0..n_sc {
                    let p = field.positions[s];
                    let (mut lo, mut hi, mut arg) = (f64::INFINITY, f64::NEG_INFINITY, usize::MAX);
                    for (k, &e) in firing.iter().enumerate() {
                        let d = dist(p, self.geometry.element_positions[e]);
                        Self::check_distance(d)?;
                        let t = d / c + self.scheme.delays[idx.tx][e];
                        tx_arr[s * nf + k] = t;
                        if t < lo {
                            lo = t;
                            arg = e;
                        }
                        hi = hi.max(t);
                    }
                    tx_lo[s] = lo;
                    tx_hi[s] = hi;
                    first[s] = arg;
                }
            }
            if (idx.tx, idx.ch) != current_group {
                current_group = (idx.tx, idx.ch);
                let e_r = self.geometry.element_positions[idx.ch];
                for s in 0..n_sc {
                    let d = dist(field.positions[s], e_r);
                    Self::check_distance(d)?;
                    rx[s] = d / c;
                }
            }
            let ctx = self.ctx(idx, params);
            let bank = &self.banks[idx.tx];
            // the echo of a pair arriving at time `a` is nonzero only for
            // t - a within the pulse support
            let latest = ctx.t - bank.start_time + CULL_SLACK;
            let earliest = ctx.t - bank.end_time() - CULL_SLACK;
            cands.clear();
            pairs.clear();
            match self.kind {
                ModelKind::Full => {
                    for s in 0..n_sc {
                        if tx_lo[s] + rx[s] <= latest && tx_hi[s] + rx[s] >= earliest {
                            cands.push(s);
                        }
                    }
                    for (k, &e) in firing.iter().enumerate() {
                        for &s in &cands {
                            let a = tx_arr[s * nf + k] + rx[s];
                            if a <= latest && a >= earliest {
                                pairs.push((e, s));
                            }
                        }
                    }
                }
                ModelKind::Wavefront => {
                    for s in 0..n_sc {
                        let a = tx_lo[s] + rx[s];
                        if a <= latest && a >= earliest {
                            pairs.push((first[s], s));
                        }
                    }
                }
            }
            eval(pos, &ctx, &pairs);
        }
        Ok(())
    }
}

#[inline]
fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dz = a[1] - b[1];
    (dx * dx + dz * dz).sqrt()
}

/// Positions into `indices` ordered by `(tx, ch, ft)`, ties by position.
fn grouped_order(indices: &[SampleIndex]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..indices.len()).collect();
    order.sort_by_key(|&i| (indices[i].tx, indices[i].ch, indices[i].ft, i));
    order
}

/// Every index of a cube in storage order.
pub fn cube_indices(n_tx: usize, n_ft: usize, n_ch: usize) -> Vec<SampleIndex> {
    let mut v = Vec::with_capacity(n_tx * n_ft * n_ch);
    for tx in 0..n_tx {
        for ft in 0..n_ft {
            for ch in 0..n_ch {
                v.push(SampleIndex { tx, ft, ch });
            }
        }
    }
    v
}
