#![allow(dead_code)]

use infer_core::acquisition::{ModelParams, ScattererField, TransducerGeometry, TransmitScheme, Waveform};
use infer_core::forward::{Features, ForwardModel, ModelKind};

pub const FC: f64 = 5e6;
pub const FS: f64 = 20e6;

pub fn pulse() -> Waveform {
    Waveform::gaussian_pulse(FC, 0.6, 100e6)
}

pub fn geometry(n_ch: usize) -> TransducerGeometry {
    TransducerGeometry::linear(n_ch, 0.3e-3, 0.27e-3, FC, FS)
}

/// Two channels, 64 samples, one transmit fired by both elements with
/// slightly different delays.
pub fn toy_model(kind: ModelKind) -> ForwardModel {
    let geo = geometry(2);
    let mut scheme = TransmitScheme::element_groups(2, &[vec![0, 1]], &pulse(), 4.6e-6, 64);
    scheme.delays[0][1] = 0.07e-6;
    scheme.apodization[0][1] = 0.8;
    let tgc: Vec<f64> = (0..64).map(|i| 1.0 + 0.01 * i as f64).collect();
    ForwardModel::new(&geo, &scheme, Some(&tgc), kind, Features::all()).unwrap()
}

pub fn toy_field() -> ScattererField {
    ScattererField::new(
        vec![[-0.4e-3, 3.9e-3], [0.25e-3, 4.3e-3], [0.9e-3, 4.8e-3]],
        vec![1.1e7, 0.8e7, 1.4e7],
    )
}

pub fn toy_params(geo: &TransducerGeometry) -> ModelParams {
    let mut p = ModelParams::nominal(geo);
    p.speed_of_sound = 1530.0;
    p.element_gain = (0..geo.n_channels()).map(|i| 0.7 + 0.05 * i as f64).collect();
    p.initial_time_offset = 0.03e-6;
    p
}

/// Small desk-scale linear array with single-element transmits.
pub fn single_element_model(n_ch: usize, n_ft: usize, firing: &[usize]) -> ForwardModel {
    let geo = geometry(n_ch);
    let scheme = TransmitScheme::single_element(n_ch, firing, &pulse(), 2.0e-6, n_ft);
    ForwardModel::new(&geo, &scheme, None, ModelKind::Full, Features::all()).unwrap()
}
