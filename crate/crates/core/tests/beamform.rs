use infer_core::acquisition::{ModelParams, RFDataCube, ScattererField, TransducerGeometry, TransmitScheme};
use infer_core::beamform::*;
use infer_core::forward::ModelKind;
use infer_core::phantom::{simulate_rf, DeskAcquisition};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const FC: f64 = 5e6;
const FS: f64 = 20e6;

fn tone(freq: f64, n: usize, t0: f64) -> RFDataCube {
    let samples = (0..n).map(|k| (2.0 * PI * freq * (t0 + k as f64 / FS)).cos()).collect();
    RFDataCube { n_tx: 1, n_ft: n, n_ch: 1, samples, tgc_curve: vec![1.0; n] }
}

#[test]
fn pure_tone_has_unit_envelope() {
    let iq = iq_demodulate(&tone(FC, 512, 3e-6), FC, FS, 3e-6, 5, 3e6).unwrap();
    for ft in 128..384 {
        let v = iq.get(0, ft, 0);
        assert!((v.norm() - 1.0).abs() < 1e-2, "{ft}: {}", v.norm());
        // the carrier is removed, leaving a constant phase
        assert!(v.arg().abs() < 1e-2);
    }
}

#[test]
fn zero_in_zero_out() {
    let rf = RFDataCube::zeros(2, 64, 3);
    let iq = iq_demodulate(&rf, FC, FS, 0.0, 5, 3e6).unwrap();
    assert!(iq.samples.iter().all(|v| *v == Complex64::new(0.0, 0.0)));
}

#[test]
fn rejects_undersampled_carrier() {
    assert!(iq_demodulate(&tone(FC, 16, 0.0), 12e6, FS, 0.0, 5, 3e6).is_err());
}

#[test]
fn offset_tone_becomes_baseband_exponential() {
    let n = 512;
    let delta = 0.5e6;
    let iq = iq_demodulate(&tone(FC + delta, n, 0.0), FC, FS, 0.0, 5, 3e6).unwrap();
    // direct DFT of the central segment; the peak sits at +delta
    let seg: Vec<Complex64> = (128..384).map(|ft| iq.get(0, ft, 0)).collect();
    let m = seg.len();
    let power = |k: i64| -> f64 {
        seg.iter()
            .enumerate()
            .map(|(i, v)| v * Complex64::from_polar(1.0, -2.0 * PI * k as f64 * i as f64 / m as f64))
            .sum::<Complex64>()
            .norm()
    };
    let (best, _) = (-(m as i64) / 2..(m as i64) / 2).map(|k| (k, power(k))).fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let expected = (delta / FS * m as f64).round() as i64;
    assert_eq!(best, expected);
    // magnitude follows the filter response at delta
    let g = butterworth_gain(delta, 3e6, 5);
    assert!((iq.get(0, 256, 0).norm() - g).abs() < 1e-2);
}

fn point_setup(n_ch: usize, target: [f64; 2]) -> (TransducerGeometry, TransmitScheme, RFDataCube, ModelParams) {
    let acq = DeskAcquisition { n_channels: n_ch, ..Default::default() };
    let geo = acq.geometry();
    let scheme = acq.plane_waves(&[0.0], 1540.0);
    let mut params = ModelParams::nominal(&geo);
    params.speed_of_sound = 1540.0;
    let field = ScattererField::new(vec![target], vec![1.0]);
    let tgc = vec![1.0; acq.n_fast_time];
    let rf = simulate_rf(&field, &params, &geo, &scheme, &tgc, 0.0, &mut ChaCha8Rng::seed_from_u64(0), ModelKind::Full).unwrap();
    (geo, scheme, rf, params)
}

fn demod(rf: &RFDataCube, scheme: &TransmitScheme) -> IQCube {
    iq_demodulate(rf, FC, FS, scheme.initial_time, 5, 3e6).unwrap()
}

#[test]
fn simulated_point_is_phase_coherent_after_correction() {
    let target = [0.4e-3, 8e-3];
    let (geo, scheme, rf, params) = point_setup(32, target);
    let iq = demod(&rf, &scheme);
    let u = tof_correct(&iq, target, &geo, &scheme, 0, params.speed_of_sound, &TofSettings { f_number: 1.0, ..Default::default() });
    let live: Vec<Complex64> = u.u.iter().copied().filter(|v| v.norm() > 0.0).collect();
    assert!(live.len() >= 8);
    let reference = live.iter().sum::<Complex64>().arg();
    for v in &live {
        let d = (v.arg() - reference + PI).rem_euclid(2.0 * PI) - PI;
        assert!(d.abs() < 1e-2, "phase spread {d}");
    }
}

#[test]
fn unmasked_and_fully_masked_apertures() {
    let (geo, scheme, rf, params) = point_setup(16, [0.0, 8e-3]);
    let iq = demod(&rf, &scheme);
    let c = params.speed_of_sound;
    let open = tof_correct(&iq, [0.0, 8e-3], &geo, &scheme, 0, c, &TofSettings::default());
    assert!(open.u.iter().all(|v| v.norm() > 0.0));
    let off = tof_correct(&iq, [40e-3, 8e-3], &geo, &scheme, 0, c, &TofSettings { f_number: 1.0, ..Default::default() });
    assert!(off.u.iter().all(|v| *v == Complex64::new(0.0, 0.0)));
    // beyond the recording
    let deep = tof_correct(&iq, [0.0, 80e-3], &geo, &scheme, 0, c, &TofSettings::default());
    assert!(deep.u.iter().all(|v| *v == Complex64::new(0.0, 0.0)));
}

#[test]
fn das_psf_peaks_at_the_scatterer() {
    let target = [0.33e-3, 7.71e-3];
    let (geo, scheme, rf, params) = point_setup(32, target);
    let iq = demod(&rf, &scheme);
    let lam = params.speed_of_sound / FC;
    let grid = PixelGrid::covering(-2e-3, 2e-3, 6e-3, 10e-3, lam / 4.0, lam / 4.0).unwrap();
    let images = beamform_image(&iq, &grid, &geo, &scheme, params.speed_of_sound, &Method::Das, &TofSettings::default()).unwrap();
    let img = compound_and_compress(&images, &grid, 60.0, false).unwrap();
    let (i, v) = img.argmax();
    assert_eq!(v, 0.0);
    let (tx, tz) = grid.nearest(target);
    let (px, pz) = (i % grid.nx, i / grid.nx);
    assert!(px.abs_diff(tx) <= 1 && pz.abs_diff(tz) <= 1, "peak ({px}, {pz}) vs ({tx}, {tz})");
}

#[test]
fn zero_data_and_repeated_transmits() {
    let (geo, scheme, rf, params) = point_setup(16, [0.0, 8e-3]);
    let grid = PixelGrid::covering(-1e-3, 1e-3, 7e-3, 9e-3, 1e-4, 1e-4).unwrap();
    let zero = RFDataCube::zeros(1, rf.n_ft, rf.n_ch);
    let im = beamform_image(&demod(&zero, &scheme), &grid, &geo, &scheme, params.speed_of_sound, &Method::Das, &TofSettings::default()).unwrap();
    assert!(im[0].iter().all(|v| *v == Complex64::new(0.0, 0.0)));

    let mut twice = scheme.clone();
    twice.delays.push(scheme.delays[0].clone());
    twice.apodization.push(scheme.apodization[0].clone());
    twice.waveforms.push(scheme.waveforms[0].clone());
    let mut doubled = RFDataCube::zeros(2, rf.n_ft, rf.n_ch);
    doubled.samples[..rf.len()].copy_from_slice(&rf.samples);
    doubled.samples[rf.len()..].copy_from_slice(&rf.samples);
    for method in [Method::Das, Method::Dmas, Method::Mv(MvParams { subaperture: 8, ..Default::default() })] {
        let im = beamform_image(&demod(&doubled, &twice), &grid, &geo, &twice, params.speed_of_sound, &method, &TofSettings::default()).unwrap();
        assert_eq!(im[0], im[1]);
    }
}

fn lateral_width_db6(n_ch: usize) -> f64 {
    let target = [0.0, 8e-3];
    let (geo, scheme, rf, params) = point_setup(n_ch, target);
    let iq = demod(&rf, &scheme);
    let grid = PixelGrid::covering(-3e-3, 3e-3, 8e-3, 8e-3, 10e-6, 1e-4).unwrap();
    let images = beamform_image(&iq, &grid, &geo, &scheme, params.speed_of_sound, &Method::Das, &TofSettings::default()).unwrap();
    let img = compound_and_compress(&images, &grid, 60.0, false).unwrap();
    img.data.iter().filter(|v| **v >= -6.0).count() as f64 * grid.spacing[0]
}

#[test]
fn psf_narrows_with_aperture() {
    let w: Vec<f64> = [8, 16, 32].iter().map(|&n| lateral_width_db6(n)).collect();
    assert!(w[0] > w[1] && w[1] > w[2], "{w:?}");
}

#[test]
fn mv_is_distortionless() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(4..33);
        let u = ApertureVector { u: (0..n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect() };
        let l = rng.random_range(1..=n);
        let w = mv_weights(&u, &MvParams { subaperture: l, loading: 1e-4, identity_covariance: false }).unwrap();
        let wa: Complex64 = w.iter().map(|v| v.conj()).sum();
        assert!((wa - 1.0).norm() < 1e-10, "{wa}");
    }
}

#[test]
fn mv_identity_hook_is_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let u = ApertureVector { u: (0..16).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect() };
    let z = mv(&u, &MvParams { subaperture: 16, loading: 1e-4, identity_covariance: true }).unwrap();
    let mean = u.u.iter().sum::<Complex64>() / 16.0;
    assert!((z - mean).norm() < 1e-14);
}

#[test]
fn dmas_coherent_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..5 {
        let v = Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        for n in [2usize, 8, 32] {
            let z = dmas(&ApertureVector { u: vec![v; n] });
            let expected = (n * (n - 1)) as f64 / 2.0 * v * v / v.norm();
            assert!((z - expected).norm() <= 1e-10 * expected.norm());
        }
    }
}

fn aperture(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3).prop_map(|(a, b)| Complex64::new(a, b)), n)
}

proptest! {
    #[test]
    fn das_is_linear(u in aperture(12), v in aperture(12)) {
        let sum = ApertureVector { u: u.iter().zip(&v).map(|(a, b)| a + b).collect() };
        let lhs = das(&sum);
        let rhs = das(&ApertureVector { u }) + das(&ApertureVector { u: v });
        prop_assert!((lhs - rhs).norm() <= 1e-9 * (1.0 + lhs.norm()));
    }

    #[test]
    fn dmas_doubles_common_phase(phase in -PI..PI, n in 2usize..20) {
        let v = Complex64::from_polar(1.0, phase);
        let z = dmas(&ApertureVector { u: vec![v; n] });
        let expected = Complex64::from_polar((n * (n - 1)) as f64 / 2.0, 2.0 * phase);
        prop_assert!((z - expected).norm() <= 1e-10 * expected.norm());
    }

    #[test]
    fn mv_scales_with_the_aperture(u in aperture(10), k in 0.01f64..100.0, l in 1usize..=10) {
        prop_assume!(u.iter().any(|v| v.norm() > 1e-3));
        let p = MvParams { subaperture: l, ..Default::default() };
        let base = ApertureVector { u: u.clone() };
        let z = mv(&base, &p).unwrap();
        let scaled = mv(&ApertureVector { u: u.iter().map(|v| v * k).collect() }, &p).unwrap();
        prop_assert!((scaled - z * k).norm() <= 1e-8 * (z.norm() * k).max(1e-12));
        let w = mv_weights(&ApertureVector { u: u.iter().map(|v| v * k).collect() }, &p).unwrap();
        let wa: Complex64 = w.iter().map(|v| v.conj()).sum();
        prop_assert!((wa - 1.0).norm() < 1e-10);
    }
}
