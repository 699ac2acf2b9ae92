use infer_core::acquisition::{ModelParams, RFDataCube, ScattererField};
use infer_core::beamform::{beamform_rf, compound_and_compress, Method, PipelineSettings, PixelGrid};
use infer_core::forward::ModelKind;
use infer_core::metrics::*;
use infer_core::phantom::{simulate_rf, DeskAcquisition};
use infer_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn half_overlapping_uniforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a: Vec<f64> = (0..1_000_000).map(|_| rng.random_range(0.0..1.0)).collect();
    let b: Vec<f64> = (0..1_000_000).map(|_| rng.random_range(0.5..1.5)).collect();
    let g = gcnr_values(&a, &b, 256).unwrap();
    assert!((g - 0.5).abs() <= 0.02, "{g}");
}

#[test]
fn disjoint_and_identical_regions() {
    let grid = PixelGrid::new(10, 10, [0.0, 0.0], [1.0, 1.0]).unwrap();
    let data: Vec<f64> = (0..100).map(|i| if i < 50 { -40.0 + (i % 7) as f64 } else { -5.0 + (i % 3) as f64 }).collect();
    let img = infer_core::beamform::Image { grid, data };
    let top = RegionMask::new(grid, (0..100).map(|i| i < 50).collect()).unwrap();
    let bottom = RegionMask::new(grid, (0..100).map(|i| i >= 50).collect()).unwrap();
    assert_eq!(gcnr(&img, &top, &bottom, 256).unwrap(), 1.0);
    let flat = infer_core::beamform::Image { grid, data: vec![-3.0; 100] };
    assert_eq!(gcnr(&flat, &top, &bottom, 256).unwrap(), 0.0);
}

#[test]
fn mse_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut a = RFDataCube::zeros(2, 16, 3);
    let mut b = a.clone();
    a.samples.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    b.samples.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let mut s = 0.0;
    for tx in 0..2 {
        for ft in 0..16 {
            for ch in 0..3 {
                s += (a.get(tx, ft, ch) - b.get(tx, ft, ch)).powi(2);
            }
        }
    }
    assert!((rf_mse(&a, &b).unwrap() - s / 96.0).abs() < 1e-15);
}

fn observed() -> (DeskAcquisition, RFDataCube, f64) {
    let acq = DeskAcquisition { n_channels: 16, n_fast_time: 384, ..Default::default() };
    let geo = acq.geometry();
    let scheme = acq.plane_waves(&[0.0], 1540.0);
    let mut params = ModelParams::nominal(&geo);
    params.speed_of_sound = 1540.0;
    let field = ScattererField::new(vec![[0.2e-3, 7e-3], [-0.8e-3, 9e-3]], vec![1.0, 0.6]);
    let rf = simulate_rf(&field, &params, &geo, &scheme, &vec![1.0; 384], 0.0, &mut ChaCha8Rng::seed_from_u64(0), ModelKind::Full).unwrap();
    (acq, rf, 1540.0)
}

#[test]
fn residual_of_a_perfect_fit_is_empty() {
    let (acq, rf, c) = observed();
    let grid = PixelGrid::covering(-2e-3, 2e-3, 6e-3, 10e-3, 1e-4, 1e-4).unwrap();
    let r = residual_image(&rf, &rf, &acq.geometry(), &acq.plane_waves(&[0.0], c), c, &grid, &PipelineSettings::default());
    assert!(matches!(r, Err(Error::EmptyImage)));
}

#[test]
fn residual_against_nothing_is_the_observed_image() {
    let (acq, rf, c) = observed();
    let (geo, scheme) = (acq.geometry(), acq.plane_waves(&[0.0], c));
    let grid = PixelGrid::covering(-2e-3, 2e-3, 6e-3, 10e-3, 1e-4, 1e-4).unwrap();
    let settings = PipelineSettings::default();
    let zero = RFDataCube::zeros(rf.n_tx, rf.n_ft, rf.n_ch);
    let r = residual_image(&rf, &zero, &geo, &scheme, c, &grid, &settings).unwrap();
    let images = beamform_rf(&rf, &geo, &scheme, c, &grid, &Method::Das, &settings).unwrap();
    let direct = compound_and_compress(&images, &grid, 60.0, false).unwrap();
    assert_eq!(r, direct);
    assert_eq!(residual_peak_db(&rf, &zero, &geo, &scheme, c, &grid, &settings).unwrap(), 0.0);
}

#[test]
fn gcnr_tolerates_monotone_remaps_on_dense_samples() {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 200_000;
    let a: Vec<f64> = Normal::new(0.0, 1.0).unwrap().sample_iter(&mut rng).take(n).collect();
    let b: Vec<f64> = Normal::new(1.0, 0.7).unwrap().sample_iter(&mut rng).take(n).collect();
    let bins = 256;
    let base = gcnr_values(&a, &b, bins).unwrap();
    let maps: [fn(f64) -> f64; 4] = [|v| v * v * v + v, |v| (0.5 * v).exp(), f64::atan, |v| (0.3 * v).sinh()];
    for map in maps {
        let ra: Vec<f64> = a.iter().map(|v| map(*v)).collect();
        let rb: Vec<f64> = b.iter().map(|v| map(*v)).collect();
        let g = gcnr_values(&ra, &rb, bins).unwrap();
        assert!((g - base).abs() <= 2.0 / bins as f64, "{g} vs {base}");
    }
}

proptest! {
    #[test]
    fn gcnr_is_symmetric(a in prop::collection::vec(-10.0f64..10.0, 1..200), b in prop::collection::vec(-10.0f64..10.0, 1..200)) {
        prop_assert_eq!(gcnr_values(&a, &b, 256).unwrap(), gcnr_values(&b, &a, 256).unwrap());
    }

    #[test]
    fn gcnr_tolerates_affine_remaps(
        a in prop::collection::vec(0.0f64..1.0, 50..300),
        b in prop::collection::vec(0.2f64..1.5, 50..300),
        k in 0.2f64..5.0,
        shift in -3.0f64..3.0,
    ) {
        let bins = 64;
        let base = gcnr_values(&a, &b, bins).unwrap();
        let f = |v: &f64| k * v + shift;
        let affine = gcnr_values(&a.iter().map(f).collect::<Vec<_>>(), &b.iter().map(f).collect::<Vec<_>>(), bins).unwrap();
        prop_assert!((affine - base).abs() <= 2.0 / bins as f64);
    }

    #[test]
    fn mse_is_symmetric_and_nonnegative(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 12)) {
        let a = RFDataCube { n_tx: 1, n_ft: 4, n_ch: 3, samples: v.iter().map(|p| p.0).collect(), tgc_curve: vec![1.0; 4] };
        let b = RFDataCube { samples: v.iter().map(|p| p.1).collect(), ..a.clone() };
        let m = rf_mse(&a, &b).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert_eq!(m, rf_mse(&b, &a).unwrap());
        prop_assert_eq!(m == 0.0, a == b);
    }
}
