//! Subcommand bodies, usable without going through argv.

use crate::config::{RunConfig, TransmitKind};
use crate::container::{quantize, write_image, Container, RfFile};
use infer_core::acquisition::{tgc_ramp, ModelParams, RFDataCube, TransmitScheme};
use infer_core::beamform::{beamform_rf, compound_magnitude, log_compress, Image, Method, PixelGrid};
use infer_core::forward::{Ablation, ForwardModel};
use infer_core::metrics::{gcnr, residual_peak_db, rf_mse, RegionMask};
use infer_core::optim::{solve_with, Checkpoint, Solution, SolverConfig};
use infer_core::phantom::{gen_phantom, simulate_rf, SceneSpec, Wire};
use infer_core::red::{build_phi, red_compound, red_solve};
use infer_core::render::kde_image;
use infer_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::{Path, PathBuf};

pub fn transmit_scheme(cfg: &RunConfig) -> Result<TransmitScheme> {
    let acq = &cfg.acquisition;
    let n = acq.desk.n_channels;
    if acq.elements.iter().any(|&e| e >= n) {
        return Err(Error::Config(format!("transmit element index out of range (array has {n} elements)")));
    }
    match acq.transmit {
        TransmitKind::Single | TransmitKind::Group if acq.elements.is_empty() => {
            Err(Error::Config("element transmits need a non-empty element list".into()))
        }
        TransmitKind::Single => Ok(acq.desk.single_element(&acq.elements)),
        TransmitKind::Group => Ok(acq.desk.element_group(&acq.elements)),
        TransmitKind::Plane if acq.angles_deg.is_empty() => Err(Error::Config("plane-wave transmits need at least one angle".into())),
        TransmitKind::Plane => {
            let angles: Vec<f64> = acq.angles_deg.iter().map(|a| a.to_radians()).collect();
            Ok(acq.desk.plane_waves(&angles, cfg.simulate.speed_of_sound))
        }
    }
}

pub fn truth_params(cfg: &RunConfig) -> ModelParams {
    let geo = cfg.acquisition.desk.geometry();
    let s = &cfg.simulate;
    ModelParams {
        speed_of_sound: s.speed_of_sound,
        attenuation_coeff: s.attenuation_coeff,
        element_width: s.element_width_fraction * geo.element_width_nominal,
        element_gain: vec![s.element_gain; geo.n_channels()],
        initial_time_offset: s.initial_time_offset,
        lowpass_intercept: s.lowpass_intercept,
        lowpass_slope: s.lowpass_slope,
        ..ModelParams::nominal(&geo)
    }
}

/// Phantom, clean simulation and additive noise. The scene is drawn from
/// stream 0 of the seed and the noise from stream 1.
pub fn simulate(cfg: &RunConfig) -> Result<RfFile> {
    let geometry = cfg.acquisition.desk.geometry();
    let scheme = transmit_scheme(cfg)?;
    let params = truth_params(cfg);
    let sc = &cfg.scene;
    let mut spec = SceneSpec::new(sc.extent, geometry.wavelength(params.speed_of_sound));
    spec.density_per_wavelength2 = sc.density_per_wavelength2;
    spec.amplitude_range = sc.amplitude_range;
    spec.cysts = sc.cysts.clone();
    spec.wires = sc.wires.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.simulate.seed);
    if sc.random_wires > 0 {
        let e = sc.extent;
        let m = sc.wire_margin;
        if !(e.x_max - e.x_min > 2.0 * m && e.z_max - e.z_min > 2.0 * m) || sc.amplitude_range.1 < sc.amplitude_range.0 {
            return Err(Error::Config("wire margin leaves no room inside the scene extent".into()));
        }
        for _ in 0..sc.random_wires {
            let position = [rng.random_range(e.x_min + m..e.x_max - m), rng.random_range(e.z_min + m..e.z_max - m)];
            let amplitude = rng.random_range(sc.amplitude_range.0..=sc.amplitude_range.1);
            spec.wires.push(Wire { position, amplitude });
        }
    }
    let field = gen_phantom(&spec, &mut rng)?;
    let n_ft = cfg.acquisition.desk.n_fast_time;
    let tgc = if cfg.acquisition.tgc_db == 0.0 { vec![1.0; n_ft] } else { tgc_ramp(n_ft, cfg.acquisition.tgc_db) };
    let mut data = simulate_rf(&field, &params, &geometry, &scheme, &tgc, 0.0, &mut rng, cfg.simulate.model_kind)?;
    let noise = cfg.simulate.noise;
    if noise < 0.0 {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    if noise > 0.0 {
        let peak = data.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let sigma = noise * peak / tgc[n_ft - 1];
        let normal = Normal::new(0.0, sigma).map_err(|_| Error::Config("bad noise level".into()))?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.simulate.seed);
        noise_rng.set_stream(1);
        let n_ch = data.n_ch;
        for (i, v) in data.samples.iter_mut().enumerate() {
            *v += tgc[(i / n_ch) % n_ft] * normal.sample(&mut noise_rng);
        }
    }
    quantize(&mut data);
    Ok(RfFile { geometry, scheme, data, truth_field: Some(field), truth_params: Some(params) })
}

/// Full-cube prediction of a solution under the solver's model settings.
pub fn predict(rf: &RfFile, solver: &SolverConfig, sol: &Solution) -> Result<RFDataCube> {
    let model = ForwardModel::new(&rf.geometry, &rf.scheme, Some(&rf.data.tgc_curve), solver.model_kind, solver.features)?;
    let samples = model.predict_cube(&sol.field, &sol.params)?;
    Ok(RFDataCube { samples, ..rf.data.clone() })
}

pub struct Reconstruction {
    pub solution: Solution,
    pub image: Image,
}

pub fn reconstruct(rf: &RfFile, cfg: &RunConfig, resume: Option<Checkpoint>, checkpoint_path: Option<&Path>) -> Result<Reconstruction> {
    let mut on_checkpoint = |cp: &Checkpoint| -> Result<()> {
        if let Some(p) = checkpoint_path {
            crate::container::write_value(p, "checkpoint", cp)?;
        }
        Ok(())
    };
    let solution = solve_with(&rf.data, &rf.geometry, &rf.scheme, &cfg.solver, resume, &mut on_checkpoint)?;
    log::info!(
        "solved in {:.1} s: c = {:.2} m/s, final batch loss {:e}",
        solution.wall_time,
        solution.params.speed_of_sound,
        solution.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    let image = render(&solution, rf, cfg)?;
    Ok(Reconstruction { solution, image })
}

pub fn render(sol: &Solution, rf: &RfFile, cfg: &RunConfig) -> Result<Image> {
    let grid = cfg.image.grid()?;
    let r = cfg.render.radius_wavelengths * rf.geometry.wavelength(sol.params.speed_of_sound);
    kde_image(&sol.field, &grid, r, cfg.render.weight_by_amplitude)
}

pub fn write_solution(path: &Path, sol: &Solution, solver: &SolverConfig) -> Result<()> {
    let mut c = Container::new("solution");
    c.set("value", sol)?;
    c.set("solver", solver)?;
    c.write(path)
}

pub fn read_solution(path: &Path) -> Result<(Solution, SolverConfig)> {
    let c = Container::read(path)?.expect_kind("solution")?;
    Ok((c.get("value")?, c.get("solver")?))
}

pub fn parse_method(name: &str, cfg: &RunConfig) -> Result<Method> {
    match name {
        "das" => Ok(Method::Das),
        "mv" => Ok(Method::Mv(cfg.beamform.mv)),
        "dmas" => Ok(Method::Dmas),
        other => Err(Error::Config(format!("unknown beamformer '{other}'"))),
    }
}

/// Compounded linear magnitude.
pub fn beamform(rf: &RfFile, cfg: &RunConfig, method: &Method) -> Result<Image> {
    let grid = cfg.image.grid()?;
    let settings = cfg.beamform.pipeline(cfg.image.dynamic_range_db);
    let images = beamform_rf(&rf.data, &rf.geometry, &rf.scheme, cfg.beamform.speed_of_sound, &grid, method, &settings)?;
    Ok(Image { grid, data: compound_magnitude(&images, settings.incoherent) })
}

/// Per-transmit RED solutions averaged over transmits.
pub fn red(rf: &RfFile, cfg: &RunConfig) -> Result<Image> {
    let grid = cfg.image.grid()?;
    let block = rf.data.n_ft * rf.data.n_ch;
    let mut xs = Vec::with_capacity(rf.data.n_tx);
    for tx in 0..rf.data.n_tx {
        let phi = build_phi(&grid, &rf.geometry, &rf.scheme, cfg.beamform.speed_of_sound, rf.geometry.sampling_frequency, tx)?;
        let y = &rf.data.samples[tx * block..(tx + 1) * block];
        let sol = red_solve(y, &phi, &grid, &cfg.red)?;
        log::info!("RED transmit {tx}: {} outer iterations", sol.iterations);
        xs.push(sol.x);
    }
    Ok(Image { grid, data: red_compound(&xs)? })
}

/// `disk:x,z,r`, `annulus:x,z,r_in,r_out` or `rect:x_min,x_max,z_min,z_max`, meters.
pub fn parse_region(spec: &str, grid: PixelGrid) -> Result<RegionMask> {
    let bad = || Error::Config(format!("bad region '{spec}'"));
    let (kind, rest) = spec.split_once(':').ok_or_else(bad)?;
    let v: Vec<f64> = rest.split(',').map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    match (kind, v.as_slice()) {
        ("disk", &[x, z, r]) => RegionMask::disk(grid, [x, z], r),
        ("annulus", &[x, z, a, b]) => RegionMask::annulus(grid, [x, z], a, b),
        ("rect", &[x0, x1, z0, z1]) => {
            let mask = (0..grid.len())
                .map(|i| {
                    let p = grid.position_of(i);
                    p[0] >= x0 && p[0] <= x1 && p[1] >= z0 && p[1] <= z1
                })
                .collect();
            RegionMask::new(grid, mask)
        }
        _ => Err(bad()),
    }
}

/// `key=value` report of region statistics.
pub fn region_metrics(image: &Image, a: &RegionMask, b: &RegionMask, cfg: &RunConfig) -> Result<Vec<(String, f64)>> {
    let shown = if cfg.metrics.linear {
        Image { grid: image.grid, data: image.data.iter().map(|v| v.abs()).collect() }
    } else {
        log_compress(&image.data, &image.grid, cfg.image.dynamic_range_db)?
    };
    let g = gcnr(&shown, a, b, cfg.metrics.bins)?;
    let mean = |m: &RegionMask| {
        let v: Vec<f64> = m.mask.iter().zip(&image.data).filter(|(k, _)| **k).map(|(_, x)| x.abs()).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let (ma, mb) = (mean(a), mean(b));
    Ok(vec![
        ("gcnr".into(), g),
        ("pixels_a".into(), a.count() as f64),
        ("pixels_b".into(), b.count() as f64),
        ("contrast_db".into(), 20.0 * (ma / mb).log10()),
    ])
}

/// RF fit of a solution: full-cube MSE and DAS residual peak.
pub fn fit_metrics(rf: &RfFile, sol: &Solution, solver: &SolverConfig, cfg: &RunConfig) -> Result<Vec<(String, f64)>> {
    let pred = predict(rf, solver, sol)?;
    let grid = cfg.image.grid()?;
    let settings = cfg.beamform.pipeline(cfg.image.dynamic_range_db);
    let c = sol.params.speed_of_sound;
    Ok(vec![
        ("rf_mse".into(), rf_mse(&rf.data, &pred)?),
        ("residual_peak_db".into(), residual_peak_db(&rf.data, &pred, &rf.geometry, &rf.scheme, c, &grid, &settings)?),
        ("speed_of_sound".into(), c),
    ])
}

pub struct AblationRow {
    pub ablation: Ablation,
    pub rf_mse: f64,
    pub holdout_mse: f64,
}

/// One solve per row, with that row's feature removed from the model.
pub fn ablate(rf: &RfFile, cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    Ablation::ALL
        .iter()
        .map(|&ablation| {
            let mut solver = cfg.solver.clone();
            solver.features = ablation.features();
            let sol = solve_with(&rf.data, &rf.geometry, &rf.scheme, &solver, None, |_| Ok(()))?;
            let pred = predict(rf, &solver, &sol)?;
            let row = AblationRow {
                ablation,
                rf_mse: rf_mse(&rf.data, &pred)?,
                holdout_mse: sol.holdout_trace.last().map_or(f64::NAN, |h| h.1),
            };
            log::info!("{}: rf_mse {:e}, held-out {:e}", ablation.label(), row.rf_mse, row.holdout_mse);
            Ok(row)
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("feature\trf_mse\tholdout_mse\n");
    for r in rows {
        out.push_str(&format!("{}\t{:e}\t{:e}\n", r.ablation.label(), r.rf_mse, r.holdout_mse));
    }
    out
}

/// 8-bit grayscale of the log-compressed magnitude, depth down.
pub fn write_png(path: &Path, image: &Image, dynamic_range_db: f64) -> Result<()> {
    let db = log_compress(&image.data, &image.grid, dynamic_range_db)?;
    let pixels: Vec<u8> = db.data.iter().map(|v| ((v + dynamic_range_db) / dynamic_range_db * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, image.grid.nx as u32, image.grid.nz as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format(format!("png: {e}"));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Image as a container plus a PNG next to it.
pub fn export_image(prefix: &Path, suffix: &str, image: &Image, source: &str, dynamic_range_db: f64) -> Result<Vec<PathBuf>> {
    let raw = with_suffix(prefix, &format!("{suffix}.usrf"));
    let png = with_suffix(prefix, &format!("{suffix}.png"));
    write_image(&raw, image, source)?;
    write_png(&png, image, dynamic_range_db)?;
    Ok(vec![raw, png])
}

/// `prefix` with `.suffix` appended to the file name.
pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
