//! Command-line front end. Settings come from flags, then from the
//! `--config` file (same names as the long flags, `key = value`), then from
//! built-in defaults.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use reflectance::brdf::ReflectanceParams;
use reflectance::dataset::{
    default_light_dir, full_material_set, generate_dataset, material_random, viewpoint_grid, GenerateOptions, MapFormat,
};
use reflectance::fitter::{fit, FitOptions, MapGeometry};
use reflectance::imaging::LinearImage;
use reflectance::metrics::{param_error, ImagePairReport};
use reflectance::pipeline::{
    aggregate, build_buffers, estimate, evaluate, fallback_material, relight, round_trip, ConfigFile, EstimateOptions,
    Estimator, ParamTable, RoundTripConfig, SceneBundle, TriangleMapSet, ROUND_TRIP_FLOOR, SAMPLE_FLOOR,
};
use reflectance::regressor::{train_from_dir, RegressorConfig, TrainedModel};
use reflectance::renderer::TriangleMesh;
use reflectance::spherical::{dir_to_angles, ReflectanceMap};
use reflectance::Vec3;

#[derive(Parser)]
#[command(name = "refl", version, about = "Per-triangle reflectance estimation from posed images")]
#[command(arg_required_else_help = true, subcommand_required = true)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render sphere reflectance maps for random materials under the 24 training views.
    GenDataset(GenDataset),
    /// Train the map-to-parameter regressor on a generated dataset.
    Train(Train),
    /// Fit parameters to a single reflectance map.
    FitMap(FitMap),
    /// Build per-triangle reflectance maps from a scene bundle.
    Aggregate(Aggregate),
    /// Estimate per-triangle parameters from aggregated maps.
    Estimate(Estimate),
    /// Render every posed view of a scene with estimated parameters.
    Relight(Relight),
    /// Compare images: PSNR, NRMSE and DSSIM.
    Evaluate(Evaluate),
    /// Synthetic sphere scene: render, aggregate, fit, relight and score.
    RoundTrip(RoundTrip),
}

#[derive(Args)]
struct GenDataset {
    #[arg(long)]
    out: PathBuf,
    /// Random materials to render; omit for the full grid-plus-random set.
    #[arg(long)]
    materials: Option<usize>,
    /// `rmap` or `pfm`.
    #[arg(long)]
    format: Option<String>,
    /// Direction of light travel as `x,y,z`.
    #[arg(long, allow_hyphen_values = true)]
    light_dir: Option<String>,
}

#[derive(Args)]
struct Train {
    /// Dataset directory holding `manifest.tsv`.
    #[arg(long)]
    data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// `desk` or `paper`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct FitMap {
    /// RMAP file.
    #[arg(long)]
    map: PathBuf,
    /// Treat the map as a unit sphere seen from this eye position `x,y,z`;
    /// without it the map is a flat surface's view-direction map.
    #[arg(long, allow_hyphen_values = true)]
    eye: Option<String>,
    /// Known direction of light travel `x,y,z`; the light is fitted when absent.
    #[arg(long, allow_hyphen_values = true)]
    light_dir: Option<String>,
    /// Robust loss quantile in (0, 1].
    #[arg(long)]
    robust: Option<f64>,
    #[arg(long)]
    min_samples: Option<usize>,
}

#[derive(Args)]
struct Aggregate {
    /// Scene bundle directory.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for `t<id>.rmap` files.
    #[arg(long)]
    out: PathBuf,
    /// Decode 8-bit images with the inverse sRGB curve.
    #[arg(long)]
    srgb_input: bool,
}

#[derive(Args)]
struct Estimate {
    /// Directory written by `aggregate`.
    #[arg(long)]
    maps: PathBuf,
    /// Mesh the maps belong to.
    #[arg(long)]
    mesh: PathBuf,
    /// Parameter table to write.
    #[arg(long)]
    out: PathBuf,
    /// `fit` or `nn`.
    #[arg(long)]
    estimator: Option<String>,
    /// Trained model, required for `nn`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Known direction of light travel `x,y,z`.
    #[arg(long, allow_hyphen_values = true)]
    light_dir: Option<String>,
    #[arg(long)]
    min_samples: Option<usize>,
    #[arg(long)]
    robust: Option<f64>,
}

#[derive(Args)]
struct Relight {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    table: PathBuf,
    /// Directory for the relit PFM images, named after the poses.
    #[arg(long)]
    out: PathBuf,
    /// Direction of light travel `x,y,z`.
    #[arg(long, allow_hyphen_values = true)]
    light_dir: Option<String>,
}

#[derive(Args)]
struct Evaluate {
    /// Reference image, or a directory of them.
    #[arg(long)]
    reference: PathBuf,
    /// Test image, or a directory paired with `--reference` by file name.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    srgb_input: bool,
}

#[derive(Args)]
struct RoundTrip {
    /// Only `icosphere` is built in.
    #[arg(long)]
    mesh: Option<String>,
    #[arg(long)]
    subdivisions: Option<u32>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Seven comma-separated values: kd rgb, ks rgb, roughness.
    #[arg(long)]
    params: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    light_dir: Option<String>,
    #[arg(long)]
    min_samples: Option<usize>,
    /// Write the scene, table and relit first view here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flag value, else config value, else `default`.
struct Settings {
    file: ConfigFile,
}

impl Settings {
    fn pick<T: FromStr>(&self, cli: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.pick_opt(cli, key)?.unwrap_or(default))
    }

    fn pick_opt<T: FromStr>(&self, cli: Option<T>, key: &str) -> Result<Option<T>> {
        if cli.is_some() {
            return Ok(cli);
        }
        Ok(self.file.get::<T>(key)?)
    }

    fn pick_string(&self, cli: Option<String>, key: &str) -> Option<String> {
        cli.or_else(|| self.file.raw(key).map(str::to_owned))
    }
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number {t:?} in {what}")))
        .collect::<Result<_>>()?;
    if v.len() != n {
        bail!("{what} needs {n} comma-separated values, got {}", v.len());
    }
    Ok(v)
}

fn parse_vec3(s: &str, what: &str) -> Result<Vec3> {
    let v = parse_floats(s, 3, what)?;
    let d = Vec3::new(v[0], v[1], v[2]);
    if !(d.norm() > 0.0) {
        bail!("{what} must be a nonzero vector");
    }
    Ok(d)
}

fn light_dir(settings: &Settings, cli: Option<String>) -> Result<Option<Vec3>> {
    settings.pick_string(cli, "light-dir").map(|s| parse_vec3(&s, "--light-dir").map(|d| d.normalize())).transpose()
}

fn gen_dataset(a: GenDataset, s: &Settings, seed: u64) -> Result<()> {
    let materials = match s.pick_opt(a.materials, "materials")? {
        Some(n) => material_random(n, seed),
        None => full_material_set(seed),
    };
    let format = match s.pick_string(a.format, "format").as_deref() {
        None | Some("rmap") => MapFormat::Rmap,
        Some("pfm") => MapFormat::Pfm,
        Some(other) => bail!("unknown map format {other:?} (expected rmap or pfm)"),
    };
    let opts = GenerateOptions {
        format,
        light_dir: light_dir(s, a.light_dir)?.unwrap_or_else(default_light_dir),
        ..Default::default()
    };
    let manifest = generate_dataset(&materials, &viewpoint_grid(), &a.out, &opts)?;
    println!("wrote {} maps to {}", manifest.rows.len(), a.out.display());
    Ok(())
}

fn train(a: Train, s: &Settings, seed: u64) -> Result<()> {
    let preset = s.pick_string(a.preset, "preset").unwrap_or_else(|| "desk".into());
    let mut cfg = RegressorConfig::preset(&preset).with_context(|| format!("unknown preset {preset:?}"))?;
    cfg.epochs = s.pick(a.epochs, "epochs", cfg.epochs)?;
    cfg.batch_size = s.pick(a.batch_size, "batch-size", cfg.batch_size)?;
    cfg.learning_rate = s.pick(a.learning_rate, "learning-rate", cfg.learning_rate)?;
    cfg.seed = seed;
    let model = train_from_dir(&a.data, &cfg, std::io::stdout().lock())?;
    model.save(&a.out)?;
    eprintln!("saved model to {}", a.out.display());
    Ok(())
}

fn fit_map(a: FitMap, s: &Settings) -> Result<()> {
    let map = ReflectanceMap::load(&a.map).with_context(|| a.map.display().to_string())?;
    let geometry = match s.pick_string(a.eye, "eye") {
        Some(e) => MapGeometry::Sphere { eye: parse_vec3(&e, "--eye")? },
        None => MapGeometry::Surface,
    };
    let mut opts = FitOptions::new(geometry);
    opts.min_samples = s.pick(a.min_samples, "min-samples", opts.min_samples)?;
    opts.robust_quantile = s.pick_opt(a.robust, "robust")?;
    let known = light_dir(s, a.light_dir)?.map(|d| dir_to_angles(&-d)).transpose()?;
    let r = fit(&map, known, &opts)?;
    let p = r.params;
    println!("kd\t{}\t{}\t{}", p.kd()[0], p.kd()[1], p.kd()[2]);
    println!("ks\t{}\t{}\t{}", p.ks()[0], p.ks()[1], p.ks()[2]);
    println!("roughness\t{}", p.roughness());
    let towards = r.light.to_direction();
    println!("light_towards\t{}\t{}\t{}", towards.x, towards.y, towards.z);
    println!("rmse\t{}", r.rmse);
    println!("iterations\t{}\tconverged\t{}", r.iterations, r.converged);
    Ok(())
}

fn aggregate_cmd(a: Aggregate, s: &Settings) -> Result<()> {
    let srgb = a.srgb_input || s.pick(None, "srgb-input", false)?;
    let scene = SceneBundle::load(&a.scene, srgb)?;
    let buffers = build_buffers(&scene);
    let maps = aggregate(&scene, &buffers)?;
    maps.save_dir(&a.out)?;
    println!("{} triangles, {} samples", maps.maps.len(), maps.total_samples());
    Ok(())
}

fn estimate_cmd(a: Estimate, s: &Settings) -> Result<()> {
    let mesh = TriangleMesh::load(&a.mesh)?;
    let maps = TriangleMapSet::load_dir(&a.maps)?;
    let kind = s.pick_string(a.estimator, "estimator").unwrap_or_else(|| "fit".into());
    let model;
    let estimator = match kind.as_str() {
        "fit" => Estimator::Fit,
        "nn" => {
            let path = s.pick_opt(a.model, "model")?.context("--estimator nn needs --model")?;
            model = TrainedModel::load(&path).with_context(|| path.display().to_string())?;
            Estimator::Nn(&model)
        }
        other => bail!("unknown estimator {other:?} (expected fit or nn)"),
    };
    let opts = EstimateOptions {
        min_samples: s.pick(a.min_samples, "min-samples", SAMPLE_FLOOR)?,
        light_dir: light_dir(s, a.light_dir)?,
        robust_quantile: s.pick_opt(a.robust, "robust")?,
        ..Default::default()
    };
    let est = estimate(&mesh, &maps, estimator, &opts)?;
    est.table.save(&a.out)?;
    println!(
        "{} of {} triangles estimated, mean {:.3} ms per triangle",
        est.table.estimated().count(),
        est.table.rows.len(),
        est.mean_time().as_secs_f64() * 1e3
    );
    Ok(())
}

fn relight_cmd(a: Relight, s: &Settings) -> Result<()> {
    let scene = SceneBundle::load(&a.scene, false)?;
    let table = ParamTable::load(&a.table)?;
    let light = light_dir(s, a.light_dir)?.unwrap_or_else(default_light_dir);
    std::fs::create_dir_all(&a.out)?;
    for (cam, pose) in scene.cameras.iter().zip(&scene.poses) {
        let img = relight(&scene.mesh, &table, cam, &light, fallback_material())?;
        let name = Path::new(&pose.name).with_extension("pfm");
        img.save(&a.out.join(name))?;
    }
    println!("relit {} views into {}", scene.poses.len(), a.out.display());
    Ok(())
}

fn image_pairs(reference: &Path, test: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if !reference.is_dir() {
        let id = reference.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(id, reference.to_owned(), test.to_owned())]);
    }
    let mut names: Vec<String> = std::fs::read_dir(reference)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pfm") || n.ends_with(".png"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let t = test.join(&n);
            if !t.exists() {
                bail!("{} has no counterpart in {}", n, test.display());
            }
            Ok((n.clone(), reference.join(&n), t))
        })
        .collect()
}

fn evaluate_cmd(a: Evaluate, s: &Settings) -> Result<()> {
    let srgb = a.srgb_input || s.pick(None, "srgb-input", false)?;
    let pairs = image_pairs(&a.reference, &a.test)?;
    println!("{}", ImagePairReport::HEADER);
    for (id, r, t) in pairs {
        let r = LinearImage::load(&r, srgb).with_context(|| r.display().to_string())?;
        let t = LinearImage::load(&t, srgb).with_context(|| t.display().to_string())?;
        println!("{}", evaluate(&r, &t)?.to_row(&id));
    }
    Ok(())
}

fn round_trip_cmd(a: RoundTrip, s: &Settings, seed: u64) -> Result<()> {
    let mesh = s.pick_string(a.mesh, "mesh").unwrap_or_else(|| "icosphere".into());
    if mesh != "icosphere" {
        bail!("unknown synthetic mesh {mesh:?} (only icosphere)");
    }
    let d = RoundTripConfig::default();
    let params = match s.pick_string(a.params, "params") {
        Some(p) => ReflectanceParams::from_slice(&parse_floats(&p, 7, "--params")?)?,
        None => d.params,
    };
    let cfg = RoundTripConfig {
        subdivisions: s.pick(a.subdivisions, "subdivisions", d.subdivisions)?,
        cameras: s.pick(a.cameras, "cameras", d.cameras)?,
        resolution: s.pick(a.resolution, "resolution", d.resolution)?,
        params,
        light_dir: light_dir(s, a.light_dir)?.unwrap_or(d.light_dir),
        min_samples: s.pick(a.min_samples, "min-samples", ROUND_TRIP_FLOOR)?,
        seed,
        ..d
    };
    let report = round_trip(&cfg)?;
    let truth = cfg.params.to_array();
    let mut worst = [0.0f64; 7];
    for (_, p) in report.estimates.table.estimated() {
        let e = param_error(&p.to_array(), &truth);
        for (w, v) in worst.iter_mut().zip(e.abs) {
            *w = w.max(v);
        }
    }
    println!("psnr\t{:.3}", report.psnr);
    println!("triangles\t{}\testimated\t{}", report.estimates.table.rows.len(), report.estimated);
    println!("within_0.05\t{}\tfraction\t{:.4}", report.within_tolerance, report.fraction_within());
    println!("mean_linf\t{:.5}", report.mean_linf);
    let w: Vec<String> = worst.iter().map(|v| format!("{v:.5}")).collect();
    println!("max_abs_error\t{}", w.join("\t"));
    if let Some(out) = a.out {
        cfg.scene()?.save(&out.join("scene"))?;
        report.estimates.table.save(&out.join("table.tsv"))?;
        report.relit.save(&out.join("relit.pfm"))?;
        report.ground_truth.save(&out.join("ground_truth.pfm"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p).with_context(|| p.display().to_string())?,
        None => ConfigFile::default(),
    };
    let s = Settings { file };
    let seed = s.pick(cli.seed, "seed", 0u64)?;
    if let Some(n) = s.pick_opt(cli.threads, "threads")? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    match cli.command {
        Command::GenDataset(a) => gen_dataset(a, &s, seed),
        Command::Train(a) => train(a, &s, seed),
        Command::FitMap(a) => fit_map(a, &s),
        Command::Aggregate(a) => aggregate_cmd(a, &s),
        Command::Estimate(a) => estimate_cmd(a, &s),
        Command::Relight(a) => relight_cmd(a, &s),
        Command::Evaluate(a) => evaluate_cmd(a, &s),
        Command::RoundTrip(a) => round_trip_cmd(a, &s, seed),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
