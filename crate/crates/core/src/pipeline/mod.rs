//! Scene-level orchestration: posed images and a mesh go in, per-triangle
//! reflectance maps are aggregated through ray-cast G-buffers, each map is
//! inverted independently, and the estimates relight the mesh.
//!
//! A triangle's map is indexed by the direction towards the camera,
//! expressed in the triangle's canonical frame ([`canonical_frame`]).

pub mod config;
pub mod scene;
pub mod table;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::brdf::ReflectanceParams;
use crate::fitter::{fit, rerender_psnr, FitError, FitOptions, MapGeometry};
use crate::imaging::{ImageError, LinearImage};
use crate::metrics::{param_error, psnr, ImagePairReport, MetricError};
use crate::regressor::{RegressorError, TrainedModel};
use crate::renderer::{render_mesh, trace_gbuffer, uniform_materials, Camera, GBuffer, RenderError, TriangleMesh};
use crate::spherical::{dir_to_angles, MapError, ReflectanceMap, SphericalAngles};
use crate::{Rgb, Vec3};
pub use config::ConfigFile;
pub use scene::{Pose, SceneBundle};
pub use table::{EstimatorTag, ParamRow, ParamTable};

/// Occupied texels a map needs before it is estimated.
pub const SAMPLE_FLOOR: usize = 30;
/// Floor for the synthetic round trip. Eight views of a subdivided sphere
/// put only a handful of texels on each triangle, so [`SAMPLE_FLOOR`]
/// would leave nothing to estimate; three texels already give nine
/// equations for seven unknowns.
pub const ROUND_TRIP_FLOOR: usize = 3;
/// `|n . up|` above which the canonical frame falls back to world `x`.
const POLE_LIMIT: f64 = 0.999;
/// Radiance is snapped to multiples of this before accumulation, so texel
/// sums are exact and do not depend on accumulation order.
const RADIANCE_QUANTUM: f64 = 1.0 / 4_294_967_296.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing {0}")]
    Missing(String),
    #[error("image {0} has no pose")]
    Unpaired(String),
    #[error("pose line {line}: {message}")]
    PoseParse { line: usize, message: String },
    #[error("parameter table line {line}: {message}")]
    TableParse { line: usize, message: String },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("scene: {0}")]
    Scene(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mid-gray Lambertian used for triangles without an estimate.
pub fn fallback_material() -> ReflectanceParams {
    ReflectanceParams::new([0.5; 3], [0.0; 3], 0.8).expect("constant material is valid")
}

/// Orthonormal frame `[x, y, z]` with `z = n` and `x` the world up vector
/// projected onto the face plane (world `x` near the poles).
pub fn canonical_frame(n: &Vec3) -> [Vec3; 3] {
    let z = n.normalize();
    let reference = if z.z.abs() > POLE_LIMIT { Vec3::x() } else { Vec3::z() };
    let x = (reference - z * reference.dot(&z)).normalize();
    [x, z.cross(&x), z]
}

/// `v` in the coordinates of `frame`.
pub fn to_frame(frame: &[Vec3; 3], v: &Vec3) -> Vec3 {
    Vec3::new(frame[0].dot(v), frame[1].dot(v), frame[2].dot(v))
}

pub fn build_buffers(scene: &SceneBundle) -> Vec<GBuffer> {
    scene.cameras.par_iter().map(|cam| trace_gbuffer(&scene.mesh, cam)).collect()
}

/// Reflectance maps of the triangles that received samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMapSet {
    pub maps: BTreeMap<u32, ReflectanceMap>,
}

impl TriangleMapSet {
    /// Radiance samples in triangle `t`'s map.
    pub fn samples(&self, t: u32) -> u64 {
        self.maps.get(&t).map_or(0, ReflectanceMap::total_samples)
    }

    pub fn total_samples(&self) -> u64 {
        self.maps.values().map(ReflectanceMap::total_samples).sum()
    }

    /// Adds every map of `other` with [`ReflectanceMap::merge_from`].
    pub fn merge_from(&mut self, other: &TriangleMapSet) -> Result<(), MapError> {
        for (t, m) in &other.maps {
            match self.maps.get_mut(t) {
                Some(dst) => dst.merge_from(m)?,
                None => {
                    self.maps.insert(*t, m.clone());
                }
            }
        }
        Ok(())
    }

    /// Writes one RMAP file per triangle as `t<id>.rmap`.
    pub fn save_dir(&self, dir: &std::path::Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        for (t, m) in &self.maps {
            m.save(&dir.join(format!("t{t:07}.rmap")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &std::path::Path) -> Result<Self, PipelineError> {
        let mut maps = BTreeMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let Some(id) = name.strip_prefix('t').and_then(|n| n.strip_suffix(".rmap")) else { continue };
            let id: u32 = id.parse().map_err(|_| PipelineError::Scene(format!("bad map file name {name}")))?;
            maps.insert(id, ReflectanceMap::load(&path)?);
        }
        Ok(Self { maps })
    }
}

fn snap(c: Rgb) -> Rgb {
    c.map(|v| (v.max(0.0) / RADIANCE_QUANTUM).round() * RADIANCE_QUANTUM)
}

/// The maps contributed by one posed image.
pub fn aggregate_view(mesh: &TriangleMesh, image: &LinearImage, buffer: &GBuffer, cam: &Camera) -> TriangleMapSet {
    let eye = cam.center();
    let mut frames: BTreeMap<u32, [Vec3; 3]> = BTreeMap::new();
    let mut set = TriangleMapSet::default();
    for px in buffer.pixels() {
        let Some(hit) = px.hit else { continue };
        let frame = *frames.entry(hit.t_id).or_insert_with(|| canonical_frame(&mesh.face_normal(hit.t_id)));
        let wo = to_frame(&frame, &(eye - hit.point).normalize());
        let radiance = snap(image.get(px.u as usize, px.v as usize));
        set.maps.entry(hit.t_id).or_default().accumulate(&wo, radiance).expect("snapped radiance is valid");
    }
    set
}

fn check_buffers(scene: &SceneBundle, buffers: &[GBuffer]) -> Result<(), PipelineError> {
    if buffers.len() != scene.images.len() {
        return Err(PipelineError::Scene(format!("{} buffers for {} images", buffers.len(), scene.images.len())));
    }
    for ((b, img), p) in buffers.iter().zip(&scene.images).zip(&scene.poses) {
        if (b.width(), b.height()) != img.dims() {
            return Err(PipelineError::Scene(format!("buffer size differs from image {}", p.name)));
        }
    }
    Ok(())
}

/// Per-image shards built in parallel, merged per triangle in image order.
pub fn aggregate(scene: &SceneBundle, buffers: &[GBuffer]) -> Result<TriangleMapSet, PipelineError> {
    check_buffers(scene, buffers)?;
    let shards: Vec<TriangleMapSet> = (0..buffers.len())
        .into_par_iter()
        .map(|i| aggregate_view(&scene.mesh, &scene.images[i], &buffers[i], &scene.cameras[i]))
        .collect();
    let mut out = TriangleMapSet::default();
    for s in &shards {
        out.merge_from(s)?;
    }
    Ok(out)
}

/// Single pass over every pixel of every image into one set of maps.
pub fn aggregate_sequential(scene: &SceneBundle, buffers: &[GBuffer]) -> Result<TriangleMapSet, PipelineError> {
    check_buffers(scene, buffers)?;
    let mut out = TriangleMapSet::default();
    for ((image, buffer), cam) in scene.images.iter().zip(buffers).zip(&scene.cameras) {
        let eye = cam.center();
        for px in buffer.pixels() {
            let Some(hit) = px.hit else { continue };
            let frame = canonical_frame(&scene.mesh.face_normal(hit.t_id));
            let wo = to_frame(&frame, &(eye - hit.point).normalize());
            let radiance = snap(image.get(px.u as usize, px.v as usize));
            out.maps.entry(hit.t_id).or_default().accumulate(&wo, radiance)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    Fit,
    Nn(&'a TrainedModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOptions {
    pub min_samples: usize,
    /// World direction of light travel when known. Triangles facing away
    /// from a known light are flagged insufficient: their maps are black
    /// whatever the material.
    pub light_dir: Option<Vec3>,
    pub robust_quantile: Option<f64>,
    pub max_iterations: usize,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            min_samples: SAMPLE_FLOOR,
            light_dir: None,
            robust_quantile: None,
            max_iterations: crate::fitter::DEFAULT_MAX_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Estimates {
    pub table: ParamTable,
    /// Wall time per table row.
    pub timings: Vec<Duration>,
}

impl Estimates {
    /// Mean wall time over estimated triangles.
    pub fn mean_time(&self) -> Duration {
        let (n, total) = self
            .table
            .rows
            .iter()
            .zip(&self.timings)
            .filter(|(r, _)| r.params.is_some())
            .fold((0u32, Duration::ZERO), |(n, t), (_, d)| (n + 1, t + *d));
        if n == 0 {
            Duration::ZERO
        } else {
            total / n
        }
    }
}

/// Estimates every face of a `faces`-triangle mesh independently.
pub fn estimate(
    mesh: &TriangleMesh,
    maps: &TriangleMapSet,
    estimator: Estimator<'_>,
    opts: &EstimateOptions,
) -> Result<Estimates, PipelineError> {
    let empty = ReflectanceMap::new();
    let results: Vec<Result<(ParamRow, Duration), PipelineError>> = (0..mesh.face_count() as u32)
        .into_par_iter()
        .map(|t| {
            let start = Instant::now();
            let map = maps.maps.get(&t).unwrap_or(&empty);
            let row = estimate_one(mesh, t, map, estimator, opts)?;
            Ok((row, start.elapsed()))
        })
        .collect();
    let mut table = ParamTable::default();
    let mut timings = Vec::with_capacity(results.len());
    for r in results {
        let (row, d) = r?;
        table.rows.push(row);
        timings.push(d);
    }
    Ok(Estimates { table, timings })
}

fn estimate_one(
    mesh: &TriangleMesh,
    t: u32,
    map: &ReflectanceMap,
    estimator: Estimator<'_>,
    opts: &EstimateOptions,
) -> Result<ParamRow, PipelineError> {
    let samples = map.total_samples();
    let insufficient = ParamRow { triangle: t, params: None, estimator: EstimatorTag::Insufficient, residual: f64::NAN, samples };
    if map.occupied_texels() < opts.min_samples.max(1) {
        return Ok(insufficient);
    }
    let light = match opts.light_dir {
        Some(dir) => {
            let local = to_frame(&canonical_frame(&mesh.face_normal(t)), &-dir.normalize());
            if local.z <= 0.0 {
                return Ok(insufficient);
            }
            Some(dir_to_angles(&local)?)
        }
        None => None,
    };
    match estimator {
        Estimator::Fit => {
            let fo = FitOptions {
                min_samples: opts.min_samples,
                max_iterations: opts.max_iterations,
                robust_quantile: opts.robust_quantile,
                ..FitOptions::new(MapGeometry::Surface)
            };
            let r = fit(map, light, &fo)?;
            Ok(ParamRow { triangle: t, params: Some(r.params), estimator: EstimatorTag::Fit, residual: r.rmse, samples })
        }
        Estimator::Nn(model) => {
            let v = model.predict(&map.resolve().image)?;
            let params = ReflectanceParams::from_array(v.map(|x| x.clamp(0.0, 1.0))).expect("clamped to the unit box");
            let residual = match light {
                Some(l) => rmse_under(&params, &l, map)?,
                None => f64::NAN,
            };
            Ok(ParamRow { triangle: t, params: Some(params), estimator: EstimatorTag::Nn, residual, samples })
        }
    }
}

fn rmse_under(params: &ReflectanceParams, light: &SphericalAngles, map: &ReflectanceMap) -> Result<f64, PipelineError> {
    let sse = crate::fitter::residual(params, light, map, &MapGeometry::Surface)?;
    Ok((sse / (3 * map.occupied_texels()) as f64).sqrt())
}

/// Renders the mesh with the table's materials, `fallback` on faces
/// without an estimate.
pub fn relight(
    mesh: &TriangleMesh,
    table: &ParamTable,
    cam: &Camera,
    light_dir: &Vec3,
    fallback: ReflectanceParams,
) -> Result<LinearImage, PipelineError> {
    Ok(render_mesh(mesh, &table.materials(mesh.face_count(), fallback), cam, light_dir, false)?)
}

pub fn evaluate(reference: &LinearImage, test: &LinearImage) -> Result<ImagePairReport, PipelineError> {
    Ok(ImagePairReport::compute(reference, test)?)
}

/// Synthetic scene: a unit icosphere with one material, photographed from
/// cameras spread around it.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTripConfig {
    pub subdivisions: u32,
    pub cameras: usize,
    pub resolution: usize,
    pub distance: f64,
    pub fov_y: f64,
    pub params: ReflectanceParams,
    pub light_dir: Vec3,
    pub min_samples: usize,
    /// Jitters the camera azimuths.
    pub seed: u64,
}

impl Default for RoundTripConfig {
    fn default() -> Self {
        Self {
            subdivisions: 4,
            cameras: 8,
            resolution: 256,
            distance: 4.0,
            fov_y: 40f64.to_radians(),
            params: ReflectanceParams::new([0.6, 0.3, 0.2], [0.5, 0.5, 0.5], 0.5).expect("valid"),
            light_dir: crate::dataset::default_light_dir(),
            min_samples: ROUND_TRIP_FLOOR,
            seed: 0,
        }
    }
}

impl RoundTripConfig {
    /// Cameras alternate between two zeniths around the sphere.
    pub fn camera_rig(&self) -> Result<Vec<Camera>, PipelineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.cameras.max(1);
        (0..n)
            .map(|k| {
                let theta = if k % 2 == 0 { 0.9 } else { 1.4 };
                let phi = std::f64::consts::TAU * (k as f64 + rng.gen_range(-0.25..0.25)) / n as f64;
                Ok(Camera::orbit(theta, phi, self.distance, Vec3::zeros(), self.fov_y, self.resolution, self.resolution)?)
            })
            .collect()
    }

    /// Ground-truth renders of the sphere as a scene bundle.
    pub fn scene(&self) -> Result<SceneBundle, PipelineError> {
        let mesh = TriangleMesh::icosphere(self.subdivisions);
        let materials = uniform_materials(&mesh, self.params);
        let cams = self.camera_rig()?;
        let images = cams
            .iter()
            .map(|c| render_mesh(&mesh, &materials, c, &self.light_dir, false))
            .collect::<Result<Vec<_>, _>>()?;
        let poses = cams.iter().enumerate().map(|(i, c)| Pose::from_camera(&format!("view{i:02}.pfm"), c)).collect();
        SceneBundle::new(images, poses, mesh)
    }
}

#[derive(Debug, Clone)]
pub struct RoundTripReport {
    pub estimates: Estimates,
    /// Relit first view against its ground-truth render.
    pub psnr: f64,
    pub estimated: usize,
    /// Estimated triangles whose parameters are within 0.05 of the truth
    /// in every component.
    pub within_tolerance: usize,
    pub mean_linf: f64,
    pub hit_pixels: usize,
    pub ground_truth: LinearImage,
    pub relit: LinearImage,
}

impl RoundTripReport {
    pub fn fraction_within(&self) -> f64 {
        if self.estimated == 0 {
            0.0
        } else {
            self.within_tolerance as f64 / self.estimated as f64
        }
    }
}

/// Render, aggregate, fit with the known light, and relight the first view.
pub fn round_trip(cfg: &RoundTripConfig) -> Result<RoundTripReport, PipelineError> {
    let scene = cfg.scene()?;
    let buffers = build_buffers(&scene);
    let hit_pixels = buffers.iter().map(GBuffer::hit_count).sum();
    let maps = aggregate(&scene, &buffers)?;
    let opts = EstimateOptions { min_samples: cfg.min_samples, light_dir: Some(cfg.light_dir), ..Default::default() };
    let estimates = estimate(&scene.mesh, &maps, Estimator::Fit, &opts)?;
    let truth = cfg.params.to_array();
    let (mut within, mut n, mut linf) = (0, 0, 0.0);
    for (_, p) in estimates.table.estimated() {
        let e = param_error(&p.to_array(), &truth).linf;
        n += 1;
        linf += e;
        if e <= 0.05 {
            within += 1;
        }
    }
    let relit = relight(&scene.mesh, &estimates.table, &scene.cameras[0], &cfg.light_dir, fallback_material())?;
    let ground_truth = scene.images[0].clone();
    let psnr = psnr(&ground_truth.clamp_unit(), &relit.clamp_unit())?;
    Ok(RoundTripReport {
        estimates,
        psnr,
        estimated: n,
        within_tolerance: within,
        mean_linf: if n == 0 { f64::NAN } else { linf / n as f64 },
        hit_pixels,
        ground_truth,
        relit,
    })
}

/// Re-render PSNR of `params` on a sphere-parameterized map seen from `eye`
/// under the light `towards`.
pub fn sphere_rerender_psnr(
    params: &ReflectanceParams,
    towards: &Vec3,
    map: &ReflectanceMap,
    eye: Vec3,
) -> Result<f64, PipelineError> {
    Ok(rerender_psnr(params, &dir_to_angles(towards)?, map, &MapGeometry::Sphere { eye })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::render_mesh;

    fn single_triangle() -> TriangleMesh {
        TriangleMesh::new(
            vec![Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, -1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    fn overhead(res: usize) -> Camera {
        Camera::orbit(0.0, 0.0, 3.0, Vec3::zeros(), 0.6, res, res).unwrap()
    }

    fn scene_of(mesh: TriangleMesh, cams: &[Camera], images: Vec<LinearImage>) -> SceneBundle {
        let poses = cams.iter().enumerate().map(|(i, c)| Pose::from_camera(&format!("v{i}.pfm"), c)).collect();
        SceneBundle::new(images, poses, mesh).unwrap()
    }

    #[test]
    fn canonical_frame_is_orthonormal_and_right_handed() {
        for n in [Vec3::new(0.3, -0.2, 0.9), Vec3::z(), -Vec3::z(), Vec3::new(1.0, 1.0, 0.0)] {
            let [x, y, z] = canonical_frame(&n);
            assert!((z - n.normalize()).norm() < 1e-12);
            assert!(x.dot(&y).abs() < 1e-12 && x.dot(&z).abs() < 1e-12);
            assert!((x.cross(&y) - z).norm() < 1e-12);
            assert!((x.norm() - 1.0).abs() < 1e-12);
        }
        // on a sphere the frame is the local tangent frame: x points to the north pole
        let [x, _, _] = canonical_frame(&Vec3::x());
        assert!((x - Vec3::z()).norm() < 1e-12);
    }

    #[test]
    fn buffers_match_image_sizes() {
        let cams = [overhead(16), Camera::orbit(0.5, 1.0, 3.0, Vec3::zeros(), 0.6, 20, 12).unwrap()];
        let images = cams.iter().map(|c| LinearImage::new(c.width(), c.height())).collect();
        let s = scene_of(single_triangle(), &cams, images);
        let b = build_buffers(&s);
        assert_eq!(b.len(), 2);
        assert_eq!((b[1].width(), b[1].height()), (20, 12));
        assert!(b.iter().flat_map(|g| g.pixels()).filter_map(|p| p.hit).all(|h| h.t_id == 0));
    }

    #[test]
    fn constant_image_gives_constant_map() {
        let cam = overhead(32);
        let c = Rgb::new(0.3, 0.2, 0.1);
        let s = scene_of(single_triangle(), &[cam.clone()], vec![LinearImage::from_pixels(32, 32, vec![c; 32 * 32])]);
        let maps = aggregate(&s, &build_buffers(&s)).unwrap();
        let m = &maps.maps[&0];
        assert!(m.occupied_texels() >= 1);
        for (_, _, t) in m.iter_occupied() {
            assert!((t.mean() - c).norm() < 1e-9);
        }
        assert_eq!(maps.total_samples() as usize, build_buffers(&s)[0].hit_count());
    }

    #[test]
    fn duplicate_views_double_counts() {
        let cam = Camera::orbit(0.4, 0.3, 3.0, Vec3::zeros(), 0.6, 24, 24).unwrap();
        let mesh = single_triangle();
        let p = ReflectanceParams::new([0.5, 0.4, 0.3], [0.3; 3], 0.4).unwrap();
        let img = render_mesh(&mesh, &[p], &cam, &Vec3::new(0.2, 0.1, -1.0), false).unwrap();
        let one = scene_of(mesh.clone(), &[cam.clone()], vec![img.clone()]);
        let two = scene_of(mesh, &[cam.clone(), cam], vec![img.clone(), img]);
        let a = aggregate(&one, &build_buffers(&one)).unwrap();
        let b = aggregate(&two, &build_buffers(&two)).unwrap();
        for (row, col, t) in a.maps[&0].iter_occupied() {
            let u = b.maps[&0].get(row, col);
            assert_eq!(u.count, 2 * t.count);
            assert!((u.mean() - t.mean()).norm() < 1e-12);
        }
    }

    #[test]
    fn shard_merge_equals_sequential_and_conserves_samples() {
        let cfg = RoundTripConfig { subdivisions: 2, cameras: 5, resolution: 48, ..Default::default() };
        let s = cfg.scene().unwrap();
        let b = build_buffers(&s);
        let par = aggregate(&s, &b).unwrap();
        assert_eq!(par, aggregate_sequential(&s, &b).unwrap());
        assert_eq!(par.total_samples() as usize, b.iter().map(GBuffer::hit_count).sum::<usize>());
    }

    #[test]
    fn empty_maps_are_flagged() {
        let mesh = TriangleMesh::icosphere(0);
        let est = estimate(&mesh, &TriangleMapSet::default(), Estimator::Fit, &EstimateOptions::default()).unwrap();
        assert_eq!(est.table.rows.len(), 20);
        assert!(est.table.rows.iter().all(|r| r.estimator == EstimatorTag::Insufficient && r.params.is_none()));
    }

    #[test]
    fn ground_truth_table_relights_exactly() {
        let cfg = RoundTripConfig { subdivisions: 2, cameras: 2, resolution: 40, ..Default::default() };
        let s = cfg.scene().unwrap();
        let rows = (0..s.mesh.face_count() as u32)
            .map(|t| ParamRow { triangle: t, params: Some(cfg.params), estimator: EstimatorTag::Fit, residual: 0.0, samples: 1 })
            .collect();
        let img = relight(&s.mesh, &ParamTable { rows }, &s.cameras[1], &cfg.light_dir, fallback_material()).unwrap();
        assert_eq!(img, s.images[1]);
    }
}
