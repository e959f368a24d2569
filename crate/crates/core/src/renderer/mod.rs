//! Ray-cast forward renderer: analytic unit-sphere renders and their
//! reflectance maps, triangle-mesh renders under a directional light, and
//! per-pixel G-buffers.
//!
//! Every entry point shoots one ray through each pixel center. Rows are
//! rendered in parallel; each worker owns a disjoint set of scanlines so
//! output does not depend on the thread count.

pub mod bvh;
pub mod camera;
pub mod mesh;

use rayon::prelude::*;
use thiserror::Error;

pub use camera::Camera;
pub use mesh::TriangleMesh;

use crate::brdf::{shade_white, ReflectanceParams, ShadingGeometry};
use crate::imaging::LinearImage;
use crate::spherical::{texel_center, ReflectanceMap};
use crate::{Rgb, Vec3};

/// Offset applied along the normal before casting shadow rays.
const SHADOW_BIAS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("mesh line {line}: {message}")]
    MeshParse { line: usize, message: String },
    #[error("{materials} materials supplied for {faces} faces")]
    MaterialCount { materials: usize, faces: usize },
    #[error("light direction must be a finite nonzero vector")]
    InvalidLight,
    #[error("i/o: {0}")]
    Io(String),
}

fn unit_light(light_dir: &Vec3) -> Result<Vec3, RenderError> {
    let n = light_dir.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(RenderError::InvalidLight);
    }
    Ok(light_dir / n)
}

/// Distance along a unit ray to the unit sphere at the origin.
#[inline]
pub fn intersect_unit_sphere(origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let b = origin.dot(dir);
    let c = origin.norm_squared() - 1.0;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = -b - s;
    if t > 1e-9 {
        Some(t)
    } else if -b + s > 1e-9 {
        Some(-b + s)
    } else {
        None
    }
}

/// Renders the unit sphere at the origin with a uniform material, lit by a
/// white directional light travelling along `light_dir` (world frame).
pub fn render_sphere(params: &ReflectanceParams, cam: &Camera, light_dir: &Vec3) -> Result<LinearImage, RenderError> {
    let wi = -unit_light(light_dir)?;
    let mut img = LinearImage::new(cam.width(), cam.height());
    let eye = cam.center();
    img.pixels_mut().par_chunks_mut(cam.width()).enumerate().for_each(|(y, row)| {
        for (x, px) in row.iter_mut().enumerate() {
            let d = cam.ray_direction(x, y);
            if let Some(t) = intersect_unit_sphere(&eye, &d) {
                let n = (eye + d * t).normalize();
                *px = shade_white(params, &ShadingGeometry::new_unchecked(n, wi, -d));
            }
        }
    });
    Ok(img)
}

/// Reflectance map of the unit sphere evaluated analytically at texel
/// centers: each visible, lit texel direction `d` is both the surface point
/// and its normal, viewed from the camera center.
pub fn sphere_map(params: &ReflectanceParams, cam: &Camera, light_dir: &Vec3) -> Result<ReflectanceMap, RenderError> {
    sphere_map_sized(params, cam, light_dir, crate::spherical::MAP_HEIGHT, crate::spherical::MAP_WIDTH)
}

pub fn sphere_map_sized(
    params: &ReflectanceParams,
    cam: &Camera,
    light_dir: &Vec3,
    height: usize,
    width: usize,
) -> Result<ReflectanceMap, RenderError> {
    let wi = -unit_light(light_dir)?;
    let eye = cam.center();
    let mut map = ReflectanceMap::with_size(height, width);
    for row in 0..height {
        for col in 0..width {
            let d = texel_center(row, col, height, width).to_direction();
            let to_eye = eye - d;
            if d.dot(&to_eye) <= 0.0 || d.dot(&wi) <= 0.0 {
                continue;
            }
            let wo = to_eye.normalize();
            let v = shade_white(params, &ShadingGeometry::new_unchecked(d, wi, wo));
            map.accumulate_texel(row, col, v).expect("shaded radiance is finite and nonnegative");
        }
    }
    Ok(map)
}

/// Unwraps a rendered image of the unit sphere: every pixel whose ray hits
/// the sphere deposits its value at the hit point's direction.
pub fn unwrap_sphere_image(img: &LinearImage, cam: &Camera) -> ReflectanceMap {
    let mut map = ReflectanceMap::new();
    let eye = cam.center();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let d = cam.ray_direction(x, y);
            if let Some(t) = intersect_unit_sphere(&eye, &d) {
                let n = (eye + d * t).normalize();
                map.accumulate(&n, img.get(x, y)).expect("pixel radiance is valid");
            }
        }
    }
    map
}

/// Closest-hit record for one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub t_id: u32,
    pub point: Vec3,
    pub normal: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GBufferPixel {
    pub u: u32,
    pub v: u32,
    pub hit: Option<SurfaceHit>,
}

/// Per-pixel geometry of a posed view, same size as the image it indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct GBuffer {
    width: usize,
    height: usize,
    pixels: Vec<GBufferPixel>,
}

impl GBuffer {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> &GBufferPixel {
        &self.pixels[v * self.width + u]
    }

    pub fn pixels(&self) -> &[GBufferPixel] {
        &self.pixels
    }

    pub fn hit_count(&self) -> usize {
        self.pixels.iter().filter(|p| p.hit.is_some()).count()
    }
}

pub fn trace_gbuffer(mesh: &TriangleMesh, cam: &Camera) -> GBuffer {
    let (w, h) = (cam.width(), cam.height());
    let eye = cam.center();
    let mut pixels = vec![GBufferPixel { u: 0, v: 0, hit: None }; w * h];
    pixels.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, px) in row.iter_mut().enumerate() {
            let d = cam.ray_direction(x, y);
            let hit = mesh.closest_hit(&eye, &d).map(|hit| SurfaceHit {
                t_id: hit.face,
                point: eye + d * hit.t,
                normal: mesh.face_normal(hit.face),
            });
            *px = GBufferPixel { u: x as u32, v: y as u32, hit };
        }
    });
    GBuffer { width: w, height: h, pixels }
}

/// Renders the mesh with per-face materials under a white directional light
/// travelling along `light_dir` (world frame), shading with face normals.
pub fn render_mesh(
    mesh: &TriangleMesh,
    per_face: &[ReflectanceParams],
    cam: &Camera,
    light_dir: &Vec3,
    shadows: bool,
) -> Result<LinearImage, RenderError> {
    if per_face.len() != mesh.face_count() {
        return Err(RenderError::MaterialCount { materials: per_face.len(), faces: mesh.face_count() });
    }
    let wi = -unit_light(light_dir)?;
    let eye = cam.center();
    let mut img = LinearImage::new(cam.width(), cam.height());
    img.pixels_mut().par_chunks_mut(cam.width()).enumerate().for_each(|(y, row)| {
        for (x, px) in row.iter_mut().enumerate() {
            let d = cam.ray_direction(x, y);
            let Some(hit) = mesh.closest_hit(&eye, &d) else { continue };
            let n = mesh.face_normal(hit.face);
            let geom = ShadingGeometry::new_unchecked(n, wi, -d);
            if !geom.is_lit_and_visible() {
                continue;
            }
            if shadows {
                let p = eye + d * hit.t + n * SHADOW_BIAS;
                if mesh.occluded(&p, &wi, f64::INFINITY) {
                    continue;
                }
            }
            *px = shade_white(&per_face[hit.face as usize], &geom);
        }
    });
    Ok(img)
}

/// Uniform material on every face.
pub fn uniform_materials(mesh: &TriangleMesh, params: ReflectanceParams) -> Vec<ReflectanceParams> {
    vec![params; mesh.face_count()]
}

#[doc(hidden)]
pub fn rgb_max(img: &LinearImage) -> Rgb {
    img.pixels().iter().fold(Rgb::zeros(), |a, p| a.sup(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use std::f64::consts::{PI, TAU};

    fn params(v: [f64; 7]) -> ReflectanceParams {
        ReflectanceParams::from_array(v).unwrap()
    }

    #[test]
    fn null_material_renders_black() {
        let cam = Camera::orbit(0.8, 0.3, 4.0, Vec3::zeros(), 0.6, 32, 32).unwrap();
        let img = render_sphere(&params([0.0; 7]), &cam, &Vec3::new(-1.0, 0.0, -1.0)).unwrap();
        assert!(img.pixels().iter().all(|p| *p == Rgb::zeros()));
    }

    #[test]
    fn center_pixel_at_normal_incidence() {
        // camera on +z, light travelling along -z
        let cam = Camera::orbit(0.0, 0.0, 4.0, Vec3::zeros(), 0.5, 65, 65).unwrap();
        let img = render_sphere(&params([1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.5]), &cam, &-Vec3::z()).unwrap();
        let c = img.get(32, 32);
        for k in 0..3 {
            assert!((c[k] - 1.0 / PI).abs() < 1e-4, "{c}");
        }
    }

    #[test]
    fn silhouette_area_matches_projected_disc() {
        let p = params([0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.5]);
        for &res in &[64usize, 128, 256] {
            let cam = Camera::orbit(1.0, 0.5, 4.0, Vec3::zeros(), 0.6, res, res).unwrap();
            // light from the camera so every visible pixel is nonzero
            let light = -cam.center().normalize();
            let img = render_sphere(&p, &cam, &light).unwrap();
            let covered = img.pixels().iter().filter(|p| p.x > 0.0).count() as f64;
            // silhouette of a centered sphere: radius f / sqrt(d^2 - 1) in pixels
            let radius = cam.focal_px() / (16.0f64 - 1.0).sqrt();
            let disc = PI * radius * radius;
            assert!((covered - disc).abs() / disc < 0.02, "res {res}: {covered} vs {disc}");
        }
    }

    #[test]
    fn sphere_map_fills_at_most_a_hemisphere() {
        let cam = Camera::orbit(1.0, 0.5, 4.0, Vec3::zeros(), 0.6, 64, 64).unwrap();
        let light = -cam.center().normalize();
        let m = sphere_map(&params([0.5; 7]), &cam, &light).unwrap();
        assert!(m.occupancy() <= 0.5 + 120.0 / 7200.0);
        assert!(m.occupancy() > 0.3);
    }

    #[test]
    fn camera_azimuth_rotation_shifts_columns() {
        let p = params([0.6, 0.3, 0.2, 0.8, 0.8, 0.8, 0.3]);
        let light_cam = Vec3::new(-0.4, 0.5, 1.0).normalize();
        let base = Camera::orbit(1.1, 0.0, 4.0, Vec3::zeros(), 0.6, 16, 16).unwrap();
        let m0 = sphere_map(&p, &base, &base.to_world(&light_cam)).unwrap();
        for k in 1..8usize {
            let delta = k as f64 * TAU / 8.0;
            let cam = Camera::orbit(1.1, delta, 4.0, Vec3::zeros(), 0.6, 16, 16).unwrap();
            let m = sphere_map(&p, &cam, &cam.to_world(&light_cam)).unwrap();
            let shift = (delta / TAU * 120.0).round() as usize;
            assert_eq!(m.occupied_texels(), m0.occupied_texels());
            for (row, col, t) in m0.iter_occupied() {
                let u = m.get(row, (col + shift) % 120);
                assert_eq!(u.count, 1, "texel ({row},{col}) shift {shift}");
                for c in 0..3 {
                    assert!((u.sum[c] - t.sum[c]).abs() < 1e-9 * t.sum[c].max(1.0));
                }
            }
        }
    }

    #[test]
    fn gbuffer_single_and_nearest_triangles() {
        let cam = Camera::orbit(0.0, 0.0, 3.0, Vec3::zeros(), 0.8, 24, 16).unwrap();
        let tri = TriangleMesh::new(
            vec![Vec3::new(-2.0, -2.0, 0.0), Vec3::new(2.0, -2.0, 0.0), Vec3::new(0.0, 2.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let g = trace_gbuffer(&tri, &cam);
        assert_eq!((g.width(), g.height()), (24, 16));
        assert!(g.get(12, 8).hit.is_some());
        assert!(g.pixels().iter().filter_map(|p| p.hit).all(|h| h.t_id == 0 && h.point.z.abs() < 1e-4));

        let two = TriangleMesh::new(
            vec![
                Vec3::new(-2.0, -2.0, 0.0),
                Vec3::new(2.0, -2.0, 0.0),
                Vec3::new(0.0, 2.0, 0.0),
                Vec3::new(-2.0, -2.0, 0.5),
                Vec3::new(2.0, -2.0, 0.5),
                Vec3::new(0.0, 2.0, 0.5),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let g = trace_gbuffer(&two, &cam);
        let hits: Vec<_> = g.pixels().iter().filter_map(|p| p.hit).collect();
        assert!(!hits.is_empty());
        assert!(hits.iter().all(|h| h.t_id == 1));
        for p in g.pixels() {
            assert!(p.u < 24 && p.v < 16);
        }
    }

    #[test]
    fn gbuffer_points_lie_on_their_triangles() {
        let mesh = TriangleMesh::icosphere(2);
        let cam = Camera::orbit(0.9, 1.3, 3.0, Vec3::zeros(), 0.7, 48, 40).unwrap();
        let g = trace_gbuffer(&mesh, &cam);
        for (i, p) in g.pixels().iter().enumerate() {
            assert_eq!((p.u as usize, p.v as usize), (i % 48, i / 48));
            if let Some(h) = p.hit {
                let [a, _, _] = mesh.face_vertices(h.t_id);
                assert!((h.point - a).dot(&h.normal).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn mesh_render_basics() {
        let sq = TriangleMesh::square(1.0);
        let cam = Camera::orbit(0.3, 0.2, 3.0, Vec3::zeros(), 0.9, 40, 40).unwrap();
        let black = render_mesh(&sq, &uniform_materials(&sq, params([0.0; 7])), &cam, &Vec3::new(0.2, 0.1, -1.0), false).unwrap();
        assert!(black.pixels().iter().all(|p| *p == Rgb::zeros()));

        // orthogonal view and light: shading is identical on both faces
        let cam = Camera::orbit(0.0, 0.0, 3.0, Vec3::zeros(), 0.5, 41, 41).unwrap();
        let p = params([0.5, 0.4, 0.3, 0.6, 0.6, 0.6, 0.4]);
        let img = render_mesh(&sq, &uniform_materials(&sq, p), &cam, &Vec3::new(0.0, 0.0, -1.0), false).unwrap();
        let g = trace_gbuffer(&sq, &cam);
        let mut per_face = [None, None];
        for px in g.pixels() {
            if let Some(h) = px.hit {
                let v = img.get(px.u as usize, px.v as usize);
                let d = cam.ray_direction(px.u as usize, px.v as usize);
                let expect = shade_white(&p, &ShadingGeometry::new_unchecked(Vec3::z(), Vec3::z(), -d));
                assert!((v - expect).amax() < 1e-12);
                per_face[h.t_id as usize] = Some(v);
            }
        }
        assert!(per_face.iter().all(Option::is_some));

        assert!(matches!(
            render_mesh(&sq, &[p], &cam, &-Vec3::z(), false),
            Err(RenderError::MaterialCount { materials: 1, faces: 2 })
        ));
    }

    #[test]
    fn shadows_block_occluded_light() {
        // small square hovering above a large one, light from straight above
        let mut vertices = TriangleMesh::square(2.0).vertices().to_vec();
        vertices.extend(TriangleMesh::square(0.5).vertices().iter().map(|v| v + Vec3::new(0.0, 0.0, 0.5)));
        let mesh = TriangleMesh::new(vertices, vec![[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]]).unwrap();
        let cam = Camera::orbit(0.6, 0.0, 5.0, Vec3::zeros(), 0.9, 64, 64).unwrap();
        let mats = uniform_materials(&mesh, params([0.8, 0.8, 0.8, 0.0, 0.0, 0.0, 0.5]));
        let lit = render_mesh(&mesh, &mats, &cam, &-Vec3::z(), false).unwrap();
        let shadowed = render_mesh(&mesh, &mats, &cam, &-Vec3::z(), true).unwrap();
        let dark = |img: &LinearImage| img.pixels().iter().filter(|p| p.x == 0.0).count();
        assert!(dark(&shadowed) > dark(&lit) + 50);
    }

    #[test]
    fn icosphere_render_approximates_analytic_sphere() {
        let mesh = TriangleMesh::icosphere(4);
        let p = params([0.6, 0.5, 0.4, 0.5, 0.5, 0.5, 0.6]);
        let cam = Camera::orbit(1.0, 0.7, 4.0, Vec3::zeros(), 0.6, 256, 256).unwrap();
        let light = Vec3::new(-0.3, -0.5, -1.0);
        let analytic = render_sphere(&p, &cam, &light).unwrap();
        let meshed = render_mesh(&mesh, &uniform_materials(&mesh, p), &cam, &light, false).unwrap();
        let psnr = metrics::psnr(&analytic.clamp_unit(), &meshed.clamp_unit()).unwrap();
        assert!(psnr >= 35.0, "psnr {psnr}");
    }

    #[test]
    fn renders_are_deterministic_and_energy_bounded() {
        let mesh = TriangleMesh::icosphere(3);
        let p = params([1.0, 0.9, 0.7, 0.0, 0.0, 0.0, 0.2]);
        let cam = Camera::orbit(1.3, 2.0, 3.5, Vec3::zeros(), 0.7, 64, 48).unwrap();
        let light = Vec3::new(0.3, -0.2, -1.0);
        let a = render_mesh(&mesh, &uniform_materials(&mesh, p), &cam, &light, true).unwrap();
        let b = render_mesh(&mesh, &uniform_materials(&mesh, p), &cam, &light, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(trace_gbuffer(&mesh, &cam), trace_gbuffer(&mesh, &cam));
        assert!(rgb_max(&a).amax() <= 1.0);
        let s = render_sphere(&p, &cam, &light).unwrap();
        assert!(rgb_max(&s).amax() <= 1.0);
    }
}
