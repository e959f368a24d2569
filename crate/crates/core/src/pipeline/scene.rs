//! Scene bundles on disk:
//!
//! ```text
//! scene/
//!   images/<name>.pfm | <name>.png
//!   poses.txt
//!   mesh.obj
//! ```
//!
//! `poses.txt` holds one camera per line: the image file name, the
//! world-to-camera rotation as 9 row-major numbers, the translation
//! (`x_cam = R x_world + t`), the vertical field of view in radians, and
//! the image width and height. Blank lines and lines starting with `#` are
//! skipped.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Matrix3;

use super::PipelineError;
use crate::imaging::LinearImage;
use crate::renderer::{Camera, TriangleMesh};
use crate::Vec3;

pub const POSES_FILE: &str = "poses.txt";
pub const MESH_FILE: &str = "mesh.obj";
pub const IMAGES_DIR: &str = "images";

/// One line of the pose file, kept verbatim so bundles round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub name: String,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Pose {
    pub fn from_camera(name: &str, cam: &Camera) -> Self {
        Self {
            name: name.to_owned(),
            rotation: *cam.rotation(),
            translation: cam.translation(),
            fov_y: cam.fov_y(),
            width: cam.width(),
            height: cam.height(),
        }
    }

    pub fn camera(&self) -> Result<Camera, PipelineError> {
        Ok(Camera::from_pose(self.rotation, self.translation, self.fov_y, self.width, self.height)?)
    }

    pub fn to_line(&self) -> String {
        let mut s = self.name.clone();
        for v in self.rotation.transpose().iter().chain(self.translation.iter()) {
            write!(s, " {v}").unwrap();
        }
        write!(s, " {} {} {}", self.fov_y, self.width, self.height).unwrap();
        s
    }

    pub fn parse(line: &str, lineno: usize) -> Result<Self, PipelineError> {
        let bad = |message: String| PipelineError::PoseParse { line: lineno, message };
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 16 {
            return Err(bad(format!("expected 16 fields, found {}", tok.len())));
        }
        let num = |i: usize| -> Result<f64, PipelineError> {
            tok[i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(format!("bad number {:?}", tok[i])))
        };
        let size = |i: usize| -> Result<usize, PipelineError> {
            tok[i].parse::<usize>().map_err(|_| bad(format!("bad image size {:?}", tok[i])))
        };
        let r: Vec<f64> = (1..10).map(num).collect::<Result<_, _>>()?;
        Ok(Self {
            name: tok[0].to_owned(),
            rotation: Matrix3::from_row_slice(&r),
            translation: Vec3::new(num(10)?, num(11)?, num(12)?),
            fov_y: num(13)?,
            width: size(14)?,
            height: size(15)?,
        })
    }
}

pub fn read_poses<R: BufRead>(r: R) -> Result<Vec<Pose>, PipelineError> {
    let mut poses = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        poses.push(Pose::parse(t, i + 1)?);
    }
    Ok(poses)
}

pub fn write_poses<W: Write>(poses: &[Pose], mut w: W) -> std::io::Result<()> {
    writeln!(w, "# name r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz fov_y width height")?;
    for p in poses {
        writeln!(w, "{}", p.to_line())?;
    }
    Ok(())
}

/// Posed images of one mesh, paired by image file name.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub images: Vec<LinearImage>,
    pub poses: Vec<Pose>,
    pub cameras: Vec<Camera>,
    pub mesh: TriangleMesh,
}

impl SceneBundle {
    pub fn new(images: Vec<LinearImage>, poses: Vec<Pose>, mesh: TriangleMesh) -> Result<Self, PipelineError> {
        if poses.is_empty() {
            return Err(PipelineError::Scene("scene has no posed images".into()));
        }
        if images.len() != poses.len() {
            return Err(PipelineError::Scene(format!("{} images for {} poses", images.len(), poses.len())));
        }
        for (img, p) in images.iter().zip(&poses) {
            if img.dims() != (p.width, p.height) {
                return Err(PipelineError::Scene(format!(
                    "image {} is {}x{}, its pose says {}x{}",
                    p.name,
                    img.width(),
                    img.height(),
                    p.width,
                    p.height
                )));
            }
        }
        let cameras = poses.iter().map(Pose::camera).collect::<Result<_, _>>()?;
        Ok(Self { images, poses, cameras, mesh })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.poses.iter().map(|p| p.name.as_str())
    }

    /// Reads a bundle directory. Pixel values are taken as linear radiance;
    /// `srgb_input` applies the inverse sRGB curve to 8-bit images.
    pub fn load(dir: &Path, srgb_input: bool) -> Result<Self, PipelineError> {
        let poses_path = dir.join(POSES_FILE);
        let f = std::fs::File::open(&poses_path)
            .map_err(|e| PipelineError::Missing(format!("{}: {e}", poses_path.display())))?;
        let poses = read_poses(std::io::BufReader::new(f))?;
        let mesh_path = dir.join(MESH_FILE);
        if !mesh_path.exists() {
            return Err(PipelineError::Missing(mesh_path.display().to_string()));
        }
        let mesh = TriangleMesh::load(&mesh_path)?;

        let img_dir = dir.join(IMAGES_DIR);
        let mut on_disk: Vec<String> = std::fs::read_dir(&img_dir)
            .map_err(|e| PipelineError::Missing(format!("{}: {e}", img_dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".pfm") || n.ends_with(".png"))
            .collect();
        on_disk.sort();
        for p in &poses {
            if !on_disk.contains(&p.name) {
                return Err(PipelineError::Missing(format!("image {} named in {POSES_FILE}", p.name)));
            }
        }
        if let Some(extra) = on_disk.iter().find(|n| !poses.iter().any(|p| &p.name == *n)) {
            return Err(PipelineError::Unpaired(extra.clone()));
        }
        let images = poses
            .iter()
            .map(|p| {
                let path = img_dir.join(&p.name);
                LinearImage::load(&path, srgb_input).map_err(|e| PipelineError::Scene(format!("{}: {e}", p.name)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(images, poses, mesh)
    }

    /// Writes the bundle; images go out as PFM under their pose names.
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let img_dir = dir.join(IMAGES_DIR);
        std::fs::create_dir_all(&img_dir)?;
        for (img, p) in self.images.iter().zip(&self.poses) {
            img.save(&img_dir.join(&p.name))?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(POSES_FILE))?);
        write_poses(&self.poses, &mut w)?;
        w.flush()?;
        self.mesh.save(&dir.join(MESH_FILE))?;
        Ok(())
    }
}
