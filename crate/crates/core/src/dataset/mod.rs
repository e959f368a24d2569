//! Synthetic training corpus: material sets rendered on the unit sphere
//! from a ring of viewpoints, written as labelled reflectance maps.

pub mod augment;

use std::fmt::Write as _;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use augment::{augment, augment_with_rng, sample_rng, AugmentConfig};

use crate::brdf::ReflectanceParams;
use crate::renderer::{sphere_map, Camera, RenderError};
use crate::spherical::{MapError, ReflectanceMap, ResolvedMap};
use crate::Vec3;

/// Zenith angles of the viewpoint rings.
pub const VIEW_ZENITHS: [f64; 3] = [
    std::f64::consts::PI / 9.0,
    5.0 * std::f64::consts::PI / 18.0,
    4.0 * std::f64::consts::PI / 9.0,
];
pub const VIEW_AZIMUTHS: usize = 8;
pub const VIEW_DISTANCE: f64 = 4.0;
pub const VIEW_FOV_Y: f64 = 40.0 * std::f64::consts::PI / 180.0;
pub const VIEW_RESOLUTION: usize = 256;

pub const GRID_MATERIALS: usize = 20_480;
pub const RANDOM_MATERIALS: usize = 3_520;

/// World direction *towards* the light used for every training render.
/// The light stays fixed while the viewpoint moves.
pub fn default_light_towards() -> Vec3 {
    let (theta, phi) = (std::f64::consts::FRAC_PI_6, std::f64::consts::FRAC_PI_4);
    Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

/// Direction of travel of the default light, as the renderer expects it.
pub fn default_light_dir() -> Vec3 {
    -default_light_towards()
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("grid spec yields {actual} materials but {expected} were requested")]
    GridCount { expected: usize, actual: usize },
    #[error("grid level {0} outside [0, 1]")]
    GridLevel(f64),
    #[error("augment setting {name} = {value} outside [0, 1]")]
    AugmentRange { name: &'static str, value: f64 },
    #[error("material {material}, view {view}: {source}")]
    Pair { material: usize, view: usize, source: Box<DatasetError> },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Image(#[from] crate::imaging::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The 24 training cameras: three zenith rings times eight azimuths,
/// ordered ring by ring.
pub fn viewpoint_grid() -> Vec<Camera> {
    viewpoint_grid_sized(VIEW_RESOLUTION)
}

pub fn viewpoint_grid_sized(resolution: usize) -> Vec<Camera> {
    let mut cams = Vec::with_capacity(VIEW_ZENITHS.len() * VIEW_AZIMUTHS);
    for &theta in &VIEW_ZENITHS {
        for k in 0..VIEW_AZIMUTHS {
            let phi = k as f64 * std::f64::consts::FRAC_PI_4;
            cams.push(
                Camera::orbit(theta, phi, VIEW_DISTANCE, Vec3::zeros(), VIEW_FOV_Y, resolution, resolution)
                    .expect("grid cameras are valid"),
            );
        }
    }
    cams
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Grid,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialSet {
    pub entries: Vec<ReflectanceParams>,
    pub provenance: Vec<Provenance>,
    pub seed: u64,
}

impl MaterialSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn concat(mut self, other: MaterialSet) -> MaterialSet {
        self.entries.extend(other.entries);
        self.provenance.extend(other.provenance);
        self
    }
}

/// Lattice over the seven parameters: every k_d and k_s channel takes each
/// value of `color_levels`, roughness each value of `roughness_levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub color_levels: Vec<f64>,
    pub roughness_levels: Vec<f64>,
    pub count: usize,
}

/// `n` cell centers of `[0, 1]`: `(i + 0.5) / n`.
pub fn cell_centers(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

impl GridSpec {
    pub fn uniform(color: usize, roughness: usize, count: usize) -> Self {
        Self { color_levels: cell_centers(color), roughness_levels: cell_centers(roughness), count }
    }

    /// 4 levels per color channel and 5 roughness levels.
    pub fn full() -> Self {
        Self::uniform(4, 5, GRID_MATERIALS)
    }

    /// 2 levels per color channel and 3 roughness levels.
    pub fn desk() -> Self {
        Self::uniform(2, 3, 192)
    }

    pub fn lattice_size(&self) -> usize {
        self.color_levels.len().pow(6) * self.roughness_levels.len()
    }
}

pub fn material_grid(spec: &GridSpec) -> Result<MaterialSet, DatasetError> {
    let actual = spec.lattice_size();
    if actual != spec.count {
        return Err(DatasetError::GridCount { expected: spec.count, actual });
    }
    if let Some(&bad) = spec.color_levels.iter().chain(&spec.roughness_levels).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DatasetError::GridLevel(bad));
    }
    let c = &spec.color_levels;
    let nc = c.len();
    let mut entries = Vec::with_capacity(actual);
    for idx in 0..nc.pow(6) {
        let mut v = [0.0; 7];
        let mut rest = idx;
        for slot in v.iter_mut().take(6).rev() {
            *slot = c[rest % nc];
            rest /= nc;
        }
        for &r in &spec.roughness_levels {
            v[6] = r;
            entries.push(ReflectanceParams::from_array(v).expect("levels validated"));
        }
    }
    Ok(MaterialSet { provenance: vec![Provenance::Grid; entries.len()], entries, seed: 0 })
}

/// `n` independent uniform 7-vectors. Draws are rounded to 9 significant
/// digits so the manifest text reproduces them exactly.
pub fn material_random(n: usize, seed: u64) -> MaterialSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|_| {
            let v: [f64; 7] = std::array::from_fn(|_| round_sig9(rng.gen::<f64>()));
            ReflectanceParams::from_array(v).expect("draws lie in [0, 1)")
        })
        .collect::<Vec<_>>();
    MaterialSet { provenance: vec![Provenance::Random; n], entries, seed }
}

/// The full 24,000-material set: the 4^6 * 5 lattice followed by the random draws.
pub fn full_material_set(seed: u64) -> MaterialSet {
    material_grid(&GridSpec::full()).expect("default grid is consistent").concat(material_random(RANDOM_MATERIALS, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MapFormat {
    /// Accumulator maps in the binary RMAP container.
    #[default]
    Rmap,
    /// Resolved per-texel means as a PFM image.
    Pfm,
}

impl MapFormat {
    fn extension(self) -> &'static str {
        match self {
            MapFormat::Rmap => "rmap",
            MapFormat::Pfm => "pfm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// Path relative to the dataset directory.
    pub path: String,
    pub label: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

pub fn round_sig9(v: f64) -> f64 {
    format_sig9(v).parse().expect("formatted float parses")
}

/// Plain decimal with 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

impl ManifestRow {
    pub fn to_line(&self) -> String {
        let mut s = self.path.clone();
        for v in &self.label {
            write!(s, "\t{}", format_sig9(*v)).unwrap();
        }
        s
    }

    pub fn parse(line: &str, lineno: usize) -> Result<Self, DatasetError> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(DatasetError::Manifest { line: lineno, message: format!("expected 8 fields, found {}", fields.len()) });
        }
        let mut label = [0.0; 7];
        for (slot, f) in label.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| DatasetError::Manifest { line: lineno, message: format!("bad number {f:?}") })?;
        }
        Ok(Self { path: fields[0].to_owned(), label })
    }
}

impl Manifest {
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.rows {
            writeln!(w, "{}", r.to_line())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, DatasetError> {
        let mut rows = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(ManifestRow::parse(&line, i + 1)?);
        }
        Ok(Self { rows })
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let f = std::fs::File::open(dir.join(MANIFEST_FILE))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

pub fn sample_file_name(material: usize, view: usize, format: MapFormat) -> String {
    format!("m{material:06}_v{view:02}.{}", format.extension())
}

/// Reads one sample back as a resolved map.
pub fn load_sample(dir: &Path, row: &ManifestRow) -> Result<ResolvedMap, DatasetError> {
    let path = dir.join(&row.path);
    if path.extension().is_some_and(|e| e == "pfm") {
        let image = crate::imaging::LinearImage::load(&path, false)?;
        let occupied: Vec<bool> = image.pixels().iter().map(|p| p.max() > 0.0).collect();
        let occupancy = occupied.iter().filter(|o| **o).count() as f64 / occupied.len() as f64;
        Ok(ResolvedMap { image, occupied, occupancy })
    } else {
        Ok(ReflectanceMap::load(&path)?.resolve())
    }
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub format: MapFormat,
    /// World direction of light travel.
    pub light_dir: Vec3,
    /// Pairs rendered per parallel batch before their rows are appended.
    pub batch: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { format: MapFormat::Rmap, light_dir: default_light_dir(), batch: 256 }
    }
}

fn write_sample(
    params: &ReflectanceParams,
    cam: &Camera,
    opts: &GenerateOptions,
    path: &Path,
) -> Result<(), DatasetError> {
    let map = sphere_map(params, cam, &opts.light_dir)?;
    match opts.format {
        MapFormat::Rmap => map.save(path)?,
        MapFormat::Pfm => map.resolve().image.save(path)?,
    }
    Ok(())
}

/// Renders every (material, camera) pair into `out_dir` and writes the
/// manifest in material-major order. An existing manifest is treated as a
/// completed prefix: its rows are kept and generation resumes after them.
pub fn generate_dataset(
    materials: &MaterialSet,
    cameras: &[Camera],
    out_dir: &Path,
    opts: &GenerateOptions,
) -> Result<Manifest, DatasetError> {
    std::fs::create_dir_all(out_dir)?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let total = materials.len() * cameras.len();
    let pair = |i: usize| (i / cameras.len(), i % cameras.len());
    let row_for = |i: usize| {
        let (m, v) = pair(i);
        ManifestRow { path: sample_file_name(m, v, opts.format), label: materials.entries[m].to_array() }
    };

    let mut done = Vec::new();
    if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)?;
        for (i, line) in text.lines().enumerate() {
            match ManifestRow::parse(line, i + 1) {
                Ok(row) if i < total && row == row_for(i) && out_dir.join(&row.path).exists() => done.push(row),
                _ => break,
            }
        }
    }
    // rewrite the verified prefix so a torn trailing line cannot survive
    let mut w = BufWriter::new(std::fs::File::create(&manifest_path)?);
    Manifest { rows: done.clone() }.write_to(&mut w)?;
    w.flush()?;

    let mut rows = done;
    let batch = opts.batch.max(1);
    let mut start = rows.len();
    while start < total {
        let end = (start + batch).min(total);
        let results: Vec<Result<ManifestRow, DatasetError>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let (m, v) = pair(i);
                let row = row_for(i);
                write_sample(&materials.entries[m], &cameras[v], opts, &out_dir.join(&row.path))
                    .map_err(|e| DatasetError::Pair { material: m, view: v, source: Box::new(e) })?;
                Ok(row)
            })
            .collect();
        for r in results {
            let row = r?;
            writeln!(w, "{}", row.to_line())?;
            rows.push(row);
        }
        w.flush()?;
        start = end;
    }
    Ok(Manifest { rows })
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
