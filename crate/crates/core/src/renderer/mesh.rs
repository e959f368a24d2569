use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::bvh::{Bvh, RayHit};
use super::RenderError;
use crate::Vec3;

const MIN_FACE_AREA: f64 = 1e-14;

/// Indexed triangle mesh with counter-clockwise face normals and an
/// acceleration structure built at construction.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    normals: Vec<Vec3>,
    dropped_faces: usize,
    bvh: Bvh,
}

impl PartialEq for TriangleMesh {
    fn eq(&self, other: &Self) -> bool {
        self.vertices == other.vertices && self.faces == other.faces
    }
}

impl TriangleMesh {
    /// Validates indices and drops zero-area faces. Face ids of the result
    /// are positions in the filtered list.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self, RenderError> {
        let mut kept = Vec::with_capacity(faces.len());
        let mut normals = Vec::with_capacity(faces.len());
        for (i, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&k| k as usize >= vertices.len()) {
                return Err(RenderError::InvalidMesh(format!(
                    "face {i} references vertex {bad} but only {} exist",
                    vertices.len()
                )));
            }
            let [a, b, c] = f.map(|k| vertices[k as usize]);
            let cross = (b - a).cross(&(c - a));
            if !(0.5 * cross.norm() > MIN_FACE_AREA) {
                continue;
            }
            kept.push(*f);
            normals.push(cross.normalize());
        }
        let dropped_faces = faces.len() - kept.len();
        let bvh = Bvh::build(&vertices, &kept);
        Ok(Self { vertices, faces: kept, normals, dropped_faces, bvh })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn face_normal(&self, face: u32) -> Vec3 {
        self.normals[face as usize]
    }

    pub fn face_vertices(&self, face: u32) -> [Vec3; 3] {
        self.faces[face as usize].map(|k| self.vertices[k as usize])
    }

    /// Faces removed as degenerate while loading.
    pub fn dropped_faces(&self) -> usize {
        self.dropped_faces
    }

    pub fn closest_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<RayHit> {
        self.bvh.closest_hit(&self.vertices, &self.faces, origin, dir, f64::INFINITY)
    }

    pub fn occluded(&self, origin: &Vec3, dir: &Vec3, t_max: f64) -> bool {
        self.bvh.occluded(&self.vertices, &self.faces, origin, dir, t_max)
    }

    /// Parses `v x y z` and `f i j k` lines (1-based, triangles only).
    /// Other record types are ignored; `f` entries may carry `/`-separated
    /// texture and normal indices, of which only the vertex index is used.
    pub fn read_obj<R: BufRead>(r: R) -> Result<Self, RenderError> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| RenderError::Io(e.to_string()))?;
            let lineno = lineno + 1;
            let mut tok = line.split_whitespace();
            let malformed = |what: &str| RenderError::MeshParse { line: lineno, message: what.to_owned() };
            match tok.next() {
                Some("v") => {
                    let xs: Vec<f64> = tok
                        .take(3)
                        .map(|t| t.parse::<f64>().map_err(|_| malformed(&format!("bad coordinate {t:?}"))))
                        .collect::<Result<_, _>>()?;
                    if xs.len() != 3 || xs.iter().any(|x| !x.is_finite()) {
                        return Err(malformed("vertex needs three finite coordinates"));
                    }
                    vertices.push(Vec3::new(xs[0], xs[1], xs[2]));
                }
                Some("f") => {
                    let idx: Vec<&str> = tok.collect();
                    if idx.len() != 3 {
                        return Err(malformed(&format!("face has {} vertices, expected 3", idx.len())));
                    }
                    let mut face = [0u32; 3];
                    for (k, t) in idx.iter().enumerate() {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|_| malformed(&format!("bad index {t:?}")))?;
                        if i < 1 || i as usize > vertices.len() {
                            return Err(malformed(&format!("index {i} out of range")));
                        }
                        face[k] = (i - 1) as u32;
                    }
                    faces.push(face);
                }
                _ => {}
            }
        }
        Self::new(vertices, faces)
    }

    pub fn write_obj<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, RenderError> {
        let f = std::fs::File::open(path).map_err(|e| RenderError::Io(format!("{}: {e}", path.display())))?;
        Self::read_obj(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), RenderError> {
        let f = std::fs::File::create(path).map_err(|e| RenderError::Io(format!("{}: {e}", path.display())))?;
        self.write_obj(std::io::BufWriter::new(f)).map_err(|e| RenderError::Io(e.to_string()))
    }

    /// Unit icosphere: an icosahedron with each face split into four
    /// `subdivisions` times, vertices projected onto the sphere.
    /// Level 4 has 5120 faces.
    pub fn icosphere(subdivisions: u32) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Vec3> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
            let mut mid = |a: u32, b: u32, vertices: &mut Vec<Vec3>| -> u32 {
                let key = (a.min(b), a.max(b));
                *midpoints.entry(key).or_insert_with(|| {
                    vertices.push(((vertices[a as usize] + vertices[b as usize]) * 0.5).normalize());
                    (vertices.len() - 1) as u32
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        Self::new(vertices, faces).expect("icosphere construction is valid")
    }

    /// Axis-aligned square in the `z = 0` plane made of two triangles, facing `+z`.
    pub fn square(half_extent: f64) -> Self {
        let h = half_extent;
        let vertices = vec![
            Vec3::new(-h, -h, 0.0),
            Vec3::new(h, -h, 0.0),
            Vec3::new(h, h, 0.0),
            Vec3::new(-h, h, 0.0),
        ];
        Self::new(vertices, vec![[0, 1, 2], [0, 2, 3]]).expect("square construction is valid")
    }
}
