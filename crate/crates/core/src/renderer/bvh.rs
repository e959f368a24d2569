//! Bounding volume hierarchy over triangles with closest-hit and any-hit queries.

use crate::Vec3;

const LEAF_SIZE: usize = 4;
const RAY_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self { min: Vec3::repeat(f64::INFINITY), max: Vec3::repeat(f64::NEG_INFINITY) }
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb { min: self.min.inf(&o.min), max: self.max.sup(&o.max) }
    }

    /// Entry distance of the ray into the box, if it enters before `t_max`.
    #[inline]
    fn hit(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut near = (self.min[a] - origin[a]) * inv_dir[a];
            let mut far = (self.max[a] - origin[a]) * inv_dir[a];
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // NaN from 0 * inf leaves the bound untouched
            if near > t0 {
                t0 = near;
            }
            if far < t1 {
                t1 = far;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

/// Closest intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub face: u32,
}

impl RayHit {
    /// Hit ordering by distance, ties broken by the lower face index.
    #[inline]
    fn closer_than(&self, other: &RayHit) -> bool {
        self.t < other.t || (self.t == other.t && self.face < other.face)
    }
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    // leaf: first index into `order`; interior: index of the left child
    first: u32,
    // leaf: number of triangles; interior: 0 (right child is `first + 1`)
    count: u32,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

/// Möller-Trumbore intersection, two-sided.
#[inline]
pub fn intersect_triangle(origin: &Vec3, dir: &Vec3, v0: &Vec3, v1: &Vec3, v2: &Vec3) -> Option<f64> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - v0;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > RAY_EPSILON).then_some(t)
}

impl Bvh {
    pub fn build(vertices: &[Vec3], faces: &[[u32; 3]]) -> Self {
        let tri_bounds: Vec<Aabb> = faces
            .iter()
            .map(|f| {
                let mut b = Aabb::empty();
                for &i in f {
                    b.grow(&vertices[i as usize]);
                }
                b
            })
            .collect();
        let centroids: Vec<Vec3> = tri_bounds.iter().map(|b| (b.min + b.max) * 0.5).collect();
        let mut order: Vec<u32> = (0..faces.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * faces.len().max(1));
        nodes.push(Node { bounds: Aabb::empty(), first: 0, count: 0 });
        if !faces.is_empty() {
            Self::split(&mut nodes, 0, &mut order, 0, faces.len(), &tri_bounds, &centroids);
        }
        Bvh { nodes, order }
    }

    fn split(
        nodes: &mut Vec<Node>,
        node: usize,
        order: &mut [u32],
        start: usize,
        end: usize,
        tri_bounds: &[Aabb],
        centroids: &[Vec3],
    ) {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &t in &order[start..end] {
            bounds = bounds.union(&tri_bounds[t as usize]);
            cbounds.grow(&centroids[t as usize]);
        }
        nodes[node].bounds = bounds;
        let n = end - start;
        let extent = cbounds.max - cbounds.min;
        let axis = extent.imax();
        if n <= LEAF_SIZE || extent[axis] <= 0.0 {
            nodes[node].first = start as u32;
            nodes[node].count = n as u32;
            return;
        }
        // median split on the widest centroid axis; face index breaks ties deterministically
        let mid = start + n / 2;
        order[start..end].select_nth_unstable_by(n / 2, |&a, &b| {
            centroids[a as usize][axis].total_cmp(&centroids[b as usize][axis]).then(a.cmp(&b))
        });
        let left = nodes.len();
        nodes.push(Node { bounds: Aabb::empty(), first: 0, count: 0 });
        nodes.push(Node { bounds: Aabb::empty(), first: 0, count: 0 });
        nodes[node].first = left as u32;
        nodes[node].count = 0;
        Self::split(nodes, left, order, start, mid, tri_bounds, centroids);
        Self::split(nodes, left + 1, order, mid, end, tri_bounds, centroids);
    }

    pub fn closest_hit(
        &self,
        vertices: &[Vec3],
        faces: &[[u32; 3]],
        origin: &Vec3,
        dir: &Vec3,
        t_max: f64,
    ) -> Option<RayHit> {
        if faces.is_empty() {
            return None;
        }
        let inv_dir = dir.map(|d| 1.0 / d);
        let mut best: Option<RayHit> = None;
        let mut stack = [0u32; 64];
        let mut sp = 0usize;
        let mut node = 0usize;
        loop {
            let n = &self.nodes[node];
            let limit = best.map_or(t_max, |b| b.t);
            if n.bounds.hit(origin, &inv_dir, limit).is_some() {
                if n.count > 0 {
                    for &f in &self.order[n.first as usize..(n.first + n.count) as usize] {
                        let [a, b, c] = faces[f as usize];
                        if let Some(t) = intersect_triangle(
                            origin,
                            dir,
                            &vertices[a as usize],
                            &vertices[b as usize],
                            &vertices[c as usize],
                        ) {
                            let hit = RayHit { t, face: f };
                            if t <= t_max && best.map_or(true, |b| hit.closer_than(&b)) {
                                best = Some(hit);
                            }
                        }
                    }
                } else {
                    let l = n.first as usize;
                    let (tl, tr) = (
                        self.nodes[l].bounds.hit(origin, &inv_dir, limit),
                        self.nodes[l + 1].bounds.hit(origin, &inv_dir, limit),
                    );
                    let (near, far) = match (tl, tr) {
                        (Some(a), Some(b)) if b < a => (Some(l + 1), Some(l)),
                        (Some(_), Some(_)) => (Some(l), Some(l + 1)),
                        (Some(_), None) => (Some(l), None),
                        (None, Some(_)) => (Some(l + 1), None),
                        (None, None) => (None, None),
                    };
                    if let Some(far) = far {
                        stack[sp] = far as u32;
                        sp += 1;
                    }
                    if let Some(near) = near {
                        node = near;
                        continue;
                    }
                }
            }
            if sp == 0 {
                break;
            }
            sp -= 1;
            node = stack[sp] as usize;
        }
        best
    }

    /// True when any triangle blocks the open segment `(0, t_max)`.
    pub fn occluded(&self, vertices: &[Vec3], faces: &[[u32; 3]], origin: &Vec3, dir: &Vec3, t_max: f64) -> bool {
        if faces.is_empty() {
            return false;
        }
        let inv_dir = dir.map(|d| 1.0 / d);
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            let n = &self.nodes[node];
            if n.bounds.hit(origin, &inv_dir, t_max).is_none() {
                continue;
            }
            if n.count > 0 {
                for &f in &self.order[n.first as usize..(n.first + n.count) as usize] {
                    let [a, b, c] = faces[f as usize];
                    let hit = intersect_triangle(
                        origin,
                        dir,
                        &vertices[a as usize],
                        &vertices[b as usize],
                        &vertices[c as usize],
                    );
                    if matches!(hit, Some(t) if t < t_max) {
                        return true;
                    }
                }
            } else {
                stack.push(n.first as usize);
                stack.push(n.first as usize + 1);
            }
        }
        false
    }
}

/// Reference closest hit over every triangle.
pub fn brute_force_closest_hit(vertices: &[Vec3], faces: &[[u32; 3]], origin: &Vec3, dir: &Vec3) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    for (i, f) in faces.iter().enumerate() {
        let [a, b, c] = f.map(|k| vertices[k as usize]);
        if let Some(t) = intersect_triangle(origin, dir, &a, &b, &c) {
            let hit = RayHit { t, face: i as u32 };
            if best.map_or(true, |b| hit.closer_than(&b)) {
                best = Some(hit);
            }
        }
    }
    best
}
