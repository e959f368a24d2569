//! Damped least-squares inversion of a reflectance map into the seven
//! material parameters, optionally together with the light direction.
//!
//! Parameters are optimized in an unconstrained space: each material
//! parameter is the logistic image of a free coordinate, the light zenith
//! is `pi` times a logistic, and the light azimuth is free. Every start is
//! seeded by a variable-projection scan: for a grid of roughness values the
//! model is linear in `k_d` and `k_s`, so the best box-constrained pair per
//! channel is solved in closed form and the best roughness kept.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::brdf::{roughness_to_alpha, shade_white, shading_basis, ReflectanceParams, ShadingGeometry};
use crate::metrics::{psnr_masked, MetricError};
use crate::spherical::{dir_to_angles, ReflectanceMap, SphericalAngles};
use crate::{Rgb, Vec3};

pub const DEFAULT_MIN_SAMPLES: usize = 30;
pub const DEFAULT_MAX_ITERATIONS: usize = 200;
const JACOBIAN_STEP: f64 = 1e-4;
const INITIAL_DAMPING: f64 = 1e-3;
const MAX_DAMPING: f64 = 1e12;
const RELATIVE_TOLERANCE: f64 = 1e-8;
const BOX_EPS: f64 = 1e-3;
const MAX_STEP: f64 = 1.0;
/// Iterations every light start receives before the best ones are refined.
const SCREEN_ITERATIONS: usize = 10;
const REFINED_STARTS: usize = 3;
const ROBUST_ROUNDS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("map has no occupied texels")]
    EmptyMap,
    #[error("map has {found} occupied texels, at least {required} required")]
    TooFewSamples { found: usize, required: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// How a texel direction of the map translates into shading geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapGeometry {
    /// Unit sphere at the origin seen from `eye`: the texel direction is the
    /// surface normal, and the view direction points from it to the eye.
    Sphere { eye: Vec3 },
    /// A flat surface with normal `+z`: the texel direction is the view
    /// direction in the surface's local frame.
    Surface,
}

impl MapGeometry {
    /// Normal and unit view direction for a texel direction `d`.
    #[inline]
    pub fn normal_and_view(&self, d: &Vec3) -> (Vec3, Vec3) {
        match self {
            MapGeometry::Sphere { eye } => (*d, (eye - d).normalize()),
            MapGeometry::Surface => (Vec3::z(), *d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub geometry: MapGeometry,
    pub min_samples: usize,
    pub max_iterations: usize,
    /// Clamp per-texel squared error at this quantile of the error
    /// distribution and refit on the texels below it.
    pub robust_quantile: Option<f64>,
    /// Start from these parameters instead of the roughness scan.
    pub initial: Option<ReflectanceParams>,
    pub light_azimuth_starts: usize,
    pub light_zenith_starts: usize,
}

impl FitOptions {
    pub fn new(geometry: MapGeometry) -> Self {
        Self {
            geometry,
            min_samples: DEFAULT_MIN_SAMPLES,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            robust_quantile: None,
            initial: None,
            light_azimuth_starts: 8,
            light_zenith_starts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ReflectanceParams,
    /// Direction towards the light, in the map's frame.
    pub light: SphericalAngles,
    /// Root-mean-square per-channel error over occupied texels.
    pub rmse: f64,
    /// Sum of squared errors (clamped when the robust loss is on).
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step of the winning start.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    n: Vec3,
    wo: Vec3,
    y: Rgb,
}

fn samples_of(map: &ReflectanceMap, geometry: &MapGeometry) -> Vec<Sample> {
    map.iter_occupied()
        .map(|(row, col, t)| {
            let d = map.texel_direction(row, col, t);
            let (n, wo) = geometry.normal_and_view(&d);
            Sample { n, wo, y: t.mean() }
        })
        .collect()
}

#[inline]
fn model(params: &ReflectanceParams, wi: &Vec3, s: &Sample) -> Rgb {
    shade_white(params, &ShadingGeometry::new_unchecked(s.n, *wi, s.wo))
}

/// Sum over occupied texels of the squared RGB difference between the map
/// and the forward model under unit white light from `light`.
pub fn residual(
    params: &ReflectanceParams,
    light: &SphericalAngles,
    map: &ReflectanceMap,
    geometry: &MapGeometry,
) -> Result<f64, FitError> {
    if map.is_empty() {
        return Err(FitError::EmptyMap);
    }
    let wi = light.to_direction();
    Ok(samples_of(map, geometry).iter().map(|s| (s.y - model(params, &wi, s)).norm_squared()).sum())
}

/// The forward model evaluated on the occupied texels of `map`.
pub fn model_map(
    params: &ReflectanceParams,
    light: &SphericalAngles,
    map: &ReflectanceMap,
    geometry: &MapGeometry,
) -> ReflectanceMap {
    let wi = light.to_direction();
    let mut out = ReflectanceMap::with_size(map.height(), map.width());
    for (row, col, t) in map.iter_occupied() {
        let d = map.texel_direction(row, col, t);
        let (n, wo) = geometry.normal_and_view(&d);
        let v = model(params, &wi, &Sample { n, wo, y: Rgb::zeros() });
        out.accumulate_texel(row, col, v).expect("model radiance is valid");
    }
    out
}

/// PSNR between the map and its re-rendering on occupied texels, with both
/// clamped to the displayable `[0, 1]` range.
pub fn rerender_psnr(
    params: &ReflectanceParams,
    light: &SphericalAngles,
    map: &ReflectanceMap,
    geometry: &MapGeometry,
) -> Result<f64, FitError> {
    if map.is_empty() {
        return Err(FitError::EmptyMap);
    }
    let a = map.resolve();
    let b = model_map(params, light, map, geometry).resolve();
    Ok(psnr_masked(&a.image.clamp_unit(), &b.image.clamp_unit(), &a.occupied)?)
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

#[inline]
fn logit(p: f64) -> f64 {
    let p = p.clamp(BOX_EPS, 1.0 - BOX_EPS);
    (p / (1.0 - p)).ln()
}

/// Free coordinates: 7 material values, then optionally zenith and azimuth.
struct Problem<'a> {
    samples: &'a [Sample],
    known_light: Option<Vec3>,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        if self.known_light.is_some() {
            7
        } else {
            9
        }
    }

    fn decode(&self, u: &DVector<f64>) -> (ReflectanceParams, SphericalAngles) {
        let p: [f64; 7] = std::array::from_fn(|i| sigmoid(u[i]));
        let params = ReflectanceParams::from_array(p).expect("logistic values lie in [0, 1]");
        let light = match self.known_light {
            Some(wi) => dir_to_angles(&wi).expect("light is unit"),
            None => SphericalAngles::wrapped(std::f64::consts::PI * sigmoid(u[7]), u[8]),
        };
        (params, light)
    }

    fn encode(&self, params: &ReflectanceParams, light: &SphericalAngles) -> DVector<f64> {
        let mut u = DVector::zeros(self.dim());
        for (i, v) in params.to_array().iter().enumerate() {
            u[i] = logit(*v);
        }
        if self.known_light.is_none() {
            u[7] = logit(light.theta / std::f64::consts::PI);
            u[8] = light.phi;
        }
        u
    }

    fn residuals(&self, u: &DVector<f64>, active: &[usize]) -> DVector<f64> {
        let (params, light) = self.decode(u);
        let wi = light.to_direction();
        let mut r = DVector::zeros(3 * active.len());
        for (k, &i) in active.iter().enumerate() {
            let s = &self.samples[i];
            let e = model(&params, &wi, s) - s.y;
            r[3 * k] = e.x;
            r[3 * k + 1] = e.y;
            r[3 * k + 2] = e.z;
        }
        r
    }

    fn per_sample_errors(&self, u: &DVector<f64>) -> Vec<f64> {
        let (params, light) = self.decode(u);
        let wi = light.to_direction();
        self.samples.iter().map(|s| (s.y - model(&params, &wi, s)).norm_squared()).collect()
    }
}

struct LmState {
    u: DVector<f64>,
    cost: f64,
    lambda: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

impl LmState {
    fn new(problem: &Problem, u: DVector<f64>, active: &[usize]) -> Self {
        let cost = problem.residuals(&u, active).norm_squared();
        Self { u, cost, lambda: INITIAL_DAMPING, iterations: 0, converged: false, history: vec![cost] }
    }
}

/// Runs damped Gauss-Newton steps until convergence or `budget` iterations.
fn levenberg_marquardt(problem: &Problem, state: &mut LmState, active: &[usize], budget: usize) {
    let k = problem.dim();
    for _ in 0..budget {
        if state.converged {
            return;
        }
        if state.cost == 0.0 {
            state.converged = true;
            return;
        }
        state.iterations += 1;
        let r = problem.residuals(&state.u, active);
        let mut jac = DMatrix::zeros(r.len(), k);
        for j in 0..k {
            let mut up = state.u.clone();
            let mut down = state.u.clone();
            up[j] += JACOBIAN_STEP;
            down[j] -= JACOBIAN_STEP;
            let col = (problem.residuals(&up, active) - problem.residuals(&down, active)) / (2.0 * JACOBIAN_STEP);
            jac.set_column(j, &col);
        }
        let jtj = jac.tr_mul(&jac);
        let g = jac.tr_mul(&r);
        let diag_floor = 1e-12 * jtj.diagonal().max().max(1e-300);
        loop {
            let mut a = jtj.clone();
            for i in 0..k {
                a[(i, i)] += state.lambda * jtj[(i, i)].max(diag_floor);
            }
            let step = a.cholesky().map(|c| c.solve(&g));
            if let Some(mut step) = step {
                // a bounded step keeps coordinates out of the flat logistic tails
                let longest = step.amax();
                if longest > MAX_STEP {
                    step *= MAX_STEP / longest;
                }
                let candidate = &state.u - step;
                let cost = problem.residuals(&candidate, active).norm_squared();
                if cost < state.cost {
                    let rel = (state.cost - cost) / state.cost;
                    state.u = candidate;
                    state.cost = cost;
                    state.history.push(cost);
                    state.lambda = (state.lambda * 0.5).max(1e-15);
                    if rel < RELATIVE_TOLERANCE {
                        state.converged = true;
                    }
                    break;
                }
            }
            state.lambda *= 10.0;
            if state.lambda > MAX_DAMPING {
                // no descent direction left at working precision
                state.converged = true;
                return;
            }
        }
    }
}

const ROUGHNESS_SCAN: usize = 24;

/// Best box-constrained `(x, z)` for `min |a x + b z - y|^2` given the sums.
fn box_ls2(saa: f64, sab: f64, sbb: f64, say: f64, sby: f64) -> ((f64, f64), f64) {
    let (lo, hi) = (BOX_EPS, 1.0 - BOX_EPS);
    let obj = |x: f64, z: f64| x * x * saa + 2.0 * x * z * sab + z * z * sbb - 2.0 * x * say - 2.0 * z * sby;
    let mut cands = Vec::with_capacity(5);
    let det = saa * sbb - sab * sab;
    if det > 1e-18 * (saa * sbb).max(1e-300) {
        let x = (say * sbb - sby * sab) / det;
        let z = (sby * saa - say * sab) / det;
        if (lo..=hi).contains(&x) && (lo..=hi).contains(&z) {
            cands.push((x, z));
        }
    }
    for edge in [lo, hi] {
        let z = if sbb > 0.0 { ((sby - edge * sab) / sbb).clamp(lo, hi) } else { lo };
        cands.push((edge, z));
        let x = if saa > 0.0 { ((say - edge * sab) / saa).clamp(lo, hi) } else { lo };
        cands.push((x, edge));
    }
    cands
        .into_iter()
        .map(|c| (c, obj(c.0, c.1)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("candidates are nonempty")
}

/// Variable-projection start: scan roughness, solve k_d and k_s in closed form.
fn scan_start(samples: &[Sample], active: &[usize], wi: &Vec3) -> ReflectanceParams {
    let mut best: Option<(f64, [f64; 7])> = None;
    for i in 0..ROUGHNESS_SCAN {
        let r = (0.2 + 0.8 * i as f64 / (ROUGHNESS_SCAN - 1) as f64).powi(2).min(1.0 - BOX_EPS);
        let alpha = roughness_to_alpha(r);
        let (mut saa, mut sab, mut sbb) = (0.0, 0.0, 0.0);
        let (mut say, mut sby, mut syy) = (Rgb::zeros(), Rgb::zeros(), 0.0);
        for &k in active {
            let s = &samples[k];
            syy += s.y.norm_squared();
            if let Some((a, b)) = shading_basis(alpha, &ShadingGeometry::new_unchecked(s.n, *wi, s.wo)) {
                saa += a * a;
                sab += a * b;
                sbb += b * b;
                say += s.y * a;
                sby += s.y * b;
            }
        }
        let mut v = [0.0; 7];
        v[6] = r;
        let mut cost = syy;
        for c in 0..3 {
            let ((x, z), o) = box_ls2(saa, sab, sbb, say[c], sby[c]);
            v[c] = x;
            v[3 + c] = z;
            cost += o;
        }
        if best.as_ref().map_or(true, |(b, _)| cost < *b) {
            best = Some((cost, v));
        }
    }
    ReflectanceParams::from_array(best.expect("scan is nonempty").1).expect("scan values lie in the box")
}

fn light_starts(samples: &[Sample], opts: &FitOptions) -> Vec<SphericalAngles> {
    use std::f64::consts::PI;
    let nz = opts.light_zenith_starts.max(1);
    let na = opts.light_azimuth_starts.max(1);
    let (lo, hi) = match opts.geometry {
        MapGeometry::Surface => (0.0, PI / 2.0),
        MapGeometry::Sphere { .. } => (0.0, PI),
    };
    let mut starts = Vec::with_capacity(nz * na + 1);
    for z in 0..nz {
        let theta = lo + (hi - lo) * (z as f64 + 0.5) / nz as f64;
        for a in 0..na {
            starts.push(SphericalAngles::wrapped(theta, 2.0 * PI * a as f64 / na as f64));
        }
    }
    // data-driven starts: the mirror direction of the brightest texel, and
    // for spheres the brightness-weighted mean normal
    let mut guesses = Vec::new();
    if let Some(s) = samples.iter().max_by(|a, b| a.y.sum().total_cmp(&b.y.sum())) {
        guesses.push(2.0 * s.n.dot(&s.wo) * s.n - s.wo);
    }
    if let MapGeometry::Sphere { .. } = opts.geometry {
        guesses.push(samples.iter().map(|s| s.n * s.y.sum()).sum::<Vec3>());
    }
    for g in guesses {
        if g.norm() > 1e-12 {
            starts.push(dir_to_angles(&g.normalize()).expect("normalized"));
        }
    }
    starts
}

/// Fits the material (and the light when `known_light` is `None`) to the
/// occupied texels of `map`.
pub fn fit(map: &ReflectanceMap, known_light: Option<SphericalAngles>, opts: &FitOptions) -> Result<FitResult, FitError> {
    let found = map.occupied_texels();
    if found == 0 {
        return Err(FitError::EmptyMap);
    }
    if found < opts.min_samples {
        return Err(FitError::TooFewSamples { found, required: opts.min_samples });
    }
    let samples = samples_of(map, &opts.geometry);
    let problem = Problem { samples: &samples, known_light: known_light.map(|l| l.to_direction()) };
    let all: Vec<usize> = (0..samples.len()).collect();

    let start_state = |light: &SphericalAngles| {
        let params = opts.initial.unwrap_or_else(|| scan_start(&samples, &all, &light.to_direction()));
        LmState::new(&problem, problem.encode(&params, light), &all)
    };

    let mut best = match known_light {
        Some(light) => {
            let mut s = start_state(&light);
            levenberg_marquardt(&problem, &mut s, &all, opts.max_iterations);
            s
        }
        None => {
            let mut screened: Vec<LmState> = light_starts(&samples, opts)
                .par_iter()
                .map(|light| {
                    let mut s = start_state(light);
                    levenberg_marquardt(&problem, &mut s, &all, SCREEN_ITERATIONS.min(opts.max_iterations));
                    s
                })
                .collect();
            // stable sort keeps start order for equal costs
            screened.sort_by(|a, b| a.cost.total_cmp(&b.cost));
            screened.truncate(REFINED_STARTS);
            let refined: Vec<LmState> = screened
                .into_par_iter()
                .map(|mut s| {
                    let left = opts.max_iterations.saturating_sub(s.iterations);
                    levenberg_marquardt(&problem, &mut s, &all, left);
                    s
                })
                .collect();
            refined.into_iter().min_by(|a, b| a.cost.total_cmp(&b.cost)).expect("at least one start")
        }
    };

    let mut residual = best.cost;
    if let Some(q) = opts.robust_quantile {
        let mut tau = 0.0;
        for _ in 0..ROBUST_ROUNDS {
            let errors = problem.per_sample_errors(&best.u);
            tau = quantile(&errors, q);
            let inliers: Vec<usize> = (0..errors.len()).filter(|&i| errors[i] <= tau).collect();
            let mut s = LmState::new(&problem, best.u.clone(), &inliers);
            s.iterations = best.iterations;
            s.history = std::mem::take(&mut best.history);
            levenberg_marquardt(&problem, &mut s, &inliers, opts.max_iterations);
            best = s;
        }
        residual = problem.per_sample_errors(&best.u).iter().map(|e| e.min(tau)).sum();
    }

    let (params, light) = problem.decode(&best.u);
    Ok(FitResult {
        params,
        light,
        rmse: (residual / (3 * samples.len()) as f64).sqrt(),
        residual,
        iterations: best.iterations,
        converged: best.converged,
        history: best.history,
    })
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q.clamp(0.0, 1.0) * (v.len() - 1) as f64).round() as usize).min(v.len() - 1);
    v[idx]
}

/// Angle in radians between two directions given as spherical angles.
pub fn angular_distance(a: &SphericalAngles, b: &SphericalAngles) -> f64 {
    a.to_direction().dot(&b.to_direction()).clamp(-1.0, 1.0).acos()
}
