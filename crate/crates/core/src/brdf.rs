//! Combined Lambertian + Torrance-Sparrow reflection model.
//!
//! The specular lobe uses the Trowbridge-Reitz (GGX) microfacet
//! distribution, separable Smith masking-shadowing and Schlick's Fresnel
//! approximation with a fixed dielectric `F0`. Spectral tint of the
//! highlight is carried entirely by `k_s`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Rgb, Vec3};

/// Normal-incidence reflectance used by the Schlick term.
pub const FRESNEL_F0: f64 = 0.04;

/// Lower bound on the distribution width, keeps `r -> 0` away from a delta lobe.
pub const MIN_ALPHA: f64 = 1e-3;

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BrdfError {
    #[error("reflectance parameter {name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("{0} is not a unit vector (length {1})")]
    NotUnit(&'static str, f64),
    #[error("half vector is undefined for opposite incoming and outgoing directions")]
    DegenerateHalfVector,
    #[error("geometry is not lit and visible (cos_i = {cos_i}, cos_o = {cos_o})")]
    NotLitAndVisible { cos_i: f64, cos_o: f64 },
}

/// The 7-vector material: diffuse albedo, specular scale and roughness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectanceParams {
    kd: [f64; 3],
    ks: [f64; 3],
    roughness: f64,
}

impl ReflectanceParams {
    pub fn new(kd: [f64; 3], ks: [f64; 3], roughness: f64) -> Result<Self, BrdfError> {
        const KD: [&str; 3] = ["kd_r", "kd_g", "kd_b"];
        const KS: [&str; 3] = ["ks_r", "ks_g", "ks_b"];
        for c in 0..3 {
            check_unit_interval(KD[c], kd[c])?;
            check_unit_interval(KS[c], ks[c])?;
        }
        check_unit_interval("roughness", roughness)?;
        Ok(Self { kd, ks, roughness })
    }

    /// Builds from `(kd_r, kd_g, kd_b, ks_r, ks_g, ks_b, roughness)`.
    pub fn from_array(v: [f64; 7]) -> Result<Self, BrdfError> {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6])
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, BrdfError> {
        let arr: [f64; 7] = v.try_into().map_err(|_| BrdfError::OutOfRange {
            name: "length",
            value: v.len() as f64,
        })?;
        Self::from_array(arr)
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.kd[0], self.kd[1], self.kd[2], self.ks[0], self.ks[1], self.ks[2], self.roughness,
        ]
    }

    pub fn kd(&self) -> Rgb {
        Rgb::from(self.kd)
    }

    pub fn ks(&self) -> Rgb {
        Rgb::from(self.ks)
    }

    pub fn roughness(&self) -> f64 {
        self.roughness
    }

    /// Distribution width used by D and G.
    pub fn alpha(&self) -> f64 {
        roughness_to_alpha(self.roughness)
    }
}

fn check_unit_interval(name: &'static str, value: f64) -> Result<(), BrdfError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(BrdfError::OutOfRange { name, value })
    }
}

pub fn roughness_to_alpha(r: f64) -> f64 {
    (r * r).max(MIN_ALPHA)
}

/// Normal plus incoming (toward light) and outgoing (toward viewer) directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadingGeometry {
    n: Vec3,
    wi: Vec3,
    wo: Vec3,
}

impl ShadingGeometry {
    pub fn new(n: Vec3, wi: Vec3, wo: Vec3) -> Result<Self, BrdfError> {
        for (name, v) in [("normal", n), ("omega_i", wi), ("omega_o", wo)] {
            let len = v.norm();
            if !len.is_finite() || (len - 1.0).abs() > UNIT_TOLERANCE {
                return Err(BrdfError::NotUnit(name, len));
            }
        }
        Ok(Self { n, wi, wo })
    }

    /// Skips the unit-length check; callers guarantee normalized inputs.
    pub(crate) fn new_unchecked(n: Vec3, wi: Vec3, wo: Vec3) -> Self {
        Self { n, wi, wo }
    }

    pub fn normal(&self) -> Vec3 {
        self.n
    }

    pub fn omega_i(&self) -> Vec3 {
        self.wi
    }

    pub fn omega_o(&self) -> Vec3 {
        self.wo
    }

    pub fn cos_theta_i(&self) -> f64 {
        self.n.dot(&self.wi)
    }

    pub fn cos_theta_o(&self) -> f64 {
        self.n.dot(&self.wo)
    }

    pub fn is_lit_and_visible(&self) -> bool {
        self.cos_theta_i() > 0.0 && self.cos_theta_o() > 0.0
    }

    pub fn half_vector(&self) -> Result<Vec3, BrdfError> {
        let h = self.wi + self.wo;
        let len = h.norm();
        if len < 1e-12 {
            return Err(BrdfError::DegenerateHalfVector);
        }
        Ok(h / len)
    }

    /// The same configuration with light and viewer exchanged.
    pub fn swapped(&self) -> Self {
        Self { n: self.n, wi: self.wo, wo: self.wi }
    }
}

pub fn eval_lambertian(params: &ReflectanceParams) -> Rgb {
    params.kd() / PI
}

/// Trowbridge-Reitz / GGX normal distribution evaluated at the half vector.
pub fn microfacet_d(geom: &ShadingGeometry, alpha: f64) -> Result<f64, BrdfError> {
    let h = geom.half_vector()?;
    Ok(ggx_d(geom.n.dot(&h), alpha))
}

#[inline]
pub(crate) fn ggx_d(n_dot_h: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let t = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (PI * t * t)
}

/// Smith-GGX masking for a single direction.
#[inline]
pub fn smith_g1(n_dot_w: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let c = n_dot_w;
    2.0 * c / (c + (a2 + (1.0 - a2) * c * c).sqrt())
}

#[inline]
pub fn schlick_fresnel(h_dot_o: f64) -> f64 {
    let m = (1.0 - h_dot_o).clamp(0.0, 1.0);
    let m2 = m * m;
    FRESNEL_F0 + (1.0 - FRESNEL_F0) * m2 * m2 * m
}

/// Scalar part of the Torrance-Sparrow lobe, `D G F / (4 cos_o cos_i)`.
/// Assumes a lit-and-visible geometry.
#[inline]
pub(crate) fn torrance_sparrow_scalar(
    alpha: f64,
    n_dot_h: f64,
    h_dot_o: f64,
    cos_i: f64,
    cos_o: f64,
) -> f64 {
    let d = ggx_d(n_dot_h, alpha);
    let g = smith_g1(cos_i, alpha) * smith_g1(cos_o, alpha);
    let f = schlick_fresnel(h_dot_o);
    d * g * f / (4.0 * cos_o * cos_i)
}

pub fn eval_torrance_sparrow(
    params: &ReflectanceParams,
    geom: &ShadingGeometry,
) -> Result<Rgb, BrdfError> {
    let cos_i = geom.cos_theta_i();
    let cos_o = geom.cos_theta_o();
    if cos_i <= 0.0 || cos_o <= 0.0 {
        return Err(BrdfError::NotLitAndVisible { cos_i, cos_o });
    }
    let h = geom.half_vector()?;
    let s = torrance_sparrow_scalar(params.alpha(), geom.n.dot(&h), h.dot(&geom.wo), cos_i, cos_o);
    Ok(params.ks() * s)
}

/// Outgoing radiance toward `omega_o` from a directional source of radiance `li`.
/// Shadowed or back-facing configurations return black.
pub fn shade(params: &ReflectanceParams, geom: &ShadingGeometry, li: Rgb) -> Rgb {
    let cos_i = geom.cos_theta_i();
    let cos_o = geom.cos_theta_o();
    if cos_i <= 0.0 || cos_o <= 0.0 {
        return Rgb::zeros();
    }
    let s = specular_at(params.alpha(), geom, cos_i, cos_o);
    let f = params.kd() / PI + params.ks() * s;
    f.component_mul(&li) * cos_i
}

/// Shading under unit white light, the configuration used for maps and renders.
#[inline]
pub fn shade_white(params: &ReflectanceParams, geom: &ShadingGeometry) -> Rgb {
    shade(params, geom, Rgb::new(1.0, 1.0, 1.0))
}

/// Coefficients `(a, b)` with `shade_white = a * k_d + b * k_s` per
/// channel, or `None` when the geometry is shadowed or back-facing.
#[inline]
pub(crate) fn shading_basis(alpha: f64, geom: &ShadingGeometry) -> Option<(f64, f64)> {
    let cos_i = geom.cos_theta_i();
    let cos_o = geom.cos_theta_o();
    if cos_i <= 0.0 || cos_o <= 0.0 {
        return None;
    }
    Some((cos_i / PI, specular_at(alpha, geom, cos_i, cos_o) * cos_i))
}

#[inline]
fn specular_at(alpha: f64, geom: &ShadingGeometry, cos_i: f64, cos_o: f64) -> f64 {
    let hsum = geom.wi + geom.wo;
    let len = hsum.norm();
    // lit-and-visible excludes wi = -wo
    let h = hsum / len;
    torrance_sparrow_scalar(alpha, geom.n.dot(&h), h.dot(&geom.wo), cos_i, cos_o)
}
