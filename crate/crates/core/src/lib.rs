//! Inverse reflectance from posed multi-view images.
//!
//! The crate has two halves. The first aggregates observed radiance of a
//! triangle mesh into per-triangle [`spherical::ReflectanceMap`]s using
//! ray-cast G-buffers. The second inverts each map into a 7-parameter
//! reflection model ([`brdf::ReflectanceParams`]: diffuse RGB, specular RGB
//! and roughness) either with a damped least-squares fit against the
//! forward model ([`fitter`]) or with a trained convolutional regressor
//! ([`regressor`]). The estimates relight the scene and are scored with the
//! image metrics in [`metrics`].

pub mod brdf;
pub mod dataset;
pub mod fitter;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod regressor;
pub mod renderer;
pub mod spherical;

/// World-space vector.
pub type Vec3 = nalgebra::Vector3<f64>;

/// Linear RGB triple.
pub type Rgb = nalgebra::Vector3<f64>;
