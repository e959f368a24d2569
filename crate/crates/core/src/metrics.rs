//! Image and parameter error measures.
//!
//! All image metrics treat inputs as linear RGB with a peak value of 1.
//! `nrmse` normalizes by the dynamic range of its *first* argument, the
//! reference. DSSIM is `(1 - SSIM) / 2` with SSIM computed on Rec. 709
//! luminance using an 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`,
//! `K2 = 0.03`, multiscale over five scales when the smaller image side is
//! at least 32 pixels, single-scale otherwise.

use thiserror::Error;

use crate::imaging::LinearImage;

/// PSNR reported for a pair with zero mean squared error.
pub const PSNR_CAP_DB: f64 = 100.0;

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const WINDOW_RADIUS: usize = 5;
const WINDOW_SIGMA: f64 = 1.5;
const MULTISCALE_MIN_SIDE: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("reference image is constant, its dynamic range is zero")]
    ConstantReference,
    #[error("no pixels selected")]
    Empty,
}

fn check_dims(a: &LinearImage, b: &LinearImage) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimensionMismatch(a.dims(), b.dims()));
    }
    if a.pixels().is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

fn mse_over(a: &LinearImage, b: &LinearImage, mask: Option<&[bool]>) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (pa, pb)) in a.pixels().iter().zip(b.pixels()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        sum += (pa - pb).norm_squared();
        n += 3;
    }
    if n == 0 {
        return Err(MetricError::Empty);
    }
    Ok(sum / n as f64)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).clamp(0.0, PSNR_CAP_DB)
}

pub fn mse(a: &LinearImage, b: &LinearImage) -> Result<f64, MetricError> {
    mse_over(a, b, None)
}

/// Peak signal-to-noise ratio in dB with unit peak, capped at 100 dB.
pub fn psnr(a: &LinearImage, b: &LinearImage) -> Result<f64, MetricError> {
    Ok(psnr_from_mse(mse_over(a, b, None)?))
}

/// PSNR restricted to pixels where `mask` is set.
pub fn psnr_masked(a: &LinearImage, b: &LinearImage, mask: &[bool]) -> Result<f64, MetricError> {
    assert_eq!(mask.len(), a.pixels().len(), "mask length must match pixel count");
    Ok(psnr_from_mse(mse_over(a, b, Some(mask))?))
}

/// Root-mean-square error over the reference's dynamic range.
pub fn nrmse(reference: &LinearImage, b: &LinearImage) -> Result<f64, MetricError> {
    let rmse = mse_over(reference, b, None)?.sqrt();
    let (lo, hi) = reference
        .pixels()
        .iter()
        .flat_map(|p| p.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(MetricError::ConstantReference);
    }
    Ok(rmse / range)
}

/// Single-channel float plane used by the SSIM computation.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn luminance(img: &LinearImage) -> Plane {
        let v = img.pixels().iter().map(|p| 0.2126 * p.x + 0.7152 * p.y + 0.0722 * p.z).collect();
        Plane { w: img.width(), h: img.height(), v }
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { w: self.w, h: self.h, v: self.v.iter().zip(&o.v).map(|(a, b)| f(*a, *b)).collect() }
    }

    fn downsample(&self) -> Plane {
        let (w, h) = ((self.w / 2).max(1), (self.h / 2).max(1));
        let mut v = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                let mut n = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (sx, sy) = (2 * x + dx, 2 * y + dy);
                        if sx < self.w && sy < self.h {
                            s += self.v[sy * self.w + sx];
                            n += 1.0;
                        }
                    }
                }
                v[y * w + x] = s / n;
            }
        }
        Plane { w, h, v }
    }

    /// Separable Gaussian filter with clamped borders.
    fn blur(&self, kernel: &[f64]) -> Plane {
        let r = kernel.len() / 2;
        let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        let mut tmp = vec![0.0; self.v.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for (k, wk) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + k as isize - r as isize, self.w);
                    s += wk * self.v[y * self.w + sx];
                }
                tmp[y * self.w + x] = s;
            }
        }
        let mut out = vec![0.0; self.v.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for (k, wk) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + k as isize - r as isize, self.h);
                    s += wk * tmp[sy * self.w + x];
                }
                out[y * self.w + x] = s;
            }
        }
        Plane { w: self.w, h: self.h, v: out }
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * WINDOW_RADIUS)
        .map(|i| {
            let d = i as f64 - WINDOW_RADIUS as f64;
            (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms(x: &Plane, y: &Plane, kernel: &[f64]) -> (f64, f64) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_x = x.blur(kernel);
    let mu_y = y.blur(kernel);
    let xx = x.zip(x, |a, b| a * b).blur(kernel);
    let yy = y.zip(y, |a, b| a * b).blur(kernel);
    let xy = x.zip(y, |a, b| a * b).blur(kernel);
    let n = x.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..x.v.len() {
        let (mx, my) = (mu_x.v[i], mu_y.v[i]);
        let sxx = xx.v[i] - mx * mx;
        let syy = yy.v[i] - my * my;
        let sxy = xy.v[i] - mx * my;
        let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let c = (2.0 * sxy + c2) / (sxx + syy + c2);
        ssim += l * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

/// Structural similarity of the luminance planes.
pub fn ssim(a: &LinearImage, b: &LinearImage) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let kernel = gaussian_kernel();
    let mut x = Plane::luminance(a);
    let mut y = Plane::luminance(b);
    if a.width().min(a.height()) < MULTISCALE_MIN_SIDE {
        return Ok(ssim_terms(&x, &y, &kernel).0.clamp(-1.0, 1.0));
    }
    let mut value = 1.0;
    for (scale, w) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (s, cs) = ssim_terms(&x, &y, &kernel);
        let term = if scale + 1 == MS_SSIM_WEIGHTS.len() { s } else { cs };
        // negative correlations are clamped so fractional powers stay real
        value *= term.max(0.0).powf(*w);
        x = x.downsample();
        y = y.downsample();
    }
    Ok(value)
}

pub fn dssim(a: &LinearImage, b: &LinearImage) -> Result<f64, MetricError> {
    Ok(((1.0 - ssim(a, b)?) / 2.0).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ImagePairReport {
    pub psnr: f64,
    pub nrmse: f64,
    pub dssim: f64,
}

impl ImagePairReport {
    /// All three metrics with `reference` as the first argument.
    pub fn compute(reference: &LinearImage, test: &LinearImage) -> Result<Self, MetricError> {
        Ok(Self { psnr: psnr(reference, test)?, nrmse: nrmse(reference, test)?, dssim: dssim(reference, test)? })
    }

    /// Tab-separated report row `{pair id, psnr, nrmse, dssim}`.
    pub fn to_row(&self, pair_id: &str) -> String {
        format!("{pair_id}\t{:.6}\t{:.6}\t{:.6}", self.psnr, self.nrmse, self.dssim)
    }

    pub const HEADER: &'static str = "pair_id\tpsnr\tnrmse\tdssim";
}

/// Per-component absolute error between two 7-vectors plus its norms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ParamError {
    pub abs: [f64; 7],
    pub l2: f64,
    pub linf: f64,
}

pub fn param_error(pred: &[f64; 7], truth: &[f64; 7]) -> ParamError {
    let abs: [f64; 7] = std::array::from_fn(|i| (pred[i] - truth[i]).abs());
    let l2 = abs.iter().map(|e| e * e).sum::<f64>().sqrt();
    let linf = abs.iter().copied().fold(0.0, f64::max);
    ParamError { abs, l2, linf }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LinearImage {
        LinearImage::from_pixels(w, h, (0..w * h).map(|_| Rgb::new(rng.gen(), rng.gen(), rng.gen())).collect())
    }

    fn ramp(w: usize, h: usize) -> LinearImage {
        // spans exactly [0, 0.9] so an offset of 0.1 stays in range
        let n = (w * h - 1) as f64;
        LinearImage::from_pixels(w, h, (0..w * h).map(|i| Rgb::repeat(0.9 * i as f64 / n)).collect())
    }

    #[test]
    fn psnr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_image(&mut rng, 40, 30);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);

        let base = ramp(64, 48);
        let shifted = base.map(|p| p.add_scalar(0.1));
        let db = psnr(&base, &shifted).unwrap();
        assert!((db - 20.0).abs() < 1e-9, "{db}");

        let b = random_image(&mut rng, 40, 30);
        let mut sq = 0.0;
        for (pa, pb) in a.pixels().iter().zip(b.pixels()) {
            for c in 0..3 {
                sq += (pa[c] - pb[c]).powi(2);
            }
        }
        let expect = 10.0 * (1.0 / (sq / (40.0 * 30.0 * 3.0))).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(matches!(psnr(&a, &LinearImage::new(3, 3)), Err(MetricError::DimensionMismatch(..))));
    }

    #[test]
    fn masked_psnr_ignores_unmasked_pixels() {
        let a = LinearImage::from_pixels(2, 1, vec![Rgb::repeat(0.5), Rgb::repeat(0.5)]);
        let b = LinearImage::from_pixels(2, 1, vec![Rgb::repeat(0.6), Rgb::repeat(0.0)]);
        let db = psnr_masked(&a, &b, &[true, false]).unwrap();
        assert!((db - 20.0).abs() < 1e-9);
        assert_eq!(psnr_masked(&a, &b, &[false, false]), Err(MetricError::Empty));
    }

    #[test]
    fn nrmse_examples() {
        let full = LinearImage::from_pixels(
            50,
            2,
            (0..100).map(|i| Rgb::repeat(if i == 0 { 0.0 } else if i == 99 { 1.0 } else { 0.5 })).collect(),
        );
        assert_eq!(nrmse(&full, &full).unwrap(), 0.0);
        let off = full.map(|p| p.add_scalar(0.05));
        assert!((nrmse(&full, &off).unwrap() - 0.05).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a = random_image(&mut rng, 20, 10);
        let b = random_image(&mut rng, 20, 10);
        let vals: Vec<f64> = a.pixels().iter().flat_map(|p| p.iter().copied()).collect();
        let range = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        let rmse = (a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / 600.0).sqrt();
        assert!((nrmse(&a, &b).unwrap() - rmse / range).abs() < 1e-12);
        // the first argument is the reference
        let scaled = a.map(|p| p * 0.5);
        assert!((nrmse(&scaled, &a).unwrap() - 2.0 * nrmse(&a, &scaled).unwrap()).abs() < 1e-12);

        let flat = LinearImage::from_pixels(2, 2, vec![Rgb::repeat(0.3); 4]);
        assert_eq!(nrmse(&flat, &LinearImage::new(2, 2)).unwrap_err(), MetricError::ConstantReference);
    }

    #[test]
    fn dssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = random_image(&mut rng, 64, 48);
        assert!(dssim(&a, &a).unwrap().abs() < 1e-12);

        let checker = LinearImage::from_pixels(
            64,
            64,
            (0..64 * 64).map(|i| Rgb::repeat(if ((i % 64) / 4 + (i / 64) / 4) % 2 == 0 { 1.0 } else { 0.0 })).collect(),
        );
        let inverted = checker.map(|p| Rgb::repeat(1.0) - p);
        assert!(dssim(&checker, &inverted).unwrap() > 0.3);

        let b = random_image(&mut rng, 64, 48);
        assert!((dssim(&a, &b).unwrap() - dssim(&b, &a).unwrap()).abs() < 1e-9);
        let small_a = random_image(&mut rng, 20, 12);
        let small_b = random_image(&mut rng, 20, 12);
        let v = dssim(&small_a, &small_b).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert!((v - dssim(&small_b, &small_a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn param_error_examples() {
        let t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        let e = param_error(&t, &t);
        assert_eq!((e.l2, e.linf), (0.0, 0.0));
        let mut p = t;
        p[6] += 0.2;
        assert!((param_error(&p, &t).linf - 0.2).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let a: [f64; 7] = std::array::from_fn(|_| rng.gen());
        let b: [f64; 7] = std::array::from_fn(|_| rng.gen());
        let e = param_error(&a, &b);
        let l2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let linf = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!((e.l2 - l2).abs() < 1e-15 && e.linf == linf);
    }

    #[test]
    fn report_row_format() {
        let r = ImagePairReport { psnr: 31.5, nrmse: 0.0125, dssim: 0.004 };
        assert_eq!(r.to_row("view_00"), "view_00\t31.500000\t0.012500\t0.004000");
    }
}
