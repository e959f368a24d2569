//! Learned inversion: a residual convolutional network mapping a resolved
//! 60x120 reflectance map straight to the 7-vector `(k_d, k_s, r)`.
//!
//! Inputs are clamped to `[0, 1]` (holes stay black) and standardized per
//! channel with statistics of the training split, which travel with the
//! model. Training minimizes [`weighted_loss`] with Adam, coupled L2 weight
//! decay and a step learning-rate schedule.

pub mod net;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::augment::{augment_with_rng, sample_rng, AugmentConfig};
use crate::dataset::{load_sample, DatasetError, Manifest};
use crate::imaging::LinearImage;
use crate::Rgb;
pub use net::{Architecture, Network, StageSpec, OUTPUTS};

pub const MODEL_FORMAT_VERSION: u32 = 1;
/// Weight of the roughness term of the loss.
pub const ROUGHNESS_WEIGHT: f64 = 3.0;
const MIN_STD: f64 = 1e-6;
/// Samples per gradient shard. Shards are reduced in a fixed order, so the
/// result does not depend on the thread count.
const SHARD: usize = 8;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("no training samples")]
    EmptyManifest,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("input is {found_w}x{found_h}, model expects {expected_w}x{expected_h}")]
    Dimension { expected_w: usize, expected_h: usize, found_w: usize, found_h: usize },
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Loss of one prediction: `SSE(k_d) + (1 - cbrt(r)) SSE(k_s) + 3 SSE(r)`,
/// where `r` is the target roughness.
pub fn weighted_loss(pred: &[f64; 7], target: &[f64; 7]) -> f64 {
    let sq = |i: usize| (pred[i] - target[i]).powi(2);
    let kd: f64 = (0..3).map(sq).sum();
    let ks: f64 = (3..6).map(sq).sum();
    kd + specular_weight(target) * ks + ROUGHNESS_WEIGHT * sq(6)
}

pub fn weighted_loss_grad(pred: &[f64; 7], target: &[f64; 7]) -> [f64; 7] {
    let ws = specular_weight(target);
    std::array::from_fn(|i| {
        let w = match i {
            0..=2 => 1.0,
            3..=5 => ws,
            _ => ROUGHNESS_WEIGHT,
        };
        2.0 * w * (pred[i] - target[i])
    })
}

fn specular_weight(target: &[f64; 7]) -> f64 {
    1.0 - target[6].max(0.0).cbrt()
}

/// Per-channel standardization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }

    pub fn validate(&self) -> Result<(), RegressorError> {
        if self.std.iter().all(|s| *s > 0.0 && s.is_finite()) && self.mean.iter().all(|m| m.is_finite()) {
            Ok(())
        } else {
            Err(RegressorError::Config(format!("bad normalization {self:?}")))
        }
    }

    /// Statistics over every texel of every image, holes included.
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a LinearImage>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, [0.0f64; 3], [0.0f64; 3]);
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    sum[c] += p[c];
                    sq[c] += p[c] * p[c];
                }
            }
            n += img.pixels().len();
        }
        if n == 0 {
            return Self::identity();
        }
        let mean = sum.map(|s| s / n as f64);
        let std = std::array::from_fn(|c| (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(MIN_STD));
        Self { mean, std }
    }

    pub fn normalize(&self, img: &LinearImage) -> LinearImage {
        img.map(|p| Rgb::from_fn(|c, _| (p[c] - self.mean[c]) / self.std[c]))
    }

    pub fn denormalize(&self, img: &LinearImage) -> LinearImage {
        img.map(|p| Rgb::from_fn(|c, _| p[c] * self.std[c] + self.mean[c]))
    }

    /// Standardized channel-major network input.
    fn to_input(&self, img: &LinearImage) -> Vec<f32> {
        let n = img.pixels().len();
        let mut out = vec![0.0f32; 3 * n];
        for (i, p) in img.pixels().iter().enumerate() {
            for c in 0..3 {
                out[c * n + i] = ((p[c] - self.mean[c]) / self.std[c]) as f32;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by `lr_decay` every `lr_period` epochs.
    pub lr_decay: f64,
    pub lr_period: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of samples held out for validation.
    pub validation_fraction: f64,
    /// Computed from the training split when absent.
    pub normalization: Option<Normalization>,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl RegressorConfig {
    /// Large-scale schedule: wide network, 90 epochs of batch 256 at 3e-4,
    /// decayed by 10% every 20 epochs.
    pub fn paper() -> Self {
        Self {
            architecture: Architecture::wide(),
            epochs: 90,
            batch_size: 256,
            learning_rate: 3e-4,
            lr_decay: 0.9,
            lr_period: 20,
            weight_decay: 1e-4,
            seed: 0,
            validation_fraction: 0.2,
            normalization: None,
            augment: AugmentConfig::default(),
        }
    }

    /// Single-core schedule: compact network, small batches, higher rate.
    /// Corruptions are milder than the defaults because a small training set
    /// cannot absorb 95% masking.
    pub fn desk() -> Self {
        let augment = AugmentConfig {
            mask_fraction: 0.5,
            salt_pepper_fraction: 0.005,
            noise_amplitude: 0.05,
            ..AugmentConfig::default()
        };
        Self { architecture: Architecture::desk(), epochs: 30, batch_size: 32, learning_rate: 1e-3, augment, ..Self::paper() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), RegressorError> {
        let bad = |m: &str| Err(RegressorError::Config(m.to_owned()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("decay factor must lie in (0, 1]");
        }
        if self.lr_period == 0 {
            return bad("decay period must be at least 1 epoch");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be nonnegative");
        }
        if let Some(n) = &self.normalization {
            n.validate()?;
        }
        self.augment.validate()?;
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_period) as i32)
    }
}

/// One line of training progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean weighted loss over the augmented training samples of the epoch.
    pub train_loss: f64,
    /// Mean weighted loss over the unaugmented validation split.
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// Clamped maps with their labels, held in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub images: Vec<LinearImage>,
    pub labels: Vec<[f64; 7]>,
}

impl TrainingSet {
    pub fn push(&mut self, image: &LinearImage, label: [f64; 7]) {
        self.images.push(image.clamp_unit());
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn load(dir: &Path, manifest: &Manifest) -> Result<Self, RegressorError> {
        let loaded: Vec<Result<LinearImage, DatasetError>> =
            manifest.rows.par_iter().map(|row| Ok(load_sample(dir, row)?.image.clamp_unit())).collect();
        let mut set = Self::default();
        for (img, row) in loaded.into_iter().zip(&manifest.rows) {
            set.images.push(img?);
            set.labels.push(row.label);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub architecture: Architecture,
    pub normalization: Normalization,
    pub config: RegressorConfig,
    /// Loss of the untrained network before the first update.
    pub initial: EpochRecord,
    pub history: Vec<EpochRecord>,
    pub params: Vec<f32>,
    #[serde(skip)]
    network: Option<Network>,
}

impl PartialEq for TrainedModel {
    fn eq(&self, o: &Self) -> bool {
        self.format_version == o.format_version
            && self.architecture == o.architecture
            && self.normalization == o.normalization
            && self.config == o.config
            && self.initial == o.initial
            && self.history == o.history
            && self.params == o.params
    }
}

impl TrainedModel {
    fn network(&self) -> std::borrow::Cow<'_, Network> {
        match &self.network {
            Some(n) => std::borrow::Cow::Borrowed(n),
            None => std::borrow::Cow::Owned(Network::new(&self.architecture)),
        }
    }

    fn check_dims(&self, img: &LinearImage) -> Result<(), RegressorError> {
        let (w, h) = img.dims();
        let (ew, eh) = (self.architecture.input_width, self.architecture.input_height);
        if (w, h) != (ew, eh) {
            return Err(RegressorError::Dimension { expected_w: ew, expected_h: eh, found_w: w, found_h: h });
        }
        Ok(())
    }

    /// Parameters of one resolved map; black texels are holes.
    pub fn predict(&self, img: &LinearImage) -> Result<[f64; 7], RegressorError> {
        self.check_dims(img)?;
        let input = self.normalization.to_input(&img.clamp_unit());
        Ok(self.network().predict(&self.params, &input).map(f64::from))
    }

    pub fn predict_batch(&self, imgs: &[LinearImage]) -> Result<Vec<[f64; 7]>, RegressorError> {
        imgs.iter().try_for_each(|i| self.check_dims(i))?;
        let net = self.network();
        Ok(imgs
            .par_iter()
            .map(|img| net.predict(&self.params, &self.normalization.to_input(&img.clamp_unit())).map(f64::from))
            .collect())
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<(), RegressorError> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn from_reader<R: std::io::Read>(r: R) -> Result<Self, RegressorError> {
        let mut model: TrainedModel = serde_json::from_reader(r)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(RegressorError::Version(model.format_version));
        }
        let net = Network::new(&model.architecture);
        if net.param_count() != model.params.len() {
            return Err(RegressorError::Config(format!(
                "model has {} parameters, architecture needs {}",
                model.params.len(),
                net.param_count()
            )));
        }
        model.normalization.validate()?;
        model.network = Some(net);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), RegressorError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.to_writer(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RegressorError> {
        Self::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Deterministic 80/20-style split: shuffled indices, training part first.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B17));
    let n_val = ((n as f64 * validation_fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn mean_loss(net: &Network, params: &[f32], norm: &Normalization, set: &TrainingSet, idx: &[usize]) -> f64 {
    let total: f64 = idx
        .par_chunks(SHARD)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&i| {
                    let out = net.predict(params, &norm.to_input(&set.images[i])).map(f64::from);
                    weighted_loss(&out, &set.labels[i])
                })
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / idx.len().max(1) as f64
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let lr = lr as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains a fresh network. `progress` receives one record per epoch.
pub fn train(
    set: &TrainingSet,
    cfg: &RegressorConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainedModel, RegressorError> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(RegressorError::EmptyManifest);
    }
    let arch = &cfg.architecture;
    for img in &set.images {
        let (w, h) = img.dims();
        if (w, h) != (arch.input_width, arch.input_height) {
            return Err(RegressorError::Dimension {
                expected_w: arch.input_width,
                expected_h: arch.input_height,
                found_w: w,
                found_h: h,
            });
        }
    }
    let (train_idx, val_idx) = split_indices(set.len(), cfg.validation_fraction, cfg.seed);
    let norm = cfg.normalization.unwrap_or_else(|| Normalization::compute(train_idx.iter().map(|&i| &set.images[i])));

    let net = Network::new(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = net.init_params(&mut rng);
    let decay_mask: Vec<bool> = {
        let mut m = vec![false; net.param_count()];
        for s in net.slots().iter().filter(|s| s.decay) {
            m[s.offset..s.offset + s.len()].fill(true);
        }
        m
    };
    let mut adam = Adam { m: vec![0.0; params.len()], v: vec![0.0; params.len()], t: 0 };
    let val_loss = |p: &[f32]| (!val_idx.is_empty()).then(|| mean_loss(&net, p, &norm, set, &val_idx));
    let initial = EpochRecord {
        epoch: 0,
        train_loss: mean_loss(&net, &params, &norm, set, &train_idx),
        val_loss: val_loss(&params),
        lr: cfg.learning_rate,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let shards: Vec<(Vec<f32>, f64)> = batch
                .par_chunks(SHARD)
                .map(|chunk| {
                    let mut g = vec![0.0f32; params.len()];
                    let mut loss = 0.0;
                    for &i in chunk {
                        let mut srng = sample_rng(cfg.seed, epoch as u64, i as u64);
                        let img = augment_with_rng(&set.images[i], &cfg.augment, &mut srng)
                            .expect("augment config was validated");
                        let trace = net.forward(&params, &norm.to_input(&img));
                        let out = trace.output.map(f64::from);
                        loss += weighted_loss(&out, &set.labels[i]);
                        let d = weighted_loss_grad(&out, &set.labels[i]).map(|v| v as f32);
                        net.backward(&params, &trace, &d, &mut g);
                    }
                    (g, loss)
                })
                .collect();
            let mut grads = vec![0.0f32; params.len()];
            let mut batch_loss = 0.0;
            for (g, l) in &shards {
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b;
                }
                batch_loss += l;
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(RegressorError::NonFinite { epoch, batch: bi });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f32;
            let wd = cfg.weight_decay as f32;
            for ((g, p), decays) in grads.iter_mut().zip(&params).zip(&decay_mask) {
                *g *= scale;
                if *decays {
                    *g += wd * p;
                }
            }
            adam.step(&mut params, &grads, lr);
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / order.len() as f64,
            val_loss: val_loss(&params),
            lr,
        };
        log::info!("epoch {} train {:.5} val {:?}", record.epoch, record.train_loss, record.val_loss);
        progress(&record);
        history.push(record);
    }

    Ok(TrainedModel {
        format_version: MODEL_FORMAT_VERSION,
        architecture: arch.clone(),
        normalization: norm,
        config: RegressorConfig { normalization: Some(norm), ..cfg.clone() },
        initial,
        history,
        params,
        network: Some(net),
    })
}

/// [`train`] on a generated dataset directory, writing progress as JSON
/// lines to `progress`.
pub fn train_from_dir<W: Write>(
    dir: &Path,
    cfg: &RegressorConfig,
    mut progress: W,
) -> Result<TrainedModel, RegressorError> {
    let manifest = Manifest::load(dir)?;
    if manifest.rows.is_empty() {
        return Err(RegressorError::EmptyManifest);
    }
    let set = TrainingSet::load(dir, &manifest)?;
    let mut io_err = None;
    let model = train(&set, cfg, |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(progress, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    match io_err {
        Some(e) => Err(e.into()),
        None => Ok(model),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brdf::ReflectanceParams;
    use crate::dataset::{default_light_dir, material_random, viewpoint_grid};
    use crate::renderer::sphere_map;
    use crate::spherical::{MAP_HEIGHT, MAP_WIDTH};
    use proptest::prelude::*;
    use rand::Rng;

    fn vec7() -> impl Strategy<Value = [f64; 7]> {
        prop::array::uniform7(0.0f64..=1.0)
    }

    #[test]
    fn loss_examples() {
        let t = [0.6, 0.3, 0.2, 0.8, 0.8, 0.8, 0.15];
        assert_eq!(weighted_loss(&t, &t), 0.0);

        let mut rough = t;
        rough[6] = 1.0;
        let mut other = rough;
        other[3..6].copy_from_slice(&[0.0, 0.1, 0.9]);
        assert_eq!(weighted_loss(&other, &rough), 0.0);

        let delta = 0.125;
        let mut p = t;
        p[6] += delta;
        let d = p[6] - t[6];
        assert_eq!(weighted_loss(&p, &t), 3.0 * (d * d));
        assert!((weighted_loss(&p, &t) - 3.0 * delta * delta).abs() < 1e-15);
    }

    #[test]
    fn specular_weight_follows_cube_root() {
        for r in [0.0, 0.001, 0.125, 0.5, 0.9] {
            let mut t = [0.5; 7];
            t[6] = r;
            let mut p = t;
            p[3] += 0.1;
            let expected = (1.0 - f64::cbrt(r)) * 0.01;
            assert!((weighted_loss(&p, &t) - expected).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn loss_gradient_matches_finite_differences(p in vec7(), t in vec7()) {
            let g = weighted_loss_grad(&p, &t);
            for i in 0..7 {
                let h = 1e-6;
                let (mut up, mut dn) = (p, p);
                up[i] += h;
                dn[i] -= h;
                let fd = (weighted_loss(&up, &t) - weighted_loss(&dn, &t)) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(g[i].abs()).max(1e-3), "{i}: fd {fd} analytic {}", g[i]);
            }
        }

        #[test]
        fn rough_targets_ignore_specular_predictions(p in vec7(), mut t in vec7()) {
            t[6] = 1.0;
            let g = weighted_loss_grad(&p, &t);
            prop_assert!(g[3..6].iter().all(|v| *v == 0.0));
        }

        #[test]
        fn normalize_round_trips(v in prop::collection::vec(0.0f64..1.0, 12), m in prop::array::uniform3(-1.0f64..1.0), s in prop::array::uniform3(0.01f64..3.0)) {
            let img = LinearImage::from_pixels(2, 2, v.chunks(3).map(|c| Rgb::new(c[0], c[1], c[2])).collect());
            let n = Normalization { mean: m, std: s };
            let back = n.denormalize(&n.normalize(&img));
            for (a, b) in back.pixels().iter().zip(img.pixels()) {
                prop_assert!((a - b).abs().max() <= 1e-6);
            }
        }
    }

    #[test]
    fn normalize_mean_image_is_zero() {
        let n = Normalization { mean: [0.2, 0.4, 0.6], std: [0.5, 0.5, 2.0] };
        let img = LinearImage::from_pixels(3, 2, vec![Rgb::new(0.2, 0.4, 0.6); 6]);
        assert!(n.normalize(&img).pixels().iter().all(|p| *p == Rgb::zeros()));
    }

    fn corpus(materials: usize, seed: u64) -> TrainingSet {
        let cams = viewpoint_grid();
        let mut set = TrainingSet::default();
        for (m, p) in material_random(materials, seed).entries.iter().enumerate() {
            let cam = &cams[(m * 7) % cams.len()];
            set.push(&sphere_map(p, cam, &default_light_dir()).unwrap().resolve().image, p.to_array());
        }
        set
    }

    #[test]
    fn normalized_training_split_is_standard() {
        let set = corpus(40, 3);
        let (train_idx, _) = split_indices(set.len(), 0.2, 9);
        let norm = Normalization::compute(train_idx.iter().map(|&i| &set.images[i]));
        // recompute the statistics of the standardized images from scratch
        let (mut n, mut s, mut q) = (0.0, [0.0; 3], [0.0; 3]);
        for &i in &train_idx {
            for p in norm.normalize(&set.images[i]).pixels() {
                n += 1.0;
                for c in 0..3 {
                    s[c] += p[c];
                    q[c] += p[c] * p[c];
                }
            }
        }
        for c in 0..3 {
            let mean = s[c] / n;
            let std = (q[c] / n - mean * mean).sqrt();
            assert!(mean.abs() <= 1e-3 && (std - 1.0).abs() <= 1e-3, "channel {c}: {mean} {std}");
        }
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let (a, b) = split_indices(101, 0.2, 4);
        assert_eq!((a.len(), b.len()), (81, 20));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!(split_indices(101, 0.2, 4), (a, b));
    }

    #[test]
    fn config_validation() {
        assert!(RegressorConfig::desk().validate().is_ok());
        for bad in [
            RegressorConfig { batch_size: 0, ..RegressorConfig::desk() },
            RegressorConfig { learning_rate: 0.0, ..RegressorConfig::desk() },
            RegressorConfig { lr_decay: 1.5, ..RegressorConfig::desk() },
            RegressorConfig { normalization: Some(Normalization { mean: [0.0; 3], std: [1.0, 0.0, 1.0] }), ..RegressorConfig::desk() },
        ] {
            assert!(matches!(bad.validate(), Err(RegressorError::Config(_))));
        }
    }

    #[test]
    fn paper_schedule_constants() {
        let c = RegressorConfig::paper();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate, c.lr_decay, c.lr_period), (90, 256, 3e-4, 0.9, 20));
        assert_eq!(c.learning_rate_at(19), 3e-4);
        assert!((c.learning_rate_at(20) - 2.7e-4).abs() < 1e-15);
        assert!((c.learning_rate_at(89) - 3e-4 * 0.9f64.powi(4)).abs() < 1e-15);
    }

    fn tiny_config(epochs: usize) -> RegressorConfig {
        RegressorConfig { architecture: Architecture::tiny(), epochs, batch_size: 16, learning_rate: 3e-3, ..RegressorConfig::desk() }
    }

    #[test]
    fn smoke_training_reduces_loss() {
        let set = corpus(500, 11);
        let model = train(&set, &tiny_config(5), |_| {}).unwrap();
        assert_eq!(model.history.len(), 5);
        let last = model.history.last().unwrap();
        assert!(last.train_loss < model.initial.train_loss, "{} vs {}", last.train_loss, model.initial.train_loss);
    }

    #[test]
    fn training_is_deterministic_and_model_round_trips() {
        let set = corpus(24, 5);
        let mut lines = Vec::new();
        let a = train(&set, &tiny_config(2), |r| lines.push(*r)).unwrap();
        let b = train(&set, &tiny_config(2), |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(lines, a.history);

        let mut buf = Vec::new();
        a.to_writer(&mut buf).unwrap();
        let back = TrainedModel::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.predict(&set.images[0]).unwrap(), a.predict(&set.images[0]).unwrap());

        let text = String::from_utf8(buf).unwrap().replace("\"format_version\":1", "\"format_version\":99");
        assert!(matches!(TrainedModel::from_reader(text.as_bytes()), Err(RegressorError::Version(99))));
    }

    #[test]
    fn predictions_stay_in_the_open_unit_box_and_batch_matches() {
        let set = corpus(12, 8);
        let model = train(&set, &tiny_config(1), |_| {}).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut imgs = set.images.clone();
        imgs.push(LinearImage::from_pixels(MAP_WIDTH, MAP_HEIGHT, (0..MAP_WIDTH * MAP_HEIGHT).map(|_| Rgb::from_fn(|_, _| rng.gen_range(0.0..1e6))).collect()));
        imgs.push(LinearImage::new(MAP_WIDTH, MAP_HEIGHT));
        let batch = model.predict_batch(&imgs).unwrap();
        for (img, b) in imgs.iter().zip(&batch) {
            let single = model.predict(img).unwrap();
            assert!(single.iter().all(|v| *v > 0.0 && *v < 1.0));
            assert!(single.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-5));
        }
        assert!(matches!(model.predict(&LinearImage::new(10, 10)), Err(RegressorError::Dimension { .. })));
    }

    #[test]
    fn rejects_empty_sets_and_bad_dimensions() {
        assert!(matches!(train(&TrainingSet::default(), &tiny_config(1), |_| {}), Err(RegressorError::EmptyManifest)));
        let mut set = TrainingSet::default();
        set.push(&LinearImage::new(4, 4), ReflectanceParams::new([0.5; 3], [0.5; 3], 0.5).unwrap().to_array());
        assert!(matches!(train(&set, &tiny_config(1), |_| {}), Err(RegressorError::Dimension { .. })));
    }
}
