//! Stochastic two-view augmentation and the epoch/minibatch plan.
//!
//! Image chain (channel-planar 3 x 32 x 32 rows, fixed order): random
//! resized crop -> horizontal flip -> color jitter -> grayscale. Synthetic
//! chain: style-block resample through the dataset's mixing matrix, then
//! additive isotropic noise. Each example's transform draws come from a
//! generator seeded by (epoch, example index), so batch assembly order and
//! parallelism cannot change the views.
//!
//! Image pixel arithmetic runs at f64 internally regardless of the scalar
//! parameter; values convert at the chain boundary.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datasets::{unmix, LabeledDataset, Provenance, CIFAR_DIM};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, permutation, rng_from};
use crate::scalar::Real;
use crate::tensor::Tensor;

const CHANNELS: usize = 3;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const CROP_ATTEMPTS: usize = 10;
const ASPECT_RANGE: (f64, f64) = (0.75, 4.0 / 3.0);

/// Per-transform enable flags and parameters. Image and synthetic fields
/// coexist; the dataset's provenance decides which chain runs.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugConfig<S: Real = f64> {
    pub crop_enabled: bool,
    /// Crop area as a fraction of the full image, (lo, hi) within (0, 1].
    pub crop_scale: (S, S),
    pub flip_enabled: bool,
    pub flip_prob: S,
    pub jitter_enabled: bool,
    pub jitter_prob: S,
    pub brightness: S,
    pub contrast: S,
    pub saturation: S,
    /// Hue shift half-range as a fraction of the full hue circle, in [0, 0.5].
    pub hue: S,
    pub grayscale_enabled: bool,
    pub grayscale_prob: S,
    /// Synthetic: redraw the style block through the mixing matrix.
    pub style_resample: bool,
    /// Synthetic: sigma of additive isotropic noise (0 disables).
    pub noise_sigma: S,
}

impl<S: Real> Default for AugConfig<S> {
    fn default() -> Self {
        AugConfig {
            crop_enabled: true,
            crop_scale: (S::of(0.2), S::of(1.0)),
            flip_enabled: true,
            flip_prob: S::of(0.5),
            jitter_enabled: true,
            jitter_prob: S::of(0.8),
            brightness: S::of(0.4),
            contrast: S::of(0.4),
            saturation: S::of(0.4),
            hue: S::of(0.1),
            grayscale_enabled: true,
            grayscale_prob: S::of(0.2),
            style_resample: true,
            noise_sigma: S::of(0.1),
        }
    }
}

impl<S: Real> AugConfig<S> {
    /// Everything disabled: views equal their source example.
    pub fn identity() -> Self {
        AugConfig {
            crop_enabled: false,
            flip_enabled: false,
            jitter_enabled: false,
            grayscale_enabled: false,
            style_resample: false,
            noise_sigma: S::zero(),
            ..AugConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: S| -> Result<()> {
            if v < S::zero() || v > S::one() || !v.is_finite() {
                return Err(Error::InvalidArg(format!("{name} must be in [0, 1], got {v}")));
            }
            Ok(())
        };
        unit("flip_prob", self.flip_prob)?;
        unit("jitter_prob", self.jitter_prob)?;
        unit("grayscale_prob", self.grayscale_prob)?;
        let (lo, hi) = self.crop_scale;
        if !(lo > S::zero() && lo <= hi && hi <= S::one()) {
            return Err(Error::InvalidArg(format!(
                "crop_scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        for (name, v) in
            [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)]
        {
            if v < S::zero() || !v.is_finite() {
                return Err(Error::InvalidArg(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.hue < S::zero() || self.hue > S::of(0.5) {
            return Err(Error::InvalidArg(format!("hue must be in [0, 0.5], got {}", self.hue)));
        }
        if self.noise_sigma < S::zero() || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArg(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Which chain applies to a dataset's rows, with the synthetic generative
/// context borrowed from its provenance.
#[derive(Clone, Copy, Debug)]
pub enum ChainKind<'a, S: Real> {
    Image,
    Synthetic { mixing: &'a Tensor<S>, content_dim: usize, style_scale: S },
}

/// Resolves the augmentation chain for a dataset.
pub fn chain_kind<S: Real>(dataset: &LabeledDataset<S>) -> Result<ChainKind<'_, S>> {
    match dataset.provenance() {
        Provenance::Cifar10 => {
            if dataset.dim() != CIFAR_DIM {
                return Err(Error::ShapeMismatch(format!(
                    "image chain expects {CIFAR_DIM}-dim rows, got {}",
                    dataset.dim()
                )));
            }
            Ok(ChainKind::Image)
        }
        Provenance::Synthetic { config, mixing, .. } => Ok(ChainKind::Synthetic {
            mixing,
            content_dim: config.content_dim,
            style_scale: config.style_scale,
        }),
    }
}

/// Two independent draws of the transform chain applied to one example.
pub fn make_view_pair<S: Real, R: Rng>(
    example: &[S],
    kind: &ChainKind<'_, S>,
    config: &AugConfig<S>,
    rng: &mut R,
) -> Result<(Vec<S>, Vec<S>)> {
    let v1 = augment_once(example, kind, config, rng)?;
    let v2 = augment_once(example, kind, config, rng)?;
    Ok((v1, v2))
}

/// One draw of the transform chain.
pub fn augment_once<S: Real, R: Rng>(
    example: &[S],
    kind: &ChainKind<'_, S>,
    config: &AugConfig<S>,
    rng: &mut R,
) -> Result<Vec<S>> {
    config.validate()?;
    match kind {
        ChainKind::Image => {
            if example.len() != CIFAR_DIM {
                return Err(Error::ShapeMismatch(format!(
                    "image chain expects {CIFAR_DIM}-dim rows, got {}",
                    example.len()
                )));
            }
            let mut img: Vec<f64> = example.iter().map(|&v| v.as_f64()).collect();
            if config.crop_enabled {
                img = random_resized_crop(&img, config.crop_scale, rng);
            }
            if config.flip_enabled && rng.gen_bool(config.flip_prob.as_f64()) {
                img = hflip(&img);
            }
            if config.jitter_enabled && rng.gen_bool(config.jitter_prob.as_f64()) {
                color_jitter(&mut img, config, rng);
            }
            if config.grayscale_enabled && rng.gen_bool(config.grayscale_prob.as_f64()) {
                grayscale(&mut img);
            }
            Ok(img.into_iter().map(S::of).collect())
        }
        ChainKind::Synthetic { mixing, content_dim, style_scale } => {
            if example.len() != mixing.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "synthetic chain expects {}-dim rows, got {}",
                    mixing.rows(),
                    example.len()
                )));
            }
            let mut x: Vec<S> = example.to_vec();
            if config.style_resample {
                let mut latent = unmix(mixing, &x);
                for s in latent.iter_mut().skip(*content_dim) {
                    *s = *style_scale * S::of(rng.sample::<f64, _>(StandardNormal));
                }
                x = crate::datasets::mix(mixing, &latent);
            }
            if config.noise_sigma > S::zero() {
                for v in x.iter_mut() {
                    *v += config.noise_sigma * S::of(rng.sample::<f64, _>(StandardNormal));
                }
            }
            Ok(x)
        }
    }
}

// --- image transforms (f64 pixel domain, channel-planar layout) ---

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Crop a random rectangle (area fraction from `scale`, aspect log-uniform
/// in [3/4, 4/3], up to 10 attempts, whole image as fallback) and resize it
/// back to 32 x 32 bilinearly.
fn random_resized_crop<S: Real, R: Rng>(img: &[f64], scale: (S, S), rng: &mut R) -> Vec<f64> {
    let (lo, hi) = (scale.0.as_f64(), scale.1.as_f64());
    let full_area = PLANE as f64;
    for _ in 0..CROP_ATTEMPTS {
        let frac = if lo < hi { rng.gen_range(lo..hi) } else { lo };
        let target_area = frac * full_area;
        let aspect = rng.gen_range(ASPECT_RANGE.0.ln()..ASPECT_RANGE.1.ln()).exp();
        let cw = (target_area * aspect).sqrt().round() as usize;
        let ch = (target_area / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= SIDE && ch <= SIDE {
            let x0 = rng.gen_range(0..=(SIDE - cw));
            let y0 = rng.gen_range(0..=(SIDE - ch));
            return crop_resize(img, y0, x0, ch, cw);
        }
    }
    crop_resize(img, 0, 0, SIDE, SIDE)
}

/// Bilinear resize of the (y0, x0, ch, cw) rectangle to the full 32 x 32.
fn crop_resize(img: &[f64], y0: usize, x0: usize, ch: usize, cw: usize) -> Vec<f64> {
    let mut out = vec![0.0; CIFAR_DIM];
    let mut xs = Vec::with_capacity(SIDE);
    for ox in 0..SIDE {
        let sx = ((ox as f64 + 0.5) * cw as f64 / SIDE as f64 - 0.5).clamp(0.0, (cw - 1) as f64);
        let xl = sx.floor() as usize;
        let xh = (xl + 1).min(cw - 1);
        xs.push((xl, xh, sx - xl as f64));
    }
    for c in 0..CHANNELS {
        let plane = c * PLANE;
        for oy in 0..SIDE {
            let sy =
                ((oy as f64 + 0.5) * ch as f64 / SIDE as f64 - 0.5).clamp(0.0, (ch - 1) as f64);
            let yl = sy.floor() as usize;
            let yh = (yl + 1).min(ch - 1);
            let fy = sy - yl as f64;
            let row_lo = plane + (y0 + yl) * SIDE + x0;
            let row_hi = plane + (y0 + yh) * SIDE + x0;
            for (ox, &(xl, xh, fx)) in xs.iter().enumerate() {
                let top = (1.0 - fx) * img[row_lo + xl] + fx * img[row_lo + xh];
                let bot = (1.0 - fx) * img[row_hi + xl] + fx * img[row_hi + xh];
                out[plane + oy * SIDE + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

fn hflip(img: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; CIFAR_DIM];
    for c in 0..CHANNELS {
        let plane = c * PLANE;
        for y in 0..SIDE {
            for x in 0..SIDE {
                out[plane + y * SIDE + x] = img[plane + y * SIDE + (SIDE - 1 - x)];
            }
        }
    }
    out
}

/// Brightness -> contrast -> saturation -> hue, each clamped to [0, 1].
/// Factor draws are skipped for zero strengths so disabled sub-transforms
/// leave the rng stream untouched.
fn color_jitter<S: Real, R: Rng>(img: &mut [f64], config: &AugConfig<S>, rng: &mut R) {
    let b = config.brightness.as_f64();
    if b > 0.0 {
        let f = rng.gen_range((1.0 - b).max(0.0)..1.0 + b);
        for v in img.iter_mut() {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    }
    let c = config.contrast.as_f64();
    if c > 0.0 {
        let f = rng.gen_range((1.0 - c).max(0.0)..1.0 + c);
        let mean: f64 =
            (0..PLANE).map(|i| luma(img[i], img[PLANE + i], img[2 * PLANE + i])).sum::<f64>()
                / PLANE as f64;
        for v in img.iter_mut() {
            *v = (mean + (*v - mean) * f).clamp(0.0, 1.0);
        }
    }
    let s = config.saturation.as_f64();
    if s > 0.0 {
        let f = rng.gen_range((1.0 - s).max(0.0)..1.0 + s);
        for i in 0..PLANE {
            let l = luma(img[i], img[PLANE + i], img[2 * PLANE + i]);
            for ch in 0..CHANNELS {
                let v = &mut img[ch * PLANE + i];
                *v = (l + (*v - l) * f).clamp(0.0, 1.0);
            }
        }
    }
    let hs = config.hue.as_f64();
    if hs > 0.0 {
        let shift = rng.gen_range(-hs..hs);
        for i in 0..PLANE {
            let (h, sat, val) = rgb_to_hsv(img[i], img[PLANE + i], img[2 * PLANE + i]);
            let (r, g, b2) = hsv_to_rgb((h + shift).rem_euclid(1.0), sat, val);
            img[i] = r.clamp(0.0, 1.0);
            img[PLANE + i] = g.clamp(0.0, 1.0);
            img[2 * PLANE + i] = b2.clamp(0.0, 1.0);
        }
    }
}

fn grayscale(img: &mut [f64]) {
    for i in 0..PLANE {
        let l = luma(img[i], img[PLANE + i], img[2 * PLANE + i]);
        img[i] = l;
        img[PLANE + i] = l;
        img[2 * PLANE + i] = l;
    }
}

/// RGB in [0,1] to (hue in [0,1), saturation, value).
fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let v = max;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let sector = (h6.floor() as usize) % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

// --- epoch and batch plan ---

/// A batch of paired views; `view1[i]` and `view2[i]` come from
/// `source_indices[i]` in the originating dataset.
#[derive(Clone, Debug)]
pub struct ViewBatch<S: Real = f64> {
    pub view1: Tensor<S>,
    pub view2: Tensor<S>,
    pub source_indices: Vec<usize>,
    /// Epoch seed the per-example generators derive from; with
    /// `source_indices` it reproduces every draw in the batch.
    pub rng_seed: u64,
}

/// Seeded epoch/minibatch plan over a dataset.
pub struct BatchPlan<'a, S: Real = f64> {
    dataset: &'a LabeledDataset<S>,
    aug: AugConfig<S>,
    batch: usize,
    seed: u64,
}

/// Validates sizes and builds a plan; `plan.epoch(e)` streams that epoch's
/// batches as a seeded permutation cut into `batch`-sized pieces, dropping a
/// final piece smaller than 2 (a single example has no negatives).
pub fn minibatches<'a, S: Real>(
    dataset: &'a LabeledDataset<S>,
    batch: usize,
    seed: u64,
    aug: &AugConfig<S>,
) -> Result<BatchPlan<'a, S>> {
    aug.validate()?;
    chain_kind(dataset)?;
    if batch < 2 {
        return Err(Error::InvalidArg(format!(
            "batch size must be >= 2: the InfoNCE negative set is empty otherwise, got {batch}"
        )));
    }
    if batch > dataset.n() {
        return Err(Error::InvalidArg(format!(
            "batch size {batch} exceeds dataset size {}",
            dataset.n()
        )));
    }
    Ok(BatchPlan { dataset, aug: aug.clone(), batch, seed })
}

impl<'a, S: Real> BatchPlan<'a, S> {
    pub fn epoch(&self, epoch: u64) -> EpochBatches<'a, '_, S> {
        let epoch_seed = derive_seed(self.seed, &[epoch]);
        EpochBatches {
            plan: self,
            order: permutation(self.dataset.n(), epoch_seed),
            epoch_seed,
            cursor: 0,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Batches yielded per epoch after the short-batch drop rule.
    pub fn batches_per_epoch(&self) -> usize {
        let n = self.dataset.n();
        n / self.batch + usize::from(n % self.batch >= 2)
    }

    /// Per-example generator for (this plan's epoch, source index).
    fn example_rng(&self, epoch_seed: u64, index: usize) -> ChaCha8Rng {
        rng_from(derive_seed(epoch_seed, &[index as u64]))
    }
}

/// Iterator over one epoch's [`ViewBatch`]es.
pub struct EpochBatches<'a, 'p, S: Real> {
    plan: &'p BatchPlan<'a, S>,
    order: Vec<usize>,
    epoch_seed: u64,
    cursor: usize,
}

impl<S: Real> Iterator for EpochBatches<'_, '_, S> {
    type Item = Result<ViewBatch<S>>;

    fn next(&mut self) -> Option<Self::Item> {
        let remaining = self.order.len() - self.cursor;
        if remaining < 2 {
            return None;
        }
        let take = remaining.min(self.plan.batch);
        let indices = &self.order[self.cursor..self.cursor + take];
        self.cursor += take;

        let kind = match chain_kind(self.plan.dataset) {
            Ok(k) => k,
            Err(e) => return Some(Err(e)),
        };
        let p = self.plan.dataset.dim();
        let mut v1 = Vec::with_capacity(take * p);
        let mut v2 = Vec::with_capacity(take * p);
        for &idx in indices {
            let mut rng = self.plan.example_rng(self.epoch_seed, idx);
            match make_view_pair(self.plan.dataset.example(idx), &kind, &self.plan.aug, &mut rng) {
                Ok((a, b)) => {
                    v1.extend(a);
                    v2.extend(b);
                }
                Err(e) => return Some(Err(e)),
            }
        }
        let build = || -> Result<ViewBatch<S>> {
            Ok(ViewBatch {
                view1: Tensor::new(take, p, v1)?,
                view2: Tensor::new(take, p, v2)?,
                source_indices: indices.to_vec(),
                rng_seed: self.epoch_seed,
            })
        };
        Some(build())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, SynthConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn synth_dataset(n_per_class: usize, style_scale: f64) -> LabeledDataset<f64> {
        generate_synthetic(&SynthConfig {
            content_dim: 3,
            style_dim: 5,
            class_count: 2,
            samples_per_class: n_per_class,
            content_separation: 4.0,
            style_scale,
            content_noise: 0.2,
            seed: 21,
        })
        .unwrap()
    }

    fn image_row(seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..CIFAR_DIM).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    fn image_only(f: impl FnOnce(&mut AugConfig<f64>)) -> AugConfig<f64> {
        let mut cfg = AugConfig::identity();
        f(&mut cfg);
        cfg
    }

    #[test]
    fn identity_chain_returns_the_example() {
        let img = image_row(1);
        let mut rng = rng_from(2);
        let (a, b) =
            make_view_pair(&img, &ChainKind::Image, &AugConfig::identity(), &mut rng).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);

        let ds = synth_dataset(3, 1.0);
        let kind = chain_kind(&ds).unwrap();
        let (a, b) =
            make_view_pair(ds.example(0), &kind, &AugConfig::identity(), &mut rng).unwrap();
        assert_eq!(a, ds.example(0));
        assert_eq!(b, ds.example(0));
    }

    #[test]
    fn full_scale_crop_is_the_identity() {
        let img = image_row(3);
        let cfg = image_only(|c| {
            c.crop_enabled = true;
            c.crop_scale = (1.0, 1.0);
        });
        let mut rng = rng_from(4);
        for _ in 0..5 {
            let v = augment_once(&img, &ChainKind::Image, &cfg, &mut rng).unwrap();
            assert_eq!(v, img);
        }
    }

    #[test]
    fn forced_flip_mirrors_columns() {
        let img = image_row(5);
        let cfg = image_only(|c| {
            c.flip_enabled = true;
            c.flip_prob = 1.0;
        });
        let mut rng = rng_from(6);
        let v = augment_once(&img, &ChainKind::Image, &cfg, &mut rng).unwrap();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(v[c * 1024 + y * 32 + x], img[c * 1024 + y * 32 + (31 - x)]);
                }
            }
        }
    }

    #[test]
    fn forced_grayscale_matches_luma_oracle() {
        let img = image_row(7);
        let cfg = image_only(|c| {
            c.grayscale_enabled = true;
            c.grayscale_prob = 1.0;
        });
        let mut rng = rng_from(8);
        let v = augment_once(&img, &ChainKind::Image, &cfg, &mut rng).unwrap();
        for i in 0..1024 {
            let expected = 0.299 * img[i] + 0.587 * img[1024 + i] + 0.114 * img[2048 + i];
            for c in 0..3 {
                assert!((v[c * 1024 + i] - expected).abs() < 1e-12, "pixel {i} channel {c}");
            }
        }
    }

    #[test]
    fn brightness_only_jitter_scales_a_constant_image() {
        let img = vec![0.5; CIFAR_DIM];
        let cfg = image_only(|c| {
            c.jitter_enabled = true;
            c.jitter_prob = 1.0;
            c.brightness = 0.4;
            c.contrast = 0.0;
            c.saturation = 0.0;
            c.hue = 0.0;
        });
        let mut rng = rng_from(9);
        let v = augment_once(&img, &ChainKind::Image, &cfg, &mut rng).unwrap();
        let first = v[0];
        assert!(v.iter().all(|&x| (x - first).abs() < 1e-12));
        assert!((0.3..=0.7).contains(&first), "{first}");
    }

    #[test]
    fn hue_shift_leaves_gray_pixels_fixed() {
        let mut img = vec![0.0; CIFAR_DIM];
        for i in 0..1024 {
            let g = (i as f64) / 1024.0;
            img[i] = g;
            img[1024 + i] = g;
            img[2048 + i] = g;
        }
        let cfg = image_only(|c| {
            c.jitter_enabled = true;
            c.jitter_prob = 1.0;
            c.brightness = 0.0;
            c.contrast = 0.0;
            c.saturation = 0.0;
            c.hue = 0.1;
        });
        let mut rng = rng_from(10);
        let v = augment_once(&img, &ChainKind::Image, &cfg, &mut rng).unwrap();
        for i in 0..CIFAR_DIM {
            assert!((v[i] - img[i]).abs() < 1e-12, "index {i}");
        }
    }

    #[test]
    fn style_resample_preserves_content_coordinates() {
        let ds = synth_dataset(4, 2.0);
        let kind = chain_kind(&ds).unwrap();
        let mixing = match ds.provenance() {
            Provenance::Synthetic { mixing, .. } => mixing,
            _ => unreachable!(),
        };
        let mut cfg = AugConfig::identity();
        cfg.style_resample = true;
        let mut rng = rng_from(11);
        for i in 0..ds.n() {
            let (a, b) = make_view_pair(ds.example(i), &kind, &cfg, &mut rng).unwrap();
            let ua = unmix(mixing, &a);
            let ub = unmix(mixing, &b);
            let u0 = unmix(mixing, ds.example(i));
            for j in 0..3 {
                assert!((ua[j] - ub[j]).abs() < 1e-12, "example {i} content {j}");
                assert!((ua[j] - u0[j]).abs() < 1e-12, "example {i} content {j} vs source");
            }
            // style blocks of the two views genuinely differ
            let style_gap: f64 = (3..8).map(|j| (ua[j] - ub[j]).abs()).sum();
            assert!(style_gap > 1e-6, "example {i}");
        }
    }

    #[test]
    fn additive_noise_stays_within_six_sigma_and_changes_the_row() {
        let ds = synth_dataset(4, 1.0);
        let kind = chain_kind(&ds).unwrap();
        let mut cfg = AugConfig::identity();
        cfg.noise_sigma = 0.01;
        let mut rng = rng_from(12);
        let v = augment_once(ds.example(0), &kind, &cfg, &mut rng).unwrap();
        let mut max_dev: f64 = 0.0;
        for (a, b) in v.iter().zip(ds.example(0)) {
            max_dev = max_dev.max((a - b).abs());
        }
        assert!(max_dev > 0.0);
        assert!(max_dev <= 0.06, "{max_dev}");
    }

    #[test]
    fn partition_sizes_follow_the_drop_rule() {
        let sizes = |n_per_class: usize, b: usize| -> Vec<usize> {
            let ds = synth_dataset(n_per_class, 1.0);
            let plan = minibatches(&ds, b, 40, &AugConfig::identity()).unwrap();
            let got: Vec<usize> =
                plan.epoch(0).map(|r| r.unwrap().source_indices.len()).collect();
            assert_eq!(got.len(), plan.batches_per_epoch());
            got
        };
        assert_eq!(sizes(5, 4), vec![4, 4, 2]); // N = 10: short final batch kept
        assert_eq!(sizes(3, 4), vec![4, 2]); // N = 6
        assert_eq!(sizes(3, 5), vec![5]); // N = 6: final singleton dropped
    }

    #[test]
    fn undersized_dataset_and_batch_are_rejected() {
        let ds = synth_dataset(2, 1.0); // N = 4
        assert!(minibatches(&ds, 5, 1, &AugConfig::identity()).is_err());
        assert!(minibatches(&ds, 1, 1, &AugConfig::identity()).is_err());
        assert!(minibatches(&ds, 4, 1, &AugConfig::identity()).is_ok());
    }

    #[test]
    fn views_pair_with_their_source_rows() {
        let ds = synth_dataset(6, 1.0);
        let plan = minibatches(&ds, 4, 99, &AugConfig::identity()).unwrap();
        let mut seen = Vec::new();
        for batch in plan.epoch(3) {
            let batch = batch.unwrap();
            for (k, &idx) in batch.source_indices.iter().enumerate() {
                assert_eq!(batch.view1.row(k), ds.example(idx));
                assert_eq!(batch.view2.row(k), ds.example(idx));
                seen.push(idx);
            }
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 12); // all examples visited exactly once
    }

    #[test]
    fn epochs_are_deterministic_and_distinct() {
        let ds = synth_dataset(8, 2.0);
        let plan = minibatches(&ds, 4, 7, &AugConfig::default()).unwrap();
        let flat = |epoch: u64| -> (Vec<usize>, Vec<f64>) {
            let mut order = Vec::new();
            let mut pixels = Vec::new();
            for batch in plan.epoch(epoch) {
                let b = batch.unwrap();
                order.extend(b.source_indices.iter().copied());
                pixels.extend_from_slice(b.view1.data());
                pixels.extend_from_slice(b.view2.data());
            }
            (order, pixels)
        };
        let (o1, p1) = flat(0);
        let (o2, p2) = flat(0);
        assert_eq!(o1, o2);
        assert_eq!(p1, p2); // bitwise reproducible
        let (o3, _) = flat(1);
        assert_ne!(o1, o3);
    }

    #[test]
    fn batch_assembly_order_does_not_change_views() {
        // the same (epoch, index) generator yields the same views whether
        // produced through the plan or recomputed standalone
        let ds = synth_dataset(5, 2.0);
        let plan = minibatches(&ds, 4, 13, &AugConfig::default()).unwrap();
        let kind = chain_kind(&ds).unwrap();
        for batch in plan.epoch(2) {
            let b = batch.unwrap();
            for (k, &idx) in b.source_indices.iter().enumerate() {
                let mut rng = rng_from(derive_seed(b.rng_seed, &[idx as u64]));
                let (v1, v2) =
                    make_view_pair(ds.example(idx), &kind, &AugConfig::default(), &mut rng)
                        .unwrap();
                assert_eq!(b.view1.row(k), &v1[..]);
                assert_eq!(b.view2.row(k), &v2[..]);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let checks: Vec<Box<dyn Fn(&mut AugConfig<f64>)>> = vec![
            Box::new(|c| c.flip_prob = 1.5),
            Box::new(|c| c.jitter_prob = -0.1),
            Box::new(|c| c.grayscale_prob = 2.0),
            Box::new(|c| c.crop_scale = (0.0, 1.0)),
            Box::new(|c| c.crop_scale = (0.8, 0.2)),
            Box::new(|c| c.crop_scale = (0.2, 1.1)),
            Box::new(|c| c.brightness = -1.0),
            Box::new(|c| c.hue = 0.6),
            Box::new(|c| c.noise_sigma = -0.5),
        ];
        for mutate in checks {
            let mut cfg = AugConfig::default();
            mutate(&mut cfg);
            assert!(cfg.validate().is_err());
        }
        assert!(AugConfig::<f64>::default().validate().is_ok());
        assert!(AugConfig::<f64>::identity().validate().is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_image_chains_preserve_shape_and_range(
            seed in 0u64..1000,
            crop in any::<bool>(),
            flip in any::<bool>(),
            jitter in any::<bool>(),
            gray in any::<bool>(),
            lo in 0.05f64..0.95,
        ) {
            let img = image_row(seed);
            let mut cfg = AugConfig::<f64>::default();
            cfg.crop_enabled = crop;
            cfg.crop_scale = (lo, 1.0);
            cfg.flip_enabled = flip;
            cfg.jitter_enabled = jitter;
            cfg.grayscale_enabled = gray;
            let mut rng = rng_from(seed.wrapping_add(1));
            let (a, b) = make_view_pair(&img, &ChainKind::Image, &cfg, &mut rng).unwrap();
            prop_assert_eq!(a.len(), CIFAR_DIM);
            prop_assert_eq!(b.len(), CIFAR_DIM);
            for &v in a.iter().chain(b.iter()) {
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v), "pixel {}", v);
            }
        }

        #[test]
        fn random_synthetic_chains_preserve_shape(
            seed in 0u64..1000,
            resample in any::<bool>(),
            sigma in 0.0f64..0.5,
        ) {
            let ds = synth_dataset(3, 1.5);
            let kind = chain_kind(&ds).unwrap();
            let mut cfg = AugConfig::<f64>::identity();
            cfg.style_resample = resample;
            cfg.noise_sigma = sigma;
            let mut rng = rng_from(seed);
            let (a, b) = make_view_pair(ds.example(0), &kind, &cfg, &mut rng).unwrap();
            prop_assert_eq!(a.len(), ds.dim());
            prop_assert_eq!(b.len(), ds.dim());
            prop_assert!(a.iter().chain(b.iter()).all(|v| v.is_finite()));
        }
    }
}
