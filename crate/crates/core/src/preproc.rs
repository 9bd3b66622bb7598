//! Training and evaluation preprocessing.
//!
//! Training samples are `random_crop(augment(extract_roi(image)))`;
//! evaluation uses `tile_patches(extract_roi(image))` with no augmentation.
//! ROIs smaller than a patch are centred on a background canvas first.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fpad_autograd::Tensor;

use crate::error::{Error, Result};
use crate::image::{GrayImage, BACKGROUND};
use crate::rng::RngStream;
use crate::synthdata::{DatasetIndex, Label, Split};

/// Side length of every model input.
pub const PATCH: usize = 64;

pub const DEFAULT_BACKGROUND_THRESHOLD: f32 = 0.95;

/// A `PATCH x PATCH` sample normalised to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pixels: Vec<f32>,
}

pub fn normalize(x: f32) -> f32 {
    2.0 * x - 1.0
}

pub fn denormalize(v: f32) -> f32 {
    (v + 1.0) / 2.0
}

impl Patch {
    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != PATCH * PATCH {
            return Err(Error::ShapeMismatch(format!(
                "patch needs {} values, got {}",
                PATCH * PATCH,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParams(format!("patch value {v} outside [-1, 1]")));
        }
        Ok(Patch { pixels })
    }

    /// Normalise a `PATCH x PATCH` image.
    pub fn from_image(img: &GrayImage) -> Self {
        assert_eq!((img.height(), img.width()), (PATCH, PATCH), "patch size");
        Patch {
            pixels: img.pixels().iter().map(|&x| normalize(x)).collect(),
        }
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(PATCH, PATCH, |r, c| denormalize(self.get(r, c)))
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * PATCH + col]
    }
}

/// Stack patches into an `[n, 1, PATCH, PATCH]` tensor.
pub fn patches_to_tensor(patches: &[Patch]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(patches.len() * PATCH * PATCH);
    for p in patches {
        data.extend_from_slice(&p.pixels);
    }
    Tensor::new(vec![patches.len(), 1, PATCH, PATCH], data)
}

/// Inverse of [`patches_to_tensor`]; values are clamped into `[-1, 1]`.
pub fn tensor_to_patches(t: &Tensor<f32>) -> Vec<Patch> {
    assert_eq!(&t.shape()[1..], &[1, PATCH, PATCH], "patch tensor shape");
    t.data()
        .chunks_exact(PATCH * PATCH)
        .map(|c| Patch {
            pixels: c.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        })
        .collect()
}

/// Minimal bounding box of all pixels darker than `background_threshold`.
pub fn extract_roi(img: &GrayImage, background_threshold: f32) -> Result<GrayImage> {
    if !(background_threshold > 0.0 && background_threshold <= 1.0) {
        return Err(Error::InvalidParams(format!(
            "background threshold {background_threshold} outside (0, 1]"
        )));
    }
    let (mut top, mut bottom, mut left, mut right) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..img.height() {
        for (c, &p) in img.row(r).iter().enumerate() {
            if p < background_threshold {
                top = top.min(r);
                bottom = bottom.max(r);
                left = left.min(c);
                right = right.max(c);
            }
        }
    }
    if top == usize::MAX {
        return Err(Error::EmptyImage);
    }
    Ok(img.crop(top, left, bottom - top + 1, right - left + 1))
}

/// ROI padded with background up to at least one patch in each direction.
pub fn roi_for_patches(img: &GrayImage, background_threshold: f32) -> Result<GrayImage> {
    Ok(extract_roi(img, background_threshold)?.pad_to(PATCH, PATCH, BACKGROUND))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    /// Degrees, `(min, max)`.
    pub rotation_range_deg: (f64, f64),
    pub brightness_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            rotation_range_deg: (-20.0, 20.0),
            brightness_range: (0.75, 1.25),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.flip_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParams(format!("flip_probability {p} outside [0, 1]")));
        }
        for (name, (lo, hi)) in [
            ("rotation_range_deg", self.rotation_range_deg),
            ("brightness_range", self.brightness_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidParams(format!("{name} ({lo}, {hi}) is not a range")));
            }
        }
        if self.brightness_range.0 < 0.0 {
            return Err(Error::InvalidParams("brightness factors must be non-negative".into()));
        }
        Ok(())
    }
}

/// The random choices of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraws {
    pub flip: bool,
    pub angle_deg: f64,
    pub factor: f64,
}

impl AugmentDraws {
    pub const IDENTITY: AugmentDraws = AugmentDraws {
        flip: false,
        angle_deg: 0.0,
        factor: 1.0,
    };

    /// Draws flip, angle and factor, in that order.
    pub fn sample(cfg: &AugmentConfig, rng: &mut RngStream) -> Self {
        let flip = rng.bernoulli(cfg.flip_probability);
        let angle_deg = rng.uniform(cfg.rotation_range_deg.0, cfg.rotation_range_deg.1);
        let factor = rng.uniform(cfg.brightness_range.0, cfg.brightness_range.1);
        AugmentDraws {
            flip,
            angle_deg,
            factor,
        }
    }
}

/// Render the window `(top, left, height, width)` of the augmented image
/// without materialising the rest of it. Left-right mirror, then rotation
/// about the image centre with bilinear sampling and background fill, then a
/// clipped brightness multiply.
pub fn augment_window(
    img: &GrayImage,
    draws: &AugmentDraws,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> GrayImage {
    assert!(top + height <= img.height() && left + width <= img.width(), "window out of bounds");
    let (cy, cx) = ((img.height() as f64 - 1.0) / 2.0, (img.width() as f64 - 1.0) / 2.0);
    let (sin, cos) = draws.angle_deg.to_radians().sin_cos();
    let factor = draws.factor as f32;
    let last_col = img.width() as f64 - 1.0;
    GrayImage::from_fn(height, width, |r, c| {
        let (dy, dx) = ((top + r) as f64 - cy, (left + c) as f64 - cx);
        // inverse rotation into the mirrored frame
        let sy = cy + cos * dy - sin * dx;
        let mut sx = cx + sin * dy + cos * dx;
        if draws.flip {
            sx = last_col - sx;
        }
        img.sample_bilinear(sy, sx, BACKGROUND) * factor
    })
}

pub fn augment_with(img: &GrayImage, draws: &AugmentDraws) -> GrayImage {
    augment_window(img, draws, 0, 0, img.height(), img.width())
}

pub fn augment(img: &GrayImage, cfg: &AugmentConfig, rng: &mut RngStream) -> GrayImage {
    augment_with(img, &AugmentDraws::sample(cfg, rng))
}

fn check_patch_size(img: &GrayImage) -> Result<()> {
    if img.height() < PATCH || img.width() < PATCH {
        return Err(Error::TooSmall {
            height: img.height(),
            width: img.width(),
            min: PATCH,
        });
    }
    Ok(())
}

/// Row offset then column offset, each uniform over the valid positions.
fn draw_offset(height: usize, width: usize, rng: &mut RngStream) -> (usize, usize) {
    let top = rng.below(height - PATCH + 1);
    let left = rng.below(width - PATCH + 1);
    (top, left)
}

pub fn random_crop(img: &GrayImage, rng: &mut RngStream) -> Result<Patch> {
    check_patch_size(img)?;
    let (top, left) = draw_offset(img.height(), img.width(), rng);
    Ok(Patch::from_image(&img.crop(top, left, PATCH, PATCH)))
}

/// `random_crop(augment(img))` computing only the cropped window. Consumes
/// the same draws in the same order as the two-step form.
pub fn augment_and_crop(img: &GrayImage, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<Patch> {
    check_patch_size(img)?;
    let draws = AugmentDraws::sample(cfg, rng);
    let (top, left) = draw_offset(img.height(), img.width(), rng);
    Ok(Patch::from_image(&augment_window(img, &draws, top, left, PATCH, PATCH)))
}

/// Non-overlapping patches from the top-left corner, row-major; residual
/// borders are dropped.
pub fn tile_patches(img: &GrayImage) -> Result<Vec<Patch>> {
    check_patch_size(img)?;
    let (rows, cols) = (img.height() / PATCH, img.width() / PATCH);
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(Patch::from_image(&img.crop(i * PATCH, j * PATCH, PATCH, PATCH)));
        }
    }
    Ok(out)
}

/// The evaluation pipeline: ROI, padding, tiling.
pub fn eval_patches(img: &GrayImage, background_threshold: f32) -> Result<Vec<Patch>> {
    tile_patches(&roi_for_patches(img, background_threshold)?)
}

/// One image reduced to its evaluation patches.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub path: String,
    pub label: Label,
    pub split: Split,
    /// `[patches, 1, PATCH, PATCH]`.
    pub patches: Tensor<f32>,
}

/// Images decoded and tiled once, for repeated scoring.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    pub items: Vec<EvalItem>,
}

impl EvalSet {
    /// Every image of `split` whose label is in `labels`.
    pub fn load(index: &DatasetIndex, split: Split, labels: &[Label]) -> Result<Self> {
        let entries: Vec<_> = index
            .entries()
            .iter()
            .filter(|e| e.split == split && labels.contains(&e.label))
            .collect();
        let items = entries
            .par_iter()
            .map(|e| {
                let img = GrayImage::load_png(&index.absolute(e))?;
                EvalItem::new(e.path.clone(), e.label, e.split, &img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.items.iter().filter(|i| i.label == label).count()
    }
}

impl EvalItem {
    pub fn new(path: String, label: Label, split: Split, img: &GrayImage) -> Result<Self> {
        let patches = eval_patches(img, DEFAULT_BACKGROUND_THRESHOLD)?;
        Ok(EvalItem {
            path,
            label,
            split,
            patches: patches_to_tensor(&patches),
        })
    }
}

/// A batch of training patches and the index of the image each came from.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub patches: Vec<Patch>,
    pub sources: Vec<usize>,
}

impl PatchBatch {
    pub fn to_tensor(&self) -> Tensor<f32> {
        patches_to_tensor(&self.patches)
    }
}

/// Infinite, shuffled, augmented patch stream over the bona fide train
/// split. Each sample draws from its own substream keyed by its position in
/// the stream, so batches are reproducible and can be built in parallel.
pub struct TrainStream {
    images: Vec<GrayImage>,
    paths: Vec<String>,
    cfg: AugmentConfig,
    batch_size: usize,
    rng: RngStream,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    emitted: u64,
}

impl TrainStream {
    pub fn new(index: &DatasetIndex, cfg: AugmentConfig, batch_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if batch_size == 0 {
            return Err(Error::InvalidParams("batch_size must be positive".into()));
        }
        if index.select(Split::Train, Label::Pa).next().is_some() {
            return Err(Error::InvalidParams(
                "train split contains PA samples; one-class training uses bona fide only".into(),
            ));
        }
        let entries: Vec<_> = index.select(Split::Train, Label::BonaFide).collect();
        if entries.is_empty() {
            return Err(Error::InsufficientData("train split is empty".into()));
        }
        let images = entries
            .par_iter()
            .map(|e| GrayImage::load_png(&index.absolute(e)))
            .collect::<Result<Vec<_>>>()?;
        let paths = entries.iter().map(|e| e.path.clone()).collect();
        TrainStream::from_images(images, paths, cfg, batch_size, seed)
    }

    /// Stream over decoded images; each is reduced to its padded ROI once.
    pub fn from_images(
        images: Vec<GrayImage>,
        paths: Vec<String>,
        cfg: AugmentConfig,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() || batch_size == 0 {
            return Err(Error::InsufficientData("empty training stream".into()));
        }
        assert_eq!(images.len(), paths.len());
        let images = images
            .par_iter()
            .map(|img| roi_for_patches(img, DEFAULT_BACKGROUND_THRESHOLD))
            .collect::<Result<Vec<_>>>()?;
        let mut stream = TrainStream {
            order: Vec::new(),
            images,
            paths,
            cfg,
            batch_size,
            rng: RngStream::new(seed),
            cursor: 0,
            epoch: 0,
            emitted: 0,
        };
        stream.reshuffle();
        Ok(stream)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.images.len()).collect();
        let mut rng = self.rng.split_named("order").split(self.epoch);
        rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn path(&self, source: usize) -> &str {
        &self.paths[source]
    }

    /// Batches needed to visit each image once: `ceil(n / batch_size)`.
    pub fn batches_per_epoch(&self) -> usize {
        self.images.len().div_ceil(self.batch_size)
    }

    pub fn next_batch(&mut self) -> PatchBatch {
        let mut jobs = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            jobs.push((self.order[self.cursor], self.emitted));
            self.cursor += 1;
            self.emitted += 1;
        }
        let samples = self.rng.split_named("samples");
        let patches = jobs
            .par_iter()
            .map(|&(src, n)| {
                let mut rng = samples.split(n);
                augment_and_crop(&self.images[src], &self.cfg, &mut rng)
                    .expect("stream images are padded to patch size")
            })
            .collect();
        PatchBatch {
            patches,
            sources: jobs.iter().map(|j| j.0).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roi_of_a_known_block() {
        let img = GrayImage::from_fn(10, 10, |r, c| {
            if (2..=5).contains(&r) && (3..=6).contains(&c) {
                0.2
            } else {
                1.0
            }
        });
        let roi = extract_roi(&img, 0.95).unwrap();
        assert_eq!((roi.height(), roi.width()), (4, 4));
        assert!(roi.pixels().iter().all(|&p| p == 0.2));
    }

    #[test]
    fn white_image_has_no_roi() {
        let img = GrayImage::filled(8, 8, 1.0);
        assert!(matches!(extract_roi(&img, 0.95), Err(Error::EmptyImage)));
    }

    #[test]
    fn identity_draws_are_exact() {
        let img = GrayImage::from_fn(33, 47, |r, c| ((r * 31 + c * 17) % 97) as f32 / 96.0);
        assert_eq!(augment_with(&img, &AugmentDraws::IDENTITY), img);
    }

    #[test]
    fn brightness_scales_mid_gray() {
        let img = GrayImage::filled(9, 9, 0.5);
        let d = AugmentDraws {
            factor: 1.25,
            ..AugmentDraws::IDENTITY
        };
        assert!(augment_with(&img, &d).pixels().iter().all(|&p| p == 0.625));
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = GrayImage::from_fn(4, 5, |_, c| c as f32 / 4.0);
        let d = AugmentDraws {
            flip: true,
            ..AugmentDraws::IDENTITY
        };
        let out = augment_with(&img, &d);
        for r in 0..4 {
            for c in 0..5 {
                assert_eq!(out.get(r, c), img.get(r, 4 - c));
            }
        }
    }

    #[test]
    fn crop_of_exact_patch_is_the_normalised_image() {
        let img = GrayImage::from_fn(64, 64, |r, c| ((r + c) % 64) as f32 / 63.0);
        let p = random_crop(&img, &mut RngStream::new(1)).unwrap();
        assert_eq!(p, Patch::from_image(&img));
        let black = GrayImage::filled(64, 64, 0.0);
        let p = random_crop(&black, &mut RngStream::new(1)).unwrap();
        assert!(p.pixels().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn too_small_for_a_crop() {
        let img = GrayImage::filled(63, 100, 0.5);
        assert!(matches!(
            random_crop(&img, &mut RngStream::new(0)),
            Err(Error::TooSmall { height: 63, .. })
        ));
    }

    #[test]
    fn tile_count_and_order() {
        let img = GrayImage::from_fn(200, 150, |r, c| ((r * 3 + c) % 256) as f32 / 255.0);
        let tiles = tile_patches(&img).unwrap();
        assert_eq!(tiles.len(), 6);
        // second tile sits to the right of the first
        assert_eq!(tiles[1].get(0, 0), normalize(img.get(0, 64)));
        assert_eq!(tiles[2].get(5, 7), normalize(img.get(64 + 5, 7)));
    }
}
