//! Generator checks: sample grids, latent interpolation and a diversity
//! score for spotting mode collapse.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fpad_autograd::Tensor;

use crate::error::{Error, Result};
use crate::gantrain::sample_latents;
use crate::image::GrayImage;
use crate::models::{NetKind, Network};
use crate::preproc::denormalize;
use crate::rng::RngStream;

/// Generated-to-real diversity ratio below which a generator is flagged.
pub const COLLAPSE_RATIO: f64 = 0.1;
/// Slack on the linear-path bound for consecutive interpolation frames.
pub const SMOOTHNESS_SLACK: f64 = 0.1;

const INFER_CHUNK: usize = 64;

/// Anything mapping latent batches `[n, d]` to image batches `[n, 1, h, w]`.
pub trait PatchGenerator {
    fn latent_dim(&self) -> usize;
    fn generate(&self, z: &Tensor<f32>) -> Tensor<f32>;
}

impl PatchGenerator for Network<f32> {
    fn latent_dim(&self) -> usize {
        assert_eq!(self.kind(), NetKind::Generator, "not a generator");
        self.spec().arch.latent_dim
    }

    fn generate(&self, z: &Tensor<f32>) -> Tensor<f32> {
        self.infer(z, INFER_CHUNK)
    }
}

fn sample_image(t: &Tensor<f32>, i: usize) -> GrayImage {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    let s = t.sample(i);
    GrayImage::from_fn(h, w, |r, c| denormalize(s[r * w + c]).clamp(0.0, 1.0))
}

/// Tiles of a batch laid out `cols` per row, mapped back to `[0, 1]`.
pub fn batch_grid(t: &Tensor<f32>, cols: usize) -> GrayImage {
    let tiles: Vec<GrayImage> = (0..t.batch()).map(|i| sample_image(t, i)).collect();
    GrayImage::grid(&tiles, cols.max(1), 1.0)
}

/// `n` generations from standard normal latents drawn from `seed`.
pub fn sample_patches(gen: &impl PatchGenerator, n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = RngStream::new(seed).split_named("latents");
    gen.generate(&sample_latents(n, gen.latent_dim(), &mut rng))
}

/// Near-square grid: `ceil(sqrt(n))` columns.
pub fn grid_columns(n: usize) -> usize {
    (n as f64).sqrt().ceil().max(1.0) as usize
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationTrace {
    pub z0: Vec<f32>,
    pub z1: Vec<f32>,
    pub steps: usize,
    #[serde(skip)]
    pub frames: Option<Tensor<f32>>,
    /// Pixel-space L2 distance between consecutive frames.
    pub distances: Vec<f64>,
    pub endpoint_distance: f64,
    pub bound: f64,
    pub smooth: bool,
}

/// Frames along `(1 - t) z0 + t z1`, `t = i / (steps - 1)`.
pub fn latent_interpolation(
    gen: &impl PatchGenerator,
    z0: &[f32],
    z1: &[f32],
    steps: usize,
) -> Result<InterpolationTrace> {
    if steps < 2 {
        return Err(Error::InvalidParams(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let d = gen.latent_dim();
    if z0.len() != d || z1.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "latents of length {} and {} for a {d}-dimensional generator",
            z0.len(),
            z1.len()
        )));
    }
    let z = Tensor::from_fn(vec![steps, d], |i| {
        let t = (i / d) as f64 / (steps - 1) as f64;
        let j = i % d;
        ((1.0 - t) * f64::from(z0[j]) + t * f64::from(z1[j])) as f32
    });
    let frames = gen.generate(&z);
    let distances: Vec<f64> = (1..steps)
        .map(|i| l2(frames.sample(i - 1), frames.sample(i)))
        .collect();
    let endpoint_distance = l2(frames.sample(0), frames.sample(steps - 1));
    let bound = (1.0 + SMOOTHNESS_SLACK) * 2.0 / (steps - 1) as f64 * endpoint_distance;
    let smooth = distances.iter().all(|&x| x <= bound);
    Ok(InterpolationTrace {
        z0: z0.to_vec(),
        z1: z1.to_vec(),
        steps,
        frames: Some(frames),
        distances,
        endpoint_distance,
        bound,
        smooth,
    })
}

/// Mean L2 distance over all unordered pairs of samples.
pub fn mean_pairwise_distance(t: &Tensor<f32>) -> Result<f64> {
    let n = t.batch();
    if n < 2 {
        return Err(Error::InsufficientData(format!("pairwise distance needs 2 samples, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += l2(t.sample(i), t.sample(j));
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityScore {
    pub generated: f64,
    pub baseline: f64,
    pub ratio: f64,
    pub collapsed: bool,
}

/// Diversity of `generated` relative to `real`.
pub fn diversity(generated: &Tensor<f32>, real: &Tensor<f32>) -> Result<DiversityScore> {
    let g = mean_pairwise_distance(generated)?;
    let b = mean_pairwise_distance(real)?;
    let ratio = if g == 0.0 { 0.0 } else { g / b };
    Ok(DiversityScore {
        generated: g,
        baseline: b,
        ratio,
        collapsed: ratio < COLLAPSE_RATIO,
    })
}

pub fn mode_collapse_score(
    gen: &impl PatchGenerator,
    n: usize,
    seed: u64,
    real: &Tensor<f32>,
) -> Result<DiversityScore> {
    if real.batch() == 0 {
        return Err(Error::InsufficientData("no real patches".into()));
    }
    diversity(&sample_patches(gen, n, seed), real)
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    diversity: Option<&'a DiversityScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    interpolation: Option<&'a InterpolationTrace>,
}

/// Write `diagnostics.json` with whichever results are present.
pub fn write_diagnostics(
    dir: &Path,
    diversity: Option<&DiversityScore>,
    interpolation: Option<&InterpolationTrace>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("diagnostics.json");
    let json = serde_json::to_string_pretty(&DiagnosticsFile {
        diversity,
        interpolation,
    })
    .expect("diagnostics serialise");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant;

    impl PatchGenerator for Constant {
        fn latent_dim(&self) -> usize {
            3
        }
        fn generate(&self, z: &Tensor<f32>) -> Tensor<f32> {
            Tensor::full(vec![z.batch(), 1, 4, 4], 0.25)
        }
    }

    #[test]
    fn constant_generator_has_zero_diversity() {
        let real = Tensor::from_fn(vec![3, 1, 4, 4], |i| (i as f32 * 0.37).sin());
        let s = mode_collapse_score(&Constant, 5, 1, &real).unwrap();
        assert_eq!(s.ratio, 0.0);
        assert!(s.collapsed);
    }

    #[test]
    fn two_steps_are_the_endpoints() {
        let t = latent_interpolation(&Constant, &[0.0; 3], &[1.0; 3], 2).unwrap();
        assert_eq!(t.distances, vec![0.0]);
        assert!(t.smooth);
        assert!(latent_interpolation(&Constant, &[0.0; 3], &[1.0; 3], 1).is_err());
    }

    #[test]
    fn grid_of_four_is_two_by_two() {
        let t = Tensor::full(vec![4, 1, 64, 64], 0.0);
        let g = batch_grid(&t, grid_columns(4));
        assert_eq!((g.height(), g.width()), (128, 128));
    }
}
