//! Synthetic fingerprint corpora and the on-disk dataset layout.
//!
//! Bona fide images are oriented band-pass noise: white noise is filtered by a
//! bank of orientation-selective ring filters tuned to the ridge frequency,
//! and each pixel takes the response of the filter matching a smooth random
//! orientation field. Two rounds of filtering with soft thresholding in
//! between give continuous ridges. The pattern sits inside an elliptical
//! finger mask on a near-white background.
//!
//! Presentation attacks are image-space perturbations of bona fide images.
//!
//! Layout: `root/{train,val}/{bona_fide,pa}/<name>.png` plus `root/index.json`.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::{derive_named_seed, derive_seed, RngStream};

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    /// Ridge frequency in cycles per pixel, below Nyquist.
    pub ridge_frequency: f64,
    /// Larger values give a smoother, less curved orientation field.
    pub orientation_smoothness: f64,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    /// Sensor noise inside the finger region, in `[0, 1]`.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            ridge_frequency: 0.1,
            orientation_smoothness: 1.0,
            image_size: (256, 256),
            noise_level: 0.3,
            seed: 0,
        }
    }
}

/// Smallest side for which the finger mask keeps its background border.
const MIN_SIDE: usize = 24;
const BORDER: f64 = 4.0;
const EDGE_RAMP: f64 = 4.0;
const ORIENTATION_BINS: usize = 12;
const FILTER_ROUNDS: usize = 2;

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let f = self.ridge_frequency;
        if !(f > 0.0 && f < 0.5) {
            return Err(Error::InvalidParams(format!(
                "ridge_frequency {f} must lie in (0, 0.5)"
            )));
        }
        if !(self.orientation_smoothness > 0.0 && self.orientation_smoothness.is_finite()) {
            return Err(Error::InvalidParams(
                "orientation_smoothness must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::InvalidParams("noise_level must lie in [0, 1]".into()));
        }
        let (h, w) = self.image_size;
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::InvalidParams(format!(
                "image_size {h}x{w} below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Rescales the ridge pattern, shifting its frequency.
    RidgeShift,
    /// Covers a disc with a dark, flat smudge.
    BlobOcclusion,
    /// Pulls intensities toward their mean.
    ContrastFlatten,
    /// Multiplicative noise on ridge darkness.
    SpeckleNoise,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::RidgeShift,
        AttackKind::BlobOcclusion,
        AttackKind::ContrastFlatten,
        AttackKind::SpeckleNoise,
    ];
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::RidgeShift => "ridge_shift",
            AttackKind::BlobOcclusion => "blob_occlusion",
            AttackKind::ContrastFlatten => "contrast_flatten",
            AttackKind::SpeckleNoise => "speckle_noise",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attack {
    pub kind: AttackKind,
    /// In `(0, 1]`.
    pub magnitude: f64,
}

impl Attack {
    pub fn new(kind: AttackKind, magnitude: f64) -> Result<Self> {
        let a = Attack { kind, magnitude };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.magnitude > 0.0 && self.magnitude <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "attack magnitude {} must lie in (0, 1]",
                self.magnitude
            )))
        }
    }
}

/// FFT plans and the oriented filter bank for one `(size, frequency)` pair.
struct RidgeSynthesizer {
    height: usize,
    width: usize,
    row_fft: Arc<dyn Fft<f64>>,
    row_ifft: Arc<dyn Fft<f64>>,
    col_fft: Arc<dyn Fft<f64>>,
    col_ifft: Arc<dyn Fft<f64>>,
    /// One real transfer function per orientation bin.
    bank: Vec<Vec<f64>>,
}

fn signed_frequency(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64 / n as f64
    } else {
        k as f64 / n as f64 - 1.0
    }
}

impl RidgeSynthesizer {
    fn new(height: usize, width: usize, frequency: f64) -> Self {
        let mut planner = FftPlanner::new();
        let radial_sigma = 0.18 * frequency;
        let angular_sigma = PI / ORIENTATION_BINS as f64 * 0.7;
        let bank = (0..ORIENTATION_BINS)
            .map(|b| {
                // ridges run along `ridge_dir`; the wave vector is normal to it
                let ridge_dir = b as f64 * PI / ORIENTATION_BINS as f64;
                let wave_dir = ridge_dir + PI / 2.0;
                let mut h = vec![0.0; height * width];
                for ky in 0..height {
                    let fy = signed_frequency(ky, height);
                    for kx in 0..width {
                        let fx = signed_frequency(kx, width);
                        let rho = (fx * fx + fy * fy).sqrt();
                        if rho == 0.0 {
                            continue;
                        }
                        let mut d = fy.atan2(fx) - wave_dir;
                        // orientation is defined modulo pi
                        d = (d + PI / 2.0).rem_euclid(PI) - PI / 2.0;
                        let radial = (-(rho - frequency).powi(2) / (2.0 * radial_sigma.powi(2))).exp();
                        let angular = (-d * d / (2.0 * angular_sigma.powi(2))).exp();
                        h[ky * width + kx] = radial * angular;
                    }
                }
                h
            })
            .collect();
        RidgeSynthesizer {
            height,
            width,
            row_fft: planner.plan_fft_forward(width),
            row_ifft: planner.plan_fft_inverse(width),
            col_fft: planner.plan_fft_forward(height),
            col_ifft: planner.plan_fft_inverse(height),
            bank,
        }
    }

    fn transform(&self, data: &mut [Complex<f64>], inverse: bool) {
        let (h, w) = (self.height, self.width);
        let (rows, cols) = if inverse {
            (&self.row_ifft, &self.col_ifft)
        } else {
            (&self.row_fft, &self.col_fft)
        };
        rows.process(data);
        let mut column = vec![Complex::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = data[y * w + x];
            }
            cols.process(&mut column);
            for y in 0..h {
                data[y * w + x] = column[y];
            }
        }
    }

    /// Oriented band-pass filtering of `field`, steered per pixel by `theta`.
    fn steer(&self, field: &[f64], theta: &[f64]) -> Vec<f64> {
        let n = self.height * self.width;
        let mut spectrum: Vec<Complex<f64>> = field.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.transform(&mut spectrum, false);
        let responses: Vec<Vec<f64>> = self
            .bank
            .iter()
            .map(|h| {
                let mut s: Vec<Complex<f64>> =
                    spectrum.iter().zip(h).map(|(c, &g)| c * g).collect();
                self.transform(&mut s, true);
                s.iter().map(|c| c.re / n as f64).collect()
            })
            .collect();
        let bins = ORIENTATION_BINS as f64;
        (0..n)
            .map(|i| {
                let pos = theta[i].rem_euclid(PI) / PI * bins;
                let lo = pos.floor() as usize % ORIENTATION_BINS;
                let hi = (lo + 1) % ORIENTATION_BINS;
                let t = pos - pos.floor();
                (1.0 - t) * responses[lo][i] + t * responses[hi][i]
            })
            .collect()
    }

    fn generate(&self, params: &SynthParams) -> GrayImage {
        let (h, w) = (self.height, self.width);
        let mut rng = RngStream::new(params.seed);

        // smooth orientation field: base angle plus a few long plane waves
        let base = rng.uniform(0.0, PI);
        let max_cycles = 1.5 / params.orientation_smoothness;
        let waves: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| {
                (
                    rng.uniform(-max_cycles, max_cycles),
                    rng.uniform(-max_cycles, max_cycles),
                    rng.uniform(-0.5, 0.5),
                    rng.uniform(0.0, 2.0 * PI),
                )
            })
            .collect();
        let theta: Vec<f64> = (0..h * w)
            .map(|i| {
                let (r, c) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
                base + waves
                    .iter()
                    .map(|&(kx, ky, a, ph)| a * (2.0 * PI * (kx * c + ky * r) + ph).sin())
                    .sum::<f64>()
            })
            .collect();

        let mut field: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
        for _ in 0..FILTER_ROUNDS {
            let filtered = self.steer(&field, &theta);
            let std = (filtered.iter().map(|v| v * v).sum::<f64>() / (h * w) as f64).sqrt();
            let std = if std > 0.0 { std } else { 1.0 };
            field = filtered.iter().map(|v| (1.8 * v / std).tanh()).collect();
        }

        // elliptical finger mask leaving a background border
        let (hf, wf) = (h as f64, w as f64);
        let margin = BORDER + EDGE_RAMP + 1.0;
        let cy = hf / 2.0 + rng.uniform(-0.03, 0.03) * hf;
        let cx = wf / 2.0 + rng.uniform(-0.03, 0.03) * wf;
        let ay = (rng.uniform(0.38, 0.45) * hf).min(cy - margin).min(hf - 1.0 - cy - margin);
        let ax = (rng.uniform(0.32, 0.40) * wf).min(cx - margin).min(wf - 1.0 - cx - margin);
        let ramp = EDGE_RAMP / ax.min(ay);
        let noise_sigma = 0.08 * params.noise_level;

        let pixels: Vec<f32> = (0..h * w)
            .map(|i| {
                let (r, c) = ((i / w) as f64, (i % w) as f64);
                let d = (((r - cy) / ay).powi(2) + ((c - cx) / ax).powi(2)).sqrt();
                let m = ((1.0 - d) / ramp).clamp(0.0, 1.0);
                let background = 1.0 - 0.04 * rng.uniform(0.0, 1.0);
                let noise = rng.normal() * noise_sigma;
                let ridge = 0.5 - 0.42 * field[i] + noise;
                (m * ridge + (1.0 - m) * background).clamp(0.0, 1.0) as f32
            })
            .collect();
        GrayImage::new(h, w, pixels).expect("synthesised pixels are clamped")
    }
}

/// One synthetic bona fide fingerprint; a pure function of `params`.
pub fn generate_bona_fide(params: &SynthParams) -> Result<GrayImage> {
    params.validate()?;
    let (h, w) = params.image_size;
    Ok(RidgeSynthesizer::new(h, w, params.ridge_frequency).generate(params))
}

/// Perturb `img` into a presentation-attack stand-in. Deterministic in
/// `(img, attack, seed)`.
pub fn apply_attack(img: &GrayImage, attack: &Attack, seed: u64) -> Result<GrayImage> {
    attack.validate()?;
    let mut rng = RngStream::new(seed);
    let m = attack.magnitude;
    let (h, w) = (img.height(), img.width());
    let out = match attack.kind {
        AttackKind::RidgeShift => {
            let factor = 1.0 + 0.5 * m;
            let scale = if rng.bernoulli(0.5) { factor } else { 1.0 / factor };
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            GrayImage::from_fn(h, w, |r, c| {
                let sy = cy + (r as f64 - cy) / scale;
                let sx = cx + (c as f64 - cx) / scale;
                img.sample_bilinear(sy, sx, crate::image::BACKGROUND)
            })
        }
        AttackKind::BlobOcclusion => {
            let area = 0.2 * m * (h * w) as f64;
            let radius = (area / PI).sqrt().min((h.min(w) as f64 - 1.0) / 2.0);
            let cy = rng.uniform(radius, h as f64 - 1.0 - radius);
            let cx = rng.uniform(radius, w as f64 - 1.0 - radius);
            let level = rng.uniform(0.25, 0.45);
            let mut noise = rng.split(1);
            GrayImage::from_fn(h, w, |r, c| {
                let inside = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2) <= radius * radius;
                if inside {
                    (level + 0.02 * noise.normal()) as f32
                } else {
                    img.get(r, c)
                }
            })
        }
        AttackKind::ContrastFlatten => {
            let mean = img.mean() as f32;
            let keep = (1.0 - m) as f32;
            GrayImage::from_fn(h, w, |r, c| mean + keep * (img.get(r, c) - mean))
        }
        AttackKind::SpeckleNoise => GrayImage::from_fn(h, w, |r, c| {
            let dark = 1.0 - f64::from(img.get(r, c));
            (1.0 - dark * (1.0 + m * rng.normal())) as f32
        }),
    };
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    BonaFide,
    Pa,
}

impl Label {
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::BonaFide => "bona_fide",
            Label::Pa => "pa",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_bona_fide: usize,
    pub train_pa: usize,
    pub val_bona_fide: usize,
    pub val_pa: usize,
}

impl SplitCounts {
    pub fn get(&self, label: Label, split: Split) -> usize {
        match (split, label) {
            (Split::Train, Label::BonaFide) => self.train_bona_fide,
            (Split::Train, Label::Pa) => self.train_pa,
            (Split::Val, Label::BonaFide) => self.val_bona_fide,
            (Split::Val, Label::Pa) => self.val_pa,
        }
    }

    fn bump(&mut self, label: Label, split: Split) {
        match (split, label) {
            (Split::Train, Label::BonaFide) => self.train_bona_fide += 1,
            (Split::Train, Label::Pa) => self.train_pa += 1,
            (Split::Val, Label::BonaFide) => self.val_bona_fide += 1,
            (Split::Val, Label::Pa) => self.val_pa += 1,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    entries: Vec<IndexEntry>,
    #[serde(default)]
    counts: Option<SplitCounts>,
}

/// Images of a dataset with their label and split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    root: PathBuf,
    entries: Vec<IndexEntry>,
}

fn check_relative(path: &str) -> Result<()> {
    let p = Path::new(path);
    let ok = !path.is_empty()
        && p.components().all(|c| matches!(c, Component::Normal(_)))
        && !path.contains('\\');
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!(
            "index path {path:?} must be relative and stay inside the root"
        )))
    }
}

impl DatasetIndex {
    pub fn new(root: impl Into<PathBuf>, mut entries: Vec<IndexEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            check_relative(&e.path)?;
            if !seen.insert(e.path.as_str()) {
                return Err(Error::InvalidParams(format!("duplicate index path {}", e.path)));
            }
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(DatasetIndex {
            root: root.into(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for e in &self.entries {
            c.bump(e.label, e.split);
        }
        c
    }

    pub fn select(&self, split: Split, label: Label) -> impl Iterator<Item = &IndexEntry> {
        self.entries
            .iter()
            .filter(move |e| e.split == split && e.label == label)
    }

    pub fn absolute(&self, entry: &IndexEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn to_json(&self) -> String {
        let file = IndexFile {
            entries: self.entries.clone(),
            counts: Some(self.counts()),
        };
        serde_json::to_string_pretty(&file).expect("index serialises")
    }

    /// Parse an `index.json` manifest. Counts, when present, must agree with
    /// the entries.
    pub fn from_json(root: impl Into<PathBuf>, text: &[u8]) -> Result<Self> {
        let file: IndexFile = serde_json::from_slice(text)
            .map_err(|e| Error::InvalidParams(format!("malformed index: {e}")))?;
        let index = DatasetIndex::new(root, file.entries)?;
        if let Some(c) = file.counts {
            if c != index.counts() {
                return Err(Error::InvalidParams(
                    "index counts disagree with its entries".into(),
                ));
            }
        }
        Ok(index)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        DatasetIndex::from_json(root, &bytes)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(INDEX_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}

/// Requested corpus composition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_bona_train: usize,
    pub n_bona_val: usize,
    pub n_pa_val: usize,
    pub params: SynthParams,
    /// Cycled over the PA images.
    pub attacks: Vec<Attack>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_bona_train: 1122,
            n_bona_val: 128,
            n_pa_val: 128,
            params: SynthParams::default(),
            attacks: AttackKind::ALL
                .iter()
                .map(|&kind| Attack {
                    kind,
                    magnitude: 0.5,
                })
                .collect(),
            seed: 0,
        }
    }
}

const CELLS: [(Split, Label); 4] = [
    (Split::Train, Label::BonaFide),
    (Split::Train, Label::Pa),
    (Split::Val, Label::BonaFide),
    (Split::Val, Label::Pa),
];

/// Write a synthetic corpus under `out_dir` and return its index. The train
/// split is bona fide only.
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<DatasetIndex> {
    spec.params.validate()?;
    if spec.n_bona_train == 0 || spec.n_bona_val == 0 || spec.n_pa_val == 0 {
        return Err(Error::InvalidParams("corpus counts must be at least 1".into()));
    }
    if spec.attacks.is_empty() {
        return Err(Error::InvalidParams("at least one attack is required".into()));
    }
    for a in &spec.attacks {
        a.validate()?;
    }
    for (split, label) in CELLS {
        let dir = out_dir.join(split.dir_name()).join(label.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let (h, w) = spec.params.image_size;
    let synth = RidgeSynthesizer::new(h, w, spec.params.ridge_frequency);
    let mut jobs: Vec<(Split, Label, usize)> = Vec::new();
    jobs.extend((0..spec.n_bona_train).map(|i| (Split::Train, Label::BonaFide, i)));
    jobs.extend((0..spec.n_bona_val).map(|i| (Split::Val, Label::BonaFide, i)));
    jobs.extend((0..spec.n_pa_val).map(|i| (Split::Val, Label::Pa, i)));

    let entries = jobs
        .par_iter()
        .map(|&(split, label, i)| -> Result<IndexEntry> {
            let cell = format!("{}/{}", split.dir_name(), label.dir_name());
            let image_seed = derive_seed(derive_named_seed(spec.seed, &cell), i as u64);
            let params = SynthParams {
                seed: image_seed,
                ..spec.params.clone()
            };
            let mut img = synth.generate(&params);
            let name = match label {
                Label::BonaFide => format!("{}_{i:05}.png", split.dir_name()),
                Label::Pa => {
                    let attack = &spec.attacks[i % spec.attacks.len()];
                    img = apply_attack(&img, attack, derive_seed(image_seed, 0xa77ac))?;
                    format!("{}_{i:05}_{}.png", split.dir_name(), attack.kind)
                }
            };
            let rel = format!("{cell}/{name}");
            img.save_png(&out_dir.join(&rel))?;
            Ok(IndexEntry {
                path: rel,
                label,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let index = DatasetIndex::new(out_dir, entries)?;
    index.save()?;
    Ok(index)
}

/// Index every PNG under the layout, decoding each to reject corrupt files.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut entries = Vec::new();
    for (split, label) in CELLS {
        let dir = root.join(split.dir_name()).join(label.dir_name());
        if !dir.is_dir() {
            return Err(Error::Layout(dir));
        }
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
            .collect();
        names.sort();
        for name in names {
            GrayImage::load_png(&dir.join(&name))?;
            entries.push(IndexEntry {
                path: format!("{}/{}/{name}", split.dir_name(), label.dir_name()),
                label,
                split,
            });
        }
    }
    DatasetIndex::new(root, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthParams {
        SynthParams {
            image_size: (64, 80),
            seed: 9,
            ..SynthParams::default()
        }
    }

    #[test]
    fn rejects_frequency_at_or_above_nyquist() {
        for f in [0.0, 0.5, 0.7, -0.1, f64::NAN] {
            let p = SynthParams {
                ridge_frequency: f,
                ..small()
            };
            assert!(matches!(generate_bona_fide(&p), Err(Error::InvalidParams(_))));
        }
    }

    #[test]
    fn bona_fide_has_requested_shape_and_range() {
        let img = generate_bona_fide(&small()).unwrap();
        assert_eq!((img.height(), img.width()), (64, 80));
        assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn background_border_is_near_white() {
        let img = generate_bona_fide(&small()).unwrap();
        for r in 0..img.height() {
            for c in 0..img.width() {
                let edge = r < 4 || c < 4 || r >= img.height() - 4 || c >= img.width() - 4;
                if edge {
                    assert!(img.get(r, c) >= 0.95, "({r},{c}) = {}", img.get(r, c));
                }
            }
        }
        // and the finger itself is dark somewhere
        assert!(img.pixels().iter().any(|&p| p < 0.3));
    }

    #[test]
    fn zero_magnitude_is_rejected() {
        assert!(Attack::new(AttackKind::SpeckleNoise, 0.0).is_err());
        assert!(Attack::new(AttackKind::SpeckleNoise, 1.5).is_err());
        assert!(Attack::new(AttackKind::SpeckleNoise, 1.0).is_ok());
    }

    #[test]
    fn every_attack_changes_the_image_and_keeps_range() {
        let img = generate_bona_fide(&small()).unwrap();
        for kind in AttackKind::ALL {
            let out = apply_attack(&img, &Attack::new(kind, 0.5).unwrap(), 3).unwrap();
            assert_eq!((out.height(), out.width()), (img.height(), img.width()));
            assert!(out.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            assert!(out.mean_abs_diff(&img) > 0.0, "{kind}");
        }
    }

    #[test]
    fn index_rejects_escaping_and_duplicate_paths() {
        let e = |p: &str| IndexEntry {
            path: p.into(),
            label: Label::BonaFide,
            split: Split::Train,
        };
        assert!(DatasetIndex::new("/r", vec![e("../x.png")]).is_err());
        assert!(DatasetIndex::new("/r", vec![e("/abs.png")]).is_err());
        assert!(DatasetIndex::new("/r", vec![e("a.png"), e("a.png")]).is_err());
        assert!(DatasetIndex::new("/r", vec![e("train/bona_fide/a.png")]).is_ok());
    }

    #[test]
    fn index_json_round_trips() {
        let entries = vec![
            IndexEntry {
                path: "val/pa/b.png".into(),
                label: Label::Pa,
                split: Split::Val,
            },
            IndexEntry {
                path: "train/bona_fide/a.png".into(),
                label: Label::BonaFide,
                split: Split::Train,
            },
        ];
        let idx = DatasetIndex::new("/r", entries).unwrap();
        let back = DatasetIndex::from_json("/r", idx.to_json().as_bytes()).unwrap();
        assert_eq!(back, idx);
    }
}
