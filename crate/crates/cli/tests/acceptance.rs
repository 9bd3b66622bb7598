//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use num::{BigRational, ToPrimitive};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use fpad_autograd::{Tape, Tensor};
use fpad_cli::commands::{self, AeInit};
use fpad_cli::config::{parse_override, RunConfig};
use fpad_core::aetrain::AeTrainReport;
use fpad_core::diagnostics::*;
use fpad_core::evaluate::*;
use fpad_core::gantrain::*;
use fpad_core::gradcheck::{check_all, TOLERANCE};
use fpad_core::models::*;
use fpad_core::preproc::*;
use fpad_core::rng::RngStream;
use fpad_core::synthdata::{Label, Split};
use fpad_core::transfer::*;
use fpad_core::GrayImage;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const DESK_WIDTHS: &str = "[8,16,32,64]";
const DESK_SEEDS: [u64; 3] = [1, 2, 3];
const DESK_AE_LR: &str = "3e-4";

fn config(data: &Path, out: &Path, sets: &[String]) -> RunConfig {
    let mut all = vec![
        format!("data_root={}", serde_json::to_string(data).unwrap()),
        format!("out_dir={}", serde_json::to_string(out).unwrap()),
    ];
    all.extend(sets.iter().cloned());
    let parsed: Vec<_> = all.iter().map(|s| parse_override(s).unwrap()).collect();
    RunConfig::resolve(None, &parsed).unwrap()
}

fn sets(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Shared scratch space and results that later criteria reuse.
struct Ctx {
    dir: tempfile::TempDir,
    small: Option<PathBuf>,
    desk: Option<PathBuf>,
    gan_reports: Vec<(String, GanTrainReport)>,
    desk_runs: BTreeMap<(u64, &'static str), DeskRun>,
}

#[derive(Clone, Debug)]
struct DeskRun {
    acer: f64,
    mean_bona: f64,
    mean_pa: f64,
    elapsed: Duration,
}

impl Ctx {
    /// 64 bona fide training images plus a small two-class validation split.
    fn small_corpus(&mut self) -> PathBuf {
        if let Some(p) = &self.small {
            return p.clone();
        }
        let root = self.dir.path().join("small");
        let cfg = config(
            &root,
            &root,
            &sets(&["corpus.n_bona_train=64", "corpus.n_bona_val=16", "corpus.n_pa_val=16"]),
        );
        commands::synth_data(&cfg).unwrap();
        self.small = Some(root.clone());
        root
    }

    fn desk_corpus(&mut self) -> PathBuf {
        if let Some(p) = &self.desk {
            return p.clone();
        }
        let root = self.dir.path().join("desk");
        let cfg = config(
            &root,
            &root,
            &sets(&[
                "corpus.n_bona_train=512",
                "corpus.n_bona_val=64",
                "corpus.n_pa_val=64",
                "corpus.attack_magnitude=0.5",
            ]),
        );
        commands::synth_data(&cfg).unwrap();
        self.desk = Some(root.clone());
        root
    }

    /// WGAN-GP pretraining (shared per seed), then one autoencoder variant
    /// through calibrate and evaluate.
    fn desk_run(&mut self, seed: u64, variant: &'static str) -> DeskRun {
        if let Some(r) = self.desk_runs.get(&(seed, variant)) {
            return r.clone();
        }
        let data = self.desk_corpus();
        let base = self.dir.path().join(format!("desk_seed{seed}"));
        let common = vec![
            format!("seed={seed}"),
            format!("arch.widths={DESK_WIDTHS}"),
            "gan.loss_mode=\"wgan_gp\"".into(),
            "gan.epochs=20".into(),
            "ae.epochs=100".into(),
            format!("ae.learning_rate={DESK_AE_LR}"),
            "ae.track_validation=false".into(),
        ];
        let start = Instant::now();
        let gan_dir = base.join("gan");
        if !gan_dir.join("critic").exists() {
            let report = commands::gan(&config(&data, &gan_dir, &common), false).unwrap();
            self.gan_reports.push((format!("desk gan seed {seed}"), report));
        }
        let out = base.join(variant);
        let cfg = config(&data, &out, &common);
        let init = match variant {
            "transfer" => AeInit {
                from_scratch: false,
                from_gan: Some(gan_dir),
            },
            _ => AeInit {
                from_scratch: true,
                from_gan: None,
            },
        };
        commands::train_ae(&cfg, &init).unwrap();
        if variant == "transfer" {
            let t: serde_json::Value = read_json(&out.join("transplant_report.json"));
            assert_eq!(t["verification"]["passed"], true, "transplant verification failed");
        }
        let ae = out.join("autoencoder");
        commands::calibrate(&cfg, &ae).unwrap();
        commands::evaluate(&cfg, &ae, &out.join("threshold.json")).unwrap();
        let m: serde_json::Value = read_json(&out.join("metrics.json"));
        let run = DeskRun {
            acer: m["acer"].as_f64().unwrap(),
            mean_bona: m["mean_score_bona_fide"].as_f64().unwrap(),
            mean_pa: m["mean_score_pa"].as_f64().unwrap(),
            elapsed: start.elapsed(),
        };
        self.desk_runs.insert((seed, variant), run.clone());
        run
    }
}

fn label(pa: bool) -> Label {
    if pa {
        Label::Pa
    } else {
        Label::BonaFide
    }
}

/// Rates read off a 2x2 confusion matrix indexed `[truth][decision]`,
/// with score >= threshold rejected as an attack.
fn confusion_rates(scores: &[(f64, Label)], tau: f64) -> (f64, f64) {
    let mut m = [[0usize; 2]; 2];
    for &(s, l) in scores {
        let truth = usize::from(l == Label::Pa);
        let decision = usize::from(s >= tau);
        m[truth][decision] += 1;
    }
    let apcer = m[1][0] as f64 / (m[1][0] + m[1][1]) as f64;
    let bpcer = m[0][1] as f64 / (m[0][0] + m[0][1]) as f64;
    (apcer, bpcer)
}

fn criterion_1(_: &mut Ctx) -> Check {
    let start = Instant::now();
    let mut rng = RngStream::new(1);
    for set in 0..1000 {
        let n = 2 + rng.below(80);
        let mut scores: Vec<(f64, Label)> = (0..n)
            .map(|_| (rng.below(33) as f64 / 16.0, label(rng.bernoulli(0.5))))
            .collect();
        scores[rng.below(n)].1 = Label::Pa;
        let k = scores.iter().position(|s| s.1 == Label::Pa).unwrap();
        scores[(k + 1 + rng.below(n - 1)) % n].1 = Label::BonaFide;
        let tau = rng.below(35) as f64 / 16.0 - 1.0 / 16.0;

        let (apcer, bpcer) = confusion_rates(&scores, tau);
        let r = rates_at(&scores, tau).unwrap();
        ensure!(
            (r.apcer, r.bpcer, r.acer) == (apcer, bpcer, (apcer + bpcer) / 2.0),
            "set {set}: rates {r:?} vs oracle ({apcer}, {bpcer})"
        );
        let records: Vec<ScoreRecord> = scores
            .iter()
            .enumerate()
            .map(|(i, &(s, l))| ScoreRecord::new(format!("{i}.png"), l, Split::Val, vec![s]).unwrap())
            .collect();
        let model = ThresholdModel {
            mean: tau,
            std: 0.0,
            threshold: tau,
        };
        let report = evaluate_records(records, &model).unwrap();
        ensure!(
            (report.apcer, report.bpcer) == (apcer, bpcer),
            "set {set}: report disagrees with oracle"
        );

        let mut taus: Vec<f64> = scores.iter().map(|s| s.0).collect();
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        let mut oracle = vec![f64::NEG_INFINITY];
        oracle.extend(taus);
        oracle.push(f64::INFINITY);
        let det = det_curve(&scores).unwrap();
        ensure!(det.len() == oracle.len(), "set {set}: {} DET points, want {}", det.len(), oracle.len());
        for (p, &t) in det.iter().zip(&oracle) {
            let (a, b) = confusion_rates(&scores, t);
            ensure!(
                p.threshold == t && p.apcer == a && p.bpcer == b,
                "set {set}: DET point {p:?} vs ({t}, {a}, {b})"
            );
        }
        ensure!(report.det_points == det, "set {set}: report DET differs");
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(10), "took {t:?}");
    Ok(format!("1000 sets exact in {t:.2?}"))
}

/// Mean plus population standard deviation with exact rational moments.
fn exact_threshold(scores: &[f64]) -> f64 {
    let xs: Vec<BigRational> = scores.iter().map(|&s| BigRational::from_float(s).unwrap()).collect();
    let zero = BigRational::from_integer(0.into());
    let n = BigRational::from_integer(xs.len().into());
    let mean = xs.iter().fold(zero.clone(), |a, b| a + b) / &n;
    let var = xs.iter().map(|x| (x - &mean) * (x - &mean)).fold(zero, |a, b| a + b) / &n;
    mean.to_f64().unwrap() + var.to_f64().unwrap().sqrt()
}

fn below(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

fn criterion_2(_: &mut Ctx) -> Check {
    let mut rng = RngStream::new(2);
    let mut worst = 0.0f64;
    for v in 0..100 {
        let n = 1 + rng.below(300);
        let scale = 10f64.powi(rng.below(7) as i32 - 4);
        let offset = rng.uniform(0.0, 5.0) * scale;
        let scores: Vec<f64> = (0..n).map(|_| offset + rng.uniform(0.0, 1.0) * scale).collect();
        let m = calibrate_threshold(&scores).unwrap();
        let want = exact_threshold(&scores);
        let rel = (m.threshold - want).abs() / want.abs();
        worst = worst.max(rel);
        ensure!(rel <= 1e-9, "vector {v}: {} vs {want} (rel {rel:e})", m.threshold);
        ensure!(decide(m.threshold, &m) == Label::Pa, "vector {v}: score at threshold accepted");
        ensure!(
            decide(below(m.threshold), &m) == Label::BonaFide,
            "vector {v}: score just below threshold rejected"
        );
    }
    let m = calibrate_threshold(&[0.25, 0.75]).unwrap();
    let rec = ScoreRecord::new("edge.png".into(), Label::Pa, Split::Val, vec![m.threshold]).unwrap();
    let bona = ScoreRecord::new("low.png".into(), Label::BonaFide, Split::Val, vec![0.0]).unwrap();
    let r = evaluate_records(vec![rec, bona], &m).unwrap();
    ensure!(r.records[0].decision == Some(Label::Pa), "boundary record not rejected");
    Ok(format!("100 vectors, worst relative error {worst:.1e}; boundary is PA"))
}

fn criterion_3(_: &mut Ctx) -> Check {
    let mut rng = RngStream::new(3);
    let sig = |l: f64| 1.0 / (1.0 + (-l).exp());
    for case in 0..200 {
        let (nr, nf) = (1 + rng.below(64), 1 + rng.below(64));
        let lr: Vec<f64> = (0..nr).map(|_| rng.uniform(-6.0, 6.0)).collect();
        let lf: Vec<f64> = (0..nf).map(|_| rng.uniform(-6.0, 6.0)).collect();
        let (dr, df): (Vec<f64>, Vec<f64>) = (lr.iter().map(|&l| sig(l)).collect(), lf.iter().map(|&l| sig(l)).collect());
        let mut real = 0.0;
        for d in &dr {
            real -= d.ln();
        }
        let (mut fake, mut gen) = (0.0, 0.0);
        for d in &df {
            fake -= (1.0 - d).ln();
            gen -= d.ln();
        }
        let (want_d, want_g) = (0.5 * (real / nr as f64 + fake / nf as f64), gen / nf as f64);
        let (d, g) = dcgan_losses(&dr, &df).unwrap();
        ensure!((d - want_d).abs() <= 1e-6 && (g - want_g).abs() <= 1e-6, "case {case}: dcgan ({d}, {g})");
        let tape = Tape::new();
        let vr = tape.var(Tensor::new(vec![nr, 1], lr.clone()));
        let vf = tape.var(Tensor::new(vec![nf, 1], lf.clone()));
        let (td, tg) = (
            dcgan_critic_loss(vr, vf).value().item(),
            dcgan_generator_loss(vf).value().item(),
        );
        ensure!(
            (td - want_d).abs() <= 1e-6 && (tg - want_g).abs() <= 1e-6,
            "case {case}: logit losses ({td}, {tg})"
        );

        let (c, g) = wgan_losses(&lr, &lf).unwrap();
        let (mr, mf) = (lr.iter().sum::<f64>() / nr as f64, lf.iter().sum::<f64>() / nf as f64);
        ensure!((c - (mf - mr)).abs() <= 1e-6 && (g + mf).abs() <= 1e-6, "case {case}: wasserstein ({c}, {g})");
    }

    // dyadic scores, power-of-two batches and dyadic shifts make every sum exact
    for case in 0..1000 {
        let n = 1 << (1 + rng.below(7));
        let m = 1 << (1 + rng.below(7));
        let dy = |rng: &mut RngStream| (rng.below(2049) as f64 - 1024.0) / 128.0;
        let r: Vec<f64> = (0..n).map(|_| dy(&mut rng)).collect();
        let f: Vec<f64> = (0..m).map(|_| dy(&mut rng)).collect();
        let shift = dy(&mut rng) * 4.0;
        let moved = |v: &[f64]| v.iter().map(|x| x + shift).collect::<Vec<_>>();
        let (a, _) = wgan_losses(&r, &f).unwrap();
        let (b, _) = wgan_losses(&moved(&r), &moved(&f)).unwrap();
        ensure!(a == b, "case {case}: shift by {shift} changed {a} to {b}");
    }

    let mut worst = 0.0f64;
    for case in 0..200 {
        let d = 2 + rng.below(30);
        let w: Vec<f64> = (0..d).map(|_| rng.normal() * rng.uniform(0.05, 1.0)).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let lambda = rng.uniform(0.5, 20.0);
        let n = 1 + rng.below(8);
        let real = Tensor::from_fn(vec![n, d], |_| rng.uniform(-1.0, 1.0));
        let fake = Tensor::from_fn(vec![n, d], |_| rng.uniform(-1.0, 1.0));
        let eps: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
        let tape = Tape::new();
        let wv = tape.var(Tensor::new(vec![d, 1], w.clone()));
        let gp = gradient_penalty_with(&tape, |x| x.matmul(wv, false, false), &real, &fake, &eps, lambda);
        let want = lambda * (norm - 1.0).powi(2);
        let err = (gp.value().item() - want).abs();
        worst = worst.max(err);
        ensure!(err <= 1e-9, "case {case}: penalty {} vs {want}", gp.value().item());
    }
    Ok(format!(
        "losses within 1e-6; 1000 shifts exact; linear-critic penalty error {worst:.1e}"
    ))
}

fn criterion_4(_: &mut Ctx) -> Check {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut n = 0;
    for seed in 0..4 {
        for s in check_all(seed) {
            ensure!(s.parameters <= 500, "{} checks {} parameters", s.name, s.parameters);
            ensure!(s.passed, "seed {seed} {}: relative error {:e}", s.name, s.max_rel_error);
            if s.max_rel_error > worst.0 {
                worst = (s.max_rel_error, s.name.clone());
            }
            n += 1;
        }
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(120), "took {t:?}");
    Ok(format!(
        "{n} checks, worst {:.1e} ({}) <= {TOLERANCE:e}, {t:.1?}",
        worst.0, worst.1
    ))
}

fn desk_arch() -> ArchConfig {
    ArchConfig {
        widths: vec![8, 16, 32, 64],
        latent_dim: 100,
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn criterion_5(ctx: &mut Ctx) -> Check {
    let a = desk_arch();
    for (k, mode) in [LossMode::Dcgan, LossMode::WganGp, LossMode::WganClip].into_iter().enumerate() {
        let mut generator = build_generator(&a, 10 + k as u64).unwrap();
        let critic = build_critic(&a, mode, 20 + k as u64).unwrap();
        let mut rng = RngStream::new(k as u64);
        for i in 0..generator.tensor_specs().len() {
            let (lo, hi) = match generator.tensor_specs()[i].role {
                TensorRole::RunningMean => (-0.05, 0.0),
                TensorRole::RunningVar => (0.5, 2.0),
                _ => continue,
            };
            for v in generator.tensor_at_mut(i).data_mut() {
                *v = rng.uniform(lo, hi) as f32;
            }
        }
        let mut ae = build_autoencoder(&a, AeVariant::Transfer { loss_mode: mode }, 30).unwrap();
        transplant(&critic, &generator, &mut ae, 30).unwrap();
        for probe in 0..3 {
            let r = verify_transplant(&critic, &generator, &ae, probe);
            ensure!(
                r.encoder.max_abs_deviation == 0.0 && r.decoder.max_abs_deviation == 0.0,
                "{mode} probe {probe}: deviations {} / {}",
                r.encoder.max_abs_deviation,
                r.decoder.max_abs_deviation
            );
        }
        let dir = ctx.dir.path().join(format!("c5_{mode}"));
        save_checkpoint(&critic, 20, 3, &dir.join("critic")).unwrap();
        save_checkpoint(&generator, 10, 3, &dir.join("generator")).unwrap();
        let (_, _, from_disk, _) = transplant_checkpoints(&dir.join("critic"), &dir.join("generator"), 30).unwrap();
        ensure!(from_disk.max_abs_diff(&ae) == 0.0, "{mode}: transplant from checkpoints differs");
    }

    let mut kinds = vec![NetKind::Generator, NetKind::Autoencoder { variant: AeVariant::Scratch }];
    for m in [LossMode::Dcgan, LossMode::WganGp, LossMode::WganClip] {
        kinds.push(NetKind::Critic { loss_mode: m });
        kinds.push(NetKind::Autoencoder {
            variant: AeVariant::Transfer { loss_mode: m },
        });
    }
    for (i, kind) in kinds.iter().enumerate() {
        let net = Network::<f32>::build(*kind, &a, i as u64).unwrap();
        let dir = ctx.dir.path().join(format!("c5_round_trip_{i}"));
        save_checkpoint(&net, i as u64, 7, &dir).unwrap();
        let (back, meta) = load_checkpoint(&dir).unwrap();
        ensure!(meta.kind == *kind && meta.epoch == 7, "{kind:?}: metadata {meta:?}");
        for (s, (x, y)) in net.tensor_specs().iter().zip(net.tensors().zip(back.tensors())) {
            ensure!(x.shape() == y.shape() && bits(x) == bits(y), "{kind:?}: {} differs", s.name);
        }
    }
    Ok("3 loss modes x 3 probes at deviation 0; 8 network kinds round-trip bit-exact".into())
}

/// Background with a random dark rectangle of random texture.
fn image(max_side: usize) -> impl Strategy<Value = GrayImage> {
    (8..max_side, 8..max_side, any::<u64>()).prop_map(|(h, w, seed)| {
        let mut rng = RngStream::new(seed);
        let top = rng.below(h);
        let left = rng.below(w);
        let bottom = top + rng.below(h - top);
        let right = left + rng.below(w - left);
        let mut tex = rng.split(1);
        GrayImage::from_fn(h, w, |r, c| {
            if (top..=bottom).contains(&r) && (left..=right).contains(&c) {
                tex.uniform(0.0, 0.9) as f32
            } else {
                tex.uniform(0.96, 1.0) as f32
            }
        })
    })
}

fn roi_oracle(img: &GrayImage, t: f32) -> Option<GrayImage> {
    let dark: Vec<(usize, usize)> = (0..img.height())
        .flat_map(|r| (0..img.width()).map(move |c| (r, c)))
        .filter(|&(r, c)| img.get(r, c) < t)
        .collect();
    let top = dark.iter().map(|p| p.0).min()?;
    let bottom = dark.iter().map(|p| p.0).max()?;
    let left = dark.iter().map(|p| p.1).min()?;
    let right = dark.iter().map(|p| p.1).max()?;
    Some(img.crop(top, left, bottom - top + 1, right - left + 1))
}

fn run_property<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn criterion_6(_: &mut Ctx) -> Check {
    let start = Instant::now();
    let t = DEFAULT_BACKGROUND_THRESHOLD;
    run_property("roi", image(96), |img| {
        match roi_oracle(&img, t) {
            None => prop_assert!(extract_roi(&img, t).is_err()),
            Some(want) => {
                let roi = extract_roi(&img, t).unwrap();
                prop_assert_eq!(&roi, &want);
                prop_assert_eq!(&extract_roi(&roi, t).unwrap(), &roi);
            }
        }
        Ok(())
    })?;
    run_property("patch count", (64usize..300, 64usize..300), |(h, w)| {
        let img = GrayImage::from_fn(h, w, |r, c| ((r * 7 + c * 3) % 101) as f32 / 100.0);
        let tiles = tile_patches(&img).unwrap();
        prop_assert_eq!(tiles.len(), (h / PATCH) * (w / PATCH));
        let padded = roi_for_patches(&image_with_roi(h, w), t).unwrap();
        prop_assert!(padded.height() >= PATCH && padded.width() >= PATCH);
        Ok(())
    })?;
    let draws = (any::<bool>(), -20.0f64..20.0, 0.75f64..1.25).prop_map(|(flip, angle_deg, factor)| AugmentDraws {
        flip,
        angle_deg,
        factor,
    });
    run_property("augmentation bounds", (image(64), draws), |(img, d)| {
        let out = augment_with(&img, &d);
        prop_assert_eq!((out.height(), out.width()), (img.height(), img.width()));
        prop_assert!(out.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        Ok(())
    })?;
    run_property("augmentation identity", image(64), |img| {
        prop_assert_eq!(augment_with(&img, &AugmentDraws::IDENTITY), img);
        Ok(())
    })?;
    run_property("normalisation", (image(64), 0u32..=255), |(img, k)| {
        let x = k as f32 / 255.0;
        prop_assert!((-1.0..=1.0).contains(&normalize(x)));
        prop_assert!((denormalize(normalize(x)) - x).abs() <= f32::EPSILON);
        let img = img.pad_to(PATCH, PATCH, 1.0).crop(0, 0, PATCH, PATCH);
        let back = Patch::from_image(&img).to_image();
        prop_assert!(back.pixels().iter().zip(img.pixels()).all(|(a, b)| (a - b).abs() <= f32::EPSILON));
        Ok(())
    })?;
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(60), "took {t:?}");
    Ok(format!("5 properties x 1000 cases in {t:.1?}"))
}

/// Dark square somewhere inside a white `h x w` image.
fn image_with_roi(h: usize, w: usize) -> GrayImage {
    GrayImage::from_fn(h, w, |r, c| if r >= h / 3 && c >= w / 4 && r < h / 2 && c < w / 2 { 0.2 } else { 1.0 })
}

fn criterion_7(ctx: &mut Ctx) -> Check {
    let data = ctx.small_corpus();
    let desk = vec![format!("arch.widths={DESK_WIDTHS}"), "seed=5".into()];
    let mut gan_runs = Vec::new();
    for run in ["a", "b"] {
        let mut s = desk.clone();
        s.push("gan.epochs=2".into());
        let out = ctx.dir.path().join(format!("c7_gan_{run}"));
        gan_runs.push(commands::gan(&config(&data, &out, &s), false).unwrap());
    }
    let (a, b) = (&gan_runs[0], &gan_runs[1]);
    ensure!(!a.critic_loss_trace.is_empty(), "empty critic trace");
    ensure!(a.critic_loss_trace == b.critic_loss_trace, "critic loss traces differ");
    ensure!(a.generator_loss_trace == b.generator_loss_trace, "generator loss traces differ");
    let (ga, gb) = (
        load_checkpoint(&ctx.dir.path().join("c7_gan_a/generator")).unwrap().0,
        load_checkpoint(&ctx.dir.path().join("c7_gan_b/generator")).unwrap().0,
    );
    ensure!(ga.max_abs_diff(&gb) == 0.0, "generator weights differ");
    let (nc, ng) = (a.critic_loss_trace.len(), a.generator_loss_trace.len());
    for (i, r) in gan_runs.into_iter().enumerate() {
        ctx.gan_reports.push((format!("determinism gan {i}"), r));
    }

    let mut traces = Vec::new();
    for run in ["a", "b"] {
        let mut s = desk.clone();
        s.extend(["ae.epochs=5".into(), "ae.track_validation=false".into()]);
        let out = ctx.dir.path().join(format!("c7_ae_{run}"));
        let init = AeInit {
            from_scratch: false,
            from_gan: Some(ctx.dir.path().join("c7_gan_a")),
        };
        commands::train_ae(&config(&data, &out, &s), &init).unwrap();
        let r: AeTrainReport = read_json(&out.join("report.json"));
        traces.push(r.loss_trace);
    }
    ensure!(traces[0].len() == 5 * 2, "{} AE steps", traces[0].len());
    ensure!(traces[0] == traces[1], "autoencoder loss traces differ");
    Ok(format!(
        "train-gan {nc} critic + {ng} generator losses, train-ae {} losses, bit-identical",
        traces[0].len()
    ))
}

fn criterion_8(ctx: &mut Ctx) -> Check {
    let data = ctx.small_corpus();
    for mode in ["dcgan", "wgan_gp", "wgan_clip"] {
        let out = ctx.dir.path().join(format!("c8_{mode}"));
        let s = sets(&["arch.widths=[2,2,2,2]", "arch.latent_dim=4", "gan.epochs=2", "gan.batch_size=24"]);
        let mut s = s;
        s.push(format!("gan.loss_mode=\"{mode}\""));
        let r = commands::gan(&config(&data, &out, &s), false).unwrap();
        ensure!(r.generator_updates == 2 * 3, "{mode}: {} generator updates", r.generator_updates);
        ctx.gan_reports.push((format!("schedule {mode}"), r));
    }
    for (name, r) in &ctx.gan_reports {
        ensure!(
            r.critic_updates == 3 * r.generator_updates,
            "{name}: {} critic vs {} generator updates",
            r.critic_updates,
            r.generator_updates
        );
    }
    Ok(format!("{} training runs keep 3 critic updates per generator update", ctx.gan_reports.len()))
}

fn criterion_9(ctx: &mut Ctx) -> Check {
    let start = Instant::now();
    let r = ctx.desk_run(DESK_SEEDS[0], "transfer");
    let t = start.elapsed();
    ensure!(
        r.mean_pa > r.mean_bona,
        "mean PA error {:.5} <= bona fide {:.5}",
        r.mean_pa,
        r.mean_bona
    );
    ensure!(r.acer < 0.35, "ACER {:.4}", r.acer);
    ensure!(t < Duration::from_secs(45 * 60), "took {t:?}");
    Ok(format!(
        "ACER {:.4}, mean error PA {:.5} > bona fide {:.5}, {:.0?} (run {:.0?})",
        r.acer, r.mean_pa, r.mean_bona, t, r.elapsed
    ))
}

fn criterion_10(ctx: &mut Ctx) -> Check {
    let (mut transfer, mut scratch) = (Vec::new(), Vec::new());
    for seed in DESK_SEEDS {
        transfer.push(ctx.desk_run(seed, "transfer").acer);
        scratch.push(ctx.desk_run(seed, "scratch").acer);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (t, s) = (mean(&transfer), mean(&scratch));
    ensure!(
        t <= s + 0.05,
        "transfer ACER {t:.4} {transfer:?} vs scratch {s:.4} {scratch:?}"
    );
    Ok(format!("transfer ACER {t:.4} {transfer:.3?} <= scratch {s:.4} {scratch:.3?} + 0.05"))
}

struct Constant;

impl PatchGenerator for Constant {
    fn latent_dim(&self) -> usize {
        3
    }

    fn generate(&self, z: &Tensor<f32>) -> Tensor<f32> {
        Tensor::full(vec![z.batch(), 1, 8, 8], 0.25)
    }
}

/// `z -> A z` as a 1x4x5 image.
struct Linear {
    a: Vec<f32>,
}

impl PatchGenerator for Linear {
    fn latent_dim(&self) -> usize {
        4
    }

    fn generate(&self, z: &Tensor<f32>) -> Tensor<f32> {
        Tensor::from_fn(vec![z.batch(), 1, 4, 5], |i| {
            let (n, p) = (i / 20, i % 20);
            (0..4).map(|j| self.a[p * 4 + j] * z.data()[n * 4 + j]).sum()
        })
    }
}

fn criterion_11(_: &mut Ctx) -> Check {
    let real = Tensor::from_fn(vec![16, 1, 8, 8], |i| ((i * 37 % 23) as f32 / 11.5) - 1.0);
    let c = mode_collapse_score(&Constant, 16, 1, &real).map_err(|e| e.to_string())?;
    ensure!(c.ratio == 0.0 && c.collapsed, "constant generator ratio {}", c.ratio);
    let r = diversity(&real, &real).map_err(|e| e.to_string())?;
    ensure!((r.ratio - 1.0).abs() <= 1e-6, "real vs real ratio {}", r.ratio);

    let mut rng = RngStream::new(11);
    let g = Linear {
        a: (0..80).map(|_| rng.normal() as f32).collect(),
    };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let z0: Vec<f32> = (0..4).map(|_| rng.normal() as f32).collect();
        let z1: Vec<f32> = (0..4).map(|_| rng.normal() as f32).collect();
        let steps = 2 + rng.below(10);
        let dz: Vec<f64> = (0..4).map(|j| f64::from(z1[j]) - f64::from(z0[j])).collect();
        let full = (0..20)
            .map(|p| (0..4).map(|j| f64::from(g.a[p * 4 + j]) * dz[j]).sum::<f64>().powi(2))
            .sum::<f64>()
            .sqrt();
        let trace = latent_interpolation(&g, &z0, &z1, steps).map_err(|e| e.to_string())?;
        ensure!(trace.distances.len() == steps - 1, "{} distances", trace.distances.len());
        for d in &trace.distances {
            let err = (d - full / (steps - 1) as f64).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-6, "step {d} vs {}", full / (steps - 1) as f64);
        }
    }
    Ok(format!(
        "constant ratio 0, real ratio {:.9}, interpolation error {worst:.1e}",
        r.ratio
    ))
}

fn criterion_12(ctx: &mut Ctx) -> Check {
    let data = ctx.small_corpus();
    let out = ctx.dir.path().join("c12");
    let s = vec![format!("arch.widths={DESK_WIDTHS}"), "gan.epochs=10".into()];
    let r = commands::gan(&config(&data, &out, &s), true).unwrap();
    ensure!(r.epochs.len() == 10, "{} epochs", r.epochs.len());
    for e in &r.epochs {
        let d = e.detection.as_ref().ok_or(format!("epoch {} has no ACER", e.epoch))?;
        ensure!((0.0..=1.0).contains(&d.acer), "epoch {} ACER {}", e.epoch, d.acer);
    }
    let csv = std::fs::read_to_string(out.join("detection_per_epoch.csv")).map_err(|e| e.to_string())?;
    ensure!(csv.lines().count() == 11, "detection csv has {} lines", csv.lines().count());
    let acers: Vec<String> = r.epochs.iter().map(|e| format!("{:.2}", e.detection.as_ref().unwrap().acer)).collect();
    ctx.gan_reports.push(("tracking".into(), r));
    Ok(format!("ACER per epoch [{}]", acers.join(", ")))
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn(&mut Ctx) -> Check); 12] = [
        (1, "metric oracle equivalence", criterion_1),
        (2, "threshold rule", criterion_2),
        (3, "loss correctness", criterion_3),
        (4, "gradient checks", criterion_4),
        (5, "transplant equivalence", criterion_5),
        (6, "pipeline invariants", criterion_6),
        (7, "determinism", criterion_7),
        (8, "schedule invariant", criterion_8),
        (9, "desk-scale end-to-end", criterion_9),
        (10, "transfer vs scratch", criterion_10),
        (11, "diagnostics", criterion_11),
        (12, "per-epoch detection tracking", criterion_12),
    ];
    let mut ctx = Ctx {
        dir: tempfile::tempdir().unwrap(),
        small: None,
        desk: None,
        gan_reports: Vec::new(),
        desk_runs: BTreeMap::new(),
    };
    let mut lines = Vec::new();
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let outcome = match catch_unwind(AssertUnwindSafe(|| f(&mut ctx))) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let line = match &outcome {
            Ok(msg) => format!("criterion {n:>2} PASS  {name}: {msg}"),
            Err(msg) => format!("criterion {n:>2} FAIL  {name}: {msg}"),
        };
        println!("{line}");
        lines.push((line, outcome.is_ok()));
    }
    println!();
    for (line, _) in &lines {
        println!("{line}");
    }
    if lines.iter().any(|(_, ok)| !ok) {
        std::process::exit(1);
    }
}
