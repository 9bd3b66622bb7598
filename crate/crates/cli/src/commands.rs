//! Subcommands. Each validates its configuration, runs one stage of the
//! workflow and writes its artifacts under `out_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fpad_core::aetrain::finetune_ae;
use fpad_core::diagnostics::{
    batch_grid, grid_columns, latent_interpolation, mode_collapse_score, sample_patches, write_diagnostics,
};
use fpad_core::evaluate::{
    calibrate_from_records, det_curve, evaluate_model, parse_scores_csv, score_set, write_det_csv,
    write_scores_csv, ThresholdModel,
};
use fpad_core::gantrain::{train_gan, DetectionTracking, GanPair, GanTrainReport};
use fpad_core::gradcheck::{check_all, GradCheckSummary};
use fpad_core::models::{
    build_autoencoder, build_critic, build_generator, load_checkpoint, save_checkpoint, AeVariant,
    ArchConfig, LossMode, NetKind, Network, MANIFEST_FILE,
};
use fpad_core::preproc::{EvalSet, TrainStream};
use fpad_core::rng::{derive_named_seed, RngStream};
use fpad_core::synthdata::{build_corpus, DatasetIndex, Label, Split};
use fpad_core::transfer::{
    transplant, transplant_checkpoints, verify_transplant, write_transplant_report, VerificationReport,
};
use fpad_core::{Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "fpad", version, about = "One-class fingerprint presentation attack detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// JSON config file with flat dotted keys (e.g. {"gan.epochs": 20}).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable. Takes precedence over --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for --set data_root=DIR.
    #[arg(long, value_name = "DIR")]
    pub data_root: Option<PathBuf>,
    /// Shorthand for --set out_dir=DIR.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Print the resolved configuration as flat JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut set = self.set.clone();
        if let Some(d) = &self.data_root {
            set.push(format!("data_root={}", serde_json::to_string(d).expect("path serialises")));
        }
        if let Some(d) = &self.out_dir {
            set.push(format!("out_dir={}", serde_json::to_string(d).expect("path serialises")));
        }
        RunConfig::load(self.config.as_deref(), &set)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bona fide / attack corpus under data_root.
    SynthData(Common),
    /// Adversarial pretraining; writes generator/ and critic/ checkpoints.
    TrainGan(Common),
    /// Draw patches from a trained generator into samples_grid.png.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Generator checkpoint directory.
        #[arg(long)]
        generator: PathBuf,
        /// Number of patches.
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
    /// Latent interpolation between two random latents into interpolation_strip.png.
    Interpolate {
        #[command(flatten)]
        common: Common,
        /// Generator checkpoint directory.
        #[arg(long)]
        generator: PathBuf,
        /// Number of frames, endpoints included.
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Move GAN weights into a fresh autoencoder and verify the transplant.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Critic checkpoint directory.
        #[arg(long)]
        critic: PathBuf,
        /// Generator checkpoint directory.
        #[arg(long)]
        generator: PathBuf,
    },
    /// Fine-tune an autoencoder on bona fide training patches.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        init: AeInit,
    },
    /// Threshold from bona fide training images: mean + std of their scores.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Autoencoder checkpoint directory.
        #[arg(long)]
        ae: PathBuf,
    },
    /// Score the validation split and write metrics.json, scores.csv and det.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Autoencoder checkpoint directory.
        #[arg(long)]
        ae: PathBuf,
        /// threshold.json written by `calibrate`.
        #[arg(long)]
        threshold: PathBuf,
    },
    /// DET curve from a scores.csv file.
    Det {
        #[command(flatten)]
        common: Common,
        /// scores.csv written by `evaluate`.
        #[arg(long)]
        scores: PathBuf,
    },
    /// GAN training that classifies the validation split with the critic after every epoch.
    TrackGanDetection(Common),
    /// Gradient checks of every objective plus a transplant check.
    Verify {
        #[command(flatten)]
        common: Common,
        /// GAN run directory (with critic/ and generator/) to check instead of fresh networks.
        #[arg(long)]
        gan: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, Args)]
#[group(required = true, multiple = false)]
pub struct AeInit {
    /// Randomly initialised baseline autoencoder.
    #[arg(long)]
    pub from_scratch: bool,
    /// GAN run directory (critic/ and generator/) or an autoencoder from `transfer`.
    #[arg(long, value_name = "DIR")]
    pub from_gan: Option<PathBuf>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, serde_json::to_string_pretty(value).expect("serialisable")).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_index(cfg: &RunConfig) -> Result<DatasetIndex> {
    DatasetIndex::load(&cfg.data_root)
}

fn save_config(cfg: &RunConfig) -> Result<()> {
    let path = cfg.out_dir.join("config.json");
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    fs::write(&path, cfg.to_flat_json()).map_err(|e| Error::Io { path, source: e })
}

pub fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::SynthData(c) | Command::TrainGan(c) | Command::TrackGanDetection(c) => c,
        Command::Sample { common, .. }
        | Command::Interpolate { common, .. }
        | Command::Transfer { common, .. }
        | Command::TrainAe { common, .. }
        | Command::Calibrate { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Det { common, .. }
        | Command::Verify { common, .. } => common,
    };
    let cfg = common.resolve()?;
    if common.print_config {
        println!("{}", cfg.to_flat_json());
        return Ok(());
    }
    match cli.command {
        Command::SynthData(_) => synth_data(&cfg),
        Command::TrainGan(_) => gan(&cfg, false).map(|_| ()),
        Command::TrackGanDetection(_) => gan(&cfg, true).map(|_| ()),
        Command::Sample { generator, n, .. } => sample(&cfg, &generator, n),
        Command::Interpolate { generator, steps, .. } => interpolate(&cfg, &generator, steps),
        Command::Transfer { critic, generator, .. } => transfer(&cfg, &critic, &generator),
        Command::TrainAe { init, .. } => train_ae(&cfg, &init),
        Command::Calibrate { ae, .. } => calibrate(&cfg, &ae).map(|_| ()),
        Command::Evaluate { ae, threshold, .. } => evaluate(&cfg, &ae, &threshold),
        Command::Det { scores, .. } => det(&cfg, &scores),
        Command::Verify { gan, .. } => verify(&cfg, gan.as_deref()),
    }
}

pub fn synth_data(cfg: &RunConfig) -> Result<()> {
    let index = build_corpus(&cfg.corpus_spec()?, &cfg.data_root)?;
    let c = index.counts();
    println!(
        "wrote {} images to {} (train bona fide {}, val bona fide {}, val pa {})",
        index.entries().len(),
        cfg.data_root.display(),
        c.train_bona_fide,
        c.val_bona_fide,
        c.val_pa
    );
    Ok(())
}

fn gan_pair(arch: &ArchConfig, mode: LossMode, init_seed: u64) -> Result<GanPair> {
    Ok(GanPair {
        generator: build_generator(arch, derive_named_seed(init_seed, "generator"))?,
        critic: build_critic(arch, mode, derive_named_seed(init_seed, "critic"))?,
    })
}

pub fn gan(cfg: &RunConfig, track: bool) -> Result<GanTrainReport> {
    let index = load_index(cfg)?;
    println!("{}", serde_json::to_string(&cfg.gan).expect("config serialises"));
    let mut stream = TrainStream::new(&index, cfg.augment.clone(), cfg.gan.batch_size, derive_named_seed(cfg.gan.seed, "stream"))?;
    let mut nets = gan_pair(&cfg.arch, cfg.gan.loss_mode, cfg.seeds().init)?;
    let sets = if track {
        let val = EvalSet::load(&index, Split::Val, &[Label::BonaFide, Label::Pa])?;
        if val.is_empty() {
            return Err(Error::EmptyValSet);
        }
        let calibration = EvalSet::load(&index, Split::Train, &[Label::BonaFide])?;
        Some((val, calibration))
    } else {
        None
    };
    let tracking = sets.as_ref().map(|(val, calibration)| DetectionTracking { val, calibration });
    save_config(cfg)?;
    let report = train_gan(&mut nets, &cfg.gan, &mut stream, tracking, Some(&cfg.out_dir))?;
    for e in &report.epochs {
        match &e.detection {
            Some(d) => println!(
                "epoch {} critic {:.5} generator {:.5} acer {:.4}",
                e.epoch, e.critic_loss, e.generator_loss, d.acer
            ),
            None => println!("epoch {} critic {:.5} generator {:.5}", e.epoch, e.critic_loss, e.generator_loss),
        }
    }
    println!(
        "critic updates {} generator updates {}",
        report.critic_updates, report.generator_updates
    );
    Ok(report)
}

fn load_generator(dir: &Path) -> Result<Network<f32>> {
    let (g, meta) = load_checkpoint(dir)?;
    if meta.kind != NetKind::Generator {
        return Err(Error::Mode(format!("{} does not hold a generator", dir.display())));
    }
    Ok(g)
}

pub fn sample(cfg: &RunConfig, generator: &Path, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let g = load_generator(generator)?;
    let seed = cfg.seeds().sampling;
    let patches = sample_patches(&g, n, seed);
    let path = cfg.out_dir.join("samples_grid.png");
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    batch_grid(&patches, grid_columns(n)).save_png(&path)?;
    println!("wrote {}", path.display());
    // diversity against real patches when a corpus is available
    if n >= 2 && cfg.data_root.join(fpad_core::synthdata::INDEX_FILE).exists() {
        let index = load_index(cfg)?;
        let mut stream = TrainStream::new(&index, cfg.augment.clone(), n, derive_named_seed(seed, "real"))?;
        let real = stream.next_batch().to_tensor();
        let score = mode_collapse_score(&g, n, seed, &real)?;
        println!("diversity ratio {:.4} collapsed {}", score.ratio, score.collapsed);
        write_diagnostics(&cfg.out_dir, Some(&score), None)?;
    }
    Ok(())
}

pub fn interpolate(cfg: &RunConfig, generator: &Path, steps: usize) -> Result<()> {
    let g = load_generator(generator)?;
    let d = g.spec().arch.latent_dim;
    let rng = RngStream::new(cfg.seeds().sampling).split_named("interpolation");
    let draw = |label: &str| {
        let mut r = rng.split_named(label);
        (0..d).map(|_| r.normal() as f32).collect::<Vec<f32>>()
    };
    let trace = latent_interpolation(&g, &draw("z0"), &draw("z1"), steps)
        .map_err(|e| Error::Config(e.to_string()))?;
    let frames = trace.frames.as_ref().expect("frames kept");
    let path = cfg.out_dir.join("interpolation_strip.png");
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    batch_grid(frames, steps).save_png(&path)?;
    write_diagnostics(&cfg.out_dir, None, Some(&trace))?;
    println!(
        "wrote {}; max step {:.4} bound {:.4} smooth {}",
        path.display(),
        trace.distances.iter().cloned().fold(0.0, f64::max),
        trace.bound,
        trace.smooth
    );
    Ok(())
}

pub fn transfer(cfg: &RunConfig, critic: &Path, generator: &Path) -> Result<()> {
    let init = derive_named_seed(cfg.seeds().init, "bridge");
    let (c, g, ae, map) = transplant_checkpoints(critic, generator, init)?;
    let report = verify_transplant(&c, &g, &ae, cfg.seeds().sampling);
    save_checkpoint(&ae, init, 0, &cfg.out_dir.join("autoencoder"))?;
    write_transplant_report(&map, &report, &cfg.out_dir)?;
    println!(
        "transplanted {} tensors, {} fresh; encoder deviation {} decoder deviation {}",
        map.pairs.len(),
        map.fresh.len(),
        report.encoder.max_abs_deviation,
        report.decoder.max_abs_deviation
    );
    if !report.passed {
        return Err(Error::Domain("transplanted autoencoder is not equivalent to its sources".into()));
    }
    Ok(())
}

/// The starting autoencoder for `train-ae`.
fn initial_ae(cfg: &RunConfig, init: &AeInit) -> Result<Network<f32>> {
    let seed = derive_named_seed(cfg.seeds().init, "bridge");
    match &init.from_gan {
        None => build_autoencoder(&cfg.arch, AeVariant::Scratch, derive_named_seed(cfg.seeds().init, "autoencoder")),
        Some(dir) if dir.join(MANIFEST_FILE).exists() => {
            let (ae, meta) = load_checkpoint(dir)?;
            match meta.kind {
                NetKind::Autoencoder {
                    variant: AeVariant::Transfer { .. },
                } => Ok(ae),
                other => Err(Error::Mode(format!(
                    "{} holds {other:?}, not a transplanted autoencoder",
                    dir.display()
                ))),
            }
        }
        Some(dir) => {
            let (c, g, ae, map) = transplant_checkpoints(&dir.join("critic"), &dir.join("generator"), seed)?;
            let report = verify_transplant(&c, &g, &ae, cfg.seeds().sampling);
            write_transplant_report(&map, &report, &cfg.out_dir)?;
            Ok(ae)
        }
    }
}

pub fn train_ae(cfg: &RunConfig, init: &AeInit) -> Result<()> {
    let index = load_index(cfg)?;
    let mut ae = initial_ae(cfg, init)?;
    println!("{}", serde_json::to_string(&cfg.ae).expect("config serialises"));
    let mut stream = TrainStream::new(&index, cfg.augment.clone(), cfg.ae.batch_size, derive_named_seed(cfg.ae.seed, "stream"))?;
    let val = if cfg.ae.track_validation {
        Some(EvalSet::load(&index, Split::Val, &[Label::BonaFide, Label::Pa])?)
    } else {
        None
    };
    save_config(cfg)?;
    let report = finetune_ae(&mut ae, &cfg.ae, &mut stream, val.as_ref(), Some(&cfg.out_dir))?;
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "epoch {} train loss {:.6} val bona fide {} val pa {}",
        last.epoch,
        last.train_loss,
        last.val_bona_error.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
        last.val_pa_error.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
    );
    Ok(())
}

fn load_ae(dir: &Path) -> Result<Network<f32>> {
    let (ae, meta) = load_checkpoint(dir)?;
    if !matches!(meta.kind, NetKind::Autoencoder { .. }) {
        return Err(Error::Mode(format!("{} does not hold an autoencoder", dir.display())));
    }
    Ok(ae)
}

pub fn calibrate(cfg: &RunConfig, ae: &Path) -> Result<ThresholdModel> {
    let index = load_index(cfg)?;
    let ae = load_ae(ae)?;
    let train = EvalSet::load(&index, Split::Train, &[Label::BonaFide])?;
    let records = score_set(&ae, &train)?;
    let model = calibrate_from_records(&records)?;
    write_json(&cfg.out_dir.join("threshold.json"), &model)?;
    write_scores_csv(&records, &cfg.out_dir.join("calibration_scores.csv"))?;
    println!(
        "mean {:.6} std {:.6} threshold {:.6} over {} images",
        model.mean,
        model.std,
        model.threshold,
        records.len()
    );
    Ok(model)
}

pub fn read_threshold(path: &Path) -> Result<ThresholdModel> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn evaluate(cfg: &RunConfig, ae: &Path, threshold: &Path) -> Result<()> {
    let index = load_index(cfg)?;
    let ae = load_ae(ae)?;
    let model = read_threshold(threshold)?;
    let val = EvalSet::load(&index, Split::Val, &[Label::BonaFide, Label::Pa])?;
    let report = evaluate_model(&ae, &model, &val, Some(&cfg.out_dir))?;
    println!(
        "apcer {:.4} bpcer {:.4} acer {:.4}; mean score bona fide {:.6} pa {:.6}",
        report.apcer,
        report.bpcer,
        report.acer,
        report.mean_score(Label::BonaFide),
        report.mean_score(Label::Pa)
    );
    Ok(())
}

pub fn det(cfg: &RunConfig, scores: &Path) -> Result<()> {
    let text = fs::read_to_string(scores).map_err(|e| Error::Io {
        path: scores.to_path_buf(),
        source: e,
    })?;
    let rows = parse_scores_csv(&text).map_err(|e| Error::Decode {
        path: scores.to_path_buf(),
        reason: e.to_string(),
    })?;
    let points = det_curve(&rows.iter().map(|r| (r.score, r.label)).collect::<Vec<_>>())?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    let path = cfg.out_dir.join("det.csv");
    write_det_csv(&points, &path)?;
    println!("wrote {} points to {}", points.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport {
    gradient_checks: Vec<GradCheckSummary>,
    transplant: VerificationReport,
    passed: bool,
}

pub fn verify(cfg: &RunConfig, gan: Option<&Path>) -> Result<()> {
    let gradient_checks = check_all(cfg.seeds().init);
    for s in &gradient_checks {
        println!(
            "{:<22} {:>4} parameters  max relative error {:.2e}  {}",
            s.name,
            s.parameters,
            s.max_rel_error,
            if s.passed { "pass" } else { "FAIL" }
        );
    }
    let transplant_report = match gan {
        Some(dir) => {
            let (c, g, ae, _) =
                transplant_checkpoints(&dir.join("critic"), &dir.join("generator"), cfg.seeds().init)?;
            verify_transplant(&c, &g, &ae, cfg.seeds().sampling)
        }
        None => {
            let pair = gan_pair(&cfg.arch, cfg.gan.loss_mode, cfg.seeds().init)?;
            let mut ae = build_autoencoder(
                &cfg.arch,
                AeVariant::Transfer {
                    loss_mode: cfg.gan.loss_mode,
                },
                cfg.seeds().init,
            )?;
            transplant(&pair.critic, &pair.generator, &mut ae, cfg.seeds().init)?;
            verify_transplant(&pair.critic, &pair.generator, &ae, cfg.seeds().sampling)
        }
    };
    println!(
        "transplant encoder deviation {} decoder deviation {}  {}",
        transplant_report.encoder.max_abs_deviation,
        transplant_report.decoder.max_abs_deviation,
        if transplant_report.passed { "pass" } else { "FAIL" }
    );
    let passed = transplant_report.passed && gradient_checks.iter().all(|s| s.passed);
    write_json(
        &cfg.out_dir.join("verify_report.json"),
        &VerifyReport {
            gradient_checks,
            transplant: transplant_report,
            passed,
        },
    )?;
    if passed {
        Ok(())
    } else {
        Err(Error::Domain("verification failed; see verify_report.json".into()))
    }
}
