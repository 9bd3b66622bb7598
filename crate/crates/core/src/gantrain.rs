//! Adversarial pretraining of the generator and critic.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fpad_autograd::{Float, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::evaluate::{compute_rates, det_curve, DetPoint, LabelCounts, Rates, ScoreRecord, ThresholdModel};
use crate::models::{save_checkpoint, BnMode, Bound, LossMode, NetKind, Network};
use crate::optim::{adam_step_network, AdamConfig, AdamState};
use crate::preproc::{EvalSet, TrainStream};
use crate::rng::RngStream;
use crate::synthdata::Label;

const INFER_CHUNK: usize = 64;
/// Keeps the penalty's norm differentiable at a zero gradient.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub loss_mode: LossMode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub critic_steps_per_gen_step: usize,
    pub batch_size: usize,
    pub epochs: u64,
    pub gp_lambda: f64,
    pub clip_value: f64,
    pub seed: u64,
    /// Epoch interval between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            loss_mode: LossMode::WganGp,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.9,
            critic_steps_per_gen_step: 3,
            batch_size: 64,
            epochs: 110,
            gp_lambda: 10.0,
            clip_value: 0.01,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("gan.{name} must be positive")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("gp_lambda", self.gp_lambda)?;
        positive("clip_value", self.clip_value)?;
        for (name, b) in [("gan.beta1", self.beta1), ("gan.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.critic_steps_per_gen_step == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "gan.critic_steps_per_gen_step, gan.batch_size and gan.epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.beta1, self.beta2)
    }
}

fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().find(|x| !x.is_finite()) {
        Some(x) => Err(Error::Domain(format!("{what} score {x} is not finite"))),
        None => Ok(()),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `(d_loss, g_loss)` from post-sigmoid scores. `d_loss` averages the real
/// and fake halves; `g_loss` is the non-saturating `mean(-ln d_fake)`.
pub fn dcgan_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::InsufficientData("empty score batch".into()));
    }
    if let Some(s) = d_real.iter().chain(d_fake).find(|s| !(**s > 0.0 && **s < 1.0)) {
        return Err(Error::Domain(format!("discriminator score {s} outside (0, 1)")));
    }
    let real: Vec<f64> = d_real.iter().map(|s| -s.ln()).collect();
    let fake: Vec<f64> = d_fake.iter().map(|s| -(1.0 - s).ln()).collect();
    let g: Vec<f64> = d_fake.iter().map(|s| -s.ln()).collect();
    Ok((0.5 * (mean(&real) + mean(&fake)), mean(&g)))
}

/// `(critic_loss, generator_loss)` of the Wasserstein objective.
pub fn wgan_losses(scores_real: &[f64], scores_fake: &[f64]) -> Result<(f64, f64)> {
    if scores_real.is_empty() || scores_fake.is_empty() {
        return Err(Error::InsufficientData("empty score batch".into()));
    }
    check_finite("real", scores_real)?;
    check_finite("fake", scores_fake)?;
    let f = mean(scores_fake);
    Ok((f - mean(scores_real), -f))
}

/// Discriminator loss from pre-sigmoid logits, using
/// `-ln sigmoid(l) = softplus(-l)` and `-ln(1 - sigmoid(l)) = softplus(l)`.
pub fn dcgan_critic_loss<'t, T: Float>(logit_real: Var<'t, T>, logit_fake: Var<'t, T>) -> Var<'t, T> {
    logit_real
        .neg()
        .softplus()
        .mean()
        .add(logit_fake.softplus().mean())
        .scale(T::of(0.5))
}

pub fn dcgan_generator_loss<'t, T: Float>(logit_fake: Var<'t, T>) -> Var<'t, T> {
    logit_fake.neg().softplus().mean()
}

pub fn wgan_critic_loss<'t, T: Float>(real: Var<'t, T>, fake: Var<'t, T>) -> Var<'t, T> {
    fake.mean().sub(real.mean())
}

pub fn wgan_generator_loss<'t, T: Float>(fake: Var<'t, T>) -> Var<'t, T> {
    fake.mean().neg()
}

/// Interpolates `eps[i] * real + (1 - eps[i]) * fake` sample by sample.
pub fn interpolate<T: Float>(real: &Tensor<T>, fake: &Tensor<T>, eps: &[T]) -> Tensor<T> {
    assert_eq!(real.shape(), fake.shape(), "penalty batches differ in shape");
    assert_eq!(eps.len(), real.batch(), "one epsilon per sample");
    let per = real.numel() / real.batch().max(1);
    Tensor::from_fn(real.shape().to_vec(), |i| {
        let e = eps[i / per];
        e * real.data()[i] + (T::one() - e) * fake.data()[i]
    })
}

/// `lambda * mean((|grad critic(x_hat)| - 1)^2)` for any differentiable
/// critic, with the interpolation weights given.
pub fn gradient_penalty_with<'t, T: Float>(
    tape: &'t Tape<T>,
    critic: impl Fn(Var<'t, T>) -> Var<'t, T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: &[T],
    lambda: f64,
) -> Var<'t, T> {
    let x_hat = tape.var(interpolate(real, fake, eps));
    let score = critic(x_hat).sum();
    let g = tape.grad(score, &[x_hat])[0];
    g.square()
        .sum_per_sample()
        .add_scalar(T::of(NORM_EPS))
        .sqrt()
        .add_scalar(-T::one())
        .square()
        .mean()
        .scale(T::of(lambda))
}

/// One uniform interpolation weight per sample.
pub fn draw_epsilons<T: Float>(n: usize, rng: &mut RngStream) -> Vec<T> {
    (0..n).map(|_| T::of(rng.uniform(0.0, 1.0))).collect()
}

/// Gradient penalty of a bound critic network. Batch normalisation couples
/// the samples of a batch, so a critic that has it is rejected.
pub fn gradient_penalty<'t, T: Float>(
    critic: &Bound<'t, '_, T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    rng: &mut RngStream,
    lambda: f64,
) -> Result<Var<'t, T>> {
    if critic.network().spec().has_batch_norm() {
        return Err(Error::Mode("gradient penalty needs a critic without batch normalisation".into()));
    }
    let eps = draw_epsilons(real.batch(), rng);
    Ok(gradient_penalty_with(
        critic.tape(),
        |x| critic.forward(x, BnMode::Train),
        real,
        fake,
        &eps,
        lambda,
    ))
}

/// Critic output before its final activation: a logit in dcgan mode, the
/// score itself otherwise.
pub fn critic_logits<'t, T: Float>(critic: &Bound<'t, '_, T>, x: Var<'t, T>, mode: BnMode) -> Var<'t, T> {
    let n = critic.network().spec().layers.len();
    critic.forward_range(x, 0..n - 1, mode)
}

fn loss_mode_of<T: Float>(critic: &Network<T>) -> Result<LossMode> {
    match critic.kind() {
        NetKind::Critic { loss_mode } => Ok(loss_mode),
        other => Err(Error::Mode(format!("expected a critic, got {other:?}"))),
    }
}

/// Critic objective of one update. `eps` carries the penalty's interpolation
/// weights and is ignored outside wgan_gp mode.
pub fn critic_objective<'t, T: Float>(
    critic: &Bound<'t, '_, T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: &[T],
    gp_lambda: f64,
) -> Result<Var<'t, T>> {
    let tape = critic.tape();
    let mode = loss_mode_of(critic.network())?;
    let r = critic_logits(critic, tape.var(real.clone()), BnMode::Train);
    let f = critic_logits(critic, tape.var(fake.clone()), BnMode::Train);
    Ok(match mode {
        LossMode::Dcgan => dcgan_critic_loss(r, f),
        LossMode::WganClip => wgan_critic_loss(r, f),
        LossMode::WganGp => {
            if critic.network().spec().has_batch_norm() {
                return Err(Error::Mode("gradient penalty needs a critic without batch normalisation".into()));
            }
            let gp = gradient_penalty_with(
                tape,
                |x| critic_logits(critic, x, BnMode::Train),
                real,
                fake,
                eps,
                gp_lambda,
            );
            wgan_critic_loss(r, f).add(gp)
        }
    })
}

/// Generator objective for latent batch `z`.
pub fn generator_objective<'t, T: Float>(
    generator: &Bound<'t, '_, T>,
    critic: &Bound<'t, '_, T>,
    z: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let mode = loss_mode_of(critic.network())?;
    let fake = generator.forward(z, BnMode::Train);
    let s = critic_logits(critic, fake, BnMode::Train);
    Ok(match mode {
        LossMode::Dcgan => dcgan_generator_loss(s),
        LossMode::WganGp | LossMode::WganClip => wgan_generator_loss(s),
    })
}

/// Standard normal latent batch `[n, latent_dim]`.
pub fn sample_latents<T: Float>(n: usize, latent_dim: usize, rng: &mut RngStream) -> Tensor<T> {
    Tensor::from_fn(vec![n, latent_dim], |_| T::of(rng.normal()))
}

/// Critic scores of every image: per-patch scores and their mean.
pub fn critic_scores(critic: &Network<f32>, set: &EvalSet) -> Result<Vec<ScoreRecord>> {
    set.items
        .par_iter()
        .map(|item| {
            let s = critic.infer(&item.patches, INFER_CHUNK);
            let scores = s.data().iter().map(|&v| f64::from(v)).collect();
            ScoreRecord::new(item.path.clone(), item.label, item.split, scores)
        })
        .collect()
}

/// `mean - std` of bona fide training critic scores (population std).
/// Higher critic scores mean "more real", so the rule mirrors the
/// reconstruction-error threshold.
pub fn calibrate_critic_threshold(train_scores: &[f64]) -> Result<ThresholdModel> {
    let m = crate::evaluate::calibrate_threshold(train_scores)?;
    Ok(ThresholdModel {
        threshold: m.mean - m.std,
        ..m
    })
}

pub fn decide_critic(score: f64, model: &ThresholdModel) -> Label {
    if score > model.threshold {
        Label::BonaFide
    } else {
        Label::Pa
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticEvalReport {
    pub threshold: ThresholdModel,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub counts: LabelCounts,
    /// Thresholds are on the negated critic score, so lower is bona fide as
    /// for reconstruction errors.
    pub det_points: Vec<DetPoint>,
}

/// Classify validation images with the critic alone, calibrated on bona
/// fide training images.
pub fn epoch_discriminator_eval(
    critic: &Network<f32>,
    val: &EvalSet,
    calibration: &EvalSet,
) -> Result<CriticEvalReport> {
    if val.is_empty() {
        return Err(Error::EmptyValSet);
    }
    let train: Vec<f64> = critic_scores(critic, calibration)?
        .iter()
        .map(|r| r.image_score)
        .collect();
    let model = calibrate_critic_threshold(&train)?;
    let records = critic_scores(critic, val)?;
    critic_report(&records, model)
}

/// Rates of critic-scored records under `model`.
pub fn critic_report(records: &[ScoreRecord], model: ThresholdModel) -> Result<CriticEvalReport> {
    let rates: Rates = compute_rates(records.iter().map(|r| (r.label, decide_critic(r.image_score, &model))))?;
    let negated: Vec<(f64, Label)> = records.iter().map(|r| (-r.image_score, r.label)).collect();
    Ok(CriticEvalReport {
        threshold: model,
        apcer: rates.apcer,
        bpcer: rates.bpcer,
        acer: rates.acer,
        counts: LabelCounts {
            bona_fide: records.iter().filter(|r| r.label == Label::BonaFide).count(),
            pa: records.iter().filter(|r| r.label == Label::Pa).count(),
        },
        det_points: det_curve(&negated)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpochRecord {
    pub epoch: u64,
    /// Mean over the epoch's critic updates.
    pub critic_loss: f64,
    pub generator_loss: f64,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanTrainReport {
    pub epochs: Vec<GanEpochRecord>,
    pub critic_updates: u64,
    pub generator_updates: u64,
    pub critic_loss_trace: Vec<f64>,
    pub generator_loss_trace: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Validation and calibration sets for per-epoch critic classification.
pub struct DetectionTracking<'a> {
    pub val: &'a EvalSet,
    pub calibration: &'a EvalSet,
}

pub struct GanPair {
    pub generator: Network<f32>,
    pub critic: Network<f32>,
}

impl GanPair {
    pub fn save(&self, seed: u64, epoch: u64, dir: &Path) -> Result<()> {
        save_checkpoint(&self.generator, seed, epoch, &dir.join("generator"))?;
        save_checkpoint(&self.critic, seed, epoch, &dir.join("critic"))
    }
}

fn grads_of<T: Float>(tape: &Tape<T>, loss: Var<'_, T>, wrt: &[Var<'_, T>]) -> Vec<Tensor<T>> {
    tape.grad(loss, wrt).iter().map(|g| (*g.value()).clone()).collect()
}

fn clip_weights(critic: &mut Network<f32>, c: f32) {
    for i in critic.trainable_indices() {
        for v in critic.tensor_at_mut(i).data_mut() {
            *v = v.clamp(-c, c);
        }
    }
}

/// Fakes for a critic update; the generator's batch statistics are not
/// recorded.
fn generate(generator: &Network<f32>, z: Tensor<f32>) -> Tensor<f32> {
    let tape = Tape::new();
    let g = generator.bind(&tape);
    let y = g.forward(tape.var(z), BnMode::Train);
    Arc::unwrap_or_clone(y.value())
}

/// Adversarial training. Each iteration makes `critic_steps_per_gen_step`
/// critic updates, each on a fresh real batch and fresh fakes, then one
/// generator update. An epoch is `stream.batches_per_epoch()` iterations.
pub fn train_gan(
    nets: &mut GanPair,
    cfg: &GanTrainConfig,
    stream: &mut TrainStream,
    tracking: Option<DetectionTracking<'_>>,
    out_dir: Option<&Path>,
) -> Result<GanTrainReport> {
    cfg.validate()?;
    if nets.generator.kind() != NetKind::Generator {
        return Err(Error::Mode("train_gan needs a generator".into()));
    }
    if loss_mode_of(&nets.critic)? != cfg.loss_mode {
        return Err(Error::Config(format!(
            "critic was built for {} but gan.loss_mode is {}",
            loss_mode_of(&nets.critic)?,
            cfg.loss_mode
        )));
    }
    if stream.batch_size() != cfg.batch_size {
        return Err(Error::Config(format!(
            "stream batch size {} differs from gan.batch_size {}",
            stream.batch_size(),
            cfg.batch_size
        )));
    }
    let latent = nets.generator.spec().arch.latent_dim;
    let adam = cfg.adam();
    let mut g_state = AdamState::for_network(&nets.generator);
    let mut c_state = AdamState::for_network(&nets.critic);
    let root = RngStream::new(cfg.seed);
    let (critic_rng, gen_rng) = (root.split_named("critic"), root.split_named("generator"));
    let mut report = GanTrainReport::default();
    let per_epoch = stream.batches_per_epoch();
    let start = Instant::now();
    let mut detection_csv = String::from("epoch,apcer,bpcer,acer\n");

    for epoch in 1..=cfg.epochs {
        let (mut c_total, mut g_total) = (0.0, 0.0);
        for _ in 0..per_epoch {
            for _ in 0..cfg.critic_steps_per_gen_step {
                let mut rng = critic_rng.split(report.critic_updates);
                let real = stream.next_batch().to_tensor();
                let z = sample_latents(real.batch(), latent, &mut rng);
                let fake = generate(&nets.generator, z);
                let eps: Vec<f32> = draw_epsilons(real.batch(), &mut rng);
                let (loss, grads, stats) = {
                    let tape = Tape::new();
                    let c = nets.critic.bind(&tape);
                    let loss = critic_objective(&c, &real, &fake, &eps, cfg.gp_lambda)?;
                    let grads = grads_of(&tape, loss, &c.trainable());
                    // running statistics follow the real batches only
                    let stats: Vec<_> = c.take_stats();
                    let half = stats.len() / 2;
                    let real_stats = stats.into_iter().take(half).collect::<Vec<_>>();
                    (f64::from(loss.value().item()), grads, real_stats)
                };
                report.critic_updates += 1;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        what: "critic loss",
                        iteration: report.critic_updates,
                    });
                }
                adam_step_network(&mut nets.critic, &grads, &mut c_state, &adam);
                nets.critic.update_running_stats(&stats);
                if cfg.loss_mode == LossMode::WganClip {
                    clip_weights(&mut nets.critic, cfg.clip_value as f32);
                }
                report.critic_loss_trace.push(loss);
                c_total += loss;
            }

            let mut rng = gen_rng.split(report.generator_updates);
            let z: Tensor<f32> = sample_latents(cfg.batch_size, latent, &mut rng);
            let (loss, grads, stats) = {
                let tape = Tape::new();
                let g = nets.generator.bind(&tape);
                let c = nets.critic.bind(&tape);
                let loss = generator_objective(&g, &c, tape.var(z))?;
                let grads = grads_of(&tape, loss, &g.trainable());
                (f64::from(loss.value().item()), grads, g.take_stats())
            };
            report.generator_updates += 1;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    what: "generator loss",
                    iteration: report.generator_updates,
                });
            }
            adam_step_network(&mut nets.generator, &grads, &mut g_state, &adam);
            nets.generator.update_running_stats(&stats);
            report.generator_loss_trace.push(loss);
            g_total += loss;
        }

        let detection = match &tracking {
            Some(t) => {
                let r = epoch_discriminator_eval(&nets.critic, t.val, t.calibration)?;
                detection_csv.push_str(&format!("{epoch},{},{},{}\n", r.apcer, r.bpcer, r.acer));
                Some(DetectionRecord {
                    apcer: r.apcer,
                    bpcer: r.bpcer,
                    acer: r.acer,
                })
            }
            None => None,
        };
        report.epochs.push(GanEpochRecord {
            epoch,
            critic_loss: c_total / (per_epoch * cfg.critic_steps_per_gen_step) as f64,
            generator_loss: g_total / per_epoch as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
            detection,
        });
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
                let path = dir.join("checkpoints").join(format!("epoch_{epoch:05}"));
                nets.save(cfg.seed, epoch, &path)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        nets.save(cfg.seed, cfg.epochs, dir)?;
        report.checkpoints.push(dir.to_path_buf());
        write(&dir.join("report.json"), serde_json::to_string_pretty(&report).expect("report serialises"))?;
        if tracking.is_some() {
            write(&dir.join("detection_per_epoch.csv"), detection_csv)?;
        }
    }
    Ok(report)
}

fn write(path: &Path, contents: String) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}
