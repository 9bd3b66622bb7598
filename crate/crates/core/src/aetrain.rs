//! Autoencoder fine-tuning on bona fide patches.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use fpad_autograd::{Float, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::models::{save_checkpoint, AeVariant, BnMode, Bound, NetKind, Network};
use crate::optim::{adam_step_network, AdamConfig, AdamState};
use crate::preproc::{EvalSet, TrainStream};
use crate::synthdata::Label;

const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeTrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    /// Epoch interval between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub track_validation: bool,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            learning_rate: 1e-5,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 32,
            epochs: 3000,
            seed: 0,
            checkpoint_every: 0,
            track_validation: true,
        }
    }
}

impl AeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("ae.learning_rate must be positive".into()));
        }
        for (name, b) in [("ae.beta1", self.beta1), ("ae.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("ae.batch_size and ae.epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.beta1, self.beta2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeEpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_bona_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_pa_error: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AeTrainReport {
    pub epochs: Vec<AeEpochRecord>,
    /// Loss of every optimiser step.
    pub loss_trace: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Per-sample mean squared difference, accumulated in double precision.
pub fn reconstruction_error<T: Float>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction of shape {:?} for input {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    let n = x.batch();
    Ok((0..n)
        .map(|i| {
            let (a, b) = (x.sample(i), x_hat.sample(i));
            a.iter()
                .zip(b)
                .map(|(&p, &q)| (p.as_f64() - q.as_f64()).powi(2))
                .sum::<f64>()
                / a.len() as f64
        })
        .collect())
}

/// Map `[-1, 1]` patches into the range the autoencoder reconstructs.
pub fn native_input<T: Float>(kind: NetKind, patches: &Tensor<T>) -> Tensor<T> {
    match kind {
        NetKind::Autoencoder {
            variant: AeVariant::Scratch,
        } => patches.map(|v| (v + T::one()) / T::of(2.0)),
        _ => patches.clone(),
    }
}

/// Reconstruction error of each patch in inference mode.
pub fn patch_errors(ae: &Network<f32>, patches: &Tensor<f32>) -> Vec<f64> {
    if patches.batch() == 0 {
        return Vec::new();
    }
    let x = native_input(ae.kind(), patches);
    let y = ae.infer(&x, INFER_CHUNK);
    reconstruction_error(&x, &y).expect("autoencoder preserves shape")
}

/// Mean reconstruction error of a batch already in the native range.
pub fn reconstruction_loss<'t, T: Float>(ae: &Bound<'t, '_, T>, x: Var<'t, T>, mode: BnMode) -> Var<'t, T> {
    ae.forward(x, mode).sub(x).square().mean()
}

/// Mean patch error over all patches of each label.
pub fn validation_errors(ae: &Network<f32>, val: &EvalSet) -> (Option<f64>, Option<f64>) {
    let mut sums = [(0.0, 0usize); 2];
    for item in &val.items {
        let errs = patch_errors(ae, &item.patches);
        let k = usize::from(item.label == Label::Pa);
        sums[k].0 += errs.iter().sum::<f64>();
        sums[k].1 += errs.len();
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    (mean(sums[0]), mean(sums[1]))
}

/// Minimise the mean reconstruction error of bona fide training patches.
pub fn finetune_ae(
    ae: &mut Network<f32>,
    cfg: &AeTrainConfig,
    stream: &mut TrainStream,
    val: Option<&EvalSet>,
    out_dir: Option<&Path>,
) -> Result<AeTrainReport> {
    cfg.validate()?;
    if !matches!(ae.kind(), NetKind::Autoencoder { .. }) {
        return Err(Error::Mode("finetune_ae needs an autoencoder".into()));
    }
    if stream.batch_size() != cfg.batch_size {
        return Err(Error::Config(format!(
            "stream batch size {} differs from ae.batch_size {}",
            stream.batch_size(),
            cfg.batch_size
        )));
    }
    let adam = cfg.adam();
    let mut state = AdamState::for_network(ae);
    let mut report = AeTrainReport::default();
    let per_epoch = stream.batches_per_epoch();
    let start = Instant::now();
    let mut iteration = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..per_epoch {
            iteration += 1;
            let x = native_input(ae.kind(), &stream.next_batch().to_tensor());
            let (loss, grads, stats) = {
                let tape = Tape::new();
                let bound = ae.bind(&tape);
                let loss = reconstruction_loss(&bound, tape.var(x), BnMode::Train);
                let grads: Vec<Tensor<f32>> = tape
                    .grad(loss, &bound.trainable())
                    .iter()
                    .map(|g| (*g.value()).clone())
                    .collect();
                (f64::from(loss.value().item()), grads, bound.take_stats())
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    what: "reconstruction loss",
                    iteration,
                });
            }
            adam_step_network(ae, &grads, &mut state, &adam);
            ae.update_running_stats(&stats);
            report.loss_trace.push(loss);
            total += loss;
        }
        let (val_bona_error, val_pa_error) = match val {
            Some(v) if cfg.track_validation => validation_errors(ae, v),
            _ => (None, None),
        };
        report.epochs.push(AeEpochRecord {
            epoch,
            train_loss: total / per_epoch as f64,
            val_bona_error,
            val_pa_error,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
                let path = dir.join("checkpoints").join(format!("epoch_{epoch:05}"));
                save_checkpoint(ae, cfg.seed, epoch, &path)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("autoencoder");
        save_checkpoint(ae, cfg.seed, cfg.epochs, &path)?;
        report.checkpoints.push(path);
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// `report.json` and `training_curve.csv`.
pub fn write_report(report: &AeTrainReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from("epoch,train_loss,val_bona,val_pa\n");
    for r in &report.epochs {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            opt(r.val_bona_error),
            opt(r.val_pa_error)
        ));
    }
    let path = dir.join("training_curve.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}
