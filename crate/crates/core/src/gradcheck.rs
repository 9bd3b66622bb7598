//! Finite-difference checks of training objectives on small double-precision
//! networks.

use serde::Serialize;

use fpad_autograd::check::{central_differences, compare, GradCheckReport};
use fpad_autograd::{Tape, Tensor, Var};

use crate::aetrain::reconstruction_loss;
use crate::gantrain::{critic_objective, draw_epsilons, generator_objective, sample_latents};
use crate::models::{AeVariant, ArchConfig, BnMode, Bound, LossMode, NetKind, Network, TensorRole};
use crate::rng::{derive_seed, RngStream};

pub const STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely. Central
/// differences at `STEP` carry rounding noise near `1e-10`.
pub const FLOOR: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub name: String,
    pub parameters: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckSummary {
    pub fn new(name: impl Into<String>, report: &GradCheckReport) -> Self {
        GradCheckSummary {
            name: name.into(),
            parameters: report.checked,
            max_abs_error: report.max_abs_error,
            max_rel_error: report.max_rel_error,
            tolerance: TOLERANCE,
            passed: report.passes(TOLERANCE),
        }
    }
}

/// Compare the tape gradient of `objective` with respect to every trainable
/// tensor of the `wrt` networks against central differences. `objective`
/// receives the bound `wrt` networks followed by the bound `fixed` ones.
pub fn check_objective<F>(wrt: &[&Network<f64>], fixed: &[&Network<f64>], objective: F) -> GradCheckReport
where
    F: for<'t, 'n> Fn(&[Bound<'t, 'n, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let bound: Vec<_> = wrt.iter().chain(fixed).map(|n| n.bind(&tape)).collect();
    let out = objective(&bound);
    let vars: Vec<_> = bound[..wrt.len()].iter().flat_map(|b| b.trainable()).collect();
    let analytic: Vec<Tensor<f64>> = tape.grad(out, &vars).iter().map(|g| (*g.value()).clone()).collect();
    drop(bound);

    let slots: Vec<(usize, usize)> = wrt
        .iter()
        .enumerate()
        .flat_map(|(k, n)| n.trainable_indices().into_iter().map(move |i| (k, i)))
        .collect();
    let params: Vec<Tensor<f64>> = slots.iter().map(|&(k, i)| wrt[k].tensor_at(i).clone()).collect();
    let mut work: Vec<Network<f64>> = wrt.iter().map(|n| (*n).clone()).collect();
    let numeric = central_differences(&params, STEP, |ps| {
        for (&(k, i), p) in slots.iter().zip(ps) {
            *work[k].tensor_at_mut(i) = p.clone();
        }
        let tape = Tape::new();
        let bound: Vec<_> = work.iter().chain(fixed.iter().copied()).map(|n| n.bind(&tape)).collect();
        objective(&bound).value().item()
    });
    compare(&analytic, &numeric, FLOOR)
}

/// Same layer kinds as the canonical networks at widths `[2, 2]`, 16x16
/// images and a 4-dimensional latent.
pub fn reduced_arch() -> ArchConfig {
    ArchConfig {
        widths: vec![2, 2],
        latent_dim: 4,
    }
}

/// Multiplier on the initial weights so that activations are not all in
/// the near-linear range around zero.
const WEIGHT_GAIN: f64 = 10.0;

fn reduced(kind: NetKind, seed: u64) -> Network<f64> {
    let mut net = Network::<f64>::build(kind, &reduced_arch(), seed).expect("reduced arch is valid");
    for i in 0..net.tensor_specs().len() {
        if net.tensor_specs()[i].role == TensorRole::Weight {
            let t = net.tensor_at(i).map(|v| v * WEIGHT_GAIN);
            *net.tensor_at_mut(i) = t;
        }
    }
    net
}

fn probe_images(n: usize, rng: &mut RngStream) -> Tensor<f64> {
    let s = reduced_arch().image_size();
    Tensor::from_fn(vec![n, 1, s, s], |_| rng.uniform(-1.0, 1.0))
}

const PROBE_BATCH: usize = 4;
const GP_LAMBDA: f64 = 10.0;

/// Mean reconstruction error of a reduced autoencoder.
pub fn check_reconstruction(seed: u64) -> GradCheckSummary {
    let kind = NetKind::Autoencoder {
        variant: AeVariant::Transfer {
            loss_mode: LossMode::Dcgan,
        },
    };
    let ae = reduced(kind, seed);
    let x = probe_images(PROBE_BATCH, &mut RngStream::new(seed).split_named("probe"));
    let report = check_objective(&[&ae], &[], |b| {
        let xv = b[0].tape().var(x.clone());
        reconstruction_loss(&b[0], xv, BnMode::Train)
    });
    GradCheckSummary::new("reconstruction_mse", &report)
}

/// Critic and generator objectives of `mode` on reduced networks.
pub fn check_adversarial(mode: LossMode, seed: u64) -> Vec<GradCheckSummary> {
    let rng = RngStream::new(seed);
    let generator = reduced(NetKind::Generator, derive_seed(seed, 1));
    let critic = reduced(NetKind::Critic { loss_mode: mode }, derive_seed(seed, 2));
    let real = probe_images(PROBE_BATCH, &mut rng.split_named("real"));
    let z: Tensor<f64> = sample_latents(PROBE_BATCH, reduced_arch().latent_dim, &mut rng.split_named("z"));
    let fake = generator.infer(&z, PROBE_BATCH);
    let eps: Vec<f64> = draw_epsilons(PROBE_BATCH, &mut rng.split_named("eps"));

    let critic_report = check_objective(&[&critic], &[], |b| {
        critic_objective(&b[0], &real, &fake, &eps, GP_LAMBDA).expect("critic objective")
    });
    let generator_report = check_objective(&[&generator], &[&critic], |b| {
        let zv = b[0].tape().var(z.clone());
        generator_objective(&b[0], &b[1], zv).expect("generator objective")
    });
    vec![
        GradCheckSummary::new(format!("{mode}_critic"), &critic_report),
        GradCheckSummary::new(format!("{mode}_generator"), &generator_report),
    ]
}

/// Every objective used in training.
pub fn check_all(seed: u64) -> Vec<GradCheckSummary> {
    let mut out = vec![check_reconstruction(seed)];
    for mode in [LossMode::Dcgan, LossMode::WganGp, LossMode::WganClip] {
        out.extend(check_adversarial(mode, seed));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_nets_are_small() {
        for kind in [
            NetKind::Generator,
            NetKind::Critic { loss_mode: LossMode::Dcgan },
            NetKind::Autoencoder { variant: AeVariant::Transfer { loss_mode: LossMode::Dcgan } },
        ] {
            let n = reduced(kind, 1).parameter_count();
            assert!(n <= 500, "{kind:?} has {n} parameters");
        }
    }
}
