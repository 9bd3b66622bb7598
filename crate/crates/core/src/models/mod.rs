//! Generator, critic and autoencoder networks.
//!
//! All nets are built from one [`ArchConfig`]: a chain of 5x5 stride-2
//! convolutions from a single-channel image down to a `4x4` interior map, and
//! the mirrored chain of transposed convolutions back up. The autoencoder
//! reuses both chains around a stride-1 bridge convolution, so critic and
//! generator weights can be copied into it unchanged.

mod checkpoint;
mod net;
mod spec;

pub use checkpoint::{
    decode_blob, encode_blob, load_checkpoint, load_into, read_manifest, save_checkpoint,
    CheckpointMeta, Manifest, TensorEntry, FORMAT_VERSION, MANIFEST_FILE,
};
pub use net::{BnBatchStats, BnMode, Bound, Network, BN_EPS, BN_MOMENTUM, INIT_STD};
pub use spec::{
    Activation, AeVariant, ArchConfig, LayerKind, LayerSpec, LossMode, NetKind, NetSpec, Segment,
    TensorRole, TensorSpec, INTERIOR, KERNEL, LEAKY_SLOPE,
};

use crate::error::Result;

pub fn build_generator(arch: &ArchConfig, seed: u64) -> Result<Network<f32>> {
    Network::build(NetKind::Generator, arch, seed)
}

pub fn build_critic(arch: &ArchConfig, loss_mode: LossMode, seed: u64) -> Result<Network<f32>> {
    Network::build(NetKind::Critic { loss_mode }, arch, seed)
}

pub fn build_autoencoder(arch: &ArchConfig, variant: AeVariant, seed: u64) -> Result<Network<f32>> {
    Network::build(NetKind::Autoencoder { variant }, arch, seed)
}
