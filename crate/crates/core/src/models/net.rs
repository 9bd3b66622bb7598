//! Parameter storage and the forward pass.

use std::cell::RefCell;
use std::ops::Range;
use std::sync::Arc;

use fpad_autograd::{ConvGeom, Float, Tape, Tensor, Var};

use super::spec::{Activation, ArchConfig, LayerKind, NetKind, NetSpec, TensorRole, TensorSpec, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics and report them for the running averages.
    Train,
    /// Normalise with the stored running averages.
    Eval,
}

/// Statistics of one batch-norm layer over one training forward pass.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub layer: usize,
    pub mean: Vec<T>,
    /// Biased (divisor `count`) variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// A network: its spec and one tensor per [`TensorSpec`].
#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: NetSpec,
    specs: Vec<TensorSpec>,
    tensors: Vec<Arc<Tensor<T>>>,
    layer_tensors: Vec<Vec<usize>>,
}

impl<T: Float> Network<T> {
    /// Network with deterministic placeholder values (zeros, unit gamma and
    /// running variance); call [`Network::init_weights`] for a trainable start.
    pub fn new(spec: NetSpec) -> Self {
        let specs = spec.tensors();
        let mut layer_tensors = vec![Vec::new(); spec.layers.len()];
        let tensors = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                layer_tensors[s.layer].push(i);
                let fill = match s.role {
                    TensorRole::Gamma | TensorRole::RunningVar => T::one(),
                    _ => T::zero(),
                };
                Arc::new(Tensor::full(s.shape.clone(), fill))
            })
            .collect();
        Network {
            spec,
            specs,
            tensors,
            layer_tensors,
        }
    }

    pub fn build(kind: NetKind, arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut net = Network::new(NetSpec::for_kind(kind, arch)?);
        net.init_weights(seed);
        Ok(net)
    }

    /// Conv and dense weights from N(0, 0.02), biases and shifts 0, scales 1,
    /// running statistics reset. Each tensor draws from its own substream
    /// keyed by name.
    pub fn init_weights(&mut self, seed: u64) {
        self.init_where(seed, |_| true);
    }

    /// [`Network::init_weights`] restricted to tensors matching `select`.
    pub fn init_where(&mut self, seed: u64, select: impl Fn(&TensorSpec) -> bool) {
        let root = RngStream::new(seed);
        for (s, t) in self.specs.iter().zip(self.tensors.iter_mut()) {
            if !select(s) {
                continue;
            }
            let value = match s.role {
                TensorRole::Weight => {
                    let mut rng = root.split_named(&s.name);
                    Tensor::from_fn(s.shape.clone(), |_| T::of(INIT_STD * rng.normal()))
                }
                TensorRole::Gamma | TensorRole::RunningVar => Tensor::ones(s.shape.clone()),
                TensorRole::Bias | TensorRole::Beta | TensorRole::RunningMean => {
                    Tensor::zeros(s.shape.clone())
                }
            };
            *t = Arc::new(value);
        }
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn kind(&self) -> NetKind {
        self.spec.kind
    }

    pub fn tensor_specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter().map(|t| t.as_ref())
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.tensors[i].as_ref())
    }

    /// Replace a tensor, checking its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::ManifestMismatch(format!("no tensor named {name}")))?;
        if value.shape() != self.specs[i].shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: expected {:?}, got {:?}",
                self.specs[i].shape,
                value.shape()
            )));
        }
        self.tensors[i] = Arc::new(value);
        Ok(())
    }

    /// Indices of the trainable tensors, in spec order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.specs.len())
            .filter(|&i| self.specs[i].role.trainable())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_indices()
            .iter()
            .map(|&i| self.tensors[i].numel())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            layer_tensors: self.layer_tensors.clone(),
        }
    }

    /// Largest absolute difference over all tensors of two same-spec nets.
    pub fn max_abs_diff(&self, other: &Network<T>) -> T {
        assert_eq!(self.spec, other.spec, "networks differ in spec");
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }

    /// Fold one training pass's batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BnBatchStats<T>]) {
        let m = T::of(BN_MOMENTUM);
        for s in stats {
            let idx = &self.layer_tensors[s.layer];
            let (rm, rv) = (idx[2], idx[3]);
            let unbias = if s.count > 1 {
                T::of(s.count as f64 / (s.count as f64 - 1.0))
            } else {
                T::one()
            };
            for (r, &v) in self.tensor_at_mut(rm).data_mut().iter_mut().zip(&s.mean) {
                *r = (T::one() - m) * *r + m * v;
            }
            for (r, &v) in self.tensor_at_mut(rv).data_mut().iter_mut().zip(&s.var) {
                *r = (T::one() - m) * *r + m * v * unbias;
            }
        }
    }

    /// Record every tensor on `tape` for one forward (and backward) pass.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, '_, T> {
        let vars = self.tensors.iter().map(|t| tape.var_shared(t.clone())).collect();
        Bound {
            net: self,
            tape,
            vars,
            stats: RefCell::new(Vec::new()),
        }
    }

    /// Inference-mode forward of a whole batch, processed in chunks.
    pub fn infer(&self, x: &Tensor<T>, chunk: usize) -> Tensor<T> {
        self.infer_range(x, 0..self.spec.layers.len(), chunk)
    }

    pub fn infer_range(&self, x: &Tensor<T>, layers: Range<usize>, chunk: usize) -> Tensor<T> {
        let n = x.batch();
        let per = x.numel() / n.max(1);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(shape, x.data()[start * per..end * per].to_vec());
            let tape = Tape::new();
            let bound = self.bind(&tape);
            let y = bound.forward_range(tape.var(part), layers.clone(), BnMode::Eval);
            parts.push((*y.value()).clone());
            start = end;
        }
        if parts.is_empty() {
            let mut shape = vec![0];
            shape.extend(self.spec.shapes().expect("checked")[layers.end].iter());
            return Tensor::new(shape, Vec::new());
        }
        let mut shape = parts[0].shape().to_vec();
        shape[0] = n;
        let data = parts.into_iter().flat_map(|p| p.into_data()).collect();
        Tensor::new(shape, data)
    }
}

/// A network recorded on a tape.
pub struct Bound<'t, 'n, T: Float> {
    net: &'n Network<T>,
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
    stats: RefCell<Vec<BnBatchStats<T>>>,
}

impl<'t, T: Float> Bound<'t, '_, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn network(&self) -> &Network<T> {
        self.net
    }

    /// Vars of the trainable tensors, aligned with
    /// [`Network::trainable_indices`].
    pub fn trainable(&self) -> Vec<Var<'t, T>> {
        self.net
            .trainable_indices()
            .into_iter()
            .map(|i| self.vars[i])
            .collect()
    }

    pub fn var_of(&self, name: &str) -> Option<Var<'t, T>> {
        self.net.index_of(name).map(|i| self.vars[i])
    }

    /// Batch statistics gathered by training-mode passes so far.
    pub fn take_stats(&self) -> Vec<BnBatchStats<T>> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }

    pub fn forward(&self, x: Var<'t, T>, mode: BnMode) -> Var<'t, T> {
        self.forward_range(x, 0..self.net.spec.layers.len(), mode)
    }

    pub fn forward_range(&self, mut x: Var<'t, T>, layers: Range<usize>, mode: BnMode) -> Var<'t, T> {
        for i in layers {
            x = self.layer(i, x, mode);
        }
        x
    }

    fn param(&self, layer: usize, k: usize) -> Var<'t, T> {
        self.vars[self.net.layer_tensors[layer][k]]
    }

    fn layer(&self, i: usize, x: Var<'t, T>, mode: BnMode) -> Var<'t, T> {
        let shape = x.shape();
        let n = shape[0];
        match self.net.spec.layers[i].kind {
            LayerKind::Dense { .. } => {
                let y = x.matmul(self.param(i, 0), false, true);
                let ys = y.shape();
                y.add(self.param(i, 1).expand_per_channel(&ys))
            }
            LayerKind::Reshape {
                channels,
                height,
                width,
            } => x.reshape(vec![n, channels, height, width]),
            LayerKind::Flatten => x.reshape(vec![n, shape[1..].iter().product()]),
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let g = ConvGeom::new(in_channels, out_channels, kernel, stride, padding, shape[2], shape[3]);
                let y = x.conv2d(self.param(i, 0), &g);
                let ys = y.shape();
                y.add(self.param(i, 1).expand_per_channel(&ys))
            }
            LayerKind::TransposedConv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
            } => {
                let o = |d: usize| (d - 1) * stride + kernel + output_padding - 2 * padding;
                let g = ConvGeom::new(out_channels, in_channels, kernel, stride, padding, o(shape[2]), o(shape[3]));
                debug_assert_eq!((g.out_h, g.out_w), (shape[2], shape[3]));
                let y = x.conv2d_bwd_data(self.param(i, 0), &g);
                let ys = y.shape();
                y.add(self.param(i, 1).expand_per_channel(&ys))
            }
            LayerKind::BatchNorm { .. } => self.batch_norm(i, x, &shape, mode),
            LayerKind::Activation(a) => match a {
                Activation::LeakyRelu => x.leaky_relu(T::of(LEAKY_SLOPE)),
                Activation::Relu => x.relu(),
                Activation::Tanh => x.tanh(),
                Activation::Sigmoid => x.sigmoid(),
                Activation::Linear => x,
            },
        }
    }

    fn batch_norm(&self, i: usize, x: Var<'t, T>, shape: &[usize], mode: BnMode) -> Var<'t, T> {
        let (gamma, beta) = (self.param(i, 0), self.param(i, 1));
        match mode {
            BnMode::Train => {
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let inv_count = T::one() / T::of(count as f64);
                let mean = x.sum_per_channel().scale(inv_count);
                let centred = x.sub(mean.expand_per_channel(shape));
                let var = centred.square().sum_per_channel().scale(inv_count);
                let inv_std = var.add_scalar(T::of(BN_EPS)).sqrt().recip();
                self.stats.borrow_mut().push(BnBatchStats {
                    layer: i,
                    mean: mean.value().data().to_vec(),
                    var: var.value().data().to_vec(),
                    count,
                });
                centred
                    .mul(inv_std.mul(gamma).expand_per_channel(shape))
                    .add(beta.expand_per_channel(shape))
            }
            BnMode::Eval => {
                let (rm, rv) = (self.param(i, 2), self.param(i, 3));
                let scale = rv.add_scalar(T::of(BN_EPS)).sqrt().recip().mul(gamma);
                let shift = beta.sub(rm.mul(scale));
                x.mul(scale.expand_per_channel(shape))
                    .add(shift.expand_per_channel(shape))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::spec::{AeVariant, LossMode};

    fn small() -> ArchConfig {
        ArchConfig {
            widths: vec![2, 3],
            latent_dim: 5,
        }
    }

    #[test]
    fn generator_output_is_tanh_bounded() {
        let g = Network::<f32>::build(NetKind::Generator, &small(), 1).unwrap();
        let z = Tensor::from_fn(vec![3, 5], |i| (i as f32 * 1.7).sin() * 40.0);
        let y = g.infer(&z, 8);
        assert_eq!(y.shape(), &[3, 1, 16, 16]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn dcgan_critic_scores_are_probabilities() {
        let c = Network::<f32>::build(NetKind::Critic { loss_mode: LossMode::Dcgan }, &small(), 2).unwrap();
        let x = Tensor::from_fn(vec![4, 1, 16, 16], |i| ((i * 7) % 13) as f32 / 6.5 - 1.0);
        let y = c.infer(&x, 8);
        assert_eq!(y.shape(), &[4, 1]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn eval_mode_ignores_batch_composition() {
        let ae = Network::<f32>::build(NetKind::Autoencoder { variant: AeVariant::Scratch }, &small(), 3).unwrap();
        let x = Tensor::from_fn(vec![4, 1, 16, 16], |i| ((i * 5) % 11) as f32 / 11.0);
        let all = ae.infer(&x, 4);
        let one_by_one = ae.infer(&x, 1);
        assert_eq!(all, one_by_one);
    }

    #[test]
    fn training_stats_move_running_averages() {
        let mut ae = Network::<f32>::build(NetKind::Autoencoder { variant: AeVariant::Scratch }, &small(), 3).unwrap();
        let before = ae.clone();
        let x = Tensor::from_fn(vec![4, 1, 16, 16], |i| ((i * 5) % 11) as f32 / 11.0);
        let tape = Tape::new();
        let bound = ae.bind(&tape);
        bound.forward(tape.var(x.clone()), BnMode::Eval);
        assert!(bound.take_stats().is_empty());
        bound.forward(tape.var(x), BnMode::Train);
        let stats = bound.take_stats();
        drop(bound);
        assert!(!stats.is_empty());
        ae.update_running_stats(&stats);
        let rm = ae.index_of("bridge_bn.running_mean").unwrap();
        assert_ne!(ae.tensor_at(rm), before.tensor_at(rm));
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::<f32>::build(NetKind::Generator, &small(), 7).unwrap();
        let b = Network::<f32>::build(NetKind::Generator, &small(), 7).unwrap();
        let c = Network::<f32>::build(NetKind::Generator, &small(), 8).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
        assert!(a.max_abs_diff(&c) > 0.0);
        assert!(a.tensor("up1.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.tensor("project_bn.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    }
}
