//! Moving trained GAN weights into an autoencoder: the critic's conv stack
//! becomes the encoder and the generator's transposed-conv stack the decoder.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fpad_autograd::Tensor;

use crate::error::{Error, Result};
use crate::models::{
    load_checkpoint, AeVariant, NetKind, NetSpec, Network, Segment, TensorSpec,
};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceNet {
    Critic,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransplantPair {
    pub source_net: SourceNet,
    pub source: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransplantMap {
    pub pairs: Vec<TransplantPair>,
    /// Autoencoder tensors initialised afresh (the bridge layer).
    pub fresh: Vec<String>,
    /// Source tensors left behind: the critic head and generator projection.
    pub excluded: Vec<String>,
}

fn segment_tensors(spec: &NetSpec, segment: Segment) -> Vec<TensorSpec> {
    spec.tensors().into_iter().filter(|t| t.segment == segment).collect()
}

fn pair_segment(
    source_net: SourceNet,
    source: &NetSpec,
    ae: &NetSpec,
    segment: Segment,
    out: &mut Vec<TransplantPair>,
) -> Result<()> {
    let src = segment_tensors(source, segment);
    let dst = segment_tensors(ae, segment);
    for i in 0..src.len().max(dst.len()) {
        match (src.get(i), dst.get(i)) {
            (Some(s), Some(d)) if s.shape == d.shape && s.role == d.role => out.push(TransplantPair {
                source_net,
                source: s.name.clone(),
                target: d.name.clone(),
            }),
            (s, d) => {
                let describe = |t: Option<&TensorSpec>| match t {
                    Some(t) => format!("{} {:?}", t.name, t.shape),
                    None => "nothing".to_string(),
                };
                return Err(Error::ShapeMismatch(format!(
                    "{segment:?} tensor {i}: {source_net:?} has {}, autoencoder has {}",
                    describe(s),
                    describe(d)
                )));
            }
        }
    }
    Ok(())
}

pub fn build_transplant_map(critic: &NetSpec, generator: &NetSpec, ae: &NetSpec) -> Result<TransplantMap> {
    if !matches!(critic.kind, NetKind::Critic { .. }) || generator.kind != NetKind::Generator {
        return Err(Error::Mode("transplant needs a critic and a generator".into()));
    }
    if !matches!(ae.kind, NetKind::Autoencoder { .. }) {
        return Err(Error::Mode("transplant target must be an autoencoder".into()));
    }
    let mut pairs = Vec::new();
    pair_segment(SourceNet::Critic, critic, ae, Segment::Encoder, &mut pairs)?;
    pair_segment(SourceNet::Generator, generator, ae, Segment::Decoder, &mut pairs)?;
    let fresh = segment_tensors(ae, Segment::Bridge).into_iter().map(|t| t.name).collect();
    let excluded = segment_tensors(critic, Segment::Head)
        .into_iter()
        .chain(segment_tensors(generator, Segment::Projection))
        .map(|t| t.name)
        .collect();
    Ok(TransplantMap { pairs, fresh, excluded })
}

/// Copy mapped tensors (batch-norm running statistics included) into `ae`
/// and initialise the bridge from `seed`.
pub fn transplant(
    critic: &Network<f32>,
    generator: &Network<f32>,
    ae: &mut Network<f32>,
    seed: u64,
) -> Result<TransplantMap> {
    let map = build_transplant_map(critic.spec(), generator.spec(), ae.spec())?;
    for p in &map.pairs {
        let src = match p.source_net {
            SourceNet::Critic => critic,
            SourceNet::Generator => generator,
        };
        let value = src.tensor(&p.source).expect("mapped source exists").clone();
        ae.set_tensor(&p.target, value)?;
    }
    ae.init_where(seed, |t| t.segment == Segment::Bridge);
    Ok(map)
}

/// Build the transfer autoencoder matching a pair of GAN checkpoints.
pub fn transplant_checkpoints(
    critic_dir: &Path,
    generator_dir: &Path,
    seed: u64,
) -> Result<(Network<f32>, Network<f32>, Network<f32>, TransplantMap)> {
    let (critic, cmeta) = load_checkpoint(critic_dir)?;
    let (generator, gmeta) = load_checkpoint(generator_dir)?;
    let NetKind::Critic { loss_mode } = cmeta.kind else {
        return Err(Error::Mode(format!("{} does not hold a critic", critic_dir.display())));
    };
    if gmeta.kind != NetKind::Generator {
        return Err(Error::Mode(format!("{} does not hold a generator", generator_dir.display())));
    }
    if cmeta.arch.widths != gmeta.arch.widths {
        return Err(Error::ShapeMismatch(format!(
            "critic widths {:?} differ from generator widths {:?}",
            cmeta.arch.widths, gmeta.arch.widths
        )));
    }
    let mut ae = Network::build(
        NetKind::Autoencoder {
            variant: AeVariant::Transfer { loss_mode },
        },
        &gmeta.arch,
        seed,
    )?;
    let map = transplant(&critic, &generator, &mut ae, seed)?;
    Ok((critic, generator, ae, map))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentCheck {
    pub probe_shape: Vec<usize>,
    pub max_abs_deviation: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub probe_seed: u64,
    pub tolerance: f64,
    pub encoder: SegmentCheck,
    pub decoder: SegmentCheck,
    pub passed: bool,
}

const PROBE_BATCH: usize = 4;

fn check(a: &Tensor<f32>, b: &Tensor<f32>) -> SegmentCheck {
    let dev = if a.shape() == b.shape() {
        f64::from(a.max_abs_diff(b))
    } else {
        f64::INFINITY
    };
    SegmentCheck {
        probe_shape: a.shape().to_vec(),
        max_abs_deviation: dev,
        passed: dev == 0.0,
    }
}

/// Inference-mode probes: encoder against the critic without its head, and
/// decoder against the generator without its projection.
pub fn verify_transplant(
    critic: &Network<f32>,
    generator: &Network<f32>,
    ae: &Network<f32>,
    probe_seed: u64,
) -> VerificationReport {
    let rng = RngStream::new(probe_seed);
    let s = ae.spec().arch.image_size();
    let c = ae.spec().arch.interior_channels();
    let mut r = rng.split_named("images");
    let images = Tensor::from_fn(vec![PROBE_BATCH, 1, s, s], |_| r.uniform(-1.0, 1.0) as f32);
    let mut r = rng.split_named("features");
    let interior = crate::models::INTERIOR;
    let features = Tensor::from_fn(vec![PROBE_BATCH, c, interior, interior], |_| r.normal() as f32);

    let enc = ae.spec().segment_range(Segment::Encoder);
    let encoder = check(
        &ae.infer_range(&images, enc, PROBE_BATCH),
        &critic.infer_range(&images, critic.spec().segment_range(Segment::Encoder), PROBE_BATCH),
    );
    let decoder = check(
        &ae.infer_range(&features, ae.spec().segment_range(Segment::Decoder), PROBE_BATCH),
        &generator.infer_range(&features, generator.spec().segment_range(Segment::Decoder), PROBE_BATCH),
    );
    VerificationReport {
        probe_seed,
        tolerance: 0.0,
        passed: encoder.passed && decoder.passed,
        encoder,
        decoder,
    }
}

#[derive(Serialize)]
struct TransplantReport<'a> {
    map: &'a TransplantMap,
    verification: &'a VerificationReport,
}

pub fn write_transplant_report(map: &TransplantMap, verification: &VerificationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("transplant_report.json");
    let json = serde_json::to_string_pretty(&TransplantReport { map, verification }).expect("report serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}
