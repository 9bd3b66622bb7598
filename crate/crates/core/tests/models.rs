use std::fs;

use fpad_autograd::Tensor;
use fpad_core::models::*;
use fpad_core::Error;

fn arch(widths: &[usize], latent_dim: usize) -> ArchConfig {
    ArchConfig {
        widths: widths.to_vec(),
        latent_dim,
    }
}

/// Trainable parameters, written out layer by layer.
fn closed_form(kind: NetKind, w: &[usize], d: usize) -> usize {
    let c = *w.last().unwrap();
    let conv = |i: usize, o: usize| i * o * 25 + o;
    let bn = |o: usize| 2 * o;
    let encoder = |bn_from: usize| {
        let mut c_in = 1;
        let mut n = 0;
        for (i, &o) in w.iter().enumerate() {
            n += conv(c_in, o) + if i >= bn_from { bn(o) } else { 0 };
            c_in = o;
        }
        n
    };
    let decoder = || {
        let rev: Vec<usize> = w.iter().rev().copied().chain([1]).collect();
        let mut n = 0;
        for i in 0..w.len() {
            n += conv(rev[i], rev[i + 1]);
            if i + 1 < w.len() {
                n += bn(rev[i + 1]);
            }
        }
        n
    };
    let bn_from = |m: LossMode| if m == LossMode::WganGp { usize::MAX } else { 1 };
    match kind {
        NetKind::Generator => d * 16 * c + 16 * c + bn(c) + decoder(),
        NetKind::Critic { loss_mode } => encoder(bn_from(loss_mode)) + 16 * c + 1,
        NetKind::Autoencoder { variant } => {
            let from = match variant {
                AeVariant::Transfer { loss_mode } => bn_from(loss_mode),
                AeVariant::Scratch => 0,
            };
            encoder(from) + conv(c, c) + bn(c) + decoder()
        }
    }
}

fn all_kinds() -> Vec<NetKind> {
    let mut v = vec![NetKind::Generator, NetKind::Autoencoder { variant: AeVariant::Scratch }];
    for m in [LossMode::Dcgan, LossMode::WganGp, LossMode::WganClip] {
        v.push(NetKind::Critic { loss_mode: m });
        v.push(NetKind::Autoencoder {
            variant: AeVariant::Transfer { loss_mode: m },
        });
    }
    v
}

#[test]
fn parameter_counts_match_closed_form() {
    for (w, d) in [(vec![128, 256, 512, 1024], 100), (vec![8, 16, 32, 64], 100), (vec![2, 3], 5)] {
        for kind in all_kinds() {
            let spec = NetSpec::for_kind(kind, &arch(&w, d)).unwrap();
            assert_eq!(spec.trainable_count(), closed_form(kind, &w, d), "{kind:?} {w:?}");
        }
    }
}

#[test]
fn canonical_shapes() {
    let a = ArchConfig::default();
    let g = NetSpec::generator(&a).unwrap();
    assert_eq!(g.input, vec![100]);
    assert_eq!(g.output_shape(), vec![1, 64, 64]);
    let c = NetSpec::critic(&a, LossMode::WganGp).unwrap();
    assert_eq!(c.output_shape(), vec![1]);
    let ae = NetSpec::autoencoder(&a, AeVariant::Scratch).unwrap();
    let shapes = ae.shapes().unwrap();
    let enc_end = ae.segment_range(Segment::Encoder).end;
    assert_eq!(shapes[enc_end], vec![1024, 4, 4]);
    assert_eq!(ae.output_shape(), vec![1, 64, 64]);
}

#[test]
fn weight_init_statistics() {
    let net = build_generator(&arch(&[64, 128], 100), 3).unwrap();
    let weights: Vec<f64> = net
        .tensor_specs()
        .iter()
        .zip(net.tensors())
        .filter(|(s, _)| s.role == TensorRole::Weight)
        .flat_map(|(_, t)| t.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>())
        .collect();
    assert!(weights.len() >= 100_000, "{}", weights.len());
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let std = (weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() <= 0.002, "mean {mean}");
    assert!((std - 0.02).abs() <= 0.002, "std {std}");
    for (s, t) in net.tensor_specs().iter().zip(net.tensors()) {
        let want = match s.role {
            TensorRole::Weight => continue,
            TensorRole::Gamma | TensorRole::RunningVar => 1.0,
            _ => 0.0,
        };
        assert!(t.data().iter().all(|&v| v == want), "{}", s.name);
    }
}

#[test]
fn output_ranges_follow_the_head() {
    let a = arch(&[4, 8], 6);
    let x = Tensor::from_fn(vec![3, 1, 16, 16], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0);
    let g = build_generator(&a, 1).unwrap();
    let out = g.infer(&Tensor::from_fn(vec![3, 6], |i| (i as f32 * 0.7).sin() * 5.0), 8);
    assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let s = build_autoencoder(&a, AeVariant::Scratch, 1).unwrap();
    let x01 = Tensor::from_fn(vec![3, 1, 16, 16], |i| x.data()[i] * 0.5 + 0.5);
    assert!(s.infer(&x01, 8).data().iter().all(|v| (0.0..=1.0).contains(v)));
    let d = build_critic(&a, LossMode::Dcgan, 1).unwrap();
    let p = d.infer(&x, 8);
    assert_eq!(p.shape(), &[3, 1]);
    assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn same_seed_same_weights() {
    let a = arch(&[4, 8], 6);
    let x = build_critic(&a, LossMode::WganGp, 9).unwrap();
    let y = build_critic(&a, LossMode::WganGp, 9).unwrap();
    let z = build_critic(&a, LossMode::WganGp, 10).unwrap();
    assert_eq!(x.max_abs_diff(&y), 0.0);
    assert!(x.max_abs_diff(&z) > 0.0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let a = arch(&[4, 8], 6);
    for kind in all_kinds() {
        let net = Network::<f32>::build(kind, &a, 5).unwrap();
        let sub = dir.path().join(format!("{kind:?}").replace(['{', '}', ' ', ':'], "_"));
        save_checkpoint(&net, 5, 12, &sub).unwrap();
        let (back, meta) = load_checkpoint(&sub).unwrap();
        assert_eq!(meta.kind, kind);
        assert_eq!((meta.seed, meta.epoch), (5, 12));
        for (x, y) in net.tensors().zip(back.tensors()) {
            assert_eq!(x.shape(), y.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }
}

#[test]
fn tampered_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = arch(&[4, 8], 6);
    let net = build_generator(&a, 1).unwrap();
    save_checkpoint(&net, 1, 0, dir.path()).unwrap();

    let blob = dir.path().join("up1.weight.bin");
    let original = fs::read(&blob).unwrap();
    fs::write(&blob, &original[..original.len() - 4]).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(matches!(err, Error::ManifestMismatch(_)));
    assert!(err.to_string().contains("up1.weight"));
    fs::write(&blob, &original).unwrap();

    let manifest = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replacen("\"format\": 1", "\"format\": 2", 1)).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::ManifestMismatch(_))));
    fs::write(&manifest, &text).unwrap();

    let mut other = build_generator(&arch(&[4, 16], 6), 1).unwrap();
    let err = load_into(&mut other, dir.path()).unwrap_err();
    assert!(matches!(err, Error::ManifestMismatch(_)));

    fs::remove_file(&blob).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn manifest_parser_rejects_hostile_names() {
    let body = |name: &str| {
        format!(
            r#"{{"format":1,"metadata":{{"net":"generator","arch":{{"widths":[4],"latent_dim":2}},"seed":0,"epoch":0}},"tensors":[{{"name":"{name}","shape":[1],"dtype":"f32"}}]}}"#
        )
    };
    assert!(Manifest::parse(body("ok.weight").as_bytes()).is_ok());
    for bad in ["../x", "a/b", "", ".hidden"] {
        assert!(Manifest::parse(body(bad).as_bytes()).is_err(), "{bad}");
    }
}

#[test]
fn blob_codec() {
    let v = [0.0f32, -1.5, f32::MIN_POSITIVE, 3.25e7];
    assert_eq!(decode_blob("t", &encode_blob(&v), 4).unwrap(), v);
    assert!(decode_blob("t", &encode_blob(&v), 3).is_err());
}
