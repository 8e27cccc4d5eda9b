use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strf::backbone::{count_params, BlockSpec, BlockVariant, Mode, Network, NetworkSpec, ResidualBlock, RESNET50_BLOCKS};
use strf::strf::{strf_param_count, StrfConfig};
use strf::{Tape, Tensor};

fn clips(dims: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Closed-form learnable count of the inflated ResNet-50: convs without
/// bias, two affine scalars per batch-norm channel, linear classifier.
fn resnet50_count(variant_on: &[usize], variant: BlockVariant, strf_on: &[usize], classes: usize) -> usize {
    let bn = |c: usize| 2 * c;
    let mut total = 3 * 64 * 49 + bn(64);
    let mut cin = 64;
    for (i, (&blocks, &width)) in RESNET50_BLOCKS.iter().zip(&[256usize, 512, 1024, 2048]).enumerate() {
        let b = width / 4;
        for j in 0..blocks {
            total += cin * b + bn(b);
            total += 9 * b * b + bn(b);
            if variant_on.contains(&(i + 1)) {
                assert_eq!(variant, BlockVariant::P3DC);
                total += 3 * b * b + bn(b);
            }
            if strf_on.contains(&(i + 1)) {
                total += 4 * b * (b / 16);
            }
            total += b * width + bn(width);
            if j == 0 {
                total += cin * width + bn(width);
            }
            cin = width;
        }
    }
    total + 2048 * classes + classes
}

#[test]
fn full_scale_counts_match_closed_form() {
    let c2d = count_params(&NetworkSpec::resnet50(BlockVariant::C2D, &[], &[], 625).unwrap()).unwrap();
    let p3dc = count_params(&NetworkSpec::resnet50(BlockVariant::P3DC, &[2, 3], &[], 625).unwrap()).unwrap();
    let strf = count_params(&NetworkSpec::resnet50(BlockVariant::P3DC, &[2, 3], &[2, 3], 625).unwrap()).unwrap();
    assert_eq!(c2d.total, resnet50_count(&[], BlockVariant::P3DC, &[], 625));
    assert_eq!(p3dc.total, resnet50_count(&[2, 3], BlockVariant::P3DC, &[], 625));
    assert_eq!(strf.total, resnet50_count(&[2, 3], BlockVariant::P3DC, &[2, 3], 625));
    assert_eq!(c2d.total, 24_788_657);
    assert_eq!(strf.total - p3dc.total, 114_688);
    assert_eq!(strf.strf_total(), 114_688);
}

#[test]
fn one_unit_on_a_128_channel_bottleneck() {
    assert_eq!(strf_param_count(128, 16), 4096);
    let spec = BlockSpec {
        variant: BlockVariant::P3DC,
        in_width: 512,
        out_width: 512,
        spatial_stride: 1,
        strf: Some(StrfConfig::default()),
    };
    let with = ResidualBlock::<f32>::build(&spec, 0).unwrap();
    let without = ResidualBlock::<f32>::build(&BlockSpec { strf: None, ..spec }, 0).unwrap();
    let learnable = |b: &ResidualBlock<f32>| -> usize {
        b.params().iter().filter(|p| p.spec.role.learnable()).map(|p| p.spec.numel()).sum()
    };
    assert_eq!(learnable(&with) - learnable(&without), 4096);
}

#[test]
fn c2d_block_preserves_temporal_constancy() {
    let spec = BlockSpec {
        variant: BlockVariant::C2D,
        in_width: 16,
        out_width: 32,
        spatial_stride: 2,
        strf: None,
    };
    let block = ResidualBlock::<f64>::build(&spec, 3).unwrap();
    let frame = clips(&[1, 16, 1, 6, 4], 1);
    let x = Tensor::from_fn(&[1, 16, 5, 6, 4], |i| {
        let (c, rest) = (i / 120, i % 24);
        frame.data()[c * 24 + rest] as f64
    });
    let tape = Tape::new();
    let y = block.forward(&tape, &tape.constant(x), Mode::Eval).unwrap();
    let y = y.value();
    assert_eq!(y.dims(), &[1, 32, 5, 3, 2]);
    let plane = 6;
    for c in 0..32 {
        for t in 1..5 {
            for s in 0..plane {
                let a = y.data()[(c * 5) * plane + s];
                let b = y.data()[(c * 5 + t) * plane + s];
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn temporal_variants_mix_frames() {
    for variant in [BlockVariant::I3D, BlockVariant::P3DA, BlockVariant::P3DB, BlockVariant::P3DC] {
        let spec = BlockSpec {
            variant,
            in_width: 16,
            out_width: 16,
            spatial_stride: 1,
            strf: None,
        };
        let block = ResidualBlock::<f64>::build(&spec, 3).unwrap();
        let mut x = Tensor::<f64>::zeros(&[1, 16, 3, 4, 4]);
        let base = clips(&[1, 16, 3, 4, 4], 2);
        let mut bumped = x.clone();
        for (i, v) in base.data().iter().enumerate() {
            x.data_mut()[i] = *v as f64;
            bumped.data_mut()[i] = *v as f64 + if (i / 16) % 3 == 0 { 1.0 } else { 0.0 };
        }
        let tape = Tape::new();
        let a = block.forward(&tape, &tape.constant(x), Mode::Eval).unwrap().value().clone();
        let b = block.forward(&tape, &tape.constant(bumped), Mode::Eval).unwrap().value().clone();
        // perturbing frame 0 reaches frame 1 through the temporal convolution
        let frame1 = |v: &Tensor<f64>| -> Vec<f64> { (0..16).flat_map(|c| v.data()[(c * 3 + 1) * 16..(c * 3 + 2) * 16].to_vec()).collect() };
        let diff: f64 = frame1(&a).iter().zip(frame1(&b)).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff > 1e-6, "{variant}");
    }
}

#[test]
fn toy_forward_shapes_and_purity() {
    let spec = NetworkSpec::toy(BlockVariant::P3DC, true, 5).unwrap();
    let net = Network::<f32>::build(&spec, 0).unwrap();
    let x = clips(&[2, 3, 8, 64, 32], 4);
    let cap = net.capture(&x).unwrap();
    assert_eq!(cap.features.value().dims(), &[2, 128]);
    assert_eq!(cap.logits.value().dims(), &[2, 5]);
    let a = net.forward_features(&x).unwrap();
    let b = net.forward_features(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a, cap.features.value());

    let plain = Network::<f32>::build(&spec.without_strf(), 0).unwrap();
    let pc = plain.capture(&x).unwrap();
    for s in 1..=4 {
        assert_eq!(cap.stage_activation(s).unwrap().dims(), pc.stage_activation(s).unwrap().dims());
    }
}

#[test]
fn builds_are_deterministic_per_seed() {
    let spec = NetworkSpec::toy(BlockVariant::P3DC, true, 5).unwrap();
    let a = Network::<f32>::build(&spec, 9).unwrap();
    let b = Network::<f32>::build(&spec, 9).unwrap();
    let c = Network::<f32>::build(&spec, 10).unwrap();
    let same = a.params().iter().zip(b.params()).all(|(p, q)| p.value == q.value);
    let differs = a.params().iter().zip(c.params()).any(|(p, q)| p.value != q.value);
    assert!(same && differs);
}

#[test]
fn strf_weights_reach_the_embedding() {
    let spec = NetworkSpec::toy(BlockVariant::P3DC, true, 5).unwrap();
    let mut net = Network::<f32>::build(&spec, 0).unwrap();
    let x = clips(&[1, 3, 4, 64, 32], 5);
    let before = net.forward_features(&x).unwrap();
    let units = net.strf_units();
    assert_eq!(units.len(), 2);
    for idx in units.into_iter().flatten() {
        let w = net.params()[idx].value.map(|v| v * 3.0 + 0.5);
        net.set_param(idx, w).unwrap();
    }
    let after = net.forward_features(&x).unwrap();
    assert!(before.max_abs_diff(&after) > 1e-6);
}

#[test]
fn full_scale_forward_shape_ladder() {
    let spec = NetworkSpec::resnet50(BlockVariant::P3DC, &[2, 3], &[2, 3], 625).unwrap();
    let net = Network::<f32>::build(&spec, 0).unwrap();
    let cap = net.capture(&clips(&[1, 3, 4, 256, 128], 6)).unwrap();
    assert_eq!(cap.stem_capture.as_ref().unwrap().dims(), &[1, 64, 4, 64, 32]);
    let ladder = [(256, 64, 32), (512, 32, 16), (1024, 16, 8), (2048, 16, 8)];
    for (s, (c, h, w)) in ladder.into_iter().enumerate() {
        assert_eq!(cap.stage_activation(s + 1).unwrap().dims(), &[1, c, 4, h, w]);
    }
    assert_eq!(cap.features.value().dims(), &[1, 2048]);
    assert!(cap.features.value().data().iter().all(|v| v.is_finite()));
}
