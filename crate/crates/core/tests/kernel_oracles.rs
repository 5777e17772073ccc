//! Forward kernels against straight-line reimplementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereo3d_core::stereo_core::{
    conv_affine_forward, correlation_volume, decoder_forward, msf_forward, Activation, ConvParams, ConvSpec,
    CorrelationVolume, DecoderConfig, DecoderWeights, DepthFeature, FeatureMap, InvertedResidual, MsfConfig,
    MsfWeights, WeightStore,
};

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Direct summation: loops in the textbook order, weights read by index.
fn naive_conv(x: &FeatureMap, p: &ConvParams) -> FeatureMap {
    let s = p.spec;
    let oh = (x.h + 2 * s.padding - s.k) / s.stride + 1;
    let ow = (x.w + 2 * s.padding - s.k) / s.stride + 1;
    let ipg = s.in_c / s.groups;
    let opg = s.out_c / s.groups;
    FeatureMap::from_fn(oh, ow, s.out_c, |oy, ox, oc| {
        let g = oc / opg;
        let mut acc = 0.0;
        for ic in 0..ipg {
            for ky in 0..s.k {
                for kx in 0..s.k {
                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                    let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                        let w = p.kernels[((oc * ipg + ic) * s.k + ky) * s.k + kx];
                        acc += w * x.get(iy as usize, ix as usize, g * ipg + ic);
                    }
                }
            }
        }
        let v = (acc + p.bias[oc]) * p.affine_scale[oc] + p.affine_shift[oc];
        match s.activation {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
            Activation::Relu6 => v.max(0.0).min(6.0),
        }
    })
}

fn naive_block(x: &FeatureMap, b: &InvertedResidual) -> FeatureMap {
    let y = naive_conv(&naive_conv(&naive_conv(x, &b.expand), &b.depthwise), &b.project);
    if b.depthwise.spec.stride == 1 && y.shape() == x.shape() {
        FeatureMap::from_fn(y.h, y.w, y.c, |i, j, c| y.get(i, j, c) + x.get(i, j, c))
    } else {
        y
    }
}

fn naive_concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    FeatureMap::from_fn(a.h, a.w, a.c + b.c, |i, j, c| if c < a.c { a.get(i, j, c) } else { b.get(i, j, c - a.c) })
}

fn naive_upsample(x: &FeatureMap) -> FeatureMap {
    FeatureMap::from_fn(2 * x.h, 2 * x.w, x.c, |i, j, c| x.get(i / 2, j / 2, c))
}

fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn correlation_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..30 {
        let (h, w, c) = (rng.gen_range(1..10), rng.gen_range(1..20), rng.gen_range(1..8));
        let d = rng.gen_range(1..8);
        let l = random_map(&mut rng, h, w, c);
        let r = random_map(&mut rng, h, w, c);
        let cv = correlation_volume(&l, &r, d).unwrap();
        for y in 0..h {
            for x in 0..w {
                for dd in 0..d {
                    let mut expected = 0.0;
                    if x >= dd {
                        for ch in 0..c {
                            expected += l.get(y, x, ch) * r.get(y, x - dd, ch);
                        }
                        expected /= c as f64;
                    }
                    assert!((cv.get(y, x, dd) - expected).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn random_3x3_conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, groups, act) in [(1, 1, Activation::None), (2, 1, Activation::Relu), (1, 4, Activation::Relu6), (2, 4, Activation::None)] {
        let spec = ConvSpec {
            groups,
            ..ConvSpec::new(8, 12, 3, stride, act)
        };
        let mut sample = || rng.gen_range(-1.0..1.0);
        let p = ConvParams::init_with(spec, &mut sample).unwrap();
        let x = random_map(&mut rng, 9, 11, 8);
        let got = conv_affine_forward(&x, &p).unwrap();
        assert!(max_abs_diff(&got, &naive_conv(&x, &p)) <= 1e-9);
    }
}

fn small_msf(rng: &mut ChaCha8Rng) -> MsfWeights {
    let config = MsfConfig {
        disparities: [8, 4, 2],
        down4_out: 6,
        down8_out: 10,
        expand_ratio: 2,
    };
    let mut sample = || rng.gen_range(-1.0..1.0);
    MsfWeights::init_with(config, &mut sample).unwrap()
}

#[test]
fn msf_matches_independent_block_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = small_msf(&mut rng);
    let (h, wd) = (16, 24);
    let cv4 = CorrelationVolume(random_map(&mut rng, h, wd, 8));
    let cv8 = CorrelationVolume(random_map(&mut rng, h / 2, wd / 2, 4));
    let cv16 = CorrelationVolume(random_map(&mut rng, h / 4, wd / 4, 2));
    let got = msf_forward(&cv4, &cv8, &cv16, &w).unwrap();

    let l8 = naive_concat(&naive_block(cv4.map(), &w.down4), cv8.map());
    let l16 = naive_concat(&naive_block(&l8, &w.down8), cv16.map());
    let expected = naive_block(&l16, &w.fuse);
    assert_eq!(got.shape(), (4, 6, 512));
    assert!(max_abs_diff(got.map(), &expected) <= 1e-6);

    // zero volumes with zero biases and shifts give zero features
    let mut zeroed = w.clone();
    for b in [&mut zeroed.down4, &mut zeroed.down8, &mut zeroed.fuse] {
        for c in [&mut b.expand, &mut b.depthwise, &mut b.project] {
            c.bias.iter_mut().for_each(|v| *v = 0.0);
            c.affine_shift.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let z = |m: &CorrelationVolume| CorrelationVolume(FeatureMap::zeros(m.map().h, m.map().w, m.map().c));
    let out = msf_forward(&z(&cv4), &z(&cv8), &z(&cv16), &zeroed).unwrap();
    assert!(out.map().data.iter().all(|&v| v == 0.0));
}

#[test]
fn msf_rejects_inconsistent_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = small_msf(&mut rng);
    let cv4 = CorrelationVolume(random_map(&mut rng, 16, 24, 8));
    let cv8 = CorrelationVolume(random_map(&mut rng, 7, 12, 4));
    let cv16 = CorrelationVolume(random_map(&mut rng, 4, 6, 2));
    assert!(msf_forward(&cv4, &cv8, &cv16, &w).is_err());
    let wrong_d = CorrelationVolume(random_map(&mut rng, 8, 12, 5));
    assert!(msf_forward(&cv4, &wrong_d, &cv16, &w).is_err());
}

#[test]
fn decoder_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = DecoderConfig {
        mid_channels: 6,
        ..DecoderConfig::with_outputs(7)
    };
    let mut sample = || rng.gen_range(-1.0..1.0);
    let w = DecoderWeights::init_with(cfg, &mut sample).unwrap();
    let f = DepthFeature::new(random_map(&mut rng, 3, 5, 512)).unwrap();
    let got = decoder_forward(&f, &w, 7).unwrap();
    let expected = naive_conv(&naive_upsample(&naive_conv(&naive_upsample(f.map()), &w.stage1)), &w.stage2);
    assert_eq!(got.shape(), (12, 20, 7));
    assert!(max_abs_diff(&got, &expected) <= 1e-6);
    assert!(decoder_forward(&f, &w, 80).is_err());
}

#[test]
fn decoder_propagates_constants() {
    // 1x1 averaging kernels, no bias: a constant map stays constant
    let cfg = DecoderConfig {
        mid_channels: 4,
        out_channels: 3,
        stage1_kernel: 1,
        stage2_kernel: 1,
    };
    let [s1, s2] = cfg.specs();
    let avg = |spec: ConvSpec| {
        let n = spec.kernel_len();
        ConvParams::new(spec, vec![1.0 / spec.in_c as f64; n], vec![0.0; spec.out_c], vec![1.0; spec.out_c], vec![0.0; spec.out_c]).unwrap()
    };
    let w = DecoderWeights { stage1: avg(s1), stage2: avg(s2) };
    let f = DepthFeature::new(FeatureMap::from_fn(2, 3, 512, |_, _, _| 0.75)).unwrap();
    let out = decoder_forward(&f, &w, 3).unwrap();
    assert!(out.data.iter().all(|&v| (v - 0.75).abs() < 1e-12));
}

#[test]
fn weights_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let msf = small_msf(&mut rng);
    let mut sample = || rng.gen_range(-1.0..1.0);
    let dec = DecoderWeights::init_with(DecoderConfig::depth_head(), &mut sample).unwrap();
    let mut store = WeightStore::new();
    msf.to_store(&mut store, "msf");
    dec.to_store(&mut store, "depth_decoder");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.bin");
    store.save(&path).unwrap();
    let back = WeightStore::load(&path).unwrap();
    let msf2 = MsfWeights::from_store(&back, "msf", msf.config).unwrap();
    let dec2 = DecoderWeights::from_store(&back, "depth_decoder", DecoderConfig::depth_head()).unwrap();
    // stored as f32
    let close = |a: &ConvParams, b: &ConvParams| a.kernels.iter().zip(&b.kernels).all(|(x, y)| (x - y).abs() < 1e-6);
    assert!(close(&msf.fuse.project, &msf2.fuse.project));
    assert!(close(&dec.stage2, &dec2.stage2));
    assert!(MsfWeights::from_store(&back, "missing", msf.config).is_err());
}
