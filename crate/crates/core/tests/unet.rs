use mseg_core::autodiff::Tape;
use mseg_core::unet::*;
use mseg_core::{Tensor, Volume};

/// Closed-form parameter count: two 3^d convs per block, batchnorm affine
/// terms on each block input, 2^d transposed convs and a 1x1 head.
fn closed_form(dims: u32, base: usize, depth: usize, bn: bool) -> usize {
    let (t3, t2) = (3usize.pow(dims), 2usize.pow(dims));
    let f = |l: usize| base << l;
    let block = |ci: usize, co: usize| co * ci * t3 + co + co * co * t3 + co + if bn { 2 * ci } else { 0 };
    let mut n = 0;
    for l in 0..=depth {
        n += block(if l == 0 { 1 } else { f(l - 1) }, f(l));
    }
    for l in 0..depth {
        n += f(l + 1) * f(l) * t2 + f(l) + block(2 * f(l), f(l));
    }
    n + f(0) + 1
}

#[test]
fn reference_configurations_fall_in_their_parameter_ranges() {
    let n2 = build_unet(&UNetConfig::paper_2d(), 0).unwrap().count_params();
    let n3 = build_unet(&UNetConfig::paper_3d(), 0).unwrap().count_params();
    assert!((7_000_000..=10_000_000).contains(&n2), "{n2}");
    assert!((18_000..=30_000).contains(&n3), "{n3}");
    assert_eq!(n2, closed_form(2, 32, 4, true));
    assert_eq!(n3, closed_form(3, 4, 2, true));
}

#[test]
fn counts_match_closed_form_and_profile_across_configs() {
    for (dims, base, depth, bn) in [(2, 3, 0, true), (2, 5, 2, false), (3, 2, 1, true), (3, 3, 3, false)] {
        let cfg = UNetConfig { dims, base_filters: base, depth, use_batchnorm: bn, ..UNetConfig::paper_2d() };
        let net = build_unet(&cfg, 1).unwrap();
        assert_eq!(net.count_params(), closed_form(dims as u32, base, depth, bn));
        let m = 1 << depth;
        let p = profile(&cfg, &vec![m; dims], 1).unwrap();
        assert_eq!(p.params, net.count_params());
    }
}

#[test]
fn doubling_filters_roughly_quadruples_parameters() {
    let small = build_unet(&UNetConfig::paper_2d(), 0).unwrap().count_params() as f64;
    let cfg = UNetConfig { base_filters: 64, ..UNetConfig::paper_2d() };
    let big = profile(&cfg, &[16, 16], 1).unwrap().params as f64;
    assert!((big / small - 4.0).abs() < 0.2, "{}", big / small);
}

fn zero_head(net: &mut UNet<f64>) {
    let (w, b) = net.arch.head_params();
    net.params.get_mut(w).value.data_mut().fill(0.0);
    net.params.get_mut(b).value.data_mut().fill(0.0);
}

#[test]
fn zero_head_gives_one_half_everywhere() {
    for (cfg, shape) in [
        (UNetConfig { base_filters: 4, depth: 2, ..UNetConfig::paper_2d() }, vec![2, 1, 8, 12]),
        (UNetConfig { base_filters: 2, depth: 0, ..UNetConfig::paper_3d() }, vec![1, 1, 3, 5, 2]),
    ] {
        let mut net = build_unet(&cfg, 5).unwrap();
        let mut net = UNet { arch: net.arch.clone(), params: std::mem::take(&mut net.params).cast::<f64>() };
        zero_head(&mut net);
        let n: usize = shape.iter().product();
        let y = net.predict(Tensor::from_vec(&shape, (0..n).map(|i| (i as f64).sin()).collect()).unwrap()).unwrap();
        assert_eq!(y.shape(), shape.as_slice());
        assert!(y.data().iter().all(|v| *v == 0.5));
    }
}

#[test]
fn output_is_a_probability_map_of_the_input_shape() {
    let net = build_unet(&UNetConfig { base_filters: 4, depth: 2, ..UNetConfig::paper_3d() }, 2).unwrap();
    let v = Volume::new([8, 4, 12], (0..384).map(|i| ((i * 13) % 7) as f32 / 7.0).collect()).unwrap();
    let y = net.predict_volume(&v).unwrap();
    assert_eq!(y.extents(), [8, 4, 12]);
    assert!(y.data().iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(net.predict_volume(&Volume::zeros([8, 6, 12])).is_err());
    let net2 = build_unet(&UNetConfig { base_filters: 2, depth: 1, ..UNetConfig::paper_2d() }, 2).unwrap();
    assert!(net2.predict_volume(&v).is_err());
}

#[test]
fn initialization_is_seed_determined() {
    let cfg = UNetConfig { base_filters: 4, depth: 2, ..UNetConfig::paper_2d() };
    let a = build_unet(&cfg, 11).unwrap();
    let b = build_unet(&cfg, 11).unwrap();
    let c = build_unet(&cfg, 12).unwrap();
    assert_eq!(a.params.snapshot(), b.params.snapshot());
    assert_ne!(a.params.snapshot(), c.params.snapshot());
}

#[test]
fn init_laws_set_the_weight_spread() {
    for (law, want) in [(InitLaw::WeightCount, 1.0 / (64.0 * 64.0 * 9.0)), (InitLaw::FanIn, 1.0 / (64.0f64 * 9.0).sqrt()), (InitLaw::He, (2.0 / (64.0 * 9.0f64)).sqrt())] {
        let cfg = UNetConfig { base_filters: 64, depth: 0, init: law, ..UNetConfig::paper_2d() };
        let net = build_unet(&cfg, 3).unwrap();
        let w = net.params.value(net.params.find("down0.conv2.w").unwrap());
        let n = w.numel() as f64;
        let sd = (w.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd / want - 1.0).abs() < 0.05, "{law:?}: {sd} vs {want}");
    }
}

#[test]
fn dropout_sits_on_the_two_deepest_levels() {
    let cfg = UNetConfig::paper_2d();
    let rates: Vec<f64> = (0..=4).map(|l| cfg.dropout_at(l)).collect();
    assert_eq!(rates, vec![0.0, 0.0, 0.0, 0.2, 0.5]);
}

#[test]
fn training_mode_reports_batch_statistics_once_per_block() {
    let cfg = UNetConfig { base_filters: 2, depth: 2, ..UNetConfig::paper_2d() };
    let mut net = build_unet(&cfg, 4).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|i| i as f32 / 10.0).collect()).unwrap());
    let (_, updates) = net.arch.forward(&net.params, &mut tape, x, Mode::Train { seed: 1 }).unwrap();
    assert_eq!(updates.len(), 2 * 2 + 1);
    UNetArch::commit_bn(&mut net.params, &updates);
    // the first commit adopts the batch statistics of the input block
    let mean = net.params.value(net.params.find("down0.bn.running_mean").unwrap()).data()[0];
    assert!((mean - 1.55).abs() < 1e-6, "{mean}");
    let t = net.params.value(net.params.find("down0.bn.updates").unwrap()).data()[0];
    assert_eq!(t, 1.0);
}

#[test]
fn inference_is_deterministic_and_training_dropout_is_seeded() {
    let cfg = UNetConfig { base_filters: 2, depth: 1, dropout_deepest: 0.5, ..UNetConfig::paper_2d() };
    let net = build_unet(&cfg, 6).unwrap();
    let input = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|i| i as f32).collect()).unwrap();
    assert_eq!(net.predict(input.clone()).unwrap(), net.predict(input.clone()).unwrap());
    let run = |seed| {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let (y, _) = net.arch.forward(&net.params, &mut tape, x, Mode::Train { seed }).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(9), run(9));
}

#[test]
fn cropping_to_divisible_extents() {
    assert_eq!(crop_extent(100, 4).unwrap(), (96, (2, 2)));
    assert_eq!(crop_extent(17, 1).unwrap(), (16, (0, 1)));
    assert_eq!(crop_extent(64, 3).unwrap(), (64, (0, 0)));
    assert!(crop_extent(3, 2).is_err());
    let v = Volume::new([5, 6, 7], (0..210).collect::<Vec<u32>>()).unwrap();
    let (c, rec) = crop_to_divisible(&v, [0, 2, 1]).unwrap();
    assert_eq!(c.extents(), [5, 4, 6]);
    assert_eq!(c.get(0, 0, 0), v.get(0, 1, 0));
    let back = embed(&c, &rec).unwrap();
    for i in 0..5 {
        for j in 0..6 {
            for k in 0..7 {
                let inside = (1..5).contains(&j) && k < 6;
                assert_eq!(back.get(i, j, k), if inside { v.get(i, j, k) } else { 0 });
            }
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(build_unet(&UNetConfig { dims: 4, ..UNetConfig::paper_2d() }, 0).is_err());
    assert!(build_unet(&UNetConfig { base_filters: 0, ..UNetConfig::paper_2d() }, 0).is_err());
    assert!(build_unet(&UNetConfig { dropout_deepest: 1.0, ..UNetConfig::paper_2d() }, 0).is_err());
}
