//! Finite-difference checks for every tape operation and for the composite
//! networks, shared by the unit suite and the acceptance run.

use mseg_core::autodiff::{Tape, Var};
use mseg_core::gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
use mseg_core::net25d::{build_net25d, projections, Net25DConfig};
use mseg_core::params::ParamStore;
use mseg_core::projection::Backprojector;
use mseg_core::unet::{InitLaw, Mode, UNetArch, UNetConfig};
use mseg_core::{Result, Tensor, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn store(entries: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, (name, shape)) in entries.iter().enumerate() {
        s.register(*name, random(shape, 100 + i as u64), true).unwrap();
    }
    s
}

fn bind(s: &ParamStore<f64>, tape: &mut Tape<f64>, name: &str) -> Var {
    tape.param(s, s.find(name).unwrap())
}

/// Scalar read-out with fixed random weights, so every output entry matters.
fn readout(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random(tape.value(y).shape(), seed);
    tape.weighted_sum(y, &w)
}

fn check(mut s: ParamStore<f64>, f: impl Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>) -> GradCheckReport {
    grad_check(&mut s, f, DEFAULT_STEP).unwrap()
}

pub fn dense() -> GradCheckReport {
    check(store(&[("x", &[3, 4]), ("w", &[2, 4]), ("b", &[2])]), |s, t| {
        let (x, w, b) = (bind(s, t, "x"), bind(s, t, "w"), bind(s, t, "b"));
        let y = t.dense(x, w, Some(b))?;
        readout(t, y, 1)
    })
}

pub fn conv2d_relu() -> GradCheckReport {
    check(store(&[("x", &[2, 2, 5, 6]), ("w1", &[3, 2, 3, 3]), ("b1", &[3]), ("w2", &[2, 3, 3, 3]), ("b2", &[2])]), |s, t| {
        let x = bind(s, t, "x");
        let (w1, b1, w2, b2) = (bind(s, t, "w1"), bind(s, t, "b1"), bind(s, t, "w2"), bind(s, t, "b2"));
        let h = t.conv(x, w1, Some(b1), true)?;
        let h = t.relu(h);
        let y = t.conv(h, w2, Some(b2), true)?;
        readout(t, y, 2)
    })
}

pub fn conv3d() -> GradCheckReport {
    check(store(&[("x", &[1, 2, 4, 4, 5]), ("w", &[2, 2, 3, 3, 3]), ("b", &[2])]), |s, t| {
        let (x, w, b) = (bind(s, t, "x"), bind(s, t, "w"), bind(s, t, "b"));
        let y = t.conv(x, w, Some(b), true)?;
        readout(t, y, 3)
    })
}

pub fn conv_transpose2d() -> GradCheckReport {
    check(store(&[("x", &[2, 3, 3, 2]), ("w", &[3, 2, 2, 2]), ("b", &[2])]), |s, t| {
        let (x, w, b) = (bind(s, t, "x"), bind(s, t, "w"), bind(s, t, "b"));
        let y = t.conv_transpose(x, w, Some(b))?;
        readout(t, y, 4)
    })
}

pub fn conv_transpose3d() -> GradCheckReport {
    check(store(&[("x", &[1, 2, 2, 3, 2]), ("w", &[2, 3, 2, 2, 2]), ("b", &[3])]), |s, t| {
        let (x, w, b) = (bind(s, t, "x"), bind(s, t, "w"), bind(s, t, "b"));
        let y = t.conv_transpose(x, w, Some(b))?;
        readout(t, y, 5)
    })
}

pub fn max_pool2d() -> GradCheckReport {
    check(store(&[("x", &[2, 2, 4, 6])]), |s, t| {
        let x = bind(s, t, "x");
        let y = t.max_pool(x, &[2, 2])?;
        readout(t, y, 6)
    })
}

pub fn max_pool3d() -> GradCheckReport {
    check(store(&[("x", &[1, 2, 4, 4, 2])]), |s, t| {
        let x = bind(s, t, "x");
        let y = t.max_pool(x, &[2, 2, 2])?;
        readout(t, y, 7)
    })
}

pub fn avg_pool_same() -> GradCheckReport {
    check(store(&[("x", &[1, 1, 3, 4, 5])]), |s, t| {
        let x = bind(s, t, "x");
        let y = t.avg_pool_same(x, &[2, 2, 2])?;
        readout(t, y, 8)
    })
}

pub fn sigmoid_concat_shift() -> GradCheckReport {
    check(store(&[("a", &[2, 1, 3, 3]), ("b", &[2, 2, 3, 3]), ("beta", &[1])]), |s, t| {
        let (a, b, beta) = (bind(s, t, "a"), bind(s, t, "b"), bind(s, t, "beta"));
        let c = t.concat_channels(a, b)?;
        let c = t.add_scalar(c, beta)?;
        let y = t.sigmoid(c);
        readout(t, y, 9)
    })
}

pub fn batchnorm() -> GradCheckReport {
    check(store(&[("x", &[2, 3, 3, 4]), ("g", &[3]), ("b", &[3])]), |s, t| {
        let (x, g, b) = (bind(s, t, "x"), bind(s, t, "g"), bind(s, t, "b"));
        let (y, _) = t.batch_norm_train(x, g, b, 1e-5)?;
        let mean = [0.1, -0.2, 0.3];
        let var = [0.5, 1.5, 2.0];
        let z = t.batch_norm_infer(y, g, b, &mean, &var, 1e-5)?;
        readout(t, z, 10)
    })
}

pub fn dropout() -> GradCheckReport {
    check(store(&[("x", &[2, 3, 4])]), |s, t| {
        let x = bind(s, t, "x");
        let y = t.dropout(x, 0.5, true, 11);
        readout(t, y, 11)
    })
}

pub fn dice() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let truth = Tensor::from_vec(&[1, 1, 4, 5], (0..20).map(|_| f64::from(rng.random_bool(0.3))).collect()).unwrap();
    check(store(&[("z", &[1, 1, 4, 5])]), move |s, t| {
        let z = bind(s, t, "z");
        let p = t.sigmoid(z);
        t.dice_loss(p, &truth)
    })
}

pub fn backprojection() -> GradCheckReport {
    let angles = [0.0, 30.0, 90.0];
    check(store(&[("g0", &[1, 1, 3, 5]), ("g1", &[1, 1, 3, 5]), ("g2", &[1, 1, 3, 5])]), move |s, t| {
        let gs = [bind(s, t, "g0"), bind(s, t, "g1"), bind(s, t, "g2")];
        let y = t.linear_op(&gs, Backprojector::new(&angles, [4, 3, 5]));
        let y = t.sigmoid(y);
        readout(t, y, 13)
    })
}

fn unet_case(cfg: UNetConfig, spatial: &[usize]) -> GradCheckReport {
    let mut s = ParamStore::<f64>::new();
    let arch = UNetArch::register(&cfg, &mut s, "", 14).unwrap();
    let mut shape = vec![2, 1];
    shape.extend_from_slice(spatial);
    let input = random(&shape, 15);
    check(s, move |s, t| {
        let x = t.constant(input.clone());
        let (y, _) = arch.forward(s, t, x, Mode::Train { seed: 16 })?;
        readout(t, y, 17)
    })
}

pub fn unet2d() -> GradCheckReport {
    let cfg = UNetConfig { base_filters: 2, depth: 2, init: InitLaw::FanIn, ..UNetConfig::paper_2d() };
    unet_case(cfg, &[4, 8])
}

pub fn unet3d() -> GradCheckReport {
    let cfg = UNetConfig { base_filters: 2, depth: 1, init: InitLaw::FanIn, ..UNetConfig::paper_3d() };
    unet_case(cfg, &[2, 4, 4])
}

/// The full projection network at 8x8x8 with two directions.
pub fn net25d() -> GradCheckReport {
    let unet = UNetConfig { base_filters: 2, depth: 1, init: InitLaw::FanIn, ..UNetConfig::paper_2d() };
    let net = build_net25d(&Net25DConfig { p: 2, unet, ..Net25DConfig::default() }, 18).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let vol = Volume::new([8, 8, 8], (0..512).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let truth = Tensor::from_vec(&[1, 1, 8, 8, 8], (0..512).map(|_| f64::from(rng.random_bool(0.2))).collect()).unwrap();
    let mips = projections(&vol, net.angles());
    let arch = net.arch.clone();
    check(net.params, move |s, t| {
        let (y, _) = arch.record(s, t, &mips, 8, Mode::Train { seed: 20 })?;
        t.dice_loss(y, &truth)
    })
}

/// Every case with its relative-error bound.
pub fn all() -> Vec<(&'static str, GradCheckReport, f64)> {
    vec![
        ("dense", dense(), 1e-6),
        ("conv2d+relu", conv2d_relu(), 1e-3),
        ("conv3d", conv3d(), 1e-3),
        ("transposed conv2d", conv_transpose2d(), 1e-3),
        ("transposed conv3d", conv_transpose3d(), 1e-3),
        ("maxpool2d", max_pool2d(), 1e-3),
        ("maxpool3d", max_pool3d(), 1e-3),
        ("avgpool3d same", avg_pool_same(), 1e-3),
        ("sigmoid/concat/shift", sigmoid_concat_shift(), 1e-3),
        ("batchnorm", batchnorm(), 1e-3),
        ("dropout", dropout(), 1e-3),
        ("dice loss", dice(), 1e-4),
        ("backprojection", backprojection(), 1e-3),
        ("2D U-net", unet2d(), 1e-3),
        ("3D U-net", unet3d(), 1e-3),
        ("2.5D composite 8x8x8 p=2", net25d(), 1e-3),
    ]
}
