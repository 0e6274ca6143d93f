mod common;

use common::naive_conv;
use kneealign::hourglass::{attention_gate, gradcheck_model, HourglassConfig, HourglassModel};
use kneealign::tensor::gradcheck::randn;
use kneealign::tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type T = Tensor<f64>;

fn p(m: &HourglassModel, name: &str) -> T {
    m.param(name).unwrap_or_else(|| panic!("{name}")).cast()
}

fn conv(m: &HourglassModel, name: &str, x: &T, pad: usize) -> T {
    naive_conv(x, &p(m, &format!("{name}.w")), &p(m, &format!("{name}.b")), 1, pad)
}

fn zip(a: &T, b: &T, f: impl Fn(f64, f64) -> f64) -> T {
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
}

fn relu(x: &T) -> T {
    x.map(|v| v.max(0.0))
}

fn maxpool(x: &T) -> T {
    let [n, c, h, w] = x.dims4().unwrap();
    let mut out = Vec::new();
    for i in 0..n * c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let at = |dy: usize, dx: usize| x.data()[(i * h + 2 * y + dy) * w + 2 * xx + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    Tensor::from_vec(&[n, c, h / 2, w / 2], out).unwrap()
}

fn upsample(x: &T) -> T {
    let [n, c, h, w] = x.dims4().unwrap();
    let mut out = Vec::new();
    for i in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.push(x.data()[(i * h + y / 2) * w + xx / 2]);
            }
        }
    }
    Tensor::from_vec(&[n, c, 2 * h, 2 * w], out).unwrap()
}

/// Multiplies every channel of `x` by the single-channel map `a`.
fn gate(x: &T, a: &T) -> T {
    let [n, c, h, w] = x.dims4().unwrap();
    let plane = h * w;
    let data = (0..n * c * plane)
        .map(|i| x.data()[i] * a.data()[(i / (c * plane)) * plane + i % plane])
        .collect();
    Tensor::from_vec(&[n, c, h, w], data).unwrap()
}

fn block(m: &HourglassModel, name: &str, x: &T, projected: bool) -> T {
    let h = relu(&conv(m, &format!("{name}.conv1"), x, 1));
    let h = conv(m, &format!("{name}.conv2"), &h, 1);
    let skip = if projected { conv(m, &format!("{name}.skip"), x, 0) } else { x.clone() };
    relu(&zip(&h, &skip, |a, b| a + b))
}

#[test]
fn depth_one_network_matches_unrolled_layers() {
    let cfg = HourglassConfig {
        depth: 1,
        width: 4,
        landmarks: 3,
        height: 8,
        input_width: 10,
        ..HourglassConfig::global_default()
    };
    let m = HourglassModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = randn(&[1, 1, 8, 10], 0.5, &mut rng);

    let x = relu(&conv(&m, "stem", &input, 1));
    let e0 = block(&m, "enc0", &x, false);
    let e1 = block(&m, "enc1", &maxpool(&e0), true);
    let mid = block(&m, "mid", &e1, false);
    let up = upsample(&conv(&m, "up0", &mid, 0));
    let s = zip(&conv(&m, "ag0.wx", &e0, 0), &upsample(&conv(&m, "ag0.wg", &mid, 0)), |a, b| a + b);
    let alpha = conv(&m, "ag0.psi", &relu(&s), 0).map(|v| 1.0 / (1.0 + (-v).exp()));
    let merged = zip(&up, &gate(&e0, &alpha), |a, b| a + b);
    let d0 = block(&m, "dec0", &merged, false);
    let want = conv(&m, "head", &d0, 0);

    let got: T = m.forward(&input.cast()).unwrap().cast();
    assert_eq!(got.shape(), &[1, 3, 8, 10]);
    assert!(got.max_abs_diff(&want) < 1e-5, "{}", got.max_abs_diff(&want));
}

#[test]
fn attention_gate_matches_direct_formula() {
    let cfg = HourglassConfig {
        depth: 1,
        width: 4,
        landmarks: 1,
        height: 8,
        input_width: 8,
        ..HourglassConfig::global_default()
    };
    let m = HourglassModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&[1, 4, 8, 8], 1.0, &mut rng);
    let coarse = randn(&[1, 8, 4, 4], 1.0, &mut rng);

    let s = zip(&conv(&m, "ag0.wx", &x, 0), &upsample(&conv(&m, "ag0.wg", &coarse, 0)), |a, b| a + b);
    let alpha = conv(&m, "ag0.psi", &relu(&s), 0).map(|v| 1.0 / (1.0 + (-v).exp()));
    let want = gate(&x, &alpha);

    let mut g = Graph::<f64>::new();
    let params: Vec<T> = m.params().iter().map(|t| t.cast()).collect();
    let vars = m.bind(&mut g, &params);
    let (xv, gv) = (g.leaf(x.clone()), g.leaf(coarse.clone()));
    let (out, a) = attention_gate(&mut g, &m.bound(&vars), "ag0", xv, gv).unwrap();
    let got = g.value(out).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-5);
    for (o, xi) in got.data().iter().zip(x.data()) {
        assert!(o.abs() <= xi.abs());
    }
    assert!(g.value(a).unwrap().data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn gate_limits_pass_or_block_the_skip() {
    let cfg = HourglassConfig {
        depth: 1,
        width: 4,
        landmarks: 1,
        height: 8,
        input_width: 8,
        ..HourglassConfig::global_default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&[1, 4, 8, 8], 1.0, &mut rng);
    let coarse = randn(&[1, 8, 4, 4], 1.0, &mut rng);
    for (bias, open) in [(60.0f32, true), (-60.0, false)] {
        let mut m = HourglassModel::new(cfg.clone()).unwrap();
        m.param_mut("ag0.psi.w").unwrap().data_mut().fill(0.0);
        m.param_mut("ag0.psi.b").unwrap().data_mut().fill(bias);
        let mut g = Graph::<f64>::new();
        let params: Vec<T> = m.params().iter().map(|t| t.cast()).collect();
        let vars = m.bind(&mut g, &params);
        let (xv, gv) = (g.leaf(x.clone()), g.leaf(coarse.clone()));
        let (out, _) = attention_gate(&mut g, &m.bound(&vars), "ag0", xv, gv).unwrap();
        let out = g.value(out).unwrap();
        let want = if open { x.clone() } else { Tensor::zeros(x.shape()) };
        assert!(out.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn full_model_loss_passes_finite_differences() {
    let cfg = HourglassConfig {
        depth: 2,
        width: 4,
        landmarks: 2,
        height: 8,
        input_width: 8,
        ..HourglassConfig::global_default()
    };
    let r = gradcheck_model(&cfg, 64, 1e-3, 9).unwrap();
    assert!(r.checked >= 50);
    assert!(r.passed(), "{:.3e}", r.max_rel_error);
}
