//! Forward pass against a naive layer-by-layer reference, and the full
//! detector's shapes.

use bev_erpn_core::network::{
    build_complex_yolo, infer_shapes, Activation, ConvSpec, ConvWeights, LayerSpec, Network, Shape, Tensor3, Weights,
    BN_EPSILON, INPUT_SHAPE, OUTPUT_SHAPE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: Shape, seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor3::from_vec(shape, data).unwrap()
}

fn naive_conv(x: &Tensor3, spec: &ConvSpec, w: &ConvWeights) -> Tensor3 {
    let k = w.kernel as isize;
    let pad = k / 2;
    let mut out = Tensor3::zeros(Shape::new(x.height, x.width, w.filters));
    for y in 0..x.height as isize {
        for xx in 0..x.width as isize {
            for f in 0..w.filters {
                let mut acc = 0.0f64;
                for c in 0..w.channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = (y + ky - pad, xx + kx - pad);
                            if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                continue;
                            }
                            let kv =
                                w.kernel_data[((f * w.channels + c) * w.kernel + ky as usize) * w.kernel + kx as usize];
                            acc += kv as f64 * x.get(iy as usize, ix as usize, c) as f64;
                        }
                    }
                }
                let v = match &w.batch_norm {
                    Some(bn) => {
                        bn.gamma[f] as f64 * (acc - bn.mean[f] as f64)
                            / (bn.variance[f] as f64 + BN_EPSILON as f64).sqrt()
                            + w.bias[f] as f64
                    }
                    None => acc + w.bias[f] as f64,
                };
                let v = v as f32;
                let i = out.index(y as usize, xx as usize, f);
                out.data[i] = match spec.activation {
                    Activation::Leaky if v < 0.0 => 0.1 * v,
                    _ => v,
                };
            }
        }
    }
    out
}

fn naive_forward(specs: &[LayerSpec], w: &Weights, input: &Tensor3) -> Tensor3 {
    let mut outs: Vec<Tensor3> = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        let x = if i == 0 { input } else { &outs[i - 1] };
        let o = match s {
            LayerSpec::Conv(c) => naive_conv(x, c, w.convs[i].as_ref().unwrap()),
            LayerSpec::MaxPool => {
                let mut o = Tensor3::zeros(Shape::new(x.height / 2, x.width / 2, x.channels));
                for y in 0..o.height {
                    for xx in 0..o.width {
                        for c in 0..x.channels {
                            let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                .iter()
                                .map(|(dy, dx)| x.get(2 * y + dy, 2 * xx + dx, c))
                                .fold(f32::NEG_INFINITY, f32::max);
                            let idx = o.index(y, xx, c);
                            o.data[idx] = m;
                        }
                    }
                }
                o
            }
            LayerSpec::Reorg => {
                let c = x.channels;
                let mut o = Tensor3::zeros(Shape::new(x.height / 2, x.width / 2, 4 * c));
                for y in 0..x.height {
                    for xx in 0..x.width {
                        for ch in 0..c {
                            let idx = o.index(y / 2, xx / 2, ((y % 2) * 2 + xx % 2) * c + ch);
                            o.data[idx] = x.get(y, xx, ch);
                        }
                    }
                }
                o
            }
            LayerSpec::Route(src) => {
                let parts: Vec<&Tensor3> = src.iter().map(|&j| &outs[j]).collect();
                let total: usize = parts.iter().map(|t| t.channels).sum();
                let mut o = Tensor3::zeros(Shape::new(parts[0].height, parts[0].width, total));
                for y in 0..o.height {
                    for xx in 0..o.width {
                        let mut c0 = 0;
                        for p in &parts {
                            for c in 0..p.channels {
                                let idx = o.index(y, xx, c0 + c);
                                o.data[idx] = p.get(y, xx, c);
                            }
                            c0 += p.channels;
                        }
                    }
                }
                o
            }
        };
        outs.push(o);
    }
    outs.pop().unwrap()
}

fn conv(filters: usize, kernel: usize, bn: bool, activation: Activation) -> LayerSpec {
    LayerSpec::Conv(ConvSpec {
        filters,
        kernel,
        batch_norm: bn,
        activation,
    })
}

/// Same layer kinds and routing pattern as the detector, at toy scale.
fn mini_detector() -> Vec<LayerSpec> {
    use Activation::{Leaky, Linear};
    vec![
        conv(6, 3, true, Leaky),
        LayerSpec::MaxPool,
        conv(8, 3, true, Leaky),
        conv(4, 1, true, Leaky),
        LayerSpec::MaxPool,
        conv(12, 3, true, Leaky),
        LayerSpec::MaxPool,
        conv(16, 3, true, Leaky),
        LayerSpec::Route(vec![5]),
        LayerSpec::Reorg,
        LayerSpec::Route(vec![9, 7]),
        conv(16, 3, true, Leaky),
        conv(15, 1, false, Linear),
    ]
}

fn perturb_batch_norm(w: &mut Weights, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for cw in w.convs.iter_mut().flatten() {
        if let Some(bn) = cw.batch_norm.as_mut() {
            for f in 0..cw.filters {
                bn.gamma[f] = rng.random_range(0.5..1.5);
                bn.mean[f] = rng.random_range(-0.2..0.2);
                bn.variance[f] = rng.random_range(0.3..1.5);
            }
        }
    }
}

#[test]
fn mini_detector_matches_naive_reference() {
    let specs = mini_detector();
    let input = random_tensor(Shape::new(32, 64, 3), 1);
    let mut w = Weights::random(&specs, input.shape(), 2).unwrap();
    perturb_batch_norm(&mut w, 3);
    let net = Network::new(&specs, &w, input.shape()).unwrap();
    let got = net.forward(&input).unwrap();
    let want = naive_forward(&specs, &w, &input);
    assert_eq!(got.shape(), Shape::new(4, 8, 15));
    let err = got
        .data
        .iter()
        .zip(&want.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    let scale = want.data.iter().map(|v| v.abs()).fold(0.0, f32::max);
    assert!(err < 1e-4 * scale.max(1.0), "max abs error {err} (scale {scale})");
}

#[test]
fn mini_detector_golden_output() {
    let specs = mini_detector();
    let input = random_tensor(Shape::new(32, 64, 3), 11);
    let w = Weights::random(&specs, input.shape(), 12).unwrap();
    let net = Network::new(&specs, &w, input.shape()).unwrap();
    let a = net.forward(&input).unwrap();
    let b = net.forward(&input).unwrap();
    assert_eq!(a.data, b.data);
    let probes = [
        a.get(0, 0, 0),
        a.get(1, 3, 7),
        a.get(3, 7, 14),
        a.data.iter().sum::<f32>(),
    ];
    let golden = [GOLDEN_0, GOLDEN_1, GOLDEN_2, GOLDEN_SUM];
    for (p, g) in probes.iter().zip(golden) {
        assert!((p - g).abs() <= 1e-4 * g.abs().max(1.0), "{probes:?}");
    }
}

// Recorded from the first run; the naive reference above agrees on the same stack.
const GOLDEN_0: f32 = 0.594_202_64;
const GOLDEN_1: f32 = -0.615_484_95;
const GOLDEN_2: f32 = 0.065_330_43;
const GOLDEN_SUM: f32 = 19.585_556;

#[test]
fn full_detector_shapes_and_finite_output() {
    let specs = build_complex_yolo();
    let shapes = infer_shapes(&specs, INPUT_SHAPE).unwrap();
    assert_eq!(shapes[0], Shape::new(512, 1024, 24));
    assert_eq!(*shapes.last().unwrap(), OUTPUT_SHAPE);
    let w = Weights::random(&specs, INPUT_SHAPE, 5).unwrap();
    let net = Network::new(&specs, &w, INPUT_SHAPE).unwrap();
    let mut seen = Vec::new();
    let out = net
        .forward_inspect(&Tensor3::zeros(INPUT_SHAPE), |i, shape, _| seen.push((i, shape)))
        .unwrap();
    assert_eq!(out.shape(), OUTPUT_SHAPE);
    assert!(out.data.iter().all(|v| v.is_finite()));
    assert_eq!(seen.len(), 26);
    assert!(seen.iter().all(|(i, s)| shapes[*i] == *s));
}
