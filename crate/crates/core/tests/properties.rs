//! Cross-cutting invariants: bit-determinism of seeded runs, convolution
//! linearity, naive-loop forward oracles for the strided/padded kernels,
//! and the CIEDE2000 kernel against the published reference pairs.

use std::collections::BTreeMap;

use tsnca_core::loss;
use tsnca_core::metrics::ciede2000_lab;
use tsnca_core::nn::{self, UNetConfig};
use tsnca_core::rng::SplitMix64;
use tsnca_core::tensor::Tensor;
use tsnca_core::Graph;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.next_f64() as f32)
}

/// Literal seven-loop cross-correlation, the reference the optimized
/// kernel must match.
fn naive_conv2d(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    b: &Tensor<f32>,
    stride: usize,
    padding: usize,
) -> Tensor<f32> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0f32; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                if iy < padding || ix < padding {
                                    continue;
                                }
                                let (iy, ix) = (iy - padding, ix - padding);
                                if iy >= h || ix >= wd {
                                    continue;
                                }
                                acc += x.data()[((ni * cin + ci) * h + iy) * wd + ix]
                                    * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new([n, cout, oh, ow], out).unwrap()
}

#[test]
fn conv2d_matches_the_naive_loop_oracle() {
    for (stride, padding, seed) in [(1usize, 0usize, 1u64), (1, 1, 2), (2, 1, 3), (2, 2, 4)] {
        let x = rand_tensor(&[2, 3, 9, 7], seed);
        let w = rand_tensor(&[4, 3, 3, 3], seed + 10);
        let b = rand_tensor(&[4], seed + 20);
        let expected = naive_conv2d(&x, &w, &b, stride, padding);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x);
        let wv = g.constant(w);
        let bv = g.constant(b);
        let out = g.conv2d(xv, wv, bv, stride, padding).unwrap();
        assert_eq!(g.value(out).shape(), expected.shape());
        for (got, want) in g.value(out).data().iter().zip(expected.data()) {
            assert!(
                (got - want).abs() < 1e-5,
                "conv s{stride} p{padding}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn linear_matches_a_hand_matmul() {
    let x = rand_tensor(&[3, 5], 30);
    let w = rand_tensor(&[4, 5], 31);
    let b = rand_tensor(&[4], 32);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = g.constant(b.clone());
    let out = g.linear(xv, wv, bv).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let mut acc = b.data()[j] as f64;
            for k in 0..5 {
                acc += x.data()[i * 5 + k] as f64 * w.data()[j * 5 + k] as f64;
            }
            let got = g.value(out).data()[i * 4 + j] as f64;
            assert!((got - acc).abs() < 1e-6, "[{i},{j}]: {got} vs {acc}");
        }
    }
}

#[test]
fn depthwise_filter_matches_the_naive_loop_with_an_asymmetric_kernel() {
    // An asymmetric kernel catches orientation mistakes that the symmetric
    // SSIM window would mask.
    let kernel = Tensor::<f32>::new([2, 3], vec![1.0, -2.0, 0.5, 0.25, 3.0, -1.0]).unwrap();
    let x = rand_tensor(&[1, 2, 5, 6], 40);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let out = g.filter_depthwise(xv, &kernel).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 2, 4, 4]);
    for c in 0..2 {
        for oy in 0..4 {
            for ox in 0..4 {
                let mut acc = 0.0f64;
                for ky in 0..2 {
                    for kx in 0..3 {
                        acc += x.data()[(c * 5 + oy + ky) * 6 + ox + kx] as f64
                            * kernel.data()[ky * 3 + kx] as f64;
                    }
                }
                let got = g.value(out).data()[(c * 4 + oy) * 4 + ox] as f64;
                assert!((got - acc).abs() < 1e-6, "[{c},{oy},{ox}]: {got} vs {acc}");
            }
        }
    }
}

/// Reference CIEDE2000 test pairs: (L1, a1, b1, L2, a2, b2, ΔE00).
const CIEDE2000_PAIRS: [(f64, f64, f64, f64, f64, f64, f64); 34] = [
    (50.0, 2.6772, -79.7751, 50.0, 0.0, -82.7485, 2.0425),
    (50.0, 3.1571, -77.2803, 50.0, 0.0, -82.7485, 2.8615),
    (50.0, 2.8361, -74.0200, 50.0, 0.0, -82.7485, 3.4412),
    (50.0, -1.3802, -84.2814, 50.0, 0.0, -82.7485, 1.0000),
    (50.0, -1.1848, -84.8006, 50.0, 0.0, -82.7485, 1.0000),
    (50.0, -0.9009, -85.5211, 50.0, 0.0, -82.7485, 1.0000),
    (50.0, 0.0, 0.0, 50.0, -1.0, 2.0, 2.3669),
    (50.0, -1.0, 2.0, 50.0, 0.0, 0.0, 2.3669),
    (50.0, 2.4900, -0.0010, 50.0, -2.4900, 0.0009, 7.1792),
    (50.0, 2.4900, -0.0010, 50.0, -2.4900, 0.0010, 7.1792),
    (50.0, 2.4900, -0.0010, 50.0, -2.4900, 0.0011, 7.2195),
    (50.0, 2.4900, -0.0010, 50.0, -2.4900, 0.0012, 7.2195),
    (50.0, -0.0010, 2.4900, 50.0, 0.0009, -2.4900, 4.8045),
    (50.0, -0.0010, 2.4900, 50.0, 0.0010, -2.4900, 4.8045),
    (50.0, -0.0010, 2.4900, 50.0, 0.0011, -2.4900, 4.7461),
    (50.0, 2.5000, 0.0, 50.0, 0.0, -2.5000, 4.3065),
    (50.0, 2.5000, 0.0, 73.0, 25.0, -18.0, 27.1492),
    (50.0, 2.5000, 0.0, 61.0, -5.0, 29.0, 22.8977),
    (50.0, 2.5000, 0.0, 56.0, -27.0, -3.0, 31.9030),
    (50.0, 2.5000, 0.0, 58.0, 24.0, 15.0, 19.4535),
    (50.0, 2.5000, 0.0, 50.0, 3.1736, 0.5854, 1.0000),
    (50.0, 2.5000, 0.0, 50.0, 3.2972, 0.0, 1.0000),
    (50.0, 2.5000, 0.0, 50.0, 1.8634, 0.5757, 1.0000),
    (50.0, 2.5000, 0.0, 50.0, 3.2592, 0.3350, 1.0000),
    (
        60.2574, -34.0099, 36.2677, 60.4626, -34.1751, 39.4387, 1.2644,
    ),
    (
        63.0109, -31.0961, -5.8663, 62.8187, -29.7946, -4.0864, 1.2630,
    ),
    (61.2901, 3.7196, -5.3901, 61.4292, 2.2480, -4.9620, 1.8731),
    (35.0831, -44.1164, 3.7933, 35.0232, -40.0716, 1.5901, 1.8645),
    (
        22.7233, 20.0904, -46.6940, 23.0331, 14.9730, -42.5619, 2.0373,
    ),
    (36.4612, 47.8580, 18.3852, 36.2715, 50.5065, 21.2231, 1.4146),
    (90.8027, -2.0831, 1.4410, 91.1528, -1.6435, 0.0447, 1.4441),
    (90.9257, -0.5406, -0.9208, 88.6381, -0.8985, -0.7239, 1.5381),
    (6.7747, -0.2908, -2.4247, 5.8714, -0.0985, -2.2286, 0.6377),
    (2.0776, 0.0795, -1.1350, 0.9033, -0.0636, -0.5514, 0.9082),
];

#[test]
fn ciede2000_matches_published_reference_pairs() {
    for (i, &(l1, a1, b1, l2, a2, b2, expected)) in CIEDE2000_PAIRS.iter().enumerate() {
        let got = ciede2000_lab([l1, a1, b1], [l2, a2, b2]);
        assert!(
            (got - expected).abs() < 1e-4,
            "pair {}: got {:.6}, expected {:.4}",
            i + 1,
            got,
            expected
        );
    }
}

#[test]
fn seeded_forward_passes_are_bit_identical() {
    let config = UNetConfig::restorer(4, 2, true);
    let run = || -> (Vec<f32>, f32) {
        let params = nn::init_params::<f32>(&config, 42).unwrap();
        let mut g = Graph::new();
        let vars = params.register(&mut g, true);
        let input = g.constant(rand_tensor(&[1, 3, 16, 16], 5));
        let target = g.constant(rand_tensor(&[1, 3, 16, 16], 6));
        let out = nn::unet_forward(&mut g, input, &vars, &config).unwrap();
        let (total, _) = loss::stage2_loss(&mut g, out, target).unwrap();
        let loss_value = g.scalar_value(total);
        g.backward(total).unwrap();
        let grads = nn::extract_grads(&g, &vars);
        let mut flat = Vec::new();
        for grad in grads.values() {
            flat.extend_from_slice(grad);
        }
        (flat, loss_value)
    };
    let (grads_a, loss_a) = run();
    let (grads_b, loss_b) = run();
    assert_eq!(loss_a.to_bits(), loss_b.to_bits());
    assert_eq!(grads_a.len(), grads_b.len());
    for (a, b) in grads_a.iter().zip(&grads_b) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn conv2d_is_linear_in_its_input() {
    let mut g = Graph::<f32>::new();
    let x = rand_tensor(&[1, 2, 6, 6], 10);
    let y = rand_tensor(&[1, 2, 6, 6], 11);
    let w = rand_tensor(&[3, 2, 3, 3], 12);
    let zero_bias = Tensor::<f32>::zeros([3]);
    let (alpha, beta) = (0.7f32, -1.3f32);

    let combined = Tensor::from_fn([1, 2, 6, 6], |i| alpha * x.data()[i] + beta * y.data()[i]);
    let xc = g.constant(x);
    let yc = g.constant(y);
    let cc = g.constant(combined);
    let wc = g.constant(w);
    let bc = g.constant(zero_bias);

    let conv_sum = g.conv2d(cc, wc, bc, 1, 1).unwrap();
    let conv_x = g.conv2d(xc, wc, bc, 1, 1).unwrap();
    let conv_y = g.conv2d(yc, wc, bc, 1, 1).unwrap();
    let sx = g.mul_scalar(conv_x, alpha).unwrap();
    let sy = g.mul_scalar(conv_y, beta).unwrap();
    let recombined = g.add(sx, sy).unwrap();

    for (a, b) in g
        .value(conv_sum)
        .data()
        .iter()
        .zip(g.value(recombined).data())
    {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn structural_diff_between_tsn_and_tsnca_parameter_sets() {
    // Same seed, attention on/off: shared names get bit-identical tensors,
    // and the difference is exactly the per-level SE quartets.
    let with = nn::init_params::<f32>(&UNetConfig::restorer(8, 3, true), 9).unwrap();
    let without = nn::init_params::<f32>(&UNetConfig::restorer(8, 3, false), 9).unwrap();
    let with_names: Vec<&String> = with.names().collect();
    let without_names: Vec<&String> = without.names().collect();
    for name in &without_names {
        assert!(with_names.contains(name));
        assert_eq!(
            with.get(name).unwrap(),
            without.get(name).unwrap(),
            "shared tensor {name} differs"
        );
    }
    let extra: Vec<&String> = with_names
        .iter()
        .filter(|n| !without_names.contains(n))
        .copied()
        .collect();
    assert_eq!(extra.len(), 3 * 4);
    assert!(extra.iter().all(|n| n.contains(".se.fc")));
}

#[test]
fn se_parameter_count_formula_holds_for_all_levels() {
    let config = UNetConfig::restorer(8, 3, true);
    let shapes: BTreeMap<String, Vec<usize>> = config.expected_shapes();
    for l in 0..3usize {
        let c = 8usize << l;
        let r = 4usize;
        let count: usize = shapes
            .iter()
            .filter(|(name, _)| name.starts_with(&format!("skip{l}.se.")))
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum();
        assert_eq!(count, 2 * c * (c / r) + (c / r) + c, "level {l}");
    }
}
