//! Training objectives.
//!
//! Stage one (enhancement): L1 + gradient-L1 + perceptual distance through a
//! fixed feature extractor. Stage two (restoration): MSE − SSIM +
//! gradient-MSE. SSIM and the forward-difference gradient maps are exposed
//! as reusable primitives; the metric suite reuses this SSIM.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Per-term breakdown of a composite loss. The `ssim` term enters the total
/// negated; every other term enters with a positive sign.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<(&'static str, f64)>,
}

impl LossReport {
    /// Recomposes the total from the terms with their contractual signs.
    pub fn signed_sum(&self) -> f64 {
        self.terms
            .iter()
            .map(|(name, v)| if *name == "ssim" { -v } else { *v })
            .sum()
    }
}

/// Horizontal and vertical forward differences, zero in the last
/// column/row. Differentiable.
pub fn gradient_map<T: Scalar>(g: &mut Graph<T>, image: Var) -> Result<(Var, Var)> {
    let dh = g.diff_h(image)?;
    let dv = g.diff_v(image)?;
    Ok((dh, dv))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 11x11 Gaussian window, built in f64 and cast.
fn gaussian_window<T: Scalar>() -> Tensor<T> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut values = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            values[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    Tensor::from_fn([SSIM_WINDOW, SSIM_WINDOW], |i| T::from_f64(values[i] / sum))
}

pub struct SsimOutput {
    /// Mean SSIM over all pixels and channels (scalar node).
    pub mean: Var,
    /// Per-pixel SSIM map, same shape as the inputs.
    pub map: Var,
}

/// Structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03 and dynamic range 1. Inputs are padded
/// by reflection so the map keeps the input size. Differentiable.
pub fn ssim<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<SsimOutput> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", g.value(a).shape(), g.value(b).shape()),
        ));
    }
    let (_, _, h, w) = g.value(a).dims4()?;
    let pad = SSIM_WINDOW / 2;
    if h <= pad || w <= pad {
        return Err(Error::invalid(
            "ssim",
            format!(
                "{}x{} input too small for an {}x{} window",
                h, w, SSIM_WINDOW, SSIM_WINDOW
            ),
        ));
    }
    let c1 = T::from_f64(SSIM_K1 * SSIM_K1);
    let c2 = T::from_f64(SSIM_K2 * SSIM_K2);
    let two = T::from_f64(2.0);
    let window = gaussian_window::<T>();

    let pa = g.reflect_pad2d(a, pad)?;
    let pb = g.reflect_pad2d(b, pad)?;
    let mu_a = g.filter_depthwise(pa, &window)?;
    let mu_b = g.filter_depthwise(pb, &window)?;

    let pa_sq = g.square(pa)?;
    let pb_sq = g.square(pb)?;
    let pab = g.mul(pa, pb)?;
    let mu_a_sq = g.square(mu_a)?;
    let mu_b_sq = g.square(mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;

    let raw_a = g.filter_depthwise(pa_sq, &window)?;
    let raw_b = g.filter_depthwise(pb_sq, &window)?;
    let raw_ab = g.filter_depthwise(pab, &window)?;
    let var_a = g.sub(raw_a, mu_a_sq)?;
    let var_b = g.sub(raw_b, mu_b_sq)?;
    let cov = g.sub(raw_ab, mu_ab)?;

    let num_l = {
        let t = g.mul_scalar(mu_ab, two)?;
        g.add_scalar(t, c1)?
    };
    let num_c = {
        let t = g.mul_scalar(cov, two)?;
        g.add_scalar(t, c2)?
    };
    let den_l = {
        let t = g.add(mu_a_sq, mu_b_sq)?;
        g.add_scalar(t, c1)?
    };
    let den_c = {
        let t = g.add(var_a, var_b)?;
        g.add_scalar(t, c2)?
    };
    let num = g.mul(num_l, num_c)?;
    let den = g.mul(den_l, den_c)?;
    let map = g.div(num, den)?;
    let mean = g.mean_all(map)?;
    Ok(SsimOutput { mean, map })
}

enum ExtractorLayer<T: Scalar> {
    Conv {
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
    },
    Relu,
    MaxPool,
}

/// Fixed convolutional feature network for the perceptual loss.
///
/// Deterministic and never trained; gradients flow through it to the loss
/// inputs but its weights are registered as constants. The default is a
/// seeded four-layer stack (3→16→32→64 channels, stride 2 twice); weights
/// in the VGG16 `features.N` layout can be loaded instead.
pub struct FeatureExtractor<T: Scalar> {
    layers: Vec<ExtractorLayer<T>>,
}

/// Conv positions of the VGG16 feature stack, `features.N` indexing.
const VGG16_CONV_INDICES: [usize; 13] = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28];
/// Max-pool positions in the same indexing.
const VGG16_POOL_INDICES: [usize; 5] = [4, 9, 16, 23, 30];

impl<T: Scalar> FeatureExtractor<T> {
    pub fn seeded(seed: u64) -> Self {
        let plan: [(usize, usize, usize); 4] = [(3, 16, 1), (16, 32, 2), (32, 64, 2), (64, 64, 1)];
        let mut layers = Vec::new();
        for (i, (cin, cout, stride)) in plan.iter().enumerate() {
            let name = format!("fx.conv{i}.weight");
            let fan_in = cin * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let mut stream = rng::stream(seed, &name);
            let weight =
                Tensor::from_fn([*cout, *cin, 3, 3], |_| T::from_f64(stream.normal() * std));
            layers.push(ExtractorLayer::Conv {
                weight,
                bias: Tensor::zeros([*cout]),
                stride: *stride,
            });
            layers.push(ExtractorLayer::Relu);
        }
        FeatureExtractor { layers }
    }

    /// Builds a VGG16-layout extractor from `features.N.weight` /
    /// `features.N.bias` tensors. Convs must be present contiguously from
    /// `features.0`. `tap` selects the output position in the same indexing
    /// and defaults to the deepest pre-pooling relu covered by the file.
    pub fn from_named_tensors(
        tensors: &BTreeMap<String, Tensor<f32>>,
        tap: Option<usize>,
    ) -> Result<Self> {
        let mut convs: Vec<(usize, Tensor<T>, Tensor<T>)> = Vec::new();
        for &idx in VGG16_CONV_INDICES.iter() {
            let wname = format!("features.{idx}.weight");
            let bname = format!("features.{idx}.bias");
            match (tensors.get(&wname), tensors.get(&bname)) {
                (Some(w), Some(b)) => {
                    let (cout, _, kh, kw) = w.dims4().map_err(|_| {
                        Error::invalid(
                            "feature_extractor",
                            format!("`{wname}` is not a conv weight"),
                        )
                    })?;
                    if kh != 3 || kw != 3 || b.shape() != [cout] {
                        return Err(Error::invalid(
                            "feature_extractor",
                            format!("`{wname}` must be [C,C',3,3] with a matching bias"),
                        ));
                    }
                    convs.push((idx, w.cast(), b.cast()));
                }
                (None, None) => break,
                _ => {
                    return Err(Error::invalid(
                        "feature_extractor",
                        format!("`{wname}` and `{bname}` must both be present"),
                    ))
                }
            }
        }
        if convs.is_empty() {
            return Err(Error::invalid(
                "feature_extractor",
                "no `features.N` conv tensors found",
            ));
        }
        let deepest_conv = convs.last().unwrap().0;
        let default_tap = VGG16_POOL_INDICES
            .iter()
            .map(|p| p - 1) // the relu right before each pool
            .filter(|relu| relu - 1 <= deepest_conv)
            .max()
            .unwrap_or(deepest_conv + 1);
        let tap = tap.unwrap_or(default_tap);
        if tap > deepest_conv + 1 {
            return Err(Error::invalid(
                "feature_extractor",
                format!(
                    "tap {} is beyond the deepest conv ({}) in the file",
                    tap, deepest_conv
                ),
            ));
        }

        let mut layers = Vec::new();
        for (idx, weight, bias) in convs {
            if idx > tap {
                break;
            }
            layers.push(ExtractorLayer::Conv {
                weight,
                bias,
                stride: 1,
            });
            if idx < tap {
                layers.push(ExtractorLayer::Relu);
            }
            let pool_idx = idx + 2;
            if VGG16_POOL_INDICES.contains(&pool_idx) && pool_idx <= tap {
                layers.push(ExtractorLayer::MaxPool);
            }
        }
        Ok(FeatureExtractor { layers })
    }

    pub fn in_channels(&self) -> usize {
        match &self.layers[0] {
            ExtractorLayer::Conv { weight, .. } => weight.shape()[1],
            _ => unreachable!("extractor always starts with a conv"),
        }
    }

    /// Runs the stack. Single-channel inputs are replicated to the expected
    /// channel count.
    pub fn forward(&self, g: &mut Graph<T>, input: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(input).dims4()?;
        let expected = self.in_channels();
        let mut cur = input;
        if c != expected {
            if c == 1 {
                for _ in 0..expected - 1 {
                    cur = g.concat_channels(cur, input)?;
                }
            } else {
                return Err(Error::shape(
                    "feature_extractor",
                    format!(
                        "input has {} channels, extractor expects {} (or 1 to replicate)",
                        c, expected
                    ),
                ));
            }
        }
        for layer in &self.layers {
            cur = match layer {
                ExtractorLayer::Conv {
                    weight,
                    bias,
                    stride,
                } => {
                    let w = g.constant(weight.clone());
                    let b = g.constant(bias.clone());
                    g.conv2d(cur, w, b, *stride, 1)?
                }
                ExtractorLayer::Relu => g.relu(cur)?,
                ExtractorLayer::MaxPool => g.max_pool_2x2(cur)?,
            };
        }
        Ok(cur)
    }
}

/// Mean squared feature distance: `‖F(a) − F(b)‖² / (C·H·W)` with C, H, W
/// taken from the feature map, averaged over the batch.
pub fn perceptual_loss<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    extractor: &FeatureExtractor<T>,
) -> Result<Var> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::shape(
            "perceptual_loss",
            format!("{:?} vs {:?}", g.value(a).shape(), g.value(b).shape()),
        ));
    }
    let fa = extractor.forward(g, a)?;
    let fb = extractor.forward(g, b)?;
    let diff = g.sub(fa, fb)?;
    let sq = g.square(diff)?;
    g.mean_all(sq)
}

/// Stage-one enhancement loss: mean-L1 + gradient mean-L1 (both directions
/// summed) + perceptual distance. The optional negated SSIM term reproduces
/// the ablation arm that trains the enhancer with an SSIM objective.
pub fn stage1_loss<T: Scalar>(
    g: &mut Graph<T>,
    v_out: Var,
    v_high: Var,
    extractor: &FeatureExtractor<T>,
    with_ssim_term: bool,
) -> Result<(Var, LossReport)> {
    if g.value(v_out).shape() != g.value(v_high).shape() {
        return Err(Error::shape(
            "stage1_loss",
            format!(
                "{:?} vs {:?}",
                g.value(v_out).shape(),
                g.value(v_high).shape()
            ),
        ));
    }
    let diff = g.sub(v_out, v_high)?;
    let abs_diff = g.abs(diff)?;
    let l1 = g.mean_all(abs_diff)?;

    let (dh_out, dv_out) = gradient_map(g, v_out)?;
    let (dh_high, dv_high) = gradient_map(g, v_high)?;
    let gh = {
        let d = g.sub(dh_out, dh_high)?;
        let a = g.abs(d)?;
        g.mean_all(a)?
    };
    let gv = {
        let d = g.sub(dv_out, dv_high)?;
        let a = g.abs(d)?;
        g.mean_all(a)?
    };
    let grad = g.add(gh, gv)?;

    let perceptual = perceptual_loss(g, v_out, v_high, extractor)?;

    let partial = g.add(l1, grad)?;
    let mut total = g.add(partial, perceptual)?;
    let mut terms = vec![
        ("l1", g.scalar_value(l1).to_f64()),
        ("grad", g.scalar_value(grad).to_f64()),
        ("perceptual", g.scalar_value(perceptual).to_f64()),
    ];
    if with_ssim_term {
        let s = ssim(g, v_out, v_high)?;
        total = g.sub(total, s.mean)?;
        terms.push(("ssim", g.scalar_value(s.mean).to_f64()));
    }
    let report = LossReport {
        total: g.scalar_value(total).to_f64(),
        terms,
    };
    Ok((total, report))
}

/// Stage-two restoration loss: MSE − SSIM + gradient MSE. Minimum −1,
/// reached exactly when the prediction equals the target.
pub fn stage2_loss<T: Scalar>(
    g: &mut Graph<T>,
    i_out: Var,
    i_high: Var,
) -> Result<(Var, LossReport)> {
    if g.value(i_out).shape() != g.value(i_high).shape() {
        return Err(Error::shape(
            "stage2_loss",
            format!(
                "{:?} vs {:?}",
                g.value(i_out).shape(),
                g.value(i_high).shape()
            ),
        ));
    }
    let diff = g.sub(i_out, i_high)?;
    let sq = g.square(diff)?;
    let mse = g.mean_all(sq)?;

    let s = ssim(g, i_out, i_high)?;

    let (dh_out, dv_out) = gradient_map(g, i_out)?;
    let (dh_high, dv_high) = gradient_map(g, i_high)?;
    let gh = {
        let d = g.sub(dh_out, dh_high)?;
        let q = g.square(d)?;
        g.mean_all(q)?
    };
    let gv = {
        let d = g.sub(dv_out, dv_high)?;
        let q = g.square(d)?;
        g.mean_all(q)?
    };
    let grad = g.add(gh, gv)?;

    let partial = g.add(mse, grad)?;
    let total = g.sub(partial, s.mean)?;
    let report = LossReport {
        total: g.scalar_value(total).to_f64(),
        terms: vec![
            ("mse", g.scalar_value(mse).to_f64()),
            ("ssim", g.scalar_value(s.mean).to_f64()),
            ("grad", g.scalar_value(grad).to_f64()),
        ],
    };
    Ok((total, report))
}
