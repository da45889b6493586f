//! Network building blocks: squeeze-and-excitation channel attention and the
//! U-Net used by both pipeline stages.
//!
//! The encoder downsamples with stride-2 convolutions (plain stacks without
//! up-and-down sampling tend to amplify noise); the decoder upsamples with
//! nearest-neighbor followed by a 3x3 convolution to avoid checkerboard
//! artifacts. When channel attention is enabled, every skip tensor passes
//! through its own SE block before concatenation with the upsampled path.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalActivation {
    Sigmoid,
    Identity,
}

impl FinalActivation {
    fn as_str(self) -> &'static str {
        match self {
            FinalActivation::Sigmoid => "sigmoid",
            FinalActivation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(FinalActivation::Sigmoid),
            "identity" => Ok(FinalActivation::Identity),
            other => Err(Error::invalid(
                "fingerprint",
                format!("unknown activation `{}`", other),
            )),
        }
    }
}

/// U-Net architecture description. Channel widths double per level starting
/// at `base_channels`; spatial input extents must be divisible by
/// `2^depth`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub with_channel_attention: bool,
    pub se_reduction: usize,
    pub final_activation: FinalActivation,
}

pub const DEFAULT_BASE_CHANNELS: usize = 8;
pub const DEFAULT_DEPTH: usize = 3;
pub const DEFAULT_SE_REDUCTION: usize = 4;

impl UNetConfig {
    /// Stage-one enhancer: `[H, S, V]` in, denoised V out.
    pub fn enhancer(base_channels: usize, depth: usize) -> Self {
        UNetConfig {
            in_channels: 3,
            out_channels: 1,
            base_channels,
            depth,
            with_channel_attention: false,
            se_reduction: DEFAULT_SE_REDUCTION,
            final_activation: FinalActivation::Sigmoid,
        }
    }

    /// Stage-two restorer: RGB in, RGB out, channel attention optional.
    pub fn restorer(base_channels: usize, depth: usize, with_channel_attention: bool) -> Self {
        UNetConfig {
            in_channels: 3,
            out_channels: 3,
            base_channels,
            depth,
            with_channel_attention,
            se_reduction: DEFAULT_SE_REDUCTION,
            final_activation: FinalActivation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("unet_config", "depth must be at least 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid(
                "unet_config",
                "channel counts must be positive",
            ));
        }
        if self.with_channel_attention
            && (self.se_reduction == 0 || !self.base_channels.is_multiple_of(self.se_reduction))
        {
            return Err(Error::invalid(
                "unet_config",
                format!(
                    "SE reduction {} must divide base channels {}",
                    self.se_reduction, self.base_channels
                ),
            ));
        }
        Ok(())
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Canonical architecture string; stored in checkpoints and compared on
    /// load, and parseable back into a config.
    pub fn fingerprint(&self) -> String {
        format!(
            "unet(in={},out={},base={},depth={},ca={},r={},act={})",
            self.in_channels,
            self.out_channels,
            self.base_channels,
            self.depth,
            self.with_channel_attention,
            self.se_reduction,
            self.final_activation.as_str()
        )
    }

    pub fn from_fingerprint(s: &str) -> Result<Self> {
        let inner = s
            .strip_prefix("unet(")
            .and_then(|rest| rest.strip_suffix(')'))
            .ok_or_else(|| {
                Error::invalid("fingerprint", format!("not a unet fingerprint: `{}`", s))
            })?;
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for part in inner.split(',') {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                Error::invalid("fingerprint", format!("malformed field `{}`", part))
            })?;
            fields.insert(k, v);
        }
        let get = |key: &str| -> Result<&str> {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| Error::invalid("fingerprint", format!("missing field `{}`", key)))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse::<usize>()
                .map_err(|_| Error::invalid("fingerprint", format!("bad integer for `{}`", key)))
        };
        let config = UNetConfig {
            in_channels: parse_usize("in")?,
            out_channels: parse_usize("out")?,
            base_channels: parse_usize("base")?,
            depth: parse_usize("depth")?,
            with_channel_attention: match get("ca")? {
                "true" => true,
                "false" => false,
                other => {
                    return Err(Error::invalid(
                        "fingerprint",
                        format!("bad boolean `{}`", other),
                    ))
                }
            },
            se_reduction: parse_usize("r")?,
            final_activation: FinalActivation::parse(get("act")?)?,
        };
        config.validate()?;
        Ok(config)
    }

    /// All parameter names and their shapes, in canonical (sorted) order.
    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        let conv = |shapes: &mut BTreeMap<String, Vec<usize>>,
                    name: String,
                    cout: usize,
                    cin: usize,
                    k: usize| {
            shapes.insert(format!("{name}.weight"), vec![cout, cin, k, k]);
            shapes.insert(format!("{name}.bias"), vec![cout]);
        };
        for l in 0..self.depth {
            let c = self.channels_at(l);
            let cin = if l == 0 { self.in_channels } else { c };
            conv(&mut shapes, format!("enc{l}.conv0"), c, cin, 3);
            conv(&mut shapes, format!("enc{l}.conv1"), c, c, 3);
            conv(
                &mut shapes,
                format!("down{l}.conv"),
                self.channels_at(l + 1),
                c,
                3,
            );
            if self.with_channel_attention {
                let bottleneck = c / self.se_reduction;
                shapes.insert(format!("skip{l}.se.fc1.weight"), vec![bottleneck, c]);
                shapes.insert(format!("skip{l}.se.fc1.bias"), vec![bottleneck]);
                shapes.insert(format!("skip{l}.se.fc2.weight"), vec![c, bottleneck]);
                shapes.insert(format!("skip{l}.se.fc2.bias"), vec![c]);
            }
        }
        let mid = self.channels_at(self.depth);
        conv(&mut shapes, "mid.conv0".to_string(), mid, mid, 3);
        conv(&mut shapes, "mid.conv1".to_string(), mid, mid, 3);
        for l in 0..self.depth {
            let c = self.channels_at(l);
            conv(
                &mut shapes,
                format!("dec{l}.up"),
                c,
                self.channels_at(l + 1),
                3,
            );
            conv(&mut shapes, format!("dec{l}.conv0"), c, 2 * c, 3);
            conv(&mut shapes, format!("dec{l}.conv1"), c, c, 3);
        }
        conv(
            &mut shapes,
            "head".to_string(),
            self.out_channels,
            self.base_channels,
            1,
        );
        shapes
    }
}

/// Named parameter tensors for one network, tied to the architecture that
/// generated them.
#[derive(Clone, Debug)]
pub struct NetworkParams<T: Scalar> {
    tensors: BTreeMap<String, Tensor<T>>,
    fingerprint: String,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn from_tensors(tensors: BTreeMap<String, Tensor<T>>, fingerprint: String) -> Self {
        NetworkParams {
            tensors,
            fingerprint,
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Checks that the name set and every shape match the config exactly.
    pub fn validate_against(&self, config: &UNetConfig) -> Result<()> {
        let expected = config.expected_shapes();
        let missing: Vec<&String> = expected
            .keys()
            .filter(|k| !self.tensors.contains_key(*k))
            .collect();
        let extra: Vec<&String> = self
            .tensors
            .keys()
            .filter(|k| !expected.contains_key(*k))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::ParameterSetMismatch(format!(
                "missing {:?}, unexpected {:?}",
                missing, extra
            )));
        }
        for (name, shape) in &expected {
            let got = self.tensors[name].shape();
            if got != shape.as_slice() {
                return Err(Error::ParameterSetMismatch(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    name, got, shape
                )));
            }
        }
        Ok(())
    }

    /// Inserts every tensor into a graph as a leaf and returns the handles.
    pub fn register(&self, graph: &mut Graph<T>, trainable: bool) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(name, tensor)| (name.clone(), graph.leaf(tensor.clone(), trainable)))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

/// He-normal tensor, sampled in f64 and cast so that every precision sees
/// the same values. The stream is keyed by (seed, name): adding or removing
/// a layer never perturbs the other layers' initialization.
fn init_tensor<T: Scalar>(seed: u64, name: &str, shape: &[usize]) -> Tensor<T> {
    if name.ends_with(".bias") {
        return Tensor::zeros(shape.to_vec());
    }
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let mut stream = rng::stream(seed, name);
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(stream.normal() * std))
}

/// Deterministic seeded initialization: He-normal weights, zero biases.
pub fn init_params<T: Scalar>(config: &UNetConfig, seed: u64) -> Result<NetworkParams<T>> {
    config.validate()?;
    let tensors = config
        .expected_shapes()
        .iter()
        .map(|(name, shape)| (name.clone(), init_tensor(seed, name, shape)))
        .collect();
    Ok(NetworkParams {
        tensors,
        fingerprint: config.fingerprint(),
    })
}

/// Squeeze-and-excitation parameters: a two-layer bottleneck over channel
/// means. With the reference setting of 64 channels and reduction 4, the
/// bottleneck width is 16.
#[derive(Clone, Debug)]
pub struct SeBlockParams<T: Scalar> {
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

impl<T: Scalar> SeBlockParams<T> {
    pub fn init(channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::invalid(
                "se_block",
                format!(
                    "reduction {} must divide channel count {}",
                    reduction, channels
                ),
            ));
        }
        let bottleneck = channels / reduction;
        Ok(SeBlockParams {
            fc1_weight: init_tensor(seed, "se.fc1.weight", &[bottleneck, channels]),
            fc1_bias: init_tensor(seed, "se.fc1.bias", &[bottleneck]),
            fc2_weight: init_tensor(seed, "se.fc2.weight", &[channels, bottleneck]),
            fc2_bias: init_tensor(seed, "se.fc2.bias", &[channels]),
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1_weight.shape()[1]
    }

    pub fn bottleneck(&self) -> usize {
        self.fc1_weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.fc1_weight.numel()
            + self.fc1_bias.numel()
            + self.fc2_weight.numel()
            + self.fc2_bias.numel()
    }
}

/// Graph handles for one SE block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct SeBlockVars {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// Squeeze (global average pool), excite (fc → relu → fc → sigmoid), then
/// reweight the feature map per channel. Shape-preserving.
pub fn se_block_forward_vars<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    vars: SeBlockVars,
) -> Result<Var> {
    let (n, c, _, _) = g.value(features).dims4()?;
    let fc1_in = g.value(vars.fc1_weight).shape()[1];
    if fc1_in != c {
        return Err(Error::shape(
            "se_block",
            format!(
                "features have {} channels but the block expects {}",
                c, fc1_in
            ),
        ));
    }
    let squeezed = g.global_avg_pool(features)?;
    let flat = g.reshape(squeezed, [n, c])?;
    let hidden = g.linear(flat, vars.fc1_weight, vars.fc1_bias)?;
    let hidden = g.relu(hidden)?;
    let excitation = g.linear(hidden, vars.fc2_weight, vars.fc2_bias)?;
    let excitation = g.sigmoid(excitation)?;
    let gate = g.reshape(excitation, [n, c, 1, 1])?;
    g.broadcast_mul(features, gate)
}

/// SE forward with parameters supplied as plain tensors (registered as
/// non-trainable leaves).
pub fn se_block_forward<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    params: &SeBlockParams<T>,
) -> Result<Var> {
    let vars = SeBlockVars {
        fc1_weight: g.constant(params.fc1_weight.clone()),
        fc1_bias: g.constant(params.fc1_bias.clone()),
        fc2_weight: g.constant(params.fc2_weight.clone()),
        fc2_bias: g.constant(params.fc2_bias.clone()),
    };
    se_block_forward_vars(g, features, vars)
}

fn fetch(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::UnknownParameter(name.to_string()))
}

fn conv3x3<T: Scalar>(
    g: &mut Graph<T>,
    vars: &BTreeMap<String, Var>,
    input: Var,
    name: &str,
    stride: usize,
) -> Result<Var> {
    let w = fetch(vars, &format!("{name}.weight"))?;
    let b = fetch(vars, &format!("{name}.bias"))?;
    g.conv2d(input, w, b, stride, 1)
}

fn conv_block<T: Scalar>(
    g: &mut Graph<T>,
    vars: &BTreeMap<String, Var>,
    input: Var,
    name: &str,
) -> Result<Var> {
    let out = conv3x3(g, vars, input, name, 1)?;
    g.relu(out)
}

/// Full U-Net forward pass. Output spatial size equals the input's; SE
/// blocks gate each skip tensor when channel attention is on.
pub fn unet_forward<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    vars: &BTreeMap<String, Var>,
    config: &UNetConfig,
) -> Result<Var> {
    config.validate()?;
    let (_, c, h, w) = g.value(input).dims4()?;
    if c != config.in_channels {
        return Err(Error::shape(
            "unet_forward",
            format!(
                "input has {} channels, config expects {}",
                c, config.in_channels
            ),
        ));
    }
    let factor = 1usize << config.depth;
    if h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "unet_forward",
            format!(
                "spatial extents {}x{} must be divisible by 2^depth = {}",
                h, w, factor
            ),
        ));
    }

    let mut cur = input;
    let mut skips = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        cur = conv_block(g, vars, cur, &format!("enc{l}.conv0"))?;
        cur = conv_block(g, vars, cur, &format!("enc{l}.conv1"))?;
        skips.push(cur);
        // Pure resampling operators: the stride-2 (and mirrored upsample)
        // convs carry no activation.
        cur = conv3x3(g, vars, cur, &format!("down{l}.conv"), 2)?;
    }
    cur = conv_block(g, vars, cur, "mid.conv0")?;
    cur = conv_block(g, vars, cur, "mid.conv1")?;
    for l in (0..config.depth).rev() {
        cur = g.upsample_nearest_2x(cur)?;
        cur = conv3x3(g, vars, cur, &format!("dec{l}.up"), 1)?;
        let mut skip = skips[l];
        if config.with_channel_attention {
            let se = SeBlockVars {
                fc1_weight: fetch(vars, &format!("skip{l}.se.fc1.weight"))?,
                fc1_bias: fetch(vars, &format!("skip{l}.se.fc1.bias"))?,
                fc2_weight: fetch(vars, &format!("skip{l}.se.fc2.weight"))?,
                fc2_bias: fetch(vars, &format!("skip{l}.se.fc2.bias"))?,
            };
            skip = se_block_forward_vars(g, skip, se)?;
        }
        cur = g.concat_channels(skip, cur)?;
        cur = conv_block(g, vars, cur, &format!("dec{l}.conv0"))?;
        cur = conv_block(g, vars, cur, &format!("dec{l}.conv1"))?;
    }
    let head_w = fetch(vars, "head.weight")?;
    let head_b = fetch(vars, "head.bias")?;
    let out = g.conv2d(cur, head_w, head_b, 1, 0)?;
    match config.final_activation {
        FinalActivation::Sigmoid => g.sigmoid(out),
        FinalActivation::Identity => Ok(out),
    }
}

/// Collects populated gradients for every registered parameter.
pub fn extract_grads<T: Scalar>(
    g: &Graph<T>,
    vars: &BTreeMap<String, Var>,
) -> BTreeMap<String, Vec<T>> {
    vars.iter()
        .filter_map(|(name, var)| g.grad(*var).map(|grad| (name.clone(), grad.to_vec())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_bit_deterministic_per_seed() {
        let config = UNetConfig::enhancer(4, 2);
        let a = init_params::<f32>(&config, 7).unwrap();
        let b = init_params::<f32>(&config, 7).unwrap();
        for (name, t) in a.tensors() {
            assert_eq!(t, &b.tensors()[name], "tensor {name} differs");
        }
        let c = init_params::<f32>(&config, 8).unwrap();
        assert!(a.tensors().iter().any(|(name, t)| t != &c.tensors()[name]));
    }

    #[test]
    fn he_initialization_hits_target_stddev() {
        // down1.conv.weight of a base-16 net has 64*32*9 = 18432 samples.
        let config = UNetConfig::restorer(16, 2, false);
        let params = init_params::<f32>(&config, 3).unwrap();
        let w = params.get("down1.conv.weight").unwrap();
        assert!(w.numel() >= 10_000);
        let fan_in = 32 * 9;
        let target = (2.0 / fan_in as f64).sqrt();
        let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / w.numel() as f64;
        let var = w
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / w.numel() as f64;
        let std = var.sqrt();
        assert!(
            (std - target).abs() / target < 0.2,
            "stddev {std} vs He target {target}"
        );
    }

    #[test]
    fn channel_attention_adds_exactly_the_se_names() {
        let with = UNetConfig::restorer(8, 3, true);
        let without = UNetConfig::restorer(8, 3, false);
        let names_with: Vec<String> = with.expected_shapes().keys().cloned().collect();
        let names_without: Vec<String> = without.expected_shapes().keys().cloned().collect();
        let extra: Vec<&String> = names_with
            .iter()
            .filter(|n| !names_without.contains(n))
            .collect();
        assert_eq!(
            extra.len(),
            3 * 4,
            "one fc1/fc2 weight+bias quartet per level"
        );
        assert!(extra.iter().all(|n| n.contains(".se.")));
        assert!(names_without.iter().all(|n| names_with.contains(n)));
    }

    #[test]
    fn se_shapes_match_the_reference_setting() {
        let se = SeBlockParams::<f32>::init(64, 4, 0).unwrap();
        assert_eq!(se.fc1_weight.shape(), &[16, 64]);
        assert_eq!(se.fc2_weight.shape(), &[64, 16]);
        assert_eq!(se.bottleneck(), 16);
        // Closed-form parameter count: 2·C·C/r weights + C/r + C biases.
        assert_eq!(se.param_count(), 2 * 64 * 16 + 16 + 64);
    }

    #[test]
    fn se_unit_gate_is_identity() {
        // Zero fc2 weight and a large positive fc2 bias saturate the
        // sigmoid at exactly 1, so the block must pass features through.
        let mut se = SeBlockParams::<f32>::init(8, 4, 1).unwrap();
        se.fc2_weight = Tensor::zeros([8, 2]);
        se.fc2_bias = Tensor::full([8], 100.0);
        let mut rng = crate::rng::SplitMix64::new(2);
        let features = Tensor::from_fn([2, 8, 5, 5], |_| rng.next_f64() as f32);
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let out = se_block_forward(&mut g, f, &se).unwrap();
        for (a, b) in g.value(out).data().iter().zip(features.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn se_all_zero_parameters_halve_the_features() {
        let se = SeBlockParams::<f32> {
            fc1_weight: Tensor::zeros([2, 8]),
            fc1_bias: Tensor::zeros([2]),
            fc2_weight: Tensor::zeros([8, 2]),
            fc2_bias: Tensor::zeros([8]),
        };
        let mut rng = crate::rng::SplitMix64::new(3);
        let features = Tensor::from_fn([1, 8, 4, 4], |_| rng.next_f64() as f32);
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let out = se_block_forward(&mut g, f, &se).unwrap();
        for (a, b) in g.value(out).data().iter().zip(features.data()) {
            assert!((a - 0.5 * b).abs() < 1e-7);
        }
    }

    #[test]
    fn se_channel_mismatch_is_an_error() {
        let se = SeBlockParams::<f32>::init(8, 4, 1).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::<f32>::zeros([1, 4, 4, 4]));
        assert!(se_block_forward(&mut g, f, &se).is_err());
    }

    #[test]
    fn unet_preserves_spatial_shape_and_sigmoid_range() {
        for (base, depth) in [(4, 1), (4, 2), (8, 3)] {
            let config = UNetConfig::restorer(base, depth, true);
            let params = init_params::<f32>(&config, 11).unwrap();
            let mut g = Graph::new();
            let vars = params.register(&mut g, false);
            let mut rng = crate::rng::SplitMix64::new(4);
            let size = 1usize << depth.max(3);
            let input = g.constant(Tensor::from_fn([1, 3, size, size], |_| {
                rng.next_f64() as f32
            }));
            let out = unet_forward(&mut g, input, &vars, &config).unwrap();
            assert_eq!(g.value(out).shape(), &[1, 3, size, size]);
            assert!(g
                .value(out)
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn fresh_enhancer_backward_reaches_most_parameters() {
        let config = UNetConfig::enhancer(4, 2);
        let params = init_params::<f32>(&config, 21).unwrap();
        let mut g = Graph::new();
        let vars = params.register(&mut g, true);
        let input = g.constant(Tensor::full([1, 3, 32, 32], 0.5));
        let out = unet_forward(&mut g, input, &vars, &config).unwrap();
        assert!(g.value(out).all_finite());
        let loss = g.sum_all(out).unwrap();
        g.backward(loss).unwrap();
        let grads = extract_grads(&g, &vars);
        for grad in grads.values() {
            assert!(grad.iter().all(|v| v.is_finite()));
        }
        assert_eq!(
            grads.len(),
            vars.len(),
            "every parameter must receive a gradient"
        );
        // A constant input leaves some relu channels dead, so individual
        // elements may be zero; the bound is over named parameters.
        let live = grads
            .values()
            .filter(|grad| grad.iter().any(|&v| v != 0.0))
            .count();
        assert!(
            live as f64 > 0.9 * grads.len() as f64,
            "only {live}/{} parameters received nonzero gradient",
            grads.len()
        );
    }

    #[test]
    fn indivisible_extents_are_rejected() {
        let config = UNetConfig::enhancer(4, 3);
        let params = init_params::<f32>(&config, 0).unwrap();
        let mut g = Graph::new();
        let vars = params.register(&mut g, false);
        let input = g.constant(Tensor::<f32>::zeros([1, 3, 20, 20]));
        assert!(unet_forward(&mut g, input, &vars, &config).is_err());
    }

    #[test]
    fn fingerprint_round_trips() {
        let config = UNetConfig::restorer(8, 3, true);
        let fp = config.fingerprint();
        assert_eq!(UNetConfig::from_fingerprint(&fp).unwrap(), config);
        assert!(UNetConfig::from_fingerprint("unet(in=3)").is_err());
        assert!(UNetConfig::from_fingerprint("garbage").is_err());
    }

    #[test]
    fn validate_against_flags_missing_and_reshaped_tensors() {
        let config = UNetConfig::enhancer(4, 1);
        let mut params = init_params::<f32>(&config, 5).unwrap();
        params.validate_against(&config).unwrap();
        let removed = params.tensors_mut().remove("head.bias").unwrap();
        assert!(params.validate_against(&config).is_err());
        params.tensors_mut().insert("head.bias".into(), removed);
        params
            .tensors_mut()
            .insert("head.bias".into(), Tensor::zeros([7]));
        assert!(params.validate_against(&config).is_err());
    }
}
