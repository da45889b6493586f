//! Two-stage training loops.
//!
//! Stage one trains the HSV-value enhancer; stage two trains the RGB
//! restorer against intermediates produced by the frozen stage-one network.
//! Runs are fully deterministic: batch composition and crop offsets are
//! pure functions of (seed, step, slot), and parameter init is seeded.

use std::collections::HashMap;

use tsnca_core::color::{self, RgbImage};
use tsnca_core::loss::{self, FeatureExtractor, LossReport};
use tsnca_core::nn::{self, NetworkParams, UNetConfig};
use tsnca_core::optim::Adam;
use tsnca_core::{Graph, Tensor};

use crate::checkpoint::{optimizer_table, Checkpoint, Role, StageFingerprint};
use crate::config::TrainConfig;
use crate::convert;
use crate::dataset::{crop_offsets, pair_index, DatasetIndex};
use crate::error::{Error, Result};

/// One CSV row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub terms: Vec<f64>,
    pub total: f64,
}

/// Per-step loss trajectory; serializes as `step,term...,total`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLog {
    pub term_names: Vec<&'static str>,
    pub rows: Vec<LossRow>,
}

impl LossLog {
    fn new(term_names: Vec<&'static str>) -> Self {
        LossLog {
            term_names,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, step: u64, report: &LossReport) {
        debug_assert_eq!(report.terms.len(), self.term_names.len());
        self.rows.push(LossRow {
            step,
            terms: report.terms.iter().map(|(_, v)| *v).collect(),
            total: report.total,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for name in &self.term_names {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",total\n");
        for row in &self.rows {
            out.push_str(&row.step.to_string());
            for term in &row.terms {
                out.push(',');
                out.push_str(&term.to_string());
            }
            out.push(',');
            out.push_str(&row.total.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: LossLog,
}

fn build_extractor(cfg: &TrainConfig) -> Result<FeatureExtractor<f32>> {
    match &cfg.vgg_weights {
        Some(path) => {
            let container = Checkpoint::load(path)?;
            Ok(FeatureExtractor::from_named_tensors(
                &container.tensors,
                cfg.vgg_tap,
            )?)
        }
        None => Ok(FeatureExtractor::seeded(cfg.seed)),
    }
}

fn check_crop(data: &DatasetIndex, crop: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset(
            "dataset contains no matched low/high pairs".into(),
        ));
    }
    let (min_h, min_w) = data.min_extents().expect("non-empty");
    if crop > min_h || crop > min_w {
        return Err(Error::Dataset(format!(
            "crop size {} exceeds the smallest image ({}x{})",
            crop, min_h, min_w
        )));
    }
    Ok(())
}

/// Cached, cropped batch for one step: pure function of (seed, step).
fn sample_batch(
    data: &DatasetIndex,
    cache: &mut HashMap<usize, (RgbImage, RgbImage)>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<(RgbImage, RgbImage)>> {
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for slot in 0..cfg.batch_size {
        let idx = pair_index(step, cfg.batch_size, slot, data.len());
        if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(idx) {
            let pair = data.load_pair(idx)?;
            e.insert(pair);
        }
        let (low, high) = &cache[&idx];
        let entry = &data.pairs[idx];
        let (oy, ox) = crop_offsets(
            cfg.seed,
            step,
            slot as u64,
            entry.height - cfg.crop_size,
            entry.width - cfg.crop_size,
        );
        let low_crop = low.crop(oy, ox, cfg.crop_size, cfg.crop_size)?;
        let high_crop = high.crop(oy, ox, cfg.crop_size, cfg.crop_size)?;
        batch.push((low_crop, high_crop));
    }
    Ok(batch)
}

/// Remaps a non-finite-value abort into a diagnosis carrying the step.
fn nan_guard(step: u64, err: tsnca_core::Error) -> Error {
    match err {
        tsnca_core::Error::NonFinite { op } => Error::NanLoss {
            step,
            detail: format!("`{op}` produced NaN/Inf"),
        },
        other => Error::Core(other),
    }
}

/// Trains the stage-one enhancer. With `max_steps = 0` the returned
/// checkpoint is exactly the seeded initialization.
pub fn train_stage1(data: &DatasetIndex, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Config(format!(
            "train_stage1 called with stage {}",
            cfg.stage
        )));
    }
    check_crop(data, cfg.crop_size)?;
    let net_config = cfg.enhancer_config();
    let mut params = nn::init_params::<f32>(&net_config, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam(), params.tensors().iter());
    let extractor = build_extractor(cfg)?;
    let mut cache = HashMap::new();
    let mut log = LossLog::new(if cfg.use_ssim_loss_stage1 {
        vec!["l1", "grad", "perceptual", "ssim"]
    } else {
        vec!["l1", "grad", "perceptual"]
    });

    for step in 1..=cfg.max_steps {
        let batch = sample_batch(data, &mut cache, cfg, step)?;
        let mut hsv_lows = Vec::with_capacity(batch.len());
        let mut target_planes = Vec::with_capacity(batch.len());
        for (low, high) in &batch {
            hsv_lows.push(color::rgb_to_hsv(low));
            target_planes.push(color::rgb_to_hsv(high).v().clone());
        }
        let input = convert::enhancer_input_batch(&hsv_lows, cfg.use_hs_input);
        let target = convert::plane_batch(&target_planes.iter().collect::<Vec<_>>());

        let mut g = Graph::new();
        let vars = params.register(&mut g, true);
        let x = g.constant(input);
        let t = g.constant(target);
        let out =
            nn::unet_forward(&mut g, x, &vars, &net_config).map_err(|e| nan_guard(step, e))?;
        let (total, report) =
            loss::stage1_loss(&mut g, out, t, &extractor, cfg.use_ssim_loss_stage1)
                .map_err(|e| nan_guard(step, e))?;
        if !report.total.is_finite() {
            return Err(Error::NanLoss {
                step,
                detail: format!("loss terms {:?}", report.terms),
            });
        }
        g.backward(total)?;
        let grads = nn::extract_grads(&g, &vars);
        adam.step(params.tensors_mut(), &grads)?;
        log.push(step, &report);
    }

    let fingerprint = StageFingerprint::enhancer(net_config, cfg.use_hs_input).encode();
    let checkpoint = Checkpoint {
        fingerprint,
        tensors: params.tensors().clone(),
        optimizer: Some(optimizer_table(&adam)),
        step: cfg.max_steps,
    };
    Ok(TrainOutcome { checkpoint, log })
}

/// Runs the frozen enhancer on a batch of HSV inputs, returning each item's
/// enhanced value plane.
pub fn run_enhancer_batch(
    params: &NetworkParams<f32>,
    net_config: &UNetConfig,
    hsv_inputs: &[tsnca_core::color::HsvImage],
    use_hs: bool,
) -> Result<Vec<tsnca_core::color::Plane>> {
    let input = convert::enhancer_input_batch(hsv_inputs, use_hs);
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let x = g.constant(input);
    let out = nn::unet_forward(&mut g, x, &vars, net_config)?;
    let out_tensor: &Tensor<f32> = g.value(out);
    (0..hsv_inputs.len())
        .map(|i| convert::tensor_channel_to_plane(out_tensor, i, 0))
        .collect()
}

/// Trains the stage-two restorer against intermediates from a frozen
/// stage-one checkpoint. Stage-one parameters receive no updates.
pub fn train_stage2(
    data: &DatasetIndex,
    stage1: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::Config(format!(
            "train_stage2 called with stage {}",
            cfg.stage
        )));
    }
    check_crop(data, cfg.crop_size)?;
    let stage1_fp = StageFingerprint::expect(stage1, Role::Enhancer)?;
    let stage1_params =
        NetworkParams::from_tensors(stage1.tensors.clone(), stage1_fp.config.fingerprint());
    stage1_params.validate_against(&stage1_fp.config)?;

    let net_config = cfg.restorer_config();
    let mut params = nn::init_params::<f32>(&net_config, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam(), params.tensors().iter());
    let mut cache = HashMap::new();
    let mut log = LossLog::new(vec!["mse", "ssim", "grad"]);

    for step in 1..=cfg.max_steps {
        let batch = sample_batch(data, &mut cache, cfg, step)?;
        let hsv_lows: Vec<_> = batch
            .iter()
            .map(|(low, _)| color::rgb_to_hsv(low))
            .collect();
        let enhanced_v = run_enhancer_batch(
            &stage1_params,
            &stage1_fp.config,
            &hsv_lows,
            stage1_fp.hs_input,
        )
        .map_err(|e| match e {
            Error::Core(err) => nan_guard(step, err),
            other => other,
        })?;
        let mut intermediates = Vec::with_capacity(batch.len());
        for (hsv_low, v_plane) in hsv_lows.iter().zip(enhanced_v) {
            let recombined = color::replace_value_channel(hsv_low, v_plane)?;
            intermediates.push(color::hsv_to_rgb(&recombined));
        }
        let input = convert::rgb_batch(&intermediates);
        let highs: Vec<RgbImage> = batch.iter().map(|(_, high)| high.clone()).collect();
        let target = convert::rgb_batch(&highs);

        let mut g = Graph::new();
        let vars = params.register(&mut g, true);
        let x = g.constant(input);
        let t = g.constant(target);
        let out =
            nn::unet_forward(&mut g, x, &vars, &net_config).map_err(|e| nan_guard(step, e))?;
        let (total, report) = loss::stage2_loss(&mut g, out, t).map_err(|e| nan_guard(step, e))?;
        if !report.total.is_finite() {
            return Err(Error::NanLoss {
                step,
                detail: format!("loss terms {:?}", report.terms),
            });
        }
        g.backward(total)?;
        let grads = nn::extract_grads(&g, &vars);
        adam.step(params.tensors_mut(), &grads)?;
        log.push(step, &report);
    }

    let fingerprint = StageFingerprint::restorer(net_config).encode();
    let checkpoint = Checkpoint {
        fingerprint,
        tensors: params.tensors().clone(),
        optimizer: Some(optimizer_table(&adam)),
        step: cfg.max_steps,
    };
    Ok(TrainOutcome { checkpoint, log })
}
