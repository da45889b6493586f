//! End-to-end inference and directory evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use tsnca_core::color::{self, Plane, RgbImage};
use tsnca_core::metrics::{self, MetricReport};
use tsnca_core::nn::NetworkParams;
use tsnca_core::{Graph, Tensor};

use crate::checkpoint::{Checkpoint, Role, StageFingerprint};
use crate::convert;
use crate::error::{Error, Result};
use crate::imageio;
use crate::train::run_enhancer_batch;

#[derive(Debug)]
pub struct EnhanceOutput {
    /// Final restored image, original dimensions.
    pub output: RgbImage,
    /// Stage-one enhanced value plane (ablation/debug dump).
    pub enhanced_v: Plane,
    /// Recombined RGB fed to stage two (the "input of stage two").
    pub intermediate: RgbImage,
}

fn reflect_extend_plane(plane: &Plane, new_h: usize, new_w: usize) -> Result<Plane> {
    let (h, w) = (plane.height(), plane.width());
    if new_h >= 2 * h || new_w >= 2 * w {
        return Err(Error::Other(format!(
            "image {}x{} too small to reflect-pad to {}x{}",
            h, w, new_h, new_w
        )));
    }
    let mut data = Vec::with_capacity(new_h * new_w);
    for y in 0..new_h {
        let sy = if y < h { y } else { 2 * h - 2 - y };
        for x in 0..new_w {
            let sx = if x < w { x } else { 2 * w - 2 - x };
            data.push(plane.get(sy, sx));
        }
    }
    Ok(Plane::new(new_h, new_w, data)?)
}

/// Pads an image on the bottom/right by reflection up to the next multiple
/// of `factor`; `crop` undoes it.
fn reflect_extend_rgb(image: &RgbImage, factor: usize) -> Result<RgbImage> {
    let round_up = |v: usize| v.div_ceil(factor) * factor;
    let (new_h, new_w) = (round_up(image.height()), round_up(image.width()));
    if (new_h, new_w) == (image.height(), image.width()) {
        return Ok(image.clone());
    }
    Ok(RgbImage::new(
        reflect_extend_plane(image.r(), new_h, new_w)?,
        reflect_extend_plane(image.g(), new_h, new_w)?,
        reflect_extend_plane(image.b(), new_h, new_w)?,
    )?)
}

/// Full pipeline on one image: HSV decomposition, stage-one value
/// enhancement, recombination with the original hue/saturation, RGB
/// restoration. Inputs whose extents are not divisible by the network
/// stride are reflect-padded and cropped back.
pub fn enhance_image(
    low: &RgbImage,
    stage1: &Checkpoint,
    stage2: &Checkpoint,
) -> Result<EnhanceOutput> {
    let fp1 = StageFingerprint::expect(stage1, Role::Enhancer)?;
    let fp2 = StageFingerprint::expect(stage2, Role::Restorer)?;
    let params1 = NetworkParams::from_tensors(stage1.tensors.clone(), fp1.config.fingerprint());
    params1.validate_against(&fp1.config)?;
    let params2 = NetworkParams::from_tensors(stage2.tensors.clone(), fp2.config.fingerprint());
    params2.validate_against(&fp2.config)?;

    let (orig_h, orig_w) = (low.height(), low.width());
    let factor = 1usize << fp1.config.depth.max(fp2.config.depth);
    let padded = reflect_extend_rgb(low, factor)?;

    let hsv = color::rgb_to_hsv(&padded);
    let v_planes = run_enhancer_batch(
        &params1,
        &fp1.config,
        std::slice::from_ref(&hsv),
        fp1.hs_input,
    )?;
    let enhanced_v = v_planes.into_iter().next().expect("batch of one");
    let recombined = color::replace_value_channel(&hsv, enhanced_v.clone())?;
    let intermediate = color::hsv_to_rgb(&recombined);

    let input = convert::rgb_batch(std::slice::from_ref(&intermediate));
    let mut g = Graph::new();
    let vars = params2.register(&mut g, false);
    let x = g.constant(input);
    let out = tsnca_core::nn::unet_forward(&mut g, x, &vars, &fp2.config)?;
    let out_tensor: &Tensor<f32> = g.value(out);
    let restored = convert::tensor_to_rgb(out_tensor, 0)?;

    Ok(EnhanceOutput {
        output: restored.crop(0, 0, orig_h, orig_w)?,
        enhanced_v: enhanced_v.crop(0, 0, orig_h, orig_w)?,
        intermediate: intermediate.crop(0, 0, orig_h, orig_w)?,
    })
}

/// One evaluation report row: metrics, or the reason this pair failed.
pub struct EvalRow {
    pub name: String,
    pub result: std::result::Result<MetricReport, String>,
}

pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub aggregate: Option<MetricReport>,
}

fn list_files(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_file() {
            files.insert(
                entry.file_name().to_string_lossy().into_owned(),
                entry.path(),
            );
        }
    }
    Ok(files)
}

/// Pairs prediction and ground-truth files by name and scores each pair.
/// A file that fails to pair or decode becomes an error row; it never
/// aborts the rest of the report.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvalOutcome> {
    let preds = list_files(pred_dir)?;
    let mut gts = list_files(gt_dir)?;
    let mut rows = Vec::new();
    for (name, pred_path) in preds {
        let row = match gts.remove(&name) {
            None => EvalRow {
                name,
                result: Err(format!("no matching file in {}", gt_dir.display())),
            },
            Some(gt_path) => {
                let result = (|| -> std::result::Result<MetricReport, String> {
                    let pred = imageio::load_rgb(&pred_path).map_err(|e| e.to_string())?;
                    let gt = imageio::load_rgb(&gt_path).map_err(|e| e.to_string())?;
                    metrics::evaluate_pair(&pred, &gt).map_err(|e| e.to_string())
                })();
                EvalRow { name, result }
            }
        };
        rows.push(row);
    }
    for (name, _) in gts {
        rows.push(EvalRow {
            name,
            result: Err(format!("no matching file in {}", pred_dir.display())),
        });
    }
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    let reports: Vec<MetricReport> = rows
        .iter()
        .filter_map(|r| r.result.as_ref().ok())
        .copied()
        .collect();
    let aggregate = if reports.is_empty() {
        None
    } else {
        Some(MetricReport::mean_of(&reports))
    };
    Ok(EvalOutcome { rows, aggregate })
}

/// CSV report: header, one row per image, then the aggregate `mean` row.
pub fn evaluation_csv(outcome: &EvalOutcome) -> String {
    let mut out = format!("image,{}\n", MetricReport::CSV_HEADER);
    for row in &outcome.rows {
        match &row.result {
            Ok(report) => {
                out.push_str(&row.name);
                out.push(',');
                out.push_str(&report.csv_row());
            }
            Err(reason) => {
                let clean = reason.replace([',', '\n'], ";");
                out.push_str(&format!("{},error:{}", row.name, clean));
            }
        }
        out.push('\n');
    }
    if let Some(aggregate) = &outcome.aggregate {
        out.push_str("mean,");
        out.push_str(&aggregate.csv_row());
        out.push('\n');
    }
    out
}
