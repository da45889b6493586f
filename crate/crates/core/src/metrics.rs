//! Full-reference image quality and color fidelity metrics: PSNR, SSIM
//! (shared with the loss module), RMSE, UQI, SRER, spectral angle, angular
//! error statistics and CIEDE2000.
//!
//! All metrics are pure functions of the prediction/ground-truth pair and
//! are computed in f64.

use crate::autodiff::Graph;
use crate::color::RgbImage;
use crate::error::{Error, Result};
use crate::loss;
use crate::tensor::Tensor;

/// Scores for one prediction/ground-truth pair. `psnr` and `srer` are +inf
/// exactly when the pair is identical.
#[derive(Clone, Copy, Debug)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub uqi: f64,
    pub srer: f64,
    pub sam: f64,
    pub angular_mean: f64,
    pub angular_median: f64,
    pub delta_e: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "psnr,ssim,rmse,uqi,srer,sam,angular_mean,angular_median,delta_e";

    pub fn fields(&self) -> [f64; 9] {
        [
            self.psnr,
            self.ssim,
            self.rmse,
            self.uqi,
            self.srer,
            self.sam,
            self.angular_mean,
            self.angular_median,
            self.delta_e,
        ]
    }

    pub fn csv_row(&self) -> String {
        self.fields().map(|v| v.to_string()).join(",")
    }

    /// Per-field arithmetic mean over the reports, excluding non-finite
    /// sentinel values. A field that is non-finite in every report stays at
    /// the sentinel.
    pub fn mean_of(reports: &[MetricReport]) -> MetricReport {
        let mut means = [0.0f64; 9];
        for (i, mean) in means.iter_mut().enumerate() {
            let finite: Vec<f64> = reports
                .iter()
                .map(|r| r.fields()[i])
                .filter(|v| v.is_finite())
                .collect();
            *mean = if finite.is_empty() {
                reports.first().map(|r| r.fields()[i]).unwrap_or(f64::NAN)
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            };
        }
        MetricReport {
            psnr: means[0],
            ssim: means[1],
            rmse: means[2],
            uqi: means[3],
            srer: means[4],
            sam: means[5],
            angular_mean: means[6],
            angular_median: means[7],
            delta_e: means[8],
        }
    }
}

fn check_dims(op: &'static str, pred: &RgbImage, gt: &RgbImage) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(
            op,
            format!(
                "{}x{} vs {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    Ok(())
}

fn mse(pred: &RgbImage, gt: &RgbImage) -> f64 {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for (p, g) in [(pred.r(), gt.r()), (pred.g(), gt.g()), (pred.b(), gt.b())] {
        for (a, b) in p.data().iter().zip(g.data()) {
            let d = *a as f64 - *b as f64;
            acc += d * d;
            count += 1;
        }
    }
    acc / count as f64
}

/// Peak signal-to-noise ratio in dB over all pixels and channels, for
/// values in [0, 1]. +inf on identical inputs.
pub fn psnr(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_dims("psnr", pred, gt)?;
    let m = mse(pred, gt);
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

pub fn rmse(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_dims("rmse", pred, gt)?;
    Ok(mse(pred, gt).sqrt())
}

/// Mean SSIM, reusing the loss-module kernel on an f64 graph.
pub fn ssim(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_dims("ssim", pred, gt)?;
    let mut g = Graph::<f64>::new();
    let a = g.constant(rgb_to_tensor(pred));
    let b = g.constant(rgb_to_tensor(gt));
    let out = loss::ssim(&mut g, a, b)?;
    Ok(g.scalar_value(out.mean))
}

fn rgb_to_tensor(image: &RgbImage) -> Tensor<f64> {
    let (h, w) = (image.height(), image.width());
    let mut data = Vec::with_capacity(3 * h * w);
    for plane in [image.r(), image.g(), image.b()] {
        data.extend(plane.data().iter().map(|&v| v as f64));
    }
    Tensor::new([1, 3, h, w], data).expect("plane dimensions agree")
}

pub const UQI_WINDOW: usize = 8;

/// Universal quality index over 8x8 sliding windows (stride 1), averaged
/// across windows and channels. Windows with a zero denominator contribute
/// 1 when both the mean and variance statistics vanish (identically zero
/// content on both sides) and are skipped otherwise.
pub fn uqi(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_dims("uqi", pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    if h < UQI_WINDOW || w < UQI_WINDOW {
        return Err(Error::invalid(
            "uqi",
            format!(
                "image {}x{} smaller than the {}x{} window",
                h, w, UQI_WINDOW, UQI_WINDOW
            ),
        ));
    }
    let n = (UQI_WINDOW * UQI_WINDOW) as f64;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (p, g) in [(pred.r(), gt.r()), (pred.g(), gt.g()), (pred.b(), gt.b())] {
        for y0 in 0..=h - UQI_WINDOW {
            for x0 in 0..=w - UQI_WINDOW {
                let mut sx = 0.0f64;
                let mut sy = 0.0f64;
                let mut sxx = 0.0f64;
                let mut syy = 0.0f64;
                let mut sxy = 0.0f64;
                for dy in 0..UQI_WINDOW {
                    for dx in 0..UQI_WINDOW {
                        let a = p.get(y0 + dy, x0 + dx) as f64;
                        let b = g.get(y0 + dy, x0 + dx) as f64;
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let mx = sx / n;
                let my = sy / n;
                let vx = (sxx / n - mx * mx).max(0.0);
                let vy = (syy / n - my * my).max(0.0);
                let cxy = sxy / n - mx * my;
                let mean_term = mx * mx + my * my;
                let var_term = vx + vy;
                if mean_term == 0.0 && var_term == 0.0 {
                    sum += 1.0;
                    count += 1;
                } else if mean_term == 0.0 || var_term == 0.0 {
                    continue;
                } else {
                    sum += 4.0 * cxy * mx * my / (var_term * mean_term);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        // Degenerate pair where no window is measurable (e.g. two distinct
        // constant images).
        let identical = pred == gt;
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    Ok(sum / count as f64)
}

/// Signal-to-reconstruction-error ratio, `20·log10(‖gt‖ / ‖gt − pred‖)` in
/// dB; +inf on identical inputs.
pub fn srer(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_dims("srer", pred, gt)?;
    let mut signal = 0.0f64;
    let mut error = 0.0f64;
    for (p, g) in [(pred.r(), gt.r()), (pred.g(), gt.g()), (pred.b(), gt.b())] {
        for (a, b) in p.data().iter().zip(g.data()) {
            let bv = *b as f64;
            signal += bv * bv;
            let d = *a as f64 - bv;
            error += d * d;
        }
    }
    if error == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (signal.sqrt() / error.sqrt()).log10())
}

/// Per-pixel angles in degrees between prediction and ground-truth RGB
/// vectors. Pixels where either vector is zero are excluded: the angle is
/// undefined there. Computed as `2·atan2(‖û−v̂‖, ‖û+v̂‖)` over the unit
/// vectors, which is exact at 0° and stable near the extremes where
/// `acos` loses precision.
fn pixel_angles(pred: &RgbImage, gt: &RgbImage) -> Vec<f64> {
    let n = pred.height() * pred.width();
    let mut angles = Vec::with_capacity(n);
    let (pr, pg, pb) = (pred.r().data(), pred.g().data(), pred.b().data());
    let (gr, gg, gb) = (gt.r().data(), gt.g().data(), gt.b().data());
    for i in 0..n {
        let p = [pr[i] as f64, pg[i] as f64, pb[i] as f64];
        let q = [gr[i] as f64, gg[i] as f64, gb[i] as f64];
        let np = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let nq = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        if np == 0.0 || nq == 0.0 {
            continue;
        }
        let u = [p[0] / np, p[1] / np, p[2] / np];
        let v = [q[0] / nq, q[1] / nq, q[2] / nq];
        let diff = ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt();
        let sum = ((u[0] + v[0]).powi(2) + (u[1] + v[1]).powi(2) + (u[2] + v[2]).powi(2)).sqrt();
        angles.push((2.0 * diff.atan2(sum)).to_degrees());
    }
    angles
}

/// Mean spectral angle in degrees.
pub fn sam(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_dims("sam", pred, gt)?;
    let angles = pixel_angles(pred, gt);
    if angles.is_empty() {
        return Ok(0.0);
    }
    Ok(angles.iter().sum::<f64>() / angles.len() as f64)
}

/// Mean and median angular error in degrees. The median of an even count
/// is the midpoint of the two central values.
pub fn angular_error(pred: &RgbImage, gt: &RgbImage) -> Result<(f64, f64)> {
    check_dims("angular_error", pred, gt)?;
    let mut angles = pixel_angles(pred, gt);
    if angles.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mean = angles.iter().sum::<f64>() / angles.len() as f64;
    angles.sort_by(|a, b| a.partial_cmp(b).expect("angles are finite"));
    let n = angles.len();
    let median = if n % 2 == 1 {
        angles[n / 2]
    } else {
        0.5 * (angles[n / 2 - 1] + angles[n / 2])
    };
    Ok((mean, median))
}

// ── CIEDE2000 ───────────────────────────────────────────────────────────

fn srgb_channel_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB in [0, 1] to CIELAB under D65.
pub fn srgb_to_lab(r: f64, g: f64, b: f64) -> [f64; 3] {
    let rl = srgb_channel_to_linear(r);
    let gl = srgb_channel_to_linear(g);
    let bl = srgb_channel_to_linear(b);
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;

    let f = |t: f64| -> f64 {
        const DELTA3: f64 = 216.0 / 24389.0;
        const KAPPA: f64 = 24389.0 / 27.0;
        if t > DELTA3 {
            t.cbrt()
        } else {
            (KAPPA * t + 16.0) / 116.0
        }
    };
    let fx = f(x / 0.95047);
    let fy = f(y / 1.0);
    let fz = f(z / 1.08883);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIEDE2000 color difference between two Lab triples, kL = kC = kH = 1.
pub fn ciede2000_lab(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    const POW25_7: f64 = 6103515625.0; // 25^7
    let (l1, a1, b1) = (lab1[0], lab1[1], lab1[2]);
    let (l2, a2, b2) = (lab2[0], lab2[1], lab2[2]);

    let c1_ab = a1.hypot(b1);
    let c2_ab = a2.hypot(b2);
    let c_ab_mean = 0.5 * (c1_ab + c2_ab);
    let c_ab_mean7 = c_ab_mean.powi(7);
    let g = 0.5 * (1.0 - (c_ab_mean7 / (c_ab_mean7 + POW25_7)).sqrt());

    let a1p = a1 * (1.0 + g);
    let a2p = a2 * (1.0 + g);
    let c1p = a1p.hypot(b1);
    let c2p = a2p.hypot(b2);

    let hue = |a: f64, b: f64| -> f64 {
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            let h = b.atan2(a).to_degrees();
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1p = hue(a1p, b1);
    let h2p = hue(a2p, b2);

    let dl = l2 - l1;
    let dc = c2p - c1p;
    let dh_angle = if c1p * c2p == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d.abs() <= 180.0 {
            d
        } else if d > 180.0 {
            d - 360.0
        } else {
            d + 360.0
        }
    };
    let dh = 2.0 * (c1p * c2p).sqrt() * (dh_angle.to_radians() / 2.0).sin();

    let l_mean = 0.5 * (l1 + l2);
    let c_mean = 0.5 * (c1p + c2p);
    let h_mean = if c1p * c2p == 0.0 {
        h1p + h2p
    } else {
        let diff = (h1p - h2p).abs();
        let sum = h1p + h2p;
        if diff <= 180.0 {
            0.5 * sum
        } else if sum < 360.0 {
            0.5 * (sum + 360.0)
        } else {
            0.5 * (sum - 360.0)
        }
    };

    let t = 1.0 - 0.17 * (h_mean - 30.0).to_radians().cos()
        + 0.24 * (2.0 * h_mean).to_radians().cos()
        + 0.32 * (3.0 * h_mean + 6.0).to_radians().cos()
        - 0.20 * (4.0 * h_mean - 63.0).to_radians().cos();

    let l_shift = (l_mean - 50.0) * (l_mean - 50.0);
    let sl = 1.0 + 0.015 * l_shift / (20.0 + l_shift).sqrt();
    let sc = 1.0 + 0.045 * c_mean;
    let sh = 1.0 + 0.015 * c_mean * t;

    let d_theta = 30.0 * (-((h_mean - 275.0) / 25.0) * ((h_mean - 275.0) / 25.0)).exp();
    let c_mean7 = c_mean.powi(7);
    let rc = 2.0 * (c_mean7 / (c_mean7 + POW25_7)).sqrt();
    let rt = -(2.0 * d_theta).to_radians().sin() * rc;

    let tl = dl / sl;
    let tc = dc / sc;
    let th = dh / sh;
    (tl * tl + tc * tc + th * th + rt * tc * th).sqrt()
}

/// Mean CIEDE2000 over all pixels, converting each sRGB pixel to Lab first.
pub fn delta_e2000(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_dims("delta_e2000", pred, gt)?;
    let n = pred.height() * pred.width();
    let (pr, pg, pb) = (pred.r().data(), pred.g().data(), pred.b().data());
    let (gr, gg, gb) = (gt.r().data(), gt.g().data(), gt.b().data());
    let mut acc = 0.0f64;
    for i in 0..n {
        let lab_p = srgb_to_lab(pr[i] as f64, pg[i] as f64, pb[i] as f64);
        let lab_g = srgb_to_lab(gr[i] as f64, gg[i] as f64, gb[i] as f64);
        acc += ciede2000_lab(lab_p, lab_g);
    }
    Ok(acc / n as f64)
}

/// Runs every metric on one pair.
pub fn evaluate_pair(pred: &RgbImage, gt: &RgbImage) -> Result<MetricReport> {
    let (angular_mean, angular_median) = angular_error(pred, gt)?;
    Ok(MetricReport {
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        rmse: rmse(pred, gt)?,
        uqi: uqi(pred, gt)?,
        srer: srer(pred, gt)?,
        sam: sam(pred, gt)?,
        angular_mean,
        angular_median,
        delta_e: delta_e2000(pred, gt)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::Plane;
    use crate::rng::SplitMix64;

    fn constant_image(h: usize, w: usize, r: f32, g: f32, b: f32) -> RgbImage {
        RgbImage::new(
            Plane::full(h, w, r).unwrap(),
            Plane::full(h, w, g).unwrap(),
            Plane::full(h, w, b).unwrap(),
        )
        .unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = SplitMix64::new(seed);
        let plane = |rng: &mut SplitMix64| {
            Plane::new(h, w, (0..h * w).map(|_| rng.next_f64() as f32).collect()).unwrap()
        };
        RgbImage::new(plane(&mut rng), plane(&mut rng), plane(&mut rng)).unwrap()
    }

    #[test]
    fn psnr_is_infinite_only_on_identical_images() {
        let img = random_image(16, 16, 1);
        assert!(psnr(&img, &img).unwrap().is_infinite());
        let zeros = constant_image(16, 16, 0.0, 0.0, 0.0);
        let ones = constant_image(16, 16, 1.0, 1.0, 1.0);
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
    }

    #[test]
    fn psnr_of_uniform_half_difference() {
        let a = constant_image(8, 8, 0.5, 0.5, 0.5);
        let b = constant_image(8, 8, 1.0, 1.0, 1.0);
        let v = psnr(&a, &b).unwrap();
        assert!((v - 10.0 * 4.0f64.log10()).abs() < 1e-9, "psnr {v}");
    }

    #[test]
    fn rmse_anchors() {
        let zeros = constant_image(8, 8, 0.0, 0.0, 0.0);
        let ones = constant_image(8, 8, 1.0, 1.0, 1.0);
        assert_eq!(rmse(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(rmse(&zeros, &ones).unwrap(), 1.0);
    }

    #[test]
    fn rmse_matches_scalar_loop() {
        let a = random_image(12, 12, 2);
        let b = random_image(12, 12, 3);
        let mut acc = 0.0f64;
        for (p, g) in [(a.r(), b.r()), (a.g(), b.g()), (a.b(), b.b())] {
            for (x, y) in p.data().iter().zip(g.data()) {
                let d = *x as f64 - *y as f64;
                acc += d * d;
            }
        }
        let expected = (acc / (3.0 * 144.0)).sqrt();
        assert!((rmse(&a, &b).unwrap() - expected).abs() < 1e-7);
    }

    #[test]
    fn uqi_of_non_constant_image_with_itself_is_one() {
        let img = random_image(16, 16, 4);
        let v = uqi(&img, &img).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "uqi {v}");
    }

    #[test]
    fn uqi_detects_anticorrelation() {
        // Images mirrored around 0.5: x and 1 − x have strictly negative
        // covariance, driving the index negative.
        let mut rng = SplitMix64::new(5);
        let h = 16;
        let data: Vec<f32> = (0..h * h)
            .map(|_| 0.25 + 0.5 * rng.next_f64() as f32)
            .collect();
        let p1 = Plane::new(h, h, data.clone()).unwrap();
        let inverted: Vec<f32> = data.iter().map(|v| 1.0 - v).collect();
        let p2 = Plane::new(h, h, inverted).unwrap();
        let a = RgbImage::new(p1.clone(), p1.clone(), p1).unwrap();
        let b = RgbImage::new(p2.clone(), p2.clone(), p2).unwrap();
        let v = uqi(&a, &b).unwrap();
        assert!(v < 0.0, "uqi {v}");
    }

    #[test]
    fn uqi_matches_double_loop_oracle() {
        let a = random_image(12, 12, 6);
        let b = random_image(12, 12, 7);
        let got = uqi(&a, &b).unwrap();

        let n = 64.0f64;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (p, g) in [(a.r(), b.r()), (a.g(), b.g()), (a.b(), b.b())] {
            for y0 in 0..=12 - 8 {
                for x0 in 0..=12 - 8 {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for dy in 0..8 {
                        for dx in 0..8 {
                            xs.push(p.get(y0 + dy, x0 + dx) as f64);
                            ys.push(g.get(y0 + dy, x0 + dx) as f64);
                        }
                    }
                    let mx = xs.iter().sum::<f64>() / n;
                    let my = ys.iter().sum::<f64>() / n;
                    let vx = xs.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
                    let vy = ys.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
                    let cxy = xs
                        .iter()
                        .zip(&ys)
                        .map(|(x, y)| (x - mx) * (y - my))
                        .sum::<f64>()
                        / n;
                    let d1 = mx * mx + my * my;
                    let d2 = vx + vy;
                    if d1 == 0.0 && d2 == 0.0 {
                        sum += 1.0;
                        count += 1;
                    } else if d1 == 0.0 || d2 == 0.0 {
                        continue;
                    } else {
                        sum += 4.0 * cxy * mx * my / (d1 * d2);
                        count += 1;
                    }
                }
            }
        }
        let expected = sum / count as f64;
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn srer_anchors() {
        let img = random_image(8, 8, 8);
        assert!(srer(&img, &img).unwrap().is_infinite());

        // Zero prediction: error norm equals signal norm, hence 0 dB.
        let zeros = constant_image(8, 8, 0.0, 0.0, 0.0);
        let v = srer(&zeros, &img).unwrap();
        assert!(v.abs() < 1e-9, "srer {v}");

        // Constant images: 20·log10(1 / 0.1) ≈ 20 dB, with 0.1 quantized
        // to the f32 difference actually stored in the image.
        let ones = constant_image(8, 8, 1.0, 1.0, 1.0);
        let nine = constant_image(8, 8, 0.9, 0.9, 0.9);
        let v = srer(&nine, &ones).unwrap();
        let expected = 20.0 * (1.0 / (1.0 - 0.9f32) as f64).log10();
        assert!((v - expected).abs() < 1e-9, "srer {v} vs {expected}");
        assert!((v - 20.0).abs() < 1e-4, "srer {v} far from 20 dB");
    }

    #[test]
    fn sam_anchors() {
        let img = random_image(8, 8, 9);
        assert_eq!(sam(&img, &img).unwrap(), 0.0);

        // Scale invariance: doubling one side changes no angles (values
        // chosen small enough that nothing clamps).
        let mut rng = SplitMix64::new(10);
        let half = RgbImage::new(
            Plane::new(4, 4, (0..16).map(|_| 0.4 * rng.next_f64() as f32).collect()).unwrap(),
            Plane::new(4, 4, (0..16).map(|_| 0.4 * rng.next_f64() as f32).collect()).unwrap(),
            Plane::new(4, 4, (0..16).map(|_| 0.4 * rng.next_f64() as f32).collect()).unwrap(),
        )
        .unwrap();
        let doubled = RgbImage::new(
            Plane::new(4, 4, half.r().data().iter().map(|v| 2.0 * v).collect()).unwrap(),
            Plane::new(4, 4, half.g().data().iter().map(|v| 2.0 * v).collect()).unwrap(),
            Plane::new(4, 4, half.b().data().iter().map(|v| 2.0 * v).collect()).unwrap(),
        )
        .unwrap();
        let reference = random_image(4, 4, 11);
        let a = sam(&half, &reference).unwrap();
        let b = sam(&doubled, &reference).unwrap();
        assert!((a - b).abs() < 1e-9);

        // Orthogonal colors: pure red vs pure green is 90 degrees.
        let red = constant_image(4, 4, 1.0, 0.0, 0.0);
        let green = constant_image(4, 4, 0.0, 1.0, 0.0);
        assert!((sam(&red, &green).unwrap() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn angular_error_of_constructed_distribution() {
        // Top half aligned (0 degrees), bottom half orthogonal (90): mean
        // and midpoint-median both 45.
        let h = 4;
        let w = 4;
        let mut pr = vec![0.0f32; h * w];
        let gr = vec![1.0f32; h * w];
        let mut pg = vec![0.0f32; h * w];
        for i in 0..h * w {
            if i < h * w / 2 {
                pr[i] = 1.0;
            } else {
                pg[i] = 1.0;
            }
        }
        let pred = RgbImage::new(
            Plane::new(h, w, pr).unwrap(),
            Plane::new(h, w, pg).unwrap(),
            Plane::new(h, w, vec![0.0; h * w]).unwrap(),
        )
        .unwrap();
        let gt = RgbImage::new(
            Plane::new(h, w, gr).unwrap(),
            Plane::new(h, w, vec![0.0; h * w]).unwrap(),
            Plane::new(h, w, vec![0.0; h * w]).unwrap(),
        )
        .unwrap();
        let (mean, median) = angular_error(&pred, &gt).unwrap();
        assert!((mean - 45.0).abs() < 1e-9);
        assert!((median - 45.0).abs() < 1e-9);
    }

    #[test]
    fn angular_error_matches_sort_based_oracle() {
        let a = random_image(8, 8, 12);
        let b = random_image(8, 8, 13);
        let (mean, median) = angular_error(&a, &b).unwrap();
        let mut angles = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                let p = a.pixel(y, x);
                let q = b.pixel(y, x);
                let (p, q) = (
                    [p.0 as f64, p.1 as f64, p.2 as f64],
                    [q.0 as f64, q.1 as f64, q.2 as f64],
                );
                let np = (p.iter().map(|v| v * v).sum::<f64>()).sqrt();
                let nq = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
                if np == 0.0 || nq == 0.0 {
                    continue;
                }
                let dot: f64 = p.iter().zip(&q).map(|(x, y)| x * y).sum();
                angles.push((dot / (np * nq)).clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let exp_mean = angles.iter().sum::<f64>() / angles.len() as f64;
        let n = angles.len();
        let exp_median = if n % 2 == 1 {
            angles[n / 2]
        } else {
            0.5 * (angles[n / 2 - 1] + angles[n / 2])
        };
        assert!((mean - exp_mean).abs() < 1e-6);
        assert!((median - exp_median).abs() < 1e-6);
        assert!((sam(&a, &b).unwrap() - exp_mean).abs() < 1e-6);
    }

    #[test]
    fn delta_e_is_zero_on_identical_images_and_symmetric() {
        let img = random_image(8, 8, 14);
        assert_eq!(delta_e2000(&img, &img).unwrap(), 0.0);

        let mut rng = SplitMix64::new(15);
        for _ in 0..1000 {
            let lab1 = [
                100.0 * rng.next_f64(),
                200.0 * rng.next_f64() - 100.0,
                200.0 * rng.next_f64() - 100.0,
            ];
            let lab2 = [
                100.0 * rng.next_f64(),
                200.0 * rng.next_f64() - 100.0,
                200.0 * rng.next_f64() - 100.0,
            ];
            let d1 = ciede2000_lab(lab1, lab2);
            let d2 = ciede2000_lab(lab2, lab1);
            assert!((d1 - d2).abs() < 1e-9, "asymmetry {d1} vs {d2}");
        }
    }

    #[test]
    fn psnr_strictly_decreases_with_noise_amplitude() {
        let base = {
            let mut rng = SplitMix64::new(16);
            let plane = |rng: &mut SplitMix64| {
                Plane::new(
                    32,
                    32,
                    (0..1024)
                        .map(|_| 0.3 + 0.4 * rng.next_f64() as f32)
                        .collect(),
                )
                .unwrap()
            };
            RgbImage::new(plane(&mut rng), plane(&mut rng), plane(&mut rng)).unwrap()
        };
        let mut last = f64::INFINITY;
        for amplitude in [0.01f32, 0.05, 0.1, 0.2] {
            let mut rng = SplitMix64::new(17);
            let noisy = RgbImage::new(
                noisy_plane(base.r(), amplitude, &mut rng),
                noisy_plane(base.g(), amplitude, &mut rng),
                noisy_plane(base.b(), amplitude, &mut rng),
            )
            .unwrap();
            let v = psnr(&noisy, &base).unwrap();
            assert!(
                v < last,
                "psnr {v} did not decrease from {last} at amplitude {amplitude}"
            );
            last = v;
        }
    }

    fn noisy_plane(p: &Plane, amplitude: f32, rng: &mut SplitMix64) -> Plane {
        let data = p
            .data()
            .iter()
            .map(|&v| (v + amplitude * (2.0 * rng.next_f64() as f32 - 1.0)).clamp(0.0, 1.0))
            .collect();
        Plane::new(p.height(), p.width(), data).unwrap()
    }

    #[test]
    fn evaluate_pair_identical_hits_all_anchors() {
        let img = random_image(16, 16, 18);
        let report = evaluate_pair(&img, &img).unwrap();
        assert!(report.psnr.is_infinite());
        assert!((report.ssim - 1.0).abs() < 1e-9);
        assert_eq!(report.rmse, 0.0);
        assert!((report.uqi - 1.0).abs() < 1e-9);
        assert!(report.srer.is_infinite());
        assert_eq!(report.sam, 0.0);
        assert_eq!(report.angular_mean, 0.0);
        assert_eq!(report.angular_median, 0.0);
        assert_eq!(report.delta_e, 0.0);
    }

    #[test]
    fn evaluate_pair_extreme_constant_images() {
        let zeros = constant_image(16, 16, 0.0, 0.0, 0.0);
        let ones = constant_image(16, 16, 1.0, 1.0, 1.0);
        let report = evaluate_pair(&zeros, &ones).unwrap();
        assert_eq!(report.psnr, 0.0);
        assert_eq!(report.rmse, 1.0);
    }

    #[test]
    fn evaluate_pair_delegates_to_standalone_metrics() {
        let a = random_image(16, 16, 19);
        let b = random_image(16, 16, 20);
        let report = evaluate_pair(&a, &b).unwrap();
        assert_eq!(report.psnr, psnr(&a, &b).unwrap());
        assert_eq!(report.ssim, ssim(&a, &b).unwrap());
        assert_eq!(report.rmse, rmse(&a, &b).unwrap());
        assert_eq!(report.uqi, uqi(&a, &b).unwrap());
        assert_eq!(report.srer, srer(&a, &b).unwrap());
        assert_eq!(report.sam, sam(&a, &b).unwrap());
        assert_eq!(report.delta_e, delta_e2000(&a, &b).unwrap());
    }

    #[test]
    fn angle_metrics_are_scale_invariant() {
        let a = random_image(8, 8, 21);
        let b = random_image(8, 8, 22);
        let scaled = RgbImage::new(
            Plane::new(8, 8, a.r().data().iter().map(|v| 0.5 * v).collect()).unwrap(),
            Plane::new(8, 8, a.g().data().iter().map(|v| 0.5 * v).collect()).unwrap(),
            Plane::new(8, 8, a.b().data().iter().map(|v| 0.5 * v).collect()).unwrap(),
        )
        .unwrap();
        assert!((sam(&a, &b).unwrap() - sam(&scaled, &b).unwrap()).abs() < 1e-9);
        let (m1, d1) = angular_error(&a, &b).unwrap();
        let (m2, d2) = angular_error(&scaled, &b).unwrap();
        assert!((m1 - m2).abs() < 1e-9);
        assert!((d1 - d2).abs() < 1e-9);
    }
}
