//! Helpers for unit tests: self-cleaning temp directories and synthetic
//! PNG fixtures.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use tsnca_core::color::{Plane, RgbImage};
use tsnca_core::rng::SplitMix64;

static COUNTER: AtomicU64 = AtomicU64::new(0);

pub struct TempDir {
    path: PathBuf,
}

impl TempDir {
    pub fn new(label: &str) -> Self {
        let path = std::env::temp_dir().join(format!(
            "tsnca-test-{}-{}-{}",
            label,
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&path).expect("create temp dir");
        TempDir { path }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.path);
    }
}

pub fn random_rgb(height: usize, width: usize, seed: u64) -> RgbImage {
    let mut rng = SplitMix64::new(seed);
    let plane = |rng: &mut SplitMix64| {
        Plane::new(
            height,
            width,
            (0..height * width).map(|_| rng.next_f64() as f32).collect(),
        )
        .unwrap()
    };
    RgbImage::new(plane(&mut rng), plane(&mut rng), plane(&mut rng)).unwrap()
}

pub fn write_test_png(path: &Path, height: usize, width: usize, seed: u64) {
    crate::imageio::save_rgb(path, &random_rgb(height, width, seed)).expect("write test png");
}

/// A smooth low/high pair: the low image is the high image scaled down in
/// brightness with mild noise, which is what stage one learns to invert.
pub fn write_paired_pngs(low: &Path, high: &Path, height: usize, width: usize, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    let n = height * width;
    let mut high_planes = Vec::new();
    let mut low_planes = Vec::new();
    for _ in 0..3 {
        let phase = rng.next_f64() * std::f64::consts::TAU;
        let fy = 1.0 + rng.next_f64() * 3.0;
        let fx = 1.0 + rng.next_f64() * 3.0;
        let mut high_data = Vec::with_capacity(n);
        let mut low_data = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                let v = 0.55
                    + 0.35
                        * ((y as f64 / height as f64 * fy + x as f64 / width as f64 * fx)
                            * std::f64::consts::TAU
                            + phase)
                            .sin();
                let noise = (rng.next_f64() - 0.5) * 0.06;
                high_data.push(v.clamp(0.0, 1.0) as f32);
                low_data.push((v * 0.22 + noise).clamp(0.0, 1.0) as f32);
            }
        }
        high_planes.push(Plane::new(height, width, high_data).unwrap());
        low_planes.push(Plane::new(height, width, low_data).unwrap());
    }
    let take = |planes: &mut Vec<Plane>| planes.remove(0);
    let high_img = RgbImage::new(
        take(&mut high_planes),
        take(&mut high_planes),
        take(&mut high_planes),
    )
    .unwrap();
    let low_img = RgbImage::new(
        take(&mut low_planes),
        take(&mut low_planes),
        take(&mut low_planes),
    )
    .unwrap();
    crate::imageio::save_rgb(high, &high_img).expect("write high png");
    crate::imageio::save_rgb(low, &low_img).expect("write low png");
}
