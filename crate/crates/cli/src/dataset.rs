//! Paired dataset discovery and deterministic crop sampling.
//!
//! Pairs are matched by identical file name across a low/ and high/
//! directory; files without a counterpart are reported, never silently
//! dropped. Crop offsets are a pure function of (seed, step, slot) so batch
//! composition replays exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use tsnca_core::color::RgbImage;
use tsnca_core::rng;

use crate::error::{Error, Result};
use crate::imageio;

#[derive(Clone, Debug)]
pub struct PairEntry {
    pub name: String,
    pub low: PathBuf,
    pub high: PathBuf,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub pairs: Vec<PairEntry>,
    pub unmatched_low: Vec<String>,
    pub unmatched_high: Vec<String>,
}

fn list_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut files = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            files.insert(entry.file_name().to_string_lossy().into_owned(), path);
        }
    }
    Ok(files)
}

impl DatasetIndex {
    /// Walks both directories, pairs files by name, and verifies that every
    /// pair agrees on image dimensions.
    pub fn scan(low_dir: &Path, high_dir: &Path) -> Result<Self> {
        let low = list_files(low_dir)?;
        let mut high = list_files(high_dir)?;
        let mut pairs = Vec::new();
        let mut unmatched_low = Vec::new();
        for (name, low_path) in low {
            match high.remove(&name) {
                Some(high_path) => {
                    let (lh, lw) = imageio::dimensions(&low_path)?;
                    let (hh, hw) = imageio::dimensions(&high_path)?;
                    if (lh, lw) != (hh, hw) {
                        return Err(Error::Dataset(format!(
                            "pair `{name}` has mismatched dimensions: low {lh}x{lw}, high {hh}x{hw}"
                        )));
                    }
                    pairs.push(PairEntry {
                        name,
                        low: low_path,
                        high: high_path,
                        height: lh,
                        width: lw,
                    });
                }
                None => unmatched_low.push(name),
            }
        }
        let unmatched_high: Vec<String> = high.into_keys().collect();
        Ok(DatasetIndex {
            pairs,
            unmatched_low,
            unmatched_high,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load_pair(&self, index: usize) -> Result<(RgbImage, RgbImage)> {
        let entry = &self.pairs[index];
        Ok((
            imageio::load_rgb(&entry.low)?,
            imageio::load_rgb(&entry.high)?,
        ))
    }

    /// Smallest height/width across the dataset, for crop validation.
    pub fn min_extents(&self) -> Option<(usize, usize)> {
        let h = self.pairs.iter().map(|p| p.height).min()?;
        let w = self.pairs.iter().map(|p| p.width).min()?;
        Some((h, w))
    }
}

/// Deterministic crop origin for one batch slot of one step.
pub fn crop_offsets(seed: u64, step: u64, slot: u64, max_y: usize, max_x: usize) -> (usize, usize) {
    let mut stream = rng::stream3(seed, step, slot);
    let y = if max_y == 0 {
        0
    } else {
        stream.below(max_y + 1)
    };
    let x = if max_x == 0 {
        0
    } else {
        stream.below(max_x + 1)
    };
    (y, x)
}

/// Round-robin pair index for one batch slot of one step (1-based steps).
pub fn pair_index(step: u64, batch_size: usize, slot: usize, dataset_len: usize) -> usize {
    (((step - 1) as usize) * batch_size + slot) % dataset_len
}
