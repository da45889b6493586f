//! 8-bit PNG input/output. Samples map to [0, 1] as v/255 with no gamma
//! handling; quantization back is round(v·255) clamped to [0, 255].

use std::path::Path;

use tsnca_core::color::{Plane, RgbImage};

use crate::error::{Error, Result};

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let decoded = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let mut r = Vec::with_capacity(height * width);
    let mut g = Vec::with_capacity(height * width);
    let mut b = Vec::with_capacity(height * width);
    for pixel in decoded.pixels() {
        r.push(pixel.0[0] as f32 / 255.0);
        g.push(pixel.0[1] as f32 / 255.0);
        b.push(pixel.0[2] as f32 / 255.0);
    }
    let make = |data: Vec<f32>| Plane::new(height, width, data);
    Ok(RgbImage::new(make(r)?, make(g)?, make(b)?)?)
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn save_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    let (height, width) = (image.height(), image.width());
    let mut buf = image::RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let (r, g, b) = image.pixel(y, x);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([quantize(r), quantize(g), quantize(b)]),
            );
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn save_gray(path: &Path, plane: &Plane) -> Result<()> {
    let (height, width) = (plane.height(), plane.width());
    let mut buf = image::GrayImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            buf.put_pixel(x as u32, y as u32, image::Luma([quantize(plane.get(y, x))]));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((h as usize, w as usize))
}
