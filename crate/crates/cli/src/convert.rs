//! Plane/tensor bridging between the color module and the network.

use tsnca_core::color::{HsvImage, Plane, RgbImage};
use tsnca_core::Tensor;

use crate::error::Result;

/// Stacks enhancer inputs into `[B, 3, H, W]`: H, S, V when `use_hs` is
/// set, otherwise V replicated three times (the information ablation that
/// keeps the architecture fixed).
pub fn enhancer_input_batch(images: &[HsvImage], use_hs: bool) -> Tensor<f32> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for image in images {
        let planes: [&Plane; 3] = if use_hs {
            [image.h(), image.s(), image.v()]
        } else {
            [image.v(), image.v(), image.v()]
        };
        for plane in planes {
            data.extend_from_slice(plane.data());
        }
    }
    Tensor::new([images.len(), 3, h, w], data).expect("plane dimensions agree")
}

/// Stacks single planes into `[B, 1, H, W]`.
pub fn plane_batch(planes: &[&Plane]) -> Tensor<f32> {
    let (h, w) = (planes[0].height(), planes[0].width());
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for plane in planes {
        data.extend_from_slice(plane.data());
    }
    Tensor::new([planes.len(), 1, h, w], data).expect("plane dimensions agree")
}

/// Stacks RGB images into `[B, 3, H, W]`.
pub fn rgb_batch(images: &[RgbImage]) -> Tensor<f32> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for image in images {
        for plane in [image.r(), image.g(), image.b()] {
            data.extend_from_slice(plane.data());
        }
    }
    Tensor::new([images.len(), 3, h, w], data).expect("plane dimensions agree")
}

/// Extracts one channel of one batch item as a plane.
pub fn tensor_channel_to_plane(
    tensor: &Tensor<f32>,
    batch: usize,
    channel: usize,
) -> Result<Plane> {
    let (_, c, h, w) = tensor.dims4()?;
    let offset = (batch * c + channel) * h * w;
    let data = tensor.data()[offset..offset + h * w].to_vec();
    Ok(Plane::new(h, w, data)?)
}

/// Extracts one batch item as an RGB image (channels R, G, B).
pub fn tensor_to_rgb(tensor: &Tensor<f32>, batch: usize) -> Result<RgbImage> {
    let r = tensor_channel_to_plane(tensor, batch, 0)?;
    let g = tensor_channel_to_plane(tensor, batch, 1)?;
    let b = tensor_channel_to_plane(tensor, batch, 2)?;
    Ok(RgbImage::new(r, g, b)?)
}
