//! RGB ↔ HSV conversion and value-channel surgery.
//!
//! Images are stored as separate float planes in [0, 1]. Hue is normalized
//! to [0, 1) from the usual [0°, 360°) so that every network input shares
//! the same range; hue is defined as 0 wherever saturation is 0.

use crate::error::{Error, Result};

/// Single image channel: `height × width` values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "plane",
                format!(
                    "{}x{} plane needs {} values, got {}",
                    height,
                    width,
                    height * width,
                    data.len()
                ),
            ));
        }
        for &v in &data {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(
                    "plane",
                    format!("value {} outside [0, 1]", v),
                ));
            }
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Plane {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn full(height: usize, width: usize, value: f32) -> Result<Self> {
        Plane::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Plane> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::invalid(
                "crop",
                format!(
                    "{}x{} crop at ({}, {}) exceeds {}x{} plane",
                    height, width, y0, x0, self.height, self.width
                ),
            ));
        }
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let row = (y0 + y) * self.width + x0;
            data.extend_from_slice(&self.data[row..row + width]);
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }
}

/// RGB image with all channel values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    r: Plane,
    g: Plane,
    b: Plane,
}

/// HSV image; H in [0, 1), S and V in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct HsvImage {
    h: Plane,
    s: Plane,
    v: Plane,
}

fn check_same_dims(op: &'static str, planes: [(&Plane, &str); 3]) -> Result<()> {
    let (h, w) = (planes[0].0.height, planes[0].0.width);
    for (p, name) in &planes[1..] {
        if p.height != h || p.width != w {
            return Err(Error::shape(
                op,
                format!(
                    "plane `{}` is {}x{}, expected {}x{}",
                    name, p.height, p.width, h, w
                ),
            ));
        }
    }
    Ok(())
}

impl RgbImage {
    pub fn new(r: Plane, g: Plane, b: Plane) -> Result<Self> {
        check_same_dims("rgb_image", [(&r, "r"), (&g, "g"), (&b, "b")])?;
        Ok(RgbImage { r, g, b })
    }

    pub fn height(&self) -> usize {
        self.r.height
    }

    pub fn width(&self) -> usize {
        self.r.width
    }

    pub fn r(&self) -> &Plane {
        &self.r
    }

    pub fn g(&self) -> &Plane {
        &self.g
    }

    pub fn b(&self) -> &Plane {
        &self.b
    }

    pub fn pixel(&self, y: usize, x: usize) -> (f32, f32, f32) {
        (self.r.get(y, x), self.g.get(y, x), self.b.get(y, x))
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<RgbImage> {
        Ok(RgbImage {
            r: self.r.crop(y0, x0, height, width)?,
            g: self.g.crop(y0, x0, height, width)?,
            b: self.b.crop(y0, x0, height, width)?,
        })
    }
}

impl HsvImage {
    pub fn new(h: Plane, s: Plane, v: Plane) -> Result<Self> {
        check_same_dims("hsv_image", [(&h, "h"), (&s, "s"), (&v, "v")])?;
        for &hv in h.data() {
            if hv >= 1.0 {
                return Err(Error::invalid(
                    "hsv_image",
                    format!("hue {} outside [0, 1)", hv),
                ));
            }
        }
        Ok(HsvImage { h, s, v })
    }

    pub fn height(&self) -> usize {
        self.h.height
    }

    pub fn width(&self) -> usize {
        self.h.width
    }

    pub fn h(&self) -> &Plane {
        &self.h
    }

    pub fn s(&self) -> &Plane {
        &self.s
    }

    pub fn v(&self) -> &Plane {
        &self.v
    }
}

/// Hexcone conversion of one pixel; returns (h, s, v) with h in [0, 1).
pub fn rgb_pixel_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let v = r.max(g).max(b);
    let min = r.min(g).min(b);
    let range = v - min;
    if v == 0.0 || range == 0.0 {
        return (0.0, if v == 0.0 { 0.0 } else { range / v }, v);
    }
    let s = range / v;
    let h6 = if r == v {
        ((g - b) / range).rem_euclid(6.0)
    } else if g == v {
        (b - r) / range + 2.0
    } else {
        (r - g) / range + 4.0
    };
    let mut h = h6 / 6.0;
    if h >= 1.0 {
        // Rounding can push (6 − ε)/6 up to exactly 1; hue 1 wraps to 0.
        h = 0.0;
    }
    (h, s, v)
}

/// Inverse hexcone conversion of one pixel.
pub fn hsv_pixel_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    if s == 0.0 {
        return (v, v, v);
    }
    let h6 = h * 6.0;
    let sector = (h6 as usize).min(5);
    let f = h6 - sector as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0))
}

/// Decomposes an RGB image into hue, saturation and value planes.
pub fn rgb_to_hsv(image: &RgbImage) -> HsvImage {
    let (height, width) = (image.height(), image.width());
    let n = height * width;
    let mut h = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let (hp, sp, vp) = rgb_pixel_to_hsv(image.r.data[i], image.g.data[i], image.b.data[i]);
        h.push(hp);
        s.push(sp);
        v.push(vp);
    }
    HsvImage {
        h: Plane {
            height,
            width,
            data: h,
        },
        s: Plane {
            height,
            width,
            data: s,
        },
        v: Plane {
            height,
            width,
            data: v,
        },
    }
}

/// Recombines HSV planes into RGB. Outputs are clamped to [0, 1] only to
/// absorb sub-1e-6 rounding.
pub fn hsv_to_rgb(image: &HsvImage) -> RgbImage {
    let (height, width) = (image.height(), image.width());
    let n = height * width;
    let mut r = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let (rp, gp, bp) = hsv_pixel_to_rgb(image.h.data[i], image.s.data[i], image.v.data[i]);
        r.push(rp);
        g.push(gp);
        b.push(bp);
    }
    RgbImage {
        r: Plane {
            height,
            width,
            data: r,
        },
        g: Plane {
            height,
            width,
            data: g,
        },
        b: Plane {
            height,
            width,
            data: b,
        },
    }
}

/// Keeps the original hue and saturation, replacing only the value plane.
pub fn replace_value_channel(original: &HsvImage, new_v: Plane) -> Result<HsvImage> {
    if new_v.height != original.height() || new_v.width != original.width() {
        return Err(Error::shape(
            "replace_value_channel",
            format!(
                "replacement plane is {}x{}, image is {}x{}",
                new_v.height,
                new_v.width,
                original.height(),
                original.width()
            ),
        ));
    }
    for &v in new_v.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(
                "replace_value_channel",
                format!("value {} outside [0, 1]", v),
            ));
        }
    }
    Ok(HsvImage {
        h: original.h.clone(),
        s: original.s.clone(),
        v: new_v,
    })
}
