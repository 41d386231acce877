//! RGB frames, square crops around a target, and conversion to network input.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::nn::Tensor;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("frame dimensions must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} RGB frame needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let k = (y * self.width + x) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn put_pixel(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let k = (y * self.width + x) * 3;
        self.data[k..k + 3].copy_from_slice(&color);
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut sum = [0u64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as u64;
            }
        }
        let n = (self.width * self.height) as f64;
        sum.map(|s| s as f64 / n)
    }

    pub fn bounds(&self) -> BBox {
        BBox {
            x1: 0.0,
            y1: 0.0,
            x2: (self.width - 1) as f64,
            y2: (self.height - 1) as f64,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer size checked at construction");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("cannot write image {}: {e}", path.display())))
    }
}

/// Affine map between a square crop and frame pixels:
/// `frame = center + (crop - (size - 1) / 2) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub center: Point,
    /// Frame pixels per crop pixel.
    pub scale: f64,
    pub size: usize,
}

impl CropTransform {
    /// Crop of `size` pixels covering a `side`-pixel square of the frame.
    pub fn new(center: Point, side: f64, size: usize) -> Result<Self> {
        if !(side > 0.0 && side.is_finite()) || size == 0 {
            return Err(Error::invalid(format!("crop side {side} / size {size} must be positive")));
        }
        Ok(Self {
            center,
            scale: side / size as f64,
            size,
        })
    }

    fn half(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }

    pub fn to_frame(&self, p: Point) -> Point {
        Point::new(
            self.center.x + (p.x - self.half()) * self.scale,
            self.center.y + (p.y - self.half()) * self.scale,
        )
    }

    pub fn to_crop(&self, p: Point) -> Point {
        Point::new(
            (p.x - self.center.x) / self.scale + self.half(),
            (p.y - self.center.y) / self.scale + self.half(),
        )
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let a = self.to_frame(Point::new(b.x1, b.y1));
        let c = self.to_frame(Point::new(b.x2, b.y2));
        BBox {
            x1: a.x,
            y1: a.y,
            x2: c.x,
            y2: c.y,
        }
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let a = self.to_crop(Point::new(b.x1, b.y1));
        let c = self.to_crop(Point::new(b.x2, b.y2));
        BBox {
            x1: a.x,
            y1: a.y,
            x2: c.x,
            y2: c.y,
        }
    }
}

/// Square float image, planar RGB with values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let plane = self.size * self.size;
        let k = y * self.size + x;
        [self.data[k], self.data[plane + k], self.data[2 * plane + k]]
    }

    /// Network input scaling: `v / 255 - 0.5`.
    pub fn normalized(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|v| v / 255.0 - 0.5)
    }
}

/// Stack patches of one size into an `[N, 3, S, S]` network input.
pub fn batch_tensor(patches: &[&Patch]) -> Result<Tensor> {
    let first = patches
        .first()
        .ok_or_else(|| Error::invalid("empty patch batch"))?;
    let s = first.size;
    let mut data = Vec::with_capacity(patches.len() * 3 * s * s);
    for p in patches {
        if p.size != s {
            return Err(Error::shape(format!("patch sizes {s} and {} in one batch", p.size)));
        }
        data.extend(p.normalized());
    }
    Tensor::from_vec(&[patches.len(), 3, s, s], data)
}

/// Bilinear resampling of the frame under `t`; samples outside the frame
/// take the `pad` color.
pub fn crop(frame: &Frame, t: &CropTransform, pad: [f64; 3]) -> Patch {
    let n = t.size;
    let plane = n * n;
    let mut data = vec![0.0; 3 * plane];
    let (w, h) = (frame.width as isize, frame.height as isize);
    let fetch = |x: isize, y: isize| -> [f64; 3] {
        if x < 0 || y < 0 || x >= w || y >= h {
            pad
        } else {
            frame.pixel(x as usize, y as usize).map(f64::from)
        }
    };
    for v in 0..n {
        for u in 0..n {
            let p = t.to_frame(Point::new(u as f64, v as f64));
            let x0 = p.x.floor();
            let y0 = p.y.floor();
            let fx = p.x - x0;
            let fy = p.y - y0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            let a = fetch(xi, yi);
            let b = fetch(xi + 1, yi);
            let c = fetch(xi, yi + 1);
            let d = fetch(xi + 1, yi + 1);
            for ch in 0..3 {
                let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                let bot = c[ch] * (1.0 - fx) + d[ch] * fx;
                data[ch * plane + v * n + u] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Patch { size: n, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frame() -> Frame {
        let mut f = Frame::filled(40, 30, [0, 0, 0]);
        for y in 0..30 {
            for x in 0..40 {
                f.put_pixel(x, y, [x as u8 * 5, y as u8 * 7, 100]);
            }
        }
        f
    }

    #[test]
    fn identity_crop_copies_pixels() {
        let f = gradient_frame();
        let t = CropTransform::new(Point::new(20.0, 15.0), 11.0, 11).unwrap();
        let p = crop(&f, &t, [0.0; 3]);
        assert_eq!(p.pixel(5, 5), [100.0, 105.0, 100.0]);
        assert_eq!(p.pixel(0, 0), [75.0, 70.0, 100.0]);
    }

    #[test]
    fn outside_samples_use_pad() {
        let f = gradient_frame();
        let t = CropTransform::new(Point::new(0.0, 0.0), 21.0, 21).unwrap();
        let p = crop(&f, &t, [1.0, 2.0, 3.0]);
        assert_eq!(p.pixel(0, 0), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn transform_round_trip() {
        let t = CropTransform::new(Point::new(13.7, -4.2), 93.0, 127).unwrap();
        for (x, y) in [(0.0, 0.0), (63.0, 63.0), (126.0, 3.5)] {
            let q = t.to_crop(t.to_frame(Point::new(x, y)));
            assert!((q.x - x).abs() < 1e-9 && (q.y - y).abs() < 1e-9);
        }
        assert_eq!(t.to_frame(Point::new(63.0, 63.0)), Point::new(13.7, -4.2));
    }
}
