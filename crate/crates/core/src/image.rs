//! Raster types shared across the pipeline: RGB images, heatmaps and binary masks.
//!
//! Pixels are stored row-major and channel-interleaved (`HWC`). Inside the
//! networks images live in the signed range `[-1, 1]`; files on disk are
//! decoded into and encoded from the unit range `[0, 1]`.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declared value range of an [`Image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }

    pub fn contains(self, v: f32) -> bool {
        let (lo, hi) = self.bounds();
        v >= lo && v <= hi
    }
}

/// An `H×W×3` real-valued raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    range: ValueRange,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, range: ValueRange, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} values for a {height}x{width}x3 image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !range.contains(**v)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {v} outside the declared {range:?} range"
            )));
        }
        Ok(Self {
            height,
            width,
            range,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, range: ValueRange, value: f32) -> Result<Self> {
        Self::new(height, width, range, vec![value; height * width * 3])
    }

    /// Builds an image from a per-pixel closure `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        range: ValueRange,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, range, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Affine rescale into another declared range.
    pub fn to_range(&self, range: ValueRange) -> Image {
        if range == self.range {
            return self.clone();
        }
        let data = match (self.range, range) {
            (ValueRange::Unit, ValueRange::Signed) => {
                self.data.iter().map(|v| (v * 2.0 - 1.0).clamp(-1.0, 1.0)).collect()
            }
            _ => self.data.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect(),
        };
        Image {
            height: self.height,
            width: self.width,
            range,
            data,
        }
    }

    /// Verbatim crop of a `h×w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidInput(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds a {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Image {
            height: h,
            width: w,
            range: self.range,
            data,
        })
    }

    pub fn center_crop_square(&self) -> Image {
        let side = self.height.min(self.width);
        let y0 = (self.height - side) / 2;
        let x0 = (self.width - side) / 2;
        self.crop(y0, x0, side, side).expect("center crop fits")
    }

    /// Bilinear resize (half-pixel centers, edge clamped).
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = vec![0.0f32; height * width * 3];
        for c in 0..3 {
            let plane: Vec<f32> = (0..self.height * self.width)
                .map(|i| self.data[i * 3 + c])
                .collect();
            let resized = bilinear_resize(&plane, self.height, self.width, height, width);
            for (i, v) in resized.into_iter().enumerate() {
                out[i * 3 + c] = v;
            }
        }
        let (lo, hi) = self.range.bounds();
        out.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        Image {
            height,
            width,
            range: self.range,
            data: out,
        }
    }

    /// Center-crops non-square inputs, then resizes to `side × side`.
    pub fn square_to(&self, side: usize) -> Image {
        let sq = if self.is_square() {
            self.clone()
        } else {
            self.center_crop_square()
        };
        sq.resize(side, side)
    }

    fn permuted(&self, height: usize, width: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = src(y, x);
                data.extend_from_slice(&self.pixel(sy, sx));
            }
        }
        Image {
            height,
            width,
            range: self.range,
            data,
        }
    }

    /// Clockwise quarter turn: `[[a,b],[c,d]] -> [[c,a],[d,b]]`.
    pub fn rot90_cw(&self) -> Image {
        let h = self.height;
        self.permuted(self.width, self.height, |y, x| (h - 1 - x, y))
    }

    pub fn rot180(&self) -> Image {
        let (h, w) = (self.height, self.width);
        self.permuted(h, w, |y, x| (h - 1 - y, w - 1 - x))
    }

    pub fn rot270_cw(&self) -> Image {
        let w = self.width;
        self.permuted(self.width, self.height, |y, x| (x, w - 1 - y))
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Image {
        let w = self.width;
        self.permuted(self.height, w, |y, x| (y, w - 1 - x))
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> Image {
        let h = self.height;
        self.permuted(h, self.width, |y, x| (h - 1 - y, x))
    }

    /// Decodes an 8-bit RGB raster file into the requested range.
    pub fn load(path: &Path, range: ValueRange) -> Result<Image> {
        let decoded = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::Codec {
                path: path.to_path_buf(),
                source: e,
            })?
            .to_rgb8();
        let (w, h) = decoded.dimensions();
        let data = decoded.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Ok(Image::new(h as usize, w as usize, ValueRange::Unit, data)?.to_range(range))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let unit = self.to_range(ValueRange::Unit);
        let raw = unit
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    /// Writes a PNG atomically.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let rgb = self.to_rgb8();
        write_png_atomic(path, |buf| {
            image::DynamicImage::ImageRgb8(rgb).write_to(buf, image::ImageFormat::Png)
        })
    }
}

/// Writes encoded bytes to a sibling temp file, then renames over `path`.
pub(crate) fn write_png_atomic(
    path: &Path,
    encode: impl FnOnce(&mut std::io::Cursor<Vec<u8>>) -> image::ImageResult<()>,
) -> Result<()> {
    let mut cursor = std::io::Cursor::new(Vec::new());
    encode(&mut cursor).map_err(|e| Error::Codec {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_atomic(path, cursor.get_ref())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Bilinear resampling of a single plane with half-pixel centers
/// (`align_corners = false`), clamping sample positions at the borders.
pub fn bilinear_resize(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let mut out = Vec::with_capacity(nh * nw);
    for oy in 0..nh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = (fy - y0 as f64) as f32;
        for ox in 0..nw {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let tx = (fx - x0 as f64) as f32;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Stacks images into a `(B, 3, H, W)` tensor in the signed range.
pub fn images_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot stack an empty image list".into()))?;
    let (h, w) = (first.height, first.width);
    let mut buf = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Shape(format!(
                "cannot stack {}x{} with {h}x{w}",
                img.height, img.width
            )));
        }
        let signed = img.to_range(ValueRange::Signed);
        for c in 0..3 {
            for i in 0..h * w {
                buf.push(signed.data[i * 3 + c]);
            }
        }
    }
    Ok(Tensor::from_vec(buf, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Inverse of [`images_to_tensor`]; values are clamped into `[-1, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut out = Vec::with_capacity(b);
    for n in 0..b {
        let base = n * 3 * h * w;
        let mut data = vec![0.0f32; h * w * 3];
        for ch in 0..3 {
            for i in 0..h * w {
                data[i * 3 + ch] = flat[base + ch * h * w + i].clamp(-1.0, 1.0);
            }
        }
        out.push(Image::new(h, w, ValueRange::Signed, data)?);
    }
    Ok(out)
}

/// `H×W` relevance map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl HeatMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "heatmap {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("heatmap value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }
}

/// Strictly binary `H×W` mask; `1` marks leaf pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| *v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0)
    }

    pub fn aligned_with(&self, img: &Image) -> bool {
        self.height == img.height && self.width == img.width
    }

    /// Intersection over union; two empty masks give 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.values.iter().zip(&other.values) {
            inter += (*a & *b) as usize;
            union += (*a | *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Fraction of `truth`'s positive pixels that this mask also marks.
    pub fn coverage_of(&self, truth: &BinaryMask) -> f64 {
        let total = truth.count();
        if total == 0 {
            return 1.0;
        }
        let hit = self
            .values
            .iter()
            .zip(&truth.values)
            .filter(|(a, b)| **a == 1 && **b == 1)
            .count();
        hit as f64 / total as f64
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(sy, sx)
        })
    }

    /// Stacks masks into a `(B, 1, H, W)` tensor of zeros and ones.
    pub fn stack(masks: &[&BinaryMask], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack an empty mask list".into()))?;
        let (h, w) = (first.height, first.width);
        let mut buf = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.height != h || m.width != w {
                return Err(Error::Shape("masks in a batch must share a size".into()));
            }
            buf.extend(m.values.iter().map(|v| *v as f32));
        }
        Ok(Tensor::from_vec(buf, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
    }

    /// 8-bit grayscale: `0` background, `255` leaf.
    pub fn to_luma8(&self) -> image::GrayImage {
        let raw = self.values.iter().map(|v| v * 255).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let luma = self.to_luma8();
        write_png_atomic(path, |buf| {
            image::DynamicImage::ImageLuma8(luma).write_to(buf, image::ImageFormat::Png)
        })
    }

    /// Loads a grayscale mask; values `>= 128` count as leaf.
    pub fn load(path: &Path) -> Result<BinaryMask> {
        let luma = image::open(path)
            .map_err(|e| Error::Codec {
                path: path.to_path_buf(),
                source: e,
            })?
            .to_luma8();
        let (w, h) = luma.dimensions();
        let values = luma.into_raw().into_iter().map(|v| (v >= 128) as u8).collect();
        BinaryMask::new(h as usize, w as usize, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let n = (h * w * 3) as f32;
        Image::from_fn(h, w, ValueRange::Unit, |y, x, c| ((y * w + x) * 3 + c) as f32 / n).unwrap()
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, ValueRange::Unit, vec![0.5, 1.2, 0.0]).is_err());
        assert!(Image::new(1, 1, ValueRange::Signed, vec![-0.5, 1.0, -1.0]).is_ok());
    }

    #[test]
    fn two_by_two_rotation_is_clockwise() {
        // [[a,b],[c,d]] with a..d encoded in the red channel
        let vals = [0.1f32, 0.2, 0.3, 0.4];
        let img = Image::from_fn(2, 2, ValueRange::Unit, |y, x, _| vals[y * 2 + x]).unwrap();
        let r = img.rot90_cw();
        let got: Vec<f32> = (0..4).map(|i| r.get(i / 2, i % 2, 0)).collect();
        assert_eq!(got, vec![0.3, 0.1, 0.4, 0.2]);
    }

    #[test]
    fn rotations_compose() {
        let img = ramp(3, 5);
        assert_eq!(img.rot90_cw().rot90_cw(), img.rot180());
        assert_eq!(img.rot90_cw().rot90_cw().rot90_cw(), img.rot270_cw());
        assert_eq!(img.rot270_cw().rot90_cw(), img);
    }

    #[test]
    fn range_conversion_round_trips() {
        let img = ramp(4, 4);
        let back = img.to_range(ValueRange::Signed).to_range(ValueRange::Unit);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let img = ramp(3, 4).to_range(ValueRange::Signed);
        let t = images_to_tensor(&[&img], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims4().unwrap(), (1, 3, 3, 4));
        let back = tensor_to_images(&t).unwrap().pop().unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let plane: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(bilinear_resize(&plane, 3, 4, 3, 4), plane);
        let c = vec![0.25f32; 4];
        assert!(bilinear_resize(&c, 2, 2, 7, 5).iter().all(|v| (*v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn center_crop_takes_middle() {
        let img = ramp(4, 8);
        let sq = img.center_crop_square();
        assert_eq!((sq.height(), sq.width()), (4, 4));
        assert_eq!(sq.pixel(0, 0), img.pixel(0, 2));
    }

    #[test]
    fn mask_iou_and_coverage() {
        let a = BinaryMask::from_fn(2, 2, |y, _| y == 0);
        let b = BinaryMask::from_fn(2, 2, |_, x| x == 0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((a.coverage_of(&b) - 0.5).abs() < 1e-12);
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = BinaryMask::from_fn(9, 8, |y, x| (y + x) % 3 == 0);
        let p = dir.path().join("m.png");
        mask.save_png(&p).unwrap();
        assert_eq!(BinaryMask::load(&p).unwrap(), mask);

        let img = Image::from_fn(8, 9, ValueRange::Unit, |y, x, c| ((y + x + c) % 5 * 51) as f32 / 255.0).unwrap();
        let q = dir.path().join("i.png");
        img.save_png(&q).unwrap();
        assert_eq!(Image::load(&q, ValueRange::Unit).unwrap(), img);
    }
}
