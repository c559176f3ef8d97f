//! Images, masks, point sets and the IoU metric.

use crate::error::{Error, Result};
use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use std::path::Path;

/// Threshold used for every binarisation in the pipeline.
pub const MASK_THRESHOLD: f64 = 0.5;

/// RGB image with values in `[0, 1]`, stored `H × W × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(Error::Shape(format!("image needs 3 channels, got {}", pixels.dim().2)));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Shape("image values must be finite and in [0,1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { pixels: Array3::zeros((height, width, 3)) }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        [self.pixels[[y, x, 0]], self.pixels[[y, x, 1]], self.pixels[[y, x, 2]]]
    }

    /// Pixels flattened row-major into a `[H·W, 3]` token matrix.
    pub fn to_tokens(&self) -> Array2<f64> {
        let (h, w, _) = self.pixels.dim();
        self.pixels.clone().into_shape_with_order((h * w, 3)).expect("contiguous image")
    }

    /// Round every channel to the nearest 8-bit level, so that a PNG round
    /// trip is exact.
    pub fn quantized(mut self) -> Self {
        self.pixels.mapv_inplace(|v| (v * 255.0).round() / 255.0);
        self
    }

    pub fn read(path: &Path) -> Result<Self> {
        let img = open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Ok(Self { pixels })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let (h, w, _) = self.pixels.dim();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = self.get(x as usize, y as usize);
            Rgb(px.map(to_u8))
        });
        save(img.into(), path)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|source| Error::Read { path: path.into(), source })?;
    let reader = reader.with_guessed_format().map_err(|source| Error::Read { path: path.into(), source })?;
    reader.decode().map_err(|source| Error::Image { path: path.into(), source })
}

fn save(img: image::DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| Error::Write { path: parent.into(), source })?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.into(), source })
}

/// Per-pixel mask, either soft probabilities or binary `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    values: Array2<f64>,
    binary: bool,
}

impl MaskGrid {
    pub fn probabilities(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape("mask values must lie in [0,1]".into()));
        }
        Ok(Self { values, binary: false })
    }

    pub fn binary(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryMask);
        }
        Ok(Self { values, binary: true })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let values = Array2::from_shape_fn((height, width), |(y, x)| f(x, y) as u8 as f64);
        Self { values, binary: true }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { values: Array2::zeros((height, width)), binary: true }
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[[y, x]]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= MASK_THRESHOLD).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> Vec<Point> {
        let mut out = Vec::new();
        for ((y, x), &v) in self.values.indexed_iter() {
            if v >= MASK_THRESHOLD {
                out.push(Point::new(x as f64, y as f64));
            }
        }
        out
    }

    pub fn centroid(&self) -> Option<Point> {
        let fg = self.foreground();
        if fg.is_empty() {
            return None;
        }
        let n = fg.len() as f64;
        Some(Point::new(fg.iter().map(|p| p.x).sum::<f64>() / n, fg.iter().map(|p| p.y).sum::<f64>() / n))
    }

    /// `1` where the value is at least `threshold`.
    pub fn binarize(&self, threshold: f64) -> MaskGrid {
        let values = self.values.mapv(|v| if v >= threshold { 1.0 } else { 0.0 });
        MaskGrid { values, binary: true }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let img = open(path)?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            _ => return Err(Error::NonBinaryMask),
        };
        let (w, h) = gray.dimensions();
        let mut values = Array2::zeros((h as usize, w as usize));
        for (x, y, px) in gray.enumerate_pixels() {
            values[[y as usize, x as usize]] = match px[0] {
                0 => 0.0,
                255 => 1.0,
                _ => return Err(Error::NonBinaryMask),
            };
        }
        Ok(Self { values, binary: true })
    }

    /// Single-channel 8-bit PNG, 0 background and 255 foreground.
    pub fn write(&self, path: &Path) -> Result<()> {
        if !self.binary {
            return Err(Error::NonBinaryMask);
        }
        let img = GrayImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            Luma([if self.values[[y as usize, x as usize]] >= MASK_THRESHOLD { 255 } else { 0 }])
        });
        save(img.into(), path)
    }
}

/// Intersection over union of two binary masks. Two empty masks score 1.
pub fn iou(a: &MaskGrid, b: &MaskGrid) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("iou {:?} vs {:?}", a.dims(), b.dims())));
    }
    if !a.is_binary() || !b.is_binary() {
        return Err(Error::NonBinaryMask);
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.values.iter().zip(b.values.iter()) {
        let (x, y) = (x == 1.0, y == 1.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    /// Clamp into a `width × height` frame.
    pub fn clamped(self, width: usize, height: usize) -> Self {
        Self::new(self.x.clamp(0.0, width as f64 - 1.0), self.y.clamp(0.0, height as f64 - 1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Frame {
    Source,
    Target,
}

/// Ordered points in the pixel coordinates of one frame. Index `i` of a
/// source set corresponds to index `i` of its tracked target set.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub frame: Frame,
    pub points: Vec<Point>,
}

impl PointSet {
    pub fn new(frame: Frame, points: Vec<Point>) -> Self {
        Self { frame, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.points
            .iter()
            .all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(n: usize, x0: usize, y0: usize, s: usize) -> MaskGrid {
        MaskGrid::from_fn(n, n, |x, y| x >= x0 && x < x0 + s && y >= y0 && y < y0 + s)
    }

    #[test]
    fn iou_cases() {
        let a = block(4, 0, 0, 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &block(4, 2, 2, 2)).unwrap(), 0.0);
        assert!((iou(&a, &block(4, 1, 1, 2)).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        let e = MaskGrid::empty(4, 4);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &a).unwrap(), 0.0);
    }

    #[test]
    fn iou_errors() {
        let a = block(4, 0, 0, 2);
        assert!(matches!(iou(&a, &MaskGrid::empty(5, 4)), Err(Error::Shape(_))));
        let soft = MaskGrid::probabilities(Array2::from_elem((4, 4), 0.3)).unwrap();
        assert!(matches!(iou(&a, &soft), Err(Error::NonBinaryMask)));
    }

    #[test]
    fn binarize_cases() {
        let m = MaskGrid::probabilities(Array2::from_elem((2, 2), 0.4)).unwrap();
        assert!(m.binarize(0.5).values().iter().all(|&v| v == 0.0));
        let m = MaskGrid::probabilities(Array2::from_elem((2, 2), 0.5)).unwrap();
        assert!(m.binarize(0.5).values().iter().all(|&v| v == 1.0));
        let m = MaskGrid::probabilities(ndarray::array![[0.2, 0.7]]).unwrap();
        assert_eq!(m.binarize(0.5).values(), &ndarray::array![[0.0, 1.0]]);
    }

    #[test]
    fn checkerboard_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = MaskGrid::from_fn(70, 70, |x, y| (x + y) % 2 == 0);
        m.write(&path).unwrap();
        assert_eq!(MaskGrid::read(&path).unwrap(), m);
    }

    #[test]
    fn color_image_is_not_a_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        Image::zeros(8, 8).write(&path).unwrap();
        assert!(matches!(MaskGrid::read(&path), Err(Error::NonBinaryMask)));
    }

    #[test]
    fn gray_midtone_is_not_binary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        GrayImage::from_pixel(4, 4, Luma([128])).save(&path).unwrap();
        assert!(matches!(MaskGrid::read(&path), Err(Error::NonBinaryMask)));
    }

    #[test]
    fn missing_and_malformed_files_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(MaskGrid::read(&dir.path().join("nope.png")), Err(Error::Read { .. })));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"\x89PNG\r\n\x1a\ngarbage").unwrap();
        assert!(matches!(MaskGrid::read(&bad), Err(Error::Image { .. })));
    }

    #[test]
    fn image_png_round_trip_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let px = Array3::from_shape_fn((6, 5, 3), |(y, x, c)| ((x * 7 + y * 3 + c) % 11) as f64 / 10.0);
        let img = Image::new(px).unwrap().quantized();
        img.write(&path).unwrap();
        assert_eq!(Image::read(&path).unwrap(), img);
    }
}
