//! 8-bit RGB raster images and the NetPBM P6 codec used for every image the
//! toolkit writes.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image dimensions {0}x{1} are invalid")]
    Dimensions(u32, u32),
    #[error("pixel buffer has {got} bytes, expected {want}")]
    BufferSize { got: usize, want: usize },
    #[error("malformed P6 image: {0}")]
    Ppm(String),
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Rgb = [u8; 3];

/// Row-major, 3 channels, 8 bits per channel.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RasterImage({}x{}, {})", self.width, self.height, &self.digest()[..12])
    }
}

impl RasterImage {
    pub fn filled(width: u32, height: u32, color: Rgb) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Dimensions(width, height));
        }
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&color);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Dimensions(width, height));
        }
        let want = width as usize * height as usize * 3;
        if data.len() != want {
            return Err(RasterError::BufferSize {
                got: data.len(),
                want,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, c: Rgb) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&c);
    }

    /// Fills the pixels whose centers lie inside `bbox`.
    pub fn fill_box(&mut self, bbox: &BBox, c: Rgb) {
        let (x0, y0, x1, y1) = self.clip_span(bbox);
        for y in y0..y1 {
            for x in x0..x1 {
                self.put(x, y, c);
            }
        }
    }

    /// Pixel span of `bbox` clipped to the image.
    pub fn clip_span(&self, bbox: &BBox) -> (u32, u32, u32, u32) {
        let (x0, y0, x1, y1) = bbox.pixel_span();
        (
            x0.min(self.width),
            y0.min(self.height),
            x1.min(self.width),
            y1.min(self.height),
        )
    }

    /// Copy of the pixels covered by `bbox`, or `None` if it covers no pixel.
    pub fn crop(&self, bbox: &BBox) -> Option<RasterImage> {
        let (x0, y0, x1, y1) = self.clip_span(bbox);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for y in y0..y1 {
            let start = self.offset(x0, y);
            data.extend_from_slice(&self.data[start..start + w as usize * 3]);
        }
        Some(RasterImage {
            width: w,
            height: h,
            data,
        })
    }

    /// Resamples `src` onto the pixels of `bbox` (bilinear) and writes them in place.
    pub fn paste_resized(&mut self, src: &RasterImage, bbox: &BBox) {
        let (x0, y0, x1, y1) = self.clip_span(bbox);
        if x1 <= x0 || y1 <= y0 {
            return;
        }
        let resized = src.resize_bilinear(x1 - x0, y1 - y0);
        for y in 0..resized.height {
            for x in 0..resized.width {
                self.put(x0 + x, y0 + y, resized.get(x, y));
            }
        }
    }

    /// Bilinear resampling with pixel-center alignment and edge clamping.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> RasterImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = f64::from(self.width) / f64::from(width);
        let sy = f64::from(self.height) / f64::from(height);
        let max_x = f64::from(self.width - 1);
        let max_y = f64::from(self.height - 1);
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            let fy = ((f64::from(y) + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let (y0, ty) = (fy.floor() as u32, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let fx = ((f64::from(x) + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let (x0, tx) = (fx.floor() as u32, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                let (p00, p10, p01, p11) =
                    (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
                for c in 0..3 {
                    let top = f64::from(p00[c]) * (1.0 - tx) + f64::from(p10[c]) * tx;
                    let bottom = f64::from(p01[c]) * (1.0 - tx) + f64::from(p11[c]) * tx;
                    let v = top * (1.0 - ty) + bottom * ty;
                    data.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        RasterImage {
            width,
            height,
            data,
        }
    }

    /// Copies every pixel of `src` inside the given pixel rectangle.
    pub fn copy_rect_from(&mut self, src: &RasterImage, x0: u32, y0: u32, x1: u32, y1: u32) {
        debug_assert_eq!((self.width, self.height), (src.width, src.height));
        for y in y0..y1.min(self.height) {
            let a = self.offset(x0, y);
            let b = self.offset(x1.min(self.width), y);
            self.data[a..b].copy_from_slice(&src.data[a..b]);
        }
    }

    /// Hex SHA-256 over dimensions and pixels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.data);
        let mut out = String::with_capacity(64);
        for b in h.finalize() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    pub fn mean_squared_error(&self, other: &RasterImage) -> Option<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return None;
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum();
        Some(sum / self.data.len() as f64)
    }

    /// Binary NetPBM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.data.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, RasterError> {
        let mut pos = 0usize;
        let mut fields = [0u32; 3];
        let magic = next_token(bytes, &mut pos).ok_or_else(|| RasterError::Ppm("empty".into()))?;
        if magic != b"P6" {
            return Err(RasterError::Ppm("missing P6 magic".into()));
        }
        for (i, f) in fields.iter_mut().enumerate() {
            let tok = next_token(bytes, &mut pos)
                .ok_or_else(|| RasterError::Ppm(format!("truncated header (field {i})")))?;
            *f = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| RasterError::Ppm(format!("bad header field {i}")))?;
        }
        if fields[2] != 255 {
            return Err(RasterError::Ppm(format!("unsupported maxval {}", fields[2])));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(RasterError::Ppm("missing raster".into()));
        }
        pos += 1;
        Self::from_raw(fields[0], fields[1], bytes[pos..].to_vec())
    }

    /// Reads P6, or PNG when the content carries the PNG signature.
    pub fn load(path: &Path) -> Result<Self, RasterError> {
        let bytes = std::fs::read(path).map_err(|source| RasterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RasterError> {
        if bytes.starts_with(b"\x89PNG") {
            let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
                .map_err(|e| RasterError::Decode(e.to_string()))?
                .to_rgb8();
            let (w, h) = img.dimensions();
            return Self::from_raw(w, h, img.into_raw());
        }
        Self::from_ppm(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), RasterError> {
        std::fs::write(path, self.to_ppm()).map_err(|source| RasterError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}
