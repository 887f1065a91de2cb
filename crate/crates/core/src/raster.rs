//! 8-bit images and binary PGM/PPM files.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("image dimensions {width}x{height}x{channels} do not match {len} bytes")]
    Size {
        width: usize,
        height: usize,
        channels: usize,
        len: usize,
    },
}

/// Row-major interleaved 8-bit image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if width * height * channels != data.len() || !matches!(channels, 1 | 3) || width == 0 || height == 0 {
            return Err(RasterError::Size {
                width,
                height,
                channels,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Grayscale image from intensities in `[0, 1]`, rounded to nearest.
    pub fn from_unit_gray(width: usize, height: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), width * height);
        let data = values.iter().map(|&v| to_u8(v * 255.0)).collect();
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Mean over channels scaled to `[0, 1]`, row-major.
    pub fn to_unit_gray(&self) -> Vec<f32> {
        self.data
            .chunks(self.channels)
            .map(|px| px.iter().map(|&v| v as f32).sum::<f32>() / (255.0 * self.channels as f32))
            .collect()
    }

    /// Halves both sides by averaging 2x2 blocks.
    pub fn downsample2(&self) -> Self {
        let (w, h, c) = (self.width / 2, self.height / 2, self.channels);
        let mut data = Vec::with_capacity(w * h * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let s: u32 = [(0, 0), (1, 0), (0, 1), (1, 1)]
                        .iter()
                        .map(|&(dx, dy)| self.get(2 * x + dx, 2 * y + dy, ch) as u32)
                        .sum();
                    data.push(((s + 2) / 4) as u8);
                }
            }
        }
        Self {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let s: u64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as i32 - b as i32).unsigned_abs() as u64)
            .sum();
        s as f64 / self.data.len() as f64
    }

    /// Binary P5 (gray) or P6 (RGB) bytes.
    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let (subtype, color) = if self.channels == 1 {
            (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
        } else {
            (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
        };
        PnmEncoder::new(&mut out)
            .with_subtype(subtype)
            .write_image(&self.data, self.width as u32, self.height as u32, color)
            .expect("in-memory PNM encoding");
        out
    }

    pub fn from_pnm_bytes(bytes: &[u8], label: &str) -> Result<Self, RasterError> {
        let decoded = image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Pnm)
            .decode()
            .map_err(|e| RasterError::Decode {
                path: label.to_string(),
                reason: e.to_string(),
            })?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        match decoded {
            DynamicImage::ImageLuma8(img) => Self::new(w, h, 1, img.into_raw()),
            DynamicImage::ImageRgb8(img) => Self::new(w, h, 3, img.into_raw()),
            other => Err(RasterError::Decode {
                path: label.to_string(),
                reason: format!("unsupported pixel format {:?}; expected 8-bit P5 or P6", other.color()),
            }),
        }
    }

    pub fn read_pnm(path: &Path) -> Result<Self, RasterError> {
        let bytes = fs::read(path).map_err(|source| RasterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_pnm_bytes(&bytes, &path.display().to_string())
    }

    pub fn write_pnm(&self, path: &Path) -> Result<(), RasterError> {
        fs::write(path, self.to_pnm_bytes()).map_err(|source| RasterError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}
