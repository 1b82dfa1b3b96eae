//! Floating-point raster images shared by every stage of the pipeline.
//!
//! Pixels are stored row-major, channel-interleaved (`HWC`), with values in
//! `[0, 1]`. One- and three-channel images are supported; infrared frames
//! may arrive either way.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "buffer of {} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("valid constant image")
    }

    /// Builds an image by evaluating `f(x, y, channel)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data).expect("valid generated image")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    /// Single-channel luma (BT.601 weights for color input).
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2])
            .collect();
        Image::new(self.width, self.height, 1, data).expect("gray conversion")
    }

    /// Three-channel copy; single-channel input is replicated.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image::new(self.width, self.height, 3, data).expect("rgb conversion")
    }

    /// Zero-fills every pixel whose mask entry is false. `mask` is row-major `H*W`.
    pub fn masked(&self, mask: &[bool]) -> Result<Image> {
        if mask.len() != self.width * self.height {
            return Err(Error::DimensionMismatch(format!(
                "mask of {} pixels for a {}x{} image",
                mask.len(),
                self.width,
                self.height
            )));
        }
        let mut out = self.clone();
        for (px, &keep) in out.data.chunks_exact_mut(self.channels).zip(mask) {
            if !keep {
                px.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(out)
    }

    /// Bilinear resampling with half-pixel centers. Returns a clone when the
    /// size is unchanged.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
                    let bottom = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
                    data.push(top * (1.0 - ty) + bottom * ty);
                }
            }
        }
        Image::new(width, height, self.channels, data).expect("resize")
    }

    pub fn transposed(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |x, y, c| {
            self.get(y, x, c)
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let decoded = image::open(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let single = matches!(
            decoded.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if single {
            let gray = decoded.to_luma32f();
            let (w, h) = gray.dimensions();
            let data = gray.into_raw().into_iter().map(f64::from).collect();
            Image::new(w as usize, h as usize, 1, data)
        } else {
            let rgb = decoded.to_rgb32f();
            let (w, h) = rgb.dimensions();
            let data = rgb.into_raw().into_iter().map(f64::from).collect();
            Image::new(w as usize, h as usize, 3, data)
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Encodes as an 8-bit PNG (gray or RGB, following the channel count).
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        use image::ImageEncoder;
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.to_bytes(), self.width as u32, self.height as u32, color)
            .map_err(|e| Error::InvalidArgument(format!("png encoding failed: {e}")))?;
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// `(1, C, H, W)` f64 tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, self.channels), device)?;
        Ok(t.permute((2, 0, 1))?.unsqueeze(0)?.contiguous()?)
    }

    /// Accepts `(C, H, W)` or `(1, C, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        let data = t
            .to_dtype(DType::F64)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Image::new(w, h, c, data)
    }
}

/// Stacks same-sized images into a `(B, C, H, W)` batch.
pub fn stack(images: &[&Image], device: &Device) -> Result<Tensor> {
    let tensors = images
        .iter()
        .map(|im| im.to_tensor(device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&tensors, 0)?)
}

/// Reads `(height, width)` from an image header without decoding pixels.
pub fn probe_dims(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((h as usize, w as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_of_replicated_rgb_is_identity() {
        let g = Image::from_fn(5, 4, 1, |x, y, _| (x + y) as f64 / 10.0);
        let back = g.to_rgb().to_gray();
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let im = Image::from_fn(3, 2, 3, |x, y, c| (x * 100 + y * 10 + c) as f64);
        let t = im.to_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 3]);
        let v = t.get(0).unwrap().get(2).unwrap().get(1).unwrap().get(0).unwrap();
        assert_eq!(v.to_scalar::<f64>().unwrap(), 12.0);
        assert_eq!(Image::from_tensor(&t).unwrap(), im);
    }

    #[test]
    fn resize_identity_and_constant() {
        let im = Image::filled(8, 8, 1, 0.25);
        assert_eq!(im.resize(8, 8), im);
        let small = im.resize(3, 5);
        assert_eq!(small.dims(), (5, 3));
        assert!(small.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let im = Image::from_fn(4, 3, 3, |x, y, c| ((x + 2 * y + c) % 5) as f64 / 4.0);
        im.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in im.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(probe_dims(&path).unwrap(), (3, 4));
    }

    #[test]
    fn undecodable_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.png");
        std::fs::write(&path, b"not a png").unwrap();
        let err = Image::load_png(&path).unwrap_err();
        assert!(err.to_string().contains("broken.png"));
    }
}
