//! Dense float images with samples in `[0, 1]`, row-major, interleaved channels.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Creates a zero-filled image.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        assert!(channels > 0, "image needs at least one channel");
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f32]) -> Self {
        let mut img = Self::new(width, height, value.len());
        for px in img.data.chunks_exact_mut(value.len()) {
            px.copy_from_slice(value);
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::SizeMismatch(format!(
                "buffer of {} samples for a {width}x{height}x{channels} image",
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

    /// Builds an image by evaluating `f(x, y, out)` for every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, &mut [f32]),
    ) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                let i = (y * width + x) * channels;
                f(x, y, &mut img.data[i..i + channels]);
            }
        }
        img
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_same_size(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::SizeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Per-channel `(min, max)` over all pixels.
    pub fn channel_range(&self) -> Vec<(f32, f32)> {
        let mut range = vec![(f32::INFINITY, f32::NEG_INFINITY); self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (r, &v) in range.iter_mut().zip(px) {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        range
    }

    pub fn map_pixels(&self, channels: usize, mut f: impl FnMut(&[f32], &mut [f32])) -> Image {
        let mut out = Image::new(self.width, self.height, channels);
        for (src, dst) in self
            .data
            .chunks_exact(self.channels)
            .zip(out.data.chunks_exact_mut(channels))
        {
            f(src, dst);
        }
        out
    }

    /// Keeps only the first three channels (or replicates a gray channel).
    pub fn to_rgb(&self) -> Image {
        match self.channels {
            3 => self.clone(),
            1 => self.map_pixels(3, |s, d| d.fill(s[0])),
            _ => self.map_pixels(3, |s, d| d.copy_from_slice(&s[..3])),
        }
    }

    /// Rec. 601 luma for RGB, identity for gray.
    pub fn luma(&self) -> Image {
        if self.channels < 3 {
            return self.map_pixels(1, |s, d| d[0] = s[0]);
        }
        self.map_pixels(1, |s, d| d[0] = 0.299 * s[0] + 0.587 * s[1] + 0.114 * s[2])
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear lookup with edge clamping.
    pub fn sample_bilinear(&self, x: f32, y: f32, out: &mut [f32]) {
        let xf = x.clamp(0.0, (self.width - 1) as f32);
        let yf = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = xf - x0 as f32;
        let ty = yf - y0 as f32;
        let (a, b, c, d) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        for k in 0..self.channels {
            let top = a[k] + (b[k] - a[k]) * tx;
            let bot = c[k] + (d[k] - c[k]) * tx;
            out[k] = top + (bot - top) * ty;
        }
    }

    /// 2x box downsample; odd trailing rows/columns average what exists.
    pub fn downsample2(&self) -> Image {
        self.downsample(2)
    }

    /// Box downsample by an integer factor (output size rounds up).
    pub fn downsample(&self, factor: usize) -> Image {
        assert!(factor >= 1);
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let c = self.channels;
        Image::from_fn(w, h, c, |x, y, out| {
            out.fill(0.0);
            let mut n = 0.0;
            for sy in factor * y..(factor * y + factor).min(self.height) {
                for sx in factor * x..(factor * x + factor).min(self.width) {
                    for (o, v) in out.iter_mut().zip(self.pixel(sx, sy)) {
                        *o += v;
                    }
                    n += 1.0;
                }
            }
            for o in out.iter_mut() {
                *o /= n;
            }
        })
    }

    /// Resamples to an arbitrary size (bilinear, pixel-center aligned).
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        Image::from_fn(width, height, self.channels, |x, y, out| {
            let u = (x as f32 + 0.5) * sx - 0.5;
            let v = (y as f32 + 0.5) * sy - 0.5;
            self.sample_bilinear(u, v, out);
        })
    }

    /// Decodes a PNG into `[0, 1]` samples (8- or 16-bit, gray/RGB/RGBA).
    pub fn load_png(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let decoded = image::open(path).map_err(|e| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_dynamic(decoded))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let decoded =
            image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| {
                Error::Codec {
                    path: "<memory>".into(),
                    message: e.to_string(),
                }
            })?;
        Ok(Self::from_dynamic(decoded))
    }

    fn from_dynamic(decoded: image::DynamicImage) -> Image {
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        match decoded.color().channel_count() {
            1 | 2 => {
                let buf = decoded.into_luma8();
                let data = buf.into_raw().into_iter().map(to_unit).collect();
                Image::from_vec(w, h, 1, data).expect("decoder returned consistent size")
            }
            3 => {
                let buf = decoded.into_rgb8();
                let data = buf.into_raw().into_iter().map(to_unit).collect();
                Image::from_vec(w, h, 3, data).expect("decoder returned consistent size")
            }
            _ => {
                let buf = decoded.into_rgba8();
                let data = buf.into_raw().into_iter().map(to_unit).collect();
                Image::from_vec(w, h, 4, data).expect("decoder returned consistent size")
            }
        }
    }

    /// Quantizes to 8 bits per sample.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.write_png(&mut out).map_err(|message| Error::Codec {
            path: "<memory>".into(),
            message,
        })?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = std::io::BufWriter::new(file);
        self.write_png(&mut writer).map_err(|message| Error::Codec {
            path: path.to_path_buf(),
            message,
        })
    }

    fn write_png<W: std::io::Write + std::io::Seek>(&self, w: &mut W) -> Result<(), String> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            2 => image::ExtendedColorType::La8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(format!("cannot encode {c}-channel image as PNG")),
        };
        image::write_buffer_with_format(
            w,
            &self.to_bytes(),
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| e.to_string())
    }
}

#[inline]
fn to_unit(b: u8) -> f32 {
    b as f32 / 255.0
}

#[inline]
fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let img = Image::from_fn(7, 5, 3, |x, y, px| {
            px[0] = ((x * 37 + y * 11) % 256) as f32 / 255.0;
            px[1] = ((x * 5 + y * 91) % 256) as f32 / 255.0;
            px[2] = 1.0;
        });
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn downsample_handles_odd_sizes() {
        let img = Image::from_fn(5, 3, 1, |x, _, px| px[0] = x as f32);
        let half = img.downsample2();
        assert_eq!(half.dims(), (3, 2));
        assert_eq!(half.get(0, 0, 0), 0.5);
        assert_eq!(half.get(2, 1, 0), 4.0);
    }

    #[test]
    fn bilinear_at_integer_coordinates_is_exact() {
        let img = Image::from_fn(4, 4, 2, |x, y, px| {
            px[0] = x as f32;
            px[1] = y as f32;
        });
        let mut out = [0.0; 2];
        img.sample_bilinear(2.0, 3.0, &mut out);
        assert_eq!(out, [2.0, 3.0]);
        img.sample_bilinear(1.5, 0.25, &mut out);
        assert_eq!(out, [1.5, 0.25]);
    }
}
