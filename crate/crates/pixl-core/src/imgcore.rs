//! Image containers, color management, resampling, and file I/O shared by
//! every other module.
//!
//! All pixel data is stored planar (channel-major, `C*H*W`) in 32-bit floats.
//! 8-bit quantization happens only at the PNG boundary; PFM is the lossless
//! HDR format for everything else. Multi-channel stacks wider than three
//! channels are stored as consecutive 3-channel PFM files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png error: {0}")]
    Png(String),
    #[error("unsupported bit depth")]
    UnsupportedBitDepth,
    #[error("non-RGB channel layout")]
    NonRgbLayout,
    #[error("bad PFM magic {0:?}")]
    BadMagic(String),
    #[error("malformed PFM header: {0}")]
    BadHeader(String),
    #[error("dimension mismatch: expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in buffer")]
    NonFinite,
    #[error("value {0} outside [0,1] in sRGB-encoded image")]
    OutOfRange(f32),
    #[error("image is already in {0:?} space")]
    SpaceMismatch(ColorSpace),
    #[error("dimensions must be positive")]
    EmptyDimensions,
}

/// Which transfer curve the stored values are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    /// Gamma-encoded per IEC 61966-2-1; values lie in `[0,1]`.
    Srgb,
    /// Scene-linear radiance; non-negative, may exceed 1.
    Linear,
}

/// A three-channel image with an explicit color-space tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    data: Vec<f32>,
    space: ColorSpace,
}

impl ImageRgb {
    /// Wrap planar `3*H*W` data. Only the length is checked here; value
    /// invariants are enforced at the operation boundaries that need them.
    pub fn new(height: usize, width: usize, data: Vec<f32>, space: ColorSpace) -> Self {
        assert_eq!(
            data.len(),
            3 * height * width,
            "ImageRgb data length {} does not match 3x{}x{}",
            data.len(),
            height,
            width
        );
        Self { height, width, data, space }
    }

    pub fn constant(height: usize, width: usize, value: [f32; 3], space: ColorSpace) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            data.extend(std::iter::repeat(value[c]).take(height * width));
        }
        Self::new(height, width, data, space)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, channel: usize, y: usize, x: usize, v: f32) {
        self.data[(channel * self.height + y) * self.width + x] = v;
    }

    pub fn into_buffer(self) -> FloatBuffer {
        FloatBuffer::new(3, self.height, self.width, self.data)
    }

    pub fn from_buffer(buffer: FloatBuffer, space: ColorSpace) -> Self {
        assert_eq!(buffer.channels(), 3, "ImageRgb needs a 3-channel buffer");
        let (h, w) = (buffer.height(), buffer.width());
        Self::new(h, w, buffer.into_data(), space)
    }
}

/// A dense `C*H*W` float buffer for passes, intrinsics, and conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatBuffer {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FloatBuffer {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            channels * height * width,
            "FloatBuffer data length {} does not match {}x{}x{}",
            data.len(),
            channels,
            height,
            width
        );
        Self { channels, height, width, data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, channel: usize, y: usize, x: usize, v: f32) {
        self.data[(channel * self.height + y) * self.width + x] = v;
    }

    /// One channel plane as a slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate buffers of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&FloatBuffer]) -> FloatBuffer {
        assert!(!parts.is_empty());
        let (h, w) = (parts[0].height, parts[0].width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            assert_eq!((p.height, p.width), (h, w), "channel concat needs equal spatial dims");
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        FloatBuffer::new(channels, h, w, data)
    }

    /// View the buffer as a `[C, H, W]` tensor. Planar storage matches the
    /// tensor engine's row-major layout, so this is a straight copy.
    pub fn to_array(&self) -> ArrayD<f32> {
        ArrayD::from_shape_vec(
            IxDyn(&[self.channels, self.height, self.width]),
            self.data.clone(),
        )
        .expect("planar buffer length matches its dimensions")
    }

    /// Wrap a `[C, H, W]` tensor back into a planar buffer.
    pub fn from_array(array: &ArrayD<f32>) -> FloatBuffer {
        assert_eq!(array.ndim(), 3, "expected a [C,H,W] tensor, got {:?}", array.shape());
        let s = array.shape().to_vec();
        FloatBuffer::new(s[0], s[1], s[2], array.iter().copied().collect())
    }
}

/// Load an 8-bit RGB PNG into an sRGB-encoded image with values `code/255`.
pub fn load_png(path: &Path) -> Result<ImageRgb, ImageError> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| ImageError::Png(e.to_string()))?;
    {
        let info = reader.info();
        if info.bit_depth != png::BitDepth::Eight {
            return Err(ImageError::UnsupportedBitDepth);
        }
        if info.color_type != png::ColorType::Rgb {
            return Err(ImageError::NonRgbLayout);
        }
    }
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| ImageError::Png(e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let bytes = &buf[..frame.buffer_size()];
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = f32::from(bytes[(y * w + x) * 3 + c]) / 255.0;
            }
        }
    }
    Ok(ImageRgb::new(h, w, data, ColorSpace::Srgb))
}

/// Save an sRGB-encoded image as 8-bit RGB PNG, quantizing round-to-nearest.
pub fn save_png(image: &ImageRgb, path: &Path) -> Result<(), ImageError> {
    if image.space != ColorSpace::Srgb {
        return Err(ImageError::SpaceMismatch(image.space));
    }
    for &v in &image.data {
        if !v.is_finite() {
            return Err(ImageError::NonFinite);
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(ImageError::OutOfRange(v));
        }
    }
    let (h, w) = (image.height, image.width);
    let mut bytes = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data[(c * h + y) * w + x];
                bytes[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| ImageError::Png(e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| ImageError::Png(e.to_string()))?;
    Ok(())
}

/// Load a binary PFM ("PF" = 3 channels, "Pf" = 1 channel, negative scale =
/// little-endian). Scanlines are stored bottom-to-top per the format.
pub fn load_pfm(path: &Path) -> Result<FloatBuffer, ImageError> {
    let mut reader = BufReader::new(File::open(path)?);
    let magic = read_header_token(&mut reader)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(ImageError::BadMagic(other.to_string())),
    };
    let w: usize = read_header_token(&mut reader)?
        .parse()
        .map_err(|_| ImageError::BadHeader("width".into()))?;
    let h: usize = read_header_token(&mut reader)?
        .parse()
        .map_err(|_| ImageError::BadHeader("height".into()))?;
    if w == 0 || h == 0 {
        return Err(ImageError::EmptyDimensions);
    }
    let scale: f32 = read_header_token(&mut reader)?
        .parse()
        .map_err(|_| ImageError::BadHeader("scale".into()))?;
    let little_endian = scale < 0.0;

    let mut payload = vec![0u8; w * h * channels * 4];
    reader.read_exact(&mut payload)?;
    let mut data = vec![0.0f32; channels * h * w];
    for row in 0..h {
        let y = h - 1 - row; // bottom-to-top
        for x in 0..w {
            for c in 0..channels {
                let off = ((row * w + x) * channels + c) * 4;
                let raw: [u8; 4] = payload[off..off + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                data[(c * h + y) * w + x] = v;
            }
        }
    }
    Ok(FloatBuffer::new(channels, h, w, data))
}

/// Save a 1- or 3-channel buffer as little-endian binary PFM.
pub fn save_pfm(buffer: &FloatBuffer, path: &Path) -> Result<(), ImageError> {
    let channels = buffer.channels();
    let magic = match channels {
        3 => "PF",
        1 => "Pf",
        _ => {
            return Err(ImageError::BadHeader(format!(
                "PFM stores 1 or 3 channels, got {channels}"
            )))
        }
    };
    if buffer.height() == 0 || buffer.width() == 0 {
        return Err(ImageError::EmptyDimensions);
    }
    if !buffer.all_finite() {
        return Err(ImageError::NonFinite);
    }
    let (h, w) = (buffer.height(), buffer.width());
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "{magic}\n{w} {h}\n-1.0\n")?;
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            for c in 0..channels {
                out.write_all(&buffer.get(c, y, x).to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn read_header_token(reader: &mut impl BufRead) -> Result<String, ImageError> {
    let mut token = String::new();
    loop {
        let mut byte = [0u8; 1];
        reader.read_exact(&mut byte)?;
        let ch = byte[0] as char;
        if ch.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(ch);
        if token.len() > 32 {
            return Err(ImageError::BadHeader("oversized header token".into()));
        }
    }
}

/// IEC 61966-2-1 decoding of one component.
pub fn srgb_component_to_linear(u: f32) -> f32 {
    if u <= 0.04045 {
        u / 12.92
    } else {
        ((u + 0.055) / 1.055).powf(2.4)
    }
}

/// IEC 61966-2-1 encoding of one component.
pub fn linear_component_to_srgb(v: f32) -> f32 {
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Decode an sRGB-encoded image to linear radiance.
pub fn srgb_to_linear(image: &ImageRgb) -> Result<ImageRgb, ImageError> {
    if image.space == ColorSpace::Linear {
        return Err(ImageError::SpaceMismatch(ColorSpace::Linear));
    }
    let data = image.data.iter().map(|&v| srgb_component_to_linear(v)).collect();
    Ok(ImageRgb::new(image.height, image.width, data, ColorSpace::Linear))
}

/// Encode a linear image to sRGB. Inputs are expected in `[0,1]`.
pub fn linear_to_srgb(image: &ImageRgb) -> Result<ImageRgb, ImageError> {
    if image.space == ColorSpace::Srgb {
        return Err(ImageError::SpaceMismatch(ColorSpace::Srgb));
    }
    let data = image.data.iter().map(|&v| linear_component_to_srgb(v)).collect();
    Ok(ImageRgb::new(image.height, image.width, data, ColorSpace::Srgb))
}

/// Bilinear resample with half-pixel-center alignment. Sample coordinates are
/// clamped at the border, so constant buffers stay constant and outputs never
/// leave the source value range.
pub fn resize_bilinear(buffer: &FloatBuffer, new_h: usize, new_w: usize) -> FloatBuffer {
    assert!(new_h > 0 && new_w > 0, "resize dimensions must be positive");
    let (c_n, h, w) = (buffer.channels(), buffer.height(), buffer.width());
    let sy_scale = h as f64 / new_h as f64;
    let sx_scale = w as f64 / new_w as f64;
    let mut out = vec![0.0f32; c_n * new_h * new_w];
    for y in 0..new_h {
        let sy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..new_w {
            let sx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for c in 0..c_n {
                let v = if fy == 0.0 && fx == 0.0 {
                    buffer.get(c, y0, x0)
                } else {
                    let v00 = buffer.get(c, y0, x0);
                    let v01 = buffer.get(c, y0, x1);
                    let v10 = buffer.get(c, y1, x0);
                    let v11 = buffer.get(c, y1, x1);
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    top + (bot - top) * fy
                };
                out[(c * new_h + y) * new_w + x] = v;
            }
        }
    }
    FloatBuffer::new(c_n, new_h, new_w, out)
}

/// Mirror a buffer left-to-right (used for joint horizontal flips).
pub fn flip_horizontal(buffer: &FloatBuffer) -> FloatBuffer {
    let (c_n, h, w) = (buffer.channels(), buffer.height(), buffer.width());
    let mut out = vec![0.0f32; c_n * h * w];
    for c in 0..c_n {
        for y in 0..h {
            for x in 0..w {
                out[(c * h + y) * w + x] = buffer.get(c, y, w - 1 - x);
            }
        }
    }
    FloatBuffer::new(c_n, h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn png_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let codes = [0u8, 128, 255, 17, 254, 1, 99, 200, 3, 64, 127, 250];
        let data: Vec<f32> = {
            // planar layout from interleaved codes
            let mut d = vec![0.0; 12];
            for y in 0..2 {
                for x in 0..2 {
                    for c in 0..3 {
                        d[(c * 2 + y) * 2 + x] = f32::from(codes[(y * 2 + x) * 3 + c]) / 255.0;
                    }
                }
            }
            d
        };
        let img = ImageRgb::new(2, 2, data, ColorSpace::Srgb);
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    let code = (back.get(c, y, x) * 255.0).round() as u8;
                    assert_eq!(code, codes[(y * 2 + x) * 3 + c]);
                }
            }
        }
    }

    #[test]
    fn png_rejects_16_bit() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let file = File::create(&path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 2, 2);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().unwrap();
        writer.write_image_data(&[0u8; 2 * 2 * 3 * 2]).unwrap();
        drop(writer);
        match load_png(&path) {
            Err(ImageError::UnsupportedBitDepth) => {}
            other => panic!("expected bit-depth error, got {other:?}"),
        }
    }

    #[test]
    fn png_rejects_rgba() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        let file = File::create(&path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 1, 1);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().unwrap();
        writer.write_image_data(&[10, 20, 30, 255]).unwrap();
        drop(writer);
        assert!(matches!(load_png(&path), Err(ImageError::NonRgbLayout)));
    }

    #[test]
    fn save_png_rejects_nan_before_write() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.png");
        let mut img = ImageRgb::constant(2, 2, [0.5, 0.5, 0.5], ColorSpace::Srgb);
        img.set(1, 0, 1, f32::NAN);
        assert!(matches!(save_png(&img, &path), Err(ImageError::NonFinite)));
        assert!(!path.exists());
    }

    #[test]
    fn pfm_round_trip_is_lossless() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.pfm");
        let mut buf = FloatBuffer::constant(3, 3, 2, 2.75);
        buf.set(0, 0, 0, -1.5e-7);
        buf.set(2, 2, 1, 1234.5678);
        save_pfm(&buf, &path).unwrap();
        let back = load_pfm(&path).unwrap();
        assert_eq!(buf, back);
    }

    #[test]
    fn pfm_single_channel_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gray.pfm");
        let buf = FloatBuffer::new(1, 2, 3, vec![0.0, 0.125, 7.0, -3.25, 2.75, 9.5]);
        save_pfm(&buf, &path).unwrap();
        assert_eq!(load_pfm(&path).unwrap(), buf);
    }

    #[test]
    fn pfm_rejects_zero_width() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("zero.pfm");
        std::fs::write(&path, b"PF\n0 4\n-1.0\n").unwrap();
        assert!(matches!(load_pfm(&path), Err(ImageError::EmptyDimensions)));
    }

    #[test]
    fn pfm_rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"P6\n2 2\n-1.0\n").unwrap();
        assert!(matches!(load_pfm(&path), Err(ImageError::BadMagic(_))));
    }

    #[test]
    fn nine_channel_stack_as_three_pfms_reassembles() {
        let dir = tempdir().unwrap();
        let mut parts = Vec::new();
        for i in 0..3 {
            let data: Vec<f32> = (0..3 * 4 * 4).map(|k| (i * 100 + k) as f32 * 0.37).collect();
            parts.push(FloatBuffer::new(3, 4, 4, data));
        }
        for (i, p) in parts.iter().enumerate() {
            save_pfm(p, &dir.path().join(format!("part{i}.pfm"))).unwrap();
        }
        let loaded: Vec<FloatBuffer> = (0..3)
            .map(|i| load_pfm(&dir.path().join(format!("part{i}.pfm"))).unwrap())
            .collect();
        let stack = FloatBuffer::concat_channels(&loaded.iter().collect::<Vec<_>>());
        let expect = FloatBuffer::concat_channels(&parts.iter().collect::<Vec<_>>());
        assert_eq!(stack, expect);
        assert_eq!(stack.channels(), 9);
    }

    #[test]
    fn srgb_transfer_fixed_points_and_midpoint() {
        assert_eq!(srgb_component_to_linear(0.0), 0.0);
        assert!((srgb_component_to_linear(1.0) - 1.0).abs() < 1e-6);
        // evaluated from the piecewise IEC formula: ((0.5+0.055)/1.055)^2.4
        assert!((srgb_component_to_linear(0.5) - 0.214_041_14).abs() < 1e-5);
        assert_eq!(linear_component_to_srgb(0.0), 0.0);
        assert!((linear_component_to_srgb(1.0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn srgb_round_trip_of_0_3() {
        let img = ImageRgb::constant(1, 1, [0.3, 0.3, 0.3], ColorSpace::Srgb);
        let back = linear_to_srgb(&srgb_to_linear(&img).unwrap()).unwrap();
        assert!((back.get(0, 0, 0) - 0.3).abs() < 1e-6);
    }

    #[test]
    fn double_encoding_is_rejected() {
        let img = ImageRgb::constant(1, 1, [0.3, 0.3, 0.3], ColorSpace::Linear);
        assert!(matches!(srgb_to_linear(&img), Err(ImageError::SpaceMismatch(_))));
        let img = ImageRgb::constant(1, 1, [0.3, 0.3, 0.3], ColorSpace::Srgb);
        assert!(matches!(linear_to_srgb(&img), Err(ImageError::SpaceMismatch(_))));
    }

    #[test]
    fn resize_constant_stays_constant() {
        let buf = FloatBuffer::constant(2, 8, 8, 0.4);
        let out = resize_bilinear(&buf, 3, 5);
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn resize_identity_is_bit_identical() {
        let data: Vec<f32> = (0..2 * 4 * 5).map(|k| (k as f32).sin()).collect();
        let buf = FloatBuffer::new(2, 4, 5, data);
        let out = resize_bilinear(&buf, 4, 5);
        assert_eq!(buf, out);
    }

    #[test]
    fn resize_2x2_to_2x3_interpolates_middle_column() {
        // hand-evaluated: dst x=1 has source coord 0.5, halfway between columns
        let buf = FloatBuffer::new(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let out = resize_bilinear(&buf, 2, 3);
        for y in 0..2 {
            assert_eq!(out.get(0, y, 0), 0.0);
            assert!((out.get(0, y, 1) - 0.5).abs() < 1e-7);
            assert_eq!(out.get(0, y, 2), 1.0);
        }
    }

    proptest! {
        #[test]
        fn srgb_round_trip_dense_grid(v in 0.0f32..=1.0f32) {
            let lin = srgb_component_to_linear(v);
            let back = linear_component_to_srgb(lin);
            prop_assert!((back - v).abs() < 1e-6);
        }

        #[test]
        fn resize_preserves_value_range(
            data in proptest::collection::vec(-5.0f32..5.0, 4 * 6),
            nh in 1usize..9,
            nw in 1usize..9,
        ) {
            let buf = FloatBuffer::new(1, 4, 6, data);
            let (lo, hi) = buf.data().iter().fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let out = resize_bilinear(&buf, nh, nw);
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }
}
