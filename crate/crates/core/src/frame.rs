//! Video frames and object-id masks, plus their on-disk codecs.
//!
//! Masks are 8-bit indexed PNGs where the palette index is the object id,
//! the layout used by the DAVIS distribution.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{arg_err, dim_err, FrtmError, Result};

/// RGB frame with interleaved `f32` samples in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(dim_err(format!("image data has {} values, expected {}", data.len(), height * width * 3)));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
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

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luma in `[0, 255]`.
    pub fn gray(&self) -> Vec<f32> {
        self.data.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(FrtmError::MissingInput(path.to_path_buf()));
        }
        let img = image::open(path)
            .map_err(|e| FrtmError::Codec { path: path.to_path_buf(), message: e.to_string() })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(f32::from).collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length checked at construction");
        img.save(path).map_err(|e| FrtmError::Codec { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// Per-pixel object ids; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err(format!("mask data has {} values, expected {}", data.len(), height * width)));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: u8) {
        self.data[y * self.width + x] = id;
    }

    pub fn same_geometry(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Sorted distinct non-zero ids.
    pub fn object_ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&id| seen[id as usize]).collect()
    }

    /// 0/1 mask of pixels carrying `id`.
    pub fn object_mask(&self, id: u8) -> LabelMask {
        LabelMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| u8::from(v == id)).collect(),
        }
    }

    /// 0/1 mask of all non-zero pixels.
    pub fn foreground(&self) -> LabelMask {
        LabelMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| u8::from(v != 0)).collect(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Block-majority downsampling of a binary mask; output is `ceil(h / factor) x ceil(w / factor)`.
    pub fn downsample_binary(&self, factor: usize) -> Result<LabelMask> {
        if factor == 0 {
            return Err(arg_err("downsampling factor must be >= 1"));
        }
        if factor == 1 {
            return Ok(self.foreground());
        }
        let oh = self.height.div_ceil(factor);
        let ow = self.width.div_ceil(factor);
        let mut data = Vec::with_capacity(oh * ow);
        for by in 0..oh {
            for bx in 0..ow {
                let (mut on, mut total) = (0usize, 0usize);
                for y in by * factor..((by + 1) * factor).min(self.height) {
                    for x in bx * factor..((bx + 1) * factor).min(self.width) {
                        total += 1;
                        on += usize::from(self.get(y, x) != 0);
                    }
                }
                data.push(u8::from(2 * on >= total));
            }
        }
        Ok(LabelMask { height: oh, width: ow, data })
    }

    /// Reads the raw palette indices of an 8-bit PNG (grayscale PNGs are read as-is).
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(FrtmError::MissingInput(path.to_path_buf()));
        }
        let codec = |e: png::DecodingError| FrtmError::Codec { path: path.to_path_buf(), message: e.to_string() };
        let mut decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder.read_info().map_err(codec)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(codec)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(FrtmError::Codec {
                path: path.to_path_buf(),
                message: format!("expected 8-bit mask, got {:?}", info.bit_depth),
            });
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            let row = &buf[y * info.line_size..y * info.line_size + w * channels];
            data.extend(row.chunks_exact(channels).map(|px| px[0]));
        }
        Self::new(h, w, data)
    }

    /// Writes an indexed PNG with the DAVIS color palette.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut encoder = png::Encoder::new(file, self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Indexed);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_palette(davis_palette());
        let codec = |e: png::EncodingError| FrtmError::Codec { path: path.to_path_buf(), message: e.to_string() };
        let mut writer = encoder.write_header().map_err(codec)?;
        writer.write_image_data(&self.data).map_err(codec)?;
        writer.finish().map_err(codec)?;
        Ok(())
    }
}

/// The 256-entry bit-interleaved palette shipped with DAVIS annotations.
pub fn davis_palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for i in 0..256u32 {
        let (mut r, mut g, mut b) = (0u32, 0u32, 0u32);
        let mut c = i;
        for j in 0..8 {
            r |= (c & 1) << (7 - j);
            g |= ((c >> 1) & 1) << (7 - j);
            b |= ((c >> 2) & 1) << (7 - j);
            c >>= 3;
        }
        pal.extend_from_slice(&[r as u8, g as u8, b as u8]);
    }
    pal
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_starts_like_davis() {
        let p = davis_palette();
        assert_eq!(&p[..9], &[0, 0, 0, 128, 0, 0, 0, 128, 0]);
    }

    #[test]
    fn mask_png_round_trip_keeps_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = LabelMask::from_fn(7, 9, |y, x| ((y * 9 + x) % 4) as u8);
        m.save(&path).unwrap();
        assert_eq!(LabelMask::load(&path).unwrap(), m);
    }

    #[test]
    fn object_ids_are_sorted_and_nonzero() {
        let m = LabelMask::new(1, 5, vec![0, 3, 1, 3, 0]).unwrap();
        assert_eq!(m.object_ids(), vec![1, 3]);
        assert_eq!(m.object_mask(3).data(), &[0, 1, 0, 1, 0]);
    }

    #[test]
    fn downsample_majority() {
        let m = LabelMask::new(2, 3, vec![1, 1, 0, 0, 1, 0]).unwrap();
        let d = m.downsample_binary(2).unwrap();
        assert_eq!((d.height(), d.width()), (1, 2));
        assert_eq!(d.data(), &[1, 0]);
    }
}
