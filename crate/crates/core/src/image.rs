use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::input("image has a zero dimension"));
        }
        if pixels.len() != width * height {
            return Err(Error::input(format!(
                "image buffer holds {} bytes, expected {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| Error::file(path, e))?;
        writer.write_image_data(&self.pixels).map_err(|e| Error::file(path, e))?;
        writer.finish().map_err(|e| Error::file(path, e))?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::file(path, e))?;
        let info = reader.info();
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::file(path, "expected an 8-bit grayscale PNG"));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::file(path, "image too large"))?;
        let mut buf = vec![0u8; size];
        let frame = reader.next_frame(&mut buf).map_err(|e| Error::file(path, e))?;
        buf.truncate(frame.buffer_size());
        if buf.len() != w * h {
            return Err(Error::file(path, "unexpected PNG row layout"));
        }
        Self::new(w, h, buf).map_err(|e| Error::file(path, e))
    }
}
