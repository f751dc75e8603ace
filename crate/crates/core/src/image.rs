//! RGB pixel grids in [0,1] with PPM (P6) persistence and deterministic
//! resizing.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major `[height][width][3]`, values in [0,1].
    pub data: Vec<f64>,
}

impl ImageGrid {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        ImageGrid { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageGrid { height, width, data: vec![0.0; height * width * CHANNELS] }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Deterministic resize: exact-integer downscale mean-pools, exact-integer
    /// upscale replicates pixels, anything else falls back to nearest
    /// neighbor.
    pub fn resize(&self, height: usize, width: usize) -> Result<ImageGrid> {
        if height == 0 || width == 0 {
            return Err(Error::Dim("resize to empty image".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut out = ImageGrid::zeros(height, width);
        if self.height % height == 0 && self.width % width == 0 {
            let (fy, fx) = (self.height / height, self.width / width);
            let norm = 1.0 / (fy * fx) as f64;
            for y in 0..height {
                for x in 0..width {
                    let mut acc = [0.0; 3];
                    for dy in 0..fy {
                        for dx in 0..fx {
                            let p = self.pixel(y * fy + dy, x * fx + dx);
                            for c in 0..3 {
                                acc[c] += p[c];
                            }
                        }
                    }
                    out.set_pixel(y, x, [acc[0] * norm, acc[1] * norm, acc[2] * norm]);
                }
            }
        } else if height % self.height == 0 && width % self.width == 0 {
            let (fy, fx) = (height / self.height, width / self.width);
            for y in 0..height {
                for x in 0..width {
                    out.set_pixel(y, x, self.pixel(y / fy, x / fx));
                }
            }
        } else {
            for y in 0..height {
                for x in 0..width {
                    let sy = (y * self.height) / height;
                    let sx = (x * self.width) / width;
                    out.set_pixel(y, x, self.pixel(sy, sx));
                }
            }
        }
        Ok(out)
    }

    /// Binary PPM, 8 bits per channel.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() + 32);
        write!(buf, "P6\n{} {}\n255\n", self.width, self.height)?;
        for v in &self.data {
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<ImageGrid> {
        let bytes = std::fs::read(path)?;
        // Header: four whitespace-separated tokens, then one whitespace byte,
        // then raw pixel data.
        let mut pos = 0;
        let mut tokens: Vec<String> = Vec::with_capacity(4);
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            let tok = std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::Format("non-ascii PPM header".into()))?;
            tokens.push(tok.to_string());
        }
        pos += 1;
        if tokens[0] != "P6" || tokens[3] != "255" {
            return Err(Error::Format(format!("unsupported PPM header {tokens:?}")));
        }
        let width: usize = tokens[1].parse().map_err(|_| Error::Format("bad PPM width".into()))?;
        let height: usize = tokens[2].parse().map_err(|_| Error::Format("bad PPM height".into()))?;
        let need = width * height * CHANNELS;
        let raw = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::Format("truncated PPM pixel data".into()))?;
        let data = raw.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(ImageGrid { height, width, data })
    }
}
