//! Floating-point RGB images and binary PPM output.

use std::io::Write;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels, channels nominally in `[0, 1]`.
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Self {
        Image {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                found: pixels.len(),
            });
        }
        Ok(Image { width, height, pixels })
    }

    pub fn get(&self, i: usize, j: usize) -> [f64; 3] {
        self.pixels[j * self.width + i]
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::DimensionMismatch {
                expected: self.width * self.height,
                found: other.width * other.height,
            });
        }
        Ok(())
    }

    /// Channels clamped to `[0, 1]` and rounded to 8 bits.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.to_rgb8())?;
        Ok(())
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_ppm(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_layout() {
        let mut img = Image::new(2, 1, [0.0; 3]);
        img.pixels[1] = [1.0, 0.5, 2.0];
        let ppm = img.to_ppm();
        assert_eq!(&ppm[..11], b"P6\n2 1\n255\n");
        assert_eq!(&ppm[11..], &[0, 0, 0, 255, 128, 255]);
    }

    #[test]
    fn shape_checks() {
        assert!(Image::from_pixels(2, 2, vec![[0.0; 3]; 3]).is_err());
        let a = Image::new(2, 2, [0.0; 3]);
        assert!(a.check_same_shape(&Image::new(2, 3, [0.0; 3])).is_err());
        assert!(a.check_same_shape(&a.clone()).is_ok());
    }
}
