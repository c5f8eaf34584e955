//! Dense row-major `H×W×C` rasters and their on-disk float format.
//!
//! File layout: a 16-byte header of four little-endian `u32`
//! (`height`, `width`, `channels`, `stride`) followed by `height·width·channels`
//! little-endian `f32` values in `(y, x, c)` order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<S> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor3<S> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![S::zero(); height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!(
                    "{} values for {height}×{width}×{channels}",
                    height * width * channels
                ),
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.height && x < self.width && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> S {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: S) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Value at signed coordinates; zero outside the raster.
    #[inline]
    pub fn get_or_zero(&self, y: isize, x: isize, c: usize) -> S {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            S::zero()
        } else {
            self.get(y as usize, x as usize, c)
        }
    }

    /// All channel values at one cell.
    pub fn pixel(&self, y: usize, x: usize) -> &[S] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    /// Bilinear sample of channel `c` at continuous coordinates, pixel centers at `+0.5`.
    pub fn sample_bilinear(&self, x: S, y: S, c: usize) -> S {
        let half = S::of(0.5);
        let (u, v) = (x - half, y - half);
        let (x0, y0) = (u.floor(), v.floor());
        let (fx, fy) = (u - x0, v - y0);
        let (ix, iy) = (
            x0.to_isize().unwrap_or(isize::MIN / 2),
            y0.to_isize().unwrap_or(isize::MIN / 2),
        );
        let one = S::one();
        self.get_or_zero(iy, ix, c) * (one - fx) * (one - fy)
            + self.get_or_zero(iy, ix + 1, c) * fx * (one - fy)
            + self.get_or_zero(iy + 1, ix, c) * (one - fx) * fy
            + self.get_or_zero(iy + 1, ix + 1, c) * fx * fy
    }

    pub fn cast<T: Scalar>(&self) -> Tensor3<T> {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W, stride: u32) -> std::io::Result<()> {
        for dim in [self.height, self.width, self.channels] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&stride.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads a tensor and the stride stored in its header.
    pub fn read_from<R: Read>(mut r: R) -> std::io::Result<(Self, u32)> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        let field = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap());
        let (h, w, c, stride) = (
            field(0) as usize,
            field(1) as usize,
            field(2) as usize,
            field(3),
        );
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, "tensor too large")
            })?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "trailing bytes after tensor data",
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| S::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        Ok((
            Self {
                height: h,
                width: w,
                channels: c,
                data,
            },
            stride,
        ))
    }

    pub fn save(&self, path: &Path, stride: u32) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w, stride)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, u32)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file)).map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData | std::io::ErrorKind::UnexpectedEof => Error::Parse {
                path: path.into(),
                reason: e.to_string(),
            },
            _ => Error::io(path, e),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_sixteen_bytes_little_endian() {
        let mut t = Tensor3::<f32>::zeros(2, 3, 1);
        t.set(1, 2, 0, 0.5);
        let mut buf = Vec::new();
        t.write_to(&mut buf, 4).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 4);
        assert_eq!(
            &buf[..16],
            &[2, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0, 4, 0, 0, 0]
        );
        assert_eq!(&buf[buf.len() - 4..], &0.5f32.to_le_bytes());
        let (back, stride) = Tensor3::<f32>::read_from(&buf[..]).unwrap();
        assert_eq!((back, stride), (t, 4));
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let t = Tensor3::<f64>::zeros(2, 2, 2);
        let mut buf = Vec::new();
        t.write_to(&mut buf, 1).unwrap();
        assert!(Tensor3::<f64>::read_from(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(Tensor3::<f64>::read_from(&buf[..]).is_err());
    }

    #[test]
    fn bilinear_hits_pixel_centers() {
        let mut t = Tensor3::<f64>::zeros(2, 2, 1);
        t.set(0, 1, 0, 1.0);
        assert_eq!(t.sample_bilinear(1.5, 0.5, 0), 1.0);
        assert_eq!(t.sample_bilinear(1.0, 0.5, 0), 0.5);
        assert_eq!(t.sample_bilinear(-3.0, 0.5, 0), 0.0);
    }
}
