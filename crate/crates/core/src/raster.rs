//! Square image fields and the little-endian raster containers used on disk.
//!
//! Float image container (`.f64`):
//!
//! | offset | size | content                         |
//! |--------|------|---------------------------------|
//! | 0      | 8    | magic `CSFMF64\0`               |
//! | 8      | 4    | height, u32 LE                  |
//! | 12     | 4    | width, u32 LE                   |
//! | 16     | 8·hw | row-major f64 LE pixel values   |
//!
//! Frame-stack container (`.stack`): magic `CSFMSTK\0`, then u32 LE frame
//! count, height and width, then the frames back to back as f64 LE.

use std::fs;
use std::path::Path;

use crate::error::{check_len, Error, Result};

pub const IMAGE_MAGIC: &[u8; 8] = b"CSFMF64\0";
pub const STACK_MAGIC: &[u8; 8] = b"CSFMSTK\0";

/// Row-major square pixel field.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        check_len(side * side, data.len())?;
        Ok(Image { side, data })
    }

    pub fn zeros(side: usize) -> Self {
        Image {
            side,
            data: vec![0.0; side * side],
        }
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Image {
            side,
            data: vec![value; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.side + col]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&v| v >= 0.0)
    }

    /// Copy of the `size × size` window with top-left corner at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size: usize) -> Result<Image> {
        if row + size > self.side || col + size > self.side {
            return Err(Error::Shape(format!(
                "crop {size}x{size} at ({row},{col}) exceeds {0}x{0}",
                self.side
            )));
        }
        let mut data = Vec::with_capacity(size * size);
        for r in row..row + size {
            let start = r * self.side + col;
            data.extend_from_slice(&self.data[start..start + size]);
        }
        Ok(Image { side: size, data })
    }

    /// Rescale so the maximum equals `peak`; an all-zero image is returned as is.
    pub fn scaled_to_peak(&self, peak: f64) -> Image {
        let max = self.max();
        if max <= 0.0 {
            return self.clone();
        }
        let s = peak / max;
        Image {
            side: self.side,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn write_f64(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + 8 * self.data.len());
        bytes.extend_from_slice(IMAGE_MAGIC);
        bytes.extend_from_slice(&(self.side as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.side as u32).to_le_bytes());
        push_f64s(&mut bytes, &self.data);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_f64(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor::new(&bytes, path);
        cur.magic(IMAGE_MAGIC)?;
        let h = cur.u32()? as usize;
        let w = cur.u32()? as usize;
        if h != w {
            return Err(Error::Format(format!(
                "{}: only square images are supported, got {h}x{w}",
                path.display()
            )));
        }
        let data = cur.f64s(h * w)?;
        cur.finish()?;
        Image::new(h, data)
    }
}

pub(crate) fn push_f64s(bytes: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little-endian reader over a byte buffer with file-aware errors.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Cursor { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("{}: truncated file", self.path.display())));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        if self.take(8)? != expected {
            return Err(Error::Format(format!("{}: bad magic header", self.path.display())));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.path.display(),
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Write an 8-bit binary PGM.
pub fn write_pgm8(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    check_len(width * height, pixels.len())?;
    save_pgm(path, width, height, 255, pixels, image::ExtendedColorType::L8)
}

/// Write a 16-bit binary PGM.
pub fn write_pgm16(path: &Path, width: usize, height: usize, pixels: &[u16]) -> Result<()> {
    check_len(width * height, pixels.len())?;
    let bytes: Vec<u8> = pixels.iter().flat_map(|v| v.to_ne_bytes()).collect();
    save_pgm(path, width, height, 65535, &bytes, image::ExtendedColorType::L16)
}

fn save_pgm(path: &Path, width: usize, height: usize, maxwhite: u32, bytes: &[u8], color: image::ExtendedColorType) -> Result<()> {
    use image::codecs::pnm::{GraymapHeader, PnmEncoder, PnmHeader, SampleEncoding};
    use image::ImageEncoder;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let header = PnmHeader::from(GraymapHeader {
        encoding: SampleEncoding::Binary,
        width: width as u32,
        height: height as u32,
        maxwhite,
    });
    PnmEncoder::new(&mut writer)
        .with_header(header)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Read a grayscale PGM (8- or 16-bit) as `(width, height, values)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let gray = img.to_luma16();
    let (w, h) = gray.dimensions();
    let values = match img {
        image::DynamicImage::ImageLuma8(ref g) => g.as_raw().iter().map(|&v| v as f64).collect(),
        _ => gray.as_raw().iter().map(|&v| v as f64).collect(),
    };
    Ok((w as usize, h as usize, values))
}
