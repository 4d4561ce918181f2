//! Lossless 8-bit RGB image I/O.
//!
//! One binary container (PPM `P6`) and one human-authorable ASCII fallback
//! (PPM `P3`); both carry interleaved RGB rows on disk. In memory samples
//! live as `[0,1]` values in channel-major (planar) order, ready to feed the
//! network as a `[1,3,H,W]` tensor.

use crate::error::{Error, Result};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// Planar `[3, height, width]` samples scaled to `[0,1]`.
    pub data: Vec<f64>,
}

fn data_err(msg: impl Into<String>) -> Error {
    Error::data(msg.into())
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(data_err(format!(
                "image wants 3*{width}*{height} samples, got {}",
                data.len()
            )));
        }
        Ok(ImageBuffer { width, height, data })
    }

    /// Interleaved 8-bit RGB rows (the disk layout) to a planar buffer.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if width == 0 || height == 0 || bytes.len() != 3 * width * height {
            return Err(data_err(format!(
                "expected 3*{width}*{height} bytes, got {}",
                bytes.len()
            )));
        }
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for p in 0..plane {
            for ch in 0..3 {
                data[ch * plane + p] = bytes[p * 3 + ch] as f64 / 255.0;
            }
        }
        Ok(ImageBuffer { width, height, data })
    }

    /// Planar values back to interleaved 8-bit rows, clamped to `[0,1]` and
    /// rounded to the nearest level.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut bytes = vec![0u8; 3 * plane];
        for p in 0..plane {
            for ch in 0..3 {
                let v = self.data[ch * plane + p].clamp(0.0, 1.0);
                bytes[p * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
        bytes
    }

    pub fn encode_p6(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.to_rgb8());
        out
    }

    pub fn encode_p3(&self) -> String {
        let mut out = format!("P3\n{} {}\n255\n", self.width, self.height);
        for row in self.to_rgb8().chunks(3) {
            out.push_str(&format!("{} {} {}\n", row[0], row[1], row[2]));
        }
        out
    }

    /// Parse either container, strictly: exactly the declared number of
    /// samples, 8-bit depth, nothing after the raster.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.token()?;
        match magic.as_str() {
            "P6" => Self::decode_p6(cursor),
            "P3" => Self::decode_p3(cursor),
            other => Err(data_err(format!("unsupported image magic {other:?}"))),
        }
    }

    fn decode_header(cursor: &mut Cursor) -> Result<(usize, usize)> {
        let width: usize = cursor.number()?;
        let height: usize = cursor.number()?;
        let maxval: usize = cursor.number()?;
        if width == 0 || height == 0 {
            return Err(data_err("image extents must be positive"));
        }
        if maxval != 255 {
            return Err(data_err(format!("only 8-bit images supported, maxval {maxval}")));
        }
        Ok((width, height))
    }

    fn decode_p6(mut cursor: Cursor) -> Result<Self> {
        let (width, height) = Self::decode_header(&mut cursor)?;
        // Exactly one whitespace byte separates the header from the raster.
        match cursor.bytes.get(cursor.pos) {
            Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
            _ => return Err(data_err("missing raster separator")),
        }
        let want = 3 * width * height;
        let rest = &cursor.bytes[cursor.pos..];
        if rest.len() < want {
            return Err(data_err(format!(
                "raster truncated: want {want} bytes, have {}",
                rest.len()
            )));
        }
        if rest.len() > want {
            return Err(data_err(format!("{} trailing bytes after raster", rest.len() - want)));
        }
        Self::from_rgb8(width, height, rest)
    }

    fn decode_p3(mut cursor: Cursor) -> Result<Self> {
        let (width, height) = Self::decode_header(&mut cursor)?;
        let want = 3 * width * height;
        let mut bytes = Vec::with_capacity(want);
        for _ in 0..want {
            let v: usize = cursor.number()?;
            if v > 255 {
                return Err(data_err(format!("sample {v} above 8-bit range")));
            }
            bytes.push(v as u8);
        }
        if cursor.token().is_ok() {
            return Err(data_err("trailing samples after raster"));
        }
        Self::from_rgb8(width, height, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| data_err(format!("cannot read {}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_p6())
            .map_err(|e| data_err(format!("cannot write {}: {e}", path.display())))
    }
}

/// Header tokenizer: whitespace-separated fields with `#` comments running
/// to end of line, per the portable-pixmap convention.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn token(&mut self) -> Result<String> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        while let Some(b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || *b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(data_err("unexpected end of image header"));
        }
        String::from_utf8(self.bytes[start..self.pos].to_vec())
            .map_err(|_| data_err("non-ASCII bytes in image header"))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        t.parse().map_err(|_| data_err(format!("expected a number in header, got {t:?}")))
    }
}
