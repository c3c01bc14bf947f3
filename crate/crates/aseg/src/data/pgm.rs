//! Binary PGM (P5) reading and writing.

use std::io::Write;
use std::path::Path;

use super::DataError;

/// Grayscale raster with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f32>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T, DataError> {
        Err(DataError::Pgm {
            path: self.path.to_path_buf(),
            offset: self.pos,
            reason: reason.into(),
        })
    }

    /// Skips whitespace and `#` comments (to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize, DataError> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse()
            .map_err(|_| DataError::Pgm {
                path: self.path.to_path_buf(),
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

/// Reads a binary PGM ("P5", maxval 255); intensities are scaled by 1/255.
pub fn load_image_pgm(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if !bytes.starts_with(b"P5") {
        return cur.fail("expected binary PGM magic \"P5\"");
    }
    cur.pos = 2;
    let w = cur.read_uint("width")?;
    let h = cur.read_uint("height")?;
    let maxval_at = {
        cur.skip_separators();
        cur.pos
    };
    let maxval = cur.read_uint("maxval")?;
    if maxval != 255 {
        cur.pos = maxval_at;
        return cur.fail(format!("maxval must be 255, got {maxval}"));
    }
    // exactly one separator byte before the payload
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return cur.fail("expected single whitespace before payload");
    }
    cur.pos += 1;
    let need = w.checked_mul(h).ok_or_else(|| DataError::Pgm {
        path: path.to_path_buf(),
        offset: cur.pos,
        reason: "image too large".into(),
    })?;
    let have = bytes.len() - cur.pos;
    if have < need {
        cur.pos = bytes.len();
        return cur.fail(format!("truncated payload: need {need} bytes, have {have}"));
    }
    let data = bytes[cur.pos..cur.pos + need]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    Ok(GrayImage { w, h, data })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_p5(path: &Path, w: usize, h: usize, payload: &[u8]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    write!(file, "P5\n{w} {h}\n255\n").map_err(io_err)?;
    file.write_all(payload).map_err(io_err)?;
    Ok(())
}

/// Writes intensities quantized to 8 bits as a binary PGM.
pub fn save_image_pgm(img: &GrayImage, path: &Path) -> Result<(), DataError> {
    let payload: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    write_p5(path, img.w, img.h, &payload)
}

/// Writes a nonnegative map min-max normalized to `[0, 255]`; a constant map
/// writes mid-gray 128.
pub fn save_heatmap(values: &[f64], w: usize, h: usize, path: &Path) -> Result<(), DataError> {
    assert_eq!(values.len(), w * h, "heatmap extents");
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let payload: Vec<u8> = if !(hi - lo).is_normal() {
        vec![128; values.len()]
    } else {
        values
            .iter()
            .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
            .collect()
    };
    write_p5(path, w, h, &payload)
}
