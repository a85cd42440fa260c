//! Strict readers and writers for binary netpbm images.
//!
//! Two formats are supported: `P6` (8-bit RGB, used for input images) and
//! `P5` (8-bit grayscale, used for masks and label maps). The parser is
//! deliberately unforgiving — a maxval other than 255, missing raster bytes,
//! or bytes after the raster are all rejected — and every rejection names
//! the file and the byte offset where the problem starts, so a corrupt
//! dataset points at itself.

use std::path::{Path, PathBuf};

use maskcontrast_core::error::{Error, Result};

/// Refuse to allocate rasters beyond this many pixels (64 Mpx). Far above
/// any legitimate input here, but it keeps a corrupted header from turning
/// into a multi-gigabyte allocation.
const MAX_PIXELS: usize = 1 << 26;

/// An 8-bit image as stored on disk: interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for grayscale (`P5`), 3 for RGB (`P6`).
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Cursor over a loaded file that tracks its byte offset for error messages.
struct Scanner {
    path: PathBuf,
    bytes: Vec<u8>,
    pos: usize,
}

impl Scanner {
    fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Scanner {
            path: path.to_path_buf(),
            bytes,
            pos: 0,
        })
    }

    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::format(&self.path, offset as u64, message)
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Advances past whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(b) = self.peek() {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    /// Reads one unsigned decimal token.
    fn read_number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        let mut value = 0usize;
        let mut digits = 0usize;
        while let Some(b) = self.peek() {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or_else(|| self.fail(start, format!("{what} overflows")))?;
            digits += 1;
            self.pos += 1;
        }
        if digits == 0 {
            return Err(self.fail(self.pos, format!("expected a decimal {what}")));
        }
        Ok(value)
    }
}

/// Parses a binary netpbm file with the given magic (`"P6"` or `"P5"`).
fn read_netpbm(path: &Path, magic: &[u8; 2], channels: usize) -> Result<Raster> {
    let mut s = Scanner::open(path)?;

    if s.bytes.len() < 2 || &s.bytes[..2] != magic {
        let found = String::from_utf8_lossy(&s.bytes[..s.bytes.len().min(2)]).into_owned();
        return Err(s.fail(
            0,
            format!(
                "expected magic '{}', found '{found}'",
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    s.pos = 2;

    let width_at = {
        s.skip_separators();
        s.pos
    };
    let width = s.read_number("width")?;
    let height_at = {
        s.skip_separators();
        s.pos
    };
    let height = s.read_number("height")?;
    if width == 0 {
        return Err(s.fail(width_at, "width must be positive"));
    }
    if height == 0 {
        return Err(s.fail(height_at, "height must be positive"));
    }
    if width.saturating_mul(height) > MAX_PIXELS {
        return Err(s.fail(width_at, format!("{width}x{height} exceeds the {MAX_PIXELS}-pixel limit")));
    }

    let maxval_at = {
        s.skip_separators();
        s.pos
    };
    let maxval = s.read_number("maxval")?;
    if maxval != 255 {
        return Err(s.fail(maxval_at, format!("maxval must be 255, got {maxval}")));
    }

    // Exactly one whitespace byte separates the header from the raster.
    match s.peek() {
        Some(b) if b.is_ascii_whitespace() => s.pos += 1,
        _ => return Err(s.fail(s.pos, "expected a single whitespace byte after maxval")),
    }

    let expected = width * height * channels;
    let available = s.bytes.len() - s.pos;
    if available < expected {
        return Err(s.fail(
            s.bytes.len(),
            format!("raster needs {expected} bytes but only {available} remain"),
        ));
    }
    if available > expected {
        return Err(s.fail(
            s.pos + expected,
            format!("{} trailing bytes after the raster", available - expected),
        ));
    }

    let data = s.bytes[s.pos..].to_vec();
    Ok(Raster {
        width,
        height,
        channels,
        data,
    })
}

/// Reads an 8-bit RGB image (`P6`).
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Raster> {
    read_netpbm(path.as_ref(), b"P6", 3)
}

/// Reads an 8-bit grayscale image (`P5`).
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Raster> {
    read_netpbm(path.as_ref(), b"P5", 1)
}

fn write_netpbm(path: &Path, magic: &str, channels: usize, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Shape(format!(
            "cannot write a {width}x{height} image"
        )));
    }
    if data.len() != width * height * channels {
        return Err(Error::Shape(format!(
            "{width}x{height} with {channels} channels needs {} bytes, got {}",
            width * height * channels,
            data.len()
        )));
    }
    let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit RGB image (`P6`), interleaved row-major data.
pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_netpbm(path.as_ref(), "P6", 3, width, height, rgb)
}

/// Writes an 8-bit grayscale image (`P5`).
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write_netpbm(path.as_ref(), "P5", 1, width, height, gray)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str, bytes: &[u8]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        std::fs::write(&path, bytes).unwrap();
        (dir, path)
    }

    fn offset_of(err: Error) -> u64 {
        match err {
            Error::Format { offset, .. } => offset,
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn ppm_roundtrip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 7) as u8).collect();
        write_ppm(&path, 3, 2, &rgb).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        assert_eq!(back.channels, 3);
        assert_eq!(back.data, rgb);
    }

    #[test]
    fn pgm_roundtrip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let gray = vec![0u8, 255, 17, 99];
        write_pgm(&path, 2, 2, &gray).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!((back.width, back.height, back.channels), (2, 2, 1));
        assert_eq!(back.data, gray);
    }

    #[test]
    fn parser_accepts_comments_and_flexible_whitespace() {
        let (_d, path) = tmp(
            "c.pgm",
            b"P5 # magic comment\n# full line\n  2\t1 # dims\n255\n\x07\x08",
        );
        let img = read_pgm(&path).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![7, 8]);
    }

    #[test]
    fn wrong_magic_is_rejected_at_offset_zero() {
        let (_d, path) = tmp("m.ppm", b"P5\n1 1\n255\n\x00");
        let err = read_ppm(&path).unwrap_err();
        assert_eq!(offset_of(err), 0);
    }

    #[test]
    fn nonstandard_maxval_is_rejected_at_its_offset() {
        let (_d, path) = tmp("m.pgm", b"P5\n1 1\n65535\n\x00\x00");
        let err = read_pgm(&path).unwrap_err();
        // "P5\n1 1\n" is 7 bytes, so the maxval token starts at byte 7.
        assert_eq!(offset_of(err), 7);
    }

    #[test]
    fn truncated_raster_reports_end_of_file() {
        let (_d, path) = tmp("t.pgm", b"P5\n2 2\n255\n\x01\x02\x03");
        let err = read_pgm(&path).unwrap_err();
        let msg = err.to_string();
        assert_eq!(offset_of(err), 14); // file length
        assert!(msg.contains("needs 4 bytes"), "message was: {msg}");
    }

    #[test]
    fn trailing_bytes_are_rejected_at_the_first_extra_byte() {
        let (_d, path) = tmp("x.pgm", b"P5\n1 1\n255\n\x01\x02");
        let err = read_pgm(&path).unwrap_err();
        // Header is 11 bytes, raster 1 byte; the extra byte sits at 12.
        assert_eq!(offset_of(err), 12);
    }

    #[test]
    fn missing_dimension_and_zero_dimension_are_rejected() {
        let (_d, path) = tmp("bad.pgm", b"P5\n\n255\n");
        assert!(read_pgm(&path).is_err());

        let (_d2, path2) = tmp("zero.pgm", b"P5\n0 3\n255\n");
        let err = read_pgm(&path2).unwrap_err();
        assert!(err.to_string().contains("width must be positive"));
    }

    #[test]
    fn header_without_raster_separator_is_rejected() {
        let (_d, path) = tmp("sep.pgm", b"P5\n1 1\n255");
        let err = read_pgm(&path).unwrap_err();
        assert!(err.to_string().contains("whitespace byte after maxval"));
    }

    #[test]
    fn absurd_dimensions_are_rejected_before_allocation() {
        let (_d, path) = tmp("big.pgm", b"P5\n99999999 99999999\n255\n");
        let err = read_pgm(&path).unwrap_err();
        assert!(err.to_string().contains("pixel limit"));
    }

    #[test]
    fn writer_validates_buffer_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ppm");
        assert!(write_ppm(&path, 2, 2, &[0u8; 11]).is_err());
        assert!(write_ppm(&path, 0, 2, &[]).is_err());
    }
}
