//! Binary PGM (P5) reader and writer.
//!
//! The writer always emits the canonical header `P5\n<w> <h>\n255\n` followed
//! by the raw pixel bytes, so save→load→save is byte-identical. The reader
//! accepts any conforming P5 file: arbitrary whitespace between header
//! tokens and `#` comments inside the header. Parse failures report the byte
//! offset where the problem sits.

use std::fs;
use std::path::Path;

use crate::augment::RawImage;
use crate::error::{Error, Result};

/// Refuses headers claiming more pixels than any sane silhouette tree holds.
const MAX_PIXELS: usize = 1 << 26;

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> HeaderCursor<'a> {
    fn err(&self, offset: usize, message: String) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset, message }
    }

    /// Whitespace and `#`-to-end-of-line comments separate header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    /// Returns the parsed value and the byte offset of its first digit.
    fn read_uint(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_separators();
        let start = self.pos;
        let mut value: usize = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(usize::from(self.bytes[self.pos] - b'0')))
                .ok_or_else(|| self.err(start, format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(start, format!("expected {what}, found no digits")));
        }
        Ok((value, start))
    }
}

/// Reads a P5 file. The pixel payload must be exactly `width·height` bytes
/// after the single whitespace byte that terminates the header.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;

    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("magic {magic:?}, expected \"P5\""),
        });
    }

    let mut cur = HeaderCursor { bytes: &bytes, pos: 2, path };
    let (width, woff) = cur.read_uint("width")?;
    let (height, _) = cur.read_uint("height")?;
    if width == 0 || height == 0 {
        return Err(cur.err(woff, format!("degenerate size {width}x{height}")));
    }
    if width.saturating_mul(height) > MAX_PIXELS {
        return Err(cur.err(woff, format!("size {width}x{height} is implausibly large")));
    }
    let (maxval, moff) = cur.read_uint("maxval")?;
    if maxval != 255 {
        return Err(cur.err(moff, format!("maxval {maxval}, expected 255")));
    }

    // exactly one whitespace byte separates the header from the pixels
    let sep = cur.pos;
    match bytes.get(sep) {
        Some(b' ' | b'\t' | b'\r' | b'\n') => {}
        _ => return Err(cur.err(sep, "expected single whitespace after maxval".into())),
    }
    let data_start = sep + 1;
    let expected = width * height;
    let got = bytes.len() - data_start;
    if got < expected {
        return Err(cur.err(
            data_start,
            format!("pixel data truncated: expected {expected} bytes, found {got}"),
        ));
    }
    if got > expected {
        return Err(cur.err(
            data_start + expected,
            format!("{} trailing bytes after pixel data", got - expected),
        ));
    }
    RawImage::new(width, height, bytes[data_start..].to_vec())
}

/// Writes the canonical P5 form: `P5\n<w> <h>\n255\n` + raw bytes.
pub fn save_pgm(img: &RawImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("pgm-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn save_load_round_trips_pixels() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let px: Vec<u8> = (0..50 * 50).map(|_| r.gen()).collect();
        let img = RawImage::new(50, 50, px).unwrap();
        let p = tmp("round.pgm");
        save_pgm(&img, &p).unwrap();
        assert_eq!(load_pgm(&p).unwrap(), img);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let px: Vec<u8> = (0..30 * 20).map(|_| r.gen()).collect();
        let img = RawImage::new(30, 20, px).unwrap();
        let p1 = tmp("c1.pgm");
        let p2 = tmp("c2.pgm");
        save_pgm(&img, &p1).unwrap();
        save_pgm(&load_pgm(&p1).unwrap(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn header_accepts_comments_and_spread_whitespace() {
        let p = tmp("comments.pgm");
        let mut bytes = b"P5 # a comment\n# more\n  4\t2 #inline\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7, 6, 5, 4, 3, 2]);
        std::fs::write(&p, &bytes).unwrap();
        let img = load_pgm(&p).unwrap();
        assert_eq!((img.width(), img.height()), (4, 2));
        assert_eq!(img.pixels(), &[9, 8, 7, 6, 5, 4, 3, 2]);
    }

    #[test]
    fn wrong_magic_is_named() {
        let p = tmp("p6.pgm");
        std::fs::write(&p, b"P6\n2 2\n255\n0000").unwrap();
        let e = load_pgm(&p).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("P6"), "{msg}");
        assert!(msg.contains("P5"), "{msg}");
    }

    #[test]
    fn bad_maxval_reports_offset() {
        let p = tmp("max.pgm");
        std::fs::write(&p, b"P5\n2 2\n65535\n\0\0\0\0").unwrap();
        match load_pgm(&p).unwrap_err() {
            Error::Format { offset, message, .. } => {
                assert_eq!(offset, 7);
                assert!(message.contains("65535"), "{message}");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn truncated_and_trailing_data_rejected() {
        let p = tmp("short.pgm");
        std::fs::write(&p, b"P5\n3 3\n255\n\0\0\0\0").unwrap();
        let msg = load_pgm(&p).unwrap_err().to_string();
        assert!(msg.contains("truncated"), "{msg}");

        let p2 = tmp("long.pgm");
        std::fs::write(&p2, b"P5\n2 2\n255\n\0\0\0\0\0").unwrap();
        let msg = load_pgm(&p2).unwrap_err().to_string();
        assert!(msg.contains("trailing"), "{msg}");
    }

    #[test]
    fn missing_file_is_io_error() {
        match load_pgm(tmp("never-written.pgm")).unwrap_err() {
            Error::Io { .. } => {}
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn all_white_fifty_square_normalizes_to_ones() {
        let p = tmp("white.pgm");
        let img = RawImage::new(50, 50, vec![255; 2500]).unwrap();
        save_pgm(&img, &p).unwrap();
        let loaded = crate::augment::normalize(&load_pgm(&p).unwrap());
        assert_eq!(loaded.pixels().len(), 2500);
        assert!(loaded.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn header_without_digits_errors() {
        let p = tmp("nodigit.pgm");
        std::fs::write(&p, b"P5\nx 2\n255\n\0\0").unwrap();
        let msg = load_pgm(&p).unwrap_err().to_string();
        assert!(msg.contains("width"), "{msg}");
    }
}
