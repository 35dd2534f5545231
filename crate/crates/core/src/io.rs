//! Images and point clouds on disk: P6 PPM for color, grayscale PFM for
//! float depth, PLY (ascii or binary little-endian) for LiDAR clouds.
//!
//! Each format has an in-memory encode/decode pair plus thin file wrappers,
//! so tests can assert exact bytes and container formats can embed segments.

mod pfm;
mod ply;
mod ppm;

pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use ply::{decode_ply, encode_ply, read_ply, write_ply, PlyFormat};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};

use crate::error::{Error, Result};

/// Row-major RGB image with channels in [0, 1]. Pixel (0, 0) is top-left;
/// x indexes columns, y indexes rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

impl ImageRgb {
    pub fn filled(width: u32, height: u32, color: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![color; (width * height) as usize],
        }
    }

    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y * self.width + x) as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[self.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, color: [f64; 3]) {
        let i = self.index(x, y);
        self.data[i] = color;
    }
}

/// Row-major depth map in meters; misses are `f64::INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDepth {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl ImageDepth {
    pub fn filled(width: u32, height: u32, depth: f64) -> Self {
        Self {
            width,
            height,
            data: vec![depth; (width * height) as usize],
        }
    }

    pub fn new_miss(width: u32, height: u32) -> Self {
        Self::filled(width, height, f64::INFINITY)
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y * self.width + x) as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[self.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, depth: f64) {
        let i = self.index(x, y);
        self.data[i] = depth;
    }

    /// Whether the pixel carries a real surface depth (finite).
    #[inline]
    pub fn is_hit(&self, x: u32, y: u32) -> bool {
        self.get(x, y).is_finite()
    }
}

pub(crate) fn parse_error(format: &'static str, detail: impl Into<String>) -> Error {
    Error::Parse {
        format,
        detail: detail.into(),
    }
}

/// Whitespace/comment-aware scanner over a header byte region.
pub(crate) struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Scanner<'a> {
    pub fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            format,
        }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

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

    /// Next whitespace-delimited token, skipping `#` comments.
    pub fn token(&mut self) -> Result<&'a str> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(parse_error(self.format, "unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| parse_error(self.format, "non-UTF8 header token"))
    }

    pub fn u32_token(&mut self, what: &str) -> Result<u32> {
        let tok = self.token()?;
        tok.parse::<u32>()
            .map_err(|_| parse_error(self.format, format!("bad {what}: {tok:?}")))
    }

    /// Consume the single separator byte that ends the header.
    pub fn expect_separator(&mut self) -> Result<()> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(parse_error(self.format, "missing separator after header"));
        }
        self.pos += 1;
        Ok(())
    }
}
