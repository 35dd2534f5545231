//! Grayscale (Pf) PFM float depth maps.
//!
//! Rows are stored bottom-up per the format; a negative scale marks
//! little-endian samples. We always write scale -1.0 and preserve +inf
//! miss sentinels, which IEEE 754 carries through the f32 narrowing.

use std::path::Path;

use crate::error::Result;

use super::{parse_error, ImageDepth, Scanner};

pub fn encode_pfm(depth: &ImageDepth) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    out.reserve(depth.data.len() * 4);
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            out.extend_from_slice(&(depth.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ImageDepth> {
    let mut s = Scanner::new(bytes, "pfm");
    let magic = s.token()?;
    if magic == "PF" {
        return Err(parse_error("pfm", "3-channel PF not supported, expected grayscale Pf"));
    }
    if magic != "Pf" {
        return Err(parse_error("pfm", format!("expected magic Pf, got {magic:?}")));
    }
    let width = s.u32_token("width")?;
    let height = s.u32_token("height")?;
    let scale_tok = s.token()?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| parse_error("pfm", format!("bad scale: {scale_tok:?}")))?;
    if scale == 0.0 {
        return Err(parse_error("pfm", "scale must be nonzero"));
    }
    s.expect_separator()?;
    let body = &bytes[s.pos()..];
    let count = (width as usize) * (height as usize);
    if body.len() < count * 4 {
        return Err(parse_error(
            "pfm",
            format!("sample data truncated: {} bytes, need {}", body.len(), count * 4),
        ));
    }
    let little_endian = scale < 0.0;
    let magnitude = scale.abs();
    let mut depth = ImageDepth::new_miss(width, height);
    for (i, raw) in body[..count * 4].chunks_exact(4).enumerate() {
        let word = [raw[0], raw[1], raw[2], raw[3]];
        let v = if little_endian {
            f32::from_le_bytes(word)
        } else {
            f32::from_be_bytes(word)
        };
        // File row 0 is the bottom image row.
        let y = height - 1 - (i as u32 / width);
        let x = i as u32 % width;
        depth.set(x, y, v as f64 * magnitude);
    }
    Ok(depth)
}

pub fn write_pfm(path: &Path, depth: &ImageDepth) -> Result<()> {
    std::fs::write(path, encode_pfm(depth))?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<ImageDepth> {
    decode_pfm(&std::fs::read(path)?)
}
