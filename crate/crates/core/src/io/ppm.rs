//! Binary (P6) PPM color images, maxval 255.

use std::path::Path;

use crate::error::Result;

use super::{parse_error, ImageRgb, Scanner};

/// Encode as P6 with maxval 255; channels are clamped to [0, 1] and rounded.
pub fn encode_ppm(image: &ImageRgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(image.data.len() * 3);
    for px in &image.data {
        for c in px {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Decode P6; any maxval in 1..=255 is accepted and normalized to [0, 1].
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRgb> {
    let mut s = Scanner::new(bytes, "ppm");
    let magic = s.token()?;
    if magic != "P6" {
        return Err(parse_error("ppm", format!("expected magic P6, got {magic:?}")));
    }
    let width = s.u32_token("width")?;
    let height = s.u32_token("height")?;
    let maxval = s.u32_token("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(parse_error("ppm", format!("unsupported maxval {maxval}")));
    }
    s.expect_separator()?;
    let body = &bytes[s.pos()..];
    let expected = (width as usize) * (height as usize) * 3;
    if body.len() < expected {
        return Err(parse_error(
            "ppm",
            format!("pixel data truncated: {} bytes, need {expected}", body.len()),
        ));
    }
    let maxval = maxval as f64;
    let data = body[..expected]
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / maxval, c[1] as f64 / maxval, c[2] as f64 / maxval])
        .collect();
    Ok(ImageRgb {
        width,
        height,
        data,
    })
}

pub fn write_ppm(path: &Path, image: &ImageRgb) -> Result<()> {
    std::fs::write(path, encode_ppm(image))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageRgb> {
    decode_ppm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn encode_writes_exact_bytes() {
        let mut img = ImageRgb::new(2, 1);
        img.set(0, 0, [0.0, 0.5, 1.0]);
        img.set(1, 0, [1.0, 0.0, 0.0]);
        let bytes = encode_ppm(&img);
        // 0.5 * 255 = 127.5 rounds to 128.
        assert_eq!(bytes, b"P6\n2 1\n255\n\x00\x80\xff\xff\x00\x00");
    }

    #[test]
    fn out_of_range_channels_clamp() {
        let mut img = ImageRgb::new(1, 1);
        img.set(0, 0, [-0.5, 2.0, 0.25]);
        let bytes = encode_ppm(&img);
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 255, 64]);
    }

    #[test]
    fn round_trip_on_the_8bit_grid() {
        let mut img = ImageRgb::new(3, 2);
        for (i, px) in img.data.iter_mut().enumerate() {
            // Values exactly representable as k/255 survive the trip.
            *px = [
                (i as f64 * 41.0) % 256.0 / 255.0,
                (i as f64 * 13.0) % 256.0 / 255.0,
                (255 - i) as f64 / 255.0,
            ];
        }
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn decode_handles_comments_and_low_maxval() {
        let bytes = b"P6\n# made by hand\n1 1\n100\n\x64\x00\x32";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.get(0, 0), [1.0, 0.0, 0.5]);
    }

    #[test]
    fn decode_rejects_bad_magic_and_truncation() {
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n255\n\x00"),
            Err(Error::Parse { format: "ppm", .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n2 2\n255\n\x00\x01"),
            Err(Error::Parse { format: "ppm", .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = ImageRgb::filled(4, 3, [1.0, 0.0, 1.0]);
        write_ppm(&path, &img).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), img);
    }

    proptest::proptest! {
        // Encode/decode is a projection onto the 8-bit lattice: a second
        // pass changes nothing, and every decoded channel lands in [0, 1]
        // even when the input did not.
        #[test]
        fn quantization_is_idempotent(
            w in 1u32..=5,
            h in 1u32..=5,
            raw in proptest::collection::vec(-0.5f64..1.5, 75),
        ) {
            let mut img = ImageRgb::new(w, h);
            for (i, px) in img.data.iter_mut().enumerate() {
                *px = [raw[3 * i], raw[3 * i + 1], raw[3 * i + 2]];
            }
            let once = decode_ppm(&encode_ppm(&img)).unwrap();
            let twice = decode_ppm(&encode_ppm(&once)).unwrap();
            proptest::prop_assert_eq!(&twice, &once);
            proptest::prop_assert!(
                once.data.iter().flatten().all(|v| (0.0..=1.0).contains(v))
            );
        }
    }
}
