//! PLY point clouds: ascii and binary little-endian, x/y/z scalar
//! properties. Extra scalar vertex properties are skipped; elements after
//! `vertex` are ignored since only the cloud matters here.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::Result;

use super::parse_error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(parse_error("ply", format!("unsupported property type {other:?}"))),
        })
    }

    fn size(&self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(&self, bytes: &[u8]) -> f64 {
        match self {
            Scalar::I8 => bytes[0] as i8 as f64,
            Scalar::U8 => bytes[0] as f64,
            Scalar::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

/// Encode x, y, z as f32 per point.
pub fn encode_ply(points: &[Vector3<f64>], format: PlyFormat) -> Vec<u8> {
    let format_line = match format {
        PlyFormat::Ascii => "format ascii 1.0",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0",
    };
    let mut out = format!(
        "ply\n{format_line}\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    )
    .into_bytes();
    match format {
        PlyFormat::Ascii => {
            for p in points {
                out.extend_from_slice(
                    format!("{} {} {}\n", p.x as f32, p.y as f32, p.z as f32).as_bytes(),
                );
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for p in points {
                for c in [p.x, p.y, p.z] {
                    out.extend_from_slice(&(c as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

struct Header {
    format: PlyFormat,
    count: usize,
    /// (type, name) per vertex property, in declaration order.
    properties: Vec<(Scalar, String)>,
    /// Byte offset of the vertex data.
    body_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let mut format = None;
    let mut count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| parse_error("ply", "header not terminated by end_header"))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| parse_error("ply", "non-UTF8 header line"))?
            .trim_end_matches('\r')
            .trim();
        pos = end + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if line_no == 0 {
            if line != "ply" {
                return Err(parse_error("ply", format!("expected magic \"ply\", got {line:?}")));
            }
            line_no += 1;
            continue;
        }
        line_no += 1;
        match fields.first().copied() {
            Some("comment") | None => {}
            Some("format") => {
                format = Some(match fields.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(parse_error(
                            "ply",
                            format!("unsupported format {:?}", other.unwrap_or("")),
                        ))
                    }
                });
            }
            Some("element") => {
                let name = fields.get(1).copied().unwrap_or("");
                if name == "vertex" {
                    if count.is_some() {
                        return Err(parse_error("ply", "duplicate vertex element"));
                    }
                    let n = fields
                        .get(2)
                        .and_then(|t| t.parse::<usize>().ok())
                        .ok_or_else(|| parse_error("ply", "bad vertex count"))?;
                    count = Some(n);
                    in_vertex = true;
                } else if count.is_none() {
                    // Skipping a leading non-vertex element would need its
                    // data size; keep the reader honest instead.
                    return Err(parse_error(
                        "ply",
                        format!("element {name:?} precedes vertex; only vertex-first files are supported"),
                    ));
                } else {
                    in_vertex = false;
                }
            }
            Some("property") => {
                if in_vertex {
                    if fields.get(1).copied() == Some("list") {
                        return Err(parse_error("ply", "list properties on vertex are not supported"));
                    }
                    let ty = Scalar::parse(fields.get(1).copied().unwrap_or(""))?;
                    let name = fields
                        .get(2)
                        .ok_or_else(|| parse_error("ply", "property without a name"))?;
                    properties.push((ty, name.to_string()));
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(parse_error("ply", format!("unknown header keyword {other:?}")));
            }
        }
    }
    let format = format.ok_or_else(|| parse_error("ply", "missing format line"))?;
    let count = count.ok_or_else(|| parse_error("ply", "missing vertex element"))?;
    Ok(Header {
        format,
        count,
        properties,
        body_start: pos,
    })
}

/// Indices of x, y, z among the vertex properties.
fn xyz_indices(properties: &[(Scalar, String)]) -> Result<[usize; 3]> {
    let find = |name: &str| {
        properties
            .iter()
            .position(|(_, n)| n == name)
            .ok_or_else(|| parse_error("ply", format!("missing vertex property {name:?}")))
    };
    Ok([find("x")?, find("y")?, find("z")?])
}

pub fn decode_ply(bytes: &[u8]) -> Result<Vec<Vector3<f64>>> {
    let header = parse_header(bytes)?;
    let xyz = xyz_indices(&header.properties)?;
    let body = &bytes[header.body_start..];
    let mut points = Vec::with_capacity(header.count);
    match header.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body)
                .map_err(|_| parse_error("ply", "non-UTF8 ascii body"))?;
            let mut tokens = text.split_whitespace();
            for i in 0..header.count {
                let mut values = [0.0f64; 3];
                for (j, _) in header.properties.iter().enumerate() {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| parse_error("ply", format!("vertex data ends at point {i}")))?;
                    if let Some(slot) = xyz.iter().position(|&k| k == j) {
                        values[slot] = tok.parse::<f64>().map_err(|_| {
                            parse_error("ply", format!("bad coordinate token {tok:?}"))
                        })?;
                    }
                }
                points.push(check_finite(values, i)?);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = header.properties.iter().map(|(t, _)| t.size()).sum();
            if body.len() < stride * header.count {
                return Err(parse_error(
                    "ply",
                    format!(
                        "vertex data truncated: {} bytes, need {}",
                        body.len(),
                        stride * header.count
                    ),
                ));
            }
            for i in 0..header.count {
                let rec = &body[i * stride..];
                let mut values = [0.0f64; 3];
                let mut offset = 0usize;
                for (j, (ty, _)) in header.properties.iter().enumerate() {
                    if let Some(slot) = xyz.iter().position(|&k| k == j) {
                        values[slot] = ty.read_le(&rec[offset..]);
                    }
                    offset += ty.size();
                }
                points.push(check_finite(values, i)?);
            }
        }
    }
    Ok(points)
}

fn check_finite(values: [f64; 3], index: usize) -> Result<Vector3<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(parse_error(
            "ply",
            format!("non-finite coordinates at point {index}"),
        ));
    }
    Ok(Vector3::new(values[0], values[1], values[2]))
}

pub fn write_ply(path: &Path, points: &[Vector3<f64>], format: PlyFormat) -> Result<()> {
    std::fs::write(path, encode_ply(points, format))?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<Vec<Vector3<f64>>> {
    decode_ply(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use approx::assert_relative_eq;

    fn sample_points() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(1.0, -2.5, 3.25),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(-70.0, 12.5, 0.125),
        ]
    }

    #[test]
    fn ascii_round_trip() {
        let pts = sample_points();
        let back = decode_ply(&encode_ply(&pts, PlyFormat::Ascii)).unwrap();
        assert_eq!(back.len(), pts.len());
        for (a, b) in back.iter().zip(pts.iter()) {
            // Coordinates pass through f32 on disk.
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn binary_round_trip() {
        let pts = sample_points();
        let back = decode_ply(&encode_ply(&pts, PlyFormat::BinaryLittleEndian)).unwrap();
        for (a, b) in back.iter().zip(pts.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn ascii_with_extra_properties_and_comments() {
        let text = b"ply\nformat ascii 1.0\ncomment scanner output\nelement vertex 2\nproperty float intensity\nproperty double x\nproperty double y\nproperty double z\nend_header\n0.9 1 2 3\n0.1 4 5 6\n";
        let pts = decode_ply(text).unwrap();
        assert_eq!(pts[0], Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(pts[1], Vector3::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn binary_with_mixed_property_types() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty uchar flags\nproperty float x\nproperty float y\nproperty float z\nproperty ushort ring\nend_header\n".to_vec();
        bytes.push(7);
        for v in [1.5f32, -2.0, 4.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&31u16.to_le_bytes());
        let pts = decode_ply(&bytes).unwrap();
        assert_eq!(pts, vec![Vector3::new(1.5, -2.0, 4.25)]);
    }

    #[test]
    fn trailing_elements_are_ignored() {
        let text = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nelement face 5\nproperty list uchar int vertex_indices\nend_header\n1 2 3\n";
        let pts = decode_ply(text).unwrap();
        assert_eq!(pts, vec![Vector3::new(1.0, 2.0, 3.0)]);
    }

    #[test]
    fn rejects_malformed_files() {
        let cases: [&[u8]; 5] = [
            b"plx\nformat ascii 1.0\nend_header\n",
            b"ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n",
            b"ply\nformat ascii 1.0\nelement face 1\nelement vertex 0\nend_header\n",
            b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2\n",
            b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n",
        ];
        for bytes in cases {
            assert!(
                matches!(decode_ply(bytes), Err(Error::Parse { format: "ply", .. })),
                "expected parse error for {:?}",
                std::str::from_utf8(bytes)
            );
        }
    }

    #[test]
    fn binary_truncation_is_detected() {
        let mut bytes = encode_ply(&sample_points(), PlyFormat::BinaryLittleEndian);
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(
            decode_ply(&bytes),
            Err(Error::Parse { format: "ply", .. })
        ));
    }

    #[test]
    fn file_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("a.ply", PlyFormat::Ascii), ("b.ply", PlyFormat::BinaryLittleEndian)] {
            let path = dir.path().join(name);
            write_ply(&path, &sample_points(), fmt).unwrap();
            let back = read_ply(&path).unwrap();
            assert_eq!(back.len(), 3);
        }
    }
}
