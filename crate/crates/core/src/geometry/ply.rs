//! Minimal PLY support: reads `x`/`y`/`z` of the `vertex` element from ASCII
//! or binary little-endian files; writes ASCII.

use std::io::{BufRead, BufReader, Read, Write};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
            other => return Err(Error::ParseError(format!("unknown PLY type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes(b[..4].try_into().unwrap())),
            Scalar::U32 => f64::from(u32::from_le_bytes(b[..4].try_into().unwrap())),
            Scalar::F32 => f64::from(f32::from_le_bytes(b[..4].try_into().unwrap())),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::ParseError(msg.into())
}

/// Reads vertex positions from a PLY stream.
pub fn read_points<R: Read>(reader: R) -> Result<Vec<[f64; 3]>> {
    let mut reader = BufReader::new(reader);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(parse_err("missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(parse_err("unterminated PLY header"));
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                format = Some(match tok.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    other => return Err(parse_err(format!("unsupported PLY format {other:?}"))),
                });
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| parse_err("element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err("element without count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let elem = elements.last_mut().ok_or_else(|| parse_err("property before element"))?;
                let first = tok.next().ok_or_else(|| parse_err("empty property"))?;
                let prop = if first == "list" {
                    let count = Scalar::parse(tok.next().unwrap_or(""))?;
                    let item = Scalar::parse(tok.next().unwrap_or(""))?;
                    Property::List { count, item }
                } else {
                    let name = tok.next().ok_or_else(|| parse_err("property without name"))?;
                    Property::Scalar {
                        name: name.to_string(),
                        ty: Scalar::parse(first)?,
                    }
                };
                elem.props.push(prop);
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let format = format.ok_or_else(|| parse_err("missing format line"))?;
    let mut points = Vec::new();
    let mut body = String::new();
    let mut ascii_lines = if format == Format::Ascii {
        reader.read_to_string(&mut body)?;
        Some(body.lines().filter(|l| !l.trim().is_empty()))
    } else {
        None
    };
    for elem in &elements {
        let is_vertex = elem.name == "vertex";
        let axis_of = |name: &str| match name {
            "x" => Some(0),
            "y" => Some(1),
            "z" => Some(2),
            _ => None,
        };
        if is_vertex {
            let found: Vec<_> = elem
                .props
                .iter()
                .filter_map(|p| match p {
                    Property::Scalar { name, .. } => axis_of(name),
                    _ => None,
                })
                .collect();
            if found.len() != 3 {
                return Err(parse_err("vertex element lacks x/y/z"));
            }
        }
        for _ in 0..elem.count {
            let mut xyz = [0.0; 3];
            match ascii_lines.as_mut() {
                Some(lines) => {
                    let row = lines.next().ok_or_else(|| parse_err("truncated ASCII body"))?;
                    if !is_vertex {
                        continue;
                    }
                    let mut vals = row.split_whitespace();
                    for p in &elem.props {
                        match p {
                            Property::Scalar { name, .. } => {
                                let v: f64 = vals
                                    .next()
                                    .and_then(|s| s.parse().ok())
                                    .ok_or_else(|| parse_err("bad ASCII value"))?;
                                if let Some(a) = axis_of(name) {
                                    xyz[a] = v;
                                }
                            }
                            Property::List { .. } => {
                                let n: usize = vals
                                    .next()
                                    .and_then(|s| s.parse().ok())
                                    .ok_or_else(|| parse_err("bad list count"))?;
                                for _ in 0..n {
                                    vals.next();
                                }
                            }
                        }
                    }
                }
                None => {
                    let mut buf = [0u8; 8];
                    for p in &elem.props {
                        match p {
                            Property::Scalar { name, ty } => {
                                reader
                                    .read_exact(&mut buf[..ty.size()])
                                    .map_err(|_| parse_err("truncated binary body"))?;
                                if let Some(a) = axis_of(name) {
                                    xyz[a] = ty.read_le(&buf);
                                }
                            }
                            Property::List { count, item } => {
                                reader
                                    .read_exact(&mut buf[..count.size()])
                                    .map_err(|_| parse_err("truncated binary body"))?;
                                let n = count.read_le(&buf) as usize;
                                let mut skip = vec![0u8; n * item.size()];
                                reader.read_exact(&mut skip).map_err(|_| parse_err("truncated binary body"))?;
                            }
                        }
                    }
                }
            }
            if is_vertex {
                points.push(xyz);
            }
        }
    }
    Ok(points)
}

/// Writes an ASCII PLY with float `x y z` vertices.
pub fn write_points<W: Write>(mut w: W, points: &[[f64; 3]]) -> Result<()> {
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z\nend_header")?;
    for p in points {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    Ok(())
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<[f64; 3]>> {
    read_points(std::fs::File::open(path)?)
}

pub fn write_file(path: &std::path::Path, points: &[[f64; 3]]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_points(f, points)
}

/// Voxel coordinates as PLY floats.
pub fn voxels_to_f64(points: &[super::Coord]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_roundtrip() {
        let pts = vec![[1.0, 2.0, 3.0], [0.5, -1.0, 7.25]];
        let mut buf = Vec::new();
        write_points(&mut buf, &pts).unwrap();
        assert_eq!(read_points(&buf[..]).unwrap(), pts);
    }

    #[test]
    fn ascii_with_extra_props_and_faces() {
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty uchar red\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n1 255 2 3\n4 0 5 6\n3 0 1 1\n";
        assert_eq!(read_points(text.as_bytes()).unwrap(), vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn binary_little_endian() {
        let mut buf = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty double x\nproperty float y\nproperty int z\nproperty list uchar int idx\nend_header\n".to_vec();
        for (x, y, z) in [(1.5f64, 2.0f32, 3i32), (-4.0, 0.25, 9)] {
            buf.extend_from_slice(&x.to_le_bytes());
            buf.extend_from_slice(&y.to_le_bytes());
            buf.extend_from_slice(&z.to_le_bytes());
            buf.push(1);
            buf.extend_from_slice(&7i32.to_le_bytes());
        }
        assert_eq!(read_points(&buf[..]).unwrap(), vec![[1.5, 2.0, 3.0], [-4.0, 0.25, 9.0]]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_points(&b"plx\n"[..]).is_err());
        assert!(read_points(&b"ply\nformat binary_big_endian 1.0\nend_header\n"[..]).is_err());
        assert!(read_points(
            &b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n"[..]
        )
        .is_err());
    }
}
