//! Minimal PLY reader and writer for vertex positions.
//!
//! Reads `ascii` and `binary_little_endian` files; only the `x`, `y`, `z`
//! properties of the `vertex` element are kept.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::cloud::Coord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
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
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return Err(Error::Ply(format!("unknown scalar type {s}"))),
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
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

pub fn read_ply(path: &Path) -> Result<Vec<[f64; 3]>> {
    let f = std::fs::File::open(path)?;
    read_ply_from(BufReader::new(f))
}

pub fn read_ply_from<R: BufRead>(mut r: R) -> Result<Vec<[f64; 3]>> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Ply("unexpected end of header".into()));
        }
        Ok(line.trim().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(Error::Ply("missing ply signature".into()));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let t: Vec<&str> = l.split_whitespace().collect();
        match t.first().copied() {
            Some("format") => {
                binary = Some(match t.get(1).copied() {
                    Some("ascii") => false,
                    Some("binary_little_endian") => true,
                    other => return Err(Error::Ply(format!("unsupported format {other:?}"))),
                })
            }
            Some("element") if t.len() == 3 => elements.push(Element {
                name: t[1].to_string(),
                count: t[2].parse().map_err(|_| Error::Ply(format!("bad element count in {l:?}")))?,
                props: Vec::new(),
            }),
            Some("property") => {
                let e = elements.last_mut().ok_or_else(|| Error::Ply("property before element".into()))?;
                if t.get(1) == Some(&"list") && t.len() == 5 {
                    e.props.push(Property::List(Scalar::parse(t[2])?, Scalar::parse(t[3])?));
                } else if t.len() == 3 {
                    e.props.push(Property::Scalar(t[2].to_string(), Scalar::parse(t[1])?));
                } else {
                    return Err(Error::Ply(format!("bad property line {l:?}")));
                }
            }
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some(_) => return Err(Error::Ply(format!("unexpected header line {l:?}"))),
        }
    }
    let binary = binary.ok_or_else(|| Error::Ply("missing format line".into()))?;
    let mut out = Vec::new();
    if binary {
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + n).ok_or_else(|| Error::Ply("truncated binary body".into()))?;
            pos += n;
            Ok(s)
        };
        for e in &elements {
            for _ in 0..e.count {
                let mut xyz = [None; 3];
                for p in &e.props {
                    match p {
                        Property::Scalar(name, s) => {
                            let v = s.read_le(take(s.size())?);
                            if let Some(a) = axis(name) {
                                xyz[a] = Some(v);
                            }
                        }
                        Property::List(cs, vs) => {
                            let n = cs.read_le(take(cs.size())?) as usize;
                            take(n * vs.size())?;
                        }
                    }
                }
                if e.name == "vertex" {
                    out.push(vertex(xyz)?);
                }
            }
        }
    } else {
        let mut body = String::new();
        r.read_to_string(&mut body)?;
        let mut tokens = body.split_whitespace();
        let mut num = || -> Result<f64> {
            let t = tokens.next().ok_or_else(|| Error::Ply("truncated ascii body".into()))?;
            t.parse().map_err(|_| Error::Ply(format!("bad number {t:?}")))
        };
        for e in &elements {
            for _ in 0..e.count {
                let mut xyz = [None; 3];
                for p in &e.props {
                    match p {
                        Property::Scalar(name, _) => {
                            let v = num()?;
                            if let Some(a) = axis(name) {
                                xyz[a] = Some(v);
                            }
                        }
                        Property::List(..) => {
                            let n = num()? as usize;
                            for _ in 0..n {
                                num()?;
                            }
                        }
                    }
                }
                if e.name == "vertex" {
                    out.push(vertex(xyz)?);
                }
            }
        }
    }
    Ok(out)
}

fn axis(name: &str) -> Option<usize> {
    match name {
        "x" => Some(0),
        "y" => Some(1),
        "z" => Some(2),
        _ => None,
    }
}

fn vertex(xyz: [Option<f64>; 3]) -> Result<[f64; 3]> {
    match xyz {
        [Some(x), Some(y), Some(z)] => Ok([x, y, z]),
        _ => Err(Error::Ply("vertex without x, y and z".into())),
    }
}

/// Write integer coordinates as `int` x, y, z.
pub fn write_ply(path: &Path, coords: &[Coord], binary: bool) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ply_to(&mut w, coords, binary)?;
    w.flush()?;
    Ok(())
}

pub fn write_ply_to<W: Write>(w: &mut W, coords: &[Coord], binary: bool) -> Result<()> {
    let format = if binary { "binary_little_endian" } else { "ascii" };
    write!(
        w,
        "ply\nformat {format} 1.0\nelement vertex {}\nproperty int x\nproperty int y\nproperty int z\nend_header\n",
        coords.len()
    )?;
    for c in coords {
        if binary {
            for v in c {
                w.write_all(&(*v as i32).to_le_bytes())?;
            }
        } else {
            writeln!(w, "{} {} {}", c[0], c[1], c[2])?;
        }
    }
    Ok(())
}
