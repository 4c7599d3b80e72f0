//! Binary little-endian PLY point clouds.
//!
//! Only the `vertex` element is read. Its `x`, `y`, `z` properties may be
//! stored as any scalar type; every other property is skipped.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
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

    fn read(self, b: &[u8]) -> f64 {
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

struct Element {
    name: String,
    count: usize,
    /// (property name, scalar type); `None` marks a list property.
    properties: Vec<(String, Option<Scalar>)>,
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn parse_ply(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    const END: &[u8] = b"end_header\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or("missing end_header")?
        + END.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| "header is not utf-8")?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing ply magic".into());
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", other, ..] => return Err(format!("unsupported format {other}")),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| format!("bad element count {count}"))?,
                properties: Vec::new(),
            }),
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or("property before element")?;
                let name = tok.last().unwrap().to_string();
                el.properties.push((name, None));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or("property before element")?;
                let scalar = Scalar::parse(ty).ok_or_else(|| format!("unknown type {ty}"))?;
                el.properties.push((name.to_string(), Some(scalar)));
            }
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            _ => return Err(format!("unrecognized header line '{line}'")),
        }
    }
    if !format_ok {
        return Err("missing format line".into());
    }
    let mut offset = header_end;
    for el in &elements {
        let stride: usize = el
            .properties
            .iter()
            .map(|(name, ty)| {
                ty.map(Scalar::size)
                    .ok_or_else(|| format!("list property '{name}' in element '{}' not supported", el.name))
            })
            .sum::<std::result::Result<usize, String>>()?;
        if el.name != "vertex" {
            offset += stride * el.count;
            continue;
        }
        let mut cols = [None; 3];
        let mut at = 0;
        for (name, ty) in &el.properties {
            let ty = ty.unwrap();
            match name.as_str() {
                "x" => cols[0] = Some((at, ty)),
                "y" => cols[1] = Some((at, ty)),
                "z" => cols[2] = Some((at, ty)),
                _ => {}
            }
            at += ty.size();
        }
        let [Some(cx), Some(cy), Some(cz)] = cols else {
            return Err("vertex element lacks x, y or z".into());
        };
        let needed = offset + stride * el.count;
        if bytes.len() < needed {
            return Err(format!("truncated body: {} bytes, need {needed}", bytes.len()));
        }
        let mut points = Vec::with_capacity(el.count);
        for i in 0..el.count {
            let row = &bytes[offset + i * stride..offset + (i + 1) * stride];
            points.push(Vector3::new(
                cx.1.read(&row[cx.0..]),
                cy.1.read(&row[cy.0..]),
                cz.1.read(&row[cz.0..]),
            ));
        }
        return PointCloud::new(points).map_err(|e| e.to_string());
    }
    Err("no vertex element".into())
}

pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )
    .into_bytes();
    out.reserve(cloud.len() * 12);
    for p in cloud.points() {
        for v in p.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_ply(cloud)).map_err(|e| Error::io(path, e))
}
