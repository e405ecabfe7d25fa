//! PLY import/export.
//!
//! Gaussian clouds are written in the common 3DGS vertex layout as
//! little-endian `float` properties: `x y z f_dc_0..2 opacity scale_0..2
//! rot_0..3`, with opacity as a logit, scales as logs and `f_dc` as the
//! degree-0 spherical-harmonic coefficient. The reader accepts any property
//! order, extra properties, ASCII or binary encodings, and plain point clouds.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use super::{GaussianCloud, SceneError};

/// Degree-0 spherical harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const GAUSSIAN_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
    BinaryBe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], big_endian: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                if big_endian {
                    <$t>::from_be_bytes(a) as f64
                } else {
                    <$t>::from_le_bytes(a) as f64
                }
            }};
        }
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => num!(i16, 2),
            Self::U16 => num!(u16, 2),
            Self::I32 => num!(i32, 4),
            Self::U32 => num!(u32, 4),
            Self::F32 => num!(f32, 4),
            Self::F64 => num!(f64, 8),
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    /// `None` marks a list property, which is skipped.
    properties: Vec<(String, Option<ScalarType>, Option<(ScalarType, ScalarType)>)>,
}

/// The vertex element of a PLY file as named float columns.
#[derive(Debug, Clone, Default)]
pub struct VertexTable {
    pub count: usize,
    pub columns: HashMap<String, Vec<f64>>,
}

impl VertexTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(|v| v.as_slice())
    }

    fn require(&self, name: &str) -> Result<&[f64], SceneError> {
        self.column(name)
            .ok_or_else(|| SceneError::Ply(format!("missing vertex property `{name}`")))
    }
}

fn ply_err(msg: impl Into<String>) -> SceneError {
    SceneError::Ply(msg.into())
}

/// Parses the vertex element of a PLY stream.
pub fn read_vertices(reader: impl Read) -> Result<VertexTable, SceneError> {
    let mut reader = BufReader::new(reader);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(ply_err("missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(ply_err("unexpected end of header"));
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("format") => {
                format = Some(match tokens.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    Some("binary_big_endian") => Format::BinaryBe,
                    other => return Err(ply_err(format!("unsupported format {other:?}"))),
                });
            }
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| ply_err("element without name"))?;
                let count = tokens
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| ply_err("element without count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| ply_err("property before element"))?;
                let first = tokens.next().ok_or_else(|| ply_err("empty property"))?;
                if first == "list" {
                    let count_ty = tokens.next().and_then(ScalarType::parse);
                    let item_ty = tokens.next().and_then(ScalarType::parse);
                    let name = tokens.next().ok_or_else(|| ply_err("list without name"))?;
                    match (count_ty, item_ty) {
                        (Some(c), Some(i)) => {
                            element
                                .properties
                                .push((name.to_string(), None, Some((c, i))))
                        }
                        _ => return Err(ply_err("bad list property types")),
                    }
                } else {
                    let ty = ScalarType::parse(first)
                        .ok_or_else(|| ply_err(format!("unknown property type `{first}`")))?;
                    let name = tokens
                        .next()
                        .ok_or_else(|| ply_err("property without name"))?;
                    element.properties.push((name.to_string(), Some(ty), None));
                }
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let format = format.ok_or_else(|| ply_err("missing format line"))?;
    let mut table = VertexTable::default();
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    let mut cursor = 0usize;
    let mut ascii_tokens = if format == Format::Ascii {
        Some(
            std::str::from_utf8(&body)
                .map_err(|_| ply_err("ascii body is not UTF-8"))?
                .split_whitespace(),
        )
    } else {
        None
    };

    for element in &elements {
        let is_vertex = element.name == "vertex";
        let mut columns: Vec<Vec<f64>> = if is_vertex {
            element
                .properties
                .iter()
                .map(|_| Vec::with_capacity(element.count))
                .collect()
        } else {
            Vec::new()
        };
        for _ in 0..element.count {
            for (pi, (_, scalar, list)) in element.properties.iter().enumerate() {
                match (scalar, list, ascii_tokens.as_mut()) {
                    (Some(_), _, Some(tokens)) => {
                        let v: f64 = tokens
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| ply_err("truncated ascii body"))?;
                        if is_vertex {
                            columns[pi].push(v);
                        }
                    }
                    (None, Some(_), Some(tokens)) => {
                        let n: usize = tokens
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| ply_err("truncated ascii list"))?;
                        for _ in 0..n {
                            tokens
                                .next()
                                .ok_or_else(|| ply_err("truncated ascii list"))?;
                        }
                    }
                    (Some(ty), _, None) => {
                        let end = cursor + ty.size();
                        let bytes = body
                            .get(cursor..end)
                            .ok_or_else(|| ply_err("truncated binary body"))?;
                        if is_vertex {
                            columns[pi].push(ty.decode(bytes, format == Format::BinaryBe));
                        }
                        cursor = end;
                    }
                    (None, Some((count_ty, item_ty)), None) => {
                        let bytes = body
                            .get(cursor..cursor + count_ty.size())
                            .ok_or_else(|| ply_err("truncated binary list"))?;
                        let n = count_ty.decode(bytes, format == Format::BinaryBe) as usize;
                        cursor += count_ty.size() + n * item_ty.size();
                        if cursor > body.len() {
                            return Err(ply_err("truncated binary list"));
                        }
                    }
                    (None, None, _) => unreachable!(),
                }
            }
        }
        if is_vertex {
            table.count = element.count;
            for ((name, _, _), col) in element.properties.iter().zip(columns) {
                if !col.is_empty() || element.count == 0 {
                    table.columns.insert(name.clone(), col);
                }
            }
        }
    }
    if !elements.iter().any(|e| e.name == "vertex") {
        return Err(ply_err("no vertex element"));
    }
    Ok(table)
}

/// Plain point data read from a PLY: positions and optional colors in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyPoints {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Option<Vec<Vector3<f64>>>,
}

pub fn read_points(path: impl AsRef<Path>) -> Result<PlyPoints, SceneError> {
    let table = read_vertices(fs::File::open(path)?)?;
    points_from_table(&table)
}

pub fn points_from_table(table: &VertexTable) -> Result<PlyPoints, SceneError> {
    let (x, y, z) = (
        table.require("x")?,
        table.require("y")?,
        table.require("z")?,
    );
    let positions = (0..table.count)
        .map(|i| Vector3::new(x[i], y[i], z[i]))
        .collect();
    let colors = match (
        table.column("red"),
        table.column("green"),
        table.column("blue"),
    ) {
        (Some(r), Some(g), Some(b)) => {
            let max = r.iter().chain(g).chain(b).fold(0.0f64, |m, v| m.max(*v));
            // Integer-typed colors arrive in 0..=255.
            let div = if max > 1.0 { 255.0 } else { 1.0 };
            Some(
                (0..table.count)
                    .map(|i| Vector3::new(r[i], g[i], b[i]) / div)
                    .collect(),
            )
        }
        _ => match (
            table.column("f_dc_0"),
            table.column("f_dc_1"),
            table.column("f_dc_2"),
        ) {
            (Some(r), Some(g), Some(b)) => Some(
                (0..table.count)
                    .map(|i| Vector3::new(r[i], g[i], b[i]).map(|v| 0.5 + SH_C0 * v))
                    .collect(),
            ),
            _ => None,
        },
    };
    Ok(PlyPoints { positions, colors })
}

/// Returns true if the table carries the full Gaussian property set.
pub fn is_gaussian_table(table: &VertexTable) -> bool {
    GAUSSIAN_PROPERTIES
        .iter()
        .all(|p| table.column(p).is_some())
}

pub fn cloud_from_table(table: &VertexTable) -> Result<GaussianCloud, SceneError> {
    let col = |name| table.require(name);
    let cols: Vec<&[f64]> = GAUSSIAN_PROPERTIES
        .iter()
        .map(|n| col(n))
        .collect::<Result<_, _>>()?;
    let mut cloud = GaussianCloud::with_capacity(table.count);
    for i in 0..table.count {
        let v: Vec<f64> = cols.iter().map(|c| c[i]).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ply_err(format!("non-finite value in vertex {i}")));
        }
        cloud.push_raw(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[7], v[8], v[9]),
            Vector4::new(v[10], v[11], v[12], v[13]),
            Vector3::new(v[3], v[4], v[5]).map(|f| 0.5 + SH_C0 * f),
            v[6],
        );
    }
    Ok(cloud)
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<GaussianCloud, SceneError> {
    let table = read_vertices(fs::File::open(path)?)?;
    cloud_from_table(&table)
}

/// Serializes a cloud as binary little-endian PLY bytes.
pub fn encode_cloud(cloud: &GaussianCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(256 + cloud.len() * 14 * 4);
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", cloud.len()).as_bytes());
    for p in GAUSSIAN_PROPERTIES {
        out.extend_from_slice(format!("property float {p}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for i in 0..cloud.len() {
        let p = cloud.positions()[i];
        let c = cloud.colors()[i].map(|c| (c - 0.5) / SH_C0);
        let s = cloud.log_scales()[i];
        let q = cloud.raw_rotations()[i];
        let values = [
            p.x,
            p.y,
            p.z,
            c.x,
            c.y,
            c.z,
            cloud.opacity_logits()[i],
            s.x,
            s.y,
            s.z,
            q[0],
            q[1],
            q[2],
            q[3],
        ];
        for v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &GaussianCloud) -> Result<(), SceneError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_cloud(cloud))?;
    Ok(())
}

/// Writes positions (and optional colors) as a binary point-cloud PLY.
pub fn write_points(
    path: impl AsRef<Path>,
    positions: &[Vector3<f64>],
    colors: Option<&[Vector3<f64>]>,
) -> Result<(), SceneError> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", positions.len()).as_bytes());
    out.extend_from_slice(b"property float x\nproperty float y\nproperty float z\n");
    if colors.is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.extend_from_slice(b"end_header\n");
    for (i, p) in positions.iter().enumerate() {
        for v in p.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(colors) = colors {
            for v in colors[i].iter() {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}
