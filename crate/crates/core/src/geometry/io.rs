//! Point-cloud and mesh file formats: binary little-endian PLY, JSON
//! array-of-triples, and Wavefront OBJ export.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{PointCloud, TriangleMesh, Vec3};
use crate::error::{Error, Result};

fn parse_err(path: &Path, location: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location: location.to_string(),
        message: message.into(),
    }
}

pub fn write_ply<W: Write>(mut w: W, cloud: &PointCloud) -> std::io::Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    )?;
    let mut buf = Vec::with_capacity(cloud.len() * 24);
    for p in cloud.points() {
        for c in p {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn save_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_ply(std::io::BufWriter::new(file), cloud)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            "uchar" | "uint8" => Scalar::U8,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::U8 => 1,
            Scalar::F32 | Scalar::I32 | Scalar::U32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
            Scalar::U8 => b[0] as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
        }
    }
}

/// Reads the vertex positions of a binary little-endian PLY file. Extra
/// scalar vertex properties are skipped; other elements must come after
/// the vertices.
pub fn read_ply<R: Read>(reader: R, path: &Path) -> Result<PointCloud> {
    let mut r = BufReader::new(reader);
    let mut line = String::new();
    let read_line = |r: &mut BufReader<R>, line: &mut String| -> Result<()> {
        line.clear();
        let n = r
            .read_line(line)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if n == 0 {
            return Err(parse_err(path, "header", "unexpected end of header"));
        }
        Ok(())
    };
    read_line(&mut r, &mut line)?;
    if line.trim() != "ply" {
        return Err(parse_err(path, "header", "missing `ply` magic"));
    }
    let mut count = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        read_line(&mut r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(parse_err(path, "header", format!("unsupported format {fmt}")));
                }
            }
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(
                        n.parse::<usize>()
                            .map_err(|_| parse_err(path, "header", "bad vertex count"))?,
                    );
                }
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty)
                    .ok_or_else(|| parse_err(path, "header", format!("unsupported type {ty}")))?;
                props.push((name.to_string(), s));
            }
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(path, "header", "list properties on vertices"));
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| parse_err(path, "header", "no vertex element"))?;
    let find = |axis: &str| -> Result<(usize, Scalar)> {
        let mut off = 0;
        for (name, s) in &props {
            if name == axis {
                return Ok((off, *s));
            }
            off += s.size();
        }
        Err(parse_err(path, "header", format!("missing property {axis}")))
    };
    let axes = [find("x")?, find("y")?, find("z")?];
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    let mut data = vec![0u8; stride * count];
    r.read_exact(&mut data)
        .map_err(|_| parse_err(path, "body", "truncated vertex data"))?;
    let points: Vec<Vec3> = data
        .chunks_exact(stride)
        .map(|rec| axes.map(|(off, s)| s.read(&rec[off..])))
        .collect();
    PointCloud::new(points)
}

pub fn load_ply(path: &Path) -> Result<PointCloud> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_ply(file, path)
}

pub fn cloud_to_json(cloud: &PointCloud) -> String {
    serde_json::to_string(cloud.points()).expect("points serialize")
}

pub fn cloud_from_json(text: &str, path: &Path) -> Result<PointCloud> {
    let pts: Vec<Vec3> =
        serde_json::from_str(text).map_err(|e| parse_err(path, "$", e.to_string()))?;
    PointCloud::new(pts)
}

/// Loads a point cloud, picking the format from the file extension
/// (`.ply` or `.json`).
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let text =
                fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            cloud_from_json(&text, path)
        }
        _ => load_ply(path),
    }
}

pub fn write_obj<W: Write>(mut w: W, mesh: &TriangleMesh) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

pub fn save_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_obj(std::io::BufWriter::new(file), mesh)
        .map_err(|e| Error::io(path.display().to_string(), e))
}
