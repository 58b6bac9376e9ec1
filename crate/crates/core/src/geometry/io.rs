//! OFF / OBJ (ASCII) / PLY (ASCII and binary little-endian) readers and writers.
//!
//! Vertex order is preserved exactly as stored in the file; all
//! correspondence indices elsewhere are file-order indices.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::mesh::{PointCloud, TriMesh};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Mesh,
    PointCloud,
}

#[derive(Debug, Clone)]
pub enum Shape {
    Mesh(TriMesh),
    Cloud(PointCloud),
}

impl Shape {
    pub fn points(&self) -> &[Vector3<f64>] {
        match self {
            Shape::Mesh(m) => &m.vertices,
            Shape::Cloud(c) => &c.points,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Shape::Mesh(m) => &m.name,
            Shape::Cloud(c) => &c.name,
        }
    }

    pub fn as_mesh(&self) -> Result<&TriMesh> {
        match self {
            Shape::Mesh(m) => Ok(m),
            Shape::Cloud(_) => Err(Error::Argument("expected a mesh, got a point cloud".into())),
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "shape".into())
}

/// Loads a shape from OFF, OBJ, or PLY, dispatching on file extension.
pub fn load_shape(path: &Path, kind: ShapeKind) -> Result<Shape> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    let (vertices, faces) = match ext.as_str() {
        "off" => read_off(path)?,
        "obj" => read_obj(path)?,
        "ply" => read_ply(path)?,
        other => {
            return Err(Error::Argument(format!(
                "unsupported shape format '.{other}' for {}",
                path.display()
            )))
        }
    };
    let name = stem(path);
    match kind {
        ShapeKind::Mesh => Ok(Shape::Mesh(TriMesh::new(vertices, faces, name)?)),
        ShapeKind::PointCloud => Ok(Shape::Cloud(PointCloud::new(vertices, name)?)),
    }
}

pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    match load_shape(path, ShapeKind::Mesh)? {
        Shape::Mesh(m) => Ok(m),
        Shape::Cloud(_) => unreachable!(),
    }
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match load_shape(path, ShapeKind::PointCloud)? {
        Shape::Cloud(c) => Ok(c),
        Shape::Mesh(_) => unreachable!(),
    }
}

type RawShape = (Vec<Vector3<f64>>, Vec<[u32; 3]>);

fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64> {
    tok.parse()
        .map_err(|_| Error::parse(path, line, format!("expected a number, got '{tok}'")))
}

fn parse_usize(path: &Path, line: usize, tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::parse(path, line, format!("expected an integer, got '{tok}'")))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        out.push((i + 1, line));
    }
    Ok(out)
}

fn read_off(path: &Path) -> Result<RawShape> {
    let lines = read_lines(path)?;
    let mut it = lines
        .iter()
        .map(|(n, l)| (*n, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = it
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty OFF file"))?;
    // Counts may share the OFF line or follow on the next one.
    let counts_line = if header == "OFF" {
        it.next()
            .ok_or_else(|| Error::parse(path, hline, "missing OFF counts line"))?
    } else if let Some(rest) = header.strip_prefix("OFF") {
        (hline, rest.trim())
    } else {
        return Err(Error::parse(path, hline, "missing OFF magic"));
    };
    let toks: Vec<&str> = counts_line.1.split_whitespace().collect();
    if toks.len() < 2 {
        return Err(Error::parse(path, counts_line.0, "malformed OFF counts line"));
    }
    let nv = parse_usize(path, counts_line.0, toks[0])?;
    let nf = parse_usize(path, counts_line.0, toks[1])?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = it.next().ok_or_else(|| {
            Error::parse(
                path,
                lines.last().map(|(n, _)| *n).unwrap_or(0),
                format!("expected {nv} vertex records, file ended after {}", vertices.len()),
            )
        })?;
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() < 3 {
            return Err(Error::parse(path, ln, "vertex record needs 3 coordinates"));
        }
        vertices.push(Vector3::new(
            parse_f64(path, ln, t[0])?,
            parse_f64(path, ln, t[1])?,
            parse_f64(path, ln, t[2])?,
        ));
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = it.next().ok_or_else(|| {
            Error::parse(
                path,
                lines.last().map(|(n, _)| *n).unwrap_or(0),
                format!("expected {nf} face records, file ended after {}", faces.len()),
            )
        })?;
        let t: Vec<&str> = l.split_whitespace().collect();
        let cnt = parse_usize(path, ln, t[0])?;
        if cnt != 3 {
            return Err(Error::parse(path, ln, format!("non-triangle face with {cnt} vertices")));
        }
        if t.len() < 4 {
            return Err(Error::parse(path, ln, "truncated face record"));
        }
        faces.push(read_face_indices(path, ln, &t[1..4], vertices.len())?);
    }
    Ok((vertices, faces))
}

fn read_face_indices(path: &Path, line: usize, toks: &[&str], nv: usize) -> Result<[u32; 3]> {
    let mut f = [0u32; 3];
    for (k, tok) in toks.iter().enumerate() {
        let idx = parse_usize(path, line, tok)?;
        if idx >= nv {
            return Err(Error::parse(
                path,
                line,
                format!("face index {idx} out of range (vertex count {nv})"),
            ));
        }
        f[k] = idx as u32;
    }
    Ok(f)
}

fn read_obj(path: &Path) -> Result<RawShape> {
    let lines = read_lines(path)?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in &lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut t = line.split_whitespace();
        match t.next() {
            Some("v") => {
                let c: Vec<&str> = t.collect();
                if c.len() < 3 {
                    return Err(Error::parse(path, *ln, "vertex record needs 3 coordinates"));
                }
                vertices.push(Vector3::new(
                    parse_f64(path, *ln, c[0])?,
                    parse_f64(path, *ln, c[1])?,
                    parse_f64(path, *ln, c[2])?,
                ));
            }
            Some("f") => {
                let refs: Vec<&str> = t.collect();
                if refs.len() != 3 {
                    return Err(Error::parse(
                        path,
                        *ln,
                        format!("non-triangle face with {} vertices", refs.len()),
                    ));
                }
                let mut f = [0u32; 3];
                for (k, r) in refs.iter().enumerate() {
                    // `v`, `v/vt`, `v//vn`, `v/vt/vn` — only the position index matters.
                    let first = r.split('/').next().unwrap_or("");
                    let idx: i64 = first
                        .parse()
                        .map_err(|_| Error::parse(path, *ln, format!("bad face index '{r}'")))?;
                    let resolved = if idx > 0 {
                        (idx - 1) as usize
                    } else if idx < 0 {
                        let back = (-idx) as usize;
                        if back > vertices.len() {
                            return Err(Error::parse(path, *ln, format!("face index {idx} out of range")));
                        }
                        vertices.len() - back
                    } else {
                        return Err(Error::parse(path, *ln, "face index 0 is invalid in OBJ"));
                    };
                    if resolved >= vertices.len() {
                        return Err(Error::parse(
                            path,
                            *ln,
                            format!("face index {idx} out of range (vertex count {})", vertices.len()),
                        ));
                    }
                    f[k] = resolved as u32;
                }
                faces.push(f);
            }
            _ => {} // ignore vt, vn, usemtl, groups, ...
        }
    }
    if vertices.is_empty() {
        return Err(Error::parse(path, 1, "OBJ file contains no vertices"));
    }
    Ok((vertices, faces))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(tok: &str) -> Option<Self> {
        Some(match tok {
            "char" | "int8" => PlyScalar::I8,
            "uchar" | "uint8" => PlyScalar::U8,
            "short" | "int16" => PlyScalar::I16,
            "ushort" | "uint16" => PlyScalar::U16,
            "int" | "int32" => PlyScalar::I32,
            "uint" | "uint32" => PlyScalar::U32,
            "float" | "float32" => PlyScalar::F32,
            "double" | "float64" => PlyScalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::I8 | PlyScalar::U8 => 1,
            PlyScalar::I16 | PlyScalar::U16 => 2,
            PlyScalar::I32 | PlyScalar::U32 | PlyScalar::F32 => 4,
            PlyScalar::F64 => 8,
        }
    }

    fn read_le(self, buf: &[u8]) -> f64 {
        match self {
            PlyScalar::I8 => buf[0] as i8 as f64,
            PlyScalar::U8 => buf[0] as f64,
            PlyScalar::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
            PlyScalar::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
            PlyScalar::I32 => i32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            PlyScalar::U32 => u32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            PlyScalar::F32 => f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            PlyScalar::F64 => f64::from_le_bytes(buf[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum PlyProperty {
    Scalar { name: String, ty: PlyScalar },
    List { name: String, count_ty: PlyScalar, item_ty: PlyScalar },
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

fn read_ply(path: &Path) -> Result<RawShape> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;

    // Header is ASCII lines up to and including "end_header".
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut header_lines = Vec::new();
    loop {
        let end = data[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(path, line_no + 1, "unterminated PLY header"))?;
        let line = String::from_utf8_lossy(&data[offset..offset + end])
            .trim_end_matches('\r')
            .trim()
            .to_string();
        offset += end + 1;
        line_no += 1;
        let done = line == "end_header";
        header_lines.push((line_no, line));
        if done {
            break;
        }
    }

    let mut it = header_lines.iter();
    let (ln, magic) = it.next().ok_or_else(|| Error::parse(path, 1, "empty PLY file"))?;
    if magic != "ply" {
        return Err(Error::parse(path, *ln, "missing 'ply' magic"));
    }
    let mut ascii = true;
    let mut elements: Vec<PlyElement> = Vec::new();
    for (ln, line) in it {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            Some("format") => match toks.get(1).copied() {
                Some("ascii") => ascii = true,
                Some("binary_little_endian") => ascii = false,
                other => {
                    return Err(Error::parse(
                        path,
                        *ln,
                        format!("unsupported PLY format '{}'", other.unwrap_or("")),
                    ))
                }
            },
            Some("element") => {
                if toks.len() < 3 {
                    return Err(Error::parse(path, *ln, "malformed element line"));
                }
                elements.push(PlyElement {
                    name: toks[1].to_string(),
                    count: parse_usize(path, *ln, toks[2])?,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, *ln, "property before any element"))?;
                if toks.get(1) == Some(&"list") {
                    let count_ty = PlyScalar::parse(toks.get(2).copied().unwrap_or(""))
                        .ok_or_else(|| Error::parse(path, *ln, "bad list count type"))?;
                    let item_ty = PlyScalar::parse(toks.get(3).copied().unwrap_or(""))
                        .ok_or_else(|| Error::parse(path, *ln, "bad list item type"))?;
                    el.properties.push(PlyProperty::List {
                        name: toks.get(4).copied().unwrap_or("").to_string(),
                        count_ty,
                        item_ty,
                    });
                } else {
                    let ty = PlyScalar::parse(toks.get(1).copied().unwrap_or(""))
                        .ok_or_else(|| Error::parse(path, *ln, "bad property type"))?;
                    el.properties.push(PlyProperty::Scalar {
                        name: toks.get(2).copied().unwrap_or("").to_string(),
                        ty,
                    });
                }
            }
            Some("comment") | Some("obj_info") | Some("end_header") => {}
            _ => return Err(Error::parse(path, *ln, format!("unrecognized header line '{line}'"))),
        }
    }

    let mut vertices = Vec::new();
    let mut faces = Vec::new();

    if ascii {
        let body = String::from_utf8_lossy(&data[offset..]).into_owned();
        let mut records = body
            .lines()
            .enumerate()
            .map(|(i, l)| (line_no + i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        for el in &elements {
            for _ in 0..el.count {
                let (ln, rec) = records.next().ok_or_else(|| {
                    Error::parse(path, line_no, format!("file ended inside element '{}'", el.name))
                })?;
                let toks: Vec<&str> = rec.split_whitespace().collect();
                parse_ply_record(path, ln, el, &toks, &mut vertices, &mut faces)?;
            }
        }
    } else {
        let mut pos = offset;
        for el in &elements {
            for _ in 0..el.count {
                parse_ply_binary_record(path, &data, &mut pos, el, &mut vertices, &mut faces)?;
            }
        }
    }

    if vertices.is_empty() {
        return Err(Error::parse(path, line_no, "PLY file contains no vertices"));
    }
    Ok((vertices, faces))
}

fn parse_ply_record(
    path: &Path,
    ln: usize,
    el: &PlyElement,
    toks: &[&str],
    vertices: &mut Vec<Vector3<f64>>,
    faces: &mut Vec<[u32; 3]>,
) -> Result<()> {
    if el.name == "vertex" {
        let mut xyz = [f64::NAN; 3];
        let mut ti = 0usize;
        for p in &el.properties {
            match p {
                PlyProperty::Scalar { name, .. } => {
                    let tok = toks
                        .get(ti)
                        .ok_or_else(|| Error::parse(path, ln, "truncated vertex record"))?;
                    let val = parse_f64(path, ln, tok)?;
                    match name.as_str() {
                        "x" => xyz[0] = val,
                        "y" => xyz[1] = val,
                        "z" => xyz[2] = val,
                        _ => {}
                    }
                    ti += 1;
                }
                PlyProperty::List { .. } => {
                    let cnt = parse_usize(path, ln, toks.get(ti).unwrap_or(&"0"))?;
                    ti += 1 + cnt;
                }
            }
        }
        if xyz.iter().any(|c| c.is_nan()) {
            return Err(Error::parse(path, ln, "vertex element lacks x/y/z properties"));
        }
        vertices.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
    } else if el.name == "face" {
        let mut ti = 0usize;
        for p in &el.properties {
            match p {
                PlyProperty::List { name, .. } => {
                    let cnt = parse_usize(
                        path,
                        ln,
                        toks.get(ti)
                            .ok_or_else(|| Error::parse(path, ln, "truncated face record"))?,
                    )?;
                    if name == "vertex_indices" || name == "vertex_index" {
                        if cnt != 3 {
                            return Err(Error::parse(
                                path,
                                ln,
                                format!("non-triangle face with {cnt} vertices"),
                            ));
                        }
                        let f = read_face_indices(path, ln, &toks[ti + 1..ti + 4], vertices.len())?;
                        faces.push(f);
                    }
                    ti += 1 + cnt;
                }
                PlyProperty::Scalar { .. } => ti += 1,
            }
        }
    }
    // other elements skipped
    Ok(())
}

fn parse_ply_binary_record(
    path: &Path,
    data: &[u8],
    pos: &mut usize,
    el: &PlyElement,
    vertices: &mut Vec<Vector3<f64>>,
    faces: &mut Vec<[u32; 3]>,
) -> Result<()> {
    let mut take = |n: usize| -> Result<&[u8]> {
        if *pos + n > data.len() {
            return Err(Error::parse(
                path,
                0,
                format!("unexpected end of binary data at byte offset {}", *pos),
            ));
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let mut xyz = [f64::NAN; 3];
    let mut face_idx: Option<Vec<f64>> = None;
    for p in &el.properties {
        match p {
            PlyProperty::Scalar { name, ty } => {
                let val = ty.read_le(take(ty.size())?);
                if el.name == "vertex" {
                    match name.as_str() {
                        "x" => xyz[0] = val,
                        "y" => xyz[1] = val,
                        "z" => xyz[2] = val,
                        _ => {}
                    }
                }
            }
            PlyProperty::List { name, count_ty, item_ty } => {
                let cnt = count_ty.read_le(take(count_ty.size())?) as usize;
                let mut items = Vec::with_capacity(cnt);
                for _ in 0..cnt {
                    items.push(item_ty.read_le(take(item_ty.size())?));
                }
                if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                    face_idx = Some(items);
                }
            }
        }
    }
    if el.name == "vertex" {
        if xyz.iter().any(|c| c.is_nan()) {
            return Err(Error::parse(path, 0, "vertex element lacks x/y/z properties"));
        }
        vertices.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
    }
    if let Some(items) = face_idx {
        if items.len() != 3 {
            return Err(Error::parse(
                path,
                0,
                format!("non-triangle face with {} vertices at byte offset {}", items.len(), *pos),
            ));
        }
        let mut f = [0u32; 3];
        for (k, &v) in items.iter().enumerate() {
            let idx = v as i64;
            if idx < 0 || idx as usize >= vertices.len() {
                return Err(Error::parse(
                    path,
                    0,
                    format!("face index {idx} out of range at byte offset {}", *pos),
                ));
            }
            f[k] = idx as u32;
        }
        faces.push(f);
    }
    Ok(())
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Saves points + faces in the format implied by the extension. An empty
/// face list writes a point cloud.
pub fn save_shape(path: &Path, points: &[Vector3<f64>], faces: &[[u32; 3]]) -> Result<()> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    let w = open_writer(path)?;
    let res = match ext.as_str() {
        "off" => write_off(w, points, faces),
        "obj" => write_obj(w, points, faces),
        "ply" => write_ply_ascii(w, points, faces),
        other => {
            return Err(Error::Argument(format!(
                "unsupported output format '.{other}' for {}",
                path.display()
            )))
        }
    };
    res.map_err(|e| Error::io(path, e))
}

pub fn save_mesh(path: &Path, mesh: &TriMesh) -> Result<()> {
    save_shape(path, &mesh.vertices, &mesh.faces)
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    save_shape(path, &cloud.points, &[])
}

fn write_off(mut w: impl Write, points: &[Vector3<f64>], faces: &[[u32; 3]]) -> std::io::Result<()> {
    writeln!(w, "OFF")?;
    writeln!(w, "{} {} 0", points.len(), faces.len())?;
    for p in points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    for f in faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

fn write_obj(mut w: impl Write, points: &[Vector3<f64>], faces: &[[u32; 3]]) -> std::io::Result<()> {
    for p in points {
        writeln!(w, "v {} {} {}", p.x, p.y, p.z)?;
    }
    for f in faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

fn write_ply_ascii(
    mut w: impl Write,
    points: &[Vector3<f64>],
    faces: &[[u32; 3]],
) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if !faces.is_empty() {
        writeln!(w, "element face {}", faces.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
    }
    writeln!(w, "end_header")?;
    for p in points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    for f in faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}
