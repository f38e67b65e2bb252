//! File formats: ASCII PLY (read/write), OBJ (read), JSON documents for plans,
//! cases and checkpoints. Lengths are millimetres throughout.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::acmt::{AcmtModel, Direction};
use crate::error::{Error, Result};
use crate::eval::BaselineModel;
use crate::geom::{BonyPlan, Mesh, PointSet, SegmentLabel, Vec3};

const SEGMENT_ORDER: [SegmentLabel; 5] = [
    SegmentLabel::LeFort,
    SegmentLabel::Distal,
    SegmentLabel::RightProximal,
    SegmentLabel::LeftProximal,
    SegmentLabel::Cranium,
];

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

/// Contents of a PLY file. Optional parts are present only when the file
/// declares them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyData {
    pub vertices: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub labels: Option<Vec<SegmentLabel>>,
    pub faces: Vec<[usize; 3]>,
}

impl PlyData {
    pub fn point_set(&self) -> Result<PointSet> {
        let ps = PointSet {
            coords: self.vertices.clone(),
            normals: self.normals.clone(),
        };
        ps.validate()?;
        Ok(ps)
    }

    pub fn mesh(&self) -> Result<Mesh> {
        let m = Mesh {
            vertices: self.vertices.clone(),
            triangles: self.faces.clone(),
        };
        m.validate()?;
        Ok(m)
    }
}

/// Writes ASCII PLY. Floats use the shortest representation that reads
/// back to the same value.
pub fn write_ply(w: &mut impl Write, data: &PlyData) -> Result<()> {
    let n = data.vertices.len();
    if data.normals.as_ref().is_some_and(|v| v.len() != n) || data.labels.as_ref().is_some_and(|v| v.len() != n) {
        return Err(crate::error::invalid("per-vertex attributes do not match the vertex count"));
    }
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "comment units mm")?;
    if data.labels.is_some() {
        writeln!(w, "comment segment 0=LF 1=DI 2=RP 3=LP 4=CRANIUM")?;
    }
    writeln!(w, "element vertex {n}")?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property double {p}")?;
    }
    if data.normals.is_some() {
        for p in ["nx", "ny", "nz"] {
            writeln!(w, "property double {p}")?;
        }
    }
    if data.labels.is_some() {
        writeln!(w, "property uchar segment")?;
    }
    if !data.faces.is_empty() {
        writeln!(w, "element face {}", data.faces.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..n {
        let v = data.vertices[i];
        write!(w, "{} {} {}", v.x, v.y, v.z)?;
        if let Some(nm) = &data.normals {
            write!(w, " {} {} {}", nm[i].x, nm[i].y, nm[i].z)?;
        }
        if let Some(l) = &data.labels {
            let code = SEGMENT_ORDER.iter().position(|s| *s == l[i]).expect("all labels are listed");
            write!(w, " {code}")?;
        }
        writeln!(w)?;
    }
    for f in &data.faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Field {
    X,
    Y,
    Z,
    Nx,
    Ny,
    Nz,
    Segment,
    Other,
}

/// Reads ASCII PLY with double or float vertex properties and triangular
/// or polygonal faces (polygons are fanned into triangles).
pub fn read_ply(r: impl Read) -> Result<PlyData> {
    let mut lines = BufReader::new(r).lines();
    let mut next = || -> Result<Option<String>> { Ok(lines.next().transpose()?) };
    if next()?.as_deref().map(str::trim) != Some("ply") {
        return Err(parse_err("missing 'ply' magic"));
    }
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut fields = Vec::new();
    let mut current = "";
    let mut ascii = false;
    loop {
        let line = next()?.ok_or_else(|| parse_err("header ended early"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => ascii = *fmt == "ascii",
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count: usize = count.parse().map_err(|_| parse_err(format!("bad element count '{count}'")))?;
                match *name {
                    "vertex" => {
                        n_vertices = count;
                        current = "vertex";
                    }
                    "face" => {
                        n_faces = count;
                        current = "face";
                    }
                    other => return Err(parse_err(format!("unsupported element '{other}'"))),
                }
            }
            ["property", "list", ..] if current == "face" => {}
            ["property", _, name] if current == "vertex" => fields.push(match *name {
                "x" => Field::X,
                "y" => Field::Y,
                "z" => Field::Z,
                "nx" => Field::Nx,
                "ny" => Field::Ny,
                "nz" => Field::Nz,
                "segment" => Field::Segment,
                _ => Field::Other,
            }),
            _ => return Err(parse_err(format!("unsupported header line '{line}'"))),
        }
    }
    if !ascii {
        return Err(parse_err("only ASCII PLY is supported"));
    }
    for need in [Field::X, Field::Y, Field::Z] {
        if !fields.contains(&need) {
            return Err(parse_err("vertex element lacks x/y/z"));
        }
    }
    let has_normals = fields.contains(&Field::Nx);
    let has_labels = fields.contains(&Field::Segment);
    let mut data = PlyData {
        normals: has_normals.then(Vec::new),
        labels: has_labels.then(Vec::new),
        ..PlyData::default()
    };
    for i in 0..n_vertices {
        let line = next()?.ok_or_else(|| parse_err(format!("file ends at vertex {i}")))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != fields.len() {
            return Err(parse_err(format!("vertex {i} has {} values, expected {}", toks.len(), fields.len())));
        }
        let mut p = Vec3::zeros();
        let mut nm = Vec3::zeros();
        for (f, t) in fields.iter().zip(&toks) {
            let num = || -> Result<f64> { t.parse().map_err(|_| parse_err(format!("bad number '{t}' at vertex {i}"))) };
            match f {
                Field::X => p.x = num()?,
                Field::Y => p.y = num()?,
                Field::Z => p.z = num()?,
                Field::Nx => nm.x = num()?,
                Field::Ny => nm.y = num()?,
                Field::Nz => nm.z = num()?,
                Field::Segment => {
                    let code: usize = t.parse().map_err(|_| parse_err(format!("bad segment code '{t}'")))?;
                    let label = SEGMENT_ORDER
                        .get(code)
                        .ok_or_else(|| parse_err(format!("unknown segment code {code}")))?;
                    data.labels.as_mut().expect("declared").push(*label);
                }
                Field::Other => {}
            }
        }
        data.vertices.push(p);
        if let Some(n) = data.normals.as_mut() {
            n.push(nm);
        }
    }
    for i in 0..n_faces {
        let line = next()?.ok_or_else(|| parse_err(format!("file ends at face {i}")))?;
        let idx: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(format!("bad index '{t}' in face {i}"))))
            .collect::<Result<_>>()?;
        let (&count, rest) = idx.split_first().ok_or_else(|| parse_err(format!("empty face {i}")))?;
        if count < 3 || rest.len() != count {
            return Err(parse_err(format!("face {i} is malformed")));
        }
        for k in 1..count - 1 {
            data.faces.push([rest[0], rest[k], rest[k + 1]]);
        }
    }
    if data.faces.iter().flatten().any(|&v| v >= n_vertices) {
        return Err(parse_err("face index out of range"));
    }
    Ok(data)
}

/// Reads vertices and faces from a Wavefront OBJ. Texture and normal
/// references in faces are ignored; polygons are fanned into triangles.
pub fn read_obj(r: impl Read) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (ln, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<f64> = toks
                    .take(3)
                    .map(|t| t.parse().map_err(|_| parse_err(format!("line {}: bad coordinate '{t}'", ln + 1))))
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(parse_err(format!("line {}: vertex needs 3 coordinates", ln + 1)));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = toks
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let v: i64 = head
                            .parse()
                            .map_err(|_| parse_err(format!("line {}: bad face index '{t}'", ln + 1)))?;
                        let n = vertices.len() as i64;
                        let abs = if v < 0 { n + v } else { v - 1 };
                        if abs < 0 || abs >= n {
                            return Err(parse_err(format!("line {}: face index {v} out of range", ln + 1)));
                        }
                        Ok(abs as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(parse_err(format!("line {}: face needs 3 vertices", ln + 1)));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let mesh = Mesh { vertices, triangles };
    mesh.validate()?;
    Ok(mesh)
}

/// Reads a mesh by extension (`.ply` or `.obj`).
pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let f = fs::File::open(path)?;
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => read_obj(f),
        Some("ply") => read_ply(f)?.mesh(),
        _ => Err(crate::error::invalid(format!("unknown mesh format: {}", path.display()))),
    }
}

pub fn save_ply(path: &Path, data: &PlyData) -> Result<()> {
    let mut buf = Vec::new();
    write_ply(&mut buf, data)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Pretty JSON with a trailing newline; the canonical form of every JSON file.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// On-disk bony plan: 4×4 row-major homogeneous matrices per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub units: String,
    pub segments: BonyPlan,
}

impl PlanFile {
    pub fn new(plan: BonyPlan) -> Self {
        Self {
            units: "mm".into(),
            segments: plan,
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "cmf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum CheckpointModel {
    Acmt(AcmtModel),
    Baseline(BaselineModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub model: CheckpointModel,
}

impl Checkpoint {
    pub fn new(model: CheckpointModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model,
        }
    }
}

fn mismatch(msg: impl Into<String>) -> Error {
    Error::CheckpointMismatch(msg.into())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| mismatch(format!("{}: {e}", path.display())))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(mismatch(format!(
            "{}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
            path.display(),
            ck.format,
            ck.version
        )));
    }
    let valid = match &ck.model {
        CheckpointModel::Acmt(m) => m.validate(),
        CheckpointModel::Baseline(m) => m.validate(),
    };
    valid.map_err(|e| mismatch(format!("{}: {e}", path.display())))?;
    Ok(ck)
}

pub fn load_acmt(path: &Path, direction: Direction) -> Result<AcmtModel> {
    match load_checkpoint(path)?.model {
        CheckpointModel::Acmt(m) if m.direction == direction => Ok(m),
        CheckpointModel::Acmt(m) => Err(mismatch(format!(
            "{} holds a {:?} model, expected {:?}",
            path.display(),
            m.direction,
            direction
        ))),
        CheckpointModel::Baseline(_) => Err(mismatch(format!("{} holds the baseline model", path.display()))),
    }
}

pub fn load_baseline(path: &Path) -> Result<BaselineModel> {
    match load_checkpoint(path)?.model {
        CheckpointModel::Baseline(m) => Ok(m),
        CheckpointModel::Acmt(_) => Err(mismatch(format!("{} holds a transfer model, not the baseline", path.display()))),
    }
}
