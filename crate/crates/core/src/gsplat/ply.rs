//! Binary little-endian PLY for Gaussian sets and labeled point clouds.
//!
//! Gaussian files use the usual splatting vertex layout (`x y z f_dc_0..2
//! opacity scale_0..2 rot_0..3`, all `float`). Tooth membership is carried by
//! a `comment tooth_ranges` line listing `id:start-end` vertex ranges, and
//! each tooth's layout box by a `comment layout` line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};

use super::{Gaussian3D, RenderError, SceneGaussians, ToothGaussians};
use crate::jawgraph::{ToothId, ToothLayout};

const GAUSSIAN_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

fn err(msg: impl Into<String>) -> RenderError {
    RenderError::Ply(msg.into())
}

pub fn write_ply(path: &Path, scene: &SceneGaussians) -> Result<(), RenderError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_gaussians(&mut w, scene)?;
    w.flush()?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<SceneGaussians, RenderError> {
    read_gaussians(&mut BufReader::new(File::open(path)?))
}

pub fn write_gaussians(w: &mut impl Write, scene: &SceneGaussians) -> Result<(), RenderError> {
    scene.check().map_err(err)?;
    writeln!(w, "ply\nformat binary_little_endian 1.0")?;
    let mut ranges = Vec::new();
    let mut start = 0;
    for t in &scene.teeth {
        ranges.push(format!("{}:{}-{}", t.tooth_id, start, start + t.gaussians.len()));
        start += t.gaussians.len();
    }
    writeln!(w, "comment tooth_ranges {}", ranges.join(" "))?;
    for t in &scene.teeth {
        let v: Vec<String> = t.layout.to_array().iter().map(|x| format!("{x:?}")).collect();
        writeln!(w, "comment layout {} {}", t.tooth_id, v.join(" "))?;
    }
    writeln!(w, "element vertex {}", scene.num_gaussians())?;
    for p in GAUSSIAN_PROPERTIES {
        writeln!(w, "property float {p}")?;
    }
    writeln!(w, "end_header")?;
    for t in &scene.teeth {
        for g in &t.gaussians {
            let row = [
                g.center.x,
                g.center.y,
                g.center.z,
                g.color.x,
                g.color.y,
                g.color.z,
                g.opacity_logit,
                g.log_scale.x,
                g.log_scale.y,
                g.log_scale.z,
                g.rotation[0],
                g.rotation[1],
                g.rotation[2],
                g.rotation[3],
            ];
            for v in row {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_gaussians(r: &mut impl BufRead) -> Result<SceneGaussians, RenderError> {
    let (header, rows) = read_vertices(r)?;
    let cols: Vec<usize> = GAUSSIAN_PROPERTIES
        .iter()
        .map(|p| header.column(p).ok_or_else(|| err(format!("missing property {p}"))))
        .collect::<Result<_, _>>()?;
    let gaussians: Vec<Gaussian3D> = rows
        .iter()
        .map(|row| {
            let v = |i: usize| row[cols[i]];
            Gaussian3D {
                center: Vector3::new(v(0), v(1), v(2)),
                color: Vector3::new(v(3), v(4), v(5)),
                opacity_logit: v(6),
                log_scale: Vector3::new(v(7), v(8), v(9)),
                rotation: [v(10), v(11), v(12), v(13)],
            }
        })
        .collect();

    let mut layouts = BTreeMap::new();
    let mut ranges = None;
    for c in &header.comments {
        let mut it = c.split_whitespace();
        match it.next() {
            Some("tooth_ranges") => ranges = Some(parse_ranges(it)?),
            Some("layout") => {
                let id = parse_id(it.next())?;
                let vals: Vec<f64> = it
                    .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad layout value {s:?}"))))
                    .collect::<Result<_, _>>()?;
                let arr: [f64; 8] = vals
                    .try_into()
                    .map_err(|_| err(format!("layout of tooth {id} needs 8 values")))?;
                layouts.insert(id, ToothLayout::from_array(arr));
            }
            _ => {}
        }
    }
    let ranges = ranges.unwrap_or_else(|| vec![(ToothId(0), 0, gaussians.len())]);
    let mut teeth = Vec::with_capacity(ranges.len());
    let mut expect = 0;
    for (id, a, b) in ranges {
        if a != expect || b < a || b > gaussians.len() {
            return Err(err(format!("tooth range {id}:{a}-{b} does not tile the vertex list")));
        }
        expect = b;
        teeth.push(ToothGaussians {
            tooth_id: id,
            layout: layouts.get(&id).copied().unwrap_or_else(|| {
                fit_default(&gaussians[a..b])
            }),
            gaussians: gaussians[a..b].to_vec(),
        });
    }
    if expect != gaussians.len() {
        return Err(err("tooth ranges do not cover every vertex"));
    }
    let scene = SceneGaussians::new(teeth);
    scene.check().map_err(err)?;
    Ok(scene)
}

fn fit_default(gs: &[Gaussian3D]) -> ToothLayout {
    super::layout_from_gaussians(&ToothGaussians {
        tooth_id: ToothId(0),
        layout: ToothLayout::from_array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]),
        gaussians: gs.to_vec(),
    })
}

fn parse_id(s: Option<&str>) -> Result<ToothId, RenderError> {
    let s = s.ok_or_else(|| err("missing tooth id"))?;
    s.parse::<u8>()
        .map(ToothId)
        .map_err(|_| err(format!("bad tooth id {s:?}")))
}

fn parse_ranges<'a>(
    it: impl Iterator<Item = &'a str>,
) -> Result<Vec<(ToothId, usize, usize)>, RenderError> {
    it.map(|tok| {
        let bad = || err(format!("bad tooth range {tok:?}"));
        let (id, span) = tok.split_once(':').ok_or_else(bad)?;
        let (a, b) = span.split_once('-').ok_or_else(bad)?;
        Ok((
            parse_id(Some(id))?,
            a.parse().map_err(|_| bad())?,
            b.parse().map_err(|_| bad())?,
        ))
    })
    .collect()
}

/// Writes points with a per-point `uchar tooth` label.
pub fn write_point_cloud(path: &Path, points: &[(ToothId, Point3<f64>)]) -> Result<(), RenderError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply\nformat binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z\nproperty uchar tooth")?;
    writeln!(w, "end_header")?;
    for (id, p) in points {
        for v in [p.x, p.y, p.z] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.write_all(&[id.0])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `x y z` (and `tooth` when present, otherwise 0) from any binary
/// little-endian PLY vertex element, including Gaussian files.
pub fn read_point_cloud(path: &Path) -> Result<Vec<(ToothId, Point3<f64>)>, RenderError> {
    let (header, rows) = read_vertices(&mut BufReader::new(File::open(path)?))?;
    let col = |p: &str| header.column(p).ok_or_else(|| err(format!("missing property {p}")));
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let tooth = header.column("tooth");
    Ok(rows
        .iter()
        .map(|r| {
            let id = tooth.map_or(0, |c| r[c] as u8);
            (ToothId(id), Point3::new(r[x], r[y], r[z]))
        })
        .collect())
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
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
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

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Header {
    comments: Vec<String>,
    count: usize,
    props: Vec<(String, Scalar)>,
}

impl Header {
    fn column(&self, name: &str) -> Option<usize> {
        self.props.iter().position(|(n, _)| n == name)
    }
}

/// Parses the header and reads the vertex element, which must come first.
fn read_vertices(r: &mut impl BufRead) -> Result<(Header, Vec<Vec<f64>>), RenderError> {
    let mut line = String::new();
    let mut next_line = |r: &mut dyn BufRead| -> Result<String, RenderError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(err("unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(r)? != "ply" {
        return Err(err("not a PLY file"));
    }
    let mut header = Header {
        comments: Vec::new(),
        count: 0,
        props: Vec::new(),
    };
    let mut seen_vertex = false;
    let mut in_vertex = false;
    let mut format_ok = false;
    loop {
        let l = next_line(r)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(err(format!("unsupported format {fmt}")));
                }
                format_ok = true;
            }
            ["comment", ..] => header.comments.push(l["comment".len()..].trim().to_string()),
            ["obj_info", ..] => {}
            ["element", name, n] => {
                if *name == "vertex" && !seen_vertex {
                    seen_vertex = true;
                    in_vertex = true;
                    header.count = n.parse().map_err(|_| err(format!("bad count {n:?}")))?;
                } else if !seen_vertex {
                    return Err(err("vertex element must come first"));
                } else {
                    // later elements follow the vertex data and are ignored
                    in_vertex = false;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(err("list properties are not supported on vertices"))
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| err(format!("unknown type {ty}")))?;
                header.props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(err(format!("bad header line {l:?}"))),
        }
    }
    if !format_ok {
        return Err(err("missing format line"));
    }
    if !seen_vertex {
        return Err(err("no vertex element"));
    }
    let stride: usize = header.props.iter().map(|(_, s)| s.size()).sum();
    let mut buf = vec![0u8; stride];
    let mut rows = Vec::with_capacity(header.count);
    for i in 0..header.count {
        r.read_exact(&mut buf)
            .map_err(|_| err(format!("truncated vertex data at vertex {i}")))?;
        let mut off = 0;
        let mut row = Vec::with_capacity(header.props.len());
        for (_, s) in &header.props {
            row.push(s.decode(&buf[off..]));
            off += s.size();
        }
        rows.push(row);
    }
    Ok((header, rows))
}
