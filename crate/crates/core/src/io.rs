//! File formats: PLY and XYZ point clouds, correspondence lists,
//! ground-truth flow files and the JSON run report.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PyramidConfig;
use crate::cost::CostBreakdown;
use crate::metrics::FlowMetrics;
use crate::normalize::Normalization;
use crate::pyramid::{RegistrationResult, StopReason};
use crate::types::{
    Attribute, CloudError, Correspondence, CorrespondenceSet, Point3, PointCloud, ScalarType,
};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PLY header, line {line}: {message}")]
    Header { line: usize, message: String },
    #[error("unsupported PLY encoding '{0}': only ascii and binary_little_endian are read")]
    Endianness(String),
    #[error("truncated data: expected {expected} vertices, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("non-finite coordinate at {location}")]
    NonFinite { location: String },
    #[error("unknown point cloud format for '{0}' (expected .ply, .xyz, .txt or .pts)")]
    UnknownFormat(PathBuf),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("report: {0}")]
    Report(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    PlyBinary,
    Xyz,
}

impl CloudFormat {
    /// Format implied by the file extension; PLY defaults to binary.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("ply") => Ok(CloudFormat::PlyBinary),
            Some("xyz" | "txt" | "pts") => Ok(CloudFormat::Xyz),
            _ => Err(IoError::UnknownFormat(path.to_path_buf())),
        }
    }
}

// ---------------------------------------------------------------------------
// PLY

fn scalar_type(name: &str) -> Option<ScalarType> {
    Some(match name {
        "char" | "int8" => ScalarType::I8,
        "uchar" | "uint8" => ScalarType::U8,
        "short" | "int16" => ScalarType::I16,
        "ushort" | "uint16" => ScalarType::U16,
        "int" | "int32" => ScalarType::I32,
        "uint" | "uint32" => ScalarType::U32,
        "float" | "float32" => ScalarType::F32,
        "double" | "float64" => ScalarType::F64,
        _ => return None,
    })
}

fn scalar_name(kind: ScalarType) -> &'static str {
    match kind {
        ScalarType::I8 => "char",
        ScalarType::U8 => "uchar",
        ScalarType::I16 => "short",
        ScalarType::U16 => "ushort",
        ScalarType::I32 => "int",
        ScalarType::U32 => "uint",
        ScalarType::F32 => "float",
        ScalarType::F64 => "double",
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, kind: ScalarType },
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Encoding {
    Ascii,
    BinaryLe,
}

struct Header {
    encoding: Encoding,
    elements: Vec<Element>,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |line: usize, message: &str| IoError::Header {
        line,
        message: message.to_string(),
    };
    let mut pos = 0;
    let mut line_no = 0;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(line_no + 1, "missing end_header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| bad(line_no + 1, "header is not text"))?
            .trim_end_matches('\r')
            .trim();
        pos += end + 1;
        line_no += 1;
        let words: Vec<&str> = line.split_whitespace().collect();
        if line_no == 1 {
            if line != "ply" {
                return Err(bad(1, "file does not start with 'ply'"));
            }
            continue;
        }
        match words.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                encoding = Some(match words.get(1).copied() {
                    Some("ascii") => Encoding::Ascii,
                    Some("binary_little_endian") => Encoding::BinaryLe,
                    Some(other) => return Err(IoError::Endianness(other.to_string())),
                    None => return Err(bad(line_no, "format line without encoding")),
                });
            }
            Some("element") => {
                let (Some(name), Some(count)) = (words.get(1), words.get(2)) else {
                    return Err(bad(line_no, "element needs a name and a count"));
                };
                let count = count
                    .parse()
                    .map_err(|_| bad(line_no, "element count is not an integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| bad(line_no, "property before any element"))?;
                let prop = if words.get(1) == Some(&"list") {
                    match (
                        words.get(2).and_then(|w| scalar_type(w)),
                        words.get(3).and_then(|w| scalar_type(w)),
                        words.get(4),
                    ) {
                        (Some(count), Some(item), Some(_)) => Property::List { count, item },
                        _ => return Err(bad(line_no, "malformed list property")),
                    }
                } else {
                    match (words.get(1).and_then(|w| scalar_type(w)), words.get(2)) {
                        (Some(kind), Some(name)) => Property::Scalar {
                            name: name.to_string(),
                            kind,
                        },
                        _ => return Err(bad(line_no, "malformed property")),
                    }
                };
                element.properties.push(prop);
            }
            Some("end_header") => break,
            Some(other) => return Err(bad(line_no, &format!("unknown keyword '{other}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| bad(line_no, "missing format line"))?;
    Ok(Header {
        encoding,
        elements,
        data_start: pos,
    })
}

fn read_le(bytes: &[u8], kind: ScalarType) -> f64 {
    match kind {
        ScalarType::I8 => bytes[0] as i8 as f64,
        ScalarType::U8 => bytes[0] as f64,
        ScalarType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
        ScalarType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
        ScalarType::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        ScalarType::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        ScalarType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        ScalarType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
    }
}

fn write_le(out: &mut Vec<u8>, v: f64, kind: ScalarType) {
    match kind {
        ScalarType::I8 => out.push(v as i8 as u8),
        ScalarType::U8 => out.push(v as u8),
        ScalarType::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
        ScalarType::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
        ScalarType::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
        ScalarType::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
        ScalarType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        ScalarType::F64 => out.extend_from_slice(&v.to_le_bytes()),
    }
}

/// Raw vertex records: one value per scalar property, list properties dropped.
struct VertexTable {
    names: Vec<(String, ScalarType)>,
    rows: Vec<Vec<f64>>,
}

fn read_binary(bytes: &[u8], header: &Header) -> Result<VertexTable> {
    let mut pos = header.data_start;
    for element in &header.elements {
        let is_vertex = element.name == "vertex";
        let mut rows = Vec::with_capacity(if is_vertex { element.count } else { 0 });
        for i in 0..element.count {
            let mut row = Vec::new();
            for prop in &element.properties {
                match *prop {
                    Property::Scalar { kind, .. } => {
                        let Some(chunk) = bytes.get(pos..pos + kind.size()) else {
                            return Err(truncated(is_vertex, element.count, i));
                        };
                        row.push(read_le(chunk, kind));
                        pos += kind.size();
                    }
                    Property::List { count, item } => {
                        let Some(chunk) = bytes.get(pos..pos + count.size()) else {
                            return Err(truncated(is_vertex, element.count, i));
                        };
                        let n = read_le(chunk, count) as usize;
                        pos += count.size() + n * item.size();
                        if pos > bytes.len() {
                            return Err(truncated(is_vertex, element.count, i));
                        }
                    }
                }
            }
            if is_vertex {
                rows.push(row);
            }
        }
        if is_vertex {
            return Ok(VertexTable {
                names: scalar_names(element),
                rows,
            });
        }
    }
    Err(IoError::Header {
        line: 0,
        message: "no vertex element".into(),
    })
}

fn truncated(is_vertex: bool, expected: usize, actual: usize) -> IoError {
    if is_vertex {
        IoError::Truncated { expected, actual }
    } else {
        IoError::Truncated {
            expected,
            actual: 0,
        }
    }
}

fn scalar_names(element: &Element) -> Vec<(String, ScalarType)> {
    element
        .properties
        .iter()
        .filter_map(|p| match p {
            Property::Scalar { name, kind } => Some((name.clone(), *kind)),
            Property::List { .. } => None,
        })
        .collect()
}

fn read_ascii(bytes: &[u8], header: &Header) -> Result<VertexTable> {
    let text = std::str::from_utf8(&bytes[header.data_start..]).map_err(|_| IoError::Parse {
        line: 0,
        message: "ascii PLY body is not text".into(),
    })?;
    let header_lines = bytes[..header.data_start]
        .iter()
        .filter(|&&b| b == b'\n')
        .count();
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (header_lines + i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    for element in &header.elements {
        let is_vertex = element.name == "vertex";
        let mut rows = Vec::new();
        for i in 0..element.count {
            let Some((line_no, line)) = lines.next() else {
                return Err(truncated(is_vertex, element.count, i));
            };
            if !is_vertex {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let mut row = Vec::new();
            for prop in &element.properties {
                let mut next = || {
                    tokens.next().ok_or_else(|| IoError::Parse {
                        line: line_no,
                        message: "too few values".into(),
                    })
                };
                let number = |tok: &str| {
                    tok.parse::<f64>().map_err(|_| IoError::Parse {
                        line: line_no,
                        message: format!("'{tok}' is not a number"),
                    })
                };
                match prop {
                    Property::Scalar { .. } => row.push(number(next()?)?),
                    Property::List { .. } => {
                        let n = number(next()?)? as usize;
                        for _ in 0..n {
                            next()?;
                        }
                    }
                }
            }
            rows.push(row);
        }
        if is_vertex {
            return Ok(VertexTable {
                names: scalar_names(element),
                rows,
            });
        }
    }
    Err(IoError::Header {
        line: 0,
        message: "no vertex element".into(),
    })
}

/// Parses a PLY file held in memory.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let table = match header.encoding {
        Encoding::Ascii => read_ascii(bytes, &header)?,
        Encoding::BinaryLe => read_binary(bytes, &header)?,
    };
    let find = |axis: &str| {
        table
            .names
            .iter()
            .position(|(n, _)| n == axis)
            .ok_or_else(|| IoError::Header {
                line: 0,
                message: format!("vertex element has no '{axis}' property"),
            })
    };
    let (ix, iy, iz) = (find("x")?, find("y")?, find("z")?);
    let mut points = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        let p = [row[ix], row[iy], row[iz]];
        if !p.iter().all(|c| c.is_finite()) {
            return Err(IoError::NonFinite {
                location: format!("vertex {i}"),
            });
        }
        points.push(p);
    }
    let attributes = table
        .names
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != ix && j != iy && j != iz)
        .map(|(j, (name, kind))| Attribute {
            name: name.clone(),
            kind: *kind,
            values: table.rows.iter().map(|r| r[j]).collect(),
        })
        .collect();
    Ok(PointCloud::with_attributes(points, attributes)?)
}

/// Serializes a cloud as PLY. Binary output stores coordinates as doubles;
/// ascii output uses 9 significant digits.
pub fn encode_ply(cloud: &PointCloud, binary: bool) -> Vec<u8> {
    let mut out = Vec::new();
    let coord = if binary { "double" } else { "float" };
    let mut head = format!(
        "ply\nformat {} 1.0\nelement vertex {}\nproperty {coord} x\nproperty {coord} y\nproperty {coord} z\n",
        if binary { "binary_little_endian" } else { "ascii" },
        cloud.len()
    );
    for a in cloud.attributes() {
        head.push_str(&format!("property {} {}\n", scalar_name(a.kind), a.name));
    }
    head.push_str("end_header\n");
    out.extend_from_slice(head.as_bytes());
    for (i, p) in cloud.points().iter().enumerate() {
        if binary {
            for &c in p {
                write_le(&mut out, c, ScalarType::F64);
            }
            for a in cloud.attributes() {
                write_le(&mut out, a.values[i], a.kind);
            }
        } else {
            let mut line = format!("{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
            for a in cloud.attributes() {
                let v = a.values[i];
                match a.kind {
                    ScalarType::F32 => line.push_str(&format!(" {}", v as f32)),
                    ScalarType::F64 => line.push_str(&format!(" {v}")),
                    _ => line.push_str(&format!(" {}", v as i64)),
                }
            }
            line.push('\n');
            out.extend_from_slice(line.as_bytes());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// XYZ

fn parse_rows(text: &str, min_cols: usize, what: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| IoError::Parse {
                    line: i + 1,
                    message: format!("'{t}' is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() < min_cols {
            return Err(IoError::Parse {
                line: i + 1,
                message: format!(
                    "expected {min_cols} values per {what} row, got {}",
                    values.len()
                ),
            });
        }
        if values.iter().take(3).find(|v| !v.is_finite()).is_some() {
            return Err(IoError::NonFinite {
                location: format!("line {}", i + 1),
            });
        }
        rows.push((i + 1, values));
    }
    Ok(rows)
}

/// Whitespace-separated `x y z` rows; extra columns are ignored.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let points = parse_rows(text, 3, "point")?
        .into_iter()
        .map(|(_, v)| [v[0], v[1], v[2]])
        .collect();
    Ok(PointCloud::new(points)?)
}

fn vec_lines(points: &[Point3]) -> String {
    points
        .iter()
        .map(|p| format!("{} {} {}\n", p[0], p[1], p[2]))
        .collect()
}

pub fn encode_xyz(cloud: &PointCloud) -> String {
    vec_lines(cloud.points())
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let format = CloudFormat::from_path(path)?;
    let bytes = read_file(path)?;
    match format {
        CloudFormat::PlyAscii | CloudFormat::PlyBinary => parse_ply(&bytes),
        CloudFormat::Xyz => parse_xyz(&String::from_utf8_lossy(&bytes)),
    }
}

pub fn write_point_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    match format {
        CloudFormat::PlyAscii => write_file(path, &encode_ply(cloud, false)),
        CloudFormat::PlyBinary => write_file(path, &encode_ply(cloud, true)),
        CloudFormat::Xyz => write_file(path, encode_xyz(cloud).as_bytes()),
    }
}

// ---------------------------------------------------------------------------
// Correspondences and ground-truth flow

/// Lines `u v [confidence]`; pairs with confidence below `threshold` dropped.
pub fn parse_correspondences(text: &str, threshold: f64) -> Result<CorrespondenceSet> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| IoError::Parse {
            line: i + 1,
            message,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&tokens.len()) {
            return Err(bad(format!("expected 'u v [confidence]', got '{line}'")));
        }
        let index = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| bad(format!("'{t}' is not a point index")))
        };
        let (source, target) = (index(tokens[0])?, index(tokens[1])?);
        let confidence = match tokens.get(2) {
            Some(t) => t
                .parse::<f64>()
                .ok()
                .filter(|c| (0.0..=1.0).contains(c))
                .ok_or_else(|| bad(format!("confidence '{t}' is not a number in [0, 1]")))?,
            None => 1.0,
        };
        if confidence >= threshold {
            pairs.push(Correspondence {
                source,
                target,
                confidence,
            });
        }
    }
    Ok(CorrespondenceSet::new(pairs))
}

pub fn read_correspondences(path: &Path, threshold: f64) -> Result<CorrespondenceSet> {
    parse_correspondences(&String::from_utf8_lossy(&read_file(path)?), threshold)
}

pub fn write_correspondences(set: &CorrespondenceSet, path: &Path) -> Result<()> {
    let text: String = set
        .pairs
        .iter()
        .map(|c| format!("{} {} {}\n", c.source, c.target, c.confidence))
        .collect();
    write_file(path, text.as_bytes())
}

/// One `dx dy dz` row per source point.
pub fn parse_flow(text: &str) -> Result<Vec<Point3>> {
    Ok(parse_rows(text, 3, "flow")?
        .into_iter()
        .map(|(_, v)| [v[0], v[1], v[2]])
        .collect())
}

pub fn read_flow(path: &Path) -> Result<Vec<Point3>> {
    parse_flow(&String::from_utf8_lossy(&read_file(path)?))
}

/// Shortest round-trip formatting, so reading back is exact.
pub fn write_flow(flow: &[Point3], path: &Path) -> Result<()> {
    write_file(path, vec_lines(flow).as_bytes())
}

// ---------------------------------------------------------------------------
// Run report

pub const REPORT_SCHEMA: &str = "ndp-run-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub k: usize,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub final_cost: f64,
    pub cost: CostBreakdown,
    pub mean_alpha: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub iterations: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub command: String,
    pub config: PyramidConfig,
    pub source_points: usize,
    pub target_points: usize,
    pub correspondences: usize,
    pub normalization: Normalization,
    pub levels: Vec<LevelReport>,
    pub totals: Totals,
    pub metrics: Option<FlowMetrics>,
}

impl RunReport {
    pub fn from_result(
        command: &str,
        cfg: &PyramidConfig,
        source_points: usize,
        target_points: usize,
        correspondences: usize,
        result: &RegistrationResult,
        metrics: Option<FlowMetrics>,
    ) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            command: command.to_string(),
            config: cfg.clone(),
            source_points,
            target_points,
            correspondences,
            normalization: result.pyramid.normalization,
            levels: result
                .levels
                .iter()
                .map(|l| LevelReport {
                    k: l.level,
                    iterations: l.iterations,
                    stop_reason: l.stop_reason,
                    final_cost: l.final_cost.e_total,
                    cost: l.final_cost,
                    mean_alpha: l.alpha_mean,
                    seconds: l.seconds,
                })
                .collect(),
            totals: Totals {
                iterations: result.total_iterations,
                wall_seconds: result.wall_time,
            },
            metrics,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| IoError::Report(e.to_string()))
    }

    /// Parses and validates a report.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| IoError::Report(e.to_string()))?;
        validate_report(&value)?;
        serde_json::from_value(value).map_err(|e| IoError::Report(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&String::from_utf8_lossy(&read_file(path)?))
    }
}

/// Structural check of a report document: schema tag, required keys and
/// their JSON types, level numbering and iteration totals.
pub fn validate_report(value: &serde_json::Value) -> Result<()> {
    use serde_json::Value;
    let fail = |m: String| Err(IoError::Report(m));
    let Some(obj) = value.as_object() else {
        return fail("document is not an object".into());
    };
    match obj.get("schema").and_then(Value::as_str) {
        Some(REPORT_SCHEMA) => {}
        other => return fail(format!("schema must be '{REPORT_SCHEMA}', got {other:?}")),
    }
    for key in [
        "command",
        "config",
        "source_points",
        "target_points",
        "correspondences",
        "normalization",
        "levels",
        "totals",
        "metrics",
    ] {
        if !obj.contains_key(key) {
            return fail(format!("missing key '{key}'"));
        }
    }
    let Some(levels) = obj["levels"].as_array() else {
        return fail("'levels' must be an array".into());
    };
    let mut sum = 0;
    for (i, level) in levels.iter().enumerate() {
        if level.get("k").and_then(Value::as_u64) != Some(i as u64 + 1) {
            return fail(format!("level {i} has k != {}", i + 1));
        }
        let Some(it) = level.get("iterations").and_then(Value::as_u64) else {
            return fail(format!("level {} lacks an iteration count", i + 1));
        };
        sum += it;
        match level.get("stop_reason").and_then(Value::as_str) {
            Some("max_iter" | "cost_threshold" | "stalled") => {}
            other => return fail(format!("level {}: bad stop_reason {other:?}", i + 1)),
        }
        for key in ["final_cost", "mean_alpha"] {
            if !level.get(key).is_some_and(Value::is_number) {
                return fail(format!("level {}: '{key}' must be a number", i + 1));
            }
        }
    }
    let totals = &obj["totals"];
    if totals.get("iterations").and_then(Value::as_u64) != Some(sum) {
        return fail("totals.iterations does not match the level sum".into());
    }
    if !totals.get("wall_seconds").is_some_and(Value::is_number) {
        return fail("totals.wall_seconds must be a number".into());
    }
    let metrics = &obj["metrics"];
    if !metrics.is_null() {
        for key in ["epe", "acc_s", "acc_r", "outlier"] {
            if !metrics.get(key).is_some_and(Value::is_number) {
                return fail(format!("metrics.{key} must be a number"));
            }
        }
    }
    Ok(())
}

/// Writes each line of `text` to `path`; helper for small text outputs.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

pub fn read_text(path: &Path) -> Result<String> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = String::new();
    for line in std::io::BufReader::new(file).lines() {
        out.push_str(&line.map_err(io_err(path))?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ASCII3: &str = "ply\nformat ascii 1.0\ncomment test\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 2 3\n-1.5 0.25 4\n";

    #[test]
    fn ascii_ply_in_file_order() {
        let c = parse_ply(ASCII3.as_bytes()).unwrap();
        assert_eq!(
            c.points(),
            &[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-1.5, 0.25, 4.0]]
        );
    }

    #[test]
    fn xyz_text() {
        let c = parse_xyz("0 0 0\n1 2 3").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.points()[1], [1.0, 2.0, 3.0]);
        assert!(matches!(
            parse_xyz("0 0\n"),
            Err(IoError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_xyz("0 0 0\nnan 0 0\n"),
            Err(IoError::NonFinite { .. })
        ));
    }

    #[test]
    fn truncated_vertices_report_counts() {
        let mut text = String::from("ply\nformat ascii 1.0\nelement vertex 10\nproperty float x\nproperty float y\nproperty float z\nend_header\n");
        for i in 0..8 {
            text.push_str(&format!("{i} 0 0\n"));
        }
        match parse_ply(text.as_bytes()) {
            Err(IoError::Truncated {
                expected: 10,
                actual: 8,
            }) => {}
            other => panic!("{other:?}"),
        }
        let c = PointCloud::new((0..10).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
        let bytes = encode_ply(&c, true);
        match parse_ply(&bytes[..bytes.len() - 2 * 24 - 5]) {
            Err(IoError::Truncated {
                expected: 10,
                actual: 7,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let big = ASCII3.replace("ascii", "binary_big_endian");
        assert!(
            matches!(parse_ply(big.as_bytes()), Err(IoError::Endianness(e)) if e == "binary_big_endian")
        );
        assert!(matches!(
            parse_ply(b"plx\n"),
            Err(IoError::Header { line: 1, .. })
        ));
        assert!(matches!(
            parse_ply(b"ply\nformat ascii 1.0\nelement vertex 1\n"),
            Err(IoError::Header { .. })
        ));
        let no_z = ASCII3.replace("property float z\n", "");
        assert!(matches!(
            parse_ply(no_z.as_bytes()),
            Err(IoError::Header { .. })
        ));
        let nan = ASCII3.replace("1 2 3", "1 nan 3");
        assert!(matches!(
            parse_ply(nan.as_bytes()),
            Err(IoError::NonFinite { .. })
        ));
    }

    #[test]
    fn unknown_properties_and_faces_are_skipped() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty list uchar int extra\nproperty uchar red\nend_header\n1 2 3 2 7 8 255\n4 5 6 0 10\n";
        let c = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(c.attributes()[0].name, "red");
        assert_eq!(c.attributes()[0].values, vec![255.0, 10.0]);
        // A face element before the vertices.
        let text = "ply\nformat ascii 1.0\nelement face 1\nproperty list uchar int vertex_indices\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nend_header\n3 0 1 2\n9 8 7\n";
        assert_eq!(
            parse_ply(text.as_bytes()).unwrap().points(),
            &[[9.0, 8.0, 7.0]]
        );
    }

    fn colored(points: Vec<Point3>) -> PointCloud {
        let n = points.len();
        let attrs = vec![
            Attribute {
                name: "red".into(),
                kind: ScalarType::U8,
                values: (0..n).map(|i| (i % 256) as f64).collect(),
            },
            Attribute {
                name: "nx".into(),
                kind: ScalarType::F32,
                values: (0..n).map(|i| 0.5 - i as f64 * 0.25).collect(),
            },
        ];
        PointCloud::with_attributes(points, attrs).unwrap()
    }

    #[test]
    fn binary_round_trip_is_bit_identical() {
        let c = colored(vec![
            [0.1, -1e-300, 1e10],
            [std::f64::consts::PI, 2.0, -0.0],
        ]);
        assert_eq!(parse_ply(&encode_ply(&c, true)).unwrap(), c);
    }

    #[test]
    fn empty_cloud_is_a_valid_file() {
        for binary in [false, true] {
            let bytes = encode_ply(&PointCloud::default(), binary);
            assert!(String::from_utf8_lossy(&bytes).contains("element vertex 0"));
            assert!(parse_ply(&bytes).unwrap().is_empty());
        }
    }

    #[test]
    fn correspondence_examples() {
        let s = parse_correspondences("0 0 0.9\n1 2 0.1", 0.3).unwrap();
        assert_eq!(
            s.pairs,
            vec![Correspondence {
                source: 0,
                target: 0,
                confidence: 0.9
            }]
        );
        let s = parse_correspondences("3 5", 0.3).unwrap();
        assert_eq!(
            s.pairs,
            vec![Correspondence {
                source: 3,
                target: 5,
                confidence: 1.0
            }]
        );
        assert!(matches!(
            parse_correspondences("a b", 0.3),
            Err(IoError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_correspondences("0 0\n1 1 1.5", 0.3),
            Err(IoError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_correspondences("0 -1", 0.3),
            Err(IoError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn zero_flow_file() {
        let f = parse_flow(&"0 0 0\n".repeat(5)).unwrap();
        assert_eq!(f, vec![[0.0; 3]; 5]);
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(
            CloudFormat::from_path(Path::new("a.PLY")).unwrap(),
            CloudFormat::PlyBinary
        );
        assert_eq!(
            CloudFormat::from_path(Path::new("a.xyz")).unwrap(),
            CloudFormat::Xyz
        );
        assert!(CloudFormat::from_path(Path::new("a.obj")).is_err());
    }

    proptest! {
        #[test]
        fn ascii_round_trip_within_1e6(pts in prop::collection::vec(prop::array::uniform3(-100.0f64..100.0), 0..50)) {
            let c = PointCloud::new(pts).unwrap();
            let back = parse_ply(&encode_ply(&c, false)).unwrap();
            prop_assert_eq!(back.len(), c.len());
            for (a, b) in back.points().iter().zip(c.points()) {
                for i in 0..3 {
                    prop_assert!((a[i] - b[i]).abs() <= 1e-6 * b[i].abs().max(1.0));
                }
            }
        }

        #[test]
        fn flow_and_xyz_round_trip_exactly(pts in prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), 0..50)) {
            prop_assert_eq!(parse_flow(&vec_lines(&pts)).unwrap(), pts.clone());
            let c = PointCloud::new(pts).unwrap();
            prop_assert_eq!(parse_xyz(&encode_xyz(&c)).unwrap(), c);
        }
    }
}
