//! Dataset ingestion and file formats: XYZ text, a PLY subset, PCF1
//! arrays, unit-sphere normalization, and directory indexing.

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

// ── XYZ text ─────────────────────────────────────────────────────────

/// One `x y z` triple per line; `#` starts a comment line.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut points = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(display.clone(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: display.clone(),
                line: lineno + 1,
                message: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut p = [0.0f32; 3];
        for (axis, f) in fields.iter().enumerate() {
            let v: f32 = f.parse().map_err(|_| Error::Parse {
                path: display.clone(),
                line: lineno + 1,
                message: format!("cannot parse {f:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: lineno + 1,
                    message: format!("non-finite coordinate {f:?}"),
                });
            }
            p[axis] = v;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            path: display,
            line: 0,
            message: "file contains no points".into(),
        });
    }
    Ok(PointCloud { points, id: None })
}

pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let mut out = String::new();
    for p in &cloud.points {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(display, e))
}

// ── PLY subset ───────────────────────────────────────────────────────
//
// format ascii 1.0 or binary_little_endian 1.0; element vertex with
// float x, y, z. Non-vertex elements and extra properties are skipped.

#[derive(PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

struct PlyProperty {
    bytes: usize,
    is_x: bool,
    is_y: bool,
    is_z: bool,
    is_float: bool,
}

fn property_size(type_name: &str) -> Option<usize> {
    match type_name {
        "char" | "uchar" | "int8" | "uint8" => Some(1),
        "short" | "ushort" | "int16" | "uint16" => Some(2),
        "int" | "uint" | "int32" | "uint32" | "float" | "float32" => Some(4),
        "double" | "float64" => Some(8),
        _ => None,
    }
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(display.clone(), e))?;

    // Header is ASCII lines terminated by '\n' up to end_header.
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(Error::Format {
                path: display.clone(),
                offset: start as u64,
                message: "unterminated header line".into(),
            });
        }
        let line = String::from_utf8_lossy(&bytes[start..*pos])
            .trim_end_matches('\r')
            .to_string();
        *pos += 1;
        Ok(line)
    };

    let first = next_line(&mut pos)?;
    if first.trim() != "ply" {
        return Err(Error::Format {
            path: display.clone(),
            offset: 0,
            message: "missing ply magic".into(),
        });
    }
    let mut format: Option<PlyFormat> = None;
    let mut elements: Vec<(String, usize, Vec<PlyProperty>)> = Vec::new();
    loop {
        let line_off = pos;
        let line = next_line(&mut pos)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["comment", ..] | [] => {}
            ["format", "ascii", "1.0"] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", "1.0"] => format = Some(PlyFormat::BinaryLe),
            ["format", other, ..] => {
                return Err(Error::Format {
                    path: display.clone(),
                    offset: line_off as u64,
                    message: format!("unsupported PLY format {other:?}"),
                })
            }
            ["element", name, count] => {
                let count: usize = count.parse().map_err(|_| Error::Format {
                    path: display.clone(),
                    offset: line_off as u64,
                    message: format!("bad element count {count:?}"),
                })?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => {
                return Err(Error::Format {
                    path: display.clone(),
                    offset: line_off as u64,
                    message: "list properties are not supported".into(),
                })
            }
            ["property", type_name, prop_name] => {
                let bytes_len = property_size(type_name).ok_or_else(|| Error::Format {
                    path: display.clone(),
                    offset: line_off as u64,
                    message: format!("unsupported property type {type_name:?}"),
                })?;
                let elem = elements.last_mut().ok_or_else(|| Error::Format {
                    path: display.clone(),
                    offset: line_off as u64,
                    message: "property before any element".into(),
                })?;
                elem.2.push(PlyProperty {
                    bytes: bytes_len,
                    is_x: *prop_name == "x",
                    is_y: *prop_name == "y",
                    is_z: *prop_name == "z",
                    is_float: matches!(*type_name, "float" | "float32"),
                });
            }
            ["end_header"] => break,
            _ => {
                return Err(Error::Format {
                    path: display.clone(),
                    offset: line_off as u64,
                    message: format!("unrecognized header line {line:?}"),
                })
            }
        }
    }
    let format = format.ok_or_else(|| Error::Format {
        path: display.clone(),
        offset: 0,
        message: "header has no format line".into(),
    })?;

    let mut points: Vec<[f32; 3]> = Vec::new();
    for (name, count, props) in &elements {
        let is_vertex = name == "vertex";
        if is_vertex {
            let has = |f: fn(&PlyProperty) -> bool| props.iter().any(f);
            if !(has(|p| p.is_x && p.is_float)
                && has(|p| p.is_y && p.is_float)
                && has(|p| p.is_z && p.is_float))
            {
                return Err(Error::Format {
                    path: display.clone(),
                    offset: pos as u64,
                    message: "vertex element must declare float x, y, z".into(),
                });
            }
        }
        match format {
            PlyFormat::Ascii => {
                for _ in 0..*count {
                    let line_off = pos;
                    let line = next_line(&mut pos)?;
                    if !is_vertex {
                        continue;
                    }
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() != props.len() {
                        return Err(Error::Format {
                            path: display.clone(),
                            offset: line_off as u64,
                            message: format!(
                                "vertex row has {} values, header declares {}",
                                fields.len(),
                                props.len()
                            ),
                        });
                    }
                    let mut p = [0.0f32; 3];
                    for (prop, f) in props.iter().zip(&fields) {
                        let v: f32 = f.parse().map_err(|_| Error::Format {
                            path: display.clone(),
                            offset: line_off as u64,
                            message: format!("cannot parse {f:?}"),
                        })?;
                        if prop.is_x {
                            p[0] = v;
                        } else if prop.is_y {
                            p[1] = v;
                        } else if prop.is_z {
                            p[2] = v;
                        }
                    }
                    points.push(p);
                }
            }
            PlyFormat::BinaryLe => {
                let stride: usize = props.iter().map(|p| p.bytes).sum();
                for _ in 0..*count {
                    if pos + stride > bytes.len() {
                        return Err(Error::Format {
                            path: display.clone(),
                            offset: pos as u64,
                            message: "truncated vertex data".into(),
                        });
                    }
                    if is_vertex {
                        let mut off = pos;
                        let mut p = [0.0f32; 3];
                        for prop in props {
                            if prop.is_x || prop.is_y || prop.is_z {
                                let v = f32::from_le_bytes([
                                    bytes[off],
                                    bytes[off + 1],
                                    bytes[off + 2],
                                    bytes[off + 3],
                                ]);
                                if prop.is_x {
                                    p[0] = v;
                                } else if prop.is_y {
                                    p[1] = v;
                                } else {
                                    p[2] = v;
                                }
                            }
                            off += prop.bytes;
                        }
                        points.push(p);
                    }
                    pos += stride;
                }
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Format {
            path: display,
            offset: pos as u64,
            message: "no vertex element with points".into(),
        });
    }
    Ok(PointCloud { points, id: None })
}

/// Binary little-endian PLY with float x, y, z. Round-trips exactly.
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(b"ply\n");
    buf.extend_from_slice(b"format binary_little_endian 1.0\n");
    buf.extend_from_slice(format!("element vertex {}\n", cloud.len()).as_bytes());
    buf.extend_from_slice(b"property float x\nproperty float y\nproperty float z\n");
    buf.extend_from_slice(b"end_header\n");
    for p in &cloud.points {
        for &v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(display.clone(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(display, e))
}

// ── PCF1 arrays ──────────────────────────────────────────────────────
//
// magic "PCF1", u32 rank, u32 extents, float32 little-endian payload.

const PCF_MAGIC: &[u8; 4] = b"PCF1";

pub fn write_pcf(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::Contract(format!(
            "PCF payload length {} does not match shape {shape:?}",
            data.len()
        )));
    }
    let display = path.display().to_string();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(PCF_MAGIC);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(display.clone(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(display, e))
}

pub fn read_pcf(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(display.clone(), e))?;
    let fail = |offset: usize, message: String| Error::Format {
        path: display.clone(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 8 {
        return Err(fail(0, format!("file too short: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != PCF_MAGIC {
        return Err(fail(0, format!("bad magic {:?}, expected {PCF_MAGIC:?}", &bytes[0..4])));
    }
    let rank = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let header = 8 + rank * 4;
    if bytes.len() < header {
        return Err(fail(8, format!("truncated extents: rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + i * 4;
        shape.push(u32::from_le_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]) as usize);
    }
    let numel: usize = shape.iter().product();
    let expected = header + numel * 4;
    if bytes.len() != expected {
        return Err(fail(
            header,
            format!(
                "payload length mismatch: expected {expected} bytes total, found {}",
                bytes.len()
            ),
        ));
    }
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((shape, data))
}

// ── Normalization ────────────────────────────────────────────────────

/// Centering and scale that map a cloud into the unit sphere.
#[derive(Clone, Copy, Debug)]
pub struct Normalization {
    pub centroid: [f32; 3],
    /// Multiplier: normalized = (p − centroid) · scale.
    pub scale: f32,
}

/// Center at the centroid and scale so the farthest point sits on the
/// unit sphere. Returns the transform for inversion.
pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, Normalization)> {
    let n = cloud.len() as f64;
    let mut c = [0.0f64; 3];
    for p in &cloud.points {
        for axis in 0..3 {
            c[axis] += p[axis] as f64;
        }
    }
    let centroid = [(c[0] / n) as f32, (c[1] / n) as f32, (c[2] / n) as f32];
    let mut max_d2 = 0.0f64;
    for p in &cloud.points {
        let mut d2 = 0.0f64;
        for axis in 0..3 {
            let d = (p[axis] - centroid[axis]) as f64;
            d2 += d * d;
        }
        max_d2 = max_d2.max(d2);
    }
    if max_d2 <= f64::EPSILON {
        return Err(Error::Contract(
            "cannot normalize a cloud of identical points (zero extent)".into(),
        ));
    }
    let scale = (1.0 / max_d2.sqrt()) as f32;
    let points = cloud
        .points
        .iter()
        .map(|p| {
            [
                (p[0] - centroid[0]) * scale,
                (p[1] - centroid[1]) * scale,
                (p[2] - centroid[2]) * scale,
            ]
        })
        .collect();
    Ok((
        PointCloud { points, id: cloud.id.clone() },
        Normalization { centroid, scale },
    ))
}

pub fn denormalize(cloud: &PointCloud, t: &Normalization) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            [
                p[0] / t.scale + t.centroid[0],
                p[1] / t.scale + t.centroid[1],
                p[2] / t.scale + t.centroid[2],
            ]
        })
        .collect();
    PointCloud { points, id: cloud.id.clone() }
}

// ── Dataset index ────────────────────────────────────────────────────

/// One (partial view, ground truth) pairing on disk.
#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub category: String,
    pub sample: String,
    pub partial: PathBuf,
    pub features: Option<PathBuf>,
    pub ground_truth: PathBuf,
    pub view: u32,
}

#[derive(Default)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
    pub warnings: Vec<String>,
}

/// Walk `root/<category>/<sample>/{partial_<view>.ply, feat_<view>.pcf, gt.ply}`.
/// Ordering is lexicographic in category and sample, numeric in view.
/// Samples without gt.ply are skipped with a warning.
pub fn index_dataset(root: &Path) -> Result<DatasetIndex> {
    let display = root.display().to_string();
    let mut categories: Vec<PathBuf> = Vec::new();
    let rd = std::fs::read_dir(root).map_err(|e| Error::io(display.clone(), e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(display.clone(), e))?;
        if entry.path().is_dir() {
            categories.push(entry.path());
        }
    }
    if categories.is_empty() {
        return Err(Error::Data(format!("dataset root {display} has no category directories")));
    }
    categories.sort();
    let mut index = DatasetIndex::default();
    for cat_dir in categories {
        let category = cat_dir.file_name().unwrap().to_string_lossy().to_string();
        let mut samples: Vec<PathBuf> = std::fs::read_dir(&cat_dir)
            .map_err(|e| Error::io(cat_dir.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        samples.sort();
        for sample_dir in samples {
            let sample = sample_dir.file_name().unwrap().to_string_lossy().to_string();
            let gt = sample_dir.join("gt.ply");
            if !gt.exists() {
                index
                    .warnings
                    .push(format!("skipping {category}/{sample}: missing gt.ply"));
                continue;
            }
            let mut views: Vec<(u32, PathBuf)> = Vec::new();
            for entry in std::fs::read_dir(&sample_dir)
                .map_err(|e| Error::io(sample_dir.display().to_string(), e))?
                .filter_map(|e| e.ok())
            {
                let name = entry.file_name().to_string_lossy().to_string();
                if let Some(v) = name
                    .strip_prefix("partial_")
                    .and_then(|rest| rest.strip_suffix(".ply"))
                {
                    let view: u32 = v.parse().map_err(|_| {
                        Error::Data(format!("bad view id in {category}/{sample}/{name}"))
                    })?;
                    if view >= 24 {
                        return Err(Error::Data(format!(
                            "view id {view} out of range [0, 24) in {category}/{sample}"
                        )));
                    }
                    views.push((view, entry.path()));
                }
            }
            views.sort_by_key(|(v, _)| *v);
            for (view, partial) in views {
                let feat = sample_dir.join(format!("feat_{view}.pcf"));
                index.entries.push(DatasetEntry {
                    category: category.clone(),
                    sample: sample.clone(),
                    partial,
                    features: feat.exists().then_some(feat),
                    ground_truth: gt.clone(),
                    view,
                });
            }
        }
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn xyz_basic_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xyz");
        std::fs::write(&p, "0 0 0\n1 0 0\n").unwrap();
        assert_eq!(read_xyz(&p).unwrap().len(), 2);
    }

    #[test]
    fn xyz_comment_lines_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xyz");
        std::fs::write(&p, "# c\n1 2 3\n").unwrap();
        let c = read_xyz(&p).unwrap();
        assert_eq!(c.points, vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn xyz_short_line_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xyz");
        std::fs::write(&p, "1 2\n").unwrap();
        match read_xyz(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ply_minimal_ascii() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        std::fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0.5 1.5 -2\n",
        )
        .unwrap();
        let c = read_ply(&p).unwrap();
        assert_eq!(c.points, vec![[0.5, 1.5, -2.0]]);
    }

    #[test]
    fn ply_binary_round_trip_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let pts: Vec<[f32; 3]> = (0..2048)
            .map(|_| [rng.gen::<f32>() * 4.0 - 2.0, rng.gen(), rng.gen()])
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        let c = cloud(&pts);
        write_ply(&c, &p).unwrap();
        let back = read_ply(&p).unwrap();
        for (a, b) in c.points.iter().zip(&back.points) {
            for axis in 0..3 {
                assert_eq!(a[axis].to_bits(), b[axis].to_bits());
            }
        }
    }

    #[test]
    fn ply_big_endian_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        std::fs::write(&p, "ply\nformat binary_big_endian 1.0\nend_header\n").unwrap();
        match read_ply(&p) {
            Err(Error::Format { message, .. }) => assert!(message.contains("unsupported")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn ply_extra_properties_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        std::fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n1 2 3 255\n",
        )
        .unwrap();
        assert_eq!(read_ply(&p).unwrap().points, vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn pcf_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pcf");
        let data: Vec<f32> = (0..49 * 768).map(|i| (i as f32).sin()).collect();
        write_pcf(&p, &[49, 768], &data).unwrap();
        let (shape, back) = read_pcf(&p).unwrap();
        assert_eq!(shape, vec![49, 768]);
        assert_eq!(back, data);
    }

    #[test]
    fn pcf_scalar_rank_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.pcf");
        write_pcf(&p, &[], &[42.0]).unwrap();
        let (shape, data) = read_pcf(&p).unwrap();
        assert!(shape.is_empty());
        assert_eq!(data, vec![42.0]);
    }

    #[test]
    fn pcf_bad_magic_and_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pcf");
        std::fs::write(&p, b"NOPE\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_pcf(&p), Err(Error::Format { .. })));
        write_pcf(&p, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        match read_pcf(&p) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains("expected") && message.contains("found"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn normalize_cube_corners() {
        let corners: Vec<[f32; 3]> = (0..8)
            .map(|i| {
                [
                    if i & 1 == 0 { -2.0 } else { 2.0 },
                    if i & 2 == 0 { -2.0 } else { 2.0 },
                    if i & 4 == 0 { -2.0 } else { 2.0 },
                ]
            })
            .collect();
        let (_, t) = normalize(&cloud(&corners)).unwrap();
        let expect = 1.0 / (2.0 * 3.0f32.sqrt());
        assert!((t.scale - expect).abs() < 1e-7);
    }

    #[test]
    fn normalize_round_trip() {
        let pts = vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [-1.0, 0.0, 2.0]];
        let c = cloud(&pts);
        let (normed, t) = normalize(&c).unwrap();
        let back = denormalize(&normed, &t);
        for (a, b) in c.points.iter().zip(&back.points) {
            for axis in 0..3 {
                assert!((a[axis] - b[axis]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normalize_identity_when_already_unit() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let (_, t) = normalize(&cloud(&pts)).unwrap();
        assert_eq!(t.centroid, [0.0, 0.0, 0.0]);
        assert!((t.scale - 1.0).abs() < 1e-7);
    }

    #[test]
    fn normalize_rejects_degenerate_cloud() {
        let pts = vec![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]];
        assert!(normalize(&cloud(&pts)).is_err());
    }

    fn write_sample(dir: &Path, cat: &str, sample: &str, views: &[u32], with_gt: bool) {
        let d = dir.join(cat).join(sample);
        std::fs::create_dir_all(&d).unwrap();
        let c = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        if with_gt {
            write_ply(&c, &d.join("gt.ply")).unwrap();
        }
        for &v in views {
            write_ply(&c, &d.join(format!("partial_{v}.ply"))).unwrap();
            write_pcf(&d.join(format!("feat_{v}.pcf")), &[2, 4], &[0.0; 8]).unwrap();
        }
    }

    #[test]
    fn index_counts_and_order() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "chair", "s1", &[0], true);
        write_sample(dir.path(), "chair", "s2", &[0], true);
        write_sample(dir.path(), "chair", "s3", &[0], true);
        write_sample(dir.path(), "airplane", "s1", &[0], true);
        write_sample(dir.path(), "airplane", "s2", &[0], true);
        write_sample(dir.path(), "airplane", "s3", &[0], true);
        let idx = index_dataset(dir.path()).unwrap();
        assert_eq!(idx.entries.len(), 6);
        assert_eq!(idx.entries[0].category, "airplane");
        let idx2 = index_dataset(dir.path()).unwrap();
        let names: Vec<String> = idx
            .entries
            .iter()
            .map(|e| format!("{}/{}/{}", e.category, e.sample, e.view))
            .collect();
        let names2: Vec<String> = idx2
            .entries
            .iter()
            .map(|e| format!("{}/{}/{}", e.category, e.sample, e.view))
            .collect();
        assert_eq!(names, names2);
    }

    #[test]
    fn index_skips_missing_gt_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "chair", "ok", &[0, 1], true);
        write_sample(dir.path(), "chair", "broken", &[0], false);
        let idx = index_dataset(dir.path()).unwrap();
        assert_eq!(idx.entries.len(), 2);
        assert_eq!(idx.warnings.len(), 1);
        assert!(idx.warnings[0].contains("broken"));
    }

    #[test]
    fn index_rejects_out_of_range_view() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "chair", "s", &[24], true);
        assert!(matches!(index_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn index_empty_root_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(index_dataset(dir.path()).is_err());
    }
}
