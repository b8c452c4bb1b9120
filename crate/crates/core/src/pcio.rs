//! Point cloud I/O (PLY), scene normalization and the coordinate transforms
//! used to simulate compressed or sparse captures.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum PcioError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("PLY parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported PLY content: {0}")]
    Unsupported(String),
    #[error("point cloud is empty")]
    Empty,
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("point {index} at {position:?} lies outside [-1, 1]^3")]
    OutOfRange { index: usize, position: [f64; 3] },
    #[error("invalid point {index}: {reason}")]
    InvalidPoint { index: usize, reason: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

type Result<T> = std::result::Result<T, PcioError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub position: Vec3,
    /// Linear RGB in `[0, 1]`.
    pub color: Vec3,
    pub normal: Option<Vec3>,
}

impl Point {
    pub fn new(position: Vec3, color: Vec3) -> Self {
        Self {
            position,
            color,
            normal: None,
        }
    }

    pub fn with_normal(mut self, normal: Vec3) -> Self {
        self.normal = Some(normal);
        self
    }
}

/// Axis-aligned bounding box. An empty box has `min > max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        b
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x
    }

    pub fn extent(&self) -> Vec3 {
        if self.is_empty() {
            Vec3::zeros()
        } else {
            self.max - self.min
        }
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// A colored point cloud with optional per-point normals.
///
/// Construction validates that colors lie in `[0, 1]` and that normals are
/// unit length; the bounding box is computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    bbox: Aabb,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        for (index, p) in points.iter().enumerate() {
            if !p.position.iter().all(|c| c.is_finite()) {
                return Err(PcioError::InvalidPoint {
                    index,
                    reason: "non-finite position".into(),
                });
            }
            if !p.color.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(PcioError::InvalidPoint {
                    index,
                    reason: format!("color {:?} outside [0, 1]", p.color.as_slice()),
                });
            }
            if let Some(n) = p.normal {
                if (n.norm() - 1.0).abs() > 1e-6 {
                    return Err(PcioError::InvalidPoint {
                        index,
                        reason: format!("normal norm {} is not 1", n.norm()),
                    });
                }
            }
        }
        Ok(Self::new_unchecked(points))
    }

    /// Positions are transformed copies of validated points; skips the checks.
    fn new_unchecked(points: Vec<Point>) -> Self {
        let bbox = Aabb::from_points(points.iter().map(|p| &p.position));
        Self { points, bbox }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn has_normals(&self) -> bool {
        !self.points.is_empty() && self.points.iter().all(|p| p.normal.is_some())
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vec3> {
        self.points.iter().map(|p| &p.position)
    }

    pub fn centroid(&self) -> Vec3 {
        if self.points.is_empty() {
            return Vec3::zeros();
        }
        self.positions().sum::<Vec3>() / self.points.len() as f64
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    fn map_positions(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        Self::new_unchecked(
            self.points
                .iter()
                .map(|p| Point {
                    position: f(&p.position),
                    ..*p
                })
                .collect(),
        )
    }
}

// ---------------------------------------------------------------------------
// PLY
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Field {
    X,
    Y,
    Z,
    Red,
    Green,
    Blue,
    Nx,
    Ny,
    Nz,
}

impl Field {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "x" => Self::X,
            "y" => Self::Y,
            "z" => Self::Z,
            "red" => Self::Red,
            "green" => Self::Green,
            "blue" => Self::Blue,
            "nx" => Self::Nx,
            "ny" => Self::Ny,
            "nz" => Self::Nz,
            _ => return None,
        })
    }

    fn is_color(self) -> bool {
        matches!(self, Self::Red | Self::Green | Self::Blue)
    }
}

struct PlyHeader {
    format: PlyFormat,
    vertex_count: usize,
    fields: Vec<Field>,
    has_normals: bool,
    /// Number of header lines consumed, for body error messages.
    lines: usize,
}

fn parse_err(line: usize, text: &str, why: &str) -> PcioError {
    PcioError::Parse {
        line,
        message: format!("{why}: {text:?}"),
    }
}

fn read_header(reader: &mut impl BufRead) -> Result<PlyHeader> {
    let mut line_no = 0usize;
    let mut buf = String::new();
    let mut next_line = |reader: &mut dyn BufRead, line_no: &mut usize| -> Result<Option<String>> {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|e| PcioError::Parse {
            line: *line_no + 1,
            message: e.to_string(),
        })?;
        if n == 0 {
            return Ok(None);
        }
        *line_no += 1;
        Ok(Some(buf.trim_end_matches(['\n', '\r']).to_string()))
    };

    match next_line(reader, &mut line_no)? {
        Some(l) if l.trim() == "ply" => {}
        Some(l) => return Err(parse_err(1, &l, "expected magic 'ply'")),
        None => return Err(parse_err(1, "", "empty file")),
    }

    let mut format = None;
    let mut vertex_count = None;
    let mut fields = Vec::new();
    // Which element the following property lines belong to.
    let mut in_vertex = false;
    loop {
        let Some(line) = next_line(reader, &mut line_no)? else {
            return Err(parse_err(line_no + 1, "", "missing end_header"));
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", fmt, "1.0"] => {
                format = Some(match *fmt {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLe,
                    "binary_big_endian" => {
                        return Err(PcioError::Unsupported("binary_big_endian encoding".into()))
                    }
                    _ => return Err(parse_err(line_no, &line, "unknown format")),
                });
            }
            ["format", ..] => return Err(parse_err(line_no, &line, "malformed format line")),
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| parse_err(line_no, &line, "invalid element count"))?;
                if *name == "vertex" {
                    if vertex_count.is_some() {
                        return Err(parse_err(line_no, &line, "duplicate vertex element"));
                    }
                    vertex_count = Some(count);
                    in_vertex = true;
                } else if count == 0 {
                    in_vertex = false;
                } else {
                    return Err(PcioError::Unsupported(format!(
                        "element '{name}' with {count} entries"
                    )));
                }
            }
            ["element", ..] => return Err(parse_err(line_no, &line, "malformed element line")),
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(PcioError::Unsupported("list property on vertex".into()));
                }
            }
            ["property", ty, name] => {
                if !in_vertex {
                    continue;
                }
                if vertex_count.is_none() {
                    return Err(parse_err(line_no, &line, "property before element"));
                }
                let field = Field::from_name(name)
                    .ok_or_else(|| PcioError::Unsupported(format!("vertex property '{name}'")))?;
                let type_ok = if field.is_color() {
                    matches!(*ty, "uchar" | "uint8")
                } else {
                    matches!(*ty, "float" | "float32")
                };
                if !type_ok {
                    return Err(PcioError::Unsupported(format!(
                        "type '{ty}' for property '{name}'"
                    )));
                }
                if fields.contains(&field) {
                    return Err(parse_err(line_no, &line, "duplicate property"));
                }
                fields.push(field);
            }
            ["property", ..] => return Err(parse_err(line_no, &line, "malformed property line")),
            ["end_header"] => break,
            _ => return Err(parse_err(line_no, &line, "unrecognized header line")),
        }
    }

    let format = format.ok_or_else(|| parse_err(line_no, "end_header", "missing format line"))?;
    let vertex_count =
        vertex_count.ok_or_else(|| parse_err(line_no, "end_header", "missing vertex element"))?;
    for required in [Field::X, Field::Y, Field::Z, Field::Red, Field::Green, Field::Blue] {
        if !fields.contains(&required) {
            return Err(parse_err(
                line_no,
                "end_header",
                &format!("missing required property {required:?}"),
            ));
        }
    }
    let normal_count = [Field::Nx, Field::Ny, Field::Nz]
        .iter()
        .filter(|f| fields.contains(f))
        .count();
    if normal_count != 0 && normal_count != 3 {
        return Err(parse_err(line_no, "end_header", "partial normal properties"));
    }
    Ok(PlyHeader {
        format,
        vertex_count,
        fields,
        has_normals: normal_count == 3,
        lines: line_no,
    })
}

#[derive(Default)]
struct RawVertex {
    pos: [f32; 3],
    rgb: [u8; 3],
    nrm: [f32; 3],
}

impl RawVertex {
    fn set_float(&mut self, f: Field, v: f32) {
        match f {
            Field::X => self.pos[0] = v,
            Field::Y => self.pos[1] = v,
            Field::Z => self.pos[2] = v,
            Field::Nx => self.nrm[0] = v,
            Field::Ny => self.nrm[1] = v,
            Field::Nz => self.nrm[2] = v,
            _ => unreachable!(),
        }
    }

    fn set_color(&mut self, f: Field, v: u8) {
        match f {
            Field::Red => self.rgb[0] = v,
            Field::Green => self.rgb[1] = v,
            Field::Blue => self.rgb[2] = v,
            _ => unreachable!(),
        }
    }

    fn into_point(self, has_normals: bool) -> Point {
        let position = Vec3::new(self.pos[0] as f64, self.pos[1] as f64, self.pos[2] as f64);
        let color = Vec3::new(self.rgb[0] as f64, self.rgb[1] as f64, self.rgb[2] as f64) / 255.0;
        let mut p = Point::new(position, color);
        if has_normals {
            let n = Vec3::new(self.nrm[0] as f64, self.nrm[1] as f64, self.nrm[2] as f64);
            let len = n.norm();
            // Zero normals are treated as absent; stored float normals are
            // rarely unit to 1e-6, so they are renormalized.
            if len > 1e-12 && len.is_finite() {
                p.normal = Some(n / len);
            }
        }
        p
    }
}

/// Reads an ASCII or binary little-endian PLY point cloud.
pub fn load_ply(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|source| PcioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_ply(BufReader::new(file))
}

pub fn read_ply(mut reader: impl BufRead) -> Result<PointCloud> {
    let header = read_header(&mut reader)?;
    if header.vertex_count == 0 {
        return Err(PcioError::Empty);
    }
    let mut points = Vec::with_capacity(header.vertex_count);
    match header.format {
        PlyFormat::Ascii => {
            let mut line = String::new();
            let mut line_no = header.lines;
            while points.len() < header.vertex_count {
                line.clear();
                let n = reader.read_line(&mut line).map_err(|e| PcioError::Parse {
                    line: line_no + 1,
                    message: e.to_string(),
                })?;
                line_no += 1;
                if n == 0 {
                    return Err(parse_err(
                        line_no,
                        "",
                        &format!("file ends after {} of {} vertices", points.len(), header.vertex_count),
                    ));
                }
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                let tokens: Vec<&str> = trimmed.split_whitespace().collect();
                if tokens.len() != header.fields.len() {
                    return Err(parse_err(line_no, trimmed, "wrong number of values"));
                }
                let mut v = RawVertex::default();
                for (&field, tok) in header.fields.iter().zip(&tokens) {
                    if field.is_color() {
                        let c: u8 = tok
                            .parse()
                            .map_err(|_| parse_err(line_no, trimmed, "invalid uchar value"))?;
                        v.set_color(field, c);
                    } else {
                        let x: f32 = tok
                            .parse()
                            .map_err(|_| parse_err(line_no, trimmed, "invalid float value"))?;
                        v.set_float(field, x);
                    }
                }
                points.push(v.into_point(header.has_normals));
            }
        }
        PlyFormat::BinaryLe => {
            let stride: usize = header
                .fields
                .iter()
                .map(|f| if f.is_color() { 1 } else { 4 })
                .sum();
            let mut body = vec![0u8; stride * header.vertex_count];
            reader.read_exact(&mut body).map_err(|_| PcioError::Parse {
                line: header.lines + 1,
                message: format!(
                    "binary body truncated: expected {} bytes for {} vertices",
                    body.len(),
                    header.vertex_count
                ),
            })?;
            for rec in body.chunks_exact(stride) {
                let mut v = RawVertex::default();
                let mut off = 0;
                for &field in &header.fields {
                    if field.is_color() {
                        v.set_color(field, rec[off]);
                        off += 1;
                    } else {
                        let bytes = [rec[off], rec[off + 1], rec[off + 2], rec[off + 3]];
                        v.set_float(field, f32::from_le_bytes(bytes));
                        off += 4;
                    }
                }
                points.push(v.into_point(header.has_normals));
            }
        }
    }
    PointCloud::new(points)
}

/// Writes `cloud` as PLY. Positions and normals are stored as float32,
/// colors as the nearest uint8. Normals are written only when every point has one.
pub fn save_ply(cloud: &PointCloud, path: &Path, binary: bool) -> Result<()> {
    let io_err = |source| PcioError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    write_ply(cloud, &mut w, binary).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn write_ply(cloud: &PointCloud, w: &mut impl Write, binary: bool) -> std::io::Result<()> {
    let normals = cloud.has_normals();
    writeln!(w, "ply")?;
    writeln!(
        w,
        "format {} 1.0",
        if binary { "binary_little_endian" } else { "ascii" }
    )?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for name in ["x", "y", "z"] {
        writeln!(w, "property float {name}")?;
    }
    for name in ["red", "green", "blue"] {
        writeln!(w, "property uchar {name}")?;
    }
    if normals {
        for name in ["nx", "ny", "nz"] {
            writeln!(w, "property float {name}")?;
        }
    }
    writeln!(w, "end_header")?;
    for p in cloud.points() {
        let pos = p.position.map(|c| c as f32);
        let rgb = p.color.map(crate::imagebuf::unit_to_u8);
        let nrm = p.normal.unwrap_or_else(Vec3::zeros).map(|c| c as f32);
        if binary {
            for c in pos.iter() {
                w.write_all(&c.to_le_bytes())?;
            }
            w.write_all(rgb.as_slice())?;
            if normals {
                for c in nrm.iter() {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
        } else {
            write!(w, "{} {} {} {} {} {}", pos.x, pos.y, pos.z, rgb.x, rgb.y, rgb.z)?;
            if normals {
                write!(w, " {} {} {}", nrm.x, nrm.y, nrm.z)?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Scene transforms
// ---------------------------------------------------------------------------

/// `normalized = (world - center) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitBoxTransform {
    pub scale: f64,
    pub center: Vec3,
}

impl UnitBoxTransform {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.center) * self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p / self.scale + self.center
    }

    pub fn invert_cloud(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map_positions(|p| self.invert(p))
    }
}

/// Centers the cloud at the origin and scales it uniformly so its largest
/// bounding-box side spans `[-1, 1]`.
pub fn normalize_to_unit_box(cloud: &PointCloud) -> Result<(PointCloud, UnitBoxTransform)> {
    if cloud.is_empty() {
        return Err(PcioError::Empty);
    }
    let extent = cloud.bbox().extent().max();
    if extent <= 0.0 {
        return Err(PcioError::Degenerate("all points coincide".into()));
    }
    let t = UnitBoxTransform {
        scale: 2.0 / extent,
        center: cloud.bbox().center(),
    };
    let out = cloud.map_positions(|p| {
        // Rounding can push the extreme coordinates a hair past the box.
        t.apply(p).map(|c| c.clamp(-1.0, 1.0))
    });
    Ok((out, t))
}

/// Fixed-point quantization of a normalized cloud.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizationSpec {
    pub scale: f64,
    pub bit_depth: u32,
}

impl QuantizationSpec {
    pub fn new(scale: f64, bit_depth: u32) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(PcioError::Parameter(format!("quantization scale {scale} must be positive")));
        }
        if bit_depth == 0 || bit_depth > 31 {
            return Err(PcioError::Parameter(format!("bit depth {bit_depth} out of range")));
        }
        if ((1u64 << bit_depth) as f64) < 2.0 * scale {
            return Err(PcioError::Parameter(format!(
                "{bit_depth} bits cannot hold [-1, 1] at scale {scale}"
            )));
        }
        Ok(Self { scale, bit_depth })
    }

    /// 10-bit integers over the normalized box, scale 512.
    pub fn ten_bit() -> Self {
        Self {
            scale: 512.0,
            bit_depth: 10,
        }
    }
}

impl Default for QuantizationSpec {
    fn default() -> Self {
        Self::ten_bit()
    }
}

/// Rounds every coordinate to the `1/scale` lattice. Ties round away from
/// zero. Coincident outputs are kept.
pub fn quantize(cloud: &PointCloud, spec: &QuantizationSpec) -> Result<PointCloud> {
    if let Some((index, p)) = cloud
        .points()
        .iter()
        .enumerate()
        .find(|(_, p)| p.position.iter().any(|c| !(-1.0..=1.0).contains(c)))
    {
        return Err(PcioError::OutOfRange {
            index,
            position: [p.position.x, p.position.y, p.position.z],
        });
    }
    let s = spec.scale;
    Ok(cloud.map_positions(|p| p.map(|c| (c * s).round() / s)))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.25..=1.0).contains(&alpha) {
        return Err(PcioError::Parameter(format!("alpha {alpha} outside [0.25, 1]")));
    }
    Ok(())
}

/// Lattice downsampling `x -> round(alpha * x) / alpha` on integer-lattice
/// coordinates (ties away from zero).
pub fn downsample_lattice(cloud: &PointCloud, alpha: f64) -> Result<PointCloud> {
    check_alpha(alpha)?;
    Ok(cloud.map_positions(|p| p.map(|c| (alpha * c).round() / alpha)))
}

/// [`downsample_lattice`] for a cloud quantized with `spec`: coordinates are
/// lifted to integer lattice units, downsampled and scaled back.
pub fn downsample_quantized(cloud: &PointCloud, alpha: f64, spec: &QuantizationSpec) -> Result<PointCloud> {
    check_alpha(alpha)?;
    let s = spec.scale;
    Ok(cloud.map_positions(|p| p.map(|c| (alpha * (c * s)).round() / alpha / s)))
}

/// Keeps `round(beta * N)` points chosen uniformly without replacement,
/// in their original order.
pub fn subsample_random(cloud: &PointCloud, beta: f64, seed: u64) -> Result<PointCloud> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(PcioError::Parameter(format!("beta {beta} outside (0, 1]")));
    }
    let n = cloud.len();
    let keep = ((beta * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    Ok(PointCloud::new_unchecked(
        idx.into_iter().map(|i| cloud.points[i]).collect(),
    ))
}
