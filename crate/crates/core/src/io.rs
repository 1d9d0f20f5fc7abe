//! File formats: MRC/MRCS maps and stacks, particle metadata CSV, PDB
//! coordinates, Gaussian model JSON, key/value configs and SVG scatter plots.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::AtomModel;
use crate::error::{Error, Result};
use crate::model::{Gaussian, GaussianModel, Image, Pose, Volume};
use crate::optics::CtfParams;

const MRC_HEADER_BYTES: usize = 1024;

/// Fields of the 1024-byte MRC header that this crate reads and writes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrcHeader {
    pub nx: i32,
    pub ny: i32,
    pub nz: i32,
    pub mode: i32,
    /// Cell dimensions in Å.
    pub cell: [f32; 3],
    pub origin: [f32; 3],
    /// 0 for image stacks, 1 for volumes.
    pub space_group: i32,
    pub extended_bytes: i32,
}

impl MrcHeader {
    pub fn voxel_size(&self) -> f64 {
        if self.nx > 0 && self.cell[0] > 0.0 {
            f64::from(self.cell[0]) / f64::from(self.nx)
        } else {
            1.0
        }
    }

    fn len(&self) -> usize {
        self.nx as usize * self.ny as usize * self.nz as usize
    }
}

/// Raw contents of a mode-2 MRC file (x fastest, then y, then z/section).
#[derive(Debug, Clone, PartialEq)]
pub struct MrcData {
    pub header: MrcHeader,
    pub data: Vec<f32>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes a little-endian mode-2 file.
pub fn write_mrc(path: &Path, nx: usize, ny: usize, nz: usize, voxel_size: f64, space_group: i32, data: &[f32]) -> Result<()> {
    if data.len() != nx * ny * nz {
        return Err(Error::input(format!(
            "MRC payload has {} values, dimensions give {}",
            data.len(),
            nx * ny * nz
        )));
    }
    let to_i32 = |v: usize| i32::try_from(v).map_err(|_| Error::input("MRC dimension too large"));
    let (nx32, ny32, nz32) = (to_i32(nx)?, to_i32(ny)?, to_i32(nz)?);

    let (mut lo, mut hi, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += f64::from(v);
    }
    let n = data.len().max(1) as f64;
    let mean = sum / n;
    let rms = (data.iter().map(|v| (f64::from(*v) - mean).powi(2)).sum::<f64>() / n).sqrt();
    if data.is_empty() {
        lo = 0.0;
        hi = 0.0;
    }

    let mut h = Vec::with_capacity(MRC_HEADER_BYTES);
    for v in [nx32, ny32, nz32, 2, 0, 0, 0, nx32, ny32, nz32] {
        h.write_i32::<LittleEndian>(v).expect("vec write");
    }
    for d in [nx, ny, nz] {
        h.write_f32::<LittleEndian>((d as f64 * voxel_size) as f32).expect("vec write");
    }
    for _ in 0..3 {
        h.write_f32::<LittleEndian>(90.0).expect("vec write");
    }
    for v in [1, 2, 3] {
        h.write_i32::<LittleEndian>(v).expect("vec write");
    }
    for v in [lo, hi, mean as f32] {
        h.write_f32::<LittleEndian>(v).expect("vec write");
    }
    h.write_i32::<LittleEndian>(space_group).expect("vec write");
    h.write_i32::<LittleEndian>(0).expect("vec write");
    h.resize(196, 0);
    for _ in 0..3 {
        h.write_f32::<LittleEndian>(0.0).expect("vec write");
    }
    h.extend_from_slice(b"MAP ");
    h.extend_from_slice(&[0x44, 0x44, 0x00, 0x00]);
    h.write_f32::<LittleEndian>(rms as f32).expect("vec write");
    h.write_i32::<LittleEndian>(0).expect("vec write");
    h.resize(MRC_HEADER_BYTES, 0);

    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&h).map_err(io_err(path))?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.write_f32::<LittleEndian>(v).expect("vec write");
    }
    w.write_all(&buf).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Reads a mode-2 MRC/MRCS file.
pub fn read_mrc(path: &Path) -> Result<MrcData> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(io_err(path))?;
    parse_mrc(path, &bytes)
}

fn parse_mrc(path: &Path, bytes: &[u8]) -> Result<MrcData> {
    if bytes.len() < MRC_HEADER_BYTES {
        return Err(Error::format(path, format!("header truncated: {} of 1024 bytes", bytes.len())));
    }
    let word = |i: usize| i32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let float = |i: usize| f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if &bytes[208..212] != b"MAP " {
        return Err(Error::format(path, "missing 'MAP ' stamp"));
    }
    let header = MrcHeader {
        nx: word(0),
        ny: word(1),
        nz: word(2),
        mode: word(3),
        cell: [float(10), float(11), float(12)],
        origin: [float(49), float(50), float(51)],
        space_group: word(22),
        extended_bytes: word(23),
    };
    if header.mode != 2 {
        return Err(Error::format(path, format!("unsupported mode {} (only mode 2 is supported)", header.mode)));
    }
    for (name, v) in [("nx", header.nx), ("ny", header.ny), ("nz", header.nz)] {
        if v <= 0 {
            return Err(Error::format(path, format!("{name} = {v} must be positive")));
        }
    }
    if header.extended_bytes < 0 {
        return Err(Error::format(path, "nsymbt must be >= 0"));
    }
    let start = MRC_HEADER_BYTES + header.extended_bytes as usize;
    let need = header.len() * 4;
    let available = bytes.len().saturating_sub(start);
    if available < need {
        return Err(Error::format(
            path,
            format!(
                "payload truncated: nx*ny*nz = {} needs {need} bytes, found {available}",
                header.len()
            ),
        ));
    }
    let mut rdr = &bytes[start..start + need];
    let mut data = vec![0f32; header.len()];
    rdr.read_f32_into::<LittleEndian>(&mut data).map_err(io_err(path))?;
    Ok(MrcData { header, data })
}

pub fn write_volume(path: &Path, volume: &Volume<f64>) -> Result<()> {
    let data: Vec<f32> = volume.data.iter().map(|v| *v as f32).collect();
    let n = volume.size;
    write_mrc(path, n, n, n, volume.pixel_size, 1, &data)
}

pub fn read_volume(path: &Path) -> Result<Volume<f64>> {
    let m = read_mrc(path)?;
    let h = m.header;
    if h.nx != h.ny || h.ny != h.nz {
        return Err(Error::format(path, format!("volume is {}x{}x{}, expected a cube", h.nx, h.ny, h.nz)));
    }
    Volume::from_vec(
        h.nx as usize,
        h.voxel_size(),
        m.data.into_iter().map(f64::from).collect(),
    )
}

pub fn write_stack(path: &Path, images: &[Image<f64>]) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::input("empty image stack"))?;
    if images.iter().any(|i| !i.same_shape(first)) {
        return Err(Error::input("stack images differ in shape"));
    }
    let data: Vec<f32> = images.iter().flat_map(|i| i.data.iter().map(|v| *v as f32)).collect();
    write_mrc(path, first.width, first.height, images.len(), first.pixel_size, 0, &data)
}

pub fn read_stack(path: &Path) -> Result<Vec<Image<f64>>> {
    let m = read_mrc(path)?;
    let (w, h) = (m.header.nx as usize, m.header.ny as usize);
    let px = m.header.voxel_size();
    m.data
        .chunks(w * h)
        .map(|c| Image::from_vec(h, w, px, c.iter().map(|v| f64::from(*v)).collect()))
        .collect()
}

fn default_true() -> bool {
    true
}

/// One particle in the metadata table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRow {
    pub particle_index: usize,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub shift_x_px: f64,
    pub shift_y_px: f64,
    #[serde(rename = "defocus_u_A")]
    pub defocus_u_a: f64,
    #[serde(rename = "defocus_v_A")]
    pub defocus_v_a: f64,
    pub astig_angle_deg: f64,
    pub voltage_kv: f64,
    pub cs_mm: f64,
    pub amplitude_contrast: f64,
    #[serde(default = "default_true")]
    pub ctf_enabled: bool,
    #[serde(default)]
    pub gt_label: Option<usize>,
    #[serde(default)]
    pub gt_angle_rad: Option<f64>,
}

impl MetaRow {
    pub fn new(index: usize, pose: &Pose<f64>, ctf: &CtfParams) -> Self {
        let q = pose.to_quaternion();
        MetaRow {
            particle_index: index,
            qw: q[0],
            qx: q[1],
            qy: q[2],
            qz: q[3],
            shift_x_px: pose.shift[0],
            shift_y_px: pose.shift[1],
            defocus_u_a: ctf.defocus_u_a,
            defocus_v_a: ctf.defocus_v_a,
            astig_angle_deg: ctf.astigmatism_angle_deg,
            voltage_kv: ctf.voltage_kv,
            cs_mm: ctf.cs_mm,
            amplitude_contrast: ctf.amplitude_contrast,
            ctf_enabled: ctf.enabled,
            gt_label: None,
            gt_angle_rad: None,
        }
    }

    pub fn quaternion(&self) -> [f64; 4] {
        [self.qw, self.qx, self.qy, self.qz]
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.quaternion();
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::input(format!(
                "particle {}: quaternion norm {norm} is not 1",
                self.particle_index
            )));
        }
        Ok(())
    }

    pub fn pose(&self) -> Result<Pose<f64>> {
        self.validate()?;
        Pose::from_quaternion(self.quaternion(), [self.shift_x_px, self.shift_y_px])
    }

    pub fn ctf(&self) -> CtfParams {
        CtfParams {
            enabled: self.ctf_enabled,
            voltage_kv: self.voltage_kv,
            cs_mm: self.cs_mm,
            amplitude_contrast: self.amplitude_contrast,
            defocus_u_a: self.defocus_u_a,
            defocus_v_a: self.defocus_v_a,
            astigmatism_angle_deg: self.astig_angle_deg,
            ..CtfParams::default()
        }
    }
}

pub fn write_meta(path: &Path, rows: &[MetaRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_meta(path: &Path) -> Result<Vec<MetaRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows = Vec::new();
    for (line, rec) in r.deserialize::<MetaRow>().enumerate() {
        let row = rec.map_err(|e| Error::format(path, format!("row {}: {e}", line + 1)))?;
        row.validate().map_err(|e| Error::format(path, e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}

/// `x, y, z` in Å from ATOM/HETATM records (columns 31-54).
pub fn parse_pdb_coords(path: &Path, text: &str) -> Result<AtomModel> {
    let mut coords = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if !(line.starts_with("ATOM") || line.starts_with("HETATM")) {
            continue;
        }
        let field = |a: usize, b: usize| -> Result<f64> {
            line.get(a..b)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::format(path, format!("line {}: bad coordinate in columns {}-{}", i + 1, a + 1, b)))
        };
        coords.push([field(30, 38)?, field(38, 46)?, field(46, 54)?]);
    }
    Ok(AtomModel::new(coords))
}

pub fn read_pdb_coords(path: &Path) -> Result<AtomModel> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_pdb_coords(path, &text)
}

/// Copies `template`, replacing the coordinate columns with `atoms`.
pub fn format_pdb_coords(template_path: &Path, template: &str, atoms: &AtomModel) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut k = 0;
    for line in template.lines() {
        if line.starts_with("ATOM") || line.starts_with("HETATM") {
            let c = atoms.coords.get(k).ok_or_else(|| {
                Error::input(format!("template has more atoms than the model ({})", atoms.coords.len()))
            })?;
            if line.len() < 54 || !line.is_char_boundary(30) || !line.is_char_boundary(54) {
                return Err(Error::format(template_path, format!("atom record too short: {line:?}")));
            }
            let _ = write!(out, "{}{:8.3}{:8.3}{:8.3}{}", &line[..30], c[0], c[1], c[2], &line[54..]);
            k += 1;
        } else {
            out.push_str(line);
        }
        out.push('\n');
    }
    if k != atoms.coords.len() {
        return Err(Error::input(format!(
            "template has {k} atoms, model has {}",
            atoms.coords.len()
        )));
    }
    Ok(out)
}

pub fn write_pdb_coords(path: &Path, atoms: &AtomModel, template: &Path) -> Result<()> {
    let text = std::fs::read_to_string(template).map_err(io_err(template))?;
    let out = format_pdb_coords(template, &text, atoms)?;
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// On-disk form of a [`GaussianModel`]: rows of `[density, scale, x, y, z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub box_size: usize,
    pub pixel_size: f64,
    pub gaussians: Vec<[f64; 5]>,
}

impl ModelFile {
    pub fn from_model(model: &GaussianModel<f64>) -> Self {
        ModelFile {
            box_size: model.box_size(),
            pixel_size: model.pixel_size(),
            gaussians: model
                .gaussians()
                .iter()
                .map(|g| [g.density, g.scale, g.position[0], g.position[1], g.position[2]])
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<GaussianModel<f64>> {
        let gs = self
            .gaussians
            .iter()
            .map(|r| Gaussian::new(r[0], r[1], [r[2], r[3], r[4]]))
            .collect::<Result<Vec<_>>>()?;
        GaussianModel::new(gs, self.box_size, self.pixel_size)
    }
}

pub fn write_model(path: &Path, model: &GaussianModel<f64>) -> Result<()> {
    write_json(path, &ModelFile::from_model(model))
}

pub fn read_model(path: &Path) -> Result<GaussianModel<f64>> {
    read_json::<ModelFile>(path)?
        .to_model()
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Files written by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub box_size: usize,
    pub pixel_size: f64,
    pub n_particles: usize,
    pub stack: PathBuf,
    pub metadata: PathBuf,
    pub gt_volumes: Vec<PathBuf>,
    pub consensus_volume: PathBuf,
    pub gt_models: Vec<PathBuf>,
    pub consensus_model: PathBuf,
    pub subunit_mask: Option<PathBuf>,
}

impl DatasetManifest {
    /// Resolves a manifest-relative path.
    pub fn resolve(manifest_path: &Path, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(rel)
        }
    }
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Writes rows of numbers under a header.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(header).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::input("table row width differs from header"));
        }
        w.write_record(r.iter().map(|v| v.to_string()))
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a numeric table written by [`write_table`].
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = r
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok((header, rows))
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Minimal SVG scatter plot, points coloured by label.
pub fn scatter_svg(points: &[[f64; 2]], labels: Option<&[usize]>, title: &str) -> String {
    let (w, h, m) = (480.0, 480.0, 40.0);
    let finite = points.iter().filter(|p| p[0].is_finite() && p[1].is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in finite {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let sx = if x1 > x0 { (w - 2.0 * m) / (x1 - x0) } else { 1.0 };
    let sy = if y1 > y0 { (h - 2.0 * m) / (y1 - y0) } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let escaped = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{escaped}</text>"#, w / 2.0);
    for (i, p) in points.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite()) {
            continue;
        }
        let cx = m + (p[0] - x0) * sx;
        let cy = h - m - (p[1] - y0) * sy;
        let colour = PALETTE[labels.and_then(|l| l.get(i)).copied().unwrap_or(0) % PALETTE.len()];
        let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="2" fill="{colour}" fill-opacity="0.7"/>"#);
    }
    s.push_str("</svg>\n");
    s
}
