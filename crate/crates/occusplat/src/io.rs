//! File formats: the occupancy-grid binary, PLY point clouds and
//! double-precision checkpoint PLYs, PNG images, JSON manifests, and the
//! metrics CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{FourierShCoefficients, Pose, Quat, RotationConvention, ShCoefficients};
use crate::image_buf::Image;
use crate::occupancy::{OccupancyGrid, PointSource, SemanticPoint, SemanticPointCloud};
use crate::optim::MetricsRow;
use crate::render::Camera;
use crate::scene::{SceneModel, StreetGaussians, VehicleModel};

const GRID_MAGIC: &[u8; 4] = b"OGG1";

// ---------------------------------------------------------------------------
// Occupancy grid binary
// ---------------------------------------------------------------------------

/// Binary layout: magic `OGG1`; u32 H, W, D, N; f32 origin xyz, cell size;
/// u32 frame index; then per cell (i fastest) one f32 occupancy followed by
/// N f32 class probabilities. All little-endian.
pub fn write_grid(path: &Path, grid: &OccupancyGrid) -> Result<()> {
    grid.validate()?;
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let io_err = |e| Error::io(path, e);
    w.write_all(GRID_MAGIC).map_err(io_err)?;
    for v in [grid.dims.0, grid.dims.1, grid.dims.2, grid.num_classes] {
        w.write_u32::<LittleEndian>(v as u32).map_err(io_err)?;
    }
    for v in [grid.origin.x, grid.origin.y, grid.origin.z, grid.cell_size] {
        w.write_f32::<LittleEndian>(v as f32).map_err(io_err)?;
    }
    w.write_u32::<LittleEndian>(grid.frame_index as u32).map_err(io_err)?;
    for c in 0..grid.num_cells() {
        w.write_f32::<LittleEndian>(grid.occupancy[c]).map_err(io_err)?;
        for n in 0..grid.num_classes {
            w.write_f32::<LittleEndian>(grid.class_probs[c * grid.num_classes + n])
                .map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_grid(path: &Path) -> Result<OccupancyGrid> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let io_err = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != GRID_MAGIC {
        return Err(Error::format(path, "bad magic, expected OGG1", 0));
    }
    let h = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let w = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let n = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    if h == 0 || w == 0 || d == 0 || n == 0 {
        return Err(Error::format(path, "zero grid dimension", 4));
    }
    if h * w * d > 100_000_000 {
        return Err(Error::format(path, "grid too large", 4));
    }
    let ox = r.read_f32::<LittleEndian>().map_err(io_err)? as f64;
    let oy = r.read_f32::<LittleEndian>().map_err(io_err)? as f64;
    let oz = r.read_f32::<LittleEndian>().map_err(io_err)? as f64;
    let cell = r.read_f32::<LittleEndian>().map_err(io_err)? as f64;
    let frame = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let cells = h * w * d;
    let mut grid = OccupancyGrid::empty((h, w, d), Vector3::new(ox, oy, oz), cell, n, frame);
    for c in 0..cells {
        grid.occupancy[c] = r.read_f32::<LittleEndian>().map_err(io_err)?;
        for cl in 0..n {
            grid.class_probs[c * n + cl] = r.read_f32::<LittleEndian>().map_err(io_err)?;
        }
    }
    grid.validate()?;
    Ok(grid)
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let c = img.get(x, y);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (c.x.clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c.y.clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c.z.clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }
    buf.save(path)
        .map_err(|e| Error::format(path, format!("png encode: {}", e), 0))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("png decode: {}", e), 0))?
        .to_rgb8();
    let mut out = Image::new(img.width() as usize, img.height() as usize);
    for (x, y, p) in img.enumerate_pixels() {
        out.set(
            x as usize,
            y as usize,
            Vector3::new(
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ),
        );
    }
    Ok(out)
}

/// Binary masks stored as 8-bit grayscale PNG (0 or 255).
pub fn write_mask_png(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    let mut buf = image::GrayImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            buf.put_pixel(x as u32, y as u32, image::Luma([if mask[y * width + x] { 255 } else { 0 }]));
        }
    }
    buf.save(path)
        .map_err(|e| Error::format(path, format!("png encode: {}", e), 0))
}

pub fn read_mask_png(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("png decode: {}", e), 0))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask = img.pixels().map(|p| p[0] >= 128).collect();
    Ok((mask, w, h))
}

// ---------------------------------------------------------------------------
// PLY
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyType {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl PlyType {
    fn parse(s: &str) -> Option<PlyType> {
        match s {
            "float" | "float32" => Some(PlyType::F32),
            "double" | "float64" => Some(PlyType::F64),
            "uchar" | "uint8" => Some(PlyType::U8),
            "int" | "int32" => Some(PlyType::I32),
            "uint" | "uint32" => Some(PlyType::U32),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            PlyType::U8 => 1,
            PlyType::F32 | PlyType::I32 | PlyType::U32 => 4,
            PlyType::F64 => 8,
        }
    }
}

struct PlyHeader {
    binary: bool,
    count: usize,
    props: Vec<(String, PlyType)>,
    header_len: u64,
}

fn parse_ply_header(path: &Path, data: &[u8]) -> Result<PlyHeader> {
    let mut lines = Vec::new();
    let mut pos = 0usize;
    loop {
        let end = data[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "unterminated header", pos as u64))?;
        let line = std::str::from_utf8(&data[pos..pos + end])
            .map_err(|_| Error::format(path, "non-utf8 header", pos as u64))?
            .trim_end_matches('\r')
            .to_string();
        pos += end + 1;
        let done = line == "end_header";
        lines.push(line);
        if done {
            break;
        }
    }
    if lines.first().map(|s| s.as_str()) != Some("ply") {
        return Err(Error::format(path, "missing ply magic", 0));
    }
    let mut binary = None;
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    for line in &lines[1..] {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("format") => match it.next() {
                Some("ascii") => binary = Some(false),
                Some("binary_little_endian") => binary = Some(true),
                other => {
                    return Err(Error::format(
                        path,
                        format!("unsupported format {:?}", other),
                        0,
                    ))
                }
            },
            Some("element") => {
                let name = it.next().unwrap_or("");
                in_vertex = name == "vertex";
                if in_vertex {
                    count = it.next().and_then(|s| s.parse::<usize>().ok());
                }
            }
            Some("property") if in_vertex => {
                let ty = it.next().unwrap_or("");
                if ty == "list" {
                    return Err(Error::format(path, "list vertex properties unsupported", 0));
                }
                let ty = PlyType::parse(ty)
                    .ok_or_else(|| Error::format(path, format!("unknown type {}", ty), 0))?;
                let name = it
                    .next()
                    .ok_or_else(|| Error::format(path, "property without name", 0))?;
                props.push((name.to_string(), ty));
            }
            _ => {}
        }
    }
    Ok(PlyHeader {
        binary: binary.ok_or_else(|| Error::format(path, "missing format line", 0))?,
        count: count.ok_or_else(|| Error::format(path, "missing vertex element", 0))?,
        props,
        header_len: pos as u64,
    })
}

/// Read every vertex property as f64 (row-major: `count` rows of
/// `props.len()` values).
fn read_ply_table(path: &Path) -> Result<(Vec<String>, Vec<f64>, usize)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_ply_header(path, &data)?;
    let names: Vec<String> = header.props.iter().map(|(n, _)| n.clone()).collect();
    let mut values = Vec::with_capacity(header.count * names.len());
    if header.binary {
        let row = header.props.iter().map(|(_, t)| t.size()).sum::<usize>();
        let body = &data[header.header_len as usize..];
        if body.len() < row * header.count {
            return Err(Error::format(path, "truncated vertex data", header.header_len));
        }
        let mut cur = body;
        for _ in 0..header.count {
            for (_, ty) in &header.props {
                let v = match ty {
                    PlyType::F32 => cur.read_f32::<LittleEndian>().unwrap() as f64,
                    PlyType::F64 => cur.read_f64::<LittleEndian>().unwrap(),
                    PlyType::U8 => cur.read_u8().unwrap() as f64,
                    PlyType::I32 => cur.read_i32::<LittleEndian>().unwrap() as f64,
                    PlyType::U32 => cur.read_u32::<LittleEndian>().unwrap() as f64,
                };
                values.push(v);
            }
        }
    } else {
        let body = &data[header.header_len as usize..];
        let text = std::str::from_utf8(body)
            .map_err(|_| Error::format(path, "non-utf8 ascii body", header.header_len))?;
        let mut it = text.split_whitespace();
        for _ in 0..header.count {
            for _ in 0..header.props.len() {
                let tok = it
                    .next()
                    .ok_or_else(|| Error::format(path, "truncated ascii vertex data", header.header_len))?;
                values.push(tok.parse::<f64>().map_err(|_| {
                    Error::format(path, format!("bad ascii value {:?}", tok), header.header_len)
                })?);
            }
        }
    }
    Ok((names, values, header.count))
}

/// Load a PLY as a point cloud: positions required, `red/green/blue`
/// (0-255) and `label` picked up when present.
pub fn read_ply_points(path: &Path) -> Result<SemanticPointCloud> {
    let (names, values, count) = read_ply_table(path)?;
    let col = |n: &str| names.iter().position(|x| x == n);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::format(path, "missing x/y/z properties", 0)),
    };
    let rgb = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some((r, g, b)),
        _ => None,
    };
    let label = col("label");
    let stride = names.len();
    let mut cloud = SemanticPointCloud::default();
    for i in 0..count {
        let row = &values[i * stride..(i + 1) * stride];
        cloud.points.push(SemanticPoint {
            position: Vector3::new(row[ix], row[iy], row[iz]),
            color: rgb.map(|(r, g, b)| Vector3::new(row[r] / 255.0, row[g] / 255.0, row[b] / 255.0)),
            label: label.map(|l| row[l] as u32),
            source: PointSource::Sfm,
        });
    }
    Ok(cloud)
}

/// Write a binary little-endian PLY where every property is a double.
fn write_ply_doubles(path: &Path, names: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let io_err = |e| Error::io(path, e);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        rows.len()
    )
    .map_err(io_err)?;
    for n in names {
        writeln!(w, "property double {}", n).map_err(io_err)?;
    }
    writeln!(w, "end_header").map_err(io_err)?;
    for row in rows {
        debug_assert_eq!(row.len(), names.len());
        for v in row {
            w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation quaternion, `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl CameraJson {
    pub fn from_camera(c: &Camera) -> Self {
        CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: c.world_to_camera.rotation.as_array(),
            translation: c.world_to_camera.translation.into(),
            near: c.near,
            far: c.far,
        }
    }

    pub fn to_camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            world_to_camera: Pose::new(
                Quat::from_array(self.rotation),
                Vector3::from(self.translation),
            ),
            near: self.near,
            far: self.far,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FrameEntry {
    pub frame: usize,
    pub camera: CameraJson,
    /// Paths relative to the manifest directory.
    pub image: String,
    pub grid: Option<String>,
    pub vehicle_mask: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub frames: Vec<FrameEntry>,
    pub num_classes: usize,
    pub vehicle_class: u32,
    pub background: [f64; 3],
    /// Optional SfM point cloud, relative path.
    #[serde(default)]
    pub sfm_points: Option<String>,
    /// Ground-truth vehicle centroids `[frame, x, y, z]`, when known.
    #[serde(default)]
    pub gt_trajectory: Option<Vec<[f64; 4]>>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

pub fn load_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    read_json(&path)
}

/// Load frames (camera + image) from a dataset directory.
pub fn load_frames(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<crate::optim::FrameSample>> {
    manifest
        .frames
        .iter()
        .map(|f| {
            Ok(crate::optim::FrameSample {
                frame: f.frame,
                camera: f.camera.to_camera(),
                image: read_png(&dir.join(&f.image))?,
            })
        })
        .collect()
}

pub fn load_grids(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<OccupancyGrid>> {
    manifest
        .frames
        .iter()
        .filter_map(|f| f.grid.as_ref())
        .map(|g| read_grid(&dir.join(g)))
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct PoseJson {
    rotation: [f64; 4],
    translation: [f64; 3],
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct VehicleMeta {
    object_id: usize,
    frozen: bool,
    semantic_logit: f64,
    sh_degree: usize,
    fourier_k: usize,
    base_poses: Vec<Option<PoseJson>>,
    delta_rot: Vec<[f64; 3]>,
    delta_trans: Vec<[f64; 3]>,
    ply: String,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ModelManifest {
    frame_count: usize,
    num_classes: usize,
    vehicle_class: u32,
    rotation_convention: String,
    street_sh_degree: usize,
    street_ply: String,
    vehicles: Vec<VehicleMeta>,
}

const MODEL_MANIFEST: &str = "model.json";

fn street_prop_names(sh_degree: usize, num_classes: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z", "log_scale_x",
        "log_scale_y", "log_scale_z", "opacity_logit"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..(sh_degree + 1) * (sh_degree + 1) {
        for c in ["r", "g", "b"] {
            names.push(format!("sh_{}_{}", i, c));
        }
    }
    for i in 0..num_classes {
        names.push(format!("semantic_{}", i));
    }
    names
}

fn vehicle_prop_names(sh_degree: usize, k: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z", "log_scale_x",
        "log_scale_y", "log_scale_z", "opacity_logit"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..(sh_degree + 1) * (sh_degree + 1) * k {
        for c in ["r", "g", "b"] {
            names.push(format!("fourier_{}_{}", i, c));
        }
    }
    names
}

/// Write a checkpoint directory: `model.json` plus double-precision binary
/// PLYs for the street and each vehicle.
pub fn save_checkpoint(dir: &Path, model: &SceneModel) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let street_sh_degree = model.street.sh.first().map(|s| s.degree).unwrap_or(0);
    let street_rows: Vec<Vec<f64>> = (0..model.street.len())
        .map(|i| {
            let mut row = Vec::new();
            row.extend_from_slice(model.street.positions[i].as_slice());
            row.extend_from_slice(&model.street.rotations[i].as_array());
            row.extend_from_slice(model.street.log_scales[i].as_slice());
            row.push(model.street.opacity_logits[i]);
            for c in &model.street.sh[i].coeffs {
                row.extend_from_slice(c.as_slice());
            }
            row.extend_from_slice(&model.street.semantic_logits[i]);
            row
        })
        .collect();
    write_ply_doubles(
        &dir.join("street.ply"),
        &street_prop_names(street_sh_degree, model.num_classes),
        &street_rows,
    )?;
    let mut vehicles = Vec::new();
    for v in &model.vehicles {
        let sh_degree = v.fourier_sh.first().map(|f| f.degree).unwrap_or(0);
        let k = v.fourier_sh.first().map(|f| f.k).unwrap_or(1);
        let ply = format!("vehicle_{}.ply", v.object_id);
        let rows: Vec<Vec<f64>> = (0..v.len())
            .map(|i| {
                let mut row = Vec::new();
                row.extend_from_slice(v.positions[i].as_slice());
                row.extend_from_slice(&v.rotations[i].as_array());
                row.extend_from_slice(v.log_scales[i].as_slice());
                row.push(v.opacity_logits[i]);
                for c in &v.fourier_sh[i].coeffs {
                    row.extend_from_slice(c.as_slice());
                }
                row
            })
            .collect();
        write_ply_doubles(&dir.join(&ply), &vehicle_prop_names(sh_degree, k), &rows)?;
        vehicles.push(VehicleMeta {
            object_id: v.object_id,
            frozen: v.frozen,
            semantic_logit: v.semantic_logit,
            sh_degree,
            fourier_k: k,
            base_poses: v
                .base_poses
                .iter()
                .map(|p| {
                    p.map(|p| PoseJson {
                        rotation: p.rotation.as_array(),
                        translation: p.translation.into(),
                    })
                })
                .collect(),
            delta_rot: v.delta_rot.iter().map(|d| (*d).into()).collect(),
            delta_trans: v.delta_trans.iter().map(|d| (*d).into()).collect(),
            ply,
        });
    }
    write_json(
        &dir.join(MODEL_MANIFEST),
        &ModelManifest {
            frame_count: model.frame_count,
            num_classes: model.num_classes,
            vehicle_class: model.vehicle_class,
            rotation_convention: match model.rotation_convention {
                RotationConvention::Composed => "composed".into(),
                RotationConvention::Literal => "literal".into(),
            },
            street_sh_degree,
            street_ply: "street.ply".into(),
            vehicles,
        },
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<SceneModel> {
    let manifest_path = dir.join(MODEL_MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest: ModelManifest = read_json(&manifest_path)?;
    let convention = match manifest.rotation_convention.as_str() {
        "composed" => RotationConvention::Composed,
        "literal" => RotationConvention::Literal,
        other => {
            return Err(Error::format(
                &manifest_path,
                format!("unknown rotation convention {:?}", other),
                0,
            ))
        }
    };
    let street_path = dir.join(&manifest.street_ply);
    let (names, values, count) = read_ply_table(&street_path)?;
    let expected = street_prop_names(manifest.street_sh_degree, manifest.num_classes);
    if names != expected {
        return Err(Error::format(&street_path, "unexpected street property layout", 0));
    }
    let stride = names.len();
    let sh_count = (manifest.street_sh_degree + 1) * (manifest.street_sh_degree + 1);
    let mut street = StreetGaussians {
        positions: Vec::with_capacity(count),
        rotations: Vec::with_capacity(count),
        log_scales: Vec::with_capacity(count),
        opacity_logits: Vec::with_capacity(count),
        sh: Vec::with_capacity(count),
        semantic_logits: Vec::with_capacity(count),
        num_classes: manifest.num_classes,
    };
    for i in 0..count {
        let row = &values[i * stride..(i + 1) * stride];
        street.positions.push(Vector3::new(row[0], row[1], row[2]));
        street.rotations.push(Quat::new(row[3], row[4], row[5], row[6]));
        street.log_scales.push(Vector3::new(row[7], row[8], row[9]));
        street.opacity_logits.push(row[10]);
        let mut sh = ShCoefficients::zeros(manifest.street_sh_degree);
        for c in 0..sh_count {
            sh.coeffs[c] = Vector3::new(row[11 + c * 3], row[12 + c * 3], row[13 + c * 3]);
        }
        street.sh.push(sh);
        street
            .semantic_logits
            .push(row[11 + sh_count * 3..11 + sh_count * 3 + manifest.num_classes].to_vec());
    }
    let mut vehicles = Vec::new();
    for meta in &manifest.vehicles {
        let path = dir.join(&meta.ply);
        let (names, values, count) = read_ply_table(&path)?;
        if names != vehicle_prop_names(meta.sh_degree, meta.fourier_k) {
            return Err(Error::format(&path, "unexpected vehicle property layout", 0));
        }
        let stride = names.len();
        let coeff_count = (meta.sh_degree + 1) * (meta.sh_degree + 1) * meta.fourier_k;
        let mut v = VehicleModel {
            object_id: meta.object_id,
            positions: Vec::with_capacity(count),
            rotations: Vec::with_capacity(count),
            log_scales: Vec::with_capacity(count),
            opacity_logits: Vec::with_capacity(count),
            fourier_sh: Vec::with_capacity(count),
            semantic_logit: meta.semantic_logit,
            base_poses: meta
                .base_poses
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| {
                        Pose::new(Quat::from_array(p.rotation), Vector3::from(p.translation))
                    })
                })
                .collect(),
            delta_rot: meta.delta_rot.iter().map(|d| Vector3::from(*d)).collect(),
            delta_trans: meta.delta_trans.iter().map(|d| Vector3::from(*d)).collect(),
            frozen: meta.frozen,
        };
        for i in 0..count {
            let row = &values[i * stride..(i + 1) * stride];
            v.positions.push(Vector3::new(row[0], row[1], row[2]));
            v.rotations.push(Quat::new(row[3], row[4], row[5], row[6]));
            v.log_scales.push(Vector3::new(row[7], row[8], row[9]));
            v.opacity_logits.push(row[10]);
            let mut f = FourierShCoefficients::zeros(meta.sh_degree, meta.fourier_k);
            for c in 0..coeff_count {
                f.coeffs[c] = Vector3::new(row[11 + c * 3], row[12 + c * 3], row[13 + c * 3]);
            }
            v.fourier_sh.push(f);
        }
        vehicles.push(v);
    }
    Ok(SceneModel {
        street,
        vehicles,
        frame_count: manifest.frame_count,
        num_classes: manifest.num_classes,
        vehicle_class: manifest.vehicle_class,
        rotation_convention: convention,
    })
}

// ---------------------------------------------------------------------------
// Tracks and metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrackJson {
    pub object_id: usize,
    pub dynamic: bool,
    /// `[frame, x, y, z]` centroids.
    pub centroids: Vec<[f64; 4]>,
}

pub fn write_tracks_json(path: &Path, tracks: &[crate::occupancy::ObjectTrack]) -> Result<()> {
    let out: Vec<TrackJson> = tracks
        .iter()
        .map(|t| TrackJson {
            object_id: t.object_id,
            dynamic: t.dynamic,
            centroids: t
                .frames
                .iter()
                .map(|f| [f.frame as f64, f.centroid.x, f.centroid.y, f.centroid.z])
                .collect(),
        })
        .collect();
    write_json(path, &out)
}

pub const METRICS_HEADER: &str = "iteration,loss,l1,dssim,psnr_holdout,gaussian_count,wall_ms";

pub fn format_metrics_row(r: &MetricsRow) -> String {
    format!(
        "{},{:.12e},{:.12e},{:.12e},{:.6},{},{}",
        r.iteration, r.loss, r.l1, r.dssim, r.psnr_holdout, r.gaussian_count, r.wall_ms
    )
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "{}", METRICS_HEADER).map_err(io_err)?;
    for r in rows {
        writeln!(w, "{}", format_metrics_row(r)).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Save a synthetic scene as an on-disk dataset directory.
pub fn save_synthetic_dataset(dir: &Path, synth: &crate::harness::SyntheticScene) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    std::fs::create_dir_all(dir.join("grids")).map_err(|e| Error::io(dir, e))?;
    std::fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for (t, cam) in synth.cameras.iter().enumerate() {
        let image = format!("images/frame_{:04}.png", t);
        let grid = format!("grids/frame_{:04}.ogg", t);
        let mask = format!("masks/frame_{:04}.png", t);
        write_png(&dir.join(&image), &synth.images[t])?;
        write_grid(&dir.join(&grid), &synth.grids[t])?;
        write_mask_png(&dir.join(&mask), &synth.vehicle_masks[t], cam.width, cam.height)?;
        frames.push(FrameEntry {
            frame: t,
            camera: CameraJson::from_camera(cam),
            image,
            grid: Some(grid),
            vehicle_mask: Some(mask),
        });
    }
    let manifest = DatasetManifest {
        frames,
        num_classes: crate::harness::SYNTH_NUM_CLASSES,
        vehicle_class: crate::harness::CLASS_VEHICLE,
        background: synth.render_opts.background,
        sfm_points: None,
        gt_trajectory: Some(
            synth
                .gt_trajectory
                .iter()
                .map(|(f, c)| [*f as f64, c.x, c.y, c.z])
                .collect(),
        ),
    };
    let path = dir.join(DATASET_MANIFEST);
    write_json(&path, &manifest)?;
    Ok(path)
}
