//! KITTI / SemanticKITTI-style sequence reading and annotation persistence.
//!
//! Expected layout under a sequence root:
//!
//! ```text
//! calib.txt              P0..P3 and Tr rows, 12 floats each
//! poses.txt              optional, 12 floats per frame (camera-0 poses)
//! velodyne/NNNNNN.bin    float32 LE records (x, y, z, intensity)
//! labels/NNNNNN.label    optional, u32 LE per point: class | instance << 16
//! image_K/NNNNNN.png     optional, passed to vision backends as bytes
//! ```

pub mod annotations;
pub mod calib;

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Matrix4};
use thiserror::Error;

use crate::geometry::{project_points, CalibratedCamera, GeometryError, Point3, PointCloud};

pub use annotations::{
    append_annotations, load_annotations, save_annotations, AnnotationRecord, Provenance, SCHEMA_VERSION,
};
pub use calib::CalibFile;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("frame {0} is not part of the sequence")]
    UnknownFrame(u32),
    #[error("unsupported schema_version {found} at line {line} (expected {expected})")]
    SchemaVersion { found: u64, expected: u64, line: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        Self::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }
}

/// Per-point ground truth, index-aligned with the frame's cloud.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruthLabels {
    pub class_ids: Vec<u16>,
    pub instance_ids: Vec<u16>,
}

impl GroundTruthLabels {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn from_raw(raw: &[u32]) -> Self {
        Self {
            class_ids: raw.iter().map(|v| (v & 0xFFFF) as u16).collect(),
            instance_ids: raw.iter().map(|v| (v >> 16) as u16).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub cloud: PointCloud,
    pub labels: Option<GroundTruthLabels>,
    /// Points removed for non-finite coordinates or zero range.
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct OpenOptions {
    /// Projection row to use, e.g. `"P2"` for the left color camera.
    pub camera_id: String,
    /// Image size; read from the first frame's PNG header when absent.
    pub image_size: Option<(u32, u32)>,
}

impl Default for OpenOptions {
    fn default() -> Self {
        Self {
            camera_id: "P2".into(),
            image_size: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceManifest {
    pub root: PathBuf,
    pub camera_id: String,
    pub frame_ids: Vec<u32>,
    pub camera: CalibratedCamera,
    pub calib: CalibFile,
    /// world←LiDAR, one per frame, when `poses.txt` is present.
    pub poses: Option<Vec<Matrix4<f64>>>,
    pub labels_dir: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
}

fn frame_name(id: u32) -> String {
    format!("{id:06}")
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))
}

/// Width and height from a PNG IHDR chunk.
pub fn png_dimensions(path: &Path) -> Result<(u32, u32), DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    const SIG: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];
    if bytes.len() < 24 || bytes[..8] != SIG || &bytes[12..16] != b"IHDR" {
        return Err(DatasetError::parse(path, 0, "not a PNG file"));
    }
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    Ok((w, h))
}

fn camera_index(camera_id: &str) -> Option<&str> {
    camera_id.strip_prefix('P').filter(|s| !s.is_empty())
}

pub fn open_sequence(root: impl AsRef<Path>, options: &OpenOptions) -> Result<SequenceManifest, DatasetError> {
    let root = root.as_ref().to_path_buf();
    let calib_path = root.join("calib.txt");
    if !calib_path.is_file() {
        return Err(DatasetError::Layout(format!("missing calibration file {}", calib_path.display())));
    }
    let calib = calib::parse_calib(&calib_path, &read_text(&calib_path)?)?;

    let velo_dir = root.join("velodyne");
    let entries = fs::read_dir(&velo_dir).map_err(|e| DatasetError::io(&velo_dir, e))?;
    let mut frame_ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| DatasetError::io(&velo_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".bin") else { continue };
        let id: u32 = stem
            .parse()
            .map_err(|_| DatasetError::Layout(format!("{}: frame name {name:?} is not numeric", velo_dir.display())))?;
        if stem != frame_name(id) {
            return Err(DatasetError::Layout(format!(
                "{}: frame name {name:?} is not zero-padded to six digits",
                velo_dir.display()
            )));
        }
        frame_ids.push(id);
    }
    frame_ids.sort_unstable();
    if let Some(w) = frame_ids.windows(2).find(|w| w[0] >= w[1]) {
        return Err(DatasetError::Layout(format!("frame ids not strictly increasing at {}", w[1])));
    }
    if frame_ids.is_empty() {
        return Err(DatasetError::Layout(format!("no frames in {}", velo_dir.display())));
    }

    // LiDAR → camera-0, tightened to an exact rotation.
    let tr = calib.rows["Tr"];
    let tr_rot: Matrix3<f64> = tr.fixed_view::<3, 3>(0, 0).into_owned();
    let tr_rot = calib::orthonormalize(&tr_rot)
        .ok_or_else(|| DatasetError::parse(&calib_path, 0, "row Tr: rotation block is not a rotation"))?;
    let tr_t = tr.column(3).into_owned();

    let proj = calib.rows.get(&options.camera_id).ok_or_else(|| {
        DatasetError::parse(&calib_path, 0, format!("missing row {}", options.camera_id))
    })?;
    let (k, baseline) = calib::split_projection(proj)
        .ok_or_else(|| DatasetError::parse(&calib_path, 0, format!("row {}: singular intrinsics", options.camera_id)))?;
    let mut extrinsics = Matrix3x4::zeros();
    extrinsics.fixed_view_mut::<3, 3>(0, 0).copy_from(&tr_rot);
    extrinsics.set_column(3, &(tr_t + baseline));

    let image_dir = camera_index(&options.camera_id)
        .map(|n| root.join(format!("image_{n}")))
        .filter(|d| d.is_dir());
    let (width, height) = match (options.image_size, &image_dir) {
        (Some(size), _) => size,
        (None, Some(dir)) => png_dimensions(&dir.join(format!("{}.png", frame_name(frame_ids[0]))))?,
        (None, None) => {
            return Err(DatasetError::Layout(format!(
                "image size unknown for camera {}: no image directory and none configured",
                options.camera_id
            )))
        }
    };
    let camera = CalibratedCamera::new(k, extrinsics, width, height)?;

    let labels_dir = Some(root.join("labels")).filter(|d| d.is_dir());
    if let Some(dir) = &labels_dir {
        for &id in &frame_ids {
            let p = dir.join(format!("{}.label", frame_name(id)));
            if !p.is_file() {
                return Err(DatasetError::Layout(format!("missing label file {}", p.display())));
            }
        }
    }

    let poses_path = root.join("poses.txt");
    let poses = if poses_path.is_file() {
        let cam_poses = calib::parse_poses(&poses_path, &read_text(&poses_path)?)?;
        if cam_poses.len() <= *frame_ids.last().unwrap() as usize {
            return Err(DatasetError::parse(
                &poses_path,
                cam_poses.len(),
                format!("{} poses but frame {} present", cam_poses.len(), frame_ids.last().unwrap()),
            ));
        }
        let mut tr_h = Matrix4::identity();
        tr_h.fixed_view_mut::<3, 3>(0, 0).copy_from(&tr_rot);
        tr_h.fixed_view_mut::<3, 1>(0, 3).copy_from(&tr_t);
        let tr_inv = tr_h.try_inverse().expect("rigid transform is invertible");
        Some(cam_poses.iter().map(|p| tr_inv * p * tr_h).collect())
    } else {
        None
    };

    Ok(SequenceManifest {
        root,
        camera_id: options.camera_id.clone(),
        frame_ids,
        camera,
        calib,
        poses,
        labels_dir,
        image_dir,
    })
}

impl SequenceManifest {
    pub fn contains(&self, frame_id: u32) -> bool {
        self.frame_ids.binary_search(&frame_id).is_ok()
    }

    pub fn point_path(&self, frame_id: u32) -> PathBuf {
        self.root.join("velodyne").join(format!("{}.bin", frame_name(frame_id)))
    }

    pub fn image_path(&self, frame_id: u32) -> Option<PathBuf> {
        self.image_dir
            .as_ref()
            .map(|d| d.join(format!("{}.png", frame_name(frame_id))))
            .filter(|p| p.is_file())
    }

    /// world←LiDAR pose of a frame, when poses were provided.
    pub fn pose(&self, frame_id: u32) -> Option<&Matrix4<f64>> {
        self.poses.as_ref().and_then(|p| p.get(frame_id as usize))
    }

    pub fn load_frame(&self, frame_id: u32) -> Result<Frame, DatasetError> {
        load_frame(self, frame_id)
    }
}

pub fn load_frame(manifest: &SequenceManifest, frame_id: u32) -> Result<Frame, DatasetError> {
    if !manifest.contains(frame_id) {
        return Err(DatasetError::UnknownFrame(frame_id));
    }
    let path = manifest.point_path(frame_id);
    let bytes = fs::read(&path).map_err(|e| DatasetError::io(&path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(DatasetError::Data(format!(
            "{}: size {} is not a multiple of 16 bytes",
            path.display(),
            bytes.len()
        )));
    }
    let raw_points: Vec<Point3> = bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            Point3::new(f(0), f(1), f(2))
        })
        .collect();

    let raw_labels = match &manifest.labels_dir {
        Some(dir) => {
            let lpath = dir.join(format!("{}.label", frame_name(frame_id)));
            let lbytes = fs::read(&lpath).map_err(|e| DatasetError::io(&lpath, e))?;
            if lbytes.len() % 4 != 0 {
                return Err(DatasetError::Data(format!(
                    "{}: size {} is not a multiple of 4 bytes",
                    lpath.display(),
                    lbytes.len()
                )));
            }
            let labels: Vec<u32> = lbytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if labels.len() != raw_points.len() {
                return Err(DatasetError::Data(format!(
                    "frame {frame_id}: {} labels / {} points",
                    labels.len(),
                    raw_points.len()
                )));
            }
            Some(labels)
        }
        None => None,
    };

    let keep: Vec<bool> = raw_points
        .iter()
        .map(|p| p.is_finite() && !(p.x == 0.0 && p.y == 0.0 && p.z == 0.0))
        .collect();
    let dropped = keep.iter().filter(|k| !**k).count();
    let points: Vec<Point3> = raw_points
        .into_iter()
        .zip(&keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect();
    let labels = raw_labels.map(|raw| {
        let kept: Vec<u32> = raw.into_iter().zip(&keep).filter_map(|(l, k)| k.then_some(l)).collect();
        GroundTruthLabels::from_raw(&kept)
    });
    if dropped > 0 {
        tracing::debug!(frame_id, dropped, "dropped malformed points");
    }
    Ok(Frame {
        cloud: PointCloud::new(frame_id, points),
        labels,
        dropped,
    })
}

/// Keeps the points the camera sees. The returned map sends filtered
/// indices back to indices of the input cloud.
pub fn fov_filter(cloud: &PointCloud, cam: &CalibratedCamera) -> (PointCloud, Vec<usize>) {
    let projected = project_points(cloud, cam);
    let index_map: Vec<usize> = projected.indices().collect();
    let points = index_map.iter().map(|&i| cloud.points[i]).collect();
    (
        PointCloud {
            points,
            frame_id: cloud.frame_id,
            source_frame: cloud.source_frame,
        },
        index_map,
    )
}

/// Writers for fixture sequences on disk.
pub mod fixture {
    use super::*;

    pub fn write_points(path: &Path, points: &[Point3]) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(points.len() * 16);
        for p in points {
            for v in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)
    }

    pub fn write_labels(path: &Path, class_ids: &[u16], instance_ids: &[u16]) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(class_ids.len() * 4);
        for (c, i) in class_ids.iter().zip(instance_ids) {
            buf.extend_from_slice(&((*c as u32) | ((*i as u32) << 16)).to_le_bytes());
        }
        fs::write(path, buf)
    }

    /// A PNG signature and IHDR chunk; enough for size discovery.
    pub fn write_png_header(path: &Path, width: u32, height: u32) -> std::io::Result<()> {
        let mut buf = vec![0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];
        buf.extend_from_slice(&13u32.to_be_bytes());
        buf.extend_from_slice(b"IHDR");
        buf.extend_from_slice(&width.to_be_bytes());
        buf.extend_from_slice(&height.to_be_bytes());
        buf.extend_from_slice(&[8, 2, 0, 0, 0]);
        buf.extend_from_slice(&[0, 0, 0, 0]);
        fs::write(path, buf)
    }

    pub fn format_row(tag: &str, m: &Matrix3x4<f64>) -> String {
        let vals: Vec<String> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| format!("{:.12e}", m[(r, c)]))
            .collect();
        format!("{tag}: {}", vals.join(" "))
    }

    /// Writes a full sequence; `frames` holds `(id, points, class ids)`.
    pub fn write_sequence(
        root: &Path,
        projection: &Matrix3x4<f64>,
        velo_to_cam: &Matrix3x4<f64>,
        image_size: (u32, u32),
        frames: &[(u32, Vec<Point3>, Option<Vec<u16>>)],
    ) -> std::io::Result<()> {
        fs::create_dir_all(root.join("velodyne"))?;
        fs::create_dir_all(root.join("image_2"))?;
        let mut calib = String::new();
        for tag in ["P0", "P1", "P2", "P3"] {
            calib.push_str(&format_row(tag, projection));
            calib.push('\n');
        }
        calib.push_str(&format_row("Tr", velo_to_cam));
        calib.push('\n');
        fs::write(root.join("calib.txt"), calib)?;
        for (id, pts, classes) in frames {
            write_points(&root.join("velodyne").join(format!("{}.bin", frame_name(*id))), pts)?;
            write_png_header(
                &root.join("image_2").join(format!("{}.png", frame_name(*id))),
                image_size.0,
                image_size.1,
            )?;
            if let Some(classes) = classes {
                fs::create_dir_all(root.join("labels"))?;
                let inst = vec![0u16; classes.len()];
                write_labels(&root.join("labels").join(format!("{}.label", frame_name(*id))), classes, &inst)?;
            }
        }
        Ok(())
    }
}
