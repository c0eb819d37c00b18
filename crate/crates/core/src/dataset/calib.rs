//! KITTI odometry `calib.txt` and `poses.txt` parsing.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, SVD};

use super::DatasetError;

/// Tolerance on pose / LiDAR-to-camera rotation blocks read from disk.
pub const FILE_ROTATION_TOL: f64 = 1e-6;

/// Rows of `calib.txt` keyed by tag (`P0`..`P3`, `Tr`).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibFile {
    pub rows: BTreeMap<String, Matrix3x4<f64>>,
}

fn parse_row(path: &Path, line_no: usize, tag: &str, text: &str) -> Result<Matrix3x4<f64>, DatasetError> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| DatasetError::parse(path, line_no, format!("row {tag}: {e}")))?;
    if values.len() != 12 {
        return Err(DatasetError::parse(
            path,
            line_no,
            format!("row {tag}: expected 12 numbers, found {}", values.len()),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DatasetError::parse(path, line_no, format!("row {tag}: non-finite value")));
    }
    Ok(Matrix3x4::from_row_slice(&values))
}

pub fn parse_calib(path: &Path, text: &str) -> Result<CalibFile, DatasetError> {
    let mut rows = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (tag, rest) = line
            .split_once(':')
            .ok_or_else(|| DatasetError::parse(path, line_no, "expected `TAG: v1 .. v12`"))?;
        let tag = tag.trim();
        let m = parse_row(path, line_no, tag, rest)?;
        rows.insert(tag.to_owned(), m);
    }
    for required in ["Tr"] {
        if !rows.contains_key(required) {
            return Err(DatasetError::parse(path, 0, format!("missing row {required}")));
        }
    }
    Ok(CalibFile { rows })
}

/// Nearest rotation (Frobenius) to `m`, provided `m` is already a rotation
/// within [`FILE_ROTATION_TOL`].
pub fn orthonormalize(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let err = (m * m.transpose() - Matrix3::identity()).amax();
    if err > FILE_ROTATION_TOL || (m.determinant() - 1.0).abs() > FILE_ROTATION_TOL {
        return None;
    }
    let svd = SVD::new(*m, true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let r = u * vt;
    (r.determinant() > 0.0).then_some(r)
}

/// Splits a rectified projection row `P = K·[I | b]` into `K` and `b`.
pub fn split_projection(p: &Matrix3x4<f64>) -> Option<(Matrix3<f64>, nalgebra::Vector3<f64>)> {
    let k: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let b = k.try_inverse()? * p.column(3);
    Some((k, b))
}

pub fn to_homogeneous(m: &Matrix3x4<f64>) -> Matrix4<f64> {
    let mut h = Matrix4::identity();
    h.fixed_view_mut::<3, 4>(0, 0).copy_from(m);
    h
}

pub fn parse_poses(path: &Path, text: &str) -> Result<Vec<Matrix4<f64>>, DatasetError> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let m = parse_row(path, line_no, "pose", line)?;
        let rot: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let fixed = orthonormalize(&rot)
            .ok_or_else(|| DatasetError::parse(path, line_no, "pose rotation block is not a rotation"))?;
        let mut h = to_homogeneous(&m);
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&fixed);
        poses.push(h);
    }
    Ok(poses)
}
