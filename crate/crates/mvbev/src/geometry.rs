//! Camera geometry: pinhole projection, the ground-plane homography, and the
//! table-driven warp that moves per-view feature maps onto the shared BEV
//! grid (plus its exact scatter-add adjoint).
//!
//! Conventions, fixed once for the whole crate:
//! - `R` maps world coordinates to camera coordinates; the camera looks along
//!   its local +Z axis, +X is image-right, +Y is image-down.
//! - World Z is up; the ground plane is z = 0.
//! - BEV cell `(i, j)` covers world
//!   `[origin_x + i*cell, origin_x + (i+1)*cell) x [origin_y + j*cell, ...)`,
//!   so `i` indexes world X and `j` indexes world Y. Cells project at their
//!   centers.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (z_cam = {z_cam})")]
    BehindCamera { z_cam: f64 },
    #[error("degenerate camera: ground homography is singular or near-singular")]
    DegenerateCamera,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

// ---------------------------------------------------------------------------
// Small fixed-size linear algebra. Kept local: everything here is 3x3.
// ---------------------------------------------------------------------------

pub type Vec3 = [f64; 3];

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub fn identity() -> Self {
        Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn mul_mat(&self, other: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[r][k] * other.0[k][c]).sum();
            }
        }
        Mat3(out)
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse via the adjugate; `None` when the determinant is zero.
    pub fn inverse(&self) -> Option<Mat3> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let m = &self.0;
        let inv_d = 1.0 / d;
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = adj[r][c] * inv_d;
            }
        }
        Some(Mat3(out))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|row| row.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Intrinsics and extrinsics of one pinhole camera.
///
/// Serialized form (one JSON object per camera): `fx, fy, cx, cy, image_w,
/// image_h`, `R` as 9 row-major numbers, `t` as 3 numbers in meters.
/// Construction validates that `R` is a proper rotation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawCalibration", into = "RawCalibration")]
pub struct CameraCalibration {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_w: usize,
    pub image_h: usize,
    rotation: Mat3,
    translation: Vec3,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawCalibration {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    image_w: usize,
    image_h: usize,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl TryFrom<RawCalibration> for CameraCalibration {
    type Error = GeometryError;

    fn try_from(raw: RawCalibration) -> Result<Self, GeometryError> {
        let r = Mat3([
            [raw.r[0], raw.r[1], raw.r[2]],
            [raw.r[3], raw.r[4], raw.r[5]],
            [raw.r[6], raw.r[7], raw.r[8]],
        ]);
        CameraCalibration::new(
            raw.fx,
            raw.fy,
            raw.cx,
            raw.cy,
            raw.image_w,
            raw.image_h,
            r,
            raw.t,
        )
    }
}

impl From<CameraCalibration> for RawCalibration {
    fn from(c: CameraCalibration) -> RawCalibration {
        let m = c.rotation.0;
        RawCalibration {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            image_w: c.image_w,
            image_h: c.image_h,
            r: [
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ],
            t: c.translation,
        }
    }
}

const ROTATION_TOL: f64 = 1e-9;

impl CameraCalibration {
    /// Validates `fx, fy > 0` and that `rotation` is orthonormal with
    /// determinant 1 (both within 1e-9).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        image_w: usize,
        image_h: usize,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self, GeometryError> {
        if fx.is_nan() || fy.is_nan() || fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidCalibration(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        let rrt = rotation.mul_mat(&rotation.transpose());
        let id = Mat3::identity();
        for r in 0..3 {
            for c in 0..3 {
                if (rrt.0[r][c] - id.0[r][c]).abs() > ROTATION_TOL {
                    return Err(GeometryError::InvalidCalibration(
                        "R is not orthonormal".to_string(),
                    ));
                }
            }
        }
        if (rotation.det() - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidCalibration(
                "R has determinant != 1".to_string(),
            ));
        }
        Ok(CameraCalibration {
            fx,
            fy,
            cx,
            cy,
            image_w,
            image_h,
            rotation,
            translation,
        })
    }

    /// Camera positioned at `pos`, aimed at `look_at`, with world +Z as up.
    /// Falls back to world +X as image-right for straight-down cameras.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        image_w: usize,
        image_h: usize,
        pos: Vec3,
        target: Vec3,
    ) -> Result<Self, GeometryError> {
        let forward = normalize([target[0] - pos[0], target[1] - pos[1], target[2] - pos[2]]);
        let up = [0.0, 0.0, 1.0];
        let mut right = cross(forward, up);
        if norm(right) < 1e-9 {
            right = [1.0, 0.0, 0.0];
        }
        let right = normalize(right);
        let down = cross(forward, right);
        let rotation = Mat3([right, down, forward]);
        let translation = {
            let rp = rotation.mul_vec(pos);
            [-rp[0], -rp[1], -rp[2]]
        };
        CameraCalibration::new(fx, fy, cx, cy, image_w, image_h, rotation, translation)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    /// World point -> camera frame.
    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let rp = self.rotation.mul_vec(p);
        [
            rp[0] + self.translation[0],
            rp[1] + self.translation[1],
            rp[2] + self.translation[2],
        ]
    }
}

// ---------------------------------------------------------------------------
// BEV grid
// ---------------------------------------------------------------------------

/// The shared ground-plane grid all views are warped onto.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub h_g: usize,
    pub w_g: usize,
}

impl BevGrid {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        cell_size: f64,
        h_g: usize,
        w_g: usize,
    ) -> Result<Self, GeometryError> {
        if cell_size <= 0.0 || cell_size.is_nan() {
            return Err(GeometryError::InvalidGrid(format!(
                "cell_size must be positive, got {cell_size}"
            )));
        }
        if h_g == 0 || w_g == 0 {
            return Err(GeometryError::InvalidGrid(format!(
                "grid must have at least one cell, got {h_g}x{w_g}"
            )));
        }
        Ok(BevGrid {
            origin_x,
            origin_y,
            cell_size,
            h_g,
            w_g,
        })
    }

    /// World coordinates of the center of cell `(i, j)` on the ground plane.
    pub fn cell_center(&self, i: usize, j: usize) -> Vec3 {
        [
            self.origin_x + (i as f64 + 0.5) * self.cell_size,
            self.origin_y + (j as f64 + 0.5) * self.cell_size,
            0.0,
        ]
    }

    /// Grid cell containing the world point `(x, y)`, or `None` if outside.
    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let i = ((x - self.origin_x) / self.cell_size).floor();
        let j = ((y - self.origin_y) / self.cell_size).floor();
        if i >= 0.0 && j >= 0.0 && (i as usize) < self.h_g && (j as usize) < self.w_g {
            Some((i as usize, j as usize))
        } else {
            None
        }
    }

    pub fn contains_cell(&self, cell: (usize, usize)) -> bool {
        cell.0 < self.h_g && cell.1 < self.w_g
    }
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

/// Projects a world point (meters) to image pixels via the pinhole model.
pub fn project_world_to_image(
    calib: &CameraCalibration,
    p: Vec3,
) -> Result<(f64, f64), GeometryError> {
    let pc = calib.world_to_camera(p);
    if pc[2] <= 0.0 {
        return Err(GeometryError::BehindCamera { z_cam: pc[2] });
    }
    let u = calib.fx * pc[0] / pc[2] + calib.cx;
    let v = calib.fy * pc[1] / pc[2] + calib.cy;
    Ok((u, v))
}

const CONDITION_LIMIT: f64 = 1e12;

/// Homography mapping homogeneous ground-plane points `(X, Y, 1)` (world
/// meters, z = 0) to homogeneous image pixels: `H = K [r1 r2 t]`.
pub fn ground_homography(calib: &CameraCalibration) -> Result<Mat3, GeometryError> {
    let r = &calib.rotation.0;
    let t = calib.translation;
    let k = Mat3([
        [calib.fx, 0.0, calib.cx],
        [0.0, calib.fy, calib.cy],
        [0.0, 0.0, 1.0],
    ]);
    let rt = Mat3([
        [r[0][0], r[0][1], t[0]],
        [r[1][0], r[1][1], t[1]],
        [r[2][0], r[2][1], t[2]],
    ]);
    let h = k.mul_mat(&rt);
    match h.inverse() {
        Some(h_inv) => {
            let cond = h.frobenius_norm() * h_inv.frobenius_norm();
            if !cond.is_finite() || cond > CONDITION_LIMIT {
                Err(GeometryError::DegenerateCamera)
            } else {
                Ok(h)
            }
        }
        None => Err(GeometryError::DegenerateCamera),
    }
}

/// Per-BEV-cell lookup: the feature pixel a cell gathers from, or out of
/// view. Built once per (camera, grid, feature scale) and reused.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionTable {
    pub h_g: usize,
    pub w_g: usize,
    pub h_f: usize,
    pub w_f: usize,
    /// Row-major over cells `(i, j)`; `Some((row, col))` in feature
    /// coordinates, `None` when the cell is out of view.
    entries: Vec<Option<(u32, u32)>>,
}

impl ProjectionTable {
    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> Option<(u32, u32)> {
        self.entries[i * self.w_g + j]
    }

    pub fn entries(&self) -> &[Option<(u32, u32)>] {
        &self.entries
    }

    pub fn in_view_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    /// Builds a table directly from entries; panics if lengths disagree.
    pub fn from_entries(
        h_g: usize,
        w_g: usize,
        h_f: usize,
        w_f: usize,
        entries: Vec<Option<(u32, u32)>>,
    ) -> Self {
        assert_eq!(entries.len(), h_g * w_g);
        for e in entries.iter().flatten() {
            assert!((e.0 as usize) < h_f && (e.1 as usize) < w_f);
        }
        ProjectionTable {
            h_g,
            w_g,
            h_f,
            w_f,
            entries,
        }
    }
}

/// Discretizes the ground projection: each cell center is projected into the
/// image, scaled to feature coordinates and rounded to the nearest pixel.
/// Cells behind the camera or outside the feature map are out of view.
pub fn build_projection_table(
    calib: &CameraCalibration,
    grid: &BevGrid,
    h_f: usize,
    w_f: usize,
    image_to_feature_scale: f64,
) -> Result<ProjectionTable, GeometryError> {
    if h_f == 0 || w_f == 0 {
        return Err(GeometryError::ShapeMismatch {
            expected: "feature shape >= 1x1".to_string(),
            got: format!("{h_f}x{w_f}"),
        });
    }
    if image_to_feature_scale <= 0.0 || image_to_feature_scale.is_nan() {
        return Err(GeometryError::ShapeMismatch {
            expected: "positive image-to-feature scale".to_string(),
            got: format!("{image_to_feature_scale}"),
        });
    }
    // Surface degenerate cameras here as well, so a bad rig fails fast.
    ground_homography(calib)?;

    let mut entries = Vec::with_capacity(grid.h_g * grid.w_g);
    for i in 0..grid.h_g {
        for j in 0..grid.w_g {
            let center = grid.cell_center(i, j);
            let entry = match project_world_to_image(calib, center) {
                Ok((u, v)) => {
                    let col = (u * image_to_feature_scale).round();
                    let row = (v * image_to_feature_scale).round();
                    if row >= 0.0 && col >= 0.0 && (row as usize) < h_f && (col as usize) < w_f {
                        Some((row as u32, col as u32))
                    } else {
                        None
                    }
                }
                Err(GeometryError::BehindCamera { .. }) => None,
                Err(e) => return Err(e),
            };
            entries.push(entry);
        }
    }
    Ok(ProjectionTable {
        h_g: grid.h_g,
        w_g: grid.w_g,
        h_f,
        w_f,
        entries,
    })
}

/// Gathers per-view features onto the BEV grid. Out-of-view cells stay zero.
pub fn warp_to_bev(feature: &Tensor, table: &ProjectionTable) -> Result<Tensor, GeometryError> {
    let shape = feature.shape();
    if shape.len() != 3 || shape[1] != table.h_f || shape[2] != table.w_f {
        return Err(GeometryError::ShapeMismatch {
            expected: format!("(C, {}, {})", table.h_f, table.w_f),
            got: format!("{shape:?}"),
        });
    }
    let c_n = shape[0];
    let mut out = Tensor::zeros(&[c_n, table.h_g, table.w_g]);
    for c in 0..c_n {
        for i in 0..table.h_g {
            for j in 0..table.w_g {
                if let Some((row, col)) = table.entry(i, j) {
                    let v = feature.at3(c, row as usize, col as usize);
                    out.set3(c, i, j, v);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`warp_to_bev`]: scatter-adds BEV-space gradients back to the
/// feature pixels they were gathered from.
pub fn warp_backward(grad_bev: &Tensor, table: &ProjectionTable) -> Result<Tensor, GeometryError> {
    let shape = grad_bev.shape();
    if shape.len() != 3 || shape[1] != table.h_g || shape[2] != table.w_g {
        return Err(GeometryError::ShapeMismatch {
            expected: format!("(C, {}, {})", table.h_g, table.w_g),
            got: format!("{shape:?}"),
        });
    }
    let c_n = shape[0];
    let mut out = Tensor::zeros(&[c_n, table.h_f, table.w_f]);
    for c in 0..c_n {
        for i in 0..table.h_g {
            for j in 0..table.w_g {
                if let Some((row, col)) = table.entry(i, j) {
                    let idx = out.idx3(c, row as usize, col as usize);
                    out.data_mut()[idx] += grad_bev.at3(c, i, j);
                }
            }
        }
    }
    Ok(out)
}
