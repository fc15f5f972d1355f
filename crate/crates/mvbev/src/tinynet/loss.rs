//! Soft-target construction and the MSE losses (BEV occupancy and the
//! auxiliary per-view head/foot regression).

use super::{NetError, OccupancyMap};
use crate::geometry::{project_world_to_image, BevGrid, CameraCalibration};
use crate::tensor::Tensor;

/// Writes an unnormalized Gaussian (peak 1.0) centered on `(ci, cj)` into a
/// `h x w` buffer, truncated to a box of half-width ceil(3 sigma).
/// Overlapping peaks combine by pointwise maximum.
fn place_gaussian_max(buf: &mut [f32], h: usize, w: usize, ci: usize, cj: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    for di in -radius..=radius {
        let i = ci as i64 + di;
        if i < 0 || i >= h as i64 {
            continue;
        }
        for dj in -radius..=radius {
            let j = cj as i64 + dj;
            if j < 0 || j >= w as i64 {
                continue;
            }
            let d2 = (di * di + dj * dj) as f64;
            let val = (-d2 * inv_two_sigma2).exp() as f32;
            let slot = &mut buf[i as usize * w + j as usize];
            if val > *slot {
                *slot = val;
            }
        }
    }
}

/// Gaussian soft target over the BEV grid for a list of occupied cells.
/// `sigma` is in cells; an empty list gives the all-zero map.
pub fn gaussian_soft_target(
    positions: &[(usize, usize)],
    sigma: f64,
    grid: &BevGrid,
) -> Result<OccupancyMap, NetError> {
    if sigma <= 0.0 || sigma.is_nan() {
        return Err(NetError::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let mut map = OccupancyMap::zeros(grid.h_g, grid.w_g);
    for &(i, j) in positions {
        if !grid.contains_cell((i, j)) {
            return Err(NetError::PositionOutOfGrid {
                cell: (i, j),
                grid: (grid.h_g, grid.w_g),
            });
        }
        place_gaussian_max(&mut map.data, map.h, map.w, i, j, sigma);
    }
    Ok(map)
}

/// Sum-of-squares loss between a soft target and a prediction, with the
/// elementwise gradient w.r.t. the prediction. The loss accumulates in f64.
pub fn mse_loss(
    soft_target: &OccupancyMap,
    pred: &OccupancyMap,
) -> Result<(f64, OccupancyMap), NetError> {
    if soft_target.h != pred.h || soft_target.w != pred.w {
        return Err(NetError::ShapeMismatch {
            expected: format!("{}x{}", soft_target.h, soft_target.w),
            got: format!("{}x{}", pred.h, pred.w),
        });
    }
    let mut loss = 0.0f64;
    let mut grad = OccupancyMap::zeros(pred.h, pred.w);
    for ((g, &t), &p) in grad
        .data
        .iter_mut()
        .zip(soft_target.data.iter())
        .zip(pred.data.iter())
    {
        let diff = (t - p) as f64;
        loss += diff * diff;
        *g = 2.0 * (p - t);
    }
    Ok((loss, grad))
}

/// Per-view auxiliary supervision: projects each occupied cell's foot
/// (z = 0) and head (z = `ped_height`) into feature coordinates, builds
/// Gaussian soft targets (peak 1, `sigma_px` in feature pixels) for the
/// (head, foot) channels, and averages the two-channel MSE over the views.
/// Positions projecting outside a view contribute nothing to its target.
///
/// Returns the scalar loss and dL/d(aux map) per view.
pub fn perspective_loss(
    aux_maps: &[Tensor],
    calibs: &[&CameraCalibration],
    positions: &[(usize, usize)],
    grid: &BevGrid,
    sigma_px: f64,
    ped_height: f64,
) -> Result<(f64, Vec<Tensor>), NetError> {
    if aux_maps.len() != calibs.len() {
        return Err(NetError::ShapeMismatch {
            expected: format!("{} calibrations", aux_maps.len()),
            got: format!("{}", calibs.len()),
        });
    }
    if aux_maps.is_empty() {
        return Err(NetError::NoActiveViews);
    }
    let n = aux_maps.len() as f64;
    let mut total = 0.0f64;
    let mut grads = Vec::with_capacity(aux_maps.len());

    for (aux, cam) in aux_maps.iter().zip(calibs) {
        let shape = aux.shape();
        if shape.len() != 3 || shape[0] != 2 {
            return Err(NetError::ShapeMismatch {
                expected: "(2, h_f, w_f) aux map".to_string(),
                got: format!("{shape:?}"),
            });
        }
        let (h_f, w_f) = (shape[1], shape[2]);
        let scale = h_f as f64 / cam.image_h as f64;

        // Channel 0: head targets; channel 1: foot targets.
        let mut target = Tensor::zeros(&[2, h_f, w_f]);
        for &(i, j) in positions {
            if !grid.contains_cell((i, j)) {
                return Err(NetError::PositionOutOfGrid {
                    cell: (i, j),
                    grid: (grid.h_g, grid.w_g),
                });
            }
            let center = grid.cell_center(i, j);
            for (ch, z) in [(0usize, ped_height), (1usize, 0.0)] {
                if let Ok((u, v)) = project_world_to_image(cam, [center[0], center[1], z]) {
                    let col = (u * scale).round();
                    let row = (v * scale).round();
                    if row >= 0.0 && col >= 0.0 && (row as usize) < h_f && (col as usize) < w_f {
                        let base = ch * h_f * w_f;
                        place_gaussian_max(
                            &mut target.data_mut()[base..base + h_f * w_f],
                            h_f,
                            w_f,
                            row as usize,
                            col as usize,
                            sigma_px,
                        );
                    }
                }
            }
        }

        let mut grad = aux.zeros_like();
        let scale_g = (2.0 / n) as f32;
        for ((g, &t), &p) in grad
            .data_mut()
            .iter_mut()
            .zip(target.data().iter())
            .zip(aux.data().iter())
        {
            let diff = (t - p) as f64;
            total += diff * diff / n;
            *g = scale_g * (p - t);
        }
        grads.push(grad);
    }
    Ok((total, grads))
}
