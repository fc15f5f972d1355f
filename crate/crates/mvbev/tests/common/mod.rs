//! Independent f64 reference implementation of the detector's forward pass
//! and losses, written as straight-line code with its own data layout. Used
//! as the finite-difference substrate for gradient checks: it shares no code
//! with the implementation under test.

use mvbev::geometry::{project_world_to_image, BevGrid, CameraCalibration, ProjectionTable};
use mvbev::tensor::Tensor;
use mvbev::tinynet::{NetConfig, ParameterSet};

/// Dense rank-3 f64 buffer, `(c, h, w)` row-major.
#[derive(Clone)]
pub struct Buf3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Buf3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Buf3 {
            c,
            h,
            w,
            d: vec![0.0; c * h * w],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Buf3 {
            c: s[0],
            h: s[1],
            w: s[2],
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.d[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.d[(c * self.h + y) * self.w + x] = v;
    }
}

fn conv(input: &Buf3, weight: &[f64], bias: &[f64], c_out: usize, stride: usize, dil: usize, pad: usize) -> Buf3 {
    let k = 3usize;
    let span = dil * (k - 1) + 1;
    let oh = (input.h + 2 * pad - span) / stride + 1;
    let ow = (input.w + 2 * pad - span) / stride + 1;
    let mut out = Buf3::zeros(c_out, oh, ow);
    for oc in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..input.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky * dil) as isize - pad as isize;
                            let ix = (ox * stride + kx * dil) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= input.h as isize || ix >= input.w as isize {
                                continue;
                            }
                            let wv = weight[((oc * input.c + ic) * k + ky) * k + kx];
                            acc += wv * input.at(ic, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(oc, oy, ox, acc);
            }
        }
    }
    out
}

/// ReLU that also folds the sign pattern into an FNV-style hash, so a
/// finite-difference probe can tell when a perturbation crossed a kink.
fn relu_sig(x: &Buf3, sig: &mut u64) -> Buf3 {
    let mut out = x.clone();
    for v in out.d.iter_mut() {
        let positive = *v > 0.0;
        *sig = sig.wrapping_mul(0x100000001b3) ^ (positive as u64);
        if !positive {
            *v = 0.0;
        }
    }
    out
}

fn warp(feat: &Buf3, table: &ProjectionTable) -> Buf3 {
    let mut out = Buf3::zeros(feat.c, table.h_g, table.w_g);
    for c in 0..feat.c {
        for i in 0..table.h_g {
            for j in 0..table.w_g {
                if let Some((r, col)) = table.entry(i, j) {
                    out.set(c, i, j, feat.at(c, r as usize, col as usize));
                }
            }
        }
    }
    out
}

fn weights64(params: &ParameterSet, name: &str) -> Vec<f64> {
    params.get(name).data().iter().map(|&v| v as f64).collect()
}

/// Reference forward pass: extractor, warp, view average, dilated head,
/// logistic. Returns the occupancy map, the per-view aux maps, and the hash
/// of every ReLU's sign pattern.
pub fn ref_forward(
    params: &ParameterSet,
    cfg: &NetConfig,
    views: &[Tensor],
    tables: &[ProjectionTable],
    active: &[bool],
) -> (Buf3, Vec<Buf3>, u64) {
    let c = cfg.c_feat;
    let mut sig = 0xcbf29ce484222325u64;
    let mut bev_sum: Option<Buf3> = None;
    let mut aux_maps = Vec::new();
    let mut n_active = 0usize;
    for (v, view) in views.iter().enumerate() {
        if !active[v] {
            continue;
        }
        n_active += 1;
        let mut input = Buf3::from_tensor(view);
        for v in input.d.iter_mut() {
            *v -= mvbev::tinynet::INPUT_CENTER as f64;
        }
        let z1 = conv(&input, &weights64(params, "ext1.weight"), &weights64(params, "ext1.bias"), c, 2, 1, 1);
        let a1 = relu_sig(&z1, &mut sig);
        let z2 = conv(&a1, &weights64(params, "ext2.weight"), &weights64(params, "ext2.bias"), c, 2, 1, 1);
        let feat = relu_sig(&z2, &mut sig);
        let za1 = conv(&feat, &weights64(params, "aux1.weight"), &weights64(params, "aux1.bias"), c, 1, 1, 1);
        let aa1 = relu_sig(&za1, &mut sig);
        let aux = conv(&aa1, &weights64(params, "aux2.weight"), &weights64(params, "aux2.bias"), 2, 1, 1, 1);
        aux_maps.push(aux);
        let bev = warp(&feat, &tables[v]);
        bev_sum = Some(match bev_sum {
            None => bev,
            Some(mut acc) => {
                for (a, b) in acc.d.iter_mut().zip(bev.d.iter()) {
                    *a += b;
                }
                acc
            }
        });
    }
    let mut mean = bev_sum.expect("at least one active view");
    for v in mean.d.iter_mut() {
        *v /= n_active as f64;
    }
    let zb1 = conv(&mean, &weights64(params, "bev1.weight"), &weights64(params, "bev1.bias"), c, 1, 1, 1);
    let b1 = relu_sig(&zb1, &mut sig);
    let zb2 = conv(&b1, &weights64(params, "bev2.weight"), &weights64(params, "bev2.bias"), c, 1, 2, 2);
    let b2 = relu_sig(&zb2, &mut sig);
    let b3 = conv(&b2, &weights64(params, "bev3.weight"), &weights64(params, "bev3.bias"), 1, 1, 4, 4);
    let mut occupancy = b3;
    for v in occupancy.d.iter_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    (occupancy, aux_maps, sig)
}

/// Gaussian soft target over the grid in f64, max-combined, truncated at
/// ceil(3 sigma).
pub fn ref_bev_target(positions: &[(usize, usize)], sigma: f64, grid: &BevGrid) -> Vec<f64> {
    let mut map = vec![0.0f64; grid.h_g * grid.w_g];
    let radius = (3.0 * sigma).ceil() as i64;
    for &(ci, cj) in positions {
        for di in -radius..=radius {
            for dj in -radius..=radius {
                let i = ci as i64 + di;
                let j = cj as i64 + dj;
                if i < 0 || j < 0 || i >= grid.h_g as i64 || j >= grid.w_g as i64 {
                    continue;
                }
                let d2 = (di * di + dj * dj) as f64;
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let slot = &mut map[i as usize * grid.w_g + j as usize];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    map
}

/// Per-view (head, foot) targets in feature coordinates, matching the
/// projection and rounding of the implementation.
pub fn ref_persp_target(
    cam: &CameraCalibration,
    positions: &[(usize, usize)],
    grid: &BevGrid,
    h_f: usize,
    w_f: usize,
    sigma_px: f64,
    ped_height: f64,
) -> Buf3 {
    let mut target = Buf3::zeros(2, h_f, w_f);
    let scale = h_f as f64 / cam.image_h as f64;
    let radius = (3.0 * sigma_px).ceil() as i64;
    for &(i, j) in positions {
        let center = grid.cell_center(i, j);
        for (ch, z) in [(0usize, ped_height), (1usize, 0.0)] {
            let Ok((u, v)) = project_world_to_image(cam, [center[0], center[1], z]) else {
                continue;
            };
            let col = (u * scale).round();
            let row = (v * scale).round();
            if !(row >= 0.0 && col >= 0.0 && (row as usize) < h_f && (col as usize) < w_f) {
                continue;
            }
            let (cr, cc) = (row as i64, col as i64);
            for dr in -radius..=radius {
                for dc in -radius..=radius {
                    let r = cr + dr;
                    let c = cc + dc;
                    if r < 0 || c < 0 || r >= h_f as i64 || c >= w_f as i64 {
                        continue;
                    }
                    let d2 = (dr * dr + dc * dc) as f64;
                    let v = (-d2 / (2.0 * sigma_px * sigma_px)).exp();
                    let idx = (ch * h_f + r as usize) * w_f + c as usize;
                    if v > target.d[idx] {
                        target.d[idx] = v;
                    }
                }
            }
        }
    }
    target
}

/// Scenario bundled for the gradient checks: everything the total loss
/// depends on besides the parameters.
pub struct RefScenario<'a> {
    pub cfg: &'a NetConfig,
    pub views: &'a [Tensor],
    pub tables: &'a [ProjectionTable],
    pub active: &'a [bool],
    pub calibs: &'a [CameraCalibration],
    pub positions: &'a [(usize, usize)],
    pub grid: &'a BevGrid,
    pub sigma_bev: f64,
    pub sigma_px: f64,
    pub ped_height: f64,
    pub with_persp: bool,
}

/// Total reference loss (BEV Gaussian-target MSE plus, optionally, the
/// view-averaged perspective MSE) and the ReLU sign-pattern hash of the
/// underlying forward pass.
pub fn ref_total_loss_sig(params: &ParameterSet, sc: &RefScenario<'_>) -> (f64, u64) {
    let (occ, aux_maps, sig) = ref_forward(params, sc.cfg, sc.views, sc.tables, sc.active);
    let target = ref_bev_target(sc.positions, sc.sigma_bev, sc.grid);
    let mut loss: f64 = occ
        .d
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| (t - p) * (t - p))
        .sum();
    if sc.with_persp {
        let active_calibs: Vec<&CameraCalibration> = sc
            .active
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(v, _)| &sc.calibs[v])
            .collect();
        let n = aux_maps.len() as f64;
        for (aux, cam) in aux_maps.iter().zip(active_calibs) {
            let t = ref_persp_target(cam, sc.positions, sc.grid, aux.h, aux.w, sc.sigma_px, sc.ped_height);
            loss += aux
                .d
                .iter()
                .zip(t.d.iter())
                .map(|(&p, &tv)| (tv - p) * (tv - p))
                .sum::<f64>()
                / n;
        }
    }
    (loss, sig)
}

#[allow(dead_code)]
pub fn ref_total_loss(params: &ParameterSet, sc: &RefScenario<'_>) -> f64 {
    ref_total_loss_sig(params, sc).0
}
